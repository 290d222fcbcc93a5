use std::path::{Path, PathBuf};

use log::info;
use mdscore::egt::EgtModel;
use mdscore::geometry::{
    armse, copy_previous_armse, copy_start_armse, kabsch_align, kabsch_armse, read_xyz_file, write_xyz_file,
};
use mdscore::refmd::{simulate_logged, thermal_velocities, Fixture, SimulateOptions};
use mdscore::sampler::{rollout_from, GaussianNoise, SamplerMode};
use mdscore::train::{
    atomic_write, load_checkpoint, s2l_split, save_checkpoint, train_loop_with, write_history, CheckpointMeta,
    FramePairDataset,
};
use mdscore::{Trajectory, Vec3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::Failure;

/// Creates the output directory and records the resolved configuration.
fn prepare_out(cfg: &RunConfig, command: &str) -> Result<(), Failure> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Failure::usage(format!("{}: {e}", cfg.out.display())))?;
    atomic_write(&cfg.out_path(&format!("{command}.resolved.toml")), cfg.to_toml().as_bytes())?;
    Ok(())
}

fn read_traj(path: &Path) -> Result<Trajectory, Failure> {
    read_xyz_file(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn required<'a>(v: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, Failure> {
    v.as_deref().ok_or_else(|| Failure::usage(format!("missing {what}")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serialises");
    bytes.push(b'\n');
    atomic_write(path, &bytes)?;
    Ok(())
}

#[derive(Serialize)]
struct EnergyTrace {
    potential: Vec<f64>,
    kinetic: Vec<f64>,
    boost: Vec<f64>,
    total: Vec<f64>,
    /// max |E(t) - E(0)| / |E(0)| of the total.
    relative_drift: f64,
}

#[derive(Serialize)]
struct SimulationMeta<'a> {
    fixture: &'a str,
    seed: u64,
    units: &'static str,
    velocity_units: &'static str,
    dt: f64,
    steps: usize,
    record_every: usize,
    frame_dt: f64,
    frames: usize,
    energy: EnergyTrace,
}

pub fn simulate(cfg: &RunConfig) -> Result<(), Failure> {
    let s = &cfg.simulate;
    let fx = Fixture::load(&s.fixture)?;
    let sys = fx.system()?;
    let dt = s.dt.unwrap_or(fx.dt);
    if s.steps == 0 || s.record_every == 0 {
        return Err(Failure::usage("steps and record_every must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut start = fx.start()?;
    if let Some(kt) = s.temperature {
        start.velocities = thermal_velocities(&fx.masses(), &start.positions, kt, &mut rng)?;
    }
    prepare_out(cfg, "simulate")?;

    let opts = SimulateOptions {
        boost: s.gamd.as_ref(),
        thermostat: s.thermostat.as_ref().map(|t| (t, &mut rng)),
        record_every: s.record_every,
    };
    let (traj, log) = simulate_logged(&sys, &start, dt, s.steps, opts)?;
    let traj = traj.with_meta("fixture", &fx.name).with_meta("seed", cfg.seed);

    let total: Vec<f64> = (0..log.potential.len()).map(|i| log.potential[i] + log.kinetic[i] + log.boost[i]).collect();
    let e0 = total[0];
    let relative_drift = total.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max) / e0.abs().max(f64::MIN_POSITIVE);
    let path = cfg.out_path(&s.output);
    write_xyz_file(&traj, &path)?;
    let meta = SimulationMeta {
        fixture: &fx.name,
        seed: cfg.seed,
        units: "reduced",
        velocity_units: "length/frame",
        dt,
        steps: s.steps,
        record_every: s.record_every,
        frame_dt: traj.dt,
        frames: traj.len(),
        energy: EnergyTrace { potential: log.potential, kinetic: log.kinetic, boost: log.boost, total, relative_drift },
    };
    write_json(&path.with_extension("json"), &meta)?;
    info!("wrote {} frames to {} (energy drift {relative_drift:.2e})", traj.len(), path.display());
    Ok(())
}

/// Default hold-out: about a tenth of the pairs, even, at least 2.
fn default_holdout(pairs: usize) -> usize {
    (2 * (pairs / 20)).max(2)
}

pub fn train(cfg: &mut RunConfig) -> Result<(), Failure> {
    cfg.train.optim.seed = cfg.seed;
    let t = &cfg.train;
    if t.data.is_empty() {
        return Err(Failure::usage("no training data: pass --data or set [train] data"));
    }
    t.model.validate()?;
    t.diffusion.validate()?;
    t.optim.validate()?;
    let (mut train_parts, mut val_parts) = (vec![], vec![]);
    for path in &t.data {
        let traj = read_traj(path)?;
        let pairs = traj.len().saturating_sub(1);
        let n_holdout = t.n_holdout.unwrap_or_else(|| default_holdout(pairs));
        let n_train = t.n_train.unwrap_or(pairs.saturating_sub(n_holdout));
        let (tr, va, _) =
            s2l_split(&traj, n_train, n_holdout).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        train_parts.push(tr);
        val_parts.push(va);
    }
    let data = FramePairDataset::concat(train_parts);
    let val = FramePairDataset::concat(val_parts);
    info!("{} training pairs, {} validation pairs", data.len(), val.len());
    prepare_out(cfg, "train")?;

    let t = &cfg.train;
    let ckpt = cfg.out_path(&t.checkpoint);
    let meta = |epoch| CheckpointMeta { seed: cfg.seed, diffusion: t.diffusion, epoch };
    let model = EgtModel::new(t.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let every = t.optim.eval_every.max(1);
    let mut hook = |rec: &mdscore::train::EpochRecord, m: &EgtModel| {
        if rec.epoch % every == 0 {
            save_checkpoint(&ckpt, m, &meta(rec.epoch))?;
        }
        Ok(())
    };
    let (model, history) = train_loop_with(model, &data, &val, &t.diffusion, &t.optim, &mut hook)?;
    save_checkpoint(&ckpt, &model, &meta(history.len()))?;
    let mut lines = vec![];
    write_history(&history, &mut lines)?;
    atomic_write(&cfg.out_path(&t.history), &lines)?;
    let last = history.last().expect("at least one epoch");
    info!("trained {} epochs; final train {:.5}, val {:.5}", history.len(), last.train_loss, last.val_loss);
    Ok(())
}

pub fn generate(cfg: &RunConfig) -> Result<(), Failure> {
    let g = &cfg.generate;
    let ckpt = required(&g.checkpoint, "checkpoint (--checkpoint)")?;
    let start_path = required(&g.start, "start trajectory (--start)")?;
    let (model, meta) = load_checkpoint(ckpt).map_err(|e| Failure::usage(e.to_string()))?;
    let start = read_traj(start_path)?;
    let k = g.start_frame.unwrap_or(start.len() - 1);
    if k >= start.len() {
        return Err(Failure::usage(format!("start frame {k} but {} has {} frames", start_path.display(), start.len())));
    }
    if g.frames == 0 {
        return Err(Failure::usage("frames must be at least 1"));
    }
    g.sampler.validate()?;
    prepare_out(cfg, "generate")?;

    let mut noise = GaussianNoise(ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut traj =
        rollout_from(&model, &start.frames[..=k], g.frames, start.dt, &meta.diffusion.schedule, &g.sampler, &mut noise)?;
    traj.meta = start.meta.clone();
    let mode = match g.sampler.mode {
        SamplerMode::Ode => "ode",
        SamplerMode::PredictorCorrector => "pc",
    };
    let traj = traj.with_meta("first_generated", k + 1).with_meta("sampler", mode).with_meta("seed", cfg.seed);
    let path = cfg.out_path(&g.output);
    write_xyz_file(&traj, &path)?;
    info!("wrote {} generated frames after frame {k} to {}", g.frames, path.display());
    Ok(())
}

#[derive(Serialize)]
struct Report {
    t1: usize,
    tn: usize,
    armse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    kabsch_armse: Option<f64>,
    /// Absent when the window starts at frame 0.
    copy_previous_armse: Option<f64>,
    copy_start_armse: f64,
}

fn frame_error(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>().sqrt()
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), Failure> {
    let e = &cfg.evaluate;
    let gen = read_traj(required(&e.generated, "generated trajectory")?)?;
    let reference = read_traj(required(&e.reference, "reference trajectory")?)?;
    if gen.atom_numbers() != reference.atom_numbers() {
        return Err(Failure::usage("generated and reference trajectories have different atom rosters"));
    }
    let t1 = e.t1.or_else(|| gen.meta.get("first_generated").and_then(|v| v.parse().ok())).unwrap_or(1);
    let tn = e.tn.unwrap_or(gen.len().min(reference.len()) - 1);
    let report = Report {
        t1,
        tn,
        armse: armse(&gen, &reference, t1, tn)?,
        kabsch_armse: e.kabsch.then(|| kabsch_armse(&gen, &reference, t1, tn)).transpose()?,
        copy_previous_armse: (t1 > 0).then(|| copy_previous_armse(&reference, t1, tn)).transpose()?,
        copy_start_armse: copy_start_armse(&reference, t1, tn)?,
    };
    prepare_out(cfg, "evaluate")?;
    let text = serde_json::to_string_pretty(&report).expect("report serialises");
    println!("{text}");
    write_json(&cfg.out_path(&e.output), &report)?;

    if let Some(csv) = &e.dump_csv {
        let mut out = String::from("frame,model,copy_previous,copy_start");
        if e.kabsch {
            out.push_str(",kabsch");
        }
        out.push('\n');
        for t in t1..=tn {
            let target = &reference.frames[t].positions;
            let prev = if t1 > 0 { frame_error(&reference.frames[t1 - 1].positions, target).to_string() } else { String::new() };
            out.push_str(&format!(
                "{t},{},{prev},{}",
                frame_error(&gen.frames[t].positions, target),
                frame_error(&reference.frames[0].positions, target)
            ));
            if e.kabsch {
                out.push_str(&format!(",{}", frame_error(&kabsch_align(&gen.frames[t].positions, target), target)));
            }
            out.push('\n');
        }
        atomic_write(csv, out.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_default_is_even_and_positive() {
        for pairs in [3, 10, 99, 1000, 4999] {
            let h = default_holdout(pairs);
            assert!(h >= 2 && h % 2 == 0);
            assert!(h <= pairs.max(2));
        }
        assert_eq!(default_holdout(1000), 100);
    }
}

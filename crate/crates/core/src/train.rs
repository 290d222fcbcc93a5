//! Frame-pair datasets, the denoising score-matching training loop,
//! learning-rate scheduling and checkpoints.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::egt::{egt_param_gradients, vecs_to_matrix, BatchItem, Dropout, EgtConfig, EgtModel, Gradients, GraphBatch};
use crate::geometry::copy_start_armse;
use crate::sde::{acceleration_sq, prepare_dsm_sample, weighted_sq_error, DiffusionConfig, DsmSample};
use crate::{Conformation, Error, Result, Trajectory};

/// Supervision pair `(frame t, frame t+1)` with the acceleration at `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub current: Conformation,
    pub next: Conformation,
    /// `None` for `t < 2`, where no acceleration is available.
    pub a_sq: Option<f64>,
    /// Index into [`FramePairDataset::sources`].
    pub source: usize,
    pub t: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FramePairDataset {
    pub pairs: Vec<FramePair>,
    pub sources: Vec<String>,
}

impl FramePairDataset {
    /// Pairs `(t, t+1)` for `t` in `start..start + n_pairs`.
    pub fn from_range(traj: &Trajectory, name: &str, start: usize, n_pairs: usize) -> Result<Self> {
        if start + n_pairs + 1 > traj.len() {
            return Err(Error::arg(format!(
                "{n_pairs} pairs from frame {start} need {} frames, trajectory has {}",
                start + n_pairs + 1,
                traj.len()
            )));
        }
        let pairs = (start..start + n_pairs)
            .map(|t| {
                Ok(FramePair {
                    current: traj.frames[t].clone(),
                    next: traj.frames[t + 1].clone(),
                    a_sq: if t >= 2 { Some(acceleration_sq(traj, t)?) } else { None },
                    source: 0,
                    t,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { pairs, sources: vec![name.to_string()] })
    }

    /// Every consecutive pair of `traj`.
    pub fn from_trajectory(traj: &Trajectory, name: &str) -> Result<Self> {
        if traj.len() < 2 {
            return Err(Error::arg("a trajectory needs at least two frames to form a pair"));
        }
        Self::from_range(traj, name, 0, traj.len() - 1)
    }

    /// Concatenates datasets, renumbering sources.
    pub fn concat(parts: impl IntoIterator<Item = FramePairDataset>) -> Self {
        let mut out = Self::default();
        for part in parts {
            let base = out.sources.len();
            out.sources.extend(part.sources);
            out.pairs.extend(part.pairs.into_iter().map(|mut p| {
                p.source += base;
                p
            }));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Single-trajectory split: the first `n_train` pairs train, the next
/// `n_holdout` are halved into validation and test.
pub fn s2l_split(
    traj: &Trajectory,
    n_train: usize,
    n_holdout: usize,
) -> Result<(FramePairDataset, FramePairDataset, FramePairDataset)> {
    if n_holdout % 2 != 0 {
        return Err(Error::arg(format!("n_holdout must be even, got {n_holdout}")));
    }
    if n_train + n_holdout + 1 > traj.len() {
        return Err(Error::arg(format!(
            "{} pairs need {} frames, trajectory has {}",
            n_train + n_holdout,
            n_train + n_holdout + 1,
            traj.len()
        )));
    }
    let half = n_holdout / 2;
    Ok((
        FramePairDataset::from_range(traj, "train", 0, n_train)?,
        FramePairDataset::from_range(traj, "val", n_train, half)?,
        FramePairDataset::from_range(traj, "test", n_train + half, half)?,
    ))
}

/// Molecule-level split: the `k` trajectories with the largest copy-start
/// ARMSE are held out. Returns `(train, validation)` indices in ascending order.
pub fn o2o_split(trajs: &[Trajectory], k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if k >= trajs.len() && !(k == 0 && trajs.is_empty()) {
        return Err(Error::arg(format!("need more than {k} trajectories, got {}", trajs.len())));
    }
    let scores = trajs
        .iter()
        .map(|t| copy_start_armse(t, 0, t.len() - 1))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..trajs.len()).collect();
    // stable sort keeps identifier order among ties
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut val = order[..k].to_vec();
    let mut train = order[k..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Interval, in epochs, between progress reports and intermediate
    /// checkpoints. Validation itself runs every epoch.
    pub eval_every: usize,
    pub seed: u64,
    pub lr_floor: f64,
    pub plateau_patience: usize,
    /// Evaluate batch chunks on the rayon pool and sum gradients in chunk order.
    pub parallel: bool,
    /// Items per chunk in parallel mode.
    pub chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 1e-10,
            epochs: 200,
            batch: 200,
            eval_every: 5,
            seed: 1,
            lr_floor: 1e-7,
            plateau_patience: 5,
            parallel: false,
            chunk: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = self.epochs > 0 && self.batch > 0 && self.eval_every > 0 && self.plateau_patience > 0 && self.chunk > 0;
        if !pos || !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.lr_floor >= 0.0) {
            return Err(Error::arg(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(model: &EgtModel, weight_decay: f64) -> Self {
        let zeros = Gradients::zeros_like(model).tensors;
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, model: &mut EgtModel, grads: &Gradients, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let mut k = 0;
        model.visit_mut(&mut |_, p| {
            let g = &grads.tensors[k];
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let step = (*m / bc1) / ((*v / bc2).sqrt() + eps) + wd * *p;
                *p -= lr * step;
            });
            k += 1;
        });
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// improvement of the monitored loss.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub floor: f64,
    best: f64,
    bad: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, floor: f64) -> Self {
        Self { lr, factor: 0.1, patience, floor, best: f64::INFINITY, bad: 0 }
    }

    /// Feeds one epoch's loss; returns true when the rate was reduced.
    pub fn step(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.bad = 0;
            return false;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            self.bad = 0;
            self.lr = (self.lr * self.factor).max(self.floor);
            return true;
        }
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

fn draw_sample<R: Rng + ?Sized>(pair: &FramePair, diff: &DiffusionConfig, rng: &mut R) -> Result<DsmSample> {
    let s = rng.random_range(diff.s_min..=1.0);
    let sigma = diff.schedule.sigma_for(pair.a_sq);
    prepare_dsm_sample(&pair.current, &pair.next, sigma, s, rng)
}

/// Loss `sum_k weight_k ||score_k - target_k||^2 / denom` and its gradients.
fn chunk_gradients(
    model: &EgtModel,
    samples: &[DsmSample],
    denom: f64,
    dropout_seed: Option<u64>,
) -> Result<(f64, Gradients)> {
    let items: Vec<_> = samples.iter().map(|s| BatchItem { conf: &s.disturbed, s: s.s, sigma: s.sigma }).collect();
    let batch = GraphBatch::new(model, &items)?;
    let mut target = Vec::new();
    let mut weight = Vec::new();
    for s in samples {
        target.extend_from_slice(&s.target);
        weight.extend(std::iter::repeat_n(s.weight / denom, s.target.len()));
    }
    let target = vecs_to_matrix(&target);
    let weight = Array2::from_shape_vec((weight.len(), 1), weight).expect("column");
    let loss = |tape: &mut crate::autodiff::Tape, score| {
        let t = tape.input(target);
        let w = tape.input(weight);
        let d = tape.sub(score, t);
        let sq = tape.mul(d, d);
        let wsq = tape.mul_col(sq, w);
        Ok(tape.sum(wsq))
    };
    match dropout_seed {
        Some(seed) if model.config.dropout > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut d = Dropout { p: model.config.dropout, rng: &mut rng };
            egt_param_gradients(model, &batch, Some(&mut d), loss)
        }
        _ => egt_param_gradients(model, &batch, None, loss),
    }
}

fn batch_gradients(model: &EgtModel, samples: &[DsmSample], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(f64, Gradients)> {
    let denom = samples.len() as f64;
    if !cfg.parallel {
        return chunk_gradients(model, samples, denom, Some(rng.next_u64()));
    }
    let chunks: Vec<_> = samples.chunks(cfg.chunk).map(|c| (c, rng.next_u64())).collect();
    let parts: Vec<_> =
        chunks.par_iter().map(|&(c, seed)| chunk_gradients(model, c, denom, Some(seed))).collect();
    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(model);
    for part in parts {
        let (l, g) = part?;
        total += l;
        grads.add_assign(&g);
    }
    Ok((total, grads))
}

/// Mean DSM loss of `model` over prepared samples, without dropout.
pub fn dsm_loss(model: &EgtModel, samples: &[DsmSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::arg("empty DSM batch"));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(64) {
        let items: Vec<_> = chunk.iter().map(|s| BatchItem { conf: &s.disturbed, s: s.s, sigma: s.sigma }).collect();
        let scores = model.score_batch(&items)?;
        total += chunk.iter().zip(&scores).map(|(s, sc)| weighted_sq_error(s, sc)).sum::<f64>();
    }
    let loss = total / samples.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite DSM loss".into()));
    }
    Ok(loss)
}

/// Per-epoch callback: receives the record and the current model.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, &EgtModel) -> Result<()> + 'a;

/// Trains `model` on `data`, validating on `val` after every epoch.
pub fn train_loop(
    model: EgtModel,
    data: &FramePairDataset,
    val: &FramePairDataset,
    diff: &DiffusionConfig,
    cfg: &TrainConfig,
) -> Result<(EgtModel, Vec<EpochRecord>)> {
    train_loop_with(model, data, val, diff, cfg, &mut |_, _| Ok(()))
}

pub fn train_loop_with(
    mut model: EgtModel,
    data: &FramePairDataset,
    val: &FramePairDataset,
    diff: &DiffusionConfig,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<(EgtModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    diff.validate()?;
    if data.is_empty() || val.is_empty() {
        return Err(Error::arg("training and validation sets must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // fixed validation perturbations, reused every epoch
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_7a11_da7e);
    let val_samples = val.pairs.iter().map(|p| draw_sample(p, diff, &mut val_rng)).collect::<Result<Vec<_>>>()?;

    let mut opt = AdamW::new(&model, cfg.weight_decay);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_patience, cfg.lr_floor);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (step, idx) in order.chunks(cfg.batch).enumerate() {
            let samples = idx.iter().map(|&i| draw_sample(&data.pairs[i], diff, &mut rng)).collect::<Result<Vec<_>>>()?;
            let (loss, grads) = batch_gradients(&model, &samples, cfg, &mut rng).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, step {step}: {m}")),
                other => other,
            })?;
            opt.update(&mut model, &grads, sched.lr);
            if !model.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch}, step {step}: non-finite parameters")));
            }
            sum += loss * samples.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            train_loss: sum / data.len() as f64,
            val_loss: dsm_loss(&model, &val_samples)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, validation: {e}")))?,
            lr: sched.lr,
        };
        if sched.step(record.val_loss) {
            log::info!("epoch {epoch}: learning rate reduced to {:.3e}", sched.lr);
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            log::info!(
                "epoch {epoch}: train {:.5} val {:.5} lr {:.2e}",
                record.train_loss,
                record.val_loss,
                record.lr
            );
        }
        hook(&record, &model)?;
        history.push(record);
    }
    Ok((model, history))
}

/// Writes one JSON object per epoch.
pub fn write_history<W: Write>(history: &[EpochRecord], mut out: W) -> Result<()> {
    for r in history {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_history(text: &str) -> Result<Vec<EpochRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, reason: e.to_string() }))
        .collect()
}

const MAGIC: &[u8; 4] = b"MDSC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything besides the weights that a checkpoint records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub diffusion: DiffusionConfig,
    /// Last completed epoch.
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: EgtConfig,
    meta: CheckpointMeta,
    params: Vec<(String, [usize; 2])>,
}

/// Serialises `model` as `MDSC`, a little-endian `u32` version, a `u64`
/// header length, a JSON header and the raw `f64` weights in visit order.
pub fn checkpoint_bytes(model: &EgtModel, meta: &CheckpointMeta) -> Vec<u8> {
    let params = model.param_names().into_iter().zip(model.param_shapes()).map(|(n, (r, c))| (n, [r, c])).collect();
    let header = Header { version: CHECKPOINT_VERSION, config: model.config.clone(), meta: meta.clone(), params };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.n_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    model.visit(&mut |_, a| {
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(EgtModel, CheckpointMeta)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing MDSC header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!("file version {version}, this build reads {CHECKPOINT_VERSION}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    // any RNG works: every weight is overwritten below
    let mut model = EgtModel::new(header.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expect: Vec<_> = model.param_names().into_iter().zip(model.param_shapes()).map(|(n, (r, c))| (n, [r, c])).collect();
    if expect != header.params {
        return Err(Error::Incompatible("parameter names or shapes differ from the model layout".into()));
    }
    let mut data = &bytes[16 + hlen..];
    let need = 8 * model.n_params();
    if data.len() != need {
        return Err(Error::Checkpoint(format!("expected {need} bytes of weights, found {}", data.len())));
    }
    model.visit_mut(&mut |_, a| {
        for v in a.iter_mut() {
            let mut buf = [0u8; 8];
            data.read_exact(&mut buf).expect("length checked");
            *v = f64::from_le_bytes(buf);
        }
    });
    Ok((model, header.meta))
}

/// Writes via a temporary file and rename so readers never see partial output.
pub fn save_checkpoint(path: &Path, model: &EgtModel, meta: &CheckpointMeta) -> Result<()> {
    atomic_write(path, &checkpoint_bytes(model, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(EgtModel, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    checkpoint_from_bytes(&bytes)
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::arg(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSizes;
    use crate::Vec3;

    fn line_traj(n: usize, speed: f64) -> Trajectory {
        let frames = (0..n)
            .map(|t| {
                let x = vec![Vec3::new(speed * t as f64, 0.0, 0.0), Vec3::new(1.0, 1.0, 0.0)];
                Conformation::new(x, vec![Vec3::new(speed, 0.0, 0.0), Vec3::zeros()], vec![1, 1]).unwrap()
            })
            .collect();
        Trajectory::new(frames, 1.0).unwrap()
    }

    fn tiny() -> EgtConfig {
        EgtConfig {
            layers: 1,
            heads: 2,
            feature_dim: 8,
            attention_dim: 8,
            ffn_hidden: 8,
            velocity_hidden: 8,
            time_dim: 8,
            dropout: 0.1,
            basis: BasisSizes { n_deg: 2, n_root: 2, n_ord: 2, cutoff: 5.0 },
        }
    }

    #[test]
    fn s2l_counts() {
        let traj = line_traj(45, 0.1);
        let (tr, va, te) = s2l_split(&traj, 20, 20).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (20, 10, 10));
        assert_eq!(tr.pairs[19].t, 19);
        assert_eq!(va.pairs[0].t, 20);
        assert_eq!(te.pairs[9].t, 39);
        // frames 41..45 are unused
        assert_eq!(te.pairs[9].next, traj.frames[40]);
        assert!(s2l_split(&traj, 20, 19).is_err());
        assert!(s2l_split(&traj, 30, 20).is_err());
        assert_eq!(tr.pairs[0].a_sq, None);
        assert_eq!(tr.pairs[2].a_sq, Some(0.0));
    }

    #[test]
    fn o2o_picks_moving_molecule() {
        let trajs = vec![line_traj(5, 0.0), line_traj(5, 0.5), line_traj(5, 0.0)];
        assert_eq!(o2o_split(&trajs, 1).unwrap(), (vec![0, 2], vec![1]));
        assert_eq!(o2o_split(&trajs, 0).unwrap(), (vec![0, 1, 2], vec![]));
        // tie between the static ones: lower index goes first
        assert_eq!(o2o_split(&trajs, 2).unwrap(), (vec![2], vec![0, 1]));
        assert!(o2o_split(&trajs, 3).is_err());
    }

    #[test]
    fn plateau_decays_once_per_window() {
        let mut s = PlateauScheduler::new(1.0, 5, 1e-3);
        let decays: Vec<usize> = (1..=21).filter(|_| s.step(2.0)).collect();
        assert_eq!(decays, vec![6, 11, 16, 21]);
        assert!((s.lr - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_is_sign_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = EgtModel::new(tiny(), &mut rng).unwrap();
        let before = model.clone();
        let mut g = Gradients::zeros_like(&model);
        for t in &mut g.tensors {
            t.fill(-2.0);
        }
        let mut opt = AdamW::new(&model, 0.0);
        opt.update(&mut model, &g, 0.01);
        let mut a = vec![];
        let mut b = vec![];
        before.visit(&mut |_, x| a.extend(x.iter().copied()));
        model.visit(&mut |_, x| b.extend(x.iter().copied()));
        for (x, y) in a.iter().zip(&b) {
            assert!((y - x - 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = EgtModel::new(tiny(), &mut rng).unwrap();
        let meta = CheckpointMeta { seed: 9, diffusion: DiffusionConfig::default(), epoch: 3 };
        let bytes = checkpoint_bytes(&model, &meta);
        let (back, m) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(m, meta);
        assert!(matches!(checkpoint_from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        assert!(matches!(checkpoint_from_bytes(&bytes[..10]), Err(Error::Checkpoint(_))));
        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(checkpoint_from_bytes(&v2), Err(Error::Incompatible(_))));
    }

    #[test]
    fn history_lines_roundtrip() {
        let h = vec![
            EpochRecord { epoch: 1, train_loss: 1.5, val_loss: 2.0, lr: 5e-4 },
            EpochRecord { epoch: 2, train_loss: 0.1, val_loss: 0.3, lr: 5e-5 },
        ];
        let mut buf = Vec::new();
        write_history(&h, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(read_history(&text).unwrap(), h);
    }
}

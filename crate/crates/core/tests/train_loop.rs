use mdscore::basis::BasisSizes;
use mdscore::egt::{egt_score, EgtConfig, EgtModel};
use mdscore::sde::{DiffusionConfig, NoiseSchedule};
use mdscore::train::{
    load_checkpoint, save_checkpoint, train_loop, CheckpointMeta, FramePair, FramePairDataset, TrainConfig,
};
use mdscore::{Conformation, Vec3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn tiny(dropout: f64) -> EgtConfig {
    EgtConfig {
        layers: 2,
        heads: 2,
        feature_dim: 16,
        attention_dim: 16,
        ffn_hidden: 32,
        velocity_hidden: 16,
        time_dim: 8,
        dropout,
        basis: BasisSizes { n_deg: 2, n_root: 2, n_ord: 2, cutoff: 6.0 },
    }
}

/// Diatomics along x whose next frame is a tiny Gaussian step from the current one.
fn gaussian_pairs(n: usize, seed: u64) -> FramePairDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bond = Normal::new(1.5, 0.05).unwrap();
    let step = Normal::new(0.0, 0.01).unwrap();
    let pairs = (0..n)
        .map(|t| {
            let x = vec![Vec3::zeros(), Vec3::new(bond.sample(&mut rng), 0.0, 0.0)];
            let next: Vec<Vec3> = x.iter().map(|p| p + Vec3::new(step.sample(&mut rng), 0.0, 0.0)).collect();
            FramePair {
                current: Conformation::at_rest(x, vec![6, 8]).unwrap(),
                next: Conformation::at_rest(next, vec![6, 8]).unwrap(),
                a_sq: None,
                source: 0,
                t,
            }
        })
        .collect();
    FramePairDataset { pairs, sources: vec!["toy".into()] }
}

fn diffusion() -> DiffusionConfig {
    DiffusionConfig { schedule: NoiseSchedule { sigma_s: 0.5, ..Default::default() }, s_min: 0.1 }
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig { lr: 3e-3, epochs, batch: 16, seed: 7, ..Default::default() }
}

fn flat(model: &EgtModel) -> Vec<f64> {
    let mut out = vec![];
    model.visit(&mut |_, a| out.extend(a.iter().copied()));
    out
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let model = EgtModel::new(tiny(0.1), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let data = gaussian_pairs(32, 2);
    let val = gaussian_pairs(8, 3);
    let (trained, hist) = train_loop(model.clone(), &data, &val, &diffusion(), &TrainConfig { lr: 0.0, ..cfg(3) }).unwrap();
    assert_eq!(hist.len(), 3);
    assert_eq!(flat(&trained), flat(&model));
}

#[test]
fn toy_gaussian_pairs_loss_halves() {
    let model = EgtModel::new(tiny(0.0), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let data = gaussian_pairs(64, 11);
    let val = gaussian_pairs(16, 12);
    let (_, hist) = train_loop(model, &data, &val, &diffusion(), &cfg(60)).unwrap();
    let first = hist[0].train_loss;
    let last = hist.last().unwrap().train_loss;
    println!("toy DSM loss {first:.4} -> {last:.4}");
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
    assert!(hist.last().unwrap().val_loss < 0.5 * hist[0].val_loss);
}

#[test]
fn identical_runs_are_bit_identical() {
    let data = gaussian_pairs(24, 21);
    let val = gaussian_pairs(8, 22);
    let run = |parallel: bool| {
        let model = EgtModel::new(tiny(0.1), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let c = TrainConfig { parallel, chunk: 4, ..cfg(3) };
        train_loop(model, &data, &val, &diffusion(), &c).unwrap()
    };
    let (m1, h1) = run(false);
    let (m2, h2) = run(false);
    assert_eq!(h1, h2);
    assert_eq!(flat(&m1), flat(&m2));
    let (p1, g1) = run(true);
    let (p2, g2) = run(true);
    assert_eq!(g1, g2);
    assert_eq!(flat(&p1), flat(&p2));
}

#[test]
fn checkpoint_file_reproduces_scores() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mdsc");
    let model = EgtModel::new(tiny(0.1), &mut ChaCha8Rng::seed_from_u64(31)).unwrap();
    let meta = CheckpointMeta { seed: 31, diffusion: diffusion(), epoch: 0 };
    save_checkpoint(&path, &model, &meta).unwrap();
    let (back, m) = load_checkpoint(&path).unwrap();
    assert_eq!(m, meta);
    assert_eq!(flat(&back), flat(&model));
    let probe = &gaussian_pairs(3, 4).pairs;
    for p in probe {
        let a = egt_score(&model, &p.current, 0.4, 0.5).unwrap();
        let b = egt_score(&back, &p.current, 0.4, 0.5).unwrap();
        assert_eq!(a, b);
    }
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&path).is_err());
    assert!(load_checkpoint(&dir.path().join("missing")).is_err());
}

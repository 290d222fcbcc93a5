use mdscore::basis::BasisSizes;
use mdscore::egt::{
    build_node_features, egl_forward, egt_param_gradients, egt_score, BatchItem, EgtConfig, EgtModel,
    GraphBatch,
};
use mdscore::geometry::pair_geometry;
use mdscore::{Conformation, Vec3};
use nalgebra::{Matrix3, Rotation3};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> EgtConfig {
    EgtConfig {
        layers: 2,
        heads: 2,
        feature_dim: 8,
        attention_dim: 8,
        ffn_hidden: 8,
        velocity_hidden: 8,
        time_dim: 8,
        dropout: 0.0,
        basis: BasisSizes { n_deg: 2, n_root: 2, n_ord: 2, cutoff: 4.0 },
    }
}

fn random_conf(rng: &mut ChaCha8Rng, n: usize) -> Conformation {
    let x = (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
    let v = (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5))).collect();
    Conformation::new(x, v, vec![6; n]).unwrap()
}

fn rotation(axis: [f64; 3]) -> Matrix3<f64> {
    Rotation3::new(Vec3::from(axis)).into_inner()
}

fn rel_err(a: &[Vec3], b: &[Vec3]) -> f64 {
    let scale = a.iter().map(|v| v.norm()).fold(1e-300, f64::max);
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max) / scale
}

/// Sum of squared distances to a fixed random target, evaluated on the tape.
fn loss_on(model: &EgtModel, batch: &GraphBatch, target: &Array2<f64>) -> (f64, mdscore::egt::Gradients) {
    egt_param_gradients(model, batch, None, |tape, score| {
        let t = tape.input(target.clone());
        let d = tape.sub(score, t);
        let sq = tape.mul(d, d);
        Ok(tape.sum(sq))
    })
    .unwrap()
}

#[test]
fn parameter_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = EgtModel::new(tiny(), &mut rng).unwrap();
    let confs: Vec<_> = (0..2).map(|_| random_conf(&mut rng, 4)).collect();
    let items: Vec<_> = confs.iter().zip([0.35, 0.8]).map(|(c, s)| BatchItem { conf: c, s, sigma: 0.6 }).collect();
    let batch = GraphBatch::new(&model, &items).unwrap();
    let target = Array2::from_shape_fn((8, 3), |_| rng.random_range(-1.0..1.0));
    let (_, grads) = loss_on(&model, &batch, &target);

    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, g) in grads.tensors.iter().enumerate() {
        for idx in 0..g.len() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                let mut slot = 0;
                m.visit_mut(&mut |_, a| {
                    if slot == k {
                        *a.iter_mut().nth(idx).unwrap() += delta;
                    }
                    slot += 1;
                });
                loss_on(&m, &batch, &target).0
            };
            let fd = (eval(step) - eval(-step)) / (2.0 * step);
            let an = *g.iter().nth(idx).unwrap();
            let err = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(err);
            checked += 1;
        }
    }
    assert!(checked == model.n_params());
    assert!(worst < 1e-4, "max relative gradient error {worst}");
}

#[test]
fn linear_embedding_gradient_matches_closed_form() {
    // h0 = raw W + b, loss ||h0 - y||^2: d/db = 2 * column sums of (h0 - y)
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let model = EgtModel::new(tiny(), &mut rng).unwrap();
    let conf = random_conf(&mut rng, 3);
    let h0 = build_node_features(&model, &conf, 0.5, 0.5).unwrap();
    let y = Array2::from_shape_fn(h0.raw_dim(), |_| rng.random_range(-1.0..1.0));
    let err = &h0 - &y;
    let expect: Vec<f64> = err.columns().into_iter().map(|c| 2.0 * c.sum()).collect();
    let mut tape = mdscore::autodiff::Tape::new();
    let b = tape.param(model.embed.bias.clone(), 0);
    let w = tape.input(model.embed.weight.clone());
    let raw = {
        let rows = conf.len();
        let mut m = Array2::zeros((rows, model.embed.weight.nrows()));
        for i in 0..rows {
            m[(i, 0)] = conf.velocities[i].norm();
            m[(i, 1)] = conf.atom_numbers[i] as f64;
        }
        let te = mdscore::egt::time_embedding(
            model.config.time_dim,
            0.5,
            mdscore::sde::kernel_std(0.5, 0.5).ln(),
        );
        for i in 0..rows {
            for (k, t) in te.iter().enumerate() {
                m[(i, 2 + k)] = *t;
            }
        }
        m
    };
    let x = tape.input(raw);
    let xw = tape.matmul(x, w);
    let h = tape.add_row(xw, b);
    let yy = tape.input(y);
    let d = tape.sub(h, yy);
    let sq = tape.mul(d, d);
    let loss = tape.sum(sq);
    for (a, b) in tape.value(h).iter().zip(h0.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
    let g = tape.backward(loss, 1).remove(0).unwrap();
    for (a, b) in g.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn layer_attention_is_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let model = EgtModel::new(tiny(), &mut rng).unwrap();
    let conf = random_conf(&mut rng, 5);
    let tr = model.trace(&conf, 0.6, 0.4).unwrap();
    for _ in 0..20 {
        let q = rotation([rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]);
        let o = Vec3::from_fn(|_, _| rng.random_range(-10.0..10.0));
        let moved = model.trace(&conf.transformed(&q, &o), 0.6, 0.4).unwrap();
        for (a, b) in tr.logits.iter().zip(&moved.logits) {
            assert!((a - b).iter().all(|d| d.abs() < 1e-10));
        }
        for (a, b) in tr.features.iter().zip(&moved.features) {
            assert!((a - b).iter().all(|d| d.abs() < 1e-10));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn egl_is_equivariant(seed in 0u64..1000, ax in -3.0f64..3.0, ay in -3.0f64..3.0, az in -3.0f64..3.0,
                          ox in -5.0f64..5.0, oy in -5.0f64..5.0, oz in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = EgtModel::new(tiny(), &mut rng).unwrap();
        let conf = random_conf(&mut rng, 4);
        let h = build_node_features(&model, &conf, 0.5, 0.5).unwrap();
        let q = rotation([ax, ay, az]);
        let o = Vec3::new(ox, oy, oz);
        let moved = conf.transformed(&q, &o);
        let a = egl_forward(&model.layers[0], &conf.positions, &conf.velocities, &h, &model.basis, 2).unwrap();
        let b = egl_forward(&model.layers[0], &moved.positions, &moved.velocities, &h, &model.basis, 2).unwrap();
        let xa: Vec<_> = a.positions.iter().map(|x| q * x + o).collect();
        let va: Vec<_> = a.velocities.iter().map(|v| q * v).collect();
        prop_assert!(rel_err(&xa, &b.positions) < 1e-8);
        prop_assert!(rel_err(&va, &b.velocities) < 1e-8);
        prop_assert!((&a.features - &b.features).iter().all(|d| d.abs() < 1e-10));
    }

    #[test]
    fn pair_angles_are_invariant(seed in 0u64..1000, ax in -3.0f64..3.0, ay in -3.0f64..3.0, az in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conf = random_conf(&mut rng, 3);
        let moved = conf.transformed(&rotation([ax, ay, az]), &Vec3::new(1.0, 2.0, 3.0));
        let a = pair_geometry(&conf, 0, 2).unwrap();
        let b = pair_geometry(&moved, 0, 2).unwrap();
        prop_assert!((a.distance - b.distance).abs() < 1e-10);
        prop_assert!((a.phi_a - b.phi_a).abs() < 1e-10);
        prop_assert!((a.phi_b - b.phi_b).abs() < 1e-10);
        prop_assert!((a.theta - b.theta).abs() < 1e-10);
    }

    #[test]
    fn score_rotates_with_input(seed in 0u64..1000, ax in -3.0f64..3.0, ay in -3.0f64..3.0, az in -3.0f64..3.0, s in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = EgtModel::new(tiny(), &mut rng).unwrap();
        let conf = random_conf(&mut rng, 4);
        let q = rotation([ax, ay, az]);
        let a = egt_score(&model, &conf, s, 0.7).unwrap();
        let b = egt_score(&model, &conf.transformed(&q, &Vec3::new(-2.0, 0.5, 4.0)), s, 0.7).unwrap();
        let qa: Vec<_> = a.iter().map(|v| q * v).collect();
        prop_assert!(rel_err(&qa, &b) < 1e-8);
    }
}

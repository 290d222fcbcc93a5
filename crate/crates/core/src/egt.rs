//! Equivariant geometric Transformer score network.
//!
//! Each layer attends over ordered atom pairs inside the interaction cutoff.
//! Queries and keys are built per pair from invariant node features and the
//! pair's spherical Fourier-Bessel features, so attention weights are
//! invariant. Positions move along relative position vectors weighted by
//! those attention weights, which keeps the update E(3)-equivariant.
//!
//! The SBF features, neighbour list and cutoff mask are computed once from
//! the input frame and shared by every layer; gradients do not flow through
//! them.

use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::basis::{BasisSizes, BasisSpec, SbfSide, SbfTensor};
use crate::geometry::{pair_geometry_from_vectors, Conformation, Vec3};
use crate::sde::kernel_std;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgtConfig {
    pub layers: usize,
    pub heads: usize,
    /// Node feature width.
    pub feature_dim: usize,
    /// Query/key/message width, split evenly across heads.
    pub attention_dim: usize,
    /// Hidden width of the feature update network.
    pub ffn_hidden: usize,
    /// Hidden width of the velocity gate network.
    pub velocity_hidden: usize,
    /// Number of sinusoidal time-embedding channels.
    pub time_dim: usize,
    pub dropout: f64,
    pub basis: BasisSizes,
}

impl Default for EgtConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 8,
            feature_dim: 128,
            attention_dim: 128,
            ffn_hidden: 2048,
            velocity_hidden: 128,
            time_dim: 16,
            dropout: 0.1,
            basis: BasisSizes::default(),
        }
    }
}

impl EgtConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.layers, self.heads, self.feature_dim, self.attention_dim, self.ffn_hidden, self.velocity_hidden];
        if dims.contains(&0) {
            return Err(Error::arg("network sizes must be at least 1"));
        }
        if self.attention_dim % self.heads != 0 {
            return Err(Error::arg(format!(
                "attention_dim {} is not divisible by {} heads",
                self.attention_dim, self.heads
            )));
        }
        if self.time_dim == 0 || self.time_dim % 4 != 0 {
            return Err(Error::arg(format!("time_dim must be a positive multiple of 4, got {}", self.time_dim)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::arg(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        BasisSpec::new(self.basis.n_deg, self.basis.n_root, self.basis.n_ord, self.basis.cutoff)?;
        Ok(())
    }

    fn node_input_dim(&self) -> usize {
        2 + self.time_dim
    }
}

/// Affine map `x W + b`, rows are samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..a)),
            bias: Array2::zeros((1, fan_out)),
        }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Linear layers with ReLU between them (not after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        Self { layers: widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect() }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        for (k, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.{k}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        for (k, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.{k}"), f);
        }
    }
}

/// Parameters of one equivariant geometric layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EglParams {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_m: Linear,
    pub w_sbf1: Linear,
    pub w_sbf2: Linear,
    /// Velocity gate, `feature_dim -> 1`.
    pub f_v: Mlp,
    /// Feature update, `attention_dim -> feature_dim`.
    pub f_h: Mlp,
    /// Per-head weights of the position aggregate (`heads x 1`).
    pub head_mix: Array2<f64>,
    pub heads: usize,
}

impl EglParams {
    pub fn new<R: Rng + ?Sized>(cfg: &EgtConfig, rng: &mut R) -> Self {
        let (h, a, sbf) = (cfg.feature_dim, cfg.attention_dim, BasisSpec::from(cfg.basis).len());
        Self {
            w_q: Linear::new(h, a, rng),
            w_k: Linear::new(h, a, rng),
            w_m: Linear::new(h, a, rng),
            w_sbf1: Linear::new(a + sbf, a, rng),
            w_sbf2: Linear::new(a + sbf, a, rng),
            f_v: Mlp::new(&[h, cfg.velocity_hidden, 1], rng),
            f_h: Mlp::new(&[a, cfg.ffn_hidden, h], rng),
            head_mix: Array2::from_elem((cfg.heads, 1), 1.0 / cfg.heads as f64),
            heads: cfg.heads,
        }
    }

    pub fn attention_dim(&self) -> usize {
        self.w_q.weight.ncols()
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.w_q.visit(&format!("{prefix}.w_q"), f);
        self.w_k.visit(&format!("{prefix}.w_k"), f);
        self.w_m.visit(&format!("{prefix}.w_m"), f);
        self.w_sbf1.visit(&format!("{prefix}.w_sbf1"), f);
        self.w_sbf2.visit(&format!("{prefix}.w_sbf2"), f);
        self.f_v.visit(&format!("{prefix}.f_v"), f);
        self.f_h.visit(&format!("{prefix}.f_h"), f);
        f(&format!("{prefix}.head_mix"), &self.head_mix);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.w_q.visit_mut(&format!("{prefix}.w_q"), f);
        self.w_k.visit_mut(&format!("{prefix}.w_k"), f);
        self.w_m.visit_mut(&format!("{prefix}.w_m"), f);
        self.w_sbf1.visit_mut(&format!("{prefix}.w_sbf1"), f);
        self.w_sbf2.visit_mut(&format!("{prefix}.w_sbf2"), f);
        self.f_v.visit_mut(&format!("{prefix}.f_v"), f);
        self.f_h.visit_mut(&format!("{prefix}.f_h"), f);
        f(&format!("{prefix}.head_mix"), &mut self.head_mix);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EgtModel {
    pub config: EgtConfig,
    pub basis: BasisSpec,
    /// Maps `[|v|, atom number, time embedding]` to the initial features.
    pub embed: Linear,
    pub layers: Vec<EglParams>,
}

/// Anything that can evaluate a position score for a conformation.
pub trait ScoreModel {
    /// Score at diffusion time `s` for a frame with base noise `sigma`.
    fn score(&self, conf: &Conformation, s: f64, sigma: f64) -> Result<Vec<Vec3>>;
}

impl ScoreModel for EgtModel {
    fn score(&self, conf: &Conformation, s: f64, sigma: f64) -> Result<Vec<Vec3>> {
        egt_score(self, conf, s, sigma)
    }
}

/// Dropout applied during training.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut dyn RngCore,
}

impl EgtModel {
    pub fn new<R: Rng + ?Sized>(config: EgtConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let basis = BasisSpec::from(config.basis);
        let embed = Linear::new(config.node_input_dim(), config.feature_dim, rng);
        let layers = (0..config.layers).map(|_| EglParams::new(&config, rng)).collect();
        Ok(Self { config, basis, embed, layers })
    }

    /// Visits every parameter array in a fixed order with a dotted name.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.embed.visit("embed", f);
        for (l, p) in self.layers.iter().enumerate() {
            p.visit(&format!("layers.{l}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.embed.visit_mut("embed", f);
        for (l, p) in self.layers.iter_mut().enumerate() {
            p.visit_mut(&format!("layers.{l}"), f);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _| out.push(name.to_string()));
        out
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |_, a| out.push(a.dim()));
        out
    }

    pub fn n_params(&self) -> usize {
        self.param_shapes().iter().map(|(r, c)| r * c).sum()
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, a| ok &= a.iter().all(|v| v.is_finite()));
        ok
    }

    /// Runs the stack and records every intermediate quantity.
    pub fn trace(&self, conf: &Conformation, s: f64, sigma: f64) -> Result<ForwardTrace> {
        let batch = GraphBatch::new(self, &[BatchItem { conf, s, sigma }])?;
        let mut tape = Tape::new();
        let vars = register(self, &mut tape);
        let out = forward_on_tape(self, &mut tape, &vars, &batch, None);
        let pick = |vs: &[Var], tape: &Tape| vs.iter().map(|v| tape.value(*v).clone()).collect::<Vec<_>>();
        Ok(ForwardTrace {
            pairs: batch.pairs(),
            positions: pick(&out.positions, &tape),
            velocities: pick(&out.velocities, &tape),
            features: pick(&out.features, &tape),
            logits: pick(&out.logits, &tape),
            weights: pick(&out.weights, &tape),
            score: matrix_to_vecs(tape.value(out.score)),
        })
    }

    /// Scores several items in one batched pass.
    pub fn score_batch(&self, items: &[BatchItem<'_>]) -> Result<Vec<Vec<Vec3>>> {
        let batch = GraphBatch::new(self, items)?;
        let mut tape = Tape::new();
        let vars = register(self, &mut tape);
        let out = forward_on_tape(self, &mut tape, &vars, &batch, None);
        let score = tape.value(out.score);
        if score.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite score".into()));
        }
        Ok(batch.split_rows(score))
    }
}

/// Everything computed by one forward pass over a single conformation.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Ordered pairs `(i, j)` inside the cutoff, in attention row order.
    pub pairs: Vec<(usize, usize)>,
    /// `x^(0) .. x^(L)`.
    pub positions: Vec<Array2<f64>>,
    pub velocities: Vec<Array2<f64>>,
    pub features: Vec<Array2<f64>>,
    /// Per-layer attention logits `a_ij`, `pairs x heads`.
    pub logits: Vec<Array2<f64>>,
    /// Per-layer softmax weights, `pairs x heads`.
    pub weights: Vec<Array2<f64>>,
    pub score: Vec<Vec3>,
}

/// Result of a single standalone layer.
#[derive(Clone, Debug)]
pub struct EglOutput {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub features: Array2<f64>,
    pub pairs: Vec<(usize, usize)>,
    pub logits: Array2<f64>,
    pub weights: Array2<f64>,
}

pub fn vecs_to_matrix(v: &[Vec3]) -> Array2<f64> {
    Array2::from_shape_fn((v.len(), 3), |(i, c)| v[i][c])
}

pub fn matrix_to_vecs(m: &Array2<f64>) -> Vec<Vec3> {
    m.rows().into_iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect()
}

/// Fixed sinusoidal embedding of the diffusion time and the log kernel std.
pub fn time_embedding(dim: usize, s: f64, log_std: f64) -> Vec<f64> {
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(dim);
    for k in 0..quarter {
        let w = std::f64::consts::PI * (k + 1) as f64;
        out.push((w * s).sin());
        out.push((w * s).cos());
    }
    for k in 0..quarter {
        let w = 0.5f64.powi(k as i32);
        out.push((w * log_std).sin());
        out.push((w * log_std).cos());
    }
    out
}

fn check_time(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::arg(format!("diffusion time must lie in [0, 1], got {s}")));
    }
    Ok(())
}

/// Rows `[|v_i|, Z_i, time embedding]` before the learned embedding.
fn node_inputs(cfg: &EgtConfig, conf: &Conformation, s: f64, sigma: f64) -> Result<Array2<f64>> {
    check_time(s)?;
    let std = kernel_std(sigma, s);
    let log_std = if std > 0.0 { std.ln() } else { f64::MIN_POSITIVE.ln() };
    let te = time_embedding(cfg.time_dim, s, log_std);
    let mut m = Array2::zeros((conf.len(), cfg.node_input_dim()));
    for (i, mut row) in m.rows_mut().into_iter().enumerate() {
        row[0] = conf.velocities[i].norm();
        row[1] = conf.atom_numbers[i] as f64;
        for (k, &t) in te.iter().enumerate() {
            row[2 + k] = t;
        }
    }
    Ok(m)
}

/// Initial node features `h^(0)` (rows are atoms).
pub fn build_node_features(model: &EgtModel, conf: &Conformation, s: f64, sigma: f64) -> Result<Array2<f64>> {
    Ok(model.embed.apply(&node_inputs(&model.config, conf, s, sigma)?))
}

/// One item of a batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub conf: &'a Conformation,
    pub s: f64,
    pub sigma: f64,
}

/// Several conformations stacked into one disconnected graph.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    offsets: Vec<usize>,
    src: Rc<[usize]>,
    dst: Rc<[usize]>,
    sbf1: Array2<f64>,
    sbf2: Array2<f64>,
    positions: Array2<f64>,
    velocities: Array2<f64>,
    node_inputs: Array2<f64>,
    /// `1 / kernel_std` per node.
    inv_std: Array2<f64>,
}

struct Neighbours {
    src: Vec<usize>,
    dst: Vec<usize>,
    sbf1: Vec<f64>,
    sbf2: Vec<f64>,
}

fn neighbours(x: &[Vec3], v: &[Vec3], basis: &BasisSpec, offset: usize, out: &mut Neighbours) -> Result<()> {
    let mut geoms = Vec::new();
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i == j {
                continue;
            }
            let pg = pair_geometry_from_vectors(&x[i], &x[j], &v[i], &v[j])
                .map_err(|_| Error::DegenerateGeometry(format!("atoms {i} and {j} coincide")))?;
            if pg.distance <= basis.cutoff() {
                out.src.push(offset + i);
                out.dst.push(offset + j);
                geoms.push(pg);
            }
        }
    }
    out.sbf1.extend(SbfTensor::build(&geoms, basis, SbfSide::Source)?.values);
    out.sbf2.extend(SbfTensor::build(&geoms, basis, SbfSide::Target)?.values);
    Ok(())
}

impl GraphBatch {
    pub fn new(model: &EgtModel, items: &[BatchItem<'_>]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let mut offsets = vec![0];
        let mut nb = Neighbours { src: vec![], dst: vec![], sbf1: vec![], sbf2: vec![] };
        let mut rows_in = Vec::new();
        let mut inv_std = Vec::new();
        let mut x = Vec::new();
        let mut v = Vec::new();
        for item in items {
            let conf = item.conf;
            let off = *offsets.last().unwrap();
            let std = kernel_std(item.sigma, item.s);
            if !(std > 0.0) || !std.is_finite() {
                return Err(Error::Singularity(format!(
                    "kernel std vanishes at s = {}, sigma = {}",
                    item.s, item.sigma
                )));
            }
            rows_in.push(node_inputs(&model.config, conf, item.s, item.sigma)?);
            neighbours(&conf.positions, &conf.velocities, &model.basis, off, &mut nb)?;
            inv_std.extend(std::iter::repeat_n(1.0 / std, conf.len()));
            x.extend_from_slice(&conf.positions);
            v.extend_from_slice(&conf.velocities);
            offsets.push(off + conf.len());
        }
        let width = model.basis.len();
        let n_pairs = nb.src.len();
        let views: Vec<_> = rows_in.iter().map(|a| a.view()).collect();
        Ok(Self {
            node_inputs: ndarray::concatenate(Axis(0), &views).expect("consistent input widths"),
            src: nb.src.into(),
            dst: nb.dst.into(),
            sbf1: Array2::from_shape_vec((n_pairs, width), nb.sbf1).expect("sbf shape"),
            sbf2: Array2::from_shape_vec((n_pairs, width), nb.sbf2).expect("sbf shape"),
            positions: vecs_to_matrix(&x),
            velocities: vecs_to_matrix(&v),
            inv_std: Array2::from_shape_vec((inv_std.len(), 1), inv_std).expect("column"),
            offsets,
        })
    }

    pub fn n_nodes(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn n_items(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_pairs(&self) -> usize {
        self.src.len()
    }

    /// Node range of item `k`.
    pub fn item_range(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.src.iter().zip(self.dst.iter()).map(|(&i, &j)| (i, j)).collect()
    }

    pub fn split_rows(&self, m: &Array2<f64>) -> Vec<Vec<Vec3>> {
        (0..self.n_items())
            .map(|k| {
                let r = self.item_range(k);
                m.slice(ndarray::s![r, ..]).rows().into_iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect()
            })
            .collect()
    }
}

/// Registers every parameter on the tape in `visit` order.
pub fn register(model: &EgtModel, tape: &mut Tape) -> Vec<Var> {
    let mut vars = Vec::new();
    model.visit(&mut |_, a| {
        let slot = vars.len();
        vars.push(tape.param(a.clone(), slot));
    });
    vars
}

struct LinVars {
    w: Var,
    b: Var,
}

impl LinVars {
    fn take(it: &mut impl Iterator<Item = Var>) -> Self {
        Self { w: it.next().expect("weight var"), b: it.next().expect("bias var") }
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let y = tape.matmul(x, self.w);
        tape.add_row(y, self.b)
    }
}

fn mlp_vars(n: usize, it: &mut impl Iterator<Item = Var>) -> Vec<LinVars> {
    (0..n).map(|_| LinVars::take(it)).collect()
}

fn mlp_apply(tape: &mut Tape, layers: &[LinVars], mut x: Var, mut dropout: Option<&mut Dropout<'_>>) -> Var {
    for (k, l) in layers.iter().enumerate() {
        x = l.apply(tape, x);
        if k + 1 < layers.len() {
            x = tape.relu(x);
            if let Some(d) = dropout.as_deref_mut() {
                x = apply_dropout(tape, x, d);
            }
        }
    }
    x
}

fn apply_dropout(tape: &mut Tape, x: Var, d: &mut Dropout<'_>) -> Var {
    if d.p <= 0.0 {
        return x;
    }
    let keep = 1.0 / (1.0 - d.p);
    let mask = tape.value(x).mapv(|_| if d.rng.random::<f64>() < d.p { 0.0 } else { keep });
    let m = tape.input(mask);
    tape.mul(x, m)
}

struct EglVars {
    q: LinVars,
    k: LinVars,
    m: LinVars,
    sbf1: LinVars,
    sbf2: LinVars,
    f_v: Vec<LinVars>,
    f_h: Vec<LinVars>,
    head_mix: Var,
}

impl EglVars {
    fn take(p: &EglParams, it: &mut impl Iterator<Item = Var>) -> Self {
        Self {
            q: LinVars::take(it),
            k: LinVars::take(it),
            m: LinVars::take(it),
            sbf1: LinVars::take(it),
            sbf2: LinVars::take(it),
            f_v: mlp_vars(p.f_v.layers.len(), it),
            f_h: mlp_vars(p.f_h.layers.len(), it),
            head_mix: it.next().expect("head_mix var"),
        }
    }
}

struct GraphVars {
    src: Rc<[usize]>,
    dst: Rc<[usize]>,
    sbf1: Var,
    sbf2: Var,
    n_nodes: usize,
}

struct LayerOut {
    x: Var,
    v: Var,
    h: Var,
    logits: Var,
    weights: Var,
}

/// Block indicator `attention_dim x heads`.
fn head_blocks(att: usize, heads: usize) -> Array2<f64> {
    let per = att / heads;
    Array2::from_shape_fn((att, heads), |(c, h)| if c / per == h { 1.0 } else { 0.0 })
}

#[allow(clippy::too_many_arguments)]
fn layer_on_tape(
    tape: &mut Tape,
    p: &EglParams,
    pv: &EglVars,
    g: &GraphVars,
    x: Var,
    v: Var,
    h: Var,
    n_layers: usize,
    mut dropout: Option<&mut Dropout<'_>>,
) -> LayerOut {
    let att = p.attention_dim();
    let fq = pv.q.apply(tape, h);
    let fk = pv.k.apply(tape, h);
    let fm = pv.m.apply(tape, h);

    let qi = tape.gather_rows(fq, g.src.clone());
    let q_in = tape.concat_cols(qi, g.sbf1);
    let q = pv.sbf1.apply(tape, q_in);
    let kj = tape.gather_rows(fk, g.dst.clone());
    let k_in = tape.concat_cols(kj, g.sbf2);
    let k = pv.sbf2.apply(tape, k_in);

    let blocks = tape.input(head_blocks(att, p.heads));
    let qk = tape.mul(q, k);
    let logits = tape.matmul(qk, blocks);
    let logits = tape.scale(logits, 1.0 / (att as f64).sqrt());
    let weights = tape.segment_softmax(logits, g.src.clone());
    let phi = match dropout.as_deref_mut() {
        Some(d) => apply_dropout(tape, weights, d),
        None => weights,
    };

    // position aggregate: sum_h w_h sum_j phi^h_ij (x_i - x_j)
    let coef = tape.matmul(phi, pv.head_mix);
    let xi = tape.gather_rows(x, g.src.clone());
    let xj = tape.gather_rows(x, g.dst.clone());
    let xij = tape.sub(xi, xj);
    let moved = tape.mul_col(xij, coef);
    let agg_v = tape.scatter_add_rows(moved, g.src.clone(), g.n_nodes);
    let gate = mlp_apply(tape, &pv.f_v, h, None);
    let gated = tape.mul_col(v, gate);
    let v_new = tape.add(gated, agg_v);
    let step = tape.scale(v_new, 1.0 / n_layers as f64);
    let x_new = tape.add(x, step);

    let blocks_t = tape.input(head_blocks(att, p.heads).reversed_axes());
    let mj = tape.gather_rows(fm, g.dst.clone());
    let spread = tape.matmul(phi, blocks_t);
    let msg = tape.mul(mj, spread);
    let agg_h = tape.scatter_add_rows(msg, g.src.clone(), g.n_nodes);
    let h_new = mlp_apply(tape, &pv.f_h, agg_h, dropout);

    LayerOut { x: x_new, v: v_new, h: h_new, logits, weights }
}

/// Tape handles produced by a full forward pass.
pub struct ForwardVars {
    pub positions: Vec<Var>,
    pub velocities: Vec<Var>,
    pub features: Vec<Var>,
    pub logits: Vec<Var>,
    pub weights: Vec<Var>,
    /// `nodes x 3` score.
    pub score: Var,
}

/// Builds the full network on `tape` using parameter handles from [`register`].
pub fn forward_on_tape(
    model: &EgtModel,
    tape: &mut Tape,
    vars: &[Var],
    batch: &GraphBatch,
    mut dropout: Option<&mut Dropout<'_>>,
) -> ForwardVars {
    let mut it = vars.iter().copied();
    let embed = LinVars::take(&mut it);
    let layer_vars: Vec<EglVars> = model.layers.iter().map(|p| EglVars::take(p, &mut it)).collect();
    debug_assert!(it.next().is_none());

    let g = GraphVars {
        src: batch.src.clone(),
        dst: batch.dst.clone(),
        sbf1: tape.input(batch.sbf1.clone()),
        sbf2: tape.input(batch.sbf2.clone()),
        n_nodes: batch.n_nodes(),
    };
    let inputs = tape.input(batch.node_inputs.clone());
    let mut h = embed.apply(tape, inputs);
    let x0 = tape.input(batch.positions.clone());
    let mut x = x0;
    let mut v = tape.input(batch.velocities.clone());
    let mut out = ForwardVars {
        positions: vec![x],
        velocities: vec![v],
        features: vec![h],
        logits: vec![],
        weights: vec![],
        score: x0,
    };
    let n_layers = model.layers.len();
    for (p, pv) in model.layers.iter().zip(&layer_vars) {
        let lo = layer_on_tape(tape, p, pv, &g, x, v, h, n_layers, dropout.as_deref_mut());
        (x, v, h) = (lo.x, lo.v, lo.h);
        out.positions.push(x);
        out.velocities.push(v);
        out.features.push(h);
        out.logits.push(lo.logits);
        out.weights.push(lo.weights);
    }
    let disp = tape.sub(x, x0);
    let inv_std = tape.input(batch.inv_std.clone());
    out.score = tape.mul_col(disp, inv_std);
    out
}

/// A single layer applied to explicit inputs, with the neighbour list and
/// SBF features computed from `x` and `v`.
pub fn egl_forward(
    params: &EglParams,
    x: &[Vec3],
    v: &[Vec3],
    h: &Array2<f64>,
    basis: &BasisSpec,
    layer_count: usize,
) -> Result<EglOutput> {
    if x.len() != v.len() || x.len() != h.nrows() {
        return Err(Error::arg("egl_forward: inconsistent row counts"));
    }
    if h.ncols() != params.w_q.weight.nrows() {
        return Err(Error::arg("egl_forward: feature width does not match parameters"));
    }
    if layer_count == 0 {
        return Err(Error::arg("layer_count must be at least 1"));
    }
    let mut nb = Neighbours { src: vec![], dst: vec![], sbf1: vec![], sbf2: vec![] };
    neighbours(x, v, basis, 0, &mut nb)?;
    let n_pairs = nb.src.len();
    let mut tape = Tape::new();
    let mut vars = Vec::new();
    params.visit("", &mut |_, a| {
        let slot = vars.len();
        vars.push(tape.param(a.clone(), slot));
    });
    let pv = EglVars::take(params, &mut vars.into_iter());
    let g = GraphVars {
        sbf1: tape.input(Array2::from_shape_vec((n_pairs, basis.len()), nb.sbf1).expect("sbf shape")),
        sbf2: tape.input(Array2::from_shape_vec((n_pairs, basis.len()), nb.sbf2).expect("sbf shape")),
        src: nb.src.into(),
        dst: nb.dst.into(),
        n_nodes: x.len(),
    };
    let xv = tape.input(vecs_to_matrix(x));
    let vv = tape.input(vecs_to_matrix(v));
    let hv = tape.input(h.clone());
    let lo = layer_on_tape(&mut tape, params, &pv, &g, xv, vv, hv, layer_count, None);
    Ok(EglOutput {
        positions: matrix_to_vecs(tape.value(lo.x)),
        velocities: matrix_to_vecs(tape.value(lo.v)),
        features: tape.value(lo.h).clone(),
        pairs: g.src.iter().zip(g.dst.iter()).map(|(&i, &j)| (i, j)).collect(),
        logits: tape.value(lo.logits).clone(),
        weights: tape.value(lo.weights).clone(),
    })
}

/// `(x^(L) - x^(0)) / kernel_std(sigma, s)` for one conformation.
pub fn egt_score(model: &EgtModel, conf: &Conformation, s: f64, sigma: f64) -> Result<Vec<Vec3>> {
    Ok(model.score_batch(&[BatchItem { conf, s, sigma }])?.remove(0))
}

/// Parameter gradients in `visit` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &EgtModel) -> Self {
        Self { tensors: model.param_shapes().into_iter().map(Array2::zeros).collect() }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.tensors {
            *a *= k;
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().map(|a| a.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// Evaluates `loss_fn` on the batched score and differentiates it with
/// respect to every parameter. Returns the loss value and gradients.
pub fn egt_param_gradients<F>(
    model: &EgtModel,
    batch: &GraphBatch,
    dropout: Option<&mut Dropout<'_>>,
    loss_fn: F,
) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = register(model, &mut tape);
    let out = forward_on_tape(model, &mut tape, &vars, batch, dropout);
    let loss = loss_fn(&mut tape, out.score)?;
    let value = tape.value(loss)[(0, 0)];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    let shapes = model.param_shapes();
    let tensors = tape
        .backward(loss, vars.len())
        .into_iter()
        .zip(shapes)
        .map(|(g, shape)| g.map_or_else(|| Array2::zeros(shape), |g| g.as_standard_layout().into_owned()))
        .collect();
    let grads = Gradients { tensors };
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok((value, grads))
}

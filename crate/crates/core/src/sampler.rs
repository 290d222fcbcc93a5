//! Reverse-time generation of the next frame and frame-by-frame rollout.
//!
//! Both samplers start from the previous frame `x(t)` at diffusion time 1
//! and integrate down to `s_min`. The predictor-corrector path follows the
//! usual reverse Euler-Maruyama step plus SNR-scaled Langevin refinement; the
//! ODE path integrates the probability-flow ODE with an adaptive
//! Dormand-Prince 5(4) pair.

use nalgebra::Matrix3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::egt::ScoreModel;
use crate::geometry::{velocity_from_frames, Conformation, Trajectory, Vec3};
use crate::sde::{acceleration_sq_between, diffusion_coefficient, standard_normal_vec, NoiseSchedule};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    PredictorCorrector,
    Ode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_predictor: usize,
    pub n_corrector: usize,
    pub snr: f64,
    pub ode_abs_tol: f64,
    pub ode_rel_tol: f64,
    pub s_min: f64,
    pub mode: SamplerMode,
    /// Run `n_corrector - 1` corrector iterations per predictor step instead
    /// of `n_corrector`. On by default.
    pub corrector_off_by_one: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_predictor: 100,
            n_corrector: 2,
            snr: 0.16,
            ode_abs_tol: 1e-5,
            ode_rel_tol: 1e-5,
            s_min: 0.1,
            mode: SamplerMode::Ode,
            corrector_off_by_one: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_predictor == 0 {
            return Err(Error::arg("n_predictor must be at least 1"));
        }
        if !(self.snr > 0.0) {
            return Err(Error::arg(format!("snr must be positive, got {}", self.snr)));
        }
        if !(self.ode_abs_tol > 0.0 && self.ode_rel_tol > 0.0) {
            return Err(Error::arg("ODE tolerances must be positive"));
        }
        if !(self.s_min > 0.0 && self.s_min < 1.0) {
            return Err(Error::arg(format!("s_min must lie in (0, 1), got {}", self.s_min)));
        }
        Ok(())
    }

    /// Corrector iterations after each predictor step.
    pub fn corrector_iterations(&self) -> usize {
        if self.corrector_off_by_one {
            self.n_corrector.saturating_sub(1)
        } else {
            self.n_corrector
        }
    }

    /// Uniform grid from 1 down to `s_min` with `n_predictor + 1` points.
    pub fn time_grid(&self) -> Vec<f64> {
        let n = self.n_predictor;
        (0..=n).map(|k| if k == n { self.s_min } else { 1.0 - (1.0 - self.s_min) * k as f64 / n as f64 }).collect()
    }
}

/// Source of standard-normal noise matrices.
pub trait Noise {
    fn sample(&mut self, n: usize) -> Vec<Vec3>;
}

pub struct GaussianNoise<R>(pub R);

impl<R: Rng> Noise for GaussianNoise<R> {
    fn sample(&mut self, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| standard_normal_vec(&mut self.0)).collect()
    }
}

/// Always zero; turns the stochastic samplers deterministic.
pub struct ZeroNoise;

impl Noise for ZeroNoise {
    fn sample(&mut self, n: usize) -> Vec<Vec3> {
        vec![Vec3::zeros(); n]
    }
}

/// Rotates every draw of an inner source by a fixed matrix.
pub struct RotatedNoise<N> {
    pub inner: N,
    pub rotation: Matrix3<f64>,
}

impl<N: Noise> Noise for RotatedNoise<N> {
    fn sample(&mut self, n: usize) -> Vec<Vec3> {
        self.inner.sample(n).into_iter().map(|z| self.rotation * z).collect()
    }
}

fn frob(v: &[Vec3]) -> f64 {
    v.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt()
}

fn check_finite(x: &[Vec3], what: &str) -> Result<()> {
    if x.iter().all(|v| v.iter().all(|c| c.is_finite())) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite value in {what}")))
    }
}

/// One reverse Euler-Maruyama step from `s_hi` to `s_lo`.
pub fn em_predictor_step<F, N>(x: &[Vec3], score_fn: &mut F, sigma: f64, s_hi: f64, s_lo: f64, noise: &mut N) -> Result<Vec<Vec3>>
where
    F: FnMut(&[Vec3], f64) -> Result<Vec<Vec3>>,
    N: Noise + ?Sized,
{
    if !(0.0 <= s_lo && s_lo < s_hi && s_hi <= 1.0) {
        return Err(Error::arg(format!("predictor step needs 0 <= s_lo < s_hi <= 1, got {s_lo}, {s_hi}")));
    }
    let ds = s_hi - s_lo;
    let g = diffusion_coefficient(sigma, s_hi);
    let score = score_fn(x, s_hi)?;
    let z = noise.sample(x.len());
    let drift = g * g * ds;
    let diff = g * ds.sqrt();
    Ok(x.iter().zip(&score).zip(&z).map(|((x, sc), z)| x + sc * drift + z * diff).collect())
}

/// One Langevin corrector step at time `s`.
pub fn langevin_corrector_step<F, N>(x: &[Vec3], score_fn: &mut F, s: f64, snr: f64, noise: &mut N) -> Result<Vec<Vec3>>
where
    F: FnMut(&[Vec3], f64) -> Result<Vec<Vec3>>,
    N: Noise + ?Sized,
{
    let g = score_fn(x, s)?;
    let z = noise.sample(x.len());
    let gn = frob(&g);
    let delta = if gn == 0.0 { 0.0 } else { 2.0 * (snr * frob(&z) / gn).powi(2) };
    let k = (2.0 * delta).sqrt();
    Ok(x.iter().zip(&g).zip(&z).map(|((x, g), z)| x + g * delta + z * k).collect())
}

/// Predictor-corrector sampling from `x_prior` at time 1 down to `s_min`.
pub fn pc_sample<F, N>(x_prior: &[Vec3], score_fn: &mut F, sigma: f64, cfg: &SamplerConfig, noise: &mut N) -> Result<Vec<Vec3>>
where
    F: FnMut(&[Vec3], f64) -> Result<Vec<Vec3>>,
    N: Noise + ?Sized,
{
    cfg.validate()?;
    let grid = cfg.time_grid();
    let mut x = x_prior.to_vec();
    for w in grid.windows(2) {
        x = em_predictor_step(&x, score_fn, sigma, w[0], w[1], noise)?;
        for _ in 0..cfg.corrector_iterations() {
            x = langevin_corrector_step(&x, score_fn, w[1], cfg.snr, noise)?;
        }
    }
    check_finite(&x, "predictor-corrector sample")?;
    Ok(x)
}

// Dormand-Prince 5(4) coefficients.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] =
    [5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0];

/// Probability-flow ODE sampling from `x_prior` at time 1 down to `s_min`.
pub fn ode_sample<F>(x_prior: &[Vec3], score_fn: &mut F, sigma: f64, cfg: &SamplerConfig) -> Result<Vec<Vec3>>
where
    F: FnMut(&[Vec3], f64) -> Result<Vec<Vec3>>,
{
    cfg.validate()?;
    let mut field = |x: &[Vec3], s: f64| -> Result<Vec<Vec3>> {
        let g = diffusion_coefficient(sigma, s);
        let k = -0.5 * g * g;
        Ok(score_fn(x, s)?.into_iter().map(|v| v * k).collect())
    };
    integrate_dopri5(&mut field, x_prior, 1.0, cfg.s_min, cfg.ode_abs_tol, cfg.ode_rel_tol)
}

fn axpy(y: &[Vec3], terms: &[(f64, &[Vec3])]) -> Vec<Vec3> {
    let mut out = y.to_vec();
    for (c, k) in terms {
        if *c != 0.0 {
            for (o, v) in out.iter_mut().zip(k.iter()) {
                *o += v * *c;
            }
        }
    }
    out
}

/// Adaptive Dormand-Prince integration of `dy/ds = f(y, s)` from `s0` to `s1`.
pub fn integrate_dopri5<F>(f: &mut F, y0: &[Vec3], s0: f64, s1: f64, atol: f64, rtol: f64) -> Result<Vec<Vec3>>
where
    F: FnMut(&[Vec3], f64) -> Result<Vec<Vec3>>,
{
    let span = s1 - s0;
    if span == 0.0 {
        return Ok(y0.to_vec());
    }
    let dir = span.signum();
    let min_step = 1e-12 * span.abs().max(1.0);
    let mut s = s0;
    let mut y = y0.to_vec();
    let mut h = 0.01 * span;
    let mut k1 = f(&y, s)?;
    while (s1 - s) * dir > 0.0 {
        if (s + h - s1) * dir > 0.0 {
            h = s1 - s;
        }
        let mut k: Vec<Vec<Vec3>> = vec![k1.clone()];
        for stage in 1..7 {
            let terms: Vec<(f64, &[Vec3])> = (0..stage).map(|j| (h * A[stage][j], k[j].as_slice())).collect();
            let ys = axpy(&y, &terms);
            k.push(f(&ys, s + C[stage] * h)?);
        }
        let terms5: Vec<(f64, &[Vec3])> = (0..7).map(|j| (h * B5[j], k[j].as_slice())).collect();
        let y_new = axpy(&y, &terms5);
        let mut acc = 0.0;
        let mut count = 0usize;
        for i in 0..y.len() {
            let mut e = Vec3::zeros();
            for (j, kj) in k.iter().enumerate() {
                e += kj[i] * (h * (B5[j] - B4[j]));
            }
            for c in 0..3 {
                let sc = atol + rtol * y[i][c].abs().max(y_new[i][c].abs());
                acc += (e[c] / sc).powi(2);
                count += 1;
            }
        }
        let err = (acc / count.max(1) as f64).sqrt();
        if !err.is_finite() {
            return Err(Error::IntegrationFailure { s, reason: "non-finite error estimate".into() });
        }
        if err <= 1.0 {
            s += h;
            y = y_new;
            // first-same-as-last: the seventh stage is f at the accepted point
            k1 = k.swap_remove(6);
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
        if h.abs() < min_step && (s1 - s) * dir > min_step {
            return Err(Error::IntegrationFailure { s, reason: format!("step size underflow ({:e})", h.abs()) });
        }
    }
    Ok(y)
}

/// Draws the next frame's positions from the prior `x_prev`.
pub fn sample_next<F, N>(x_prev: &[Vec3], score_fn: &mut F, sigma: f64, cfg: &SamplerConfig, noise: &mut N) -> Result<Vec<Vec3>>
where
    F: FnMut(&[Vec3], f64) -> Result<Vec<Vec3>>,
    N: Noise + ?Sized,
{
    match cfg.mode {
        SamplerMode::PredictorCorrector => pc_sample(x_prev, score_fn, sigma, cfg, noise),
        SamplerMode::Ode => ode_sample(x_prev, score_fn, sigma, cfg),
    }
}

/// Generates `n_frames` new frames after `start`.
///
/// The returned trajectory holds `start` followed by the generated frames.
pub fn rollout<M, N>(
    model: &M,
    start: &Conformation,
    n_frames: usize,
    dt: f64,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    noise: &mut N,
) -> Result<Trajectory>
where
    M: ScoreModel + ?Sized,
    N: Noise + ?Sized,
{
    rollout_from(model, std::slice::from_ref(start), n_frames, dt, schedule, cfg, noise)
}

/// Like [`rollout`], but seeded with several known frames (oldest first) so
/// the first generated frame can already use an acceleration-based noise
/// level. The returned trajectory holds the seed frames then the new ones.
pub fn rollout_from<M, N>(
    model: &M,
    seed: &[Conformation],
    n_frames: usize,
    dt: f64,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    noise: &mut N,
) -> Result<Trajectory>
where
    M: ScoreModel + ?Sized,
    N: Noise + ?Sized,
{
    if n_frames == 0 {
        return Err(Error::arg("rollout needs at least one frame"));
    }
    if seed.is_empty() {
        return Err(Error::arg("rollout needs a start frame"));
    }
    cfg.validate()?;
    schedule.validate()?;
    let mut traj = Trajectory::new(seed.to_vec(), dt)?;
    let atoms = seed[0].atom_numbers.clone();
    for k in 0..n_frames {
        let frames = &traj.frames;
        let last = &frames[frames.len() - 1];
        let a_sq = (frames.len() >= 2)
            .then(|| acceleration_sq_between(&last.velocities, &frames[frames.len() - 2].velocities));
        let sigma = schedule.sigma_for(a_sq);
        let x_t = last.positions.clone();
        let mut score_fn = |x: &[Vec3], s: f64| -> Result<Vec<Vec3>> {
            let v = velocity_from_frames(x, &x_t)?;
            let conf = Conformation { positions: x.to_vec(), velocities: v, atom_numbers: atoms.clone() };
            model.score(&conf, s, sigma)
        };
        let frame_index = traj.len();
        let x_new = sample_next(&x_t, &mut score_fn, sigma, cfg, noise).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("frame {frame_index}: {m}")),
            other => other,
        })?;
        if x_new.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::Numeric(format!("NaN in generated frame {frame_index}")));
        }
        let v_new = velocity_from_frames(&x_new, &x_t)?;
        traj.push(Conformation::new(x_new, v_new, atoms.clone())?)?;
        log::debug!("generated frame {} of {n_frames} (sigma {sigma:.4e})", k + 1);
    }
    Ok(traj)
}

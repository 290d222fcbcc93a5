//! Acceleration-conditioned variance-exploding diffusion.
//!
//! The forward process is `dx = sigma^s dw` for `s in [0, 1]`, where the base
//! `sigma` of each frame is chosen from the acceleration of the preceding
//! frames. Its transition kernel is Gaussian with variance
//! `(sigma^(2s) - 1) / (2 ln sigma)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::{Trajectory, Vec3};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    /// Base standard deviation used at or above the acceleration threshold.
    pub sigma_s: f64,
    /// Harmonic acceleration constant.
    pub eta_sigma: f64,
    /// Acceleration threshold on the squared Frobenius norm.
    pub a_bar: f64,
    /// Lower clamp on the sub-threshold value, as a fraction of `sigma_s`.
    #[serde(default = "default_min_frac")]
    pub sigma_min_frac: f64,
}

fn default_min_frac() -> f64 {
    1e-3
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { sigma_s: 0.1, eta_sigma: 1.0, a_bar: 1.0, sigma_min_frac: default_min_frac() }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_s > 0.0
            && self.eta_sigma > 0.0
            && self.a_bar > 0.0
            && self.sigma_min_frac > 0.0
            && self.sigma_min_frac <= 1.0
            && [self.sigma_s, self.eta_sigma, self.a_bar].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!("invalid noise schedule {self:?}")))
        }
    }

    /// Base noise for a frame whose previous acceleration is `a_sq`
    /// (`None` when fewer than three frames are known).
    pub fn sigma_for(&self, a_sq: Option<f64>) -> f64 {
        base_sigma(self, a_sq.unwrap_or(self.a_bar))
    }
}

/// Noise schedule plus the smallest diffusion time used in training and sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub schedule: NoiseSchedule,
    #[serde(default = "default_s_min")]
    pub s_min: f64,
}

fn default_s_min() -> f64 {
    0.1
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { schedule: NoiseSchedule::default(), s_min: default_s_min() }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.s_min > 0.0 && self.s_min < 1.0) {
            return Err(Error::arg(format!("s_min must lie in (0, 1), got {}", self.s_min)));
        }
        Ok(())
    }
}

/// Squared Frobenius norm of `v(t) - v(t-1)`.
pub fn acceleration_sq(traj: &Trajectory, t: usize) -> Result<f64> {
    if t < 2 || t >= traj.len() {
        return Err(Error::arg(format!("acceleration needs 2 <= t < {}, got {t}", traj.len())));
    }
    Ok(acceleration_sq_between(&traj.frames[t].velocities, &traj.frames[t - 1].velocities))
}

pub fn acceleration_sq_between(v_t: &[Vec3], v_prev: &[Vec3]) -> f64 {
    v_t.iter().zip(v_prev).map(|(a, b)| (a - b).norm_squared()).sum()
}

pub fn base_sigma(schedule: &NoiseSchedule, a_sq: f64) -> f64 {
    if a_sq >= schedule.a_bar {
        return schedule.sigma_s;
    }
    let gap = a_sq - schedule.a_bar;
    (schedule.sigma_s * schedule.eta_sigma * gap * gap).max(schedule.sigma_s * schedule.sigma_min_frac)
}

/// Diffusion coefficient `g(s) = sigma^s`.
pub fn diffusion_coefficient(sigma: f64, s: f64) -> f64 {
    sigma.powf(s)
}

pub fn kernel_variance(sigma: f64, s: f64) -> f64 {
    let ln = sigma.ln();
    if ln.abs() < 1e-12 {
        return s;
    }
    // exp_m1 keeps precision for small s * ln(sigma)
    (2.0 * s * ln).exp_m1() / (2.0 * ln)
}

pub fn kernel_std(sigma: f64, s: f64) -> f64 {
    kernel_variance(sigma, s).sqrt()
}

/// Draws `x_s = x0 + sqrt(var) z`; returns `(x_s, z)`.
pub fn perturb<R: Rng + ?Sized>(x0: &[Vec3], sigma: f64, s: f64, rng: &mut R) -> (Vec<Vec3>, Vec<Vec3>) {
    let std = kernel_std(sigma, s);
    let z: Vec<Vec3> = x0.iter().map(|_| standard_normal_vec(rng)).collect();
    let xs = x0.iter().zip(&z).map(|(x, z)| x + z * std).collect();
    (xs, z)
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
}

/// Score of the Gaussian transition kernel, `-(x_s - x0) / var`.
pub fn kernel_score(x_s: &[Vec3], x0: &[Vec3], sigma: f64, s: f64) -> Result<Vec<Vec3>> {
    let var = kernel_variance(sigma, s);
    if !(var > 0.0) {
        return Err(Error::Singularity(format!("kernel variance vanishes at s = {s}")));
    }
    Ok(x_s.iter().zip(x0).map(|(a, b)| -(a - b) / var).collect())
}

/// Weight proportional to `1 / E||kernel score||^2`.
pub fn lambda_weight(sigma: f64, s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    kernel_variance(sigma, s)
}

/// One prepared denoising-score-matching example.
#[derive(Clone, Debug)]
pub struct DsmSample {
    /// The disturbed conformation: perturbed next positions, velocities
    /// `x_s - x(t)`, atom numbers of the pair.
    pub disturbed: crate::Conformation,
    pub s: f64,
    pub sigma: f64,
    pub target: Vec<Vec3>,
    pub weight: f64,
}

/// Perturbs `next` and builds the disturbed conformation and its target score.
pub fn prepare_dsm_sample<R: Rng + ?Sized>(
    current: &crate::Conformation,
    next: &crate::Conformation,
    sigma: f64,
    s: f64,
    rng: &mut R,
) -> Result<DsmSample> {
    if current.atom_numbers != next.atom_numbers {
        return Err(Error::arg("frame pair has different atom rosters"));
    }
    let (xs, _) = perturb(&next.positions, sigma, s, rng);
    let target = kernel_score(&xs, &next.positions, sigma, s)?;
    let velocities = crate::geometry::velocity_from_frames(&xs, &current.positions)?;
    let disturbed = crate::Conformation::new(xs, velocities, next.atom_numbers.clone())?;
    Ok(DsmSample { disturbed, s, sigma, target, weight: lambda_weight(sigma, s) })
}

/// `lambda(s) ||score - target||_F^2` for one sample.
pub fn weighted_sq_error(sample: &DsmSample, score: &[Vec3]) -> f64 {
    sample.weight * score.iter().zip(&sample.target).map(|(a, b)| (a - b).norm_squared()).sum::<f64>()
}

/// Batch-averaged denoising score-matching loss with an arbitrary score function.
pub fn dsm_loss_with<F>(samples: &[DsmSample], mut score_fn: F) -> Result<f64>
where
    F: FnMut(&DsmSample) -> Result<Vec<Vec3>>,
{
    if samples.is_empty() {
        return Err(Error::arg("empty DSM batch"));
    }
    let mut total = 0.0;
    for sample in samples {
        total += weighted_sq_error(sample, &score_fn(sample)?);
    }
    let loss = total / samples.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite DSM loss".into()));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Conformation;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule { sigma_s: 0.1, eta_sigma: 1.0, a_bar: 1.0, sigma_min_frac: 1e-3 }
    }

    #[test]
    fn base_sigma_examples() {
        assert_abs_diff_eq!(base_sigma(&sched(), 2.0), 0.1);
        assert_abs_diff_eq!(base_sigma(&sched(), 0.0), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(base_sigma(&sched(), 0.5), 0.025, epsilon = 1e-15);
        // clamp near the threshold
        assert_abs_diff_eq!(base_sigma(&sched(), 1.0 - 1e-9), 1e-4, epsilon = 1e-18);
        assert_eq!(sched().sigma_for(None), 0.1);
    }

    #[test]
    fn base_sigma_is_non_increasing_below_threshold() {
        let s = sched();
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let v = base_sigma(&s, i as f64 / 1000.0 * s.a_bar * 0.999_999);
            assert!(v <= prev && v > 0.0);
            prev = v;
        }
    }

    #[test]
    fn kernel_variance_examples() {
        assert_eq!(kernel_variance(0.3, 0.0), 0.0);
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(kernel_variance(e, 1.0), (e * e - 1.0) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(kernel_variance(e, 1.0), 3.194528, epsilon = 1e-6);
        for sig in [1.0, 1.0 + 1e-8, 1.0 - 1e-8] {
            assert_abs_diff_eq!(kernel_variance(sig, 0.7), 0.7, epsilon = 1e-6);
        }
        assert_abs_diff_eq!(lambda_weight(e, 1.0), kernel_variance(e, 1.0));
        assert_eq!(lambda_weight(e, 0.0), 0.0);
    }

    #[test]
    fn perturb_at_zero_time_is_identity() {
        let x = vec![Vec3::new(1., 2., 3.)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(perturb(&x, 0.5, 0.0, &mut rng).0, x);
    }

    #[test]
    fn kernel_score_cases() {
        let x = vec![Vec3::new(1., 2., 3.)];
        assert_eq!(kernel_score(&x, &x, 2.0, 0.5).unwrap(), vec![Vec3::zeros()]);
        // sigma = 1 gives var = s; var 2 is out of range, use sigma = e, s with var = 2
        let e = std::f64::consts::E;
        let s = (5.0f64).ln() / 2.0; // (e^{2s} - 1)/2 = 2
        let xs = vec![Vec3::new(2., 0., 0.)];
        let sc = kernel_score(&xs, &[Vec3::zeros()], e, s).unwrap();
        assert_abs_diff_eq!(sc[0], Vec3::new(-1., 0., 0.), epsilon = 1e-12);
        assert!(matches!(kernel_score(&x, &x, 2.0, 0.0), Err(Error::Singularity(_))));
    }

    #[test]
    fn acceleration_matches_second_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames: Vec<_> = (0..5)
            .map(|_| {
                let x = (0..3).map(|_| standard_normal_vec(&mut rng)).collect();
                Conformation::at_rest(x, vec![1; 3]).unwrap()
            })
            .collect();
        let traj = Trajectory::new(frames, 1.0).unwrap().with_frame_difference_velocities();
        for t in 2..5 {
            let x = |k: usize| &traj.frames[k].positions;
            let direct: f64 =
                (0..3).map(|i| (x(t)[i] - 2.0 * x(t - 1)[i] + x(t - 2)[i]).norm_squared()).sum();
            assert_abs_diff_eq!(acceleration_sq(&traj, t).unwrap(), direct, epsilon = 1e-12);
        }
        assert!(acceleration_sq(&traj, 1).is_err());
    }

    #[test]
    fn acceleration_trivial_cases() {
        let v = Vec3::new(0.1, 0.2, 0.0);
        let frames: Vec<_> = (0..4)
            .map(|t| Conformation::new(vec![v * t as f64], vec![v], vec![1]).unwrap())
            .collect();
        let traj = Trajectory::new(frames, 1.0).unwrap();
        assert_eq!(acceleration_sq(&traj, 3).unwrap(), 0.0);
        assert_eq!(acceleration_sq_between(&[Vec3::x()], &[Vec3::zeros()]), 1.0);
    }

    #[test]
    fn perfect_score_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Conformation::at_rest(vec![Vec3::zeros(), Vec3::x()], vec![1, 1]).unwrap();
        let mut b = a.clone();
        b.positions[0].y = 0.05;
        let samples: Vec<_> =
            (0..8).map(|k| prepare_dsm_sample(&a, &b, 0.5, 0.1 + 0.1 * k as f64, &mut rng).unwrap()).collect();
        let loss = dsm_loss_with(&samples, |s| Ok(s.target.clone())).unwrap();
        assert_eq!(loss, 0.0);
        let loss = dsm_loss_with(&samples, |s| Ok(vec![Vec3::zeros(); s.target.len()])).unwrap();
        assert!(loss > 0.0);
        // disturbed velocities are x_s - x(t)
        let d = &samples[0].disturbed;
        assert_abs_diff_eq!(d.velocities[1], d.positions[1] - a.positions[1], epsilon = 1e-15);
    }
}

//! Trajectory error metrics.

use nalgebra::Matrix3;

use super::{Trajectory, Vec3};
use crate::{Error, Result};

fn check_window(generated: &Trajectory, reference: &Trajectory, t1: usize, tn: usize) -> Result<()> {
    if generated.n_atoms() != reference.n_atoms() {
        return Err(Error::arg(format!(
            "atom count mismatch: {} vs {}",
            generated.n_atoms(),
            reference.n_atoms()
        )));
    }
    check_reference_window(reference, t1, tn)?;
    if tn >= generated.len() {
        return Err(Error::arg(format!(
            "window {t1}..={tn} exceeds generated trajectory of {} frames",
            generated.len()
        )));
    }
    Ok(())
}

fn check_reference_window(reference: &Trajectory, t1: usize, tn: usize) -> Result<()> {
    if tn < t1 {
        return Err(Error::arg(format!("empty window {t1}..={tn}")));
    }
    if tn >= reference.len() {
        return Err(Error::arg(format!(
            "window {t1}..={tn} exceeds reference trajectory of {} frames",
            reference.len()
        )));
    }
    Ok(())
}

fn frobenius_sq(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm_squared()).sum()
}

fn window_rms(t1: usize, tn: usize, mut frame_err_sq: impl FnMut(usize) -> f64) -> f64 {
    let n = (tn - t1 + 1) as f64;
    let total: f64 = (t1..=tn).map(&mut frame_err_sq).sum();
    (total / n).sqrt()
}

/// Accumulative root-mean-square error over frames `t1..=tn`:
/// `sqrt(mean_t ||x_gen(t) - x_ref(t)||_F^2)`. No alignment is applied.
pub fn armse(generated: &Trajectory, reference: &Trajectory, t1: usize, tn: usize) -> Result<f64> {
    check_window(generated, reference, t1, tn)?;
    Ok(window_rms(t1, tn, |t| {
        frobenius_sq(&generated.frames[t].positions, &reference.frames[t].positions)
    }))
}

/// As [`armse`], but each generated frame is first superimposed onto the
/// reference frame by the optimal rigid motion.
pub fn kabsch_armse(generated: &Trajectory, reference: &Trajectory, t1: usize, tn: usize) -> Result<f64> {
    check_window(generated, reference, t1, tn)?;
    Ok(window_rms(t1, tn, |t| {
        let target = &reference.frames[t].positions;
        let aligned = kabsch_align(&generated.frames[t].positions, target);
        frobenius_sq(&aligned, target)
    }))
}

/// ARMSE of predicting the reference frame `source` for every frame in the window.
pub fn copy_frame_armse(reference: &Trajectory, source: usize, t1: usize, tn: usize) -> Result<f64> {
    check_reference_window(reference, t1, tn)?;
    if source >= reference.len() {
        return Err(Error::arg(format!("source frame {source} out of range")));
    }
    let held = &reference.frames[source].positions;
    Ok(window_rms(t1, tn, |t| frobenius_sq(held, &reference.frames[t].positions)))
}

/// Persistence baseline: the last frame before the window, held fixed.
pub fn copy_previous_armse(reference: &Trajectory, t1: usize, tn: usize) -> Result<f64> {
    if t1 == 0 {
        return Err(Error::arg("copy-previous baseline needs a frame before the window"));
    }
    copy_frame_armse(reference, t1 - 1, t1, tn)
}

/// The first frame of the trajectory, held fixed.
pub fn copy_start_armse(reference: &Trajectory, t1: usize, tn: usize) -> Result<f64> {
    copy_frame_armse(reference, 0, t1, tn)
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64
}

/// Rigidly moves `mobile` onto `target` minimising the Frobenius error.
///
/// Uses the SVD of the cross-covariance with a reflection correction so the
/// result is always a proper rotation.
pub fn kabsch_align(mobile: &[Vec3], target: &[Vec3]) -> Vec<Vec3> {
    let cm = centroid(mobile);
    let ct = centroid(target);
    let mut h = Matrix3::zeros();
    for (p, q) in mobile.iter().zip(target) {
        h += (p - cm) * (q - ct).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return mobile.iter().map(|p| p - cm + ct).collect(),
    };
    let mut correction = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        correction[(2, 2)] = -1.0;
    }
    let rotation = v_t.transpose() * correction * u.transpose();
    mobile.iter().map(|p| rotation * (p - cm) + ct).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Conformation;
    use approx::assert_abs_diff_eq;

    fn traj(frames: Vec<Vec<Vec3>>) -> Trajectory {
        let n = frames[0].len();
        let frames = frames
            .into_iter()
            .map(|x| Conformation::at_rest(x, vec![1; n]).unwrap())
            .collect();
        Trajectory::new(frames, 1.0).unwrap()
    }

    #[test]
    fn hand_cases() {
        let r = traj(vec![vec![Vec3::zeros(), Vec3::x()]]);
        assert_eq!(armse(&r, &r, 0, 0).unwrap(), 0.0);
        let g = traj(vec![vec![Vec3::x(), Vec3::x()]]);
        assert_abs_diff_eq!(armse(&g, &r, 0, 0).unwrap(), 1.0, epsilon = 1e-12);

        let r2 = traj(vec![vec![Vec3::zeros()], vec![Vec3::zeros()]]);
        let g2 = traj(vec![vec![Vec3::new(3., 0., 0.)], vec![Vec3::new(0., 4., 0.)]]);
        assert_abs_diff_eq!(armse(&g2, &r2, 0, 1).unwrap(), 12.5f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn window_errors() {
        let r = traj(vec![vec![Vec3::zeros()], vec![Vec3::zeros()]]);
        let other = traj(vec![vec![Vec3::zeros(), Vec3::x()]]);
        assert!(armse(&r, &r, 1, 0).is_err());
        assert!(armse(&r, &r, 0, 2).is_err());
        assert!(armse(&other, &r, 0, 0).is_err());
        assert!(copy_previous_armse(&r, 0, 1).is_err());
    }

    #[test]
    fn copy_baselines() {
        let r = traj(vec![vec![Vec3::zeros()], vec![Vec3::x()], vec![Vec3::x() * 3.0]]);
        assert_abs_diff_eq!(copy_start_armse(&r, 1, 2).unwrap(), 5.0f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(copy_previous_armse(&r, 2, 2).unwrap(), 2.0, epsilon = 1e-12);
        let still = traj(vec![vec![Vec3::x()]; 4]);
        assert_eq!(copy_start_armse(&still, 0, 3).unwrap(), 0.0);
    }

    #[test]
    fn kabsch_handles_reflection_free_alignment() {
        let pts = vec![Vec3::new(0., 0., 0.), Vec3::new(1., 0., 0.), Vec3::new(0., 2., 0.), Vec3::new(0., 0., 3.)];
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -1.2, 2.0);
        let moved: Vec<_> = pts.iter().map(|p| rot * p + Vec3::new(4., -1., 2.)).collect();
        let aligned = kabsch_align(&moved, &pts);
        for (a, p) in aligned.iter().zip(&pts) {
            assert_abs_diff_eq!(*a, *p, epsilon = 1e-12);
        }
    }
}

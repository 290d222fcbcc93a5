//! Kinetic geometry: conformations, trajectories, pair angles and metrics.

mod elements;
mod metrics;
mod xyz;

use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::{Error, Result};

pub use elements::{atomic_number, element_symbol};
pub use metrics::{
    armse, copy_frame_armse, copy_previous_armse, copy_start_armse, kabsch_align, kabsch_armse,
};
pub use xyz::{read_xyz, read_xyz_file, write_xyz, write_xyz_file};

pub type Vec3 = Vector3<f64>;

/// Below this norm a velocity or plane normal is treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-10;

/// State of a molecule at one frame.
///
/// Velocities are in length units per frame. Node features are not stored;
/// they are derived from velocity norms and atom numbers on demand so they
/// stay invariant under rigid motions.
#[derive(Clone, Debug, PartialEq)]
pub struct Conformation {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub atom_numbers: Vec<u32>,
}

impl Conformation {
    pub fn new(positions: Vec<Vec3>, velocities: Vec<Vec3>, atom_numbers: Vec<u32>) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(Error::arg("a conformation needs at least one atom"));
        }
        if velocities.len() != n || atom_numbers.len() != n {
            return Err(Error::arg(format!(
                "row count mismatch: {} positions, {} velocities, {} atom numbers",
                n,
                velocities.len(),
                atom_numbers.len()
            )));
        }
        let finite = positions
            .iter()
            .chain(velocities.iter())
            .all(|p| p.iter().all(|c| c.is_finite()));
        if !finite {
            return Err(Error::Numeric("non-finite coordinate in conformation".into()));
        }
        Ok(Self { positions, velocities, atom_numbers })
    }

    /// Conformation at rest.
    pub fn at_rest(positions: Vec<Vec3>, atom_numbers: Vec<u32>) -> Result<Self> {
        let v = vec![Vec3::zeros(); positions.len()];
        Self::new(positions, v, atom_numbers)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Raw per-atom invariants `[|v_i|, Z_i]`.
    pub fn invariant_features(&self) -> Vec<[f64; 2]> {
        self.velocities
            .iter()
            .zip(&self.atom_numbers)
            .map(|(v, &z)| [v.norm(), z as f64])
            .collect()
    }

    /// Applies `x -> R x + t`, `v -> R v`.
    pub fn transformed(&self, rotation: &nalgebra::Matrix3<f64>, translation: &Vec3) -> Self {
        Self {
            positions: self.positions.iter().map(|p| rotation * p + translation).collect(),
            velocities: self.velocities.iter().map(|v| rotation * v).collect(),
            atom_numbers: self.atom_numbers.clone(),
        }
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::arg(format!("atom index {} out of range for {} atoms", i, self.len())));
        }
        Ok(())
    }
}

/// Ordered frames sharing one atom roster and a fixed timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<Conformation>,
    /// Time between consecutive frames.
    pub dt: f64,
    pub meta: BTreeMap<String, String>,
}

impl Trajectory {
    pub fn new(frames: Vec<Conformation>, dt: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::arg("a trajectory needs at least one frame"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::arg(format!("timestep must be positive, got {dt}")));
        }
        let roster = &frames[0].atom_numbers;
        if let Some((t, _)) = frames.iter().enumerate().find(|(_, f)| &f.atom_numbers != roster) {
            return Err(Error::arg(format!("frame {t} has a different atom roster")));
        }
        Ok(Self { frames, dt, meta: BTreeMap::new() })
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn n_atoms(&self) -> usize {
        self.frames[0].len()
    }

    pub fn atom_numbers(&self) -> &[u32] {
        &self.frames[0].atom_numbers
    }

    pub fn push(&mut self, frame: Conformation) -> Result<()> {
        if frame.atom_numbers != self.frames[0].atom_numbers {
            return Err(Error::arg("appended frame has a different atom roster"));
        }
        self.frames.push(frame);
        Ok(())
    }

    /// Replaces stored velocities by backward differences `x(t) - x(t-1)`;
    /// the first frame gets zeros.
    pub fn with_frame_difference_velocities(mut self) -> Self {
        for t in (1..self.frames.len()).rev() {
            let (head, tail) = self.frames.split_at_mut(t);
            let prev = &head[t - 1].positions;
            let cur = &mut tail[0];
            for (v, (x, xp)) in cur.velocities.iter_mut().zip(cur.positions.iter().zip(prev)) {
                *v = x - xp;
            }
        }
        for v in &mut self.frames[0].velocities {
            *v = Vec3::zeros();
        }
        self
    }

    /// Frames `start..end` as a new trajectory.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::arg(format!("bad frame range {start}..{end} for {} frames", self.len())));
        }
        Ok(Self { frames: self.frames[start..end].to_vec(), dt: self.dt, meta: self.meta.clone() })
    }
}

/// Distance and velocity-plane angles for an ordered atom pair `(a, b)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairGeometry {
    pub distance: f64,
    /// Angle between `v_a` and the direction from `a` to `b`.
    pub phi_a: f64,
    /// Angle between `v_b` and the direction from `b` to `a`.
    pub phi_b: f64,
    /// Angle between the planes spanned by `(v_a, rel)` and `(v_b, rel)`.
    pub theta: f64,
    /// `x_a - x_b`.
    pub rel: Vec3,
}

pub fn relative_position(conf: &Conformation, i: usize, j: usize) -> Result<Vec3> {
    conf.check_index(i)?;
    conf.check_index(j)?;
    Ok(conf.positions[i] - conf.positions[j])
}

/// Angle between two vectors, defined as 0 when either is (near) zero.
pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0).acos()
}

pub fn pair_geometry(conf: &Conformation, a: usize, b: usize) -> Result<PairGeometry> {
    conf.check_index(a)?;
    conf.check_index(b)?;
    if a == b {
        return Err(Error::degenerate(format!("pair geometry of atom {a} with itself")));
    }
    pair_geometry_from_vectors(
        &conf.positions[a],
        &conf.positions[b],
        &conf.velocities[a],
        &conf.velocities[b],
    )
}

pub fn pair_geometry_from_vectors(xa: &Vec3, xb: &Vec3, va: &Vec3, vb: &Vec3) -> Result<PairGeometry> {
    let rel = xa - xb;
    let distance = rel.norm();
    if distance < DEGENERATE_NORM {
        return Err(Error::degenerate("coincident atoms"));
    }
    let phi_a = angle_between(va, &(-rel));
    let phi_b = angle_between(vb, &rel);
    let theta = if va.norm() < DEGENERATE_NORM || vb.norm() < DEGENERATE_NORM {
        0.0
    } else {
        // angle_between already maps a vanishing normal (v parallel to rel) to 0.
        angle_between(&va.cross(&rel), &vb.cross(&rel))
    };
    Ok(PairGeometry { distance, phi_a, phi_b, theta, rel })
}

pub fn velocity_from_frames(x_t: &[Vec3], x_prev: &[Vec3]) -> Result<Vec<Vec3>> {
    if x_t.len() != x_prev.len() {
        return Err(Error::arg(format!("shape mismatch: {} vs {} atoms", x_t.len(), x_prev.len())));
    }
    Ok(x_t.iter().zip(x_prev).map(|(a, b)| a - b).collect())
}

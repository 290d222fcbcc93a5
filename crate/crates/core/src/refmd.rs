//! Reference classical molecular dynamics.
//!
//! Reduced units throughout: masses in mass units, `1/(4 pi eps0) = 1`.
//! Forces are analytic negative gradients of the potential; integration is
//! velocity Verlet with an optional Gaussian-accelerated boost and an
//! optional stochastic velocity-rescaling thermostat.

use std::path::Path;

use nalgebra::Matrix3;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::{atomic_number, Conformation, Trajectory, Vec3};
use crate::sde::standard_normal_vec;
use crate::{Error, Result};

/// Anything with masses and an energy surface.
pub trait Potential {
    fn masses(&self) -> &[f64];

    fn energy(&self, x: &[Vec3]) -> Result<f64> {
        Ok(self.energy_and_forces(x)?.0)
    }

    fn energy_and_forces(&self, x: &[Vec3]) -> Result<(f64, Vec<Vec3>)>;

    fn forces(&self, x: &[Vec3]) -> Result<Vec<Vec3>> {
        Ok(self.energy_and_forces(x)?.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    /// Force constant.
    pub k: f64,
    pub l0: f64,
}

/// Angle `i-j-k` with vertex `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Angle {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub c: f64,
    pub alpha0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorsionTerm {
    pub amplitude: f64,
    pub periodicity: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Torsion {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub l: usize,
    pub series: Vec<TorsionTerm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LjPair {
    pub i: usize,
    pub j: usize,
    pub epsilon: f64,
    pub x0: f64,
}

/// Bonded terms, listed Lennard-Jones pairs and Coulomb between all charged
/// pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ForceField {
    pub masses: Vec<f64>,
    pub charges: Vec<f64>,
    pub dielectric: f64,
    pub bonds: Vec<Bond>,
    pub angles: Vec<Angle>,
    pub torsions: Vec<Torsion>,
    pub lj: Vec<LjPair>,
}

fn nonneg(v: f64, what: &str) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("{what} must be finite and non-negative, got {v}")))
    }
}

fn positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("{what} must be finite and positive, got {v}")))
    }
}

impl ForceField {
    /// A force field with masses and no terms.
    pub fn empty(masses: Vec<f64>) -> Self {
        let n = masses.len();
        Self {
            masses,
            charges: vec![0.0; n],
            dielectric: 1.0,
            bonds: vec![],
            angles: vec![],
            torsions: vec![],
            lj: vec![],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.masses.len();
        if self.charges.len() != n {
            return Err(Error::arg("one charge per atom is required"));
        }
        for &m in &self.masses {
            positive(m, "mass")?;
        }
        positive(self.dielectric, "dielectric")?;
        let idx = |i: usize| {
            if i < n {
                Ok(())
            } else {
                Err(Error::arg(format!("atom index {i} out of range for {n} atoms")))
            }
        };
        for b in &self.bonds {
            idx(b.i)?;
            idx(b.j)?;
            nonneg(b.k, "bond force constant")?;
        }
        for a in &self.angles {
            idx(a.i)?;
            idx(a.j)?;
            idx(a.k)?;
            nonneg(a.c, "angle force constant")?;
        }
        for t in &self.torsions {
            for i in [t.i, t.j, t.k, t.l] {
                idx(i)?;
            }
        }
        for p in &self.lj {
            idx(p.i)?;
            idx(p.j)?;
            nonneg(p.epsilon, "LJ epsilon")?;
            positive(p.x0, "LJ x0")?;
        }
        Ok(())
    }

    fn check_len(&self, x: &[Vec3]) -> Result<()> {
        if x.len() != self.masses.len() {
            return Err(Error::arg(format!("expected {} atoms, got {}", self.masses.len(), x.len())));
        }
        Ok(())
    }
}

fn bond_term(b: &Bond, x: &[Vec3], f: &mut [Vec3]) -> f64 {
    let r = x[b.i] - x[b.j];
    let d = r.norm();
    let dl = d - b.l0;
    if d > 0.0 {
        let fi = r * (-b.k * dl / d);
        f[b.i] += fi;
        f[b.j] -= fi;
    }
    0.5 * b.k * dl * dl
}

fn angle_term(a: &Angle, x: &[Vec3], f: &mut [Vec3]) -> Result<f64> {
    let u = x[a.i] - x[a.j];
    let w = x[a.k] - x[a.j];
    let (nu, nw) = (u.norm(), w.norm());
    if nu < 1e-12 || nw < 1e-12 {
        return Err(Error::degenerate(format!("zero-length arm in angle {}-{}-{}", a.i, a.j, a.k)));
    }
    let cos = (u.dot(&w) / (nu * nw)).clamp(-1.0, 1.0);
    let sin = (1.0 - cos * cos).sqrt();
    if sin < 1e-8 {
        return Err(Error::degenerate(format!("colinear angle {}-{}-{}", a.i, a.j, a.k)));
    }
    let alpha = cos.acos();
    let du = a.c * (alpha - a.alpha0);
    // dalpha/du = -(dcos/du)/sin
    let dcos_du = w / (nu * nw) - u * (cos / (nu * nu));
    let dcos_dw = u / (nu * nw) - w * (cos / (nw * nw));
    let fi = dcos_du * (du / sin);
    let fk = dcos_dw * (du / sin);
    f[a.i] += fi;
    f[a.k] += fk;
    f[a.j] -= fi + fk;
    Ok(0.5 * a.c * (alpha - a.alpha0).powi(2))
}

/// Signed dihedral of `i-j-k-l` in `(-pi, pi]`.
pub fn dihedral(xi: &Vec3, xj: &Vec3, xk: &Vec3, xl: &Vec3) -> f64 {
    let b1 = xj - xi;
    let b2 = xk - xj;
    let b3 = xl - xk;
    let n1 = b1.cross(&b2);
    let n2 = b2.cross(&b3);
    (b2.norm() * b1.dot(&n2)).atan2(n1.dot(&n2))
}

fn torsion_term(t: &Torsion, x: &[Vec3], f: &mut [Vec3]) -> Result<f64> {
    let b1 = x[t.j] - x[t.i];
    let b2 = x[t.k] - x[t.j];
    let b3 = x[t.l] - x[t.k];
    let n1 = b1.cross(&b2);
    let n2 = b2.cross(&b3);
    let (n1sq, n2sq, b2n) = (n1.norm_squared(), n2.norm_squared(), b2.norm());
    if n1sq < 1e-20 || n2sq < 1e-20 || b2n < 1e-12 {
        return Err(Error::degenerate(format!("undefined torsion {}-{}-{}-{}", t.i, t.j, t.k, t.l)));
    }
    let theta = (b2n * b1.dot(&n2)).atan2(n1.dot(&n2));
    let mut energy = 0.0;
    let mut de = 0.0;
    for s in &t.series {
        let arg = s.periodicity * theta - s.phase;
        energy += 0.5 * s.amplitude * (1.0 + arg.cos());
        de += -0.5 * s.amplitude * s.periodicity * arg.sin();
    }
    let gi = n1 * (-b2n / n1sq);
    let gl = n2 * (b2n / n2sq);
    let p = b1.dot(&b2) / (b2n * b2n);
    let q = b3.dot(&b2) / (b2n * b2n);
    let gj = gl * q - gi * (1.0 + p);
    let gk = gi * p - gl * (1.0 + q);
    f[t.i] -= gi * de;
    f[t.j] -= gj * de;
    f[t.k] -= gk * de;
    f[t.l] -= gl * de;
    Ok(energy)
}

fn pair_distance(x: &[Vec3], i: usize, j: usize) -> Result<(Vec3, f64)> {
    let r = x[i] - x[j];
    let d = r.norm();
    if d < 1e-12 {
        return Err(Error::Singularity(format!("atoms {i} and {j} coincide")));
    }
    Ok((r, d))
}

impl Potential for ForceField {
    fn masses(&self) -> &[f64] {
        &self.masses
    }

    fn energy_and_forces(&self, x: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
        self.check_len(x)?;
        let mut f = vec![Vec3::zeros(); x.len()];
        let mut u = 0.0;
        for b in &self.bonds {
            u += bond_term(b, x, &mut f);
        }
        for a in &self.angles {
            u += angle_term(a, x, &mut f)?;
        }
        for t in &self.torsions {
            u += torsion_term(t, x, &mut f)?;
        }
        for p in &self.lj {
            let (r, d) = pair_distance(x, p.i, p.j)?;
            let s6 = (p.x0 / d).powi(6);
            u += p.epsilon * (s6 * s6 - 2.0 * s6);
            // -dU/dd = 12 eps (s12 - s6) / d
            let fi = r * (12.0 * p.epsilon * (s6 * s6 - s6) / (d * d));
            f[p.i] += fi;
            f[p.j] -= fi;
        }
        for i in 0..x.len() {
            if self.charges[i] == 0.0 {
                continue;
            }
            for j in i + 1..x.len() {
                if self.charges[j] == 0.0 {
                    continue;
                }
                let (r, d) = pair_distance(x, i, j)?;
                let e = self.charges[i] * self.charges[j] / (self.dielectric * d);
                u += e;
                let fi = r * (e / (d * d));
                f[i] += fi;
                f[j] -= fi;
            }
        }
        Ok((u, f))
    }
}

/// `U = k/2 sum |x_i|^2`, an isotropic trap at the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct HarmonicTrap {
    pub masses: Vec<f64>,
    pub k: f64,
}

impl Potential for HarmonicTrap {
    fn masses(&self) -> &[f64] {
        &self.masses
    }

    fn energy_and_forces(&self, x: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
        let u = 0.5 * self.k * x.iter().map(|v| v.norm_squared()).sum::<f64>();
        Ok((u, x.iter().map(|v| -v * self.k).collect()))
    }
}

/// `U = h ((x^2 - w^2)/w^2)^2` on the x coordinate of every atom.
#[derive(Clone, Debug, PartialEq)]
pub struct DoubleWell {
    pub masses: Vec<f64>,
    pub height: f64,
    pub half_width: f64,
}

impl Potential for DoubleWell {
    fn masses(&self) -> &[f64] {
        &self.masses
    }

    fn energy_and_forces(&self, x: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
        let w2 = self.half_width * self.half_width;
        let mut u = 0.0;
        let f = x
            .iter()
            .map(|p| {
                let q = (p.x * p.x - w2) / w2;
                u += self.height * q * q;
                Vec3::new(-self.height * 2.0 * q * 2.0 * p.x / w2, 0.0, 0.0)
            })
            .collect();
        Ok((u, f))
    }
}

/// Potential term list as written in fixture files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PotentialSpec {
    ForceField {
        #[serde(default = "one")]
        dielectric: f64,
        #[serde(default)]
        bonds: Vec<Bond>,
        #[serde(default)]
        angles: Vec<Angle>,
        #[serde(default)]
        torsions: Vec<Torsion>,
        #[serde(default)]
        lj: Vec<LjPair>,
    },
    HarmonicTrap {
        k: f64,
    },
    DoubleWell {
        height: f64,
        half_width: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureAtom {
    pub element: String,
    pub mass: f64,
    #[serde(default)]
    pub charge: f64,
    pub position: [f64; 3],
    #[serde(default)]
    pub velocity: [f64; 3],
}

/// A small system: atoms, starting state and potential.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixture {
    pub name: String,
    pub dt: f64,
    pub atoms: Vec<FixtureAtom>,
    pub potential: PotentialSpec,
}

/// Concrete potential built from a fixture.
#[derive(Clone, Debug, PartialEq)]
pub enum System {
    ForceField(ForceField),
    HarmonicTrap(HarmonicTrap),
    DoubleWell(DoubleWell),
}

impl Potential for System {
    fn masses(&self) -> &[f64] {
        match self {
            System::ForceField(p) => p.masses(),
            System::HarmonicTrap(p) => p.masses(),
            System::DoubleWell(p) => p.masses(),
        }
    }

    fn energy_and_forces(&self, x: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
        match self {
            System::ForceField(p) => p.energy_and_forces(x),
            System::HarmonicTrap(p) => p.energy_and_forces(x),
            System::DoubleWell(p) => p.energy_and_forces(x),
        }
    }
}

const BUILTIN: [(&str, &str); 5] = [
    ("harmonic_1d", include_str!("../fixtures/harmonic_1d.toml")),
    ("harmonic_3d", include_str!("../fixtures/harmonic_3d.toml")),
    ("lj_trimer", include_str!("../fixtures/lj_trimer.toml")),
    ("butane", include_str!("../fixtures/butane.toml")),
    ("double_well", include_str!("../fixtures/double_well.toml")),
];

impl Fixture {
    pub fn builtin_names() -> Vec<&'static str> {
        BUILTIN.iter().map(|(n, _)| *n).collect()
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::arg(format!("unknown fixture {name:?}; known: {:?}", Self::builtin_names())))?;
        Self::from_toml_str(text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let fx: Fixture = toml::from_str(text).map_err(|e| Error::arg(format!("bad fixture: {e}")))?;
        fx.system()?;
        positive(fx.dt, "dt")?;
        Ok(fx)
    }

    /// Loads a fixture file, or a built-in fixture when `spec` names one.
    pub fn load(spec: &str) -> Result<Self> {
        if BUILTIN.iter().any(|(n, _)| *n == spec) {
            return Self::builtin(spec);
        }
        Self::from_toml_str(&std::fs::read_to_string(Path::new(spec))?)
    }

    pub fn masses(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.mass).collect()
    }

    pub fn system(&self) -> Result<System> {
        if self.atoms.is_empty() {
            return Err(Error::arg("fixture has no atoms"));
        }
        let masses = self.masses();
        for &m in &masses {
            positive(m, "mass")?;
        }
        Ok(match &self.potential {
            PotentialSpec::ForceField { dielectric, bonds, angles, torsions, lj } => {
                let ff = ForceField {
                    charges: self.atoms.iter().map(|a| a.charge).collect(),
                    masses,
                    dielectric: *dielectric,
                    bonds: bonds.clone(),
                    angles: angles.clone(),
                    torsions: torsions.clone(),
                    lj: lj.clone(),
                };
                ff.validate()?;
                System::ForceField(ff)
            }
            PotentialSpec::HarmonicTrap { k } => {
                nonneg(*k, "trap stiffness")?;
                System::HarmonicTrap(HarmonicTrap { masses, k: *k })
            }
            PotentialSpec::DoubleWell { height, half_width } => {
                nonneg(*height, "well height")?;
                positive(*half_width, "well half-width")?;
                System::DoubleWell(DoubleWell { masses, height: *height, half_width: *half_width })
            }
        })
    }

    pub fn atom_numbers(&self) -> Result<Vec<u32>> {
        self.atoms
            .iter()
            .map(|a| atomic_number(&a.element).ok_or_else(|| Error::arg(format!("unknown element {:?}", a.element))))
            .collect()
    }

    /// Starting state; velocities are in length per time unit.
    pub fn start(&self) -> Result<Conformation> {
        Conformation::new(
            self.atoms.iter().map(|a| Vec3::from(a.position)).collect(),
            self.atoms.iter().map(|a| Vec3::from(a.velocity)).collect(),
            self.atom_numbers()?,
        )
    }
}

/// One velocity-Verlet step; returns `(x', v')`.
pub fn velocity_verlet_step<P: Potential + ?Sized>(pot: &P, x: &[Vec3], v: &[Vec3], dt: f64) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let f = pot.forces(x)?;
    let (x1, v1, _) = verlet_with_forces(pot, x, v, &f, dt, None)?;
    Ok((x1, v1))
}

/// Returns `(x', v', F(x'))` where forces come from the (possibly boosted)
/// surface.
fn verlet_with_forces<P: Potential + ?Sized>(
    pot: &P,
    x: &[Vec3],
    v: &[Vec3],
    f: &[Vec3],
    dt: f64,
    boost: Option<&GamdParams>,
) -> Result<(Vec<Vec3>, Vec<Vec3>, Vec<Vec3>)> {
    let m = pot.masses();
    if m.len() != x.len() || v.len() != x.len() {
        return Err(Error::arg("state and masses disagree in length"));
    }
    let x1: Vec<Vec3> = (0..x.len()).map(|i| x[i] + v[i] * dt + f[i] * (0.5 * dt * dt / m[i])).collect();
    let f1 = boosted_forces(pot, &x1, boost)?.1;
    let v1 = (0..x.len()).map(|i| v[i] + (f[i] + f1[i]) * (0.5 * dt / m[i])).collect();
    Ok((x1, v1, f1))
}

/// Parameters of the Gaussian-accelerated boost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GamdParams {
    pub u_bar: f64,
    pub eta_u: f64,
    pub sigma_0: f64,
}

/// `0.5 eta (u_bar - u)^2` below the threshold, else 0.
pub fn gamd_boost(g: &GamdParams, u: f64) -> f64 {
    if u < g.u_bar {
        0.5 * g.eta_u * (g.u_bar - u).powi(2)
    } else {
        0.0
    }
}

/// Whether `eta (u_bar - u_avg) sigma_u <= sigma_0`.
pub fn gamd_sigma_check(g: &GamdParams, u_avg: f64, sigma_u: f64, eta: f64) -> bool {
    eta * (g.u_bar - u_avg) * sigma_u <= g.sigma_0
}

/// Energy and forces of `U* = U + boost(U)`; returns `(U, F*, boost)`.
fn boosted_forces<P: Potential + ?Sized>(pot: &P, x: &[Vec3], boost: Option<&GamdParams>) -> Result<(f64, Vec<Vec3>, f64)> {
    let (u, mut f) = pot.energy_and_forces(x)?;
    let mut extra = 0.0;
    if let Some(g) = boost {
        if u < g.u_bar {
            extra = gamd_boost(g, u);
            let scale = 1.0 - g.eta_u * (g.u_bar - u);
            for fi in &mut f {
                *fi *= scale;
            }
        }
    }
    Ok((u, f, extra))
}

/// Stochastic velocity rescaling towards a target temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermostatConfig {
    /// Target temperature in energy units (`k_B T`).
    pub temperature: f64,
    /// Relaxation time.
    pub tau: f64,
    /// Degrees of freedom; defaults to `3N - 3`.
    #[serde(default)]
    pub dof: Option<usize>,
}

pub fn kinetic_energy(masses: &[f64], v: &[Vec3]) -> f64 {
    masses.iter().zip(v).map(|(m, v)| 0.5 * m * v.norm_squared()).sum()
}

impl ThermostatConfig {
    fn dof(&self, n: usize) -> usize {
        self.dof.unwrap_or(if n > 1 { 3 * n - 3 } else { 3 })
    }

    /// Rescales `v` in place following the canonical-sampling
    /// velocity-rescaling update over one step of length `dt`.
    pub fn apply<R: Rng + ?Sized>(&self, masses: &[f64], v: &mut [Vec3], dt: f64, rng: &mut R) -> Result<()> {
        let k = kinetic_energy(masses, v);
        if k <= 0.0 {
            return Ok(());
        }
        let nf = self.dof(v.len());
        let k_target = 0.5 * nf as f64 * self.temperature;
        let c = (-dt / self.tau).exp();
        let r1: f64 = rng.sample(StandardNormal);
        let rest = if nf > 1 {
            ChiSquared::new((nf - 1) as f64).map_err(|e| Error::arg(e.to_string()))?.sample(rng)
        } else {
            0.0
        };
        let k_new = k
            + (1.0 - c) * (k_target * (r1 * r1 + rest) / nf as f64 - k)
            + 2.0 * r1 * (c * (1.0 - c) * k * k_target / nf as f64).sqrt();
        let alpha = (k_new.max(0.0) / k).sqrt();
        for vi in v.iter_mut() {
            *vi *= alpha;
        }
        Ok(())
    }
}

/// Maxwell-Boltzmann velocities at `temperature` with zero linear and
/// angular momentum, rescaled to the exact target kinetic energy.
pub fn thermal_velocities<R: Rng + ?Sized>(masses: &[f64], x: &[Vec3], temperature: f64, rng: &mut R) -> Result<Vec<Vec3>> {
    let mut v: Vec<Vec3> = masses.iter().map(|m| standard_normal_vec(rng) * (temperature / m).sqrt()).collect();
    remove_rigid_motion(masses, x, &mut v)?;
    let n = masses.len();
    let dof = if n > 2 { 3 * n - 6 } else if n == 2 { 1 } else { 3 };
    let k = kinetic_energy(masses, &v);
    if k > 0.0 {
        let alpha = (0.5 * dof as f64 * temperature / k).sqrt();
        for vi in &mut v {
            *vi *= alpha;
        }
    }
    Ok(v)
}

/// Removes centre-of-mass velocity and, for more than one atom, the rigid
/// rotation about the centre of mass.
pub fn remove_rigid_motion(masses: &[f64], x: &[Vec3], v: &mut [Vec3]) -> Result<()> {
    let n = masses.len();
    if n < 2 {
        return Ok(());
    }
    let mt: f64 = masses.iter().sum();
    let com = x.iter().zip(masses).map(|(x, m)| x * *m).sum::<Vec3>() / mt;
    let vcm = v.iter().zip(masses).map(|(v, m)| v * *m).sum::<Vec3>() / mt;
    for vi in v.iter_mut() {
        *vi -= vcm;
    }
    let mut l = Vec3::zeros();
    let mut inertia = Matrix3::zeros();
    for i in 0..n {
        let r = x[i] - com;
        l += r.cross(&v[i]) * masses[i];
        inertia += (Matrix3::identity() * r.norm_squared() - r * r.transpose()) * masses[i];
    }
    // colinear systems have a singular inertia tensor; use the pseudo-inverse
    let omega = inertia
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::Numeric(format!("inertia tensor: {e}")))?
        * l;
    for i in 0..n {
        let r = x[i] - com;
        v[i] -= omega.cross(&r);
    }
    Ok(())
}

/// Options for [`simulate`].
pub struct SimulateOptions<'a, R: Rng + ?Sized> {
    pub boost: Option<&'a GamdParams>,
    pub thermostat: Option<(&'a ThermostatConfig, &'a mut R)>,
    /// Record one frame every this many steps.
    pub record_every: usize,
}

impl<R: Rng + ?Sized> Default for SimulateOptions<'_, R> {
    fn default() -> Self {
        Self { boost: None, thermostat: None, record_every: 1 }
    }
}

/// Per-frame energy bookkeeping from [`simulate_logged`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnergyLog {
    pub potential: Vec<f64>,
    pub kinetic: Vec<f64>,
    pub boost: Vec<f64>,
}

/// Integrates `n_steps` steps from `start` (velocities in length per time
/// unit). The trajectory holds the start frame followed by one frame every
/// `record_every` steps; its frame interval is `dt * record_every` and the
/// stored velocities are in length per frame.
pub fn simulate<P, R>(pot: &P, start: &Conformation, dt: f64, n_steps: usize, opts: SimulateOptions<'_, R>) -> Result<Trajectory>
where
    P: Potential + ?Sized,
    R: Rng + ?Sized,
{
    Ok(simulate_logged(pot, start, dt, n_steps, opts)?.0)
}

pub fn simulate_logged<P, R>(
    pot: &P,
    start: &Conformation,
    dt: f64,
    n_steps: usize,
    mut opts: SimulateOptions<'_, R>,
) -> Result<(Trajectory, EnergyLog)>
where
    P: Potential + ?Sized,
    R: Rng + ?Sized,
{
    if n_steps == 0 {
        return Err(Error::arg("n_steps must be at least 1"));
    }
    positive(dt, "dt")?;
    if opts.record_every == 0 {
        return Err(Error::arg("record_every must be at least 1"));
    }
    let masses = pot.masses().to_vec();
    if masses.len() != start.len() {
        return Err(Error::arg(format!("potential has {} atoms, start frame {}", masses.len(), start.len())));
    }
    let frame_dt = dt * opts.record_every as f64;
    let frame = |x: &[Vec3], v: &[Vec3]| {
        Conformation::new(x.to_vec(), v.iter().map(|v| v * frame_dt).collect(), start.atom_numbers.clone())
    };
    let mut x = start.positions.clone();
    let mut v = start.velocities.clone();
    let (mut u, mut f, mut b) = boosted_forces(pot, &x, opts.boost)?;
    let mut log = EnergyLog::default();
    let record = |log: &mut EnergyLog, u: f64, b: f64, v: &[Vec3]| {
        log.potential.push(u);
        log.kinetic.push(kinetic_energy(&masses, v));
        log.boost.push(b);
    };
    let mut traj = Trajectory::new(vec![frame(&x, &v)?], frame_dt)?
        .with_meta("units", "reduced")
        .with_meta("coulomb_constant", 1)
        .with_meta("velocity_units", "length/frame");
    record(&mut log, u, b, &v);
    for step in 1..=n_steps {
        let (x1, mut v1, _) = verlet_with_forces(pot, &x, &v, &f, dt, opts.boost)
            .map_err(|e| annotate(e, step))?;
        if let Some((th, rng)) = opts.thermostat.as_mut() {
            th.apply(&masses, &mut v1, dt, &mut **rng)?;
        }
        x = x1;
        v = v1;
        (u, f, b) = boosted_forces(pot, &x, opts.boost).map_err(|e| annotate(e, step))?;
        if !u.is_finite() || x.iter().chain(&v).any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::Numeric(format!("non-finite state at step {step}")));
        }
        if step % opts.record_every == 0 {
            traj.push(frame(&x, &v)?)?;
            record(&mut log, u, b, &v);
        }
    }
    Ok((traj, log))
}

fn annotate(e: Error, step: usize) -> Error {
    match e {
        Error::Singularity(m) => Error::Singularity(format!("step {step}: {m}")),
        Error::DegenerateGeometry(m) => Error::DegenerateGeometry(format!("step {step}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
        other => other,
    }
}

//! Spherical Bessel functions, real spherical harmonics and spherical
//! Fourier-Bessel pair features.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::geometry::PairGeometry;
use crate::{Error, Result};

/// Spherical Bessel function of the first kind `j_o(x)`.
///
/// Small arguments use the power series, which avoids the cancellation in
/// the closed forms; larger arguments use upward recurrence from `j_0, j_1`.
pub fn spherical_bessel(o: usize, x: f64) -> f64 {
    if x < o as f64 + 2.0 {
        return bessel_series(o, x);
    }
    let (s, c) = x.sin_cos();
    let j0 = s / x;
    if o == 0 {
        return j0;
    }
    let mut prev = j0;
    let mut cur = s / (x * x) - c / x;
    for n in 1..o {
        let next = (2 * n + 1) as f64 / x * cur - prev;
        prev = cur;
        cur = next;
    }
    cur
}

fn bessel_series(o: usize, x: f64) -> f64 {
    // x^o / (2o+1)!! * sum_k (-x^2/2)^k / (k! (2o+3)(2o+5)...(2o+2k+1))
    let mut lead = 1.0;
    for i in 0..o {
        lead *= x / (2 * i + 3) as f64;
    }
    let y = -0.5 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= y / (k as f64 * (2 * o + 2 * k + 1) as f64);
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    lead * sum
}

/// The `n`-th positive zero of `j_o` (`n >= 1`), by scanning for a sign
/// change and bisecting.
pub fn bessel_root(o: usize, n: usize) -> f64 {
    assert!(n >= 1, "root index starts at 1");
    const STEP: f64 = 0.05;
    let mut found = 0;
    let mut lo = STEP;
    let mut f_lo = spherical_bessel(o, lo);
    loop {
        let hi = lo + STEP;
        let f_hi = spherical_bessel(o, hi);
        if f_lo == 0.0 || f_lo.signum() != f_hi.signum() {
            found += 1;
            if found == n {
                return bisect(o, lo, hi);
            }
        }
        lo = hi;
        f_lo = f_hi;
    }
}

fn bisect(o: usize, mut lo: f64, mut hi: f64) -> f64 {
    let f_lo_sign = spherical_bessel(o, lo).signum();
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f = spherical_bessel(o, mid);
        if f == 0.0 {
            return mid;
        }
        if f.signum() == f_lo_sign {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn associated_legendre(l: usize, m: usize, x: f64) -> f64 {
    // No Condon-Shortley phase.
    let mut pmm = 1.0;
    let somx2 = ((1.0 - x) * (1.0 + x)).max(0.0).sqrt();
    for i in 0..m {
        pmm *= (2 * i + 1) as f64 * somx2;
    }
    if l == m {
        return pmm;
    }
    let mut pmmp1 = x * (2 * m + 1) as f64 * pmm;
    if l == m + 1 {
        return pmmp1;
    }
    let mut pll = 0.0;
    for ll in (m + 2)..=l {
        pll = ((2 * ll - 1) as f64 * x * pmmp1 - (ll + m - 1) as f64 * pmm) / (ll - m) as f64;
        pmm = pmmp1;
        pmmp1 = pll;
    }
    pll
}

/// Orthonormal real spherical harmonic (cosine branch) of degree `o` and
/// order `0 <= m <= o`, with polar angle `phi` and azimuth `theta`.
pub fn real_spherical_harmonic(o: usize, m: usize, phi: f64, theta: f64) -> Result<f64> {
    if m > o {
        return Err(Error::arg(format!("order {m} exceeds degree {o}")));
    }
    let mut ratio = 1.0; // (o-m)! / (o+m)!
    for k in (o - m + 1)..=(o + m) {
        ratio /= k as f64;
    }
    let norm = ((2 * o + 1) as f64 / (4.0 * PI) * ratio).sqrt();
    let azimuthal = if m == 0 { 1.0 } else { 2f64.sqrt() * (m as f64 * theta).cos() };
    Ok(norm * associated_legendre(o, m, phi.cos()) * azimuthal)
}

/// Sizes and cutoff of the spherical Fourier-Bessel basis, with cached
/// Bessel roots and radial normalisation constants.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "BasisSizes", into = "BasisSizes")]
pub struct BasisSpec {
    n_deg: usize,
    n_root: usize,
    n_ord: usize,
    cutoff: f64,
    /// `roots[o][n]`
    roots: Vec<Vec<f64>>,
    /// `radial_norms[o][n] = sqrt(2 / (c^3 j_{o+1}(z_on)^2))`
    radial_norms: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BasisSizes {
    pub n_deg: usize,
    pub n_root: usize,
    pub n_ord: usize,
    pub cutoff: f64,
}

impl Default for BasisSizes {
    fn default() -> Self {
        Self { n_deg: 2, n_root: 2, n_ord: 2, cutoff: 1.6 }
    }
}

impl From<BasisSizes> for BasisSpec {
    fn from(s: BasisSizes) -> Self {
        BasisSpec::new(s.n_deg, s.n_root, s.n_ord, s.cutoff).expect("invalid basis sizes")
    }
}

impl From<BasisSpec> for BasisSizes {
    fn from(b: BasisSpec) -> Self {
        b.sizes()
    }
}

impl PartialEq for BasisSpec {
    fn eq(&self, other: &Self) -> bool {
        self.sizes() == other.sizes()
    }
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSizes::default().into()
    }
}

impl BasisSpec {
    pub fn new(n_deg: usize, n_root: usize, n_ord: usize, cutoff: f64) -> Result<Self> {
        if n_deg == 0 || n_root == 0 || n_ord == 0 {
            return Err(Error::arg("basis sizes must be at least 1"));
        }
        if !(cutoff > 0.0 && cutoff.is_finite()) {
            return Err(Error::arg(format!("cutoff must be positive, got {cutoff}")));
        }
        let roots: Vec<Vec<f64>> =
            (0..n_deg).map(|o| (1..=n_root).map(|n| bessel_root(o, n)).collect()).collect();
        let radial_norms = roots
            .iter()
            .enumerate()
            .map(|(o, zs)| {
                zs.iter()
                    .map(|&z| {
                        let j = spherical_bessel(o + 1, z);
                        (2.0 / (cutoff.powi(3) * j * j)).sqrt()
                    })
                    .collect()
            })
            .collect();
        Ok(Self { n_deg, n_root, n_ord, cutoff, roots, radial_norms })
    }

    pub fn sizes(&self) -> BasisSizes {
        BasisSizes { n_deg: self.n_deg, n_root: self.n_root, n_ord: self.n_ord, cutoff: self.cutoff }
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn root(&self, o: usize, n: usize) -> f64 {
        self.roots[o][n]
    }

    pub fn radial_norm(&self, o: usize, n: usize) -> f64 {
        self.radial_norms[o][n]
    }

    /// Number of entries per pair, `n_deg * n_ord * n_root`.
    pub fn len(&self) -> usize {
        self.n_deg * self.n_ord * self.n_root
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat index of entry `(o, m, n)`.
    pub fn index(&self, o: usize, m: usize, n: usize) -> usize {
        (o * self.n_ord + m) * self.n_root + n
    }

    /// Normalised radial function `sqrt(2/(c^3 j_{o+1}(z)^2)) j_o(z r / c)`.
    pub fn radial(&self, o: usize, n: usize, r: f64) -> f64 {
        self.radial_norms[o][n] * spherical_bessel(o, self.roots[o][n] * r / self.cutoff)
    }
}

/// Which intersection angle enters the harmonic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SbfSide {
    /// Uses the angle at the first atom of the pair (`phi_a`).
    Source,
    /// Uses the angle at the second atom of the pair (`phi_b`).
    Target,
}

/// Spherical Fourier-Bessel features of one pair, indexed by
/// [`BasisSpec::index`]. Orders above the degree give 0.
pub fn sbf_features(pg: &PairGeometry, spec: &BasisSpec, side: SbfSide) -> Result<Vec<f64>> {
    let mut out = vec![0.0; spec.len()];
    sbf_features_into(pg, spec, side, &mut out)?;
    Ok(out)
}

fn sbf_features_into(pg: &PairGeometry, spec: &BasisSpec, side: SbfSide, out: &mut [f64]) -> Result<()> {
    if !(pg.distance > 0.0) {
        return Err(Error::degenerate("zero pair distance in SBF features"));
    }
    let phi = match side {
        SbfSide::Source => pg.phi_a,
        SbfSide::Target => pg.phi_b,
    };
    for o in 0..spec.n_deg {
        for m in 0..spec.n_ord.min(o + 1) {
            let y = real_spherical_harmonic(o, m, phi, pg.theta)?;
            for n in 0..spec.n_root {
                out[spec.index(o, m, n)] = spec.radial(o, n, pg.distance) * y;
            }
        }
    }
    Ok(())
}

/// Row-per-pair stack of SBF features.
#[derive(Clone, Debug)]
pub struct SbfTensor {
    pub values: Vec<f64>,
    pub n_pairs: usize,
    pub width: usize,
}

impl SbfTensor {
    pub fn build(pairs: &[PairGeometry], spec: &BasisSpec, side: SbfSide) -> Result<Self> {
        let width = spec.len();
        let mut values = vec![0.0; pairs.len() * width];
        for (pg, row) in pairs.iter().zip(values.chunks_mut(width)) {
            sbf_features_into(pg, spec, side, row)?;
        }
        Ok(Self { values, n_pairs: pairs.len(), width })
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.values[p * self.width..(p + 1) * self.width]
    }
}

//! Quadrature wavefunctions, homodyne marginals, binned measurement
//! operators with detection efficiency, and seeded Monte-Carlo sampling.
//!
//! Rotation convention: `q_θ = x cos θ + p sin θ`, realized as the phase
//! `e^{i(n−m)θ}` on `ρ_mn`. Every consumer (sampling, POVMs, reconstruction)
//! goes through the functions here so the sign is applied consistently.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{adjoint_loss_channel, DensityMatrix, C64};
use crate::par;

/// One homodyne outcome: the nominal LO angle (radians) and the
/// shot-noise-normalized quadrature value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSample {
    pub angle: f64,
    pub value: f64,
}

/// Angle tolerance used to identify samples with nominal angles.
pub const ANGLE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureDataset {
    pub samples: Vec<QuadratureSample>,
    /// Distinct nominal angles, in order of first appearance.
    pub angle_set: Vec<f64>,
    /// Shot-noise scale the raw values were divided by.
    pub normalization: f64,
}

impl QuadratureDataset {
    /// Build a dataset, collecting the distinct angles from the samples.
    pub fn new(samples: Vec<QuadratureSample>, normalization: f64) -> Result<Self> {
        if !(normalization > 0.0) {
            return Err(Error::param("normalization", "must be positive"));
        }
        let mut angle_set: Vec<f64> = Vec::new();
        for s in &samples {
            if !s.angle.is_finite() || !s.value.is_finite() {
                return Err(Error::param("sample", "angle and value must be finite"));
            }
            if !angle_set.iter().any(|a| (a - s.angle).abs() < ANGLE_TOL) {
                angle_set.push(s.angle);
            }
        }
        Ok(Self {
            samples,
            angle_set,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Index of `angle` in `angle_set`.
    pub fn angle_index(&self, angle: f64) -> Option<usize> {
        self.angle_set.iter().position(|a| (a - angle).abs() < ANGLE_TOL)
    }
}

/// Hermite function `ψ_n(x) = H_n(x) e^{−x²/2} / √(2ⁿ n! √π)`.
pub fn fock_wavefunction(n: usize, x: f64) -> f64 {
    let mut out = vec![0.0; n + 1];
    wavefunctions_into(x, &mut out);
    out[n]
}

/// Fill `out[k] = ψ_k(x)` for `k < out.len()` by the stable three-term
/// recurrence.
pub fn wavefunctions_into(x: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = PI.powf(-0.25) * (-0.5 * x * x).exp();
    if out.len() > 1 {
        out[1] = 2f64.sqrt() * x * out[0];
    }
    for k in 1..out.len() - 1 {
        let kf = k as f64;
        out[k + 1] = (2.0 / (kf + 1.0)).sqrt() * x * out[k] - (kf / (kf + 1.0)).sqrt() * out[k - 1];
    }
}

/// Homodyne probability density `p_θ(x) = Σ ρ_mn e^{i(n−m)θ} ψ_m(x) ψ_n(x)`.
pub fn marginal_pdf(rho: &DensityMatrix, theta: f64, x: f64) -> f64 {
    let mut psi = vec![0.0; rho.dim()];
    wavefunctions_into(x, &mut psi);
    marginal_from_wavefunctions(rho.matrix(), theta, &psi)
}

fn marginal_from_wavefunctions(m: &DMatrix<C64>, theta: f64, psi: &[f64]) -> f64 {
    let d = psi.len();
    let mut total = 0.0;
    for i in 0..d {
        total += m[(i, i)].re * psi[i] * psi[i];
        for j in (i + 1)..d {
            // ρ_ij e^{i(j−i)θ} + c.c.
            let ph = C64::from_polar(1.0, (j as f64 - i as f64) * theta);
            total += 2.0 * (m[(i, j)] * ph).re * psi[i] * psi[j];
        }
    }
    total
}

/// Variance of `q_θ` computed from the moments `⟨a⟩, ⟨a²⟩, ⟨a†a⟩`.
pub fn quadrature_variance(rho: &DensityMatrix, theta: f64) -> f64 {
    let m = rho.matrix();
    let d = rho.dim();
    let mut a1 = C64::new(0.0, 0.0);
    let mut a2 = C64::new(0.0, 0.0);
    let mut n = 0.0;
    for k in 1..d {
        // ⟨a⟩ = Σ √k ρ_{k, k−1}; ⟨a²⟩ = Σ √(k(k−1)) ρ_{k, k−2}.
        a1 += m[(k, k - 1)] * (k as f64).sqrt();
        n += k as f64 * m[(k, k)].re;
        if k >= 2 {
            a2 += m[(k, k - 2)] * ((k * (k - 1)) as f64).sqrt();
        }
    }
    let e = C64::from_polar(1.0, -theta);
    let mean = 2f64.sqrt() * (a1 * e).re;
    let second = (a2 * e * e).re + n + 0.5;
    second - mean * mean
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Half-width beyond which all `ψ_n`, `n ≤ nmax`, are negligible.
fn support_edge(nmax: usize) -> f64 {
    (2.0 * nmax as f64 + 1.0).sqrt() + 12.0
}

/// Overlap integrals `∫_lo^hi ψ_m ψ_n dx` for `m, n ≤ nmax`. Infinite
/// edges are allowed.
pub fn bin_overlaps(nmax: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let edge = support_edge(nmax);
    let a = lo.max(-edge);
    let b = hi.min(edge);
    let d = nmax + 1;
    let mut out = DMatrix::zeros(d, d);
    if !(b > a) {
        return out;
    }
    let (nodes, weights) = gauss_legendre(12);
    let pieces = ((b - a) / 0.25).ceil().max(1.0) as usize;
    let h = (b - a) / pieces as f64;
    let mut psi = vec![0.0; d];
    for piece in 0..pieces {
        let mid = a + (piece as f64 + 0.5) * h;
        for (z, w) in nodes.iter().zip(&weights) {
            let x = mid + 0.5 * h * z;
            wavefunctions_into(x, &mut psi);
            let wt = 0.5 * h * w;
            for i in 0..d {
                let wi = wt * psi[i];
                for j in i..d {
                    out[(i, j)] += wi * psi[j];
                }
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            out[(i, j)] = out[(j, i)];
        }
    }
    out
}

/// Measurement operator for "outcome in `[lo, hi)` at LO angle `theta`",
/// from overlap integrals, including detection efficiency `eta`.
pub fn povm_from_overlaps(overlaps: &DMatrix<f64>, theta: f64, eta: f64) -> Result<DMatrix<C64>> {
    let d = overlaps.nrows();
    // tr(ρΠ) = Σ ρ_mn Π_nm must reproduce p_θ, so Π_ab = e^{i(a−b)θ} I_ab.
    let ideal = DMatrix::from_fn(d, d, |a, b| {
        C64::from_polar(overlaps[(a, b)], (a as f64 - b as f64) * theta)
    });
    if eta == 1.0 {
        Ok(ideal)
    } else {
        adjoint_loss_channel(&ideal, eta)
    }
}

/// Efficiency-aware POVM element for a quadrature bin.
pub fn povm_element(theta: f64, lo: f64, hi: f64, eta: f64, nmax: usize) -> Result<DMatrix<C64>> {
    if !(hi > lo) {
        return Err(Error::param("bin", format!("empty bin [{lo}, {hi}]")));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::param("eta", format!("efficiency {eta} not in (0, 1]")));
    }
    povm_from_overlaps(&bin_overlaps(nmax, lo, hi), theta, eta)
}

/// Quadrature grid used for inverse-CDF sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for SamplingGrid {
    fn default() -> Self {
        Self {
            lo: -8.0,
            hi: 8.0,
            points: 4001,
        }
    }
}

impl SamplingGrid {
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.step()
    }
}

/// Largest probability mass allowed outside the sampling grid.
pub const GRID_MASS_LIMIT: f64 = 1e-4;
/// Samples drawn from one RNG stream; stream `b` serves block `b`.
const BLOCK: usize = 4096;

/// Cumulative marginal harmonics `K_d(x_i) = ∫_{lo}^{x_i} Σ_{n−m=d} ρ_mn ψ_m ψ_n`,
/// so that the CDF at any angle is `Σ_d Re(e^{idθ} K_d)` (with multiplicity
/// 2 for `d > 0`).
struct MarginalCdf {
    grid: SamplingGrid,
    /// `harmonics[d][i]`.
    harmonics: Vec<Vec<C64>>,
}

impl MarginalCdf {
    fn new(rho: &DensityMatrix, grid: SamplingGrid) -> Self {
        let d = rho.dim();
        let m = rho.matrix();
        let dens: Vec<Vec<C64>> = par::map_indexed(grid.points, |i| {
            let mut psi = vec![0.0; d];
            wavefunctions_into(grid.x(i), &mut psi);
            (0..d)
                .map(|k| {
                    let mut acc = C64::new(0.0, 0.0);
                    for a in 0..d - k {
                        // ρ_{a, a+k} e^{ikθ}: here n − m = k for m = a, n = a + k.
                        acc += m[(a, a + k)] * psi[a] * psi[a + k];
                    }
                    acc
                })
                .collect()
        });
        let h = grid.step();
        let mut harmonics = vec![vec![C64::new(0.0, 0.0); grid.points]; d];
        for (k, column) in harmonics.iter_mut().enumerate() {
            for i in 1..grid.points {
                column[i] = column[i - 1] + (dens[i - 1][k] + dens[i][k]) * (0.5 * h);
            }
        }
        Self { grid, harmonics }
    }

    fn cdf_at(&self, i: usize, phases: &[C64]) -> f64 {
        let mut total = self.harmonics[0][i].re;
        for (k, ph) in phases.iter().enumerate().skip(1) {
            total += 2.0 * (self.harmonics[k][i] * ph).re;
        }
        total
    }

    fn phases(&self, theta: f64) -> Vec<C64> {
        (0..self.harmonics.len())
            .map(|k| C64::from_polar(1.0, k as f64 * theta))
            .collect()
    }

    fn total_mass(&self) -> f64 {
        self.harmonics[0][self.grid.points - 1].re
    }

    /// Full CDF column at a fixed angle, made monotone.
    fn column(&self, theta: f64) -> Vec<f64> {
        let phases = self.phases(theta);
        let mut out: Vec<f64> = (0..self.grid.points)
            .map(|i| self.cdf_at(i, &phases))
            .collect();
        for i in 1..out.len() {
            if out[i] < out[i - 1] {
                out[i] = out[i - 1];
            }
        }
        out
    }

    /// Invert a CDF given by `cdf(i)` (non-decreasing up to rounding).
    fn invert(&self, u: f64, cdf: impl Fn(usize) -> f64) -> f64 {
        let n = self.grid.points;
        let target = u * cdf(n - 1);
        let (mut lo, mut hi) = (0usize, n - 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if cdf(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (c0, c1) = (cdf(lo), cdf(hi));
        let frac = if c1 > c0 {
            ((target - c0) / (c1 - c0)).clamp(0.0, 1.0)
        } else {
            0.5
        };
        self.grid.x(lo) + frac * self.grid.step()
    }
}

fn check_mass(cdf: &MarginalCdf) -> Result<()> {
    let outside = 1.0 - cdf.total_mass();
    if outside.abs() > GRID_MASS_LIMIT {
        return Err(Error::GridMass {
            mass: outside,
            limit: GRID_MASS_LIMIT,
        });
    }
    Ok(())
}

fn block_rng(seed: u64, block: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block as u64);
    rng
}

/// Draw `count` homodyne outcomes at angle `theta` by inverse-CDF sampling
/// on the default grid (4001 points on `[−8, 8]`). Deterministic per seed.
pub fn sample_quadratures(
    rho: &DensityMatrix,
    theta: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<QuadratureSample>> {
    sample_quadratures_on(rho, theta, count, seed, SamplingGrid::default())
}

pub fn sample_quadratures_on(
    rho: &DensityMatrix,
    theta: f64,
    count: usize,
    seed: u64,
    grid: SamplingGrid,
) -> Result<Vec<QuadratureSample>> {
    if count == 0 {
        return Err(Error::param("count", "must be at least 1"));
    }
    let cdf = MarginalCdf::new(rho, grid);
    check_mass(&cdf)?;
    let column = cdf.column(theta);
    let blocks = count.div_ceil(BLOCK);
    let chunks = par::map_indexed(blocks, |b| {
        let mut rng = block_rng(seed, b);
        let n = BLOCK.min(count - b * BLOCK);
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                QuadratureSample {
                    angle: theta,
                    value: cdf.invert(u, |i| column[i]),
                }
            })
            .collect::<Vec<_>>()
    });
    Ok(chunks.into_iter().flatten().collect())
}

/// Sampling with per-sample LO phase jitter `φ ~ N(θ, σ²)`. Samples carry
/// the nominal angle `theta`.
pub fn sample_with_phase_noise(
    rho: &DensityMatrix,
    theta: f64,
    sigma: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<QuadratureSample>> {
    if !(sigma >= 0.0) {
        return Err(Error::param("sigma", format!("{sigma} must be ≥ 0")));
    }
    if count == 0 {
        return Err(Error::param("count", "must be at least 1"));
    }
    let cdf = MarginalCdf::new(rho, SamplingGrid::default());
    check_mass(&cdf)?;
    let blocks = count.div_ceil(BLOCK);
    let chunks = par::map_indexed(blocks, |b| {
        let mut rng = block_rng(seed, b);
        let n = BLOCK.min(count - b * BLOCK);
        (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                let u: f64 = rng.random();
                let phi = theta + sigma * z;
                let phases = cdf.phases(phi);
                QuadratureSample {
                    angle: theta,
                    value: cdf.invert(u, |i| cdf.cdf_at(i, &phases)),
                }
            })
            .collect::<Vec<_>>()
    });
    Ok(chunks.into_iter().flatten().collect())
}

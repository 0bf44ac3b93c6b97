//! Maximum-likelihood state reconstruction from binned homodyne data and
//! parametric bootstrap of the reconstructed W(0,0).

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{loss_channel, wigner_origin, DensityMatrix, C64};
use crate::par;
use crate::quadrature::{
    bin_overlaps, povm_from_overlaps, quadrature_variance, sample_quadratures, QuadratureDataset,
    ANGLE_TOL,
};
use crate::spectrum::AngleMap;

/// Probability floor applied to bins with counts but vanishing model weight.
pub const PROBABILITY_FLOOR: f64 = 1e-12;
/// POVMs handled per parallel work item.
const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionConfig {
    pub nmax: usize,
    pub bin_edges: Vec<f64>,
    pub eta_correction: f64,
    pub max_iters: usize,
    pub loglik_tol: f64,
    /// True angle per nominal angle; `None` reconstructs at nominal angles.
    pub angle_overrides: Option<Vec<AngleMap>>,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            nmax: 12,
            bin_edges: uniform_edges(-6.0, 6.0, 0.1),
            eta_correction: 1.0,
            max_iters: 2000,
            loglik_tol: 1e-9,
            angle_overrides: None,
        }
    }
}

/// Edges `lo, lo + width, …, hi`.
pub fn uniform_edges(lo: f64, hi: f64, width: f64) -> Vec<f64> {
    let n = ((hi - lo) / width).round() as usize;
    (0..=n).map(|i| lo + i as f64 * width).collect()
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nmax < 1 {
            return Err(Error::param("nmax", "must be at least 1"));
        }
        if self.bin_edges.len() < 2 {
            return Err(Error::param("bin_edges", "need at least two edges"));
        }
        if self.bin_edges.iter().any(|e| !e.is_finite()) || self.bin_edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::param("bin_edges", "must be finite and strictly increasing"));
        }
        if !(self.eta_correction > 0.0 && self.eta_correction <= 1.0) {
            return Err(Error::param("eta_correction", format!("{} not in (0, 1]", self.eta_correction)));
        }
        if self.max_iters == 0 {
            return Err(Error::param("max_iters", "must be at least 1"));
        }
        if !(self.loglik_tol > 0.0) {
            return Err(Error::param("loglik_tol", "must be positive"));
        }
        Ok(())
    }

    fn reconstruction_angle(&self, nominal: f64) -> Result<f64> {
        match &self.angle_overrides {
            None => Ok(nominal),
            Some(map) => map
                .iter()
                .find(|m| (m.nominal - nominal).abs() < ANGLE_TOL)
                .map(|m| m.actual)
                .ok_or_else(|| {
                    Error::param(
                        "true_angles",
                        format!("no mapping for nominal angle {:.3}°", nominal.to_degrees()),
                    )
                }),
        }
    }
}

/// Per-angle histograms. Bin 0 is `(−∞, e_0)`, bin `k` is
/// `[e_{k−1}, e_k)`, and the last bin is `[e_last, ∞)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedData {
    pub angles: Vec<f64>,
    pub edges: Vec<f64>,
    pub counts: Vec<Vec<u64>>,
    /// Fraction of samples in the two open-ended bins.
    pub outside_fraction: f64,
}

impl BinnedData {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Interval covered by bin `k`.
    pub fn bin_range(&self, k: usize) -> (f64, f64) {
        let e = &self.edges;
        if k == 0 {
            (f64::NEG_INFINITY, e[0])
        } else if k == e.len() {
            (e[k - 1], f64::INFINITY)
        } else {
            (e[k - 1], e[k])
        }
    }
}

pub fn bin_dataset(dataset: &QuadratureDataset, config: &ReconstructionConfig) -> Result<BinnedData> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset has no samples".into()));
    }
    let edges = &config.bin_edges;
    let nbins = edges.len() + 1;
    let mut counts = vec![vec![0u64; nbins]; dataset.angle_set.len()];
    for s in &dataset.samples {
        let a = dataset
            .angle_index(s.angle)
            .ok_or_else(|| Error::param("angle", "sample angle missing from angle set"))?;
        counts[a][edges.partition_point(|&e| e <= s.value)] += 1;
    }
    let outside: u64 = counts.iter().map(|c| c[0] + c[nbins - 1]).sum();
    Ok(BinnedData {
        angles: dataset.angle_set.clone(),
        edges: edges.clone(),
        outside_fraction: outside as f64 / dataset.len() as f64,
        counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionMetrics {
    pub w00: f64,
    pub var_0: f64,
    pub var_90: f64,
    pub populations: Vec<f64>,
}

impl ReconstructionMetrics {
    pub fn of(rho: &DensityMatrix) -> Self {
        Self {
            w00: wigner_origin(rho),
            var_0: quadrature_variance(rho, 0.0),
            var_90: quadrature_variance(rho, PI / 2.0),
            populations: rho.populations(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Some bin with counts had model probability below the floor.
    pub regularized: bool,
    /// Iterations that fell back to a damped update to keep the
    /// likelihood non-decreasing.
    pub damped_steps: usize,
    pub outside_fraction: f64,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub rho: DensityMatrix,
    pub loglik_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub metrics: ReconstructionMetrics,
    pub diagnostics: Diagnostics,
}

impl ReconstructionResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_history.last().unwrap_or(&f64::NEG_INFINITY)
    }
}

/// Measurement operators with nonzero counts, flattened row-major.
struct Likelihood {
    dim: usize,
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
    /// `n_j / N`.
    freq: Vec<f64>,
    counts: Vec<f64>,
}

impl Likelihood {
    fn build(binned: &BinnedData, config: &ReconstructionConfig) -> Result<Self> {
        let nbins = binned.edges.len() + 1;
        let used: Vec<usize> = (0..nbins)
            .filter(|&k| binned.counts.iter().any(|c| c[k] > 0))
            .collect();
        let overlaps = par::map_slice(&used, |&k| {
            let (lo, hi) = binned.bin_range(k);
            bin_overlaps(config.nmax, lo, hi)
        });
        let mut jobs = Vec::new();
        for (a, &nominal) in binned.angles.iter().enumerate() {
            let theta = config.reconstruction_angle(nominal)?;
            for (u, &k) in used.iter().enumerate() {
                let n = binned.counts[a][k];
                if n > 0 {
                    jobs.push((theta, u, n));
                }
            }
        }
        let povms = par::map_slice(&jobs, |&(theta, u, _)| {
            povm_from_overlaps(&overlaps[u], theta, config.eta_correction)
        });
        let total = binned.total() as f64;
        let dim = config.nmax + 1;
        let mut out = Self {
            dim,
            re: Vec::with_capacity(jobs.len()),
            im: Vec::with_capacity(jobs.len()),
            freq: Vec::with_capacity(jobs.len()),
            counts: Vec::with_capacity(jobs.len()),
        };
        for (p, &(_, _, n)) in povms.into_iter().zip(&jobs) {
            let p = p?;
            out.re.push(flatten(&p, |c| c.re));
            out.im.push(flatten(&p, |c| c.im));
            out.freq.push(n as f64 / total);
            out.counts.push(n as f64);
        }
        Ok(out)
    }

    /// Log-likelihood and `R = Σ (n_j / N p_j) Π_j`, reduced in fixed
    /// chunk order.
    fn evaluate(&self, rho: &DMatrix<C64>, want_r: bool) -> (f64, Option<DMatrix<C64>>, bool) {
        let d = self.dim;
        let rre = flatten(rho, |c| c.re);
        let rim = flatten(rho, |c| c.im);
        let chunks = self.re.len().div_ceil(CHUNK);
        let parts = par::map_indexed(chunks, |c| {
            let range = c * CHUNK..((c + 1) * CHUNK).min(self.re.len());
            let mut ll = 0.0;
            let mut floored = false;
            let mut sre = if want_r { vec![0.0; d * d] } else { Vec::new() };
            let mut sim = if want_r { vec![0.0; d * d] } else { Vec::new() };
            for j in range {
                let (pre, pim) = (&self.re[j], &self.im[j]);
                let mut p: f64 = 0.0;
                for k in 0..d * d {
                    p += rre[k] * pre[k] + rim[k] * pim[k];
                }
                if p < PROBABILITY_FLOOR {
                    p = PROBABILITY_FLOOR;
                    floored = true;
                }
                ll += self.counts[j] * p.ln();
                if want_r {
                    let w = self.freq[j] / p;
                    for k in 0..d * d {
                        sre[k] += w * pre[k];
                        sim[k] += w * pim[k];
                    }
                }
            }
            (ll, sre, sim, floored)
        });
        let mut ll = 0.0;
        let mut floored = false;
        let mut r = want_r.then(|| DMatrix::<C64>::zeros(d, d));
        for (l, sre, sim, f) in parts {
            ll += l;
            floored |= f;
            if let Some(r) = r.as_mut() {
                for i in 0..d {
                    for j in 0..d {
                        r[(i, j)] += C64::new(sre[i * d + j], sim[i * d + j]);
                    }
                }
            }
        }
        (ll, r, floored)
    }
}

fn flatten(m: &DMatrix<C64>, f: impl Fn(&C64) -> f64) -> Vec<f64> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            out.push(f(&m[(i, j)]));
        }
    }
    out
}

fn sandwich(a: &DMatrix<C64>, rho: &DMatrix<C64>) -> DMatrix<C64> {
    let m = a * rho * a;
    let m = (&m + m.adjoint()) * C64::new(0.5, 0.0);
    let tr = m.trace().re;
    m / C64::new(tr, 0.0)
}

/// Reconstruct at the nominal angles, or at `config.angle_overrides` when
/// set.
pub fn mle_reconstruct(dataset: &QuadratureDataset, config: &ReconstructionConfig) -> Result<ReconstructionResult> {
    let binned = bin_dataset(dataset, config)?;
    if binned.angles.len() < 2 {
        return Err(Error::param("dataset", "need at least two distinct angles"));
    }
    let mut diagnostics = Diagnostics {
        outside_fraction: binned.outside_fraction,
        ..Default::default()
    };
    let span = angular_span(&binned.angles);
    if span < PI / 2.0 - ANGLE_TOL {
        diagnostics
            .warnings
            .push(format!("angles span only {:.1}°", span.to_degrees()));
    }
    let lik = Likelihood::build(&binned, config)?;
    let d = config.nmax + 1;
    let identity = DMatrix::<C64>::identity(d, d);
    let mut rho = DensityMatrix::maximally_mixed(config.nmax).into_matrix();
    let (mut ll, mut r, floored) = lik.evaluate(&rho, true);
    diagnostics.regularized |= floored;
    let mut history = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        let rm = r.take().expect("R computed");
        let mut next = sandwich(&rm, &rho);
        let (mut ll_next, _, mut floor_next) = lik.evaluate(&next, false);
        if ll_next < ll {
            // Damped update (I + εR)ρ(I + εR), halving ε until the
            // likelihood stops decreasing.
            diagnostics.damped_steps += 1;
            let mut eps = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let a = &identity + &rm * C64::new(eps, 0.0);
                let trial = sandwich(&a, &rho);
                let (lt, _, ft) = lik.evaluate(&trial, false);
                if lt >= ll {
                    next = trial;
                    ll_next = lt;
                    floor_next = ft;
                    accepted = true;
                    break;
                }
                eps *= 0.5;
            }
            if !accepted {
                converged = true;
                break;
            }
        }
        diagnostics.regularized |= floor_next;
        let increment = (ll_next - ll) / ll.abs().max(f64::MIN_POSITIVE);
        rho = next;
        let (l, rn, f) = lik.evaluate(&rho, true);
        diagnostics.regularized |= f;
        ll = l;
        r = rn;
        history.push(ll);
        if increment < config.loglik_tol {
            converged = true;
            break;
        }
    }
    let rho = DensityMatrix::from_matrix(rho)?;
    Ok(ReconstructionResult {
        metrics: ReconstructionMetrics::of(&rho),
        rho,
        loglik_history: history,
        iterations,
        converged,
        diagnostics,
    })
}

/// Largest angular extent of the angles on the half circle.
fn angular_span(angles: &[f64]) -> f64 {
    let mut a: Vec<f64> = angles.iter().map(|x| x.rem_euclid(PI)).collect();
    a.sort_by(f64::total_cmp);
    if a.len() < 2 {
        return 0.0;
    }
    let mut gap = PI - (a[a.len() - 1] - a[0]);
    for w in a.windows(2) {
        gap = gap.max(w[1] - w[0]);
    }
    PI - gap
}

/// Reconstruction with POVMs built at `true_angles`; dataset tags stay
/// nominal.
pub fn reconstruct_with_angles(
    dataset: &QuadratureDataset,
    config: &ReconstructionConfig,
    true_angles: &[AngleMap],
) -> Result<ReconstructionResult> {
    let cfg = ReconstructionConfig {
        angle_overrides: Some(true_angles.to_vec()),
        ..config.clone()
    };
    mle_reconstruct(dataset, &cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub n_resamples: usize,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub failures: usize,
}

/// Largest tolerated fraction of failed resamples.
pub const BOOTSTRAP_FAILURE_LIMIT: f64 = 0.1;

/// Parametric bootstrap of W(0,0).
///
/// Resamples are drawn from the marginals the detector would see: when the
/// config corrects for efficiency `η`, `rho` is the corrected state and is
/// sent through `loss_channel(η)` first. Samples are drawn at the
/// reconstruction angles and tagged with the nominal ones. Resample `r`,
/// angle `a` uses seed `seed + r · n_angles + a`.
pub fn bootstrap_metric(
    rho: &DensityMatrix,
    config: &ReconstructionConfig,
    n_resamples: usize,
    per_angle_counts: &[(f64, usize)],
    seed: u64,
) -> Result<BootstrapResult> {
    config.validate()?;
    if n_resamples < 2 {
        return Err(Error::param("n_resamples", "must be at least 2"));
    }
    if per_angle_counts.is_empty() || per_angle_counts.iter().any(|&(_, n)| n == 0) {
        return Err(Error::param("per_angle_counts", "need at least one sample per angle"));
    }
    rho.check_physical(1e-6, 1e-8)?;
    let detected = if config.eta_correction < 1.0 {
        loss_channel(rho, config.eta_correction)?
    } else {
        rho.clone()
    };
    let n_angles = per_angle_counts.len() as u64;
    let angles: Vec<(f64, f64, usize)> = per_angle_counts
        .iter()
        .map(|&(nominal, n)| Ok((nominal, config.reconstruction_angle(nominal)?, n)))
        .collect::<Result<_>>()?;
    let outcomes = par::map_indexed(n_resamples, |r| -> Result<f64> {
        let mut samples = Vec::new();
        for (a, &(nominal, actual, n)) in angles.iter().enumerate() {
            let s = par::task_seed(seed, r as u64 * n_angles + a as u64);
            let mut draw = sample_quadratures(&detected, actual, n, s)?;
            for q in &mut draw {
                q.angle = nominal;
            }
            samples.extend(draw);
        }
        let ds = QuadratureDataset::new(samples, 1.0)?;
        Ok(mle_reconstruct(&ds, config)?.metrics.w00)
    });
    let values: Vec<f64> = outcomes.iter().filter_map(|o| o.as_ref().ok().copied()).collect();
    let failures = n_resamples - values.len();
    if failures as f64 > BOOTSTRAP_FAILURE_LIMIT * n_resamples as f64 || values.len() < 2 {
        let first = outcomes
            .into_iter()
            .find_map(|o| o.err())
            .map(|e| e.to_string())
            .unwrap_or_default();
        return Err(Error::NonConvergence(format!(
            "{failures} of {n_resamples} bootstrap resamples failed (first: {first})"
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(BootstrapResult {
        n_resamples,
        values,
        mean,
        std,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::QuadratureSample;

    fn vacuum_data(per_angle: usize) -> QuadratureDataset {
        let vac = DensityMatrix::vacuum(4);
        let mut samples = Vec::new();
        for (i, deg) in [0.0f64, 60.0, 120.0].iter().enumerate() {
            samples.extend(sample_quadratures(&vac, deg.to_radians(), per_angle, 11 + i as u64).unwrap());
        }
        QuadratureDataset::new(samples, 1.0).unwrap()
    }

    #[test]
    fn binning_preserves_counts() {
        let ds = vacuum_data(500);
        let cfg = ReconstructionConfig::default();
        let b = bin_dataset(&ds, &cfg).unwrap();
        assert_eq!(b.total(), 1500);
        assert_eq!(b.counts.len(), 3);
        assert_eq!(b.counts[0].len(), cfg.bin_edges.len() + 1);

        let mut rev = ds.samples.clone();
        rev.reverse();
        let rev = QuadratureDataset::new(rev, 1.0).unwrap();
        let br = bin_dataset(&rev, &cfg).unwrap();
        // Angle order follows first appearance; compare per angle.
        for (a, ang) in b.angles.iter().enumerate() {
            let ar = br.angles.iter().position(|x| x == ang).unwrap();
            assert_eq!(b.counts[a], br.counts[ar]);
        }
    }

    #[test]
    fn single_sample_single_bin() {
        let ds = QuadratureDataset::new(vec![QuadratureSample { angle: 0.0, value: 0.05 }], 1.0).unwrap();
        let b = bin_dataset(&ds, &ReconstructionConfig::default()).unwrap();
        let nz: Vec<_> = b.counts[0].iter().enumerate().filter(|(_, c)| **c > 0).collect();
        assert_eq!(nz.len(), 1);
        let (lo, hi) = b.bin_range(nz[0].0);
        assert!(lo <= 0.05 && 0.05 < hi);
        let far = QuadratureDataset::new(vec![QuadratureSample { angle: 0.0, value: 9.0 }], 1.0).unwrap();
        assert_eq!(bin_dataset(&far, &ReconstructionConfig::default()).unwrap().outside_fraction, 1.0);
    }

    #[test]
    fn config_validation() {
        let bad = ReconstructionConfig {
            eta_correction: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ReconstructionConfig {
            bin_edges: vec![0.0, -1.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(ReconstructionConfig::default().bin_edges.len(), 121);
    }

    #[test]
    fn vacuum_round_trip() {
        let ds = vacuum_data(2000);
        let cfg = ReconstructionConfig {
            nmax: 6,
            ..Default::default()
        };
        let res = mle_reconstruct(&ds, &cfg).unwrap();
        assert!(res.rho.get(0, 0).re > 0.99);
        for w in res.loglik_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
        }
        assert!(res.diagnostics.warnings.is_empty());
    }

    #[test]
    fn needs_two_angles() {
        let vac = DensityMatrix::vacuum(2);
        let s = sample_quadratures(&vac, 0.0, 100, 1).unwrap();
        let ds = QuadratureDataset::new(s, 1.0).unwrap();
        assert!(mle_reconstruct(&ds, &ReconstructionConfig::default()).is_err());
    }

    #[test]
    fn narrow_angles_warn() {
        let vac = DensityMatrix::vacuum(2);
        let mut s = sample_quadratures(&vac, 0.0, 200, 1).unwrap();
        s.extend(sample_quadratures(&vac, 0.3, 200, 2).unwrap());
        let ds = QuadratureDataset::new(s, 1.0).unwrap();
        let cfg = ReconstructionConfig {
            nmax: 3,
            max_iters: 5,
            ..Default::default()
        };
        let res = mle_reconstruct(&ds, &cfg).unwrap();
        assert_eq!(res.diagnostics.warnings.len(), 1);
    }

    #[test]
    fn identity_override_matches_nominal() {
        let ds = vacuum_data(300);
        let cfg = ReconstructionConfig {
            nmax: 4,
            max_iters: 50,
            ..Default::default()
        };
        let a = mle_reconstruct(&ds, &cfg).unwrap();
        let map = SpectrumIdentity::of(&ds.angle_set);
        let b = reconstruct_with_angles(&ds, &cfg, &map).unwrap();
        assert_eq!(a, b);
        assert!(reconstruct_with_angles(&ds, &cfg, &map[..1]).is_err());
    }

    struct SpectrumIdentity;
    impl SpectrumIdentity {
        fn of(angles: &[f64]) -> Vec<AngleMap> {
            crate::spectrum::SpectrumModelParams::identity_angles(angles)
        }
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let rho = DensityMatrix::vacuum(3);
        let cfg = ReconstructionConfig {
            nmax: 3,
            max_iters: 30,
            ..Default::default()
        };
        let counts = [(0.0, 300), (PI / 3.0, 300), (2.0 * PI / 3.0, 300)];
        let a = bootstrap_metric(&rho, &cfg, 4, &counts, 5).unwrap();
        let b = bootstrap_metric(&rho, &cfg, 4, &counts, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.std >= 0.0);
        assert!(bootstrap_metric(&rho, &cfg, 1, &counts, 5).is_err());
    }

    #[test]
    fn span_of_angles() {
        let deg = |d: f64| d.to_radians();
        assert!((angular_span(&[0.0, deg(150.0)]) - deg(30.0)).abs() < 1e-12);
        assert!((angular_span(&[0.0, deg(60.0), deg(120.0)]) - deg(120.0)).abs() < 1e-12);
    }
}

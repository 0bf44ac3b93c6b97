//! Homodyne time traces: mode functions, quadrature extraction,
//! shot-noise calibration, autocovariance mode search and synthesis of
//! stationary Gaussian test traces.
//!
//! Times are measured from the first sample of a trace, `t_i = i / fs`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Largest tolerated fraction of the mode's L2 mass outside the window.
pub const TAIL_LIMIT: f64 = 1e-3;
/// Minimum ensemble size for calibration and mode search.
pub const MIN_TRACES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeTrace {
    pub sample_rate: f64,
    pub values: Vec<f64>,
    pub trigger_index: usize,
}

impl TimeTrace {
    pub fn new(sample_rate: f64, values: Vec<f64>, trigger_index: usize) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::param("sample_rate", "must be positive"));
        }
        if values.is_empty() {
            return Err(Error::Empty("trace has no samples".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("values", "trace contains non-finite samples"));
        }
        if trigger_index >= values.len() {
            return Err(Error::param(
                "trigger_index",
                format!("{trigger_index} outside trace of {} samples", values.len()),
            ));
        }
        Ok(Self {
            sample_rate,
            values,
            trigger_index,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Time of the trigger sample.
    pub fn trigger_time(&self) -> f64 {
        self.trigger_index as f64 / self.sample_rate
    }
}

/// Discretized, unit-norm temporal mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeFunction {
    pub gamma: f64,
    pub kappa: f64,
    pub t0: f64,
    pub sample_rate: f64,
    pub weights: Vec<f64>,
    /// Fraction of the continuous mode's squared norm outside the window.
    pub tail_fraction: f64,
}

impl ModeFunction {
    /// Wrap arbitrary weights (for example a principal mode) as a mode on
    /// the given grid. The weights are normalized.
    pub fn from_weights(weights: Vec<f64>, sample_rate: f64) -> Result<Self> {
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::param("weights", "must have finite nonzero norm"));
        }
        Ok(Self {
            gamma: f64::NAN,
            kappa: f64::NAN,
            t0: f64::NAN,
            sample_rate,
            weights: weights.into_iter().map(|w| w / norm).collect(),
            tail_fraction: 0.0,
        })
    }
}

/// Unnormalized two-sided mode `e^{−γ|t−t0|}/γ − e^{−κ|t−t0|}/κ`.
pub fn mode_function_eval(t: f64, gamma: f64, kappa: f64, t0: f64) -> f64 {
    let tau = (t - t0).abs();
    (-gamma * tau).exp() / gamma - (-kappa * tau).exp() / kappa
}

/// `∫_L^∞ f(τ)² dτ` for the one-sided mode profile.
fn tail_mass(gamma: f64, kappa: f64, l: f64) -> f64 {
    let l = l.max(0.0);
    (-2.0 * gamma * l).exp() / (2.0 * gamma.powi(3))
        - 2.0 * (-(gamma + kappa) * l).exp() / (gamma * kappa * (gamma + kappa))
        + (-2.0 * kappa * l).exp() / (2.0 * kappa.powi(3))
}

/// Discretize the mode on `round(window · sample_rate)` samples and
/// normalize it.
pub fn build_mode(gamma: f64, kappa: f64, t0: f64, sample_rate: f64, window: f64) -> Result<ModeFunction> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::param("gamma", "must be positive"));
    }
    if !(kappa > gamma && kappa.is_finite()) {
        return Err(Error::param("kappa", format!("must exceed gamma ({kappa} ≤ {gamma})")));
    }
    if !(sample_rate > 0.0) || !(window > 0.0) || !t0.is_finite() {
        return Err(Error::param("window", "sample rate and window must be positive, t0 finite"));
    }
    let n = (window * sample_rate).round() as usize;
    if n == 0 {
        return Err(Error::param("window", "shorter than one sample"));
    }
    let span = n as f64 / sample_rate;
    let total = 2.0 * tail_mass(gamma, kappa, 0.0);
    let outside = if (0.0..=span).contains(&t0) {
        tail_mass(gamma, kappa, t0) + tail_mass(gamma, kappa, span - t0)
    } else {
        total
    };
    let tail_fraction = outside / total;
    if tail_fraction > TAIL_LIMIT {
        return Err(Error::Truncation {
            deficit: tail_fraction,
            limit: TAIL_LIMIT,
        });
    }
    let offset = t0 * sample_rate;
    let raw: Vec<f64> = (0..n)
        .map(|i| mode_function_eval((i as f64 - offset) / sample_rate, gamma, kappa, 0.0))
        .collect();
    let norm = raw.iter().map(|w| w * w).sum::<f64>().sqrt();
    Ok(ModeFunction {
        gamma,
        kappa,
        t0,
        sample_rate,
        weights: raw.into_iter().map(|w| w / norm).collect(),
        tail_fraction,
    })
}

fn check_grid(trace: &TimeTrace, mode: &ModeFunction) -> Result<()> {
    if trace.len() != mode.weights.len() {
        return Err(Error::GridMismatch(format!(
            "trace has {} samples, mode has {}",
            trace.len(),
            mode.weights.len()
        )));
    }
    if ((trace.sample_rate - mode.sample_rate) / mode.sample_rate).abs() > 1e-9 {
        return Err(Error::GridMismatch(format!(
            "trace sampled at {} Hz, mode at {} Hz",
            trace.sample_rate, mode.sample_rate
        )));
    }
    Ok(())
}

/// Raw quadrature value `Σ w_i v_i`.
pub fn extract_quadrature(trace: &TimeTrace, mode: &ModeFunction) -> Result<f64> {
    check_grid(trace, mode)?;
    Ok(trace.values.iter().zip(&mode.weights).map(|(v, w)| v * w).sum())
}

/// Extract one raw value per trace.
pub fn extract_all(traces: &[TimeTrace], mode: &ModeFunction) -> Result<Vec<f64>> {
    par::map_slice(traces, |t| extract_quadrature(t, mode))
        .into_iter()
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotNoise {
    /// Divide raw values by this to reach vacuum variance 1/2.
    pub scale: f64,
    pub std_error: f64,
    /// Raw vacuum variance.
    pub raw_variance: f64,
}

fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Shot-noise normalization from blocked-signal traces.
pub fn shot_noise_scale(vacuum: &[TimeTrace], mode: &ModeFunction) -> Result<ShotNoise> {
    if vacuum.len() < MIN_TRACES {
        return Err(Error::param(
            "vacuum_traces",
            format!("{} traces, need at least {MIN_TRACES}", vacuum.len()),
        ));
    }
    let values = extract_all(vacuum, mode)?;
    let v = sample_variance(&values);
    if !(v > 0.0) {
        return Err(Error::Degenerate("vacuum traces have zero variance".into()));
    }
    let scale = (2.0 * v).sqrt();
    Ok(ShotNoise {
        scale,
        std_error: scale * (1.0 / (2.0 * (values.len() as f64 - 1.0))).sqrt(),
        raw_variance: v,
    })
}

fn covariance(traces: &[TimeTrace]) -> DMatrix<f64> {
    let n = traces.len();
    let d = traces[0].len();
    let mut x = DMatrix::from_fn(n, d, |r, c| traces[r].values[c]);
    for c in 0..d {
        let mean = x.column(c).mean();
        x.column_mut(c).add_scalar_mut(-mean);
    }
    (x.transpose() * &x) / (n as f64 - 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrincipalMode {
    pub weights: Vec<f64>,
    pub eigenvalue: f64,
    /// Ratio of the runner-up to the top eigenvalue magnitude.
    pub gap_ratio: f64,
}

/// Dominant eigenvector of the excess autocovariance (signal minus vacuum).
pub fn principal_mode(traces: &[TimeTrace], vacuum: &[TimeTrace]) -> Result<PrincipalMode> {
    for (name, set) in [("traces", traces), ("vacuum_traces", vacuum)] {
        if set.len() < MIN_TRACES {
            return Err(Error::param(
                name,
                format!("{} traces, need at least {MIN_TRACES}", set.len()),
            ));
        }
    }
    let d = traces[0].len();
    let fs = traces[0].sample_rate;
    if traces.iter().chain(vacuum).any(|t| t.len() != d || t.sample_rate != fs) {
        return Err(Error::GridMismatch("ensembles must share one grid".into()));
    }
    let cs = covariance(traces);
    let cv = covariance(vacuum);
    let excess = &cs - &cv;
    let eig = SymmetricEigen::new(excess);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].abs().total_cmp(&eig.eigenvalues[a].abs()));
    let top = eig.eigenvalues[order[0]];
    let radius = top.abs();
    let second = if d > 1 { eig.eigenvalues[order[1]].abs() } else { 0.0 };
    if radius == 0.0 || radius - second < 1e-6 * radius {
        return Err(Error::Degenerate(format!(
            "top eigenvalues {top} and {second} are not separated"
        )));
    }
    // Sampling noise of a covariance difference: entries fluctuate with
    // std ≈ s·√(1/N_s + 1/N_v), and a symmetric random matrix of that
    // entry scale has spectral edge 2σ√d.
    let s = cs.diagonal().mean().max(cv.diagonal().mean());
    let sigma = s * (1.0 / traces.len() as f64 + 1.0 / vacuum.len() as f64).sqrt();
    let floor = 1.5 * 2.0 * sigma * (d as f64).sqrt();
    if radius <= floor {
        return Err(Error::Degenerate(format!(
            "no excess correlation above the vacuum baseline (|λ| = {radius:.3e}, noise edge {floor:.3e})"
        )));
    }
    let mut w: Vec<f64> = eig.eigenvectors.column(order[0]).iter().copied().collect();
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let peak = w
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let sign = if w[peak] < 0.0 { -1.0 } else { 1.0 };
    for x in &mut w {
        *x *= sign / norm;
    }
    Ok(PrincipalMode {
        weights: w,
        eigenvalue: top,
        gap_ratio: second / radius,
    })
}

/// Stationary zero-mean Gaussian traces whose discrete spectrum is
/// `spectrum(|f|)`. A flat spectrum `V` gives per-sample variance `V`.
///
/// Each trace is white noise filtered in the frequency domain, so the
/// autocovariance is exactly circulant with eigenvalues `spectrum(f_k)`.
pub fn synthesize_gaussian_traces<F>(
    spectrum: F,
    duration: f64,
    sample_rate: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<TimeTrace>>
where
    F: Fn(f64) -> f64 + Sync,
{
    if !(sample_rate > 0.0) || !(duration > 0.0) {
        return Err(Error::param("duration", "duration and sample rate must be positive"));
    }
    let n = (duration * sample_rate).round() as usize;
    if n < 2 {
        return Err(Error::param("duration", "fewer than two samples"));
    }
    if count == 0 {
        return Err(Error::param("count", "must be at least 1"));
    }
    let amplitude: Vec<f64> = (0..n)
        .map(|k| {
            let kk = k.min(n - k);
            let v = spectrum(kk as f64 * sample_rate / n as f64);
            if v.is_finite() && v >= 0.0 {
                Ok(v.sqrt())
            } else {
                Err(Error::param("spectrum", format!("value {v} at bin {k} is negative or not finite")))
            }
        })
        .collect::<Result<_>>()?;
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(n);
    let inverse = planner.plan_fft_inverse(n);
    let traces = par::map_indexed(count, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(par::task_seed(seed, i as u64));
        let mut buf: Vec<Complex<f64>> = (0..n)
            .map(|_| Complex::new(StandardNormal.sample(&mut rng), 0.0))
            .collect();
        forward.process(&mut buf);
        for (b, a) in buf.iter_mut().zip(&amplitude) {
            *b *= *a;
        }
        inverse.process(&mut buf);
        let values = buf.iter().map(|c| c.re / n as f64).collect();
        TimeTrace {
            sample_rate,
            values,
            trigger_index: n / 2,
        }
    });
    Ok(traces)
}

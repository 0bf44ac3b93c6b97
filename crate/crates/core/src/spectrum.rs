//! Dephased squeezing-spectrum model and the joint multi-angle fit.
//!
//! Angles are radians in memory. Nominal angles at 0 and π/2 are locked to
//! their nominal values during fitting; every other angle gets a free
//! true-angle parameter.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

const ANGLE_TOL: f64 = 1e-9;

/// Squeezed and anti-squeezed variances of a below-threshold OPO output at
/// frequency `f` (Hz). Rates are angular (rad/s).
pub fn vx_vp(f: f64, gamma: f64, epsilon: f64, eta: f64) -> (f64, f64) {
    let w2 = (2.0 * PI * f).powi(2);
    let amp = 2.0 * gamma * epsilon * eta;
    (
        0.5 - amp / ((gamma + epsilon).powi(2) + w2),
        0.5 + amp / ((gamma - epsilon).powi(2) + w2),
    )
}

/// Quadrature variance at angle `theta` averaged over Gaussian phase
/// jitter of standard deviation `sigma`.
pub fn dephased_variance(theta: f64, sigma: f64, v_x: f64, v_p: f64) -> f64 {
    let keep = (-2.0 * sigma * sigma).exp();
    let vx = 0.5 * (1.0 + keep) * v_x + 0.5 * (1.0 - keep) * v_p;
    let vp = 0.5 * (1.0 + keep) * v_p + 0.5 * (1.0 - keep) * v_x;
    let c = theta.cos();
    let s = theta.sin();
    vx * c * c + vp * s * s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleMap {
    pub nominal: f64,
    pub actual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumModelParams {
    pub gamma: f64,
    pub epsilon: f64,
    pub eta: f64,
    pub sigma: f64,
    pub theta_true: Vec<AngleMap>,
}

impl SpectrumModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::param("gamma", "must be positive"));
        }
        if !(self.epsilon >= 0.0 && self.epsilon < self.gamma) {
            return Err(Error::param("epsilon", "must satisfy 0 ≤ epsilon < gamma"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::param("eta", "must lie in [0, 1]"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::param("sigma", "must be ≥ 0"));
        }
        Ok(())
    }

    /// True angle for a nominal angle.
    pub fn true_angle(&self, nominal: f64) -> Result<f64> {
        self.theta_true
            .iter()
            .find(|m| (m.nominal - nominal).abs() < ANGLE_TOL)
            .map(|m| m.actual)
            .ok_or_else(|| {
                Error::param(
                    "nominal_angle",
                    format!("no true-angle entry for {:.3}°", nominal.to_degrees()),
                )
            })
    }

    /// Identity angle map over `nominals`.
    pub fn identity_angles(nominals: &[f64]) -> Vec<AngleMap> {
        nominals
            .iter()
            .map(|&n| AngleMap {
                nominal: n,
                actual: n,
            })
            .collect()
    }
}

/// Model curve for one nominal angle. `clearance` multiplies the efficiency
/// per frequency; `None` means 1 everywhere.
pub fn model_spectrum(
    params: &SpectrumModelParams,
    nominal_angle: f64,
    freqs: &[f64],
    clearance: Option<&[f64]>,
) -> Result<Vec<f64>> {
    params.validate()?;
    let theta = params.true_angle(nominal_angle)?;
    if let Some(c) = clearance {
        if c.len() != freqs.len() {
            return Err(Error::DimensionMismatch {
                expected: freqs.len(),
                found: c.len(),
            });
        }
        if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("clearance", "values must lie in [0, 1]"));
        }
    }
    Ok(curve(params, theta, freqs, clearance))
}

fn curve(params: &SpectrumModelParams, theta: f64, freqs: &[f64], clearance: Option<&[f64]>) -> Vec<f64> {
    freqs
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let c = clearance.map_or(1.0, |c| c[i]);
            let (vx, vp) = vx_vp(f, params.gamma, params.epsilon, params.eta * c);
            dephased_variance(theta, params.sigma, vx, vp)
        })
        .collect()
}

/// Measured variance spectra at several nominal angles on one frequency grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumData {
    pub freqs: Vec<f64>,
    pub angles: Vec<f64>,
    /// `variances[a][k]`: angle `angles[a]`, frequency `freqs[k]`.
    pub variances: Vec<Vec<f64>>,
    pub clearance: Vec<f64>,
}

impl SpectrumData {
    pub fn new(freqs: Vec<f64>, angles: Vec<f64>, variances: Vec<Vec<f64>>, clearance: Option<Vec<f64>>) -> Result<Self> {
        if freqs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::param("freq_grid", "must be strictly increasing"));
        }
        if variances.len() != angles.len() {
            return Err(Error::DimensionMismatch {
                expected: angles.len(),
                found: variances.len(),
            });
        }
        for v in &variances {
            if v.len() != freqs.len() {
                return Err(Error::GridMismatch(format!(
                    "curve has {} points, grid has {}",
                    v.len(),
                    freqs.len()
                )));
            }
            if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(Error::param("variance", "measured variances must be positive"));
            }
        }
        let clearance = clearance.unwrap_or_else(|| vec![1.0; freqs.len()]);
        if clearance.len() != freqs.len() {
            return Err(Error::DimensionMismatch {
                expected: freqs.len(),
                found: clearance.len(),
            });
        }
        if clearance.iter().any(|c| !(*c > 0.0 && *c <= 1.0)) {
            return Err(Error::param("clearance", "values must lie in (0, 1]"));
        }
        Ok(Self {
            freqs,
            angles,
            variances,
            clearance,
        })
    }
}

/// Linear interpolation of a tabulated clearance curve onto `freqs`,
/// clamped to the end values outside the table.
pub fn interpolate_clearance(table_f: &[f64], table_c: &[f64], freqs: &[f64]) -> Result<Vec<f64>> {
    if table_f.is_empty() || table_f.len() != table_c.len() {
        return Err(Error::param("clearance", "table is empty or ragged"));
    }
    if table_f.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::param("clearance", "frequencies must be strictly increasing"));
    }
    Ok(freqs
        .iter()
        .map(|&f| {
            let k = table_f.partition_point(|&x| x <= f);
            if k == 0 {
                table_c[0]
            } else if k == table_f.len() {
                table_c[k - 1]
            } else {
                let t = (f - table_f[k - 1]) / (table_f[k] - table_f[k - 1]);
                table_c[k - 1] + t * (table_c[k] - table_c[k - 1])
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualDomain {
    #[default]
    Linear,
    Db,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub domain: ResidualDomain,
    pub max_iterations: usize,
    /// Starting values of σ tried before keeping the best fit.
    pub sigma_starts: Vec<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            domain: ResidualDomain::Linear,
            max_iterations: 500,
            sigma_starts: [0.0f64, 10.0, 20.0, 30.0].iter().map(|d| d.to_radians()).collect(),
        }
    }
}

/// Default starting point: ε = γ/4, η = 0.5, σ = 10°, true angles nominal.
pub fn default_init(gamma: f64, angles: &[f64]) -> SpectrumModelParams {
    SpectrumModelParams {
        gamma,
        epsilon: gamma / 4.0,
        eta: 0.5,
        sigma: 10f64.to_radians(),
        theta_true: SpectrumModelParams::identity_angles(angles),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleResidual {
    pub nominal_deg: f64,
    pub rms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub params: SpectrumModelParams,
    pub residuals: Vec<AngleResidual>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// A step left the parameter box and was projected back.
    pub projected: bool,
    pub domain: ResidualDomain,
}

fn is_locked(angle: f64) -> bool {
    let a = angle.rem_euclid(PI);
    a.abs() < ANGLE_TOL || (a - PI / 2.0).abs() < ANGLE_TOL || (a - PI).abs() < ANGLE_TOL
}

/// Mapping between the model parameters and the optimizer vector
/// `[ε/γ, η, σ, free angles…]`.
struct Layout<'a> {
    data: &'a SpectrumData,
    gamma: f64,
    free: Vec<usize>,
    domain: ResidualDomain,
}

const EPS_RATIO_MAX: f64 = 1.0 - 1e-9;

impl Layout<'_> {
    fn pack(&self, p: &SpectrumModelParams) -> Result<DVector<f64>> {
        let mut v = vec![p.epsilon / p.gamma, p.eta, p.sigma];
        for &a in &self.free {
            v.push(p.true_angle(self.data.angles[a])?);
        }
        Ok(DVector::from_vec(v))
    }

    fn unpack(&self, v: &DVector<f64>) -> SpectrumModelParams {
        let mut theta_true = SpectrumModelParams::identity_angles(&self.data.angles);
        for (k, &a) in self.free.iter().enumerate() {
            theta_true[a].actual = v[3 + k];
        }
        SpectrumModelParams {
            gamma: self.gamma,
            epsilon: v[0] * self.gamma,
            eta: v[1],
            sigma: v[2],
            theta_true,
        }
    }

    /// Clamp into the parameter box; returns whether anything moved.
    fn project(v: &mut DVector<f64>) -> bool {
        let before = v.clone();
        v[0] = v[0].clamp(0.0, EPS_RATIO_MAX);
        v[1] = v[1].clamp(0.0, 1.0);
        v[2] = v[2].abs();
        *v != before
    }

    fn residuals(&self, v: &DVector<f64>) -> DVector<f64> {
        let p = self.unpack(v);
        let d = self.data;
        let n = d.freqs.len();
        let mut out = DVector::zeros(d.angles.len() * n);
        for (a, meas) in d.variances.iter().enumerate() {
            let theta = p.theta_true[a].actual;
            let model = curve(&p, theta, &d.freqs, Some(&d.clearance));
            for k in 0..n {
                out[a * n + k] = match self.domain {
                    ResidualDomain::Linear => model[k] - meas[k],
                    ResidualDomain::Db => 10.0 * (model[k] / meas[k]).log10(),
                };
            }
        }
        out
    }

    /// Central-difference Jacobian; columns evaluated independently.
    fn jacobian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let cols = par::map_indexed(v.len(), |j| {
            let h = 1e-6 * v[j].abs().max(1e-3);
            let mut plus = v.clone();
            let mut minus = v.clone();
            plus[j] += h;
            minus[j] -= h;
            (self.residuals(&plus) - self.residuals(&minus)) / (2.0 * h)
        });
        DMatrix::from_columns(&cols)
    }
}

struct LmOutcome {
    v: DVector<f64>,
    cost: f64,
    iterations: usize,
    converged: bool,
    projected: bool,
}

fn levenberg_marquardt(layout: &Layout, start: DVector<f64>, max_iterations: usize) -> LmOutcome {
    let mut v = start;
    let mut projected = Layout::project(&mut v);
    let mut r = layout.residuals(&v);
    let mut cost = 0.5 * r.norm_squared();
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iterations && !converged {
        iterations += 1;
        let j = layout.jacobian(&v);
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        loop {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                if lambda > 1e16 {
                    converged = true;
                    break;
                }
                continue;
            };
            let mut trial = &v + &step;
            let moved = Layout::project(&mut trial);
            let rt = layout.residuals(&trial);
            let ct = 0.5 * rt.norm_squared();
            if ct.is_finite() && ct <= cost {
                let decrease = if cost > 0.0 { (cost - ct) / cost } else { 0.0 };
                let dx = (&trial - &v).norm() / (v.norm() + 1e-12);
                projected |= moved;
                v = trial;
                r = rt;
                cost = ct;
                lambda = (lambda / 3.0).max(1e-15);
                if decrease < 1e-10 || dx < 1e-8 {
                    converged = true;
                }
                break;
            }
            lambda *= 2.0;
            // Step below the parameter tolerance without improvement: at a minimum.
            if step.norm() / (v.norm() + 1e-12) < 1e-8 || lambda > 1e16 {
                converged = true;
                break;
            }
        }
    }
    LmOutcome {
        v,
        cost,
        iterations,
        converged,
        projected,
    }
}

/// Fit ε, η, σ and the free true angles to all spectra at once, with γ
/// fixed. The 0° and 90° curves keep their nominal angles.
pub fn joint_fit(data: &SpectrumData, init: &SpectrumModelParams, options: &FitOptions) -> Result<FitReport> {
    init.validate()?;
    if data.angles.len() < 4 {
        return Err(Error::param("angles", format!("{} angles, need at least 4", data.angles.len())));
    }
    let has = |target: f64| data.angles.iter().any(|a| (a - target).abs() < ANGLE_TOL);
    if !has(0.0) || !has(PI / 2.0) {
        return Err(Error::param("angles", "data must include 0° and 90°"));
    }
    if data.freqs.len() < 20 {
        return Err(Error::param(
            "freq_grid",
            format!("{} points per angle, need at least 20", data.freqs.len()),
        ));
    }
    if options.max_iterations == 0 {
        return Err(Error::param("max_iterations", "must be at least 1"));
    }
    let free: Vec<usize> = (0..data.angles.len()).filter(|&a| !is_locked(data.angles[a])).collect();
    let layout = Layout {
        data,
        gamma: init.gamma,
        free,
        domain: options.domain,
    };
    let base = layout.pack(init)?;
    let starts: Vec<DVector<f64>> = if options.sigma_starts.is_empty() {
        vec![base.clone()]
    } else {
        options
            .sigma_starts
            .iter()
            .map(|&s| {
                let mut v = base.clone();
                v[2] = s;
                v
            })
            .collect()
    };
    let mut best: Option<LmOutcome> = None;
    for s in starts {
        let out = levenberg_marquardt(&layout, s, options.max_iterations);
        if best.as_ref().is_none_or(|b| out.cost < b.cost) {
            best = Some(out);
        }
    }
    let best = best.expect("at least one start");
    let mut params = layout.unpack(&best.v);
    for m in &mut params.theta_true {
        m.actual = m.actual.rem_euclid(PI);
    }
    let r = layout.residuals(&best.v);
    let n = data.freqs.len();
    let residuals = data
        .angles
        .iter()
        .enumerate()
        .map(|(a, &ang)| AngleResidual {
            nominal_deg: ang.to_degrees(),
            rms: (r.rows(a * n, n).norm_squared() / n as f64).sqrt(),
        })
        .collect();
    Ok(FitReport {
        params,
        residuals,
        cost: best.cost,
        iterations: best.iterations,
        converged: best.converged,
        projected: best.projected,
        domain: options.domain,
    })
}

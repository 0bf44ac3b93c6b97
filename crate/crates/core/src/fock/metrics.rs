use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::states::cat_state_with_deficit;
use super::{hermitize, ln_factorials, DensityMatrix, Parity, C64};
use crate::error::{Error, Result};
use crate::par;

/// `⟨ψ|ρ|ψ⟩` for a pure reference state of the same dimension.
pub fn fidelity(rho: &DensityMatrix, psi: &DVector<C64>) -> Result<f64> {
    if psi.len() != rho.dim() {
        return Err(Error::DimensionMismatch {
            expected: rho.dim(),
            found: psi.len(),
        });
    }
    Ok(overlap(rho.matrix(), psi.as_slice()))
}

/// `⟨ψ|ρ|ψ⟩` using only the leading `rho.dim()` amplitudes of `psi`.
fn overlap(rho: &DMatrix<C64>, psi: &[C64]) -> f64 {
    let d = rho.nrows().min(psi.len());
    let mut acc = C64::new(0.0, 0.0);
    for m in 0..d {
        let mut row = C64::new(0.0, 0.0);
        for n in 0..d {
            row += rho[(m, n)] * psi[n];
        }
        acc += psi[m].conj() * row;
    }
    acc.re
}

/// Uhlmann fidelity `(tr √(√ρ σ √ρ))²` between two mixed states. States of
/// different cutoff are compared after zero-padding the smaller one.
pub fn state_fidelity(rho: &DensityMatrix, sigma: &DensityMatrix) -> f64 {
    let nmax = rho.nmax().max(sigma.nmax());
    let a = rho.embed(nmax).into_matrix();
    let b = sigma.embed(nmax).into_matrix();
    let eig = a.symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let sqrt_a = v * DMatrix::from_diagonal(&sqrt_vals.map(|x| C64::new(x, 0.0))) * v.adjoint();
    let inner = hermitize(&sqrt_a * b * &sqrt_a);
    let tr: f64 = inner
        .symmetric_eigenvalues()
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    (tr * tr).min(1.0)
}

/// Wigner function at `(x, p)`, normalized so `∫ W dx dp = 1`.
pub fn wigner(rho: &DensityMatrix, x: f64, p: f64) -> f64 {
    WignerKernel::new(rho.nmax()).eval(rho.matrix(), x, p)
}

/// `W(0,0) = (1/π) Σ (−1)ⁿ ρ_nn`.
pub fn wigner_origin(rho: &DensityMatrix) -> f64 {
    let s: f64 = rho
        .populations()
        .iter()
        .enumerate()
        .map(|(n, p)| if n % 2 == 0 { *p } else { -*p })
        .sum();
    s / PI
}

/// Wigner values on the tensor grid `xs × ps`, row-major in `x`.
pub fn wigner_grid(rho: &DensityMatrix, xs: &[f64], ps: &[f64]) -> Vec<Vec<f64>> {
    let kernel = WignerKernel::new(rho.nmax());
    let m = rho.matrix();
    par::map_slice(xs, |&x| ps.iter().map(|&p| kernel.eval(m, x, p)).collect())
}

struct WignerKernel {
    nmax: usize,
    ln_fact: Vec<f64>,
}

impl WignerKernel {
    fn new(nmax: usize) -> Self {
        Self {
            nmax,
            ln_fact: ln_factorials(2 * nmax + 1),
        }
    }

    // W = (1/π) e^{−r²} [ Σ_n ρ_nn (−1)ⁿ L_n(2r²)
    //     + 2 Re Σ_{d>0} Σ_n ρ_{n+d,n} (−1)ⁿ √(n!/(n+d)!) (√2 (x − ip))^d L_n^{(d)}(2r²) ]
    fn eval(&self, m: &DMatrix<C64>, x: f64, p: f64) -> f64 {
        let r2 = x * x + p * p;
        let z = 2.0 * r2;
        let phase = C64::new(x, -p);
        let arg = if r2 > 0.0 { phase.arg() } else { 0.0 };
        let mut lag = vec![0.0; self.nmax + 1];
        let mut total = 0.0;
        for d in 0..=self.nmax {
            let count = self.nmax - d + 1;
            laguerre_column(d as f64, z, &mut lag[..count]);
            let mut acc = C64::new(0.0, 0.0);
            for n in 0..count {
                let ln_mag = if d == 0 {
                    -r2
                } else if r2 == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    0.5 * (self.ln_fact[n] - self.ln_fact[n + d]) + 0.5 * d as f64 * z.ln() - r2
                };
                let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
                acc += m[(n + d, n)] * (sign * ln_mag.exp() * lag[n]);
            }
            if d == 0 {
                total += acc.re;
            } else {
                let rot = C64::from_polar(1.0, d as f64 * arg);
                total += 2.0 * (acc * rot).re;
            }
        }
        total / PI
    }
}

/// Generalized Laguerre `L_n^{(a)}(z)` for `n = 0..out.len()`.
fn laguerre_column(a: f64, z: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = 1.0 + a - z;
    }
    for k in 1..out.len().saturating_sub(1) {
        let kf = k as f64;
        out[k + 1] = ((2.0 * kf + 1.0 + a - z) * out[k] - (kf + a) * out[k - 1]) / (kf + 1.0);
    }
}

/// Best-matching cat amplitude and its fidelity. The cat is
/// `|αe^{iφ}⟩ ± |−αe^{iφ}⟩` with `φ` the orientation of the state's
/// elongation axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatFit {
    pub alpha: f64,
    pub phase: f64,
    pub fidelity: f64,
}

pub const DEFAULT_ALPHA_RANGE: (f64, f64) = (0.01, 2.0);
pub const DEFAULT_ALPHA_STEP: f64 = 0.01;
const GOLDEN_TOL: f64 = 1e-4;

/// Scan cat amplitudes over the default range `[0.01, 2.0]` in steps of 0.01
/// and refine the best point.
pub fn best_cat_fidelity(rho: &DensityMatrix, parity: Parity) -> Result<CatFit> {
    best_cat_fidelity_with(
        rho,
        parity,
        DEFAULT_ALPHA_RANGE.0,
        DEFAULT_ALPHA_RANGE.1,
        DEFAULT_ALPHA_STEP,
    )
}

/// Grid scan over `[lo, hi]` followed by a golden-section refinement in the
/// two cells around the best grid point.
///
/// Cat states are generated on whatever cutoff keeps their norm deficit
/// below 1e-8 and projected onto the support of `rho` without renormalizing.
/// They are rotated to `φ = arg⟨a²⟩/2`, the axis along which `rho` is
/// stretched; a real-amplitude cat has `⟨a²⟩ = α² > 0`.
pub fn best_cat_fidelity_with(
    rho: &DensityMatrix,
    parity: Parity,
    lo: f64,
    hi: f64,
    step: f64,
) -> Result<CatFit> {
    if !(step > 0.0) {
        return Err(Error::param("alpha_step", "must be positive"));
    }
    if !(hi >= lo) || lo < 0.0 {
        return Err(Error::param("alpha_range", format!("[{lo}, {hi}] is empty")));
    }
    let mut cutoff = rho.nmax().max(20);
    while cat_state_with_deficit(hi, parity, cutoff).is_err() {
        cutoff += 10;
        if cutoff > 2000 {
            return Err(Error::param("alpha_range", "amplitude too large to represent"));
        }
    }
    let m = rho.matrix();
    let phase = elongation_axis(m);
    let turn: Vec<C64> = (0..=cutoff).map(|n| C64::from_polar(1.0, n as f64 * phase)).collect();
    let score = |alpha: f64| -> Result<f64> {
        let mut psi = cat_state_with_deficit(alpha, parity, cutoff)?.state;
        for (c, t) in psi.iter_mut().zip(&turn) {
            *c *= t;
        }
        Ok(overlap(m, psi.as_slice()))
    };

    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    let scores = par::map_indexed(count, |i| score((lo + i as f64 * step).min(hi)));
    let mut best = CatFit {
        alpha: lo,
        phase,
        fidelity: f64::NEG_INFINITY,
    };
    for (i, s) in scores.into_iter().enumerate() {
        let s = s?;
        if s > best.fidelity {
            best = CatFit {
                alpha: (lo + i as f64 * step).min(hi),
                phase,
                fidelity: s,
            };
        }
    }

    let mut a = (best.alpha - step).max(lo);
    let mut b = (best.alpha + step).min(hi);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = score(c)?;
    let mut fd = score(d)?;
    while b - a > GOLDEN_TOL {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = score(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = score(d)?;
        }
    }
    let mid = 0.5 * (a + b);
    let fm = score(mid)?;
    if fm > best.fidelity {
        best = CatFit {
            alpha: mid,
            phase,
            fidelity: fm,
        };
    }
    Ok(best)
}

/// `arg⟨a²⟩ / 2`, or 0 when `⟨a²⟩` vanishes.
fn elongation_axis(rho: &DMatrix<C64>) -> f64 {
    let mut a2 = C64::new(0.0, 0.0);
    for m in 2..rho.nrows() {
        a2 += rho[(m - 2, m)] * ((m * (m - 1)) as f64).sqrt();
    }
    if a2.norm() < 1e-12 {
        0.0
    } else {
        0.5 * a2.arg()
    }
}

use nalgebra::DMatrix;

use super::{ln_factorials, DensityMatrix, C64};
use crate::error::{Error, Result};

/// Heralded single-photon subtraction `a ρ a† / tr(a ρ a†)`.
///
/// The top Fock level cannot be reached by `a`, so the output has cutoff
/// `nmax − 1`. The second value is the unnormalized weight `tr(a ρ a†) = ⟨n⟩`.
pub fn photon_subtract(rho: &DensityMatrix) -> Result<(DensityMatrix, f64)> {
    let nmax = rho.nmax();
    if nmax == 0 {
        return Err(Error::Unphysical("cannot subtract from a vacuum-only basis".into()));
    }
    let weight = rho.mean_photon_number();
    if !(weight > 1e-300) {
        return Err(Error::Unphysical("photon subtraction from vacuum (zero weight)".into()));
    }
    let m = rho.matrix();
    let out = DMatrix::from_fn(nmax, nmax, |i, j| {
        m[(i + 1, j + 1)] * (((i + 1) * (j + 1)) as f64).sqrt() / weight
    });
    Ok((DensityMatrix::from_matrix_unchecked(out), weight))
}

/// Amplitude `√(C(n,k) η^(n−k) (1−η)^k)` of the Kraus operator `A_k` on `|n⟩`.
fn kraus_table(dim: usize, eta: f64) -> DMatrix<f64> {
    let lnf = ln_factorials(dim);
    DMatrix::from_fn(dim, dim, |n, k| {
        if k > n {
            return 0.0;
        }
        let binom = (lnf[n] - lnf[k] - lnf[n - k]).exp();
        (binom * eta.powi((n - k) as i32) * (1.0 - eta).powi(k as i32)).sqrt()
    })
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::param("eta", format!("transmissivity {eta} not in [0, 1]")));
    }
    Ok(())
}

/// Pure-loss channel of transmissivity `eta`.
pub fn loss_channel(rho: &DensityMatrix, eta: f64) -> Result<DensityMatrix> {
    check_eta(eta)?;
    let d = rho.dim();
    let c = kraus_table(d, eta);
    let m = rho.matrix();
    let out = DMatrix::from_fn(d, d, |i, j| {
        let mut acc = C64::new(0.0, 0.0);
        let top = d - i.max(j);
        for k in 0..top {
            acc += m[(i + k, j + k)] * (c[(i + k, k)] * c[(j + k, k)]);
        }
        acc
    });
    Ok(DensityMatrix::from_matrix_unchecked(out))
}

/// Heisenberg-picture loss `Σ_k A_k† Π A_k`, used to fold detection
/// inefficiency into measurement operators. Exact on the truncated basis.
pub fn adjoint_loss_channel(op: &DMatrix<C64>, eta: f64) -> Result<DMatrix<C64>> {
    check_eta(eta)?;
    let d = op.nrows();
    let c = kraus_table(d, eta);
    Ok(DMatrix::from_fn(d, d, |a, b| {
        let mut acc = C64::new(0.0, 0.0);
        for k in 0..=a.min(b) {
            acc += op[(a - k, b - k)] * (c[(a, k)] * c[(b, k)]);
        }
        acc
    }))
}

/// Gaussian phase diffusion: `ρ_mn ← ρ_mn exp(−σ²(m−n)²/2)`.
pub fn phase_diffusion(rho: &DensityMatrix, sigma: f64) -> Result<DensityMatrix> {
    if !(sigma >= 0.0) {
        return Err(Error::param("sigma", format!("{sigma} must be ≥ 0")));
    }
    let m = rho.matrix();
    let d = rho.dim();
    let s2 = sigma * sigma;
    let out = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            m[(i, j)]
        } else {
            let k = i as f64 - j as f64;
            m[(i, j)] * (-0.5 * s2 * k * k).exp()
        }
    });
    Ok(DensityMatrix::from_matrix_unchecked(out))
}

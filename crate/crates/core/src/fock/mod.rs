//! Truncated Fock-basis states, channels, and state metrics.

mod channels;
mod metrics;
mod states;

pub use channels::{adjoint_loss_channel, loss_channel, phase_diffusion, photon_subtract};
pub use metrics::{
    best_cat_fidelity, best_cat_fidelity_with, fidelity, state_fidelity, wigner, wigner_grid,
    wigner_origin, CatFit,
};
pub use states::{
    cat_state, db_from_variance, gaussian_state, variance_from_db, GaussianStateSpec, Parity,
    Truncated,
};

use nalgebra::{DMatrix, DVector};
pub use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hermiticity tolerance accepted when loading or constructing states.
pub const HERMITIAN_TOL: f64 = 1e-9;

/// Density matrix on the Fock basis `|0⟩ … |nmax⟩`.
///
/// Serializes as `{ "nmax": int, "re": [[float]], "im": [[float]] }`,
/// row-major; Hermiticity is checked when deserializing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DensityJson", into = "DensityJson")]
pub struct DensityMatrix {
    data: DMatrix<C64>,
}

#[derive(Serialize, Deserialize)]
struct DensityJson {
    nmax: usize,
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

impl From<DensityMatrix> for DensityJson {
    fn from(rho: DensityMatrix) -> Self {
        let d = rho.dim();
        let m = &rho.data;
        Self {
            nmax: d - 1,
            re: (0..d).map(|i| (0..d).map(|j| m[(i, j)].re).collect()).collect(),
            im: (0..d).map(|i| (0..d).map(|j| m[(i, j)].im).collect()).collect(),
        }
    }
}

impl TryFrom<DensityJson> for DensityMatrix {
    type Error = Error;

    fn try_from(j: DensityJson) -> Result<Self> {
        let d = j.nmax + 1;
        for rows in [&j.re, &j.im] {
            if rows.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: rows.len(),
                });
            }
            if let Some(bad) = rows.iter().find(|r| r.len() != d) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: bad.len(),
                });
            }
        }
        Self::from_matrix(DMatrix::from_fn(d, d, |r, c| C64::new(j.re[r][c], j.im[r][c])))
    }
}

impl DensityMatrix {
    /// Wrap a square matrix after checking shape and Hermiticity. The matrix
    /// is symmetrized to remove rounding-level anti-Hermitian parts.
    pub fn from_matrix(data: DMatrix<C64>) -> Result<Self> {
        if data.nrows() != data.ncols() {
            return Err(Error::DimensionMismatch {
                expected: data.nrows(),
                found: data.ncols(),
            });
        }
        if data.nrows() == 0 {
            return Err(Error::Empty("density matrix".into()));
        }
        let err = hermiticity_error(&data);
        if !(err <= HERMITIAN_TOL) {
            return Err(Error::Unphysical(format!(
                "matrix is not Hermitian (max |ρ_mn − ρ_nm*| = {err:.3e})"
            )));
        }
        Ok(Self::from_matrix_unchecked(hermitize(data)))
    }

    pub(crate) fn from_matrix_unchecked(data: DMatrix<C64>) -> Self {
        Self { data }
    }

    pub fn vacuum(nmax: usize) -> Self {
        Self::fock(0, nmax)
    }

    /// Number state `|n⟩⟨n|`.
    pub fn fock(n: usize, nmax: usize) -> Self {
        assert!(n <= nmax, "photon number {n} above cutoff {nmax}");
        let mut data = DMatrix::zeros(nmax + 1, nmax + 1);
        data[(n, n)] = C64::new(1.0, 0.0);
        Self { data }
    }

    pub fn maximally_mixed(nmax: usize) -> Self {
        let d = nmax + 1;
        Self {
            data: DMatrix::from_diagonal_element(d, d, C64::new(1.0 / d as f64, 0.0)),
        }
    }

    /// `|ψ⟩⟨ψ|` for a normalized vector.
    pub fn from_pure(psi: &DVector<C64>) -> Self {
        Self {
            data: psi * psi.adjoint(),
        }
    }

    /// Diagonal (incoherent) state with the given photon-number populations.
    pub fn from_populations(pops: &[f64]) -> Self {
        let d = pops.len();
        let mut data = DMatrix::zeros(d, d);
        for (n, &p) in pops.iter().enumerate() {
            data[(n, n)] = C64::new(p, 0.0);
        }
        Self { data }
    }

    pub fn nmax(&self) -> usize {
        self.data.nrows() - 1
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.data
    }

    pub fn get(&self, m: usize, n: usize) -> C64 {
        self.data[(m, n)]
    }

    pub fn trace(&self) -> C64 {
        self.data.trace()
    }

    pub fn hermiticity_error(&self) -> f64 {
        hermiticity_error(&self.data)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let eig = self.data.clone().symmetric_eigenvalues();
        let mut v: Vec<f64> = eig.iter().copied().collect();
        v.sort_by(|a, b| a.total_cmp(b));
        v
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    pub fn purity(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Photon-number distribution `ρ_nn`.
    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|n| self.data[(n, n)].re).collect()
    }

    pub fn mean_photon_number(&self) -> f64 {
        self.populations()
            .iter()
            .enumerate()
            .map(|(n, p)| n as f64 * p)
            .sum()
    }

    /// Divide by the trace.
    pub fn normalized(mut self) -> Result<Self> {
        let tr = self.trace().re;
        if !(tr > 0.0) {
            return Err(Error::Unphysical(format!("trace {tr} is not positive")));
        }
        self.data /= C64::new(tr, 0.0);
        Ok(self)
    }

    /// Zero-pad to a larger cutoff. Exact.
    pub fn embed(&self, nmax: usize) -> Self {
        assert!(nmax >= self.nmax(), "embed target below current cutoff");
        let d = self.dim();
        let mut data = DMatrix::zeros(nmax + 1, nmax + 1);
        data.view_mut((0, 0), (d, d)).copy_from(&self.data);
        Self { data }
    }

    /// Restrict to a smaller cutoff and renormalize; returns the discarded
    /// trace.
    pub fn truncate(&self, nmax: usize) -> Result<Truncated<Self>> {
        if nmax >= self.nmax() {
            return Ok(Truncated {
                state: self.embed(nmax),
                deficit: 0.0,
            });
        }
        let sub = self.data.view((0, 0), (nmax + 1, nmax + 1)).into_owned();
        let deficit = self.trace().re - sub.trace().re;
        Ok(Truncated {
            state: Self { data: sub }.normalized()?,
            deficit,
        })
    }

    /// Convex combination `w·self + (1−w)·other`, both at the same cutoff.
    pub fn mix(&self, other: &Self, weight: f64) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::param("weight", format!("{weight} not in [0, 1]")));
        }
        Ok(Self {
            data: &self.data * C64::new(weight, 0.0) + &other.data * C64::new(1.0 - weight, 0.0),
        })
    }

    /// Check Hermiticity, unit trace and positivity at the given tolerances.
    pub fn check_physical(&self, trace_tol: f64, psd_tol: f64) -> Result<()> {
        let herm = self.hermiticity_error();
        if herm > 1e-12 {
            return Err(Error::Unphysical(format!("hermiticity error {herm:.3e}")));
        }
        let tr = self.trace();
        if (tr.re - 1.0).abs() > trace_tol || tr.im.abs() > trace_tol {
            return Err(Error::Unphysical(format!("trace {tr}")));
        }
        let min = self.min_eigenvalue();
        if min < -psd_tol {
            return Err(Error::Unphysical(format!("negative eigenvalue {min:.3e}")));
        }
        Ok(())
    }
}

fn hermiticity_error(m: &DMatrix<C64>) -> f64 {
    let d = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..d {
        for j in i..d {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

pub(crate) fn hermitize(m: DMatrix<C64>) -> DMatrix<C64> {
    let adj = m.adjoint();
    (m + adj) * C64::new(0.5, 0.0)
}

/// `ln n!` for `n = 0..=n_max`.
pub(crate) fn ln_factorials(n_max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_max + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=n_max {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

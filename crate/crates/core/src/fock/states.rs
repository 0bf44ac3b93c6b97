use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{DensityMatrix, C64};
use crate::error::{Error, Result};

/// Largest trace deficit tolerated when a state is cut to its Fock cutoff.
pub const TRUNCATION_LIMIT: f64 = 1e-6;
/// Largest norm deficit tolerated for truncated cat states.
pub const CAT_TRUNCATION_LIMIT: f64 = 1e-8;

/// A value together with the probability mass lost when truncating it.
#[derive(Clone, Debug, PartialEq)]
pub struct Truncated<T> {
    pub state: T,
    pub deficit: f64,
}

/// Quadrature variance (shot-noise units, vacuum = 1/2) of a level given in
/// dB relative to shot noise.
pub fn variance_from_db(db: f64) -> f64 {
    0.5 * 10f64.powf(db / 10.0)
}

pub fn db_from_variance(variance: f64) -> f64 {
    10.0 * (variance / 0.5).log10()
}

/// Zero-mean Gaussian state given by its principal quadrature variances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStateSpec {
    /// Squeezed (x) quadrature variance.
    pub v_x: f64,
    /// Anti-squeezed (p) quadrature variance.
    pub v_p: f64,
}

impl GaussianStateSpec {
    pub fn new(v_x: f64, v_p: f64) -> Result<Self> {
        let spec = Self { v_x, v_p };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_db(x_db: f64, p_db: f64) -> Result<Self> {
        Self::new(variance_from_db(x_db), variance_from_db(p_db))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_x > 0.0 && self.v_p > 0.0) {
            return Err(Error::param(
                "variance",
                format!("v_x = {}, v_p = {} must be positive", self.v_x, self.v_p),
            ));
        }
        if self.v_x * self.v_p < 0.25 - 1e-12 {
            return Err(Error::Unphysical(format!(
                "v_x·v_p = {:.6} violates the uncertainty bound 1/4",
                self.v_x * self.v_p
            )));
        }
        Ok(())
    }

    /// The pure state with the same squeezing ratio: both variances divided
    /// by `√(4 v_x v_p)`.
    pub fn purified(&self) -> Self {
        let g = (4.0 * self.v_x * self.v_p).sqrt();
        Self {
            v_x: self.v_x / g,
            v_p: self.v_p / g,
        }
    }

    /// Mean thermal photon number and squeezing parameter of the
    /// thermal-then-squeeze decomposition.
    pub fn thermal_squeeze(&self) -> (f64, f64) {
        let nbar = ((self.v_x * self.v_p).sqrt() - 0.5).max(0.0);
        let r = 0.25 * (self.v_p / self.v_x).ln();
        (nbar, r)
    }
}

/// Squeezed thermal state `S(r) ρ_th(n̄) S(r)†` on the cutoff `nmax`.
///
/// The squeeze is applied in a padded basis and the result cut back to
/// `nmax`; the discarded trace is reported and must stay below
/// [`TRUNCATION_LIMIT`].
pub fn gaussian_state(spec: GaussianStateSpec, nmax: usize) -> Result<Truncated<DensityMatrix>> {
    spec.validate()?;
    let (nbar, r) = spec.thermal_squeeze();
    let work = nmax + 1 + (nmax + 1).max(40);

    let thermal: Vec<f64> = if nbar == 0.0 {
        (0..work).map(|k| if k == 0 { 1.0 } else { 0.0 }).collect()
    } else {
        let q = nbar / (nbar + 1.0);
        let mut p: Vec<f64> = (0..work).map(|k| q.powi(k as i32) / (nbar + 1.0)).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= s);
        p
    };

    // a² − a†² in the padded basis; real and antisymmetric.
    let mut a2 = DMatrix::<f64>::zeros(work, work);
    for n in 2..work {
        a2[(n - 2, n)] = ((n * (n - 1)) as f64).sqrt();
    }
    let generator = (&a2 - a2.transpose()) * (0.5 * r);
    let squeeze = generator.exp();

    let scaled = DMatrix::from_fn(work, work, |i, j| squeeze[(i, j)] * thermal[j]);
    let big = &scaled * squeeze.transpose();

    let d = nmax + 1;
    let cut = DMatrix::from_fn(d, d, |i, j| C64::new(0.5 * (big[(i, j)] + big[(j, i)]), 0.0));
    let deficit = 1.0 - cut.trace().re;
    if deficit > TRUNCATION_LIMIT {
        return Err(Error::Truncation {
            deficit,
            limit: TRUNCATION_LIMIT,
        });
    }
    let state = DensityMatrix::from_matrix_unchecked(cut).normalized()?;
    Ok(Truncated { state, deficit })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Even,
    Odd,
}

/// Normalized cat state `|α⟩ ± |−α⟩` on `|0⟩ … |nmax⟩`.
///
/// The odd cat at `α = 0` is the normalized limit `|1⟩`.
pub fn cat_state(alpha: f64, parity: Parity, nmax: usize) -> Result<DVector<C64>> {
    cat_state_with_deficit(alpha, parity, nmax).map(|t| t.state)
}

pub(crate) fn cat_state_with_deficit(
    alpha: f64,
    parity: Parity,
    nmax: usize,
) -> Result<Truncated<DVector<C64>>> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::param("alpha", format!("{alpha} must be ≥ 0")));
    }
    let start = match parity {
        Parity::Even => 0,
        Parity::Odd => 1,
    };
    if nmax < start {
        return Err(Error::param("nmax", "cutoff below the first populated level"));
    }
    let a2 = alpha * alpha;
    // c_n ∝ αⁿ/√n!, built by the two-step ratio so tiny α never underflows.
    let mut coeffs = vec![0.0; nmax + 1];
    let mut c = 1.0;
    let mut n = start;
    let mut kept = 0.0;
    while n <= nmax {
        coeffs[n] = c;
        kept += c * c;
        c *= a2 / (((n + 1) * (n + 2)) as f64).sqrt();
        n += 2;
    }
    let mut tail = 0.0;
    while c * c > 1e-300 && n < nmax + 10_000 {
        let term = c * c;
        tail += term;
        if term < 1e-20 * (kept + tail) {
            break;
        }
        c *= a2 / (((n + 1) * (n + 2)) as f64).sqrt();
        n += 2;
    }
    let deficit = tail / (kept + tail);
    if deficit > CAT_TRUNCATION_LIMIT {
        return Err(Error::Truncation {
            deficit,
            limit: CAT_TRUNCATION_LIMIT,
        });
    }
    let norm = kept.sqrt();
    Ok(Truncated {
        state: DVector::from_iterator(nmax + 1, coeffs.iter().map(|&x| C64::new(x / norm, 0.0))),
        deficit,
    })
}

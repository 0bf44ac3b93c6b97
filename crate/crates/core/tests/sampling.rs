//! Statistical checks of homodyne sampling against closed-form marginals.

use std::f64::consts::PI;

use kitten_core::fock::{gaussian_state, photon_subtract, DensityMatrix, GaussianStateSpec};
use kitten_core::quadrature::{marginal_pdf, sample_quadratures, sample_with_phase_noise};
use kitten_core::spectrum::dephased_variance;

fn squeezed() -> DensityMatrix {
    gaussian_state(GaussianStateSpec::from_db(-2.0, 2.4).unwrap(), 20)
        .unwrap()
        .state
}

fn values(rho: &DensityMatrix, theta: f64, n: usize, seed: u64) -> Vec<f64> {
    sample_quadratures(rho, theta, n, seed)
        .unwrap()
        .into_iter()
        .map(|s| s.value)
        .collect()
}

fn moments(x: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    // Standard error of the sample variance.
    let se = ((m4 - var * var) / n).sqrt();
    (mean, var, se)
}

/// Kolmogorov–Smirnov distance of `x` against the CDF obtained by Simpson
/// integration of `pdf` on a fine grid.
fn ks_distance(mut x: Vec<f64>, pdf: impl Fn(f64) -> f64) -> f64 {
    let (lo, h, n) = (-10.0, 1e-3, 20_000);
    let mut cdf = vec![0.0; n + 1];
    for i in 0..n {
        let a = lo + i as f64 * h;
        cdf[i + 1] = cdf[i] + h / 6.0 * (pdf(a) + 4.0 * pdf(a + 0.5 * h) + pdf(a + h));
    }
    let at = |v: f64| {
        let t = ((v - lo) / h).clamp(0.0, n as f64 - 1e-9);
        let i = t as usize;
        cdf[i] + (t - i as f64) * (cdf[i + 1] - cdf[i])
    };
    x.sort_by(f64::total_cmp);
    let m = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = at(v);
            (f - i as f64 / m).abs().max((f - (i + 1) as f64 / m).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn vacuum_variance() {
    let (mean, var, _) = moments(&values(&DensityMatrix::vacuum(4), 0.7, 1_000_000, 11));
    assert!(mean.abs() < 0.003, "{mean}");
    assert!((var - 0.5).abs() < 0.002, "{var}");
}

#[test]
fn antisqueezed_variance() {
    let (_, var, _) = moments(&values(&squeezed(), PI / 2.0, 1_000_000, 12));
    assert!((var - 0.869).abs() < 0.004, "{var}");
}

#[test]
fn gaussian_marginal_ks() {
    let theta = 0.4f64;
    let v = 0.315479 * theta.cos().powi(2) + 0.868900 * theta.sin().powi(2);
    let x = values(&squeezed(), theta, 100_000, 13);
    let d = ks_distance(x, |q| (-q * q / (2.0 * v)).exp() / (2.0 * PI * v).sqrt());
    assert!(d < 0.01, "{d}");
}

#[test]
fn kitten_marginal_ks() {
    let rho = photon_subtract(&squeezed()).unwrap().0;
    let theta = 1.1;
    let x = values(&rho, theta, 100_000, 14);
    let d = ks_distance(x, |q| marginal_pdf(&rho, theta, q));
    assert!(d < 0.01, "{d}");
}

#[test]
fn phase_noise_variance_law() {
    let rho = squeezed();
    let (vx, vp) = (0.315479, 0.868900);
    for (k, sigma_deg) in [0.0f64, 10.0, 19.4, 40.0].into_iter().enumerate() {
        for theta_deg in [0.0f64, 30.0, 90.0] {
            let (t, s) = (theta_deg.to_radians(), sigma_deg.to_radians());
            let x: Vec<f64> = sample_with_phase_noise(&rho, t, s, 200_000, 100 + k as u64)
                .unwrap()
                .into_iter()
                .map(|q| q.value)
                .collect();
            let (_, var, se) = moments(&x);
            let want = dephased_variance(t, s, vx, vp);
            assert!((var - want).abs() < 3.0 * se, "θ={theta_deg} σ={sigma_deg}: {var} vs {want} ± {se}");
        }
    }
}

#[test]
fn large_phase_noise_averages_quadratures() {
    let x: Vec<f64> = sample_with_phase_noise(&squeezed(), 0.0, 3.0, 200_000, 21)
        .unwrap()
        .into_iter()
        .map(|q| q.value)
        .collect();
    let (_, var, se) = moments(&x);
    let want = 0.5 * (0.315479 + 0.868900);
    assert!((var - want).abs() < 3.0 * se, "{var} vs {want} ± {se}");
}

use std::f64::consts::PI;

use kitten_core::fock::{
    gaussian_state, loss_channel, photon_subtract, state_fidelity, wigner_origin, DensityMatrix,
    GaussianStateSpec,
};
use kitten_core::quadrature::{sample_quadratures, QuadratureDataset};
use kitten_core::spectrum::AngleMap;
use kitten_core::tomography::{
    bootstrap_metric, mle_reconstruct, reconstruct_with_angles, uniform_edges, ReconstructionConfig,
};

const NOMINAL_DEG: [f64; 6] = [0.0, 30.0, 60.0, 90.0, 120.0, 150.0];

fn kitten_pre_loss() -> DensityMatrix {
    let sq = gaussian_state(GaussianStateSpec::from_db(-2.0, 2.4).unwrap(), 20)
        .unwrap()
        .state;
    photon_subtract(&sq).unwrap().0
}

fn sample(rho: &DensityMatrix, true_deg: &[f64], per_angle: usize, seed: u64) -> QuadratureDataset {
    let mut samples = Vec::new();
    for (a, (&nom, &tru)) in NOMINAL_DEG.iter().zip(true_deg).enumerate() {
        let mut s = sample_quadratures(rho, tru.to_radians(), per_angle, seed + a as u64).unwrap();
        for q in &mut s {
            q.angle = nom.to_radians();
        }
        samples.extend(s);
    }
    QuadratureDataset::new(samples, 1.0).unwrap()
}

/// Fidelity of a single 30000-sample reconstruction fluctuates by a few
/// 1e-3 between datasets, so the bound is checked on the median of five.
#[test]
fn vacuum_round_trip_fidelity() {
    let mut f: Vec<f64> = [100u64, 1000, 2000, 3000, 4000]
        .iter()
        .map(|&seed| {
            let ds = sample(&DensityMatrix::vacuum(4), &NOMINAL_DEG, 5000, seed);
            let res = mle_reconstruct(&ds, &ReconstructionConfig::default()).unwrap();
            state_fidelity(&res.rho, &DensityMatrix::vacuum(12))
        })
        .collect();
    f.sort_by(f64::total_cmp);
    eprintln!("vacuum fidelities {f:?}");
    assert!(f[2] >= 0.995, "{f:?}");
}

#[test]
fn lossy_kitten_round_trip() {
    let pre = kitten_pre_loss();
    let lossy = loss_channel(&pre, 0.88).unwrap();
    let ds = sample(&lossy, &NOMINAL_DEG, 5000, 200);

    let plain = mle_reconstruct(&ds, &ReconstructionConfig::default()).unwrap();
    let f = state_fidelity(&plain.rho, &lossy);
    let dw = (plain.metrics.w00 - wigner_origin(&lossy)).abs();
    eprintln!("eta=1: F={f:.4} dW={dw:.4} iters={} conv={}", plain.iterations, plain.converged);
    assert!(f >= 0.98, "{f}");
    assert!(dw <= 0.01, "{dw}");
    for w in plain.loglik_history.windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
    }

    let cfg = ReconstructionConfig {
        eta_correction: 0.88,
        ..Default::default()
    };
    let corrected = mle_reconstruct(&ds, &cfg).unwrap();
    let fc = state_fidelity(&corrected.rho, &pre);
    eprintln!("eta=0.88: F={fc:.4} W={:.4} iters={}", corrected.metrics.w00, corrected.iterations);
    assert!(fc >= 0.97, "{fc}");
    assert!(corrected.metrics.w00 < plain.metrics.w00);

    // Loss commutes with the correction.
    let relossed = loss_channel(&corrected.rho, 0.88).unwrap();
    let fr = state_fidelity(&plain.rho, &relossed);
    assert!(fr >= 0.99, "{fr}");
}

#[test]
fn binning_width_bias_is_small() {
    let lossy = loss_channel(&kitten_pre_loss(), 0.88).unwrap();
    let ds = sample(&lossy, &NOMINAL_DEG, 5000, 300);
    let coarse = mle_reconstruct(&ds, &ReconstructionConfig::default()).unwrap();
    let fine = mle_reconstruct(
        &ds,
        &ReconstructionConfig {
            bin_edges: uniform_edges(-6.0, 6.0, 0.05),
            ..Default::default()
        },
    )
    .unwrap();
    let d = (coarse.metrics.w00 - fine.metrics.w00).abs();
    assert!(d < 0.002, "{d}");
}

#[test]
fn true_angles_raise_likelihood() {
    let true_deg = [0.0, 33.5, 65.6, 90.0, 133.1, 163.3];
    let lossy = loss_channel(&kitten_pre_loss(), 0.88).unwrap();
    let ds = sample(&lossy, &true_deg, 5000, 400);
    let cfg = ReconstructionConfig::default();
    let nominal = mle_reconstruct(&ds, &cfg).unwrap();
    let map: Vec<AngleMap> = NOMINAL_DEG
        .iter()
        .zip(true_deg)
        .map(|(n, t)| AngleMap {
            nominal: n.to_radians(),
            actual: t.to_radians(),
        })
        .collect();
    let corrected = reconstruct_with_angles(&ds, &cfg, &map).unwrap();
    eprintln!(
        "nominal W={:.4} L={:.2}; true W={:.4} L={:.2}",
        nominal.metrics.w00,
        nominal.loglik(),
        corrected.metrics.w00,
        corrected.loglik()
    );
    assert!(corrected.loglik() > nominal.loglik());
    assert!(corrected.metrics.w00 < nominal.metrics.w00);
}

#[test]
fn bootstrap_spread_scales_with_counts() {
    let lossy = loss_channel(&kitten_pre_loss(), 0.88).unwrap();
    let ds = sample(&lossy, &NOMINAL_DEG, 5000, 500);
    let cfg = ReconstructionConfig::default();
    let rec = mle_reconstruct(&ds, &cfg).unwrap();
    let counts: Vec<(f64, usize)> = NOMINAL_DEG.iter().map(|d| (d.to_radians(), 5000)).collect();
    let small = bootstrap_metric(&rec.rho, &cfg, 50, &counts, 7).unwrap();
    let counts4: Vec<(f64, usize)> = NOMINAL_DEG.iter().map(|d| (d.to_radians(), 20000)).collect();
    let large = bootstrap_metric(&rec.rho, &cfg, 50, &counts4, 8).unwrap();
    eprintln!("std {:.4} -> {:.4}", small.std, large.std);
    assert!(small.std > 0.002 && small.std < 0.012, "{}", small.std);
    let ratio = small.std / large.std;
    assert!((ratio - 2.0).abs() <= 0.6, "{ratio}");
    let _ = PI;
}


//! Data-parallel kernels timed on the default rayon pool and on a
//! single-thread pool. Build with `--no-default-features` to time the
//! sequential fallback instead.

use std::f64::consts::PI;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use kitten_core::fock::{gaussian_state, loss_channel, photon_subtract, DensityMatrix, GaussianStateSpec};
use kitten_core::quadrature::{sample_quadratures, QuadratureDataset};
use kitten_core::spectrum::{default_init, joint_fit, model_spectrum, AngleMap, FitOptions, SpectrumData, SpectrumModelParams};
use kitten_core::temporal::synthesize_gaussian_traces;
use kitten_core::tomography::{bootstrap_metric, mle_reconstruct, ReconstructionConfig};

const ANGLES_DEG: [f64; 6] = [0.0, 30.0, 60.0, 90.0, 120.0, 150.0];

fn kitten() -> DensityMatrix {
    let sq = gaussian_state(GaussianStateSpec::from_db(-2.0, 2.4).unwrap(), 20).unwrap().state;
    loss_channel(&photon_subtract(&sq).unwrap().0, 0.88).unwrap()
}

fn dataset(rho: &DensityMatrix) -> QuadratureDataset {
    let mut samples = Vec::new();
    for (a, d) in ANGLES_DEG.iter().enumerate() {
        samples.extend(sample_quadratures(rho, d.to_radians(), 5000, a as u64).unwrap());
    }
    QuadratureDataset::new(samples, 1.0).unwrap()
}

fn spectrum() -> SpectrumData {
    let gamma = 2.0 * PI * 8e6;
    let truth = SpectrumModelParams {
        gamma,
        epsilon: 2.0 * PI * 1.74e6,
        eta: 0.462,
        sigma: 19.4f64.to_radians(),
        theta_true: ANGLES_DEG
            .iter()
            .zip([0.0, 33.5, 65.6, 90.0, 133.1, 163.3])
            .map(|(n, t): (&f64, f64)| AngleMap {
                nominal: n.to_radians(),
                actual: t.to_radians(),
            })
            .collect(),
    };
    let freqs: Vec<f64> = (0..200).map(|i| 0.5e6 + i as f64 * 1e5).collect();
    let angles: Vec<f64> = ANGLES_DEG.iter().map(|d| d.to_radians()).collect();
    let v = angles.iter().map(|&a| model_spectrum(&truth, a, &freqs, None).unwrap()).collect();
    SpectrumData::new(freqs, angles, v, None).unwrap()
}

/// Run `f` under each available execution mode.
fn modes(c: &mut Criterion, group: &str, f: impl Fn() + Sync) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    #[cfg(feature = "parallel")]
    {
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        g.bench_function(BenchmarkId::new("rayon", "single thread"), |b| b.iter(|| one.install(&f)));
        let n = rayon::current_num_threads();
        g.bench_function(BenchmarkId::new("rayon", format!("default pool, {n} threads")), |b| b.iter(&f));
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_function("sequential", |b| b.iter(&f));
    g.finish();
}

fn benches(c: &mut Criterion) {
    let rho = kitten();
    let ds = dataset(&rho);
    let short = ReconstructionConfig {
        max_iters: 40,
        ..Default::default()
    };
    let counts: Vec<(f64, usize)> = ANGLES_DEG.iter().map(|d| (d.to_radians(), 5000)).collect();
    let data = spectrum();
    let init = default_init(2.0 * PI * 8e6, &data.angles);

    modes(c, "sample_30k", || {
        black_box(sample_quadratures(&rho, 0.5, 30_000, 1).unwrap());
    });
    modes(c, "mle_40_iterations", || {
        black_box(mle_reconstruct(&ds, &short).unwrap());
    });
    modes(c, "bootstrap_4", || {
        black_box(bootstrap_metric(&rho, &short, 4, &counts, 9).unwrap());
    });
    modes(c, "synthesize_1000x500", || {
        black_box(synthesize_gaussian_traces(|_| 0.5, 1e-6, 500e6, 1000, 3).unwrap());
    });
    modes(c, "spectrum_fit", || {
        black_box(joint_fit(&data, &init, &FitOptions::default()).unwrap());
    });
}

criterion_group!(parallel, benches);
criterion_main!(parallel);

//! Temporal-mode processing checked against frequency-domain oracles.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use kitten_core::spectrum::vx_vp;
use kitten_core::temporal::{
    build_mode, extract_all, mode_function_eval, principal_mode, shot_noise_scale, synthesize_gaussian_traces,
    ModeFunction, TimeTrace,
};

const GAMMA: f64 = 2.0 * PI * 8.0e6;
const KAPPA: f64 = 2.0 * PI * 30.0e6;
const EPSILON: f64 = 2.0 * PI * 1.74e6;
const ETA: f64 = 0.462;
const FS: f64 = 500e6;
/// Each synthetic trace holds this many independent 200 ns mode windows.
const WINDOWS: usize = 8;
const WINDOW: f64 = 200e-9;

fn mode(fs: f64) -> ModeFunction {
    build_mode(GAMMA, KAPPA, WINDOW / 2.0, fs, WINDOW).unwrap()
}

/// Extract one quadrature per window of every trace.
fn windowed(traces: &[TimeTrace], mode: &ModeFunction) -> Vec<f64> {
    let n = mode.weights.len();
    let pieces: Vec<TimeTrace> = traces
        .iter()
        .flat_map(|t| {
            (0..t.len() / n).map(move |w| TimeTrace::new(t.sample_rate, t.values[w * n..(w + 1) * n].to_vec(), 0).unwrap())
        })
        .collect();
    extract_all(&pieces, mode).unwrap()
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// `∫|F|²V df / ∫|F|² df` for the continuous mode, whose transform is
/// proportional to `1/((γ²+ω²)(κ²+ω²))`.
fn frequency_oracle(v: impl Fn(f64) -> f64) -> f64 {
    let f2 = |f: f64| {
        let w2 = (2.0 * PI * f).powi(2);
        1.0 / ((GAMMA * GAMMA + w2) * (KAPPA * KAPPA + w2)).powi(2)
    };
    let (h, n) = (5e3, 400_000);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        let f = (i as f64 + 0.5) * h;
        num += f2(f) * v(f);
        den += f2(f);
    }
    num / den
}

/// Expected extracted variance of a process with one-sided PSD `v` through
/// the discrete weights: `2∫_0^{fs/2} |W(f)|² v(f) df / fs`.
fn discrete_oracle(mode: &ModeFunction, v: impl Fn(f64) -> f64) -> f64 {
    let fs = mode.sample_rate;
    let n = 20_000;
    let h = fs / 2.0 / n as f64;
    let mut total = 0.0;
    for k in 0..n {
        let f = (k as f64 + 0.5) * h;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, w) in mode.weights.iter().enumerate() {
            let ph = 2.0 * PI * f * i as f64 / fs;
            re += w * ph.cos();
            im -= w * ph.sin();
        }
        total += (re * re + im * im) * v(f);
    }
    2.0 * total * h / fs
}

fn spectra() -> Vec<(&'static str, Box<dyn Fn(f64) -> f64 + Sync>)> {
    vec![
        ("flat", Box::new(|_| 0.5)),
        ("V_x", Box::new(|f| vx_vp(f, GAMMA, EPSILON, ETA).0)),
        ("V_p", Box::new(|f| vx_vp(f, GAMMA, EPSILON, ETA).1)),
    ]
}

#[test]
fn synthesized_variance_matches_frequency_integral() {
    let m = mode(FS);
    for (k, (name, v)) in spectra().into_iter().enumerate() {
        let traces = synthesize_gaussian_traces(&v, WINDOW * WINDOWS as f64, FS, 10_000, 1000 + k as u64).unwrap();
        let (mean, var) = mean_var(&windowed(&traces, &m));
        let want = frequency_oracle(&v);
        let n = (10_000 * WINDOWS) as f64;
        assert!(mean.abs() < 3.0 * (var / n).sqrt(), "{name}: mean {mean}");
        assert!((var / want - 1.0).abs() < 0.02, "{name}: {var} vs {want}");
    }
}

#[test]
fn white_noise_variance_is_preserved() {
    let m = mode(FS);
    let traces = synthesize_gaussian_traces(|_| 1.7, WINDOW * WINDOWS as f64, FS, 12_500, 5).unwrap();
    let (_, var) = mean_var(&windowed(&traces, &m));
    let se = 1.7 * (2.0 / 1e5f64).sqrt();
    assert!((var - 1.7).abs() < 3.0 * se, "{var}");
}

#[test]
fn refinement_leaves_variance_unchanged() {
    for (name, v) in spectra() {
        let coarse = discrete_oracle(&mode(FS), &v);
        let fine = discrete_oracle(&mode(2.0 * FS), &v);
        assert!((fine / coarse - 1.0).abs() < 0.005, "{name}: {coarse} vs {fine}");
    }
}

#[test]
fn periodogram_follows_target() {
    let v = |f: f64| vx_vp(f, GAMMA, EPSILON, ETA).1;
    let n = 400;
    let count = 4000;
    let traces = synthesize_gaussian_traces(v, n as f64 / FS, FS, count, 77).unwrap();
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut power = vec![0.0; n / 2];
    for t in &traces {
        let mut buf: Vec<rustfft::num_complex::Complex<f64>> =
            t.values.iter().map(|&x| rustfft::num_complex::Complex::new(x, 0.0)).collect();
        fft.process(&mut buf);
        for k in 1..n / 2 {
            power[k] += buf[k].norm_sqr() / n as f64 / count as f64;
        }
    }
    for band in (1..n / 2 - 9).step_by(10) {
        let got: f64 = power[band..band + 10].iter().sum();
        let want: f64 = (band..band + 10).map(|k| v(k as f64 * FS / n as f64)).sum();
        assert!((got / want - 1.0).abs() < 0.03, "band {band}: {got} vs {want}");
    }
}

#[test]
fn shot_noise_calibration() {
    let raw = 3.2;
    let vacuum = synthesize_gaussian_traces(|_| raw, WINDOW, FS, 4000, 9).unwrap();
    let m = mode(FS);
    let sn = shot_noise_scale(&vacuum, &m).unwrap();
    assert!((sn.scale - (2.0 * raw).sqrt()).abs() < 3.0 * sn.std_error, "{sn:?}");
    let scaled: Vec<f64> = extract_all(&vacuum, &m).unwrap().iter().map(|x| x / sn.scale).collect();
    let (_, var) = mean_var(&scaled);
    let se = 0.5 * (2.0 / (scaled.len() as f64 - 1.0)).sqrt();
    assert!((var - 0.5).abs() < 2.0 * se, "{var}");

    // A shifted mode sees the same stationary noise.
    let long = synthesize_gaussian_traces(|_| raw, 2.0 * WINDOW, FS, 4000, 10).unwrap();
    let scale_at = |t0: f64| shot_noise_scale(&long, &build_mode(GAMMA, KAPPA, t0, FS, 2.0 * WINDOW).unwrap()).unwrap();
    let (a, b) = (scale_at(WINDOW * 0.75), scale_at(WINDOW * 1.25));
    assert!((a.scale - b.scale).abs() < 3.0 * a.std_error.hypot(b.std_error), "{a:?} {b:?}");
}

/// `count` traces of white noise at variance `floor` plus `g·ξ·f` with
/// `ξ ~ N(0,1)` and `f` the unit-norm planted shape.
fn planted(shape: &[f64], g: f64, floor: f64, count: usize, seed: u64) -> Vec<TimeTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let xi: f64 = StandardNormal.sample(&mut rng);
            let values = shape
                .iter()
                .map(|w| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    floor.sqrt() * z + g * xi * w
                })
                .collect();
            TimeTrace::new(FS, values, 0).unwrap()
        })
        .collect()
}

fn overlap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().abs()
}

#[test]
fn planted_mode_is_recovered() {
    let shape = mode(FS).weights;
    let signal = planted(&shape, 2.0, 0.5, 4000, 31);
    let vacuum = planted(&shape, 0.0, 0.5, 4000, 32);
    let pm = principal_mode(&signal, &vacuum).unwrap();
    let norm: f64 = pm.weights.iter().map(|w| w * w).sum();
    assert!((norm - 1.0).abs() < 1e-12);
    assert!(overlap(&pm.weights, &shape) >= 0.99, "{}", overlap(&pm.weights, &shape));
    let peak = pm.weights.iter().copied().fold(0.0, |m: f64, w| if w.abs() > m.abs() { w } else { m });
    assert!(peak > 0.0);

    let white = planted(&shape, 0.0, 0.5, 4000, 33);
    assert!(principal_mode(&white, &vacuum).is_err());
}

#[test]
fn principal_mode_follows_shifts() {
    let shape = mode(FS).weights;
    let signal = planted(&shape, 2.0, 0.5, 2000, 41);
    let vacuum = planted(&shape, 0.0, 0.5, 2000, 42);
    let base = principal_mode(&signal, &vacuum).unwrap();
    let k = 7;
    let roll = |set: &[TimeTrace]| -> Vec<TimeTrace> {
        set.iter()
            .map(|t| {
                let mut v = t.values.clone();
                v.rotate_right(k);
                TimeTrace::new(FS, v, 0).unwrap()
            })
            .collect()
    };
    let shifted = principal_mode(&roll(&signal), &roll(&vacuum)).unwrap();
    let mut expect = base.weights.clone();
    expect.rotate_right(k);
    for (a, b) in shifted.weights.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-9);
    }
}

/// Planted mode on top of a squeezed stationary background: the heralded
/// excess still dominates the autocovariance.
#[test]
fn planted_mode_over_squeezed_background() {
    let m = mode(FS);
    let d = m.weights.len();
    let background =
        synthesize_gaussian_traces(|f| vx_vp(f, GAMMA, EPSILON, ETA).0, d as f64 / FS, FS, 4000, 51).unwrap();
    let planted_part = planted(&m.weights, 2.0, 0.0, 4000, 52);
    let signal: Vec<TimeTrace> = background
        .iter()
        .zip(&planted_part)
        .map(|(b, p)| TimeTrace::new(FS, b.values.iter().zip(&p.values).map(|(x, y)| x + y).collect(), 0).unwrap())
        .collect();
    let vacuum = synthesize_gaussian_traces(|_| 0.5, d as f64 / FS, FS, 4000, 53).unwrap();
    let pm = principal_mode(&signal, &vacuum).unwrap();
    assert!(overlap(&pm.weights, &m.weights) >= 0.99, "{}", overlap(&pm.weights, &m.weights));
}

/// A purely stationary squeezed process has a Toeplitz excess covariance
/// whose leading eigenvector spreads over the whole window, so it cannot
/// single out the localized mode. Kept to document the gap.
#[test]
#[ignore = "stationary input has no localized principal mode"]
fn stationary_squeezed_background_alone() {
    let m = build_mode(GAMMA, KAPPA, 500e-9, FS, 1e-6).unwrap();
    let d = m.weights.len();
    let signal =
        synthesize_gaussian_traces(|f| vx_vp(f, GAMMA, EPSILON, ETA).0, d as f64 / FS, FS, 4000, 61).unwrap();
    let vacuum = synthesize_gaussian_traces(|_| 0.5, d as f64 / FS, FS, 4000, 62).unwrap();
    let pm = principal_mode(&signal, &vacuum).unwrap();
    let o = overlap(&pm.weights, &m.weights);
    eprintln!("overlap {o:.3}");
    assert!(o >= 0.95, "{o}");
}

#[test]
fn mode_is_even_about_its_center() {
    for tau in [1e-9, 7e-9, 40e-9] {
        let a = mode_function_eval(tau, GAMMA, KAPPA, 0.0);
        let b = mode_function_eval(-tau, GAMMA, KAPPA, 0.0);
        assert_eq!(a, b);
    }
    assert!(mode_function_eval(1.0, GAMMA, KAPPA, 0.0).abs() < 1e-300);
}

//! `kitten`: command-line access to every stage of the kitten-state
//! toolkit, plus the one-shot pipeline.
//!
//! Exit status: 0 success, 1 invalid input, 2 numerical failure.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kitten_core::fock::wigner_grid;
use kitten_core::io;
use kitten_core::pipeline::{
    calibrate_purity_mix, linspace, load_config, primary_eta, run_pipeline, sample_source,
    simulate_source, ExperimentConfig, Metrics, RunReport, BOOTSTRAP_SEED_OFFSET,
};
use kitten_core::quadrature::{sample_quadratures, sample_with_phase_noise, QuadratureDataset};
use kitten_core::spectrum::{default_init, joint_fit, vx_vp, FitOptions, ResidualDomain};
use kitten_core::temporal::{
    build_mode, extract_all, principal_mode, shot_noise_scale, synthesize_gaussian_traces,
    ModeFunction,
};
use kitten_core::tomography::{bootstrap_metric, mle_reconstruct, ReconstructionConfig};
use kitten_core::{Error, Result};

#[derive(Parser)]
#[command(name = "kitten", version, about = "Photon-subtracted squeezed-state simulation and tomography")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// RNG seed (overrides the config's sampling seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file, or directory for multi-file commands.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the state at the homodyne input from a config; writes density JSON.
    SimulateState,
    /// Draw homodyne samples from a density matrix; writes `angle_deg,value` CSV.
    Sample(SampleArgs),
    /// Synthesize stationary Gaussian time traces; writes a trace directory.
    SynthTraces(SynthArgs),
    /// Extract shot-noise-normalized quadratures from traces.
    Extract(ExtractArgs),
    /// Maximum-likelihood reconstruction; writes rho.json and metrics.json.
    Reconstruct(ReconstructArgs),
    /// Wigner function on a square grid; writes `x,p,w` CSV.
    WignerGrid(WignerArgs),
    /// Joint fit of multi-angle squeezing spectra; writes a fit report JSON.
    FitSpectrum(FitArgs),
    /// Parametric bootstrap of W(0,0); writes a JSON result.
    Bootstrap(BootstrapArgs),
    /// Full synthetic experiment with artifacts and report.
    Pipeline(PipelineArgs),
    /// Verify a run directory's manifest and print its metrics.
    Report(ReportArgs),
}

#[derive(Args)]
struct SampleArgs {
    /// Density-matrix JSON.
    #[arg(long = "in")]
    input: PathBuf,
    /// Comma-separated nominal angles in degrees (default from config).
    #[arg(long, value_delimiter = ',')]
    angles: Option<Vec<f64>>,
    /// Samples per angle (default from config).
    #[arg(long)]
    count: Option<usize>,
    /// Homodyne efficiency applied before sampling (default from config, else 1).
    #[arg(long)]
    eta: Option<f64>,
    /// Per-sample LO phase jitter in degrees.
    #[arg(long, default_value_t = 0.0)]
    phase_sigma_deg: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpectrumKind {
    Flat,
    Vx,
    Vp,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "flat")]
    spectrum: SpectrumKind,
    /// Level of the flat spectrum, shot-noise units.
    #[arg(long, default_value_t = 0.5)]
    level: f64,
    #[arg(long, default_value_t = 8.0)]
    gamma_mhz: f64,
    #[arg(long, default_value_t = 1.74)]
    epsilon_mhz: f64,
    #[arg(long, default_value_t = 0.462)]
    eta: f64,
    #[arg(long, default_value_t = 1000.0)]
    duration_ns: f64,
    #[arg(long, default_value_t = 500.0)]
    sample_rate_mhz: f64,
    #[arg(long, default_value_t = 1000)]
    count: usize,
}

#[derive(Args)]
struct ExtractArgs {
    /// Trace file or directory.
    #[arg(long = "in")]
    input: PathBuf,
    /// Blocked-signal traces for shot-noise calibration.
    #[arg(long)]
    vacuum: PathBuf,
    #[arg(long, default_value_t = 8.0)]
    gamma_mhz: f64,
    #[arg(long, default_value_t = 30.0)]
    kappa_mhz: f64,
    /// Mode center relative to the trigger sample, ns.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    t0_offset_ns: f64,
    /// Use the dominant excess-autocovariance eigenmode instead of the model mode.
    #[arg(long)]
    principal: bool,
    /// Angle tag written with each value, degrees.
    #[arg(long, default_value_t = 0.0)]
    angle_deg: f64,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Quadrature CSV.
    #[arg(long = "in")]
    input: PathBuf,
    /// Detection efficiency folded into the POVMs (default from config, else 1).
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    nmax: Option<usize>,
    /// True LO angles in degrees, one per nominal angle in file order.
    #[arg(long, value_delimiter = ',')]
    true_angles: Option<Vec<f64>>,
}

#[derive(Args)]
struct WignerArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Half-width of the grid.
    #[arg(long, default_value_t = 4.0)]
    range: f64,
    /// Points per axis.
    #[arg(long, default_value_t = 81)]
    points: usize,
}

#[derive(Args)]
struct FitArgs {
    /// Spectrum CSV.
    #[arg(long = "in")]
    input: PathBuf,
    /// Clearance CSV.
    #[arg(long)]
    clearance: Option<PathBuf>,
    #[arg(long, default_value_t = 8.0)]
    gamma_mhz: f64,
    /// Fit residuals in dB instead of linear variance.
    #[arg(long)]
    db: bool,
}

#[derive(Args)]
struct BootstrapArgs {
    /// Density-matrix JSON to resample from.
    #[arg(long = "in")]
    input: PathBuf,
    /// Quadrature CSV giving the per-angle counts.
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, default_value_t = 50)]
    resamples: usize,
    /// Efficiency of the reconstruction being bootstrapped (default from config, else 1).
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Calibrate the mixing weight to this primary W(0,0) before running.
    #[arg(long, allow_hyphen_values = true)]
    calibrate_w00: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory containing report.json.
    #[arg(long = "in")]
    input: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = configure_threads() {
        return fail(&e);
    }
    match dispatch(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => {
            eprintln!(
                "{}",
                serde_json::json!({"warning": "non_convergence", "message": "reconstruction hit max_iters"})
            );
            ExitCode::from(2)
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    let (stage, manifest) = match e {
        Error::Stage { stage, manifest, .. } => (Some(stage.clone()), manifest.clone()),
        _ => (None, Vec::new()),
    };
    let kind = if e.is_numerical() { "numerical" } else { "validation" };
    eprintln!(
        "{}",
        serde_json::json!({"error": kind, "message": e.to_string(), "stage": stage, "manifest": manifest})
    );
    ExitCode::from(if e.is_numerical() { 2 } else { 1 })
}

/// Size the worker pool from `KITTEN_THREADS` (0 or unset: automatic).
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("KITTEN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::param("KITTEN_THREADS", format!("`{raw}` is not a thread count")))?;
    #[cfg(feature = "parallel")]
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::param("KITTEN_THREADS", e.to_string()))?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

enum Outcome {
    Done,
    NotConverged,
}

fn out_path(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::param("--out", "output path is required"))
}

fn config(common: &Common) -> Result<Option<ExperimentConfig>> {
    common.config.as_deref().map(load_config).transpose()
}

fn require_config(common: &Common) -> Result<ExperimentConfig> {
    config(common)?.ok_or_else(|| Error::param("--config", "a config file is required"))
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    let c = &cli.common;
    match cli.command {
        Command::SimulateState => {
            let cfg = require_config(c)?;
            io::write_density(out_path(c)?, &simulate_source(&cfg)?)?;
        }
        Command::Sample(a) => sample(c, a)?,
        Command::SynthTraces(a) => synth(c, a)?,
        Command::Extract(a) => extract(c, a)?,
        Command::Reconstruct(a) => return reconstruct(c, a),
        Command::WignerGrid(a) => {
            if a.points < 2 || !(a.range > 0.0) {
                return Err(Error::param("--points", "need at least 2 points and a positive range"));
            }
            let rho = io::read_density(&a.input)?;
            let axis = linspace(-a.range, a.range, a.points);
            let w = wigner_grid(&rho, &axis, &axis);
            io::write_wigner_grid(out_path(c)?, &axis, &axis, &w)?;
        }
        Command::FitSpectrum(a) => {
            let data = io::read_spectrum(&a.input, a.clearance.as_deref())?;
            let init = default_init(2.0 * PI * a.gamma_mhz * 1e6, &data.angles);
            let options = FitOptions {
                domain: if a.db { ResidualDomain::Db } else { ResidualDomain::Linear },
                ..Default::default()
            };
            let report = joint_fit(&data, &init, &options)?;
            io::write_json(out_path(c)?, &report)?;
            if !report.converged {
                return Ok(Outcome::NotConverged);
            }
        }
        Command::Bootstrap(a) => bootstrap(c, a)?,
        Command::Pipeline(a) => {
            let mut cfg = require_config(c)?;
            if let Some(seed) = c.seed {
                cfg.sampling.seed = seed;
            }
            if let Some(dir) = &c.out {
                cfg.output_dir = dir.clone();
            }
            if let Some(target) = a.calibrate_w00 {
                let cal = calibrate_purity_mix(&cfg, target)?;
                eprintln!("calibrated purity_mix = {} (W(0,0) = {:.5})", cal.purity_mix, cal.w00);
                cfg.state.purity_mix = cal.purity_mix;
            }
            let report = run_pipeline(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report.metrics).map_err(Error::from)?);
            if !report.metrics.converged {
                return Ok(Outcome::NotConverged);
            }
        }
        Command::Report(a) => {
            let report: RunReport = io::read_json(&a.input.join("report.json"))?;
            report.verify_manifest(&a.input)?;
            print_report(&report);
        }
    }
    Ok(Outcome::Done)
}

fn sample(c: &Common, a: SampleArgs) -> Result<()> {
    let rho = io::read_density(&a.input)?;
    let cfg = config(c)?;
    if let (Some(cfg), None, None, None) = (&cfg, &a.angles, a.count, a.eta) {
        // Same draws as the pipeline's sampling stage.
        let mut cfg = cfg.clone();
        if let Some(seed) = c.seed {
            cfg.sampling.seed = seed;
        }
        let ds = sample_source(&cfg, &rho)?;
        return io::write_quadratures(out_path(c)?, &ds.samples);
    }
    let angles = a
        .angles
        .or_else(|| cfg.as_ref().map(|k| k.sampling.angles_deg.clone()))
        .ok_or_else(|| Error::param("--angles", "required without --config"))?;
    let count = a
        .count
        .or_else(|| cfg.as_ref().map(|k| k.sampling.per_angle_count))
        .ok_or_else(|| Error::param("--count", "required without --config"))?;
    let eta = a.eta.or_else(|| cfg.as_ref().map(|k| k.detection.hd_eta)).unwrap_or(1.0);
    let seed = c.seed.or_else(|| cfg.as_ref().map(|k| k.sampling.seed)).unwrap_or(0);
    let detected = if eta < 1.0 {
        kitten_core::fock::loss_channel(&rho, eta)?
    } else if eta == 1.0 {
        rho
    } else {
        return Err(Error::param("--eta", format!("{eta} not in (0, 1]")));
    };
    let mut samples = Vec::new();
    for (i, deg) in angles.iter().enumerate() {
        let s = kitten_core::par::task_seed(seed, i as u64);
        let draw = if a.phase_sigma_deg > 0.0 {
            sample_with_phase_noise(&detected, deg.to_radians(), a.phase_sigma_deg.to_radians(), count, s)?
        } else {
            sample_quadratures(&detected, deg.to_radians(), count, s)?
        };
        samples.extend(draw);
    }
    io::write_quadratures(out_path(c)?, &samples)
}

fn synth(c: &Common, a: SynthArgs) -> Result<()> {
    let gamma = 2.0 * PI * a.gamma_mhz * 1e6;
    let epsilon = 2.0 * PI * a.epsilon_mhz * 1e6;
    if !(epsilon < gamma) {
        return Err(Error::param("--epsilon-mhz", "must be below --gamma-mhz"));
    }
    let (kind, level, eta) = (a.spectrum, a.level, a.eta);
    let spectrum = move |f: f64| match kind {
        SpectrumKind::Flat => level,
        SpectrumKind::Vx => vx_vp(f, gamma, epsilon, eta).0,
        SpectrumKind::Vp => vx_vp(f, gamma, epsilon, eta).1,
    };
    let traces = synthesize_gaussian_traces(
        spectrum,
        a.duration_ns * 1e-9,
        a.sample_rate_mhz * 1e6,
        a.count,
        c.seed.unwrap_or(0),
    )?;
    io::write_traces(out_path(c)?, &traces)
}

fn extract(c: &Common, a: ExtractArgs) -> Result<()> {
    let traces = io::read_traces(&a.input)?;
    let vacuum = io::read_traces(&a.vacuum)?;
    let first = &traces[0];
    let mode = if a.principal {
        ModeFunction::from_weights(principal_mode(&traces, &vacuum)?.weights, first.sample_rate)?
    } else {
        let t0 = first.trigger_time() + a.t0_offset_ns * 1e-9;
        build_mode(
            2.0 * PI * a.gamma_mhz * 1e6,
            2.0 * PI * a.kappa_mhz * 1e6,
            t0,
            first.sample_rate,
            first.len() as f64 / first.sample_rate,
        )?
    };
    let shot = shot_noise_scale(&vacuum, &mode)?;
    let raw = extract_all(&traces, &mode)?;
    let samples: Vec<_> = raw
        .iter()
        .map(|v| kitten_core::quadrature::QuadratureSample {
            angle: a.angle_deg.to_radians(),
            value: v / shot.scale,
        })
        .collect();
    let ds = QuadratureDataset::new(samples, shot.scale)?;
    eprintln!(
        "{}",
        serde_json::json!({"shot_noise_scale": shot.scale, "std_error": shot.std_error, "traces": ds.len()})
    );
    io::write_quadratures(out_path(c)?, &ds.samples)
}

fn reconstruction_config(cfg: &Option<ExperimentConfig>, eta: Option<f64>) -> ReconstructionConfig {
    match cfg {
        Some(k) => k.reconstruction_config(eta.unwrap_or_else(|| primary_eta(k))),
        None => ReconstructionConfig {
            eta_correction: eta.unwrap_or(1.0),
            ..Default::default()
        },
    }
}

fn reconstruct(c: &Common, a: ReconstructArgs) -> Result<Outcome> {
    let cfg = config(c)?;
    let mut rc = reconstruction_config(&cfg, a.eta);
    if let Some(n) = a.nmax {
        rc.nmax = n;
    }
    rc.validate()?;
    let ds = io::read_quadratures(&a.input)?;
    if let Some(t) = a.true_angles {
        if t.len() != ds.angle_set.len() {
            return Err(Error::param(
                "--true-angles",
                format!("{} angles given, data has {}", t.len(), ds.angle_set.len()),
            ));
        }
        rc.angle_overrides = Some(
            ds.angle_set
                .iter()
                .zip(t)
                .map(|(&nominal, d)| kitten_core::spectrum::AngleMap {
                    nominal,
                    actual: d.to_radians(),
                })
                .collect(),
        );
    }
    let res = mle_reconstruct(&ds, &rc)?;
    let dir = out_path(c)?;
    io::write_density(&dir.join("rho.json"), &res.rho)?;
    io::write_json(&dir.join("metrics.json"), &Metrics::of(&res, None))?;
    Ok(if res.converged { Outcome::Done } else { Outcome::NotConverged })
}

fn bootstrap(c: &Common, a: BootstrapArgs) -> Result<()> {
    let cfg = config(c)?;
    let rc = reconstruction_config(&cfg, a.eta);
    let rho = io::read_density(&a.input)?;
    let ds = io::read_quadratures(&a.samples)?;
    let counts = kitten_core::pipeline::per_angle_counts(&ds);
    // With a config, seed the resamples exactly as the pipeline does.
    let seed = match (&cfg, c.seed) {
        (_, Some(s)) => s,
        (Some(k), None) => k.sampling.seed.wrapping_add(BOOTSTRAP_SEED_OFFSET),
        (None, None) => 0,
    };
    let res = bootstrap_metric(&rho, &rc, a.resamples, &counts, seed)?;
    io::write_json(out_path(c)?, &res)
}

fn print_report(r: &RunReport) {
    let m = &r.metrics;
    println!("manifest: {} files verified", r.manifest.len());
    println!("W(0,0) = {:.4}", m.w00);
    if let Some(s) = m.w00_std {
        println!("W(0,0) bootstrap std = {s:.4}");
    }
    println!("W(0,0) uncorrected = {:.4}", m.w00_uncorrected.unwrap_or(f64::NAN));
    if let Some(w) = m.w00_corrected {
        println!("W(0,0) corrected = {w:.4}");
    }
    if let (Some(a), Some(f)) = (m.alpha_star, m.cat_fidelity) {
        println!("best odd cat: alpha = {a:.3}, fidelity = {f:.4}");
    }
    for (k, v) in &r.var_db {
        println!("variance at {k} deg = {v:.3} dB");
    }
    println!("W(0,0) of simulated input = {:.4}", r.w00_source);
    for t in &r.timings {
        println!("{:>12}: {:.2} s", t.stage, t.seconds);
    }
}

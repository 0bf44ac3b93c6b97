//! End-to-end synthetic experiment: source state, channel, homodyne
//! sampling, reconstruction with and without loss correction, bootstrap,
//! and report writing.

mod config;

pub use config::{
    format_config, load_config, parse_config, save_config, ChannelSection, DbReference,
    DetectionSection, ExperimentConfig, ReconstructionSection, SamplingSection, StateSection,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{
    best_cat_fidelity, db_from_variance, gaussian_state, loss_channel, phase_diffusion,
    photon_subtract, wigner_grid, wigner_origin, DensityMatrix, Parity,
};
use crate::io;
use crate::par;
use crate::quadrature::{sample_quadratures, QuadratureDataset};
use crate::tomography::{bootstrap_metric, mle_reconstruct, ReconstructionConfig, ReconstructionResult};

/// Added to the sampling seed to seed the bootstrap, keeping its streams
/// apart from the data streams `seed + angle_index`.
pub const BOOTSTRAP_SEED_OFFSET: u64 = 1 << 32;

/// State at the homodyne input: source (optionally photon-subtracted and
/// mixed with the plain squeezed state), then link loss and phase
/// diffusion.
pub fn simulate_source(cfg: &ExperimentConfig) -> Result<DensityMatrix> {
    let nmax = cfg.state.nmax;
    let squeezed = gaussian_state(cfg.source_spec()?, nmax)?.state;
    let state = if cfg.state.subtract {
        let (sub, _) = photon_subtract(&squeezed)?;
        sub.embed(nmax).mix(&squeezed, cfg.state.purity_mix)?
    } else {
        squeezed
    };
    let state = loss_channel(&state, cfg.channel.link_eta)?;
    phase_diffusion(&state, cfg.channel.phase_sigma_deg.to_radians())
}

/// Quadrature data: the source sent through homodyne efficiency, sampled
/// at each angle with seed `seed + angle_index`.
pub fn sample_source(cfg: &ExperimentConfig, source: &DensityMatrix) -> Result<QuadratureDataset> {
    let detected = loss_channel(source, cfg.detection.hd_eta)?;
    let s = &cfg.sampling;
    let mut samples = Vec::with_capacity(s.angles_deg.len() * s.per_angle_count);
    for (a, nominal) in s.angles_deg.iter().enumerate() {
        let actual = s.true_angles_deg.as_ref().map_or(*nominal, |t| t[a]);
        let mut draw = sample_quadratures(
            &detected,
            actual.to_radians(),
            s.per_angle_count,
            par::task_seed(s.seed, a as u64),
        )?;
        for q in &mut draw {
            q.angle = nominal.to_radians();
        }
        samples.extend(draw);
    }
    QuadratureDataset::new(samples, 1.0)
}

/// Efficiency assumed by the primary reconstruction.
pub fn primary_eta(cfg: &ExperimentConfig) -> f64 {
    if cfg.detection.correct_loss {
        cfg.detection.hd_eta
    } else {
        1.0
    }
}

/// Per-angle sample counts of a dataset, in angle-set order.
pub fn per_angle_counts(ds: &QuadratureDataset) -> Vec<(f64, usize)> {
    let mut counts = vec![0usize; ds.angle_set.len()];
    for s in &ds.samples {
        if let Some(a) = ds.angle_index(s.angle) {
            counts[a] += 1;
        }
    }
    ds.angle_set.iter().copied().zip(counts).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub w00: f64,
    pub w00_std: Option<f64>,
    pub var_deg: BTreeMap<String, f64>,
    pub iterations: usize,
    pub converged: bool,
    pub loglik: f64,
    pub alpha_star: Option<f64>,
    pub cat_fidelity: Option<f64>,
    pub w00_uncorrected: Option<f64>,
    pub w00_corrected: Option<f64>,
}

impl Metrics {
    /// Tomography-level metrics of one reconstruction.
    pub fn of(res: &ReconstructionResult, w00_std: Option<f64>) -> Self {
        let mut var_deg = BTreeMap::new();
        var_deg.insert("0".to_string(), res.metrics.var_0);
        var_deg.insert("90".to_string(), res.metrics.var_90);
        Self {
            w00: res.metrics.w00,
            w00_std,
            var_deg,
            iterations: res.iterations,
            converged: res.converged,
            loglik: res.loglik(),
            alpha_star: None,
            cat_fidelity: None,
            w00_uncorrected: None,
            w00_corrected: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub timings: Vec<StageTiming>,
    pub metrics: Metrics,
    /// W(0,0) of the simulated state at the homodyne input.
    pub w00_source: f64,
    pub var_db: BTreeMap<String, f64>,
    pub manifest: Vec<ManifestEntry>,
}

impl RunReport {
    /// Recompute every manifest hash under `dir` and compare.
    pub fn verify_manifest(&self, dir: &Path) -> Result<()> {
        for e in &self.manifest {
            let got = io::sha256_file(&dir.join(&e.file))?;
            if got != e.sha256 {
                return Err(Error::param(
                    "manifest",
                    format!("{} hash {got} does not match {}", e.file, e.sha256),
                ));
            }
        }
        Ok(())
    }
}

/// Plot grid written alongside each run.
const WIGNER_RANGE: f64 = 4.0;
const WIGNER_POINTS: usize = 81;

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

struct Run<'a> {
    dir: &'a Path,
    manifest: Vec<ManifestEntry>,
    timings: Vec<StageTiming>,
}

impl Run<'_> {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self).map_err(|e| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
            manifest: self.manifest.iter().map(|m| m.file.clone()).collect(),
        });
        self.timings.push(StageTiming {
            stage: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    fn record(&mut self, file: &str) -> Result<PathBuf> {
        let path = self.dir.join(file);
        self.manifest.push(ManifestEntry {
            file: file.to_string(),
            sha256: io::sha256_file(&path)?,
        });
        Ok(path)
    }
}

/// Reconstruction configs for the uncorrected and (when enabled) the
/// loss-corrected estimate.
fn reconstruction_configs(cfg: &ExperimentConfig) -> (ReconstructionConfig, Option<ReconstructionConfig>) {
    let plain = cfg.reconstruction_config(1.0);
    let corrected = cfg
        .detection
        .correct_loss
        .then(|| cfg.reconstruction_config(cfg.detection.hd_eta));
    (plain, corrected)
}

/// Run the whole experiment and write its artifacts to
/// `cfg.output_dir`: `state.json`, `samples.csv`, `rho_uncorrected.json`,
/// `rho_corrected.json` (with loss correction), `wigner.csv`,
/// `metrics.json`, and `report.json` (which holds the manifest and is not
/// part of it).
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let dir = cfg.output_dir.as_path();
    std::fs::create_dir_all(dir)?;
    let mut run = Run {
        dir,
        manifest: Vec::new(),
        timings: Vec::new(),
    };

    let source = run.stage("simulate", |run| {
        let source = simulate_source(cfg)?;
        io::write_density(&run.dir.join("state.json"), &source)?;
        run.record("state.json")?;
        Ok(source)
    })?;

    let dataset = run.stage("sample", |run| {
        let ds = sample_source(cfg, &source)?;
        io::write_quadratures(&run.dir.join("samples.csv"), &ds.samples)?;
        let path = run.record("samples.csv")?;
        // Reconstruct from the file as written, so separate stage runs
        // see identical input.
        io::read_quadratures(&path)
    })?;

    let (plain_cfg, corrected_cfg) = reconstruction_configs(cfg);
    let (plain, corrected) = run.stage("reconstruct", |run| {
        let plain = mle_reconstruct(&dataset, &plain_cfg)?;
        io::write_density(&run.dir.join("rho_uncorrected.json"), &plain.rho)?;
        run.record("rho_uncorrected.json")?;
        let corrected = match &corrected_cfg {
            Some(c) => {
                let res = mle_reconstruct(&dataset, c)?;
                io::write_density(&run.dir.join("rho_corrected.json"), &res.rho)?;
                run.record("rho_corrected.json")?;
                Some(res)
            }
            None => None,
        };
        Ok((plain, corrected))
    })?;
    let (primary, primary_cfg) = match (&corrected, &corrected_cfg) {
        (Some(r), Some(c)) => (r, c),
        _ => (&plain, &plain_cfg),
    };

    let w00_std = run.stage("bootstrap", |_| {
        if cfg.reconstruction.bootstrap_resamples == 0 {
            return Ok(None);
        }
        let b = bootstrap_metric(
            &primary.rho,
            primary_cfg,
            cfg.reconstruction.bootstrap_resamples,
            &per_angle_counts(&dataset),
            cfg.sampling.seed.wrapping_add(BOOTSTRAP_SEED_OFFSET),
        )?;
        Ok(Some(b.std))
    })?;

    let (metrics, var_db) = run.stage("metrics", |run| {
        let cat = best_cat_fidelity(&primary.rho, Parity::Odd)?;
        let mut m = Metrics::of(primary, w00_std);
        m.alpha_star = Some(cat.alpha);
        m.cat_fidelity = Some(cat.fidelity);
        m.w00_uncorrected = Some(plain.metrics.w00);
        m.w00_corrected = corrected.as_ref().map(|c| c.metrics.w00);
        io::write_json(&run.dir.join("metrics.json"), &m)?;
        run.record("metrics.json")?;
        let axis = linspace(-WIGNER_RANGE, WIGNER_RANGE, WIGNER_POINTS);
        let w = wigner_grid(&primary.rho, &axis, &axis);
        io::write_wigner_grid(&run.dir.join("wigner.csv"), &axis, &axis, &w)?;
        run.record("wigner.csv")?;
        let mut var_db = BTreeMap::new();
        var_db.insert("0".to_string(), db_from_variance(primary.metrics.var_0));
        var_db.insert("90".to_string(), db_from_variance(primary.metrics.var_90));
        Ok((m, var_db))
    })?;

    let report = RunReport {
        config: cfg.clone(),
        timings: run.timings.clone(),
        metrics,
        w00_source: wigner_origin(&source),
        var_db,
        manifest: run.manifest.clone(),
    };
    run.stage("report", |run| io::write_json(&run.dir.join("report.json"), &report))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub purity_mix: f64,
    /// Primary-reconstruction W(0,0) at the calibrated mixing weight.
    pub w00: f64,
    pub evaluations: usize,
}

/// Primary-reconstruction W(0,0) for a config, without writing files.
pub fn reconstructed_w00(cfg: &ExperimentConfig) -> Result<f64> {
    let source = simulate_source(cfg)?;
    let ds = sample_source(cfg, &source)?;
    let rc = cfg.reconstruction_config(primary_eta(cfg));
    Ok(mle_reconstruct(&ds, &rc)?.metrics.w00)
}

/// Tune `state.purity_mix` so the primary reconstruction reaches
/// `target` W(0,0), to within `1e-4`.
///
/// W(0,0) of the simulated state is affine in the mixing weight; its slope
/// gives the starting point and the Newton steps on the reconstructed
/// value, which follows the model up to sampling noise.
pub fn calibrate_purity_mix(cfg: &ExperimentConfig, target: f64) -> Result<Calibration> {
    if !cfg.state.subtract {
        return Err(Error::param("state.subtract", "calibration needs a photon-subtracted source"));
    }
    let model = |xi: f64| -> Result<f64> {
        let mut c = cfg.clone();
        c.state.purity_mix = xi;
        let s = simulate_source(&c)?;
        let s = if cfg.detection.correct_loss {
            s
        } else {
            loss_channel(&s, cfg.detection.hd_eta)?
        };
        Ok(wigner_origin(&s))
    };
    let (w0, w1) = (model(0.0)?, model(1.0)?);
    let slope = w1 - w0;
    let start = (target - w0) / slope;
    if !(0.0..=1.0).contains(&start) {
        return Err(Error::param(
            "target",
            format!("W(0,0) = {target} is outside the reachable range [{w1:.4}, {w0:.4}]"),
        ));
    }
    let mut xi = start;
    let mut c = cfg.clone();
    for evaluations in 1..=8 {
        c.state.purity_mix = xi;
        let w = reconstructed_w00(&c)?;
        if (w - target).abs() < 1e-4 {
            return Ok(Calibration {
                purity_mix: xi,
                w00: w,
                evaluations,
            });
        }
        xi = (xi - (w - target) / slope).clamp(0.0, 1.0);
    }
    Err(Error::NonConvergence(format!(
        "purity_mix calibration did not reach W(0,0) = {target}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> ExperimentConfig {
        let text = format!(
            "[state]\nv_x_db = -2.0\nv_p_db = 2.4\nsubtract = true\npurity_mix = 0.9\nnmax = 16\n\
             [channel]\nlink_eta = 1\nphase_sigma_deg = 0\n\
             [detection]\nhd_eta = 0.88\ncorrect_loss = true\n\
             [sampling]\nangles_deg = 0, 60, 120\nper_angle_count = 800\nseed = 3\n\
             [reconstruction]\nnmax = 6\nmax_iters = 100\nbootstrap_resamples = 3\n\
             [outputs]\ndirectory = {}\n",
            dir.display()
        );
        parse_config(&text).unwrap()
    }

    #[test]
    fn pipeline_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let rep = run_pipeline(&cfg).unwrap();
        let files: Vec<&str> = rep.manifest.iter().map(|m| m.file.as_str()).collect();
        assert_eq!(
            files,
            ["state.json", "samples.csv", "rho_uncorrected.json", "rho_corrected.json", "metrics.json", "wigner.csv"]
        );
        rep.verify_manifest(dir.path()).unwrap();
        assert!(rep.metrics.w00_std.is_some());
        assert!(dir.path().join("report.json").exists());
        let m: Metrics = io::read_json(&dir.path().join("metrics.json")).unwrap();
        assert_eq!(m, rep.metrics);
    }

    #[test]
    fn stage_error_carries_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        // A thermal state this wide leaks past the sampling grid.
        cfg.state.v_x_db = 11.0;
        cfg.state.v_p_db = 11.0;
        cfg.state.subtract = false;
        cfg.state.nmax = 100;
        match run_pipeline(&cfg) {
            Err(Error::Stage { stage, manifest, .. }) => {
                assert_eq!(stage, "sample");
                assert_eq!(manifest, vec!["state.json".to_string()]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn counts_per_angle() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let ds = sample_source(&cfg, &simulate_source(&cfg).unwrap()).unwrap();
        let c = per_angle_counts(&ds);
        assert_eq!(c.len(), 3);
        assert!(c.iter().all(|&(_, n)| n == 800));
    }
}

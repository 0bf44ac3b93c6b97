//! INI-style experiment configuration.
//!
//! ```text
//! [state]
//! v_x_db = -2.0
//! v_p_db = 2.4
//! subtract = true
//! purity_mix = 0.94
//! ```
//!
//! Unknown sections and keys are errors, as are duplicates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{variance_from_db, GaussianStateSpec};
use crate::tomography::{uniform_edges, ReconstructionConfig};

/// Which point of the setup the configured dB variances refer to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DbReference {
    /// Variances of the source state itself.
    Source,
    /// Variances as seen after homodyne efficiency `hd_eta`.
    Detected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSection {
    pub v_x_db: f64,
    pub v_p_db: f64,
    pub db_reference: DbReference,
    pub subtract: bool,
    pub purity_mix: f64,
    pub nmax: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSection {
    pub link_eta: f64,
    pub phase_sigma_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSection {
    pub hd_eta: f64,
    pub correct_loss: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingSection {
    pub angles_deg: Vec<f64>,
    pub per_angle_count: usize,
    pub seed: u64,
    /// LO angles actually realized; samples stay tagged with `angles_deg`.
    pub true_angles_deg: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionSection {
    pub nmax: usize,
    pub bin_width: f64,
    pub bin_range: f64,
    pub max_iters: usize,
    pub loglik_tol: f64,
    /// Reconstruct at `true_angles_deg` instead of the nominal angles.
    pub angle_correction: bool,
    /// 0 disables the bootstrap.
    pub bootstrap_resamples: usize,
}

impl Default for ReconstructionSection {
    fn default() -> Self {
        Self {
            nmax: 12,
            bin_width: 0.1,
            bin_range: 6.0,
            max_iters: 2000,
            loglik_tol: 1e-9,
            angle_correction: false,
            bootstrap_resamples: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub state: StateSection,
    pub channel: ChannelSection,
    pub detection: DetectionSection,
    pub sampling: SamplingSection,
    pub reconstruction: ReconstructionSection,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::param(name, format!("{v} not in (0, 1]")))
            }
        };
        unit("channel.link_eta", self.channel.link_eta)?;
        unit("detection.hd_eta", self.detection.hd_eta)?;
        let s = &self.state;
        if !(0.0..=1.0).contains(&s.purity_mix) {
            return Err(Error::param("state.purity_mix", format!("{} not in [0, 1]", s.purity_mix)));
        }
        if s.nmax < 2 {
            return Err(Error::param("state.nmax", "must be at least 2"));
        }
        if !(self.channel.phase_sigma_deg >= 0.0 && self.channel.phase_sigma_deg.is_finite()) {
            return Err(Error::param("channel.phase_sigma_deg", "must be ≥ 0"));
        }
        self.source_spec()?;
        let sm = &self.sampling;
        if sm.angles_deg.is_empty() {
            return Err(Error::param("sampling.angles_deg", "angle list is empty"));
        }
        if sm.angles_deg.iter().any(|a| !a.is_finite()) {
            return Err(Error::param("sampling.angles_deg", "angles must be finite"));
        }
        if sm.per_angle_count < 1 {
            return Err(Error::param("sampling.per_angle_count", "must be at least 1"));
        }
        if let Some(t) = &sm.true_angles_deg {
            if t.len() != sm.angles_deg.len() {
                return Err(Error::param(
                    "sampling.true_angles_deg",
                    format!("{} entries for {} angles", t.len(), sm.angles_deg.len()),
                ));
            }
        }
        let r = &self.reconstruction;
        if r.angle_correction && sm.true_angles_deg.is_none() {
            return Err(Error::param(
                "reconstruction.angle_correction",
                "requires sampling.true_angles_deg",
            ));
        }
        if !(r.bin_width > 0.0) || !(r.bin_range > r.bin_width) {
            return Err(Error::param("reconstruction.bin_width", "need 0 < bin_width < bin_range"));
        }
        if r.bootstrap_resamples == 1 {
            return Err(Error::param("reconstruction.bootstrap_resamples", "must be 0 or at least 2"));
        }
        self.reconstruction_config(1.0).validate()
    }

    /// Variances of the source state, undoing the homodyne efficiency when
    /// the configured values are detected ones.
    pub fn source_spec(&self) -> Result<GaussianStateSpec> {
        let s = &self.state;
        let (vx, vp) = (variance_from_db(s.v_x_db), variance_from_db(s.v_p_db));
        match s.db_reference {
            DbReference::Source => GaussianStateSpec::new(vx, vp),
            DbReference::Detected => {
                let eta = self.detection.hd_eta;
                let undo = |v: f64| (v - 0.5 * (1.0 - eta)) / eta;
                GaussianStateSpec::new(undo(vx), undo(vp))
            }
        }
    }

    pub fn reconstruction_config(&self, eta_correction: f64) -> ReconstructionConfig {
        let r = &self.reconstruction;
        let angle_overrides = if r.angle_correction {
            self.sampling.true_angles_deg.as_ref().map(|t| {
                self.sampling
                    .angles_deg
                    .iter()
                    .zip(t)
                    .map(|(n, a)| crate::spectrum::AngleMap {
                        nominal: n.to_radians(),
                        actual: a.to_radians(),
                    })
                    .collect()
            })
        } else {
            None
        };
        ReconstructionConfig {
            nmax: r.nmax,
            bin_edges: uniform_edges(-r.bin_range, r.bin_range, r.bin_width),
            eta_correction,
            max_iters: r.max_iters,
            loglik_tol: r.loglik_tol,
            angle_overrides,
        }
    }
}

type Sections = BTreeMap<String, BTreeMap<String, (usize, String)>>;

const KEYS: &[(&str, &[&str])] = &[
    ("state", &["v_x_db", "v_p_db", "db_reference", "subtract", "purity_mix", "nmax"]),
    ("channel", &["link_eta", "phase_sigma_deg"]),
    ("detection", &["hd_eta", "correct_loss"]),
    ("sampling", &["angles_deg", "per_angle_count", "seed", "true_angles_deg"]),
    (
        "reconstruction",
        &[
            "nmax",
            "bin_width",
            "bin_range",
            "max_iters",
            "loglik_tol",
            "angle_correction",
            "bootstrap_resamples",
        ],
    ),
    ("outputs", &["directory"]),
];

fn tokenize(text: &str) -> Result<Sections> {
    let mut out: Sections = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: line_no, message };
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(format!("malformed section header `{line}`")))?
                .trim();
            if !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(err(format!("unknown section [{name}]")));
            }
            if out.contains_key(name) {
                return Err(err(format!("duplicate section [{name}]")));
            }
            out.insert(name.to_string(), BTreeMap::new());
            current = Some(name.to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        let section = current
            .as_ref()
            .ok_or_else(|| err(format!("key `{k}` outside any section")))?;
        let allowed = KEYS.iter().find(|(s, _)| s == section).map(|(_, k)| *k).unwrap_or(&[]);
        if !allowed.contains(&k) {
            return Err(err(format!("unknown key `{k}` in [{section}]")));
        }
        let table = out.get_mut(section).expect("section inserted");
        if table.insert(k.to_string(), (line_no, v.to_string())).is_some() {
            return Err(err(format!("duplicate key `{k}` in [{section}]")));
        }
    }
    Ok(out)
}

struct Reader<'a> {
    sections: &'a Sections,
}

impl Reader<'_> {
    fn raw(&self, section: &str, key: &str) -> Option<&(usize, String)> {
        self.sections.get(section).and_then(|t| t.get(key))
    }

    fn get<T>(&self, section: &str, key: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Option<T>> {
        match self.raw(section, key) {
            None => Ok(None),
            Some((line, v)) => parse(v).map(Some).ok_or_else(|| Error::Parse {
                line: *line,
                message: format!("invalid value `{v}` for {section}.{key}"),
            }),
        }
    }

    fn require<T>(&self, section: &str, key: &str, parse: impl Fn(&str) -> Option<T>) -> Result<T> {
        self.get(section, key, parse)?
            .ok_or_else(|| Error::param(format!("{section}.{key}"), "missing required key"))
    }
}

fn float(s: &str) -> Option<f64> {
    s.parse().ok().filter(|v: &f64| v.is_finite())
}

fn int<T: std::str::FromStr>(s: &str) -> Option<T> {
    s.parse().ok()
}

fn boolean(s: &str) -> Option<bool> {
    match s {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

fn float_list(s: &str) -> Option<Vec<f64>> {
    s.split(',').map(|x| float(x.trim())).collect()
}

fn reference(s: &str) -> Option<DbReference> {
    match s {
        "source" => Some(DbReference::Source),
        "detected" => Some(DbReference::Detected),
        _ => None,
    }
}

/// Parse and validate configuration text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let sections = tokenize(text)?;
    let r = Reader { sections: &sections };
    let d = ReconstructionSection::default();
    let cfg = ExperimentConfig {
        state: StateSection {
            v_x_db: r.require("state", "v_x_db", float)?,
            v_p_db: r.require("state", "v_p_db", float)?,
            db_reference: r.get("state", "db_reference", reference)?.unwrap_or(DbReference::Source),
            subtract: r.require("state", "subtract", boolean)?,
            purity_mix: r.require("state", "purity_mix", float)?,
            nmax: r.get("state", "nmax", int)?.unwrap_or(20),
        },
        channel: ChannelSection {
            link_eta: r.require("channel", "link_eta", float)?,
            phase_sigma_deg: r.require("channel", "phase_sigma_deg", float)?,
        },
        detection: DetectionSection {
            hd_eta: r.require("detection", "hd_eta", float)?,
            correct_loss: r.require("detection", "correct_loss", boolean)?,
        },
        sampling: SamplingSection {
            angles_deg: r.require("sampling", "angles_deg", float_list)?,
            per_angle_count: r.require("sampling", "per_angle_count", int)?,
            seed: r.require("sampling", "seed", int)?,
            true_angles_deg: r.get("sampling", "true_angles_deg", float_list)?,
        },
        reconstruction: ReconstructionSection {
            nmax: r.get("reconstruction", "nmax", int)?.unwrap_or(d.nmax),
            bin_width: r.get("reconstruction", "bin_width", float)?.unwrap_or(d.bin_width),
            bin_range: r.get("reconstruction", "bin_range", float)?.unwrap_or(d.bin_range),
            max_iters: r.get("reconstruction", "max_iters", int)?.unwrap_or(d.max_iters),
            loglik_tol: r.get("reconstruction", "loglik_tol", float)?.unwrap_or(d.loglik_tol),
            angle_correction: r
                .get("reconstruction", "angle_correction", boolean)?
                .unwrap_or(d.angle_correction),
            bootstrap_resamples: r
                .get("reconstruction", "bootstrap_resamples", int)?
                .unwrap_or(d.bootstrap_resamples),
        },
        output_dir: r
            .require("outputs", "directory", |s| (!s.is_empty()).then(|| PathBuf::from(s)))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// Render a config so that `parse_config(format_config(c)) == c`.
pub fn format_config(c: &ExperimentConfig) -> String {
    let mut s = String::new();
    let db_ref = match c.state.db_reference {
        DbReference::Source => "source",
        DbReference::Detected => "detected",
    };
    let _ = writeln!(s, "[state]");
    let _ = writeln!(s, "v_x_db = {}", c.state.v_x_db);
    let _ = writeln!(s, "v_p_db = {}", c.state.v_p_db);
    let _ = writeln!(s, "db_reference = {db_ref}");
    let _ = writeln!(s, "subtract = {}", c.state.subtract);
    let _ = writeln!(s, "purity_mix = {}", c.state.purity_mix);
    let _ = writeln!(s, "nmax = {}", c.state.nmax);
    let _ = writeln!(s, "\n[channel]");
    let _ = writeln!(s, "link_eta = {}", c.channel.link_eta);
    let _ = writeln!(s, "phase_sigma_deg = {}", c.channel.phase_sigma_deg);
    let _ = writeln!(s, "\n[detection]");
    let _ = writeln!(s, "hd_eta = {}", c.detection.hd_eta);
    let _ = writeln!(s, "correct_loss = {}", c.detection.correct_loss);
    let _ = writeln!(s, "\n[sampling]");
    let _ = writeln!(s, "angles_deg = {}", list(&c.sampling.angles_deg));
    let _ = writeln!(s, "per_angle_count = {}", c.sampling.per_angle_count);
    let _ = writeln!(s, "seed = {}", c.sampling.seed);
    if let Some(t) = &c.sampling.true_angles_deg {
        let _ = writeln!(s, "true_angles_deg = {}", list(t));
    }
    let r = &c.reconstruction;
    let _ = writeln!(s, "\n[reconstruction]");
    let _ = writeln!(s, "nmax = {}", r.nmax);
    let _ = writeln!(s, "bin_width = {}", r.bin_width);
    let _ = writeln!(s, "bin_range = {}", r.bin_range);
    let _ = writeln!(s, "max_iters = {}", r.max_iters);
    let _ = writeln!(s, "loglik_tol = {:e}", r.loglik_tol);
    let _ = writeln!(s, "angle_correction = {}", r.angle_correction);
    let _ = writeln!(s, "bootstrap_resamples = {}", r.bootstrap_resamples);
    let _ = writeln!(s, "\n[outputs]");
    let _ = writeln!(s, "directory = {}", c.output_dir.display());
    s
}

pub fn save_config(path: &Path, c: &ExperimentConfig) -> Result<()> {
    crate::io::atomic_write(path, format_config(c).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = "\
# local state
[state]
v_x_db = -2.0
v_p_db = 2.4
subtract = true
purity_mix = 0.9

[channel]
link_eta = 0.78
phase_sigma_deg = 19.4

[detection]
hd_eta = 0.88
correct_loss = true

[sampling]
angles_deg = 0, 30, 60, 90, 120, 150
per_angle_count = 5000
seed = 1

[outputs]
directory = run1
";

    #[test]
    fn parses_sample() {
        let c = parse_config(SAMPLE).unwrap();
        assert_eq!(c.channel.link_eta, 0.78);
        assert_eq!(c.sampling.angles_deg.len(), 6);
        assert_eq!(c.reconstruction, ReconstructionSection::default());
        assert_eq!(c.state.db_reference, DbReference::Source);
        assert_eq!(c.output_dir, PathBuf::from("run1"));
    }

    #[test]
    fn round_trip() {
        let mut c = parse_config(SAMPLE).unwrap();
        c.sampling.true_angles_deg = Some(vec![0.0, 33.5, 65.6, 90.0, 133.1, 163.3]);
        c.reconstruction.angle_correction = true;
        c.state.purity_mix = 0.1 + 0.2;
        let back = parse_config(&format_config(&c)).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.channel.link_eta.to_bits(), 0.78f64.to_bits());
    }

    #[test]
    fn unknown_key_names_line() {
        let text = SAMPLE.replace("link_eta = 0.78", "link_eta = 0.78\nlink_etta = 0.5");
        match parse_config(&text) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 10);
                assert!(message.contains("link_etta"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_key_is_named() {
        let text = SAMPLE.replace("hd_eta = 0.88\n", "");
        match parse_config(&text) {
            Err(Error::InvalidParameter { name, .. }) => assert_eq!(name, "detection.hd_eta"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invariants_checked() {
        let text = SAMPLE.replace("hd_eta = 0.88", "hd_eta = 1.2");
        match parse_config(&text) {
            Err(Error::InvalidParameter { name, .. }) => assert_eq!(name, "detection.hd_eta"),
            other => panic!("{other:?}"),
        }
        assert!(parse_config(&SAMPLE.replace("purity_mix = 0.9", "purity_mix = 1.5")).is_err());
        assert!(parse_config(&SAMPLE.replace("subtract = true", "subtract = yes")).is_err());
        assert!(parse_config(&SAMPLE.replace("[channel]", "[chanel]")).is_err());
    }

    #[test]
    fn detected_reference_undoes_efficiency() {
        let text = SAMPLE.replace("[state]", "[state]\ndb_reference = detected");
        let c = parse_config(&text).unwrap();
        let spec = c.source_spec().unwrap();
        let vx = variance_from_db(-2.0);
        assert!((0.88 * spec.v_x + 0.06 - vx).abs() < 1e-15);
    }
}

//! File formats: density-matrix JSON, quadrature / spectrum / clearance /
//! trace CSV, and atomic output helpers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fock::DensityMatrix;
use crate::quadrature::{QuadratureDataset, QuadratureSample};
use crate::spectrum::{interpolate_clearance, SpectrumData};
use crate::temporal::TimeTrace;

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_density(path: &Path) -> Result<DensityMatrix> {
    read_json(path)
}

pub fn write_density(path: &Path, rho: &DensityMatrix) -> Result<()> {
    write_json(path, rho)
}

/// Hex SHA-256 of a file.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Serialize, Deserialize)]
struct QuadratureRow {
    angle_deg: f64,
    value: f64,
}

/// Read `angle_deg,value` rows. Angles are converted to radians.
pub fn read_quadratures(path: &Path) -> Result<QuadratureDataset> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut samples = Vec::new();
    for row in rdr.deserialize() {
        let r: QuadratureRow = row?;
        samples.push(QuadratureSample {
            angle: r.angle_deg.to_radians(),
            value: r.value,
        });
    }
    if samples.is_empty() {
        return Err(Error::Empty(format!("{} has no samples", path.display())));
    }
    QuadratureDataset::new(samples, 1.0)
}

pub fn write_quadratures(path: &Path, samples: &[QuadratureSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in samples {
        w.serialize(QuadratureRow {
            angle_deg: s.angle.to_degrees(),
            value: s.value,
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    atomic_write(path, &bytes)
}

/// Parse one trace file: `# key=value` metadata lines, then one sample per
/// line.
pub fn parse_trace(text: &str) -> Result<TimeTrace> {
    let mut rate = None;
    let mut trigger = 0usize;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        if let Some(meta) = line.strip_prefix('#') {
            if let Some((k, v)) = meta.split_once('=') {
                match k.trim() {
                    "sample_rate_hz" => {
                        rate = Some(v.trim().parse::<f64>().map_err(|e| err(format!("sample_rate_hz: {e}")))?)
                    }
                    "trigger_index" => {
                        trigger = v.trim().parse().map_err(|e| err(format!("trigger_index: {e}")))?
                    }
                    _ => {}
                }
            }
            continue;
        }
        values.push(line.parse::<f64>().map_err(|e| err(format!("sample `{line}`: {e}")))?);
    }
    let rate = rate.ok_or_else(|| Error::Parse {
        line: 0,
        message: "missing `# sample_rate_hz=` header".into(),
    })?;
    TimeTrace::new(rate, values, trigger)
}

pub fn format_trace(trace: &TimeTrace) -> String {
    let mut out = format!(
        "# sample_rate_hz={}\n# trigger_index={}\n",
        trace.sample_rate, trace.trigger_index
    );
    for v in &trace.values {
        out.push_str(&format!("{v}\n"));
    }
    out
}

pub fn read_trace(path: &Path) -> Result<TimeTrace> {
    parse_trace(&fs::read_to_string(path)?).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// A single trace file, or every regular file in a directory (sorted by
/// name).
pub fn read_traces(path: &Path) -> Result<Vec<TimeTrace>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Empty(format!("{} contains no trace files", path.display())));
        }
        files.iter().map(|f| read_trace(f)).collect()
    } else {
        Ok(vec![read_trace(path)?])
    }
}

/// Write an ensemble as `trace_00000.csv`, … in `dir`.
pub fn write_traces(dir: &Path, traces: &[TimeTrace]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, t) in traces.iter().enumerate() {
        atomic_write(&dir.join(format!("trace_{i:05}.csv")), format_trace(t).as_bytes())?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SpectrumRow {
    freq_hz: f64,
    angle_deg: f64,
    variance_snu: f64,
}

#[derive(Serialize, Deserialize)]
struct ClearanceRow {
    freq_hz: f64,
    clearance: f64,
}

pub fn read_clearance(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut f = Vec::new();
    let mut c = Vec::new();
    for row in rdr.deserialize() {
        let r: ClearanceRow = row?;
        f.push(r.freq_hz);
        c.push(r.clearance);
    }
    Ok((f, c))
}

/// Read `freq_hz,angle_deg,variance_snu` rows; every angle must cover the
/// same frequency grid. The clearance table, if given, is interpolated
/// onto that grid.
pub fn read_spectrum(path: &Path, clearance: Option<&Path>) -> Result<SpectrumData> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut angles: Vec<f64> = Vec::new();
    let mut curves: Vec<Vec<(f64, f64)>> = Vec::new();
    for row in rdr.deserialize() {
        let r: SpectrumRow = row?;
        let a = match angles.iter().position(|x| (x - r.angle_deg).abs() < 1e-9) {
            Some(a) => a,
            None => {
                angles.push(r.angle_deg);
                curves.push(Vec::new());
                angles.len() - 1
            }
        };
        curves[a].push((r.freq_hz, r.variance_snu));
    }
    if curves.is_empty() {
        return Err(Error::Empty(format!("{} has no rows", path.display())));
    }
    for c in &mut curves {
        c.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let freqs: Vec<f64> = curves[0].iter().map(|p| p.0).collect();
    for (a, c) in curves.iter().enumerate() {
        if c.len() != freqs.len() || c.iter().zip(&freqs).any(|(p, f)| p.0 != *f) {
            return Err(Error::GridMismatch(format!(
                "angle {}° does not share the frequency grid of angle {}°",
                angles[a], angles[0]
            )));
        }
    }
    let clearance = match clearance {
        Some(p) => {
            let (tf, tc) = read_clearance(p)?;
            Some(interpolate_clearance(&tf, &tc, &freqs)?)
        }
        None => None,
    };
    SpectrumData::new(
        freqs,
        angles.iter().map(|a| a.to_radians()).collect(),
        curves.into_iter().map(|c| c.into_iter().map(|p| p.1).collect()).collect(),
        clearance,
    )
}

pub fn write_spectrum(path: &Path, data: &SpectrumData) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (a, curve) in data.angles.iter().zip(&data.variances) {
        for (f, v) in data.freqs.iter().zip(curve) {
            w.serialize(SpectrumRow {
                freq_hz: *f,
                angle_deg: a.to_degrees(),
                variance_snu: *v,
            })?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    atomic_write(path, &bytes)
}

/// Wigner grid as `x,p,w` rows, x-major.
pub fn write_wigner_grid(path: &Path, xs: &[f64], ps: &[f64], w: &[Vec<f64>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(["x", "p", "w"])?;
    for (i, x) in xs.iter().enumerate() {
        for (j, p) in ps.iter().enumerate() {
            out.write_record([x.to_string(), p.to_string(), w[i][j].to_string()])?;
        }
    }
    let bytes = out.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    atomic_write(path, &bytes)
}

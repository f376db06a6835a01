//! On-disk formats: data pair CSV with a provenance sidecar, checkpoints,
//! loss histories, trajectories and tables.
//!
//! Numbers in CSV files are written as `{:.16e}` (17 significant digits),
//! which round-trips every finite `f64`. JSON uses the shortest
//! representation that round-trips. Files are written to a temporary name
//! and renamed into place, so a failed command leaves no partial output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::TrajectoryResult;
use crate::field::VectorField;
use crate::network::NetworkParams;
use crate::optimize::LossReport;
use crate::residual::{DataPair, ResidualScheme};
use crate::systems::{DataPairSet, Provenance, TrueSystem};

pub const CHECKPOINT_FORMAT: &str = "rdnn-checkpoint-1";

/// `dir/name.csv` -> `dir/name.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// CSV body of a pair set: a `dim,<d>` line, the column header, one row per pair.
pub fn pairs_to_csv(set: &DataPairSet) -> Result<String> {
    let d = set
        .dim()
        .ok_or_else(|| Error::contract("cannot write an empty pair set"))?;
    let mut out = format!("dim,{d}\nt1");
    (1..=d).for_each(|i| {
        let _ = write!(out, ",phi1_{i}");
    });
    out.push_str(",t2");
    (1..=d).for_each(|i| {
        let _ = write!(out, ",phi2_{i}");
    });
    out.push('\n');
    for p in &set.pairs {
        let row: Vec<String> = std::iter::once(p.t1)
            .chain(p.phi1.iter().copied())
            .chain(std::iter::once(p.t2))
            .chain(p.phi2.iter().copied())
            .map(num)
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_pairs(set: &DataPairSet, path: &Path) -> Result<()> {
    let csv = pairs_to_csv(set)?;
    write_atomic(path, csv.as_bytes())?;
    write_atomic(&sidecar_path(path), to_json(&set.provenance).as_bytes())
}

/// Reads a pair CSV. Errors cite the 1-based line number. The provenance
/// sidecar is loaded when present.
pub fn read_pairs(path: &Path) -> Result<DataPairSet> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let d: usize = first
        .strip_prefix("dim,")
        .and_then(|v| v.trim().parse().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| parse_err(path, 1, "expected `dim,<positive integer>`"))?;
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 2, "missing column header"))?;
    if header.split(',').count() != 2 * d + 2 || !header.starts_with("t1,") {
        return Err(parse_err(path, 2, format!("header does not match dimension {d}")));
    }
    let mut pairs = Vec::new();
    for (line, row) in lines {
        if row.trim().is_empty() {
            continue;
        }
        let vals = row
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| parse_err(path, line, format!("bad number: {e}")))?;
        if vals.len() != 2 * d + 2 {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", 2 * d + 2, vals.len()),
            ));
        }
        let pair = DataPair::new(vals[1..=d].to_vec(), vals[0], vals[d + 2..].to_vec(), vals[d + 1])
            .map_err(|e| parse_err(path, line, e.to_string()))?;
        pairs.push(pair);
    }
    if pairs.is_empty() {
        return Err(parse_err(path, 3, "no data rows"));
    }
    let side = sidecar_path(path);
    let provenance = if side.exists() {
        serde_json::from_str(&read_text(&side)?).map_err(|e| parse_err(&side, e.line(), e.to_string()))?
    } else {
        Provenance {
            n: pairs.len(),
            ..Provenance::default()
        }
    };
    DataPairSet::new(pairs, provenance)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Network,
    /// The closed-form right-hand side of `system`; used for null tests.
    Exact,
}

/// Serialized model. For `Exact`, `widths` and `params` are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelKind,
    #[serde(default)]
    pub system: Option<TrueSystem>,
    #[serde(default)]
    pub widths: Vec<usize>,
    #[serde(default)]
    pub autonomous: bool,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub scheme: Option<ResidualScheme>,
    #[serde(default)]
    pub final_loss: Option<f64>,
    #[serde(default)]
    pub params: Vec<f64>,
}

/// A loaded checkpoint, usable as a right-hand side.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Network(NetworkParams),
    Exact(TrueSystem),
}

impl VectorField for Model {
    fn dim(&self) -> usize {
        match self {
            Model::Network(p) => p.state_dim(),
            Model::Exact(s) => s.dim(),
        }
    }

    fn eval(&self, state: &[f64], t: f64) -> Result<Vec<f64>> {
        match self {
            Model::Network(p) => p.eval(state, t),
            Model::Exact(s) => s.eval(state, t),
        }
    }
}

impl Checkpoint {
    pub fn network(params: &NetworkParams, seed: u64, scheme: ResidualScheme, system: Option<TrueSystem>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            model: ModelKind::Network,
            system,
            widths: params.widths().to_vec(),
            autonomous: params.autonomous(),
            seed: Some(seed),
            scheme: Some(scheme),
            final_loss: None,
            params: params.flatten(),
        }
    }

    pub fn exact(system: TrueSystem) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            model: ModelKind::Exact,
            system: Some(system),
            widths: Vec::new(),
            autonomous: true,
            seed: None,
            scheme: None,
            final_loss: None,
            params: Vec::new(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        match self.model {
            ModelKind::Exact => self
                .system
                .map(Model::Exact)
                .ok_or_else(|| Error::config("exact checkpoint does not name its system")),
            ModelKind::Network => {
                let expected = crate::network::param_count(&self.widths);
                if self.params.len() != expected {
                    return Err(Error::config(format!(
                        "checkpoint has {} parameters but widths {:?} need {expected}",
                        self.params.len(),
                        self.widths
                    )));
                }
                let p = NetworkParams::unflatten(&self.params, &self.widths)?;
                if p.autonomous() != self.autonomous {
                    return Err(Error::config(format!(
                        "checkpoint autonomous flag {} disagrees with widths {:?}",
                        self.autonomous, self.widths
                    )));
                }
                Ok(Model::Network(p))
            }
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, to_json(self).as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let c: Checkpoint =
            serde_json::from_str(&read_text(path)?).map_err(|e| parse_err(path, e.line(), e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(parse_err(path, 1, format!("unsupported checkpoint format `{}`", c.format)));
        }
        Ok(c)
    }
}

/// Loss history CSV. The `seconds` column is left empty unless
/// `with_time`, keeping reruns byte-identical.
pub fn history_to_csv(history: &[LossReport], with_time: bool) -> String {
    let mut out = String::from("step,phase,loss,grad_norm,seconds\n");
    for r in history {
        let secs = if with_time {
            format!("{:.3}", r.seconds)
        } else {
            String::new()
        };
        let _ = writeln!(out, "{},{},{},{},{secs}", r.step, r.phase, num(r.loss), num(r.grad_norm));
    }
    out
}

/// Sidecar written next to a trajectory CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub dim: usize,
    pub points: usize,
    pub has_truth: bool,
    pub metric_rel: Option<f64>,
    pub metric_abs: Option<f64>,
    pub diverged_at: Option<f64>,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

/// Columns `t, true_1..true_d, pred_1..pred_d`; the `true_*` columns are
/// omitted when `result.true_states` is empty.
pub fn trajectory_to_csv(result: &TrajectoryResult) -> String {
    let d = result.predicted_states.first().map_or(0, Vec::len);
    let has_truth = !result.true_states.is_empty();
    let mut out = String::from("t");
    if has_truth {
        (1..=d).for_each(|i| {
            let _ = write!(out, ",true_{i}");
        });
    }
    (1..=d).for_each(|i| {
        let _ = write!(out, ",pred_{i}");
    });
    out.push('\n');
    for (k, t) in result.times.iter().enumerate() {
        out.push_str(&num(*t));
        if has_truth {
            result.true_states[k].iter().for_each(|v| {
                let _ = write!(out, ",{}", num(*v));
            });
        }
        result.predicted_states[k].iter().for_each(|v| {
            let _ = write!(out, ",{}", num(*v));
        });
        out.push('\n');
    }
    out
}

pub fn write_trajectory(result: &TrajectoryResult, path: &Path, provenance: serde_json::Value) -> Result<()> {
    let meta = TrajectoryMeta {
        dim: result.predicted_states.first().map_or(0, Vec::len),
        points: result.times.len(),
        has_truth: !result.true_states.is_empty(),
        metric_rel: result.metric_rel,
        metric_abs: result.metric_abs,
        diverged_at: result.diverged_at,
        provenance,
    };
    write_atomic(path, trajectory_to_csv(result).as_bytes())?;
    write_atomic(&sidecar_path(path), to_json(&meta).as_bytes())
}

/// Reads a trajectory CSV and its sidecar back.
pub fn read_trajectory(path: &Path) -> Result<TrajectoryResult> {
    let side = sidecar_path(path);
    let meta: TrajectoryMeta =
        serde_json::from_str(&read_text(&side)?).map_err(|e| parse_err(&side, e.line(), e.to_string()))?;
    let text = read_text(path)?;
    let d = meta.dim;
    let width = 1 + d + if meta.has_truth { d } else { 0 };
    let mut times = Vec::new();
    let mut true_states = Vec::new();
    let mut predicted_states = Vec::new();
    for (i, row) in text.lines().enumerate().skip(1) {
        let vals = row
            .split(',')
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        if vals.len() != width {
            return Err(parse_err(path, i + 1, format!("expected {width} fields, found {}", vals.len())));
        }
        times.push(vals[0]);
        if meta.has_truth {
            true_states.push(vals[1..=d].to_vec());
        }
        predicted_states.push(vals[width - d..].to_vec());
    }
    Ok(TrajectoryResult {
        times,
        true_states,
        predicted_states,
        metric_rel: meta.metric_rel,
        metric_abs: meta.metric_abs,
        diverged_at: meta.diverged_at,
    })
}

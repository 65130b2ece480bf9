//! Run artifacts: metrics CSV, snapshots, final state, manifest, comparisons.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::engine::{BaselineOutput, RoundMetrics, RunOutput};
use crate::error::{Error, Result};
use crate::format_float;
use crate::hierarchy::Snapshot;

pub const METRICS_FILE: &str = "metrics.csv";
pub const BASELINE_METRICS_FILE: &str = "metrics_fedavg.csv";
pub const FINAL_STATE_FILE: &str = "final_state.json";
pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const SNAPSHOT_DIR: &str = "snapshots";

/// Column names in field order. `levels == 0` drops every
/// hierarchy-dependent column (the flat baseline layout).
pub fn metrics_header(levels: usize) -> Vec<String> {
    let mut cols: Vec<String> =
        ["round", "alpha", "beta", "gamma", "resistance", "stage", "participants", "mean_train_loss", "mean_personal_acc"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    cols.extend((1..=levels).map(|k| format!("level_{k}_acc")));
    cols.push("global_acc".into());
    if levels > 0 {
        cols.extend((1..=levels).map(|k| format!("groups_level_{k}")));
        cols.extend(["group_changes", "eliminations", "mean_group_distance_l1"].map(String::from));
    }
    cols
}

fn opt_float(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

/// CSV text for a metrics series, one row per round.
pub fn metrics_csv(metrics: &[RoundMetrics]) -> String {
    let levels = metrics.first().map_or(0, |m| m.level_acc.len());
    let mut out = metrics_header(levels).join(",");
    out.push('\n');
    for m in metrics {
        let mut row = vec![
            m.round.to_string(),
            format_float(m.alpha),
            format_float(m.beta),
            format_float(m.gamma),
            format_float(m.resistance),
            m.stage.map_or("fedavg", |s| s.as_str()).to_string(),
            m.participants.to_string(),
            format_float(m.mean_train_loss),
            format_float(m.mean_personal_acc),
        ];
        row.extend(m.level_acc.iter().map(|v| opt_float(*v)));
        row.push(format_float(m.global_acc));
        if levels > 0 {
            row.extend(m.groups_per_level.iter().map(|g| g.map(|v| v.to_string()).unwrap_or_default()));
            row.push(m.group_changes.to_string());
            row.push(m.eliminations.to_string());
            row.push(opt_float(m.mean_group_distance));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub id: usize,
    pub group: Option<usize>,
    pub params_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    pub rounds: usize,
    pub agents: Vec<AgentSummary>,
    pub hierarchy: Option<Snapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub population_seed: Option<u64>,
    pub config: RunConfig,
}

/// Writes every artifact of a run into `dir`, replacing earlier contents
/// of the same names.
pub fn write_run_dir(dir: &Path, cfg: &RunConfig, out: &RunOutput, baseline: Option<&BaselineOutput>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(METRICS_FILE), &metrics_csv(&out.metrics))?;
    let snap_dir = dir.join(SNAPSHOT_DIR);
    if snap_dir.exists() {
        fs::remove_dir_all(&snap_dir).map_err(|e| Error::io(&snap_dir, e))?;
    }
    fs::create_dir_all(&snap_dir).map_err(|e| Error::io(&snap_dir, e))?;
    for s in &out.snapshots {
        write_json(&snap_dir.join(format!("round_{:06}.json", s.round)), s)?;
    }
    let rounds = out.metrics.len();
    let state = FinalState {
        rounds,
        agents: out
            .params
            .iter()
            .enumerate()
            .map(|(id, p)| AgentSummary { id, group: out.hierarchy.as_ref().and_then(|h| h.group_of(id)), params_norm: p.norm() })
            .collect(),
        hierarchy: out.hierarchy.as_ref().map(|h| h.snapshot(rounds.saturating_sub(1))),
    };
    write_json(&dir.join(FINAL_STATE_FILE), &state)?;
    let manifest = RunManifest {
        version: crate::VERSION.to_string(),
        seed: cfg.run.seed,
        population_seed: cfg.population.as_ref().map(|p| p.seed),
        config: cfg.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    let base_path = dir.join(BASELINE_METRICS_FILE);
    match baseline {
        Some(b) => write(&base_path, &metrics_csv(&b.metrics))?,
        None if base_path.exists() => fs::remove_file(&base_path).map_err(|e| Error::io(&base_path, e))?,
        None => {}
    }
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

/// A metrics CSV read back as named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl MetricsTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let columns = reader.headers()?.iter().map(String::from).collect();
        let rows = reader.records().map(|r| r.map(|r| r.iter().map(String::from).collect())).collect::<std::result::Result<_, _>>()?;
        Ok(MetricsTable { columns, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Numeric column; empty cells read as NaN.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self.columns.iter().position(|c| c == name).ok_or_else(|| Error::Schema(format!("missing column {name:?}")))?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let cell = r.get(idx).map(String::as_str).unwrap_or("");
                if cell.is_empty() {
                    return Ok(f64::NAN);
                }
                cell.parse().map_err(|_| Error::Schema(format!("row {}: column {name:?} is not numeric: {cell:?}", i + 1)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub round: usize,
    pub personal_a: f64,
    pub personal_b: f64,
    pub personal_delta: f64,
    pub global_a: f64,
    pub global_b: f64,
    pub global_delta: f64,
}

/// Per-round differences `a - b` of personalized and global accuracy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<DeltaRow>,
}

pub fn compare(a: &MetricsTable, b: &MetricsTable) -> Result<Comparison> {
    let get =
        |t: &MetricsTable| -> Result<[Vec<f64>; 3]> { Ok([t.column("round")?, t.column("mean_personal_acc")?, t.column("global_acc")?]) };
    let [ra, pa, ga] = get(a)?;
    let [_, pb, gb] = get(b)?;
    if pa.len() != pb.len() {
        return Err(Error::Schema(format!("round count mismatch: {} vs {}", pa.len(), pb.len())));
    }
    let rows = (0..pa.len())
        .map(|i| DeltaRow {
            round: ra[i] as usize,
            personal_a: pa[i],
            personal_b: pb[i],
            personal_delta: pa[i] - pb[i],
            global_a: ga[i],
            global_b: gb[i],
            global_delta: ga[i] - gb[i],
        })
        .collect();
    Ok(Comparison { rows })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,personal_a,personal_b,personal_delta,global_a,global_b,global_delta\n");
        for r in &self.rows {
            let cells = [r.personal_a, r.personal_b, r.personal_delta, r.global_a, r.global_b, r.global_delta];
            out.push_str(&r.round.to_string());
            for c in cells {
                out.push(',');
                out.push_str(&format_float(c));
            }
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> String {
        let Some(last) = self.rows.last() else {
            return "no rounds to compare\n".into();
        };
        let mut s = format!("rounds compared: {}\n", self.rows.len());
        s += &format!("final round: {}\n", last.round);
        s += &format!(
            "final mean personalized accuracy: a={:.4} b={:.4} delta={:+.4}\n",
            last.personal_a, last.personal_b, last.personal_delta
        );
        s += &format!("final global accuracy: a={:.4} b={:.4} delta={:+.4}\n", last.global_a, last.global_b, last.global_delta);
        let max_abs = self.rows.iter().map(|r| r.personal_delta.abs()).fold(0.0, f64::max);
        s += &format!("max |personalized delta|: {max_abs:.4}\n");
        s
    }
}

/// Column -> values view used by callers that want the whole table.
pub fn table_columns(t: &MetricsTable) -> BTreeMap<String, Vec<String>> {
    t.columns.iter().enumerate().map(|(i, c)| (c.clone(), t.rows.iter().map(|r| r.get(i).cloned().unwrap_or_default()).collect())).collect()
}

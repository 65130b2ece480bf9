//! Synthetic non-i.i.d. agent populations and CSV shard persistence.
//!
//! Every task cluster uses the same `C` class centers, placed on a regular
//! simplex with mutual distance `separation`, but cluster `t` assigns class `c`
//! to vertex `(c + t) mod C`. Clusters therefore disagree about which label a
//! region of feature space carries, and a single shared linear model cannot
//! serve all of them. Label proportions per agent are Dirichlet-skewed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format_float;
use crate::model::{DatasetShard, LabeledExample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    pub num_agents: usize,
    pub num_clusters: usize,
    pub features: usize,
    pub classes: usize,
    pub samples_min: usize,
    pub samples_max: usize,
    /// Distance between class centers, in within-cluster standard deviations.
    pub separation: f64,
    /// Dirichlet concentration of per-agent label proportions.
    pub label_concentration: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            num_agents: 20,
            num_clusters: 2,
            features: 4,
            classes: 3,
            samples_min: 100,
            samples_max: 200,
            separation: 8.0,
            label_concentration: 0.3,
            test_fraction: 0.25,
            seed: 1,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config(format!("population.{field}"), reason));
        if self.num_agents == 0 {
            return bad("num_agents", "must be positive");
        }
        if self.num_clusters == 0 {
            return bad("num_clusters", "must be at least 1");
        }
        if self.classes < 2 {
            return bad("classes", "must be at least 2");
        }
        if self.num_clusters > self.classes {
            return bad("num_clusters", "cannot exceed classes (one label rotation per cluster)");
        }
        if self.features < self.classes {
            return bad("features", "must be >= classes to hold the center simplex");
        }
        if self.samples_min < 2 || self.samples_min > self.samples_max {
            return bad("samples_min", "need 2 <= samples_min <= samples_max");
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return bad("separation", "must be positive");
        }
        if !(self.label_concentration > 0.0 && self.label_concentration.is_finite()) {
            return bad("label_concentration", "must be positive");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction", "must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Train/test data held by one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentData {
    pub id: usize,
    pub train: DatasetShard,
    pub test: DatasetShard,
}

/// Ground-truth task cluster per agent, indexed by agent id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlantedAssignment(pub Vec<usize>);

/// Class-conditional center for `class` within task cluster `cluster`.
pub fn class_center(cfg: &PopulationConfig, cluster: usize, class: usize) -> Vec<f64> {
    let c = cfg.classes;
    let scale = cfg.separation / std::f64::consts::SQRT_2;
    let vertex = (class + cluster) % c;
    let mut v = vec![0.0; cfg.features];
    for (j, x) in v.iter_mut().enumerate().take(c) {
        // centroid of the simplex sits at the origin
        *x = if j == vertex { scale } else { 0.0 } - scale / c as f64;
    }
    v
}

fn dirichlet(rng: &mut ChaCha8Rng, concentration: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = p.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        p.iter_mut().for_each(|v| *v /= sum);
    } else {
        // every draw underflowed: all mass on one class
        p.fill(0.0);
        p[rng.random_range(0..k)] = 1.0;
    }
    p
}

/// Draws the planted population. Agent `i` belongs to cluster `i % T`.
pub fn generate_population(cfg: &PopulationConfig) -> Result<(Vec<AgentData>, PlantedAssignment)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers: Vec<Vec<Vec<f64>>> = (0..cfg.num_clusters).map(|t| (0..cfg.classes).map(|c| class_center(cfg, t, c)).collect()).collect();
    let mut agents = Vec::with_capacity(cfg.num_agents);
    let mut assignment = Vec::with_capacity(cfg.num_agents);
    for id in 0..cfg.num_agents {
        let cluster = id % cfg.num_clusters;
        assignment.push(cluster);
        let n = rng.random_range(cfg.samples_min..=cfg.samples_max);
        let props = dirichlet(&mut rng, cfg.label_concentration, cfg.classes);
        let labels = WeightedIndex::new(&props).expect("normalized proportions");
        let examples: Vec<LabeledExample> = (0..n)
            .map(|_| {
                let label = labels.sample(&mut rng);
                let features = centers[cluster][label].iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect();
                LabeledExample { features, label }
            })
            .collect();
        let n_test = ((n as f64 * cfg.test_fraction).round() as usize).clamp(1, n - 1);
        let mut train = examples;
        let test = train.split_off(n - n_test);
        agents.push(AgentData { id, train: DatasetShard::new(id, train), test: DatasetShard::new(id, test) });
    }
    Ok((agents, PlantedAssignment(assignment)))
}

/// Column layout of a CSV shard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub feature_columns: Vec<String>,
    pub label_column: String,
}

impl CsvSchema {
    /// `f0..f{F-1}` plus `label`, the layout written by [`write_shard_csv`].
    pub fn standard(features: usize) -> Self {
        CsvSchema { feature_columns: (0..features).map(|i| format!("f{i}")).collect(), label_column: "label".to_string() }
    }
}

fn parse_label(raw: &str) -> Option<usize> {
    let raw = raw.trim();
    if let Ok(v) = raw.parse::<usize>() {
        return Some(v);
    }
    let v: f64 = raw.parse().ok()?;
    (v >= 0.0 && v.fract() == 0.0 && v < usize::MAX as f64).then_some(v as usize)
}

/// Reads a shard from a headed CSV file, preserving row order.
pub fn load_csv(path: &Path, schema: &CsvSchema, owner: usize) -> Result<DatasetShard> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(_) => return Err(Error::NoExamples),
    };
    if headers.is_empty() {
        return Err(Error::NoExamples);
    }
    let column = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Schema(format!("{}: missing column {name:?}", path.display())))
    };
    let feature_idx = schema.feature_columns.iter().map(|c| column(c)).collect::<Result<Vec<_>>>()?;
    let label_idx = column(&schema.label_column)?;

    let malformed = |row: usize, reason: String| Error::MalformedRow { path: path.to_path_buf(), row, reason };
    let mut examples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // 1-based data row number, header excluded
        let row = i + 1;
        let record = record.map_err(|e| malformed(row, e.to_string()))?;
        let mut features = Vec::with_capacity(feature_idx.len());
        for &j in &feature_idx {
            let raw = record.get(j).ok_or_else(|| malformed(row, "missing field".into()))?;
            let v: f64 = raw.trim().parse().map_err(|_| malformed(row, format!("unparsable feature {raw:?}")))?;
            if !v.is_finite() {
                return Err(malformed(row, format!("non-finite feature {raw:?}")));
            }
            features.push(v);
        }
        let raw = record.get(label_idx).ok_or_else(|| malformed(row, "missing label".into()))?;
        let label = parse_label(raw).ok_or_else(|| malformed(row, format!("non-integer label {raw:?}")))?;
        examples.push(LabeledExample { features, label });
    }
    if examples.is_empty() {
        return Err(Error::NoExamples);
    }
    Ok(DatasetShard::new(owner, examples))
}

pub fn write_shard_csv(path: &Path, shard: &DatasetShard, features: usize) -> Result<()> {
    let mut out = String::new();
    let schema = CsvSchema::standard(features);
    out.push_str(&schema.feature_columns.join(","));
    out.push_str(",label\n");
    for ex in &shard.examples {
        for v in &ex.features {
            out.push_str(&format_float(*v));
            out.push(',');
        }
        out.push_str(&ex.label.to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub cluster: usize,
    pub train_file: String,
    pub test_file: String,
}

/// `manifest.json` of a data directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub config: PopulationConfig,
    pub seed: u64,
    pub features: usize,
    pub classes: usize,
    pub assignment: PlantedAssignment,
    pub agents: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Persists a population as one train and one test CSV per agent plus a manifest.
pub fn write_data_dir(dir: &Path, cfg: &PopulationConfig, agents: &[AgentData], assignment: &PlantedAssignment) -> Result<DataManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(agents.len());
    for a in agents {
        let train_file = format!("agent_{:04}_train.csv", a.id);
        let test_file = format!("agent_{:04}_test.csv", a.id);
        write_shard_csv(&dir.join(&train_file), &a.train, cfg.features)?;
        write_shard_csv(&dir.join(&test_file), &a.test, cfg.features)?;
        entries.push(ManifestEntry { id: a.id, cluster: assignment.0[a.id], train_file, test_file });
    }
    let manifest = DataManifest {
        config: cfg.clone(),
        seed: cfg.seed,
        features: cfg.features,
        classes: cfg.classes,
        assignment: assignment.clone(),
        agents: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

/// Loads a directory written by [`write_data_dir`].
pub fn load_data_dir(dir: &Path) -> Result<(Vec<AgentData>, DataManifest)> {
    let path: PathBuf = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DataManifest = serde_json::from_str(&text)?;
    let schema = CsvSchema::standard(manifest.features);
    let agents = manifest
        .agents
        .iter()
        .map(|e| {
            Ok(AgentData {
                id: e.id,
                train: load_csv(&dir.join(&e.train_file), &schema, e.id)?,
                test: load_csv(&dir.join(&e.test_file), &schema, e.id)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((agents, manifest))
}

//! Simulator for self-organizing hierarchical federated learning.
//!
//! A population of agents with skewed local data trains personalized models
//! regularized toward the models of the groups they belong to, while the
//! groups themselves form a multi-level hierarchy by clustering agents'
//! parameters and share knowledge by count-weighted averaging up the tree.
//! A flat federated-averaging baseline runs on the same data for comparison.
//!
//! Module map:
//! - [`model`]: softmax / one-hidden-layer classifiers, loss, gradient, accuracy
//! - [`data`]: planted-cluster populations and CSV shards
//! - [`schedule`]: the global plasticity/stability schedule
//! - [`hierarchy`]: group tree construction and restructuring
//! - [`specialized`]: proximal local objective and its SGD solver
//! - [`generalization`]: bottom-up hierarchical averaging
//! - [`engine`]: the round loop, metrics and the FedAvg baseline
//! - [`config`], [`report`]: run configuration files and output artifacts

pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod generalization;
pub mod hierarchy;
mod linkage;
pub mod model;
pub mod report;
pub mod schedule;
pub mod specialized;

pub use error::{Error, Result};
pub use model::{DatasetShard, LabeledExample, ModelKind, ModelParams, ModelSpec};
pub use schedule::{MetaLawSchedule, Stage};

/// Version string recorded in run manifests.
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Locale-independent float text with 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

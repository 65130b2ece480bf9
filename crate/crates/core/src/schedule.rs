//! Global plasticity-to-stability controller.
//!
//! `alpha` rises toward `alpha_end`, `beta` and `gamma` decay geometrically, and
//! group-change resistance grows toward 1 once the adaptation phase starts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaLawSchedule {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub beta_start: f64,
    pub beta_decay: f64,
    pub gamma_start: f64,
    pub gamma_decay: f64,
    pub warmup_rounds: usize,
    pub restructure_period: usize,
    /// Round at which resistance starts to grow.
    pub adapt_round: usize,
    /// First round of the high-specialization stage.
    pub special_round: usize,
    pub max_levels: usize,
    /// Dendrogram cut height for each level, strictly increasing.
    pub thresholds: Vec<f64>,
    pub resistance_start: f64,
    pub resistance_growth: f64,
    /// Agents farther than `elimination_factor * thresholds[0]` from their group are re-placed.
    pub elimination_factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Warmup,
    Construction,
    Adaptation,
    HighSpecialization,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Construction => "construction",
            Stage::Adaptation => "adaptation",
            Stage::HighSpecialization => "high-specialization",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Default for MetaLawSchedule {
    fn default() -> Self {
        MetaLawSchedule {
            alpha_start: 0.8,
            alpha_end: 1.0,
            beta_start: 1.0,
            beta_decay: 0.95,
            gamma_start: 1.0,
            gamma_decay: 0.97,
            warmup_rounds: 3,
            restructure_period: 1,
            adapt_round: 10,
            special_round: 30,
            max_levels: 2,
            thresholds: vec![1.6, 4.0],
            resistance_start: 0.1,
            resistance_growth: 0.8,
            elimination_factor: 3.0,
        }
    }
}

fn unit_open_closed(v: f64) -> bool {
    v > 0.0 && v <= 1.0
}

impl MetaLawSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config(format!("schedule.{field}"), reason));
        if !(self.alpha_start > 0.0 && self.alpha_start.is_finite()) {
            return bad("alpha_start", "must be positive");
        }
        if !(self.alpha_end >= self.alpha_start && self.alpha_end.is_finite()) {
            return bad("alpha_end", "must be >= alpha_start");
        }
        if !(self.beta_start >= 0.0 && self.beta_start.is_finite()) {
            return bad("beta_start", "must be nonnegative");
        }
        if !unit_open_closed(self.beta_decay) {
            return bad("beta_decay", "must lie in (0, 1]");
        }
        if !unit_open_closed(self.gamma_start) {
            return bad("gamma_start", "must lie in (0, 1]");
        }
        if !unit_open_closed(self.gamma_decay) {
            return bad("gamma_decay", "must lie in (0, 1]");
        }
        if self.restructure_period == 0 {
            return bad("restructure_period", "must be at least 1");
        }
        if self.adapt_round >= self.special_round {
            return bad("adapt_round", "must be < special_round");
        }
        if self.max_levels == 0 {
            return bad("max_levels", "must be at least 1");
        }
        if self.thresholds.len() != self.max_levels {
            return bad("thresholds", "need exactly one threshold per level");
        }
        if self.thresholds.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return bad("thresholds", "must be finite and nonnegative");
        }
        if self.thresholds.windows(2).any(|p| p[0] >= p[1]) {
            return bad("thresholds", "must be strictly increasing");
        }
        if !(0.0..1.0).contains(&self.resistance_start) {
            return bad("resistance_start", "must lie in [0, 1)");
        }
        if !unit_open_closed(self.resistance_growth) {
            return bad("resistance_growth", "must lie in (0, 1]");
        }
        if self.elimination_factor.is_nan() || self.elimination_factor <= 1.0 {
            return bad("elimination_factor", "must exceed 1");
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_end - (self.alpha_end - self.alpha_start) * self.beta_decay.powi(t as i32)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta_start * self.beta_decay.powi(t as i32)
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma_start * self.gamma_decay.powi(t as i32)
    }

    pub fn stage(&self, t: usize) -> Stage {
        let w = self.warmup_rounds;
        if t < w {
            Stage::Warmup
        } else if t == w {
            Stage::Construction
        } else if t < self.special_round {
            Stage::Adaptation
        } else {
            Stage::HighSpecialization
        }
    }

    pub fn resistance(&self, t: usize) -> f64 {
        if t < self.adapt_round {
            self.resistance_start
        } else {
            let steps = (t - self.adapt_round) as i32;
            // same as 1 - (1 - r0) * g^steps, arranged to be exact at steps = 0
            let r = self.resistance_start + (1.0 - self.resistance_start) * (1.0 - self.resistance_growth.powi(steps));
            r.min(1.0 - f64::EPSILON / 2.0)
        }
    }

    pub fn restructure_due(&self, t: usize) -> bool {
        t >= self.warmup_rounds && (t - self.warmup_rounds).is_multiple_of(self.restructure_period)
    }

    /// Level-1 cut height, the unit for outlier elimination.
    pub fn base_threshold(&self) -> f64 {
        self.thresholds[0]
    }
}

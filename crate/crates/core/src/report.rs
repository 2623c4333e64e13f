//! Per-solve diagnostics shared by both stages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Energies and flags of one stage on one frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub stage: String,
    pub frame: usize,
    /// Merit energy before the first step and after every step.
    pub energies: Vec<f64>,
    /// Per-term energies, aligned with `energies`.
    pub terms: Vec<BTreeMap<String, f64>>,
    /// Condition name to occurrence count (damping, breakdowns, ...).
    pub flags: BTreeMap<String, usize>,
    /// Norm of each linear-solve step before any halving.
    pub step_norms: Vec<f64>,
    pub seconds: f64,
}

impl SolveReport {
    pub fn new(stage: &str, frame: usize) -> Self {
        SolveReport {
            stage: stage.to_string(),
            frame,
            ..Default::default()
        }
    }

    pub fn flag(&mut self, name: &str) {
        self.flag_n(name, 1);
    }

    pub fn flag_n(&mut self, name: &str, n: usize) {
        if n > 0 {
            *self.flags.entry(name.to_string()).or_insert(0) += n;
        }
    }

    pub fn count(&self, name: &str) -> usize {
        self.flags.get(name).copied().unwrap_or(0)
    }

    /// Records a merit value with its per-term breakdown.
    pub fn record(&mut self, merit: f64, terms: BTreeMap<String, f64>) {
        self.energies.push(merit);
        self.terms.push(terms);
    }

    pub fn initial_energy(&self) -> f64 {
        self.energies.first().copied().unwrap_or(0.0)
    }

    pub fn final_energy(&self) -> f64 {
        self.energies.last().copied().unwrap_or(0.0)
    }

    /// True when no recorded energy exceeds its predecessor.
    pub fn is_monotone(&self) -> bool {
        self.energies.windows(2).all(|w| w[1] <= w[0])
    }
}

//! Evaluation metrics records and their CSV form.
//!
//! One record per evaluation window. Scenario-specific columns are left
//! empty where they do not apply (captures on Cooperative Navigation,
//! distances on Predator-Prey). Floats are written with shortest
//! round-trip formatting, so reading a file back yields the numbers that
//! were written.

use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const METRICS_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema: u32,
    pub scenario: String,
    pub mode: String,
    pub seed: u64,
    /// Training episodes completed when this evaluation ran.
    pub episode: u64,
    pub eval_episodes: u32,
    /// Sum of agent returns on Cooperative Navigation, the shared global
    /// return on Predator-Prey.
    pub mean_return: f64,
    /// Predator-Prey: prey captures per episode.
    pub captures: Option<f64>,
    /// Cooperative Navigation: mean landmark-to-nearest-agent distance.
    pub avg_dist: Option<f64>,
    /// Cooperative Navigation: percentage of agent-steps in collision.
    pub collision_rate: Option<f64>,
    /// Mean relative reconstruction error across agents and steps.
    pub recon_err: f64,
    /// Mean total allocated bandwidth per round.
    pub mean_budget_total: f64,
    /// Mean critic TD loss over the window's updates (empty before the
    /// warmup finishes).
    pub critic_loss: Option<f64>,
    /// Mean critic value of the actor objective over the window's updates.
    pub actor_q: Option<f64>,
}

/// Append records, creating the file (with a header) on first use.
pub fn append_records(path: &Path, records: &[MetricsRecord]) -> Result<(), MetricsError> {
    let fresh = !path.exists();
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(fresh)
        .from_writer(file);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>, MetricsError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

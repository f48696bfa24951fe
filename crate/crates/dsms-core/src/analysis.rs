//! Communication-analysis dumps and their aggregation.
//!
//! Evaluation episodes emit one line-delimited JSON record per step with
//! the scheduler's utilities, weights and budgets, the per-agent rewards
//! and reconstruction errors, and (on Predator-Prey) each predator's
//! distance to the prey. This module reads those dumps back and produces
//! plot-ready per-step and per-block summary tables, plus the rank
//! correlation between proximity and granted bandwidth.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DUMP_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("dump parse error in {path} line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("empty dump set")]
    Empty,
    #[error("invalid block spec {0:?}")]
    BadBlocks(String),
}

/// One communication round of one evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub schema: u32,
    pub episode: u64,
    /// 1-indexed step within the episode.
    pub step: u32,
    pub utilities: Vec<f64>,
    pub weights: Vec<f64>,
    pub budgets: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Relative reconstruction error of each agent's own message after the
    /// round trip through the wire.
    pub recon_err: Vec<f64>,
    /// Predator-Prey only: per-predator distance to the prey.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dist_to_prey: Option<Vec<f64>>,
}

pub fn write_dumps(path: &Path, records: &[DumpRecord]) -> Result<(), AnalysisError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dumps(path: &Path) -> Result<Vec<DumpRecord>, AnalysisError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DumpRecord = serde_json::from_str(&line).map_err(|e| AnalysisError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Per-step means across episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSummary {
    pub step: u32,
    pub episodes: usize,
    pub mean_budget: Vec<f64>,
    pub mean_weight: Vec<f64>,
    /// Predator-Prey only.
    pub mean_dist: Option<Vec<f64>>,
}

#[allow(clippy::needless_range_loop)] // per-agent accumulators share the index
pub fn per_step_summary(records: &[DumpRecord]) -> Result<Vec<StepSummary>, AnalysisError> {
    if records.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let n = records[0].budgets.len();
    let max_step = records.iter().map(|r| r.step).max().unwrap_or(0);
    let mut out = Vec::new();
    for step in 1..=max_step {
        let rows: Vec<&DumpRecord> = records.iter().filter(|r| r.step == step).collect();
        if rows.is_empty() {
            continue;
        }
        let mut mean_budget = vec![0.0; n];
        let mut mean_weight = vec![0.0; n];
        let mut dist_acc = vec![0.0; n];
        let mut has_dist = true;
        for r in &rows {
            for i in 0..n {
                mean_budget[i] += r.budgets[i] as f64;
                mean_weight[i] += r.weights[i];
            }
            match &r.dist_to_prey {
                Some(d) => {
                    for i in 0..n {
                        dist_acc[i] += d[i];
                    }
                }
                None => has_dist = false,
            }
        }
        let count = rows.len() as f64;
        for i in 0..n {
            mean_budget[i] /= count;
            mean_weight[i] /= count;
            dist_acc[i] /= count;
        }
        out.push(StepSummary {
            step,
            episodes: rows.len(),
            mean_budget,
            mean_weight,
            mean_dist: has_dist.then_some(dist_acc),
        });
    }
    Ok(out)
}

/// Inclusive 1-indexed step range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub start: u32,
    pub end: u32,
}

/// Parse `"1-4,5-15,16-20"` into blocks.
pub fn parse_blocks(spec: &str) -> Result<Vec<Block>, AnalysisError> {
    let mut out = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        let (a, b) = part
            .split_once('-')
            .ok_or_else(|| AnalysisError::BadBlocks(spec.to_string()))?;
        let start: u32 = a
            .trim()
            .parse()
            .map_err(|_| AnalysisError::BadBlocks(spec.to_string()))?;
        let end: u32 = b
            .trim()
            .parse()
            .map_err(|_| AnalysisError::BadBlocks(spec.to_string()))?;
        if start == 0 || end < start {
            return Err(AnalysisError::BadBlocks(spec.to_string()));
        }
        out.push(Block { start, end });
    }
    if out.is_empty() {
        return Err(AnalysisError::BadBlocks(spec.to_string()));
    }
    Ok(out)
}

/// The seven Predator-Prey episode blocks used for bandwidth analysis.
pub fn default_pp_blocks() -> Vec<Block> {
    [(1, 4), (5, 15), (16, 20), (21, 24), (25, 35), (36, 46), (47, 50)]
        .into_iter()
        .map(|(start, end)| Block { start, end })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSummary {
    pub block: Block,
    pub mean_budget: Vec<f64>,
    pub mean_dist: Option<Vec<f64>>,
}

#[allow(clippy::needless_range_loop)] // per-agent accumulators share the index
pub fn block_summary(
    records: &[DumpRecord],
    blocks: &[Block],
) -> Result<Vec<BlockSummary>, AnalysisError> {
    if records.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let n = records[0].budgets.len();
    let mut out = Vec::new();
    for block in blocks {
        let rows: Vec<&DumpRecord> = records
            .iter()
            .filter(|r| r.step >= block.start && r.step <= block.end)
            .collect();
        let mut mean_budget = vec![0.0; n];
        let mut dist_acc = vec![0.0; n];
        let mut has_dist = !rows.is_empty();
        for r in &rows {
            for i in 0..n {
                mean_budget[i] += r.budgets[i] as f64;
            }
            match &r.dist_to_prey {
                Some(d) => {
                    for i in 0..n {
                        dist_acc[i] += d[i];
                    }
                }
                None => has_dist = false,
            }
        }
        let count = rows.len().max(1) as f64;
        for i in 0..n {
            mean_budget[i] /= count;
            dist_acc[i] /= count;
        }
        out.push(BlockSummary {
            block: *block,
            mean_budget,
            mean_dist: has_dist.then_some(dist_acc),
        });
    }
    Ok(out)
}

/// Spearman rank correlation with average ranks for ties.
///
/// Returns `None` when either side has no rank variance (fixed budgets,
/// for example, carry no ordering information).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = ranks(x);
    let ry = ranks(y);
    pearson(&rx, &ry)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // Average rank over the tie group, 1-indexed.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &slot in &idx[i..=j] {
            out[slot] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let len = x.len() as f64;
    let mx = x.iter().sum::<f64>() / len;
    let my = y.iter().sum::<f64>() / len;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx <= 0.0 || vy <= 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Per-predator Spearman correlation between negated distance-to-prey and
/// granted budget, pooled over every step of every episode in `records`.
pub fn budget_distance_spearman(records: &[DumpRecord]) -> Result<Vec<Option<f64>>, AnalysisError> {
    let with_dist: Vec<&DumpRecord> = records
        .iter()
        .filter(|r| r.dist_to_prey.is_some())
        .collect();
    if with_dist.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let n = with_dist[0].budgets.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let closeness: Vec<f64> = with_dist
            .iter()
            .map(|r| -r.dist_to_prey.as_ref().unwrap()[i])
            .collect();
        let budgets: Vec<f64> = with_dist.iter().map(|r| r.budgets[i] as f64).collect();
        out.push(spearman(&closeness, &budgets));
    }
    Ok(out)
}

/// Write the per-step table as plot-ready CSV.
pub fn write_step_csv(path: &Path, summary: &[StepSummary]) -> Result<(), AnalysisError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,agent,episodes,mean_budget,mean_weight,mean_dist")?;
    for row in summary {
        for agent in 0..row.mean_budget.len() {
            let dist = row
                .mean_dist
                .as_ref()
                .map(|d| d[agent].to_string())
                .unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{}",
                row.step, agent, row.episodes, row.mean_budget[agent], row.mean_weight[agent], dist
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Write the per-block table as plot-ready CSV.
pub fn write_block_csv(path: &Path, summary: &[BlockSummary]) -> Result<(), AnalysisError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "block_start,block_end,agent,mean_budget,mean_dist")?;
    for row in summary {
        for agent in 0..row.mean_budget.len() {
            let dist = row
                .mean_dist
                .as_ref()
                .map(|d| d[agent].to_string())
                .unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{}",
                row.block.start, row.block.end, agent, row.mean_budget[agent], dist
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

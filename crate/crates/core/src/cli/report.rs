//! Credit report and its on-disk artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::Aggregation;
use super::{AnalysisError, Result};
use crate::credit::{Heatmap, KernelCredit, Sensitivity};
use crate::linalg::Matrix;
use crate::model::{BlockFamily, Category, Shape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block_id: usize,
    /// Layer kinds joined by `+`.
    pub name: String,
    pub family: BlockFamily,
    pub layer_range: [usize; 2],
    pub category: Category,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Embedding dimension used, and before the cap was applied.
    pub d: usize,
    pub d_uncapped: usize,
    /// Generalized absolute determinant; absent when not representable as a
    /// finite float (`log10_credit` is always present).
    pub gen_absdet: Option<f64>,
    pub log10_credit: f64,
    pub degenerate: bool,
    /// Singular values that entered the determinant.
    pub factors: usize,
    pub credit_share: f64,
    pub rank: usize,
    /// Present only when all block operators are square of one order.
    pub sensitivity: Option<Sensitivity>,
    /// Per repeat: relative residual of the regression.
    pub fit_residuals: Vec<f64>,
    /// Per repeat: rank of the snapshot matrix.
    pub snapshot_ranks: Vec<usize>,
    /// Per repeat: ‖b·a − I‖_F of the alignment pair.
    pub alignment_residuals: Vec<f64>,
    /// Per repeat: trajectories that stayed finite.
    pub seeds_used: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCredits {
    pub block_id: usize,
    pub channels: Vec<KernelCredit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub model: String,
    pub input_shape: Shape,
    pub dataset: String,
    pub master_seed: u64,
    pub repeats: usize,
    pub sample_count: usize,
    pub d_cap: usize,
    pub aggregation: Aggregation,
    pub pinv_tolerance: Option<f64>,
    pub determinant_tolerance: Option<f64>,
    pub tie_tolerance: f64,
    /// Seed of each repeat's generator.
    pub repeat_seeds: Vec<u64>,
    /// How kernel credits are formed.
    pub kernel_credit_method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditReport {
    pub metadata: ReportMetadata,
    pub blocks: Vec<BlockReport>,
    pub kernel_credits: Vec<KernelCredits>,
    /// Composed operator: final output dimension × network input dimension.
    pub feature_weights: Matrix,
    /// Every block had an all-zero operator, so shares fell back to uniform.
    pub uniform_fallback: bool,
}

impl CreditReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| AnalysisError::Config(format!("report: {e}")))
    }
}

/// Files written by [`export_report`], relative to the output directory.
pub const REPORT_FILE: &str = "report.json";
pub const CREDITS_FILE: &str = "credits.csv";
pub const KERNEL_CREDITS_FILE: &str = "kernel_credits.csv";
pub const FEATURE_WEIGHTS_FILE: &str = "feature_weights.csv";

pub fn heatmap_file(output: usize) -> String {
    format!("heatmap_{output}.pgm")
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> AnalysisError + '_ {
    move |source| AnalysisError::Io { path: path.display().to_string(), source }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> AnalysisError + '_ {
    move |e| AnalysisError::Io { path: path.display().to_string(), source: e.into() }
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io(path))?);
    body(&mut w).map_err(io(path))?;
    w.flush().map_err(io(path))
}

fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.serialize(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))
}

/// Writes the report artifacts into `dir` (created if missing) and returns
/// the paths written.
pub fn export_report(report: &CreditReport, heatmaps: &[Heatmap], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut written = Vec::new();

    let path = dir.join(REPORT_FILE);
    write_file(&path, |w| w.write_all(report.to_json().as_bytes()))?;
    written.push(path);

    let path = dir.join(CREDITS_FILE);
    write_csv(
        &path,
        &["block_id", "name", "log10_credit", "share", "rank", "degenerate"],
        report.blocks.iter().map(|b| (b.block_id, &b.name, b.log10_credit, b.credit_share, b.rank, b.degenerate)),
    )?;
    written.push(path);

    let path = dir.join(KERNEL_CREDITS_FILE);
    write_csv(
        &path,
        &["block_id", "channel", "log10_credit", "rank", "degenerate"],
        report
            .kernel_credits
            .iter()
            .flat_map(|k| k.channels.iter().map(move |c| (k.block_id, c.channel, c.log10, c.rank, c.degenerate))),
    )?;
    written.push(path);

    let path = dir.join(FEATURE_WEIGHTS_FILE);
    let fw = &report.feature_weights;
    write_csv(
        &path,
        &["out_idx", "in_idx", "weight"],
        (0..fw.rows()).flat_map(|i| (0..fw.cols()).map(move |j| (i, j, fw[(i, j)]))),
    )?;
    written.push(path);

    for h in heatmaps {
        let path = dir.join(heatmap_file(h.output));
        write_file(&path, |w| h.write_pgm(w))?;
        written.push(path);
    }
    Ok(written)
}

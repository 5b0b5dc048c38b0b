//! Configuration-driven analyses and the `credit` command line.

pub mod config;
pub mod report;
pub mod run;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use config::{Aggregation, AnalysisConfig, DatasetSpec, PartitionRule, PartitionSpec, Tolerances};
pub use report::{export_report, BlockReport, CreditReport, KernelCredits, ReportMetadata};
pub use run::{analyze_model, build_partition, repeat_seed, run_analysis, run_and_export, AnalysisOutput, Dataset};

use crate::koopman::embed_dim;
use crate::linalg::Matrix;
use crate::model::{
    block_name, classify_batch, forward_batch, grouped_layer_ranges, load_model, partition, LayerSpec, ModelError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("repeat {repeat}, block {block_id}: {message}")]
    Numerical { repeat: usize, block_id: usize, message: String },
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

impl AnalysisError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AnalysisError::Config(_) => EXIT_CONFIG,
            AnalysisError::Io { .. } | AnalysisError::Model(ModelError::Io { .. }) => EXIT_IO,
            AnalysisError::Model(_) => EXIT_CONFIG,
            AnalysisError::Numerical { .. } | AnalysisError::Linalg(_) => EXIT_NUMERICAL,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "credit", version, about = "Learning-credit assignment for trained networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a credit analysis described by a JSON config.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Number of dataset samples per repeat.
        #[arg(long)]
        samples: Option<usize>,
        /// Print nothing on success.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a model on the rows of a CSV file (one sample per row).
    Forward {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Print a model's layers, boundary shapes and default partition.
    InspectModel {
        #[arg(long)]
        model: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(stderr, "{}", e.render()) } else { write!(stdout, "{}", e.render()) };
            return code;
        }
    };
    let result = match cli.command {
        Command::Analyze { config, out, seed, repeats, samples, quiet } => {
            analyze(&config, out, seed, repeats, samples, quiet, stdout)
        }
        Command::Forward { model, input } => forward_csv(&model, &input, stdout),
        Command::InspectModel { model } => inspect(&model, stdout),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn out_err(e: std::io::Error) -> AnalysisError {
    AnalysisError::Io { path: "<stdout>".into(), source: e }
}

fn analyze(
    path: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    repeats: Option<usize>,
    samples: Option<usize>,
    quiet: bool,
    stdout: &mut dyn Write,
) -> Result<()> {
    let mut config = AnalysisConfig::load(path)?;
    if let Some(out) = out {
        config.output_dir = out;
    }
    if let Some(seed) = seed {
        config.master_seed = seed;
    }
    if let Some(r) = repeats {
        config.repeats = r;
    }
    if let Some(s) = samples {
        config.sample_count = s;
    }
    config.validate()?;
    let (output, written) = run_and_export(&config)?;
    if !quiet {
        print_summary(&output.report, stdout).map_err(out_err)?;
        writeln!(stdout, "wrote {} files to {}", written.len(), config.output_dir.display()).map_err(out_err)?;
    }
    Ok(())
}

fn print_summary(report: &CreditReport, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "{}: {} blocks, {} repeats", report.metadata.model, report.blocks.len(), report.metadata.repeats)?;
    writeln!(out, "{:>5}  {:<22} {:<4} {:>14} {:>8} {:>5}", "block", "name", "cat", "log10 credit", "share", "rank")?;
    for b in &report.blocks {
        writeln!(
            out,
            "{:>5}  {:<22} {:<4} {:>14.4} {:>8.4} {:>5}{}",
            b.block_id,
            b.name,
            b.category.to_string(),
            b.log10_credit,
            b.credit_share,
            b.rank,
            if b.degenerate { "  (degenerate)" } else { "" }
        )?;
    }
    Ok(())
}

fn forward_csv(model_path: &Path, input: &Path, stdout: &mut dyn Write) -> Result<()> {
    let model = load_model(model_path)?;
    let io = |source: std::io::Error| AnalysisError::Io { path: input.display().to_string(), source };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(input)
        .map_err(|e| io(e.into()))?;
    let mut data = Vec::new();
    let mut rows = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| io(e.into()))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let values: Vec<f64> = record
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| AnalysisError::Config(format!("{} line {}: {e}", input.display(), line + 1)))?;
        if values.len() != model.input_len() {
            return Err(AnalysisError::Config(format!(
                "{} line {}: {} values, the model expects {}",
                input.display(),
                line + 1,
                values.len(),
                model.input_len()
            )));
        }
        data.extend(values);
        rows += 1;
    }
    if rows == 0 {
        return Err(AnalysisError::Config(format!("{}: no samples", input.display())));
    }
    let batch = Matrix::new(rows, model.input_len(), data)?;
    let outputs = forward_batch(&model, &batch)?.pop().expect("at least one boundary");
    let predicted = classify_batch(&model, &batch)?;
    let mut header = vec!["predicted".to_string()];
    header.extend((0..outputs.cols()).map(|j| format!("out_{j}")));
    writeln!(stdout, "{}", header.join(",")).map_err(out_err)?;
    for (r, p) in predicted.iter().enumerate() {
        let values: Vec<String> = outputs.row(r).iter().map(|v| v.to_string()).collect();
        writeln!(stdout, "{p},{}", values.join(",")).map_err(out_err)?;
    }
    Ok(())
}

fn inspect(model_path: &Path, out: &mut dyn Write) -> Result<()> {
    let model = load_model(model_path)?;
    let shapes = model.boundary_shapes();
    let mut w = || -> std::io::Result<()> {
        writeln!(out, "model {} (input {})", model.name(), model.input_shape())?;
        for (i, layer) in model.layers().iter().enumerate() {
            let params = match layer {
                LayerSpec::Dense(d) => d.weight.rows() * d.weight.cols() + d.bias.len(),
                LayerSpec::Conv2d(c) => c.weight.len() + c.bias.len(),
                _ => 0,
            };
            writeln!(out, "  {i:>3} {:<10} {} -> {}  params {params}", layer.kind(), shapes[i], shapes[i + 1])?;
        }
        Ok(())
    };
    w().map_err(out_err)?;
    let blocks = partition(&model, &grouped_layer_ranges(&model))?;
    writeln!(out, "grouped partition:").map_err(out_err)?;
    for b in &blocks.blocks {
        writeln!(
            out,
            "  block {} layers {}..={} {:<20} {} {} -> {} d={}",
            b.id,
            b.first(),
            b.last(),
            block_name(&model, b),
            b.category,
            b.in_dim,
            b.out_dim,
            embed_dim(b)
        )
        .map_err(out_err)?;
    }
    Ok(())
}

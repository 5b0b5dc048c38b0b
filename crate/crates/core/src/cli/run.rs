//! End-to-end analysis: data, repeats, aggregation and scoring.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Aggregation, AnalysisConfig, DatasetSpec, PartitionRule, PartitionSpec};
use super::report::{BlockReport, CreditReport, KernelCredits, ReportMetadata};
use super::{AnalysisError, Result};
use crate::alignment::make_alignment;
use crate::credit::{
    block_credit, block_sensitivities, feature_weights, heatmaps, kernel_credit, mean_operator, normalize_credits,
    Heatmap, TIE_TOLERANCE,
};
use crate::koopman::{fit_block_with_series, FitOptions};
use crate::linalg::{GenAbsDet, Matrix, Vector};
use crate::model::{
    block_name, conv_meta, forward_batch, grouped_layer_ranges, load_mnist_idx, load_model, partition,
    per_layer_ranges, pool_input_9x9, BlockFamily, BlockPartition, NetworkModel,
};

/// Loaded input data for an analysis.
#[derive(Debug, Clone)]
pub enum Dataset {
    Samples(Vec<Vector>),
    Gaussian { mean: f64, std: f64 },
}

impl Dataset {
    pub fn load(spec: &DatasetSpec, input_len: usize) -> Result<Self> {
        match spec {
            DatasetSpec::SyntheticGaussian { mean, std } => Ok(Dataset::Gaussian { mean: *mean, std: *std }),
            DatasetSpec::MnistIdx { images, labels, limit, pool_9x9 } => {
                let raw = load_mnist_idx(images, labels, limit.unwrap_or(usize::MAX))?;
                let samples = raw
                    .into_iter()
                    .map(|(x, _)| if *pool_9x9 { pool_input_9x9(&x) } else { Ok(x) })
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                if let Some(x) = samples.first() {
                    if x.len() != input_len {
                        return Err(AnalysisError::Config(format!(
                            "dataset samples have {} values but the model expects {input_len}",
                            x.len()
                        )));
                    }
                }
                Ok(Dataset::Samples(samples))
            }
        }
    }

    pub fn describe(spec: &DatasetSpec) -> String {
        match spec {
            DatasetSpec::SyntheticGaussian { mean, std } => format!("synthetic_gaussian(mean={mean}, std={std})"),
            DatasetSpec::MnistIdx { images, limit, pool_9x9, .. } => {
                let name = images.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                let limit = limit.map_or(String::new(), |l| format!(", limit={l}"));
                format!("mnist_idx({name}{limit}{})", if *pool_9x9 { ", pooled 9x9" } else { "" })
            }
        }
    }

    /// Draws `count` samples as the rows of a matrix.
    fn draw(&self, rng: &mut ChaCha20Rng, count: usize, input_len: usize) -> Result<Matrix> {
        let data = match self {
            Dataset::Gaussian { mean, std } => {
                let normal = Normal::new(*mean, *std).map_err(|e| AnalysisError::Config(e.to_string()))?;
                (0..count * input_len).map(|_| normal.sample(rng)).collect()
            }
            Dataset::Samples(all) => {
                if count > all.len() {
                    return Err(AnalysisError::Config(format!(
                        "sample_count {count} exceeds the {} samples available",
                        all.len()
                    )));
                }
                let mut picked = index::sample(rng, all.len(), count).into_vec();
                picked.sort_unstable();
                picked.iter().flat_map(|&i| all[i].iter().copied()).collect()
            }
        };
        Ok(Matrix::new(count, input_len, data)?)
    }
}

pub fn build_partition(model: &NetworkModel, spec: &PartitionSpec) -> Result<BlockPartition> {
    let ranges = match spec {
        PartitionSpec::Rule(PartitionRule::PerLayer) => per_layer_ranges(model),
        PartitionSpec::Rule(PartitionRule::Grouped) => grouped_layer_ranges(model),
        PartitionSpec::Ranges(r) => r.clone(),
    };
    partition(model, &ranges).map_err(|e| AnalysisError::Config(e.to_string()))
}

/// Seed of repeat `r`'s generator: the first output of ChaCha20 keyed by the
/// master seed on stream `r`.
pub fn repeat_seed(master_seed: u64, repeat: usize) -> u64 {
    let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
    rng.set_stream(repeat as u64);
    rng.next_u64()
}

/// Operators and diagnostics of one repeat.
#[derive(Debug, Clone)]
pub struct RepeatResult {
    pub seed: u64,
    pub operators: Vec<Matrix>,
    pub fit_residuals: Vec<f64>,
    pub snapshot_ranks: Vec<usize>,
    pub alignment_residuals: Vec<f64>,
    pub seeds_used: Vec<usize>,
    pub d: Vec<usize>,
    pub d_uncapped: Vec<usize>,
    /// Snapshot CSV per block, when requested.
    pub snapshots: Vec<Vec<u8>>,
}

/// Runs one repeat: draws samples and alignment seeds, then fits every
/// block.
pub fn run_repeat(
    model: &NetworkModel,
    blocks: &BlockPartition,
    dataset: &Dataset,
    config: &AnalysisConfig,
    repeat: usize,
    dump_snapshots: bool,
) -> Result<RepeatResult> {
    let seed = repeat_seed(config.master_seed, repeat);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let block_seeds: Vec<u64> = blocks.blocks.iter().map(|_| rng.random()).collect();
    let batch = dataset.draw(&mut rng, config.sample_count, model.input_len())?;
    let boundaries = forward_batch(model, &batch)?;
    let options = FitOptions { d_cap: config.d_cap, tolerance: config.tolerances.pinv };

    let mut out = RepeatResult {
        seed,
        operators: Vec::new(),
        fit_residuals: Vec::new(),
        snapshot_ranks: Vec::new(),
        alignment_residuals: Vec::new(),
        seeds_used: Vec::new(),
        d: Vec::new(),
        d_uncapped: Vec::new(),
        snapshots: Vec::new(),
    };
    for (block, &block_seed) in blocks.blocks.iter().zip(&block_seeds) {
        let wrap = |message: String| AnalysisError::Numerical { repeat, block_id: block.id, message };
        let inputs_at = &boundaries[block.first()];
        let inputs: Vec<Vector> = (0..inputs_at.rows())
            .map(|r| Vector::new(inputs_at.row(r).to_vec()))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wrap(e.to_string()))?;
        let pair = make_alignment(block.out_dim, block.in_dim, block_seed).map_err(|e| wrap(e.to_string()))?;
        let started = std::time::Instant::now();
        let (op, series) =
            fit_block_with_series(model, block, &pair, &inputs, options).map_err(|e| wrap(e.to_string()))?;
        log::info!(
            "repeat {repeat} block {} ({}): d={} rank={} residual={:.3e} in {:.2?}",
            block.id,
            block_name(model, block),
            op.d,
            op.rank,
            op.fit_residual,
            started.elapsed()
        );
        if dump_snapshots {
            let mut buf = Vec::new();
            series.write_csv(&mut buf).map_err(|e| wrap(e.to_string()))?;
            out.snapshots.push(buf);
        }
        out.fit_residuals.push(op.fit_residual);
        out.snapshot_ranks.push(op.rank);
        out.alignment_residuals.push(pair.residual);
        out.seeds_used.push(op.seeds_used);
        out.d.push(op.d);
        out.d_uncapped.push(op.d_uncapped);
        out.operators.push(op.matrix);
    }
    Ok(out)
}

/// Everything an analysis produces.
#[derive(Debug, Clone)]
pub struct AnalysisOutput {
    pub report: CreditReport,
    pub heatmaps: Vec<Heatmap>,
    /// Aggregated operator of each block.
    pub operators: Vec<Matrix>,
    /// First repeat's snapshot CSV per block (empty unless requested).
    pub snapshots: Vec<Vec<u8>>,
}

fn order_free_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs every repeat and scores the aggregated operators. Nothing is
/// written to disk.
pub fn run_analysis(config: &AnalysisConfig) -> Result<AnalysisOutput> {
    config.validate()?;
    let model = load_model(&config.model_path)?;
    let blocks = build_partition(&model, &config.partition)?;
    let dataset = Dataset::load(&config.dataset, model.input_len())?;
    analyze_model(&model, &blocks, &dataset, config)
}

/// [`run_analysis`] on an already loaded model, partition and dataset.
pub fn analyze_model(
    model: &NetworkModel,
    blocks: &BlockPartition,
    dataset: &Dataset,
    config: &AnalysisConfig,
) -> Result<AnalysisOutput> {
    config.validate()?;
    let mut repeats = Vec::with_capacity(config.repeats);
    for r in 0..config.repeats {
        let started = std::time::Instant::now();
        repeats.push(run_repeat(model, blocks, dataset, config, r, config.dump_snapshots && r == 0)?);
        log::info!("repeat {r} finished in {:.2?}", started.elapsed());
    }
    let det_tol = config.tolerances.determinant;
    let nblocks = blocks.len();

    let mut means = Vec::with_capacity(nblocks);
    for b in 0..nblocks {
        let runs: Vec<Matrix> = repeats.iter().map(|r| r.operators[b].clone()).collect();
        means.push(mean_operator(&runs).map_err(|e| AnalysisError::Numerical {
            repeat: 0,
            block_id: b,
            message: e.to_string(),
        })?);
    }
    let numerical = |block_id: usize| {
        move |e: crate::credit::CreditError| AnalysisError::Numerical { repeat: 0, block_id, message: e.to_string() }
    };

    let dets: Vec<GenAbsDet> = match config.aggregation {
        Aggregation::MeanOperator => means
            .iter()
            .enumerate()
            .map(|(b, k)| block_credit(k, det_tol).map_err(numerical(b)))
            .collect::<Result<_>>()?,
        Aggregation::MeanCredit => (0..nblocks)
            .map(|b| {
                let per: Vec<GenAbsDet> = repeats
                    .iter()
                    .map(|r| block_credit(&r.operators[b], det_tol).map_err(numerical(b)))
                    .collect::<Result<_>>()?;
                let log10 = order_free_mean(per.iter().map(|d| d.log10));
                Ok(GenAbsDet {
                    value: 10f64.powf(log10),
                    log10,
                    degenerate: per.iter().any(|d| d.degenerate),
                    factors: per.iter().map(|d| d.factors).min().unwrap_or(0),
                })
            })
            .collect::<Result<_>>()?,
    };
    let logs: Vec<f64> = dets.iter().map(|d| d.log10).collect();
    let normalized = normalize_credits(&logs).map_err(numerical(0))?;
    let sensitivities = block_sensitivities(&means, &dets);
    let uniform_fallback = dets.iter().all(|d| d.factors == 0);
    if uniform_fallback {
        log::warn!("every block operator is zero; credit shares are uniform");
    }

    let mut kernel_credits = Vec::new();
    for (block, k) in blocks.blocks.iter().zip(&means) {
        if let Some(meta) = conv_meta(model, block) {
            let channels = kernel_credit(k, &meta, det_tol).map_err(numerical(block.id))?;
            kernel_credits.push(KernelCredits { block_id: block.id, channels });
        }
    }
    let weights = feature_weights(&means).map_err(numerical(0))?;
    let maps = heatmaps(&weights, model.input_shape());

    let block_reports = blocks
        .blocks
        .iter()
        .enumerate()
        .map(|(b, block)| BlockReport {
            block_id: block.id,
            name: block_name(model, block),
            family: BlockFamily::of(model, block),
            layer_range: block.layer_range,
            category: block.category,
            in_dim: block.in_dim,
            out_dim: block.out_dim,
            d: repeats[0].d[b],
            d_uncapped: repeats[0].d_uncapped[b],
            gen_absdet: dets[b].value.is_finite().then_some(dets[b].value),
            log10_credit: dets[b].log10,
            degenerate: dets[b].degenerate,
            factors: dets[b].factors,
            credit_share: normalized.shares[b],
            rank: normalized.ranks[b],
            sensitivity: sensitivities[b],
            fit_residuals: repeats.iter().map(|r| r.fit_residuals[b]).collect(),
            snapshot_ranks: repeats.iter().map(|r| r.snapshot_ranks[b]).collect(),
            alignment_residuals: repeats.iter().map(|r| r.alignment_residuals[b]).collect(),
            seeds_used: repeats.iter().map(|r| r.seeds_used[b]).collect(),
        })
        .collect();

    let report = CreditReport {
        metadata: ReportMetadata {
            model: model.name().to_string(),
            input_shape: model.input_shape(),
            dataset: Dataset::describe(&config.dataset),
            master_seed: config.master_seed,
            repeats: config.repeats,
            sample_count: config.sample_count,
            d_cap: config.d_cap,
            aggregation: config.aggregation,
            pinv_tolerance: config.tolerances.pinv,
            determinant_tolerance: det_tol,
            tie_tolerance: TIE_TOLERANCE,
            repeat_seeds: repeats.iter().map(|r| r.seed).collect(),
            kernel_credit_method: "generalized determinant of the operator rows owned by each output channel".into(),
        },
        blocks: block_reports,
        kernel_credits,
        feature_weights: weights,
        uniform_fallback,
    };
    let snapshots = repeats.swap_remove(0).snapshots;
    Ok(AnalysisOutput { report, heatmaps: maps, operators: means, snapshots })
}

/// Runs the analysis and writes its artifacts to the configured output
/// directory. Nothing is written if any stage fails.
pub fn run_and_export(config: &AnalysisConfig) -> Result<(AnalysisOutput, Vec<std::path::PathBuf>)> {
    let out = run_analysis(config)?;
    let dir: &Path = &config.output_dir;
    let mut written = super::report::export_report(&out.report, &out.heatmaps, dir)?;
    if !out.snapshots.is_empty() {
        let sdir = dir.join("snapshots");
        std::fs::create_dir_all(&sdir)
            .map_err(|source| AnalysisError::Io { path: sdir.display().to_string(), source })?;
        for (b, csv) in out.snapshots.iter().enumerate() {
            let path = sdir.join(format!("block_{b}.csv"));
            std::fs::write(&path, csv)
                .map_err(|source| AnalysisError::Io { path: path.display().to_string(), source })?;
            written.push(path);
        }
    }
    Ok((out, written))
}

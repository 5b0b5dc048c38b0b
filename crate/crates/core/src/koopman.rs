//! Step-delay embedding of aligned blocks and DMD regression.
//!
//! Each seed input is lifted into the aligned state space and iterated
//! `2d` times through the aligned block, giving `2d + 1` states per seed.
//! Consecutive states from every seed are pooled into one regression
//! `y(k+1) ≈ K̃ y(k)`, solved as `K̃ = Y · X⁺`, and the alignment is then
//! removed to give the block operator.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::alignment::{aligned_step_batch, decompose_operator, AlignmentError, AlignmentPair};
use crate::linalg::{self, frobenius_norm, LinalgError, Matrix, Vector};
use crate::model::{Block, NetworkModel};

#[derive(Debug, thiserror::Error)]
pub enum KoopmanError {
    #[error("block {block_id}: no snapshot pairs to fit")]
    NoPairs { block_id: usize },
    #[error("block {block_id}: every trajectory left the finite range (first at seed {seed}, step {step})")]
    AllExcluded { block_id: usize, seed: usize, step: usize },
    #[error("block {block_id}: seed input {seed} has length {got}, expected {expected}")]
    SeedLength { block_id: usize, seed: usize, expected: usize, got: usize },
    #[error("block {block_id}: embedding dimension cap must be positive")]
    ZeroCap { block_id: usize },
    #[error("block {block_id}: alignment is {out_dim}x{in_dim}, block is {block_out}x{block_in}")]
    PairMismatch { block_id: usize, out_dim: usize, in_dim: usize, block_out: usize, block_in: usize },
    #[error("snapshot dump: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, KoopmanError>;

/// Embedding dimension: the smallest boundary dimension in the block. The
/// aligned block's extra boundary (its output, equal to the state
/// dimension) is never smaller than the block's own input or output, so it
/// cannot lower the minimum.
pub fn embed_dim(block: &Block) -> usize {
    block.layer_dims.iter().copied().min().unwrap_or(0)
}

/// [`embed_dim`] limited to `cap`.
pub fn embed_dim_capped(block: &Block, cap: usize) -> usize {
    embed_dim(block).min(cap)
}

/// A trajectory dropped because one of its states was not finite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub seed: usize,
    /// First step whose state was not finite.
    pub step: usize,
}

/// Iterated states of one aligned block.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSeries {
    pub block_id: usize,
    pub d: usize,
    pub state_dim: usize,
    /// Index (into the seed inputs) of each kept trajectory.
    pub seeds: Vec<usize>,
    /// One `(2d + 1) × state_dim` matrix per kept seed; row `k` is `y(k)`.
    pub trajectories: Vec<Matrix>,
    pub excluded: Vec<Exclusion>,
}

impl SnapshotSeries {
    pub fn seed_count(&self) -> usize {
        self.trajectories.len()
    }

    pub fn steps(&self) -> usize {
        2 * self.d + 1
    }

    pub fn pair_count(&self) -> usize {
        self.seed_count() * 2 * self.d
    }

    pub fn state(&self, seed: usize, step: usize) -> &[f64] {
        self.trajectories[seed].row(step)
    }

    /// Pooled regression data: row `p` of the first matrix is a state and
    /// row `p` of the second its successor. Pairs are ordered by seed, then
    /// step.
    pub fn pairs(&self) -> (Matrix, Matrix) {
        let n = self.state_dim;
        let mut xs = Vec::with_capacity(self.pair_count() * n);
        let mut ys = Vec::with_capacity(self.pair_count() * n);
        for t in &self.trajectories {
            let data = t.as_slice();
            xs.extend_from_slice(&data[..2 * self.d * n]);
            ys.extend_from_slice(&data[n..]);
        }
        let rows = self.pair_count();
        (Matrix::from_vec_unchecked(rows, n, xs), Matrix::from_vec_unchecked(rows, n, ys))
    }

    /// Writes all states as CSV with header `seed,step,idx,value`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "seed,step,idx,value")?;
        for (&seed, t) in self.seeds.iter().zip(&self.trajectories) {
            for step in 0..t.rows() {
                for (idx, v) in t.row(step).iter().enumerate() {
                    writeln!(out, "{seed},{step},{idx},{v:e}")?;
                }
            }
        }
        Ok(())
    }
}

fn check_pair(block: &Block, pair: &AlignmentPair) -> Result<()> {
    if (pair.out_dim(), pair.in_dim()) != (block.out_dim, block.in_dim) {
        return Err(KoopmanError::PairMismatch {
            block_id: block.id,
            out_dim: pair.out_dim(),
            in_dim: pair.in_dim(),
            block_out: block.out_dim,
            block_in: block.in_dim,
        });
    }
    Ok(())
}

/// Iterates the aligned block `2d` times from every seed input (each a
/// block input, lifted into the aligned state space first). Trajectories
/// that produce a non-finite state are dropped and reported; it is an error
/// only if none survive.
pub fn generate_snapshots(
    model: &NetworkModel,
    block: &Block,
    pair: &AlignmentPair,
    seed_inputs: &[Vector],
    d: usize,
) -> Result<SnapshotSeries> {
    check_pair(block, pair)?;
    let n = pair.state_dim();
    let steps = 2 * d + 1;
    let mut initial = Vec::with_capacity(seed_inputs.len() * n);
    for (seed, x) in seed_inputs.iter().enumerate() {
        if x.len() != block.in_dim {
            return Err(KoopmanError::SeedLength { block_id: block.id, seed, expected: block.in_dim, got: x.len() });
        }
        initial.extend_from_slice(&pair.lift_input(x)?);
    }

    // Trajectories are advanced as one batch; row evaluation is independent
    // of its batch neighbours, so dropping a row never perturbs the others.
    let mut active: Vec<usize> = (0..seed_inputs.len()).collect();
    let mut buffers: Vec<Vec<f64>> = active.iter().map(|_| Vec::with_capacity(steps * n)).collect();
    let mut excluded = Vec::new();
    let mut current = Matrix::from_vec_unchecked(seed_inputs.len(), n, initial);
    for step in 0..steps {
        if step > 0 {
            current = aligned_step_batch(model, block, pair, &current)?;
        }
        let mut keep = Vec::with_capacity(active.len());
        for (row, &seed) in active.iter().enumerate() {
            let state = current.row(row);
            if state.iter().all(|v| v.is_finite()) {
                buffers[seed].extend_from_slice(state);
                keep.push(row);
            } else {
                log::warn!("block {}: trajectory of seed {seed} is not finite at step {step}, excluded", block.id);
                excluded.push(Exclusion { seed, step });
                buffers[seed] = Vec::new();
            }
        }
        if keep.len() < active.len() {
            let data = keep.iter().flat_map(|&r| current.row(r).iter().copied()).collect();
            current = Matrix::from_vec_unchecked(keep.len(), n, data);
            active = keep.iter().map(|&r| active[r]).collect();
        }
        if active.is_empty() {
            break;
        }
    }
    if active.is_empty() && !seed_inputs.is_empty() {
        let first = excluded[0];
        return Err(KoopmanError::AllExcluded { block_id: block.id, seed: first.seed, step: first.step });
    }
    excluded.sort_by_key(|e| e.seed);
    let trajectories =
        active.iter().map(|&seed| Matrix::from_vec_unchecked(steps, n, std::mem::take(&mut buffers[seed]))).collect();
    Ok(SnapshotSeries { block_id: block.id, d, state_dim: n, seeds: active, trajectories, excluded })
}

/// Result of the pooled DMD regression on the aligned state space.
#[derive(Debug, Clone, PartialEq)]
pub struct DmdFit {
    pub aligned_matrix: Matrix,
    /// ‖K̃X − Y‖_F / max(1, ‖Y‖_F)
    pub fit_residual: f64,
    /// Rank of the snapshot matrix at the tolerance used.
    pub rank: usize,
    pub tolerance: f64,
}

/// Least-squares operator `K̃ = Y · X⁺` over all snapshot pairs of all
/// seeds. `tol` overrides the default pseudo-inverse tolerance.
pub fn dmd_fit(series: &SnapshotSeries, tol: Option<f64>) -> Result<DmdFit> {
    if series.pair_count() == 0 {
        return Err(KoopmanError::NoPairs { block_id: series.block_id });
    }
    let (xs, ys) = series.pairs();
    let sol = linalg::solve_right_least_squares(&xs, &ys, tol)?;
    if sol.rank < series.state_dim {
        log::debug!(
            "block {}: snapshot matrix truncated to rank {} of {} (tolerance {:e}, smallest kept {:e})",
            series.block_id,
            sol.rank,
            series.state_dim,
            sol.tolerance,
            sol.sigma_min_kept
        );
    }
    let residual = xs.matmul(&sol.k.transpose())?.sub(&ys)?;
    let fit_residual = frobenius_norm(&residual) / frobenius_norm(&ys).max(1.0);
    Ok(DmdFit { aligned_matrix: sol.k, fit_residual, rank: sol.rank, tolerance: sol.tolerance })
}

/// Learned linear operator of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KoopmanOperator {
    pub block_id: usize,
    /// out_dim × in_dim
    pub matrix: Matrix,
    /// Square, of the aligned state dimension `max(in_dim, out_dim)`.
    pub aligned_matrix: Matrix,
    pub fit_residual: f64,
    pub rank: usize,
    /// Embedding dimension used and the uncapped one.
    pub d: usize,
    pub d_uncapped: usize,
    pub seeds_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub d_cap: usize,
    pub tolerance: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { d_cap: 256, tolerance: None }
    }
}

/// Embedding, snapshot generation, regression and decomposition for one
/// block.
pub fn fit_block(
    model: &NetworkModel,
    block: &Block,
    pair: &AlignmentPair,
    seed_inputs: &[Vector],
    options: FitOptions,
) -> Result<KoopmanOperator> {
    Ok(fit_block_with_series(model, block, pair, seed_inputs, options)?.0)
}

/// [`fit_block`], also returning the snapshots it was fitted on.
pub fn fit_block_with_series(
    model: &NetworkModel,
    block: &Block,
    pair: &AlignmentPair,
    seed_inputs: &[Vector],
    options: FitOptions,
) -> Result<(KoopmanOperator, SnapshotSeries)> {
    if options.d_cap == 0 {
        return Err(KoopmanError::ZeroCap { block_id: block.id });
    }
    let d_uncapped = embed_dim(block);
    let d = d_uncapped.min(options.d_cap);
    let started = std::time::Instant::now();
    let series = generate_snapshots(model, block, pair, seed_inputs, d)?;
    let generated = started.elapsed();
    let fit = dmd_fit(&series, options.tolerance)?;
    log::debug!(
        "block {}: snapshots in {generated:.2?}, regression in {:.2?}",
        block.id,
        started.elapsed() - generated
    );
    let matrix = decompose_operator(pair, &fit.aligned_matrix)?;
    let op = KoopmanOperator {
        block_id: block.id,
        matrix,
        aligned_matrix: fit.aligned_matrix,
        fit_residual: fit.fit_residual,
        rank: fit.rank,
        d,
        d_uncapped,
        seeds_used: series.seed_count(),
    };
    Ok((op, series))
}

//! Minimal linear dimension alignment.
//!
//! A block `f: R^in → R^out` with `in ≠ out` cannot be iterated. It is
//! turned into a self-map by composing it with `a = b⁺`, where `b` is a
//! random full-rank `out × in` matrix, and the learned operator is later
//! decoupled again with `b`:
//!
//! * L2S (`in > out`): the alignment follows the block, `y ↦ a·f(y)` on
//!   `R^in`, and `K = b·K̃`. Here `b·a = I_out`.
//! * S2L (`in < out`): the alignment precedes the block, `z ↦ f(a·z)` on
//!   `R^out`, and `K = K̃·b`. Here `a·b = I_in`.
//! * E2E: `a = b = I`.
//!
//! In both non-trivial cases the product that survives decomposition is an
//! exact identity, so a linear block is recovered exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, default_tolerance, frobenius_norm, LinalgError, Matrix, Vector};
use crate::model::{block_forward_batch, Block, Category, ModelError, NetworkModel};

/// Upper bound on draws of `b` before giving up on the rank requirement.
pub const MAX_ATTEMPTS: u64 = 8;

#[derive(Debug, thiserror::Error)]
pub enum AlignmentError {
    #[error("could not draw a full-rank {out_dim}x{in_dim} alignment matrix in {attempts} attempts")]
    RankDeficient { out_dim: usize, in_dim: usize, attempts: u64 },
    #[error("alignment dimensions must be positive, got {out_dim}x{in_dim}")]
    ZeroDim { out_dim: usize, in_dim: usize },
    #[error("state has length {got}, aligned block expects {expected}")]
    StateLength { expected: usize, got: usize },
    #[error("aligned operator is {rows}x{cols}, expected {expected}x{expected}")]
    OperatorShape { rows: usize, cols: usize, expected: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, AlignmentError>;

/// Where the alignment layer sits relative to the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Identity,
    Before,
    After,
}

impl Placement {
    pub fn for_category(category: Category) -> Self {
        match category {
            Category::E2E => Placement::Identity,
            Category::S2L => Placement::Before,
            Category::L2S => Placement::After,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPair {
    /// out_dim × in_dim, full rank.
    pub b: Matrix,
    /// in_dim × out_dim, the Moore-Penrose inverse of `b`.
    pub a: Matrix,
    /// ‖b·a − I_out‖_F
    pub residual: f64,
    pub seed: u64,
    /// Zero-based index of the draw that passed the rank check.
    pub attempt: u64,
}

impl AlignmentPair {
    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.b.cols()
    }

    pub fn placement(&self) -> Placement {
        Placement::for_category(Category::of(self.in_dim(), self.out_dim()))
    }

    /// Dimension of the space the aligned block iterates on.
    pub fn state_dim(&self) -> usize {
        self.in_dim().max(self.out_dim())
    }

    /// Maps a block input to the aligned state whose first step reproduces
    /// the block's response to it: `b·x` for S2L (so that `a·b·x = x`), `x`
    /// otherwise.
    pub fn lift_input(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.in_dim() {
            return Err(AlignmentError::StateLength { expected: self.in_dim(), got: x.len() });
        }
        Ok(match self.placement() {
            Placement::Before => Vector::from_vec_unchecked(self.b.matvec(x)?),
            _ => Vector::from_vec_unchecked(x.to_vec()),
        })
    }
}

/// Draws `b` from i.i.d. standard normals (ChaCha20 seeded with `seed`, one
/// stream per attempt), checks its rank and sets `a = b⁺`. Equal dimensions
/// short-circuit to identities.
pub fn make_alignment(out_dim: usize, in_dim: usize, seed: u64) -> Result<AlignmentPair> {
    if out_dim == 0 || in_dim == 0 {
        return Err(AlignmentError::ZeroDim { out_dim, in_dim });
    }
    if out_dim == in_dim {
        let eye = Matrix::identity(in_dim);
        return Ok(AlignmentPair { b: eye.clone(), a: eye, residual: 0.0, seed, attempt: 0 });
    }
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        let data: Vec<f64> = (0..out_dim * in_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b = Matrix::new(out_dim, in_dim, data)?;
        let s = linalg::singular_values(&b)?;
        let tol = default_tolerance(out_dim, in_dim, s[0]);
        if s.last().is_some_and(|&smin| smin > tol) {
            let a = linalg::pinv(&b, None)?;
            let residual = frobenius_norm(&b.matmul(&a)?.sub(&Matrix::identity(out_dim))?);
            return Ok(AlignmentPair { b, a, residual, seed, attempt });
        }
        log::warn!("alignment draw {attempt} for {out_dim}x{in_dim} (seed {seed}) is rank deficient, redrawing");
    }
    Err(AlignmentError::RankDeficient { out_dim, in_dim, attempts: MAX_ATTEMPTS })
}

/// One step of the aligned block on a batch of states (one per row).
pub fn aligned_step_batch(
    model: &NetworkModel,
    block: &Block,
    pair: &AlignmentPair,
    states: &Matrix,
) -> Result<Matrix> {
    let expected = pair.state_dim();
    if states.cols() != expected {
        return Err(AlignmentError::StateLength { expected, got: states.cols() });
    }
    Ok(match pair.placement() {
        Placement::Identity => block_forward_batch(model, block, states)?,
        Placement::After => pair.a.mul_rows(&block_forward_batch(model, block, states)?)?,
        Placement::Before => block_forward_batch(model, block, &pair.a.mul_rows(states)?)?,
    })
}

/// One step of the aligned block; input and output have the state dimension
/// `max(in_dim, out_dim)`.
pub fn aligned_step(model: &NetworkModel, block: &Block, pair: &AlignmentPair, x: &[f64]) -> Result<Vector> {
    let batch = Matrix::new(1, x.len(), x.to_vec())?;
    Ok(Vector::from_vec_unchecked(aligned_step_batch(model, block, pair, &batch)?.into_vec()))
}

/// Removes the alignment from an operator learned on the aligned block,
/// giving an `out_dim × in_dim` operator for the original block.
pub fn decompose_operator(pair: &AlignmentPair, k_aligned: &Matrix) -> Result<Matrix> {
    let expected = pair.state_dim();
    if k_aligned.shape() != (expected, expected) {
        return Err(AlignmentError::OperatorShape { rows: k_aligned.rows(), cols: k_aligned.cols(), expected });
    }
    Ok(match pair.placement() {
        Placement::Identity | Placement::After => pair.b.matmul(k_aligned)?,
        Placement::Before => k_aligned.matmul(&pair.b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{partition, Activation, Dense, LayerSpec, Shape};

    fn linear_block(weight: Matrix) -> (NetworkModel, Block) {
        let model = NetworkModel::new(
            "lin",
            Shape::Flat(weight.cols()),
            vec![
                LayerSpec::Dense(Dense { bias: vec![0.0; weight.rows()], weight }),
                LayerSpec::Activation(Activation::Identity),
            ],
        )
        .unwrap();
        let block = partition(&model, &[[0, 1]]).unwrap().blocks.remove(0);
        (model, block)
    }

    #[test]
    fn square_alignment_is_identity() {
        let p = make_alignment(4, 4, 11).unwrap();
        assert_eq!(p.a, Matrix::identity(4));
        assert_eq!(p.b, Matrix::identity(4));
        assert_eq!(p.residual, 0.0);
        assert_eq!(p.placement(), Placement::Identity);
    }

    #[test]
    fn residuals_match_dimension_gap() {
        let p = make_alignment(3, 2, 5).unwrap();
        assert!((p.residual - 1.0).abs() < 1e-6);
        assert_eq!(p.placement(), Placement::Before);
        let p = make_alignment(2, 3, 5).unwrap();
        assert!(p.residual.abs() < 1e-6);
        assert_eq!(p.placement(), Placement::After);
    }

    #[test]
    fn same_seed_same_pair() {
        assert_eq!(make_alignment(7, 3, 99).unwrap(), make_alignment(7, 3, 99).unwrap());
        assert_ne!(make_alignment(7, 3, 99).unwrap().b, make_alignment(7, 3, 100).unwrap().b);
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(matches!(make_alignment(0, 3, 1), Err(AlignmentError::ZeroDim { .. })));
    }

    #[test]
    fn identity_pair_step_is_block_forward() {
        let w = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let (model, block) = linear_block(w);
        let pair = make_alignment(2, 2, 0).unwrap();
        assert_eq!(&*aligned_step(&model, &block, &pair, &[1.0, -1.0]).unwrap(), &[-1.0, -1.0]);
    }

    #[test]
    fn linear_steps_compose_the_products() {
        // L2S: y ↦ a·W·y
        let w = Matrix::from_fn(2, 4, |i, j| (i * 4 + j) as f64 * 0.25 - 0.7);
        let (model, block) = linear_block(w.clone());
        let pair = make_alignment(2, 4, 3).unwrap();
        let x = [0.5, -1.0, 2.0, 0.25];
        let got = aligned_step(&model, &block, &pair, &x).unwrap();
        let want = pair.a.matmul(&w).unwrap().matvec(&x).unwrap();
        assert_eq!(got.len(), 4);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }

        // S2L: z ↦ W·a·z
        let w = Matrix::from_fn(5, 2, |i, j| (i + 3 * j) as f64 * 0.1 - 0.4);
        let (model, block) = linear_block(w.clone());
        let pair = make_alignment(5, 2, 3).unwrap();
        let z = [1.0, 2.0, 3.0, -1.0, 0.5];
        let got = aligned_step(&model, &block, &pair, &z).unwrap();
        let want = w.matmul(&pair.a).unwrap().matvec(&z).unwrap();
        assert_eq!(got.len(), 5);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!(aligned_step(&model, &block, &pair, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn lifted_input_reproduces_the_block_response() {
        let w = Matrix::from_fn(5, 2, |i, j| (i + 3 * j) as f64 * 0.1 - 0.4);
        let (model, block) = linear_block(w.clone());
        let pair = make_alignment(5, 2, 8).unwrap();
        let x = [0.3, -0.9];
        let y0 = pair.lift_input(&x).unwrap();
        let step = aligned_step(&model, &block, &pair, &y0).unwrap();
        let direct = w.matvec(&x).unwrap();
        for (s, d) in step.iter().zip(&direct) {
            assert!((s - d).abs() < 1e-12);
        }
    }

    #[test]
    fn decompose_examples() {
        let eye = make_alignment(3, 3, 0).unwrap();
        let k = Matrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64);
        assert_eq!(decompose_operator(&eye, &k).unwrap(), k);

        // b = (1, 1)ᵀ is 2x1; with the alignment before the block, K = K̃·b.
        let b = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
        let pair = AlignmentPair { a: linalg::pinv(&b, None).unwrap(), b, residual: 1.0, seed: 0, attempt: 0 };
        let kt = Matrix::from_rows(&[[3.0, 0.0], [0.0, 3.0]]).unwrap();
        assert_eq!(decompose_operator(&pair, &kt).unwrap(), Matrix::from_rows(&[[3.0], [3.0]]).unwrap());
        assert!(decompose_operator(&pair, &Matrix::identity(1)).is_err());

        // L2S: b·a = I so b·(a·K) = K.
        let pair = make_alignment(2, 5, 1).unwrap();
        let kw = Matrix::from_fn(2, 5, |i, j| (i as f64 - j as f64) * 0.3);
        let back = decompose_operator(&pair, &pair.a.matmul(&kw).unwrap()).unwrap();
        assert!(frobenius_norm(&back.sub(&kw).unwrap()) < 1e-12);
    }
}

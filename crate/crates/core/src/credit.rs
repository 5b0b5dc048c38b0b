//! Credit measures derived from per-block operators.
//!
//! For a chain `K = K_m ⋯ K_1` the credit of block `i` is the generalized
//! absolute determinant of `K_i`. When every `K_s` is square of order `n`,
//! the sensitivity `|det ∂vec(K)/∂vec(K_i)|` is `Π_{s≠i} |det K_s|^n`.
//! Products of determinants are accumulated as sums of `log10` values.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::linalg::{gen_absdet, kron, GenAbsDet, LinalgError, Matrix};
use crate::model::{ConvMeta, Shape};

/// Credits closer than this in `log10` share a rank.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum CreditError {
    #[error("no blocks to score")]
    Empty,
    #[error("block index {index} out of range for a chain of {len}")]
    Index { index: usize, len: usize },
    #[error("operator {next} has {cols} columns but operator {prev} has {rows} rows")]
    Chain { prev: usize, next: usize, rows: usize, cols: usize },
    #[error("run {index} is {got_rows}x{got_cols}, expected {rows}x{cols}")]
    RunShape { index: usize, rows: usize, cols: usize, got_rows: usize, got_cols: usize },
    #[error("credit {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("channel rows {start}..{end} exceed the {rows}-row operator")]
    ChannelRows { start: usize, end: usize, rows: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, CreditError>;

/// Credit of one block operator.
pub fn block_credit(k: &Matrix, tol: Option<f64>) -> Result<GenAbsDet> {
    Ok(gen_absdet(k, tol)?)
}

/// Sum that does not depend on the order of its terms.
fn ordered_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub log10: f64,
    /// `10^log10`, absent when it is not representable.
    pub value: Option<f64>,
    /// Some factor was a degenerate generalized determinant.
    pub degenerate: bool,
}

fn common_order(ops: &[Matrix]) -> Option<usize> {
    let n = ops.first()?.rows();
    ops.iter().all(|k| k.shape() == (n, n)).then_some(n)
}

/// Sensitivities of every block from precomputed determinants; `None` unless
/// all operators are square of the same order `n`.
pub fn block_sensitivities(ops: &[Matrix], dets: &[GenAbsDet]) -> Vec<Option<Sensitivity>> {
    let Some(n) = common_order(ops) else {
        return vec![None; ops.len()];
    };
    (0..ops.len())
        .map(|i| {
            let others = dets.iter().enumerate().filter(|&(s, _)| s != i).map(|(_, d)| d);
            let log10 = n as f64 * ordered_sum(others.clone().map(|d| d.log10));
            let value = 10f64.powf(log10);
            Some(Sensitivity {
                log10,
                value: (value.is_finite() && (value > 0.0 || log10 == f64::NEG_INFINITY)).then_some(value),
                degenerate: others.clone().any(|d| d.degenerate),
            })
        })
        .collect()
}

/// `Π_{s≠i} gen_absdet(K_s)^n`, or `None` when the operators are not all
/// square of one order.
pub fn block_sensitivity(ops: &[Matrix], i: usize, tol: Option<f64>) -> Result<Option<Sensitivity>> {
    if i >= ops.len() {
        return Err(CreditError::Index { index: i, len: ops.len() });
    }
    if common_order(ops).is_none() {
        return Ok(None);
    }
    let dets = ops.iter().map(|k| block_credit(k, tol)).collect::<Result<Vec<_>>>()?;
    Ok(block_sensitivities(ops, &dets).swap_remove(i))
}

fn check_chain(ops: &[Matrix]) -> Result<()> {
    if ops.is_empty() {
        return Err(CreditError::Empty);
    }
    for (s, w) in ops.windows(2).enumerate() {
        if w[1].cols() != w[0].rows() {
            return Err(CreditError::Chain { prev: s, next: s + 1, rows: w[0].rows(), cols: w[1].cols() });
        }
    }
    Ok(())
}

/// `K_m ⋯ K_1` for `ops = [K_1, …, K_m]` (the first operator acts first).
pub fn feature_weights(ops: &[Matrix]) -> Result<Matrix> {
    check_chain(ops)?;
    let mut k = ops[0].clone();
    for next in &ops[1..] {
        k = next.matmul(&k)?;
    }
    Ok(k)
}

/// Jacobian of `vec(K_m ⋯ K_1)` with respect to `vec(K_i)` under row-major
/// vectorization: writing the chain as `L · K_i · R`, it is `L ⊗ Rᵀ`.
pub fn chain_jacobian(ops: &[Matrix], i: usize) -> Result<Matrix> {
    check_chain(ops)?;
    if i >= ops.len() {
        return Err(CreditError::Index { index: i, len: ops.len() });
    }
    let left = if i + 1 < ops.len() { feature_weights(&ops[i + 1..])? } else { Matrix::identity(ops[i].rows()) };
    let right = if i > 0 { feature_weights(&ops[..i])? } else { Matrix::identity(ops[i].cols()) };
    Ok(kron(&left, &right.transpose()))
}

/// Proportional shares and descending ranks of a set of credits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalized {
    pub shares: Vec<f64>,
    /// 1-based competition ranks (ties share the better rank).
    pub ranks: Vec<usize>,
}

/// Shares `v_i / Σ v_j` of `v_i = 10^{log10_i}`, evaluated relative to the
/// largest credit so that no term overflows.
pub fn normalize_credits(log10: &[f64]) -> Result<Normalized> {
    if log10.is_empty() {
        return Err(CreditError::Empty);
    }
    if let Some((index, &value)) = log10.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(CreditError::NonFinite { index, value });
    }
    let top = log10.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log10.iter().map(|l| 10f64.powf(l - top)).collect();
    let total = ordered_sum(weights.iter().copied());
    let shares = weights.iter().map(|w| w / total).collect();
    Ok(Normalized { shares, ranks: tie_ranks(log10) })
}

/// Descending competition ranks; neighbours within [`TIE_TOLERANCE`] share a
/// rank.
pub fn tie_ranks(log10: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..log10.len()).collect();
    order.sort_by(|&a, &b| log10[b].total_cmp(&log10[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; log10.len()];
    for (pos, &idx) in order.iter().enumerate() {
        ranks[idx] = if pos > 0 && (log10[order[pos - 1]] - log10[idx]).abs() < TIE_TOLERANCE {
            ranks[order[pos - 1]]
        } else {
            pos + 1
        };
    }
    ranks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCredit {
    pub channel: usize,
    pub log10: f64,
    /// Absent when the product is not representable as a finite float.
    pub value: Option<f64>,
    pub degenerate: bool,
    pub rank: usize,
}

/// Credit of each output channel of a convolutional block: the generalized
/// absolute determinant of the operator rows that channel owns.
pub fn kernel_credit(k: &Matrix, meta: &ConvMeta, tol: Option<f64>) -> Result<Vec<KernelCredit>> {
    let mut dets = Vec::with_capacity(meta.out_channels);
    for &[start, end] in &meta.row_ranges {
        if end > k.rows() || start >= end {
            return Err(CreditError::ChannelRows { start, end, rows: k.rows() });
        }
        dets.push(block_credit(&k.row_block(start..end), tol)?);
    }
    let logs: Vec<f64> = dets.iter().map(|d| d.log10).collect();
    let ranks = tie_ranks(&logs);
    Ok(dets
        .iter()
        .zip(ranks)
        .enumerate()
        .map(|(channel, (d, rank))| KernelCredit {
            channel,
            log10: d.log10,
            value: d.value.is_finite().then_some(d.value),
            degenerate: d.degenerate,
            rank,
        })
        .collect())
}

/// Entry-wise mean. Each entry is summed in sorted order, so the result does
/// not depend on the order of the runs.
pub fn mean_operator(runs: &[Matrix]) -> Result<Matrix> {
    let first = runs.first().ok_or(CreditError::Empty)?;
    let (rows, cols) = first.shape();
    for (index, r) in runs.iter().enumerate() {
        if r.shape() != (rows, cols) {
            return Err(CreditError::RunShape { index, rows, cols, got_rows: r.rows(), got_cols: r.cols() });
        }
    }
    let count = runs.len() as f64;
    let mut column = vec![0.0; runs.len()];
    Ok(Matrix::from_fn(rows, cols, |i, j| {
        for (c, r) in column.iter_mut().zip(runs) {
            *c = r[(i, j)];
        }
        ordered_sum(column.iter().copied()) / count
    }))
}

/// Grey-scale image of one output's feature weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Heatmap {
    pub output: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

/// Grid used to display an input of the given shape: channels stacked
/// vertically for spatial input, a square for flat input of square length,
/// otherwise a single row.
pub fn heatmap_grid(shape: Shape) -> (usize, usize) {
    match shape {
        Shape::Spatial { channels, height, width } => (channels * height, width),
        Shape::Flat(n) => {
            let s = (n as f64).sqrt().round() as usize;
            if s * s == n {
                (s, s)
            } else {
                (1, n)
            }
        }
    }
}

/// One heatmap per row of `weights`, min-max scaled to 0..=255.
pub fn heatmaps(weights: &Matrix, input_shape: Shape) -> Vec<Heatmap> {
    let (rows, cols) = heatmap_grid(input_shape);
    debug_assert_eq!(rows * cols, weights.cols());
    (0..weights.rows())
        .map(|output| {
            let row = weights.row(output);
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pixels =
                row.iter().map(|&w| if hi > lo { ((w - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 }).collect();
            Heatmap { output, rows, cols, pixels }
        })
        .collect()
}

impl Heatmap {
    /// Plain (ASCII) PGM.
    pub fn write_pgm(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "P2")?;
        writeln!(out, "{} {}", self.cols, self.rows)?;
        writeln!(out, "255")?;
        for r in 0..self.rows {
            let line: Vec<String> = self.pixels[r * self.cols..(r + 1) * self.cols].iter().map(u8::to_string).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m<R: AsRef<[f64]>>(rows: &[R]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn credit_examples() {
        let c = block_credit(&Matrix::identity(3), None).unwrap();
        assert_eq!((c.value, c.log10, c.degenerate), (1.0, 0.0, false));
        let c = block_credit(&Matrix::from_diag(&[10.0, 10.0]), None).unwrap();
        assert!((c.value - 100.0).abs() < 1e-12 && (c.log10 - 2.0).abs() < 1e-12);
        // MᵀM = 4I
        let c = block_credit(&m(&[[2.0, 0.0], [0.0, 2.0], [0.0, 0.0]]), None).unwrap();
        assert!((c.value - 4.0).abs() < 1e-12 && (c.log10 - 4f64.log10()).abs() < 1e-12 && !c.degenerate);
    }

    #[test]
    fn sensitivity_examples() {
        let ops = vec![Matrix::identity(2); 3];
        for i in 0..3 {
            let s = block_sensitivity(&ops, i, None).unwrap().unwrap();
            assert_eq!((s.log10, s.value), (0.0, Some(1.0)));
        }
        let ops = vec![Matrix::from_diag(&[2.0, 1.0]), Matrix::from_diag(&[1.0, 3.0])];
        let s = block_sensitivity(&ops, 0, None).unwrap().unwrap();
        assert!((s.value.unwrap() - 9.0).abs() < 1e-12);
        let swapped = vec![ops[1].clone(), ops[0].clone()];
        assert_eq!(block_sensitivity(&swapped, 1, None).unwrap(), Some(s));
        assert!(block_sensitivity(&[Matrix::identity(2), Matrix::zeros(2, 3)], 0, None).unwrap().is_none());
        assert!(block_sensitivity(&ops, 2, None).is_err());
    }

    #[test]
    fn huge_sensitivity_is_kept_in_log_space() {
        let ops = vec![Matrix::from_diag(&[1e10; 40]); 3];
        let s = block_sensitivity(&ops, 0, None).unwrap().unwrap();
        assert!((s.log10 - 2.0 * 40.0 * 400.0).abs() < 1e-6);
        assert_eq!(s.value, None);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let ops: Vec<Matrix> = (0..3)
            .map(|s| {
                Matrix::from_fn(2, 2, |i, j| ((s * 4 + i * 2 + j) as f64).sin() + 1.5 * f64::from(u8::from(i == j)))
            })
            .collect();
        for i in 0..3 {
            let j = chain_jacobian(&ops, i).unwrap();
            let h = 1e-6;
            for p in 0..4 {
                let mut plus = ops.clone();
                let mut minus = ops.clone();
                plus[i][(p / 2, p % 2)] += h;
                minus[i][(p / 2, p % 2)] -= h;
                let (kp, km) = (feature_weights(&plus).unwrap(), feature_weights(&minus).unwrap());
                for q in 0..4 {
                    let fd = (kp.as_slice()[q] - km.as_slice()[q]) / (2.0 * h);
                    assert!((fd - j[(q, p)]).abs() < 1e-6, "block {i} entry ({q},{p})");
                }
            }
        }
    }

    #[test]
    fn jacobian_of_rectangular_chain_has_product_shape() {
        let ops = vec![Matrix::zeros(3, 2), Matrix::zeros(4, 3), Matrix::zeros(1, 4)];
        assert_eq!(chain_jacobian(&ops, 1).unwrap().shape(), (2, 12));
        assert!(matches!(
            feature_weights(&[Matrix::zeros(3, 2), Matrix::zeros(4, 2)]),
            Err(CreditError::Chain { prev: 0, next: 1, .. })
        ));
    }

    #[test]
    fn sensitivity_credit_duality() {
        let ops: Vec<Matrix> = (0..4)
            .map(|s| {
                Matrix::from_fn(3, 3, |i, j| ((s * 9 + i * 3 + j) as f64 * 1.3).cos() + f64::from(u8::from(i == j)))
            })
            .collect();
        let dets: Vec<GenAbsDet> = ops.iter().map(|k| block_credit(k, None).unwrap()).collect();
        let total: f64 = 3.0 * dets.iter().map(|d| d.log10).sum::<f64>();
        for (i, s) in block_sensitivities(&ops, &dets).into_iter().enumerate() {
            assert!((s.unwrap().log10 + 3.0 * dets[i].log10 - total).abs() < 1e-10);
        }
    }

    #[test]
    fn normalization_examples() {
        let n = normalize_credits(&[0.0, 0.0]).unwrap();
        assert_eq!((n.shares, n.ranks), (vec![0.5, 0.5], vec![1, 1]));
        let n = normalize_credits(&[3.7]).unwrap();
        assert_eq!((n.shares, n.ranks), (vec![1.0], vec![1]));
        let n = normalize_credits(&[9f64.log10(), 0.0]).unwrap();
        assert!((n.shares[0] - 0.9).abs() < 1e-12 && (n.shares[1] - 0.1).abs() < 1e-12);
        assert_eq!(n.ranks, vec![1, 2]);
        assert!(normalize_credits(&[]).is_err());
        assert!(normalize_credits(&[f64::NAN]).is_err());
        // Far apart in magnitude: no overflow.
        let n = normalize_credits(&[400.0, 0.0]).unwrap();
        assert_eq!(n.shares[0], 1.0);
    }

    #[test]
    fn ranks_handle_ties() {
        assert_eq!(tie_ranks(&[1.0, 3.0, 3.0 + 1e-12, 2.0]), vec![4, 1, 1, 3]);
    }

    #[test]
    fn kernel_credit_examples() {
        let meta = ConvMeta { out_channels: 1, row_ranges: vec![[0, 3]] };
        let kc = kernel_credit(&Matrix::identity(3), &meta, None).unwrap();
        assert_eq!((kc[0].value, kc[0].rank), (Some(1.0), 1));

        let base = m(&[[1.0, 0.5, 0.0, 0.2], [0.0, 1.0, 0.3, 0.0]]);
        let alpha = 3.0;
        let mut rows: Vec<Vec<f64>> = (0..2).map(|i| base.row(i).to_vec()).collect();
        rows.extend((0..2).map(|i| base.row(i).iter().map(|v| v * alpha).collect::<Vec<_>>()));
        let meta = ConvMeta { out_channels: 2, row_ranges: vec![[0, 2], [2, 4]] };
        let kc = kernel_credit(&m(&rows), &meta, None).unwrap();
        assert!((kc[1].log10 - kc[0].log10 - 2.0 * alpha.log10()).abs() < 1e-12);
        assert_eq!((kc[0].rank, kc[1].rank), (2, 1));

        let mut z = Matrix::identity(4);
        z[(2, 2)] = 0.0;
        z[(3, 3)] = 0.0;
        let kc = kernel_credit(&z, &meta, None).unwrap();
        assert!(!kc[0].degenerate && kc[1].degenerate);
        let bad = ConvMeta { out_channels: 1, row_ranges: vec![[0, 9]] };
        assert!(kernel_credit(&z, &bad, None).is_err());
    }

    #[test]
    fn feature_weight_examples() {
        let w = m(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        assert_eq!(feature_weights(std::slice::from_ref(&w)).unwrap(), w);
        assert_eq!(feature_weights(&vec![Matrix::identity(3); 4]).unwrap(), Matrix::identity(3));
        let dims = [81, 128, 64, 24, 10];
        let chain: Vec<Matrix> = dims.windows(2).map(|p| Matrix::zeros(p[1], p[0])).collect();
        assert_eq!(feature_weights(&chain).unwrap().shape(), (10, 81));
    }

    #[test]
    fn mean_examples() {
        let i = Matrix::identity(2);
        assert_eq!(mean_operator(std::slice::from_ref(&i)).unwrap(), i);
        assert_eq!(mean_operator(&[i.clone(), i.scale(3.0)]).unwrap(), i.scale(2.0));
        assert!(mean_operator(&[]).is_err());
        assert!(mean_operator(&[i.clone(), Matrix::zeros(2, 3)]).is_err());
        let runs: Vec<Matrix> =
            (0..10).map(|r| Matrix::from_fn(2, 2, |a, b| ((r * 4 + a * 2 + b) as f64 * 0.77).tan())).collect();
        let mut reversed = runs.clone();
        reversed.reverse();
        assert_eq!(mean_operator(&runs).unwrap(), mean_operator(&reversed).unwrap());
    }

    #[test]
    fn heatmap_layout_and_pgm() {
        assert_eq!(heatmap_grid(Shape::Flat(81)), (9, 9));
        assert_eq!(heatmap_grid(Shape::Flat(10)), (1, 10));
        assert_eq!(heatmap_grid(Shape::Spatial { channels: 2, height: 3, width: 4 }), (6, 4));
        let w = Matrix::from_fn(2, 4, |i, j| if i == 0 { j as f64 } else { 1.0 });
        let maps = heatmaps(&w, Shape::Flat(4));
        assert_eq!(maps[0].pixels, vec![0, 85, 170, 255]);
        assert_eq!(maps[1].pixels, vec![0; 4]);
        let mut buf = Vec::new();
        maps[0].write_pgm(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "P2\n2 2\n255\n0 85\n170 255\n");
    }
}

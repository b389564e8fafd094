//! Deep feature factorization: NMF of the last-layer feature map into spatial
//! concepts, and the target-class coverage statistic built on top of it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::argmax;
use crate::model::HeadWeights;
use crate::tensor::Tensor;

pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_ITERS: usize = 200;
const EPS: f64 = 1e-12;

/// `A ≈ W·H` for the `K x (h·w)` unfolding `A` of a feature map.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Factorization {
    pub rank: usize,
    /// Feature channels K.
    pub rows: usize,
    /// Spatial cells h·w.
    pub cols: usize,
    /// `K x rank`, row-major.
    pub basis: Vec<f64>,
    /// `rank x (h·w)`, row-major.
    pub loadings: Vec<f64>,
    /// Frobenius norm `||A - W·H||` after each iteration.
    pub error_trace: Vec<f64>,
}

/// Factorizes `features` (`[K, h, w]`) with Lee-Seung multiplicative updates.
///
/// Negative entries are clamped to zero first.
pub fn dff(features: &Tensor, rank: usize, iters: usize, seed: u64) -> Result<Factorization> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(Error::Shape {
            op: "dff",
            expected: vec![0, 0, 0],
            found: shape.to_vec(),
        });
    }
    let (k, n) = (shape[0], shape[1] * shape[2]);
    let a: Vec<f64> = features.data().iter().map(|&v| v.max(0.0)).collect();
    nmf(&a, k, n, rank, iters, seed)
}

/// NMF of a row-major nonnegative `rows x cols` matrix.
pub fn nmf(a: &[f64], rows: usize, cols: usize, rank: usize, iters: usize, seed: u64) -> Result<Factorization> {
    if a.len() != rows * cols {
        return Err(Error::Shape {
            op: "nmf",
            expected: vec![rows, cols],
            found: vec![a.len()],
        });
    }
    if rank == 0 || rank > rows.min(cols) {
        return Err(Error::invalid(format!(
            "nmf rank {rank} must be in 1..={}",
            rows.min(cols)
        )));
    }
    if a.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("nmf input must be finite and nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // uniform on (0, 1]
    let mut w: Vec<f64> = (0..rows * rank).map(|_| 1.0 - rng.gen::<f64>()).collect();
    let mut h: Vec<f64> = (0..rank * cols).map(|_| 1.0 - rng.gen::<f64>()).collect();
    let mut trace = Vec::with_capacity(iters);

    for _ in 0..iters {
        // H <- H ⊙ (WᵀA) / (WᵀW H + eps)
        let wta = matmul_tn(&w, a, rows, rank, cols);
        let wtw = matmul_tn(&w, &w, rows, rank, rank);
        let wtwh = matmul(&wtw, &h, rank, rank, cols);
        for ((hv, &num), &den) in h.iter_mut().zip(&wta).zip(&wtwh) {
            *hv *= num / (den + EPS);
        }
        // W <- W ⊙ (A Hᵀ) / (W H Hᵀ + eps)
        let aht = matmul_nt(a, &h, rows, cols, rank);
        let hht = matmul_nt(&h, &h, rank, cols, rank);
        let whht = matmul(&w, &hht, rows, rank, rank);
        for ((wv, &num), &den) in w.iter_mut().zip(&aht).zip(&whht) {
            *wv *= num / (den + EPS);
        }
        trace.push(frobenius_residual(a, &w, &h, rows, rank, cols));
    }

    Ok(Factorization {
        rank,
        rows,
        cols,
        basis: w,
        loadings: h,
        error_trace: trace,
    })
}

/// `||A - W H||_F`.
pub fn frobenius_residual(a: &[f64], w: &[f64], h: &[f64], rows: usize, rank: usize, cols: usize) -> f64 {
    let wh = matmul(w, h, rows, rank, cols);
    a.iter().zip(&wh).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

// (m x k) * (k x n)
fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

// aᵀ b with a: (m x k), b: (m x n) -> (k x n)
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[p * n + j] += av * b[i * n + j];
            }
        }
    }
    out
}

// a bᵀ with a: (m x k), b: (n x k) -> (m x n)
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[j * k + p]).sum();
        }
    }
    out
}

/// Concept attribution and target-class coverage of one factorization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DffResult {
    pub rank: usize,
    pub target: usize,
    /// Class assigned to each concept (column of the basis).
    pub concept_class: Vec<usize>,
    /// Dominant concept of each spatial cell.
    pub cell_assignment: Vec<usize>,
    /// Fraction of cells whose concept is attributed to `target`.
    pub coverage: f64,
}

/// Attributes each concept `j` to `argmax_c sum_k w_k^c W[k, j]` and each cell to
/// `argmax_j H[j, cell]`; outputs listed in `excluded` (e.g. a masked background
/// slot) never win a concept. Ties go to the lowest index.
pub fn coverage(f: &Factorization, head: &HeadWeights, target: usize, excluded: &[usize]) -> Result<DffResult> {
    let (k, n) = (head.feature_channels(), head.num_outputs());
    if f.rows != k {
        return Err(Error::Shape {
            op: "coverage",
            expected: vec![k, f.rank],
            found: vec![f.rows, f.rank],
        });
    }
    if target >= n {
        return Err(Error::ClassOutOfRange {
            index: target,
            count: n,
        });
    }
    let weight = head.weight.data();
    let concept_class: Vec<usize> = (0..f.rank)
        .map(|j| {
            let scores: Vec<f64> = (0..n)
                .map(|c| {
                    if excluded.contains(&c) {
                        f64::NEG_INFINITY
                    } else {
                        (0..k).map(|kk| weight[kk * n + c] * f.basis[kk * f.rank + j]).sum()
                    }
                })
                .collect();
            argmax(&scores)
        })
        .collect();
    let cell_assignment: Vec<usize> = (0..f.cols)
        .map(|cell| {
            let col: Vec<f64> = (0..f.rank).map(|j| f.loadings[j * f.cols + cell]).collect();
            argmax(&col)
        })
        .collect();
    let hits = cell_assignment
        .iter()
        .filter(|&&j| concept_class[j] == target)
        .count();
    Ok(DffResult {
        rank: f.rank,
        target,
        coverage: hits as f64 / f.cols as f64,
        concept_class,
        cell_assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rank_one(u: &[f64], v: &[f64]) -> Vec<f64> {
        u.iter().flat_map(|&a| v.iter().map(move |&b| a * b)).collect()
    }

    fn norm(a: &[f64]) -> f64 {
        a.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn rank_one_recovered() {
        let u = [0.3, 1.2, 0.0, 2.5, 0.7];
        let v = [1.0, 0.1, 0.4, 0.9, 2.0, 0.0, 0.6];
        let a = rank_one(&u, &v);
        let f = nmf(&a, 5, 7, 1, 200, 11).unwrap();
        let rel = f.error_trace.last().unwrap() / norm(&a);
        assert!(rel < 1e-3, "relative error {rel}");
    }

    #[test]
    fn zero_matrix_zero_trace() {
        let f = nmf(&[0.0; 12], 3, 4, 2, 50, 0).unwrap();
        assert_eq!(f.error_trace.len(), 50);
        assert!(f.error_trace.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn rank_bounds() {
        assert!(nmf(&[1.0; 12], 3, 4, 4, 10, 0).is_err());
        assert!(nmf(&[1.0; 12], 3, 4, 0, 10, 0).is_err());
        assert!(nmf(&[1.0; 12], 3, 4, 3, 10, 0).is_ok());
    }

    fn head_two_class() -> HeadWeights {
        // K = 2: feature 0 votes class 0, feature 1 votes class 1 (background slot = 2)
        HeadWeights::new(
            Tensor::new(vec![2, 3], vec![1.0, 0.0, 5.0, 0.0, 1.0, 0.0]).unwrap(),
            Tensor::from_vec(vec![0.0; 3]),
        )
        .unwrap()
    }

    #[test]
    fn single_concept_on_target_covers_everything() {
        let f = Factorization {
            rank: 1,
            rows: 2,
            cols: 4,
            basis: vec![1.0, 0.0],
            loadings: vec![0.5, 1.0, 0.1, 2.0],
            error_trace: vec![],
        };
        let r = coverage(&f, &head_two_class(), 0, &[2]).unwrap();
        assert_eq!(r.coverage, 1.0);
        // without masking the background output wins feature 0
        let r = coverage(&f, &head_two_class(), 0, &[]).unwrap();
        assert_eq!(r.concept_class, vec![2]);
        assert_eq!(r.coverage, 0.0);
    }

    #[test]
    fn absent_target_gives_zero() {
        let f = Factorization {
            rank: 2,
            rows: 2,
            cols: 3,
            basis: vec![0.0, 0.0, 1.0, 1.0],
            loadings: vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
            error_trace: vec![],
        };
        let r = coverage(&f, &head_two_class(), 0, &[2]).unwrap();
        assert_eq!(r.concept_class, vec![1, 1]);
        assert_eq!(r.coverage, 0.0);
    }
}

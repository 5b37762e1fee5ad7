//! Brute-force references for the pruning and search paths.
//!
//! Nothing here reuses the optimized linear algebra of [`crate::numerics`]
//! or the pruner: factorizations are naive loops so that agreement between
//! the two is evidence, not tautology.

use crate::error::{Error, Result};
use crate::leveldb::{LevelAssignment, LevelDatabase};
use crate::model::{forward, ModelParams};
use crate::numerics::Matrix;
use crate::pruner::{LayerHessian, StructureGroup};

const MAX_MASKS: u128 = 10_000;
const MAX_ASSIGNMENTS: usize = 5_000;

fn naive_cholesky(a: &Matrix) -> Result<Vec<Vec<f64>>> {
    let n = a.rows();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a.get(i, i) - s;
                if !(d > 0.0) {
                    return Err(Error::NotPositiveDefinite(format!("oracle pivot {i}")));
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a.get(i, j) - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Solves `m · x = b` for several right-hand sides (columns of `b`) by
/// Gauss-Jordan elimination with partial pivoting.
fn gauss_solve(m: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = m.len();
    let rhs = b.first().map_or(0, Vec::len);
    let mut aug: Vec<Vec<f64>> = m
        .iter()
        .zip(b)
        .map(|(row, brow)| row.iter().chain(brow).copied().collect())
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
            .expect("non-empty");
        if aug[piv][col].abs() < 1e-300 {
            return Err(Error::NotPositiveDefinite("oracle system is singular".into()));
        }
        aug.swap(col, piv);
        let p = aug[col][col];
        aug[col].iter_mut().for_each(|v| *v /= p);
        for r in 0..n {
            if r != col {
                let f = aug[r][col];
                if f != 0.0 {
                    for c in col..n + rhs {
                        aug[r][c] -= f * aug[col][c];
                    }
                }
            }
        }
    }
    Ok(aug.into_iter().map(|row| row[n..].to_vec()).collect())
}

/// `argmin_{Ŵ : Ŵ_{:,mask} = 0} ‖(W − Ŵ)X‖_F` for `XXᵀ = h`, solved through
/// the normal equations on the retained columns:
/// `Ŵ_R = W · h_{:,R} · (h_{R,R})⁻¹`.
pub fn least_squares_reconstruction(w: &Matrix, h: &Matrix, mask: &[usize]) -> Result<Matrix> {
    let d = w.cols();
    let retained: Vec<usize> = (0..d).filter(|c| !mask.contains(c)).collect();
    let mut out = Matrix::zeros(w.rows(), d);
    if retained.is_empty() {
        return Ok(out);
    }
    // (h_RR) Ŵ_Rᵀ = (W h_{:,R})ᵀ = h_{R,:} Wᵀ
    let h_rr: Vec<Vec<f64>> = retained
        .iter()
        .map(|&i| retained.iter().map(|&j| h.get(i, j)).collect())
        .collect();
    let rhs: Vec<Vec<f64>> = retained
        .iter()
        .map(|&i| {
            (0..w.rows())
                .map(|r| (0..d).map(|k| h.get(i, k) * w.get(r, k)).sum())
                .collect()
        })
        .collect();
    let sol = gauss_solve(&h_rr, &rhs)?;
    for (ri, &c) in retained.iter().enumerate() {
        for r in 0..w.rows() {
            out.set(r, c, sol[ri][r]);
        }
    }
    Ok(out)
}

/// `‖(W − Ŵ)X‖_F²` with `X` the lower Cholesky factor of `h`.
pub fn reconstruction_error(w: &Matrix, w_hat: &Matrix, h: &Matrix) -> Result<f64> {
    let l = naive_cholesky(h)?;
    let n = h.rows();
    let mut err = 0.0;
    for r in 0..w.rows() {
        for j in 0..n {
            let v: f64 = (j..n).map(|k| (w.get(r, k) - w_hat.get(r, k)) * l[k][j]).sum();
            err += v * v;
        }
    }
    Ok(err)
}

fn damped(h: &LayerHessian) -> Matrix {
    let n = h.h.rows();
    let mean = (0..n).map(|i| h.h.get(i, i)).sum::<f64>() / n.max(1) as f64;
    Matrix::from_fn(n, n, |r, c| h.h.get(r, c) + if r == c { h.damp * mean } else { 0.0 })
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Every `k`-subset of `0..n` in lexicographic order.
pub fn k_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Exact minimizer over all `k`-group masks of the compensated
/// reconstruction error. Returns the pruned columns (ascending) and the error.
pub fn exhaustive_mask_search(
    w: &Matrix,
    hessian: &LayerHessian,
    groups: &[StructureGroup],
    k: usize,
) -> Result<(Vec<usize>, f64)> {
    let count = binomial(groups.len(), k);
    if count > MAX_MASKS || k > groups.len() {
        return Err(Error::Size(format!(
            "C({}, {k}) = {count} masks exceeds {MAX_MASKS}",
            groups.len()
        )));
    }
    let h = damped(hessian);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for subset in k_subsets(groups.len(), k) {
        let mut mask: Vec<usize> = subset.iter().flat_map(|&g| groups[g].columns.clone()).collect();
        mask.sort_unstable();
        let w_hat = least_squares_reconstruction(w, &h, &mask)?;
        let err = reconstruction_error(w, &w_hat, &h)?;
        if best.as_ref().is_none_or(|(bm, be)| err < *be || (err == *be && mask < *bm)) {
            best = Some((mask, err));
        }
    }
    Ok(best.expect("at least one subset"))
}

/// All ways to write `total` as `parts` ordered terms in `0..=max`,
/// lexicographically.
pub fn compositions(total: usize, parts: usize, max: usize) -> Vec<Vec<usize>> {
    fn rec(total: usize, parts: usize, max: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 0 {
            if total == 0 {
                out.push(prefix.clone());
            }
            return;
        }
        for v in 0..=max.min(total) {
            if total - v <= (parts - 1) * max {
                prefix.push(v);
                rec(total - v, parts - 1, max, prefix, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(total, parts, max, &mut Vec::new(), &mut out);
    out
}

/// Mean KL(dense ‖ candidate) over the non-initial positions of whole
/// sequences covering `budget`, with softmax and logarithms written out.
pub fn naive_kl(dense: &ModelParams, candidate: &ModelParams, slice: &[Vec<u32>], budget: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0;
    for seq in slice {
        if used >= budget {
            break;
        }
        let p = forward(dense, seq)?;
        let q = forward(candidate, seq)?;
        for r in 1..seq.len() {
            let probs = |row: &[f64]| {
                let m = row.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect::<Vec<_>>()
            };
            let (pr, qr) = (probs(p.row(r)), probs(q.row(r)));
            for (a, b) in pr.iter().zip(&qr) {
                if *a > 0.0 {
                    total += a * (a / b).ln();
                }
            }
            used += 1;
        }
    }
    if used < budget {
        return Err(Error::Data(format!("budget {budget} exceeds the {used} positions available")));
    }
    Ok(total / used as f64)
}

/// Exact one-shot minimizer over every assignment meeting the per-kind
/// level sums. Ties go to the smaller assignment.
pub fn exhaustive_assignment_search(
    db: &LevelDatabase,
    dense: &ModelParams,
    slice: &[Vec<u32>],
    budget_per_kind: (usize, usize),
    fitness_tokens: usize,
) -> Result<(LevelAssignment, f64)> {
    let n = db.config.n_layers;
    let nl = db.n_levels();
    let attn = compositions(budget_per_kind.0, n, nl);
    let mlp = compositions(budget_per_kind.1, n, nl);
    let count = attn.len() * mlp.len();
    if count > MAX_ASSIGNMENTS {
        return Err(Error::Size(format!("{count} feasible assignments exceeds {MAX_ASSIGNMENTS}")));
    }
    if count == 0 {
        return Err(Error::Constraint(format!("no assignment meets the level sums {budget_per_kind:?}")));
    }
    let mut best: Option<(LevelAssignment, f64)> = None;
    for a in &attn {
        for m in &mlp {
            let cand = LevelAssignment {
                attn_levels: a.clone(),
                mlp_levels: m.clone(),
            };
            let kl = naive_kl(dense, &db.stitch(&cand)?, slice, fitness_tokens)?;
            if best.as_ref().is_none_or(|(ba, bk)| kl < *bk || (kl == *bk && cand < *ba)) {
                best = Some((cand, kl));
            }
        }
    }
    Ok(best.expect("non-empty"))
}

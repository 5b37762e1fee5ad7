//! Layer-wise second-order structured pruning.
//!
//! For a module's output matrix `W` (rows × d_in) and the Gram matrix
//! `H = Σ x xᵀ` of its inputs, removing a column set `M` with the optimal
//! compensation of the remaining columns costs
//!
//! ```text
//! score(M) = Σ_i W_{i,M} · ((H⁻¹)_{M,M})⁻¹ · W_{i,M}ᵀ
//! δ        = −W_{:,M} · ((H⁻¹)_{M,M})⁻¹ · (H⁻¹)_{M,:}
//! ```
//!
//! Structures are removed one group at a time; after each removal the
//! inverse Hessian is downdated so it stays the inverse over the retained
//! columns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_traced, ModelConfig, ModelParams, ModuleId, ModuleKind};
use crate::numerics::{gemm, psd_inverse, spd_inverse, Matrix};

/// Sequences per forward pass while collecting activations.
const HESSIAN_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerHessian {
    pub module: ModuleId,
    /// `Σ x xᵀ` over every captured input row (undamped).
    pub h: Matrix,
    pub n_samples: usize,
    pub damp: f64,
}

impl LayerHessian {
    /// Gram matrix of the rows of `x` (one input vector per row).
    pub fn from_activations(module: ModuleId, x: &Matrix, damp: f64) -> Self {
        let mut h = Matrix::zeros(x.cols(), x.cols());
        accumulate_gram(&mut h, x);
        Self {
            module,
            h,
            n_samples: x.rows(),
            damp,
        }
    }

    /// `(H + damp·mean(diag)·I)⁻¹`, with failures tagged by module.
    pub fn damped_inverse(&self) -> Result<Matrix> {
        psd_inverse(&self.h, self.damp).map_err(|e| Error::SingularHessian {
            module: self.module,
            reason: e.to_string(),
        })
    }
}

fn accumulate_gram(h: &mut Matrix, x: &Matrix) {
    let (n, d) = (x.rows(), x.cols());
    gemm(d, n, d, 1.0, x.data(), true, x.data(), false, 1.0, h.data_mut());
    // xᵀx is symmetric in exact arithmetic; make it so in floating point.
    for r in 0..d {
        for c in r + 1..d {
            let v = 0.5 * (h.get(r, c) + h.get(c, r));
            h.set(r, c, v);
            h.set(c, r, v);
        }
    }
}

/// Accumulates the input Gram matrix of every present module's output
/// matrix (W_o for attention, W_down for MLP) over `seqs` in one sweep of
/// dense forwards. Returned in `config.module_ids()` order, skipping
/// removed modules.
pub fn accumulate_hessians(params: &ModelParams, seqs: &[Vec<u32>], damp: f64) -> Result<Vec<LayerHessian>> {
    if seqs.is_empty() || seqs.iter().all(Vec::is_empty) {
        return Err(Error::Data("hessian calibration slice is empty".into()));
    }
    let mut out: Vec<LayerHessian> = Vec::new();
    for (i, layer) in params.layers.iter().enumerate() {
        if let Some(a) = &layer.attn {
            let d = a.wo.cols();
            out.push(LayerHessian {
                module: ModuleId::attention(i),
                h: Matrix::zeros(d, d),
                n_samples: 0,
                damp,
            });
        }
        if let Some(m) = &layer.mlp {
            let d = m.w_down.cols();
            out.push(LayerHessian {
                module: ModuleId::mlp(i),
                h: Matrix::zeros(d, d),
                n_samples: 0,
                damp,
            });
        }
    }
    for chunk in seqs.chunks(HESSIAN_CHUNK) {
        let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
        let (_, trace) = forward_traced(params, &refs)?;
        for hess in &mut out {
            let lt = &trace.layers[hess.module.layer];
            let x = match hess.module.kind {
                ModuleKind::Attention => &lt.attn.as_ref().expect("present").ctx,
                ModuleKind::Mlp => &lt.mlp.as_ref().expect("present").act,
            };
            accumulate_gram(&mut hess.h, x);
            hess.n_samples += x.rows();
        }
    }
    Ok(out)
}

/// Hessian of a single module; see [`accumulate_hessians`].
pub fn accumulate_hessian(
    params: &ModelParams,
    seqs: &[Vec<u32>],
    module: ModuleId,
    damp: f64,
) -> Result<LayerHessian> {
    if module.layer >= params.layers.len() {
        return Err(Error::Index(format!("{module} does not exist")));
    }
    accumulate_hessians(params, seqs, damp)?
        .into_iter()
        .find(|h| h.module == module)
        .ok_or_else(|| Error::Index(format!("{module} has been removed")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureGroup {
    pub module: ModuleId,
    /// Column indices of the module's output matrix.
    pub columns: Vec<usize>,
}

/// The prunable groups of a dense module: one per attention head
/// (head_dim columns of W_o) or one per `m` consecutive W_down columns.
pub fn structure_groups(config: &ModelConfig, module: ModuleId) -> Vec<StructureGroup> {
    let (n, width) = match module.kind {
        ModuleKind::Attention => (config.n_heads, config.head_dim()),
        ModuleKind::Mlp => (config.mlp_groups(), config.prune_granularity_m),
    };
    (0..n)
        .map(|g| StructureGroup {
            module,
            columns: (g * width..(g + 1) * width).collect(),
        })
        .collect()
}

fn check_mask(w: &Matrix, h_inv: &Matrix, mask: &[usize]) -> Result<()> {
    if h_inv.rows() != w.cols() || h_inv.cols() != w.cols() {
        return Err(Error::Shape(format!(
            "inverse Hessian {}x{} for weight with {} columns",
            h_inv.rows(),
            h_inv.cols(),
            w.cols()
        )));
    }
    if let Some(&bad) = mask.iter().find(|&&c| c >= w.cols()) {
        return Err(Error::Index(format!("mask column {bad} >= {}", w.cols())));
    }
    Ok(())
}

fn mask_block_inverse(h_inv: &Matrix, mask: &[usize]) -> Result<Matrix> {
    spd_inverse(&h_inv.submatrix(mask, mask)).map_err(|_| Error::SingularSubmatrix {
        mask: mask.to_vec(),
    })
}

/// Output-error increase of removing columns `mask` with optimal
/// compensation.
pub fn obs_score(w: &Matrix, h_inv: &Matrix, mask: &[usize]) -> Result<f64> {
    check_mask(w, h_inv, mask)?;
    if mask.is_empty() {
        return Ok(0.0);
    }
    let a = mask_block_inverse(h_inv, mask)?;
    let wm = w.select_cols(mask);
    let mut wa = Matrix::zeros(wm.rows(), mask.len());
    gemm(wm.rows(), mask.len(), mask.len(), 1.0, wm.data(), false, a.data(), false, 0.0, wa.data_mut());
    let s: f64 = wa.data().iter().zip(wm.data()).map(|(x, y)| x * y).sum();
    Ok(s.max(0.0))
}

/// Compensation `δ` for removing `mask`.
pub fn obs_delta(w: &Matrix, h_inv: &Matrix, mask: &[usize]) -> Result<Matrix> {
    check_mask(w, h_inv, mask)?;
    let mut delta = Matrix::zeros(w.rows(), w.cols());
    if mask.is_empty() {
        return Ok(delta);
    }
    let a = mask_block_inverse(h_inv, mask)?;
    let wm = w.select_cols(mask);
    let k = mask.len();
    let mut wa = Matrix::zeros(w.rows(), k);
    gemm(w.rows(), k, k, 1.0, wm.data(), false, a.data(), false, 0.0, wa.data_mut());
    let hm = h_inv.select_rows(mask);
    gemm(w.rows(), k, w.cols(), -1.0, wa.data(), false, hm.data(), false, 0.0, delta.data_mut());
    Ok(delta)
}

/// `Ŵ = W + δ` with the masked columns then set exactly to zero.
pub fn obs_update(w: &Matrix, h_inv: &Matrix, mask: &[usize]) -> Result<Matrix> {
    let delta = obs_delta(w, h_inv, mask)?;
    let mut out = w.add(&delta)?;
    zero_columns(&mut out, mask);
    Ok(out)
}

fn zero_columns(w: &mut Matrix, cols: &[usize]) {
    for r in 0..w.rows() {
        for &c in cols {
            w.set(r, c, 0.0);
        }
    }
}

/// `H⁻¹ ← H⁻¹ − H⁻¹_{:,M} ((H⁻¹)_{M,M})⁻¹ H⁻¹_{M,:}`: the inverse of the
/// Hessian restricted to the retained columns, embedded with zeros on `M`.
pub fn downdate_inverse(h_inv: &Matrix, mask: &[usize]) -> Result<Matrix> {
    if mask.is_empty() {
        return Ok(h_inv.clone());
    }
    let a = mask_block_inverse(h_inv, mask)?;
    let n = h_inv.rows();
    let k = mask.len();
    let rows_m = h_inv.select_rows(mask);
    let mut tmp = Matrix::zeros(k, n);
    gemm(k, k, n, 1.0, a.data(), false, rows_m.data(), false, 0.0, tmp.data_mut());
    let mut out = h_inv.clone();
    gemm(n, k, n, -1.0, rows_m.data(), true, tmp.data(), false, 1.0, out.data_mut());
    for &m in mask {
        for j in 0..n {
            out.set(m, j, 0.0);
            out.set(j, m, 0.0);
        }
    }
    for r in 0..n {
        for c in r + 1..n {
            let v = 0.5 * (out.get(r, c) + out.get(c, r));
            out.set(r, c, v);
            out.set(c, r, v);
        }
    }
    Ok(out)
}

/// Snapshot after one greedy removal step.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneSolution {
    pub module: ModuleId,
    /// Indices (into the group list) removed so far, in removal order.
    pub removed_groups: Vec<usize>,
    /// Every pruned column so far, ascending.
    pub mask: Vec<usize>,
    /// `weights − original`.
    pub delta: Matrix,
    /// Objective value of this step's removal.
    pub step_score: f64,
    /// Sum of step scores: the total output error versus the dense weights.
    pub score: f64,
    pub weights: Matrix,
}

/// Removes `n_groups` groups one at a time, each time taking the group with
/// the lowest OBS score under the current weights and inverse Hessian
/// (lowest group index on ties). Returns one snapshot per removal.
pub fn greedy_structured_prune(
    w: &Matrix,
    hessian: &LayerHessian,
    groups: &[StructureGroup],
    n_groups: usize,
) -> Result<Vec<PruneSolution>> {
    if n_groups > groups.len() {
        return Err(Error::Config(format!(
            "cannot prune {n_groups} of {} groups",
            groups.len()
        )));
    }
    if hessian.h.rows() != w.cols() {
        return Err(Error::Shape(format!(
            "{}: Hessian is {}x{}, weight has {} columns",
            hessian.module,
            hessian.h.rows(),
            hessian.h.cols(),
            w.cols()
        )));
    }
    let mut h_inv = hessian.damped_inverse()?;
    let mut current = w.clone();
    let mut removed: Vec<usize> = Vec::new();
    let mut mask: Vec<usize> = Vec::new();
    let mut total = 0.0;
    let mut out = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let mut best: Option<(usize, f64)> = None;
        for (g, group) in groups.iter().enumerate() {
            if removed.contains(&g) {
                continue;
            }
            let s = obs_score(&current, &h_inv, &group.columns)?;
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((g, s));
            }
        }
        let (g, step_score) = best.expect("n_groups <= groups.len()");
        let cols = &groups[g].columns;
        current = obs_update(&current, &h_inv, cols)?;
        h_inv = downdate_inverse(&h_inv, cols)?;
        removed.push(g);
        mask.extend_from_slice(cols);
        mask.sort_unstable();
        zero_columns(&mut current, &mask);
        total += step_score;
        out.push(PruneSolution {
            module: hessian.module,
            removed_groups: removed.clone(),
            mask: mask.clone(),
            delta: current.sub(w)?,
            step_score,
            score: total,
            weights: current.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cholesky, dampen, matmul, matmul_nt};
    use crate::oracle::{exhaustive_mask_search, least_squares_reconstruction};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn psd(n: usize, samples: usize, rng: &mut impl Rng) -> Matrix {
        let x = random(n, samples, rng);
        matmul_nt(&x, &x).unwrap()
    }

    fn module() -> ModuleId {
        ModuleId::mlp(0)
    }

    /// ‖WX − ŴX‖_F² with X the Cholesky factor of the damped Hessian.
    fn brute_error(w: &Matrix, w_hat: &Matrix, h: &Matrix, damp: f64) -> f64 {
        let x = cholesky(&dampen(h, damp).unwrap()).unwrap();
        let diff = w.sub(w_hat).unwrap();
        matmul(&diff, &x).unwrap().frobenius_sq()
    }

    #[test]
    fn identity_hessian_reduces_to_column_norms() {
        let w = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let i = Matrix::identity(2);
        assert_eq!(obs_score(&w, &i, &[0]).unwrap(), 10.0);
        assert_eq!(obs_score(&w, &i, &[1]).unwrap(), 20.0);
        assert_eq!(obs_score(&w, &i, &[]).unwrap(), 0.0);
        let upd = obs_update(&w, &i, &[0]).unwrap();
        assert_eq!(upd, Matrix::from_rows(&[[0.0, 2.0], [0.0, 4.0]]));
        assert_eq!(obs_update(&w, &i, &[0, 1]).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn score_matches_brute_force_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let w = random(4, 6, &mut rng);
            let h = psd(6, 10, &mut rng);
            let damp = 1e-4;
            let h_inv = psd_inverse(&h, damp).unwrap();
            let a = rng.gen_range(0..6);
            let b = (a + rng.gen_range(1..6)) % 6;
            let mask = [a.min(b), a.max(b)];
            let score = obs_score(&w, &h_inv, &mask).unwrap();
            let w_hat = obs_update(&w, &h_inv, &mask).unwrap();
            let brute = brute_error(&w, &w_hat, &h, damp);
            assert!(((score - brute) / brute).abs() <= 1e-6, "{score} vs {brute}");
        }
    }

    #[test]
    fn update_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..10 {
            let w = random(5, 7, &mut rng);
            let h = psd(7, 12, &mut rng);
            let damp = 1e-3;
            let h_inv = psd_inverse(&h, damp).unwrap();
            let mask = vec![1, 4, 5];
            let ours = obs_update(&w, &h_inv, &mask).unwrap();
            let oracle = least_squares_reconstruction(&w, &dampen(&h, damp).unwrap(), &mask).unwrap();
            let rel = ours.sub(&oracle).unwrap().frobenius() / oracle.frobenius();
            assert!(rel <= 1e-6, "rel {rel}");
            // δ vanishes outside the affected columns only when H is diagonal;
            // here it must at least leave masked columns exactly zero.
            for r in 0..5 {
                for &c in &mask {
                    assert_eq!(ours.get(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn perturbing_retained_columns_never_helps() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let w = random(3, 6, &mut rng);
        let h = psd(6, 9, &mut rng);
        let damp = 1e-4;
        let h_inv = psd_inverse(&h, damp).unwrap();
        let mask = [0, 3];
        let w_hat = obs_update(&w, &h_inv, &mask).unwrap();
        let base = brute_error(&w, &w_hat, &h, damp);
        for _ in 0..50 {
            let mut p = w_hat.clone();
            let (r, c) = (rng.gen_range(0..3), [1, 2, 4, 5][rng.gen_range(0..4)]);
            p.set(r, c, p.get(r, c) + rng.gen_range(-1e-3..1e-3));
            assert!(brute_error(&w, &p, &h, damp) >= base * (1.0 - 1e-12));
        }
    }

    #[test]
    fn singular_submatrix_is_reported() {
        let w = Matrix::from_rows(&[[1.0, 2.0]]);
        let h_inv = Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(
            obs_score(&w, &h_inv, &[0]),
            Err(Error::SingularSubmatrix { .. })
        ));
        assert!(matches!(obs_score(&w, &h_inv, &[2]), Err(Error::Index(_))));
    }

    #[test]
    fn hessian_outer_product_cases() {
        let mut e = Matrix::zeros(1, 4);
        e.set(0, 2, 1.0);
        let h = LayerHessian::from_activations(module(), &e, 0.0);
        let mut expect = Matrix::zeros(4, 4);
        expect.set(2, 2, 1.0);
        assert_eq!(h.h, expect);

        let x = Matrix::from_rows(&[[0.5, -1.0, 2.0], [-0.5, 1.0, -2.0]]);
        let h = LayerHessian::from_activations(module(), &x, 0.0);
        let xx = Matrix::from_fn(3, 3, |r, c| 2.0 * x.get(0, r) * x.get(0, c));
        assert!(h.h.max_abs_diff(&xx) < 1e-15);
        assert_eq!(h.n_samples, 2);
    }

    #[test]
    fn hessian_matches_naive_outer_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = random(37, 9, &mut rng);
        let h = LayerHessian::from_activations(module(), &x, 0.0);
        let mut naive = Matrix::zeros(9, 9);
        for r in 0..37 {
            for i in 0..9 {
                for j in 0..9 {
                    naive.set(i, j, naive.get(i, j) + x.get(r, i) * x.get(r, j));
                }
            }
        }
        let rel = h.h.sub(&naive).unwrap().frobenius() / naive.frobenius();
        assert!(rel <= 1e-10);
    }

    #[test]
    fn model_hessians_are_symmetric_psd() {
        let c = ModelConfig::toy();
        let p = ModelParams::init(&c, 3).unwrap();
        let seqs: Vec<Vec<u32>> = (0..3).map(|s| (0..20).map(|i| (i * 7 + s * 13) % 512).collect()).collect();
        let hs = accumulate_hessians(&p, &seqs, 1e-4).unwrap();
        assert_eq!(hs.len(), 8);
        for h in &hs {
            assert_eq!(h.n_samples, 60);
            assert!(h.h.is_symmetric(1e-12));
            assert!(cholesky(&dampen(&h.h, 1e-6).unwrap()).is_ok());
        }
        assert_eq!(hs[0].h.rows(), 64);
        assert_eq!(hs[1].h.rows(), 160);
        let single = accumulate_hessian(&p, &seqs, ModuleId::mlp(2), 1e-4).unwrap();
        assert_eq!(single, hs[5]);
        assert!(accumulate_hessians(&p, &[], 1e-4).is_err());
    }

    fn toy_problem(seed: u64, groups: usize, width: usize) -> (Matrix, LayerHessian, Vec<StructureGroup>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = groups * width;
        let w = random(6, d, &mut rng);
        let x = random(3 * d, d, &mut rng);
        let h = LayerHessian::from_activations(module(), &x, 1e-4);
        let gs = (0..groups)
            .map(|g| StructureGroup {
                module: module(),
                columns: (g * width..(g + 1) * width).collect(),
            })
            .collect();
        (w, h, gs)
    }

    #[test]
    fn zero_group_goes_first_for_free() {
        let (mut w, h, gs) = toy_problem(5, 4, 2);
        for r in 0..w.rows() {
            w.set(r, 4, 0.0);
            w.set(r, 5, 0.0);
        }
        let sol = greedy_structured_prune(&w, &h, &gs, 1).unwrap();
        assert_eq!(sol[0].removed_groups, vec![2]);
        assert_eq!(sol[0].score, 0.0);
    }

    #[test]
    fn full_removal_zeroes_weights() {
        let (w, h, gs) = toy_problem(6, 4, 3);
        let sol = greedy_structured_prune(&w, &h, &gs, 4).unwrap();
        assert_eq!(sol.len(), 4);
        assert_eq!(sol[3].weights, Matrix::zeros(6, 12));
        assert!(greedy_structured_prune(&w, &h, &gs, 5).is_err());
    }

    #[test]
    fn greedy_close_to_exhaustive_and_monotone() {
        for seed in 0..8 {
            let (w, h, gs) = toy_problem(100 + seed, 4, 2);
            let sol = greedy_structured_prune(&w, &h, &gs, 4).unwrap();
            for pair in sol.windows(2) {
                assert!(pair[1].score >= pair[0].score);
            }
            for s in &sol {
                let brute = brute_error(&w, &s.weights, &h.h, h.damp);
                assert!(((s.score - brute) / brute.max(1e-300)).abs() <= 1e-6);
            }
            let (_, best) = exhaustive_mask_search(&w, &h, &gs, 2).unwrap();
            assert!(sol[1].score <= 1.5 * best + 1e-12, "seed {seed}: {} vs {best}", sol[1].score);
        }
    }

    #[test]
    fn path_consistency() {
        let (w, h, gs) = toy_problem(9, 5, 2);
        let three = greedy_structured_prune(&w, &h, &gs, 3).unwrap();
        let four = greedy_structured_prune(&w, &h, &gs, 4).unwrap();
        assert_eq!(&four[..3], &three[..]);
    }
}

//! Next-token training of (possibly pruned) models with a hand-written
//! backward pass through the fixed decoder architecture.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_traced, AttnTrace, MlpTrace, ModelParams, RopeTable};
use crate::model::{Attention, Mlp};
use crate::numerics::{gemm, log_softmax_into, matmul, matmul_tn, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub token_budget: usize,
    pub batch_tokens: usize,
    pub optimizer: Optimizer,
    #[serde(default)]
    pub schedule: Schedule,
    pub seed: u64,
}

impl TrainConfig {
    /// Candidate training during search.
    pub fn search(token_budget: usize, seed: u64) -> Self {
        Self {
            learning_rate: 1e-5,
            token_budget,
            batch_tokens: 250,
            optimizer: Optimizer::adam(),
            schedule: Schedule::Constant,
            seed,
        }
    }

    /// Post-search recovery training.
    pub fn recovery(token_budget: usize, seed: u64) -> Self {
        Self {
            learning_rate: 1e-4,
            token_budget,
            batch_tokens: 512,
            optimizer: Optimizer::adam(),
            schedule: Schedule::Cosine,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.batch_tokens == 0 {
            return Err(Error::Config("batch_tokens must be positive".into()));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::Config("Adam needs betas in [0, 1) and eps > 0".into()));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.token_budget / self.batch_tokens
    }
}

fn rms_backward(x: &Matrix, inv: &[f64], g: &Matrix, dy: &Matrix, dx: &mut Matrix, dg: &mut Matrix) {
    let d = x.cols();
    let gs = g.data();
    for r in 0..x.rows() {
        let (xr, dyr, ir) = (x.row(r), dy.row(r), inv[r]);
        let s: f64 = (0..d).map(|j| dyr[j] * gs[j] * xr[j]).sum();
        let c = ir * ir * ir * s / d as f64;
        let dgr = dg.data_mut();
        for j in 0..d {
            dgr[j] += dyr[j] * xr[j] * ir;
        }
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o += ir * gs[j] * dyr[j] - xr[j] * c;
        }
    }
}

fn add_assign(a: &mut Matrix, b: &Matrix) {
    a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
}

fn mlp_backward(m: &Mlp, tr: &MlpTrace, x_in: &Matrix, dx: &mut Matrix, gm: &mut Mlp) -> Result<()> {
    add_assign(&mut gm.w_down, &matmul_tn(dx, &tr.act)?);
    let dact = matmul(dx, &m.w_down)?;
    let mut dgate = Matrix::zeros(dact.rows(), dact.cols());
    let mut dup = Matrix::zeros(dact.rows(), dact.cols());
    for i in 0..dact.len() {
        let (g, u, da) = (tr.gate.data()[i], tr.up.data()[i], dact.data()[i]);
        let s = 1.0 / (1.0 + (-g).exp());
        dup.data_mut()[i] = da * g * s;
        dgate.data_mut()[i] = da * u * s * (1.0 + g * (1.0 - s));
    }
    add_assign(&mut gm.w_gate, &matmul_tn(&dgate, &tr.normed)?);
    add_assign(&mut gm.w_up, &matmul_tn(&dup, &tr.normed)?);
    let mut dnormed = matmul(&dgate, &m.w_gate)?;
    add_assign(&mut dnormed, &matmul(&dup, &m.w_up)?);
    rms_backward(x_in, &tr.inv_rms, &m.norm, &dnormed, dx, &mut gm.norm);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    a: &Attention,
    tr: &AttnTrace,
    x_in: &Matrix,
    offsets: &[usize],
    rope: &RopeTable,
    params: &ModelParams,
    dx: &mut Matrix,
    ga: &mut Attention,
) -> Result<()> {
    let config = &params.config;
    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let n_heads = a.heads.len();
    let n_kv = a.kv_heads.len();
    add_assign(&mut ga.wo, &matmul_tn(dx, &tr.ctx)?);
    let dctx = matmul(dx, &a.wo)?;
    let rows = x_in.rows();
    let mut dq = Matrix::zeros(rows, n_heads * hd);
    let mut dk = Matrix::zeros(rows, n_kv * hd);
    let mut dv = Matrix::zeros(rows, n_kv * hd);

    let block = |m: &Matrix, o: usize, t: usize, slot: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(t * hd);
        for r in o..o + t {
            out.extend_from_slice(&m.row(r)[slot * hd..(slot + 1) * hd]);
        }
        out
    };
    let scatter_add = |m: &mut Matrix, o: usize, t: usize, slot: usize, src: &[f64]| {
        for r in 0..t {
            let dst = &mut m.row_mut(o + r)[slot * hd..(slot + 1) * hd];
            dst.iter_mut().zip(&src[r * hd..]).for_each(|(d, s)| *d += s);
        }
    };

    for s in 0..offsets.len() - 1 {
        let (o, t) = (offsets[s], offsets[s + 1] - offsets[s]);
        for (j, &head) in a.heads.iter().enumerate() {
            let slot = a.kv_slot(head, config);
            let p = &tr.probs[s * n_heads + j];
            let dout = block(&dctx, o, t, j);
            let (qj, kj, vj) = (block(&tr.q, o, t, j), block(&tr.k, o, t, slot), block(&tr.v, o, t, slot));
            let mut dp = vec![0.0; t * t];
            gemm(t, hd, t, 1.0, &dout, false, &vj, true, 0.0, &mut dp);
            let mut dvj = vec![0.0; t * hd];
            gemm(t, t, hd, 1.0, p, true, &dout, false, 0.0, &mut dvj);
            scatter_add(&mut dv, o, t, slot, &dvj);
            for r in 0..t {
                let (pr, dpr) = (&p[r * t..(r + 1) * t], &mut dp[r * t..(r + 1) * t]);
                let dot: f64 = pr.iter().zip(dpr.iter()).map(|(a, b)| a * b).sum();
                dpr.iter_mut().zip(pr).for_each(|(d, &pv)| *d = pv * (*d - dot));
            }
            let mut dqj = vec![0.0; t * hd];
            gemm(t, t, hd, scale, &dp, false, &kj, false, 0.0, &mut dqj);
            scatter_add(&mut dq, o, t, j, &dqj);
            let mut dkj = vec![0.0; t * hd];
            gemm(t, t, hd, scale, &dp, true, &qj, false, 0.0, &mut dkj);
            scatter_add(&mut dk, o, t, slot, &dkj);
        }
        for (pos, r) in (o..o + t).enumerate() {
            for h in 0..n_heads {
                rope.rotate_back(&mut dq.row_mut(r)[h * hd..(h + 1) * hd], pos);
            }
            for h in 0..n_kv {
                rope.rotate_back(&mut dk.row_mut(r)[h * hd..(h + 1) * hd], pos);
            }
        }
    }
    add_assign(&mut ga.wq, &matmul_tn(&dq, &tr.normed)?);
    add_assign(&mut ga.wk, &matmul_tn(&dk, &tr.normed)?);
    add_assign(&mut ga.wv, &matmul_tn(&dv, &tr.normed)?);
    let mut dnormed = matmul(&dq, &a.wq)?;
    add_assign(&mut dnormed, &matmul(&dk, &a.wk)?);
    add_assign(&mut dnormed, &matmul(&dv, &a.wv)?);
    rms_backward(x_in, &tr.inv_rms, &a.norm, &dnormed, dx, &mut ga.norm);
    Ok(())
}

/// Mean next-token cross-entropy over `seqs` and its gradient with respect
/// to every tensor, returned in a parameter-shaped buffer.
pub fn loss_and_grad(params: &ModelParams, seqs: &[&[u32]]) -> Result<(f64, ModelParams)> {
    let mut grads = params.zeros_like();
    let n_targets: usize = seqs.iter().map(|s| s.len().saturating_sub(1)).sum();
    if n_targets == 0 {
        return Ok((0.0, grads));
    }
    let (logits, trace) = forward_traced(params, seqs)?;
    let config = &params.config;
    let v = config.vocab_size;
    let inv_n = 1.0 / n_targets as f64;

    let mut dlogits = Matrix::zeros(logits.rows(), v);
    let mut loss = 0.0;
    let mut lp = vec![0.0; v];
    for s in 0..seqs.len() {
        for r in trace.offsets[s]..trace.offsets[s + 1] - 1 {
            let target = trace.tokens[r + 1] as usize;
            log_softmax_into(logits.row(r), &mut lp);
            loss -= lp[target];
            let dr = dlogits.row_mut(r);
            for (d, l) in dr.iter_mut().zip(&lp) {
                *d = l.exp() * inv_n;
            }
            dr[target] -= inv_n;
        }
    }
    loss *= inv_n;

    grads.head = matmul_tn(&dlogits, &trace.final_normed)?;
    let dfinal = matmul(&dlogits, &params.head)?;
    let mut dx = Matrix::zeros(dfinal.rows(), dfinal.cols());
    rms_backward(
        &trace.final_in,
        &trace.final_inv_rms,
        &params.final_norm,
        &dfinal,
        &mut dx,
        &mut grads.final_norm,
    );

    let longest = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let rope = RopeTable::new(config, longest);
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let lt = &trace.layers[l];
        let gl = &mut grads.layers[l];
        if let (Some(m), Some(tr), Some(gm)) = (&layer.mlp, &lt.mlp, gl.mlp.as_mut()) {
            mlp_backward(m, tr, &lt.mlp_in, &mut dx, gm)?;
        }
        if let (Some(a), Some(tr), Some(ga)) = (&layer.attn, &lt.attn, gl.attn.as_mut()) {
            attention_backward(a, tr, &lt.attn_in, &trace.offsets, &rope, params, &mut dx, ga)?;
        }
    }
    for (r, &t) in trace.tokens.iter().enumerate() {
        let dst = grads.embedding.row_mut(t as usize);
        dst.iter_mut().zip(dx.row(r)).for_each(|(a, b)| *a += b);
    }
    Ok((loss, grads))
}

/// Cuts the shuffled slice into `steps` batches of exactly `batch_tokens`
/// tokens each; a batch may hold pieces of several sequences.
fn batches<'a>(slice: &'a [Vec<u32>], cfg: &TrainConfig) -> Result<Vec<Vec<&'a [u32]>>> {
    let steps = cfg.steps();
    if steps == 0 {
        return Ok(Vec::new());
    }
    let available: usize = slice.iter().map(Vec::len).sum();
    let needed = steps * cfg.batch_tokens;
    if available < needed {
        return Err(Error::Data(format!(
            "training needs {needed} tokens, slice has {available}"
        )));
    }
    let mut order: Vec<usize> = (0..slice.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut out = Vec::with_capacity(steps);
    let (mut idx, mut off) = (0, 0);
    for _ in 0..steps {
        let mut batch = Vec::new();
        let mut remaining = cfg.batch_tokens;
        while remaining > 0 {
            let seq = &slice[order[idx]];
            let take = remaining.min(seq.len() - off);
            batch.push(&seq[off..off + take]);
            remaining -= take;
            off += take;
            if off == seq.len() {
                idx += 1;
                off = 0;
            }
        }
        out.push(batch);
    }
    Ok(out)
}

/// Trains a copy of `params`; returns it with the per-batch loss trace.
pub fn train(params: &ModelParams, slice: &[Vec<u32>], cfg: &TrainConfig) -> Result<(ModelParams, Vec<f64>)> {
    cfg.validate()?;
    let plan = batches(slice, cfg)?;
    let mut p = params.clone();
    let n_tensors = p.tensors().len();
    let mut moments: Vec<(Vec<f64>, Vec<f64>)> = match cfg.optimizer {
        Optimizer::Sgd => Vec::new(),
        Optimizer::Adam { .. } => p
            .tensors()
            .iter()
            .map(|(_, t)| (vec![0.0; t.len()], vec![0.0; t.len()]))
            .collect(),
    };
    let mut trace = Vec::with_capacity(plan.len());
    for (step, batch) in plan.iter().enumerate() {
        let (loss, grads) = loss_and_grad(&p, batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { batch: step, loss });
        }
        trace.push(loss);
        let lr = match cfg.schedule {
            Schedule::Constant => cfg.learning_rate,
            Schedule::Cosine => {
                let frac = step as f64 / plan.len() as f64;
                cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        };
        let g = grads.tensors();
        debug_assert_eq!(g.len(), n_tensors);
        for (i, (_, w)) in p.tensors_mut().into_iter().enumerate() {
            let gi = g[i].1.data();
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (x, dx) in w.data_mut().iter_mut().zip(gi) {
                        *x -= lr * dx;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let t = (step + 1) as i32;
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    let (m, v) = &mut moments[i];
                    for (k, x) in w.data_mut().iter_mut().enumerate() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * gi[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * gi[k] * gi[k];
                        *x -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
    Ok((p, trace))
}

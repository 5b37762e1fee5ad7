use crate::error::{Error, Result};
use crate::numerics::{gemm, Matrix};

use super::{Attention, Mlp, ModelConfig, ModelParams};

/// Precomputed rotary angles for positions `0..len`.
pub(crate) struct RopeTable {
    cos: Vec<f64>,
    sin: Vec<f64>,
    half: usize,
}

impl RopeTable {
    pub(crate) fn new(config: &ModelConfig, len: usize) -> Self {
        let half = config.head_dim() / 2;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for pos in 0..len {
            for i in 0..half {
                let freq = config.rope_theta.powf(-((2 * i) as f64) / (2 * half) as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self { cos, sin, half }
    }

    /// Rotates one head vector in place.
    #[inline]
    pub(crate) fn rotate(&self, x: &mut [f64], pos: usize) {
        let h = self.half;
        let (c, s) = (&self.cos[pos * h..], &self.sin[pos * h..]);
        for i in 0..h {
            let (a, b) = (x[i], x[i + h]);
            x[i] = a * c[i] - b * s[i];
            x[i + h] = a * s[i] + b * c[i];
        }
    }

    /// Applies the transpose rotation (the backward of `rotate`).
    #[inline]
    pub(crate) fn rotate_back(&self, g: &mut [f64], pos: usize) {
        let h = self.half;
        let (c, s) = (&self.cos[pos * h..], &self.sin[pos * h..]);
        for i in 0..h {
            let (a, b) = (g[i], g[i + h]);
            g[i] = a * c[i] + b * s[i];
            g[i + h] = -a * s[i] + b * c[i];
        }
    }
}

/// Row-wise RMS normalization times `scale`. Returns the normalized rows and
/// each row's inverse RMS.
pub(crate) fn rms_norm_rows(x: &Matrix, scale: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let d = x.cols();
    let g = scale.data();
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let ir = 1.0 / (ms + eps).sqrt();
        inv.push(ir);
        for ((o, v), gi) in out.row_mut(r).iter_mut().zip(row).zip(g) {
            *o = v * ir * gi;
        }
    }
    (out, inv)
}

/// `x · wᵀ` for row activations `x` and a weight stored as (out × in).
pub(crate) fn linear(x: &Matrix, w: &Matrix) -> Matrix {
    debug_assert_eq!(x.cols(), w.cols());
    let mut y = Matrix::zeros(x.rows(), w.rows());
    gemm(
        x.rows(),
        x.cols(),
        w.rows(),
        1.0,
        x.data(),
        false,
        w.data(),
        true,
        0.0,
        y.data_mut(),
    );
    y
}

#[inline]
pub(crate) fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

pub struct AttnTrace {
    pub inv_rms: Vec<f64>,
    pub normed: Matrix,
    /// Queries and keys after rotation.
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Attention probabilities, one T×T block per (sequence, retained head),
    /// sequence-major.
    pub probs: Vec<Vec<f64>>,
    /// Concatenated head outputs: the input to W_o.
    pub ctx: Matrix,
}

pub struct MlpTrace {
    pub inv_rms: Vec<f64>,
    pub normed: Matrix,
    pub gate: Matrix,
    pub up: Matrix,
    /// `silu(gate) ⊙ up`: the input to W_down.
    pub act: Matrix,
}

pub struct LayerTrace {
    pub attn_in: Matrix,
    pub attn: Option<AttnTrace>,
    pub mlp_in: Matrix,
    pub mlp: Option<MlpTrace>,
}

/// Intermediate activations of one batched forward pass.
pub struct Trace {
    /// Row offsets of each sequence; `offsets.len() == n_sequences + 1`.
    pub offsets: Vec<usize>,
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerTrace>,
    pub final_in: Matrix,
    pub final_inv_rms: Vec<f64>,
    pub final_normed: Matrix,
}

fn check_tokens(config: &ModelConfig, seqs: &[&[u32]]) -> Result<()> {
    for (s, seq) in seqs.iter().enumerate() {
        if seq.len() > config.max_seq_len {
            return Err(Error::Index(format!(
                "sequence {s} has {} tokens, max_seq_len is {}",
                seq.len(),
                config.max_seq_len
            )));
        }
        if let Some((p, &t)) = seq
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= config.vocab_size)
        {
            return Err(Error::Index(format!(
                "token {t} at sequence {s} position {p} exceeds vocabulary {}",
                config.vocab_size
            )));
        }
    }
    Ok(())
}

fn attention_block(
    a: &Attention,
    config: &ModelConfig,
    rope: &RopeTable,
    x: &Matrix,
    offsets: &[usize],
) -> (Matrix, AttnTrace) {
    let hd = config.head_dim();
    let (normed, inv_rms) = rms_norm_rows(x, &a.norm, config.norm_eps);
    let mut q = linear(&normed, &a.wq);
    let mut k = linear(&normed, &a.wk);
    let v = linear(&normed, &a.wv);
    for s in 0..offsets.len() - 1 {
        for (pos, r) in (offsets[s]..offsets[s + 1]).enumerate() {
            for h in 0..a.heads.len() {
                rope.rotate(&mut q.row_mut(r)[h * hd..(h + 1) * hd], pos);
            }
            for h in 0..a.kv_heads.len() {
                rope.rotate(&mut k.row_mut(r)[h * hd..(h + 1) * hd], pos);
            }
        }
    }

    let n_heads = a.heads.len();
    let mut ctx = Matrix::zeros(x.rows(), n_heads * hd);
    let mut probs = Vec::with_capacity((offsets.len() - 1) * n_heads);
    let scale = 1.0 / (hd as f64).sqrt();
    for s in 0..offsets.len() - 1 {
        let (o, t) = (offsets[s], offsets[s + 1] - offsets[s]);
        let block = |m: &Matrix, slot: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(t * hd);
            for r in o..o + t {
                out.extend_from_slice(&m.row(r)[slot * hd..(slot + 1) * hd]);
            }
            out
        };
        let kv: Vec<(Vec<f64>, Vec<f64>)> = (0..a.kv_heads.len())
            .map(|slot| (block(&k, slot), block(&v, slot)))
            .collect();
        for (j, &head) in a.heads.iter().enumerate() {
            let qj = block(&q, j);
            let (kj, vj) = &kv[a.kv_slot(head, config)];
            let mut p = vec![0.0; t * t];
            gemm(t, hd, t, scale, &qj, false, kj, true, 0.0, &mut p);
            for r in 0..t {
                let row = &mut p[r * t..(r + 1) * t];
                let max = row[..=r].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for e in row[..=r].iter_mut() {
                    *e = (*e - max).exp();
                    z += *e;
                }
                row[..=r].iter_mut().for_each(|e| *e /= z);
                row[r + 1..].iter_mut().for_each(|e| *e = 0.0);
            }
            let mut out = vec![0.0; t * hd];
            gemm(t, t, hd, 1.0, &p, false, vj, false, 0.0, &mut out);
            for r in 0..t {
                ctx.row_mut(o + r)[j * hd..(j + 1) * hd].copy_from_slice(&out[r * hd..(r + 1) * hd]);
            }
            probs.push(p);
        }
    }
    let y = linear(&ctx, &a.wo);
    (
        y,
        AttnTrace {
            inv_rms,
            normed,
            q,
            k,
            v,
            probs,
            ctx,
        },
    )
}

fn mlp_block(m: &Mlp, config: &ModelConfig, x: &Matrix) -> (Matrix, MlpTrace) {
    let (normed, inv_rms) = rms_norm_rows(x, &m.norm, config.norm_eps);
    let gate = linear(&normed, &m.w_gate);
    let up = linear(&normed, &m.w_up);
    let mut act = Matrix::zeros(gate.rows(), gate.cols());
    for ((o, &g), &u) in act.data_mut().iter_mut().zip(gate.data()).zip(up.data()) {
        *o = g * sigmoid(g) * u;
    }
    let y = linear(&act, &m.w_down);
    (
        y,
        MlpTrace {
            inv_rms,
            normed,
            gate,
            up,
            act,
        },
    )
}

fn add_into(x: &mut Matrix, y: &Matrix) {
    x.data_mut()
        .iter_mut()
        .zip(y.data())
        .for_each(|(a, b)| *a += b);
}

fn run(params: &ModelParams, seqs: &[&[u32]], keep: bool) -> Result<(Matrix, Option<Trace>)> {
    let config = &params.config;
    check_tokens(config, seqs)?;
    let mut offsets = Vec::with_capacity(seqs.len() + 1);
    offsets.push(0);
    let mut tokens = Vec::new();
    for s in seqs {
        tokens.extend_from_slice(s);
        offsets.push(tokens.len());
    }
    let longest = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let rope = RopeTable::new(config, longest);

    let d = config.d_model;
    let mut x = Matrix::zeros(tokens.len(), d);
    for (r, &t) in tokens.iter().enumerate() {
        x.row_mut(r).copy_from_slice(params.embedding.row(t as usize));
    }

    let mut layer_traces = Vec::new();
    for layer in &params.layers {
        let attn_in = if keep { Some(x.clone()) } else { None };
        let attn = layer.attn.as_ref().map(|a| {
            let (y, tr) = attention_block(a, config, &rope, &x, &offsets);
            add_into(&mut x, &y);
            tr
        });
        let mlp_in = if keep { Some(x.clone()) } else { None };
        let mlp = layer.mlp.as_ref().map(|m| {
            let (y, tr) = mlp_block(m, config, &x);
            add_into(&mut x, &y);
            tr
        });
        if keep {
            layer_traces.push(LayerTrace {
                attn_in: attn_in.unwrap(),
                attn,
                mlp_in: mlp_in.unwrap(),
                mlp,
            });
        }
    }

    let (final_normed, final_inv_rms) = rms_norm_rows(&x, &params.final_norm, config.norm_eps);
    let logits = linear(&final_normed, &params.head);
    let trace = keep.then(|| Trace {
        offsets,
        tokens,
        layers: layer_traces,
        final_in: x,
        final_inv_rms,
        final_normed,
    });
    Ok((logits, trace))
}

/// Per-position vocabulary logits for one token sequence.
pub fn forward(params: &ModelParams, tokens: &[u32]) -> Result<Matrix> {
    forward_batch(params, &[tokens])
}

/// Logits for several sequences, rows concatenated in input order. Each
/// sequence attends only within itself.
pub fn forward_batch(params: &ModelParams, seqs: &[&[u32]]) -> Result<Matrix> {
    Ok(run(params, seqs, false)?.0)
}

/// Forward pass that also returns every intermediate needed for backward
/// and Hessian accumulation.
pub(crate) fn forward_traced(params: &ModelParams, seqs: &[&[u32]]) -> Result<(Matrix, Trace)> {
    let (logits, trace) = run(params, seqs, true)?;
    Ok((logits, trace.expect("trace requested")))
}

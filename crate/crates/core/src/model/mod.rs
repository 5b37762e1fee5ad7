//! A small pre-norm decoder-only transformer (RMS norm, rotary positions,
//! gated MLP) whose attention heads, MLP channels and whole sub-blocks can be
//! removed structurally.

pub(crate) mod checkpoint;
mod forward;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{forward, forward_batch, AttnTrace, LayerTrace, MlpTrace, Trace};
pub(crate) use forward::{forward_traced, RopeTable};
#[cfg(test)]
pub(crate) use forward::rms_norm_rows;

fn default_rope_theta() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_inter: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// MLP channels are pruned in groups of this many.
    pub prune_granularity_m: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    /// The 4-layer GQA configuration used throughout tests and benches.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 8,
            n_kv_heads: 4,
            d_inter: 160,
            vocab_size: 512,
            max_seq_len: 128,
            prune_granularity_m: 8,
            rope_theta: default_rope_theta(),
            norm_eps: default_norm_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.n_kv_heads == 0 {
            return fail("d_model, n_heads and n_kv_heads must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return fail("d_model must be divisible by n_heads");
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return fail("n_heads must be divisible by n_kv_heads");
        }
        if self.head_dim() % 2 != 0 {
            return fail("head dimension must be even for rotary encoding");
        }
        if self.prune_granularity_m == 0 || self.d_inter % self.prune_granularity_m != 0 {
            return fail("d_inter must be a positive multiple of prune_granularity_m");
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return fail("vocab_size and max_seq_len must be positive");
        }
        if self.vocab_size > u32::MAX as usize {
            return fail("vocab_size must fit in u32 token ids");
        }
        if !(self.norm_eps > 0.0) || !(self.rope_theta > 0.0) {
            return fail("norm_eps and rope_theta must be positive");
        }
        Ok(())
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    #[inline]
    pub fn kv_group(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    #[inline]
    pub fn is_gqa(&self) -> bool {
        self.n_kv_heads < self.n_heads
    }

    pub fn mlp_groups(&self) -> usize {
        self.d_inter / self.prune_granularity_m
    }

    /// Parameters removed along with one query head (Q rows and O columns,
    /// plus K and V rows when heads are not shared).
    pub fn params_per_head(&self) -> usize {
        let per = self.head_dim() * self.d_model;
        if self.is_gqa() {
            2 * per
        } else {
            4 * per
        }
    }

    /// K/V parameters that survive until the whole attention block is removed.
    pub fn shared_kv_params(&self) -> usize {
        if self.is_gqa() {
            2 * self.n_kv_heads * self.head_dim() * self.d_model
        } else {
            0
        }
    }

    pub fn params_per_channel(&self) -> usize {
        3 * self.d_model
    }

    pub fn dense_attention_params(&self) -> usize {
        self.n_heads * self.params_per_head() + self.shared_kv_params()
    }

    pub fn dense_mlp_params(&self) -> usize {
        self.d_inter * self.params_per_channel()
    }

    /// Attention and MLP matrix parameters of the dense model.
    pub fn dense_prunable_params(&self) -> usize {
        self.n_layers * (self.dense_attention_params() + self.dense_mlp_params())
    }

    pub fn module_ids(&self) -> Vec<ModuleId> {
        let mut out = Vec::with_capacity(2 * self.n_layers);
        for layer in 0..self.n_layers {
            out.push(ModuleId::attention(layer));
            out.push(ModuleId::mlp(layer));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Attention,
    Mlp,
}

impl ModuleKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModuleKind::Attention => "attn",
            ModuleKind::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModuleId {
    pub layer: usize,
    pub kind: ModuleKind,
}

impl ModuleId {
    pub fn attention(layer: usize) -> Self {
        Self {
            layer,
            kind: ModuleKind::Attention,
        }
    }

    pub fn mlp(layer: usize) -> Self {
        Self {
            layer,
            kind: ModuleKind::Mlp,
        }
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}_{}", self.layer, self.kind.tag())
    }
}

/// One attention sub-block. `heads` holds the original ids of the retained
/// query heads in ascending order; `kv_heads` likewise for key/value heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub norm: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub heads: Vec<usize>,
    pub kv_heads: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub norm: Matrix,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
    /// Original ids of the retained intermediate channels, ascending.
    pub channels: Vec<usize>,
}

/// `None` means the sub-block has been removed and the residual stream
/// passes through untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub attn: Option<Attention>,
    pub mlp: Option<Mlp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub layers: Vec<Layer>,
    pub final_norm: Matrix,
    pub head: Matrix,
}

/// Indices `[start, start+len)` for every id in `ids`, concatenated.
pub(crate) fn expand_blocks(ids: &[usize], len: usize) -> Vec<usize> {
    ids.iter().flat_map(|&h| h * len..(h + 1) * len).collect()
}

fn positions_of(all: &[usize], remove: &[usize]) -> Result<Vec<usize>> {
    remove
        .iter()
        .map(|r| {
            all.iter()
                .position(|x| x == r)
                .ok_or_else(|| Error::Index(format!("structure {r} is not retained")))
        })
        .collect()
}

impl Attention {
    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Position of the key/value head serving original query head `head`.
    pub(crate) fn kv_slot(&self, head: usize, config: &ModelConfig) -> usize {
        let kv = head / config.kv_group();
        self.kv_heads
            .iter()
            .position(|&k| k == kv)
            .expect("key/value head of a retained query head must be retained")
    }

    /// Structurally drops the given original query heads. Under GQA only the
    /// Q rows and O columns go; otherwise K and V rows go with them.
    pub fn remove_heads(&mut self, remove: &[usize], config: &ModelConfig) -> Result<()> {
        let hd = config.head_dim();
        let pos = positions_of(&self.heads, remove)?;
        let keep: Vec<usize> = (0..self.heads.len()).filter(|p| !pos.contains(p)).collect();
        let keep_cols = expand_blocks(&keep, hd);
        self.wq = self.wq.select_rows(&keep_cols);
        self.wo = self.wo.select_cols(&keep_cols);
        if !config.is_gqa() {
            self.wk = self.wk.select_rows(&keep_cols);
            self.wv = self.wv.select_rows(&keep_cols);
            self.kv_heads = keep.iter().map(|&p| self.kv_heads[p]).collect();
        }
        self.heads = keep.iter().map(|&p| self.heads[p]).collect();
        Ok(())
    }

    /// Zeroes the Q rows and O columns of the given heads, keeping shapes.
    pub fn zero_heads(&mut self, zero: &[usize], config: &ModelConfig) -> Result<()> {
        let hd = config.head_dim();
        let pos = positions_of(&self.heads, zero)?;
        for &p in &pos {
            for c in p * hd..(p + 1) * hd {
                self.wq.row_mut(c).iter_mut().for_each(|v| *v = 0.0);
                for r in 0..self.wo.rows() {
                    self.wo.set(r, c, 0.0);
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.wq.len() + self.wk.len() + self.wv.len() + self.wo.len()
    }
}

impl Mlp {
    pub fn width(&self) -> usize {
        self.channels.len()
    }

    pub fn remove_channels(&mut self, remove: &[usize]) -> Result<()> {
        let pos = positions_of(&self.channels, remove)?;
        let keep: Vec<usize> = (0..self.channels.len()).filter(|p| !pos.contains(p)).collect();
        self.w_gate = self.w_gate.select_rows(&keep);
        self.w_up = self.w_up.select_rows(&keep);
        self.w_down = self.w_down.select_cols(&keep);
        self.channels = keep.iter().map(|&p| self.channels[p]).collect();
        Ok(())
    }

    pub fn zero_channels(&mut self, zero: &[usize]) -> Result<()> {
        let pos = positions_of(&self.channels, zero)?;
        for &p in &pos {
            self.w_up.row_mut(p).iter_mut().for_each(|v| *v = 0.0);
            self.w_gate.row_mut(p).iter_mut().for_each(|v| *v = 0.0);
            for r in 0..self.w_down.rows() {
                self.w_down.set(r, p, 0.0);
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.w_gate.len() + self.w_up.len() + self.w_down.len()
    }
}

impl ModelParams {
    /// Random initialization: N(0, 0.02) weights, output projections scaled
    /// by 1/sqrt(2·n_layers), unit norm scales.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let normal = Normal::new(0.0, std).expect("valid std");
        let out_std = std / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let out_normal = Normal::new(0.0, out_std).expect("valid std");
        let mut gauss = |rows, cols, dist: &Normal<f64>| {
            Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
        };
        let d = config.d_model;
        let hd = config.head_dim();
        let embedding = gauss(config.vocab_size, d, &normal);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attn = Attention {
                norm: Matrix::new(1, d, vec![1.0; d])?,
                wq: gauss(config.n_heads * hd, d, &normal),
                wk: gauss(config.n_kv_heads * hd, d, &normal),
                wv: gauss(config.n_kv_heads * hd, d, &normal),
                wo: gauss(d, config.n_heads * hd, &out_normal),
                heads: (0..config.n_heads).collect(),
                kv_heads: (0..config.n_kv_heads).collect(),
            };
            let mlp = Mlp {
                norm: Matrix::new(1, d, vec![1.0; d])?,
                w_gate: gauss(config.d_inter, d, &normal),
                w_up: gauss(config.d_inter, d, &normal),
                w_down: gauss(d, config.d_inter, &out_normal),
                channels: (0..config.d_inter).collect(),
            };
            layers.push(Layer {
                attn: Some(attn),
                mlp: Some(mlp),
            });
        }
        let head = gauss(config.vocab_size, d, &normal);
        Ok(Self {
            config: config.clone(),
            embedding,
            layers,
            final_norm: Matrix::new(1, d, vec![1.0; d])?,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// A tensor-for-tensor copy with every value set to zero (gradient buffers).
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    /// Named tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(a) = &layer.attn {
                for (n, t) in [
                    ("norm", &a.norm),
                    ("wq", &a.wq),
                    ("wk", &a.wk),
                    ("wv", &a.wv),
                    ("wo", &a.wo),
                ] {
                    out.push((format!("layers.{i}.attn.{n}"), t));
                }
            }
            if let Some(m) = &layer.mlp {
                for (n, t) in [
                    ("norm", &m.norm),
                    ("w_gate", &m.w_gate),
                    ("w_up", &m.w_up),
                    ("w_down", &m.w_down),
                ] {
                    out.push((format!("layers.{i}.mlp.{n}"), t));
                }
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Some(a) = &mut layer.attn {
                for (n, t) in [
                    ("norm", &mut a.norm),
                    ("wq", &mut a.wq),
                    ("wk", &mut a.wk),
                    ("wv", &mut a.wv),
                    ("wo", &mut a.wo),
                ] {
                    out.push((format!("layers.{i}.attn.{n}"), t));
                }
            }
            if let Some(m) = &mut layer.mlp {
                for (n, t) in [
                    ("norm", &mut m.norm),
                    ("w_gate", &mut m.w_gate),
                    ("w_up", &mut m.w_up),
                    ("w_down", &mut m.w_down),
                ] {
                    out.push((format!("layers.{i}.mlp.{n}"), t));
                }
            }
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("head".to_string(), &mut self.head));
        out
    }

    /// Attention and MLP matrix parameters actually present (norm scales,
    /// embeddings and the output head excluded).
    pub fn prunable_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.attn.as_ref().map_or(0, Attention::param_count)
                    + l.mlp.as_ref().map_or(0, Mlp::param_count)
            })
            .sum()
    }

    /// `1 − prunable/dense` for this model.
    pub fn sparsity(&self) -> f64 {
        let dense = self.config.dense_prunable_params();
        if dense == 0 {
            return 0.0;
        }
        1.0 - self.prunable_count() as f64 / dense as f64
    }

    /// Checks every tensor shape against the config and the retained-structure
    /// bookkeeping.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_model;
        let hd = c.head_dim();
        let expect = |name: &str, m: &Matrix, rows: usize, cols: usize| -> Result<()> {
            if m.shape() != (rows, cols) {
                return Err(Error::Checkpoint {
                    tensor: name.to_string(),
                    reason: format!("shape {:?}, expected ({rows}, {cols})", m.shape()),
                });
            }
            Ok(())
        };
        expect("embedding", &self.embedding, c.vocab_size, d)?;
        expect("final_norm", &self.final_norm, 1, d)?;
        expect("head", &self.head, c.vocab_size, d)?;
        if self.layers.len() != c.n_layers {
            return Err(Error::Shape(format!(
                "{} layers for config with {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(a) = &layer.attn {
                let ascending = |v: &[usize], lim: usize| {
                    v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|&x| x < lim)
                };
                if !ascending(&a.heads, c.n_heads) || !ascending(&a.kv_heads, c.n_kv_heads) {
                    return Err(Error::Shape(format!("layer {i}: invalid retained heads")));
                }
                for &h in &a.heads {
                    if !a.kv_heads.contains(&(h / c.kv_group())) {
                        return Err(Error::Shape(format!(
                            "layer {i}: head {h} lost its key/value head"
                        )));
                    }
                }
                let p = format!("layers.{i}.attn");
                expect(&format!("{p}.norm"), &a.norm, 1, d)?;
                expect(&format!("{p}.wq"), &a.wq, a.heads.len() * hd, d)?;
                expect(&format!("{p}.wk"), &a.wk, a.kv_heads.len() * hd, d)?;
                expect(&format!("{p}.wv"), &a.wv, a.kv_heads.len() * hd, d)?;
                expect(&format!("{p}.wo"), &a.wo, d, a.heads.len() * hd)?;
            }
            if let Some(m) = &layer.mlp {
                if !m.channels.windows(2).all(|w| w[0] < w[1])
                    || m.channels.iter().any(|&x| x >= c.d_inter)
                {
                    return Err(Error::Shape(format!("layer {i}: invalid retained channels")));
                }
                let w = m.channels.len();
                let p = format!("layers.{i}.mlp");
                expect(&format!("{p}.norm"), &m.norm, 1, d)?;
                expect(&format!("{p}.w_gate"), &m.w_gate, w, d)?;
                expect(&format!("{p}.w_up"), &m.w_up, w, d)?;
                expect(&format!("{p}.w_down"), &m.w_down, d, w)?;
            }
        }
        Ok(())
    }
}

//! KL fitness of a sparse candidate against the dense model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::leveldb::LevelAssignment;
use crate::model::{forward_batch, ModelParams};
use crate::numerics::{log_softmax_rows, Matrix};

const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub assignment: Option<LevelAssignment>,
    /// Mean KL(dense ‖ candidate) in nats per scored position.
    pub kl: f64,
    pub tokens_used: usize,
    pub trained_tokens: usize,
}

/// Whole sequences from the front of `slice` until `budget` non-initial
/// positions are covered.
pub fn select_sequences(slice: &[Vec<u32>], budget: usize) -> Result<&[Vec<u32>]> {
    if budget == 0 {
        return Err(Error::Data("fitness budget must be positive".into()));
    }
    let mut used = 0;
    for (i, s) in slice.iter().enumerate() {
        used += s.len().saturating_sub(1);
        if used >= budget {
            return Ok(&slice[..=i]);
        }
    }
    Err(Error::Data(format!(
        "fitness budget {budget} exceeds the {used} scored positions available"
    )))
}

fn logprobs(params: &ModelParams, seqs: &[Vec<u32>]) -> Result<Vec<Matrix>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(CHUNK) {
        let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
        let lp = log_softmax_rows(&forward_batch(params, &refs)?);
        let mut row = 0;
        for s in chunk {
            let rows: Vec<usize> = (row..row + s.len()).collect();
            out.push(lp.select_rows(&rows));
            row += s.len();
        }
    }
    Ok(out)
}

/// Dense log-probabilities over a fixed evaluation set, shared read-only
/// across candidates.
#[derive(Debug, Clone)]
pub struct DenseReference {
    seqs: Vec<Vec<u32>>,
    dense: Vec<Matrix>,
    /// `exp` of `dense`, so candidates only pay for their own softmax.
    dense_probs: Vec<Matrix>,
    tokens_used: usize,
}

impl DenseReference {
    pub fn new(dense: &ModelParams, slice: &[Vec<u32>], budget: usize) -> Result<Self> {
        let seqs = select_sequences(slice, budget)?.to_vec();
        let tokens_used = seqs.iter().map(|s| s.len() - 1).sum();
        let dense = logprobs(dense, &seqs)?;
        let dense_probs = dense
            .iter()
            .map(|m| {
                let mut p = m.clone();
                p.data_mut().iter_mut().for_each(|v| *v = v.exp());
                p
            })
            .collect();
        Ok(Self {
            dense,
            dense_probs,
            seqs,
            tokens_used,
        })
    }

    pub fn tokens_used(&self) -> usize {
        self.tokens_used
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.seqs
    }

    pub fn kl(&self, candidate: &ModelParams) -> Result<f64> {
        let cand = logprobs(candidate, &self.seqs)?;
        let mut total = 0.0;
        for ((lp, p), lq) in self.dense.iter().zip(&self.dense_probs).zip(&cand) {
            for r in 1..lp.rows() {
                total += kl_row_with_probs(p.row(r), lp.row(r), lq.row(r));
            }
        }
        Ok(total / self.tokens_used as f64)
    }

    pub fn evaluate(&self, candidate: &ModelParams) -> Result<FitnessReport> {
        Ok(FitnessReport {
            assignment: None,
            kl: self.kl(candidate)?,
            tokens_used: self.tokens_used,
            trained_tokens: 0,
        })
    }
}

fn kl_row_with_probs(p: &[f64], lp: &[f64], lq: &[f64]) -> f64 {
    p.iter()
        .zip(lp)
        .zip(lq)
        .map(|((&pi, &a), &b)| if pi == 0.0 { 0.0 } else { pi * (a - b) })
        .sum::<f64>()
        .max(0.0)
}

/// Mean KL(dense ‖ candidate) over the first whole sequences of `slice`
/// covering `budget` non-initial positions.
pub fn evaluate(
    dense: &ModelParams,
    candidate: &ModelParams,
    slice: &[Vec<u32>],
    budget: usize,
) -> Result<FitnessReport> {
    DenseReference::new(dense, slice, budget)?.evaluate(candidate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::synth_corpus;
    use crate::model::{forward, ModelConfig};

    fn setup() -> (ModelParams, ModelParams, Vec<Vec<u32>>) {
        let c = ModelConfig::toy();
        let dense = ModelParams::init(&c, 11).unwrap();
        let mut cand = dense.clone();
        cand.layers[1].attn.as_mut().unwrap().remove_heads(&[0, 3, 5], &c).unwrap();
        cand.layers[2].mlp.as_mut().unwrap().remove_channels(&(40..80).collect::<Vec<_>>()).unwrap();
        let ds = synth_corpus(3, 12, 24, c.vocab_size).unwrap();
        (dense, cand, ds.sequences)
    }

    #[test]
    fn identical_model_has_zero_kl() {
        let (dense, _, seqs) = setup();
        let r = evaluate(&dense, &dense, &seqs, 100).unwrap();
        assert_eq!(r.kl, 0.0);
        assert_eq!(r.tokens_used, 5 * 23);
    }

    #[test]
    fn removing_everything_costs_more_than_nothing() {
        let (dense, _, seqs) = setup();
        let mut empty = dense.clone();
        for l in &mut empty.layers {
            l.attn = None;
            l.mlp = None;
        }
        assert!(evaluate(&dense, &empty, &seqs, 100).unwrap().kl > 0.0);
    }

    #[test]
    fn budget_beyond_slice_is_a_data_error() {
        let (dense, cand, seqs) = setup();
        assert!(matches!(evaluate(&dense, &cand, &seqs, 12 * 23 + 1), Err(Error::Data(_))));
        assert!(evaluate(&dense, &cand, &seqs, 12 * 23).is_ok());
    }

    #[test]
    fn matches_unbatched_per_token_recomputation() {
        let (dense, cand, seqs) = setup();
        let fast = evaluate(&dense, &cand, &seqs, 150).unwrap();
        let mut total = 0.0;
        let mut n = 0;
        for s in &seqs[..7] {
            let (lp, lq) = (forward(&dense, s).unwrap(), forward(&cand, s).unwrap());
            for r in 1..s.len() {
                let softmax = |row: &[f64]| {
                    let z: f64 = row.iter().map(|v| v.exp()).sum();
                    row.iter().map(|v| v.exp() / z).collect::<Vec<_>>()
                };
                let (p, q) = (softmax(lp.row(r)), softmax(lq.row(r)));
                total += p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
                n += 1;
            }
        }
        assert_eq!(fast.tokens_used, n);
        assert!((fast.kl - total / n as f64).abs() <= 1e-8, "{} vs {}", fast.kl, total / n as f64);
    }

    #[test]
    fn cached_reference_agrees_with_fresh_evaluation() {
        let (dense, cand, seqs) = setup();
        let cache = DenseReference::new(&dense, &seqs, 90).unwrap();
        let a = cache.kl(&cand).unwrap();
        let _ = cache.kl(&dense).unwrap();
        let b = evaluate(&dense, &cand, &seqs, 90).unwrap().kl;
        assert!((a - b).abs() <= 1e-10);
        assert_eq!(cache.kl(&cand).unwrap(), a);
    }
}

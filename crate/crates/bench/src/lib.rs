//! Shared fixtures for the criterion benches.

use evoprune::calibration::synth_corpus;
use evoprune::model::ModelConfig;
use evoprune::pruner::{accumulate_hessian, structure_groups, LayerHessian, StructureGroup};
use evoprune::{Matrix, ModelParams, ModuleId};

pub const SEQ_LEN: usize = 65;

/// Toy model plus a few calibration sequences.
pub fn toy(seed: u64, n_sequences: usize) -> (ModelParams, Vec<Vec<u32>>) {
    let c = ModelConfig::toy();
    let params = ModelParams::init(&c, seed).expect("toy config is valid");
    let data = synth_corpus(seed, n_sequences, SEQ_LEN, c.vocab_size).expect("corpus");
    (params, data.sequences)
}

/// Output weights, Hessian and structure groups of one module of `params`.
pub fn module_problem(params: &ModelParams, seqs: &[Vec<u32>], module: ModuleId) -> (Matrix, LayerHessian, Vec<StructureGroup>) {
    let h = accumulate_hessian(params, seqs, module, 1e-4).expect("hessian");
    let layer = &params.layers[module.layer];
    let w = match module.kind {
        evoprune::ModuleKind::Attention => layer.attn.as_ref().expect("dense").wo.clone(),
        evoprune::ModuleKind::Mlp => layer.mlp.as_ref().expect("dense").w_down.clone(),
    };
    (w, h, structure_groups(&params.config, module))
}

pub fn square(n: usize, seed: u64) -> Matrix {
    let mut s = seed;
    Matrix::from_fn(n, n, |_, _| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    })
}

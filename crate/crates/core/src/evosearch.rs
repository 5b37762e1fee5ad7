//! Evolutionary search over level assignments with level-switch mutation
//! and multi-step, training-aware offspring selection.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{mix, Role, TokenDataset};
use crate::error::{Error, Result};
use crate::finetune::{train, Optimizer, Schedule, TrainConfig};
use crate::fitness::DenseReference;
use crate::leveldb::{prunable_params, LevelAssignment, LevelDatabase};
use crate::model::{ModelParams, ModuleKind};

const MUTATION_RETRIES: usize = 1000;
const KINDS: [ModuleKind; 2] = [ModuleKind::Attention, ModuleKind::Mlp];

/// Optimizer settings for the throwaway candidate finetunes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateTraining {
    pub learning_rate: f64,
    pub batch_tokens: usize,
    pub optimizer: Optimizer,
}

impl Default for CandidateTraining {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_tokens: 250,
            optimizer: Optimizer::adam(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSchedule {
    pub generations: usize,
    pub offspring: usize,
    pub selection_steps: usize,
    pub fitness_tokens: Vec<usize>,
    pub finetune_tokens: Vec<usize>,
    pub survivors: Vec<usize>,
    pub seed: u64,
    #[serde(default = "one")]
    pub mutation_step: usize,
    #[serde(default)]
    pub training: CandidateTraining,
    /// Record per-candidate wall time in the log (breaks byte-identity).
    #[serde(default)]
    pub timing: bool,
}

fn one() -> usize {
    1
}

impl SearchSchedule {
    /// Four selection steps with growing fitness and finetune budgets.
    pub fn desk(generations: usize, seed: u64) -> Self {
        Self {
            generations,
            offspring: 16,
            selection_steps: 4,
            fitness_tokens: vec![1024, 2048, 4096, 8192],
            finetune_tokens: vec![1000, 5000, 10000, 20000],
            survivors: vec![8, 4, 2, 1],
            seed,
            mutation_step: 1,
            training: CandidateTraining::default(),
            timing: false,
        }
    }

    /// Single-step, training-free selection.
    pub fn one_shot(generations: usize, offspring: usize, fitness_tokens: usize, seed: u64) -> Self {
        Self {
            generations,
            offspring,
            selection_steps: 1,
            fitness_tokens: vec![fitness_tokens],
            finetune_tokens: vec![0],
            survivors: vec![1],
            seed,
            mutation_step: 1,
            training: CandidateTraining::default(),
            timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.selection_steps;
        let bad = |m: String| Err(Error::Config(m));
        if s == 0 {
            return bad("selection_steps must be positive".into());
        }
        if self.fitness_tokens.len() != s || self.finetune_tokens.len() != s || self.survivors.len() != s {
            return bad(format!("fitness_tokens, finetune_tokens and survivors must all have {s} entries"));
        }
        if self.survivors.windows(2).any(|w| w[0] <= w[1]) || self.survivors[s - 1] != 1 {
            return bad(format!("survivors {:?} must strictly decrease to 1", self.survivors));
        }
        if self.survivors[0] > self.offspring + 1 {
            return bad(format!(
                "{} survivors from only {} candidates",
                self.survivors[0],
                self.offspring + 1
            ));
        }
        if self.fitness_tokens.windows(2).any(|w| w[0] > w[1])
            || self.finetune_tokens.windows(2).any(|w| w[0] > w[1])
        {
            return bad("fitness and finetune budgets must be non-decreasing".into());
        }
        if self.fitness_tokens[0] == 0 {
            return bad("fitness budgets must be positive".into());
        }
        if self.mutation_step == 0 {
            return bad("mutation_step must be positive".into());
        }
        if self.finetune_tokens.iter().any(|&t| t > 0) {
            self.train_config(self.finetune_tokens[s - 1], 0).validate()?;
        }
        Ok(())
    }

    fn train_config(&self, budget: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.training.learning_rate,
            token_budget: budget,
            batch_tokens: self.training.batch_tokens,
            optimizer: self.training.optimizer,
            schedule: Schedule::Constant,
            seed,
        }
    }
}

pub fn init_uniform(n_layers: usize, target_level: usize, n_levels: usize) -> Result<LevelAssignment> {
    if target_level > n_levels {
        return Err(Error::Config(format!("target level {target_level} exceeds {n_levels}")));
    }
    Ok(LevelAssignment::uniform(n_layers, target_level))
}

/// Raises a searched assignment to a higher uniform-equivalent target by
/// adding the per-kind residual one level at a time to random modules.
pub fn init_gradual(
    previous: &LevelAssignment,
    new_target_level: usize,
    n_levels: usize,
    seed: u64,
) -> Result<LevelAssignment> {
    let mut out = previous.clone();
    for (k, kind) in KINDS.into_iter().enumerate() {
        let levels = out.levels_mut(kind);
        let target = new_target_level * levels.len();
        let current: usize = levels.iter().sum();
        if target < current {
            return Err(Error::Constraint(format!(
                "{} target sum {target} is below the current {current}",
                kind.tag()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, k as u64, 0x6752]));
        for _ in current..target {
            let open: Vec<usize> = (0..levels.len()).filter(|&i| levels[i] < n_levels).collect();
            if open.is_empty() {
                return Err(Error::Constraint(format!(
                    "no {} module below level {n_levels} to absorb the residual",
                    kind.tag()
                )));
            }
            levels[open[rng.gen_range(0..open.len())]] += 1;
        }
    }
    Ok(out)
}

/// Moves `step` levels from one module to another of the same kind.
pub fn level_switch_mutation(
    parent: &LevelAssignment,
    n_levels: usize,
    step: usize,
    rng: &mut impl Rng,
) -> Result<LevelAssignment> {
    if step == 0 {
        return Err(Error::Config("mutation step must be positive".into()));
    }
    let n = parent.attn_levels.len();
    for _ in 0..MUTATION_RETRIES {
        let kind = KINDS[rng.gen_range(0..2)];
        if n < 2 {
            continue;
        }
        let up = rng.gen_range(0..n);
        let down = (up + rng.gen_range(1..n)) % n;
        let levels = parent.levels(kind);
        if levels[up] + step <= n_levels && levels[down] >= step {
            let mut child = parent.clone();
            child.levels_mut(kind)[up] += step;
            child.levels_mut(kind)[down] -= step;
            return Ok(child);
        }
    }
    Err(Error::InfeasibleMutation {
        retries: MUTATION_RETRIES,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub generation: usize,
    pub step: usize,
    pub candidate_index: usize,
    pub attn_levels: Vec<usize>,
    pub mlp_levels: Vec<usize>,
    pub trained_tokens: usize,
    pub fitness_tokens: usize,
    /// `None` when training diverged.
    pub kl: Option<f64>,
    pub survived: bool,
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    #[serde(rename = "final")]
    pub is_final: bool,
    pub best: LevelAssignment,
    pub kl: Option<f64>,
    pub generations: usize,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogLine {
    Candidate(CandidateRecord),
    Final(FinalRecord),
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: LevelAssignment,
    /// Fitness of the winner at the last selection step of the last generation.
    pub best_kl: f64,
    /// Winning fitness per generation.
    pub history: Vec<(usize, f64)>,
    pub log: Vec<LogLine>,
    /// Candidate scorings over the run, memoized training-free ones included.
    pub evaluations: usize,
}

impl SearchOutcome {
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for line in &self.log {
            serde_json::to_writer(&mut w, line)?;
            w.write_all(b"\n").map_err(|e| Error::io("search log", e))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out)?;
        Ok(out)
    }
}

fn finite(kl: f64) -> Option<f64> {
    kl.is_finite().then_some(kl)
}

fn check_budget(db: &LevelDatabase, a: &LevelAssignment, sums: (usize, usize)) -> Result<()> {
    a.validate(db.config.n_layers, db.n_levels())?;
    if (a.sum(ModuleKind::Attention), a.sum(ModuleKind::Mlp)) != sums {
        return Err(Error::Constraint(format!(
            "candidate {:?}/{:?} breaks the level sums {sums:?}",
            a.attn_levels, a.mlp_levels
        )));
    }
    Ok(())
}

/// Runs the search from `start`, whose per-kind level sums and parameter
/// count become the conserved budget.
pub fn run_search(
    db: &LevelDatabase,
    dense: &ModelParams,
    dataset: &TokenDataset,
    schedule: &SearchSchedule,
    start: &LevelAssignment,
) -> Result<SearchOutcome> {
    schedule.validate()?;
    let n_levels = db.n_levels();
    start.validate(db.config.n_layers, n_levels)?;
    let sums = (start.sum(ModuleKind::Attention), start.sum(ModuleKind::Mlp));
    let budget = prunable_params(&db.config, &db.spec, start);
    let finetune_slice = dataset.role(Role::Finetune);
    let references: Vec<DenseReference> = schedule
        .fitness_tokens
        .iter()
        .map(|&t| DenseReference::new(dense, dataset.role(Role::Fitness), t))
        .collect::<Result<_>>()?;

    let mut parent = start.clone();
    let mut parent_kl = f64::NAN;
    let mut history = Vec::with_capacity(schedule.generations);
    let mut log = Vec::new();
    let mut evaluations = 0;
    let mut one_shot: HashMap<(usize, LevelAssignment), f64> = HashMap::new();

    for generation in 0..schedule.generations {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[schedule.seed, generation as u64, 0x4d55]));
        let mut candidates = vec![parent.clone()];
        while candidates.len() < schedule.offspring + 1 {
            let mut tries = 0;
            let child = loop {
                let c = level_switch_mutation(&parent, n_levels, schedule.mutation_step, &mut rng)?;
                if prunable_params(&db.config, &db.spec, &c) <= budget {
                    break c;
                }
                tries += 1;
                if tries >= MUTATION_RETRIES {
                    return Err(Error::InfeasibleMutation {
                        retries: MUTATION_RETRIES,
                    });
                }
            };
            candidates.push(child);
        }
        for c in &candidates {
            check_budget(db, c, sums)?;
        }

        let mut alive: Vec<usize> = (0..candidates.len()).collect();
        for step in 0..schedule.selection_steps {
            let t_f = schedule.finetune_tokens[step];
            let reference = &references[step];
            let evaluate = |idx: usize| -> Result<(f64, usize, Option<u64>)> {
                let started = Instant::now();
                let mut model = db.stitch(&candidates[idx])?;
                let mut trained = 0;
                if t_f > 0 {
                    let seed = mix(&[schedule.seed, generation as u64, idx as u64, step as u64]);
                    let cfg = schedule.train_config(t_f, seed);
                    match train(&model, finetune_slice, &cfg) {
                        Ok((m, _)) => {
                            model = m;
                            trained = cfg.steps() * cfg.batch_tokens;
                        }
                        Err(Error::Divergence { .. }) => {
                            return Ok((f64::INFINITY, cfg.steps() * cfg.batch_tokens, None));
                        }
                        Err(e) => return Err(e),
                    }
                }
                let kl = reference.kl(&model)?;
                let kl = if kl.is_finite() { kl } else { f64::INFINITY };
                let ms = schedule.timing.then(|| started.elapsed().as_millis() as u64);
                Ok((kl, trained, ms))
            };
            let scored: Vec<(f64, usize, Option<u64>)> = if t_f == 0 {
                // Training-free fitness depends only on the assignment.
                let mut todo: Vec<usize> = Vec::new();
                for &idx in &alive {
                    let key = (step, candidates[idx].clone());
                    if !one_shot.contains_key(&key) && !todo.iter().any(|&t| candidates[t] == candidates[idx]) {
                        todo.push(idx);
                    }
                }
                let fresh: Vec<_> = todo.par_iter().map(|&i| evaluate(i)).collect::<Result<_>>()?;
                let mut timings = HashMap::new();
                for (&i, (kl, _, ms)) in todo.iter().zip(fresh) {
                    one_shot.insert((step, candidates[i].clone()), kl);
                    timings.insert(i, ms);
                }
                alive
                    .iter()
                    .map(|&i| {
                        let ms = timings.get(&i).copied().unwrap_or(schedule.timing.then_some(0));
                        (one_shot[&(step, candidates[i].clone())], 0, ms)
                    })
                    .collect()
            } else {
                alive.par_iter().map(|&i| evaluate(i)).collect::<Result<_>>()?
            };
            evaluations += alive.len();

            let mut order: Vec<usize> = (0..alive.len()).collect();
            order.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0).then(alive[a].cmp(&alive[b])));
            let keep = schedule.survivors[step].min(alive.len());
            let mut survived = vec![false; alive.len()];
            order[..keep].iter().for_each(|&i| survived[i] = true);
            for (i, &idx) in alive.iter().enumerate() {
                log.push(LogLine::Candidate(CandidateRecord {
                    generation,
                    step,
                    candidate_index: idx,
                    attn_levels: candidates[idx].attn_levels.clone(),
                    mlp_levels: candidates[idx].mlp_levels.clone(),
                    trained_tokens: scored[i].1,
                    fitness_tokens: reference.tokens_used(),
                    kl: finite(scored[i].0),
                    survived: survived[i],
                    wall_ms: scored[i].2,
                }));
            }
            if step + 1 == schedule.selection_steps {
                parent_kl = scored[order[0]].0;
            }
            let mut next: Vec<usize> = order[..keep].iter().map(|&i| alive[i]).collect();
            next.sort_unstable();
            alive = next;
        }
        parent = candidates[alive[0]].clone();
        history.push((generation, parent_kl));
    }

    log.push(LogLine::Final(FinalRecord {
        is_final: true,
        best: parent.clone(),
        kl: finite(parent_kl),
        generations: schedule.generations,
        provenance: db.provenance.hash.clone(),
    }));
    Ok(SearchOutcome {
        best: parent,
        best_kl: parent_kl,
        history,
        log,
        evaluations,
    })
}

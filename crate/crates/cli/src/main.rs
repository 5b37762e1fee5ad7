use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use evoprune::calibration::{load_tokens, save_tokens, synth_corpus, Role, TokenDataset};
use evoprune::evosearch::{init_gradual, init_uniform, run_search, SearchSchedule};
use evoprune::finetune::{train, TrainConfig};
use evoprune::fitness::evaluate;
use evoprune::io::atomic_write;
use evoprune::leveldb::{
    assignment_sparsity, build_database_from_slice, calibration_hash, BuildOptions,
};
use evoprune::model::{load_checkpoint, save_checkpoint};
use evoprune::oracle::{exhaustive_assignment_search, exhaustive_mask_search};
use evoprune::pruner::{accumulate_hessian, greedy_structured_prune, structure_groups};
use evoprune::{Error, ErrorCategory, LevelAssignment, LevelDatabase, ModelConfig, ModelParams, ModuleId, ModuleKind};

const CONFIG_VERSION: u64 = 1;

#[derive(Parser)]
#[command(name = "evoprune", version, about = "Structured pruning with a level database and evolutionary search")]
struct Cli {
    /// Seed for every random choice; overrides seeds inside config files.
    #[arg(long, global = true, env = "DLM_SEED")]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TokenArgs {
    #[arg(long)]
    tokens: PathBuf,
    /// Tokens per sequence when chunking the token file.
    #[arg(long, default_value_t = 65)]
    seq_len: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic token file.
    GenCorpus {
        #[arg(long)]
        sequences: usize,
        #[arg(long, default_value_t = 65)]
        seq_len: usize,
        #[arg(long, default_value_t = 512)]
        vocab: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Randomly initialize a model from a config file.
    InitModel {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dense model on the finetune slice of a token file.
    Pretrain {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        tokens: TokenArgs,
        #[arg(long)]
        train_cfg: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and save the sparsity-level database.
    GenDb {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        tokens: TokenArgs,
        #[arg(long, default_value_t = 10)]
        levels: usize,
        #[arg(long, default_value_t = 1e-4)]
        damp: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evolutionary search over level assignments.
    Search {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        tokens: TokenArgs,
        #[arg(long)]
        schedule: PathBuf,
        /// Target per-module level; the start is uniform at this level.
        #[arg(long)]
        level: usize,
        /// Start from this assignment raised to `--level` instead.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Assemble a pruned checkpoint from the database.
    Stitch {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        assignment: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recovery training of a (pruned) checkpoint.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        tokens: TokenArgs,
        #[arg(long)]
        train_cfg: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// KL(dense ‖ candidate) over a slice of the token file.
    EvalKl {
        #[arg(long)]
        dense: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        #[command(flatten)]
        tokens: TokenArgs,
        #[arg(long)]
        budget: usize,
        #[arg(long, value_enum, default_value_t = RoleArg::Heldout)]
        role: RoleArg,
    },
    /// Exhaustive reference solutions for small problems.
    #[command(subcommand)]
    Oracle(OracleCommand),
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Best k-group mask for one module, next to the greedy choice.
    Mask {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        tokens: TokenArgs,
        /// Module name such as L0_attn or L2_mlp.
        #[arg(long)]
        module: String,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 1e-4)]
        damp: f64,
    },
    /// Best one-shot assignment with the given per-kind level sums.
    Assignment {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        tokens: TokenArgs,
        #[arg(long)]
        attn_sum: usize,
        #[arg(long)]
        mlp_sum: usize,
        #[arg(long)]
        budget: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Hessian,
    Fitness,
    Finetune,
    Heldout,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Hessian => Role::Hessian,
            RoleArg::Fitness => Role::Fitness,
            RoleArg::Finetune => Role::Finetune,
            RoleArg::Heldout => Role::Heldout,
        }
    }
}

/// The on-disk form of a level assignment (`search --out`, `stitch --assignment`).
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AssignmentFile {
    attn_levels: Vec<usize>,
    mlp_levels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sparsity: Option<f64>,
}

struct Failure {
    category: ErrorCategory,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            category: e.category(),
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        category: ErrorCategory::Usage,
        message: message.into(),
    }
}

type CliResult<T> = Result<T, Failure>;

fn exit_code(c: ErrorCategory) -> u8 {
    match c {
        ErrorCategory::Usage => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numerical => 4,
    }
}

fn category_name(c: ErrorCategory) -> &'static str {
    match c {
        ErrorCategory::Usage => "usage",
        ErrorCategory::Data => "data",
        ErrorCategory::Numerical => "numerical",
    }
}

fn log(event: &str, fields: Value) {
    let mut line = json!({ "event": event });
    if let (Value::Object(l), Value::Object(f)) = (&mut line, fields) {
        l.extend(f);
    }
    eprintln!("{line}");
}

/// Reads a JSON config that must carry `"version": 1`; the remaining fields
/// go to `T`, which rejects unknown keys.
fn read_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::from(Error::Io {
        path: path.into(),
        source: e,
    }))?;
    let bad = |m: String| usage(format!("config {}: {m}", path.display()));
    let mut value: Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let obj = value.as_object_mut().ok_or_else(|| bad("expected a JSON object".into()))?;
    match obj.remove("version") {
        Some(Value::Number(n)) if n.as_u64() == Some(CONFIG_VERSION) => {}
        Some(v) => return Err(bad(format!("unsupported version {v}"))),
        None => return Err(bad("missing version field".into())),
    }
    serde_json::from_value(value).map_err(|e| bad(e.to_string()))
}

fn write_json_file(path: &Path, body: &impl Serialize) -> CliResult<()> {
    let mut value = serde_json::to_value(body).map_err(Error::from)?;
    if let Value::Object(m) = &mut value {
        m.insert("version".into(), CONFIG_VERSION.into());
    }
    let mut bytes = serde_json::to_vec_pretty(&value).map_err(Error::from)?;
    bytes.push(b'\n');
    Ok(atomic_write(path, &bytes)?)
}

fn print_json(v: &Value) {
    println!("{v}");
}

fn tokens_for(model: &ModelParams, t: &TokenArgs) -> CliResult<TokenDataset> {
    if t.seq_len > model.config.max_seq_len {
        return Err(usage(format!(
            "--seq-len {} exceeds the model's max_seq_len {}",
            t.seq_len, model.config.max_seq_len
        )));
    }
    Ok(load_tokens(&t.tokens, t.seq_len, model.config.vocab_size)?)
}

fn parse_module(s: &str, config: &ModelConfig) -> CliResult<ModuleId> {
    let bad = || usage(format!("module `{s}` is not of the form L<layer>_attn or L<layer>_mlp"));
    let (layer, kind) = s.strip_prefix('L').and_then(|r| r.split_once('_')).ok_or_else(bad)?;
    let layer: usize = layer.parse().map_err(|_| bad())?;
    let kind = match kind {
        "attn" => ModuleKind::Attention,
        "mlp" => ModuleKind::Mlp,
        _ => return Err(bad()),
    };
    if layer >= config.n_layers {
        return Err(usage(format!("model has {} layers, no {s}", config.n_layers)));
    }
    Ok(ModuleId { layer, kind })
}

fn seeded_train_cfg(path: &Path, seed: Option<u64>) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = read_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_training(model: &Path, tokens: &TokenArgs, train_cfg: &Path, out: &Path, seed: Option<u64>, event: &str) -> CliResult<()> {
    let params = load_checkpoint(model)?;
    let data = tokens_for(&params, tokens)?;
    let cfg = seeded_train_cfg(train_cfg, seed)?;
    log(event, json!({ "steps": cfg.steps(), "token_budget": cfg.token_budget }));
    let (trained, losses) = train(&params, data.role(Role::Finetune), &cfg)?;
    save_checkpoint(&trained, out)?;
    print_json(&json!({
        "out": out,
        "steps": losses.len(),
        "first_loss": losses.first(),
        "last_loss": losses.last(),
    }));
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenCorpus { sequences, seq_len, vocab, out } => {
            let ds = synth_corpus(seed.unwrap_or(0), sequences, seq_len, vocab)?;
            let flat: Vec<u32> = ds.sequences.concat();
            save_tokens(&out, &flat, vocab as u32)?;
            print_json(&json!({ "out": out, "sequences": sequences, "tokens": flat.len() }));
        }
        Command::InitModel { config, out } => {
            let cfg: ModelConfig = read_config(&config)?;
            cfg.validate()?;
            let params = ModelParams::init(&cfg, seed.unwrap_or(0))?;
            save_checkpoint(&params, &out)?;
            print_json(&json!({ "out": out, "params": params.prunable_count() }));
        }
        Command::Pretrain { model, tokens, train_cfg, out } => {
            run_training(&model, &tokens, &train_cfg, &out, seed, "pretrain")?;
        }
        Command::Finetune { model, tokens, train_cfg, out } => {
            run_training(&model, &tokens, &train_cfg, &out, seed, "finetune")?;
        }
        Command::GenDb { model, tokens, levels, damp, out } => {
            let params = load_checkpoint(&model)?;
            let data = tokens_for(&params, &tokens)?;
            let opts = BuildOptions {
                n_levels: levels,
                damp,
                ..Default::default()
            };
            log("gen-db", json!({ "levels": levels, "hessian_sequences": data.role(Role::Hessian).len() }));
            let db = build_database_from_slice(
                &params,
                data.role(Role::Hessian),
                calibration_hash(&data)?,
                seed.unwrap_or(0),
                opts,
            )?;
            db.save(&out)?;
            print_json(&json!({ "out": out, "entries": db.entries.len(), "provenance": db.provenance.hash }));
        }
        Command::Search { db, model, tokens, schedule, level, from, out, log: log_path } => {
            let db = LevelDatabase::load(&db)?;
            let dense = load_checkpoint(&model)?;
            if dense.config != db.config {
                return Err(usage("model config does not match the database config"));
            }
            let data = tokens_for(&dense, &tokens)?;
            let mut sched: SearchSchedule = read_config(&schedule)?;
            if let Some(s) = seed {
                sched.seed = s;
            }
            let (n_layers, n_levels) = (db.config.n_layers, db.n_levels());
            let start = match from {
                None => init_uniform(n_layers, level, n_levels)?,
                Some(p) => {
                    let prev = read_assignment(&p)?;
                    prev.validate(n_layers, n_levels)?;
                    init_gradual(&prev, level, n_levels, sched.seed)?
                }
            };
            log("search", json!({ "generations": sched.generations, "start": start }));
            let outcome = run_search(&db, &dense, &data, &sched, &start)?;
            atomic_write(&log_path, &outcome.to_jsonl()?)?;
            let kl = outcome.best_kl.is_finite().then_some(outcome.best_kl);
            let sparsity = assignment_sparsity(&db.config, &db.spec, &outcome.best);
            write_json_file(
                &out,
                &AssignmentFile {
                    attn_levels: outcome.best.attn_levels.clone(),
                    mlp_levels: outcome.best.mlp_levels.clone(),
                    kl,
                    sparsity: Some(sparsity),
                },
            )?;
            print_json(&json!({
                "best": outcome.best,
                "kl": kl,
                "sparsity": sparsity,
                "evaluations": outcome.evaluations,
            }));
        }
        Command::Stitch { db, assignment, out } => {
            let db = LevelDatabase::load(&db)?;
            let a = read_assignment(&assignment)?;
            let params = db.stitch(&a)?;
            save_checkpoint(&params, &out)?;
            print_json(&json!({
                "out": out,
                "sparsity": assignment_sparsity(&db.config, &db.spec, &a),
                "prunable_params": params.prunable_count(),
            }));
        }
        Command::EvalKl { dense, candidate, tokens, budget, role } => {
            let dense = load_checkpoint(&dense)?;
            let cand = load_checkpoint(&candidate)?;
            if dense.config != cand.config {
                return Err(usage("dense and candidate checkpoints have different configs"));
            }
            let data = tokens_for(&dense, &tokens)?;
            let report = evaluate(&dense, &cand, data.role(role.into()), budget)?;
            print_json(&serde_json::to_value(report).map_err(Error::from)?);
        }
        Command::Oracle(OracleCommand::Mask { model, tokens, module, k, damp }) => {
            let params = load_checkpoint(&model)?;
            let data = tokens_for(&params, &tokens)?;
            let id = parse_module(&module, &params.config)?;
            let hess = accumulate_hessian(&params, data.role(Role::Hessian), id, damp)?;
            let layer = &params.layers[id.layer];
            let w = match id.kind {
                ModuleKind::Attention => &layer.attn.as_ref().ok_or_else(|| usage(format!("{id} was removed")))?.wo,
                ModuleKind::Mlp => &layer.mlp.as_ref().ok_or_else(|| usage(format!("{id} was removed")))?.w_down,
            };
            let groups = structure_groups(&params.config, id);
            let (mask, error) = exhaustive_mask_search(w, &hess, &groups, k)?;
            let greedy = if k == 0 {
                None
            } else {
                greedy_structured_prune(w, &hess, &groups, k)?.pop()
            };
            print_json(&json!({
                "module": id.to_string(),
                "k": k,
                "mask": mask,
                "error": error,
                "greedy_mask": greedy.as_ref().map(|g| g.mask.clone()).unwrap_or_default(),
                "greedy_error": greedy.map_or(0.0, |g| g.score),
            }));
        }
        Command::Oracle(OracleCommand::Assignment { db, model, tokens, attn_sum, mlp_sum, budget }) => {
            let db = LevelDatabase::load(&db)?;
            let dense = load_checkpoint(&model)?;
            let data = tokens_for(&dense, &tokens)?;
            let (best, kl) =
                exhaustive_assignment_search(&db, &dense, data.role(Role::Fitness), (attn_sum, mlp_sum), budget)?;
            print_json(&json!({ "best": best, "kl": kl }));
        }
    }
    Ok(())
}

fn read_assignment(path: &Path) -> CliResult<LevelAssignment> {
    let f: AssignmentFile = read_config(path)?;
    Ok(LevelAssignment {
        attn_levels: f.attn_levels,
        mlp_levels: f.mlp_levels,
    })
}

fn fail(f: Failure) -> ExitCode {
    let line = json!({ "error": category_name(f.category), "message": f.message });
    eprintln!("{line}");
    ExitCode::from(exit_code(f.category))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            return fail(usage(first));
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            return fail(usage("--workers must be positive"));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(usage(e.to_string()));
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

//! The sparsity-level database: for every module and every level
//! `0..=n_levels`, a snapshot of the module pruned to that level.
//!
//! On disk a database is a directory holding `manifest.json`, `base.bin`
//! (embedding, final norm and head) and one `L{layer}_{attn|mlp}_lvl{i}.bin`
//! per entry, all in the checkpoint tensor format.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{Role, TokenDataset};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::model::checkpoint::{decode_tensor_file, encode_tensor_file};
use crate::model::{Attention, Layer, Mlp, ModelConfig, ModelParams, ModuleId, ModuleKind};
use crate::numerics::Matrix;
use crate::pruner::{accumulate_hessians, greedy_structured_prune, structure_groups, LayerHessian};

const MANIFEST_VERSION: u32 = 1;
const CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);

/// `round(num / den)` with halves rounded away from zero.
fn round_div(num: usize, den: usize) -> usize {
    (2 * num + den) / (2 * den)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    pub n_levels: usize,
    /// Heads removed at each level `0..=n_levels`.
    pub heads_pruned: Vec<usize>,
    /// MLP channels removed at each level `0..=n_levels`.
    pub mlp_cols_pruned: Vec<usize>,
}

/// Pruned-structure counts per level:
/// `heads[i] = round(i·n_heads/n_levels)` and
/// `cols[i] = m·round(i·d_inter/(n_levels·m))`.
pub fn level_counts(n_heads: usize, d_inter: usize, m: usize, n_levels: usize) -> Result<LevelSpec> {
    if n_levels == 0 {
        return Err(Error::Config("n_levels must be positive".into()));
    }
    if m == 0 || d_inter % m != 0 {
        return Err(Error::Config(format!("d_inter {d_inter} is not a multiple of m={m}")));
    }
    let groups = d_inter / m;
    Ok(LevelSpec {
        n_levels,
        heads_pruned: (0..=n_levels).map(|i| round_div(i * n_heads, n_levels)).collect(),
        mlp_cols_pruned: (0..=n_levels).map(|i| m * round_div(i * groups, n_levels)).collect(),
    })
}

impl LevelSpec {
    pub fn for_config(config: &ModelConfig, n_levels: usize) -> Result<Self> {
        level_counts(config.n_heads, config.d_inter, config.prune_granularity_m, n_levels)
    }

    pub fn pruned(&self, kind: ModuleKind, level: usize) -> usize {
        match kind {
            ModuleKind::Attention => self.heads_pruned[level],
            ModuleKind::Mlp => self.mlp_cols_pruned[level],
        }
    }

    /// Matrix parameters of one module of `kind` at `level`.
    pub fn module_params(&self, config: &ModelConfig, kind: ModuleKind, level: usize) -> usize {
        if level >= self.n_levels {
            return 0;
        }
        match kind {
            ModuleKind::Attention => {
                (config.n_heads - self.heads_pruned[level]) * config.params_per_head()
                    + config.shared_kv_params()
            }
            ModuleKind::Mlp => (config.d_inter - self.mlp_cols_pruned[level]) * config.params_per_channel(),
        }
    }

    /// Parameters carried by the pruned structures (heads with their Q/O,
    /// and K/V when unshared; MLP channels) at `level`.
    pub fn structure_params_removed(&self, config: &ModelConfig, kind: ModuleKind, level: usize) -> usize {
        match kind {
            ModuleKind::Attention => self.heads_pruned[level] * config.params_per_head(),
            ModuleKind::Mlp => self.mlp_cols_pruned[level] * config.params_per_channel(),
        }
    }

    /// Whether consecutive levels of `kind` always differ by the same
    /// number of pruned structures.
    pub fn is_equal_step(&self, kind: ModuleKind) -> bool {
        let counts = match kind {
            ModuleKind::Attention => &self.heads_pruned,
            ModuleKind::Mlp => &self.mlp_cols_pruned,
        };
        counts.windows(2).all(|w| w[1] - w[0] == counts[1] - counts[0])
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let ok = |v: &Vec<usize>, full: usize| {
            v.len() == self.n_levels + 1
                && v[0] == 0
                && v[self.n_levels] == full
                && v.windows(2).all(|w| w[0] <= w[1])
        };
        if !ok(&self.heads_pruned, config.n_heads) || !ok(&self.mlp_cols_pruned, config.d_inter) {
            return Err(Error::DatabaseIntegrity("level spec does not match the model".into()));
        }
        Ok(())
    }
}

/// A candidate: one level per attention module and one per MLP module.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelAssignment {
    pub attn_levels: Vec<usize>,
    pub mlp_levels: Vec<usize>,
}

impl LevelAssignment {
    pub fn uniform(n_layers: usize, level: usize) -> Self {
        Self {
            attn_levels: vec![level; n_layers],
            mlp_levels: vec![level; n_layers],
        }
    }

    pub fn levels(&self, kind: ModuleKind) -> &[usize] {
        match kind {
            ModuleKind::Attention => &self.attn_levels,
            ModuleKind::Mlp => &self.mlp_levels,
        }
    }

    pub fn levels_mut(&mut self, kind: ModuleKind) -> &mut Vec<usize> {
        match kind {
            ModuleKind::Attention => &mut self.attn_levels,
            ModuleKind::Mlp => &mut self.mlp_levels,
        }
    }

    pub fn sum(&self, kind: ModuleKind) -> usize {
        self.levels(kind).iter().sum()
    }

    pub fn level_of(&self, module: ModuleId) -> usize {
        self.levels(module.kind)[module.layer]
    }

    pub fn validate(&self, n_layers: usize, n_levels: usize) -> Result<()> {
        if self.attn_levels.len() != n_layers || self.mlp_levels.len() != n_layers {
            return Err(Error::Config(format!(
                "assignment has {}/{} levels for {n_layers} layers",
                self.attn_levels.len(),
                self.mlp_levels.len()
            )));
        }
        if let Some(l) = self
            .attn_levels
            .iter()
            .chain(&self.mlp_levels)
            .find(|&&l| l > n_levels)
        {
            return Err(Error::Config(format!("level {l} exceeds {n_levels}")));
        }
        Ok(())
    }
}

/// Matrix parameters of attention and MLP modules under `assignment`.
pub fn prunable_params(config: &ModelConfig, spec: &LevelSpec, assignment: &LevelAssignment) -> usize {
    [ModuleKind::Attention, ModuleKind::Mlp]
        .iter()
        .flat_map(|&k| assignment.levels(k).iter().map(move |&l| (k, l)))
        .map(|(k, l)| spec.module_params(config, k, l))
        .sum()
}

/// `1 − prunable/dense`.
pub fn assignment_sparsity(config: &ModelConfig, spec: &LevelSpec, assignment: &LevelAssignment) -> f64 {
    1.0 - prunable_params(config, spec, assignment) as f64 / config.dense_prunable_params() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModuleSnapshot {
    Attention(Attention),
    Mlp(Mlp),
    Removed,
}

/// Embedding, final norm and output head of the dense model.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    pub embedding: Matrix,
    pub final_norm: Matrix,
    pub head: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub config_hash: String,
    pub calibration_hash: String,
    pub damp: f64,
    pub seed: u64,
    pub hash: String,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Provenance {
    pub fn new(config: &ModelConfig, calibration_hash: String, damp: f64, seed: u64) -> Result<Self> {
        let config_hash = sha_hex(&serde_json::to_vec(config)?);
        let hash = Self::combine(&config_hash, &calibration_hash, damp, seed);
        Ok(Self {
            config_hash,
            calibration_hash,
            damp,
            seed,
            hash,
        })
    }

    fn combine(config_hash: &str, calibration_hash: &str, damp: f64, seed: u64) -> String {
        let mut h = Sha256::new();
        h.update(config_hash.as_bytes());
        h.update(b"|");
        h.update(calibration_hash.as_bytes());
        h.update(b"|");
        h.update(damp.to_le_bytes());
        h.update(b"|");
        h.update(seed.to_le_bytes());
        hex::encode(h.finalize())
    }

    fn verify(&self, config: &ModelConfig) -> Result<()> {
        let config_hash = sha_hex(&serde_json::to_vec(config)?);
        if config_hash != self.config_hash
            || Self::combine(&self.config_hash, &self.calibration_hash, self.damp, self.seed) != self.hash
        {
            return Err(Error::DatabaseIntegrity("provenance hash does not match manifest".into()));
        }
        Ok(())
    }
}

/// Hash of the calibration tokens and the role split they came from.
pub fn calibration_hash(dataset: &TokenDataset) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&dataset.split)?);
    for seq in dataset.role(Role::Hessian) {
        for t in seq {
            h.update(t.to_le_bytes());
        }
        h.update(b";");
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelDatabase {
    pub config: ModelConfig,
    pub spec: LevelSpec,
    pub base: BaseWeights,
    pub entries: BTreeMap<(ModuleId, usize), ModuleSnapshot>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    pub n_levels: usize,
    pub damp: f64,
    /// Prune modules on the rayon pool; results do not depend on it.
    pub parallel: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            n_levels: 10,
            damp: 1e-4,
            parallel: true,
        }
    }
}

fn prune_module(
    params: &ModelParams,
    spec: &LevelSpec,
    hessian: &LayerHessian,
) -> Result<Vec<((ModuleId, usize), ModuleSnapshot)>> {
    let config = &params.config;
    let module = hessian.module;
    let layer = &params.layers[module.layer];
    let groups = structure_groups(config, module);
    let deepest = (0..spec.n_levels).map(|i| spec.pruned(module.kind, i)).max().unwrap_or(0);
    let per_group = match module.kind {
        ModuleKind::Attention => 1,
        ModuleKind::Mlp => config.prune_granularity_m,
    };
    let dense_out = match module.kind {
        ModuleKind::Attention => &layer.attn.as_ref().expect("dense model").wo,
        ModuleKind::Mlp => &layer.mlp.as_ref().expect("dense model").w_down,
    };
    let path = greedy_structured_prune(dense_out, hessian, &groups, deepest / per_group)?;
    let mut out = Vec::with_capacity(spec.n_levels + 1);
    for level in 0..=spec.n_levels {
        let n = spec.pruned(module.kind, level) / per_group;
        let snap = if level == spec.n_levels {
            ModuleSnapshot::Removed
        } else {
            let removed = if n == 0 { &[][..] } else { &path[n - 1].removed_groups[..] };
            match module.kind {
                ModuleKind::Attention => {
                    let mut a = layer.attn.clone().expect("dense model");
                    if n > 0 {
                        a.wo = path[n - 1].weights.clone();
                        a.remove_heads(removed, config)?;
                    }
                    ModuleSnapshot::Attention(a)
                }
                ModuleKind::Mlp => {
                    let mut m = layer.mlp.clone().expect("dense model");
                    if n > 0 {
                        m.w_down = path[n - 1].weights.clone();
                        let chans: Vec<usize> = removed
                            .iter()
                            .flat_map(|&g| groups[g].columns.iter().copied())
                            .collect();
                        m.remove_channels(&chans)?;
                    }
                    ModuleSnapshot::Mlp(m)
                }
            }
        };
        out.push(((module, level), snap));
    }
    Ok(out)
}

/// Builds the database from a dense model and Hessian calibration sequences.
pub fn build_database_from_slice(
    params: &ModelParams,
    hessian_seqs: &[Vec<u32>],
    calibration_hash: String,
    seed: u64,
    opts: BuildOptions,
) -> Result<LevelDatabase> {
    let config = &params.config;
    params.validate()?;
    if params.layers.iter().any(|l| {
        l.attn.as_ref().is_none_or(|a| a.heads.len() != config.n_heads)
            || l.mlp.as_ref().is_none_or(|m| m.channels.len() != config.d_inter)
    }) {
        return Err(Error::Config("database must be built from a dense model".into()));
    }
    let spec = LevelSpec::for_config(config, opts.n_levels)?;
    let hessians = accumulate_hessians(params, hessian_seqs, opts.damp)?;
    let results: Vec<Result<Vec<_>>> = if opts.parallel {
        hessians.par_iter().map(|h| prune_module(params, &spec, h)).collect()
    } else {
        hessians.iter().map(|h| prune_module(params, &spec, h)).collect()
    };
    let mut entries = BTreeMap::new();
    for r in results {
        entries.extend(r?);
    }
    Ok(LevelDatabase {
        config: config.clone(),
        spec,
        base: BaseWeights {
            embedding: params.embedding.clone(),
            final_norm: params.final_norm.clone(),
            head: params.head.clone(),
        },
        entries,
        provenance: Provenance::new(config, calibration_hash, opts.damp, seed)?,
    })
}

/// Builds the database using the dataset's Hessian role.
pub fn build_database(params: &ModelParams, dataset: &TokenDataset, opts: BuildOptions) -> Result<LevelDatabase> {
    build_database_from_slice(
        params,
        dataset.role(Role::Hessian),
        calibration_hash(dataset)?,
        dataset.seed.unwrap_or(0),
        opts,
    )
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryMeta {
    module: ModuleId,
    level: usize,
    removed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    heads: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kv_heads: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channels: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaseMeta {
    base: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    module: ModuleId,
    level: usize,
    file: String,
    crc64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    spec: LevelSpec,
    provenance: Provenance,
    base: ManifestEntry,
    entries: Vec<ManifestEntry>,
}

pub fn entry_file_name(module: ModuleId, level: usize) -> String {
    format!("L{}_{}_lvl{}.bin", module.layer, module.kind.tag(), level)
}

fn encode_entry(module: ModuleId, level: usize, snap: &ModuleSnapshot) -> Result<Vec<u8>> {
    let mut meta = EntryMeta {
        module,
        level,
        removed: false,
        heads: None,
        kv_heads: None,
        channels: None,
    };
    match snap {
        ModuleSnapshot::Removed => {
            meta.removed = true;
            encode_tensor_file(&meta, &[])
        }
        ModuleSnapshot::Attention(a) => {
            meta.heads = Some(a.heads.clone());
            meta.kv_heads = Some(a.kv_heads.clone());
            let t = [("norm", &a.norm), ("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv), ("wo", &a.wo)];
            encode_tensor_file(&meta, &t.map(|(n, m)| (n.to_string(), m)))
        }
        ModuleSnapshot::Mlp(m) => {
            meta.channels = Some(m.channels.clone());
            let t = [("norm", &m.norm), ("w_gate", &m.w_gate), ("w_up", &m.w_up), ("w_down", &m.w_down)];
            encode_tensor_file(&meta, &t.map(|(n, m)| (n.to_string(), m)))
        }
    }
}

fn decode_entry(bytes: &[u8], module: ModuleId, level: usize) -> Result<ModuleSnapshot> {
    let (meta, tensors): (EntryMeta, Vec<(String, Matrix)>) = decode_tensor_file(bytes)?;
    if meta.module != module || meta.level != level {
        return Err(Error::DatabaseIntegrity(format!(
            "entry file for ({module}, {level}) holds ({}, {})",
            meta.module, meta.level
        )));
    }
    let mut map: BTreeMap<String, Matrix> = tensors.into_iter().collect();
    let mut take = |n: &str| {
        map.remove(n).ok_or_else(|| {
            Error::DatabaseIntegrity(format!("entry ({module}, {level}) is missing tensor {n}"))
        })
    };
    let missing = |what: &str| Error::DatabaseIntegrity(format!("entry ({module}, {level}) lacks {what}"));
    Ok(if meta.removed {
        ModuleSnapshot::Removed
    } else {
        match module.kind {
            ModuleKind::Attention => ModuleSnapshot::Attention(Attention {
                norm: take("norm")?,
                wq: take("wq")?,
                wk: take("wk")?,
                wv: take("wv")?,
                wo: take("wo")?,
                heads: meta.heads.ok_or_else(|| missing("heads"))?,
                kv_heads: meta.kv_heads.ok_or_else(|| missing("kv_heads"))?,
            }),
            ModuleKind::Mlp => ModuleSnapshot::Mlp(Mlp {
                norm: take("norm")?,
                w_gate: take("w_gate")?,
                w_up: take("w_up")?,
                w_down: take("w_down")?,
                channels: meta.channels.ok_or_else(|| missing("channels"))?,
            }),
        }
    })
}

fn encode_base(base: &BaseWeights) -> Result<Vec<u8>> {
    encode_tensor_file(
        &BaseMeta { base: true },
        &[
            ("embedding".to_string(), &base.embedding),
            ("final_norm".to_string(), &base.final_norm),
            ("head".to_string(), &base.head),
        ],
    )
}

fn crc_hex(bytes: &[u8]) -> String {
    format!("{:016x}", CRC64.checksum(bytes))
}

impl LevelDatabase {
    pub fn n_levels(&self) -> usize {
        self.spec.n_levels
    }

    pub fn entry(&self, module: ModuleId, level: usize) -> Result<&ModuleSnapshot> {
        self.entries.get(&(module, level)).ok_or_else(|| {
            Error::DatabaseIntegrity(format!("missing entry ({module}, level {level})"))
        })
    }

    /// SHA-256 of an entry's serialized form.
    pub fn entry_hash(&self, module: ModuleId, level: usize) -> Result<String> {
        Ok(sha_hex(&encode_entry(module, level, self.entry(module, level)?)?))
    }

    /// Hash over every entry, in key order.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(encode_base(&self.base)?);
        for ((m, l), snap) in &self.entries {
            h.update(encode_entry(*m, *l, snap)?);
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Assembles a runnable model from the assigned levels.
    pub fn stitch(&self, assignment: &LevelAssignment) -> Result<ModelParams> {
        let c = &self.config;
        assignment.validate(c.n_layers, self.spec.n_levels)?;
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let attn = match self.entry(ModuleId::attention(l), assignment.attn_levels[l])? {
                ModuleSnapshot::Attention(a) => Some(a.clone()),
                ModuleSnapshot::Removed => None,
                ModuleSnapshot::Mlp(_) => {
                    return Err(Error::DatabaseIntegrity(format!("MLP weights stored for L{l}_attn")))
                }
            };
            let mlp = match self.entry(ModuleId::mlp(l), assignment.mlp_levels[l])? {
                ModuleSnapshot::Mlp(m) => Some(m.clone()),
                ModuleSnapshot::Removed => None,
                ModuleSnapshot::Attention(_) => {
                    return Err(Error::DatabaseIntegrity(format!("attention weights stored for L{l}_mlp")))
                }
            };
            layers.push(Layer { attn, mlp });
        }
        Ok(ModelParams {
            config: c.clone(),
            embedding: self.base.embedding.clone(),
            layers,
            final_norm: self.base.final_norm.clone(),
            head: self.base.head.clone(),
        })
    }

    /// Writes the directory layout; existing files are replaced atomically.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let base_bytes = encode_base(&self.base)?;
        atomic_write(&dir.join("base.bin"), &base_bytes)?;
        let mut entries = Vec::with_capacity(self.entries.len());
        for ((module, level), snap) in &self.entries {
            let bytes = encode_entry(*module, *level, snap)?;
            let file = entry_file_name(*module, *level);
            atomic_write(&dir.join(&file), &bytes)?;
            entries.push(ManifestEntry {
                module: *module,
                level: *level,
                file,
                crc64: crc_hex(&bytes),
            });
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            config: self.config.clone(),
            spec: self.spec.clone(),
            provenance: self.provenance.clone(),
            base: ManifestEntry {
                module: ModuleId::attention(0),
                level: 0,
                file: "base.bin".into(),
                crc64: crc_hex(&base_bytes),
            },
            entries,
        };
        atomic_write(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join("manifest.json");
        let raw = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_slice(&raw)
            .map_err(|e| Error::DatabaseIntegrity(format!("invalid manifest: {e}")))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::DatabaseIntegrity(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        manifest.config.validate()?;
        manifest.spec.validate(&manifest.config)?;
        manifest.provenance.verify(&manifest.config)?;

        let read_checked = |e: &ManifestEntry, what: String| -> Result<Vec<u8>> {
            let path = dir.join(&e.file);
            let bytes = std::fs::read(&path)
                .map_err(|err| Error::DatabaseIntegrity(format!("cannot read {what} ({}): {err}", e.file)))?;
            if crc_hex(&bytes) != e.crc64 {
                return Err(Error::DatabaseIntegrity(format!("checksum mismatch for {what} ({})", e.file)));
            }
            Ok(bytes)
        };

        let base_bytes = read_checked(&manifest.base, "base weights".into())?;
        let (_, tensors): (BaseMeta, Vec<(String, Matrix)>) = decode_tensor_file(&base_bytes)?;
        let mut t: BTreeMap<String, Matrix> = tensors.into_iter().collect();
        let mut take = |n: &str| {
            t.remove(n)
                .ok_or_else(|| Error::DatabaseIntegrity(format!("base weights lack {n}")))
        };
        let base = BaseWeights {
            embedding: take("embedding")?,
            final_norm: take("final_norm")?,
            head: take("head")?,
        };

        let listed: BTreeMap<(ModuleId, usize), &ManifestEntry> =
            manifest.entries.iter().map(|e| ((e.module, e.level), e)).collect();
        let mut entries = BTreeMap::new();
        for module in manifest.config.module_ids() {
            for level in 0..=manifest.spec.n_levels {
                let e = listed.get(&(module, level)).ok_or_else(|| {
                    Error::DatabaseIntegrity(format!("manifest has no entry ({module}, level {level})"))
                })?;
                let bytes = read_checked(e, format!("entry ({module}, level {level})"))?;
                entries.insert((module, level), decode_entry(&bytes, module, level)?);
            }
        }
        let db = LevelDatabase {
            config: manifest.config,
            spec: manifest.spec,
            base,
            entries,
            provenance: manifest.provenance,
        };
        db.stitch(&LevelAssignment::uniform(db.config.n_layers, 0))?.validate()?;
        Ok(db)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::synth_corpus;
    use crate::model::forward;
    use crate::numerics::matmul_nt;
    use std::sync::OnceLock;

    fn fixture() -> &'static (ModelParams, TokenDataset, LevelDatabase) {
        static F: OnceLock<(ModelParams, TokenDataset, LevelDatabase)> = OnceLock::new();
        F.get_or_init(|| {
            let c = ModelConfig::toy();
            let p = ModelParams::init(&c, 7).unwrap();
            let ds = synth_corpus(7, 40, 32, c.vocab_size).unwrap();
            let db = build_database(&p, &ds, BuildOptions::default()).unwrap();
            (p, ds, db)
        })
    }

    #[test]
    fn level_count_examples() {
        let s = level_counts(32, 11008, 32, 10).unwrap();
        assert_eq!(s.heads_pruned[5], 16);
        assert_eq!(s.mlp_cols_pruned[5], 5504);
        assert_eq!(s.heads_pruned[0], 0);
        assert_eq!(s.mlp_cols_pruned[0], 0);
        assert_eq!(s.heads_pruned[10], 32);
        assert_eq!(s.mlp_cols_pruned[10], 11008);
        // 2.5 and 7.5 heads round up
        let t = level_counts(8, 160, 8, 10).unwrap();
        assert_eq!(t.heads_pruned, vec![0, 1, 2, 2, 3, 4, 5, 6, 6, 7, 8]);
        assert_eq!(t.mlp_cols_pruned, (0..=10).map(|i| 16 * i).collect::<Vec<_>>());
        assert!(!t.is_equal_step(ModuleKind::Attention));
        assert!(t.is_equal_step(ModuleKind::Mlp));
        assert_eq!(level_counts(2, 8, 8, 4).unwrap().heads_pruned, vec![0, 1, 1, 2, 2]);
        assert!(level_counts(8, 161, 8, 10).is_err());
    }

    #[test]
    fn prunable_params_boundaries() {
        let c = ModelConfig::toy();
        let s = LevelSpec::for_config(&c, 10).unwrap();
        assert_eq!(prunable_params(&c, &s, &LevelAssignment::uniform(4, 0)), c.dense_prunable_params());
        assert_eq!(prunable_params(&c, &s, &LevelAssignment::uniform(4, 10)), 0);
    }

    #[test]
    fn level_five_removes_half_of_the_prunable_structures() {
        // Count retained structures directly: 4 of 8 heads and 80 of 160 channels.
        let c = ModelConfig::toy();
        let s = LevelSpec::for_config(&c, 10).unwrap();
        let a = LevelAssignment::uniform(4, 5);
        let hd = c.head_dim();
        let q_o = |heads: usize| 2 * heads * hd * c.d_model;
        let kv = 2 * c.n_kv_heads * hd * c.d_model;
        let mlp = |chans: usize| 3 * chans * c.d_model;
        let expected = 4 * (q_o(4) + kv + mlp(80));
        assert_eq!(prunable_params(&c, &s, &a), expected);
        assert_eq!(4 * q_o(4) * 2, 4 * q_o(8));
    }

    #[test]
    fn stitch_zero_is_dense_and_full_is_passthrough() {
        let (p, _, db) = fixture();
        let dense = db.stitch(&LevelAssignment::uniform(4, 0)).unwrap();
        assert_eq!(&dense, p);
        let toks: Vec<u32> = (0..20).map(|i| (i * 31 % 512) as u32).collect();
        assert_eq!(forward(&dense, &toks).unwrap(), forward(p, &toks).unwrap());

        let empty = db.stitch(&LevelAssignment::uniform(4, 10)).unwrap();
        assert!(empty.layers.iter().all(|l| l.attn.is_none() && l.mlp.is_none()));
        assert_eq!(empty.prunable_count(), 0);
        let x = p.embedding.select_rows(&toks.iter().map(|&t| t as usize).collect::<Vec<_>>());
        let (h, _) = crate::model::rms_norm_rows(&x, &p.final_norm, p.config.norm_eps);
        assert_eq!(forward(&empty, &toks).unwrap(), matmul_nt(&h, &p.head).unwrap());
    }

    #[test]
    fn stitched_counts_match_level_arithmetic() {
        let (_, _, db) = fixture();
        let c = &db.config;
        let perms = [
            LevelAssignment { attn_levels: vec![3, 7, 0, 10], mlp_levels: vec![5, 5, 9, 1] },
            LevelAssignment { attn_levels: vec![10, 0, 7, 3], mlp_levels: vec![1, 9, 5, 5] },
            LevelAssignment { attn_levels: vec![0, 3, 10, 7], mlp_levels: vec![9, 5, 1, 5] },
        ];
        let counts: Vec<usize> = perms.iter().map(|a| db.stitch(a).unwrap().prunable_count()).collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(counts[0], prunable_params(c, &db.spec, &perms[0]));
    }

    #[test]
    fn module_error_grows_with_level() {
        let (p, ds, db) = fixture();
        let hs = accumulate_hessians(p, ds.role(Role::Hessian), 0.0).unwrap();
        for h in &hs {
            let m = h.module;
            let dense_w = match m.kind {
                ModuleKind::Attention => p.layers[m.layer].attn.as_ref().unwrap().wo.clone(),
                ModuleKind::Mlp => p.layers[m.layer].mlp.as_ref().unwrap().w_down.clone(),
            };
            let mut prev = 0.0;
            for level in 0..=db.n_levels() {
                // Re-embed the pruned output matrix into the dense column layout.
                let mut w = Matrix::zeros(dense_w.rows(), dense_w.cols());
                match db.entry(m, level).unwrap() {
                    ModuleSnapshot::Attention(a) => {
                        let hd = db.config.head_dim();
                        for (j, &head) in a.heads.iter().enumerate() {
                            for r in 0..w.rows() {
                                for k in 0..hd {
                                    w.set(r, head * hd + k, a.wo.get(r, j * hd + k));
                                }
                            }
                        }
                    }
                    ModuleSnapshot::Mlp(mm) => {
                        for (j, &ch) in mm.channels.iter().enumerate() {
                            for r in 0..w.rows() {
                                w.set(r, ch, mm.w_down.get(r, j));
                            }
                        }
                    }
                    ModuleSnapshot::Removed => {}
                }
                let diff = dense_w.sub(&w).unwrap();
                let err = matmul_nt(&crate::numerics::matmul(&diff, &h.h).unwrap(), &diff)
                    .unwrap()
                    .diag()
                    .iter()
                    .sum::<f64>();
                assert!(err >= prev * (1.0 - 1e-9) - 1e-12, "{m} level {level}: {err} < {prev}");
                prev = err;
            }
        }
    }

    #[test]
    fn build_is_deterministic_and_schedule_independent() {
        let (p, ds, db) = fixture();
        let opts = BuildOptions { parallel: false, ..Default::default() };
        let seq = build_database(p, ds, opts).unwrap();
        assert_eq!(seq.provenance, db.provenance);
        assert_eq!(seq.content_hash().unwrap(), db.content_hash().unwrap());
        for m in db.config.module_ids() {
            assert_eq!(seq.entry_hash(m, 4).unwrap(), db.entry_hash(m, 4).unwrap());
        }
    }

    #[test]
    fn save_load_round_trip_and_integrity() {
        let (_, _, db) = fixture();
        let dir = tempfile::tempdir().unwrap();
        db.save(dir.path()).unwrap();
        let back = LevelDatabase::load(dir.path()).unwrap();
        assert_eq!(&back, db);
        let a = LevelAssignment { attn_levels: vec![2, 5, 8, 5], mlp_levels: vec![6, 4, 5, 5] };
        assert_eq!(back.stitch(&a).unwrap(), db.stitch(&a).unwrap());

        // Tampered payload byte.
        let victim = dir.path().join(entry_file_name(ModuleId::mlp(1), 3));
        let mut bytes = std::fs::read(&victim).unwrap();
        let n = bytes.len();
        bytes[n - 9] ^= 0x01;
        std::fs::write(&victim, &bytes).unwrap();
        let err = LevelDatabase::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("checksum mismatch"), "{err}");

        // Missing entry file.
        std::fs::remove_file(&victim).unwrap();
        let err = LevelDatabase::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("L1_mlp") && err.contains("level 3"), "{err}");
    }

    #[test]
    fn provenance_mismatch_is_rejected() {
        let (_, _, db) = fixture();
        let dir = tempfile::tempdir().unwrap();
        db.save(dir.path()).unwrap();
        let mpath = dir.path().join("manifest.json");
        let mut m: serde_json::Value = serde_json::from_slice(&std::fs::read(&mpath).unwrap()).unwrap();
        m["provenance"]["seed"] = serde_json::json!(999);
        std::fs::write(&mpath, serde_json::to_vec(&m).unwrap()).unwrap();
        let err = LevelDatabase::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("provenance"), "{err}");
    }
}

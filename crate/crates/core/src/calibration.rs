//! Token datasets: the binary token-file reader/writer, a seeded order-2
//! Markov corpus generator, and the fixed role split used by the pipeline.

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::atomic_write;

const MAGIC: &[u8; 4] = b"DLTK";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    File,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Hessian,
    Fitness,
    Finetune,
    Heldout,
}

/// Fractions of the sequence list assigned to each role, in this order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub hessian: f64,
    pub fitness: f64,
    pub finetune: f64,
    pub heldout: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            hessian: 0.1,
            fitness: 0.1,
            finetune: 0.7,
            heldout: 0.1,
        }
    }
}

/// Contiguous, disjoint index ranges into `TokenDataset::sequences`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleSplit {
    pub hessian: Range<usize>,
    pub fitness: Range<usize>,
    pub finetune: Range<usize>,
    pub heldout: Range<usize>,
}

impl RoleSplit {
    pub fn new(n: usize, f: SplitFractions) -> Result<Self> {
        let parts = [f.hessian, f.fitness, f.finetune, f.heldout];
        if parts.iter().any(|p| !(*p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be non-negative and sum to 1, got {parts:?}"
            )));
        }
        let take = |p: f64| (p * n as f64).floor() as usize;
        let (h, fi, he) = (take(f.hessian), take(f.fitness), take(f.heldout));
        let ft = n - h - fi - he;
        Ok(Self {
            hessian: 0..h,
            fitness: h..h + fi,
            finetune: h + fi..h + fi + ft,
            heldout: h + fi + ft..n,
        })
    }

    pub fn range(&self, role: Role) -> Range<usize> {
        match role {
            Role::Hessian => self.hessian.clone(),
            Role::Fitness => self.fitness.clone(),
            Role::Finetune => self.finetune.clone(),
            Role::Heldout => self.heldout.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenDataset {
    pub sequences: Vec<Vec<u32>>,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub source: Source,
    pub seed: Option<u64>,
    pub split: RoleSplit,
}

impl TokenDataset {
    pub fn from_sequences(
        sequences: Vec<Vec<u32>>,
        seq_len: usize,
        vocab_size: usize,
        source: Source,
        seed: Option<u64>,
    ) -> Result<Self> {
        for (s, seq) in sequences.iter().enumerate() {
            if seq.len() != seq_len {
                return Err(Error::Data(format!(
                    "sequence {s} has {} tokens, expected {seq_len}",
                    seq.len()
                )));
            }
            if let Some(p) = seq.iter().position(|&t| t as usize >= vocab_size) {
                return Err(Error::Data(format!(
                    "token {} at sequence {s} position {p} exceeds vocabulary {vocab_size}",
                    seq[p]
                )));
            }
        }
        let split = RoleSplit::new(sequences.len(), SplitFractions::default())?;
        Ok(Self {
            sequences,
            seq_len,
            vocab_size,
            source,
            seed,
            split,
        })
    }

    pub fn with_split(mut self, fractions: SplitFractions) -> Result<Self> {
        self.split = RoleSplit::new(self.sequences.len(), fractions)?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn role(&self, role: Role) -> &[Vec<u32>] {
        &self.sequences[self.split.range(role)]
    }

    pub fn total_tokens(&self) -> usize {
        self.sequences.len() * self.seq_len
    }
}

/// Writes token ids in the token-file format.
pub fn encode_tokens(tokens: &[u32], vocab_size: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * tokens.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&vocab_size.to_le_bytes());
    out.extend_from_slice(&(tokens.len() as u64).to_le_bytes());
    for t in tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

pub fn save_tokens(path: impl AsRef<Path>, tokens: &[u32], vocab_size: u32) -> Result<()> {
    atomic_write(path.as_ref(), &encode_tokens(tokens, vocab_size))
}

/// Parses a token file into `seq_len`-token sequences; trailing tokens that
/// do not fill a sequence are dropped.
pub fn decode_tokens(bytes: &[u8], seq_len: usize, vocab_size: usize) -> Result<TokenDataset> {
    if seq_len == 0 {
        return Err(Error::Config("seq_len must be positive".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "token file has {} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic bytes in token file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported token file version {version}")));
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload = &bytes[HEADER_LEN..];
    if count.checked_mul(4) != Some(payload.len()) {
        return Err(Error::Format(format!(
            "header declares {count} tokens but payload holds {} bytes",
            payload.len()
        )));
    }
    let mut tokens = Vec::with_capacity(count);
    for (i, c) in payload.chunks_exact(4).enumerate() {
        let t = u32::from_le_bytes(c.try_into().unwrap());
        if t as usize >= vocab_size {
            return Err(Error::Data(format!(
                "token {t} at offset {i} exceeds vocabulary {vocab_size}"
            )));
        }
        tokens.push(t);
    }
    let sequences = tokens.chunks_exact(seq_len).map(<[u32]>::to_vec).collect();
    TokenDataset::from_sequences(sequences, seq_len, vocab_size, Source::File, None)
}

pub fn load_tokens(path: impl AsRef<Path>, seq_len: usize, vocab_size: usize) -> Result<TokenDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tokens(&bytes, seq_len, vocab_size)
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic hash of a few words, used for seed derivation.
pub fn mix(words: &[u64]) -> u64 {
    words.iter().fold(0x5EED_0F_D1CE_u64, |h, &w| splitmix64(h ^ splitmix64(w)))
}

/// The order-2 chain behind [`synth_corpus`].
///
/// Every token `b` has four successor candidates; their weights are a fixed
/// pattern rotated by a 2-bit class of the token before `b`. A small uniform
/// floor keeps the chain irreducible.
#[derive(Debug, Clone, Copy)]
pub struct MarkovSource {
    seed: u64,
    vocab: usize,
}

impl MarkovSource {
    pub const WEIGHTS: [f64; 4] = [0.55, 0.25, 0.12, 0.08];
    pub const FLOOR: f64 = 0.02;

    pub fn new(seed: u64, vocab: usize) -> Self {
        Self { seed, vocab }
    }

    fn successor(&self, b: u32, k: usize) -> u32 {
        (mix(&[self.seed, 1, b as u64, k as u64]) % self.vocab as u64) as u32
    }

    fn rotation(&self, a: u32) -> usize {
        (mix(&[self.seed, 2, a as u64]) % 4) as usize
    }

    /// Full next-token distribution after `a, b`.
    pub fn transition(&self, a: u32, b: u32) -> Vec<f64> {
        let mut p = vec![Self::FLOOR / self.vocab as f64; self.vocab];
        let r = self.rotation(a);
        for k in 0..4 {
            p[self.successor(b, k) as usize] += (1.0 - Self::FLOOR) * Self::WEIGHTS[(k + r) % 4];
        }
        p
    }

    pub fn sample(&self, a: u32, b: u32, rng: &mut impl Rng) -> u32 {
        let u: f64 = rng.gen();
        if u < Self::FLOOR {
            return rng.gen_range(0..self.vocab as u32);
        }
        let mut acc = Self::FLOOR;
        let r = self.rotation(a);
        for k in 0..4 {
            acc += (1.0 - Self::FLOOR) * Self::WEIGHTS[(k + r) % 4];
            if u < acc {
                return self.successor(b, k);
            }
        }
        self.successor(b, 3)
    }

    /// A contiguous stream of `n` tokens after a short burn-in.
    pub fn stream(&self, rng: &mut impl Rng, n: usize) -> Vec<u32> {
        let mut a = rng.gen_range(0..self.vocab as u32);
        let mut b = rng.gen_range(0..self.vocab as u32);
        for _ in 0..64 {
            let c = self.sample(a, b, rng);
            (a, b) = (b, c);
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let c = self.sample(a, b, rng);
            out.push(c);
            (a, b) = (b, c);
        }
        out
    }
}

/// Seeded synthetic corpus: one Markov stream chunked into sequences.
pub fn synth_corpus(seed: u64, n_sequences: usize, seq_len: usize, vocab_size: usize) -> Result<TokenDataset> {
    if vocab_size < 16 {
        return Err(Error::Config(format!("vocab_size must be at least 16, got {vocab_size}")));
    }
    if vocab_size > u32::MAX as usize {
        return Err(Error::Config("vocab_size must fit in u32".into()));
    }
    let source = MarkovSource::new(seed, vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0xC0]));
    let stream = source.stream(&mut rng, n_sequences * seq_len);
    let sequences = if seq_len == 0 {
        vec![Vec::new(); n_sequences]
    } else {
        stream.chunks_exact(seq_len).map(<[u32]>::to_vec).collect()
    };
    TokenDataset::from_sequences(sequences, seq_len, vocab_size, Source::Synthetic, Some(seed))
}

//! Probe prefixes and their optimization procedures.
//!
//! A [`Prefix`] is the adversarial input prepended to the selection prompt:
//! a token sequence (gradient-access search), a word sequence
//! (logits-access genetic search), or an integer pixel grid (visual
//! optimization). [`optimize_probe_set`] runs the per-prefix optimization
//! loop and packages the results as a [`ProbeSet`] that can be saved,
//! reloaded bit-exactly, and evaluated against any target handle.

mod driver;
mod gcg;
mod genetic;
mod store;
mod visual;
pub mod words;

pub use driver::{optimize_probe_set, OptimizeMode, ProbeRun};
pub use gcg::gcg_step;
pub use genetic::genetic_step;
pub use store::{load_probe_set, save_probe_set, ProbeStoreError};
pub use visual::{pgd_step, zo_gradient, zo_gradient_with};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access::SelectionTask;
use crate::AccessLevel;

#[derive(Debug, Error)]
pub enum PrefixError {
    #[error("pixel grid data holds {got} bytes, {h}x{w}x3 needs {expected}")]
    BadGridSize {
        h: usize,
        w: usize,
        expected: usize,
        got: usize,
    },
    #[error("prefix must not be empty")]
    Empty,
}

/// Integer pixel grid, `H x W x 3`, row-major, values 0-255.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PixelGrid {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl PixelGrid {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self, PrefixError> {
        if data.len() != h * w * 3 || data.is_empty() {
            return Err(PrefixError::BadGridSize {
                h,
                w,
                expected: h * w * 3,
                got: data.len(),
            });
        }
        Ok(Self { h, w, data })
    }

    /// Uniform random bytes.
    pub fn random(h: usize, w: usize, seed: u64) -> Result<Self, PrefixError> {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, "pixel-init", &[]);
        let data = (0..h * w * 3).map(|_| rng.gen::<u8>()).collect();
        Self::new(h, w, data)
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }
}

/// One probe prefix.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Prefix {
    Tokens(Vec<usize>),
    Words(Vec<String>),
    Pixels(PixelGrid),
}

/// Prefix modality, used for capability and compatibility checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrefixKind {
    Tokens,
    Words,
    Pixels,
}

impl std::fmt::Display for PrefixKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PrefixKind::Tokens => write!(f, "tokens"),
            PrefixKind::Words => write!(f, "words"),
            PrefixKind::Pixels => write!(f, "pixels"),
        }
    }
}

impl Prefix {
    pub fn kind(&self) -> PrefixKind {
        match self {
            Prefix::Tokens(_) => PrefixKind::Tokens,
            Prefix::Words(_) => PrefixKind::Words,
            Prefix::Pixels(_) => PrefixKind::Pixels,
        }
    }

    /// Canonical byte encoding; collision checks and stub lookups key on it.
    pub fn fingerprint_bytes(&self) -> Vec<u8> {
        match self {
            Prefix::Tokens(toks) => {
                let mut out = vec![b'T'];
                for &t in toks {
                    out.extend_from_slice(&(t as u32).to_le_bytes());
                }
                out
            }
            Prefix::Words(words) => {
                let mut out = vec![b'W'];
                for w in words {
                    out.extend_from_slice(&(w.len() as u32).to_le_bytes());
                    out.extend_from_slice(w.as_bytes());
                }
                out
            }
            Prefix::Pixels(g) => {
                let mut out = vec![b'P'];
                out.extend_from_slice(&(g.h as u32).to_le_bytes());
                out.extend_from_slice(&(g.w as u32).to_le_bytes());
                out.extend_from_slice(&g.data);
                out
            }
        }
    }

    /// The text a word-sequence prefix contributes ahead of the prompt:
    /// words joined by single spaces plus one trailing space.
    pub fn words_as_text(words: &[String]) -> String {
        let mut s = words.join(" ");
        s.push(' ');
        s
    }
}

/// Optimizer knobs shared across the four procedures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Update rounds per prefix.
    pub rounds: usize,
    /// Replacement candidates per position in the gradient-guided search.
    pub top_k: usize,
    /// Mutation pool size for the word-sequence search.
    pub pool_llm: usize,
    /// Perturbation batch for the zeroth-order estimator.
    pub pool_vlm: usize,
    /// Per-position mutation probability for the word-sequence search.
    pub p_mutate: f64,
    /// Keep the incumbent prefix in every candidate pool (guarantees a
    /// non-decreasing objective).
    pub include_current: bool,
    /// Subtract the unrelated model's target probability in the objective.
    pub use_unrelated: bool,
    /// Prefix length: tokens or words.
    pub prefix_len: usize,
    /// Pixel grid edge lengths.
    pub grid_h: usize,
    pub grid_w: usize,
    /// Path to a word-list file; `None` uses the builtin versioned list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_list: Option<String>,
    /// Master seed; per-prefix streams derive from it.
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            top_k: 3,
            pool_llm: 8,
            pool_vlm: 8,
            p_mutate: 0.1,
            include_current: true,
            use_unrelated: true,
            prefix_len: 20,
            grid_h: 16,
            grid_w: 16,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.rounds == 0 {
            return Err("rounds must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.p_mutate) {
            return Err(format!("p_mutate {} outside [0,1]", self.p_mutate));
        }
        if self.top_k == 0 || self.pool_llm == 0 || self.pool_vlm == 0 {
            return Err("pool sizes must be at least 1".into());
        }
        if self.prefix_len == 0 {
            return Err("prefix length must be at least 1".into());
        }
        Ok(())
    }
}

/// A record of two optimized prefixes that remained identical after the
/// one retry the collision rule allows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollisionRecord {
    pub first_index: usize,
    pub second_index: usize,
    pub retried: bool,
}

/// Provenance stamped into every probe-set file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub reference_id: String,
    pub access_level: AccessLevel,
    pub mode: String,
    pub config_hash: String,
    pub master_seed: u64,
    /// RFC 3339; excluded from config hashes.
    pub created_at: String,
    pub collisions: Vec<CollisionRecord>,
}

/// One optimized prefix with its designated target candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeEntry {
    pub index: usize,
    /// Candidate index into `task.candidates`, zero-based.
    pub target: usize,
    pub prefix: Prefix,
}

/// `K` prefixes with per-prefix targets, the selection task they were
/// optimized for, and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub task: SelectionTask,
    pub entries: Vec<ProbeEntry>,
    pub provenance: Provenance,
}

impl ProbeSet {
    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn kind(&self) -> Option<PrefixKind> {
        self.entries.first().map(|e| e.prefix.kind())
    }

    /// Indices of entries whose prefixes collide, pairwise.
    pub fn find_collisions(&self) -> Vec<(usize, usize)> {
        use std::collections::HashMap;
        let mut seen: HashMap<Vec<u8>, usize> = HashMap::new();
        let mut out = Vec::new();
        for e in &self.entries {
            let key = e.prefix.fingerprint_bytes();
            if let Some(&first) = seen.get(&key) {
                out.push((first, e.index));
            } else {
                seen.insert(key, e.index);
            }
        }
        out
    }
}

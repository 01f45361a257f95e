//! The per-prefix optimization loop.
//!
//! Initializes `K` prefixes from per-prefix seed streams, runs the chosen
//! step function for the configured number of rounds (each prefix is
//! independent, so the loop fans out across threads), re-optimizes
//! duplicate results once, and stamps provenance into the returned probe
//! set.

use chrono::Utc;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::access::{AccessError, AccessLevel, ModelHandle, SelectionTask};
use crate::hashing;
use crate::rng;

use super::words::{WordList, WordListError};
use super::{
    gcg_step, genetic_step, pgd_step, zo_gradient, CollisionRecord, OptimizerConfig, PixelGrid,
    Prefix, PrefixKind, ProbeEntry, ProbeSet, Provenance,
};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("mode {mode} requires {required} access, reference provides {actual}")]
    IncompatibleMode {
        mode: String,
        required: AccessLevel,
        actual: AccessLevel,
    },
    #[error("use_unrelated is set but no unrelated handle was given")]
    MissingUnrelated,
    #[error("word list needs at least 2 distinct words, got {0}")]
    WordListTooSmall(usize),
    #[error(transparent)]
    WordList(#[from] WordListError),
    #[error("targets list has {got} entries, expected {expected}")]
    BadTargets { expected: usize, got: usize },
    #[error("target index {0} out of range for {1} candidates")]
    TargetOutOfRange(usize, usize),
    #[error("invalid optimizer config: {0}")]
    BadConfig(String),
    #[error("reference backend exposes no local vocabulary")]
    NoVocab,
    #[error(transparent)]
    Access(#[from] AccessError),
}

/// The four optimization procedures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizeMode {
    Gcg,
    Genetic,
    Pgd,
    ZoPgd,
}

impl OptimizeMode {
    pub fn required_level(self) -> AccessLevel {
        match self {
            OptimizeMode::Gcg | OptimizeMode::Pgd => AccessLevel::Gradient,
            OptimizeMode::Genetic | OptimizeMode::ZoPgd => AccessLevel::GrayBox,
        }
    }

    pub fn kind(self) -> PrefixKind {
        match self {
            OptimizeMode::Gcg => PrefixKind::Tokens,
            OptimizeMode::Genetic => PrefixKind::Words,
            OptimizeMode::Pgd | OptimizeMode::ZoPgd => PrefixKind::Pixels,
        }
    }
}

impl std::fmt::Display for OptimizeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OptimizeMode::Gcg => write!(f, "gcg"),
            OptimizeMode::Genetic => write!(f, "genetic"),
            OptimizeMode::Pgd => write!(f, "pgd"),
            OptimizeMode::ZoPgd => write!(f, "zo-pgd"),
        }
    }
}

impl std::str::FromStr for OptimizeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gcg" => Ok(OptimizeMode::Gcg),
            "genetic" => Ok(OptimizeMode::Genetic),
            "pgd" => Ok(OptimizeMode::Pgd),
            "zo-pgd" => Ok(OptimizeMode::ZoPgd),
            other => Err(format!("unknown optimizer mode {other:?}")),
        }
    }
}

/// A finished probe-set optimization with its audit trail.
#[derive(Debug, Clone)]
pub struct ProbeRun {
    pub probe_set: ProbeSet,
    /// Per prefix: objective before any round, then after each round.
    pub objective_traces: Vec<Vec<f64>>,
    /// Renormalized reference-model target probability of each final prefix.
    pub final_target_probs: Vec<f64>,
    pub mean_final_target_prob: f64,
}

/// Optimize `K` probe prefixes on the reference model.
///
/// Targets default to per-prefix uniform draws over the candidate set.
/// Duplicate final prefixes are re-initialized and re-optimized once; pairs
/// still colliding afterwards are reported in the provenance collision
/// ledger.
pub fn optimize_probe_set(
    reference: &ModelHandle,
    unrelated: Option<&ModelHandle>,
    task: &SelectionTask,
    k: usize,
    targets: Option<Vec<usize>>,
    cfg: &OptimizerConfig,
    mode: OptimizeMode,
) -> Result<ProbeRun, OptimizeError> {
    cfg.validate().map_err(OptimizeError::BadConfig)?;
    if k == 0 {
        return Err(OptimizeError::BadConfig("K must be at least 1".into()));
    }
    let required = mode.required_level();
    if !reference.level().allows(required) {
        return Err(OptimizeError::IncompatibleMode {
            mode: mode.to_string(),
            required,
            actual: reference.level(),
        });
    }
    let textual = matches!(mode, OptimizeMode::Gcg | OptimizeMode::Genetic);
    if textual && cfg.use_unrelated && unrelated.is_none() {
        return Err(OptimizeError::MissingUnrelated);
    }
    let n = task.n();
    let targets = match targets {
        Some(t) => {
            if t.len() != k {
                return Err(OptimizeError::BadTargets {
                    expected: k,
                    got: t.len(),
                });
            }
            if let Some(&bad) = t.iter().find(|&&x| x >= n) {
                return Err(OptimizeError::TargetOutOfRange(bad, n));
            }
            t
        }
        None => (0..k)
            .map(|i| {
                rng::stream(cfg.seed, "target", &[i as u64]).gen_range(0..n)
            })
            .collect(),
    };
    let words = match cfg.word_list.as_deref() {
        Some(path) => WordList::from_path(std::path::Path::new(path))?,
        None => WordList::builtin().clone(),
    };

    let optimize_one = |index: usize, retry: u64| -> Result<(Prefix, Vec<f64>), OptimizeError> {
        let seed = rng::derive(cfg.seed, "prefix", &[index as u64, retry]);
        run_one(reference, unrelated, task, targets[index], cfg, mode, &words, seed)
    };

    let mut results: Vec<(Prefix, Vec<f64>)> = (0..k)
        .into_par_iter()
        .map(|i| optimize_one(i, 0))
        .collect::<Result<_, _>>()?;

    // collision rule: re-initialize and re-optimize duplicates once, then
    // report whatever still collides
    let duplicate_indices = duplicates_of(results.iter().map(|(p, _)| p));
    for &i in &duplicate_indices {
        results[i] = optimize_one(i, 1)?;
    }
    let collisions: Vec<CollisionRecord> = duplicates_pairs(results.iter().map(|(p, _)| p))
        .into_iter()
        .map(|(first, second)| CollisionRecord {
            first_index: first,
            second_index: second,
            retried: true,
        })
        .collect();

    let final_target_probs: Vec<f64> = results
        .par_iter()
        .zip(&targets)
        .map(|((prefix, _), &t)| Ok(reference.candidate_distribution(prefix, task)?[t]))
        .collect::<Result<_, OptimizeError>>()?;
    let mean_final_target_prob =
        final_target_probs.iter().sum::<f64>() / final_target_probs.len() as f64;

    let entries = results
        .iter()
        .enumerate()
        .map(|(i, (prefix, _))| ProbeEntry {
            index: i,
            target: targets[i],
            prefix: prefix.clone(),
        })
        .collect();
    let objective_traces = results.into_iter().map(|(_, trace)| trace).collect();

    let provenance = Provenance {
        reference_id: reference.id().to_string(),
        access_level: reference.level(),
        mode: mode.to_string(),
        config_hash: hashing::config_hash(&(cfg, mode, task)),
        master_seed: cfg.seed,
        created_at: Utc::now().to_rfc3339(),
        collisions,
    };
    Ok(ProbeRun {
        probe_set: ProbeSet {
            task: task.clone(),
            entries,
            provenance,
        },
        objective_traces,
        final_target_probs,
        mean_final_target_prob,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    reference: &ModelHandle,
    unrelated: Option<&ModelHandle>,
    task: &SelectionTask,
    target: usize,
    cfg: &OptimizerConfig,
    mode: OptimizeMode,
    words: &WordList,
    seed: u64,
) -> Result<(Prefix, Vec<f64>), OptimizeError> {
    let mut trace = Vec::with_capacity(cfg.rounds + 1);
    match mode {
        OptimizeMode::Gcg => {
            let vocab = reference.vocab().ok_or(OptimizeError::NoVocab)?;
            let mut irng = rng::stream(seed, "token-init", &[]);
            let mut x: Vec<usize> = (0..cfg.prefix_len)
                .map(|_| irng.gen_range(0..vocab.size()))
                .collect();
            trace.push(difference_objective(reference, unrelated, task, target, cfg, &Prefix::Tokens(x.clone()))?);
            for _ in 0..cfg.rounds {
                let (next, obj) = gcg_step(reference, unrelated, &x, task, target, cfg)?;
                x = next;
                trace.push(obj);
            }
            Ok((Prefix::Tokens(x), trace))
        }
        OptimizeMode::Genetic => {
            let mut irng = rng::stream(seed, "word-init", &[]);
            let mut x: Vec<String> = (0..cfg.prefix_len)
                .map(|_| words.sample(&mut irng).to_string())
                .collect();
            trace.push(difference_objective(reference, unrelated, task, target, cfg, &Prefix::Words(x.clone()))?);
            for r in 0..cfg.rounds {
                let round_seed = rng::derive(seed, "round", &[r as u64]);
                let (next, obj) =
                    genetic_step(reference, unrelated, &x, task, target, cfg, words, round_seed)?;
                x = next;
                trace.push(obj);
            }
            Ok((Prefix::Words(x), trace))
        }
        OptimizeMode::Pgd => {
            let mut x = random_grid(cfg, seed)?;
            trace.push(target_prob(reference, task, target, &x)?);
            for _ in 0..cfg.rounds {
                x = pgd_step(reference, &x, task, target)?;
                trace.push(target_prob(reference, task, target, &x)?);
            }
            Ok((Prefix::Pixels(x), trace))
        }
        OptimizeMode::ZoPgd => {
            let mut x = random_grid(cfg, seed)?;
            trace.push(target_prob(reference, task, target, &x)?);
            for r in 0..cfg.rounds {
                let round_seed = rng::derive(seed, "round", &[r as u64]);
                let grad = zo_gradient(reference, &x, task, target, cfg, round_seed)?;
                x = super::visual::apply_sign_step(&x, &grad);
                trace.push(target_prob(reference, task, target, &x)?);
            }
            Ok((Prefix::Pixels(x), trace))
        }
    }
}

fn random_grid(cfg: &OptimizerConfig, seed: u64) -> Result<PixelGrid, OptimizeError> {
    PixelGrid::random(cfg.grid_h, cfg.grid_w, rng::derive(seed, "grid-init", &[]))
        .map_err(|e| OptimizeError::BadConfig(e.to_string()))
}

fn target_prob(
    reference: &ModelHandle,
    task: &SelectionTask,
    target: usize,
    grid: &PixelGrid,
) -> Result<f64, OptimizeError> {
    Ok(reference.candidate_distribution(&Prefix::Pixels(grid.clone()), task)?[target])
}

fn difference_objective(
    reference: &ModelHandle,
    unrelated: Option<&ModelHandle>,
    task: &SelectionTask,
    target: usize,
    cfg: &OptimizerConfig,
    prefix: &Prefix,
) -> Result<f64, OptimizeError> {
    let mut obj = reference.candidate_distribution(prefix, task)?[target];
    if cfg.use_unrelated {
        let u = unrelated.ok_or(OptimizeError::MissingUnrelated)?;
        obj -= u.candidate_distribution(prefix, task)?[target];
    }
    Ok(obj)
}

/// Later indices of entries whose fingerprint repeats an earlier entry.
fn duplicates_of<'a>(prefixes: impl Iterator<Item = &'a Prefix>) -> Vec<usize> {
    use std::collections::HashSet;
    let mut seen = HashSet::new();
    let mut dups = Vec::new();
    for (i, p) in prefixes.enumerate() {
        if !seen.insert(p.fingerprint_bytes()) {
            dups.push(i);
        }
    }
    dups
}

fn duplicates_pairs<'a>(prefixes: impl Iterator<Item = &'a Prefix>) -> Vec<(usize, usize)> {
    use std::collections::HashMap;
    let mut seen: HashMap<Vec<u8>, usize> = HashMap::new();
    let mut pairs = Vec::new();
    for (i, p) in prefixes.enumerate() {
        match seen.entry(p.fingerprint_bytes()) {
            std::collections::hash_map::Entry::Occupied(e) => pairs.push((*e.get(), i)),
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(i);
            }
        }
    }
    pairs
}

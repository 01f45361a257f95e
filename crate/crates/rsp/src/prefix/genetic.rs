//! Mutation-based word search for logits-access reference models.

use rand::Rng;

use crate::access::{AccessLevel, ModelHandle, SelectionTask};
use crate::prefix::Prefix;
use crate::rng;

use super::driver::OptimizeError;
use super::words::WordList;
use super::OptimizerConfig;

/// One search round: draw `pool_llm` mutated copies of `x` (each position
/// independently resampled with probability `p_mutate`, uniformly over the
/// word list excluding the incumbent word) and return the pool member with
/// the best difference objective. `seed` scopes the mutation stream; the
/// driver derives it per prefix and round.
pub fn genetic_step(
    reference: &ModelHandle,
    unrelated: Option<&ModelHandle>,
    x: &[String],
    task: &SelectionTask,
    target: usize,
    cfg: &OptimizerConfig,
    words: &WordList,
    seed: u64,
) -> Result<(Vec<String>, f64), OptimizeError> {
    if !reference.level().allows(AccessLevel::GrayBox) {
        return Err(OptimizeError::IncompatibleMode {
            mode: "genetic".into(),
            required: AccessLevel::GrayBox,
            actual: reference.level(),
        });
    }
    if words.len() < 2 {
        return Err(OptimizeError::WordListTooSmall(words.len()));
    }
    let unrelated = super::gcg::unrelated_handle(unrelated, cfg)?;

    let objective = |w: &[String]| -> Result<f64, OptimizeError> {
        let prefix = Prefix::Words(w.to_vec());
        let mut obj = reference.candidate_distribution(&prefix, task)?[target];
        if let Some(u) = unrelated {
            obj -= u.candidate_distribution(&prefix, task)?[target];
        }
        Ok(obj)
    };

    let mut best: Option<(Vec<String>, f64)> = if cfg.include_current {
        Some((x.to_vec(), objective(x)?))
    } else {
        None
    };
    for i in 0..cfg.pool_llm {
        let mut mrng = rng::stream(seed, "mutate", &[i as u64]);
        let mut mutant = x.to_vec();
        for slot in mutant.iter_mut() {
            if mrng.gen::<f64>() < cfg.p_mutate {
                *slot = words.sample_excluding(&mut mrng, slot).to_string();
            }
        }
        let obj = objective(&mutant)?;
        let better = best.as_ref().is_none_or(|(_, b)| obj > *b);
        if better {
            best = Some((mutant, obj));
        }
    }
    Ok(best.expect("non-empty mutation pool"))
}

//! Gradient-guided token search.
//!
//! One step: take the gradient of the selection objective with respect to
//! the prefix's one-hot encoding, collect the top-k most promising
//! replacement tokens per position, evaluate the whole `L * k` pool exactly,
//! and return the pool member maximizing
//! `P_ref(target | x) - [use_unrelated] * P_unrelated(target | x)` with both
//! terms renormalized over the candidate set.

use crate::access::{AccessLevel, ModelHandle, SelectionTask};

use super::driver::OptimizeError;
use super::OptimizerConfig;

/// One search round. Returns the chosen prefix and its objective value.
pub fn gcg_step(
    reference: &ModelHandle,
    unrelated: Option<&ModelHandle>,
    x: &[usize],
    task: &SelectionTask,
    target: usize,
    cfg: &OptimizerConfig,
) -> Result<(Vec<usize>, f64), OptimizeError> {
    if !reference.level().allows(AccessLevel::Gradient) {
        return Err(OptimizeError::IncompatibleMode {
            mode: "gcg".into(),
            required: AccessLevel::Gradient,
            actual: reference.level(),
        });
    }
    let unrelated = unrelated_handle(unrelated, cfg)?;
    let vocab_size = reference
        .vocab()
        .ok_or(OptimizeError::NoVocab)?
        .size();

    let grad = reference.selection_grad_onehot(x, task, target)?;
    let l = x.len();

    // per position, the k replacement tokens with the steepest ascent
    // coordinates, skipping the incumbent token
    let mut pool: Vec<Vec<usize>> = Vec::with_capacity(l * cfg.top_k);
    for i in 0..l {
        let row = &grad[i * vocab_size..(i + 1) * vocab_size];
        let mut order: Vec<usize> = (0..vocab_size).filter(|&t| t != x[i]).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite gradient"));
        for &tok in order.iter().take(cfg.top_k) {
            let mut cand = x.to_vec();
            cand[i] = tok;
            pool.push(cand);
        }
    }

    let objective = |tokens: &[usize]| -> Result<f64, OptimizeError> {
        let mut obj = reference
            .selection_log_prob_tokens(tokens, task, target)?
            .exp();
        if let Some(u) = unrelated {
            obj -= u.selection_log_prob_tokens(tokens, task, target)?.exp();
        }
        Ok(obj)
    };

    let mut best: Option<(Vec<usize>, f64)> = if cfg.include_current {
        Some((x.to_vec(), objective(x)?))
    } else {
        None
    };
    for cand in pool {
        let obj = objective(&cand)?;
        let better = best.as_ref().is_none_or(|(_, b)| obj > *b);
        if better {
            best = Some((cand, obj));
        }
    }
    Ok(best.expect("non-empty candidate pool"))
}

pub(super) fn unrelated_handle<'a>(
    unrelated: Option<&'a ModelHandle>,
    cfg: &OptimizerConfig,
) -> Result<Option<&'a ModelHandle>, OptimizeError> {
    if cfg.use_unrelated {
        unrelated.map(Some).ok_or(OptimizeError::MissingUnrelated)
    } else {
        Ok(None)
    }
}

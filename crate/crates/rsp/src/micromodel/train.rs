//! Training and fine-tuning loops.
//!
//! Plain Adam on single-sequence windows sampled from a character corpus.
//! All randomness (parameter init, window order) flows from explicit seeds,
//! so the same call produces bit-identical parameters every time.

use rand::Rng;
use thiserror::Error;

use super::{MicroLm, ModelConfig, ModelError, Vocab};
use crate::rng;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Held-out slice: 1/50th of the corpus, at least one full window.
const HELDOUT_DENOM: usize = 50;
const HELDOUT_MAX_WINDOWS: usize = 4;

/// A named character stream with the seed that drives window sampling.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TrainCorpus {
    pub name: String,
    pub text: String,
    pub seed: u64,
}

impl TrainCorpus {
    pub fn new(
        name: impl Into<String>,
        text: impl Into<String>,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let text = text.into();
        if text.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        Ok(Self {
            name: name.into(),
            text,
            seed,
        })
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training requires at least one step")]
    InvalidSteps,
    #[error("learning rate {0} is negative")]
    NegativeLearningRate(f64),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus contains out-of-vocabulary character {ch:?}")]
    OutOfVocab { ch: char },
    #[error("corpus of {len} tokens is too short, need at least {need}")]
    CorpusTooShort { len: usize, need: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Held-out loss before and after training, plus sampled checkpoints.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    /// `(step, held-out loss)` samples, including step 0 and the last step.
    pub curve: Vec<(usize, f64)>,
}

/// Train a freshly initialized model.
pub fn train(
    config: ModelConfig,
    vocab: Vocab,
    init_seed: u64,
    corpus: &TrainCorpus,
    steps: usize,
    lr: f64,
) -> Result<MicroLm, TrainError> {
    train_traced(config, vocab, init_seed, corpus, steps, lr).map(|(m, _)| m)
}

pub fn train_traced(
    config: ModelConfig,
    vocab: Vocab,
    init_seed: u64,
    corpus: &TrainCorpus,
    steps: usize,
    lr: f64,
) -> Result<(MicroLm, TrainTrace), TrainError> {
    let model = MicroLm::init(config, vocab, init_seed)?;
    run_training(model, corpus, steps, lr)
}

/// Continue training from an existing model's parameters.
pub fn finetune(
    model: &MicroLm,
    corpus: &TrainCorpus,
    steps: usize,
    lr: f64,
) -> Result<MicroLm, TrainError> {
    let seed = rng::derive(model.seed(), "finetune", &[corpus.seed]);
    let child = MicroLm::from_parts(
        *model.config(),
        model.vocab().clone(),
        model.params().to_vec(),
        seed,
    )?;
    run_training(child, corpus, steps, lr).map(|(m, _)| m)
}

fn run_training(
    mut model: MicroLm,
    corpus: &TrainCorpus,
    steps: usize,
    lr: f64,
) -> Result<(MicroLm, TrainTrace), TrainError> {
    if steps == 0 {
        return Err(TrainError::InvalidSteps);
    }
    if lr < 0.0 {
        return Err(TrainError::NegativeLearningRate(lr));
    }
    let tokens = model
        .vocab()
        .encode(&corpus.text)
        .map_err(|ch| TrainError::OutOfVocab { ch })?;
    let context = model.config().context;
    let need = 2 * (context + 1);
    if tokens.len() < need {
        return Err(TrainError::CorpusTooShort {
            len: tokens.len(),
            need,
        });
    }
    let heldout_len = (tokens.len() / HELDOUT_DENOM).max(context + 1);
    let (train_tokens, heldout) = tokens.split_at(tokens.len() - heldout_len);
    let window = context.min(train_tokens.len() - 1);

    let initial = heldout_loss(&model, heldout);
    let mut curve = vec![(0, initial)];
    let sample_every = (steps / 8).max(1);

    let n = model.params.len();
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    for step in 1..=steps {
        let mut wrng = rng::stream(corpus.seed, "train-window", &[step as u64]);
        let start = wrng.gen_range(0..=train_tokens.len() - window - 1);
        let inputs = &train_tokens[start..start + window];
        let targets = &train_tokens[start + 1..start + window + 1];
        let grads = loss_backward(&model, inputs, targets)?;
        adam_step(&mut model.params, &grads, &mut m1, &mut m2, step, lr);
        if step % sample_every == 0 && step != steps {
            curve.push((step, heldout_loss(&model, heldout)));
        }
    }
    let final_loss = heldout_loss(&model, heldout);
    curve.push((steps, final_loss));
    Ok((
        model,
        TrainTrace {
            initial_heldout_loss: initial,
            final_heldout_loss: final_loss,
            curve,
        },
    ))
}

/// Mean next-token cross-entropy over up to a few deterministic windows of
/// the held-out slice.
fn heldout_loss(model: &MicroLm, heldout: &[usize]) -> f64 {
    let context = model.config().context;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0usize;
    let mut windows = 0usize;
    while start + 1 < heldout.len() && windows < HELDOUT_MAX_WINDOWS {
        let end = (start + context + 1).min(heldout.len());
        let inputs = &heldout[start..end - 1];
        let targets = &heldout[start + 1..end];
        let cache = model.forward_all(inputs).expect("held-out window fits context");
        let logits = cache.logits.as_ref().expect("full logits");
        let v = model.config().vocab_size;
        for (p, &tgt) in targets.iter().enumerate() {
            let row = &logits[p * v..(p + 1) * v];
            total += -log_softmax_at(row, tgt);
            count += 1;
        }
        start = end - 1;
        windows += 1;
    }
    total / count as f64
}

fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    logits[index] - max - sum.ln()
}

/// Forward + backward for mean cross-entropy of `targets` given `inputs`.
fn loss_backward(model: &MicroLm, inputs: &[usize], targets: &[usize]) -> Result<Vec<f64>, TrainError> {
    let cache = model.forward_all(inputs)?;
    let v = model.config().vocab_size;
    let t = cache.len();
    let logits = cache.logits.as_ref().expect("full logits");
    let mut d_logits = vec![0.0; t * v];
    let inv = 1.0 / t as f64;
    for p in 0..t {
        let row = &logits[p * v..(p + 1) * v];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let d_row = &mut d_logits[p * v..(p + 1) * v];
        for (o, &l) in d_row.iter_mut().zip(row) {
            *o = (l - max).exp();
            sum += *o;
        }
        for o in d_row.iter_mut() {
            *o = *o / sum * inv;
        }
        d_row[targets[p]] -= inv;
    }
    let input = super::forward::SeqInput::tokens(inputs);
    let grads = super::backward::run(model, &input, &cache, &d_logits);
    Ok(grads.d_params)
}

fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m1: &mut [f64],
    m2: &mut [f64],
    step: usize,
    lr: f64,
) {
    let c1 = 1.0 - BETA1.powi(step as i32);
    let c2 = 1.0 - BETA2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m1[i] = BETA1 * m1[i] + (1.0 - BETA1) * g;
        m2[i] = BETA2 * m2[i] + (1.0 - BETA2) * g * g;
        let mhat = m1[i] / c1;
        let vhat = m2[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

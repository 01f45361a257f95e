//! Tiny character-level transformer models with hand-written gradients.
//!
//! [`MicroLm`] is a decoder-only transformer (default: 64-character
//! vocabulary, width 32, 2 blocks, 2 heads, context 128) small enough to
//! train in seconds on a CPU, which lets the rest of the crate manufacture
//! reference / fine-tuned / independently-trained model families on demand.
//! [`MicroVlm`] bolts a linear patch embedding onto a [`MicroLm`] so integer
//! pixel grids can be fed in as a visual prefix.
//!
//! Forward and backward passes are written out by hand (no autodiff
//! dependency); the backward pass produces gradients with respect to both
//! the parameters (for training) and the inputs (relaxed one-hot token
//! matrices and pixel grids, for prefix optimization). Models are immutable
//! once constructed, so forward and gradient calls are safe to share across
//! threads; training owns a private parameter buffer.

mod backward;
mod checkpoint;
mod forward;
mod layout;
mod train;
mod vocab;

pub use checkpoint::{load_checkpoint, CheckpointError, ModelCheckpoint};
pub use train::{finetune, train, train_traced, TrainCorpus, TrainError, TrainTrace};
pub use vocab::Vocab;

use forward::{Cache, SeqInput};
use layout::Layout;

use thiserror::Error;

/// Architecture hyperparameters, fixed at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: Vocab::default64().size(),
            dim: 32,
            blocks: 2,
            heads: 2,
            context: 128,
        }
    }
}

impl ModelConfig {
    fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.vocab_size == 0 || self.blocks == 0 || self.context == 0 {
            return Err(ModelError::BadConfig("zero-sized dimension".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input of {len} tokens exceeds context length {max}")]
    OverlongInput { len: usize, max: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("token id {token} out of range for vocabulary of {vocab} entries")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("target token {target} is not in the candidate set")]
    TargetNotInCandidates { target: usize },
    #[error("candidate set is empty")]
    NoCandidates,
    #[error("pixel grid {h}x{w} is not divisible by patch size {patch}")]
    BadPixelShape { h: usize, w: usize, patch: usize },
    #[error("pixel buffer holds {got} values, expected {expected}")]
    PixelSizeMismatch { expected: usize, got: usize },
    #[error("one-hot matrix has vocab width {got}, model expects {expected}")]
    OneHotWidthMismatch { expected: usize, got: usize },
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
}

/// A `{0,1}`-valued `L x |V|` matrix with exactly one `1` per row: the
/// relaxed encoding of a token-sequence prefix that gradients are taken
/// against.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenOneHot {
    rows: usize,
    width: usize,
    data: Vec<f64>,
}

impl TokenOneHot {
    pub fn from_tokens(tokens: &[usize], vocab_size: usize) -> Result<Self, ModelError> {
        let mut data = vec![0.0; tokens.len() * vocab_size];
        for (row, &tok) in tokens.iter().enumerate() {
            if tok >= vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    token: tok,
                    vocab: vocab_size,
                });
            }
            data[row * vocab_size + tok] = 1.0;
        }
        Ok(Self {
            rows: tokens.len(),
            width: vocab_size,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major `rows x width` matrix.
    pub fn matrix(&self) -> &[f64] {
        &self.data
    }

    /// Token index encoded by each row.
    pub fn tokens(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                self.data[r * self.width..(r + 1) * self.width]
                    .iter()
                    .position(|&v| v == 1.0)
                    .expect("one-hot row")
            })
            .collect()
    }
}

/// Tiny decoder-only character transformer.
///
/// Immutable after construction: `forward_*` and `grad_*` take `&self` and
/// may be called concurrently.
#[derive(Debug, Clone)]
pub struct MicroLm {
    config: ModelConfig,
    vocab: Vocab,
    params: Vec<f64>,
    seed: u64,
}

impl MicroLm {
    /// Fresh model with seeded Gaussian initialization.
    pub fn init(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if vocab.size() != config.vocab_size {
            return Err(ModelError::BadConfig(format!(
                "vocab has {} entries, config says {}",
                vocab.size(),
                config.vocab_size
            )));
        }
        let layout = Layout::new(&config);
        let params = layout.init_params(seed);
        Ok(Self {
            config,
            vocab,
            params,
            seed,
        })
    }

    /// Rebuild a model from raw parts (checkpoints, tests).
    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocab,
        params: Vec<f64>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total() {
            return Err(ModelError::BadConfig(format!(
                "parameter buffer holds {} values, layout needs {}",
                params.len(),
                layout.total()
            )));
        }
        Ok(Self {
            config,
            vocab,
            params,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Flat parameter buffer (layout documented in the checkpoint module).
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), ModelError> {
        for &t in tokens {
            if t >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    token: t,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Logits (length `|V|`) for the token following `tokens`.
    pub fn forward_logits(&self, tokens: &[usize]) -> Result<Vec<f64>, ModelError> {
        self.check_tokens(tokens)?;
        let input = SeqInput::tokens(tokens);
        forward::last_logits(self, &input)
    }

    /// Probability distribution over the vocabulary for the next token.
    pub fn next_token_distribution(&self, tokens: &[usize]) -> Result<Vec<f64>, ModelError> {
        let mut logits = self.forward_logits(tokens)?;
        softmax_in_place(&mut logits);
        Ok(logits)
    }

    /// Per-position logits (`T x |V|`, row-major); used by training.
    pub(crate) fn forward_all(&self, tokens: &[usize]) -> Result<Cache, ModelError> {
        self.check_tokens(tokens)?;
        forward::run(self, &SeqInput::tokens(tokens), true)
    }

    /// Gradient of `log P_norm(target | prefix, prompt)` with respect to the
    /// relaxed one-hot prefix matrix, evaluated at the given one-hot point.
    ///
    /// `P_norm` is the target's probability renormalized over `candidates`;
    /// the returned matrix is `L x |V|` row-major.
    pub fn grad_onehot(
        &self,
        prefix: &TokenOneHot,
        prompt: &[usize],
        candidates: &[usize],
        target: usize,
    ) -> Result<Vec<f64>, ModelError> {
        if prefix.width() != self.config.vocab_size {
            return Err(ModelError::OneHotWidthMismatch {
                expected: self.config.vocab_size,
                got: prefix.width(),
            });
        }
        self.check_tokens(prompt)?;
        let input = SeqInput::relaxed(prefix.matrix(), prefix.rows(), prompt);
        let grads = self.backward_selection(&input, candidates, target)?;
        Ok(grads.d_relaxed.expect("relaxed input gradient"))
    }

    /// `log P_norm(target)` for a relaxed one-hot prefix; the continuous
    /// evaluation path that finite-difference checks probe.
    pub fn selection_log_prob_relaxed(
        &self,
        relaxed: &[f64],
        rows: usize,
        prompt: &[usize],
        candidates: &[usize],
        target: usize,
    ) -> Result<f64, ModelError> {
        self.check_tokens(prompt)?;
        let input = SeqInput::relaxed(relaxed, rows, prompt);
        let logits = forward::last_logits(self, &input)?;
        selection_log_prob(&logits, candidates, target)
    }

    fn backward_selection(
        &self,
        input: &SeqInput<'_>,
        candidates: &[usize],
        target: usize,
    ) -> Result<backward::InputGrads, ModelError> {
        let cache = forward::run(self, input, false)?;
        let last = cache.len() - 1;
        let logits = forward::logits_at(self, &cache, last);
        let seed = selection_logit_grad(&logits, candidates, target, self.config.vocab_size)?;
        let mut d_logits = vec![0.0; cache.len() * self.config.vocab_size];
        d_logits[last * self.config.vocab_size..].copy_from_slice(&seed);
        Ok(backward::run(self, input, &cache, &d_logits))
    }
}

/// Character-level transformer with a linear pixel patch embedding in
/// front: an `H x W x 3` integer grid becomes `(H/patch)*(W/patch)` prefix
/// embeddings ahead of the prompt tokens.
#[derive(Debug, Clone)]
pub struct MicroVlm {
    base: MicroLm,
    patch: usize,
    patch_params: Vec<f64>,
}

impl MicroVlm {
    /// Wraps a trained language model with a seeded random patch embedding.
    pub fn new(base: MicroLm, patch: usize, seed: u64) -> Result<Self, ModelError> {
        if patch == 0 {
            return Err(ModelError::BadConfig("patch size must be positive".into()));
        }
        let patch_params = layout::init_patch_params(&base.config, patch, seed);
        Ok(Self {
            base,
            patch,
            patch_params,
        })
    }

    pub fn from_parts(base: MicroLm, patch: usize, patch_params: Vec<f64>) -> Result<Self, ModelError> {
        let expected = layout::patch_param_len(&base.config, patch);
        if patch_params.len() != expected {
            return Err(ModelError::BadConfig(format!(
                "patch parameter buffer holds {} values, expected {}",
                patch_params.len(),
                expected
            )));
        }
        Ok(Self {
            base,
            patch,
            patch_params,
        })
    }

    pub fn base(&self) -> &MicroLm {
        &self.base
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn patch_params(&self) -> &[f64] {
        &self.patch_params
    }

    pub fn config(&self) -> &ModelConfig {
        self.base.config()
    }

    pub fn vocab(&self) -> &Vocab {
        self.base.vocab()
    }

    fn check_grid(&self, h: usize, w: usize, len: usize) -> Result<(), ModelError> {
        if h == 0 || w == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(ModelError::BadPixelShape {
                h,
                w,
                patch: self.patch,
            });
        }
        if len != h * w * 3 {
            return Err(ModelError::PixelSizeMismatch {
                expected: h * w * 3,
                got: len,
            });
        }
        Ok(())
    }

    /// Next-token logits given a pixel-grid prefix and prompt tokens.
    pub fn forward_logits(
        &self,
        h: usize,
        w: usize,
        pixels: &[u8],
        prompt: &[usize],
    ) -> Result<Vec<f64>, ModelError> {
        let scaled: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        self.forward_logits_scaled(h, w, &scaled, prompt)
    }

    /// Continuous-pixel forward path (`scaled` already in `[0,1]`); the
    /// entry point finite-difference checks use.
    pub fn forward_logits_scaled(
        &self,
        h: usize,
        w: usize,
        scaled: &[f64],
        prompt: &[usize],
    ) -> Result<Vec<f64>, ModelError> {
        self.check_grid(h, w, scaled.len())?;
        self.base.check_tokens(prompt)?;
        let input = SeqInput::pixels(scaled, h, w, prompt);
        forward::last_logits_vlm(self, &input)
    }

    /// `log P_norm(target)` for a pixel prefix.
    pub fn selection_log_prob(
        &self,
        h: usize,
        w: usize,
        pixels: &[u8],
        prompt: &[usize],
        candidates: &[usize],
        target: usize,
    ) -> Result<f64, ModelError> {
        let logits = self.forward_logits(h, w, pixels, prompt)?;
        selection_log_prob(&logits, candidates, target)
    }

    /// Gradient of `log P_norm(target | pixels, prompt)` with respect to the
    /// integer pixel grid (per 0-255 unit; the internal 1/255 scaling is
    /// folded in). Returned flat `H*W*3` row-major.
    pub fn grad_pixels(
        &self,
        h: usize,
        w: usize,
        pixels: &[u8],
        prompt: &[usize],
        candidates: &[usize],
        target: usize,
    ) -> Result<Vec<f64>, ModelError> {
        let scaled: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        self.check_grid(h, w, scaled.len())?;
        self.base.check_tokens(prompt)?;
        let input = SeqInput::pixels(&scaled, h, w, prompt);
        let cache = forward::run_vlm(self, &input)?;
        let last = cache.len() - 1;
        let logits = forward::logits_at(&self.base, &cache, last);
        let seed = selection_logit_grad(&logits, candidates, target, self.config().vocab_size)?;
        let mut d_logits = vec![0.0; cache.len() * self.config().vocab_size];
        d_logits[last * self.config().vocab_size..].copy_from_slice(&seed);
        let grads = backward::run_vlm(self, &input, &cache, &d_logits);
        Ok(grads.d_pixels.expect("pixel gradient"))
    }
}

/// Softmax over one logit vector, in place.
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// `log( p_target / sum over candidates p_i )` from a raw logit vector.
pub fn selection_log_prob(
    logits: &[f64],
    candidates: &[usize],
    target: usize,
) -> Result<f64, ModelError> {
    if candidates.is_empty() {
        return Err(ModelError::NoCandidates);
    }
    if !candidates.contains(&target) {
        return Err(ModelError::TargetNotInCandidates { target });
    }
    // log softmax restricted to the candidate set; the full-vocab partition
    // function cancels.
    let max = candidates
        .iter()
        .map(|&c| logits[c])
        .fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = candidates.iter().map(|&c| (logits[c] - max).exp()).sum();
    Ok(logits[target] - max - denom.ln())
}

/// Gradient of [`selection_log_prob`] with respect to the logit vector:
/// `1[j = target] - 1[j in candidates] * s_j / sum_cand s`.
fn selection_logit_grad(
    logits: &[f64],
    candidates: &[usize],
    target: usize,
    vocab_size: usize,
) -> Result<Vec<f64>, ModelError> {
    if candidates.is_empty() {
        return Err(ModelError::NoCandidates);
    }
    if !candidates.contains(&target) {
        return Err(ModelError::TargetNotInCandidates { target });
    }
    let mut probs = logits.to_vec();
    softmax_in_place(&mut probs);
    let cand_mass: f64 = candidates.iter().map(|&c| probs[c]).sum();
    let mut grad = vec![0.0; vocab_size];
    for &c in candidates {
        grad[c] = -probs[c] / cand_mass;
    }
    grad[target] += 1.0;
    Ok(grad)
}

#[cfg(test)]
mod tests;

//! Uniform model access at four capability levels.
//!
//! A [`ModelHandle`] wraps a backend (local micromodel, fixture stub, or
//! remote endpoint) and enforces exactly one [`AccessLevel`]: an adapter
//! never exposes more capability than its level grants, and every query
//! charges the optional query budget. Handles are cheap to share behind an
//! `Arc` and all query methods take `&self`.

mod remote;
mod stub;

pub use remote::{RemoteEndpoint, RemoteMode};
pub use stub::StubModel;

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::micromodel::{selection_log_prob, MicroLm, MicroVlm, ModelError, TokenOneHot, Vocab};
use crate::prefix::{Prefix, PrefixKind};
use crate::rng;

/// Capability levels, ordered `Gradient > Logits > GrayBox > BlackBox`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccessLevel {
    Gradient,
    Logits,
    GrayBox,
    BlackBox,
}

impl AccessLevel {
    fn rank(self) -> u8 {
        match self {
            AccessLevel::Gradient => 3,
            AccessLevel::Logits => 2,
            AccessLevel::GrayBox => 1,
            AccessLevel::BlackBox => 0,
        }
    }

    /// Does this level grant everything `required` grants?
    pub fn allows(self, required: AccessLevel) -> bool {
        self.rank() >= required.rank()
    }
}

impl std::fmt::Display for AccessLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AccessLevel::Gradient => write!(f, "gradient"),
            AccessLevel::Logits => write!(f, "logits"),
            AccessLevel::GrayBox => write!(f, "gray-box"),
            AccessLevel::BlackBox => write!(f, "black-box"),
        }
    }
}

#[derive(Debug, Error)]
pub enum AccessError {
    #[error("operation requires {required} access, handle '{id}' provides {actual}")]
    Capability {
        id: String,
        required: AccessLevel,
        actual: AccessLevel,
    },
    #[error("query budget exhausted on handle '{0}'")]
    BudgetExhausted(String),
    #[error("all candidate probabilities are zero")]
    DegenerateDistribution,
    #[error("{kind} prefixes are not supported by backend '{id}'")]
    IncompatibleModality { id: String, kind: PrefixKind },
    #[error("invalid selection task: {0}")]
    InvalidTask(String),
    #[error("candidate {0:?} is not a single vocabulary token")]
    BadCandidate(String),
    #[error("remote endpoints only support gray-box or black-box access, not {0}")]
    RemoteLevel(AccessLevel),
    #[error("remote request failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("could not interpret remote response: {0}")]
    BadResponse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The random-selection task: a prompt plus `N` distinct single-token
/// candidates the model is asked to choose between.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionTask {
    pub prompt: String,
    pub candidates: Vec<String>,
}

impl SelectionTask {
    pub fn new(prompt: impl Into<String>, candidates: Vec<String>) -> Result<Self, AccessError> {
        let task = Self {
            prompt: prompt.into(),
            candidates,
        };
        task.validate()?;
        Ok(task)
    }

    /// Candidates `first..=last` as single letters.
    pub fn letter_range(
        prompt: impl Into<String>,
        first: char,
        last: char,
    ) -> Result<Self, AccessError> {
        let candidates = (first..=last).map(String::from).collect();
        Self::new(prompt, candidates)
    }

    pub fn validate(&self) -> Result<(), AccessError> {
        if self.candidates.len() < 2 {
            return Err(AccessError::InvalidTask(format!(
                "need at least 2 candidates, got {}",
                self.candidates.len()
            )));
        }
        for (i, c) in self.candidates.iter().enumerate() {
            if self.candidates[..i].contains(c) {
                return Err(AccessError::InvalidTask(format!("duplicate candidate {c:?}")));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.candidates.len()
    }

    /// Vocabulary token ids of the candidates, for local backends where each
    /// candidate must be a single token.
    pub fn candidate_tokens(&self, vocab: &Vocab) -> Result<Vec<usize>, AccessError> {
        self.candidates
            .iter()
            .map(|c| {
                let mut chars = c.chars();
                let (first, rest) = (chars.next(), chars.next());
                match (first, rest) {
                    (Some(ch), None) => vocab
                        .token(ch)
                        .ok_or_else(|| AccessError::BadCandidate(c.clone())),
                    _ => Err(AccessError::BadCandidate(c.clone())),
                }
            })
            .collect()
    }

    /// Map a raw black-box response to a candidate index: trim whitespace,
    /// lowercase, match on the first character. `None` is a miss.
    pub fn match_response(&self, response: &str) -> Option<usize> {
        let normalized = response.trim().to_lowercase();
        let first = normalized.chars().next()?;
        self.candidates.iter().position(|c| {
            c.to_lowercase().chars().next() == Some(first)
        })
    }
}

enum Backend {
    Lm(Arc<MicroLm>),
    Vlm(Arc<MicroVlm>),
    Stub(Arc<StubModel>),
    Remote(remote::RemoteClient),
}

impl Backend {
    fn describe(&self) -> &'static str {
        match self {
            Backend::Lm(_) => "local-lm",
            Backend::Vlm(_) => "local-vlm",
            Backend::Stub(_) => "stub",
            Backend::Remote(_) => "remote",
        }
    }
}

/// A model pinned behind one access level.
pub struct ModelHandle {
    id: String,
    level: AccessLevel,
    backend: Backend,
    budget: Option<AtomicI64>,
}

/// Open a local model (or stub) at any access level.
pub fn open_local(
    id: impl Into<String>,
    backend: impl Into<LocalBackend>,
    level: AccessLevel,
) -> ModelHandle {
    let backend = match backend.into() {
        LocalBackend::Lm(m) => Backend::Lm(m),
        LocalBackend::Vlm(m) => Backend::Vlm(m),
        LocalBackend::Stub(m) => Backend::Stub(m),
    };
    ModelHandle {
        id: id.into(),
        level,
        backend,
        budget: None,
    }
}

/// Open a remote endpoint; only gray-box and black-box levels exist there.
pub fn open_remote(
    id: impl Into<String>,
    endpoint: RemoteEndpoint,
    level: AccessLevel,
) -> Result<ModelHandle, AccessError> {
    if !matches!(level, AccessLevel::GrayBox | AccessLevel::BlackBox) {
        return Err(AccessError::RemoteLevel(level));
    }
    Ok(ModelHandle {
        id: id.into(),
        level,
        backend: Backend::Remote(remote::RemoteClient::new(endpoint)),
        budget: None,
    })
}

/// Local backends accepted by [`open_local`].
pub enum LocalBackend {
    Lm(Arc<MicroLm>),
    Vlm(Arc<MicroVlm>),
    Stub(Arc<StubModel>),
}

impl From<Arc<MicroLm>> for LocalBackend {
    fn from(m: Arc<MicroLm>) -> Self {
        LocalBackend::Lm(m)
    }
}

impl From<MicroLm> for LocalBackend {
    fn from(m: MicroLm) -> Self {
        LocalBackend::Lm(Arc::new(m))
    }
}

impl From<Arc<MicroVlm>> for LocalBackend {
    fn from(m: Arc<MicroVlm>) -> Self {
        LocalBackend::Vlm(m)
    }
}

impl From<MicroVlm> for LocalBackend {
    fn from(m: MicroVlm) -> Self {
        LocalBackend::Vlm(Arc::new(m))
    }
}

impl From<Arc<StubModel>> for LocalBackend {
    fn from(m: Arc<StubModel>) -> Self {
        LocalBackend::Stub(m)
    }
}

impl From<StubModel> for LocalBackend {
    fn from(m: StubModel) -> Self {
        LocalBackend::Stub(Arc::new(m))
    }
}

impl ModelHandle {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn level(&self) -> AccessLevel {
        self.level
    }

    /// Cap the total number of queries this handle will serve.
    pub fn with_budget(mut self, queries: u64) -> Self {
        self.budget = Some(AtomicI64::new(queries as i64));
        self
    }

    pub fn remaining_budget(&self) -> Option<u64> {
        self.budget
            .as_ref()
            .map(|b| b.load(Ordering::Relaxed).max(0) as u64)
    }

    fn require(&self, required: AccessLevel) -> Result<(), AccessError> {
        if self.level.allows(required) {
            Ok(())
        } else {
            Err(AccessError::Capability {
                id: self.id.clone(),
                required,
                actual: self.level,
            })
        }
    }

    /// Every backend query passes through here; decrements the budget if one
    /// is set and refuses once it is spent.
    fn charge(&self) -> Result<(), AccessError> {
        if let Some(budget) = &self.budget {
            let prev = budget.fetch_sub(1, Ordering::AcqRel);
            if prev <= 0 {
                budget.fetch_add(1, Ordering::AcqRel);
                return Err(AccessError::BudgetExhausted(self.id.clone()));
            }
        }
        Ok(())
    }

    fn incompatible(&self, kind: PrefixKind) -> AccessError {
        AccessError::IncompatibleModality {
            id: format!("{} ({})", self.id, self.backend.describe()),
            kind,
        }
    }

    /// Raw (unnormalized) candidate probabilities, in task order.
    fn raw_candidate_probs(
        &self,
        prefix: &Prefix,
        task: &SelectionTask,
    ) -> Result<Vec<f64>, AccessError> {
        match &self.backend {
            Backend::Lm(model) => {
                let tokens = render_text_input(prefix, task, model.vocab())
                    .ok_or_else(|| self.incompatible(prefix.kind()))??;
                let cand = task.candidate_tokens(model.vocab())?;
                let dist = model.next_token_distribution(&tokens)?;
                Ok(cand.into_iter().map(|t| dist[t]).collect())
            }
            Backend::Vlm(model) => match prefix {
                Prefix::Pixels(grid) => {
                    let prompt = encode_prompt(task, model.vocab())?;
                    let cand = task.candidate_tokens(model.vocab())?;
                    let logits =
                        model.forward_logits(grid.h(), grid.w(), grid.data(), &prompt)?;
                    let mut probs = logits;
                    crate::micromodel::softmax_in_place(&mut probs);
                    Ok(cand.into_iter().map(|t| probs[t]).collect())
                }
                _ => Err(self.incompatible(prefix.kind())),
            },
            Backend::Stub(stub) => stub.raw_candidate_probs(prefix, task),
            Backend::Remote(client) => client.raw_candidate_probs(prefix, task),
        }
    }

    /// Renormalized candidate distribution: entry `i` is
    /// `P(o_i | prefix, prompt) / sum_j P(o_j | prefix, prompt)`.
    ///
    /// Requires gray-box access or better.
    pub fn candidate_distribution(
        &self,
        prefix: &Prefix,
        task: &SelectionTask,
    ) -> Result<Vec<f64>, AccessError> {
        self.require(AccessLevel::GrayBox)?;
        self.charge()?;
        let mut probs = self.raw_candidate_probs(prefix, task)?;
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Err(AccessError::DegenerateDistribution);
        }
        for p in &mut probs {
            *p /= total;
        }
        Ok(probs)
    }

    /// Index of the most probable candidate; ties break to the lowest index.
    pub fn argmax_candidate(
        &self,
        prefix: &Prefix,
        task: &SelectionTask,
    ) -> Result<usize, AccessError> {
        let dist = self.candidate_distribution(prefix, task)?;
        Ok(argmax_lowest(&dist))
    }

    /// Log of the renormalized probability of candidate `target`.
    pub fn selection_log_prob(
        &self,
        prefix: &Prefix,
        task: &SelectionTask,
        target: usize,
    ) -> Result<f64, AccessError> {
        let dist = self.candidate_distribution(prefix, task)?;
        Ok(dist[target].ln())
    }

    /// One sampled response. Local language models sample the full-vocabulary
    /// next-token distribution at temperature 1 under the given seed; stubs
    /// follow their own contract; remote endpoints return generated text.
    pub fn sample_output(
        &self,
        prefix: &Prefix,
        task: &SelectionTask,
        seed: u64,
    ) -> Result<String, AccessError> {
        self.charge()?;
        match &self.backend {
            Backend::Lm(model) => {
                let tokens = render_text_input(prefix, task, model.vocab())
                    .ok_or_else(|| self.incompatible(prefix.kind()))??;
                let dist = model.next_token_distribution(&tokens)?;
                let tok = sample_categorical(&dist, seed);
                Ok(model.vocab().char_at(tok).expect("token in vocab").to_string())
            }
            Backend::Vlm(model) => match prefix {
                Prefix::Pixels(grid) => {
                    let prompt = encode_prompt(task, model.vocab())?;
                    let logits =
                        model.forward_logits(grid.h(), grid.w(), grid.data(), &prompt)?;
                    let mut dist = logits;
                    crate::micromodel::softmax_in_place(&mut dist);
                    let tok = sample_categorical(&dist, seed);
                    Ok(model.vocab().char_at(tok).expect("token in vocab").to_string())
                }
                _ => Err(self.incompatible(prefix.kind())),
            },
            Backend::Stub(stub) => stub.sample_output(prefix, task, seed),
            Backend::Remote(client) => {
                let text = render_prefix_text(prefix, task)
                    .ok_or_else(|| self.incompatible(prefix.kind()))?;
                client.sample_text(&text)
            }
        }
    }

    /// Gradient of `log P_norm(target | prefix, prompt)` with respect to the
    /// prefix's relaxed one-hot encoding (`L x |V|`). Gradient access plus a
    /// local language-model backend only.
    pub fn selection_grad_onehot(
        &self,
        prefix_tokens: &[usize],
        task: &SelectionTask,
        target: usize,
    ) -> Result<Vec<f64>, AccessError> {
        self.require(AccessLevel::Gradient)?;
        self.charge()?;
        match &self.backend {
            Backend::Lm(model) => {
                let vocab = model.vocab();
                let prompt = encode_prompt(task, vocab)?;
                let cand = task.candidate_tokens(vocab)?;
                let onehot = TokenOneHot::from_tokens(prefix_tokens, vocab.size())?;
                Ok(model.grad_onehot(&onehot, &prompt, &cand, cand[target])?)
            }
            _ => Err(self.incompatible(PrefixKind::Tokens)),
        }
    }

    /// Gradient of `log P_norm(target | pixels, prompt)` with respect to the
    /// pixel grid. Gradient access plus a local vision backend only.
    pub fn selection_grad_pixels(
        &self,
        grid: &crate::prefix::PixelGrid,
        task: &SelectionTask,
        target: usize,
    ) -> Result<Vec<f64>, AccessError> {
        self.require(AccessLevel::Gradient)?;
        self.charge()?;
        match &self.backend {
            Backend::Vlm(model) => {
                let vocab = model.vocab();
                let prompt = encode_prompt(task, vocab)?;
                let cand = task.candidate_tokens(vocab)?;
                Ok(model.grad_pixels(
                    grid.h(),
                    grid.w(),
                    grid.data(),
                    &prompt,
                    &cand,
                    cand[target],
                )?)
            }
            _ => Err(self.incompatible(PrefixKind::Pixels)),
        }
    }

    /// Direct `log P_norm` evaluation on the raw logits path, bypassing the
    /// gray-box renormalization round trip (identical value, fewer
    /// allocations). Used by the gradient-side optimizers.
    pub(crate) fn selection_log_prob_tokens(
        &self,
        tokens: &[usize],
        task: &SelectionTask,
        target: usize,
    ) -> Result<f64, AccessError> {
        match &self.backend {
            Backend::Lm(model) => {
                self.charge()?;
                let vocab = model.vocab();
                let prompt = encode_prompt(task, vocab)?;
                let cand = task.candidate_tokens(vocab)?;
                let mut input = tokens.to_vec();
                input.extend_from_slice(&prompt);
                let logits = model.forward_logits(&input)?;
                Ok(selection_log_prob(&logits, &cand, cand[target])?)
            }
            _ => {
                let prefix = Prefix::Tokens(tokens.to_vec());
                self.selection_log_prob(&prefix, task, target)
            }
        }
    }
}

/// Encode the task prompt for a local vocabulary.
fn encode_prompt(task: &SelectionTask, vocab: &Vocab) -> Result<Vec<usize>, AccessError> {
    vocab
        .encode(&task.prompt)
        .map_err(|ch| AccessError::InvalidTask(format!("prompt contains out-of-vocab {ch:?}")))
}

/// Text form of a prefix for remote transport; pixel grids have none.
fn render_prefix_text(prefix: &Prefix, task: &SelectionTask) -> Option<String> {
    match prefix {
        Prefix::Tokens(_) => None, // raw token ids are meaningless remotely
        Prefix::Words(words) => Some(format!("{}{}", Prefix::words_as_text(words), task.prompt)),
        Prefix::Pixels(_) => None,
    }
}

/// Token rendering of a textual prefix plus the prompt for a local model.
/// `None` means the modality does not apply to a text-only backend.
fn render_text_input(
    prefix: &Prefix,
    task: &SelectionTask,
    vocab: &Vocab,
) -> Option<Result<Vec<usize>, AccessError>> {
    match prefix {
        Prefix::Tokens(tokens) => {
            let mut input = tokens.clone();
            match encode_prompt(task, vocab) {
                Ok(p) => {
                    input.extend_from_slice(&p);
                    Some(Ok(input))
                }
                Err(e) => Some(Err(e)),
            }
        }
        Prefix::Words(words) => {
            let text = format!("{}{}", Prefix::words_as_text(words), task.prompt);
            Some(
                vocab
                    .encode(&text)
                    .map_err(|ch| {
                        AccessError::InvalidTask(format!(
                            "word prefix contains out-of-vocab {ch:?}"
                        ))
                    }),
            )
        }
        Prefix::Pixels(_) => None,
    }
}

/// Lowest-index argmax.
pub(crate) fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Temperature-1 categorical draw under a derived stream.
fn sample_categorical(probs: &[f64], seed: u64) -> usize {
    use rand::Rng;
    let mut rng = rng::stream(seed, "sample-output", &[]);
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests;

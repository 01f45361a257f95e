//! Fixture backend with scripted next-token distributions.
//!
//! Stubs stand in for real models in tests and examples: a default
//! distribution over the vocabulary plus optional per-prefix overrides. A
//! deterministic stub (the default) answers [`sample_output`] with its
//! argmax token regardless of seed — the "temperature 0" contract that makes
//! black-box evaluation coincide with gray-box exactly. Sampling stubs draw
//! from the distribution at temperature 1 instead.
//!
//! [`sample_output`]: super::ModelHandle::sample_output

use std::collections::HashMap;

use crate::micromodel::Vocab;
use crate::prefix::Prefix;

use super::{argmax_lowest, AccessError, SelectionTask};

pub struct StubModel {
    vocab: Vocab,
    default_probs: Vec<f64>,
    overrides: HashMap<Vec<u8>, Vec<f64>>,
    deterministic: bool,
}

impl StubModel {
    /// Identical probability on every vocabulary token.
    pub fn uniform(vocab: Vocab) -> Self {
        let n = vocab.size();
        Self::with_probs(vocab, vec![1.0 / n as f64; n])
    }

    /// All probability mass on one character.
    pub fn constant_char(vocab: Vocab, ch: char) -> Self {
        let tok = vocab.token(ch).expect("stub char in vocab");
        let mut probs = vec![0.0; vocab.size()];
        probs[tok] = 1.0;
        Self::with_probs(vocab, probs)
    }

    /// Explicit default distribution (need not be normalized; entries are
    /// treated as raw probabilities).
    pub fn with_probs(vocab: Vocab, probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), vocab.size(), "distribution width");
        Self {
            vocab,
            default_probs: probs,
            overrides: HashMap::new(),
            deterministic: true,
        }
    }

    /// Answer a specific prefix with all mass on `ch`.
    pub fn respond(mut self, prefix: &Prefix, ch: char) -> Self {
        let tok = self.vocab.token(ch).expect("stub char in vocab");
        let mut probs = vec![0.0; self.vocab.size()];
        probs[tok] = 1.0;
        self.overrides.insert(prefix.fingerprint_bytes(), probs);
        self
    }

    /// Answer a specific prefix with an explicit distribution.
    pub fn respond_probs(mut self, prefix: &Prefix, probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), self.vocab.size(), "distribution width");
        self.overrides.insert(prefix.fingerprint_bytes(), probs);
        self
    }

    /// Switch to temperature-1 sampling in `sample_output`.
    pub fn sampling(mut self) -> Self {
        self.deterministic = false;
        self
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn probs_for(&self, prefix: &Prefix) -> &[f64] {
        self.overrides
            .get(&prefix.fingerprint_bytes())
            .map_or(&self.default_probs, |p| p)
    }

    pub(super) fn raw_candidate_probs(
        &self,
        prefix: &Prefix,
        task: &SelectionTask,
    ) -> Result<Vec<f64>, AccessError> {
        let probs = self.probs_for(prefix);
        let cand = task.candidate_tokens(&self.vocab)?;
        Ok(cand.into_iter().map(|t| probs[t]).collect())
    }

    pub(super) fn sample_output(
        &self,
        prefix: &Prefix,
        _task: &SelectionTask,
        seed: u64,
    ) -> Result<String, AccessError> {
        let probs = self.probs_for(prefix);
        let tok = if self.deterministic {
            argmax_lowest(probs)
        } else {
            let total: f64 = probs.iter().sum();
            if total <= 0.0 {
                return Err(AccessError::DegenerateDistribution);
            }
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, "stub-sample", &[]);
            let u: f64 = rng.gen::<f64>() * total;
            let mut cum = 0.0;
            let mut pick = probs.len() - 1;
            for (i, &p) in probs.iter().enumerate() {
                cum += p;
                if u < cum {
                    pick = i;
                    break;
                }
            }
            pick
        };
        Ok(self.vocab.char_at(tok).expect("token in vocab").to_string())
    }
}

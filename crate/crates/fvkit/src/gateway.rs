//! Uniform model interface: sequence scoring, per-head capture at the final
//! token, single-head patching, and additive residual-stream injection.
//!
//! The pipeline talks to a [`ModelGateway`] and never to a concrete model.
//! [`MiniGateway`] backs the trait with the bundled miniature transformer;
//! the contract is the same for any backend: interventions act at the final
//! token position only, and captures are taken after each head's output
//! projection into residual space (the projection bias belongs to the layer,
//! not to any head).

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::corpus::PromptInstance;
use crate::error::{FvError, Result};
use crate::model::MiniTransformer;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Structural facts about a loaded model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model_id: String,
    pub n_layers: usize,
    pub n_heads_per_layer: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    /// Non-text token ids, masked out wherever the pipeline samples tokens.
    pub added_vocabulary_ids: Vec<u32>,
}

impl ModelProfile {
    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads_per_layer
    }
}

/// Coordinate of one attention head.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    pub fn in_bounds(&self, profile: &ModelProfile) -> bool {
        self.layer < profile.n_layers && self.head < profile.n_heads_per_layer
    }
}

impl std::fmt::Display for HeadId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// One head's residual-space output at the final token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadOutput {
    pub head: HeadId,
    pub vector: Vec<f64>,
}

/// Interventions to apply during one forward pass.
///
/// Head patches replace the named heads' final-token outputs before their
/// residual addition; additions are added to the hidden state immediately
/// after the named layer, at the final token position. Additions targeting
/// the same layer are pre-summed, so two additions at one layer are exactly
/// one addition of the vector sum.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InterventionPlan {
    pub additions: Vec<(usize, Vec<f64>)>,
    pub head_patches: Vec<(HeadId, Vec<f64>)>,
}

impl InterventionPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.additions.is_empty() && self.head_patches.is_empty()
    }

    pub fn with_addition(mut self, layer: usize, vector: Vec<f64>) -> Self {
        self.additions.push((layer, vector));
        self
    }

    pub fn with_head_patch(mut self, head: HeadId, vector: Vec<f64>) -> Self {
        self.head_patches.push((head, vector));
        self
    }

    pub fn validate(&self, profile: &ModelProfile) -> Result<()> {
        for (layer, vector) in &self.additions {
            if *layer >= profile.n_layers {
                return Err(FvError::PlanInvalid(format!(
                    "addition layer {layer} out of range (model has {} layers)",
                    profile.n_layers
                )));
            }
            if vector.len() != profile.d_model {
                return Err(FvError::PlanInvalid(format!(
                    "addition vector length {} != d_model {}",
                    vector.len(),
                    profile.d_model
                )));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for (head, vector) in &self.head_patches {
            if !head.in_bounds(profile) {
                return Err(FvError::PlanInvalid(format!("head {head} out of range")));
            }
            if vector.len() != profile.d_model {
                return Err(FvError::PlanInvalid(format!(
                    "patch vector length {} != d_model {}",
                    vector.len(),
                    profile.d_model
                )));
            }
            if !seen.insert(*head) {
                return Err(FvError::PlanInvalid(format!(
                    "head {head} patched more than once"
                )));
            }
        }
        Ok(())
    }
}

/// Per-head captures at the final token plus the unmodified next-token
/// distribution.
#[derive(Debug, Clone)]
pub struct HeadCapture {
    pub outputs: BTreeMap<HeadId, HeadOutput>,
    pub next_token_probs: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Gateway trait
// ---------------------------------------------------------------------------

/// The model capabilities the pipeline needs, and nothing else.
///
/// Implementations must be reentrant for `&self` calls; the pipeline
/// parallelizes across tasks with one gateway handle per worker and
/// serializes calls within a task.
pub trait ModelGateway: Send + Sync {
    fn profile(&self) -> &ModelProfile;

    /// Tokenizes free text (no BOS).
    fn encode(&self, text: &str) -> Vec<u32>;

    fn decode(&self, ids: &[u32]) -> String;

    /// The sequence-start token id.
    fn bos_id(&self) -> u32;

    /// Token ids the model is conditioned on for a prompt, starting at BOS.
    fn prompt_tokens(&self, prompt: &PromptInstance) -> Result<Vec<u32>>;

    /// Per-token log-probabilities for a sequence starting at BOS.
    ///
    /// Entry `i` is `log P(token_i | tokens_<i)`; the BOS entry is 0, so the
    /// sum over entries is the sequence log-probability.
    fn score_sequence(&self, tokens: &[u32]) -> Result<Vec<f64>>;

    /// Batch scoring; results are defined prompt-by-prompt.
    fn score_sequences(&self, batch: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        batch.iter().map(|t| self.score_sequence(t)).collect()
    }

    /// Every head's final-token output and the unmodified next-token
    /// distribution for a prompt.
    fn capture_head_outputs(&self, prompt: &PromptInstance) -> Result<HeadCapture>;

    /// Next-token distribution under the given interventions.
    fn run_with_interventions(
        &self,
        prompt: &PromptInstance,
        plan: &InterventionPlan,
    ) -> Result<Vec<f64>>;

    /// Next-token distribution over raw token ids (used by samplers that
    /// build sequences token by token).
    fn next_token_distribution(&self, tokens: &[u32]) -> Result<Vec<f64>>;

    /// First token id of `target` in continuation position after the
    /// prompt's answer cue, leading-space merge included.
    fn first_token_of(&self, target: &str, context: &PromptInstance) -> Result<u32>;

    /// Hidden state after `layer` at the final token, for test oracles only.
    fn probe_hidden_state(
        &self,
        prompt: &PromptInstance,
        plan: &InterventionPlan,
        layer: usize,
    ) -> Result<Vec<f64>>;
}

/// Default intervention depth: `round(L / 3)` (9 for L=28, 11 for L=32).
pub fn default_intervention_layer(n_layers: usize) -> usize {
    ((n_layers as f64) / 3.0).round() as usize
}

// ---------------------------------------------------------------------------
// Miniature-model gateway
// ---------------------------------------------------------------------------

/// Gateway over the bundled miniature transformer.
///
/// All arithmetic is 64-bit and the model is immutable after load, so
/// `&self` calls are reentrant. Cloning shares the underlying weights.
#[derive(Clone)]
pub struct MiniGateway {
    model: Arc<MiniTransformer>,
    profile: ModelProfile,
    debug_probe: bool,
}

impl MiniGateway {
    pub fn new(model: MiniTransformer) -> Self {
        let profile = ModelProfile {
            model_id: model.config.model_id.clone(),
            n_layers: model.config.n_layers,
            n_heads_per_layer: model.config.n_heads,
            d_model: model.config.d_model,
            vocab_size: model.tokenizer.vocab_size(),
            added_vocabulary_ids: model.tokenizer.added_vocabulary_ids(),
        };
        Self {
            model: Arc::new(model),
            profile,
            debug_probe: false,
        }
    }

    /// Loads a checkpoint file produced by [`MiniTransformer::save`].
    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(Self::new(MiniTransformer::load(path)?))
    }

    pub fn with_debug_probe(mut self, enabled: bool) -> Self {
        self.debug_probe = enabled;
        self
    }

    pub fn model(&self) -> &MiniTransformer {
        &self.model
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            if (t as usize) >= self.profile.vocab_size {
                return Err(FvError::Vocabulary {
                    token: t,
                    vocab_size: self.profile.vocab_size,
                });
            }
        }
        if tokens.len() > self.model.config.max_seq_len {
            return Err(FvError::ContextOverflow {
                tokens: tokens.len(),
                max: self.model.config.max_seq_len,
            });
        }
        Ok(())
    }
}

pub(crate) fn softmax_row(logits: &Array1<f64>) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn log_softmax_row(logits: &Array1<f64>) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - max - log_sum).collect()
}

impl ModelGateway for MiniGateway {
    fn profile(&self) -> &ModelProfile {
        &self.profile
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.model.tokenizer.encode(text)
    }

    fn decode(&self, ids: &[u32]) -> String {
        self.model.tokenizer.decode(ids)
    }

    fn bos_id(&self) -> u32 {
        self.model.tokenizer.bos_id()
    }

    fn prompt_tokens(&self, prompt: &PromptInstance) -> Result<Vec<u32>> {
        let mut tokens = vec![self.model.tokenizer.bos_id()];
        tokens.extend(
            self.model
                .tokenizer
                .encode_continuation_prefix(&prompt.rendered_text),
        );
        self.check_tokens(&tokens)?;
        Ok(tokens)
    }

    fn score_sequence(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(FvError::Tokenization("empty token sequence".into()));
        }
        if tokens[0] != self.model.tokenizer.bos_id() {
            return Err(FvError::Tokenization(
                "sequence does not begin at a valid sequence start (BOS)".into(),
            ));
        }
        self.check_tokens(tokens)?;
        let pass = self.model.forward(tokens, None, false, None, false);
        let mut scores = vec![0.0f64];
        for i in 1..tokens.len() {
            let row = pass.logits.row(i - 1).to_owned();
            scores.push(log_softmax_row(&row)[tokens[i] as usize]);
        }
        Ok(scores)
    }

    fn capture_head_outputs(&self, prompt: &PromptInstance) -> Result<HeadCapture> {
        let tokens = self.prompt_tokens(prompt)?;
        let pass = self.model.forward(&tokens, None, true, None, false);
        let mut outputs = BTreeMap::new();
        let captured = pass
            .head_outputs
            .expect("capture requested but not returned");
        for (layer, per_head) in captured.into_iter().enumerate() {
            for (head, vector) in per_head.into_iter().enumerate() {
                let id = HeadId::new(layer, head);
                outputs.insert(
                    id,
                    HeadOutput {
                        head: id,
                        vector: vector.to_vec(),
                    },
                );
            }
        }
        let last = pass.logits.nrows() - 1;
        let probs = softmax_row(&pass.logits.row(last).to_owned());
        Ok(HeadCapture {
            outputs,
            next_token_probs: probs,
        })
    }

    fn run_with_interventions(
        &self,
        prompt: &PromptInstance,
        plan: &InterventionPlan,
    ) -> Result<Vec<f64>> {
        plan.validate(&self.profile)?;
        let tokens = self.prompt_tokens(prompt)?;
        let pass = self.model.forward(&tokens, Some(plan), false, None, false);
        let last = pass.logits.nrows() - 1;
        Ok(softmax_row(&pass.logits.row(last).to_owned()))
    }

    fn next_token_distribution(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(FvError::Tokenization("empty token sequence".into()));
        }
        self.check_tokens(tokens)?;
        let pass = self.model.forward(tokens, None, false, None, false);
        let last = pass.logits.nrows() - 1;
        Ok(softmax_row(&pass.logits.row(last).to_owned()))
    }

    fn first_token_of(&self, target: &str, context: &PromptInstance) -> Result<u32> {
        self.model
            .tokenizer
            .first_continuation_token(&context.rendered_text, target)
    }

    fn probe_hidden_state(
        &self,
        prompt: &PromptInstance,
        plan: &InterventionPlan,
        layer: usize,
    ) -> Result<Vec<f64>> {
        if !self.debug_probe {
            return Err(FvError::ProbeDisabled);
        }
        plan.validate(&self.profile)?;
        if layer >= self.profile.n_layers {
            return Err(FvError::Bounds(format!(
                "probe layer {layer} out of range ({} layers)",
                self.profile.n_layers
            )));
        }
        let tokens = self.prompt_tokens(prompt)?;
        let pass = self
            .model
            .forward(&tokens, Some(plan), false, Some(layer), false);
        Ok(pass
            .probe
            .expect("probe requested but not returned")
            .to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_rule_matches_reference_models() {
        assert_eq!(default_intervention_layer(28), 9);
        assert_eq!(default_intervention_layer(32), 11);
        assert_eq!(default_intervention_layer(2), 1);
        assert_eq!(default_intervention_layer(4), 1);
    }

    #[test]
    fn plan_validation_catches_bad_shapes() {
        let profile = ModelProfile {
            model_id: "m".into(),
            n_layers: 2,
            n_heads_per_layer: 4,
            d_model: 8,
            vocab_size: 10,
            added_vocabulary_ids: vec![0, 1],
        };
        let ok = InterventionPlan::empty().with_addition(1, vec![0.0; 8]);
        assert!(ok.validate(&profile).is_ok());

        let bad_layer = InterventionPlan::empty().with_addition(2, vec![0.0; 8]);
        assert!(bad_layer.validate(&profile).is_err());

        let bad_dim = InterventionPlan::empty().with_addition(0, vec![0.0; 7]);
        assert!(bad_dim.validate(&profile).is_err());

        let h = HeadId::new(1, 3);
        let dup = InterventionPlan::empty()
            .with_head_patch(h, vec![0.0; 8])
            .with_head_patch(h, vec![1.0; 8]);
        assert!(dup.validate(&profile).is_err());
    }
}

//! Uninformative baseline construction.
//!
//! Every informative instruction gets matched "uninformative" stand-ins —
//! same token length, similar model log-probability, no task content. Three
//! interchangeable methods produce them, each behind the [`BaselineSampler`]
//! trait and selected by name from config through [`BaselineRegistry`]:
//!
//! - `equiprobable`: sample a fresh token sequence whose per-step log-probs
//!   track the instruction's, widening an acceptance band until a candidate
//!   exists at each step;
//! - `real_text`: pick corpus prefixes of matching length from a prescored
//!   cache, nearest in total log-probability;
//! - `other_task`: same matching, but over instructions generated for other
//!   tasks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FvError, Result};
use crate::gateway::ModelGateway;
use crate::instructions::InstructionSet;

/// Initial half-width of the equiprobable acceptance band.
pub const DEFAULT_T0: f64 = 0.1;
/// Band increment per widening step.
pub const DEFAULT_DT: f64 = 0.1;
/// Candidate-pool floor for length matching.
pub const CANDIDATE_POOL_FLOOR: usize = 100;
/// Cache entries keep at most this many tokens.
pub const MAX_CACHE_TOKENS: usize = 64;
/// Default corpus cache size (2^16).
pub const DEFAULT_CACHE_TARGET: usize = 65536;
/// Baselines produced per (instruction, method).
pub const DEFAULT_BASELINES_PER_SPEC: usize = 5;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Equiprobable,
    RealText,
    OtherTask,
}

impl BaselineMethod {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineMethod::Equiprobable => "equiprobable",
            BaselineMethod::RealText => "real_text",
            BaselineMethod::OtherTask => "other_task",
        }
    }
}

/// One uninformative baseline matched to a source instruction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub method: BaselineMethod,
    /// Spec id of the instruction this baseline is matched to.
    pub source_spec_id: String,
    pub text: String,
    pub length_tokens: usize,
    pub log_probability: f64,
    /// Equiprobable only: widening steps `k` taken at each position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_token_k: Option<Vec<u32>>,
    /// Other-task only: spec id of the donor instruction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_id: Option<String>,
}

/// A prescored corpus prefix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub tokens: Vec<u32>,
    pub length: usize,
    pub log_prob: f64,
}

/// Prescored corpus prefixes for one model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusCache {
    pub model_id: String,
    pub source: String,
    pub corpus_hash: String,
    pub entries: Vec<CacheEntry>,
}

impl CorpusCache {
    /// Stream format: a header line, then one entry per line.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header = serde_json::json!({
            "model_id": self.model_id,
            "source": self.source,
            "corpus_hash": self.corpus_hash,
            "entry_count": self.entries.len(),
        });
        writeln!(w, "{header}")?;
        for e in &self.entries {
            writeln!(w, "{}", serde_json::to_string(e)?)?;
        }
        Ok(())
    }

    /// Loads a cache, refusing one built for a different model.
    pub fn load(path: &std::path::Path, expected_model_id: &str) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let mut lines = raw.lines();
        let header: serde_json::Value = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| FvError::Store("empty cache file".into()))?,
        )?;
        let model_id = header["model_id"]
            .as_str()
            .ok_or_else(|| FvError::Store("cache header missing model_id".into()))?
            .to_string();
        if model_id != expected_model_id {
            return Err(FvError::Store(format!(
                "cache was built for model {model_id}, not {expected_model_id}"
            )));
        }
        let entries = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<CacheEntry>, _>>()?;
        Ok(Self {
            model_id,
            source: header["source"].as_str().unwrap_or_default().to_string(),
            corpus_hash: header["corpus_hash"]
                .as_str()
                .unwrap_or_default()
                .to_string(),
            entries,
        })
    }
}

/// Everything a sampler may need; each method uses the slice it cares about.
pub struct SamplerContext<'a> {
    pub gateway: &'a dyn ModelGateway,
    pub source_task_id: &'a str,
    pub source_spec_id: &'a str,
    pub cache: Option<&'a CorpusCache>,
    pub instruction_pool: Option<&'a [InstructionSet]>,
    pub count: usize,
    pub seed: u64,
    pub t0: f64,
    pub dt: f64,
}

// ---------------------------------------------------------------------------
// Strategy trait and registry
// ---------------------------------------------------------------------------

/// One baseline-construction method.
pub trait BaselineSampler: Send + Sync {
    fn method(&self) -> BaselineMethod;

    fn name(&self) -> &'static str {
        self.method().name()
    }

    /// Produces `ctx.count` baselines for `instruction_text`.
    fn sample(&self, instruction_text: &str, ctx: &SamplerContext<'_>)
        -> Result<Vec<BaselineSpec>>;
}

/// Name-indexed sampler registry; config selects methods by name.
pub struct BaselineRegistry {
    samplers: BTreeMap<&'static str, Box<dyn BaselineSampler>>,
}

impl BaselineRegistry {
    pub fn empty() -> Self {
        Self {
            samplers: BTreeMap::new(),
        }
    }

    /// All three built-in methods.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(EquiprobableSampler));
        r.register(Box::new(RealTextSampler));
        r.register(Box::new(OtherTaskSampler));
        r
    }

    pub fn register(&mut self, sampler: Box<dyn BaselineSampler>) {
        self.samplers.insert(sampler.name(), sampler);
    }

    pub fn get(&self, name: &str) -> Result<&dyn BaselineSampler> {
        self.samplers.get(name).map(|b| b.as_ref()).ok_or_else(|| {
            FvError::Config(format!(
                "unknown baseline method {name:?}; available: {:?}",
                self.names()
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.samplers.keys().copied().collect()
    }
}

impl Default for BaselineRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// Folds a root seed and a list of labels into a derived stream seed.
pub fn derive_seed(root: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    for p in parts {
        hasher.update([0u8]);
        hasher.update(p.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Scores an instruction: token ids (no BOS) and total log-probability, each
/// token scored from sequence start.
pub fn score_instruction(gateway: &dyn ModelGateway, text: &str) -> Result<(Vec<u32>, f64)> {
    let ids = gateway.encode(text);
    if ids.is_empty() {
        return Err(FvError::Tokenization(format!(
            "instruction {text:?} tokenizes to nothing"
        )));
    }
    let mut with_bos = vec![gateway.bos_id()];
    with_bos.extend(&ids);
    let scores = gateway.score_sequence(&with_bos)?;
    Ok((ids, scores.iter().sum()))
}

/// Widens `|len - target_len| <= k` until at least `floor` candidates exist.
/// Returns the minimal `k` and candidate indices (in input order).
fn widen_by_length(
    lengths: &[usize],
    target_len: usize,
    floor: usize,
) -> Result<(usize, Vec<usize>)> {
    if lengths.len() < floor {
        return Err(FvError::InsufficientCache {
            have: lengths.len(),
            need: floor,
        });
    }
    let mut k = 0usize;
    loop {
        let candidates: Vec<usize> = lengths
            .iter()
            .enumerate()
            .filter(|(_, &len)| len.abs_diff(target_len) <= k)
            .map(|(i, _)| i)
            .collect();
        if candidates.len() >= floor {
            return Ok((k, candidates));
        }
        k += 1;
    }
}

/// Takes `count` pool indices nearest in log-probability to `target_lp`,
/// without replacement; ties break on pool index.
fn nearest_log_prob(
    candidates: &[usize],
    log_probs: &[f64],
    target_lp: f64,
    count: usize,
) -> Vec<usize> {
    let mut ranked: Vec<usize> = candidates.to_vec();
    ranked.sort_by(|&a, &b| {
        let da = (log_probs[a] - target_lp).abs();
        let db = (log_probs[b] - target_lp).abs();
        da.partial_cmp(&db)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ranked.truncate(count);
    ranked
}

// ---------------------------------------------------------------------------
// Equiprobable token sequences
// ---------------------------------------------------------------------------

pub struct EquiprobableSampler;

impl EquiprobableSampler {
    /// Builds one sequence matched to `source_ids` token for token.
    ///
    /// At each position the sampled token's log-prob must lie within
    /// `t0 + k*dt` of the source token's, for the minimal `k >= 0` admitting
    /// at least one candidate; added-vocabulary tokens are masked and the
    /// choice is uniform among admissible candidates.
    fn sample_one(
        gateway: &dyn ModelGateway,
        source_ids: &[u32],
        source_scores: &[f64],
        t0: f64,
        dt: f64,
        seed: u64,
    ) -> Result<(Vec<u32>, Vec<u32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let added = &gateway.profile().added_vocabulary_ids;
        let mut prefix = vec![gateway.bos_id()];
        let mut ks = Vec::with_capacity(source_ids.len());
        for l in 0..source_ids.len() {
            let source_lp = source_scores[l + 1];
            let probs = gateway.next_token_distribution(&prefix)?;
            let log_probs: Vec<f64> = probs.iter().map(|&p| p.ln()).collect();
            let mut k = 0u32;
            let candidates = loop {
                let band = t0 + f64::from(k) * dt;
                let within: Vec<u32> = log_probs
                    .iter()
                    .enumerate()
                    .filter(|(id, &lp)| {
                        !added.contains(&(*id as u32))
                            && lp.is_finite()
                            && (lp - source_lp).abs() <= band
                    })
                    .map(|(id, _)| id as u32)
                    .collect();
                if !within.is_empty() {
                    break within;
                }
                k += 1;
            };
            let choice = candidates[rng.gen_range(0..candidates.len())];
            ks.push(k);
            prefix.push(choice);
        }
        Ok((prefix[1..].to_vec(), ks))
    }
}

impl BaselineSampler for EquiprobableSampler {
    fn method(&self) -> BaselineMethod {
        BaselineMethod::Equiprobable
    }

    fn sample(
        &self,
        instruction_text: &str,
        ctx: &SamplerContext<'_>,
    ) -> Result<Vec<BaselineSpec>> {
        let gateway = ctx.gateway;
        let (source_ids, _) = score_instruction(gateway, instruction_text)?;
        let mut with_bos = vec![gateway.bos_id()];
        with_bos.extend(&source_ids);
        let source_scores = gateway.score_sequence(&with_bos)?;

        let mut out = Vec::with_capacity(ctx.count);
        let mut attempt = 0usize;
        while out.len() < ctx.count {
            let seed = derive_seed(
                ctx.seed,
                &["equiprobable", ctx.source_spec_id, &attempt.to_string()],
            );
            attempt += 1;
            let (ids, ks) =
                Self::sample_one(gateway, &source_ids, &source_scores, ctx.t0, ctx.dt, seed)?;
            let text = gateway.decode(&ids);
            if text == instruction_text {
                // matched the source verbatim; resample under the next seed
                continue;
            }
            let mut scored = vec![gateway.bos_id()];
            scored.extend(&ids);
            let log_probability = gateway.score_sequence(&scored)?.iter().sum();
            out.push(BaselineSpec {
                method: BaselineMethod::Equiprobable,
                source_spec_id: ctx.source_spec_id.to_string(),
                text,
                length_tokens: ids.len(),
                log_probability,
                per_token_k: Some(ks),
                origin_id: None,
            });
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Corpus cache build + real-text sampler
// ---------------------------------------------------------------------------

/// Extracts the whitespace-terminated prefixes of one corpus entry,
/// terminal whitespace excluded.
pub fn whitespace_prefixes(entry: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (i, ch) in entry.char_indices() {
        if ch.is_whitespace() {
            let prefix = &entry[..i];
            if !prefix.is_empty() && !prefix.ends_with(char::is_whitespace) {
                out.push(prefix.to_string());
            }
        }
    }
    out
}

/// Scores whitespace-terminated corpus prefixes until the entry that crosses
/// `target`; overshoot from that entry is kept, not discarded.
pub fn build_corpus_cache<I>(
    gateway: &dyn ModelGateway,
    corpus: I,
    source: &str,
    target: usize,
) -> Result<CorpusCache>
where
    I: IntoIterator<Item = String>,
{
    let bos = gateway.bos_id();
    let mut entries = Vec::new();
    let mut hasher = Sha256::new();
    let mut saw_entry = false;
    for doc in corpus {
        saw_entry = true;
        hasher.update(doc.as_bytes());
        hasher.update([b'\n']);
        for prefix in whitespace_prefixes(&doc) {
            let ids = gateway.encode(&prefix);
            if ids.is_empty() || ids.len() > MAX_CACHE_TOKENS {
                continue;
            }
            let mut scored = vec![bos];
            scored.extend(&ids);
            let log_prob: f64 = gateway.score_sequence(&scored)?.iter().sum();
            entries.push(CacheEntry {
                length: ids.len(),
                tokens: ids,
                log_prob,
            });
        }
        if entries.len() >= target {
            break;
        }
    }
    if !saw_entry {
        return Err(FvError::InsufficientData("empty corpus stream".into()));
    }
    if entries.len() < target {
        log::warn!(
            "corpus cache reached only {} of {target} target entries",
            entries.len()
        );
    }
    Ok(CorpusCache {
        model_id: gateway.profile().model_id.clone(),
        source: source.to_string(),
        corpus_hash: format!("{:x}", hasher.finalize()),
        entries,
    })
}

pub struct RealTextSampler;

impl BaselineSampler for RealTextSampler {
    fn method(&self) -> BaselineMethod {
        BaselineMethod::RealText
    }

    fn sample(
        &self,
        instruction_text: &str,
        ctx: &SamplerContext<'_>,
    ) -> Result<Vec<BaselineSpec>> {
        let cache = ctx
            .cache
            .ok_or_else(|| FvError::Config("real_text sampler needs a corpus cache".into()))?;
        if cache.model_id != ctx.gateway.profile().model_id {
            return Err(FvError::Store(format!(
                "cache was built for model {}, not {}",
                cache.model_id,
                ctx.gateway.profile().model_id
            )));
        }
        let (ids, target_lp) = score_instruction(ctx.gateway, instruction_text)?;
        let lengths: Vec<usize> = cache.entries.iter().map(|e| e.length).collect();
        let log_probs: Vec<f64> = cache.entries.iter().map(|e| e.log_prob).collect();
        let (_, candidates) = widen_by_length(&lengths, ids.len(), CANDIDATE_POOL_FLOOR)?;
        let usable: Vec<usize> = candidates
            .into_iter()
            .filter(|&i| ctx.gateway.decode(&cache.entries[i].tokens) != instruction_text)
            .collect();
        let picks = nearest_log_prob(&usable, &log_probs, target_lp, ctx.count);
        Ok(picks
            .into_iter()
            .map(|i| {
                let e = &cache.entries[i];
                BaselineSpec {
                    method: BaselineMethod::RealText,
                    source_spec_id: ctx.source_spec_id.to_string(),
                    text: ctx.gateway.decode(&e.tokens),
                    length_tokens: e.length,
                    log_probability: e.log_prob,
                    per_token_k: None,
                    origin_id: None,
                }
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Other-task instructions
// ---------------------------------------------------------------------------

pub struct OtherTaskSampler;

impl BaselineSampler for OtherTaskSampler {
    fn method(&self) -> BaselineMethod {
        BaselineMethod::OtherTask
    }

    fn sample(
        &self,
        instruction_text: &str,
        ctx: &SamplerContext<'_>,
    ) -> Result<Vec<BaselineSpec>> {
        let sets = ctx.instruction_pool.ok_or_else(|| {
            FvError::Config("other_task sampler needs the instruction sets".into())
        })?;
        // Pool: every instruction generated for a different task.
        let mut pool: Vec<(String, String)> = Vec::new();
        for set in sets {
            if set.task_id == ctx.source_task_id {
                continue;
            }
            for (spec_id, text) in &set.instructions {
                pool.push((spec_id.clone(), text.clone()));
            }
        }
        if pool.len() < CANDIDATE_POOL_FLOOR {
            return Err(FvError::InsufficientPool {
                have: pool.len(),
                need: CANDIDATE_POOL_FLOOR,
            });
        }
        let (ids, target_lp) = score_instruction(ctx.gateway, instruction_text)?;
        let mut lengths = Vec::with_capacity(pool.len());
        let mut log_probs = Vec::with_capacity(pool.len());
        for (_, text) in &pool {
            let (p_ids, lp) = score_instruction(ctx.gateway, text)?;
            lengths.push(p_ids.len());
            log_probs.push(lp);
        }
        let (_, candidates) =
            widen_by_length(&lengths, ids.len(), CANDIDATE_POOL_FLOOR).map_err(|e| match e {
                FvError::InsufficientCache { have, need } => {
                    FvError::InsufficientPool { have, need }
                }
                other => other,
            })?;
        let usable: Vec<usize> = candidates
            .into_iter()
            .filter(|&i| pool[i].1 != instruction_text)
            .collect();
        let picks = nearest_log_prob(&usable, &log_probs, target_lp, ctx.count);
        Ok(picks
            .into_iter()
            .map(|i| BaselineSpec {
                method: BaselineMethod::OtherTask,
                source_spec_id: ctx.source_spec_id.to_string(),
                text: pool[i].1.clone(),
                length_tokens: lengths[i],
                log_probability: log_probs[i],
                per_token_k: None,
                origin_id: Some(pool[i].0.clone()),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_prefixes_match_the_documented_example() {
        assert_eq!(
            whitespace_prefixes("Alpha beta gamma."),
            vec!["Alpha".to_string(), "Alpha beta".to_string()]
        );
        // terminal whitespace is excluded
        assert_eq!(
            whitespace_prefixes("Alpha beta "),
            vec!["Alpha".to_string(), "Alpha beta".to_string()]
        );
        assert!(whitespace_prefixes("word").is_empty());
    }

    #[test]
    fn widening_uses_the_minimal_k() {
        // 40 exact-length entries, 70 at distance 1 -> k=1, pool of 110
        let mut lengths = vec![10usize; 40];
        lengths.extend(vec![9usize; 35]);
        lengths.extend(vec![11usize; 35]);
        let (k, candidates) = widen_by_length(&lengths, 10, 100).unwrap();
        assert_eq!(k, 1);
        assert_eq!(candidates.len(), 110);
    }

    #[test]
    fn widening_stops_at_zero_with_enough_exact_matches() {
        let lengths = vec![7usize; 150];
        let (k, candidates) = widen_by_length(&lengths, 7, 100).unwrap();
        assert_eq!(k, 0);
        assert_eq!(candidates.len(), 150);
    }

    #[test]
    fn tiny_pool_is_an_error() {
        let lengths = vec![7usize; 99];
        assert!(matches!(
            widen_by_length(&lengths, 7, 100),
            Err(FvError::InsufficientCache { have: 99, need: 100 })
        ));
    }

    #[test]
    fn nearest_log_prob_is_without_replacement_and_ordered() {
        let log_probs = vec![-1.0, -5.0, -2.0, -2.5, -10.0];
        let candidates: Vec<usize> = (0..5).collect();
        let picks = nearest_log_prob(&candidates, &log_probs, -2.2, 3);
        assert_eq!(picks, vec![2, 3, 0]);
        let unique: std::collections::BTreeSet<_> = picks.iter().collect();
        assert_eq!(unique.len(), picks.len());
    }

    #[test]
    fn registry_knows_all_three_methods() {
        let registry = BaselineRegistry::builtin();
        assert_eq!(
            registry.names(),
            vec!["equiprobable", "other_task", "real_text"]
        );
        assert!(registry.get("real_text").is_ok());
        assert!(registry.get("nope").is_err());
    }

    #[test]
    fn derive_seed_is_stable_and_sensitive() {
        let a = derive_seed(1, &["x", "y"]);
        let b = derive_seed(1, &["x", "y"]);
        let c = derive_seed(1, &["xy"]);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}

//! Candidate instruction generation and top-J selection.
//!
//! Instructions come from an external text-generation endpoint: each round
//! sends a K-shot demonstration of the task and asks for ten candidate
//! instructions, repeated (by default) twenty times per task and length
//! regime. Every interaction can be recorded to a fixture file and replayed,
//! so the pipeline runs offline. Selection keeps the J instructions with the
//! highest zero-shot first-token accuracy on the train split.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    render_instruction_prompt, sample_context_indices, PromptForm, SplitSpec, TaskDataset,
};
use crate::error::{FvError, Result};
use crate::gateway::{InterventionPlan, ModelGateway};

/// Short-regime instructions keep at most this many tokens under the subject
/// model's tokenizer.
pub const SHORT_REGIME_TOKEN_LIMIT: usize = 16;
/// Generation rounds per (task, regime).
pub const DEFAULT_ROUNDS: usize = 20;
/// Instructions requested per round.
pub const GENERATIONS_PER_ROUND: usize = 10;
/// Instructions retained per task after selection.
pub const DEFAULT_TOP_J: usize = 5;
/// An instruction qualifies only with at least this many successful train
/// prompts.
pub const DEFAULT_MIN_SUCCESSES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthRegime {
    Short,
    Long,
}

impl LengthRegime {
    pub fn name(&self) -> &'static str {
        match self {
            LengthRegime::Short => "short",
            LengthRegime::Long => "long",
        }
    }
}

impl std::str::FromStr for LengthRegime {
    type Err = FvError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(LengthRegime::Short),
            "long" => Ok(LengthRegime::Long),
            other => Err(FvError::Config(format!("unknown length regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationMetadata {
    pub generator_model_id: String,
    pub rounds: usize,
    /// Generations dropped as unparseable or over the regime limit.
    pub filtered: usize,
}

/// Deduplicated candidate instructions for one (task, regime).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstructionSet {
    pub task_id: String,
    pub regime: LengthRegime,
    /// `(spec_id, text)` in first-seen order.
    pub instructions: Vec<(String, String)>,
    pub generation_metadata: GenerationMetadata,
}

impl InstructionSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Entry<'a> {
            id: &'a str,
            text: &'a str,
        }
        #[derive(Serialize)]
        struct File<'a> {
            task_id: &'a str,
            regime: LengthRegime,
            instructions: Vec<Entry<'a>>,
            generation_metadata: &'a GenerationMetadata,
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = File {
            task_id: &self.task_id,
            regime: self.regime,
            instructions: self
                .instructions
                .iter()
                .map(|(id, text)| Entry { id, text })
                .collect(),
            generation_metadata: &self.generation_metadata,
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            id: String,
            text: String,
        }
        #[derive(Deserialize)]
        struct File {
            task_id: String,
            regime: LengthRegime,
            instructions: Vec<Entry>,
            #[serde(default)]
            generation_metadata: Option<GenerationMetadata>,
        }
        let raw = std::fs::read_to_string(path)?;
        let file: File = serde_json::from_str(&raw)
            .map_err(|e| FvError::Store(format!("bad instruction file {}: {e}", path.display())))?;
        Ok(Self {
            task_id: file.task_id,
            regime: file.regime,
            instructions: file
                .instructions
                .into_iter()
                .map(|e| (e.id, e.text))
                .collect(),
            generation_metadata: file.generation_metadata.unwrap_or(GenerationMetadata {
                generator_model_id: "unknown".into(),
                rounds: 0,
                filtered: 0,
            }),
        })
    }

    pub fn text_of(&self, spec_id: &str) -> Option<&str> {
        self.instructions
            .iter()
            .find(|(id, _)| id == spec_id)
            .map(|(_, text)| text.as_str())
    }
}

/// The J best instructions for a task, ranked by train accuracy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopInstructions {
    pub task_id: String,
    pub regime: LengthRegime,
    /// `(spec_id, train_accuracy)` sorted descending; accuracy ties break on
    /// spec_id lexicographic order.
    pub ranked: Vec<(String, f64)>,
    pub j: usize,
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

/// One generation round's request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub meta_prompt: String,
    pub round: usize,
    pub n: usize,
}

/// An external text-generation endpoint (or a stand-in for one).
pub trait InstructionGenerator {
    fn model_id(&self) -> &str;
    fn generate(&mut self, request: &GenerationRequest) -> Result<Vec<String>>;
}

/// Recorded generator interactions for offline replay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorFixture {
    pub generator_model_id: String,
    pub task_id: String,
    pub regime: LengthRegime,
    /// One list of generations per round.
    pub rounds: Vec<Vec<String>>,
}

impl GeneratorFixture {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw)
            .map_err(|e| FvError::Store(format!("bad fixture {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Replays a recorded fixture, round by round.
pub struct FixtureGenerator {
    fixture: GeneratorFixture,
}

impl FixtureGenerator {
    pub fn new(fixture: GeneratorFixture) -> Self {
        Self { fixture }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(Self::new(GeneratorFixture::load(path)?))
    }
}

impl InstructionGenerator for FixtureGenerator {
    fn model_id(&self) -> &str {
        &self.fixture.generator_model_id
    }

    fn generate(&mut self, request: &GenerationRequest) -> Result<Vec<String>> {
        self.fixture
            .rounds
            .get(request.round)
            .cloned()
            .ok_or_else(|| {
                FvError::Transport {
                    attempts: 1,
                    detail: format!(
                        "fixture for {} holds {} rounds, round {} requested",
                        self.fixture.task_id,
                        self.fixture.rounds.len(),
                        request.round
                    ),
                }
            })
    }
}

/// Talks to a JSON-over-HTTP generation endpoint.
///
/// Request body: `{"prompt": ..., "n": ..., "round": ...}`; expected reply:
/// `{"generations": ["...", ...]}`. Credentials ride in a bearer header.
pub struct HttpGenerator {
    endpoint: String,
    model_id: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    retries: usize,
}

impl HttpGenerator {
    pub fn new(endpoint: String, model_id: String, api_key: Option<String>) -> Self {
        Self {
            endpoint,
            model_id,
            api_key,
            client: reqwest::blocking::Client::new(),
            retries: 3,
        }
    }
}

impl InstructionGenerator for HttpGenerator {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn generate(&mut self, request: &GenerationRequest) -> Result<Vec<String>> {
        #[derive(Deserialize)]
        struct Reply {
            generations: Vec<String>,
        }
        let body = serde_json::json!({
            "prompt": request.meta_prompt,
            "n": request.n,
            "round": request.round,
            "model": self.model_id,
        });
        let mut last_err = String::new();
        for attempt in 1..=self.retries {
            let mut req = self.client.post(&self.endpoint).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send().and_then(|r| r.error_for_status()) {
                Ok(resp) => match resp.json::<Reply>() {
                    Ok(reply) => return Ok(reply.generations),
                    Err(e) => last_err = format!("unparseable reply: {e}"),
                },
                Err(e) => last_err = e.to_string(),
            }
            std::thread::sleep(std::time::Duration::from_millis(100 * attempt as u64));
        }
        Err(FvError::Transport {
            attempts: self.retries,
            detail: format!("{}: {last_err}", self.endpoint),
        })
    }
}

/// Wraps a generator and records every round for later replay.
pub struct RecordingGenerator<G: InstructionGenerator> {
    inner: G,
    fixture: GeneratorFixture,
}

impl<G: InstructionGenerator> RecordingGenerator<G> {
    pub fn new(inner: G, task_id: &str, regime: LengthRegime) -> Self {
        let generator_model_id = inner.model_id().to_string();
        Self {
            inner,
            fixture: GeneratorFixture {
                generator_model_id,
                task_id: task_id.to_string(),
                regime,
                rounds: Vec::new(),
            },
        }
    }

    pub fn into_fixture(self) -> GeneratorFixture {
        self.fixture
    }
}

impl<G: InstructionGenerator> InstructionGenerator for RecordingGenerator<G> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn generate(&mut self, request: &GenerationRequest) -> Result<Vec<String>> {
        let generations = self.inner.generate(request)?;
        self.fixture.rounds.push(generations.clone());
        Ok(generations)
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Builds the meta-prompt for one generation round: a K-shot demonstration
/// block of the task followed by the request for `n` instructions.
pub fn build_meta_prompt(
    task: &TaskDataset,
    regime: LengthRegime,
    shots: usize,
    round: usize,
    seed: u64,
    n: usize,
) -> Result<String> {
    if task.len() < shots + 1 {
        return Err(FvError::InsufficientData(format!(
            "task {} has {} pairs; the seeding demo prompt needs {shots}+1",
            task.task_id,
            task.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(crate::baselines::derive_seed(
        seed,
        &["meta-prompt", &task.task_id, regime.name(), &round.to_string()],
    ));
    let pool: Vec<usize> = (0..task.len()).collect();
    let query = pool[round % pool.len()];
    let ctx = sample_context_indices(task, &pool, query, shots, &mut rng)?;
    let mut blocks: Vec<String> = ctx
        .iter()
        .map(|&i| format!("Q: {}\nA: {}", task.pairs[i].0, task.pairs[i].1))
        .collect();
    blocks.push(format!("Q: {}\nA: {}", task.pairs[query].0, task.pairs[query].1));
    let demo = blocks.join("\n\n");
    let length_clause = match regime {
        LengthRegime::Short => " Keep each instruction short, under sixteen tokens.",
        LengthRegime::Long => "",
    };
    Ok(format!(
        "Here are example question-answer pairs all performing one task:\n\n{demo}\n\n\
         Write {n} different one-line instructions that would tell someone to perform \
         this task on a new question, without mentioning these examples.{length_clause} \
         Reply with one instruction per line."
    ))
}

/// Runs `rounds` generation rounds, deduplicates exact repeats, and filters
/// short-regime instructions over the token limit.
pub fn generate_instructions(
    task: &TaskDataset,
    generator: &mut dyn InstructionGenerator,
    gateway: &dyn ModelGateway,
    regime: LengthRegime,
    rounds: usize,
    shots: usize,
    seed: u64,
) -> Result<InstructionSet> {
    let mut texts: Vec<String> = Vec::new();
    let mut filtered = 0usize;
    for round in 0..rounds {
        let meta_prompt = build_meta_prompt(task, regime, shots, round, seed, GENERATIONS_PER_ROUND)?;
        let request = GenerationRequest {
            meta_prompt,
            round,
            n: GENERATIONS_PER_ROUND,
        };
        for raw in generator.generate(&request)? {
            let text = raw.trim();
            if text.is_empty() {
                filtered += 1;
                continue;
            }
            if regime == LengthRegime::Short
                && gateway.encode(text).len() > SHORT_REGIME_TOKEN_LIMIT
            {
                filtered += 1;
                continue;
            }
            if !texts.iter().any(|t| t == text) {
                texts.push(text.to_string());
            }
        }
    }
    if filtered > 0 {
        log::warn!(
            "task {} ({}): filtered {filtered} generations",
            task.task_id,
            regime.name()
        );
    }
    let instructions = texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| {
            (
                format!("{}-{}-{:03}", task.task_id, regime.name(), i),
                text,
            )
        })
        .collect();
    Ok(InstructionSet {
        task_id: task.task_id.clone(),
        regime,
        instructions,
        generation_metadata: GenerationMetadata {
            generator_model_id: generator.model_id().to_string(),
            rounds,
            filtered,
        },
    })
}

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

/// Success counts per instruction over the train split.
pub fn instruction_success_counts(
    task: &TaskDataset,
    set: &InstructionSet,
    split: &SplitSpec,
    gateway: &dyn ModelGateway,
) -> Result<Vec<(String, usize)>> {
    use rayon::prelude::*;
    let empty = InterventionPlan::empty();
    set.instructions
        .par_iter()
        .map(|(spec_id, text)| {
            let mut successes = 0usize;
            for &qi in &split.indices_train {
                let (x, y) = &task.pairs[qi];
                let prompt = render_instruction_prompt(
                    text,
                    x,
                    y,
                    PromptForm::Instruction,
                    Some(spec_id.clone()),
                )?;
                let probs = gateway.run_with_interventions(&prompt, &empty)?;
                let target = gateway.first_token_of(y, &prompt)?;
                if argmax(&probs) == target as usize {
                    successes += 1;
                }
            }
            Ok((spec_id.clone(), successes))
        })
        .collect()
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Scores every instruction on the train split and keeps the top `j`.
///
/// The task is skipped when fewer than `j` instructions reach
/// `min_successes` successful prompts.
pub fn select_top_instructions(
    task: &TaskDataset,
    set: &InstructionSet,
    split: &SplitSpec,
    gateway: &dyn ModelGateway,
    j: usize,
    min_successes: usize,
) -> Result<TopInstructions> {
    let counts = instruction_success_counts(task, set, split, gateway)?;
    let n_train = split.indices_train.len().max(1);
    let eligible = counts
        .iter()
        .filter(|(_, successes)| *successes >= min_successes)
        .count();
    if eligible < j {
        return Err(FvError::TaskSkipped {
            task_id: task.task_id.clone(),
            eligible,
            required: j,
            success_counts: counts,
        });
    }
    let mut ranked: Vec<(String, f64)> = counts
        .into_iter()
        .filter(|(_, successes)| *successes >= min_successes)
        .map(|(spec_id, successes)| (spec_id, successes as f64 / n_train as f64))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    ranked.truncate(j);
    Ok(TopInstructions {
        task_id: task.task_id.clone(),
        regime: set.regime,
        ranked,
        j,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ListGenerator(Vec<Vec<String>>);

    impl InstructionGenerator for ListGenerator {
        fn model_id(&self) -> &str {
            "list-generator"
        }
        fn generate(&mut self, request: &GenerationRequest) -> Result<Vec<String>> {
            Ok(self.0[request.round].clone())
        }
    }

    fn toy_task() -> TaskDataset {
        let pairs = (0..12)
            .map(|i| (format!("in{i}"), format!("out{i}")))
            .collect();
        TaskDataset::from_parts("toy".into(), pairs, None, "test").unwrap()
    }

    fn toy_gateway() -> crate::gateway::MiniGateway {
        crate::gateway::MiniGateway::new(crate::model::oracle_model(1))
    }

    #[test]
    fn fixed_list_generator_round_trips_deduped() {
        let task = toy_task();
        let gateway = toy_gateway();
        let mut generator = ListGenerator(vec![vec![
            "map stone to river".into(),
            "map stone to river".into(),
            "  map cloud to ember  ".into(),
            "".into(),
        ]]);
        let set = generate_instructions(
            &task,
            &mut generator,
            &gateway,
            LengthRegime::Long,
            1,
            4,
            0,
        )
        .unwrap();
        let texts: Vec<&str> = set.instructions.iter().map(|(_, t)| t.as_str()).collect();
        assert_eq!(texts, vec!["map stone to river", "map cloud to ember"]);
        assert_eq!(set.instructions[0].0, "toy-long-000");
        assert_eq!(set.generation_metadata.filtered, 1);
    }

    #[test]
    fn short_regime_filters_long_instructions() {
        let task = toy_task();
        let gateway = toy_gateway();
        let long_text = vec!["stone river cloud ember frost grove stone river cloud ember frost grove stone river cloud ember frost grove".to_string(),
                             "stone river".to_string()];
        let mut generator = ListGenerator(vec![long_text]);
        let set = generate_instructions(
            &task,
            &mut generator,
            &gateway,
            LengthRegime::Short,
            1,
            4,
            0,
        )
        .unwrap();
        assert_eq!(set.instructions.len(), 1);
        assert_eq!(set.instructions[0].1, "stone river");
        for (_, text) in &set.instructions {
            assert!(gateway.encode(text).len() <= SHORT_REGIME_TOKEN_LIMIT);
        }
        assert_eq!(set.generation_metadata.filtered, 1);
    }

    #[test]
    fn dedup_rate_matches_round_arithmetic() {
        // 20 rounds x 10 generations with 40% duplication -> 120 unique
        let mut rounds = Vec::new();
        let mut unique_counter = 0usize;
        for round in 0..20 {
            let mut generations = Vec::new();
            for g in 0..10 {
                if (round * 10 + g) % 5 < 2 {
                    generations.push("repeat stone river".to_string());
                } else {
                    generations.push(format!("unique instruction number {unique_counter}"));
                    unique_counter += 1;
                }
            }
            rounds.push(generations);
        }
        let task = toy_task();
        let gateway = toy_gateway();
        let mut generator = ListGenerator(rounds);
        let set = generate_instructions(
            &task,
            &mut generator,
            &gateway,
            LengthRegime::Long,
            20,
            4,
            0,
        )
        .unwrap();
        // 120 unique synthetics + 1 shared repeat
        assert_eq!(set.instructions.len(), 121);
    }

    #[test]
    fn fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fix.json");
        let fixture = GeneratorFixture {
            generator_model_id: "recorded".into(),
            task_id: "toy".into(),
            regime: LengthRegime::Short,
            rounds: vec![vec!["a".into()], vec!["b".into()]],
        };
        fixture.save(&path).unwrap();
        let mut gen = FixtureGenerator::from_file(&path).unwrap();
        let req = GenerationRequest {
            meta_prompt: String::new(),
            round: 1,
            n: 10,
        };
        assert_eq!(gen.generate(&req).unwrap(), vec!["b".to_string()]);
        let req_missing = GenerationRequest {
            meta_prompt: String::new(),
            round: 2,
            n: 10,
        };
        assert!(matches!(
            gen.generate(&req_missing),
            Err(FvError::Transport { .. })
        ));
    }

    #[test]
    fn meta_prompt_embeds_a_full_demo_block() {
        let task = toy_task();
        let p = build_meta_prompt(&task, LengthRegime::Short, 3, 0, 7, 10).unwrap();
        assert!(p.contains("Q: "));
        assert!(p.contains("\nA: "));
        assert!(p.contains("sixteen tokens"));
        let long = build_meta_prompt(&task, LengthRegime::Long, 3, 0, 7, 10).unwrap();
        assert!(!long.contains("sixteen tokens"));
    }

    #[test]
    fn unreachable_endpoint_is_a_transport_error() {
        let mut gen = HttpGenerator::new(
            "http://127.0.0.1:9/generate".into(),
            "remote".into(),
            None,
        );
        let req = GenerationRequest {
            meta_prompt: "x".into(),
            round: 0,
            n: 1,
        };
        match gen.generate(&req) {
            Err(FvError::Transport { detail, .. }) => {
                assert!(detail.contains("127.0.0.1:9"), "detail names endpoint: {detail}");
            }
            other => panic!("expected transport error, got {other:?}"),
        }
    }
}

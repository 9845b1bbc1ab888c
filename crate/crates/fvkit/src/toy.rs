//! Synthetic task bundle and miniature-model training.
//!
//! Three key-value tasks share one input vocabulary and one output
//! vocabulary but map through three different permutations, so task identity
//! is recoverable only from the prompt (consistent demonstration pairs, or
//! an instruction carrying the task keyword). A small transformer is trained
//! from scratch on demonstrations ("base" checkpoint), then continued with
//! instruction prompts mixed in ("tuned" checkpoint), giving the pipeline a
//! base/post-trained pair with committed seeds.

use std::path::{Path, PathBuf};

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::derive_seed;
use crate::corpus::{
    render_demo_prompt, render_instruction_prompt, render_zero_shot_prompt, sample_context_indices,
    PromptForm, TaskDataset,
};
use crate::error::Result;
use crate::instructions::{GeneratorFixture, LengthRegime};
use crate::model::train::{batch_loss_and_grad, Adam, TrainExample};
use crate::model::{MiniConfig, MiniTransformer};
use crate::tokenizer::Tokenizer;

/// Inputs (and outputs) per toy task.
pub const TOY_TASK_SIZE: usize = 36;
/// Task keywords; one per toy task, embedded in every instruction.
pub const TOY_KEYWORDS: [&str; 3] = ["amber", "basil", "cedar"];

const INPUT_ONSETS: [&str; 12] = [
    "bl", "cr", "dr", "fl", "gr", "pl", "sk", "sn", "tr", "vr", "zm", "kl",
];
const INPUT_CODAS: [&str; 6] = ["ib", "od", "un", "ex", "af", "ys"];
const OUTPUT_ONSETS: [&str; 12] = [
    "m", "p", "t", "k", "s", "n", "r", "l", "g", "d", "b", "f",
];
const OUTPUT_CODAS: [&str; 6] = ["arn", "elk", "orm", "int", "usk", "yle"];

const FILLER_VERBS: [&str; 6] = ["use", "apply", "follow", "take", "run", "consult"];
const FILLER_NOUNS: [&str; 6] = ["rule", "table", "scheme", "code", "key", "chart"];
const FILLER_EXTRA: [&str; 19] = [
    "the", "to", "word", "each", "given", "answer", "with", "for", "now", "please", "mapping",
    "match", "convert", "respond", "single", "question", "gives", "and", "that",
];
const CORPUS_WORDS: [&str; 24] = [
    "stone", "river", "cloud", "ember", "frost", "grove", "ridge", "lantern", "meadow", "harbor",
    "willow", "canyon", "summit", "valley", "breeze", "timber", "petal", "marsh", "boulder",
    "creek", "tundra", "orchard", "drift", "shore",
];

/// The toy input vocabulary (72 invented words, inputs then outputs).
pub fn toy_words() -> (Vec<String>, Vec<String>) {
    let inputs: Vec<String> = INPUT_ONSETS
        .iter()
        .flat_map(|on| INPUT_CODAS.iter().map(move |co| format!("{on}{co}")))
        .take(TOY_TASK_SIZE)
        .collect();
    let outputs: Vec<String> = OUTPUT_ONSETS
        .iter()
        .flat_map(|on| OUTPUT_CODAS.iter().map(move |co| format!("{on}{co}")))
        .take(TOY_TASK_SIZE)
        .collect();
    (inputs, outputs)
}

/// Tokenizer over the complete toy vocabulary.
pub fn toy_tokenizer() -> Tokenizer {
    let (inputs, outputs) = toy_words();
    let mut words: Vec<String> = Vec::new();
    words.extend(inputs);
    words.extend(outputs);
    words.extend(TOY_KEYWORDS.iter().map(|s| s.to_string()));
    words.extend(FILLER_VERBS.iter().map(|s| s.to_string()));
    words.extend(FILLER_NOUNS.iter().map(|s| s.to_string()));
    words.extend(FILLER_EXTRA.iter().map(|s| s.to_string()));
    words.extend(CORPUS_WORDS.iter().map(|s| s.to_string()));
    Tokenizer::from_words(&words)
}

/// Three permutations over the output words, pairwise disagreeing at every
/// input, deterministically from `seed`.
fn toy_permutations(seed: u64) -> [Vec<usize>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["toy-perms"]));
    loop {
        let mut perms: [Vec<usize>; 3] = Default::default();
        for p in perms.iter_mut() {
            let mut idx: Vec<usize> = (0..TOY_TASK_SIZE).collect();
            idx.shuffle(&mut rng);
            *p = idx;
        }
        let disjoint = (0..TOY_TASK_SIZE).all(|i| {
            perms[0][i] != perms[1][i] && perms[0][i] != perms[2][i] && perms[1][i] != perms[2][i]
        });
        if disjoint {
            return perms;
        }
    }
}

/// The three toy datasets (classification; labels cover the output words).
pub fn toy_tasks(seed: u64) -> Vec<TaskDataset> {
    let (inputs, outputs) = toy_words();
    let perms = toy_permutations(seed);
    TOY_KEYWORDS
        .iter()
        .zip(perms.iter())
        .map(|(keyword, perm)| {
            let pairs: Vec<(String, String)> = inputs
                .iter()
                .zip(perm.iter())
                .map(|(x, &yi)| (x.clone(), outputs[yi].clone()))
                .collect();
            TaskDataset::from_parts(
                format!("toy-map-{keyword}"),
                pairs,
                Some(outputs.clone()),
                "toy",
            )
            .expect("toy task is valid")
        })
        .collect()
}

fn keyword_of(task_id: &str) -> &str {
    TOY_KEYWORDS
        .iter()
        .find(|k| task_id.ends_with(*k))
        .copied()
        .unwrap_or(TOY_KEYWORDS[0])
}

// ---------------------------------------------------------------------------
// Instruction phrasing
// ---------------------------------------------------------------------------

/// One instruction string for `keyword`, drawn from the toy template space.
fn phrase_instruction(keyword: &str, regime: LengthRegime, rng: &mut ChaCha8Rng) -> String {
    let verb = FILLER_VERBS[rng.gen_range(0..FILLER_VERBS.len())];
    let noun = FILLER_NOUNS[rng.gen_range(0..FILLER_NOUNS.len())];
    let noun2 = FILLER_NOUNS[rng.gen_range(0..FILLER_NOUNS.len())];
    match regime {
        LengthRegime::Short => {
            let pattern = rng.gen_range(0..6);
            match pattern {
                0 => format!("{verb} the {keyword} {noun}"),
                1 => format!("please {verb} the {keyword} {noun}"),
                2 => format!("{verb} the {keyword} {noun} now"),
                3 => format!("answer with the {keyword} {noun}"),
                4 => format!("{verb} the {keyword} {noun} for each word"),
                _ => format!("the {keyword} {noun} gives the answer"),
            }
        }
        LengthRegime::Long => {
            let verb2 = FILLER_VERBS[rng.gen_range(0..FILLER_VERBS.len())];
            let pattern = rng.gen_range(0..3);
            match pattern {
                0 => format!(
                    "for each question please {verb} the {keyword} {noun} and respond with the \
                     single word that the {keyword} {noun2} gives for the given word"
                ),
                1 => format!(
                    "take each given word and {verb} the {keyword} {noun} to convert the word \
                     and answer with the match the {keyword} {noun2} gives now"
                ),
                _ => format!(
                    "please {verb2} the {keyword} {noun} for the question and {verb} the \
                     {keyword} {noun2} to answer each given word with the single match"
                ),
            }
        }
    }
}

/// The recorded fixture an external generator would have produced: `rounds`
/// rounds of ten generations with natural exact-duplicate repetition.
pub fn toy_fixture(
    task_id: &str,
    regime: LengthRegime,
    rounds: usize,
    seed: u64,
) -> GeneratorFixture {
    let keyword = keyword_of(task_id);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &["toy-fixture", task_id, regime.name()],
    ));
    let rounds: Vec<Vec<String>> = (0..rounds)
        .map(|_| {
            (0..crate::instructions::GENERATIONS_PER_ROUND)
                .map(|_| phrase_instruction(keyword, regime, &mut rng))
                .collect()
        })
        .collect();
    GeneratorFixture {
        generator_model_id: "toy-fixture-generator".into(),
        task_id: task_id.to_string(),
        regime,
        rounds,
    }
}

/// Deterministic plain-text corpus over the neutral word list.
pub fn toy_corpus(seed: u64, lines: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["toy-corpus"]));
    (0..lines)
        .map(|_| {
            let len = rng.gen_range(6..28);
            let words: Vec<&str> = (0..len)
                .map(|_| CORPUS_WORDS[rng.gen_range(0..CORPUS_WORDS.len())])
                .collect();
            format!("{}.", words.join(" "))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Model + curriculum
// ---------------------------------------------------------------------------

/// Architecture of the toy task model (32 heads total).
pub fn toy_model_config(model_id: &str) -> MiniConfig {
    MiniConfig {
        model_id: model_id.to_string(),
        n_layers: 4,
        n_heads: 8,
        d_model: 32,
        d_head: 4,
        d_mlp: 96,
        max_seq_len: 160,
    }
}

/// Turns a rendered prompt plus its target into a supervised example: every
/// position predicting an output-vocabulary token is supervised.
fn example_from_text(
    tokenizer: &Tokenizer,
    text: &str,
    output_ids: &std::collections::BTreeSet<u32>,
) -> TrainExample {
    let mut tokens = vec![tokenizer.bos_id()];
    tokens.extend(tokenizer.encode(text));
    let mut targets = vec![None; tokens.len()];
    for p in 0..tokens.len() - 1 {
        if output_ids.contains(&tokens[p + 1]) {
            targets[p] = Some(tokens[p + 1]);
        }
    }
    TrainExample { tokens, targets }
}

/// Sampling weights for the three prompt families.
#[derive(Debug, Clone, Copy)]
pub struct CurriculumMix {
    pub demo: f64,
    pub instruction: f64,
    pub zero_shot: f64,
}

pub const BASE_MIX: CurriculumMix = CurriculumMix {
    demo: 0.8,
    instruction: 0.0,
    zero_shot: 0.2,
};

pub const TUNE_MIX: CurriculumMix = CurriculumMix {
    demo: 0.35,
    instruction: 0.45,
    zero_shot: 0.2,
};

struct Curriculum {
    tasks: Vec<TaskDataset>,
    output_ids: std::collections::BTreeSet<u32>,
    mix: CurriculumMix,
}

impl Curriculum {
    fn new(tokenizer: &Tokenizer, tasks: Vec<TaskDataset>, mix: CurriculumMix) -> Self {
        let (_, outputs) = toy_words();
        let output_ids = outputs
            .iter()
            .filter_map(|w| tokenizer.id_of(&format!(" {w}")))
            .collect();
        Self {
            tasks,
            output_ids,
            mix,
        }
    }

    fn sample(&self, tokenizer: &Tokenizer, rng: &mut ChaCha8Rng) -> Result<TrainExample> {
        let task = &self.tasks[rng.gen_range(0..self.tasks.len())];
        let query = rng.gen_range(0..task.len());
        let (x, y) = &task.pairs[query];
        let roll: f64 = rng.gen();
        let text = if roll < self.mix.demo {
            let k = 1 + rng.gen_range(0..10);
            let pool: Vec<usize> = (0..task.len()).collect();
            let ctx = sample_context_indices(task, &pool, query, k, rng)?;
            let prompt = render_demo_prompt(task, &ctx, query, false, 0)?;
            format!("{}{y}", prompt.rendered_text)
        } else if roll < self.mix.demo + self.mix.instruction {
            let keyword = keyword_of(&task.task_id);
            let regime = if rng.gen_bool(0.5) {
                LengthRegime::Short
            } else {
                LengthRegime::Long
            };
            let instruction = phrase_instruction(keyword, regime, rng);
            let prompt =
                render_instruction_prompt(&instruction, x, y, PromptForm::Instruction, None)?;
            format!("{}{y}", prompt.rendered_text)
        } else {
            // zero-shot: task identity is unknowable, supervise the marginal
            let other = &self.tasks[rng.gen_range(0..self.tasks.len())];
            let y_marginal = &other.pairs[query].1;
            let prompt = render_zero_shot_prompt(x, y_marginal)?;
            format!("{}{y_marginal}", prompt.rendered_text)
        };
        Ok(example_from_text(tokenizer, &text, &self.output_ids))
    }
}

/// Training schedule for the toy checkpoints.
#[derive(Debug, Clone)]
pub struct ToyTrainPlan {
    pub seed: u64,
    pub base_steps: usize,
    pub tune_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
}

impl Default for ToyTrainPlan {
    fn default() -> Self {
        Self {
            seed: 7,
            base_steps: 1100,
            tune_steps: 700,
            batch_size: 12,
            lr: 2e-3,
            warmup: 60,
        }
    }
}

fn run_training(
    model: &mut MiniTransformer,
    curriculum: &Curriculum,
    opt: &mut Adam,
    steps: usize,
    batch_size: usize,
    stage: &str,
    seed: u64,
) -> Result<f64> {
    let tokenizer = model.tokenizer.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["toy-train", stage]));
    let mut last_loss = f64::NAN;
    for step in 0..steps {
        let batch: Vec<TrainExample> = (0..batch_size)
            .map(|_| curriculum.sample(&tokenizer, &mut rng))
            .collect::<Result<_>>()?;
        let (loss, mut grads) = batch_loss_and_grad(model, &batch);
        opt.step(model, &mut grads);
        last_loss = loss;
        if step % 100 == 0 {
            log::info!("toy {stage} step {step}: loss {loss:.4}");
        }
    }
    Ok(last_loss)
}

/// Trains the base (demonstrations only) and tuned (instructions mixed in)
/// checkpoints and writes them to `base_path` / `tuned_path`.
pub fn train_toy_models(
    base_path: &Path,
    tuned_path: &Path,
    plan: &ToyTrainPlan,
) -> Result<(MiniTransformer, MiniTransformer)> {
    let tokenizer = toy_tokenizer();
    let tasks = toy_tasks(plan.seed);
    let mut model = MiniTransformer::seeded(
        toy_model_config("toy-base"),
        tokenizer.clone(),
        derive_seed(plan.seed, &["toy-init"]),
    )?;
    let mut opt = Adam::new(&model, plan.lr, plan.warmup);
    let base_curriculum = Curriculum::new(&tokenizer, tasks.clone(), BASE_MIX);
    let base_loss = run_training(
        &mut model,
        &base_curriculum,
        &mut opt,
        plan.base_steps,
        plan.batch_size,
        "base",
        plan.seed,
    )?;
    log::info!("toy base stage done, loss {base_loss:.4}");
    model.save(base_path)?;
    let base = model.clone();

    let mut tuned = model;
    tuned.config.model_id = "toy-tuned".into();
    let tune_curriculum = Curriculum::new(&tokenizer, tasks, TUNE_MIX);
    let tune_loss = run_training(
        &mut tuned,
        &tune_curriculum,
        &mut opt,
        plan.tune_steps,
        plan.batch_size,
        "tune",
        plan.seed,
    )?;
    log::info!("toy tune stage done, loss {tune_loss:.4}");
    tuned.save(tuned_path)?;
    Ok((base, tuned))
}

// ---------------------------------------------------------------------------
// Asset bundle
// ---------------------------------------------------------------------------

/// Paths of everything the toy pipeline consumes.
#[derive(Debug, Clone)]
pub struct ToyAssets {
    pub tasks: Vec<PathBuf>,
    pub corpus: PathBuf,
    pub fixture_dir: PathBuf,
    pub base_model: PathBuf,
    pub tuned_model: PathBuf,
}

/// Writes tasks, corpus, and instruction fixtures under `dir` (no training).
pub fn build_toy_assets(dir: &Path, seed: u64, rounds: usize) -> Result<ToyAssets> {
    std::fs::create_dir_all(dir)?;
    let task_dir = dir.join("tasks");
    std::fs::create_dir_all(&task_dir)?;
    let mut task_paths = Vec::new();
    for task in toy_tasks(seed) {
        let path = task_dir.join(format!("{}.json", task.task_id));
        task.save(&path)?;
        task_paths.push(path);
    }
    let corpus_path = dir.join("corpus").join("toy_text.txt");
    std::fs::create_dir_all(corpus_path.parent().expect("has parent"))?;
    std::fs::write(&corpus_path, toy_corpus(seed, 400).join("\n"))?;
    let fixture_dir = dir.join("fixtures");
    std::fs::create_dir_all(&fixture_dir)?;
    for task in toy_tasks(seed) {
        for regime in [LengthRegime::Short, LengthRegime::Long] {
            let fixture = toy_fixture(&task.task_id, regime, rounds, seed);
            fixture.save(&fixture_dir.join(format!("{}.{}.json", task.task_id, regime.name())))?;
        }
    }
    Ok(ToyAssets {
        tasks: task_paths,
        corpus: corpus_path,
        fixture_dir,
        base_model: dir.join("toy-base.json"),
        tuned_model: dir.join("toy-tuned.json"),
    })
}

/// Builds assets and trains both checkpoints (idempotent; existing
/// checkpoints are reused).
pub fn prepare_toy(dir: &Path, plan: &ToyTrainPlan, rounds: usize) -> Result<ToyAssets> {
    let assets = build_toy_assets(dir, plan.seed, rounds)?;
    if assets.base_model.exists() && assets.tuned_model.exists() {
        log::info!("toy checkpoints already present, skipping training");
        return Ok(assets);
    }
    train_toy_models(&assets.base_model, &assets.tuned_model, plan)?;
    Ok(assets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_tasks_share_vocabularies_but_never_agree() {
        let tasks = toy_tasks(7);
        assert_eq!(tasks.len(), 3);
        for t in &tasks {
            assert_eq!(t.len(), TOY_TASK_SIZE);
        }
        for i in 0..TOY_TASK_SIZE {
            let a = &tasks[0].pairs[i];
            let b = &tasks[1].pairs[i];
            let c = &tasks[2].pairs[i];
            assert_eq!(a.0, b.0);
            assert_eq!(b.0, c.0);
            assert_ne!(a.1, b.1);
            assert_ne!(a.1, c.1);
            assert_ne!(b.1, c.1);
        }
    }

    #[test]
    fn toy_vocabulary_tokenizes_prompts_without_unknowns() {
        let tk = toy_tokenizer();
        let tasks = toy_tasks(7);
        let prompt = render_demo_prompt(&tasks[0], &[0, 1], 2, false, 0).unwrap();
        let ids = tk.encode(&prompt.rendered_text);
        assert!(!ids.contains(&tk.unk_id()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for regime in [LengthRegime::Short, LengthRegime::Long] {
            for _ in 0..40 {
                let text = phrase_instruction("amber", regime, &mut rng);
                assert!(
                    !tk.encode(&text).contains(&tk.unk_id()),
                    "unknown token in {text:?}"
                );
            }
        }
    }

    #[test]
    fn short_phrases_fit_the_regime_limit() {
        let tk = toy_tokenizer();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let text = phrase_instruction("basil", LengthRegime::Short, &mut rng);
            assert!(
                tk.encode(&text).len() <= crate::instructions::SHORT_REGIME_TOKEN_LIMIT,
                "short instruction too long: {text:?}"
            );
        }
    }

    #[test]
    fn long_phrases_exceed_the_short_limit() {
        let tk = toy_tokenizer();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let text = phrase_instruction("cedar", LengthRegime::Long, &mut rng);
            assert!(
                tk.encode(&text).len() > crate::instructions::SHORT_REGIME_TOKEN_LIMIT,
                "long instruction too short: {text:?}"
            );
        }
    }

    #[test]
    fn fixtures_are_deterministic_and_diverse() {
        let a = toy_fixture("toy-map-amber", LengthRegime::Short, 20, 7);
        let b = toy_fixture("toy-map-amber", LengthRegime::Short, 20, 7);
        assert_eq!(a.rounds, b.rounds);
        let unique: std::collections::BTreeSet<&String> = a.rounds.iter().flatten().collect();
        assert!(unique.len() >= 40, "only {} unique instructions", unique.len());
        assert!(unique.len() < 200);
        for text in unique {
            assert!(text.contains("amber"));
        }
    }

    #[test]
    fn supervision_lands_on_answer_positions_only() {
        let tk = toy_tokenizer();
        let tasks = toy_tasks(7);
        let task = &tasks[0];
        let prompt = render_demo_prompt(task, &[0, 1], 2, false, 0).unwrap();
        let text = format!("{}{}", prompt.rendered_text, prompt.target);
        let (_, outputs) = toy_words();
        let output_ids: std::collections::BTreeSet<u32> = outputs
            .iter()
            .filter_map(|w| tk.id_of(&format!(" {w}")))
            .collect();
        let ex = example_from_text(&tk, &text, &output_ids);
        // three answers: two in-context labels plus the final target
        assert_eq!(ex.supervised_positions(), 3);
        for (p, target) in ex.targets.iter().enumerate() {
            if let Some(t) = target {
                assert_eq!(ex.tokens[p + 1], *t);
                assert!(output_ids.contains(t));
            }
        }
    }

    #[test]
    fn corpus_lines_use_the_neutral_vocabulary() {
        let lines = toy_corpus(7, 50);
        assert_eq!(lines.len(), 50);
        for keyword in TOY_KEYWORDS {
            assert!(
                !lines.iter().any(|l| l.contains(keyword)),
                "corpus leaks keyword {keyword}"
            );
        }
        let tk = toy_tokenizer();
        for line in &lines {
            assert!(!tk.encode(line).contains(&tk.unk_id()));
        }
    }
}

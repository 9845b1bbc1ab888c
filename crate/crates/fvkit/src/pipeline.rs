//! End-to-end orchestration behind the CLI commands.
//!
//! Work is organized into idempotent (task x form x condition) cells under
//! the run's output root; completed cells are skipped on rerun, and every
//! artifact embeds the config hash that produced it. Within a task, gateway
//! calls are parallelized only where results reduce in a fixed order, so a
//! rerun with the same seeds yields identical content hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    emit_tables_and_plots, head_overlap, shared_head_similarity, AnalysisInputs, OverlapReport,
    Pairing, SimilarityCurve,
};
use crate::baselines::{
    build_corpus_cache, derive_seed, BaselineRegistry, BaselineSpec, CorpusCache, SamplerContext,
};
use crate::config::RunConfig;
use crate::corpus::{
    render_demo_prompt, render_instruction_prompt, sample_context_indices, PromptForm,
    PromptInstance, SplitSpec, TaskDataset,
};
use crate::error::{FvError, Result};
use crate::eval::{
    evaluate, evaluate_joint, steer_cross_model, sweep_layers, EvalRegime, EvalReport,
    EvalSetting,
};
use crate::fv::{
    aggregate_cie, build_fv, compute_cie_tensor, compute_mean_activations, select_heads,
    ActivationSummary, BaselineCondition, CieTensor, FunctionVector, HeadSet, HeadSetProvenance,
    PresentationForm, SelectionMode,
};
use crate::gateway::{default_intervention_layer, HeadId, InterventionPlan, MiniGateway, ModelGateway};
use crate::instructions::{
    argmax, generate_instructions, select_top_instructions, FixtureGenerator, HttpGenerator,
    InstructionGenerator, InstructionSet, LengthRegime, RecordingGenerator, TopInstructions,
};
use crate::store::{prompt_set_hash, ArtifactRecord, KeyedStore, RunManifest, ARTIFACT_SCHEMA_VERSION};

/// Attempt multiplier when hunting for successful prompts.
const SUCCESS_HUNT_FACTOR: usize = 30;

/// Per-(task, form) eligibility decision, persisted alongside the cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EligibilityRecord {
    pub task_id: String,
    pub form: PresentationForm,
    pub eligible: bool,
    pub baseline_accuracy: f64,
    pub chance: f64,
    pub detail: String,
}

/// What one train run did.
#[derive(Debug, Default)]
pub struct TrainOutcome {
    pub cells_written: usize,
    pub cells_skipped: usize,
    pub ineligible: Vec<(String, String)>,
}

pub fn load_gateway(path: &Path) -> Result<MiniGateway> {
    MiniGateway::load(path)
}

fn task_seed(cfg: &RunConfig, task_id: &str, purpose: &str) -> u64 {
    derive_seed(cfg.seed, &[purpose, task_id])
}

fn load_tasks(cfg: &RunConfig) -> Result<Vec<TaskDataset>> {
    cfg.tasks.iter().map(|p| TaskDataset::load(p)).collect()
}

fn intervention_layer(cfg: &RunConfig, n_layers: usize) -> usize {
    cfg.intervention_layer
        .unwrap_or_else(|| default_intervention_layer(n_layers))
}

/// Joint-intervention sweep range: `[floor(L/4), ceil(L/2)]`, endpoints
/// inclusive.
pub fn joint_sweep_range(n_layers: usize) -> (usize, usize) {
    let lo = n_layers / 4;
    let hi = n_layers.div_ceil(2).min(n_layers - 1);
    (lo, hi)
}

// ---------------------------------------------------------------------------
// generate-instructions
// ---------------------------------------------------------------------------

fn make_generator(
    cfg: &RunConfig,
    task_id: &str,
    regime: LengthRegime,
) -> Result<Box<dyn InstructionGenerator>> {
    if let Some(dir) = &cfg.generator.fixture_dir {
        if !cfg.generator.record {
            let path = dir.join(format!("{task_id}.{}.json", regime.name()));
            return Ok(Box::new(FixtureGenerator::from_file(&path)?));
        }
    }
    match &cfg.generator.endpoint {
        Some(endpoint) => {
            let api_key = std::env::var("FVKIT_GENERATOR_API_KEY").ok();
            Ok(Box::new(HttpGenerator::new(
                endpoint.clone(),
                cfg.generator.model_id.clone(),
                api_key,
            )))
        }
        None => Err(FvError::Config(
            "no generator configured: set generator.fixture_dir or generator.endpoint".into(),
        )),
    }
}

/// Generates (or replays) candidate instructions for every task and regime.
pub fn run_generate_instructions(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let gateway = load_gateway(&cfg.model)?;
    let tasks = load_tasks(cfg)?;
    let out_dir = cfg.instructions_dir();
    let mut written = Vec::new();
    for task in &tasks {
        for &regime in &cfg.regimes {
            let seed = task_seed(cfg, &task.task_id, "instruction-generation");
            let set = if cfg.generator.record {
                let inner = make_generator(cfg, &task.task_id, regime)?;
                let mut recording = RecordingGenerator::new(BoxedGenerator(inner), &task.task_id, regime);
                let set = generate_instructions(
                    task,
                    &mut recording,
                    &gateway,
                    regime,
                    cfg.budgets.generation_rounds,
                    cfg.budgets.shots,
                    seed,
                )?;
                if let Some(dir) = &cfg.generator.fixture_dir {
                    recording
                        .into_fixture()
                        .save(&dir.join(format!("{}.{}.json", task.task_id, regime.name())))?;
                }
                set
            } else {
                let mut generator = make_generator(cfg, &task.task_id, regime)?;
                generate_instructions(
                    task,
                    generator.as_mut(),
                    &gateway,
                    regime,
                    cfg.budgets.generation_rounds,
                    cfg.budgets.shots,
                    seed,
                )?
            };
            let path = out_dir.join(format!("{}.{}.json", task.task_id, regime.name()));
            set.save(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

struct BoxedGenerator(Box<dyn InstructionGenerator>);

impl InstructionGenerator for BoxedGenerator {
    fn model_id(&self) -> &str {
        self.0.model_id()
    }
    fn generate(&mut self, request: &crate::instructions::GenerationRequest) -> Result<Vec<String>> {
        self.0.generate(request)
    }
}

// ---------------------------------------------------------------------------
// build-cache
// ---------------------------------------------------------------------------

/// Scores corpus prefixes and writes the cache file.
pub fn run_build_cache(cfg: &RunConfig) -> Result<PathBuf> {
    let gateway = load_gateway(&cfg.model)?;
    let corpus_path = cfg
        .corpus
        .as_ref()
        .ok_or_else(|| FvError::Config("build-cache needs a corpus path".into()))?;
    let raw = std::fs::read_to_string(corpus_path)?;
    let documents = raw
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect::<Vec<_>>();
    let cache = build_corpus_cache(
        &gateway,
        documents,
        &corpus_path.display().to_string(),
        cfg.budgets.corpus_cache_target,
    )?;
    let out = cfg.default_cache_path();
    cache.save(&out)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// train (activations + CIE)
// ---------------------------------------------------------------------------

fn cell_path(cfg: &RunConfig, task_id: &str, name: &str) -> PathBuf {
    cfg.cells_dir().join(format!("{task_id}.{name}.jsonl"))
}

fn cell_done(config_hash: &str, path: &Path) -> bool {
    path.exists()
        && ArtifactRecord::<serde_json::Value>::read(path, config_hash, false).is_ok()
}

fn write_cell<T: Serialize + serde::de::DeserializeOwned>(
    cfg: &RunConfig,
    config_hash: &str,
    task_id: &str,
    condition: &str,
    prompts_hash: String,
    payload: T,
    path: &Path,
) -> Result<()> {
    ArtifactRecord {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        model_id: cfg.model.display().to_string(),
        task_id: task_id.to_string(),
        condition: condition.to_string(),
        seed: cfg.seed,
        config_hash: config_hash.to_string(),
        prompt_set_hash: prompts_hash,
        payload,
    }
    .write(path)
}

/// Accuracy of clean K-shot prompts over train queries (eligibility probe).
fn clean_demo_accuracy(
    task: &TaskDataset,
    split: &SplitSpec,
    gateway: &dyn ModelGateway,
    shots: usize,
    seed: u64,
) -> Result<f64> {
    let empty = InterventionPlan::empty();
    let mut correct = 0usize;
    for (i, &qi) in split.indices_train.iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &["eligibility-ctx", &i.to_string()]));
        let ctx = sample_context_indices(task, &split.indices_train, qi, shots, &mut rng)?;
        let prompt = render_demo_prompt(task, &ctx, qi, false, 0)?;
        let probs = gateway.run_with_interventions(&prompt, &empty)?;
        let target = gateway.first_token_of(&prompt.target, &prompt)?;
        if argmax(&probs) == target as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / split.indices_train.len().max(1) as f64)
}

/// Collects `budget` clean demo prompts the model answers correctly,
/// cycling train queries with fresh contexts.
fn collect_demo_prompts(
    task: &TaskDataset,
    split: &SplitSpec,
    gateway: &dyn ModelGateway,
    budget: usize,
    shots: usize,
    seed: u64,
) -> Result<Vec<PromptInstance>> {
    let empty = InterventionPlan::empty();
    let mut out = Vec::with_capacity(budget);
    let train = &split.indices_train;
    let mut attempt = 0usize;
    while out.len() < budget {
        if attempt >= budget * SUCCESS_HUNT_FACTOR {
            return Err(FvError::TaskIneligible {
                task_id: task.task_id.clone(),
                detail: format!(
                    "only {} of {budget} successful demonstration prompts found",
                    out.len()
                ),
            });
        }
        let qi = train[attempt % train.len()];
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &["demo-ctx", &attempt.to_string()]));
        attempt += 1;
        let ctx = sample_context_indices(task, train, qi, shots, &mut rng)?;
        let prompt = render_demo_prompt(task, &ctx, qi, false, 0)?;
        let probs = gateway.run_with_interventions(&prompt, &empty)?;
        let target = gateway.first_token_of(&prompt.target, &prompt)?;
        if argmax(&probs) == target as usize {
            out.push(prompt);
        }
    }
    Ok(out)
}

/// Collects `per_instruction` successful prompts for each top instruction.
fn collect_instruction_prompts(
    task: &TaskDataset,
    split: &SplitSpec,
    set: &InstructionSet,
    top: &TopInstructions,
    gateway: &dyn ModelGateway,
    per_instruction: usize,
    seed: u64,
) -> Result<Vec<PromptInstance>> {
    let empty = InterventionPlan::empty();
    let mut out = Vec::new();
    for (spec_id, _) in &top.ranked {
        let text = set.text_of(spec_id).ok_or_else(|| {
            FvError::Store(format!("top instruction {spec_id} missing from its set"))
        })?;
        let mut order: Vec<usize> = split.indices_train.clone();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &["instr-queries", spec_id]));
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut collected = 0usize;
        for &qi in &order {
            if collected == per_instruction {
                break;
            }
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
                out.push(prompt);
                collected += 1;
            }
        }
        if collected < per_instruction {
            return Err(FvError::TaskIneligible {
                task_id: task.task_id.clone(),
                detail: format!(
                    "instruction {spec_id} yielded {collected} of {per_instruction} successful prompts"
                ),
            });
        }
    }
    Ok(out)
}

/// Shuffled-demonstration CIE prompts carrying true targets.
fn shuffled_cie_prompts(
    task: &TaskDataset,
    split: &SplitSpec,
    budget: usize,
    shots: usize,
    seed: u64,
) -> Result<Vec<PromptInstance>> {
    let train = &split.indices_train;
    (0..budget)
        .map(|i| {
            let qi = train[i % train.len()];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                &["cie-shuffle-ctx", &i.to_string()],
            ));
            let ctx = sample_context_indices(task, train, qi, shots, &mut rng)?;
            let shuffle_seed = derive_seed(seed, &["cie-shuffle", &i.to_string()]);
            render_demo_prompt(task, &ctx, qi, true, shuffle_seed)
        })
        .collect()
}

/// Renders a baseline-instruction CIE prompt, skipping train queries whose
/// target leaks into the baseline text.
fn baseline_cie_prompt(
    task: &TaskDataset,
    split: &SplitSpec,
    baseline: &BaselineSpec,
    seed: u64,
    salt: &str,
) -> Result<PromptInstance> {
    let train = &split.indices_train;
    let start = (derive_seed(seed, &["cie-query", salt]) as usize) % train.len();
    for step in 0..train.len() {
        let qi = train[(start + step) % train.len()];
        let (x, y) = &task.pairs[qi];
        if baseline.text.contains(y) {
            continue;
        }
        return render_instruction_prompt(
            &baseline.text,
            x,
            y,
            PromptForm::BaselineInstruction,
            Some(baseline.source_spec_id.clone()),
        );
    }
    Err(FvError::InvalidPrompt(format!(
        "every train target appears in baseline {:?}",
        baseline.text
    )))
}

/// The baseline method that produced a condition, if any.
fn condition_of(method_name: &str) -> Result<BaselineCondition> {
    match method_name {
        "equiprobable" => Ok(BaselineCondition::Equiprobable),
        "real_text" => Ok(BaselineCondition::RealText),
        "other_task" => Ok(BaselineCondition::OtherTask),
        other => Err(FvError::Config(format!("unknown baseline method {other:?}"))),
    }
}

fn load_instruction_sets(cfg: &RunConfig, regime: LengthRegime) -> Result<Vec<InstructionSet>> {
    let dir = cfg.instructions_dir();
    let mut sets = Vec::new();
    for task_path in &cfg.tasks {
        let task = TaskDataset::load(task_path)?;
        let path = dir.join(format!("{}.{}.json", task.task_id, regime.name()));
        if !path.exists() {
            return Err(FvError::Store(format!(
                "instruction file {} missing; run generate-instructions first",
                path.display()
            )));
        }
        sets.push(InstructionSet::load(&path)?);
    }
    Ok(sets)
}

/// Computes mean activations and CIE tensors for every (task x form x
/// condition) cell, with per-task failures isolated.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let config_hash = cfg.config_hash()?;
    let gateway = Arc::new(load_gateway(&cfg.model)?);
    let tasks = load_tasks(cfg)?;
    let registry = BaselineRegistry::builtin();
    let mut outcome = TrainOutcome::default();

    let needs_cache = cfg.baseline_methods.iter().any(|m| m == "real_text");
    let cache: Option<CorpusCache> = if needs_cache {
        let path = cfg.default_cache_path();
        if !path.exists() {
            return Err(FvError::Config(format!(
                "corpus cache {} missing; run build-cache first",
                path.display()
            )));
        }
        Some(CorpusCache::load(&path, &gateway.profile().model_id)?)
    } else {
        None
    };
    let needs_pool = cfg.baseline_methods.iter().any(|m| m == "other_task");
    let mut pools: BTreeMap<LengthRegime, Vec<InstructionSet>> = BTreeMap::new();
    if needs_pool || !cfg.regimes.is_empty() {
        for &regime in &cfg.regimes {
            pools.insert(regime, load_instruction_sets(cfg, regime)?);
        }
    }

    for task in &tasks {
        let split = SplitSpec::split(task, task_seed(cfg, &task.task_id, "split"))?;
        if let Err(e) = train_demo_form(cfg, &config_hash, task, &split, &gateway, &mut outcome) {
            log::warn!("task {} demo form failed: {e}", task.task_id);
            outcome.ineligible.push((task.task_id.clone(), e.to_string()));
        }
        for &regime in &cfg.regimes {
            let sets = pools.get(&regime).expect("pool loaded");
            if let Err(e) = train_instruction_form(
                cfg,
                &config_hash,
                task,
                &split,
                &gateway,
                regime,
                sets,
                cache.as_ref(),
                &registry,
                &mut outcome,
            ) {
                log::warn!(
                    "task {} {} form failed: {e}",
                    task.task_id,
                    regime.name()
                );
                outcome.ineligible.push((task.task_id.clone(), e.to_string()));
            }
        }
    }
    Ok(outcome)
}

fn train_demo_form(
    cfg: &RunConfig,
    config_hash: &str,
    task: &TaskDataset,
    split: &SplitSpec,
    gateway: &Arc<MiniGateway>,
    outcome: &mut TrainOutcome,
) -> Result<()> {
    let seed = task_seed(cfg, &task.task_id, "demo");
    let eligibility_path = cell_path(cfg, &task.task_id, "demo.eligibility");
    let summary_path = cell_path(cfg, &task.task_id, "demo.summary");
    let cie_path = cell_path(cfg, &task.task_id, "demo.shuffled_demo.cie");
    if cell_done(config_hash, &eligibility_path)
        && cell_done(config_hash, &summary_path)
        && cell_done(config_hash, &cie_path)
    {
        outcome.cells_skipped += 3;
        return Ok(());
    }

    let chance = task.chance_level(cfg.chance_open_generation);
    let accuracy = clean_demo_accuracy(task, split, gateway.as_ref(), cfg.budgets.shots, seed)?;
    let eligible = accuracy > chance;
    write_cell(
        cfg,
        config_hash,
        &task.task_id,
        "demo/eligibility",
        String::new(),
        EligibilityRecord {
            task_id: task.task_id.clone(),
            form: PresentationForm::Demo,
            eligible,
            baseline_accuracy: accuracy,
            chance,
            detail: format!("clean {}-shot train accuracy", cfg.budgets.shots),
        },
        &eligibility_path,
    )?;
    outcome.cells_written += 1;
    if !eligible {
        outcome
            .ineligible
            .push((task.task_id.clone(), "demo form below chance".into()));
    }

    let prompts = collect_demo_prompts(
        task,
        split,
        gateway.as_ref(),
        cfg.budgets.activation_prompts,
        cfg.budgets.shots,
        seed,
    )?;
    let summary = compute_mean_activations(
        &prompts,
        gateway.as_ref(),
        &task.task_id,
        PresentationForm::Demo,
    )?;
    write_cell(
        cfg,
        config_hash,
        &task.task_id,
        "demo/summary",
        prompt_set_hash(&prompts),
        summary.clone(),
        &summary_path,
    )?;
    outcome.cells_written += 1;

    let cie_prompts = shuffled_cie_prompts(
        task,
        split,
        cfg.budgets.cie_prompts,
        cfg.budgets.shots,
        seed,
    )?;
    let tensor = compute_cie_tensor(
        &cie_prompts,
        &summary,
        gateway.as_ref(),
        BaselineCondition::ShuffledDemo,
    )?;
    write_cell(
        cfg,
        config_hash,
        &task.task_id,
        "demo/shuffled_demo",
        prompt_set_hash(&cie_prompts),
        tensor,
        &cie_path,
    )?;
    outcome.cells_written += 1;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_instruction_form(
    cfg: &RunConfig,
    config_hash: &str,
    task: &TaskDataset,
    split: &SplitSpec,
    gateway: &Arc<MiniGateway>,
    regime: LengthRegime,
    sets: &[InstructionSet],
    cache: Option<&CorpusCache>,
    registry: &BaselineRegistry,
    outcome: &mut TrainOutcome,
) -> Result<()> {
    let form = match regime {
        LengthRegime::Short => PresentationForm::InstructionShort,
        LengthRegime::Long => PresentationForm::InstructionLong,
    };
    let seed = task_seed(cfg, &task.task_id, form.name());
    let set = sets
        .iter()
        .find(|s| s.task_id == task.task_id)
        .ok_or_else(|| FvError::Store(format!("no instruction set for {}", task.task_id)))?;

    let top_path = cell_path(cfg, &task.task_id, &format!("{}.top", regime.name()));
    let eligibility_path = cell_path(cfg, &task.task_id, &format!("{}.eligibility", form.name()));
    let summary_path = cell_path(cfg, &task.task_id, &format!("{}.summary", form.name()));
    let all_done = cell_done(config_hash, &top_path)
        && cell_done(config_hash, &eligibility_path)
        && cell_done(config_hash, &summary_path)
        && cfg.baseline_methods.iter().all(|m| {
            cell_done(
                config_hash,
                &cell_path(cfg, &task.task_id, &format!("{}.{m}.cie", form.name())),
            )
        });
    if all_done {
        outcome.cells_skipped += 3 + cfg.baseline_methods.len();
        return Ok(());
    }

    let top = select_top_instructions(
        task,
        set,
        split,
        gateway.as_ref(),
        cfg.budgets.top_j,
        cfg.budgets.min_successes,
    )?;
    write_cell(
        cfg,
        config_hash,
        &task.task_id,
        &format!("{}/top", regime.name()),
        String::new(),
        top.clone(),
        &top_path,
    )?;
    outcome.cells_written += 1;

    let chance = task.chance_level(cfg.chance_open_generation);
    let accuracy =
        top.ranked.iter().map(|(_, a)| *a).sum::<f64>() / top.ranked.len().max(1) as f64;
    let eligible = accuracy > chance;
    write_cell(
        cfg,
        config_hash,
        &task.task_id,
        &format!("{}/eligibility", form.name()),
        String::new(),
        EligibilityRecord {
            task_id: task.task_id.clone(),
            form,
            eligible,
            baseline_accuracy: accuracy,
            chance,
            detail: "mean top-instruction zero-shot train accuracy".into(),
        },
        &eligibility_path,
    )?;
    outcome.cells_written += 1;

    let per_instruction = cfg.budgets.activation_prompts / cfg.budgets.top_j;
    let prompts = collect_instruction_prompts(
        task,
        split,
        set,
        &top,
        gateway.as_ref(),
        per_instruction,
        seed,
    )?;
    let summary =
        compute_mean_activations(&prompts, gateway.as_ref(), &task.task_id, form)?;
    write_cell(
        cfg,
        config_hash,
        &task.task_id,
        &format!("{}/summary", form.name()),
        prompt_set_hash(&prompts),
        summary.clone(),
        &summary_path,
    )?;
    outcome.cells_written += 1;

    for method in &cfg.baseline_methods {
        let condition = condition_of(method)?;
        let cie_path = cell_path(cfg, &task.task_id, &format!("{}.{method}.cie", form.name()));
        if cell_done(config_hash, &cie_path) {
            outcome.cells_skipped += 1;
            continue;
        }
        let sampler = registry.get(method)?;
        let mut prompts = Vec::with_capacity(cfg.budgets.cie_prompts);
        for (spec_id, _) in &top.ranked {
            let text = set
                .text_of(spec_id)
                .ok_or_else(|| FvError::Store(format!("instruction {spec_id} missing")))?;
            let ctx = SamplerContext {
                gateway: gateway.as_ref(),
                source_task_id: &task.task_id,
                source_spec_id: spec_id,
                cache,
                instruction_pool: Some(sets),
                count: cfg.budgets.baselines_per_spec,
                seed: derive_seed(seed, &["baselines", method, spec_id]),
                t0: cfg.band_t0,
                dt: cfg.band_dt,
            };
            let baselines = sampler.sample(text, &ctx)?;
            for (bi, baseline) in baselines.iter().enumerate() {
                prompts.push(baseline_cie_prompt(
                    task,
                    split,
                    baseline,
                    seed,
                    &format!("{method}/{spec_id}/{bi}"),
                )?);
            }
        }
        let tensor = compute_cie_tensor(&prompts, &summary, gateway.as_ref(), condition)?;
        write_cell(
            cfg,
            config_hash,
            &task.task_id,
            &format!("{}/{method}", form.name()),
            prompt_set_hash(&prompts),
            tensor,
            &cie_path,
        )?;
        outcome.cells_written += 1;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// select-heads
// ---------------------------------------------------------------------------

/// Named head sets plus the aggregates they came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadSelection {
    pub config_hash: String,
    pub sets: BTreeMap<String, HeadSet>,
    pub aggregates: BTreeMap<String, BTreeMap<HeadId, f64>>,
}

impl HeadSelection {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path, expected_hash: &str, force: bool) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let sel: Self = serde_json::from_str(&raw)
            .map_err(|e| FvError::Store(format!("bad head sets {}: {e}", path.display())))?;
        if sel.config_hash != expected_hash && !force {
            return Err(FvError::HashMismatch {
                found: sel.config_hash,
                expected: expected_hash.to_string(),
            });
        }
        Ok(sel)
    }
}

fn read_cell<T: serde::de::DeserializeOwned + Serialize>(
    cfg: &RunConfig,
    config_hash: &str,
    task_id: &str,
    name: &str,
) -> Result<ArtifactRecord<T>> {
    ArtifactRecord::read(&cell_path(cfg, task_id, name), config_hash, false)
}

fn eligible_tasks(
    cfg: &RunConfig,
    config_hash: &str,
    tasks: &[TaskDataset],
    form_name: &str,
) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for task in tasks {
        let rec: ArtifactRecord<EligibilityRecord> = read_cell(
            cfg,
            config_hash,
            &task.task_id,
            &format!("{form_name}.eligibility"),
        )?;
        if rec.payload.eligible {
            out.push(task.task_id.clone());
        }
    }
    Ok(out)
}

/// Aggregates stored CIE tensors and selects the named head sets: top heads
/// per presentation class, plus the least-important and bottom controls over
/// the combined aggregate.
pub fn run_select_heads(cfg: &RunConfig) -> Result<HeadSelection> {
    let config_hash = cfg.config_hash()?;
    let tasks = load_tasks(cfg)?;
    let k = cfg.budgets.head_count;

    let demo_eligible = eligible_tasks(cfg, &config_hash, &tasks, "demo")?;
    let mut demo_tensors: Vec<CieTensor> = Vec::new();
    for task_id in &demo_eligible {
        let rec: ArtifactRecord<CieTensor> =
            read_cell(cfg, &config_hash, task_id, "demo.shuffled_demo.cie")?;
        demo_tensors.push(rec.payload);
    }
    let demo_agg = aggregate_cie(&demo_tensors.iter().collect::<Vec<_>>())?;

    let mut instr_tensors: Vec<CieTensor> = Vec::new();
    for &regime in &cfg.regimes {
        let form_name = match regime {
            LengthRegime::Short => "instruction_short",
            LengthRegime::Long => "instruction_long",
        };
        for task_id in eligible_tasks(cfg, &config_hash, &tasks, form_name)? {
            for method in &cfg.baseline_methods {
                let rec: ArtifactRecord<CieTensor> = read_cell(
                    cfg,
                    &config_hash,
                    &task_id,
                    &format!("{form_name}.{method}.cie"),
                )?;
                instr_tensors.push(rec.payload);
            }
        }
    }
    let instr_agg = aggregate_cie(&instr_tensors.iter().collect::<Vec<_>>())?;

    // Controls score heads across both presentations at once.
    let mut combined: BTreeMap<HeadId, f64> = BTreeMap::new();
    for (head, score) in &demo_agg {
        combined.insert(*head, score / 2.0);
    }
    for (head, score) in &instr_agg {
        *combined.entry(*head).or_insert(0.0) += score / 2.0;
    }

    let mut sets = BTreeMap::new();
    sets.insert(
        "demo".to_string(),
        select_heads(&demo_agg, k, SelectionMode::Top, HeadSetProvenance::Demo)?,
    );
    sets.insert(
        "instruction".to_string(),
        select_heads(
            &instr_agg,
            k,
            SelectionMode::Top,
            HeadSetProvenance::Instruction,
        )?,
    );
    sets.insert(
        "least_important".to_string(),
        select_heads(
            &combined,
            k,
            SelectionMode::LeastImportantAbs,
            HeadSetProvenance::LeastImportant,
        )?,
    );
    sets.insert(
        "bottom".to_string(),
        select_heads(&combined, k, SelectionMode::Bottom, HeadSetProvenance::Bottom)?,
    );

    let mut aggregates = BTreeMap::new();
    aggregates.insert("demo".to_string(), demo_agg);
    aggregates.insert("instruction".to_string(), instr_agg);
    aggregates.insert("combined".to_string(), combined);

    let selection = HeadSelection {
        config_hash,
        sets,
        aggregates,
    };
    selection.save(&cfg.head_sets_path())?;
    Ok(selection)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn load_summary(
    cfg: &RunConfig,
    config_hash: &str,
    task_id: &str,
    form: PresentationForm,
) -> Result<ActivationSummary> {
    let rec: ArtifactRecord<ActivationSummary> =
        read_cell(cfg, config_hash, task_id, &format!("{}.summary", form.name()))?;
    Ok(rec.payload)
}

fn fv_path(cfg: &RunConfig, task_id: &str, label: &str) -> PathBuf {
    cfg.fv_dir().join(format!("{task_id}.{label}.json"))
}

/// Builds and persists the full FV family for one task.
fn build_task_fvs(
    cfg: &RunConfig,
    config_hash: &str,
    task_id: &str,
    selection: &HeadSelection,
) -> Result<BTreeMap<String, FunctionVector>> {
    let demo_summary = load_summary(cfg, config_hash, task_id, PresentationForm::Demo)?;
    let short_summary = load_summary(cfg, config_hash, task_id, PresentationForm::InstructionShort)?;
    let long_summary = load_summary(cfg, config_hash, task_id, PresentationForm::InstructionLong)?;
    let demo_heads = &selection.sets["demo"];
    let instr_heads = &selection.sets["instruction"];

    let mut fvs = BTreeMap::new();
    fvs.insert("demo".to_string(), build_fv(demo_heads, &demo_summary)?);
    fvs.insert(
        "instruction_short".to_string(),
        build_fv(instr_heads, &short_summary)?,
    );
    fvs.insert(
        "instruction_long".to_string(),
        build_fv(instr_heads, &long_summary)?,
    );
    if cfg.eval.incongruent {
        fvs.insert(
            "incongruent_instr_heads_demo_means".to_string(),
            build_fv(instr_heads, &demo_summary)?,
        );
        fvs.insert(
            "incongruent_demo_heads_instr_means".to_string(),
            build_fv(demo_heads, &short_summary)?,
        );
    }
    if cfg.eval.controls {
        fvs.insert(
            "least_important_demo_means".to_string(),
            build_fv(&selection.sets["least_important"], &demo_summary)?,
        );
        fvs.insert(
            "least_important_instr_means".to_string(),
            build_fv(&selection.sets["least_important"], &short_summary)?,
        );
        fvs.insert(
            "bottom_demo_means".to_string(),
            build_fv(&selection.sets["bottom"], &demo_summary)?,
        );
        fvs.insert(
            "bottom_instr_means".to_string(),
            build_fv(&selection.sets["bottom"], &short_summary)?,
        );
    }
    for (label, fv) in &fvs {
        fv.save(&fv_path(cfg, task_id, label))?;
    }
    Ok(fvs)
}

/// Runs the evaluation grid and appends reports to the run's report store.
pub fn run_evaluate(cfg: &RunConfig) -> Result<Vec<EvalReport>> {
    let config_hash = cfg.config_hash()?;
    let gateway = load_gateway(&cfg.model)?;
    let tasks = load_tasks(cfg)?;
    let selection = HeadSelection::load(&cfg.head_sets_path(), &config_hash, false)?;
    let store = KeyedStore::new(cfg.reports_path());
    let layer = intervention_layer(cfg, gateway.profile().n_layers);
    let n_layers = gateway.profile().n_layers;
    let max_q = cfg.eval.max_queries;
    let mut reports = Vec::new();

    let mut push = |store: &KeyedStore, report: EvalReport| -> Result<()> {
        let key = format!(
            "{}|{}|{}|{}",
            report.model_id,
            report.task_id,
            report.label,
            report.regime.name()
        );
        store.append(&key, &config_hash, &report)?;
        reports.push(report);
        Ok(())
    };

    for task in &tasks {
        let split = SplitSpec::split(task, task_seed(cfg, &task.task_id, "split"))?;
        let seed = task_seed(cfg, &task.task_id, "evaluate");
        let fvs = build_task_fvs(cfg, &config_hash, &task.task_id, &selection)?;

        // baselines for both regimes (the no-intervention dotted line)
        for regime in [EvalRegime::ZeroShot, EvalRegime::Shuffled10Shot] {
            let report = evaluate(
                task,
                &split,
                &EvalSetting::baseline(regime),
                &gateway,
                seed,
                "baseline",
                max_q,
            )?;
            push(&store, report)?;
        }

        // matched evaluations
        let matched: [(&str, &str, EvalRegime); 3] = [
            ("demo", "demo_fv", EvalRegime::Shuffled10Shot),
            ("instruction_short", "instr_fv_short", EvalRegime::ZeroShot),
            ("instruction_long", "instr_fv_long", EvalRegime::ZeroShot),
        ];
        for (fv_label, row_label, regime) in matched {
            let setting = EvalSetting::single(regime, fvs[fv_label].clone(), layer);
            push(&store, evaluate(task, &split, &setting, &gateway, seed, row_label, max_q)?)?;
        }

        if cfg.eval.unmatched {
            let unmatched: [(&str, &str, EvalRegime); 3] = [
                ("demo", "demo_fv_unmatched", EvalRegime::ZeroShot),
                (
                    "instruction_short",
                    "instr_fv_short_unmatched",
                    EvalRegime::Shuffled10Shot,
                ),
                (
                    "instruction_long",
                    "instr_fv_long_unmatched",
                    EvalRegime::Shuffled10Shot,
                ),
            ];
            for (fv_label, row_label, regime) in unmatched {
                let setting = EvalSetting::single(regime, fvs[fv_label].clone(), layer);
                push(&store, evaluate(task, &split, &setting, &gateway, seed, row_label, max_q)?)?;
            }
        }

        if cfg.eval.joint {
            for regime in [EvalRegime::ZeroShot, EvalRegime::Shuffled10Shot] {
                let report = evaluate_joint(
                    task,
                    &split,
                    &fvs["demo"],
                    &fvs["instruction_short"],
                    (layer, layer),
                    regime,
                    &gateway,
                    seed,
                    "joint_demo_plus_instr",
                    max_q,
                )?;
                push(&store, report)?;
            }
        }

        if cfg.eval.fv_twice {
            let twice: [(&str, &str, EvalRegime); 2] = [
                ("demo", "demo_fv_twice", EvalRegime::Shuffled10Shot),
                ("instruction_short", "instr_fv_twice", EvalRegime::ZeroShot),
            ];
            for (fv_label, row_label, regime) in twice {
                let report = evaluate_joint(
                    task,
                    &split,
                    &fvs[fv_label],
                    &fvs[fv_label],
                    (layer, layer),
                    regime,
                    &gateway,
                    seed,
                    row_label,
                    max_q,
                )?;
                push(&store, report)?;
            }
        }

        if cfg.eval.incongruent {
            let rows: [(&str, EvalRegime); 2] = [
                ("incongruent_instr_heads_demo_means", EvalRegime::Shuffled10Shot),
                ("incongruent_demo_heads_instr_means", EvalRegime::ZeroShot),
            ];
            for (label, regime) in rows {
                let setting = EvalSetting::single(regime, fvs[label].clone(), layer);
                push(&store, evaluate(task, &split, &setting, &gateway, seed, label, max_q)?)?;
            }
        }

        if cfg.eval.controls {
            let rows: [(&str, EvalRegime); 4] = [
                ("least_important_demo_means", EvalRegime::Shuffled10Shot),
                ("least_important_instr_means", EvalRegime::ZeroShot),
                ("bottom_demo_means", EvalRegime::Shuffled10Shot),
                ("bottom_instr_means", EvalRegime::ZeroShot),
            ];
            for (label, regime) in rows {
                let setting = EvalSetting::single(regime, fvs[label].clone(), layer);
                push(&store, evaluate(task, &split, &setting, &gateway, seed, label, max_q)?)?;
            }
        }

        if cfg.eval.sweep {
            let sweeps: [(&str, &str, EvalRegime); 2] = [
                ("demo", "demo_fv_sweep", EvalRegime::Shuffled10Shot),
                ("instruction_short", "instr_fv_sweep", EvalRegime::ZeroShot),
            ];
            for (fv_label, row_label, regime) in sweeps {
                let report = sweep_layers(
                    task,
                    &split,
                    &fvs[fv_label],
                    regime,
                    &gateway,
                    seed,
                    (0, n_layers - 1),
                    row_label,
                    max_q,
                )?;
                push(&store, report)?;
            }
            let range = cfg
                .joint_sweep_range
                .unwrap_or_else(|| joint_sweep_range(n_layers));
            let mut curve = BTreeMap::new();
            for l in range.0..=range.1 {
                let report = evaluate_joint(
                    task,
                    &split,
                    &fvs["demo"],
                    &fvs["instruction_short"],
                    (l, l),
                    EvalRegime::ZeroShot,
                    &gateway,
                    seed,
                    "joint_sweep_point",
                    max_q,
                )?;
                curve.insert(l, report.accuracy);
            }
            let mut joint_report = evaluate_joint(
                task,
                &split,
                &fvs["demo"],
                &fvs["instruction_short"],
                (range.0, range.0),
                EvalRegime::ZeroShot,
                &gateway,
                seed,
                "joint_sweep",
                max_q,
            )?;
            joint_report.per_layer_curve = Some(curve);
            push(&store, joint_report)?;
        }
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

/// Builds the run manifest, computes overlap and similarity analyses, and
/// emits every table and figure.
pub fn run_analyze(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let config_hash = cfg.config_hash()?;
    let tasks = load_tasks(cfg)?;
    let selection = HeadSelection::load(&cfg.head_sets_path(), &config_hash, false)?;
    let store = KeyedStore::new(cfg.reports_path());
    let rows: Vec<(String, EvalReport)> = store.load(&config_hash, false)?;
    let reports: Vec<EvalReport> = rows.into_iter().map(|(_, r)| r).collect();

    let overlap: Option<OverlapReport> = match (
        selection.sets.get("demo"),
        selection.sets.get("instruction"),
    ) {
        (Some(demo), Some(instr)) => {
            let model_id = reports
                .first()
                .map(|r| r.model_id.clone())
                .unwrap_or_default();
            Some(head_overlap(demo, instr, &model_id)?)
        }
        _ => None,
    };

    // Similarity over shared heads, averaged across tasks per layer.
    let mut merged: BTreeMap<(Pairing, usize), Vec<f64>> = BTreeMap::new();
    let mut model_id = String::new();
    let mut n_layers = 0usize;
    if let Some(o) = &overlap {
        if !o.shared.is_empty() {
            for task in &tasks {
                let demo = load_summary(cfg, &config_hash, &task.task_id, PresentationForm::Demo)?;
                let short =
                    load_summary(cfg, &config_hash, &task.task_id, PresentationForm::InstructionShort)?;
                let long =
                    load_summary(cfg, &config_hash, &task.task_id, PresentationForm::InstructionLong)?;
                model_id = demo.model_id.clone();
                n_layers = demo.model_layers;
                for curve in shared_head_similarity(&demo, &short, &long, &o.shared)? {
                    for (layer, value) in curve.points {
                        merged.entry((curve.pairing, layer)).or_default().push(value);
                    }
                }
            }
        }
    }
    let mut curves: BTreeMap<Pairing, SimilarityCurve> = BTreeMap::new();
    for ((pairing, layer), values) in merged {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        curves
            .entry(pairing)
            .or_insert_with(|| SimilarityCurve {
                model_id: model_id.clone(),
                pairing,
                points: Vec::new(),
            })
            .points
            .push((layer, mean));
    }

    let n_heads = selection
        .aggregates
        .values()
        .flat_map(|agg| agg.keys().map(|h| h.head + 1))
        .max()
        .unwrap_or(0);
    let n_layers = selection
        .aggregates
        .values()
        .flat_map(|agg| agg.keys().map(|h| h.layer + 1))
        .max()
        .unwrap_or(n_layers);

    let manifest = RunManifest {
        model_ids: vec![cfg.model.display().to_string()],
        task_paths: cfg.tasks.iter().map(|p| p.display().to_string()).collect(),
        regimes: cfg.regimes.iter().map(|r| r.name().to_string()).collect(),
        fv_files: fv_files_of(cfg)?,
        layers: vec![intervention_layer(cfg, n_layers.max(1))],
        seed: cfg.seed,
        config_hash: config_hash.clone(),
    };
    manifest.save(&cfg.manifest_path())?;

    let mut cie_aggregates = selection.aggregates.clone();
    cie_aggregates.remove("combined");
    let inputs = AnalysisInputs {
        manifest_hash: manifest.hash()?,
        model_id: if model_id.is_empty() {
            cfg.model.display().to_string()
        } else {
            model_id
        },
        n_layers,
        n_heads,
        reports,
        overlap,
        curves: curves.into_values().collect(),
        cie_aggregates,
        head_sets: selection.sets.clone(),
    };
    emit_tables_and_plots(&inputs, &cfg.analysis_dir())
}

fn fv_files_of(cfg: &RunConfig) -> Result<Vec<String>> {
    let dir = cfg.fv_dir();
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut files: Vec<String> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path().display().to_string())
        .collect();
    files.sort();
    Ok(files)
}

// ---------------------------------------------------------------------------
// steer
// ---------------------------------------------------------------------------

/// Applies instruction vectors extracted from the subject model to the
/// steering target (its base version, typically).
pub fn run_steer(cfg: &RunConfig) -> Result<Vec<EvalReport>> {
    let config_hash = cfg.config_hash()?;
    let target_path = cfg
        .steer_target
        .as_ref()
        .ok_or_else(|| FvError::Config("steer needs steer_target in config".into()))?;
    let gateway_b = load_gateway(target_path)?;
    let tasks = load_tasks(cfg)?;
    let layer = intervention_layer(cfg, gateway_b.profile().n_layers);
    let store = KeyedStore::new(cfg.output_root.join("steer_reports.jsonl"));
    let mut reports = Vec::new();

    for task in &tasks {
        let split = SplitSpec::split(task, task_seed(cfg, &task.task_id, "split"))?;
        let seed = task_seed(cfg, &task.task_id, "steer");
        for regime in [EvalRegime::ZeroShot, EvalRegime::Shuffled10Shot] {
            let report = evaluate(
                task,
                &split,
                &EvalSetting::baseline(regime),
                &gateway_b,
                seed,
                "steer_baseline",
                cfg.eval.max_queries,
            )?;
            store.append(
                &format!("{}|{}|steer_baseline|{}", report.model_id, task.task_id, regime.name()),
                &config_hash,
                &report,
            )?;
            reports.push(report);
        }
        for label in ["instruction_short", "instruction_long"] {
            let path = fv_path(cfg, &task.task_id, label);
            if !path.exists() {
                return Err(FvError::Store(format!(
                    "vector file {} missing; run evaluate on the source model first",
                    path.display()
                )));
            }
            let fv = FunctionVector::load(&path)?;
            let report = steer_cross_model(
                task,
                &split,
                &fv,
                &gateway_b,
                EvalRegime::ZeroShot,
                layer,
                seed,
                &format!("steer_{label}"),
                cfg.eval.max_queries,
            )?;
            store.append(
                &format!(
                    "{}|{}|steer_{label}|zero_shot",
                    report.model_id, task.task_id
                ),
                &config_hash,
                &report,
            )?;
            reports.push(report);
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_sweep_range_is_quarter_to_half_inclusive() {
        assert_eq!(joint_sweep_range(28), (7, 14));
        assert_eq!(joint_sweep_range(32), (8, 16));
        assert_eq!(joint_sweep_range(4), (1, 2));
    }
}

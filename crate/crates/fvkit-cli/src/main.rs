//! Command-line workbench orchestrating the function-vector pipeline:
//! instruction generation, corpus-cache building, activation/CIE training,
//! head selection, evaluation grids, analysis, and cross-model steering.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fvkit::config::RunConfig;
use fvkit::error::FvError;
use fvkit::pipeline;
use fvkit::toy::{prepare_toy, ToyTrainPlan};

/// Science parameters live in the config file; flags override it. Budget
/// defaults: 100 activation prompts (20 per top instruction), 25 CIE prompts
/// (5 per top instruction), J=5 top instructions with a 20-success floor,
/// |A|=20 heads, K=10 shots, 5 baselines per (instruction, method), 2^16
/// corpus-cache entries, 20 generation rounds. The intervention depth
/// defaults to round(L/3).
#[derive(Parser)]
#[command(name = "fvkit", version, about = "Function-vector extraction and steering workbench", long_about = None, after_help = HELP_FOOTER)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

const HELP_FOOTER: &str = "\
Budget defaults (override in the config file under [budgets]):
  activation_prompts   100   successful prompts per activation summary (20 x 5 instructions)
  cie_prompts          25    uninformative prompts per CIE condition (5 x 5 instructions)
  min_successes        20    successful train prompts each top instruction must reach
  top_j                5     instructions retained per task and regime
  head_count           20    |A|, heads per function vector
  shots                10    K, in-context examples per demonstration prompt
  baselines_per_spec   5     uninformative baselines per (instruction, method)
  corpus_cache_target  65536 prefixes scored into the corpus cache (2^16)
  generation_rounds    20    generator rounds per task and regime

Credentials ride in environment variables only (FVKIT_GENERATOR_API_KEY);
splits are 70/30 and the intervention depth rule is round(L/3).";

#[derive(Args)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed; every random stream derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Subject model checkpoint.
    #[arg(long, global = true)]
    model: Option<PathBuf>,

    /// Steering-target model checkpoint.
    #[arg(long, global = true)]
    steer_target: Option<PathBuf>,

    /// Task files (repeatable).
    #[arg(long = "task", global = true)]
    tasks: Vec<PathBuf>,

    /// Output root for artifacts.
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,

    /// Corpus text file for build-cache.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,

    /// Fixture directory for offline instruction generation.
    #[arg(long, global = true)]
    fixtures: Option<PathBuf>,

    /// Generator HTTP endpoint.
    #[arg(long, global = true)]
    endpoint: Option<String>,

    /// Fixed intervention layer (default: round(L/3)).
    #[arg(long, global = true)]
    layer: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or replay) candidate instructions for every task and regime.
    GenerateInstructions,
    /// Score corpus prefixes into the model-specific cache.
    BuildCache,
    /// Compute mean task-conditioned activations and CIE tensors per cell.
    Train,
    /// Aggregate stored CIE tensors and select the named head sets.
    SelectHeads,
    /// Run the evaluation grid and persist reports.
    Evaluate,
    /// Emit tables, figures, and the index page from persisted stores.
    Analyze,
    /// Apply instruction vectors from the subject model to the steer target.
    Steer,
    /// Build the bundled synthetic assets and train the toy checkpoints.
    PrepareToy {
        /// Directory receiving tasks, fixtures, corpus, and checkpoints.
        #[arg(long, default_value = "toy")]
        dir: PathBuf,
        /// Demonstration-only training steps.
        #[arg(long, default_value_t = ToyTrainPlan::default().base_steps)]
        base_steps: usize,
        /// Instruction-tuning steps.
        #[arg(long, default_value_t = ToyTrainPlan::default().tune_steps)]
        tune_steps: usize,
        /// Write assets but skip checkpoint training.
        #[arg(long)]
        skip_training: bool,
    },
}

fn build_config(overrides: &Overrides) -> Result<RunConfig, FvError> {
    let mut cfg = match &overrides.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(model) = &overrides.model {
        cfg.model = model.clone();
    }
    if let Some(target) = &overrides.steer_target {
        cfg.steer_target = Some(target.clone());
    }
    if !overrides.tasks.is_empty() {
        cfg.tasks = overrides.tasks.clone();
    }
    if let Some(root) = &overrides.output_root {
        cfg.output_root = root.clone();
    }
    if let Some(corpus) = &overrides.corpus {
        cfg.corpus = Some(corpus.clone());
    }
    if let Some(fixtures) = &overrides.fixtures {
        cfg.generator.fixture_dir = Some(fixtures.clone());
    }
    if let Some(endpoint) = &overrides.endpoint {
        cfg.generator.endpoint = Some(endpoint.clone());
    }
    if let Some(layer) = overrides.layer {
        cfg.intervention_layer = Some(layer);
    }
    Ok(cfg)
}

fn exit_code_for(err: &FvError) -> u8 {
    match err {
        FvError::Transport { .. } => 2,
        FvError::Compatibility(_) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), FvError> {
    match cli.command {
        Command::GenerateInstructions => {
            let cfg = build_config(&cli.overrides)?;
            cfg.validate()?;
            let written = pipeline::run_generate_instructions(&cfg)?;
            for path in &written {
                println!("wrote {}", path.display());
            }
            println!(
                "generated instruction sets for {} (task, regime) cells",
                written.len()
            );
            Ok(())
        }
        Command::BuildCache => {
            let cfg = build_config(&cli.overrides)?;
            cfg.validate()?;
            let path = pipeline::run_build_cache(&cfg)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Train => {
            let cfg = build_config(&cli.overrides)?;
            cfg.validate()?;
            let outcome = pipeline::run_train(&cfg)?;
            println!(
                "train: {} cells written, {} skipped (already complete)",
                outcome.cells_written, outcome.cells_skipped
            );
            if !outcome.ineligible.is_empty() {
                println!("skipped tasks:");
                for (task, reason) in &outcome.ineligible {
                    println!("  {task}: {reason}");
                }
            }
            Ok(())
        }
        Command::SelectHeads => {
            let cfg = build_config(&cli.overrides)?;
            cfg.validate()?;
            let selection = pipeline::run_select_heads(&cfg)?;
            for (label, set) in &selection.sets {
                let heads: Vec<String> = set.heads.iter().map(|h| h.to_string()).collect();
                println!("{label}: {}", heads.join(" "));
            }
            Ok(())
        }
        Command::Evaluate => {
            let cfg = build_config(&cli.overrides)?;
            cfg.validate()?;
            let reports = pipeline::run_evaluate(&cfg)?;
            for r in &reports {
                println!(
                    "{}\t{}\t{}\t{:.4} ± {:.4} (n={})",
                    r.task_id,
                    r.label,
                    r.regime.name(),
                    r.accuracy,
                    r.sem,
                    r.n_queries
                );
            }
            Ok(())
        }
        Command::Analyze => {
            let cfg = build_config(&cli.overrides)?;
            cfg.validate()?;
            let artifacts = pipeline::run_analyze(&cfg)?;
            for path in &artifacts {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Steer => {
            let cfg = build_config(&cli.overrides)?;
            cfg.validate()?;
            let reports = pipeline::run_steer(&cfg)?;
            for r in &reports {
                println!(
                    "{}\t{}\t{}\t{:.4} ± {:.4}",
                    r.task_id,
                    r.label,
                    r.regime.name(),
                    r.accuracy,
                    r.sem
                );
            }
            Ok(())
        }
        Command::PrepareToy {
            dir,
            base_steps,
            tune_steps,
            skip_training,
        } => {
            let mut plan = ToyTrainPlan::default();
            if let Some(seed) = cli.overrides.seed {
                plan.seed = seed;
            }
            plan.base_steps = base_steps;
            plan.tune_steps = tune_steps;
            let assets = if skip_training {
                fvkit::toy::build_toy_assets(&dir, plan.seed, fvkit::instructions::DEFAULT_ROUNDS)?
            } else {
                prepare_toy(&dir, &plan, fvkit::instructions::DEFAULT_ROUNDS)?
            };
            println!("tasks:");
            for t in &assets.tasks {
                println!("  {}", t.display());
            }
            println!("corpus: {}", assets.corpus.display());
            println!("fixtures: {}", assets.fixture_dir.display());
            if !skip_training {
                println!("base model: {}", assets.base_model.display());
                println!("tuned model: {}", assets.tuned_model.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

//! The evaluation grid: matched and unmatched function-vector evaluations,
//! joint and doubled interventions, layer sweeps, and cross-model steering.
//!
//! Accuracy is argmax-based first-token accuracy over test-split queries;
//! train-split queries are never evaluated. Additions targeting one layer
//! are pre-summed by the gateway, so a joint intervention at a shared layer
//! is exactly a single intervention with the vector sum.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::derive_seed;
use crate::corpus::{
    render_demo_prompt, render_zero_shot_prompt, sample_context_indices, SplitSpec, TaskDataset,
};
use crate::error::{FvError, Result};
use crate::fv::FunctionVector;
use crate::gateway::{InterventionPlan, ModelGateway};
use crate::instructions::argmax;

/// Shot count for the shuffled-demonstration evaluation regime.
pub const SHUFFLED_EVAL_SHOTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalRegime {
    ZeroShot,
    Shuffled10Shot,
}

impl EvalRegime {
    pub fn name(&self) -> &'static str {
        match self {
            EvalRegime::ZeroShot => "zero_shot",
            EvalRegime::Shuffled10Shot => "shuffled_10_shot",
        }
    }
}

/// One evaluation configuration: a regime plus the interventions to apply.
#[derive(Debug, Clone)]
pub struct EvalSetting {
    pub regime: EvalRegime,
    /// `(vector, layer)` residual additions.
    pub fv_plan: Vec<(FunctionVector, usize)>,
    /// Evaluate the bare regime, ignoring `fv_plan`.
    pub baseline_only: bool,
}

impl EvalSetting {
    pub fn baseline(regime: EvalRegime) -> Self {
        Self {
            regime,
            fv_plan: Vec::new(),
            baseline_only: true,
        }
    }

    pub fn single(regime: EvalRegime, fv: FunctionVector, layer: usize) -> Self {
        Self {
            regime,
            fv_plan: vec![(fv, layer)],
            baseline_only: false,
        }
    }
}

/// Provenance of one applied vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedFv {
    pub task_id: String,
    pub source_model_id: String,
    pub source_form: crate::fv::PresentationForm,
    pub head_provenance: crate::fv::HeadSetProvenance,
    pub layer: usize,
}

/// One evaluation's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Model evaluated on (the intervention subject).
    pub model_id: String,
    pub task_id: String,
    /// Human-readable row label, e.g. `demo_fv` or `baseline`.
    pub label: String,
    pub regime: EvalRegime,
    pub accuracy: f64,
    pub n_queries: usize,
    /// Standard error of the mean across queries.
    pub sem: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_layer_curve: Option<BTreeMap<usize, f64>>,
    pub applied: Vec<AppliedFv>,
}

fn bernoulli_sem(p: f64, n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    (p * (1.0 - p) / (n - 1) as f64).sqrt()
}

fn check_fv_compat(fv: &FunctionVector, gateway: &dyn ModelGateway) -> Result<()> {
    let profile = gateway.profile();
    if fv.d_model() != profile.d_model || fv.model_layers != profile.n_layers {
        return Err(FvError::Compatibility(format!(
            "vector from {} is {}-dimensional over {} layers; model {} is {}-dimensional over {} layers",
            fv.model_id,
            fv.d_model(),
            fv.model_layers,
            profile.model_id,
            profile.d_model,
            profile.n_layers
        )));
    }
    Ok(())
}

/// Renders the evaluation prompt for one test query under a regime.
fn render_eval_prompt(
    task: &TaskDataset,
    split: &SplitSpec,
    regime: EvalRegime,
    query_index: usize,
    shots: usize,
    seed: u64,
) -> Result<crate::corpus::PromptInstance> {
    let (x, y) = &task.pairs[query_index];
    match regime {
        EvalRegime::ZeroShot => render_zero_shot_prompt(x, y),
        EvalRegime::Shuffled10Shot => {
            let ctx_seed = derive_seed(seed, &["eval-ctx", &task.task_id, &query_index.to_string()]);
            let mut rng = ChaCha8Rng::seed_from_u64(ctx_seed);
            let ctx =
                sample_context_indices(task, &split.indices_train, query_index, shots, &mut rng)?;
            let shuffle_seed =
                derive_seed(seed, &["eval-shuffle", &task.task_id, &query_index.to_string()]);
            render_demo_prompt(task, &ctx, query_index, true, shuffle_seed)
        }
    }
}

/// Evaluates a setting over the task's test split.
pub fn evaluate(
    task: &TaskDataset,
    split: &SplitSpec,
    setting: &EvalSetting,
    gateway: &dyn ModelGateway,
    seed: u64,
    label: &str,
    max_queries: Option<usize>,
) -> Result<EvalReport> {
    let mut plan = InterventionPlan::empty();
    let mut applied = Vec::new();
    if !setting.baseline_only {
        for (fv, layer) in &setting.fv_plan {
            check_fv_compat(fv, gateway)?;
            plan = plan.with_addition(*layer, fv.vector.clone());
            applied.push(AppliedFv {
                task_id: fv.task_id.clone(),
                source_model_id: fv.model_id.clone(),
                source_form: fv.source_form,
                head_provenance: fv.head_set.provenance,
                layer: *layer,
            });
        }
    }
    let queries: Vec<usize> = match max_queries {
        Some(cap) => split.indices_test.iter().copied().take(cap).collect(),
        None => split.indices_test.clone(),
    };
    if queries.is_empty() {
        return Err(FvError::InsufficientData(format!(
            "task {} has an empty test split",
            task.task_id
        )));
    }
    let outcomes: Vec<Result<bool>> = {
        use rayon::prelude::*;
        queries
            .par_iter()
            .map(|&qi| {
                let prompt =
                    render_eval_prompt(task, split, setting.regime, qi, SHUFFLED_EVAL_SHOTS, seed)?;
                let probs = gateway.run_with_interventions(&prompt, &plan)?;
                let target = gateway.first_token_of(&prompt.target, &prompt)?;
                Ok(argmax(&probs) == target as usize)
            })
            .collect()
    };
    let mut correct = 0usize;
    for outcome in outcomes {
        if outcome? {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / queries.len() as f64;
    Ok(EvalReport {
        model_id: gateway.profile().model_id.clone(),
        task_id: task.task_id.clone(),
        label: label.to_string(),
        regime: setting.regime,
        accuracy,
        n_queries: queries.len(),
        sem: bernoulli_sem(accuracy, queries.len()),
        per_layer_curve: None,
        applied,
    })
}

/// Adds two vectors in one pass; at a shared layer the effect is exactly the
/// summed addition.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_joint(
    task: &TaskDataset,
    split: &SplitSpec,
    fv_a: &FunctionVector,
    fv_b: &FunctionVector,
    layers: (usize, usize),
    regime: EvalRegime,
    gateway: &dyn ModelGateway,
    seed: u64,
    label: &str,
    max_queries: Option<usize>,
) -> Result<EvalReport> {
    if fv_a.d_model() != fv_b.d_model() {
        return Err(FvError::Compatibility(format!(
            "joint vectors disagree on dimension: {} vs {}",
            fv_a.d_model(),
            fv_b.d_model()
        )));
    }
    let setting = EvalSetting {
        regime,
        fv_plan: vec![(fv_a.clone(), layers.0), (fv_b.clone(), layers.1)],
        baseline_only: false,
    };
    evaluate(task, split, &setting, gateway, seed, label, max_queries)
}

/// Applies a vector extracted from model A to (gateway of) model B.
///
/// Refuses unless the two architectures agree on d_model and layer count;
/// the report's `applied` rows keep both model ids.
#[allow(clippy::too_many_arguments)]
pub fn steer_cross_model(
    task: &TaskDataset,
    split: &SplitSpec,
    fv: &FunctionVector,
    gateway_b: &dyn ModelGateway,
    regime: EvalRegime,
    layer: usize,
    seed: u64,
    label: &str,
    max_queries: Option<usize>,
) -> Result<EvalReport> {
    check_fv_compat(fv, gateway_b)?;
    let setting = EvalSetting::single(regime, fv.clone(), layer);
    evaluate(task, split, &setting, gateway_b, seed, label, max_queries)
}

/// One evaluation per layer in `layer_range` (inclusive endpoints).
///
/// The report's headline accuracy is the default-depth entry when the range
/// covers it, the first layer otherwise; the full curve rides along.
#[allow(clippy::too_many_arguments)]
pub fn sweep_layers(
    task: &TaskDataset,
    split: &SplitSpec,
    fv: &FunctionVector,
    regime: EvalRegime,
    gateway: &dyn ModelGateway,
    seed: u64,
    layer_range: (usize, usize),
    label: &str,
    max_queries: Option<usize>,
) -> Result<EvalReport> {
    let n_layers = gateway.profile().n_layers;
    if layer_range.0 > layer_range.1 || layer_range.1 >= n_layers {
        return Err(FvError::Bounds(format!(
            "layer range {layer_range:?} invalid for {n_layers} layers"
        )));
    }
    let mut curve = BTreeMap::new();
    let mut headline: Option<EvalReport> = None;
    let default_layer = crate::gateway::default_intervention_layer(n_layers);
    for layer in layer_range.0..=layer_range.1 {
        let setting = EvalSetting::single(regime, fv.clone(), layer);
        let report = evaluate(task, split, &setting, gateway, seed, label, max_queries)?;
        curve.insert(layer, report.accuracy);
        let is_headline = layer == default_layer || headline.is_none();
        if is_headline {
            headline = Some(report);
        }
    }
    let mut report = headline.expect("non-empty range");
    report.per_layer_curve = Some(curve);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fv::{HeadSet, HeadSetProvenance, PresentationForm};
    use crate::gateway::MiniGateway;
    use crate::model::oracle_model;

    fn toy_task() -> TaskDataset {
        let words = ["Japan", "Tokyo", "Egypt", "Cairo", "France", "Paris", "Chile", "Santiago"];
        let pairs: Vec<(String, String)> = words
            .chunks(2)
            .map(|c| (c[0].to_string(), c[1].to_string()))
            .collect();
        TaskDataset::from_parts("countries".into(), pairs, None, "test").unwrap()
    }

    fn fv(vector: Vec<f64>, model_id: &str, layers: usize) -> FunctionVector {
        FunctionVector {
            vector,
            head_set: HeadSet::new(vec![], HeadSetProvenance::Custom).unwrap(),
            source_form: PresentationForm::Demo,
            task_id: "countries".into(),
            model_id: model_id.into(),
            model_layers: layers,
        }
    }

    #[test]
    fn zero_vector_fv_reproduces_the_baseline_exactly() {
        let gateway = MiniGateway::new(oracle_model(21));
        let task = toy_task();
        let split = SplitSpec::split(&task, 5).unwrap();
        let zero = fv(vec![0.0; 32], &gateway.profile().model_id, 2);
        let base = evaluate(
            &task,
            &split,
            &EvalSetting::baseline(EvalRegime::ZeroShot),
            &gateway,
            9,
            "baseline",
            None,
        )
        .unwrap();
        let with_zero = evaluate(
            &task,
            &split,
            &EvalSetting::single(EvalRegime::ZeroShot, zero, 1),
            &gateway,
            9,
            "zero_fv",
            None,
        )
        .unwrap();
        assert_eq!(base.accuracy, with_zero.accuracy);
        assert_eq!(base.n_queries, with_zero.n_queries);
    }

    #[test]
    fn joint_with_zero_second_vector_matches_single() {
        let gateway = MiniGateway::new(oracle_model(21));
        let task = toy_task();
        let split = SplitSpec::split(&task, 5).unwrap();
        let v: Vec<f64> = (0..32).map(|i| (i as f64) * 0.02 - 0.3).collect();
        let a = fv(v, &gateway.profile().model_id, 2);
        let zero = a.zeroed();
        let single = evaluate(
            &task,
            &split,
            &EvalSetting::single(EvalRegime::ZeroShot, a.clone(), 1),
            &gateway,
            3,
            "single",
            None,
        )
        .unwrap();
        let joint = evaluate_joint(
            &task,
            &split,
            &a,
            &zero,
            (1, 1),
            EvalRegime::ZeroShot,
            &gateway,
            3,
            "joint",
            None,
        )
        .unwrap();
        assert_eq!(single.accuracy, joint.accuracy);
    }

    #[test]
    fn joint_plan_order_commutes() {
        let gateway = MiniGateway::new(oracle_model(23));
        let task = toy_task();
        let split = SplitSpec::split(&task, 5).unwrap();
        let a = fv((0..32).map(|i| (i as f64) * 0.03).collect(), &gateway.profile().model_id, 2);
        let b = fv((0..32).map(|i| 0.7 - (i as f64) * 0.01).collect(), &gateway.profile().model_id, 2);
        let ab = evaluate_joint(&task, &split, &a, &b, (1, 1), EvalRegime::ZeroShot, &gateway, 3, "ab", None).unwrap();
        let ba = evaluate_joint(&task, &split, &b, &a, (1, 1), EvalRegime::ZeroShot, &gateway, 3, "ba", None).unwrap();
        assert_eq!(ab.accuracy, ba.accuracy);
    }

    #[test]
    fn steering_with_mismatched_dims_is_a_compatibility_error() {
        let gateway = MiniGateway::new(oracle_model(21));
        let task = toy_task();
        let split = SplitSpec::split(&task, 5).unwrap();
        let wrong = fv(vec![0.0; 16], "other-model", 2);
        let err = steer_cross_model(
            &task,
            &split,
            &wrong,
            &gateway,
            EvalRegime::ZeroShot,
            1,
            3,
            "steer",
            None,
        )
        .unwrap_err();
        match err {
            FvError::Compatibility(msg) => {
                assert!(msg.contains("16"), "names dims: {msg}");
                assert!(msg.contains("32"), "names dims: {msg}");
            }
            other => panic!("expected compatibility error, got {other:?}"),
        }
    }

    #[test]
    fn steering_same_architecture_runs_and_keeps_both_ids() {
        let a_model = oracle_model(31);
        let b_model = oracle_model(32);
        let a_id = a_model.config.model_id.clone();
        let gateway_b = MiniGateway::new(b_model);
        let task = toy_task();
        let split = SplitSpec::split(&task, 5).unwrap();
        let v = fv(vec![0.1; 32], &a_id, 2);
        let report = steer_cross_model(
            &task,
            &split,
            &v,
            &gateway_b,
            EvalRegime::ZeroShot,
            1,
            3,
            "steer",
            None,
        )
        .unwrap();
        assert_eq!(report.model_id, gateway_b.profile().model_id);
        assert_eq!(report.applied[0].source_model_id, a_id);
    }

    #[test]
    fn sweep_with_zero_vector_is_flat_at_baseline() {
        let gateway = MiniGateway::new(oracle_model(21));
        let task = toy_task();
        let split = SplitSpec::split(&task, 5).unwrap();
        let base = evaluate(
            &task,
            &split,
            &EvalSetting::baseline(EvalRegime::ZeroShot),
            &gateway,
            9,
            "baseline",
            None,
        )
        .unwrap();
        let zero = fv(vec![0.0; 32], &gateway.profile().model_id, 2);
        let sweep = sweep_layers(
            &task,
            &split,
            &zero,
            EvalRegime::ZeroShot,
            &gateway,
            9,
            (0, 1),
            "sweep",
            None,
        )
        .unwrap();
        let curve = sweep.per_layer_curve.unwrap();
        assert_eq!(curve.len(), 2);
        for (_, acc) in curve {
            assert_eq!(acc, base.accuracy);
        }
    }

    #[test]
    fn single_layer_sweep_equals_evaluate() {
        let gateway = MiniGateway::new(oracle_model(21));
        let task = toy_task();
        let split = SplitSpec::split(&task, 5).unwrap();
        let v = fv((0..32).map(|i| (i as f64) * 0.05).collect(), &gateway.profile().model_id, 2);
        let direct = evaluate(
            &task,
            &split,
            &EvalSetting::single(EvalRegime::ZeroShot, v.clone(), 0),
            &gateway,
            9,
            "direct",
            None,
        )
        .unwrap();
        let sweep = sweep_layers(
            &task,
            &split,
            &v,
            EvalRegime::ZeroShot,
            &gateway,
            9,
            (0, 0),
            "sweep",
            None,
        )
        .unwrap();
        assert_eq!(sweep.per_layer_curve.as_ref().unwrap()[&0], direct.accuracy);
    }

    #[test]
    fn shuffled_regime_prompts_are_deterministic_per_seed() {
        let task = toy_task();
        let split = SplitSpec::split(&task, 5).unwrap();
        let qi = split.indices_test[0];
        let a = render_eval_prompt(&task, &split, EvalRegime::Shuffled10Shot, qi, 2, 4).unwrap();
        let b = render_eval_prompt(&task, &split, EvalRegime::Shuffled10Shot, qi, 2, 4).unwrap();
        assert_eq!(a.rendered_text, b.rendered_text);
        let c = render_eval_prompt(&task, &split, EvalRegime::Shuffled10Shot, qi, 2, 5).unwrap();
        assert!(c.rendered_text != a.rendered_text || c.query_input == a.query_input);
    }
}

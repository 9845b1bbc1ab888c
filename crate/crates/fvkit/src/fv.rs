//! Mean task-conditioned activations, causal indirect effects, head
//! selection, and function-vector assembly.
//!
//! A head's causal indirect effect on an uninformative prompt is the change
//! in the correct answer's first-token probability when that head's
//! final-token output is patched to its task-conditioned mean. Heads are
//! ranked by their effect averaged over prompts, conditions, and eligible
//! tasks; a function vector is the elementwise sum of the selected heads'
//! means. All statistics accumulate in 64-bit arithmetic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::PromptInstance;
use crate::error::{FvError, Result};
use crate::gateway::{HeadId, InterventionPlan, ModelGateway};
use crate::instructions::argmax;

/// Heads retained per presentation form.
pub const DEFAULT_HEAD_COUNT: usize = 20;
/// Successful prompts per activation summary.
pub const DEFAULT_ACTIVATION_PROMPTS: usize = 100;
/// Uninformative prompts per CIE condition.
pub const DEFAULT_CIE_PROMPTS: usize = 25;

/// How the task was presented when activations were collected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresentationForm {
    Demo,
    InstructionShort,
    InstructionLong,
}

impl PresentationForm {
    pub fn name(&self) -> &'static str {
        match self {
            PresentationForm::Demo => "demo",
            PresentationForm::InstructionShort => "instruction_short",
            PresentationForm::InstructionLong => "instruction_long",
        }
    }

    pub fn is_instruction(&self) -> bool {
        !matches!(self, PresentationForm::Demo)
    }

    pub fn activation_source(&self) -> ActivationSource {
        if self.is_instruction() {
            ActivationSource::Instruction
        } else {
            ActivationSource::Demo
        }
    }
}

/// Demo-elicited or instruction-elicited activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationSource {
    Demo,
    Instruction,
}

/// Uninformative-prompt condition a CIE tensor was computed under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineCondition {
    ShuffledDemo,
    Equiprobable,
    RealText,
    OtherTask,
}

impl BaselineCondition {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineCondition::ShuffledDemo => "shuffled_demo",
            BaselineCondition::Equiprobable => "equiprobable",
            BaselineCondition::RealText => "real_text",
            BaselineCondition::OtherTask => "other_task",
        }
    }
}

/// Per-head mean task-conditioned activations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActivationSummary {
    pub task_id: String,
    pub model_id: String,
    pub model_layers: usize,
    pub form: PresentationForm,
    pub means: BTreeMap<HeadId, Vec<f64>>,
    pub prompt_count: usize,
}

/// Per-head causal indirect effects averaged over one condition's prompts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CieTensor {
    pub task_id: String,
    pub model_id: String,
    pub form: PresentationForm,
    pub condition: BaselineCondition,
    pub scores: BTreeMap<HeadId, f64>,
    pub prompts_used: usize,
}

/// Where a head set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSetProvenance {
    Demo,
    Instruction,
    SharedAnalysis,
    LeastImportant,
    Bottom,
    Custom,
}

impl HeadSetProvenance {
    pub fn name(&self) -> &'static str {
        match self {
            HeadSetProvenance::Demo => "demo",
            HeadSetProvenance::Instruction => "instruction",
            HeadSetProvenance::SharedAnalysis => "shared_analysis",
            HeadSetProvenance::LeastImportant => "least_important",
            HeadSetProvenance::Bottom => "bottom",
            HeadSetProvenance::Custom => "custom",
        }
    }
}

/// An ordered, duplicate-free set of attention heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSet {
    pub heads: Vec<HeadId>,
    pub provenance: HeadSetProvenance,
}

impl HeadSet {
    pub fn new(heads: Vec<HeadId>, provenance: HeadSetProvenance) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for h in &heads {
            if !seen.insert(*h) {
                return Err(FvError::Bounds(format!("duplicate head {h} in head set")));
            }
        }
        Ok(Self { heads, provenance })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn contains(&self, head: &HeadId) -> bool {
        self.heads.contains(head)
    }
}

/// A residual-dimension task vector plus full provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionVector {
    pub vector: Vec<f64>,
    pub head_set: HeadSet,
    /// Which presentation's activations the vector was read from.
    pub source_form: PresentationForm,
    pub task_id: String,
    pub model_id: String,
    pub model_layers: usize,
}

impl FunctionVector {
    pub fn activation_source(&self) -> ActivationSource {
        self.source_form.activation_source()
    }

    pub fn d_model(&self) -> usize {
        self.vector.len()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw)
            .map_err(|e| FvError::Store(format!("bad FV file {}: {e}", path.display())))
    }

    /// A zero vector carrying the same provenance (control interventions).
    pub fn zeroed(&self) -> Self {
        let mut z = self.clone();
        z.vector = vec![0.0; self.vector.len()];
        z
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Mean final-token head outputs over verified-successful prompts.
///
/// Every prompt is re-verified (argmax next token must equal the target's
/// first token); a failure is a contract violation by the caller.
pub fn compute_mean_activations(
    prompts: &[PromptInstance],
    gateway: &dyn ModelGateway,
    task_id: &str,
    form: PresentationForm,
) -> Result<ActivationSummary> {
    if prompts.is_empty() {
        return Err(FvError::InsufficientData(
            "no prompts for mean activations".into(),
        ));
    }
    let profile = gateway.profile();
    let captures: Vec<Result<BTreeMap<HeadId, crate::gateway::HeadOutput>>> = {
        use rayon::prelude::*;
        prompts
            .par_iter()
            .map(|prompt| {
                let capture = gateway.capture_head_outputs(prompt)?;
                let target = gateway.first_token_of(&prompt.target, prompt)?;
                if argmax(&capture.next_token_probs) != target as usize {
                    return Err(FvError::TaskIneligible {
                        task_id: task_id.to_string(),
                        detail: format!(
                            "prompt with query {:?} was not verified successful",
                            prompt.query_input
                        ),
                    });
                }
                Ok(capture.outputs)
            })
            .collect()
    };
    let mut sums: BTreeMap<HeadId, Vec<f64>> = BTreeMap::new();
    for capture in captures {
        for (id, output) in capture? {
            let slot = sums
                .entry(id)
                .or_insert_with(|| vec![0.0; profile.d_model]);
            for (s, v) in slot.iter_mut().zip(&output.vector) {
                *s += v;
            }
        }
    }
    let n = prompts.len() as f64;
    for v in sums.values_mut() {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    Ok(ActivationSummary {
        task_id: task_id.to_string(),
        model_id: profile.model_id.clone(),
        model_layers: profile.n_layers,
        form,
        means: sums,
        prompt_count: prompts.len(),
    })
}

/// Patched-minus-unpatched probability of the target's first token when one
/// head's final-token output is set to its task-conditioned mean.
pub fn compute_cie(
    head: HeadId,
    baseline_prompt: &PromptInstance,
    summary: &ActivationSummary,
    gateway: &dyn ModelGateway,
) -> Result<f64> {
    let mean = summary.means.get(&head).ok_or(FvError::MissingHeadMean {
        layer: head.layer,
        head: head.head,
    })?;
    let target = gateway.first_token_of(&baseline_prompt.target, baseline_prompt)? as usize;
    let base = gateway.run_with_interventions(baseline_prompt, &InterventionPlan::empty())?;
    let plan = InterventionPlan::empty().with_head_patch(head, mean.clone());
    let patched = gateway.run_with_interventions(baseline_prompt, &plan)?;
    Ok(patched[target] - base[target])
}

/// CIE for every head of the model over one set of baseline prompts,
/// averaged per head. One unpatched pass per prompt is shared across heads.
pub fn compute_cie_tensor(
    prompts: &[PromptInstance],
    summary: &ActivationSummary,
    gateway: &dyn ModelGateway,
    condition: BaselineCondition,
) -> Result<CieTensor> {
    if prompts.is_empty() {
        return Err(FvError::InsufficientData("no CIE prompts".into()));
    }
    let profile = gateway.profile();
    // (head, prompt) cells are independent; parallelize per prompt and
    // reduce the per-prompt maps in prompt order, so the result is
    // schedule-independent.
    let per_prompt: Vec<Result<BTreeMap<HeadId, f64>>> = {
        use rayon::prelude::*;
        prompts
            .par_iter()
            .map(|prompt| {
                let target = gateway.first_token_of(&prompt.target, prompt)? as usize;
                let base =
                    gateway.run_with_interventions(prompt, &InterventionPlan::empty())?;
                let base_p = base[target];
                let mut deltas = BTreeMap::new();
                for layer in 0..profile.n_layers {
                    for head in 0..profile.n_heads_per_layer {
                        let id = HeadId::new(layer, head);
                        let mean = summary.means.get(&id).ok_or(FvError::MissingHeadMean {
                            layer,
                            head,
                        })?;
                        let plan = InterventionPlan::empty().with_head_patch(id, mean.clone());
                        let patched = gateway.run_with_interventions(prompt, &plan)?;
                        deltas.insert(id, patched[target] - base_p);
                    }
                }
                Ok(deltas)
            })
            .collect()
    };
    let mut scores: BTreeMap<HeadId, f64> = BTreeMap::new();
    for deltas in per_prompt {
        for (id, delta) in deltas? {
            *scores.entry(id).or_insert(0.0) += delta;
        }
    }
    let n = prompts.len() as f64;
    for v in scores.values_mut() {
        *v /= n;
    }
    Ok(CieTensor {
        task_id: summary.task_id.clone(),
        model_id: summary.model_id.clone(),
        form: summary.form,
        condition,
        scores,
        prompts_used: prompts.len(),
    })
}

/// Mean CIE per head: cells averaged within each task, tasks averaged
/// equally. Instruction aggregation passes the 6 cells (2 lengths x 3
/// baselines) per task; the demo form passes its single cell.
pub fn aggregate_cie(records: &[&CieTensor]) -> Result<BTreeMap<HeadId, f64>> {
    if records.is_empty() {
        return Err(FvError::AggregationEmpty);
    }
    let mut by_task: BTreeMap<&str, Vec<&CieTensor>> = BTreeMap::new();
    for r in records {
        by_task.entry(r.task_id.as_str()).or_default().push(r);
    }
    let mut totals: BTreeMap<HeadId, f64> = BTreeMap::new();
    let n_tasks = by_task.len() as f64;
    for cells in by_task.values() {
        let mut task_mean: BTreeMap<HeadId, f64> = BTreeMap::new();
        for cell in cells {
            for (head, score) in &cell.scores {
                *task_mean.entry(*head).or_insert(0.0) += score / cells.len() as f64;
            }
        }
        for (head, score) in task_mean {
            *totals.entry(head).or_insert(0.0) += score / n_tasks;
        }
    }
    Ok(totals)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Largest scores.
    Top,
    /// Smallest absolute scores.
    LeastImportantAbs,
    /// Most negative scores (the smallest values when all are positive).
    Bottom,
}

/// Selects `k` heads from an aggregate score map; ties break on ascending
/// (layer, head), making selection a pure function of the map.
pub fn select_heads(
    aggregate: &BTreeMap<HeadId, f64>,
    k: usize,
    mode: SelectionMode,
    provenance: HeadSetProvenance,
) -> Result<HeadSet> {
    if k > aggregate.len() {
        return Err(FvError::Bounds(format!(
            "k={k} exceeds the {} scored heads",
            aggregate.len()
        )));
    }
    let mut ranked: Vec<(HeadId, f64)> = aggregate.iter().map(|(h, s)| (*h, *s)).collect();
    ranked.sort_by(|a, b| {
        let ord = match mode {
            SelectionMode::Top => b.1.partial_cmp(&a.1),
            SelectionMode::LeastImportantAbs => a.1.abs().partial_cmp(&b.1.abs()),
            SelectionMode::Bottom => a.1.partial_cmp(&b.1),
        };
        ord.unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
    });
    ranked.truncate(k);
    HeadSet::new(ranked.into_iter().map(|(h, _)| h).collect(), provenance)
}

/// Elementwise sum of the selected heads' means.
///
/// Pairing a head set of one provenance with a summary of the other
/// presentation form yields the heterogeneous ("incongruent") vectors.
pub fn build_fv(head_set: &HeadSet, summary: &ActivationSummary) -> Result<FunctionVector> {
    let d_model = summary
        .means
        .values()
        .next()
        .map(Vec::len)
        .ok_or_else(|| FvError::InsufficientData("empty activation summary".into()))?;
    let mut vector = vec![0.0f64; d_model];
    for head in &head_set.heads {
        let mean = summary.means.get(head).ok_or(FvError::MissingHeadMean {
            layer: head.layer,
            head: head.head,
        })?;
        for (v, m) in vector.iter_mut().zip(mean) {
            *v += m;
        }
    }
    Ok(FunctionVector {
        vector,
        head_set: head_set.clone(),
        source_form: summary.form,
        task_id: summary.task_id.clone(),
        model_id: summary.model_id.clone(),
        model_layers: summary.model_layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn summary_from(means: Vec<(HeadId, Vec<f64>)>) -> ActivationSummary {
        ActivationSummary {
            task_id: "t".into(),
            model_id: "m".into(),
            model_layers: 2,
            form: PresentationForm::Demo,
            means: means.into_iter().collect(),
            prompt_count: 1,
        }
    }

    fn tensor(task: &str, scores: Vec<(HeadId, f64)>, condition: BaselineCondition) -> CieTensor {
        CieTensor {
            task_id: task.into(),
            model_id: "m".into(),
            form: PresentationForm::InstructionShort,
            condition,
            scores: scores.into_iter().collect(),
            prompts_used: 25,
        }
    }

    #[test]
    fn aggregate_of_a_single_tensor_is_identity() {
        let t = tensor(
            "a",
            vec![(HeadId::new(0, 0), 0.25), (HeadId::new(1, 2), -0.5)],
            BaselineCondition::Equiprobable,
        );
        let agg = aggregate_cie(&[&t]).unwrap();
        assert_eq!(agg[&HeadId::new(0, 0)], 0.25);
        assert_eq!(agg[&HeadId::new(1, 2)], -0.5);
    }

    #[test]
    fn aggregate_means_across_tasks_equally() {
        let a = tensor("a", vec![(HeadId::new(0, 0), 0.2)], BaselineCondition::RealText);
        let b = tensor("b", vec![(HeadId::new(0, 0), 0.4)], BaselineCondition::RealText);
        let agg = aggregate_cie(&[&a, &b]).unwrap();
        assert!((agg[&HeadId::new(0, 0)] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn aggregate_six_cell_grid_matches_brute_force() {
        let head = HeadId::new(0, 1);
        let conditions = [
            BaselineCondition::Equiprobable,
            BaselineCondition::RealText,
            BaselineCondition::OtherTask,
        ];
        let mut records = Vec::new();
        let mut value = 0.05;
        let mut brute = Vec::new();
        for _regime in 0..2 {
            for c in conditions {
                records.push(tensor("only", vec![(head, value)], c));
                brute.push(value);
                value += 0.03;
            }
        }
        let refs: Vec<&CieTensor> = records.iter().collect();
        let agg = aggregate_cie(&refs).unwrap();
        let expected: f64 = brute.iter().sum::<f64>() / brute.len() as f64;
        assert!((agg[&head] - expected).abs() < 1e-12);
    }

    #[test]
    fn aggregate_of_nothing_is_an_error() {
        assert!(matches!(aggregate_cie(&[]), Err(FvError::AggregationEmpty)));
    }

    #[test]
    fn select_heads_top_matches_argsort() {
        let scores: BTreeMap<HeadId, f64> = [
            (HeadId::new(0, 0), 0.5),
            (HeadId::new(0, 1), 0.1),
            (HeadId::new(1, 0), 0.3),
        ]
        .into_iter()
        .collect();
        let set = select_heads(&scores, 2, SelectionMode::Top, HeadSetProvenance::Demo).unwrap();
        assert_eq!(set.heads, vec![HeadId::new(0, 0), HeadId::new(1, 0)]);
    }

    #[test]
    fn select_heads_all_and_bounds() {
        let scores: BTreeMap<HeadId, f64> = (0..4)
            .map(|h| (HeadId::new(0, h), h as f64))
            .collect();
        let all = select_heads(&scores, 4, SelectionMode::Top, HeadSetProvenance::Demo).unwrap();
        assert_eq!(all.len(), 4);
        assert!(select_heads(&scores, 5, SelectionMode::Top, HeadSetProvenance::Demo).is_err());
    }

    #[test]
    fn bottom_mode_on_all_positive_scores_takes_the_smallest() {
        let scores: BTreeMap<HeadId, f64> = [
            (HeadId::new(0, 0), 0.9),
            (HeadId::new(0, 1), 0.2),
            (HeadId::new(1, 0), 0.4),
        ]
        .into_iter()
        .collect();
        let set =
            select_heads(&scores, 2, SelectionMode::Bottom, HeadSetProvenance::Bottom).unwrap();
        assert_eq!(set.heads, vec![HeadId::new(0, 1), HeadId::new(1, 0)]);
    }

    #[test]
    fn least_important_mode_uses_absolute_scores() {
        let scores: BTreeMap<HeadId, f64> = [
            (HeadId::new(0, 0), -0.9),
            (HeadId::new(0, 1), 0.05),
            (HeadId::new(1, 0), -0.01),
        ]
        .into_iter()
        .collect();
        let set = select_heads(
            &scores,
            2,
            SelectionMode::LeastImportantAbs,
            HeadSetProvenance::LeastImportant,
        )
        .unwrap();
        assert_eq!(set.heads, vec![HeadId::new(1, 0), HeadId::new(0, 1)]);
    }

    #[test]
    fn selection_ignores_input_order() {
        let mut scores: Vec<(HeadId, f64)> = (0..10)
            .map(|h| (HeadId::new(h % 3, h), (h as f64) * 0.1 - 0.4))
            .collect();
        let forward: BTreeMap<HeadId, f64> = scores.iter().copied().collect();
        scores.reverse();
        let reversed: BTreeMap<HeadId, f64> = scores.into_iter().collect();
        for mode in [
            SelectionMode::Top,
            SelectionMode::Bottom,
            SelectionMode::LeastImportantAbs,
        ] {
            let a = select_heads(&forward, 4, mode, HeadSetProvenance::Custom).unwrap();
            let b = select_heads(&reversed, 4, mode, HeadSetProvenance::Custom).unwrap();
            assert_eq!(a.heads, b.heads);
        }
    }

    #[test]
    fn empty_head_set_builds_the_zero_vector() {
        let summary = summary_from(vec![(HeadId::new(0, 0), vec![1.0, 2.0])]);
        let set = HeadSet::new(vec![], HeadSetProvenance::Custom).unwrap();
        let fv = build_fv(&set, &summary).unwrap();
        assert_eq!(fv.vector, vec![0.0, 0.0]);
    }

    #[test]
    fn singleton_head_set_equals_that_mean() {
        let summary = summary_from(vec![
            (HeadId::new(0, 0), vec![1.0, -2.0]),
            (HeadId::new(0, 1), vec![3.0, 4.0]),
        ]);
        let set = HeadSet::new(vec![HeadId::new(0, 1)], HeadSetProvenance::Demo).unwrap();
        let fv = build_fv(&set, &summary).unwrap();
        assert_eq!(fv.vector, vec![3.0, 4.0]);
    }

    #[test]
    fn missing_head_mean_is_a_completeness_error() {
        let summary = summary_from(vec![(HeadId::new(0, 0), vec![1.0])]);
        let set = HeadSet::new(vec![HeadId::new(1, 1)], HeadSetProvenance::Demo).unwrap();
        assert!(matches!(
            build_fv(&set, &summary),
            Err(FvError::MissingHeadMean { layer: 1, head: 1 })
        ));
    }

    #[test]
    fn duplicate_heads_are_rejected() {
        assert!(HeadSet::new(
            vec![HeadId::new(0, 0), HeadId::new(0, 0)],
            HeadSetProvenance::Custom
        )
        .is_err());
    }

    proptest! {
        /// FV(S1 ∪ S2) = FV(S1) + FV(S2) for disjoint head sets.
        #[test]
        fn build_fv_is_linear_over_disjoint_partitions(split_mask in 0u32..256, seed in 0u64..100) {
            let d = 6;
            let heads: Vec<HeadId> = (0..8).map(|h| HeadId::new(h / 4, h % 4)).collect();
            let means: Vec<(HeadId, Vec<f64>)> = heads
                .iter()
                .enumerate()
                .map(|(i, h)| {
                    let v: Vec<f64> = (0..d)
                        .map(|j| ((seed as f64) + (i * d + j) as f64 * 0.37).sin())
                        .collect();
                    (*h, v)
                })
                .collect();
            let summary = summary_from(means);
            let s1: Vec<HeadId> = heads
                .iter()
                .enumerate()
                .filter(|(i, _)| split_mask & (1 << i) != 0)
                .map(|(_, h)| *h)
                .collect();
            let s2: Vec<HeadId> = heads
                .iter()
                .enumerate()
                .filter(|(i, _)| split_mask & (1 << i) == 0)
                .map(|(_, h)| *h)
                .collect();
            let union = HeadSet::new(heads.clone(), HeadSetProvenance::Custom).unwrap();
            let a = build_fv(&HeadSet::new(s1, HeadSetProvenance::Custom).unwrap(), &summary).unwrap();
            let b = build_fv(&HeadSet::new(s2, HeadSetProvenance::Custom).unwrap(), &summary).unwrap();
            let u = build_fv(&union, &summary).unwrap();
            for j in 0..d {
                prop_assert!((u.vector[j] - (a.vector[j] + b.vector[j])).abs() < 1e-12);
            }
        }
    }
}

//! Word-pair task datasets, train/test splits, and prompt rendering.
//!
//! Tasks are JSON files of `(input, output)` word pairs. Prompts follow the
//! fixed `Q:`/`A:` template; demonstration prompts stack K in-context pairs,
//! instruction prompts prepend a single instruction line, and shuffled
//! variants permute the in-context labels while leaving the query target
//! untouched.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FvError, Result};

/// The answer cue every rendered prompt ends with.
pub const ANSWER_CUE: &str = "A: ";

/// Default shot count for demonstration prompts.
pub const DEFAULT_SHOTS: usize = 10;

/// Default train fraction for splits.
pub const TRAIN_FRACTION_PERCENT: usize = 70;

// ---------------------------------------------------------------------------
// Task datasets
// ---------------------------------------------------------------------------

/// Whether a task's outputs range over an open vocabulary or a label set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskCategory {
    OpenGeneration,
    Classification,
}

/// A supervised word-pair dataset for one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: String,
    pub pairs: Vec<(String, String)>,
    pub category: TaskCategory,
    /// Present for classification tasks; covers every output.
    pub label_set: Option<BTreeSet<String>>,
}

/// On-disk task schema: `{"task_id", "pairs": [[in, out], ...], "labels"?}`.
#[derive(Debug, Deserialize, Serialize)]
struct TaskFile {
    task_id: String,
    pairs: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

impl TaskDataset {
    /// Loads and validates a task file.
    ///
    /// Category is inferred from the presence of `labels`. Duplicate inputs
    /// are allowed but logged; empty pair lists and labels that fail to
    /// cover an output are format errors naming the offending record.
    pub fn load(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let raw = std::fs::read_to_string(path)?;
        let file: TaskFile = serde_json::from_str(&raw).map_err(|e| FvError::TaskFormat {
            path: display.clone(),
            detail: e.to_string(),
        })?;
        Self::from_parts(file.task_id, file.pairs, file.labels, &display)
    }

    /// Builds a dataset from in-memory parts, applying the same validation
    /// as [`TaskDataset::load`].
    pub fn from_parts(
        task_id: String,
        pairs: Vec<(String, String)>,
        labels: Option<Vec<String>>,
        origin: &str,
    ) -> Result<Self> {
        if task_id.is_empty() {
            return Err(FvError::TaskFormat {
                path: origin.to_string(),
                detail: "empty task_id".into(),
            });
        }
        if pairs.is_empty() {
            return Err(FvError::TaskFormat {
                path: origin.to_string(),
                detail: "empty pair list".into(),
            });
        }
        for (i, (input, output)) in pairs.iter().enumerate() {
            if input.is_empty() || output.is_empty() {
                return Err(FvError::TaskFormat {
                    path: origin.to_string(),
                    detail: format!("pair {i} has an empty side"),
                });
            }
        }
        let mut seen = BTreeSet::new();
        for (input, _) in &pairs {
            if !seen.insert(input.clone()) {
                log::warn!("task {task_id}: duplicate input {input:?}");
            }
        }
        let label_set = match labels {
            Some(labels) => {
                let set: BTreeSet<String> = labels.into_iter().collect();
                for (i, (_, output)) in pairs.iter().enumerate() {
                    if !set.contains(output) {
                        return Err(FvError::TaskFormat {
                            path: origin.to_string(),
                            detail: format!("pair {i} output {output:?} not in label set"),
                        });
                    }
                }
                Some(set)
            }
            None => None,
        };
        let category = if label_set.is_some() {
            TaskCategory::Classification
        } else {
            TaskCategory::OpenGeneration
        };
        Ok(Self {
            task_id,
            pairs,
            category,
            label_set,
        })
    }

    /// Writes the dataset back out in the task file schema.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = TaskFile {
            task_id: self.task_id.clone(),
            pairs: self.pairs.clone(),
            labels: self
                .label_set
                .as_ref()
                .map(|s| s.iter().cloned().collect()),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Chance accuracy floor used by the eligibility rule: `1/|labels|` for
    /// classification, `open_generation_chance` otherwise.
    pub fn chance_level(&self, open_generation_chance: f64) -> f64 {
        match &self.label_set {
            Some(labels) if !labels.is_empty() => 1.0 / labels.len() as f64,
            _ => open_generation_chance,
        }
    }
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// A deterministic 70/30 index partition of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub indices_train: Vec<usize>,
    pub indices_test: Vec<usize>,
}

impl SplitSpec {
    /// Splits `dataset` 70/30, deterministically under `seed`.
    ///
    /// The train size is `round(0.7 * n)`; indices are shuffled with a
    /// seed-derived ChaCha stream so the partition is byte-identical across
    /// runs and platforms.
    pub fn split(dataset: &TaskDataset, seed: u64) -> Result<Self> {
        let n = dataset.len();
        if n < 2 {
            return Err(FvError::InsufficientData(format!(
                "task {} has {n} pairs; need at least 2 to split",
                dataset.task_id
            )));
        }
        let mut indices: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
        // round(0.7 * n) in integer arithmetic
        let n_train = ((TRAIN_FRACTION_PERCENT * n + 50) / 100).clamp(1, n - 1);
        let mut indices_train = indices[..n_train].to_vec();
        let mut indices_test = indices[n_train..].to_vec();
        indices_train.sort_unstable();
        indices_test.sort_unstable();
        Ok(Self {
            seed,
            indices_train,
            indices_test,
        })
    }
}

// ---------------------------------------------------------------------------
// Prompt rendering
// ---------------------------------------------------------------------------

/// How a prompt presents its task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptForm {
    DemoKShot,
    DemoShuffled,
    Instruction,
    ZeroShot,
    BaselineInstruction,
}

/// A fully rendered prompt with its query, target, and provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub rendered_text: String,
    pub query_input: String,
    pub target: String,
    pub form: PromptForm,
    /// Shot count; 0 for instruction and zero-shot forms.
    pub k: usize,
    /// Identifier of the instruction or baseline spec used, when any.
    pub source_spec_id: Option<String>,
}

impl PromptInstance {
    fn validated(self) -> Result<Self> {
        if !self.rendered_text.ends_with(ANSWER_CUE) {
            return Err(FvError::InvalidPrompt(format!(
                "prompt does not end with the answer cue {ANSWER_CUE:?}"
            )));
        }
        if self.rendered_text.contains(&self.target) {
            return Err(FvError::InvalidPrompt(format!(
                "prompt leaks its target {:?}",
                self.target
            )));
        }
        Ok(self)
    }
}

fn qa_block(input: &str, output: &str) -> String {
    format!("Q: {input}\nA: {output}")
}

fn query_block(input: &str) -> String {
    format!("Q: {input}\n{ANSWER_CUE}")
}

/// Renders a K-shot demonstration prompt.
///
/// The template is `Q: x\nA: y` blocks joined by blank lines, ending with the
/// query block and the bare answer cue. With `shuffle_labels`, the in-context
/// labels are permuted uniformly at random under `seed` (the multiset of
/// labels is preserved and the query target is never altered).
pub fn render_demo_prompt(
    dataset: &TaskDataset,
    context_indices: &[usize],
    query_index: usize,
    shuffle_labels: bool,
    seed: u64,
) -> Result<PromptInstance> {
    if context_indices.contains(&query_index) {
        return Err(FvError::PromptOverlap { query: query_index });
    }
    let bounds = context_indices.iter().chain(std::iter::once(&query_index));
    for &i in bounds {
        if i >= dataset.len() {
            return Err(FvError::Bounds(format!(
                "index {i} out of range for task {} ({} pairs)",
                dataset.task_id,
                dataset.len()
            )));
        }
    }
    let k = context_indices.len();
    let mut labels: Vec<&str> = context_indices
        .iter()
        .map(|&i| dataset.pairs[i].1.as_str())
        .collect();
    if shuffle_labels {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        labels.shuffle(&mut rng);
    }
    let (query_input, target) = &dataset.pairs[query_index];
    let mut blocks: Vec<String> = context_indices
        .iter()
        .zip(&labels)
        .map(|(&i, label)| qa_block(&dataset.pairs[i].0, label))
        .collect();
    blocks.push(query_block(query_input));
    let form = if shuffle_labels {
        PromptForm::DemoShuffled
    } else {
        PromptForm::DemoKShot
    };
    PromptInstance {
        rendered_text: blocks.join("\n\n"),
        query_input: query_input.clone(),
        target: target.clone(),
        form,
        k,
        source_spec_id: None,
    }
    .validated()
}

/// Renders an instruction prompt: the instruction line, then the query block.
pub fn render_instruction_prompt(
    instruction_text: &str,
    query_input: &str,
    target: &str,
    form: PromptForm,
    source_spec_id: Option<String>,
) -> Result<PromptInstance> {
    if instruction_text.is_empty() {
        return Err(FvError::InvalidPrompt("empty instruction text".into()));
    }
    PromptInstance {
        rendered_text: format!("{instruction_text}\n{}", query_block(query_input)),
        query_input: query_input.to_string(),
        target: target.to_string(),
        form,
        k: 0,
        source_spec_id,
    }
    .validated()
}

/// Renders a bare zero-shot prompt: the query block alone.
pub fn render_zero_shot_prompt(query_input: &str, target: &str) -> Result<PromptInstance> {
    PromptInstance {
        rendered_text: query_block(query_input),
        query_input: query_input.to_string(),
        target: target.to_string(),
        form: PromptForm::ZeroShot,
        k: 0,
        source_spec_id: None,
    }
    .validated()
}

/// Samples `k` context indices from `pool`, excluding `query_index` and any
/// pair whose output equals the query target (so the prompt never leaks it).
pub fn sample_context_indices(
    dataset: &TaskDataset,
    pool: &[usize],
    query_index: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let target = &dataset.pairs[query_index].1;
    let mut eligible: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&i| i != query_index && &dataset.pairs[i].1 != target)
        .collect();
    if eligible.len() < k {
        return Err(FvError::InsufficientData(format!(
            "task {}: only {} eligible context pairs for k={k}",
            dataset.task_id,
            eligible.len()
        )));
    }
    eligible.shuffle(rng);
    eligible.truncate(k);
    Ok(eligible)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn toy_dataset(n: usize) -> TaskDataset {
        let pairs = (0..n)
            .map(|i| (format!("in{i}"), format!("out{i}")))
            .collect();
        TaskDataset::from_parts("toy".into(), pairs, None, "test").unwrap()
    }

    #[test]
    fn load_infers_category_from_labels() {
        let dir = tempfile::tempdir().unwrap();
        let open = dir.path().join("country-capital.json");
        std::fs::write(
            &open,
            r#"{"task_id":"country-capital","pairs":[["France","Paris"]]}"#,
        )
        .unwrap();
        let task = TaskDataset::load(&open).unwrap();
        assert_eq!(task.category, TaskCategory::OpenGeneration);
        assert_eq!(task.pairs[0], ("France".into(), "Paris".into()));

        let cls = dir.path().join("sentiment.json");
        std::fs::write(
            &cls,
            r#"{"task_id":"sentiment","pairs":[["good","positive"],["bad","negative"]],"labels":["positive","negative"]}"#,
        )
        .unwrap();
        let task = TaskDataset::load(&cls).unwrap();
        assert_eq!(task.category, TaskCategory::Classification);
        assert_eq!(task.chance_level(0.005), 0.5);
    }

    #[test]
    fn empty_pair_list_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.json");
        std::fs::write(&path, r#"{"task_id":"empty","pairs":[]}"#).unwrap();
        assert!(matches!(
            TaskDataset::load(&path),
            Err(FvError::TaskFormat { .. })
        ));
    }

    #[test]
    fn label_set_must_cover_outputs() {
        let err = TaskDataset::from_parts(
            "t".into(),
            vec![("a".into(), "x".into())],
            Some(vec!["y".into()]),
            "test",
        )
        .unwrap_err();
        assert!(matches!(err, FvError::TaskFormat { .. }));
    }

    #[test]
    fn split_is_seventy_thirty_and_deterministic() {
        let ds = toy_dataset(10);
        let a = SplitSpec::split(&ds, 7).unwrap();
        let b = SplitSpec::split(&ds, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.indices_train.len(), 7);
        assert_eq!(a.indices_test.len(), 3);
    }

    #[test]
    fn split_partitions_all_indices() {
        let ds = toy_dataset(100);
        let s = SplitSpec::split(&ds, 3).unwrap();
        assert_eq!(s.indices_train.len(), 70);
        assert_eq!(s.indices_test.len(), 30);
        let mut union: BTreeSet<usize> = s.indices_train.iter().copied().collect();
        for &i in &s.indices_test {
            assert!(union.insert(i), "index {i} in both splits");
        }
        assert_eq!(union, (0..100).collect::<BTreeSet<_>>());
    }

    #[test]
    fn split_rejects_tiny_datasets() {
        let ds = toy_dataset(1);
        assert!(matches!(
            SplitSpec::split(&ds, 0),
            Err(FvError::InsufficientData(_))
        ));
    }

    #[test]
    fn one_shot_demo_prompt_matches_template() {
        let pairs = vec![
            ("Japan".to_string(), "Tokyo".to_string()),
            ("Egypt".to_string(), "Cairo".to_string()),
        ];
        let ds = TaskDataset::from_parts("country-capital".into(), pairs, None, "test").unwrap();
        let p = render_demo_prompt(&ds, &[0], 1, false, 0).unwrap();
        assert_eq!(p.rendered_text, "Q: Japan\nA: Tokyo\n\nQ: Egypt\nA: ");
        assert_eq!(p.form, PromptForm::DemoKShot);
        assert_eq!(p.k, 1);
        assert_eq!(p.target, "Cairo");
    }

    #[test]
    fn query_in_context_is_an_overlap_error() {
        let ds = toy_dataset(5);
        assert!(matches!(
            render_demo_prompt(&ds, &[0, 1, 2], 2, false, 0),
            Err(FvError::PromptOverlap { query: 2 })
        ));
    }

    #[test]
    fn shuffling_a_one_shot_prompt_is_a_fixed_point() {
        let ds = toy_dataset(4);
        for seed in 0..20 {
            let plain = render_demo_prompt(&ds, &[1], 3, false, seed).unwrap();
            let shuffled = render_demo_prompt(&ds, &[1], 3, true, seed).unwrap();
            assert_eq!(plain.rendered_text, shuffled.rendered_text);
            assert_eq!(shuffled.form, PromptForm::DemoShuffled);
        }
    }

    #[test]
    fn instruction_prompt_matches_template() {
        let p = render_instruction_prompt(
            "Map a country to its capital city:",
            "Egypt",
            "Cairo",
            PromptForm::Instruction,
            Some("spec-1".into()),
        )
        .unwrap();
        assert_eq!(
            p.rendered_text,
            "Map a country to its capital city:\nQ: Egypt\nA: "
        );
        assert_eq!(p.k, 0);
    }

    #[test]
    fn empty_instruction_is_rejected() {
        assert!(render_instruction_prompt("", "Egypt", "Cairo", PromptForm::Instruction, None)
            .is_err());
    }

    #[test]
    fn zero_shot_prompt_is_the_bare_query_block() {
        let p = render_zero_shot_prompt("Egypt", "Cairo").unwrap();
        assert_eq!(p.rendered_text, "Q: Egypt\nA: ");
        assert_eq!(p.form, PromptForm::ZeroShot);
    }

    #[test]
    fn context_sampling_avoids_query_and_target_leaks() {
        let mut pairs: Vec<(String, String)> = (0..6)
            .map(|i| (format!("in{i}"), format!("out{i}")))
            .collect();
        pairs.push(("in6".into(), "out0".into())); // duplicate output of pair 0
        let ds = TaskDataset::from_parts("t".into(), pairs, None, "test").unwrap();
        let pool: Vec<usize> = (0..ds.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let ctx = sample_context_indices(&ds, &pool, 0, 4, &mut rng).unwrap();
            assert!(!ctx.contains(&0));
            assert!(!ctx.contains(&6), "pair 6 shares pair 0's output");
        }
    }

    proptest! {
        #[test]
        fn shuffle_preserves_label_multiset(seed in 0u64..500) {
            let ds = toy_dataset(12);
            let ctx: Vec<usize> = (0..10).collect();
            let p = render_demo_prompt(&ds, &ctx, 11, true, seed).unwrap();
            let mut counts: BTreeMap<String, isize> = BTreeMap::new();
            for &i in &ctx {
                *counts.entry(ds.pairs[i].1.clone()).or_default() += 1;
            }
            for line in p.rendered_text.lines() {
                if let Some(label) = line.strip_prefix("A: ") {
                    if !label.is_empty() {
                        *counts.entry(label.to_string()).or_default() -= 1;
                    }
                }
            }
            prop_assert!(counts.values().all(|&c| c == 0));
            prop_assert_eq!(&p.target, &ds.pairs[11].1);
        }

        #[test]
        fn splits_honor_fraction_up_to_rounding(n in 2usize..200, seed in 0u64..50) {
            let ds = toy_dataset(n);
            let s = SplitSpec::split(&ds, seed).unwrap();
            let expected = ((70 * n + 50) / 100).clamp(1, n - 1);
            prop_assert_eq!(s.indices_train.len(), expected);
            prop_assert_eq!(s.indices_train.len() + s.indices_test.len(), n);
        }
    }
}

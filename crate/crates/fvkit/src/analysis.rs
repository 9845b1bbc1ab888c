//! Post-hoc analyses and artifact emission: head-set overlap, shared-head
//! activation similarity by layer, CIE score tables, and accuracy summaries.
//!
//! Everything here is a pure function of persisted stores. Tables are CSV,
//! figures are hand-rendered SVG with fixed ordering and no timestamps, and
//! every artifact embeds the run-manifest hash, so outputs are byte-stable
//! and golden-testable.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FvError, Result};
use crate::eval::EvalReport;
use crate::fv::{ActivationSummary, HeadSet, HeadSetProvenance};
use crate::gateway::HeadId;

/// Head-set partition between demonstration- and instruction-identified
/// heads, with mean-layer statistics per part.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapReport {
    pub model_id: String,
    pub demo_only: HeadSet,
    pub instruction_only: HeadSet,
    pub shared: HeadSet,
    /// Mean layer index per non-empty partition.
    pub mean_layer: BTreeMap<String, f64>,
}

impl OverlapReport {
    pub fn shared_count(&self) -> usize {
        self.shared.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    DemoVsShort,
    DemoVsLong,
    ShortVsLong,
}

impl Pairing {
    pub fn name(&self) -> &'static str {
        match self {
            Pairing::DemoVsShort => "demo_vs_short",
            Pairing::DemoVsLong => "demo_vs_long",
            Pairing::ShortVsLong => "short_vs_long",
        }
    }
}

/// Mean cosine similarity over shared heads, per layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub model_id: String,
    pub pairing: Pairing,
    pub points: Vec<(usize, f64)>,
}

/// Exact set partition of two equal-size head sets.
pub fn head_overlap(
    demo_heads: &HeadSet,
    instr_heads: &HeadSet,
    model_id: &str,
) -> Result<OverlapReport> {
    if demo_heads.len() != instr_heads.len() {
        return Err(FvError::Bounds(format!(
            "head sets differ in size: {} vs {}",
            demo_heads.len(),
            instr_heads.len()
        )));
    }
    let demo: BTreeSet<HeadId> = demo_heads.heads.iter().copied().collect();
    let instr: BTreeSet<HeadId> = instr_heads.heads.iter().copied().collect();
    let shared: Vec<HeadId> = demo.intersection(&instr).copied().collect();
    let demo_only: Vec<HeadId> = demo.difference(&instr).copied().collect();
    let instr_only: Vec<HeadId> = instr.difference(&demo).copied().collect();
    let mut mean_layer = BTreeMap::new();
    for (label, heads) in [
        ("demo_only", &demo_only),
        ("instruction_only", &instr_only),
        ("shared", &shared),
    ] {
        if !heads.is_empty() {
            let mean = heads.iter().map(|h| h.layer as f64).sum::<f64>() / heads.len() as f64;
            mean_layer.insert(label.to_string(), mean);
        }
    }
    Ok(OverlapReport {
        model_id: model_id.to_string(),
        demo_only: HeadSet::new(demo_only, HeadSetProvenance::Demo)?,
        instruction_only: HeadSet::new(instr_only, HeadSetProvenance::Instruction)?,
        shared: HeadSet::new(shared, HeadSetProvenance::SharedAnalysis)?,
        mean_layer,
    })
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Cosine similarity of mean activations at the shared heads, between the
/// three presentation forms, aggregated per layer by equal-weight mean.
pub fn shared_head_similarity(
    demo: &ActivationSummary,
    short: &ActivationSummary,
    long: &ActivationSummary,
    shared: &HeadSet,
) -> Result<Vec<SimilarityCurve>> {
    for summary in [demo, short, long] {
        if summary.model_id != demo.model_id {
            return Err(FvError::Compatibility(
                "similarity needs summaries from one model".into(),
            ));
        }
        for head in &shared.heads {
            if !summary.means.contains_key(head) {
                return Err(FvError::MissingHeadMean {
                    layer: head.layer,
                    head: head.head,
                });
            }
        }
    }
    let pairs = [
        (Pairing::DemoVsShort, demo, short),
        (Pairing::DemoVsLong, demo, long),
        (Pairing::ShortVsLong, short, long),
    ];
    let mut out = Vec::new();
    for (pairing, a, b) in pairs {
        let mut per_layer: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for head in &shared.heads {
            let ca = &a.means[head];
            let cb = &b.means[head];
            per_layer.entry(head.layer).or_default().push(cosine(ca, cb));
        }
        let points = per_layer
            .into_iter()
            .map(|(layer, vals)| (layer, vals.iter().sum::<f64>() / vals.len() as f64))
            .collect();
        out.push(SimilarityCurve {
            model_id: demo.model_id.clone(),
            pairing,
            points,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Artifact emission
// ---------------------------------------------------------------------------

/// Everything the table/figure pass reads.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AnalysisInputs {
    pub manifest_hash: String,
    pub model_id: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub reports: Vec<EvalReport>,
    pub overlap: Option<OverlapReport>,
    pub curves: Vec<SimilarityCurve>,
    /// Aggregated per-head CIE per presentation class ("demo", "instruction").
    pub cie_aggregates: BTreeMap<String, BTreeMap<HeadId, f64>>,
    /// Named head sets (demo, instruction, controls).
    pub head_sets: BTreeMap<String, HeadSet>,
}

fn write_artifact(out_dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

/// Mean and SEM across values (ddof=1).
fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn accuracy_table(inputs: &AnalysisInputs) -> String {
    let mut s = format!("# manifest: {}\n", inputs.manifest_hash);
    s.push_str("model_id,task_id,label,regime,accuracy,sem,n_queries\n");
    let mut rows = inputs.reports.clone();
    rows.sort_by(|a, b| {
        (&a.model_id, &a.label, a.regime, &a.task_id).cmp(&(&b.model_id, &b.label, b.regime, &b.task_id))
    });
    for r in &rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.model_id,
            r.task_id,
            r.label,
            r.regime.name(),
            fmt6(r.accuracy),
            fmt6(r.sem),
            r.n_queries
        );
    }
    // model-level summary rows: mean across tasks, SEM across tasks
    let mut grouped: BTreeMap<(String, String, &str), Vec<f64>> = BTreeMap::new();
    for r in &rows {
        grouped
            .entry((r.model_id.clone(), r.label.clone(), r.regime.name()))
            .or_default()
            .push(r.accuracy);
    }
    for ((model, label, regime), accs) in grouped {
        let (mean, sem) = mean_sem(&accs);
        let _ = writeln!(
            s,
            "{model},ALL,{label},{regime},{},{},{}",
            fmt6(mean),
            fmt6(sem),
            accs.len()
        );
    }
    s
}

fn cie_tables(inputs: &AnalysisInputs) -> (String, String, String) {
    // Reading A: per class, mean aggregate CIE over that class's top heads.
    let mut summary = format!("# manifest: {}\n", inputs.manifest_hash);
    summary.push_str("class,head_set,mean_top_head_cie,heads\n");
    for (class, agg) in &inputs.cie_aggregates {
        if let Some(set) = inputs.head_sets.get(class) {
            let scores: Vec<f64> = set
                .heads
                .iter()
                .filter_map(|h| agg.get(h).copied())
                .collect();
            let (mean, _) = mean_sem(&scores);
            let _ = writeln!(summary, "{class},{class},{},{}", fmt6(mean), scores.len());
        } else {
            let _ = writeln!(summary, "{class},missing,,0");
        }
    }

    // Reading B: the full per-head table.
    let mut per_head = format!("# manifest: {}\n", inputs.manifest_hash);
    per_head.push_str("class,layer,head,score\n");
    for (class, agg) in &inputs.cie_aggregates {
        for (head, score) in agg {
            let _ = writeln!(per_head, "{class},{},{},{}", head.layer, head.head, fmt6(*score));
        }
    }

    // Cross-presentation: each named head set scored under each class.
    let mut localizer = format!("# manifest: {}\n", inputs.manifest_hash);
    localizer.push_str("head_set,scored_under,mean_cie,heads_scored\n");
    for (set_label, set) in &inputs.head_sets {
        for (class, agg) in &inputs.cie_aggregates {
            let scores: Vec<f64> = set
                .heads
                .iter()
                .filter_map(|h| agg.get(h).copied())
                .collect();
            let (mean, _) = mean_sem(&scores);
            let value = if scores.is_empty() {
                String::new()
            } else {
                fmt6(mean)
            };
            let _ = writeln!(localizer, "{set_label},{class},{value},{}", scores.len());
        }
    }
    (summary, per_head, localizer)
}

fn overlap_table(inputs: &AnalysisInputs) -> String {
    let mut s = format!("# manifest: {}\n", inputs.manifest_hash);
    s.push_str("partition,size,mean_layer,heads\n");
    match &inputs.overlap {
        Some(o) => {
            for (label, set) in [
                ("demo_only", &o.demo_only),
                ("instruction_only", &o.instruction_only),
                ("shared", &o.shared),
            ] {
                let heads = set
                    .heads
                    .iter()
                    .map(|h| h.to_string())
                    .collect::<Vec<_>>()
                    .join(" ");
                let mean = o
                    .mean_layer
                    .get(label)
                    .map(|m| fmt6(*m))
                    .unwrap_or_default();
                let _ = writeln!(s, "{label},{},{mean},{heads}", set.len());
            }
        }
        None => {
            for label in ["demo_only", "instruction_only", "shared"] {
                let _ = writeln!(s, "{label},,,missing");
            }
        }
    }
    s
}

fn similarity_table(inputs: &AnalysisInputs) -> String {
    let mut s = format!("# manifest: {}\n", inputs.manifest_hash);
    s.push_str("pairing,layer,mean_cosine\n");
    let mut curves = inputs.curves.clone();
    curves.sort_by_key(|c| c.pairing);
    for curve in &curves {
        for (layer, value) in &curve.points {
            let _ = writeln!(s, "{},{layer},{}", curve.pairing.name(), fmt6(*value));
        }
    }
    s
}

// --- SVG helpers -----------------------------------------------------------

const SVG_COLORS: [(&str, &str); 4] = [
    ("demo_only", "#4878cf"),
    ("instruction_only", "#d65f5f"),
    ("shared", "#6acc65"),
    ("unselected", "#e8e8e8"),
];

fn color_for(label: &str) -> &'static str {
    SVG_COLORS
        .iter()
        .find(|(l, _)| *l == label)
        .map(|(_, c)| *c)
        .unwrap_or("#999999")
}

fn head_grid_svg(inputs: &AnalysisInputs) -> String {
    let cell = 16usize;
    let margin = 60usize;
    let width = margin + inputs.n_layers.max(1) * cell + 160;
    let height = margin + inputs.n_heads.max(1) * cell + 20;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\">"
    );
    let _ = writeln!(s, "<!-- manifest: {} -->", inputs.manifest_hash);
    let _ = writeln!(
        s,
        "<text x=\"{margin}\" y=\"20\" font-size=\"13\">attention heads by identifying presentation (columns: layers, rows: heads)</text>"
    );
    let membership = |head: HeadId| -> &'static str {
        if let Some(o) = &inputs.overlap {
            if o.shared.contains(&head) {
                return "shared";
            }
            if o.demo_only.contains(&head) {
                return "demo_only";
            }
            if o.instruction_only.contains(&head) {
                return "instruction_only";
            }
        }
        "unselected"
    };
    for layer in 0..inputs.n_layers {
        for head in 0..inputs.n_heads {
            let label = membership(HeadId::new(layer, head));
            let x = margin + layer * cell;
            let y = margin + head * cell;
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{w}\" height=\"{w}\" fill=\"{fill}\" stroke=\"#ffffff\"/>",
                w = cell - 1,
                fill = color_for(label)
            );
        }
    }
    // legend always renders all three categories
    let legend_x = margin + inputs.n_layers * cell + 16;
    for (i, (label, color)) in SVG_COLORS.iter().take(3).enumerate() {
        let y = margin + i * 22;
        let _ = writeln!(
            s,
            "<rect x=\"{legend_x}\" y=\"{y}\" width=\"14\" height=\"14\" fill=\"{color}\"/>"
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\">{label}</text>",
            legend_x + 20,
            y + 12
        );
    }
    s.push_str("</svg>\n");
    s
}

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let pts = points
        .iter()
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect::<Vec<_>>()
        .join(" ");
    format!("<polyline points=\"{pts}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n")
}

fn similarity_svg(inputs: &AnalysisInputs) -> String {
    let (w, h, ml, mb) = (480.0, 300.0, 60.0, 40.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">"
    );
    let _ = writeln!(s, "<!-- manifest: {} -->", inputs.manifest_hash);
    let _ = writeln!(
        s,
        "<text x=\"{ml}\" y=\"20\" font-size=\"13\">shared-head activation cosine similarity by layer</text>"
    );
    let max_layer = inputs
        .curves
        .iter()
        .flat_map(|c| c.points.iter().map(|(l, _)| *l))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let x_of = |layer: f64| ml + (w - ml - 20.0) * layer / max_layer;
    let y_of = |cosine: f64| (h - mb) - (h - mb - 40.0) * (cosine + 1.0) / 2.0;
    // axes
    let _ = writeln!(
        s,
        "<line x1=\"{ml}\" y1=\"40\" x2=\"{ml}\" y2=\"{}\" stroke=\"#333\"/>",
        h - mb
    );
    let _ = writeln!(
        s,
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>",
        h - mb,
        w - 20.0,
        h - mb
    );
    let colors = ["#4878cf", "#d65f5f", "#6acc65"];
    let mut curves = inputs.curves.clone();
    curves.sort_by_key(|c| c.pairing);
    for (i, curve) in curves.iter().enumerate() {
        let pts: Vec<(f64, f64)> = curve
            .points
            .iter()
            .map(|(l, v)| (x_of(*l as f64), y_of(*v)))
            .collect();
        if !pts.is_empty() {
            s.push_str(&polyline(&pts, colors[i % colors.len()]));
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{}\">{}</text>",
            w - 150.0,
            50.0 + 18.0 * i as f64,
            colors[i % colors.len()],
            curve.pairing.name()
        );
    }
    s.push_str("</svg>\n");
    s
}

fn accuracy_svg(inputs: &AnalysisInputs) -> String {
    let mut grouped: BTreeMap<(String, &str), Vec<f64>> = BTreeMap::new();
    for r in &inputs.reports {
        grouped
            .entry((r.label.clone(), r.regime.name()))
            .or_default()
            .push(r.accuracy);
    }
    let bars: Vec<(String, f64)> = grouped
        .into_iter()
        .map(|((label, regime), accs)| {
            let (mean, _) = mean_sem(&accs);
            (format!("{label}/{regime}"), mean)
        })
        .collect();
    let bar_w = 34.0;
    let gap = 14.0;
    let ml = 50.0;
    let w = ml + (bars.len() as f64) * (bar_w + gap) + 40.0;
    let h = 320.0;
    let base = h - 110.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\">"
    );
    let _ = writeln!(s, "<!-- manifest: {} -->", inputs.manifest_hash);
    let _ = writeln!(
        s,
        "<text x=\"{ml}\" y=\"20\" font-size=\"13\">mean accuracy by evaluation (over tasks)</text>"
    );
    let _ = writeln!(
        s,
        "<line x1=\"{ml}\" y1=\"{base}\" x2=\"{}\" y2=\"{base}\" stroke=\"#333\"/>",
        w - 20.0
    );
    for (i, (label, mean)) in bars.iter().enumerate() {
        let x = ml + (i as f64) * (bar_w + gap);
        let bh = (base - 40.0) * mean;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{bar_w}\" height=\"{bh:.1}\" fill=\"#4878cf\"/>",
            base - bh
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"9\" transform=\"rotate(45 {:.1} {:.1})\">{label}</text>",
            x,
            base + 12.0,
            x,
            base + 12.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"9\">{}</text>",
            base - bh - 4.0,
            fmt6(*mean)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn index_html(inputs: &AnalysisInputs, artifacts: &[PathBuf]) -> String {
    let mut s = String::new();
    s.push_str("<!DOCTYPE html>\n<html><head><title>run report</title></head><body>\n");
    let _ = writeln!(s, "<!-- manifest: {} -->", inputs.manifest_hash);
    let _ = writeln!(
        s,
        "<h1>Function-vector run report</h1>\n<p>model: {} — manifest {}</p>\n<ul>",
        inputs.model_id, inputs.manifest_hash
    );
    for path in artifacts {
        if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
            let _ = writeln!(s, "<li><a href=\"{name}\">{name}</a></li>");
        }
    }
    s.push_str("</ul></body></html>\n");
    s
}

/// Writes every table and figure into `out_dir` and returns their paths.
pub fn emit_tables_and_plots(inputs: &AnalysisInputs, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut artifacts = Vec::new();
    artifacts.push(write_artifact(out_dir, "accuracy_summary.csv", &accuracy_table(inputs))?);
    let (summary, per_head, localizer) = cie_tables(inputs);
    artifacts.push(write_artifact(out_dir, "cie_overall.csv", &summary)?);
    artifacts.push(write_artifact(out_dir, "cie_per_head.csv", &per_head)?);
    artifacts.push(write_artifact(out_dir, "localizer_cie.csv", &localizer)?);
    artifacts.push(write_artifact(out_dir, "overlap.csv", &overlap_table(inputs))?);
    artifacts.push(write_artifact(out_dir, "similarity.csv", &similarity_table(inputs))?);
    artifacts.push(write_artifact(out_dir, "head_grid.svg", &head_grid_svg(inputs))?);
    artifacts.push(write_artifact(out_dir, "similarity_curves.svg", &similarity_svg(inputs))?);
    artifacts.push(write_artifact(out_dir, "accuracy_bars.svg", &accuracy_svg(inputs))?);
    let html = index_html(inputs, &artifacts);
    artifacts.push(write_artifact(out_dir, "index.html", &html)?);
    Ok(artifacts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fv::PresentationForm;

    fn set(ids: &[(usize, usize)], provenance: HeadSetProvenance) -> HeadSet {
        HeadSet::new(
            ids.iter().map(|&(l, h)| HeadId::new(l, h)).collect(),
            provenance,
        )
        .unwrap()
    }

    #[test]
    fn identical_sets_share_everything() {
        let a = set(&[(0, 0), (1, 1), (2, 2)], HeadSetProvenance::Demo);
        let b = set(&[(0, 0), (1, 1), (2, 2)], HeadSetProvenance::Instruction);
        let o = head_overlap(&a, &b, "m").unwrap();
        assert_eq!(o.shared.len(), 3);
        assert!(o.demo_only.is_empty());
        assert!(o.instruction_only.is_empty());
        assert!((o.mean_layer["shared"] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_sets_share_nothing() {
        let a = set(&[(0, 0), (0, 1)], HeadSetProvenance::Demo);
        let b = set(&[(1, 0), (1, 1)], HeadSetProvenance::Instruction);
        let o = head_overlap(&a, &b, "m").unwrap();
        assert!(o.shared.is_empty());
        assert_eq!(o.demo_only.len(), 2);
        assert_eq!(o.instruction_only.len(), 2);
    }

    #[test]
    fn partition_arithmetic_holds() {
        let a = set(&[(0, 0), (0, 1), (1, 0), (2, 3)], HeadSetProvenance::Demo);
        let b = set(&[(0, 1), (1, 0), (3, 3), (4, 0)], HeadSetProvenance::Instruction);
        let o = head_overlap(&a, &b, "m").unwrap();
        assert_eq!(o.demo_only.len() + o.shared.len(), a.len());
        assert_eq!(o.instruction_only.len() + o.shared.len(), b.len());
        assert_eq!(
            o.demo_only.len() + o.instruction_only.len() + o.shared.len(),
            2 * a.len() - o.shared.len()
        );
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let a = set(&[(0, 0)], HeadSetProvenance::Demo);
        let b = set(&[(0, 0), (0, 1)], HeadSetProvenance::Instruction);
        assert!(head_overlap(&a, &b, "m").is_err());
    }

    fn summary_with(
        heads: &[(usize, usize)],
        f: impl Fn(usize, usize) -> Vec<f64>,
        form: PresentationForm,
    ) -> ActivationSummary {
        ActivationSummary {
            task_id: "t".into(),
            model_id: "m".into(),
            model_layers: 8,
            form,
            means: heads
                .iter()
                .map(|&(l, h)| (HeadId::new(l, h), f(l, h)))
                .collect(),
            prompt_count: 1,
        }
    }

    #[test]
    fn identical_summaries_have_unit_similarity() {
        let heads = [(0, 0), (1, 0), (2, 0)];
        let mk = |l: usize, h: usize| vec![l as f64 + 1.0, h as f64 + 2.0, 1.0];
        let demo = summary_with(&heads, mk, PresentationForm::Demo);
        let short = summary_with(&heads, mk, PresentationForm::InstructionShort);
        let long = summary_with(&heads, mk, PresentationForm::InstructionLong);
        let shared = set(&heads, HeadSetProvenance::SharedAnalysis);
        let curves = shared_head_similarity(&demo, &short, &long, &shared).unwrap();
        assert_eq!(curves.len(), 3);
        for curve in curves {
            for (_, v) in curve.points {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orthogonal_vectors_have_zero_similarity() {
        let heads = [(0, 0)];
        let demo = summary_with(&heads, |_, _| vec![1.0, 0.0], PresentationForm::Demo);
        let short = summary_with(&heads, |_, _| vec![0.0, 1.0], PresentationForm::InstructionShort);
        let long = summary_with(&heads, |_, _| vec![0.0, 1.0], PresentationForm::InstructionLong);
        let shared = set(&heads, HeadSetProvenance::SharedAnalysis);
        let curves = shared_head_similarity(&demo, &short, &long, &shared).unwrap();
        assert_eq!(curves[0].points[0].1, 0.0); // demo vs short
        assert!((curves[2].points[0].1 - 1.0).abs() < 1e-12); // short vs long
    }

    #[test]
    fn planted_similarity_gradient_is_recovered() {
        // Plant per-layer angles that shrink with depth: later layers more
        // similar between demo and instructions.
        let heads: Vec<(usize, usize)> = (0..6).map(|l| (l, 0)).collect();
        let demo = summary_with(&heads, |_, _| vec![1.0, 0.0], PresentationForm::Demo);
        let angled = |l: usize, _h: usize| {
            let theta = 1.2 - 0.2 * l as f64;
            vec![theta.cos(), theta.sin()]
        };
        let short = summary_with(&heads, angled, PresentationForm::InstructionShort);
        let long = summary_with(&heads, angled, PresentationForm::InstructionLong);
        let shared = set(&heads, HeadSetProvenance::SharedAnalysis);
        let curves = shared_head_similarity(&demo, &short, &long, &shared).unwrap();
        let demo_vs_short = &curves[0];
        for w in demo_vs_short.points.windows(2) {
            assert!(
                w[1].1 > w[0].1,
                "similarity should rise with layer: {:?}",
                demo_vs_short.points
            );
        }
        for (l, v) in &demo_vs_short.points {
            let expected = (1.2 - 0.2 * (*l as f64)).cos();
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn emission_is_deterministic_and_renders_full_legend() {
        let dir = tempfile::tempdir().unwrap();
        let inputs = AnalysisInputs {
            manifest_hash: "abc123".into(),
            model_id: "m".into(),
            n_layers: 4,
            n_heads: 4,
            overlap: Some(
                head_overlap(
                    &set(&[(0, 0)], HeadSetProvenance::Demo),
                    &set(&[(0, 0)], HeadSetProvenance::Instruction),
                    "m",
                )
                .unwrap(),
            ),
            ..Default::default()
        };
        let a = emit_tables_and_plots(&inputs, &dir.path().join("a")).unwrap();
        let b = emit_tables_and_plots(&inputs, &dir.path().join("b")).unwrap();
        assert_eq!(a.len(), b.len());
        for (pa, pb) in a.iter().zip(&b) {
            let ca = std::fs::read(pa).unwrap();
            let cb = std::fs::read(pb).unwrap();
            assert_eq!(ca, cb, "artifact {pa:?} not byte-identical");
        }
        let grid = std::fs::read_to_string(dir.path().join("a/head_grid.svg")).unwrap();
        for label in ["demo_only", "instruction_only", "shared"] {
            assert!(grid.contains(label), "legend misses {label}");
        }
    }
}

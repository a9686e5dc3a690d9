//! Static outputs: single-neuron activation heatmaps as standalone HTML, and
//! the run bundle (`run.json`, `tables.txt`, CSVs).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::analysis::{LayerHistogram, PropertySpread, SelectivityReport};
use crate::dataset::{ActivationDataset, ActivationManifest, LabelMode};
use crate::error::{LcaError, Result};
use crate::lambda_search::SearchReport;
use crate::ranking::{locate_feature, NeuronRanking, PairSide, RankingConfig};
use crate::selection::SelectionReport;

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// The only field of `run.json` that differs between identical runs.
pub const TIMESTAMP_FIELD: &str = "generated_at";

pub fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanColor {
    Red,
    White,
    Blue,
}

/// Color and opacity for one value given the largest magnitude in view.
pub fn span_style(value: f64, max_abs: f64) -> (SpanColor, f64) {
    let opacity = if max_abs > 0.0 {
        (value.abs() / max_abs).clamp(0.0, 1.0)
    } else {
        0.0
    };
    if value < 0.0 {
        (SpanColor::Red, opacity)
    } else if value > 0.0 {
        (SpanColor::Blue, opacity)
    } else {
        (SpanColor::White, 0.0)
    }
}

const HEATMAP_STYLE: &str = "body { font-family: sans-serif; margin: 2em; }
.sentence { margin: 0.6em 0; line-height: 2em; }
.tok { padding: 0.2em 0.3em; margin: 0 0.1em; border-radius: 3px; border: 1px solid #ddd; }
.caption { color: #555; }";

/// One sentence's tokens and the neuron's value at each.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapRow {
    pub sentence_id: i64,
    pub tokens: Vec<String>,
    pub values: Vec<f64>,
}

/// Renders rows as a self-contained HTML page. Opacity is normalized by the
/// largest magnitude across all rows.
pub fn render_heatmap_rows(rows: &[HeatmapRow], caption: &str) -> String {
    let max_abs = rows
        .iter()
        .flat_map(|r| &r.values)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let mut html = String::new();
    html.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n");
    let _ = writeln!(html, "<title>{}</title>", escape_html(caption));
    let _ = writeln!(html, "<style>\n{HEATMAP_STYLE}\n</style>");
    html.push_str("</head>\n<body>\n");
    let _ = writeln!(html, "<h1>{}</h1>", escape_html(caption));
    let _ = writeln!(
        html,
        "<p class=\"caption\">red: negative, blue: positive, opacity: |value| / {max_abs:.6}</p>"
    );
    for row in rows {
        let _ = write!(html, "<div class=\"sentence\" data-sentence-id=\"{}\">", row.sentence_id);
        for (tok, &v) in row.tokens.iter().zip(&row.values) {
            let (color, opacity) = span_style(v, max_abs);
            let (class, background) = match color {
                SpanColor::Red => ("neg", format!("rgba(255, 0, 0, {opacity:.4})")),
                SpanColor::Blue => ("pos", format!("rgba(0, 0, 255, {opacity:.4})")),
                SpanColor::White => ("zero", "#ffffff".to_string()),
            };
            let _ = write!(
                html,
                "<span class=\"tok {class}\" style=\"background-color: {background}\" title=\"{v:.6}\">{}</span>",
                escape_html(tok)
            );
        }
        html.push_str("</div>\n");
    }
    html.push_str("</body>\n</html>\n");
    html
}

/// Heatmap of one neuron over the sentences with the given `sentence_id`s.
pub fn render_heatmap(ds: &ActivationDataset, neuron: usize, sentence_ids: &[i64]) -> Result<String> {
    let (layer, unit) = ds.manifest.locate(neuron)?;
    if sentence_ids.is_empty() {
        return Err(LcaError::EmptySelection);
    }
    let mut rows = Vec::with_capacity(sentence_ids.len());
    for &id in sentence_ids {
        let s = ds
            .sentences
            .iter()
            .find(|s| s.sentence_id == id)
            .ok_or_else(|| LcaError::InvalidConfig(format!("no sentence with id {id}")))?;
        rows.push(HeatmapRow {
            sentence_id: id,
            tokens: s.tokens.clone(),
            values: s.activations.column(neuron).iter().map(|&v| v as f64).collect(),
        });
    }
    let caption = format!("{}: layer {layer}, unit {unit} (neuron {neuron})", ds.manifest.model_name);
    Ok(render_heatmap_rows(&rows, &caption))
}

pub fn heatmap_file_name(manifest: &ActivationManifest, neuron: usize) -> Result<String> {
    let (layer, unit) = manifest.locate(neuron)?;
    Ok(format!("neuron_{layer}_{unit}.html"))
}

/// Writes `neuron_<layer>_<unit>.html` into `out_dir`.
pub fn write_heatmap(ds: &ActivationDataset, neuron: usize, sentence_ids: &[i64], out_dir: &Path) -> Result<PathBuf> {
    let html = render_heatmap(ds, neuron, sentence_ids)?;
    std::fs::create_dir_all(out_dir).map_err(|e| LcaError::io(out_dir, e))?;
    let path = out_dir.join(heatmap_file_name(&ds.manifest, neuron)?);
    std::fs::write(&path, html).map_err(|e| LcaError::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSummary {
    pub feature_dim: usize,
    pub num_tags: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankingSummary {
    pub ordering: Vec<usize>,
    pub feature_dim: usize,
    pub config: RankingConfig,
    pub zero_weight_neurons: Vec<usize>,
}

impl From<&NeuronRanking> for RankingSummary {
    fn from(r: &NeuronRanking) -> Self {
        RankingSummary {
            ordering: r.ordering.clone(),
            feature_dim: r.feature_dim,
            config: r.config,
            zero_weight_neurons: r.zero_weight_neurons.clone(),
        }
    }
}

/// Accuracies (percent) of one probe with top/random/bottom subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetTable {
    pub percent: f64,
    pub neuron_count: usize,
    pub retrained: bool,
    pub all: f64,
    pub top: f64,
    pub random: f64,
    pub bottom: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectivitySummary {
    /// Probes on all neurons.
    pub all: SelectivityReport,
    /// Probes retrained on the selected neurons.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<SelectivityReport>,
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub schema_version: u32,
    pub tool_version: String,
    pub generated_at: String,
    pub seed: u64,
    /// Resolved configuration and input paths.
    pub config: IndexMap<String, serde_json::Value>,
    #[serde(default)]
    pub manifest: Option<ActivationManifest>,
    #[serde(default)]
    pub mode: Option<LabelMode>,
    #[serde(default)]
    pub tag_vocab: Vec<String>,
    #[serde(default)]
    pub probe: Option<ProbeSummary>,
    #[serde(default)]
    pub search: Option<SearchReport>,
    #[serde(default)]
    pub ranking: Option<RankingSummary>,
    #[serde(default)]
    pub ablation: Option<SubsetTable>,
    #[serde(default)]
    pub selection: Option<SelectionReport>,
    #[serde(default)]
    pub redundancy: Option<SubsetTable>,
    #[serde(default)]
    pub selectivity: Option<SelectivitySummary>,
    #[serde(default)]
    pub layers: Option<LayerHistogram>,
    #[serde(default)]
    pub spread: Option<PropertySpread>,
}

impl RunRecord {
    pub fn new(seed: u64) -> RunRecord {
        RunRecord {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            generated_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            seed,
            config: IndexMap::new(),
            manifest: None,
            mode: None,
            tag_vocab: Vec::new(),
            probe: None,
            search: None,
            ranking: None,
            ablation: None,
            selection: None,
            redundancy: None,
            selectivity: None,
            layers: None,
            spread: None,
        }
    }

    pub fn load(path: &Path) -> Result<RunRecord> {
        let text = std::fs::read_to_string(path).map_err(|e| LcaError::io(path, e))?;
        validate_run_json(&text)
    }
}

/// Parses and checks a `run.json` document against schema version 1.
pub fn validate_run_json(text: &str) -> Result<RunRecord> {
    let record: RunRecord =
        serde_json::from_str(text).map_err(|e| LcaError::InvalidRecord(e.to_string()))?;
    if record.schema_version != SCHEMA_VERSION {
        return Err(LcaError::InvalidRecord(format!(
            "schema_version {} (expected {SCHEMA_VERSION})",
            record.schema_version
        )));
    }
    if let (Some(r), Some(m)) = (&record.ranking, &record.manifest) {
        if r.feature_dim != m.dim() && r.feature_dim != 2 * m.dim() {
            return Err(LcaError::InvalidRecord(format!(
                "ranking feature_dim {} does not fit manifest D={}",
                r.feature_dim,
                m.dim()
            )));
        }
    }
    if let Some(r) = &record.ranking {
        if r.ordering.iter().any(|&n| n >= r.feature_dim) {
            return Err(LcaError::InvalidRecord("ranking index out of range".into()));
        }
    }
    Ok(record)
}

fn fmt_pct(v: f64) -> String {
    format!("{v:.2}")
}

fn subset_table_text(out: &mut String, title: &str, t: &SubsetTable) {
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{:<10}{:>10}", "Neurons", "Accuracy");
    let first = if t.retrained { "Oracle" } else { "All" };
    let _ = writeln!(out, "{:<10}{:>10}", first, fmt_pct(t.all));
    for (name, v) in [("Top", t.top), ("Random", t.random), ("Bottom", t.bottom)] {
        let _ = writeln!(out, "{:<10}{:>10}", name, fmt_pct(v));
    }
    let _ = writeln!(out, "({} neurons = {}% per subset)\n", t.neuron_count, t.percent);
}

/// Human-readable summary tables for `tables.txt`.
pub fn render_tables(record: &RunRecord) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "neuron-lca {} run (seed {})\n", record.tool_version, record.seed);
    if let Some(p) = &record.probe {
        let _ = writeln!(out, "Probe (lambda1={:e}, lambda2={:e}, F={}, |T|={})", p.lambda1, p.lambda2, p.feature_dim, p.num_tags);
        let _ = writeln!(
            out,
            "train {}  dev {}  test {}\n",
            fmt_pct(p.train_accuracy),
            fmt_pct(p.dev_accuracy),
            fmt_pct(p.test_accuracy)
        );
    }
    if let Some(a) = &record.ablation {
        subset_table_text(&mut out, "Ablation: features outside the subset zeroed (test accuracy %)", a);
    }
    if let Some(s) = &record.selection {
        let _ = writeln!(out, "Minimal neuron selection (retrained, test accuracy %)");
        let _ = writeln!(out, "{:<18}{:>10}", "Neurons (%)", format!("{:.2}", s.percent));
        let _ = writeln!(out, "{:<18}{:>10}", "Neurons (count)", s.neuron_count);
        let _ = writeln!(out, "{:<18}{:>10}", "Acc all (oracle)", fmt_pct(s.oracle_accuracy));
        let _ = writeln!(out, "{:<18}{:>10}", "Acc selected", fmt_pct(s.accuracy));
        if let Some(sel) = &record.selectivity {
            let _ = writeln!(out, "{:<18}{:>10}", "Selectivity all", fmt_pct(sel.all.selectivity));
            if let Some(t) = &sel.selected {
                let _ = writeln!(out, "{:<18}{:>10}", "Selectivity sel.", fmt_pct(t.selectivity));
            }
        }
        if !s.threshold_reached {
            let _ = writeln!(out, "(threshold not reached; best subset shown)");
        }
        out.push('\n');
    }
    if let Some(r) = &record.redundancy {
        subset_table_text(&mut out, "Redundancy: probes retrained on each subset (test accuracy %)", r);
    }
    if let Some(search) = &record.search {
        let _ = writeln!(out, "Lambda search (dev accuracy %, by score)");
        let _ = writeln!(
            out,
            "{:>10} {:>10} {:>8} {:>8} {:>8} {:>8} {:>9}",
            "lambda1", "lambda2", "top", "bottom", "acc", "noreg", "score"
        );
        for c in search.sorted_by_score() {
            let _ = writeln!(
                out,
                "{:>10e} {:>10e} {:>8} {:>8} {:>8} {:>8} {:>9.4}",
                c.lambda1,
                c.lambda2,
                fmt_pct(c.acc_top),
                fmt_pct(c.acc_bottom),
                fmt_pct(c.acc_lambda),
                fmt_pct(c.acc_noreg),
                c.score
            );
        }
        let _ = writeln!(out, "best: lambda1={:e} lambda2={:e}\n", search.best.lambda1, search.best.lambda2);
    }
    if let Some(l) = &record.layers {
        let _ = writeln!(out, "Selected neurons per layer");
        out.push_str(&l.bar_chart(40));
        out.push('\n');
    }
    if let Some(s) = &record.spread {
        let _ = writeln!(out, "Neurons per tag at {:.2}% weight mass", s.accept_p);
        for (tag, n) in &s.per_tag_counts {
            let _ = writeln!(out, "{tag:<16}{n:>8}");
        }
        out.push('\n');
    }
    out
}

fn ranking_csv(r: &RankingSummary, manifest: Option<&ActivationManifest>) -> Result<String> {
    let mut out = String::from("rank,neuron,layer,unit,side\n");
    for (rank, &n) in r.ordering.iter().enumerate() {
        match manifest {
            Some(m) => {
                let loc = locate_feature(n, m, r.feature_dim)?;
                let side = match loc.side {
                    None => "",
                    Some(PairSide::Head) => "head",
                    Some(PairSide::Modifier) => "modifier",
                };
                let _ = writeln!(out, "{rank},{n},{},{},{side}", loc.layer, loc.unit);
            }
            None => {
                let _ = writeln!(out, "{rank},{n},,,");
            }
        }
    }
    Ok(out)
}

/// Writes `run.json`, `tables.txt` and one CSV per analysis present.
/// Returns the written paths.
pub fn emit_report(record: &RunRecord, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| LcaError::io(out_dir, e))?;
    let mut files: Vec<(String, String)> = vec![
        ("run.json".into(), serde_json::to_string_pretty(record)? + "\n"),
        ("tables.txt".into(), render_tables(record)),
    ];
    if let Some(r) = &record.ranking {
        files.push(("ranking.csv".into(), ranking_csv(r, record.manifest.as_ref())?));
    }
    if let Some(s) = &record.search {
        let mut csv = String::from("lambda1,lambda2,acc_top,acc_bottom,acc_lambda,acc_noreg,score\n");
        for c in &s.cells {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                c.lambda1, c.lambda2, c.acc_top, c.acc_bottom, c.acc_lambda, c.acc_noreg, c.score
            );
        }
        files.push(("search.csv".into(), csv));
    }
    for (name, table) in [("ablation.csv", &record.ablation), ("redundancy.csv", &record.redundancy)] {
        if let Some(t) = table {
            let csv = format!(
                "subset,percent,neuron_count,accuracy\nall,100,{},{}\ntop,{},{},{}\nrandom,{},{},{}\nbottom,{},{},{}\n",
                record.probe.as_ref().map_or(0, |p| p.feature_dim),
                t.all,
                t.percent,
                t.neuron_count,
                t.top,
                t.percent,
                t.neuron_count,
                t.random,
                t.percent,
                t.neuron_count,
                t.bottom
            );
            files.push((name.into(), csv));
        }
    }
    if let Some(s) = &record.selection {
        let mut csv = String::from("percent,neuron_count,accuracy\n");
        for it in &s.iterations {
            let _ = writeln!(csv, "{},{},{}", it.percent, it.neuron_count, it.accuracy);
        }
        files.push(("selection.csv".into(), csv));
    }
    if let Some(l) = &record.layers {
        files.push(("layers.csv".into(), l.to_csv()));
    }
    if let Some(s) = &record.spread {
        let mut csv = String::from("tag,count\n");
        for (tag, n) in &s.per_tag_counts {
            let _ = writeln!(csv, "{tag},{n}");
        }
        files.push(("spread.csv".into(), csv));
    }

    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| LcaError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// `run.json` text with the timestamp field removed, for reproducibility checks.
pub fn strip_timestamp(run_json: &str) -> Result<String> {
    let mut v: serde_json::Value = serde_json::from_str(run_json)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove(TIMESTAMP_FIELD);
    }
    Ok(serde_json::to_string_pretty(&v)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ActivationSentence;
    use ndarray::Array2;

    #[test]
    fn escapes_markup() {
        assert_eq!(escape_html("<a & 'b'>"), "&lt;a &amp; &#39;b&#39;&gt;");
    }

    fn one_sentence(values: &[f32], tokens: &[&str]) -> ActivationDataset {
        let mut acts = Array2::zeros((values.len(), 2));
        for (r, &v) in values.iter().enumerate() {
            acts[[r, 1]] = v;
        }
        ActivationDataset {
            manifest: ActivationManifest::new(1, 2, "toy"),
            sentences: vec![ActivationSentence {
                sentence_id: 4,
                tokens: tokens.iter().map(|s| s.to_string()).collect(),
                activations: acts,
            }],
        }
    }

    fn span_classes(html: &str) -> Vec<&str> {
        html.match_indices("class=\"tok ")
            .map(|(i, m)| {
                let rest = &html[i + m.len()..];
                &rest[..rest.find('"').unwrap()]
            })
            .collect()
    }

    #[test]
    fn red_white_blue() {
        let ds = one_sentence(&[-1.0, 0.0, 1.0], &["a", "b", "c"]);
        let html = render_heatmap(&ds, 1, &[4]).unwrap();
        assert_eq!(span_classes(&html), vec!["neg", "zero", "pos"]);
        assert!(html.contains("rgba(255, 0, 0, 1.0000)"));
        assert!(html.contains("rgba(0, 0, 255, 1.0000)"));
    }

    #[test]
    fn all_zero_is_white() {
        let ds = one_sentence(&[0.0, 0.0], &["a", "<b>"]);
        let html = render_heatmap(&ds, 0, &[4]).unwrap();
        assert_eq!(span_classes(&html), vec!["zero", "zero"]);
        assert!(html.contains("&lt;b&gt;"));
    }

    #[test]
    fn position_neuron_fades_red_to_blue() {
        let n = 9;
        let values: Vec<f32> = (0..n).map(|i| -1.0 + 2.0 * i as f32 / (n - 1) as f32).collect();
        let tokens: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        let refs: Vec<&str> = tokens.iter().map(String::as_str).collect();
        let ds = one_sentence(&values, &refs);
        let html = render_heatmap(&ds, 1, &[4]).unwrap();
        let classes = span_classes(&html);
        assert_eq!(&classes[..4], &["neg"; 4]);
        assert_eq!(classes[4], "zero");
        assert_eq!(&classes[5..], &["pos"; 4]);
        // opacity falls toward the middle, then rises
        let (_, first) = span_style(values[0] as f64, 1.0);
        let (_, second) = span_style(values[1] as f64, 1.0);
        assert!(first > second);
    }

    #[test]
    fn heatmap_errors_and_naming() {
        let ds = one_sentence(&[1.0], &["a"]);
        assert!(matches!(render_heatmap(&ds, 0, &[]), Err(LcaError::EmptySelection)));
        assert!(matches!(
            render_heatmap(&ds, 2, &[4]),
            Err(LcaError::IndexOutOfRange { .. })
        ));
        assert!(render_heatmap(&ds, 0, &[5]).is_err());
        let m = ActivationManifest::new(13, 768, "bert");
        assert_eq!(heatmap_file_name(&m, 768 * 6 + 132).unwrap(), "neuron_6_132.html");
    }

    #[test]
    fn run_json_validation() {
        let r = RunRecord::new(3);
        let text = serde_json::to_string(&r).unwrap();
        assert_eq!(validate_run_json(&text).unwrap(), r);
        let bad = text.replace("\"schema_version\":1", "\"schema_version\":2");
        assert!(validate_run_json(&bad).is_err());
        let extra = text.replacen('{', "{\"surprise\":1,", 1);
        assert!(validate_run_json(&extra).is_err());
        let stripped = strip_timestamp(&text).unwrap();
        assert!(!stripped.contains(TIMESTAMP_FIELD));
    }
}

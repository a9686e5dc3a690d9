//! Read-only analyses over rankings, selections and activations.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::dataset::{ActivationDataset, ActivationManifest};
use crate::error::{LcaError, Result};
use crate::probe::LinearProbe;
use crate::ranking::{top_neurons_for_tag, NeuronRanking};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerHistogram {
    /// Selected neurons per layer; layer 0 is the embedding layer.
    pub counts: Vec<usize>,
    pub total: usize,
    pub labels: Vec<usize>,
    /// Pair mode only: the same histogram split by concatenation side.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_counts: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modifier_counts: Option<Vec<usize>>,
}

impl LayerHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,count\n");
        for (l, c) in self.labels.iter().zip(&self.counts) {
            let _ = writeln!(out, "{l},{c}");
        }
        out
    }

    /// Horizontal bar chart, one row per layer.
    pub fn bar_chart(&self, width: usize) -> String {
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1);
        let mut out = String::new();
        for (l, &c) in self.labels.iter().zip(&self.counts) {
            let bar = (c * width).div_ceil(max);
            let _ = writeln!(out, "layer {l:>3} | {:<width$} {c}", "#".repeat(bar));
        }
        out
    }
}

pub fn layer_histogram(neurons: &[usize], manifest: &ActivationManifest, pair_mode: bool) -> Result<LayerHistogram> {
    let d = manifest.dim();
    let limit = if pair_mode { 2 * d } else { d };
    let layers = manifest.num_layers;
    let mut counts = vec![0; layers];
    let mut head = vec![0; layers];
    let mut modifier = vec![0; layers];
    for &n in neurons {
        if n >= limit {
            return Err(LcaError::IndexOutOfRange { index: n, limit });
        }
        let layer = (n % d) / manifest.hidden_size;
        counts[layer] += 1;
        if n < d {
            head[layer] += 1;
        } else {
            modifier[layer] += 1;
        }
    }
    Ok(LayerHistogram {
        counts,
        total: neurons.len(),
        labels: (0..layers).collect(),
        head_counts: pair_mode.then_some(head),
        modifier_counts: pair_mode.then_some(modifier),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertySpread {
    /// Neurons needed to cover `accept_p`% of each tag's weight mass. A neuron
    /// salient for several tags counts once per tag.
    pub per_tag_counts: IndexMap<String, usize>,
    pub accept_p: f64,
    pub skipped_tags: Vec<String>,
}

pub fn property_spread(probe: &LinearProbe, accept_p: f64) -> Result<PropertySpread> {
    let mut per_tag_counts = IndexMap::new();
    let mut skipped_tags = Vec::new();
    for (tag, row) in probe.tag_vocab.iter().zip(probe.theta.rows()) {
        match top_neurons_for_tag(row, accept_p) {
            Ok(set) => {
                per_tag_counts.insert(tag.clone(), set.len());
            }
            Err(LcaError::ZeroMassTag(_)) => {
                log::warn!("tag {tag:?} has zero weight mass; skipped in spread");
                skipped_tags.push(tag.clone());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(PropertySpread {
        per_tag_counts,
        accept_p,
        skipped_tags,
    })
}

/// Mass percentage at which the ranking had selected its first `count`
/// neurons; the default attribution point for [`property_spread`].
pub fn acceptance_mass(ranking: &NeuronRanking, count: usize) -> f64 {
    ranking.mass_for_prefix(count)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectivityReport {
    pub task_accuracy: f64,
    pub control_accuracy: f64,
    pub selectivity: f64,
}

pub fn compute_selectivity(task_acc: f64, control_acc: f64) -> SelectivityReport {
    SelectivityReport {
        task_accuracy: task_acc,
        control_accuracy: control_acc,
        selectivity: task_acc - control_acc,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopWordsMode {
    Abs,
    Positive,
    Negative,
}

impl std::str::FromStr for TopWordsMode {
    type Err = LcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs" => Ok(TopWordsMode::Abs),
            "positive" => Ok(TopWordsMode::Positive),
            "negative" => Ok(TopWordsMode::Negative),
            other => Err(LcaError::InvalidConfig(format!(
                "unknown mode {other:?} (expected abs|positive|negative)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    #[serde(rename = "+")]
    Positive,
    #[serde(rename = "-")]
    Negative,
    #[serde(rename = "0")]
    Zero,
}

impl Sign {
    fn of(v: f64) -> Sign {
        if v > 0.0 {
            Sign::Positive
        } else if v < 0.0 {
            Sign::Negative
        } else {
            Sign::Zero
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Sign::Positive => '+',
            Sign::Negative => '-',
            Sign::Zero => '0',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopWord {
    pub word: String,
    /// Mean activation over the word type's occurrences.
    pub score: f64,
    pub sign: Sign,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopWordsReport {
    pub neuron: usize,
    pub mode: TopWordsMode,
    pub min_occurrences: usize,
    pub words: Vec<TopWord>,
    /// Set when some returned scores have the opposite sign to the mode
    /// (e.g. a negative-mode query on a neuron that never fires negatively).
    pub flagged: bool,
}

pub fn top_words_for_neuron(
    ds: &ActivationDataset,
    neuron: usize,
    k: usize,
    mode: TopWordsMode,
    min_occurrences: usize,
) -> Result<TopWordsReport> {
    let d = ds.dim();
    if neuron >= d {
        return Err(LcaError::IndexOutOfRange { index: neuron, limit: d });
    }
    if k == 0 {
        return Err(LcaError::InvalidConfig("k must be at least 1".into()));
    }
    let mut by_word: HashMap<&str, Vec<f32>> = HashMap::new();
    for s in &ds.sentences {
        for (tok, v) in s.tokens.iter().zip(s.activations.column(neuron)) {
            by_word.entry(tok.as_str()).or_default().push(*v);
        }
    }
    let mut scored: Vec<TopWord> = by_word
        .into_iter()
        .filter(|(_, vals)| vals.len() >= min_occurrences)
        .map(|(word, mut vals)| {
            // Summing in sorted order keeps the mean independent of sentence order.
            vals.sort_by(f32::total_cmp);
            let sum: f64 = vals.iter().map(|&v| v as f64).sum();
            let score = sum / vals.len() as f64;
            TopWord {
                word: word.to_string(),
                score,
                sign: Sign::of(score),
                count: vals.len(),
            }
        })
        .collect();
    let key = |w: &TopWord| match mode {
        TopWordsMode::Abs => w.score.abs(),
        TopWordsMode::Positive => w.score,
        TopWordsMode::Negative => -w.score,
    };
    scored.sort_by(|a, b| key(b).total_cmp(&key(a)).then_with(|| a.word.cmp(&b.word)));
    scored.truncate(k);
    let flagged = match mode {
        TopWordsMode::Abs => false,
        TopWordsMode::Positive => scored.iter().any(|w| w.score < 0.0),
        TopWordsMode::Negative => scored.iter().any(|w| w.score > 0.0),
    };
    Ok(TopWordsReport {
        neuron,
        mode,
        min_occurrences,
        words: scored,
        flagged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingComparison {
    pub base_layers: LayerHistogram,
    pub other_layers: LayerHistogram,
    /// `other - base`, per layer.
    pub layer_delta: Vec<i64>,
    pub top_n: usize,
    pub ordering_jaccard: f64,
    pub selection_jaccard: f64,
}

/// Jaccard index; two empty sets count as identical.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<usize> = a.iter().copied().collect();
    let b: BTreeSet<usize> = b.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Compares the ranking and selected set of two models over the same layout.
/// `top_n` defaults to the larger selection size when `None`.
pub fn compare_rankings(
    base: (&NeuronRanking, &[usize]),
    other: (&NeuronRanking, &[usize]),
    manifest: &ActivationManifest,
    top_n: Option<usize>,
) -> Result<RankingComparison> {
    let (base_rank, base_sel) = base;
    let (other_rank, other_sel) = other;
    if base_rank.feature_dim != other_rank.feature_dim {
        return Err(LcaError::FeatureDimMismatch {
            expected: base_rank.feature_dim,
            found: other_rank.feature_dim,
        });
    }
    let d = manifest.dim();
    let pair = base_rank.feature_dim == 2 * d;
    if !pair && base_rank.feature_dim != d {
        return Err(LcaError::FeatureDimMismatch {
            expected: d,
            found: base_rank.feature_dim,
        });
    }
    let base_layers = layer_histogram(base_sel, manifest, pair)?;
    let other_layers = layer_histogram(other_sel, manifest, pair)?;
    let layer_delta = base_layers
        .counts
        .iter()
        .zip(&other_layers.counts)
        .map(|(&b, &o)| o as i64 - b as i64)
        .collect();
    let top_n = top_n.unwrap_or_else(|| base_sel.len().max(other_sel.len()));
    Ok(RankingComparison {
        ordering_jaccard: jaccard(base_rank.top(top_n), other_rank.top(top_n)),
        selection_jaccard: jaccard(base_sel, other_sel),
        base_layers,
        other_layers,
        layer_delta,
        top_n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ActivationSentence;
    use crate::ranking::{extract_ordering, RankingConfig};
    use ndarray::Array2;

    #[test]
    fn histogram_examples() {
        let m = ActivationManifest::new(2, 3, "toy");
        let h = layer_histogram(&[0, 2, 5], &m, false).unwrap();
        assert_eq!(h.counts, vec![2, 1]);
        assert_eq!(h.total, 3);
        assert_eq!(layer_histogram(&[], &m, false).unwrap().counts, vec![0, 0]);
        let bert = ActivationManifest::new(13, 768, "bert");
        let h = layer_histogram(&[9983], &bert, false).unwrap();
        assert_eq!(h.counts[12], 1);
        assert!(matches!(
            layer_histogram(&[6], &m, false),
            Err(LcaError::IndexOutOfRange { index: 6, limit: 6 })
        ));
    }

    #[test]
    fn pair_histogram_folds_modifier_block() {
        let m = ActivationManifest::new(2, 3, "toy");
        let h = layer_histogram(&[1, 7, 10], &m, true).unwrap();
        assert_eq!(h.counts, vec![2, 1]);
        assert_eq!(h.head_counts, Some(vec![1, 0]));
        assert_eq!(h.modifier_counts, Some(vec![1, 1]));
        assert_eq!(h.to_csv(), "layer,count\n0,2\n1,1\n");
        assert!(h.bar_chart(10).contains("layer   0 | ##########"));
    }

    fn probe_rows(rows: Vec<Vec<f64>>) -> LinearProbe {
        let t = rows.len();
        let f = rows[0].len();
        let mut p = LinearProbe::zeros((0..t).map(|i| format!("T{i}")).collect(), f, false);
        p.theta = Array2::from_shape_fn((t, f), |(i, j)| rows[i][j]);
        p
    }

    #[test]
    fn spread_examples() {
        let mut onehot = vec![0.0; 8];
        onehot[3] = 2.0;
        let p = probe_rows(vec![onehot, vec![0.1; 8], vec![0.0; 8]]);
        for pct in [1.0, 50.0, 100.0] {
            let s = property_spread(&p, pct).unwrap();
            assert_eq!(s.per_tag_counts["T0"], 1);
            assert_eq!(s.skipped_tags, vec!["T2".to_string()]);
        }
        let s = property_spread(&p, 50.0).unwrap();
        assert_eq!(s.per_tag_counts["T1"], 4);
        let odd = probe_rows(vec![vec![0.5; 7]]);
        assert_eq!(property_spread(&odd, 50.0).unwrap().per_tag_counts["T0"], 4);
    }

    #[test]
    fn selectivity_examples() {
        let r = compute_selectivity(95.92, 64.08);
        assert!((r.selectivity - 31.84).abs() < 1e-9);
        assert_eq!(compute_selectivity(70.0, 70.0).selectivity, 0.0);
        assert_eq!(
            compute_selectivity(80.0, 30.0).selectivity,
            -compute_selectivity(30.0, 80.0).selectivity
        );
    }

    fn words_dataset(words: &[&str], values: &[f32]) -> ActivationDataset {
        let mut acts = Array2::zeros((words.len(), 6));
        for (r, &v) in values.iter().enumerate() {
            acts[[r, 5]] = v;
        }
        ActivationDataset {
            manifest: ActivationManifest::new(2, 3, "toy"),
            sentences: vec![ActivationSentence {
                sentence_id: 0,
                tokens: words.iter().map(|s| s.to_string()).collect(),
                activations: acts,
            }],
        }
    }

    #[test]
    fn top_word_is_the_firing_token() {
        let ds = words_dataset(
            &["the", "running", "dog", "running", "the"],
            &[0.0, 1.0, 0.0, 1.0, 0.0],
        );
        let r = top_words_for_neuron(&ds, 5, 1, TopWordsMode::Abs, 2).unwrap();
        assert_eq!(r.words.len(), 1);
        assert_eq!(r.words[0].word, "running");
        assert_eq!(r.words[0].score, 1.0);
        assert_eq!(r.words[0].sign, Sign::Positive);
        assert_eq!(r.words[0].count, 2);
        // "dog" is a hapax and filtered at min_occurrences = 2
        let r = top_words_for_neuron(&ds, 5, 5, TopWordsMode::Abs, 2).unwrap();
        assert_eq!(r.words.len(), 2);
    }

    #[test]
    fn negative_mode_on_positive_neuron_is_flagged() {
        let ds = words_dataset(&["a", "b", "c", "a", "b", "c"], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let r = top_words_for_neuron(&ds, 5, 2, TopWordsMode::Negative, 1).unwrap();
        assert_eq!(r.words.len(), 2);
        assert_eq!(r.words[0].word, "a");
        assert!(r.words.iter().all(|w| w.score > 0.0));
        assert!(r.flagged);
        assert!(top_words_for_neuron(&ds, 6, 2, TopWordsMode::Abs, 1).is_err());
    }

    fn ranking_of(dim: usize) -> NeuronRanking {
        let p = probe_rows(vec![(0..dim).map(|i| (dim - i) as f64).collect()]);
        extract_ordering(&p, &RankingConfig::default()).unwrap()
    }

    #[test]
    fn compare_identity_and_overlap() {
        let m = ActivationManifest::new(4, 5, "toy");
        let r = ranking_of(20);
        let sel: Vec<usize> = (0..10).collect();
        let c = compare_rankings((&r, &sel), (&r, &sel), &m, None).unwrap();
        assert!(c.layer_delta.iter().all(|&d| d == 0));
        assert_eq!(c.selection_jaccard, 1.0);
        assert_eq!(c.ordering_jaccard, 1.0);
        let other: Vec<usize> = (5..15).collect();
        let c = compare_rankings((&r, &sel), (&r, &other), &m, None).unwrap();
        assert!((c.selection_jaccard - 5.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn compare_detects_shift_to_lower_layers() {
        let m = ActivationManifest::new(13, 4, "toy");
        let r = ranking_of(52);
        let high: Vec<usize> = (40..52).collect();
        let low: Vec<usize> = (4..16).collect();
        let c = compare_rankings((&r, &high), (&r, &low), &m, None).unwrap();
        for l in 10..13 {
            assert!(c.layer_delta[l] < 0);
        }
        for l in 1..4 {
            assert!(c.layer_delta[l] > 0);
        }
        assert!(compare_rankings((&r, &high), (&ranking_of(20), &low), &m, None).is_err());
    }
}

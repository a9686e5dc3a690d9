//! Neuron subsets chosen from a ranking: minimal top prefixes found by
//! iterative retraining, and top/random/bottom subsets for ablation and
//! redundancy experiments. Accuracies here are percentages.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AlignedCorpus, CorpusTriple};
use crate::error::{LcaError, Result};
use crate::probe::{evaluate_accuracy, train_probe, LinearProbe, NeuronMask, RegularizationConfig, TrainConfig};
use crate::ranking::NeuronRanking;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    MinimalTop,
    Top,
    Random,
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetStrategy {
    Top,
    Random,
    Bottom,
}

impl SubsetStrategy {
    pub const ALL: [SubsetStrategy; 3] = [SubsetStrategy::Top, SubsetStrategy::Random, SubsetStrategy::Bottom];

    pub fn name(self) -> &'static str {
        match self {
            SubsetStrategy::Top => "top",
            SubsetStrategy::Random => "random",
            SubsetStrategy::Bottom => "bottom",
        }
    }
}

impl From<SubsetStrategy> for Strategy {
    fn from(s: SubsetStrategy) -> Strategy {
        match s {
            SubsetStrategy::Top => Strategy::Top,
            SubsetStrategy::Random => Strategy::Random,
            SubsetStrategy::Bottom => Strategy::Bottom,
        }
    }
}

impl std::str::FromStr for SubsetStrategy {
    type Err = LcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(SubsetStrategy::Top),
            "random" => Ok(SubsetStrategy::Random),
            "bottom" => Ok(SubsetStrategy::Bottom),
            other => Err(LcaError::InvalidConfig(format!(
                "unknown strategy {other:?} (expected top|random|bottom)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// Allowed accuracy loss against the oracle, in percentage points.
    pub delta: f64,
    pub step_percent: f64,
    pub max_percent: f64,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            delta: 1.0,
            step_percent: 1.0,
            max_percent: 100.0,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0) {
            return Err(LcaError::InvalidConfig("delta must be non-negative".into()));
        }
        if !(self.step_percent > 0.0 && self.step_percent <= 100.0) {
            return Err(LcaError::InvalidConfig(format!(
                "step_percent must be in (0, 100], got {}",
                self.step_percent
            )));
        }
        if !(self.max_percent >= self.step_percent && self.max_percent <= 100.0) {
            return Err(LcaError::InvalidConfig(format!(
                "max_percent must be in [step_percent, 100], got {}",
                self.max_percent
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub percent: f64,
    pub neuron_count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub strategy: Strategy,
    /// Ascending feature indices.
    pub neurons: Vec<usize>,
    pub percent: f64,
    pub accuracy: f64,
    pub oracle_accuracy: f64,
    /// Retrained on `neurons` only; its columns follow `neurons`.
    pub probe: LinearProbe,
    pub iterations: Vec<IterationRecord>,
    /// False when minimal selection hit `max_percent` without meeting the
    /// threshold; the result is then the best subset tried.
    pub threshold_reached: bool,
    pub delta: Option<f64>,
}

/// Serialized form of a [`SelectionResult`] (the retrained probe is stored
/// separately).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub strategy: Strategy,
    pub percent: f64,
    pub neuron_count: usize,
    pub neurons: Vec<usize>,
    pub accuracy: f64,
    pub oracle_accuracy: f64,
    pub delta: Option<f64>,
    pub iterations: Vec<IterationRecord>,
    pub threshold_reached: bool,
}

impl SelectionResult {
    pub fn report(&self) -> SelectionReport {
        SelectionReport {
            strategy: self.strategy,
            percent: self.percent,
            neuron_count: self.neurons.len(),
            neurons: self.neurons.clone(),
            accuracy: self.accuracy,
            oracle_accuracy: self.oracle_accuracy,
            delta: self.delta,
            iterations: self.iterations.clone(),
            threshold_reached: self.threshold_reached,
        }
    }
}

impl SelectionReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| LcaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SelectionReport> {
        let text = std::fs::read_to_string(path).map_err(|e| LcaError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| LcaError::InvalidRecord(format!("{}: {e}", path.display())))
    }
}

/// Neuron count for a percentage of `dim`: round half up, at least one.
pub fn percent_to_count(percent: f64, dim: usize) -> usize {
    let exact = percent * dim as f64 / 100.0;
    ((exact + 0.5).floor() as usize).clamp(1, dim.max(1))
}

fn check_percent(percent: f64) -> Result<()> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(LcaError::InvalidConfig(format!(
            "percent must be in (0, 100], got {percent}"
        )));
    }
    Ok(())
}

/// Neurons picked by `strategy`, ascending. Random subsets are a seeded
/// uniform sample without replacement.
pub fn subset_neurons(ranking: &NeuronRanking, strategy: SubsetStrategy, count: usize, seed: u64) -> Vec<usize> {
    let mut neurons = match strategy {
        SubsetStrategy::Top => ranking.top(count).to_vec(),
        SubsetStrategy::Bottom => ranking.bottom(count).to_vec(),
        SubsetStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, ranking.feature_dim, count.min(ranking.feature_dim)).into_vec()
        }
    };
    neurons.sort_unstable();
    neurons
}

fn normalize_subset(neurons: &[usize], dim: usize) -> Result<Vec<usize>> {
    if neurons.is_empty() {
        return Err(LcaError::EmptySubset);
    }
    let mut cols = neurons.to_vec();
    cols.sort_unstable();
    cols.dedup();
    if let Some(&bad) = cols.last().filter(|&&c| c >= dim) {
        return Err(LcaError::IndexOutOfRange {
            index: bad,
            limit: dim,
        });
    }
    Ok(cols)
}

/// Trains a fresh probe on the `neurons` columns only (others are dropped)
/// and reports its test accuracy in percent.
pub fn retrain_subset(
    corpora: &CorpusTriple,
    neurons: &[usize],
    reg: &RegularizationConfig,
    train_cfg: &TrainConfig,
) -> Result<(LinearProbe, f64)> {
    let cols = normalize_subset(neurons, corpora.feature_dim())?;
    let (train, test) = if cols.len() == corpora.feature_dim() {
        (None, None)
    } else {
        (
            Some(corpora.train.select_columns(&cols)?),
            Some(corpora.test.select_columns(&cols)?),
        )
    };
    let train = train.as_ref().unwrap_or(&corpora.train);
    let test = test.as_ref().unwrap_or(&corpora.test);
    let probe = train_probe(train, reg, train_cfg)?;
    let acc = 100.0 * evaluate_accuracy(&probe, test, None)?;
    Ok((probe, acc))
}

/// Smallest tested prefix of the ranking whose retrained test accuracy is
/// within `delta` points of the all-neuron oracle.
pub fn minimal_selection(
    corpora: &CorpusTriple,
    ranking: &NeuronRanking,
    reg: &RegularizationConfig,
    train_cfg: &TrainConfig,
    cfg: &SelectionConfig,
) -> Result<SelectionResult> {
    cfg.validate()?;
    let dim = corpora.feature_dim();
    if ranking.feature_dim != dim {
        return Err(LcaError::FeatureDimMismatch {
            expected: dim,
            found: ranking.feature_dim,
        });
    }
    let all: Vec<usize> = (0..dim).collect();
    let (_, oracle) = retrain_subset(corpora, &all, reg, train_cfg)?;
    let target = oracle - cfg.delta;

    let mut percents = Vec::new();
    let mut k = 1u32;
    loop {
        let p = k as f64 * cfg.step_percent;
        if p > cfg.max_percent + 1e-9 {
            break;
        }
        percents.push(p);
        k += 1;
    }
    if percents.last().is_some_and(|&p| p < cfg.max_percent - 1e-9) {
        percents.push(cfg.max_percent);
    }

    let mut iterations = Vec::new();
    let mut best: Option<(f64, usize, f64, LinearProbe, Vec<usize>)> = None;
    let mut last_count = 0;
    for p in percents {
        let count = percent_to_count(p, dim);
        if count == last_count {
            continue;
        }
        last_count = count;
        let neurons = subset_neurons(ranking, SubsetStrategy::Top, count, cfg.seed);
        let (probe, acc) = retrain_subset(corpora, &neurons, reg, train_cfg)?;
        log::info!("minimal selection: {p}% ({count} neurons) -> {acc:.2} (oracle {oracle:.2})");
        iterations.push(IterationRecord {
            percent: p,
            neuron_count: count,
            accuracy: acc,
        });
        if acc >= target {
            return Ok(SelectionResult {
                strategy: Strategy::MinimalTop,
                neurons,
                percent: p,
                accuracy: acc,
                oracle_accuracy: oracle,
                probe,
                iterations,
                threshold_reached: true,
                delta: Some(cfg.delta),
            });
        }
        if best.as_ref().is_none_or(|b| acc > b.0) {
            best = Some((acc, count, p, probe, neurons));
        }
    }

    let (acc, count, p, probe, neurons) = best.expect("at least one iteration");
    log::warn!(
        "threshold {target:.2} unreachable up to {}%; best was {acc:.2} with {count} neurons",
        cfg.max_percent
    );
    Ok(SelectionResult {
        strategy: Strategy::MinimalTop,
        neurons,
        percent: p,
        accuracy: acc,
        oracle_accuracy: oracle,
        probe,
        iterations,
        threshold_reached: false,
        delta: Some(cfg.delta),
    })
}

/// Retrains on a top/random/bottom subset of `percent` of the neurons.
/// The oracle (all-neuron) accuracy is trained here unless supplied.
#[allow(clippy::too_many_arguments)]
pub fn subset_experiment(
    corpora: &CorpusTriple,
    ranking: &NeuronRanking,
    strategy: SubsetStrategy,
    percent: f64,
    reg: &RegularizationConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    oracle_accuracy: Option<f64>,
) -> Result<SelectionResult> {
    check_percent(percent)?;
    let dim = corpora.feature_dim();
    let oracle = match oracle_accuracy {
        Some(a) => a,
        None => retrain_subset(corpora, &(0..dim).collect::<Vec<_>>(), reg, train_cfg)?.1,
    };
    let count = percent_to_count(percent, dim);
    let neurons = subset_neurons(ranking, strategy, count, seed);
    let (probe, accuracy) = retrain_subset(corpora, &neurons, reg, train_cfg)?;
    Ok(SelectionResult {
        strategy: strategy.into(),
        neurons,
        percent,
        accuracy,
        oracle_accuracy: oracle,
        probe,
        iterations: vec![IterationRecord {
            percent,
            neuron_count: count,
            accuracy,
        }],
        threshold_reached: true,
        delta: None,
    })
}

/// Mask-only ablation: evaluates `probe` with everything outside the chosen
/// subset zeroed. Returns percent.
pub fn mask_evaluate(
    probe: &LinearProbe,
    corpus: &AlignedCorpus,
    ranking: &NeuronRanking,
    strategy: SubsetStrategy,
    percent: f64,
    seed: u64,
) -> Result<f64> {
    check_percent(percent)?;
    let dim = probe.feature_dim();
    let count = percent_to_count(percent, dim);
    let neurons = subset_neurons(ranking, strategy, count, seed);
    let mask = NeuronMask::from_indices(&neurons, dim)?;
    Ok(100.0 * evaluate_accuracy(probe, corpus, Some(&mask))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::{extract_ordering, RankingConfig};
    use crate::synthetic::{PlantedCorpusSpec, PlantedFixture};

    #[test]
    fn percent_conversion_rounds_half_up() {
        assert_eq!(percent_to_count(20.0, 200), 40);
        assert_eq!(percent_to_count(1.0, 50), 1);
        assert_eq!(percent_to_count(3.0, 50), 2);
        assert_eq!(percent_to_count(5.0, 10), 1);
        assert_eq!(percent_to_count(15.0, 10), 2);
        assert_eq!(percent_to_count(0.1, 10), 1);
        assert_eq!(percent_to_count(100.0, 9984), 9984);
    }

    fn small_fixture() -> PlantedFixture {
        PlantedFixture::generate(&PlantedCorpusSpec {
            num_layers: 4,
            hidden_size: 10,
            num_planted: 4,
            train_tokens: 1500,
            dev_tokens: 300,
            test_tokens: 300,
            seed: 3,
            ..PlantedCorpusSpec::default()
        })
    }

    #[test]
    fn subset_sizes_match_across_strategies() {
        let fx = small_fixture();
        let c = fx.corpora().unwrap();
        let probe = train_probe(&c.train, &RegularizationConfig::NONE, &TrainConfig::default()).unwrap();
        let r = extract_ordering(&probe, &RankingConfig::default()).unwrap();
        for pct in [5.0, 20.0, 100.0] {
            let sizes: Vec<usize> = SubsetStrategy::ALL
                .iter()
                .map(|&s| subset_neurons(&r, s, percent_to_count(pct, 40), 9).len())
                .collect();
            assert!(sizes.iter().all(|&s| s == sizes[0]));
        }
        let all: Vec<Vec<usize>> = SubsetStrategy::ALL
            .iter()
            .map(|&s| subset_neurons(&r, s, 40, 9))
            .collect();
        assert!(all.iter().all(|s| *s == (0..40).collect::<Vec<_>>()));
    }

    #[test]
    fn full_subset_equals_oracle_training() {
        let fx = small_fixture();
        let c = fx.corpora().unwrap();
        let reg = RegularizationConfig::new(1e-4, 1e-4).unwrap();
        let cfg = TrainConfig::default();
        let (p, acc) = retrain_subset(&c, &(0..40).collect::<Vec<_>>(), &reg, &cfg).unwrap();
        let direct = train_probe(&c.train, &reg, &cfg).unwrap();
        assert_eq!(p, direct);
        assert_eq!(acc, 100.0 * evaluate_accuracy(&direct, &c.test, None).unwrap());
    }

    #[test]
    fn retrain_errors() {
        let fx = small_fixture();
        let c = fx.corpora().unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            retrain_subset(&c, &[], &RegularizationConfig::NONE, &cfg),
            Err(LcaError::EmptySubset)
        ));
        assert!(matches!(
            retrain_subset(&c, &[3, 40], &RegularizationConfig::NONE, &cfg),
            Err(LcaError::IndexOutOfRange { index: 40, .. })
        ));
    }

    #[test]
    fn vacuous_threshold_accepts_first_step() {
        let fx = small_fixture();
        let c = fx.corpora().unwrap();
        let cfg = TrainConfig::default();
        let probe = train_probe(&c.train, &RegularizationConfig::NONE, &cfg).unwrap();
        let r = extract_ordering(&probe, &RankingConfig::default()).unwrap();
        let sel = SelectionConfig {
            delta: 100.0,
            step_percent: 5.0,
            ..SelectionConfig::default()
        };
        let res = minimal_selection(&c, &r, &RegularizationConfig::NONE, &cfg, &sel).unwrap();
        assert_eq!(res.percent, 5.0);
        assert_eq!(res.neurons.len(), 2);
        assert!(res.threshold_reached);
        assert_eq!(res.iterations.len(), 1);
    }

    #[test]
    fn unreachable_threshold_returns_best_so_far() {
        let fx = small_fixture();
        let c = fx.corpora().unwrap();
        let cfg = TrainConfig::default();
        let probe = train_probe(&c.train, &RegularizationConfig::NONE, &cfg).unwrap();
        let mut r = extract_ordering(&probe, &RankingConfig::default()).unwrap();
        // Put pure-noise neurons at the head so a 1-2 neuron prefix cannot match the oracle.
        let planted = fx.planted();
        r.ordering.sort_by_key(|n| planted.contains(n));
        let sel = SelectionConfig {
            delta: 0.0,
            step_percent: 2.5,
            max_percent: 5.0,
            ..SelectionConfig::default()
        };
        let res = minimal_selection(&c, &r, &RegularizationConfig::NONE, &cfg, &sel).unwrap();
        assert!(!res.threshold_reached);
        assert_eq!(res.iterations.len(), 2);
        let best = res.iterations.iter().map(|i| i.accuracy).fold(f64::MIN, f64::max);
        assert_eq!(res.accuracy, best);
        assert!(res.neurons.iter().all(|n| !planted.contains(n)));
    }
}

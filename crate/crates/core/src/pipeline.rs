//! End-to-end run: lambda search, probe, ranking, minimal selection,
//! ablation, selectivity and layer/tag analyses, collected into a
//! [`RunRecord`].

use serde::{Deserialize, Serialize};

use crate::analysis::{acceptance_mass, compute_selectivity, layer_histogram, property_spread};
use crate::dataset::{ActivationManifest, ControlTask, CorpusTriple, LabelMode};
use crate::error::{LcaError, Result};
use crate::lambda_search::{grid_search, SearchConfig, SearchReport};
use crate::probe::{evaluate_accuracy, train_probe, LinearProbe, RegularizationConfig, TrainConfig};
use crate::ranking::{extract_ordering, NeuronRanking};
use crate::report::{ProbeSummary, RankingSummary, RunRecord, SelectivitySummary, SubsetTable};
use crate::selection::{
    mask_evaluate, minimal_selection, percent_to_count, retrain_subset, subset_experiment, SelectionConfig,
    SelectionResult, SubsetStrategy,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Seeds training shuffles, random subsets and the control task.
    pub seed: u64,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub selection: SelectionConfig,
    /// Skip the grid search and use these strengths.
    pub lambda: Option<RegularizationConfig>,
    /// Subset size for mask-only ablation; defaults to the search's M.
    pub ablation_percent: Option<f64>,
    /// Weight-mass percentage for the per-tag spread; defaults to the mass
    /// at which the minimal selection was complete.
    pub accept_p: Option<f64>,
    pub control_task: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            train: TrainConfig::default(),
            search: SearchConfig::default(),
            selection: SelectionConfig::default(),
            lambda: None,
            ablation_percent: None,
            accept_p: None,
            control_task: true,
        }
    }
}

impl PipelineConfig {
    /// Copies `seed` into every stochastic component.
    pub fn with_seed(mut self, seed: u64) -> PipelineConfig {
        self.seed = seed;
        self.train.seed = seed;
        self.selection.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.selection.validate()?;
        match &self.lambda {
            Some(reg) => {
                reg.validate()?;
                self.search.ranking.validate()?;
            }
            None => self.search.validate()?,
        }
        if let Some(p) = self.ablation_percent {
            if !(p > 0.0 && p <= 100.0) {
                return Err(LcaError::InvalidConfig(format!("ablation percent must be in (0, 100], got {p}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub record: RunRecord,
    pub probe: LinearProbe,
    pub ranking: NeuronRanking,
    pub search: Option<SearchReport>,
    pub selection: SelectionResult,
}

fn subset_table(
    ranking: &NeuronRanking,
    percent: f64,
    mut eval: impl FnMut(SubsetStrategy) -> Result<f64>,
    all: f64,
    retrained: bool,
) -> Result<SubsetTable> {
    Ok(SubsetTable {
        percent,
        neuron_count: percent_to_count(percent, ranking.feature_dim),
        retrained,
        all,
        top: eval(SubsetStrategy::Top)?,
        random: eval(SubsetStrategy::Random)?,
        bottom: eval(SubsetStrategy::Bottom)?,
    })
}

pub fn run_pipeline(corpora: &CorpusTriple, manifest: &ActivationManifest, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let cfg = cfg.clone().with_seed(cfg.seed);
    cfg.validate()?;
    let seed = cfg.seed;

    let search = match cfg.lambda {
        Some(_) => None,
        None => Some(grid_search(corpora, &cfg.search, &cfg.train)?),
    };
    let reg = match (&cfg.lambda, &search) {
        (Some(reg), _) => *reg,
        (None, Some(s)) => s.best_reg(),
        (None, None) => unreachable!(),
    };
    log::info!("probe lambda=({:e}, {:e})", reg.lambda1, reg.lambda2);

    let probe = train_probe(&corpora.train, &reg, &cfg.train)?;
    let mut ranking = extract_ordering(&probe, &cfg.search.ranking)?;
    ranking.manifest = Some(manifest.clone());
    let test_acc = 100.0 * evaluate_accuracy(&probe, &corpora.test, None)?;
    let probe_summary = ProbeSummary {
        feature_dim: probe.feature_dim(),
        num_tags: probe.num_tags(),
        lambda1: reg.lambda1,
        lambda2: reg.lambda2,
        train_accuracy: 100.0 * evaluate_accuracy(&probe, &corpora.train, None)?,
        dev_accuracy: 100.0 * evaluate_accuracy(&probe, &corpora.dev, None)?,
        test_accuracy: test_acc,
    };

    let ablation_percent = cfg.ablation_percent.unwrap_or(cfg.search.mass_fraction_m);
    let ablation = subset_table(
        &ranking,
        ablation_percent,
        |s| mask_evaluate(&probe, &corpora.test, &ranking, s, ablation_percent, seed),
        test_acc,
        false,
    )?;

    let selection = minimal_selection(corpora, &ranking, &reg, &cfg.train, &cfg.selection)?;
    let oracle = selection.oracle_accuracy;
    let redundancy = subset_table(
        &ranking,
        selection.percent,
        |s| match s {
            SubsetStrategy::Top => Ok(selection.accuracy),
            _ => Ok(subset_experiment(corpora, &ranking, s, selection.percent, &reg, &cfg.train, seed, Some(oracle))?
                .accuracy),
        },
        oracle,
        true,
    )?;

    let mode = corpora.train.mode;
    let selectivity = if cfg.control_task && mode == LabelMode::Token {
        let control = ControlTask::fit_corpus(&corpora.train, seed)?;
        let control_corpora = CorpusTriple {
            train: control.apply_corpus(&corpora.train)?,
            dev: control.apply_corpus(&corpora.dev)?,
            test: control.apply_corpus(&corpora.test)?,
        };
        let all: Vec<usize> = (0..corpora.feature_dim()).collect();
        let (_, control_all) = retrain_subset(&control_corpora, &all, &reg, &cfg.train)?;
        let (_, control_sel) = retrain_subset(&control_corpora, &selection.neurons, &reg, &cfg.train)?;
        Some(SelectivitySummary {
            all: compute_selectivity(oracle, control_all),
            selected: Some(compute_selectivity(selection.accuracy, control_sel)),
        })
    } else {
        if cfg.control_task {
            log::warn!("control task skipped: not defined for pair-mode labels");
        }
        None
    };

    let layers = layer_histogram(&selection.neurons, manifest, mode == LabelMode::Pair)?;
    let accept_p = cfg
        .accept_p
        .unwrap_or_else(|| acceptance_mass(&ranking, selection.neurons.len()));
    let spread = property_spread(&probe, accept_p)?;

    let mut record = RunRecord::new(seed);
    record.config.insert("pipeline".into(), serde_json::to_value(&cfg)?);
    record.manifest = Some(manifest.clone());
    record.mode = Some(mode);
    record.tag_vocab = corpora.train.tag_vocab.clone();
    record.probe = Some(probe_summary);
    record.search = search.clone();
    record.ranking = Some(RankingSummary::from(&ranking));
    record.ablation = Some(ablation);
    record.selection = Some(selection.report());
    record.redundancy = Some(redundancy);
    record.selectivity = selectivity;
    record.layers = Some(layers);
    record.spread = Some(spread);

    Ok(PipelineOutput {
        record,
        probe,
        ranking,
        search,
        selection,
    })
}

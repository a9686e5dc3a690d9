mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use lca_core::analysis::{
    acceptance_mass, compare_rankings, compute_selectivity, layer_histogram, property_spread,
    top_words_for_neuron, TopWordsMode,
};
use lca_core::dataset::{load_activations, load_manifest, ActivationManifest, ControlTask, CorpusTriple, LabelMode};
use lca_core::lambda_search::{cartesian_grid, grid_search, SearchConfig, DEFAULT_LAMBDAS};
use lca_core::pipeline::{run_pipeline, PipelineConfig};
use lca_core::probe::{evaluate_accuracy, train_probe, LinearProbe, RegularizationConfig, TrainConfig};
use lca_core::ranking::{extract_ordering, locate_feature, NeuronRanking, RankingConfig};
use lca_core::report::{emit_report, write_heatmap, RunRecord};
use lca_core::selection::{
    mask_evaluate, minimal_selection, retrain_subset, subset_experiment, SelectionConfig, SelectionReport,
    SubsetStrategy,
};
use lca_core::synthetic::{PlantedCorpusSpec, PlantedFixture};
use lca_core::{align_splits, load_labels, LcaError};

use config::ConfigFile;

/// Find, rank and analyze salient neurons in activation dumps with
/// elastic-net linear probes.
///
/// Exit status: 0 on success, 1 on invalid input or usage, 2 on runtime
/// failure.
#[derive(Debug, Parser)]
#[command(name = "neuron-lca", version)]
struct Cli {
    /// Flat `key = value` file; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one probe and report train/dev/test accuracy.
    Train(TrainCmd),
    /// Score every (lambda1, lambda2) grid cell on the dev split.
    GridSearch(GridSearchCmd),
    /// Order all neurons by probe weight mass.
    Rank(RankCmd),
    /// Smallest ranking prefix whose retrained probe stays within delta of the oracle.
    SelectMinimal(SelectMinimalCmd),
    /// Accuracy with only a top/random/bottom subset of neurons.
    Ablate(AblateCmd),
    /// Task accuracy minus control-task accuracy.
    Selectivity(SelectivityCmd),
    /// Histogram of neurons over layers.
    Layers(LayersCmd),
    /// Neurons needed per tag at a weight-mass percentage.
    Spread(SpreadCmd),
    /// Words with the largest mean activation for one neuron.
    TopWords(TopWordsCmd),
    /// HTML heatmap of one neuron over selected sentences.
    Visualize(VisualizeCmd),
    /// Compare rankings and selections of two pipeline output directories.
    Compare(CompareCmd),
    /// Grid search, train, rank, select, ablate, selectivity, layers, spread, report.
    Pipeline(PipelineCmd),
    /// Write a seeded planted-neuron corpus.
    MakeFixture(MakeFixtureCmd),
}

#[derive(Debug, Args, Clone, Default)]
struct DataArgs {
    /// Directory holding manifest.json, {train,dev,test}.activations.jsonl and
    /// {train,dev,test}.labels.tsv; individual paths override it.
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    train_activations: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    dev_activations: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    test_activations: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    train_labels: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    dev_labels: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    test_labels: Option<PathBuf>,
    /// token (one tag per token) or pair (head-modifier relations) [default: token]
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Debug, Args, Clone, Default)]
struct TrainArgs {
    /// Seed for shuffling, random subsets and control tasks
    /// [default: $NEURON_LCA_SEED, else 0]
    #[arg(long)]
    seed: Option<u64>,
    /// [default: 10]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 512]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam step size [default: 0.001]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Z-score each neuron with training-split statistics.
    #[arg(long)]
    standardize: bool,
    /// Train without a bias term.
    #[arg(long)]
    no_bias: bool,
}

#[derive(Debug, Args, Clone, Default)]
struct LambdaArgs {
    /// L1 strength [default: 0]
    #[arg(long)]
    lambda1: Option<f64>,
    /// L2 strength [default: 0]
    #[arg(long)]
    lambda2: Option<f64>,
}

#[derive(Debug, Args, Clone, Default)]
struct RankArgs {
    /// Weight-mass increment per ranking sweep step, in percent [default: 1]
    #[arg(long)]
    alpha_step: Option<f64>,
    /// First weight-mass percentage of the sweep [default: 1]
    #[arg(long)]
    start_p: Option<f64>,
}

#[derive(Debug, Args, Clone, Default)]
struct SearchArgs {
    /// Comma-separated values used for both lambda1 and lambda2
    /// [default: 0,1e-5,1e-4,1e-3,1e-2,1e-1]
    #[arg(long, value_name = "LIST")]
    lambdas: Option<String>,
    /// Percent of neurons kept at the head and tail of the ranking when scoring [default: 20]
    #[arg(long)]
    mass_fraction: Option<f64>,
    /// Weight of the top-bottom gap in the score [default: 0.5]
    #[arg(long)]
    score_alpha: Option<f64>,
    /// Weight of the regularization accuracy loss in the score [default: 0.5]
    #[arg(long)]
    score_beta: Option<f64>,
    /// Worker threads for grid cells [default: 1]
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args, Clone, Default)]
struct SelectArgs {
    /// Allowed accuracy loss against the oracle, in points [default: 1]
    #[arg(long)]
    delta: Option<f64>,
    /// [default: 1]
    #[arg(long)]
    step_percent: Option<f64>,
    /// [default: 100]
    #[arg(long)]
    max_percent: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    lambda: LambdaArgs,
    /// Where to write the probe.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GridSearchCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    rank: RankArgs,
    /// Write the search report as JSON.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RankCmd {
    /// Trained probe file.
    #[arg(long, value_name = "FILE")]
    probe: PathBuf,
    #[command(flatten)]
    rank: RankArgs,
    /// Optional manifest for layer/unit coordinates.
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    /// Neurons to print [default: 20]
    #[arg(long)]
    top: Option<usize>,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelectMinimalCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    lambda: LambdaArgs,
    #[command(flatten)]
    select: SelectArgs,
    #[arg(long, value_name = "FILE")]
    ranking: PathBuf,
    /// Take lambda1/lambda2 from this probe unless given explicitly.
    #[arg(long, value_name = "FILE")]
    probe: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Write the probe retrained on the selected neurons.
    #[arg(long, value_name = "FILE")]
    probe_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    lambda: LambdaArgs,
    #[arg(long, value_name = "FILE")]
    ranking: PathBuf,
    /// Probe to mask; with --retrain it only supplies lambda1/lambda2.
    #[arg(long, value_name = "FILE")]
    probe: Option<PathBuf>,
    /// top, random or bottom
    #[arg(long)]
    strategy: SubsetStrategy,
    /// Percent of neurons kept.
    #[arg(long)]
    percent: f64,
    /// Train a new probe on the subset instead of zeroing the other features.
    #[arg(long)]
    retrain: bool,
}

#[derive(Debug, Args)]
struct SelectivityCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    lambda: LambdaArgs,
    /// Restrict both probes to the neurons of this selection.
    #[arg(long, value_name = "FILE")]
    selection: Option<PathBuf>,
    /// Control labels for word types unseen in training are uniform over tags.
    #[arg(long)]
    unseen_uniform: bool,
}

#[derive(Debug, Args)]
struct LayersCmd {
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Neurons of this selection.
    #[arg(long, value_name = "FILE", conflicts_with = "ranking")]
    selection: Option<PathBuf>,
    /// First --top neurons of this ranking.
    #[arg(long, value_name = "FILE", requires = "top")]
    ranking: Option<PathBuf>,
    #[arg(long)]
    top: Option<usize>,
    /// Features are [head ; modifier] pairs.
    #[arg(long)]
    pair: bool,
    /// Write layer,count rows.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SpreadCmd {
    #[arg(long, value_name = "FILE")]
    probe: PathBuf,
    /// Weight-mass percentage; defaults to where the selection's last neuron entered the ranking.
    #[arg(long)]
    accept_p: Option<f64>,
    #[arg(long, value_name = "FILE")]
    ranking: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    selection: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TopWordsCmd {
    #[arg(long, value_name = "FILE")]
    activations: PathBuf,
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    #[arg(long)]
    neuron: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// abs, positive or negative
    #[arg(long, default_value = "abs")]
    mode: TopWordsMode,
    /// Ignore words seen fewer times.
    #[arg(long, default_value_t = 2)]
    min_occurrences: usize,
}

#[derive(Debug, Args)]
struct VisualizeCmd {
    #[arg(long, value_name = "FILE")]
    activations: PathBuf,
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    #[arg(long)]
    neuron: usize,
    /// Comma-separated sentence ids.
    #[arg(long, value_name = "IDS", value_delimiter = ',', required = true)]
    sentences: Vec<i64>,
    /// Output directory for neuron_<layer>_<unit>.html
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CompareCmd {
    /// Pipeline output directory.
    #[arg(long, value_name = "DIR")]
    base: PathBuf,
    #[arg(long, value_name = "DIR")]
    other: PathBuf,
    /// Ranking prefix length compared [default: larger selection size]
    #[arg(long)]
    top: Option<usize>,
}

#[derive(Debug, Args)]
struct PipelineCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    lambda: LambdaArgs,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    rank: RankArgs,
    #[command(flatten)]
    select: SelectArgs,
    /// Skip the grid search and use --lambda1/--lambda2.
    #[arg(long)]
    no_search: bool,
    /// Percent of neurons for the mask-only ablation table [default: --mass-fraction]
    #[arg(long)]
    ablation_percent: Option<f64>,
    /// Weight-mass percentage for the per-tag spread [default: selection's mass]
    #[arg(long)]
    accept_p: Option<f64>,
    /// Skip the control task.
    #[arg(long)]
    no_control: bool,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MakeFixtureCmd {
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    layers: usize,
    #[arg(long, default_value_t = 20)]
    hidden: usize,
    #[arg(long, default_value_t = 5)]
    tags: usize,
    /// Independent signals carried by planted neurons.
    #[arg(long, default_value_t = 10)]
    planted: usize,
    /// Neurons per signal.
    #[arg(long, default_value_t = 1)]
    copies: usize,
    #[arg(long, default_value_t = 10_000)]
    train_tokens: usize,
    #[arg(long, default_value_t = 1_000)]
    dev_tokens: usize,
    #[arg(long, default_value_t = 1_000)]
    test_tokens: usize,
}

struct Ctx {
    cfg: ConfigFile,
}

struct DataPaths {
    manifest: PathBuf,
    activations: [PathBuf; 3],
    labels: [PathBuf; 3],
    mode: LabelMode,
}

impl DataPaths {
    fn echo(&self) -> serde_json::Value {
        serde_json::json!({
            "manifest": self.manifest,
            "activations": self.activations,
            "labels": self.labels,
            "mode": self.mode,
        })
    }
}

fn pct(v: f64) -> String {
    format!("{v:.2}")
}

impl Ctx {
    fn data_paths(&self, a: &DataArgs) -> Result<DataPaths, LcaError> {
        let dir = self.cfg.path(a.data_dir.clone(), "data-dir");
        let resolve = |flag: &Option<PathBuf>, key: &str, file: &str| -> Result<PathBuf, LcaError> {
            let path = self
                .cfg
                .path(flag.clone(), key)
                .or_else(|| dir.as_ref().map(|d| d.join(file)))
                .ok_or_else(|| LcaError::InvalidConfig(format!("--{key} (or --data-dir) is required")))?;
            if !path.is_file() {
                return Err(LcaError::InvalidConfig(format!("{}: no such file", path.display())));
            }
            Ok(path)
        };
        let mode = match self.cfg.pick::<String>(a.mode.clone(), "mode")?.as_deref() {
            None | Some("token") => LabelMode::Token,
            Some("pair") => LabelMode::Pair,
            Some(other) => return Err(LcaError::InvalidConfig(format!("unknown mode {other:?} (token|pair)"))),
        };
        Ok(DataPaths {
            manifest: resolve(&a.manifest, "manifest", "manifest.json")?,
            activations: [
                resolve(&a.train_activations, "train-activations", "train.activations.jsonl")?,
                resolve(&a.dev_activations, "dev-activations", "dev.activations.jsonl")?,
                resolve(&a.test_activations, "test-activations", "test.activations.jsonl")?,
            ],
            labels: [
                resolve(&a.train_labels, "train-labels", "train.labels.tsv")?,
                resolve(&a.dev_labels, "dev-labels", "dev.labels.tsv")?,
                resolve(&a.test_labels, "test-labels", "test.labels.tsv")?,
            ],
            mode,
        })
    }

    fn load_data(&self, a: &DataArgs) -> anyhow::Result<(DataPaths, ActivationManifest, CorpusTriple)> {
        let paths = self.data_paths(a)?;
        let manifest = load_manifest(&paths.manifest)?;
        let mut ds = Vec::with_capacity(3);
        let mut ls = Vec::with_capacity(3);
        for (act, lab) in paths.activations.iter().zip(&paths.labels) {
            ds.push(load_activations(act, &paths.manifest)?);
            ls.push(load_labels(lab, paths.mode)?);
        }
        let corpora = align_splits([&ds[0], &ds[1], &ds[2]], [&ls[0], &ls[1], &ls[2]])?;
        log::info!(
            "loaded {} / {} / {} samples, F={}, {} tags",
            corpora.train.num_samples(),
            corpora.dev.num_samples(),
            corpora.test.num_samples(),
            corpora.feature_dim(),
            corpora.train.num_tags()
        );
        Ok((paths, manifest, corpora))
    }

    fn train_config(&self, a: &TrainArgs) -> Result<TrainConfig, LcaError> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            seed: self.cfg.seed(a.seed)?,
            epochs: self.cfg.pick_or(a.epochs, "epochs", d.epochs)?,
            batch_size: self.cfg.pick_or(a.batch_size, "batch-size", d.batch_size)?,
            learning_rate: self.cfg.pick_or(a.learning_rate, "learning-rate", d.learning_rate)?,
            standardize: self.cfg.switch(a.standardize, "standardize")?,
            use_bias: !self.cfg.switch(a.no_bias, "no-bias")?,
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn reg(&self, a: &LambdaArgs, probe: Option<&Path>) -> anyhow::Result<RegularizationConfig> {
        let from_probe = match probe {
            Some(p) => Some(load_probe(p)?.reg),
            None => None,
        };
        let base = from_probe.unwrap_or(RegularizationConfig::NONE);
        Ok(RegularizationConfig::new(
            self.cfg.pick_or(a.lambda1, "lambda1", base.lambda1)?,
            self.cfg.pick_or(a.lambda2, "lambda2", base.lambda2)?,
        )?)
    }

    fn ranking_config(&self, a: &RankArgs) -> Result<RankingConfig, LcaError> {
        let d = RankingConfig::default();
        let cfg = RankingConfig {
            alpha_step: self.cfg.pick_or(a.alpha_step, "alpha-step", d.alpha_step)?,
            start_p: self.cfg.pick_or(a.start_p, "start-p", d.start_p)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn search_config(&self, a: &SearchArgs, rank: &RankArgs) -> Result<SearchConfig, LcaError> {
        let d = SearchConfig::default();
        let grid = match self.cfg.pick::<String>(a.lambdas.clone(), "lambdas")? {
            None => cartesian_grid(&DEFAULT_LAMBDAS, &DEFAULT_LAMBDAS),
            Some(list) => {
                let values = list
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| LcaError::InvalidConfig(format!("lambdas {list:?}: {e}")))?;
                cartesian_grid(&values, &values)
            }
        };
        let cfg = SearchConfig {
            grid,
            mass_fraction_m: self.cfg.pick_or(a.mass_fraction, "mass-fraction", d.mass_fraction_m)?,
            weight_alpha: self.cfg.pick_or(a.score_alpha, "score-alpha", d.weight_alpha)?,
            weight_beta: self.cfg.pick_or(a.score_beta, "score-beta", d.weight_beta)?,
            ranking: self.ranking_config(rank)?,
            jobs: self.cfg.pick_or(a.jobs, "jobs", d.jobs)?.max(1),
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn selection_config(&self, a: &SelectArgs, seed: u64) -> Result<SelectionConfig, LcaError> {
        let d = SelectionConfig::default();
        let cfg = SelectionConfig {
            delta: self.cfg.pick_or(a.delta, "delta", d.delta)?,
            step_percent: self.cfg.pick_or(a.step_percent, "step-percent", d.step_percent)?,
            max_percent: self.cfg.pick_or(a.max_percent, "max-percent", d.max_percent)?,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_probe(path: &Path) -> anyhow::Result<LinearProbe> {
    if !path.is_file() {
        return Err(LcaError::MissingProbe(format!("{} does not exist; run `train` first", path.display())).into());
    }
    Ok(LinearProbe::load(path)?)
}

fn load_ranking(path: &Path) -> anyhow::Result<NeuronRanking> {
    if !path.is_file() {
        return Err(LcaError::InvalidConfig(format!("{}: no such ranking file", path.display())).into());
    }
    Ok(NeuronRanking::load(path)?)
}

fn load_selection(path: &Path) -> anyhow::Result<SelectionReport> {
    if !path.is_file() {
        return Err(LcaError::InvalidConfig(format!("{}: no such selection file", path.display())).into());
    }
    Ok(SelectionReport::load(path)?)
}

fn check_ranking_dim(ranking: &NeuronRanking, corpora: &CorpusTriple) -> Result<(), LcaError> {
    if ranking.feature_dim != corpora.feature_dim() {
        return Err(LcaError::FeatureDimMismatch {
            expected: corpora.feature_dim(),
            found: ranking.feature_dim,
        });
    }
    Ok(())
}

fn cmd_train(ctx: &Ctx, c: &TrainCmd) -> anyhow::Result<()> {
    let (_, _, corpora) = ctx.load_data(&c.data)?;
    let cfg = ctx.train_config(&c.train)?;
    let reg = ctx.reg(&c.lambda, None)?;
    let probe = train_probe(&corpora.train, &reg, &cfg)?;
    probe.save(&c.out)?;
    println!("lambda1={:e} lambda2={:e}", reg.lambda1, reg.lambda2);
    for (name, split) in [("train", &corpora.train), ("dev", &corpora.dev), ("test", &corpora.test)] {
        println!("{name:<6}{:>8}", pct(100.0 * evaluate_accuracy(&probe, split, None)?));
    }
    println!("probe written to {}", c.out.display());
    Ok(())
}

fn cmd_grid_search(ctx: &Ctx, c: &GridSearchCmd) -> anyhow::Result<()> {
    let (_, _, corpora) = ctx.load_data(&c.data)?;
    let train = ctx.train_config(&c.train)?;
    let search = ctx.search_config(&c.search, &c.rank)?;
    let report = grid_search(&corpora, &search, &train)?;
    println!(
        "{:>10} {:>10} {:>8} {:>8} {:>8} {:>8} {:>9}",
        "lambda1", "lambda2", "top", "bottom", "acc", "noreg", "score"
    );
    for cell in report.sorted_by_score() {
        println!(
            "{:>10e} {:>10e} {:>8} {:>8} {:>8} {:>8} {:>9.4}",
            cell.lambda1,
            cell.lambda2,
            pct(cell.acc_top),
            pct(cell.acc_bottom),
            pct(cell.acc_lambda),
            pct(cell.acc_noreg),
            cell.score
        );
    }
    println!("best: lambda1={:e} lambda2={:e}", report.best.lambda1, report.best.lambda2);
    if let Some(out) = &c.out {
        report.save(out)?;
    }
    Ok(())
}

fn cmd_rank(ctx: &Ctx, c: &RankCmd) -> anyhow::Result<()> {
    let probe = load_probe(&c.probe)?;
    let cfg = ctx.ranking_config(&c.rank)?;
    let mut ranking = extract_ordering(&probe, &cfg)?;
    let manifest = ctx.cfg.path(c.manifest.clone(), "manifest").map(|p| load_manifest(&p)).transpose()?;
    ranking.manifest = manifest.clone();
    let top = c.top.unwrap_or(20).min(ranking.ordering.len());
    for (rank, &n) in ranking.top(top).iter().enumerate() {
        match &manifest {
            Some(m) => {
                let loc = locate_feature(n, m, ranking.feature_dim)?;
                let side = loc.side.map(|s| format!(" {s:?}").to_lowercase()).unwrap_or_default();
                println!("{rank:>5} {n:>8}  layer {:>3} unit {:>5}{side}", loc.layer, loc.unit);
            }
            None => println!("{rank:>5} {n:>8}"),
        }
    }
    if !ranking.zero_weight_neurons.is_empty() {
        println!("{} neuron(s) with zero weight appended last", ranking.zero_weight_neurons.len());
    }
    if let Some(out) = &c.out {
        ranking.save(out)?;
    }
    Ok(())
}

fn cmd_select_minimal(ctx: &Ctx, c: &SelectMinimalCmd) -> anyhow::Result<()> {
    let (_, _, corpora) = ctx.load_data(&c.data)?;
    let train = ctx.train_config(&c.train)?;
    let reg = ctx.reg(&c.lambda, c.probe.as_deref())?;
    let sel_cfg = ctx.selection_config(&c.select, train.seed)?;
    let ranking = load_ranking(&c.ranking)?;
    check_ranking_dim(&ranking, &corpora)?;
    let result = minimal_selection(&corpora, &ranking, &reg, &train, &sel_cfg)?;
    for it in &result.iterations {
        println!("{:>7.2}% {:>7} neurons  {:>7}", it.percent, it.neuron_count, pct(it.accuracy));
    }
    println!(
        "selected {} neurons ({}%): {} vs oracle {}{}",
        result.neurons.len(),
        result.percent,
        pct(result.accuracy),
        pct(result.oracle_accuracy),
        if result.threshold_reached { "" } else { " (threshold not reached)" }
    );
    if let Some(out) = &c.out {
        result.report().save(out)?;
    }
    if let Some(out) = &c.probe_out {
        result.probe.save(out)?;
    }
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, c: &AblateCmd) -> anyhow::Result<()> {
    let (_, _, corpora) = ctx.load_data(&c.data)?;
    let train = ctx.train_config(&c.train)?;
    let ranking = load_ranking(&c.ranking)?;
    check_ranking_dim(&ranking, &corpora)?;
    if c.retrain {
        let reg = ctx.reg(&c.lambda, c.probe.as_deref())?;
        let r = subset_experiment(&corpora, &ranking, c.strategy, c.percent, &reg, &train, train.seed, None)?;
        println!("all (retrained) {:>8}", pct(r.oracle_accuracy));
        println!("{:<15} {:>8}  ({} neurons)", c.strategy.name(), pct(r.accuracy), r.neurons.len());
    } else {
        let path = c
            .probe
            .as_ref()
            .ok_or_else(|| LcaError::InvalidConfig("mask-only ablation needs --probe".into()))?;
        let probe = load_probe(path)?;
        let all = 100.0 * evaluate_accuracy(&probe, &corpora.test, None)?;
        let acc = mask_evaluate(&probe, &corpora.test, &ranking, c.strategy, c.percent, train.seed)?;
        println!("all {:>8}", pct(all));
        println!("{:<6} {:>8}  ({}% of neurons, others zeroed)", c.strategy.name(), pct(acc), c.percent);
    }
    Ok(())
}

fn cmd_selectivity(ctx: &Ctx, c: &SelectivityCmd) -> anyhow::Result<()> {
    let (_, _, corpora) = ctx.load_data(&c.data)?;
    let train = ctx.train_config(&c.train)?;
    let reg = ctx.reg(&c.lambda, None)?;
    let mut control = ControlTask::fit_corpus(&corpora.train, train.seed)?;
    control.unseen_uniform = c.unseen_uniform;
    let control_corpora = CorpusTriple {
        train: control.apply_corpus(&corpora.train)?,
        dev: control.apply_corpus(&corpora.dev)?,
        test: control.apply_corpus(&corpora.test)?,
    };
    let neurons: Vec<usize> = match &c.selection {
        Some(p) => load_selection(p)?.neurons,
        None => (0..corpora.feature_dim()).collect(),
    };
    let (_, task) = retrain_subset(&corpora, &neurons, &reg, &train)?;
    let (_, ctrl) = retrain_subset(&control_corpora, &neurons, &reg, &train)?;
    let s = compute_selectivity(task, ctrl);
    println!("neurons      {:>8}", neurons.len());
    println!("task         {:>8}", pct(s.task_accuracy));
    println!("control      {:>8}", pct(s.control_accuracy));
    println!("selectivity  {:>8}", pct(s.selectivity));
    Ok(())
}

fn cmd_layers(c: &LayersCmd) -> anyhow::Result<()> {
    let manifest = load_manifest(&c.manifest)?;
    let (neurons, pair) = match (&c.selection, &c.ranking) {
        (Some(p), _) => (load_selection(p)?.neurons, c.pair),
        (None, Some(p)) => {
            let r = load_ranking(p)?;
            let top = c.top.unwrap_or(r.ordering.len());
            (r.top(top).to_vec(), c.pair || r.feature_dim == 2 * manifest.dim())
        }
        (None, None) => {
            return Err(LcaError::InvalidConfig("give --selection or --ranking with --top".into()).into());
        }
    };
    let hist = layer_histogram(&neurons, &manifest, pair)?;
    print!("{}", hist.bar_chart(40));
    if let (Some(h), Some(m)) = (&hist.head_counts, &hist.modifier_counts) {
        println!("head: {h:?}");
        println!("modifier: {m:?}");
    }
    if let Some(out) = &c.csv {
        std::fs::write(out, hist.to_csv()).with_context(|| out.display().to_string())?;
    }
    Ok(())
}

fn cmd_spread(ctx: &Ctx, c: &SpreadCmd) -> anyhow::Result<()> {
    let probe = load_probe(&c.probe)?;
    let accept_p = match ctx.cfg.pick(c.accept_p, "accept-p")? {
        Some(p) => p,
        None => match (&c.ranking, &c.selection) {
            (Some(r), Some(s)) => acceptance_mass(&load_ranking(r)?, load_selection(s)?.neuron_count),
            _ => {
                return Err(LcaError::InvalidConfig("give --accept-p, or --ranking with --selection".into()).into());
            }
        },
    };
    let spread = property_spread(&probe, accept_p)?;
    println!("neurons per tag at {accept_p:.2}% weight mass (a neuron may count for several tags)");
    for (tag, n) in &spread.per_tag_counts {
        println!("{tag:<16}{n:>8}");
    }
    for tag in &spread.skipped_tags {
        println!("{tag:<16}{:>8}", "-");
    }
    Ok(())
}

fn cmd_top_words(c: &TopWordsCmd) -> anyhow::Result<()> {
    let ds = load_activations(&c.activations, &c.manifest)?;
    let report = top_words_for_neuron(&ds, c.neuron, c.k, c.mode, c.min_occurrences)?;
    for w in &report.words {
        println!("{:<20} {:>10.4} {} (n={})", w.word, w.score, w.sign.symbol(), w.count);
    }
    if report.flagged {
        println!("note: some scores have the opposite sign to the requested mode");
    }
    Ok(())
}

fn cmd_visualize(c: &VisualizeCmd) -> anyhow::Result<()> {
    let ds = load_activations(&c.activations, &c.manifest)?;
    let path = write_heatmap(&ds, c.neuron, &c.sentences, &c.out)?;
    println!("{}", path.display());
    Ok(())
}

fn load_run_dir(dir: &Path) -> anyhow::Result<(RunRecord, NeuronRanking, SelectionReport)> {
    let run = dir.join("run.json");
    if !run.is_file() {
        return Err(LcaError::InvalidConfig(format!("{}: not a pipeline output directory", dir.display())).into());
    }
    Ok((
        RunRecord::load(&run)?,
        load_ranking(&dir.join("ranking.json"))?,
        load_selection(&dir.join("selection.json"))?,
    ))
}

fn cmd_compare(c: &CompareCmd) -> anyhow::Result<()> {
    let (base_run, base_rank, base_sel) = load_run_dir(&c.base)?;
    let (other_run, other_rank, other_sel) = load_run_dir(&c.other)?;
    let manifest = base_run
        .manifest
        .ok_or_else(|| LcaError::InvalidRecord("base run.json has no manifest".into()))?;
    if other_run.manifest.as_ref().is_some_and(|m| m.dim() != manifest.dim()) {
        return Err(LcaError::InvalidConfig("runs were made on different activation layouts".into()).into());
    }
    let cmp = compare_rankings((&base_rank, &base_sel.neurons), (&other_rank, &other_sel.neurons), &manifest, c.top)?;
    println!("{:<8}{:>8}{:>8}{:>8}", "layer", "base", "other", "delta");
    for (l, ((b, o), d)) in cmp
        .base_layers
        .counts
        .iter()
        .zip(&cmp.other_layers.counts)
        .zip(&cmp.layer_delta)
        .enumerate()
    {
        println!("{l:<8}{b:>8}{o:>8}{d:>+8}");
    }
    println!("top-{} ranking overlap (Jaccard) {:.4}", cmp.top_n, cmp.ordering_jaccard);
    println!("selection overlap (Jaccard)     {:.4}", cmp.selection_jaccard);
    Ok(())
}

fn cmd_pipeline(ctx: &Ctx, c: &PipelineCmd) -> anyhow::Result<()> {
    let (paths, manifest, corpora) = ctx.load_data(&c.data)?;
    let train = ctx.train_config(&c.train)?;
    let seed = train.seed;
    let no_search = c.no_search || c.lambda.lambda1.is_some() && c.lambda.lambda2.is_some();
    let cfg = PipelineConfig {
        seed,
        train,
        search: ctx.search_config(&c.search, &c.rank)?,
        selection: ctx.selection_config(&c.select, seed)?,
        lambda: if no_search { Some(ctx.reg(&c.lambda, None)?) } else { None },
        ablation_percent: ctx.cfg.pick(c.ablation_percent, "ablation-percent")?,
        accept_p: ctx.cfg.pick(c.accept_p, "accept-p")?,
        control_task: !ctx.cfg.switch(c.no_control, "no-control")?,
    };
    let mut out = run_pipeline(&corpora, &manifest, &cfg)?;
    out.record.config.insert("inputs".into(), paths.echo());

    std::fs::create_dir_all(&c.out).with_context(|| c.out.display().to_string())?;
    out.probe.save(&c.out.join("probe.json"))?;
    out.ranking.save(&c.out.join("ranking.json"))?;
    out.selection.report().save(&c.out.join("selection.json"))?;
    out.selection.probe.save(&c.out.join("selected_probe.json"))?;
    if let Some(search) = &out.search {
        search.save(&c.out.join("search.json"))?;
    }
    emit_report(&out.record, &c.out)?;
    print!("{}", lca_core::report::render_tables(&out.record));
    println!("outputs written to {}", c.out.display());
    Ok(())
}

fn cmd_make_fixture(c: &MakeFixtureCmd) -> anyhow::Result<()> {
    let spec = PlantedCorpusSpec {
        num_layers: c.layers,
        hidden_size: c.hidden,
        num_tags: c.tags,
        num_planted: c.planted,
        copies: c.copies,
        train_tokens: c.train_tokens,
        dev_tokens: c.dev_tokens,
        test_tokens: c.test_tokens,
        seed: c.seed,
        ..PlantedCorpusSpec::default()
    };
    if spec.num_layers == 0 || spec.hidden_size == 0 || spec.num_tags < 2 || spec.num_planted == 0 || spec.copies == 0 {
        return Err(LcaError::InvalidConfig("layers, hidden, planted and copies must be positive; tags at least 2".into()).into());
    }
    if spec.num_planted * spec.copies > spec.num_layers * spec.hidden_size {
        return Err(LcaError::InvalidConfig("more planted neurons than layers x hidden".into()).into());
    }
    let fx = PlantedFixture::generate(&spec);
    fx.write(&c.out)?;
    println!("planted neurons: {:?}", fx.planted());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let ctx = Ctx { cfg };
    match &cli.command {
        Command::Train(c) => cmd_train(&ctx, c),
        Command::GridSearch(c) => cmd_grid_search(&ctx, c),
        Command::Rank(c) => cmd_rank(&ctx, c),
        Command::SelectMinimal(c) => cmd_select_minimal(&ctx, c),
        Command::Ablate(c) => cmd_ablate(&ctx, c),
        Command::Selectivity(c) => cmd_selectivity(&ctx, c),
        Command::Layers(c) => cmd_layers(c),
        Command::Spread(c) => cmd_spread(&ctx, c),
        Command::TopWords(c) => cmd_top_words(c),
        Command::Visualize(c) => cmd_visualize(c),
        Command::Compare(c) => cmd_compare(c),
        Command::Pipeline(c) => cmd_pipeline(&ctx, c),
        Command::MakeFixture(c) => cmd_make_fixture(c),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<LcaError>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

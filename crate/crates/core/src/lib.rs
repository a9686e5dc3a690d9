//! Neuron-level analysis of activation dumps: elastic-net probes over
//! per-token activations, weight-mass neuron rankings, minimal subset
//! selection, control tasks and reporting.

pub mod analysis;
pub mod dataset;
pub mod error;
pub mod lambda_search;
pub mod pipeline;
pub mod probe;
pub mod ranking;
pub mod report;
pub mod selection;
pub mod synthetic;

pub use dataset::{
    align_corpus, align_splits, load_activations, load_labels, load_manifest, make_control_task, ActivationDataset,
    ActivationManifest, AlignedCorpus, ControlTask, CorpusTriple, LabelMode, LabelSet,
};
pub use error::{LcaError, Result};
pub use lambda_search::{grid_search, score_lambdas, SearchConfig, SearchReport};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineOutput};
pub use probe::{evaluate_accuracy, train_probe, LinearProbe, NeuronMask, RegularizationConfig, TrainConfig};
pub use ranking::{extract_ordering, top_neurons_for_tag, NeuronRanking, RankingConfig};
pub use report::{emit_report, render_heatmap, RunRecord};
pub use selection::{minimal_selection, subset_experiment, SelectionConfig, SelectionResult, SubsetStrategy};

//! Grid search over elastic-net strengths, scored by how well the resulting
//! ranking separates its head from its tail under ablation.
//!
//! For each `(lambda1, lambda2)` cell the score is
//! `alpha * (acc_top - acc_bottom) - beta * (acc_noreg - acc_lambda)`, with all
//! accuracies in percent on the dev split. `acc_top`/`acc_bottom` keep only the
//! first/last `M%` of the ranking and zero the other features, without
//! retraining.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::CorpusTriple;
use crate::error::{LcaError, Result};
use crate::probe::{evaluate_accuracy, train_probe, NeuronMask, RegularizationConfig, TrainConfig};
use crate::ranking::{extract_ordering, RankingConfig};
use crate::selection::percent_to_count;

pub const DEFAULT_LAMBDAS: [f64; 6] = [0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Dev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub grid: Vec<RegularizationConfig>,
    /// Percentage of neurons kept at the head/tail of the ranking.
    pub mass_fraction_m: f64,
    pub weight_alpha: f64,
    pub weight_beta: f64,
    pub eval_split: EvalSplit,
    pub ranking: RankingConfig,
    /// Worker threads for independent cells; 1 runs them in order.
    pub jobs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            grid: cartesian_grid(&DEFAULT_LAMBDAS, &DEFAULT_LAMBDAS),
            mass_fraction_m: 20.0,
            weight_alpha: 0.5,
            weight_beta: 0.5,
            eval_split: EvalSplit::Dev,
            ranking: RankingConfig::default(),
            jobs: 1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(LcaError::EmptyGrid);
        }
        for reg in &self.grid {
            reg.validate()?;
        }
        if !(self.mass_fraction_m > 0.0 && self.mass_fraction_m <= 50.0) {
            return Err(LcaError::InvalidConfig(format!(
                "M must be in (0, 50], got {}",
                self.mass_fraction_m
            )));
        }
        if !(self.weight_alpha >= 0.0 && self.weight_beta >= 0.0) {
            return Err(LcaError::InvalidConfig(
                "score weights must be non-negative".into(),
            ));
        }
        self.ranking.validate()
    }
}

/// Every `(lambda1, lambda2)` pair, lambda1-major.
pub fn cartesian_grid(lambda1: &[f64], lambda2: &[f64]) -> Vec<RegularizationConfig> {
    lambda1
        .iter()
        .flat_map(|&l1| {
            lambda2.iter().map(move |&l2| RegularizationConfig {
                lambda1: l1,
                lambda2: l2,
            })
        })
        .collect()
}

/// Accuracies (percent) feeding the score of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreInputs {
    pub acc_top: f64,
    pub acc_bottom: f64,
    pub acc_noreg: f64,
    pub acc_lambda: f64,
}

pub fn score_lambdas(s: &ScoreInputs, alpha: f64, beta: f64) -> f64 {
    alpha * (s.acc_top - s.acc_bottom) - beta * (s.acc_noreg - s.acc_lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchCell {
    pub lambda1: f64,
    pub lambda2: f64,
    pub acc_top: f64,
    pub acc_bottom: f64,
    pub acc_lambda: f64,
    pub acc_noreg: f64,
    pub score: f64,
}

impl SearchCell {
    pub fn reg(&self) -> RegularizationConfig {
        RegularizationConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    /// Strictly preferred over `other`: higher score, then stronger total
    /// regularization, then larger lambda1.
    fn beats(&self, other: &SearchCell) -> bool {
        let key = |c: &SearchCell| (c.score, c.lambda1 + c.lambda2, c.lambda1);
        let (a, b) = (key(self), key(other));
        a.0.total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
            .is_gt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    /// One record per grid cell, in grid order.
    pub cells: Vec<SearchCell>,
    pub best: SearchCell,
}

impl SearchReport {
    pub fn best_reg(&self) -> RegularizationConfig {
        self.best.reg()
    }

    /// Cells by descending score (stable for equal scores).
    pub fn sorted_by_score(&self) -> Vec<SearchCell> {
        let mut cells = self.cells.clone();
        cells.sort_by(|a, b| b.score.total_cmp(&a.score));
        cells
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| LcaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SearchReport> {
        let text = std::fs::read_to_string(path).map_err(|e| LcaError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| LcaError::InvalidRecord(format!("{}: {e}", path.display())))
    }
}

fn pick_best(cells: &[SearchCell]) -> SearchCell {
    let mut best = cells[0];
    for c in &cells[1..] {
        if c.beats(&best) {
            best = *c;
        }
    }
    best
}

fn evaluate_cell(
    corpora: &CorpusTriple,
    reg: RegularizationConfig,
    acc_noreg: f64,
    cfg: &SearchConfig,
    train_cfg: &TrainConfig,
) -> Result<SearchCell> {
    let dev = &corpora.dev;
    let dim = corpora.feature_dim();
    let probe = train_probe(&corpora.train, &reg, train_cfg)?;
    let ranking = extract_ordering(&probe, &cfg.ranking)?;
    let keep = percent_to_count(cfg.mass_fraction_m, dim);
    let top = NeuronMask::from_indices(ranking.top(keep), dim)?;
    let bottom = NeuronMask::from_indices(ranking.bottom(keep), dim)?;
    let inputs = ScoreInputs {
        acc_top: 100.0 * evaluate_accuracy(&probe, dev, Some(&top))?,
        acc_bottom: 100.0 * evaluate_accuracy(&probe, dev, Some(&bottom))?,
        acc_noreg,
        acc_lambda: 100.0 * evaluate_accuracy(&probe, dev, None)?,
    };
    let score = score_lambdas(&inputs, cfg.weight_alpha, cfg.weight_beta);
    log::info!(
        "lambda=({:e}, {:e}) top={:.2} bottom={:.2} acc={:.2} score={:.4}",
        reg.lambda1,
        reg.lambda2,
        inputs.acc_top,
        inputs.acc_bottom,
        inputs.acc_lambda,
        score
    );
    Ok(SearchCell {
        lambda1: reg.lambda1,
        lambda2: reg.lambda2,
        acc_top: inputs.acc_top,
        acc_bottom: inputs.acc_bottom,
        acc_lambda: inputs.acc_lambda,
        acc_noreg,
        score,
    })
}

/// Trains one probe per grid cell and returns the best-scoring cell with the
/// full table.
pub fn grid_search(
    corpora: &CorpusTriple,
    cfg: &SearchConfig,
    train_cfg: &TrainConfig,
) -> Result<SearchReport> {
    cfg.validate()?;
    train_cfg.validate()?;
    if corpora.train.num_samples() == 0 || corpora.dev.num_samples() == 0 {
        return Err(LcaError::EmptyCorpus);
    }
    let noreg = train_probe(&corpora.train, &RegularizationConfig::NONE, train_cfg)?;
    let acc_noreg = 100.0 * evaluate_accuracy(&noreg, &corpora.dev, None)?;

    let run = |reg: &RegularizationConfig| evaluate_cell(corpora, *reg, acc_noreg, cfg, train_cfg);
    let cells: Vec<SearchCell> = if cfg.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| LcaError::InvalidConfig(e.to_string()))?;
        pool.install(|| cfg.grid.par_iter().map(run).collect::<Result<_>>())?
    } else {
        cfg.grid.iter().map(run).collect::<Result<_>>()?
    };

    let best = pick_best(&cells);
    Ok(SearchReport { cells, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(l1: f64, l2: f64, score: f64) -> SearchCell {
        SearchCell {
            lambda1: l1,
            lambda2: l2,
            acc_top: 0.0,
            acc_bottom: 0.0,
            acc_lambda: 0.0,
            acc_noreg: 0.0,
            score,
        }
    }

    #[test]
    fn score_examples() {
        let s = |t, b, z, l| ScoreInputs {
            acc_top: t,
            acc_bottom: b,
            acc_noreg: z,
            acc_lambda: l,
        };
        assert_eq!(score_lambdas(&s(70.0, 70.0, 80.0, 80.0), 0.5, 0.5), 0.0);
        assert_eq!(score_lambdas(&s(90.0, 10.0, 95.0, 93.0), 0.5, 0.5), 39.0);
        assert_eq!(score_lambdas(&s(50.0, 50.0, 96.0, 60.0), 0.5, 0.5), -18.0);
    }

    #[test]
    fn default_grid_shape() {
        let cfg = SearchConfig::default();
        assert_eq!(cfg.grid.len(), 36);
        assert_eq!(cfg.grid[0], RegularizationConfig::NONE);
        assert_eq!(cfg.grid[1].lambda2, 1e-5);
        assert_eq!(cfg.grid[6].lambda1, 1e-5);
    }

    #[test]
    fn tie_breaks_prefer_stronger_regularization() {
        let cells = [cell(0.0, 0.0, 5.0), cell(1e-3, 0.0, 5.0), cell(0.0, 1e-2, 5.0)];
        assert_eq!(pick_best(&cells).lambda2, 1e-2);
        let cells = [cell(0.0, 1e-3, 5.0), cell(1e-3, 0.0, 5.0)];
        assert_eq!(pick_best(&cells).lambda1, 1e-3);
        let cells = [cell(1e-3, 0.0, 5.0), cell(1e-3, 0.0, 5.0)];
        assert_eq!(pick_best(&cells), cells[0]);
        let cells = [cell(1e-1, 1e-1, 4.0), cell(0.0, 0.0, 4.5)];
        assert_eq!(pick_best(&cells).score, 4.5);
    }

    #[test]
    fn invalid_configs() {
        let empty = SearchConfig {
            grid: vec![],
            ..SearchConfig::default()
        };
        assert!(matches!(empty.validate(), Err(LcaError::EmptyGrid)));
        let wide = SearchConfig {
            mass_fraction_m: 60.0,
            ..SearchConfig::default()
        };
        assert!(wide.validate().is_err());
    }
}

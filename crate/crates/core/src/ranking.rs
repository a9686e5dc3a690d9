//! Neuron saliency from probe weights.
//!
//! For one tag, neurons are sorted by `|theta[tag, n]|` (descending, ties by
//! ascending index) and the salient set at mass `p` is the shortest prefix
//! whose absolute weights sum to at least `p%` of the tag's total mass. The
//! global ordering sweeps `p` upward and appends neurons as they first enter
//! any tag's salient set.

use std::path::Path;

use indexmap::IndexMap;
use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::dataset::ActivationManifest;
use crate::error::{LcaError, Result};
use crate::probe::LinearProbe;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankingConfig {
    /// Increment of the weight-mass percentage per sweep step.
    pub alpha_step: f64,
    pub start_p: f64,
}

impl Default for RankingConfig {
    fn default() -> Self {
        RankingConfig {
            alpha_step: 1.0,
            start_p: 1.0,
        }
    }
}

impl RankingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_step > 0.0 && self.alpha_step <= 100.0) {
            return Err(LcaError::InvalidConfig(format!(
                "alpha_step must be in (0, 100], got {}",
                self.alpha_step
            )));
        }
        if !(self.start_p > 0.0 && self.start_p <= 100.0) {
            return Err(LcaError::InvalidConfig(format!(
                "start_p must be in (0, 100], got {}",
                self.start_p
            )));
        }
        Ok(())
    }

    /// Mass percentages visited by the sweep; always ends with exactly 100.
    pub fn schedule(&self) -> Vec<f64> {
        let mut ps = Vec::new();
        let mut k = 0u32;
        loop {
            let p = self.start_p + k as f64 * self.alpha_step;
            if p >= 100.0 {
                break;
            }
            ps.push(p);
            k += 1;
        }
        ps.push(100.0);
        ps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagSaliency {
    pub neuron: usize,
    pub abs_weight: f64,
    /// Fraction of the tag's mass covered up to and including this neuron.
    pub cum_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronRanking {
    /// Every neuron, most salient first.
    pub ordering: Vec<usize>,
    /// Non-zero-weight neurons per tag, by descending `|weight|`.
    pub per_tag: IndexMap<String, Vec<TagSaliency>>,
    pub config: RankingConfig,
    pub feature_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<ActivationManifest>,
    /// Mass percentage at which `ordering[i]` was first selected.
    pub discovered_at: Vec<f64>,
    /// Neurons with zero weight for every tag, appended after the sweep.
    pub zero_weight_neurons: Vec<usize>,
}

impl NeuronRanking {
    pub fn top(&self, count: usize) -> &[usize] {
        &self.ordering[..count.min(self.ordering.len())]
    }

    pub fn bottom(&self, count: usize) -> &[usize] {
        let n = self.ordering.len();
        &self.ordering[n - count.min(n)..]
    }

    /// Sweep percentage at which the first `count` neurons of the ordering
    /// were all selected.
    pub fn mass_for_prefix(&self, count: usize) -> f64 {
        if count == 0 {
            return self.discovered_at.first().copied().unwrap_or(100.0);
        }
        self.discovered_at[count.min(self.discovered_at.len()) - 1]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| LcaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<NeuronRanking> {
        let text = std::fs::read_to_string(path).map_err(|e| LcaError::io(path, e))?;
        let r: NeuronRanking = serde_json::from_str(&text)
            .map_err(|e| LcaError::InvalidRecord(format!("{}: {e}", path.display())))?;
        if r.ordering.iter().any(|&n| n >= r.feature_dim) || r.ordering.len() != r.discovered_at.len() {
            return Err(LcaError::InvalidRecord(format!(
                "{}: ordering inconsistent with feature_dim",
                path.display()
            )));
        }
        Ok(r)
    }
}

/// Indices sorted by descending absolute weight, ties by ascending index.
fn saliency_order(weights: ArrayView1<'_, f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| {
        weights[b]
            .abs()
            .total_cmp(&weights[a].abs())
            .then(a.cmp(&b))
    });
    idx
}

/// Sorted order plus running sums of absolute weight along it. The tag's
/// total mass is the last running sum.
struct TagMass {
    order: Vec<usize>,
    prefix: Vec<f64>,
    nonzero: usize,
}

impl TagMass {
    fn new(weights: ArrayView1<'_, f64>) -> TagMass {
        let order = saliency_order(weights);
        let mut acc = 0.0;
        let prefix = order
            .iter()
            .map(|&n| {
                acc += weights[n].abs();
                acc
            })
            .collect();
        let nonzero = order.iter().take_while(|&&n| weights[n] != 0.0).count();
        TagMass {
            order,
            prefix,
            nonzero,
        }
    }

    fn total(&self) -> f64 {
        self.prefix.last().copied().unwrap_or(0.0)
    }

    /// Length of the shortest prefix reaching `p%` of the mass. Full mass
    /// always means every non-zero weight, even when tiny weights vanish in
    /// the rounding of the running sum.
    fn prefix_len(&self, p: f64) -> usize {
        if p >= 100.0 {
            return self.nonzero;
        }
        let threshold = p / 100.0 * self.total();
        self.prefix
            .iter()
            .position(|&s| s >= threshold)
            .map_or(self.order.len(), |i| i + 1)
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(LcaError::InvalidConfig(format!(
            "mass percentage must be in (0, 100], got {p}"
        )));
    }
    Ok(())
}

/// Smallest set of neurons, taken in descending `|weight|` order, covering
/// `p%` of the tag's absolute weight mass. Returned in that order.
pub fn top_neurons_for_tag(weights: ArrayView1<'_, f64>, p: f64) -> Result<Vec<usize>> {
    check_p(p)?;
    let mass = TagMass::new(weights);
    if mass.total() == 0.0 {
        return Err(LcaError::ZeroMassTag(String::new()));
    }
    let k = mass.prefix_len(p);
    Ok(mass.order[..k].to_vec())
}

/// Global neuron ordering from a trained probe.
pub fn extract_ordering(probe: &LinearProbe, cfg: &RankingConfig) -> Result<NeuronRanking> {
    cfg.validate()?;
    let theta = &probe.theta;
    let (num_tags, dim) = theta.dim();

    let masses: Vec<TagMass> = theta.rows().into_iter().map(TagMass::new).collect();
    let live: Vec<usize> = (0..num_tags).filter(|&t| masses[t].total() > 0.0).collect();
    if live.is_empty() {
        return Err(LcaError::AllZeroWeights);
    }
    for t in 0..num_tags {
        if masses[t].total() == 0.0 {
            log::warn!("tag {:?} has zero weight mass; skipped in ranking", probe.tag_vocab[t]);
        }
    }

    let max_abs: Vec<f64> = (0..dim)
        .map(|n| theta.column(n).iter().fold(0.0f64, |m, w| m.max(w.abs())))
        .collect();

    let mut placed = vec![false; dim];
    let mut ordering = Vec::with_capacity(dim);
    let mut discovered_at = Vec::with_capacity(dim);
    let mut frontier = vec![0usize; num_tags];

    for p in cfg.schedule() {
        let mut fresh = Vec::new();
        for &t in &live {
            let k = masses[t].prefix_len(p);
            // Prefixes only grow with p, so only the new tail can be unseen.
            for &n in &masses[t].order[frontier[t].min(k)..k] {
                if !placed[n] {
                    placed[n] = true;
                    fresh.push(n);
                }
            }
            frontier[t] = frontier[t].max(k);
        }
        fresh.sort_by(|&a, &b| max_abs[b].total_cmp(&max_abs[a]).then(a.cmp(&b)));
        discovered_at.extend(std::iter::repeat_n(p, fresh.len()));
        ordering.extend(fresh);
    }

    let zero_weight_neurons: Vec<usize> = (0..dim).filter(|&n| !placed[n]).collect();
    if !zero_weight_neurons.is_empty() {
        log::warn!(
            "{} neuron(s) have zero weight for every tag; appended last",
            zero_weight_neurons.len()
        );
    }
    discovered_at.extend(std::iter::repeat_n(100.0, zero_weight_neurons.len()));
    ordering.extend(&zero_weight_neurons);

    let per_tag = probe
        .tag_vocab
        .iter()
        .zip(&masses)
        .zip(theta.rows())
        .map(|((tag, mass), row)| {
            let total = mass.total();
            let list = if total == 0.0 {
                Vec::new()
            } else {
                mass.order
                    .iter()
                    .zip(&mass.prefix)
                    .filter(|(&n, _)| row[n] != 0.0)
                    .map(|(&n, &s)| TagSaliency {
                        neuron: n,
                        abs_weight: row[n].abs(),
                        cum_mass: s / total,
                    })
                    .collect()
            };
            (tag.clone(), list)
        })
        .collect();

    Ok(NeuronRanking {
        ordering,
        per_tag,
        config: *cfg,
        feature_dim: dim,
        manifest: None,
        discovered_at,
        zero_weight_neurons,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSide {
    Head,
    Modifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronLocation {
    pub index: usize,
    pub layer: usize,
    pub unit: usize,
    /// Set only for pair-mode (2D-wide) features.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub side: Option<PairSide>,
}

/// Maps a feature index to its layer/unit. Pair-mode indices at or above D
/// belong to the modifier-side copy of neuron `index - D`.
pub fn locate_feature(index: usize, manifest: &ActivationManifest, feature_dim: usize) -> Result<NeuronLocation> {
    let d = manifest.dim();
    if index >= feature_dim {
        return Err(LcaError::IndexOutOfRange {
            index,
            limit: feature_dim,
        });
    }
    let pair = feature_dim == 2 * d;
    let (side, neuron) = match (pair, index >= d) {
        (false, _) => (None, index),
        (true, false) => (Some(PairSide::Head), index),
        (true, true) => (Some(PairSide::Modifier), index - d),
    };
    let (layer, unit) = manifest.locate(neuron)?;
    Ok(NeuronLocation {
        index,
        layer,
        unit,
        side,
    })
}

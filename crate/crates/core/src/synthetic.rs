//! Seeded planted-neuron corpora for tests, demos and the bundled fixture.
//!
//! Every activation is unit Gaussian noise except a handful of planted
//! neurons, which carry latent signals `s`. The tag of a token is
//! `argmax_t (W s)_t` for a random matrix `W`, so labels are a linear
//! function of the planted neurons only. A signal may be copied into several
//! neurons to model redundancy.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    align_splits, write_activations, write_labels, write_manifest, ActivationDataset, ActivationManifest,
    ActivationSentence, CorpusTriple, LabelSet, LabeledSentences, TokenTag,
};
use crate::error::{LcaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCorpusSpec {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_tags: usize,
    /// Independent latent signals.
    pub num_planted: usize,
    /// Neurons carrying an identical copy of each signal.
    pub copies: usize,
    pub train_tokens: usize,
    pub dev_tokens: usize,
    pub test_tokens: usize,
    pub sentence_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for PlantedCorpusSpec {
    fn default() -> Self {
        PlantedCorpusSpec {
            num_layers: 10,
            hidden_size: 20,
            num_tags: 5,
            num_planted: 10,
            copies: 1,
            train_tokens: 10_000,
            dev_tokens: 1_000,
            test_tokens: 1_000,
            sentence_len: 20,
            vocab_size: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedSplit {
    pub activations: ActivationDataset,
    pub labels: LabelSet,
}

#[derive(Debug, Clone)]
pub struct PlantedFixture {
    pub spec: PlantedCorpusSpec,
    pub manifest: ActivationManifest,
    /// `signal_neurons[j]` lists the neurons carrying signal `j`.
    pub signal_neurons: Vec<Vec<usize>>,
    pub train: PlantedSplit,
    pub dev: PlantedSplit,
    pub test: PlantedSplit,
}

impl PlantedFixture {
    pub fn generate(spec: &PlantedCorpusSpec) -> PlantedFixture {
        let manifest = ActivationManifest::new(spec.num_layers, spec.hidden_size, "planted-synthetic");
        let dim = manifest.dim();
        let total_planted = spec.num_planted * spec.copies;
        assert!(total_planted <= dim, "more planted neurons than D");
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

        let picked = rand::seq::index::sample(&mut rng, dim, total_planted).into_vec();
        let signal_neurons: Vec<Vec<usize>> = picked
            .chunks(spec.copies.max(1))
            .map(|c| {
                let mut v = c.to_vec();
                v.sort_unstable();
                v
            })
            .collect();
        let mixing = Array2::from_shape_fn((spec.num_tags, spec.num_planted), |_| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let tag_vocab: Vec<String> = (0..spec.num_tags).map(|t| format!("T{t}")).collect();

        let split = |tokens: usize, rng: &mut ChaCha8Rng, first_id: i64| -> PlantedSplit {
            let mut sentences = Vec::new();
            let mut annotations = Vec::new();
            let mut remaining = tokens;
            let mut id = first_id;
            while remaining > 0 {
                let len = spec.sentence_len.min(remaining);
                remaining -= len;
                let mut acts = Array2::<f32>::zeros((len, dim));
                let mut words = Vec::with_capacity(len);
                let mut ann = Vec::with_capacity(len);
                for r in 0..len {
                    for v in acts.row_mut(r).iter_mut() {
                        *v = rng.sample(StandardNormal);
                    }
                    let signal: Vec<f64> = (0..spec.num_planted)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    for (j, neurons) in signal_neurons.iter().enumerate() {
                        for &n in neurons {
                            acts[[r, n]] = signal[j] as f32;
                        }
                    }
                    let mut best = 0;
                    let mut best_score = f64::NEG_INFINITY;
                    for t in 0..spec.num_tags {
                        let score: f64 = (0..spec.num_planted)
                            .map(|j| mixing[[t, j]] * acts[[r, signal_neurons[j][0]]] as f64)
                            .sum();
                        if score > best_score {
                            best_score = score;
                            best = t;
                        }
                    }
                    let word = format!("w{}", rng.random_range(0..spec.vocab_size.max(1)));
                    words.push(word.clone());
                    ann.push(TokenTag {
                        token: word,
                        tag: best,
                    });
                }
                sentences.push(ActivationSentence {
                    sentence_id: id,
                    tokens: words,
                    activations: acts,
                });
                annotations.push(ann);
                id += 1;
            }
            PlantedSplit {
                activations: ActivationDataset {
                    manifest: manifest.clone(),
                    sentences,
                },
                labels: LabelSet {
                    tag_vocab: tag_vocab.clone(),
                    sentences: LabeledSentences::Token(annotations),
                },
            }
        };

        let train = split(spec.train_tokens, &mut rng, 0);
        let dev = split(spec.dev_tokens, &mut rng, 0);
        let test = split(spec.test_tokens, &mut rng, 0);
        PlantedFixture {
            spec: spec.clone(),
            manifest: manifest.clone(),
            signal_neurons,
            train,
            dev,
            test,
        }
    }

    /// All planted neurons, ascending.
    pub fn planted(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.signal_neurons.iter().flatten().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn corpora(&self) -> Result<CorpusTriple> {
        align_splits(
            [&self.train.activations, &self.dev.activations, &self.test.activations],
            [&self.train.labels, &self.dev.labels, &self.test.labels],
        )
    }

    /// Writes `manifest.json`, `{train,dev,test}.activations.jsonl`,
    /// `{train,dev,test}.labels.tsv` and `planted.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| LcaError::io(dir, e))?;
        write_manifest(&dir.join("manifest.json"), &self.manifest)?;
        for (name, split) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            write_activations(&dir.join(format!("{name}.activations.jsonl")), &split.activations)?;
            write_labels(&dir.join(format!("{name}.labels.tsv")), &split.labels)?;
        }
        let planted = serde_json::json!({
            "spec": self.spec,
            "signal_neurons": self.signal_neurons,
        });
        let path = dir.join("planted.json");
        std::fs::write(&path, serde_json::to_string_pretty(&planted)? + "\n").map_err(|e| LcaError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_shape() {
        let spec = PlantedCorpusSpec {
            num_layers: 2,
            hidden_size: 5,
            num_planted: 2,
            copies: 3,
            train_tokens: 45,
            dev_tokens: 10,
            test_tokens: 10,
            ..PlantedCorpusSpec::default()
        };
        let fx = PlantedFixture::generate(&spec);
        assert_eq!(fx.planted().len(), 6);
        assert_eq!(fx.train.activations.sentences.len(), 3);
        assert_eq!(fx.train.activations.num_tokens(), 45);
        let s = &fx.train.activations.sentences[0];
        let g = &fx.signal_neurons[0];
        assert_eq!(s.activations[[0, g[0]]], s.activations[[0, g[2]]]);
        let c = fx.corpora().unwrap();
        assert_eq!(c.train.num_samples(), 45);
        assert_eq!(c.feature_dim(), 10);
    }

    #[test]
    fn generation_is_seeded() {
        let spec = PlantedCorpusSpec {
            train_tokens: 50,
            dev_tokens: 5,
            test_tokens: 5,
            ..PlantedCorpusSpec::default()
        };
        let a = PlantedFixture::generate(&spec);
        let b = PlantedFixture::generate(&spec);
        assert_eq!(a.signal_neurons, b.signal_neurons);
        assert_eq!(a.train.activations, b.train.activations);
        assert_eq!(a.test.labels, b.test.labels);
    }
}

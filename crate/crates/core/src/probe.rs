//! Linear party probes on mean-pooled residual streams.
//!
//! A probe for party `o` at layer `l` scores a statement by `z = W_oᵀ x̄ˡ`
//! and is trained with class-weighted binary cross-entropy on logits,
//! `−w₁·y·log σ(z) − (1−y)·log(1−σ(z))`, using full-batch gradient descent
//! from a zero initialization.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;
use std::path::Path;

use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mean_pool, InstrumentedModel};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub statement: String,
    pub party: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCorpus {
    records: Vec<ProbeRecord>,
    parties: Vec<String>,
}

impl ProbeCorpus {
    /// Validates and wraps records. Parties are ordered by first appearance.
    pub fn new(records: Vec<ProbeRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Corpus("corpus has no records".into()));
        }
        let mut parties: Vec<String> = Vec::new();
        let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for r in &records {
            if r.statement.trim().is_empty() {
                return Err(Error::Corpus("empty statement".into()));
            }
            if !parties.contains(&r.party) {
                parties.push(r.party.clone());
            }
            let c = counts.entry(&r.party).or_default();
            match r.split {
                Split::Train => c.0 += 1,
                Split::Holdout => c.1 += 1,
            }
        }
        for (party, (train, holdout)) in &counts {
            if *train < 2 || *holdout < 1 {
                return Err(Error::Corpus(format!(
                    "party {party:?} needs at least 2 train and 1 holdout statements, \
                     has {train} and {holdout}"
                )));
            }
        }
        if parties.len() < 2 {
            return Err(Error::Corpus("a probe needs negatives: at least 2 parties".into()));
        }
        let holdout = records.iter().filter(|r| r.split == Split::Holdout).count();
        let frac = holdout as f64 / records.len() as f64;
        if !(0.05..=0.2).contains(&frac) {
            log::warn!("holdout fraction {frac:.3} is far from the usual 0.10");
        }
        Ok(Self { records, parties })
    }

    /// Parses the `statement,party,split` CSV format.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::Fields).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::csv("probe corpus", e))?.clone();
        let want = ["statement", "party", "split"];
        if headers.len() != 3 || headers.iter().zip(want).any(|(h, w)| h != w) {
            return Err(Error::Corpus(format!(
                "header must be \"statement,party,split\", found {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let records = rdr
            .deserialize::<ProbeRecord>()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::csv("probe corpus", e))?;
        Self::new(records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn records(&self) -> &[ProbeRecord] {
        &self.records
    }

    pub fn parties(&self) -> &[String] {
        &self.parties
    }

    pub fn party_index(&self, party: &str) -> Option<usize> {
        self.parties.iter().position(|p| p == party)
    }

    pub fn holdout_statements(&self) -> impl Iterator<Item = &ProbeRecord> {
        self.records.iter().filter(|r| r.split == Split::Holdout)
    }
}

/// Inclusive layer range `[⌊0.5L⌋, ⌈0.9L⌉]` clamped to valid layer indices.
pub fn probing_layer_band(num_layers: usize) -> RangeInclusive<usize> {
    let last = num_layers.saturating_sub(1);
    let lo = (num_layers / 2).min(last);
    let hi = ((num_layers * 9).div_ceil(10)).min(last);
    lo..=hi.max(lo)
}

/// A mean-pooled statement representation with its party label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVector {
    pub vector: Vec<f32>,
    pub party: usize,
    pub split: Split,
}

/// Mean-pooled residuals at each requested layer, one record per statement
/// in corpus order. Each statement is run through the model once.
pub fn embed_corpus_layers(
    model: &InstrumentedModel,
    tokenizer: &Tokenizer,
    corpus: &ProbeCorpus,
    layers: &[usize],
) -> Result<BTreeMap<usize, Vec<LabeledVector>>> {
    let per_statement: Vec<Vec<LabeledVector>> = corpus
        .records
        .par_iter()
        .map(|r| {
            let ids = tokenizer.encode(&r.statement)?;
            let trace = model.forward(&ids)?;
            let party = corpus.party_index(&r.party).expect("party indexed at load");
            layers
                .iter()
                .map(|&l| {
                    Ok(LabeledVector {
                        vector: mean_pool(&trace, l)?,
                        party,
                        split: r.split,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut out: BTreeMap<usize, Vec<LabeledVector>> = BTreeMap::new();
    for rows in per_statement {
        for (&l, v) in layers.iter().zip(rows) {
            out.entry(l).or_default().push(v);
        }
    }
    Ok(out)
}

pub fn embed_corpus(
    model: &InstrumentedModel,
    tokenizer: &Tokenizer,
    corpus: &ProbeCorpus,
    layer: usize,
) -> Result<Vec<LabeledVector>> {
    Ok(embed_corpus_layers(model, tokenizer, corpus, &[layer])?
        .remove(&layer)
        .unwrap_or_default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeHyperparams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ProbeHyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub final_loss: f64,
    pub class_weight: f64,
    pub n_positive: usize,
    pub n_negative: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub party: String,
    pub layer: usize,
    pub weights: Vec<f32>,
    pub metadata: TrainingMetadata,
    /// Loss after each epoch, starting with the loss at initialization.
    pub loss_history: Vec<f64>,
}

impl Probe {
    pub fn logit(&self, x: &[f32]) -> f64 {
        crate::tensor::dot_f64(&self.weights, x)
    }

    pub fn predict(&self, x: &[f32]) -> bool {
        self.logit(x) > 0.0
    }
}

fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean weighted BCE over the examples and its gradient with respect to `w`.
pub fn weighted_bce(w: &[f64], xs: &[&[f32]], ys: &[bool], class_weight: f64) -> (f64, Vec<f64>) {
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; w.len()];
    for (x, &y) in xs.iter().zip(ys) {
        let z: f64 = w.iter().zip(x.iter()).map(|(a, &b)| a * b as f64).sum();
        let (l, g) = if y {
            (-class_weight * log_sigmoid(z), class_weight * (sigmoid(z) - 1.0))
        } else {
            (-log_sigmoid(-z), sigmoid(z))
        };
        loss += l;
        for (gi, &xi) in grad.iter_mut().zip(x.iter()) {
            *gi += g * xi as f64;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

/// Trains the probe for `party` on the training split of `embedded`.
pub fn train_probe(
    embedded: &[LabeledVector],
    party: usize,
    party_name: &str,
    layer: usize,
    hp: &ProbeHyperparams,
) -> Result<Probe> {
    let train: Vec<&LabeledVector> = embedded.iter().filter(|v| v.split == Split::Train).collect();
    let xs: Vec<&[f32]> = train.iter().map(|v| v.vector.as_slice()).collect();
    let ys: Vec<bool> = train.iter().map(|v| v.party == party).collect();
    let n_pos = ys.iter().filter(|&&y| y).count();
    let n_neg = ys.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass {
            party: party_name.to_string(),
        });
    }
    let class_weight = n_neg as f64 / n_pos as f64;
    let dim = xs[0].len();
    let mut w = vec![0.0f64; dim];
    let mut history = Vec::with_capacity(hp.epochs + 1);
    let (mut loss, mut grad) = weighted_bce(&w, &xs, &ys, class_weight);
    history.push(loss);
    for epoch in 0..hp.epochs {
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= hp.learning_rate * gi;
        }
        (loss, grad) = weighted_bce(&w, &xs, &ys, class_weight);
        if !loss.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                party: party_name.to_string(),
                epoch,
                loss,
                learning_rate: hp.learning_rate,
            });
        }
        history.push(loss);
    }
    let weights: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    if weights.iter().all(|&v| v == 0.0) {
        return Err(Error::Diverged {
            party: party_name.to_string(),
            epoch: hp.epochs,
            loss,
            learning_rate: hp.learning_rate,
        });
    }
    Ok(Probe {
        party: party_name.to_string(),
        layer,
        weights,
        metadata: TrainingMetadata {
            epochs: hp.epochs,
            learning_rate: hp.learning_rate,
            seed: hp.seed,
            final_loss: loss,
            class_weight,
            n_positive: n_pos,
            n_negative: n_neg,
        },
        loss_history: history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

impl ProbeMetrics {
    /// Metrics from (predicted, actual) pairs at the 0.5 threshold. With no
    /// actual positives recall is vacuously 1; with no predicted positives
    /// precision is 1 only if nothing was missed.
    pub fn from_predictions(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
        for (pred, actual) in pairs {
            match (pred, actual) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fneg += 1,
            }
        }
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else if fneg == 0 {
            1.0
        } else {
            0.0
        };
        let recall = if tp + fneg > 0 {
            tp as f64 / (tp + fneg) as f64
        } else {
            1.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            f1,
            precision,
            recall,
            true_positive: tp,
            false_positive: fp,
            true_negative: tn,
            false_negative: fneg,
        }
    }

    pub fn total(&self) -> usize {
        self.true_positive + self.false_positive + self.true_negative + self.false_negative
    }
}

/// Holdout-split metrics for `probe` (which detects party index `party`).
pub fn evaluate_probe(probe: &Probe, embedded: &[LabeledVector], party: usize) -> Result<ProbeMetrics> {
    let holdout: Vec<&LabeledVector> = embedded.iter().filter(|v| v.split == Split::Holdout).collect();
    if holdout.is_empty() {
        return Err(Error::Corpus("holdout split is empty".into()));
    }
    Ok(ProbeMetrics::from_predictions(
        holdout.iter().map(|v| (probe.predict(&v.vector), v.party == party)),
    ))
}

/// On-disk probe: weights are base64 little-endian `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeArtifact {
    pub party: String,
    pub layer: usize,
    pub dim: usize,
    pub weights_f32_b64: String,
    pub metadata: TrainingMetadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl ProbeArtifact {
    pub fn from_probe(probe: &Probe, provenance: Option<serde_json::Value>) -> Self {
        let bytes: Vec<u8> = probe.weights.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            party: probe.party.clone(),
            layer: probe.layer,
            dim: probe.weights.len(),
            weights_f32_b64: base64::engine::general_purpose::STANDARD.encode(bytes),
            metadata: probe.metadata.clone(),
            provenance,
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::json("probe artifact", e))
    }

    pub fn to_probe(&self) -> Result<Probe> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.weights_f32_b64)
            .map_err(|e| Error::Artifact(format!("probe weights are not base64: {e}")))?;
        if bytes.len() != self.dim * 4 {
            return Err(Error::Artifact(format!(
                "probe weights hold {} bytes, expected {} for dim {}",
                bytes.len(),
                self.dim * 4,
                self.dim
            )));
        }
        let weights: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::Artifact("probe weights contain non-finite values".into()));
        }
        Ok(Probe {
            party: self.party.clone(),
            layer: self.layer,
            weights,
            metadata: self.metadata.clone(),
            loss_history: Vec::new(),
        })
    }
}

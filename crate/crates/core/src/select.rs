//! Probe-aligned value-vector selection.
//!
//! Each value vector `v_i` of a layer is compared with the party probe by
//! cosine similarity. Vectors beyond a Tukey-style fence around the cosine
//! quartiles become candidates, and candidates are kept only if flipping
//! their sub-update moves the party token's log-probability the expected way.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InstrumentedModel;
use crate::probe::Probe;
use crate::stats;
use crate::tensor::{cosine, norm_f64};
use crate::tokenizer::Tokenizer;

pub const DEFAULT_FENCE: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineProfile {
    pub party: String,
    pub layer: usize,
    pub cosines: Vec<f64>,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    /// Neurons whose value vector has zero norm; their cosine is reported as 0.
    pub zero_norm: Vec<usize>,
}

impl CosineProfile {
    /// Builds a profile from raw cosines, computing type-7 quartiles.
    pub fn from_cosines(party: &str, layer: usize, cosines: Vec<f64>, zero_norm: Vec<usize>) -> Self {
        let sorted = stats::sorted(&cosines);
        let (q1, q3) = if sorted.is_empty() {
            (0.0, 0.0)
        } else {
            (stats::quantile_sorted(&sorted, 0.25), stats::quantile_sorted(&sorted, 0.75))
        };
        Self {
            party: party.to_string(),
            layer,
            cosines,
            q1,
            q3,
            iqr: (q3 - q1).max(0.0),
            zero_norm,
        }
    }
}

/// Cosine between the probe direction and every value vector of `layer`.
pub fn cosine_profile(probe: &Probe, model: &InstrumentedModel, layer: usize) -> Result<CosineProfile> {
    if layer >= model.num_layers() {
        return Err(Error::OutOfRange {
            what: "layer",
            index: layer,
            limit: model.num_layers(),
        });
    }
    if probe.weights.len() != model.config().model_dim {
        return Err(Error::Artifact(format!(
            "probe for {:?} has dimension {}, model has {}",
            probe.party,
            probe.weights.len(),
            model.config().model_dim
        )));
    }
    if norm_f64(&probe.weights) == 0.0 {
        return Err(Error::Artifact(format!("probe for {:?} has zero norm", probe.party)));
    }
    let mut zero_norm = Vec::new();
    let cosines = (0..model.config().mlp_dim)
        .map(|i| {
            cosine(&probe.weights, model.value_vector(layer, i)).unwrap_or_else(|| {
                log::warn!("value vector {i} of layer {layer} has zero norm; cosine set to 0");
                zero_norm.push(i);
                0.0
            })
        })
        .collect();
    Ok(CosineProfile::from_cosines(&probe.party, layer, cosines, zero_norm))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub layer: usize,
    pub neuron: usize,
    pub cosine: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Candidates {
    pub aligned: Vec<Candidate>,
    pub diametric: Vec<Candidate>,
}

impl Candidates {
    pub fn extend(&mut self, other: Candidates) {
        self.aligned.extend(other.aligned);
        self.diametric.extend(other.diametric);
    }

    pub fn len(&self) -> usize {
        self.aligned.len() + self.diametric.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Neurons whose cosine lies strictly outside `[Q1 − fence·IQR, Q3 + fence·IQR]`,
/// split by sign. A cosine of exactly zero belongs to neither set.
pub fn iqr_select(profile: &CosineProfile, fence: f64) -> Candidates {
    let lo = profile.q1 - fence * profile.iqr;
    let hi = profile.q3 + fence * profile.iqr;
    let mut out = Candidates::default();
    for (neuron, &c) in profile.cosines.iter().enumerate() {
        if !(c < lo || c > hi) {
            continue;
        }
        let cand = Candidate {
            layer: profile.layer,
            neuron,
            cosine: c,
        };
        if c > 0.0 {
            out.aligned.push(cand);
        } else if c < 0.0 {
            out.diametric.push(cand);
        }
    }
    out
}

/// Retention rule for diametric candidates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiametricRule {
    /// Keep when flipping the sub-update raises the party token (median Δ < 0).
    #[default]
    Mirrored,
    /// Apply the aligned rule (median Δ > 0) to diametric vectors too.
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetainedVector {
    pub layer: usize,
    pub neuron: usize,
    pub cosine: f64,
    pub median_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueVectorSelection {
    pub party: String,
    pub party_token: u32,
    pub aligned: Vec<RetainedVector>,
    pub diametric: Vec<RetainedVector>,
    /// Every candidate that was validated, retained or not.
    pub validated: Vec<RetainedVector>,
}

impl ValueVectorSelection {
    /// Aligned then diametric vectors.
    pub fn retained(&self) -> impl Iterator<Item = &RetainedVector> {
        self.aligned.iter().chain(&self.diametric)
    }

    pub fn is_empty(&self) -> bool {
        self.aligned.is_empty() && self.diametric.is_empty()
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let sel: Self = serde_json::from_slice(bytes).map_err(|e| Error::json("selection", e))?;
        let mut seen = BTreeSet::new();
        for v in sel.retained() {
            if !seen.insert((v.layer, v.neuron)) {
                return Err(Error::Artifact(format!(
                    "selection for {:?} lists layer {} neuron {} twice",
                    sel.party, v.layer, v.neuron
                )));
            }
        }
        Ok(sel)
    }
}

/// Sign-inversion validation of `candidates` against the party token on
/// `prompts`, editing the final position of every prompt.
pub fn validate_by_sign_inversion(
    model: &InstrumentedModel,
    party: &str,
    candidates: &Candidates,
    party_token: u32,
    prompts: &[Vec<u32>],
    rule: DiametricRule,
) -> Result<ValueVectorSelection> {
    if prompts.is_empty() {
        return Err(Error::Corpus("sign-inversion validation needs at least one prompt".into()));
    }
    let all: Vec<(bool, Candidate)> = candidates
        .aligned
        .iter()
        .map(|c| (true, *c))
        .chain(candidates.diametric.iter().map(|c| (false, *c)))
        .collect();

    // deltas[prompt][candidate]; one forward pass per prompt serves every candidate
    let deltas: Vec<Vec<f64>> = prompts
        .par_iter()
        .map(|ids| {
            let trace = model.forward(ids)?;
            let pos = trace.last_position();
            all.iter()
                .map(|(_, c)| model.sign_inversion_delta(&trace, c.layer, c.neuron, party_token, pos))
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut sel = ValueVectorSelection {
        party: party.to_string(),
        party_token,
        aligned: Vec::new(),
        diametric: Vec::new(),
        validated: Vec::new(),
    };
    for (k, (is_aligned, c)) in all.iter().enumerate() {
        let column: Vec<f64> = deltas.iter().map(|row| row[k]).collect();
        let median_delta = stats::median(&column).expect("prompts nonempty");
        let v = RetainedVector {
            layer: c.layer,
            neuron: c.neuron,
            cosine: c.cosine,
            median_delta,
        };
        sel.validated.push(v);
        let keep = match (is_aligned, rule) {
            (true, _) | (false, DiametricRule::Same) => median_delta > 0.0,
            (false, DiametricRule::Mirrored) => median_delta < 0.0,
        };
        match (keep, is_aligned) {
            (true, true) => sel.aligned.push(v),
            (true, false) => sel.diametric.push(v),
            (false, _) => {}
        }
    }
    Ok(sel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabProjection {
    pub token_id: u32,
    pub cosine: f64,
}

/// Top-`k` tokens by cosine between `v_i` and the unembedding rows,
/// descending, ties broken by ascending token id.
pub fn project_to_vocab(
    model: &InstrumentedModel,
    layer: usize,
    neuron: usize,
    k: usize,
) -> Result<Vec<VocabProjection>> {
    let cfg = model.config();
    if layer >= cfg.num_layers {
        return Err(Error::OutOfRange {
            what: "layer",
            index: layer,
            limit: cfg.num_layers,
        });
    }
    if neuron >= cfg.mlp_dim {
        return Err(Error::OutOfRange {
            what: "neuron",
            index: neuron,
            limit: cfg.mlp_dim,
        });
    }
    if k > cfg.vocab_size {
        return Err(Error::OutOfRange {
            what: "top-k",
            index: k,
            limit: cfg.vocab_size,
        });
    }
    let v = model.value_vector(layer, neuron);
    let unembed = &model.weights().unembed;
    let mut scored: Vec<VocabProjection> = (0..cfg.vocab_size)
        .filter_map(|t| match cosine(v, unembed.row(t)) {
            Some(c) => Some(VocabProjection {
                token_id: t as u32,
                cosine: c,
            }),
            None => {
                if norm_f64(unembed.row(t)) == 0.0 {
                    log::warn!("unembedding row {t} has zero norm; excluded from projection");
                }
                None
            }
        })
        .collect();
    scored.sort_by(|a, b| b.cosine.total_cmp(&a.cosine).then(a.token_id.cmp(&b.token_id)));
    scored.truncate(k);
    Ok(scored)
}

/// CSV of top-k projections for every retained vector of each selection:
/// `party,set,layer,neuron,rank,token,cosine`.
pub fn vocab_projection_csv(
    model: &InstrumentedModel,
    tokenizer: &Tokenizer,
    selections: &[ValueVectorSelection],
    k: usize,
) -> Result<String> {
    let k = k.min(model.config().vocab_size);
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = ["party", "set", "layer", "neuron", "rank", "token", "cosine"];
    w.write_record(header).map_err(|e| Error::csv("vocab projection", e))?;
    for sel in selections {
        for (set, vectors) in [("aligned", &sel.aligned), ("diametric", &sel.diametric)] {
            for v in vectors {
                for (rank, p) in project_to_vocab(model, v.layer, v.neuron, k)?.iter().enumerate() {
                    w.write_record([
                        sel.party.clone(),
                        set.to_string(),
                        v.layer.to_string(),
                        v.neuron.to_string(),
                        (rank + 1).to_string(),
                        tokenizer.token(p.token_id).unwrap_or("?").to_string(),
                        format!("{:.6}", p.cosine),
                    ])
                    .map_err(|e| Error::csv("vocab projection", e))?;
                }
            }
        }
    }
    Ok(String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelConfig};
    use crate::probe::TrainingMetadata;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn tiny_model(seed: u64) -> InstrumentedModel {
        InstrumentedModel::random(
            ModelConfig {
                num_layers: 2,
                model_dim: 8,
                mlp_dim: 16,
                num_heads: 2,
                vocab_size: 12,
                activation: Activation::Gelu,
                max_seq_len: 8,
            },
            seed,
            0.5,
        )
        .unwrap()
    }

    fn probe_with(weights: Vec<f32>) -> Probe {
        Probe {
            party: "A".into(),
            layer: 1,
            weights,
            metadata: TrainingMetadata {
                epochs: 0,
                learning_rate: 0.1,
                seed: 0,
                final_loss: 0.0,
                class_weight: 1.0,
                n_positive: 1,
                n_negative: 1,
            },
            loss_history: vec![],
        }
    }

    #[test]
    fn cosine_profile_matches_naive_loop() {
        let model = tiny_model(3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let w: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let profile = cosine_profile(&probe_with(w.clone()), &model, 1).unwrap();
        for i in 0..16 {
            let v = model.value_vector(1, i);
            let mut dot = 0.0f64;
            let mut nw = 0.0f64;
            let mut nv = 0.0f64;
            for j in 0..8 {
                dot += w[j] as f64 * v[j] as f64;
                nw += (w[j] as f64).powi(2);
                nv += (v[j] as f64).powi(2);
            }
            assert!((profile.cosines[i] - dot / (nw.sqrt() * nv.sqrt())).abs() < 1e-7);
        }
    }

    #[test]
    fn identical_and_orthogonal_directions() {
        let mut model = tiny_model(4);
        let layer = &mut model.weights_mut().layers[0];
        layer.mlp_values.row_mut(0).copy_from_slice(&[1., 0., 0., 0., 0., 0., 0., 0.]);
        layer.mlp_values.row_mut(1).copy_from_slice(&[0., 2., 0., 0., 0., 0., 0., 0.]);
        layer.mlp_values.row_mut(2).fill(0.0);
        let p = cosine_profile(&probe_with(vec![3., 0., 0., 0., 0., 0., 0., 0.]), &model, 0).unwrap();
        assert_eq!(p.cosines[0], 1.0);
        assert_eq!(p.cosines[1], 0.0);
        assert_eq!(p.zero_norm, vec![2]);
    }

    #[test]
    fn hand_computable_fence() {
        let mut cos = vec![0.0; 97];
        cos.extend([0.9, -0.9, 0.95]);
        let p = CosineProfile::from_cosines("A", 0, cos, vec![]);
        assert_eq!((p.q1, p.q3, p.iqr), (0.0, 0.0, 0.0));
        let c = iqr_select(&p, DEFAULT_FENCE);
        let aligned: Vec<usize> = c.aligned.iter().map(|c| c.neuron).collect();
        let diametric: Vec<usize> = c.diametric.iter().map(|c| c.neuron).collect();
        assert_eq!(aligned, vec![97, 99]);
        assert_eq!(diametric, vec![98]);
    }

    #[test]
    fn constant_cosines_select_nothing() {
        let p = CosineProfile::from_cosines("A", 0, vec![0.3; 20], vec![]);
        assert!(iqr_select(&p, DEFAULT_FENCE).is_empty());
    }

    #[test]
    fn dead_neuron_is_rejected() {
        let mut model = tiny_model(5);
        model.weights_mut().layers[1].mlp_keys.row_mut(3).fill(0.0);
        // GELU(0) = 0, so neuron 3 never contributes
        let cands = Candidates {
            aligned: vec![Candidate {
                layer: 1,
                neuron: 3,
                cosine: 0.8,
            }],
            diametric: vec![],
        };
        let sel = validate_by_sign_inversion(&model, "A", &cands, 2, &[vec![1, 2, 3], vec![4]], DiametricRule::Mirrored)
            .unwrap();
        assert!(sel.aligned.is_empty());
        assert_eq!(sel.validated[0].median_delta, 0.0);
        assert!(validate_by_sign_inversion(&model, "A", &cands, 2, &[], DiametricRule::Mirrored).is_err());
    }

    #[test]
    fn projection_ranks_matching_row_first() {
        let mut model = tiny_model(6);
        let row = model.weights().unembed.row(7).to_vec();
        model.weights_mut().layers[0].mlp_values.row_mut(5).copy_from_slice(&row);
        let top = project_to_vocab(&model, 0, 5, 3).unwrap();
        assert_eq!(top[0].token_id, 7);
        assert!((top[0].cosine - 1.0).abs() < 1e-12);

        let full = project_to_vocab(&model, 0, 5, 12).unwrap();
        let ids: BTreeSet<u32> = full.iter().map(|p| p.token_id).collect();
        assert_eq!(ids.len(), 12);
        // naive oracle: compute each cosine independently and sort by (-cos, id)
        let mut oracle: Vec<(f64, u32)> = (0..12u32)
            .map(|t| (cosine(&row, model.weights().unembed.row(t as usize)).unwrap(), t))
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        assert_eq!(full.iter().map(|p| p.token_id).collect::<Vec<_>>(), oracle.iter().map(|o| o.1).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn cosines_ignore_probe_scale(seed in 0u64..200, scale in 0.001f32..1000.0) {
            let model = tiny_model(seed);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = cosine_profile(&probe_with(w.clone()), &model, 0).unwrap();
            let b = cosine_profile(&probe_with(w.iter().map(|x| x * scale).collect()), &model, 0).unwrap();
            for (x, y) in a.cosines.iter().zip(&b.cosines) {
                prop_assert!((x - y).abs() < 1e-7);
            }
        }

        #[test]
        fn selection_is_permutation_invariant(
            mut cos in proptest::collection::vec(-1.0f64..1.0, 4..60),
            extremes in proptest::collection::vec(prop_oneof![-1.0f64..-0.95, 0.95f64..1.0], 0..4),
            seed in any::<u64>(),
        ) {
            cos.iter_mut().for_each(|c| *c *= 0.1);
            cos.extend(extremes);
            let p = CosineProfile::from_cosines("A", 0, cos.clone(), vec![]);
            let picked: BTreeSet<u64> = {
                let c = iqr_select(&p, DEFAULT_FENCE);
                c.aligned.iter().chain(&c.diametric).map(|c| c.cosine.to_bits()).collect()
            };
            let mut perm: Vec<usize> = (0..cos.len()).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let shuffled: Vec<f64> = perm.iter().map(|&i| cos[i]).collect();
            let q = CosineProfile::from_cosines("A", 0, shuffled, vec![]);
            let c = iqr_select(&q, DEFAULT_FENCE);
            let again: BTreeSet<u64> = c.aligned.iter().chain(&c.diametric).map(|c| c.cosine.to_bits()).collect();
            prop_assert_eq!(picked, again);
            for cand in c.aligned.iter() { prop_assert!(cand.cosine > 0.0); }
            for cand in c.diametric.iter() { prop_assert!(cand.cosine < 0.0); }
        }
    }
}

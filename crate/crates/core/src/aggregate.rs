//! Persona activations and the latent and probability estimators.
//!
//! For every (persona, template) prompt the model is run once. That pass
//! records the coefficient `m` of every retained value vector and the
//! next-token distribution restricted to the party tokens. Coefficients are
//! z-scored per vector over the whole batch and weighted by the vector's
//! probe cosine, `a = z(m)·cos`, and a party's score `A` is the mean of `a`
//! over its retained vectors.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Map;

use crate::container::{Container, Tensor};
use crate::error::{Error, Result};
use crate::model::InstrumentedModel;
use crate::persona::{personas_by_category, render_prompt, CountryConfig, PersonaSet, PromptTemplate};
use crate::select::ValueVectorSelection;
use crate::tensor::Matrix;
use crate::tokenizer::Tokenizer;

/// Which token positions a coefficient is read from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readoff {
    #[default]
    FinalPosition,
    MeanOverPositions,
}

/// How per-category latent scores become a distribution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentNorm {
    #[default]
    Softmax,
    #[serde(alias = "min-shift")]
    MinShift,
}

impl std::str::FromStr for LatentNorm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "softmax" => Ok(LatentNorm::Softmax),
            "minshift" | "min-shift" => Ok(LatentNorm::MinShift),
            other => Err(format!("unknown normalization {other:?}; use softmax or minshift")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoredVector {
    pub party: usize,
    pub layer: usize,
    pub neuron: usize,
    pub cosine: f64,
}

/// Raw and weighted activations for a persona × template batch. Column
/// `p·J + j` holds persona `p` under template `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStore {
    pub parties: Vec<String>,
    pub party_tokens: Vec<u32>,
    pub vectors: Vec<StoredVector>,
    pub n_personas: usize,
    pub n_templates: usize,
    pub readoff: Readoff,
    /// vectors × (personas·templates) raw coefficients `m`.
    pub raw: Matrix,
    /// Same layout as `raw`, filled by [`normalize_and_weight`].
    pub weighted: Option<Matrix>,
    /// (personas·templates) × parties next-token probabilities restricted
    /// to the party tokens.
    pub party_probs: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct StoreIndex {
    parties: Vec<String>,
    party_tokens: Vec<u32>,
    vectors: Vec<StoredVector>,
    n_personas: usize,
    n_templates: usize,
    readoff: Readoff,
}

impl ActivationStore {
    pub fn column(&self, persona: usize, template: usize) -> usize {
        persona * self.n_templates + template
    }

    /// Container form; restricted probabilities are stored as `f32`.
    pub fn to_container(&self) -> Container {
        let index = StoreIndex {
            parties: self.parties.clone(),
            party_tokens: self.party_tokens.clone(),
            vectors: self.vectors.clone(),
            n_personas: self.n_personas,
            n_templates: self.n_templates,
            readoff: self.readoff,
        };
        let mut meta = Map::new();
        meta.insert("index".into(), serde_json::to_value(index).expect("index serializes"));
        let mut c = Container::new(meta);
        c.insert("raw", Tensor::new(vec![self.raw.rows(), self.raw.cols()], self.raw.as_slice().to_vec()));
        if let Some(w) = &self.weighted {
            c.insert("weighted", Tensor::new(vec![w.rows(), w.cols()], w.as_slice().to_vec()));
        }
        let probs: Vec<f32> = self.party_probs.iter().flatten().map(|&p| p as f32).collect();
        c.insert(
            "party_probs",
            Tensor::new(vec![self.party_probs.len(), self.parties.len()], probs),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let index: StoreIndex = serde_json::from_value(
            c.metadata
                .get("index")
                .cloned()
                .ok_or_else(|| Error::Artifact("activation store has no index".into()))?,
        )
        .map_err(|e| Error::json("activation store index", e))?;
        let cols = index.n_personas * index.n_templates;
        let matrix = |name: &str, rows: usize, cols: usize| -> Result<Option<Matrix>> {
            match c.tensors.get(name) {
                None => Ok(None),
                Some(t) if t.shape == [rows, cols] => Ok(Some(Matrix::from_vec(rows, cols, t.data.clone())?)),
                Some(t) => Err(Error::Artifact(format!(
                    "activation store tensor {name} has shape {:?}, expected [{rows}, {cols}]",
                    t.shape
                ))),
            }
        };
        let raw = matrix("raw", index.vectors.len(), cols)?
            .ok_or_else(|| Error::Artifact("activation store has no raw tensor".into()))?;
        let weighted = matrix("weighted", index.vectors.len(), cols)?;
        let probs = matrix("party_probs", cols, index.parties.len())?
            .ok_or_else(|| Error::Artifact("activation store has no party_probs tensor".into()))?;
        Ok(Self {
            party_probs: (0..cols)
                .map(|r| probs.row(r).iter().map(|&p| p as f64).collect())
                .collect(),
            parties: index.parties,
            party_tokens: index.party_tokens,
            vectors: index.vectors,
            n_personas: index.n_personas,
            n_templates: index.n_templates,
            readoff: index.readoff,
            raw,
            weighted,
        })
    }
}

/// Softmax over the logits of `tokens` only, in `f64`.
pub fn restricted_softmax(logits: &[f32], tokens: &[u32]) -> Vec<f64> {
    let picked: Vec<f64> = tokens.iter().map(|&t| logits[t as usize] as f64).collect();
    let max = picked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = picked.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Checks that no two parties share a token id.
pub fn check_party_tokens(parties: &[String], tokens: &[u32]) -> Result<()> {
    let mut seen: HashMap<u32, usize> = HashMap::new();
    for (i, &t) in tokens.iter().enumerate() {
        if let Some(&first) = seen.get(&t) {
            return Err(Error::DuplicatePartyToken {
                first: parties[first].clone(),
                second: parties[i].clone(),
                token: t,
            });
        }
        seen.insert(t, i);
    }
    Ok(())
}

/// Runs every (persona, template) prompt once and records coefficients of
/// every retained vector plus restricted party probabilities. Personas with
/// identical categories share a forward pass.
#[allow(clippy::too_many_arguments)]
pub fn record_activations(
    model: &InstrumentedModel,
    tokenizer: &Tokenizer,
    config: &CountryConfig,
    selections: &[ValueVectorSelection],
    party_tokens: &[u32],
    personas: &PersonaSet,
    templates: &[PromptTemplate],
    readoff: Readoff,
) -> Result<ActivationStore> {
    if personas.is_empty() {
        return Err(Error::Marginals("persona list is empty".into()));
    }
    if templates.is_empty() {
        return Err(Error::CountryConfig("no templates selected".into()));
    }
    let parties: Vec<String> = config.parties.iter().map(|p| p.name.clone()).collect();
    if party_tokens.len() != parties.len() {
        return Err(Error::Artifact(format!(
            "{} party tokens for {} parties",
            party_tokens.len(),
            parties.len()
        )));
    }
    check_party_tokens(&parties, party_tokens)?;

    let mut vectors = Vec::new();
    for sel in selections {
        let party = parties
            .iter()
            .position(|p| *p == sel.party)
            .ok_or_else(|| Error::Artifact(format!("selection party {:?} is not in the config", sel.party)))?;
        for v in sel.retained() {
            vectors.push(StoredVector {
                party,
                layer: v.layer,
                neuron: v.neuron,
                cosine: v.cosine,
            });
        }
    }
    if vectors.is_empty() {
        return Err(Error::EmptySelection {
            party: "(all parties)".into(),
        });
    }

    // distinct prompts in first-appearance order
    let mut slot_of: HashMap<(&[usize], usize), usize> = HashMap::new();
    let mut unique: Vec<(usize, usize)> = Vec::new();
    let mut column_slot = Vec::with_capacity(personas.len() * templates.len());
    for (p, persona) in personas.personas.iter().enumerate() {
        for j in 0..templates.len() {
            let slot = *slot_of.entry((&persona.categories, j)).or_insert_with(|| {
                unique.push((p, j));
                unique.len() - 1
            });
            column_slot.push(slot);
        }
    }
    log::info!(
        "recording {} prompts ({} distinct) for {} vectors",
        column_slot.len(),
        unique.len(),
        vectors.len()
    );

    let max = model.config().max_seq_len;
    let records: Vec<(Vec<f32>, Vec<f64>)> = unique
        .par_iter()
        .map(|&(p, j)| {
            let persona = &personas.personas[p];
            let text = render_prompt(config, persona, &templates[j])?;
            let ids = tokenizer.encode(&text)?;
            if ids.len() > max {
                return Err(Error::PromptTooLong {
                    persona: persona.id,
                    template: templates[j].id.clone(),
                    len: ids.len(),
                    max,
                });
            }
            let trace = model.forward(&ids)?;
            let last = trace.last_position();
            let coeffs = vectors
                .iter()
                .map(|v| {
                    let m = &trace.mlp_coeffs[v.layer];
                    match readoff {
                        Readoff::FinalPosition => m.get(last, v.neuron),
                        Readoff::MeanOverPositions => {
                            let s: f64 = (0..m.rows()).map(|r| m.get(r, v.neuron) as f64).sum();
                            (s / m.rows() as f64) as f32
                        }
                    }
                })
                .collect();
            Ok((coeffs, restricted_softmax(&trace.final_logits, party_tokens)))
        })
        .collect::<Result<_>>()?;

    let cols = column_slot.len();
    let mut raw = Matrix::zeros(vectors.len(), cols);
    let mut party_probs = Vec::with_capacity(cols);
    for (col, &slot) in column_slot.iter().enumerate() {
        for (v, &m) in records[slot].0.iter().enumerate() {
            raw.set(v, col, m);
        }
        party_probs.push(records[slot].1.clone());
    }
    Ok(ActivationStore {
        parties,
        party_tokens: party_tokens.to_vec(),
        vectors,
        n_personas: personas.len(),
        n_templates: templates.len(),
        readoff,
        raw,
        weighted: None,
        party_probs,
    })
}

/// Population z-score of each vector's coefficients over the batch, times
/// the vector's cosine. A vector with zero spread gets all zeros.
pub fn normalize_and_weight(store: &mut ActivationStore) {
    let mut weighted = Matrix::zeros(store.raw.rows(), store.raw.cols());
    for (v, info) in store.vectors.iter().enumerate() {
        let row = store.raw.row(v);
        let n = row.len() as f64;
        let mean = row.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = row.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        let out = weighted.row_mut(v);
        if sd > 0.0 {
            for (o, &x) in out.iter_mut().zip(row) {
                *o = ((x as f64 - mean) / sd * info.cosine) as f32;
            }
        }
    }
    store.weighted = Some(weighted);
}

/// Party scores `A`, one value per store column, or `None` for parties
/// without retained vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PartyScores {
    pub parties: Vec<String>,
    pub scores: Vec<Option<Vec<f64>>>,
}

impl PartyScores {
    pub fn get(&self, party: usize) -> Result<&[f64]> {
        self.scores[party].as_deref().ok_or_else(|| Error::EmptySelection {
            party: self.parties[party].clone(),
        })
    }
}

pub fn party_scores(store: &ActivationStore) -> Result<PartyScores> {
    let weighted = store
        .weighted
        .as_ref()
        .ok_or_else(|| Error::Artifact("activation store is not normalized".into()))?;
    let cols = weighted.cols();
    let mut sums = vec![vec![0.0f64; cols]; store.parties.len()];
    let mut counts = vec![0usize; store.parties.len()];
    for (v, info) in store.vectors.iter().enumerate() {
        counts[info.party] += 1;
        for (s, &a) in sums[info.party].iter_mut().zip(weighted.row(v)) {
            *s += a as f64;
        }
    }
    let scores = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|x| x / n as f64).collect()))
        .collect();
    Ok(PartyScores {
        parties: store.parties.clone(),
        scores,
    })
}

/// Weighted mean of `values[p·J + j]` over personas in each category of
/// attribute `k` and all templates. Empty categories yield `None`.
pub fn category_means(
    values: impl Fn(usize) -> f64,
    personas: &PersonaSet,
    n_templates: usize,
    k: usize,
    n_categories: usize,
) -> Vec<Option<f64>> {
    personas_by_category(personas, k, n_categories)
        .into_iter()
        .map(|members| {
            let mut num = 0.0;
            let mut den = 0.0;
            for p in members {
                let w = personas.weights[p];
                for j in 0..n_templates {
                    num += w * values(p * n_templates + j);
                    den += w;
                }
            }
            (den > 0.0).then(|| num / den)
        })
        .collect()
}

/// Maps per-category latent scores of one party to a distribution. Empty
/// categories take the party's floor (its lowest observed score).
pub fn normalize_latent_row(raw: &[Option<f64>], norm: LatentNorm) -> Result<Vec<f64>> {
    let observed: Vec<f64> = raw.iter().flatten().copied().collect();
    if observed.is_empty() {
        return Err(Error::Distribution("no category has any sampled persona".into()));
    }
    let floor = observed.iter().cloned().fold(f64::INFINITY, f64::min);
    if raw.iter().any(Option::is_none) {
        log::warn!("empty category cell filled with the party floor value");
    }
    let filled: Vec<f64> = raw.iter().map(|v| v.unwrap_or(floor)).collect();
    let n = filled.len() as f64;
    let row = match norm {
        LatentNorm::MinShift => {
            let shifted: Vec<f64> = filled.iter().map(|v| v - floor).collect();
            let total: f64 = shifted.iter().sum();
            if total > 0.0 {
                shifted.into_iter().map(|v| v / total).collect()
            } else {
                vec![1.0 / n; filled.len()]
            }
        }
        LatentNorm::Softmax => {
            let max = filled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = filled.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / total).collect()
        }
    };
    Ok(row)
}

/// Latent category distribution of every scored party for attribute `k`.
/// Parties without retained vectors are left out with a warning.
pub fn latent_distribution(
    scores: &PartyScores,
    personas: &PersonaSet,
    n_templates: usize,
    k: usize,
    n_categories: usize,
    norm: LatentNorm,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for o in 0..scores.parties.len() {
        let Ok(a) = scores.get(o) else {
            log::warn!("party {:?} has no retained vectors; no latent estimate", scores.parties[o]);
            continue;
        };
        let raw = category_means(|c| a[c], personas, n_templates, k, n_categories);
        out.insert(o, normalize_latent_row(&raw, norm)?);
    }
    Ok(out)
}

/// Probability-baseline category distribution of every party for
/// attribute `k`: category means of the restricted party probability,
/// normalized across categories.
pub fn probability_distribution(
    store: &ActivationStore,
    personas: &PersonaSet,
    k: usize,
    n_categories: usize,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for o in 0..store.parties.len() {
        let means = category_means(|c| store.party_probs[c][o], personas, store.n_templates, k, n_categories);
        if means.iter().any(Option::is_none) {
            log::warn!("empty category cell gets zero probability mass");
        }
        let vals: Vec<f64> = means.into_iter().map(|m| m.unwrap_or(0.0)).collect();
        let total: f64 = vals.iter().sum();
        let row = if total > 0.0 {
            vals.into_iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / n_categories as f64; n_categories]
        };
        out.insert(o, row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persona::Persona;
    use proptest::prelude::*;

    fn store_with(raw: Vec<Vec<f32>>, cos: Vec<f64>, party_of: Vec<usize>, n_parties: usize) -> ActivationStore {
        let cols = raw[0].len();
        ActivationStore {
            parties: (0..n_parties).map(|i| format!("P{i}")).collect(),
            party_tokens: (0..n_parties as u32).collect(),
            vectors: cos
                .iter()
                .zip(&party_of)
                .enumerate()
                .map(|(i, (&c, &p))| StoredVector {
                    party: p,
                    layer: 0,
                    neuron: i,
                    cosine: c,
                })
                .collect(),
            n_personas: cols,
            n_templates: 1,
            readoff: Readoff::FinalPosition,
            raw: Matrix::from_vec(raw.len(), cols, raw.concat()).unwrap(),
            weighted: None,
            party_probs: vec![vec![1.0 / n_parties as f64; n_parties]; cols],
        }
    }

    #[test]
    fn z_score_hand_case() {
        let mut s = store_with(vec![vec![1.0, 3.0], vec![2.0, 2.0]], vec![0.5, 0.9], vec![0, 0], 1);
        normalize_and_weight(&mut s);
        let w = s.weighted.as_ref().unwrap();
        assert_eq!(w.row(0), &[-0.5, 0.5]);
        assert_eq!(w.row(1), &[0.0, 0.0]);
        let neg = {
            let mut t = store_with(vec![vec![1.0, 3.0]], vec![-0.5], vec![0], 1);
            normalize_and_weight(&mut t);
            t.weighted.unwrap()
        };
        assert_eq!(neg.row(0), &[0.5, -0.5]);
    }

    #[test]
    fn scores_are_means_and_empty_party_errors() {
        let mut s = store_with(vec![vec![1.0, 3.0], vec![3.0, 1.0]], vec![0.2, 0.2], vec![0, 0], 2);
        normalize_and_weight(&mut s);
        let a = party_scores(&s).unwrap();
        assert_eq!(a.get(0).unwrap(), &[0.0, 0.0]);
        assert!(matches!(a.get(1), Err(Error::EmptySelection { .. })));
    }

    #[test]
    fn latent_rows_hand_cases() {
        let r = normalize_latent_row(&[Some(0.0), Some(0.4)], LatentNorm::MinShift).unwrap();
        assert_eq!(r, vec![0.0, 1.0]);
        let r = normalize_latent_row(&[Some(0.3); 4], LatentNorm::MinShift).unwrap();
        assert_eq!(r, vec![0.25; 4]);
        let r = normalize_latent_row(&[Some(0.0), Some(3f64.ln())], LatentNorm::Softmax).unwrap();
        assert!((r[0] - 0.25).abs() < 1e-12 && (r[1] - 0.75).abs() < 1e-12);
        let r = normalize_latent_row(&[Some(1.0), None, Some(2.0)], LatentNorm::MinShift).unwrap();
        assert_eq!(r, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn restricted_softmax_matches_masked_renormalization() {
        let logits = [0.3f32, -1.0, 2.0, 0.7, 5.0];
        let tokens = [0u32, 2, 3];
        let full = crate::tensor::softmax(&logits);
        let mass: f64 = tokens.iter().map(|&t| full[t as usize]).sum();
        let r = restricted_softmax(&logits, &tokens);
        for (i, &t) in tokens.iter().enumerate() {
            assert!((r[i] - full[t as usize] / mass).abs() < 1e-12);
        }
        assert!(check_party_tokens(&["A".into(), "B".into()], &[4, 4]).is_err());
    }

    fn two_cat_personas(n: usize) -> PersonaSet {
        PersonaSet {
            personas: (0..n)
                .map(|id| Persona {
                    id,
                    categories: vec![id % 2],
                })
                .collect(),
            weights: vec![1.0; n],
        }
    }

    proptest! {
        #[test]
        fn latent_row_shift_invariant(
            vals in proptest::collection::vec(-3.0f64..3.0, 2..6),
            shift in -100.0f64..100.0,
            minshift in any::<bool>(),
        ) {
            let norm = if minshift { LatentNorm::MinShift } else { LatentNorm::Softmax };
            let a: Vec<Option<f64>> = vals.iter().map(|&v| Some(v)).collect();
            let b: Vec<Option<f64>> = vals.iter().map(|&v| Some(v + shift)).collect();
            let ra = normalize_latent_row(&a, norm).unwrap();
            let rb = normalize_latent_row(&b, norm).unwrap();
            prop_assert!((ra.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (x, y) in ra.iter().zip(&rb) {
                prop_assert!((x - y).abs() < 1e-9);
                prop_assert!(*x >= 0.0);
            }
        }

        #[test]
        fn pooled_rows_equal_mean_of_template_rows(
            scores in proptest::collection::vec(-2.0f64..2.0, 24),
        ) {
            // 8 personas × 3 templates, uniform weights
            let personas = two_cat_personas(8);
            let pooled = category_means(|c| scores[c], &personas, 3, 0, 2);
            for (g, pooled_g) in pooled.iter().enumerate() {
                let per_template: Vec<f64> = (0..3)
                    .map(|j| {
                        category_means(|p| scores[p * 3 + j], &personas, 1, 0, 2)[g].unwrap()
                    })
                    .collect();
                let mean = per_template.iter().sum::<f64>() / 3.0;
                prop_assert!((pooled_g.unwrap() - mean).abs() < 1e-9);
            }
        }

        #[test]
        fn relabeling_personas_keeps_latent_rows(seed in any::<u64>()) {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 10;
            let personas = two_cat_personas(n);
            let a: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let shuffled = PersonaSet {
                personas: perm.iter().enumerate().map(|(new, &old)| Persona { id: new, categories: personas.personas[old].categories.clone() }).collect(),
                weights: vec![1.0; n],
            };
            let b: Vec<f64> = perm.iter().flat_map(|&old| [a[old * 2 + 1], a[old * 2]]).collect();
            let ra = normalize_latent_row(&category_means(|c| a[c], &personas, 2, 0, 2), LatentNorm::Softmax).unwrap();
            let rb = normalize_latent_row(&category_means(|c| b[c], &shuffled, 2, 0, 2), LatentNorm::Softmax).unwrap();
            for (x, y) in ra.iter().zip(&rb) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

//! Synthetic worlds with known answers.
//!
//! A [`PlantSpec`] describes parties, persona attributes and the log-odds
//! each category adds to each party. [`build_world`] turns it into a
//! tokenizer, a country config, a probe corpus and a small transformer whose
//! internals encode those log-odds:
//!
//! * the residual basis reserves a bias dimension, one direction `u_o` per
//!   party, one direction per category and an attention flag, with the
//!   remaining dimensions shared by ordinary words;
//! * layer 0 attention moves the category directions of the prompt onto the
//!   final position;
//! * at layer `⌊0.6L⌋` each party gets planted neurons whose key reads the
//!   category directions so that the pre-activation is
//!   `s_o(persona) + offset`, and whose value vector is `ν·u_o`;
//! * party unembedding rows are `λ·u_o`, with `λ` chosen so that the party
//!   logits equal `s_o` up to a shared constant.
//!
//! With a clean head the restricted next-token distribution over party
//! tokens is the generator's `P(party | persona)`. [`corrupt_output_head`]
//! replaces the party rows without touching anything upstream.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::distribution::{DistributionSet, DistributionTable, Source, Survey, SurveyRow};
use crate::error::{Error, Result};
use crate::model::{Activation, InstrumentedModel, ModelConfig};
use crate::persona::{
    enumerate_personas, render_prompt, sample_personas, AttributeSchema, CountryConfig, Marginals, PartySpec,
    Persona, PromptTemplate, Scale, DEFAULT_ENUMERATION_CAP,
};
use crate::probe::{ProbeCorpus, ProbeRecord, Split};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributePlant {
    pub name: String,
    pub scale: Scale,
    pub categories: Vec<String>,
    /// Log-odds contribution, indexed `[category][party]`.
    pub effects: Vec<Vec<f64>>,
    /// Category weights for persona sampling; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marginal: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub num_layers: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            num_layers: 4,
            model_dim: 64,
            mlp_dim: 128,
            num_heads: 1,
            max_seq_len: 64,
            activation: Activation::Gelu,
        }
    }
}

fn default_neurons() -> usize {
    2
}
fn default_statements() -> usize {
    80
}
fn default_issue_words() -> usize {
    12
}
fn default_survey_size() -> usize {
    10_000
}
fn default_value_scale() -> f32 {
    0.005
}
fn default_offset() -> f32 {
    8.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub seed: u64,
    /// Party names; each is also the party's single-token surface form.
    pub parties: Vec<String>,
    pub attributes: Vec<AttributePlant>,
    /// Output-head corruption strength; 0 keeps the head clean.
    #[serde(default)]
    pub corruption: f64,
    #[serde(default = "default_neurons")]
    pub neurons_per_party: usize,
    #[serde(default)]
    pub model: ModelShape,
    /// Prompt templates with `{attribute}` placeholders; a built-in set of
    /// three is used when empty.
    #[serde(default)]
    pub templates: Vec<String>,
    #[serde(default = "default_statements")]
    pub statements_per_party: usize,
    #[serde(default = "default_issue_words")]
    pub issue_words_per_party: usize,
    #[serde(default = "default_survey_size")]
    pub survey_size: usize,
    /// Norm of planted value vectors.
    #[serde(default = "default_value_scale")]
    pub value_scale: f32,
    /// Constant added to every planted pre-activation so GELU stays in
    /// its near-linear range.
    #[serde(default = "default_offset")]
    pub preactivation_offset: f32,
}

const DEFAULT_TEMPLATES: [&str; 3] = [
    "I am {age} and {gender} , with {education} schooling and {income} income , and I lean {ideology} . I vote for the party",
    "my views are {ideology} , my income is {income} , my schooling is {education} , I am {gender} and {age} . my party is",
    "as a {gender} {age} voter with {income} income , {education} schooling and {ideology} leanings I choose the party",
];

const FILLER_WORDS: [&str; 20] = [
    "we", "the", "should", "support", "policy", "people", "country", "future", "plan", "reform", "jobs",
    "taxes", "schools", "health", "roads", "energy", "housing", "rights", "budget", "law",
];

impl Default for PlantSpec {
    fn default() -> Self {
        let attr = |name: &str, scale, cats: &[&str], effects: &[[f64; 3]]| AttributePlant {
            name: name.into(),
            scale,
            categories: cats.iter().map(|c| c.to_string()).collect(),
            effects: effects.iter().map(|r| r.to_vec()).collect(),
            marginal: None,
        };
        Self {
            seed: 42,
            parties: vec!["alpha".into(), "beta".into(), "gamma".into()],
            attributes: vec![
                attr(
                    "age",
                    Scale::Ordinal,
                    &["teen", "adult", "midlife", "senior"],
                    &[[1.0, -0.4, -0.6], [0.4, 0.2, -0.6], [-0.4, 0.2, 0.2], [-1.0, 0.0, 1.0]],
                ),
                attr("gender", Scale::Nominal, &["man", "woman"], &[[0.4, -0.6, 0.2], [-0.4, 0.6, -0.2]]),
                attr(
                    "education",
                    Scale::Ordinal,
                    &["basic", "vocational", "academic"],
                    &[[-0.6, 0.6, 0.0], [0.0, -0.4, 0.4], [0.6, -0.2, -0.4]],
                ),
                attr(
                    "income",
                    Scale::Ordinal,
                    &["poor", "modest", "wealthy"],
                    &[[0.6, 0.2, -0.8], [0.0, 0.4, -0.4], [-0.6, -0.6, 1.2]],
                ),
                attr(
                    "ideology",
                    Scale::Ordinal,
                    &["leftist", "centrist", "rightist"],
                    &[[1.2, -0.2, -1.0], [-0.4, 0.8, -0.4], [-0.8, -0.6, 1.4]],
                ),
            ],
            corruption: 0.0,
            neurons_per_party: default_neurons(),
            model: ModelShape::default(),
            templates: Vec::new(),
            statements_per_party: default_statements(),
            issue_words_per_party: default_issue_words(),
            survey_size: default_survey_size(),
            value_scale: default_value_scale(),
            preactivation_offset: default_offset(),
        }
    }
}

/// Residual-stream layout of a planted model.
#[derive(Debug, Clone, Copy)]
struct Layout {
    parties: usize,
    categories: usize,
}

impl Layout {
    const BIAS: usize = 0;

    fn party(&self, o: usize) -> usize {
        1 + o
    }

    fn category(&self, flat: usize) -> usize {
        1 + self.parties + flat
    }

    fn flag(&self) -> usize {
        1 + self.parties + self.categories
    }

    fn first_word_dim(&self) -> usize {
        self.flag() + 1
    }
}

impl PlantSpec {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let spec: Self = serde_json::from_slice(bytes).map_err(|e| Error::json("plant spec", e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plant spec serializes")
    }

    pub fn templates(&self) -> Vec<String> {
        if self.templates.is_empty() {
            DEFAULT_TEMPLATES.iter().map(|t| t.to_string()).collect()
        } else {
            self.templates.clone()
        }
    }

    fn layout(&self) -> Layout {
        Layout {
            parties: self.parties.len(),
            categories: self.attributes.iter().map(|a| a.categories.len()).sum(),
        }
    }

    /// Flat index of (attribute, category) among all categories.
    fn flat_category(&self, k: usize, g: usize) -> usize {
        self.attributes[..k].iter().map(|a| a.categories.len()).sum::<usize>() + g
    }

    pub fn planted_layer(&self) -> usize {
        self.model.num_layers * 6 / 10
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::PlantSpec(m));
        let p = self.parties.len();
        if p < 2 {
            return bad("at least 2 parties are required".into());
        }
        let m = &self.model;
        if m.num_layers == 0 || m.num_layers > 6 || m.model_dim > 64 {
            return bad(format!(
                "planted models are limited to 1..=6 layers and model_dim <= 64, got {} and {}",
                m.num_layers, m.model_dim
            ));
        }
        let needed = self.layout().first_word_dim() + 8;
        if m.model_dim < needed {
            return bad(format!("model_dim {} is too small; the layout needs {needed}", m.model_dim));
        }
        if self.neurons_per_party == 0 || self.neurons_per_party * p > m.mlp_dim {
            return bad(format!(
                "{} planted neurons requested, mlp_dim is {}",
                self.neurons_per_party * p,
                m.mlp_dim
            ));
        }
        if !(self.corruption >= 0.0 && self.corruption.is_finite()) {
            return bad("corruption strength must be a finite value >= 0".into());
        }
        if !(self.value_scale > 0.0 && self.preactivation_offset.is_finite()) {
            return bad("value_scale must be positive".into());
        }
        if self.statements_per_party < 20 {
            return bad("statements_per_party must be at least 20".into());
        }
        if self.issue_words_per_party < 3 {
            return bad("issue_words_per_party must be at least 3".into());
        }
        for a in &self.attributes {
            if a.effects.len() != a.categories.len() || a.effects.iter().any(|r| r.len() != p) {
                return bad(format!("effects of {:?} must be [categories][parties]", a.name));
            }
            if a.effects.iter().flatten().any(|v| !v.is_finite()) {
                return bad(format!("effects of {:?} must be finite", a.name));
            }
            if let Some(w) = &a.marginal {
                if w.len() != a.categories.len() {
                    return bad(format!("marginal of {:?} has the wrong length", a.name));
                }
            }
        }
        let mut words: Vec<&str> = self.parties.iter().map(String::as_str).collect();
        words.extend(self.attributes.iter().flat_map(|a| a.categories.iter().map(String::as_str)));
        for w in &words {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return bad(format!("{w:?} must be a single whitespace-free word"));
            }
        }
        let mut sorted = words.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != words.len() {
            return bad("party names and category strings must all be distinct".into());
        }
        self.country_config()?;
        Ok(())
    }

    pub fn country_config(&self) -> Result<CountryConfig> {
        let cfg = CountryConfig {
            country: "Synthland".into(),
            language: "en".into(),
            year_of_election: None,
            attributes: self
                .attributes
                .iter()
                .map(|a| AttributeSchema {
                    name: a.name.clone(),
                    scale: a.scale,
                    categories: a.categories.clone(),
                })
                .collect(),
            parties: self
                .parties
                .iter()
                .map(|p| PartySpec {
                    name: p.clone(),
                    canonical_token_string: p.clone(),
                    token: None,
                })
                .collect(),
            templates: self
                .templates()
                .into_iter()
                .enumerate()
                .map(|(i, text)| PromptTemplate {
                    id: format!("t{}", i + 1),
                    text,
                    language: None,
                })
                .collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn marginals(&self, config: &CountryConfig) -> Result<Marginals> {
        Marginals::from_weights(
            config,
            self.attributes
                .iter()
                .map(|a| a.marginal.clone().unwrap_or_else(|| vec![1.0; a.categories.len()]))
                .collect(),
        )
    }

    /// Per-party log-odds `s_o` of a persona.
    pub fn log_odds(&self, persona: &Persona) -> Vec<f64> {
        let mut s = vec![0.0; self.parties.len()];
        for (a, &g) in self.attributes.iter().zip(&persona.categories) {
            for (so, e) in s.iter_mut().zip(&a.effects[g]) {
                *so += e;
            }
        }
        s
    }

    /// Generator `P(party | persona)`, the softmax of the log-odds.
    pub fn party_probabilities(&self, persona: &Persona) -> Vec<f64> {
        let s = self.log_odds(persona);
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
        let t: f64 = e.iter().sum();
        e.into_iter().map(|v| v / t).collect()
    }

    fn issue_word(&self, party: usize, i: usize) -> String {
        format!("{}_plank{i}", self.parties[party])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlantedNeuron {
    pub party: usize,
    pub layer: usize,
    pub neuron: usize,
}

/// Everything a pipeline run needs, generated from one spec.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub spec: PlantSpec,
    pub tokenizer: Tokenizer,
    pub country: CountryConfig,
    pub marginals: Marginals,
    pub corpus: ProbeCorpus,
    /// Model with the spec's corruption applied.
    pub model: InstrumentedModel,
    pub planted: Vec<PlantedNeuron>,
}

fn build_tokenizer(spec: &PlantSpec) -> Result<Tokenizer> {
    let mut words: Vec<String> = Vec::new();
    let mut push = |w: &str| {
        if !words.iter().any(|x| x == w) {
            words.push(w.to_string());
        }
    };
    for p in &spec.parties {
        push(p);
    }
    for a in &spec.attributes {
        for c in &a.categories {
            push(c);
        }
    }
    for t in spec.templates() {
        for w in t.split_whitespace().filter(|w| !w.starts_with('{')) {
            push(w);
        }
    }
    for w in FILLER_WORDS {
        push(w);
    }
    for o in 0..spec.parties.len() {
        for i in 0..spec.issue_words_per_party {
            push(&spec.issue_word(o, i));
        }
    }
    Tokenizer::from_tokens(words)
}

fn build_corpus(spec: &PlantSpec, rng: &mut ChaCha8Rng) -> Result<ProbeCorpus> {
    let mut records = Vec::new();
    for (o, party) in spec.parties.iter().enumerate() {
        for i in 0..spec.statements_per_party {
            let n_issue = rng.gen_range(2..=3);
            let n_filler = rng.gen_range(4..=6);
            let mut words: Vec<String> = (0..n_issue)
                .map(|_| spec.issue_word(o, rng.gen_range(0..spec.issue_words_per_party)))
                .collect();
            words.extend((0..n_filler).map(|_| FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())].to_string()));
            words.shuffle(rng);
            records.push(ProbeRecord {
                statement: words.join(" "),
                party: party.clone(),
                split: if i % 10 == 9 { Split::Holdout } else { Split::Train },
            });
        }
    }
    ProbeCorpus::new(records)
}

fn random_unit(rng: &mut ChaCha8Rng, dims: std::ops::Range<usize>, d: usize) -> Vec<f32> {
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut v = vec![0.0f32; d];
    for i in dims {
        v[i] = normal.sample(rng);
    }
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Builds the planted model and its surrounding artifacts.
pub fn build_world(spec: &PlantSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let country = spec.country_config()?;
    let marginals = spec.marginals(&country)?;
    let tokenizer = build_tokenizer(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let corpus = build_corpus(spec, &mut rng)?;

    let shape = &spec.model;
    let d = shape.model_dim;
    let config = ModelConfig {
        num_layers: shape.num_layers,
        model_dim: d,
        mlp_dim: shape.mlp_dim,
        num_heads: shape.num_heads,
        vocab_size: tokenizer.vocab_size(),
        activation: shape.activation,
        max_seq_len: shape.max_seq_len,
    };
    let noise = 0.02 / (d as f32).sqrt();
    let mut model = InstrumentedModel::random(config, rng.gen(), noise)?;
    let layout = spec.layout();
    let words = layout.first_word_dim()..d;
    // routing relies on every category token producing the same attention
    // score, so positions carry no signal
    model.weights_mut().pos_embed.as_mut_slice().fill(0.0);

    // token embeddings: bias + content, content norm 1
    let sqrt_half = std::f32::consts::FRAC_1_SQRT_2;
    for id in 0..tokenizer.vocab_size() as u32 {
        let tok = tokenizer.token(id).expect("dense ids").to_string();
        let mut e = vec![0.0f32; d];
        let category = spec
            .attributes
            .iter()
            .enumerate()
            .find_map(|(k, a)| a.categories.iter().position(|c| *c == tok).map(|g| spec.flat_category(k, g)));
        let issue_party = (0..spec.parties.len())
            .find(|&o| (0..spec.issue_words_per_party).any(|i| spec.issue_word(o, i) == tok));
        match (category, issue_party) {
            (Some(c), _) => {
                e[layout.category(c)] = sqrt_half;
                e[layout.flag()] = sqrt_half;
            }
            (None, Some(o)) => {
                let r = random_unit(&mut rng, words.clone(), d);
                for (x, rv) in e.iter_mut().zip(&r) {
                    *x = 0.6 * rv;
                }
                e[layout.party(o)] = 0.8;
            }
            (None, None) => e = random_unit(&mut rng, words.clone(), d),
        }
        e[Layout::BIAS] = 1.0;
        model.weights_mut().embed.row_mut(id as usize).copy_from_slice(&e);
    }

    // layer 0 attention: queries read the bias, keys read the flag, values
    // and output copy the category block
    let head_dim = d / shape.num_heads;
    let score_gap = 20.0f32;
    {
        let lw = &mut model.weights_mut().layers[0];
        for m in [&mut lw.wq, &mut lw.wk, &mut lw.wv, &mut lw.wo] {
            m.as_mut_slice().fill(0.0);
        }
        // a category token's normalized flag and the query's normalized bias
        // are both about sqrt(d)/2, so this gain gives the requested gap
        let per_unit = (d as f32 / 4.0) / (head_dim as f32).sqrt();
        let gain = (score_gap / per_unit).sqrt();
        for h in 0..shape.num_heads {
            let slot = h * head_dim;
            lw.wq.set(slot, Layout::BIAS, gain);
            lw.wk.set(slot, layout.flag(), gain);
        }
        for c in 0..layout.categories {
            let dim = layout.category(c);
            lw.wv.set(dim, dim, 1.0);
            lw.wo.set(dim, dim, 1.0);
        }
    }

    // planted neurons: values first, keys calibrated on a reference prompt
    let layer = spec.planted_layer();
    let mut planted = Vec::new();
    for o in 0..spec.parties.len() {
        for j in 0..spec.neurons_per_party {
            let neuron = o * spec.neurons_per_party + j;
            planted.push(PlantedNeuron { party: o, layer, neuron });
            let lw = &mut model.weights_mut().layers[layer];
            lw.mlp_keys.row_mut(neuron).fill(0.0);
            let v = lw.mlp_values.row_mut(neuron);
            v.fill(0.0);
            v[layout.party(o)] = spec.value_scale;
        }
    }
    let templates = country.templates.clone();
    let reference = Persona {
        id: 0,
        categories: vec![0; spec.attributes.len()],
    };
    let ref_ids = tokenizer.encode(&render_prompt(&country, &reference, &templates[0])?)?;
    let trace = model.forward(&ref_ids)?;
    let n = trace.mlp_inputs[layer].row(trace.last_position());
    let bias_scale = n[Layout::BIAS];
    let cat_scale = (0..spec.attributes.len())
        .map(|k| n[layout.category(spec.flat_category(k, 0))])
        .sum::<f32>()
        / spec.attributes.len() as f32;
    if bias_scale <= 0.0 || cat_scale <= 0.0 {
        return Err(Error::PlantSpec("layer-0 routing failed to reach the final position".into()));
    }
    for p in &planted {
        let key = model.weights_mut().layers[layer].mlp_keys.row_mut(p.neuron);
        key[Layout::BIAS] = spec.preactivation_offset / bias_scale;
        for (k, a) in spec.attributes.iter().enumerate() {
            for (g, effects) in a.effects.iter().enumerate() {
                key[layout.category(spec.flat_category(k, g))] = effects[p.party] as f32 / cat_scale;
            }
        }
    }

    // party unembedding rows λ·u_o so logits move one unit per unit of m
    let party_tokens: Vec<u32> = spec
        .parties
        .iter()
        .map(|p| tokenizer.id(p).expect("party in vocabulary"))
        .collect();
    for (o, &t) in party_tokens.iter().enumerate() {
        let row = model.weights_mut().unembed.row_mut(t as usize);
        row.fill(0.0);
        row[layout.party(o)] = 1.0;
    }
    let trace = model.forward(&ref_ids)?;
    let x = trace.residuals[shape.num_layers].row(trace.last_position());
    let rms = (x.iter().map(|v| v * v).sum::<f32>() / d as f32 + crate::model::RMS_EPS).sqrt();
    let lambda = rms / (spec.neurons_per_party as f32 * spec.value_scale);
    for &t in &party_tokens {
        model.weights_mut().unembed.row_mut(t as usize).iter_mut().for_each(|v| *v *= lambda);
    }

    let model = corrupt_output_head(&model, &party_tokens, spec.corruption, spec.seed);
    Ok(SyntheticWorld {
        spec: spec.clone(),
        tokenizer,
        country,
        marginals,
        corpus,
        model,
        planted,
    })
}

/// Replaces each party row `e` of the unembedding with
/// `(1 − min(γ, 1))·e + γ·r` for one seeded random unit vector `r`.
pub fn corrupt_output_head(model: &InstrumentedModel, party_tokens: &[u32], gamma: f64, seed: u64) -> InstrumentedModel {
    let mut out = model.clone();
    if gamma == 0.0 {
        return out;
    }
    let d = model.config().model_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    let r = random_unit(&mut rng, 0..d, d);
    let keep = (1.0 - gamma.min(1.0)) as f32;
    let g = gamma as f32;
    for &t in party_tokens {
        for (e, rv) in out.weights_mut().unembed.row_mut(t as usize).iter_mut().zip(&r) {
            *e = keep * *e + g * rv;
        }
    }
    out
}

/// Respondents drawn from the spec's marginals with party drawn from the
/// generator conditionals. Every row has weight 1.
pub fn generate_synthetic_survey(spec: &PlantSpec, country: &CountryConfig, n: usize, seed: u64) -> Result<Survey> {
    let marginals = spec.marginals(country)?;
    let personas = sample_personas(country, &marginals, n, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let rows = personas
        .personas
        .iter()
        .map(|p| {
            let probs = spec.party_probabilities(p);
            let party = WeightedIndex::new(&probs).expect("softmax is a distribution").sample(&mut rng);
            SurveyRow {
                categories: p.categories.clone(),
                party,
                weight: 1.0,
            }
        })
        .collect();
    Ok(Survey {
        parties: spec.parties.clone(),
        rows,
        skipped_unknown_party: 0,
    })
}

/// Exact generator `P(category | party)` per attribute, by enumerating the
/// persona space under the spec's marginals.
pub fn ground_truth(spec: &PlantSpec, country: &CountryConfig) -> Result<DistributionSet> {
    let marginals = spec.marginals(country)?;
    let set = enumerate_personas(country, &marginals, DEFAULT_ENUMERATION_CAP)?;
    let probs: Vec<Vec<f64>> = set.personas.iter().map(|p| spec.party_probabilities(p)).collect();
    let mut out = DistributionSet::default();
    for (k, attr) in country.attributes.iter().enumerate() {
        let mut mass = vec![vec![0.0; attr.categories.len()]; spec.parties.len()];
        for ((p, w), pr) in set.personas.iter().zip(&set.weights).zip(&probs) {
            for (o, po) in pr.iter().enumerate() {
                mass[o][p.categories[k]] += w * po;
            }
        }
        let rows = mass
            .into_iter()
            .enumerate()
            .map(|(o, row)| {
                let total: f64 = row.iter().sum();
                (spec.parties[o].clone(), row.into_iter().map(|v| v / total).collect())
            })
            .collect();
        out.tables.push(DistributionTable {
            source: Source::Survey,
            attribute: attr.name.clone(),
            categories: attr.categories.clone(),
            rows,
        });
    }
    Ok(out)
}

/// Generator table `P(party | persona)` over the whole persona space as CSV
/// with one column per attribute and one per party.
pub fn persona_conditionals_csv(spec: &PlantSpec, country: &CountryConfig) -> Result<String> {
    let set = enumerate_personas(country, &Marginals::uniform(country), DEFAULT_ENUMERATION_CAP)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = country.attributes.iter().map(|a| a.name.clone()).collect();
    header.extend(spec.parties.iter().cloned());
    w.write_record(&header).map_err(|e| Error::csv("persona conditionals", e))?;
    for p in &set.personas {
        let mut row: Vec<String> = country
            .attributes
            .iter()
            .zip(&p.categories)
            .map(|(a, &g)| a.categories[g].clone())
            .collect();
        row.extend(spec.party_probabilities(p).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| Error::csv("persona conditionals", e))?;
    }
    Ok(String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"))
}

/// Party token ids of a world, in party order.
pub fn party_tokens(world: &SyntheticWorld) -> Vec<u32> {
    world
        .spec
        .parties
        .iter()
        .map(|p| world.tokenizer.id(p).expect("party in vocabulary"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::restricted_softmax;
    use crate::model::next_token_distribution;

    fn world() -> SyntheticWorld {
        build_world(&PlantSpec::default()).unwrap()
    }

    fn prompt(w: &SyntheticWorld, persona: &Persona, t: usize) -> Vec<u32> {
        w.tokenizer
            .encode(&render_prompt(&w.country, persona, &w.country.templates[t]).unwrap())
            .unwrap()
    }

    #[test]
    fn default_spec_is_valid_and_round_trips() {
        let spec = PlantSpec::default();
        assert_eq!(PlantSpec::from_json(spec.to_json().as_bytes()).unwrap(), spec);
        for (i, a) in (0..spec.parties.len()).zip(1..) {
            // planted party directions are distinct basis vectors
            assert_eq!(spec.layout().party(i), a);
        }
    }

    #[test]
    fn too_many_neurons_is_rejected() {
        let spec = PlantSpec {
            neurons_per_party: 50,
            ..PlantSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::PlantSpec(_))));
    }

    #[test]
    fn clean_head_reproduces_generator_conditionals() {
        let w = world();
        let tokens = party_tokens(&w);
        for cats in [vec![0, 0, 1, 0, 0], vec![3, 1, 2, 2, 2], vec![1, 1, 0, 1, 1]] {
            let persona = Persona { id: 0, categories: cats };
            let truth = w.spec.party_probabilities(&persona);
            for t in 0..3 {
                let trace = w.model.forward(&prompt(&w, &persona, t)).unwrap();
                let got = restricted_softmax(&trace.final_logits, &tokens);
                for (a, b) in got.iter().zip(&truth) {
                    assert!((a - b).abs() < 0.02, "template {t}: {got:?} vs {truth:?}");
                }
            }
        }
    }

    #[test]
    fn extreme_persona_prefers_its_party() {
        let w = world();
        // teen, man, academic, poor, leftist: strongly alpha
        let persona = Persona {
            id: 0,
            categories: vec![0, 0, 2, 0, 0],
        };
        let trace = w.model.forward(&prompt(&w, &persona, 0)).unwrap();
        let dist = next_token_distribution(&trace);
        let argmax = (0..dist.len()).max_by(|&a, &b| dist[a].total_cmp(&dist[b])).unwrap();
        assert_eq!(argmax as u32, party_tokens(&w)[0]);
    }

    #[test]
    fn corruption_only_touches_party_rows() {
        let w = world();
        let tokens = party_tokens(&w);
        assert_eq!(corrupt_output_head(&w.model, &tokens, 0.0, 1), w.model);
        let bad = corrupt_output_head(&w.model, &tokens, 1.0, 1);
        let persona = Persona {
            id: 0,
            categories: vec![2, 0, 1, 2, 1],
        };
        let ids = prompt(&w, &persona, 1);
        let (a, b) = (w.model.forward(&ids).unwrap(), bad.forward(&ids).unwrap());
        assert_eq!(a.residuals, b.residuals);
        assert_eq!(a.mlp_coeffs, b.mlp_coeffs);
        let rows: Vec<&[f32]> = tokens.iter().map(|&t| bad.weights().unembed.row(t as usize)).collect();
        assert!(rows.windows(2).all(|p| p[0] == p[1]));
        let r = restricted_softmax(&b.final_logits, &tokens);
        assert!(r.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-6));
    }

    #[test]
    fn planted_neurons_track_log_odds() {
        let w = world();
        let persona_hi = Persona { id: 0, categories: vec![0, 0, 2, 0, 0] };
        let persona_lo = Persona { id: 1, categories: vec![3, 1, 0, 2, 2] };
        let layer = w.spec.planted_layer();
        let m = |p: &Persona| {
            let t = w.model.forward(&prompt(&w, p, 0)).unwrap();
            t.mlp_coeffs[layer].get(t.last_position(), 0)
        };
        assert!(m(&persona_hi) > m(&persona_lo));
    }

    #[test]
    fn survey_matches_generator() {
        let spec = PlantSpec::default();
        let country = spec.country_config().unwrap();
        let survey = generate_synthetic_survey(&spec, &country, 10_000, 3).unwrap();
        let truth = ground_truth(&spec, &country).unwrap();
        for (k, attr) in country.attributes.iter().enumerate() {
            let got = crate::distribution::survey_distribution(&survey, k, attr.categories.len()).unwrap();
            let want = truth.get(Source::Survey, &attr.name).unwrap();
            for (o, row) in &got {
                for (a, b) in row.iter().zip(want.row(&spec.parties[*o]).unwrap()) {
                    assert!((a - b).abs() < 0.03, "{} {o}: {a} vs {b}", attr.name);
                }
            }
        }
    }

    #[test]
    fn zero_and_saturated_log_odds() {
        let mut spec = PlantSpec::default();
        for a in &mut spec.attributes {
            a.effects.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v = 0.0));
        }
        let country = spec.country_config().unwrap();
        let survey = generate_synthetic_survey(&spec, &country, 9_000, 4).unwrap();
        let shares = survey.party_marginal();
        let bound = 3.0 * (1.0f64 / 3.0 * 2.0 / 3.0 / 9_000.0).sqrt();
        assert!(shares.iter().all(|s| (s - 1.0 / 3.0).abs() < bound), "{shares:?}");

        let mut sat = PlantSpec::default();
        for a in &mut sat.attributes {
            a.effects.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v = 0.0));
        }
        sat.attributes[1].effects = vec![vec![10.0, 0.0, 0.0], vec![0.0, 10.0, 0.0]];
        let persona = Persona { id: 0, categories: vec![0, 1, 0, 0, 0] };
        assert!(sat.party_probabilities(&persona)[1] > 0.999);
    }
}

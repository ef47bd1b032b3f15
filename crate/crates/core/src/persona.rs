//! Country persona schemas, prompt templates and persona sampling.

use std::collections::BTreeSet;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of templates used when a run does not say otherwise.
pub const DEFAULT_TEMPLATE_COUNT: usize = 10;
/// Largest persona cross-product that [`enumerate_personas`] will expand.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// Placeholders filled from the config itself rather than from a persona.
const CONFIG_PLACEHOLDERS: [&str; 2] = ["year_of_election", "country"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Nominal,
    Ordinal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub name: String,
    pub scale: Scale,
    pub categories: Vec<String>,
}

impl AttributeSchema {
    pub fn category_index(&self, category: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == category)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartySpec {
    pub name: String,
    /// Surface form whose first token stands for the party.
    pub canonical_token_string: String,
    /// Explicit token surface overriding `canonical_token_string`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

impl PartySpec {
    pub fn token_surface(&self) -> &str {
        self.token.as_deref().unwrap_or(&self.canonical_token_string)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
}

impl PromptTemplate {
    /// Placeholder names in order of appearance, with duplicates.
    pub fn placeholders(&self) -> Vec<&str> {
        placeholders(&self.text)
    }
}

/// Names inside `{...}` where the name is a non-empty run of `[A-Za-z0-9_]`.
fn placeholders(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close)
                if close > 0
                    && after[..close]
                        .chars()
                        .all(|c| c.is_ascii_alphanumeric() || c == '_') =>
            {
                out.push(&after[..close]);
                rest = &after[close + 1..];
            }
            _ => rest = after,
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryConfig {
    pub country: String,
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year_of_election: Option<String>,
    pub attributes: Vec<AttributeSchema>,
    pub parties: Vec<PartySpec>,
    pub templates: Vec<PromptTemplate>,
}

impl CountryConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(bytes).map_err(|e| Error::json("country config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::CountryConfig(m));
        if self.attributes.is_empty() {
            return bad("no attributes".into());
        }
        let mut names = BTreeSet::new();
        for a in &self.attributes {
            if CONFIG_PLACEHOLDERS.contains(&a.name.as_str()) {
                return bad(format!("attribute name {:?} is reserved", a.name));
            }
            if !names.insert(a.name.as_str()) {
                return bad(format!("duplicate attribute {:?}", a.name));
            }
            if a.categories.is_empty() {
                return bad(format!("attribute {:?} has no categories", a.name));
            }
            if a.scale == Scale::Ordinal && a.categories.len() < 2 {
                return bad(format!("ordinal attribute {:?} needs at least 2 categories", a.name));
            }
            let unique: BTreeSet<&String> = a.categories.iter().collect();
            if unique.len() != a.categories.len() {
                return bad(format!("attribute {:?} repeats a category", a.name));
            }
        }
        if self.parties.is_empty() {
            return bad("party set is empty".into());
        }
        let mut parties = BTreeSet::new();
        for p in &self.parties {
            if !parties.insert(p.name.as_str()) {
                return bad(format!("duplicate party {:?}", p.name));
            }
            if p.token_surface().trim().is_empty() {
                return bad(format!("party {:?} has an empty token string", p.name));
            }
        }
        if self.templates.is_empty() {
            return bad("at least one template is required".into());
        }
        let mut ids = BTreeSet::new();
        for t in &self.templates {
            if !ids.insert(t.id.as_str()) {
                return bad(format!("duplicate template id {:?}", t.id));
            }
            let used: BTreeSet<&str> = t.placeholders().into_iter().collect();
            for a in &self.attributes {
                if !used.contains(a.name.as_str()) {
                    return Err(Error::UnresolvedPlaceholder {
                        template: t.id.clone(),
                        placeholder: a.name.clone(),
                    });
                }
            }
            for p in used {
                if !names.contains(p) && !CONFIG_PLACEHOLDERS.contains(&p) {
                    return bad(format!("template {:?} references unknown attribute {{{p}}}", t.id));
                }
                if p == "year_of_election" && self.year_of_election.is_none() {
                    return bad(format!(
                        "template {:?} uses {{year_of_election}} but the config sets none",
                        t.id
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn attribute(&self, name: &str) -> Option<(usize, &AttributeSchema)> {
        self.attributes.iter().enumerate().find(|(_, a)| a.name == name)
    }

    /// The first `j` templates, or [`DEFAULT_TEMPLATE_COUNT`] capped at what
    /// the config provides.
    pub fn select_templates(&self, j: Option<usize>) -> Result<&[PromptTemplate]> {
        let j = j.unwrap_or(DEFAULT_TEMPLATE_COUNT.min(self.templates.len()));
        if j == 0 || j > self.templates.len() {
            return Err(Error::CountryConfig(format!(
                "requested {j} templates, config defines {}",
                self.templates.len()
            )));
        }
        Ok(&self.templates[..j])
    }

    /// Number of distinct personas in the full cross-product.
    pub fn persona_space_size(&self) -> u128 {
        self.attributes
            .iter()
            .map(|a| a.categories.len() as u128)
            .fold(1u128, |acc, n| acc.saturating_mul(n))
    }
}

/// One category index per schema attribute.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Persona {
    pub id: usize,
    pub categories: Vec<usize>,
}

impl Persona {
    pub fn validate(&self, config: &CountryConfig) -> Result<()> {
        if self.categories.len() != config.attributes.len() {
            return Err(Error::CountryConfig(format!(
                "persona {} assigns {} attributes, schema has {}",
                self.id,
                self.categories.len(),
                config.attributes.len()
            )));
        }
        for (a, &g) in config.attributes.iter().zip(&self.categories) {
            if g >= a.categories.len() {
                return Err(Error::CountryConfig(format!(
                    "persona {} uses category index {g} for {:?}, which has {}",
                    self.id,
                    a.name,
                    a.categories.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonaSet {
    pub personas: Vec<Persona>,
    pub weights: Vec<f64>,
}

impl PersonaSet {
    pub fn len(&self) -> usize {
        self.personas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.personas.is_empty()
    }

    pub fn to_csv(&self, config: &CountryConfig) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_string()];
        header.extend(config.attributes.iter().map(|a| a.name.clone()));
        header.push("weight".into());
        w.write_record(&header).expect("in-memory csv write");
        for (p, wt) in self.personas.iter().zip(&self.weights) {
            let mut row = vec![p.id.to_string()];
            row.extend(
                config
                    .attributes
                    .iter()
                    .zip(&p.categories)
                    .map(|(a, &g)| a.categories[g].clone()),
            );
            row.push(format!("{wt}"));
            w.write_record(&row).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Fills every placeholder of `template` from `persona` and the config.
pub fn render_prompt(config: &CountryConfig, persona: &Persona, template: &PromptTemplate) -> Result<String> {
    persona.validate(config)?;
    let mut out = String::with_capacity(template.text.len() + 64);
    let mut rest = template.text.as_str();
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or_else(|| Error::UnresolvedPlaceholder {
            template: template.id.clone(),
            placeholder: after.to_string(),
        })?;
        let name = &after[..close];
        let value = match config.attribute(name) {
            Some((k, a)) => a.categories[persona.categories[k]].as_str(),
            None => match name {
                "year_of_election" => config.year_of_election.as_deref().unwrap_or_default(),
                "country" => config.country.as_str(),
                _ => {
                    return Err(Error::UnresolvedPlaceholder {
                        template: template.id.clone(),
                        placeholder: name.to_string(),
                    })
                }
            },
        };
        out.push_str(value);
        rest = &after[close + 1..];
    }
    if rest.contains('}') {
        return Err(Error::UnresolvedPlaceholder {
            template: template.id.clone(),
            placeholder: "}".into(),
        });
    }
    out.push_str(rest);
    Ok(out)
}

/// Per-attribute category distributions in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub probabilities: Vec<Vec<f64>>,
}

impl Marginals {
    pub fn uniform(config: &CountryConfig) -> Self {
        Self {
            probabilities: config
                .attributes
                .iter()
                .map(|a| vec![1.0 / a.categories.len() as f64; a.categories.len()])
                .collect(),
        }
    }

    /// Normalizes raw nonnegative weights per attribute.
    pub fn from_weights(config: &CountryConfig, weights: Vec<Vec<f64>>) -> Result<Self> {
        if weights.len() != config.attributes.len() {
            return Err(Error::Marginals(format!(
                "{} attributes given, schema has {}",
                weights.len(),
                config.attributes.len()
            )));
        }
        let mut probabilities = Vec::with_capacity(weights.len());
        for (a, w) in config.attributes.iter().zip(weights) {
            if w.len() != a.categories.len() {
                return Err(Error::Marginals(format!(
                    "attribute {:?} has {} weights for {} categories",
                    a.name,
                    w.len(),
                    a.categories.len()
                )));
            }
            if w.iter().any(|&x| !x.is_finite() || x < 0.0) {
                return Err(Error::Marginals(format!(
                    "attribute {:?} has a negative or non-finite weight",
                    a.name
                )));
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(Error::Marginals(format!("attribute {:?} has zero total mass", a.name)));
            }
            probabilities.push(w.into_iter().map(|x| x / total).collect());
        }
        Ok(Self { probabilities })
    }

    /// Parses the `attribute,category,weight` CSV. Attributes absent from the
    /// file have zero mass and are rejected.
    pub fn from_csv_reader<R: std::io::Read>(config: &CountryConfig, reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            attribute: String,
            category: String,
            weight: f64,
        }
        let mut weights: Vec<Vec<f64>> = config
            .attributes
            .iter()
            .map(|a| vec![0.0; a.categories.len()])
            .collect();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::Fields).from_reader(reader);
        for row in rdr.deserialize::<Row>() {
            let row = row.map_err(|e| Error::csv("marginals", e))?;
            let (k, a) = config
                .attribute(&row.attribute)
                .ok_or_else(|| Error::Marginals(format!("unknown attribute {:?}", row.attribute)))?;
            let g = a.category_index(&row.category).ok_or_else(|| {
                Error::Marginals(format!(
                    "category {:?} is not in the schema of {:?}",
                    row.category, row.attribute
                ))
            })?;
            weights[k][g] += row.weight;
        }
        Self::from_weights(config, weights)
    }

    pub fn load(config: &CountryConfig, path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(config, file)
    }

    pub fn to_csv(&self, config: &CountryConfig) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["attribute", "category", "weight"]).expect("in-memory csv write");
        for (a, probs) in config.attributes.iter().zip(&self.probabilities) {
            for (c, p) in a.categories.iter().zip(probs) {
                w.write_record([a.name.as_str(), c.as_str(), &format!("{p}")])
                    .expect("in-memory csv write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Draws `n` personas, each attribute independently from its marginal, with
/// one sequential ChaCha8 stream. Every persona carries weight 1.
pub fn sample_personas(config: &CountryConfig, marginals: &Marginals, n: usize, seed: u64) -> Result<PersonaSet> {
    if n == 0 {
        return Err(Error::Marginals("persona count must be at least 1".into()));
    }
    if marginals.probabilities.len() != config.attributes.len() {
        return Err(Error::Marginals("marginals do not match the schema".into()));
    }
    let dists = marginals
        .probabilities
        .iter()
        .zip(&config.attributes)
        .map(|(p, a)| {
            WeightedIndex::new(p).map_err(|e| Error::Marginals(format!("attribute {:?}: {e}", a.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let personas = (0..n)
        .map(|id| Persona {
            id,
            categories: dists.iter().map(|d| d.sample(&mut rng)).collect(),
        })
        .collect();
    Ok(PersonaSet {
        personas,
        weights: vec![1.0; n],
    })
}

/// Every persona in the cross-product, weighted by the product of its
/// marginal probabilities. Zero-weight personas are kept.
pub fn enumerate_personas(config: &CountryConfig, marginals: &Marginals, cap: u128) -> Result<PersonaSet> {
    let size = config.persona_space_size();
    if size > cap {
        return Err(Error::PersonaSpaceTooLarge { size, cap });
    }
    let sizes: Vec<usize> = config.attributes.iter().map(|a| a.categories.len()).collect();
    let mut personas = Vec::with_capacity(size as usize);
    let mut weights = Vec::with_capacity(size as usize);
    let mut idx = vec![0usize; sizes.len()];
    for id in 0..size as usize {
        weights.push(
            idx.iter()
                .zip(&marginals.probabilities)
                .map(|(&g, p)| p[g])
                .product(),
        );
        personas.push(Persona {
            id,
            categories: idx.clone(),
        });
        // odometer increment, last attribute fastest
        for k in (0..sizes.len()).rev() {
            idx[k] += 1;
            if idx[k] < sizes[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Ok(PersonaSet { personas, weights })
}

/// Category frequencies of a persona set, weighted, per attribute.
pub fn empirical_marginals(config: &CountryConfig, set: &PersonaSet) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = config
        .attributes
        .iter()
        .map(|a| vec![0.0; a.categories.len()])
        .collect();
    let total: f64 = set.weights.iter().sum();
    for (p, &w) in set.personas.iter().zip(&set.weights) {
        for (k, &g) in p.categories.iter().enumerate() {
            out[k][g] += w / total;
        }
    }
    out
}

/// Groups persona indices by their category on attribute `k`.
pub fn personas_by_category(set: &PersonaSet, k: usize, n_categories: usize) -> Vec<Vec<usize>> {
    let mut cells = vec![Vec::new(); n_categories];
    for (i, p) in set.personas.iter().enumerate() {
        cells[p.categories[k]].push(i);
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn minimal() -> CountryConfig {
        CountryConfig::from_json(
            r#"{
            "country": "Testland", "language": "en", "year_of_election": "2024",
            "attributes": [
                {"name": "age", "scale": "ordinal", "categories": ["young", "30–39", "old"]},
                {"name": "gender", "scale": "nominal", "categories": ["male", "female"]}
            ],
            "parties": [
                {"name": "Left", "canonical_token_string": "left"},
                {"name": "Right", "canonical_token_string": "right"}
            ],
            "templates": [
                {"id": "t1", "text": "I am {age} and {gender} . In {year_of_election} I vote"},
                {"id": "t2", "text": "{gender} person , age {age} , votes"}
            ]
        }"#
            .as_bytes(),
        )
        .unwrap()
    }

    #[test]
    fn minimal_config_loads() {
        let c = minimal();
        assert_eq!(c.select_templates(None).unwrap().len(), 2);
        assert!(c.select_templates(Some(3)).is_err());
    }

    #[test]
    fn missing_placeholder_names_template_and_attribute() {
        let mut c = minimal();
        c.templates[1].text = "{gender} votes".into();
        let err = c.validate().unwrap_err();
        assert!(matches!(&err, Error::UnresolvedPlaceholder { template, placeholder }
            if template == "t2" && placeholder == "age"));
    }

    #[test]
    fn unknown_placeholder_and_empty_parties_rejected() {
        let mut c = minimal();
        c.templates[0].text.push_str(" {income}");
        assert!(c.validate().is_err());
        let mut c = minimal();
        c.parties.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn render_substitutes_categories() {
        let c = minimal();
        let p = Persona {
            id: 0,
            categories: vec![1, 0],
        };
        let a = render_prompt(&c, &p, &c.templates[0]).unwrap();
        let b = render_prompt(&c, &p, &c.templates[1]).unwrap();
        assert_eq!(a, "I am 30–39 and male . In 2024 I vote");
        assert_ne!(a, b);
        assert!(b.contains("30–39") && b.contains("male"));
    }

    #[test]
    fn degenerate_marginals_give_identical_personas() {
        let c = minimal();
        let m = Marginals::from_weights(&c, vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let set = sample_personas(&c, &m, 50, 1).unwrap();
        assert!(set.personas.iter().all(|p| p.categories == vec![1, 0]));
    }

    #[test]
    fn marginals_csv_round_trip_and_errors() {
        let c = minimal();
        let m = Marginals::from_weights(&c, vec![vec![1.0, 2.0, 1.0], vec![3.0, 1.0]]).unwrap();
        let back = Marginals::from_csv_reader(&c, m.to_csv(&c).as_bytes()).unwrap();
        for (x, y) in back.probabilities.iter().flatten().zip(m.probabilities.iter().flatten()) {
            assert!((x - y).abs() < 1e-15);
        }
        let unknown = "attribute,category,weight\nage,ancient,1\ngender,male,1\n";
        assert!(Marginals::from_csv_reader(&c, unknown.as_bytes()).is_err());
        let missing = "attribute,category,weight\nage,young,1\n";
        assert!(Marginals::from_csv_reader(&c, missing.as_bytes()).is_err());
    }

    #[test]
    fn enumeration_covers_cross_product() {
        let c = minimal();
        let m = Marginals::uniform(&c);
        let set = enumerate_personas(&c, &m, DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(set.len(), 6);
        let distinct: BTreeSet<&Vec<usize>> = set.personas.iter().map(|p| &p.categories).collect();
        assert_eq!(distinct.len(), 6);
        assert!((set.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(
            enumerate_personas(&c, &m, 5),
            Err(Error::PersonaSpaceTooLarge { size: 6, cap: 5 })
        ));
    }

    #[test]
    fn seeds_are_reproducible_and_distinct() {
        let c = minimal();
        let m = Marginals::uniform(&c);
        let a = sample_personas(&c, &m, 200, 7).unwrap();
        assert_eq!(a, sample_personas(&c, &m, 200, 7).unwrap());
        let b = sample_personas(&c, &m, 200, 8).unwrap();
        let d = sample_personas(&c, &m, 200, 9).unwrap();
        assert_ne!(a, b);
        assert_ne!(b, d);
        assert_ne!(a, d);
    }

    proptest! {
        #[test]
        fn rendering_keeps_every_category(age in 0usize..3, gender in 0usize..2, t in 0usize..2) {
            let c = minimal();
            let p = Persona { id: 0, categories: vec![age, gender] };
            let text = render_prompt(&c, &p, &c.templates[t]).unwrap();
            for (a, &g) in c.attributes.iter().zip(&p.categories) {
                prop_assert!(text.contains(&a.categories[g]));
            }
            let braces_left = text.contains('{') || text.contains('}');
            prop_assert!(!braces_left);
        }

        #[test]
        fn sampled_marginals_within_three_sigma(seed in any::<u64>(), w in 0.05f64..0.95) {
            let c = minimal();
            let m = Marginals::from_weights(&c, vec![vec![1.0, 1.0, 1.0], vec![w, 1.0 - w]]).unwrap();
            let n = 2000;
            let set = sample_personas(&c, &m, n, seed).unwrap();
            let emp = empirical_marginals(&c, &set);
            for (target, got) in m.probabilities.iter().flatten().zip(emp.iter().flatten()) {
                // 4.5σ keeps the false-failure rate negligible across proptest cases
                let bound = 4.5 * (target * (1.0 - target) / n as f64).sqrt();
                prop_assert!((target - got).abs() <= bound, "{target} vs {got}");
            }
        }
    }
}

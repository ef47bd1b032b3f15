//! Category-given-party distribution tables, survey ingestion and joint
//! (party, category) tables.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persona::CountryConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Latent,
    Prob,
    Survey,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Latent => "latent",
            Source::Prob => "prob",
            Source::Survey => "survey",
        }
    }
}

impl std::str::FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(Source::Latent),
            "prob" => Ok(Source::Prob),
            "survey" => Ok(Source::Survey),
            other => Err(Error::Distribution(format!("unknown source {other:?}"))),
        }
    }
}

/// Ψ for one attribute and source: a distribution over categories per party.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionTable {
    pub source: Source,
    pub attribute: String,
    pub categories: Vec<String>,
    /// Rows in party order; each sums to 1.
    pub rows: Vec<(String, Vec<f64>)>,
}

impl DistributionTable {
    pub fn row(&self, party: &str) -> Option<&[f64]> {
        self.rows.iter().find(|(p, _)| p == party).map(|(_, r)| r.as_slice())
    }

    /// Table from party-index rows as produced by the estimators.
    pub fn from_indexed(
        source: Source,
        config: &CountryConfig,
        k: usize,
        rows: &BTreeMap<usize, Vec<f64>>,
    ) -> Self {
        Self {
            source,
            attribute: config.attributes[k].name.clone(),
            categories: config.attributes[k].categories.clone(),
            rows: rows
                .iter()
                .map(|(&o, r)| (config.parties[o].name.clone(), r.clone()))
                .collect(),
        }
    }

    fn check(&self) -> Result<()> {
        for (party, row) in &self.rows {
            if row.len() != self.categories.len() {
                return Err(Error::Distribution(format!(
                    "{} row of {:?} for {:?} has {} values for {} categories",
                    self.source.as_str(),
                    party,
                    self.attribute,
                    row.len(),
                    self.categories.len()
                )));
            }
            let total: f64 = row.iter().sum();
            if row.iter().any(|&v| !v.is_finite() || v < 0.0) || (total - 1.0).abs() > 1e-6 {
                return Err(Error::Distribution(format!(
                    "{} row of {:?} for {:?} is not a probability vector (sum {total})",
                    self.source.as_str(),
                    party,
                    self.attribute
                )));
            }
        }
        Ok(())
    }
}

/// A collection of tables, serialized as `source,attribute,party,category,value`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistributionSet {
    pub tables: Vec<DistributionTable>,
}

impl DistributionSet {
    pub fn get(&self, source: Source, attribute: &str) -> Option<&DistributionTable> {
        self.tables
            .iter()
            .find(|t| t.source == source && t.attribute == attribute)
    }

    pub fn of_source(&self, source: Source) -> impl Iterator<Item = &DistributionTable> {
        self.tables.iter().filter(move |t| t.source == source)
    }

    pub fn merge(&mut self, other: DistributionSet) {
        self.tables.extend(other.tables);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["source", "attribute", "party", "category", "value"])
            .expect("in-memory csv write");
        for t in &self.tables {
            for (party, row) in &t.rows {
                for (cat, v) in t.categories.iter().zip(row) {
                    w.write_record([t.source.as_str(), &t.attribute, party, cat, &v.to_string()])
                        .expect("in-memory csv write");
                }
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Parses the CSV form. Category and party order follow first appearance.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            source: String,
            attribute: String,
            party: String,
            category: String,
            value: f64,
        }
        // (source, attribute) -> (categories, parties, cell values)
        type Cells = (Vec<String>, Vec<String>, BTreeMap<(usize, usize), f64>);
        let mut order: Vec<(Source, String)> = Vec::new();
        let mut cells: BTreeMap<(Source, String), Cells> = BTreeMap::new();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::Fields).from_reader(reader);
        for row in rdr.deserialize::<Row>() {
            let row = row.map_err(|e| Error::csv("distribution table", e))?;
            let key = (row.source.parse::<Source>()?, row.attribute.clone());
            let (cats, parties, values) = cells.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                Default::default()
            });
            let g = position_or_push(cats, &row.category);
            let o = position_or_push(parties, &row.party);
            if values.insert((o, g), row.value).is_some() {
                return Err(Error::Distribution(format!(
                    "{:?}/{:?}/{:?} listed twice",
                    row.attribute, row.party, row.category
                )));
            }
        }
        let mut set = DistributionSet::default();
        for key in order {
            let (categories, parties, values) = cells.remove(&key).expect("key recorded");
            let mut rows = Vec::with_capacity(parties.len());
            for (o, party) in parties.into_iter().enumerate() {
                let row = (0..categories.len())
                    .map(|g| {
                        values.get(&(o, g)).copied().ok_or_else(|| {
                            Error::Distribution(format!(
                                "{:?} row of {party:?} lacks category {:?}",
                                key.1, categories[g]
                            ))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                rows.push((party, row));
            }
            set.tables.push(DistributionTable {
                source: key.0,
                attribute: key.1,
                categories,
                rows,
            });
        }
        for t in &set.tables {
            t.check()?;
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file)
    }
}

fn position_or_push(list: &mut Vec<String>, item: &str) -> usize {
    match list.iter().position(|x| x == item) {
        Some(i) => i,
        None => {
            list.push(item.to_string());
            list.len() - 1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurveyRow {
    pub categories: Vec<usize>,
    pub party: usize,
    pub weight: f64,
}

/// Weighted survey responses mapped onto a country schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Survey {
    pub parties: Vec<String>,
    pub rows: Vec<SurveyRow>,
    /// Rows dropped because their party is not in the config.
    pub skipped_unknown_party: usize,
}

impl Survey {
    /// Parses a CSV whose header names every schema attribute plus `party`
    /// and `weight`. Other columns are ignored.
    pub fn from_csv_reader<R: std::io::Read>(config: &CountryConfig, reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::Fields).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::csv("survey", e))?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Survey(format!("header has no {name:?} column")))
        };
        let attr_cols = config
            .attributes
            .iter()
            .map(|a| col(&a.name))
            .collect::<Result<Vec<_>>>()?;
        let party_col = col("party")?;
        let weight_col = col("weight")?;
        let parties: Vec<String> = config.parties.iter().map(|p| p.name.clone()).collect();
        let mut rows = Vec::new();
        let mut skipped = 0;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv("survey", e))?;
            let field = |c: usize| rec.get(c).unwrap_or("");
            let Some(party) = parties.iter().position(|p| p == field(party_col)) else {
                skipped += 1;
                continue;
            };
            let weight: f64 = field(weight_col).parse().map_err(|_| {
                Error::Survey(format!("row {}: weight {:?} is not a number", line + 1, field(weight_col)))
            })?;
            if !weight.is_finite() || weight <= 0.0 {
                return Err(Error::Survey(format!("row {}: weight must be positive", line + 1)));
            }
            let categories = config
                .attributes
                .iter()
                .zip(&attr_cols)
                .map(|(a, &c)| {
                    a.category_index(field(c)).ok_or_else(|| {
                        Error::Survey(format!(
                            "row {}: unknown {} category {:?}",
                            line + 1,
                            a.name,
                            field(c)
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(SurveyRow {
                categories,
                party,
                weight,
            });
        }
        if skipped > 0 {
            log::warn!("skipped {skipped} survey rows naming parties outside the config");
        }
        if rows.is_empty() {
            return Err(Error::Survey("no usable rows".into()));
        }
        Ok(Self {
            parties,
            rows,
            skipped_unknown_party: skipped,
        })
    }

    pub fn load(config: &CountryConfig, path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(config, file)
    }

    pub fn to_csv(&self, config: &CountryConfig) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<&str> = config.attributes.iter().map(|a| a.name.as_str()).collect();
        header.extend(["party", "weight"]);
        w.write_record(&header).expect("in-memory csv write");
        for r in &self.rows {
            let mut rec: Vec<String> = config
                .attributes
                .iter()
                .zip(&r.categories)
                .map(|(a, &g)| a.categories[g].clone())
                .collect();
            rec.push(self.parties[r.party].clone());
            rec.push(r.weight.to_string());
            w.write_record(&rec).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Weighted party shares.
    pub fn party_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.parties.len()];
        for r in &self.rows {
            m[r.party] += r.weight;
        }
        let total: f64 = m.iter().sum();
        m.iter_mut().for_each(|v| *v /= total);
        m
    }

    /// Weighted (party, category) mass for attribute `k`, unnormalized.
    pub fn joint_mass(&self, k: usize, n_categories: usize) -> Vec<Vec<f64>> {
        let mut mass = vec![vec![0.0; n_categories]; self.parties.len()];
        for r in &self.rows {
            mass[r.party][r.categories[k]] += r.weight;
        }
        mass
    }
}

/// Ψ from the survey: `P(category | party)` from weighted responses.
pub fn survey_distribution(survey: &Survey, k: usize, n_categories: usize) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mass = survey.joint_mass(k, n_categories);
    let mut out = BTreeMap::new();
    for (o, row) in mass.into_iter().enumerate() {
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            return Err(Error::Survey(format!(
                "party {:?} has zero total weight",
                survey.parties[o]
            )));
        }
        out.insert(o, row.into_iter().map(|v| v / total).collect());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditional {
    PartyGivenCategory,
    CategoryGivenParty,
}

/// Joint mass over (party, category) for one attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    pub attribute: String,
    pub parties: Vec<String>,
    pub categories: Vec<String>,
    /// parties × categories
    pub mass: Vec<Vec<f64>>,
}

impl JointTable {
    /// Joint from category-given-party rows and a party marginal. Parties
    /// missing from `table` are dropped.
    pub fn from_conditional(table: &DistributionTable, party_marginal: &[(String, f64)]) -> Self {
        let mut parties = Vec::new();
        let mut mass = Vec::new();
        for (party, share) in party_marginal {
            if let Some(row) = table.row(party) {
                parties.push(party.clone());
                mass.push(row.iter().map(|v| v * share).collect());
            }
        }
        Self {
            attribute: table.attribute.clone(),
            parties,
            categories: table.categories.clone(),
            mass,
        }
    }

    /// Row- or column-normalized conditional, indexed `[party][category]`.
    pub fn conditional(&self, which: Conditional) -> Result<Vec<Vec<f64>>> {
        let mut out = self.mass.clone();
        match which {
            Conditional::CategoryGivenParty => {
                for (party, row) in self.parties.iter().zip(out.iter_mut()) {
                    let total: f64 = row.iter().sum();
                    if total <= 0.0 {
                        return Err(Error::Distribution(format!("party {party:?} has zero mass")));
                    }
                    row.iter_mut().for_each(|v| *v /= total);
                }
            }
            Conditional::PartyGivenCategory => {
                for (g, cat) in self.categories.iter().enumerate() {
                    let total: f64 = out.iter().map(|r| r[g]).sum();
                    if total <= 0.0 {
                        return Err(Error::Distribution(format!(
                            "category {cat:?} of {:?} has zero mass",
                            self.attribute
                        )));
                    }
                    out.iter_mut().for_each(|r| r[g] /= total);
                }
            }
        }
        Ok(out)
    }
}

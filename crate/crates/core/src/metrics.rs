//! Distances between category distributions and the evaluation built on them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::distribution::{Conditional, DistributionSet, JointTable, Source};
use crate::error::{Error, Result};
use crate::persona::{CountryConfig, Scale};
use crate::stats;

pub const DEFAULT_ENTROPY_THRESHOLD: f64 = 0.85;

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Distribution(format!(
            "supports differ: {} vs {} categories",
            p.len(),
            q.len()
        )));
    }
    for d in [p, q] {
        let total: f64 = d.iter().sum();
        if d.iter().any(|&v| !v.is_finite() || v < 0.0) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Distribution(format!("not a distribution (sum {total})")));
        }
    }
    Ok(())
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &mi)| pi * (pi / mi).log2())
        .sum()
}

/// Square root of the base-2 Jensen–Shannon divergence, in `[0, 1]`.
pub fn js_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_to_mixture(p, &m) + 0.5 * kl_to_mixture(q, &m);
    Ok(js.clamp(0.0, 1.0).sqrt())
}

/// First Wasserstein distance on unit-spaced ranks: the L1 distance
/// between the two CDFs over the first `n − 1` ranks.
pub fn wasserstein_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let mut cp = 0.0;
    let mut cq = 0.0;
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q).take(p.len() - 1) {
        cp += a;
        cq += b;
        total += (cp - cq).abs();
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Js,
    Wasserstein,
}

impl Metric {
    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Nominal => Metric::Js,
            Scale::Ordinal => Metric::Wasserstein,
        }
    }

    pub fn distance(self, p: &[f64], q: &[f64]) -> Result<f64> {
        match self {
            Metric::Js => js_distance(p, q),
            Metric::Wasserstein => wasserstein_distance(p, q),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Js => "js",
            Metric::Wasserstein => "wasserstein",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRecord {
    pub country: String,
    pub model: String,
    pub attribute: String,
    pub party: String,
    pub metric: Metric,
    pub d_latent: f64,
    pub d_prob: f64,
    /// `d_prob − d_latent`; positive means the latent estimate is closer.
    pub delta: f64,
}

impl DistanceRecord {
    pub fn is_win(&self) -> bool {
        self.delta > 0.0
    }
}

/// Rows of the three sources for one (attribute, party) cell.
pub struct AlignedCell<'a> {
    pub attribute: usize,
    pub party: &'a str,
    pub latent: &'a [f64],
    pub prob: &'a [f64],
    pub survey: &'a [f64],
}

/// Cells for every party that has a latent estimate. Parties without one
/// are excluded; a latent row without a matching prob or survey row is an
/// error.
pub fn aligned_cells<'a>(tables: &'a DistributionSet, config: &CountryConfig) -> Result<Vec<AlignedCell<'a>>> {
    let mut out = Vec::new();
    for (k, attr) in config.attributes.iter().enumerate() {
        let get = |s: Source| {
            tables
                .get(s, &attr.name)
                .ok_or_else(|| Error::MissingCell(format!("no {} table for {:?}", s.as_str(), attr.name)))
        };
        let (latent, prob, survey) = (get(Source::Latent)?, get(Source::Prob)?, get(Source::Survey)?);
        for t in [latent, prob, survey] {
            if t.categories != attr.categories {
                return Err(Error::MissingCell(format!(
                    "{} table for {:?} has categories {:?}, schema has {:?}",
                    t.source.as_str(),
                    attr.name,
                    t.categories,
                    attr.categories
                )));
            }
        }
        for (party, lrow) in &latent.rows {
            let find = |t: &'a crate::distribution::DistributionTable| {
                t.row(party).ok_or_else(|| {
                    Error::MissingCell(format!(
                        "{} table for {:?} has no row for party {party:?}",
                        t.source.as_str(),
                        attr.name
                    ))
                })
            };
            out.push(AlignedCell {
                attribute: k,
                party,
                latent: lrow,
                prob: find(prob)?,
                survey: find(survey)?,
            });
        }
    }
    Ok(out)
}

/// One distance record per (attribute, party): JS for nominal attributes,
/// W1 for ordinal ones.
pub fn distance_delta(
    tables: &DistributionSet,
    config: &CountryConfig,
    model_tag: &str,
) -> Result<Vec<DistanceRecord>> {
    aligned_cells(tables, config)?
        .into_iter()
        .map(|c| {
            let attr = &config.attributes[c.attribute];
            let metric = Metric::for_scale(attr.scale);
            let d_latent = metric.distance(c.latent, c.survey)?;
            let d_prob = metric.distance(c.prob, c.survey)?;
            Ok(DistanceRecord {
                country: config.country.clone(),
                model: model_tag.to_string(),
                attribute: attr.name.clone(),
                party: c.party.to_string(),
                metric,
                d_latent,
                d_prob,
                delta: d_prob - d_latent,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    All,
    Attribute,
    Party,
    Model,
    Country,
}

impl GroupBy {
    pub fn key(self, r: &DistanceRecord) -> String {
        match self {
            GroupBy::All => "all".into(),
            GroupBy::Attribute => r.attribute.clone(),
            GroupBy::Party => r.party.clone(),
            GroupBy::Model => r.model.clone(),
            GroupBy::Country => r.country.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRate {
    pub group: Vec<String>,
    pub wins: usize,
    pub total: usize,
    pub rate: f64,
}

/// Fraction of records with `delta > 0` per group of the given keys.
pub fn win_rates(records: &[DistanceRecord], keys: &[GroupBy]) -> Result<Vec<WinRate>> {
    if records.is_empty() {
        return Err(Error::Distribution("no distance records to summarize".into()));
    }
    let mut groups: BTreeMap<Vec<String>, (usize, usize)> = BTreeMap::new();
    for r in records {
        let key = keys.iter().map(|k| k.key(r)).collect();
        let e = groups.entry(key).or_default();
        e.1 += 1;
        if r.is_win() {
            e.0 += 1;
        }
    }
    Ok(groups
        .into_iter()
        .map(|(group, (wins, total))| WinRate {
            group,
            wins,
            total,
            rate: wins as f64 / total as f64,
        })
        .collect())
}

/// Shannon entropy divided by `ln |support|`, computed as
/// `1 − KL(P ‖ uniform) / ln n` so the uniform and one-hot cases are exact.
pub fn normalized_entropy(p: &[f64]) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::Distribution("entropy needs at least 2 categories".into()));
    }
    let total: f64 = p.iter().sum();
    if p.iter().any(|&v| !v.is_finite() || v < 0.0) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::Distribution(format!("not a distribution (sum {total})")));
    }
    let n = p.len() as f64;
    let kl: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| v * (v * n).ln()).sum();
    Ok((1.0 - kl / n.ln()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateCell {
    pub attribute: String,
    pub party: String,
    pub entropy: f64,
    pub gated: bool,
    /// Row used after gating: latent where gated, prob elsewhere.
    pub estimate: Vec<f64>,
    /// Per-category `|estimate − survey| − |prob − survey|`.
    pub error_change: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub attribute: String,
    pub model: String,
    pub gated_rows: usize,
    /// Median over gated cells of the error change; negative is better.
    pub median_error_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub threshold: f64,
    pub cells: Vec<GateCell>,
    /// Only attributes with at least one gated row.
    pub summaries: Vec<GateSummary>,
}

impl GateReport {
    pub fn substitutions(&self) -> usize {
        self.cells.iter().filter(|c| c.gated).count()
    }
}

/// Substitutes the latent row wherever the probability row's normalized
/// entropy is strictly above `threshold`.
pub fn entropy_gate(
    tables: &DistributionSet,
    config: &CountryConfig,
    model_tag: &str,
    threshold: f64,
) -> Result<GateReport> {
    let mut cells = Vec::new();
    for c in aligned_cells(tables, config)? {
        let entropy = normalized_entropy(c.prob)?;
        let gated = entropy > threshold;
        let estimate = if gated { c.latent } else { c.prob }.to_vec();
        let error_change = estimate
            .iter()
            .zip(c.prob)
            .zip(c.survey)
            .map(|((e, p), s)| (e - s).abs() - (p - s).abs())
            .collect();
        cells.push(GateCell {
            attribute: config.attributes[c.attribute].name.clone(),
            party: c.party.to_string(),
            entropy,
            gated,
            estimate,
            error_change,
        });
    }
    let mut summaries = Vec::new();
    for attr in &config.attributes {
        let gated: Vec<&GateCell> = cells.iter().filter(|c| c.gated && c.attribute == attr.name).collect();
        if gated.is_empty() {
            continue;
        }
        let changes: Vec<f64> = gated.iter().flat_map(|c| c.error_change.iter().copied()).collect();
        summaries.push(GateSummary {
            attribute: attr.name.clone(),
            model: model_tag.to_string(),
            gated_rows: gated.len(),
            median_error_change: stats::median(&changes).expect("gated cells are nonempty"),
        });
    }
    Ok(GateReport {
        threshold,
        cells,
        summaries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareError {
    pub party: String,
    pub category: String,
    pub estimate: f64,
    pub survey: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareErrors {
    pub attribute: String,
    pub direction: Conditional,
    pub cells: Vec<ShareError>,
    /// Median absolute error per party, in party order.
    pub party_medians: Vec<(String, f64)>,
}

/// Absolute error of a conditional derived from `estimate` against the
/// same conditional of `survey`, on the parties both tables share.
pub fn conditional_share_error(estimate: &JointTable, survey: &JointTable, direction: Conditional) -> Result<ShareErrors> {
    if estimate.categories != survey.categories {
        return Err(Error::MissingCell(format!(
            "category sets differ for {:?}",
            estimate.attribute
        )));
    }
    let parties: Vec<&String> = estimate.parties.iter().filter(|p| survey.parties.contains(p)).collect();
    let restrict = |t: &JointTable| JointTable {
        attribute: t.attribute.clone(),
        categories: t.categories.clone(),
        parties: parties.iter().map(|p| (*p).clone()).collect(),
        mass: parties
            .iter()
            .map(|p| t.mass[t.parties.iter().position(|q| q == *p).expect("shared party")].clone())
            .collect(),
    };
    let est = restrict(estimate).conditional(direction)?;
    let sur = restrict(survey).conditional(direction)?;
    let mut cells = Vec::new();
    let mut party_medians = Vec::new();
    for (o, party) in parties.iter().enumerate() {
        let mut errs = Vec::new();
        for (g, cat) in estimate.categories.iter().enumerate() {
            let error = (est[o][g] - sur[o][g]).abs();
            errs.push(error);
            cells.push(ShareError {
                party: (*party).clone(),
                category: cat.clone(),
                estimate: est[o][g],
                survey: sur[o][g],
                error,
            });
        }
        party_medians.push(((*party).clone(), stats::median(&errs).unwrap_or(0.0)));
    }
    Ok(ShareErrors {
        attribute: estimate.attribute.clone(),
        direction,
        cells,
        party_medians,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Pearson correlation; `None` when the outcome has no variance.
    pub r: Option<f64>,
    pub n: usize,
}

/// Least squares of `delta` on `entropy` over points with `delta > 0`.
pub fn fit_delta_entropy(points: &[(f64, f64)]) -> Result<LinearFit> {
    let kept: Vec<(f64, f64)> = points.iter().copied().filter(|(d, _)| *d > 0.0).collect();
    if kept.len() < 3 {
        return Err(Error::TooFewPoints(kept.len()));
    }
    let n = kept.len() as f64;
    let my = kept.iter().map(|p| p.0).sum::<f64>() / n;
    let mx = kept.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = kept.iter().map(|p| (p.1 - mx).powi(2)).sum();
    let syy: f64 = kept.iter().map(|p| (p.0 - my).powi(2)).sum();
    let sxy: f64 = kept.iter().map(|p| (p.1 - mx) * (p.0 - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let slope = sxy / sxx;
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
        r: (syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)),
        n: kept.len(),
    })
}

//! Evaluation report: distances, win rates, entropy gating, share errors
//! and a win-rate chart, each rendered to its own file.

use std::fmt::Write as _;

use serde::Serialize;

use crate::distribution::{Conditional, DistributionSet, DistributionTable, JointTable, Source};
use crate::error::{Error, Result};
use crate::metrics::{
    conditional_share_error, distance_delta, entropy_gate, fit_delta_entropy, win_rates, DistanceRecord,
    GateReport, GroupBy, LinearFit, ShareErrors, WinRate,
};
use crate::persona::CountryConfig;
use crate::stats;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model_tag: String,
    pub records: Vec<DistanceRecord>,
    pub overall: WinRate,
    pub by_attribute: Vec<WinRate>,
    pub by_party: Vec<WinRate>,
    pub gate: GateReport,
    /// `None` when fewer than three records have `Δ > 0` or entropy is constant.
    pub fit: Option<LinearFit>,
    /// (estimator, errors) for latent, prob and gated estimates in both
    /// conditioning directions.
    pub share_errors: Vec<(String, ShareErrors)>,
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv write");
    for r in rows {
        w.write_record(&r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Tables holding the gated estimate: latent rows where the gate fired,
/// prob rows elsewhere.
fn gated_tables(gate: &GateReport, config: &CountryConfig) -> DistributionSet {
    let mut out = DistributionSet::default();
    for attr in &config.attributes {
        let rows: Vec<(String, Vec<f64>)> = gate
            .cells
            .iter()
            .filter(|c| c.attribute == attr.name)
            .map(|c| (c.party.clone(), c.estimate.clone()))
            .collect();
        out.tables.push(DistributionTable {
            source: Source::Prob,
            attribute: attr.name.clone(),
            categories: attr.categories.clone(),
            rows,
        });
    }
    out
}

impl EvalReport {
    /// Builds the report from latent, prob and survey tables. Joint tables
    /// for share errors use `party_marginal` as `P(party)`.
    pub fn build(
        tables: &DistributionSet,
        config: &CountryConfig,
        party_marginal: &[(String, f64)],
        model_tag: &str,
        threshold: f64,
    ) -> Result<Self> {
        let records = distance_delta(tables, config, model_tag)?;
        let overall = win_rates(&records, &[GroupBy::All])?.remove(0);
        let by_attribute = win_rates(&records, &[GroupBy::Attribute])?;
        let by_party = win_rates(&records, &[GroupBy::Party])?;
        let gate = entropy_gate(tables, config, model_tag, threshold)?;
        let points: Vec<(f64, f64)> = records
            .iter()
            .zip(&gate.cells)
            .map(|(r, c)| (r.delta, c.entropy))
            .collect();
        let fit = match fit_delta_entropy(&points) {
            Ok(f) => Some(f),
            Err(e @ (Error::TooFewPoints(_) | Error::ZeroVariance)) => {
                log::warn!("no delta-entropy regression: {e}");
                None
            }
            Err(e) => return Err(e),
        };
        let gated = gated_tables(&gate, config);
        let mut share_errors = Vec::new();
        for attr in &config.attributes {
            let survey = tables
                .get(Source::Survey, &attr.name)
                .ok_or_else(|| Error::MissingCell(format!("no survey table for {:?}", attr.name)))?;
            let survey_joint = JointTable::from_conditional(survey, party_marginal);
            let estimates = [
                ("latent", tables.get(Source::Latent, &attr.name)),
                ("prob", tables.get(Source::Prob, &attr.name)),
                ("gated", gated.get(Source::Prob, &attr.name)),
            ];
            for (name, table) in estimates {
                let Some(table) = table else { continue };
                let joint = JointTable::from_conditional(table, party_marginal);
                for dir in [Conditional::CategoryGivenParty, Conditional::PartyGivenCategory] {
                    share_errors.push((name.to_string(), conditional_share_error(&joint, &survey_joint, dir)?));
                }
            }
        }
        Ok(Self {
            model_tag: model_tag.to_string(),
            records,
            overall,
            by_attribute,
            by_party,
            gate,
            fit,
            share_errors,
        })
    }

    pub fn win_rate_csv(&self) -> String {
        let row = |by: &str, w: &WinRate| {
            vec![
                by.to_string(),
                w.group.join("/"),
                w.wins.to_string(),
                w.total.to_string(),
                w.rate.to_string(),
            ]
        };
        let rows = std::iter::once(row("all", &self.overall))
            .chain(self.by_attribute.iter().map(|w| row("attribute", w)))
            .chain(self.by_party.iter().map(|w| row("party", w)));
        csv_string(&["group_by", "group", "wins", "total", "rate"], rows)
    }

    pub fn delta_csv(&self) -> String {
        csv_string(
            &["country", "model", "attribute", "party", "metric", "d_latent", "d_prob", "delta"],
            self.records.iter().map(|r| {
                vec![
                    r.country.clone(),
                    r.model.clone(),
                    r.attribute.clone(),
                    r.party.clone(),
                    r.metric.as_str().to_string(),
                    r.d_latent.to_string(),
                    r.d_prob.to_string(),
                    r.delta.to_string(),
                ]
            }),
        )
    }

    /// Per-attribute spread of `Δ` across parties.
    pub fn delta_summary_csv(&self) -> String {
        let mut attrs: Vec<&str> = Vec::new();
        for r in &self.records {
            if !attrs.contains(&r.attribute.as_str()) {
                attrs.push(&r.attribute);
            }
        }
        csv_string(
            &["attribute", "n", "min", "q1", "median", "q3", "max"],
            attrs.into_iter().map(|a| {
                let d: Vec<f64> = self.records.iter().filter(|r| r.attribute == a).map(|r| r.delta).collect();
                let s = stats::sorted(&d);
                let q = |p| stats::quantile_sorted(&s, p).to_string();
                vec![a.to_string(), s.len().to_string(), q(0.0), q(0.25), q(0.5), q(0.75), q(1.0)]
            }),
        )
    }

    pub fn entropy_csv(&self) -> String {
        csv_string(
            &["attribute", "party", "entropy", "gated"],
            self.gate.cells.iter().map(|c| {
                vec![
                    c.attribute.clone(),
                    c.party.clone(),
                    c.entropy.to_string(),
                    c.gated.to_string(),
                ]
            }),
        )
    }

    pub fn gated_csv(&self) -> String {
        csv_string(
            &["attribute", "model", "threshold", "gated_rows", "median_error_change"],
            self.gate.summaries.iter().map(|s| {
                vec![
                    s.attribute.clone(),
                    s.model.clone(),
                    self.gate.threshold.to_string(),
                    s.gated_rows.to_string(),
                    s.median_error_change.to_string(),
                ]
            }),
        )
    }

    pub fn share_error_csv(&self) -> String {
        let dir = |d: Conditional| match d {
            Conditional::CategoryGivenParty => "category_given_party",
            Conditional::PartyGivenCategory => "party_given_category",
        };
        csv_string(
            &["estimator", "attribute", "direction", "party", "category", "estimate", "survey", "error"],
            self.share_errors.iter().flat_map(|(name, se)| {
                se.cells.iter().map(move |c| {
                    vec![
                        name.clone(),
                        se.attribute.clone(),
                        dir(se.direction).to_string(),
                        c.party.clone(),
                        c.category.clone(),
                        c.estimate.to_string(),
                        c.survey.to_string(),
                        c.error.to_string(),
                    ]
                })
            }),
        )
    }

    pub fn fit_json(&self) -> String {
        #[derive(Serialize)]
        struct FitFile<'a> {
            model: &'a str,
            fit: Option<&'a LinearFit>,
        }
        serde_json::to_string_pretty(&FitFile {
            model: &self.model_tag,
            fit: self.fit.as_ref(),
        })
        .expect("fit serializes")
    }

    /// Horizontal bar chart of the latent win rate per attribute.
    pub fn win_rate_svg(&self) -> String {
        let bar_h = 24.0;
        let label_w = 180.0;
        let plot_w = 400.0;
        let top = 40.0;
        let height = top + bar_h * self.by_attribute.len() as f64 + 50.0;
        let width = label_w + plot_w + 80.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" font-size="14" text-anchor="middle">Latent win rate by attribute ({})</text>"#,
            width / 2.0,
            xml_escape(&self.model_tag)
        );
        for (i, w) in self.by_attribute.iter().enumerate() {
            let y = top + bar_h * i as f64;
            let len = plot_w * w.rate;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                label_w - 8.0,
                y + bar_h * 0.65,
                xml_escape(&w.group.join("/"))
            );
            let _ = writeln!(
                s,
                r##"<rect x="{label_w}" y="{}" width="{len:.2}" height="{}" fill="#4c72b0"/>"##,
                y + 3.0,
                bar_h - 6.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}">{:.2} ({}/{})</text>"#,
                label_w + len + 6.0,
                y + bar_h * 0.65,
                w.rate,
                w.wins,
                w.total
            );
        }
        let axis_y = top + bar_h * self.by_attribute.len() as f64 + 4.0;
        let half = label_w + plot_w * 0.5;
        let _ = writeln!(
            s,
            r##"<line x1="{half}" y1="{}" x2="{half}" y2="{axis_y}" stroke="#888" stroke-dasharray="4 3"/>"##,
            top
        );
        for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let x = label_w + plot_w * tick;
            let _ = writeln!(
                s,
                r#"<text x="{x}" y="{}" text-anchor="middle">{tick}</text>"#,
                axis_y + 16.0
            );
        }
        s.push_str("</svg>\n");
        s
    }

    /// File name and contents of every report file.
    pub fn files(&self) -> Vec<(&'static str, String)> {
        vec![
            ("win_rates.csv", self.win_rate_csv()),
            ("delta.csv", self.delta_csv()),
            ("delta_summary.csv", self.delta_summary_csv()),
            ("entropy.csv", self.entropy_csv()),
            ("gated.csv", self.gated_csv()),
            ("share_errors.csv", self.share_error_csv()),
            ("fit.json", self.fit_json()),
            ("win_rates.svg", self.win_rate_svg()),
        ]
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

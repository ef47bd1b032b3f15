//! Stage runner shared by the `mf` binary and the test suites.
//!
//! Every stage reads its inputs from the run config or from the artifacts
//! of the previous stage under the output directory, and writes its own
//! artifacts plus a `meta.json` sidecar into `<out>/<stage>/`. Nothing
//! written depends on wall-clock time or thread scheduling, so identical
//! configs produce identical trees.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::{
    check_party_tokens, latent_distribution, normalize_and_weight, party_scores, probability_distribution,
    record_activations, ActivationStore, LatentNorm, Readoff,
};
use crate::distribution::{survey_distribution, DistributionSet, DistributionTable, Source, Survey};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_ENTROPY_THRESHOLD;
use crate::model::InstrumentedModel;
use crate::persona::{sample_personas, CountryConfig, Marginals, PersonaSet};
use crate::probe::{
    embed_corpus_layers, evaluate_probe, probing_layer_band, train_probe, Probe, ProbeArtifact, ProbeCorpus,
    ProbeHyperparams, ProbeMetrics,
};
use crate::report::EvalReport;
use crate::select::{
    cosine_profile, iqr_select, validate_by_sign_inversion, vocab_projection_csv, Candidates, DiametricRule,
    ValueVectorSelection, DEFAULT_FENCE,
};
use crate::synth::{build_world, generate_synthetic_survey, ground_truth, persona_conditionals_csv, PlantSpec, SyntheticWorld};
use crate::tokenizer::Tokenizer;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Top tokens listed per retained vector in the vocabulary projection.
const PROJECTION_TOP_K: usize = 10;

fn default_personas() -> usize {
    10_000
}
fn default_threshold() -> f64 {
    DEFAULT_ENTROPY_THRESHOLD
}
fn default_fence() -> f64 {
    DEFAULT_FENCE
}
fn default_tag() -> String {
    "model".into()
}
fn default_lr() -> f64 {
    ProbeHyperparams::default().learning_rate
}
fn default_epochs() -> usize {
    ProbeHyperparams::default().epochs
}

/// Run configuration. Relative paths resolve against the directory of the
/// config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: PathBuf,
    pub tokenizer: PathBuf,
    pub country: PathBuf,
    pub corpus: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survey: Option<PathBuf>,
    /// Persona marginals CSV; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marginals: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_personas")]
    pub personas: usize,
    /// Number of templates J; all templates up to 10 when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<usize>,
    #[serde(default = "default_threshold")]
    pub entropy_threshold: f64,
    #[serde(default = "default_fence")]
    pub fence: f64,
    #[serde(default)]
    pub latent_norm: LatentNorm,
    #[serde(default)]
    pub diametric_rule: DiametricRule,
    #[serde(default)]
    pub readoff: Readoff,
    #[serde(default = "default_tag")]
    pub model_tag: String,
    #[serde(default = "default_lr")]
    pub probe_learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub probe_epochs: usize,
    /// Directory of selection artifacts to forecast with instead of this
    /// run's own `select` output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_from: Option<PathBuf>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl RunConfig {
    /// Config with defaults for everything but the four required inputs.
    pub fn new(model: PathBuf, tokenizer: PathBuf, country: PathBuf, corpus: PathBuf) -> Self {
        Self {
            model,
            tokenizer,
            country,
            corpus,
            survey: None,
            marginals: None,
            out: None,
            seed: 0,
            personas: default_personas(),
            templates: None,
            entropy_threshold: default_threshold(),
            fence: default_fence(),
            latent_norm: LatentNorm::default(),
            diametric_rule: DiametricRule::default(),
            readoff: Readoff::default(),
            model_tag: default_tag(),
            probe_learning_rate: default_lr(),
            probe_epochs: default_epochs(),
            selection_from: None,
            base_dir: PathBuf::new(),
        }
    }

    pub fn from_json(bytes: &[u8], base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_slice(bytes).map_err(|e| Error::json("run config", e))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes, path.parent().unwrap_or(Path::new("")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn with_base_dir(mut self, dir: &Path) -> Self {
        self.base_dir = dir.to_path_buf();
        self
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::RunConfig(m.to_string()));
        if self.personas == 0 {
            return bad("personas must be at least 1");
        }
        if self.templates == Some(0) {
            return bad("templates must be at least 1");
        }
        if !(self.fence.is_finite() && self.fence >= 0.0) {
            return bad("fence must be a finite value >= 0");
        }
        if !self.entropy_threshold.is_finite() {
            return bad("entropy_threshold must be finite");
        }
        if !(self.probe_learning_rate.is_finite() && self.probe_learning_rate > 0.0) || self.probe_epochs == 0 {
            return bad("probe learning rate must be positive and epochs at least 1");
        }
        Ok(())
    }

    /// SHA-256 over the config as written, excluding the output directory.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        hex(&Sha256::digest(serde_json::to_vec(&c).expect("run config serializes")))
    }

    fn probe_hyperparams(&self) -> ProbeHyperparams {
        ProbeHyperparams {
            learning_rate: self.probe_learning_rate,
            epochs: self.probe_epochs,
            seed: self.seed,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct StageMeta<'a> {
    stage: &'a str,
    version: &'a str,
    config_hash: &'a str,
    seed: u64,
    /// SHA-256 of every other file the stage wrote.
    files: BTreeMap<String, String>,
}

/// Collects a stage's files and writes them together with the sidecar.
struct StageWriter {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl StageWriter {
    fn new(out: &Path, stage: &str) -> Result<Self> {
        let dir = out.join(stage);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            files: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.insert(name.to_string(), hex(&Sha256::digest(bytes)));
        Ok(())
    }

    fn finish(self, stage: &str, config_hash: &str, seed: u64) -> Result<()> {
        let meta = StageMeta {
            stage,
            version: VERSION,
            config_hash,
            seed,
            files: self.files,
        };
        let path = self.dir.join("meta.json");
        let json = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Model, tokenizer, country config and probe corpus of a run.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub model: InstrumentedModel,
    pub tokenizer: Tokenizer,
    pub country: CountryConfig,
    pub corpus: ProbeCorpus,
    /// Canonical token of each config party, in config order.
    pub party_tokens: Vec<u32>,
}

impl Inputs {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let model = InstrumentedModel::load(&cfg.resolve(&cfg.model))?;
        let tokenizer = Tokenizer::load(&cfg.resolve(&cfg.tokenizer))?;
        let country = CountryConfig::load(&cfg.resolve(&cfg.country))?;
        let corpus = ProbeCorpus::load(&cfg.resolve(&cfg.corpus))?;
        Self::new(model, tokenizer, country, corpus)
    }

    pub fn new(model: InstrumentedModel, tokenizer: Tokenizer, country: CountryConfig, corpus: ProbeCorpus) -> Result<Self> {
        if tokenizer.vocab_size() != model.config().vocab_size {
            return Err(Error::ModelConfig(format!(
                "tokenizer has {} tokens, model vocabulary is {}",
                tokenizer.vocab_size(),
                model.config().vocab_size
            )));
        }
        for p in &country.parties {
            if corpus.party_index(&p.name).is_none() {
                return Err(Error::Corpus(format!("probe corpus has no statements for party {:?}", p.name)));
            }
        }
        let party_tokens = country
            .parties
            .iter()
            .map(|p| tokenizer.first_token(p.token_surface()))
            .collect::<Result<Vec<_>>>()?;
        let names: Vec<String> = country.parties.iter().map(|p| p.name.clone()).collect();
        check_party_tokens(&names, &party_tokens)?;
        Ok(Self {
            model,
            tokenizer,
            country,
            corpus,
            party_tokens,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub probe: Probe,
    pub metrics: ProbeMetrics,
}

fn probe_file(party: usize, layer: usize) -> String {
    format!("probe_p{party}_l{layer}.json")
}

/// Trains one probe per (party, band layer) and writes probe JSON files
/// and `metrics.csv`.
pub fn run_probe(cfg: &RunConfig, inputs: &Inputs, out: &Path) -> Result<Vec<ProbeResult>> {
    let band: Vec<usize> = probing_layer_band(inputs.model.num_layers()).collect();
    let embedded = embed_corpus_layers(&inputs.model, &inputs.tokenizer, &inputs.corpus, &band)?;
    let hp = cfg.probe_hyperparams();
    let hash = cfg.config_hash();
    let mut writer = StageWriter::new(out, "probe")?;
    let mut results = Vec::new();
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record([
        "party", "layer", "f1", "precision", "recall", "tp", "fp", "tn", "fn", "final_loss",
    ])
    .map_err(|e| Error::csv("probe metrics", e))?;
    for (o, party) in inputs.country.parties.iter().enumerate() {
        let idx = inputs.corpus.party_index(&party.name).expect("checked in Inputs::new");
        for &layer in &band {
            let rows = &embedded[&layer];
            let probe = train_probe(rows, idx, &party.name, layer, &hp)?;
            let metrics = evaluate_probe(&probe, rows, idx)?;
            log::info!("probe {} layer {layer}: holdout F1 {:.3}", party.name, metrics.f1);
            let provenance = serde_json::json!({ "config_hash": hash, "seed": cfg.seed });
            let artifact = ProbeArtifact::from_probe(&probe, Some(provenance));
            let json = serde_json::to_string_pretty(&artifact).expect("probe serializes") + "\n";
            writer.write(&probe_file(o, layer), json.as_bytes())?;
            csv.write_record([
                party.name.clone(),
                layer.to_string(),
                metrics.f1.to_string(),
                metrics.precision.to_string(),
                metrics.recall.to_string(),
                metrics.true_positive.to_string(),
                metrics.false_positive.to_string(),
                metrics.true_negative.to_string(),
                metrics.false_negative.to_string(),
                probe.metadata.final_loss.to_string(),
            ])
            .map_err(|e| Error::csv("probe metrics", e))?;
            results.push(ProbeResult { probe, metrics });
        }
    }
    writer.write("metrics.csv", &csv.into_inner().expect("flush"))?;
    writer.finish("probe", &hash, cfg.seed)?;
    Ok(results)
}

/// Loads the probes written by [`run_probe`].
pub fn load_probes(inputs: &Inputs, out: &Path) -> Result<Vec<Probe>> {
    let mut probes = Vec::new();
    for o in 0..inputs.country.parties.len() {
        for layer in probing_layer_band(inputs.model.num_layers()) {
            let artifact = ProbeArtifact::from_json(&read(&out.join("probe").join(probe_file(o, layer)))?)?;
            let probe = artifact.to_probe()?;
            if probe.weights.len() != inputs.model.config().model_dim {
                return Err(Error::Artifact(format!(
                    "probe for {:?} has dimension {}, model has {}",
                    probe.party,
                    probe.weights.len(),
                    inputs.model.config().model_dim
                )));
            }
            probes.push(probe);
        }
    }
    Ok(probes)
}

fn selection_file(party: usize) -> String {
    format!("selection_p{party}.json")
}

/// Candidate selection and sign-inversion validation for every party,
/// using the probes in `<out>/probe`.
pub fn run_select(cfg: &RunConfig, inputs: &Inputs, out: &Path) -> Result<Vec<ValueVectorSelection>> {
    let probes = load_probes(inputs, out)?;
    let prompts = inputs
        .corpus
        .holdout_statements()
        .map(|r| inputs.tokenizer.encode(&r.statement))
        .collect::<Result<Vec<_>>>()?;
    let hash = cfg.config_hash();
    let mut writer = StageWriter::new(out, "select")?;
    let mut selections = Vec::new();
    for (o, party) in inputs.country.parties.iter().enumerate() {
        let mut candidates = Candidates::default();
        for probe in probes.iter().filter(|p| p.party == party.name) {
            let profile = cosine_profile(probe, &inputs.model, probe.layer)?;
            candidates.extend(iqr_select(&profile, cfg.fence));
        }
        let sel = if candidates.is_empty() {
            log::warn!("no candidate vectors for party {:?}", party.name);
            ValueVectorSelection {
                party: party.name.clone(),
                party_token: inputs.party_tokens[o],
                aligned: Vec::new(),
                diametric: Vec::new(),
                validated: Vec::new(),
            }
        } else {
            validate_by_sign_inversion(
                &inputs.model,
                &party.name,
                &candidates,
                inputs.party_tokens[o],
                &prompts,
                cfg.diametric_rule,
            )?
        };
        if sel.is_empty() {
            log::warn!("party {:?} has no retained vectors and is excluded downstream", party.name);
        }
        let json = serde_json::to_string_pretty(&sel).expect("selection serializes") + "\n";
        writer.write(&selection_file(o), json.as_bytes())?;
        selections.push(sel);
    }
    let projection = vocab_projection_csv(&inputs.model, &inputs.tokenizer, &selections, PROJECTION_TOP_K)?;
    writer.write("vocab_projection.csv", projection.as_bytes())?;
    writer.finish("select", &hash, cfg.seed)?;
    Ok(selections)
}

/// Loads selection artifacts from a `select` directory.
pub fn load_selections(inputs: &Inputs, dir: &Path) -> Result<Vec<ValueVectorSelection>> {
    let dim = inputs.model.config();
    (0..inputs.country.parties.len())
        .map(|o| {
            let sel = ValueVectorSelection::from_json(&read(&dir.join(selection_file(o)))?)?;
            if sel.party != inputs.country.parties[o].name {
                return Err(Error::Artifact(format!(
                    "{} belongs to {:?}, expected {:?}",
                    selection_file(o),
                    sel.party,
                    inputs.country.parties[o].name
                )));
            }
            if let Some(v) = sel.retained().find(|v| v.layer >= dim.num_layers || v.neuron >= dim.mlp_dim) {
                return Err(Error::Artifact(format!(
                    "selection for {:?} names layer {} neuron {} outside the model",
                    sel.party, v.layer, v.neuron
                )));
            }
            Ok(sel)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Forecast {
    pub store: ActivationStore,
    pub personas: PersonaSet,
    /// Latent and prob tables for every attribute.
    pub tables: DistributionSet,
}

/// Latent and probability tables from a weighted activation store.
pub fn estimate_tables(
    store: &ActivationStore,
    personas: &PersonaSet,
    config: &CountryConfig,
    norm: LatentNorm,
) -> Result<DistributionSet> {
    let scores = party_scores(store)?;
    let mut set = DistributionSet::default();
    for (k, attr) in config.attributes.iter().enumerate() {
        let n = attr.categories.len();
        let latent = latent_distribution(&scores, personas, store.n_templates, k, n, norm)?;
        set.tables.push(DistributionTable::from_indexed(Source::Latent, config, k, &latent));
        let prob = probability_distribution(store, personas, k, n)?;
        set.tables.push(DistributionTable::from_indexed(Source::Prob, config, k, &prob));
    }
    Ok(set)
}

/// Samples personas, records activations for the selected vectors and
/// writes the activation store, personas and distribution tables.
pub fn run_forecast(cfg: &RunConfig, inputs: &Inputs, out: &Path) -> Result<Forecast> {
    let selection_dir = match &cfg.selection_from {
        Some(dir) => cfg.resolve(dir),
        None => out.join("select"),
    };
    let selections = load_selections(inputs, &selection_dir)?;
    let marginals = match &cfg.marginals {
        Some(p) => Marginals::load(&inputs.country, &cfg.resolve(p))?,
        None => Marginals::uniform(&inputs.country),
    };
    let personas = sample_personas(&inputs.country, &marginals, cfg.personas, cfg.seed)?;
    let templates = inputs.country.select_templates(cfg.templates)?;
    let mut store = record_activations(
        &inputs.model,
        &inputs.tokenizer,
        &inputs.country,
        &selections,
        &inputs.party_tokens,
        &personas,
        templates,
        cfg.readoff,
    )?;
    normalize_and_weight(&mut store);
    let tables = estimate_tables(&store, &personas, &inputs.country, cfg.latent_norm)?;

    let hash = cfg.config_hash();
    let mut writer = StageWriter::new(out, "forecast")?;
    writer.write("activations.mfw", &store.to_container().to_bytes())?;
    writer.write("personas.csv", personas.to_csv(&inputs.country).as_bytes())?;
    writer.write("distributions.csv", tables.to_csv().as_bytes())?;
    writer.finish("forecast", &hash, cfg.seed)?;
    Ok(Forecast {
        store,
        personas,
        tables,
    })
}

/// Survey tables for every attribute plus the survey's party marginal.
pub fn survey_tables(survey: &Survey, config: &CountryConfig) -> Result<(DistributionSet, Vec<(String, f64)>)> {
    let mut set = DistributionSet::default();
    for (k, attr) in config.attributes.iter().enumerate() {
        let rows = survey_distribution(survey, k, attr.categories.len())?;
        set.tables.push(DistributionTable::from_indexed(Source::Survey, config, k, &rows));
    }
    let marginal = survey.parties.iter().cloned().zip(survey.party_marginal()).collect();
    Ok((set, marginal))
}

/// Compares the forecast tables in `<out>/forecast` with the survey and
/// writes the evaluation report.
pub fn run_evaluate(cfg: &RunConfig, country: &CountryConfig, out: &Path) -> Result<EvalReport> {
    let survey_path = cfg
        .survey
        .as_ref()
        .ok_or_else(|| Error::RunConfig("evaluation needs a survey path".into()))?;
    let survey = Survey::load(country, &cfg.resolve(survey_path))?;
    let forecast_csv = out.join("forecast").join("distributions.csv");
    let mut tables = DistributionSet::load(&forecast_csv)?;
    let (survey_set, marginal) = survey_tables(&survey, country)?;
    tables.merge(survey_set);
    let report = EvalReport::build(&tables, country, &marginal, &cfg.model_tag, cfg.entropy_threshold)?;

    let hash = cfg.config_hash();
    let mut writer = StageWriter::new(out, "evaluate")?;
    writer.write("distributions.csv", tables.to_csv().as_bytes())?;
    for (name, body) in report.files() {
        writer.write(name, body.as_bytes())?;
    }
    writer.finish("evaluate", &hash, cfg.seed)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub probes: Vec<ProbeResult>,
    /// `None` when selections came from `selection_from`.
    pub selections: Option<Vec<ValueVectorSelection>>,
    pub forecast: Forecast,
    pub report: Option<EvalReport>,
}

/// Probe, select, forecast and, when a survey is configured, evaluate.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<PipelineRun> {
    let inputs = Inputs::load(cfg)?;
    let probes = run_probe(cfg, &inputs, out)?;
    let selections = match cfg.selection_from {
        Some(_) => None,
        None => Some(run_select(cfg, &inputs, out)?),
    };
    let forecast = run_forecast(cfg, &inputs, out)?;
    let report = match cfg.survey {
        Some(_) => Some(run_evaluate(cfg, &inputs.country, out)?),
        None => None,
    };
    Ok(PipelineRun {
        probes,
        selections,
        forecast,
        report,
    })
}

/// Builds a synthetic world and writes everything a run needs into `out`,
/// including a `run.json` that points at the written files.
pub fn run_synth(spec: &PlantSpec, out: &Path) -> Result<SyntheticWorld> {
    let world = build_world(spec)?;
    let hash = hex(&Sha256::digest(spec.to_json().as_bytes()));
    let mut writer = StageWriter {
        dir: out.to_path_buf(),
        files: BTreeMap::new(),
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let survey = generate_synthetic_survey(spec, &world.country, spec.survey_size, spec.seed.wrapping_add(7))?;
    let truth = ground_truth(spec, &world.country)?;
    let planted = serde_json::to_string_pretty(&world.planted).expect("planted serializes") + "\n";
    let mut run = RunConfig::new(
        "model.mfw".into(),
        "tokenizer.json".into(),
        "country.json".into(),
        "corpus.csv".into(),
    );
    run.survey = Some("survey.csv".into());
    run.marginals = Some("marginals.csv".into());
    run.seed = spec.seed;
    run.model_tag = "planted".into();

    writer.write("model.mfw", &world.model.to_bytes())?;
    writer.write("tokenizer.json", (world.tokenizer.to_json() + "\n").as_bytes())?;
    writer.write("country.json", (world.country.to_json() + "\n").as_bytes())?;
    writer.write("corpus.csv", world.corpus.to_csv().as_bytes())?;
    writer.write("survey.csv", survey.to_csv(&world.country).as_bytes())?;
    writer.write("marginals.csv", world.marginals.to_csv(&world.country).as_bytes())?;
    writer.write("ground_truth.csv", truth.to_csv().as_bytes())?;
    writer.write(
        "persona_conditionals.csv",
        persona_conditionals_csv(spec, &world.country)?.as_bytes(),
    )?;
    writer.write("plant_spec.json", (spec.to_json() + "\n").as_bytes())?;
    writer.write("planted.json", planted.as_bytes())?;
    writer.write("run.json", (run.to_json() + "\n").as_bytes())?;
    writer.finish("synth", &hash, spec.seed)?;
    Ok(world)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_defaults_and_hash() {
        let json = br#"{"model":"m","tokenizer":"t","country":"c","corpus":"x"}"#;
        let cfg = RunConfig::from_json(json, Path::new("/base")).unwrap();
        assert_eq!(cfg.personas, 10_000);
        assert_eq!(cfg.fence, 2.5);
        assert_eq!(cfg.entropy_threshold, 0.85);
        assert_eq!(cfg.latent_norm, LatentNorm::Softmax);
        assert_eq!(cfg.resolve(Path::new("m")), PathBuf::from("/base/m"));
        let mut moved = cfg.clone();
        moved.out = Some("/elsewhere".into());
        assert_eq!(moved.config_hash(), cfg.config_hash());
        let mut reseeded = cfg.clone();
        reseeded.seed = 1;
        assert_ne!(reseeded.config_hash(), cfg.config_hash());
        let back = RunConfig::from_json(cfg.to_json().as_bytes(), Path::new("/base")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn run_config_rejects_bad_values() {
        for bad in [
            r#"{"model":"m","tokenizer":"t","country":"c","corpus":"x","personas":0}"#,
            r#"{"model":"m","tokenizer":"t","country":"c","corpus":"x","fence":-1}"#,
            r#"{"model":"m","tokenizer":"t","country":"c","corpus":"x","templates":0}"#,
            r#"{"model":"m","tokenizer":"t","country":"c","corpus":"x","typo":1}"#,
            r#"{"model":"m","tokenizer":"t","country":"c"}"#,
        ] {
            assert!(RunConfig::from_json(bad.as_bytes(), Path::new("")).is_err(), "{bad}");
        }
    }

    #[test]
    fn synth_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PlantSpec::default();
        let world = run_synth(&spec, dir.path()).unwrap();
        let cfg = RunConfig::load(&dir.path().join("run.json")).unwrap();
        let inputs = Inputs::load(&cfg).unwrap();
        assert_eq!(inputs.model, world.model);
        assert_eq!(inputs.country, world.country);
        let truth = DistributionSet::load(&dir.path().join("ground_truth.csv")).unwrap();
        assert_eq!(truth, ground_truth(&spec, &world.country).unwrap());
        let meta: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("meta.json")).unwrap()).unwrap();
        assert_eq!(meta["seed"], 42);
        assert_eq!(meta["files"].as_object().unwrap().len(), 11);
    }
}

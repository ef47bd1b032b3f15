//! Replays the checked-in fuzz seeds through their parsers. Seeds whose
//! names start with `bad_`, `negative` or `empty` must be rejected cleanly;
//! every other seed must parse.

use std::path::{Path, PathBuf};

use mforecast_core::aggregate::ActivationStore;
use mforecast_core::container::Container;
use mforecast_core::distribution::{DistributionSet, Survey};
use mforecast_core::model::InstrumentedModel;
use mforecast_core::persona::{CountryConfig, Marginals};
use mforecast_core::pipeline::RunConfig;
use mforecast_core::probe::{ProbeArtifact, ProbeCorpus};
use mforecast_core::select::ValueVectorSelection;
use mforecast_core::synth::PlantSpec;
use mforecast_core::tokenizer::Tokenizer;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = root().join("fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn expect_ok(name: &str) -> bool {
    !["bad_", "negative", "empty"].iter().any(|p| name.starts_with(p))
}

fn check<T, E: std::fmt::Debug>(target: &str, parse: impl Fn(&[u8]) -> Result<T, E>) {
    for (name, bytes) in seeds(target) {
        let r = parse(&bytes);
        assert_eq!(r.is_ok(), expect_ok(&name), "{target}/{name}: {:?}", r.err());
    }
}

fn germany() -> CountryConfig {
    CountryConfig::load(&root().join("configs/germany_2021.json")).unwrap()
}

#[test]
fn binary_seeds() {
    check("container", Container::from_bytes);
    check("model", InstrumentedModel::from_bytes);
    check("activation_store", |b| ActivationStore::from_container(&Container::from_bytes(b)?));
}

#[test]
fn config_seeds() {
    check("country_config", CountryConfig::from_json);
    check("plant_spec", PlantSpec::from_json);
    check("run_config", |b| RunConfig::from_json(b, Path::new("base")));
    check("tokenizer", |b| {
        let split = b.iter().position(|&c| c == b'\n').unwrap_or(b.len());
        let tok = Tokenizer::from_json(b.get(split + 1..).unwrap_or(&[]))?;
        tok.encode(std::str::from_utf8(&b[..split]).unwrap())
    });
}

#[test]
fn tabular_seeds() {
    let config = germany();
    check("probe_corpus", |b| ProbeCorpus::from_csv_reader(b));
    check("marginals", |b| Marginals::from_csv_reader(&config, b));
    check("survey", |b| Survey::from_csv_reader(&config, b));
    check("distributions", |b| DistributionSet::from_csv_reader(b));
}

#[test]
fn artifact_seeds() {
    check("selection", ValueVectorSelection::from_json);
    check("probe_artifact", |b| ProbeArtifact::from_json(b)?.to_probe());
}

#![no_main]
use libfuzzer_sys::fuzz_target;
use mforecast_core::probe::ProbeArtifact;

fuzz_target!(|data: &[u8]| {
    if let Ok(artifact) = ProbeArtifact::from_json(data) {
        let _ = artifact.to_probe();
    }
});

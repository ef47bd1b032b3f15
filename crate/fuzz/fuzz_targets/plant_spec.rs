#![no_main]
use libfuzzer_sys::fuzz_target;
use mforecast_core::synth::PlantSpec;

fuzz_target!(|data: &[u8]| {
    if let Ok(spec) = PlantSpec::from_json(data) {
        let _ = spec.country_config();
    }
});

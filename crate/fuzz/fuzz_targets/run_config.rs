#![no_main]
use libfuzzer_sys::fuzz_target;
use mforecast_core::pipeline::RunConfig;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = RunConfig::from_json(data, Path::new("base")) {
        let _ = cfg.config_hash();
    }
});

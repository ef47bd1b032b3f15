#![no_main]
use libfuzzer_sys::fuzz_target;
use mforecast_core::persona::{CountryConfig, Marginals};

fuzz_target!(|data: &[u8]| {
    let config = CountryConfig::from_json(include_bytes!("../../configs/germany_2021.json")).unwrap();
    let _ = Marginals::from_csv_reader(&config, data);
});

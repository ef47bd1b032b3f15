#![no_main]
use libfuzzer_sys::fuzz_target;
use mforecast_core::persona::CountryConfig;

fuzz_target!(|data: &[u8]| {
    let _ = CountryConfig::from_json(data);
});

#![no_main]
use libfuzzer_sys::fuzz_target;
use mforecast_core::distribution::Survey;
use mforecast_core::persona::CountryConfig;

fuzz_target!(|data: &[u8]| {
    let config = CountryConfig::from_json(include_bytes!("../../configs/germany_2021.json")).unwrap();
    if let Ok(survey) = Survey::from_csv_reader(&config, data) {
        let _ = survey.party_marginal();
    }
});

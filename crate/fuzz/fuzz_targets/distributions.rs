#![no_main]
use libfuzzer_sys::fuzz_target;
use mforecast_core::distribution::DistributionSet;

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = DistributionSet::from_csv_reader(data) {
        let _ = set.to_csv();
    }
});

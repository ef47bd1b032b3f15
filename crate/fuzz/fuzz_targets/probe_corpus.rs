#![no_main]
use libfuzzer_sys::fuzz_target;
use mforecast_core::probe::ProbeCorpus;

fuzz_target!(|data: &[u8]| {
    let _ = ProbeCorpus::from_csv_reader(data);
});

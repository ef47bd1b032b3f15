#![no_main]
use libfuzzer_sys::fuzz_target;
use mforecast_core::select::ValueVectorSelection;

fuzz_target!(|data: &[u8]| {
    let _ = ValueVectorSelection::from_json(data);
});

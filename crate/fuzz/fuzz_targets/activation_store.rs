#![no_main]
use libfuzzer_sys::fuzz_target;
use mforecast_core::aggregate::ActivationStore;
use mforecast_core::container::Container;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::from_bytes(data) {
        let _ = ActivationStore::from_container(&c);
    }
});

#![no_main]
use libfuzzer_sys::fuzz_target;
use mforecast_core::container::Container;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::from_bytes(data) {
        let again = Container::from_bytes(&c.to_bytes()).expect("re-encoded container parses");
        assert_eq!(again.to_bytes(), c.to_bytes());
    }
});

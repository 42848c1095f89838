#![no_main]
use libfuzzer_sys::fuzz_target;

use hsbw::io::read_tolerances;

fuzz_target!(|data: &[u8]| {
    if let Ok(spec) = read_tolerances(data) {
        assert!(spec.entries().values().all(|d| *d >= 0.0));
    }
});

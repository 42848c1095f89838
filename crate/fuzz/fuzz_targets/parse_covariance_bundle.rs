#![no_main]

use libfuzzer_sys::fuzz_target;
use hsbw::io::parse_covariance_bundle;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(bundle) = parse_covariance_bundle(s) {
            // A validated bundle must always yield a usable noise set.
            let _ = bundle.noise_set();
        }
    }
});

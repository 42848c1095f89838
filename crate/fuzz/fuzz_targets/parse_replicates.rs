#![no_main]

use libfuzzer_sys::fuzz_target;
use hsbw::io::read_replicates_long;

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = read_replicates_long(data) {
        assert!(set.count() > 0);
        assert!(set.replicates().iter().all(|m| m.nrows() == set.keys().len()));
    }
});

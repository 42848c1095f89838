#![no_main]
use libfuzzer_sys::fuzz_target;
use hsbw::io::parse_grid;

fuzz_target!(|data: &[u8]| {
    let _ = std::str::from_utf8(data).map(parse_grid);
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use hsbw::io::{read_panel, write_panel_to};

fuzz_target!(|data: &[u8]| {
    let Ok(panel) = read_panel(data) else { return };

    // Anything that loads must survive a write and reload unchanged.
    let mut buf = Vec::new();
    write_panel_to(&panel, None, &mut buf).unwrap();
    let again = read_panel(buf.as_slice()).unwrap();
    assert_eq!(panel, again);
});

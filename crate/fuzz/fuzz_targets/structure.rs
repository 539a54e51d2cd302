#![no_main]

use libfuzzer_sys::fuzz_target;
use shrinkgp::config::parse_structure;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(kinds) = parse_structure(s) {
        assert!(!kinds.is_empty());
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use shrinkgp::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(c) = RunConfig::from_json(s) {
        let back = RunConfig::from_json(&c.to_json().expect("serialize")).expect("re-parse");
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }
});

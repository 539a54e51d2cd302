#![no_main]

use libfuzzer_sys::fuzz_target;
use shrinkgp::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(ck) = Checkpoint::from_json(s) {
        assert_eq!(Checkpoint::from_json(&ck.to_json().unwrap()).unwrap(), ck);
    }
});

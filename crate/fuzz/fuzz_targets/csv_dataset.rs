#![no_main]

use libfuzzer_sys::fuzz_target;
use shrinkgp::data::{load_csv_reader, Task};

fuzz_target!(|data: &[u8]| {
    for task in [Task::Regression, Task::Classification] {
        let Ok(ds) = load_csv_reader(data, None, task) else { continue };
        // Whatever parses must survive a write/read cycle unchanged.
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).expect("write");
        let back = load_csv_reader(buf.as_slice(), Some(&ds.target_column), task).expect("re-read");
        assert_eq!(back, ds);
    }
});

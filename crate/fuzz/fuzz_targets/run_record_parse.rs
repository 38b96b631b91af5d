#![no_main]

use htr_core::metrics::{time_to_threshold, RunRecord};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(run) = RunRecord::read_csv(data) {
        let mut out = Vec::new();
        run.write_csv(&mut out).expect("in-memory write");
        let again = RunRecord::read_csv(&out[..]).expect("written record parses");
        assert_eq!(run.epochs().len(), again.epochs().len());
        if !run.epochs().is_empty() {
            assert!(time_to_threshold(&run, 1.05).is_some());
        }
    }
});

#![no_main]

use htr_core::tensor::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        let bytes = ck.to_bytes();
        let again = Checkpoint::from_bytes(&bytes).expect("encoded checkpoint decodes");
        assert_eq!(again.to_bytes(), bytes);
        let _ = htr_core::train::from_checkpoint(&ck);
    }
});

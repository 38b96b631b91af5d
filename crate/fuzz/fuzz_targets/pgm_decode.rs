#![no_main]

use htr_core::preprocess::{decode_pgm, encode_pgm};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pgm(data) {
        assert!(img.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        // 8-bit re-encoding is stable after the first pass
        let once = decode_pgm(&encode_pgm(&img)).expect("encoder output decodes");
        let twice = decode_pgm(&encode_pgm(&once)).expect("encoder output decodes");
        assert_eq!(once, twice);
    }
});

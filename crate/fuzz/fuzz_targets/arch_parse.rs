#![no_main]

use htr_core::models::ArchFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = ArchFile::parse(text);
    }
});

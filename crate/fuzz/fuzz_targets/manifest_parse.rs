#![no_main]

use htr_core::augment::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = Manifest::parse(text) {
            let again = Manifest::parse(&m.render().expect("parsed manifest renders"))
                .expect("rendered manifest parses");
            assert_eq!(m.entries, again.entries);
        }
    }
});

#![no_main]

use ccrp_core::evidence::{encode_store, parse_store};
use ccrp_core::StoreKind;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    for kind in [StoreKind::Agreed, StoreKind::NonAgreed] {
        if let Ok(entries) = parse_store(kind, text) {
            assert_eq!(
                parse_store(kind, &encode_store(kind, &entries)).ok(),
                Some(entries)
            );
        }
    }
});

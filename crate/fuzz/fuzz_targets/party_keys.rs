#![no_main]

use ccrp_core::PartyKeys;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(keys) = PartyKeys::parse(text) {
        assert_eq!(PartyKeys::parse(&keys.to_text()), Ok(keys.clone()));
    }
});

#![no_main]

use ccrp_core::codec::Canonical;
use ccrp_core::Wire;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(msg) = Wire::from_canonical_bytes(data) {
        assert_eq!(msg.to_canonical_bytes(), data);
    }
});

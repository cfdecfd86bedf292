#![no_main]

use ccrp_core::codec::Canonical;
use ccrp_core::{EvidenceEntry, SignedEnvelope};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(env) = SignedEnvelope::from_canonical_bytes(data) {
        assert_eq!(env.to_canonical_bytes(), data);
    }
    if let Ok(entry) = EvidenceEntry::from_canonical_bytes(data) {
        assert_eq!(entry.to_canonical_bytes(), data);
    }
});

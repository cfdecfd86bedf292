//! Faults injected on the wire end up as non-agreed evidence with the right
//! reason, and whatever tokens are kept still verify.

use ccrp_core::evidence::{encode_store, parse_store, EvidenceError};
use ccrp_core::negotiation::{run_interval, FaultyTransport, InMemoryTransport};
use ccrp_core::{
    Backend, ConsumerRas, ConsumptionInterval, EntryStatus, EvidenceStore, FailureReason, FsConfig,
    IntervalOutcome, KeyedIdentity, MeterRecord, Party, PartyKeys, ProtocolConfig, ProviderRas,
    StoreKind, Wire,
};

fn logs() -> (Vec<MeterRecord>, Vec<MeterRecord>) {
    (0..40)
        .map(|i: i64| {
            let c = MeterRecord {
                request_id: i as u64,
                user_id: 1,
                request_time_stamp: i * 240,
                bytes_transferred: 4_000 + 97 * i as u64,
                request_received_time: None,
            };
            let p = MeterRecord {
                request_received_time: Some(i * 240 + 100),
                ..c.clone()
            };
            (c, p)
        })
        .unzip()
}

fn keys() -> (KeyedIdentity, KeyedIdentity, PartyKeys) {
    let c = KeyedIdentity::derive(Backend::Ed25519, Party::Consumer, 11);
    let p = KeyedIdentity::derive(Backend::Ed25519, Party::Provider, 11);
    let keys = PartyKeys::of(&c, &p);
    (c, p, keys)
}

fn run_with(fault: impl FnMut(Party, Wire) -> Option<Wire>) -> IntervalOutcome {
    let (c_id, p_id, keys) = keys();
    let (c_log, p_log) = logs();
    let mut consumer = ConsumerRas::new(
        c_id,
        keys.clone(),
        &c_log,
        FsConfig::TYPICAL,
        ProtocolConfig::default(),
    );
    let mut provider = ProviderRas::new(
        p_id,
        keys,
        &p_log,
        FsConfig::TYPICAL,
        ProtocolConfig::default(),
    );
    let ci = ConsumptionInterval::new(3, 0, 9_600).unwrap();
    let pi = ConsumptionInterval::new(3, 0, 9_000).unwrap();
    let mut transport = FaultyTransport::new(InMemoryTransport::new(), fault);
    run_interval(&mut consumer, &mut provider, ci, pi, &mut transport).unwrap()
}

fn filed(outcome: &IntervalOutcome) -> (StoreKind, ccrp_core::EvidenceEntry) {
    let (_, _, keys) = keys();
    let mut store = EvidenceStore::new();
    let kind = store.commit(outcome, &keys).unwrap();
    let (found, entry) = store.entry(outcome.interval_index).unwrap();
    assert_eq!(found, kind);
    entry.verify(&keys).unwrap();
    let text = encode_store(kind, store.store(kind));
    assert_eq!(parse_store(kind, &text).unwrap(), vec![entry.clone()]);
    (kind, entry.clone())
}

#[test]
fn clean_run_is_agreed_after_negotiating() {
    let outcome = run_with(|_, m| Some(m));
    assert!(outcome.is_agreed(), "{outcome:?}");
    assert!(outcome.rounds_used() >= 1);
    let (kind, entry) = filed(&outcome);
    assert_eq!(kind, StoreKind::Agreed);
    assert_eq!(entry.envelopes.len(), 4);
}

#[test]
fn lost_ack_times_out_and_keeps_three_tokens() {
    let outcome = run_with(|_, m| match m {
        Wire::Ack(_) => None,
        m => Some(m),
    });
    assert_eq!(outcome.failure, Some(FailureReason::Timeout));
    let (kind, entry) = filed(&outcome);
    assert_eq!(kind, StoreKind::NonAgreed);
    assert_eq!(entry.status, EntryStatus::NonAgreed(FailureReason::Timeout));
    assert_eq!(entry.envelopes.len(), 3);
}

#[test]
fn silent_provider_times_out_with_no_tokens() {
    let outcome = run_with(|to, m| (to == Party::Provider).then_some(m));
    assert_eq!(outcome.failure, Some(FailureReason::Timeout));
    let (_, entry) = filed(&outcome);
    assert!(entry.envelopes.is_empty());
    assert!(entry.transcript.is_empty());
}

#[test]
fn forged_record_signature_is_tamper() {
    let outcome = run_with(|_, m| match m {
        Wire::Record(mut env) => {
            env.signature[0] ^= 0x80;
            Some(Wire::Record(env))
        }
        m => Some(m),
    });
    assert_eq!(outcome.failure, Some(FailureReason::Tamper));
    let (kind, entry) = filed(&outcome);
    assert_eq!(kind, StoreKind::NonAgreed);
    assert_eq!(entry.status, EntryStatus::NonAgreed(FailureReason::Tamper));
    assert!(entry.envelopes.is_empty());
}

#[test]
fn forged_decision_is_tamper() {
    let outcome = run_with(|_, m| match m {
        Wire::Decision {
            receipt,
            mut origin,
        } => {
            origin.payload[0] ^= 0x01;
            Some(Wire::Decision { receipt, origin })
        }
        m => Some(m),
    });
    assert_eq!(outcome.failure, Some(FailureReason::Tamper));
    let (_, entry) = filed(&outcome);
    assert_eq!(entry.status, EntryStatus::NonAgreed(FailureReason::Tamper));
    assert!(entry.envelopes.len() < 4);
}

#[test]
fn skipped_counter_is_a_protocol_error() {
    let outcome = run_with(|_, m| match m {
        Wire::Response(mut resp) => {
            resp.counter += 1;
            Some(Wire::Response(resp))
        }
        m => Some(m),
    });
    assert_eq!(outcome.failure, Some(FailureReason::ProtocolError));
    let (_, entry) = filed(&outcome);
    assert_eq!(
        entry.status,
        EntryStatus::NonAgreed(FailureReason::ProtocolError)
    );
}

#[test]
fn an_interval_is_filed_once() {
    let (_, _, keys) = keys();
    let outcome = run_with(|_, m| Some(m));
    let mut store = EvidenceStore::new();
    store.commit(&outcome, &keys).unwrap();
    let mut failed = outcome.clone();
    failed.failure = Some(FailureReason::Timeout);
    assert!(matches!(
        store.commit(&failed, &keys),
        Err(EvidenceError::DuplicateInterval(3))
    ));
    assert_eq!(store.len(), 1);
}

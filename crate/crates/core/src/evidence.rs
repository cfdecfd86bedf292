//! Agreed and non-agreed evidence stores.
//!
//! Each store is a text file: two header lines, then one line per interval
//! holding the index and the hex of the entry's canonical encoding.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::accounting::AccountingRecord;
use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::negotiation::{
    transcript_digest, transcript_is_monotone, FailureReason, IntervalOutcome, Round,
};
use crate::nr::{
    self, Decision, DecisionValue, NrError, PartyKeys, PayloadKind, SignedEnvelope, TokenKind,
};

pub const FILE_MAGIC: &str = "# ccrp evidence v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvidenceError {
    #[error("interval {0} already committed")]
    DuplicateInterval(u64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("interval {interval}: {message}")]
    Invalid { interval: u64, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntryStatus {
    Agreed,
    NonAgreed(FailureReason),
}

impl Canonical for EntryStatus {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            EntryStatus::Agreed => enc.u8(0),
            EntryStatus::NonAgreed(reason) => enc.u8(1).put(reason),
        };
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            0 => Ok(EntryStatus::Agreed),
            1 => Ok(EntryStatus::NonAgreed(dec.get()?)),
            tag => Err(DecodeError::InvalidTag {
                what: "entry status",
                tag,
            }),
        }
    }
}

/// Everything kept about one interval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvidenceEntry {
    pub interval_index: u64,
    pub status: EntryStatus,
    pub provider_record: Option<AccountingRecord>,
    pub consumer_record: Option<AccountingRecord>,
    pub envelopes: Vec<SignedEnvelope>,
    pub transcript: Vec<Round>,
}

impl Canonical for EvidenceEntry {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.interval_index)
            .put(&self.status)
            .option(self.provider_record.as_ref())
            .option(self.consumer_record.as_ref())
            .seq(&self.envelopes)
            .seq(&self.transcript);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            interval_index: dec.u64()?,
            status: dec.get()?,
            provider_record: dec.option()?,
            consumer_record: dec.option()?,
            envelopes: dec.seq()?,
            transcript: dec.seq()?,
        })
    }
}

fn invalid(interval: u64, message: impl Into<String>) -> EvidenceError {
    EvidenceError::Invalid {
        interval,
        message: message.into(),
    }
}

fn nr_invalid(interval: u64, what: &str, e: NrError) -> EvidenceError {
    invalid(interval, format!("{what}: {e}"))
}

impl EvidenceEntry {
    /// The signed decision, if the chain reaches that far.
    pub fn decision(&self) -> Option<Decision> {
        self.envelopes
            .get(2)
            .and_then(|env| Decision::from_canonical_bytes(&env.payload).ok())
    }

    /// Checks everything that can be checked from the entry and the keys:
    /// every signature, the links between tokens, and that the stored
    /// records and transcript are the ones the tokens commit to.
    pub fn verify(&self, keys: &PartyKeys) -> Result<(), EvidenceError> {
        let idx = self.interval_index;
        for (i, env) in self.envelopes.iter().enumerate() {
            let key = keys.key_of(&env.signer).ok_or_else(|| {
                invalid(
                    idx,
                    format!("token {i} signed by unknown party {:?}", env.signer),
                )
            })?;
            if !nr::verify(env, key) {
                return Err(invalid(
                    idx,
                    format!("token {i} ({}) has an invalid signature", env.label()),
                ));
            }
            if env.sequence != idx {
                return Err(invalid(
                    idx,
                    format!("token {i} carries sequence {}", env.sequence),
                ));
            }
        }
        if !transcript_is_monotone(&self.transcript) {
            return Err(invalid(idx, "transcript counters are not consecutive"));
        }
        if self
            .transcript
            .iter()
            .any(|r| r.request.interval_index != idx)
        {
            return Err(invalid(idx, "transcript belongs to another interval"));
        }
        if self.status == EntryStatus::Agreed && self.envelopes.len() != 4 {
            return Err(invalid(
                idx,
                format!("agreed entry holds {} tokens", self.envelopes.len()),
            ));
        }
        if self.envelopes.len() > 4 {
            return Err(invalid(idx, "more than four tokens"));
        }

        let Some(proposal) = self.envelopes.first() else {
            return Ok(());
        };
        let record = nr::step2_validate_deliver(proposal, &keys.provider_id, &keys.provider)
            .map_err(|e| nr_invalid(idx, "record origin", e))?;
        if self.provider_record != Some(record) {
            return Err(invalid(idx, "provider record differs from the signed one"));
        }
        if self.envelopes.len() == 2 {
            return Err(invalid(idx, "record receipt without a decision"));
        }
        if self.envelopes.len() < 3 {
            return Ok(());
        }
        let decision = nr::validate_decision(
            proposal,
            &self.envelopes[1],
            &self.envelopes[2],
            &keys.consumer_id,
            &keys.consumer,
        )
        .map_err(|e| nr_invalid(idx, "decision", e))?;
        if decision.transcript_digest != transcript_digest(&self.transcript) {
            return Err(invalid(
                idx,
                "transcript does not match the signed decision",
            ));
        }
        if decision.rounds_used as usize != self.transcript.len() {
            return Err(invalid(idx, "round count does not match the transcript"));
        }
        match self.consumer_record {
            Some(c) if c.params == decision.final_params && c.interval_index == idx => {}
            _ => return Err(invalid(idx, "consumer record does not match the decision")),
        }
        if let Some(ack) = self.envelopes.get(3) {
            nr::validate_ack(ack, &self.envelopes[2], &keys.provider_id, &keys.provider)
                .map_err(|e| nr_invalid(idx, "decision receipt", e))?;
        }
        if self.status == EntryStatus::Agreed && decision.value != DecisionValue::Yes {
            return Err(invalid(idx, "agreed entry carries a negative decision"));
        }
        Ok(())
    }
}

/// Which store an entry belongs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreKind {
    Agreed,
    NonAgreed,
}

impl StoreKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StoreKind::Agreed => "agreed",
            StoreKind::NonAgreed => "nonagreed",
        }
    }
}

/// Both stores of one run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvidenceStore {
    pub agreed: Vec<EvidenceEntry>,
    pub non_agreed: Vec<EvidenceEntry>,
    seen: BTreeSet<u64>,
}

impl EvidenceStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.agreed.len() + self.non_agreed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Files an outcome. It only lands in the agreed store when the four
    /// tokens verify under both keys and agree with the outcome; a Yes that
    /// fails that check is filed as tampered.
    pub fn commit(
        &mut self,
        outcome: &IntervalOutcome,
        keys: &PartyKeys,
    ) -> Result<StoreKind, EvidenceError> {
        let idx = outcome.interval_index;
        if self.seen.contains(&idx) {
            return Err(EvidenceError::DuplicateInterval(idx));
        }
        let mut entry = EvidenceEntry {
            interval_index: idx,
            status: EntryStatus::Agreed,
            provider_record: outcome.provider_record,
            consumer_record: outcome.consumer_record,
            envelopes: outcome.envelopes.clone(),
            transcript: outcome.transcript.clone(),
        };
        let kind = if outcome.is_agreed() && self.chain_holds(&entry, outcome, keys) {
            StoreKind::Agreed
        } else {
            let reason = match outcome.failure {
                Some(reason) => reason,
                None if outcome.is_agreed() => FailureReason::Tamper,
                None => FailureReason::UnexplainedDivergence,
            };
            entry.status = EntryStatus::NonAgreed(reason);
            // keep only the tokens that still verify as a chain prefix
            while !entry.envelopes.is_empty() && entry.verify(keys).is_err() {
                entry.envelopes.pop();
            }
            StoreKind::NonAgreed
        };
        self.seen.insert(idx);
        match kind {
            StoreKind::Agreed => self.agreed.push(entry),
            StoreKind::NonAgreed => self.non_agreed.push(entry),
        }
        Ok(kind)
    }

    fn chain_holds(
        &self,
        entry: &EvidenceEntry,
        outcome: &IntervalOutcome,
        keys: &PartyKeys,
    ) -> bool {
        let Ok((record, decision)) = nr::verify_chain(&entry.envelopes, keys) else {
            return false;
        };
        Some(record) == outcome.provider_record
            && Some(decision) == outcome.decision
            && decision.value == DecisionValue::Yes
            && entry.verify(keys).is_ok()
    }

    pub fn entry(&self, interval_index: u64) -> Option<(StoreKind, &EvidenceEntry)> {
        self.agreed
            .iter()
            .find(|e| e.interval_index == interval_index)
            .map(|e| (StoreKind::Agreed, e))
            .or_else(|| {
                self.non_agreed
                    .iter()
                    .find(|e| e.interval_index == interval_index)
                    .map(|e| (StoreKind::NonAgreed, e))
            })
    }

    pub fn store(&self, kind: StoreKind) -> &[EvidenceEntry] {
        match kind {
            StoreKind::Agreed => &self.agreed,
            StoreKind::NonAgreed => &self.non_agreed,
        }
    }

    /// Rebuilds a store pair from parsed files, rejecting intervals that
    /// appear more than once.
    pub fn from_parts(
        agreed: Vec<EvidenceEntry>,
        non_agreed: Vec<EvidenceEntry>,
    ) -> Result<Self, EvidenceError> {
        let mut seen = BTreeSet::new();
        for e in agreed.iter().chain(&non_agreed) {
            if !seen.insert(e.interval_index) {
                return Err(EvidenceError::DuplicateInterval(e.interval_index));
            }
        }
        Ok(Self {
            agreed,
            non_agreed,
            seen,
        })
    }
}

pub fn encode_store(kind: StoreKind, entries: &[EvidenceEntry]) -> String {
    let mut out = format!("{FILE_MAGIC}\n# store: {}\n", kind.as_str());
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\n",
            e.interval_index,
            hex::encode(e.to_canonical_bytes())
        ));
    }
    out
}

/// Parses one store file. Every entry must decode, carry the index named on
/// its line, and have the status that belongs in this store.
pub fn parse_store(kind: StoreKind, text: &str) -> Result<Vec<EvidenceEntry>, EvidenceError> {
    Ok(parse_store_lines(kind, text)?
        .into_iter()
        .map(|(_, e)| e)
        .collect())
}

/// Like [`parse_store`], keeping the line number of each entry.
pub fn parse_store_lines(
    kind: StoreKind,
    text: &str,
) -> Result<Vec<(usize, EvidenceEntry)>, EvidenceError> {
    let perr = |line: usize, message: String| EvidenceError::Parse { line, message };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l == FILE_MAGIC => {}
        _ => return Err(perr(1, "missing evidence header".into())),
    }
    let expected = format!("# store: {}", kind.as_str());
    match lines.next() {
        Some((_, l)) if l == expected => {}
        _ => return Err(perr(2, format!("expected {expected:?}"))),
    }
    let mut entries = Vec::new();
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let (idx, body) = line
            .split_once('\t')
            .ok_or_else(|| perr(n, "missing tab".into()))?;
        let idx: u64 = idx
            .parse()
            .map_err(|_| perr(n, format!("bad interval index {idx:?}")))?;
        let bytes =
            hex::decode(body).map_err(|e| perr(n, format!("interval {idx}: bad hex: {e}")))?;
        let entry = EvidenceEntry::from_canonical_bytes(&bytes)
            .map_err(|e| perr(n, format!("interval {idx}: {e}")))?;
        if entry.interval_index != idx {
            return Err(perr(
                n,
                format!(
                    "line says interval {idx}, entry says {}",
                    entry.interval_index
                ),
            ));
        }
        let fits = matches!(
            (kind, entry.status),
            (StoreKind::Agreed, EntryStatus::Agreed)
                | (StoreKind::NonAgreed, EntryStatus::NonAgreed(_))
        );
        if !fits {
            return Err(perr(
                n,
                format!("entry status {:?} in {} store", entry.status, kind.as_str()),
            ));
        }
        entries.push((n, entry));
    }
    Ok(entries)
}

/// Which side of the exchange signed a token, by position in the chain.
pub fn expected_token(position: usize) -> Option<(PayloadKind, TokenKind)> {
    match position {
        0 => Some((PayloadKind::AccountingRecordMsg, TokenKind::Nro)),
        1 => Some((PayloadKind::AccountingRecordMsg, TokenKind::Nrr)),
        2 => Some((PayloadKind::DecisionMsg, TokenKind::Nro)),
        3 => Some((PayloadKind::DecisionMsg, TokenKind::Nrr)),
        _ => None,
    }
}

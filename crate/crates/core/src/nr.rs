//! Non-repudiation evidence for the signed record exchange.
//!
//! The exchange for one interval produces four tokens:
//!
//! 1. provider: `NRO(SR)`, origin of its accounting record
//! 2. consumer validates `NRO(SR)` and recovers the record
//! 3. consumer compares and decides (possibly after negotiation)
//! 4. consumer: `NRR(SR)`, receipt of the record, and `NRO(decn)`
//! 5. provider validates both and answers with `NRR(decn)`
//!
//! A receipt's payload is the SHA-256 digest of the envelope it acknowledges.
//!
//! Two signature backends are available. `KeyedDigest` is HMAC-SHA256 whose
//! verification key is the secret itself; it exercises protocol logic but
//! offers no protection against a party that can read the key file.
//! `Ed25519` verification keys are public.

use std::fmt;
use std::str::FromStr;

use ed25519_dalek::{Signer as _, Verifier as _};
use hmac::{Hmac, Mac};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::accounting::{AccountingParams, AccountingRecord, Party};
use crate::codec::{Canonical, DecodeError, Decoder, Encoder};

const SIGNING_DOMAIN: &[u8] = b"ccrp-nr-v1";

pub type Digest32 = [u8; 32];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NrError {
    #[error("signature by {signer:?} does not verify")]
    InvalidSignature { signer: String },
    #[error("expected {expected} token, found {found}")]
    WrongToken { expected: String, found: String },
    #[error("token signed by {found:?}, expected {expected:?}")]
    WrongSigner { expected: String, found: String },
    #[error("token for interval {found}, expected {expected}")]
    WrongSequence { expected: u64, found: u64 },
    #[error("receipt does not reference the acknowledged envelope")]
    DanglingReceipt,
    #[error("malformed payload: {0}")]
    Malformed(#[from] DecodeError),
    #[error("decision is for interval {found}, expected {expected}")]
    DecisionMismatch { expected: u64, found: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backend {
    KeyedDigest,
    Ed25519,
}

impl Backend {
    pub fn as_str(&self) -> &'static str {
        match self {
            Backend::KeyedDigest => "keyed-digest",
            Backend::Ed25519 => "ed25519",
        }
    }
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "keyed-digest" => Ok(Backend::KeyedDigest),
            "ed25519" => Ok(Backend::Ed25519),
            other => Err(format!("unknown signature backend {other:?}")),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub enum VerificationKey {
    KeyedDigest([u8; 32]),
    Ed25519([u8; 32]),
}

impl fmt::Debug for VerificationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VerificationKey({self})")
    }
}

impl fmt::Display for VerificationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerificationKey::KeyedDigest(k) => write!(f, "keyed-digest:{}", hex::encode(k)),
            VerificationKey::Ed25519(k) => write!(f, "ed25519:{}", hex::encode(k)),
        }
    }
}

impl FromStr for VerificationKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (backend, key) = s
            .split_once(':')
            .ok_or_else(|| format!("malformed key {s:?}"))?;
        let bytes: [u8; 32] = hex::decode(key)
            .map_err(|e| e.to_string())?
            .try_into()
            .map_err(|_| "key must be 32 bytes".to_string())?;
        match backend.parse::<Backend>()? {
            Backend::KeyedDigest => Ok(VerificationKey::KeyedDigest(bytes)),
            Backend::Ed25519 => Ok(VerificationKey::Ed25519(bytes)),
        }
    }
}

#[derive(Clone)]
enum SigningKey {
    KeyedDigest([u8; 32]),
    Ed25519(ed25519_dalek::SigningKey),
}

/// A party's name plus the key it signs with.
#[derive(Clone)]
pub struct KeyedIdentity {
    party_id: String,
    key: SigningKey,
}

impl fmt::Debug for KeyedIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyedIdentity")
            .field("party_id", &self.party_id)
            .finish_non_exhaustive()
    }
}

impl KeyedIdentity {
    pub fn new(backend: Backend, party_id: impl Into<String>, secret: [u8; 32]) -> Self {
        let key = match backend {
            Backend::KeyedDigest => SigningKey::KeyedDigest(secret),
            Backend::Ed25519 => SigningKey::Ed25519(ed25519_dalek::SigningKey::from_bytes(&secret)),
        };
        Self {
            party_id: party_id.into(),
            key,
        }
    }

    /// Deterministic identity for a simulated party.
    pub fn derive(backend: Backend, party: Party, seed: u64) -> Self {
        let secret: [u8; 32] = Sha256::new()
            .chain_update(b"ccrp-identity")
            .chain_update(party.as_str())
            .chain_update(seed.to_be_bytes())
            .finalize()
            .into();
        Self::new(backend, party.as_str(), secret)
    }

    pub fn party_id(&self) -> &str {
        &self.party_id
    }

    pub fn verification_key(&self) -> VerificationKey {
        match &self.key {
            SigningKey::KeyedDigest(k) => VerificationKey::KeyedDigest(*k),
            SigningKey::Ed25519(k) => VerificationKey::Ed25519(k.verifying_key().to_bytes()),
        }
    }

    fn sign_bytes(&self, msg: &[u8]) -> Vec<u8> {
        match &self.key {
            SigningKey::KeyedDigest(k) => hmac_sha256(k, msg).to_vec(),
            SigningKey::Ed25519(k) => k.sign(msg).to_bytes().to_vec(),
        }
    }
}

fn hmac_sha256(key: &[u8; 32], msg: &[u8]) -> [u8; 32] {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(msg);
    mac.finalize().into_bytes().into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PayloadKind {
    AccountingRecordMsg,
    DecisionMsg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Nro,
    Nrr,
}

impl Canonical for PayloadKind {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(match self {
            PayloadKind::AccountingRecordMsg => 1,
            PayloadKind::DecisionMsg => 2,
        });
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            1 => Ok(PayloadKind::AccountingRecordMsg),
            2 => Ok(PayloadKind::DecisionMsg),
            tag => Err(DecodeError::InvalidTag {
                what: "payload kind",
                tag,
            }),
        }
    }
}

impl Canonical for TokenKind {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(match self {
            TokenKind::Nro => 1,
            TokenKind::Nrr => 2,
        });
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            1 => Ok(TokenKind::Nro),
            2 => Ok(TokenKind::Nrr),
            tag => Err(DecodeError::InvalidTag {
                what: "token kind",
                tag,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SignedEnvelope {
    pub payload: Vec<u8>,
    pub payload_kind: PayloadKind,
    pub token_kind: TokenKind,
    pub signer: String,
    pub signature: Vec<u8>,
    pub sequence: u64,
}

impl SignedEnvelope {
    pub fn digest(&self) -> Digest32 {
        Sha256::digest(self.to_canonical_bytes()).into()
    }

    pub fn label(&self) -> &'static str {
        match (self.token_kind, self.payload_kind) {
            (TokenKind::Nro, PayloadKind::AccountingRecordMsg) => "NRO(SR)",
            (TokenKind::Nrr, PayloadKind::AccountingRecordMsg) => "NRR(SR)",
            (TokenKind::Nro, PayloadKind::DecisionMsg) => "NRO(decn)",
            (TokenKind::Nrr, PayloadKind::DecisionMsg) => "NRR(decn)",
        }
    }
}

impl Canonical for SignedEnvelope {
    fn encode(&self, enc: &mut Encoder) {
        enc.put(&self.payload_kind)
            .put(&self.token_kind)
            .str(&self.signer)
            .u64(self.sequence)
            .bytes(&self.payload)
            .bytes(&self.signature);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let payload_kind = dec.get()?;
        let token_kind = dec.get()?;
        let signer = dec.str()?.to_string();
        let sequence = dec.u64()?;
        let payload = dec.bytes()?.to_vec();
        let signature = dec.bytes()?.to_vec();
        Ok(Self {
            payload,
            payload_kind,
            token_kind,
            signer,
            signature,
            sequence,
        })
    }
}

fn signing_input(
    payload_kind: PayloadKind,
    token_kind: TokenKind,
    signer: &str,
    sequence: u64,
    payload: &[u8],
) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.fixed(SIGNING_DOMAIN)
        .put(&payload_kind)
        .put(&token_kind)
        .str(signer)
        .u64(sequence)
        .bytes(payload);
    enc.finish()
}

pub fn sign(
    identity: &KeyedIdentity,
    payload_kind: PayloadKind,
    token_kind: TokenKind,
    sequence: u64,
    payload: Vec<u8>,
) -> SignedEnvelope {
    let msg = signing_input(
        payload_kind,
        token_kind,
        &identity.party_id,
        sequence,
        &payload,
    );
    SignedEnvelope {
        signature: identity.sign_bytes(&msg),
        payload,
        payload_kind,
        token_kind,
        signer: identity.party_id.clone(),
        sequence,
    }
}

pub fn verify(envelope: &SignedEnvelope, key: &VerificationKey) -> bool {
    let msg = signing_input(
        envelope.payload_kind,
        envelope.token_kind,
        &envelope.signer,
        envelope.sequence,
        &envelope.payload,
    );
    match key {
        VerificationKey::KeyedDigest(k) => {
            let mut mac = Hmac::<Sha256>::new_from_slice(k).expect("hmac accepts any key length");
            mac.update(&msg);
            mac.verify_slice(&envelope.signature).is_ok()
        }
        VerificationKey::Ed25519(k) => {
            let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(k) else {
                return false;
            };
            let Ok(sig) = ed25519_dalek::Signature::from_slice(&envelope.signature) else {
                return false;
            };
            vk.verify(&msg, &sig).is_ok()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecisionValue {
    Yes,
    No,
}

impl DecisionValue {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecisionValue::Yes => "yes",
            DecisionValue::No => "no",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Decision {
    pub interval_index: u64,
    pub value: DecisionValue,
    pub final_params: AccountingParams,
    pub rounds_used: u32,
    /// Binds the negotiation transcript into the signed decision.
    pub transcript_digest: Digest32,
}

impl Canonical for Party {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(match self {
            Party::Consumer => 1,
            Party::Provider => 2,
        });
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            1 => Ok(Party::Consumer),
            2 => Ok(Party::Provider),
            tag => Err(DecodeError::InvalidTag { what: "party", tag }),
        }
    }
}

impl Canonical for AccountingParams {
    fn encode(&self, enc: &mut Encoder) {
        enc.i64(self.start_point())
            .i64(self.end_point())
            .i64(self.transmission_time());
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let (sp, ep, tt) = (dec.i64()?, dec.i64()?, dec.i64()?);
        AccountingParams::new(sp, ep, tt).map_err(|e| DecodeError::InvalidValue(e.to_string()))
    }
}

impl Canonical for AccountingRecord {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.interval_index)
            .put(&self.party)
            .put(&self.params)
            .u64(self.storage_consumed)
            .u64(self.request_count);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            interval_index: dec.u64()?,
            party: dec.get()?,
            params: dec.get()?,
            storage_consumed: dec.u64()?,
            request_count: dec.u64()?,
        })
    }
}

impl Canonical for DecisionValue {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(match self {
            DecisionValue::Yes => 1,
            DecisionValue::No => 0,
        });
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            1 => Ok(DecisionValue::Yes),
            0 => Ok(DecisionValue::No),
            tag => Err(DecodeError::InvalidTag {
                what: "decision",
                tag,
            }),
        }
    }
}

impl Canonical for Decision {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.interval_index)
            .put(&self.value)
            .put(&self.final_params)
            .u32(self.rounds_used)
            .fixed(&self.transcript_digest);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            interval_index: dec.u64()?,
            value: dec.get()?,
            final_params: dec.get()?,
            rounds_used: dec.u32()?,
            transcript_digest: dec.fixed()?,
        })
    }
}

fn expect_token(
    envelope: &SignedEnvelope,
    payload_kind: PayloadKind,
    token_kind: TokenKind,
    signer: &str,
    key: &VerificationKey,
) -> Result<(), NrError> {
    if envelope.payload_kind != payload_kind || envelope.token_kind != token_kind {
        let expected = SignedEnvelope {
            payload_kind,
            token_kind,
            ..envelope.clone()
        };
        return Err(NrError::WrongToken {
            expected: expected.label().to_string(),
            found: envelope.label().to_string(),
        });
    }
    if envelope.signer != signer {
        return Err(NrError::WrongSigner {
            expected: signer.to_string(),
            found: envelope.signer.clone(),
        });
    }
    if !verify(envelope, key) {
        return Err(NrError::InvalidSignature {
            signer: envelope.signer.clone(),
        });
    }
    Ok(())
}

/// Step 1: the provider signs the origin of its record.
pub fn step1_propose(provider: &KeyedIdentity, record: &AccountingRecord) -> SignedEnvelope {
    sign(
        provider,
        PayloadKind::AccountingRecordMsg,
        TokenKind::Nro,
        record.interval_index,
        record.to_canonical_bytes(),
    )
}

/// Step 2: the consumer checks `NRO(SR)` and recovers the provider's record.
pub fn step2_validate_deliver(
    envelope: &SignedEnvelope,
    provider_id: &str,
    provider_key: &VerificationKey,
) -> Result<AccountingRecord, NrError> {
    expect_token(
        envelope,
        PayloadKind::AccountingRecordMsg,
        TokenKind::Nro,
        provider_id,
        provider_key,
    )?;
    let record = AccountingRecord::from_canonical_bytes(&envelope.payload)?;
    if record.interval_index != envelope.sequence {
        return Err(NrError::WrongSequence {
            expected: envelope.sequence,
            found: record.interval_index,
        });
    }
    Ok(record)
}

/// Step 4: receipt of the record plus origin of the decision.
pub fn step4_submit_decision(
    consumer: &KeyedIdentity,
    decision: &Decision,
    received: &SignedEnvelope,
) -> (SignedEnvelope, SignedEnvelope) {
    let receipt = sign(
        consumer,
        PayloadKind::AccountingRecordMsg,
        TokenKind::Nrr,
        received.sequence,
        received.digest().to_vec(),
    );
    let origin = sign(
        consumer,
        PayloadKind::DecisionMsg,
        TokenKind::Nro,
        decision.interval_index,
        decision.to_canonical_bytes(),
    );
    (receipt, origin)
}

fn check_receipt(receipt: &SignedEnvelope, acknowledged: &SignedEnvelope) -> Result<(), NrError> {
    if receipt.sequence != acknowledged.sequence {
        return Err(NrError::WrongSequence {
            expected: acknowledged.sequence,
            found: receipt.sequence,
        });
    }
    if receipt.payload != acknowledged.digest() {
        return Err(NrError::DanglingReceipt);
    }
    Ok(())
}

/// Validates the consumer's `NRR(SR)` and `NRO(decn)` against the proposal
/// they answer, returning the decision.
pub fn validate_decision(
    proposal: &SignedEnvelope,
    receipt: &SignedEnvelope,
    origin: &SignedEnvelope,
    consumer_id: &str,
    consumer_key: &VerificationKey,
) -> Result<Decision, NrError> {
    expect_token(
        receipt,
        PayloadKind::AccountingRecordMsg,
        TokenKind::Nrr,
        consumer_id,
        consumer_key,
    )?;
    check_receipt(receipt, proposal)?;
    expect_token(
        origin,
        PayloadKind::DecisionMsg,
        TokenKind::Nro,
        consumer_id,
        consumer_key,
    )?;
    let decision = Decision::from_canonical_bytes(&origin.payload)?;
    if decision.interval_index != proposal.sequence || origin.sequence != proposal.sequence {
        return Err(NrError::DecisionMismatch {
            expected: proposal.sequence,
            found: decision.interval_index,
        });
    }
    Ok(decision)
}

/// Step 5: the provider validates the decision and acknowledges it.
pub fn step5_ack(
    provider: &KeyedIdentity,
    proposal: &SignedEnvelope,
    receipt: &SignedEnvelope,
    origin: &SignedEnvelope,
    consumer_id: &str,
    consumer_key: &VerificationKey,
) -> Result<(Decision, SignedEnvelope), NrError> {
    let decision = validate_decision(proposal, receipt, origin, consumer_id, consumer_key)?;
    let ack = sign(
        provider,
        PayloadKind::DecisionMsg,
        TokenKind::Nrr,
        origin.sequence,
        origin.digest().to_vec(),
    );
    Ok((decision, ack))
}

/// Consumer-side check of the closing `NRR(decn)`.
pub fn validate_ack(
    ack: &SignedEnvelope,
    origin: &SignedEnvelope,
    provider_id: &str,
    provider_key: &VerificationKey,
) -> Result<(), NrError> {
    expect_token(
        ack,
        PayloadKind::DecisionMsg,
        TokenKind::Nrr,
        provider_id,
        provider_key,
    )?;
    check_receipt(ack, origin)
}

/// The public half of both parties' credentials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartyKeys {
    pub consumer_id: String,
    pub consumer: VerificationKey,
    pub provider_id: String,
    pub provider: VerificationKey,
}

impl PartyKeys {
    pub fn of(consumer: &KeyedIdentity, provider: &KeyedIdentity) -> Self {
        Self {
            consumer_id: consumer.party_id.clone(),
            consumer: consumer.verification_key(),
            provider_id: provider.party_id.clone(),
            provider: provider.verification_key(),
        }
    }

    pub fn key_of(&self, signer: &str) -> Option<&VerificationKey> {
        if signer == self.consumer_id {
            Some(&self.consumer)
        } else if signer == self.provider_id {
            Some(&self.provider)
        } else {
            None
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "{}\t{}\n{}\t{}\n",
            self.consumer_id, self.consumer, self.provider_id, self.provider
        )
    }

    /// Parses two `party_id <TAB> key` lines, consumer first.
    pub fn parse(text: &str) -> Result<Self, String> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        if lines.len() != 2 {
            return Err(format!("expected 2 key lines, found {}", lines.len()));
        }
        let parse_line = |line: &str| -> Result<(String, VerificationKey), String> {
            let (id, key) = line.split_once('\t').ok_or("missing tab")?;
            Ok((id.to_string(), key.parse()?))
        };
        let (consumer_id, consumer) = parse_line(lines[0])?;
        let (provider_id, provider) = parse_line(lines[1])?;
        if consumer_id == provider_id {
            return Err("both keys belong to the same party".to_string());
        }
        Ok(Self {
            consumer_id,
            consumer,
            provider_id,
            provider,
        })
    }
}

/// Checks a complete four-token chain: `NRO(SR)`, `NRR(SR)`, `NRO(decn)`,
/// `NRR(decn)`, in that order.
pub fn verify_chain(
    chain: &[SignedEnvelope],
    keys: &PartyKeys,
) -> Result<(AccountingRecord, Decision), NrError> {
    let [proposal, receipt, origin, ack] = chain else {
        return Err(NrError::WrongToken {
            expected: "four-token chain".to_string(),
            found: format!("{} tokens", chain.len()),
        });
    };
    let record = step2_validate_deliver(proposal, &keys.provider_id, &keys.provider)?;
    let decision = validate_decision(proposal, receipt, origin, &keys.consumer_id, &keys.consumer)?;
    validate_ack(ack, origin, &keys.provider_id, &keys.provider)?;
    Ok((record, decision))
}

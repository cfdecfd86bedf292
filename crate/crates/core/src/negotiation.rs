//! Comparison and conflict resolution between the two accounting services.
//!
//! Both sides are sans-IO state machines: they consume one [`Wire`] message
//! at a time and return the messages to send. [`run_interval`] pumps them
//! over a [`Transport`]; the same machines can be driven from two threads.
//!
//! Negotiation runs in rounds. The consumer sends its parameters, the
//! provider answers with its own and the set of parameters that differ.
//! The provider is authoritative: the consumer adopts the provider's interval
//! bounds from round 1 and its transmission time from round 2, recomputing
//! its record after every response. The provider stops the negotiation when
//! nothing is left to exchange or the round budget is spent.

use std::collections::VecDeque;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::accounting::{
    consumer_consumption, provider_consumption, tt_average, AccountingError, AccountingParams,
    AccountingRecord, ConsumptionInterval, FsConfig, MeterRecord, Millis, Party,
};
use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::nr::{
    self, Decision, DecisionValue, Digest32, KeyedIdentity, PartyKeys, SignedEnvelope,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NegotiationError {
    #[error("records are for intervals {consumer} and {provider}")]
    IntervalMismatch { consumer: u64, provider: u64 },
    #[error("cannot start interval {index} while in state {state:?}")]
    Busy { index: u64, state: &'static str },
    #[error(transparent)]
    Accounting(#[from] AccountingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConflictKind {
    IntervalBounds,
    TransmissionTime,
}

/// A set of [`ConflictKind`]s.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Conflicts(u8);

impl Conflicts {
    const BOUNDS: u8 = 0b01;
    const TT: u8 = 0b10;

    pub fn empty() -> Self {
        Self(0)
    }

    fn bit(kind: ConflictKind) -> u8 {
        match kind {
            ConflictKind::IntervalBounds => Self::BOUNDS,
            ConflictKind::TransmissionTime => Self::TT,
        }
    }

    pub fn insert(&mut self, kind: ConflictKind) {
        self.0 |= Self::bit(kind);
    }

    pub fn contains(&self, kind: ConflictKind) -> bool {
        self.0 & Self::bit(kind) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = ConflictKind> + '_ {
        [ConflictKind::IntervalBounds, ConflictKind::TransmissionTime]
            .into_iter()
            .filter(|k| self.contains(*k))
    }

    pub fn between(consumer: &AccountingParams, provider: &AccountingParams) -> Self {
        let mut c = Self::empty();
        if !consumer.same_bounds(provider) {
            c.insert(ConflictKind::IntervalBounds);
        }
        if consumer.transmission_time() != provider.transmission_time() {
            c.insert(ConflictKind::TransmissionTime);
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NegotiationRequest {
    pub interval_index: u64,
    pub consumer_params: AccountingParams,
    pub counter: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NegotiationResponse {
    pub interval_index: u64,
    pub provider_params: AccountingParams,
    pub counter: u32,
    pub conflicting: Conflicts,
    pub stop: bool,
}

/// One request/response pair of a negotiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Round {
    pub request: NegotiationRequest,
    pub response: NegotiationResponse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FailureReason {
    /// A token failed validation.
    Tamper,
    Timeout,
    /// Out-of-order counter or unexpected message.
    ProtocolError,
    /// Nothing left to exchange but the records still differ.
    UnexplainedDivergence,
    BudgetExhausted,
}

impl FailureReason {
    pub const ALL: [FailureReason; 5] = [
        FailureReason::Tamper,
        FailureReason::Timeout,
        FailureReason::ProtocolError,
        FailureReason::UnexplainedDivergence,
        FailureReason::BudgetExhausted,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FailureReason::Tamper => "tamper",
            FailureReason::Timeout => "timeout",
            FailureReason::ProtocolError => "protocol-error",
            FailureReason::UnexplainedDivergence => "unexplained-divergence",
            FailureReason::BudgetExhausted => "budget-exhausted",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            FailureReason::Tamper => 1,
            FailureReason::Timeout => 2,
            FailureReason::ProtocolError => 3,
            FailureReason::UnexplainedDivergence => 4,
            FailureReason::BudgetExhausted => 5,
        }
    }
}

impl std::str::FromStr for FailureReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown failure reason {s:?}"))
    }
}

impl Canonical for FailureReason {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(self.tag());
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let tag = dec.u8()?;
        Self::ALL
            .into_iter()
            .find(|r| r.tag() == tag)
            .ok_or(DecodeError::InvalidTag {
                what: "failure reason",
                tag,
            })
    }
}

impl Canonical for Conflicts {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(self.0);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            tag @ 0..=3 => Ok(Self(tag)),
            tag => Err(DecodeError::InvalidTag {
                what: "conflict set",
                tag,
            }),
        }
    }
}

impl Canonical for NegotiationRequest {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.interval_index)
            .put(&self.consumer_params)
            .u32(self.counter);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            interval_index: dec.u64()?,
            consumer_params: dec.get()?,
            counter: dec.u32()?,
        })
    }
}

impl Canonical for NegotiationResponse {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.interval_index)
            .put(&self.provider_params)
            .u32(self.counter)
            .put(&self.conflicting)
            .u8(self.stop as u8);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            interval_index: dec.u64()?,
            provider_params: dec.get()?,
            counter: dec.u32()?,
            conflicting: dec.get()?,
            stop: match dec.u8()? {
                0 => false,
                1 => true,
                tag => {
                    return Err(DecodeError::InvalidTag {
                        what: "stop flag",
                        tag,
                    })
                }
            },
        })
    }
}

impl Canonical for Round {
    fn encode(&self, enc: &mut Encoder) {
        enc.put(&self.request).put(&self.response);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            request: dec.get()?,
            response: dec.get()?,
        })
    }
}

pub fn transcript_digest(transcript: &[Round]) -> Digest32 {
    let mut enc = Encoder::new();
    enc.seq(transcript);
    Sha256::digest(enc.finish()).into()
}

/// Counters start at zero, each response answers its request with
/// `counter + 1`, and the next request carries that value.
pub fn transcript_is_monotone(transcript: &[Round]) -> bool {
    transcript.iter().enumerate().all(|(i, r)| {
        r.request.counter == i as u32
            && r.response.counter == r.request.counter + 1
            && r.response.interval_index == r.request.interval_index
    })
}

/// Messages exchanged between the two accounting services.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Wire {
    /// Step 1, `NRO(SR)`.
    Record(SignedEnvelope),
    Request(NegotiationRequest),
    Response(NegotiationResponse),
    /// Step 4, `NRR(SR)` and `NRO(decn)`.
    Decision {
        receipt: SignedEnvelope,
        origin: SignedEnvelope,
    },
    /// Step 5, `NRR(decn)`.
    Ack(SignedEnvelope),
    Abort {
        interval_index: u64,
        reason: FailureReason,
    },
}

impl Canonical for Wire {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Wire::Record(env) => enc.u8(1).put(env),
            Wire::Request(req) => enc.u8(2).put(req),
            Wire::Response(resp) => enc.u8(3).put(resp),
            Wire::Decision { receipt, origin } => enc.u8(4).put(receipt).put(origin),
            Wire::Ack(env) => enc.u8(5).put(env),
            Wire::Abort {
                interval_index,
                reason,
            } => enc.u8(6).u64(*interval_index).put(reason),
        };
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(match dec.u8()? {
            1 => Wire::Record(dec.get()?),
            2 => Wire::Request(dec.get()?),
            3 => Wire::Response(dec.get()?),
            4 => Wire::Decision {
                receipt: dec.get()?,
                origin: dec.get()?,
            },
            5 => Wire::Ack(dec.get()?),
            6 => Wire::Abort {
                interval_index: dec.u64()?,
                reason: dec.get()?,
            },
            tag => {
                return Err(DecodeError::InvalidTag {
                    what: "wire message",
                    tag,
                })
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolConfig {
    /// Largest storage difference still accepted as a match.
    pub tolerance: u64,
    pub max_rounds: u32,
    /// Idle driver steps before a waiting party gives up.
    pub timeout_steps: u32,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            tolerance: 0,
            max_rounds: 3,
            timeout_steps: 8,
        }
    }
}

pub fn compare(
    consumer: &AccountingRecord,
    provider: &AccountingRecord,
    tolerance: u64,
) -> Result<DecisionValue, NegotiationError> {
    if consumer.interval_index != provider.interval_index {
        return Err(NegotiationError::IntervalMismatch {
            consumer: consumer.interval_index,
            provider: provider.interval_index,
        });
    }
    Ok(
        if consumer
            .storage_consumed
            .abs_diff(provider.storage_consumed)
            <= tolerance
        {
            DecisionValue::Yes
        } else {
            DecisionValue::No
        },
    )
}

/// The provider's answer to a negotiation request.
pub fn provider_handle(
    req: &NegotiationRequest,
    provider_params: &AccountingParams,
    max_rounds: u32,
) -> NegotiationResponse {
    let conflicting = Conflicts::between(&req.consumer_params, provider_params);
    NegotiationResponse {
        interval_index: req.interval_index,
        provider_params: *provider_params,
        counter: req.counter + 1,
        conflicting,
        stop: req.counter + 1 >= max_rounds || conflicting.is_empty(),
    }
}

/// Adopts the provider's conflicting parameters and recomputes the
/// consumer's record. Interval bounds are taken from round 1 on, the
/// transmission time only from round 2 on.
pub fn consumer_apply(
    resp: &NegotiationResponse,
    working: &AccountingParams,
    records: &[MeterRecord],
    cfg: &FsConfig,
) -> (AccountingParams, AccountingRecord) {
    let mut params = *working;
    if resp.conflicting.contains(ConflictKind::IntervalBounds) {
        params = params.with_bounds_of(&resp.provider_params);
    }
    if resp.conflicting.contains(ConflictKind::TransmissionTime) && resp.counter >= 2 {
        params = params
            .with_transmission_time(resp.provider_params.transmission_time())
            .expect("provider params are valid");
    }
    let record = consumer_consumption(records, resp.interval_index, &params, cfg);
    (params, record)
}

/// Everything one interval's exchange produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntervalOutcome {
    pub interval_index: u64,
    pub decision: Option<Decision>,
    pub failure: Option<FailureReason>,
    pub provider_record: Option<AccountingRecord>,
    /// The consumer's record before any negotiation.
    pub consumer_initial: Option<AccountingRecord>,
    /// The consumer's record under the final parameters.
    pub consumer_record: Option<AccountingRecord>,
    /// Valid tokens collected, in exchange order.
    pub envelopes: Vec<SignedEnvelope>,
    pub transcript: Vec<Round>,
    pub comparator_invocations: u32,
}

impl IntervalOutcome {
    fn new(interval_index: u64) -> Self {
        Self {
            interval_index,
            decision: None,
            failure: None,
            provider_record: None,
            consumer_initial: None,
            consumer_record: None,
            envelopes: Vec::new(),
            transcript: Vec::new(),
            comparator_invocations: 0,
        }
    }

    pub fn is_agreed(&self) -> bool {
        self.failure.is_none() && matches!(self.decision, Some(d) if d.value == DecisionValue::Yes)
    }

    pub fn rounds_used(&self) -> u32 {
        self.transcript.len() as u32
    }

    /// Comparator invocations made after negotiation started.
    pub fn negotiation_comparisons(&self) -> u32 {
        self.comparator_invocations.saturating_sub(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConsumerState {
    Idle,
    AwaitRecord,
    Comparing,
    AwaitResponse,
    Deciding,
    Done,
}

impl ConsumerState {
    pub fn can_advance_to(self, next: ConsumerState) -> bool {
        use ConsumerState::*;
        matches!(
            (self, next),
            (Idle | Done, AwaitRecord)
                | (AwaitRecord, Comparing)
                | (Comparing, AwaitResponse | Deciding)
                | (AwaitResponse, Comparing | Deciding)
                | (AwaitRecord | Comparing | AwaitResponse | Deciding, Done)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProviderState {
    Idle,
    AwaitRequest,
    Deciding,
    Done,
}

impl ProviderState {
    pub fn can_advance_to(self, next: ProviderState) -> bool {
        use ProviderState::*;
        matches!(
            (self, next),
            (Idle | Done, AwaitRequest)
                | (AwaitRequest, Deciding)
                | (AwaitRequest | Deciding, Done)
        )
    }
}

struct ConsumerSession {
    interval: ConsumptionInterval,
    working: AccountingParams,
    proposal: Option<SignedEnvelope>,
    decision_origin: Option<SignedEnvelope>,
    pending: Option<NegotiationRequest>,
    last_value: DecisionValue,
    outcome: IntervalOutcome,
}

/// The consumer's accounting service: manager with negotiator, accounting
/// service and comparator over the consumer's meter log.
pub struct ConsumerRas<'a> {
    identity: KeyedIdentity,
    keys: PartyKeys,
    records: &'a [MeterRecord],
    cfg: FsConfig,
    config: ProtocolConfig,
    state: ConsumerState,
    session: Option<ConsumerSession>,
}

impl<'a> ConsumerRas<'a> {
    pub fn new(
        identity: KeyedIdentity,
        keys: PartyKeys,
        records: &'a [MeterRecord],
        cfg: FsConfig,
        config: ProtocolConfig,
    ) -> Self {
        Self {
            identity,
            keys,
            records,
            cfg,
            config,
            state: ConsumerState::Idle,
            session: None,
        }
    }

    pub fn state(&self) -> ConsumerState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state == ConsumerState::Done
    }

    fn advance(&mut self, next: ConsumerState) {
        assert!(
            self.state.can_advance_to(next),
            "consumer: illegal transition {:?} -> {:?}",
            self.state,
            next
        );
        self.state = next;
    }

    pub fn begin_interval(
        &mut self,
        interval: ConsumptionInterval,
    ) -> Result<(), NegotiationError> {
        if !matches!(self.state, ConsumerState::Idle | ConsumerState::Done) {
            return Err(NegotiationError::Busy {
                index: interval.index(),
                state: "consumer busy",
            });
        }
        self.session = Some(ConsumerSession {
            interval,
            working: AccountingParams::from_interval(&interval, 0)?,
            proposal: None,
            decision_origin: None,
            pending: None,
            last_value: DecisionValue::No,
            outcome: IntervalOutcome::new(interval.index()),
        });
        self.advance(ConsumerState::AwaitRecord);
        Ok(())
    }

    fn session(&mut self) -> &mut ConsumerSession {
        self.session.as_mut().expect("no interval in progress")
    }

    fn finish(&mut self, failure: Option<FailureReason>) {
        let s = self.session();
        if s.outcome.failure.is_none() {
            s.outcome.failure = failure;
        }
        self.advance(ConsumerState::Done);
    }

    fn abort(&mut self, reason: FailureReason) -> Vec<Wire> {
        let interval_index = self.session().interval.index();
        self.finish(Some(reason));
        vec![Wire::Abort {
            interval_index,
            reason,
        }]
    }

    /// Gives up waiting. Has no effect once the interval is done.
    pub fn on_timeout(&mut self) {
        if self.session.is_some() && self.state != ConsumerState::Done {
            self.finish(Some(FailureReason::Timeout));
        }
    }

    pub fn take_outcome(&mut self) -> Option<IntervalOutcome> {
        if self.state != ConsumerState::Done {
            return None;
        }
        self.session.take().map(|s| s.outcome)
    }

    pub fn handle(&mut self, msg: Wire) -> Vec<Wire> {
        match (self.state, msg) {
            (ConsumerState::AwaitRecord, Wire::Record(env)) => self.on_record(env),
            (ConsumerState::AwaitResponse, Wire::Response(resp)) => self.on_response(resp),
            (ConsumerState::Deciding, Wire::Ack(env)) => self.on_ack(env),
            (ConsumerState::Done, _) | (ConsumerState::Idle, _) => Vec::new(),
            (_, Wire::Abort { reason, .. }) => {
                self.finish(Some(reason));
                Vec::new()
            }
            _ => self.abort(FailureReason::ProtocolError),
        }
    }

    fn on_record(&mut self, env: SignedEnvelope) -> Vec<Wire> {
        let record =
            match nr::step2_validate_deliver(&env, &self.keys.provider_id, &self.keys.provider) {
                Ok(record) => record,
                Err(_) => return self.abort(FailureReason::Tamper),
            };
        let (records, cfg) = (self.records, self.cfg);
        let s = self.session();
        if record.interval_index != s.interval.index() {
            return self.abort(FailureReason::ProtocolError);
        }
        s.outcome.provider_record = Some(record);
        s.outcome.envelopes.push(env.clone());
        s.proposal = Some(env);
        let own = consumer_consumption(records, s.interval.index(), &s.working, &cfg);
        s.outcome.consumer_initial = Some(own);
        self.advance(ConsumerState::Comparing);
        self.evaluate(own)
    }

    fn evaluate(&mut self, own: AccountingRecord) -> Vec<Wire> {
        let tolerance = self.config.tolerance;
        let s = self.session();
        let provider = s.outcome.provider_record.expect("record delivered");
        let value = compare(&own, &provider, tolerance).expect("same interval");
        s.outcome.consumer_record = Some(own);
        s.outcome.comparator_invocations += 1;
        s.last_value = value;
        match value {
            DecisionValue::Yes => self.decide(None),
            DecisionValue::No => {
                let req = NegotiationRequest {
                    interval_index: s.interval.index(),
                    consumer_params: s.working,
                    counter: s.outcome.transcript.len() as u32,
                };
                s.pending = Some(req);
                self.advance(ConsumerState::AwaitResponse);
                vec![Wire::Request(req)]
            }
        }
    }

    fn decide(&mut self, failure: Option<FailureReason>) -> Vec<Wire> {
        let identity = self.identity.clone();
        let s = self.session();
        s.outcome.failure = failure;
        let decision = Decision {
            interval_index: s.interval.index(),
            value: s.last_value,
            final_params: s.working,
            rounds_used: s.outcome.transcript.len() as u32,
            transcript_digest: transcript_digest(&s.outcome.transcript),
        };
        let proposal = s.proposal.as_ref().expect("record delivered");
        let (receipt, origin) = nr::step4_submit_decision(&identity, &decision, proposal);
        s.outcome.decision = Some(decision);
        s.outcome.envelopes.push(receipt.clone());
        s.outcome.envelopes.push(origin.clone());
        s.decision_origin = Some(origin.clone());
        self.advance(ConsumerState::Deciding);
        vec![Wire::Decision { receipt, origin }]
    }

    fn on_response(&mut self, resp: NegotiationResponse) -> Vec<Wire> {
        let (records, cfg) = (self.records, self.cfg);
        let s = self.session();
        let req = s.pending.take().expect("request outstanding");
        if resp.interval_index != req.interval_index || resp.counter != req.counter + 1 {
            return self.abort(FailureReason::ProtocolError);
        }
        s.outcome.transcript.push(Round {
            request: req,
            response: resp,
        });
        if resp.stop {
            let reason = if resp.conflicting.is_empty() {
                FailureReason::UnexplainedDivergence
            } else {
                FailureReason::BudgetExhausted
            };
            return self.decide(Some(reason));
        }
        let (params, own) = consumer_apply(&resp, &s.working, records, &cfg);
        s.working = params;
        self.advance(ConsumerState::Comparing);
        self.evaluate(own)
    }

    fn on_ack(&mut self, env: SignedEnvelope) -> Vec<Wire> {
        let origin = self
            .session()
            .decision_origin
            .clone()
            .expect("decision sent");
        match nr::validate_ack(&env, &origin, &self.keys.provider_id, &self.keys.provider) {
            Ok(()) => {
                self.session().outcome.envelopes.push(env);
                let failure = self.session().outcome.failure;
                self.finish(failure);
                Vec::new()
            }
            Err(_) => {
                self.finish(Some(FailureReason::Tamper));
                Vec::new()
            }
        }
    }
}

struct ProviderSession {
    record: AccountingRecord,
    proposal: SignedEnvelope,
    expected_counter: u32,
    transcript: Vec<Round>,
    decision: Option<Decision>,
    failure: Option<FailureReason>,
}

/// What the provider concluded about one interval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderView {
    pub record: AccountingRecord,
    pub decision: Option<Decision>,
    pub failure: Option<FailureReason>,
    pub transcript: Vec<Round>,
}

/// The provider's accounting service over the provider's meter log.
pub struct ProviderRas<'a> {
    identity: KeyedIdentity,
    keys: PartyKeys,
    records: &'a [MeterRecord],
    cfg: FsConfig,
    config: ProtocolConfig,
    state: ProviderState,
    /// Average transmission time of the last non-empty interval.
    carried_tt: Millis,
    session: Option<ProviderSession>,
}

impl<'a> ProviderRas<'a> {
    pub fn new(
        identity: KeyedIdentity,
        keys: PartyKeys,
        records: &'a [MeterRecord],
        cfg: FsConfig,
        config: ProtocolConfig,
    ) -> Self {
        Self {
            identity,
            keys,
            records,
            cfg,
            config,
            state: ProviderState::Idle,
            carried_tt: 0,
            session: None,
        }
    }

    /// Starts from a transmission time carried over from earlier intervals.
    pub fn with_carried_tt(mut self, tt: Millis) -> Self {
        self.carried_tt = tt;
        self
    }

    pub fn carried_tt(&self) -> Millis {
        self.carried_tt
    }

    pub fn state(&self) -> ProviderState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state == ProviderState::Done
    }

    fn advance(&mut self, next: ProviderState) {
        assert!(
            self.state.can_advance_to(next),
            "provider: illegal transition {:?} -> {:?}",
            self.state,
            next
        );
        self.state = next;
    }

    /// Average transmission time over the requests received inside the
    /// interval, or the previous interval's value when none arrived.
    pub fn interval_tt(
        &mut self,
        interval: &ConsumptionInterval,
    ) -> Result<Millis, AccountingError> {
        let inside: Vec<MeterRecord> = self
            .records
            .iter()
            .filter(|r| {
                r.request_received_time
                    .is_some_and(|t| interval.contains(t))
            })
            .cloned()
            .collect();
        match tt_average(&inside) {
            Ok(tt) => {
                self.carried_tt = tt;
                Ok(tt)
            }
            Err(AccountingError::EmptyInput) => Ok(self.carried_tt),
            Err(e) => Err(e),
        }
    }

    /// Computes `SR_p` for the interval and emits `NRO(SR_p)`.
    pub fn begin_interval(
        &mut self,
        interval: ConsumptionInterval,
    ) -> Result<Vec<Wire>, NegotiationError> {
        if !matches!(self.state, ProviderState::Idle | ProviderState::Done) {
            return Err(NegotiationError::Busy {
                index: interval.index(),
                state: "provider busy",
            });
        }
        let tt = self.interval_tt(&interval)?;
        let params = AccountingParams::from_interval(&interval, tt)?;
        let record = provider_consumption(self.records, interval.index(), &params, &self.cfg)?;
        let proposal = nr::step1_propose(&self.identity, &record);
        self.session = Some(ProviderSession {
            record,
            proposal: proposal.clone(),
            expected_counter: 0,
            transcript: Vec::new(),
            decision: None,
            failure: None,
        });
        self.advance(ProviderState::AwaitRequest);
        Ok(vec![Wire::Record(proposal)])
    }

    fn session(&mut self) -> &mut ProviderSession {
        self.session.as_mut().expect("no interval in progress")
    }

    fn abort(&mut self, reason: FailureReason) -> Vec<Wire> {
        let s = self.session();
        s.failure = Some(reason);
        let interval_index = s.record.interval_index;
        self.advance(ProviderState::Done);
        vec![Wire::Abort {
            interval_index,
            reason,
        }]
    }

    pub fn on_timeout(&mut self) {
        if self.session.is_some() && self.state != ProviderState::Done {
            self.session().failure = Some(FailureReason::Timeout);
            self.advance(ProviderState::Done);
        }
    }

    pub fn view(&self) -> Option<ProviderView> {
        self.session.as_ref().map(|s| ProviderView {
            record: s.record,
            decision: s.decision,
            failure: s.failure,
            transcript: s.transcript.clone(),
        })
    }

    pub fn handle(&mut self, msg: Wire) -> Vec<Wire> {
        match (self.state, msg) {
            (ProviderState::AwaitRequest, Wire::Request(req)) => self.on_request(req),
            (ProviderState::AwaitRequest, Wire::Decision { receipt, origin }) => {
                self.on_decision(receipt, origin)
            }
            (ProviderState::Done, _) | (ProviderState::Idle, _) => Vec::new(),
            (_, Wire::Abort { reason, .. }) => {
                self.session().failure = Some(reason);
                self.advance(ProviderState::Done);
                Vec::new()
            }
            _ => self.abort(FailureReason::ProtocolError),
        }
    }

    fn on_request(&mut self, req: NegotiationRequest) -> Vec<Wire> {
        let max_rounds = self.config.max_rounds;
        let s = self.session();
        if req.interval_index != s.record.interval_index || req.counter != s.expected_counter {
            return self.abort(FailureReason::ProtocolError);
        }
        let resp = provider_handle(&req, &s.record.params, max_rounds);
        s.expected_counter = resp.counter;
        s.transcript.push(Round {
            request: req,
            response: resp,
        });
        vec![Wire::Response(resp)]
    }

    fn on_decision(&mut self, receipt: SignedEnvelope, origin: SignedEnvelope) -> Vec<Wire> {
        self.advance(ProviderState::Deciding);
        let identity = self.identity.clone();
        let (consumer_id, consumer_key) =
            (self.keys.consumer_id.clone(), self.keys.consumer.clone());
        let s = self.session();
        match nr::step5_ack(
            &identity,
            &s.proposal,
            &receipt,
            &origin,
            &consumer_id,
            &consumer_key,
        ) {
            Ok((decision, ack))
                if decision.transcript_digest == transcript_digest(&s.transcript) =>
            {
                s.decision = Some(decision);
                self.advance(ProviderState::Done);
                vec![Wire::Ack(ack)]
            }
            Ok(_) => self.abort(FailureReason::ProtocolError),
            Err(_) => self.abort(FailureReason::Tamper),
        }
    }
}

/// Message passing between the two services.
pub trait Transport {
    fn send(&mut self, to: Party, msg: Wire);
    fn recv(&mut self, at: Party) -> Option<Wire>;
}

#[derive(Debug, Default)]
pub struct InMemoryTransport {
    to_consumer: VecDeque<Wire>,
    to_provider: VecDeque<Wire>,
}

impl InMemoryTransport {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Transport for InMemoryTransport {
    fn send(&mut self, to: Party, msg: Wire) {
        match to {
            Party::Consumer => self.to_consumer.push_back(msg),
            Party::Provider => self.to_provider.push_back(msg),
        }
    }

    fn recv(&mut self, at: Party) -> Option<Wire> {
        match at {
            Party::Consumer => self.to_consumer.pop_front(),
            Party::Provider => self.to_provider.pop_front(),
        }
    }
}

/// Wraps a transport and passes every outgoing message through `fault`,
/// which may rewrite it or drop it by returning `None`.
pub struct FaultyTransport<T, F> {
    inner: T,
    fault: F,
}

impl<T: Transport, F: FnMut(Party, Wire) -> Option<Wire>> FaultyTransport<T, F> {
    pub fn new(inner: T, fault: F) -> Self {
        Self { inner, fault }
    }
}

impl<T: Transport, F: FnMut(Party, Wire) -> Option<Wire>> Transport for FaultyTransport<T, F> {
    fn send(&mut self, to: Party, msg: Wire) {
        if let Some(msg) = (self.fault)(to, msg) {
            self.inner.send(to, msg);
        }
    }

    fn recv(&mut self, at: Party) -> Option<Wire> {
        self.inner.recv(at)
    }
}

/// Runs the full exchange for one interval: the provider proposes its record
/// for `provider_interval`, the consumer compares against its own
/// `consumer_interval` and negotiates until agreement, a stop, or timeout.
pub fn run_interval<T: Transport>(
    consumer: &mut ConsumerRas<'_>,
    provider: &mut ProviderRas<'_>,
    consumer_interval: ConsumptionInterval,
    provider_interval: ConsumptionInterval,
    transport: &mut T,
) -> Result<IntervalOutcome, NegotiationError> {
    if consumer_interval.index() != provider_interval.index() {
        return Err(NegotiationError::IntervalMismatch {
            consumer: consumer_interval.index(),
            provider: provider_interval.index(),
        });
    }
    let timeout_steps = consumer.config.timeout_steps.max(1);
    consumer.begin_interval(consumer_interval)?;
    for msg in provider.begin_interval(provider_interval)? {
        transport.send(Party::Consumer, msg);
    }
    let mut idle = 0;
    while !(consumer.is_done() && provider.is_done()) {
        let mut progressed = false;
        while let Some(msg) = transport.recv(Party::Consumer) {
            progressed = true;
            for out in consumer.handle(msg) {
                transport.send(Party::Provider, out);
            }
        }
        while let Some(msg) = transport.recv(Party::Provider) {
            progressed = true;
            for out in provider.handle(msg) {
                transport.send(Party::Consumer, out);
            }
        }
        if progressed {
            idle = 0;
            continue;
        }
        idle += 1;
        if idle >= timeout_steps {
            consumer.on_timeout();
            provider.on_timeout();
        }
    }
    Ok(consumer.take_outcome().expect("consumer finished"))
}

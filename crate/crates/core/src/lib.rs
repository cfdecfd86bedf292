//! Collaborative consumption recording for cloud storage.
//!
//! A storage consumer and a storage provider each meter the same upload
//! traffic independently, compute per-interval storage consumption, compare
//! the two figures and, when they differ, negotiate the accounting
//! parameters until they agree. Every step of the exchange is backed by
//! signed non-repudiation tokens kept in evidence stores.

pub mod accounting;
pub mod codec;
pub mod evidence;
pub mod metering;
pub mod negotiation;
pub mod nr;
pub mod output;
pub mod simulator;

pub use accounting::{
    AccountingError, AccountingParams, AccountingRecord, ClockField, ConsumptionInterval, FsConfig,
    MeterRecord, Millis, Party,
};
pub use evidence::{EntryStatus, EvidenceEntry, EvidenceError, EvidenceStore, StoreKind};
pub use metering::{MeterLog, MeteringError, UploadRequest};
pub use negotiation::{
    ConsumerRas, FailureReason, IntervalOutcome, NegotiationRequest, NegotiationResponse,
    ProtocolConfig, ProviderRas, Round, Transport, Wire,
};
pub use nr::{Backend, Decision, DecisionValue, KeyedIdentity, PartyKeys, SignedEnvelope};
pub use simulator::{RunReport, Scenario, SimulationRun};

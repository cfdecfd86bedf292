//! Deterministic discrete-event harness.
//!
//! Workloads and delays come from ChaCha8 seeded with the scenario seed:
//! stream 0 drives the workload, stream 1 the delays. A uniform draw over
//! `[lo, hi]` is `lo + next_u64() % (hi - lo + 1)`. An exponential gap with
//! mean `m` is `floor(-ln(1 - u) * m)` with `u = (next_u64() >> 11) * 2^-53`.
//!
//! Both schedules cover `[0, duration + max_delay)`; the tail past
//! `duration` is a grace window for requests still in flight at the end.

use std::fmt::Write as _;
use std::str::FromStr;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::accounting::{
    AccountingError, AccountingParams, ConsumptionInterval, FsConfig, Millis, Party,
};
use crate::evidence::{EvidenceError, EvidenceStore};
use crate::metering::{
    intercept_consumer, intercept_provider, MeterLog, MeteringError, UploadRequest,
};
use crate::negotiation::{
    run_interval, ConsumerRas, FailureReason, InMemoryTransport, IntervalOutcome, NegotiationError,
    ProtocolConfig, ProviderRas,
};
use crate::nr::{Backend, DecisionValue, KeyedIdentity, PartyKeys};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("scenario line {line}: {message}")]
    Scenario { line: usize, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Metering(#[from] MeteringError),
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error(transparent)]
    Negotiation(#[from] NegotiationError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestRate {
    Fixed(u64),
    MeanInterarrival(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeDistribution {
    Fixed(u64),
    Uniform { lo: u64, hi: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelayModel {
    Zero,
    Constant(u64),
    Uniform { lo: u64, hi: u64 },
}

impl DelayModel {
    pub fn max_delay(&self) -> u64 {
        match *self {
            DelayModel::Zero => 0,
            DelayModel::Constant(d) => d,
            DelayModel::Uniform { hi, .. } => hi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProviderSchedule {
    pub length: u64,
    pub phase: u64,
}

/// Same boundary count as the provider, each boundary shifted by `offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConsumerSchedule {
    pub length: u64,
    pub offset: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub seed: u64,
    pub duration_ms: u64,
    pub request_rate: RequestRate,
    pub size_distribution: SizeDistribution,
    pub delay_model: DelayModel,
    pub fs_config: FsConfig,
    pub provider_schedule: ProviderSchedule,
    pub consumer_schedule: ConsumerSchedule,
    pub tolerance: u64,
    pub max_rounds: u32,
    pub signature_backend: Backend,
    pub timeout_steps: u32,
    pub users: u64,
}

const KEYS: [&str; 13] = [
    "seed",
    "duration_ms",
    "request_rate",
    "size_distribution",
    "delay_model",
    "fs_config",
    "provider_schedule",
    "consumer_schedule",
    "tolerance",
    "max_rounds",
    "signature_backend",
    "timeout_steps",
    "users",
];

fn num<T: FromStr>(s: &str) -> Result<T, String> {
    let s = s.trim();
    s.parse().map_err(|_| format!("bad number {s:?}"))
}

fn pair<T: FromStr>(s: &str) -> Result<(T, T), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected lo,hi in {s:?}"))?;
    Ok((num(a)?, num(b)?))
}

/// Splits `a=1,b=2` or `a:1,b:2` into values keyed in the given order.
fn fields<'a>(s: &'a str, sep: char, names: &[&str]) -> Result<Vec<&'a str>, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != names.len() {
        return Err(format!("expected {} fields in {s:?}", names.len()));
    }
    parts
        .iter()
        .zip(names)
        .map(|(p, name)| match p.trim().split_once(sep) {
            Some((k, v)) if k.trim() == *name => Ok(v.trim()),
            _ => Err(format!("expected {name}{sep}<value> in {s:?}")),
        })
        .collect()
}

fn parse_rate(v: &str) -> Result<RequestRate, String> {
    match v.split_once(':') {
        Some(("fixed", n)) => Ok(RequestRate::Fixed(num(n)?)),
        Some(("mean_interarrival", m)) => match num(m)? {
            0 => Err("mean inter-arrival must be positive".into()),
            m => Ok(RequestRate::MeanInterarrival(m)),
        },
        _ => Err(format!("unknown request rate {v:?}")),
    }
}

fn parse_sizes(v: &str) -> Result<SizeDistribution, String> {
    match v.split_once(':') {
        Some(("fixed", n)) => Ok(SizeDistribution::Fixed(num(n)?)),
        Some(("uniform", r)) => {
            let (lo, hi) = pair(r)?;
            if lo > hi {
                return Err(format!("empty size range {lo},{hi}"));
            }
            Ok(SizeDistribution::Uniform { lo, hi })
        }
        _ => Err(format!("unknown size distribution {v:?}")),
    }
}

fn parse_delay(v: &str) -> Result<DelayModel, String> {
    match v.split_once(':') {
        None if v == "zero" => Ok(DelayModel::Zero),
        Some(("constant", d)) => Ok(DelayModel::Constant(num(d)?)),
        Some(("uniform", r)) => {
            let (lo, hi) = pair(r)?;
            if lo > hi {
                return Err(format!("empty delay range {lo},{hi}"));
            }
            Ok(DelayModel::Uniform { lo, hi })
        }
        _ => Err(format!("unknown delay model {v:?}")),
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, SimulationError> {
        let mut values: [Option<(usize, &str)>; KEYS.len()] = [None; KEYS.len()];
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| SimulationError::Scenario {
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected key=value".into()))?;
            let slot = KEYS
                .iter()
                .position(|key| *key == k.trim())
                .ok_or_else(|| err(format!("unknown key {:?}", k.trim())))?;
            if values[slot].is_some() {
                return Err(err(format!("duplicate key {:?}", KEYS[slot])));
            }
            values[slot] = Some((i + 1, v.trim()));
        }
        let get = |name: &str| -> Option<(usize, &str)> {
            values[KEYS.iter().position(|k| *k == name).unwrap()]
        };
        fn field<T>(
            v: Option<(usize, &str)>,
            name: &str,
            default: Option<T>,
            parse: impl Fn(&str) -> Result<T, String>,
        ) -> Result<T, SimulationError> {
            match (v, default) {
                (Some((line, s)), _) => {
                    parse(s).map_err(|message| SimulationError::Scenario { line, message })
                }
                (None, Some(d)) => Ok(d),
                (None, None) => Err(SimulationError::Invalid(format!("missing key {name}"))),
            }
        }
        let scenario = Scenario {
            seed: field(get("seed"), "seed", None, num)?,
            duration_ms: field(get("duration_ms"), "duration_ms", None, num)?,
            request_rate: field(get("request_rate"), "request_rate", None, parse_rate)?,
            size_distribution: field(
                get("size_distribution"),
                "size_distribution",
                None,
                parse_sizes,
            )?,
            delay_model: field(get("delay_model"), "delay_model", None, parse_delay)?,
            fs_config: field(get("fs_config"), "fs_config", None, |v| {
                let f = fields(v, '=', &["md", "chunk"])?;
                FsConfig::new(num(f[0])?, num(f[1])?).map_err(|e| e.to_string())
            })?,
            provider_schedule: field(get("provider_schedule"), "provider_schedule", None, |v| {
                let f = fields(v, ':', &["length", "phase"])?;
                Ok(ProviderSchedule {
                    length: num(f[0])?,
                    phase: num(f[1])?,
                })
            })?,
            consumer_schedule: field(get("consumer_schedule"), "consumer_schedule", None, |v| {
                let f = fields(v, ':', &["length", "offset"])?;
                Ok(ConsumerSchedule {
                    length: num(f[0])?,
                    offset: num(f[1])?,
                })
            })?,
            tolerance: field(get("tolerance"), "tolerance", Some(0), num)?,
            max_rounds: field(get("max_rounds"), "max_rounds", Some(3), num)?,
            signature_backend: field(
                get("signature_backend"),
                "signature_backend",
                Some(Backend::KeyedDigest),
                |v| v.parse(),
            )?,
            timeout_steps: field(get("timeout_steps"), "timeout_steps", Some(8), num)?,
            users: field(get("users"), "users", Some(1), num)?,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |m: &str| Err(SimulationError::Invalid(m.to_string()));
        if self.duration_ms == 0 || self.duration_ms > i64::MAX as u64 / 4 {
            return bad("duration_ms out of range");
        }
        if self.provider_schedule.length == 0 || self.consumer_schedule.length == 0 {
            return bad("interval length must be positive");
        }
        if self.provider_schedule.phase >= self.provider_schedule.length {
            return bad("provider phase must be shorter than the interval length");
        }
        if self.delay_model.max_delay() > self.duration_ms {
            return bad("delays longer than the scenario are not supported");
        }
        if self.users == 0 {
            return bad("users must be positive");
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be at least 1");
        }
        if self.timeout_steps == 0 {
            return bad("timeout_steps must be positive");
        }
        if let RequestRate::Fixed(n) = self.request_rate {
            if n > 10_000_000 {
                return bad("request count too large");
            }
        }
        self.schedules(self.horizon()).map(|_| ())
    }

    /// Every key, in a fixed order and normal form.
    pub fn to_text(&self) -> String {
        let rate = match self.request_rate {
            RequestRate::Fixed(n) => format!("fixed:{n}"),
            RequestRate::MeanInterarrival(m) => format!("mean_interarrival:{m}"),
        };
        let sizes = match self.size_distribution {
            SizeDistribution::Fixed(n) => format!("fixed:{n}"),
            SizeDistribution::Uniform { lo, hi } => format!("uniform:{lo},{hi}"),
        };
        let delay = match self.delay_model {
            DelayModel::Zero => "zero".to_string(),
            DelayModel::Constant(d) => format!("constant:{d}"),
            DelayModel::Uniform { lo, hi } => format!("uniform:{lo},{hi}"),
        };
        format!(
            "seed={}\nduration_ms={}\nrequest_rate={rate}\nsize_distribution={sizes}\ndelay_model={delay}\n\
             fs_config=md={},chunk={}\nprovider_schedule=length:{},phase:{}\nconsumer_schedule=length:{},offset:{}\n\
             tolerance={}\nmax_rounds={}\nsignature_backend={}\ntimeout_steps={}\nusers={}\n",
            self.seed,
            self.duration_ms,
            self.fs_config.metadata_bytes(),
            self.fs_config.chunk_size_bytes(),
            self.provider_schedule.length,
            self.provider_schedule.phase,
            self.consumer_schedule.length,
            self.consumer_schedule.offset,
            self.tolerance,
            self.max_rounds,
            self.signature_backend.as_str(),
            self.timeout_steps,
            self.users,
        )
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        ProtocolConfig {
            tolerance: self.tolerance,
            max_rounds: self.max_rounds,
            timeout_steps: self.timeout_steps,
        }
    }

    /// End of the last interval: the run plus room for the slowest delivery.
    pub fn horizon(&self) -> Millis {
        (self.duration_ms + self.delay_model.max_delay()) as Millis
    }

    /// Provider and consumer schedules over `[0, horizon)`.
    pub fn schedules(
        &self,
        horizon: Millis,
    ) -> Result<(Vec<ConsumptionInterval>, Vec<ConsumptionInterval>), SimulationError> {
        let duration = self.duration_ms as Millis;
        let p = self.provider_schedule;
        let c = self.consumer_schedule;
        let provider_bounds: Vec<Millis> = (0..)
            .map(|j: i64| p.phase as Millis + j * p.length as Millis)
            .skip_while(|b| *b <= 0)
            .take_while(|b| *b < duration)
            .collect();
        let first_j = if p.phase == 0 { 1 } else { 0 };
        let consumer_bounds: Vec<Millis> = (0..provider_bounds.len() as i64)
            .map(|k| p.phase as Millis + c.offset + (first_j + k) * c.length as Millis)
            .collect();
        let inside = consumer_bounds.iter().all(|b| 0 < *b && *b < horizon);
        if !inside {
            return Err(SimulationError::Invalid(
                "consumer schedule leaves the run; reduce the offset".into(),
            ));
        }
        let build = |bounds: &[Millis]| -> Result<Vec<ConsumptionInterval>, SimulationError> {
            let mut points = vec![0];
            points.extend_from_slice(bounds);
            points.push(horizon);
            points
                .windows(2)
                .enumerate()
                .map(|(i, w)| {
                    ConsumptionInterval::new(i as u64 + 1, w[0], w[1])
                        .map_err(SimulationError::from)
                })
                .collect()
        };
        Ok((build(&provider_bounds)?, build(&consumer_bounds)?))
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: u64, hi: u64) -> u64 {
    match (hi - lo).checked_add(1) {
        Some(span) => lo + rng.next_u64() % span,
        None => rng.next_u64(),
    }
}

fn unit_interval(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// The consumer's upload requests, ordered by issue time then id.
pub fn generate_workload(scenario: &Scenario) -> Vec<UploadRequest> {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let duration = scenario.duration_ms;
    let mut times: Vec<Millis> = match scenario.request_rate {
        RequestRate::Fixed(n) => {
            let mut t: Vec<Millis> = (0..n)
                .map(|_| (rng.next_u64() % duration) as Millis)
                .collect();
            t.sort_unstable();
            t
        }
        RequestRate::MeanInterarrival(mean) => {
            let mut t = Vec::new();
            let mut now: u64 = 0;
            loop {
                let gap = (-(1.0 - unit_interval(&mut rng)).ln() * mean as f64).floor() as u64;
                now = now.saturating_add(gap);
                if now >= duration {
                    break t;
                }
                t.push(now as Millis);
            }
        }
    };
    times.sort_unstable();
    times
        .into_iter()
        .enumerate()
        .map(|(i, issue_time)| {
            let payload_size = match scenario.size_distribution {
                SizeDistribution::Fixed(n) => n,
                SizeDistribution::Uniform { lo, hi } => uniform(&mut rng, lo, hi),
            };
            let user_id = if scenario.users > 1 {
                1 + rng.next_u64() % scenario.users
            } else {
                1
            };
            UploadRequest {
                request_id: i as u64 + 1,
                issue_time,
                payload_size,
                user_id,
            }
        })
        .collect()
}

/// Provider-side arrival time of every request, in request order.
pub fn deliver(requests: &[UploadRequest], seed: u64, model: DelayModel) -> Vec<Millis> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    requests
        .iter()
        .map(|r| {
            let d = match model {
                DelayModel::Zero => 0,
                DelayModel::Constant(d) => d,
                DelayModel::Uniform { lo, hi } => uniform(&mut rng, lo, hi),
            };
            r.issue_time + d as Millis
        })
        .collect()
}

/// Which timestamp the oracle selects on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleClock {
    /// Issue time against `[SP - TT, EP - TT)`.
    Issue,
    /// Arrival time against `[SP, EP)`.
    Arrival,
}

/// Storage consumed by the raw requests selected by `params`, recomputed
/// without logs or protocol.
pub fn oracle_recount(
    requests: &[UploadRequest],
    arrivals: &[Millis],
    params: &AccountingParams,
    clock: OracleClock,
    cfg: &FsConfig,
) -> u64 {
    let (md, ch) = (cfg.metadata_bytes(), cfg.chunk_size_bytes());
    let mut total = 0;
    for (r, arrival) in requests.iter().zip(arrivals) {
        let (t, lo, hi) = match clock {
            OracleClock::Issue => (
                r.issue_time,
                params.start_point() - params.transmission_time(),
                params.end_point() - params.transmission_time(),
            ),
            OracleClock::Arrival => (*arrival, params.start_point(), params.end_point()),
        };
        if lo <= t && t < hi {
            let raw = r.payload_size + md;
            let mut chunks = raw / ch;
            if chunks * ch < raw {
                chunks += 1;
            }
            total += chunks * ch;
        }
    }
    total
}

/// One interval's line in the report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntervalReport {
    pub index: u64,
    pub decision: Option<DecisionValue>,
    pub rounds: u32,
    pub comparator_invocations: u32,
    pub reason: Option<FailureReason>,
    pub provider_params: Option<AccountingParams>,
    pub final_params: Option<AccountingParams>,
    pub sc_provider: Option<u64>,
    pub sc_consumer_initial: Option<u64>,
    pub sc_agreed: Option<u64>,
    pub oracle_provider: Option<u64>,
    pub oracle_consumer: Option<u64>,
}

impl IntervalReport {
    pub fn is_agreed(&self) -> bool {
        self.decision == Some(DecisionValue::Yes) && self.reason.is_none()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunReport {
    pub intervals: Vec<IntervalReport>,
    pub workload_requests: u64,
    pub workload_bytes: u64,
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn params_text(p: Option<AccountingParams>) -> String {
    p.map_or_else(
        || "-".to_string(),
        |p| {
            format!(
                "{},{},{}",
                p.start_point(),
                p.end_point(),
                p.transmission_time()
            )
        },
    )
}

impl RunReport {
    pub fn agreed(&self) -> usize {
        self.intervals.iter().filter(|i| i.is_agreed()).count()
    }

    pub fn non_agreed(&self) -> usize {
        self.intervals.len() - self.agreed()
    }

    pub fn agreed_bytes(&self) -> u64 {
        self.intervals
            .iter()
            .filter(|i| i.is_agreed())
            .filter_map(|i| i.sc_agreed)
            .sum()
    }

    pub fn all_agreed(&self) -> bool {
        self.non_agreed() == 0
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>8}  {:>8}  {:>6}  {:<22}  {:>12}  {:>12}  {:>12}  {:>12}",
            "interval",
            "decision",
            "rounds",
            "reason",
            "sc_provider",
            "sc_consumer",
            "sc_agreed",
            "oracle"
        );
        for i in &self.intervals {
            let _ = writeln!(
                out,
                "{:>8}  {:>8}  {:>6}  {:<22}  {:>12}  {:>12}  {:>12}  {:>12}",
                i.index,
                i.decision.map_or("-", |d| d.as_str()),
                i.rounds,
                i.reason.map_or("-", |r| r.as_str()),
                opt(i.sc_provider),
                opt(i.sc_consumer_initial),
                opt(i.sc_agreed),
                opt(i.oracle_consumer),
            );
        }
        let total = self.intervals.len();
        let pct = if total == 0 {
            100.0
        } else {
            100.0 * self.agreed() as f64 / total as f64
        };
        let _ = writeln!(
            out,
            "\nintervals: {total}  agreed: {} ({pct:.1}%)  non-agreed: {}",
            self.agreed(),
            self.non_agreed()
        );
        let _ = writeln!(
            out,
            "agreed bytes: {}  workload: {} requests, {} bytes",
            self.agreed_bytes(),
            self.workload_requests,
            self.workload_bytes
        );
        out
    }

    /// One `key=value` record per interval plus a summary line.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for i in &self.intervals {
            let _ = writeln!(
                out,
                "interval={} decision={} rounds={} invocations={} reason={} provider={} final={} \
                 sc_provider={} sc_consumer_initial={} sc_agreed={} oracle_provider={} oracle_consumer={}",
                i.index,
                i.decision.map_or("-", |d| d.as_str()),
                i.rounds,
                i.comparator_invocations,
                i.reason.map_or("-", |r| r.as_str()),
                params_text(i.provider_params),
                params_text(i.final_params),
                opt(i.sc_provider),
                opt(i.sc_consumer_initial),
                opt(i.sc_agreed),
                opt(i.oracle_provider),
                opt(i.oracle_consumer),
            );
        }
        let _ = writeln!(
            out,
            "summary intervals={} agreed={} non_agreed={} agreed_bytes={} workload_requests={} workload_bytes={}",
            self.intervals.len(),
            self.agreed(),
            self.non_agreed(),
            self.agreed_bytes(),
            self.workload_requests,
            self.workload_bytes
        );
        out
    }

    /// Inverse of [`RunReport::records`]. The summary line must come last
    /// and agree with the interval lines.
    pub fn parse_records(text: &str) -> Result<Self, String> {
        let mut report = RunReport::default();
        let mut summary: Option<Vec<(String, String)>> = None;
        for (n, line) in text.lines().enumerate() {
            let n = n + 1;
            if line.is_empty() {
                continue;
            }
            if summary.is_some() {
                return Err(format!("line {n}: content after summary"));
            }
            let (tokens, is_summary) = match line.strip_prefix("summary ") {
                Some(rest) => (rest, true),
                None => (line, false),
            };
            let mut kv: Vec<(String, String)> = Vec::new();
            for tok in tokens.split(' ') {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| format!("line {n}: bad token {tok:?}"))?;
                if kv.iter().any(|(seen, _)| seen == k) {
                    return Err(format!("line {n}: duplicate {k}"));
                }
                kv.push((k.to_string(), v.to_string()));
            }
            if is_summary {
                summary = Some(kv);
            } else {
                report
                    .intervals
                    .push(parse_interval_record(&kv).map_err(|e| format!("line {n}: {e}"))?);
            }
        }
        let kv = summary.ok_or("missing summary line")?;
        let take = |key: &str| -> Result<u64, String> {
            let v = kv
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| format!("summary: missing {key}"))?;
            num(v).map_err(|e| format!("summary: {key}: {e}"))
        };
        if kv.len() != 6 {
            return Err("summary: expected 6 fields".into());
        }
        report.workload_requests = take("workload_requests")?;
        report.workload_bytes = take("workload_bytes")?;
        let consistent = take("intervals")? == report.intervals.len() as u64
            && take("agreed")? == report.agreed() as u64
            && take("non_agreed")? == report.non_agreed() as u64
            && take("agreed_bytes")? == report.agreed_bytes();
        if !consistent {
            return Err("summary disagrees with the interval records".into());
        }
        Ok(report)
    }
}

fn parse_interval_record(kv: &[(String, String)]) -> Result<IntervalReport, String> {
    if kv.len() != 12 {
        return Err(format!("expected 12 fields, found {}", kv.len()));
    }
    let take = |key: &str| -> Result<&str, String> {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| format!("missing {key}"))
    };
    let opt_num = |key: &str| -> Result<Option<u64>, String> {
        match take(key)? {
            "-" => Ok(None),
            v => num(v).map(Some).map_err(|e| format!("{key}: {e}")),
        }
    };
    let opt_params = |key: &str| -> Result<Option<AccountingParams>, String> {
        match take(key)? {
            "-" => Ok(None),
            v => {
                let p: Vec<&str> = v.split(',').collect();
                if p.len() != 3 {
                    return Err(format!("{key}: expected SP,EP,TT"));
                }
                AccountingParams::new(num(p[0])?, num(p[1])?, num(p[2])?)
                    .map(Some)
                    .map_err(|e| format!("{key}: {e}"))
            }
        }
    };
    Ok(IntervalReport {
        index: num(take("interval")?)?,
        decision: match take("decision")? {
            "-" => None,
            "yes" => Some(DecisionValue::Yes),
            "no" => Some(DecisionValue::No),
            v => return Err(format!("bad decision {v:?}")),
        },
        rounds: num(take("rounds")?)?,
        comparator_invocations: num(take("invocations")?)?,
        reason: match take("reason")? {
            "-" => None,
            v => Some(v.parse()?),
        },
        provider_params: opt_params("provider")?,
        final_params: opt_params("final")?,
        sc_provider: opt_num("sc_provider")?,
        sc_consumer_initial: opt_num("sc_consumer_initial")?,
        sc_agreed: opt_num("sc_agreed")?,
        oracle_provider: opt_num("oracle_provider")?,
        oracle_consumer: opt_num("oracle_consumer")?,
    })
}

/// Everything one run produced.
pub struct SimulationRun {
    pub scenario: Scenario,
    pub requests: Vec<UploadRequest>,
    pub arrivals: Vec<Millis>,
    pub provider_schedule: Vec<ConsumptionInterval>,
    pub consumer_schedule: Vec<ConsumptionInterval>,
    pub consumer_log: MeterLog,
    pub provider_log: MeterLog,
    pub store: EvidenceStore,
    pub keys: PartyKeys,
    pub outcomes: Vec<IntervalOutcome>,
    pub report: RunReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventClass {
    Issue,
    Arrival,
    Close,
}

pub fn identities(scenario: &Scenario) -> (KeyedIdentity, KeyedIdentity) {
    (
        KeyedIdentity::derive(scenario.signature_backend, Party::Consumer, scenario.seed),
        KeyedIdentity::derive(scenario.signature_backend, Party::Provider, scenario.seed),
    )
}

/// Generates the workload and delays from the scenario and runs it.
pub fn run(scenario: &Scenario) -> Result<SimulationRun, SimulationError> {
    let requests = generate_workload(scenario);
    let arrivals = deliver(&requests, scenario.seed, scenario.delay_model);
    run_with_deliveries(scenario, requests, arrivals)
}

/// Runs an explicit workload. `arrivals[i]` is when `requests[i]` reaches
/// the provider.
pub fn run_with_deliveries(
    scenario: &Scenario,
    requests: Vec<UploadRequest>,
    arrivals: Vec<Millis>,
) -> Result<SimulationRun, SimulationError> {
    scenario.validate()?;
    if requests.len() != arrivals.len() {
        return Err(SimulationError::Invalid(
            "one arrival per request required".into(),
        ));
    }
    let duration = scenario.duration_ms as Millis;
    let mut max_delay = scenario.delay_model.max_delay() as Millis;
    for (r, a) in requests.iter().zip(&arrivals) {
        if r.issue_time < 0 || r.issue_time >= duration || *a < r.issue_time {
            return Err(SimulationError::Invalid(format!(
                "request {} out of range",
                r.request_id
            )));
        }
        max_delay = max_delay.max(a - r.issue_time);
    }
    let horizon = duration + max_delay;
    let (provider_schedule, consumer_schedule) = scenario.schedules(horizon)?;

    let mut events: Vec<(Millis, EventClass, u64, usize)> = Vec::new();
    for (i, (r, a)) in requests.iter().zip(&arrivals).enumerate() {
        events.push((r.issue_time, EventClass::Issue, r.request_id, i));
        events.push((*a, EventClass::Arrival, r.request_id, i));
    }
    for (i, (p, c)) in provider_schedule.iter().zip(&consumer_schedule).enumerate() {
        events.push((
            p.end_point().max(c.end_point()),
            EventClass::Close,
            p.index(),
            i,
        ));
    }
    events.sort_unstable();

    let (consumer_id, provider_id) = identities(scenario);
    let keys = PartyKeys::of(&consumer_id, &provider_id);
    let config = scenario.protocol_config();
    let cfg = scenario.fs_config;
    let mut consumer_log = MeterLog::new(Party::Consumer);
    let mut provider_log = MeterLog::new(Party::Provider);
    let mut store = EvidenceStore::new();
    let mut outcomes = Vec::new();
    let mut carried_tt = 0;

    for (time, class, _, i) in events {
        match class {
            EventClass::Issue => consumer_log.append(intercept_consumer(&requests[i]))?,
            EventClass::Arrival => provider_log.append(intercept_provider(&requests[i], time)?)?,
            EventClass::Close => {
                let mut consumer = ConsumerRas::new(
                    consumer_id.clone(),
                    keys.clone(),
                    consumer_log.entries(),
                    cfg,
                    config,
                );
                let mut provider = ProviderRas::new(
                    provider_id.clone(),
                    keys.clone(),
                    provider_log.entries(),
                    cfg,
                    config,
                )
                .with_carried_tt(carried_tt);
                let outcome = run_interval(
                    &mut consumer,
                    &mut provider,
                    consumer_schedule[i],
                    provider_schedule[i],
                    &mut InMemoryTransport::new(),
                )?;
                carried_tt = provider.carried_tt();
                store.commit(&outcome, &keys)?;
                outcomes.push(outcome);
            }
        }
    }

    let workload_bytes = requests
        .iter()
        .map(|r| crate::accounting::scuf(r.payload_size, &cfg))
        .sum();
    let intervals = outcomes
        .iter()
        .map(|o| {
            let final_params = o.decision.map(|d| d.final_params);
            IntervalReport {
                index: o.interval_index,
                decision: o.decision.map(|d| d.value),
                rounds: o.rounds_used(),
                comparator_invocations: o.comparator_invocations,
                reason: o.failure,
                provider_params: o.provider_record.map(|r| r.params),
                final_params,
                sc_provider: o.provider_record.map(|r| r.storage_consumed),
                sc_consumer_initial: o.consumer_initial.map(|r| r.storage_consumed),
                sc_agreed: if o.is_agreed() {
                    o.consumer_record.map(|r| r.storage_consumed)
                } else {
                    None
                },
                oracle_provider: o.provider_record.map(|r| {
                    oracle_recount(&requests, &arrivals, &r.params, OracleClock::Arrival, &cfg)
                }),
                oracle_consumer: final_params
                    .map(|p| oracle_recount(&requests, &arrivals, &p, OracleClock::Issue, &cfg)),
            }
        })
        .collect();
    let report = RunReport {
        intervals,
        workload_requests: requests.len() as u64,
        workload_bytes,
    };
    Ok(SimulationRun {
        scenario: scenario.clone(),
        requests,
        arrivals,
        provider_schedule,
        consumer_schedule,
        consumer_log,
        provider_log,
        store,
        keys,
        outcomes,
        report,
    })
}

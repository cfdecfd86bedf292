//! On-disk layout of a run and the offline checks over it.
//!
//! | file                | contents                                  |
//! |---------------------|-------------------------------------------|
//! | `meters.consumer`   | consumer meter log                        |
//! | `meters.provider`   | provider meter log                        |
//! | `evidence.agreed`   | agreed store                              |
//! | `evidence.nonagreed`| non-agreed store                          |
//! | `report.txt`        | summary table                             |
//! | `report.records`    | one `key=value` record per interval       |
//! | `scenario.resolved` | the scenario with every key spelled out   |
//! | `keys`              | both parties' verification keys           |

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::accounting::{consumer_consumption, provider_consumption, Party};
use crate::evidence::{encode_store, parse_store_lines, EntryStatus, EvidenceEntry, StoreKind};
use crate::metering::MeterLog;
use crate::nr::PartyKeys;
use crate::simulator::{RunReport, Scenario, SimulationRun};

pub const METERS_CONSUMER: &str = "meters.consumer";
pub const METERS_PROVIDER: &str = "meters.provider";
pub const EVIDENCE_AGREED: &str = "evidence.agreed";
pub const EVIDENCE_NONAGREED: &str = "evidence.nonagreed";
pub const REPORT_TABLE: &str = "report.txt";
pub const REPORT_RECORDS: &str = "report.records";
pub const SCENARIO_RESOLVED: &str = "scenario.resolved";
pub const KEYS: &str = "keys";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{file}: {message}")]
    Parse { file: &'static str, message: String },
    #[error("{store} line {line}, interval {interval}: {message}")]
    Entry {
        store: &'static str,
        line: usize,
        interval: u64,
        message: String,
    },
    #[error("{0}")]
    Inconsistent(String),
    #[error("interval {0} not found")]
    NoSuchInterval(u64),
}

fn store_file(kind: StoreKind) -> &'static str {
    match kind {
        StoreKind::Agreed => EVIDENCE_AGREED,
        StoreKind::NonAgreed => EVIDENCE_NONAGREED,
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), OutputError> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|source| OutputError::Io { path, source })
}

fn read(dir: &Path, name: &str) -> Result<String, OutputError> {
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(|source| OutputError::Io { path, source })
}

/// Writes every output file of a run into `dir`, creating it if needed.
pub fn write_run(run: &SimulationRun, dir: &Path) -> Result<(), OutputError> {
    fs::create_dir_all(dir).map_err(|source| OutputError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write(dir, METERS_CONSUMER, &run.consumer_log.to_text())?;
    write(dir, METERS_PROVIDER, &run.provider_log.to_text())?;
    write(
        dir,
        EVIDENCE_AGREED,
        &encode_store(StoreKind::Agreed, &run.store.agreed),
    )?;
    write(
        dir,
        EVIDENCE_NONAGREED,
        &encode_store(StoreKind::NonAgreed, &run.store.non_agreed),
    )?;
    write(dir, REPORT_TABLE, &run.report.table())?;
    write(dir, REPORT_RECORDS, &run.report.records())?;
    write(dir, SCENARIO_RESOLVED, &run.scenario.to_text())?;
    write(dir, KEYS, &run.keys.to_text())
}

/// A run read back from disk.
#[derive(Debug)]
pub struct RunDir {
    pub scenario: Scenario,
    pub keys: PartyKeys,
    pub consumer_log: MeterLog,
    pub provider_log: MeterLog,
    /// `(line, entry)` pairs.
    pub agreed: Vec<(usize, EvidenceEntry)>,
    pub non_agreed: Vec<(usize, EvidenceEntry)>,
    pub report: RunReport,
}

impl RunDir {
    pub fn load(dir: &Path) -> Result<Self, OutputError> {
        let parse = |file: &'static str, message: String| OutputError::Parse { file, message };
        let scenario = Scenario::parse(&read(dir, SCENARIO_RESOLVED)?)
            .map_err(|e| parse(SCENARIO_RESOLVED, e.to_string()))?;
        let keys = PartyKeys::parse(&read(dir, KEYS)?).map_err(|e| parse(KEYS, e))?;
        let consumer_log = MeterLog::parse(Party::Consumer, &read(dir, METERS_CONSUMER)?)
            .map_err(|e| parse(METERS_CONSUMER, e.to_string()))?;
        let provider_log = MeterLog::parse(Party::Provider, &read(dir, METERS_PROVIDER)?)
            .map_err(|e| parse(METERS_PROVIDER, e.to_string()))?;
        let agreed = parse_store_lines(StoreKind::Agreed, &read(dir, EVIDENCE_AGREED)?)
            .map_err(|e| parse(EVIDENCE_AGREED, e.to_string()))?;
        let non_agreed = parse_store_lines(StoreKind::NonAgreed, &read(dir, EVIDENCE_NONAGREED)?)
            .map_err(|e| parse(EVIDENCE_NONAGREED, e.to_string()))?;
        let report = RunReport::parse_records(&read(dir, REPORT_RECORDS)?)
            .map_err(|e| parse(REPORT_RECORDS, e))?;
        Ok(Self {
            scenario,
            keys,
            consumer_log,
            provider_log,
            agreed,
            non_agreed,
            report,
        })
    }

    pub fn entries(&self) -> impl Iterator<Item = (StoreKind, usize, &EvidenceEntry)> {
        self.agreed
            .iter()
            .map(|(l, e)| (StoreKind::Agreed, *l, e))
            .chain(
                self.non_agreed
                    .iter()
                    .map(|(l, e)| (StoreKind::NonAgreed, *l, e)),
            )
    }

    pub fn entry(&self, interval: u64) -> Option<(StoreKind, &EvidenceEntry)> {
        self.entries()
            .find(|(_, _, e)| e.interval_index == interval)
            .map(|(k, _, e)| (k, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifySummary {
    pub agreed: usize,
    pub non_agreed: usize,
    pub envelopes: usize,
}

/// Re-checks a run directory: every token signature and link, every stored
/// record against the meter logs, agreement of both records for agreed
/// intervals, and that each interval appears exactly once.
pub fn verify_dir(dir: &Path) -> Result<VerifySummary, OutputError> {
    let run = RunDir::load(dir)?;
    let cfg = run.scenario.fs_config;
    let mut seen = vec![false; run.report.intervals.len()];
    let mut envelopes = 0;
    for (kind, line, entry) in run.entries() {
        let idx = entry.interval_index;
        let fail = |message: String| OutputError::Entry {
            store: store_file(kind),
            line,
            interval: idx,
            message,
        };
        entry.verify(&run.keys).map_err(|e| fail(e.to_string()))?;
        envelopes += entry.envelopes.len();
        let slot = usize::try_from(idx)
            .ok()
            .and_then(|i| i.checked_sub(1))
            .filter(|i| *i < seen.len())
            .ok_or_else(|| fail("interval is not in the report".into()))?;
        if std::mem::replace(&mut seen[slot], true) {
            return Err(fail("interval appears more than once".into()));
        }
        if let Some(p) = entry.provider_record {
            let again = provider_consumption(run.provider_log.entries(), idx, &p.params, &cfg)
                .map_err(|e| fail(e.to_string()))?;
            if again.storage_consumed != p.storage_consumed {
                return Err(fail(format!(
                    "provider record says {} bytes, provider log gives {}",
                    p.storage_consumed, again.storage_consumed
                )));
            }
        }
        if let Some(c) = entry.consumer_record {
            let again = consumer_consumption(run.consumer_log.entries(), idx, &c.params, &cfg);
            if again.storage_consumed != c.storage_consumed {
                return Err(fail(format!(
                    "consumer record says {} bytes, consumer log gives {}",
                    c.storage_consumed, again.storage_consumed
                )));
            }
        }
        if entry.status == EntryStatus::Agreed {
            let (Some(p), Some(c)) = (entry.provider_record, entry.consumer_record) else {
                return Err(fail("agreed entry is missing a record".into()));
            };
            if p.storage_consumed.abs_diff(c.storage_consumed) > run.scenario.tolerance {
                return Err(fail(format!(
                    "agreed records differ: provider {} consumer {}",
                    p.storage_consumed, c.storage_consumed
                )));
            }
        }
        let reported = &run.report.intervals[slot];
        if reported.is_agreed() != (kind == StoreKind::Agreed) {
            return Err(fail(
                "report and evidence store disagree on the outcome".into(),
            ));
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(OutputError::Inconsistent(format!(
            "interval {} has no evidence entry",
            missing + 1
        )));
    }
    Ok(VerifySummary {
        agreed: run.agreed.len(),
        non_agreed: run.non_agreed.len(),
        envelopes,
    })
}

/// The negotiation transcript of one interval, round by round.
pub fn replay(dir: &Path, interval: u64) -> Result<String, OutputError> {
    let run = RunDir::load(dir)?;
    let (kind, entry) = run
        .entry(interval)
        .ok_or(OutputError::NoSuchInterval(interval))?;
    let mut out = match entry.status {
        EntryStatus::Agreed => format!("interval {interval}: agreed\n"),
        EntryStatus::NonAgreed(reason) => {
            format!("interval {interval}: non-agreed ({})\n", reason.as_str())
        }
    };
    if let Some(p) = entry.provider_record {
        out.push_str(&format!(
            "  provider record: SC={} over [{}, {}) TT={}\n",
            p.storage_consumed,
            p.params.start_point(),
            p.params.end_point(),
            p.params.transmission_time()
        ));
    }
    if entry.transcript.is_empty() {
        out.push_str(match kind {
            StoreKind::Agreed => "  no negotiation rounds: agreed on the first comparison\n",
            StoreKind::NonAgreed => "  no negotiation rounds\n",
        });
    }
    for (i, round) in entry.transcript.iter().enumerate() {
        let (req, resp) = (round.request, round.response);
        let conflicts: Vec<&str> = resp
            .conflicting
            .iter()
            .map(|k| match k {
                crate::negotiation::ConflictKind::IntervalBounds => "interval-bounds",
                crate::negotiation::ConflictKind::TransmissionTime => "transmission-time",
            })
            .collect();
        out.push_str(&format!(
            "  round {}: request #{} consumer [{}, {}) TT={} -> response #{} provider [{}, {}) TT={} conflicts={} stop={}\n",
            i + 1,
            req.counter,
            req.consumer_params.start_point(),
            req.consumer_params.end_point(),
            req.consumer_params.transmission_time(),
            resp.counter,
            resp.provider_params.start_point(),
            resp.provider_params.end_point(),
            resp.provider_params.transmission_time(),
            if conflicts.is_empty() {
                "none".to_string()
            } else {
                conflicts.join(",")
            },
            resp.stop
        ));
    }
    if let Some(d) = entry.decision() {
        out.push_str(&format!(
            "  decision: {} with [{}, {}) TT={} after {} round{}\n",
            d.value.as_str(),
            d.final_params.start_point(),
            d.final_params.end_point(),
            d.final_params.transmission_time(),
            d.rounds_used,
            if d.rounds_used == 1 { "" } else { "s" }
        ));
    }
    Ok(out)
}

/// The summary table, rebuilt from the machine-readable records.
pub fn report(dir: &Path) -> Result<String, OutputError> {
    let text = read(dir, REPORT_RECORDS)?;
    let report = RunReport::parse_records(&text).map_err(|message| OutputError::Parse {
        file: REPORT_RECORDS,
        message,
    })?;
    Ok(report.table())
}

//! Consumer- and provider-side interceptors and their append-only logs.
//!
//! A log persists one record per line:
//!
//! ```text
//! request_id <TAB> user_id <TAB> rts <TAB> bt <TAB> rrt
//! ```
//!
//! with `-` in place of an absent receive time. Integers are plain decimal
//! with no sign prefix or leading zeros, so a log re-encodes byte for byte.

use std::collections::HashSet;
use std::fmt;
use std::io::{self, Write};

use thiserror::Error;

use crate::accounting::{AccountingError, ClockField, MeterRecord, Millis, Party};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UploadRequest {
    pub request_id: u64,
    pub issue_time: Millis,
    pub payload_size: u64,
    pub user_id: u64,
}

#[derive(Debug, Error)]
pub enum MeteringError {
    #[error("request {request_id} arrived at {arrival} before it was issued at {issued}")]
    NegativeTt {
        request_id: u64,
        issued: Millis,
        arrival: Millis,
    },
    #[error("{party} log entry for request {request_id} {problem}")]
    WrongParty {
        party: &'static str,
        request_id: u64,
        problem: &'static str,
    },
    #[error("request {0} already logged")]
    DuplicateRequest(u64),
    #[error("window start {from} is after end {to}")]
    InvalidWindow { from: Millis, to: Millis },
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn intercept_consumer(req: &UploadRequest) -> MeterRecord {
    MeterRecord {
        request_id: req.request_id,
        user_id: req.user_id,
        request_time_stamp: req.issue_time,
        bytes_transferred: req.payload_size,
        request_received_time: None,
    }
}

/// Stamps the arrival time. The request's own time stamp is trusted.
pub fn intercept_provider(
    req: &UploadRequest,
    arrival_time: Millis,
) -> Result<MeterRecord, MeteringError> {
    if arrival_time < req.issue_time {
        return Err(MeteringError::NegativeTt {
            request_id: req.request_id,
            issued: req.issue_time,
            arrival: arrival_time,
        });
    }
    Ok(MeterRecord {
        request_time_stamp: req.issue_time,
        request_received_time: Some(arrival_time),
        ..intercept_consumer(req)
    })
}

pub fn encode_line(rec: &MeterRecord) -> String {
    let rrt = match rec.request_received_time {
        Some(t) => t.to_string(),
        None => "-".to_string(),
    };
    format!(
        "{}\t{}\t{}\t{}\t{}",
        rec.request_id, rec.user_id, rec.request_time_stamp, rec.bytes_transferred, rrt
    )
}

fn canonical_int<T>(field: &str, name: &str) -> Result<T, String>
where
    T: std::str::FromStr + ToString,
{
    let v: T = field.parse().map_err(|_| format!("bad {name} {field:?}"))?;
    if v.to_string() != field {
        return Err(format!("non-canonical {name} {field:?}"));
    }
    Ok(v)
}

/// Parses one log line (without its newline).
pub fn parse_line(line: &str) -> Result<MeterRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(format!(
            "expected 5 tab-separated fields, found {}",
            fields.len()
        ));
    }
    let request_received_time = match fields[4] {
        "-" => None,
        f => Some(canonical_int(f, "rrt")?),
    };
    Ok(MeterRecord {
        request_id: canonical_int(fields[0], "request_id")?,
        user_id: canonical_int(fields[1], "user_id")?,
        request_time_stamp: canonical_int(fields[2], "rts")?,
        bytes_transferred: canonical_int(fields[3], "bt")?,
        request_received_time,
    })
}

/// Append-only meter log for one party, optionally mirrored to a sink one
/// line per append.
pub struct MeterLog {
    party: Party,
    entries: Vec<MeterRecord>,
    seen: HashSet<u64>,
    sink: Option<Box<dyn Write + Send>>,
}

impl fmt::Debug for MeterLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeterLog")
            .field("party", &self.party)
            .field("entries", &self.entries.len())
            .finish()
    }
}

impl MeterLog {
    pub fn new(party: Party) -> Self {
        Self {
            party,
            entries: Vec::new(),
            seen: HashSet::new(),
            sink: None,
        }
    }

    pub fn with_sink(party: Party, sink: Box<dyn Write + Send>) -> Self {
        Self {
            sink: Some(sink),
            ..Self::new(party)
        }
    }

    pub fn party(&self) -> Party {
        self.party
    }

    pub fn entries(&self) -> &[MeterRecord] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check(&self, rec: &MeterRecord) -> Result<(), MeteringError> {
        let wrong = |problem| MeteringError::WrongParty {
            party: self.party.as_str(),
            request_id: rec.request_id,
            problem,
        };
        match (self.party, rec.request_received_time) {
            (Party::Consumer, Some(_)) => return Err(wrong("carries a receive time")),
            (Party::Provider, None) => return Err(wrong("lacks a receive time")),
            (Party::Provider, Some(rrt)) if rrt < rec.request_time_stamp => {
                return Err(MeteringError::NegativeTt {
                    request_id: rec.request_id,
                    issued: rec.request_time_stamp,
                    arrival: rrt,
                })
            }
            _ => {}
        }
        if self.seen.contains(&rec.request_id) {
            return Err(MeteringError::DuplicateRequest(rec.request_id));
        }
        Ok(())
    }

    pub fn append(&mut self, rec: MeterRecord) -> Result<(), MeteringError> {
        self.check(&rec)?;
        if let Some(sink) = self.sink.as_mut() {
            writeln!(sink, "{}", encode_line(&rec))?;
        }
        self.seen.insert(rec.request_id);
        self.entries.push(rec);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), MeteringError> {
        if let Some(sink) = self.sink.as_mut() {
            sink.flush()?;
        }
        Ok(())
    }

    /// Records whose `clock` timestamp lies in `[from, to)`, in append order.
    pub fn read_window(
        &self,
        from: Millis,
        to: Millis,
        clock: ClockField,
    ) -> Result<Vec<MeterRecord>, MeteringError> {
        if from > to {
            return Err(MeteringError::InvalidWindow { from, to });
        }
        let mut out = Vec::new();
        for rec in &self.entries {
            let t = rec.timestamp(clock)?;
            if from <= t && t < to {
                out.push(rec.clone());
            }
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for rec in &self.entries {
            out.push_str(&encode_line(rec));
            out.push('\n');
        }
        out
    }

    /// Rebuilds a log from its text form, re-checking every invariant.
    pub fn parse(party: Party, text: &str) -> Result<Self, MeteringError> {
        let mut log = Self::new(party);
        for (i, line) in text.lines().enumerate() {
            let rec = parse_line(line).map_err(|message| MeteringError::Parse {
                line: i + 1,
                message,
            })?;
            log.append(rec).map_err(|e| MeteringError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn req(id: u64, t: Millis, size: u64) -> UploadRequest {
        UploadRequest {
            request_id: id,
            issue_time: t,
            payload_size: size,
            user_id: 1,
        }
    }

    #[test]
    fn consumer_interceptor_copies_fields() {
        let r = intercept_consumer(&req(7, 1000, 10240));
        assert_eq!(r.request_id, 7);
        assert_eq!(r.request_time_stamp, 1000);
        assert_eq!(r.bytes_transferred, 10240);
        assert_eq!(r.request_received_time, None);
        let z = intercept_consumer(&req(1, 0, 0));
        assert_eq!(
            (z.request_id, z.request_time_stamp, z.bytes_transferred),
            (1, 0, 0)
        );
    }

    #[test]
    fn provider_interceptor_stamps_arrival() {
        let r = intercept_provider(&req(7, 1000, 10240), 1100).unwrap();
        assert_eq!(r.request_time_stamp, 1000);
        assert_eq!(r.request_received_time, Some(1100));
        let same = intercept_provider(&req(7, 1000, 10240), 1000).unwrap();
        assert_eq!(crate::accounting::tt_of_request(&same).unwrap(), 0);
        assert!(matches!(
            intercept_provider(&req(7, 1000, 1), 999),
            Err(MeteringError::NegativeTt { .. })
        ));
    }

    #[test]
    fn append_keeps_order_and_party_invariants() {
        let mut log = MeterLog::new(Party::Consumer);
        log.append(intercept_consumer(&req(2, 50, 1))).unwrap();
        log.append(intercept_consumer(&req(1, 10, 1))).unwrap();
        assert_eq!(
            log.entries()
                .iter()
                .map(|r| r.request_id)
                .collect::<Vec<_>>(),
            vec![2, 1]
        );
        assert!(matches!(
            log.append(intercept_consumer(&req(2, 60, 1))),
            Err(MeteringError::DuplicateRequest(2))
        ));
        let provider_rec = intercept_provider(&req(3, 0, 0), 1).unwrap();
        assert!(matches!(
            log.append(provider_rec.clone()),
            Err(MeteringError::WrongParty { .. })
        ));

        let mut plog = MeterLog::new(Party::Provider);
        assert!(plog.append(intercept_consumer(&req(3, 0, 0))).is_err());
        plog.append(provider_rec).unwrap();
    }

    #[test]
    fn sink_receives_one_line_per_append() {
        #[derive(Clone, Default)]
        struct Shared(std::sync::Arc<std::sync::Mutex<Vec<u8>>>);
        impl Write for Shared {
            fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
                self.0.lock().unwrap().extend_from_slice(buf);
                Ok(buf.len())
            }
            fn flush(&mut self) -> io::Result<()> {
                Ok(())
            }
        }
        let shared = Shared::default();
        let mut log = MeterLog::with_sink(Party::Provider, Box::new(shared.clone()));
        log.append(intercept_provider(&req(7, 1000, 10240), 1100).unwrap())
            .unwrap();
        log.append(intercept_provider(&req(8, 1001, 0), 1001).unwrap())
            .unwrap();
        let text = String::from_utf8(shared.0.lock().unwrap().clone()).unwrap();
        assert_eq!(text, "7\t1\t1000\t10240\t1100\n8\t1\t1001\t0\t1001\n");
        assert_eq!(text, log.to_text());
    }

    #[test]
    fn windows() {
        let mut log = MeterLog::new(Party::Consumer);
        for (id, t) in [(1, 0), (2, 500), (3, 1000)] {
            log.append(intercept_consumer(&req(id, t, 1))).unwrap();
        }
        assert_eq!(log.read_window(0, 1001, ClockField::Rts).unwrap().len(), 3);
        assert!(log
            .read_window(2000, 3000, ClockField::Rts)
            .unwrap()
            .is_empty());
        assert!(log
            .read_window(1000, 1000, ClockField::Rts)
            .unwrap()
            .is_empty());
        assert_eq!(
            log.read_window(500, 1000, ClockField::Rts).unwrap().len(),
            1
        );
        assert!(matches!(
            log.read_window(0, 10, ClockField::Rrt),
            Err(MeteringError::Accounting(
                AccountingError::MissingReceiveTime { .. }
            ))
        ));
        assert!(matches!(
            log.read_window(10, 0, ClockField::Rts),
            Err(MeteringError::InvalidWindow { .. })
        ));
    }

    #[test]
    fn line_parsing_rejects_noise() {
        assert!(parse_line("1\t1\t0\t0\t-").is_ok());
        assert!(parse_line("1\t1\t0\t0").is_err());
        assert!(parse_line("1\t1\t0\t0\t-\t").is_err());
        assert!(parse_line("01\t1\t0\t0\t-").is_err());
        assert!(parse_line("+1\t1\t0\t0\t-").is_err());
        assert!(parse_line("1\t1\t0\t-5\t-").is_err());
        assert!(parse_line("1 1 0 0 -").is_err());
        let err = MeterLog::parse(Party::Provider, "1\t1\t0\t0\t5\n2\t1\t9\t0\t3\n").unwrap_err();
        assert!(matches!(err, MeteringError::Parse { line: 2, .. }));
    }

    proptest! {
        #[test]
        fn line_round_trip(
            id in any::<u64>(), user in any::<u64>(), rts in any::<i64>(),
            bt in any::<u64>(), rrt in proptest::option::of(any::<i64>()),
        ) {
            let rec = MeterRecord {
                request_id: id,
                user_id: user,
                request_time_stamp: rts,
                bytes_transferred: bt,
                request_received_time: rrt,
            };
            let line = encode_line(&rec);
            prop_assert_eq!(parse_line(&line).unwrap(), rec);
        }

        #[test]
        fn contiguous_windows_partition_the_log(
            times in proptest::collection::vec(0i64..10_000, 0..100),
            cuts in proptest::collection::btree_set(1i64..10_000, 0..10),
        ) {
            let mut log = MeterLog::new(Party::Consumer);
            for (i, t) in times.iter().enumerate() {
                log.append(intercept_consumer(&req(i as u64, *t, 0))).unwrap();
            }
            let mut bounds = vec![0];
            bounds.extend(cuts);
            bounds.push(10_000);
            let mut ids: Vec<u64> = bounds.windows(2)
                .flat_map(|w| log.read_window(w[0], w[1], ClockField::Rts).unwrap())
                .map(|r| r.request_id)
                .collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..times.len() as u64).collect::<Vec<_>>());
        }
    }
}

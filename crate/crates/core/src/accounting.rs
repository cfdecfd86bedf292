//! Storage accounting model.
//!
//! Every upload request consumes whole file-system chunks: its payload plus a
//! fixed amount of per-file metadata, rounded up to the chunk size. An
//! interval's consumption is the sum over the requests whose selected
//! timestamp falls inside the half-open window `[SP, EP)`.
//!
//! All arithmetic is exact: sizes are integer bytes, timestamps and durations
//! are integer milliseconds since the scenario epoch.

use num_rational::Ratio;
use thiserror::Error;

/// Milliseconds since the scenario epoch (or a duration in milliseconds).
pub type Millis = i64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AccountingError {
    #[error("chunk size must be positive")]
    InvalidChunkSize,
    #[error("interval start {start} is not before end {end}")]
    EmptyInterval { start: Millis, end: Millis },
    #[error("transmission time {0} ms is negative")]
    NegativeTransmissionTime(Millis),
    #[error("request {request_id} has no receive time")]
    MissingReceiveTime { request_id: u64 },
    #[error("request {request_id} received at {received} before it was issued at {issued}")]
    NegativeTt {
        request_id: u64,
        issued: Millis,
        received: Millis,
    },
    #[error("no records to average")]
    EmptyInput,
}

/// File-system parameters of the accounting model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FsConfig {
    metadata_bytes: u64,
    chunk_size_bytes: u64,
}

impl FsConfig {
    /// 2 KiB of metadata per file on 4 KiB chunks.
    pub const TYPICAL: FsConfig = FsConfig {
        metadata_bytes: 2048,
        chunk_size_bytes: 4096,
    };

    pub fn new(metadata_bytes: u64, chunk_size_bytes: u64) -> Result<Self, AccountingError> {
        if chunk_size_bytes == 0 {
            return Err(AccountingError::InvalidChunkSize);
        }
        Ok(Self {
            metadata_bytes,
            chunk_size_bytes,
        })
    }

    pub fn metadata_bytes(&self) -> u64 {
        self.metadata_bytes
    }

    pub fn chunk_size_bytes(&self) -> u64 {
        self.chunk_size_bytes
    }
}

impl Default for FsConfig {
    fn default() -> Self {
        Self::TYPICAL
    }
}

/// Which timestamp of a [`MeterRecord`] places it inside an interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClockField {
    /// Request time stamp, set by the consumer when the request is issued.
    Rts,
    /// Request received time, stamped by the provider on arrival.
    Rrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Party {
    Consumer,
    Provider,
}

impl Party {
    pub fn as_str(&self) -> &'static str {
        match self {
            Party::Consumer => "consumer",
            Party::Provider => "provider",
        }
    }

    pub fn peer(&self) -> Party {
        match self {
            Party::Consumer => Party::Provider,
            Party::Provider => Party::Consumer,
        }
    }
}

/// Metering data for one intercepted upload request.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MeterRecord {
    pub request_id: u64,
    pub user_id: u64,
    pub request_time_stamp: Millis,
    pub bytes_transferred: u64,
    /// Only the provider's interceptor observes arrival.
    pub request_received_time: Option<Millis>,
}

impl MeterRecord {
    pub fn timestamp(&self, clock: ClockField) -> Result<Millis, AccountingError> {
        match clock {
            ClockField::Rts => Ok(self.request_time_stamp),
            ClockField::Rrt => {
                self.request_received_time
                    .ok_or(AccountingError::MissingReceiveTime {
                        request_id: self.request_id,
                    })
            }
        }
    }
}

/// A `[start_point, end_point)` window owned by one party.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConsumptionInterval {
    index: u64,
    start_point: Millis,
    end_point: Millis,
}

impl ConsumptionInterval {
    pub fn new(
        index: u64,
        start_point: Millis,
        end_point: Millis,
    ) -> Result<Self, AccountingError> {
        if start_point >= end_point {
            return Err(AccountingError::EmptyInterval {
                start: start_point,
                end: end_point,
            });
        }
        Ok(Self {
            index,
            start_point,
            end_point,
        })
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn start_point(&self) -> Millis {
        self.start_point
    }

    pub fn end_point(&self) -> Millis {
        self.end_point
    }

    pub fn contains(&self, t: Millis) -> bool {
        self.start_point <= t && t < self.end_point
    }
}

/// True when consecutive intervals share their boundary and are numbered
/// 1, 2, 3, ...
pub fn is_contiguous(schedule: &[ConsumptionInterval]) -> bool {
    schedule
        .iter()
        .enumerate()
        .all(|(i, ci)| ci.index == i as u64 + 1)
        && schedule
            .windows(2)
            .all(|w| w[0].end_point == w[1].start_point)
}

/// The parameters the two parties negotiate over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AccountingParams {
    start_point: Millis,
    end_point: Millis,
    transmission_time: Millis,
}

impl AccountingParams {
    pub fn new(
        start_point: Millis,
        end_point: Millis,
        transmission_time: Millis,
    ) -> Result<Self, AccountingError> {
        if start_point >= end_point {
            return Err(AccountingError::EmptyInterval {
                start: start_point,
                end: end_point,
            });
        }
        if transmission_time < 0 {
            return Err(AccountingError::NegativeTransmissionTime(transmission_time));
        }
        Ok(Self {
            start_point,
            end_point,
            transmission_time,
        })
    }

    pub fn from_interval(
        interval: &ConsumptionInterval,
        transmission_time: Millis,
    ) -> Result<Self, AccountingError> {
        Self::new(interval.start_point, interval.end_point, transmission_time)
    }

    pub fn start_point(&self) -> Millis {
        self.start_point
    }

    pub fn end_point(&self) -> Millis {
        self.end_point
    }

    pub fn transmission_time(&self) -> Millis {
        self.transmission_time
    }

    pub fn same_bounds(&self, other: &AccountingParams) -> bool {
        self.start_point == other.start_point && self.end_point == other.end_point
    }

    pub fn with_bounds_of(self, other: &AccountingParams) -> Self {
        Self {
            start_point: other.start_point,
            end_point: other.end_point,
            ..self
        }
    }

    pub fn with_transmission_time(
        self,
        transmission_time: Millis,
    ) -> Result<Self, AccountingError> {
        Self::new(self.start_point, self.end_point, transmission_time)
    }
}

/// One party's storage consumption for one interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AccountingRecord {
    pub interval_index: u64,
    pub party: Party,
    pub params: AccountingParams,
    pub storage_consumed: u64,
    pub request_count: u64,
}

/// Chunks consumed by one request, as an exact fraction.
pub fn chunks_consumed(bytes_transferred: u64, cfg: &FsConfig) -> Ratio<u64> {
    Ratio::new(bytes_transferred + cfg.metadata_bytes, cfg.chunk_size_bytes)
}

/// Storage consumed by one request: chunk count rounded up, times chunk size.
pub fn scuf(bytes_transferred: u64, cfg: &FsConfig) -> u64 {
    chunks_consumed(bytes_transferred, cfg).ceil().to_integer() * cfg.chunk_size_bytes
}

fn window_sum(
    records: &[MeterRecord],
    from: Millis,
    to: Millis,
    clock: ClockField,
    cfg: &FsConfig,
) -> Result<(u64, u64), AccountingError> {
    let mut storage = 0u64;
    let mut count = 0u64;
    for rec in records {
        let t = rec.timestamp(clock)?;
        if from <= t && t < to {
            storage += scuf(rec.bytes_transferred, cfg);
            count += 1;
        }
    }
    Ok((storage, count))
}

/// Storage consumed by the requests whose `clock` timestamp lies in the
/// interval. RTS selection yields a consumer record, RRT a provider record;
/// the record's transmission time is left at zero.
pub fn interval_consumption(
    records: &[MeterRecord],
    interval: &ConsumptionInterval,
    cfg: &FsConfig,
    clock: ClockField,
) -> Result<AccountingRecord, AccountingError> {
    let (storage_consumed, request_count) = window_sum(
        records,
        interval.start_point,
        interval.end_point,
        clock,
        cfg,
    )?;
    Ok(AccountingRecord {
        interval_index: interval.index,
        party: match clock {
            ClockField::Rts => Party::Consumer,
            ClockField::Rrt => Party::Provider,
        },
        params: AccountingParams::from_interval(interval, 0)?,
        storage_consumed,
        request_count,
    })
}

pub fn tt_of_request(rec: &MeterRecord) -> Result<Millis, AccountingError> {
    let received = rec.timestamp(ClockField::Rrt)?;
    if received < rec.request_time_stamp {
        return Err(AccountingError::NegativeTt {
            request_id: rec.request_id,
            issued: rec.request_time_stamp,
            received,
        });
    }
    Ok(received - rec.request_time_stamp)
}

/// Mean transmission time, rounded to the nearest millisecond with ties
/// away from zero.
pub fn tt_average(records: &[MeterRecord]) -> Result<Millis, AccountingError> {
    if records.is_empty() {
        return Err(AccountingError::EmptyInput);
    }
    let mut sum: i128 = 0;
    for rec in records {
        sum += tt_of_request(rec)? as i128;
    }
    let n = records.len() as i128;
    // every tt is non-negative, so half-up is away-from-zero
    Ok(((2 * sum + n) / (2 * n)) as Millis)
}

/// Literal TT compensation: `base + |n - m|`.
pub fn straddle_compensated(base_sc: u64, n: u64, m: u64) -> u64 {
    base_sc + n.abs_diff(m)
}

/// Provider-side consumption over the interval shifted forward by `tt`,
/// selecting on receive time.
pub fn shifted_interval_consumption(
    records: &[MeterRecord],
    interval: &ConsumptionInterval,
    tt: Millis,
    cfg: &FsConfig,
) -> Result<AccountingRecord, AccountingError> {
    let params = AccountingParams::from_interval(interval, tt)?;
    let (storage_consumed, request_count) = window_sum(
        records,
        interval.start_point.saturating_add(tt),
        interval.end_point.saturating_add(tt),
        ClockField::Rrt,
        cfg,
    )?;
    Ok(AccountingRecord {
        interval_index: interval.index,
        party: Party::Provider,
        params,
        storage_consumed,
        request_count,
    })
}

/// Consumer-side consumption under negotiated parameters: requests issued in
/// `[SP - TT, EP - TT)`, i.e. the requests that arrive inside `[SP, EP)` when
/// every request travels for exactly `TT`.
pub fn consumer_consumption(
    records: &[MeterRecord],
    interval_index: u64,
    params: &AccountingParams,
    cfg: &FsConfig,
) -> AccountingRecord {
    let tt = params.transmission_time;
    let (storage_consumed, request_count) = window_sum(
        records,
        params.start_point.saturating_sub(tt),
        params.end_point.saturating_sub(tt),
        ClockField::Rts,
        cfg,
    )
    .expect("issue time is always present");
    AccountingRecord {
        interval_index,
        party: Party::Consumer,
        params: *params,
        storage_consumed,
        request_count,
    }
}

/// Provider-side consumption under its own parameters (receive time in
/// `[SP, EP)`), carrying the supplied transmission time.
pub fn provider_consumption(
    records: &[MeterRecord],
    interval_index: u64,
    params: &AccountingParams,
    cfg: &FsConfig,
) -> Result<AccountingRecord, AccountingError> {
    let (storage_consumed, request_count) = window_sum(
        records,
        params.start_point,
        params.end_point,
        ClockField::Rrt,
        cfg,
    )?;
    Ok(AccountingRecord {
        interval_index,
        party: Party::Provider,
        params: *params,
        storage_consumed,
        request_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: u64, rts: Millis, bt: u64, rrt: Option<Millis>) -> MeterRecord {
        MeterRecord {
            request_id: id,
            user_id: 1,
            request_time_stamp: rts,
            bytes_transferred: bt,
            request_received_time: rrt,
        }
    }

    // Brute-force scuf: allocate chunks one at a time until the data fits.
    fn scuf_by_allocation(bt: u64, cfg: &FsConfig) -> u64 {
        let need = bt + cfg.metadata_bytes();
        let mut allocated = 0;
        while allocated < need {
            allocated += cfg.chunk_size_bytes();
        }
        allocated
    }

    #[test]
    fn chunk_count_examples() {
        let cfg = FsConfig::TYPICAL;
        assert_eq!(chunks_consumed(10240, &cfg), Ratio::from_integer(3));
        assert_eq!(chunks_consumed(0, &cfg), Ratio::new(1, 2));
        assert_eq!(chunks_consumed(4096, &cfg), Ratio::new(3, 2));
    }

    #[test]
    fn scuf_examples() {
        let cfg = FsConfig::TYPICAL;
        assert_eq!(scuf(10240, &cfg), 12288);
        assert_eq!(scuf(0, &cfg), 4096);
        assert_eq!(scuf(1, &cfg), 4096);
        assert_eq!(scuf(4097, &cfg), 8192);
    }

    #[test]
    fn zero_chunk_size_rejected() {
        assert_eq!(
            FsConfig::new(2048, 0),
            Err(AccountingError::InvalidChunkSize)
        );
        assert!(FsConfig::new(0, 1).is_ok());
    }

    #[test]
    fn interval_sum_examples() {
        let cfg = FsConfig::TYPICAL;
        let ci = ConsumptionInterval::new(1, 0, 60_000).unwrap();
        let recs = vec![
            rec(1, 10, 10240, None),
            rec(2, 20, 0, None),
            rec(3, 59_999, 4096, None),
        ];
        let expected: u64 = recs
            .iter()
            .map(|r| scuf_by_allocation(r.bytes_transferred, &cfg))
            .sum();
        assert_eq!(expected, 24576);
        let sr = interval_consumption(&recs, &ci, &cfg, ClockField::Rts).unwrap();
        assert_eq!(sr.storage_consumed, 24576);
        assert_eq!(sr.request_count, 3);
        assert_eq!(sr.party, Party::Consumer);

        let empty = ConsumptionInterval::new(2, 60_000, 120_000).unwrap();
        assert_eq!(
            interval_consumption(&recs, &empty, &cfg, ClockField::Rts)
                .unwrap()
                .storage_consumed,
            0
        );
    }

    #[test]
    fn end_point_is_exclusive() {
        let cfg = FsConfig::TYPICAL;
        let ci = ConsumptionInterval::new(1, 0, 1000).unwrap();
        let recs = vec![rec(1, 1000, 10, None), rec(2, 0, 10, None)];
        let sr = interval_consumption(&recs, &ci, &cfg, ClockField::Rts).unwrap();
        assert_eq!(sr.request_count, 1);
    }

    #[test]
    fn rrt_selection_requires_receive_time() {
        let cfg = FsConfig::TYPICAL;
        let ci = ConsumptionInterval::new(1, 0, 1000).unwrap();
        let recs = vec![rec(9, 5, 10, None)];
        assert_eq!(
            interval_consumption(&recs, &ci, &cfg, ClockField::Rrt),
            Err(AccountingError::MissingReceiveTime { request_id: 9 })
        );
    }

    #[test]
    fn transmission_time_of_one_request() {
        assert_eq!(tt_of_request(&rec(1, 1000, 0, Some(1100))), Ok(100));
        assert_eq!(tt_of_request(&rec(1, 5000, 0, Some(5000))), Ok(0));
        assert!(matches!(
            tt_of_request(&rec(1, 1100, 0, Some(1000))),
            Err(AccountingError::NegativeTt { .. })
        ));
        assert!(matches!(
            tt_of_request(&rec(1, 1100, 0, None)),
            Err(AccountingError::MissingReceiveTime { .. })
        ));
    }

    #[test]
    fn average_transmission_time() {
        let with_tts = |tts: &[Millis]| -> Vec<MeterRecord> {
            tts.iter()
                .enumerate()
                .map(|(i, tt)| rec(i as u64, 1000, 0, Some(1000 + tt)))
                .collect()
        };
        assert_eq!(tt_average(&with_tts(&[100, 200, 300])), Ok(200));
        assert_eq!(tt_average(&with_tts(&[42])), Ok(42));
        assert_eq!(tt_average(&with_tts(&[100, 101])), Ok(101));
        assert_eq!(tt_average(&with_tts(&[100, 100, 101])), Ok(100));
        assert_eq!(tt_average(&[]), Err(AccountingError::EmptyInput));
    }

    #[test]
    fn literal_compensation() {
        assert_eq!(straddle_compensated(24576, 4096, 4096), 24576);
        assert_eq!(straddle_compensated(24576, 0, 8192), 32768);
        assert_eq!(straddle_compensated(0, 0, 0), 0);
    }

    #[test]
    fn shift_matches_consumer_under_constant_delay() {
        let cfg = FsConfig::TYPICAL;
        let ci = ConsumptionInterval::new(1, 0, 60_000).unwrap();
        let recs = vec![
            rec(1, 0, 10240, Some(100)),
            rec(2, 30_000, 0, Some(30_100)),
            rec(3, 59_950, 4096, Some(60_050)),
        ];
        let consumer = interval_consumption(&recs, &ci, &cfg, ClockField::Rts).unwrap();
        let shifted = shifted_interval_consumption(&recs, &ci, 100, &cfg).unwrap();
        assert_eq!(consumer.storage_consumed, 24576);
        assert_eq!(shifted.storage_consumed, 24576);
        assert_eq!(shifted.params.transmission_time(), 100);

        let unshifted = shifted_interval_consumption(&recs, &ci, 0, &cfg).unwrap();
        let by_rrt = interval_consumption(&recs, &ci, &cfg, ClockField::Rrt).unwrap();
        assert_eq!(unshifted.storage_consumed, by_rrt.storage_consumed);
    }

    #[test]
    fn jitter_across_the_boundary_breaks_the_shift() {
        // delays {0, 2*tt} average to tt; the late request crosses EP + tt
        let cfg = FsConfig::TYPICAL;
        let ci = ConsumptionInterval::new(1, 0, 1000).unwrap();
        let recs = vec![rec(1, 100, 0, Some(100)), rec(2, 950, 0, Some(1150))];
        let tt = tt_average(&recs).unwrap();
        assert_eq!(tt, 100);
        let consumer = interval_consumption(&recs, &ci, &cfg, ClockField::Rts).unwrap();
        let shifted = shifted_interval_consumption(&recs, &ci, tt, &cfg).unwrap();
        assert_eq!(consumer.storage_consumed, 8192);
        assert_eq!(shifted.storage_consumed, 4096);
    }

    #[test]
    fn contiguity_check() {
        let a = ConsumptionInterval::new(1, 0, 10).unwrap();
        let b = ConsumptionInterval::new(2, 10, 20).unwrap();
        let c = ConsumptionInterval::new(3, 21, 30).unwrap();
        assert!(is_contiguous(&[a, b]));
        assert!(!is_contiguous(&[a, b, c]));
        assert!(!is_contiguous(&[b]));
    }

    #[test]
    fn params_reject_bad_values() {
        assert!(AccountingParams::new(5, 5, 0).is_err());
        assert!(AccountingParams::new(0, 5, -1).is_err());
        assert!(ConsumptionInterval::new(1, 7, 3).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn ceiling_law(bt in 0u64..1 << 40, md in 0u64..1 << 20, ch in 1u64..1 << 20) {
            let cfg = FsConfig::new(md, ch).unwrap();
            let s = scuf(bt, &cfg);
            prop_assert!(s >= bt + md);
            prop_assert!(s < bt + md + ch);
            prop_assert_eq!(s % ch, 0);
        }

        #[test]
        fn scuf_is_monotone(a in 0u64..1 << 32, b in 0u64..1 << 32) {
            let cfg = FsConfig::TYPICAL;
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(scuf(lo, &cfg) <= scuf(hi, &cfg));
        }

        #[test]
        fn partition_is_additive(
            stamps in proptest::collection::vec((0i64..10_000, 0u64..100_000), 0..200),
            cuts in proptest::collection::btree_set(1i64..10_000, 0..12),
        ) {
            let cfg = FsConfig::TYPICAL;
            let recs: Vec<_> = stamps.iter().enumerate()
                .map(|(i, (t, bt))| rec(i as u64, *t, *bt, None)).collect();
            let mut bounds = vec![0i64];
            bounds.extend(cuts.iter().copied());
            bounds.push(10_000);
            let total: u64 = bounds.windows(2).enumerate().map(|(i, w)| {
                let ci = ConsumptionInterval::new(i as u64 + 1, w[0], w[1]).unwrap();
                interval_consumption(&recs, &ci, &cfg, ClockField::Rts).unwrap().storage_consumed
            }).sum();
            let expected: u64 = recs.iter().map(|r| scuf_by_allocation(r.bytes_transferred, &cfg)).sum();
            prop_assert_eq!(total, expected);
        }

        #[test]
        fn widening_never_decreases(
            stamps in proptest::collection::vec((0i64..10_000, 0u64..100_000), 0..100),
            sp in 0i64..5_000, len in 1i64..5_000, grow_left in 0i64..2_000, grow_right in 0i64..2_000,
        ) {
            let cfg = FsConfig::TYPICAL;
            let recs: Vec<_> = stamps.iter().enumerate()
                .map(|(i, (t, bt))| rec(i as u64, *t, *bt, None)).collect();
            let narrow = ConsumptionInterval::new(1, sp, sp + len).unwrap();
            let wide = ConsumptionInterval::new(1, sp - grow_left, sp + len + grow_right).unwrap();
            let a = interval_consumption(&recs, &narrow, &cfg, ClockField::Rts).unwrap();
            let b = interval_consumption(&recs, &wide, &cfg, ClockField::Rts).unwrap();
            prop_assert!(a.storage_consumed <= b.storage_consumed);
        }

        #[test]
        fn order_does_not_matter(
            stamps in proptest::collection::vec((0i64..1_000, 0u64..10_000), 0..50),
        ) {
            let cfg = FsConfig::TYPICAL;
            let recs: Vec<_> = stamps.iter().enumerate()
                .map(|(i, (t, bt))| rec(i as u64, *t, *bt, None)).collect();
            let mut rev = recs.clone();
            rev.reverse();
            let ci = ConsumptionInterval::new(1, 100, 900).unwrap();
            prop_assert_eq!(
                interval_consumption(&recs, &ci, &cfg, ClockField::Rts).unwrap(),
                interval_consumption(&rev, &ci, &cfg, ClockField::Rts).unwrap()
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn constant_delay_shift_equivalence(
            issues in proptest::collection::vec((0i64..100_000, 0u64..50_000), 0..80),
            delay in 0i64..5_000,
            length in 1_000i64..30_000,
        ) {
            let cfg = FsConfig::TYPICAL;
            let recs: Vec<_> = issues.iter().enumerate()
                .map(|(i, (t, bt))| rec(i as u64, *t, *bt, Some(t + delay))).collect();
            let mut sp = 0;
            let mut index = 1;
            while sp < 100_000 {
                let ci = ConsumptionInterval::new(index, sp, sp + length).unwrap();
                let consumer = interval_consumption(&recs, &ci, &cfg, ClockField::Rts).unwrap();
                let provider = shifted_interval_consumption(&recs, &ci, delay, &cfg).unwrap();
                prop_assert_eq!(consumer.storage_consumed, provider.storage_consumed);
                let params = AccountingParams::from_interval(&ci, delay).unwrap();
                let compensated = consumer_consumption(&recs, index, &params, &cfg);
                let by_arrival = provider_consumption(&recs, index, &params, &cfg).unwrap();
                prop_assert_eq!(compensated.storage_consumed, by_arrival.storage_consumed);
                sp += length;
                index += 1;
            }
        }
    }
}

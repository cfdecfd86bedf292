#![allow(dead_code)]

use ccrp_core::accounting::{FsConfig, Millis};
use ccrp_core::metering::{intercept_consumer, intercept_provider, MeterLog, UploadRequest};
use ccrp_core::simulator::{
    oracle_recount, ConsumerSchedule, DelayModel, OracleClock, ProviderSchedule, RequestRate,
    SimulationRun, SizeDistribution,
};
use ccrp_core::{Backend, EntryStatus, Party, Scenario};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INTERVAL: u64 = 10_000;

pub fn base(seed: u64) -> Scenario {
    Scenario {
        seed,
        duration_ms: 60_000,
        request_rate: RequestRate::Fixed(400),
        size_distribution: SizeDistribution::Uniform { lo: 0, hi: 50_000 },
        delay_model: DelayModel::Zero,
        fs_config: FsConfig::TYPICAL,
        provider_schedule: ProviderSchedule {
            length: INTERVAL,
            phase: 0,
        },
        consumer_schedule: ConsumerSchedule {
            length: INTERVAL,
            offset: 0,
        },
        tolerance: 0,
        max_rounds: 3,
        signature_backend: Backend::KeyedDigest,
        timeout_steps: 8,
        users: 1,
    }
}

/// Misaligned schedules, zero delay.
pub fn scenario_a(seed: u64, offset: i64) -> Scenario {
    let mut s = base(seed);
    s.consumer_schedule.offset = offset;
    s
}

/// Aligned schedules, constant delay.
pub fn scenario_b(seed: u64, delay: u64) -> Scenario {
    let mut s = base(seed);
    s.delay_model = DelayModel::Constant(delay);
    s
}

/// Three aligned intervals. Interval 1 has delays alternating 50 and 150
/// ms (average 100) and one request issued at 9880 that takes 150 ms and
/// so lands in interval 2. Intervals 2 and 3 see a constant 150 ms.
pub fn scenario_c() -> (Scenario, Vec<UploadRequest>, Vec<Millis>) {
    let mut s = base(99);
    s.duration_ms = 30_000;
    s.delay_model = DelayModel::Uniform { lo: 50, hi: 150 };
    let mut timed: Vec<(Millis, u64, Millis)> = Vec::new();
    for k in 0..40 {
        let delay = if k % 2 == 0 { 50 } else { 150 };
        timed.push((100 + 240 * k, 1000 * (k as u64 % 7) + k as u64, delay));
    }
    timed.push((9880, 7000, 150));
    for k in 0..30 {
        timed.push((10_000 + 330 * k, 3000 + 977 * k as u64, 150));
        timed.push((20_000 + 330 * k, 500 + 1311 * k as u64, 150));
    }
    timed.sort();
    let requests: Vec<UploadRequest> = timed
        .iter()
        .enumerate()
        .map(|(i, (t, size, _))| UploadRequest {
            request_id: i as u64 + 1,
            issue_time: *t,
            payload_size: *size,
            user_id: 1,
        })
        .collect();
    let arrivals = timed.iter().map(|(t, _, d)| t + d).collect();
    (s, requests, arrivals)
}

/// A scenario with every knob drawn from `seed`.
pub fn random_scenario(seed: u64, max_requests: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |lo: u64, hi: u64| lo + rng.next_u64() % (hi - lo + 1);
    loop {
        let duration = draw(1_000, 200_000);
        let length = draw(200, duration);
        let phase = draw(0, length - 1);
        let delay = match draw(0, 2) {
            0 => DelayModel::Zero,
            1 => DelayModel::Constant(draw(0, 2_000.min(duration))),
            _ => {
                let lo = draw(0, 1_000);
                DelayModel::Uniform {
                    lo,
                    hi: draw(lo, lo + 1_000).min(duration),
                }
            }
        };
        let lo_size = draw(0, 100_000);
        let mut s = base(seed);
        s.duration_ms = duration;
        s.request_rate = RequestRate::Fixed(draw(0, max_requests));
        s.size_distribution = SizeDistribution::Uniform {
            lo: lo_size,
            hi: draw(lo_size, lo_size + 100_000),
        };
        s.delay_model = delay;
        s.fs_config = FsConfig::new(draw(0, 4096), 1 << draw(9, 16)).unwrap();
        s.provider_schedule = ProviderSchedule { length, phase };
        s.consumer_schedule = ConsumerSchedule {
            length,
            offset: draw(0, length / 2) as i64 - (length / 4) as i64,
        };
        s.users = draw(1, 4);
        if s.validate().is_ok() {
            return s;
        }
    }
}

/// Every agreed interval's settled SC must equal the brute-force recount,
/// on both clocks, under the parameters the evidence commits to.
pub fn oracle_mismatches(run: &SimulationRun) -> Vec<String> {
    let cfg = run.scenario.fs_config;
    let mut bad = Vec::new();
    for e in &run.store.agreed {
        let decision = e.decision().expect("agreed entries carry a decision");
        let provider = e.provider_record.expect("provider record");
        let consumer = e.consumer_record.expect("consumer record");
        let issue = oracle_recount(
            &run.requests,
            &run.arrivals,
            &decision.final_params,
            OracleClock::Issue,
            &cfg,
        );
        let arrival = oracle_recount(
            &run.requests,
            &run.arrivals,
            &provider.params,
            OracleClock::Arrival,
            &cfg,
        );
        if consumer.storage_consumed != issue
            || provider.storage_consumed != arrival
            || issue != arrival
        {
            bad.push(format!(
                "interval {}: consumer {} provider {} oracle issue {} arrival {}",
                e.interval_index,
                consumer.storage_consumed,
                provider.storage_consumed,
                issue,
                arrival
            ));
        }
    }
    bad
}

/// Meter logs rebuilt from the raw workload with no protocol involved.
pub fn metering_only(requests: &[UploadRequest], arrivals: &[Millis]) -> (String, String) {
    let mut events: Vec<(Millis, u8, u64, usize)> = Vec::new();
    for (i, (r, a)) in requests.iter().zip(arrivals).enumerate() {
        events.push((r.issue_time, 0, r.request_id, i));
        events.push((*a, 1, r.request_id, i));
    }
    events.sort();
    let mut consumer = MeterLog::new(Party::Consumer);
    let mut provider = MeterLog::new(Party::Provider);
    for (t, class, _, i) in events {
        if class == 0 {
            consumer.append(intercept_consumer(&requests[i])).unwrap();
        } else {
            provider
                .append(intercept_provider(&requests[i], t).unwrap())
                .unwrap();
        }
    }
    (consumer.to_text(), provider.to_text())
}

pub fn status_of(run: &SimulationRun, interval: u64) -> Option<EntryStatus> {
    run.store.entry(interval).map(|(_, e)| e.status)
}

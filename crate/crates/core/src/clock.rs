//! Trusted clock with bounded deviation and per-reader strict monotonicity.
//!
//! A reading is a tick value plus a sub-tick sequence number. The tick
//! value lies within `[t - eps, t + eps]` of engine time `t` and never
//! decreases for one reader; the sequence number orders readings that share
//! a tick value, so `(value, seq)` strictly increases. This is the integer
//! image of a continuous clock that may run slow: after a high reading the
//! clock can stay on the same tick value until real time catches up.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{ActorId, VirtualTime};

/// Maximum clock deviation in ticks; fixed for a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Epsilon(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrustedTimestamp {
    pub reader: ActorId,
    pub value: u64,
    /// Position among this reader's readings with the same `value`.
    pub seq: u32,
}

impl TrustedTimestamp {
    /// Sort key that strictly increases across one reader's readings.
    pub fn order_key(&self) -> (u64, u32) {
        (self.value, self.seq)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClockError {
    #[error("clock error {error} outside [-{epsilon}, {epsilon}]")]
    ErrorOutOfRange { error: i64, epsilon: u64 },
    #[error("reader {0} is not registered")]
    UnknownReader(ActorId),
}

/// Previous reading of one reader: `(value, tick at which it was taken)`.
pub type LastReading = Option<(u64, u64)>;

/// All tick values admissible at tick `now` for a reader whose previous
/// reading is `last`, sorted ascending and deduplicated. A raw candidate
/// `now + e` below the previous value is lifted to it.
pub fn admissible_readings(last: LastReading, now: u64, epsilon: u64) -> Vec<u64> {
    match last {
        Some((value, at)) if at == now => vec![value],
        _ => {
            let mut out = Vec::with_capacity(2 * epsilon as usize + 1);
            for e in -(epsilon as i64)..=(epsilon as i64) {
                let v = reading_with_error(last, now, e);
                if out.last() != Some(&v) {
                    out.push(v);
                }
            }
            out
        }
    }
}

/// Tick value for a specific error choice, after the monotonicity lift.
pub fn reading_with_error(last: LastReading, now: u64, error: i64) -> u64 {
    if let Some((value, at)) = last {
        if at == now {
            return value;
        }
    }
    let raw = (now as i64 + error).max(0) as u64;
    match last {
        Some((prev, _)) => raw.max(prev),
        None => raw,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Last {
    value: u64,
    at: u64,
    seq: u32,
}

/// Clock source shared by every reader in a world.
#[derive(Debug, Clone, Default, Hash)]
pub struct TrustedClock {
    epsilon: Epsilon,
    last: BTreeMap<ActorId, Option<Last>>,
}

impl TrustedClock {
    pub fn new(epsilon: Epsilon) -> Self {
        TrustedClock {
            epsilon,
            last: BTreeMap::new(),
        }
    }

    pub fn epsilon(&self) -> Epsilon {
        self.epsilon
    }

    pub fn register(&mut self, reader: ActorId) {
        self.last.entry(reader).or_insert(None);
    }

    fn last_of(&self, reader: ActorId) -> Result<Option<Last>, ClockError> {
        self.last.get(&reader).copied().ok_or(ClockError::UnknownReader(reader))
    }

    pub fn last_reading(&self, reader: ActorId) -> LastReading {
        self.last_of(reader).ok().flatten().map(|l| (l.value, l.at))
    }

    /// Branch values for exhaustive exploration.
    pub fn candidates(&self, reader: ActorId, now: VirtualTime) -> Result<Vec<u64>, ClockError> {
        let last = self.last_of(reader)?.map(|l| (l.value, l.at));
        Ok(admissible_readings(last, now.0, self.epsilon.0))
    }

    fn record(&mut self, reader: ActorId, now: VirtualTime, value: u64, last: Option<Last>) -> TrustedTimestamp {
        let seq = match last {
            Some(l) if l.value == value => l.seq + 1,
            _ => 0,
        };
        self.last.insert(reader, Some(Last { value, at: now.0, seq }));
        TrustedTimestamp { reader, value, seq }
    }

    /// Reads with an explicit error in `[-eps, +eps]`.
    pub fn read_with_error(
        &mut self,
        reader: ActorId,
        now: VirtualTime,
        error: i64,
    ) -> Result<TrustedTimestamp, ClockError> {
        let eps = self.epsilon.0;
        if error.unsigned_abs() > eps {
            return Err(ClockError::ErrorOutOfRange { error, epsilon: eps });
        }
        let last = self.last_of(reader)?;
        let value = reading_with_error(last.map(|l| (l.value, l.at)), now.0, error);
        Ok(self.record(reader, now, value, last))
    }

    /// Reads with an error drawn uniformly from `[-eps, +eps]`.
    pub fn read_random<R: Rng>(
        &mut self,
        reader: ActorId,
        now: VirtualTime,
        rng: &mut R,
    ) -> Result<TrustedTimestamp, ClockError> {
        let eps = self.epsilon.0 as i64;
        let error = if eps == 0 { 0 } else { rng.gen_range(-eps..=eps) };
        self.read_with_error(reader, now, error)
    }

    /// Forces a particular admissible value (used when replaying schedules).
    pub fn read_exact(
        &mut self,
        reader: ActorId,
        now: VirtualTime,
        value: u64,
    ) -> Result<TrustedTimestamp, ClockError> {
        let options = self.candidates(reader, now)?;
        if !options.contains(&value) {
            let eps = self.epsilon.0;
            return Err(ClockError::ErrorOutOfRange {
                error: value as i64 - now.0 as i64,
                epsilon: eps,
            });
        }
        let last = self.last_of(reader)?;
        Ok(self.record(reader, now, value, last))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ActorKind;
    use proptest::prelude::*;
    use rand::SeedableRng;

    const R: ActorId = ActorId::new(ActorKind::AppInstance, 0);
    const S: ActorId = ActorId::new(ActorKind::LeaseServer, 0);

    fn clock(eps: u64) -> TrustedClock {
        let mut c = TrustedClock::new(Epsilon(eps));
        c.register(R);
        c.register(S);
        c
    }

    #[test]
    fn zero_epsilon_reads_engine_time() {
        let mut c = clock(0);
        assert_eq!(c.read_with_error(R, VirtualTime(10), 0).unwrap().value, 10);
    }

    #[test]
    fn epsilon_one_reads_within_window() {
        let c = clock(1);
        assert_eq!(c.candidates(R, VirtualTime(10)).unwrap(), vec![9, 10, 11]);
    }

    #[test]
    fn out_of_range_error_is_rejected() {
        let mut c = clock(1);
        assert!(matches!(
            c.read_with_error(R, VirtualTime(5), 2),
            Err(ClockError::ErrorOutOfRange { .. })
        ));
    }

    #[test]
    fn unregistered_reader_is_rejected() {
        let mut c = TrustedClock::new(Epsilon(1));
        assert_eq!(
            c.read_with_error(R, VirtualTime(1), 0),
            Err(ClockError::UnknownReader(R))
        );
    }

    // Brute-force oracle: enumerate every tick value that satisfies both
    // |v - t| <= eps and v >= prev; the lift must return the minimum of that
    // set when the raw choice is not in it.
    fn oracle_min_valid(prev: u64, now: u64, eps: u64) -> Option<u64> {
        (now.saturating_sub(eps)..=now + eps).filter(|v| *v >= prev).min()
    }

    #[test]
    fn lift_holds_slow_clock_on_previous_value() {
        let mut c = clock(1);
        let first = c.read_with_error(R, VirtualTime(9), 1).unwrap(); // 10
        let second = c.read_with_error(R, VirtualTime(10), -1).unwrap();
        assert_eq!(Some(second.value), oracle_min_valid(10, 10, 1));
        assert_eq!((second.value, second.seq), (10, 1));
        assert!(second.order_key() > first.order_key());
        let third = c.read_with_error(R, VirtualTime(11), -1).unwrap();
        assert_eq!((third.value, third.seq), (10, 2));
        let fourth = c.read_with_error(R, VirtualTime(12), -1).unwrap();
        assert_eq!((fourth.value, fourth.seq), (11, 0));
    }

    #[test]
    fn same_tick_reread_keeps_value_and_advances_sequence() {
        let mut c = clock(1);
        c.read_with_error(R, VirtualTime(10), 1).unwrap(); // 11
                                                           // R1 caps the tick value at 11, so the re-read at t=10 is ordered
                                                           // after the first one by its sequence number alone.
        assert_eq!(oracle_min_valid(12, 10, 1), None);
        let again = c.read_with_error(R, VirtualTime(10), -1).unwrap();
        assert_eq!((again.value, again.seq), (11, 1));
        assert_eq!(c.candidates(R, VirtualTime(10)).unwrap(), vec![11]);
    }

    #[test]
    fn read_exact_rejects_inadmissible_values() {
        let mut c = clock(1);
        assert!(c.read_exact(R, VirtualTime(4), 3).is_ok());
        assert!(c.read_exact(R, VirtualTime(5), 3).is_err());
    }

    proptest! {
        #[test]
        fn readings_satisfy_bounds_and_monotonicity(
            eps in 0u64..4,
            steps in proptest::collection::vec((0u64..3, -3i64..=3, any::<bool>()), 1..60),
        ) {
            let mut c = clock(eps);
            let mut now = 0u64;
            let mut prev: BTreeMap<ActorId, (u64, u32)> = BTreeMap::new();
            let mut at_tick: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
            for (adv, err, which) in steps {
                now += adv;
                let reader = if which { R } else { S };
                let e = err.clamp(-(eps as i64), eps as i64);
                let ts = c.read_with_error(reader, VirtualTime(now), e).unwrap();
                let v = ts.value;
                // R1
                prop_assert!(v.abs_diff(now) <= eps);
                // R2
                if let Some(&key) = prev.get(&reader) {
                    prop_assert!(ts.order_key() > key);
                }
                prev.insert(reader, ts.order_key());
                at_tick.entry(now).or_default().push(v);
            }
            // pairwise bound between readers at the same tick
            for vs in at_tick.values() {
                let lo = vs.iter().min().unwrap();
                let hi = vs.iter().max().unwrap();
                prop_assert!(hi - lo <= 2 * eps);
            }
        }

        #[test]
        fn random_reads_stay_in_window(seed in any::<u64>(), eps in 0u64..5) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut c = clock(eps);
            for t in 0..50u64 {
                let v = c.read_random(R, VirtualTime(t), &mut rng).unwrap().value;
                prop_assert!(v.abs_diff(t) <= eps);
            }
        }
    }
}

//! Non-clonable monotonic counter devices.
//!
//! A device stores a `(count, holder)` pair. The only mutations are a plain
//! increment and a compare-and-increment; there is no way to lower the count.
//! Every operation is linearized at the tick the device processes it and the
//! caller observes the result after the configured latency.

pub mod linearizability;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::VirtualTime;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CounterId(pub u64);

impl fmt::Display for CounterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cid:{}", self.0)
    }
}

/// Unique identifier of an application, candidate or server instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(pub u64);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iid:{:x}", self.0)
    }
}

/// Counter pair ordered lexicographically; a missing holder sorts lowest.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CounterValue {
    pub count: u64,
    pub holder: Option<InstanceId>,
}

impl CounterValue {
    pub const INITIAL: CounterValue = CounterValue { count: 0, holder: None };

    pub fn new(count: u64, holder: InstanceId) -> Self {
        CounterValue {
            count,
            holder: Some(holder),
        }
    }

    /// The value a candidate proposes after observing `self`.
    pub fn successor(self, holder: InstanceId) -> Self {
        CounterValue::new(self.count + 1, holder)
    }
}

impl fmt::Display for CounterValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.holder {
            Some(h) => write!(f, "({},{})", self.count, h),
            None => write!(f, "({},⊥)", self.count),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CounterError {
    #[error("device unavailable until tick {until}")]
    DeviceUnavailable { until: u64 },
    #[error("proposal {proposed} does not follow {expected}")]
    InvalidProposal {
        expected: CounterValue,
        proposed: CounterValue,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IncrementOutcome {
    Ok,
    Stale(CounterValue),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CounterOp {
    Read,
    Increment,
    ConditionalIncrement {
        expected: CounterValue,
        proposed: CounterValue,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CounterRet {
    Value(CounterValue),
    Incremented(CounterValue),
    Cas(IncrementOutcome),
}

/// One completed device operation with its invocation/response interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CounterEvent {
    pub client: u64,
    pub invoke: u64,
    pub response: u64,
    pub op: CounterOp,
    pub ret: CounterRet,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CounterDevice {
    cid: CounterId,
    value: CounterValue,
    read_latency: u64,
    write_latency: u64,
    unavailable_until: Option<u64>,
    writes: u64,
    record_history: bool,
    history: Vec<CounterEvent>,
    values_seen: Vec<CounterValue>,
}

impl CounterDevice {
    pub fn new(cid: CounterId) -> Self {
        CounterDevice {
            cid,
            value: CounterValue::INITIAL,
            read_latency: 0,
            write_latency: 0,
            unavailable_until: None,
            writes: 0,
            record_history: true,
            history: Vec::new(),
            values_seen: vec![CounterValue::INITIAL],
        }
    }

    pub fn with_latency(mut self, read: u64, write: u64) -> Self {
        self.read_latency = read;
        self.write_latency = write;
        self
    }

    pub fn without_history(mut self) -> Self {
        self.record_history = false;
        self
    }

    pub fn cid(&self) -> CounterId {
        self.cid
    }

    pub fn read_latency(&self) -> u64 {
        self.read_latency
    }

    pub fn write_latency(&self) -> u64 {
        self.write_latency
    }

    /// Current value without a recorded read (inspection only).
    pub fn peek(&self) -> CounterValue {
        self.value
    }

    pub fn writes(&self) -> u64 {
        self.writes
    }

    pub fn history(&self) -> &[CounterEvent] {
        &self.history
    }

    /// Every value the device has held, in order.
    pub fn values_seen(&self) -> &[CounterValue] {
        &self.values_seen
    }

    pub fn isolate_until(&mut self, until: u64) {
        self.unavailable_until = Some(self.unavailable_until.unwrap_or(0).max(until));
    }

    fn check_available(&self, at: VirtualTime) -> Result<(), CounterError> {
        match self.unavailable_until {
            Some(until) if at.0 < until => Err(CounterError::DeviceUnavailable { until }),
            _ => Ok(()),
        }
    }

    fn record(&mut self, client: u64, at: VirtualTime, latency: u64, op: CounterOp, ret: CounterRet) {
        if self.record_history {
            self.history.push(CounterEvent {
                client,
                invoke: at.0,
                response: at.0 + latency,
                op,
                ret,
            });
        }
    }

    fn set(&mut self, v: CounterValue) {
        debug_assert!(v > self.value);
        self.value = v;
        self.writes += 1;
        if self.record_history {
            self.values_seen.push(v);
        }
    }

    pub fn read(&mut self, client: u64, at: VirtualTime) -> Result<CounterValue, CounterError> {
        self.check_available(at)?;
        let v = self.value;
        self.record(client, at, self.read_latency, CounterOp::Read, CounterRet::Value(v));
        Ok(v)
    }

    /// Bumps the count, keeping the holder. Used for storage versions.
    pub fn increment(&mut self, client: u64, at: VirtualTime) -> Result<CounterValue, CounterError> {
        self.check_available(at)?;
        let v = CounterValue {
            count: self.value.count + 1,
            holder: self.value.holder,
        };
        self.set(v);
        self.record(
            client,
            at,
            self.write_latency,
            CounterOp::Increment,
            CounterRet::Incremented(v),
        );
        Ok(v)
    }

    /// Writes `proposed` iff the device currently holds `expected`.
    pub fn conditional_increment(
        &mut self,
        client: u64,
        at: VirtualTime,
        expected: CounterValue,
        proposed: CounterValue,
    ) -> Result<IncrementOutcome, CounterError> {
        if proposed.count != expected.count + 1 {
            return Err(CounterError::InvalidProposal { expected, proposed });
        }
        self.check_available(at)?;
        let outcome = if self.value == expected {
            self.set(proposed);
            IncrementOutcome::Ok
        } else {
            IncrementOutcome::Stale(self.value)
        };
        self.record(
            client,
            at,
            self.write_latency,
            CounterOp::ConditionalIncrement { expected, proposed },
            CounterRet::Cas(outcome),
        );
        Ok(outcome)
    }

    /// True iff every recorded value is strictly above its predecessor.
    pub fn is_monotonic(&self) -> bool {
        self.values_seen.windows(2).all(|w| w[0] < w[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: InstanceId = InstanceId(0xa);
    const B: InstanceId = InstanceId(0xb);
    const C: InstanceId = InstanceId(0xc);

    fn t(x: u64) -> VirtualTime {
        VirtualTime(x)
    }

    #[test]
    fn fresh_device_reads_initial_pair() {
        let mut d = CounterDevice::new(CounterId(1));
        assert_eq!(d.read(0, t(0)).unwrap(), CounterValue::INITIAL);
    }

    #[test]
    fn read_after_write_sees_write() {
        let mut d = CounterDevice::new(CounterId(1));
        let p = CounterValue::INITIAL.successor(A);
        assert_eq!(
            d.conditional_increment(1, t(0), CounterValue::INITIAL, p).unwrap(),
            IncrementOutcome::Ok
        );
        assert_eq!(d.read(2, t(1)).unwrap(), CounterValue::new(1, A));
    }

    #[test]
    fn stale_expectation_returns_actual() {
        let mut d = CounterDevice::new(CounterId(1));
        let mut v = CounterValue::INITIAL;
        for h in [A, B, C] {
            let p = v.successor(h);
            d.conditional_increment(0, t(0), v, p).unwrap();
            v = p;
        }
        assert_eq!(v, CounterValue::new(3, C));
        let out = d
            .conditional_increment(0, t(1), CounterValue::new(2, B), CounterValue::new(3, A))
            .unwrap();
        assert_eq!(out, IncrementOutcome::Stale(CounterValue::new(3, C)));
        assert_eq!(d.peek(), CounterValue::new(3, C));
    }

    #[test]
    fn proposal_must_follow_expectation() {
        let mut d = CounterDevice::new(CounterId(1));
        let err = d
            .conditional_increment(0, t(0), CounterValue::INITIAL, CounterValue::new(2, A))
            .unwrap_err();
        assert!(matches!(err, CounterError::InvalidProposal { .. }));
    }

    #[test]
    fn concurrent_candidates_have_single_winner_in_either_order() {
        for order in [[A, B], [B, A]] {
            let mut d = CounterDevice::new(CounterId(1));
            let outs: Vec<_> = order
                .iter()
                .map(|h| {
                    d.conditional_increment(0, t(3), CounterValue::INITIAL, CounterValue::INITIAL.successor(*h))
                        .unwrap()
                })
                .collect();
            assert_eq!(outs[0], IncrementOutcome::Ok);
            assert_eq!(outs[1], IncrementOutcome::Stale(CounterValue::new(1, order[0])));
        }
    }

    #[test]
    fn isolated_device_is_unavailable() {
        let mut d = CounterDevice::new(CounterId(1));
        d.isolate_until(5);
        assert_eq!(d.read(0, t(4)), Err(CounterError::DeviceUnavailable { until: 5 }));
        assert!(d.read(0, t(5)).is_ok());
    }

    #[test]
    fn pair_order_breaks_ties_on_holder() {
        assert!(CounterValue::new(1, A) < CounterValue::new(1, B));
        assert!(CounterValue::new(1, B) < CounterValue::new(2, A));
        assert!(CounterValue::INITIAL < CounterValue::new(0, A));
    }

    #[test]
    fn history_records_latency_interval() {
        let mut d = CounterDevice::new(CounterId(1)).with_latency(1, 40);
        d.increment(0, t(10)).unwrap();
        let e = d.history()[0];
        assert_eq!((e.invoke, e.response), (10, 50));
        assert!(d.is_monotonic());
    }
}

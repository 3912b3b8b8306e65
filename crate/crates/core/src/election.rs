//! Local leader election over a monotonic counter.
//!
//! A candidate reads the counter pair `(C, ID)`, tries to write `(C+1, self)`
//! and terminates if that write loses. A winner waits until its trusted clock
//! has advanced by `wait` (normally `P + 4*eps`) past the write, confirms it
//! still holds the counter, and then leads. A leader re-reads the counter
//! whenever its clock shows `P` elapsed since the last confirmation and
//! terminates as soon as someone else holds it.
//!
//! The state machine is driven once per tick (`on_tick`, which models the
//! return from an enclave exit) and by device replies (`on_reply`). Each
//! device request carries the trusted reading taken when it was issued; the
//! device linearizes requests at issue time, so that reading bounds the
//! linearization point exactly.

use serde::{Deserialize, Serialize};

use crate::counter::{CounterDevice, CounterError, CounterId, CounterValue, IncrementOutcome, InstanceId};
use crate::sim::VirtualTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ElectionParams {
    pub epsilon: u64,
    pub period: u64,
    /// Trusted-time delay between the winning write and leading.
    pub wait: u64,
}

impl ElectionParams {
    /// Parameters with the safe handover wait `P + 4*eps`.
    pub fn new(epsilon: u64, period: u64) -> Self {
        ElectionParams {
            epsilon,
            period,
            wait: period + 4 * epsilon,
        }
    }

    pub fn with_wait(mut self, wait: u64) -> Self {
        self.wait = wait;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Reading,
    Writing,
    Waiting,
    Leading,
    Terminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeviceRequest {
    Read,
    ConditionalIncrement {
        expected: CounterValue,
        proposed: CounterValue,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeviceReply {
    Value(CounterValue),
    Outcome(IncrementOutcome),
    Unavailable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PendingRequest {
    pub request: DeviceRequest,
    /// Trusted reading taken when the request was issued.
    pub issued_tt: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CandidateState {
    pub instance: InstanceId,
    pub cid: CounterId,
    pub phase: Phase,
    /// Value observed by the initial read.
    pub observed: Option<CounterValue>,
    /// Value this candidate wrote, once the write succeeded.
    pub claimed: Option<CounterValue>,
    pub write_tt: Option<u64>,
    pub last_check_tt: Option<u64>,
    pub pending: Option<PendingRequest>,
    /// Tick at which the candidate last did application work.
    pub worked_at: Option<VirtualTime>,
    /// Conditional increments actually executed by the device.
    pub increments: u32,
}

/// Creates a candidate. The first `on_tick` issues the counter read.
pub fn start_candidate(instance: InstanceId, cid: CounterId) -> CandidateState {
    CandidateState {
        instance,
        cid,
        phase: Phase::Reading,
        observed: None,
        claimed: None,
        write_tt: None,
        last_check_tt: None,
        pending: None,
        worked_at: None,
        increments: 0,
    }
}

impl CandidateState {
    pub fn is_terminated(&self) -> bool {
        self.phase == Phase::Terminated
    }

    /// Whether the next `on_tick` consumes a trusted clock reading.
    pub fn wants_clock(&self) -> bool {
        self.pending.is_none() && matches!(self.phase, Phase::Writing | Phase::Waiting | Phase::Leading)
    }

    /// Tick handler. `tt` must be `Some` iff [`Self::wants_clock`] was true.
    /// Returns the device request to issue, if any.
    pub fn on_tick(&mut self, now: VirtualTime, tt: Option<u64>, params: &ElectionParams) -> Option<DeviceRequest> {
        if self.pending.is_some() {
            return None;
        }
        let request = match self.phase {
            Phase::Terminated => return None,
            Phase::Reading => DeviceRequest::Read,
            Phase::Writing => {
                let expected = self.observed.expect("writing implies an observed value");
                DeviceRequest::ConditionalIncrement {
                    expected,
                    proposed: expected.successor(self.instance),
                }
            }
            Phase::Waiting => {
                let tt = tt.expect("waiting reads the clock");
                let write_tt = self.write_tt.expect("waiting implies a completed write");
                if tt < write_tt + params.wait {
                    return None;
                }
                DeviceRequest::Read
            }
            Phase::Leading => {
                let tt = tt.expect("leading reads the clock");
                let last = self.last_check_tt.expect("leading implies a check");
                if tt < last + params.period {
                    self.worked_at = Some(now);
                    return None;
                }
                DeviceRequest::Read
            }
        };
        self.pending = Some(PendingRequest { request, issued_tt: tt });
        Some(request)
    }

    /// Applies a device reply to the outstanding request.
    pub fn on_reply(&mut self, now: VirtualTime, reply: DeviceReply) {
        let Some(pending) = self.pending.take() else {
            return;
        };
        if self.phase == Phase::Terminated {
            return;
        }
        match (self.phase, reply) {
            (_, DeviceReply::Unavailable) => {
                // retried on the next tick
            }
            (Phase::Reading, DeviceReply::Value(v)) => {
                self.observed = Some(v);
                self.phase = Phase::Writing;
            }
            (Phase::Writing, DeviceReply::Outcome(outcome)) => {
                self.increments += 1;
                match outcome {
                    IncrementOutcome::Ok => {
                        if let DeviceRequest::ConditionalIncrement { proposed, .. } = pending.request {
                            self.claimed = Some(proposed);
                        }
                        self.write_tt = pending.issued_tt;
                        self.phase = Phase::Waiting;
                    }
                    IncrementOutcome::Stale(_) => self.phase = Phase::Terminated,
                }
            }
            (Phase::Waiting | Phase::Leading, DeviceReply::Value(v)) => {
                if v.holder == Some(self.instance) {
                    self.phase = Phase::Leading;
                    self.last_check_tt = pending.issued_tt;
                    self.worked_at = Some(now);
                } else {
                    self.phase = Phase::Terminated;
                    self.worked_at = None;
                }
            }
            (phase, reply) => unreachable!("reply {reply:?} in phase {phase:?}"),
        }
    }

    /// One indivisible step against a zero-latency device: tick, issue,
    /// apply, reply.
    pub fn step_atomic(
        &mut self,
        now: VirtualTime,
        tt: Option<u64>,
        device: &mut CounterDevice,
        params: &ElectionParams,
    ) {
        if let Some(req) = self.on_tick(now, tt, params) {
            let reply = execute(device, self.instance.0, now, req);
            self.on_reply(now, reply);
        }
    }

    /// Leading and doing application work in tick `now`.
    pub fn is_doing_work(&self, now: VirtualTime) -> bool {
        self.phase == Phase::Leading && self.pending.is_none() && self.worked_at == Some(now)
    }
}

/// Runs a request against a device, mapping unavailability to a reply.
pub fn execute(device: &mut CounterDevice, client: u64, now: VirtualTime, req: DeviceRequest) -> DeviceReply {
    let result = match req {
        DeviceRequest::Read => device.read(client, now).map(DeviceReply::Value),
        DeviceRequest::ConditionalIncrement { expected, proposed } => device
            .conditional_increment(client, now, expected, proposed)
            .map(DeviceReply::Outcome),
    };
    match result {
        Ok(r) => r,
        Err(CounterError::DeviceUnavailable { .. }) => DeviceReply::Unavailable,
        Err(e @ CounterError::InvalidProposal { .. }) => unreachable!("{e}"),
    }
}

/// True iff no two distinct candidates on the same counter work at `now`.
pub fn single_worker(candidates: &[CandidateState], now: VirtualTime) -> bool {
    let mut working: Vec<CounterId> = candidates
        .iter()
        .filter(|c| c.is_doing_work(now))
        .map(|c| c.cid)
        .collect();
    working.sort();
    working.windows(2).all(|w| w[0] != w[1])
}

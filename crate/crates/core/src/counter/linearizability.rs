//! Linearizability checking for recorded operation histories.
//!
//! Wing & Gong style search with memoization on (linearized set, state):
//! repeatedly pick an operation that no pending operation must precede in real
//! time, apply it to the sequential specification, and backtrack on mismatch.

use std::collections::HashSet;
use std::hash::Hash;

use super::{CounterEvent, CounterOp, CounterRet, CounterValue, IncrementOutcome};

pub trait SequentialSpec {
    type State: Clone + Eq + Hash;
    type Op;
    type Ret;

    fn init(&self) -> Self::State;

    /// Next state if `op` returning `ret` is legal in `state`.
    fn step(&self, state: &Self::State, op: &Self::Op, ret: &Self::Ret) -> Option<Self::State>;
}

/// A completed operation. The linearization point must fall in
/// `[invoke, response]` (both inclusive, in ticks).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Operation<Op, Ret> {
    pub invoke: u64,
    pub response: u64,
    pub op: Op,
    pub ret: Ret,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NotLinearizable {
    /// Length of the longest legal prefix found during the search.
    pub longest_prefix: usize,
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct Bits(Vec<u64>);

impl Bits {
    fn new(n: usize) -> Self {
        Bits(vec![0; n.div_ceil(64)])
    }
    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }
    fn clear(&mut self, i: usize) {
        self.0[i / 64] &= !(1 << (i % 64));
    }
    fn get(&self, i: usize) -> bool {
        self.0[i / 64] & (1 << (i % 64)) != 0
    }
}

/// Returns a legal linearization order (indices into `history`) or an error.
pub fn check<S: SequentialSpec>(spec: &S, history: &[Operation<S::Op, S::Ret>]) -> Result<Vec<usize>, NotLinearizable> {
    let n = history.len();
    let mut by_invoke: Vec<usize> = (0..n).collect();
    by_invoke.sort_by_key(|&i| (history[i].invoke, history[i].response));

    let mut done = Bits::new(n);
    let mut memo: HashSet<(Bits, S::State)> = HashSet::new();
    let mut order: Vec<usize> = Vec::with_capacity(n);
    // Each frame: (state before choosing, next candidate position to try).
    let mut stack: Vec<(S::State, usize)> = vec![(spec.init(), 0)];
    let mut longest = 0;

    while let Some((state, pos)) = stack.last().cloned() {
        if order.len() == n {
            return Ok(order);
        }
        let min_response = by_invoke
            .iter()
            .filter(|&&i| !done.get(i))
            .map(|&i| history[i].response)
            .min()
            .unwrap_or(u64::MAX);
        let mut advanced = false;
        let mut p = pos;
        while p < n {
            let i = by_invoke[p];
            p += 1;
            if done.get(i) {
                continue;
            }
            if history[i].invoke > min_response {
                break;
            }
            if let Some(next) = spec.step(&state, &history[i].op, &history[i].ret) {
                done.set(i);
                if memo.insert((done.clone(), next.clone())) {
                    stack.last_mut().expect("frame").1 = p;
                    order.push(i);
                    longest = longest.max(order.len());
                    stack.push((next, 0));
                    advanced = true;
                    break;
                }
                done.clear(i);
            }
        }
        if !advanced {
            stack.pop();
            if let Some(i) = order.pop() {
                done.clear(i);
            }
        }
    }
    Err(NotLinearizable {
        longest_prefix: longest,
    })
}

/// Sequential specification of a counter device.
#[derive(Debug, Clone, Copy, Default)]
pub struct CounterSpec {
    pub initial: CounterValue,
}

impl SequentialSpec for CounterSpec {
    type State = CounterValue;
    type Op = CounterOp;
    type Ret = CounterRet;

    fn init(&self) -> CounterValue {
        self.initial
    }

    fn step(&self, s: &CounterValue, op: &CounterOp, ret: &CounterRet) -> Option<CounterValue> {
        match (op, ret) {
            (CounterOp::Read, CounterRet::Value(v)) => (v == s).then_some(*s),
            (CounterOp::Increment, CounterRet::Incremented(v)) => {
                let next = CounterValue {
                    count: s.count + 1,
                    holder: s.holder,
                };
                (*v == next).then_some(next)
            }
            (CounterOp::ConditionalIncrement { expected, proposed }, CounterRet::Cas(IncrementOutcome::Ok)) => {
                (s == expected).then_some(*proposed)
            }
            (CounterOp::ConditionalIncrement { expected, .. }, CounterRet::Cas(IncrementOutcome::Stale(actual))) => {
                (s != expected && actual == s).then_some(*s)
            }
            _ => None,
        }
    }
}

pub fn counter_history(events: &[CounterEvent]) -> Vec<Operation<CounterOp, CounterRet>> {
    events
        .iter()
        .map(|e| Operation {
            invoke: e.invoke,
            response: e.response,
            op: e.op,
            ret: e.ret,
        })
        .collect()
}

/// Checks a device's recorded history against the counter specification.
pub fn check_counter(events: &[CounterEvent]) -> Result<Vec<usize>, NotLinearizable> {
    check(&CounterSpec::default(), &counter_history(events))
}

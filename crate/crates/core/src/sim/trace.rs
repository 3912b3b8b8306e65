use std::fmt::Write as _;

use thiserror::Error;

use super::{ActorId, Digest};

/// One processed event: `tick<TAB>actor<TAB>event<TAB>digest`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TraceRecord {
    pub tick: u64,
    pub actor: ActorId,
    pub event: String,
    pub digest: Digest,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("line {line}: expected 4 tab-separated fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: {msg}")]
    Field { line: usize, msg: String },
    #[error("record {index}: digest mismatch (expected {expected}, got {actual})")]
    DigestMismatch {
        index: usize,
        expected: Digest,
        actual: Digest,
    },
    #[error("trace length mismatch: expected {expected} records, replay produced {actual}")]
    LengthMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScheduleTrace {
    records: Vec<TraceRecord>,
}

impl ScheduleTrace {
    pub fn push(&mut self, mut record: TraceRecord) {
        if record.event.contains(['\t', '\n', '\r']) {
            record.event = record.event.replace(['\t', '\n', '\r'], " ");
        }
        self.records.push(record);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// Digest over the exported text; equal traces have equal digests.
    pub fn digest(&self) -> Digest {
        Digest::of(self.export().as_bytes())
    }

    pub fn export(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 48);
        for r in &self.records {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", r.tick, r.actor, r.event, r.digest);
        }
        out
    }

    pub fn parse(text: &str) -> Result<ScheduleTrace, TraceError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(TraceError::FieldCount {
                    line: line_no,
                    found: fields.len(),
                });
            }
            let field_err = |msg: String| TraceError::Field { line: line_no, msg };
            records.push(TraceRecord {
                tick: fields[0].parse().map_err(|e| field_err(format!("tick: {e}")))?,
                actor: fields[1].parse().map_err(|e| field_err(format!("actor: {e}")))?,
                event: fields[2].to_string(),
                digest: fields[3].parse().map_err(|e| field_err(format!("digest: {e}")))?,
            });
        }
        Ok(ScheduleTrace { records })
    }

    /// Compares digests record by record against a replayed trace.
    pub fn verify_replay(&self, replayed: &ScheduleTrace) -> Result<(), TraceError> {
        if self.records.len() != replayed.records.len() {
            return Err(TraceError::LengthMismatch {
                expected: self.records.len(),
                actual: replayed.records.len(),
            });
        }
        for (index, (a, b)) in self.records.iter().zip(&replayed.records).enumerate() {
            if a.digest != b.digest {
                return Err(TraceError::DigestMismatch {
                    index,
                    expected: a.digest,
                    actual: b.digest,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ActorKind;
    use proptest::prelude::*;

    fn record(tick: u64, event: &str, digest: u128) -> TraceRecord {
        TraceRecord {
            tick,
            actor: ActorId::new(ActorKind::AppInstance, tick % 3),
            event: event.to_string(),
            digest: Digest(digest),
        }
    }

    #[test]
    fn export_uses_tab_separated_lines() {
        let mut t = ScheduleTrace::default();
        t.push(record(4, "timer 1", 0xab));
        assert_eq!(t.export(), format!("4\tapp#1\ttimer 1\t{:032x}\n", 0xab));
    }

    #[test]
    fn tabs_in_events_are_flattened() {
        let mut t = ScheduleTrace::default();
        t.push(record(1, "a\tb\nc", 1));
        assert_eq!(t.records()[0].event, "a b c");
    }

    #[test]
    fn malformed_lines_are_reported() {
        assert_eq!(
            ScheduleTrace::parse("1\tapp#0\tx\n"),
            Err(TraceError::FieldCount { line: 1, found: 3 })
        );
        assert!(matches!(
            ScheduleTrace::parse("x\tapp#0\tx\t00"),
            Err(TraceError::Field { line: 1, .. })
        ));
    }

    #[test]
    fn replay_detects_digest_divergence() {
        let mut a = ScheduleTrace::default();
        a.push(record(1, "e", 1));
        let mut b = ScheduleTrace::default();
        b.push(record(1, "e", 2));
        assert!(matches!(
            a.verify_replay(&b),
            Err(TraceError::DigestMismatch { index: 0, .. })
        ));
        assert!(a.verify_replay(&a.clone()).is_ok());
    }

    proptest! {
        #[test]
        fn export_parse_round_trip(rows in proptest::collection::vec((0u64..1000, "[a-z =0-9]{0,12}", any::<u128>()), 0..20)) {
            let mut t = ScheduleTrace::default();
            for (tick, ev, d) in rows {
                t.push(record(tick, &ev, d));
            }
            let parsed = ScheduleTrace::parse(&t.export()).unwrap();
            prop_assert_eq!(parsed.digest(), t.digest());
            prop_assert_eq!(parsed, t);
        }
    }
}

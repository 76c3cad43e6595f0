use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// A logical call to `service` started (external request or dependency call).
    Arrival,
    /// An attempt of the call began service on `instance`.
    Dispatch,
    /// The call succeeded; `latency_us` is measured from its arrival.
    Complete,
    /// The call failed after its retry policy was exhausted.
    Fail,
    /// The call was shed because every attempt found a full queue.
    Drop,
    InstanceDown,
    InstanceUp,
    FaultApplied,
    FaultReverted,
}

impl EventKind {
    pub fn is_terminal(self) -> bool {
        matches!(self, EventKind::Complete | EventKind::Fail | EventKind::Drop)
    }

    pub fn is_fault_bookkeeping(self) -> bool {
        matches!(self, EventKind::FaultApplied | EventKind::FaultReverted)
    }
}

/// One trace line. Fields are declared in key order so each exported line is
/// canonical JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub detail: String,
    pub instance: Option<u32>,
    pub kind: EventKind,
    pub latency_us: Option<u64>,
    /// Call that issued this one; `None` for external requests.
    pub parent_id: Option<u64>,
    pub request_id: u64,
    pub service: String,
    pub t_us: u64,
}

impl TraceEvent {
    pub fn is_external(&self) -> bool {
        self.parent_id.is_none()
    }
}

/// Request-level counters over external requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TraceSummary {
    pub arrivals: u64,
    pub completions: u64,
    pub failures: u64,
    pub drops: u64,
    pub in_flight: u64,
}

impl TraceSummary {
    pub fn record(&mut self, event: &TraceEvent) {
        if !event.is_external() {
            return;
        }
        match event.kind {
            EventKind::Arrival => {
                self.arrivals += 1;
                self.in_flight += 1;
            }
            EventKind::Complete => {
                self.completions += 1;
                self.in_flight -= 1;
            }
            EventKind::Fail => {
                self.failures += 1;
                self.in_flight -= 1;
            }
            EventKind::Drop => {
                self.drops += 1;
                self.in_flight -= 1;
            }
            _ => {}
        }
    }
}

/// Ordered event log of a simulation (or of live probe traffic).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new() -> Self {
        Trace::default()
    }

    pub fn push(&mut self, event: TraceEvent) {
        debug_assert!(self.events.last().is_none_or(|e| e.t_us <= event.t_us));
        self.events.push(event);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn summary(&self) -> TraceSummary {
        let mut s = TraceSummary::default();
        for e in &self.events {
            s.record(e);
        }
        s
    }

    /// Events with `t0 <= t_us < t1`. Relies on time order.
    pub fn window(&self, t0_us: u64, t1_us: u64) -> &[TraceEvent] {
        let lo = self.events.partition_point(|e| e.t_us < t0_us);
        let hi = self.events.partition_point(|e| e.t_us < t1_us);
        &self.events[lo..hi.max(lo)]
    }

    pub fn end_us(&self) -> u64 {
        self.events.last().map_or(0, |e| e.t_us)
    }

    /// Copy without fault_applied/fault_reverted records.
    pub fn without_fault_bookkeeping(&self) -> Trace {
        Trace {
            events: self
                .events
                .iter()
                .filter(|e| !e.kind.is_fault_bookkeeping())
                .cloned()
                .collect(),
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.events.len() * 96);
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_jsonl(text: &str) -> Result<Trace, serde_json::Error> {
        let events = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Trace { events })
    }

    /// Lowercase hex SHA-256 of the JSON Lines export.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        self.write_jsonl(HashWriter(&mut hasher))
            .expect("hashing cannot fail");
        hex::encode(hasher.finalize())
    }
}

struct HashWriter<'a>(&'a mut Sha256);

impl Write for HashWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t_us: u64, kind: EventKind, request_id: u64) -> TraceEvent {
        TraceEvent {
            t_us,
            kind,
            request_id,
            parent_id: None,
            service: "api".into(),
            instance: Some(0),
            latency_us: None,
            detail: String::new(),
        }
    }

    #[test]
    fn jsonl_lines_are_canonical() {
        let t = Trace {
            events: vec![ev(5, EventKind::Arrival, 1)],
        };
        assert_eq!(
            String::from_utf8(t.to_jsonl()).unwrap(),
            "{\"detail\":\"\",\"instance\":0,\"kind\":\"arrival\",\"latency_us\":null,\"parent_id\":null,\"request_id\":1,\"service\":\"api\",\"t_us\":5}\n"
        );
        assert_eq!(t.to_jsonl(), [crate::parse::canonical_json(&t.events[0]), b"\n".to_vec()].concat());
        assert_eq!(Trace::from_jsonl(&String::from_utf8(t.to_jsonl()).unwrap()).unwrap(), t);
    }

    #[test]
    fn digest_is_sha256_of_export() {
        let t = Trace {
            events: vec![ev(5, EventKind::Arrival, 1), ev(9, EventKind::Complete, 1)],
        };
        assert_eq!(t.digest(), hex::encode(Sha256::digest(t.to_jsonl())));
    }

    #[test]
    fn window_is_half_open() {
        let t = Trace {
            events: vec![
                ev(0, EventKind::Arrival, 1),
                ev(10, EventKind::Arrival, 2),
                ev(20, EventKind::Arrival, 3),
            ],
        };
        assert_eq!(t.window(0, 20).len(), 2);
        assert_eq!(t.window(10, 11).len(), 1);
        assert_eq!(t.window(21, 30).len(), 0);
    }
}

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use crate::hypothesis::{MetricSource, SourceError};
use crate::model::MetricSelector;
use crate::sim::metrics::{sample_metric, MetricSample};
use crate::sim::trace::{EventKind, Trace, TraceEvent};

/// Live metric source: sends echo round-trips through the proxy on a fixed
/// period and records them as a trace, one service per target address.
#[derive(Debug)]
pub struct ProbeSource {
    targets: BTreeMap<String, SocketAddr>,
    period: Duration,
    timeout: Duration,
    payload: Vec<u8>,
    start: Instant,
    trace: Trace,
    next_id: u64,
}

impl ProbeSource {
    pub fn new(targets: BTreeMap<String, SocketAddr>) -> Self {
        ProbeSource {
            targets,
            period: Duration::from_millis(50),
            timeout: Duration::from_secs(1),
            payload: b"chaoskit-probe\n".to_vec(),
            start: Instant::now(),
            trace: Trace::new(),
            next_id: 0,
        }
    }

    pub fn with_period(mut self, period: Duration) -> Self {
        self.period = period.max(Duration::from_millis(1));
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn elapsed_us(&self) -> u64 {
        self.start.elapsed().as_micros() as u64
    }

    fn roundtrip(&self, addr: SocketAddr) -> Result<(), String> {
        let mut s = TcpStream::connect_timeout(&addr, self.timeout).map_err(|e| e.kind().to_string())?;
        s.set_read_timeout(Some(self.timeout)).map_err(|e| e.to_string())?;
        s.set_nodelay(true).map_err(|e| e.to_string())?;
        s.write_all(&self.payload).map_err(|e| e.kind().to_string())?;
        let mut back = vec![0u8; self.payload.len()];
        s.read_exact(&mut back).map_err(|e| e.kind().to_string())?;
        if back != self.payload {
            return Err("corrupt".into());
        }
        Ok(())
    }

    fn probe_all(&mut self) {
        let targets: Vec<(String, SocketAddr)> = self.targets.iter().map(|(k, v)| (k.clone(), *v)).collect();
        for (service, addr) in targets {
            let id = self.next_id;
            self.next_id += 1;
            let t0 = self.elapsed_us();
            let event = |t_us, kind, latency_us, detail: String| TraceEvent {
                t_us,
                kind,
                request_id: id,
                parent_id: None,
                service: service.clone(),
                instance: None,
                latency_us,
                detail,
            };
            self.trace.push(event(t0, EventKind::Arrival, None, String::new()));
            let outcome = self.roundtrip(addr);
            let t1 = self.elapsed_us().max(t0);
            let e = match outcome {
                Ok(()) => event(t1, EventKind::Complete, Some(t1 - t0), String::new()),
                Err(why) => event(t1, EventKind::Fail, None, why),
            };
            self.trace.push(e);
        }
    }
}

impl MetricSource for ProbeSource {
    fn now_us(&self) -> u64 {
        self.elapsed_us()
    }

    fn advance(&mut self, ms: u64) -> Result<(), SourceError> {
        let deadline = Instant::now() + Duration::from_millis(ms);
        loop {
            let tick = Instant::now();
            if tick >= deadline {
                return Ok(());
            }
            self.probe_all();
            let next = (tick + self.period).min(deadline);
            if let Some(wait) = next.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
    }

    fn sample(&mut self, selector: &MetricSelector, t0_us: u64, t1_us: u64) -> Result<MetricSample, SourceError> {
        if !self.targets.contains_key(&selector.service) {
            return Err(SourceError::UnknownService(selector.service.clone()));
        }
        Ok(sample_metric(&self.trace, selector, t0_us, t1_us))
    }

    fn trace(&self) -> Option<Trace> {
        Some(self.trace.clone())
    }
}

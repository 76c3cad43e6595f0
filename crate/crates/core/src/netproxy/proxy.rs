use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::runtime::Runtime;
use tokio::task::JoinHandle;
use tokio::time::Instant;

use super::bucket::TokenBucket;
use crate::model::RouteConfig;

const CHUNK: usize = 16 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LinkShaping {
    pub latency_us: u64,
    pub jitter_us: u64,
    /// 0 = unlimited.
    pub bytes_per_sec: u64,
    pub refuse_new: bool,
    /// One-shot: closes established connections when applied, then clears.
    pub kill_active: bool,
}

impl LinkShaping {
    pub fn neutral() -> Self {
        LinkShaping::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyRoute {
    pub name: String,
    pub listen: String,
    pub upstream: String,
    #[serde(default)]
    pub shaping: LinkShaping,
}

impl From<&RouteConfig> for ProxyRoute {
    fn from(r: &RouteConfig) -> Self {
        ProxyRoute {
            name: r.name.clone(),
            listen: r.listen.clone(),
            upstream: r.upstream.clone(),
            shaping: LinkShaping::neutral(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("route `{route}`: cannot bind {addr}: {source}")]
    Bind {
        route: String,
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate route name `{0}`")]
    DuplicateRoute(String),
    #[error("route `{0}` listens on its own upstream")]
    SelfLoop(String),
    #[error("unknown route `{0}`")]
    UnknownRoute(String),
    #[error("proxy runtime: {0}")]
    Runtime(std::io::Error),
}

type Conns = Arc<Mutex<HashMap<u64, JoinHandle<()>>>>;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

struct RouteState {
    listen: SocketAddr,
    upstream: String,
    shaping: Arc<Mutex<LinkShaping>>,
    acceptor: Option<JoinHandle<()>>,
    conns: Conns,
}

/// A running proxy. Control calls are synchronous and may come from any
/// thread outside the proxy's own runtime.
pub struct ProxyInstance {
    runtime: Option<Runtime>,
    routes: BTreeMap<String, RouteState>,
    next_conn: Arc<AtomicU64>,
}

impl std::fmt::Debug for ProxyInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProxyInstance")
            .field("routes", &self.routes.keys().collect::<Vec<_>>())
            .finish()
    }
}

fn bind(route: &str, addr: &str) -> Result<std::net::TcpListener, ProxyError> {
    let l = std::net::TcpListener::bind(addr).map_err(|source| ProxyError::Bind {
        route: route.into(),
        addr: addr.into(),
        source,
    })?;
    l.set_nonblocking(true).map_err(|source| ProxyError::Bind {
        route: route.into(),
        addr: addr.into(),
        source,
    })?;
    Ok(l)
}

pub fn start_proxy(routes: Vec<ProxyRoute>) -> Result<ProxyInstance, ProxyError> {
    let mut seen = std::collections::BTreeSet::new();
    for r in &routes {
        if !seen.insert(r.name.clone()) {
            return Err(ProxyError::DuplicateRoute(r.name.clone()));
        }
        if r.listen == r.upstream {
            return Err(ProxyError::SelfLoop(r.name.clone()));
        }
    }
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(ProxyError::Runtime)?;
    let mut proxy = ProxyInstance {
        runtime: Some(runtime),
        routes: BTreeMap::new(),
        next_conn: Arc::new(AtomicU64::new(0)),
    };
    for r in routes {
        let std_listener = bind(&r.name, &r.listen)?;
        let listen = std_listener.local_addr().map_err(ProxyError::Runtime)?;
        let mut state = RouteState {
            listen,
            upstream: r.upstream.clone(),
            shaping: Arc::new(Mutex::new(LinkShaping::neutral())),
            acceptor: None,
            conns: Arc::new(Mutex::new(HashMap::new())),
        };
        if r.shaping.refuse_new {
            drop(std_listener);
        } else {
            state.acceptor = Some(proxy.spawn_acceptor(&state, std_listener)?);
        }
        *lock(&state.shaping) = LinkShaping {
            kill_active: false,
            ..r.shaping
        };
        proxy.routes.insert(r.name, state);
    }
    Ok(proxy)
}

impl ProxyInstance {
    fn rt(&self) -> &Runtime {
        self.runtime.as_ref().expect("proxy is running")
    }

    fn spawn_acceptor(&self, state: &RouteState, listener: std::net::TcpListener) -> Result<JoinHandle<()>, ProxyError> {
        let rt = self.rt();
        let _guard = rt.enter();
        let listener = TcpListener::from_std(listener).map_err(ProxyError::Runtime)?;
        let upstream = state.upstream.clone();
        let shaping = state.shaping.clone();
        let conns = state.conns.clone();
        let ids = self.next_conn.clone();
        Ok(rt.spawn(async move {
            loop {
                let Ok((client, _)) = listener.accept().await else {
                    tokio::time::sleep(Duration::from_millis(1)).await;
                    continue;
                };
                let id = ids.fetch_add(1, Ordering::Relaxed);
                let task_conns = conns.clone();
                let task = tokio::spawn(serve(client, upstream.clone(), shaping.clone(), task_conns, id));
                let mut map = lock(&conns);
                if !task.is_finished() {
                    map.insert(id, task);
                }
                map.retain(|_, t| !t.is_finished());
            }
        }))
    }

    pub fn route_names(&self) -> Vec<String> {
        self.routes.keys().cloned().collect()
    }

    /// Actual bound address (useful when the route listens on port 0).
    pub fn listen_addr(&self, route: &str) -> Result<SocketAddr, ProxyError> {
        self.state(route).map(|s| s.listen)
    }

    pub fn shaping(&self, route: &str) -> Result<LinkShaping, ProxyError> {
        self.state(route).map(|s| *lock(&s.shaping))
    }

    pub fn active_connections(&self, route: &str) -> Result<usize, ProxyError> {
        let s = self.state(route)?;
        let mut map = lock(&s.conns);
        map.retain(|_, t| !t.is_finished());
        Ok(map.len())
    }

    fn state(&self, route: &str) -> Result<&RouteState, ProxyError> {
        self.routes
            .get(route)
            .ok_or_else(|| ProxyError::UnknownRoute(route.into()))
    }

    /// Install new shaping on a route and return the previous value.
    pub fn apply_shaping(&mut self, route: &str, shaping: LinkShaping) -> Result<LinkShaping, ProxyError> {
        let state = self
            .routes
            .get(route)
            .ok_or_else(|| ProxyError::UnknownRoute(route.into()))?;
        let previous = {
            let mut cur = lock(&state.shaping);
            let prev = *cur;
            *cur = LinkShaping {
                kill_active: false,
                ..shaping
            };
            prev
        };
        if shaping.refuse_new && !previous.refuse_new {
            if let Some(acceptor) = self.routes.get_mut(route).and_then(|s| s.acceptor.take()) {
                acceptor.abort();
                wait_finished(&acceptor);
            }
        } else if !shaping.refuse_new && previous.refuse_new {
            let state = &self.routes[route];
            let listener = bind(route, &state.listen.to_string())?;
            let acceptor = self.spawn_acceptor(state, listener)?;
            self.routes.get_mut(route).expect("checked").acceptor = Some(acceptor);
        }
        if shaping.kill_active {
            let state = &self.routes[route];
            let tasks: Vec<JoinHandle<()>> = lock(&state.conns).drain().map(|(_, t)| t).collect();
            for t in &tasks {
                t.abort();
            }
            for t in &tasks {
                wait_finished(t);
            }
        }
        Ok(previous)
    }

    /// Close listeners and connections and release the ports.
    pub fn stop(&mut self) {
        for state in self.routes.values_mut() {
            if let Some(a) = state.acceptor.take() {
                a.abort();
            }
            for (_, t) in lock(&state.conns).drain() {
                t.abort();
            }
        }
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_timeout(Duration::from_secs(1));
        }
    }
}

impl Drop for ProxyInstance {
    fn drop(&mut self) {
        self.stop();
    }
}

fn wait_finished<T>(task: &JoinHandle<T>) {
    let deadline = std::time::Instant::now() + Duration::from_secs(2);
    while !task.is_finished() && std::time::Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(1));
    }
}

async fn serve(client: TcpStream, upstream: String, shaping: Arc<Mutex<LinkShaping>>, conns: Conns, id: u64) {
    if let Ok(server) = TcpStream::connect(&upstream).await {
        let _ = client.set_nodelay(true);
        let _ = server.set_nodelay(true);
        let (cr, cw) = client.into_split();
        let (sr, sw) = server.into_split();
        let up = pump(cr, sw, shaping.clone(), true);
        let down = pump(sr, cw, shaping, false);
        let _ = tokio::join!(up, down);
    }
    lock(&conns).remove(&id);
}

/// Copy one direction. Latency applies per chunk towards the upstream only;
/// the bandwidth limit applies in both directions.
async fn pump<R, W>(mut from: R, mut to: W, shaping: Arc<Mutex<LinkShaping>>, upstream_bound: bool) -> std::io::Result<()>
where
    R: AsyncReadExt + Unpin,
    W: AsyncWriteExt + Unpin,
{
    let mut buf = vec![0u8; CHUNK];
    let mut bucket: Option<TokenBucket> = None;
    loop {
        let n = from.read(&mut buf).await?;
        if n == 0 {
            let _ = to.shutdown().await;
            return Ok(());
        }
        let s = *lock(&shaping);
        if upstream_bound && (s.latency_us > 0 || s.jitter_us > 0) {
            let extra = if s.jitter_us > 0 {
                rand::thread_rng().gen_range(0..=s.jitter_us)
            } else {
                0
            };
            tokio::time::sleep(Duration::from_micros(s.latency_us + extra)).await;
        }
        let mut sent = 0;
        while sent < n {
            let rate = lock(&shaping).bytes_per_sec;
            if rate == 0 {
                bucket = None;
                to.write_all(&buf[sent..n]).await?;
                sent = n;
                continue;
            }
            let b = bucket.get_or_insert_with(|| TokenBucket::new(rate, Instant::now()));
            b.set_rate(rate);
            match b.take(n - sent, Instant::now()) {
                Ok(k) => {
                    to.write_all(&buf[sent..sent + k]).await?;
                    sent += k;
                }
                Err(until) => tokio::time::sleep_until(until).await,
            }
        }
    }
}

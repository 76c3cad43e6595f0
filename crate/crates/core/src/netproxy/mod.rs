//! TCP fault-injection proxy for local processes.

mod bucket;
pub mod driver;
pub mod probe;
pub mod proxy;

pub use driver::{proxy_capabilities, ProxyDriver};
pub use probe::ProbeSource;
pub use proxy::{start_proxy, LinkShaping, ProxyError, ProxyInstance, ProxyRoute};

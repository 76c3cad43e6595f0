//! Deterministic discrete-event simulator of a small service mesh.

pub mod driver;
pub mod metrics;
pub mod rng;
pub mod topology;
pub mod trace;
pub mod world;

pub use driver::{share, SharedWorld, SimDriver, SimSource};
pub use metrics::{sample_metric, MetricSample};
pub use rng::SplitMix64;
pub use topology::{Edge, RetryPolicy, ServiceSpec, ServiceTag, Topology, TopologyError, TrafficModel};
pub use trace::{EventKind, Trace, TraceEvent, TraceSummary};
pub use world::{FaultHandle, SimError, World};

/// Build a world from a topology and an experiment seed.
pub fn build_world(topology: Topology, seed: u64) -> Result<World, TopologyError> {
    World::build(topology, seed)
}

//! Stochastic link bandwidth and node models.

use crate::protocol::NodeId;
use crate::rng::{substream, Stream};
use rand_distr::{Distribution, Normal};

pub const DEFAULT_NIC_CAP_MBPS: f64 = 10_000.0;
pub const DEFAULT_RESAMPLE_INTERVAL_S: f64 = 10.0;
pub const DEFAULT_FAULT_FLOOR_MBPS: f64 = 0.1;

/// Log-normal training time: `exp(mu + sigma * z)` seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainTimeDist {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeModel {
    pub id: NodeId,
    /// Ingress and egress cap, Mbps.
    pub nic_cap_mbps: f64,
    /// Training time distribution; `None` trains in zero time.
    pub train: Option<TrainTimeDist>,
}

impl NodeModel {
    pub fn new(id: NodeId) -> NodeModel {
        NodeModel {
            id,
            nic_cap_mbps: DEFAULT_NIC_CAP_MBPS,
            train: None,
        }
    }
}

/// Bandwidth process for one directed link: piecewise-constant draws from
/// `Normal(mean, sqrt(var))` clamped to `[0.01*mean, 10*mean]`, overridden by
/// the fault floor inside fault intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkModel {
    pub src: NodeId,
    pub dst: NodeId,
    pub mean_mbps: f64,
    pub var_mbps2: f64,
    pub resample_interval_s: f64,
    pub latency_s: f64,
    /// Half-open `[start, end)` intervals during which the link runs at the
    /// fault floor.
    pub faults: Vec<(f64, f64)>,
}

impl LinkModel {
    pub fn new(src: NodeId, dst: NodeId, mean_mbps: f64, var_mbps2: f64) -> LinkModel {
        LinkModel {
            src,
            dst,
            mean_mbps,
            var_mbps2,
            resample_interval_s: DEFAULT_RESAMPLE_INTERVAL_S,
            latency_s: 0.0,
            faults: Vec::new(),
        }
    }

    pub fn in_fault(&self, t: f64) -> bool {
        self.faults.iter().any(|&(s, e)| t >= s && t < e)
    }
}

/// Bandwidth of `link` at time `t`, in Mbps. A pure function of
/// `(link, interval index, seed)`.
pub fn sample_bandwidth(link: &LinkModel, t: f64, seed: u64, fault_floor_mbps: f64) -> f64 {
    if link.in_fault(t) {
        return fault_floor_mbps;
    }
    if link.var_mbps2 <= 0.0 {
        return link.mean_mbps;
    }
    let idx = (t / link.resample_interval_s).floor() as u64;
    let mut rng = substream(
        seed,
        Stream::Bandwidth,
        &[link.src as u64, link.dst as u64, idx],
    );
    let normal = Normal::new(link.mean_mbps, link.var_mbps2.sqrt()).expect("finite parameters");
    let draw: f64 = normal.sample(&mut rng);
    draw.clamp(0.01 * link.mean_mbps, 10.0 * link.mean_mbps)
}

/// Earliest time after `t` at which this link's bandwidth can change:
/// the next resample grid point or fault boundary.
pub fn next_bandwidth_change(link: &LinkModel, t: f64) -> f64 {
    let mut next = f64::INFINITY;
    if link.var_mbps2 > 0.0 {
        let grid = (t / link.resample_interval_s).floor() + 1.0;
        next = grid * link.resample_interval_s;
    }
    for &(s, e) in &link.faults {
        if s > t {
            next = next.min(s);
        }
        if e > t {
            next = next.min(e);
        }
    }
    next
}

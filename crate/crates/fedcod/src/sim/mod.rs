//! Deterministic discrete-event network simulator.
//!
//! The simulator advances a fluid-flow model: at most one frame transfers
//! per directed link at a time, its instantaneous rate is the minimum of the
//! link bandwidth and the fair shares of the two NIC caps, and between
//! events all rates are constant. Bandwidth is a piecewise-constant
//! truncated-normal process resampled on a fixed grid, keyed by
//! `(seed, link, interval)` so paired runs see identical link trajectories
//! regardless of event interleaving.

mod bandwidth;
mod experiment;
mod network;
mod round;

pub use bandwidth::{
    next_bandwidth_change, sample_bandwidth, LinkModel, NodeModel, TrainTimeDist,
    DEFAULT_FAULT_FLOOR_MBPS, DEFAULT_NIC_CAP_MBPS, DEFAULT_RESAMPLE_INTERVAL_S,
};
pub use experiment::{run_experiment, ExperimentSpec, RedundancySpec, RoundFault, VariantRun};
pub use network::{Network, Shipment};
pub use round::{run_round, RoundParams};

use crate::protocol::{NodeId, ProtocolError, Variant};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(
        "stalled round {round} ({variant}): simulated time {sim_time:.3}s exceeded cap \
         {cap:.3}s; blocked client {blocked_client}: {detail}"
    )]
    StalledRound {
        round: u32,
        variant: String,
        sim_time: f64,
        cap: f64,
        blocked_client: NodeId,
        detail: String,
    },
    #[error("aggregate mismatch in round {round} ({variant}): max relative error {max_rel_err:.3e}")]
    Losslessness {
        round: u32,
        variant: String,
        max_rel_err: f64,
    },
    #[error("simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Phase timings for one client in one round, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientPhases {
    pub id: NodeId,
    pub t_download: f64,
    pub t_train: f64,
    pub t_upload: f64,
    pub t_wait: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeTraffic {
    pub id: NodeId,
    pub ingress_bytes: u64,
    pub egress_bytes: u64,
}

/// Event counters accumulated over one round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub redundant_rejected: u64,
    pub stale_dropped: u64,
    pub protocol_violations: u64,
    /// Sum of agr_count over AGR blocks the server consumed.
    pub agr_contributions: u64,
    /// Distinct coded blocks the server generated for the download phase.
    pub server_blocks_sent: u64,
    pub frames_delivered: u64,
    /// Other-queue departures that jumped ahead of a non-empty own-queue
    /// (must stay zero).
    pub priority_violations: u64,
}

/// Everything measured in one round.
#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub round: u32,
    pub variant: Variant,
    pub clients: Vec<ClientPhases>,
    pub node_traffic: Vec<NodeTraffic>,
    /// Bytes moved per directed link during this round.
    pub link_bytes: BTreeMap<(NodeId, NodeId), u64>,
    pub counters: Counters,
    pub r: u32,
    pub r_lb: u32,
    /// T = max over clients of download + train + upload.
    pub round_time: f64,
    /// Communication time only: max over clients of download + upload.
    pub comm_time: f64,
}

impl RoundMetrics {
    pub fn client(&self, id: NodeId) -> &ClientPhases {
        self.clients
            .iter()
            .find(|c| c.id == id)
            .expect("client id present")
    }

    pub fn traffic_of(&self, id: NodeId) -> &NodeTraffic {
        self.node_traffic
            .iter()
            .find(|t| t.id == id)
            .expect("node id present")
    }

    pub fn mean_t_download(&self) -> f64 {
        self.clients.iter().map(|c| c.t_download).sum::<f64>() / self.clients.len() as f64
    }

    pub fn mean_t_upload(&self) -> f64 {
        self.clients.iter().map(|c| c.t_upload).sum::<f64>() / self.clients.len() as f64
    }

    pub fn mean_t_wait(&self) -> f64 {
        self.clients.iter().map(|c| c.t_wait).sum::<f64>() / self.clients.len() as f64
    }

    /// Bytes moved on client-to-client links during this round.
    pub fn inter_client_bytes(&self) -> u64 {
        self.link_bytes
            .iter()
            .filter(|((s, d), _)| *s != crate::protocol::SERVER_ID && *d != crate::protocol::SERVER_ID)
            .map(|(_, &b)| b)
            .sum()
    }
}

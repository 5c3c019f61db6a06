//! Per-node state machines for the nine communication protocol variants.
//!
//! Each variant is a pairing of a download strategy and an upload strategy:
//!
//! | variant           | download               | upload                     |
//! |-------------------|------------------------|----------------------------|
//! | `baseline`        | direct (whole model)   | direct (whole model)       |
//! | `hierfl`          | via cluster centers    | via cluster centers        |
//! | `d1-nc`           | coded + re-encoding    | direct                     |
//! | `d2-c`            | coded + forwarding     | direct                     |
//! | `u1-c`            | direct                 | coded relay                |
//! | `u2-agr`          | direct                 | coded aggregation, no-wait |
//! | `u3-agr`          | direct                 | coded aggregation, wait    |
//! | `fedcod`          | coded + forwarding     | coded aggregation          |
//! | `fedcod-adaptive` | coded + forwarding     | coded aggregation          |
//!
//! `fedcod-adaptive` additionally threads the redundancy controller across
//! rounds. Direct transfers are modelled as the degenerate k=1 coding with a
//! unit coefficient, which unifies traffic accounting and the aggregate-
//! correctness check across all variants without charging coding cost to the
//! uncoded paths.

mod download;
mod hierfl;
mod upload;

pub use download::{ClientDownload, DownloadReceipt, ServerDownload};
pub use hierfl::{hierfl_route, ClusterConfig, HierRoute};
pub use upload::{
    upload_plan, AgrRelease, ClientUpload, ServerUpload, UploadDest, UploadProgress,
    UploadReceipt,
};

use crate::coding::CodingError;
use thiserror::Error;

pub type NodeId = u16;
pub const SERVER_ID: NodeId = 0;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("protocol violation: {0}")]
    Violation(String),
    #[error(transparent)]
    Coding(#[from] CodingError),
}

/// The nine protocol variants of the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Baseline,
    HierFl,
    D1Nc,
    D2C,
    U1C,
    U2Agr,
    U3Agr,
    FedCod,
    FedCodAdaptive,
}

pub const ALL_VARIANTS: [Variant; 9] = [
    Variant::Baseline,
    Variant::HierFl,
    Variant::D1Nc,
    Variant::D2C,
    Variant::U1C,
    Variant::U2Agr,
    Variant::U3Agr,
    Variant::FedCod,
    Variant::FedCodAdaptive,
];

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::HierFl => "hierfl",
            Variant::D1Nc => "d1-nc",
            Variant::D2C => "d2-c",
            Variant::U1C => "u1-c",
            Variant::U2Agr => "u2-agr",
            Variant::U3Agr => "u3-agr",
            Variant::FedCod => "fedcod",
            Variant::FedCodAdaptive => "fedcod-adaptive",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        ALL_VARIANTS.iter().copied().find(|v| v.name() == s)
    }

    pub fn download_mode(&self) -> DownloadMode {
        match self {
            Variant::Baseline | Variant::U1C | Variant::U2Agr | Variant::U3Agr => {
                DownloadMode::Direct
            }
            Variant::HierFl => DownloadMode::Hierarchical,
            Variant::D1Nc => DownloadMode::Coded { reencode: true },
            Variant::D2C | Variant::FedCod | Variant::FedCodAdaptive => {
                DownloadMode::Coded { reencode: false }
            }
        }
    }

    /// `agr_wait`/`agr_window` configure the coded-aggregation release rule
    /// for the variants that leave it open.
    pub fn upload_mode(&self, agr_wait: bool, agr_window: f64) -> UploadMode {
        match self {
            Variant::Baseline | Variant::D1Nc | Variant::D2C => UploadMode::Direct,
            Variant::HierFl => UploadMode::Hierarchical,
            Variant::U1C => UploadMode::CodedRelay,
            Variant::U2Agr => UploadMode::CodedAgr { wait: false, window: agr_window },
            Variant::U3Agr => UploadMode::CodedAgr { wait: true, window: 0.0 },
            Variant::FedCod | Variant::FedCodAdaptive => UploadMode::CodedAgr {
                wait: agr_wait,
                window: agr_window,
            },
        }
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self, Variant::FedCodAdaptive)
    }

    /// Whether the download path splits the model into the configured k
    /// (as opposed to a single whole-model transfer).
    pub fn coded_download(&self) -> bool {
        matches!(self.download_mode(), DownloadMode::Coded { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownloadMode {
    Direct,
    Coded { reencode: bool },
    Hierarchical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UploadMode {
    Direct,
    CodedRelay,
    CodedAgr { wait: bool, window: f64 },
    Hierarchical,
}

/// Per-client aggregation weights; nonnegative, summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationPlan {
    pub weights: Vec<f64>,
}

impl AggregationPlan {
    pub fn uniform(n: usize) -> AggregationPlan {
        AggregationPlan {
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn new(weights: Vec<f64>) -> Result<AggregationPlan, ProtocolError> {
        if weights.is_empty() {
            return Err(ProtocolError::InvalidParameter("no weights"));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(ProtocolError::InvalidParameter("negative weight"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ProtocolError::InvalidParameter("weights must sum to 1"));
        }
        Ok(AggregationPlan { weights })
    }

    /// Weight of the client with 0-based index `idx`.
    pub fn weight(&self, idx: usize) -> f64 {
        self.weights[idx]
    }
}

/// Node roles in one experiment topology: one server, `n` clients, full mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoleKind {
    Server,
    Client,
}

#[derive(Debug, Clone)]
pub struct NodeRole {
    pub kind: RoleKind,
    pub id: NodeId,
    pub neighbors: Vec<NodeId>,
    /// HierFL group id and center flag, when clustered.
    pub cluster: Option<(u16, bool)>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_roundtrip() {
        for v in ALL_VARIANTS {
            assert_eq!(Variant::parse(v.name()), Some(v));
        }
        assert_eq!(Variant::parse("u9-x"), None);
    }

    #[test]
    fn uniform_weights_sum_to_one() {
        let p = AggregationPlan::uniform(7);
        let sum: f64 = p.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn plan_rejects_bad_weights() {
        assert!(AggregationPlan::new(vec![0.5, 0.6]).is_err());
        assert!(AggregationPlan::new(vec![-0.1, 1.1]).is_err());
        assert!(AggregationPlan::new(vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn fedcod_modes() {
        let v = Variant::FedCod;
        assert_eq!(v.download_mode(), DownloadMode::Coded { reencode: false });
        assert_eq!(
            v.upload_mode(true, 0.0),
            UploadMode::CodedAgr { wait: true, window: 0.0 }
        );
        assert!(!v.is_adaptive());
        assert!(Variant::FedCodAdaptive.is_adaptive());
    }
}

//! Hierarchical aggregation routing.
//!
//! Clients are grouped into clusters, each with one center. Members send
//! their (weight-scaled) models to the center, the center folds a cluster
//! partial sum and exchanges it with the server; the download tree mirrors
//! the same edges in reverse.

use std::collections::{BTreeMap, BTreeSet};

use crate::protocol::{NodeId, ProtocolError, SERVER_ID};

/// Cluster assignment: every client belongs to exactly one cluster; every
/// cluster has exactly one center drawn from its members.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterConfig {
    pub assignment: BTreeMap<NodeId, u16>,
    pub centers: BTreeMap<u16, NodeId>,
}

/// Routing table derived from a [`ClusterConfig`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierRoute {
    /// Upload next hop per client: members to their center, centers to the
    /// server.
    pub upload_next_hop: BTreeMap<NodeId, NodeId>,
    /// Download children: the server fans out to centers, centers to their
    /// members.
    pub download_children: BTreeMap<NodeId, Vec<NodeId>>,
    /// Members per center (center included), sorted by id.
    pub members_of_center: BTreeMap<NodeId, Vec<NodeId>>,
}

impl HierRoute {
    pub fn centers(&self) -> Vec<NodeId> {
        self.download_children
            .get(&SERVER_ID)
            .cloned()
            .unwrap_or_default()
    }

    pub fn is_center(&self, id: NodeId) -> bool {
        self.members_of_center.contains_key(&id)
    }

    /// Cluster id used as the block index for a center's partial sum.
    pub fn cluster_of(&self, config: &ClusterConfig, id: NodeId) -> Option<u16> {
        config.assignment.get(&id).copied()
    }
}

/// Builds the per-node routing table, validating the cluster structure.
pub fn hierfl_route(
    clients: &[NodeId],
    config: &ClusterConfig,
) -> Result<HierRoute, ProtocolError> {
    if clients.is_empty() {
        return Err(ProtocolError::InvalidConfig("no clients".into()));
    }
    let mut members: BTreeMap<u16, Vec<NodeId>> = BTreeMap::new();
    for &c in clients {
        let Some(&cluster) = config.assignment.get(&c) else {
            return Err(ProtocolError::InvalidConfig(format!(
                "client {c} has no cluster assignment"
            )));
        };
        members.entry(cluster).or_default().push(c);
    }
    for (&cluster, &center) in &config.centers {
        let Some(m) = members.get(&cluster) else {
            return Err(ProtocolError::InvalidConfig(format!(
                "cluster {cluster} is empty"
            )));
        };
        if !m.contains(&center) {
            return Err(ProtocolError::InvalidConfig(format!(
                "center {center} is not a member of cluster {cluster}"
            )));
        }
    }
    let declared: BTreeSet<u16> = config.centers.keys().copied().collect();
    let populated: BTreeSet<u16> = members.keys().copied().collect();
    if declared != populated {
        return Err(ProtocolError::InvalidConfig(format!(
            "clusters with members {populated:?} do not match declared centers {declared:?}"
        )));
    }

    let mut upload_next_hop = BTreeMap::new();
    let mut download_children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    let mut members_of_center = BTreeMap::new();
    let mut center_list: Vec<NodeId> = Vec::new();
    for (&cluster, m) in &members {
        let center = config.centers[&cluster];
        center_list.push(center);
        upload_next_hop.insert(center, SERVER_ID);
        let mut children = Vec::new();
        for &c in m {
            if c != center {
                upload_next_hop.insert(c, center);
                children.push(c);
            }
        }
        download_children.insert(center, children);
        members_of_center.insert(center, m.clone());
    }
    center_list.sort_unstable();
    download_children.insert(SERVER_ID, center_list);
    Ok(HierRoute {
        upload_next_hop,
        download_children,
        members_of_center,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coding::{aggregate_blocks, encode, split, CoefficientVector, ModelVector};

    fn config(groups: &[(&[NodeId], NodeId)]) -> ClusterConfig {
        let mut assignment = BTreeMap::new();
        let mut centers = BTreeMap::new();
        for (i, (members, center)) in groups.iter().enumerate() {
            for &m in *members {
                assignment.insert(m, i as u16);
            }
            centers.insert(i as u16, *center);
        }
        ClusterConfig { assignment, centers }
    }

    #[test]
    fn three_clusters_three_server_flows() {
        // Three geographic groups; exactly three client-to-server upload
        // edges, one per center.
        let clients: Vec<NodeId> = (1..=9).collect();
        let cfg = config(&[
            (&[1, 2, 3], 2),
            (&[4, 5, 6], 4),
            (&[7, 8, 9], 9),
        ]);
        let route = hierfl_route(&clients, &cfg).unwrap();
        let to_server: Vec<NodeId> = route
            .upload_next_hop
            .iter()
            .filter(|(_, &hop)| hop == SERVER_ID)
            .map(|(&c, _)| c)
            .collect();
        assert_eq!(to_server, vec![2, 4, 9]);
        assert_eq!(route.centers(), vec![2, 4, 9]);
        assert_eq!(route.download_children[&2], vec![1, 3]);
    }

    #[test]
    fn single_cluster_funnels_through_center() {
        let clients: Vec<NodeId> = (1..=5).collect();
        let cfg = config(&[(&[1, 2, 3, 4, 5], 3)]);
        let route = hierfl_route(&clients, &cfg).unwrap();
        for c in [1u16, 2, 4, 5] {
            assert_eq!(route.upload_next_hop[&c], 3);
        }
        assert_eq!(route.upload_next_hop[&3], SERVER_ID);
        assert_eq!(route.centers(), vec![3]);
        assert_eq!(route.download_children[&3], vec![1, 2, 4, 5]);
    }

    #[test]
    fn unassigned_client_rejected() {
        let cfg = config(&[(&[1, 2], 1)]);
        let err = hierfl_route(&[1, 2, 3], &cfg).unwrap_err();
        assert!(matches!(err, ProtocolError::InvalidConfig(_)));
    }

    #[test]
    fn center_outside_cluster_rejected() {
        let mut cfg = config(&[(&[1, 2], 1)]);
        cfg.centers.insert(0, 5);
        let err = hierfl_route(&[1, 2], &cfg).unwrap_err();
        assert!(matches!(err, ProtocolError::InvalidConfig(_)));
    }

    #[test]
    fn empty_cluster_rejected() {
        let mut cfg = config(&[(&[1, 2], 1)]);
        cfg.centers.insert(7, 2);
        let err = hierfl_route(&[1, 2], &cfg).unwrap_err();
        assert!(matches!(err, ProtocolError::InvalidConfig(_)));
    }

    #[test]
    fn cluster_partial_of_equal_weights_is_mean() {
        // Fold equal-weight scaled member blocks at a center and compare to
        // the direct mean oracle.
        let len = 24;
        let n = 3usize;
        let models: Vec<ModelVector> = (0..n)
            .map(|i| {
                ModelVector::new((0..len).map(|e| ((e + i * 31) as f32 * 0.1).cos()).collect())
            })
            .collect();
        let w = 1.0 / n as f64;
        let mut acc = None;
        for m in &models {
            let scaled =
                ModelVector::new(m.elements.iter().map(|&x| (w * x as f64) as f32).collect());
            let parts = split(&scaled, 1).unwrap();
            let b = encode(&parts, &CoefficientVector::new(vec![1.0])).unwrap();
            acc = Some(match acc {
                None => b,
                Some(a) => aggregate_blocks(&a, &b).unwrap(),
            });
        }
        let folded = acc.unwrap();
        for e in 0..len {
            let mean: f64 =
                models.iter().map(|m| m.elements[e] as f64).sum::<f64>() / n as f64;
            assert!(
                (folded.payload[e] as f64 - mean).abs() <= 1e-6 * mean.abs().max(1.0),
                "element {e}"
            );
        }
    }
}

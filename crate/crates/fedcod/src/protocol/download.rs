//! Download-phase state machines.
//!
//! Coded mode: the server keeps generating blocks under fresh random
//! coefficient rows — never reusing a row within a round — and streams a
//! distinct block to every client that has not yet acknowledged decoding.
//! Clients offer every arrival to their decoder and, in forwarding mode,
//! relay blocks received directly from the server to all other clients
//! (restamped as client-origin so nobody relays them a second hop). The
//! network-coding mode instead re-encodes fresh random combinations of
//! everything held and forwards those, which is allowed to produce linearly
//! dependent arrivals.

use std::collections::{BTreeMap, BTreeSet};

use crate::coding::{
    encode, random_coefficients, split, CoefficientVector, EncodedBlock, GuardedDecoder,
    ModelVector, OfferOutcome, OriginKind, Partition,
};
use crate::protocol::{DownloadMode, NodeId, ProtocolError, SERVER_ID};

#[derive(Debug, Clone)]
struct DestState {
    sent: usize,
    done: bool,
}

/// Server side of one round's download phase.
#[derive(Debug)]
pub struct ServerDownload {
    round: u32,
    k: usize,
    mode: DownloadMode,
    partitions: Vec<Partition>,
    next_index: u16,
    per_dest: BTreeMap<NodeId, DestState>,
    /// Cap on direct blocks per destination: k plus the redundancy budget.
    budget_per_dest: usize,
}

impl ServerDownload {
    /// `destinations` is every node served directly: all clients, or only the
    /// cluster centers in hierarchical mode. Direct and hierarchical modes
    /// force the degenerate k=1 whole-model coding.
    pub fn new(
        mode: DownloadMode,
        round: u32,
        k: usize,
        r: usize,
        model: &ModelVector,
        destinations: &[NodeId],
    ) -> Result<ServerDownload, ProtocolError> {
        let k_eff = match mode {
            DownloadMode::Coded { .. } => k,
            _ => 1,
        };
        let partitions = split(model, k_eff)?;
        let budget_per_dest = match mode {
            DownloadMode::Coded { .. } => k_eff + r,
            _ => 1,
        };
        Ok(ServerDownload {
            round,
            k: k_eff,
            mode,
            partitions,
            next_index: 0,
            per_dest: destinations
                .iter()
                .map(|&d| (d, DestState { sent: 0, done: false }))
                .collect(),
            budget_per_dest,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Next block for one destination, or `None` when that destination has
    /// acknowledged, exhausted its budget, or is unknown.
    pub fn next_block_for<R: rand::Rng>(
        &mut self,
        dst: NodeId,
        rng: &mut R,
    ) -> Option<EncodedBlock> {
        let budget = self.budget_per_dest;
        let state = self.per_dest.get_mut(&dst)?;
        if state.done || state.sent >= budget {
            return None;
        }
        let coeffs = match self.mode {
            DownloadMode::Coded { .. } => random_coefficients(self.k, rng),
            _ => CoefficientVector::new(vec![1.0]),
        };
        let mut block = encode(&self.partitions, &coeffs).expect("dimensions fixed at init");
        block.round = self.round;
        block.origin = SERVER_ID;
        block.block_index = self.next_index;
        block.origin_kind = OriginKind::ServerOrigin;
        self.next_index = self.next_index.wrapping_add(1);
        state.sent += 1;
        Some(block)
    }

    /// One scheduling pass: the next globally-unique block for every
    /// destination still waiting.
    pub fn step<R: rand::Rng>(&mut self, rng: &mut R) -> Vec<(NodeId, EncodedBlock)> {
        let dests: Vec<NodeId> = self.per_dest.keys().copied().collect();
        let mut out = Vec::new();
        for dst in dests {
            if let Some(block) = self.next_block_for(dst, rng) {
                out.push((dst, block));
            }
        }
        out
    }

    /// Marks a destination complete; nothing further is emitted to it.
    pub fn on_decode_ack(&mut self, from: NodeId) {
        if let Some(s) = self.per_dest.get_mut(&from) {
            s.done = true;
        }
    }

    pub fn all_acked(&self) -> bool {
        self.per_dest.values().all(|s| s.done)
    }

    pub fn blocks_sent(&self) -> usize {
        self.per_dest.values().map(|s| s.sent).sum()
    }
}

/// What a client does with one received download frame.
#[derive(Debug, Default)]
pub struct DownloadReceipt {
    pub outcome: Option<OfferOutcome>,
    /// The decoder just became ready: recover the model, ack the server.
    pub newly_complete: bool,
    pub forwards: Vec<(NodeId, EncodedBlock)>,
}

/// Client side of one round's download phase.
#[derive(Debug)]
pub struct ClientDownload {
    id: NodeId,
    round: u32,
    k: usize,
    model_len: usize,
    mode: DownloadMode,
    decoder: GuardedDecoder,
    /// Forwarding targets: all other clients (full mesh), or the cluster
    /// members below a hierarchical center.
    forward_targets: Vec<NodeId>,
    neighbors_done: BTreeSet<NodeId>,
    /// Per-neighbor set of already-forwarded block indices.
    forwarded: BTreeMap<NodeId, BTreeSet<u16>>,
    /// Local counter for re-encoded block indices.
    reencode_index: u16,
    complete: bool,
    pub redundant_rejected: u64,
    pub stale_dropped: u64,
    /// Server blocks received before completion (accepted + rejected).
    pub server_blocks_before_complete: u64,
}

impl ClientDownload {
    pub fn new(
        id: NodeId,
        round: u32,
        k: usize,
        model_len: usize,
        mode: DownloadMode,
        forward_targets: Vec<NodeId>,
    ) -> ClientDownload {
        let k_eff = match mode {
            DownloadMode::Coded { .. } => k,
            _ => 1,
        };
        ClientDownload {
            id,
            round,
            k: k_eff,
            model_len,
            mode,
            decoder: GuardedDecoder::new(k_eff),
            forward_targets,
            neighbors_done: BTreeSet::new(),
            forwarded: BTreeMap::new(),
            reencode_index: 0,
            complete: false,
            redundant_rejected: 0,
            stale_dropped: 0,
            server_blocks_before_complete: 0,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Handles one arriving block. Stale rounds are dropped and counted.
    pub fn receive<R: rand::Rng>(
        &mut self,
        block: &EncodedBlock,
        from: NodeId,
        rng: &mut R,
    ) -> Result<DownloadReceipt, ProtocolError> {
        if block.round != self.round {
            self.stale_dropped += 1;
            return Ok(DownloadReceipt::default());
        }
        if !self.complete && block.origin_kind == OriginKind::ServerOrigin {
            self.server_blocks_before_complete += 1;
        }
        let was_ready = self.decoder.is_ready();
        let outcome = self.decoder.offer(block)?;
        if outcome == OfferOutcome::RedundantRejected {
            self.redundant_rejected += 1;
        }
        let newly_complete = !was_ready && self.decoder.is_ready();
        if newly_complete {
            self.complete = true;
        }
        let forwards = self.plan_forwards(block, from, outcome, rng);
        Ok(DownloadReceipt {
            outcome: Some(outcome),
            newly_complete,
            forwards,
        })
    }

    fn plan_forwards<R: rand::Rng>(
        &mut self,
        block: &EncodedBlock,
        from: NodeId,
        outcome: OfferOutcome,
        rng: &mut R,
    ) -> Vec<(NodeId, EncodedBlock)> {
        match self.mode {
            DownloadMode::Direct => Vec::new(),
            DownloadMode::Hierarchical => {
                // Centers pass the whole-model block down to their members.
                if from == SERVER_ID {
                    self.fan_out(block, from, |b| {
                        let mut copy = b.clone();
                        copy.origin_kind = OriginKind::ClientOrigin;
                        copy
                    })
                } else {
                    Vec::new()
                }
            }
            DownloadMode::Coded { reencode: false } => {
                // Forward only blocks received straight from the server;
                // restamping stops the next hop from relaying them again.
                if block.origin_kind != OriginKind::ServerOrigin {
                    return Vec::new();
                }
                self.fan_out(block, from, |b| {
                    let mut copy = b.clone();
                    copy.origin_kind = OriginKind::ClientOrigin;
                    copy
                })
            }
            DownloadMode::Coded { reencode: true } => {
                // Network coding: every rank-increasing arrival triggers a
                // fresh random combination of all held rows per neighbor.
                if !matches!(outcome, OfferOutcome::Accepted | OfferOutcome::Complete) {
                    return Vec::new();
                }
                let held = self.decoder.accepted_rows().to_vec();
                let targets: Vec<NodeId> = self
                    .forward_targets
                    .iter()
                    .copied()
                    .filter(|&t| t != from && !self.neighbors_done.contains(&t))
                    .collect();
                let mut out = Vec::with_capacity(targets.len());
                for t in targets {
                    let mix: Vec<f64> = (0..held.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let mut coeffs = vec![0.0f64; self.k];
                    let mut payload = vec![0.0f64; held[0].1.len()];
                    for (w, (c, p)) in mix.iter().zip(held.iter()) {
                        for (dst, &x) in coeffs.iter_mut().zip(c.coefficients.iter()) {
                            *dst += w * x;
                        }
                        for (dst, &x) in payload.iter_mut().zip(p.iter()) {
                            *dst += w * x as f64;
                        }
                    }
                    let b = EncodedBlock {
                        round: self.round,
                        origin: self.id,
                        block_index: self.reencode_index,
                        coeffs: CoefficientVector::new(coeffs),
                        payload: payload.into_iter().map(|x| x as f32).collect(),
                        origin_kind: OriginKind::ClientOrigin,
                        agr_count: 1,
                    };
                    self.reencode_index = self.reencode_index.wrapping_add(1);
                    out.push((t, b));
                }
                out
            }
        }
    }

    fn fan_out<F>(&mut self, block: &EncodedBlock, from: NodeId, make: F) -> Vec<(NodeId, EncodedBlock)>
    where
        F: Fn(&EncodedBlock) -> EncodedBlock,
    {
        let targets: Vec<NodeId> = self
            .forward_targets
            .iter()
            .copied()
            .filter(|&t| t != from && !self.neighbors_done.contains(&t))
            .collect();
        let mut out = Vec::with_capacity(targets.len());
        for t in targets {
            let seen = self.forwarded.entry(t).or_default();
            if seen.insert(block.block_index) {
                out.push((t, make(block)));
            }
        }
        out
    }

    /// A neighbor announced download completion; stop forwarding to it.
    pub fn on_neighbor_complete(&mut self, neighbor: NodeId) {
        self.neighbors_done.insert(neighbor);
    }

    pub fn finish_model(&self) -> Result<ModelVector, ProtocolError> {
        Ok(self.decoder.finish(self.model_len)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    fn test_model(len: usize) -> ModelVector {
        ModelVector::new((0..len).map(|i| (i as f32 * 0.01).sin()).collect())
    }

    fn rng() -> rand_chacha::ChaCha8Rng {
        substream(400, Stream::DownloadCoeffs, &[0])
    }

    #[test]
    fn first_pass_emits_distinct_blocks_to_all() {
        let model = test_model(64);
        let mut s = ServerDownload::new(
            DownloadMode::Coded { reencode: false },
            0,
            2,
            2,
            &model,
            &[1, 2, 3],
        )
        .unwrap();
        let pass = s.step(&mut rng());
        assert_eq!(pass.len(), 3);
        let indices: Vec<u16> = pass.iter().map(|(_, b)| b.block_index).collect();
        assert_eq!(indices, vec![0, 1, 2]);
        for i in 0..3 {
            for j in (i + 1)..3 {
                assert_ne!(
                    pass[i].1.coeffs, pass[j].1.coeffs,
                    "coefficient vectors must be distinct"
                );
            }
        }
    }

    #[test]
    fn ack_stops_emission_to_that_destination() {
        let model = test_model(64);
        let mut s = ServerDownload::new(
            DownloadMode::Coded { reencode: false },
            0,
            2,
            8,
            &model,
            &[1, 2, 3],
        )
        .unwrap();
        s.step(&mut rng());
        s.on_decode_ack(2);
        let pass = s.step(&mut rng());
        assert_eq!(pass.len(), 2);
        assert!(pass.iter().all(|(d, _)| *d != 2));
        assert!(s.next_block_for(2, &mut rng()).is_none());
    }

    #[test]
    fn budget_caps_direct_blocks() {
        let model = test_model(64);
        let mut s = ServerDownload::new(
            DownloadMode::Coded { reencode: false },
            0,
            2,
            1,
            &model,
            &[1],
        )
        .unwrap();
        let mut r = rng();
        assert!(s.next_block_for(1, &mut r).is_some());
        assert!(s.next_block_for(1, &mut r).is_some());
        assert!(s.next_block_for(1, &mut r).is_some());
        assert!(s.next_block_for(1, &mut r).is_none(), "k + r = 3 is the cap");
    }

    #[test]
    fn direct_mode_sends_single_whole_model_block() {
        let model = test_model(10);
        let mut s =
            ServerDownload::new(DownloadMode::Direct, 0, 4, 4, &model, &[1, 2]).unwrap();
        let mut r = rng();
        let b = s.next_block_for(1, &mut r).unwrap();
        assert_eq!(b.coeffs.coefficients, vec![1.0]);
        assert_eq!(b.payload, model.elements);
        assert!(s.next_block_for(1, &mut r).is_none());
    }

    #[test]
    fn forwarding_fans_out_to_all_other_clients() {
        // 10 clients: a server block at client 1 forwards to the 9 others.
        let model = test_model(40);
        let mut server = ServerDownload::new(
            DownloadMode::Coded { reencode: false },
            0,
            4,
            4,
            &model,
            &(1..=10).collect::<Vec<_>>(),
        )
        .unwrap();
        let targets: Vec<NodeId> = (2..=10).collect();
        let mut c = ClientDownload::new(
            1,
            0,
            4,
            40,
            DownloadMode::Coded { reencode: false },
            targets,
        );
        let mut r = rng();
        let block = server.next_block_for(1, &mut r).unwrap();
        let receipt = c.receive(&block, SERVER_ID, &mut r).unwrap();
        assert_eq!(receipt.forwards.len(), 9);
        for (_, fwd) in &receipt.forwards {
            assert_eq!(fwd.origin_kind, OriginKind::ClientOrigin);
            assert_eq!(fwd.block_index, block.block_index);
        }
    }

    #[test]
    fn forwarded_blocks_are_not_reforwarded() {
        let model = test_model(40);
        let mut r = rng();
        let parts = split(&model, 4).unwrap();
        let mut fwd = encode(&parts, &random_coefficients(4, &mut r)).unwrap();
        fwd.origin_kind = OriginKind::ClientOrigin; // as restamped by a peer
        let mut c = ClientDownload::new(
            2,
            0,
            4,
            40,
            DownloadMode::Coded { reencode: false },
            vec![1, 3, 4],
        );
        let receipt = c.receive(&fwd, 1, &mut r).unwrap();
        assert!(receipt.forwards.is_empty());
    }

    #[test]
    fn completed_neighbors_are_skipped() {
        let model = test_model(40);
        let mut server = ServerDownload::new(
            DownloadMode::Coded { reencode: false },
            0,
            4,
            4,
            &model,
            &[1, 2, 3],
        )
        .unwrap();
        let mut c = ClientDownload::new(
            1,
            0,
            4,
            40,
            DownloadMode::Coded { reencode: false },
            vec![2, 3],
        );
        c.on_neighbor_complete(3);
        let mut r = rng();
        let block = server.next_block_for(1, &mut r).unwrap();
        let receipt = c.receive(&block, SERVER_ID, &mut r).unwrap();
        assert_eq!(receipt.forwards.len(), 1);
        assert_eq!(receipt.forwards[0].0, 2);
    }

    #[test]
    fn stale_round_frames_are_dropped_and_counted() {
        let model = test_model(40);
        let parts = split(&model, 4).unwrap();
        let mut r = rng();
        let mut block = encode(&parts, &random_coefficients(4, &mut r)).unwrap();
        block.round = 3;
        block.origin_kind = OriginKind::ServerOrigin;
        let mut c = ClientDownload::new(
            1,
            5,
            4,
            40,
            DownloadMode::Coded { reencode: false },
            vec![],
        );
        let receipt = c.receive(&block, SERVER_ID, &mut r).unwrap();
        assert!(receipt.outcome.is_none());
        assert_eq!(c.stale_dropped, 1);
    }

    #[test]
    fn client_decodes_after_k_independent_blocks() {
        let model = test_model(64);
        let mut server = ServerDownload::new(
            DownloadMode::Coded { reencode: false },
            0,
            4,
            4,
            &model,
            &[1],
        )
        .unwrap();
        let mut c = ClientDownload::new(
            1,
            0,
            4,
            64,
            DownloadMode::Coded { reencode: false },
            vec![],
        );
        let mut r = rng();
        let mut completed = false;
        for _ in 0..8 {
            let b = server.next_block_for(1, &mut r).unwrap();
            let receipt = c.receive(&b, SERVER_ID, &mut r).unwrap();
            if receipt.newly_complete {
                completed = true;
                break;
            }
        }
        assert!(completed);
        let got = c.finish_model().unwrap();
        let max_err = got
            .elements
            .iter()
            .zip(model.elements.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1e-4, "decode error {max_err}");
    }

    #[test]
    fn reencode_mode_emits_fresh_combinations() {
        let model = test_model(40);
        let mut server = ServerDownload::new(
            DownloadMode::Coded { reencode: true },
            0,
            4,
            4,
            &model,
            &[1, 2],
        )
        .unwrap();
        let mut c = ClientDownload::new(
            1,
            0,
            4,
            40,
            DownloadMode::Coded { reencode: true },
            vec![2, 3],
        );
        let mut r = rng();
        let b = server.next_block_for(1, &mut r).unwrap();
        let receipt = c.receive(&b, SERVER_ID, &mut r).unwrap();
        assert_eq!(receipt.forwards.len(), 2);
        for (_, fwd) in &receipt.forwards {
            assert_eq!(fwd.origin, 1, "re-encoded blocks carry the encoder's id");
            assert_eq!(fwd.origin_kind, OriginKind::ClientOrigin);
            assert_ne!(fwd.coeffs, b.coeffs, "combination must be fresh");
        }
    }
}

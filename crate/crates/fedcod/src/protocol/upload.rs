//! Upload-phase state machines.
//!
//! Every client keeps two queues toward the server: the *own-queue* for its
//! own encoded blocks and the *other-queue* for anything it relays. The
//! own-queue is strictly drained first. Coded aggregation replaces relaying
//! with folding: block index `j` goes to relay client `h(j) = j mod n`, all
//! clients encode index `j` under the same shared coefficient row, and the
//! relay sums same-index blocks into one AGR block before sending it up. In
//! wait mode the AGR block leaves once every client has contributed; in
//! non-wait mode it leaves when a time window (from the first contribution)
//! expires, and late arrivals open a fresh partial block for the same index.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::coding::{
    aggregate_blocks, encode, random_coefficients, shared_coefficients, split, CoefficientVector,
    EncodedBlock, GuardedDecoder, ModelVector, OfferOutcome, OriginKind,
};
use crate::protocol::{AggregationPlan, NodeId, ProtocolError, UploadMode};

/// Where one encoded block of the upload plan goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum UploadDest {
    Server,
    Peer(NodeId),
    /// Mapped to this client itself: fold into the local aggregation buffer.
    SelfAggregate,
}

/// Destination of each block index produced by client `client_idx` (0-based;
/// node id is `client_idx + 1`).
///
/// Coded relay: indices `0..k` go straight to the server, redundancy indices
/// round-robin over the other clients starting after self. Coded
/// aggregation: index `j` goes to `h(j) = j mod n`.
pub fn upload_plan(
    client_idx: usize,
    n: usize,
    k: usize,
    r: usize,
    mode: &UploadMode,
) -> Result<Vec<(UploadDest, u16)>, ProtocolError> {
    if client_idx >= n {
        return Err(ProtocolError::InvalidParameter("client index out of range"));
    }
    match mode {
        UploadMode::Direct => Ok(vec![(UploadDest::Server, 0)]),
        UploadMode::Hierarchical => Err(ProtocolError::InvalidParameter(
            "hierarchical upload is routed by the cluster table",
        )),
        UploadMode::CodedRelay => {
            let mut plan = Vec::with_capacity(k + r);
            for j in 0..k {
                plan.push((UploadDest::Server, j as u16));
            }
            // Round-robin over the n-1 other clients, starting after self.
            let others: Vec<NodeId> = (1..n)
                .map(|m| (((client_idx + m) % n) + 1) as NodeId)
                .collect();
            for m in 0..r {
                if others.is_empty() {
                    break; // single client: nobody to relay through
                }
                plan.push((UploadDest::Peer(others[m % others.len()]), (k + m) as u16));
            }
            Ok(plan)
        }
        UploadMode::CodedAgr { .. } => {
            let mut plan = Vec::with_capacity(k + r);
            for j in 0..k + r {
                let target_idx = j % n;
                let dest = if target_idx == client_idx {
                    UploadDest::SelfAggregate
                } else {
                    UploadDest::Peer((target_idx + 1) as NodeId)
                };
                plan.push((dest, j as u16));
            }
            Ok(plan)
        }
    }
}

/// One in-progress AGR slot at a relay client.
#[derive(Debug, Clone)]
struct AgrSlot {
    acc: EncodedBlock,
    contributors: BTreeSet<NodeId>,
}

/// An AGR block becoming ready to leave for the server.
#[derive(Debug, Clone, PartialEq)]
pub struct AgrRelease {
    pub index: u16,
    pub block: EncodedBlock,
}

/// Effects of receiving one upload-phase block at a client.
#[derive(Debug, Default)]
pub struct UploadReceipt {
    /// A window timer to request (non-wait mode): (index, delay).
    pub window_start: Option<(u16, f64)>,
    /// The block violated the shared-row agreement and was dropped.
    pub violation: bool,
}

/// Hierarchical routing for one client: members push to their center, the
/// center folds its cluster's partial sum.
#[derive(Debug, Clone)]
struct HierUpload {
    /// Block index used for this cluster's partial sum.
    cluster_index: u16,
    /// Where a member sends its block; `None` for the center itself.
    center: Option<NodeId>,
    /// All cluster members (center included); empty for non-centers.
    members: Vec<NodeId>,
}

/// Client side of one round's upload phase.
///
/// Constructed at round start so relays can fold contributions that arrive
/// before the local training finishes; the client's own blocks join via
/// [`Self::contribute_local`].
#[derive(Debug)]
pub struct ClientUpload {
    id: NodeId,
    round: u32,
    k: usize,
    r: usize,
    n: usize,
    mode: UploadMode,
    hier: Option<HierUpload>,
    own_queue: VecDeque<EncodedBlock>,
    other_queue: VecDeque<EncodedBlock>,
    /// Outbound client-to-client blocks, per destination, in plan order.
    peer_out: BTreeMap<NodeId, VecDeque<EncodedBlock>>,
    agr: BTreeMap<u16, AgrSlot>,
    /// Origins the server has fully decoded; relaying them is pointless.
    origins_done: BTreeSet<NodeId>,
    server_done: bool,
    pub violations: u64,
    pub stale_dropped: u64,
}

impl ClientUpload {
    pub fn new(
        id: NodeId,
        round: u32,
        k: usize,
        r: usize,
        n: usize,
        mode: UploadMode,
    ) -> ClientUpload {
        let k_eff = match mode {
            UploadMode::Direct | UploadMode::Hierarchical => 1,
            _ => k,
        };
        ClientUpload {
            id,
            round,
            k: k_eff,
            r,
            n,
            mode,
            hier: None,
            own_queue: VecDeque::new(),
            other_queue: VecDeque::new(),
            peer_out: BTreeMap::new(),
            agr: BTreeMap::new(),
            origins_done: BTreeSet::new(),
            server_done: false,
            violations: 0,
            stale_dropped: 0,
        }
    }

    /// Hierarchical session: `center` is the member's upload hop (`None` for
    /// a center), `members` the cluster member list (centers only).
    pub fn new_hier(
        id: NodeId,
        round: u32,
        cluster_index: u16,
        center: Option<NodeId>,
        members: Vec<NodeId>,
    ) -> ClientUpload {
        let mut up = ClientUpload::new(id, round, 1, 0, members.len().max(1), UploadMode::Hierarchical);
        up.hier = Some(HierUpload {
            cluster_index,
            center,
            members,
        });
        up
    }

    /// Encodes the local model per the upload plan. For coded aggregation
    /// and hierarchical clusters the caller passes the model already scaled
    /// by this client's aggregation weight. Returns window timers to arm
    /// (non-wait self-mapped indices).
    pub fn contribute_local<R: rand::Rng>(
        &mut self,
        local_model: &ModelVector,
        rng: &mut R,
    ) -> Result<Vec<(u16, f64)>, ProtocolError> {
        let parts = split(local_model, self.k)?;
        if let Some(hier) = self.hier.clone() {
            let mut block = encode(&parts, &CoefficientVector::new(vec![1.0]))?;
            block.round = self.round;
            block.origin = self.id;
            block.block_index = hier.cluster_index;
            block.origin_kind = OriginKind::ClientOrigin;
            match hier.center {
                Some(center) => {
                    self.peer_out.entry(center).or_default().push_back(block);
                }
                None => {
                    self.fold_hier(block)?;
                }
            }
            return Ok(Vec::new());
        }
        let client_idx = (self.id - 1) as usize;
        let plan = upload_plan(client_idx, self.n, self.k, self.r, &self.mode)?;
        let mut timers = Vec::new();
        for (dest, index) in plan {
            let coeffs = match self.mode {
                UploadMode::Direct => CoefficientVector::new(vec![1.0]),
                UploadMode::CodedRelay => random_coefficients(self.k, rng),
                UploadMode::CodedAgr { .. } => shared_coefficients(index as usize, self.k),
                UploadMode::Hierarchical => unreachable!("handled above"),
            };
            let mut block = encode(&parts, &coeffs)?;
            block.round = self.round;
            block.origin = self.id;
            block.block_index = index;
            block.origin_kind = OriginKind::ClientOrigin;
            match dest {
                UploadDest::Server => self.own_queue.push_back(block),
                UploadDest::Peer(p) => self.peer_out.entry(p).or_default().push_back(block),
                UploadDest::SelfAggregate => {
                    if let Some((idx, delay)) = self.fold_contribution(block)? {
                        timers.push((idx, delay));
                    }
                }
            }
        }
        Ok(timers)
    }

    /// Convenience constructor: session plus immediate local contribution.
    #[allow(clippy::too_many_arguments)]
    pub fn start<R: rand::Rng>(
        id: NodeId,
        round: u32,
        k: usize,
        r: usize,
        n: usize,
        mode: UploadMode,
        local_model: &ModelVector,
        rng: &mut R,
    ) -> Result<(ClientUpload, Vec<(u16, f64)>), ProtocolError> {
        let mut up = ClientUpload::new(id, round, k, r, n, mode);
        let timers = up.contribute_local(local_model, rng)?;
        Ok((up, timers))
    }

    /// Folds one member block into the cluster partial sum; releases it to
    /// the server once every member has contributed.
    fn fold_hier(&mut self, block: EncodedBlock) -> Result<(), ProtocolError> {
        let hier = self.hier.as_ref().expect("hier session");
        let members = hier.members.len();
        let index = hier.cluster_index;
        if block.coeffs.coefficients != vec![1.0] {
            self.violations += 1;
            return Ok(());
        }
        let n = members;
        match self.agr.get_mut(&index) {
            Some(slot) => {
                if !slot.contributors.insert(block.origin) {
                    return Ok(());
                }
                slot.acc = aggregate_blocks(&slot.acc, &block)?;
                if slot.contributors.len() == n {
                    self.release_slot(index);
                }
            }
            None => {
                let mut contributors = BTreeSet::new();
                contributors.insert(block.origin);
                let mut acc = block;
                acc.origin_kind = OriginKind::Aggregated;
                self.agr.insert(index, AgrSlot { acc, contributors });
                if n == 1 {
                    self.release_slot(index);
                }
            }
        }
        Ok(())
    }

    fn agr_window(&self) -> Option<f64> {
        match self.mode {
            UploadMode::CodedAgr { wait: false, window } => Some(window),
            _ => None,
        }
    }

    /// Folds one contribution into its AGR slot. Returns a window timer
    /// request if this contribution opened a fresh non-wait slot.
    fn fold_contribution(
        &mut self,
        block: EncodedBlock,
    ) -> Result<Option<(u16, f64)>, ProtocolError> {
        let index = block.block_index;
        let origin = block.origin;
        let wait_mode = self.is_wait_mode();
        let n = self.n;
        match self.agr.get_mut(&index) {
            Some(slot) => {
                if !slot.contributors.insert(origin) {
                    // Duplicate contribution; drop.
                    return Ok(None);
                }
                slot.acc = aggregate_blocks(&slot.acc, &block)?;
                if wait_mode && slot.contributors.len() == n {
                    self.release_slot(index);
                }
                Ok(None)
            }
            None => {
                let mut contributors = BTreeSet::new();
                contributors.insert(origin);
                let mut acc = block;
                acc.origin_kind = OriginKind::Aggregated;
                self.agr.insert(index, AgrSlot { acc, contributors });
                match self.agr_window() {
                    Some(w) if w <= 0.0 => {
                        // Degenerate window: release each contribution as-is.
                        self.release_slot(index);
                        Ok(None)
                    }
                    Some(w) => Ok(Some((index, w))),
                    None => {
                        if self.is_wait_mode() && self.n == 1 {
                            self.release_slot(index);
                        }
                        Ok(None)
                    }
                }
            }
        }
    }

    fn is_wait_mode(&self) -> bool {
        matches!(self.mode, UploadMode::CodedAgr { wait: true, .. })
    }

    fn release_slot(&mut self, index: u16) {
        if let Some(slot) = self.agr.remove(&index) {
            let mut block = slot.acc;
            block.origin = self.id;
            if !self.server_done {
                self.other_queue.push_back(block);
            }
        }
    }

    /// Handles one upload-phase block arriving from a peer.
    pub fn receive(
        &mut self,
        block: EncodedBlock,
        _from: NodeId,
    ) -> Result<UploadReceipt, ProtocolError> {
        if block.round != self.round {
            self.stale_dropped += 1;
            return Ok(UploadReceipt::default());
        }
        match self.mode {
            UploadMode::CodedRelay | UploadMode::Direct => {
                if !self.origins_done.contains(&block.origin) && !self.server_done {
                    self.other_queue.push_back(block);
                }
                Ok(UploadReceipt::default())
            }
            UploadMode::CodedAgr { .. } => {
                let expected = shared_coefficients(block.block_index as usize, self.k);
                if block.coeffs != expected {
                    self.violations += 1;
                    return Ok(UploadReceipt {
                        window_start: None,
                        violation: true,
                    });
                }
                let window_start = self.fold_contribution(block)?;
                Ok(UploadReceipt {
                    window_start,
                    violation: false,
                })
            }
            UploadMode::Hierarchical => {
                if self.hier.is_none() || self.hier.as_ref().is_some_and(|h| h.center.is_some()) {
                    // Only centers fold member blocks.
                    self.violations += 1;
                    return Ok(UploadReceipt {
                        window_start: None,
                        violation: true,
                    });
                }
                self.fold_hier(block)?;
                Ok(UploadReceipt::default())
            }
        }
    }

    /// Non-wait window expiry for one AGR index: release the current partial
    /// block. A later contribution opens a fresh slot for the same index.
    pub fn on_window_expired(&mut self, index: u16) {
        self.release_slot(index);
    }

    /// The server finished decoding `origin` (or, with `origin` = server id,
    /// the whole round): drop queued sends that no longer help.
    pub fn on_upload_complete(&mut self, origin: NodeId) {
        if origin == crate::protocol::SERVER_ID {
            self.server_done = true;
            self.own_queue.clear();
            self.other_queue.clear();
            self.peer_out.clear();
            self.agr.clear();
        } else {
            self.origins_done.insert(origin);
            self.other_queue.retain(|b| b.origin != origin);
            if origin == self.id {
                self.own_queue.clear();
            }
        }
    }

    /// Next frame for the server link: own-queue strictly first.
    pub fn next_server_block(&mut self) -> Option<EncodedBlock> {
        if let Some(b) = self.own_queue.pop_front() {
            return Some(b);
        }
        self.other_queue.pop_front()
    }

    /// Next frame for a client-to-client link.
    pub fn next_peer_block(&mut self, peer: NodeId) -> Option<EncodedBlock> {
        self.peer_out.get_mut(&peer)?.pop_front()
    }

    pub fn own_pending(&self) -> usize {
        self.own_queue.len()
    }

    pub fn other_pending(&self) -> usize {
        self.other_queue.len()
    }

    pub fn peer_destinations(&self) -> Vec<NodeId> {
        self.peer_out
            .iter()
            .filter(|(_, q)| !q.is_empty())
            .map(|(&p, _)| p)
            .collect()
    }
}

/// Per-client upload progress reported by the server.
#[derive(Debug, Default)]
pub struct UploadProgress {
    /// Clients whose contribution just became fully accounted.
    pub newly_covered: Vec<NodeId>,
    pub complete: bool,
}

/// Server side of one round's upload phase.
#[derive(Debug)]
pub struct ServerUpload {
    round: u32,
    k: usize,
    n: usize,
    model_len: usize,
    mode: UploadMode,
    weights: AggregationPlan,
    per_client: BTreeMap<NodeId, GuardedDecoder>,
    decoded: BTreeMap<NodeId, ModelVector>,
    agr_decoder: GuardedDecoder,
    /// Non-wait partial AGR blocks folded by index.
    agr_partials: BTreeMap<u16, AgrSlot>,
    /// Complete AGR indices already offered to the decoder.
    agr_consumed: BTreeSet<u16>,
    /// Total indices in flight this round (k + r), for the all-consumed
    /// fallback when conditioning holds completion back.
    agr_total_indices: usize,
    /// Hierarchical accumulation: weighted sum and covered clients.
    hier_sum: Vec<f64>,
    hier_covered: BTreeSet<NodeId>,
    /// Cluster members by center, for attributing hierarchical progress.
    cluster_members: BTreeMap<NodeId, Vec<NodeId>>,
    aggregate: Option<Vec<f32>>,
    complete: bool,
    pub redundant_rejected: u64,
    pub violations: u64,
    pub stale_dropped: u64,
    pub agr_contributions: u64,
}

impl ServerUpload {
    pub fn new(
        round: u32,
        k: usize,
        r: usize,
        n: usize,
        model_len: usize,
        mode: UploadMode,
        weights: AggregationPlan,
        cluster_members: BTreeMap<NodeId, Vec<NodeId>>,
    ) -> ServerUpload {
        let k_eff = match mode {
            UploadMode::Direct | UploadMode::Hierarchical => 1,
            _ => k,
        };
        ServerUpload {
            round,
            k: k_eff,
            n,
            model_len,
            mode,
            weights,
            per_client: BTreeMap::new(),
            decoded: BTreeMap::new(),
            agr_decoder: GuardedDecoder::new(k_eff),
            agr_partials: BTreeMap::new(),
            agr_consumed: BTreeSet::new(),
            agr_total_indices: k_eff + r,
            hier_sum: vec![0.0; model_len],
            hier_covered: BTreeSet::new(),
            cluster_members,
            aggregate: None,
            complete: false,
            redundant_rejected: 0,
            violations: 0,
            stale_dropped: 0,
            agr_contributions: 0,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    /// The decoded weighted aggregate, once complete.
    pub fn aggregate(&self) -> Option<&[f32]> {
        self.aggregate.as_deref()
    }

    pub fn decoded_models(&self) -> &BTreeMap<NodeId, ModelVector> {
        &self.decoded
    }

    pub fn receive(&mut self, block: EncodedBlock) -> Result<UploadProgress, ProtocolError> {
        if block.round != self.round {
            self.stale_dropped += 1;
            return Ok(UploadProgress::default());
        }
        if self.complete {
            self.redundant_rejected += 1;
            return Ok(UploadProgress::default());
        }
        if block.agr_count as usize > self.n {
            return Err(ProtocolError::Violation(format!(
                "agr_count {} exceeds client count {}",
                block.agr_count, self.n
            )));
        }
        match self.mode {
            UploadMode::Direct | UploadMode::CodedRelay => self.receive_per_client(block),
            UploadMode::CodedAgr { .. } => self.receive_agr(block),
            UploadMode::Hierarchical => self.receive_hier(block),
        }
    }

    fn receive_per_client(&mut self, block: EncodedBlock) -> Result<UploadProgress, ProtocolError> {
        let origin = block.origin;
        if self.decoded.contains_key(&origin) {
            self.redundant_rejected += 1;
            return Ok(UploadProgress::default());
        }
        let k = self.k;
        let dec = self
            .per_client
            .entry(origin)
            .or_insert_with(|| GuardedDecoder::new(k));
        let out = dec.offer(&block)?;
        if out == OfferOutcome::RedundantRejected {
            self.redundant_rejected += 1;
        }
        let mut progress = UploadProgress::default();
        if dec.is_ready() {
            let model = dec.finish(self.model_len)?;
            self.decoded.insert(origin, model);
            progress.newly_covered.push(origin);
            if self.decoded.len() == self.n {
                // Weighted average over the individually decoded models.
                let mut acc = vec![0.0f64; self.model_len];
                for (&id, m) in self.decoded.iter() {
                    let w = self.weights.weight((id - 1) as usize);
                    for (a, &x) in acc.iter_mut().zip(m.elements.iter()) {
                        *a += w * x as f64;
                    }
                }
                self.aggregate = Some(acc.into_iter().map(|x| x as f32).collect());
                self.complete = true;
                progress.complete = true;
            }
        }
        Ok(progress)
    }

    fn receive_agr(&mut self, block: EncodedBlock) -> Result<UploadProgress, ProtocolError> {
        let index = block.block_index;
        let expected = shared_coefficients(index as usize, self.k);
        if block.coeffs != expected {
            self.violations += 1;
            return Ok(UploadProgress::default());
        }
        if self.agr_consumed.contains(&index) {
            self.redundant_rejected += 1;
            return Ok(UploadProgress::default());
        }
        self.agr_contributions += block.agr_count as u64;
        // Fold same-index partials until every client is accounted.
        let slot = self.agr_partials.entry(index).or_insert_with(|| AgrSlot {
            acc: EncodedBlock {
                payload: vec![0.0; block.payload.len()],
                agr_count: 0,
                origin_kind: OriginKind::Aggregated,
                ..block.clone()
            },
            contributors: BTreeSet::new(),
        });
        slot.acc.payload = slot
            .acc
            .payload
            .iter()
            .zip(block.payload.iter())
            .map(|(a, b)| a + b)
            .collect();
        slot.acc.agr_count += block.agr_count;
        if (slot.acc.agr_count as usize) < self.n {
            return Ok(UploadProgress::default());
        }
        if slot.acc.agr_count as usize > self.n {
            return Err(ProtocolError::Violation(format!(
                "index {} accumulated {} contributions for {} clients",
                index, slot.acc.agr_count, self.n
            )));
        }
        let ready_block = self.agr_partials.remove(&index).expect("just inserted").acc;
        self.agr_consumed.insert(index);
        let out = self.agr_decoder.offer(&ready_block)?;
        if out == OfferOutcome::RedundantRejected {
            self.redundant_rejected += 1;
        }
        let mut progress = UploadProgress::default();
        let forced = !self.agr_decoder.is_ready()
            && self.agr_decoder.rank_complete()
            && self.agr_consumed.len() >= self.agr_total_indices;
        if self.agr_decoder.is_ready() || forced {
            // The decoded vector is already the weighted aggregate.
            let model = self.agr_decoder.finish(self.model_len)?;
            self.aggregate = Some(model.elements);
            self.complete = true;
            progress.complete = true;
            progress.newly_covered = (1..=self.n as NodeId).collect();
        }
        Ok(progress)
    }

    fn receive_hier(&mut self, block: EncodedBlock) -> Result<UploadProgress, ProtocolError> {
        // One weighted partial sum per cluster; payload adds directly.
        let center = block.origin;
        let members = self.cluster_members.get(&center).cloned().unwrap_or_default();
        if members.is_empty() {
            self.violations += 1;
            return Ok(UploadProgress::default());
        }
        if members.iter().any(|m| self.hier_covered.contains(m)) {
            self.redundant_rejected += 1;
            return Ok(UploadProgress::default());
        }
        if block.agr_count as usize != members.len() {
            return Err(ProtocolError::Violation(format!(
                "cluster block from {} carries {} contributions for {} members",
                center,
                block.agr_count,
                members.len()
            )));
        }
        for (a, &x) in self.hier_sum.iter_mut().zip(block.payload.iter()) {
            *a += x as f64;
        }
        let mut progress = UploadProgress::default();
        for m in members {
            self.hier_covered.insert(m);
            progress.newly_covered.push(m);
        }
        if self.hier_covered.len() == self.n {
            self.aggregate = Some(self.hier_sum.iter().map(|&x| x as f32).collect());
            self.complete = true;
            progress.complete = true;
        }
        Ok(progress)
    }
}

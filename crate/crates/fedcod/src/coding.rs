//! Linear coding of model partitions over real vectors.
//!
//! A model is a flat `f32` weight vector. It is zero-padded to a multiple of
//! `k`, split into `k` equal partitions, and encoded into data blocks, each a
//! linear combination of the partitions under an `f64` coefficient vector.
//! Any `k` blocks with linearly independent coefficient rows recover the
//! model by Gaussian elimination. Coefficients are either random (download
//! path, generated by the server) or deterministic Cauchy rows (coded
//! aggregation, where all clients must agree on the `j`-th row without
//! coordination).

use thiserror::Error;

/// Coefficients smaller than this are redrawn / treated as numerically zero
/// when generating random rows.
pub const MIN_COEFF_ABS: f64 = 1e-6;

/// Pivot magnitude below which an eliminated row is considered linearly
/// dependent on the rows already accepted.
pub const PIVOT_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum CodingError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("not decodable: rank {rank} of {k}")]
    NotDecodable { rank: usize, k: usize },
    #[error("incompatible blocks: {0}")]
    IncompatibleBlocks(&'static str),
}

/// A flat model weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelVector {
    pub elements: Vec<f32>,
}

impl ModelVector {
    pub fn new(elements: Vec<f32>) -> Self {
        Self { elements }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

/// One of the `k` equal-sized slices of a padded model. `index` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub index: usize,
    pub data: Vec<f32>,
}

/// A length-`k` coefficient row.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector {
    pub coefficients: Vec<f64>,
}

impl CoefficientVector {
    pub fn new(coefficients: Vec<f64>) -> Self {
        Self { coefficients }
    }

    pub fn k(&self) -> usize {
        self.coefficients.len()
    }
}

/// Where a block was produced, which drives forwarding rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OriginKind {
    ServerOrigin,
    ClientOrigin,
    Aggregated,
}

/// One encoded data block: a coefficient row plus the matching linear
/// combination of the partitions, tagged with routing metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBlock {
    pub round: u32,
    pub origin: u16,
    pub block_index: u16,
    pub coeffs: CoefficientVector,
    pub payload: Vec<f32>,
    pub origin_kind: OriginKind,
    /// Number of client contributions summed into this block; 1 unless
    /// `origin_kind == Aggregated`.
    pub agr_count: u16,
}

/// Splits a model into `k` partitions of equal length, zero-padding the tail.
/// Concatenating the partitions and truncating to the original length gives
/// the model back exactly.
pub fn split(model: &ModelVector, k: usize) -> Result<Vec<Partition>, CodingError> {
    if k == 0 {
        return Err(CodingError::InvalidParameter("k must be >= 1"));
    }
    if model.is_empty() {
        return Err(CodingError::InvalidParameter("model must be non-empty"));
    }
    let part_len = model.len().div_ceil(k);
    let mut parts = Vec::with_capacity(k);
    for i in 0..k {
        let start = i * part_len;
        let mut data = vec![0.0f32; part_len];
        if start < model.len() {
            let end = (start + part_len).min(model.len());
            data[..end - start].copy_from_slice(&model.elements[start..end]);
        }
        parts.push(Partition { index: i + 1, data });
    }
    Ok(parts)
}

/// Length of each partition for a model of `len` elements split `k` ways.
pub fn partition_len(len: usize, k: usize) -> usize {
    len.div_ceil(k)
}

/// Encodes the partitions under one coefficient row:
/// `payload[m] = sum_j coeffs[j] * partitions[j][m]`.
///
/// Routing metadata on the returned block is neutral; callers stamp round,
/// origin and index for their context.
pub fn encode(
    partitions: &[Partition],
    coeffs: &CoefficientVector,
) -> Result<EncodedBlock, CodingError> {
    if coeffs.k() != partitions.len() {
        return Err(CodingError::DimensionMismatch {
            expected: partitions.len(),
            got: coeffs.k(),
        });
    }
    if partitions.is_empty() {
        return Err(CodingError::InvalidParameter("no partitions"));
    }
    let m = partitions[0].data.len();
    for p in partitions {
        if p.data.len() != m {
            return Err(CodingError::DimensionMismatch {
                expected: m,
                got: p.data.len(),
            });
        }
    }
    // Accumulate in f64, store f32: payloads are 32-bit on the wire.
    let mut acc = vec![0.0f64; m];
    for (j, p) in partitions.iter().enumerate() {
        let a = coeffs.coefficients[j];
        for (dst, &x) in acc.iter_mut().zip(p.data.iter()) {
            *dst += a * x as f64;
        }
    }
    Ok(EncodedBlock {
        round: 0,
        origin: 0,
        block_index: 0,
        coeffs: coeffs.clone(),
        payload: acc.into_iter().map(|x| x as f32).collect(),
        origin_kind: OriginKind::ClientOrigin,
        agr_count: 1,
    })
}

/// Draws a coefficient row uniformly from `[-1, 1]`, redrawing any entry
/// whose magnitude falls below [`MIN_COEFF_ABS`].
pub fn random_coefficients<R: rand::Rng>(k: usize, rng: &mut R) -> CoefficientVector {
    assert!(k >= 1, "k must be >= 1");
    let mut coefficients = Vec::with_capacity(k);
    for _ in 0..k {
        let mut a: f64 = rng.gen_range(-1.0..=1.0);
        while a.abs() < MIN_COEFF_ABS {
            a = rng.gen_range(-1.0..=1.0);
        }
        coefficients.push(a);
    }
    CoefficientVector { coefficients }
}

/// Seed constant for the shared coefficient families; part of the protocol,
/// identical on every node.
const SHARED_ROW_KEY: u64 = 0x4643_4f44_5257_0001;

/// Condition-number budget for guarded decoding. With 32-bit payloads the
/// decode error scales like `kappa * 1e-7`, so staying a couple of orders
/// below the 1e-4 accuracy target leaves margin.
pub const DEFAULT_KAPPA_LIMIT: f64 = 250.0;

fn cosine_basis_row(s: usize, k: usize) -> Vec<f64> {
    let norm = (2.0 / k as f64).sqrt();
    let step = std::f64::consts::PI / k as f64;
    (0..k)
        .map(|i| norm * (step * (i as f64 + 0.5) * (s as f64 + 0.5)).cos())
        .collect()
}

/// Rows of a keyed random orthogonal matrix (modified Gram-Schmidt over
/// Gaussian draws). Deterministic for a given `(family, k)`.
fn orthogonal_family(family: usize, k: usize) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = crate::rng::substream(SHARED_ROW_KEY, crate::rng::Stream::UploadCoeffs, &[
        family as u64,
        k as u64,
    ]);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v: Vec<f64> = (0..k)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        for prev in &rows {
            let dot: f64 = v.iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
            for (x, &p) in v.iter_mut().zip(prev.iter()) {
                *x -= dot * p;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // essentially impossible; redraw keeps the function total
        }
        for x in v.iter_mut() {
            *x /= norm;
        }
        rows.push(v);
    }
    rows
}

/// Row `j` of the shared coefficient sequence for partition count `k`.
///
/// All clients must encode index `j` with the same row without coordinating,
/// so this is a pure function: identical `(j, k)` gives bitwise-identical
/// output on every node, for unbounded `j`. Rows `0..k-1` form an exactly
/// orthonormal cosine basis, so the redundancy-free path decodes at unit
/// condition number; each further band of `k` rows is a keyed random
/// orthogonal family, keeping any `k` distinct rows invertible and
/// well-conditioned with overwhelming probability.
pub fn shared_coefficients(j: usize, k: usize) -> CoefficientVector {
    assert!(k >= 1, "k must be >= 1");
    let family = j / k;
    let s = j % k;
    let coefficients = if family == 0 {
        cosine_basis_row(s, k)
    } else {
        orthogonal_family(family, k).swap_remove(s)
    };
    CoefficientVector { coefficients }
}

/// Outcome of offering a block to a decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OfferOutcome {
    /// The row increased rank; more blocks are still needed.
    Accepted,
    /// The row is linearly dependent on the rows already held.
    RedundantRejected,
    /// The row increased rank to `k`; decoding is now possible.
    Complete,
}

/// Incremental rank-tracking decoder.
///
/// Accepted rows are kept verbatim for the final solve; rank decisions use a
/// separately maintained eliminated copy of the coefficient rows with partial
/// pivoting and the [`PIVOT_THRESHOLD`] cutoff.
#[derive(Debug, Clone)]
pub struct DecoderState {
    k: usize,
    accepted: Vec<(CoefficientVector, Vec<f32>)>,
    /// Eliminated coefficient rows, parallel to `accepted`.
    reduced: Vec<Vec<f64>>,
    /// Pivot column of each reduced row.
    pivots: Vec<usize>,
}

impl DecoderState {
    pub fn new(k: usize) -> Self {
        assert!(k >= 1, "k must be >= 1");
        Self {
            k,
            accepted: Vec::with_capacity(k),
            reduced: Vec::with_capacity(k),
            pivots: Vec::with_capacity(k),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rank(&self) -> usize {
        self.accepted.len()
    }

    pub fn is_complete(&self) -> bool {
        self.rank() == self.k
    }

    /// The retained (coefficients, payload) rows, in acceptance order.
    pub fn accepted_rows(&self) -> &[(CoefficientVector, Vec<f32>)] {
        &self.accepted
    }

    /// Offers one block. The row is kept iff it increases numerical rank.
    pub fn offer(&mut self, block: &EncodedBlock) -> Result<OfferOutcome, CodingError> {
        if block.coeffs.k() != self.k {
            return Err(CodingError::DimensionMismatch {
                expected: self.k,
                got: block.coeffs.k(),
            });
        }
        if self.is_complete() {
            return Ok(OfferOutcome::RedundantRejected);
        }
        let mut row = block.coeffs.coefficients.clone();
        for (r, &p) in self.reduced.iter().zip(self.pivots.iter()) {
            let factor = row[p] / r[p];
            if factor != 0.0 {
                for (x, &y) in row.iter_mut().zip(r.iter()) {
                    *x -= factor * y;
                }
            }
        }
        let (pivot_col, pivot_abs) = row
            .iter()
            .enumerate()
            .map(|(i, &x)| (i, x.abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("k >= 1");
        if pivot_abs <= PIVOT_THRESHOLD {
            return Ok(OfferOutcome::RedundantRejected);
        }
        self.accepted
            .push((block.coeffs.clone(), block.payload.clone()));
        self.reduced.push(row);
        self.pivots.push(pivot_col);
        if self.is_complete() {
            Ok(OfferOutcome::Complete)
        } else {
            Ok(OfferOutcome::Accepted)
        }
    }

    /// Solves for the partitions and reassembles the model, truncated to
    /// `original_length`.
    pub fn finish(&self, original_length: usize) -> Result<ModelVector, CodingError> {
        if !self.is_complete() {
            return Err(CodingError::NotDecodable {
                rank: self.rank(),
                k: self.k,
            });
        }
        let k = self.k;
        let m = self.accepted[0].1.len();
        // Augmented system [A | P]: row per accepted block, A is k x k, P is
        // the payload matrix k x m. Partial pivoting, then back-substitution.
        let mut a = vec![0.0f64; k * k];
        let mut p = vec![0.0f64; k * m];
        for (r, (coeffs, payload)) in self.accepted.iter().enumerate() {
            if payload.len() != m {
                return Err(CodingError::DimensionMismatch {
                    expected: m,
                    got: payload.len(),
                });
            }
            a[r * k..(r + 1) * k].copy_from_slice(&coeffs.coefficients);
            for (c, &x) in payload.iter().enumerate() {
                p[r * m + c] = x as f64;
            }
        }
        for col in 0..k {
            let (best_row, best_abs) = (col..k)
                .map(|r| (r, a[r * k + col].abs()))
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .expect("non-empty range");
            if best_abs <= PIVOT_THRESHOLD {
                return Err(CodingError::NotDecodable { rank: col, k });
            }
            if best_row != col {
                for j in 0..k {
                    a.swap(col * k + j, best_row * k + j);
                }
                for j in 0..m {
                    p.swap(col * m + j, best_row * m + j);
                }
            }
            let inv_pivot = 1.0 / a[col * k + col];
            for r in (col + 1)..k {
                let factor = a[r * k + col] * inv_pivot;
                if factor == 0.0 {
                    continue;
                }
                for j in col..k {
                    a[r * k + j] -= factor * a[col * k + j];
                }
                for j in 0..m {
                    p[r * m + j] -= factor * p[col * m + j];
                }
            }
        }
        // Back-substitution; X[i] ends up in p's row i.
        for col in (0..k).rev() {
            let inv_pivot = 1.0 / a[col * k + col];
            for j in 0..m {
                p[col * m + j] *= inv_pivot;
            }
            for r in 0..col {
                let factor = a[r * k + col];
                if factor == 0.0 {
                    continue;
                }
                for j in 0..m {
                    p[r * m + j] -= factor * p[col * m + j];
                }
            }
        }
        let mut elements = Vec::with_capacity(k * m);
        for v in p.iter() {
            elements.push(*v as f32);
        }
        elements.truncate(original_length);
        Ok(ModelVector { elements })
    }

    fn coeff_matrix(&self) -> Vec<f64> {
        let k = self.k;
        let mut a = vec![0.0f64; k * k];
        for (r, (coeffs, _)) in self.accepted.iter().enumerate() {
            a[r * k..(r + 1) * k].copy_from_slice(&coeffs.coefficients);
        }
        a
    }

    /// 1-norm condition estimate of the accepted coefficient matrix;
    /// infinity while rank is incomplete or the matrix is singular.
    pub fn condition_estimate(&self) -> f64 {
        if !self.is_complete() {
            return f64::INFINITY;
        }
        condition_1norm(&self.coeff_matrix(), self.k)
    }

    /// With rank already complete, tries to lower the condition estimate by
    /// swapping one accepted row for `block`'s row. Returns true if a swap
    /// was made.
    pub fn try_improve(&mut self, block: &EncodedBlock) -> bool {
        if !self.is_complete() || block.coeffs.k() != self.k {
            return false;
        }
        let k = self.k;
        let current = self.condition_estimate();
        let mut base = self.coeff_matrix();
        let mut best: Option<(usize, f64)> = None;
        for r in 0..k {
            let saved: Vec<f64> = base[r * k..(r + 1) * k].to_vec();
            base[r * k..(r + 1) * k].copy_from_slice(&block.coeffs.coefficients);
            let kappa = condition_1norm(&base, k);
            base[r * k..(r + 1) * k].copy_from_slice(&saved);
            if kappa < current * 0.9 && best.map_or(true, |(_, b)| kappa < b) {
                best = Some((r, kappa));
            }
        }
        if let Some((r, _)) = best {
            self.accepted[r] = (block.coeffs.clone(), block.payload.clone());
            true
        } else {
            false
        }
    }
}

fn invert_matrix(a: &[f64], k: usize) -> Option<Vec<f64>> {
    let mut aug = vec![0.0f64; k * 2 * k];
    for r in 0..k {
        aug[r * 2 * k..r * 2 * k + k].copy_from_slice(&a[r * k..(r + 1) * k]);
        aug[r * 2 * k + k + r] = 1.0;
    }
    for col in 0..k {
        let (best_row, best_abs) = (col..k)
            .map(|r| (r, aug[r * 2 * k + col].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))?;
        if best_abs <= PIVOT_THRESHOLD {
            return None;
        }
        if best_row != col {
            for j in 0..2 * k {
                aug.swap(col * 2 * k + j, best_row * 2 * k + j);
            }
        }
        let inv_pivot = 1.0 / aug[col * 2 * k + col];
        for j in 0..2 * k {
            aug[col * 2 * k + j] *= inv_pivot;
        }
        for r in 0..k {
            if r == col {
                continue;
            }
            let factor = aug[r * 2 * k + col];
            if factor == 0.0 {
                continue;
            }
            for j in 0..2 * k {
                aug[r * 2 * k + j] -= factor * aug[col * 2 * k + j];
            }
        }
    }
    let mut inv = vec![0.0f64; k * k];
    for r in 0..k {
        inv[r * k..(r + 1) * k].copy_from_slice(&aug[r * 2 * k + k..(r + 1) * 2 * k]);
    }
    Some(inv)
}

fn norm_1(a: &[f64], k: usize) -> f64 {
    (0..k)
        .map(|c| (0..k).map(|r| a[r * k + c].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn condition_1norm(a: &[f64], k: usize) -> f64 {
    match invert_matrix(a, k) {
        Some(inv) => norm_1(a, k) * norm_1(&inv, k),
        None => f64::INFINITY,
    }
}

/// A [`DecoderState`] that holds completion until the accepted rows are also
/// well-conditioned, trading one or two extra blocks in the rare tail for a
/// bounded decode error.
///
/// Rank decisions are unchanged; once rank is complete but the condition
/// estimate is above the limit, further rows are used for row swaps instead
/// of being discarded. Callers that know no more rows can arrive may
/// [`Self::finish`] regardless.
#[derive(Debug, Clone)]
pub struct GuardedDecoder {
    inner: DecoderState,
    kappa_limit: f64,
    ready: bool,
}

impl GuardedDecoder {
    pub fn new(k: usize) -> Self {
        Self::with_limit(k, DEFAULT_KAPPA_LIMIT)
    }

    pub fn with_limit(k: usize, kappa_limit: f64) -> Self {
        Self {
            inner: DecoderState::new(k),
            kappa_limit,
            ready: false,
        }
    }

    pub fn k(&self) -> usize {
        self.inner.k()
    }

    pub fn rank(&self) -> usize {
        self.inner.rank()
    }

    pub fn rank_complete(&self) -> bool {
        self.inner.is_complete()
    }

    /// Rank complete and conditioning within the limit.
    pub fn is_ready(&self) -> bool {
        self.ready
    }

    pub fn accepted_rows(&self) -> &[(CoefficientVector, Vec<f32>)] {
        self.inner.accepted_rows()
    }

    pub fn offer(&mut self, block: &EncodedBlock) -> Result<OfferOutcome, CodingError> {
        if self.ready {
            // Dimension errors still surface; anything else is redundant.
            if block.coeffs.k() != self.inner.k() {
                return Err(CodingError::DimensionMismatch {
                    expected: self.inner.k(),
                    got: block.coeffs.k(),
                });
            }
            return Ok(OfferOutcome::RedundantRejected);
        }
        if !self.inner.is_complete() {
            let out = self.inner.offer(block)?;
            if out == OfferOutcome::Complete {
                if self.inner.condition_estimate() <= self.kappa_limit {
                    self.ready = true;
                    return Ok(OfferOutcome::Complete);
                }
                // Rank done but ill-conditioned: keep collecting.
                return Ok(OfferOutcome::Accepted);
            }
            return Ok(out);
        }
        if block.coeffs.k() != self.inner.k() {
            return Err(CodingError::DimensionMismatch {
                expected: self.inner.k(),
                got: block.coeffs.k(),
            });
        }
        if self.inner.try_improve(block) && self.inner.condition_estimate() <= self.kappa_limit {
            self.ready = true;
            return Ok(OfferOutcome::Complete);
        }
        Ok(OfferOutcome::RedundantRejected)
    }

    /// Solves with whatever rows are held; requires rank completion only.
    pub fn finish(&self, original_length: usize) -> Result<ModelVector, CodingError> {
        self.inner.finish(original_length)
    }
}

/// Sums two blocks that carry the same coefficient row for the same index,
/// producing an aggregated block whose `agr_count` accounts both sides.
pub fn aggregate_blocks(a: &EncodedBlock, b: &EncodedBlock) -> Result<EncodedBlock, CodingError> {
    if a.block_index != b.block_index {
        return Err(CodingError::IncompatibleBlocks("block index mismatch"));
    }
    if a.round != b.round {
        return Err(CodingError::IncompatibleBlocks("round mismatch"));
    }
    if a.coeffs != b.coeffs {
        return Err(CodingError::IncompatibleBlocks("coefficient mismatch"));
    }
    if a.payload.len() != b.payload.len() {
        return Err(CodingError::IncompatibleBlocks("payload length mismatch"));
    }
    let payload = a
        .payload
        .iter()
        .zip(b.payload.iter())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(EncodedBlock {
        round: a.round,
        origin: a.origin,
        block_index: a.block_index,
        coeffs: a.coeffs.clone(),
        payload,
        origin_kind: OriginKind::Aggregated,
        agr_count: a.agr_count + b.agr_count,
    })
}

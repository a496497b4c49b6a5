//! Continuous integrate-and-fire segmentation.
//!
//! A weight head turns frame features into per-frame weights α ∈ (0, 1).
//! Accumulating α left to right partitions the weight axis into cells of
//! size β; each cell aggregates its overlapping frames into one segment
//! embedding, "firing" at the frame where the running sum crosses the cell
//! boundary. A frame whose weight straddles a boundary is split between the
//! adjacent segments, so every segment is a weighted sum of a contiguous
//! frame span.
//!
//! Differentiation treats the firing pattern (which cumsum/grid bound is
//! active per cell-frame pair) as a constant of the forward pass while the
//! weighted sums themselves stay differentiable in both α and the frames.

use ndarray::{ArrayD, Ix2, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Firing threshold and tail-emission threshold defaults.
pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_TAIL: f64 = 0.5;

/// Per-frame accumulation weights for a padded batch.
///
/// `values` is `[b, t_max]`; padded positions are exactly zero. Raw head
/// outputs are strictly inside (0, 1); scaled weights may exceed 1.
pub struct AlphaWeights {
    pub values: Tensor,
    pub lengths: Vec<usize>,
}

impl AlphaWeights {
    pub fn new(values: Tensor, lengths: Vec<usize>) -> Result<AlphaWeights> {
        let s = values.shape();
        if s.len() != 2 || s[0] != lengths.len() {
            return Err(Error::shape(format!(
                "alpha weights [b, t] with b = lengths: got {:?} vs {} lengths",
                s,
                lengths.len()
            )));
        }
        if lengths.iter().any(|&l| l > s[1]) {
            return Err(Error::Data("valid length exceeds t_max".into()));
        }
        let v = values.value();
        for (b, &len) in lengths.iter().enumerate() {
            for t in len..s[1] {
                if v[[b, t]] != 0.0 {
                    return Err(Error::Data(format!(
                        "alpha not zero at padded position ({b}, {t})"
                    )));
                }
            }
        }
        Ok(AlphaWeights { values, lengths })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    /// Valid-frame weights of one utterance as plain values.
    pub fn row(&self, b: usize) -> Vec<f64> {
        let v = self.values.value();
        (0..self.lengths[b]).map(|t| v[[b, t]]).collect()
    }
}

/// Variable-length segment embeddings with firing positions.
///
/// `segments` is `[b, l_max, d]` zero-padded past each utterance's count.
/// `firing_frames` holds, per utterance, the 0-based frame index at which
/// each segment fired (nondecreasing; equal indices mean one frame carried
/// enough weight to fire more than once).
pub struct SegmentBatch {
    pub segments: Tensor,
    pub counts: Vec<usize>,
    pub firing_frames: Vec<Vec<usize>>,
}

impl SegmentBatch {
    pub fn max_count(&self) -> usize {
        self.segments.shape()[1]
    }
}

/// Parameters of the α head: conv1d (width 3, stride 1, d_model channels),
/// dropout, ReLU, then an affine map to one logit per frame and a sigmoid.
pub struct AlphaHeadParams<'a> {
    pub conv_kernel: &'a Tensor,
    pub conv_bias: &'a Tensor,
    pub ff_weight: &'a Tensor,
    pub ff_bias: &'a Tensor,
}

/// Per-frame weights from frame features.
///
/// Padded positions are zeroed on entry (the head must not read junk past
/// the valid length through the convolution window) and forced to exactly
/// zero on exit. Dropout (p = 0.5 by convention) applies in training mode
/// only.
pub fn compute_alpha<R: Rng>(
    frames: &Tensor,
    lengths: &[usize],
    params: &AlphaHeadParams,
    dropout_p: f64,
    rng: &mut R,
    training: bool,
) -> Result<AlphaWeights> {
    let s = frames.shape();
    if s.len() != 3 || s[0] != lengths.len() {
        return Err(Error::shape(format!(
            "compute_alpha: frames [b, t, d] with b = lengths, got {:?}",
            s
        )));
    }
    let (b, t_max, d) = (s[0], s[1], s[2]);
    let mask = valid_mask(lengths, t_max);
    let mask3 = Tensor::constant(
        mask.clone()
            .insert_axis(ndarray::Axis(2))
            .broadcast(IxDyn(&[b, t_max, d]))
            .unwrap()
            .to_owned(),
    );
    let x = frames.mul(&mask3)?;
    let h = x
        .conv1d_batch(params.conv_kernel, 1)?
        .reshape(&[b * t_max, d])?
        .add_row(params.conv_bias)?;
    let h = h.dropout(dropout_p, rng, training)?.relu();
    let logits = h
        .matmul(&params.ff_weight.reshape(&[d, 1])?)?
        .add_row(&params.ff_bias.reshape(&[1])?)?
        .reshape(&[b, t_max])?;
    let alpha = logits.sigmoid().mul(&Tensor::constant(mask.into_dyn()))?;
    AlphaWeights::new(alpha, lengths.to_vec())
}

fn valid_mask(lengths: &[usize], t_max: usize) -> ndarray::Array2<f64> {
    let mut m = ndarray::Array2::<f64>::zeros((lengths.len(), t_max));
    for (bi, &len) in lengths.iter().enumerate() {
        for t in 0..len {
            m[[bi, t]] = 1.0;
        }
    }
    m
}

/// Rescale each utterance's weights so they sum to its target length.
pub fn scale_alpha(a: &AlphaWeights, targets: &[f64]) -> Result<AlphaWeights> {
    if targets.len() != a.batch() {
        return Err(Error::shape(format!(
            "scale_alpha: {} targets for batch {}",
            targets.len(),
            a.batch()
        )));
    }
    if targets.iter().any(|&l| l <= 0.0) {
        return Err(Error::Parameter("scale_alpha: targets must be positive".into()));
    }
    let sums = a.values.sum_axis(1)?;
    if sums.value().iter().any(|&s| s <= 0.0) {
        return Err(Error::Numeric(
            "scale_alpha: degenerate input (alpha sums to zero)".into(),
        ));
    }
    let t = Tensor::constant(ndarray::Array1::from_vec(targets.to_vec()).into_dyn());
    let ratio = t.div(&sums)?;
    let scaled = a.values.mul_col(&ratio)?;
    AlphaWeights::new(scaled, a.lengths.clone())
}

/// Mean over the batch of `|sum(alpha) - target|`.
///
/// The absolute value uses subgradient 0 at the kink. Targets are
/// per-utterance reals (see [`cif_target_length`]).
pub fn quantity_loss(a: &AlphaWeights, targets: &[f64]) -> Result<Tensor> {
    if targets.len() != a.batch() {
        return Err(Error::shape(format!(
            "quantity_loss: {} targets for batch {}",
            targets.len(),
            a.batch()
        )));
    }
    let sums = a.values.sum_axis(1)?;
    let t = Tensor::constant(ndarray::Array1::from_vec(targets.to_vec()).into_dyn());
    Ok(sums.sub(&t)?.abs().mean_all())
}

/// Target segment count: `max(1, round(ratio * valid_length))` with
/// round-half-to-even.
pub fn cif_target_length(valid_length: usize, ratio: f64) -> Result<f64> {
    if ratio <= 0.0 {
        return Err(Error::Parameter("cif_target_length: ratio must be positive".into()));
    }
    Ok((ratio * valid_length as f64).round_ties_even().max(1.0))
}

#[derive(Clone, Copy, Debug)]
enum Bound {
    /// Cumulative sum through frame t (inclusive); differentiable in α.
    Cum(usize),
    /// Fixed grid value (a multiple of β); constant.
    Grid(f64),
}

struct FirePlan {
    /// Per segment: (frame, upper bound, lower bound) pieces.
    pieces: Vec<Vec<(usize, Bound, Bound)>>,
    fires: Vec<usize>,
}

/// Left-to-right accumulation plan for one utterance. `emit_tail` controls
/// whether residual weight above `tail` produces a final segment.
fn plan_fires(alpha: &[f64], beta: f64, tail: f64, force_tail: bool) -> FirePlan {
    let t_len = alpha.len();
    let mut cum = Vec::with_capacity(t_len);
    let mut acc = 0.0;
    for &a in alpha {
        acc += a;
        cum.push(acc);
    }
    let total = if t_len == 0 { 0.0 } else { cum[t_len - 1] };
    // Full cells: every i with i*beta <= total.
    let mut full = 0usize;
    while (full + 1) as f64 * beta <= total {
        full += 1;
    }
    let residual = total - full as f64 * beta;
    let emit_tail = force_tail || residual > tail;

    let mut pieces: Vec<Vec<(usize, Bound, Bound)>> = Vec::new();
    let mut fires: Vec<usize> = Vec::new();
    let n_segments = full + usize::from(emit_tail);
    for i in 1..=n_segments {
        let is_tail = i > full;
        let cell_lo = (i - 1) as f64 * beta;
        let cell_hi = if is_tail { total } else { i as f64 * beta };
        let mut segment: Vec<(usize, Bound, Bound)> = Vec::new();
        let mut fire_at = t_len.saturating_sub(1);
        for t in 0..t_len {
            let frame_lo = if t == 0 { 0.0 } else { cum[t - 1] };
            let frame_hi = cum[t];
            if frame_hi <= cell_lo {
                continue;
            }
            if frame_lo >= cell_hi {
                break;
            }
            let upper = if is_tail {
                Bound::Cum(if frame_hi < cell_hi { t } else { t_len - 1 })
            } else if frame_hi < cell_hi {
                Bound::Cum(t)
            } else {
                Bound::Grid(cell_hi)
            };
            let lower = if t == 0 || frame_lo <= cell_lo {
                Bound::Grid(cell_lo)
            } else {
                Bound::Cum(t - 1)
            };
            segment.push((t, upper, lower));
            if !is_tail && frame_hi >= cell_hi {
                fire_at = t;
                break;
            }
        }
        if is_tail {
            fire_at = t_len.saturating_sub(1);
        }
        pieces.push(segment);
        fires.push(fire_at);
    }
    FirePlan { pieces, fires }
}

/// Differentiable `[l, t]` weight matrix for one utterance's plan.
fn weight_matrix(alpha_row: &Tensor, plan: &FirePlan, t_len: usize) -> Tensor {
    let l = plan.pieces.len();
    let cum: Vec<f64> = {
        let mut acc = 0.0;
        alpha_row
            .value()
            .iter()
            .map(|&a| {
                acc += a;
                acc
            })
            .collect()
    };
    let bound_val = |b: &Bound| match *b {
        Bound::Cum(t) => cum[t],
        Bound::Grid(v) => v,
    };
    let mut w = ndarray::Array2::<f64>::zeros((l, t_len));
    for (i, segment) in plan.pieces.iter().enumerate() {
        for (t, upper, lower) in segment {
            let v = bound_val(upper) - bound_val(lower);
            w[[i, *t]] = v.max(0.0);
        }
    }
    // Adjoint: dα_s = Σ_{u >= s} dA_u where dA collects ±dW over cum bounds.
    let pattern: Vec<Vec<(usize, Bound, Bound)>> = plan.pieces.clone();
    Tensor::op(
        w.into_dyn(),
        vec![alpha_row.clone()],
        Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut d_cum = vec![0.0f64; t_len];
            for (i, segment) in pattern.iter().enumerate() {
                for (t, upper, lower) in segment {
                    let gw = g2[[i, *t]];
                    if let Bound::Cum(u) = upper {
                        d_cum[*u] += gw;
                    }
                    if let Bound::Cum(v) = lower {
                        d_cum[*v] -= gw;
                    }
                }
            }
            let mut d_alpha = vec![0.0f64; t_len];
            let mut suffix = 0.0;
            for s in (0..t_len).rev() {
                suffix += d_cum[s];
                d_alpha[s] = suffix;
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&[t_len]), d_alpha).unwrap())]
        }),
    )
}

/// Accumulate-and-fire segmentation of a padded frame batch.
///
/// When `expected` is given (scaled training mode) the per-utterance output
/// is corrected to exactly that many segments: a residual at most one short
/// is emitted, one extra segment is truncated, and any larger discrepancy is
/// an internal-consistency error.
pub fn integrate_and_fire(
    frames: &Tensor,
    a: &AlphaWeights,
    beta: f64,
    tail: f64,
    expected: Option<&[usize]>,
) -> Result<SegmentBatch> {
    if beta <= 0.0 {
        return Err(Error::Parameter("integrate_and_fire: beta must be positive".into()));
    }
    let s = frames.shape();
    if s.len() != 3 || s[0] != a.batch() {
        return Err(Error::shape(format!(
            "integrate_and_fire: frames [b, t, d] matching alpha batch, got {:?}",
            s
        )));
    }
    if let Some(e) = expected {
        if e.len() != a.batch() {
            return Err(Error::shape("integrate_and_fire: expected lengths batch mismatch"));
        }
    }
    let (batch, t_max, d) = (s[0], s[1], s[2]);

    let mut plans: Vec<FirePlan> = Vec::with_capacity(batch);
    for bi in 0..batch {
        let alpha_row = a.row(bi);
        let mut plan = plan_fires(&alpha_row, beta, tail, false);
        if let Some(targets) = expected {
            let want = targets[bi];
            let got = plan.pieces.len();
            if got + 1 == want {
                // short by one: force the residual out as a final segment
                plan = plan_fires(&alpha_row, beta, tail, true);
                if plan.pieces.len() != want {
                    return Err(Error::Internal(format!(
                        "cif correction failed: {} segments after forced tail, expected {want}",
                        plan.pieces.len()
                    )));
                }
            } else if got == want + 1 {
                plan.pieces.truncate(want);
                plan.fires.truncate(want);
            } else if got != want {
                return Err(Error::Internal(format!(
                    "cif fired {got} segments but {want} expected (off by more than one)"
                )));
            }
        }
        plans.push(plan);
    }

    let l_max = plans.iter().map(|p| p.pieces.len()).max().unwrap_or(0).max(1);
    let mut per_item: Vec<Tensor> = Vec::with_capacity(batch);
    for (bi, plan) in plans.iter().enumerate() {
        let t_len = a.lengths[bi];
        let l = plan.pieces.len();
        let x_b = frames.narrow(0, bi, 1)?.reshape(&[t_max, d])?;
        let seg = if l > 0 && t_len > 0 {
            let alpha_row = a
                .values
                .narrow(0, bi, 1)?
                .reshape(&[t_max])?
                .narrow(0, 0, t_len)?;
            let w = weight_matrix(&alpha_row, plan, t_len);
            let x_valid = x_b.narrow(0, 0, t_len)?;
            w.matmul(&x_valid)?
        } else {
            Tensor::constant(ArrayD::zeros(IxDyn(&[0, d])))
        };
        let padded = if l < l_max {
            let pad = Tensor::constant(ArrayD::zeros(IxDyn(&[l_max - l, d])));
            if l == 0 {
                pad
            } else {
                Tensor::concat(0, &[&seg, &pad])?
            }
        } else {
            seg
        };
        per_item.push(padded.reshape(&[1, l_max, d])?);
    }
    let refs: Vec<&Tensor> = per_item.iter().collect();
    let segments = Tensor::concat(0, &refs)?;
    Ok(SegmentBatch {
        segments,
        counts: plans.iter().map(|p| p.pieces.len()).collect(),
        firing_frames: plans.into_iter().map(|p| p.fires).collect(),
    })
}

/// Fire positions alone (no segment embeddings), for inspection output.
pub fn fire_positions(alpha: &[f64], beta: f64, tail: f64) -> Vec<usize> {
    plan_fires(alpha, beta, tail, false).fires
}

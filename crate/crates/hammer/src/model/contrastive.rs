//! Manipulation-aware contrastive learning: momentum feature queues, the
//! InfoNCE core, and the global (class-token) and local (patch/token) views.
//!
//! Anchors are always pristine samples; positives and negatives always come
//! from momentum branches or queues and are plain data on the tape, so no
//! gradient can reach them.

use ndarray::Array2;
use thiserror::Error;

use crate::autodiff::{Mat, Tape, TapeError, T};

#[derive(Debug, Error)]
pub enum QueueError {
    #[error("queue entries must be unit vectors, got norm {0}")]
    NotUnitNorm(f64),
    #[error("entry dimension {got} does not match queue dimension {want}")]
    DimMismatch { got: usize, want: usize },
}

/// Fixed-capacity FIFO of recent momentum projections, each flagged with
/// its source sample and whether that pair was manipulated.
#[derive(Clone, Debug)]
pub struct FeatureQueue {
    capacity: usize,
    dim: usize,
    entries: Vec<Vec<f64>>,
    source_ids: Vec<u64>,
    manipulated: Vec<bool>,
    cursor: usize,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> FeatureQueue {
        assert!(capacity > 0);
        FeatureQueue {
            capacity,
            dim,
            entries: Vec::new(),
            source_ids: Vec::new(),
            manipulated: Vec::new(),
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// FIFO insert; the oldest entry is overwritten once full.
    pub fn push(&mut self, v: &[f64], source_id: u64, manipulated: bool) -> Result<(), QueueError> {
        if v.len() != self.dim {
            return Err(QueueError::DimMismatch { got: v.len(), want: self.dim });
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(QueueError::NotUnitNorm(norm));
        }
        if self.entries.len() < self.capacity {
            self.entries.push(v.to_vec());
            self.source_ids.push(source_id);
            self.manipulated.push(manipulated);
        } else {
            self.entries[self.cursor] = v.to_vec();
            self.source_ids[self.cursor] = source_id;
            self.manipulated[self.cursor] = manipulated;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    pub fn flags(&self) -> impl Iterator<Item = (u64, bool)> + '_ {
        self.source_ids.iter().copied().zip(self.manipulated.iter().copied())
    }

    /// Negative matrix for one anchor: every live entry except those pushed
    /// from the anchor's own source (its positive). Manipulated-flagged
    /// entries are always included.
    pub fn negatives_excluding(&self, source_id: u64) -> Mat {
        let rows: Vec<&Vec<f64>> = self
            .entries
            .iter()
            .zip(&self.source_ids)
            .filter(|(_, &sid)| sid != source_id)
            .map(|(v, _)| v)
            .collect();
        let mut out = Array2::zeros((rows.len(), self.dim));
        for (r, v) in rows.iter().enumerate() {
            for (c, x) in v.iter().enumerate() {
                out[[r, c]] = *x;
            }
        }
        out
    }

    pub(crate) fn raw_parts(&self) -> (&[Vec<f64>], &[u64], &[bool], usize) {
        (&self.entries, &self.source_ids, &self.manipulated, self.cursor)
    }

    pub(crate) fn from_raw_parts(
        capacity: usize,
        dim: usize,
        entries: Vec<Vec<f64>>,
        source_ids: Vec<u64>,
        manipulated: Vec<bool>,
        cursor: usize,
    ) -> FeatureQueue {
        FeatureQueue { capacity, dim, entries, source_ids, manipulated, cursor }
    }
}

/// Mean InfoNCE loss of one anchor over a set of positives sharing one
/// negative pool. With `literal_denominator` the denominator sums only the
/// negatives, mirroring the loss as written rather than the standard form.
///
/// All rows of `positives` and `negatives` are data: gradients flow only
/// into `anchor` (and the temperature).
pub fn info_nce_set(
    tape: &mut Tape,
    anchor: T,
    positives: &Mat,
    negatives: &Mat,
    tau: T,
    literal_denominator: bool,
) -> Result<T, TapeError> {
    let tau_v = tape.scalar_value(tau);
    if tau_v <= 0.0 {
        return Err(TapeError::NonPositiveTemperature(tau_v));
    }
    let n_pos = positives.nrows();
    let n_neg = negatives.nrows();
    if n_pos == 0 {
        return Err(TapeError::Invalid("need at least one positive".to_string()));
    }
    if n_neg == 0 {
        return Err(TapeError::Invalid("need at least one negative".to_string()));
    }

    let pos_leaf = tape.leaf(positives.clone());
    let neg_leaf = tape.leaf(negatives.clone());
    let s_pos = tape.matmul_nt(pos_leaf, anchor); // P x 1
    let s_neg = tape.matmul_nt(anchor, neg_leaf); // 1 x K
    let s_pos_scaled = tape.div_by_scalar(s_pos, tau);
    let s_neg_scaled = tape.div_by_scalar(s_neg, tau);

    let loss = if literal_denominator {
        // mean_i [ lse(negs) - s_pos_i ]
        let lse_neg = tape.row_logsumexp(s_neg_scaled); // 1 x 1
        let mean_pos = tape.mean_all(s_pos_scaled);
        tape.sub(lse_neg, mean_pos)
    } else {
        // mean_i [ lse([s_pos_i, negs]) - s_pos_i ]
        let ones = tape.leaf(Mat::ones((n_pos, 1)));
        let neg_rows = tape.matmul(ones, s_neg_scaled); // P x K
        let scores = tape.concat_cols(s_pos_scaled, neg_rows); // P x (K+1)
        let lse = tape.row_logsumexp(scores); // P x 1
        let diffs = tape.sub(lse, s_pos_scaled);
        tape.mean_all(diffs)
    };
    Ok(loss)
}

/// Single-positive InfoNCE.
pub fn info_nce(
    tape: &mut Tape,
    anchor: T,
    positive: &[f64],
    negatives: &Mat,
    tau: T,
    literal_denominator: bool,
) -> Result<T, TapeError> {
    let pos = Array2::from_shape_vec((1, positive.len()), positive.to_vec()).expect("positive row");
    info_nce_set(tape, anchor, &pos, negatives, tau, literal_denominator)
}

/// Per-anchor inputs for the global view. Positives are the anchor's own
/// momentum projections; negatives are queue snapshots already excluding
/// the anchor's source id.
pub struct MacGlobalInputs<'a> {
    pub anchor_img: T,
    pub anchor_txt: T,
    pub own_momentum_img: &'a [f64],
    pub own_momentum_txt: &'a [f64],
    pub img_negatives: &'a Mat,
    pub txt_negatives: &'a Mat,
}

/// Quarter-weighted sum of the two cross-modal and two intra-modal terms
/// for one pristine anchor. None when either negative pool is empty (cold
/// queues); the caller counts a warning instead of failing.
pub fn mac_global_anchor(
    tape: &mut Tape,
    inp: &MacGlobalInputs,
    tau: T,
    literal_denominator: bool,
) -> Result<Option<T>, TapeError> {
    if inp.img_negatives.nrows() == 0 || inp.txt_negatives.nrows() == 0 {
        return Ok(None);
    }
    let v2t = info_nce(tape, inp.anchor_img, inp.own_momentum_txt, inp.txt_negatives, tau, literal_denominator)?;
    let t2v = info_nce(tape, inp.anchor_txt, inp.own_momentum_img, inp.img_negatives, tau, literal_denominator)?;
    let v2v = info_nce(tape, inp.anchor_img, inp.own_momentum_img, inp.img_negatives, tau, literal_denominator)?;
    let t2t = info_nce(tape, inp.anchor_txt, inp.own_momentum_txt, inp.txt_negatives, tau, literal_denominator)?;
    let a = tape.add(v2t, t2v);
    let b = tape.add(v2v, t2t);
    let sum = tape.add(a, b);
    Ok(Some(tape.scale(sum, 0.25)))
}

/// Per-anchor inputs for the local view: the anchor's class projections
/// against its own momentum token/patch projections, with in-batch
/// negatives pooled from the other samples.
pub struct MacLocalInputs<'a> {
    pub anchor_img: T,
    pub anchor_txt: T,
    /// Momentum projections of the anchor's real text tokens (M x p).
    pub own_momentum_tokens: &'a Mat,
    /// Momentum projections of the anchor's image patches (N x p).
    pub own_momentum_patches: &'a Mat,
    /// Other samples' momentum token projections pooled together.
    pub token_negatives: &'a Mat,
    /// Other samples' momentum patch projections pooled together.
    pub patch_negatives: &'a Mat,
}

/// Half-weighted sum of the token-positive and patch-positive sums, each
/// averaged over its positive count.
pub fn mac_local_anchor(
    tape: &mut Tape,
    inp: &MacLocalInputs,
    tau: T,
    literal_denominator: bool,
) -> Result<Option<T>, TapeError> {
    if inp.token_negatives.nrows() == 0 || inp.patch_negatives.nrows() == 0 {
        return Ok(None);
    }
    let text_side = info_nce_set(
        tape,
        inp.anchor_img,
        inp.own_momentum_tokens,
        inp.token_negatives,
        tau,
        literal_denominator,
    )?;
    let image_side = info_nce_set(
        tape,
        inp.anchor_txt,
        inp.own_momentum_patches,
        inp.patch_negatives,
        tau,
        literal_denominator,
    )?;
    let sum = tape.add(text_side, image_side);
    Ok(Some(tape.scale(sum, 0.5)))
}

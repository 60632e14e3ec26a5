//! Deep reasoning branch: the multi-modal aggregator (text queries
//! cross-attending image embeddings), the token detector with momentum soft
//! labels, and the multi-label / binary classification losses.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mat, ParamId, ParamStore, Tape, TapeError, T};

use super::blocks::{CrossAttentionBlock, LayerNorm, PredictionHead};
use super::encoder::EncodedSet;
use super::ModelConfig;

#[derive(Clone, Debug)]
pub struct Aggregator {
    pub blocks: Vec<CrossAttentionBlock>,
    pub final_ln: LayerNorm,
}

impl Aggregator {
    pub fn build(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Aggregator {
        let blocks = (0..cfg.agg_layers)
            .map(|i| {
                CrossAttentionBlock::build(
                    store,
                    rng,
                    &format!("agg.block{i}"),
                    cfg.dim,
                    cfg.n_heads,
                    cfg.dim * cfg.mlp_ratio,
                )
            })
            .collect();
        Aggregator { blocks, final_ln: LayerNorm::build(store, "agg.final_ln", cfg.dim) }
    }

    /// Text stream (class slot first) attends itself, then the image
    /// embeddings; outputs stay aligned with the text positions.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        text: &EncodedSet,
        text_valid_with_cls: &[bool],
        image: &EncodedSet,
    ) -> Result<EncodedSet, TapeError> {
        let img_valid = vec![true; image.n + 1];
        let mut x = text.all;
        for block in &self.blocks {
            x = block.forward(tape, store, x, text_valid_with_cls, image.all, &img_valid)?;
        }
        let all = self.final_ln.forward(tape, store, x);
        Ok(EncodedSet { all, n: text.n })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.blocks.iter().flat_map(|b| b.param_ids()).collect();
        ids.extend(self.final_ln.param_ids());
        ids
    }
}

/// The three detection heads reading the aggregated embeddings: per-token
/// real/fake logits, 4-way multi-label logits, 2-way binary logits.
#[derive(Clone, Debug)]
pub struct HeadStack {
    pub token: PredictionHead,
    pub multi_label: PredictionHead,
    pub binary: PredictionHead,
}

impl HeadStack {
    pub fn build(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> HeadStack {
        HeadStack {
            token: PredictionHead::build(store, rng, "head.token", cfg.dim, 2),
            multi_label: PredictionHead::build(store, rng, "head.multi", cfg.dim, 4),
            binary: PredictionHead::build(store, rng, "head.binary", cfg.dim, 2),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.token.param_ids();
        ids.extend(self.multi_label.param_ids());
        ids.extend(self.binary.param_ids());
        ids
    }
}

/// Per-token softmax cross-entropy against {0,1} labels, averaged over the
/// given (real, unpadded) tokens. `pos_weight` scales the contribution of
/// fake-labelled tokens; the mean is weight-normalized.
pub fn token_ce_loss(tape: &mut Tape, logits: T, labels: &[u8], pos_weight: f64) -> T {
    let m = labels.len();
    assert_eq!(tape.value(logits).nrows(), m, "logits/labels misaligned");
    let lse = tape.row_logsumexp(logits);
    let idx: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
    let picked = tape.gather_cols(logits, &idx);
    let per_token = tape.sub(lse, picked);
    let weights: Vec<f64> = labels.iter().map(|&y| if y == 1 { pos_weight } else { 1.0 }).collect();
    let total_w: f64 = weights.iter().sum();
    let w =
        tape.leaf(Mat::from_shape_vec((m, 1), weights).expect("weight shape"));
    let weighted = tape.mul(per_token, w);
    let sum = tape.sum_all(weighted);
    tape.scale(sum, 1.0 / total_w)
}

/// Mean per-token KL(online || momentum) between the two softmax
/// distributions; the momentum logits are plain data, never differentiated.
pub fn token_momentum_kl(tape: &mut Tape, online_logits: T, momentum_logits: &Mat) -> T {
    let m = tape.value(online_logits).nrows();
    assert_eq!(momentum_logits.nrows(), m);
    let lse = tape.row_logsumexp(online_logits);
    let logp = tape.sub_col(online_logits, lse);
    let p = tape.exp(logp);

    // constant log-probabilities of the momentum branch
    let mut logq = momentum_logits.clone();
    for mut row in logq.rows_mut() {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
        row.mapv_inplace(|v| v - lse);
    }
    let logq_t = tape.leaf(logq);
    let diff = tape.sub(logp, logq_t);
    let terms = tape.mul(p, diff);
    let per_token = tape.row_sum(terms);
    let sum = tape.sum_all(per_token);
    tape.scale(sum, 1.0 / m as f64)
}

/// Text manipulation grounding loss: (1-alpha) * token cross-entropy +
/// alpha * momentum KL.
pub fn tmg_loss(
    tape: &mut Tape,
    online_logits: T,
    momentum_logits: &Mat,
    labels: &[u8],
    alpha: f64,
    pos_weight: f64,
) -> Result<T, TapeError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TapeError::Invalid(format!("alpha {alpha} outside [0,1]")));
    }
    let ce = token_ce_loss(tape, online_logits, labels, pos_weight);
    let kl = token_momentum_kl(tape, online_logits, momentum_logits);
    let ce_part = tape.scale(ce, 1.0 - alpha);
    let kl_part = tape.scale(kl, alpha);
    Ok(tape.add(ce_part, kl_part))
}

/// Multi-label classification: mean over the four classes of per-class
/// sigmoid binary cross-entropy. `softplus(x) - x*y` is the stable form.
pub fn mlc_loss(tape: &mut Tape, logits: T, y_mul: &[u8; 4]) -> T {
    let sp = tape.softplus(logits);
    let y = tape.row(&[y_mul[0] as f64, y_mul[1] as f64, y_mul[2] as f64, y_mul[3] as f64]);
    let xy = tape.mul(logits, y);
    let bce = tape.sub(sp, xy);
    tape.mean_all(bce)
}

/// Binary classification: softmax cross-entropy over 2 logits.
pub fn bic_loss(tape: &mut Tape, logits: T, y_bin: u8) -> T {
    let lse = tape.row_logsumexp(logits);
    let picked = tape.gather_cols(logits, &[y_bin as usize]);
    let diff = tape.sub(lse, picked);
    tape.sum_all(diff)
}

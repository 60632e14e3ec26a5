//! Parameterized building blocks: linear maps, layer norm, multi-head
//! attention, and pre-norm transformer blocks. Each struct owns parameter
//! ids into a `ParamStore` and records its forward pass on a `Tape`.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Mat, ParamId, ParamStore, Tape, TapeError, T};

pub const LN_EPS: f64 = 1e-6;

pub(crate) fn init_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("std");
    Mat::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

pub(crate) fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Mat {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    init_normal(rng, fan_in, fan_out, std)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Linear {
        Linear {
            w: store.add(format!("{name}.w"), xavier(rng, d_in, d_out)),
            b: store.add(format!("{name}.b"), Mat::zeros((1, d_out))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: T) -> T {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn build(store: &mut ParamStore, name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Mat::ones((1, dim))),
            bias: store.add(format!("{name}.bias"), Mat::zeros((1, dim))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: T) -> T {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

/// Two-layer feed-forward with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
        out: usize,
    ) -> Mlp {
        Mlp {
            fc1: Linear::build(store, rng, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::build(store, rng, &format!("{name}.fc2"), hidden, out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: T) -> T {
        let h = self.fc1.forward(tape, store, x);
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.fc1.param_ids();
        ids.extend(self.fc2.param_ids());
        ids
    }
}

/// Multi-head scaled dot-product attention with projections. Heads are
/// column slices; each head attends with scale 1/sqrt(head_dim).
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        n_heads: usize,
    ) -> MultiHeadAttention {
        assert!(dim % n_heads == 0, "model dim must divide into heads");
        MultiHeadAttention {
            wq: Linear::build(store, rng, &format!("{name}.wq"), dim, dim),
            wk: Linear::build(store, rng, &format!("{name}.wk"), dim, dim),
            wv: Linear::build(store, rng, &format!("{name}.wv"), dim, dim),
            wo: Linear::build(store, rng, &format!("{name}.wo"), dim, dim),
            n_heads: n_heads,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: T,
        keys_values: T,
        key_valid: &[bool],
    ) -> Result<T, TapeError> {
        let q = self.wq.forward(tape, store, queries);
        let k = self.wk.forward(tape, store, keys_values);
        let v = self.wv.forward(tape, store, keys_values);
        let dim = tape.value(q).ncols();
        let head_dim = dim / self.n_heads;

        let mut merged: Option<T> = None;
        for h in 0..self.n_heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim);
            let kh = tape.slice_cols(k, h * head_dim, head_dim);
            let vh = tape.slice_cols(v, h * head_dim, head_dim);
            let oh = tape.attention(qh, kh, vh, key_valid)?;
            merged = Some(match merged {
                None => oh,
                Some(acc) => tape.concat_cols(acc, oh),
            });
        }
        Ok(self.wo.forward(tape, store, merged.expect("at least one head")))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.wq.param_ids();
        ids.extend(self.wk.param_ids());
        ids.extend(self.wv.param_ids());
        ids.extend(self.wo.param_ids());
        ids
    }
}

/// Pre-norm self-attention transformer block.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl SelfAttentionBlock {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        n_heads: usize,
        mlp_hidden: usize,
    ) -> SelfAttentionBlock {
        SelfAttentionBlock {
            ln1: LayerNorm::build(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::build(store, rng, &format!("{name}.attn"), dim, n_heads),
            ln2: LayerNorm::build(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::build(store, rng, &format!("{name}.mlp"), dim, mlp_hidden, dim),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: T,
        valid: &[bool],
    ) -> Result<T, TapeError> {
        let normed = self.ln1.forward(tape, store, x);
        let attended = self.attn.forward(tape, store, normed, normed, valid)?;
        let x = tape.add(x, attended);
        let normed = self.ln2.forward(tape, store, x);
        let ff = self.mlp.forward(tape, store, normed);
        Ok(tape.add(x, ff))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.ln1.param_ids();
        ids.extend(self.attn.param_ids());
        ids.extend(self.ln2.param_ids());
        ids.extend(self.mlp.param_ids());
        ids
    }
}

/// Aggregator layer: self-attention over the query stream, then
/// cross-attention into the other modality, then feed-forward; pre-norm
/// residuals throughout.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl CrossAttentionBlock {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        n_heads: usize,
        mlp_hidden: usize,
    ) -> CrossAttentionBlock {
        CrossAttentionBlock {
            ln_self: LayerNorm::build(store, &format!("{name}.ln_self"), dim),
            self_attn: MultiHeadAttention::build(
                store,
                rng,
                &format!("{name}.self_attn"),
                dim,
                n_heads,
            ),
            ln_cross: LayerNorm::build(store, &format!("{name}.ln_cross"), dim),
            cross_attn: MultiHeadAttention::build(
                store,
                rng,
                &format!("{name}.cross_attn"),
                dim,
                n_heads,
            ),
            ln_mlp: LayerNorm::build(store, &format!("{name}.ln_mlp"), dim),
            mlp: Mlp::build(store, rng, &format!("{name}.mlp"), dim, mlp_hidden, dim),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: T,
        self_valid: &[bool],
        context: T,
        context_valid: &[bool],
    ) -> Result<T, TapeError> {
        let normed = self.ln_self.forward(tape, store, x);
        let attended = self.self_attn.forward(tape, store, normed, normed, self_valid)?;
        let x = tape.add(x, attended);
        let normed = self.ln_cross.forward(tape, store, x);
        let crossed = self.cross_attn.forward(tape, store, normed, context, context_valid)?;
        let x = tape.add(x, crossed);
        let normed = self.ln_mlp.forward(tape, store, x);
        let ff = self.mlp.forward(tape, store, normed);
        Ok(tape.add(x, ff))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.ln_self.param_ids();
        ids.extend(self.self_attn.param_ids());
        ids.extend(self.ln_cross.param_ids());
        ids.extend(self.cross_attn.param_ids());
        ids.extend(self.ln_mlp.param_ids());
        ids
    }
}

/// Two-layer prediction head (hidden GELU), per the head layout used by all
/// four detectors.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub mlp: Mlp,
}

impl PredictionHead {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        out: usize,
    ) -> PredictionHead {
        PredictionHead { mlp: Mlp::build(store, rng, name, dim, dim, out) }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: T) -> T {
        self.mlp.forward(tape, store, x)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.mlp.param_ids()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn mha_output_shape_matches_queries() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mha = MultiHeadAttention::build(&mut store, &mut rng, "t", 8, 2);
        let mut tape = Tape::new();
        let q = tape.leaf(Mat::from_shape_fn((5, 8), |(r, c)| (r as f64 - c as f64) * 0.1));
        let kv = tape.leaf(Mat::from_shape_fn((3, 8), |(r, c)| (r + c) as f64 * 0.05));
        let out = mha.forward(&mut tape, &store, q, kv, &[true, true, true]).unwrap();
        assert_eq!(tape.value(out).dim(), (5, 8));
    }

    #[test]
    fn masked_kv_position_does_not_affect_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mha = MultiHeadAttention::build(&mut store, &mut rng, "t", 8, 2);
        let base = Mat::from_shape_fn((4, 8), |(r, c)| (r * c) as f64 * 0.07 - 0.3);
        let mut altered = base.clone();
        for c in 0..8 {
            altered[[2, c]] = 99.0; // masked row gets garbage
        }
        let valid = [true, true, false, true];

        let run = |kv: Mat| {
            let mut tape = Tape::new();
            let q = tape.leaf(Mat::from_shape_fn((2, 8), |(r, c)| (r + c) as f64 * 0.02));
            let kvt = tape.leaf(kv);
            let out = mha.forward(&mut tape, &store, q, kvt, &valid).unwrap();
            tape.value(out).clone()
        };
        assert_eq!(run(base), run(altered));
    }

    #[test]
    fn self_attention_block_preserves_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = SelfAttentionBlock::build(&mut store, &mut rng, "b", 8, 2, 16);
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::from_shape_fn((6, 8), |(r, c)| (r as f64) * 0.1 - (c as f64) * 0.05));
        let out = block.forward(&mut tape, &store, x, &[true; 6]).unwrap();
        assert_eq!(tape.value(out).dim(), (6, 8));
    }
}

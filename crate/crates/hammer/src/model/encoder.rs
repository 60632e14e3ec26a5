//! Uni-modal encoders and projection heads. The image encoder patchifies
//! and runs a small ViT; the text encoder embeds token ids with padding
//! masked out of attention. Both prepend a learned class token.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mat, ParamId, ParamStore, Tape, TapeError, T};
use crate::types::Image;

use super::blocks::{init_normal, LayerNorm, Linear, SelfAttentionBlock};
use super::ModelConfig;

/// Tape handles for one encoded modality: class embedding plus the
/// patch/token embeddings, all rows of `all`.
#[derive(Clone, Copy, Debug)]
pub struct EncodedSet {
    /// (1 + n) x dim; row 0 is the class embedding.
    pub all: T,
    /// Patch count (image) or padded token capacity (text).
    pub n: usize,
}

impl EncodedSet {
    pub fn cls(&self, tape: &mut Tape) -> T {
        tape.slice_rows(self.all, 0, 1)
    }

    pub fn tokens(&self, tape: &mut Tape) -> T {
        tape.slice_rows(self.all, 1, self.n)
    }

    /// First `m` non-class rows (the real text tokens).
    pub fn real_tokens(&self, tape: &mut Tape, m: usize) -> T {
        tape.slice_rows(self.all, 1, m)
    }
}

/// Raster-order patch matrix: one row per patch, channels innermost,
/// mapped to [-1, 1].
pub fn patchify(image: &Image, patch: usize) -> Mat {
    assert!(image.height == image.width, "square images only");
    assert!(image.height % patch == 0, "image size must be divisible by patch size");
    let grid = image.height / patch;
    let n = grid * grid;
    let pd = patch * patch * Image::CHANNELS;
    let mut out = Mat::zeros((n, pd));
    for gy in 0..grid {
        for gx in 0..grid {
            let row = gy * grid + gx;
            let mut col = 0;
            for py in 0..patch {
                for px in 0..patch {
                    let p = image.pixel(gy * patch + py, gx * patch + px);
                    for ch in 0..Image::CHANNELS {
                        out[[row, col]] = p[ch] * 2.0 - 1.0;
                        col += 1;
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<SelfAttentionBlock>,
    pub final_ln: LayerNorm,
    pub n_patches: usize,
}

impl ImageEncoder {
    pub fn build(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> ImageEncoder {
        let grid = cfg.image_size / cfg.patch;
        let n_patches = grid * grid;
        let patch_dim = cfg.patch * cfg.patch * Image::CHANNELS;
        let blocks = (0..cfg.enc_layers)
            .map(|i| {
                SelfAttentionBlock::build(
                    store,
                    rng,
                    &format!("img_enc.block{i}"),
                    cfg.dim,
                    cfg.n_heads,
                    cfg.dim * cfg.mlp_ratio,
                )
            })
            .collect();
        ImageEncoder {
            patch_embed: Linear::build(store, rng, "img_enc.patch_embed", patch_dim, cfg.dim),
            cls_token: store.add("img_enc.cls", init_normal(rng, 1, cfg.dim, 0.02)),
            pos_embed: store.add(
                "img_enc.pos",
                init_normal(rng, n_patches + 1, cfg.dim, 0.02),
            ),
            blocks,
            final_ln: LayerNorm::build(store, "img_enc.final_ln", cfg.dim),
            n_patches,
        }
    }

    /// `use_pos: false` drops positional information (diagnostics only).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        patches: &Mat,
        use_pos: bool,
    ) -> Result<EncodedSet, TapeError> {
        assert_eq!(patches.nrows(), self.n_patches, "patch count mismatch");
        let x = tape.leaf(patches.clone());
        let x = self.patch_embed.forward(tape, store, x);
        let cls = tape.param(store, self.cls_token);
        let mut all = tape.concat_rows(cls, x);
        if use_pos {
            let pos = tape.param(store, self.pos_embed);
            all = tape.add(all, pos);
        }
        let valid = vec![true; self.n_patches + 1];
        for block in &self.blocks {
            all = block.forward(tape, store, all, &valid)?;
        }
        let all = self.final_ln.forward(tape, store, all);
        Ok(EncodedSet { all, n: self.n_patches })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.patch_embed.param_ids();
        ids.push(self.cls_token);
        ids.push(self.pos_embed);
        for b in &self.blocks {
            ids.extend(b.param_ids());
        }
        ids.extend(self.final_ln.param_ids());
        ids
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<SelfAttentionBlock>,
    pub final_ln: LayerNorm,
    pub m_max: usize,
}

impl TextEncoder {
    pub fn build(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> TextEncoder {
        let blocks = (0..cfg.enc_layers)
            .map(|i| {
                SelfAttentionBlock::build(
                    store,
                    rng,
                    &format!("txt_enc.block{i}"),
                    cfg.dim,
                    cfg.n_heads,
                    cfg.dim * cfg.mlp_ratio,
                )
            })
            .collect();
        TextEncoder {
            embed: store.add("txt_enc.embed", init_normal(rng, cfg.vocab_size, cfg.dim, 0.02)),
            cls_token: store.add("txt_enc.cls", init_normal(rng, 1, cfg.dim, 0.02)),
            pos_embed: store.add("txt_enc.pos", init_normal(rng, cfg.m_max + 1, cfg.dim, 0.02)),
            blocks,
            final_ln: LayerNorm::build(store, "txt_enc.final_ln", cfg.dim),
            m_max: cfg.m_max,
        }
    }

    /// `ids` must already be padded to m_max; `valid[i]` marks real tokens.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[usize],
        valid: &[bool],
    ) -> Result<EncodedSet, TapeError> {
        assert_eq!(ids.len(), self.m_max, "ids must be padded to m_max");
        assert_eq!(valid.len(), self.m_max);
        let table = tape.param(store, self.embed);
        let x = tape.gather_rows(table, ids)?;
        let cls = tape.param(store, self.cls_token);
        let mut all = tape.concat_rows(cls, x);
        let pos = tape.param(store, self.pos_embed);
        all = tape.add(all, pos);
        let mut key_valid = vec![true];
        key_valid.extend_from_slice(valid);
        for block in &self.blocks {
            all = block.forward(tape, store, all, &key_valid)?;
        }
        let all = self.final_ln.forward(tape, store, all);
        Ok(EncodedSet { all, n: self.m_max })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed, self.cls_token, self.pos_embed];
        for b in &self.blocks {
            ids.extend(b.param_ids());
        }
        ids.extend(self.final_ln.param_ids());
        ids
    }
}

/// Linear (or small MLP) map into the shared contrastive space, followed by
/// L2 normalization: outputs are always unit vectors.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub layers: Vec<Linear>,
}

impl ProjectionHead {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ModelConfig,
    ) -> ProjectionHead {
        let mut layers = Vec::new();
        if cfg.proj_depth <= 1 {
            layers.push(Linear::build(store, rng, &format!("{name}.fc0"), cfg.dim, cfg.proj_dim));
        } else {
            layers.push(Linear::build(store, rng, &format!("{name}.fc0"), cfg.dim, cfg.dim));
            layers.push(Linear::build(store, rng, &format!("{name}.fc1"), cfg.dim, cfg.proj_dim));
        }
        ProjectionHead { layers }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: T) -> Result<T, TapeError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.gelu(h);
            }
            h = layer.forward(tape, store, h);
        }
        tape.l2_normalize_rows(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.param_ids()).collect()
    }
}

/// Pad token ids to m_max and build the validity mask.
pub fn pad_tokens(tokens: &[usize], m_max: usize, pad_id: usize) -> (Vec<usize>, Vec<bool>) {
    assert!(tokens.len() <= m_max, "text longer than m_max");
    let mut ids = tokens.to_vec();
    let mut valid = vec![true; tokens.len()];
    ids.resize(m_max, pad_id);
    valid.resize(m_max, false);
    (ids, valid)
}

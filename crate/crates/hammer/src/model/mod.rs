//! The detection-and-grounding model: dual encoders with projection heads,
//! momentum twins and feature queues, the shallow grounding branch, and the
//! deep aggregation branch with its three classifier heads.

pub mod blocks;
pub mod contrastive;
pub mod deep;
pub mod encoder;
pub mod grounding;

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{GradStore, Mat, ParamId, ParamStore, Tape, TapeError, T};
use crate::types::{BBox, MediaPair, Prediction};

use contrastive::FeatureQueue;
use deep::{Aggregator, HeadStack};
use encoder::{pad_tokens, patchify, EncodedSet, ImageEncoder, ProjectionHead, TextEncoder};
use grounding::{cxcywh_to_corners, GroundingBranch};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("text has {len} tokens, model capacity is {max}")]
    TextTooLong { len: usize, max: usize },
    #[error("image is {got}px, model expects {want}px")]
    ImageSizeMismatch { got: usize, want: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Desk-scale architecture knobs. The defaults follow the reference layout
/// shrunk uniformly: width 64, two layers per stack, four heads, patch 8.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_heads: usize,
    pub patch: usize,
    pub image_size: usize,
    pub enc_layers: usize,
    pub agg_layers: usize,
    pub m_max: usize,
    pub proj_dim: usize,
    /// 1 = linear projection head, 2 = one hidden layer.
    pub proj_depth: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub queue_capacity: usize,
    pub tau_init: f64,
    /// Keep the InfoNCE denominator restricted to negatives, as the loss is
    /// written, instead of the standard positive-included form.
    pub literal_denominator: bool,
    /// Restrict the bbox loss to image-manipulated samples.
    pub img_loss_manipulated_only: bool,
    /// Weight of fake-labelled tokens in the token cross-entropy.
    pub token_pos_weight: f64,
    /// Predicted boxes with area below this snap to the zero box.
    pub box_snap_area: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            n_heads: 4,
            patch: 8,
            image_size: 64,
            enc_layers: 2,
            agg_layers: 2,
            m_max: 16,
            proj_dim: 64,
            proj_depth: 1,
            mlp_ratio: 4,
            vocab_size: 128,
            queue_capacity: 1024,
            tau_init: 0.07,
            literal_denominator: false,
            img_loss_manipulated_only: false,
            token_pos_weight: 1.0,
            box_snap_area: 1e-3,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        let g = self.image_size / self.patch;
        g * g
    }
}

/// Parameter layout of the full model over one `ParamStore`. Building with
/// the same config always produces the same ids and names.
#[derive(Clone, Debug)]
pub struct Model {
    pub image_encoder: ImageEncoder,
    pub text_encoder: TextEncoder,
    pub img_proj: ProjectionHead,
    pub txt_proj: ProjectionHead,
    pub grounding: GroundingBranch,
    pub aggregator: Aggregator,
    pub heads: HeadStack,
    pub temperature: ParamId,
}

impl Model {
    pub fn build(cfg: &ModelConfig, store: &mut ParamStore) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let image_encoder = ImageEncoder::build(store, &mut rng, cfg);
        let text_encoder = TextEncoder::build(store, &mut rng, cfg);
        let img_proj = ProjectionHead::build(store, &mut rng, "proj_img", cfg);
        let txt_proj = ProjectionHead::build(store, &mut rng, "proj_txt", cfg);
        let grounding = GroundingBranch::build(store, &mut rng, cfg);
        let aggregator = Aggregator::build(store, &mut rng, cfg);
        let heads = HeadStack::build(store, &mut rng, cfg);
        let temperature = store.add("temperature", Mat::from_elem((1, 1), cfg.tau_init));
        Model {
            image_encoder,
            text_encoder,
            img_proj,
            txt_proj,
            grounding,
            aggregator,
            heads,
            temperature,
        }
    }

    /// Parameters with momentum twins: the two encoders, the two projection
    /// heads, the aggregator, and the token detector.
    pub fn momentum_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.image_encoder.param_ids();
        ids.extend(self.text_encoder.param_ids());
        ids.extend(self.img_proj.param_ids());
        ids.extend(self.txt_proj.param_ids());
        ids.extend(self.aggregator.param_ids());
        ids.extend(self.heads.token.param_ids());
        ids
    }
}

/// Preprocessed model inputs for one pair.
#[derive(Clone, Debug)]
pub struct SampleInput {
    pub id_hash: u64,
    pub patches: Mat,
    pub padded_ids: Vec<usize>,
    /// True at real token positions; length m_max (class slot excluded).
    pub token_valid: Vec<bool>,
    pub n_tokens: usize,
    pub y_bin: u8,
    pub y_mul: [u8; 4],
    pub y_box: BBox,
    pub y_tok: Vec<u8>,
}

impl SampleInput {
    pub fn from_pair(pair: &MediaPair, cfg: &ModelConfig) -> Result<SampleInput, ModelError> {
        if pair.tokens.len() > cfg.m_max {
            return Err(ModelError::TextTooLong { len: pair.tokens.len(), max: cfg.m_max });
        }
        if pair.image.height != cfg.image_size || pair.image.width != cfg.image_size {
            return Err(ModelError::ImageSizeMismatch {
                got: pair.image.height,
                want: cfg.image_size,
            });
        }
        let (padded_ids, token_valid) = pad_tokens(&pair.tokens, cfg.m_max, 0);
        Ok(SampleInput {
            id_hash: id_hash(&pair.id),
            patches: patchify(&pair.image, cfg.patch),
            padded_ids,
            token_valid,
            n_tokens: pair.tokens.len(),
            y_bin: pair.y_bin,
            y_mul: pair.y_mul,
            y_box: pair.y_box,
            y_tok: pair.y_tok.clone(),
        })
    }

    pub fn valid_with_cls(&self) -> Vec<bool> {
        let mut v = vec![true];
        v.extend_from_slice(&self.token_valid);
        v
    }
}

/// FNV-1a; stable across runs and platforms.
pub fn id_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Everything the contrastive and distillation losses need from the
/// momentum branch for one sample; plain data, never differentiated.
#[derive(Clone, Debug)]
pub struct MomentumViews {
    pub img_cls_proj: Vec<f64>,
    pub txt_cls_proj: Vec<f64>,
    /// N x proj_dim unit rows.
    pub patch_projs: Mat,
    /// n_tokens x proj_dim unit rows.
    pub token_projs: Mat,
    /// n_tokens x 2 logits from the momentum aggregator + token detector.
    pub token_logits: Mat,
}

pub fn momentum_views(
    model: &Model,
    momentum: &ParamStore,
    input: &SampleInput,
) -> Result<MomentumViews, ModelError> {
    let mut tape = Tape::no_grad();
    let img = model.image_encoder.forward(&mut tape, momentum, &input.patches, true)?;
    let txt = model
        .text_encoder
        .forward(&mut tape, momentum, &input.padded_ids, &input.token_valid)?;

    let img_cls = img.cls(&mut tape);
    let txt_cls = txt.cls(&mut tape);
    let img_cls_proj = model.img_proj.forward(&mut tape, momentum, img_cls)?;
    let txt_cls_proj = model.txt_proj.forward(&mut tape, momentum, txt_cls)?;
    let patches = img.tokens(&mut tape);
    let patch_projs = model.img_proj.forward(&mut tape, momentum, patches)?;
    let tokens = txt.real_tokens(&mut tape, input.n_tokens);
    let token_projs = model.txt_proj.forward(&mut tape, momentum, tokens)?;

    let valid_with_cls = input.valid_with_cls();
    let agg = model.aggregator.forward(&mut tape, momentum, &txt, &valid_with_cls, &img)?;
    let agg_tokens = agg.real_tokens(&mut tape, input.n_tokens);
    let token_logits = model.heads.token.forward(&mut tape, momentum, agg_tokens);

    Ok(MomentumViews {
        img_cls_proj: tape.value(img_cls_proj).row(0).to_vec(),
        txt_cls_proj: tape.value(txt_cls_proj).row(0).to_vec(),
        patch_projs: tape.value(patch_projs).clone(),
        token_projs: tape.value(token_projs).clone(),
        token_logits: tape.value(token_logits).clone(),
    })
}

/// Tape handles produced by the online forward pass of one sample.
pub struct OnlineForward {
    pub img_set: EncodedSet,
    pub txt_set: EncodedSet,
    pub img_cls_proj: T,
    pub txt_cls_proj: T,
    /// Sigmoid (cx, cy, w, h).
    pub bbox_pred: T,
    /// Clamped corner form.
    pub bbox_corners: T,
    /// n_tokens x 2.
    pub token_logits: T,
    pub mul_logits: T,
    pub bin_logits: T,
}

pub fn forward_online(
    model: &Model,
    store: &ParamStore,
    tape: &mut Tape,
    input: &SampleInput,
) -> Result<OnlineForward, ModelError> {
    let img = model.image_encoder.forward(tape, store, &input.patches, true)?;
    let txt = model.text_encoder.forward(tape, store, &input.padded_ids, &input.token_valid)?;

    let img_cls = img.cls(tape);
    let txt_cls = txt.cls(tape);
    let img_cls_proj = model.img_proj.forward(tape, store, img_cls)?;
    let txt_cls_proj = model.txt_proj.forward(tape, store, txt_cls)?;

    let valid_with_cls = input.valid_with_cls();
    let attended = model.grounding.cross_attend_visual(tape, store, &img, &txt, &valid_with_cls)?;
    let pooled = model.grounding.aggregate_patches(tape, store, &attended)?;
    let bbox_pred = model.grounding.predict_bbox(tape, store, pooled);
    let bbox_corners = cxcywh_to_corners(tape, bbox_pred);

    let agg = model.aggregator.forward(tape, store, &txt, &valid_with_cls, &img)?;
    let agg_cls = agg.cls(tape);
    let agg_tokens = agg.real_tokens(tape, input.n_tokens);
    let token_logits = model.heads.token.forward(tape, store, agg_tokens);
    let mul_logits = model.heads.multi_label.forward(tape, store, agg_cls);
    let bin_logits = model.heads.binary.forward(tape, store, agg_cls);

    Ok(OnlineForward {
        img_set: img,
        txt_set: txt,
        img_cls_proj,
        txt_cls_proj,
        bbox_pred,
        bbox_corners,
        token_logits,
        mul_logits,
        bin_logits,
    })
}

/// Full mutable training state: online parameters, momentum twin, queues,
/// and optimizer moments.
#[derive(Clone)]
pub struct ModelState {
    pub cfg: ModelConfig,
    pub model: Model,
    pub online: ParamStore,
    pub momentum: ParamStore,
    pub img_queue: FeatureQueue,
    pub txt_queue: FeatureQueue,
    pub opt_m: GradStore,
    pub opt_v: GradStore,
    pub step: usize,
    /// Batches that produced no contrastive anchors or had cold queues.
    pub mac_warnings: u64,
}

impl ModelState {
    pub fn init(cfg: ModelConfig) -> ModelState {
        let mut online = ParamStore::new();
        let model = Model::build(&cfg, &mut online);
        let momentum = online.clone();
        let opt_m = GradStore::zeros_like(&online);
        let opt_v = GradStore::zeros_like(&online);
        let img_queue = FeatureQueue::new(cfg.queue_capacity, cfg.proj_dim);
        let txt_queue = FeatureQueue::new(cfg.queue_capacity, cfg.proj_dim);
        ModelState {
            cfg,
            model,
            online,
            momentum,
            img_queue,
            txt_queue,
            opt_m,
            opt_v,
            step: 0,
            mac_warnings: 0,
        }
    }

    /// EMA every momentum twin toward its online counterpart.
    pub fn momentum_sync(&mut self, m: f64) -> Result<(), String> {
        if !(0.0..=1.0).contains(&m) {
            return Err(format!("momentum coefficient {m} outside [0,1]"));
        }
        for id in self.model.momentum_param_ids() {
            let src = self.online.get(id);
            let dst = self.momentum.get_mut(id);
            if src.shape() != dst.shape() {
                return Err("shape drift between momentum twin and online".to_string());
            }
            ndarray::Zip::from(dst).and(src).for_each(|t, &s| {
                *t = m * *t + (1.0 - m) * s;
            });
        }
        Ok(())
    }

    pub fn clamp_temperature(&mut self) {
        let t = self.online.get_mut(self.model.temperature);
        t[[0, 0]] = t[[0, 0]].clamp(0.01, 0.5);
    }
}

/// Snap near-degenerate boxes to the canonical zero box.
pub fn snap_box(corners: [f64; 4], snap_area: f64) -> BBox {
    let b = BBox::new(corners[0], corners[1], corners[2], corners[3]);
    if b.area() < snap_area {
        BBox::ZERO
    } else {
        b
    }
}

/// Run the online model on one pair and package probabilities.
pub fn infer(model: &Model, store: &ParamStore, cfg: &ModelConfig, pair: &MediaPair) -> Result<Prediction, ModelError> {
    let input = SampleInput::from_pair(pair, cfg)?;
    let mut tape = Tape::no_grad();
    let fwd = forward_online(model, store, &mut tape, &input)?;

    let bin = tape.value(fwd.bin_logits).clone();
    let p_bin = softmax2(bin[[0, 0]], bin[[0, 1]]);

    let mul = tape.value(fwd.mul_logits).clone();
    let p_mul = [
        sigmoid(mul[[0, 0]]),
        sigmoid(mul[[0, 1]]),
        sigmoid(mul[[0, 2]]),
        sigmoid(mul[[0, 3]]),
    ];

    let c = tape.value(fwd.bbox_corners).clone();
    let pred_box = snap_box([c[[0, 0]], c[[0, 1]], c[[0, 2]], c[[0, 3]]], cfg.box_snap_area);

    let tok = tape.value(fwd.token_logits).clone();
    let p_tok = (0..input.n_tokens).map(|i| softmax2(tok[[i, 0]], tok[[i, 1]])).collect();

    Ok(Prediction { p_bin, p_mul, pred_box, p_tok })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probability of class 1 under a 2-way softmax.
fn softmax2(l0: f64, l1: f64) -> f64 {
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    e1 / (e0 + e1)
}

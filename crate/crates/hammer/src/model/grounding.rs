//! Shallow grounding branch: text-conditioned visual cross-attention, the
//! learned aggregation token that pools patch embeddings, the bbox head,
//! and the image manipulation grounding loss (L1 + generalized IoU).

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mat, ParamId, ParamStore, Tape, TapeError, T};
use crate::types::BBox;

use super::blocks::{init_normal, MultiHeadAttention, PredictionHead};
use super::encoder::EncodedSet;
use super::ModelConfig;

#[derive(Clone, Debug)]
pub struct GroundingBranch {
    /// Cross-attention with image as queries, text as keys/values.
    pub visual_cross: MultiHeadAttention,
    /// Learned query token that pools the attended patches.
    pub agg_token: ParamId,
    pub agg_attn: MultiHeadAttention,
    /// Two-layer head emitting (cx, cy, w, h) logits.
    pub bbox_head: PredictionHead,
}

impl GroundingBranch {
    pub fn build(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> GroundingBranch {
        GroundingBranch {
            visual_cross: MultiHeadAttention::build(
                store,
                rng,
                "ground.visual_cross",
                cfg.dim,
                cfg.n_heads,
            ),
            agg_token: store.add("ground.agg_token", init_normal(rng, 1, cfg.dim, 0.02)),
            agg_attn: MultiHeadAttention::build(store, rng, "ground.agg_attn", cfg.dim, cfg.n_heads),
            bbox_head: PredictionHead::build(store, rng, "ground.bbox_head", cfg.dim, 4),
        }
    }

    /// Attend every image embedding over the text embeddings and add the
    /// residual; shape is preserved, row 0 stays the (unused) class slot.
    pub fn cross_attend_visual(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: &EncodedSet,
        text: &EncodedSet,
        text_valid_with_cls: &[bool],
    ) -> Result<EncodedSet, TapeError> {
        let attended =
            self.visual_cross
                .forward(tape, store, image.all, text.all, text_valid_with_cls)?;
        let all = tape.add(attended, image.all);
        Ok(EncodedSet { all, n: image.n })
    }

    /// Pool the attended patches (class slot excluded) with the learned
    /// aggregation token; single cross-attention, no residual.
    pub fn aggregate_patches(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        attended: &EncodedSet,
    ) -> Result<T, TapeError> {
        let patches = attended.tokens(tape);
        let n = attended.n;
        let agg = tape.param(store, self.agg_token);
        self.agg_attn.forward(tape, store, agg, patches, &vec![true; n])
    }

    /// Sigmoid-squashed (cx, cy, w, h) in (0,1)^4.
    pub fn predict_bbox(&self, tape: &mut Tape, store: &ParamStore, pooled: T) -> T {
        let logits = self.bbox_head.forward(tape, store, pooled);
        tape.sigmoid(logits)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.visual_cross.param_ids();
        ids.push(self.agg_token);
        ids.extend(self.agg_attn.param_ids());
        ids.extend(self.bbox_head.param_ids());
        ids
    }
}

/// Corner form of a (cx, cy, w, h) prediction, clamped to [0,1]. Clamping is
/// monotone, so x1 <= x2 and y1 <= y2 always hold.
pub fn cxcywh_to_corners(tape: &mut Tape, pred: T) -> T {
    let cx = tape.slice_cols(pred, 0, 1);
    let cy = tape.slice_cols(pred, 1, 1);
    let w = tape.slice_cols(pred, 2, 1);
    let h = tape.slice_cols(pred, 3, 1);
    let half_w = tape.scale(w, 0.5);
    let half_h = tape.scale(h, 0.5);
    let x1 = tape.sub(cx, half_w);
    let y1 = tape.sub(cy, half_h);
    let x2 = tape.add(cx, half_w);
    let y2 = tape.add(cy, half_h);
    let xy1 = tape.concat_cols(x1, y1);
    let xy2 = tape.concat_cols(x2, y2);
    let corners = tape.concat_cols(xy1, xy2);
    tape.clamp01(corners)
}

/// Differentiable generalized IoU between predicted corners (1x4 tensor)
/// and a constant ground-truth box. Degenerate ground truth follows the
/// point-box limit: zero IoU term, enclosure над the degenerate hull.
pub fn giou(tape: &mut Tape, pred_corners: T, gt: &BBox) -> T {
    let g = [gt.x1, gt.y1, gt.x2, gt.y2];
    let gx1 = Mat::from_elem((1, 1), g[0]);
    let gy1 = Mat::from_elem((1, 1), g[1]);
    let gx2 = Mat::from_elem((1, 1), g[2]);
    let gy2 = Mat::from_elem((1, 1), g[3]);

    let px1 = tape.slice_cols(pred_corners, 0, 1);
    let py1 = tape.slice_cols(pred_corners, 1, 1);
    let px2 = tape.slice_cols(pred_corners, 2, 1);
    let py2 = tape.slice_cols(pred_corners, 3, 1);

    // intersection
    let ix1 = tape.max_const(px1, &gx1);
    let iy1 = tape.max_const(py1, &gy1);
    let ix2 = tape.min_const(px2, &gx2);
    let iy2 = tape.min_const(py2, &gy2);
    let iw = tape.sub(ix2, ix1);
    let iw = tape.relu(iw);
    let ih = tape.sub(iy2, iy1);
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih);

    // areas and union
    let pw = tape.sub(px2, px1);
    let ph = tape.sub(py2, py1);
    let pred_area = tape.mul(pw, ph);
    let gt_area = tape.scalar((g[2] - g[0]) * (g[3] - g[1]));
    let sum_areas = tape.add(pred_area, gt_area);
    let union = tape.sub(sum_areas, inter);

    // enclosing hull
    let hx1 = tape.min_const(px1, &gx1);
    let hy1 = tape.min_const(py1, &gy1);
    let hx2 = tape.max_const(px2, &gx2);
    let hy2 = tape.max_const(py2, &gy2);
    let hw = tape.sub(hx2, hx1);
    let hh = tape.sub(hy2, hy1);
    let hull = tape.mul(hw, hh);

    let iou = tape.div(inter, union);
    let excess = tape.sub(hull, union);
    let penalty = tape.div(excess, hull);
    tape.sub(iou, penalty)
}

/// L_IMG for one sample: mean absolute corner error plus (1 - GIoU).
pub fn img_loss(tape: &mut Tape, pred_corners: T, gt: &BBox) -> T {
    let gt_row = tape.row(&[gt.x1, gt.y1, gt.x2, gt.y2]);
    let diff = tape.sub(pred_corners, gt_row);
    let abs = tape.abs(diff);
    let l1 = tape.mean_all(abs);
    let g = giou(tape, pred_corners, gt);
    let neg_g = tape.scale(g, -1.0);
    let one_minus = tape.add_scalar(neg_g, 1.0);
    let total = tape.add(l1, one_minus);
    tape.slice_cols(total, 0, 1)
}

/// Non-differentiable GIoU on plain boxes (metrics path); kept consistent
/// with the tape version, including the degenerate conventions.
pub fn giou_boxes(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let hull = (a.x2.max(b.x2) - a.x1.min(b.x1)).max(0.0) * (a.y2.max(b.y2) - a.y1.min(b.y1)).max(0.0);
    if a.is_degenerate() && b.is_degenerate() {
        // same point box -> perfect; otherwise pure hull penalty
        if a == b {
            return 1.0;
        }
        return if hull > 0.0 { -1.0 } else { 0.0 };
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let penalty = if hull > 0.0 { (hull - union) / hull } else { 0.0 };
    iou - penalty
}

pub fn iou_boxes(a: &BBox, b: &BBox) -> f64 {
    if a.is_degenerate() && b.is_degenerate() {
        return 1.0;
    }
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::{tiny_config, tiny_encoded};
    use rand::SeedableRng;

    #[test]
    fn zeroed_value_projection_gives_residual_identity() {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let branch = GroundingBranch::build(&mut store, &mut rng, &cfg);
        store.get_mut(branch.visual_cross.wv.w).fill(0.0);
        store.get_mut(branch.visual_cross.wv.b).fill(0.0);
        store.get_mut(branch.visual_cross.wo.b).fill(0.0);

        let mut tape = Tape::new();
        let (img, txt, txt_valid) = tiny_encoded(&mut tape, &cfg, 11);
        let out = branch
            .cross_attend_visual(&mut tape, &store, &img, &txt, &txt_valid)
            .unwrap();
        let img_v = tape.value(img.all).clone();
        let out_v = tape.value(out.all).clone();
        assert_eq!(out_v.dim().0, img.n + 1, "length N+1 including the class slot");
        for (a, b) in out_v.iter().zip(img_v.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn changing_padded_text_leaves_attended_set_unchanged() {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let branch = GroundingBranch::build(&mut store, &mut rng, &cfg);

        let run = |pad_fill: f64| {
            let mut tape = Tape::new();
            let (img, txt, txt_valid) = tiny_encoded(&mut tape, &cfg, 22);
            // overwrite one padded row of the text embedding matrix
            let mut txt_mat = tape.value(txt.all).clone();
            let last = txt_mat.nrows() - 1;
            assert!(!txt_valid[last], "expected last row padded");
            for c in 0..txt_mat.ncols() {
                txt_mat[[last, c]] = pad_fill;
            }
            let txt2 = EncodedSet { all: tape.leaf(txt_mat), n: txt.n };
            let out = branch
                .cross_attend_visual(&mut tape, &store, &img, &txt2, &txt_valid)
                .unwrap();
            tape.value(out.all).clone()
        };
        assert_eq!(run(0.0), run(123.0));
    }

    #[test]
    fn singleton_patch_identity_value_passes_through() {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let branch = GroundingBranch::build(&mut store, &mut rng, &cfg);
        // identity value and output projections
        let eye = Mat::eye(cfg.dim);
        *store.get_mut(branch.agg_attn.wv.w) = eye.clone();
        store.get_mut(branch.agg_attn.wv.b).fill(0.0);
        *store.get_mut(branch.agg_attn.wo.w) = eye;
        store.get_mut(branch.agg_attn.wo.b).fill(0.0);

        let mut tape = Tape::new();
        let patch = Mat::from_shape_fn((1, cfg.dim), |(_, c)| 0.1 * c as f64 - 0.2);
        let cls = Mat::zeros((1, cfg.dim));
        let cls_t = tape.leaf(cls);
        let patch_t = tape.leaf(patch.clone());
        let all = tape.concat_rows(cls_t, patch_t);
        let set = EncodedSet { all, n: 1 };
        let pooled = branch.aggregate_patches(&mut tape, &store, &set).unwrap();
        for c in 0..cfg.dim {
            assert!((tape.value(pooled)[[0, c]] - patch[[0, c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_patches_pool_to_common_value() {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let branch = GroundingBranch::build(&mut store, &mut rng, &cfg);
        let mut tape = Tape::new();
        let row = Mat::from_shape_fn((1, cfg.dim), |(_, c)| 0.05 * c as f64 + 0.1);
        let patches = ndarray::concatenate(
            ndarray::Axis(0),
            &[row.view(), row.view(), row.view()],
        )
        .unwrap();
        let cls = tape.leaf(Mat::zeros((1, cfg.dim)));
        let p = tape.leaf(patches);
        let all = tape.concat_rows(cls, p);
        let set = EncodedSet { all, n: 3 };
        let pooled = branch.aggregate_patches(&mut tape, &store, &set).unwrap();

        // pooling identical rows equals pooling a single copy
        let mut tape2 = Tape::new();
        let cls2 = tape2.leaf(Mat::zeros((1, cfg.dim)));
        let p2 = tape2.leaf(row.clone());
        let all2 = tape2.concat_rows(cls2, p2);
        let set2 = EncodedSet { all: all2, n: 1 };
        let pooled2 = branch.aggregate_patches(&mut tape2, &store, &set2).unwrap();
        for c in 0..cfg.dim {
            assert!((tape.value(pooled)[[0, c]] - tape2.value(pooled2)[[0, c]]).abs() < 1e-10);
        }
    }

    #[test]
    fn patch_permutation_leaves_pool_invariant() {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let branch = GroundingBranch::build(&mut store, &mut rng, &cfg);
        let patches = Mat::from_shape_fn((5, cfg.dim), |(r, c)| ((r * 7 + c) as f64 * 0.07).sin());
        let mut permuted = patches.clone();
        for c in 0..cfg.dim {
            permuted[[0, c]] = patches[[4, c]];
            permuted[[4, c]] = patches[[0, c]];
        }
        let run = |p: &Mat| {
            let mut tape = Tape::new();
            let cls = tape.leaf(Mat::zeros((1, cfg.dim)));
            let pt = tape.leaf(p.clone());
            let all = tape.concat_rows(cls, pt);
            let set = EncodedSet { all, n: 5 };
            let pooled = branch.aggregate_patches(&mut tape, &store, &set).unwrap();
            tape.value(pooled).clone()
        };
        let a = run(&patches);
        let b = run(&permuted);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn bbox_prediction_in_unit_interval_and_corner_conversion() {
        let mut tape = Tape::new();
        let p = tape.row(&[0.5, 0.5, 1.0, 1.0]);
        let corners = cxcywh_to_corners(&mut tape, p);
        let v = tape.value(corners);
        assert!((v[[0, 0]] - 0.0).abs() < 1e-12);
        assert!((v[[0, 1]] - 0.0).abs() < 1e-12);
        assert!((v[[0, 2]] - 1.0).abs() < 1e-12);
        assert!((v[[0, 3]] - 1.0).abs() < 1e-12);

        // clipping keeps corner order
        let mut tape2 = Tape::new();
        let p2 = tape2.row(&[0.1, 0.9, 0.9, 0.8]);
        let c2t = cxcywh_to_corners(&mut tape2, p2);
        let c2 = tape2.value(c2t).clone();
        assert!(c2[[0, 0]] <= c2[[0, 2]]);
        assert!(c2[[0, 1]] <= c2[[0, 3]]);
    }

    #[test]
    fn img_loss_zero_for_exact_match() {
        let mut tape = Tape::new();
        let gt = BBox::new(0.2, 0.3, 0.6, 0.8);
        let pred = tape.row(&[0.2, 0.3, 0.6, 0.8]);
        let loss = img_loss(&mut tape, pred, &gt);
        assert!(tape.scalar_value(loss).abs() < 1e-12);
    }

    #[test]
    fn img_loss_disjoint_quarters_equals_two() {
        // pred (0,0,.5,.5) vs gt (.5,.5,1,1): L1 = 0.5, GIoU = -0.5, total 2.0
        let mut tape = Tape::new();
        let gt = BBox::new(0.5, 0.5, 1.0, 1.0);
        let pred = tape.row(&[0.0, 0.0, 0.5, 0.5]);
        let loss = img_loss(&mut tape, pred, &gt);
        assert!((tape.scalar_value(loss) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_gt_loss_decreases_toward_zero_box() {
        let gt = BBox::ZERO;
        let eval = |b: [f64; 4]| {
            let mut tape = Tape::new();
            let pred = tape.row(&b);
            let loss = img_loss(&mut tape, pred, &gt);
            tape.scalar_value(loss)
        };
        let far = eval([0.5, 0.5, 0.9, 0.9]);
        let near = eval([0.01, 0.01, 0.05, 0.05]);
        assert!(near < far, "shrinking toward origin must reduce the loss: {near} vs {far}");
    }

    #[test]
    fn giou_matches_plain_implementation_and_bounds() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let rand_box = |rng: &mut ChaCha8Rng| {
                let x1: f64 = rng.gen_range(0.0..0.8);
                let y1: f64 = rng.gen_range(0.0..0.8);
                let x2: f64 = rng.gen_range(x1 + 0.01..1.0);
                let y2: f64 = rng.gen_range(y1 + 0.01..1.0);
                BBox::new(x1, y1, x2, y2)
            };
            let a = rand_box(&mut rng);
            let b = rand_box(&mut rng);
            let mut tape = Tape::new();
            let pred = tape.row(&[a.x1, a.y1, a.x2, a.y2]);
            let gt = giou(&mut tape, pred, &b);
            let g_tape = tape.scalar_value(gt);
            let g_plain = giou_boxes(&a, &b);
            assert!((g_tape - g_plain).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&g_plain));
            let i = iou_boxes(&a, &b);
            assert!((0.0..=1.0).contains(&i));
            assert!(g_plain <= i + 1e-12);
        }
    }

    #[test]
    fn giou_equals_iou_for_nested_boxes() {
        let outer = BBox::new(0.1, 0.1, 0.9, 0.9);
        let inner = BBox::new(0.3, 0.3, 0.6, 0.6);
        let g = giou_boxes(&inner, &outer);
        let i = iou_boxes(&inner, &outer);
        assert!((g - i).abs() < 1e-12, "hull equals union for nested boxes");
    }
}

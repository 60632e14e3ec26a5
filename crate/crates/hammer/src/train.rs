//! Joint optimization: per-step loss assembly over a batch, decoupled
//! weight-decay adaptive-moment updates, warmup + cosine learning rate,
//! EMA synchronization, queue bookkeeping, and the epoch-driving fit loop.

use std::collections::HashSet;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{GradStore, Mat, Tape, TapeError};
use crate::metrics::{compute_report, MetricError, MetricReport};
use crate::model::contrastive::{
    mac_global_anchor, mac_local_anchor, MacGlobalInputs, MacLocalInputs,
};
use crate::model::deep::{bic_loss, mlc_loss, tmg_loss};
use crate::model::grounding::img_loss;
use crate::model::{
    forward_online, infer, momentum_views, ModelError, ModelState, MomentumViews, SampleInput,
};
use crate::synth::{mix_seed, Dataset};
use crate::types::{MediaPair, Prediction, Split};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss term {0} is not finite at step {1}")]
    NonFinite(&'static str, usize),
    #[error("all loss terms are disabled")]
    NothingToOptimize,
    #[error("batch size {batch} exceeds training split size {split}")]
    BatchTooLarge { batch: usize, split: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("metrics failed during validation: {0}")]
    Metrics(#[from] MetricError),
    #[error("momentum update failed: {0}")]
    Momentum(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Hammer,
    HammerPlusPlus,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Hammer => "hammer",
            Variant::HammerPlusPlus => "hammer++",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hammer" => Ok(Variant::Hammer),
            "hammer++" => Ok(Variant::HammerPlusPlus),
            other => Err(format!("unknown variant '{other}' (expected hammer|hammer++)")),
        }
    }
}

/// The six loss terms; names match the ablation switch interface.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossTerm {
    MacG,
    MacL,
    Img,
    Tmg,
    Mlc,
    Bic,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] =
        [LossTerm::MacG, LossTerm::MacL, LossTerm::Img, LossTerm::Tmg, LossTerm::Mlc, LossTerm::Bic];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::MacG => "MAC-G",
            LossTerm::MacL => "MAC-L",
            LossTerm::Img => "IMG",
            LossTerm::Tmg => "TMG",
            LossTerm::Mlc => "MLC",
            LossTerm::Bic => "BIC",
        }
    }
}

impl std::str::FromStr for LossTerm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "MAC-G" => Ok(LossTerm::MacG),
            "MAC-L" => Ok(LossTerm::MacL),
            "IMG" => Ok(LossTerm::Img),
            "TMG" => Ok(LossTerm::Tmg),
            "MLC" => Ok(LossTerm::Mlc),
            "BIC" => Ok(LossTerm::Bic),
            other => Err(format!(
                "unknown loss '{other}' (expected MAC-G|MAC-L|IMG|TMG|MLC|BIC)"
            )),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// EMA coefficient of the momentum twins.
    pub momentum: f64,
    /// Weight of the momentum KL inside the token grounding loss.
    pub alpha: f64,
    pub seed: u64,
    pub disabled: Vec<LossTerm>,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::HammerPlusPlus,
            steps: 1500,
            batch_size: 32,
            base_lr: 1e-4,
            final_lr: 1e-5,
            warmup_steps: 200,
            weight_decay: 0.02,
            momentum: 0.995,
            alpha: 0.4,
            seed: 0,
            disabled: Vec::new(),
            eval_every: 250,
        }
    }
}

impl TrainConfig {
    /// Terms active under this variant and the ablation switches.
    pub fn enabled_terms(&self) -> Vec<LossTerm> {
        LossTerm::ALL
            .iter()
            .copied()
            .filter(|t| {
                if self.disabled.contains(t) {
                    return false;
                }
                *t != LossTerm::MacL || self.variant == Variant::HammerPlusPlus
            })
            .collect()
    }
}

/// Warmup then half-cosine decay: 0 at step 0, base at `warmup_steps`,
/// `final_lr` at `steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step <= cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps.max(1) as f64;
    }
    if step >= cfg.steps {
        return cfg.final_lr;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.steps - cfg.warmup_steps) as f64;
    cfg.final_lr
        + (cfg.base_lr - cfg.final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-term loss values for one batch; only enabled terms appear.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: Vec<(LossTerm, f64)>,
}

impl LossBreakdown {
    pub fn term(&self, t: LossTerm) -> Option<f64> {
        self.terms.iter().find(|(k, _)| *k == t).map(|(_, v)| *v)
    }
}

struct SampleResult {
    term_values: Vec<(LossTerm, f64)>,
    grads: Option<GradStore>,
    had_cold_queue: bool,
}

struct BatchOutcome {
    breakdown: LossBreakdown,
    grads: Option<GradStore>,
    /// (image projection, text projection, id hash, manipulated) per sample.
    queue_entries: Vec<(Vec<f64>, Vec<f64>, u64, bool)>,
    zero_anchor_batch: bool,
    cold_queue_anchors: usize,
}

/// Forward (and optionally backward) the whole batch. Gradients of each
/// sample are computed on an independent tape and summed in batch order, so
/// the result is deterministic regardless of thread scheduling.
fn compute_batch(
    state: &ModelState,
    inputs: &[SampleInput],
    tcfg: &TrainConfig,
    with_grads: bool,
) -> Result<BatchOutcome, TrainError> {
    if inputs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let enabled = tcfg.enabled_terms();
    if enabled.is_empty() {
        return Err(TrainError::NothingToOptimize);
    }
    let n = inputs.len();

    // momentum views (pure data) for every sample
    let views: Vec<MomentumViews> = inputs
        .par_iter()
        .map(|inp| momentum_views(&state.model, &state.momentum, inp))
        .collect::<Result<_, _>>()?;

    // in-batch negative pools for the local view: for sample i, every other
    // sample's momentum token/patch projections
    let need_local = enabled.contains(&LossTerm::MacL);
    let (token_negs, patch_negs): (Vec<Mat>, Vec<Mat>) = if need_local && n >= 2 {
        let pools: Vec<(Mat, Mat)> = (0..n)
            .map(|i| {
                let tok_rows: Vec<_> =
                    (0..n).filter(|&j| j != i).map(|j| views[j].token_projs.view()).collect();
                let pat_rows: Vec<_> =
                    (0..n).filter(|&j| j != i).map(|j| views[j].patch_projs.view()).collect();
                (
                    ndarray::concatenate(ndarray::Axis(0), &tok_rows).expect("token pool"),
                    ndarray::concatenate(ndarray::Axis(0), &pat_rows).expect("patch pool"),
                )
            })
            .collect();
        pools.into_iter().unzip()
    } else {
        (Vec::new(), Vec::new())
    };

    // queue snapshots; per-anchor exclusion of its own positive
    let need_global = enabled.contains(&LossTerm::MacG);
    let img_negatives: Vec<Mat> = if need_global {
        inputs.iter().map(|inp| state.img_queue.negatives_excluding(inp.id_hash)).collect()
    } else {
        Vec::new()
    };
    let txt_negatives: Vec<Mat> = if need_global {
        inputs.iter().map(|inp| state.txt_queue.negatives_excluding(inp.id_hash)).collect()
    } else {
        Vec::new()
    };

    let n_anchors = inputs.iter().filter(|i| i.y_bin == 0).count();
    let img_contrib = if state.cfg.img_loss_manipulated_only {
        inputs.iter().filter(|i| !i.y_box.is_degenerate()).count()
    } else {
        n
    };

    let results: Vec<SampleResult> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, inp)| -> Result<SampleResult, TrainError> {
            let mut tape = if with_grads { Tape::new() } else { Tape::no_grad() };
            let store = &state.online;
            let fwd = forward_online(&state.model, store, &mut tape, inp)?;
            let tau = tape.param(store, state.model.temperature);
            let is_anchor = inp.y_bin == 0;

            let mut term_values = Vec::new();
            let mut total = None;
            let mut had_cold_queue = false;
            let mut add_term = |tape: &mut Tape,
                                term: LossTerm,
                                value: crate::autodiff::T,
                                total: &mut Option<crate::autodiff::T>| {
                term_values.push((term, tape.scalar_value(value)));
                *total = Some(match *total {
                    None => value,
                    Some(acc) => tape.add(acc, value),
                });
            };

            for &term in &enabled {
                match term {
                    LossTerm::MacG => {
                        let mut value = None;
                        if is_anchor && n_anchors > 0 {
                            let inputs_g = MacGlobalInputs {
                                anchor_img: fwd.img_cls_proj,
                                anchor_txt: fwd.txt_cls_proj,
                                own_momentum_img: &views[i].img_cls_proj,
                                own_momentum_txt: &views[i].txt_cls_proj,
                                img_negatives: &img_negatives[i],
                                txt_negatives: &txt_negatives[i],
                            };
                            match mac_global_anchor(
                                &mut tape,
                                &inputs_g,
                                tau,
                                state.cfg.literal_denominator,
                            )? {
                                Some(v) => {
                                    value = Some(tape.scale(v, 1.0 / n_anchors as f64));
                                }
                                None => had_cold_queue = true,
                            }
                        }
                        let v = value.unwrap_or_else(|| tape.scalar(0.0));
                        add_term(&mut tape, term, v, &mut total);
                    }
                    LossTerm::MacL => {
                        let mut value = None;
                        if is_anchor && n_anchors > 0 && n >= 2 {
                            let inputs_l = MacLocalInputs {
                                anchor_img: fwd.img_cls_proj,
                                anchor_txt: fwd.txt_cls_proj,
                                own_momentum_tokens: &views[i].token_projs,
                                own_momentum_patches: &views[i].patch_projs,
                                token_negatives: &token_negs[i],
                                patch_negatives: &patch_negs[i],
                            };
                            if let Some(v) = mac_local_anchor(
                                &mut tape,
                                &inputs_l,
                                tau,
                                state.cfg.literal_denominator,
                            )? {
                                value = Some(tape.scale(v, 1.0 / n_anchors as f64));
                            }
                        }
                        let v = value.unwrap_or_else(|| tape.scalar(0.0));
                        add_term(&mut tape, term, v, &mut total);
                    }
                    LossTerm::Img => {
                        let skip = state.cfg.img_loss_manipulated_only && inp.y_box.is_degenerate();
                        let v = if skip || img_contrib == 0 {
                            tape.scalar(0.0)
                        } else {
                            let l = img_loss(&mut tape, fwd.bbox_corners, &inp.y_box);
                            tape.scale(l, 1.0 / img_contrib as f64)
                        };
                        add_term(&mut tape, term, v, &mut total);
                    }
                    LossTerm::Tmg => {
                        let l = tmg_loss(
                            &mut tape,
                            fwd.token_logits,
                            &views[i].token_logits,
                            &inp.y_tok,
                            tcfg.alpha,
                            state.cfg.token_pos_weight,
                        )?;
                        let v = tape.scale(l, 1.0 / n as f64);
                        add_term(&mut tape, term, v, &mut total);
                    }
                    LossTerm::Mlc => {
                        let l = mlc_loss(&mut tape, fwd.mul_logits, &inp.y_mul);
                        let v = tape.scale(l, 1.0 / n as f64);
                        add_term(&mut tape, term, v, &mut total);
                    }
                    LossTerm::Bic => {
                        let l = bic_loss(&mut tape, fwd.bin_logits, inp.y_bin);
                        let v = tape.scale(l, 1.0 / n as f64);
                        add_term(&mut tape, term, v, &mut total);
                    }
                }
            }

            let grads = if with_grads {
                let total = total.expect("at least one term");
                let node_grads = tape.backward(total);
                let mut gs = GradStore::zeros_like(&state.online);
                tape.accumulate_param_grads(&node_grads, &mut gs);
                Some(gs)
            } else {
                None
            };
            Ok(SampleResult { term_values, grads, had_cold_queue })
        })
        .collect::<Result<_, _>>()?;

    // deterministic reduction in batch order
    let mut terms: Vec<(LossTerm, f64)> = enabled.iter().map(|&t| (t, 0.0)).collect();
    let mut grads = with_grads.then(|| GradStore::zeros_like(&state.online));
    let mut cold_queue_anchors = 0;
    for r in &results {
        for (slot, (_, v)) in terms.iter_mut().zip(&r.term_values) {
            slot.1 += v;
        }
        if let (Some(acc), Some(g)) = (grads.as_mut(), r.grads.as_ref()) {
            acc.add_assign(g);
        }
        if r.had_cold_queue {
            cold_queue_anchors += 1;
        }
    }
    let total = terms.iter().map(|(_, v)| v).sum();

    let queue_entries = inputs
        .iter()
        .zip(&views)
        .map(|(inp, v)| {
            (v.img_cls_proj.clone(), v.txt_cls_proj.clone(), inp.id_hash, inp.y_bin == 1)
        })
        .collect();

    Ok(BatchOutcome {
        breakdown: LossBreakdown { total, terms },
        grads,
        queue_entries,
        zero_anchor_batch: n_anchors == 0,
        cold_queue_anchors,
    })
}

/// Loss forward over a batch without touching any state; the per-term
/// breakdown is what the training log records.
pub fn total_loss(
    state: &ModelState,
    batch: &[MediaPair],
    tcfg: &TrainConfig,
) -> Result<LossBreakdown, TrainError> {
    let inputs: Vec<SampleInput> = batch
        .iter()
        .map(|p| SampleInput::from_pair(p, &state.cfg))
        .collect::<Result<_, _>>()?;
    Ok(compute_batch(state, &inputs, tcfg, false)?.breakdown)
}

/// Loss plus summed parameter gradients, leaving the state untouched. This
/// is the analytic side of the finite-difference checks.
pub fn loss_and_grads(
    state: &ModelState,
    batch: &[MediaPair],
    tcfg: &TrainConfig,
) -> Result<(LossBreakdown, GradStore), TrainError> {
    let inputs: Vec<SampleInput> = batch
        .iter()
        .map(|p| SampleInput::from_pair(p, &state.cfg))
        .collect::<Result<_, _>>()?;
    let outcome = compute_batch(state, &inputs, tcfg, true)?;
    Ok((outcome.breakdown, outcome.grads.expect("gradients requested")))
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam moments plus decoupled weight decay: the decay multiplies the
/// parameter directly and never enters the moment estimates. Single-row
/// parameters (biases, norms, class/position tokens, the temperature) are
/// not decayed.
fn adamw_update(state: &mut ModelState, grads: &GradStore, lr: f64, weight_decay: f64) {
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let ids: Vec<_> = state.online.iter().map(|(id, _, m)| (id, m.nrows())).collect();
    for (id, rows) in ids {
        let g = grads.get(id);
        let m = state.opt_m.get_mut(id);
        ndarray::Zip::from(&mut *m).and(g).for_each(|mv, &gv| {
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
        });
        let v = state.opt_v.get_mut(id);
        ndarray::Zip::from(&mut *v).and(g).for_each(|vv, &gv| {
            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
        });
        let m = state.opt_m.get(id);
        let v = state.opt_v.get(id);
        let p = state.online.get_mut(id);
        let decay = if rows > 1 { weight_decay } else { 0.0 };
        ndarray::Zip::from(p).and(m).and(v).for_each(|pv, &mv, &vv| {
            let m_hat = mv / bc1;
            let v_hat = vv / bc2;
            *pv -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + decay * *pv);
        });
    }
}

/// One optimization step: forward all losses, backward, AdamW update,
/// momentum sync, then queue push of this batch's momentum projections.
pub fn train_step(
    state: &mut ModelState,
    batch: &[MediaPair],
    tcfg: &TrainConfig,
) -> Result<LossBreakdown, TrainError> {
    let inputs: Vec<SampleInput> = batch
        .iter()
        .map(|p| SampleInput::from_pair(p, &state.cfg))
        .collect::<Result<_, _>>()?;
    let outcome = compute_batch(state, &inputs, tcfg, true)?;

    for (term, value) in &outcome.breakdown.terms {
        if !value.is_finite() {
            return Err(TrainError::NonFinite(term.name(), state.step));
        }
    }
    if !outcome.breakdown.total.is_finite() {
        return Err(TrainError::NonFinite("total", state.step));
    }

    let lr = lr_schedule(state.step + 1, tcfg);
    let grads = outcome.grads.expect("gradients requested");
    adamw_update(state, &grads, lr, tcfg.weight_decay);
    state.clamp_temperature();
    state
        .momentum_sync(tcfg.momentum)
        .map_err(TrainError::Momentum)?;
    for (img, txt, id, manip) in &outcome.queue_entries {
        state
            .img_queue
            .push(img, *id, *manip)
            .map_err(|e| TrainError::Momentum(e.to_string()))?;
        state
            .txt_queue
            .push(txt, *id, *manip)
            .map_err(|e| TrainError::Momentum(e.to_string()))?;
    }
    if outcome.zero_anchor_batch || outcome.cold_queue_anchors > 0 {
        state.mac_warnings += 1;
    }
    state.step += 1;
    Ok(outcome.breakdown)
}

/// Deterministic batch composition: epoch order is a seeded shuffle keyed by
/// (seed, epoch), so any step's batch can be reconstructed without RNG
/// replay. Partial trailing batches are dropped.
pub fn batch_indices(
    n_train: usize,
    batch_size: usize,
    step: usize,
    seed: u64,
) -> Vec<usize> {
    let steps_per_epoch = (n_train / batch_size).max(1);
    let epoch = step / steps_per_epoch;
    let within = step % steps_per_epoch;
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5e5, epoch as u64));
    order.shuffle(&mut rng);
    order[within * batch_size..((within + 1) * batch_size).min(n_train)].to_vec()
}

/// Events emitted while fitting; the caller decides what to persist.
pub enum FitEvent<'a> {
    /// One line per optimization step.
    Step { step: usize, lr: f64, breakdown: &'a LossBreakdown },
    /// Periodic validation; `is_best` marks a new best validation AUC.
    Validation { step: usize, report: &'a MetricReport, is_best: bool },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitSummary {
    pub steps_run: usize,
    pub best_val_auc: f64,
    pub final_val: Option<MetricReport>,
}

/// Run the optimization loop from the state's current step up to
/// `tcfg.steps`, validating every `eval_every` steps and at the end.
pub fn fit(
    state: &mut ModelState,
    dataset: &Dataset,
    tcfg: &TrainConfig,
    mut on_event: impl FnMut(FitEvent) -> Result<(), TrainError>,
) -> Result<FitSummary, TrainError> {
    let train: Vec<&MediaPair> = dataset.split(Split::Train);
    let val: Vec<&MediaPair> = dataset.split(Split::Val);
    if train.len() < tcfg.batch_size {
        return Err(TrainError::BatchTooLarge { batch: tcfg.batch_size, split: train.len() });
    }
    if tcfg.enabled_terms().is_empty() {
        return Err(TrainError::NothingToOptimize);
    }

    let mut best_val_auc = f64::NEG_INFINITY;
    let mut final_val = None;
    let start = state.step;
    for step in start..tcfg.steps {
        let idx = batch_indices(train.len(), tcfg.batch_size, step, tcfg.seed);
        let batch: Vec<MediaPair> = idx.iter().map(|&i| train[i].clone()).collect();
        let breakdown = train_step(state, &batch, tcfg)?;
        let lr = lr_schedule(state.step, tcfg);
        on_event(FitEvent::Step { step: state.step, lr, breakdown: &breakdown })?;

        let is_last = state.step == tcfg.steps;
        if !val.is_empty() && (state.step % tcfg.eval_every == 0 || is_last) {
            let report = evaluate(state, &val)?;
            let is_best = report.binary.auc > best_val_auc;
            if is_best {
                best_val_auc = report.binary.auc;
            }
            on_event(FitEvent::Validation { step: state.step, report: &report, is_best })?;
            if is_last {
                final_val = Some(report);
            }
        }
    }
    Ok(FitSummary { steps_run: state.step - start, best_val_auc, final_val })
}

/// Inference over a set of pairs (parallel, read-only state).
pub fn predict_pairs(state: &ModelState, pairs: &[&MediaPair]) -> Result<Vec<Prediction>, ModelError> {
    pairs
        .par_iter()
        .map(|p| infer(&state.model, &state.online, &state.cfg, p))
        .collect()
}

/// Full metric report over a set of pairs.
pub fn evaluate(state: &ModelState, pairs: &[&MediaPair]) -> Result<MetricReport, TrainError> {
    let preds = predict_pairs(state, pairs)?;
    Ok(compute_report(&preds, pairs, state.cfg.img_loss_manipulated_only, true)?)
}

//! Online unsupervised training: cold start from noisy flow, consensus
//! weighted segmentation loss, motion loss against Kabsch rotations, and the
//! running flow correction.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{adam_step, MomentState, ParamStore, Tape, Tensor, Var};
use crate::geom::{PointCloud, Vec3, GROUP_ORDER};
use crate::heads::{motion_from_logits, PartMotionSet, SoftMask};
use crate::metrics::{epe3d, max_weight_assignment};
use crate::model::{pair_forward_with, ModelConfig, PairNodes};
use crate::pipeline::{aggregate, evaluate_all, model_flow, PreparedScene};
use crate::rigidfit::{fit_multibody, residuals, segment_flow, RansacOptions};
use crate::scenegen::SceneSample;
use crate::{Error, Result};

/// Guards `ln` of mask entries in the supervised loss.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// α: weight kept on the previous flow estimate.
    pub flow_decay: f64,
    /// τ in 1/m.
    pub consensus_temperature: f64,
    pub learning_rate: f64,
    /// Learning-rate factor once cold start is over.
    pub refine_lr_scale: f64,
    pub epochs: usize,
    /// Epochs trained on the raw noisy flow with β ≡ 1 before consensus
    /// weighting and flow correction switch on.
    pub cold_start_epochs: usize,
    pub seg_weight: f64,
    pub motion_weight: f64,
    pub seed: u64,
    pub use_consensus: bool,
    pub update_flow: bool,
    /// Replace the unsupervised segmentation loss with the Hungarian-matched
    /// cross-entropy against ground-truth labels.
    pub supervised: bool,
    /// During cold start, train the segmentation against rigid parts found
    /// in the noisy flow by sequential RANSAC instead of the residual loss.
    pub flow_pseudo_labels: bool,
    /// Let the motion loss differentiate into the masks through part pooling
    /// after cold start. During cold start it always does.
    pub motion_mask_gradient: bool,
    /// RANSAC inlier bound (m); about twice the flow noise.
    pub ransac_threshold: f64,
    pub ransac_hypotheses: usize,
    pub ransac_min_points: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            flow_decay: 0.9,
            consensus_temperature: 10.0,
            learning_rate: 1e-3,
            refine_lr_scale: 1.0,
            epochs: 20,
            cold_start_epochs: 1,
            seg_weight: 1.0,
            motion_weight: 0.5,
            seed: 0,
            use_consensus: true,
            update_flow: true,
            supervised: false,
            flow_pseudo_labels: true,
            motion_mask_gradient: false,
            ransac_threshold: 0.04,
            ransac_hypotheses: 200,
            ransac_min_points: 24,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.flow_decay) {
            return fail("trainer.flow_decay must lie in [0, 1]");
        }
        if !(self.consensus_temperature > 0.0) || !self.consensus_temperature.is_finite() {
            return fail("trainer.consensus_temperature must be positive");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail("trainer.learning_rate must be positive");
        }
        if !(self.refine_lr_scale > 0.0) || !self.refine_lr_scale.is_finite() {
            return fail("trainer.refine_lr_scale must be positive");
        }
        if !(self.seg_weight >= 0.0) || !(self.motion_weight >= 0.0) {
            return fail("trainer.seg_weight and trainer.motion_weight must be non-negative");
        }
        if !(self.ransac_threshold > 0.0) || !self.ransac_threshold.is_finite() {
            return fail("trainer.ransac_threshold must be positive");
        }
        if self.ransac_hypotheses == 0 || self.ransac_min_points < 3 {
            return fail("trainer.ransac_hypotheses must be >= 1 and trainer.ransac_min_points >= 3");
        }
        Ok(())
    }

    pub fn ransac(&self, max_parts: usize) -> RansacOptions {
        RansacOptions {
            hypotheses: self.ransac_hypotheses,
            threshold: self.ransac_threshold,
            min_points: self.ransac_min_points,
            max_parts,
        }
    }
}

/// Cold-start part labels for one scene from its noisy flow alone.
pub fn flow_pseudo_labels(scene: &SceneSample, opts: &RansacOptions, seed: u64, stream: u64) -> Result<Vec<usize>> {
    let flow = scene.flow_noisy.as_deref().ok_or_else(|| Error::MissingFlow(scene.id.clone()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Ok(segment_flow(&scene.points_k, flow, opts, &mut rng)?.labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowTag {
    Initial,
    Updated,
}

/// Current flow estimate for one training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub flow: Vec<Vec3>,
    pub tag: FlowTag,
}

pub fn cold_start(scene: &SceneSample) -> Result<FlowState> {
    let flow = scene.flow_noisy.clone().ok_or_else(|| Error::MissingFlow(scene.id.clone()))?;
    Ok(FlowState {
        flow,
        tag: FlowTag::Initial,
    })
}

/// `δ̂ ← α·δ̂ + (1−α)·(Σ_s m_is·(T̂ˢ∘p_i) − p_i)`.
pub fn update_flow(
    state: &FlowState,
    pk: &PointCloud,
    mask: &SoftMask,
    motions: &PartMotionSet,
    alpha: f64,
) -> Result<FlowState> {
    if state.flow.len() != pk.len() || mask.n_points() != pk.len() || motions.len() != mask.slots() {
        return Err(Error::Shape(format!(
            "flow {} / points {} / mask {}x{} / motions {}",
            state.flow.len(),
            pk.len(),
            mask.n_points(),
            mask.slots(),
            motions.len()
        )));
    }
    let derived = model_flow(pk, mask, motions);
    let flow = state
        .flow
        .iter()
        .zip(&derived)
        .map(|(d, m)| alpha * d + (1.0 - alpha) * m)
        .collect();
    Ok(FlowState {
        flow,
        tag: FlowTag::Updated,
    })
}

/// `N × S` consensus `β = exp(−τ·r)`; a plain value, never on a tape.
pub fn consensus(pk: &PointCloud, state: &FlowState, motions: &PartMotionSet, tau: f64) -> Result<Tensor> {
    let mut r = residuals(pk, &state.flow, motions)?;
    r.data_mut().iter_mut().for_each(|v| *v = (-tau * *v).exp());
    Ok(r)
}

/// Per-entry coefficients `β_is·r_is/(N·S)` of the mask in the
/// segmentation loss, with `r` the residual to the Kabsch motions.
pub fn segmentation_weights(pk: &PointCloud, state: &FlowState, kabsch: &PartMotionSet, beta: &Tensor) -> Result<Tensor> {
    let mut w = residuals(pk, &state.flow, kabsch)?;
    if beta.shape() != w.shape() {
        return Err(Error::Shape(format!("beta {:?} vs residuals {:?}", beta.shape(), w.shape())));
    }
    let scale = 1.0 / (w.rows() * w.cols()) as f64;
    w.data_mut().iter_mut().zip(beta.data()).for_each(|(r, b)| *r *= b * scale);
    Ok(w)
}

/// `(1/NS)·Σ_i Σ_s ‖β_is·m_is·((p_i+δ̂_i) − T̂ˢ∘p_i)‖`.
pub fn segmentation_loss(
    pk: &PointCloud,
    state: &FlowState,
    mask: &SoftMask,
    kabsch: &PartMotionSet,
    beta: &Tensor,
) -> Result<f64> {
    let w = segmentation_weights(pk, state, kabsch, beta)?;
    if w.shape() != mask.values().shape() {
        return Err(Error::Shape(format!("mask {:?} vs weights {:?}", mask.values().shape(), w.shape())));
    }
    Ok(w.data().iter().zip(mask.values().data()).map(|(a, b)| a * b).sum())
}

pub fn segmentation_loss_on_tape(tape: &mut Tape, mask: Var, weights: &Tensor) -> Result<Var> {
    Ok(tape.weighted_sum(mask, weights.clone())?)
}

/// `(slot, bin)` pairs trained by the motion loss: slots active in both
/// sets, targeted at the Kabsch rotation's nearest group bin.
pub fn motion_targets(rot: &PartMotionSet, kabsch: &PartMotionSet) -> Vec<(usize, usize)> {
    rot.slots
        .iter()
        .zip(&kabsch.slots)
        .enumerate()
        .filter(|(_, (a, b))| a.active && b.active)
        .map(|(s, (_, b))| (s, b.bin))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionLoss {
    pub value: f64,
    /// Slots that contributed; zero means the loss was skipped (warning).
    pub slots: usize,
}

/// Mean cross-entropy of each slot's rotation distribution against the
/// one-hot Kabsch bin.
pub fn motion_loss(rot: &PartMotionSet, kabsch: &PartMotionSet) -> Result<MotionLoss> {
    if rot.len() != kabsch.len() {
        return Err(Error::Shape(format!("{} vs {} slots", rot.len(), kabsch.len())));
    }
    let targets = motion_targets(rot, kabsch);
    if targets.is_empty() {
        return Ok(MotionLoss { value: 0.0, slots: 0 });
    }
    let total: f64 = targets.iter().map(|&(s, b)| -rot.slots[s].distribution[b].ln()).sum();
    Ok(MotionLoss {
        value: total / targets.len() as f64,
        slots: targets.len(),
    })
}

/// Same loss from `S × 60` logits. Returns `None` without targets.
pub fn motion_loss_on_tape(tape: &mut Tape, logits: Var, targets: &[(usize, usize)]) -> Result<Option<Var>> {
    if targets.is_empty() {
        return Ok(None);
    }
    let (rows, cols) = tape.shape(logits);
    if cols != GROUP_ORDER {
        return Err(Error::Shape(format!("motion logits have {cols} columns")));
    }
    let mut w = Tensor::zeros(rows, cols);
    let k = -1.0 / targets.len() as f64;
    for &(s, b) in targets {
        w.set(s, b, w.get(s, b) + k);
    }
    let ls = tape.log_softmax_rows(logits);
    Ok(Some(tape.weighted_sum(ls, w)?))
}

/// Coefficients `−1/N` at `(i, σ(gt_i))` where `σ` is the Hungarian
/// matching of ground-truth parts to slots minimising
/// `−Σ_i 1[gt_i = g]·ln m_is`.
pub fn supervised_weights(mask: &SoftMask, gt_labels: &[usize]) -> Result<Tensor> {
    let n = mask.n_points();
    let slots = mask.slots();
    if gt_labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} points", gt_labels.len())));
    }
    let parts = gt_labels.iter().max().map_or(0, |m| m + 1);
    if parts > slots {
        return Err(Error::Shape(format!("{parts} ground-truth parts exceed {slots} slots")));
    }
    let mut score = vec![vec![0.0; slots]; parts];
    for (i, &g) in gt_labels.iter().enumerate() {
        for (s, v) in score[g].iter_mut().enumerate() {
            *v += (mask.get(i, s) + LOG_EPS).ln();
        }
    }
    let assign = max_weight_assignment(&score);
    let mut w = Tensor::zeros(n, slots);
    for (i, &g) in gt_labels.iter().enumerate() {
        let s = assign[g].expect("every part is matched when parts <= slots");
        w.set(i, s, -1.0 / n as f64);
    }
    Ok(w)
}

/// Hungarian-matched cross-entropy of mask columns against ground truth.
pub fn supervised_segmentation_loss(mask: &SoftMask, gt_labels: &[usize]) -> Result<f64> {
    let w = supervised_weights(mask, gt_labels)?;
    Ok(w.data()
        .iter()
        .zip(mask.values().data())
        .map(|(&c, &m)| if c == 0.0 { 0.0 } else { c * (m + LOG_EPS).ln() })
        .sum())
}

pub fn supervised_segmentation_loss_on_tape(tape: &mut Tape, mask: Var, weights: &Tensor) -> Result<Var> {
    let (r, c) = tape.shape(mask);
    let eps = tape.constant(Tensor::filled(r, c, LOG_EPS));
    let shifted = tape.add(mask, eps)?;
    let logm = tape.log(shifted);
    Ok(tape.weighted_sum(logm, weights.clone())?)
}

/// Everything the loss needs that is held constant during one step.
#[derive(Clone, Debug)]
pub struct LossPlan {
    /// Coefficients of the mask (or of `ln` mask when supervised).
    pub seg_weights: Tensor,
    pub supervised: bool,
    pub motion_targets: Vec<(usize, usize)>,
    pub seg_weight: f64,
    pub motion_weight: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub seg: Var,
    pub motion: Option<Var>,
}

pub fn loss_on_tape(tape: &mut Tape, nodes: &PairNodes, plan: &LossPlan) -> Result<LossNodes> {
    let seg = if plan.supervised {
        supervised_segmentation_loss_on_tape(tape, nodes.k.mask, &plan.seg_weights)?
    } else {
        segmentation_loss_on_tape(tape, nodes.k.mask, &plan.seg_weights)?
    };
    let motion = motion_loss_on_tape(tape, nodes.motion_logits, &plan.motion_targets)?;
    let mut total = tape.scale(seg, plan.seg_weight);
    if let Some(m) = motion {
        let wm = tape.scale(m, plan.motion_weight);
        total = tape.add(total, wm)?;
    }
    Ok(LossNodes { total, seg, motion })
}

/// Constant parts of the loss for the current forward values.
#[derive(Clone, Debug)]
pub struct StepContext {
    pub mask: SoftMask,
    pub kabsch: PartMotionSet,
    pub head: PartMotionSet,
    pub beta: Tensor,
    pub plan: LossPlan,
}

/// Builds the stop-gradient quantities: Kabsch motions from `(δ̂, M̂)`,
/// head motions from the logits, consensus and the loss plan. With
/// `targets`, or `cfg.supervised`, the segmentation term is the matched
/// cross-entropy against those labels.
pub fn step_context(
    tape: &Tape,
    nodes: &PairNodes,
    scene: &SceneSample,
    state: &FlowState,
    cfg: &TrainerConfig,
    consensus_on: bool,
    targets: Option<&[usize]>,
) -> Result<StepContext> {
    let pk = &scene.points_k;
    let mask = SoftMask::new(tape.value(nodes.k.mask).clone())?;
    let logits = tape.value(nodes.motion_logits);
    let kabsch = fit_multibody(pk, &state.flow, &mask)?;
    let head = motion_from_logits(logits, pk, &state.flow, &mask)?;
    let beta = if consensus_on {
        consensus(pk, state, &head, cfg.consensus_temperature)?
    } else {
        Tensor::filled(mask.n_points(), mask.slots(), 1.0)
    };
    let labels = if cfg.supervised { Some(&scene.labels[..]) } else { targets };
    let seg_weights = match labels {
        Some(l) => supervised_weights(&mask, l)?,
        None => segmentation_weights(pk, state, &kabsch, &beta)?,
    };
    let plan = LossPlan {
        seg_weights,
        supervised: labels.is_some(),
        motion_targets: motion_targets(&head, &kabsch),
        seg_weight: cfg.seg_weight,
        motion_weight: cfg.motion_weight,
    };
    Ok(StepContext {
        mask,
        kabsch,
        head,
        beta,
        plan,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub seg_loss: f64,
    pub motion_loss: f64,
    /// Mask-weighted mean of β.
    pub consensus: f64,
    pub motion_slots: usize,
}

/// One line of the training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub seg_loss: f64,
    pub motion_loss: f64,
    pub consensus: f64,
    /// Mean EPE3D of the current training flow estimates.
    pub train_flow_epe: f64,
    /// Same, for the cold-start noisy flow.
    pub initial_flow_epe: f64,
    /// Pairs whose motion loss was skipped for lack of active slots.
    pub motion_skipped: usize,
    pub val_ap: Option<f64>,
    pub val_epe3d: Option<f64>,
    pub val_angular_error: Option<f64>,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedFlow {
    pub scene_id: String,
    pub tag: FlowTag,
    pub flow: Vec<[f64; 3]>,
}

/// Everything besides the parameter values needed to resume exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub epochs_done: usize,
    pub flows: Vec<SavedFlow>,
    pub moments: BTreeMap<String, MomentState>,
}

impl TrainState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::SceneFormat {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Owns the parameters and every pair's flow estimate.
pub struct Trainer {
    pub model: ModelConfig,
    pub cfg: TrainerConfig,
    store: ParamStore,
    train: Vec<PreparedScene>,
    val: Vec<PreparedScene>,
    flows: Vec<FlowState>,
    pseudo_labels: Option<Vec<Vec<usize>>>,
    initial_epe: f64,
    epoch: usize,
}

impl Trainer {
    pub fn new(
        model: ModelConfig,
        cfg: TrainerConfig,
        store: ParamStore,
        train: Vec<PreparedScene>,
        val: Vec<PreparedScene>,
    ) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let flows = train.iter().map(|ps| cold_start(&ps.scene)).collect::<Result<Vec<_>>>()?;
        let initial_epe = mean_epe(&train, &flows);
        let pseudo_labels = if cfg.flow_pseudo_labels && cfg.cold_start_epochs > 0 && !cfg.supervised {
            let opts = cfg.ransac(model.slots);
            Some(
                train
                    .par_iter()
                    .enumerate()
                    .map(|(i, ps)| flow_pseudo_labels(&ps.scene, &opts, cfg.seed, i as u64))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            model,
            cfg,
            store,
            train,
            val,
            flows,
            pseudo_labels,
            initial_epe,
            epoch: 0,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn flows(&self) -> &[FlowState] {
        &self.flows
    }

    pub fn train_scenes(&self) -> &[PreparedScene] {
        &self.train
    }

    pub fn initial_flow_epe(&self) -> f64 {
        self.initial_epe
    }

    pub fn flow_epe(&self) -> f64 {
        mean_epe(&self.train, &self.flows)
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            epochs_done: self.epoch,
            flows: self
                .train
                .iter()
                .zip(&self.flows)
                .map(|(ps, f)| SavedFlow {
                    scene_id: ps.scene.id.clone(),
                    tag: f.tag,
                    flow: f.flow.iter().map(|v| [v.x, v.y, v.z]).collect(),
                })
                .collect(),
            moments: self
                .store
                .names()
                .map(|n| (n.to_string(), self.store.moments(n).expect("listed name")))
                .collect(),
        }
    }

    /// Restores flows, optimizer moments and the epoch counter.
    pub fn restore(&mut self, state: TrainState) -> Result<()> {
        if state.flows.len() != self.train.len() {
            return Err(Error::Config(format!(
                "resume state has {} flows for {} training scenes",
                state.flows.len(),
                self.train.len()
            )));
        }
        let mut flows = Vec::with_capacity(self.train.len());
        for (ps, saved) in self.train.iter().zip(state.flows) {
            if saved.scene_id != ps.scene.id || saved.flow.len() != ps.scene.n_points() {
                return Err(Error::Config(format!(
                    "resume state flow `{}` does not match training scene `{}`",
                    saved.scene_id, ps.scene.id
                )));
            }
            flows.push(FlowState {
                flow: saved.flow.iter().map(|a| Vec3::new(a[0], a[1], a[2])).collect(),
                tag: saved.tag,
            });
        }
        for (name, m) in state.moments {
            self.store.set_moments(&name, m)?;
        }
        self.flows = flows;
        self.epoch = state.epochs_done;
        Ok(())
    }

    fn cold(&self) -> bool {
        self.epoch < self.cfg.cold_start_epochs
    }

    /// One optimizer step on training pair `idx`, then its flow update.
    pub fn step(&mut self, idx: usize) -> Result<StepStats> {
        let ps = &self.train[idx];
        let state = &self.flows[idx];
        let mut tape = Tape::new();
        let nodes = pair_forward_with(&mut tape, &self.store, &self.model, &ps.k, &ps.l, self.cfg.motion_mask_gradient || self.cold())?;
        let consensus_on = self.cfg.use_consensus && !self.cold();
        let targets = match (&self.pseudo_labels, self.cold()) {
            (Some(all), true) => Some(&all[idx][..]),
            _ => None,
        };
        let ctx = step_context(&tape, &nodes, &ps.scene, state, &self.cfg, consensus_on, targets)?;
        let losses = loss_on_tape(&mut tape, &nodes, &ctx.plan)?;
        let seg = tape.value(losses.seg).item();
        let motion = losses.motion.map_or(0.0, |m| tape.value(m).item());
        if !seg.is_finite() || !motion.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                scene: ps.scene.id.clone(),
                seg,
                motion,
            });
        }
        let grads = tape.backward(losses.total)?;
        let lr = if self.cold() {
            self.cfg.learning_rate
        } else {
            self.cfg.learning_rate * self.cfg.refine_lr_scale
        };
        adam_step(&mut self.store, &grads, lr)?;
        if self.cfg.update_flow && !self.cold() {
            self.flows[idx] = update_flow(state, &ps.scene.points_k, &ctx.mask, &ctx.kabsch, self.cfg.flow_decay)?;
        }
        let n = ctx.mask.n_points() as f64;
        let weighted_beta: f64 = ctx
            .beta
            .data()
            .iter()
            .zip(ctx.mask.values().data())
            .map(|(b, m)| b * m)
            .sum::<f64>()
            / n;
        Ok(StepStats {
            seg_loss: seg,
            motion_loss: motion,
            consensus: weighted_beta,
            motion_slots: ctx.plan.motion_targets.len(),
        })
    }

    /// Visits every training pair once in a seeded order, then validates.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch as u64);
        order.shuffle(&mut rng);
        let (mut seg, mut mot, mut cons, mut skipped) = (0.0, 0.0, 0.0, 0usize);
        for &i in &order {
            let st = self.step(i)?;
            seg += st.seg_loss;
            mot += st.motion_loss;
            cons += st.consensus;
            skipped += usize::from(st.motion_slots == 0);
        }
        let n = order.len() as f64;
        let (val_ap, val_epe3d, val_angular_error) = if self.val.is_empty() {
            (None, None, None)
        } else {
            let agg = aggregate(&evaluate_all(&self.store, &self.model, &self.val)?);
            (Some(agg.segmentation.ap), Some(agg.epe3d), agg.angular_error)
        };
        let record = EpochRecord {
            epoch: self.epoch,
            seg_loss: seg / n,
            motion_loss: mot / n,
            consensus: cons / n,
            train_flow_epe: self.flow_epe(),
            initial_flow_epe: self.initial_epe,
            motion_skipped: skipped,
            val_ap,
            val_epe3d,
            val_angular_error,
        };
        self.epoch += 1;
        Ok(record)
    }
}

fn mean_epe(scenes: &[PreparedScene], flows: &[FlowState]) -> f64 {
    scenes
        .iter()
        .zip(flows)
        .map(|(ps, f)| epe3d(&f.flow, &ps.scene.flow_clean))
        .sum::<f64>()
        / scenes.len() as f64
}

/// Trains for `cfg.epochs` epochs from `params`.
pub fn train(
    dataset: Vec<PreparedScene>,
    val: Vec<PreparedScene>,
    model: &ModelConfig,
    cfg: &TrainerConfig,
    params: ParamStore,
) -> Result<(ParamStore, Vec<EpochRecord>)> {
    let mut t = Trainer::new(model.clone(), cfg.clone(), params, dataset, val)?;
    let mut records = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        records.push(t.run_epoch()?);
    }
    Ok((t.into_store(), records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::pair_forward;
    use crate::backbone::BackboneConfig;
    use crate::diffcore::{gradient_check, softmax_in_place};
    use crate::heads::SlotMotion;
    use crate::scenegen::{generate_scene, SceneSpec};
    use rand::Rng;

    const GRAD_STEP: f64 = 1e-6;
    const GRAD_FLOOR: f64 = 1e-4;

    fn small_model() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                layer_dims: vec![4, 6],
                neighbors: 8,
                ..BackboneConfig::default()
            },
            slots: 3,
            hidden: 8,
            ..ModelConfig::default()
        }
    }

    fn small_spec() -> SceneSpec {
        SceneSpec {
            min_parts: 2,
            max_parts: 2,
            points: 96,
            min_points_per_part: 32,
            ..SceneSpec::default()
        }
    }

    fn prepared(spec: &SceneSpec, model: &ModelConfig, idx: u64) -> PreparedScene {
        PreparedScene::new(generate_scene(spec, idx).unwrap(), &model.backbone).unwrap()
    }

    fn gt_motions(scene: &SceneSample, slots: usize) -> PartMotionSet {
        let group = crate::geom::RotationGroup::shared();
        let mut out = vec![SlotMotion::inactive(); slots];
        for (s, t) in scene.transforms.iter().enumerate() {
            let (bin, _) = group.nearest(&t.rotation);
            let mut distribution = vec![0.0; GROUP_ORDER];
            distribution[bin] = 1.0;
            out[s] = SlotMotion {
                rotation: t.rotation,
                translation: t.translation,
                distribution,
                bin,
                confidence: 1.0,
                active: true,
                ill_conditioned: false,
            };
        }
        PartMotionSet { slots: out }
    }

    fn entries(store: &ParamStore, count: usize, seed: u64) -> Vec<(String, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        (0..count)
            .map(|_| {
                let n = &names[rng.gen_range(0..names.len())];
                let len = store.get(n).unwrap().data().len();
                (n.clone(), rng.gen_range(0..len))
            })
            .collect()
    }

    fn frozen_plan(store: &ParamStore, model: &ModelConfig, ps: &PreparedScene, cfg: &TrainerConfig) -> LossPlan {
        let mut tape = Tape::new();
        let nodes = pair_forward(&mut tape, store, model, &ps.k, &ps.l).unwrap();
        let state = cold_start(&ps.scene).unwrap();
        step_context(&tape, &nodes, &ps.scene, &state, cfg, true, None).unwrap().plan
    }

    fn check_plan(plan: LossPlan, pick: fn(&LossNodes) -> Var) -> f64 {
        let model = small_model();
        let ps = prepared(&small_spec(), &model, 3);
        let store = model.init_params(11).unwrap();
        gradient_check(&store, &entries(&store, 100, 5), GRAD_STEP, GRAD_FLOOR, |tape, s| -> Result<Var> {
            let nodes = pair_forward(tape, s, &model, &ps.k, &ps.l)?;
            let l = loss_on_tape(tape, &nodes, &plan)?;
            Ok(pick(&l))
        })
        .unwrap()
    }

    fn plan_for(cfg: &TrainerConfig) -> LossPlan {
        let model = small_model();
        let ps = prepared(&small_spec(), &model, 3);
        let store = model.init_params(11).unwrap();
        frozen_plan(&store, &model, &ps, cfg)
    }

    #[test]
    fn cold_start_uses_noisy_flow() {
        let mut spec = SceneSpec {
            flow_noise: 0.0,
            outlier_fraction: 0.0,
            ..SceneSpec::default()
        };
        let s = generate_scene(&spec, 0).unwrap();
        let st = cold_start(&s).unwrap();
        assert_eq!(st.tag, FlowTag::Initial);
        assert!(epe3d(&st.flow, &s.flow_clean) < 1e-15);
        assert_eq!(cold_start(&s).unwrap(), st);
        spec.flow_noise = 0.02;
        let s = generate_scene(&spec, 0).unwrap();
        let e = epe3d(&cold_start(&s).unwrap().flow, &s.flow_clean);
        assert!((e - 0.02).abs() < 0.2 * 0.02, "epe {e}");
        let mut bare = s.clone();
        bare.flow_noisy = None;
        assert!(matches!(cold_start(&bare), Err(Error::MissingFlow(_))));
    }

    #[test]
    fn flow_update_limits_and_fixed_point() {
        let s = generate_scene(&SceneSpec::default(), 1).unwrap();
        let mask = SoftMask::from_labels(&s.labels, 8).unwrap();
        let motions = gt_motions(&s, 8);
        let st = cold_start(&s).unwrap();
        let keep = update_flow(&st, &s.points_k, &mask, &motions, 1.0).unwrap();
        assert_eq!(keep.flow, st.flow);
        assert_eq!(keep.tag, FlowTag::Updated);
        let replaced = update_flow(&st, &s.points_k, &mask, &motions, 0.0).unwrap();
        let derived = model_flow(&s.points_k, &mask, &motions);
        assert_eq!(replaced.flow, derived);
        let at_fixed = FlowState {
            flow: derived.clone(),
            tag: FlowTag::Initial,
        };
        for alpha in [0.0, 0.3, 0.9, 1.0] {
            let u = update_flow(&at_fixed, &s.points_k, &mask, &motions, alpha).unwrap();
            for (a, b) in u.flow.iter().zip(&derived) {
                assert!((a - b).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn flow_update_contracts_error() {
        for idx in 0..5 {
            let s = generate_scene(&SceneSpec::default(), idx).unwrap();
            let mask = SoftMask::from_labels(&s.labels, 8).unwrap();
            let motions = gt_motions(&s, 8);
            let st = cold_start(&s).unwrap();
            let before = epe3d(&st.flow, &s.flow_clean);
            let after = epe3d(&update_flow(&st, &s.points_k, &mask, &motions, 0.9).unwrap().flow, &s.flow_clean);
            assert!(after < before);
            assert!((after - 0.9 * before).abs() < 1e-9);
        }
    }

    #[test]
    fn consensus_values() {
        let s = generate_scene(&SceneSpec::default(), 2).unwrap();
        let motions = gt_motions(&s, 4);
        let clean = FlowState {
            flow: s.flow_clean.clone(),
            tag: FlowTag::Initial,
        };
        let b = consensus(&s.points_k, &clean, &motions, 10.0).unwrap();
        for (i, &l) in s.labels.iter().enumerate() {
            assert!((b.get(i, l) - 1.0).abs() < 1e-12);
        }
        let p = PointCloud::new(vec![Vec3::zeros()]).unwrap();
        let st = FlowState {
            flow: vec![Vec3::new(0.1, 0.0, 0.0)],
            tag: FlowTag::Initial,
        };
        let id = PartMotionSet {
            slots: vec![SlotMotion {
                active: true,
                ..SlotMotion::inactive()
            }],
        };
        let b = consensus(&p, &st, &id, 10.0).unwrap();
        assert!((b.item() - (-1.0f64).exp()).abs() < 1e-12);
        let far = FlowState {
            flow: vec![Vec3::new(0.2, 0.0, 0.0)],
            tag: FlowTag::Initial,
        };
        assert!(consensus(&p, &far, &id, 10.0).unwrap().item() < b.item());
    }

    #[test]
    fn losses_vanish_on_exact_inputs() {
        let s = generate_scene(&SceneSpec::default(), 3).unwrap();
        let mask = SoftMask::from_labels(&s.labels, 6).unwrap();
        let clean = FlowState {
            flow: s.flow_clean.clone(),
            tag: FlowTag::Initial,
        };
        let kabsch = fit_multibody(&s.points_k, &clean.flow, &mask).unwrap();
        let beta = consensus(&s.points_k, &clean, &kabsch, 2.0).unwrap();
        let l = segmentation_loss(&s.points_k, &clean, &mask, &kabsch, &beta).unwrap();
        assert!(l.abs() < 1e-12, "{l}");
        let m = motion_loss(&gt_motions(&s, 6), &kabsch).unwrap();
        assert_eq!(m.slots, s.part_count());
        assert!(m.value.abs() < 1e-12);
        // β → 0 removes every term
        let noisy = cold_start(&s).unwrap();
        let zero = Tensor::zeros(s.n_points(), 6);
        assert_eq!(segmentation_loss(&s.points_k, &noisy, &mask, &kabsch, &zero).unwrap(), 0.0);
    }

    #[test]
    fn motion_loss_uniform_and_inactive() {
        let mut a = PartMotionSet {
            slots: vec![SlotMotion::inactive(); 3],
        };
        let mut b = a.clone();
        assert_eq!(motion_loss(&a, &b).unwrap(), MotionLoss { value: 0.0, slots: 0 });
        for s in 0..3 {
            a.slots[s].active = true;
            a.slots[s].distribution = vec![1.0 / 60.0; 60];
            b.slots[s].active = true;
            b.slots[s].bin = 7 * s;
        }
        let m = motion_loss(&a, &b).unwrap();
        assert!((m.value - 60f64.ln()).abs() < 1e-12);
        assert!((60f64.ln() - 4.094).abs() < 1e-3);
    }

    #[test]
    fn supervised_loss_examples() {
        let labels = vec![0, 0, 1, 1, 2, 2, 2];
        let exact = SoftMask::from_labels(&labels, 4).unwrap();
        assert!(supervised_segmentation_loss(&exact, &labels).unwrap().abs() < 1e-9);
        let uniform = SoftMask::new(Tensor::filled(7, 4, 0.25)).unwrap();
        let u = supervised_segmentation_loss(&uniform, &labels).unwrap();
        assert!((u - 4f64.ln()).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tensor::zeros(7, 4);
        for i in 0..7 {
            let row = t.row_mut(i);
            row.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
            softmax_in_place(row);
        }
        let m = SoftMask::new(t).unwrap();
        let base = supervised_segmentation_loss(&m, &labels).unwrap();
        for perm in [[1, 2, 0], [2, 0, 1], [0, 2, 1], [1, 0, 2]] {
            let relabeled: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
            let v = supervised_segmentation_loss(&m, &relabeled).unwrap();
            assert!((v - base).abs() < 1e-12);
        }
    }

    #[test]
    fn segmentation_loss_gradient() {
        let plan = plan_for(&TrainerConfig::default());
        let worst = check_plan(plan, |l| l.seg);
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn motion_loss_gradient() {
        let plan = plan_for(&TrainerConfig::default());
        assert!(!plan.motion_targets.is_empty());
        let worst = check_plan(plan, |l| l.motion.unwrap());
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn total_and_supervised_loss_gradients() {
        let worst = check_plan(plan_for(&TrainerConfig::default()), |l| l.total);
        assert!(worst < 1e-4, "{worst}");
        let sup = TrainerConfig {
            supervised: true,
            ..TrainerConfig::default()
        };
        let worst = check_plan(plan_for(&sup), |l| l.seg);
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn gradient_reaches_parameters_only_through_the_mask() {
        let model = small_model();
        let ps = prepared(&small_spec(), &model, 3);
        let store = model.init_params(11).unwrap();
        let cfg = TrainerConfig {
            motion_weight: 0.0,
            ..TrainerConfig::default()
        };
        let mut tape = Tape::new();
        let nodes = pair_forward(&mut tape, &store, &model, &ps.k, &ps.l).unwrap();
        let state = cold_start(&ps.scene).unwrap();
        let ctx = step_context(&tape, &nodes, &ps.scene, &state, &cfg, true, None).unwrap();
        let l = loss_on_tape(&mut tape, &nodes, &ctx.plan).unwrap();
        let full = tape.backward(l.total).unwrap();
        let via_mask = tape.backward_with(nodes.k.mask, ctx.plan.seg_weights.clone()).unwrap();
        for name in store.names() {
            let a = full.get(name).unwrap();
            let b = via_mask.get(name).unwrap();
            assert!(a.max_abs_diff(b) <= 1e-15 * (1.0 + b.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let model = small_model();
        let spec = small_spec();
        let run = || {
            let scenes: Vec<PreparedScene> = (0..3).map(|i| prepared(&spec, &model, i)).collect();
            let val = vec![prepared(&spec, &model, 9)];
            let cfg = TrainerConfig {
                epochs: 2,
                ..TrainerConfig::default()
            };
            let (store, rec) = train(scenes, val, &model, &cfg, model.init_params(1).unwrap()).unwrap();
            (store.to_json(), rec)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.len(), 2);
        assert!(ra.iter().all(|r| r.seg_loss.is_finite() && r.val_ap.is_some()));
    }

    #[test]
    fn clean_flow_training_stays_consistent() {
        let model = small_model();
        let spec = SceneSpec {
            flow_noise: 0.0,
            outlier_fraction: 0.0,
            ..small_spec()
        };
        let scenes: Vec<PreparedScene> = (0..2).map(|i| prepared(&spec, &model, i)).collect();
        let cfg = TrainerConfig {
            epochs: 1,
            ..TrainerConfig::default()
        };
        let mut t = Trainer::new(model.clone(), cfg, model.init_params(2).unwrap(), scenes, vec![]).unwrap();
        assert_eq!(t.initial_flow_epe(), 0.0);
        let r = t.run_epoch().unwrap();
        assert!(r.seg_loss.is_finite() && r.seg_loss >= 0.0);
        // cold-start epoch: the clean flow is kept
        assert_eq!(r.train_flow_epe, 0.0);
        assert!(t.flows().iter().all(|f| f.tag == FlowTag::Initial));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let model = small_model();
        let spec = small_spec();
        let scenes = || (0..2).map(|i| prepared(&spec, &model, i)).collect::<Vec<_>>();
        let cfg = TrainerConfig {
            epochs: 3,
            ..TrainerConfig::default()
        };
        let mut full = Trainer::new(model.clone(), cfg.clone(), model.init_params(4).unwrap(), scenes(), vec![]).unwrap();
        let mut recs = Vec::new();
        for _ in 0..3 {
            recs.push(full.run_epoch().unwrap());
        }
        let mut first = Trainer::new(model.clone(), cfg.clone(), model.init_params(4).unwrap(), scenes(), vec![]).unwrap();
        first.run_epoch().unwrap();
        first.run_epoch().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let state_path = dir.path().join("state.json");
        first.state().save(&state_path).unwrap();
        let params = ParamStore::from_json(&first.store().to_json()).unwrap();
        let mut second = Trainer::new(model.clone(), cfg, params, scenes(), vec![]).unwrap();
        second.restore(TrainState::load(&state_path).unwrap()).unwrap();
        let r = second.run_epoch().unwrap();
        assert_eq!(r.epoch, 2);
        assert_eq!(r, recs[2]);
        assert_eq!(second.store().to_json(), full.store().to_json());
    }

    #[test]
    fn config_validation() {
        assert!(TrainerConfig::default().validate().is_ok());
        let bad = TrainerConfig {
            flow_decay: 1.5,
            ..TrainerConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainerConfig {
            consensus_temperature: 0.0,
            ..TrainerConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}

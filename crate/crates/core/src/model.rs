//! The full two-head network: backbone, segmentation head, motion head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{features_on_tape, BackboneConfig, PreparedCloud};
use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::geom::Vec3;
use crate::heads::{
    motion_from_logits, motion_logits_on_tape, part_features_on_tape, pool_name, segment_on_tape, PartMotionSet,
    SoftMask, SEG_HIDDEN_BIAS, SEG_HIDDEN_WEIGHT, SEG_OUT_BIAS, SEG_OUT_WEIGHT,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub slots: usize,
    pub hidden: usize,
    pub motion_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            slots: 8,
            hidden: 64,
            motion_temperature: 0.05,
        }
    }
}

fn normal_values(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.slots < 1 {
            return Err(Error::Config("model.slots must be at least 1".into()));
        }
        if self.hidden < 1 {
            return Err(Error::Config("model.hidden must be at least 1".into()));
        }
        if !(self.motion_temperature > 0.0) {
            return Err(Error::Config("model.motion_temperature must be positive".into()));
        }
        Ok(())
    }

    /// Deterministic initialization from `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.backbone.register_params(&mut store, &mut rng)?;
        let dims = &self.backbone.layer_dims;
        for (l, &d) in dims.iter().enumerate() {
            store.register(&pool_name(l), &[d, 1], normal_values(&mut rng, d, 0.1))?;
        }
        let total: usize = dims.iter().sum();
        let h = self.hidden;
        let s = self.slots;
        store.register(
            SEG_HIDDEN_WEIGHT,
            &[total, h],
            normal_values(&mut rng, total * h, 1.0 / (total as f64).sqrt()),
        )?;
        store.register(SEG_HIDDEN_BIAS, &[h], vec![0.0; h])?;
        store.register(SEG_OUT_WEIGHT, &[h, s], normal_values(&mut rng, h * s, 1.0 / (h as f64).sqrt()))?;
        store.register(SEG_OUT_BIAS, &[s], vec![0.0; s])?;
        Ok(store)
    }
}

/// Graph nodes for one frame.
#[derive(Clone, Debug)]
pub struct FrameNodes {
    pub features: Vec<Var>,
    pub logits: Var,
    pub mask: Var,
}

/// Graph nodes for a frame pair.
#[derive(Clone, Debug)]
pub struct PairNodes {
    pub k: FrameNodes,
    pub l: FrameNodes,
    /// `S × 60` relative-rotation logits.
    pub motion_logits: Var,
}

pub fn frame_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    frame: &PreparedCloud,
) -> Result<FrameNodes> {
    let features = features_on_tape(tape, store, &cfg.backbone, frame)?;
    let (logits, mask) = segment_on_tape(tape, store, &features)?;
    Ok(FrameNodes { features, logits, mask })
}

pub fn pair_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    frame_k: &PreparedCloud,
    frame_l: &PreparedCloud,
) -> Result<PairNodes> {
    pair_forward_with(tape, store, cfg, frame_k, frame_l, true)
}

/// With `mask_gradient` false the part pooling sees the masks as constants,
/// so the motion logits do not differentiate into the segmentation.
pub fn pair_forward_with(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    frame_k: &PreparedCloud,
    frame_l: &PreparedCloud,
    mask_gradient: bool,
) -> Result<PairNodes> {
    let k = frame_forward(tape, store, cfg, frame_k)?;
    let l = frame_forward(tape, store, cfg, frame_l)?;
    let last_k = *k.features.last().expect("at least one layer");
    let last_l = *l.features.last().expect("at least one layer");
    let (mk, ml) = if mask_gradient {
        (k.mask, l.mask)
    } else {
        let mk = tape.value(k.mask).clone();
        let ml = tape.value(l.mask).clone();
        (tape.constant(mk), tape.constant(ml))
    };
    let vk = part_features_on_tape(tape, last_k, mk)?;
    let vl = part_features_on_tape(tape, last_l, ml)?;
    let motion_logits = motion_logits_on_tape(tape, vk, vl, cfg.motion_temperature)?;
    Ok(PairNodes { k, l, motion_logits })
}

/// Inference output for a frame pair.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub mask_k: SoftMask,
    pub mask_l: SoftMask,
    pub motion_logits: Tensor,
    pub motions: PartMotionSet,
}

/// Runs the network on frozen parameters. `flow` supplies the second-frame
/// correspondences used for the translation estimate.
pub fn predict(
    store: &ParamStore,
    cfg: &ModelConfig,
    frame_k: &PreparedCloud,
    frame_l: &PreparedCloud,
    flow: &[Vec3],
) -> Result<Prediction> {
    let mut tape = Tape::new();
    let nodes = pair_forward(&mut tape, store, cfg, frame_k, frame_l)?;
    let mask_k = SoftMask::new(tape.value(nodes.k.mask).clone())?;
    let mask_l = SoftMask::new(tape.value(nodes.l.mask).clone())?;
    let motion_logits = tape.value(nodes.motion_logits).clone();
    let motions = motion_from_logits(&motion_logits, &frame_k.cloud, flow, &mask_k)?;
    Ok(Prediction {
        mask_k,
        mask_l,
        motion_logits,
        motions,
    })
}

//! Scene-level inference and evaluation shared by training validation and
//! the command-line evaluator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, PreparedCloud};
use crate::diffcore::ParamStore;
use crate::geom::{PointCloud, Vec3};
use crate::heads::{PartMotionSet, SlotMotion, SoftMask};
use crate::metrics::{predicted_instances, segmentation_scores_from_labels, motion_scores, SegmentationEval};
use crate::model::{predict, ModelConfig};
use crate::scenegen::SceneSample;
use crate::{Error, Result};

/// A scene with both frames' neighborhoods precomputed.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub scene: SceneSample,
    pub k: PreparedCloud,
    pub l: PreparedCloud,
}

impl PreparedScene {
    pub fn new(scene: SceneSample, cfg: &BackboneConfig) -> Result<Self> {
        let k = PreparedCloud::new(scene.points_k.clone(), cfg)?;
        let l = PreparedCloud::new(scene.points_l.clone(), cfg)?;
        Ok(Self { scene, k, l })
    }

    pub fn noisy_flow(&self) -> Result<&[Vec3]> {
        self.scene
            .flow_noisy
            .as_deref()
            .ok_or_else(|| Error::MissingFlow(self.scene.id.clone()))
    }
}

pub fn prepare_all(scenes: Vec<SceneSample>, cfg: &BackboneConfig) -> Result<Vec<PreparedScene>> {
    scenes.into_par_iter().map(|s| PreparedScene::new(s, cfg)).collect()
}

/// Flow implied by per-slot motions under a soft mask:
/// `Σ_s m_is·(R̂ˢ p_i + t̂ˢ) − p_i`.
pub fn model_flow(pk: &PointCloud, mask: &SoftMask, motions: &PartMotionSet) -> Vec<Vec3> {
    pk.points()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut q = Vec3::zeros();
            for (s, m) in motions.slots.iter().enumerate() {
                q += mask.get(i, s) * (m.rotation * p + m.translation);
            }
            q - p
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub scene_id: String,
    #[serde(flatten)]
    pub segmentation: SegmentationEval,
    pub epe3d: f64,
    pub angular_error: Option<f64>,
    pub translation_error: Option<f64>,
}

fn score(scene: &SceneSample, mask: &SoftMask, motions: &PartMotionSet, flow: &[Vec3]) -> Result<SceneEval> {
    let (labels, inst) = predicted_instances(mask);
    let (segmentation, matches) = segmentation_scores_from_labels(&labels, &inst, &scene.labels)?;
    let slots: Vec<usize> = inst.iter().map(|i| i.label).collect();
    let motion = motion_scores(flow, &scene.flow_clean, motions, &slots, &matches, &scene.transforms)?;
    Ok(SceneEval {
        scene_id: scene.id.clone(),
        segmentation,
        epe3d: motion.epe3d,
        angular_error: motion.angular_error,
        translation_error: motion.translation_error,
    })
}

/// Model prediction on one scene. Translations use the scene's noisy flow
/// as correspondences; the reported flow is the one implied by the
/// predicted masks and motions.
pub fn evaluate_scene(store: &ParamStore, cfg: &ModelConfig, ps: &PreparedScene) -> Result<SceneEval> {
    let flow = ps.noisy_flow()?;
    let pred = predict(store, cfg, &ps.k, &ps.l, flow)?;
    let derived = model_flow(&ps.scene.points_k, &pred.mask_k, &pred.motions);
    score(&ps.scene, &pred.mask_k, &pred.motions, &derived)
}

/// Scores the ground truth itself (masks, motions and clean flow); every
/// segmentation score is 1 and every error 0.
pub fn evaluate_oracle(scene: &SceneSample, slots: usize) -> Result<SceneEval> {
    let mask = SoftMask::from_labels(&scene.labels, slots.max(scene.part_count()))?;
    let mut motion_slots = vec![SlotMotion::inactive(); mask.slots()];
    for (s, t) in scene.transforms.iter().enumerate() {
        motion_slots[s] = SlotMotion {
            rotation: t.rotation,
            translation: t.translation,
            active: true,
            confidence: 1.0,
            ..SlotMotion::inactive()
        };
    }
    let motions = PartMotionSet { slots: motion_slots };
    let flow = model_flow(&scene.points_k, &mask, &motions);
    score(scene, &mask, &motions, &flow)
}

pub fn evaluate_all(store: &ParamStore, cfg: &ModelConfig, scenes: &[PreparedScene]) -> Result<Vec<SceneEval>> {
    scenes.par_iter().map(|ps| evaluate_scene(store, cfg, ps)).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateEval {
    pub scenes: usize,
    #[serde(flatten)]
    pub segmentation: SegmentationEval,
    pub epe3d: f64,
    /// Mean over scenes that have at least one matched part.
    pub angular_error: Option<f64>,
    pub translation_error: Option<f64>,
}

pub fn aggregate(rows: &[SceneEval]) -> AggregateEval {
    let n = rows.len();
    if n == 0 {
        return AggregateEval::default();
    }
    let mean = |f: &dyn Fn(&SceneEval) -> f64| rows.iter().map(f).sum::<f64>() / n as f64;
    let mean_opt = |f: &dyn Fn(&SceneEval) -> Option<f64>| {
        let xs: Vec<f64> = rows.iter().filter_map(f).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    };
    AggregateEval {
        scenes: n,
        segmentation: SegmentationEval {
            ap: mean(&|r| r.segmentation.ap),
            pq: mean(&|r| r.segmentation.pq),
            f1: mean(&|r| r.segmentation.f1),
            precision: mean(&|r| r.segmentation.precision),
            recall: mean(&|r| r.segmentation.recall),
            miou: mean(&|r| r.segmentation.miou),
            ri: mean(&|r| r.segmentation.ri),
        },
        epe3d: mean(&|r| r.epe3d),
        angular_error: mean_opt(&|r| r.angular_error),
        translation_error: mean_opt(&|r| r.translation_error),
    }
}

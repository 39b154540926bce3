//! Point-level invariant segmentation head and part-level equivariant
//! motion head.
//!
//! The `*_on_tape` functions record the differentiable graph used during
//! training; the plain functions evaluate the same computation on frozen
//! parameters and return typed results.

use crate::backbone::{EquivariantFeature, LEAKY_SLOPE};
use crate::diffcore::{softmax_in_place, ParamStore, Tape, Tensor, Var};
use crate::geom::{Mat3, PointCloud, RigidTransform, RotationGroup, Vec3, GROUP_ORDER};
use crate::{Error, Result};

/// A slot whose mask mass falls below this is inactive.
pub const MIN_SLOT_MASS: f64 = 1e-6;

const NORM_EPS: f64 = 1e-12;

/// Row-stochastic `N × S` point-to-slot assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    values: Tensor,
}

impl SoftMask {
    pub fn new(values: Tensor) -> Result<Self> {
        for r in 0..values.rows() {
            let row = values.row(r);
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Shape(format!("mask row {r} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Shape(format!("mask row {r} sums to {s}")));
            }
        }
        Ok(Self { values })
    }

    /// One-hot mask from per-point labels.
    pub fn from_labels(labels: &[usize], slots: usize) -> Result<Self> {
        let mut t = Tensor::zeros(labels.len(), slots);
        for (i, &l) in labels.iter().enumerate() {
            if l >= slots {
                return Err(Error::Shape(format!("label {l} at point {i} exceeds {slots} slots")));
            }
            t.set(i, l, 1.0);
        }
        Ok(Self { values: t })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn n_points(&self) -> usize {
        self.values.rows()
    }

    pub fn slots(&self) -> usize {
        self.values.cols()
    }

    pub fn get(&self, i: usize, s: usize) -> f64 {
        self.values.get(i, s)
    }

    pub fn column(&self, s: usize) -> Vec<f64> {
        (0..self.n_points()).map(|i| self.get(i, s)).collect()
    }

    pub fn mass(&self, s: usize) -> f64 {
        (0..self.n_points()).map(|i| self.get(i, s)).sum()
    }

    /// Column `s` of the result is column `perm[s]` of `self`.
    pub fn permute_slots(&self, perm: &[usize]) -> SoftMask {
        let mut t = Tensor::zeros(self.n_points(), perm.len());
        for i in 0..self.n_points() {
            for (s, &p) in perm.iter().enumerate() {
                t.set(i, s, self.get(i, p));
            }
        }
        SoftMask { values: t }
    }
}

/// One slot's rigid motion estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotMotion {
    pub rotation: Mat3,
    pub translation: Vec3,
    /// Probability over the 60 relative-rotation bins.
    pub distribution: Vec<f64>,
    pub bin: usize,
    pub confidence: f64,
    pub active: bool,
    /// Set when the alignment problem did not constrain every rotation axis.
    pub ill_conditioned: bool,
}

impl SlotMotion {
    pub fn inactive() -> Self {
        let mut distribution = vec![0.0; GROUP_ORDER];
        distribution[0] = 1.0;
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            distribution,
            bin: 0,
            confidence: 0.0,
            active: false,
            ill_conditioned: false,
        }
    }

    pub fn transform(&self) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation,
            translation: self.translation,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartMotionSet {
    pub slots: Vec<SlotMotion>,
}

impl PartMotionSet {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.slots.iter().filter(|s| s.active).count()
    }

    pub fn permute_slots(&self, perm: &[usize]) -> PartMotionSet {
        PartMotionSet {
            slots: perm.iter().map(|&p| self.slots[p].clone()).collect(),
        }
    }
}

/// Masked, max-pooled part features `Ṽ`: `S × 60 × D`, stored as
/// `(S·60) × D` with row `s·60 + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartFeatures {
    pub values: Tensor,
    pub slots: usize,
}

impl PartFeatures {
    pub fn block(&self, s: usize, j: usize) -> &[f64] {
        self.values.row(s * GROUP_ORDER + j)
    }
}

/// Per-slot rotation correlation `C[j1, j2, s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationFeature {
    /// `slots × 60 × 60`, slot-major.
    values: Vec<f64>,
    slots: usize,
}

impl CorrelationFeature {
    pub fn get(&self, j1: usize, j2: usize, s: usize) -> f64 {
        self.values[(s * GROUP_ORDER + j1) * GROUP_ORDER + j2]
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    /// `z_r = Σ_j C[j, g_r·g_j, s]` for every slot: `slots × 60`.
    pub fn rotation_scores(&self) -> Tensor {
        let group = RotationGroup::shared();
        let mut z = Tensor::zeros(self.slots, GROUP_ORDER);
        for s in 0..self.slots {
            for r in 0..GROUP_ORDER {
                let v = (0..GROUP_ORDER).map(|j| self.get(j, group.product(r, j), s)).sum();
                z.set(s, r, v);
            }
        }
        z
    }
}

pub fn pool_name(layer: usize) -> String {
    format!("heads.pool{layer}.weight")
}

pub const SEG_HIDDEN_WEIGHT: &str = "heads.seg_hidden.weight";
pub const SEG_HIDDEN_BIAS: &str = "heads.seg_hidden.bias";
pub const SEG_OUT_WEIGHT: &str = "heads.seg_out.weight";
pub const SEG_OUT_BIAS: &str = "heads.seg_out.bias";

/// `u_i = Σ_j softmax_j(θ(p_i, g_j)·v) θ(p_i, g_j)` on the tape: `N × D`.
pub fn invariant_pool_on_tape(tape: &mut Tape, store: &ParamStore, f: Var, layer: usize) -> Result<Var> {
    let (rows, _) = tape.shape(f);
    let n = rows / GROUP_ORDER;
    let v = tape.param(store, &pool_name(layer))?;
    let logits = tape.matmul(f, v)?;
    let logits = tape.reshape(logits, n, GROUP_ORDER)?;
    let w = tape.softmax_rows(logits);
    let w = tape.reshape(w, rows, 1)?;
    let weighted = tape.mul_col(f, w)?;
    Ok(tape.group_sum_rows(weighted, GROUP_ORDER)?)
}

/// Segmentation head on the tape; returns `(logits, mask)`, both `N × S`.
pub fn segment_on_tape(tape: &mut Tape, store: &ParamStore, features: &[Var]) -> Result<(Var, Var)> {
    let pooled = features
        .iter()
        .enumerate()
        .map(|(l, &f)| invariant_pool_on_tape(tape, store, f, l))
        .collect::<Result<Vec<_>>>()?;
    let u = tape.concat_cols(&pooled)?;
    let w1 = tape.param(store, SEG_HIDDEN_WEIGHT)?;
    let b1 = tape.param(store, SEG_HIDDEN_BIAS)?;
    let h = tape.matmul(u, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.leaky_relu(h, LEAKY_SLOPE);
    let w2 = tape.param(store, SEG_OUT_WEIGHT)?;
    let b2 = tape.param(store, SEG_OUT_BIAS)?;
    let logits = tape.matmul(h, w2)?;
    let logits = tape.add_row(logits, b2)?;
    let mask = tape.softmax_rows(logits);
    Ok((logits, mask))
}

/// `Ṽ[s, j, :] = max_i m[i, s]·θ(p_i, g_j)`: `S × (60·D)`.
pub fn part_features_on_tape(tape: &mut Tape, f: Var, mask: Var) -> Result<Var> {
    let (rows, d) = tape.shape(f);
    let n = rows / GROUP_ORDER;
    let flat = tape.reshape(f, n, GROUP_ORDER * d)?;
    Ok(tape.masked_max_rows(flat, mask)?)
}

fn slot_norms(tape: &mut Tape, v: Var) -> Result<Var> {
    let (_, cols) = tape.shape(v);
    let sq = tape.mul(v, v)?;
    let ones = tape.constant(Tensor::filled(cols, 1, 1.0));
    let ss = tape.matmul(sq, ones)?;
    let eps = tape.constant(Tensor::filled(tape.shape(ss).0, 1, NORM_EPS));
    let ss = tape.add(ss, eps)?;
    Ok(tape.sqrt(ss))
}

/// Correlation indices for the relative-rotation reduction: entry
/// `(s·60 + r)·60 + j` points at `C_s[j, g_r·g_j]` inside the full
/// `(S·60) × (S·60)` product.
fn rotation_gather(slots: usize) -> std::sync::Arc<[usize]> {
    let group = RotationGroup::shared();
    let width = slots * GROUP_ORDER;
    let mut idx = Vec::with_capacity(slots * GROUP_ORDER * GROUP_ORDER);
    for s in 0..slots {
        for r in 0..GROUP_ORDER {
            for j in 0..GROUP_ORDER {
                idx.push((s * GROUP_ORDER + j) * width + s * GROUP_ORDER + group.product(r, j));
            }
        }
    }
    idx.into()
}

/// Relative-rotation logits `S × 60` from the two frames' part features,
/// each slot normalized by `‖Ṽ_k‖·‖Ṽ_l‖` and divided by `temperature`.
pub fn motion_logits_on_tape(tape: &mut Tape, vk: Var, vl: Var, temperature: f64) -> Result<Var> {
    let (slots, width) = tape.shape(vk);
    if tape.shape(vl) != (slots, width) {
        return Err(Error::Shape(format!("part features {:?} vs {:?}", tape.shape(vk), tape.shape(vl))));
    }
    let d = width / GROUP_ORDER;
    let a = tape.reshape(vk, slots * GROUP_ORDER, d)?;
    let b = tape.reshape(vl, slots * GROUP_ORDER, d)?;
    let full = tape.matmul_t(a, b)?;
    let cells = slots * GROUP_ORDER * slots * GROUP_ORDER;
    let full = tape.reshape(full, cells, 1)?;
    let z = tape.gather_rows(full, rotation_gather(slots), GROUP_ORDER, 1.0)?;
    let z = tape.reshape(z, slots, GROUP_ORDER)?;
    let nk = slot_norms(tape, vk)?;
    let nl = slot_norms(tape, vl)?;
    let denom = tape.mul(nk, nl)?;
    let inv = tape.recip(denom);
    let z = tape.mul_col(z, inv)?;
    Ok(tape.scale(z, 1.0 / temperature))
}

pub fn invariant_pool(f: &EquivariantFeature, store: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(f.values.clone());
    let u = invariant_pool_on_tape(&mut tape, store, x, f.layer)?;
    Ok(tape.value(u).clone())
}

pub fn segment(features: &[EquivariantFeature], store: &ParamStore) -> Result<SoftMask> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = features.iter().map(|f| tape.constant(f.values.clone())).collect();
    let (_, mask) = segment_on_tape(&mut tape, store, &vars)?;
    SoftMask::new(tape.value(mask).clone())
}

pub fn part_features(f: &EquivariantFeature, mask: &SoftMask) -> Result<PartFeatures> {
    if mask.n_points() != f.n_points {
        return Err(Error::Shape(format!("{} feature points vs {} mask rows", f.n_points, mask.n_points())));
    }
    let mut tape = Tape::new();
    let x = tape.constant(f.values.clone());
    let m = tape.constant(mask.values().clone());
    let v = part_features_on_tape(&mut tape, x, m)?;
    let slots = mask.slots();
    Ok(PartFeatures {
        values: tape.value(v).clone().reshaped(slots * GROUP_ORDER, f.dim())?,
        slots,
    })
}

pub fn correlate(vk: &PartFeatures, vl: &PartFeatures) -> Result<CorrelationFeature> {
    if vk.values.shape() != vl.values.shape() {
        return Err(Error::Shape(format!("part features {:?} vs {:?}", vk.values.shape(), vl.values.shape())));
    }
    let slots = vk.slots;
    let mut values = Vec::with_capacity(slots * GROUP_ORDER * GROUP_ORDER);
    for s in 0..slots {
        for j1 in 0..GROUP_ORDER {
            let a = vk.block(s, j1);
            for j2 in 0..GROUP_ORDER {
                values.push(a.iter().zip(vl.block(s, j2)).map(|(x, y)| x * y).sum());
            }
        }
    }
    Ok(CorrelationFeature { values, slots })
}

/// Mask-weighted centroid of `points` under column `s`, with its mass.
pub fn weighted_centroid(points: &[Vec3], mask: &SoftMask, s: usize) -> (Vec3, f64) {
    let mut c = Vec3::zeros();
    let mut w = 0.0;
    for (i, p) in points.iter().enumerate() {
        let m = mask.get(i, s);
        c += p * m;
        w += m;
    }
    if w > 0.0 {
        c /= w;
    }
    (c, w)
}

/// Turns per-slot rotation logits into rigid estimates: argmax bin for the
/// rotation, centroid difference for the translation.
pub fn motion_from_logits(logits: &Tensor, pk: &PointCloud, flow: &[Vec3], mk: &SoftMask) -> Result<PartMotionSet> {
    if logits.rows() != mk.slots() || logits.cols() != GROUP_ORDER {
        return Err(Error::Shape(format!("logits {:?} for {} slots", logits.shape(), mk.slots())));
    }
    if flow.len() != pk.len() || mk.n_points() != pk.len() {
        return Err(Error::Shape(format!(
            "{} points, {} flow vectors, {} mask rows",
            pk.len(),
            flow.len(),
            mk.n_points()
        )));
    }
    let group = RotationGroup::shared();
    let moved: Vec<Vec3> = pk.points().iter().zip(flow).map(|(p, d)| p + d).collect();
    let mut slots = Vec::with_capacity(mk.slots());
    for s in 0..mk.slots() {
        let (ck, mass) = weighted_centroid(pk.points(), mk, s);
        if mass < MIN_SLOT_MASS {
            slots.push(SlotMotion::inactive());
            continue;
        }
        let (cl, _) = weighted_centroid(&moved, mk, s);
        let mut distribution = logits.row(s).to_vec();
        softmax_in_place(&mut distribution);
        let mut bin = 0;
        for (r, &p) in distribution.iter().enumerate() {
            if p > distribution[bin] {
                bin = r;
            }
        }
        let rotation = *group.element(bin);
        slots.push(SlotMotion {
            rotation,
            translation: cl - rotation * ck,
            confidence: distribution[bin],
            distribution,
            bin,
            active: true,
            ill_conditioned: false,
        });
    }
    Ok(PartMotionSet { slots })
}

pub fn estimate_motion(
    c: &CorrelationFeature,
    pk: &PointCloud,
    flow: &[Vec3],
    mk: &SoftMask,
    temperature: f64,
) -> Result<PartMotionSet> {
    if !(temperature > 0.0) {
        return Err(Error::Config("motion temperature must be positive".into()));
    }
    let mut z = c.rotation_scores();
    z.data_mut().iter_mut().for_each(|v| *v /= temperature);
    motion_from_logits(&z, pk, flow, mk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{extract_features, rotate_feature, BackboneConfig};
    use crate::geom::{apply_transform, geodesic_angle};
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| Vec3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)))
                .collect(),
        )
        .unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng, n: usize, s: usize) -> SoftMask {
        let mut t = Tensor::zeros(n, s);
        for i in 0..n {
            let row = t.row_mut(i);
            row.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
            softmax_in_place(row);
        }
        SoftMask::new(t).unwrap()
    }

    fn setup(seed: u64) -> (ModelConfig, ParamStore) {
        let cfg = ModelConfig::default();
        let store = cfg.init_params(seed).unwrap();
        (cfg, store)
    }

    #[test]
    fn pool_of_constant_features_is_that_constant() {
        let (_, store) = setup(0);
        let d = 16;
        let mut t = Tensor::zeros(3 * 60, d);
        for i in 0..3 {
            for j in 0..60 {
                for c in 0..d {
                    t.set(i * 60 + j, c, (i * d + c) as f64 * 0.1);
                }
            }
        }
        let f = EquivariantFeature { values: t, n_points: 3, layer: 0 };
        let u = invariant_pool(&f, &store).unwrap();
        assert_eq!(u.shape(), (3, d));
        for i in 0..3 {
            for c in 0..d {
                assert!((u.get(i, c) - (i * d + c) as f64 * 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_is_invariant_to_group_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, store) = setup(1);
        let t = Tensor::new(5 * 60, 32, (0..5 * 60 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let f = EquivariantFeature { values: t, n_points: 5, layer: 1 };
        let base = invariant_pool(&f, &store).unwrap();
        for g in 0..60 {
            let u = invariant_pool(&rotate_feature(&f, g), &store).unwrap();
            assert!(u.max_abs_diff(&base) < 1e-9);
        }
    }

    #[test]
    fn segmentation_is_rotation_and_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cfg, store) = setup(2);
        let group = RotationGroup::shared();
        let x = random_cloud(&mut rng, 64);
        let base = segment(&extract_features(&x, &cfg.backbone, &store).unwrap(), &store).unwrap();
        for i in 0..64 {
            let s: f64 = base.values().row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        for g in [3, 30, 59] {
            let t = RigidTransform::new(*group.element(g), Vec3::zeros()).unwrap();
            let xr = apply_transform(&t, &x);
            let m = segment(&extract_features(&xr, &cfg.backbone, &store).unwrap(), &store).unwrap();
            assert!(m.values().max_abs_diff(base.values()) < 1e-9);
        }
        let xt = x.translated(&Vec3::new(1.0, 2.0, -3.0));
        let m = segment(&extract_features(&xt, &cfg.backbone, &store).unwrap(), &store).unwrap();
        assert!(m.values().max_abs_diff(base.values()) < 1e-9);
    }

    #[test]
    fn one_hot_mask_zeroes_other_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::new(4 * 60, 3, (0..4 * 60 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let f = EquivariantFeature { values: t, n_points: 4, layer: 0 };
        let mask = SoftMask::from_labels(&[0, 0, 0, 0], 3).unwrap();
        let v = part_features(&f, &mask).unwrap();
        for s in 1..3 {
            for j in 0..60 {
                assert!(v.block(s, j).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn part_features_permutation_invariant_and_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (cfg, store) = setup(4);
        let group = RotationGroup::shared();
        let x = random_cloud(&mut rng, 48);
        let mask = random_mask(&mut rng, 48, 8);
        let f = extract_features(&x, &cfg.backbone, &store).unwrap().pop().unwrap();
        let v = part_features(&f, &mask).unwrap();

        let perm: Vec<usize> = (0..48).rev().collect();
        let fp = extract_features(&x.permuted(&perm), &cfg.backbone, &store).unwrap().pop().unwrap();
        let mut mp = Tensor::zeros(48, 8);
        for (new_i, &old_i) in perm.iter().enumerate() {
            mp.row_mut(new_i).copy_from_slice(mask.values().row(old_i));
        }
        let vp = part_features(&fp, &SoftMask::new(mp).unwrap()).unwrap();
        assert!(vp.values.max_abs_diff(&v.values) < 1e-12);

        let g = 17;
        let t = RigidTransform::new(*group.element(g), Vec3::zeros()).unwrap();
        let fr = extract_features(&apply_transform(&t, &x), &cfg.backbone, &store).unwrap().pop().unwrap();
        let vr = part_features(&fr, &mask).unwrap();
        let ginv = group.inverse(g);
        for s in 0..8 {
            for j in 0..60 {
                let want = v.block(s, group.product(ginv, j));
                assert!(vr.block(s, j).iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-9));
            }
        }
    }

    #[test]
    fn self_correlation_diagonal_is_squared_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Tensor::new(2 * 60, 4, (0..480).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let v = PartFeatures { values: t, slots: 2 };
        let c = correlate(&v, &v).unwrap();
        for s in 0..2 {
            for j in 0..60 {
                let n2: f64 = v.block(s, j).iter().map(|x| x * x).sum();
                assert!((c.get(j, j, s) - n2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shifted_correlation_argmax_follows_cayley() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let group = RotationGroup::shared();
        // Unit-norm blocks make ⟨a, b⟩ maximal exactly at b = a.
        let mut t = Tensor::new(60, 8, (0..480).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        for j in 0..60 {
            let n = t.row(j).iter().map(|x| x * x).sum::<f64>().sqrt();
            t.row_mut(j).iter_mut().for_each(|x| *x /= n);
        }
        let vk = PartFeatures { values: t, slots: 1 };
        let m = 11;
        let minv = group.inverse(m);
        let mut shifted = Tensor::zeros(60, 8);
        for j in 0..60 {
            shifted.row_mut(j).copy_from_slice(vk.block(0, group.product(minv, j)));
        }
        let vl = PartFeatures { values: shifted, slots: 1 };
        let c = correlate(&vk, &vl).unwrap();
        for j in 0..60 {
            let best = (0..60).max_by(|&a, &b| c.get(j, a, 0).total_cmp(&c.get(j, b, 0))).unwrap();
            assert_eq!(best, group.product(m, j));
        }
    }

    #[test]
    fn group_rotated_pair_recovers_bin() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (cfg, store) = setup(7);
        let group = RotationGroup::shared();
        let x = random_cloud(&mut rng, 64);
        let mask = SoftMask::from_labels(&vec![0; 64], 8).unwrap();
        let fk = extract_features(&x, &cfg.backbone, &store).unwrap().pop().unwrap();
        for m in [0, 5, 42] {
            let t = RigidTransform::new(*group.element(m), Vec3::new(0.1, 0.0, -0.2)).unwrap();
            let xl = apply_transform(&t, &x);
            let fl = extract_features(&xl, &cfg.backbone, &store).unwrap().pop().unwrap();
            let c = correlate(&part_features(&fk, &mask).unwrap(), &part_features(&fl, &mask).unwrap()).unwrap();
            let flow: Vec<Vec3> = x.points().iter().zip(xl.points()).map(|(a, b)| b - a).collect();
            let motions = estimate_motion(&c, &x, &flow, &mask, 0.05).unwrap();
            assert_eq!(motions.slots[0].bin, m);
            assert_eq!(geodesic_angle(&motions.slots[0].rotation, group.element(m)), 0.0);
            assert!((motions.slots[0].translation - t.translation).norm() < 1e-9);
            assert!(!motions.slots[1].active);
        }
    }

    #[test]
    fn identical_frames_zero_flow_gives_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (cfg, store) = setup(8);
        let x = random_cloud(&mut rng, 40);
        let mask = random_mask(&mut rng, 40, 8);
        let f = extract_features(&x, &cfg.backbone, &store).unwrap().pop().unwrap();
        let v = part_features(&f, &mask).unwrap();
        let c = correlate(&v, &v).unwrap();
        let motions = estimate_motion(&c, &x, &vec![Vec3::zeros(); 40], &mask, 0.05).unwrap();
        for s in &motions.slots {
            assert_eq!(s.bin, 0);
            assert!(s.translation.norm() < 1e-12);
            assert!((s.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn slot_permutation_permutes_motions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_cloud(&mut rng, 30);
        let mask = random_mask(&mut rng, 30, 4);
        let flow: Vec<Vec3> = (0..30).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let logits = Tensor::new(4, 60, (0..240).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let perm = [2, 0, 3, 1];
        let mut lp = Tensor::zeros(4, 60);
        for (s, &p) in perm.iter().enumerate() {
            lp.row_mut(s).copy_from_slice(logits.row(p));
        }
        let a = motion_from_logits(&logits, &x, &flow, &mask).unwrap();
        let b = motion_from_logits(&lp, &x, &flow, &mask.permute_slots(&perm)).unwrap();
        assert_eq!(a.permute_slots(&perm), b);
    }

    #[test]
    fn tape_logits_match_plain_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = 3;
        let d = 5;
        let vk = Tensor::new(s, 60 * d, (0..s * 60 * d).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let vl = Tensor::new(s, 60 * d, (0..s * 60 * d).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(vk.clone());
        let b = tape.constant(vl.clone());
        let z = motion_logits_on_tape(&mut tape, a, b, 1.0).unwrap();
        let pk = PartFeatures { values: vk.clone().reshaped(s * 60, d).unwrap(), slots: s };
        let pl = PartFeatures { values: vl.clone().reshaped(s * 60, d).unwrap(), slots: s };
        let want = correlate(&pk, &pl).unwrap().rotation_scores();
        for slot in 0..s {
            let nk = vk.row(slot).iter().map(|x| x * x).sum::<f64>().sqrt();
            let nl = vl.row(slot).iter().map(|x| x * x).sum::<f64>().sqrt();
            for r in 0..60 {
                assert!((tape.value(z).get(slot, r) - want.get(slot, r) / (nk * nl)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn backbone_defaults_are_used() {
        assert_eq!(ModelConfig::default().backbone, BackboneConfig::default());
    }
}

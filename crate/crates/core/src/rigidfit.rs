//! Weighted rigid alignment and per-slot multi-body fitting.

use nalgebra::SVD;

use crate::diffcore::Tensor;
use crate::geom::{Mat3, PointCloud, RigidTransform, RotationGroup, Vec3, GROUP_ORDER};
use crate::heads::{PartMotionSet, SlotMotion, SoftMask};
use crate::{Error, Result};

/// Weight sums below this make the problem degenerate.
pub const MIN_WEIGHT_SUM: f64 = 1e-6;

/// Relative singular-value floor below which an axis counts as unconstrained.
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedCorrespondence {
    source: Vec<Vec3>,
    target: Vec<Vec3>,
    weights: Vec<f64>,
}

impl WeightedCorrespondence {
    pub fn new(source: Vec<Vec3>, target: Vec<Vec3>, weights: Vec<f64>) -> Result<Self> {
        if source.len() != target.len() || source.len() != weights.len() {
            return Err(Error::Shape(format!(
                "{} sources, {} targets, {} weights",
                source.len(),
                target.len(),
                weights.len()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Shape(format!("weight {i} is negative or non-finite")));
        }
        Ok(Self { source, target, weights })
    }

    pub fn uniform(source: Vec<Vec3>, target: Vec<Vec3>) -> Result<Self> {
        let n = source.len();
        Self::new(source, target, vec![1.0; n])
    }

    pub fn source(&self) -> &[Vec3] {
        &self.source
    }

    pub fn target(&self) -> &[Vec3] {
        &self.target
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `Σ w_i ‖R s_i + t − t_i‖²`
    pub fn cost(&self, t: &RigidTransform) -> f64 {
        self.source
            .iter()
            .zip(&self.target)
            .zip(&self.weights)
            .map(|((s, q), w)| w * (t.apply(s) - q).norm_squared())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KabschFit {
    pub transform: RigidTransform,
    /// Weight sum below [`MIN_WEIGHT_SUM`]; the transform is the identity.
    pub degenerate: bool,
    /// Cross-covariance rank below 2; the twist about the degenerate axis
    /// was fixed to zero.
    pub ill_conditioned: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KabschOptions {
    /// Disabling this is only for fault-injection checks.
    pub reflection_fix: bool,
}

impl Default for KabschOptions {
    fn default() -> Self {
        Self { reflection_fix: true }
    }
}

pub fn weighted_kabsch(c: &WeightedCorrespondence) -> KabschFit {
    weighted_kabsch_with(c, KabschOptions::default())
}

/// Smallest rotation taking unit vector `a` onto unit vector `b`.
fn align_vectors(a: &Vec3, b: &Vec3) -> Mat3 {
    let v = a.cross(b);
    let c = a.dot(b);
    let s = v.norm();
    if s < 1e-12 {
        if c > 0.0 {
            return Mat3::identity();
        }
        // Antiparallel: half-turn about any axis perpendicular to a.
        let helper = if a.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let axis = a.cross(&helper).normalize();
        return 2.0 * axis * axis.transpose() - Mat3::identity();
    }
    let k = v / s;
    let kx = Mat3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Mat3::identity() + s * kx + (1.0 - c) * kx * kx
}

pub fn weighted_kabsch_with(c: &WeightedCorrespondence, opts: KabschOptions) -> KabschFit {
    let mut wsum = 0.0;
    let mut cs = Vec3::zeros();
    let mut ct = Vec3::zeros();
    for ((s, t), &w) in c.source.iter().zip(&c.target).zip(&c.weights) {
        if w == 0.0 {
            continue;
        }
        wsum += w;
        cs += w * s;
        ct += w * t;
    }
    if wsum < MIN_WEIGHT_SUM {
        return KabschFit {
            transform: RigidTransform::identity(),
            degenerate: true,
            ill_conditioned: false,
        };
    }
    cs /= wsum;
    ct /= wsum;
    let mut h = Mat3::zeros();
    let mut spread = 0.0;
    for ((s, t), &w) in c.source.iter().zip(&c.target).zip(&c.weights) {
        if w == 0.0 {
            continue;
        }
        let (a, b) = (s - cs, t - ct);
        h += w * a * b.transpose();
        spread += w * a.norm() * b.norm();
    }
    let svd = SVD::new(h, true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let (s1, s2) = (sv[order[0]], sv[order[1]]);

    let (rotation, ill_conditioned) = if spread == 0.0 || s1 <= RANK_TOL * spread {
        (Mat3::identity(), true)
    } else if s2 <= RANK_TOL * s1 {
        let a = u.column(order[0]).into_owned();
        let b = v_t.row(order[0]).transpose();
        (align_vectors(&a, &b), true)
    } else {
        let v = v_t.transpose();
        let d = if opts.reflection_fix { (v * u.transpose()).determinant().signum() } else { 1.0 };
        let mut diag = Mat3::identity();
        // The correction belongs on the weakest singular direction.
        diag[(order[2], order[2])] = d;
        (v * diag * u.transpose(), false)
    };
    KabschFit {
        transform: RigidTransform {
            rotation,
            translation: ct - rotation * cs,
        },
        degenerate: false,
        ill_conditioned,
    }
}

fn check_lengths(pk: &PointCloud, flow: &[Vec3], rows: usize) -> Result<()> {
    if flow.len() != pk.len() || rows != pk.len() {
        return Err(Error::Shape(format!(
            "{} points, {} flow vectors, {} mask rows",
            pk.len(),
            flow.len(),
            rows
        )));
    }
    Ok(())
}

/// Per-slot weighted Kabsch from `P_k` to `P_k + flow` with mask columns as
/// weights. Each slot's distribution is one-hot on the nearest group bin.
pub fn fit_multibody(pk: &PointCloud, flow: &[Vec3], mask: &SoftMask) -> Result<PartMotionSet> {
    fit_multibody_with(pk, flow, mask, KabschOptions::default())
}

pub fn fit_multibody_with(pk: &PointCloud, flow: &[Vec3], mask: &SoftMask, opts: KabschOptions) -> Result<PartMotionSet> {
    check_lengths(pk, flow, mask.n_points())?;
    let group = RotationGroup::shared();
    let source = pk.points().to_vec();
    let target: Vec<Vec3> = source.iter().zip(flow).map(|(p, d)| p + d).collect();
    let mut slots = Vec::with_capacity(mask.slots());
    for s in 0..mask.slots() {
        let c = WeightedCorrespondence::new(source.clone(), target.clone(), mask.column(s))?;
        let fit = weighted_kabsch_with(&c, opts);
        if fit.degenerate {
            slots.push(SlotMotion::inactive());
            continue;
        }
        let (bin, _) = group.nearest(&fit.transform.rotation);
        let mut distribution = vec![0.0; GROUP_ORDER];
        distribution[bin] = 1.0;
        slots.push(SlotMotion {
            rotation: fit.transform.rotation,
            translation: fit.transform.translation,
            distribution,
            bin,
            confidence: 1.0,
            active: true,
            ill_conditioned: fit.ill_conditioned,
        });
    }
    Ok(PartMotionSet { slots })
}

/// `N × S` distances `‖R̂ˢ p_i + t̂ˢ − (p_i + flow_i)‖`.
pub fn residuals(pk: &PointCloud, flow: &[Vec3], motions: &PartMotionSet) -> Result<Tensor> {
    check_lengths(pk, flow, pk.len())?;
    let s_count = motions.len();
    let mut out = Tensor::zeros(pk.len(), s_count);
    for (i, (p, d)) in pk.points().iter().zip(flow).enumerate() {
        let q = p + d;
        for (s, m) in motions.slots.iter().enumerate() {
            out.set(i, s, (m.rotation * p + m.translation - q).norm());
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacOptions {
    pub hypotheses: usize,
    /// Inlier residual bound in scene units.
    pub threshold: f64,
    /// Smallest consensus set accepted as a part.
    pub min_points: usize,
    pub max_parts: usize,
}

/// Rigid parts found in a flow field alone by sequential RANSAC.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSegmentation {
    /// Part label per point; points outside every consensus set take the
    /// label of their nearest inlier.
    pub labels: Vec<usize>,
    pub motions: Vec<RigidTransform>,
    pub inliers: usize,
}

/// Repeatedly fits the rigid motion with the largest inlier set among the
/// still unassigned points from minimal 3-point samples, refits it on its
/// inliers, and removes them.
pub fn segment_flow<R: rand::Rng + ?Sized>(
    pk: &PointCloud,
    flow: &[Vec3],
    opts: &RansacOptions,
    rng: &mut R,
) -> Result<FlowSegmentation> {
    check_lengths(pk, flow, pk.len())?;
    if opts.max_parts == 0 || opts.min_points < 3 || !(opts.threshold > 0.0) {
        return Err(Error::Config("ransac needs max_parts >= 1, min_points >= 3, threshold > 0".into()));
    }
    let pts = pk.points();
    let n = pts.len();
    let target: Vec<Vec3> = pts.iter().zip(flow).map(|(p, d)| p + d).collect();
    let fit_on = |idx: &[usize]| {
        let c = WeightedCorrespondence::uniform(
            idx.iter().map(|&i| pts[i]).collect(),
            idx.iter().map(|&i| target[i]).collect(),
        )
        .expect("equal lengths");
        weighted_kabsch(&c)
    };
    let inliers_of = |t: &RigidTransform, pool: &[usize]| -> Vec<usize> {
        pool.iter()
            .copied()
            .filter(|&i| (t.apply(&pts[i]) - target[i]).norm() < opts.threshold)
            .collect()
    };
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut pool: Vec<usize> = (0..n).collect();
    let mut motions = Vec::new();
    while motions.len() < opts.max_parts && pool.len() >= opts.min_points {
        let mut best: Vec<usize> = Vec::new();
        for _ in 0..opts.hypotheses {
            let sample: Vec<usize> = rand::seq::index::sample(rng, pool.len(), 3).iter().map(|k| pool[k]).collect();
            let fit = fit_on(&sample);
            if fit.degenerate || fit.ill_conditioned {
                continue;
            }
            let inl = inliers_of(&fit.transform, &pool);
            if inl.len() > best.len() {
                best = inl;
            }
        }
        if best.len() < opts.min_points {
            break;
        }
        let mut t = fit_on(&best).transform;
        for _ in 0..3 {
            let refined = inliers_of(&t, &pool);
            if refined.len() < opts.min_points {
                break;
            }
            best = refined;
            t = fit_on(&best).transform;
        }
        for &i in &best {
            labels[i] = Some(motions.len());
        }
        pool.retain(|&i| labels[i].is_none());
        motions.push(t);
    }
    let inliers = n - pool.len();
    let labels = if motions.is_empty() {
        vec![0; n]
    } else {
        let assigned: Vec<usize> = (0..n).filter(|&i| labels[i].is_some()).collect();
        (0..n)
            .map(|i| {
                labels[i].unwrap_or_else(|| {
                    let nearest = assigned
                        .iter()
                        .copied()
                        .min_by(|&a, &b| (pts[a] - pts[i]).norm_squared().total_cmp(&(pts[b] - pts[i]).norm_squared()))
                        .expect("at least one part");
                    labels[nearest].expect("assigned")
                })
            })
            .collect()
    };
    Ok(FlowSegmentation {
        labels,
        motions,
        inliers,
    })
}

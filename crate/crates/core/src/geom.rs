//! Rigid-body mathematics and the 60-element icosahedral rotation group.
//!
//! Every equivariance statement in the crate is phrased in terms of the
//! [`RotationGroup`] built here: group indices are canonical (identity
//! first, the rest sorted by rounded matrix entries), so indices are stable
//! across runs and platforms.

use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Number of elements of the icosahedral rotation group.
pub const GROUP_ORDER: usize = 60;

const DEDUP_TOL: f64 = 1e-9;
const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("point cloud must contain at least one point")]
    EmptyCloud,
    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },
    #[error("matrix is not a rotation (orthogonality error {orthogonality:.3e}, det {det})")]
    NotARotation { orthogonality: f64, det: f64 },
    #[error("group closure produced {0} elements, expected 60")]
    GroupClosure(usize),
    #[error("product of elements {0} and {1} is not in the group")]
    NotClosed(usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self, GeomError> {
        if points.is_empty() {
            return Err(GeomError::EmptyCloud);
        }
        if let Some(index) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(GeomError::NonFinitePoint { index });
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn translated(&self, t: &Vec3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| p + t).collect(),
        }
    }

    /// Reorders points so that `out[i] = self[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> PointCloud {
        PointCloud {
            points: perm.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn centroid(&self) -> Vec3 {
        self.points.iter().sum::<Vec3>() / self.points.len() as f64
    }
}

/// A proper rigid motion `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Validated constructor; rejects anything that is not in SO(3) within 1e-9.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeomError> {
        check_rotation(&rotation, ROTATION_TOL)?;
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

/// Checks `RᵀR = I` and `det R = 1` within `tol`.
pub fn check_rotation(r: &Mat3, tol: f64) -> Result<(), GeomError> {
    let orthogonality = (r.transpose() * r - Mat3::identity()).abs().max();
    let det = r.determinant();
    if orthogonality > tol || (det - 1.0).abs() > tol {
        return Err(GeomError::NotARotation { orthogonality, det });
    }
    Ok(())
}

pub fn apply_transform(t: &RigidTransform, x: &PointCloud) -> PointCloud {
    PointCloud {
        points: x.points.iter().map(|p| t.apply(p)).collect(),
    }
}

/// Rotation by `angle` radians about `axis` (Rodrigues).
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let a = axis.normalize();
    let k = a.cross_matrix();
    Mat3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

/// Geodesic distance on SO(3) in degrees: `arccos((tr(RaᵀRb) − 1)/2)`,
/// evaluated through `atan2` so angles near 0 keep full precision.
pub fn geodesic_angle(ra: &Mat3, rb: &Mat3) -> f64 {
    let r = ra.transpose() * rb;
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let sin = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() / 2.0;
    sin.atan2(cos).to_degrees()
}

/// The rotational symmetry group of the icosahedron with its Cayley and
/// inverse tables. Immutable after construction.
#[derive(Clone, Debug)]
pub struct RotationGroup {
    elements: Vec<Mat3>,
    cayley: Vec<usize>,
    inverse: Vec<usize>,
}

impl RotationGroup {
    /// Process-wide instance; built on first use.
    pub fn shared() -> &'static RotationGroup {
        static GROUP: OnceLock<RotationGroup> = OnceLock::new();
        GROUP.get_or_init(|| build_icosahedral_group().expect("icosahedral generators are valid"))
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn elements(&self) -> &[Mat3] {
        &self.elements
    }

    pub fn element(&self, i: usize) -> &Mat3 {
        &self.elements[i]
    }

    /// Index of `g_i · g_j`.
    pub fn product(&self, i: usize, j: usize) -> usize {
        self.cayley[i * GROUP_ORDER + j]
    }

    pub fn inverse(&self, i: usize) -> usize {
        self.inverse[i]
    }

    /// Index of `g_i⁻¹ · g_j`.
    pub fn relative(&self, i: usize, j: usize) -> usize {
        self.product(self.inverse[i], j)
    }

    pub fn angle_of(&self, i: usize) -> f64 {
        geodesic_angle(&Mat3::identity(), &self.elements[i])
    }

    /// Nearest element by geodesic angle; ties resolve to the lower index.
    pub fn nearest(&self, r: &Mat3) -> (usize, f64) {
        // max trace(gᵀR) ⇔ min geodesic angle
        let mut best = 0;
        let mut best_trace = f64::NEG_INFINITY;
        for (k, g) in self.elements.iter().enumerate() {
            let tr = (g.transpose() * r).trace();
            if tr > best_trace {
                best_trace = tr;
                best = k;
            }
        }
        (best, geodesic_angle(&self.elements[best], r))
    }

    /// Index of the element matching `r` within `tol` (max-abs), if any.
    pub fn find(&self, r: &Mat3, tol: f64) -> Option<usize> {
        self.elements.iter().position(|g| (g - r).abs().max() < tol)
    }
}

pub fn build_icosahedral_group() -> Result<RotationGroup, GeomError> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    // order-5 about a vertex axis, order-2 about an edge midpoint axis
    let generators = [
        axis_angle(&Vec3::new(0.0, 1.0, phi), 2.0 * std::f64::consts::PI / 5.0),
        axis_angle(&Vec3::new(0.0, 0.0, 1.0), std::f64::consts::PI),
    ];
    close_under_products(&generators)
}

fn close_under_products(generators: &[Mat3]) -> Result<RotationGroup, GeomError> {
    let contains = |set: &[Mat3], m: &Mat3| set.iter().any(|e| (e - m).norm() < DEDUP_TOL);

    let mut elements = vec![Mat3::identity()];
    let mut frontier = vec![Mat3::identity()];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for a in &frontier {
            for g in generators {
                let p = a * g;
                if !contains(&elements, &p) {
                    elements.push(p);
                    next.push(p);
                }
            }
        }
        if elements.len() > GROUP_ORDER {
            return Err(GeomError::GroupClosure(elements.len()));
        }
        frontier = next;
    }
    if elements.len() != GROUP_ORDER {
        return Err(GeomError::GroupClosure(elements.len()));
    }

    let key = |m: &Mat3| -> [i64; 9] {
        let mut k = [0i64; 9];
        for r in 0..3 {
            for c in 0..3 {
                k[3 * r + c] = (m[(r, c)] * 1e6).round() as i64;
            }
        }
        k
    };
    let mut rest: Vec<Mat3> = elements.split_off(1);
    rest.sort_by_key(key);
    elements.extend(rest);

    let index_of = |m: &Mat3| elements.iter().position(|e| (e - m).norm() < DEDUP_TOL);
    let mut cayley = vec![0usize; GROUP_ORDER * GROUP_ORDER];
    for i in 0..GROUP_ORDER {
        for j in 0..GROUP_ORDER {
            cayley[i * GROUP_ORDER + j] =
                index_of(&(elements[i] * elements[j])).ok_or(GeomError::NotClosed(i, j))?;
        }
    }
    let inverse = (0..GROUP_ORDER)
        .map(|i| {
            (0..GROUP_ORDER)
                .find(|&j| cayley[i * GROUP_ORDER + j] == 0)
                .ok_or(GeomError::NotClosed(i, i))
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(RotationGroup {
        elements,
        cayley,
        inverse,
    })
}

pub fn relative_rotation_index(group: &RotationGroup, i: usize, j: usize) -> usize {
    group.relative(i, j)
}

pub fn nearest_group_element(group: &RotationGroup, r: &Mat3) -> (usize, f64) {
    group.nearest(r)
}

/// Haar-uniform random rotation from a unit quaternion drawn on S³.
pub fn random_rotation<R: rand::Rng + ?Sized>(rng: &mut R) -> Mat3 {
    use rand_distr::{Distribution, StandardNormal};
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let q = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
    nalgebra::UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .into_inner()
}

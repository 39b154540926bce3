//! Deterministic synthetic two-frame multi-body scenes.
//!
//! Each scene places 2–4 rigid parts (box, cylinder, L-bracket surfaces)
//! without bounding-box overlap, moves each part by its own rigid motion
//! about its centroid, and derives a clean flow plus a corrupted copy that
//! stands in for an unsupervised flow estimator.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::geom::{axis_angle, random_rotation, Mat3, PointCloud, RigidTransform, RotationGroup, Vec3, GROUP_ORDER};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Box,
    Cylinder,
    LBracket,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// Rotations are non-identity group elements whose angle is closest to
    /// a magnitude drawn from `rotation_deg`.
    GroupMember,
    /// Uniform axis, magnitude uniform in `rotation_deg`.
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub min_parts: usize,
    pub max_parts: usize,
    pub points: usize,
    pub min_points_per_part: usize,
    pub shapes: Vec<Shape>,
    pub rotation_deg: [f64; 2],
    pub translation: [f64; 2],
    pub rotation_mode: RotationMode,
    /// Mean end-point error of the Gaussian flow noise (meters).
    pub flow_noise: f64,
    pub outlier_fraction: f64,
    pub seed: u64,
    /// Surface point densities (points/m²). When non-empty, the parts of a
    /// scene get distinct densities and are scaled to match them; when
    /// empty, `part_size` sets the scale directly.
    pub density_classes: Vec<f64>,
    pub part_size: [f64; 2],
    /// Part centers are drawn from `[-h, h]³`.
    pub placement_half_extent: f64,
    /// Clearance added around each part's bounding box during placement.
    pub placement_margin: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            min_parts: 2,
            max_parts: 4,
            points: 512,
            min_points_per_part: 48,
            shapes: vec![Shape::Box, Shape::Cylinder, Shape::LBracket],
            rotation_deg: [10.0, 60.0],
            translation: [0.05, 0.4],
            rotation_mode: RotationMode::GroupMember,
            flow_noise: 0.02,
            outlier_fraction: 0.1,
            seed: 0,
            density_classes: vec![4800.0, 1600.0, 533.0, 178.0],
            part_size: [0.2, 0.4],
            placement_half_extent: 0.6,
            placement_margin: 0.05,
        }
    }
}

fn range_ok(r: [f64; 2]) -> bool {
    r[0].is_finite() && r[1].is_finite() && r[0] >= 0.0 && r[0] <= r[1]
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.min_parts < 1 || self.min_parts > self.max_parts {
            return fail("scene.min_parts must be in 1..=max_parts");
        }
        if self.points < self.max_parts * self.min_points_per_part {
            return Err(Error::Config(format!(
                "scene.points ({}) must be at least max_parts × min_points_per_part ({} × {})",
                self.points, self.max_parts, self.min_points_per_part
            )));
        }
        if self.min_points_per_part < 1 {
            return fail("scene.min_points_per_part must be positive");
        }
        if self.shapes.is_empty() {
            return fail("scene.shapes must be non-empty");
        }
        if !range_ok(self.rotation_deg) || self.rotation_deg[1] > 180.0 {
            return fail("scene.rotation_deg must be an ordered range within [0, 180]");
        }
        if !range_ok(self.translation) {
            return fail("scene.translation must be an ordered non-negative range");
        }
        if !(self.flow_noise >= 0.0 && self.flow_noise.is_finite()) {
            return fail("scene.flow_noise must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return fail("scene.outlier_fraction must be in [0, 1]");
        }
        if !self.density_classes.is_empty() {
            if self.density_classes.len() < self.max_parts {
                return fail("scene.density_classes needs at least max_parts entries");
            }
            if self.density_classes.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
                return fail("scene.density_classes must be positive");
            }
        } else if !range_ok(self.part_size) || self.part_size[0] <= 0.0 {
            return fail("scene.part_size must be an ordered positive range");
        }
        if !(self.placement_half_extent > 0.0) || !(self.placement_margin >= 0.0) {
            return fail("scene.placement_half_extent must be positive and placement_margin non-negative");
        }
        Ok(())
    }
}

/// A two-frame scene with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub points_k: PointCloud,
    pub points_l: PointCloud,
    /// Ground-truth part index per point.
    pub labels: Vec<usize>,
    /// Per-part motion from frame k to frame l.
    pub transforms: Vec<RigidTransform>,
    pub flow_clean: Vec<Vec3>,
    pub flow_noisy: Option<Vec<Vec3>>,
}

impl SceneSample {
    pub fn n_points(&self) -> usize {
        self.points_k.len()
    }

    pub fn part_count(&self) -> usize {
        self.transforms.len()
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v = Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
        let len = v.norm();
        if len > 1e-9 {
            return v / len;
        }
    }
}

/// Uniform samples on an axis-aligned box surface with edge lengths `d`.
fn sample_box(rng: &mut ChaCha8Rng, d: Vec3, n: usize) -> Vec<Vec3> {
    let faces = [d.y * d.z, d.x * d.z, d.x * d.y];
    let pick = WeightedIndex::new([faces[0], faces[1], faces[2], faces[0], faces[1], faces[2]]).expect("positive areas");
    (0..n)
        .map(|_| {
            let f = pick.sample(rng);
            let mut p = Vec3::new(
                rng.gen_range(-0.5..0.5) * d.x,
                rng.gen_range(-0.5..0.5) * d.y,
                rng.gen_range(-0.5..0.5) * d.z,
            );
            let axis = f % 3;
            p[axis] = if f < 3 { 0.5 } else { -0.5 } * d[axis];
            p
        })
        .collect()
}

fn sample_cylinder(rng: &mut ChaCha8Rng, r: f64, h: f64, n: usize) -> Vec<Vec3> {
    let side = 2.0 * std::f64::consts::PI * r * h;
    let cap = std::f64::consts::PI * r * r;
    let pick = WeightedIndex::new([side, cap, cap]).expect("positive areas");
    (0..n)
        .map(|_| {
            let k = pick.sample(rng);
            let th = rng.gen_range(0.0..std::f64::consts::TAU);
            let (rr, z) = match k {
                0 => (r, rng.gen_range(-h / 2.0..h / 2.0)),
                1 => (r * rng.gen::<f64>().sqrt(), h / 2.0),
                _ => (r * rng.gen::<f64>().sqrt(), -h / 2.0),
            };
            Vec3::new(rr * th.cos(), rr * th.sin(), z)
        })
        .collect()
}

/// Surface samples of a unit-scale shape and its surface area.
fn sample_shape(rng: &mut ChaCha8Rng, shape: Shape, n: usize) -> (Vec<Vec3>, f64) {
    match shape {
        Shape::Box => {
            let d = Vec3::new(rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0));
            let area = 2.0 * (d.x * d.y + d.x * d.z + d.y * d.z);
            (sample_box(rng, d, n), area)
        }
        Shape::Cylinder => {
            let r = rng.gen_range(0.3..0.5);
            let h = rng.gen_range(0.6..1.0);
            let area = 2.0 * std::f64::consts::PI * r * (r + h);
            (sample_cylinder(rng, r, h, n), area)
        }
        Shape::LBracket => {
            let (a, t) = (1.0, 0.3);
            let m = n / 2;
            let mut pts = sample_box(rng, Vec3::new(a, t, t), m);
            let offset = Vec3::new(-a / 2.0 + t / 2.0, a / 2.0 - t / 2.0, 0.0);
            pts.extend(sample_box(rng, Vec3::new(t, a, t), n - m).into_iter().map(|p| p + offset));
            (pts, 4.0 * (2.0 * a * t + t * t))
        }
    }
}

fn bbox(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

fn sample_rotation(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Mat3 {
    let theta = uniform(rng, spec.rotation_deg);
    match spec.rotation_mode {
        RotationMode::Continuous => axis_angle(&unit_vector(rng), theta.to_radians()),
        RotationMode::GroupMember => {
            let group = RotationGroup::shared();
            let gap = |k: usize| (group.angle_of(k) - theta).abs();
            let best = (1..GROUP_ORDER).map(gap).fold(f64::INFINITY, f64::min);
            let candidates: Vec<usize> = (1..GROUP_ORDER).filter(|&k| gap(k) < best + 1e-6).collect();
            *group.element(candidates[rng.gen_range(0..candidates.len())])
        }
    }
}

pub fn scene_id(spec: &SceneSpec, index: u64) -> String {
    format!("s{}-{:06}", spec.seed, index)
}

/// Generates scene `index` of the stream defined by `spec.seed`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<SceneSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);

    let parts = rng.gen_range(spec.min_parts..=spec.max_parts);
    let densities: Vec<f64> = if spec.density_classes.is_empty() {
        Vec::new()
    } else {
        sample(&mut rng, spec.density_classes.len(), parts)
            .into_iter()
            .map(|k| spec.density_classes[k])
            .collect()
    };
    let base = spec.points / parts;
    let counts: Vec<usize> = (0..parts).map(|s| base + usize::from(s < spec.points - base * parts)).collect();

    let mut points = Vec::with_capacity(spec.points);
    let mut labels = Vec::with_capacity(spec.points);
    let mut boxes: Vec<(Vec3, Vec3)> = Vec::with_capacity(parts);
    let h = spec.placement_half_extent;
    for (s, &count) in counts.iter().enumerate() {
        let shape = spec.shapes[rng.gen_range(0..spec.shapes.len())];
        let (raw, area) = sample_shape(&mut rng, shape, count);
        let scale = if densities.is_empty() {
            uniform(&mut rng, spec.part_size)
        } else {
            (count as f64 / densities[s] / area).sqrt()
        };
        let orient = random_rotation(&mut rng);
        let local: Vec<Vec3> = raw.iter().map(|p| orient * (p * scale)).collect();
        let (llo, lhi) = bbox(&local);
        let margin = Vec3::repeat(spec.placement_margin);
        let mut placed = None;
        for _ in 0..1000 {
            let c = Vec3::new(rng.gen_range(-h..h), rng.gen_range(-h..h), rng.gen_range(-h..h));
            let (lo, hi) = (llo + c - margin, lhi + c + margin);
            let free = boxes.iter().all(|(blo, bhi)| (0..3).any(|a| hi[a] < blo[a] || lo[a] > bhi[a]));
            if free {
                placed = Some((c, lo, hi));
                break;
            }
        }
        let (c, lo, hi) = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place part {s} of scene {index} without overlap in 1000 attempts; \
                 increase scene.placement_half_extent or reduce part sizes"
            ))
        })?;
        boxes.push((lo, hi));
        points.extend(local.iter().map(|p| p + c));
        labels.extend(std::iter::repeat(s).take(count));
    }

    let mut transforms = Vec::with_capacity(parts);
    let mut centroids = vec![Vec3::zeros(); parts];
    for (p, &l) in points.iter().zip(&labels) {
        centroids[l] += p;
    }
    for (s, c) in centroids.iter_mut().enumerate() {
        *c /= counts[s] as f64;
    }
    for c in &centroids {
        let r = sample_rotation(&mut rng, spec);
        let t = unit_vector(&mut rng) * uniform(&mut rng, spec.translation);
        transforms.push(RigidTransform::new(r, c + t - r * c)?);
    }

    let flow_clean: Vec<Vec3> = points.iter().zip(&labels).map(|(p, &l)| transforms[l].apply(p) - p).collect();
    let moved: Vec<Vec3> = points.iter().zip(&flow_clean).map(|(p, d)| p + d).collect();

    // Per-axis std chosen so the mean noise magnitude equals flow_noise.
    let axis_std = spec.flow_noise / (8.0 / std::f64::consts::PI).sqrt();
    let mut flow_noisy = flow_clean.clone();
    if axis_std > 0.0 {
        let noise = Normal::new(0.0, axis_std).expect("positive std");
        for f in flow_noisy.iter_mut() {
            *f += Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
        }
    }
    let n_out = (spec.outlier_fraction * spec.points as f64).round() as usize;
    if n_out > 0 {
        let (lo, hi) = bbox(&moved);
        let mut idx = sample(&mut rng, spec.points, n_out).into_vec();
        idx.sort_unstable();
        for i in idx {
            let target = Vec3::new(
                uniform(&mut rng, [lo.x, hi.x]),
                uniform(&mut rng, [lo.y, hi.y]),
                uniform(&mut rng, [lo.z, hi.z]),
            );
            flow_noisy[i] = target - points[i];
        }
    }

    Ok(SceneSample {
        id: scene_id(spec, index),
        points_k: PointCloud::new(points)?,
        points_l: PointCloud::new(moved)?,
        labels,
        transforms,
        flow_clean,
        flow_noisy: Some(flow_noisy),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformDoc {
    rotation: [f64; 9],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    id: String,
    points_k: Vec<[f64; 3]>,
    points_l: Vec<[f64; 3]>,
    mask: Vec<usize>,
    transforms: Vec<TransformDoc>,
    flow_clean: Vec<[f64; 3]>,
    flow_noisy: Vec<[f64; 3]>,
}

fn to_arrays(v: &[Vec3]) -> Vec<[f64; 3]> {
    v.iter().map(|p| [p.x, p.y, p.z]).collect()
}

fn from_arrays(v: &[[f64; 3]]) -> Vec<Vec3> {
    v.iter().map(|a| Vec3::from(*a)).collect()
}

/// Serializes a scene to its JSON document.
pub fn scene_to_json(s: &SceneSample) -> Result<String> {
    let flow_noisy = s.flow_noisy.as_ref().ok_or_else(|| Error::SceneFormat {
        path: s.id.clone(),
        message: "flow_noisy: missing".into(),
    })?;
    let doc = SceneDoc {
        id: s.id.clone(),
        points_k: to_arrays(s.points_k.points()),
        points_l: to_arrays(s.points_l.points()),
        mask: s.labels.clone(),
        transforms: s
            .transforms
            .iter()
            .map(|t| {
                let r = &t.rotation;
                TransformDoc {
                    rotation: [
                        r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)],
                    ],
                    translation: [t.translation.x, t.translation.y, t.translation.z],
                }
            })
            .collect(),
        flow_clean: to_arrays(&s.flow_clean),
        flow_noisy: to_arrays(flow_noisy),
    };
    Ok(serde_json::to_string(&doc).expect("scene documents are plain data"))
}

/// Parses and validates a scene document; `origin` labels error messages.
pub fn scene_from_json(text: &str, origin: &str) -> Result<SceneSample> {
    let err = |message: String| Error::SceneFormat {
        path: origin.to_string(),
        message,
    };
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: SceneDoc = serde_path_to_error::deserialize(de).map_err(|e| err(format!("{}: {}", e.path(), e.inner())))?;
    let n = doc.points_k.len();
    if n == 0 {
        return Err(err("points_k: empty".into()));
    }
    for (name, len) in [
        ("points_l", doc.points_l.len()),
        ("mask", doc.mask.len()),
        ("flow_clean", doc.flow_clean.len()),
        ("flow_noisy", doc.flow_noisy.len()),
    ] {
        if len == 0 {
            return Err(err(format!("{name}: empty")));
        }
        if len != n {
            return Err(err(format!("{name}: length {len} differs from points_k length {n}")));
        }
    }
    if doc.transforms.is_empty() {
        return Err(err("transforms: empty".into()));
    }
    if let Some(i) = doc.mask.iter().position(|&m| m >= doc.transforms.len()) {
        return Err(err(format!("mask[{i}]: part index {} has no transform", doc.mask[i])));
    }
    let mut transforms = Vec::with_capacity(doc.transforms.len());
    for (k, t) in doc.transforms.iter().enumerate() {
        let r = Mat3::from_row_slice(&t.rotation);
        let tr = RigidTransform::new(r, Vec3::from(t.translation))
            .map_err(|e| err(format!("transforms[{k}].rotation: {e}")))?;
        transforms.push(tr);
    }
    let points_k = PointCloud::new(from_arrays(&doc.points_k)).map_err(|e| err(format!("points_k: {e}")))?;
    let points_l = PointCloud::new(from_arrays(&doc.points_l)).map_err(|e| err(format!("points_l: {e}")))?;
    Ok(SceneSample {
        id: doc.id,
        points_k,
        points_l,
        labels: doc.mask,
        transforms,
        flow_clean: from_arrays(&doc.flow_clean),
        flow_noisy: Some(from_arrays(&doc.flow_noisy)),
    })
}

pub fn save_scene(s: &SceneSample, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, scene_to_json(s)?).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<SceneSample> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scene_from_json(&text, &path.display().to_string())
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn scene_path(root: &Path, split: &str, id: &str) -> PathBuf {
    root.join(split).join(format!("{id}.json"))
}

/// All scenes of a split, in file-name order.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<SceneSample>> {
    let dir = root.join(split);
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_scene(p)).collect()
}

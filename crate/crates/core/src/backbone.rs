//! Two-stage discretized SE(3)-equivariant point convolution.
//!
//! Features live on `N × 60 × D` grids stored as `(N·60) × D` row-major
//! tensors with row `i·60 + j` holding point `i`, group element `j`.
//! The first layer correlates each neighborhood's relative coordinates with
//! the kernel rotated by every group element; later layers mix channels of
//! the point itself, its neighborhood mean, and a right-shifted group copy,
//! all of which commute with the left group action.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::geom::{PointCloud, RotationGroup, Vec3, GROUP_ORDER};
use crate::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layer_dims: Vec<usize>,
    pub neighbors: usize,
    /// Base kernel points inside the unit ball; scaled by `kernel_radius`.
    pub kernel_points: Vec<[f64; 3]>,
    pub kernel_radius: f64,
    pub kernel_bandwidth: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let c = 1.0 / 3f64.sqrt();
        let mut kernel_points = vec![[0.0; 3]];
        for x in [-c, c] {
            for y in [-c, c] {
                for z in [-c, c] {
                    kernel_points.push([x, y, z]);
                }
            }
        }
        Self {
            layer_dims: vec![16, 32],
            neighbors: 16,
            kernel_points,
            kernel_radius: 0.2,
            kernel_bandwidth: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.is_empty() || self.layer_dims.contains(&0) {
            return Err(Error::Config("backbone.layer_dims must be non-empty and positive".into()));
        }
        if self.neighbors < 4 {
            return Err(Error::Config("backbone.neighbors must be at least 4".into()));
        }
        if self.kernel_points.is_empty() {
            return Err(Error::Config("backbone.kernel_points must be non-empty".into()));
        }
        for p in &self.kernel_points {
            let n = Vec3::from(*p).norm();
            if !n.is_finite() || n > 1.0 + 1e-9 {
                return Err(Error::Config("backbone.kernel_points must lie inside the unit ball".into()));
            }
        }
        if !(self.kernel_radius > 0.0) || !(self.kernel_bandwidth > 0.0) {
            return Err(Error::Config("backbone.kernel_radius and kernel_bandwidth must be positive".into()));
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.layer_dims.len()
    }

    pub fn weight_name(layer: usize) -> String {
        format!("backbone.layer{layer}.weight")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("backbone.layer{layer}.bias")
    }

    fn fan_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.kernel_points.len()
        } else {
            3 * self.layer_dims[layer - 1]
        }
    }

    /// Registers all backbone parameters with `N(0, 1/fan_in)` weights and
    /// zero biases.
    pub fn register_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for (l, &d) in self.layer_dims.iter().enumerate() {
            let fan_in = self.fan_in(l);
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            let w = (0..fan_in * d).map(|_| normal.sample(rng)).collect();
            store.register(&Self::weight_name(l), &[fan_in, d], w)?;
            store.register(&Self::bias_name(l), &[d], vec![0.0; d])?;
        }
        Ok(())
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.register_params(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(store)
    }
}

/// `N × k` neighbor indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhoods {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl Neighborhoods {
    pub fn n_points(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

/// k nearest points (self included) by Euclidean distance, ties to the
/// lower index.
pub fn knn_neighborhoods(x: &PointCloud, k: usize) -> Result<Neighborhoods> {
    let n = x.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("neighbors k={k} must be in 1..={n} (cloud size)")));
    }
    let pts = x.points();
    let mut indices = Vec::with_capacity(n * k);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for p in pts {
        order.clear();
        order.extend(pts.iter().enumerate().map(|(q, pq)| ((pq - p).norm_squared(), q)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            order.select_nth_unstable_by(k - 1, cmp);
        }
        order[..k].sort_unstable_by(cmp);
        indices.extend(order[..k].iter().map(|&(_, q)| q));
    }
    Ok(Neighborhoods { k, indices })
}

/// Per-layer features of one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivariantFeature {
    /// `(N·60) × D`, row `i·60 + j`.
    pub values: Tensor,
    pub n_points: usize,
    pub layer: usize,
}

impl EquivariantFeature {
    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn block(&self, i: usize, j: usize) -> &[f64] {
        self.values.row(i * GROUP_ORDER + j)
    }
}

/// Group action on the feature domain: `out[i, j] = F[i, g⁻¹·g_j]`.
pub fn rotate_feature(f: &EquivariantFeature, g: usize) -> EquivariantFeature {
    let group = RotationGroup::shared();
    let ginv = group.inverse(g);
    let d = f.dim();
    let mut out = Tensor::zeros(f.values.rows(), d);
    for i in 0..f.n_points {
        for j in 0..GROUP_ORDER {
            let src = group.product(ginv, j);
            out.row_mut(i * GROUP_ORDER + j).copy_from_slice(f.block(i, src));
        }
    }
    EquivariantFeature {
        values: out,
        n_points: f.n_points,
        layer: f.layer,
    }
}

/// Rotated kernel points deduplicated across the group: many `g_j·κ_m`
/// coincide (e.g. cube vertices land on the 20 dodecahedron vertices), so
/// the Gaussian responses are evaluated once per distinct vector.
struct KernelTable {
    vectors: Vec<Vec3>,
    /// `slot[j·M + m]` indexes into `vectors`.
    slot: Vec<usize>,
    m: usize,
}

fn kernel_table(cfg: &BackboneConfig) -> KernelTable {
    let group = RotationGroup::shared();
    let m = cfg.kernel_points.len();
    let mut vectors: Vec<Vec3> = Vec::new();
    let mut slot = Vec::with_capacity(GROUP_ORDER * m);
    for g in group.elements() {
        for kp in &cfg.kernel_points {
            let v = g * Vec3::from(*kp) * cfg.kernel_radius;
            let found = vectors.iter().position(|u| (u - v).amax() < 1e-9);
            slot.push(found.unwrap_or_else(|| {
                vectors.push(v);
                vectors.len() - 1
            }));
        }
    }
    KernelTable { vectors, slot, m }
}

/// First-layer input: `(N·60) × M` Gaussian kernel correlations summed
/// over each neighborhood.
pub fn kernel_correlation(x: &PointCloud, nb: &Neighborhoods, cfg: &BackboneConfig) -> Tensor {
    let table = kernel_table(cfg);
    let pts = x.points();
    let n = x.len();
    let nv = table.vectors.len();
    let inv_bw2 = 1.0 / (cfg.kernel_bandwidth * cfg.kernel_bandwidth);
    let mut out = Tensor::zeros(n * GROUP_ORDER, table.m);
    let mut resp = vec![0.0; nv];
    for i in 0..n {
        resp.iter_mut().for_each(|r| *r = 0.0);
        for &q in nb.row(i) {
            let delta = pts[q] - pts[i];
            for (r, v) in resp.iter_mut().zip(&table.vectors) {
                *r += (-(delta - v).norm_squared() * inv_bw2).exp();
            }
        }
        for j in 0..GROUP_ORDER {
            let row = out.row_mut(i * GROUP_ORDER + j);
            for (mm, x) in row.iter_mut().enumerate() {
                *x = resp[table.slot[j * table.m + mm]];
            }
        }
    }
    out
}

/// Fixed per-cloud data: the cloud, its neighborhoods, and gather tables.
#[derive(Clone, Debug)]
pub struct PreparedCloud {
    pub cloud: PointCloud,
    pub neighborhoods: Neighborhoods,
}

impl PreparedCloud {
    pub fn new(cloud: PointCloud, cfg: &BackboneConfig) -> Result<Self> {
        let neighborhoods = knn_neighborhoods(&cloud, cfg.neighbors)?;
        Ok(Self { cloud, neighborhoods })
    }

    pub fn n_points(&self) -> usize {
        self.cloud.len()
    }
}

/// Index of the fixed right-shift element used to mix the group dimension:
/// the lowest-index element with a 72° angle.
pub fn shift_element() -> usize {
    let group = RotationGroup::shared();
    (0..GROUP_ORDER)
        .find(|&k| (group.angle_of(k) - 72.0).abs() < 1e-6)
        .expect("icosahedral group has 72° elements")
}

fn neighbor_gather(nb: &Neighborhoods) -> Arc<[usize]> {
    let n = nb.n_points();
    let mut idx = Vec::with_capacity(n * GROUP_ORDER * nb.k);
    for i in 0..n {
        let row = nb.row(i);
        for j in 0..GROUP_ORDER {
            idx.extend(row.iter().map(|&q| q * GROUP_ORDER + j));
        }
    }
    idx.into()
}

fn shift_gather(n: usize) -> Arc<[usize]> {
    let group = RotationGroup::shared();
    let h = shift_element();
    let mut idx = Vec::with_capacity(n * GROUP_ORDER);
    for i in 0..n {
        idx.extend((0..GROUP_ORDER).map(|j| i * GROUP_ORDER + group.product(j, h)));
    }
    idx.into()
}

/// Records the backbone on `tape`; returns one `(N·60) × D_l` node per layer.
pub fn features_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &BackboneConfig,
    prepared: &PreparedCloud,
) -> Result<Vec<Var>> {
    let n = prepared.n_points();
    let corr = kernel_correlation(&prepared.cloud, &prepared.neighborhoods, cfg);
    let mut x = tape.constant(corr);
    let mut outs = Vec::with_capacity(cfg.layer_count());
    let (nb_idx, shift_idx) = if cfg.layer_count() > 1 {
        (Some(neighbor_gather(&prepared.neighborhoods)), Some(shift_gather(n)))
    } else {
        (None, None)
    };
    for l in 0..cfg.layer_count() {
        if l > 0 {
            let f = *outs.last().expect("previous layer");
            let k = prepared.neighborhoods.k;
            let mean = tape.gather_rows(f, nb_idx.clone().expect("gather table"), k, 1.0 / k as f64)?;
            let shifted = tape.gather_rows(f, shift_idx.clone().expect("shift table"), 1, 1.0)?;
            x = tape.concat_cols(&[f, mean, shifted])?;
        }
        let w = tape.param(store, &BackboneConfig::weight_name(l))?;
        let b = tape.param(store, &BackboneConfig::bias_name(l))?;
        let h = tape.matmul(x, w)?;
        let h = tape.add_row(h, b)?;
        let f = tape.leaky_relu(h, LEAKY_SLOPE);
        if let Some(pos) = tape.value(f).data().iter().position(|v| !v.is_finite()) {
            let point = pos / tape.value(f).cols() / GROUP_ORDER;
            return Err(Error::NonFiniteActivation { layer: l, point });
        }
        outs.push(f);
    }
    Ok(outs)
}

/// Per-layer equivariant features of a cloud under frozen parameters.
pub fn extract_features(x: &PointCloud, cfg: &BackboneConfig, store: &ParamStore) -> Result<Vec<EquivariantFeature>> {
    cfg.validate()?;
    let prepared = PreparedCloud::new(x.clone(), cfg)?;
    let mut tape = Tape::new();
    let vars = features_on_tape(&mut tape, store, cfg, &prepared)?;
    Ok(vars
        .iter()
        .enumerate()
        .map(|(layer, &v)| EquivariantFeature {
            values: tape.value(v).clone(),
            n_points: x.len(),
            layer,
        })
        .collect())
}

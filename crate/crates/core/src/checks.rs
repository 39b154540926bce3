//! Self-contained property suite: group algebra, equivariance, Kabsch
//! oracle, loss gradients and metric oracles. Each check generates its own
//! inputs from a seed and reports a single pass/fail with a detail line.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{extract_features, rotate_feature, BackboneConfig};
use crate::diffcore::{gradient_check, ParamStore, Tape, Tensor, Var};
use crate::geom::{
    apply_transform, build_icosahedral_group, geodesic_angle, random_rotation, Mat3, PointCloud, RigidTransform,
    RotationGroup, Vec3, GROUP_ORDER,
};
use crate::heads::{correlate, estimate_motion, part_features, segment, SoftMask};
use crate::metrics::{max_weight_assignment, rand_index, segmentation_scores};
use crate::model::{pair_forward, ModelConfig};
use crate::pipeline::PreparedScene;
use crate::rigidfit::{weighted_kabsch_with, KabschOptions, WeightedCorrespondence};
use crate::scenegen::{generate_scene, SceneSpec};
use crate::trainer::{cold_start, loss_on_tape, step_context, LossNodes, TrainerConfig};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub seed: u64,
    /// Fault injection: turning this off disables the Kabsch reflection fix.
    pub reflection_fix: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            reflection_fix: true,
        }
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> PropertyResult {
    let t0 = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    PropertyResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)))
            .collect(),
    )
    .expect("finite points")
}

fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.max_abs_diff(b) / scale
}

/// Builds the group from its generators and checks closure, inverses and
/// the identity over all 3600 products.
pub fn group_algebra() -> PropertyResult {
    timed("group algebra", || {
        let g = build_icosahedral_group()?;
        if g.order() != GROUP_ORDER {
            return Ok((false, format!("{} elements", g.order())));
        }
        let mut worst = 0.0f64;
        for i in 0..GROUP_ORDER {
            for j in 0..GROUP_ORDER {
                let p = g.element(i) * g.element(j);
                worst = worst.max((g.element(g.product(i, j)) - p).amax());
            }
            worst = worst.max((g.element(i) * g.element(g.inverse(i)) - Mat3::identity()).amax());
            worst = worst.max((g.element(0) * g.element(i) - g.element(i)).amax());
        }
        Ok((worst < 1e-9, format!("max entry error {worst:.2e}")))
    })
}

/// Features of `g∘X` against the group action on features of `X`, over
/// all 60 elements; plus translation invariance of features and rotation
/// and translation invariance of the mask.
pub fn equivariance(clouds: usize, n: usize, seed: u64) -> Vec<PropertyResult> {
    let model = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = model.init_params(seed).expect("valid default model");
    let group = RotationGroup::shared();
    let xs: Vec<PointCloud> = (0..clouds).map(|_| random_cloud(&mut rng, n)).collect();
    let shifts: Vec<Vec3> = (0..clouds)
        .map(|_| Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
        .collect();
    let bb = &model.backbone;
    let rot = timed("feature equivariance", || {
        let mut worst = 0.0f64;
        for x in &xs {
            let base = extract_features(x, bb, &store)?;
            for g in 0..GROUP_ORDER {
                let t = RigidTransform::new(*group.element(g), Vec3::zeros())?;
                let moved = extract_features(&apply_transform(&t, x), bb, &store)?;
                for (a, b) in base.iter().zip(&moved) {
                    worst = worst.max(rel_diff(&rotate_feature(a, g).values, &b.values));
                }
            }
        }
        Ok((worst < 1e-5, format!("max relative error {worst:.2e}")))
    });
    let trans = timed("feature translation invariance", || {
        let mut worst = 0.0f64;
        for (x, t) in xs.iter().zip(&shifts) {
            let a = extract_features(x, bb, &store)?;
            let b = extract_features(&x.translated(t), bb, &store)?;
            for (fa, fb) in a.iter().zip(&b) {
                worst = worst.max(fa.values.max_abs_diff(&fb.values));
            }
        }
        Ok((worst < 1e-9, format!("max abs error {worst:.2e}")))
    });
    let seg = timed("segmentation invariance", || {
        let mut worst = 0.0f64;
        for (x, t) in xs.iter().zip(&shifts) {
            let base = segment(&extract_features(x, bb, &store)?, &store)?;
            for g in 0..GROUP_ORDER {
                let tr = RigidTransform::new(*group.element(g), *t)?;
                let m = segment(&extract_features(&apply_transform(&tr, x), bb, &store)?, &store)?;
                worst = worst.max(m.values().max_abs_diff(base.values()));
            }
        }
        Ok((worst < 1e-5, format!("max abs error {worst:.2e}")))
    });
    vec![rot, trans, seg]
}

/// Motion head on a single-part pair `(X, T∘X)`; returns the angular error
/// in degrees.
fn head_error(model: &ModelConfig, store: &ParamStore, x: &PointCloud, t: &RigidTransform) -> Result<f64> {
    let xl = apply_transform(t, x);
    let mask = SoftMask::from_labels(&vec![0; x.len()], model.slots)?;
    let fk = extract_features(x, &model.backbone, store)?.pop().expect("one layer");
    let fl = extract_features(&xl, &model.backbone, store)?.pop().expect("one layer");
    let c = correlate(&part_features(&fk, &mask)?, &part_features(&fl, &mask)?)?;
    let flow: Vec<Vec3> = x.points().iter().zip(xl.points()).map(|(a, b)| b - a).collect();
    let m = estimate_motion(&c, x, &flow, &mask, model.motion_temperature)?;
    Ok(geodesic_angle(&m.slots[0].rotation, &t.rotation))
}

/// Motion-head angular error on pairs rotated by every group member
/// (expected exactly 0).
pub fn motion_head_group_members(n: usize, seed: u64) -> PropertyResult {
    timed("motion head exact on group rotations", || {
        let model = ModelConfig::default();
        let store = model.init_params(seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_cloud(&mut rng, n);
        let group = RotationGroup::shared();
        let mut worst = 0.0f64;
        for g in 0..GROUP_ORDER {
            let t = RigidTransform::new(*group.element(g), Vec3::new(0.1, -0.2, 0.05))?;
            worst = worst.max(head_error(&model, &store, &x, &t)?);
        }
        Ok((worst == 0.0, format!("max angular error {worst:.3e} deg")))
    })
}

/// Motion-head angular errors (degrees) for Haar-random rotations, one
/// fresh cloud per trial.
pub fn motion_head_random_errors(trials: usize, n: usize, seed: u64) -> Result<Vec<f64>> {
    let model = ModelConfig::default();
    let store = model.init_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|_| {
            let x = random_cloud(&mut rng, n);
            let t = RigidTransform::new(random_rotation(&mut rng), Vec3::zeros())?;
            head_error(&model, &store, &x, &t)
        })
        .collect()
}

fn random_problem(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Vec3>, Vec<f64>, RigidTransform) {
    let src: Vec<Vec3> = (0..n)
        .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let t = RigidTransform {
        rotation: random_rotation(rng),
        translation: Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
    };
    (src, w, t)
}

/// Weighted Kabsch recovers constructed transforms, and mirrored targets
/// still yield proper rotations.
pub fn kabsch_oracle(problems: usize, n: usize, seed: u64, opts: KabschOptions) -> Vec<PropertyResult> {
    let recover = timed("kabsch recovers constructed transforms", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..problems {
            let (src, w, t) = random_problem(&mut rng, n);
            let dst: Vec<Vec3> = src.iter().map(|p| t.apply(p)).collect();
            let fit = weighted_kabsch_with(&WeightedCorrespondence::new(src, dst, w)?, opts);
            worst = worst
                .max((fit.transform.rotation - t.rotation).amax())
                .max((fit.transform.translation - t.translation).amax());
        }
        Ok((worst < 1e-9, format!("max entry error {worst:.2e} over {problems} problems")))
    });
    let mirrored = timed("kabsch mirrored points keep det +1", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut bad = 0usize;
        let mut min_det = f64::INFINITY;
        for _ in 0..problems {
            let (src, w, t) = random_problem(&mut rng, n);
            let dst: Vec<Vec3> = src.iter().map(|p| t.apply(&Vec3::new(-p.x, p.y, p.z))).collect();
            let fit = weighted_kabsch_with(&WeightedCorrespondence::new(src, dst, w)?, opts);
            let det = fit.transform.rotation.determinant();
            min_det = min_det.min(det);
            bad += usize::from(det < 0.0);
        }
        Ok((bad == 0, format!("{bad} of {problems} fits had det -1 (min det {min_det:+.3})")))
    });
    vec![recover, mirrored]
}

/// Small network and scene used for the loss gradient checks.
pub fn gradient_setup(seed: u64) -> Result<(ModelConfig, ParamStore, PreparedScene)> {
    let model = ModelConfig {
        backbone: BackboneConfig {
            layer_dims: vec![4, 6],
            neighbors: 8,
            ..BackboneConfig::default()
        },
        slots: 3,
        hidden: 8,
        ..ModelConfig::default()
    };
    let spec = SceneSpec {
        min_parts: 2,
        max_parts: 2,
        points: 96,
        min_points_per_part: 32,
        seed,
        ..SceneSpec::default()
    };
    let store = model.init_params(seed)?;
    let ps = PreparedScene::new(generate_scene(&spec, 0)?, &model.backbone)?;
    Ok((model, store, ps))
}

pub const GRAD_STEP: f64 = 1e-6;
pub const GRAD_FLOOR: f64 = 1e-4;

/// Worst relative error between tape gradients and central differences of
/// one trainer loss graph over `entries` random parameter entries. β,
/// Kabsch motions and targets are frozen at the starting parameters.
pub fn loss_gradient_error(
    supervised: bool,
    pick: fn(&LossNodes) -> Option<Var>,
    entries: usize,
    seed: u64,
) -> Result<f64> {
    let (model, store, ps) = gradient_setup(seed)?;
    let cfg = TrainerConfig {
        supervised,
        ..TrainerConfig::default()
    };
    let mut tape = Tape::new();
    let nodes = pair_forward(&mut tape, &store, &model, &ps.k, &ps.l)?;
    let state = cold_start(&ps.scene)?;
    let plan = step_context(&tape, &nodes, &ps.scene, &state, &cfg, true, None)?.plan;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let picks: Vec<(String, usize)> = (0..entries)
        .map(|_| {
            let n = &names[rng.gen_range(0..names.len())];
            let len = store.get(n).map_or(1, |t| t.data().len());
            (n.clone(), rng.gen_range(0..len))
        })
        .collect();
    gradient_check(&store, &picks, GRAD_STEP, GRAD_FLOOR, |tape, s| -> Result<Var> {
        let nodes = pair_forward(tape, s, &model, &ps.k, &ps.l)?;
        let l = loss_on_tape(tape, &nodes, &plan)?;
        pick(&l).ok_or_else(|| crate::Error::Shape("loss term absent for this scene".into()))
    })
}

pub fn loss_gradients(entries: usize, seed: u64) -> Vec<PropertyResult> {
    let graphs: [(&str, bool, fn(&LossNodes) -> Option<Var>); 4] = [
        ("gradient: segmentation loss", false, |l| Some(l.seg)),
        ("gradient: motion loss", false, |l| l.motion),
        ("gradient: total loss", false, |l| Some(l.total)),
        ("gradient: supervised segmentation loss", true, |l| Some(l.seg)),
    ];
    graphs
        .iter()
        .map(|&(name, sup, pick)| {
            timed(name, || {
                let worst = loss_gradient_error(sup, pick, entries, seed)?;
                Ok((worst < 1e-4, format!("max relative error {worst:.2e} over {entries} entries")))
            })
        })
        .collect()
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..k)).collect()
}

fn brute_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut agree, mut total) = (0usize, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            total += 1;
            agree += usize::from((a[i] == a[j]) == (b[i] == b[j]));
        }
    }
    agree as f64 / total as f64
}

fn brute_best(w: &[Vec<f64>]) -> f64 {
    fn rec(w: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == w.len() {
            return 0.0;
        }
        // leaving a row unmatched is allowed only if columns run out
        let mut best = if used.iter().all(|&u| u) { rec(w, row + 1, used) } else { f64::NEG_INFINITY };
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                best = best.max(w[row][c] + rec(w, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    let cols = w.first().map_or(0, Vec::len);
    if w.len() > cols {
        // transpose so rows never outnumber columns
        let t: Vec<Vec<f64>> = (0..cols).map(|c| w.iter().map(|r| r[c]).collect()).collect();
        return brute_best(&t);
    }
    rec(w, 0, &mut vec![false; cols])
}

/// Rand index against pair counting, Hungarian against permutation search,
/// and perfect predictions scoring 1 everywhere.
pub fn metric_oracles(trials: usize, seed: u64) -> Vec<PropertyResult> {
    let ri = timed("rand index equals pair counting", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mismatches = 0usize;
        for _ in 0..trials {
            let n = rng.gen_range(2..=50);
            let (ka, kb) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
            let a = random_labels(&mut rng, n, ka);
            let b = random_labels(&mut rng, n, kb);
            mismatches += usize::from(rand_index(&a, &b) != brute_rand_index(&a, &b));
        }
        Ok((mismatches == 0, format!("{mismatches} of {trials} partitions differ")))
    });
    let hungarian = timed("hungarian equals permutation search", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let (r, c) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
            let w: Vec<Vec<f64>> = (0..r).map(|_| (0..c).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
            let assign = max_weight_assignment(&w);
            let mut cols_used = vec![false; c];
            let mut total = 0.0;
            for (i, a) in assign.iter().enumerate() {
                if let Some(j) = *a {
                    if cols_used[j] {
                        return Ok((false, format!("column {j} assigned twice")));
                    }
                    cols_used[j] = true;
                    total += w[i][j];
                }
            }
            worst = worst.max((total - brute_best(&w)).abs());
        }
        Ok((worst < 1e-12, format!("max weight gap {worst:.2e} over {trials} matrices")))
    });
    let perfect = timed("perfect predictions score 1", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        for _ in 0..trials {
            let k = rng.gen_range(1..=6);
            let mut labels = random_labels(&mut rng, 50, k);
            labels[..k].iter_mut().enumerate().for_each(|(i, l)| *l = i);
            let s = segmentation_scores(&SoftMask::from_labels(&labels, 8)?, &labels)?;
            let all = [s.ap, s.pq, s.f1, s.precision, s.recall, s.miou, s.ri];
            if all.iter().any(|&v| v != 1.0) {
                return Ok((false, format!("scores {all:?}")));
            }
        }
        Ok((true, "all seven metrics equal 1.0".into()))
    });
    vec![ri, hungarian, perfect]
}

/// The full suite as run by the `check` command.
pub fn run_all(opts: CheckOptions) -> Vec<PropertyResult> {
    let kabsch = KabschOptions {
        reflection_fix: opts.reflection_fix,
    };
    let mut out = vec![group_algebra()];
    out.extend(equivariance(10, 128, opts.seed));
    out.push(motion_head_group_members(128, opts.seed));
    out.extend(kabsch_oracle(1000, 50, opts.seed, kabsch));
    out.extend(loss_gradients(100, opts.seed));
    out.extend(metric_oracles(100, opts.seed));
    out
}

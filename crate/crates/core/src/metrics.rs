//! Instance-segmentation and motion evaluation.

use serde::{Deserialize, Serialize};

use crate::geom::{geodesic_angle, RigidTransform, Vec3};
use crate::heads::{PartMotionSet, SoftMask};
use crate::{Error, Result};

pub const IOU_THRESHOLD: f64 = 0.5;

/// Per-point argmax; ties go to the lowest slot.
pub fn hard_mask(m: &SoftMask) -> Vec<usize> {
    (0..m.n_points())
        .map(|i| {
            let row = m.values().row(i);
            let mut best = 0;
            for (s, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = s;
                }
            }
            best
        })
        .collect()
}

/// A predicted or ground-truth instance: its label and point count.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub label: usize,
    pub size: usize,
    pub confidence: f64,
}

/// Non-empty labels in ascending order.
pub fn instances_from_labels(labels: &[usize]) -> Vec<Instance> {
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_labels];
    for &l in labels {
        counts[l] += 1;
    }
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(label, &size)| Instance { label, size, confidence: 1.0 })
        .collect()
}

/// Instances of the hard mask, each scored by the mean soft weight of its
/// own slot over its points. Empty slots are dropped.
pub fn predicted_instances(m: &SoftMask) -> (Vec<usize>, Vec<Instance>) {
    let labels = hard_mask(m);
    let mut inst = instances_from_labels(&labels);
    for ins in &mut inst {
        let total: f64 = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == ins.label)
            .map(|(i, _)| m.get(i, ins.label))
            .sum();
        ins.confidence = total / ins.size as f64;
    }
    (labels, inst)
}

/// Dense IoU matrix `pred × gt` from two labelings of the same points.
pub fn iou_matrix(pred_labels: &[usize], pred: &[Instance], gt_labels: &[usize], gt: &[Instance]) -> Vec<Vec<f64>> {
    let pred_index = index_of(pred);
    let gt_index = index_of(gt);
    let mut inter = vec![vec![0usize; gt.len()]; pred.len()];
    for (&p, &g) in pred_labels.iter().zip(gt_labels) {
        inter[pred_index[p]][gt_index[g]] += 1;
    }
    inter
        .iter()
        .enumerate()
        .map(|(a, row)| {
            row.iter()
                .enumerate()
                .map(|(b, &x)| x as f64 / (pred[a].size + gt[b].size - x) as f64)
                .collect()
        })
        .collect()
}

fn index_of(inst: &[Instance]) -> Vec<usize> {
    let n = inst.iter().map(|i| i.label + 1).max().unwrap_or(0);
    let mut idx = vec![usize::MAX; n];
    for (k, i) in inst.iter().enumerate() {
        idx[i.label] = k;
    }
    idx
}

/// Maximum-weight assignment for a rectangular weight matrix (O(n³)
/// Hungarian on the padded square cost matrix). Returns the column chosen
/// for each row, if any.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -weights[i][j]
        } else {
            0.0
        }
    };
    // Potentials-based shortest augmenting path, 1-indexed with a sentinel.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// A matched `(pred index, gt index, IoU)` pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchedPair {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

/// Hungarian matching on IoU; pairs at or below the threshold are dropped.
pub fn match_instances(iou: &[Vec<f64>]) -> Vec<MatchedPair> {
    max_weight_assignment(iou)
        .into_iter()
        .enumerate()
        .filter_map(|(a, b)| b.map(|b| MatchedPair { pred: a, gt: b, iou: iou[a][b] }))
        .filter(|m| m.iou > IOU_THRESHOLD)
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentationEval {
    pub ap: f64,
    pub pq: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub miou: f64,
    pub ri: f64,
}

/// Area under the precision/recall curve from confidence-ranked
/// predictions, using the running-max interpolated precision.
pub fn average_precision(ranked: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| ranked[b].0.total_cmp(&ranked[a].0).then(a.cmp(&b)));
    let mut tp = 0usize;
    let mut prec = Vec::with_capacity(order.len());
    let mut hits = Vec::with_capacity(order.len());
    for (k, &i) in order.iter().enumerate() {
        if ranked[i].1 {
            tp += 1;
        }
        prec.push(tp as f64 / (k + 1) as f64);
        hits.push(ranked[i].1);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let area = hits.iter().zip(&prec).filter(|(h, _)| **h).fold(0.0, |acc, (_, p)| acc + p);
    area / n_gt as f64
}

/// Pair-counting agreement over all `N(N−1)/2` point pairs.
pub fn rand_index(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as u64;
    if n < 2 {
        return 1.0;
    }
    let pairs = |x: u64| x * x.saturating_sub(1) / 2;
    let na = a.iter().max().map_or(0, |m| m + 1);
    let nb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; na * nb];
    let mut ra = vec![0u64; na];
    let mut cb = vec![0u64; nb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * nb + y] += 1;
        ra[x] += 1;
        cb[y] += 1;
    }
    let same_both: u64 = table.iter().map(|&c| pairs(c)).sum();
    let same_a: u64 = ra.iter().map(|&c| pairs(c)).sum();
    let same_b: u64 = cb.iter().map(|&c| pairs(c)).sum();
    let total = pairs(n);
    let disagreements = same_a + same_b - 2 * same_both;
    (total - disagreements) as f64 / total as f64
}

/// Full segmentation score from hard predicted labels with per-instance
/// confidences and ground-truth labels.
pub fn segmentation_scores_from_labels(
    pred_labels: &[usize],
    pred: &[Instance],
    gt_labels: &[usize],
) -> Result<(SegmentationEval, Vec<MatchedPair>)> {
    if pred_labels.len() != gt_labels.len() {
        return Err(Error::Shape(format!("{} predicted vs {} ground-truth labels", pred_labels.len(), gt_labels.len())));
    }
    let gt = instances_from_labels(gt_labels);
    if gt.is_empty() {
        return Err(Error::Shape("ground truth has no instances".into()));
    }
    let iou = iou_matrix(pred_labels, pred, gt_labels, &gt);
    let matches = match_instances(&iou);
    let tp = matches.len() as f64;
    let (np, ng) = (pred.len() as f64, gt.len() as f64);
    let precision = if np > 0.0 { tp / np } else { 0.0 };
    let recall = tp / ng;
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    let iou_sum: f64 = matches.iter().map(|m| m.iou).sum();
    let denom = tp + 0.5 * (np - tp) + 0.5 * (ng - tp);
    let pq = if denom > 0.0 { iou_sum / denom } else { 0.0 };
    let miou = iou_sum / ng;
    let mut ranked: Vec<(f64, bool)> = pred.iter().map(|p| (p.confidence, false)).collect();
    for m in &matches {
        ranked[m.pred].1 = true;
    }
    let ap = average_precision(&ranked, gt.len());
    let ri = rand_index(pred_labels, gt_labels);
    Ok((
        SegmentationEval {
            ap,
            pq,
            f1,
            precision,
            recall,
            miou,
            ri,
        },
        matches,
    ))
}

/// Scores a soft mask against ground-truth part labels.
pub fn segmentation_scores(pred: &SoftMask, gt_labels: &[usize]) -> Result<SegmentationEval> {
    let (labels, inst) = predicted_instances(pred);
    Ok(segmentation_scores_from_labels(&labels, &inst, gt_labels)?.0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MotionEval {
    pub epe3d: f64,
    /// Mean geodesic error (degrees) over matched parts; absent if none matched.
    pub angular_error: Option<f64>,
    pub translation_error: Option<f64>,
    /// Per ground-truth part; `None` for unmatched parts.
    pub per_part_translation_error: Vec<Option<f64>>,
    pub per_part_angular_error: Vec<Option<f64>>,
}

pub fn epe3d(flow: &[Vec3], clean: &[Vec3]) -> f64 {
    if flow.is_empty() {
        return 0.0;
    }
    flow.iter().zip(clean).map(|(a, b)| (a - b).norm()).sum::<f64>() / flow.len() as f64
}

/// Motion accuracy. `matches` maps predicted instances to ground-truth
/// parts (as returned by segmentation matching); `pred_slots[k]` is the
/// motion slot of predicted instance `k`.
pub fn motion_scores(
    flow: &[Vec3],
    clean_flow: &[Vec3],
    motions: &PartMotionSet,
    pred_slots: &[usize],
    matches: &[MatchedPair],
    gt_transforms: &[RigidTransform],
) -> Result<MotionEval> {
    if flow.len() != clean_flow.len() {
        return Err(Error::Shape(format!("{} flow vectors vs {} clean", flow.len(), clean_flow.len())));
    }
    let mut per_t = vec![None; gt_transforms.len()];
    let mut per_r = vec![None; gt_transforms.len()];
    for m in matches {
        let slot = &motions.slots[pred_slots[m.pred]];
        let gt = &gt_transforms[m.gt];
        per_r[m.gt] = Some(geodesic_angle(&slot.rotation, &gt.rotation));
        per_t[m.gt] = Some((slot.translation - gt.translation).norm());
    }
    let mean = |v: &[Option<f64>]| {
        let xs: Vec<f64> = v.iter().flatten().copied().collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    };
    Ok(MotionEval {
        epe3d: epe3d(flow, clean_flow),
        angular_error: mean(&per_r),
        translation_error: mean(&per_t),
        per_part_translation_error: per_t,
        per_part_angular_error: per_r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{softmax_in_place, Tensor};
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_rand_index(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let mut agree = 0usize;
        let mut total = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                total += 1;
                if (a[i] == a[j]) == (b[i] == b[j]) {
                    agree += 1;
                }
            }
        }
        agree as f64 / total as f64
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..=p.len() {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    /// Best total weight over all partial injections rows → cols.
    fn brute_best(w: &[Vec<f64>]) -> f64 {
        let rows = w.len();
        let cols = w[0].len();
        let n = rows.max(cols);
        permutations(n)
            .iter()
            .map(|p| (0..rows).filter(|&i| p[i] < cols).map(|i| w[i][p[i]]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn hard_mask_rules() {
        let m = SoftMask::from_labels(&[2, 0, 1], 3).unwrap();
        assert_eq!(hard_mask(&m), vec![2, 0, 1]);
        let u = SoftMask::new(Tensor::filled(2, 4, 0.25)).unwrap();
        assert_eq!(hard_mask(&u), vec![0, 0]);
    }

    #[test]
    fn hard_mask_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tensor::zeros(50, 5);
        for i in 0..50 {
            t.row_mut(i).iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            softmax_in_place(t.row_mut(i));
        }
        let m = SoftMask::new(t.clone()).unwrap();
        for (i, &h) in hard_mask(&m).iter().enumerate() {
            let max = t.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(t.get(i, h), max);
            assert!(t.row(i)[..h].iter().all(|&v| v < max));
        }
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let rows = rng.gen_range(1..=6);
            let cols = rng.gen_range(1..=6);
            let w: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
            let assign = max_weight_assignment(&w);
            let got: f64 = assign.iter().enumerate().filter_map(|(i, j)| j.map(|j| w[i][j])).sum();
            assert!((got - brute_best(&w)).abs() < 1e-12);
            let mut used: Vec<usize> = assign.iter().flatten().copied().collect();
            used.sort();
            used.dedup();
            assert_eq!(used.len(), assign.iter().flatten().count());
            assert_eq!(used.len(), rows.min(cols));
        }
    }

    #[test]
    fn identical_partitions_match_perfectly() {
        let labels = vec![0, 0, 1, 1, 1, 2];
        let pred = instances_from_labels(&labels);
        let (eval, matches) = segmentation_scores_from_labels(&labels, &pred, &labels).unwrap();
        assert_eq!(matches.len(), 3);
        assert!(matches.iter().all(|m| m.iou == 1.0));
        for v in [eval.ap, eval.pq, eval.f1, eval.precision, eval.recall, eval.miou, eval.ri] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn perfect_soft_mask_scores_one() {
        let labels = vec![1, 1, 0, 0, 3, 3, 3];
        let m = SoftMask::from_labels(&labels, 8).unwrap();
        let eval = segmentation_scores(&m, &[0, 0, 1, 1, 2, 2, 2]).unwrap();
        assert_eq!(eval.ap, 1.0);
        assert_eq!(eval.pq, 1.0);
        assert_eq!(eval.miou, 1.0);
        assert_eq!(eval.ri, 1.0);
    }

    #[test]
    fn disjoint_predictions_do_not_match() {
        let gt = vec![0, 0, 0, 0];
        let pred = vec![0, 1, 2, 3];
        let inst = instances_from_labels(&pred);
        let (eval, matches) = segmentation_scores_from_labels(&pred, &inst, &gt).unwrap();
        assert!(matches.is_empty());
        assert_eq!(eval.recall, 0.0);
        assert_eq!(eval.ap, 0.0);
    }

    #[test]
    fn single_instance_against_two_parts() {
        assert!((rand_index(&[0, 0, 0, 0], &[0, 0, 1, 1]) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn no_hits_give_positive_zero() {
        let ap = average_precision(&[(0.9, false), (0.5, false)], 2);
        assert_eq!(ap.to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn rand_index_matches_pair_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.gen_range(2..=50);
            let ka = rng.gen_range(1..=6);
            let kb = rng.gen_range(1..=6);
            let a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..ka)).collect();
            let b: Vec<usize> = (0..n).map(|_| rng.gen_range(0..kb)).collect();
            assert_eq!(rand_index(&a, &b), brute_rand_index(&a, &b));
        }
    }

    #[test]
    fn ap_curve_examples() {
        assert_eq!(average_precision(&[(0.9, true), (0.8, true)], 2), 1.0);
        // a confident false positive halves the precision at the only hit
        assert_eq!(average_precision(&[(0.9, false), (0.5, true)], 1), 0.5);
        assert_eq!(average_precision(&[(0.9, true), (0.5, false)], 2), 0.5);
    }

    #[test]
    fn motion_scores_basics() {
        let clean = vec![Vec3::new(0.2, 0.0, 0.0); 4];
        let off: Vec<Vec3> = clean.iter().map(|c| c + Vec3::new(0.1, 0.0, 0.0)).collect();
        let gt = vec![RigidTransform::from_translation(Vec3::new(0.2, 0.0, 0.0))];
        let mut slot = crate::heads::SlotMotion::inactive();
        slot.translation = gt[0].translation;
        let motions = PartMotionSet { slots: vec![slot] };
        let matches = vec![MatchedPair { pred: 0, gt: 0, iou: 1.0 }];
        let e = motion_scores(&clean, &clean, &motions, &[0], &matches, &gt).unwrap();
        assert_eq!(e.epe3d, 0.0);
        assert_eq!(e.angular_error, Some(0.0));
        let e = motion_scores(&off, &clean, &motions, &[0], &[], &gt).unwrap();
        assert!((e.epe3d - 0.1).abs() < 1e-15);
        assert_eq!(e.angular_error, None);
    }

    proptest! {
        #[test]
        fn scores_are_label_permutation_invariant_and_bounded(
            seed in 0u64..500,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(4..40);
            let gt: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let pred: Vec<usize> = gt.iter().map(|&g| if rng.gen_bool(0.8) { g } else { rng.gen_range(0..5) }).collect();
            let inst = instances_from_labels(&pred);
            let inst: Vec<Instance> = inst.into_iter().map(|mut i| { i.confidence = (i.label as f64 * 0.37).fract(); i }).collect();
            let (e, _) = segmentation_scores_from_labels(&pred, &inst, &gt).unwrap();
            prop_assert!(e.pq <= e.f1 + 1e-12 && e.f1 <= 1.0 && e.ap <= 1.0 + 1e-12);
            if e.precision + e.recall > 0.0 {
                prop_assert!((e.f1 - 2.0 * e.precision * e.recall / (e.precision + e.recall)).abs() < 1e-12);
            }
            let mut gperm: Vec<usize> = (0..4).collect();
            gperm.shuffle(&mut rng);
            let mut pperm: Vec<usize> = (0..5).collect();
            pperm.shuffle(&mut rng);
            let gt2: Vec<usize> = gt.iter().map(|&g| gperm[g]).collect();
            let pred2: Vec<usize> = pred.iter().map(|&p| pperm[p]).collect();
            let inst2: Vec<Instance> = instances_from_labels(&pred2).into_iter().map(|mut i| {
                let orig = pperm.iter().position(|&x| x == i.label).unwrap();
                i.confidence = (orig as f64 * 0.37).fract();
                i
            }).collect();
            let (e2, _) = segmentation_scores_from_labels(&pred2, &inst2, &gt2).unwrap();
            for (a, b) in [(e.ap, e2.ap), (e.pq, e2.pq), (e.f1, e2.f1), (e.miou, e2.miou), (e.ri, e2.ri)] {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

//! Supervised losses and one-to-one matching.
//!
//! Matching minimizes `w_cls * (1 - P(class)) + w_mask * L_m` over injections
//! of ground-truth segments into queries, where `L_m = eta1 * focal + eta2 *
//! dice` is also the mask loss. Classification is per-class binary
//! cross-entropy over independent sigmoid heads, restricted to the currently
//! supervised classes; the caption loss is a teacher-forced summed NLL.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::synth_data::ClassId;

const PROB_FLOOR: f64 = 1e-12;

/// Multi-objective weights. Defaults follow the experiment configuration:
/// caption weight 2.0, focal weight 20.0, dice weight 1.0.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_cap: f64,
    pub eta_focal: f64,
    pub eta_dice: f64,
    /// Focal-loss focusing parameter.
    pub gamma_focal: f64,
    /// Dice smoothing term.
    pub dice_eps: f64,
    /// Matching cost weight on the classification term.
    pub w_cls: f64,
    /// Matching cost weight on the mask term.
    pub w_mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cap: 2.0,
            eta_focal: 20.0,
            eta_dice: 1.0,
            gamma_focal: 2.0,
            dice_eps: 1.0,
            w_cls: 2.0,
            w_mask: 1.0,
        }
    }
}

/// One ground-truth segment prepared for matching: class plus a {0,1} mask
/// flattened to feature resolution.
#[derive(Debug, Clone)]
pub struct MatchTarget {
    pub class_id: ClassId,
    pub mask: Array1<f64>,
}

/// Injective map from ground-truth segment index to query index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    /// (target index, query index), sorted by target index.
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn query_of(&self, target: usize) -> Option<usize> {
        self.pairs.iter().find(|(t, _)| *t == target).map(|(_, q)| *q)
    }

    pub fn matched_queries(&self) -> BTreeSet<usize> {
        self.pairs.iter().map(|(_, q)| *q).collect()
    }
}

/// Minimum-cost assignment of every row to a distinct column (rows <= cols),
/// the classic O(n^3) potentials algorithm. Ascending scan order makes
/// tie-breaking deterministic: the lowest (row, column) pair wins.
pub fn solve_assignment(cost: &Array2<f64>) -> Vec<usize> {
    let r = cost.nrows();
    let n = cost.ncols();
    assert!(r <= n, "need at least as many columns as rows");
    if r == 0 {
        return Vec::new();
    }
    let mut u = vec![0.0f64; r + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=r {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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

    let mut assign = vec![usize::MAX; r];
    for j in 1..=n {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Mean focal loss of probabilities against a {0,1} target, value level.
pub fn focal_value(probs: &Array1<f64>, target: &Array1<f64>, gamma: f64) -> f64 {
    let mut acc = 0.0;
    for (&p, &t) in probs.iter().zip(target.iter()) {
        let pt = (p * t + (1.0 - p) * (1.0 - t)).max(PROB_FLOOR);
        acc += -(1.0 - pt).powf(gamma) * pt.ln();
    }
    acc / probs.len().max(1) as f64
}

/// Dice loss of probabilities against a {0,1} target, value level.
pub fn dice_value(probs: &Array1<f64>, target: &Array1<f64>, eps: f64) -> f64 {
    let inter: f64 = probs.iter().zip(target.iter()).map(|(&p, &t)| p * t).sum();
    let den: f64 = probs.sum() + target.sum() + eps;
    1.0 - (2.0 * inter + eps) / den
}

fn check_binary(target: &Array1<f64>) -> Result<()> {
    if target.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(CoreError::Label("mask target must be binary".into()));
    }
    Ok(())
}

/// Matches ground-truth segments to queries by minimum summed cost.
///
/// `class_probs` is (N, K) with columns in `class_ids` order; `mask_probs` is
/// (N, P). Errors when a target class has no head or targets exceed queries.
pub fn hungarian_match(
    class_probs: &Array2<f64>,
    class_ids: &[ClassId],
    mask_probs: &Array2<f64>,
    targets: &[MatchTarget],
    weights: &LossWeights,
) -> Result<Assignment> {
    let n = class_probs.nrows();
    if targets.len() > n {
        return Err(CoreError::Capacity { targets: targets.len(), queries: n });
    }
    if targets.is_empty() {
        return Ok(Assignment::default());
    }

    let mut cost = Array2::zeros((targets.len(), n));
    for (ti, t) in targets.iter().enumerate() {
        check_binary(&t.mask)?;
        let col = class_ids
            .iter()
            .position(|c| *c == t.class_id)
            .ok_or_else(|| CoreError::Classifier(format!("no head for class {}", t.class_id)))?;
        for q in 0..n {
            let p_cls = class_probs[[q, col]];
            let row = mask_probs.row(q).to_owned();
            let lm = weights.eta_focal * focal_value(&row, &t.mask, weights.gamma_focal)
                + weights.eta_dice * dice_value(&row, &t.mask, weights.dice_eps);
            cost[[ti, q]] = weights.w_cls * (1.0 - p_cls) + weights.w_mask * lm;
        }
    }

    let cols = solve_assignment(&cost);
    let pairs = cols.into_iter().enumerate().collect();
    Ok(Assignment { pairs })
}

// ---------------------------------------------------------------------------
// tape losses
// ---------------------------------------------------------------------------

/// Focal loss on the tape: mean over pixels of `-(1-p_t)^gamma * ln(p_t)`.
pub fn focal_loss(tape: &mut Tape, probs: Var, target: &Array1<f64>, gamma: f64) -> Result<Var> {
    check_binary(target)?;
    let shape = tape.value(probs).shape().to_vec();
    debug_assert_eq!(shape.iter().product::<usize>(), target.len());
    let t = tape.leaf(target.clone().into_dyn().into_shape_with_order(shape.clone()).unwrap());
    let ones = tape.leaf(ndarray::ArrayD::from_elem(shape, 1.0));

    let one_m_p = tape.sub(ones, probs);
    let one_m_t = tape.sub(ones, t);
    let a = tape.mul(probs, t);
    let b = tape.mul(one_m_p, one_m_t);
    let pt = tape.add(a, b);
    let pt_safe = tape.clamp_min(pt, PROB_FLOOR);
    let log_pt = tape.log(pt_safe);
    let one_m_pt = tape.sub(ones, pt);
    let focus = tape.pow(one_m_pt, gamma);
    let prod = tape.mul(focus, log_pt);
    let neg = tape.neg(prod);
    Ok(tape.mean(neg))
}

/// Dice loss on the tape: `1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)`.
pub fn dice_loss(tape: &mut Tape, probs: Var, target: &Array1<f64>, eps: f64) -> Result<Var> {
    check_binary(target)?;
    let t_sum: f64 = target.sum();
    if eps == 0.0 && t_sum == 0.0 {
        return Err(CoreError::Domain("dice on an empty mask needs eps > 0".into()));
    }
    let shape = tape.value(probs).shape().to_vec();
    let t = tape.leaf(target.clone().into_dyn().into_shape_with_order(shape).unwrap());
    let inter = tape.mul(probs, t);
    let inter = tape.sum(inter);
    let num = tape.mul_scalar(inter, 2.0);
    let num = tape.add_scalar(num, eps);
    let p_sum = tape.sum(probs);
    let den = tape.add_scalar(p_sum, t_sum + eps);
    let ratio = tape.div(num, den);
    let one = tape.scalar_leaf(1.0);
    Ok(tape.sub(one, ratio))
}

/// Mask loss over matched pairs only: `sum eta1*focal + eta2*dice`. Returns a
/// zero scalar when nothing is matched.
pub fn seg_loss(
    tape: &mut Tape,
    mask_logits: Var,
    targets: &[MatchTarget],
    assignment: &Assignment,
    weights: &LossWeights,
) -> Result<Var> {
    let n = tape.value(mask_logits).shape()[0];
    let mut total: Option<Var> = None;
    for &(ti, q) in &assignment.pairs {
        if ti >= targets.len() || q >= n {
            return Err(CoreError::Contract(format!(
                "assignment pair ({ti}, {q}) out of range"
            )));
        }
        let row = tape.gather_rows(mask_logits, &[q]);
        let probs = tape.sigmoid(row);
        let f = focal_loss(tape, probs, &targets[ti].mask, weights.gamma_focal)?;
        let d = dice_loss(tape, probs, &targets[ti].mask, weights.dice_eps)?;
        let f = tape.mul_scalar(f, weights.eta_focal);
        let d = tape.mul_scalar(d, weights.eta_dice);
        let pair = tape.add(f, d);
        total = Some(match total {
            Some(acc) => tape.add(acc, pair),
            None => pair,
        });
    }
    Ok(total.unwrap_or_else(|| tape.scalar_leaf(0.0)))
}

fn bce_terms(tape: &mut Tape, probs: Var, target: Var, ones: Var) -> Var {
    let p_safe = tape.clamp_min(probs, PROB_FLOOR);
    let log_p = tape.log(p_safe);
    let one_m_p = tape.sub(ones, probs);
    let q_safe = tape.clamp_min(one_m_p, PROB_FLOOR);
    let log_q = tape.log(q_safe);
    let one_m_t = tape.sub(ones, target);
    let a = tape.mul(target, log_p);
    let b = tape.mul(one_m_t, log_q);
    let s = tape.add(a, b);
    tape.neg(s)
}

/// Per-class BCE over sigmoid heads. Matched queries are pushed toward their
/// target's one-hot over the supervised classes (no-object toward 0);
/// unmatched queries toward no-object (supervised class heads toward 0).
/// Heads outside `supervised` receive exactly zero gradient.
pub fn cls_loss(
    tape: &mut Tape,
    class_logits: Var,
    no_obj_logits: Var,
    class_ids: &[ClassId],
    targets: &[MatchTarget],
    assignment: &Assignment,
    supervised: &BTreeSet<ClassId>,
) -> Result<Var> {
    let shape = tape.value(class_logits).shape().to_vec();
    let (n, k) = (shape[0], shape[1]);

    let mut t_mat = Array2::<f64>::zeros((n, k));
    let mut w_mat = Array2::<f64>::zeros((n, k));
    for (col, cid) in class_ids.iter().enumerate() {
        if supervised.contains(cid) {
            w_mat.column_mut(col).fill(1.0);
        }
    }
    for &(ti, q) in &assignment.pairs {
        let cid = targets[ti].class_id;
        let col = class_ids
            .iter()
            .position(|c| *c == cid)
            .ok_or_else(|| CoreError::Classifier(format!("no head for class {cid}")))?;
        t_mat[[q, col]] = 1.0;
    }

    let matched = assignment.matched_queries();
    let mut no_t = Array2::<f64>::zeros((n, 1));
    for q in 0..n {
        if !matched.contains(&q) {
            no_t[[q, 0]] = 1.0;
        }
    }

    let probs = tape.sigmoid(class_logits);
    let ones = tape.leaf(ndarray::ArrayD::from_elem(vec![n, k], 1.0));
    let t_leaf = tape.leaf2(t_mat);
    let bce = bce_terms(tape, probs, t_leaf, ones);
    let w_leaf = tape.leaf2(w_mat);
    let weighted = tape.mul(bce, w_leaf);
    let cls_sum = tape.sum(weighted);

    let no_probs = tape.sigmoid(no_obj_logits);
    let ones1 = tape.leaf(ndarray::ArrayD::from_elem(vec![n, 1], 1.0));
    let no_leaf = tape.leaf2(no_t);
    let no_bce = bce_terms(tape, no_probs, no_leaf, ones1);
    let no_sum = tape.sum(no_bce);

    let total = tape.add(cls_sum, no_sum);
    Ok(tape.mul_scalar(total, 1.0 / n as f64))
}

/// Teacher-forced caption NLL summed over positions: logits row i scores
/// target i (START excluded, END included).
pub fn caption_loss(tape: &mut Tape, logits: Var, target_ids: &[u32]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    let (l, v) = (shape[0], shape[1]);
    if target_ids.len() > l {
        return Err(CoreError::Length(format!(
            "{} target tokens but only {l} logit rows",
            target_ids.len()
        )));
    }
    if let Some(bad) = target_ids.iter().find(|&&t| t as usize >= v) {
        return Err(CoreError::Vocabulary(format!("id {bad}")));
    }
    // rows beyond the target length are ignored
    let rows: Vec<usize> = (0..target_ids.len()).collect();
    let used = tape.gather_rows(logits, &rows);
    let lse = tape.logsumexp_rows(used);
    let lse_sum = tape.sum(lse);
    let mut onehot = Array2::<f64>::zeros((target_ids.len(), v));
    for (i, &t) in target_ids.iter().enumerate() {
        onehot[[i, t as usize]] = 1.0;
    }
    let oh = tape.leaf2(onehot);
    let picked = tape.mul(used, oh);
    let picked_sum = tape.sum(picked);
    Ok(tape.sub(lse_sum, picked_sum))
}

/// Scalar loss components of one sample.
pub struct LossComponents {
    pub cls: Var,
    pub seg: Var,
    pub cap: Var,
    pub tkd: Option<Var>,
}

/// Weighted total: `cls + seg + lambda * cap`, plus the distillation term only
/// at CL steps.
pub fn total_loss(
    tape: &mut Tape,
    parts: &LossComponents,
    weights: &LossWeights,
    is_cl_step: bool,
) -> Var {
    let cap = tape.mul_scalar(parts.cap, weights.lambda_cap);
    let s = tape.add(parts.cls, parts.seg);
    let mut total = tape.add(s, cap);
    if is_cl_step {
        if let Some(tkd) = parts.tkd {
            total = tape.add(total, tkd);
        }
    }
    total
}

/// Value-level total for quick checks and reporting.
pub fn total_loss_value(cls: f64, seg: f64, cap: f64, tkd: f64, lambda: f64, is_cl_step: bool) -> f64 {
    cls + seg + lambda * cap + if is_cl_step { tkd } else { 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.scalar(v)
    }

    #[test]
    fn diagonal_costs_match_diagonally() {
        let cost = array![[0.0, 1.0], [1.0, 0.0]];
        assert_eq!(solve_assignment(&cost), vec![0, 1]);
    }

    #[test]
    fn dominant_query_wins() {
        // one target; query 2 has perfect class and mask
        let class_probs = array![[0.1], [0.2], [0.99], [0.3]];
        let mask_probs = array![
            [0.5, 0.5, 0.5, 0.5],
            [0.2, 0.2, 0.2, 0.2],
            [0.999, 0.999, 0.001, 0.001],
            [0.5, 0.1, 0.9, 0.4]
        ];
        let targets = vec![MatchTarget {
            class_id: 3,
            mask: array![1.0, 1.0, 0.0, 0.0],
        }];
        let a = hungarian_match(&class_probs, &[3], &mask_probs, &targets, &LossWeights::default())
            .unwrap();
        assert_eq!(a.pairs, vec![(0, 2)]);
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = crate::rng::rng_for(&[0x51]);
        for _ in 0..50 {
            let mut cost = Array2::zeros((4, 6));
            cost.mapv_inplace(|_| rng.gen_range(0.0..10.0));
            let cols = solve_assignment(&cost);
            let ours: f64 = cols.iter().enumerate().map(|(r, &c)| cost[[r, c]]).sum();

            // enumerate all injections of 4 rows into 6 columns
            let mut best = f64::INFINITY;
            for a in 0..6 {
                for b in 0..6 {
                    for c in 0..6 {
                        for d in 0..6 {
                            let cols = [a, b, c, d];
                            let mut seen = [false; 6];
                            let mut ok = true;
                            for &x in &cols {
                                if seen[x] {
                                    ok = false;
                                    break;
                                }
                                seen[x] = true;
                            }
                            if ok {
                                let s: f64 =
                                    cols.iter().enumerate().map(|(r, &x)| cost[[r, x]]).sum();
                                best = best.min(s);
                            }
                        }
                    }
                }
            }
            assert_abs_diff_eq!(ours, best, epsilon = 1e-9);
        }
    }

    #[test]
    fn capacity_error_when_targets_exceed_queries() {
        let class_probs = Array2::from_elem((1, 1), 0.5);
        let mask_probs = Array2::from_elem((1, 4), 0.5);
        let t = MatchTarget { class_id: 1, mask: Array1::zeros(4) };
        let err = hungarian_match(
            &class_probs,
            &[1],
            &mask_probs,
            &[t.clone(), t],
            &LossWeights::default(),
        );
        assert!(matches!(err, Err(CoreError::Capacity { targets: 2, queries: 1 })));
    }

    #[test]
    fn focal_analytic_values() {
        // gamma = 0 equals BCE
        let p: Array1<f64> = array![0.3, 0.8, 0.6];
        let t: Array1<f64> = array![0.0, 1.0, 1.0];
        let bce: f64 = p
            .iter()
            .zip(t.iter())
            .map(|(&p, &t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
            .sum::<f64>()
            / 3.0;
        assert_abs_diff_eq!(focal_value(&p, &t, 0.0), bce, epsilon = 1e-9);

        // direct arithmetic oracle: p=0.7, t=1, gamma=2 -> -(0.3)^2 ln(0.7)
        let single = focal_value(&array![0.7], &array![1.0], 2.0);
        assert_abs_diff_eq!(single, -(0.09) * 0.7f64.ln(), epsilon = 1e-12);

        // perfect prediction: loss tends to zero
        assert!(focal_value(&array![0.999999], &array![1.0], 2.0) < 1e-9);
    }

    #[test]
    fn dice_analytic_values() {
        let l = dice_value(&array![0.5, 0.5], &array![1.0, 0.0], 1.0);
        assert_abs_diff_eq!(l, 1.0 / 3.0, epsilon = 1e-12);
        // no overlap, eps -> 0: loss -> 1
        let l = dice_value(&array![0.0, 0.0], &array![1.0, 1.0], 1e-9);
        assert_abs_diff_eq!(l, 1.0, epsilon = 1e-6);
        // perfect binary overlap
        let l = dice_value(&array![1.0, 0.0], &array![1.0, 0.0], 1.0);
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn tape_losses_match_value_losses() {
        let mut rng = crate::rng::rng_for(&[0x52]);
        for gamma in [0.0, 1.0, 2.0] {
            let p: Array1<f64> = Array1::from_iter((0..8).map(|_| rng.gen_range(0.01..0.99)));
            let t: Array1<f64> = Array1::from_iter((0..8).map(|_| f64::from(rng.gen_bool(0.5))));
            let mut tape = Tape::new();
            let pv = tape.leaf(p.clone().into_dyn());
            let f = focal_loss(&mut tape, pv, &t, gamma).unwrap();
            assert_abs_diff_eq!(scalar(&tape, f), focal_value(&p, &t, gamma), epsilon = 1e-12);
            let d = dice_loss(&mut tape, pv, &t, 1.0).unwrap();
            assert_abs_diff_eq!(scalar(&tape, d), dice_value(&p, &t, 1.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn non_binary_target_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.leaf(array![0.5, 0.5].into_dyn());
        assert!(matches!(
            focal_loss(&mut tape, p, &array![0.5, 1.0], 2.0),
            Err(CoreError::Label(_))
        ));
    }

    #[test]
    fn dice_empty_mask_guard() {
        let mut tape = Tape::new();
        let p = tape.leaf(array![0.0, 0.0].into_dyn());
        assert!(matches!(
            dice_loss(&mut tape, p, &array![0.0, 0.0], 0.0),
            Err(CoreError::Domain(_))
        ));
    }

    #[test]
    fn seg_loss_componentwise() {
        let weights = LossWeights::default();
        let mut tape = Tape::new();
        // 3 queries, 4 pixels; logits chosen to give distinct probs
        let logits = array![[2.0, -2.0, 0.5, 0.0], [0.0, 0.0, 0.0, 0.0], [3.0, 3.0, -3.0, -3.0]];
        let lv = tape.leaf2(logits.clone());
        let t0 = array![1.0, 0.0, 1.0, 0.0];
        let t1 = array![1.0, 1.0, 0.0, 0.0];
        let targets = vec![
            MatchTarget { class_id: 1, mask: t0.clone() },
            MatchTarget { class_id: 2, mask: t1.clone() },
        ];
        let assignment = Assignment { pairs: vec![(0, 0), (1, 2)] };
        let loss = seg_loss(&mut tape, lv, &targets, &assignment, &weights).unwrap();

        // componentwise recomputation
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let p0: Array1<f64> = logits.row(0).mapv(sig);
        let p2: Array1<f64> = logits.row(2).mapv(sig);
        let expect = 20.0 * (focal_value(&p0, &t0, 2.0) + focal_value(&p2, &t1, 2.0))
            + 1.0 * (dice_value(&p0, &t0, 1.0) + dice_value(&p2, &t1, 1.0));
        assert_abs_diff_eq!(scalar(&tape, loss), expect, epsilon = 1e-9);

        // empty assignment sums to zero
        let empty = seg_loss(&mut tape, lv, &targets, &Assignment::default(), &weights).unwrap();
        assert_eq!(scalar(&tape, empty), 0.0);
    }

    #[test]
    fn cls_loss_single_query_half_prob() {
        let mut tape = Tape::new();
        // single query, one class head at p = 0.5, no-object driven to ~0
        let logits = tape.leaf2(array![[0.0]]);
        let no_obj = tape.leaf2(array![[-40.0]]);
        let targets = vec![MatchTarget { class_id: 5, mask: Array1::zeros(1) }];
        let assignment = Assignment { pairs: vec![(0, 0)] };
        let supervised: BTreeSet<ClassId> = [5].into_iter().collect();
        let loss = cls_loss(&mut tape, logits, no_obj, &[5], &targets, &assignment, &supervised)
            .unwrap();
        assert_abs_diff_eq!(scalar(&tape, loss), 2f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn cls_loss_perfect_probs_is_zero() {
        let mut tape = Tape::new();
        let logits = tape.leaf2(array![[40.0, -40.0], [-40.0, -40.0]]);
        let no_obj = tape.leaf2(array![[-40.0], [40.0]]);
        let targets = vec![MatchTarget { class_id: 1, mask: Array1::zeros(1) }];
        let assignment = Assignment { pairs: vec![(0, 0)] };
        let supervised: BTreeSet<ClassId> = [1, 2].into_iter().collect();
        let loss = cls_loss(&mut tape, logits, no_obj, &[1, 2], &targets, &assignment, &supervised)
            .unwrap();
        assert_abs_diff_eq!(scalar(&tape, loss), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn unsupervised_heads_get_zero_gradient() {
        let mut tape = Tape::new();
        let logits = tape.leaf2(array![[0.3, -0.7], [0.1, 0.4]]);
        let no_obj = tape.leaf2(array![[0.0], [0.0]]);
        let targets = vec![MatchTarget { class_id: 2, mask: Array1::zeros(1) }];
        let assignment = Assignment { pairs: vec![(0, 1)] };
        // only class 2 supervised; class 1 (column 0) must see zero gradient
        let supervised: BTreeSet<ClassId> = [2].into_iter().collect();
        let loss = cls_loss(&mut tape, logits, no_obj, &[1, 2], &targets, &assignment, &supervised)
            .unwrap();
        let grads = tape.backward(loss);
        let g = grads.get(logits).unwrap();
        assert_eq!(g[[0, 0]], 0.0);
        assert_eq!(g[[1, 0]], 0.0);
        assert!(g[[0, 1]] != 0.0 && g[[1, 1]] != 0.0);
    }

    #[test]
    fn caption_loss_uniform_and_toy() {
        // uniform logits over V: loss = L * ln V
        let (l, v) = (5usize, 7usize);
        let mut tape = Tape::new();
        let logits = tape.leaf2(Array2::zeros((l, v)));
        let targets: Vec<u32> = vec![1, 2, 3, 4, 5];
        let loss = caption_loss(&mut tape, logits, &targets).unwrap();
        assert_abs_diff_eq!(scalar(&tape, loss), 5.0 * 7f64.ln(), epsilon = 1e-9);

        // 3-token toy case vs a per-position hand sum
        let mut tape = Tape::new();
        let raw = array![[2.0, 0.0, -1.0], [0.5, 0.5, 0.0], [-1.0, 3.0, 1.0]];
        let logits = tape.leaf2(raw.clone());
        let targets = vec![0u32, 2, 1];
        let loss = caption_loss(&mut tape, logits, &targets).unwrap();
        let mut expect = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = raw.row(i);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            expect += lse - row[t as usize];
        }
        assert_abs_diff_eq!(scalar(&tape, loss), expect, epsilon = 1e-12);

        // prob-1 tokens give zero loss
        let mut tape = Tape::new();
        let sharp = tape.leaf2(array![[100.0, 0.0], [0.0, 100.0]]);
        let loss = caption_loss(&mut tape, sharp, &[0, 1]).unwrap();
        assert_abs_diff_eq!(scalar(&tape, loss), 0.0, epsilon = 1e-9);

        // length error
        let mut tape = Tape::new();
        let logits = tape.leaf2(Array2::zeros((2, 3)));
        assert!(matches!(
            caption_loss(&mut tape, logits, &[0, 1, 2]),
            Err(CoreError::Length(_))
        ));
    }

    #[test]
    fn total_loss_gating() {
        assert_abs_diff_eq!(
            total_loss_value(1.0, 2.0, 0.5, 0.3, 2.0, true),
            4.3,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            total_loss_value(1.0, 2.0, 0.5, 0.3, 2.0, false),
            4.0,
            epsilon = 1e-12
        );

        let mut tape = Tape::new();
        let parts = LossComponents {
            cls: tape.scalar_leaf(1.0),
            seg: tape.scalar_leaf(2.0),
            cap: tape.scalar_leaf(0.5),
            tkd: Some(tape.scalar_leaf(0.3)),
        };
        let w = LossWeights::default();
        let on = total_loss(&mut tape, &parts, &w, true);
        assert_abs_diff_eq!(scalar(&tape, on), 4.3, epsilon = 1e-12);
        let off = total_loss(&mut tape, &parts, &w, false);
        assert_abs_diff_eq!(scalar(&tape, off), 4.0, epsilon = 1e-12);
    }
}

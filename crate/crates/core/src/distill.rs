//! Task-interactive knowledge distillation between the frozen snapshot and the
//! live model.
//!
//! ICD constrains mask/text embeddings globally and adds a class-wise
//! contrastive term over anchors (per-class means of the snapshot's mask
//! embeddings), positives (live embeddings of the anchor class) and negatives
//! (live embeddings of other classes). CID weights per-instance class
//! consistency by a quality score blending the snapshot's confidence with the
//! IoU between its mask and the cross path (live features decoded through the
//! snapshot's decoder). Snapshot outputs enter the graph as constants, so no
//! gradient ever reaches the teacher.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::rng::{rng_for, tag};
use crate::synth_data::ClassId;

const PROB_FLOOR: f64 = 1e-12;

/// Distance used on class-distribution blocks in CID.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Mse,
    Kl,
}

/// Distillation knobs; defaults follow the experiment configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub d_kind: DistanceKind,
    /// Quality-score exponent favouring the recognition branch.
    pub gamma: f64,
    /// Floor for each contrastive bracket (clamped at `-mu_clamp`).
    pub mu_clamp: f64,
    /// Teacher instances below this confidence are skipped by CID.
    pub cid_conf_floor: f64,
    /// Positives/negatives per anchor.
    pub contrastive_cap: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            d_kind: DistanceKind::Mse,
            gamma: 0.7,
            mu_clamp: 1.0,
            cid_conf_floor: 0.25,
            contrastive_cap: 16,
        }
    }
}

/// Mean squared difference: symmetric, zero only at equality.
pub fn d_value(u: &Array1<f64>, v: &Array1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(CoreError::Contract(format!(
            "distance over mismatched lengths {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let n = u.len().max(1) as f64;
    Ok(u.iter().zip(v.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Tape-side mean squared difference between same-shape blocks.
pub fn d_tape(tape: &mut Tape, a: Var, b: Var) -> Var {
    let diff = tape.sub(a, b);
    let sq = tape.mul(diff, diff);
    tape.mean(sq)
}

/// One anchor of the contrastive set: a frozen per-class mean embedding plus
/// the live query rows acting as positives and negatives.
#[derive(Debug, Clone)]
pub struct ContrastiveAnchor {
    pub class_id: ClassId,
    pub embedding: Array1<f64>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct ContrastiveSet {
    pub anchors: Vec<ContrastiveAnchor>,
}

impl ContrastiveSet {
    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Groups teacher mask embeddings by assigned class: one anchor (mean) per old
/// class present; positives are the live rows of that class, negatives the
/// live rows of every other assigned class. Both are capped per anchor with a
/// seeded deterministic subsample.
pub fn build_contrastive_set(
    teacher_qm: &Array2<f64>,
    assignments: &[(usize, ClassId)],
    old_classes: &BTreeSet<ClassId>,
    cap: usize,
    seed: u64,
) -> ContrastiveSet {
    let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for &(q, c) in assignments {
        by_class.entry(c).or_default().push(q);
    }

    let mut anchors = Vec::new();
    for (&class_id, queries) in &by_class {
        if !old_classes.contains(&class_id) {
            continue;
        }
        let mut embedding = Array1::zeros(teacher_qm.ncols());
        for &q in queries {
            embedding += &teacher_qm.row(q);
        }
        embedding /= queries.len() as f64;

        let mut positives = queries.clone();
        let mut negatives: Vec<usize> = assignments
            .iter()
            .filter(|(_, c)| *c != class_id)
            .map(|(q, _)| *q)
            .collect();
        positives.sort_unstable();
        negatives.sort_unstable();
        negatives.dedup();

        let mut rng = rng_for(&[seed, tag::CONTRASTIVE, class_id as u64]);
        if positives.len() > cap {
            positives.shuffle(&mut rng);
            positives.truncate(cap);
            positives.sort_unstable();
        }
        if negatives.len() > cap {
            negatives.shuffle(&mut rng);
            negatives.truncate(cap);
            negatives.sort_unstable();
        }

        anchors.push(ContrastiveAnchor { class_id, embedding, positives, negatives });
    }
    ContrastiveSet { anchors }
}

/// ICD: global embedding consistency plus the class-wise contrastive term.
///
/// `normalizer` is the number of classes learned through the current step
/// (`|C^{0:t}|`). Each bracket `d(anchor, pos) - d(anchor, neg)` is clamped
/// below at `-mu_clamp`; an empty set contributes zero.
pub fn icd_loss(
    tape: &mut Tape,
    teacher_qm: &Array2<f64>,
    teacher_qt: &Array2<f64>,
    student_qm: Var,
    student_qt: Var,
    cset: &ContrastiveSet,
    cfg: &DistillConfig,
    normalizer: usize,
) -> Result<Var> {
    if tape.value(student_qm).shape() != [teacher_qm.nrows(), teacher_qm.ncols()]
        || tape.value(student_qt).shape() != [teacher_qt.nrows(), teacher_qt.ncols()]
    {
        return Err(CoreError::Contract("teacher/student bundles misaligned".into()));
    }
    let t_qm = tape.leaf2(teacher_qm.clone());
    let t_qt = tape.leaf2(teacher_qt.clone());
    let g1 = d_tape(tape, t_qm, student_qm);
    let g2 = d_tape(tape, t_qt, student_qt);
    let mut total = tape.add(g1, g2);

    if !cset.is_empty() {
        let d = teacher_qm.ncols();
        let mut dcl: Option<Var> = None;
        for anchor in &cset.anchors {
            if anchor.positives.is_empty() || anchor.negatives.is_empty() {
                continue;
            }
            let np = anchor.positives.len();
            let nn = anchor.negatives.len();
            let pos = tape.gather_rows(student_qm, &anchor.positives);
            let neg = tape.gather_rows(student_qm, &anchor.negatives);

            let mut a_p = Array2::zeros((np, d));
            for mut row in a_p.rows_mut() {
                row.assign(&anchor.embedding);
            }
            let mut a_n = Array2::zeros((nn, d));
            for mut row in a_n.rows_mut() {
                row.assign(&anchor.embedding);
            }
            let a_p = tape.leaf2(a_p);
            let a_n = tape.leaf2(a_n);

            let dp = tape.sub(a_p, pos);
            let dp = tape.mul(dp, dp);
            let dp = tape.row_means(dp); // (np, 1)
            let dn = tape.sub(a_n, neg);
            let dn = tape.mul(dn, dn);
            let dn = tape.row_means(dn); // (nn, 1)

            // bracket matrix: dp broadcast across columns minus dn across rows
            let ones_row = tape.leaf2(Array2::from_elem((1, nn), 1.0));
            let ones_col = tape.leaf2(Array2::from_elem((np, 1), 1.0));
            let dn_t = tape.transpose(dn);
            let dp_mat = tape.matmul(dp, ones_row);
            let dn_mat = tape.matmul(ones_col, dn_t);
            let bracket = tape.sub(dp_mat, dn_mat);
            let clamped = tape.clamp_min(bracket, -cfg.mu_clamp);
            let s = tape.sum(clamped);
            dcl = Some(match dcl {
                Some(acc) => tape.add(acc, s),
                None => s,
            });
        }
        if let Some(dcl) = dcl {
            let scaled = tape.mul_scalar(dcl, 1.0 / normalizer.max(1) as f64);
            total = tape.add(total, scaled);
        }
    }
    Ok(total)
}

/// Quality score `c_r^gamma * iou^(1-gamma)` with the 0^0 = 1 convention.
pub fn quality_score(c_r: f64, iou: f64, gamma: f64) -> Result<f64> {
    for (name, v) in [("c_r", c_r), ("iou", iou), ("gamma", gamma)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(CoreError::Domain(format!("{name} = {v} outside [0, 1]")));
        }
    }
    fn pow0(base: f64, e: f64) -> f64 {
        if e == 0.0 {
            1.0
        } else {
            base.powf(e)
        }
    }
    Ok(pow0(c_r, gamma) * pow0(iou, 1.0 - gamma))
}

/// One teacher instance selected for CID: a frozen class distribution, the
/// matching live query row, and the precomputed quality weight.
#[derive(Debug, Clone)]
pub struct InstancePair {
    pub query: usize,
    pub q_r: f64,
    /// Teacher class distribution over the shared (old) class columns.
    pub teacher_dist: Array1<f64>,
}

/// CID: quality-weighted class-distribution consistency, summed over teacher
/// instances. `student_probs_old` is (N, K_old), columns aligned with the
/// teacher's class order. Empty pair lists are a valid zero.
pub fn cid_loss(
    tape: &mut Tape,
    student_probs_old: Var,
    pairs: &[InstancePair],
    kind: DistanceKind,
) -> Result<Var> {
    let shape = tape.value(student_probs_old).shape().to_vec();
    let k = shape[1];
    let mut total: Option<Var> = None;
    for pair in pairs {
        if pair.teacher_dist.len() != k {
            return Err(CoreError::Contract(format!(
                "teacher distribution has {} entries, student has {k}",
                pair.teacher_dist.len()
            )));
        }
        let row = tape.gather_rows(student_probs_old, &[pair.query]);
        let t = tape.leaf2(pair.teacher_dist.clone().insert_axis(ndarray::Axis(0)));
        let dist = match kind {
            DistanceKind::Mse => d_tape(tape, t, row),
            DistanceKind::Kl => {
                // Bernoulli KL(teacher || student), mean over classes
                let ones = tape.leaf2(Array2::from_elem((1, k), 1.0));
                let s_safe = tape.clamp_min(row, PROB_FLOOR);
                let log_s = tape.log(s_safe);
                let one_m_s = tape.sub(ones, row);
                let one_m_s_safe = tape.clamp_min(one_m_s, PROB_FLOOR);
                let log_1ms = tape.log(one_m_s_safe);
                let t_log_s = tape.mul(t, log_s);
                let one_m_t = tape.sub(ones, t);
                let t2 = tape.mul(one_m_t, log_1ms);
                let cross = tape.add(t_log_s, t2);
                let neg_cross = tape.neg(cross);
                // teacher entropy is constant; fold it in as a const offset
                let ent: f64 = pair
                    .teacher_dist
                    .iter()
                    .map(|&p| {
                        let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                        -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
                    })
                    .sum::<f64>();
                let m = tape.mean(neg_cross);
                tape.add_scalar(m, -ent / k as f64)
            }
        };
        let w = tape.mul_scalar(dist, pair.q_r);
        total = Some(match total {
            Some(acc) => tape.add(acc, w),
            None => w,
        });
    }
    Ok(total.unwrap_or_else(|| tape.scalar_leaf(0.0)))
}

/// TKD = ICD + CID (either side optional under ablations).
pub fn tkd_loss(tape: &mut Tape, icd: Option<Var>, cid: Option<Var>) -> Var {
    match (icd, cid) {
        (Some(a), Some(b)) => tape.add(a, b),
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => tape.scalar_leaf(0.0),
    }
}

//! Evaluation: panoptic quality family, BLEU, and class-group aggregation.
//!
//! PQ follows the standard definition: same-class segments match at IoU > 0.5
//! (unique by construction for disjoint scenes), SQ is the mean IoU over
//! matches, RQ = TP / (TP + FP/2 + FN/2), PQ = SQ * RQ. BLEU is corpus-level
//! modified n-gram precision (uniform 4-gram weights) with brevity penalty and
//! no smoothing.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::synth_data::{ClassId, ClassSchedule, END, START};

/// One panoptic segment: an id, a class, and a dense binary mask.
#[derive(Debug, Clone)]
pub struct Segment {
    pub segment_id: u32,
    pub class_id: ClassId,
    pub mask: Array2<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneOrigin {
    Prediction,
    GroundTruth,
}

/// A non-overlapping set of segments over one canvas.
#[derive(Debug, Clone)]
pub struct PanopticScene {
    pub segments: Vec<Segment>,
    pub origin: SceneOrigin,
}

impl PanopticScene {
    pub fn new(segments: Vec<Segment>, origin: SceneOrigin) -> Self {
        Self { segments, origin }
    }

    fn validate(&self) -> Result<()> {
        for s in &self.segments {
            if !s.mask.iter().any(|&m| m) {
                return Err(CoreError::Contract(format!(
                    "segment {} has an empty mask",
                    s.segment_id
                )));
            }
        }
        for (i, a) in self.segments.iter().enumerate() {
            for b in &self.segments[i + 1..] {
                if a.mask.iter().zip(b.mask.iter()).any(|(&x, &y)| x && y) {
                    return Err(CoreError::Contract(format!(
                        "segments {} and {} overlap within one scene",
                        a.segment_id, b.segment_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-class confusion tallies; summable across scenes for dataset-level PQ.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PqStats {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou_sum: f64,
}

impl PqStats {
    pub fn merge(&mut self, other: &PqStats) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PqScore {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

/// Converts tallies to (PQ, SQ, RQ).
pub fn pq_from_stats(s: &PqStats) -> PqScore {
    let tp = s.tp as f64;
    let denom = tp + 0.5 * s.fp as f64 + 0.5 * s.fn_ as f64;
    let rq = if denom > 0.0 { tp / denom } else { 0.0 };
    let sq = if s.tp > 0 { s.iou_sum / tp } else { 0.0 };
    PqScore { pq: sq * rq, sq, rq }
}

pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-class matching tallies for one (prediction, ground truth) scene pair.
/// Classes absent from both scenes are skipped.
pub fn panoptic_stats(
    pred: &PanopticScene,
    gt: &PanopticScene,
    classes: &BTreeSet<ClassId>,
) -> Result<BTreeMap<ClassId, PqStats>> {
    pred.validate()?;
    gt.validate()?;

    let mut out = BTreeMap::new();
    for &c in classes {
        let preds: Vec<&Segment> = pred.segments.iter().filter(|s| s.class_id == c).collect();
        let gts: Vec<&Segment> = gt.segments.iter().filter(|s| s.class_id == c).collect();
        if preds.is_empty() && gts.is_empty() {
            continue;
        }
        let mut stats = PqStats::default();
        let mut matched_pred = vec![false; preds.len()];
        for g in &gts {
            let mut hit = false;
            for (pi, p) in preds.iter().enumerate() {
                let iou = mask_iou(&p.mask, &g.mask);
                if iou > 0.5 {
                    stats.tp += 1;
                    stats.iou_sum += iou;
                    matched_pred[pi] = true;
                    hit = true;
                    break; // unique by disjointness
                }
            }
            if !hit {
                stats.fn_ += 1;
            }
        }
        stats.fp += matched_pred.iter().filter(|&&m| !m).count() as u64;
        out.insert(c, stats);
    }
    Ok(out)
}

/// Per-class (PQ, SQ, RQ) for one scene pair.
pub fn panoptic_quality(
    pred: &PanopticScene,
    gt: &PanopticScene,
    classes: &BTreeSet<ClassId>,
) -> Result<BTreeMap<ClassId, PqScore>> {
    Ok(panoptic_stats(pred, gt, classes)?
        .iter()
        .map(|(&c, s)| (c, pq_from_stats(s)))
        .collect())
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

const MAX_N: usize = 4;

/// Aggregated modified n-gram counts; corpus BLEU sums these over pairs.
#[derive(Debug, Clone, Default)]
pub struct BleuAccumulator {
    clipped: [u64; MAX_N],
    total: [u64; MAX_N],
    cand_len: u64,
    ref_len: u64,
    pub empty_candidate: bool,
}

fn strip_sentinels(tokens: &[String]) -> Vec<&str> {
    tokens
        .iter()
        .map(String::as_str)
        .filter(|t| *t != START && *t != END)
        .collect()
}

fn ngram_counts<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, u64> {
    let mut map = HashMap::new();
    if tokens.len() >= n {
        for win in tokens.windows(n) {
            *map.entry(win.to_vec()).or_insert(0) += 1;
        }
    }
    map
}

impl BleuAccumulator {
    pub fn add(&mut self, candidate: &[String], reference: &[String]) {
        let cand = strip_sentinels(candidate);
        let refr = strip_sentinels(reference);
        if cand.is_empty() {
            self.empty_candidate = true;
        }
        self.cand_len += cand.len() as u64;
        self.ref_len += refr.len() as u64;
        for n in 1..=MAX_N {
            let c = ngram_counts(&cand, n);
            let r = ngram_counts(&refr, n);
            for (gram, &count) in &c {
                let cap = r.get(gram).copied().unwrap_or(0);
                self.clipped[n - 1] += count.min(cap);
                self.total[n - 1] += count;
            }
        }
    }

    /// Geometric mean of clipped precisions times the brevity penalty;
    /// zero when any precision is zero (no smoothing).
    pub fn score(&self) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..MAX_N {
            if self.clipped[n] == 0 || self.total[n] == 0 {
                return 0.0;
            }
            log_sum += (self.clipped[n] as f64 / self.total[n] as f64).ln();
        }
        let bp = if self.cand_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        bp * (log_sum / MAX_N as f64).exp()
    }
}

/// Single-pair BLEU. Sentinels are ignored; an empty candidate scores zero and
/// raises the warning flag.
pub fn bleu(candidate: &[String], reference: &[String]) -> (f64, bool) {
    let mut acc = BleuAccumulator::default();
    acc.add(candidate, reference);
    (acc.score(), acc.empty_candidate)
}

// ---------------------------------------------------------------------------
// class-group reporting
// ---------------------------------------------------------------------------

/// Per-step report: per-class scores, base/incremental/all group means, and
/// the BLEU bookkeeping (before = after step 0, after = final step).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub step: usize,
    pub classes_learned: usize,
    pub per_class: BTreeMap<ClassId, PqScore>,
    /// Mean over base-step classes (stuff included).
    pub old_group: Option<PqScore>,
    /// Mean over classes added at steps >= 1 and learned by now.
    pub new_group: Option<PqScore>,
    /// Mean over all learned classes.
    pub all_group: PqScore,
    pub bleu: f64,
    pub bleu_before: Option<f64>,
    pub bleu_after: Option<f64>,
}

fn group_mean(per_class: &BTreeMap<ClassId, PqScore>, members: &BTreeSet<ClassId>) -> Option<PqScore> {
    let picked: Vec<&PqScore> = members
        .iter()
        .filter_map(|c| per_class.get(c))
        .collect();
    if picked.is_empty() {
        return None;
    }
    let n = picked.len() as f64;
    Some(PqScore {
        pq: picked.iter().map(|s| s.pq).sum::<f64>() / n,
        sq: picked.iter().map(|s| s.sq).sum::<f64>() / n,
        rq: picked.iter().map(|s| s.rq).sum::<f64>() / n,
    })
}

/// Aggregates per-class scores into the C^o / C^n / C^a grouping for step `t`.
/// Only classes present in `per_class` (i.e. seen in ground truth) count.
pub fn class_group_report(
    per_class: &BTreeMap<ClassId, PqScore>,
    schedule: &ClassSchedule,
    step: usize,
    bleu: f64,
) -> MetricsReport {
    let base: BTreeSet<ClassId> = schedule.steps[0].iter().copied().collect();
    let learned = schedule.learned_until(step);
    let incremental: BTreeSet<ClassId> = learned.difference(&base).copied().collect();

    MetricsReport {
        step,
        classes_learned: learned.len(),
        per_class: per_class.clone(),
        old_group: group_mean(per_class, &base),
        new_group: group_mean(per_class, &incremental),
        all_group: group_mean(per_class, &learned).unwrap_or(PqScore { pq: 0.0, sq: 0.0, rq: 0.0 }),
        bleu,
        bleu_before: None,
        bleu_after: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::make_schedule;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn rect_mask(h: usize, w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Array2<bool> {
        let mut m = Array2::from_elem((h, w), false);
        for y in y0..y1 {
            for x in x0..x1 {
                m[[y, x]] = true;
            }
        }
        m
    }

    fn scene(segments: Vec<Segment>, origin: SceneOrigin) -> PanopticScene {
        PanopticScene::new(segments, origin)
    }

    #[test]
    fn perfect_match_scores_one() {
        let m1 = rect_mask(8, 8, 0, 0, 4, 4);
        let m2 = rect_mask(8, 8, 4, 4, 8, 8);
        let gt = scene(
            vec![
                Segment { segment_id: 1, class_id: 1, mask: m1.clone() },
                Segment { segment_id: 2, class_id: 2, mask: m2.clone() },
            ],
            SceneOrigin::GroundTruth,
        );
        let pred = scene(
            vec![
                Segment { segment_id: 9, class_id: 1, mask: m1 },
                Segment { segment_id: 8, class_id: 2, mask: m2 },
            ],
            SceneOrigin::Prediction,
        );
        let classes: BTreeSet<ClassId> = [1, 2].into_iter().collect();
        let scores = panoptic_quality(&pred, &gt, &classes).unwrap();
        for s in scores.values() {
            assert_abs_diff_eq!(s.pq, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(s.sq, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(s.rq, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn hand_evaluated_partial_match() {
        // 2 GT segments of class 1; one prediction overlapping one at IoU 0.6:
        // RQ = 1/(1 + 0.5) = 2/3, SQ = 0.6, PQ = 0.4
        let gt_a = rect_mask(10, 10, 0, 0, 5, 2); // 10 px
        let gt_b = rect_mask(10, 10, 0, 8, 5, 10);
        // overlap 6 px with gt_a, union 10: pred covers rows 0..3 cols 0..2 (6px)
        // IoU = 6/10 = 0.6
        let pred_a = rect_mask(10, 10, 0, 0, 3, 2);
        let gt = scene(
            vec![
                Segment { segment_id: 1, class_id: 1, mask: gt_a },
                Segment { segment_id: 2, class_id: 1, mask: gt_b },
            ],
            SceneOrigin::GroundTruth,
        );
        let pred = scene(
            vec![Segment { segment_id: 1, class_id: 1, mask: pred_a }],
            SceneOrigin::Prediction,
        );
        let classes: BTreeSet<ClassId> = [1].into_iter().collect();
        let s = panoptic_quality(&pred, &gt, &classes).unwrap()[&1];
        assert_abs_diff_eq!(s.sq, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(s.rq, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.pq, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn overlapping_segments_rejected() {
        let a = rect_mask(4, 4, 0, 0, 3, 3);
        let b = rect_mask(4, 4, 2, 2, 4, 4);
        let bad = scene(
            vec![
                Segment { segment_id: 1, class_id: 1, mask: a.clone() },
                Segment { segment_id: 2, class_id: 2, mask: b },
            ],
            SceneOrigin::GroundTruth,
        );
        let ok = scene(vec![Segment { segment_id: 1, class_id: 1, mask: a }], SceneOrigin::Prediction);
        let classes: BTreeSet<ClassId> = [1, 2].into_iter().collect();
        assert!(panoptic_quality(&ok, &bad, &classes).is_err());
    }

    /// Brute-force oracle: same definition, independently structured (explicit
    /// pair enumeration, no early exit).
    fn oracle_stats(
        pred: &PanopticScene,
        gt: &PanopticScene,
        classes: &BTreeSet<ClassId>,
    ) -> BTreeMap<ClassId, PqStats> {
        let mut out = BTreeMap::new();
        for &c in classes {
            let ps: Vec<_> = pred.segments.iter().filter(|s| s.class_id == c).collect();
            let gs: Vec<_> = gt.segments.iter().filter(|s| s.class_id == c).collect();
            if ps.is_empty() && gs.is_empty() {
                continue;
            }
            let mut pairs = Vec::new();
            for (pi, p) in ps.iter().enumerate() {
                for (gi, g) in gs.iter().enumerate() {
                    let iou = mask_iou(&p.mask, &g.mask);
                    if iou > 0.5 {
                        pairs.push((pi, gi, iou));
                    }
                }
            }
            // IoU > 0.5 pairs are a matching already; verify uniqueness
            for (i, a) in pairs.iter().enumerate() {
                for b in &pairs[i + 1..] {
                    assert!(a.0 != b.0 && a.1 != b.1, "matching not unique");
                }
            }
            let tp = pairs.len() as u64;
            out.insert(
                c,
                PqStats {
                    tp,
                    fp: ps.len() as u64 - tp,
                    fn_: gs.len() as u64 - tp,
                    iou_sum: pairs.iter().map(|p| p.2).sum(),
                },
            );
        }
        out
    }

    pub(crate) fn random_micro_scene_pair(seed: u64) -> (PanopticScene, PanopticScene) {
        let mut rng = crate::rng::rng_for(&[seed, 0xbeef]);
        let (h, w) = (16, 16);
        let mut make = |origin| {
            let n = rng.gen_range(1..=6);
            let mut taken = Array2::from_elem((h, w), false);
            let mut segs = Vec::new();
            for i in 0..n {
                let y0 = rng.gen_range(0..h - 2);
                let x0 = rng.gen_range(0..w - 2);
                let y1 = (y0 + rng.gen_range(2..=6)).min(h);
                let x1 = (x0 + rng.gen_range(2..=6)).min(w);
                let mut mask = Array2::from_elem((h, w), false);
                let mut any = false;
                for y in y0..y1 {
                    for x in x0..x1 {
                        if !taken[[y, x]] {
                            taken[[y, x]] = true;
                            mask[[y, x]] = true;
                            any = true;
                        }
                    }
                }
                if any {
                    segs.push(Segment {
                        segment_id: i as u32 + 1,
                        class_id: rng.gen_range(1..=4),
                        mask,
                    });
                }
            }
            PanopticScene::new(segs, origin)
        };
        (make(SceneOrigin::Prediction), make(SceneOrigin::GroundTruth))
    }

    #[test]
    fn matches_brute_force_oracle_on_random_scenes() {
        let classes: BTreeSet<ClassId> = (1..=4).collect();
        for seed in 0..60 {
            let (pred, gt) = random_micro_scene_pair(seed);
            let ours = panoptic_stats(&pred, &gt, &classes).unwrap();
            let oracle = oracle_stats(&pred, &gt, &classes);
            assert_eq!(ours.len(), oracle.len());
            for (c, s) in &ours {
                let o = &oracle[c];
                assert_eq!((s.tp, s.fp, s.fn_), (o.tp, o.fp, o.fn_), "class {c} seed {seed}");
                assert_abs_diff_eq!(s.iou_sum, o.iou_sum, epsilon = 1e-12);
                // PQ = SQ * RQ identity
                let score = pq_from_stats(s);
                assert_abs_diff_eq!(score.pq, score.sq * score.rq, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn swapping_pred_and_gt_swaps_fp_fn() {
        let classes: BTreeSet<ClassId> = (1..=4).collect();
        for seed in 100..120 {
            let (a, b) = random_micro_scene_pair(seed);
            let fwd = panoptic_stats(&a, &b, &classes).unwrap();
            let rev = panoptic_stats(&b, &a, &classes).unwrap();
            for (c, s) in &fwd {
                let r = &rev[c];
                assert_eq!(s.tp, r.tp);
                assert_eq!(s.fp, r.fn_);
                assert_eq!(s.fn_, r.fp);
            }
        }
    }

    #[test]
    fn pq_invariant_to_segment_id_relabeling() {
        let classes: BTreeSet<ClassId> = (1..=4).collect();
        let (mut pred, gt) = random_micro_scene_pair(7);
        let before = panoptic_stats(&pred, &gt, &classes).unwrap();
        for s in &mut pred.segments {
            s.segment_id += 100;
        }
        let after = panoptic_stats(&pred, &gt, &classes).unwrap();
        assert_eq!(before, after);
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_identity_and_sentinels() {
        let c = toks("one square on sand");
        let (score, warn) = bleu(&c, &c);
        assert_abs_diff_eq!(score, 1.0, epsilon = 1e-12);
        assert!(!warn);

        let with_sentinels = toks("START one square on sand END");
        let (s2, _) = bleu(&with_sentinels, &c);
        assert_abs_diff_eq!(s2, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bleu_brevity_penalty_applies() {
        let reference = toks("one square two circle on sand on water");
        let candidate = toks("one square two circle on sand");
        let (score, _) = bleu(&candidate, &reference);
        assert!(score < 1.0 && score > 0.0);
    }

    #[test]
    fn bleu_empty_candidate_warns() {
        let (score, warn) = bleu(&toks("START END"), &toks("one square"));
        assert_eq!(score, 0.0);
        assert!(warn);
    }

    #[test]
    fn bleu_zero_when_any_precision_zero() {
        // no common 2-gram
        let (score, _) = bleu(&toks("square one sand on"), &toks("one square on sand"));
        assert_eq!(score, 0.0);
    }

    #[test]
    fn bleu_monotone_under_token_removal() {
        let reference = toks("one square two circle on sand on water");
        let mut candidate = reference.clone();
        let mut last = bleu(&candidate, &reference).0;
        while candidate.len() > 4 {
            candidate.pop();
            let s = bleu(&candidate, &reference).0;
            assert!(s <= last + 1e-12);
            last = s;
        }
    }

    #[test]
    fn group_report_degenerate_and_means() {
        let schedule = make_schedule(6, 4, 2, &[7, 8], &[1, 2, 3, 4, 5, 6]).unwrap();
        let mut per_class = BTreeMap::new();
        per_class.insert(1u32, PqScore { pq: 0.2, sq: 0.5, rq: 0.4 });
        per_class.insert(2u32, PqScore { pq: 0.4, sq: 0.8, rq: 0.5 });

        // single-step grouping: no incremental classes learned yet
        let r0 = class_group_report(&per_class, &schedule, 0, 0.0);
        assert!(r0.new_group.is_none());
        let old = r0.old_group.unwrap();
        assert_abs_diff_eq!(old.pq, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(r0.all_group.pq, 0.3, epsilon = 1e-12);

        // after the increment, classes 5/6 belong to the new group
        per_class.insert(5u32, PqScore { pq: 0.6, sq: 0.6, rq: 1.0 });
        let r1 = class_group_report(&per_class, &schedule, 1, 0.0);
        assert_abs_diff_eq!(r1.new_group.unwrap().pq, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(r1.all_group.pq, 0.4, epsilon = 1e-12);
    }
}

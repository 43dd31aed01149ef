//! Panoptic inference: greedy per-pixel assembly of query predictions into a
//! scene, plus mask resolution helpers.
//!
//! Per pixel, the eligible query (no-object prob < 0.5) with the highest
//! class-prob times mask-prob wins; a pixel stays background when the winner's
//! mask probability is below 0.5. Thing queries each form one segment; stuff
//! pixels merge into one segment per class.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::metrics::{PanopticScene, SceneOrigin, Segment};
use crate::synth_data::{ClassId, ClassSchedule, BACKGROUND_ID};

use super::forward::EvalOutput;

/// Dense per-pixel view of one panoptic prediction at image resolution.
#[derive(Debug, Clone)]
pub struct PanopticPrediction {
    /// (H, W) class map; `BACKGROUND_ID` where no query claims the pixel.
    pub class_map: Array2<ClassId>,
    /// (H, W) winning score (class prob x mask prob); 0 on background.
    pub confidence: Array2<f64>,
    /// (H, W) index of the winning query; -1 on background.
    pub winner_query: Array2<i32>,
    /// Scene segments at image resolution.
    pub segments: Vec<Segment>,
}

impl PanopticPrediction {
    pub fn scene(&self) -> PanopticScene {
        PanopticScene::new(self.segments.clone(), SceneOrigin::Prediction)
    }

    /// Per-class confidence maps: the winner's score where that class won,
    /// zero elsewhere. Shaped for the pseudo-label rule.
    pub fn class_score_maps(&self) -> BTreeMap<ClassId, Array2<f64>> {
        let mut maps: BTreeMap<ClassId, Array2<f64>> = BTreeMap::new();
        let (h, w) = self.class_map.dim();
        for y in 0..h {
            for x in 0..w {
                let c = self.class_map[[y, x]];
                if c == BACKGROUND_ID {
                    continue;
                }
                maps.entry(c)
                    .or_insert_with(|| Array2::zeros((h, w)))[[y, x]] = self.confidence[[y, x]];
            }
        }
        maps
    }
}

/// Nearest-neighbor upsample of a cell map by `factor`.
pub fn upsample_cells<T: Copy>(cells: &Array2<T>, factor: usize) -> Array2<T>
where
    T: Default,
{
    let (ch, cw) = cells.dim();
    let mut out = Array2::default((ch * factor, cw * factor));
    for y in 0..ch * factor {
        for x in 0..cw * factor {
            out[[y, x]] = cells[[y / factor, x / factor]];
        }
    }
    out
}

/// Majority downsample of a dense binary mask to cell resolution.
pub fn downsample_mask(mask: &Array2<bool>, factor: usize) -> Array2<f64> {
    let (h, w) = mask.dim();
    let (ch, cw) = (h / factor, w / factor);
    let mut out = Array2::zeros((ch, cw));
    for cy in 0..ch {
        for cx in 0..cw {
            let mut hits = 0usize;
            for py in 0..factor {
                for px in 0..factor {
                    if mask[[cy * factor + py, cx * factor + px]] {
                        hits += 1;
                    }
                }
            }
            out[[cy, cx]] = if hits * 2 >= factor * factor { 1.0 } else { 0.0 };
        }
    }
    out
}

/// Assembles an eval-mode forward pass into a panoptic prediction at
/// `(image_h, image_w)` resolution.
pub fn assemble_panoptic(
    out: &EvalOutput,
    schedule: &ClassSchedule,
    image_h: usize,
    image_w: usize,
) -> PanopticPrediction {
    let n = out.mask_probs.nrows();
    let p = out.h_out * out.w_out;
    let factor = image_h / out.h_out;
    debug_assert_eq!(image_w / out.w_out, factor);

    // per-query best class (ties -> lower class id via column order)
    let mut best_class: Vec<(ClassId, f64)> = Vec::with_capacity(n);
    for q in 0..n {
        let mut cls = BACKGROUND_ID;
        let mut best = f64::NEG_INFINITY;
        for (k, &cid) in out.class_ids.iter().enumerate() {
            let prob = out.class_probs[[q, k]];
            if prob > best {
                best = prob;
                cls = cid;
            }
        }
        best_class.push((cls, best.max(0.0)));
    }
    let eligible: Vec<bool> = (0..n).map(|q| out.no_obj[q] < 0.5 && !out.class_ids.is_empty()).collect();

    let mut cell_class = Array2::from_elem((out.h_out, out.w_out), BACKGROUND_ID);
    let mut cell_conf = Array2::zeros((out.h_out, out.w_out));
    let mut cell_winner = Array2::from_elem((out.h_out, out.w_out), -1i32);
    for px in 0..p {
        let mut win_q = None;
        let mut win_score = f64::NEG_INFINITY;
        for q in 0..n {
            if !eligible[q] {
                continue;
            }
            let score = best_class[q].1 * out.mask_probs[[q, px]];
            if score > win_score {
                win_score = score;
                win_q = Some(q);
            }
        }
        if let Some(q) = win_q {
            if out.mask_probs[[q, px]] >= 0.5 {
                let (cy, cx) = (px / out.w_out, px % out.w_out);
                cell_class[[cy, cx]] = best_class[q].0;
                cell_conf[[cy, cx]] = win_score;
                cell_winner[[cy, cx]] = q as i32;
            }
        }
    }

    let class_map = upsample_cells(&cell_class, factor);
    let confidence = upsample_cells(&cell_conf, factor);
    let winner_query = upsample_cells(&cell_winner, factor);

    // segments: one per winning thing query, one per stuff class
    let mut segments = Vec::new();
    for q in 0..n {
        let cid = best_class[q].0;
        if cid == BACKGROUND_ID || !schedule.is_thing(cid) {
            continue;
        }
        let mut mask = Array2::from_elem((image_h, image_w), false);
        let mut any = false;
        for y in 0..image_h {
            for x in 0..image_w {
                if winner_query[[y, x]] == q as i32 {
                    mask[[y, x]] = true;
                    any = true;
                }
            }
        }
        if any {
            segments.push(Segment { segment_id: q as u32 + 1, class_id: cid, mask });
        }
    }
    for (si, &sid) in schedule.stuff_classes.iter().enumerate() {
        let mut mask = Array2::from_elem((image_h, image_w), false);
        let mut any = false;
        for y in 0..image_h {
            for x in 0..image_w {
                if class_map[[y, x]] == sid {
                    mask[[y, x]] = true;
                    any = true;
                }
            }
        }
        if any {
            segments.push(Segment { segment_id: 1000 + si as u32, class_id: sid, mask });
        }
    }

    PanopticPrediction { class_map, confidence, winner_query, segments }
}

/// Ground-truth scene restricted to a class set: thing instances become
/// segments, stuff classes merge into one segment each.
pub fn gt_scene(
    sample: &crate::synth_data::PanopticSample,
    schedule: &ClassSchedule,
    allowed: &std::collections::BTreeSet<ClassId>,
) -> PanopticScene {
    let mut segments = Vec::new();
    for inst in &sample.instances {
        if allowed.contains(&inst.class_id) {
            segments.push(Segment {
                segment_id: inst.instance_id,
                class_id: inst.class_id,
                mask: inst.mask.clone(),
            });
        }
    }
    let (h, w) = sample.semantic_mask.dim();
    for (si, &sid) in schedule.stuff_classes.iter().enumerate() {
        if !allowed.contains(&sid) {
            continue;
        }
        let mut mask = Array2::from_elem((h, w), false);
        let mut any = false;
        for y in 0..h {
            for x in 0..w {
                if sample.semantic_mask[[y, x]] == sid {
                    mask[[y, x]] = true;
                    any = true;
                }
            }
        }
        if any {
            segments.push(Segment { segment_id: 2000 + si as u32, class_id: sid, mask });
        }
    }
    PanopticScene::new(segments, SceneOrigin::GroundTruth)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{test_classes, test_image};
    use super::super::{eval_forward, ModelConfig, ModelState};
    use super::*;
    use crate::synth_data::make_schedule;

    #[test]
    fn downsample_majority_rule() {
        let mut m = Array2::from_elem((16, 16), false);
        for y in 0..8 {
            for x in 0..8 {
                m[[y, x]] = true;
            }
        }
        // half-covered cell: 32 of 64 pixels -> counts as covered (>= 50%)
        for y in 0..8 {
            for x in 8..12 {
                m[[y, x]] = true;
            }
        }
        let d = downsample_mask(&m, 8);
        assert_eq!(d[[0, 0]], 1.0);
        assert_eq!(d[[0, 1]], 1.0);
        assert_eq!(d[[1, 0]], 0.0);
    }

    #[test]
    fn upsample_blocks() {
        let mut cells = Array2::from_elem((2, 2), 0u32);
        cells[[0, 1]] = 7;
        let up = upsample_cells(&cells, 4);
        assert_eq!(up.dim(), (8, 8));
        assert_eq!(up[[0, 4]], 7);
        assert_eq!(up[[3, 7]], 7);
        assert_eq!(up[[4, 4]], 0);
    }

    #[test]
    fn assembly_produces_disjoint_segments() {
        let state = ModelState::init(ModelConfig::tiny(), &test_classes(3), 77).unwrap();
        let schedule = make_schedule(2, 1, 1, &[3], &[1, 2]).unwrap();
        let img = test_image(32, 32, 78);
        let out = eval_forward(&state, &img).unwrap();
        let pred = assemble_panoptic(&out, &schedule, 32, 32);
        // the scene constructor's validation is exercised through metrics
        let scene = pred.scene();
        for (i, a) in scene.segments.iter().enumerate() {
            for b in &scene.segments[i + 1..] {
                assert!(!a.mask.iter().zip(b.mask.iter()).any(|(&x, &y)| x && y));
            }
        }
        // class map and segments agree
        for seg in &scene.segments {
            for y in 0..32 {
                for x in 0..32 {
                    if seg.mask[[y, x]] {
                        assert_eq!(pred.class_map[[y, x]], seg.class_id);
                    }
                }
            }
        }
    }
}

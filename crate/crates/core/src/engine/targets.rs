//! Per-sample training targets.
//!
//! Base steps use the CL view directly. CL steps run the frozen snapshot over
//! each image once, merge its predictions into the view via the pseudo-label
//! rule, convert the merged map back to matchable segments (old things split
//! by the snapshot's winning query, old stuff merged per class), and build the
//! concatenated caption target.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};

use crate::error::Result;
use crate::model::{
    assemble_panoptic, downsample_mask, eval_forward, generate_caption, ModelState,
};
use crate::objectives::MatchTarget;
use crate::pseudo_label::{
    caption_class_mentions, make_caption_pseudo_label, make_mask_pseudo_labels, SourceTag,
};
use crate::synth_data::{
    apply_cl_view, ClassId, ClassSchedule, PanopticSample, WordBank, GRID,
};

use super::PseudoMode;

/// Frozen snapshot outputs cached once per sample per CL step.
#[derive(Debug, Clone)]
pub struct TeacherCache {
    pub qm: Array2<f64>,
    pub qt: Array2<f64>,
    /// (N, K_old) sigmoid class probabilities in the snapshot's class order.
    pub class_probs: Array2<f64>,
    /// (N, P) sigmoid mask probabilities at feature resolution.
    pub mask_probs: Array2<f64>,
    /// Teacher instances eligible for CID: (query, confidence).
    pub cid_candidates: Vec<(usize, f64)>,
}

/// Everything the loss needs for one training sample.
#[derive(Debug, Clone)]
pub struct SampleTargets {
    pub sample_idx: usize,
    pub sample_id: u64,
    /// Matchable segments with masks at feature resolution.
    pub segments: Vec<MatchTarget>,
    /// Full caption token ids (sentinels included) in the live model's vocab.
    pub caption_ids: Vec<u32>,
    /// Classes whose heads the classification loss supervises.
    pub supervised: BTreeSet<ClassId>,
    pub teacher: Option<TeacherCache>,
}

fn mask8_flat(mask: &Array2<bool>) -> Array1<f64> {
    let down = downsample_mask(mask, GRID);
    Array1::from_iter(down.iter().copied())
}

fn segments_from_view(
    view: &PanopticSample,
    schedule: &ClassSchedule,
) -> Vec<MatchTarget> {
    let mut segments = Vec::new();
    for inst in &view.instances {
        let m = mask8_flat(&inst.mask);
        if m.sum() > 0.0 {
            segments.push(MatchTarget { class_id: inst.class_id, mask: m });
        }
    }
    let (h, w) = view.semantic_mask.dim();
    for &sid in &schedule.stuff_classes {
        let mut mask = Array2::from_elem((h, w), false);
        let mut any = false;
        for y in 0..h {
            for x in 0..w {
                if view.semantic_mask[[y, x]] == sid {
                    mask[[y, x]] = true;
                    any = true;
                }
            }
        }
        if any {
            let m = mask8_flat(&mask);
            if m.sum() > 0.0 {
                segments.push(MatchTarget { class_id: sid, mask: m });
            }
        }
    }
    segments
}

/// Base-step (or offline) targets: the CL view as-is.
pub fn base_targets(
    sample: &PanopticSample,
    sample_idx: usize,
    schedule: &ClassSchedule,
    words: &WordBank,
    student: &ModelState,
) -> Result<SampleTargets> {
    let view = apply_cl_view(sample, 0, schedule, words)?;
    let segments = segments_from_view(&view, schedule);
    let caption_ids = student.vocab.encode(&view.caption)?;
    let supervised: BTreeSet<ClassId> = schedule.classes_at(0)?.iter().copied().collect();
    Ok(SampleTargets {
        sample_idx,
        sample_id: sample.sample_id,
        segments,
        caption_ids,
        supervised,
        teacher: None,
    })
}

/// CL-step targets: snapshot forward, pseudo-label merge, caption
/// concatenation, and the cached teacher outputs for distillation.
#[allow(clippy::too_many_arguments)]
pub fn cl_targets(
    sample: &PanopticSample,
    sample_idx: usize,
    step: usize,
    schedule: &ClassSchedule,
    words: &WordBank,
    student: &ModelState,
    teacher: &ModelState,
    pseudo: &PseudoMode,
    cid_conf_floor: f64,
    caption_beam: usize,
) -> Result<SampleTargets> {
    let view = apply_cl_view(sample, step, schedule, words)?;
    let current: BTreeSet<ClassId> = schedule.classes_at(step)?.iter().copied().collect();

    let t_out = eval_forward(teacher, &sample.image)?;
    let (h, w) = sample.semantic_mask.dim();
    let assembled = assemble_panoptic(&t_out, schedule, h, w);
    let teacher_caption_ids = generate_caption(teacher, &t_out.bundle.text_embeddings, caption_beam)?;
    // rollouts may stop at the length cap without END; re-wrap the body
    let mut teacher_caption = vec![crate::synth_data::START.to_string()];
    teacher_caption.extend(
        teacher
            .vocab
            .decode(&teacher_caption_ids)
            .into_iter()
            .filter(|w| w != crate::synth_data::START && w != crate::synth_data::END),
    );
    teacher_caption.push(crate::synth_data::END.to_string());

    // teacher cache for TKD
    let mut cid_candidates = Vec::new();
    for q in 0..teacher.cfg.queries {
        if t_out.no_obj[q] >= 0.5 {
            continue;
        }
        let c_r = (0..t_out.class_probs.ncols())
            .map(|k| t_out.class_probs[[q, k]])
            .fold(0.0f64, f64::max);
        if c_r >= cid_conf_floor {
            cid_candidates.push((q, c_r));
        }
    }
    let cache = TeacherCache {
        qm: t_out.bundle.mask_embeddings.clone(),
        qt: t_out.bundle.text_embeddings.clone(),
        class_probs: t_out.class_probs.clone(),
        mask_probs: t_out.mask_probs.clone(),
        cid_candidates,
    };

    let (segments, caption_tokens, supervised) = match pseudo {
        PseudoMode::None => {
            let segs = segments_from_view(&view, schedule);
            (segs, view.caption.clone(), current.clone())
        }
        PseudoMode::Fixed { threshold } | PseudoMode::Tpl { threshold } => {
            let caption_classes = if matches!(pseudo, PseudoMode::Tpl { .. }) {
                let mentioned = caption_class_mentions(&teacher_caption, words);
                let old = schedule.old_classes(step);
                mentioned.intersection(&old).copied().collect()
            } else {
                BTreeSet::new()
            };
            let merged = make_mask_pseudo_labels(
                &assembled.class_score_maps(),
                &assembled.class_map,
                &view.semantic_mask,
                &caption_classes,
                *threshold,
                schedule,
                step,
            )?;

            let mut segments = segments_from_view(&view, schedule);
            let mut revived: BTreeSet<ClassId> = BTreeSet::new();

            // pseudo thing segments: split by the snapshot's winning query
            let old_things: Vec<ClassId> = schedule
                .old_classes(step)
                .into_iter()
                .filter(|c| schedule.is_thing(*c))
                .collect();
            for &k in &old_things {
                let mut by_query: BTreeMap<i32, Array2<bool>> = BTreeMap::new();
                for y in 0..h {
                    for x in 0..w {
                        let tag = merged.source_tags[[y, x]];
                        if merged.merged_mask[[y, x]] == k
                            && (tag == SourceTag::PseudoConf || tag == SourceTag::PseudoCap)
                        {
                            let q = assembled.winner_query[[y, x]];
                            by_query
                                .entry(q)
                                .or_insert_with(|| Array2::from_elem((h, w), false))
                                [[y, x]] = true;
                        }
                    }
                }
                for mask in by_query.values() {
                    let m = mask8_flat(mask);
                    if m.sum() > 0.0 {
                        segments.push(MatchTarget { class_id: k, mask: m });
                        revived.insert(k);
                    }
                }
            }
            // pseudo stuff segments: merged per class
            for &k in &schedule.old_classes(step) {
                if !schedule.is_stuff(k) {
                    continue;
                }
                let mut mask = Array2::from_elem((h, w), false);
                let mut any = false;
                for y in 0..h {
                    for x in 0..w {
                        let tag = merged.source_tags[[y, x]];
                        if merged.merged_mask[[y, x]] == k
                            && (tag == SourceTag::PseudoConf || tag == SourceTag::PseudoCap)
                        {
                            mask[[y, x]] = true;
                            any = true;
                        }
                    }
                }
                if any {
                    let m = mask8_flat(&mask);
                    if m.sum() > 0.0 {
                        segments.push(MatchTarget { class_id: k, mask: m });
                        revived.insert(k);
                    }
                }
            }

            let merged_caption = make_caption_pseudo_label(
                &teacher_caption,
                &view.caption,
                words,
                student.cfg.max_caption_len,
            )?;
            let mut supervised = current.clone();
            supervised.extend(revived);
            (segments, merged_caption.tokens, supervised)
        }
    };

    // the view's captions and the snapshot's captions both tokenize in the
    // expanded vocabulary
    let caption_ids = student.vocab.encode(&caption_tokens)?;

    Ok(SampleTargets {
        sample_idx,
        sample_id: sample.sample_id,
        segments,
        caption_ids,
        supervised,
        teacher: Some(cache),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{expand_classifier, ModelConfig};
    use crate::synth_data::{generate_dataset, make_schedule, DatasetSpec};

    #[test]
    fn base_targets_shape() {
        let spec = DatasetSpec::new(6, 6, 2, 3);
        let samples = generate_dataset(&spec).unwrap();
        let schedule = make_schedule(6, 4, 2, &[7, 8], &[1, 2, 3, 4, 5, 6]).unwrap();
        let base_words: Vec<(ClassId, String)> = schedule.steps[0]
            .iter()
            .map(|&c| (c, spec.vocab.word(c).unwrap().to_string()))
            .collect();
        let student = ModelState::init(ModelConfig::tiny(), &base_words, 1).unwrap();

        for (i, s) in samples.iter().enumerate() {
            let t = base_targets(s, i, &schedule, &spec.vocab, &student).unwrap();
            assert_eq!(t.caption_ids[0], student.vocab.start_id());
            for seg in &t.segments {
                assert!(schedule.steps[0].contains(&seg.class_id));
                assert_eq!(seg.mask.len(), 64);
            }
            assert_eq!(t.supervised.len(), 6);
        }
    }

    #[test]
    fn cl_targets_merge_and_supervise() {
        let spec = DatasetSpec::new(8, 6, 2, 4);
        let samples = generate_dataset(&spec).unwrap();
        let schedule = make_schedule(6, 4, 2, &[7, 8], &[1, 2, 3, 4, 5, 6]).unwrap();
        let base_words: Vec<(ClassId, String)> = schedule.steps[0]
            .iter()
            .map(|&c| (c, spec.vocab.word(c).unwrap().to_string()))
            .collect();
        let teacher = ModelState::init(ModelConfig::tiny(), &base_words, 1).unwrap();
        let inc_words: Vec<(ClassId, String)> = schedule.steps[1]
            .iter()
            .map(|&c| (c, spec.vocab.word(c).unwrap().to_string()))
            .collect();
        let student = expand_classifier(&teacher, &inc_words, 1).unwrap();

        let pseudo = PseudoMode::Tpl { threshold: 0.7 };
        for (i, s) in samples.iter().enumerate() {
            let t = cl_targets(
                s, i, 1, &schedule, &spec.vocab, &student, &teacher, &pseudo, 0.25, 2,
            )
            .unwrap();
            assert!(t.teacher.is_some());
            // supervised covers the current classes at minimum
            assert!(t.supervised.contains(&5) && t.supervised.contains(&6));
            // all target classes have heads in the expanded model
            for seg in &t.segments {
                assert!(student.classes.contains(&seg.class_id));
            }
            // caption ids decode back to a well-formed caption
            let words = student.vocab.decode(&t.caption_ids);
            assert_eq!(words.first().map(String::as_str), Some("START"));
            assert_eq!(words.last().map(String::as_str), Some("END"));
        }
    }

    #[test]
    fn pseudo_none_keeps_only_current_classes() {
        let spec = DatasetSpec::new(8, 6, 2, 5);
        let samples = generate_dataset(&spec).unwrap();
        let schedule = make_schedule(6, 4, 2, &[7, 8], &[1, 2, 3, 4, 5, 6]).unwrap();
        let base_words: Vec<(ClassId, String)> = schedule.steps[0]
            .iter()
            .map(|&c| (c, spec.vocab.word(c).unwrap().to_string()))
            .collect();
        let teacher = ModelState::init(ModelConfig::tiny(), &base_words, 2).unwrap();
        let inc_words: Vec<(ClassId, String)> = schedule.steps[1]
            .iter()
            .map(|&c| (c, spec.vocab.word(c).unwrap().to_string()))
            .collect();
        let student = expand_classifier(&teacher, &inc_words, 2).unwrap();

        for (i, s) in samples.iter().enumerate() {
            let t = cl_targets(
                s, i, 1, &schedule, &spec.vocab, &student, &teacher,
                &PseudoMode::None, 0.25, 1,
            )
            .unwrap();
            for seg in &t.segments {
                assert!([5, 6].contains(&seg.class_id));
            }
            assert_eq!(t.supervised.len(), 2);
        }
    }
}

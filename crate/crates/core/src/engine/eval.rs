//! Held-out evaluation after each step: dataset-level PQ over the learned
//! classes plus corpus BLEU of beam-searched captions against references
//! restricted to the learned classes.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::error::Result;
use crate::metrics::{
    class_group_report, panoptic_stats, pq_from_stats, BleuAccumulator, MetricsReport, PqStats,
};
use crate::model::infer::gt_scene;
use crate::model::{assemble_panoptic, eval_forward, generate_caption, ModelState};
use crate::synth_data::{caption_template, ClassId, ClassSchedule, PanopticSample, WordBank};

/// Reference caption over the learned classes only.
fn reference_caption(
    sample: &PanopticSample,
    learned: &BTreeSet<ClassId>,
    schedule: &ClassSchedule,
    words: &WordBank,
) -> Vec<String> {
    let mut thing_counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for inst in &sample.instances {
        if learned.contains(&inst.class_id) {
            *thing_counts.entry(inst.class_id).or_insert(0) += 1;
        }
    }
    let stuff_present: BTreeSet<ClassId> = sample
        .semantic_mask
        .iter()
        .copied()
        .filter(|c| learned.contains(c) && schedule.is_stuff(*c))
        .collect();
    caption_template(&thing_counts, &stuff_present, words)
}

/// Evaluates one model over the validation samples at step `t`.
pub fn evaluate_step(
    model: &ModelState,
    samples: &[PanopticSample],
    val_idx: &[usize],
    schedule: &ClassSchedule,
    step: usize,
    words: &WordBank,
    beam: usize,
) -> Result<MetricsReport> {
    let learned = schedule.learned_until(step);

    struct PerSample {
        stats: BTreeMap<ClassId, PqStats>,
        candidate: Vec<String>,
        reference: Vec<String>,
    }

    let per_sample: Vec<Result<PerSample>> = val_idx
        .par_iter()
        .map(|&i| {
            let sample = &samples[i];
            let (h, w) = sample.semantic_mask.dim();
            let out = eval_forward(model, &sample.image)?;
            let pred = assemble_panoptic(&out, schedule, h, w);
            let gt = gt_scene(sample, schedule, &learned);
            let stats = panoptic_stats(&pred.scene(), &gt, &learned)?;

            let caption_ids = generate_caption(model, &out.bundle.text_embeddings, beam)?;
            let candidate = model.vocab.decode(&caption_ids);
            let reference = reference_caption(sample, &learned, schedule, words);
            Ok(PerSample { stats, candidate, reference })
        })
        .collect();

    let mut merged: BTreeMap<ClassId, PqStats> = BTreeMap::new();
    let mut bleu_acc = BleuAccumulator::default();
    for r in per_sample {
        let r = r?;
        for (c, s) in r.stats {
            merged.entry(c).or_default().merge(&s);
        }
        bleu_acc.add(&r.candidate, &r.reference);
    }

    let per_class = merged.iter().map(|(&c, s)| (c, pq_from_stats(s))).collect();
    Ok(class_group_report(&per_class, schedule, step, bleu_acc.score()))
}

//! Per-sample loss assembly and the batched training loop.
//!
//! Each sample builds its own graph (forward, matching, losses, optional TKD)
//! so batches parallelize across workers; gradients are collected in sample
//! order and reduced sequentially, which keeps runs bit-reproducible for any
//! worker count. The batch loss is the mean of per-sample losses.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD};
use rayon::prelude::*;

use crate::autodiff::Var;
use crate::distill::{
    build_contrastive_set, cid_loss, icd_loss, quality_score, tkd_loss, InstancePair,
};
use crate::error::Result;
use crate::model::{Forward, ModelState};
use crate::objectives::{
    caption_loss, cls_loss, hungarian_match, seg_loss, total_loss, LossComponents,
};
use crate::rng::{rng_for, tag};
use crate::synth_data::{ClassSchedule, PanopticSample};

use super::optimizer::SgdMomentum;
use super::targets::SampleTargets;
use super::{ExperimentConfig, Method};

fn sigmoid2(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|x| 1.0 / (1.0 + (-x).exp()))
}

fn binary_row_iou(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (x >= 0.5, y >= 0.5);
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

#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub cls: f64,
    pub seg: f64,
    pub cap: f64,
    pub tkd: f64,
    pub total: f64,
}

pub struct SampleLoss {
    pub breakdown: LossBreakdown,
    pub grads: BTreeMap<String, ArrayD<f64>>,
}

/// Forward + matching + losses for one sample; gradients by parameter name.
pub fn sample_loss(
    student: &ModelState,
    teacher: Option<&ModelState>,
    sample: &PanopticSample,
    targets: &SampleTargets,
    schedule: &ClassSchedule,
    step: usize,
    cfg: &ExperimentConfig,
    with_grads: bool,
) -> Result<SampleLoss> {
    let mut fwd = Forward::new(student);
    let (f_pix, _, _) = fwd.encode(&sample.image)?;
    let masks = fwd.decode_masks(f_pix);
    let text_mem = fwd.text_memory(masks.q_out, f_pix);

    let cap_input = &targets.caption_ids[..targets.caption_ids.len() - 1];
    let cap_target = &targets.caption_ids[1..];
    let cap_logits = fwd.caption_logits(text_mem, cap_input)?;

    let class_probs = sigmoid2(
        &fwd.tape.value(masks.class_logits).clone().into_dimensionality().unwrap(),
    );
    let mask_probs =
        sigmoid2(&fwd.tape.value(masks.mask_logits).clone().into_dimensionality().unwrap());

    let assignment = hungarian_match(
        &class_probs,
        &masks.class_ids,
        &mask_probs,
        &targets.segments,
        &cfg.weights,
    )?;

    let cls = cls_loss(
        &mut fwd.tape,
        masks.class_logits,
        masks.no_obj,
        &masks.class_ids,
        &targets.segments,
        &assignment,
        &targets.supervised,
    )?;
    let seg = seg_loss(&mut fwd.tape, masks.mask_logits, &targets.segments, &assignment, &cfg.weights)?;
    let cap = caption_loss(&mut fwd.tape, cap_logits, cap_target)?;

    let is_cl_step = step >= 1;
    let mut tkd: Option<Var> = None;
    if is_cl_step && (cfg.icd || cfg.cid) {
        if let (Some(cache), Some(teacher)) = (&targets.teacher, teacher) {
            let assignments: Vec<(usize, u32)> = assignment
                .pairs
                .iter()
                .map(|&(t, q)| (q, targets.segments[t].class_id))
                .collect();
            let old_classes = schedule.old_classes(step);

            let icd = if cfg.icd {
                let cset = build_contrastive_set(
                    &cache.qm,
                    &assignments,
                    &old_classes,
                    cfg.distill.contrastive_cap,
                    rng_seed_for_sample(cfg.seed, step, targets.sample_id),
                );
                Some(icd_loss(
                    &mut fwd.tape,
                    &cache.qm,
                    &cache.qt,
                    masks.q_m,
                    text_mem,
                    &cset,
                    &cfg.distill,
                    schedule.learned_until(step).len(),
                )?)
            } else {
                None
            };

            let cid = if cfg.cid {
                // cross path: live features through the frozen decoder
                let f_val: Array2<f64> =
                    fwd.tape.value(f_pix).clone().into_dimensionality().unwrap();
                let mut cross = Forward::new(teacher);
                let f_leaf = cross.tape.leaf2(f_val);
                let cross_masks = cross.decode_masks(f_leaf);
                let cross_probs = sigmoid2(
                    &cross
                        .tape
                        .value(cross_masks.mask_logits)
                        .clone()
                        .into_dimensionality()
                        .unwrap(),
                );

                let mut pairs = Vec::new();
                for &(q, c_r) in &cache.cid_candidates {
                    let iou = binary_row_iou(cache.mask_probs.row(q), cross_probs.row(q));
                    let q_r = quality_score(c_r.clamp(0.0, 1.0), iou, cfg.distill.gamma)?;
                    pairs.push(InstancePair {
                        query: q,
                        q_r,
                        teacher_dist: cache.class_probs.row(q).to_owned(),
                    });
                }

                // student probabilities over the shared (old) class columns
                let k_all = masks.class_ids.len();
                let k_old = cache.class_probs.ncols();
                let mut select = Array2::zeros((k_all, k_old));
                for i in 0..k_old {
                    select[[i, i]] = 1.0;
                }
                let probs = fwd.tape.sigmoid(masks.class_logits);
                let sel = fwd.tape.leaf2(select);
                let probs_old = fwd.tape.matmul(probs, sel);
                Some(cid_loss(&mut fwd.tape, probs_old, &pairs, cfg.distill.d_kind)?)
            } else {
                None
            };

            tkd = Some(tkd_loss(&mut fwd.tape, icd, cid));
        }
    }

    let parts = LossComponents { cls, seg, cap, tkd };
    let total = total_loss(&mut fwd.tape, &parts, &cfg.weights, is_cl_step);

    let breakdown = LossBreakdown {
        cls: fwd.tape.scalar(cls),
        seg: fwd.tape.scalar(seg),
        cap: fwd.tape.scalar(cap),
        tkd: tkd.map(|t| fwd.tape.scalar(t)).unwrap_or(0.0),
        total: fwd.tape.scalar(total),
    };

    let mut grads = BTreeMap::new();
    if with_grads {
        let g = fwd.tape.backward(total);
        for (name, var) in fwd.param_vars() {
            if let Some(grad) = g.get(*var) {
                grads.insert(name.clone(), grad.clone());
            }
        }
    }
    Ok(SampleLoss { breakdown, grads })
}

fn rng_seed_for_sample(seed: u64, step: usize, sample_id: u64) -> u64 {
    crate::rng::derive_seed(&[seed, step as u64, sample_id])
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_tkd: f64,
}

/// Trains the live model in place over the step's samples.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs(
    student: &mut ModelState,
    teacher: Option<&ModelState>,
    samples: &[&PanopticSample],
    targets: &[SampleTargets],
    schedule: &ClassSchedule,
    step: usize,
    cfg: &ExperimentConfig,
    epochs: usize,
) -> Result<Vec<EpochLog>> {
    use rand::seq::SliceRandom;

    let frozen_encoder = cfg.method == Method::FinetuneFe && step >= 1;
    let frozen = move |name: &str| {
        frozen_encoder && (name.starts_with("enc.") || name.starts_with("cce."))
    };

    let mut opt = SgdMomentum::new(cfg.optim);
    let n = samples.len();
    let batch = cfg.optim.batch_size.max(1);
    let total_iters = epochs * n.div_ceil(batch);
    let mut iter = 0usize;
    let mut logs = Vec::new();

    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng_for(&[cfg.seed, tag::SHUFFLE, step as u64, epoch as u64]);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut tkd_sum = 0.0;
        for chunk in order.chunks(batch) {
            let results: Vec<Result<SampleLoss>> = chunk
                .par_iter()
                .map(|&i| {
                    sample_loss(
                        student,
                        teacher,
                        samples[i],
                        &targets[i],
                        schedule,
                        step,
                        cfg,
                        true,
                    )
                })
                .collect();

            let mut grads: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
            let mut batch_loss = 0.0;
            let b = chunk.len() as f64;
            for r in results {
                let r = r?;
                batch_loss += r.breakdown.total / b;
                tkd_sum += r.breakdown.tkd;
                for (name, g) in r.grads {
                    match grads.get_mut(&name) {
                        Some(acc) => *acc += &g,
                        None => {
                            grads.insert(name, g);
                        }
                    }
                }
            }
            for g in grads.values_mut() {
                *g /= b;
            }

            let lr = cfg.optim.lr_at(iter, total_iters);
            opt.step(&mut student.params, &grads, lr, frozen);
            iter += 1;
            loss_sum += batch_loss * b;
        }
        logs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / n.max(1) as f64,
            mean_tkd: tkd_sum / n.max(1) as f64,
        });
    }
    Ok(logs)
}

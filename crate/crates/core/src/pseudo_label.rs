//! Task-asymmetric pseudo-labeling.
//!
//! Old-model mask predictions survive into the step-t ground truth when the
//! prediction is an old class AND (its confidence clears the threshold OR the
//! old model's caption mentions the class). New ground truth always wins;
//! everything else is background. Caption targets concatenate the old model's
//! predicted caption body with the new label body, deduplicated per class
//! word and capped with new-body phrases prioritized.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::synth_data::{ClassId, ClassSchedule, WordBank, END, START};

/// Provenance of each merged pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceTag {
    NewGt,
    PseudoConf,
    PseudoCap,
    Background,
}

/// Per-pixel merged labels with provenance.
#[derive(Debug, Clone)]
pub struct PseudoLabelMap {
    pub merged_mask: Array2<ClassId>,
    pub source_tags: Array2<SourceTag>,
    pub threshold: f64,
    /// Class ids mentioned by the old model's predicted caption.
    pub caption_classes: BTreeSet<ClassId>,
}

/// Class ids whose class word occurs in a token sequence; sentinels and
/// function words never match.
pub fn caption_class_mentions(tokens: &[String], words: &WordBank) -> BTreeSet<ClassId> {
    let mut out = BTreeSet::new();
    for (&c, w) in &words.class_words {
        if tokens.iter().any(|t| t == w) {
            out.insert(c);
        }
    }
    out
}

/// Applies the per-pixel merge rule.
///
/// `old_probs` carries one confidence map per old class (missing map = zero
/// confidence); `old_argmax` is the old model's predicted class map with
/// background where it predicts nothing; `new_gt` is the step-t view (labels
/// only in `C^t`). Precedence: new ground truth, then confident or
/// caption-verified pseudo labels, then background.
pub fn make_mask_pseudo_labels(
    old_probs: &BTreeMap<ClassId, Array2<f64>>,
    old_argmax: &Array2<ClassId>,
    new_gt: &Array2<ClassId>,
    caption_classes: &BTreeSet<ClassId>,
    threshold: f64,
    schedule: &ClassSchedule,
    step: usize,
) -> Result<PseudoLabelMap> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CoreError::Domain(format!("threshold {threshold} outside [0, 1]")));
    }
    if old_argmax.dim() != new_gt.dim() {
        return Err(CoreError::Contract("old and new label shapes differ".into()));
    }
    let old_classes = schedule.old_classes(step);
    let current: BTreeSet<ClassId> = schedule.classes_at(step)?.iter().copied().collect();
    let bg = schedule.background_id;

    for &c in old_argmax.iter() {
        if c != bg && !old_classes.contains(&c) {
            return Err(CoreError::Contract(format!(
                "old prediction contains id {c} outside the learned classes"
            )));
        }
    }
    for &c in new_gt.iter() {
        if c != bg && !current.contains(&c) {
            return Err(CoreError::Contract(format!(
                "new ground truth contains id {c} outside C^t"
            )));
        }
    }

    let (h, w) = new_gt.dim();
    let mut merged = Array2::from_elem((h, w), bg);
    let mut tags = Array2::from_elem((h, w), SourceTag::Background);
    for y in 0..h {
        for x in 0..w {
            let fresh = new_gt[[y, x]];
            if fresh != bg {
                merged[[y, x]] = fresh;
                tags[[y, x]] = SourceTag::NewGt;
                continue;
            }
            let old = old_argmax[[y, x]];
            if old != bg && old_classes.contains(&old) {
                let p = old_probs.get(&old).map_or(0.0, |m| m[[y, x]]);
                if p >= threshold {
                    merged[[y, x]] = old;
                    tags[[y, x]] = SourceTag::PseudoConf;
                } else if caption_classes.contains(&old) {
                    merged[[y, x]] = old;
                    tags[[y, x]] = SourceTag::PseudoCap;
                }
            }
        }
    }

    Ok(PseudoLabelMap {
        merged_mask: merged,
        source_tags: tags,
        threshold,
        caption_classes: caption_classes.clone(),
    })
}

/// Caption target built from the old model's prediction and the new label.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionTarget {
    pub tokens: Vec<String>,
    /// Token range contributed by the old model's caption body.
    pub pseudo_span: (usize, usize),
    /// Token range contributed by the step-t label body.
    pub new_span: (usize, usize),
}

/// A caption body split into per-class phrases (`<count> <word>` or
/// `on <word>`); words outside the template grammar pass through untouched.
fn phrases<'a>(body: &'a [String], words: &WordBank) -> Vec<(Option<ClassId>, Vec<&'a str>)> {
    let class_of = |tok: &str| -> Option<ClassId> {
        words
            .class_words
            .iter()
            .find(|(_, w)| w.as_str() == tok)
            .map(|(&c, _)| c)
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < body.len() {
        if i + 1 < body.len() {
            if let Some(c) = class_of(&body[i + 1]) {
                out.push((Some(c), vec![body[i].as_str(), body[i + 1].as_str()]));
                i += 2;
                continue;
            }
        }
        out.push((class_of(&body[i]), vec![body[i].as_str()]));
        i += 1;
    }
    out
}

fn body_of<'a>(caption: &'a [String]) -> Result<&'a [String]> {
    if caption.len() < 2
        || caption.first().map(String::as_str) != Some(START)
        || caption.last().map(String::as_str) != Some(END)
    {
        return Err(CoreError::Format("caption must be wrapped in START .. END".into()));
    }
    Ok(&caption[1..caption.len() - 1])
}

/// Concatenates the old prediction body with the new label body before END.
/// Duplicate class words keep their first occurrence; when the merged caption
/// would exceed `max_len` tokens, old-body phrases are dropped first.
pub fn make_caption_pseudo_label(
    old_caption: &[String],
    new_caption: &[String],
    words: &WordBank,
    max_len: usize,
) -> Result<CaptionTarget> {
    let old_body = body_of(old_caption)?;
    let new_body = body_of(new_caption)?;

    let old_phr = phrases(old_body, words);
    let new_phr = phrases(new_body, words);

    // first occurrence wins: a class already named by the old body is not
    // repeated by the new body
    let mut seen: BTreeSet<ClassId> = BTreeSet::new();
    let mut old_keep: Vec<&(Option<ClassId>, Vec<&str>)> = Vec::new();
    for p in &old_phr {
        if let Some(c) = p.0 {
            if !seen.insert(c) {
                continue;
            }
        }
        old_keep.push(p);
    }
    let mut new_keep: Vec<&(Option<ClassId>, Vec<&str>)> = Vec::new();
    for p in &new_phr {
        if let Some(c) = p.0 {
            if !seen.insert(c) {
                continue;
            }
        }
        new_keep.push(p);
    }

    // length cap: sentinels cost 2; new-body phrases are kept preferentially
    let budget = max_len.saturating_sub(2);
    let new_cost: usize = new_keep.iter().map(|p| p.1.len()).sum();
    let mut old_budget = budget.saturating_sub(new_cost);
    let mut old_final: Vec<&(Option<ClassId>, Vec<&str>)> = Vec::new();
    for p in &old_keep {
        if p.1.len() <= old_budget {
            old_budget -= p.1.len();
            old_final.push(p);
        }
    }

    let mut tokens = vec![START.to_string()];
    let pseudo_start = tokens.len();
    for p in &old_final {
        tokens.extend(p.1.iter().map(|s| s.to_string()));
    }
    let pseudo_end = tokens.len();
    for p in &new_keep {
        tokens.extend(p.1.iter().map(|s| s.to_string()));
    }
    let new_end = tokens.len();
    tokens.truncate(max_len - 1);
    let new_end = new_end.min(tokens.len());
    tokens.push(END.to_string());

    Ok(CaptionTarget {
        tokens,
        pseudo_span: (pseudo_start, pseudo_end),
        new_span: (pseudo_end, new_end),
    })
}

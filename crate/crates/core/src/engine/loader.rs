//! Per-step data access with isolation instrumentation.
//!
//! A step's loader exposes exactly the samples of `D^t` (images whose full
//! annotation contains at least one current-step class). Any attempt to fetch
//! a sample outside that view errors and is counted, so protocol isolation is
//! checkable after a run.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{CoreError, Result};
use crate::synth_data::{ClassId, ClassSchedule, PanopticSample};

/// Assigns train samples to the steps whose classes they contain.
pub fn partition_steps(
    samples: &[PanopticSample],
    train_idx: &[usize],
    schedule: &ClassSchedule,
) -> Vec<Vec<usize>> {
    let mut per_step = vec![Vec::new(); schedule.num_steps()];
    for &i in train_idx {
        let present = samples[i].present_classes();
        for (t, classes) in schedule.steps.iter().enumerate() {
            let current: BTreeSet<ClassId> = classes.iter().copied().collect();
            if !present.is_disjoint(&current) {
                per_step[t].push(i);
            }
        }
    }
    per_step
}

pub struct StepLoader<'a> {
    step: usize,
    samples: &'a [PanopticSample],
    allowed: Vec<usize>,
    allowed_ids: BTreeMap<u64, usize>,
    reads: AtomicU64,
    foreign_reads: AtomicU64,
}

impl<'a> StepLoader<'a> {
    pub fn new(step: usize, samples: &'a [PanopticSample], allowed: Vec<usize>) -> Self {
        let allowed_ids = allowed
            .iter()
            .map(|&i| (samples[i].sample_id, i))
            .collect();
        Self {
            step,
            samples,
            allowed,
            allowed_ids,
            reads: AtomicU64::new(0),
            foreign_reads: AtomicU64::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    /// Index-order access within `D^t` (the only path training uses).
    pub fn get(&self, pos: usize) -> &'a PanopticSample {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.samples[self.allowed[pos]]
    }

    pub fn indices(&self) -> &[usize] {
        &self.allowed
    }

    /// Fetch by sample id; ids outside `D^t` are an access violation.
    pub fn try_get(&self, sample_id: u64) -> Result<&'a PanopticSample> {
        match self.allowed_ids.get(&sample_id) {
            Some(&i) => {
                self.reads.fetch_add(1, Ordering::Relaxed);
                Ok(&self.samples[i])
            }
            None => {
                self.foreign_reads.fetch_add(1, Ordering::Relaxed);
                Err(CoreError::AccessViolation { step: self.step, sample_id })
            }
        }
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    /// Rejected fetches of out-of-step samples; stays zero in a clean run.
    pub fn foreign_reads(&self) -> u64 {
        self.foreign_reads.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::{generate_dataset, make_schedule, train_val_split, DatasetSpec};

    #[test]
    fn partition_and_isolation() {
        let spec = DatasetSpec::new(40, 6, 2, 5);
        let samples = generate_dataset(&spec).unwrap();
        let schedule = make_schedule(6, 4, 2, &[7, 8], &[1, 2, 3, 4, 5, 6]).unwrap();
        let (train, _) = train_val_split(&samples, spec.seed);
        let parts = partition_steps(&samples, &train, &schedule);
        assert_eq!(parts.len(), 2);
        // every sample has a forced stuff band, so D^0 is the whole train set
        assert_eq!(parts[0].len(), train.len());
        assert!(!parts[1].is_empty());
        // membership rule: step-1 samples contain class 5 or 6
        for &i in &parts[1] {
            let present = samples[i].present_classes();
            assert!(present.contains(&5) || present.contains(&6));
        }

        let loader = StepLoader::new(1, &samples, parts[1].clone());
        let ok_id = samples[parts[1][0]].sample_id;
        assert!(loader.try_get(ok_id).is_ok());
        let foreign = samples
            .iter()
            .map(|s| s.sample_id)
            .find(|id| !loader.indices().iter().any(|&i| samples[i].sample_id == *id));
        if let Some(fid) = foreign {
            assert!(matches!(
                loader.try_get(fid),
                Err(CoreError::AccessViolation { step: 1, .. })
            ));
            assert_eq!(loader.foreign_reads(), 1);
        }
    }
}

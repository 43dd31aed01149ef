//! SGD with momentum, poly learning-rate decay and global-norm clipping.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::model::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub epochs_base: usize,
    pub epochs_cl: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            poly_power: 0.9,
            epochs_base: 24,
            epochs_cl: 14,
            batch_size: 8,
            clip_norm: 5.0,
        }
    }
}

impl OptimConfig {
    /// Poly decay: `lr * (1 - iter/total)^power`.
    pub fn lr_at(&self, iter: usize, total_iters: usize) -> f64 {
        let frac = iter as f64 / total_iters.max(1) as f64;
        self.lr * (1.0 - frac.min(1.0)).powf(self.poly_power)
    }
}

pub struct SgdMomentum {
    cfg: OptimConfig,
    velocity: BTreeMap<String, ArrayD<f64>>,
}

impl SgdMomentum {
    pub fn new(cfg: OptimConfig) -> Self {
        Self { cfg, velocity: BTreeMap::new() }
    }

    /// One update over the given gradients. Parameters for which `frozen`
    /// returns true are skipped entirely.
    pub fn step<F: Fn(&str) -> bool>(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, ArrayD<f64>>,
        lr: f64,
        frozen: F,
    ) {
        // global-norm clip
        let mut sq = 0.0;
        for (name, g) in grads {
            if frozen(name) {
                continue;
            }
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
        let norm = sq.sqrt();
        let scale = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };

        for (name, g) in grads {
            if frozen(name) {
                continue;
            }
            let Some(p) = params.get_mut(name) else { continue };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.shape().to_vec()));
            v.zip_mut_with(g, |vel, &grad| {
                *vel = self.cfg.momentum * *vel + grad * scale;
            });
            p.zip_mut_with(v, |param, &vel| *param -= lr * vel);
        }
    }
}

//! Continual-learning orchestration: base training, per-step snapshotting and
//! classifier expansion, pseudo-label construction, joint optimization with
//! distillation, baselines, checkpointed resumption, and reporting.

mod eval;
mod loader;
mod optimizer;
mod report;
mod targets;
mod train;

pub use eval::evaluate_step;
pub use loader::{partition_steps, StepLoader};
pub use optimizer::{OptimConfig, SgdMomentum};
pub use report::{
    config_hash, curves_csv, report_csv, sha256_hex, write_report_files, ExperimentReport,
    RunManifest,
};
pub use targets::{base_targets, cl_targets, SampleTargets, TeacherCache};
pub use train::{sample_loss, train_epochs, EpochLog, LossBreakdown, SampleLoss};

use std::collections::BTreeSet;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::error::{CoreError, Result};
use crate::metrics::MetricsReport;
use crate::model::{
    expand_classifier, load_checkpoint, save_checkpoint, snapshot, ModelConfig, ModelState,
};
use crate::objectives::LossWeights;
use crate::synth_data::{
    make_schedule, named_order, train_val_split, ClassId, ClassSchedule, DatasetSpec,
    PanopticSample,
};

/// Training regime for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Full method: distillation plus task-asymmetric pseudo-labeling.
    Cpp,
    /// Naive fine-tuning on each step's classes.
    Finetune,
    /// Fine-tuning with the encoder frozen after step 0.
    FinetuneFe,
    /// Joint training over all classes at once (upper bound).
    Offline,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Cpp => "cpp",
            Method::Finetune => "finetune",
            Method::FinetuneFe => "finetune_fe",
            Method::Offline => "offline",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "cpp" => Ok(Method::Cpp),
            "finetune" => Ok(Method::Finetune),
            "finetune_fe" => Ok(Method::FinetuneFe),
            "offline" => Ok(Method::Offline),
            other => Err(CoreError::Config {
                field: "method".into(),
                reason: format!("unknown method `{other}`"),
            }),
        }
    }
}

/// Mask pseudo-labeling variant at CL steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PseudoMode {
    None,
    Fixed { threshold: f64 },
    Tpl { threshold: f64 },
}

/// Schedule selector: split sizes plus one of the named class orders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub base_thing: usize,
    pub inc_size: usize,
    pub order: char,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { base_thing: 4, inc_size: 2, order: 'a' }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub schedule: ScheduleSpec,
    pub method: Method,
    pub icd: bool,
    pub cid: bool,
    pub pseudo: PseudoMode,
    pub weights: LossWeights,
    pub distill: DistillConfig,
    pub optim: OptimConfig,
    pub model: ModelConfig,
    pub caption_beam: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Reuse a compatible step-0 checkpoint instead of training the base.
    pub base_checkpoint: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Method presets: toggles follow the method's definition.
    pub fn new(dataset: DatasetSpec, method: Method, seed: u64, out_dir: PathBuf) -> Self {
        let (icd, cid, pseudo) = match method {
            Method::Cpp => (true, true, PseudoMode::Tpl { threshold: 0.7 }),
            _ => (false, false, PseudoMode::None),
        };
        Self {
            dataset,
            schedule: ScheduleSpec::default(),
            method,
            icd,
            cid,
            pseudo,
            weights: LossWeights::default(),
            distill: DistillConfig::default(),
            optim: OptimConfig::default(),
            model: ModelConfig::default(),
            caption_beam: 5,
            seed,
            out_dir,
            base_checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let bad = |reason: &str| CoreError::Config {
            field: "method".into(),
            reason: reason.into(),
        };
        match self.method {
            Method::Finetune | Method::FinetuneFe | Method::Offline => {
                if self.icd || self.cid || self.pseudo != PseudoMode::None {
                    return Err(bad("baselines run without distillation or pseudo-labels"));
                }
            }
            Method::Cpp => {}
        }
        if self.optim.epochs_base == 0 || self.optim.epochs_cl == 0 {
            return Err(CoreError::Config {
                field: "optim.epochs".into(),
                reason: "epochs must be at least 1".into(),
            });
        }
        if self.caption_beam == 0 {
            return Err(CoreError::Config {
                field: "caption_beam".into(),
                reason: "beam width must be at least 1".into(),
            });
        }
        if let PseudoMode::Fixed { threshold } | PseudoMode::Tpl { threshold } = self.pseudo {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(CoreError::Config {
                    field: "pseudo.threshold".into(),
                    reason: format!("{threshold} outside [0, 1]"),
                });
            }
        }
        Ok(())
    }

    /// The CL schedule this run trains against (offline collapses it).
    pub fn build_schedule(&self) -> Result<ClassSchedule> {
        let things = self.dataset.thing_ids();
        let stuff = self.dataset.stuff_ids();
        let order = named_order(self.schedule.order, &things)?;
        let mut schedule = make_schedule(
            self.dataset.num_thing,
            self.schedule.base_thing,
            self.schedule.inc_size,
            &stuff,
            &order,
        )?;
        schedule.order_name = self.schedule.order.to_string();
        if self.method == Method::Offline {
            Ok(schedule.flattened())
        } else {
            Ok(schedule)
        }
    }
}

/// Live model plus the frozen previous-step snapshot.
pub struct StepState {
    pub model: ModelState,
    pub snapshot: Option<ModelState>,
    pub step: usize,
    pub learned: BTreeSet<ClassId>,
}

fn class_words(dataset: &DatasetSpec, classes: &[ClassId]) -> Result<Vec<(ClassId, String)>> {
    classes
        .iter()
        .map(|&c| {
            dataset
                .vocab
                .word(c)
                .map(|w| (c, w.to_string()))
                .ok_or_else(|| CoreError::Config {
                    field: "vocab".into(),
                    reason: format!("no word for class {c}"),
                })
        })
        .collect()
}

pub fn schedule_hash(schedule: &ClassSchedule) -> String {
    let json = serde_json::to_vec(&schedule.steps).unwrap_or_default();
    report::sha256_hex(&json)
}

/// Step-0 training from scratch on the base classes.
pub fn train_base(
    cfg: &ExperimentConfig,
    schedule: &ClassSchedule,
    samples: &[PanopticSample],
    loader: &StepLoader,
) -> Result<(StepState, Vec<EpochLog>)> {
    if loader.is_empty() {
        return Err(CoreError::Protocol("step-0 data is empty".into()));
    }
    let base = class_words(&cfg.dataset, schedule.classes_at(0)?)?;
    let mut model = ModelState::init(cfg.model.clone(), &base, cfg.seed)?;

    let step_samples: Vec<&PanopticSample> = (0..loader.len()).map(|i| loader.get(i)).collect();
    let targets: Vec<SampleTargets> = step_samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| base_targets(s, i, schedule, &cfg.dataset.vocab, &model))
        .collect::<Result<_>>()?;

    let logs = train_epochs(
        &mut model,
        None,
        &step_samples,
        &targets,
        schedule,
        0,
        cfg,
        cfg.optim.epochs_base,
    )?;
    let _ = samples;
    let learned = schedule.learned_until(0);
    Ok((StepState { model, snapshot: None, step: 0, learned }, logs))
}

/// One incremental step: snapshot, expand, build merged targets, train.
pub fn run_cl_step(
    state: StepState,
    cfg: &ExperimentConfig,
    schedule: &ClassSchedule,
    loader: &StepLoader,
) -> Result<(StepState, Vec<EpochLog>)> {
    let t = state.step + 1;
    if t >= schedule.num_steps() {
        return Err(CoreError::Index(format!("step {t} beyond schedule")));
    }
    let teacher = snapshot(&state.model);
    let new = class_words(&cfg.dataset, schedule.classes_at(t)?)?;
    let mut student = expand_classifier(&state.model, &new, cfg.seed)?;

    let step_samples: Vec<&PanopticSample> = (0..loader.len()).map(|i| loader.get(i)).collect();
    let targets: Vec<SampleTargets> = step_samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            cl_targets(
                s,
                i,
                t,
                schedule,
                &cfg.dataset.vocab,
                &student,
                &teacher,
                &cfg.pseudo,
                cfg.distill.cid_conf_floor,
                cfg.caption_beam,
            )
        })
        .collect::<Result<_>>()?;

    let logs = train_epochs(
        &mut student,
        Some(&teacher),
        &step_samples,
        &targets,
        schedule,
        t,
        cfg,
        cfg.optim.epochs_cl,
    )?;

    let learned = schedule.learned_until(t);
    Ok((StepState { model: student, snapshot: Some(teacher), step: t, learned }, logs))
}

#[derive(Serialize, Deserialize)]
struct RunState {
    config_hash: String,
    completed_steps: usize,
    reports: Vec<MetricsReport>,
    train_logs: Vec<Vec<EpochLog>>,
    foreign_reads: u64,
    started_unix: u64,
}

fn load_base_checkpoint(
    path: &std::path::Path,
    cfg: &ExperimentConfig,
    schedule: &ClassSchedule,
) -> Result<ModelState> {
    let (model, header) = load_checkpoint(path)?;
    if header.cfg != cfg.model {
        return Err(CoreError::Checkpoint(
            "base checkpoint was built with a different model configuration".into(),
        ));
    }
    if header.classes != *schedule.classes_at(0)? {
        return Err(CoreError::Checkpoint(
            "base checkpoint classes do not match step 0 of this schedule".into(),
        ));
    }
    Ok(model)
}

/// Runs the full protocol: base step, every CL step (or the single offline
/// step), per-step evaluation and checkpointing, and report emission. With
/// `resume` the run continues from the last completed step if the stored
/// config hash matches.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    samples: &[PanopticSample],
    resume: bool,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let schedule = cfg.build_schedule()?;
    let sched_hash = schedule_hash(&schedule);
    std::fs::create_dir_all(cfg.out_dir.join("checkpoints"))?;

    let config_json = serde_json::to_vec_pretty(cfg)?;
    let cfg_hash = config_hash(&config_json);
    std::fs::write(cfg.out_dir.join("config.json"), &config_json)?;

    let run_state_path = cfg.out_dir.join("run_state.json");
    let mut state_json: Option<RunState> = None;
    if resume && run_state_path.exists() {
        let raw = std::fs::read_to_string(&run_state_path)?;
        let loaded: RunState = serde_json::from_str(&raw)?;
        if loaded.config_hash != cfg_hash {
            return Err(CoreError::Resume(format!(
                "stored config hash {} does not match {cfg_hash}",
                loaded.config_hash
            )));
        }
        state_json = Some(loaded);
    }
    let mut run_state = state_json.unwrap_or(RunState {
        config_hash: cfg_hash.clone(),
        completed_steps: 0,
        reports: Vec::new(),
        train_logs: Vec::new(),
        foreign_reads: 0,
        started_unix: report::now_unix(),
    });

    let (train_idx, val_idx) = train_val_split(samples, cfg.dataset.seed);
    let partition = partition_steps(samples, &train_idx, &schedule);

    // restore the live model when resuming mid-run
    let mut step_state: Option<StepState> = None;
    if run_state.completed_steps > 0 {
        let last = run_state.completed_steps - 1;
        let ckpt = cfg.out_dir.join(format!("checkpoints/step_{last}.ckpt"));
        let (model, header) = load_checkpoint(&ckpt)?;
        if header.schedule_hash != sched_hash {
            return Err(CoreError::Resume("checkpoint schedule hash mismatch".into()));
        }
        step_state = Some(StepState {
            model,
            snapshot: None,
            step: last,
            learned: schedule.learned_until(last),
        });
    }

    for t in run_state.completed_steps..schedule.num_steps() {
        let loader = StepLoader::new(t, samples, partition[t].clone());
        let (next, logs) = if t == 0 {
            match &cfg.base_checkpoint {
                Some(path) if path.exists() => {
                    let model = load_base_checkpoint(path, cfg, &schedule)?;
                    let learned = schedule.learned_until(0);
                    (StepState { model, snapshot: None, step: 0, learned }, Vec::new())
                }
                _ => train_base(cfg, &schedule, samples, &loader)?,
            }
        } else {
            let prev = step_state.take().expect("previous step state");
            run_cl_step(prev, cfg, &schedule, &loader)?
        };

        let report = evaluate_step(
            &next.model,
            samples,
            &val_idx,
            &schedule,
            t,
            &cfg.dataset.vocab,
            cfg.caption_beam,
        )?;

        save_checkpoint(
            &cfg.out_dir.join(format!("checkpoints/step_{t}.ckpt")),
            &next.model,
            t,
            &sched_hash,
        )?;
        run_state.reports.push(report);
        run_state.train_logs.push(logs);
        run_state.foreign_reads += loader.foreign_reads();
        run_state.completed_steps = t + 1;
        std::fs::write(&run_state_path, serde_json::to_string_pretty(&run_state)?)?;

        step_state = Some(next);
    }

    // stamp the BLEU bookkeeping
    let bleu_before = run_state.reports.first().map(|r| r.bleu).unwrap_or(0.0);
    let bleu_after = run_state.reports.last().map(|r| r.bleu).unwrap_or(0.0);
    for r in &mut run_state.reports {
        r.bleu_before = Some(bleu_before);
        r.bleu_after = Some(bleu_after);
    }

    let mut notes = std::collections::BTreeMap::new();
    notes.insert(
        "bleu".into(),
        "corpus-level aggregate n-gram counts, single reference, uniform 4-gram weights, no smoothing".into(),
    );
    notes.insert("pq".into(), "IoU > 0.5 matching; SQ over true positives; RQ = TP/(TP+FP/2+FN/2)".into());

    let finished = report::now_unix();
    let report = ExperimentReport {
        method: cfg.method.name().to_string(),
        order_name: schedule.order_name.clone(),
        schedule_steps: schedule.steps.clone(),
        seed: cfg.seed,
        steps: run_state.reports.clone(),
        bleu_before,
        bleu_after,
        foreign_reads: run_state.foreign_reads,
        wall_secs: finished.saturating_sub(run_state.started_unix) as f64,
        notes,
        train_logs: run_state.train_logs.clone(),
    };

    let mut artifacts = write_report_files(&cfg.out_dir, &report)?;
    artifacts.push("config.json".into());
    artifacts.push("run_state.json".into());
    for t in 0..schedule.num_steps() {
        artifacts.push(format!("checkpoints/step_{t}.ckpt"));
    }
    let manifest = RunManifest {
        config_hash: cfg_hash,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed_list: vec![cfg.seed],
        started_unix: run_state.started_unix,
        finished_unix: finished,
        artifacts,
    };
    std::fs::write(
        cfg.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    manifest.verify(&cfg.out_dir)?;

    Ok(report)
}

//! Run outputs: metric report (JSON + CSV), forgetting curves, and the run
//! manifest with a recomputable content hash.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::metrics::{MetricsReport, PqScore};
use crate::synth_data::ClassId;

use super::train::EpochLog;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: String,
    pub order_name: String,
    pub schedule_steps: Vec<Vec<ClassId>>,
    pub seed: u64,
    pub steps: Vec<MetricsReport>,
    pub bleu_before: f64,
    pub bleu_after: f64,
    /// Out-of-step sample fetches observed across all steps (must be zero).
    pub foreign_reads: u64,
    pub wall_secs: f64,
    /// Methodology notes embedded in the report header.
    pub notes: BTreeMap<String, String>,
    pub train_logs: Vec<Vec<EpochLog>>,
}

impl ExperimentReport {
    pub fn final_step(&self) -> &MetricsReport {
        self.steps.last().expect("report has at least one step")
    }
}

fn fmt_group(g: &Option<PqScore>) -> (String, String, String) {
    match g {
        Some(s) => (format!("{:.6}", s.pq), format!("{:.6}", s.sq), format!("{:.6}", s.rq)),
        None => ("".into(), "".into(), "".into()),
    }
}

/// One row per step, Table-1 shaped.
pub fn report_csv(report: &ExperimentReport) -> String {
    let mut out = String::from(
        "method,order,seed,step,classes_learned,pq_old,sq_old,rq_old,pq_new,sq_new,rq_new,pq_all,sq_all,rq_all,bleu,bleu_before,bleu_after\n",
    );
    for step in &report.steps {
        let (po, so, ro) = fmt_group(&step.old_group);
        let (pn, sn, rn) = fmt_group(&step.new_group);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            report.method,
            report.order_name,
            report.seed,
            step.step,
            step.classes_learned,
            po,
            so,
            ro,
            pn,
            sn,
            rn,
            step.all_group.pq,
            step.all_group.sq,
            step.all_group.rq,
            step.bleu,
            report.bleu_before,
            report.bleu_after,
        ));
    }
    out
}

/// PQ/SQ/RQ against the number of learned classes, per class group.
pub fn curves_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("step,classes_learned,group,pq,sq,rq\n");
    for step in &report.steps {
        let mut push = |group: &str, s: &PqScore| {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6}\n",
                step.step, step.classes_learned, group, s.pq, s.sq, s.rq
            ));
        };
        if let Some(s) = &step.old_group {
            push("old", s);
        }
        if let Some(s) = &step.new_group {
            push("new", s);
        }
        push("all", &step.all_group.clone());
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hash over the stored config snapshot plus the crate version.
    pub config_hash: String,
    pub code_version: String,
    pub seed_list: Vec<u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<String>,
}

pub fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn config_hash(config_json: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(config_json);
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    format!("{:x}", h.finalize())
}

impl RunManifest {
    /// Recomputes the hash from the stored config copy and checks every
    /// artifact path exists.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let config = std::fs::read(dir.join("config.json"))?;
        let hash = config_hash(&config);
        if hash != self.config_hash {
            return Err(CoreError::Resume(format!(
                "manifest hash {} != recomputed {hash}",
                self.config_hash
            )));
        }
        for a in &self.artifacts {
            if !dir.join(a).exists() {
                return Err(CoreError::Contract(format!("missing artifact {a}")));
            }
        }
        Ok(())
    }
}

/// Writes report.json, report.csv and curves.csv; returns their names.
pub fn write_report_files(dir: &Path, report: &ExperimentReport) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    std::fs::write(dir.join("report.csv"), report_csv(report))?;
    std::fs::write(dir.join("curves.csv"), curves_csv(report))?;
    Ok(vec!["report.json".into(), "report.csv".into(), "curves.csv".into()])
}

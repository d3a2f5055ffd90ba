//! End-to-end experiment driver and its artifacts: run the two-fold
//! protocol from one `ExperimentConfig` and write `final_report.json`
//! (full precision, deterministic bytes), a readable table, and a CSV.

use crate::annotation::{default_folds, validate_dataset};
use crate::config::ExperimentConfig;
use crate::data::FrameCache;
use crate::synthetic::render_dataset;
use crate::training::cv::{cross_validate, CvSettings, TaskCvResult};
use crate::{Result, TapirError};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalReport {
    pub seed: u64,
    /// Checksum of the annotation file the runs consumed.
    pub dataset_checksum: String,
    pub folds: [Vec<String>; 2],
    pub tasks: Vec<TaskCvResult>,
}

impl FinalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| TapirError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    /// Aligned summary table, one row per task: per-fold mAP and mean ± std.
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<12} {:>8} {:>8}   mean ± std", "task", "fold0", "fold1")
            .expect("string write");
        for t in &self.tasks {
            let f0 = t.fold_reports.first().map(|r| r.mean_ap);
            let f1 = t.fold_reports.get(1).map(|r| r.mean_ap);
            let cell = |v: Option<f64>| match v {
                Some(v) => format!("{v:.4}"),
                None => "-".to_string(),
            };
            writeln!(
                out,
                "{:<12} {:>8} {:>8}   {:.4} ± {:.4}",
                t.task.name(),
                cell(f0),
                cell(f1),
                t.mean,
                t.std
            )
            .expect("string write");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,fold,mean_ap\n");
        for t in &self.tasks {
            for r in &t.fold_reports {
                writeln!(
                    out,
                    "{},{},{:.6}",
                    t.task.name(),
                    r.fold.map(|f| f.to_string()).unwrap_or_default(),
                    r.mean_ap
                )
                .expect("string write");
            }
            writeln!(out, "{},mean,{:.6}", t.task.name(), t.mean).expect("string write");
            writeln!(out, "{},std,{:.6}", t.task.name(), t.std).expect("string write");
        }
        out
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| TapirError::io(path.display().to_string(), e))
}

/// Render (or reuse) the dataset, refuse invalid annotations, run two-fold
/// cross-validation over the configured tasks, and write every artifact
/// under `output_root`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<FinalReport> {
    config.validate()?;
    let ds = render_dataset(&config.generator, &config.dataset_root)?;
    let validation = validate_dataset(&ds.index);
    if !validation.is_valid() {
        return Err(TapirError::Validation(format!(
            "dataset fails schema validation ({} violations, first: {})",
            validation.violations.len(),
            validation.violations[0].rule
        )));
    }
    let folds = default_folds(&ds.index)?;
    let mut cache = FrameCache::new(&config.dataset_root);

    std::fs::create_dir_all(&config.output_root)
        .map_err(|e| TapirError::io(config.output_root.display().to_string(), e))?;
    let runs_root = config.output_root.join("runs");
    let settings = CvSettings {
        encoder: &config.encoder,
        detector: &config.detector,
        frame_optim: &config.frame_optim,
        detector_optim: &config.detector_optim,
        action_optim: &config.action_optim,
        clip_stride: config.clip_stride,
        seed: config.seed,
        action_confidence: config.action_confidence,
        action_match_iou: config.action_match_iou,
        tasks: &config.tasks,
        out_root: Some(&runs_root),
    };
    let outcome = cross_validate(&settings, &ds.index, &mut cache, &folds)?;

    let report = FinalReport {
        seed: config.seed,
        dataset_checksum: ds.manifest.annotations_checksum.clone(),
        folds: folds.folds.clone(),
        tasks: outcome.tasks,
    };
    config.save(&config.output_root.join("config.json"))?;
    write_text(&config.output_root.join("final_report.json"), &report.to_json())?;
    write_text(&config.output_root.join("report.txt"), &report.to_text_table())?;
    write_text(&config.output_root.join("report.csv"), &report.to_csv())?;
    Ok(report)
}

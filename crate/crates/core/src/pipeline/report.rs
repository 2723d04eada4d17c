use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detections_io::GtFlag;
use crate::evaluation::{evaluate_at, write_histogram_csv, write_roc_csv, EvalReport, ScoreSet};
use crate::scoring::ScoreRecord;

use super::config::Fingerprint;
use super::run::{AblationRow, MetricPair, RunResult, StageTimes};
use super::sweep::SweepOutcome;
use super::{plots, PipelineError};

pub const REPORT_FILE: &str = "report.json";
pub const ROC_FILE: &str = "roc.csv";
pub const HIST_FILE: &str = "hist.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub fingerprint: Option<String>,
    pub config: Option<Fingerprint>,
    pub scores_file: String,
    pub errors_file: Option<String>,
    pub roc_file: String,
    pub hist_file: String,
    pub n_images: Option<usize>,
    pub n_detections: usize,
    pub n_filtered: usize,
    pub n_scored: usize,
    pub n_errors: usize,
    pub eval: Option<EvalReport>,
    pub note: Option<String>,
    pub ablations: Vec<AblationRow>,
    pub mcm: Option<MetricPair>,
    pub inpaint_calls: Option<usize>,
    pub prompt_fallbacks: Option<usize>,
    pub stage_times: Option<StageTimes>,
    pub mean_wall_time_per_image: Option<f64>,
    pub mean_inpaint_time_per_image: Option<f64>,
}

/// Name `path` relative to `dir` when it lives there.
fn reference(path: &Path, dir: &Path) -> String {
    match path.strip_prefix(dir) {
        Ok(rel) => rel.display().to_string(),
        Err(_) => path.display().to_string(),
    }
}

impl ReportDocument {
    fn from_result(r: &RunResult, dir: &Path) -> Self {
        Self {
            fingerprint: Some(r.fingerprint.clone()),
            config: Some(r.fingerprint_fields.clone()),
            scores_file: reference(&r.scores_path, dir),
            errors_file: r.errors_path.as_deref().map(|p| reference(p, dir)),
            roc_file: ROC_FILE.into(),
            hist_file: HIST_FILE.into(),
            n_images: Some(r.n_images),
            n_detections: r.n_detections,
            n_filtered: r.n_filtered,
            n_scored: r.scored.len(),
            n_errors: r.errors.len(),
            eval: r.report.clone(),
            note: r.note.clone(),
            ablations: r.ablations.clone(),
            mcm: r.mcm,
            inpaint_calls: Some(r.inpaint_calls),
            prompt_fallbacks: Some(r.prompt_fallbacks),
            stage_times: Some(r.stage_times),
            mean_wall_time_per_image: Some(r.mean_wall_time_per_image),
            mean_inpaint_time_per_image: Some(r.mean_inpaint_time_per_image),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io(format!("{}: {e}", path.display()))
}

fn write_document(
    doc: &ReportDocument,
    eval: Option<&EvalReport>,
    dir: &Path,
    with_plots: bool,
) -> Result<Vec<PathBuf>, PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let report_path = dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(doc).map_err(|e| PipelineError::Io(e.to_string()))?;
    std::fs::write(&report_path, json + "\n").map_err(io_err(&report_path))?;

    let roc_path = dir.join(ROC_FILE);
    let hist_path = dir.join(HIST_FILE);
    let (roc, hist) = eval.map_or((&[][..], &[][..]), |e| (&e.roc[..], &e.histogram[..]));
    write_roc_csv(roc, &roc_path)?;
    write_histogram_csv(hist, &hist_path)?;
    let mut files = vec![report_path, roc_path, hist_path];
    if with_plots {
        if let Some(e) = eval {
            files.extend(plots::write_plots(e, dir)?);
        }
    }
    Ok(files)
}

/// Write `report.json`, `roc.csv` and `hist.csv` for one run into `dir`,
/// plus `roc.png` and `hist.png` when `with_plots` is set.
pub fn write_report(
    result: &RunResult,
    dir: &Path,
    with_plots: bool,
) -> Result<Vec<PathBuf>, PipelineError> {
    let doc = ReportDocument::from_result(result, dir);
    write_document(&doc, result.report.as_ref(), dir, with_plots)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct SweepRow {
    pub axis: String,
    pub value: String,
    pub auroc: Option<f64>,
    pub fpr_at_95: Option<f64>,
    pub mean_wall_time_per_image: Option<f64>,
    pub mean_inpaint_time_per_image: Option<f64>,
    pub n_scored: Option<usize>,
    pub n_errors: Option<usize>,
    pub status: String,
}

impl SweepRow {
    pub(crate) fn from_result(axis: &str, value: &str, r: &RunResult) -> Self {
        Self {
            axis: axis.into(),
            value: value.into(),
            auroc: r.report.as_ref().map(|e| e.auroc),
            fpr_at_95: r.report.as_ref().map(|e| e.fpr_at_95),
            mean_wall_time_per_image: Some(r.mean_wall_time_per_image),
            mean_inpaint_time_per_image: Some(r.mean_inpaint_time_per_image),
            n_scored: Some(r.scored.len()),
            n_errors: Some(r.errors.len()),
            status: match (&r.note, r.is_partial()) {
                (Some(n), _) => n.clone(),
                (None, true) => "partial".into(),
                (None, false) => "ok".into(),
            },
        }
    }

    pub(crate) fn failed(axis: &str, value: &str, error: &str) -> Self {
        Self {
            axis: axis.into(),
            value: value.into(),
            auroc: None,
            fpr_at_95: None,
            mean_wall_time_per_image: None,
            mean_inpaint_time_per_image: None,
            n_scored: None,
            n_errors: None,
            status: format!("failed: {error}"),
        }
    }
}

pub(crate) fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Write report files for a set of runs.
///
/// One result: its report files go straight into `out_dir`. Several: each
/// result's files go into that result's own output directory and
/// `out_dir/sweep.csv` gets one comparison row per result.
pub fn report(
    results: &[RunResult],
    out_dir: &Path,
    with_plots: bool,
) -> Result<Vec<PathBuf>, PipelineError> {
    match results {
        [] => Err(PipelineError::Config(
            "report needs at least one run result".into(),
        )),
        [only] => write_report(only, out_dir, with_plots),
        many => {
            let mut files = Vec::new();
            let mut rows = Vec::new();
            for (i, r) in many.iter().enumerate() {
                files.extend(write_report(r, &r.out_dir, with_plots)?);
                rows.push(SweepRow::from_result("run", &i.to_string(), r));
            }
            std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
            let sweep = out_dir.join(SWEEP_FILE);
            write_sweep_csv(&rows, &sweep)?;
            files.push(sweep);
            Ok(files)
        }
    }
}

impl SweepOutcome {
    /// Per-run reports in each run directory plus `sweep.csv` in `out_dir`,
    /// failed runs included as rows.
    pub fn write_report(
        &self,
        out_dir: &Path,
        with_plots: bool,
    ) -> Result<Vec<PathBuf>, PipelineError> {
        let mut files = Vec::new();
        let mut rows = Vec::new();
        for p in &self.points {
            match &p.result {
                Ok(r) => {
                    files.extend(write_report(r, &r.out_dir, with_plots)?);
                    rows.push(SweepRow::from_result(self.axis.as_str(), &p.value, r));
                }
                Err(e) => rows.push(SweepRow::failed(self.axis.as_str(), &p.value, e)),
            }
        }
        std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        let sweep = out_dir.join(SWEEP_FILE);
        write_sweep_csv(&rows, &sweep)?;
        files.push(sweep);
        Ok(files)
    }
}

pub fn read_score_records(path: &Path) -> Result<Vec<ScoreRecord>, PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreRecord = serde_json::from_str(&line)
            .map_err(|e| PipelineError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_score_records(records: &[ScoreRecord], path: &Path) -> Result<(), PipelineError> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| PipelineError::Io(e.to_string()))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// Evaluate stored score records. Returns the report, or a "no data" note
/// when one side is empty.
pub fn evaluate_records(records: &[ScoreRecord], tpr_target: f64) -> Result<EvalReport, String> {
    let pick = |flag| {
        records
            .iter()
            .filter(|r| r.gt == flag)
            .map(|r| r.score)
            .collect::<Vec<_>>()
    };
    let set = ScoreSet::new(pick(GtFlag::Id), pick(GtFlag::Ood));
    if set.id_scores.is_empty() || set.ood_scores.is_empty() {
        return Err(format!(
            "no data: evaluation needs both ID and OOD detections (got {} ID, {} OOD)",
            set.id_scores.len(),
            set.ood_scores.len()
        ));
    }
    evaluate_at(&set, tpr_target).map_err(|e| e.to_string())
}

/// Report files for a re-evaluated score file.
pub(crate) fn report_records(
    records: &[ScoreRecord],
    scores_path: &Path,
    tpr_target: f64,
    dir: &Path,
    with_plots: bool,
) -> Result<(ReportDocument, Vec<PathBuf>), PipelineError> {
    let (eval, note) = match evaluate_records(records, tpr_target) {
        Ok(e) => (Some(e), None),
        Err(n) => (None, Some(n)),
    };
    let doc = ReportDocument {
        fingerprint: None,
        config: None,
        scores_file: scores_path.display().to_string(),
        errors_file: None,
        roc_file: ROC_FILE.into(),
        hist_file: HIST_FILE.into(),
        n_images: None,
        n_detections: records.len(),
        n_filtered: 0,
        n_scored: records.len(),
        n_errors: 0,
        eval: eval.clone(),
        note,
        ablations: Vec::new(),
        mcm: None,
        inpaint_calls: None,
        prompt_fallbacks: None,
        stage_times: None,
        mean_wall_time_per_image: None,
        mean_inpaint_time_per_image: None,
    };
    let files = write_document(&doc, eval.as_ref(), dir, with_plots)?;
    Ok((doc, files))
}

/// Re-evaluate a score JSONL file and write report files into `dir`.
pub fn report_from_scores(
    scores_path: &Path,
    tpr_target: f64,
    dir: &Path,
    with_plots: bool,
) -> Result<(ReportDocument, Vec<PathBuf>), PipelineError> {
    let records = read_score_records(scores_path)?;
    report_records(&records, scores_path, tpr_target, dir, with_plots)
}

//! Verdict scoring and the experiment sweep driver.
//!
//! Anomalous is the positive class. The four metrics derive from a
//! confusion-count accumulator; zero-denominator cases are defined as 0,
//! and reports print metrics rounded half-up to three decimals.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drain::{ParsedRecord, TemplateCatalog};
use crate::fsutil::write_atomic;
use crate::ingest::{Label, LogRecord};
use crate::llm::{digest, Backend, LlmError};
use crate::prompts::{
    build_prompt, InjectionConfig, InjectionMode, InjectionType, PromptAudit, PromptId,
    PromptTemplate, REQUIRED_KEYS,
};
use crate::responses::{parse_response, reformat_flow, ParseOutcome, ParsePath, ResponseError};
use crate::sequencer::{make_windows_parsed, render_sequence, SequenceError, SequenceView};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("cassette is missing {count} digests for window size {window_size}: {sample:?}")]
    MissingDigests {
        window_size: usize,
        count: usize,
        sample: Vec<String>,
    },
    #[error("cannot write report to an empty row set")]
    EmptyReport,
    #[error("report file {path}: {message}")]
    ReportFile { path: String, message: String },
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Prompt(#[from] crate::prompts::PromptError),
    #[error(transparent)]
    Backend(#[from] LlmError),
}

/// TP/FP/TN/FN tallies with anomalous as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positives: u64,
    pub false_positives: u64,
    pub true_negatives: u64,
    pub false_negatives: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }

    /// Tally one (predicted, actual) pair into exactly one cell.
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.true_positives += 1,
            (true, false) => self.false_positives += 1,
            (false, true) => self.false_negatives += 1,
            (false, false) => self.true_negatives += 1,
        }
    }
}

/// Pure form of [`ConfusionCounts::record`].
pub fn accumulate(mut counts: ConfusionCounts, predicted: bool, actual: bool) -> ConfusionCounts {
    counts.record(predicted, actual);
    counts
}

/// The four detection metrics, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
}

fn ratio(numerator: u64, denominator: u64) -> f64 {
    if denominator == 0 {
        0.0
    } else {
        numerator as f64 / denominator as f64
    }
}

/// precision = TP/(TP+FP), recall = TP/(TP+FN), specificity = TN/(TN+FP),
/// f1 = 2PR/(P+R); every zero-denominator case yields 0.
pub fn compute_metrics(counts: &ConfusionCounts) -> Metrics {
    let precision = ratio(
        counts.true_positives,
        counts.true_positives + counts.false_positives,
    );
    let recall = ratio(
        counts.true_positives,
        counts.true_positives + counts.false_negatives,
    );
    let specificity = ratio(
        counts.true_negatives,
        counts.true_negatives + counts.false_positives,
    );
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics {
        f1,
        precision,
        recall,
        specificity,
    }
}

/// Round half-up at three decimals, the precision reports print with.
pub fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// "0.740"-style fixed three-decimal rendering.
pub fn format_metric(x: f64) -> String {
    format!("{:.3}", round3(x))
}

/// What a terminally unparsable reply counts as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnparsablePolicy {
    /// Treat the window as predicted-anomalous (the conservative default).
    Anomalous,
    Normal,
    Excluded,
}

impl FromStr for UnparsablePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "anomalous" => Ok(UnparsablePolicy::Anomalous),
            "normal" => Ok(UnparsablePolicy::Normal),
            "excluded" => Ok(UnparsablePolicy::Excluded),
            other => Err(format!("unknown unparsable policy {other:?}")),
        }
    }
}

/// One experiment cell: a dataset, one prompt/mode/view choice, and the
/// window sizes to sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub window_sizes: Vec<usize>,
    pub prompt_id: PromptId,
    pub mode: InjectionMode,
    pub view: SequenceView,
    pub injection_type: InjectionType,
    pub seed: u64,
    pub exclude_partial_windows: bool,
    pub unparsable_policy: UnparsablePolicy,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.window_sizes.is_empty() {
            return Err(EvalError::InvalidConfig("window_sizes is empty".into()));
        }
        if self.window_sizes.iter().any(|&s| s == 0) {
            return Err(EvalError::InvalidConfig(
                "window sizes must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One row of results: the config cell, counts, metrics, and tallies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub window_size: usize,
    pub prompt_id: PromptId,
    pub mode: InjectionMode,
    pub view: SequenceView,
    pub injection_type: InjectionType,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    pub windows_evaluated: u64,
    pub unparsable_count: u64,
    pub excluded_count: u64,
}

/// Per-window verdict record for the dump, linked to its prompt digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub window_index: usize,
    pub window_size: usize,
    pub digest: String,
    pub label: Label,
    pub is_anomaly: Option<bool>,
    pub parse_path: Option<ParsePath>,
    pub reports: String,
    pub preventive_measures: String,
    pub raw_text: String,
}

/// Everything one experiment produced.
#[derive(Debug, Default)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub verdicts: Vec<VerdictRecord>,
    pub audits: Vec<PromptAudit>,
}

/// Run one experiment cell over the sampled subset: window, render, prompt,
/// complete (with the reformat fallback), tally. Rows come out in window
/// size order; every verdict links back to its prompt digest.
pub fn run_experiment(
    config: &ExperimentConfig,
    subset: &[LogRecord],
    parsed: &[ParsedRecord],
    catalog: &TemplateCatalog,
    template: &PromptTemplate,
    injection: &InjectionConfig,
    backend: &Backend,
) -> Result<ExperimentOutput, EvalError> {
    config.validate()?;
    let mut output = ExperimentOutput::default();
    for &window_size in &config.window_sizes {
        let windows = make_windows_parsed(subset, parsed, window_size)?;
        let mut counts = ConfusionCounts::default();
        let mut unparsable_count = 0u64;
        let mut excluded_count = 0u64;
        let mut windows_evaluated = 0u64;
        let mut missing: Vec<String> = Vec::new();
        for window in &windows {
            if config.exclude_partial_windows && window.is_partial {
                continue;
            }
            windows_evaluated += 1;
            let sequence = render_sequence(window, config.view, catalog)?;
            let mut request = build_prompt(template, injection, &sequence)?;
            request.model_id = backend.model_id().to_string();
            let request_digest = digest(&request);
            output.audits.push(PromptAudit {
                digest: request_digest.clone(),
                window_index: window.index,
                prompt_id: config.prompt_id,
                mode: config.mode,
                view: config.view,
                byte_len: request.text.len(),
            });
            let response = match backend.complete(&request) {
                Ok(response) => response,
                Err(LlmError::CassetteMiss(d)) => {
                    missing.push(d);
                    windows_evaluated -= 1;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let mut record = VerdictRecord {
                window_index: window.index,
                window_size,
                digest: request_digest,
                label: window.label,
                is_anomaly: None,
                parse_path: None,
                reports: String::new(),
                preventive_measures: String::new(),
                raw_text: response.text.clone(),
            };
            let verdict = match parse_response(&response.text) {
                ParseOutcome::Parsed(verdict) => Some(verdict),
                ParseOutcome::NeedsReformat(needs) => {
                    match reformat_flow(backend, &needs.raw_text, &REQUIRED_KEYS) {
                        Ok(verdict) => Some(verdict),
                        Err(ResponseError::Unparsable { .. })
                        | Err(ResponseError::EmptyReformatInput) => None,
                        Err(ResponseError::Backend(LlmError::CassetteMiss(d))) => {
                            missing.push(d);
                            windows_evaluated -= 1;
                            continue;
                        }
                        Err(ResponseError::Backend(e)) => return Err(e.into()),
                    }
                }
            };
            let predicted = match verdict {
                Some(verdict) => {
                    record.is_anomaly = Some(verdict.is_anomaly);
                    record.parse_path = Some(verdict.parse_path);
                    record.reports = verdict.reports;
                    record.preventive_measures = verdict.preventive_measures;
                    Some(verdict.is_anomaly)
                }
                None => {
                    unparsable_count += 1;
                    match config.unparsable_policy {
                        UnparsablePolicy::Anomalous => Some(true),
                        UnparsablePolicy::Normal => Some(false),
                        UnparsablePolicy::Excluded => None,
                    }
                }
            };
            match predicted {
                Some(predicted) => counts.record(predicted, window.label.is_anomalous()),
                None => excluded_count += 1,
            }
            output.verdicts.push(record);
        }
        if !missing.is_empty() {
            let count = missing.len();
            missing.truncate(10);
            return Err(EvalError::MissingDigests {
                window_size,
                count,
                sample: missing,
            });
        }
        output.rows.push(ResultRow {
            dataset: config.dataset.clone(),
            window_size,
            prompt_id: config.prompt_id,
            mode: config.mode,
            view: config.view,
            injection_type: config.injection_type,
            counts,
            metrics: compute_metrics(&counts),
            windows_evaluated,
            unparsable_count,
            excluded_count,
        });
    }
    Ok(output)
}

/// Report serialization formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Tab-separated table with three-decimal metrics, for humans.
    DelimitedTable,
    /// JSON lines carrying every field at full precision, for machines.
    StructuredRecords,
}

const TABLE_HEADER: &str = "dataset\twindow_size\tprompt\tmode\tview\tinjection\ttp\tfp\ttn\tfn\tprecision\trecall\tf1\tspecificity\twindows_evaluated\tunparsable\texcluded\n";

/// Write rows to `path` in the chosen format (atomically).
pub fn write_report(rows: &[ResultRow], path: &Path, format: ReportFormat) -> Result<(), EvalError> {
    if rows.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let mut out = String::new();
    match format {
        ReportFormat::DelimitedTable => {
            out.push_str(TABLE_HEADER);
            for row in rows {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                    row.dataset,
                    row.window_size,
                    row.prompt_id,
                    row.mode,
                    row.view,
                    row.injection_type,
                    row.counts.true_positives,
                    row.counts.false_positives,
                    row.counts.true_negatives,
                    row.counts.false_negatives,
                    format_metric(row.metrics.precision),
                    format_metric(row.metrics.recall),
                    format_metric(row.metrics.f1),
                    format_metric(row.metrics.specificity),
                    row.windows_evaluated,
                    row.unparsable_count,
                    row.excluded_count,
                ));
            }
        }
        ReportFormat::StructuredRecords => {
            for row in rows {
                out.push_str(&serde_json::to_string(row).expect("rows serialize"));
                out.push('\n');
            }
        }
    }
    write_atomic(path, out.as_bytes()).map_err(|e| EvalError::ReportFile {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Read back a structured-records report.
pub fn read_report_records(path: &Path) -> Result<Vec<ResultRow>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::ReportFile {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            serde_json::from_str(line).map_err(|e| EvalError::ReportFile {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Verdict dump: one JSON record per window.
pub fn write_verdict_dump(verdicts: &[VerdictRecord], path: &Path) -> Result<(), EvalError> {
    let mut out = String::new();
    for v in verdicts {
        out.push_str(&serde_json::to_string(v).expect("verdict rows serialize"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes()).map_err(|e| EvalError::ReportFile {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// One row of the published comparison scores shipped with the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceScore {
    pub dataset: String,
    pub window_size: usize,
    pub method: String,
    pub mode: String,
    pub injection: String,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
}

/// Published per-method scores (prior detectors and the LLM pipeline) used
/// for comparison tables; never recomputed here.
pub fn reference_scores() -> Vec<ReferenceScore> {
    let raw = include_str!("../data/reference_scores.csv");
    raw.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 9, "reference row {line:?}");
            ReferenceScore {
                dataset: fields[0].into(),
                window_size: fields[1].parse().expect("window size"),
                method: fields[2].into(),
                mode: fields[3].into(),
                injection: fields[4].into(),
                f1: fields[5].parse().expect("f1"),
                precision: fields[6].parse().expect("precision"),
                recall: fields[7].parse().expect("recall"),
                specificity: fields[8].parse().expect("specificity"),
            }
        })
        .collect()
}

impl fmt::Display for ResultRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} w{} {} {} {}: F1 {} P {} R {} S {}",
            self.dataset,
            self.window_size,
            self.prompt_id,
            self.mode,
            self.view,
            format_metric(self.metrics.f1),
            format_metric(self.metrics.precision),
            format_metric(self.metrics.recall),
            format_metric(self.metrics.specificity),
        )
    }
}

//! Prompt assembly.
//!
//! Every prompt is four parts joined by newlines: task description, format
//! statement, an optional block of labeled example shots, and the input
//! sequence rendered as a Python-style list literal. Two stock templates
//! ship as versioned files; user files with the same section layout can
//! replace them.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::ingest::Label;
use crate::sequencer::LogSequence;

/// The three keys every verdict must carry, in prompt order.
pub const REQUIRED_KEYS: [&str; 3] = ["is_anomaly", "reports", "preventive_measures"];

/// Default model settings: deterministic sampling, short replies.
pub const DEFAULT_MODEL_ID: &str = "gpt-3.5-turbo";
pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 100;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {id}: format statement must name {key} exactly once (found {found})")]
    BadFormatStatement {
        id: PromptId,
        key: &'static str,
        found: usize,
    },
    #[error("template {id}: missing section [{0}]", .section)]
    MissingSection { id: PromptId, section: &'static str },
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("few-shot injection requires shots; zero-shot forbids them")]
    InvalidInjection,
    #[error("injection type {ty} needs {need} shots of matching labels, got {got}")]
    ShotMismatch {
        ty: InjectionType,
        need: usize,
        got: usize,
    },
}

/// Which of the two stock prompt wordings to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptId {
    #[serde(rename = "p1")]
    P1,
    #[serde(rename = "p2")]
    P2,
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptId::P1 => "p1",
            PromptId::P2 => "p2",
        })
    }
}

impl FromStr for PromptId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "p1" | "P1" => Ok(PromptId::P1),
            "p2" | "P2" => Ok(PromptId::P2),
            other => Err(format!("unknown prompt id {other:?}")),
        }
    }
}

/// Task wording plus the JSON format statement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: PromptId,
    pub task_description: String,
    pub format_statement: String,
}

impl PromptTemplate {
    /// The format statement must name each required key exactly once.
    pub fn validate(&self) -> Result<(), PromptError> {
        for key in REQUIRED_KEYS {
            let found = self.format_statement.matches(key).count();
            if found != 1 {
                return Err(PromptError::BadFormatStatement {
                    id: self.id,
                    key,
                    found,
                });
            }
        }
        Ok(())
    }

    /// Load a template from a sectioned text file (`[task_description]` /
    /// `[format_statement]` headers, body lines between them).
    pub fn from_file(id: PromptId, path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_sections(id, &text)
    }

    fn from_sections(id: PromptId, text: &str) -> Result<Self, PromptError> {
        let mut task = None;
        let mut format = None;
        let mut current: Option<(&'static str, Vec<&str>)> = None;
        let mut flush = |section: Option<(&'static str, Vec<&str>)>,
                         task: &mut Option<String>,
                         format: &mut Option<String>| {
            if let Some((name, lines)) = section {
                let body = lines.join("\n").trim().to_string();
                match name {
                    "task_description" => *task = Some(body),
                    _ => *format = Some(body),
                }
            }
        };
        for line in text.lines() {
            match line.trim() {
                "[task_description]" => {
                    flush(current.take(), &mut task, &mut format);
                    current = Some(("task_description", Vec::new()));
                }
                "[format_statement]" => {
                    flush(current.take(), &mut task, &mut format);
                    current = Some(("format_statement", Vec::new()));
                }
                _ => {
                    if let Some((_, lines)) = current.as_mut() {
                        lines.push(line);
                    }
                }
            }
        }
        flush(current.take(), &mut task, &mut format);
        let template = PromptTemplate {
            id,
            task_description: task.ok_or(PromptError::MissingSection {
                id,
                section: "task_description",
            })?,
            format_statement: format.ok_or(PromptError::MissingSection {
                id,
                section: "format_statement",
            })?,
        };
        template.validate()?;
        Ok(template)
    }
}

/// The two stock templates, frozen as versioned files: an indirect wording
/// that asks for the thought process, and a direct wording that asks for an
/// anomaly report and preventive measures.
pub fn canonical_templates() -> (PromptTemplate, PromptTemplate) {
    let p1 = PromptTemplate::from_sections(PromptId::P1, include_str!("../data/templates/p1.txt"))
        .expect("stock p1 template is valid");
    let p2 = PromptTemplate::from_sections(PromptId::P2, include_str!("../data/templates/p2.txt"))
        .expect("stock p2 template is valid");
    (p1, p2)
}

/// Fetch one stock template by id.
pub fn canonical_template(id: PromptId) -> PromptTemplate {
    let (p1, p2) = canonical_templates();
    match id {
        PromptId::P1 => p1,
        PromptId::P2 => p2,
    }
}

/// Zero-shot drops the example block; few-shot injects labeled shots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    ZeroShot,
    FewShot,
}

impl fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InjectionMode::ZeroShot => "zero_shot",
            InjectionMode::FewShot => "few_shot",
        })
    }
}

impl FromStr for InjectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" | "zero_shot" => Ok(InjectionMode::ZeroShot),
            "few" | "few_shot" => Ok(InjectionMode::FewShot),
            other => Err(format!("unknown injection mode {other:?}")),
        }
    }
}

/// Class composition of the injected shots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionType {
    Normal,
    Abnormal,
    Mixed,
}

impl fmt::Display for InjectionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InjectionType::Normal => "normal",
            InjectionType::Abnormal => "abnormal",
            InjectionType::Mixed => "mixed",
        })
    }
}

impl FromStr for InjectionType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(InjectionType::Normal),
            "abnormal" => Ok(InjectionType::Abnormal),
            "mixed" => Ok(InjectionType::Mixed),
            other => Err(format!("unknown injection type {other:?}")),
        }
    }
}

/// One labeled example: a single historical log line or a whole sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shot {
    Line { text: String, label: Label },
    Sequence { items: Vec<String>, label: Label },
}

impl Shot {
    pub fn label(&self) -> Label {
        match self {
            Shot::Line { label, .. } | Shot::Sequence { label, .. } => *label,
        }
    }

    fn render_entry(&self) -> String {
        match self {
            Shot::Line { text, .. } => quote_item(text),
            Shot::Sequence { items, .. } => render_list_literal(items),
        }
    }
}

/// Knowledge-injection settings for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub mode: InjectionMode,
    pub injection_type: InjectionType,
    pub shots: Vec<Shot>,
    pub shot_count: usize,
}

impl InjectionConfig {
    pub fn zero_shot() -> Self {
        InjectionConfig {
            mode: InjectionMode::ZeroShot,
            injection_type: InjectionType::Normal,
            shots: Vec::new(),
            shot_count: 5,
        }
    }

    pub fn few_shot(injection_type: InjectionType, shots: Vec<Shot>) -> Self {
        let shot_count = match injection_type {
            InjectionType::Mixed => shots.len() / 2,
            _ => shots.len(),
        };
        InjectionConfig {
            mode: InjectionMode::FewShot,
            injection_type,
            shots,
            shot_count,
        }
    }

    /// Zero-shot forbids shots; few-shot requires `shot_count` of them
    /// (`shot_count` of each class for mixed injection), with labels
    /// matching the injection type.
    pub fn validate(&self) -> Result<(), PromptError> {
        match self.mode {
            InjectionMode::ZeroShot => {
                if !self.shots.is_empty() {
                    return Err(PromptError::InvalidInjection);
                }
            }
            InjectionMode::FewShot => {
                if self.shots.is_empty() {
                    return Err(PromptError::InvalidInjection);
                }
                let (need, ok) = match self.injection_type {
                    InjectionType::Normal => (
                        self.shot_count,
                        self.shots.iter().all(|s| !s.label().is_anomalous()),
                    ),
                    InjectionType::Abnormal => (
                        self.shot_count,
                        self.shots.iter().all(|s| s.label().is_anomalous()),
                    ),
                    InjectionType::Mixed => {
                        let anomalous =
                            self.shots.iter().filter(|s| s.label().is_anomalous()).count();
                        (
                            self.shot_count * 2,
                            anomalous == self.shot_count
                                && self.shots.len() - anomalous == self.shot_count,
                        )
                    }
                };
                if self.shots.len() != need || !ok {
                    return Err(PromptError::ShotMismatch {
                        ty: self.injection_type,
                        need,
                        got: self.shots.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// A fully assembled request: final prompt text plus model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub text: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub top_choices: u32,
}

impl PromptRequest {
    pub fn new(text: impl Into<String>, model_id: impl Into<String>) -> Self {
        PromptRequest {
            text: text.into(),
            model_id: model_id.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            top_choices: 1,
        }
    }
}

fn escape_item(item: &str) -> String {
    item.replace('\\', "\\\\").replace('"', "\\\"")
}

fn quote_item(item: &str) -> String {
    format!("\"{}\"", escape_item(item))
}

/// Inverse of the list-item escaping; used to check round-trips.
pub fn unescape_item(item: &str) -> String {
    let mut out = String::with_capacity(item.len());
    let mut chars = item.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(next) = chars.next() {
                out.push(next);
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Render items as a Python-style list literal: bracketed, comma-plus-space
/// separated, double-quoted, with quotes and backslashes escaped.
pub fn render_list_literal<S: AsRef<str>>(items: &[S]) -> String {
    let quoted: Vec<String> = items.iter().map(|s| quote_item(s.as_ref())).collect();
    format!("[{}]", quoted.join(", "))
}

/// The few-shot example block: one `entry → label` line per shot, joined by
/// newlines. `None` in zero-shot mode.
pub fn injection_block(injection: &InjectionConfig) -> Option<String> {
    if injection.mode == InjectionMode::ZeroShot {
        return None;
    }
    let lines: Vec<String> = injection
        .shots
        .iter()
        .map(|shot| format!("{} → {}", shot.render_entry(), shot.label()))
        .collect();
    Some(lines.join("\n"))
}

/// Assemble the final prompt for one sequence. Parts are joined with single
/// newlines; assembly is byte-deterministic.
pub fn build_prompt(
    template: &PromptTemplate,
    injection: &InjectionConfig,
    sequence: &LogSequence,
) -> Result<PromptRequest, PromptError> {
    template.validate()?;
    injection.validate()?;
    let mut parts = vec![
        template.task_description.clone(),
        template.format_statement.clone(),
    ];
    if let Some(block) = injection_block(injection) {
        parts.push(block);
    }
    parts.push(format!(
        "Log sequence: {}",
        render_list_literal(&sequence.items)
    ));
    Ok(PromptRequest::new(parts.join("\n"), DEFAULT_MODEL_ID))
}

/// One audit record per built prompt, linking it to its request digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptAudit {
    pub digest: String,
    pub window_index: usize,
    pub prompt_id: PromptId,
    pub mode: InjectionMode,
    pub view: crate::sequencer::SequenceView,
    pub byte_len: usize,
}

/// Prompt audit log: one JSON record per built prompt.
pub fn write_audit_log(audits: &[PromptAudit], path: &Path) -> std::io::Result<()> {
    let mut out = String::new();
    for audit in audits {
        out.push_str(&serde_json::to_string(audit).expect("audit rows serialize"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequencer::SequenceView;

    fn fixture_sequence() -> LogSequence {
        LogSequence {
            window_index: 0,
            view: SequenceView::Content,
            items: vec![
                "instruction cache parity error corrected".into(),
                "data TLB error interrupt".into(),
            ],
        }
    }

    fn normal_shots(n: usize) -> Vec<Shot> {
        (0..n)
            .map(|i| Shot::Line {
                text: format!("shot message {i}"),
                label: Label::Normal,
            })
            .collect()
    }

    #[test]
    fn list_literal_basics() {
        assert_eq!(render_list_literal(&["a", "b"]), r#"["a", "b"]"#);
        assert_eq!(render_list_literal::<&str>(&[]), "[]");
    }

    #[test]
    fn list_literal_escapes_round_trip() {
        let original = r#"mount "fs\1" failed"#;
        let rendered = render_list_literal(&[original]);
        assert_eq!(rendered, r#"["mount \"fs\\1\" failed"]"#);
        let inner = &rendered[2..rendered.len() - 2];
        assert_eq!(unescape_item(inner), original);
    }

    #[test]
    fn canonical_templates_hold_their_phrases() {
        let (p1, p2) = canonical_templates();
        assert!(p1.task_description.contains("Output your thought process"));
        assert!(!p2.task_description.contains("Output your thought process"));
        assert_ne!(p1.task_description, p2.task_description);
        assert_eq!(p1.format_statement, p2.format_statement);
        assert!(p1
            .format_statement
            .contains("is_anomaly, reports, preventive_measures"));
        p1.validate().unwrap();
        p2.validate().unwrap();
    }

    #[test]
    fn zero_and_few_differ_exactly_by_injection_block() {
        let (_, p2) = canonical_templates();
        let zero = build_prompt(&p2, &InjectionConfig::zero_shot(), &fixture_sequence()).unwrap();
        let injection = InjectionConfig::few_shot(InjectionType::Normal, normal_shots(5));
        let few = build_prompt(&p2, &injection, &fixture_sequence()).unwrap();
        let block = injection_block(&injection).unwrap();
        let insert_at = zero
            .text
            .find("\nLog sequence: ")
            .expect("sequence part present");
        let mut expected = zero.text.clone();
        expected.insert_str(insert_at + 1, &format!("{block}\n"));
        assert_eq!(few.text, expected);
        assert!(few.text.len() > zero.text.len());
        assert!(!zero.text.contains('→'));
    }

    #[test]
    fn build_is_deterministic() {
        let (p1, _) = canonical_templates();
        let injection = InjectionConfig::few_shot(InjectionType::Abnormal, vec![Shot::Line {
            text: "data TLB error interrupt".into(),
            label: Label::Anomalous,
        }]);
        let a = build_prompt(&p1, &injection, &fixture_sequence()).unwrap();
        let b = build_prompt(&p1, &injection, &fixture_sequence()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn defaults_follow_the_protocol() {
        let (_, p2) = canonical_templates();
        let req = build_prompt(&p2, &InjectionConfig::zero_shot(), &fixture_sequence()).unwrap();
        assert_eq!(req.temperature, 0.0);
        assert_eq!(req.max_output_tokens, 100);
        assert_eq!(req.top_choices, 1);
        assert_eq!(req.model_id, DEFAULT_MODEL_ID);
    }

    #[test]
    fn few_shot_without_shots_is_invalid() {
        let injection = InjectionConfig {
            mode: InjectionMode::FewShot,
            injection_type: InjectionType::Normal,
            shots: Vec::new(),
            shot_count: 5,
        };
        assert!(matches!(
            injection.validate(),
            Err(PromptError::InvalidInjection)
        ));
    }

    #[test]
    fn zero_shot_with_shots_is_invalid() {
        let injection = InjectionConfig {
            mode: InjectionMode::ZeroShot,
            injection_type: InjectionType::Normal,
            shots: normal_shots(1),
            shot_count: 5,
        };
        assert!(injection.validate().is_err());
    }

    #[test]
    fn mixed_injection_needs_balanced_classes() {
        let mut shots = normal_shots(2);
        shots.push(Shot::Line {
            text: "kernel panic".into(),
            label: Label::Anomalous,
        });
        shots.push(Shot::Line {
            text: "fatal error".into(),
            label: Label::Anomalous,
        });
        let injection = InjectionConfig {
            mode: InjectionMode::FewShot,
            injection_type: InjectionType::Mixed,
            shots,
            shot_count: 2,
        };
        injection.validate().unwrap();
        let unbalanced = InjectionConfig {
            shot_count: 3,
            ..injection
        };
        assert!(unbalanced.validate().is_err());
    }

    #[test]
    fn sequence_shots_render_as_list_literals() {
        let injection = InjectionConfig::few_shot(
            InjectionType::Abnormal,
            vec![Shot::Sequence {
                items: vec!["a".into(), "b".into()],
                label: Label::Anomalous,
            }],
        );
        let block = injection_block(&injection).unwrap();
        assert_eq!(block, r#"["a", "b"] → anomalous"#);
    }

    #[test]
    fn bad_format_statement_is_rejected() {
        let template = PromptTemplate {
            id: PromptId::P1,
            task_description: "Inspect the sequence.".into(),
            format_statement: "Return JSON with keys: is_anomaly, reports".into(),
        };
        assert!(matches!(
            template.validate(),
            Err(PromptError::BadFormatStatement {
                key: "preventive_measures",
                ..
            })
        ));
    }

    #[test]
    fn template_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("custom.txt");
        std::fs::write(
            &path,
            "[task_description]\nCustom task.\n\n[format_statement]\nReturn json keys: is_anomaly, reports, preventive_measures\n",
        )
        .unwrap();
        let template = PromptTemplate::from_file(PromptId::P2, &path).unwrap();
        assert_eq!(template.task_description, "Custom task.");
        assert!(template.format_statement.starts_with("Return json"));
    }
}

//! Tumbling windows over record streams and the three sequence views.
//!
//! Windows are count-based and non-overlapping; a short trailing window is
//! kept and flagged rather than dropped, so every record is evaluated. A
//! window is anomalous as soon as any member record is.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drain::{ParsedRecord, TemplateCatalog};
use crate::fsutil::write_atomic;
use crate::ingest::{Label, LogRecord};

/// Which rendering of a window goes into the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceView {
    /// Full original lines.
    Raw,
    /// Message bodies only (ids and timestamps stripped).
    Content,
    /// Template strings with wildcards dropped.
    Event,
}

impl fmt::Display for SequenceView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SequenceView::Raw => "raw",
            SequenceView::Content => "content",
            SequenceView::Event => "event",
        })
    }
}

impl FromStr for SequenceView {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(SequenceView::Raw),
            "content" => Ok(SequenceView::Content),
            "event" => Ok(SequenceView::Event),
            other => Err(format!("unknown sequence view {other:?}")),
        }
    }
}

/// A fixed-count chunk of consecutive records, optionally with the aligned
/// parse results needed for the event view.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub index: usize,
    pub records: Vec<LogRecord>,
    /// Aligned with `records`; `None` when the corpus was not parsed.
    pub parsed: Vec<Option<ParsedRecord>>,
    pub label: Label,
    pub is_partial: bool,
}

/// One window rendered under one view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogSequence {
    pub window_index: usize,
    pub view: SequenceView,
    pub items: Vec<String>,
}

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("window size must be at least 1")]
    InvalidWindowSize,
    #[error("record {0} has no parse result; the event view needs a parsed corpus")]
    MissingParse(usize),
    #[error("record {line_no} references unknown template id {template_id}")]
    UnknownTemplate { line_no: usize, template_id: u32 },
    #[error("{records} records but {parsed} parse results; inputs must align")]
    Misaligned { records: usize, parsed: usize },
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn window_label(records: &[LogRecord]) -> Label {
    if records.iter().any(|r| r.label.is_anomalous()) {
        Label::Anomalous
    } else {
        Label::Normal
    }
}

fn build_windows(
    records: &[LogRecord],
    parsed: Option<&[ParsedRecord]>,
    window_size: usize,
) -> Result<Vec<Window>, SequenceError> {
    if window_size == 0 {
        return Err(SequenceError::InvalidWindowSize);
    }
    if let Some(parsed) = parsed {
        if parsed.len() != records.len() {
            return Err(SequenceError::Misaligned {
                records: records.len(),
                parsed: parsed.len(),
            });
        }
    }
    let mut windows = Vec::with_capacity(records.len().div_ceil(window_size));
    for (index, chunk) in records.chunks(window_size).enumerate() {
        let start = index * window_size;
        let aligned: Vec<Option<ParsedRecord>> = match parsed {
            Some(parsed) => parsed[start..start + chunk.len()]
                .iter()
                .cloned()
                .map(Some)
                .collect(),
            None => vec![None; chunk.len()],
        };
        windows.push(Window {
            index,
            records: chunk.to_vec(),
            parsed: aligned,
            label: window_label(chunk),
            is_partial: chunk.len() < window_size,
        });
    }
    Ok(windows)
}

/// Partition records into tumbling windows of `window_size` (trailing
/// partial kept and flagged).
pub fn make_windows(
    records: &[LogRecord],
    window_size: usize,
) -> Result<Vec<Window>, SequenceError> {
    build_windows(records, None, window_size)
}

/// As [`make_windows`], carrying parse results aligned by position so the
/// event view can be rendered.
pub fn make_windows_parsed(
    records: &[LogRecord],
    parsed: &[ParsedRecord],
    window_size: usize,
) -> Result<Vec<Window>, SequenceError> {
    build_windows(records, Some(parsed), window_size)
}

/// Render one window under a view. The event view resolves each record's
/// template in `catalog` and drops every wildcard from the template string.
pub fn render_sequence(
    window: &Window,
    view: SequenceView,
    catalog: &TemplateCatalog,
) -> Result<LogSequence, SequenceError> {
    let items = match view {
        SequenceView::Raw => window.records.iter().map(|r| r.raw_line.clone()).collect(),
        SequenceView::Content => window.records.iter().map(|r| r.content.clone()).collect(),
        SequenceView::Event => {
            let mut items = Vec::with_capacity(window.records.len());
            for (record, parsed) in window.records.iter().zip(&window.parsed) {
                let parsed = parsed
                    .as_ref()
                    .ok_or(SequenceError::MissingParse(record.line_no))?;
                let event = catalog.event_string(parsed.template_id).ok_or(
                    SequenceError::UnknownTemplate {
                        line_no: record.line_no,
                        template_id: parsed.template_id.0,
                    },
                )?;
                items.push(event);
            }
            items
        }
    };
    Ok(LogSequence {
        window_index: window.index,
        view,
        items,
    })
}

#[derive(Serialize)]
struct SequenceDumpRow<'a> {
    window_index: usize,
    view: SequenceView,
    label: Label,
    is_partial: bool,
    items: &'a [String],
}

/// Sequence dump: one JSON record per window with its label and items.
pub fn write_sequence_dump(
    windows: &[Window],
    view: SequenceView,
    catalog: &TemplateCatalog,
    path: &Path,
) -> Result<(), SequenceError> {
    let mut out = String::new();
    for window in windows {
        let seq = render_sequence(window, view, catalog)?;
        let row = SequenceDumpRow {
            window_index: window.index,
            view,
            label: window.label,
            is_partial: window.is_partial,
            items: &seq.items,
        };
        out.push_str(&serde_json::to_string(&row).expect("dump rows serialize"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes()).map_err(|source| SequenceError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drain::{parse_corpus, default_mask_rules, ParseTreeConfig, WILDCARD};

    fn record(line_no: usize, label: Label, content: &str) -> LogRecord {
        LogRecord {
            line_no,
            label,
            timestamp: format!("t{line_no}"),
            content: content.to_string(),
            raw_line: format!("- t{line_no} host {content}"),
        }
    }

    fn normals(n: usize) -> Vec<LogRecord> {
        (0..n).map(|i| record(i, Label::Normal, "ok")).collect()
    }

    #[test]
    fn exact_multiple_gives_full_windows() {
        let windows = make_windows(&normals(100), 50).unwrap();
        assert_eq!(windows.len(), 2);
        assert!(windows.iter().all(|w| w.records.len() == 50 && !w.is_partial));
    }

    #[test]
    fn trailing_partial_is_kept_and_flagged() {
        let windows = make_windows(&normals(105), 50).unwrap();
        let sizes: Vec<usize> = windows.iter().map(|w| w.records.len()).collect();
        assert_eq!(sizes, vec![50, 50, 5]);
        assert_eq!(
            windows.iter().map(|w| w.is_partial).collect::<Vec<_>>(),
            vec![false, false, true]
        );
    }

    #[test]
    fn one_anomalous_record_marks_the_window() {
        let mut records = normals(50);
        records[17].label = Label::Anomalous;
        let windows = make_windows(&records, 50).unwrap();
        assert_eq!(windows[0].label, Label::Anomalous);
    }

    #[test]
    fn zero_window_size_is_rejected() {
        assert!(matches!(
            make_windows(&normals(3), 0),
            Err(SequenceError::InvalidWindowSize)
        ));
    }

    #[test]
    fn windows_partition_the_input() {
        let records = normals(23);
        let windows = make_windows(&records, 5).unwrap();
        let joined: Vec<LogRecord> = windows.into_iter().flat_map(|w| w.records).collect();
        assert_eq!(joined, records);
    }

    #[test]
    fn content_view_is_identity_and_raw_contains_it() {
        let records = vec![
            record(0, Label::Normal, "cache flush done"),
            record(1, Label::Normal, "link up"),
        ];
        let windows = make_windows(&records, 2).unwrap();
        let catalog = TemplateCatalog::default();
        let content = render_sequence(&windows[0], SequenceView::Content, &catalog).unwrap();
        assert_eq!(content.items, vec!["cache flush done", "link up"]);
        let raw = render_sequence(&windows[0], SequenceView::Raw, &catalog).unwrap();
        for (raw_item, content_item) in raw.items.iter().zip(&content.items) {
            assert!(raw_item.ends_with(content_item.as_str()));
            assert!(raw_item.len() > content_item.len());
        }
    }

    #[test]
    fn event_view_drops_wildcards() {
        let records = vec![
            record(0, Label::Normal, "open_demux: connect 172.30.71.32:44020"),
            record(1, Label::Normal, "open_demux: connect 172.30.71.32:43908"),
        ];
        let out = parse_corpus(&records, &ParseTreeConfig::default(), &default_mask_rules())
            .unwrap();
        let catalog = TemplateCatalog::new(&out.templates);
        let windows = make_windows_parsed(&records, &out.parsed, 2).unwrap();
        let seq = render_sequence(&windows[0], SequenceView::Event, &catalog).unwrap();
        assert_eq!(seq.items, vec!["open_demux: connect", "open_demux: connect"]);
        for item in &seq.items {
            assert!(!item.contains(WILDCARD));
            assert!(!item.contains("  "));
        }
    }

    #[test]
    fn event_view_without_parses_fails() {
        let windows = make_windows(&normals(2), 2).unwrap();
        let err = render_sequence(&windows[0], SequenceView::Event, &TemplateCatalog::default())
            .unwrap_err();
        assert!(matches!(err, SequenceError::MissingParse(0)));
    }

    #[test]
    fn rendering_is_pure() {
        let records = normals(4);
        let windows = make_windows(&records, 2).unwrap();
        let catalog = TemplateCatalog::default();
        let a = render_sequence(&windows[1], SequenceView::Raw, &catalog).unwrap();
        let b = render_sequence(&windows[1], SequenceView::Raw, &catalog).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.items.len(), windows[1].records.len());
    }
}

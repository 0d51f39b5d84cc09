//! Dataset loading, the chronological train/test split, and sampling of the
//! consecutive evaluation subset.
//!
//! Input files are newline-delimited text logs where one field marks the
//! alert class (e.g. `-` for non-alert lines in BGL-style dumps). The field
//! layout is described by a [`DatasetSpec`] so the same loader covers
//! differently shaped datasets.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;

/// Binary record label; `Anomalous` is the positive class throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        matches!(self, Label::Anomalous)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Normal => f.write_str("normal"),
            Label::Anomalous => f.write_str("anomalous"),
        }
    }
}

/// One raw log line. `content` is a byte-suffix slice of `raw_line` starting
/// at the field named by the dataset spec, so raw always contains content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub line_no: usize,
    pub label: Label,
    pub timestamp: String,
    pub content: String,
    pub raw_line: String,
}

/// Describes how to slice one line of a dataset into label, timestamp, and
/// message content. Field indices are zero-based over delimiter-separated
/// fields (runs of the delimiter collapse).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub field_delimiter: char,
    pub label_field_index: usize,
    /// Field value that marks a non-alert line; anything else is anomalous.
    pub normal_marker: String,
    /// Inclusive range of fields carried as the (opaque) timestamp.
    pub timestamp_field_start: usize,
    pub timestamp_field_end: usize,
    pub content_start_index: usize,
}

impl DatasetSpec {
    /// BGL supercomputer layout: `LABEL EPOCH DATE NODE TIME NODE RAS COMPONENT LEVEL MESSAGE...`
    pub fn bgl() -> Self {
        DatasetSpec {
            name: "bgl".into(),
            field_delimiter: ' ',
            label_field_index: 0,
            normal_marker: "-".into(),
            timestamp_field_start: 1,
            timestamp_field_end: 4,
            content_start_index: 9,
        }
    }

    /// Spirit cluster layout: `LABEL EPOCH DATE HOST TIME HOST/SOURCE MESSAGE...`
    pub fn spirit() -> Self {
        DatasetSpec {
            name: "spirit".into(),
            field_delimiter: ' ',
            label_field_index: 0,
            normal_marker: "-".into(),
            timestamp_field_start: 1,
            timestamp_field_end: 4,
            content_start_index: 7,
        }
    }

    fn min_fields(&self) -> usize {
        self.content_start_index
            .max(self.label_field_index)
            .max(self.timestamp_field_end)
            + 1
    }
}

/// Controls [`sample_consecutive`]: slice size, accepted anomaly fraction
/// bounds, and the seeded retry budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetPolicy {
    pub size: usize,
    pub min_anomaly_fraction: f64,
    pub max_anomaly_fraction: f64,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SubsetPolicy {
    fn default() -> Self {
        SubsetPolicy {
            size: 2000,
            min_anomaly_fraction: 0.02,
            max_anomaly_fraction: 0.98,
            max_retries: 1000,
            seed: 0,
        }
    }
}

impl SubsetPolicy {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.size == 0 {
            return Err(IngestError::InvalidPolicy("size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_anomaly_fraction)
            || !(0.0..=1.0).contains(&self.max_anomaly_fraction)
            || self.min_anomaly_fraction > self.max_anomaly_fraction
        {
            return Err(IngestError::InvalidPolicy(format!(
                "anomaly fraction bounds [{}, {}] must satisfy 0 <= min <= max <= 1",
                self.min_anomaly_fraction, self.max_anomaly_fraction
            )));
        }
        Ok(())
    }
}

/// Reject rate above which [`load_dataset`] fails instead of quarantining.
pub const DEFAULT_MAX_REJECT_RATE: f64 = 0.001;

/// A quarantined line: kept out of the record list, reported separately.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line_no: usize,
    pub reason: String,
}

/// Accepted records plus the rejects report for one loaded file.
#[derive(Debug, Clone)]
pub struct LoadOutcome {
    pub records: Vec<LogRecord>,
    pub rejects: Vec<Reject>,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("train ratio must be strictly between 0 and 1, got {0}")]
    InvalidRatio(f64),
    #[error("{rejected} of {total} lines rejected ({rate:.5} > ceiling {ceiling:.5})")]
    ExcessiveRejects {
        rejected: usize,
        total: usize,
        rate: f64,
        ceiling: f64,
    },
    #[error("test split has {len} records but the subset policy needs {need}")]
    SubsetTooSmall { len: usize, need: usize },
    #[error(
        "no window of {size} records had an anomaly fraction in [{min}, {max}] \
         after {retries} draws; fractions seen: {seen:?}"
    )]
    SamplingExhausted {
        size: usize,
        min: f64,
        max: f64,
        retries: usize,
        seen: Vec<f64>,
    },
    #[error("invalid subset policy: {0}")]
    InvalidPolicy(String),
}

/// Byte offsets of each delimiter-separated field. Runs of the delimiter
/// count as a single separator; empty fields never appear.
fn field_offsets(line: &str, delimiter: char) -> Vec<(usize, &str)> {
    let mut fields = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        if ch == delimiter {
            if let Some(s) = start.take() {
                fields.push((s, &line[s..i]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        fields.push((s, &line[s..]));
    }
    fields
}

/// Slice one line into a record, or explain why it cannot be.
pub fn parse_line(line: &str, line_no: usize, spec: &DatasetSpec) -> Result<LogRecord, Reject> {
    let fields = field_offsets(line, spec.field_delimiter);
    if fields.len() < spec.min_fields() {
        return Err(Reject {
            line_no,
            reason: format!(
                "expected at least {} fields, found {}",
                spec.min_fields(),
                fields.len()
            ),
        });
    }
    let label = if fields[spec.label_field_index].1 == spec.normal_marker {
        Label::Normal
    } else {
        Label::Anomalous
    };
    let timestamp = fields[spec.timestamp_field_start..=spec.timestamp_field_end]
        .iter()
        .map(|(_, f)| *f)
        .collect::<Vec<_>>()
        .join(" ");
    let content_start = fields[spec.content_start_index].0;
    Ok(LogRecord {
        line_no,
        label,
        timestamp,
        content: line[content_start..].to_string(),
        raw_line: line.to_string(),
    })
}

/// Read a dataset file into labeled records, in file order.
///
/// Blank lines are skipped. Lines that cannot be sliced per the spec are
/// quarantined into the rejects report; the load only fails when the reject
/// rate over non-blank lines exceeds `max_reject_rate`.
pub fn load_dataset(
    path: &Path,
    spec: &DatasetSpec,
    max_reject_rate: f64,
) -> Result<LoadOutcome, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut rejects = Vec::new();
    let mut total = 0usize;
    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match parse_line(&line, line_no, spec) {
            Ok(record) => records.push(record),
            Err(reject) => rejects.push(reject),
        }
    }
    if total > 0 {
        let rate = rejects.len() as f64 / total as f64;
        if rate > max_reject_rate {
            return Err(IngestError::ExcessiveRejects {
                rejected: rejects.len(),
                total,
                rate,
                ceiling: max_reject_rate,
            });
        }
    }
    Ok(LoadOutcome { records, rejects })
}

/// Rejects report: one `line_no<TAB>reason` record per quarantined line.
pub fn write_rejects_report(rejects: &[Reject], path: &Path) -> std::io::Result<()> {
    let mut out = String::new();
    for r in rejects {
        out.push_str(&format!("{}\t{}\n", r.line_no, r.reason));
    }
    write_atomic(path, out.as_bytes())
}

/// Number of records the chronological split assigns to training.
pub fn train_len(total: usize, train_ratio: f64) -> usize {
    (total as f64 * train_ratio).floor() as usize
}

/// Chronological split: the earliest `floor(N * ratio)` records train, the
/// remainder tests. Order is preserved on both sides.
pub fn split_chronological(
    records: Vec<LogRecord>,
    train_ratio: f64,
) -> Result<(Vec<LogRecord>, Vec<LogRecord>), IngestError> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(IngestError::InvalidRatio(train_ratio));
    }
    if records.is_empty() {
        return Err(IngestError::EmptyDataset);
    }
    let cut = train_len(records.len(), train_ratio);
    if cut == 0 {
        log::warn!(
            "train split is empty ({} records at ratio {})",
            records.len(),
            train_ratio
        );
    }
    let mut train = records;
    let test = train.split_off(cut);
    Ok((train, test))
}

/// Draw a contiguous slice of exactly `policy.size` records whose anomaly
/// fraction lies within the policy bounds. Start indices come from a
/// generator seeded with `policy.seed`, so the same seed always yields the
/// same slice.
pub fn sample_consecutive(
    test: &[LogRecord],
    policy: &SubsetPolicy,
) -> Result<Vec<LogRecord>, IngestError> {
    policy.validate()?;
    if test.len() < policy.size {
        return Err(IngestError::SubsetTooSmall {
            len: test.len(),
            need: policy.size,
        });
    }
    // Prefix sums make each candidate check O(1).
    let mut prefix = Vec::with_capacity(test.len() + 1);
    prefix.push(0usize);
    for r in test {
        prefix.push(prefix.last().unwrap() + usize::from(r.label.is_anomalous()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let last_start = test.len() - policy.size;
    let mut seen = Vec::new();
    for _ in 0..policy.max_retries.max(1) {
        let start = rng.random_range(0..=last_start);
        let anomalous = prefix[start + policy.size] - prefix[start];
        let fraction = anomalous as f64 / policy.size as f64;
        if fraction >= policy.min_anomaly_fraction && fraction <= policy.max_anomaly_fraction {
            return Ok(test[start..start + policy.size].to_vec());
        }
        seen.push(fraction);
    }
    seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
    seen.dedup();
    Err(IngestError::SamplingExhausted {
        size: policy.size,
        min: policy.min_anomaly_fraction,
        max: policy.max_anomaly_fraction,
        retries: policy.max_retries,
        seen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn bgl_line(label: &str, content: &str) -> String {
        format!(
            "{label} 1117838570 2005.06.03 R02-M1-N0 2005-06-03-15.42.50 R02-M1-N0 RAS KERNEL INFO {content}"
        )
    }

    fn write_temp(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    fn synthetic(labels: &[Label]) -> Vec<LogRecord> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &label)| LogRecord {
                line_no: i,
                label,
                timestamp: String::new(),
                content: format!("msg {i}"),
                raw_line: format!("x msg {i}"),
            })
            .collect()
    }

    #[test]
    fn marker_match_is_normal() {
        let spec = DatasetSpec::bgl();
        let rec = parse_line(
            &bgl_line("-", "instruction cache parity error corrected"),
            0,
            &spec,
        )
        .unwrap();
        assert_eq!(rec.label, Label::Normal);
        assert_eq!(rec.content, "instruction cache parity error corrected");
    }

    #[test]
    fn non_marker_is_anomalous() {
        let spec = DatasetSpec::bgl();
        let rec = parse_line(
            &bgl_line("KERNDTLB", "data TLB error interrupt"),
            3,
            &spec,
        )
        .unwrap();
        assert_eq!(rec.label, Label::Anomalous);
        assert_eq!(rec.content, "data TLB error interrupt");
    }

    #[test]
    fn content_is_suffix_of_raw() {
        let spec = DatasetSpec::bgl();
        for line in [
            bgl_line("-", "shutdown complete"),
            bgl_line("APPREAD", "ciod: failed to read message prefix"),
        ] {
            let rec = parse_line(&line, 0, &spec).unwrap();
            assert!(rec.raw_line.ends_with(&rec.content));
            assert!(rec.raw_line.len() > rec.content.len());
        }
    }

    #[test]
    fn empty_file_loads_empty() {
        let f = write_temp(&[]);
        let out = load_dataset(f.path(), &DatasetSpec::bgl(), DEFAULT_MAX_REJECT_RATE).unwrap();
        assert!(out.records.is_empty());
        assert!(out.rejects.is_empty());
    }

    #[test]
    fn short_lines_are_quarantined() {
        let lines = vec![
            bgl_line("-", "boot ok"),
            "too short".to_string(),
            bgl_line("-", "boot ok"),
        ];
        let f = write_temp(&lines);
        // Generous ceiling: the malformed line is quarantined, not fatal.
        let out = load_dataset(f.path(), &DatasetSpec::bgl(), 0.5).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.rejects.len(), 1);
        assert_eq!(out.rejects[0].line_no, 1);
        // Default ceiling (0.1%) makes the same file fail.
        let err = load_dataset(f.path(), &DatasetSpec::bgl(), DEFAULT_MAX_REJECT_RATE)
            .unwrap_err();
        assert!(matches!(err, IngestError::ExcessiveRejects { rejected: 1, .. }));
    }

    #[test]
    fn load_is_deterministic_and_counts_match_line_scan() {
        let lines: Vec<String> = (0..50)
            .map(|i| {
                if i % 7 == 0 {
                    bgl_line("KERNEL", &format!("fault {i}"))
                } else {
                    bgl_line("-", &format!("ok {i}"))
                }
            })
            .collect();
        let f = write_temp(&lines);
        let spec = DatasetSpec::bgl();
        let a = load_dataset(f.path(), &spec, DEFAULT_MAX_REJECT_RATE).unwrap();
        let b = load_dataset(f.path(), &spec, DEFAULT_MAX_REJECT_RATE).unwrap();
        assert_eq!(a.records, b.records);
        // Independent scan: first field != "-" means anomalous.
        let expected = lines
            .iter()
            .filter(|l| l.split(' ').next() != Some("-"))
            .count();
        let got = a
            .records
            .iter()
            .filter(|r| r.label.is_anomalous())
            .count();
        assert_eq!(got, expected);
        let line_nos: Vec<_> = a.records.iter().map(|r| r.line_no).collect();
        assert!(line_nos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn split_sizes_and_order() {
        let records = synthetic(&[Label::Normal; 10]);
        let (train, test) = split_chronological(records.clone(), 0.8).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
        let mut joined = train.clone();
        joined.extend(test.clone());
        assert_eq!(joined, records);
    }

    #[test]
    fn split_train_len_full_scale() {
        // floor(4,747,963 * 0.8) = 3,798,370, worked out by hand.
        assert_eq!(train_len(4_747_963, 0.8), 3_798_370);
    }

    #[test]
    fn split_single_record_goes_to_test() {
        let records = synthetic(&[Label::Normal]);
        let (train, test) = split_chronological(records, 0.8).unwrap();
        assert!(train.is_empty());
        assert_eq!(test.len(), 1);
    }

    #[test]
    fn split_rejects_empty_and_bad_ratio() {
        assert!(matches!(
            split_chronological(vec![], 0.8),
            Err(IngestError::EmptyDataset)
        ));
        let records = synthetic(&[Label::Normal; 3]);
        assert!(matches!(
            split_chronological(records, 1.0),
            Err(IngestError::InvalidRatio(_))
        ));
    }

    #[test]
    fn sample_whole_set_when_sizes_match() {
        let records = synthetic(&[Label::Anomalous; 20]);
        let policy = SubsetPolicy {
            size: 20,
            min_anomaly_fraction: 0.0,
            max_anomaly_fraction: 1.0,
            ..SubsetPolicy::default()
        };
        let subset = sample_consecutive(&records, &policy).unwrap();
        assert_eq!(subset, records);
    }

    #[test]
    fn sample_lands_in_brute_forced_qualifying_set_and_repeats() {
        // Anomalies concentrated in [4000, 6000); bounds force overlap.
        let labels: Vec<Label> = (0..10_000)
            .map(|i| {
                if (4000..6000).contains(&i) {
                    Label::Anomalous
                } else {
                    Label::Normal
                }
            })
            .collect();
        let records = synthetic(&labels);
        let policy = SubsetPolicy {
            size: 2000,
            min_anomaly_fraction: 0.05,
            max_anomaly_fraction: 0.95,
            max_retries: 1000,
            seed: 7,
        };
        let subset = sample_consecutive(&records, &policy).unwrap();
        let start = subset[0].line_no;
        // Brute-force oracle: enumerate every qualifying start index.
        let qualifying: Vec<usize> = (0..=labels.len() - policy.size)
            .filter(|&s| {
                let a = labels[s..s + policy.size]
                    .iter()
                    .filter(|l| l.is_anomalous())
                    .count();
                let f = a as f64 / policy.size as f64;
                (0.05..=0.95).contains(&f)
            })
            .collect();
        assert!(qualifying.contains(&start));
        let again = sample_consecutive(&records, &policy).unwrap();
        assert_eq!(subset, again);
    }

    #[test]
    fn sample_exhausts_when_no_slice_qualifies() {
        let records = synthetic(&[Label::Normal; 100]);
        let policy = SubsetPolicy {
            size: 10,
            min_anomaly_fraction: 0.99,
            max_anomaly_fraction: 1.0,
            max_retries: 50,
            seed: 1,
        };
        let err = sample_consecutive(&records, &policy).unwrap_err();
        match err {
            IngestError::SamplingExhausted { seen, .. } => assert_eq!(seen, vec![0.0]),
            other => panic!("expected SamplingExhausted, got {other:?}"),
        }
    }

    #[test]
    fn rejects_report_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rejects.tsv");
        write_rejects_report(
            &[Reject {
                line_no: 12,
                reason: "expected at least 10 fields, found 2".into(),
            }],
            &path,
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "12\texpected at least 10 fields, found 2\n");
    }
}

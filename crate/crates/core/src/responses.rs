//! Structured verdict parsing over free-form backend replies.
//!
//! Replies should be a JSON object with `is_anomaly`, `reports`, and
//! `preventive_measures`, but real replies arrive prose-wrapped, fenced,
//! single-quoted, or truncated at the output-token cap. Parsing tries the
//! whole text, then embedded balanced objects, then brace repair; anything
//! still unreadable is sent back through the backend once with a reformat
//! prompt.

use serde_json::Value;
use thiserror::Error;

use crate::llm::{Backend, LlmError};
use crate::prompts::{PromptRequest, REQUIRED_KEYS};

/// How a verdict was obtained from the reply text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsePath {
    /// The whole reply was the object.
    Direct,
    /// The object was embedded in surrounding text (or repaired).
    Extracted,
    /// A second backend call produced the object.
    Reformatted,
}

/// The structured reply for one window.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Verdict {
    pub is_anomaly: bool,
    pub reports: String,
    pub preventive_measures: String,
    pub parse_path: ParsePath,
    pub raw_text: String,
}

/// The reply held no readable verdict; carry it to the reformat flow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeedsReformat {
    pub raw_text: String,
}

/// Outcome of a local parse attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseOutcome {
    Parsed(Verdict),
    NeedsReformat(NeedsReformat),
}

#[derive(Debug, Error)]
#[error("unrecognized anomaly flag value: {0}")]
pub struct UnrecognizedFlag(pub String);

#[derive(Debug, Error)]
pub enum ResponseError {
    #[error("reply stayed unparsable after reformatting")]
    Unparsable {
        raw_text: String,
        reformatted_text: String,
    },
    #[error("cannot reformat an empty reply")]
    EmptyReformatInput,
    #[error(transparent)]
    Backend(#[from] LlmError),
}

/// Fold a key for matching: case-insensitive with underscores and hyphens
/// removed, so `is_anomaly`, `isAnomaly`, and `IS-ANOMALY` all coincide.
fn fold_key(key: &str) -> String {
    key.chars()
        .filter(|c| *c != '_' && *c != '-')
        .flat_map(char::to_lowercase)
        .collect()
}

/// Map a scalar to the anomaly flag. Accepts booleans, the usual word
/// synonyms, and 0/1; anything else is unrecognized and routes the reply to
/// the reformat flow.
pub fn normalize_flag(value: &Value) -> Result<bool, UnrecognizedFlag> {
    match value {
        Value::Bool(b) => Ok(*b),
        Value::Number(n) => match n.as_f64() {
            Some(f) if f == 1.0 => Ok(true),
            Some(f) if f == 0.0 => Ok(false),
            _ => Err(UnrecognizedFlag(n.to_string())),
        },
        Value::String(s) => match s.trim().to_lowercase().as_str() {
            "true" | "yes" | "anomaly" | "anomalous" => Ok(true),
            "false" | "no" | "normal" => Ok(false),
            _ => Err(UnrecognizedFlag(s.clone())),
        },
        other => Err(UnrecognizedFlag(other.to_string())),
    }
}

fn text_field(value: Option<&Value>) -> String {
    match value {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .collect::<Vec<_>>()
            .join("\n"),
        Some(other) => other.to_string(),
    }
}

fn verdict_from_object(object: &serde_json::Map<String, Value>, raw_text: &str) -> Option<Verdict> {
    let mut folded: std::collections::HashMap<String, &Value> = std::collections::HashMap::new();
    for (key, value) in object {
        folded.entry(fold_key(key)).or_insert(value);
    }
    let flag = folded.get(fold_key("is_anomaly").as_str()).copied()?;
    let is_anomaly = normalize_flag(flag).ok()?;
    for key in ["reports", "preventive_measures"] {
        if !folded.contains_key(fold_key(key).as_str()) {
            log::warn!("reply object lacks {key}; defaulting to empty");
        }
    }
    Some(Verdict {
        is_anomaly,
        reports: text_field(folded.get(fold_key("reports").as_str()).copied()),
        preventive_measures: text_field(
            folded.get(fold_key("preventive_measures").as_str()).copied(),
        ),
        parse_path: ParsePath::Direct,
        raw_text: raw_text.to_string(),
    })
}

fn strip_code_fences(text: &str) -> &str {
    let mut t = text.trim();
    for prefix in ["```json", "```JSON", "```"] {
        if let Some(rest) = t.strip_prefix(prefix) {
            t = rest;
            break;
        }
    }
    t = t.strip_suffix("```").unwrap_or(t);
    t.trim()
}

/// Balanced `{...}` span starting at byte `start` (which must index a `{`),
/// honoring JSON string and escape rules. `None` when the input ends first.
fn balanced_span(text: &str, start: usize) -> Option<&str> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escape = false;
    for (i, ch) in text[start..].char_indices() {
        if in_string {
            if escape {
                escape = false;
            } else if ch == '\\' {
                escape = true;
            } else if ch == '"' {
                in_string = false;
            }
            continue;
        }
        match ch {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + ch.len_utf8()]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Close an object fragment truncated by the output-token cap: terminate an
/// open string, drop a dangling comma or null out a dangling colon, then
/// close every open brace and bracket.
fn repair_truncated(text: &str) -> Option<String> {
    let start = text.find('{')?;
    let fragment = &text[start..];
    let mut stack: Vec<char> = Vec::new();
    let mut in_string = false;
    let mut escape = false;
    for ch in fragment.chars() {
        if in_string {
            if escape {
                escape = false;
            } else if ch == '\\' {
                escape = true;
            } else if ch == '"' {
                in_string = false;
            }
            continue;
        }
        match ch {
            '"' => in_string = true,
            '{' | '[' => stack.push(ch),
            '}' | ']' => {
                let open = stack.pop()?;
                let matches = (open == '{' && ch == '}') || (open == '[' && ch == ']');
                if !matches {
                    return None;
                }
            }
            _ => {}
        }
    }
    if stack.is_empty() {
        return None; // already balanced; nothing to repair
    }
    let mut repaired = fragment.to_string();
    if in_string {
        if escape {
            repaired.pop();
        }
        repaired.push('"');
    }
    let mut trimmed = repaired.trim_end().to_string();
    if trimmed.ends_with(':') {
        trimmed.push_str(" null");
    } else {
        while trimmed.ends_with(',') {
            trimmed.pop();
            trimmed.truncate(trimmed.trim_end().len());
        }
    }
    for open in stack.into_iter().rev() {
        trimmed.push(if open == '{' { '}' } else { ']' });
    }
    Some(trimmed)
}

/// Parse a reply into a verdict, or report that it needs the reformat flow.
/// Total over arbitrary input: never panics, never errors.
pub fn parse_response(text: &str) -> ParseOutcome {
    let trimmed = text.trim();

    // Whole reply as the object.
    if let Ok(Value::Object(object)) = serde_json::from_str::<Value>(trimmed) {
        if let Some(verdict) = verdict_from_object(&object, text) {
            return ParseOutcome::Parsed(verdict);
        }
    }

    let mut extracted_candidates: Vec<String> = Vec::new();
    let fenced = strip_code_fences(trimmed);
    if fenced != trimmed {
        extracted_candidates.push(fenced.to_string());
    }
    // Every balanced object span, outermost first.
    let mut search_from = 0;
    while let Some(offset) = fenced[search_from..].find('{') {
        let start = search_from + offset;
        match balanced_span(fenced, start) {
            Some(span) => {
                extracted_candidates.push(span.to_string());
                search_from = start + span.len();
            }
            None => break,
        }
    }
    if let Some(repaired) = repair_truncated(fenced) {
        extracted_candidates.push(repaired);
    }

    for candidate in extracted_candidates {
        if let Ok(Value::Object(object)) = serde_json::from_str::<Value>(&candidate) {
            if let Some(mut verdict) = verdict_from_object(&object, text) {
                verdict.parse_path = ParsePath::Extracted;
                return ParseOutcome::Parsed(verdict);
            }
        }
    }

    ParseOutcome::NeedsReformat(NeedsReformat {
        raw_text: text.to_string(),
    })
}

/// The fixed reformat instruction, with the raw reply appended below it.
pub fn reformat_prompt(keys: &[&str], raw_text: &str) -> String {
    format!(
        "Please format the following text in json format, which include the keys: {}\n{}",
        keys.join(", "),
        raw_text
    )
}

/// Ask the backend once to reformat an unreadable reply, then parse the
/// result. Adds exactly one round-trip; a second failure is final.
pub fn reformat_flow(
    backend: &Backend,
    raw_text: &str,
    keys: &[&str],
) -> Result<Verdict, ResponseError> {
    if raw_text.is_empty() {
        return Err(ResponseError::EmptyReformatInput);
    }
    let request = PromptRequest::new(reformat_prompt(keys, raw_text), backend.model_id());
    let response = backend.complete(&request)?;
    match parse_response(&response.text) {
        ParseOutcome::Parsed(mut verdict) => {
            verdict.parse_path = ParsePath::Reformatted;
            verdict.raw_text = raw_text.to_string();
            Ok(verdict)
        }
        ParseOutcome::NeedsReformat(_) => Err(ResponseError::Unparsable {
            raw_text: raw_text.to_string(),
            reformatted_text: response.text,
        }),
    }
}

/// Convenience: parse with the standard keys, falling back to one reformat
/// round-trip through `backend`.
pub fn parse_with_fallback(backend: &Backend, text: &str) -> Result<Verdict, ResponseError> {
    match parse_response(text) {
        ParseOutcome::Parsed(verdict) => Ok(verdict),
        ParseOutcome::NeedsReformat(needs) => {
            reformat_flow(backend, &needs.raw_text, &REQUIRED_KEYS)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{digest, Cassette, FinishReason};

    fn parsed(text: &str) -> Verdict {
        match parse_response(text) {
            ParseOutcome::Parsed(v) => v,
            ParseOutcome::NeedsReformat(_) => panic!("expected a verdict for {text:?}"),
        }
    }

    fn needs_reformat(text: &str) -> bool {
        matches!(parse_response(text), ParseOutcome::NeedsReformat(_))
    }

    #[test]
    fn direct_object_parses() {
        let text = r#"{"is_anomaly": true, "reports": "data TLB error interrupt", "preventive_measures": "Check the memory and CPU usage"}"#;
        let v = parsed(text);
        assert!(v.is_anomaly);
        assert_eq!(v.parse_path, ParsePath::Direct);
        assert_eq!(v.reports, "data TLB error interrupt");
        assert_eq!(v.preventive_measures, "Check the memory and CPU usage");
        assert_eq!(v.raw_text, text);
    }

    #[test]
    fn embedded_object_is_extracted() {
        let text = r#"Sure! Here is the result: {"is_anomaly": false, "reports": "", "preventive_measures": ""}"#;
        let v = parsed(text);
        assert!(!v.is_anomaly);
        assert_eq!(v.parse_path, ParsePath::Extracted);
    }

    #[test]
    fn prose_needs_reformat() {
        assert!(needs_reformat("The sequence looks suspicious."));
    }

    #[test]
    fn fenced_object_is_extracted() {
        let text = "```json\n{\"is_anomaly\": true, \"reports\": \"r\", \"preventive_measures\": \"p\"}\n```";
        let v = parsed(text);
        assert!(v.is_anomaly);
        assert_eq!(v.parse_path, ParsePath::Extracted);
    }

    #[test]
    fn truncated_object_is_repaired() {
        let text = r#"{"is_anomaly": true, "reports": "data TLB error inte"#;
        let v = parsed(text);
        assert!(v.is_anomaly);
        assert_eq!(v.parse_path, ParsePath::Extracted);
        assert_eq!(v.reports, "data TLB error inte");
    }

    #[test]
    fn first_invalid_brace_span_does_not_block_later_objects() {
        let text = r#"{not json} but later {"is_anomaly": "yes", "reports": "", "preventive_measures": ""}"#;
        let v = parsed(text);
        assert!(v.is_anomaly);
        assert_eq!(v.parse_path, ParsePath::Extracted);
    }

    #[test]
    fn key_folding_accepts_variants() {
        for text in [
            r#"{"isAnomaly": true}"#,
            r#"{"IS-ANOMALY": true}"#,
            r#"{"Is_Anomaly": true}"#,
        ] {
            let v = parsed(text);
            assert!(v.is_anomaly, "{text}");
            assert_eq!(v.reports, "");
        }
    }

    #[test]
    fn flag_synonyms() {
        assert!(normalize_flag(&Value::String("Yes".into())).unwrap());
        assert!(normalize_flag(&Value::String("anomalous".into())).unwrap());
        assert!(normalize_flag(&Value::String("Anomaly".into())).unwrap());
        assert!(!normalize_flag(&Value::String("No".into())).unwrap());
        assert!(!normalize_flag(&Value::String("normal".into())).unwrap());
        assert!(normalize_flag(&serde_json::json!(1)).unwrap());
        assert!(!normalize_flag(&serde_json::json!(0)).unwrap());
        assert!(normalize_flag(&Value::Bool(true)).unwrap());
        assert!(normalize_flag(&Value::String("maybe".into())).is_err());
        assert!(normalize_flag(&serde_json::json!(2)).is_err());
        assert!(normalize_flag(&Value::Null).is_err());
    }

    #[test]
    fn flag_round_trips_through_serialization() {
        for flag in [true, false] {
            assert_eq!(normalize_flag(&Value::Bool(flag)).unwrap(), flag);
        }
    }

    #[test]
    fn unrecognized_flag_routes_to_reformat() {
        assert!(needs_reformat(r#"{"is_anomaly": "maybe", "reports": ""}"#));
    }

    #[test]
    fn array_fields_join_lines() {
        let text = r#"{"is_anomaly": true, "reports": "r", "preventive_measures": ["Check the memory and CPU usage", "Check the system logs"]}"#;
        let v = parsed(text);
        assert_eq!(
            v.preventive_measures,
            "Check the memory and CPU usage\nCheck the system logs"
        );
    }

    #[test]
    fn parse_is_total_on_junk() {
        for text in ["", "{", "}{", "\u{0}\u{1}", "{{{{", "null", "[1,2,3]", "\"str\""] {
            let _ = parse_response(text);
        }
    }

    #[test]
    fn reformat_prompt_uses_the_fixed_phrase() {
        let prompt = reformat_prompt(&REQUIRED_KEYS, "some text");
        assert!(prompt.starts_with(
            "Please format the following text in json format, which include the keys: \
             is_anomaly, reports, preventive_measures"
        ));
        assert!(prompt.ends_with("some text"));
    }

    #[test]
    fn reformat_flow_round_trips_via_replay() {
        let raw = "The sequence looks suspicious.";
        let reformat_request =
            PromptRequest::new(reformat_prompt(&REQUIRED_KEYS, raw), "gpt-3.5-turbo");
        let mut cassette = Cassette::new("gpt-3.5-turbo");
        cassette.insert(
            digest(&reformat_request),
            FinishReason::Stop,
            r#"{"is_anomaly": "no", "reports": "", "preventive_measures": ""}"#.into(),
        );
        let backend = Backend::replay_from(cassette, "gpt-3.5-turbo");
        let verdict = reformat_flow(&backend, raw, &REQUIRED_KEYS).unwrap();
        assert!(!verdict.is_anomaly);
        assert_eq!(verdict.parse_path, ParsePath::Reformatted);
        assert_eq!(verdict.raw_text, raw);
    }

    #[test]
    fn reformat_flow_fails_when_reply_is_still_prose() {
        let raw = "no structure here";
        let reformat_request =
            PromptRequest::new(reformat_prompt(&REQUIRED_KEYS, raw), "gpt-3.5-turbo");
        let mut cassette = Cassette::new("gpt-3.5-turbo");
        cassette.insert(
            digest(&reformat_request),
            FinishReason::Stop,
            "still just words".into(),
        );
        let backend = Backend::replay_from(cassette, "gpt-3.5-turbo");
        match reformat_flow(&backend, raw, &REQUIRED_KEYS) {
            Err(ResponseError::Unparsable {
                raw_text,
                reformatted_text,
            }) => {
                assert_eq!(raw_text, raw);
                assert_eq!(reformatted_text, "still just words");
            }
            other => panic!("expected Unparsable, got {other:?}"),
        }
    }

    #[test]
    fn empty_reformat_input_is_rejected() {
        let backend = Backend::replay_from(Cassette::new("m"), "m");
        assert!(matches!(
            reformat_flow(&backend, "", &REQUIRED_KEYS),
            Err(ResponseError::EmptyReformatInput)
        ));
    }
}

//! Log anomaly detection pipeline built around a chat-completion backend.
//!
//! The pipeline reads labeled system logs, mines message templates with a
//! fixed-depth parse tree, groups records into tumbling windows rendered as
//! raw / content / event sequences, asks an LLM for a structured verdict per
//! window, and scores the verdicts against the window labels.
//!
//! Modules follow the pipeline stages:
//!
//! * [`ingest`] — dataset loading, chronological split, consecutive subset sampling
//! * [`drain`] — template mining (fixed-depth parse tree with token similarity)
//! * [`sequencer`] — tumbling windows and the three sequence views
//! * [`prompts`] — prompt assembly (two templates, zero-/few-shot injection)
//! * [`llm`] — backend dispatch: live HTTP, record, or deterministic replay
//! * [`responses`] — tolerant verdict parsing with a reformat fallback
//! * [`eval`] — confusion counts, metrics, experiment sweeps, reports
//! * [`config`] / [`cli`] — the `loglens` binary

pub mod cli;
pub mod config;
pub mod drain;
pub mod eval;
pub mod ingest;
pub mod llm;
pub mod prompts;
pub mod responses;
pub mod sequencer;

mod fsutil;

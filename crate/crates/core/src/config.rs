//! Run configuration: one TOML document describing every pipeline stage,
//! with per-field CLI flag overrides layered on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drain::{default_mask_rules, MaskRule, ParseTreeConfig};
use crate::eval::{ExperimentConfig, UnparsablePolicy};
use crate::ingest::{DatasetSpec, SubsetPolicy};
use crate::llm::{BackendConfig, BackendKind};
use crate::prompts::{InjectionMode, InjectionType, PromptId};
use crate::sequencer::SequenceView;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error("referenced file does not exist: {0}")]
    MissingFile(PathBuf),
}

fn default_delimiter() -> String {
    " ".into()
}

fn default_train_ratio() -> f64 {
    0.8
}

fn default_max_reject_rate() -> f64 {
    crate::ingest::DEFAULT_MAX_REJECT_RATE
}

/// `[dataset]`: where the log file lives and how its lines are shaped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSection {
    pub name: String,
    pub path: PathBuf,
    #[serde(default = "default_delimiter")]
    pub field_delimiter: String,
    #[serde(default)]
    pub label_field_index: usize,
    #[serde(default = "default_marker")]
    pub normal_marker: String,
    #[serde(default = "default_ts_start")]
    pub timestamp_field_start: usize,
    #[serde(default = "default_ts_end")]
    pub timestamp_field_end: usize,
    pub content_start_index: usize,
    #[serde(default = "default_max_reject_rate")]
    pub max_reject_rate: f64,
    #[serde(default = "default_train_ratio")]
    pub train_ratio: f64,
}

fn default_marker() -> String {
    "-".into()
}

fn default_ts_start() -> usize {
    1
}

fn default_ts_end() -> usize {
    1
}

impl DatasetSection {
    pub fn spec(&self) -> Result<DatasetSpec, ConfigError> {
        let mut chars = self.field_delimiter.chars();
        let delimiter = chars
            .next()
            .ok_or_else(|| ConfigError::Invalid("field_delimiter is empty".into()))?;
        if chars.next().is_some() {
            return Err(ConfigError::Invalid(
                "field_delimiter must be a single character".into(),
            ));
        }
        Ok(DatasetSpec {
            name: self.name.clone(),
            field_delimiter: delimiter,
            label_field_index: self.label_field_index,
            normal_marker: self.normal_marker.clone(),
            timestamp_field_start: self.timestamp_field_start,
            timestamp_field_end: self.timestamp_field_end,
            content_start_index: self.content_start_index,
        })
    }
}

/// Whether few-shot examples are single historical lines or whole sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotGranularity {
    SingleLog,
    Sequence,
}

fn default_shot_count() -> usize {
    5
}

fn default_granularity() -> ShotGranularity {
    ShotGranularity::SingleLog
}

/// `[prompts]`: shot selection plus optional template file overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptsSection {
    #[serde(default = "default_shot_count")]
    pub shot_count: usize,
    #[serde(default = "default_granularity")]
    pub shot_granularity: ShotGranularity,
    #[serde(default)]
    pub template_p1: Option<PathBuf>,
    #[serde(default)]
    pub template_p2: Option<PathBuf>,
}

impl Default for PromptsSection {
    fn default() -> Self {
        PromptsSection {
            shot_count: default_shot_count(),
            shot_granularity: default_granularity(),
            template_p1: None,
            template_p2: None,
        }
    }
}

fn default_window_sizes() -> Vec<usize> {
    vec![10, 20, 30, 40, 50]
}

fn default_prompts() -> Vec<PromptId> {
    vec![PromptId::P2]
}

fn default_modes() -> Vec<InjectionMode> {
    vec![InjectionMode::ZeroShot, InjectionMode::FewShot]
}

fn default_views() -> Vec<SequenceView> {
    vec![SequenceView::Content]
}

fn default_injection() -> InjectionType {
    InjectionType::Normal
}

fn default_policy() -> UnparsablePolicy {
    UnparsablePolicy::Anomalous
}

/// `[experiment]`: the sweep grid. `detect` uses the first element of each
/// list; `sweep` crosses them all.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSection {
    #[serde(default = "default_window_sizes")]
    pub window_sizes: Vec<usize>,
    #[serde(default = "default_prompts")]
    pub prompts: Vec<PromptId>,
    #[serde(default = "default_modes")]
    pub modes: Vec<InjectionMode>,
    #[serde(default = "default_views")]
    pub views: Vec<SequenceView>,
    #[serde(default = "default_injection")]
    pub injection: InjectionType,
    #[serde(default)]
    pub exclude_partial_windows: bool,
    #[serde(default = "default_policy")]
    pub unparsable_policy: UnparsablePolicy,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            window_sizes: default_window_sizes(),
            prompts: default_prompts(),
            modes: default_modes(),
            views: default_views(),
            injection: default_injection(),
            exclude_partial_windows: false,
            unparsable_policy: default_policy(),
            seed: 0,
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// `[output]`: where dumps and reports land.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_out_dir(),
        }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub subset: SubsetPolicy,
    #[serde(default)]
    pub drain: ParseTreeConfig,
    #[serde(default)]
    pub mask_rules: Option<Vec<MaskRule>>,
    #[serde(default)]
    pub prompts: PromptsSection,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// CLI flag overrides; every field beats its config counterpart.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub window_size: Option<usize>,
    pub prompt: Option<PromptId>,
    pub mode: Option<InjectionMode>,
    pub view: Option<SequenceView>,
    pub injection: Option<InjectionType>,
    pub backend: Option<BackendKind>,
    pub cassette: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn apply_overrides(&mut self, overrides: &Overrides) {
        if let Some(path) = &overrides.dataset {
            self.dataset.path = path.clone();
        }
        if let Some(size) = overrides.window_size {
            self.experiment.window_sizes = vec![size];
        }
        if let Some(prompt) = overrides.prompt {
            self.experiment.prompts = vec![prompt];
        }
        if let Some(mode) = overrides.mode {
            self.experiment.modes = vec![mode];
        }
        if let Some(view) = overrides.view {
            self.experiment.views = vec![view];
        }
        if let Some(injection) = overrides.injection {
            self.experiment.injection = injection;
        }
        if let Some(kind) = overrides.backend {
            self.backend.kind = kind;
        }
        if let Some(cassette) = &overrides.cassette {
            self.backend.cassette = Some(cassette.clone());
        }
        if let Some(seed) = overrides.seed {
            self.subset.seed = seed;
            self.experiment.seed = seed;
        }
        if let Some(out) = &overrides.out {
            self.output.dir = out.clone();
        }
    }

    /// Check everything that can fail before any work starts: referenced
    /// files exist, numeric ranges hold, grids are non-empty.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.dataset.path.exists() {
            return Err(ConfigError::MissingFile(self.dataset.path.clone()));
        }
        self.dataset.spec()?;
        if !(self.dataset.train_ratio > 0.0 && self.dataset.train_ratio < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "train_ratio must be in (0, 1), got {}",
                self.dataset.train_ratio
            )));
        }
        self.drain
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.subset
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.backend
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.backend.kind == BackendKind::Replay {
            let cassette = self.backend.cassette.as_ref().expect("validated");
            if !cassette.exists() {
                return Err(ConfigError::MissingFile(cassette.clone()));
            }
        }
        for template in [&self.prompts.template_p1, &self.prompts.template_p2]
            .into_iter()
            .flatten()
        {
            if !template.exists() {
                return Err(ConfigError::MissingFile(template.clone()));
            }
        }
        if self.experiment.window_sizes.is_empty() || self.experiment.window_sizes.contains(&0) {
            return Err(ConfigError::Invalid(
                "experiment.window_sizes must be non-empty with sizes >= 1".into(),
            ));
        }
        if self.prompts.shot_count == 0 {
            return Err(ConfigError::Invalid("shot_count must be at least 1".into()));
        }
        Ok(())
    }

    /// Effective mask rules: explicit list, or the stock defaults.
    pub fn mask_rules(&self) -> Vec<MaskRule> {
        self.mask_rules.clone().unwrap_or_else(default_mask_rules)
    }

    /// The experiment cell for one (prompt, mode, view) choice.
    pub fn experiment_config(
        &self,
        prompt_id: PromptId,
        mode: InjectionMode,
        view: SequenceView,
    ) -> ExperimentConfig {
        ExperimentConfig {
            dataset: self.dataset.name.clone(),
            window_sizes: self.experiment.window_sizes.clone(),
            prompt_id,
            mode,
            view,
            injection_type: self.experiment.injection,
            seed: self.experiment.seed,
            exclude_partial_windows: self.experiment.exclude_partial_windows,
            unparsable_policy: self.experiment.unparsable_policy,
        }
    }

    /// Serialize the effective configuration for provenance.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn minimal_toml(dataset_path: &Path, cassette: Option<&Path>) -> String {
        let backend = match cassette {
            Some(path) => format!(
                "[backend]\nkind = \"replay\"\ncassette = {:?}\n",
                path.display().to_string()
            ),
            None => String::new(),
        };
        format!(
            "[dataset]\nname = \"synthetic\"\npath = {:?}\ncontent_start_index = 2\n\n{backend}",
            dataset_path.display().to_string()
        )
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("logs.txt");
        std::fs::write(&data, "- t1 hello\n").unwrap();
        let cassette = dir.path().join("cassette.jsonl");
        std::fs::write(&cassette, "{\"model_id\":\"m\",\"created_at\":0}\n").unwrap();
        let config_path = dir.path().join("run.toml");
        let mut f = std::fs::File::create(&config_path).unwrap();
        write!(f, "{}", minimal_toml(&data, Some(&cassette))).unwrap();
        let config = RunConfig::load(&config_path).unwrap();
        config.validate().unwrap();
        assert_eq!(config.experiment.window_sizes, vec![10, 20, 30, 40, 50]);
        assert_eq!(config.subset.size, 2000);
        assert_eq!(config.drain.depth, 4);
        assert_eq!(config.backend.model_id, "gpt-3.5-turbo");
        assert_eq!(config.prompts.shot_count, 5);
        assert_eq!(config.output.dir, PathBuf::from("out"));
    }

    #[test]
    fn overrides_beat_config_values() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("logs.txt");
        std::fs::write(&data, "- t1 hello\n").unwrap();
        let config_path = dir.path().join("run.toml");
        std::fs::write(&config_path, minimal_toml(&data, None)).unwrap();
        let mut config = RunConfig::load(&config_path).unwrap();
        config.apply_overrides(&Overrides {
            window_size: Some(25),
            prompt: Some(PromptId::P1),
            mode: Some(InjectionMode::FewShot),
            view: Some(SequenceView::Event),
            seed: Some(99),
            out: Some(PathBuf::from("elsewhere")),
            ..Overrides::default()
        });
        assert_eq!(config.experiment.window_sizes, vec![25]);
        assert_eq!(config.experiment.prompts, vec![PromptId::P1]);
        assert_eq!(config.experiment.modes, vec![InjectionMode::FewShot]);
        assert_eq!(config.experiment.views, vec![SequenceView::Event]);
        assert_eq!(config.subset.seed, 99);
        assert_eq!(config.experiment.seed, 99);
        assert_eq!(config.output.dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn validation_requires_existing_files() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("run.toml");
        std::fs::write(
            &config_path,
            minimal_toml(&dir.path().join("nope.txt"), None),
        )
        .unwrap();
        let config = RunConfig::load(&config_path).unwrap();
        assert!(matches!(
            config.validate(),
            Err(ConfigError::MissingFile(_))
        ));
    }

    #[test]
    fn effective_config_round_trips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("logs.txt");
        std::fs::write(&data, "- t1 hello\n").unwrap();
        let config_path = dir.path().join("run.toml");
        std::fs::write(&config_path, minimal_toml(&data, None)).unwrap();
        let config = RunConfig::load(&config_path).unwrap();
        let echoed = config.to_toml();
        let reparsed: RunConfig = toml::from_str(&echoed).unwrap();
        assert_eq!(reparsed.experiment.window_sizes, config.experiment.window_sizes);
        assert_eq!(reparsed.dataset.name, config.dataset.name);
    }
}

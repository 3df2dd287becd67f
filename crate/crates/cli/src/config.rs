use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use realign_core::corpus::CorpusManifest;
use realign_core::diagnostics::DiagnosticsConfig;
use realign_core::harness::AblationConfig;
use realign_core::oracle::{EndpointConfig, DEFAULT_WHOLE_PAGE_BUDGET};
use realign_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    #[default]
    Synthetic,
    WholePage,
    External,
}

impl Backend {
    /// Directory name under `supervision/`.
    pub fn dir_name(self) -> &'static str {
        match self {
            Backend::Synthetic => "synthetic",
            Backend::WholePage => "whole_page",
            Backend::External => "external",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    #[default]
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub backend: Backend,
    /// Noise rate of synthetic descriptions; the corpus noise rate when unset.
    pub noise_rate: Option<f64>,
    pub whole_page_budget: usize,
    pub seed: u64,
    pub endpoint: EndpointConfig,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            backend: Backend::Synthetic,
            noise_rate: None,
            whole_page_budget: DEFAULT_WHOLE_PAGE_BUDGET,
            seed: 0,
            endpoint: EndpointConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub cutoffs: Vec<usize>,
    pub split: Split,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            cutoffs: vec![5, 10],
            split: Split::Eval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub out: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { out: "out".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the seed of every section when set.
    pub seed: Option<u64>,
    pub corpus: CorpusManifest,
    pub oracle: OracleSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub diagnostics: DiagnosticsConfig,
    pub ablation: AblationConfig,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {}", path.display(), e.message())))
    }

    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.corpus.seed = s;
            self.oracle.seed = s;
            self.train.seed = s;
            self.ablation.supervision_seed = s;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: realign_core::Error| CliError::Usage(e.to_string());
        self.corpus.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.oracle.endpoint.validate().map_err(usage)?;
        if let Some(r) = self.oracle.noise_rate {
            if !(0.0..=1.0).contains(&r) {
                return Err(CliError::Usage(format!("oracle.noise_rate must lie in [0, 1], got {r}")));
            }
        }
        if self.oracle.whole_page_budget == 0 {
            return Err(CliError::Usage("oracle.whole_page_budget must be at least 1".into()));
        }
        if self.eval.cutoffs.is_empty() || self.eval.cutoffs.contains(&0) {
            return Err(CliError::Usage("eval.cutoffs must be a nonempty list of positive integers".into()));
        }
        Ok(())
    }

    pub fn out(&self) -> &Path {
        &self.paths.out
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.out().join("corpus")
    }

    pub fn supervision_dir(&self, backend: Backend) -> PathBuf {
        self.out().join("supervision").join(backend.dir_name())
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.out().join("runs")
    }
}

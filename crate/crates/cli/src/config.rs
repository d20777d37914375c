//! Experiment configuration: a TOML file whose values may be overridden by
//! command-line flags. Precedence is flag > file > built-in default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tdrift_core::corpus::{load_corpus, synth_drift_corpus, Corpus, LoadOptions, Period, SynthParams};
use tdrift_core::eval::{ModelSettings, ProtocolConfig};
use tdrift_core::method::MethodSpec;
use tdrift_core::train::TrainConfig;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSource {
    /// JSONL corpus; takes precedence over `synth`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_labels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period_unit: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthParams>,
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource {
            path: None,
            sidecar: None,
            vocab_size: None,
            n_labels: None,
            period_unit: None,
            synth: Some(SynthParams::default()),
        }
    }
}

impl CorpusSource {
    pub fn load(&self) -> Result<Corpus, CliError> {
        match (&self.path, &self.synth) {
            (Some(path), _) => {
                for p in std::iter::once(path).chain(self.sidecar.as_ref()) {
                    if !p.is_file() {
                        return Err(CliError::Validation(format!(
                            "corpus file `{}` does not exist",
                            p.display()
                        )));
                    }
                }
                let options = LoadOptions {
                    vocab_size: self.vocab_size,
                    n_labels: self.n_labels,
                    sidecar: self.sidecar.clone(),
                    period_unit: self.period_unit,
                };
                Ok(load_corpus(path, &options)?)
            }
            (None, Some(params)) => Ok(synth_drift_corpus(params)?),
            (None, None) => Err(CliError::Validation(
                "corpus needs either `path` or a `synth` section".into(),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProtocolSpec {
    EvalFix { t1: Period, t2: Period },
    EvalStream { start: Period },
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        ProtocolSpec::EvalFix { t1: 7, t2: 8 }
    }
}

/// A method given either by bare name (default hyperparameters) or as a
/// table with a `name` key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum MethodEntry {
    Name(String),
    Spec(MethodSpec),
}

fn deserialize_methods<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<MethodSpec>, D::Error> {
    let entries = Vec::<MethodEntry>::deserialize(d)?;
    entries
        .into_iter()
        .map(|e| match e {
            MethodEntry::Name(n) => MethodSpec::from_name(&n).map_err(serde::de::Error::custom),
            MethodEntry::Spec(s) => Ok(s),
        })
        .collect()
}

fn default_methods() -> Vec<MethodSpec> {
    ["baseline-full", "ift"]
        .iter()
        .map(|n| MethodSpec::from_name(n).expect("registered name"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Worker threads for (method, seed) cells; 0 uses all cores.
    pub workers: usize,
    /// Score ECHR-style tasks with the extra "no positive label" column.
    pub echr_extra_label: bool,
    /// Additive smoothing for the drift report.
    pub drift_smoothing: f64,
    pub ift_warmup_epochs: usize,
    pub corpus: CorpusSource,
    pub protocol: ProtocolSpec,
    pub model: ModelSettings,
    pub train: TrainConfig,
    #[serde(deserialize_with = "deserialize_methods")]
    pub methods: Vec<MethodSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: "experiment".into(),
            output_dir: PathBuf::from("runs"),
            seeds: vec![0, 1, 2],
            workers: 0,
            echr_extra_label: false,
            drift_smoothing: 0.0,
            ift_warmup_epochs: TrainConfig::incremental().warmup_epochs,
            corpus: CorpusSource::default(),
            protocol: ProtocolSpec::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            methods: default_methods(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("invalid configuration: {e}")))
    }

    /// Reads a configuration file. Relative corpus paths are resolved
    /// against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read configuration `{}`: {e}", path.display()))
        })?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.corpus.path, &mut config.corpus.sidecar].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.experiment)
    }

    /// Training settings handed to the protocol drivers.
    pub fn protocol_config(&self) -> ProtocolConfig {
        let mut train = self.train.clone();
        train.eval.extra_label = self.echr_extra_label;
        ProtocolConfig {
            model: self.model.clone(),
            train,
            ift_warmup_epochs: self.ift_warmup_epochs,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if matches!(self.experiment.as_str(), "" | "." | "..")
            || self
                .experiment
                .chars()
                .any(|c| !(c.is_ascii_alphanumeric() || "-_.".contains(c)))
        {
            return Err(CliError::Validation(format!(
                "experiment name `{}` must be non-empty and use only [A-Za-z0-9._-]",
                self.experiment
            )));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Validation("at least one seed is required".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(CliError::Validation("seeds must be distinct".into()));
        }
        if self.methods.is_empty() {
            return Err(CliError::Validation("at least one method is required".into()));
        }
        let mut names: Vec<&str> = self.methods.iter().map(MethodSpec::name).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.methods.len() {
            return Err(CliError::Validation("each method may appear only once".into()));
        }
        if self.drift_smoothing < 0.0 {
            return Err(CliError::Validation("drift_smoothing must be >= 0".into()));
        }
        self.protocol_config().validate(&self.methods)?;
        Ok(())
    }
}

/// Values given on the command line; `None` leaves the file value alone.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Configuration file (TOML).
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// JSONL corpus (replaces the configured corpus).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Sidecar vocabulary for the corpus.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Experiment name (subdirectory of the output directory).
    #[arg(long)]
    pub experiment: Option<String>,
    #[arg(short, long)]
    pub output_dir: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Comma-separated method names, default hyperparameters.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Fixed split boundaries `T1,T2`.
    #[arg(long, value_delimiter = ',', value_name = "T1,T2", conflicts_with = "stream_start")]
    pub eval_fix: Option<Vec<Period>>,
    /// Streaming evaluation starting at this period.
    #[arg(long)]
    pub stream_start: Option<Period>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub echr_extra_label: bool,
}

impl Overrides {
    /// The file configuration (or defaults) with flags applied.
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(path) = &self.corpus {
            c.corpus = CorpusSource {
                path: Some(path.clone()),
                synth: None,
                ..c.corpus
            };
        }
        if let Some(path) = &self.sidecar {
            c.corpus.sidecar = Some(path.clone());
        }
        if let Some(v) = &self.experiment {
            c.experiment = v.clone();
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(v) = &self.seeds {
            c.seeds = v.clone();
        }
        if let Some(names) = &self.methods {
            c.methods = names
                .iter()
                .map(|n| MethodSpec::from_name(n.trim()))
                .collect::<Result<_, _>>()?;
        }
        if let Some(v) = &self.eval_fix {
            if v.len() != 2 {
                return Err(CliError::Validation("--eval-fix takes exactly two periods, `T1,T2`".into()));
            }
            c.protocol = ProtocolSpec::EvalFix { t1: v[0], t2: v[1] };
        }
        if let Some(start) = self.stream_start {
            c.protocol = ProtocolSpec::EvalStream { start };
        }
        if let Some(v) = self.workers {
            c.workers = v;
        }
        if let Some(v) = self.max_epochs {
            c.train.max_epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.train.optimizer.lr = v;
        }
        if self.echr_extra_label {
            c.echr_extra_label = true;
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
    }

    #[test]
    fn methods_by_name_or_table() {
        let c = ExperimentConfig::from_toml(
            r#"
            methods = ["ift", { name = "ewc", lambda = 2.0 }]
            [protocol]
            kind = "eval-stream"
            start = 3
            "#,
        )
        .unwrap();
        assert_eq!(c.methods[0], MethodSpec::Ift);
        assert_eq!(c.methods[1].name(), "ewc");
        assert_eq!(c.protocol, ProtocolSpec::EvalStream { start: 3 });
        assert!(ExperimentConfig::from_toml("methods = [\"nope\"]").is_err());
        assert!(ExperimentConfig::from_toml("unknown_key = 1").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "seeds = [4, 5]\nexperiment = \"a\"\n[train]\nmax_epochs = 7\n").unwrap();
        let o = Overrides {
            config: Some(path),
            seeds: Some(vec![9]),
            ..Overrides::default()
        };
        let c = o.resolve().unwrap();
        assert_eq!(c.seeds, vec![9]);
        assert_eq!(c.experiment, "a");
        assert_eq!(c.train.max_epochs, 7);
    }

    #[test]
    fn relative_corpus_path_follows_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "[corpus]\npath = \"data.jsonl\"\n").unwrap();
        let c = ExperimentConfig::from_file(&path).unwrap();
        assert_eq!(c.corpus.path.unwrap(), dir.path().join("data.jsonl"));
    }

    #[test]
    fn validation_errors() {
        let mut c = ExperimentConfig::default();
        c.seeds = vec![1, 1];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.experiment = "../x".into();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.methods.push(MethodSpec::Ift);
        assert!(c.validate().is_err());
    }
}

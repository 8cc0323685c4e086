use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tapslf::adapters::AdapterConfig;
use tapslf::encoder::EncoderConfig;
use tapslf::heads::HeadConfig;
use tapslf::training::{DataConfig, FinetuneConfig, PretrainConfig, TrainConfig};
use tapslf::ExecMode;

/// A configuration or usage problem; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// On-disk run description. Every field has a default, unknown keys are
/// rejected, and the resolved document is written into each run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    pub output_dir: PathBuf,
    /// Pretrained backbone checkpoint; `None` fine-tunes from the random
    /// initialization.
    pub backbone: Option<PathBuf>,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub heads: HeadConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub exec: ExecMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            run_name: "run".into(),
            output_dir: PathBuf::from("runs"),
            backbone: None,
            seed: t.seed,
            encoder: t.encoder,
            adapter: t.adapter,
            heads: t.heads,
            data: t.data,
            pretrain: t.pretrain,
            finetune: t.finetune,
            exec: t.exec,
        }
    }
}

impl RunConfig {
    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            encoder: self.encoder.clone(),
            adapter: self.adapter.clone(),
            heads: self.heads.clone(),
            data: self.data.clone(),
            pretrain: self.pretrain.clone(),
            finetune: self.finetune.clone(),
            exec: self.exec,
        }
    }

    pub fn set_train(&mut self, t: TrainConfig) {
        self.seed = t.seed;
        self.encoder = t.encoder;
        self.adapter = t.adapter;
        self.heads = t.heads;
        self.data = t.data;
        self.pretrain = t.pretrain;
        self.finetune = t.finetune;
        self.exec = t.exec;
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_name)
    }

    /// Parses `text`; syntax and schema errors name `origin`, the line and
    /// the column, and quote the offending line.
    pub fn parse(text: &str, origin: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            let (line, col) = (e.line(), e.column());
            let quoted = text.lines().nth(line.saturating_sub(1)).unwrap_or("");
            usage(format!("{origin}:{line}:{col}: {e}\n  | {quoted}"))
        })?;
        cfg.train()
            .validate()
            .map_err(|e| usage(format!("{origin}: {e}")))?;
        if cfg.run_name.is_empty() || cfg.run_name.contains(['/', '\\']) {
            return Err(usage(format!("{origin}: run_name must be a plain, non-empty name")));
        }
        Ok(cfg)
    }

    /// Loads a config file; `None` yields the defaults.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::parse("{}", "x").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip_is_exact() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_json(), "x").unwrap(), c);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::parse("{\n  \"seed\": 1,\n  \"sede\": 2\n}", "cfg.json").unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("cfg.json:3:"), "{msg}");
        assert!(msg.contains("sede"));
        assert!(err.downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn nested_unknown_key_is_rejected() {
        assert!(RunConfig::parse("{\"adapter\": {\"rnak\": 4}}", "x").is_err());
    }

    #[test]
    fn semantic_errors_are_usage_errors() {
        let err = RunConfig::parse("{\"adapter\": {\"frozen_ratio\": 1.3}}", "x").unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }
}

//! Run and pre-training configuration.
//!
//! Config files are TOML: `key = value` lines grouped under `[section]`
//! headers. Unknown keys are rejected.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backbone::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{AdapterConfig, TuningMode};
use crate::optim::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub embed_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { embed_dim: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Peak rate of the SV backend group.
    pub lr_head: f64,
    /// Peak rate of every other trainable parameter.
    pub lr_other: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    /// Desk-scale schedule; keeps the 50:1 head-to-other rate ratio.
    fn default() -> Self {
        let adam = AdamConfig::default();
        OptimConfig {
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            lr_head: 5e-3,
            lr_other: 1e-4,
            warmup_steps: 200,
            total_steps: 2000,
            batch_size: 16,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return fail("adam eps must be positive");
        }
        if ![self.lr_head, self.lr_other].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return fail("learning rates must be finite and non-negative");
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return fail("total_steps and batch_size must be positive");
        }
        if self.warmup_steps > self.total_steps {
            return fail("warmup_steps exceeds total_steps");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: TuningMode,
    pub seed: u64,
    pub encoder: EncoderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterConfig>,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    /// Desk defaults for `mode`; inner-adapter modes get the desk adapter
    /// (sequential for houlsby).
    pub fn desk(mode: TuningMode) -> Self {
        let adapter = mode.has_inner().then(|| {
            let mut a = AdapterConfig::desk();
            if mode == TuningMode::Houlsby {
                a.variant = crate::adapters::AdapterVariant::Sequential;
            }
            a
        });
        RunConfig {
            mode,
            seed: 1,
            encoder: EncoderConfig::desk(),
            adapter,
            head: HeadConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.optim.validate()?;
        if self.head.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        match (&self.adapter, self.mode.has_inner()) {
            (Some(_), false) => Err(Error::Config(format!(
                "adapter config present in {} mode, which inserts no inner adapters",
                self.mode
            ))),
            (None, true) => Err(Error::Config(format!("{} mode needs an [adapter] section", self.mode))),
            (Some(a), true) => {
                a.validate(self.encoder.hidden_dim)?;
                if self.mode == TuningMode::Houlsby && a.variant != crate::adapters::AdapterVariant::Sequential {
                    return Err(Error::Config("houlsby adapters are sequential".into()));
                }
                Ok(())
            }
            (None, false) => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        to_text(self)
    }

    pub fn from_text(text: &str, path: &str) -> Result<Self> {
        let cfg: RunConfig = from_text(text, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            seed: 1,
            steps: 400,
            warmup_steps: 40,
            batch_size: 16,
            lr: 2e-3,
            encoder: EncoderConfig::desk(),
            data: DataConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::Config("warmup_steps exceeds steps".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        to_text(self)
    }

    pub fn from_text(text: &str, path: &str) -> Result<Self> {
        let cfg: PretrainConfig = from_text(text, path)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn to_text<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("config types serialize to TOML")
}

fn from_text<T: DeserializeOwned>(text: &str, path: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
            .unwrap_or(0);
        Error::Parse {
            path: path.to_string(),
            line,
            msg: e.message().to_string(),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::ScaleSetting;

    #[test]
    fn round_trips_every_mode() {
        for mode in TuningMode::ALL {
            let mut cfg = RunConfig::desk(mode);
            cfg.data.corpus = Some("corpus.txt".into());
            cfg.optim.lr_head = 1.0 / 3.0;
            let text = cfg.to_text();
            let back = RunConfig::from_text(&text, "cfg").unwrap();
            assert_eq!(back, cfg, "{text}");
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn text_has_sections() {
        let mut cfg = RunConfig::desk(TuningMode::Inner);
        if let Some(a) = cfg.adapter.as_mut() {
            a.scale = ScaleSetting::Learnable(1.0);
        }
        let text = cfg.to_text();
        assert!(text.starts_with("mode = \"inner\""), "{text}");
        for section in ["[encoder]", "[adapter]", "[head]", "[optim]"] {
            assert!(text.contains(section), "{text}");
        }
        assert!(text.contains("scale = \"learnable\""), "{text}");
    }

    #[test]
    fn adapter_section_in_linear_probe_is_rejected() {
        let mut cfg = RunConfig::desk(TuningMode::LinearProbe);
        cfg.adapter = Some(AdapterConfig::desk());
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let text = cfg.to_text();
        assert!(matches!(RunConfig::from_text(&text, "c"), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let text = RunConfig::desk(TuningMode::Inter).to_text().replace("[head]", "[head]\ncolour = 3");
        let line = text.lines().position(|l| l.starts_with("colour")).unwrap() + 1;
        match RunConfig::from_text(&text, "run.toml") {
            Err(Error::Parse { line: l, path, .. }) => {
                assert_eq!((l, path.as_str()), (line, "run.toml"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut cfg = RunConfig::desk(TuningMode::Inter);
        cfg.optim.warmup_steps = cfg.optim.total_steps + 1;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::desk(TuningMode::Inner);
        cfg.adapter.as_mut().unwrap().bottleneck = 64;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn pretrain_config_round_trips() {
        let cfg = PretrainConfig::default();
        assert_eq!(PretrainConfig::from_text(&cfg.to_text(), "p").unwrap(), cfg);
    }
}

//! TOML run configuration. Every knob has a default; unknown keys are
//! rejected so typos fail loudly before any command runs. Flags given on
//! the command line win over file values.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;

use corerag::backend::{HttpBackendConfig, PromptTemplates};
use corerag::eval::EvalConfig;
use corerag::trainer::TrainConfig;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplatesSection {
    /// Override file for the compressor prompt template.
    pub compressor_path: Option<PathBuf>,
    /// Override file for the answerer prompt template.
    pub answerer_path: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub select_k: usize,
    pub temperature: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            select_k: 3,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub backend: HttpBackendConfig,
    pub templates: TemplatesSection,
    pub trainer: TrainConfig,
    pub policy: PolicySection,
    pub eval: EvalConfig,
}

impl GlobalConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let cfg = match path {
            Some(p) => {
                let raw = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&raw).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.trainer.validate().context("trainer config")?;
        if self.backend.base_url.is_empty() {
            bail!("backend.base_url must be non-empty");
        }
        if self.policy.temperature <= 0.0 {
            bail!("policy.temperature must be > 0");
        }
        if self.eval.k == 0 {
            bail!("eval.k must be >= 1");
        }
        Ok(())
    }

    pub fn templates(&self) -> anyhow::Result<PromptTemplates> {
        Ok(PromptTemplates::from_files(
            self.templates.compressor_path.as_deref(),
            self.templates.answerer_path.as_deref(),
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_load_without_file() {
        let cfg = GlobalConfig::load(None).unwrap();
        assert_eq!(cfg.trainer.grpo.group_size, 5);
        assert_eq!(cfg.trainer.grpo.kl_coeff, 0.001);
        assert_eq!(cfg.trainer.grpo.learning_rate, 1e-5);
        assert_eq!(cfg.trainer.batch_size, 256);
        assert_eq!(cfg.trainer.epochs, 2);
        assert_eq!(cfg.trainer.reward.alpha, 0.3);
        assert_eq!(cfg.policy.select_k, 3);
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(
            f,
            "[trainer]\nbatch_size = 16\niterations = 300\nseed = 42\n\n\
             [trainer.grpo]\nlearning_rate = 0.05\n\n\
             [policy]\nselect_k = 1\n"
        )
        .unwrap();
        let cfg = GlobalConfig::load(Some(f.path())).unwrap();
        assert_eq!(cfg.trainer.batch_size, 16);
        assert_eq!(cfg.trainer.iterations, Some(300));
        assert_eq!(cfg.trainer.grpo.learning_rate, 0.05);
        // untouched defaults survive
        assert_eq!(cfg.trainer.grpo.kl_coeff, 0.001);
        assert_eq!(cfg.policy.select_k, 1);
        assert_eq!(cfg.policy.temperature, 1.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "[trainer]\nbatch_sizee = 16\n").unwrap();
        assert!(GlobalConfig::load(Some(f.path())).is_err());
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "[trainr]\nbatch_size = 16\n").unwrap();
        assert!(GlobalConfig::load(Some(f.path())).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "[trainer.reward]\nalpha = 1.5\n").unwrap();
        assert!(GlobalConfig::load(Some(f.path())).is_err());
    }
}

use std::path::{Path, PathBuf};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::seq2seq_model::{Hyperparams, Profile};
use crate::synth_corpus::GenParams;
use crate::template_store::{default_mask_rules, MaskRule, MaskRuleSet};

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ModelConfig {
    /// When set, overrides `embed_dim`, `hidden_dim` and `batch_size`.
    pub profile: Option<Profile>,
    #[serde(flatten)]
    pub hyper: Hyperparams,
}

// `#[serde(flatten)]` would bypass `deny_unknown_fields` on the inner struct,
// so `profile` is split off by hand and the rest parsed strictly.
impl<'de> Deserialize<'de> for ModelConfig {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let mut map = serde_json::Map::deserialize(d)?;
        let profile = match map.remove("profile") {
            Some(v) => serde_json::from_value(v).map_err(D::Error::custom)?,
            None => None,
        };
        let hyper = serde_json::from_value(serde_json::Value::Object(map)).map_err(D::Error::custom)?;
        Ok(ModelConfig { profile, hyper })
    }
}

impl ModelConfig {
    pub fn resolved(&self) -> Hyperparams {
        match self.profile {
            Some(p) => self.hyper.clone().with_profile(p),
            None => self.hyper.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub report_dir: PathBuf,
    pub template_store: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus_dir: "corpus".into(),
            checkpoint: "model/model.ckpt".into(),
            report_dir: "reports".into(),
            template_store: "templates.tsv".into(),
        }
    }
}

impl Paths {
    /// Resolves every relative path against `base`.
    pub fn rebased(&self, base: &Path) -> Paths {
        let f = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        Paths {
            corpus_dir: f(&self.corpus_dir),
            checkpoint: f(&self.checkpoint),
            report_dir: f(&self.report_dir),
            template_store: f(&self.template_store),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub gen: GenParams,
    pub model: ModelConfig,
    pub paths: Paths,
    pub mask_rules: Vec<MaskRule>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            gen: GenParams::default(),
            model: ModelConfig::default(),
            paths: Paths::default(),
            mask_rules: default_mask_rules(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.model.resolved().validate()?;
        MaskRuleSet::new(self.mask_rules.clone())?;
        Ok(())
    }

    pub fn mask_rule_set(&self) -> Result<MaskRuleSet> {
        MaskRuleSet::new(self.mask_rules.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("config", e))
    }
}

/// Parses and validates a config document. Missing keys take defaults.
pub fn parse_config_str(text: &str) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::json("config", e))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: PipelineConfig =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    cfg.validate()?;
    Ok(cfg)
}

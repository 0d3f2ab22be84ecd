//! Run configuration files and seed resolution.

use std::fs;
use std::path::Path;

use cobra_core::contrastive::{ModelConfig, TrainConfig};
use cobra_core::encoder::InferenceMode;
use cobra_core::eval::{MlpEvalConfig, ProbeConfig};
use cobra_core::feature_store::{ExtractorSpec, SyntheticGenConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "COBRA_LITE_SEED";

/// One file can drive every subcommand; each reads only its own section.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub generate: Option<GenerateSection>,
    pub model: Option<ModelConfig>,
    pub pretrain: Option<TrainConfig>,
    pub embed: Option<EmbedSection>,
    pub mlp: Option<MlpEvalConfig>,
    pub probe: Option<ProbeConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub extractors: Vec<ExtractorSpec>,
    pub magnifications: Vec<f64>,
    pub synthetic: SyntheticGenConfig,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection {
            extractors: vec![ExtractorSpec::new("fm-a", 768, 1), ExtractorSpec::new("fm-b", 1024, 2)],
            magnifications: vec![0.5, 2.0],
            synthetic: SyntheticGenConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedSection {
    pub mode: Option<InferenceMode>,
    pub payload_extractor: Option<String>,
    pub magnification: Option<f64>,
}

/// Section paths whose `seed` key would shadow the global seed.
const SECTION_SEEDS: [&[&str]; 4] = [&["generate", "synthetic"], &["pretrain"], &["mlp"], &["probe"]];

fn parse_value(text: &str, path: &Path) -> Result<serde_json::Value, CliError> {
    let is_json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
    if is_json {
        serde_json::from_str(text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }
}

impl RunConfig {
    /// Loads TOML, or JSON when the extension is `.json` or the text starts
    /// with `{`. Unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::missing(format!("config file {} not found", path.display()))
            } else {
                CliError::other(format!("{}: {e}", path.display()))
            }
        })?;
        let value = parse_value(&text, path)?;
        for section in SECTION_SEEDS {
            let mut v = &value;
            for key in section {
                v = &v[*key];
            }
            if v.get("seed").is_some() {
                return Err(CliError::config(format!(
                    "`{}.seed` is not allowed; set `seed` at the top level",
                    section.join(".")
                )));
            }
        }
        serde_json::from_value(value).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Flag,
    Config,
    Env,
    Default,
}

/// `--seed` flag, then the file's top-level `seed`, then `COBRA_LITE_SEED`,
/// then 0.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>, env: Option<&str>) -> Result<(u64, SeedSource), CliError> {
    if let Some(s) = flag {
        return Ok((s, SeedSource::Flag));
    }
    if let Some(s) = file {
        return Ok((s, SeedSource::Config));
    }
    if let Some(raw) = env {
        let s = raw
            .trim()
            .parse()
            .map_err(|_| CliError::config(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
        return Ok((s, SeedSource::Env));
    }
    Ok((0, SeedSource::Default))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(1), Some(2), Some("3")).unwrap(), (1, SeedSource::Flag));
        assert_eq!(resolve_seed(None, Some(2), Some("3")).unwrap(), (2, SeedSource::Config));
        assert_eq!(resolve_seed(None, None, Some("3")).unwrap(), (3, SeedSource::Env));
        assert_eq!(resolve_seed(None, None, None).unwrap(), (0, SeedSource::Default));
        assert_eq!(resolve_seed(None, None, Some("x")).unwrap_err().code, 2);
    }

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("a.toml");
        let j = dir.path().join("a.json");
        fs::write(&t, "seed = 4\n[pretrain]\nbatch_size = 8\nepochs = 3\n").unwrap();
        fs::write(&j, r#"{"seed": 4, "pretrain": {"batch_size": 8, "epochs": 3}}"#).unwrap();
        let (a, b) = (RunConfig::load(&t).unwrap(), RunConfig::load(&j).unwrap());
        assert_eq!(a.pretrain, b.pretrain);
        assert_eq!(a.pretrain.unwrap().batch_size, 8);
    }

    #[test]
    fn unknown_keys_and_section_seeds_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "[pretrain]\nbatchsize = 8\n").unwrap();
        assert_eq!(RunConfig::load(&p).unwrap_err().code, 2);
        fs::write(&p, "[pretrain]\nseed = 8\n").unwrap();
        assert!(RunConfig::load(&p).unwrap_err().message.contains("pretrain.seed"));
        assert_eq!(RunConfig::load(&dir.path().join("none.toml")).unwrap_err().code, 3);
    }
}

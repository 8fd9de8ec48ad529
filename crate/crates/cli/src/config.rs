use crate::CliError;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use tab_core::data::DatasetSpec;
use tab_core::downstream::{PadimConfig, ProbeConfig};
use tab_core::prompts::PromptSetting;
use tab_core::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptOptions {
    pub setting: PromptSetting,
    /// Defaults to the backbone embedding width.
    pub dim: Option<usize>,
    pub encoder_seed: u64,
    /// Directory with `templates.txt`, `states_normal.txt`,
    /// `states_abnormal.txt` and optionally `classes.txt`/`keywords.txt`.
    pub assets: Option<PathBuf>,
    pub classes: Vec<String>,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            setting: PromptSetting::IndustrialAssociation,
            dim: None,
            encoder_seed: 0,
            assets: None,
            classes: vec![],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationOptions {
    pub axis: Option<String>,
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    pub random_baseline: bool,
}

/// Everything a `--config` file may set. Command-line flags win.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    /// Overrides every component seed when present.
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub padim: PadimConfig,
    pub probe: ProbeConfig,
    pub prompts: PromptOptions,
    pub ablation: AblationOptions,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Pushes a resolved seed into every seeded component.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.train.seed = s;
            self.probe.seed = s;
        }
    }
}

/// `flag`, else the file value, else an error naming the flag.
pub fn required(flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| file.clone()).ok_or_else(|| CliError::Config(format!("--{name} is required")))
}

pub fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| CliError::Config(format!("{what} `{s}`: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: FileConfig = serde_json::from_str(r#"{"seed": 3, "train": {"epochs": 2}, "padim": {"sigma": 2.0}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.padim.sigma, 2.0);
        assert_eq!(cfg.dataset, DatasetSpec::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<FileConfig>(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn flag_seed_beats_file_seed() {
        let mut cfg = FileConfig {
            seed: Some(4),
            ..FileConfig::default()
        };
        cfg.apply_seed(Some(9));
        assert_eq!((cfg.train.seed, cfg.probe.seed), (9, 9));
        let mut cfg = FileConfig {
            seed: Some(4),
            ..FileConfig::default()
        };
        cfg.apply_seed(None);
        assert_eq!(cfg.train.seed, 4);
    }

    #[test]
    fn lists_parse() {
        assert_eq!(parse_list::<usize>("1, 2", "stage").unwrap(), [1, 2]);
        assert!(parse_list::<usize>("1,x", "stage").is_err());
    }
}

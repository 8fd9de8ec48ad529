//! Prompt ensembles, text encoders and the frozen embedding bank.

mod bank;
mod encoder;

pub use bank::{load_bank, save_bank, sidecar_path, BankSidecar, EmbeddingBank, Provenance};
pub use encoder::{pool_class_embedding, PseudoTextEncoder, TextEncoder};

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("prompt config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bank format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("encoding \"{sentence}\": {detail}")]
    Encoder { sentence: String, detail: String },
}

pub type Result<T> = std::result::Result<T, PromptError>;

pub const STATE: &str = "{state}";
pub const CLASS: &str = "{class}";

pub const DEFAULT_TEMPLATES: [&str; 7] = [
    "A photo of a {state} {class}.",
    "A cropped photo of a {state} {class}.",
    "A close-up photo of a {state} {class}.",
    "A bright photo of a {state} {class}.",
    "A dark photo of a {state} {class}.",
    "A blurry photo of a {state} {class}.",
    "There is a {state} {class} in the scene.",
];
pub const DEFAULT_NORMAL_STATES: [&str; 3] = ["perfect", "unblemished", "flawless"];
pub const DEFAULT_ABNORMAL_STATES: [&str; 4] = ["blemished", "damaged", "defective", "anomalous"];
pub const DEFAULT_KEYWORDS: [&str; 2] = ["industrial", "manufacturing"];

/// Cumulative prompt-design ladder used by the prompt ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSetting {
    /// Bare class name on both sides; the anchors coincide.
    OneClass,
    /// "normal <class>" against "anomalous <class>".
    TwoClass,
    /// Full state word lists, single bare template.
    StateEnsemble,
    /// State lists crossed with the photo templates.
    ClipTemplate,
    /// Templates and states with industrial keywords before the class name.
    IndustrialAssociation,
}

impl PromptSetting {
    pub const ALL: [PromptSetting; 5] = [
        Self::OneClass,
        Self::TwoClass,
        Self::StateEnsemble,
        Self::ClipTemplate,
        Self::IndustrialAssociation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::OneClass => "one_class",
            Self::TwoClass => "two_class",
            Self::StateEnsemble => "state_ensemble",
            Self::ClipTemplate => "clip_template",
            Self::IndustrialAssociation => "industrial_association",
        }
    }

    pub fn assets(self) -> PromptAssets {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let bare = vec!["{state} {class}".to_string()];
        match self {
            Self::OneClass => PromptAssets {
                templates: bare,
                normal_states: vec![String::new()],
                abnormal_states: vec![String::new()],
                keywords: vec![],
            },
            Self::TwoClass => PromptAssets {
                templates: bare,
                normal_states: own(&["normal"]),
                abnormal_states: own(&["anomalous"]),
                keywords: vec![],
            },
            Self::StateEnsemble => PromptAssets {
                templates: bare,
                normal_states: own(&DEFAULT_NORMAL_STATES),
                abnormal_states: own(&DEFAULT_ABNORMAL_STATES),
                keywords: vec![],
            },
            Self::ClipTemplate => PromptAssets {
                keywords: vec![],
                ..PromptAssets::default()
            },
            Self::IndustrialAssociation => PromptAssets::default(),
        }
    }
}

impl std::str::FromStr for PromptSetting {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| PromptError::Config(format!("unknown prompt setting `{s}`")))
    }
}

/// Templates, state words and keywords from which sentences are expanded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptAssets {
    pub templates: Vec<String>,
    pub normal_states: Vec<String>,
    pub abnormal_states: Vec<String>,
    /// Cycled per sentence in front of the class name; empty disables.
    pub keywords: Vec<String>,
}

impl Default for PromptAssets {
    fn default() -> Self {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Self {
            templates: own(&DEFAULT_TEMPLATES),
            normal_states: own(&DEFAULT_NORMAL_STATES),
            abnormal_states: own(&DEFAULT_ABNORMAL_STATES),
            keywords: own(&DEFAULT_KEYWORDS),
        }
    }
}

/// Non-empty, trimmed lines of a UTF-8 file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

impl PromptAssets {
    /// Reads `templates.txt`, `states_normal.txt`, `states_abnormal.txt` and
    /// the optional `keywords.txt` from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let keywords = dir.join("keywords.txt");
        let assets = Self {
            templates: read_lines(&dir.join("templates.txt"))?,
            normal_states: read_lines(&dir.join("states_normal.txt"))?,
            abnormal_states: read_lines(&dir.join("states_abnormal.txt"))?,
            keywords: if keywords.exists() { read_lines(&keywords)? } else { vec![] },
        };
        assets.validate()?;
        Ok(assets)
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() || self.normal_states.is_empty() || self.abnormal_states.is_empty() {
            return Err(PromptError::Config("templates and both state lists must be nonempty".into()));
        }
        for t in &self.templates {
            if !t.contains(STATE) || !t.contains(CLASS) {
                return Err(PromptError::Config(format!("template \"{t}\" lacks {STATE} or {CLASS}")));
            }
        }
        Ok(())
    }
}

fn collapse_spaces(s: &str) -> String {
    let mut out = s.split_whitespace().collect::<Vec<_>>().join(" ");
    // "{state} {class}." with an empty state would leave " ." behind
    for p in [" .", " ,"] {
        out = out.replace(p, &p[1..]);
    }
    out
}

fn expand_side(class_name: &str, assets: &PromptAssets, states: &[String]) -> Vec<String> {
    let label = class_name.replace('_', " ");
    let mut out = Vec::with_capacity(assets.templates.len() * states.len());
    for t in &assets.templates {
        for s in states {
            let i = out.len();
            let subject = match assets.keywords.is_empty() {
                true => label.clone(),
                false => format!("{} {label}", assets.keywords[i % assets.keywords.len()]),
            };
            out.push(collapse_spaces(&t.replace(STATE, s).replace(CLASS, &subject)));
        }
    }
    out
}

/// Templates × states for each side. Underscores in the class name read as
/// spaces.
pub fn expand_prompts(class_name: &str, assets: &PromptAssets) -> Result<(Vec<String>, Vec<String>)> {
    if class_name.trim().is_empty() {
        return Err(PromptError::Config("class name is empty".into()));
    }
    assets.validate()?;
    Ok((
        expand_side(class_name, assets, &assets.normal_states),
        expand_side(class_name, assets, &assets.abnormal_states),
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPrompts {
    pub name: String,
    pub normal: Vec<String>,
    pub abnormal: Vec<String>,
}

/// Sentence lists for every class; also the JSON handed to external text
/// encoders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBook {
    pub schema: String,
    pub setting: Option<PromptSetting>,
    pub assets: PromptAssets,
    pub classes: Vec<ClassPrompts>,
}

impl PromptBook {
    pub fn build(class_names: &[String], assets: &PromptAssets, setting: Option<PromptSetting>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(PromptError::Config("no classes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let classes = class_names
            .iter()
            .map(|name| {
                if !seen.insert(name.as_str()) {
                    return Err(PromptError::Config(format!("class `{name}` listed twice")));
                }
                let (normal, abnormal) = expand_prompts(name, assets)?;
                Ok(ClassPrompts {
                    name: name.clone(),
                    normal,
                    abnormal,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            schema: crate::SCHEMA.to_string(),
            setting,
            assets: assets.clone(),
            classes,
        })
    }

    pub fn for_setting(class_names: &[String], setting: PromptSetting) -> Result<Self> {
        Self::build(class_names, &setting.assets(), Some(setting))
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prompt book serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let book: Self = serde_json::from_str(text).map_err(|e| PromptError::Config(format!("prompt JSON: {e}")))?;
        if book.classes.iter().any(|c| c.normal.is_empty() || c.abnormal.is_empty()) {
            return Err(PromptError::Config("every class needs normal and abnormal sentences".into()));
        }
        Ok(book)
    }

    /// Pools every class's sentences with `encoder` into a bank.
    pub fn embed(&self, encoder: &dyn TextEncoder, provenance: Provenance) -> Result<EmbeddingBank> {
        let dim = encoder.dim();
        let mut normal = Vec::with_capacity(self.classes.len() * dim);
        let mut abnormal = Vec::with_capacity(self.classes.len() * dim);
        for c in &self.classes {
            normal.extend(pool_class_embedding(&c.normal, encoder)?);
            abnormal.extend(pool_class_embedding(&c.abnormal, encoder)?);
        }
        EmbeddingBank::new(self.class_names(), dim, normal, abnormal, provenance)
    }
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::layout::{Canvas, LayoutConfig};
use crate::policy::{PlanningMode, PolicyConfig};
use crate::tools::{EndpointTarget, FaultInjector, ToolEndpoint, ToolKind};
use crate::vocab::Lexicon;

/// How a prompt is decomposed at session creation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecomposeMode {
    /// Language model first, rule grammar on failure.
    #[default]
    Auto,
    Llm,
    Rules,
}

impl DecomposeMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "auto" => Some(Self::Auto),
            "llm" => Some(Self::Llm),
            "rules" | "rule" => Some(Self::Rules),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LexiconPaths {
    pub attributes: Option<PathBuf>,
    pub relations: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointOverride {
    pub url: Option<String>,
    pub mock: bool,
    pub timeout_ms: Option<u64>,
    pub max_retries: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolsConfig {
    /// Base URL; each kind is served at `{base_url}` plus its route.
    pub base_url: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: Vec<u64>,
    /// Per-kind settings keyed by kind name (`verify`, `local_edit`, ...).
    pub overrides: BTreeMap<String, EndpointOverride>,
}

impl Default for ToolsConfig {
    fn default() -> Self {
        Self { base_url: None, timeout_ms: 60_000, max_retries: 2, backoff_ms: vec![100, 400], overrides: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    /// Object index (as a string key) to the color the mock renders instead.
    pub faults: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub seed: u64,
    /// Serve every tool from the in-process mock suite.
    pub mock: bool,
    pub storage_root: PathBuf,
    pub decompose: DecomposeMode,
    pub planning_mode: PlanningMode,
    /// Parallel tool calls during concept generation and suite runs.
    pub fanout: usize,
    /// Pass images to tools as file paths instead of inline PNG.
    pub share_filesystem: bool,
    pub canvas: Canvas,
    pub layout: LayoutConfig,
    pub guidance: GuidanceConfig,
    pub policy: PolicyConfig,
    pub lexicon: LexiconPaths,
    pub tools: ToolsConfig,
    pub mock_tools: MockConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mock: true,
            storage_root: PathBuf::from("sessions"),
            decompose: DecomposeMode::Auto,
            planning_mode: PlanningMode::Agent,
            fanout: 4,
            share_filesystem: false,
            canvas: Canvas::default(),
            layout: LayoutConfig::default(),
            guidance: GuidanceConfig::default(),
            policy: PolicyConfig::default(),
            lexicon: LexiconPaths::default(),
            tools: ToolsConfig::default(),
            mock_tools: MockConfig::default(),
        }
    }
}

fn parse_env<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: EngineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `SCENECRAFT_*` overrides from an environment listing.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        for (key, value) in vars {
            let Some(name) = key.strip_prefix("SCENECRAFT_") else { continue };
            match name {
                "SEED" => self.seed = parse_env(&key, &value)?,
                "MOCK" => self.mock = parse_bool(&key, &value)?,
                "STORAGE_ROOT" => self.storage_root = PathBuf::from(value),
                "TOOLS_URL" => self.tools.base_url = Some(value),
                "FANOUT" => self.fanout = parse_env(&key, &value)?,
                "MAX_EDIT_ROUNDS" => self.policy.max_edit_rounds = parse_env(&key, &value)?,
                "IMAGES_PER_CONCEPT" => self.policy.images_per_concept = parse_env(&key, &value)?,
                "SELF_CORRECTION" => self.policy.self_correction = parse_bool(&key, &value)?,
                "DECOMPOSE" => {
                    self.decompose = DecomposeMode::parse(&value)
                        .ok_or_else(|| Error::Config(format!("{key}: unknown mode {value:?}")))?
                }
                "PLANNING_MODE" => {
                    self.planning_mode = serde_json::from_value(serde_json::Value::String(value.clone()))
                        .map_err(|_| Error::Config(format!("{key}: unknown mode {value:?}")))?
                }
                _ => tracing::debug!(key, "ignoring unknown override"),
            }
        }
        self.check()
    }

    pub fn check(&self) -> Result<()> {
        self.guidance.grid_for(self.canvas).map_err(|e| Error::Config(e.to_string()))?;
        if self.fanout == 0 {
            return Err(Error::Config("fanout must be positive".into()));
        }
        if self.policy.images_per_concept == 0 {
            return Err(Error::Config("images_per_concept must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.layout.overlap_threshold) {
            return Err(Error::Config("overlap_threshold must lie in [0, 1]".into()));
        }
        for key in self.tools.overrides.keys() {
            if ToolKind::ALL.iter().all(|k| k.name() != key) {
                return Err(Error::Config(format!("unknown tool kind {key:?} in overrides")));
            }
        }
        self.faults()?;
        self.endpoints().map(|_| ())
    }

    /// Tool kinds a session can reach under this configuration.
    pub fn required_kinds(&self) -> Vec<ToolKind> {
        ToolKind::ALL
            .iter()
            .copied()
            .filter(|k| *k != ToolKind::Complete || self.decompose != DecomposeMode::Rules)
            .collect()
    }

    pub fn endpoints(&self) -> Result<Vec<ToolEndpoint>> {
        let mut out = Vec::new();
        for kind in ToolKind::ALL {
            let ov = self.tools.overrides.get(kind.name()).cloned().unwrap_or_default();
            let mut ep = if self.mock || ov.mock {
                ToolEndpoint::mock(kind)
            } else if let Some(url) = &ov.url {
                ToolEndpoint { target: EndpointTarget::Http { url: url.clone() }, ..ToolEndpoint::http(kind, "") }
            } else if let Some(base) = &self.tools.base_url {
                ToolEndpoint::http(kind, base)
            } else if self.required_kinds().contains(&kind) {
                return Err(Error::Config(format!("no endpoint configured for {}", kind.name())));
            } else {
                continue;
            };
            if matches!(ep.target, EndpointTarget::Http { .. }) {
                ep.timeout_ms = ov.timeout_ms.unwrap_or(self.tools.timeout_ms);
                ep.max_retries = ov.max_retries.unwrap_or(self.tools.max_retries);
                ep.backoff_ms = self.tools.backoff_ms.clone();
            }
            ep.check()?;
            out.push(ep);
        }
        Ok(out)
    }

    pub fn faults(&self) -> Result<FaultInjector> {
        let mut f = FaultInjector::none();
        for (k, v) in &self.mock_tools.faults {
            let object = k.parse().map_err(|_| Error::Config(format!("fault key {k:?} is not an object index")))?;
            if crate::tools::mock::named_color(v).is_none() {
                return Err(Error::Config(format!("fault color {v:?} is not a named color")));
            }
            f.colors.insert(object, v.clone());
        }
        Ok(f)
    }

    pub fn load_lexicon(&self) -> Result<Lexicon> {
        Lexicon::load(self.lexicon.attributes.as_deref(), self.lexicon.relations.as_deref())
    }
}

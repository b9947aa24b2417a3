//! Run configuration: a flat `key = value` file with `#` comments, overridden
//! by `ROUTERKGQA_<KEY>` environment variables (key upper-cased, dots as
//! underscores). Unknown keys are rejected. Relative paths resolve against
//! the config file's directory. API keys are only ever read from the
//! environment variable named by `*.key_env`.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::pipeline::PipelineConfig;
use crate::providers::{
    EmbeddingProvider, HttpEmbedder, HttpLlm, HttpSettings, LlmProvider, Price, PriceTable, ProviderError, ScriptedLlm,
    TokenOverlap,
};
use crate::repair::RepairConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{origin}:{line}: expected `key = value`")]
    Syntax { origin: String, line: usize },
    #[error("{origin}:{line}: unknown key `{key}`")]
    UnknownKey { origin: String, line: usize, key: String },
    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },
    #[error("missing configuration: {0}")]
    Missing(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProviderSpec {
    /// `script` or `http`; unset means not configured.
    pub kind: Option<String>,
    pub script: Option<PathBuf>,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub key_env: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub kg_path: Option<PathBuf>,
    pub specialized: ProviderSpec,
    pub general: ProviderSpec,
    pub embedder: ProviderSpec,
    pub prices: PriceTable,
    pub repair: RepairConfig,
    pub relaxation: bool,
    pub workers: usize,
    pub seed: u64,
    pub http_attempts: u32,
    pub http_backoff_ms: u64,
    pub http_timeout_ms: u64,
    base_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            kg_path: None,
            specialized: ProviderSpec::default(),
            general: ProviderSpec::default(),
            embedder: ProviderSpec { kind: Some("token_overlap".into()), ..ProviderSpec::default() },
            prices: PriceTable::default(),
            repair: RepairConfig::default(),
            relaxation: true,
            workers: 1,
            seed: 42,
            http_attempts: 3,
            http_backoff_ms: 1000,
            http_timeout_ms: 60_000,
            base_dir: PathBuf::from("."),
        }
    }
}

const KEYS: &[&str] = &[
    "kg_path",
    "specialized.provider",
    "specialized.script",
    "specialized.base_url",
    "specialized.model",
    "specialized.key_env",
    "specialized.price",
    "specialized.input_per_1m",
    "specialized.output_per_1m",
    "general.provider",
    "general.script",
    "general.base_url",
    "general.model",
    "general.key_env",
    "general.price",
    "general.input_per_1m",
    "general.output_per_1m",
    "embedder",
    "embedder.base_url",
    "embedder.model",
    "embedder.key_env",
    "repair.beam_width",
    "repair.relation_filter",
    "repair.path_filter",
    "repair.max_depth_cap",
    "relaxation",
    "workers",
    "seed",
    "http.attempts",
    "http.backoff_ms",
    "http.timeout_ms",
];

pub fn env_var_name(key: &str) -> String {
    format!("ROUTERKGQA_{}", key.to_ascii_uppercase().replace('.', "_"))
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::InvalidValue { key: key.into(), message: e.to_string() })
}

fn parse_price(key: &str, v: &str) -> Result<f64, ConfigError> {
    let p: f64 = parse_num(key, v)?;
    if !p.is_finite() || p < 0.0 {
        return Err(ConfigError::InvalidValue { key: key.into(), message: "must be a non-negative number".into() });
    }
    Ok(p)
}

impl Config {
    /// Parses config text; `lookup` supplies environment overrides.
    pub fn parse(
        text: &str,
        origin: &str,
        base_dir: &Path,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<Config, ConfigError> {
        let mut cfg = Config { base_dir: base_dir.to_path_buf(), ..Config::default() };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { origin: origin.into(), line: i + 1 })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(ConfigError::UnknownKey { origin: origin.into(), line: i + 1, key: k.into() });
            }
            cfg.set(k, v)?;
        }
        for k in KEYS {
            if let Some(v) = lookup(&env_var_name(k)) {
                cfg.set(k, v.trim())?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Config::parse(&text, &path.display().to_string(), base, |k| std::env::var(k).ok())
    }

    /// Defaults plus environment overrides, for runs without a file.
    pub fn from_env() -> Result<Config, ConfigError> {
        Config::parse("", "<env>", Path::new("."), |k| std::env::var(k).ok())
    }

    fn resolve(&self, v: &str) -> PathBuf {
        let p = PathBuf::from(v);
        if p.is_absolute() {
            p
        } else {
            self.base_dir.join(p)
        }
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let (section, field) = key.split_once('.').unwrap_or((key, ""));
        match (section, field) {
            ("kg_path", _) => self.kg_path = Some(self.resolve(v)),
            ("specialized" | "general", f) => {
                let is_spec = section == "specialized";
                match f {
                    "price" => {
                        let p = Price::named(v).ok_or_else(|| ConfigError::InvalidValue {
                            key: key.into(),
                            message: format!("unknown model price {v:?} (llama-2-7b, llama-3.1-8b, gpt-4o-mini)"),
                        })?;
                        *self.price_mut(is_spec) = p;
                    }
                    "input_per_1m" => self.price_mut(is_spec).input_per_1m = parse_price(key, v)?,
                    "output_per_1m" => self.price_mut(is_spec).output_per_1m = parse_price(key, v)?,
                    _ => {
                        let script = (f == "script").then(|| self.resolve(v));
                        let spec = if is_spec { &mut self.specialized } else { &mut self.general };
                        match f {
                            "provider" => spec.kind = Some(v.to_string()),
                            "script" => spec.script = script,
                            "base_url" => spec.base_url = Some(v.to_string()),
                            "model" => spec.model = Some(v.to_string()),
                            "key_env" => spec.key_env = Some(v.to_string()),
                            _ => unreachable!("key list and setter agree"),
                        }
                    }
                }
            }
            ("embedder", "") => self.embedder.kind = Some(v.to_string()),
            ("embedder", "base_url") => self.embedder.base_url = Some(v.to_string()),
            ("embedder", "model") => self.embedder.model = Some(v.to_string()),
            ("embedder", "key_env") => self.embedder.key_env = Some(v.to_string()),
            ("repair", "beam_width") => self.repair.beam_width = parse_num(key, v)?,
            ("repair", "relation_filter") => self.repair.relation_filter = parse_num(key, v)?,
            ("repair", "path_filter") => self.repair.path_filter = parse_num(key, v)?,
            ("repair", "max_depth_cap") => self.repair.max_depth_cap = parse_num(key, v)?,
            ("relaxation", _) => {
                self.relaxation = match v {
                    "true" | "on" | "1" => true,
                    "false" | "off" | "0" => false,
                    _ => return Err(ConfigError::InvalidValue { key: key.into(), message: "expected true or false".into() }),
                }
            }
            ("workers", _) => self.workers = parse_num(key, v)?,
            ("seed", _) => self.seed = parse_num(key, v)?,
            ("http", "attempts") => self.http_attempts = parse_num(key, v)?,
            ("http", "backoff_ms") => self.http_backoff_ms = parse_num(key, v)?,
            ("http", "timeout_ms") => self.http_timeout_ms = parse_num(key, v)?,
            _ => unreachable!("key list and setter agree"),
        }
        Ok(())
    }

    fn price_mut(&mut self, specialized: bool) -> &mut Price {
        if specialized {
            &mut self.prices.specialized
        } else {
            &mut self.prices.general
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.repair
            .validate()
            .map_err(|e| ConfigError::InvalidValue { key: "repair".into(), message: e.to_string() })?;
        if self.workers == 0 {
            return Err(ConfigError::InvalidValue { key: "workers".into(), message: "must be at least 1".into() });
        }
        for (name, spec) in [("specialized", &self.specialized), ("general", &self.general)] {
            match spec.kind.as_deref() {
                None | Some("script") | Some("http") => {}
                Some(other) => {
                    return Err(ConfigError::InvalidValue {
                        key: format!("{name}.provider"),
                        message: format!("{other:?} is not `script` or `http`"),
                    })
                }
            }
        }
        match self.embedder.kind.as_deref() {
            None | Some("token_overlap") | Some("http") => Ok(()),
            Some(other) => Err(ConfigError::InvalidValue {
                key: "embedder".into(),
                message: format!("{other:?} is not `token_overlap` or `http`"),
            }),
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig { repair: self.repair.clone(), relaxation: self.relaxation, temperature: 0.0 }
    }

    fn http_settings(&self, name: &str, spec: &ProviderSpec) -> Result<HttpSettings, ConfigError> {
        let need = |v: &Option<String>, f: &str| v.clone().ok_or_else(|| ConfigError::Missing(format!("{name}.{f}")));
        let mut s = HttpSettings::new(need(&spec.base_url, "base_url")?, need(&spec.model, "model")?, need(&spec.key_env, "key_env")?);
        s.attempts = self.http_attempts;
        s.backoff = Duration::from_millis(self.http_backoff_ms);
        s.timeout = Duration::from_millis(self.http_timeout_ms);
        Ok(s)
    }

    fn llm(&self, name: &str, spec: &ProviderSpec) -> Result<Arc<dyn LlmProvider>, ConfigError> {
        match spec.kind.as_deref() {
            Some("script") => {
                let path = spec.script.as_ref().ok_or_else(|| ConfigError::Missing(format!("{name}.script")))?;
                Ok(Arc::new(ScriptedLlm::from_file(path)?))
            }
            Some("http") => Ok(Arc::new(HttpLlm::from_env(self.http_settings(name, spec)?)?)),
            _ => Err(ConfigError::Missing(format!("{name}.provider"))),
        }
    }

    pub fn specialized_llm(&self) -> Result<Arc<dyn LlmProvider>, ConfigError> {
        self.llm("specialized", &self.specialized)
    }

    pub fn general_llm(&self) -> Result<Arc<dyn LlmProvider>, ConfigError> {
        self.llm("general", &self.general)
    }

    pub fn embedder(&self) -> Result<Arc<dyn EmbeddingProvider>, ConfigError> {
        match self.embedder.kind.as_deref() {
            Some("http") => Ok(Arc::new(HttpEmbedder::from_env(self.http_settings("embedder", &self.embedder)?)?)),
            _ => Ok(Arc::new(TokenOverlap)),
        }
    }
}

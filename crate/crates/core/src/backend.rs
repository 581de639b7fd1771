//! Generation backends: a remote chat endpoint, a deterministic template
//! backend for offline runs, and a record/replay cache.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::http::{ChatClient, ChatMessage, ClientSettings, CompletionOptions, HttpError};
use crate::prompt::{OptimizedPrompt, SectionTag};

pub const TOKEN_ENV: &str = "VISUCRAFT_LVLM_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    Remote,
    Template,
    Replay,
}

impl BackendMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Remote => "remote",
            Self::Template => "template",
            Self::Replay => "replay",
        }
    }
}

impl std::str::FromStr for BackendMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "remote" => Ok(Self::Remote),
            "template" => Ok(Self::Template),
            "replay" => Ok(Self::Replay),
            other => Err(format!("unknown backend `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub mode: BackendMode,
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            mode: BackendMode::Template,
            endpoint: None,
            model_name: None,
            temperature: 0.7,
            max_tokens: 1024,
            seed: 0,
            cache_dir: None,
            timeout_ms: 120_000,
            max_retries: 3,
            backoff_ms: 500,
            max_in_flight: 4,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::Config(m.into()));
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be a non-negative number");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        match self.mode {
            BackendMode::Remote if self.endpoint.is_none() || self.model_name.is_none() => {
                bad("remote generation requires endpoint and model_name")
            }
            BackendMode::Replay if self.cache_dir.is_none() => bad("replay requires cache_dir"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub prompt_hash: String,
    pub backend: BackendMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    pub temperature: f64,
    pub seed: u64,
    pub latency_ms: u64,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Transport(HttpError),
    #[error("replay cache miss for prompt {prompt_hash} (entry {key})")]
    CacheMiss { prompt_hash: String, key: String },
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("cache entry {key} already holds a different generation")]
    Conflict { key: String },
    #[error("result hash {result} does not match prompt hash {prompt}")]
    HashMismatch { prompt: String, result: String },
    #[error("cache I/O on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt cache entry {}: {message}", path.display())]
    Corrupt { path: PathBuf, message: String },
}

/// Identifies one generation configuration for one prompt.
pub fn cache_key(prompt_hash: &str, model_name: Option<&str>, temperature: f64, seed: u64) -> String {
    let material = format!("{prompt_hash}\n{}\n{temperature:?}\n{seed}", model_name.unwrap_or(""));
    hex::encode(Sha256::digest(material.as_bytes()))
}

/// One immutable `<key>.gen.json` file per generation.
#[derive(Debug)]
pub struct RecordStore {
    dir: PathBuf,
    writes: Mutex<()>,
}

impl RecordStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            writes: Mutex::new(()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.gen.json"))
    }

    pub fn record(&self, prompt: &OptimizedPrompt, result: &GenerationResult) -> Result<PathBuf, BackendError> {
        if prompt.prompt_hash != result.prompt_hash {
            return Err(BackendError::HashMismatch {
                prompt: prompt.prompt_hash.clone(),
                result: result.prompt_hash.clone(),
            });
        }
        let key = cache_key(&result.prompt_hash, result.model_name.as_deref(), result.temperature, result.seed);
        let path = self.entry_path(&key);
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| BackendError::Io { path, source }
        };

        let _guard = self.writes.lock().unwrap();
        if let Some(existing) = read_entry(&path)? {
            return if existing.text == result.text {
                Ok(path)
            } else {
                Err(BackendError::Conflict { key })
            };
        }
        fs::create_dir_all(&self.dir).map_err(io(&self.dir))?;
        let body = serde_json::to_string_pretty(result).expect("generation results serialize");
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(io(&self.dir))?;
        tmp.write_all(body.as_bytes()).map_err(io(&path))?;
        tmp.persist(&path).map_err(|e| BackendError::Io {
            path: path.clone(),
            source: e.error,
        })?;
        Ok(path)
    }

    pub fn lookup(&self, key: &str) -> Result<Option<GenerationResult>, BackendError> {
        read_entry(&self.entry_path(key))
    }
}

fn read_entry(path: &Path) -> Result<Option<GenerationResult>, BackendError> {
    match fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| BackendError::Corrupt {
                path: path.to_path_buf(),
                message: e.to_string(),
            }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(source) => Err(BackendError::Io {
            path: path.to_path_buf(),
            source,
        }),
    }
}

/// Persists `result` under `cache_dir`.
pub fn record(prompt: &OptimizedPrompt, result: &GenerationResult, cache_dir: &Path) -> Result<PathBuf, BackendError> {
    RecordStore::new(cache_dir).record(prompt, result)
}

const OPENERS: [&str; 4] = ["Here begins a", "This is a", "Consider this", "What follows is a"];
const CONNECTIVES: [&str; 12] = [
    "There is", "Beyond lies", "Nearby,", "Softly,", "And then", "Still,", "Somewhere,", "Quietly,", "Always",
    "Once more,", "Slowly,", "Here,",
];
const KEYWORD_LEADS: [&str; 4] = ["It speaks of", "Everything turns toward", "Woven through it:", "Again and again,"];

/// Deterministic stand-in text: the task word, then every quoted surface
/// string, then every constraint keyword, one per line.
pub fn template_text(prompt: &OptimizedPrompt, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ hash_prefix(&prompt.prompt_hash));
    let mut lines = Vec::new();
    if let Some(word) = &prompt.task_word {
        lines.push(format!("{} {word}.", OPENERS[rng.random_range(0..OPENERS.len())]));
    }
    let visual = prompt.section(SectionTag::VisualContext).unwrap_or("");
    for surface in prompt.surfaces.iter().filter(|s| visual.contains(s.as_str())) {
        lines.push(format!("{} {surface}.", CONNECTIVES[rng.random_range(0..CONNECTIVES.len())]));
    }
    for keyword in &prompt.keywords {
        lines.push(format!("{} {keyword}.", KEYWORD_LEADS[rng.random_range(0..KEYWORD_LEADS.len())]));
    }
    lines.join("\n")
}

fn hash_prefix(hash: &str) -> u64 {
    hash.get(..16)
        .and_then(|h| u64::from_str_radix(h, 16).ok())
        .unwrap_or(0)
}

/// A backend bound to one configuration. Safe to share across threads.
pub struct Backend {
    cfg: BackendConfig,
    client: Option<ChatClient>,
    store: Option<RecordStore>,
}

impl Backend {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let client = (cfg.mode == BackendMode::Remote).then(|| {
            ChatClient::new(ClientSettings {
                endpoint: cfg.endpoint.clone().unwrap_or_default(),
                token: std::env::var(TOKEN_ENV).ok(),
                timeout: Duration::from_millis(cfg.timeout_ms),
                max_retries: cfg.max_retries,
                max_in_flight: cfg.max_in_flight,
                backoff: Duration::from_millis(cfg.backoff_ms),
            })
        });
        let store = cfg.cache_dir.clone().map(RecordStore::new);
        Ok(Self { cfg, client, store })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    pub fn generate(&self, prompt: &OptimizedPrompt) -> Result<GenerationResult, BackendError> {
        let started = Instant::now();
        let text = match self.cfg.mode {
            BackendMode::Template => template_text(prompt, self.cfg.seed),
            BackendMode::Replay => return self.replay(prompt),
            BackendMode::Remote => self.remote(prompt)?,
        };
        if text.trim().is_empty() {
            return Err(BackendError::EmptyCompletion);
        }
        let result = GenerationResult {
            text,
            prompt_hash: prompt.prompt_hash.clone(),
            backend: self.cfg.mode,
            model_name: self.cfg.model_name.clone(),
            temperature: self.cfg.temperature,
            seed: self.cfg.seed,
            latency_ms: started.elapsed().as_millis() as u64,
            created_at: Utc::now(),
        };
        if self.cfg.mode == BackendMode::Remote {
            if let Some(store) = &self.store {
                store.record(prompt, &result)?;
            }
        }
        Ok(result)
    }

    fn key(&self, prompt: &OptimizedPrompt) -> String {
        cache_key(&prompt.prompt_hash, self.cfg.model_name.as_deref(), self.cfg.temperature, self.cfg.seed)
    }

    fn replay(&self, prompt: &OptimizedPrompt) -> Result<GenerationResult, BackendError> {
        let store = self.store.as_ref().expect("replay mode has a store");
        let key = self.key(prompt);
        match store.lookup(&key)? {
            Some(result) if result.prompt_hash == prompt.prompt_hash => Ok(result),
            _ => Err(BackendError::CacheMiss {
                prompt_hash: prompt.prompt_hash.clone(),
                key,
            }),
        }
    }

    fn remote(&self, prompt: &OptimizedPrompt) -> Result<String, BackendError> {
        let client = self.client.as_ref().expect("remote mode has a client");
        let messages = chat_messages(prompt);
        let opts = CompletionOptions {
            model: self.cfg.model_name.clone(),
            temperature: Some(self.cfg.temperature),
            max_tokens: Some(self.cfg.max_tokens),
            seed: Some(self.cfg.seed),
        };
        client.complete(&messages, &opts).map_err(BackendError::Transport)
    }
}

/// Preamble as the system message, every other section joined into one
/// user message.
pub fn chat_messages(prompt: &OptimizedPrompt) -> Vec<ChatMessage> {
    let mut messages = Vec::new();
    let mut user = Vec::new();
    for (tag, text) in &prompt.sections {
        match tag {
            SectionTag::Preamble if !text.is_empty() => messages.push(ChatMessage::system(text.clone())),
            SectionTag::Preamble => {}
            _ if text.is_empty() => {}
            _ => user.push(text.as_str()),
        }
    }
    messages.push(ChatMessage::user(user.join("\n\n")));
    messages
}

/// Convenience wrapper building a one-off [`Backend`].
pub fn generate(prompt: &OptimizedPrompt, cfg: &BackendConfig) -> Result<GenerationResult, BackendError> {
    Backend::new(cfg.clone())?.generate(prompt)
}

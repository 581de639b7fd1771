//! Scene extraction: produces an [`SviDocument`] for an image from a remote
//! vision model, a fixture sidecar, or a plain caption.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::http::{excerpt, ChatClient, ChatMessage, ClientSettings, CompletionOptions, HttpError};
use crate::svi::{
    self, downgrade, GranularityLevel, SceneObject, SviDocument, SviError, SviSource,
};
use crate::text::content_words;

pub const TOKEN_ENV: &str = "VISUCRAFT_EXTRACTOR_TOKEN";

const REMOTE_SYSTEM_PROMPT: &str = "You describe images as structured visual information. \
Reply with a single JSON object and nothing else, using exactly these keys: \
\"level\" (always \"L3\"), \
\"objects\" (array of {\"name\": lowercase noun, \"attributes\": [materials, textures, colors, states], \"pose\": optional string, \"synonyms\": [alternative names]}), \
\"relations\" (array of {\"subject\": object name, \"predicate\": spatial relation such as \"left of\" or \"standing on\", \"object\": object name}), \
\"lighting\" (dominant light sources and conditions), \
\"palette\" (array of color names), \
\"atmosphere\" (emotional tone), \
\"implied_narrative\" (what the scene suggests is happening). \
Every relation must name objects listed in \"objects\".";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}

impl ImageRef {
    pub fn new(id: impl Into<String>, uri: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            uri: uri.into(),
            checksum: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorMode {
    Remote,
    Fixture,
    CaptionFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub mode: ExtractorMode,
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    pub fixture_dir: Option<PathBuf>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub requested_level: GranularityLevel,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            mode: ExtractorMode::Fixture,
            endpoint: None,
            model_name: None,
            fixture_dir: None,
            timeout_ms: 60_000,
            max_retries: 3,
            backoff_ms: 500,
            max_in_flight: 4,
            requested_level: GranularityLevel::L3,
        }
    }
}

impl ExtractorConfig {
    pub fn fixture(dir: impl Into<PathBuf>, level: GranularityLevel) -> Self {
        Self {
            mode: ExtractorMode::Fixture,
            fixture_dir: Some(dir.into()),
            requested_level: level,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ExtractError> {
        match self.mode {
            ExtractorMode::Remote if self.endpoint.is_none() => {
                Err(ExtractError::Config("remote extraction requires an endpoint".into()))
            }
            ExtractorMode::Fixture if self.fixture_dir.is_none() => {
                Err(ExtractError::Config("fixture extraction requires fixture_dir".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("extractor configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Transport(HttpError),
    #[error("could not parse model response after repair ({reason}); response began: {excerpt}")]
    Response { reason: String, excerpt: String },
    #[error("missing fixture sidecar {}", .0.display())]
    MissingFixture(PathBuf),
    #[error("bad fixture {}: {source}", path.display())]
    Fixture {
        path: PathBuf,
        #[source]
        source: SviError,
    },
    #[error("no objects extractable")]
    NoObjects,
    #[error("caption must be non-empty")]
    EmptyCaption,
    #[error(transparent)]
    Svi(#[from] SviError),
}

impl ExtractError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Transport(e) if e.is_transport())
    }
}

/// An extractor bound to one configuration. Safe to share across threads.
pub struct Extractor {
    cfg: ExtractorConfig,
    client: Option<ChatClient>,
}

impl Extractor {
    pub fn new(cfg: ExtractorConfig) -> Result<Self, ExtractError> {
        cfg.validate()?;
        let client = (cfg.mode == ExtractorMode::Remote).then(|| {
            ChatClient::new(ClientSettings {
                endpoint: cfg.endpoint.clone().unwrap_or_default(),
                token: std::env::var(TOKEN_ENV).ok(),
                timeout: Duration::from_millis(cfg.timeout_ms),
                max_retries: cfg.max_retries,
                max_in_flight: cfg.max_in_flight,
                backoff: Duration::from_millis(cfg.backoff_ms),
            })
        });
        Ok(Self { cfg, client })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    /// Extracts at the configured level.
    pub fn extract(&self, image: &ImageRef) -> Result<SviDocument, ExtractError> {
        self.extract_at(image, self.cfg.requested_level)
    }

    pub fn extract_at(&self, image: &ImageRef, level: GranularityLevel) -> Result<SviDocument, ExtractError> {
        let doc = match self.cfg.mode {
            ExtractorMode::Fixture => load_fixture(self.fixture_path(image))?,
            ExtractorMode::Remote => self.extract_remote(image)?,
            ExtractorMode::CaptionFallback => {
                return Err(ExtractError::Config(
                    "caption-fallback extraction needs a caption; use caption_to_svi".into(),
                ))
            }
        };
        Ok(downgrade(&doc, level)?)
    }

    pub fn fixture_path(&self, image: &ImageRef) -> PathBuf {
        sidecar_path(self.cfg.fixture_dir.as_deref().unwrap_or(Path::new(".")), &image.id)
    }

    fn extract_remote(&self, image: &ImageRef) -> Result<SviDocument, ExtractError> {
        let client = self.client.as_ref().expect("remote mode has a client");
        let messages = [
            ChatMessage::system(REMOTE_SYSTEM_PROMPT),
            ChatMessage::user(format!("Image id: {}\nImage: {}", image.id, image.uri)),
        ];
        let opts = CompletionOptions {
            model: self.cfg.model_name.clone(),
            temperature: Some(0.0),
            ..CompletionOptions::default()
        };
        let reply = client.complete(&messages, &opts).map_err(ExtractError::Transport)?;
        repair_response(&reply)
    }
}

/// `<dir>/<id>.svi.json`
pub fn sidecar_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.svi.json"))
}

pub fn load_fixture(path: PathBuf) -> Result<SviDocument, ExtractError> {
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(ExtractError::MissingFixture(path)),
        Err(e) => {
            return Err(ExtractError::Config(format!("cannot read {}: {e}", path.display())));
        }
    };
    match svi::parse(&text) {
        Ok(mut doc) => {
            doc.source = SviSource::Fixture;
            Ok(doc)
        }
        Err(SviError::Semantic(report)) if report.has_rule("objects must be non-empty") => Err(ExtractError::NoObjects),
        Err(source) => Err(ExtractError::Fixture { path, source }),
    }
}

/// Parses a model reply as SVI with a single repair pass: code fences and
/// surrounding prose are trimmed, keys outside the schema are dropped, and
/// relations whose endpoints do not name an object are dropped.
pub fn repair_response(reply: &str) -> Result<SviDocument, ExtractError> {
    let fail = |reason: String| ExtractError::Response {
        reason,
        excerpt: excerpt(reply, 160),
    };

    let body = match (reply.find('{'), reply.rfind('}')) {
        (Some(start), Some(end)) if start < end => &reply[start..=end],
        _ => return Err(fail("no JSON object in response".into())),
    };
    let mut value: Value = serde_json::from_str(body).map_err(|e| fail(e.to_string()))?;
    svi::strip_unknown_keys(&mut value);
    if let Some(map) = value.as_object_mut() {
        map.insert("source".into(), Value::String("remote".into()));
    }

    let mut doc = svi::decode_value(value).map_err(|e| fail(e.to_string()))?;
    if doc.objects.is_empty() {
        return Err(ExtractError::NoObjects);
    }
    let names: Vec<String> = doc.objects.iter().map(|o| o.name.clone()).collect();
    doc.relations
        .retain(|r| names.contains(&r.subject) && names.contains(&r.object));

    let report = svi::validate(&doc);
    if !report.is_ok() {
        return Err(fail(format!("invalid after repair: {report}")));
    }
    Ok(doc)
}

/// Shallow caption conversion: every content word becomes an attribute-free
/// object in an L1 document.
pub fn caption_to_svi(caption: &str) -> Result<SviDocument, ExtractError> {
    if caption.trim().is_empty() {
        return Err(ExtractError::EmptyCaption);
    }
    let objects: Vec<SceneObject> = content_words(caption).into_iter().map(SceneObject::named).collect();
    if objects.is_empty() {
        return Err(ExtractError::NoObjects);
    }
    let mut doc = SviDocument::new(GranularityLevel::L1, objects, SviSource::CaptionFallback);
    doc.canonicalize();
    Ok(doc)
}

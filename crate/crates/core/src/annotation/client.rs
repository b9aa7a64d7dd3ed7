//! Vision-language annotation backends.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use serde::Deserialize;

use super::prompts::PromptKind;
use crate::error::{Error, Result};

pub const ENV_URL: &str = "RGBTVG_ANNOT_URL";
pub const ENV_TOKEN: &str = "RGBTVG_ANNOT_TOKEN";
pub const ENV_TIMEOUT: &str = "RGBTVG_ANNOT_TIMEOUT_S";

const DEFAULT_TIMEOUT_S: u64 = 60;

/// One prompt sent about one instance.
#[derive(Clone, Copy, Debug)]
pub struct AnnotationRequest<'a> {
    pub instance_id: &'a str,
    pub kind: PromptKind,
    pub image: &'a Path,
    pub prompt: &'a str,
}

/// Sends a rendered prompt with its image and returns the raw reply text.
pub trait AnnotationClient: Send + Sync {
    fn send(&self, req: &AnnotationRequest<'_>) -> Result<String>;
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Scripted {
    One(String),
    Many(Vec<String>),
}

/// Replays canned responses keyed by instance id and prompt kind.
///
/// Fixture JSON maps each instance id to an object keyed by prompt kind
/// name. A value is either a response string, returned on every call, or
/// an array of responses returned in order, with the last one repeating:
///
/// ```json
/// { "0001:car": { "scene_weather": "7 3", "lighting": ["??", "2"],
///                 "object_expression": "the car on the left",
///                 "occlusion": "0" } }
/// ```
#[derive(Debug, Default)]
pub struct StubClient {
    responses: BTreeMap<(String, PromptKind), Vec<String>>,
    calls: Mutex<BTreeMap<(String, PromptKind), usize>>,
}

impl StubClient {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a scripted sequence for one (instance, kind) key.
    pub fn script(
        &mut self,
        instance_id: impl Into<String>,
        kind: PromptKind,
        responses: impl IntoIterator<Item = impl Into<String>>,
    ) -> &mut Self {
        let seq: Vec<String> = responses.into_iter().map(Into::into).collect();
        assert!(!seq.is_empty(), "scripted response list must not be empty");
        self.responses.insert((instance_id.into(), kind), seq);
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, BTreeMap<PromptKind, Scripted>> = serde_json::from_str(text)?;
        let mut stub = Self::new();
        for (id, kinds) in raw {
            for (kind, s) in kinds {
                let seq = match s {
                    Scripted::One(r) => vec![r],
                    Scripted::Many(v) if !v.is_empty() => v,
                    Scripted::Many(_) => {
                        return Err(Error::Client(format!(
                            "fixture {id}/{kind}: empty response list"
                        )))
                    }
                };
                stub.script(id.clone(), kind, seq);
            }
        }
        Ok(stub)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Number of calls made so far for one key.
    pub fn calls(&self, instance_id: &str, kind: PromptKind) -> usize {
        self.calls
            .lock()
            .unwrap()
            .get(&(instance_id.to_string(), kind))
            .copied()
            .unwrap_or(0)
    }
}

impl AnnotationClient for StubClient {
    fn send(&self, req: &AnnotationRequest<'_>) -> Result<String> {
        let key = (req.instance_id.to_string(), req.kind);
        let seq = self.responses.get(&key).ok_or_else(|| {
            Error::Client(format!("no fixture for {} / {}", req.instance_id, req.kind))
        })?;
        let mut calls = self.calls.lock().unwrap();
        let n = calls.entry(key).or_default();
        let reply = seq[(*n).min(seq.len() - 1)].clone();
        *n += 1;
        Ok(reply)
    }
}

/// Remote annotation service reached over HTTP.
///
/// Each prompt is a `POST` of `{"image": <base64 file bytes>, "prompt": <text>}`
/// to the configured endpoint. The response body is returned as-is.
pub struct HttpClient {
    url: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(url: impl Into<String>, token: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: url.into(),
            token,
            agent,
        }
    }

    /// Reads `RGBTVG_ANNOT_URL` (required), `RGBTVG_ANNOT_TOKEN` and
    /// `RGBTVG_ANNOT_TIMEOUT_S` (seconds, default 60).
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(ENV_URL)
            .map_err(|_| Error::Client(format!("{ENV_URL} is not set")))?;
        let token = std::env::var(ENV_TOKEN).ok().filter(|t| !t.is_empty());
        let timeout = match std::env::var(ENV_TIMEOUT) {
            Ok(s) => s
                .trim()
                .parse::<u64>()
                .ok()
                .filter(|&t| t > 0)
                .ok_or_else(|| Error::Client(format!("{ENV_TIMEOUT}={s:?} is not a positive integer")))?,
            Err(_) => DEFAULT_TIMEOUT_S,
        };
        Ok(Self::new(url, token, Duration::from_secs(timeout)))
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl AnnotationClient for HttpClient {
    fn send(&self, req: &AnnotationRequest<'_>) -> Result<String> {
        let bytes = std::fs::read(req.image).map_err(|e| Error::io(req.image, e))?;
        let body = serde_json::json!({
            "image": base64::engine::general_purpose::STANDARD.encode(bytes),
            "prompt": req.prompt,
        });
        let mut request = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = request
            .send_json(&body)
            .map_err(|e| Error::Client(format!("{}: {e}", self.url)))?;
        resp.body_mut()
            .read_to_string()
            .map_err(|e| Error::Client(format!("{}: reading body: {e}", self.url)))
    }
}

/// Resolves the image a request refers to.
pub(crate) fn image_for(base: Option<&Path>, rel: &str) -> PathBuf {
    match base {
        Some(b) => b.join(rel),
        None => PathBuf::from(rel),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req<'a>(id: &'a str, kind: PromptKind) -> AnnotationRequest<'a> {
        AnnotationRequest {
            instance_id: id,
            kind,
            image: Path::new("unused.png"),
            prompt: "p",
        }
    }

    #[test]
    fn stub_replays_sequences_and_repeats_last() {
        let stub = StubClient::from_json(
            r#"{"a:car": {"lighting": ["x", "2"], "occlusion": "1"}}"#,
        )
        .unwrap();
        let r = req("a:car", PromptKind::Lighting);
        assert_eq!(stub.send(&r).unwrap(), "x");
        assert_eq!(stub.send(&r).unwrap(), "2");
        assert_eq!(stub.send(&r).unwrap(), "2");
        assert_eq!(stub.calls("a:car", PromptKind::Lighting), 3);
        let o = req("a:car", PromptKind::Occlusion);
        assert_eq!(stub.send(&o).unwrap(), "1");
        assert!(stub.send(&req("b:car", PromptKind::Lighting)).is_err());
    }

    #[test]
    fn stub_rejects_bad_fixtures() {
        assert!(StubClient::from_json(r#"{"a": {"lighting": []}}"#).is_err());
        assert!(StubClient::from_json(r#"{"a": {"weather": "1"}}"#).is_err());
    }

    #[test]
    fn stub_is_byte_exact() {
        let stub =
            StubClient::from_json(r#"{"a": {"object_expression": "  the car\n"}}"#).unwrap();
        assert_eq!(
            stub.send(&req("a", PromptKind::ObjectExpression)).unwrap(),
            "  the car\n"
        );
    }
}

//! Black-box language-model access.
//!
//! Providers never fabricate text: a fixture or cache that lacks an answer
//! reports an offline miss naming the key it looked for.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prompts::Prompt;
use crate::error::{Error, Result};

/// Environment variable holding live-provider credentials.
pub const API_KEY_ENV: &str = "MGFUSE_LLM_API_KEY";

/// Responses for one `(family, subject)` prompt bundle. Also the on-disk
/// prompt-bundle and cache-record format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub family: String,
    pub subject: String,
    pub prompts: Vec<String>,
    pub provider: String,
    pub responses: Vec<String>,
    #[serde(default)]
    pub retrieved_at: u64,
}

impl Transcript {
    pub fn validate(&self) -> Result<()> {
        if self.responses.len() != self.prompts.len() {
            return Err(Error::invalid(format!(
                "transcript for '{}' has {} responses for {} prompts",
                self.subject,
                self.responses.len(),
                self.prompts.len()
            )));
        }
        if let Some(i) = self.responses.iter().position(|r| r.trim().is_empty()) {
            return Err(Error::invalid(format!(
                "transcript for '{}' has an empty response at {}",
                self.subject, i
            )));
        }
        Ok(())
    }

    /// Responses joined with blank lines.
    pub fn full_text(&self) -> String {
        self.responses.join("\n\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: Transcript = serde_json::from_slice(&fs::read(path)?)?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Cache key for one prompt: hex SHA-256 of family, subject and index.
pub fn prompt_key(family: &str, subject: &str, index: usize) -> String {
    let mut h = Sha256::new();
    h.update(family.as_bytes());
    h.update([0u8]);
    h.update(subject.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    hex_string(&h.finalize())
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One generated answer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub retrieved_at: u64,
}

pub trait LlmClient {
    fn provider_id(&self) -> &str;

    fn complete(&self, family: &str, subject: &str, prompt: &Prompt) -> Result<Completion>;
}

/// Sends every prompt and collects a [`Transcript`].
pub fn query_llm(
    client: &dyn LlmClient,
    family: &str,
    subject: &str,
    prompts: &[Prompt],
) -> Result<Transcript> {
    let mut responses = Vec::with_capacity(prompts.len());
    let mut retrieved_at = 0;
    for p in prompts {
        let c = client.complete(family, subject, p)?;
        retrieved_at = retrieved_at.max(c.retrieved_at);
        responses.push(c.text);
    }
    let t = Transcript {
        family: family.to_string(),
        subject: subject.to_string(),
        prompts: prompts.iter().map(|p| p.text.clone()).collect(),
        provider: client.provider_id().to_string(),
        responses,
        retrieved_at,
    };
    t.validate()?;
    Ok(t)
}

/// Replays shipped transcripts.
#[derive(Clone, Debug, Default)]
pub struct MockFixture {
    fixtures: BTreeMap<(String, String), Transcript>,
}

const MEMS_FIXTURE: &str = include_str!("../../fixtures/transcripts/nanomaterial__mems.json");

impl MockFixture {
    /// Provider preloaded with the built-in MEMS transcript.
    pub fn builtin() -> Self {
        let mut m = Self::default();
        let t: Transcript =
            serde_json::from_str(MEMS_FIXTURE).expect("built-in fixture is valid json");
        m.insert(t);
        m
    }

    pub fn insert(&mut self, t: Transcript) {
        self.fixtures
            .insert((t.family.clone(), t.subject.to_lowercase()), t);
    }

    /// Adds every `*.json` transcript in `dir` on top of the built-ins.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut m = Self::builtin();
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        for p in paths {
            m.insert(Transcript::load(&p)?);
        }
        Ok(m)
    }

    pub fn get(&self, family: &str, subject: &str) -> Option<&Transcript> {
        self.fixtures
            .get(&(family.to_string(), subject.to_lowercase()))
    }
}

impl LlmClient for MockFixture {
    fn provider_id(&self) -> &str {
        "mock-fixture"
    }

    fn complete(&self, family: &str, subject: &str, prompt: &Prompt) -> Result<Completion> {
        let text = self
            .get(family, subject)
            .and_then(|t| t.responses.get(prompt.index.wrapping_sub(1)))
            .ok_or_else(|| Error::OfflineMiss {
                key: format!("{family}/{subject}/{}", prompt.index),
            })?;
        Ok(Completion {
            text: text.clone(),
            retrieved_at: 0,
        })
    }
}

/// Persists answers under `dir/<prompt_key>.json` and replays them.
///
/// Without an upstream client the cache is offline and a miss is an error.
pub struct FileCache {
    dir: PathBuf,
    upstream: Option<Box<dyn LlmClient>>,
    transport_calls: Cell<usize>,
}

impl FileCache {
    pub fn offline(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            upstream: None,
            transport_calls: Cell::new(0),
        }
    }

    pub fn with_upstream(dir: impl Into<PathBuf>, upstream: Box<dyn LlmClient>) -> Self {
        Self {
            dir: dir.into(),
            upstream: Some(upstream),
            transport_calls: Cell::new(0),
        }
    }

    /// Number of calls forwarded to the upstream client.
    pub fn transport_calls(&self) -> usize {
        self.transport_calls.get()
    }

    fn record_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }
}

impl LlmClient for FileCache {
    fn provider_id(&self) -> &str {
        "file-cache"
    }

    fn complete(&self, family: &str, subject: &str, prompt: &Prompt) -> Result<Completion> {
        let key = prompt_key(family, subject, prompt.index);
        let path = self.record_path(&key);
        if path.exists() {
            let rec: Transcript = serde_json::from_slice(&fs::read(&path)?)?;
            let text = rec
                .responses
                .into_iter()
                .next()
                .ok_or_else(|| Error::invalid(format!("empty cache record {}", path.display())))?;
            return Ok(Completion {
                text,
                retrieved_at: rec.retrieved_at,
            });
        }
        let upstream = self
            .upstream
            .as_ref()
            .ok_or(Error::OfflineMiss { key: key.clone() })?;
        self.transport_calls.set(self.transport_calls.get() + 1);
        let c = upstream.complete(family, subject, prompt)?;
        let rec = Transcript {
            family: family.to_string(),
            subject: subject.to_string(),
            prompts: vec![prompt.text.clone()],
            provider: upstream.provider_id().to_string(),
            responses: vec![c.text.clone()],
            retrieved_at: c.retrieved_at,
        };
        fs::create_dir_all(&self.dir)?;
        fs::write(&path, rec.to_json()?)?;
        Ok(c)
    }
}

#[cfg(feature = "live")]
pub use live::LiveHttp;

#[cfg(feature = "live")]
mod live {
    use super::*;

    /// OpenAI-compatible chat-completions client.
    pub struct LiveHttp {
        endpoint: String,
        model: String,
        api_key: String,
        client: reqwest::blocking::Client,
    }

    impl LiveHttp {
        /// `None` when no credentials are configured, which forces offline mode.
        pub fn from_env() -> Option<Self> {
            let api_key = std::env::var(API_KEY_ENV).ok()?;
            let endpoint = std::env::var("MGFUSE_LLM_ENDPOINT")
                .unwrap_or_else(|_| "https://api.openai.com/v1/chat/completions".into());
            let model = std::env::var("MGFUSE_LLM_MODEL").unwrap_or_else(|_| "gpt-4".into());
            let client = reqwest::blocking::Client::builder()
                .timeout(std::time::Duration::from_secs(120))
                .build()
                .ok()?;
            Some(Self {
                endpoint,
                model,
                api_key,
                client,
            })
        }
    }

    impl LlmClient for LiveHttp {
        fn provider_id(&self) -> &str {
            "live-http"
        }

        fn complete(&self, _family: &str, _subject: &str, prompt: &Prompt) -> Result<Completion> {
            let body = serde_json::json!({
                "model": self.model,
                "messages": [{"role": "user", "content": prompt.text}],
            });
            let resp = self
                .client
                .post(&self.endpoint)
                .bearer_auth(&self.api_key)
                .json(&body)
                .send()
                .map_err(|e| Error::Transport {
                    msg: e.to_string(),
                    retryable: e.is_timeout() || e.is_connect(),
                })?;
            let status = resp.status();
            if !status.is_success() {
                return Err(Error::Transport {
                    msg: format!("http status {status}"),
                    retryable: status.is_server_error() || status.as_u16() == 429,
                });
            }
            let v: serde_json::Value = resp.json().map_err(|e| Error::Transport {
                msg: e.to_string(),
                retryable: false,
            })?;
            let text = v["choices"][0]["message"]["content"]
                .as_str()
                .ok_or_else(|| Error::Transport {
                    msg: "response without message content".into(),
                    retryable: false,
                })?
                .to_string();
            let now = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            Ok(Completion {
                text,
                retrieved_at: now,
            })
        }
    }
}

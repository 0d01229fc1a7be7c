//! Completion backends: a live HTTP client, a rule-based scripted backend,
//! a transcript recorder and a transcript replayer.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LlmError, PromptKind};
use crate::config::LlmConfig;
use crate::gate::Gate;

pub trait LlmBackend: Send + Sync {
    fn complete(&self, kind: PromptKind, prompt: &str) -> Result<String, LlmError>;
}

/// Hex SHA-256 of a rendered prompt.
pub fn input_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

// ---------------------------------------------------------------------------

/// OpenAI-compatible chat completion client.
pub struct HttpChatBackend {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    temperature: f64,
    api_key: Option<String>,
    max_retries: u32,
    gate: Gate,
}

impl HttpChatBackend {
    pub fn from_config(c: &LlmConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(c.timeout_secs))
            .build()
            .map_err(|e| LlmError::Unavailable(e.to_string()))?;
        Ok(Self {
            client,
            url: format!("{}/chat/completions", c.base_url.trim_end_matches('/')),
            model: c.model.clone(),
            temperature: c.temperature,
            api_key: std::env::var(&c.api_key_env).ok(),
            max_retries: c.max_retries,
            gate: Gate::new(c.concurrency),
        })
    }

    fn request(&self, prompt: &str) -> Result<String, String> {
        let _permit = self.gate.acquire();
        let body = serde_json::json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{ "role": "user", "content": prompt }],
        });
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        let v: serde_json::Value = resp.json().map_err(|e| e.to_string())?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| "response without message content".to_string())
    }
}

impl LlmBackend for HttpChatBackend {
    fn complete(&self, _kind: PromptKind, prompt: &str) -> Result<String, LlmError> {
        if self.api_key.is_none() {
            return Err(LlmError::Unavailable("no API key configured".into()));
        }
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(500 << attempt.min(5)));
            }
            match self.request(prompt) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    tracing::warn!(attempt, "chat completion failed: {e}");
                    last = e;
                }
            }
        }
        Err(LlmError::Unavailable(last))
    }
}

// ---------------------------------------------------------------------------

/// One canned answer, chosen when the prompt kind matches and the prompt
/// contains every needle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub kind: PromptKind,
    #[serde(default)]
    pub contains: Vec<String>,
    pub response: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub rules: Vec<ScriptRule>,
}

/// Answers from a fixed rule list; the first matching rule wins.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    script: Script,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        Self { script }
    }

    pub fn from_rules(rules: Vec<ScriptRule>) -> Self {
        Self::new(Script { rules })
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let bytes = std::fs::read(path).map_err(|e| LlmError::Transcript(format!("{}: {e}", path.display())))?;
        let script: Script =
            serde_json::from_slice(&bytes).map_err(|e| LlmError::Transcript(format!("{}: {e}", path.display())))?;
        Ok(Self::new(script))
    }

    pub fn push(&mut self, kind: PromptKind, contains: &[&str], response: impl Into<String>) {
        self.script.rules.push(ScriptRule {
            kind,
            contains: contains.iter().map(|s| s.to_string()).collect(),
            response: response.into(),
        });
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, kind: PromptKind, prompt: &str) -> Result<String, LlmError> {
        self.script
            .rules
            .iter()
            .find(|r| r.kind == kind && r.contains.iter().all(|n| prompt.contains(n.as_str())))
            .map(|r| r.response.clone())
            .ok_or_else(|| LlmError::Unavailable(format!("no scripted {kind} response matches")))
    }
}

/// A backend that always fails, for exercising fallbacks.
#[derive(Debug, Clone, Default)]
pub struct UnavailableBackend;

impl LlmBackend for UnavailableBackend {
    fn complete(&self, _kind: PromptKind, _prompt: &str) -> Result<String, LlmError> {
        Err(LlmError::Unavailable("provider timeout".into()))
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub kind: PromptKind,
    pub input_hash: String,
    pub response: String,
    /// Seconds since the Unix epoch when the response was recorded.
    #[serde(default)]
    pub timestamp: u64,
}

/// Reads a JSON-lines transcript, rejecting duplicate (kind, hash) keys
/// with differing responses.
pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptEntry>, LlmError> {
    let file = File::open(path).map_err(|e| LlmError::Transcript(format!("{}: {e}", path.display())))?;
    let mut out: Vec<TranscriptEntry> = Vec::new();
    let mut seen: HashMap<(PromptKind, String), usize> = HashMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LlmError::Transcript(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: TranscriptEntry = serde_json::from_str(&line)
            .map_err(|err| LlmError::Transcript(format!("{}:{}: {err}", path.display(), n + 1)))?;
        match seen.get(&(e.kind, e.input_hash.clone())) {
            Some(&i) if out[i].response == e.response => continue,
            Some(_) => {
                return Err(LlmError::Transcript(format!(
                    "{}:{}: conflicting entries for {} {}",
                    path.display(),
                    n + 1,
                    e.kind,
                    e.input_hash
                )))
            }
            None => {
                seen.insert((e.kind, e.input_hash.clone()), out.len());
                out.push(e);
            }
        }
    }
    Ok(out)
}

/// Serves responses from a transcript; a miss is a hard error.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    entries: HashMap<(PromptKind, String), String>,
}

impl ReplayBackend {
    pub fn from_entries(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        Self {
            entries: entries
                .into_iter()
                .map(|e| ((e.kind, e.input_hash), e.response))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        Ok(Self::from_entries(read_transcript(path)?))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl LlmBackend for ReplayBackend {
    fn complete(&self, kind: PromptKind, prompt: &str) -> Result<String, LlmError> {
        let hash = input_hash(prompt);
        self.entries
            .get(&(kind, hash.clone()))
            .cloned()
            .ok_or(LlmError::ReplayMiss { kind, input_hash: hash })
    }
}

struct RecorderState {
    file: File,
    known: HashMap<(PromptKind, String), String>,
}

/// Wraps a live backend and appends every new response to a transcript
/// before handing it back. Prompts already in the transcript are served
/// from it.
pub struct Recorder {
    inner: Arc<dyn LlmBackend>,
    path: PathBuf,
    state: Mutex<RecorderState>,
}

impl Recorder {
    pub fn open(inner: Arc<dyn LlmBackend>, path: &Path) -> Result<Self, LlmError> {
        let known = if path.exists() {
            read_transcript(path)?
                .into_iter()
                .map(|e| ((e.kind, e.input_hash), e.response))
                .collect()
        } else {
            HashMap::new()
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| LlmError::Transcript(e.to_string()))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LlmError::Transcript(format!("{}: {e}", path.display())))?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
            state: Mutex::new(RecorderState { file, known }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl LlmBackend for Recorder {
    fn complete(&self, kind: PromptKind, prompt: &str) -> Result<String, LlmError> {
        let hash = input_hash(prompt);
        if let Some(r) = self
            .state
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .known
            .get(&(kind, hash.clone()))
        {
            return Ok(r.clone());
        }
        let response = self.inner.complete(kind, prompt)?;
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(r) = st.known.get(&(kind, hash.clone())) {
            return Ok(r.clone());
        }
        let entry = TranscriptEntry {
            kind,
            input_hash: hash.clone(),
            response: response.clone(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        let mut line = serde_json::to_string(&entry).expect("entry serializes");
        line.push('\n');
        st.file
            .write_all(line.as_bytes())
            .and_then(|_| st.file.flush())
            .map_err(|e| LlmError::Transcript(e.to_string()))?;
        st.known.insert((kind, hash), response.clone());
        Ok(response)
    }
}

use std::path::Path;
use std::sync::Mutex;

use regex::Regex;
use serde::Deserialize;

use super::{Completion, LlmProvider, LlmUsage, ProviderError};

#[derive(Debug, Clone)]
pub enum Matcher {
    Contains(String),
    Pattern(Regex),
}

impl Matcher {
    fn matches(&self, prompt: &str) -> bool {
        match self {
            Matcher::Contains(s) => prompt.contains(s.as_str()),
            Matcher::Pattern(re) => re.is_match(prompt),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptEntry {
    pub matcher: Matcher,
    pub reply: String,
    /// Remaining uses; `None` repeats forever.
    pub remaining: Option<usize>,
}

impl ScriptEntry {
    pub fn once(contains: impl Into<String>, reply: impl Into<String>) -> Self {
        ScriptEntry { matcher: Matcher::Contains(contains.into()), reply: reply.into(), remaining: Some(1) }
    }

    pub fn always(contains: impl Into<String>, reply: impl Into<String>) -> Self {
        ScriptEntry { matcher: Matcher::Contains(contains.into()), reply: reply.into(), remaining: None }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryFile {
    contains: Option<String>,
    pattern: Option<String>,
    reply: String,
    #[serde(default)]
    times: Option<usize>,
    #[serde(default)]
    repeat: bool,
}

/// Replays canned replies: each call fires the first entry whose matcher
/// accepts the prompt and which still has uses left.
#[derive(Debug)]
pub struct ScriptedLlm {
    entries: Mutex<Vec<ScriptEntry>>,
    log: Mutex<Vec<(String, String)>>,
}

impl ScriptedLlm {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, ProviderError> {
        if entries.is_empty() {
            return Err(ProviderError::EmptyScript);
        }
        Ok(ScriptedLlm { entries: Mutex::new(entries), log: Mutex::new(Vec::new()) })
    }

    /// Entries as a JSON array of `{"contains"|"pattern": .., "reply": ..,
    /// "times": n, "repeat": bool}`; `times` defaults to 1.
    pub fn from_json(text: &str) -> Result<Self, ProviderError> {
        let bad = |message: String| ProviderError::Script { path: "<inline>".into(), message };
        let raw: Vec<EntryFile> = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        let mut entries = Vec::with_capacity(raw.len());
        for (i, e) in raw.into_iter().enumerate() {
            let matcher = match (e.contains, e.pattern) {
                (Some(s), None) => Matcher::Contains(s),
                (None, Some(p)) => Matcher::Pattern(Regex::new(&p).map_err(|err| bad(format!("entry {i}: {err}")))?),
                _ => return Err(bad(format!("entry {i}: exactly one of `contains` or `pattern` is required"))),
            };
            let remaining = if e.repeat { None } else { Some(e.times.unwrap_or(1)) };
            entries.push(ScriptEntry { matcher, reply: e.reply, remaining });
        }
        Self::new(entries)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Script { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_json(&text).map_err(|e| match e {
            ProviderError::Script { message, .. } => ProviderError::Script { path: path.display().to_string(), message },
            other => other,
        })
    }

    /// Every `(prompt, reply)` pair served so far.
    pub fn calls(&self) -> Vec<(String, String)> {
        self.log.lock().expect("script log lock").clone()
    }
}

impl LlmProvider for ScriptedLlm {
    fn complete(&self, prompt: &str, _temperature: f64) -> Result<Completion, ProviderError> {
        let mut entries = self.entries.lock().expect("script lock");
        let entry = entries
            .iter_mut()
            .find(|e| e.remaining != Some(0) && e.matcher.matches(prompt))
            .ok_or_else(|| ProviderError::NoScriptMatch(prompt.chars().take(80).collect()))?;
        if let Some(n) = &mut entry.remaining {
            *n -= 1;
        }
        let text = entry.reply.clone();
        drop(entries);
        self.log.lock().expect("script log lock").push((prompt.to_string(), text.clone()));
        Ok(Completion { usage: LlmUsage::approximate(prompt, &text), text })
    }
}

/// A provider computed from the prompt, for oracle selectors in tests.
pub struct FnLlm<F>(pub F);

impl<F> LlmProvider for FnLlm<F>
where
    F: Fn(&str) -> String + Send + Sync,
{
    fn complete(&self, prompt: &str, _temperature: f64) -> Result<Completion, ProviderError> {
        let text = (self.0)(prompt);
        Ok(Completion { usage: LlmUsage::approximate(prompt, &text), text })
    }
}

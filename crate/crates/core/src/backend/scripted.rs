//! Deterministic backends for tests and desk-scale runs.
//!
//! A [`ScriptedBackend`] routes each request by tag to a response program.
//! The program receives a ChaCha stream seeded from the backend seed and the
//! full request content, so responses depend only on `(request, seed)` and
//! never on call order.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::{BackendError, ChatBackend, ChatRequest, EmbeddingBackend};
use crate::rng::{derive_seed, fnv1a, fnv1a64, rng_for};

pub type ResponseProgram = Arc<dyn Fn(&ChatRequest, &mut ChaCha8Rng) -> Result<String, BackendError> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TagMatcher {
    Exact(String),
    Prefix(String),
    Any,
}

impl TagMatcher {
    fn matches(&self, tag: &str) -> bool {
        match self {
            TagMatcher::Exact(t) => t == tag,
            TagMatcher::Prefix(p) => tag.starts_with(p.as_str()),
            TagMatcher::Any => true,
        }
    }
}

#[derive(Clone)]
pub struct ScriptedBackend {
    rules: Vec<(TagMatcher, ResponseProgram)>,
    seed: u64,
    label: String,
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("rules", &self.rules.iter().map(|(m, _)| m).collect::<Vec<_>>())
            .field("seed", &self.seed)
            .finish()
    }
}

/// Hash of everything a response may depend on.
pub fn request_fingerprint(request: &ChatRequest) -> u64 {
    let mut h = fnv1a64(request.tag.as_bytes());
    h = fnv1a(h, &request.temperature.to_le_bytes());
    for m in &request.messages {
        h = fnv1a(h, format!("{:?}", m.role).as_bytes());
        h = fnv1a(h, &[0]);
        h = fnv1a(h, m.content.as_bytes());
        h = fnv1a(h, &[0xff]);
    }
    h
}

impl ScriptedBackend {
    pub fn new(seed: u64) -> Self {
        ScriptedBackend {
            rules: Vec::new(),
            seed,
            label: "scripted".into(),
        }
    }

    pub fn labeled(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Adds a rule for an exact tag. Earlier rules win.
    pub fn rule<F>(self, tag: &str, program: F) -> Self
    where
        F: Fn(&ChatRequest, &mut ChaCha8Rng) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        self.rule_matching(TagMatcher::Exact(tag.to_string()), program)
    }

    pub fn rule_matching<F>(mut self, matcher: TagMatcher, program: F) -> Self
    where
        F: Fn(&ChatRequest, &mut ChaCha8Rng) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        self.rules.push((matcher, Arc::new(program)));
        self
    }

    /// Inserts a rule ahead of all existing ones.
    pub fn override_rule<F>(mut self, tag: &str, program: F) -> Self
    where
        F: Fn(&ChatRequest, &mut ChaCha8Rng) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        self.rules
            .insert(0, (TagMatcher::Exact(tag.to_string()), Arc::new(program)));
        self
    }

    /// Fixed reply for a tag.
    pub fn reply(self, tag: &str, text: impl Into<String>) -> Self {
        let text = text.into();
        self.rule(tag, move |_, _| Ok(text.clone()))
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        request.check()?;
        let (_, program) = self
            .rules
            .iter()
            .find(|(m, _)| m.matches(&request.tag))
            .ok_or_else(|| BackendError::NoRule(request.tag.clone()))?;
        let mut rng = rng_for(self.seed, &format!("{:016x}", request_fingerprint(request)));
        program(request, &mut rng)
    }

    fn descriptor(&self) -> String {
        format!("{}(seed={})", self.label, self.seed)
    }
}

/// Feature-hashed character trigrams, L2-normalized.
#[derive(Debug, Clone)]
pub struct ScriptedEmbedder {
    dim: usize,
    seed: u64,
}

impl ScriptedEmbedder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(seed: u64) -> Self {
        Self::with_dimension(seed, Self::DEFAULT_DIM)
    }

    pub fn with_dimension(seed: u64, dim: usize) -> Self {
        ScriptedEmbedder { dim: dim.max(1), seed }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        let padded: Vec<char> = format!("  {}  ", text.to_lowercase()).chars().collect();
        let state = derive_seed(self.seed, "embedding");
        let mut buf = [0u8; 12];
        for gram in padded.windows(3) {
            let mut len = 0;
            for c in gram {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let h = fnv1a(state, &buf[..len]);
            let idx = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingBackend for ScriptedEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn descriptor(&self) -> String {
        format!("scripted-embed(d={},seed={})", self.dim, self.seed)
    }
}

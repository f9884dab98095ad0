//! Exit codes and the structured error printed on stderr.

use std::fmt;

use memgym_core::arena::{AgentError, ArenaError};
use memgym_core::backend::{BackendError, TemplateError};
use memgym_core::evolve::EvolveError;
use memgym_core::genesis::GenError;
use memgym_core::memory::MemoryError;
use memgym_core::metrics::MetricsError;
use memgym_core::model::ModelError;
use serde_json::json;

/// Bad arguments or configuration.
#[derive(Debug)]
pub struct UsageError(pub String);

/// Inputs that parse but do not fit together.
#[derive(Debug)]
pub struct ValidationError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}
impl std::error::Error for ValidationError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 2,
    Io = 3,
    Backend = 4,
    Validation = 5,
}

impl ExitKind {
    pub fn name(self) -> &'static str {
        match self {
            ExitKind::Usage => "usage",
            ExitKind::Io => "io",
            ExitKind::Backend => "backend",
            ExitKind::Validation => "validation",
        }
    }
}

fn model(e: &ModelError) -> ExitKind {
    match e {
        ModelError::Io { .. } => ExitKind::Io,
        _ => ExitKind::Validation,
    }
}

fn memory(e: &MemoryError) -> ExitKind {
    match e {
        MemoryError::Config(_) => ExitKind::Usage,
        MemoryError::Dimension { .. } => ExitKind::Validation,
        MemoryError::Backend(_) | MemoryError::Embedding(_) => ExitKind::Backend,
    }
}

fn backend(e: &BackendError) -> ExitKind {
    match e {
        BackendError::Template(_) | BackendError::InvalidRequest(_) => ExitKind::Validation,
        _ => ExitKind::Backend,
    }
}

fn agent(e: &AgentError) -> ExitKind {
    match e {
        AgentError::Backend(b) => backend(b),
        AgentError::Template(_) => ExitKind::Validation,
        AgentError::Memory(m) => memory(m),
        AgentError::Other(_) => ExitKind::Backend,
    }
}

fn arena(e: &ArenaError) -> ExitKind {
    match e {
        ArenaError::Session { source, .. } | ArenaError::Evaluation { source, .. } => agent(source),
        ArenaError::User(b) => backend(b),
        ArenaError::Model(m) => model(m),
        ArenaError::Template(_) | ArenaError::Compatibility(_) | ArenaError::EvaluationMutated(_) => {
            ExitKind::Validation
        }
    }
}

fn genesis(e: &GenError) -> ExitKind {
    match e {
        GenError::Backend(b) => backend(b),
        GenError::Model(m) => model(m),
        GenError::Template(_) | GenError::Validation(_) => ExitKind::Validation,
        // the model kept producing unusable output
        GenError::Invalid { .. } | GenError::Unverified { .. } => ExitKind::Backend,
    }
}

fn metrics(e: &MetricsError) -> ExitKind {
    match e {
        MetricsError::Model(m) => model(m),
        _ => ExitKind::Validation,
    }
}

fn evolve(e: &EvolveError) -> ExitKind {
    match e {
        EvolveError::Backend(b) => backend(b),
        EvolveError::Memory(m) => memory(m),
        EvolveError::Metrics(m) => metrics(m),
        EvolveError::Arena(a) => arena(a),
        EvolveError::Cycle { source, .. } => evolve(source),
        EvolveError::AgentKind(_) | EvolveError::Empty => ExitKind::Usage,
        EvolveError::Template(_) | EvolveError::Sentinels | EvolveError::NoClaims => ExitKind::Validation,
    }
}

/// Exit kind of the outermost error in the chain that this binary knows.
pub fn classify(err: &anyhow::Error) -> ExitKind {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return ExitKind::Usage;
        }
        if cause.is::<ValidationError>() || cause.is::<TemplateError>() {
            return ExitKind::Validation;
        }
        if cause.is::<std::io::Error>() || cause.is::<tempfile::PersistError>() {
            return ExitKind::Io;
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return model(e);
        }
        if let Some(e) = cause.downcast_ref::<BackendError>() {
            return backend(e);
        }
        if let Some(e) = cause.downcast_ref::<GenError>() {
            return genesis(e);
        }
        if let Some(e) = cause.downcast_ref::<ArenaError>() {
            return arena(e);
        }
        if let Some(e) = cause.downcast_ref::<AgentError>() {
            return agent(e);
        }
        if let Some(e) = cause.downcast_ref::<MemoryError>() {
            return memory(e);
        }
        if let Some(e) = cause.downcast_ref::<MetricsError>() {
            return metrics(e);
        }
        if let Some(e) = cause.downcast_ref::<EvolveError>() {
            return evolve(e);
        }
    }
    ExitKind::Validation
}

/// One JSON object on a single line.
pub fn structured(err: &anyhow::Error, kind: ExitKind) -> String {
    let causes: Vec<String> = err.chain().skip(1).map(ToString::to_string).collect();
    json!({
        "error": {
            "kind": kind.name(),
            "exit_code": kind as i32,
            "message": err.to_string(),
            "causes": causes,
        }
    })
    .to_string()
}

//! Builds the model backends for a command from the resolved settings.

use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use memgym_core::backend::live::{LiveBackend, ENV_API_KEY};
use memgym_core::backend::scripted::ScriptedEmbedder;
use memgym_core::backend::world::scripted_world;
use memgym_core::backend::{ChatBackend, EmbeddingBackend, LoggingBackend};

use crate::cli::BackendKind;
use crate::config::Settings;

#[derive(Clone)]
pub struct Backends {
    pub chat: Arc<dyn ChatBackend>,
    pub embed: Arc<dyn EmbeddingBackend>,
}

impl Backends {
    pub fn build(settings: &Settings, log_io: Option<&Path>) -> anyhow::Result<Backends> {
        let (chat, embed): (Arc<dyn ChatBackend>, Arc<dyn EmbeddingBackend>) = match settings.backend {
            BackendKind::Scripted => (
                Arc::new(scripted_world(settings.seed)),
                Arc::new(ScriptedEmbedder::new(settings.seed)),
            ),
            BackendKind::Live => {
                if settings.live.api_key.is_none() {
                    tracing::warn!("{ENV_API_KEY} is not set; requests are sent without credentials");
                }
                let live = Arc::new(LiveBackend::new(settings.live.clone())?);
                (live.clone(), live)
            }
        };
        let chat: Arc<dyn ChatBackend> = match log_io {
            Some(path) => Arc::new(
                LoggingBackend::create(chat, path).with_context(|| format!("opening I/O log {}", path.display()))?,
            ),
            None => chat,
        };
        Ok(Backends { chat, embed })
    }
}

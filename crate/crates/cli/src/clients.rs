//! Client specs: `mock:PATH` for scripted fixtures, `env` for the HTTP
//! endpoint configured through environment variables.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use factsteer::client::{CachedClient, ChatClient, HttpChatClient, MockClient};

pub enum AnyClient {
    Mock(MockClient),
    Http(CachedClient<HttpChatClient>),
}

impl ChatClient for AnyClient {
    fn complete(&self, prompt: &str) -> factsteer::Result<String> {
        match self {
            AnyClient::Mock(c) => c.complete(prompt),
            AnyClient::Http(c) => c.complete(prompt),
        }
    }

    fn id(&self) -> String {
        match self {
            AnyClient::Mock(c) => c.id(),
            AnyClient::Http(c) => c.id(),
        }
    }
}

pub fn parse_client(spec: &str, cache_dir: Option<&Path>) -> Result<AnyClient> {
    if let Some(path) = spec.strip_prefix("mock:") {
        let mock = MockClient::from_file(Path::new(path))
            .with_context(|| format!("loading mock client fixture {path}"))?;
        return Ok(AnyClient::Mock(mock));
    }
    match spec {
        "env" => {
            let http = HttpChatClient::from_env().context(
                "client spec `env` needs FACTSTEER_LLM_ENDPOINT (and optionally \
                 FACTSTEER_LLM_TOKEN / FACTSTEER_LLM_MODEL)",
            )?;
            Ok(AnyClient::Http(CachedClient::new(
                http,
                cache_dir.map(PathBuf::from),
            )))
        }
        other => bail!("unknown client spec {other:?}; use `mock:PATH` or `env`"),
    }
}

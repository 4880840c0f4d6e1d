//! HTTP keyword and search clients.
//!
//! Endpoints are URL templates taken from the environment, never from config
//! files, so credentials stay out of manifests:
//!
//! * `WEBHARVEST_KEYWORDS_URL`, optional `WEBHARVEST_KEYWORDS_TOKEN`;
//!   placeholders `{query}` and `{k}`.
//! * `WEBHARVEST_ENGINE_<TAG>_URL`, optional `WEBHARVEST_ENGINE_<TAG>_TOKEN`
//!   (tag upper-cased, `-` as `_`); placeholders `{query}` and `{top_k}`.
//!
//! Tokens are sent as `Authorization: Bearer <token>`. Responses are JSON:
//! either a bare array, or an object whose `keywords`, `results` or `urls`
//! member is one. Array items are strings or objects with a `keyword`/`url`
//! member.

use std::collections::BTreeMap;
use std::time::Duration;

use percent_encoding::{utf8_percent_encode, NON_ALPHANUMERIC};
use serde_json::Value;

use super::{AcquireError, EngineConfig, KeywordService, SearchBackend};

#[derive(Debug, Clone)]
struct Endpoint {
    service: String,
    template: String,
    token: Option<String>,
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(30)))
        .http_status_as_error(false)
        .build()
        .into()
}

fn env_endpoint(service: &str, prefix: &str) -> Result<Endpoint, AcquireError> {
    let template = std::env::var(format!("{prefix}_URL"))
        .map_err(|_| AcquireError::Config(format!("live mode needs {prefix}_URL for {service}")))?;
    Ok(Endpoint {
        service: service.into(),
        template,
        token: std::env::var(format!("{prefix}_TOKEN"))
            .ok()
            .filter(|t| !t.is_empty()),
    })
}

fn fill(template: &str, vars: &[(&str, String)]) -> String {
    vars.iter().fold(template.to_string(), |acc, (k, v)| {
        acc.replace(&format!("{{{k}}}"), v)
    })
}

fn get_json(agent: &ureq::Agent, ep: &Endpoint, url: &str) -> Result<Value, AcquireError> {
    let mut req = agent.get(url);
    if let Some(token) = &ep.token {
        req = req.header("Authorization", &format!("Bearer {token}"));
    }
    let mut resp = req.call().map_err(|e| match e {
        ureq::Error::StatusCode(429) => AcquireError::RateLimited {
            service: ep.service.clone(),
        },
        other => AcquireError::Unreachable {
            service: ep.service.clone(),
            message: other.to_string(),
        },
    })?;
    match resp.status().as_u16() {
        200..=299 => {}
        429 => {
            return Err(AcquireError::RateLimited {
                service: ep.service.clone(),
            })
        }
        status => {
            return Err(AcquireError::Http {
                service: ep.service.clone(),
                status,
            })
        }
    }
    let text = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| AcquireError::Unreachable {
            service: ep.service.clone(),
            message: e.to_string(),
        })?;
    serde_json::from_str(&text).map_err(|e| AcquireError::BadResponse {
        service: ep.service.clone(),
        message: e.to_string(),
    })
}

/// Pulls the ranked strings out of a response body.
fn ranked_strings(value: &Value, item_key: &str) -> Option<Vec<String>> {
    let list = match value {
        Value::Array(a) => a,
        Value::Object(o) => ["keywords", "results", "urls"]
            .iter()
            .find_map(|k| o.get(*k).and_then(Value::as_array))?,
        _ => return None,
    };
    list.iter()
        .map(|item| match item {
            Value::String(s) => Some(s.clone()),
            Value::Object(o) => o.get(item_key).and_then(Value::as_str).map(String::from),
            _ => None,
        })
        .collect()
}

pub struct HttpKeywords {
    endpoint: Endpoint,
    agent: ureq::Agent,
}

impl HttpKeywords {
    pub fn from_env() -> Result<Self, AcquireError> {
        Ok(HttpKeywords {
            endpoint: env_endpoint("keyword service", "WEBHARVEST_KEYWORDS")?,
            agent: agent(),
        })
    }
}

impl KeywordService for HttpKeywords {
    fn keywords(&self, phrase: &str, k: usize) -> Result<Vec<String>, AcquireError> {
        let url = fill(
            &self.endpoint.template,
            &[
                (
                    "query",
                    utf8_percent_encode(phrase, NON_ALPHANUMERIC).to_string(),
                ),
                ("k", k.to_string()),
            ],
        );
        let body = get_json(&self.agent, &self.endpoint, &url)?;
        ranked_strings(&body, "keyword").ok_or_else(|| AcquireError::BadResponse {
            service: self.endpoint.service.clone(),
            message: "expected a list of keywords".into(),
        })
    }
}

pub struct HttpSearch {
    endpoints: BTreeMap<String, Endpoint>,
    agent: ureq::Agent,
}

impl HttpSearch {
    /// Reads one endpoint per engine tag; every engine must be configured.
    pub fn from_env<'a>(
        engines: impl IntoIterator<Item = &'a EngineConfig>,
    ) -> Result<Self, AcquireError> {
        let endpoints = engines
            .into_iter()
            .map(|e| {
                let prefix = format!(
                    "WEBHARVEST_ENGINE_{}",
                    e.tag.to_ascii_uppercase().replace('-', "_")
                );
                Ok((e.tag.clone(), env_endpoint(&e.tag, &prefix)?))
            })
            .collect::<Result<_, AcquireError>>()?;
        Ok(HttpSearch {
            endpoints,
            agent: agent(),
        })
    }
}

impl SearchBackend for HttpSearch {
    fn search(&self, query: &str, engine: &EngineConfig) -> Result<Vec<String>, AcquireError> {
        let ep = self.endpoints.get(&engine.tag).ok_or_else(|| {
            AcquireError::Config(format!("no endpoint for engine {:?}", engine.tag))
        })?;
        let url = fill(
            &ep.template,
            &[
                (
                    "query",
                    utf8_percent_encode(query, NON_ALPHANUMERIC).to_string(),
                ),
                ("top_k", engine.top_k.to_string()),
            ],
        );
        let body = get_json(&self.agent, ep, &url)?;
        ranked_strings(&body, "url").ok_or_else(|| AcquireError::BadResponse {
            service: ep.service.clone(),
            message: "expected a list of result urls".into(),
        })
    }
}

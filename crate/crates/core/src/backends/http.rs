use std::time::Duration;

use serde_json::Value;

use super::wire::{ErrorBody, Route};
use super::{Transport, TransportError};
use crate::{Error, Result};

/// JSON-over-HTTP transport for one backend endpoint.
pub struct HttpTransport {
    base: String,
    client: reqwest::blocking::Client,
    bearer: Option<String>,
}

impl HttpTransport {
    pub fn new(endpoint: &str, timeout: Duration, bearer: Option<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("HTTP client for {endpoint}: {e}")))?;
        Ok(Self {
            base: endpoint.trim_end_matches('/').to_string(),
            client,
            bearer,
        })
    }
}

impl Transport for HttpTransport {
    fn post(&self, route: Route, body: &Value) -> std::result::Result<Value, TransportError> {
        let url = format!("{}{}", self.base, route.path());
        let mut req = self.client.post(&url).json(body);
        if let Some(token) = &self.bearer {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout(e.to_string())
            } else {
                TransportError::Connect(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout(e.to_string())
            } else {
                TransportError::Connect(e.to_string())
            }
        })?;
        if status != 200 {
            let message = serde_json::from_str::<ErrorBody>(&text)
                .map(|b| b.error)
                .unwrap_or(text);
            return Err(TransportError::Status { code: status, message });
        }
        serde_json::from_str(&text).map_err(|e| TransportError::Decode(e.to_string()))
    }
}

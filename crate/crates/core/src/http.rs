//! Thin JSON-over-HTTP helper shared by the remote generator, NLI oracle and
//! embedding clients.

use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone)]
pub(crate) struct JsonClient {
    agent: ureq::Agent,
    retries: usize,
}

impl JsonClient {
    pub(crate) fn new(timeout: Duration, retries: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .new_agent();
        Self { agent, retries }
    }

    /// POSTs `body` and parses a JSON reply. Transport errors and 5xx replies
    /// are retried with linear backoff; 4xx replies are not.
    pub(crate) fn post(&self, url: &str, bearer: Option<&str>, body: &impl Serialize) -> Result<Value> {
        let mut last = None;
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 * attempt as u64));
            }
            let mut req = self.agent.post(url).header("Content-Type", "application/json");
            if let Some(token) = bearer {
                req = req.header("Authorization", &format!("Bearer {token}"));
            }
            match req.send_json(body) {
                Ok(mut resp) => {
                    return resp
                        .body_mut()
                        .read_json::<Value>()
                        .map_err(|e| Error::Upstream(format!("{url}: unreadable JSON body: {e}")));
                }
                Err(ureq::Error::StatusCode(code)) if code < 500 => {
                    return Err(Error::Upstream(format!("{url}: http status {code}")));
                }
                Err(e) => last = Some(e),
            }
        }
        Err(Error::Transport(format!(
            "{url}: {}",
            last.map(|e| e.to_string()).unwrap_or_else(|| "no attempt made".into())
        )))
    }
}

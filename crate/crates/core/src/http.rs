//! Minimal blocking JSON-over-HTTP helpers shared by the remote clients.

use std::time::Duration;

const MAX_RESPONSE_BYTES: u64 = 256 * 1024 * 1024;

pub(crate) fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

/// POSTs `body` and returns `(status, response text)`. Transport failures are
/// retried up to `retries` extra times; HTTP error statuses are returned as is.
/// On exhaustion returns `(attempts, last error message)`.
pub(crate) fn post_json(
    agent: &ureq::Agent,
    url: &str,
    body: &[u8],
    retries: usize,
) -> Result<(u16, String), (usize, String)> {
    let mut last = String::new();
    for attempt in 1..=retries + 1 {
        let result = agent
            .post(url)
            .header("content-type", "application/json")
            .send(body)
            .and_then(|mut resp| {
                let status = resp.status().as_u16();
                let text = resp
                    .body_mut()
                    .with_config()
                    .limit(MAX_RESPONSE_BYTES)
                    .read_to_string()?;
                Ok((status, text))
            });
        match result {
            Ok(ok) => return Ok(ok),
            Err(e) => {
                log::warn!("POST {url} attempt {attempt} failed: {e}");
                last = e.to_string();
            }
        }
    }
    Err((retries + 1, last))
}

/// GET with the same retry policy as [`post_json`].
pub(crate) fn get(agent: &ureq::Agent, url: &str, retries: usize) -> Result<(u16, String), (usize, String)> {
    let mut last = String::new();
    for attempt in 1..=retries + 1 {
        let result = agent.get(url).call().and_then(|mut resp| {
            let status = resp.status().as_u16();
            let text = resp.body_mut().read_to_string()?;
            Ok((status, text))
        });
        match result {
            Ok(ok) => return Ok(ok),
            Err(e) => {
                log::warn!("GET {url} attempt {attempt} failed: {e}");
                last = e.to_string();
            }
        }
    }
    Err((retries + 1, last))
}

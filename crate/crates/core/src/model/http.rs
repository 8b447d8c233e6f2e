use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use super::protocol::{self, Hello};
use super::{Inputs, Model, OutputVector};
use crate::error::{ModelError, Result};

/// External model behind `GET /hello` and `POST /predict`.
pub struct HttpModel {
    base: String,
    names: Vec<String>,
    hello: Hello,
    agent: ureq::Agent,
    in_flight: usize,
    next_id: AtomicU64,
}

fn transport(e: ureq::Error) -> ModelError {
    match e {
        ureq::Error::Status(code, response) => {
            let body = response.into_string().unwrap_or_default();
            ModelError::Transport(format!("HTTP {code}: {}", protocol::excerpt(&body)))
        }
        ureq::Error::Transport(t) => {
            let text = t.to_string();
            if text.contains("timed out") || text.contains("Timeout") {
                ModelError::Transport(format!("timeout: {text}"))
            } else {
                ModelError::Transport(text)
            }
        }
    }
}

impl HttpModel {
    pub fn connect(
        base: &str,
        names: Vec<String>,
        timeout: Duration,
        in_flight: usize,
    ) -> Result<Self> {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        let base = base.trim_end_matches('/').to_string();
        let body = agent
            .get(&format!("{base}/hello"))
            .call()
            .map_err(transport)?
            .into_string()
            .map_err(|e| ModelError::Transport(e.to_string()))?;
        let hello = protocol::parse_hello(body.trim())?;
        Ok(Self {
            base,
            names,
            hello,
            agent,
            in_flight: in_flight.max(1),
            next_id: AtomicU64::new(0),
        })
    }

    pub fn hello(&self) -> &Hello {
        &self.hello
    }
}

impl Model for HttpModel {
    fn name(&self) -> String {
        format!("http:{} ({})", self.base, self.hello.name)
    }

    fn output_dim(&self) -> Option<usize> {
        Some(self.hello.output_dim)
    }

    fn batch_limit(&self) -> usize {
        self.hello.batch
    }

    fn max_in_flight(&self) -> usize {
        self.in_flight
    }

    fn is_external(&self) -> bool {
        true
    }

    fn predict(&self, inputs: &Inputs<'_>) -> Result<OutputVector, ModelError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let request = protocol::encode_predict(id, &self.names, inputs);
        let body = self
            .agent
            .post(&format!("{}/predict", self.base))
            .set("Content-Type", "application/json")
            .send_string(&request)
            .map_err(transport)?
            .into_string()
            .map_err(|e| ModelError::Transport(e.to_string()))?;
        let response = protocol::decode_response(body.trim())?;
        if response.id.is_some_and(|got| got != id) {
            return Err(ModelError::Malformed {
                reason: format!("response id does not match request id {id}"),
                excerpt: protocol::excerpt(&body),
            });
        }
        let values = response
            .result
            .map_err(|message| ModelError::Remote { id, message })?;
        if values.len() != self.hello.output_dim {
            return Err(ModelError::LengthDrift {
                expected: self.hello.output_dim,
                got: values.len(),
            });
        }
        OutputVector::new(values)
    }
}

//! Wire protocol version 1: newline-delimited UTF-8 JSON.
//!
//! ```text
//! -> {"op":"hello"}
//! <- {"version":"1","output_dim":C,"batch":B,"name":"..."}
//! -> {"id":7,"op":"predict","inputs":{"image":{"shape":[2,2],"data":[...]},"report":{"tokens":[...]}}}
//! <- {"id":7,"output":[...]}    or    {"id":7,"error":"..."}
//! ```
//!
//! Floats are written in shortest round-trip form, so every `f32`-origin
//! value crosses the wire exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::ModalityInput;
use crate::error::ModelError;
use crate::tensor::Tensor;

pub const PROTOCOL_VERSION: &str = "1";
pub const HELLO_REQUEST: &str = r#"{"op":"hello"}"#;

#[derive(Serialize)]
#[serde(untagged)]
enum WireInputRef<'a> {
    Dense { shape: &'a [usize], data: &'a [f64] },
    Tokens { tokens: &'a [String] },
}

#[derive(Serialize)]
struct PredictRequestRef<'a> {
    id: u64,
    op: &'static str,
    inputs: BTreeMap<&'a str, WireInputRef<'a>>,
}

/// Handshake reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub version: String,
    pub output_dim: usize,
    pub batch: usize,
    pub name: String,
}

pub(crate) fn excerpt(s: &str) -> String {
    const MAX: usize = 200;
    if s.len() <= MAX {
        s.to_string()
    } else {
        let mut end = MAX;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &s[..end])
    }
}

fn malformed(reason: impl Into<String>, payload: &str) -> ModelError {
    ModelError::Malformed {
        reason: reason.into(),
        excerpt: excerpt(payload),
    }
}

/// One predict request line (no trailing newline).
pub fn encode_predict(id: u64, names: &[String], inputs: &[&ModalityInput]) -> String {
    let inputs = names
        .iter()
        .zip(inputs)
        .map(|(name, input)| {
            let wire = match input {
                ModalityInput::Dense(t) => WireInputRef::Dense {
                    shape: t.shape(),
                    data: t.data(),
                },
                ModalityInput::Tokens(tokens) => WireInputRef::Tokens { tokens },
            };
            (name.as_str(), wire)
        })
        .collect();
    serde_json::to_string(&PredictRequestRef {
        id,
        op: "predict",
        inputs,
    })
    .expect("predict request serializes")
}

/// A decoded response line: the echoed id and either an output or an error message.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub id: Option<u64>,
    pub result: Result<Vec<f64>, String>,
}

pub fn decode_response(line: &str) -> Result<Response, ModelError> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| malformed(format!("invalid JSON: {e}"), line))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("response is not an object", line))?;
    let id = match obj.get("id") {
        Some(Value::Null) | None => None,
        Some(v) => Some(
            v.as_u64()
                .ok_or_else(|| malformed("id is not a nonnegative integer", line))?,
        ),
    };
    match (obj.get("output"), obj.get("error")) {
        (Some(Value::Array(items)), None) => {
            let values = items
                .iter()
                .map(|v| v.as_f64())
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| malformed("output contains a non-number", line))?;
            Ok(Response {
                id,
                result: Ok(values),
            })
        }
        (None, Some(Value::String(message))) => Ok(Response {
            id,
            result: Err(message.clone()),
        }),
        (Some(_), None) => Err(malformed("output is not an array", line)),
        (None, Some(_)) => Err(malformed("error is not a string", line)),
        (Some(_), Some(_)) => Err(malformed("both output and error present", line)),
        (None, None) => Err(malformed("neither output nor error present", line)),
    }
}

/// Validates a handshake reply.
pub fn parse_hello(line: &str) -> Result<Hello, ModelError> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| malformed(format!("invalid JSON: {e}"), line))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("hello reply is not an object", line))?;
    let version = match obj.get("version") {
        Some(Value::String(v)) => v.clone(),
        Some(other) => other.to_string(),
        None => return Err(ModelError::Handshake("missing version field".into())),
    };
    if version != PROTOCOL_VERSION {
        return Err(ModelError::Version { got: version });
    }
    let output_dim = match obj.get("output_dim") {
        Some(v) => v.as_u64().filter(|&c| c >= 1).ok_or_else(|| {
            ModelError::Handshake(format!("output_dim must be a positive integer, got {v}"))
        })?,
        None => return Err(ModelError::Handshake("missing output_dim field".into())),
    };
    let batch = match obj.get("batch") {
        Some(v) => v.as_u64().filter(|&b| b >= 1).ok_or_else(|| {
            ModelError::Handshake(format!("batch must be a positive integer, got {v}"))
        })?,
        None => 1,
    };
    let name = obj
        .get("name")
        .and_then(Value::as_str)
        .unwrap_or("unnamed")
        .to_string();
    Ok(Hello {
        version,
        output_dim: output_dim as usize,
        batch: batch as usize,
        name,
    })
}

/// Server-side view of a request line.
#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Hello,
    Predict {
        id: u64,
        inputs: BTreeMap<String, ModalityInput>,
    },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WireInput {
    Dense { shape: Vec<usize>, data: Vec<f64> },
    Tokens { tokens: Vec<String> },
}

/// Parses a request line. On failure returns the id when one could be read.
pub fn decode_request(line: &str) -> Result<Request, (Option<u64>, String)> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| (None, format!("invalid JSON: {e}")))?;
    let id = value.get("id").and_then(Value::as_u64);
    let op = value
        .get("op")
        .and_then(Value::as_str)
        .ok_or_else(|| (id, "missing op".to_string()))?;
    match op {
        "hello" => Ok(Request::Hello),
        "predict" => {
            let id = id.ok_or_else(|| (None, "predict request without integer id".to_string()))?;
            let raw = value
                .get("inputs")
                .cloned()
                .ok_or_else(|| (Some(id), "missing inputs".to_string()))?;
            let raw: BTreeMap<String, WireInput> =
                serde_json::from_value(raw).map_err(|e| (Some(id), format!("bad inputs: {e}")))?;
            let mut inputs = BTreeMap::new();
            for (name, wire) in raw {
                let input = match wire {
                    WireInput::Dense { shape, data } => ModalityInput::Dense(
                        Tensor::new(shape, data).map_err(|e| (Some(id), format!("{name}: {e}")))?,
                    ),
                    WireInput::Tokens { tokens } => ModalityInput::Tokens(tokens),
                };
                inputs.insert(name, input);
            }
            Ok(Request::Predict { id, inputs })
        }
        other => Err((id, format!("unknown op {other:?}"))),
    }
}

#[derive(Serialize)]
struct OutputReply<'a> {
    id: u64,
    output: &'a [f64],
}

#[derive(Serialize)]
struct ErrorReply<'a> {
    id: Option<u64>,
    error: &'a str,
}

pub fn encode_output(id: u64, output: &[f64]) -> String {
    serde_json::to_string(&OutputReply { id, output }).expect("reply serializes")
}

pub fn encode_error(id: Option<u64>, message: &str) -> String {
    serde_json::to_string(&ErrorReply { id, error: message }).expect("reply serializes")
}

pub fn encode_hello(hello: &Hello) -> String {
    serde_json::to_string(hello).expect("hello serializes")
}

//! Black-box prediction boundary.
//!
//! The analyzer only ever calls [`Model::predict`] / [`Model::predict_batch`]
//! with one input per modality (manifest order) and reads back a vector of
//! `C` finite reals.

mod builtin;
pub mod http;
pub mod protocol;
pub mod server;
pub mod subprocess;

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dataset::{ModalityInput, ModalitySpec};
use crate::error::{Error, ModelError, Result};

pub use builtin::{BuiltinModel, BuiltinSpec, ModalityWeights};
pub use http::HttpModel;
pub use subprocess::SubprocessModel;

/// A model's output for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputVector(Vec<f64>);

impl OutputVector {
    /// Rejects non-finite components.
    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(ModelError::NonFinite { index, value });
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Inputs for one forward pass, one per modality in manifest order.
pub type Inputs<'a> = [&'a ModalityInput];

pub trait Model: Send + Sync {
    /// Identity recorded in reports.
    fn name(&self) -> String;

    /// Number of output components, when known before the first call.
    fn output_dim(&self) -> Option<usize>;

    /// Largest batch accepted by [`Model::predict_batch`].
    fn batch_limit(&self) -> usize {
        usize::MAX
    }

    /// How many calls may be in flight at once. The engine never exceeds it.
    fn max_in_flight(&self) -> usize {
        usize::MAX
    }

    /// Whether outputs cross a float transport (affects recheck tolerance).
    fn is_external(&self) -> bool {
        false
    }

    fn predict(&self, inputs: &Inputs<'_>) -> Result<OutputVector, ModelError>;

    /// Order-preserving; any element failure fails the whole batch.
    fn predict_batch(
        &self,
        batch: &[Vec<&ModalityInput>],
    ) -> Result<Vec<OutputVector>, ModelError> {
        check_batch_len(batch.len(), self.batch_limit())?;
        batch
            .iter()
            .enumerate()
            .map(|(index, inputs)| {
                self.predict(inputs).map_err(|e| ModelError::BatchElement {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

pub(crate) fn check_batch_len(len: usize, limit: usize) -> Result<(), ModelError> {
    if len > limit {
        Err(ModelError::BatchTooLarge { len, limit })
    } else {
        Ok(())
    }
}

/// Optional transform applied to every model output before distances.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PostTransform {
    #[default]
    None,
    Softmax,
    Sigmoid,
}

impl PostTransform {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "softmax" => Ok(Self::Softmax),
            "sigmoid" => Ok(Self::Sigmoid),
            _ => Err(Error::Invalid(format!(
                "post-transform {s:?}: expected none, softmax or sigmoid"
            ))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Softmax => "softmax",
            Self::Sigmoid => "sigmoid",
        }
    }

    pub fn apply(self, out: OutputVector) -> OutputVector {
        match self {
            Self::None => out,
            Self::Softmax => OutputVector(softmax(&out.0)),
            Self::Sigmoid => OutputVector(out.0.iter().map(|&v| sigmoid(v)).collect()),
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Transport settings for external models.
#[derive(Debug, Clone)]
pub struct ModelOptions {
    /// Per-call timeout.
    pub timeout: Duration,
    /// Concurrent requests allowed for HTTP handles.
    pub in_flight: usize,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(60),
            in_flight: 4,
        }
    }
}

/// `builtin:<json or @file>`, `exec:<command>` or `http:<url>`.
pub fn open_model(
    spec: &str,
    modalities: &[ModalitySpec],
    options: &ModelOptions,
) -> Result<Box<dyn Model>> {
    let names: Vec<String> = modalities.iter().map(|m| m.name.clone()).collect();
    if let Some(rest) = spec.strip_prefix("builtin:") {
        let json = match rest.strip_prefix('@') {
            Some(path) => std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
            None => rest.to_string(),
        };
        let parsed: BuiltinSpec = serde_json::from_str(&json)
            .map_err(|e| Error::Invalid(format!("builtin model spec: {e}")))?;
        Ok(Box::new(BuiltinModel::new(parsed, modalities)?))
    } else if let Some(cmd) = spec.strip_prefix("exec:") {
        Ok(Box::new(SubprocessModel::spawn(
            cmd,
            names,
            options.timeout,
        )?))
    } else if spec.starts_with("http:") || spec.starts_with("https:") {
        let url = match spec.strip_prefix("http:") {
            Some(rest) if rest.starts_with("//") => format!("http:{rest}"),
            Some(rest) if rest.starts_with("http://") || rest.starts_with("https://") => {
                rest.to_string()
            }
            Some(rest) => format!("http://{rest}"),
            None => spec.to_string(),
        };
        Ok(Box::new(HttpModel::connect(
            &url,
            names,
            options.timeout,
            options.in_flight,
        )?))
    } else {
        Err(Error::Invalid(format!(
            "model {spec:?}: expected builtin:<spec>, exec:<command> or http:<url>"
        )))
    }
}

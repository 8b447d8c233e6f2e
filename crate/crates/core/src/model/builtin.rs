use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{softmax, Inputs, Model, OutputVector};
use crate::dataset::{ModalityInput, ModalityKind, ModalitySpec};
use crate::error::{Error, ModelError, Result};
use crate::tensor::Tensor;

/// Weights for one modality: a dense vector over the flattened numeric input,
/// or a per-token lexicon for text (unknown tokens weigh 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModalityWeights {
    Dense(Vec<f64>),
    Lexicon(BTreeMap<String, f64>),
}

impl ModalityWeights {
    fn dot(&self, input: &ModalityInput) -> Result<f64, ModelError> {
        match (self, input) {
            (Self::Dense(w), ModalityInput::Dense(x)) if w.len() == x.len() => {
                Ok(w.iter().zip(x.data()).map(|(a, b)| a * b).sum())
            }
            (Self::Dense(w), ModalityInput::Dense(x)) => Err(ModelError::Input(format!(
                "{} weights for {} features",
                w.len(),
                x.len()
            ))),
            (Self::Lexicon(lex), ModalityInput::Tokens(tokens)) => {
                Ok(tokens.iter().filter_map(|t| lex.get(t)).sum())
            }
            _ => Err(ModelError::Input(
                "weights do not match the input kind".into(),
            )),
        }
    }
}

/// Oracle models with known, closed-form behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinSpec {
    /// `Σ_i w_i · x_i + bias`, one output.
    LinearFusion {
        weights: Vec<ModalityWeights>,
        #[serde(default)]
        bias: f64,
    },
    /// Evaluates `inner` with every other modality replaced by a fixed
    /// neutral input (zeros, or no tokens).
    SingleModality {
        index: usize,
        inner: Box<BuiltinSpec>,
    },
    Constant(Vec<f64>),
    /// Softmax over per-class linear scores; `weights[class][modality]`.
    SoftmaxLinear {
        weights: Vec<Vec<ModalityWeights>>,
        bias: Vec<f64>,
    },
}

impl BuiltinSpec {
    fn output_dim(&self) -> usize {
        match self {
            Self::LinearFusion { .. } => 1,
            Self::SingleModality { inner, .. } => inner.output_dim(),
            Self::Constant(v) => v.len(),
            Self::SoftmaxLinear { bias, .. } => bias.len(),
        }
    }

    fn validate(&self, modalities: &[ModalitySpec]) -> Result<()> {
        let check_weights = |weights: &[ModalityWeights], what: &str| -> Result<()> {
            if weights.len() != modalities.len() {
                return Err(Error::Invalid(format!(
                    "{what}: {} weight vectors for {} modalities",
                    weights.len(),
                    modalities.len()
                )));
            }
            for (w, spec) in weights.iter().zip(modalities) {
                match (w, &spec.kind) {
                    (ModalityWeights::Lexicon(_), ModalityKind::Text) => {}
                    (ModalityWeights::Dense(w), kind) if !kind.is_text() => {
                        if w.len() != spec.element_count() {
                            return Err(Error::Invalid(format!(
                                "{what}: modality {:?} has {} features, weights have {}",
                                spec.name,
                                spec.element_count(),
                                w.len()
                            )));
                        }
                    }
                    _ => {
                        return Err(Error::Invalid(format!(
                            "{what}: modality {:?} ({}) needs {} weights",
                            spec.name,
                            spec.kind.label(),
                            if spec.kind.is_text() {
                                "lexicon"
                            } else {
                                "dense"
                            }
                        )))
                    }
                }
            }
            Ok(())
        };
        match self {
            Self::LinearFusion { weights, .. } => check_weights(weights, "linear_fusion"),
            Self::SingleModality { index, inner } => {
                if *index >= modalities.len() {
                    return Err(Error::Invalid(format!(
                        "single_modality index {index} out of range for {} modalities",
                        modalities.len()
                    )));
                }
                inner.validate(modalities)
            }
            Self::Constant(v) => {
                if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                    Err(Error::Invalid(
                        "constant output must be nonempty and finite".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            Self::SoftmaxLinear { weights, bias } => {
                if weights.is_empty() || weights.len() != bias.len() {
                    return Err(Error::Invalid(format!(
                        "softmax_linear: {} classes of weights, {} biases",
                        weights.len(),
                        bias.len()
                    )));
                }
                weights
                    .iter()
                    .try_for_each(|w| check_weights(w, "softmax_linear"))
            }
        }
    }

    fn eval(&self, inputs: &Inputs<'_>, neutral: &[ModalityInput]) -> Result<Vec<f64>, ModelError> {
        match self {
            Self::LinearFusion { weights, bias } => {
                let mut total = *bias;
                for (w, x) in weights.iter().zip(inputs) {
                    total += w.dot(x)?;
                }
                Ok(vec![total])
            }
            Self::SingleModality { index, inner } => {
                let masked: Vec<&ModalityInput> = neutral
                    .iter()
                    .enumerate()
                    .map(|(i, n)| if i == *index { inputs[i] } else { n })
                    .collect();
                inner.eval(&masked, neutral)
            }
            Self::Constant(v) => Ok(v.clone()),
            Self::SoftmaxLinear { weights, bias } => {
                let mut logits = Vec::with_capacity(bias.len());
                for (class_w, b) in weights.iter().zip(bias) {
                    let mut total = *b;
                    for (w, x) in class_w.iter().zip(inputs) {
                        total += w.dot(x)?;
                    }
                    logits.push(total);
                }
                Ok(softmax(&logits))
            }
        }
    }
}

/// A [`BuiltinSpec`] bound to a manifest's modalities.
#[derive(Debug, Clone)]
pub struct BuiltinModel {
    spec: BuiltinSpec,
    shapes: Vec<Option<Vec<usize>>>,
    neutral: Vec<ModalityInput>,
}

impl BuiltinModel {
    pub fn new(spec: BuiltinSpec, modalities: &[ModalitySpec]) -> Result<Self> {
        spec.validate(modalities)?;
        let neutral = modalities
            .iter()
            .map(|m| match &m.shape {
                Some(shape) => ModalityInput::Dense(Tensor::zeros(shape.clone())),
                None => ModalityInput::Tokens(Vec::new()),
            })
            .collect();
        Ok(Self {
            spec,
            shapes: modalities.iter().map(|m| m.shape.clone()).collect(),
            neutral,
        })
    }

    pub fn spec(&self) -> &BuiltinSpec {
        &self.spec
    }
}

impl Model for BuiltinModel {
    fn name(&self) -> String {
        format!(
            "builtin:{}",
            serde_json::to_string(&self.spec).expect("builtin spec serializes")
        )
    }

    fn output_dim(&self) -> Option<usize> {
        Some(self.spec.output_dim())
    }

    fn predict(&self, inputs: &Inputs<'_>) -> Result<OutputVector, ModelError> {
        if inputs.len() != self.shapes.len() {
            return Err(ModelError::Input(format!(
                "{} inputs for {} modalities",
                inputs.len(),
                self.shapes.len()
            )));
        }
        for (i, (x, shape)) in inputs.iter().zip(&self.shapes).enumerate() {
            let ok = match (x, shape) {
                (ModalityInput::Dense(t), Some(s)) => t.shape() == s.as_slice(),
                (ModalityInput::Tokens(_), None) => true,
                _ => false,
            };
            if !ok {
                return Err(ModelError::Input(format!(
                    "modality {i} does not match its declared shape"
                )));
            }
        }
        OutputVector::new(self.spec.eval(inputs, &self.neutral)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_modalities() -> Vec<ModalitySpec> {
        vec![
            ModalitySpec::tabular("x1", 2),
            ModalitySpec::tabular("x2", 1),
        ]
    }

    fn dense(v: &[f64]) -> ModalityInput {
        ModalityInput::Dense(Tensor::vector(v.to_vec()))
    }

    fn linear() -> BuiltinSpec {
        BuiltinSpec::LinearFusion {
            weights: vec![
                ModalityWeights::Dense(vec![1.0, 1.0]),
                ModalityWeights::Dense(vec![1.0]),
            ],
            bias: 0.0,
        }
    }

    #[test]
    fn linear_fusion_dot_products() {
        let m = BuiltinModel::new(linear(), &two_modalities()).unwrap();
        let (a, b) = (dense(&[1.0, 2.0]), dense(&[3.0]));
        assert_eq!(m.predict(&[&a, &b]).unwrap().as_slice(), &[6.0]);
        assert_eq!(m.output_dim(), Some(1));
    }

    #[test]
    fn constant_ignores_inputs() {
        let m =
            BuiltinModel::new(BuiltinSpec::Constant(vec![0.3, 0.7]), &two_modalities()).unwrap();
        let (a, b) = (dense(&[9.0, -2.0]), dense(&[3.0]));
        assert_eq!(m.predict(&[&a, &b]).unwrap().as_slice(), &[0.3, 0.7]);
    }

    #[test]
    fn single_modality_ignores_the_rest() {
        let spec = BuiltinSpec::SingleModality {
            index: 1,
            inner: Box::new(linear()),
        };
        let m = BuiltinModel::new(spec, &two_modalities()).unwrap();
        let b = dense(&[3.0]);
        let p1 = m.predict(&[&dense(&[1.0, 2.0]), &b]).unwrap();
        let p2 = m.predict(&[&dense(&[-50.0, 8.0]), &b]).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.as_slice(), &[3.0]);
    }

    #[test]
    fn lexicon_weights_for_text() {
        let mods = vec![ModalitySpec::text("report"), ModalitySpec::tabular("t", 1)];
        let spec = BuiltinSpec::LinearFusion {
            weights: vec![
                ModalityWeights::Lexicon([("acute".to_string(), 2.0)].into_iter().collect()),
                ModalityWeights::Dense(vec![1.0]),
            ],
            bias: 0.5,
        };
        let m = BuiltinModel::new(spec, &mods).unwrap();
        let text = ModalityInput::Tokens(vec!["no".into(), "acute".into(), "acute".into()]);
        assert_eq!(
            m.predict(&[&text, &dense(&[1.0])]).unwrap().as_slice(),
            &[5.5]
        );
    }

    #[test]
    fn validation_catches_mismatches() {
        let bad = BuiltinSpec::LinearFusion {
            weights: vec![
                ModalityWeights::Dense(vec![1.0]),
                ModalityWeights::Dense(vec![1.0]),
            ],
            bias: 0.0,
        };
        assert!(BuiltinModel::new(bad, &two_modalities()).is_err());
        let bad = BuiltinSpec::SingleModality {
            index: 5,
            inner: Box::new(linear()),
        };
        assert!(BuiltinModel::new(bad, &two_modalities()).is_err());
        let bad = BuiltinSpec::SoftmaxLinear {
            weights: vec![],
            bias: vec![],
        };
        assert!(BuiltinModel::new(bad, &two_modalities()).is_err());
    }

    #[test]
    fn spec_json_shape() {
        let json =
            r#"{"single_modality":{"index":1,"inner":{"linear_fusion":{"weights":[[1,1],[1]]}}}}"#;
        let spec: BuiltinSpec = serde_json::from_str(json).unwrap();
        assert_eq!(
            spec,
            BuiltinSpec::SingleModality {
                index: 1,
                inner: Box::new(linear())
            }
        );
        let c: BuiltinSpec = serde_json::from_str(r#"{"constant":[0.3,0.7]}"#).unwrap();
        assert_eq!(c, BuiltinSpec::Constant(vec![0.3, 0.7]));
    }

    #[test]
    fn batch_matches_sequential() {
        let m = BuiltinModel::new(linear(), &two_modalities()).unwrap();
        let (a, b) = (dense(&[1.0, 2.0]), dense(&[3.0]));
        let out = m.predict_batch(&[vec![&a, &b], vec![&a, &b]]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], out[1]);
        assert!(m.predict_batch(&[]).unwrap().is_empty());
    }
}

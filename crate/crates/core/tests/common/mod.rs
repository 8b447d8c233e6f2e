#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};

use modcontrib::dataset::{Dataset, ModalityInput, ModalitySpec, Sample};
use modcontrib::masking::OcclusionPlan;
use modcontrib::metric::PlanSource;
use modcontrib::model::{BuiltinSpec, Inputs, ModalityWeights, Model, OutputVector};
use modcontrib::tensor::Tensor;
use modcontrib::ModelError;
use rand::seq::SliceRandom;
use rand::Rng;

/// A random linear fusion problem, kept as plain numbers so the oracle never
/// touches the engine's data structures.
#[derive(Debug, Clone)]
pub struct Instance {
    pub weights: Vec<Vec<f64>>,
    pub bias: f64,
    /// `x[k][i][j]`
    pub x: Vec<Vec<Vec<f64>>>,
    /// `patches[i][l]` lists feature indices.
    pub patches: Vec<Vec<Vec<usize>>>,
}

impl Instance {
    pub fn random(rng: &mut impl Rng) -> Self {
        let n = rng.gen_range(1..=3);
        let big_n = rng.gen_range(1..=8);
        let lens: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=16)).collect();
        let weights = lens
            .iter()
            .map(|&len| (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let x = (0..big_n)
            .map(|_| {
                lens.iter()
                    .map(|&len| (0..len).map(|_| rng.gen_range(-5.0..5.0)).collect())
                    .collect()
            })
            .collect();
        let patches = lens.iter().map(|&len| random_partition(rng, len)).collect();
        Self {
            weights,
            bias: rng.gen_range(-1.0..1.0),
            x,
            patches,
        }
    }

    pub fn n(&self) -> usize {
        self.weights.len()
    }

    pub fn lens(&self) -> Vec<usize> {
        self.weights.iter().map(Vec::len).collect()
    }

    pub fn dataset(&self) -> Dataset {
        let mods: Vec<ModalitySpec> = self
            .lens()
            .iter()
            .enumerate()
            .map(|(i, &len)| ModalitySpec::tabular(format!("m{i}"), len))
            .collect();
        let samples = self
            .x
            .iter()
            .enumerate()
            .map(|(k, xs)| Sample {
                id: format!("k{k}"),
                inputs: xs
                    .iter()
                    .map(|v| ModalityInput::Dense(Tensor::vector(v.clone())))
                    .collect(),
            })
            .collect();
        Dataset::new("instance", mods, samples).unwrap()
    }

    pub fn builtin_spec(&self) -> BuiltinSpec {
        BuiltinSpec::LinearFusion {
            weights: self
                .weights
                .iter()
                .cloned()
                .map(ModalityWeights::Dense)
                .collect(),
            bias: self.bias,
        }
    }

    pub fn plans(&self) -> Vec<PlanSource> {
        self.patches
            .iter()
            .enumerate()
            .map(|(i, p)| {
                PlanSource::Fixed(OcclusionPlan::new(i, p.clone(), self.weights[i].len()).unwrap())
            })
            .collect()
    }

    fn predict(&self, x: &[Vec<f64>]) -> f64 {
        let mut y = self.bias;
        for (w, xi) in self.weights.iter().zip(x) {
            for (a, b) in w.iter().zip(xi) {
                y += a * b;
            }
        }
        y
    }
}

/// Shuffled indices cut at random points; patches need not be contiguous.
pub fn random_partition(rng: &mut impl Rng, len: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    let h = rng.gen_range(1..=len);
    let mut cuts: Vec<usize> = (1..len).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(h - 1).collect();
    cuts.sort_unstable();
    let mut out = Vec::new();
    let mut start = 0;
    for c in cuts.into_iter().chain(std::iter::once(len)) {
        let mut patch = idx[start..c].to_vec();
        patch.sort_unstable();
        out.push(patch);
        start = c;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleFill {
    Zero,
    Mean,
}

/// Output of the brute-force reference.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub m: Vec<f64>,
    pub mp: Vec<Vec<f64>>,
    pub calls: usize,
}

/// Direct transcription of the occlusion loop: scalar output, so every
/// distance is a single absolute difference.
pub fn brute_force(inst: &Instance, fill: OracleFill) -> OracleResult {
    let big_n = inst.x.len();
    let n = inst.n();
    let fill_values: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..inst.weights[i].len())
                .map(|j| match fill {
                    OracleFill::Zero => 0.0,
                    OracleFill::Mean => {
                        inst.x.iter().map(|xs| xs[i][j]).sum::<f64>() / big_n as f64
                    }
                })
                .collect()
        })
        .collect();
    let mut calls = 0;
    let mut d_mod = vec![0.0; n];
    let mut d_patch: Vec<Vec<f64>> = inst.patches.iter().map(|p| vec![0.0; p.len()]).collect();
    for xs in &inst.x {
        let p0 = inst.predict(xs);
        calls += 1;
        for i in 0..n {
            for (l, patch) in inst.patches[i].iter().enumerate() {
                let mut masked = xs.clone();
                for &j in patch {
                    masked[i][j] = fill_values[i][j];
                }
                let p = inst.predict(&masked);
                calls += 1;
                let d = (p0 - p).abs();
                d_mod[i] += d / big_n as f64;
                d_patch[i][l] += d / big_n as f64;
            }
        }
    }
    let normalize = |v: &[f64]| -> Vec<f64> {
        let s: f64 = v.iter().sum();
        if s == 0.0 {
            vec![1.0 / v.len() as f64; v.len()]
        } else {
            v.iter().map(|x| x / s).collect()
        }
    };
    OracleResult {
        m: normalize(&d_mod),
        mp: d_patch.iter().map(|v| normalize(v)).collect(),
        calls,
    }
}

/// `Σ_k Σ_j |w_ij x_ij|` normalized, for per-entry zero-fill.
pub fn linear_closed_form(inst: &Instance) -> Vec<f64> {
    let totals: Vec<f64> = (0..inst.n())
        .map(|i| {
            inst.x
                .iter()
                .map(|xs| {
                    inst.weights[i]
                        .iter()
                        .zip(&xs[i])
                        .map(|(w, x)| (w * x).abs())
                        .sum::<f64>()
                })
                .sum()
        })
        .collect();
    let s: f64 = totals.iter().sum();
    totals.iter().map(|t| t / s).collect()
}

/// Counts every predict call that reaches the wrapped model.
pub struct CountingModel<M> {
    pub inner: M,
    pub calls: AtomicUsize,
}

impl<M> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<M: Model> Model for CountingModel<M> {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn output_dim(&self) -> Option<usize> {
        self.inner.output_dim()
    }

    fn predict(&self, inputs: &Inputs<'_>) -> Result<OutputVector, ModelError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict(inputs)
    }
}

/// Multiplies every output component by `factor`.
pub struct ScaledModel<M> {
    pub inner: M,
    pub factor: f64,
}

impl<M: Model> Model for ScaledModel<M> {
    fn name(&self) -> String {
        format!("{} × {}", self.inner.name(), self.factor)
    }

    fn output_dim(&self) -> Option<usize> {
        self.inner.output_dim()
    }

    fn predict(&self, inputs: &Inputs<'_>) -> Result<OutputVector, ModelError> {
        let out = self.inner.predict(inputs)?;
        OutputVector::new(out.as_slice().iter().map(|v| v * self.factor).collect())
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

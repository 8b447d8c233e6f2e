//! Embedded oracle checks, runnable from the installed binary.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, ModalityInput, ModalitySpec, Sample};
use crate::error::Result;
use crate::metric::{
    default_plans, detect_collapse, modality_contribution, patch_importance, resolve_fills,
    run_analysis, ContributionOptions, ContributionReport, RunOptions, DEFAULT_COLLAPSE_THRESHOLD,
};
use crate::model::{BuiltinModel, BuiltinSpec, ModalityWeights};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

struct LinearCase {
    dataset: Dataset,
    spec: BuiltinSpec,
    weights: Vec<Vec<f64>>,
}

fn linear_case(rng: &mut ChaCha8Rng) -> Result<LinearCase> {
    let n = rng.gen_range(2..=3);
    let lens: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=5)).collect();
    let big_n = rng.gen_range(1..=6);
    let mods: Vec<ModalitySpec> = lens
        .iter()
        .enumerate()
        .map(|(i, &len)| ModalitySpec::tabular(format!("m{i}"), len))
        .collect();
    let weights: Vec<Vec<f64>> = lens
        .iter()
        .map(|&len| (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let samples = (0..big_n)
        .map(|k| Sample {
            id: format!("s{k}"),
            inputs: lens
                .iter()
                .map(|&len| {
                    ModalityInput::Dense(Tensor::vector(
                        (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                    ))
                })
                .collect(),
        })
        .collect();
    let spec = BuiltinSpec::LinearFusion {
        weights: weights
            .iter()
            .cloned()
            .map(ModalityWeights::Dense)
            .collect(),
        bias: rng.gen_range(-1.0..1.0),
    };
    Ok(LinearCase {
        dataset: Dataset::new("selftest", mods, samples)?,
        spec,
        weights,
    })
}

/// `m_i ∝ Σ_k Σ_j |w_ij x_ij|` under zero fill.
fn linear_closed_form(case: &LinearCase) -> Vec<f64> {
    let totals: Vec<f64> = case
        .weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            case.dataset
                .samples()
                .iter()
                .map(|s| {
                    let x = s.inputs[i].as_dense().expect("dense").data();
                    w.iter().zip(x).map(|(a, b)| (a * b).abs()).sum::<f64>()
                })
                .sum()
        })
        .collect();
    let denom: f64 = totals.iter().sum();
    totals.iter().map(|t| t / denom).collect()
}

fn check<F>(name: &'static str, f: F) -> CheckResult
where
    F: FnOnce() -> Result<(bool, String)>,
{
    match f() {
        Ok((passed, detail)) => CheckResult {
            name,
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Runs every check. `fault` perturbs one expected value so the suite must fail.
pub fn run(fault: bool) -> Vec<CheckResult> {
    let start = Instant::now();
    let mut results = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f_7e57);

    results.push(check("linear closed form", || {
        let mut worst = 0.0f64;
        for t in 0..50 {
            let case = linear_case(&mut rng)?;
            let model = BuiltinModel::new(case.spec.clone(), case.dataset.modalities())?;
            let table = run_analysis(
                &case.dataset,
                &model,
                &default_plans(&case.dataset)?,
                &resolve_fills(&case.dataset, None)?,
                &RunOptions::default(),
            )?;
            let (m, degenerate) = modality_contribution(&table);
            let mut expected = linear_closed_form(&case);
            if fault && t == 0 {
                expected[0] += 1e-3;
            }
            if degenerate {
                continue;
            }
            for (a, b) in m.iter().zip(&expected) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok((
            worst <= 1e-9,
            format!("max |Δm| = {worst:.3e} over 50 instances"),
        ))
    }));

    results.push(check("collapse detection", || {
        let case = linear_case(&mut rng)?;
        let n = case.dataset.modalities().len();
        let spec = BuiltinSpec::SingleModality {
            index: n - 1,
            inner: Box::new(case.spec.clone()),
        };
        let model = BuiltinModel::new(spec, case.dataset.modalities())?;
        let table = run_analysis(
            &case.dataset,
            &model,
            &default_plans(&case.dataset)?,
            &resolve_fills(&case.dataset, None)?,
            &RunOptions::default(),
        )?;
        let (m, degenerate) = modality_contribution(&table);
        let hits = detect_collapse(&m, DEFAULT_COLLAPSE_THRESHOLD);
        let ok = degenerate || (m[n - 1] == 1.0 && hits == (0..n - 1).collect::<Vec<_>>());
        Ok((ok, format!("m = {m:?}, collapsed = {hits:?}")))
    }));

    results.push(check("normalization", || {
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let case = linear_case(&mut rng)?;
            let model = BuiltinModel::new(case.spec.clone(), case.dataset.modalities())?;
            let table = run_analysis(
                &case.dataset,
                &model,
                &default_plans(&case.dataset)?,
                &resolve_fills(&case.dataset, None)?,
                &RunOptions::default(),
            )?;
            let report = ContributionReport::from_table(&table, &ContributionOptions::default());
            worst = worst.max((report.sum_m() - 1.0).abs());
            worst = worst.max((report.sum_weighted() - 1.0).abs());
            for i in 0..table.modality_count() {
                if let Some((mp, _)) = patch_importance(&table, i) {
                    worst = worst.max((mp.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
        Ok((worst <= 1e-9, format!("max |Σ - 1| = {worst:.3e}")))
    }));

    results.push(check("degenerate fallback", || {
        let case = linear_case(&mut rng)?;
        let model = BuiltinModel::new(
            BuiltinSpec::Constant(vec![0.25, 0.75]),
            case.dataset.modalities(),
        )?;
        let table = run_analysis(
            &case.dataset,
            &model,
            &default_plans(&case.dataset)?,
            &resolve_fills(&case.dataset, None)?,
            &RunOptions::default(),
        )?;
        let (m, degenerate) = modality_contribution(&table);
        let u = 1.0 / m.len() as f64;
        Ok((
            degenerate && m.iter().all(|&v| v == u),
            format!("m = {m:?}, degenerate = {degenerate}"),
        ))
    }));

    log::debug!("selftest finished in {:?}", start.elapsed());
    results
}

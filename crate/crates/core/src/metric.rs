//! Occlusion-based modality contribution.
//!
//! For every sample the unmasked output `p0` is computed once; then each
//! patch of each modality is occluded in its own forward pass and the
//! elementwise distance `|p0 - p|` is recorded. Distances are summed over
//! patches, averaged over samples, and normalized across modalities (`m`) or
//! across the patches of one modality (`mp`).
//!
//! Reductions run over patches in index order, then samples in dataset order,
//! with compensated summation. Concurrent evaluation never changes the order
//! in which results are merged. Labels never enter this module.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::dataset::{Dataset, ModalityInput, ModalityKind};
use crate::error::{Error, ModelError, Result};
use crate::kahan::{kahan_sum, KahanVec};
use crate::masking::{self, apply_mask, FillStrategy, OcclusionPlan, ResolvedFill};
use crate::model::{Model, OutputVector, PostTransform};

pub const DEFAULT_COLLAPSE_THRESHOLD: f64 = 0.02;

/// Elementwise absolute output difference; entries are nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceVector(Vec<f64>);

impl DistanceVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    /// Caller guarantees every entry is finite and `>= 0`.
    pub fn from_values(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| *v >= 0.0 && v.is_finite()));
        Self(values)
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

    /// `1ᵀd`
    pub fn total(&self) -> f64 {
        kahan_sum(&self.0)
    }
}

/// Coordinates of one model call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallSite {
    pub sample: usize,
    pub modality: Option<(usize, String)>,
    pub patch: Option<usize>,
}

impl CallSite {
    fn baseline(sample: usize) -> Self {
        Self {
            sample,
            modality: None,
            patch: None,
        }
    }

    fn patch_label(&self) -> String {
        match self.patch {
            Some(l) => format!("patch {l}"),
            None => "baseline".into(),
        }
    }

    fn modality_label(&self) -> String {
        match &self.modality {
            Some((i, name)) => format!("{i} ({name})"),
            None => "-".into(),
        }
    }

    fn model_error(&self, source: ModelError) -> Error {
        Error::ModelCall {
            sample: self.sample,
            modality: self.modality_label(),
            patch: self.patch_label(),
            source,
        }
    }
}

impl fmt::Display for CallSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "sample {}, modality {}, {}",
            self.sample,
            self.modality_label(),
            self.patch_label()
        )
    }
}

/// `|p0[c] - p[c]|` for every component.
pub fn output_distance(
    p0: &OutputVector,
    masked: &OutputVector,
    call: &CallSite,
) -> Result<DistanceVector> {
    if p0.len() != masked.len() {
        return Err(Error::OutputLength {
            call: call.to_string(),
            expected: p0.len(),
            got: masked.len(),
        });
    }
    Ok(DistanceVector(
        p0.as_slice()
            .iter()
            .zip(masked.as_slice())
            .map(|(a, b)| (a - b).abs())
            .collect(),
    ))
}

/// Where each modality's patches come from.
#[derive(Debug, Clone)]
pub enum PlanSource {
    /// Same plan for every sample.
    Fixed(OcclusionPlan),
    /// One patch per token; `h` varies with the sample.
    PerToken,
}

impl PlanSource {
    fn plan_for(
        &self,
        modality: usize,
        input: &ModalityInput,
        sample: &str,
    ) -> Result<OcclusionPlan> {
        match self {
            Self::Fixed(plan) => Ok(plan.clone()),
            Self::PerToken => masking::plan_text(modality, input.len(), sample),
        }
    }

    pub fn is_variable(&self) -> bool {
        matches!(self, Self::PerToken)
    }
}

/// Plans implied by the dataset's modality declarations.
pub fn default_plans(dataset: &Dataset) -> Result<Vec<PlanSource>> {
    dataset
        .modalities()
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            Ok(match spec.fixed_plan(i)? {
                Some(plan) => PlanSource::Fixed(plan),
                None => PlanSource::PerToken,
            })
        })
        .collect()
}

/// Resolves fills for every modality. `override_fill` replaces the declared
/// strategy for non-text modalities (text keeps its token unless the override
/// is itself a token).
pub fn resolve_fills(
    dataset: &Dataset,
    override_fill: Option<&FillStrategy>,
) -> Result<Vec<ResolvedFill>> {
    dataset
        .modalities()
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let strategy = match (override_fill, &spec.kind) {
                (Some(f @ FillStrategy::MaskToken(_)), ModalityKind::Text) => f,
                (Some(FillStrategy::MaskToken(_)), _) => &spec.fill,
                (Some(_), ModalityKind::Text) => &spec.fill,
                (Some(f), _) => f,
                (None, _) => &spec.fill,
            };
            masking::resolve_fill(dataset, i, strategy)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Upper bound on concurrent model calls; the model may allow fewer.
    pub jobs: usize,
    pub post_transform: PostTransform,
    /// Re-issue every baseline at the end and fail on drift.
    pub recheck: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            post_transform: PostTransform::None,
            recheck: false,
        }
    }
}

/// Accumulated distances of one run.
#[derive(Debug, Clone)]
pub struct DistanceTable {
    modality_names: Vec<String>,
    sample_ids: Vec<String>,
    output_dim: usize,
    /// `d_i`, averaged over samples.
    per_modality: Vec<DistanceVector>,
    /// `d_{i,l}`, averaged over samples; `None` when `h` varies per sample.
    per_patch: Vec<Option<Vec<DistanceVector>>>,
    /// `d_{i,l}^k` for variable-`h` modalities: `[sample][patch]`.
    per_sample_patch: Vec<Option<Vec<Vec<DistanceVector>>>>,
    /// `1ᵀd_i^k`: `[sample][modality]`.
    per_sample_totals: Vec<Vec<f64>>,
    baselines: Vec<OutputVector>,
    model_calls: usize,
}

impl DistanceTable {
    pub fn sample_count(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn modality_count(&self) -> usize {
        self.modality_names.len()
    }

    pub fn modality_names(&self) -> &[String] {
        &self.modality_names
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn per_modality(&self) -> &[DistanceVector] {
        &self.per_modality
    }

    pub fn per_patch(&self, modality: usize) -> Option<&[DistanceVector]> {
        self.per_patch[modality].as_deref()
    }

    pub fn per_sample_patch(&self, modality: usize) -> Option<&[Vec<DistanceVector>]> {
        self.per_sample_patch[modality].as_deref()
    }

    pub fn per_sample_totals(&self) -> &[Vec<f64>] {
        &self.per_sample_totals
    }

    pub fn baselines(&self) -> &[OutputVector] {
        &self.baselines
    }

    pub fn model_calls(&self) -> usize {
        self.model_calls
    }

    /// Assembles a table from precomputed parts (all `[sample][patch]`
    /// per-modality data already averaged). Used by tests and tooling.
    pub fn from_parts(
        modality_names: Vec<String>,
        per_patch: Vec<Vec<DistanceVector>>,
        sample_count: usize,
    ) -> Result<Self> {
        if sample_count == 0 {
            return Err(Error::Invalid("sample_count must be ≥ 1".into()));
        }
        if modality_names.len() != per_patch.len() {
            return Err(Error::Invalid(
                "one patch list per modality required".into(),
            ));
        }
        let output_dim = per_patch
            .iter()
            .flatten()
            .map(DistanceVector::len)
            .next()
            .ok_or_else(|| Error::Invalid("no patches".into()))?;
        let mut per_modality = Vec::new();
        for patches in &per_patch {
            if patches.is_empty() || patches.iter().any(|d| d.len() != output_dim) {
                return Err(Error::Invalid(
                    "patch vectors must be nonempty and equal length".into(),
                ));
            }
            let mut acc = KahanVec::zeros(output_dim);
            for d in patches {
                acc.add(d.as_slice());
            }
            per_modality.push(DistanceVector(acc.values()));
        }
        let n = modality_names.len();
        Ok(Self {
            sample_ids: (0..sample_count).map(|k| k.to_string()).collect(),
            output_dim,
            per_patch: per_patch.into_iter().map(Some).collect(),
            per_sample_patch: vec![None; n],
            per_sample_totals: Vec::new(),
            per_modality,
            modality_names,
            baselines: Vec::new(),
            model_calls: 0,
        })
    }
}

struct Task {
    modality: usize,
    patch: usize,
}

/// Runs every masked forward pass and accumulates distances.
///
/// Issues exactly `N · (1 + Σ_i h_i)` model calls (plus `N` when rechecking).
pub fn run_analysis(
    dataset: &Dataset,
    model: &dyn Model,
    plans: &[PlanSource],
    fills: &[ResolvedFill],
    options: &RunOptions,
) -> Result<DistanceTable> {
    let n = dataset.modalities().len();
    let big_n = dataset.len();
    if big_n == 0 {
        return Err(Error::Invalid("dataset has no samples".into()));
    }
    if plans.len() != n || fills.len() != n {
        return Err(Error::Invalid(format!(
            "{} plans and {} fills for {} modalities",
            plans.len(),
            fills.len(),
            n
        )));
    }
    for (i, plan) in plans.iter().enumerate() {
        if let PlanSource::Fixed(p) = plan {
            if p.modality() != i {
                return Err(Error::Invalid(format!(
                    "plan for modality {} supplied at position {i}",
                    p.modality()
                )));
            }
        }
    }

    let names = dataset.modality_names();
    let inv_n = 1.0 / big_n as f64;
    let mut output_dim = model.output_dim();
    let mut per_modality: Vec<Option<KahanVec>> = vec![None; n];
    let mut per_patch: Vec<Option<Vec<KahanVec>>> = vec![None; n];
    let mut per_sample_patch: Vec<Option<Vec<Vec<DistanceVector>>>> = plans
        .iter()
        .map(|p| p.is_variable().then(Vec::new))
        .collect();
    let mut per_sample_totals = Vec::with_capacity(big_n);
    let mut baselines = Vec::with_capacity(big_n);
    let mut calls = 0usize;

    for (k, sample) in dataset.samples().iter().enumerate() {
        let refs: Vec<&ModalityInput> = sample.inputs.iter().collect();
        let site = CallSite::baseline(k);
        let p0 = model.predict(&refs).map_err(|e| site.model_error(e))?;
        calls += 1;
        let p0 = options.post_transform.apply(p0);
        let c = *output_dim.get_or_insert(p0.len());
        if p0.len() != c {
            return Err(site.model_error(ModelError::LengthDrift {
                expected: c,
                got: p0.len(),
            }));
        }

        let sample_plans = plans
            .iter()
            .enumerate()
            .map(|(i, src)| src.plan_for(i, &sample.inputs[i], &sample.id))
            .collect::<Result<Vec<_>>>()?;
        for (i, plan) in sample_plans.iter().enumerate() {
            let len = sample.inputs[i].len();
            if let Some(bad) = plan.patches().iter().flatten().find(|&&x| x >= len) {
                return Err(Error::Mask(format!(
                    "plan for modality {:?} indexes {bad}, sample {:?} has {len} elements",
                    names[i], sample.id
                )));
            }
        }
        let tasks: Vec<Task> = sample_plans
            .iter()
            .enumerate()
            .flat_map(|(i, plan)| {
                (0..plan.h()).map(move |l| Task {
                    modality: i,
                    patch: l,
                })
            })
            .collect();

        let outputs = evaluate_tasks(
            model,
            &refs,
            &sample_plans,
            fills,
            &tasks,
            &names,
            k,
            options.jobs,
        )?;
        calls += tasks.len();

        let mut sample_acc: Vec<KahanVec> = (0..n).map(|_| KahanVec::zeros(c)).collect();
        let mut sample_patches: Vec<Vec<DistanceVector>> = vec![Vec::new(); n];
        for (task, out) in tasks.iter().zip(outputs) {
            let site = CallSite {
                sample: k,
                modality: Some((task.modality, names[task.modality].clone())),
                patch: Some(task.patch),
            };
            let out = options.post_transform.apply(out);
            let d = output_distance(&p0, &out, &site)?;
            sample_acc[task.modality].add(d.as_slice());
            sample_patches[task.modality].push(d);
        }

        let mut totals = Vec::with_capacity(n);
        for i in 0..n {
            let d_ik = sample_acc[i].values();
            totals.push(kahan_sum(&d_ik));
            per_modality[i]
                .get_or_insert_with(|| KahanVec::zeros(c))
                .add_scaled(&d_ik, inv_n);
            let patches = std::mem::take(&mut sample_patches[i]);
            match &mut per_sample_patch[i] {
                Some(store) => store.push(patches),
                None => {
                    let acc =
                        per_patch[i].get_or_insert_with(|| vec![KahanVec::zeros(c); patches.len()]);
                    if acc.len() != patches.len() {
                        return Err(Error::Mask(format!(
                            "modality {:?} has {} patches for sample {:?}, earlier samples had {}",
                            names[i],
                            patches.len(),
                            sample.id,
                            acc.len()
                        )));
                    }
                    for (a, d) in acc.iter_mut().zip(&patches) {
                        a.add_scaled(d.as_slice(), inv_n);
                    }
                }
            }
        }
        per_sample_totals.push(totals);
        baselines.push(p0);
    }

    if options.recheck {
        recheck_baselines(dataset, model, options.post_transform, &baselines)?;
        calls += big_n;
    }

    let c = output_dim.expect("at least one sample evaluated");
    Ok(DistanceTable {
        modality_names: names,
        sample_ids: dataset.samples().iter().map(|s| s.id.clone()).collect(),
        output_dim: c,
        per_modality: per_modality
            .into_iter()
            .map(|a| DistanceVector(a.expect("every modality accumulated").values()))
            .collect(),
        per_patch: per_patch
            .into_iter()
            .map(|p| p.map(|acc| acc.iter().map(|a| DistanceVector(a.values())).collect()))
            .collect(),
        per_sample_patch,
        per_sample_totals,
        baselines,
        model_calls: calls,
    })
}

fn recheck_baselines(
    dataset: &Dataset,
    model: &dyn Model,
    transform: PostTransform,
    baselines: &[OutputVector],
) -> Result<()> {
    let tolerance = if model.is_external() { 1e-6 } else { 0.0 };
    for (k, (sample, p0)) in dataset.samples().iter().zip(baselines).enumerate() {
        let refs: Vec<&ModalityInput> = sample.inputs.iter().collect();
        let again = model
            .predict(&refs)
            .map_err(|e| CallSite::baseline(k).model_error(e))?;
        let again = transform.apply(again);
        let max_delta = if again.len() != p0.len() {
            f64::INFINITY
        } else {
            p0.as_slice()
                .iter()
                .zip(again.as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let identical = tolerance == 0.0
            && again.len() == p0.len()
            && p0
                .as_slice()
                .iter()
                .zip(again.as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !(identical || (tolerance > 0.0 && max_delta <= tolerance)) {
            return Err(Error::Nondeterministic {
                sample: k,
                max_delta,
            });
        }
    }
    Ok(())
}

/// Evaluates all masked passes of one sample. Results come back in task order.
#[allow(clippy::too_many_arguments)]
fn evaluate_tasks(
    model: &dyn Model,
    refs: &[&ModalityInput],
    plans: &[OcclusionPlan],
    fills: &[ResolvedFill],
    tasks: &[Task],
    names: &[String],
    sample: usize,
    jobs: usize,
) -> Result<Vec<OutputVector>> {
    let limit = model.batch_limit();
    let batch = if limit == usize::MAX { 1 } else { limit.max(1) };
    let batches: Vec<std::ops::Range<usize>> = (0..tasks.len())
        .step_by(batch)
        .map(|s| s..(s + batch).min(tasks.len()))
        .collect();
    let workers = jobs
        .max(1)
        .min(model.max_in_flight().max(1))
        .min(batches.len().max(1));

    let site = |t: usize| CallSite {
        sample,
        modality: Some((tasks[t].modality, names[tasks[t].modality].clone())),
        patch: Some(tasks[t].patch),
    };

    let run_batch = |range: std::ops::Range<usize>| -> Result<Vec<OutputVector>> {
        let masked = range
            .clone()
            .map(|t| {
                let task = &tasks[t];
                apply_mask(
                    refs[task.modality],
                    plans[task.modality].patch(task.patch),
                    &fills[task.modality],
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<Vec<&ModalityInput>> = range
            .clone()
            .zip(&masked)
            .map(|(t, m)| {
                let mut v = refs.to_vec();
                v[tasks[t].modality] = m;
                v
            })
            .collect();
        let result = if inputs.len() == 1 {
            model.predict(&inputs[0]).map(|o| vec![o])
        } else {
            model.predict_batch(&inputs)
        };
        let outputs = result.map_err(|e| match e {
            ModelError::BatchElement { index, source } => {
                site(range.start + index).model_error(*source)
            }
            other => site(range.start).model_error(other),
        })?;
        if outputs.len() != inputs.len() {
            return Err(site(range.start).model_error(ModelError::Malformed {
                reason: format!("{} outputs for a batch of {}", outputs.len(), inputs.len()),
                excerpt: String::new(),
            }));
        }
        Ok(outputs)
    };

    if workers <= 1 {
        let mut out = Vec::with_capacity(tasks.len());
        for range in batches {
            out.extend(run_batch(range)?);
        }
        return Ok(out);
    }

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Vec<OutputVector>>>>> =
        Mutex::new((0..batches.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let b = next.fetch_add(1, Ordering::Relaxed);
                if b >= batches.len() {
                    break;
                }
                let result = run_batch(batches[b].clone());
                let failed = result.is_err();
                slots.lock().expect("slot lock")[b] = Some(result);
                if failed {
                    // stop handing out work; lower batches still finish
                    next.fetch_max(batches.len(), Ordering::Relaxed);
                }
            });
        }
    });
    let mut out = Vec::with_capacity(tasks.len());
    for slot in slots.into_inner().expect("slot lock") {
        match slot {
            Some(result) => out.extend(result?),
            None => {
                unreachable!("batches are claimed in order; an unclaimed batch follows a failure")
            }
        }
    }
    Ok(out)
}

/// Shares that sum to one, or uniform with `degenerate = true` when all are zero.
fn normalize(totals: &[f64]) -> (Vec<f64>, bool) {
    let denom = kahan_sum(totals);
    if denom == 0.0 {
        let u = 1.0 / totals.len() as f64;
        (vec![u; totals.len()], true)
    } else {
        (totals.iter().map(|t| t / denom).collect(), false)
    }
}

/// `m_i = 1ᵀd_i / Σ_j 1ᵀd_j`; uniform and flagged degenerate when nothing moved.
pub fn modality_contribution(table: &DistanceTable) -> (Vec<f64>, bool) {
    let totals: Vec<f64> = table
        .per_modality
        .iter()
        .map(DistanceVector::total)
        .collect();
    normalize(&totals)
}

/// `mp_i^l` over the given per-patch distances.
pub fn patch_importance_of(patches: &[DistanceVector]) -> (Vec<f64>, bool) {
    let totals: Vec<f64> = patches.iter().map(DistanceVector::total).collect();
    normalize(&totals)
}

/// `mp_i^l` from dataset-averaged patch distances; `None` for variable-`h` modalities.
pub fn patch_importance(table: &DistanceTable, modality: usize) -> Option<(Vec<f64>, bool)> {
    table.per_patch(modality).map(patch_importance_of)
}

/// `mp_i^l · m_i`
pub fn weighted_patch_importance(mp: &[f64], m_i: f64) -> Vec<f64> {
    mp.iter().map(|v| v * m_i).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// Average over output components.
    Mean,
    /// Largest single component, with its class.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchScore {
    pub score: f64,
    /// Maximizing class for [`ScoreMode::Max`]; lowest index wins ties.
    pub class: Option<usize>,
}

pub fn class_scores(patches: &[DistanceVector], mode: ScoreMode) -> Vec<PatchScore> {
    patches
        .iter()
        .map(|d| match mode {
            ScoreMode::Mean => PatchScore {
                score: d.total() / d.len() as f64,
                class: None,
            },
            ScoreMode::Max => {
                let (class, score) = d.as_slice().iter().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |best, (c, &v)| {
                        if v > best.1 {
                            (c, v)
                        } else {
                            best
                        }
                    },
                );
                PatchScore {
                    score,
                    class: Some(class),
                }
            }
        })
        .collect()
}

/// Per-patch MEAN or MAX scores from dataset-averaged distances.
pub fn per_class_scores(
    table: &DistanceTable,
    modality: usize,
    mode: ScoreMode,
) -> Option<Vec<PatchScore>> {
    table.per_patch(modality).map(|p| class_scores(p, mode))
}

/// Indices with `m_i <= threshold`.
pub fn detect_collapse(m: &[f64], threshold: f64) -> Vec<usize> {
    m.iter()
        .enumerate()
        .filter(|(_, &v)| v <= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Per-sample importance for a variable-`h` modality.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleImportance {
    pub sample: String,
    pub mp: Vec<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleContribution {
    pub sample: String,
    pub m: Vec<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct ContributionOptions {
    pub per_class: bool,
    pub collapse_threshold: f64,
}

impl Default for ContributionOptions {
    fn default() -> Self {
        Self {
            per_class: false,
            collapse_threshold: DEFAULT_COLLAPSE_THRESHOLD,
        }
    }
}

/// Everything derived from one [`DistanceTable`].
#[derive(Debug, Clone)]
pub struct ContributionReport {
    pub m: Vec<f64>,
    pub degenerate: bool,
    /// Dataset-level `mp`; `None` for variable-`h` modalities.
    pub mp: Vec<Option<Vec<f64>>>,
    pub mp_degenerate: Vec<bool>,
    pub weighted_mp: Vec<Option<Vec<f64>>>,
    /// Per-sample `mp` for variable-`h` modalities.
    pub per_sample_mp: Vec<Option<Vec<SampleImportance>>>,
    /// `h_i × C` averaged patch distances, when requested.
    pub per_class_patch_scores: Option<Vec<Option<Vec<Vec<f64>>>>>,
    pub collapse_threshold: f64,
    pub collapse_threshold_hits: Vec<usize>,
    /// Same formula with `N = 1`.
    pub per_sample_m: Vec<SampleContribution>,
}

impl ContributionReport {
    pub fn from_table(table: &DistanceTable, options: &ContributionOptions) -> Self {
        let (m, degenerate) = modality_contribution(table);
        let n = table.modality_count();
        let mut mp = Vec::with_capacity(n);
        let mut mp_degenerate = Vec::with_capacity(n);
        let mut weighted_mp = Vec::with_capacity(n);
        let mut per_sample_mp = Vec::with_capacity(n);
        for (i, &m_i) in m.iter().enumerate() {
            match patch_importance(table, i) {
                Some((values, deg)) => {
                    weighted_mp.push(Some(weighted_patch_importance(&values, m_i)));
                    mp.push(Some(values));
                    mp_degenerate.push(deg);
                    per_sample_mp.push(None);
                }
                None => {
                    let samples: Vec<SampleImportance> = table
                        .per_sample_patch(i)
                        .expect("variable modalities keep per-sample patches")
                        .iter()
                        .zip(table.sample_ids())
                        .map(|(patches, id)| {
                            let (values, deg) = patch_importance_of(patches);
                            SampleImportance {
                                sample: id.clone(),
                                mp: values,
                                degenerate: deg,
                            }
                        })
                        .collect();
                    mp_degenerate.push(samples.iter().any(|s| s.degenerate));
                    mp.push(None);
                    weighted_mp.push(None);
                    per_sample_mp.push(Some(samples));
                }
            }
        }
        let per_class_patch_scores = options.per_class.then(|| {
            (0..n)
                .map(|i| {
                    table
                        .per_patch(i)
                        .map(|p| p.iter().map(|d| d.as_slice().to_vec()).collect())
                })
                .collect()
        });
        let per_sample_m = table
            .per_sample_totals()
            .iter()
            .zip(table.sample_ids())
            .map(|(totals, id)| {
                let (m, degenerate) = normalize(totals);
                SampleContribution {
                    sample: id.clone(),
                    m,
                    degenerate,
                }
            })
            .collect();
        Self {
            collapse_threshold_hits: detect_collapse(&m, options.collapse_threshold),
            collapse_threshold: options.collapse_threshold,
            m,
            degenerate,
            mp,
            mp_degenerate,
            weighted_mp,
            per_sample_mp,
            per_class_patch_scores,
            per_sample_m,
        }
    }

    /// `Σ_i m_i`
    pub fn sum_m(&self) -> f64 {
        kahan_sum(&self.m)
    }

    /// `Σ_l mp_i^l` per modality (dataset-level `mp` only).
    pub fn sum_mp(&self) -> Vec<Option<f64>> {
        self.mp
            .iter()
            .map(|v| v.as_ref().map(kahan_sum))
            .collect()
    }

    /// `Σ_i Σ_l mp_i^l · m_i`, taking `Σ_l mp_i^l = 1` for variable-`h` modalities.
    pub fn sum_weighted(&self) -> f64 {
        let parts: Vec<f64> = self
            .weighted_mp
            .iter()
            .zip(&self.m)
            .map(|(w, m)| match w {
                Some(w) => kahan_sum(w),
                None => *m,
            })
            .collect();
        kahan_sum(&parts)
    }

    /// `"0.50 : 0.50"`
    pub fn ratio(&self) -> String {
        ratio_string(&self.m)
    }
}

pub fn ratio_string(m: &[f64]) -> String {
    m.iter()
        .map(|v| format!("{v:.2}"))
        .collect::<Vec<_>>()
        .join(" : ")
}

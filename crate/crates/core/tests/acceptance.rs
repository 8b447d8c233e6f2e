//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on failure.
//!
//! Run with `cargo test --test acceptance`.

mod common;

use std::path::Path;
use std::time::Instant;

use common::{
    brute_force, linear_closed_form, max_abs_diff, CountingModel, Instance, OracleFill, ScaledModel,
};
use modcontrib::cli::{analyze_to_dir, AnalyzeArgs, PostTransformArg};
use modcontrib::dataset::{tokenize, Dataset, ModalityInput, ModalitySpec, Sample};
use modcontrib::masking::{plan_grouped, plan_image, plan_tabular, FillStrategy, PatchGrid};
use modcontrib::metric::{
    default_plans, detect_collapse, resolve_fills, run_analysis, ContributionOptions,
    ContributionReport, PlanSource, RunOptions, DEFAULT_COLLAPSE_THRESHOLD,
};
use modcontrib::model::{BuiltinModel, BuiltinSpec, ModalityWeights, Model};
use modcontrib::report::ReportDocument;
use modcontrib::tensor::{write_mtn, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-9;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn engine(
    ds: &Dataset,
    model: &dyn Model,
    plans: &[PlanSource],
    fill: Option<&FillStrategy>,
    jobs: usize,
) -> ContributionReport {
    let fills = resolve_fills(ds, fill).unwrap();
    let table = run_analysis(
        ds,
        model,
        plans,
        &fills,
        &RunOptions {
            jobs,
            ..Default::default()
        },
    )
    .unwrap();
    ContributionReport::from_table(&table, &ContributionOptions::default())
}

/// Worst deviation from one across every normalization identity of a report.
fn normalization_error(r: &ContributionReport) -> f64 {
    let mut worst = (r.sum_m() - 1.0).abs().max((r.sum_weighted() - 1.0).abs());
    for s in r.sum_mp().into_iter().flatten() {
        worst = worst.max((s - 1.0).abs());
    }
    for samples in r.per_sample_mp.iter().flatten() {
        for s in samples {
            worst = worst.max((s.mp.iter().sum::<f64>() - 1.0).abs());
        }
    }
    worst
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut runs = 0;
    let mut call_mismatch = 0;
    for _ in 0..200 {
        let inst = Instance::random(&mut rng);
        let ds = inst.dataset();
        let model = BuiltinModel::new(inst.builtin_spec(), ds.modalities()).unwrap();
        for (fill, strategy) in [
            (OracleFill::Zero, FillStrategy::Zero),
            (OracleFill::Mean, FillStrategy::DatasetMean),
        ] {
            let expected = brute_force(&inst, fill);
            let fills = resolve_fills(&ds, Some(&strategy)).unwrap();
            let table =
                run_analysis(&ds, &model, &inst.plans(), &fills, &RunOptions::default()).unwrap();
            let got = ContributionReport::from_table(&table, &ContributionOptions::default());
            worst = worst.max(max_abs_diff(&got.m, &expected.m));
            for (mp, exp) in got.mp.iter().zip(&expected.mp) {
                worst = worst.max(max_abs_diff(mp.as_ref().unwrap(), exp));
            }
            call_mismatch += usize::from(table.model_calls() != expected.calls);
            runs += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= TOL && secs < 5.0 && call_mismatch == 0,
        format!("{runs} runs, max |Δ| = {worst:.2e} (tol {TOL:e}), {secs:.2}s (limit 5s)"),
    )
}

fn closed_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let mut inst = Instance::random(&mut rng);
        inst.patches = inst
            .lens()
            .iter()
            .map(|&len| (0..len).map(|j| vec![j]).collect())
            .collect();
        let ds = inst.dataset();
        let model = BuiltinModel::new(inst.builtin_spec(), ds.modalities()).unwrap();
        let got = engine(&ds, &model, &default_plans(&ds).unwrap(), None, 1);
        worst = worst.max(max_abs_diff(&got.m, &linear_closed_form(&inst)));
    }
    outcome(
        worst <= TOL,
        format!("200 instances, max |Δm| = {worst:.2e}"),
    )
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    let mut runs = 0;
    let mut check = |r: &ContributionReport| {
        worst = worst.max(normalization_error(r));
        runs += 1;
    };
    for t in 0..100 {
        let mut inst = Instance::random(&mut rng);
        match t % 4 {
            // one live feature
            1 => {
                for w in inst.weights.iter_mut().flatten() {
                    *w = 0.0;
                }
                inst.weights[0][0] = 1e-300;
            }
            // tiny and huge magnitudes together
            2 => {
                for (i, w) in inst.weights.iter_mut().enumerate() {
                    let scale = if i == 0 { 1e-12 } else { 1e12 };
                    w.iter_mut().for_each(|v| *v *= scale);
                }
            }
            _ => {}
        }
        let ds = inst.dataset();
        let model = BuiltinModel::new(inst.builtin_spec(), ds.modalities()).unwrap();
        check(&engine(&ds, &model, &inst.plans(), None, 1));
        check(&engine(
            &ds,
            &model,
            &inst.plans(),
            Some(&FillStrategy::DatasetMean),
            1,
        ));
        let constant =
            BuiltinModel::new(BuiltinSpec::Constant(vec![0.5, 0.5]), ds.modalities()).unwrap();
        check(&engine(&ds, &constant, &inst.plans(), None, 1));
    }
    // written reports re-sum as well
    let dir = tempfile::tempdir().unwrap();
    let (manifest, model) = mixed_manifest(dir.path(), 0);
    let out = dir.path().join("out");
    analyze_to_dir(&analyze_args(&manifest, &model, &out)).unwrap();
    let doc = ReportDocument::read(&out.join("report.json")).unwrap();
    let mut doc_worst = (doc.m.iter().sum::<f64>() - 1.0).abs();
    for s in &doc.modalities {
        if let Some(mp) = &s.mp {
            doc_worst = doc_worst.max((mp.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let weighted: f64 = doc
        .modalities
        .iter()
        .map(|s| s.weighted_mp.as_ref().map_or(s.m, |w| w.iter().sum()))
        .sum();
    doc_worst = doc_worst.max((weighted - 1.0).abs());
    worst = worst.max(doc_worst);
    outcome(
        worst <= TOL,
        format!("{runs} runs + written report, max |Σ - 1| = {worst:.2e}"),
    )
}

fn collapse() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut failures = Vec::new();
    for t in 0..50 {
        let mut inst = Instance::random(&mut rng);
        while inst.n() < 2 {
            inst = Instance::random(&mut rng);
        }
        inst.weights.truncate(2);
        inst.patches.truncate(2);
        for xs in inst.x.iter_mut() {
            xs.truncate(2);
        }
        let ds = inst.dataset();
        let spec = BuiltinSpec::SingleModality {
            index: 1,
            inner: Box::new(inst.builtin_spec()),
        };
        let model = BuiltinModel::new(spec, ds.modalities()).unwrap();
        let r = engine(&ds, &model, &inst.plans(), None, 1);
        if r.degenerate {
            continue;
        }
        let flagged = detect_collapse(&r.m, DEFAULT_COLLAPSE_THRESHOLD);
        if r.m != [0.0, 1.0] || flagged != [0] {
            failures.push(format!("#{t}: m = {:?}, flagged = {flagged:?}", r.m));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "50 instances: m = [0, 1] exactly, modality 0 flagged at 0.02".into()
        } else {
            failures.join("; ")
        },
    )
}

fn agnosticism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, model) = mixed_manifest(dir.path(), 0);
    let labels = dir.path().join("labels.csv");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    analyze_to_dir(&analyze_args(&manifest, &model, &a)).unwrap();
    std::fs::write(&labels, "id,label\ns0,1\ns1,0\ns2,0\ns3,1\n").unwrap();
    analyze_to_dir(&analyze_args(&manifest, &model, &b)).unwrap();
    let same = std::fs::read(a.join("report.json")).unwrap()
        == std::fs::read(b.join("report.json")).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let inst = Instance::random(&mut rng);
        let ds = inst.dataset();
        let base = engine(
            &ds,
            &BuiltinModel::new(inst.builtin_spec(), ds.modalities()).unwrap(),
            &inst.plans(),
            None,
            1,
        );
        for c in [0.1, 3.0, 100.0] {
            let scaled = ScaledModel {
                inner: BuiltinModel::new(inst.builtin_spec(), ds.modalities()).unwrap(),
                factor: c,
            };
            let r = engine(&ds, &scaled, &inst.plans(), None, 1);
            worst = worst.max(max_abs_diff(&r.m, &base.m));
        }
    }
    outcome(
        same && worst < TOL,
        format!("label permutation: report bytes {}; scaling c ∈ {{0.1, 3, 100}}: max |Δm| = {worst:.2e}", if same { "identical" } else { "DIFFER" }),
    )
}

fn granularity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let mods = vec![
            ModalitySpec::tabular("wide", 16),
            ModalitySpec::tabular("narrow", 4),
        ];
        let w: Vec<Vec<f64>> = [16, 4]
            .iter()
            .map(|&len| (0..len).map(|_| rng.gen_range(0.01..2.0)).collect())
            .collect();
        let samples = (0..rng.gen_range(1..=8))
            .map(|k| Sample {
                id: format!("k{k}"),
                inputs: [16, 4]
                    .iter()
                    .map(|&len| {
                        ModalityInput::Dense(Tensor::vector(
                            (0..len).map(|_| rng.gen_range(0.01..5.0)).collect(),
                        ))
                    })
                    .collect(),
            })
            .collect();
        let ds = Dataset::new("g", mods, samples).unwrap();
        let model = BuiltinModel::new(
            BuiltinSpec::LinearFusion {
                weights: w.into_iter().map(ModalityWeights::Dense).collect(),
                bias: 0.5,
            },
            ds.modalities(),
        )
        .unwrap();
        let mut ms = Vec::new();
        for h in [1, 2, 4, 16] {
            let plans = vec![
                PlanSource::Fixed(plan_grouped(0, 16, h).unwrap()),
                PlanSource::Fixed(plan_tabular(1, 4).unwrap()),
            ];
            ms.push(engine(&ds, &model, &plans, None, 1).m);
        }
        for m in &ms[1..] {
            worst = worst.max(max_abs_diff(m, &ms[0]));
        }
    }
    outcome(
        worst <= TOL,
        format!("h ∈ {{1, 2, 4, 16}} over 50 instances, max |Δm| = {worst:.2e}"),
    )
}

fn call_count() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut failures = Vec::new();
    for t in 0..60 {
        let inst = Instance::random(&mut rng);
        let ds = inst.dataset();
        let counted =
            CountingModel::new(BuiltinModel::new(inst.builtin_spec(), ds.modalities()).unwrap());
        let jobs = 1 + t % 4;
        let fills = resolve_fills(&ds, None).unwrap();
        let table = run_analysis(
            &ds,
            &counted,
            &inst.plans(),
            &fills,
            &RunOptions {
                jobs,
                ..Default::default()
            },
        )
        .unwrap();
        let expected = inst.x.len() * (1 + inst.patches.iter().map(Vec::len).sum::<usize>());
        if counted.count() != expected || table.model_calls() != expected {
            failures.push(format!(
                "#{t}: counted {}, reported {}, expected {expected}",
                counted.count(),
                table.model_calls()
            ));
        }
    }
    // variable h: one patch per token
    let mods = vec![ModalitySpec::text("report"), ModalitySpec::tabular("t", 3)];
    let texts = [
        "no acute disease",
        "catheter",
        "left lower lobe opacity noted",
    ];
    let samples = texts
        .iter()
        .enumerate()
        .map(|(k, t)| Sample {
            id: format!("s{k}"),
            inputs: vec![
                ModalityInput::Tokens(tokenize(t)),
                ModalityInput::Dense(Tensor::vector(vec![1.0, 2.0, 3.0])),
            ],
        })
        .collect();
    let ds = Dataset::new("text", mods, samples).unwrap();
    let counted = CountingModel::new(
        BuiltinModel::new(BuiltinSpec::Constant(vec![1.0]), ds.modalities()).unwrap(),
    );
    let fills = resolve_fills(&ds, None).unwrap();
    run_analysis(
        &ds,
        &counted,
        &default_plans(&ds).unwrap(),
        &fills,
        &RunOptions::default(),
    )
    .unwrap();
    let expected: usize = texts.iter().map(|t| 1 + tokenize(t).len() + 3).sum();
    if counted.count() != expected {
        failures.push(format!(
            "text: counted {}, expected {expected}",
            counted.count()
        ));
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "61 runs, jobs 1..4 and per-sample token counts: calls = N·(1+Σh_i)".into()
        } else {
            failures.join("; ")
        },
    )
}

fn grid_geometry() -> Outcome {
    let h2 = plan_image(0, &PatchGrid::new(&[224, 224], &[16, 16], None).unwrap()).h();
    let h2c = plan_image(0, &PatchGrid::new(&[224, 224, 3], &[16, 16], None).unwrap()).h();
    let h3 = plan_image(
        0,
        &PatchGrid::new(&[64, 64, 64], &[32, 32, 32], None).unwrap(),
    )
    .h();
    let h3c = plan_image(
        0,
        &PatchGrid::new(&[1, 32, 48, 16], &[16, 24, 8], Some(0)).unwrap(),
    )
    .h();
    outcome(
        h2 == 196 && h2c == 196 && h3 == 8 && h3c == 8,
        format!(
            "224²/16² → {h2} (with channels {h2c}); half-extent 3D → {h3} (with channels {h3c})"
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, model) = mixed_manifest(dir.path(), 1);
    let mut differing = Vec::new();
    let mut compared = 0;
    let runs: Vec<_> = [("a", 1), ("b", 1), ("c", 4)]
        .iter()
        .map(|(name, jobs)| {
            let out = dir.path().join(name);
            let mut args = analyze_args(&manifest, &model, &out);
            args.per_class = true;
            args.jobs = *jobs;
            analyze_to_dir(&args).unwrap();
            out
        })
        .collect();
    let mut files: Vec<_> = std::fs::read_dir(&runs[0])
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n != "run_log.json")
        .collect();
    files.sort();
    for f in &files {
        let first = std::fs::read(runs[0].join(f)).unwrap();
        for other in &runs[1..] {
            compared += 1;
            if std::fs::read(other.join(f)).ok().as_deref() != Some(&first[..]) {
                differing.push(format!("{}/{}", other.display(), f.to_string_lossy()));
            }
        }
    }
    let heatmaps = files
        .iter()
        .filter(|f| f.to_string_lossy().ends_with(".pgm"))
        .count();
    outcome(
        differing.is_empty() && heatmaps > 0,
        format!(
            "{} files ({heatmaps} heatmaps) × 2 reruns (one with --jobs 4): {}",
            files.len(),
            if differing.is_empty() {
                format!("{compared} byte-identical comparisons")
            } else {
                differing.join(", ")
            }
        ),
    )
}

/// Image (container file) + text + tabular manifest with a labels file next to it.
fn mixed_manifest(dir: &Path, seed: u64) -> (std::path::PathBuf, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let texts = [
        "no acute disease",
        "catheter tip in svc",
        "mild cardiomegaly",
        "no change",
    ];
    let mut samples = Vec::new();
    for (k, text) in texts.iter().enumerate() {
        let img = Tensor::new(
            vec![8, 8],
            (0..64).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let file = format!("img{k}.mtn");
        write_mtn(&dir.join(&file), &img).unwrap();
        let vals: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        samples.push(serde_json::json!({
            "id": format!("s{k}"),
            "inputs": {"image": {"file": file}, "report": {"text": text}, "vitals": {"values": vals}}
        }));
    }
    std::fs::write(dir.join("labels.csv"), "id,label\ns0,0\ns1,1\ns2,1\ns3,0\n").unwrap();
    let manifest = serde_json::json!({
        "name": "mixed",
        "labels": "labels.csv",
        "modalities": [
            {"name": "image", "kind": "image", "shape": [8, 8], "mask": {"patch_shape": [4, 2]}},
            {"name": "report", "kind": "text"},
            {"name": "vitals", "kind": "tabular", "shape": [3]}
        ],
        "samples": samples
    });
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    let image_w: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let lexicon = |c: usize| serde_json::json!({"acute": 0.4 * c as f64, "catheter": 1.0 - 0.3 * c as f64, "cardiomegaly": 0.7, "no": -0.2});
    let model = serde_json::json!({"softmax_linear": {
        "weights": (0..3).map(|c| serde_json::json!([image_w[c], lexicon(c), [0.3 * c as f64, -0.5, 0.2]])).collect::<Vec<_>>(),
        "bias": [0.1, 0.0, -0.1]
    }});
    (path, format!("builtin:{model}"))
}

fn analyze_args(manifest: &Path, model: &str, out: &Path) -> AnalyzeArgs {
    AnalyzeArgs {
        manifest: manifest.to_path_buf(),
        model: model.to_string(),
        out: out.to_path_buf(),
        fill: None,
        per_class: false,
        post_transform: PostTransformArg::None,
        collapse_threshold: DEFAULT_COLLAPSE_THRESHOLD,
        strict: false,
        jobs: 1,
        timeout: 60.0,
        recheck: false,
    }
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("oracle equivalence", oracle_equivalence),
        ("linear closed form", closed_form),
        ("normalization", normalization),
        ("unimodal collapse", collapse),
        ("performance agnosticism", agnosticism),
        ("granularity invariance", granularity),
        ("call count", call_count),
        ("grid geometry", grid_geometry),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let o = f();
        println!(
            "{} {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.passed);
    }
    println!("{} criteria, {failed} failed", criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

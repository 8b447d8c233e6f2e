//! Report documents and the artifacts rendered from them.
//!
//! A report is plain JSON. Heatmaps are binary PGM; score tables are CSV.
//! Everything here is a pure function of its inputs, so re-rendering a stored
//! report reproduces the same bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ModalityKind};
use crate::error::{Error, Result};
use crate::kahan::kahan_sum;
use crate::metric::{
    class_scores, ratio_string, ContributionReport, DistanceTable, DistanceVector, ScoreMode,
};

pub const REPORT_FORMAT: &str = "modcontrib-report/1";
pub const TOKEN_CSV_HEADER: [&str; 4] = ["token", "mean", "max", "argmax_class"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub name: String,
    pub output_dim: usize,
    pub post_transform: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub collapse_threshold: f64,
    pub per_class: bool,
}

/// One row of a tabular breakdown: `mp_i^l` and `m_i^l = mp_i^l · m_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub mp: f64,
    pub m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub shape: Vec<usize>,
    pub patch_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_axis: Option<usize>,
    pub spatial_shape: Vec<usize>,
    pub tiles: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextSample {
    pub sample: String,
    pub tokens: Vec<String>,
    pub mp: Vec<f64>,
    pub degenerate: bool,
    /// `h × C` distances for this sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySection {
    pub name: String,
    pub kind: String,
    pub m: f64,
    pub fill: String,
    /// Patch count; absent when it varies per sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mp: Option<Vec<f64>>,
    pub mp_degenerate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighted_mp: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Vec<Attribute>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridInfo>,
    /// `h × C` dataset-averaged distances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<TextSample>>,
}

/// Single-sample ratio (`N = 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRatio {
    pub sample: String,
    pub m: Vec<f64>,
    pub ratio: String,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checks {
    pub sum_m: f64,
    pub sum_mp: Vec<Option<f64>>,
    pub sum_weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub format: String,
    pub dataset: String,
    pub samples: usize,
    pub model: ModelInfo,
    pub settings: Settings,
    pub m: Vec<f64>,
    pub ratio: String,
    pub degenerate: bool,
    pub collapsed: Vec<String>,
    pub modalities: Vec<ModalitySection>,
    pub per_sample: Vec<SampleRatio>,
    pub checks: Checks,
}

/// Run facts that belong in the report (nothing timing- or host-dependent).
#[derive(Debug, Clone)]
pub struct RunMetadata {
    pub model_name: String,
    pub post_transform: String,
    pub fills: Vec<String>,
    pub per_class: bool,
}

fn matrix(patches: &[DistanceVector]) -> Vec<Vec<f64>> {
    patches.iter().map(|d| d.as_slice().to_vec()).collect()
}

fn attribute_names(dataset: &Dataset, modality: usize, h: usize) -> Result<Vec<String>> {
    let spec = &dataset.modalities()[modality];
    let entry_names = spec
        .field_names()
        .unwrap_or_else(|| (0..spec.element_count()).map(|j| format!("x{j}")).collect());
    let plan = spec
        .fixed_plan(modality)?
        .ok_or_else(|| Error::Report(format!("modality {:?} has no fixed plan", spec.name)))?;
    debug_assert_eq!(plan.h(), h);
    Ok(plan
        .patches()
        .iter()
        .map(|p| {
            p.iter()
                .map(|&j| entry_names[j].as_str())
                .collect::<Vec<_>>()
                .join("+")
        })
        .collect())
}

/// Builds the report document for one run.
pub fn write_report(
    report: &ContributionReport,
    table: &DistanceTable,
    dataset: &Dataset,
    meta: &RunMetadata,
) -> Result<ReportDocument> {
    let n = dataset.modalities().len();
    if report.m.len() != n || table.modality_count() != n || meta.fills.len() != n {
        return Err(Error::Report(
            "report, table, and dataset disagree on modality count".into(),
        ));
    }
    let mut sections = Vec::with_capacity(n);
    for (i, spec) in dataset.modalities().iter().enumerate() {
        let mut section = ModalitySection {
            name: spec.name.clone(),
            kind: spec.kind.label().into(),
            m: report.m[i],
            fill: meta.fills[i].clone(),
            h: spec.h(),
            mp: report.mp[i].clone(),
            mp_degenerate: report.mp_degenerate[i],
            weighted_mp: report.weighted_mp[i].clone(),
            attributes: None,
            grid: None,
            per_class: None,
            samples: None,
        };
        match &spec.kind {
            ModalityKind::Tabular { .. } => {
                let mp = report.mp[i]
                    .as_ref()
                    .expect("tabular modalities have a fixed plan");
                let names = attribute_names(dataset, i, mp.len())?;
                section.attributes = Some(
                    names
                        .into_iter()
                        .zip(mp)
                        .map(|(name, &mp)| Attribute {
                            name,
                            mp,
                            m: mp * report.m[i],
                        })
                        .collect(),
                );
            }
            ModalityKind::Image { grid } => {
                section.grid = Some(GridInfo {
                    shape: grid.tensor_shape().to_vec(),
                    patch_shape: grid.patch_shape().to_vec(),
                    channel_axis: grid.channel_axis(),
                    spatial_shape: grid.spatial_shape(),
                    tiles: grid.tiles(),
                });
            }
            ModalityKind::Text => {
                let per_sample = report.per_sample_mp[i]
                    .as_ref()
                    .expect("text modalities carry per-sample importance");
                let patches = table
                    .per_sample_patch(i)
                    .expect("text modalities keep per-sample patches");
                section.samples = Some(
                    per_sample
                        .iter()
                        .zip(dataset.samples())
                        .zip(patches)
                        .map(|((imp, sample), d)| TextSample {
                            sample: imp.sample.clone(),
                            tokens: sample.inputs[i].as_tokens().unwrap_or_default().to_vec(),
                            mp: imp.mp.clone(),
                            degenerate: imp.degenerate,
                            per_class: meta.per_class.then(|| matrix(d)),
                        })
                        .collect(),
                );
            }
        }
        if meta.per_class {
            section.per_class = table.per_patch(i).map(matrix);
        }
        sections.push(section);
    }
    Ok(ReportDocument {
        format: REPORT_FORMAT.into(),
        dataset: dataset.name().into(),
        samples: table.sample_count(),
        model: ModelInfo {
            name: meta.model_name.clone(),
            output_dim: table.output_dim(),
            post_transform: meta.post_transform.clone(),
        },
        settings: Settings {
            collapse_threshold: report.collapse_threshold,
            per_class: meta.per_class,
        },
        m: report.m.clone(),
        ratio: report.ratio(),
        degenerate: report.degenerate,
        collapsed: report
            .collapse_threshold_hits
            .iter()
            .map(|&i| dataset.modalities()[i].name.clone())
            .collect(),
        modalities: sections,
        per_sample: report
            .per_sample_m
            .iter()
            .map(|s| SampleRatio {
                sample: s.sample.clone(),
                ratio: ratio_string(&s.m),
                m: s.m.clone(),
                degenerate: s.degenerate,
            })
            .collect(),
        checks: Checks {
            sum_m: report.sum_m(),
            sum_mp: report.sum_mp(),
            sum_weighted: report.sum_weighted(),
        },
    })
}

impl ReportDocument {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let doc: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            offset: byte_offset(text, e.line(), e.column()),
            message: e.to_string(),
        })?;
        if doc.format != REPORT_FORMAT {
            return Err(Error::Report(format!(
                "{}: unsupported report format {:?} (expected {REPORT_FORMAT:?})",
                origin.display(),
                doc.format
            )));
        }
        Ok(doc)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (before + column.saturating_sub(1)) as u64
}

/// PGM (P5) bytes, one image per slice of the first axis for volumes.
///
/// Scores map linearly onto 0..=255 (lowest → 0, highest → 255; constant → 128)
/// and each tile is replicated over its pixels.
pub fn render_patch_heatmap(
    scores: &[f64],
    spatial_shape: &[usize],
    tiles: &[usize],
) -> Result<Vec<Vec<u8>>> {
    if spatial_shape.len() != tiles.len() || !(2..=3).contains(&tiles.len()) {
        return Err(Error::Report(format!(
            "heatmap needs a 2D or 3D grid, got shape {spatial_shape:?} with tiles {tiles:?}"
        )));
    }
    if tiles
        .iter()
        .zip(spatial_shape)
        .any(|(&t, &s)| t == 0 || s % t != 0)
    {
        return Err(Error::Report(format!(
            "tiles {tiles:?} do not divide shape {spatial_shape:?}"
        )));
    }
    let expected: usize = tiles.iter().product();
    if scores.len() != expected {
        return Err(Error::Report(format!(
            "{} scores for a grid of {expected} patches",
            scores.len()
        )));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let levels: Vec<u8> = scores
        .iter()
        .map(|&s| {
            if hi > lo {
                ((s - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                128
            }
        })
        .collect();

    let (slices, slice_tiles, rows, cols) = if tiles.len() == 2 {
        (1, 1, spatial_shape[0], spatial_shape[1])
    } else {
        (
            spatial_shape[0],
            tiles[0],
            spatial_shape[1],
            spatial_shape[2],
        )
    };
    let (tr, tc) = (tiles[tiles.len() - 2], tiles[tiles.len() - 1]);
    let (ph, pw) = (rows / tr, cols / tc);
    let slice_depth = spatial_shape[0] / slice_tiles;
    let mut images = Vec::with_capacity(slices);
    for z in 0..slices {
        let tz = if tiles.len() == 3 { z / slice_depth } else { 0 };
        let mut img = format!("P5\n{cols} {rows}\n255\n").into_bytes();
        img.reserve(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                img.push(levels[(tz * tr + r / ph) * tc + c / pw]);
            }
        }
        images.push(img);
    }
    Ok(images)
}

/// CSV with one row per token (or attribute).
pub fn write_token_scores(
    tokens: &[String],
    mean: &[f64],
    max: &[f64],
    argmax: &[usize],
) -> Result<Vec<u8>> {
    if mean.len() != tokens.len() || max.len() != tokens.len() || argmax.len() != tokens.len() {
        return Err(Error::Report(format!(
            "{} tokens but {} mean, {} max, {} argmax entries",
            tokens.len(),
            mean.len(),
            max.len(),
            argmax.len()
        )));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Report(format!("csv: {e}"));
    w.write_record(TOKEN_CSV_HEADER).map_err(csv_err)?;
    for (((token, mean), max), class) in tokens.iter().zip(mean).zip(max).zip(argmax) {
        w.write_record([
            token.clone(),
            mean.to_string(),
            max.to_string(),
            class.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::Report(format!("csv: {e}")))
}

fn score_table(labels: &[String], per_class: &[Vec<f64>]) -> Result<Vec<u8>> {
    let vectors: Vec<DistanceVector> = per_class
        .iter()
        .map(|row| {
            if row.is_empty() || row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                Err(Error::Report(
                    "per-class scores must be nonempty, finite, and nonnegative".into(),
                ))
            } else {
                Ok(DistanceVector::from_values(row.clone()))
            }
        })
        .collect::<Result<_>>()?;
    let mean: Vec<f64> = class_scores(&vectors, ScoreMode::Mean)
        .iter()
        .map(|s| s.score)
        .collect();
    let max = class_scores(&vectors, ScoreMode::Max);
    write_token_scores(
        labels,
        &mean,
        &max.iter().map(|s| s.score).collect::<Vec<_>>(),
        &max.iter().map(|s| s.class.unwrap_or(0)).collect::<Vec<_>>(),
    )
}

/// A rendered file, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub path: PathBuf,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderRequest {
    pub heatmaps: bool,
    pub tables: bool,
    /// `Mean` draws `mp`; `Max` draws each patch's largest class score.
    pub mode: ScoreMode,
}

fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn missing_per_class(what: &str) -> Error {
    Error::Report(format!(
        "{what} needs per-class scores, which this report does not contain; rerun analyze with --per-class"
    ))
}

/// Every artifact `request` asks for. Errors when the report lacks the data.
pub fn render(doc: &ReportDocument, request: RenderRequest) -> Result<Vec<Artifact>> {
    let mut out = Vec::new();
    for section in &doc.modalities {
        let base = safe_name(&section.name);
        if request.heatmaps {
            if let Some(grid) = &section.grid {
                let (scores, suffix) = match request.mode {
                    ScoreMode::Mean => (
                        section.mp.clone().ok_or_else(|| {
                            Error::Report(format!("modality {:?} has no mp", section.name))
                        })?,
                        "",
                    ),
                    ScoreMode::Max => {
                        let pc = section
                            .per_class
                            .as_ref()
                            .ok_or_else(|| missing_per_class("a MAX heatmap"))?;
                        (
                            pc.iter()
                                .map(|row| row.iter().copied().fold(0.0, f64::max))
                                .collect(),
                            "_max",
                        )
                    }
                };
                let images = render_patch_heatmap(&scores, &grid.spatial_shape, &grid.tiles)?;
                let single = images.len() == 1;
                for (z, bytes) in images.into_iter().enumerate() {
                    let file = if single {
                        format!("heatmap_{base}{suffix}.pgm")
                    } else {
                        format!("heatmap_{base}{suffix}_slice{z:03}.pgm")
                    };
                    out.push(Artifact {
                        path: file.into(),
                        bytes,
                    });
                }
            }
        }
        if request.tables {
            if let Some(attrs) = &section.attributes {
                let pc = section
                    .per_class
                    .as_ref()
                    .ok_or_else(|| missing_per_class("an attribute table"))?;
                let names: Vec<String> = attrs.iter().map(|a| a.name.clone()).collect();
                out.push(Artifact {
                    path: format!("attributes_{base}.csv").into(),
                    bytes: score_table(&names, pc)?,
                });
            }
            if let Some(samples) = &section.samples {
                for s in samples {
                    let pc = s
                        .per_class
                        .as_ref()
                        .ok_or_else(|| missing_per_class("a token table"))?;
                    out.push(Artifact {
                        path: format!("tokens_{base}_{}.csv", safe_name(&s.sample)).into(),
                        bytes: score_table(&s.tokens, pc)?,
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn write_artifacts(dir: &Path, artifacts: &[Artifact]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    artifacts
        .iter()
        .map(|a| {
            let path = dir.join(&a.path);
            std::fs::write(&path, &a.bytes).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

/// `Σ` over a report's values, for consumers re-checking a stored document.
pub fn resum(values: &[f64]) -> f64 {
    kahan_sum(values)
}

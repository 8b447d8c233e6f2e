//! Manifest parsing and sample loading.
//!
//! A manifest is a JSON document listing modalities and samples. Paths inside
//! it are resolved against the manifest's own directory. A `labels` entry is
//! accepted and never read.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{self, FillStrategy, OcclusionPlan, PatchGrid, DEFAULT_MASK_TOKEN};
use crate::tensor::{self, Tensor};

/// One modality of one sample, as handed to a model.
#[derive(Debug, Clone, PartialEq)]
pub enum ModalityInput {
    Dense(Tensor),
    Tokens(Vec<String>),
}

impl ModalityInput {
    /// Element count of the flattened input (tokens for text).
    pub fn len(&self) -> usize {
        match self {
            Self::Dense(t) => t.len(),
            Self::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_dense(&self) -> Option<&Tensor> {
        match self {
            Self::Dense(t) => Some(t),
            Self::Tokens(_) => None,
        }
    }

    pub fn as_tokens(&self) -> Option<&[String]> {
        match self {
            Self::Tokens(t) => Some(t),
            Self::Dense(_) => None,
        }
    }
}

/// Whitespace tokenization, case preserved.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Encoding rule for one tabular column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldEncoding {
    pub name: String,
    /// Enumeration map; absent means numeric passthrough.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<BTreeMap<String, f64>>,
    /// Value substituted for missing entries; absent means missing is an error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing: Option<f64>,
    /// Raw strings treated as missing, compared after trimming.
    #[serde(default = "default_missing_markers")]
    pub missing_markers: Vec<String>,
}

fn default_missing_markers() -> Vec<String> {
    vec![String::new()]
}

impl FieldEncoding {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            map: None,
            missing: None,
            missing_markers: default_missing_markers(),
        }
    }

    pub fn enumeration(name: impl Into<String>, map: &[(&str, f64)]) -> Self {
        Self {
            map: Some(map.iter().map(|(k, v)| (k.to_string(), *v)).collect()),
            ..Self::numeric(name)
        }
    }

    pub fn with_missing(mut self, sentinel: f64) -> Self {
        self.missing = Some(sentinel);
        self
    }

    fn encode(&self, raw: &str) -> Result<f64> {
        let value = raw.trim();
        if self.missing_markers.iter().any(|m| m == value) {
            return self.missing.ok_or_else(|| Error::Encoding {
                field: self.name.clone(),
                value: value.to_string(),
                allowed: "a value (no missing sentinel declared)".into(),
            });
        }
        if let Some(map) = &self.map {
            return map.get(value).copied().ok_or_else(|| Error::Encoding {
                field: self.name.clone(),
                value: value.to_string(),
                allowed: map.keys().cloned().collect::<Vec<_>>().join(", "),
            });
        }
        value
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Encoding {
                field: self.name.clone(),
                value: value.to_string(),
                allowed: "a finite number".into(),
            })
    }
}

/// Encodes one row of raw strings into a 1-D tensor.
pub fn encode_tabular(row: &[impl AsRef<str>], fields: &[FieldEncoding]) -> Result<Tensor> {
    if row.len() != fields.len() {
        return Err(Error::Tensor(format!(
            "row has {} values, encoding table has {} fields",
            row.len(),
            fields.len()
        )));
    }
    let data = row
        .iter()
        .zip(fields)
        .map(|(raw, field)| field.encode(raw.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::vector(data))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModalityKind {
    Tabular {
        /// Empty when the modality carries only numeric inline/container data.
        fields: Vec<FieldEncoding>,
        /// Contiguous occlusion groups; `None` masks each entry.
        groups: Option<usize>,
    },
    Text,
    Image {
        grid: PatchGrid,
    },
}

impl ModalityKind {
    pub fn is_text(&self) -> bool {
        matches!(self, Self::Text)
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Tabular { .. } => "tabular",
            Self::Text => "text",
            Self::Image { .. } => "image",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySpec {
    pub name: String,
    pub kind: ModalityKind,
    /// Declared tensor shape; `None` for text.
    pub shape: Option<Vec<usize>>,
    pub fill: FillStrategy,
}

impl ModalitySpec {
    pub fn tabular(name: impl Into<String>, len: usize) -> Self {
        Self {
            name: name.into(),
            kind: ModalityKind::Tabular {
                fields: Vec::new(),
                groups: None,
            },
            shape: Some(vec![len]),
            fill: FillStrategy::Zero,
        }
    }

    pub fn text(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ModalityKind::Text,
            shape: None,
            fill: FillStrategy::MaskToken(DEFAULT_MASK_TOKEN.into()),
        }
    }

    pub fn image(name: impl Into<String>, grid: PatchGrid) -> Self {
        Self {
            name: name.into(),
            shape: Some(grid.tensor_shape().to_vec()),
            kind: ModalityKind::Image { grid },
            fill: FillStrategy::Zero,
        }
    }

    pub fn with_fill(mut self, fill: FillStrategy) -> Self {
        self.fill = fill;
        self
    }

    /// Number of occlusion patches; `None` when it varies per sample (text).
    pub fn h(&self) -> Option<usize> {
        match &self.kind {
            ModalityKind::Tabular { groups, .. } => {
                Some(groups.unwrap_or_else(|| self.element_count()))
            }
            ModalityKind::Text => None,
            ModalityKind::Image { grid } => Some(grid.patch_count()),
        }
    }

    pub fn element_count(&self) -> usize {
        self.shape.as_ref().map_or(0, |s| s.iter().product())
    }

    /// The plan for fixed-size modalities; `None` for text.
    pub fn fixed_plan(&self, modality: usize) -> Result<Option<OcclusionPlan>> {
        match &self.kind {
            ModalityKind::Tabular { groups: None, .. } => {
                masking::plan_tabular(modality, self.element_count()).map(Some)
            }
            ModalityKind::Tabular {
                groups: Some(h), ..
            } => masking::plan_grouped(modality, self.element_count(), *h).map(Some),
            ModalityKind::Image { grid } => Ok(Some(masking::plan_image(modality, grid))),
            ModalityKind::Text => Ok(None),
        }
    }

    /// Names for each tabular entry, when the manifest declares fields.
    pub fn field_names(&self) -> Option<Vec<String>> {
        match &self.kind {
            ModalityKind::Tabular { fields, .. } if !fields.is_empty() => {
                Some(fields.iter().map(|f| f.name.clone()).collect())
            }
            _ => None,
        }
    }

    fn check_input(&self, input: &ModalityInput, sample: &str) -> Result<()> {
        let err = |message: String| Error::Sample {
            sample: sample.to_string(),
            message,
        };
        match (input, &self.shape) {
            (ModalityInput::Tokens(tokens), None) => {
                if tokens.is_empty() {
                    return Err(err(format!("text modality {:?} is empty", self.name)));
                }
                Ok(())
            }
            (ModalityInput::Dense(t), Some(shape)) if t.shape() == shape.as_slice() => Ok(()),
            (ModalityInput::Dense(t), Some(shape)) => Err(err(format!(
                "modality {:?} has shape {:?}, declared {:?}",
                self.name,
                t.shape(),
                shape
            ))),
            _ => Err(err(format!(
                "modality {:?} input kind does not match declared kind {}",
                self.name,
                self.kind.label()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// One input per modality, in manifest order.
    pub inputs: Vec<ModalityInput>,
}

/// Modalities plus fully loaded samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    name: String,
    modalities: Vec<ModalitySpec>,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        modalities: Vec<ModalitySpec>,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::manifest(
                "modalities",
                "at least one modality is required",
            ));
        }
        if samples.is_empty() {
            return Err(Error::manifest(
                "samples",
                "at least one sample is required",
            ));
        }
        check_unique_names(modalities.iter().map(|m| m.name.as_str()))?;
        for sample in &samples {
            if sample.inputs.len() != modalities.len() {
                return Err(Error::Sample {
                    sample: sample.id.clone(),
                    message: format!(
                        "has {} inputs, manifest declares {} modalities",
                        sample.inputs.len(),
                        modalities.len()
                    ),
                });
            }
            for (spec, input) in modalities.iter().zip(&sample.inputs) {
                spec.check_input(input, &sample.id)?;
            }
        }
        Ok(Self {
            name: name.into(),
            modalities,
            samples,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn modalities(&self) -> &[ModalitySpec] {
        &self.modalities
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.modalities.iter().map(|m| m.name.clone()).collect()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// N
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same dataset with samples in a different order.
    pub fn reordered(&self, order: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            modalities: self.modalities.clone(),
            samples: order.iter().map(|&k| self.samples[k].clone()).collect(),
        }
    }
}

fn check_unique_names<'a>(names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashMap::new();
    for (i, name) in names.enumerate() {
        if let Some(first) = seen.insert(name, i) {
            return Err(Error::manifest(
                format!("modalities[{i}].name"),
                format!("duplicate modality name {name:?} (first used at modalities[{first}])"),
            ));
        }
    }
    Ok(())
}

// ---- manifest document ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    name: String,
    modalities: Vec<ModalityDoc>,
    samples: Vec<SampleDoc>,
    #[serde(default, rename = "labels")]
    _labels: Option<serde_json::Value>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModalityDoc {
    name: String,
    kind: String,
    #[serde(default)]
    shape: Option<Vec<usize>>,
    #[serde(default)]
    fields: Vec<FieldEncoding>,
    #[serde(default)]
    channel_axis: Option<usize>,
    #[serde(default)]
    mask: MaskDoc,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskDoc {
    #[serde(default)]
    fill: Option<FillStrategy>,
    #[serde(default)]
    patch_shape: Option<Vec<usize>>,
    #[serde(default)]
    groups: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleDoc {
    id: String,
    inputs: BTreeMap<String, InputRef>,
}

/// Where a sample's modality data lives.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum InputRef {
    /// `MTN1` container (tabular/image) or UTF-8 text file.
    File {
        file: PathBuf,
    },
    /// Row of a CSV file with a header row; `row` counts data rows from 0.
    Csv {
        csv: PathBuf,
        row: usize,
    },
    /// Raw strings encoded through the modality's field table.
    Row {
        row: Vec<String>,
    },
    Values {
        values: Vec<f64>,
    },
    Text {
        text: String,
    },
}

#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub id: String,
    /// One reference per modality, in manifest order.
    pub inputs: Vec<InputRef>,
}

/// A validated manifest. Sample data is loaded on demand.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub name: String,
    pub root: PathBuf,
    pub modalities: Vec<ModalitySpec>,
    pub samples: Vec<SampleRecord>,
}

impl Manifest {
    pub fn n(&self) -> usize {
        self.modalities.len()
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    /// Loads every sample into memory.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let mut csv = CsvCache::default();
        let samples = (0..self.samples.len())
            .map(|k| load_sample_cached(self, k, &mut csv))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.name.clone(), self.modalities.clone(), samples)
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("")).to_path_buf();
    parse_manifest(&text, root)
}

/// Parses and validates a manifest document; `root` anchors relative paths.
pub fn parse_manifest(text: &str, root: PathBuf) -> Result<Manifest> {
    let doc: ManifestDoc = serde_json::from_str(text).map_err(|e| {
        Error::manifest(
            format!("line {} column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    if doc.modalities.is_empty() {
        return Err(Error::manifest(
            "modalities",
            "at least one modality is required",
        ));
    }
    if doc.samples.is_empty() {
        return Err(Error::manifest(
            "samples",
            "at least one sample is required",
        ));
    }
    check_unique_names(doc.modalities.iter().map(|m| m.name.as_str()))?;
    let modalities = doc
        .modalities
        .iter()
        .enumerate()
        .map(|(i, m)| modality_from_doc(i, m))
        .collect::<Result<Vec<_>>>()?;

    let mut ids = HashMap::new();
    let mut samples = Vec::with_capacity(doc.samples.len());
    for (k, s) in doc.samples.into_iter().enumerate() {
        if ids.insert(s.id.clone(), k).is_some() {
            return Err(Error::manifest(
                format!("samples[{k}].id"),
                format!("duplicate sample id {:?}", s.id),
            ));
        }
        if let Some(extra) = s
            .inputs
            .keys()
            .find(|name| !modalities.iter().any(|m| &m.name == *name))
        {
            return Err(Error::manifest(
                format!("samples[{k}].inputs.{extra}"),
                "no such modality",
            ));
        }
        let mut inputs = Vec::with_capacity(modalities.len());
        for spec in &modalities {
            let input = s.inputs.get(&spec.name).ok_or_else(|| Error::Sample {
                sample: s.id.clone(),
                message: format!("missing input for modality {:?}", spec.name),
            })?;
            check_ref_kind(spec, input).map_err(|message| {
                Error::manifest(format!("samples[{k}].inputs.{}", spec.name), message)
            })?;
            for file in input.files() {
                let full = root.join(file);
                if !full.is_file() {
                    return Err(Error::Sample {
                        sample: s.id.clone(),
                        message: format!("referenced file {} does not exist", full.display()),
                    });
                }
            }
            inputs.push(input.clone());
        }
        samples.push(SampleRecord { id: s.id, inputs });
    }

    Ok(Manifest {
        name: doc.name,
        root,
        modalities,
        samples,
    })
}

impl InputRef {
    fn files(&self) -> Vec<&Path> {
        match self {
            Self::File { file } => vec![file],
            Self::Csv { csv, .. } => vec![csv],
            _ => Vec::new(),
        }
    }
}

fn check_ref_kind(spec: &ModalitySpec, input: &InputRef) -> std::result::Result<(), String> {
    let ok = match (&spec.kind, input) {
        (ModalityKind::Text, InputRef::File { .. } | InputRef::Text { .. }) => true,
        (ModalityKind::Text, _) => false,
        (_, InputRef::Text { .. }) => false,
        (ModalityKind::Tabular { fields, .. }, InputRef::Csv { .. } | InputRef::Row { .. }) => {
            !fields.is_empty()
        }
        (ModalityKind::Image { .. }, InputRef::Csv { .. } | InputRef::Row { .. }) => false,
        _ => true,
    };
    if ok {
        Ok(())
    } else {
        Err(format!(
            "this input reference is not valid for a {} modality{}",
            spec.kind.label(),
            match &spec.kind {
                ModalityKind::Tabular { fields, .. } if fields.is_empty() =>
                    " without declared fields",
                _ => "",
            }
        ))
    }
}

fn modality_from_doc(i: usize, m: &ModalityDoc) -> Result<ModalitySpec> {
    let at = |field: &str| format!("modalities[{i}].{field}");
    let kind = match m.kind.as_str() {
        "tabular" => {
            let len = match (&m.shape, m.fields.len()) {
                (Some(s), nf) if s.len() == 1 && (nf == 0 || nf == s[0]) => s[0],
                (Some(s), nf) if s.len() == 1 => {
                    return Err(Error::manifest(
                        at("fields"),
                        format!("{nf} fields declared for shape {s:?}"),
                    ))
                }
                (Some(s), _) => {
                    return Err(Error::manifest(
                        at("shape"),
                        format!("tabular shape must be 1-D, got {s:?}"),
                    ))
                }
                (None, 0) => {
                    return Err(Error::manifest(
                        at("shape"),
                        "tabular needs shape or fields",
                    ))
                }
                (None, nf) => nf,
            };
            if len == 0 {
                return Err(Error::manifest(at("shape"), "tabular length must be ≥ 1"));
            }
            if let Some(h) = m.mask.groups {
                if h == 0 || h > len {
                    return Err(Error::manifest(
                        at("mask.groups"),
                        format!("groups must be in 1..={len}"),
                    ));
                }
            }
            if m.mask.patch_shape.is_some() {
                return Err(Error::manifest(
                    at("mask.patch_shape"),
                    "only valid for images",
                ));
            }
            ModalityKind::Tabular {
                fields: m.fields.clone(),
                groups: m.mask.groups,
            }
        }
        "text" => {
            if m.shape.is_some() {
                return Err(Error::manifest(
                    at("shape"),
                    "text modalities have no fixed shape",
                ));
            }
            if m.mask.patch_shape.is_some() || m.mask.groups.is_some() {
                return Err(Error::manifest(
                    at("mask"),
                    "text masks one token per patch",
                ));
            }
            ModalityKind::Text
        }
        "image" => {
            let shape = m
                .shape
                .as_ref()
                .ok_or_else(|| Error::manifest(at("shape"), "image needs a shape"))?;
            let patch = m.mask.patch_shape.as_ref().ok_or_else(|| {
                Error::manifest(at("mask.patch_shape"), "image needs a patch_shape")
            })?;
            let grid = PatchGrid::new(shape, patch, m.channel_axis)
                .map_err(|e| Error::manifest(at("mask.patch_shape"), e.to_string()))?;
            ModalityKind::Image { grid }
        }
        other => {
            return Err(Error::manifest(
                at("kind"),
                format!("unknown kind {other:?} (expected tabular, text or image)"),
            ))
        }
    };
    let fill = match (&m.mask.fill, &kind) {
        (Some(f), _) => f.clone(),
        (None, ModalityKind::Text) => FillStrategy::MaskToken(DEFAULT_MASK_TOKEN.into()),
        (None, _) => FillStrategy::Zero,
    };
    match (&fill, &kind) {
        (FillStrategy::MaskToken(_), ModalityKind::Text) => {}
        (FillStrategy::MaskToken(_), _) => {
            return Err(Error::manifest(
                at("mask.fill"),
                "mask tokens are only valid for text",
            ))
        }
        (_, ModalityKind::Text) => {
            return Err(Error::manifest(
                at("mask.fill"),
                "text modalities need token:<symbol>",
            ))
        }
        _ => {}
    }
    let shape = match &kind {
        ModalityKind::Tabular { .. } => {
            Some(vec![m.shape.as_ref().map_or(m.fields.len(), |s| s[0])])
        }
        ModalityKind::Text => None,
        ModalityKind::Image { grid } => Some(grid.tensor_shape().to_vec()),
    };
    Ok(ModalitySpec {
        name: m.name.clone(),
        kind,
        shape,
        fill,
    })
}

#[derive(Default)]
struct CsvCache {
    files: HashMap<PathBuf, CsvTable>,
}

struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvCache {
    fn get(&mut self, path: &Path) -> Result<&CsvTable> {
        if !self.files.contains_key(path) {
            let table = read_csv(path)?;
            self.files.insert(path.to_path_buf(), table);
        }
        Ok(&self.files[path])
    }
}

fn read_csv(path: &Path) -> Result<CsvTable> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let csv_err = |e: csv::Error| Error::Parse {
        path: path.to_path_buf(),
        offset: e.position().map_or(0, |p| p.byte()),
        message: e.to_string(),
    };
    let header = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        rows.push(
            record
                .map_err(csv_err)?
                .iter()
                .map(str::to_string)
                .collect(),
        );
    }
    Ok(CsvTable { header, rows })
}

/// Loads sample `k` of the manifest, one input per modality.
pub fn load_sample(manifest: &Manifest, k: usize) -> Result<Sample> {
    load_sample_cached(manifest, k, &mut CsvCache::default())
}

fn load_sample_cached(manifest: &Manifest, k: usize, csv: &mut CsvCache) -> Result<Sample> {
    let record = manifest.samples.get(k).ok_or_else(|| {
        Error::Invalid(format!(
            "sample index {k} out of range (N = {})",
            manifest.samples.len()
        ))
    })?;
    let mut inputs = Vec::with_capacity(manifest.modalities.len());
    for (spec, input) in manifest.modalities.iter().zip(&record.inputs) {
        let loaded = load_input(manifest, spec, input, &record.id, csv)?;
        spec.check_input(&loaded, &record.id)?;
        inputs.push(loaded);
    }
    Ok(Sample {
        id: record.id.clone(),
        inputs,
    })
}

fn load_input(
    manifest: &Manifest,
    spec: &ModalitySpec,
    input: &InputRef,
    sample: &str,
    csv: &mut CsvCache,
) -> Result<ModalityInput> {
    let fields = match &spec.kind {
        ModalityKind::Tabular { fields, .. } => fields.as_slice(),
        _ => &[],
    };
    let in_sample = |e: Error| Error::Sample {
        sample: sample.to_string(),
        message: e.to_string(),
    };
    match input {
        InputRef::File { file } => {
            let path = manifest.root.join(file);
            if spec.kind.is_text() {
                let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let text = String::from_utf8(text).map_err(|e| Error::Parse {
                    path: path.clone(),
                    offset: e.utf8_error().valid_up_to() as u64,
                    message: "invalid UTF-8".into(),
                })?;
                Ok(ModalityInput::Tokens(tokenize(&text)))
            } else {
                tensor::read_mtn(&path).map(ModalityInput::Dense)
            }
        }
        InputRef::Text { text } => Ok(ModalityInput::Tokens(tokenize(text))),
        InputRef::Values { values } => {
            let shape = spec.shape.clone().unwrap_or_default();
            Tensor::new(shape, values.clone())
                .map(ModalityInput::Dense)
                .map_err(in_sample)
        }
        InputRef::Row { row } => encode_tabular(row, fields)
            .map(ModalityInput::Dense)
            .map_err(in_sample),
        InputRef::Csv { csv: file, row } => {
            let path = manifest.root.join(file);
            let table = csv.get(&path)?;
            let values = table.rows.get(*row).ok_or_else(|| Error::Sample {
                sample: sample.to_string(),
                message: format!(
                    "{} has {} data rows, row {row} requested",
                    path.display(),
                    table.rows.len()
                ),
            })?;
            let mut picked = Vec::with_capacity(fields.len());
            for f in fields {
                let col = table
                    .header
                    .iter()
                    .position(|h| h == &f.name)
                    .ok_or_else(|| Error::Sample {
                        sample: sample.to_string(),
                        message: format!("{} has no column {:?}", path.display(), f.name),
                    })?;
                picked.push(values.get(col).map(String::as_str).unwrap_or(""));
            }
            encode_tabular(&picked, fields)
                .map(ModalityInput::Dense)
                .map_err(in_sample)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn brset_fields() -> Vec<FieldEncoding> {
        vec![
            FieldEncoding::numeric("patient_age"),
            FieldEncoding::enumeration(
                "comorbidities",
                &[("none", 0.0), ("diabetes", 1.0), ("hypertension", 2.0)],
            ),
            FieldEncoding::numeric("diabetes_time"),
            FieldEncoding::enumeration("insulin_use", &[("no", 0.0), ("yes", 1.0)]),
            FieldEncoding::numeric("patient_sex"),
            FieldEncoding::numeric("exam_eye"),
            FieldEncoding::enumeration("diabetes", &[("no", 0.0), ("yes", 1.0)]),
        ]
    }

    #[test]
    fn encode_examples() {
        let sex = [FieldEncoding::enumeration("sex", &[("M", 1.0), ("F", 2.0)])];
        assert_eq!(encode_tabular(&["M"], &sex).unwrap().data(), &[1.0]);
        let tobacco = [
            FieldEncoding::enumeration("tobacco", &[("yes", 1.0), ("no", 0.0)]).with_missing(-1.0),
        ];
        assert_eq!(encode_tabular(&[""], &tobacco).unwrap().data(), &[-1.0]);
        let num = [FieldEncoding::numeric("age")];
        assert_eq!(encode_tabular(&["54.5"], &num).unwrap().data(), &[54.5]);
    }

    #[test]
    fn unmapped_category_lists_allowed() {
        let sex = [FieldEncoding::enumeration("sex", &[("M", 1.0), ("F", 2.0)])];
        let err = encode_tabular(&["X"], &sex).unwrap_err().to_string();
        assert!(err.contains("F, M"), "{err}");
        assert!(encode_tabular(&[""], &sex).is_err());
        assert!(encode_tabular(&["abc"], &[FieldEncoding::numeric("n")]).is_err());
    }

    #[test]
    fn csv_row_encodes_to_seven_values() {
        let dir = TempDir::new().unwrap();
        let names: Vec<String> = brset_fields().iter().map(|f| f.name.clone()).collect();
        fs::write(
            dir.path().join("clinical.csv"),
            format!("{}\n63,none,10,yes,1,2,yes\n", names.join(",")),
        )
        .unwrap();
        let manifest = format!(
            r#"{{"name":"brset","modalities":[{{"name":"clinical","kind":"tabular","fields":{}}}],
               "samples":[{{"id":"img03501","inputs":{{"clinical":{{"csv":"clinical.csv","row":0}}}}}}]}}"#,
            serde_json::to_string(&brset_fields()).unwrap()
        );
        let m = parse_manifest(&manifest, dir.path().to_path_buf()).unwrap();
        let s = load_sample(&m, 0).unwrap();
        assert_eq!(
            s.inputs[0].as_dense().unwrap().data(),
            &[63.0, 0.0, 10.0, 1.0, 1.0, 2.0, 1.0]
        );
        assert_eq!(m.modalities[0].h(), Some(7));
    }

    #[test]
    fn minimal_manifest() {
        let m = parse_manifest(
            r#"{"name":"tiny","modalities":[{"name":"x","kind":"tabular","shape":[2]}],
                "samples":[{"id":"a","inputs":{"x":{"values":[1,2]}}}]}"#,
            PathBuf::new(),
        )
        .unwrap();
        assert_eq!((m.n(), m.sample_count()), (1, 1));
        let d = m.load_dataset().unwrap();
        assert_eq!(
            d.samples()[0].inputs[0].as_dense().unwrap().data(),
            &[1.0, 2.0]
        );
    }

    #[test]
    fn brset_shaped_manifest_has_240_patches() {
        let m = parse_manifest(
            r#"{"name":"brset","modalities":[
                 {"name":"fundus","kind":"image","shape":[960,1120,3],"mask":{"patch_shape":[64,70]}},
                 {"name":"clinical","kind":"tabular","shape":[7]}],
                "samples":[{"id":"a","inputs":{"fundus":{"values":[]},"clinical":{"values":[1,2,3,4,5,6,7]}}}]}"#,
            PathBuf::new(),
        )
        .unwrap();
        assert_eq!(m.n(), 2);
        assert_eq!(m.modalities[0].h(), Some(240));
        assert_eq!(m.modalities[1].h(), Some(7));
        // 960/64 * 1120/70 = 15 * 16
        assert_eq!((960 / 64) * (1120 / 70), 240);
    }

    #[test]
    fn manifest_errors_name_fields() {
        let dup = parse_manifest(
            r#"{"name":"d","modalities":[{"name":"x","kind":"tabular","shape":[1]},{"name":"x","kind":"text"}],
                "samples":[{"id":"a","inputs":{"x":{"values":[1]}}}]}"#,
            PathBuf::new(),
        )
        .unwrap_err()
        .to_string();
        assert!(dup.contains("modalities[1].name"), "{dup}");

        let missing = parse_manifest(
            r#"{"name":"d","modalities":[{"name":"x","kind":"image","shape":[4,4],"mask":{"patch_shape":[2,2]}}],
                "samples":[{"id":"s9","inputs":{"x":{"file":"nope.mtn"}}}]}"#,
            PathBuf::from("/nonexistent"),
        )
        .unwrap_err()
        .to_string();
        assert!(missing.contains("s9"), "{missing}");

        let bad_grid = parse_manifest(
            r#"{"name":"d","modalities":[{"name":"x","kind":"image","shape":[5,4],"mask":{"patch_shape":[2,2]}}],
                "samples":[{"id":"s","inputs":{"x":{"values":[]}}}]}"#,
            PathBuf::new(),
        )
        .unwrap_err()
        .to_string();
        assert!(
            bad_grid.contains("modalities[0].mask.patch_shape"),
            "{bad_grid}"
        );

        let token_on_tab = parse_manifest(
            r#"{"name":"d","modalities":[{"name":"x","kind":"tabular","shape":[1],"mask":{"fill":"token:[MASK]"}}],
                "samples":[{"id":"s","inputs":{"x":{"values":[1]}}}]}"#,
            PathBuf::new(),
        );
        assert!(token_on_tab.is_err());
    }

    #[test]
    fn text_and_container_inputs() {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("r.txt"), "no acute disease\n").unwrap();
        tensor::write_mtn(
            &dir.path().join("img.mtn"),
            &Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        )
        .unwrap();
        let m = parse_manifest(
            r#"{"name":"cxr","labels":"labels.csv","modalities":[
                 {"name":"xray","kind":"image","shape":[2,2],"mask":{"patch_shape":[1,2]}},
                 {"name":"report","kind":"text"}],
                "samples":[{"id":"a","inputs":{"xray":{"file":"img.mtn"},"report":{"file":"r.txt"}}}]}"#,
            dir.path().to_path_buf(),
        )
        .unwrap();
        let s = load_sample(&m, 0).unwrap();
        assert_eq!(
            s.inputs[1].as_tokens().unwrap(),
            &["no".to_string(), "acute".into(), "disease".into()]
        );
        assert_eq!(
            m.modalities[1].fill,
            FillStrategy::MaskToken("[MASK]".into())
        );
        assert_eq!(s, load_sample(&m, 0).unwrap());
        assert!(load_sample(&m, 1).is_err());
    }

    #[test]
    fn container_shape_mismatch_reports_offset() {
        let dir = TempDir::new().unwrap();
        let mut bytes = tensor::MAGIC.to_vec();
        bytes.extend_from_slice(b"{\"dtype\":\"f32\",\"shape\":[2,2]}\n");
        bytes.extend_from_slice(&[0u8; 12]);
        fs::write(dir.path().join("bad.mtn"), bytes).unwrap();
        let m = parse_manifest(
            r#"{"name":"d","modalities":[{"name":"x","kind":"image","shape":[2,2],"mask":{"patch_shape":[1,1]}}],
                "samples":[{"id":"s","inputs":{"x":{"file":"bad.mtn"}}}]}"#,
            dir.path().to_path_buf(),
        )
        .unwrap();
        let err = load_sample(&m, 0).unwrap_err().to_string();
        assert!(err.contains("bad.mtn") && err.contains("byte 35"), "{err}");
    }
}

//! Occlusion schedules and mask application.
//!
//! A modality's flattened input is split into `h` patches; each patch is
//! replaced by a fill value in its own forward pass.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ModalityInput};
use crate::error::{Error, Result};
use crate::kahan::KahanVec;
use crate::tensor::Tensor;

pub const DEFAULT_MASK_TOKEN: &str = "[MASK]";

/// Index sets into one modality's flattened input, one per patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionPlan {
    modality: usize,
    patches: Vec<Vec<usize>>,
}

impl OcclusionPlan {
    /// Builds a plan from explicit patches. Indices must be `< len`, and
    /// every patch must be nonempty.
    pub fn new(modality: usize, patches: Vec<Vec<usize>>, len: usize) -> Result<Self> {
        if patches.is_empty() {
            return Err(Error::Mask("plan has no patches".into()));
        }
        for (l, p) in patches.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::Mask(format!("patch {l} is empty")));
            }
            if let Some(bad) = p.iter().find(|&&i| i >= len) {
                return Err(Error::Mask(format!(
                    "patch {l} index {bad} out of range for {len} elements"
                )));
            }
        }
        Ok(Self { modality, patches })
    }

    pub fn modality(&self) -> usize {
        self.modality
    }

    pub fn h(&self) -> usize {
        self.patches.len()
    }

    pub fn patches(&self) -> &[Vec<usize>] {
        &self.patches
    }

    pub fn patch(&self, l: usize) -> &[usize] {
        &self.patches[l]
    }

    /// True when patches are pairwise disjoint and cover `0..len`.
    pub fn is_partition(&self, len: usize) -> bool {
        let mut seen = vec![false; len];
        let mut count = 0;
        for p in &self.patches {
            for &i in p {
                if i >= len || seen[i] {
                    return false;
                }
                seen[i] = true;
                count += 1;
            }
        }
        count == len
    }
}

/// How occluded positions are filled.
///
/// Serialized as `zero`, `mean` or `token:<symbol>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FillStrategy {
    Zero,
    DatasetMean,
    MaskToken(String),
}

impl TryFrom<String> for FillStrategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<FillStrategy> for String {
    fn from(f: FillStrategy) -> String {
        f.label()
    }
}

impl FillStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "mean" => Ok(Self::DatasetMean),
            _ => match s.strip_prefix("token:") {
                Some(sym) if !sym.is_empty() => Ok(Self::MaskToken(sym.to_string())),
                _ => Err(Error::Invalid(format!(
                    "fill {s:?}: expected zero, mean or token:<symbol>"
                ))),
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Zero => "zero".into(),
            Self::DatasetMean => "mean".into(),
            Self::MaskToken(sym) => format!("token:{sym}"),
        }
    }
}

/// A fill strategy with its data resolved against a dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedFill {
    Zero,
    Mean(Tensor),
    Token(String),
}

/// Tile layout over the spatial axes of an image or volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    /// Full tensor shape, channel axis included when present.
    tensor_shape: Vec<usize>,
    patch_shape: Vec<usize>,
    channel_axis: Option<usize>,
}

impl PatchGrid {
    /// `tensor_shape` may carry one extra axis beyond `patch_shape`; it is the
    /// channel axis (last unless `channel_axis` says otherwise) and is never
    /// partitioned.
    pub fn new(
        tensor_shape: &[usize],
        patch_shape: &[usize],
        channel_axis: Option<usize>,
    ) -> Result<Self> {
        let d = patch_shape.len();
        if !(2..=3).contains(&d) {
            return Err(Error::Grid(format!(
                "patch_shape must have 2 or 3 axes, got {d}"
            )));
        }
        let channel_axis = match tensor_shape.len() {
            n if n == d => {
                if channel_axis.is_some() {
                    return Err(Error::Grid(
                        "channel_axis given but shape has no extra axis".into(),
                    ));
                }
                None
            }
            n if n == d + 1 => {
                let axis = channel_axis.unwrap_or(d);
                if axis > d {
                    return Err(Error::Grid(format!("channel_axis {axis} out of range")));
                }
                Some(axis)
            }
            n => {
                return Err(Error::Grid(format!(
                    "image shape {tensor_shape:?} has {n} axes; expected {d} or {} for patch_shape {patch_shape:?}",
                    d + 1
                )))
            }
        };
        let grid = Self {
            tensor_shape: tensor_shape.to_vec(),
            patch_shape: patch_shape.to_vec(),
            channel_axis,
        };
        let spatial = grid.spatial_shape();
        let bad: Vec<usize> = (0..d)
            .filter(|&a| patch_shape[a] == 0 || !spatial[a].is_multiple_of(patch_shape[a]))
            .collect();
        if !bad.is_empty() {
            let suggestion: Vec<usize> = (0..d)
                .map(|a| nearest_divisor(spatial[a], patch_shape[a]))
                .collect();
            return Err(Error::Grid(format!(
                "patch_shape {patch_shape:?} does not divide image shape {spatial:?} on axes {bad:?}; nearest valid patch_shape is {suggestion:?}"
            )));
        }
        Ok(grid)
    }

    pub fn tensor_shape(&self) -> &[usize] {
        &self.tensor_shape
    }

    pub fn patch_shape(&self) -> &[usize] {
        &self.patch_shape
    }

    pub fn channel_axis(&self) -> Option<usize> {
        self.channel_axis
    }

    /// Tensor shape without the channel axis.
    pub fn spatial_shape(&self) -> Vec<usize> {
        self.tensor_shape
            .iter()
            .enumerate()
            .filter(|(a, _)| Some(*a) != self.channel_axis)
            .map(|(_, &s)| s)
            .collect()
    }

    /// Number of tiles along each spatial axis.
    pub fn tiles(&self) -> Vec<usize> {
        self.spatial_shape()
            .iter()
            .zip(&self.patch_shape)
            .map(|(s, p)| s / p)
            .collect()
    }

    pub fn patch_count(&self) -> usize {
        self.tiles().iter().product()
    }
}

fn nearest_divisor(extent: usize, wanted: usize) -> usize {
    (1..=extent.max(1))
        .filter(|c| extent.is_multiple_of(*c))
        .min_by_key(|&c| (c.abs_diff(wanted), c))
        .unwrap_or(1)
}

/// One singleton patch per entry.
pub fn plan_tabular(modality: usize, length: usize) -> Result<OcclusionPlan> {
    if length == 0 {
        return Err(Error::Mask("tabular modality has length 0".into()));
    }
    OcclusionPlan::new(modality, (0..length).map(|i| vec![i]).collect(), length)
}

/// `h` contiguous groups of near-equal size (sizes differ by at most one).
pub fn plan_grouped(modality: usize, length: usize, h: usize) -> Result<OcclusionPlan> {
    if length == 0 || h == 0 || h > length {
        return Err(Error::Mask(format!(
            "cannot split {length} entries into {h} groups"
        )));
    }
    let base = length / h;
    let extra = length % h;
    let mut start = 0;
    let mut patches = Vec::with_capacity(h);
    for g in 0..h {
        let size = base + usize::from(g < extra);
        patches.push((start..start + size).collect());
        start += size;
    }
    OcclusionPlan::new(modality, patches, length)
}

/// One patch per token position. `sample` names the sample in errors.
pub fn plan_text(modality: usize, token_count: usize, sample: &str) -> Result<OcclusionPlan> {
    if token_count == 0 {
        return Err(Error::Sample {
            sample: sample.to_string(),
            message: "text is empty; nothing to occlude".into(),
        });
    }
    OcclusionPlan::new(
        modality,
        (0..token_count).map(|i| vec![i]).collect(),
        token_count,
    )
}

/// Row-major tiles; each patch holds every flat index (all channels) of its tile.
pub fn plan_image(modality: usize, grid: &PatchGrid) -> OcclusionPlan {
    let shape = grid.tensor_shape();
    let tiles = grid.tiles();
    let total: usize = shape.iter().product();
    let mut patches: Vec<Vec<usize>> = vec![Vec::new(); grid.patch_count()];
    let mut index = vec![0usize; shape.len()];
    for flat in 0..total {
        let mut tile = 0usize;
        let mut spatial_axis = 0usize;
        for (axis, &coord) in index.iter().enumerate() {
            if Some(axis) == grid.channel_axis() {
                continue;
            }
            let t = coord / grid.patch_shape()[spatial_axis];
            tile = tile * tiles[spatial_axis] + t;
            spatial_axis += 1;
        }
        patches[tile].push(flat);
        for axis in (0..shape.len()).rev() {
            index[axis] += 1;
            if index[axis] < shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    OcclusionPlan { modality, patches }
}

/// Elementwise mean of one modality across all samples.
pub fn compute_fill(dataset: &Dataset, modality: usize) -> Result<Tensor> {
    let name = &dataset.modalities()[modality].name;
    let mut shape: Option<Vec<usize>> = None;
    let mut acc: Option<KahanVec> = None;
    let n = dataset.len();
    for sample in dataset.samples() {
        let tensor = match &sample.inputs[modality] {
            ModalityInput::Dense(t) => t,
            ModalityInput::Tokens(_) => {
                return Err(Error::Mask(format!(
                    "dataset-mean fill is unavailable for text modality {name:?}"
                )))
            }
        };
        match &shape {
            None => {
                shape = Some(tensor.shape().to_vec());
                acc = Some(KahanVec::zeros(tensor.len()));
            }
            Some(s) if s != tensor.shape() => {
                return Err(Error::Sample {
                    sample: sample.id.clone(),
                    message: format!(
                        "modality {name:?} has shape {:?}, other samples have {s:?}",
                        tensor.shape()
                    ),
                })
            }
            Some(_) => {}
        }
        acc.as_mut()
            .expect("initialized with shape")
            .add_scaled(tensor.data(), 1.0 / n as f64);
    }
    let shape = shape.ok_or_else(|| Error::Mask("dataset has no samples".into()))?;
    if n == 1 {
        log::warn!(
            "mean fill for {name:?} computed from a single sample; every masked pass reproduces the input"
        );
    }
    Tensor::new(shape, acc.expect("initialized").values())
}

/// Resolves `strategy` for one modality, touching the dataset only for mean fill.
pub fn resolve_fill(
    dataset: &Dataset,
    modality: usize,
    strategy: &FillStrategy,
) -> Result<ResolvedFill> {
    let spec = &dataset.modalities()[modality];
    let is_text = spec.kind.is_text();
    match strategy {
        FillStrategy::Zero if is_text => Err(Error::Mask(format!(
            "text modality {:?} needs a mask token fill",
            spec.name
        ))),
        FillStrategy::Zero => Ok(ResolvedFill::Zero),
        FillStrategy::DatasetMean => compute_fill(dataset, modality).map(ResolvedFill::Mean),
        FillStrategy::MaskToken(sym) if is_text => Ok(ResolvedFill::Token(sym.clone())),
        FillStrategy::MaskToken(_) => Err(Error::Mask(format!(
            "mask token fill is only valid for text; {:?} is {}",
            spec.name,
            spec.kind.label()
        ))),
    }
}

/// Copy of `input` with the positions in `patch` replaced by `fill`.
pub fn apply_mask(
    input: &ModalityInput,
    patch: &[usize],
    fill: &ResolvedFill,
) -> Result<ModalityInput> {
    let len = input.len();
    if let Some(bad) = patch.iter().find(|&&i| i >= len) {
        return Err(Error::Mask(format!(
            "index {bad} out of range for {len} elements"
        )));
    }
    match (input, fill) {
        (ModalityInput::Dense(t), ResolvedFill::Zero) => {
            let mut out = t.clone();
            let data = out.data_mut();
            for &i in patch {
                data[i] = 0.0;
            }
            Ok(ModalityInput::Dense(out))
        }
        (ModalityInput::Dense(t), ResolvedFill::Mean(mean)) => {
            if mean.shape() != t.shape() {
                return Err(Error::Mask(format!(
                    "mean shape {:?} differs from input shape {:?}",
                    mean.shape(),
                    t.shape()
                )));
            }
            let mut out = t.clone();
            let data = out.data_mut();
            for &i in patch {
                data[i] = mean.data()[i];
            }
            Ok(ModalityInput::Dense(out))
        }
        (ModalityInput::Tokens(tokens), ResolvedFill::Token(sym)) => {
            let mut out = tokens.clone();
            for &i in patch {
                out[i] = sym.clone();
            }
            Ok(ModalityInput::Tokens(out))
        }
        (ModalityInput::Tokens(_), _) => Err(Error::Mask(
            "text input can only be masked with a token".into(),
        )),
        (ModalityInput::Dense(_), ResolvedFill::Token(_)) => Err(Error::Mask(
            "numeric input cannot be masked with a token".into(),
        )),
    }
}

//! Data model for 3D/4D volumes, masks and deformation fields, plus the raw
//! file format used for persistence and exchange.
//!
//! All voxel data is stored x-fastest: voxel `(x, y, z)` of channel `c` lives
//! at linear index `c·nx·ny·nz + x + nx·(y + ny·z)`. Files come in pairs, a
//! JSON header `<name>.vol.json` and a raw little-endian sample file
//! `<name>.vol.raw`, channel-major then x-fastest.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// Volume extents in voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Dims {
        Dims { nx, ny, nz }
    }

    pub fn voxel_count(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Linear index of voxel (x, y, z) within one channel.
    #[inline(always)]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    /// Euclidean length of the index-space diagonal, in voxel units.
    pub fn diagonal(&self) -> f64 {
        let dx = (self.nx - 1) as f64;
        let dy = (self.ny - 1) as f64;
        let dz = (self.nz - 1) as f64;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::Invalid(format!("dims must be positive, got {self:?}")));
        }
        Ok(())
    }
}

/// Physical voxel spacing in millimeters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub sx: f64,
    pub sy: f64,
    pub sz: f64,
}

impl Spacing {
    pub fn new(sx: f64, sy: f64, sz: f64) -> Spacing {
        Spacing { sx, sy, sz }
    }

    pub fn isotropic(s: f64) -> Spacing {
        Spacing::new(s, s, s)
    }

    fn validate(&self) -> Result<()> {
        if !(self.sx > 0.0 && self.sy > 0.0 && self.sz > 0.0) {
            return Err(Error::Invalid(format!(
                "spacing components must be strictly positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// A 3D scalar field: the unit of all image data.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeGrid {
    pub dims: Dims,
    pub spacing: Spacing,
    data: Vec<f32>,
}

impl VolumeGrid {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<VolumeGrid> {
        dims.validate()?;
        spacing.validate()?;
        if data.len() != dims.voxel_count() {
            return Err(Error::ShapeMismatch(format!(
                "volume data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                dims.voxel_count()
            )));
        }
        if let Some(index) = first_non_finite(&data) {
            return Err(Error::NonFinite {
                index,
                context: Some("volume intensity".into()),
            });
        }
        Ok(VolumeGrid { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> VolumeGrid {
        VolumeGrid {
            dims,
            spacing,
            data: vec![0.0; dims.voxel_count()],
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Replace the sample buffer, keeping dims/spacing. The replacement is
    /// validated like `new`.
    pub fn with_data(&self, data: Vec<f32>) -> Result<VolumeGrid> {
        VolumeGrid::new(self.dims, self.spacing, data)
    }
}

fn first_non_finite(data: &[f32]) -> Option<usize> {
    data.iter().position(|v| !v.is_finite())
}

/// A 3-vector displacement per voxel, in voxel units, channel-major
/// (all u_x, then all u_y, then all u_z).
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub dims: Dims,
    pub spacing: Spacing,
    data: Vec<f32>,
}

impl DeformationField {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<DeformationField> {
        dims.validate()?;
        spacing.validate()?;
        if data.len() != 3 * dims.voxel_count() {
            return Err(Error::ShapeMismatch(format!(
                "field data length {} does not match 3x{} components",
                data.len(),
                dims.voxel_count()
            )));
        }
        if let Some(index) = first_non_finite(&data) {
            return Err(Error::NonFinite {
                index,
                context: Some("field component".into()),
            });
        }
        Ok(DeformationField { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> DeformationField {
        DeformationField {
            dims,
            spacing,
            data: vec![0.0; 3 * dims.voxel_count()],
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Displacement vector at voxel (x, y, z).
    pub fn at(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        let n = self.dims.voxel_count();
        let i = self.dims.index(x, y, z);
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }
}

/// One unsigned 8-bit class label per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    pub dims: Dims,
    pub spacing: Spacing,
    pub num_classes: u8,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(dims: Dims, spacing: Spacing, num_classes: u8, data: Vec<u8>) -> Result<LabelMask> {
        dims.validate()?;
        spacing.validate()?;
        if num_classes < 2 {
            return Err(Error::Invalid(format!(
                "a label mask needs at least 2 classes, got {num_classes}"
            )));
        }
        if data.len() != dims.voxel_count() {
            return Err(Error::ShapeMismatch(format!(
                "mask data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if let Some(index) = data.iter().position(|&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: data[index],
                num_classes,
                index,
            });
        }
        Ok(LabelMask {
            dims,
            spacing,
            num_classes,
            data,
        })
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.dims.index(x, y, z)]
    }

    /// Number of voxels carrying `label`.
    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }
}

/// Per-voxel class probabilities, channel-major (class-major).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub dims: Dims,
    pub spacing: Spacing,
    pub num_classes: usize,
    data: Vec<f32>,
}

impl ProbabilityMap {
    /// Validates shape and that per-voxel probabilities are nonnegative and
    /// sum to 1 within 1e-5.
    pub fn new(
        dims: Dims,
        spacing: Spacing,
        num_classes: usize,
        data: Vec<f32>,
    ) -> Result<ProbabilityMap> {
        dims.validate()?;
        spacing.validate()?;
        let n = dims.voxel_count();
        if num_classes < 2 {
            return Err(Error::Invalid("probability map needs at least 2 classes".into()));
        }
        if data.len() != num_classes * n {
            return Err(Error::ShapeMismatch(format!(
                "probability data length {} does not match {num_classes} classes x {n} voxels",
                data.len()
            )));
        }
        for i in 0..n {
            let mut sum = 0.0f64;
            for c in 0..num_classes {
                let p = data[c * n + i];
                if !(p >= 0.0) {
                    return Err(Error::Invalid(format!(
                        "negative or NaN probability {p} at voxel {i}, class {c}"
                    )));
                }
                sum += p as f64;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::Invalid(format!(
                    "probabilities at voxel {i} sum to {sum}, expected 1 within 1e-5"
                )));
            }
        }
        Ok(ProbabilityMap {
            dims,
            spacing,
            num_classes,
            data,
        })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Per-voxel argmax, ties resolved toward the lower class id (background).
    pub fn argmax_mask(&self) -> LabelMask {
        let n = self.dims.voxel_count();
        let mut labels = vec![0u8; n];
        for (i, label) in labels.iter_mut().enumerate() {
            let mut best_c = 0usize;
            let mut best_p = self.data[i];
            for c in 1..self.num_classes {
                let p = self.data[c * n + i];
                if p > best_p {
                    best_p = p;
                    best_c = c;
                }
            }
            *label = best_c as u8;
        }
        LabelMask::new(self.dims, self.spacing, self.num_classes.max(2) as u8, labels)
            .expect("argmax labels are always in range")
    }
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    channels: usize,
    dtype: String,
}

/// The raw companion of a `.json` header path.
pub(crate) fn raw_path(header_path: &Path) -> Result<PathBuf> {
    let s = header_path.to_string_lossy();
    match s.strip_suffix(".json") {
        Some(stem) => Ok(PathBuf::from(format!("{stem}.raw"))),
        None => Err(Error::Invalid(format!(
            "volume header path must end in .json, got {s}"
        ))),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_header(path: &Path) -> Result<VolumeHeader> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_pair(path: &Path, header: &VolumeHeader, raw: &[u8]) -> Result<()> {
    let json = serde_json::to_string_pretty(header).expect("header serializes");
    fs::write(path, json).map_err(io_err(path))?;
    let rp = raw_path(path)?;
    fs::write(&rp, raw).map_err(io_err(&rp))?;
    Ok(())
}

fn read_raw(header_path: &Path, expected: usize) -> Result<Vec<u8>> {
    let rp = raw_path(header_path)?;
    let bytes = fs::read(&rp).map_err(io_err(&rp))?;
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            path: rp,
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes)
}

fn f32s_to_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Load a scalar volume from a `<name>.vol.json` / `<name>.vol.raw` pair.
pub fn load_volume(path: &Path) -> Result<VolumeGrid> {
    let h = read_header(path)?;
    if h.channels != 1 || h.dtype != "f32" {
        return Err(Error::Invalid(format!(
            "{}: expected a 1-channel f32 volume, got {} channels of {}",
            path.display(),
            h.channels,
            h.dtype
        )));
    }
    let dims = Dims::new(h.dims[0], h.dims[1], h.dims[2]);
    let bytes = read_raw(path, dims.voxel_count() * 4)?;
    VolumeGrid::new(
        dims,
        Spacing::new(h.spacing[0], h.spacing[1], h.spacing[2]),
        bytes_to_f32s(&bytes),
    )
}

/// Save a scalar volume as a header/raw pair; `path` names the `.json` header.
pub fn save_volume(v: &VolumeGrid, path: &Path) -> Result<()> {
    let header = VolumeHeader {
        dims: [v.dims.nx, v.dims.ny, v.dims.nz],
        spacing: [v.spacing.sx, v.spacing.sy, v.spacing.sz],
        channels: 1,
        dtype: "f32".into(),
    };
    write_pair(path, &header, &f32s_to_bytes(v.data()))
}

/// Load a 3-channel deformation field.
pub fn load_field(path: &Path) -> Result<DeformationField> {
    let h = read_header(path)?;
    if h.channels != 3 || h.dtype != "f32" {
        return Err(Error::Invalid(format!(
            "{}: expected a 3-channel f32 field, got {} channels of {}",
            path.display(),
            h.channels,
            h.dtype
        )));
    }
    let dims = Dims::new(h.dims[0], h.dims[1], h.dims[2]);
    let bytes = read_raw(path, 3 * dims.voxel_count() * 4)?;
    DeformationField::new(
        dims,
        Spacing::new(h.spacing[0], h.spacing[1], h.spacing[2]),
        bytes_to_f32s(&bytes),
    )
}

pub fn save_field(f: &DeformationField, path: &Path) -> Result<()> {
    let header = VolumeHeader {
        dims: [f.dims.nx, f.dims.ny, f.dims.nz],
        spacing: [f.spacing.sx, f.spacing.sy, f.spacing.sz],
        channels: 3,
        dtype: "f32".into(),
    };
    write_pair(path, &header, &f32s_to_bytes(f.data()))
}

/// Load a label mask; `num_classes` is inferred as `max(label) + 1`, floored
/// at two classes.
pub fn load_mask(path: &Path) -> Result<LabelMask> {
    let h = read_header(path)?;
    if h.channels != 1 || h.dtype != "u8" {
        return Err(Error::Invalid(format!(
            "{}: expected a 1-channel u8 mask, got {} channels of {}",
            path.display(),
            h.channels,
            h.dtype
        )));
    }
    let dims = Dims::new(h.dims[0], h.dims[1], h.dims[2]);
    let data = read_raw(path, dims.voxel_count())?;
    let num_classes = data.iter().copied().max().unwrap_or(0).saturating_add(1).max(2);
    LabelMask::new(
        dims,
        Spacing::new(h.spacing[0], h.spacing[1], h.spacing[2]),
        num_classes,
        data,
    )
}

pub fn save_mask(m: &LabelMask, path: &Path) -> Result<()> {
    let header = VolumeHeader {
        dims: [m.dims.nx, m.dims.ny, m.dims.nz],
        spacing: [m.spacing.sx, m.spacing.sy, m.spacing.sz],
        channels: 1,
        dtype: "u8".into(),
    };
    write_pair(path, &header, m.data())
}

// ---------------------------------------------------------------------------
// Study manifest
// ---------------------------------------------------------------------------

/// Reference to a stored deformation field between two phases.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct FieldRef {
    pub from: usize,
    pub to: usize,
    pub path: String,
}

/// A 4D study on disk: T time-point volumes in chronological order, optional
/// per-phase masks, and optional inter-phase deformation fields. All paths are
/// relative to the manifest's directory.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StudyManifest {
    pub study_id: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub volumes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldRef>,
}

impl StudyManifest {
    pub fn time_points(&self) -> usize {
        self.volumes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.volumes.len() < 2 {
            return Err(Error::Invalid(format!(
                "study {} has {} time points, need at least 2",
                self.study_id,
                self.volumes.len()
            )));
        }
        if let Some(masks) = &self.masks {
            if masks.len() != self.volumes.len() {
                return Err(Error::Invalid(format!(
                    "study {}: {} masks for {} volumes",
                    self.study_id,
                    masks.len(),
                    self.volumes.len()
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<StudyManifest> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let manifest: StudyManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json).map_err(io_err(path))
    }

    /// Path of the stored field from phase `from` to phase `to`, if present.
    pub fn field_path(&self, from: usize, to: usize) -> Option<&str> {
        self.fields
            .iter()
            .find(|f| f.from == from && f.to == to)
            .map(|f| f.path.as_str())
    }
}

// ---------------------------------------------------------------------------
// Intensity preprocessing
// ---------------------------------------------------------------------------

/// Nearest-rank quantile: the value at 1-indexed rank `ceil(q * n)` of the
/// sorted data (q in (0, 1]).
pub(crate) fn nearest_rank_quantile(sorted: &[f32], q: f64) -> f32 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Clamp the brightest `top_fraction` of voxels to the (1 - top_fraction)
/// quantile. Deterministic nearest-rank quantile on a sorted copy.
pub fn clip_intensities(v: &VolumeGrid, top_fraction: f64) -> Result<VolumeGrid> {
    if !(0.0..1.0).contains(&top_fraction) {
        return Err(Error::Invalid(format!(
            "top_fraction must be in [0, 1), got {top_fraction}"
        )));
    }
    if top_fraction == 0.0 {
        return Ok(v.clone());
    }
    let mut sorted: Vec<f32> = v.data().to_vec();
    sorted.sort_by(f32::total_cmp);
    let q = nearest_rank_quantile(&sorted, 1.0 - top_fraction);
    let data = v.data().iter().map(|&x| x.min(q)).collect();
    v.with_data(data)
}

/// Min-max normalize intensities to [0, 1]; a constant volume maps to all
/// zeros.
pub fn normalize(v: &VolumeGrid) -> VolumeGrid {
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &x in v.data() {
        min = min.min(x);
        max = max.max(x);
    }
    if max <= min {
        return VolumeGrid::zeros(v.dims, v.spacing);
    }
    let scale = 1.0 / (max - min);
    let data = v.data().iter().map(|&x| (x - min) * scale).collect();
    v.with_data(data).expect("affine map of finite data is finite")
}

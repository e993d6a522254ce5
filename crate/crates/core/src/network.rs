//! The two architectures: the deformation estimator (`SsNet`, a U-shaped
//! encoder/decoder over two stacked adjacent volumes) and the dual-branch
//! segmentation network (`SsSl`, independent image and motion encoders fused
//! per level into one decoder), plus parameter initialization and checkpoints.
//!
//! Channel widths double per encoder level from `base_channels`. Downsampling
//! is by stride-2 convolution, upsampling by nearest-neighbor 2x followed by
//! convolution, skips by channel concatenation. There are no normalization
//! layers: batch size is 1 throughout, which makes batch statistics
//! degenerate, and omitting them keeps runs deterministic.

use crate::autodiff::{Graph, NodeId, Scalar, Shape};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume::Dims;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

/// Leaky ReLU slope used throughout both networks.
pub const ACTIVATION_SLOPE: f64 = 0.2;

/// Init scale of the field-predicting head: near-zero weights start the
/// registration at the identity transform, which the optimization needs.
pub const FIELD_HEAD_INIT_SCALE: f64 = 1e-5;

/// Configuration of the deformation estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsNetConfig {
    pub base_channels: usize,
    /// Number of stride-2 downsampling levels; every input extent must be
    /// divisible by `2^depth`.
    pub depth: usize,
}

impl Default for SsNetConfig {
    fn default() -> Self {
        SsNetConfig {
            base_channels: 8,
            depth: 4,
        }
    }
}

/// Two stacked adjacent volumes in, three field components out.
pub const SSNET_IN_CHANNELS: usize = 2;
pub const SSNET_OUT_CHANNELS: usize = 3;

/// Configuration of the dual-branch segmentation network. The image branch
/// consumes intensity plus the motion distance map (2 channels); the motion
/// branch consumes the 3-channel deformation field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsSlConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub num_classes: usize,
}

impl Default for SsSlConfig {
    fn default() -> Self {
        SsSlConfig {
            base_channels: 8,
            depth: 3,
            num_classes: 2,
        }
    }
}

pub const SSSL_IMAGE_IN_CHANNELS: usize = 2;
pub const SSSL_MOTION_IN_CHANNELS: usize = 3;

fn validate_depth(cfg_depth: usize, d: Dims) -> Result<()> {
    if cfg_depth == 0 {
        return Err(Error::Invalid("network depth must be at least 1".into()));
    }
    let div = 1usize << cfg_depth;
    for (name, ext) in [("x", d.nx), ("y", d.ny), ("z", d.nz)] {
        if ext % div != 0 || ext / div == 0 {
            return Err(Error::Invalid(format!(
                "extent {name}={ext} is not divisible by 2^depth = {div}"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// One named weight or bias buffer (always f32; graphs cast on entry).
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Shape,
    pub values: Vec<f32>,
}

/// Ordered, uniquely named map of all learnable buffers of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> ParameterSet {
        ParameterSet::default()
    }

    pub fn push(&mut self, name: &str, shape: Shape, values: Vec<f32>) {
        assert_eq!(values.len(), shape.count(), "{name}: data/shape mismatch");
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape,
            values,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all buffers.
    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.values.len()).collect()
    }

    /// Mutable view of every buffer, aligned with [`ParameterSet::sizes`].
    pub fn buffers_mut(&mut self) -> Vec<&mut [f32]> {
        self.params
            .iter_mut()
            .map(|p| p.values.as_mut_slice())
            .collect()
    }

    /// Create one graph leaf per parameter (requiring gradients) and return
    /// the name → node mapping used by the forward builders.
    pub fn instantiate<S: Scalar>(&self, g: &mut Graph<S>) -> NamedLeaves {
        let mut map = HashMap::with_capacity(self.params.len());
        let mut ids = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let values = p.values.iter().map(|&v| S::from_f32(v)).collect();
            let id = g.leaf(p.shape.clone(), values, true);
            map.insert(p.name.clone(), id);
            ids.push(id);
        }
        NamedLeaves { map, ids }
    }

    /// Gradients of every parameter leaf after a backward pass, in parameter
    /// order, cast to f32; zeros where nothing flowed.
    pub fn collect_grads<S: Scalar>(&self, g: &Graph<S>, leaves: &NamedLeaves) -> Vec<Vec<f32>> {
        leaves
            .ids
            .iter()
            .map(|&id| g.grad_or_zeros(id).iter().map(|v| v.to_f32()).collect())
            .collect()
    }

    /// Order-sensitive structural comparison; errors name the first mismatch.
    pub fn check_compatible(&self, other: &ParameterSet) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} parameters vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(other.params.iter()) {
            if a.name != b.name {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter name {} vs {}",
                    a.name, b.name
                )));
            }
            if a.shape != b.shape {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    a.name, b.shape, a.shape
                )));
            }
        }
        Ok(())
    }

    /// FNV-1a over all parameter bytes; used to assert freeze contracts.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for v in &p.values {
                eat(&v.to_le_bytes());
            }
        }
        h
    }
}

/// Name → graph leaf mapping for one instantiated parameter set.
pub struct NamedLeaves {
    map: HashMap<String, NodeId>,
    ids: Vec<NodeId>,
}

impl NamedLeaves {
    pub fn from_pairs(names: &[String], ids: &[NodeId]) -> NamedLeaves {
        assert_eq!(names.len(), ids.len());
        NamedLeaves {
            map: names.iter().cloned().zip(ids.iter().copied()).collect(),
            ids: ids.to_vec(),
        }
    }

    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter {name}")))
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

fn conv_param_into(
    set: &mut ParameterSet,
    rng: &mut Rng,
    name: &str,
    c_out: usize,
    c_in: usize,
    head_scale: Option<f64>,
) {
    let fan_in = (c_in * 27) as f64;
    // Kaiming-style fan-in scaling for the leaky activation.
    let std = match head_scale {
        Some(s) => s,
        None => (2.0 / ((1.0 + ACTIVATION_SLOPE * ACTIVATION_SLOPE) * fan_in)).sqrt(),
    };
    let w: Vec<f32> = (0..c_out * c_in * 27)
        .map(|_| (rng.normal() * std) as f32)
        .collect();
    set.push(&format!("{name}.w"), Shape::conv_weight(c_out, c_in), w);
    let b: Vec<f32> = match head_scale {
        Some(s) => (0..c_out).map(|_| (rng.normal() * s) as f32).collect(),
        None => vec![0.0; c_out],
    };
    set.push(&format!("{name}.b"), Shape(vec![c_out]), b);
}

/// Deterministic initialization of the deformation estimator's parameters.
pub fn ssnet_params(cfg: &SsNetConfig, seed: u64) -> ParameterSet {
    let mut rng = Rng::new(seed);
    let mut set = ParameterSet::new();
    let b = cfg.base_channels;
    conv_param_into(&mut set, &mut rng, "enc0", b, SSNET_IN_CHANNELS, None);
    for lvl in 1..=cfg.depth {
        let c_in = b << (lvl - 1);
        conv_param_into(&mut set, &mut rng, &format!("enc{lvl}"), c_in * 2, c_in, None);
    }
    for lvl in (0..cfg.depth).rev() {
        let c_up = b << (lvl + 1);
        let c_skip = b << lvl;
        conv_param_into(
            &mut set,
            &mut rng,
            &format!("dec{lvl}"),
            b << lvl,
            c_up + c_skip,
            None,
        );
    }
    conv_param_into(
        &mut set,
        &mut rng,
        "head",
        SSNET_OUT_CHANNELS,
        b,
        Some(FIELD_HEAD_INIT_SCALE),
    );
    set
}

/// Deterministic initialization of the segmentation network's parameters.
pub fn sssl_params(cfg: &SsSlConfig, seed: u64) -> ParameterSet {
    let mut rng = Rng::new(seed);
    let mut set = ParameterSet::new();
    let b = cfg.base_channels;
    conv_param_into(&mut set, &mut rng, "img.enc0", b, SSSL_IMAGE_IN_CHANNELS, None);
    conv_param_into(&mut set, &mut rng, "mot.enc0", b, SSSL_MOTION_IN_CHANNELS, None);
    for lvl in 1..=cfg.depth {
        let c_in = b << (lvl - 1);
        conv_param_into(&mut set, &mut rng, &format!("img.enc{lvl}"), c_in * 2, c_in, None);
        conv_param_into(&mut set, &mut rng, &format!("mot.enc{lvl}"), c_in * 2, c_in, None);
    }
    // Decoder consumes the fused (image ‖ motion) features of each level.
    let fused = |lvl: usize| 2 * (b << lvl);
    let mut c_prev = fused(cfg.depth);
    for lvl in (0..cfg.depth).rev() {
        conv_param_into(
            &mut set,
            &mut rng,
            &format!("dec{lvl}"),
            b << lvl,
            c_prev + fused(lvl),
            None,
        );
        c_prev = b << lvl;
    }
    conv_param_into(&mut set, &mut rng, "head", cfg.num_classes, b, None);
    set
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

fn conv_block<S: Scalar>(
    g: &mut Graph<S>,
    leaves: &NamedLeaves,
    name: &str,
    x: NodeId,
    stride: usize,
    activate: bool,
) -> Result<NodeId> {
    let w = leaves.id(&format!("{name}.w"))?;
    let b = leaves.id(&format!("{name}.b"))?;
    let y = g.conv3d(x, w, b, stride, 1)?;
    Ok(if activate {
        g.leaky_relu(y, ACTIVATION_SLOPE)
    } else {
        y
    })
}

/// Deformation estimator forward: two stacked single-channel volumes to a
/// 3-channel displacement field of the same extent. The same parameters are
/// evaluated twice per training step with swapped inputs to produce the
/// forward and backward fields.
pub fn ssnet_forward<S: Scalar>(
    g: &mut Graph<S>,
    leaves: &NamedLeaves,
    i_a: NodeId,
    i_b: NodeId,
    cfg: &SsNetConfig,
) -> Result<NodeId> {
    let (ca, da) = g
        .shape(i_a)
        .as_vol()
        .ok_or_else(|| Error::ShapeMismatch("ssnet input must be a volume".into()))?;
    let (cb, db) = g
        .shape(i_b)
        .as_vol()
        .ok_or_else(|| Error::ShapeMismatch("ssnet input must be a volume".into()))?;
    if ca != 1 || cb != 1 || da != db {
        return Err(Error::ShapeMismatch(format!(
            "ssnet expects two 1-channel volumes of equal extent, got {ca}x{da:?} and {cb}x{db:?}"
        )));
    }
    validate_depth(cfg.depth, da)?;

    let x = g.concat_channels(i_a, i_b)?;
    let mut skips = Vec::with_capacity(cfg.depth + 1);
    let mut x = conv_block(g, leaves, "enc0", x, 1, true)?;
    skips.push(x);
    for lvl in 1..=cfg.depth {
        x = conv_block(g, leaves, &format!("enc{lvl}"), x, 2, true)?;
        skips.push(x);
    }
    for lvl in (0..cfg.depth).rev() {
        let up = g.upsample_nearest2x(x)?;
        let cat = g.concat_channels(up, skips[lvl])?;
        x = conv_block(g, leaves, &format!("dec{lvl}"), cat, 1, true)?;
    }
    conv_block(g, leaves, "head", x, 1, false)
}

/// Segmentation forward: intensity + distance map through the image encoder,
/// the field through the motion encoder, per-level fused features into one
/// decoder, softmax head.
pub fn sssl_forward<S: Scalar>(
    g: &mut Graph<S>,
    leaves: &NamedLeaves,
    intensity: NodeId,
    dist_map: NodeId,
    field: NodeId,
    cfg: &SsSlConfig,
) -> Result<NodeId> {
    let (ci, di) = g
        .shape(intensity)
        .as_vol()
        .ok_or_else(|| Error::ShapeMismatch("sssl intensity must be a volume".into()))?;
    let (cm, dm) = g
        .shape(dist_map)
        .as_vol()
        .ok_or_else(|| Error::ShapeMismatch("sssl distance map must be a volume".into()))?;
    let (cf, df) = g
        .shape(field)
        .as_vol()
        .ok_or_else(|| Error::ShapeMismatch("sssl field must be a volume".into()))?;
    if ci != 1 || cm != 1 || cf != 3 || di != dm || di != df {
        return Err(Error::ShapeMismatch(format!(
            "sssl expects 1+1+3 channels of equal extent, got {ci}x{di:?}, {cm}x{dm:?}, {cf}x{df:?}"
        )));
    }
    validate_depth(cfg.depth, di)?;

    let img_in = g.concat_channels(intensity, dist_map)?;
    let mut img = conv_block(g, leaves, "img.enc0", img_in, 1, true)?;
    let mut mot = conv_block(g, leaves, "mot.enc0", field, 1, true)?;
    let mut fused = Vec::with_capacity(cfg.depth + 1);
    fused.push(g.concat_channels(img, mot)?);
    for lvl in 1..=cfg.depth {
        img = conv_block(g, leaves, &format!("img.enc{lvl}"), img, 2, true)?;
        mot = conv_block(g, leaves, &format!("mot.enc{lvl}"), mot, 2, true)?;
        fused.push(g.concat_channels(img, mot)?);
    }
    let mut x = fused[cfg.depth];
    for lvl in (0..cfg.depth).rev() {
        let up = g.upsample_nearest2x(x)?;
        let cat = g.concat_channels(up, fused[lvl])?;
        x = conv_block(g, leaves, &format!("dec{lvl}"), cat, 1, true)?;
    }
    let logits = conv_block(g, leaves, "head", x, 1, false)?;
    g.softmax_channels(logits)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    config: serde_json::Value,
    params: Vec<CheckpointParam>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

const CHECKPOINT_FORMAT: &str = "sscardiac-checkpoint-v1";

/// Write a checkpoint: a JSON manifest (named parameters plus an arbitrary
/// config blob) and a raw little-endian f32 buffer file. `path` names the
/// `.json` manifest; the buffers go to the sibling `.raw`.
pub fn save_checkpoint(
    params: &ParameterSet,
    config: serde_json::Value,
    path: &Path,
) -> Result<()> {
    let mut manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        config,
        params: Vec::with_capacity(params.len()),
    };
    let mut raw: Vec<u8> = Vec::with_capacity(params.total_values() * 4);
    for p in params.iter() {
        manifest.params.push(CheckpointParam {
            name: p.name.clone(),
            shape: p.shape.0.clone(),
            offset: raw.len(),
            len: p.values.len() * 4,
        });
        for v in &p.values {
            raw.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(path, json).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let rp = crate::volume::raw_path(path)?;
    fs::write(&rp, raw).map_err(|source| Error::Io {
        path: rp.clone(),
        source,
    })
}

/// Load a checkpoint written by [`save_checkpoint`]; returns the parameters
/// and the stored config blob.
pub fn load_checkpoint(path: &Path) -> Result<(ParameterSet, serde_json::Value)> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Invalid(format!(
            "unsupported checkpoint format {}",
            manifest.format
        )));
    }
    let rp = crate::volume::raw_path(path)?;
    let raw = fs::read(&rp).map_err(|source| Error::Io {
        path: rp.clone(),
        source,
    })?;
    let expected: usize = manifest.params.iter().map(|p| p.len).sum();
    if raw.len() != expected {
        return Err(Error::SizeMismatch {
            path: rp,
            expected,
            actual: raw.len(),
        });
    }
    let mut set = ParameterSet::new();
    for p in &manifest.params {
        let shape = Shape(p.shape.clone());
        if p.len != shape.count() * 4 {
            return Err(Error::CheckpointMismatch(format!(
                "parameter {}: {} bytes for shape {:?}",
                p.name, p.len, p.shape
            )));
        }
        let bytes = &raw[p.offset..p.offset + p.len];
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        set.push(&p.name, shape, values);
    }
    Ok((set, manifest.config))
}

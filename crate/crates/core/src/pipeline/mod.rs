//! End-to-end orchestration: unsupervised motion training, motion-guided
//! segmentation training, single- and bi-directional inference with fusion,
//! and the time-interval ablation harness.

mod ablate;
mod infer;
mod train;

pub use ablate::{run_all_interval_schemes, run_interval_ablation, AblationOutcome, AblationPlan, IntervalScheme};
pub use infer::{
    evaluate_study, fuse_probability_maps, infer_bidirectional, infer_single, motion_epe,
    predict_field, predicted_consistency, InferArm, MotionNet, SegNet, SegOutcome,
};
pub use train::{train_motion, train_segmentation, TrainOutcome};

use crate::error::{Error, Result};
use crate::network::{SsNetConfig, SsSlConfig};
use crate::volume::{
    clip_intensities, load_field, load_mask, load_volume, normalize, DeformationField, Dims,
    LabelMask, StudyManifest, VolumeGrid,
};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

/// Numeric precision of the training/inference graphs. Finite-difference
/// checks only make sense in `F64`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// How sequence endpoints find their missing neighbor: wrap around the cycle
/// (the cardiac cycle is periodic) or reuse the single available neighbor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EndpointMode {
    #[default]
    Cyclic,
    Mirror,
}

/// Temporal direction of a motion input: toward the chronological neighbor
/// (t−1) or the reverse-chronological one (t+1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Past,
    Future,
}

/// Neighbor index of phase `t` in a `t_count`-phase study.
pub fn neighbor_index(t: usize, t_count: usize, dir: Direction, mode: EndpointMode) -> usize {
    match mode {
        EndpointMode::Cyclic => match dir {
            Direction::Past => (t + t_count - 1) % t_count,
            Direction::Future => (t + 1) % t_count,
        },
        EndpointMode::Mirror => match dir {
            Direction::Past => {
                if t == 0 {
                    1.min(t_count - 1)
                } else {
                    t - 1
                }
            }
            Direction::Future => {
                if t + 1 >= t_count {
                    t_count.saturating_sub(2)
                } else {
                    t + 1
                }
            }
        },
    }
}

/// Everything one run needs, mirrored by the JSON config file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Study directories (containing `manifest.json`) or manifest paths.
    pub studies: Vec<String>,
    pub epochs_motion: usize,
    pub epochs_seg: usize,
    pub learning_rate: f64,
    /// Fixed at 1; present so configs state it explicitly.
    pub batch_size: usize,
    pub lambda_smooth: f64,
    pub lambda_consist: f64,
    pub seg_alpha: f64,
    pub patch_dims: [usize; 3],
    pub seed: u64,
    pub precision: Precision,
    pub ssnet: SsNetConfig,
    pub sssl: SsSlConfig,
    pub clip_top_fraction: f64,
    pub normalize_intensities: bool,
    pub dist_map_quantile: f64,
    pub endpoint_mode: EndpointMode,
    /// Diagnostic switch: train segmentation with zeroed motion inputs.
    pub inject_zero_motion: bool,
    /// Fraction of segmentation training steps that receive a composed
    /// multi-phase deformation (chain of 2-4 adjacent legs from the frozen
    /// motion network) instead of the single adjacent field. Matches the
    /// field-magnitude range the interval-ablation inference regime feeds the
    /// network. 0 disables the augmentation.
    pub seg_gap_augment: f64,
    /// Learning-rate multiplier reached (linearly) at the last epoch; 1.0
    /// keeps the rate constant.
    pub lr_final_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            studies: Vec::new(),
            epochs_motion: 200,
            epochs_seg: 100,
            learning_rate: 1e-4,
            batch_size: 1,
            lambda_smooth: 1.0,
            lambda_consist: 1.0,
            seg_alpha: 0.5,
            patch_dims: [48, 48, 48],
            seed: 0,
            precision: Precision::F32,
            ssnet: SsNetConfig::default(),
            sssl: SsSlConfig::default(),
            clip_top_fraction: 0.005,
            normalize_intensities: true,
            dist_map_quantile: 0.9,
            endpoint_mode: EndpointMode::Cyclic,
            inject_zero_motion: false,
            seg_gap_augment: 0.0,
            lr_final_factor: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size != 1 {
            return Err(Error::Invalid(format!(
                "batch size is fixed at 1, got {}",
                self.batch_size
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.seg_alpha) {
            return Err(Error::Invalid("seg_alpha must be in [0,1]".into()));
        }
        if !(0.0 < self.dist_map_quantile && self.dist_map_quantile < 1.0) {
            return Err(Error::Invalid("dist_map_quantile must be in (0,1)".into()));
        }
        if !(0.0..1.0).contains(&self.clip_top_fraction) {
            return Err(Error::Invalid("clip_top_fraction must be in [0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.seg_gap_augment) {
            return Err(Error::Invalid("seg_gap_augment must be in [0,1]".into()));
        }
        if !(0.01..=1.0).contains(&self.lr_final_factor) {
            return Err(Error::Invalid("lr_final_factor must be in [0.01, 1]".into()));
        }
        let depth = self.ssnet.depth.max(self.sssl.depth);
        let div = 1usize << depth;
        for (axis, &ext) in self.patch_dims.iter().enumerate() {
            if ext == 0 || ext % div != 0 {
                return Err(Error::Invalid(format!(
                    "patch extent {ext} on axis {axis} is not divisible by 2^depth = {div}"
                )));
            }
        }
        Ok(())
    }

    pub fn patch_dims_struct(&self) -> Dims {
        Dims::new(self.patch_dims[0], self.patch_dims[1], self.patch_dims[2])
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A study loaded into memory, with intensities preprocessed per config
/// (percentile clipping then min-max normalization) and any stored
/// ground-truth fields alongside.
pub struct Study {
    pub manifest: StudyManifest,
    pub dir: PathBuf,
    pub frames: Vec<VolumeGrid>,
    pub masks: Option<Vec<LabelMask>>,
    pub truth_fields: HashMap<(usize, usize), DeformationField>,
}

impl Study {
    pub fn time_points(&self) -> usize {
        self.frames.len()
    }

    pub fn dims(&self) -> Dims {
        self.frames[0].dims
    }

    pub fn study_id(&self) -> &str {
        &self.manifest.study_id
    }

    pub fn truth_field(&self, from: usize, to: usize) -> Option<&DeformationField> {
        self.truth_fields.get(&(from, to))
    }
}

/// Resolve a study path: either a `manifest.json` or a directory holding one.
pub fn resolve_manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    }
}

/// Load and preprocess one study.
pub fn load_study(path: &Path, cfg: &TrainConfig) -> Result<Study> {
    let manifest_path = resolve_manifest_path(path);
    let manifest = StudyManifest::load(&manifest_path)?;
    let dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut frames = Vec::with_capacity(manifest.volumes.len());
    for rel in &manifest.volumes {
        let mut v = load_volume(&dir.join(rel))?;
        if v.dims != Dims::new(manifest.dims[0], manifest.dims[1], manifest.dims[2]) {
            return Err(Error::Invalid(format!(
                "study {}: volume {rel} has dims {:?}, manifest says {:?}",
                manifest.study_id, v.dims, manifest.dims
            )));
        }
        if cfg.clip_top_fraction > 0.0 {
            v = clip_intensities(&v, cfg.clip_top_fraction)?;
        }
        if cfg.normalize_intensities {
            v = normalize(&v);
        }
        frames.push(v);
    }
    let masks = match &manifest.masks {
        Some(rels) => {
            let mut out = Vec::with_capacity(rels.len());
            for rel in rels {
                out.push(load_mask(&dir.join(rel))?);
            }
            Some(out)
        }
        None => None,
    };
    let mut truth_fields = HashMap::new();
    for fr in &manifest.fields {
        truth_fields.insert((fr.from, fr.to), load_field(&dir.join(&fr.path))?);
    }
    Ok(Study {
        manifest,
        dir,
        frames,
        masks,
        truth_fields,
    })
}

/// Load every study named by the config.
pub fn load_studies(cfg: &TrainConfig) -> Result<Vec<Study>> {
    if cfg.studies.is_empty() {
        return Err(Error::Invalid("no training studies configured".into()));
    }
    cfg.studies
        .iter()
        .map(|s| load_study(Path::new(s), cfg))
        .collect()
}

// ---------------------------------------------------------------------------
// Patch cropping
// ---------------------------------------------------------------------------

/// Crop a channel-major buffer to `patch` starting at `off`.
pub(crate) fn crop_channels<T: Copy>(
    src: &[T],
    channels: usize,
    d: Dims,
    off: [usize; 3],
    patch: Dims,
) -> Vec<T> {
    let n = d.voxel_count();
    let pn = patch.voxel_count();
    let mut out = Vec::with_capacity(channels * pn);
    for c in 0..channels {
        let ch = &src[c * n..(c + 1) * n];
        for z in 0..patch.nz {
            for y in 0..patch.ny {
                let row = (off[2] + z) * d.ny * d.nx + (off[1] + y) * d.nx + off[0];
                out.extend_from_slice(&ch[row..row + patch.nx]);
            }
        }
    }
    out
}

/// Random patch offset within `d`, deterministic from the rng state.
pub(crate) fn random_offset(rng: &mut crate::rng::Rng, d: Dims, patch: Dims) -> [usize; 3] {
    let pick = |ext: usize, p: usize, rng: &mut crate::rng::Rng| {
        if ext > p {
            rng.below(ext - p + 1)
        } else {
            0
        }
    };
    [
        pick(d.nx, patch.nx, rng),
        pick(d.ny, patch.ny, rng),
        pick(d.nz, patch.nz, rng),
    ]
}

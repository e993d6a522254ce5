//! Inference: field prediction, single-directional segmentation, and
//! bi-directional fusion, plus study-level evaluation helpers.

use super::{neighbor_index, Direction, Study, TrainConfig};
use crate::autodiff::{Graph, Shape};
use crate::error::{Error, Result};
use crate::metrics::{endpoint_error, per_phase_report,MetricRecord};
use crate::network::{
    load_checkpoint, ssnet_forward, ssnet_params, sssl_forward, sssl_params, ParameterSet,
    SsNetConfig, SsSlConfig,
};
use crate::transform::{consistency_residual, motion_distance_map};
use crate::volume::{DeformationField, LabelMask, ProbabilityMap, VolumeGrid};
use std::path::Path;

/// A loaded motion estimator.
pub struct MotionNet {
    pub params: ParameterSet,
    pub cfg: SsNetConfig,
}

/// A loaded segmentation network.
pub struct SegNet {
    pub params: ParameterSet,
    pub cfg: SsSlConfig,
}

fn train_config_from_blob(blob: &serde_json::Value, path: &Path) -> Result<TrainConfig> {
    serde_json::from_value(blob.get("train_config").cloned().unwrap_or_default()).map_err(|e| {
        Error::Json {
            path: path.to_path_buf(),
            message: format!("checkpoint config: {e}"),
        }
    })
}

impl MotionNet {
    /// Load a motion checkpoint, validating parameter names and shapes
    /// against the architecture recorded in its config.
    pub fn load(path: &Path) -> Result<(MotionNet, TrainConfig)> {
        let (params, blob) = load_checkpoint(path)?;
        let cfg = train_config_from_blob(&blob, path)?;
        let expected = ssnet_params(&cfg.ssnet, 0);
        expected.check_compatible(&params)?;
        Ok((
            MotionNet {
                params,
                cfg: cfg.ssnet,
            },
            cfg,
        ))
    }
}

impl SegNet {
    pub fn load(path: &Path) -> Result<(SegNet, TrainConfig)> {
        let (params, blob) = load_checkpoint(path)?;
        let cfg = train_config_from_blob(&blob, path)?;
        let expected = sssl_params(&cfg.sssl, 0);
        expected.check_compatible(&params)?;
        Ok((
            SegNet {
                params,
                cfg: cfg.sssl,
            },
            cfg,
        ))
    }
}

/// Predict the displacement field that warps `neighbor` onto `target`.
pub fn predict_field(
    net: &MotionNet,
    target: &VolumeGrid,
    neighbor: &VolumeGrid,
) -> Result<DeformationField> {
    let mut g = Graph::<f32>::new();
    let leaves = net.params.instantiate(&mut g);
    let a = g.leaf(Shape::vol(1, target.dims), target.data().to_vec(), false);
    let b = g.leaf(Shape::vol(1, neighbor.dims), neighbor.data().to_vec(), false);
    let phi = ssnet_forward(&mut g, &leaves, a, b, &net.cfg)?;
    DeformationField::new(target.dims, target.spacing, g.values(phi).to_vec())
}

/// Run the segmentation network on full-volume inputs.
fn seg_probs(
    net: &SegNet,
    intensity: &VolumeGrid,
    dist: &VolumeGrid,
    field: &DeformationField,
) -> Result<ProbabilityMap> {
    let mut g = Graph::<f32>::new();
    let leaves = net.params.instantiate(&mut g);
    let iv = g.leaf(Shape::vol(1, intensity.dims), intensity.data().to_vec(), false);
    let dv = g.leaf(Shape::vol(1, dist.dims), dist.data().to_vec(), false);
    let fv = g.leaf(Shape::vol(3, field.dims), field.data().to_vec(), false);
    let probs = sssl_forward(&mut g, &leaves, iv, dv, fv, &net.cfg)?;
    ProbabilityMap::new(
        intensity.dims,
        intensity.spacing,
        net.cfg.num_classes,
        g.values(probs).to_vec(),
    )
}

/// Per-voxel class probabilities plus the derived label mask.
pub struct SegOutcome {
    pub phase: usize,
    pub fused: ProbabilityMap,
    pub mask: LabelMask,
    pub directional: Vec<ProbabilityMap>,
}

/// Which motion inputs feed the segmentation network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferArm {
    /// Zero field and zero distance map: the no-motion baseline.
    Baseline,
    /// One directional motion input, no fusion.
    Single(Direction),
    /// Both directions, fused by the per-voxel mean of probabilities.
    Bidirectional,
}

fn directional_probs(
    motion: &MotionNet,
    seg: &SegNet,
    study: &Study,
    t: usize,
    dir: Direction,
    cfg: &TrainConfig,
) -> Result<ProbabilityMap> {
    let tn = study.time_points();
    let frame = &study.frames[t];
    let u = neighbor_index(t, tn, dir, cfg.endpoint_mode);
    let field = predict_field(motion, frame, &study.frames[u])?;
    let dist = motion_distance_map(&field, cfg.dist_map_quantile)?;
    seg_probs(seg, frame, &dist, &field)
}

fn zero_motion_probs(
    seg: &SegNet,
    study: &Study,
    t: usize,
) -> Result<ProbabilityMap> {
    let frame = &study.frames[t];
    let field = DeformationField::zeros(frame.dims, frame.spacing);
    let dist = VolumeGrid::zeros(frame.dims, frame.spacing);
    seg_probs(seg, frame, &dist, &field)
}

/// One directional prediction, no fusion.
pub fn infer_single(
    motion: &MotionNet,
    seg: &SegNet,
    study: &Study,
    t: usize,
    dir: Direction,
    cfg: &TrainConfig,
) -> Result<SegOutcome> {
    check_phase(study, t)?;
    let probs = directional_probs(motion, seg, study, t, dir, cfg)?;
    Ok(SegOutcome {
        phase: t,
        mask: probs.argmax_mask(),
        fused: probs.clone(),
        directional: vec![probs],
    })
}

/// Bi-directional inference: one prediction toward the chronological neighbor
/// and one toward the reverse-chronological neighbor, fused by the per-voxel
/// arithmetic mean of probabilities; the final mask is the per-voxel argmax
/// with ties resolved to background. Neighbors wrap cyclically (or mirror,
/// per config).
pub fn infer_bidirectional(
    motion: &MotionNet,
    seg: &SegNet,
    study: &Study,
    t: usize,
    cfg: &TrainConfig,
) -> Result<SegOutcome> {
    check_phase(study, t)?;
    let past = directional_probs(motion, seg, study, t, Direction::Past, cfg)?;
    let future = directional_probs(motion, seg, study, t, Direction::Future, cfg)?;
    let fused = fuse_probability_maps(&past, &future)?;
    Ok(SegOutcome {
        phase: t,
        mask: fused.argmax_mask(),
        fused,
        directional: vec![past, future],
    })
}

/// Per-voxel arithmetic mean of two probability maps.
pub fn fuse_probability_maps(a: &ProbabilityMap, b: &ProbabilityMap) -> Result<ProbabilityMap> {
    if a.dims != b.dims || a.num_classes != b.num_classes {
        return Err(Error::ShapeMismatch(
            "probability maps to fuse have different shapes".into(),
        ));
    }
    let data: Vec<f32> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| 0.5 * (x + y))
        .collect();
    ProbabilityMap::new(a.dims, a.spacing, a.num_classes, data)
}

fn check_phase(study: &Study, t: usize) -> Result<()> {
    if t >= study.time_points() {
        return Err(Error::Invalid(format!(
            "phase {t} out of range for study {} with {} time points",
            study.study_id(),
            study.time_points()
        )));
    }
    Ok(())
}

/// Segment every phase of a study with the chosen arm and score against its
/// ground-truth masks.
pub fn evaluate_study(
    motion: &MotionNet,
    seg: &SegNet,
    study: &Study,
    cfg: &TrainConfig,
    arm: InferArm,
) -> Result<Vec<MetricRecord>> {
    let truths = study
        .masks
        .as_ref()
        .ok_or_else(|| Error::Invalid(format!("study {} has no masks", study.study_id())))?;
    let mut predictions = Vec::with_capacity(study.time_points());
    for t in 0..study.time_points() {
        let outcome = match arm {
            InferArm::Baseline => {
                let probs = zero_motion_probs(seg, study, t)?;
                SegOutcome {
                    phase: t,
                    mask: probs.argmax_mask(),
                    fused: probs.clone(),
                    directional: vec![probs],
                }
            }
            InferArm::Single(dir) => infer_single(motion, seg, study, t, dir, cfg)?,
            InferArm::Bidirectional => infer_bidirectional(motion, seg, study, t, cfg)?,
        };
        predictions.push(outcome.mask);
    }
    per_phase_report(study.study_id(), &predictions, truths)
}

/// Mean end-point error of predicted fields against every stored ground-truth
/// field of the study (adjacent pairs, both directions), in voxels.
pub fn motion_epe(motion: &MotionNet, study: &Study) -> Result<f64> {
    if study.truth_fields.is_empty() {
        return Err(Error::Invalid(format!(
            "study {} carries no ground-truth fields",
            study.study_id()
        )));
    }
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for (&(from, to), truth) in &study.truth_fields {
        let predicted = predict_field(motion, &study.frames[to], &study.frames[from])?;
        acc += endpoint_error(&predicted, truth)?;
        count += 1;
    }
    Ok(acc / count as f64)
}

/// Mean inverse-consistency residual of predicted forward/backward pairs over
/// all adjacent phase pairs, in voxels.
pub fn predicted_consistency(motion: &MotionNet, study: &Study, cfg: &TrainConfig) -> Result<f64> {
    let tn = study.time_points();
    let cyclic = matches!(cfg.endpoint_mode, super::EndpointMode::Cyclic);
    let last = if cyclic { tn } else { tn - 1 };
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for t in 0..last {
        let next = (t + 1) % tn;
        let fwd = predict_field(motion, &study.frames[t], &study.frames[next])?;
        let bwd = predict_field(motion, &study.frames[next], &study.frames[t])?;
        acc += consistency_residual(&fwd, &bwd)?;
        count += 1;
    }
    Ok(acc / count as f64)
}

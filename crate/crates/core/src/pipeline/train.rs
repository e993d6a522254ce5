//! Training loops: unsupervised motion estimation over adjacent phase pairs,
//! then supervised segmentation with the motion network frozen.

use super::{
    crop_channels, neighbor_index, random_offset, Direction, Precision, Study, TrainConfig,
};
use crate::autodiff::{AdamState, Graph, Scalar, Shape};
use crate::error::{Error, Result};
use crate::network::{
    save_checkpoint, ssnet_forward, ssnet_params, sssl_forward, sssl_params, ParameterSet,
};
use crate::objectives::{motion_loss, MotionLossWeights};
use crate::rng::Rng;
use crate::transform::{chain_fields, motion_distance_map};
use crate::volume::{DeformationField, Dims, VolumeGrid};
use std::path::{Path, PathBuf};

/// Result of one training run. The checkpoint on disk holds the best-by-loss
/// parameters; `params` are the same buffers in memory.
pub struct TrainOutcome {
    pub params: ParameterSet,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub checkpoint: PathBuf,
}

fn write_loss_log(path: &Path, losses: &[f64]) -> Result<()> {
    let mut csv = String::from("epoch,mean_loss\n");
    for (e, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{e},{l}\n"));
    }
    std::fs::write(path, csv).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Linear learning-rate schedule from `lr` to `lr·final_factor`.
fn lr_at(cfg: &TrainConfig, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return cfg.learning_rate;
    }
    let t = epoch as f64 / (epochs - 1) as f64;
    cfg.learning_rate * (1.0 + (cfg.lr_final_factor - 1.0) * t)
}

fn checkpoint_blob(kind: &str, cfg: &TrainConfig) -> serde_json::Value {
    serde_json::json!({ "network": kind, "train_config": cfg })
}

fn cast_values<S: Scalar>(data: &[f32]) -> Vec<S> {
    data.iter().map(|&v| S::from_f32(v)).collect()
}

/// Adjacent training pairs of a study: (t, t+1) for all t, closing the cycle
/// when the endpoint mode is cyclic.
fn adjacent_pairs(t_count: usize, cyclic: bool) -> Vec<(usize, usize)> {
    let last = if cyclic { t_count } else { t_count - 1 };
    (0..last).map(|t| (t, (t + 1) % t_count)).collect()
}

fn check_patch_fits(studies: &[Study], patch: Dims) -> Result<()> {
    for s in studies {
        let d = s.dims();
        if patch.nx > d.nx || patch.ny > d.ny || patch.nz > d.nz {
            return Err(Error::Invalid(format!(
                "patch {patch:?} exceeds study {} dims {d:?}",
                s.study_id()
            )));
        }
    }
    Ok(())
}

/// Train the motion estimator on all adjacent phase pairs (both directions
/// per step via the symmetrized loss). Writes `motion.ckpt.json` (best epoch
/// by mean loss) and `motion_loss.csv` under `out_dir`. A non-finite loss
/// aborts with the last good checkpoint on disk.
pub fn train_motion(cfg: &TrainConfig, studies: &[Study], out_dir: &Path) -> Result<TrainOutcome> {
    match cfg.precision {
        Precision::F32 => train_motion_typed::<f32>(cfg, studies, out_dir),
        Precision::F64 => train_motion_typed::<f64>(cfg, studies, out_dir),
    }
}

fn train_motion_typed<S: Scalar>(
    cfg: &TrainConfig,
    studies: &[Study],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let patch = cfg.patch_dims_struct();
    check_patch_fits(studies, patch)?;
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let weights = MotionLossWeights::new(cfg.lambda_smooth, cfg.lambda_consist)?;
    let cyclic = matches!(cfg.endpoint_mode, super::EndpointMode::Cyclic);

    let mut params = ssnet_params(&cfg.ssnet, cfg.seed);
    let mut adam = AdamState::new(cfg.learning_rate, &params.sizes());
    let mut rng = Rng::new(cfg.seed ^ 0x6d6f_7469_6f6e);
    let ckpt_path = out_dir.join("motion.ckpt.json");
    let log_path = out_dir.join("motion_loss.csv");

    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = params.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs_motion);

    for epoch in 0..cfg.epochs_motion {
        adam.lr = lr_at(cfg, epoch, cfg.epochs_motion);
        let mut sum = 0.0f64;
        let mut steps = 0usize;
        for study in studies {
            for (t, next) in adjacent_pairs(study.time_points(), cyclic) {
                let off = random_offset(&mut rng, study.dims(), patch);
                let i_t = crop_channels(study.frames[t].data(), 1, study.dims(), off, patch);
                let i_adj = crop_channels(study.frames[next].data(), 1, study.dims(), off, patch);

                let mut g = Graph::<S>::new();
                let leaves = params.instantiate(&mut g);
                let a = g.leaf(Shape::vol(1, patch), cast_values::<S>(&i_t), false);
                let b = g.leaf(Shape::vol(1, patch), cast_values::<S>(&i_adj), false);
                let phi_fwd = ssnet_forward(&mut g, &leaves, a, b, &cfg.ssnet)?;
                let phi_bwd = ssnet_forward(&mut g, &leaves, b, a, &cfg.ssnet)?;
                let loss = motion_loss(&mut g, a, b, phi_fwd, phi_bwd, weights)?;
                let value = g.values(loss)[0].to_f64();
                if !value.is_finite() {
                    save_checkpoint(&best_params, checkpoint_blob("motion", cfg), &ckpt_path)?;
                    write_loss_log(&log_path, &epoch_losses)?;
                    return Err(Error::TrainingDiverged { epoch, step: steps });
                }
                g.backward(loss)?;
                let grads = params.collect_grads(&g, &leaves);
                let grad_refs: Vec<&[f32]> = grads.iter().map(|v| v.as_slice()).collect();
                adam.step(&mut params.buffers_mut(), &grad_refs);
                sum += value;
                steps += 1;
            }
        }
        let mean = if steps > 0 { sum / steps as f64 } else { 0.0 };
        epoch_losses.push(mean);
        if mean < best_loss {
            best_loss = mean;
            best_epoch = epoch;
            best_params = params.clone();
        }
    }
    if cfg.epochs_motion == 0 {
        // Zero epochs: the checkpoint is the initialization.
        best_params = params.clone();
        best_loss = f64::NAN;
    }
    save_checkpoint(&best_params, checkpoint_blob("motion", cfg), &ckpt_path)?;
    write_loss_log(&log_path, &epoch_losses)?;
    Ok(TrainOutcome {
        params: best_params,
        best_epoch,
        best_loss,
        epoch_losses,
        checkpoint: ckpt_path,
    })
}

/// Motion inputs cached per (study, phase, direction): the segmentation
/// trainer freezes the motion network, so its fields and distance maps are
/// fixed and computed once up front.
pub(crate) struct MotionCache {
    /// [study][phase][direction as index]
    fields: Vec<Vec<[DeformationField; 2]>>,
    maps: Vec<Vec<[VolumeGrid; 2]>>,
}

impl MotionCache {
    pub(crate) fn build(
        motion: &super::MotionNet,
        studies: &[Study],
        cfg: &TrainConfig,
    ) -> Result<MotionCache> {
        let mut fields = Vec::with_capacity(studies.len());
        let mut maps = Vec::with_capacity(studies.len());
        for study in studies {
            let tn = study.time_points();
            let mut sf = Vec::with_capacity(tn);
            let mut sm = Vec::with_capacity(tn);
            for t in 0..tn {
                let mut per_dir_f = Vec::with_capacity(2);
                let mut per_dir_m = Vec::with_capacity(2);
                for dir in [Direction::Past, Direction::Future] {
                    let (field, map) = if cfg.inject_zero_motion {
                        let zero = DeformationField::zeros(study.dims(), study.frames[0].spacing);
                        let map = VolumeGrid::zeros(study.dims(), study.frames[0].spacing);
                        (zero, map)
                    } else {
                        let u = neighbor_index(t, tn, dir, cfg.endpoint_mode);
                        let field = super::predict_field(
                            motion,
                            &study.frames[t],
                            &study.frames[u],
                        )?;
                        let map = motion_distance_map(&field, cfg.dist_map_quantile)?;
                        (field, map)
                    };
                    per_dir_f.push(field);
                    per_dir_m.push(map);
                }
                sf.push([per_dir_f.remove(0), per_dir_f.remove(0)]);
                sm.push([per_dir_m.remove(0), per_dir_m.remove(0)]);
            }
            fields.push(sf);
            maps.push(sm);
        }
        Ok(MotionCache { fields, maps })
    }

    pub(crate) fn field(&self, study: usize, t: usize, dir: Direction) -> &DeformationField {
        &self.fields[study][t][dir_index(dir)]
    }

    pub(crate) fn map(&self, study: usize, t: usize, dir: Direction) -> &VolumeGrid {
        &self.maps[study][t][dir_index(dir)]
    }
}

/// Composed multi-leg field reaching phase `t` from `gap` phases away in
/// direction `dir`, built from the cached adjacent legs.
fn composed_gap_field(
    cache: &MotionCache,
    si: usize,
    t: usize,
    dir: Direction,
    gap: usize,
    t_count: usize,
) -> Result<DeformationField> {
    let mut legs = Vec::with_capacity(gap);
    match dir {
        Direction::Past => {
            for s in (0..gap).rev() {
                let k_next = (t + t_count - s) % t_count;
                legs.push(cache.field(si, k_next, Direction::Past).clone());
            }
        }
        Direction::Future => {
            for s in (0..gap).rev() {
                let k_minus_1 = (t + s) % t_count;
                legs.push(cache.field(si, k_minus_1, Direction::Future).clone());
            }
        }
    }
    chain_fields(&legs)
}

fn dir_index(dir: Direction) -> usize {
    match dir {
        Direction::Past => 0,
        Direction::Future => 1,
    }
}

/// Train the segmentation network on top of a frozen motion checkpoint.
/// Direction alternates per step (even steps use the chronological neighbor)
/// so the network sees both motion polarities. Writes `seg.ckpt.json` and
/// `seg_loss.csv` under `out_dir`.
pub fn train_segmentation(
    cfg: &TrainConfig,
    motion: &super::MotionNet,
    studies: &[Study],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    match cfg.precision {
        Precision::F32 => train_segmentation_typed::<f32>(cfg, motion, studies, out_dir),
        Precision::F64 => train_segmentation_typed::<f64>(cfg, motion, studies, out_dir),
    }
}

fn train_segmentation_typed<S: Scalar>(
    cfg: &TrainConfig,
    motion: &super::MotionNet,
    studies: &[Study],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let patch = cfg.patch_dims_struct();
    check_patch_fits(studies, patch)?;
    for s in studies {
        if s.masks.is_none() {
            return Err(Error::Invalid(format!(
                "study {} has no masks; segmentation training needs ground truth",
                s.study_id()
            )));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;

    // The motion network is frozen: all its outputs are precomputed, and its
    // parameters never enter the segmentation graphs.
    let frozen_hash = motion.params.content_hash();
    let cache = MotionCache::build(motion, studies, cfg)?;

    let mut params = sssl_params(&cfg.sssl, cfg.seed ^ 0x7365_676d_656e_74);
    let mut adam = AdamState::new(cfg.learning_rate, &params.sizes());
    let mut rng = Rng::new(cfg.seed ^ 0x7365_67);
    let ckpt_path = out_dir.join("seg.ckpt.json");
    let log_path = out_dir.join("seg_loss.csv");

    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = params.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs_seg);
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs_seg {
        adam.lr = lr_at(cfg, epoch, cfg.epochs_seg);
        let mut sum = 0.0f64;
        let mut steps = 0usize;
        for (si, study) in studies.iter().enumerate() {
            let masks = study.masks.as_ref().expect("checked above");
            for t in 0..study.time_points() {
                // Alternate per step, flipped every epoch so each phase sees
                // both motion polarities even when the step count per epoch
                // is even.
                let dir = if (global_step + epoch) % 2 == 0 {
                    Direction::Past
                } else {
                    Direction::Future
                };
                global_step += 1;
                let off = random_offset(&mut rng, study.dims(), patch);
                let d = study.dims();
                let intensity = crop_channels(study.frames[t].data(), 1, d, off, patch);
                let tn = study.time_points();
                let augment = !cfg.inject_zero_motion
                    && cfg.seg_gap_augment > 0.0
                    && tn > 2
                    && rng.next_f64() < cfg.seg_gap_augment;
                let (field, dist) = if augment {
                    let max_gap = 4.min(tn - 1);
                    let gap = 2 + rng.below(max_gap.saturating_sub(1).max(1));
                    let composed = composed_gap_field(&cache, si, t, dir, gap.min(max_gap), tn)?;
                    let dist_full = motion_distance_map(&composed, cfg.dist_map_quantile)?;
                    (
                        crop_channels(composed.data(), 3, d, off, patch),
                        crop_channels(dist_full.data(), 1, d, off, patch),
                    )
                } else {
                    (
                        crop_channels(cache.field(si, t, dir).data(), 3, d, off, patch),
                        crop_channels(cache.map(si, t, dir).data(), 1, d, off, patch),
                    )
                };
                let labels = crop_channels(masks[t].data(), 1, d, off, patch);

                let mut g = Graph::<S>::new();
                let leaves = params.instantiate(&mut g);
                let iv = g.leaf(Shape::vol(1, patch), cast_values::<S>(&intensity), false);
                let dv = g.leaf(Shape::vol(1, patch), cast_values::<S>(&dist), false);
                let fv = g.leaf(Shape::vol(3, patch), cast_values::<S>(&field), false);
                let probs = sssl_forward(&mut g, &leaves, iv, dv, fv, &cfg.sssl)?;
                let loss =
                    g.segmentation_loss(probs, &labels, cfg.sssl.num_classes, cfg.seg_alpha)?;
                let value = g.values(loss)[0].to_f64();
                if !value.is_finite() {
                    save_checkpoint(&best_params, checkpoint_blob("segmentation", cfg), &ckpt_path)?;
                    write_loss_log(&log_path, &epoch_losses)?;
                    return Err(Error::TrainingDiverged { epoch, step: steps });
                }
                g.backward(loss)?;
                let grads = params.collect_grads(&g, &leaves);
                let grad_refs: Vec<&[f32]> = grads.iter().map(|v| v.as_slice()).collect();
                adam.step(&mut params.buffers_mut(), &grad_refs);
                sum += value;
                steps += 1;
            }
        }
        let mean = if steps > 0 { sum / steps as f64 } else { 0.0 };
        epoch_losses.push(mean);
        if mean < best_loss {
            best_loss = mean;
            best_epoch = epoch;
            best_params = params.clone();
        }
    }
    if cfg.epochs_seg == 0 {
        best_params = params.clone();
        best_loss = f64::NAN;
    }
    debug_assert_eq!(frozen_hash, motion.params.content_hash());
    save_checkpoint(&best_params, checkpoint_blob("segmentation", cfg), &ckpt_path)?;
    write_loss_log(&log_path, &epoch_losses)?;
    Ok(TrainOutcome {
        params: best_params,
        best_epoch,
        best_loss,
        epoch_losses,
        checkpoint: ckpt_path,
    })
}

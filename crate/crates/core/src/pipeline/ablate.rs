//! Time-interval ablation: how segmentation quality at ED and ES depends on
//! the temporal granularity of the deformation reaching them.
//!
//! The schemes span the same ED↔ES window with progressively finer chains:
//! D0 uses no deformation, D1 one direct ED↔ES field, D3 two legs through
//! the mid phase, D5 all four adjacent legs. Chains are composed with the
//! field algebra and fed to the segmentation network exactly like any other
//! motion input.

use super::infer::{MotionNet, SegNet};
use super::{Study, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{dice, jaccard, MetricRecord};
use crate::transform::{chain_fields, motion_distance_map};
use crate::volume::{DeformationField, LabelMask, ProbabilityMap, VolumeGrid};

/// ED and ES phase indices used by the ablation (the contraction window of a
/// 10-phase cycle).
pub const ABLATION_ED: usize = 1;
pub const ABLATION_ES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IntervalScheme {
    D0,
    D1,
    D3,
    D5,
}

impl IntervalScheme {
    pub fn all() -> [IntervalScheme; 4] {
        [
            IntervalScheme::D0,
            IntervalScheme::D1,
            IntervalScheme::D3,
            IntervalScheme::D5,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            IntervalScheme::D0 => "D0",
            IntervalScheme::D1 => "D1",
            IntervalScheme::D3 => "D3",
            IntervalScheme::D5 => "D5",
        }
    }

    /// Chronological phase pairs whose deformations are chained, ED side
    /// first. Empty for D0 (no deformation).
    pub fn pairs(&self) -> &'static [(usize, usize)] {
        match self {
            IntervalScheme::D0 => &[],
            IntervalScheme::D1 => &[(1, 5)],
            IntervalScheme::D3 => &[(1, 3), (3, 5)],
            IntervalScheme::D5 => &[(1, 2), (2, 3), (3, 4), (4, 5)],
        }
    }
}

/// One scheme to run.
#[derive(Clone, Copy, Debug)]
pub struct AblationPlan {
    pub scheme: IntervalScheme,
}

impl AblationPlan {
    pub fn new(scheme: IntervalScheme) -> AblationPlan {
        AblationPlan { scheme }
    }

    /// Phases the plan touches; the study must contain them all.
    pub fn max_phase(&self) -> usize {
        ABLATION_ES
    }
}

/// Results of one scheme on one study.
pub struct AblationOutcome {
    pub scheme: IntervalScheme,
    pub dice_ed: f64,
    pub dice_es: f64,
    pub records: Vec<MetricRecord>,
    /// The analytic chain toward ES composed from the study's stored
    /// ground-truth adjacent legs, when every leg is available. Lets callers
    /// check the chain composition against a direct analytic field.
    pub composed_truth_to_es: Option<DeformationField>,
}

/// Predicted field warping phase `a` onto phase `b` (target `b`).
fn predicted_leg(motion: &MotionNet, study: &Study, a: usize, b: usize) -> Result<DeformationField> {
    super::predict_field(motion, &study.frames[b], &study.frames[a])
}

fn segment_with(
    seg: &SegNet,
    frame: &VolumeGrid,
    field: &DeformationField,
    cfg: &TrainConfig,
) -> Result<(LabelMask, ProbabilityMap)> {
    let dist = motion_distance_map(field, cfg.dist_map_quantile)?;
    let mut g = crate::autodiff::Graph::<f32>::new();
    let leaves = seg.params.instantiate(&mut g);
    let iv = g.leaf(
        crate::autodiff::Shape::vol(1, frame.dims),
        frame.data().to_vec(),
        false,
    );
    let dv = g.leaf(
        crate::autodiff::Shape::vol(1, dist.dims),
        dist.data().to_vec(),
        false,
    );
    let fv = g.leaf(
        crate::autodiff::Shape::vol(3, field.dims),
        field.data().to_vec(),
        false,
    );
    let probs = crate::network::sssl_forward(&mut g, &leaves, iv, dv, fv, &seg.cfg)?;
    let map = ProbabilityMap::new(
        frame.dims,
        frame.spacing,
        seg.cfg.num_classes,
        g.values(probs).to_vec(),
    )?;
    Ok((map.argmax_mask(), map))
}

/// Run one interval scheme on a study: derive the deformation reaching ED and
/// ES through the scheme's chain, segment both phases, and report Dice per
/// phase.
pub fn run_interval_ablation(
    plan: &AblationPlan,
    motion: &MotionNet,
    seg: &SegNet,
    study: &Study,
    cfg: &TrainConfig,
) -> Result<AblationOutcome> {
    if study.time_points() <= plan.max_phase() {
        return Err(Error::Invalid(format!(
            "interval ablation needs phases up to {}, study {} has {} time points",
            plan.max_phase(),
            study.study_id(),
            study.time_points()
        )));
    }
    let truths = study
        .masks
        .as_ref()
        .ok_or_else(|| Error::Invalid("interval ablation needs ground-truth masks".into()))?;
    let d = study.dims();
    let spacing = study.frames[0].spacing;
    let pairs = plan.scheme.pairs();

    // Field reaching ES (warps the ED-side anatomy onto ES) and its mirror
    // for ED.
    let (field_to_es, field_to_ed) = if pairs.is_empty() {
        (
            DeformationField::zeros(d, spacing),
            DeformationField::zeros(d, spacing),
        )
    } else {
        let legs_es: Vec<DeformationField> = pairs
            .iter()
            .map(|&(a, b)| predicted_leg(motion, study, a, b))
            .collect::<Result<_>>()?;
        let legs_ed: Vec<DeformationField> = pairs
            .iter()
            .rev()
            .map(|&(a, b)| predicted_leg(motion, study, b, a))
            .collect::<Result<_>>()?;
        (chain_fields(&legs_es)?, chain_fields(&legs_ed)?)
    };

    let (mask_ed, _) = segment_with(seg, &study.frames[ABLATION_ED], &field_to_ed, cfg)?;
    let (mask_es, _) = segment_with(seg, &study.frames[ABLATION_ES], &field_to_es, cfg)?;

    let dice_ed = dice(&mask_ed, &truths[ABLATION_ED], 1)?;
    let dice_es = dice(&mask_es, &truths[ABLATION_ES], 1)?;
    let records = vec![
        MetricRecord {
            study_id: format!("{}:{}", study.study_id(), plan.scheme.name()),
            time_index: ABLATION_ED,
            class_id: 1,
            dice: dice_ed,
            jaccard: jaccard(&mask_ed, &truths[ABLATION_ED], 1)?,
            hausdorff_mm: crate::metrics::hausdorff(&mask_ed, &truths[ABLATION_ED], 1).ok(),
            epe_voxels: None,
        },
        MetricRecord {
            study_id: format!("{}:{}", study.study_id(), plan.scheme.name()),
            time_index: ABLATION_ES,
            class_id: 1,
            dice: dice_es,
            jaccard: jaccard(&mask_es, &truths[ABLATION_ES], 1)?,
            hausdorff_mm: crate::metrics::hausdorff(&mask_es, &truths[ABLATION_ES], 1).ok(),
            epe_voxels: None,
        },
    ];

    // Compose the stored analytic legs the same way, when the study has them.
    let composed_truth_to_es = if pairs.is_empty() {
        None
    } else {
        let legs: Option<Vec<DeformationField>> = pairs
            .iter()
            .map(|&(a, b)| study.truth_field(a, b).cloned())
            .collect();
        match legs {
            Some(legs) => Some(chain_fields(&legs)?),
            None => None,
        }
    };

    Ok(AblationOutcome {
        scheme: plan.scheme,
        dice_ed,
        dice_es,
        records,
        composed_truth_to_es,
    })
}

/// All four schemes in order, on one study.
pub fn run_all_interval_schemes(
    motion: &MotionNet,
    seg: &SegNet,
    study: &Study,
    cfg: &TrainConfig,
) -> Result<Vec<AblationOutcome>> {
    IntervalScheme::all()
        .into_iter()
        .map(|scheme| run_interval_ablation(&AblationPlan::new(scheme), motion, seg, study, cfg))
        .collect()
}

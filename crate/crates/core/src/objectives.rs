//! Loss terms: the photometric motion loss with its smoothness and
//! inverse-consistency regularizers, and the supervised segmentation loss.
//!
//! All losses are scalar graph nodes, differentiable through every term.

use crate::autodiff::{Graph, NodeId, Scalar};
use crate::error::{Error, Result};
use crate::volume::LabelMask;

/// Weights of the smoothness and consistency terms in [`motion_loss`].
/// The defaults (1, 1) add both terms unweighted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionLossWeights {
    pub lambda_smooth: f64,
    pub lambda_consist: f64,
}

impl Default for MotionLossWeights {
    fn default() -> Self {
        MotionLossWeights {
            lambda_smooth: 1.0,
            lambda_consist: 1.0,
        }
    }
}

impl MotionLossWeights {
    pub fn new(lambda_smooth: f64, lambda_consist: f64) -> Result<Self> {
        if lambda_smooth < 0.0 || lambda_consist < 0.0 {
            return Err(Error::Invalid(format!(
                "loss weights must be nonnegative, got ({lambda_smooth}, {lambda_consist})"
            )));
        }
        Ok(MotionLossWeights {
            lambda_smooth,
            lambda_consist,
        })
    }
}

/// Blend between soft-Dice and cross-entropy for the segmentation loss:
/// `alpha·(1 − Dice) + (1 − alpha)·CE`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegLossConfig {
    pub alpha: f64,
}

impl Default for SegLossConfig {
    fn default() -> Self {
        SegLossConfig { alpha: 0.5 }
    }
}

impl SegLossConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Invalid(format!("alpha must be in [0,1], got {alpha}")));
        }
        Ok(SegLossConfig { alpha })
    }
}

/// Mean absolute forward-difference of the field's spatial derivatives, the
/// smoothness regularizer. Thin wrapper over the fused graph reduction.
pub fn smoothness_psi<S: Scalar>(g: &mut Graph<S>, field: NodeId) -> Result<NodeId> {
    g.smoothness_psi(field)
}

/// Inverse-consistency term: the forward field warped by itself should cancel
/// the backward field. Evaluates both orderings and averages:
/// `0.5·mean|T(φf|φf) + φb| + 0.5·mean|T(φb|φb) + φf|`.
pub fn consistency_sigma<S: Scalar>(
    g: &mut Graph<S>,
    phi_fwd: NodeId,
    phi_bwd: NodeId,
) -> Result<NodeId> {
    if g.shape(phi_fwd) != g.shape(phi_bwd) {
        return Err(Error::ShapeMismatch(format!(
            "consistency fields differ: {:?} vs {:?}",
            g.shape(phi_fwd),
            g.shape(phi_bwd)
        )));
    }
    let zeros = g.zeros_leaf(g.shape(phi_fwd).clone());
    let wf = g.warp(phi_fwd, phi_fwd)?;
    let sf = g.add(wf, phi_bwd)?;
    let tf = g.l1_mean(sf, zeros)?;
    let wb = g.warp(phi_bwd, phi_bwd)?;
    let sb = g.add(wb, phi_fwd)?;
    let tb = g.l1_mean(sb, zeros)?;
    g.scalar_comb(&[(tf, 0.5), (tb, 0.5)])
}

/// The unsupervised motion objective for one adjacent pair, symmetrized over
/// both directions:
///
/// `mean|T(I_adj|φf) − I_t| + mean|T(I_t|φb) − I_adj|
///  + λ_smooth·(ψ(φf) + ψ(φb))/2 + λ_consist·σ(φf, φb)`
pub fn motion_loss<S: Scalar>(
    g: &mut Graph<S>,
    i_t: NodeId,
    i_adj: NodeId,
    phi_fwd: NodeId,
    phi_bwd: NodeId,
    w: MotionLossWeights,
) -> Result<NodeId> {
    let warped_adj = g.warp(i_adj, phi_fwd)?;
    let photo_f = g.l1_mean(warped_adj, i_t)?;
    let warped_t = g.warp(i_t, phi_bwd)?;
    let photo_b = g.l1_mean(warped_t, i_adj)?;
    let psi_f = g.smoothness_psi(phi_fwd)?;
    let psi_b = g.smoothness_psi(phi_bwd)?;
    let sigma = consistency_sigma(g, phi_fwd, phi_bwd)?;
    g.scalar_comb(&[
        (photo_f, 1.0),
        (photo_b, 1.0),
        (psi_f, 0.5 * w.lambda_smooth),
        (psi_b, 0.5 * w.lambda_smooth),
        (sigma, w.lambda_consist),
    ])
}

/// Supervised segmentation loss against a label mask; see
/// [`Graph::segmentation_loss`] for the exact form.
pub fn segmentation_loss<S: Scalar>(
    g: &mut Graph<S>,
    probs: NodeId,
    truth: &LabelMask,
    cfg: SegLossConfig,
) -> Result<NodeId> {
    g.segmentation_loss(probs, truth.data(), truth.num_classes as usize, cfg.alpha)
}

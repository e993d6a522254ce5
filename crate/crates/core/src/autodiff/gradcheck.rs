//! Central finite-difference verification of adjoints, in 64-bit mode.

use super::{Graph, NodeId, Scalar, Shape};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(|analytic|, |numeric|, 1e-3).
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, element index) of the worst deviation.
    pub worst: (usize, usize),
    /// Number of elements compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare the adjoints of the scalar produced by `build` against central
/// finite differences with perturbation `eps`, for every element of every
/// input when `sample_per_input` is 0, otherwise for a deterministic random
/// sample of that many elements per input.
///
/// `build` receives leaves created from `inputs` (all requiring gradients) and
/// must return a scalar node.
pub fn gradcheck<F>(
    inputs: &[(Shape, Vec<f64>)],
    eps: f64,
    sample_per_input: usize,
    seed: u64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let forward = |data: &[Vec<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let ids: Vec<NodeId> = inputs
            .iter()
            .zip(data)
            .map(|((shape, _), values)| g.leaf(shape.clone(), values.clone(), false))
            .collect();
        let loss = build(&mut g, &ids)?;
        if !g.shape(loss).is_scalar() {
            return Err(Error::Invalid(format!(
                "gradcheck target must be scalar, got {:?}",
                g.shape(loss)
            )));
        }
        Ok(g.values(loss)[0].to_f64())
    };

    // Analytic pass.
    let mut g = Graph::<f64>::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|(shape, values)| g.leaf(shape.clone(), values.clone(), true))
        .collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad_or_zeros(id)).collect();

    let mut data: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let mut rng = Rng::new(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for i in 0..inputs.len() {
        let n = data[i].len();
        let elements: Vec<usize> = if sample_per_input == 0 || sample_per_input >= n {
            (0..n).collect()
        } else {
            (0..sample_per_input).map(|_| rng.below(n)).collect()
        };
        for j in elements {
            let orig = data[i][j];
            data[i][j] = orig + eps;
            let f_plus = forward(&data)?;
            data[i][j] = orig - eps;
            let f_minus = forward(&data)?;
            data[i][j] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[i][j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-3);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
            report.max_abs_err = report.max_abs_err.max(abs);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Fill a buffer with uniform values in [lo, hi), deterministically.
pub fn random_buffer(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

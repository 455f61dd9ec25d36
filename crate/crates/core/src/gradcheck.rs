//! Central finite differences against the tape's analytic gradients.
//!
//! The closure rebuilds the forward pass from leaf tensors every call, so
//! the check exercises the exact graph the caller trains with. Meant to run
//! on `f64`; with `eps` around 1e-5 the relative error of a correct
//! gradient sits far below the 1e-4 gate.

use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) where the worst error occurred.
    pub worst: (usize, usize),
    pub coords: usize,
}

/// Relative error with the standard symmetric denominator; exact zeros on
/// both sides compare as zero error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Checks d(loss)/d(inputs[i]) for every coordinate of every input.
///
/// `build` receives a fresh graph plus one leaf per input tensor and must
/// return a scalar loss node. Anything else the forward pass needs
/// (constants, fixed wiring) is captured by the closure.
pub fn finite_diff_check<S, F>(inputs: &[Tensor<S>], eps: f64, build: F) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[NodeId]) -> Result<NodeId>,
{
    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<_>>()?;
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<S>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| grads.get_or_zeros(id, t.shape()))
        .collect();

    let eval = |tensors: &[Tensor<S>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors
            .iter()
            .map(|t| g.leaf(t.clone(), false))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).data()[0].to_f64())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        coords: 0,
    };
    let mut work: Vec<Tensor<S>> = inputs.to_vec();
    for pi in 0..inputs.len() {
        for ci in 0..inputs[pi].numel() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + S::from_f64(eps);
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - S::from_f64(eps);
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let e = rel_err(analytic[pi].data()[ci].to_f64(), numeric);
            report.coords += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (pi, ci);
            }
        }
    }
    Ok(report)
}

//! Modified (penalized) gradient and step lengths for the nonsmooth penalty.

use crate::error::{Error, Result};
use crate::survival::{PenaltyConfig, PenaltyGroup};

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scalar elastic-net case analysis for one coefficient.
#[inline]
pub fn elastic_net_component(beta: f64, score: f64, nu: f64, alpha: f64) -> f64 {
    let l1 = nu * alpha;
    if beta != 0.0 {
        score - nu * (1.0 - alpha) * beta - l1 * sign(beta)
    } else if score.abs() > l1 {
        score - l1 * sign(score)
    } else {
        0.0
    }
}

pub(crate) fn apply_group_rule(
    beta: &[f64],
    score: &[f64],
    groups: &[PenaltyGroup],
    nu: f64,
    alpha: f64,
    out: &mut [f64],
) {
    for g in groups {
        if g.members.len() == 1 {
            let j = g.members[0];
            out[j] = elastic_net_component(beta[j], score[j], nu, alpha);
            continue;
        }
        let thr = nu * alpha * g.weight;
        let bnorm = g
            .members
            .iter()
            .map(|&j| beta[j] * beta[j])
            .sum::<f64>()
            .sqrt();
        if bnorm > 0.0 {
            for &j in &g.members {
                out[j] = score[j] - nu * (1.0 - alpha) * beta[j] - thr * beta[j] / bnorm;
            }
        } else {
            let snorm = g
                .members
                .iter()
                .map(|&j| score[j] * score[j])
                .sum::<f64>()
                .sqrt();
            let factor = if snorm > thr { 1.0 - thr / snorm } else { 0.0 };
            for &j in &g.members {
                out[j] = score[j] * factor;
            }
        }
    }
}

/// Penalized gradient of the β block for ungrouped elastic net.
///
/// `score` is the unpenalized score of β only.
pub fn penalized_beta_score(beta: &[f64], score: &[f64], nu: f64, alpha: f64) -> Vec<f64> {
    beta.iter()
        .zip(score)
        .map(|(&b, &s)| elastic_net_component(b, s, nu, alpha))
        .collect()
}

/// Penalized gradient of the β block under the group elastic net.
///
/// Coefficients not covered by `penalty.groups` follow the scalar rule.
pub fn group_penalized_score(
    beta: &[f64],
    score: &[f64],
    penalty: &PenaltyConfig,
) -> Result<Vec<f64>> {
    if beta.len() != score.len() {
        return Err(Error::validation("beta and score lengths differ"));
    }
    penalty.validate(beta.len())?;
    let groups = penalty.penalty_groups(beta.len());
    let mut out = vec![0.0; beta.len()];
    apply_group_rule(beta, score, &groups, penalty.nu, penalty.alpha, &mut out);
    Ok(out)
}

/// Step lengths along the penalized gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    /// First step at which a sign-constrained block reaches zero (∞ if none).
    pub t_edge: f64,
    /// Minimizer of the local quadratic model along the gradient.
    pub t_opt: f64,
}

/// Edge length for one block: the step at which the block's projection on
/// its current direction vanishes. For a single coordinate this is −θ/g.
pub(crate) fn block_edge(theta: &[f64], direction: &[f64], members: &[usize]) -> Option<f64> {
    let norm_sq: f64 = members.iter().map(|&j| theta[j] * theta[j]).sum();
    if norm_sq == 0.0 {
        return None;
    }
    let inner: f64 = members.iter().map(|&j| theta[j] * direction[j]).sum();
    if inner < 0.0 {
        Some(norm_sq / -inner)
    } else {
        None
    }
}

/// t_edge and t_opt for the penalized gradient `penalized_score`.
///
/// `edge_blocks` lists the sign-constrained index blocks (singletons for the
/// plain elastic net); `curvature` is vᵀF^pen v at v = `penalized_score`.
pub fn step_sizes(
    theta: &[f64],
    penalized_score: &[f64],
    edge_blocks: &[Vec<usize>],
    curvature: f64,
) -> Result<StepSizes> {
    let norm_sq: f64 = penalized_score.iter().map(|g| g * g).sum();
    if norm_sq == 0.0 {
        return Err(Error::validation("penalized score is identically zero"));
    }
    if !(curvature > 0.0) {
        return Err(Error::numerical(format!(
            "nonpositive curvature {curvature} along the penalized gradient"
        )));
    }
    let t_edge = edge_blocks
        .iter()
        .filter_map(|b| block_edge(theta, penalized_score, b))
        .fold(f64::INFINITY, f64::min);
    Ok(StepSizes {
        t_edge,
        t_opt: norm_sq / curvature,
    })
}

//! Modified gradient ascent on θ with EM updates of the frailty covariance.

mod fit;
mod penalty;
mod problem;

use nalgebra::DMatrix;

pub(crate) use fit::fit_masked;
pub use fit::{fit, refit_selected, FitControls, FitResult, SEPARATION_BOUND};
pub use penalty::{
    elastic_net_component, group_penalized_score, penalized_beta_score, step_sizes, StepSizes,
};
pub(crate) use problem::{score_from_mu, Problem};
pub use problem::{Layout, StepKind};

use crate::error::{Error, Result};
use crate::survival::{frailty_precision, AugmentedDesign, ModelParameters, PenaltyConfig};

/// Snapshot of one optimizer iterate in flat coordinates.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub layout: Layout,
    pub theta: Vec<f64>,
    pub score: Vec<f64>,
    pub penalized_score: Vec<f64>,
    /// h(η)(1 − h(η)) per pseudo-row.
    pub weights: Vec<f64>,
    pub objective: f64,
    pub iteration: usize,
    pub active_set: Vec<usize>,
}

impl OptimizerState {
    pub fn new(
        design: &AugmentedDesign,
        params: &ModelParameters,
        penalty: &PenaltyConfig,
    ) -> Result<Self> {
        check_shapes(design, params)?;
        penalty.validate(design.n_covariates())?;
        let problem = Problem::new(
            design,
            penalty,
            vec![true; design.n_covariates()],
            f64::INFINITY,
        );
        let (q_inv, _) = frailty_precision(&params.frailty_cov);
        let theta = params.to_flat();
        let eval = problem.evaluate(&theta, &q_inv);
        let score = problem.score(&eval);
        let penalized_score = problem.penalized_score(&theta, &score, &q_inv);
        Ok(Self {
            layout: problem.layout,
            theta,
            score,
            penalized_score,
            weights: eval.w,
            objective: eval.objective,
            iteration: 0,
            active_set: params.active_set(),
        })
    }

    /// Sup-norm of the penalized gradient.
    pub fn kkt_residual(&self) -> f64 {
        self.penalized_score.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

fn check_shapes(design: &AugmentedDesign, params: &ModelParameters) -> Result<()> {
    let q = design.q();
    if params.coefficients.len() != design.n_covariates()
        || params.baseline.len() != design.t_max()
        || params.random_effects.len() != q * design.n_subjects()
        || params.frailty_cov.nrows() != q
        || params.frailty_cov.ncols() != q
    {
        return Err(Error::validation(
            "parameter dimensions do not match the design",
        ));
    }
    Ok(())
}

/// Unpenalized score H(y − λ(θ)) in flat order (β₀, β, γ, b).
pub fn score_vector(design: &AugmentedDesign, params: &ModelParameters) -> Result<Vec<f64>> {
    let eta = design.linear_predictor(params)?;
    let mu: Vec<f64> = eta.iter().map(|&e| crate::survival::hazard(e)).collect();
    Ok(score_from_mu(design, &mu))
}

/// Dense penalized Fisher matrix H W Hᵀ + K, with the L1 part omitted from K.
pub fn fisher_matrix(
    design: &AugmentedDesign,
    params: &ModelParameters,
    penalty: &PenaltyConfig,
) -> Result<DMatrix<f64>> {
    check_shapes(design, params)?;
    penalty.validate(design.n_covariates())?;
    let eta = design.linear_predictor(params)?;
    let h = design.full_design();
    let mut hw = h.clone();
    for (r, &e) in eta.iter().enumerate() {
        let w = crate::survival::hazard(e) * crate::survival::hazard(-e);
        hw.row_mut(r).scale_mut(w);
    }
    let mut f = h.tr_mul(&hw);
    let l = Layout::of(design);
    for j in 0..l.p {
        f[(l.beta(j), l.beta(j))] += penalty.nu * (1.0 - penalty.alpha);
    }
    for s in 0..l.t_max {
        f[(l.gamma(s), l.gamma(s))] += penalty.nu_baseline;
    }
    let (q_inv, _) = frailty_precision(&params.frailty_cov);
    let b0 = l.b_start();
    for i in 0..l.n {
        for a in 0..l.q {
            for b in 0..l.q {
                f[(b0 + i * l.q + a, b0 + i * l.q + b)] += q_inv[(a, b)];
            }
        }
    }
    Ok(f)
}

/// One θ block update of the fitting loop from `params`.
pub fn ascent_update(
    design: &AugmentedDesign,
    params: &ModelParameters,
    penalty: &PenaltyConfig,
    fisher_enabled: bool,
    max_step: f64,
) -> Result<(ModelParameters, StepKind)> {
    check_shapes(design, params)?;
    penalty.validate(design.n_covariates())?;
    let problem = Problem::new(design, penalty, vec![true; design.n_covariates()], max_step);
    let (q_inv, _) = frailty_precision(&params.frailty_cov);
    let theta = params.to_flat();
    let eval = problem.evaluate(&theta, &q_inv);
    let score = problem.score(&eval);
    let spen = problem.penalized_score(&theta, &score, &q_inv);
    let out = problem.ascent_step(&theta, &eval, &spen, &q_inv, fisher_enabled)?;
    Ok((params.with_flat(&out.theta), out.kind))
}

/// EM update of Q at `params`; the flag reports a ridge-regularized solve.
pub fn em_update_frailty(
    design: &AugmentedDesign,
    params: &ModelParameters,
    penalty: &PenaltyConfig,
) -> Result<(DMatrix<f64>, bool)> {
    check_shapes(design, params)?;
    if design.q() == 0 {
        return Ok((DMatrix::zeros(0, 0), false));
    }
    let problem = Problem::new(
        design,
        penalty,
        vec![true; design.n_covariates()],
        f64::INFINITY,
    );
    let (q_inv, _) = frailty_precision(&params.frailty_cov);
    let theta = params.to_flat();
    let eval = problem.evaluate(&theta, &q_inv);
    problem.em_update(&theta, &eval, &q_inv)
}

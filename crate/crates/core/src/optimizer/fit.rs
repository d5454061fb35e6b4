use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::problem::{Problem, StepKind};
use crate::error::{Error, Result};
use crate::survival::{frailty_precision, AugmentedDesign, ModelParameters, PenaltyConfig};

/// Stopping rules and safeguards for [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitControls {
    pub max_iter: usize,
    /// Relative change of the objective between iterations.
    pub rel_tol: f64,
    /// Sup-norm of the parameter update (θ and Q).
    pub step_tol: f64,
    /// Sup-norm of the penalized gradient.
    pub kkt_tol: f64,
    /// Gradient iterations before Fisher scoring may be tried.
    pub fisher_warmup: usize,
    /// Consecutive iterations with an unchanged active set before Fisher scoring.
    pub active_stable: usize,
    /// Cap on the sup-norm of any accepted θ step.
    pub max_step: f64,
    pub update_frailty: bool,
}

impl Default for FitControls {
    fn default() -> Self {
        Self {
            max_iter: 5000,
            rel_tol: 1e-8,
            step_tol: 1e-6,
            kkt_tol: 1e-5,
            fisher_warmup: 25,
            active_stable: 5,
            max_step: 2.0,
            update_frailty: true,
        }
    }
}

impl FitControls {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0
            || !(self.rel_tol > 0.0)
            || !(self.step_tol > 0.0)
            || !(self.kkt_tol > 0.0)
            || !(self.max_step > 0.0)
        {
            return Err(Error::validation("fit controls must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParameters,
    pub penalty: PenaltyConfig,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    /// Indices j with β_j ≠ 0.
    pub selected: Vec<usize>,
    /// Sup-norm of the penalized gradient at the returned point.
    pub kkt_residual: f64,
    /// Inverse Fisher over (β₀, retained β, γ); refits only.
    pub covariance: Option<DMatrix<f64>>,
    /// Flat indices (β₀ = 0, β_j = 1 + j, γ_s = 1 + p + s) of `covariance` rows.
    pub covariance_index: Vec<usize>,
    pub diagnostics: Vec<String>,
}

impl FitResult {
    /// Standard errors of the retained coefficients, in `selected` order.
    pub fn coefficient_variances(&self) -> Option<Vec<(usize, f64)>> {
        let cov = self.covariance.as_ref()?;
        Some(
            self.covariance_index
                .iter()
                .enumerate()
                .filter(|(_, &k)| k >= 1 && k <= self.params.coefficients.len())
                .map(|(c, &k)| (k - 1, cov[(c, c)]))
                .collect(),
        )
    }

    pub fn intercept_variance(&self) -> Option<f64> {
        let cov = self.covariance.as_ref()?;
        let c = self.covariance_index.iter().position(|&k| k == 0)?;
        Some(cov[(c, c)])
    }
}

/// Maximize the penalized objective over θ with EM updates of Q.
pub fn fit(
    design: &AugmentedDesign,
    penalty: &PenaltyConfig,
    init: Option<&ModelParameters>,
    controls: &FitControls,
) -> Result<FitResult> {
    let free = vec![true; design.n_covariates()];
    fit_masked(design, penalty, init, controls, free)
}

/// As [`fit`], with coefficients outside `free` pinned at zero.
pub(crate) fn fit_masked(
    design: &AugmentedDesign,
    penalty: &PenaltyConfig,
    init: Option<&ModelParameters>,
    controls: &FitControls,
    free: Vec<bool>,
) -> Result<FitResult> {
    penalty.validate(design.n_covariates())?;
    controls.validate()?;
    if !(penalty.nu_baseline > 0.0) {
        return Err(Error::validation(
            "the baseline ridge nu_baseline must be positive",
        ));
    }
    if free.len() != design.n_covariates() {
        return Err(Error::validation(
            "mask length differs from covariate count",
        ));
    }
    let problem = Problem::new(design, penalty, free.clone(), controls.max_step);
    let layout = problem.layout;

    let start = match init {
        Some(p) => {
            design.linear_predictor(p)?;
            p.clone()
        }
        None => ModelParameters::null_start(design),
    };
    let mut theta = start.to_flat();
    for (j, &f) in free.iter().enumerate() {
        if !f {
            theta[layout.beta(j)] = 0.0;
        }
    }
    let q = layout.q;
    let mut q_cov = if q > 0 {
        start.frailty_cov.clone()
    } else {
        DMatrix::zeros(0, 0)
    };
    let (mut q_inv, mut degenerate) = frailty_precision(&q_cov);
    let mut eval = problem.evaluate(&theta, &q_inv);
    if !eval.objective.is_finite() {
        return Err(Error::numerical(
            "objective is not finite at the starting point",
        ));
    }

    let mut diagnostics = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last_rel = f64::INFINITY;
    let mut last_step = f64::INFINITY;
    let mut stable = 0usize;
    let mut active: Vec<usize> = active_of(&theta, layout.p);
    let mut stalled = 0usize;
    let mut schur_flagged = false;
    let mut kkt;
    let mut accel = EmAccelerator::default();
    let em_active = controls.update_frailty && q > 0;
    // with EM active, convergence is only declared right after an EM update
    let mut em_current = !em_active;

    loop {
        let score = problem.score(&eval);
        let spen = problem.penalized_score(&theta, &score, &q_inv);
        kkt = spen.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if !kkt.is_finite() {
            return Err(Error::numerical("penalized gradient is not finite"));
        }
        if em_current
            && last_rel < controls.rel_tol
            && last_step < controls.step_tol
            && kkt < controls.kkt_tol
        {
            converged = true;
            break;
        }
        if iterations >= controls.max_iter {
            diagnostics.push(format!(
                "maximum iterations ({}) reached; KKT residual {kkt:.3e}",
                controls.max_iter
            ));
            break;
        }
        iterations += 1;

        let fisher_enabled = !problem.has_kinks()
            || (iterations > controls.fisher_warmup && stable >= controls.active_stable);
        let prev_obj = eval.objective;
        let outcome = problem.ascent_step(&theta, &eval, &spen, &q_inv, fisher_enabled)?;
        if outcome.solve_failed
            && !diagnostics
                .iter()
                .any(|d: &String| d.starts_with("Fisher solve"))
        {
            diagnostics.push("Fisher solve failed; fell back to gradient steps".into());
        }
        if outcome.eval.objective < prev_obj - 1e-10 {
            return Err(Error::numerical(format!(
                "objective decreased from {prev_obj} to {} at iteration {iterations}",
                outcome.eval.objective
            )));
        }
        let step_inf = theta
            .iter()
            .zip(&outcome.theta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        theta = outcome.theta;
        eval = outcome.eval;
        if outcome.kind == StepKind::Stalled {
            stalled += 1;
            if stalled >= 20 {
                diagnostics.push(format!(
                    "no ascent direction found for 20 iterations; KKT residual {kkt:.3e}"
                ));
                break;
            }
        } else {
            stalled = 0;
        }

        let mut dq = 0.0;
        em_current = !em_active || fisher_enabled;
        if em_active && fisher_enabled {
            let (q_new, reg) = problem.em_update(&theta, &eval, &q_inv)?;
            if reg && !schur_flagged {
                schur_flagged = true;
                diagnostics.push(
                    "EM inner matrix singular (baseline/covariate collinearity); ridge applied"
                        .into(),
                );
            }
            let q_new = accel.push(&q_cov, q_new);
            dq = (&q_new - &q_cov).abs().max();
            q_cov = q_new;
            let (qi, deg) = frailty_precision(&q_cov);
            q_inv = qi;
            degenerate |= deg;
            problem.refresh_objective(&theta, &mut eval, &q_inv);
        }

        last_step = step_inf.max(dq);
        last_rel = (eval.objective - prev_obj).abs() / prev_obj.abs().max(1.0);

        let now = active_of(&theta, layout.p);
        if now == active {
            stable += 1;
        } else {
            stable = 0;
            active = now;
        }
    }

    if degenerate {
        diagnostics
            .push("frailty covariance is (near) singular; eigenvalues floored at 1e-10".into());
    }
    let mut params = start.with_flat(&theta);
    params.frailty_cov = q_cov;
    let selected = params.active_set();
    Ok(FitResult {
        params,
        penalty: penalty.clone(),
        converged,
        iterations,
        objective: eval.objective,
        selected,
        kkt_residual: kkt,
        covariance: None,
        covariance_index: Vec::new(),
        diagnostics,
    })
}

/// Aitken-type extrapolation of slowly converging EM sequences.
///
/// When successive Q increments keep their direction and shrink by a ratio
/// r close to one, the remaining geometric tail d·r/(1 − r) is added in one
/// jump and the result is projected onto the positive semidefinite cone.
#[derive(Default)]
struct EmAccelerator {
    last: Option<DMatrix<f64>>,
    slow: usize,
}

impl EmAccelerator {
    const MIN_RATIO: f64 = 0.9;
    const MIN_COSINE: f64 = 0.99;
    const PATIENCE: usize = 5;

    fn push(&mut self, current: &DMatrix<f64>, proposed: DMatrix<f64>) -> DMatrix<f64> {
        let d = &proposed - current;
        let dn = d.norm();
        let Some(prev) = self.last.replace(d.clone()) else {
            return proposed;
        };
        let pn = prev.norm();
        if dn == 0.0 || pn == 0.0 {
            self.slow = 0;
            return proposed;
        }
        let r = dn / pn;
        let cos = d.dot(&prev) / (dn * pn);
        if cos > Self::MIN_COSINE && (Self::MIN_RATIO..1.0).contains(&r) {
            self.slow += 1;
        } else {
            self.slow = 0;
        }
        if self.slow < Self::PATIENCE {
            return proposed;
        }
        self.slow = 0;
        self.last = None;
        let jumped = proposed + d * (r / (1.0 - r));
        let sym = (&jumped + jumped.transpose()) * 0.5;
        let mut eig = sym.symmetric_eigen();
        eig.eigenvalues.iter_mut().for_each(|v| *v = v.max(0.0));
        eig.recompose()
    }
}

fn active_of(theta: &[f64], p: usize) -> Vec<usize> {
    (0..p).filter(|&j| theta[1 + j] != 0.0).collect()
}

/// Coefficient magnitude beyond which a refit is flagged for separation.
pub const SEPARATION_BOUND: f64 = 50.0;

/// Unpenalized refit over the selected coefficients.
///
/// Keeps the baseline ridge and the frailty term; the covariance is the
/// inverse penalized Fisher matrix over (β₀, selected β, γ) with the random
/// effects profiled out and Q held at its final value.
pub fn refit_selected(
    design: &AugmentedDesign,
    selected: &[usize],
    nu_baseline: f64,
    init: Option<&ModelParameters>,
    controls: &FitControls,
) -> Result<FitResult> {
    let p = design.n_covariates();
    let mut free = vec![false; p];
    for &j in selected {
        if j >= p {
            return Err(Error::validation(format!(
                "selected index {j} out of range"
            )));
        }
        free[j] = true;
    }
    let penalty = PenaltyConfig::new(0.0, 1.0, nu_baseline)?;
    let mut result = fit_masked(design, &penalty, init, controls, free.clone())?;
    if !result.converged {
        result.diagnostics.push("refit did not converge".into());
    }
    if result
        .params
        .coefficients
        .iter()
        .any(|b| b.abs() > SEPARATION_BOUND)
    {
        result.diagnostics.push(format!(
            "possible separation: |beta| exceeds {SEPARATION_BOUND}"
        ));
    }

    let problem = Problem::new(design, &penalty, free, controls.max_step);
    let layout = problem.layout;
    let theta = result.params.to_flat();
    let (q_inv, _) = frailty_precision(&result.params.frailty_cov);
    let eval = problem.evaluate(&theta, &q_inv);
    let mut coords = vec![0usize];
    let mut sel: Vec<usize> = selected.to_vec();
    sel.sort_unstable();
    sel.dedup();
    coords.extend(sel.iter().map(|&j| layout.beta(j)));
    coords.extend((0..layout.t_max).map(|s| layout.gamma(s)));
    let arrow = problem.fisher_arrow(&coords, &eval, &q_inv, None)?;
    if arrow.regularized {
        result
            .diagnostics
            .push("Fisher matrix singular at the refit; ridge applied to the covariance".into());
    }
    result.covariance = Some(arrow.border_inverse());
    result.covariance_index = coords;
    Ok(result)
}

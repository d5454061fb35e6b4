//! Evaluation engine shared by the fitting routines.

use nalgebra::{DMatrix, DVector};

use super::penalty::{apply_group_rule, block_edge};
use crate::error::{Error, Result};
use crate::linalg::BlockArrow;
use crate::survival::{
    binary_log_likelihood, frailty_quadratic, hazard, AugmentedDesign, PenaltyConfig, PenaltyGroup,
};

/// Offsets into the flat parameter vector (β₀, β, γ, b).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub p: usize,
    pub t_max: usize,
    pub q: usize,
    pub n: usize,
}

impl Layout {
    pub fn of(design: &AugmentedDesign) -> Self {
        Self {
            p: design.n_covariates(),
            t_max: design.t_max(),
            q: design.q(),
            n: design.n_subjects(),
        }
    }
    #[inline]
    pub fn beta(&self, j: usize) -> usize {
        1 + j
    }
    #[inline]
    pub fn gamma(&self, s: usize) -> usize {
        1 + self.p + s
    }
    #[inline]
    pub fn b_start(&self) -> usize {
        1 + self.p + self.t_max
    }
    pub fn dim(&self) -> usize {
        self.b_start() + self.q * self.n
    }
}

/// Quantities that depend on θ through η only.
#[derive(Debug, Clone)]
pub(crate) struct Evaluation {
    pub mu: Vec<f64>,
    pub w: Vec<f64>,
    pub loglik: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Edge,
    FisherScoring,
    Gradient,
    /// No ascent step could be found along the penalized gradient.
    Stalled,
    /// The penalized gradient is exactly zero.
    None,
}

pub(crate) struct StepOutcome {
    pub theta: Vec<f64>,
    pub eval: Evaluation,
    pub kind: StepKind,
    /// Fisher solve was attempted but the linear system was ill-conditioned.
    pub solve_failed: bool,
}

pub(crate) struct Problem<'a> {
    pub design: &'a AugmentedDesign,
    pub layout: Layout,
    pub nu: f64,
    pub alpha: f64,
    pub nu_baseline: f64,
    /// Penalty groups restricted to coefficients that may move.
    pub groups: Vec<PenaltyGroup>,
    pub max_step: f64,
}

impl<'a> Problem<'a> {
    pub fn new(
        design: &'a AugmentedDesign,
        penalty: &PenaltyConfig,
        free: Vec<bool>,
        max_step: f64,
    ) -> Self {
        let layout = Layout::of(design);
        let groups = penalty
            .penalty_groups(layout.p)
            .into_iter()
            .filter_map(|g| {
                let members: Vec<usize> = g.members.iter().copied().filter(|&j| free[j]).collect();
                (!members.is_empty()).then_some(PenaltyGroup {
                    members,
                    weight: g.weight,
                })
            })
            .collect();
        Self {
            design,
            layout,
            nu: penalty.nu,
            alpha: penalty.alpha,
            nu_baseline: penalty.nu_baseline,
            groups,
            max_step,
        }
    }

    /// Whether the objective has kinks in the free coordinates.
    pub fn has_kinks(&self) -> bool {
        self.nu * self.alpha > 0.0 && !self.groups.is_empty()
    }

    fn beta_penalty(&self, theta: &[f64]) -> f64 {
        let l = self.layout;
        self.groups
            .iter()
            .map(|g| {
                let sq: f64 = g.members.iter().map(|&j| theta[l.beta(j)].powi(2)).sum();
                self.nu * (g.weight * self.alpha * sq.sqrt() + (1.0 - self.alpha) * sq / 2.0)
            })
            .sum()
    }

    pub fn smooth_penalties(&self, theta: &[f64], q_inv: &DMatrix<f64>) -> f64 {
        let l = self.layout;
        let gamma_sq: f64 = theta[l.gamma(0)..l.gamma(0) + l.t_max]
            .iter()
            .map(|g| g * g)
            .sum();
        frailty_quadratic(&theta[l.b_start()..], q_inv) + self.nu_baseline * gamma_sq / 2.0
    }

    pub fn evaluate(&self, theta: &[f64], q_inv: &DMatrix<f64>) -> Evaluation {
        let eta = self.design.eta_flat(theta);
        let loglik = binary_log_likelihood(self.design.responses(), &eta);
        let mu: Vec<f64> = eta.iter().map(|&e| hazard(e)).collect();
        let w: Vec<f64> = eta.iter().zip(&mu).map(|(&e, &m)| m * hazard(-e)).collect();
        let objective = loglik - self.smooth_penalties(theta, q_inv) - self.beta_penalty(theta);
        Evaluation {
            mu,
            w,
            loglik,
            objective,
        }
    }

    /// Recompute the objective after Q changed (η unchanged).
    pub fn refresh_objective(&self, theta: &[f64], eval: &mut Evaluation, q_inv: &DMatrix<f64>) {
        eval.objective =
            eval.loglik - self.smooth_penalties(theta, q_inv) - self.beta_penalty(theta);
    }

    /// Unpenalized score H(y − λ) in flat order.
    pub fn score(&self, eval: &Evaluation) -> Vec<f64> {
        score_from_mu(self.design, &eval.mu)
    }

    pub fn penalized_score(&self, theta: &[f64], score: &[f64], q_inv: &DMatrix<f64>) -> Vec<f64> {
        let l = self.layout;
        let mut out = vec![0.0; l.dim()];
        out[0] = score[0];
        let beta = &theta[1..1 + l.p];
        let sb = &score[1..1 + l.p];
        apply_group_rule(
            beta,
            sb,
            &self.groups,
            self.nu,
            self.alpha,
            &mut out[1..1 + l.p],
        );
        for s in 0..l.t_max {
            let k = l.gamma(s);
            out[k] = score[k] - self.nu_baseline * theta[k];
        }
        let q = l.q;
        let b0 = l.b_start();
        for i in 0..l.n {
            for k in 0..q {
                let mut pen = 0.0;
                for m in 0..q {
                    pen += q_inv[(k, m)] * theta[b0 + i * q + m];
                }
                out[b0 + i * q + k] = score[b0 + i * q + k] - pen;
            }
        }
        out
    }

    /// vᵀ F^pen v with the L1 part ignored.
    pub fn curvature(&self, v: &[f64], eval: &Evaluation, q_inv: &DMatrix<f64>) -> f64 {
        let l = self.layout;
        let hv = self.design.eta_flat(v);
        let data: f64 = hv.iter().zip(&eval.w).map(|(h, w)| w * h * h).sum();
        let ridge_beta: f64 =
            (0..l.p).map(|j| v[l.beta(j)].powi(2)).sum::<f64>() * self.nu * (1.0 - self.alpha);
        let ridge_gamma: f64 =
            (0..l.t_max).map(|s| v[l.gamma(s)].powi(2)).sum::<f64>() * self.nu_baseline;
        data + ridge_beta + ridge_gamma + 2.0 * frailty_quadratic(&v[l.b_start()..], q_inv)
    }

    /// Block-arrow factorization of F^pen over the border `coords`
    /// (flat indices of β₀/β/γ) plus all random effects.
    ///
    /// `extra` is added to the border block (group-norm curvature).
    pub fn fisher_arrow(
        &self,
        coords: &[usize],
        eval: &Evaluation,
        q_inv: &DMatrix<f64>,
        extra: Option<&DMatrix<f64>>,
    ) -> Result<BlockArrow> {
        let l = self.layout;
        let d = self.design;
        let rows = d.n_rows();
        let nb = coords.len();
        // √w-scaled border design
        let mut hs = DMatrix::zeros(rows, nb);
        for (c, &k) in coords.iter().enumerate() {
            if k == 0 {
                for r in 0..rows {
                    hs[(r, c)] = eval.w[r].sqrt();
                }
            } else if k <= l.p {
                let xc = d.fixed_block().column(k - 1);
                for r in 0..rows {
                    hs[(r, c)] = eval.w[r].sqrt() * xc[r];
                }
            } else {
                let s = k - l.gamma(0) + 1;
                for (r, &rt) in d.risk_time().iter().enumerate() {
                    if rt == s {
                        hs[(r, c)] = eval.w[r].sqrt();
                    }
                }
            }
        }
        let mut a = hs.tr_mul(&hs);
        for (c, &k) in coords.iter().enumerate() {
            if (1..=l.p).contains(&k) {
                a[(c, c)] += self.nu * (1.0 - self.alpha);
            } else if k > l.p {
                a[(c, c)] += self.nu_baseline;
            }
        }
        if let Some(e) = extra {
            a += e;
        }

        let q = l.q;
        let z = d.random_rows();
        let mut cs = Vec::with_capacity(l.n);
        let mut ds = Vec::with_capacity(l.n);
        for i in 0..if q == 0 { 0 } else { l.n } {
            let mut ci = DMatrix::zeros(nb, q);
            let mut di = q_inv.clone();
            for r in d.subject_rows(i) {
                let sw = eval.w[r].sqrt();
                for k in 0..q {
                    let zk = z[(r, k)];
                    if zk == 0.0 {
                        continue;
                    }
                    for c in 0..nb {
                        ci[(c, k)] += hs[(r, c)] * sw * zk;
                    }
                    for m in 0..q {
                        di[(k, m)] += eval.w[r] * zk * z[(r, m)];
                    }
                }
            }
            cs.push(ci);
            ds.push(di);
        }
        BlockArrow::new(a, cs, ds)
    }

    fn clamp_step(&self, theta: &[f64], cand: &mut [f64]) {
        let inf = theta
            .iter()
            .zip(cand.iter())
            .map(|(a, b)| (b - a).abs())
            .fold(0.0, f64::max);
        if inf > self.max_step {
            let f = self.max_step / inf;
            for (c, t) in cand.iter_mut().zip(theta) {
                *c = t + (*c - t) * f;
            }
        }
    }

    fn beta_blocks(&self) -> Vec<Vec<usize>> {
        self.groups
            .iter()
            .map(|g| g.members.iter().map(|&j| self.layout.beta(j)).collect())
            .collect()
    }

    /// One θ block update: edge step, Fisher scoring, or gradient step.
    pub fn ascent_step(
        &self,
        theta: &[f64],
        eval: &Evaluation,
        spen: &[f64],
        q_inv: &DMatrix<f64>,
        fisher_enabled: bool,
    ) -> Result<StepOutcome> {
        let norm_sq: f64 = spen.iter().map(|g| g * g).sum();
        if norm_sq == 0.0 {
            return Ok(StepOutcome {
                theta: theta.to_vec(),
                eval: eval.clone(),
                kind: StepKind::None,
                solve_failed: false,
            });
        }
        let curv = self.curvature(spen, eval, q_inv);
        if !(curv > 0.0) || !curv.is_finite() {
            return Err(Error::numerical(format!(
                "degenerate Fisher matrix: curvature {curv} along the penalized gradient"
            )));
        }
        let t_opt = norm_sq / curv;
        let blocks = if self.nu * self.alpha > 0.0 {
            self.beta_blocks()
        } else {
            Vec::new()
        };
        let mut t_edge = f64::INFINITY;
        let mut hits: Vec<usize> = Vec::new();
        for (bi, b) in blocks.iter().enumerate() {
            if let Some(t) = block_edge(theta, spen, b) {
                if t < t_edge * (1.0 - 1e-12) {
                    t_edge = t;
                    hits.clear();
                    hits.push(bi);
                } else if t <= t_edge * (1.0 + 1e-12) {
                    hits.push(bi);
                }
            }
        }
        let base = eval.objective;
        let slack = 1e-10;
        let accept = |cand: &[f64]| -> Option<Evaluation> {
            let ev = self.evaluate(cand, q_inv);
            (ev.objective.is_finite() && ev.objective >= base - slack).then_some(ev)
        };

        if t_opt >= t_edge {
            let mut cand: Vec<f64> = theta
                .iter()
                .zip(spen)
                .map(|(t, g)| t + t_edge * g)
                .collect();
            for &bi in &hits {
                for &k in &blocks[bi] {
                    cand[k] = 0.0;
                }
            }
            self.clamp_step(theta, &mut cand);
            if let Some(ev) = accept(&cand) {
                return Ok(StepOutcome {
                    theta: cand,
                    eval: ev,
                    kind: StepKind::Edge,
                    solve_failed: false,
                });
            }
        } else if fisher_enabled {
            match self.fisher_scoring_candidate(theta, eval, spen, q_inv) {
                Ok(Some(cand)) => {
                    if let Some(ev) = accept(&cand) {
                        return Ok(StepOutcome {
                            theta: cand,
                            eval: ev,
                            kind: StepKind::FisherScoring,
                            solve_failed: false,
                        });
                    }
                }
                Ok(None) => {}
                Err(_) => {
                    let mut out = self.gradient_step(theta, spen, t_opt.min(t_edge), q_inv, base);
                    out.solve_failed = true;
                    return Ok(out);
                }
            }
        }
        Ok(self.gradient_step(theta, spen, t_opt.min(t_edge), q_inv, base))
    }

    fn gradient_step(
        &self,
        theta: &[f64],
        spen: &[f64],
        t: f64,
        q_inv: &DMatrix<f64>,
        base: f64,
    ) -> StepOutcome {
        let mut t = t;
        let gmax = spen.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if t * gmax > self.max_step {
            t = self.max_step / gmax;
        }
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(spen).map(|(a, g)| a + t * g).collect();
            let ev = self.evaluate(&cand, q_inv);
            if ev.objective.is_finite() && ev.objective >= base - 1e-10 {
                return StepOutcome {
                    theta: cand,
                    eval: ev,
                    kind: StepKind::Gradient,
                    solve_failed: false,
                };
            }
            t *= 0.5;
        }
        StepOutcome {
            theta: theta.to_vec(),
            eval: self.evaluate(theta, q_inv),
            kind: StepKind::Stalled,
            solve_failed: false,
        }
    }

    /// θ + (F^pen)⁻¹ S^pen over the coordinates that are nonzero after an
    /// infinitesimal gradient step. Returns `None` when the sign pattern
    /// changes or the step exceeds the maximum step length.
    fn fisher_scoring_candidate(
        &self,
        theta: &[f64],
        eval: &Evaluation,
        spen: &[f64],
        q_inv: &DMatrix<f64>,
    ) -> Result<Option<Vec<f64>>> {
        let l = self.layout;
        let mut coords = vec![0usize];
        // (group index, border offset of its first member)
        let mut free_groups: Vec<(usize, usize)> = Vec::new();
        for (gi, g) in self.groups.iter().enumerate() {
            let moving = g
                .members
                .iter()
                .any(|&j| theta[l.beta(j)] != 0.0 || spen[l.beta(j)] != 0.0);
            if moving {
                free_groups.push((gi, coords.len()));
                coords.extend(g.members.iter().map(|&j| l.beta(j)));
            }
        }
        coords.extend((0..l.t_max).map(|s| l.gamma(s)));

        let extra = self.group_curvature(theta, &coords, &free_groups);
        let arrow = self.fisher_arrow(&coords, eval, q_inv, extra.as_ref())?;
        if arrow.regularized {
            return Err(Error::numerical("ill-conditioned Fisher matrix"));
        }
        let rhs = DVector::from_iterator(coords.len(), coords.iter().map(|&k| spen[k]));
        let (dx, db) = arrow.solve(&rhs, &spen[l.b_start()..]);
        if dx.iter().chain(&db).any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite Fisher scoring step"));
        }
        let mut cand = theta.to_vec();
        for (c, &k) in coords.iter().enumerate() {
            cand[k] += dx[c];
        }
        for (k, v) in db.iter().enumerate() {
            cand[l.b_start() + k] += v;
        }
        let step_inf = theta
            .iter()
            .zip(&cand)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if step_inf > self.max_step {
            return Ok(None);
        }
        // sign pattern must match the infinitesimal gradient step
        if self.nu * self.alpha > 0.0 {
            for &(gi, _) in &free_groups {
                let g = &self.groups[gi];
                let dir = |j: usize| {
                    let t = theta[l.beta(j)];
                    if g.members.iter().any(|&m| theta[l.beta(m)] != 0.0) {
                        t
                    } else {
                        spen[l.beta(j)]
                    }
                };
                if g.members.len() == 1 {
                    let j = g.members[0];
                    if cand[l.beta(j)].signum() != dir(j).signum() || cand[l.beta(j)] == 0.0 {
                        return Ok(None);
                    }
                } else {
                    let inner: f64 = g.members.iter().map(|&j| cand[l.beta(j)] * dir(j)).sum();
                    if inner <= 0.0 {
                        return Ok(None);
                    }
                }
            }
        }
        Ok(Some(cand))
    }

    /// Curvature of να√m_g‖β_g‖ for active multi-member groups.
    fn group_curvature(
        &self,
        theta: &[f64],
        coords: &[usize],
        free_groups: &[(usize, usize)],
    ) -> Option<DMatrix<f64>> {
        let l = self.layout;
        let mut extra: Option<DMatrix<f64>> = None;
        for &(gi, off) in free_groups {
            let g = &self.groups[gi];
            if g.members.len() < 2 {
                continue;
            }
            let norm = g
                .members
                .iter()
                .map(|&j| theta[l.beta(j)].powi(2))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                continue;
            }
            let scale = self.nu * self.alpha * g.weight / norm;
            let e = extra.get_or_insert_with(|| DMatrix::zeros(coords.len(), coords.len()));
            for (a, &ja) in g.members.iter().enumerate() {
                let ua = theta[l.beta(ja)] / norm;
                for (b, &jb) in g.members.iter().enumerate() {
                    let ub = theta[l.beta(jb)] / norm;
                    let delta = if a == b { 1.0 } else { 0.0 };
                    e[(off + a, off + b)] += scale * (delta - ua * ub);
                }
            }
        }
        extra
    }

    /// EM update of Q: mean over subjects of V_ii + b_i b_iᵀ, with
    /// the border restricted to (γ, β₀, active β).
    pub fn em_update(
        &self,
        theta: &[f64],
        eval: &Evaluation,
        q_inv: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, bool)> {
        let l = self.layout;
        let q = l.q;
        let mut coords: Vec<usize> = (0..l.t_max).map(|s| l.gamma(s)).collect();
        coords.push(0);
        coords.extend(
            (0..l.p)
                .filter(|&j| theta[l.beta(j)] != 0.0)
                .map(|j| l.beta(j)),
        );
        let arrow = self.fisher_arrow(&coords, eval, q_inv, None)?;
        let b = &theta[l.b_start()..];
        let mut acc = DMatrix::zeros(q, q);
        for i in 0..l.n {
            let v = arrow.random_block_inverse(i);
            let bi = DVector::from_column_slice(&b[i * q..(i + 1) * q]);
            acc += v + &bi * bi.transpose();
        }
        acc /= l.n as f64;
        let sym = (&acc + acc.transpose()) * 0.5;
        Ok((sym, arrow.regularized))
    }
}

/// H(y − μ) in flat order.
pub(crate) fn score_from_mu(design: &AugmentedDesign, mu: &[f64]) -> Vec<f64> {
    let l = Layout::of(design);
    let resid: Vec<f64> = design
        .responses()
        .iter()
        .zip(mu)
        .map(|(y, m)| y - m)
        .collect();
    let mut s = vec![0.0; l.dim()];
    s[0] = resid.iter().sum();
    let r = DVector::from_column_slice(&resid);
    let xs = design.fixed_block().tr_mul(&r);
    s[1..1 + l.p].copy_from_slice(xs.as_slice());
    for (row, &t) in design.risk_time().iter().enumerate() {
        s[l.gamma(t - 1)] += resid[row];
    }
    let z = design.random_rows();
    let b0 = l.b_start();
    for (row, &i) in design.subject_index().iter().enumerate() {
        for k in 0..l.q {
            s[b0 + i * l.q + k] += z[(row, k)] * resid[row];
        }
    }
    s
}

//! Discrete-time hazard model with subject frailty.
//!
//! A subject observed from entry cycle `l` to exit cycle `t` contributes one
//! Bernoulli pseudo-row per cycle at risk. The response is 0 on every row
//! except the last, which carries the event indicator. The resulting binary
//! likelihood equals the left-truncated, right-censored discrete survival
//! likelihood, so a logistic mixed model on the pseudo-rows fits the hazard
//!
//! `logit λ(s | x_i, b_i) = γ_s + β₀ + x_iᵀβ + z_isᵀ b_i`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to frailty covariance eigenvalues before inversion.
pub const EIGEN_FLOOR: f64 = 1e-10;
const LOG_FLOOR: f64 = -690.775_527_898_213_7; // ln(1e-300)

/// One subject's follow-up record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalObservation {
    pub subject_id: String,
    /// Exit cycle (event or censoring), 1-based.
    pub time: u32,
    /// Entry cycle; cycles before it are unobserved.
    pub truncation: u32,
    pub event: bool,
    pub covariates: Vec<f64>,
}

impl SurvivalObservation {
    pub fn new(
        subject_id: impl Into<String>,
        time: u32,
        truncation: u32,
        event: bool,
        covariates: Vec<f64>,
    ) -> Self {
        Self {
            subject_id: subject_id.into(),
            time,
            truncation,
            event,
            covariates,
        }
    }

    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.truncation < 1 {
            return Err(Error::validation(format!(
                "subject {}: truncation time must be at least 1",
                self.subject_id
            )));
        }
        if self.truncation > self.time {
            return Err(Error::validation(format!(
                "subject {}: truncation time {} exceeds observed time {}",
                self.subject_id, self.truncation, self.time
            )));
        }
        if self.time as usize > t_max {
            return Err(Error::validation(format!(
                "subject {}: time {} exceeds t_max {}",
                self.subject_id, self.time, t_max
            )));
        }
        if let Some(j) = self.covariates.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "subject {}: covariate {} is not finite",
                self.subject_id, j
            )));
        }
        Ok(())
    }

    /// Number of pseudo-rows this subject contributes.
    pub fn rows_at_risk(&self) -> usize {
        (self.time - self.truncation + 1) as usize
    }
}

/// Random-effect design per subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub enum RandomDesign {
    /// No frailty term (q = 0).
    None,
    /// Random intercept, z_is ≡ 1 (q = 1).
    #[default]
    Intercept,
    /// Time-constant subject-specific design vectors, all of length q.
    Subject(Vec<Vec<f64>>),
}

impl RandomDesign {
    fn dimension(&self) -> usize {
        match self {
            RandomDesign::None => 0,
            RandomDesign::Intercept => 1,
            RandomDesign::Subject(rows) => rows.first().map_or(0, Vec::len),
        }
    }
}

/// Stacked pseudo-observations with their fixed, baseline and random blocks.
///
/// Rows of one subject are contiguous and ordered by risk time. The baseline
/// block is stored implicitly through `risk_time`; the random block is stored
/// compactly as one q-vector per row (the full design is block diagonal).
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDesign {
    responses: Vec<f64>,
    fixed: DMatrix<f64>,
    risk_time: Vec<usize>,
    subject: Vec<usize>,
    random: DMatrix<f64>,
    subject_rows: Vec<Range<usize>>,
    t_max: usize,
}

/// Expand survival records into pseudo-observations.
pub fn augment(
    records: &[SurvivalObservation],
    t_max: usize,
    random: &RandomDesign,
) -> Result<AugmentedDesign> {
    if records.is_empty() {
        return Err(Error::validation("no records to augment"));
    }
    let p = records[0].covariates.len();
    for r in records {
        r.validate(t_max)?;
        if r.covariates.len() != p {
            return Err(Error::validation(format!(
                "subject {}: expected {} covariates, found {}",
                r.subject_id,
                p,
                r.covariates.len()
            )));
        }
    }
    let q = random.dimension();
    if let RandomDesign::Subject(z) = random {
        if z.len() != records.len() || z.iter().any(|zi| zi.len() != q) {
            return Err(Error::validation(
                "random design must provide one vector of common length per subject",
            ));
        }
        if z.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation(
                "random design contains non-finite values",
            ));
        }
    }

    let n_rows: usize = records.iter().map(SurvivalObservation::rows_at_risk).sum();
    let mut responses = Vec::with_capacity(n_rows);
    let mut risk_time = Vec::with_capacity(n_rows);
    let mut subject = Vec::with_capacity(n_rows);
    let mut subject_rows = Vec::with_capacity(records.len());
    let mut fixed = DMatrix::zeros(n_rows, p);
    let mut zmat = DMatrix::zeros(n_rows, q);

    let mut row = 0;
    for (i, rec) in records.iter().enumerate() {
        let start = row;
        for s in rec.truncation..=rec.time {
            let last = s == rec.time;
            responses.push(if last && rec.event { 1.0 } else { 0.0 });
            risk_time.push(s as usize);
            subject.push(i);
            for (j, &x) in rec.covariates.iter().enumerate() {
                fixed[(row, j)] = x;
            }
            match random {
                RandomDesign::None => {}
                RandomDesign::Intercept => zmat[(row, 0)] = 1.0,
                RandomDesign::Subject(z) => {
                    for (k, &v) in z[i].iter().enumerate() {
                        zmat[(row, k)] = v;
                    }
                }
            }
            row += 1;
        }
        subject_rows.push(start..row);
    }

    Ok(AugmentedDesign {
        responses,
        fixed,
        risk_time,
        subject,
        random: zmat,
        subject_rows,
        t_max,
    })
}

impl AugmentedDesign {
    /// Build a design from raw pseudo-rows (e.g. generic clustered binary data).
    ///
    /// `subject` must label rows with 0..n in contiguous runs; `risk_time`
    /// entries lie in 1..=t_max.
    pub fn from_parts(
        responses: Vec<f64>,
        fixed: DMatrix<f64>,
        risk_time: Vec<usize>,
        subject: Vec<usize>,
        random: DMatrix<f64>,
        t_max: usize,
    ) -> Result<Self> {
        let n_rows = responses.len();
        if fixed.nrows() != n_rows
            || risk_time.len() != n_rows
            || subject.len() != n_rows
            || random.nrows() != n_rows
        {
            return Err(Error::validation("design blocks disagree on the row count"));
        }
        if responses.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::validation("responses must be binary"));
        }
        if risk_time.iter().any(|&s| s == 0 || s > t_max) {
            return Err(Error::validation("risk time outside 1..=t_max"));
        }
        if fixed.iter().chain(random.iter()).any(|v| !v.is_finite()) {
            return Err(Error::validation("design contains non-finite values"));
        }
        let mut subject_rows: Vec<Range<usize>> = Vec::new();
        for (row, &i) in subject.iter().enumerate() {
            let seen = subject_rows.len();
            if seen > 0 && i + 1 == seen {
                subject_rows[seen - 1].end = row + 1;
            } else if i == seen {
                subject_rows.push(row..row + 1);
            } else {
                return Err(Error::validation(
                    "subject labels must be 0..n in contiguous runs",
                ));
            }
        }
        Ok(Self {
            responses,
            fixed,
            risk_time,
            subject,
            random,
            subject_rows,
            t_max,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.responses.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_rows.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.fixed.ncols()
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// Random effects per subject.
    pub fn q(&self) -> usize {
        self.random.ncols()
    }

    /// Length of the flat parameter vector (β₀, β, γ, b).
    pub fn dim(&self) -> usize {
        1 + self.n_covariates() + self.t_max + self.q() * self.n_subjects()
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn fixed_block(&self) -> &DMatrix<f64> {
        &self.fixed
    }

    pub fn risk_time(&self) -> &[usize] {
        &self.risk_time
    }

    pub fn subject_index(&self) -> &[usize] {
        &self.subject
    }

    pub fn subject_rows(&self, i: usize) -> Range<usize> {
        self.subject_rows[i].clone()
    }

    /// Compact random design: one q-vector per row.
    pub fn random_rows(&self) -> &DMatrix<f64> {
        &self.random
    }

    /// Materialized baseline indicator block A (rows × t_max).
    pub fn baseline_block(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n_rows(), self.t_max);
        for (row, &s) in self.risk_time.iter().enumerate() {
            a[(row, s - 1)] = 1.0;
        }
        a
    }

    /// Materialized block-diagonal random design Z (rows × q·n).
    pub fn random_block(&self) -> DMatrix<f64> {
        let q = self.q();
        let mut z = DMatrix::zeros(self.n_rows(), q * self.n_subjects());
        for (row, &i) in self.subject.iter().enumerate() {
            for k in 0..q {
                z[(row, i * q + k)] = self.random[(row, k)];
            }
        }
        z
    }

    /// Full design H' = [1, X, A, Z] (rows × dim), in flat parameter order.
    pub fn full_design(&self) -> DMatrix<f64> {
        let p = self.n_covariates();
        let mut h = DMatrix::zeros(self.n_rows(), self.dim());
        h.column_mut(0).fill(1.0);
        h.columns_mut(1, p).copy_from(&self.fixed);
        h.columns_mut(1 + p, self.t_max)
            .copy_from(&self.baseline_block());
        let zc = self.q() * self.n_subjects();
        h.columns_mut(1 + p + self.t_max, zc)
            .copy_from(&self.random_block());
        h
    }

    /// Covariates of each subject, taken from its first pseudo-row.
    ///
    /// Fails when covariates vary within a subject.
    pub fn subject_covariates(&self) -> Result<DMatrix<f64>> {
        let p = self.n_covariates();
        let mut out = DMatrix::zeros(self.n_subjects(), p);
        for (i, rows) in self.subject_rows.iter().enumerate() {
            for j in 0..p {
                let v = self.fixed[(rows.start, j)];
                if rows.clone().any(|r| self.fixed[(r, j)] != v) {
                    return Err(Error::validation(format!(
                        "covariate {j} varies within subject {i}"
                    )));
                }
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }

    /// Stack two designs (the second's subjects are appended).
    pub fn concat(&self, other: &AugmentedDesign) -> Result<AugmentedDesign> {
        if self.n_covariates() != other.n_covariates()
            || self.q() != other.q()
            || self.t_max != other.t_max
        {
            return Err(Error::validation("designs are not conformable"));
        }
        let n = self.n_subjects();
        let fixed = DMatrix::from_fn(
            self.n_rows() + other.n_rows(),
            self.n_covariates(),
            |r, c| {
                if r < self.n_rows() {
                    self.fixed[(r, c)]
                } else {
                    other.fixed[(r - self.n_rows(), c)]
                }
            },
        );
        let random = DMatrix::from_fn(self.n_rows() + other.n_rows(), self.q(), |r, c| {
            if r < self.n_rows() {
                self.random[(r, c)]
            } else {
                other.random[(r - self.n_rows(), c)]
            }
        });
        AugmentedDesign::from_parts(
            self.responses
                .iter()
                .chain(&other.responses)
                .copied()
                .collect(),
            fixed,
            self.risk_time
                .iter()
                .chain(&other.risk_time)
                .copied()
                .collect(),
            self.subject
                .iter()
                .copied()
                .chain(other.subject.iter().map(|i| i + n))
                .collect(),
            random,
            self.t_max,
        )
    }

    fn check_params(&self, params: &ModelParameters) -> Result<()> {
        if params.coefficients.len() != self.n_covariates()
            || params.baseline.len() != self.t_max
            || params.random_effects.len() != self.q() * self.n_subjects()
            || params.frailty_cov.nrows() != self.q()
            || params.frailty_cov.ncols() != self.q()
        {
            return Err(Error::validation(
                "parameter dimensions do not match the design",
            ));
        }
        Ok(())
    }

    /// Linear predictor η for every pseudo-row.
    pub fn linear_predictor(&self, params: &ModelParameters) -> Result<Vec<f64>> {
        self.check_params(params)?;
        Ok(self.eta_flat(&params.to_flat()))
    }

    /// η from a flat parameter vector; skips zero coefficients.
    pub(crate) fn eta_flat(&self, theta: &[f64]) -> Vec<f64> {
        let p = self.n_covariates();
        let q = self.q();
        let b0 = theta[0];
        let gamma = &theta[1 + p..1 + p + self.t_max];
        let b = &theta[1 + p + self.t_max..];
        let mut eta: Vec<f64> = (0..self.n_rows())
            .map(|row| b0 + gamma[self.risk_time[row] - 1])
            .collect();
        for j in 0..p {
            let beta = theta[1 + j];
            if beta != 0.0 {
                for (e, x) in eta.iter_mut().zip(self.fixed.column(j).iter()) {
                    *e += beta * x;
                }
            }
        }
        for k in 0..q {
            let zc = self.random.column(k);
            for (row, e) in eta.iter_mut().enumerate() {
                *e += zc[row] * b[self.subject[row] * q + k];
            }
        }
        eta
    }

    /// Binary log-likelihood log f(y | θ) of the pseudo-observations.
    pub fn log_likelihood(&self, params: &ModelParameters) -> Result<f64> {
        let eta = self.linear_predictor(params)?;
        Ok(binary_log_likelihood(&self.responses, &eta))
    }
}

/// Logistic hazard h(η) = 1 / (1 + e^{-η}), evaluated without overflow.
pub fn hazard(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// log h(η)
pub fn log_hazard(eta: f64) -> f64 {
    (-softplus(-eta)).max(LOG_FLOOR)
}

/// log(1 − h(η))
pub fn log_complement(eta: f64) -> f64 {
    (-softplus(eta)).max(LOG_FLOOR)
}

pub(crate) fn binary_log_likelihood(y: &[f64], eta: &[f64]) -> f64 {
    y.iter()
        .zip(eta)
        .map(|(&yi, &e)| {
            if yi > 0.5 {
                log_hazard(e)
            } else {
                log_complement(e)
            }
        })
        .sum()
}

/// Survivor probability S(t) = Π_{s<t} (1 − λ_s) for hazards λ_1..λ_{t−1}.
pub fn survivor(hazards: &[f64]) -> Result<f64> {
    if let Some(h) = hazards.iter().find(|h| !(0.0..=1.0).contains(*h)) {
        return Err(Error::validation(format!("hazard {h} outside [0, 1]")));
    }
    Ok(hazards.iter().map(|h| 1.0 - h).product())
}

/// Full parameter set θ = (β₀, β, γ, b) plus the frailty covariance Q.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub baseline: Vec<f64>,
    /// Subject-major: b_1 (q values), b_2, ...
    pub random_effects: Vec<f64>,
    pub frailty_cov: DMatrix<f64>,
}

impl ModelParameters {
    pub fn zeros(p: usize, t_max: usize, q: usize, n: usize) -> Self {
        Self {
            intercept: 0.0,
            coefficients: vec![0.0; p],
            baseline: vec![0.0; t_max],
            random_effects: vec![0.0; q * n],
            frailty_cov: DMatrix::zeros(q, q),
        }
    }

    /// Default starting point: intercept at the logit of the pseudo-event
    /// rate, everything else zero, Q = 0.1·I.
    pub fn null_start(design: &AugmentedDesign) -> Self {
        let rate = design.responses().iter().sum::<f64>() / design.n_rows() as f64;
        let rate = rate.clamp(1e-6, 1.0 - 1e-6);
        let q = design.q();
        let mut p = Self::zeros(
            design.n_covariates(),
            design.t_max(),
            q,
            design.n_subjects(),
        );
        p.intercept = (rate / (1.0 - rate)).ln();
        p.frailty_cov = DMatrix::identity(q, q) * 0.1;
        p
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(
            1 + self.coefficients.len() + self.baseline.len() + self.random_effects.len(),
        );
        v.push(self.intercept);
        v.extend_from_slice(&self.coefficients);
        v.extend_from_slice(&self.baseline);
        v.extend_from_slice(&self.random_effects);
        v
    }

    /// Rebuild from a flat vector, keeping this instance's shapes and Q.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let p = self.coefficients.len();
        let t = self.baseline.len();
        Self {
            intercept: flat[0],
            coefficients: flat[1..1 + p].to_vec(),
            baseline: flat[1 + p..1 + p + t].to_vec(),
            random_effects: flat[1 + p + t..].to_vec(),
            frailty_cov: self.frailty_cov.clone(),
        }
    }

    /// Indices j with β_j ≠ 0.
    pub fn active_set(&self) -> Vec<usize> {
        self.coefficients
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(j, _)| j)
            .collect()
    }
}

/// Elastic-net settings and optional coefficient groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub nu: f64,
    pub alpha: f64,
    pub nu_baseline: f64,
    /// Disjoint coefficient groups; uncovered coefficients stay ungrouped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<Vec<usize>>>,
}

/// A penalized block of coefficients with weight √m_g.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PenaltyGroup {
    pub members: Vec<usize>,
    pub weight: f64,
}

impl PenaltyConfig {
    pub fn new(nu: f64, alpha: f64, nu_baseline: f64) -> Result<Self> {
        let cfg = Self {
            nu,
            alpha,
            nu_baseline,
            groups: None,
        };
        cfg.validate_scalars()?;
        Ok(cfg)
    }

    pub fn with_groups(mut self, groups: Vec<Vec<usize>>) -> Self {
        self.groups = Some(groups);
        self
    }

    fn validate_scalars(&self) -> Result<()> {
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(Error::validation(format!(
                "nu must be finite and >= 0, got {}",
                self.nu
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::validation(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.nu_baseline >= 0.0 && self.nu_baseline.is_finite()) {
            return Err(Error::validation(format!(
                "nu_baseline must be finite and >= 0, got {}",
                self.nu_baseline
            )));
        }
        Ok(())
    }

    /// Check scalars and that groups are disjoint, nonempty and in range.
    pub fn validate(&self, p: usize) -> Result<()> {
        self.validate_scalars()?;
        if let Some(groups) = &self.groups {
            let mut seen = vec![false; p];
            for g in groups {
                if g.is_empty() {
                    return Err(Error::validation("empty coefficient group"));
                }
                for &j in g {
                    if j >= p {
                        return Err(Error::validation(format!("group index {j} out of range")));
                    }
                    if seen[j] {
                        return Err(Error::validation(format!(
                            "coefficient {j} belongs to more than one group"
                        )));
                    }
                    seen[j] = true;
                }
            }
        }
        Ok(())
    }

    /// Groups covering every coefficient; ungrouped ones become singletons.
    pub(crate) fn penalty_groups(&self, p: usize) -> Vec<PenaltyGroup> {
        let mut covered = vec![false; p];
        let mut out = Vec::new();
        if let Some(groups) = &self.groups {
            for g in groups {
                for &j in g {
                    covered[j] = true;
                }
            }
        }
        // keep coefficient order: a group is emitted at its first member
        let mut emitted = vec![false; self.groups.as_ref().map_or(0, Vec::len)];
        for j in 0..p {
            if !covered[j] {
                out.push(PenaltyGroup {
                    members: vec![j],
                    weight: 1.0,
                });
            } else if let Some(groups) = &self.groups {
                let gi = groups.iter().position(|g| g.contains(&j)).unwrap();
                if !emitted[gi] {
                    emitted[gi] = true;
                    out.push(PenaltyGroup {
                        members: groups[gi].clone(),
                        weight: (groups[gi].len() as f64).sqrt(),
                    });
                }
            }
        }
        out
    }

    /// Elastic-net (or group elastic-net) penalty on β.
    pub fn beta_penalty(&self, beta: &[f64]) -> f64 {
        self.penalty_groups(beta.len())
            .iter()
            .map(|g| {
                let sq: f64 = g.members.iter().map(|&j| beta[j] * beta[j]).sum();
                self.nu * (g.weight * self.alpha * sq.sqrt() + (1.0 - self.alpha) * sq / 2.0)
            })
            .sum()
    }
}

/// Inverse of a frailty covariance with eigenvalues floored at [`EIGEN_FLOOR`].
///
/// Returns the inverse and whether flooring was needed.
pub fn frailty_precision(q_cov: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let q = q_cov.nrows();
    if q == 0 {
        return (DMatrix::zeros(0, 0), false);
    }
    let sym = (q_cov + q_cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut degenerate = false;
    let inv_vals = DVector::from_iterator(
        q,
        eig.eigenvalues.iter().map(|&l| {
            if l < EIGEN_FLOOR {
                degenerate = true;
            }
            1.0 / l.max(EIGEN_FLOOR)
        }),
    );
    let v = &eig.eigenvectors;
    (
        v * DMatrix::from_diagonal(&inv_vals) * v.transpose(),
        degenerate,
    )
}

/// ½ Σ_i b_iᵀ Q⁻¹ b_i
pub(crate) fn frailty_quadratic(b: &[f64], q_inv: &DMatrix<f64>) -> f64 {
    let q = q_inv.nrows();
    if q == 0 {
        return 0.0;
    }
    b.chunks(q)
        .map(|bi| {
            let mut s = 0.0;
            for k in 0..q {
                for l in 0..q {
                    s += bi[k] * q_inv[(k, l)] * bi[l];
                }
            }
            s
        })
        .sum::<f64>()
        * 0.5
}

/// Laplace-approximated penalized objective
/// log f(y|θ) − ½ bᵀQ_b⁻¹b − P_ν,α(β) − ν_s‖γ‖²/2.
pub fn penalized_objective(
    design: &AugmentedDesign,
    params: &ModelParameters,
    penalty: &PenaltyConfig,
) -> Result<f64> {
    penalty.validate(design.n_covariates())?;
    let loglik = design.log_likelihood(params)?;
    let (q_inv, _) = frailty_precision(&params.frailty_cov);
    let gamma_sq: f64 = params.baseline.iter().map(|g| g * g).sum();
    let value = loglik
        - frailty_quadratic(&params.random_effects, &q_inv)
        - penalty.beta_penalty(&params.coefficients)
        - penalty.nu_baseline * gamma_sq / 2.0;
    if !value.is_finite() {
        return Err(Error::numerical("objective is not finite"));
    }
    Ok(value)
}

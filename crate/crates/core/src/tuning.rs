//! Choice of (ν, α, ν_s): permutation selection of ν inside a BIC grid.

use log::{debug, warn};
use nalgebra::DVector;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::{fit, fit_masked, FitControls, FitResult};
use crate::rng;
use crate::survival::{AugmentedDesign, ModelParameters, PenaltyConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningGrid {
    pub alphas: Vec<f64>,
    pub nu_baselines: Vec<f64>,
    /// Number of outcome permutations K.
    pub permutations: usize,
    pub seed: u64,
    /// Quantile of the K permutation entry thresholds used as ν_perm. The
    /// observed threshold is exchangeable with the permuted ones under the
    /// null, so this is roughly the probability of selecting nothing on
    /// pure-noise data.
    pub entry_quantile: f64,
    /// Optional coefficient groups for the group penalty.
    pub groups: Option<Vec<Vec<usize>>>,
}

impl Default for TuningGrid {
    fn default() -> Self {
        Self {
            alphas: vec![1.0, 0.95, 0.8, 0.7, 0.6, 0.5],
            nu_baselines: vec![15.0, 25.0, 50.0, 100.0],
            permutations: 20,
            seed: 0,
            entry_quantile: 0.9,
            groups: None,
        }
    }
}

impl TuningGrid {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.nu_baselines.is_empty() {
            return Err(Error::validation("tuning grid is empty"));
        }
        if self.alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::validation("grid alphas must lie in (0, 1]"));
        }
        if self
            .nu_baselines
            .iter()
            .any(|v| !(*v > 0.0) || !v.is_finite())
        {
            return Err(Error::validation("grid nu_baselines must be positive"));
        }
        if self.permutations == 0 {
            return Err(Error::validation("at least one permutation is required"));
        }
        if !(0.0..=1.0).contains(&self.entry_quantile) {
            return Err(Error::validation("entry_quantile must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Fit with every coefficient pinned at zero (intercept, baseline, frailty).
pub fn null_fit(
    design: &AugmentedDesign,
    nu_baseline: f64,
    init: Option<&ModelParameters>,
    controls: &FitControls,
) -> Result<FitResult> {
    let penalty = PenaltyConfig::new(0.0, 1.0, nu_baseline)?;
    fit_masked(
        design,
        &penalty,
        init,
        controls,
        vec![false; design.n_covariates()],
    )
}

/// Per-subject sums of y − λ at `params`.
pub fn subject_residuals(design: &AugmentedDesign, params: &ModelParameters) -> Result<Vec<f64>> {
    let eta = design.linear_predictor(params)?;
    let mut r = vec![0.0; design.n_subjects()];
    for ((&i, &y), e) in design
        .subject_index()
        .iter()
        .zip(design.responses())
        .zip(eta)
    {
        r[i] += y - crate::survival::hazard(e);
    }
    Ok(r)
}

/// Smallest ν at which no coefficient (group) enters, given subject-level
/// covariates `x` (n×p) and subject residual sums `resid` aligned with rows of `x`.
fn entry_threshold(
    x: &nalgebra::DMatrix<f64>,
    resid: &[f64],
    alpha: f64,
    groups: &[Vec<usize>],
) -> f64 {
    let s = x.tr_mul(&DVector::from_column_slice(resid));
    groups
        .iter()
        .map(|g| {
            let norm = g.iter().map(|&j| s[j] * s[j]).sum::<f64>().sqrt();
            norm / (alpha * (g.len() as f64).sqrt())
        })
        .fold(0.0, f64::max)
}

/// Penalty groups in coefficient order, singletons for ungrouped coefficients.
fn groups_for(p: usize, groups: Option<&[Vec<usize>]>) -> Result<Vec<Vec<usize>>> {
    let cfg = PenaltyConfig::new(0.0, 1.0, 1.0)?;
    let cfg = match groups {
        Some(g) => cfg.with_groups(g.to_vec()),
        None => cfg,
    };
    cfg.validate(p)?;
    Ok(cfg
        .penalty_groups(p)
        .into_iter()
        .map(|g| g.members)
        .collect())
}

/// Entry thresholds for explicit subject permutations.
///
/// Permuting the outcome triplets across subjects leaves the null model
/// unchanged up to relabelling, so each threshold only needs the null-fit
/// residual sums of the original data: subject i keeps its covariates and
/// receives the residual of subject `perm[i]`.
pub fn permutation_entry_thresholds(
    design: &AugmentedDesign,
    null: &ModelParameters,
    alpha: f64,
    groups: Option<&[Vec<usize>]>,
    perms: &[Vec<usize>],
) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::validation(
            "permutation selection needs alpha in (0, 1]",
        ));
    }
    let x = design.subject_covariates()?;
    let n = design.n_subjects();
    let resid = subject_residuals(design, null)?;
    let groups = groups_for(design.n_covariates(), groups)?;
    perms
        .iter()
        .map(|perm| {
            if perm.len() != n {
                return Err(Error::validation(
                    "permutation length differs from subject count",
                ));
            }
            let mut seen = vec![false; n];
            for &k in perm {
                if k >= n || std::mem::replace(&mut seen[k], true) {
                    return Err(Error::validation("not a permutation of the subjects"));
                }
            }
            let permuted: Vec<f64> = perm.iter().map(|&k| resid[k]).collect();
            Ok(entry_threshold(&x, &permuted, alpha, &groups))
        })
        .collect()
}

/// Outcome of permutation selection for one (α, ν_s) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationSelection {
    pub nu: f64,
    /// Entry threshold of each permutation.
    pub entries: Vec<f64>,
    /// Entry threshold of the observed data.
    pub observed_entry: f64,
}

/// Type-7 quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// ν_perm from `permutations` random subject permutations drawn from
/// `seed`, given a null fit at the cell's ν_s.
pub fn permutation_select_nu(
    design: &AugmentedDesign,
    null: &ModelParameters,
    alpha: f64,
    groups: Option<&[Vec<usize>]>,
    permutations: usize,
    seed: u64,
    entry_quantile: f64,
) -> Result<PermutationSelection> {
    if permutations == 0 {
        return Err(Error::validation("at least one permutation is required"));
    }
    let n = design.n_subjects();
    let perms: Vec<Vec<usize>> = (0..permutations)
        .map(|k| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng::stream(seed, k as u64));
            p
        })
        .collect();
    let entries = permutation_entry_thresholds(design, null, alpha, groups, &perms)?;
    let identity: Vec<usize> = (0..n).collect();
    let observed_entry = permutation_entry_thresholds(design, null, alpha, groups, &[identity])?[0];
    Ok(PermutationSelection {
        nu: quantile(&entries, entry_quantile),
        entries,
        observed_entry,
    })
}

/// Number of pseudo-observations, intercept, active β, baseline and
/// frailty covariance parameters enter the BIC.
pub fn bic(fit: &FitResult, design: &AugmentedDesign) -> Result<f64> {
    let loglik = design.log_likelihood(&fit.params)?;
    let q = design.q();
    let df = 1 + fit.params.active_set().len() + design.t_max() + q * (q + 1) / 2;
    Ok(-2.0 * loglik + df as f64 * (design.n_rows() as f64).ln())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub alpha: f64,
    pub nu_baseline: f64,
    pub selection: PermutationSelection,
    pub fit: FitResult,
    /// `None` when the fit did not converge.
    pub bic: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearch {
    pub best: PenaltyConfig,
    pub best_cell: usize,
    pub cells: Vec<GridCell>,
}

impl GridSearch {
    pub fn best_fit(&self) -> &FitResult {
        &self.cells[self.best_cell].fit
    }
}

/// BIC search over (ν_s, α) with ν = ν_perm(α, ν_s) in every cell.
///
/// Cells are visited with ν_s outermost; each fit is warm-started from the
/// previous cell and the null fit is shared by all α at one ν_s.
pub fn grid_search(
    design: &AugmentedDesign,
    grid: &TuningGrid,
    controls: &FitControls,
) -> Result<GridSearch> {
    grid.validate()?;
    let groups = grid.groups.as_deref();
    let mut cells = Vec::with_capacity(grid.alphas.len() * grid.nu_baselines.len());
    let mut warm: Option<ModelParameters> = None;
    let mut null_warm: Option<ModelParameters> = None;
    for (bi, &nu_s) in grid.nu_baselines.iter().enumerate() {
        let null = null_fit(design, nu_s, null_warm.as_ref(), controls)?;
        if !null.converged {
            warn!("null fit at nu_baseline {nu_s} did not converge");
        }
        null_warm = Some(null.params.clone());
        for (ai, &alpha) in grid.alphas.iter().enumerate() {
            let cell_seed = rng::derive_seed(grid.seed, (bi * grid.alphas.len() + ai) as u64);
            let selection = permutation_select_nu(
                design,
                &null.params,
                alpha,
                groups,
                grid.permutations,
                cell_seed,
                grid.entry_quantile,
            )?;
            let mut penalty = PenaltyConfig::new(selection.nu, alpha, nu_s)?;
            if let Some(g) = groups {
                penalty = penalty.with_groups(g.to_vec());
            }
            let start = if selection.nu >= selection.observed_entry {
                &null.params
            } else {
                warm.as_ref().unwrap_or(&null.params)
            };
            let result = fit(design, &penalty, Some(start), controls)?;
            let bic = if result.converged {
                Some(bic(&result, design)?)
            } else {
                None
            };
            debug!(
                "cell nu_s={nu_s} alpha={alpha}: nu={:.4} selected={} bic={bic:?}",
                selection.nu,
                result.selected.len()
            );
            if result.converged {
                warm = Some(result.params.clone());
            } else {
                warn!(
                    "cell nu_s={nu_s} alpha={alpha} did not converge; excluded from the BIC argmin"
                );
            }
            cells.push(GridCell {
                alpha,
                nu_baseline: nu_s,
                selection,
                fit: result,
                bic,
            });
        }
    }
    let best_cell = cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.bic.map(|b| (i, b)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::numerical("no grid cell converged"))?;
    Ok(GridSearch {
        best: cells[best_cell].fit.penalty.clone(),
        best_cell,
        cells,
    })
}

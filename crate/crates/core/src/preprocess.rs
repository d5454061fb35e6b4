//! Covariate preparation.
//!
//! Log-offset standardization, limit-of-detection substitution,
//! binarization, and a two-stage lipid adjustment in which a generalized
//! Box-Cox power κ is estimated from a logistic model of infertility.

use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::survival::{log_complement, log_hazard, SurvivalObservation};

/// Mean and sample standard deviation.
fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Centre and scale to unit sample variance.
pub fn standardize(values: &[f64], name: &str) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::validation(format!(
            "covariate {name}: at least two values are needed"
        )));
    }
    let (mean, sd) = mean_sd(values);
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::validation(format!(
            "covariate {name} has zero variance"
        )));
    }
    Ok(values.iter().map(|x| (x - mean) / sd).collect())
}

/// (log(1 + x) − mean) / sd.
pub fn log_offset_standardize(values: &[f64], name: &str) -> Result<Vec<f64>> {
    if let Some(i) = values.iter().position(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::validation(format!(
            "covariate {name}: value {} at row {i} is negative or not finite",
            values[i]
        )));
    }
    let logged: Vec<f64> = values.iter().map(|x| x.ln_1p()).collect();
    standardize(&logged, name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LodPolicy {
    /// Keep machine-read values below the limit.
    Wol,
    /// Replace values below the limit with LOD/√2.
    Wl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodTable {
    pub policy: LodPolicy,
    /// Limit of detection per covariate name.
    pub thresholds: std::collections::BTreeMap<String, f64>,
}

impl LodTable {
    pub fn validate(&self) -> Result<()> {
        for (name, &lod) in &self.thresholds {
            if !(lod > 0.0) || !lod.is_finite() {
                return Err(Error::validation(format!(
                    "LOD for {name} must be positive and finite"
                )));
            }
        }
        Ok(())
    }
}

/// Substitution on the raw scale, before any log transform.
pub fn apply_lod_substitution(values: &[f64], lod: f64, policy: LodPolicy) -> Vec<f64> {
    match policy {
        LodPolicy::Wol => values.to_vec(),
        LodPolicy::Wl => values
            .iter()
            .map(|&x| {
                if x < lod {
                    lod / std::f64::consts::SQRT_2
                } else {
                    x
                }
            })
            .collect(),
    }
}

pub fn binarize_nonlinear(values: &[f64], threshold: f64) -> Vec<f64> {
    values
        .iter()
        .map(|&x| if x > threshold { 1.0 } else { 0.0 })
        .collect()
}

/// (y^κ − 1)/κ, or log y at κ = 0.
pub fn boxcox(y: f64, kappa: f64) -> f64 {
    if kappa.abs() < 1e-12 {
        y.ln()
    } else {
        // expm1 keeps the small-κ branch continuous
        (kappa * y.ln()).exp_m1() / kappa
    }
}

/// BxCx(log(k_x + x) / log(1 + s), κ).
pub fn boxcox_generalized(x: f64, s: f64, kappa: f64, k_x: f64) -> Result<f64> {
    let num = (k_x + x).ln();
    if !(s > 0.0) {
        return Err(Error::validation(format!(
            "lipid value {s} must be positive"
        )));
    }
    if !(num > 0.0) || !num.is_finite() {
        return Err(Error::validation(format!(
            "log({k_x} + {x}) is not positive; the Box-Cox ratio is outside its domain"
        )));
    }
    Ok(boxcox(num / s.ln_1p(), kappa))
}

/// Offset k_x for a chemical: 1, or 1 + 1e-6 when any value is zero.
pub fn chemical_offset(chemical: &[f64]) -> Result<f64> {
    if let Some(i) = chemical.iter().position(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::validation(format!(
            "chemical value {} at row {i} is negative or not finite",
            chemical[i]
        )));
    }
    if chemical.contains(&0.0) {
        warn!("zero chemical values: Box-Cox offset raised to 1 + 1e-6");
        Ok(1.0 + 1e-6)
    } else {
        Ok(1.0)
    }
}

/// Log ratios log(log(k_x + x)/log(1 + s)); the transform only needs these.
fn log_ratios(chemical: &[f64], lipid: &[f64], k_x: f64) -> Result<Vec<f64>> {
    if chemical.len() != lipid.len() {
        return Err(Error::validation(
            "chemical and lipid vectors differ in length",
        ));
    }
    chemical
        .iter()
        .zip(lipid)
        .enumerate()
        .map(|(i, (&x, &s))| {
            boxcox_generalized(x, s, 0.0, k_x)
                .map_err(|e| Error::validation(format!("record {i}: {e}")))
        })
        .collect()
}

/// Standardized BxCx of the ratios at κ; `None` when the column is degenerate.
fn standardized_transform(log_ratio: &[f64], kappa: f64) -> Option<Vec<f64>> {
    let g: Vec<f64> = log_ratio
        .iter()
        .map(|&l| {
            if kappa.abs() < 1e-12 {
                l
            } else {
                (kappa * l).exp_m1() / kappa
            }
        })
        .collect();
    let (mean, sd) = mean_sd(&g);
    if !(sd > 0.0) || !sd.is_finite() {
        return None;
    }
    Some(g.iter().map(|v| (v - mean) / sd).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcControls {
    pub chains: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub prior_sd: f64,
    pub kappa_bounds: (f64, f64),
    /// Hold κ at this value and sample only (α₀, α₁).
    pub fix_kappa: Option<f64>,
}

impl Default for McmcControls {
    fn default() -> Self {
        Self {
            chains: 3,
            iterations: 10_000,
            burn_in: 5_000,
            seed: 0,
            prior_sd: 10.0,
            kappa_bounds: (-3.0, 3.0),
            fix_kappa: None,
        }
    }
}

impl McmcControls {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.iterations <= self.burn_in + 1 {
            return Err(Error::validation(
                "MCMC needs chains > 0 and iterations beyond burn-in",
            ));
        }
        if !(self.prior_sd > 0.0) || !(self.kappa_bounds.0 < self.kappa_bounds.1) {
            return Err(Error::validation("invalid MCMC prior settings"));
        }
        Ok(())
    }
}

/// Diagnostics of the Stage 1 sampler, with κ summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcDiagnostics {
    /// Post-adaptation acceptance rates of (α₀, α₁, κ).
    pub acceptance: [f64; 3],
    pub kappa_ess: f64,
    /// Batch-means Monte Carlo standard error of the κ posterior mean.
    pub kappa_mcse: f64,
    pub kappa_rhat: f64,
    pub kappa_sd: f64,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcomitantModel {
    pub kappa: f64,
    pub offset: f64,
    pub lipid_offset: f64,
    pub posterior_draws: Vec<f64>,
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha0_draws: Vec<f64>,
    pub alpha1_draws: Vec<f64>,
    pub diagnostics: McmcDiagnostics,
}

struct Posterior<'a> {
    log_ratio: &'a [f64],
    y: &'a [f64],
    prior_var: f64,
    bounds: (f64, f64),
}

impl Posterior<'_> {
    fn log_lik(&self, a0: f64, a1: f64, z: &[f64]) -> f64 {
        z.iter()
            .zip(self.y)
            .map(|(&zi, &yi)| {
                let eta = a0 + a1 * zi;
                if yi > 0.5 {
                    log_hazard(eta)
                } else {
                    log_complement(eta)
                }
            })
            .sum()
    }

    fn log_prior(&self, a0: f64, a1: f64) -> f64 {
        -(a0 * a0 + a1 * a1) / (2.0 * self.prior_var)
    }
}

struct Chain {
    kappa: Vec<f64>,
    alpha0: Vec<f64>,
    alpha1: Vec<f64>,
    accepted: [usize; 3],
}

const TARGET_ACCEPT: f64 = 0.44;

fn run_chain(post: &Posterior, controls: &McmcControls, seed: u64) -> Result<Chain> {
    let mut rng: ChaCha8Rng = rng::stream(seed, 0);
    let (lo, hi) = post.bounds;
    let mut kappa = match controls.fix_kappa {
        Some(k) => k,
        None => rng.random_range(lo.max(-1.0)..hi.min(1.0)),
    };
    let mut z = standardized_transform(post.log_ratio, kappa)
        .ok_or_else(|| Error::validation("transformed chemical has zero variance"))?;
    let mut a = [0.0, 0.0];
    let mut ll = post.log_lik(a[0], a[1], &z);
    let mut log_scale = [(-1.0f64), (-1.0f64), (-1.0f64)];
    let keep = controls.iterations - controls.burn_in;
    let mut out = Chain {
        kappa: Vec::with_capacity(keep),
        alpha0: Vec::with_capacity(keep),
        alpha1: Vec::with_capacity(keep),
        accepted: [0; 3],
    };
    for it in 0..controls.iterations {
        let adapting = it < controls.burn_in;
        let gain = 1.0 / ((it + 1) as f64).powf(0.6);
        for k in 0..2 {
            let step: f64 = StandardNormal.sample(&mut rng);
            let mut prop = a;
            prop[k] += log_scale[k].exp() * step;
            let ll_prop = post.log_lik(prop[0], prop[1], &z);
            let log_ratio =
                ll_prop + post.log_prior(prop[0], prop[1]) - ll - post.log_prior(a[0], a[1]);
            let accept_prob = log_ratio.min(0.0).exp();
            if rng.random::<f64>() < accept_prob {
                a = prop;
                ll = ll_prop;
                if !adapting {
                    out.accepted[k] += 1;
                }
            }
            if adapting {
                log_scale[k] += gain * (accept_prob - TARGET_ACCEPT);
            }
        }
        if controls.fix_kappa.is_none() {
            let step: f64 = StandardNormal.sample(&mut rng);
            let prop = kappa + log_scale[2].exp() * step;
            let mut accept_prob = 0.0;
            if prop > lo && prop < hi {
                if let Some(z_prop) = standardized_transform(post.log_ratio, prop) {
                    let ll_prop = post.log_lik(a[0], a[1], &z_prop);
                    accept_prob = (ll_prop - ll).min(0.0).exp();
                    if rng.random::<f64>() < accept_prob {
                        kappa = prop;
                        z = z_prop;
                        ll = ll_prop;
                        if !adapting {
                            out.accepted[2] += 1;
                        }
                    }
                }
            }
            if adapting {
                log_scale[2] += gain * (accept_prob - TARGET_ACCEPT);
            }
        }
        if !adapting {
            out.kappa.push(kappa);
            out.alpha0.push(a[0]);
            out.alpha1.push(a[1]);
        }
    }
    Ok(out)
}

pub fn median(values: &[f64]) -> f64 {
    crate::tuning::quantile(values, 0.5)
}

/// Effective sample size from one chain, summing autocorrelations
/// over the initial positive sequence of lag pairs.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return n as f64;
    }
    let acf = |lag: usize| -> f64 {
        (0..n - lag)
            .map(|i| (x[i] - mean) * (x[i + lag] - mean))
            .sum::<f64>()
            / (n as f64 * var)
    };
    let mut tau = -1.0;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = acf(lag) + acf(lag + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    n as f64 / tau.max(1.0 / n as f64)
}

/// Batch-means standard error of the mean, with ⌊√n⌋ batches.
pub fn batch_means_mcse(x: &[f64]) -> f64 {
    let n = x.len();
    let b = (n as f64).sqrt().floor() as usize;
    if b < 2 {
        return f64::NAN;
    }
    let size = n / b;
    let means: Vec<f64> = (0..b)
        .map(|k| x[k * size..(k + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let (_, sd) = mean_sd(&means);
    sd * (size as f64).sqrt() / (n as f64).sqrt()
}

/// Potential scale reduction factor across chains.
pub fn rhat(chains: &[&[f64]]) -> f64 {
    let m = chains.len();
    if m < 2 {
        return f64::NAN;
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if n < 2 {
        return f64::NAN;
    }
    let stats: Vec<(f64, f64)> = chains.iter().map(|c| mean_sd(&c[..n])).collect();
    let grand = stats.iter().map(|s| s.0).sum::<f64>() / m as f64;
    let between =
        n as f64 * stats.iter().map(|s| (s.0 - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    let within = stats.iter().map(|s| s.1 * s.1).sum::<f64>() / m as f64;
    if within == 0.0 {
        return if between == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * within + between / n as f64;
    (var_plus / within).sqrt()
}

/// Fit logit P(infertile) = α₀ + α₁·standardized g(x, s; κ) by adaptive
/// random-walk Metropolis-within-Gibbs and summarize κ by its posterior median.
pub fn fit_concomitant_stage1(
    chemical: &[f64],
    lipid: &[f64],
    infertile: &[bool],
    controls: &McmcControls,
) -> Result<ConcomitantModel> {
    controls.validate()?;
    if chemical.len() != infertile.len() || lipid.len() != infertile.len() {
        return Err(Error::validation(
            "chemical, lipid and outcome vectors differ in length",
        ));
    }
    if chemical.len() < 3 {
        return Err(Error::validation("too few records for the concomitant fit"));
    }
    let offset = chemical_offset(chemical)?;
    let log_ratio = log_ratios(chemical, lipid, offset)?;
    let y: Vec<f64> = infertile.iter().map(|&b| f64::from(u8::from(b))).collect();
    let post = Posterior {
        log_ratio: &log_ratio,
        y: &y,
        prior_var: controls.prior_sd * controls.prior_sd,
        bounds: controls.kappa_bounds,
    };
    let chains: Vec<Chain> = (0..controls.chains)
        .into_par_iter()
        .map(|c| run_chain(&post, controls, rng::derive_seed(controls.seed, c as u64)))
        .collect::<Result<_>>()?;
    let keep = (controls.iterations - controls.burn_in) as f64 * chains.len() as f64;
    let mut acceptance = [0.0; 3];
    for (k, a) in acceptance.iter_mut().enumerate() {
        *a = chains.iter().map(|c| c.accepted[k]).sum::<usize>() as f64 / keep;
    }
    let pooled = |f: fn(&Chain) -> &Vec<f64>| {
        chains
            .iter()
            .flat_map(|c| f(c).iter().copied())
            .collect::<Vec<f64>>()
    };
    let kappa_draws = pooled(|c| &c.kappa);
    let alpha0_draws = pooled(|c| &c.alpha0);
    let alpha1_draws = pooled(|c| &c.alpha1);
    let fixed = controls.fix_kappa.is_some();
    let kappa_ess = if fixed {
        f64::NAN
    } else {
        chains.iter().map(|c| effective_sample_size(&c.kappa)).sum()
    };
    let kappa_mcse = if fixed {
        f64::NAN
    } else {
        let per: Vec<f64> = chains.iter().map(|c| batch_means_mcse(&c.kappa)).collect();
        (per.iter().map(|s| s * s).sum::<f64>()).sqrt() / per.len() as f64
    };
    let kappa_rhat = if fixed {
        f64::NAN
    } else {
        rhat(
            &chains
                .iter()
                .map(|c| c.kappa.as_slice())
                .collect::<Vec<_>>(),
        )
    };
    let (_, kappa_sd) = mean_sd(&kappa_draws);
    let mut flags = Vec::new();
    let checked: &[usize] = if fixed { &[0, 1] } else { &[0, 1, 2] };
    for &k in checked {
        if acceptance[k] < 0.05 || acceptance[k] > 0.8 {
            flags.push(format!(
                "poor mixing: acceptance {:.3} for {}",
                acceptance[k],
                ["alpha0", "alpha1", "kappa"][k]
            ));
        }
    }
    if !fixed {
        let (lo, hi) = controls.kappa_bounds;
        let width = hi - lo;
        let q_lo = crate::tuning::quantile(&kappa_draws, 0.025);
        let q_hi = crate::tuning::quantile(&kappa_draws, 0.975);
        if q_lo < lo + 0.05 * width || q_hi > hi - 0.05 * width {
            flags.push(format!(
                "kappa posterior reaches the prior bounds (95% interval {q_lo:.2} to {q_hi:.2})"
            ));
        }
        let prior_sd = width / 12f64.sqrt();
        if kappa_sd > 0.8 * prior_sd {
            flags.push("kappa posterior is close to its prior".to_string());
        }
        if kappa_rhat > 1.1 {
            flags.push(format!("chains disagree: R-hat {kappa_rhat:.3}"));
        }
    }
    for f in &flags {
        warn!("concomitant fit: {f}");
    }
    Ok(ConcomitantModel {
        kappa: median(&kappa_draws),
        offset,
        lipid_offset: 1.0,
        alpha0: median(&alpha0_draws),
        alpha1: median(&alpha1_draws),
        posterior_draws: kappa_draws,
        alpha0_draws,
        alpha1_draws,
        diagnostics: McmcDiagnostics {
            acceptance,
            kappa_ess,
            kappa_mcse,
            kappa_rhat,
            kappa_sd,
            flags,
        },
    })
}

/// Standardized g(x, s; κ̂) for the survival model.
pub fn transform_stage2(
    chemical: &[f64],
    lipid: &[f64],
    model: &ConcomitantModel,
) -> Result<Vec<f64>> {
    let g = chemical
        .iter()
        .zip(lipid)
        .enumerate()
        .map(|(i, (&x, &s))| {
            boxcox_generalized(x, s, model.kappa, model.offset)
                .map_err(|e| Error::validation(format!("record {i}: {e}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    standardize(&g, "transformed chemical")
}

/// Infertility indicator from time-to-pregnancy records: `Some(true)` when
/// no pregnancy occurs within `cycles`, `None` when follow-up ends earlier
/// without pregnancy.
pub fn infertility_indicator(records: &[SurvivalObservation], cycles: u32) -> Vec<Option<bool>> {
    records
        .iter()
        .map(|r| {
            if r.event && r.time <= cycles {
                Some(false)
            } else if r.time >= cycles {
                Some(true)
            } else {
                None
            }
        })
        .collect()
}

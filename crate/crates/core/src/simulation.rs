//! Benchmark data generation and selection metrics.
//!
//! Scenario I draws two correlated blocks carrying the true signal among
//! otherwise independent uniform covariates. Scenario II adds seven grouped
//! columns (continuous, categorical dummies or a mix of both).

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::{FitControls, FitResult};
use crate::rng;
use crate::survival::{augment, hazard, RandomDesign, SurvivalObservation};
use crate::tuning::{grid_search, TuningGrid};

pub const DEFAULT_GAMMA: [f64; 10] = [
    -9.00, -7.00, -4.97, -2.82, 0.34, 1.39, 2.35, 4.27, 6.18, 8.11,
];
pub const SCENARIO_ONE_BETA: [f64; 5] = [-4.0, -4.0, -4.0, 8.0, 8.0];
pub const GROUP_ONE_BETA: [f64; 4] = [7.0, -5.0, 7.0, -4.0];
pub const GROUP_TWO_BETA: [f64; 3] = [5.0, -8.0, 3.0];
/// Entry-time distribution on {1, 2, 3} for truncated designs.
pub const TRUNCATION_PROBS: [f64; 3] = [0.6, 0.2, 0.2];
/// Censoring floor under truncation, so that L ≤ C always holds.
pub const TRUNCATED_CENSOR_FLOOR: u32 = 3;
pub const PILOT_SIZE: usize = 10_000;
pub const CALIBRATION_TOL: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub size: usize,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupType {
    Cont,
    Cat,
    Mixed,
}

/// Grouped columns placed right after the correlated blocks.
///
/// A categorical group of size m is a one-hot coding of m + 1 levels with
/// the last level as reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub kind: GroupType,
    pub betas: Vec<Vec<f64>>,
}

impl GroupSpec {
    pub fn sizes(&self) -> Vec<usize> {
        self.betas.iter().map(Vec::len).collect()
    }

    fn categorical(&self, g: usize) -> bool {
        match self.kind {
            GroupType::Cont => false,
            GroupType::Cat => true,
            GroupType::Mixed => g == 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationDesign {
    pub n: usize,
    pub p: usize,
    pub true_beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub frailty_sd: f64,
    pub censoring_level: f64,
    pub truncated: bool,
    pub blocks: Vec<Block>,
    pub group_spec: Option<GroupSpec>,
    pub seed: u64,
}

impl SimulationDesign {
    /// Two blocks (ρ = 0.7, 0.4) of three covariates; β* on the first five.
    pub fn scenario_one(n: usize, censoring_level: f64, truncated: bool, seed: u64) -> Self {
        let p = 150;
        let mut true_beta = vec![0.0; p];
        true_beta[..5].copy_from_slice(&SCENARIO_ONE_BETA);
        Self {
            n,
            p,
            true_beta,
            gamma: DEFAULT_GAMMA.to_vec(),
            frailty_sd: 1.0,
            censoring_level,
            truncated,
            blocks: vec![Block { size: 3, rho: 0.7 }, Block { size: 3, rho: 0.4 }],
            group_spec: None,
            seed,
        }
    }

    /// Scenario I plus two groups of 4 and 3 columns at indices 6..13.
    pub fn scenario_two(
        n: usize,
        kind: GroupType,
        censoring_level: f64,
        truncated: bool,
        seed: u64,
    ) -> Self {
        let mut d = Self::scenario_one(n, censoring_level, truncated, seed);
        d.true_beta[6..10].copy_from_slice(&GROUP_ONE_BETA);
        d.true_beta[10..13].copy_from_slice(&GROUP_TWO_BETA);
        d.group_spec = Some(GroupSpec {
            kind,
            betas: vec![GROUP_ONE_BETA.to_vec(), GROUP_TWO_BETA.to_vec()],
        });
        d
    }

    pub fn t_max(&self) -> usize {
        self.gamma.len()
    }

    fn block_columns(&self) -> usize {
        self.blocks.iter().map(|b| b.size).sum()
    }

    /// Column indices of each group, in order.
    pub fn group_indices(&self) -> Vec<Vec<usize>> {
        let Some(spec) = &self.group_spec else {
            return Vec::new();
        };
        let mut start = self.block_columns();
        spec.sizes()
            .into_iter()
            .map(|m| {
                let g: Vec<usize> = (start..start + m).collect();
                start += m;
                g
            })
            .collect()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.p).filter(|&j| self.true_beta[j] != 0.0).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 {
            return Err(Error::validation("simulation needs n > 0 and p > 0"));
        }
        if self.true_beta.len() != self.p {
            return Err(Error::validation("true_beta length differs from p"));
        }
        if self.gamma.is_empty() {
            return Err(Error::validation("gamma is empty"));
        }
        if self.gamma.len() < TRUNCATED_CENSOR_FLOOR as usize && self.truncated {
            return Err(Error::validation(
                "truncated designs need at least three time points",
            ));
        }
        if !(self.frailty_sd >= 0.0) || !self.frailty_sd.is_finite() {
            return Err(Error::validation("frailty_sd must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.censoring_level) {
            return Err(Error::validation("censoring_level must lie in [0, 1)"));
        }
        for b in &self.blocks {
            if !(0.0..1.0).contains(&b.rho) {
                return Err(Error::validation(format!(
                    "block correlation {} outside [0, 1)",
                    b.rho
                )));
            }
        }
        let used = self.block_columns()
            + self
                .group_spec
                .as_ref()
                .map_or(0, |g| g.sizes().iter().sum());
        if used > self.p {
            return Err(Error::validation("blocks and groups exceed p columns"));
        }
        if let Some(spec) = &self.group_spec {
            for (g, idx) in self.group_indices().iter().enumerate() {
                for (k, &j) in idx.iter().enumerate() {
                    if self.true_beta[j] != spec.betas[g][k] {
                        return Err(Error::validation("true_beta disagrees with group betas"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Multiplier of the shared latent draw giving within-block correlation ρ.
pub fn block_theta(rho: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::validation(format!(
            "block correlation {rho} outside [0, 1)"
        )));
    }
    Ok((rho / (1.0 - rho)).sqrt())
}

/// Fill the grouped columns of one subject, starting at `start`.
pub fn gen_group_covariates(spec: &GroupSpec, row: &mut [f64], start: usize, rng: &mut ChaCha8Rng) {
    let mut col = start;
    for (g, m) in spec.sizes().into_iter().enumerate() {
        if spec.categorical(g) {
            let level = rng.random_range(0..=m);
            for k in 0..m {
                row[col + k] = if k == level { 1.0 } else { 0.0 };
            }
        } else {
            for k in 0..m {
                row[col + k] = rng.random::<f64>();
            }
        }
        col += m;
    }
}

fn covariate_row(design: &SimulationDesign, thetas: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut row = vec![0.0; design.p];
    let mut col = 0;
    for (b, &theta) in design.blocks.iter().zip(thetas) {
        let shared: f64 = rng.random();
        for k in 0..b.size {
            row[col + k] = theta * shared + rng.random::<f64>();
        }
        col += b.size;
    }
    if let Some(spec) = &design.group_spec {
        gen_group_covariates(spec, &mut row, col, rng);
        col += spec.sizes().iter().sum::<usize>();
    }
    for v in &mut row[col..] {
        *v = rng.random();
    }
    row
}

/// `design.n` covariate rows as a row-major list.
pub fn gen_correlated_covariates(
    design: &SimulationDesign,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    design.validate()?;
    let thetas = design
        .blocks
        .iter()
        .map(|b| block_theta(b.rho))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..design.n)
        .map(|_| covariate_row(design, &thetas, rng))
        .collect())
}

/// Latent event time in 1..=t_max, or t_max + 1 when no event occurs.
fn latent_time(design: &SimulationDesign, x: &[f64], rng: &mut ChaCha8Rng) -> u32 {
    let lin: f64 = x.iter().zip(&design.true_beta).map(|(a, b)| a * b).sum();
    let frailty = if design.frailty_sd > 0.0 {
        Normal::new(0.0, design.frailty_sd)
            .expect("valid sd")
            .sample(rng)
    } else {
        0.0
    };
    for (t, g) in design.gamma.iter().enumerate() {
        if rng.random::<f64>() < hazard(g + lin + frailty) {
            return t as u32 + 1;
        }
    }
    design.t_max() as u32 + 1
}

fn entry_time(design: &SimulationDesign, rng: &mut ChaCha8Rng) -> u32 {
    if !design.truncated {
        return 1;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in TRUNCATION_PROBS.iter().enumerate() {
        acc += p;
        if u < acc {
            return k as u32 + 1;
        }
    }
    TRUNCATION_PROBS.len() as u32
}

/// Geometric censoring time on 1..=t_max with success probability `prob`,
/// from a single uniform so that C is monotone in `prob`.
fn censor_time(design: &SimulationDesign, prob: f64, u: f64) -> u32 {
    let t_max = design.t_max() as u32;
    let c = if prob <= 0.0 {
        t_max
    } else if prob >= 1.0 {
        1
    } else {
        let draws = ((1.0 - u).ln() / (1.0 - prob).ln()).floor();
        if draws.is_finite() && draws < t_max as f64 {
            draws as u32 + 1
        } else {
            t_max
        }
    };
    if design.truncated {
        c.max(TRUNCATED_CENSOR_FLOOR)
    } else {
        c
    }
}

/// A latent subject that survived the truncation filter.
#[derive(Debug, Clone)]
struct Latent {
    covariates: Vec<f64>,
    time: u32,
    entry: u32,
}

/// Draw subjects until `n` satisfy T ≥ L; returns them with the discard count.
fn retained_subjects(
    design: &SimulationDesign,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Latent>, usize)> {
    let thetas = design
        .blocks
        .iter()
        .map(|b| block_theta(b.rho))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(n);
    let mut discarded = 0usize;
    while out.len() < n {
        let covariates = covariate_row(design, &thetas, rng);
        let time = latent_time(design, &covariates, rng);
        let entry = entry_time(design, rng);
        if time < entry {
            discarded += 1;
            if discarded > 1000 * n.max(1) {
                return Err(Error::numerical("truncation discards almost every subject"));
            }
            continue;
        }
        out.push(Latent {
            covariates,
            time,
            entry,
        });
    }
    Ok((out, discarded))
}

fn observe(design: &SimulationDesign, s: &Latent, prob: f64, u: f64) -> (u32, bool) {
    let c = censor_time(design, prob, u);
    let t_max = design.t_max() as u32;
    if s.time <= c && s.time <= t_max {
        (s.time, true)
    } else {
        (c.min(t_max), false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CensoringCalibration {
    /// Success probability of the geometric censoring time.
    pub probability: f64,
    /// Censoring proportion achieved on the pilot.
    pub achieved: f64,
    /// False when the target lies outside the attainable range by more
    /// than the calibration tolerance; `achieved` is then the closest rate.
    pub within_tolerance: bool,
}

/// Choose the geometric censoring parameter on a pilot of `PILOT_SIZE`
/// retained subjects, by bisection with common random numbers.
///
/// The attainable range runs from administrative censoring only (C = t_max)
/// to C = 1 (or the truncation floor).
pub fn calibrate_censoring(
    design: &SimulationDesign,
    rng: &mut ChaCha8Rng,
) -> Result<CensoringCalibration> {
    design.validate()?;
    let (pilot, _) = retained_subjects(design, PILOT_SIZE, rng)?;
    let uniforms: Vec<f64> = (0..pilot.len()).map(|_| rng.random()).collect();
    let rate = |prob: f64| {
        let censored = pilot
            .iter()
            .zip(&uniforms)
            .filter(|(s, &u)| !observe(design, s, prob, u).1)
            .count();
        censored as f64 / pilot.len() as f64
    };
    let target = design.censoring_level;
    let (lo_rate, hi_rate) = (rate(0.0), rate(1.0));
    let flagged = |probability: f64, achieved: f64| {
        let within_tolerance = (achieved - target).abs() <= CALIBRATION_TOL;
        if !within_tolerance {
            warn!(
                "censoring target {target} is not attainable; closest pilot rate is {achieved:.3}"
            );
        }
        CensoringCalibration {
            probability,
            achieved,
            within_tolerance,
        }
    };
    if target <= lo_rate {
        return Ok(flagged(0.0, lo_rate));
    }
    if target >= hi_rate {
        return Ok(flagged(1.0, hi_rate));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = (0.0, lo_rate);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let r = rate(mid);
        if (r - target).abs() < (best.1 - target).abs() {
            best = (mid, r);
        }
        if r < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(flagged(best.0, best.1))
}

/// One generated data set.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub records: Vec<SurvivalObservation>,
    /// Subjects drawn and discarded because T < L.
    pub discarded: usize,
    /// Fraction of retained subjects with a censored outcome.
    pub censored_fraction: f64,
    /// Fraction of retained subjects entering after the first cycle.
    pub truncated_fraction: f64,
}

/// Generate `design.n` retained subjects with censoring parameter `prob`.
pub fn gen_survival_times(
    design: &SimulationDesign,
    prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SimulatedData> {
    design.validate()?;
    let (subjects, discarded) = retained_subjects(design, design.n, rng)?;
    let mut censored = 0usize;
    let mut late = 0usize;
    let records: Vec<SurvivalObservation> = subjects
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let (time, event) = observe(design, &s, prob, rng.random());
            censored += usize::from(!event);
            late += usize::from(s.entry > 1);
            SurvivalObservation::new(format!("s{i}"), time, s.entry, event, s.covariates)
        })
        .collect();
    let n = records.len() as f64;
    Ok(SimulatedData {
        records,
        discarded,
        censored_fraction: censored as f64 / n,
        truncated_fraction: late as f64 / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub fn_count: usize,
    pub fp_count: usize,
    pub sq_err: f64,
    pub ng_fn: usize,
    pub group_captured: Vec<bool>,
}

pub fn compute_metrics(fit: &FitResult, design: &SimulationDesign) -> Result<ReplicateMetrics> {
    metrics_for(&fit.params.coefficients, design)
}

/// Metrics of an estimated coefficient vector against the design truth.
pub fn metrics_for(beta: &[f64], design: &SimulationDesign) -> Result<ReplicateMetrics> {
    if beta.len() != design.p {
        return Err(Error::validation("estimate length differs from p"));
    }
    let groups = design.group_indices();
    let grouped = |j: usize| groups.iter().any(|g| g.contains(&j));
    let mut m = ReplicateMetrics {
        fn_count: 0,
        fp_count: 0,
        sq_err: 0.0,
        ng_fn: 0,
        group_captured: groups
            .iter()
            .map(|g| g.iter().all(|&j| beta[j] != 0.0))
            .collect(),
    };
    for (j, (&b, &t)) in beta.iter().zip(&design.true_beta).enumerate() {
        m.sq_err += (b - t).powi(2);
        if t != 0.0 && b == 0.0 {
            m.fn_count += 1;
            if !grouped(j) {
                m.ng_fn += 1;
            }
        } else if t == 0.0 && b != 0.0 {
            m.fp_count += 1;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub metrics: Option<ReplicateMetrics>,
    pub censored_fraction: f64,
    pub truncated_fraction: f64,
    pub discarded: usize,
    pub alpha: f64,
    pub nu_baseline: f64,
    pub nu: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub n: usize,
    pub replicates: usize,
    pub failures: usize,
    pub censoring_target: f64,
    pub censoring_pilot: f64,
    pub censored_mean: f64,
    pub truncated_mean: f64,
    pub discard_fraction: f64,
    pub fn_mean: f64,
    pub fn_sd: f64,
    pub fp_mean: f64,
    pub fp_sd: f64,
    pub ng_fn_mean: f64,
    pub ng_fn_sd: f64,
    pub sq_err_median: f64,
    pub sq_err_sd: f64,
    /// Percentage of replicates capturing each group.
    pub group_capture: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRun {
    pub calibration: CensoringCalibration,
    pub records: Vec<ReplicateRecord>,
    pub summary: ScenarioSummary,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    crate::tuning::quantile(v, 0.5)
}

fn run_replicate(
    design: &SimulationDesign,
    prob: f64,
    r: usize,
    grid: &TuningGrid,
    controls: &FitControls,
) -> ReplicateRecord {
    let seed = rng::derive_seed(design.seed, r as u64 + 1);
    let mut record = ReplicateRecord {
        replicate: r,
        seed,
        metrics: None,
        censored_fraction: f64::NAN,
        truncated_fraction: f64::NAN,
        discarded: 0,
        alpha: f64::NAN,
        nu_baseline: f64::NAN,
        nu: f64::NAN,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let data = gen_survival_times(design, prob, &mut rng::stream(seed, 0))?;
        record.censored_fraction = data.censored_fraction;
        record.truncated_fraction = data.truncated_fraction;
        record.discarded = data.discarded;
        let aug = augment(&data.records, design.t_max(), &RandomDesign::Intercept)?;
        let mut g = grid.clone();
        g.seed = rng::derive_seed(seed, 1);
        if design.group_spec.is_some() && g.groups.is_none() {
            g.groups = Some(design.group_indices());
        }
        let search = grid_search(&aug, &g, controls)?;
        record.alpha = search.best.alpha;
        record.nu_baseline = search.best.nu_baseline;
        record.nu = search.best.nu;
        record.metrics = Some(compute_metrics(search.best_fit(), design)?);
        Ok(())
    })();
    if let Err(e) = outcome {
        warn!("replicate {r} failed: {e}");
        record.error = Some(e.to_string());
    }
    record
}

/// Generate, tune, fit and score `replicates` data sets.
///
/// Censoring is calibrated once per design on a pilot drawn from stream 0
/// of the design seed; replicate r uses its own derived seed.
pub fn run_scenario(
    design: &SimulationDesign,
    replicates: usize,
    grid: &TuningGrid,
    controls: &FitControls,
) -> Result<ScenarioRun> {
    if replicates == 0 {
        return Err(Error::validation("at least one replicate is required"));
    }
    design.validate()?;
    grid.validate()?;
    controls.validate()?;
    let calibration = calibrate_censoring(design, &mut rng::stream(design.seed, 0))?;
    info!(
        "censoring calibrated: probability {:.4}, pilot rate {:.3}",
        calibration.probability, calibration.achieved
    );
    let records: Vec<ReplicateRecord> = (0..replicates)
        .into_par_iter()
        .map(|r| run_replicate(design, calibration.probability, r, grid, controls))
        .collect();
    let summary = summarize(design, &calibration, &records);
    Ok(ScenarioRun {
        calibration,
        records,
        summary,
    })
}

pub fn summarize(
    design: &SimulationDesign,
    calibration: &CensoringCalibration,
    records: &[ReplicateRecord],
) -> ScenarioSummary {
    let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.metrics.is_some()).collect();
    let metric = |f: &dyn Fn(&ReplicateMetrics) -> f64| -> Vec<f64> {
        ok.iter()
            .map(|r| f(r.metrics.as_ref().expect("filtered")))
            .collect()
    };
    let (fn_mean, fn_sd) = mean_sd(&metric(&|m| m.fn_count as f64));
    let (fp_mean, fp_sd) = mean_sd(&metric(&|m| m.fp_count as f64));
    let (ng_fn_mean, ng_fn_sd) = mean_sd(&metric(&|m| m.ng_fn as f64));
    let sq = metric(&|m| m.sq_err);
    let (_, sq_err_sd) = mean_sd(&sq);
    let n_groups = design.group_indices().len();
    let group_capture = (0..n_groups)
        .map(|g| 100.0 * mean_sd(&metric(&|m| f64::from(u8::from(m.group_captured[g])))).0)
        .collect();
    let generated: Vec<&ReplicateRecord> = records
        .iter()
        .filter(|r| r.censored_fraction.is_finite())
        .collect();
    let discarded: usize = generated.iter().map(|r| r.discarded).sum();
    let drawn = discarded + generated.len() * design.n;
    ScenarioSummary {
        n: design.n,
        replicates: records.len(),
        failures: records.len() - ok.len(),
        censoring_target: design.censoring_level,
        censoring_pilot: calibration.achieved,
        censored_mean: mean_sd(
            &generated
                .iter()
                .map(|r| r.censored_fraction)
                .collect::<Vec<_>>(),
        )
        .0,
        truncated_mean: mean_sd(
            &generated
                .iter()
                .map(|r| r.truncated_fraction)
                .collect::<Vec<_>>(),
        )
        .0,
        discard_fraction: if drawn > 0 {
            discarded as f64 / drawn as f64
        } else {
            f64::NAN
        },
        fn_mean,
        fn_sd,
        fp_mean,
        fp_sd,
        ng_fn_mean,
        ng_fn_sd,
        sq_err_median: median(&sq),
        sq_err_sd,
        group_capture,
    }
}

/// Per-replicate CSV: one row per replicate, group flags as grp1, grp2, ...
pub fn write_replicates_csv(
    path: &Path,
    records: &[ReplicateRecord],
    n_groups: usize,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = [
        "replicate",
        "seed",
        "fn",
        "fp",
        "sq_err",
        "ng_fn",
        "censored",
        "truncated",
        "discarded",
        "alpha",
        "nu_baseline",
        "nu",
        "error",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=n_groups).map(|g| format!("grp{g}")));
    w.write_record(&header)?;
    for r in records {
        let m = r.metrics.as_ref();
        let mut row = vec![
            r.replicate.to_string(),
            r.seed.to_string(),
            m.map_or(String::new(), |m| m.fn_count.to_string()),
            m.map_or(String::new(), |m| m.fp_count.to_string()),
            m.map_or(String::new(), |m| m.sq_err.to_string()),
            m.map_or(String::new(), |m| m.ng_fn.to_string()),
            r.censored_fraction.to_string(),
            r.truncated_fraction.to_string(),
            r.discarded.to_string(),
            r.alpha.to_string(),
            r.nu_baseline.to_string(),
            r.nu.to_string(),
            r.error.clone().unwrap_or_default(),
        ];
        row.extend(
            (0..n_groups)
                .map(|g| m.map_or(String::new(), |m| u8::from(m.group_captured[g]).to_string())),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Summary CSV in the layout n, Cn, Tr, FN (sd), FP (sd), NG_FN (sd),
/// Med_SE (sd), group capture %.
pub fn write_summary_csv(path: &Path, summary: &ScenarioSummary) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let groups: String = (1..=summary.group_capture.len())
        .map(|g| format!(",GRP{g}"))
        .collect();
    writeln!(f, "n,Cn,Tr,FN,FP,NG_FN,Med_SE{groups},failures,replicates")?;
    let pair = |m: f64, s: f64| format!("\"{m:.2} ({s:.2})\"");
    let caps: String = summary
        .group_capture
        .iter()
        .map(|c| format!(",{c:.2}"))
        .collect();
    writeln!(
        f,
        "{},{:.2},{:.2},{},{},{},{}{caps},{},{}",
        summary.n,
        summary.censored_mean,
        summary.truncated_mean,
        pair(summary.fn_mean, summary.fn_sd),
        pair(summary.fp_mean, summary.fp_sd),
        pair(summary.ng_fn_mean, summary.ng_fn_sd),
        pair(summary.sq_err_median, summary.sq_err_sd),
        summary.failures,
        summary.replicates
    )?;
    Ok(())
}

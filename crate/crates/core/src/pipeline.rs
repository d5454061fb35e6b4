//! File-level commands: preprocessing, multi-imputation fitting with
//! pooled inference, and simulation runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::{fit, refit_selected, FitControls, FitResult};
use crate::preprocess::{
    apply_lod_substitution, binarize_nonlinear, fit_concomitant_stage1, infertility_indicator,
    log_offset_standardize, transform_stage2, LodPolicy, McmcControls, McmcDiagnostics,
};
use crate::simulation::{
    run_scenario, write_replicates_csv, write_summary_csv, GroupType, ScenarioSummary,
    SimulationDesign,
};
use crate::survival::{augment, PenaltyConfig, RandomDesign, SurvivalObservation};
use crate::tuning::{grid_search, TuningGrid};

/// Normal quantile for two-sided 95% intervals.
pub const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LipidMode {
    /// Lipid enters the model as an ordinary covariate.
    #[default]
    Covariate,
    /// Lipid adjusts lipophilic chemicals through the two-stage Box-Cox
    /// transform and is dropped from the model.
    Concomitant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FrailtyKind {
    None,
    #[default]
    Intercept,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LodConfig {
    pub policy: LodPolicy,
    pub thresholds: BTreeMap<String, f64>,
}

impl Default for LodConfig {
    fn default() -> Self {
        Self {
            policy: LodPolicy::Wol,
            thresholds: BTreeMap::new(),
        }
    }
}

/// Fixed penalty values; any value given replaces tuning of that parameter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyOverrides {
    pub nu: Option<f64>,
    pub alpha: Option<f64>,
    pub nu_baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub link: String,
    /// Largest cycle; inferred from the data when absent.
    pub t_max: Option<usize>,
    pub grid: TuningGrid,
    pub penalty: PenaltyOverrides,
    pub controls: FitControls,
    pub frailty: FrailtyKind,
    /// Apply LOD, concomitant, binarization and log-offset steps before fitting.
    pub preprocess: bool,
    pub lod: LodConfig,
    pub lipid_mode: LipidMode,
    pub lipid_column: String,
    /// Chemicals transformed with the lipid in concomitant mode.
    pub lipophilic: Vec<String>,
    pub mcmc: McmcControls,
    /// Cycles without pregnancy that define infertility for the concomitant fit.
    pub infertility_cycles: u32,
    pub binarize: BTreeMap<String, f64>,
    /// Covariates passed through unchanged (already on their final scale).
    pub passthrough: Vec<String>,
    /// Minimum number of imputations selecting a covariate.
    pub selection_rule: usize,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            link: "logit".into(),
            t_max: None,
            grid: TuningGrid::default(),
            penalty: PenaltyOverrides::default(),
            controls: FitControls::default(),
            frailty: FrailtyKind::Intercept,
            preprocess: true,
            lod: LodConfig::default(),
            lipid_mode: LipidMode::Covariate,
            lipid_column: "lipid".into(),
            lipophilic: Vec::new(),
            mcmc: McmcControls::default(),
            infertility_cycles: 12,
            binarize: BTreeMap::new(),
            passthrough: Vec::new(),
            selection_rule: 6,
            seed: 0,
        }
    }
}

impl AnalysisConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.link != "logit" {
            return Err(Error::Config(format!(
                "unsupported link {:?}; only logit is available",
                self.link
            )));
        }
        if self.selection_rule == 0 {
            return Err(Error::Config("selection_rule must be at least 1".into()));
        }
        self.grid.validate()?;
        self.controls.validate()?;
        if self.lipid_mode == LipidMode::Concomitant {
            self.mcmc.validate()?;
        }
        for (name, &lod) in &self.lod.thresholds {
            if !(lod > 0.0) || !lod.is_finite() {
                return Err(Error::Config(format!("LOD for {name} must be positive")));
            }
        }
        Ok(())
    }

    /// Every covariate named in the config must be a data column.
    pub fn check_columns(&self, names: &[String]) -> Result<()> {
        let has = |c: &String| names.contains(c);
        let mut referenced: Vec<&String> = self
            .lod
            .thresholds
            .keys()
            .chain(self.binarize.keys())
            .collect();
        referenced.extend(self.passthrough.iter());
        if self.lipid_mode == LipidMode::Concomitant {
            referenced.push(&self.lipid_column);
            referenced.extend(self.lipophilic.iter());
        }
        match referenced.into_iter().find(|c| !has(c)) {
            Some(c) => Err(Error::validation(format!(
                "config references unknown covariate {c:?}"
            ))),
            None => Ok(()),
        }
    }
}

/// One survival data file: `id, time, left, status`, then covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub time: Vec<u32>,
    pub left: Vec<u32>,
    pub status: Vec<bool>,
    pub names: Vec<String>,
    /// Column-major covariates.
    pub columns: Vec<Vec<f64>>,
}

const KEY_COLUMNS: [&str; 4] = ["id", "time", "left", "status"];

impl Dataset {
    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn column(&self, name: &str) -> Option<&Vec<f64>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|j| &self.columns[j])
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let header: Vec<String> = reader
            .headers()?
            .iter()
            .map(|s| s.trim().to_string())
            .collect();
        let pos = |k: &str| header.iter().position(|h| h == k);
        let (Some(id_c), Some(time_c), Some(status_c)) = (pos("id"), pos("time"), pos("status"))
        else {
            return Err(Error::validation(format!(
                "{}: header must contain id, time and status",
                path.display()
            )));
        };
        let left_c = pos("left");
        let cov_cols: Vec<usize> = (0..header.len())
            .filter(|&j| !KEY_COLUMNS.contains(&header[j].as_str()))
            .collect();
        let mut ds = Dataset {
            ids: Vec::new(),
            time: Vec::new(),
            left: Vec::new(),
            status: Vec::new(),
            names: cov_cols.iter().map(|&j| header[j].clone()).collect(),
            columns: vec![Vec::new(); cov_cols.len()],
        };
        for (row, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = row + 2;
            let field = |j: usize| rec.get(j).unwrap_or("").trim();
            let int = |j: usize, what: &str| -> Result<u32> {
                field(j).parse::<u32>().map_err(|_| {
                    Error::validation(format!(
                        "{} line {line}: {what} {:?} is not a whole number",
                        path.display(),
                        field(j)
                    ))
                })
            };
            ds.ids.push(field(id_c).to_string());
            ds.time.push(int(time_c, "time")?);
            ds.left.push(match left_c {
                Some(j) if !field(j).is_empty() && !field(j).eq_ignore_ascii_case("na") => {
                    int(j, "left")?
                }
                _ => 1,
            });
            ds.status.push(match field(status_c) {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::validation(format!(
                        "{} line {line}: status {other:?} must be 0 or 1",
                        path.display()
                    )))
                }
            });
            for (k, &j) in cov_cols.iter().enumerate() {
                let v: f64 = field(j).parse().map_err(|_| {
                    Error::validation(format!(
                        "{} line {line}: covariate {} value {:?} is not a number",
                        path.display(),
                        header[j],
                        field(j)
                    ))
                })?;
                ds.columns[k].push(v);
            }
        }
        if ds.n() == 0 {
            return Err(Error::validation(format!(
                "{}: no data rows",
                path.display()
            )));
        }
        Ok(ds)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = KEY_COLUMNS.to_vec();
        header.extend(self.names.iter().map(String::as_str));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut row = vec![
                self.ids[i].clone(),
                self.time[i].to_string(),
                self.left[i].to_string(),
                u8::from(self.status[i]).to_string(),
            ];
            row.extend(self.columns.iter().map(|c| c[i].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn records(&self) -> Vec<SurvivalObservation> {
        (0..self.n())
            .map(|i| {
                SurvivalObservation::new(
                    self.ids[i].clone(),
                    self.time[i],
                    self.left[i],
                    self.status[i],
                    self.columns.iter().map(|c| c[i]).collect(),
                )
            })
            .collect()
    }

    fn remove_column(&mut self, name: &str) {
        if let Some(j) = self.names.iter().position(|n| n == name) {
            self.names.remove(j);
            self.columns.remove(j);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcomitantSummary {
    pub kappa: f64,
    pub offset: f64,
    pub alpha0: f64,
    pub alpha1: f64,
    pub records_used: usize,
    pub diagnostics: McmcDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnReport {
    pub name: String,
    /// "log_standardized", "binarized", "concomitant" or "passthrough".
    pub transform: String,
    pub lod_substitutions: usize,
    /// Mean and sd of log(1 + x) for log-standardized columns.
    pub log_mean: Option<f64>,
    pub log_sd: Option<f64>,
    pub threshold: Option<f64>,
    pub concomitant: Option<ConcomitantSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub lod_policy: LodPolicy,
    pub lipid_mode: LipidMode,
    pub dropped: Vec<String>,
    pub columns: Vec<ColumnReport>,
}

/// LOD substitution, then the concomitant transform, binarization and
/// log-offset standardization, column by column.
pub fn preprocess_dataset(
    data: &Dataset,
    config: &AnalysisConfig,
) -> Result<(Dataset, PreprocessReport)> {
    config.check_columns(&data.names)?;
    let mut out = data.clone();
    let mut reports: BTreeMap<String, ColumnReport> = data
        .names
        .iter()
        .map(|n| {
            (
                n.clone(),
                ColumnReport {
                    name: n.clone(),
                    transform: "log_standardized".into(),
                    lod_substitutions: 0,
                    log_mean: None,
                    log_sd: None,
                    threshold: None,
                    concomitant: None,
                },
            )
        })
        .collect();
    for (name, &lod) in &config.lod.thresholds {
        let j = out.names.iter().position(|n| n == name).expect("checked");
        let below = out.columns[j].iter().filter(|&&x| x < lod).count();
        out.columns[j] = apply_lod_substitution(&out.columns[j], lod, config.lod.policy);
        if config.lod.policy == LodPolicy::Wl {
            reports.get_mut(name).expect("known").lod_substitutions = below;
        }
    }
    let mut dropped = Vec::new();
    if config.lipid_mode == LipidMode::Concomitant {
        let lipid = out.column(&config.lipid_column).expect("checked").clone();
        let flags = infertility_indicator(&data.records(), config.infertility_cycles);
        let keep: Vec<usize> = (0..data.n()).filter(|&i| flags[i].is_some()).collect();
        if keep.len() < 3 {
            return Err(Error::validation(
                "too few subjects with a defined infertility outcome",
            ));
        }
        let infertile: Vec<bool> = keep.iter().map(|&i| flags[i].expect("kept")).collect();
        let lipid_kept: Vec<f64> = keep.iter().map(|&i| lipid[i]).collect();
        let fitted = config
            .lipophilic
            .par_iter()
            .enumerate()
            .map(|(k, name)| {
                let chem = out.column(name).expect("checked");
                let chem_kept: Vec<f64> = keep.iter().map(|&i| chem[i]).collect();
                let mcmc = McmcControls {
                    seed: crate::rng::derive_seed(config.mcmc.seed, k as u64),
                    ..config.mcmc.clone()
                };
                let model = fit_concomitant_stage1(&chem_kept, &lipid_kept, &infertile, &mcmc)
                    .map_err(|e| Error::validation(format!("{name}: {e}")))?;
                let z = transform_stage2(chem, &lipid, &model)
                    .map_err(|e| Error::validation(format!("{name}: {e}")))?;
                Ok((name.clone(), model, z))
            })
            .collect::<Result<Vec<_>>>()?;
        for (name, model, z) in fitted {
            let j = out.names.iter().position(|n| n == &name).expect("checked");
            out.columns[j] = z;
            let r = reports.get_mut(&name).expect("known");
            r.transform = "concomitant".into();
            r.concomitant = Some(ConcomitantSummary {
                kappa: model.kappa,
                offset: model.offset,
                alpha0: model.alpha0,
                alpha1: model.alpha1,
                records_used: keep.len(),
                diagnostics: model.diagnostics,
            });
        }
        out.remove_column(&config.lipid_column);
        reports.remove(&config.lipid_column);
        dropped.push(config.lipid_column.clone());
    }
    for j in 0..out.names.len() {
        let name = out.names[j].clone();
        let r = reports.get_mut(&name).expect("known");
        if r.transform == "concomitant" {
            continue;
        }
        if config.passthrough.contains(&name) {
            r.transform = "passthrough".into();
        } else if let Some(&t) = config.binarize.get(&name) {
            out.columns[j] = binarize_nonlinear(&out.columns[j], t);
            r.transform = "binarized".into();
            r.threshold = Some(t);
        } else {
            let logged: Vec<f64> = out.columns[j].iter().map(|x| x.ln_1p()).collect();
            out.columns[j] = log_offset_standardize(&out.columns[j], &name)?;
            let n = logged.len() as f64;
            let mean = logged.iter().sum::<f64>() / n;
            let sd = (logged.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            r.log_mean = Some(mean);
            r.log_sd = Some(sd);
        }
    }
    let columns = out.names.iter().map(|n| reports[n].clone()).collect();
    Ok((
        out,
        PreprocessReport {
            lod_policy: config.lod.policy,
            lipid_mode: config.lipid_mode,
            dropped,
            columns,
        },
    ))
}

pub fn command_preprocess(
    data: &Path,
    config: &AnalysisConfig,
    out: &Path,
    report: &Path,
) -> Result<PreprocessReport> {
    let ds = Dataset::read(data)?;
    let (transformed, rep) = preprocess_dataset(&ds, config)?;
    transformed.write(out)?;
    std::fs::write(report, serde_json::to_string_pretty(&rep)? + "\n")?;
    Ok(rep)
}

/// Rubin's rule for one scalar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pooled {
    pub estimate: f64,
    /// Mean within-imputation variance W̄.
    pub within: f64,
    /// Between-imputation variance B.
    pub between: f64,
    /// W̄ + (1 + 1/m) B.
    pub total: f64,
}

pub fn rubin_pool(estimates: &[f64], variances: &[f64]) -> Result<Pooled> {
    let m = estimates.len();
    if m == 0 || variances.len() != m {
        return Err(Error::validation("pooling needs one variance per estimate"));
    }
    let mf = m as f64;
    // deviations from the first estimate keep identical imputations exact
    let shift = estimates[0];
    let dev: Vec<f64> = estimates.iter().map(|e| e - shift).collect();
    let mean_dev = dev.iter().sum::<f64>() / mf;
    let estimate = shift + mean_dev;
    let within = variances.iter().sum::<f64>() / mf;
    let between = if m > 1 {
        dev.iter().map(|d| (d - mean_dev).powi(2)).sum::<f64>() / (mf - 1.0)
    } else {
        0.0
    };
    Ok(Pooled {
        estimate,
        within,
        between,
        total: within + (1.0 + 1.0 / mf) * between,
    })
}

/// Two decimals with trailing zeros dropped: 0.70 → "0.7", 1.00 → "1".
fn trim2(x: f64) -> String {
    let s = format!("{x:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

/// Odds ratio with its interval, e.g. "0.82 (0.7, 0.95)".
pub fn format_odds_ratio(or: f64, lo: f64, hi: f64) -> String {
    format!("{} ({}, {})", trim2(or), trim2(lo), trim2(hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledTerm {
    pub name: String,
    pub pooled: Pooled,
    pub odds_ratio: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub formatted: String,
    pub per_imputation: Vec<f64>,
    pub per_imputation_variance: Vec<f64>,
}

impl PooledTerm {
    fn new(name: String, estimates: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let pooled = rubin_pool(&estimates, &variances)?;
        let half = Z_975 * pooled.total.sqrt();
        let (or, lo, hi) = (
            pooled.estimate.exp(),
            (pooled.estimate - half).exp(),
            (pooled.estimate + half).exp(),
        );
        Ok(Self {
            name,
            pooled,
            odds_ratio: or,
            ci_lower: lo,
            ci_upper: hi,
            formatted: format_odds_ratio(or, lo, hi),
            per_imputation: estimates,
            per_imputation_variance: variances,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationSummary {
    pub file: String,
    pub alpha: f64,
    pub nu: f64,
    pub nu_baseline: f64,
    pub converged: bool,
    pub selected: Vec<String>,
    pub refit_converged: bool,
    pub frailty_variance: Option<f64>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub name: String,
    pub count: usize,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub imputations: Vec<ImputationSummary>,
    pub selection_rule: usize,
    pub selection: Vec<SelectionRow>,
    pub retained: Vec<String>,
    /// Intercept first, then retained covariates.
    pub pooled: Vec<PooledTerm>,
    pub warnings: Vec<String>,
    pub notes: Vec<String>,
}

fn t_max_for(data: &[Dataset], config: &AnalysisConfig) -> Result<usize> {
    let observed = data
        .iter()
        .flat_map(|d| d.time.iter())
        .copied()
        .max()
        .unwrap_or(0) as usize;
    match config.t_max {
        Some(t) if t < observed => Err(Error::validation(format!(
            "t_max {t} is below the largest time {observed}"
        ))),
        Some(t) => Ok(t),
        None => Ok(observed),
    }
}

fn random_design(config: &AnalysisConfig) -> RandomDesign {
    match config.frailty {
        FrailtyKind::None => RandomDesign::None,
        FrailtyKind::Intercept => RandomDesign::Intercept,
    }
}

/// Penalized selection on one prepared data set.
fn select_one(
    data: &Dataset,
    t_max: usize,
    config: &AnalysisConfig,
    seed: u64,
) -> Result<FitResult> {
    let design = augment(&data.records(), t_max, &random_design(config))?;
    let o = &config.penalty;
    if let (Some(nu), Some(alpha), Some(nu_s)) = (o.nu, o.alpha, o.nu_baseline) {
        return fit(
            &design,
            &PenaltyConfig::new(nu, alpha, nu_s)?,
            None,
            &config.controls,
        );
    }
    let mut grid = config.grid.clone();
    grid.seed = seed;
    if let Some(a) = o.alpha {
        grid.alphas = vec![a];
    }
    if let Some(v) = o.nu_baseline {
        grid.nu_baselines = vec![v];
    }
    let search = grid_search(&design, &grid, &config.controls)?;
    match o.nu {
        Some(nu) => {
            let best = &search.best;
            fit(
                &design,
                &PenaltyConfig::new(nu, best.alpha, best.nu_baseline)?,
                None,
                &config.controls,
            )
        }
        None => Ok(search.best_fit().clone()),
    }
}

/// CSV files of a directory, sorted by name; a single file is accepted too.
pub fn imputation_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::validation(format!(
            "no CSV files in {}",
            path.display()
        )));
    }
    Ok(files)
}

/// Select per imputation, keep covariates chosen often enough, refit each
/// imputation on them and pool by Rubin's rule.
pub fn fit_imputations(files: &[PathBuf], config: &AnalysisConfig) -> Result<FitReport> {
    config.validate()?;
    let raw: Vec<Dataset> = files
        .iter()
        .map(|f| Dataset::read(f))
        .collect::<Result<_>>()?;
    for (f, d) in files.iter().zip(&raw).skip(1) {
        if d.names != raw[0].names || d.n() != raw[0].n() {
            return Err(Error::validation(format!(
                "{} differs from {} in header or row count",
                f.display(),
                files[0].display()
            )));
        }
    }
    let prepared: Vec<Dataset> = if config.preprocess {
        raw.iter()
            .map(|d| preprocess_dataset(d, config).map(|p| p.0))
            .collect::<Result<_>>()?
    } else {
        config.check_columns(&raw[0].names)?;
        raw
    };
    let names = prepared[0].names.clone();
    let t_max = t_max_for(&prepared, config)?;
    let m = prepared.len();
    let selections: Vec<FitResult> = prepared
        .par_iter()
        .enumerate()
        .map(|(k, d)| {
            select_one(
                d,
                t_max,
                config,
                crate::rng::derive_seed(config.seed, k as u64),
            )
        })
        .collect::<Result<_>>()?;
    let rule = config.selection_rule.min(m);
    let mut warnings = Vec::new();
    if rule < config.selection_rule {
        warnings.push(format!(
            "only {m} imputations: selection rule lowered to {rule}"
        ));
    }
    let counts: Vec<usize> = (0..names.len())
        .map(|j| {
            selections
                .iter()
                .filter(|s| s.selected.contains(&j))
                .count()
        })
        .collect();
    let retained: Vec<usize> = (0..names.len()).filter(|&j| counts[j] >= rule).collect();
    if retained.is_empty() {
        warnings.push(format!(
            "no covariate was selected in at least {rule} imputations; intercept-only refit"
        ));
    }
    let refits: Vec<FitResult> = prepared
        .par_iter()
        .zip(&selections)
        .map(|(d, sel)| {
            let design = augment(&d.records(), t_max, &random_design(config))?;
            refit_selected(
                &design,
                &retained,
                sel.penalty.nu_baseline,
                None,
                &config.controls,
            )
        })
        .collect::<Result<_>>()?;
    let mut pooled = Vec::with_capacity(retained.len() + 1);
    let intercept_var = refits
        .iter()
        .map(|r| {
            r.intercept_variance()
                .ok_or_else(|| Error::numerical("refit produced no covariance"))
        })
        .collect::<Result<Vec<f64>>>()?;
    pooled.push(PooledTerm::new(
        "(Intercept)".into(),
        refits.iter().map(|r| r.params.intercept).collect(),
        intercept_var,
    )?);
    for &j in &retained {
        let vars = refits
            .iter()
            .map(|r| {
                r.coefficient_variances()
                    .and_then(|v| v.into_iter().find(|(k, _)| *k == j).map(|(_, v)| v))
                    .ok_or_else(|| Error::numerical(format!("no variance for {}", names[j])))
            })
            .collect::<Result<Vec<f64>>>()?;
        pooled.push(PooledTerm::new(
            names[j].clone(),
            refits.iter().map(|r| r.params.coefficients[j]).collect(),
            vars,
        )?);
    }
    for (k, r) in refits.iter().enumerate() {
        if !r.converged {
            warnings.push(format!("refit of imputation {k} did not converge"));
        }
        warnings.extend(r.diagnostics.iter().map(|d| format!("imputation {k}: {d}")));
    }
    for w in &warnings {
        warn!("{w}");
    }
    let imputations = files
        .iter()
        .zip(selections.iter().zip(&refits))
        .map(|(f, (s, r))| ImputationSummary {
            file: f.file_name().map_or_else(
                || f.display().to_string(),
                |n| n.to_string_lossy().into_owned(),
            ),
            alpha: s.penalty.alpha,
            nu: s.penalty.nu,
            nu_baseline: s.penalty.nu_baseline,
            converged: s.converged,
            selected: s.selected.iter().map(|&j| names[j].clone()).collect(),
            refit_converged: r.converged,
            frailty_variance: (r.params.frailty_cov.nrows() > 0)
                .then(|| r.params.frailty_cov[(0, 0)]),
            diagnostics: s.diagnostics.clone(),
        })
        .collect();
    info!("retained {} of {} covariates", retained.len(), names.len());
    Ok(FitReport {
        imputations,
        selection_rule: rule,
        selection: names
            .iter()
            .zip(&counts)
            .map(|(n, &c)| SelectionRow {
                name: n.clone(),
                count: c,
                retained: c >= rule,
            })
            .collect(),
        retained: retained.iter().map(|&j| names[j].clone()).collect(),
        pooled,
        warnings,
        notes: vec![
            "95% intervals use the normal approximation on the log-odds scale with the Rubin total variance.".into(),
            "The intercept odds ratio is exp(β₀) with all covariates at zero (their standardized mean).".into(),
        ],
    })
}

pub fn command_fit(data: &Path, config: &AnalysisConfig, out: &Path) -> Result<FitReport> {
    let report = fit_imputations(&imputation_files(data)?, config)?;
    std::fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    #[default]
    One,
    Two,
}

/// Simulation settings; `design` replaces the named scenario entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    pub n: usize,
    pub censoring: f64,
    pub truncated: bool,
    pub group_type: GroupType,
    pub design: Option<SimulationDesign>,
    pub grid: TuningGrid,
    pub controls: FitControls,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::One,
            n: 250,
            censoring: 0.2,
            truncated: true,
            group_type: GroupType::Cat,
            design: None,
            grid: TuningGrid::default(),
            controls: FitControls::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn design(&self, seed: u64) -> SimulationDesign {
        let mut d = match (&self.design, self.scenario) {
            (Some(d), _) => d.clone(),
            (None, ScenarioKind::One) => {
                SimulationDesign::scenario_one(self.n, self.censoring, self.truncated, seed)
            }
            (None, ScenarioKind::Two) => SimulationDesign::scenario_two(
                self.n,
                self.group_type,
                self.censoring,
                self.truncated,
                seed,
            ),
        };
        d.seed = seed;
        d
    }
}

/// Run a scenario and write `replicates.csv`, `summary.csv` and `summary.json`.
pub fn command_simulate(
    config: &ScenarioConfig,
    replicates: usize,
    seed: u64,
    out: &Path,
) -> Result<ScenarioSummary> {
    let design = config.design(seed);
    let run = run_scenario(&design, replicates, &config.grid, &config.controls)?;
    std::fs::create_dir_all(out)?;
    let groups = design.group_indices().len();
    write_replicates_csv(&out.join("replicates.csv"), &run.records, groups)?;
    write_summary_csv(&out.join("summary.csv"), &run.summary)?;
    let json = serde_json::json!({ "calibration": run.calibration, "summary": run.summary });
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&json)? + "\n",
    )?;
    Ok(run.summary)
}

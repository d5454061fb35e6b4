//! Acceptance suite. Every criterion prints one PASS or FAIL line to stdout
//! (uncaptured) and then asserts on the same verdict.

mod common;

use std::io::Write;

use common::{clustered_logistic, concomitant_data, design, quadrature_variance, DenseObjective};
use discsurv::optimizer::{fisher_matrix, fit, score_vector, FitControls, FitResult};
use discsurv::pipeline::{fit_imputations, imputation_files, rubin_pool, AnalysisConfig};
use discsurv::preprocess::{fit_concomitant_stage1, McmcControls};
use discsurv::rng;
use discsurv::simulation::{
    calibrate_censoring, gen_survival_times, run_scenario, GroupType, ScenarioSummary,
    SimulationDesign,
};
use discsurv::survival::{
    augment, hazard, AugmentedDesign, ModelParameters, PenaltyConfig, RandomDesign,
    SurvivalObservation,
};
use discsurv::tuning::{grid_search, TuningGrid};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const KKT_TOL: f64 = 1e-5;

fn verdict(name: &str, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let tag = if pass { "PASS" } else { "FAIL" };
    writeln!(out, "{tag} {name}: {detail}").unwrap();
    out.flush().unwrap();
}

fn random_params(d: &AugmentedDesign, rng: &mut ChaCha8Rng, q_var: f64) -> ModelParameters {
    let mut p = ModelParameters::zeros(d.n_covariates(), d.t_max(), d.q(), d.n_subjects());
    p.intercept = rng.random_range(-2.5..-0.5);
    for b in p.coefficients.iter_mut() {
        // bounded away from the kink at zero
        *b = rng.random_range(0.1..0.8) * if rng.random::<bool>() { 1.0 } else { -1.0 };
    }
    for g in p.baseline.iter_mut() {
        *g = rng.random_range(-0.5..0.5);
    }
    for b in p.random_effects.iter_mut() {
        *b = rng.random_range(-0.8..0.8);
    }
    p.frailty_cov = DMatrix::identity(d.q(), d.q()) * q_var;
    p
}

#[test]
fn gradient_and_fisher_match_finite_differences() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_score, mut worst_fisher) = (0.0f64, 0.0f64);
    for inst in 0..50u64 {
        let n = rng.random_range(8..=30);
        let p = rng.random_range(1..=8);
        let beta: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = design(n, &beta, 0.8, 1000 + inst, RandomDesign::Intercept);
        let q_var = rng.random_range(0.3..2.0);
        let params = random_params(&d, &mut rng, q_var);
        let flat = params.to_flat();

        let s = score_vector(&d, &params).unwrap();
        let h = 1e-5;
        for k in 0..flat.len() {
            let mut up = flat.clone();
            let mut dn = flat.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (d.log_likelihood(&params.with_flat(&up)).unwrap()
                - d.log_likelihood(&params.with_flat(&dn)).unwrap())
                / (2.0 * h);
            worst_score = worst_score.max((fd - s[k]).abs() / fd.abs().max(1.0));
        }

        let pen = PenaltyConfig::new(rng.random_range(0.5..5.0), rng.random_range(0.2..1.0), 3.0)
            .unwrap();
        let f = fisher_matrix(&d, &params, &pen).unwrap();
        let signs: Vec<f64> = params.coefficients.iter().map(|b| b.signum()).collect();
        let dense = DenseObjective::new(
            &d,
            pen.nu,
            pen.alpha,
            pen.nu_baseline,
            DMatrix::from_element(1, 1, 1.0 / q_var),
            signs,
        );
        for k in 0..flat.len() {
            let mut up = DVector::from_column_slice(&flat);
            let mut dn = up.clone();
            up[k] += h;
            dn[k] -= h;
            let col = (dense.value_grad(&up).1 - dense.value_grad(&dn).1) / (2.0 * h);
            for r in 0..flat.len() {
                let expect = -col[r];
                worst_fisher = worst_fisher.max((f[(r, k)] - expect).abs() / expect.abs().max(1.0));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_score < 1e-6 && worst_fisher < 1e-4 && secs < 60.0;
    verdict(
        "gradient/hessian",
        pass,
        &format!("50 instances, max score rel err {worst_score:.2e} (< 1e-6), max Fisher rel err {worst_fisher:.2e} (< 1e-4), {secs:.1}s"),
    );
    assert!(pass);
}

/// Product-form discrete survival log-likelihood, evaluated directly from
/// the subject records without the pseudo-row expansion.
fn direct_loglik(recs: &[SurvivalObservation], params: &ModelParameters) -> f64 {
    let mut total = 0.0;
    for (i, r) in recs.iter().enumerate() {
        let lin = params.intercept
            + r.covariates
                .iter()
                .zip(&params.coefficients)
                .map(|(x, b)| x * b)
                .sum::<f64>()
            + params.random_effects[i];
        let mut surv = 1.0;
        for s in r.truncation..r.time {
            surv *= 1.0 - hazard(lin + params.baseline[s as usize - 1]);
        }
        let h = hazard(lin + params.baseline[r.time as usize - 1]);
        let last = if r.event { h } else { 1.0 - h };
        total += (surv * last).ln();
    }
    total
}

#[test]
fn augmented_likelihood_equals_product_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for ds in 0..100u64 {
        let n = rng.random_range(5..=60);
        let p = rng.random_range(1..=6);
        let t_max = rng.random_range(3..=12u32);
        let recs: Vec<SurvivalObservation> = (0..n)
            .map(|i| {
                let time = rng.random_range(1..=t_max);
                let left = rng.random_range(1..=time);
                let x = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
                SurvivalObservation::new(format!("d{ds}s{i}"), time, left, rng.random::<bool>(), x)
            })
            .collect();
        let d = augment(&recs, t_max as usize, &RandomDesign::Intercept).unwrap();
        let mut params = ModelParameters::zeros(p, t_max as usize, 1, n);
        params.intercept = rng.random_range(-2.0..0.0);
        for v in params
            .coefficients
            .iter_mut()
            .chain(params.baseline.iter_mut())
        {
            *v = rng.random_range(-1.0..1.0);
        }
        for b in params.random_effects.iter_mut() {
            *b = rng.random_range(-1.0..1.0);
        }
        let aug = d.log_likelihood(&params).unwrap();
        worst = worst.max((aug - direct_loglik(&recs, &params)).abs());
    }
    let pass = worst < 1e-10;
    verdict(
        "augmentation oracle",
        pass,
        &format!("100 datasets, max |difference| {worst:.2e} (< 1e-10)"),
    );
    assert!(pass);
}

/// Largest KKT violation over β: stationarity on the active set and the
/// subgradient bound on the inactive set, scalar or grouped.
fn kkt_violation(d: &AugmentedDesign, res: &FitResult) -> f64 {
    let pen = &res.penalty;
    let s = score_vector(d, &res.params).unwrap();
    let beta = &res.params.coefficients;
    let ridge = pen.nu * (1.0 - pen.alpha);
    let l1 = pen.nu * pen.alpha;
    let mut worst = 0.0f64;
    let groups: Vec<Vec<usize>> = match &pen.groups {
        Some(g) => g.clone(),
        None => Vec::new(),
    };
    let grouped: Vec<bool> = (0..beta.len())
        .map(|j| groups.iter().any(|g| g.contains(&j)))
        .collect();
    for g in &groups {
        let thr = l1 * (g.len() as f64).sqrt();
        let norm = g.iter().map(|&j| beta[j] * beta[j]).sum::<f64>().sqrt();
        if norm > 0.0 {
            for &j in g {
                worst = worst.max((s[1 + j] - ridge * beta[j] - thr * beta[j] / norm).abs());
            }
        } else {
            let sn = g.iter().map(|&j| s[1 + j] * s[1 + j]).sum::<f64>().sqrt();
            worst = worst.max(sn - thr);
        }
    }
    for (j, &b) in beta.iter().enumerate() {
        if grouped[j] {
            continue;
        }
        if b != 0.0 {
            worst = worst.max((s[1 + j] - ridge * b - l1 * b.signum()).abs());
        } else {
            worst = worst.max(s[1 + j].abs() - l1);
        }
    }
    worst
}

#[test]
fn converged_fits_are_kkt_certified() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut checked, mut worst) = (0usize, f64::NEG_INFINITY);
    let mut unconverged = 0usize;
    let controls = FitControls::default();
    for inst in 0..30u64 {
        let p = rng.random_range(4..=8);
        let beta: Vec<f64> = (0..p)
            .map(|j| {
                if j < 3 {
                    rng.random_range(-1.2..1.2)
                } else {
                    0.0
                }
            })
            .collect();
        let d = design(
            rng.random_range(80..=160),
            &beta,
            0.7,
            3000 + inst,
            RandomDesign::Intercept,
        );
        let alpha = [1.0, 0.7, 0.4][inst as usize % 3];
        let mut pen = PenaltyConfig::new(rng.random_range(2.0..10.0), alpha, 10.0).unwrap();
        if inst % 2 == 1 {
            pen = pen.with_groups(vec![(0..3).collect(), (3..p).collect()]);
        }
        let res = fit(&d, &pen, None, &controls).unwrap();
        if res.converged {
            checked += 1;
            worst = worst.max(kkt_violation(&d, &res));
        } else {
            unconverged += 1;
        }
    }
    // every converged cell of a full tuning grid on benchmark data
    for seed in [1u64, 2] {
        let sim = SimulationDesign::scenario_two(150, GroupType::Mixed, 0.35, true, seed);
        let cal = calibrate_censoring(&sim, &mut rng::stream(seed, 0)).unwrap();
        let data = gen_survival_times(&sim, cal.probability, &mut rng::stream(seed, 1)).unwrap();
        let d = augment(&data.records, sim.t_max(), &RandomDesign::Intercept).unwrap();
        for groups in [None, Some(sim.group_indices())] {
            let grid = TuningGrid {
                seed,
                groups,
                ..TuningGrid::default()
            };
            for cell in grid_search(&d, &grid, &controls).unwrap().cells {
                if cell.fit.converged {
                    checked += 1;
                    worst = worst.max(kkt_violation(&d, &cell.fit));
                } else {
                    unconverged += 1;
                }
            }
        }
    }
    let pass = checked > 0 && worst < KKT_TOL;
    verdict(
        "KKT certification",
        pass,
        &format!("{checked} converged fits ({unconverged} not converged), max violation {worst:.2e} (< {KKT_TOL:e})"),
    );
    assert!(pass);
}

fn scenario(d: &SimulationDesign, replicates: usize) -> ScenarioSummary {
    let run = run_scenario(
        d,
        replicates,
        &TuningGrid::default(),
        &FitControls::default(),
    )
    .unwrap();
    run.summary
}

fn describe(s: &ScenarioSummary) -> String {
    format!(
        "n={} Cn={:.3} Tr={:.2} FN={:.2} FP={:.2} Med_SE={:.2} GRP={:?} failures={}/{}",
        s.n,
        s.censored_mean,
        s.truncated_mean,
        s.fn_mean,
        s.fp_mean,
        s.sq_err_median,
        s.group_capture,
        s.failures,
        s.replicates
    )
}

#[test]
fn selection_accuracy_at_n250_light_censoring() {
    let s = scenario(&SimulationDesign::scenario_one(250, 0.2, true, 2002), 100);
    let fn_ok = s.fn_mean <= 0.05;
    let fp_ok = s.fp_mean <= 0.15;
    let se_ok = (85.0..=105.0).contains(&s.sq_err_median);
    let pass = fn_ok && fp_ok && se_ok && s.failures == 0;
    verdict(
        "selection accuracy n=250 Cn 0.2",
        pass,
        &format!(
            "{} | FN<=0.05 {} FP<=0.15 {} Med_SE in [85,105] {}",
            describe(&s),
            fn_ok,
            fp_ok,
            se_ok
        ),
    );
    assert!(pass);
}

#[test]
fn false_negatives_grow_with_censoring_and_shrink_with_n() {
    let fns: Vec<ScenarioSummary> = [0.2, 0.35, 0.5]
        .iter()
        .enumerate()
        .map(|(k, &cn)| {
            scenario(
                &SimulationDesign::scenario_one(150, cn, true, 3003 + k as u64),
                100,
            )
        })
        .collect();
    let big = scenario(&SimulationDesign::scenario_one(250, 0.5, true, 3010), 100);
    let monotone = fns[0].fn_mean <= fns[1].fn_mean && fns[1].fn_mean <= fns[2].fn_mean;
    let by_n = fns[2].fn_mean >= big.fn_mean;
    let pass = monotone && by_n;
    let detail: Vec<String> = fns
        .iter()
        .chain(std::iter::once(&big))
        .map(describe)
        .collect();
    verdict(
        "FN monotonicity",
        pass,
        &format!(
            "nondecreasing in Cn {monotone}, FN(150) >= FN(250) at Cn 0.5 {by_n} | {}",
            detail.join(" | ")
        ),
    );
    assert!(pass);
}

#[test]
fn group_capture_categorical_and_mixed() {
    let cat = scenario(
        &SimulationDesign::scenario_two(250, GroupType::Cat, 0.2, true, 4004),
        50,
    );
    let mixed = scenario(
        &SimulationDesign::scenario_two(150, GroupType::Mixed, 0.5, true, 4005),
        50,
    );
    let cat_ok = cat.group_capture.iter().all(|&c| c >= 95.0);
    let mixed_ok = mixed.group_capture[1] < 60.0;
    let pass = cat_ok && mixed_ok;
    verdict(
        "group capture",
        pass,
        &format!(
            "cat both >= 95% {cat_ok} | {} || mixed GRP2 < 60% {mixed_ok} | {}",
            describe(&cat),
            describe(&mixed)
        ),
    );
    assert!(pass);
}

#[test]
fn em_recovers_frailty_variance() {
    let pen = PenaltyConfig::new(0.0, 1.0, 1e-6).unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    for r in 0..20u64 {
        let (d, groups) = clustered_logistic(500, 10, 1.0, 5000 + r);
        let res = fit(&d, &pen, None, &FitControls::default()).unwrap();
        let q = res.params.frailty_cov[(0, 0)];
        let oracle = quadrature_variance(&groups);
        let ok = res.converged && (0.5..=1.7).contains(&q) && (q - oracle).abs() <= 0.3;
        pass &= ok;
        lines.push(format!("{q:.3}/{oracle:.3}{}", if ok { "" } else { "!" }));
    }
    verdict(
        "EM frailty recovery",
        pass,
        &format!(
            "20 replicates, Q in [0.5,1.7] and |Q - quadrature| <= 0.3; Q/oracle: {}",
            lines.join(" ")
        ),
    );
    assert!(pass);
}

#[test]
fn permutation_tuning_is_calibrated_under_the_null() {
    let mut d = SimulationDesign::scenario_one(250, 0.2, true, 6006);
    d.true_beta = vec![0.0; d.p];
    let run = run_scenario(&d, 50, &TuningGrid::default(), &FitControls::default()).unwrap();
    let empty = run
        .records
        .iter()
        .filter(|r| r.metrics.as_ref().is_some_and(|m| m.fp_count == 0))
        .count();
    let failures = run.summary.failures;
    let pass = empty * 100 >= 80 * run.records.len();
    verdict(
        "null calibration",
        pass,
        &format!(
            "{empty}/{} pure-noise datasets select nothing (>= 80%), K=20, {failures} failed fits",
            run.records.len()
        ),
    );
    assert!(pass);
}

#[test]
fn concomitant_stage1_recovers_kappa() {
    let mut pass = true;
    let mut detail = Vec::new();
    for kappa in [-1.0, 0.0, 1.0] {
        let mut hits = 0;
        let mut meds = Vec::new();
        for seed in 0..5u64 {
            let (x, s, y) = concomitant_data(
                2000,
                kappa,
                -0.5,
                1.5,
                7000 + seed + (kappa as i64 + 1) as u64 * 10,
            );
            let m = fit_concomitant_stage1(
                &x,
                &s,
                &y,
                &McmcControls {
                    seed,
                    ..McmcControls::default()
                },
            )
            .unwrap();
            if (m.kappa - kappa).abs() <= 0.5 {
                hits += 1;
            }
            let acc_ok = m
                .diagnostics
                .acceptance
                .iter()
                .all(|a| (0.1..=0.6).contains(a));
            pass &= acc_ok;
            meds.push(format!(
                "{:.2}[{}]{}",
                m.kappa,
                m.diagnostics
                    .acceptance
                    .map(|a| format!("{a:.2}"))
                    .join(","),
                if acc_ok { "" } else { "!" }
            ));
        }
        pass &= hits >= 4;
        detail.push(format!(
            "kappa {kappa}: {hits}/5 within 0.5, medians {}",
            meds.join(" ")
        ));
    }
    verdict("concomitant stage 1", pass, &detail.join(" | "));
    assert!(pass);
}

#[test]
fn rubin_pooling_identities() {
    let same = rubin_pool(&[0.731; 5], &[0.04, 0.05, 0.03, 0.06, 0.02]).unwrap();
    let identical_ok = same.between == 0.0 && same.total == same.within && same.estimate == 0.731;
    // (estimates, variances, W̄, B)
    let fixtures: [([f64; 3], [f64; 3], f64, f64); 3] = [
        ([1.0, 2.0, 3.0], [0.25, 0.5, 0.75], 0.5, 1.0),
        ([-0.5, 0.5, 1.5], [1.0, 1.0, 1.0], 1.0, 1.0),
        ([2.0, 2.0, 5.0], [0.5, 0.25, 0.75], 0.5, 3.0),
    ];
    let mut fixtures_ok = true;
    for (est, var, w, b) in fixtures {
        let p = rubin_pool(&est, &var).unwrap();
        fixtures_ok &= p.within == w && p.between == b && p.total == w + (1.0 + 1.0 / 3.0) * b;
    }
    let pass = identical_ok && fixtures_ok;
    verdict(
        "Rubin identities",
        pass,
        &format!("B = 0 for identical imputations {identical_ok}, T = W + (1 + 1/m) B on 3 fixtures {fixtures_ok}"),
    );
    assert!(pass);
}

#[test]
fn end_to_end_fit_on_ten_imputations() {
    let dir = tempfile::tempdir().unwrap();
    common::write_imputations(dir.path(), 300, 8, 0.8, 10, 8008);
    let cfg = AnalysisConfig::default();
    let report = fit_imputations(&imputation_files(dir.path()).unwrap(), &cfg).unwrap();
    let row = report.selection.iter().find(|r| r.name == "x0").unwrap();
    let term = report.pooled.iter().find(|t| t.name == "x0");
    let ci_ok = term.is_some_and(|t| t.ci_lower > 1.0 || t.ci_upper < 1.0);
    let pass = row.count >= 6 && ci_ok;
    verdict(
        "end-to-end 10 imputations",
        pass,
        &format!(
            "planted x0 selected in {}/10 (>= 6), pooled OR {} excludes 1 {ci_ok}, retained {:?}",
            row.count,
            term.map_or("-".to_string(), |t| t.formatted.clone()),
            report.retained
        ),
    );
    assert!(pass);
}

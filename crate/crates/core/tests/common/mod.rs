#![allow(dead_code)]

use discsurv::survival::{augment, AugmentedDesign, RandomDesign, SurvivalObservation};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Survival records from a logistic discrete hazard with a normal frailty.
pub fn simulate_records(
    n: usize,
    beta: &[f64],
    intercept: f64,
    frailty_sd: f64,
    t_max: u32,
    seed: u64,
) -> Vec<SurvivalObservation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x: Vec<f64> = (0..beta.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let b: f64 = frailty_sd * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        let lin = intercept + x.iter().zip(beta).map(|(a, c)| a * c).sum::<f64>() + b;
        let censor = rng.random_range(3..=t_max);
        let mut time = censor;
        let mut event = false;
        for s in 1..=censor {
            let eta = lin + 0.1 * s as f64;
            let h = 1.0 / (1.0 + (-eta).exp());
            if rng.random::<f64>() < h {
                time = s;
                event = true;
                break;
            }
        }
        out.push(SurvivalObservation::new(format!("s{i}"), time, 1, event, x));
    }
    out
}

pub fn design(
    n: usize,
    beta: &[f64],
    frailty_sd: f64,
    seed: u64,
    random: RandomDesign,
) -> AugmentedDesign {
    let recs = simulate_records(n, beta, -2.0, frailty_sd, 8, seed);
    augment(&recs, 8, &random).unwrap()
}

/// Penalized objective computed from the dense design, with a smooth
/// stand-in for the L1 term on a fixed sign pattern.
pub struct DenseObjective {
    pub h: DMatrix<f64>,
    pub y: DVector<f64>,
    pub p: usize,
    pub t_max: usize,
    pub q: usize,
    pub nu: f64,
    pub alpha: f64,
    pub nu_s: f64,
    pub q_inv: DMatrix<f64>,
    /// Sign of each β_j; 0 pins the coordinate at zero.
    pub signs: Vec<f64>,
}

impl DenseObjective {
    pub fn new(
        d: &AugmentedDesign,
        nu: f64,
        alpha: f64,
        nu_s: f64,
        q_inv: DMatrix<f64>,
        signs: Vec<f64>,
    ) -> Self {
        Self {
            h: d.full_design(),
            y: DVector::from_column_slice(d.responses()),
            p: d.n_covariates(),
            t_max: d.t_max(),
            q: d.q(),
            nu,
            alpha,
            nu_s,
            q_inv,
            signs,
        }
    }

    fn penalty_weight(&self, k: usize) -> f64 {
        if k >= 1 && k <= self.p {
            self.nu * (1.0 - self.alpha)
        } else if k > self.p && k <= self.p + self.t_max {
            self.nu_s
        } else {
            0.0
        }
    }

    pub fn value_grad(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        let eta = &self.h * theta;
        let mut ll = 0.0;
        let mut resid = DVector::zeros(eta.len());
        for r in 0..eta.len() {
            let e = eta[r];
            let log1pe = if e > 0.0 {
                e + (-e).exp().ln_1p()
            } else {
                e.exp().ln_1p()
            };
            ll += self.y[r] * e - log1pe;
            resid[r] = self.y[r] - 1.0 / (1.0 + (-e).exp());
        }
        let mut grad = self.h.tr_mul(&resid);
        let mut val = ll;
        for k in 0..theta.len() {
            let w = self.penalty_weight(k);
            val -= 0.5 * w * theta[k] * theta[k];
            grad[k] -= w * theta[k];
        }
        for j in 0..self.p {
            val -= self.nu * self.alpha * self.signs[j] * theta[1 + j];
            grad[1 + j] -= self.nu * self.alpha * self.signs[j];
        }
        let b0 = 1 + self.p + self.t_max;
        let nb = (theta.len() - b0) / self.q.max(1);
        for i in 0..nb {
            for a in 0..self.q {
                for c in 0..self.q {
                    let qa = self.q_inv[(a, c)];
                    val -= 0.5 * theta[b0 + i * self.q + a] * qa * theta[b0 + i * self.q + c];
                    grad[b0 + i * self.q + a] -= qa * theta[b0 + i * self.q + c];
                }
            }
        }
        (val, grad)
    }
}

/// Maximize f by BFGS with a backtracking Armijo search. `mask` zeros
/// gradient entries for pinned coordinates.
pub fn bfgs_maximize<F>(
    f: F,
    x0: DVector<f64>,
    mask: &[bool],
    tol: f64,
    max_iter: usize,
) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let apply = |g: &mut DVector<f64>| {
        for k in 0..n {
            if !mask[k] {
                g[k] = 0.0;
            }
        }
    };
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    apply(&mut g);
    let mut hinv = DMatrix::<f64>::identity(n, n) * 1e-2;
    for _ in 0..max_iter {
        if g.amax() < tol {
            break;
        }
        let dir = &hinv * &g;
        let slope = g.dot(&dir);
        let dir = if slope <= 0.0 {
            hinv = DMatrix::identity(n, n) * 1e-2;
            &hinv * &g
        } else {
            dir
        };
        let slope = g.dot(&dir);
        let mut t = 1.0;
        let (xn, fn_, mut gn) = loop {
            let xn = &x + &dir * t;
            let (v, gg) = f(&xn);
            if v.is_finite() && v >= fx + 1e-4 * t * slope {
                break (xn, v, gg);
            }
            t *= 0.5;
            if t < 1e-20 {
                return x;
            }
        };
        apply(&mut gn);
        let s = &xn - &x;
        let yv = &g - &gn;
        let sy = s.dot(&yv);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - &s * yv.transpose() * rho;
            let b = &i - &yv * s.transpose() * rho;
            hinv = &a * &hinv * &b + &s * s.transpose() * rho;
        }
        x = xn;
        fx = fn_;
        g = gn;
    }
    x
}

/// Minimize f by the Nelder–Mead simplex method.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: F,
    x0: &[f64],
    step: f64,
    tol: f64,
    max_iter: usize,
) -> Vec<f64> {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for k in 0..n {
        let mut v = x0.to_vec();
        v[k] += step;
        simplex.push(v);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    for _ in 0..max_iter {
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();
        if (vals[n] - vals[0]).abs() < tol {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|v| v[k]).sum::<f64>() / n as f64)
            .collect();
        let along = |c: f64| -> Vec<f64> {
            (0..n)
                .map(|k| centroid[k] + c * (simplex[n][k] - centroid[k]))
                .collect()
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                vals[n] = fe;
            } else {
                simplex[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            simplex[n] = xr;
            vals[n] = fr;
        } else {
            let xc = if fr < vals[n] {
                along(-0.5)
            } else {
                along(0.5)
            };
            let fc = f(&xc);
            if fc < vals[n].min(fr) {
                simplex[n] = xc;
                vals[n] = fc;
            } else {
                for i in 1..=n {
                    for k in 0..n {
                        simplex[i][k] = simplex[0][k] + 0.5 * (simplex[i][k] - simplex[0][k]);
                    }
                    vals[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=n)
        .min_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap())
        .unwrap();
    simplex[best].clone()
}

/// Gauss–Hermite nodes and weights (physicists' convention) via Newton on
/// the Hermite recurrence.
pub fn gauss_hermite(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; m];
    let mut w = vec![0.0; m];
    let pi4 = std::f64::consts::PI.powf(-0.25);
    let mut z = 0.0;
    for i in 0..(m + 1) / 2 {
        z = match i {
            0 => (2.0 * m as f64 + 1.0).sqrt() - 1.85575 * (2.0 * m as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (m as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pi4;
            let mut p2 = 0.0;
            for j in 0..m {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2
                    - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * m as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-14 {
                break;
            }
        }
        x[i] = z;
        x[m - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[m - 1 - i] = w[i];
    }
    (x, w)
}

/// Synthetic Stage 1 data: chemical x ~ LogNormal(0, 1), lipid
/// s ~ LogNormal(ln 5, 0.4), infertility ~ Bernoulli(logistic(α₀ + α₁ z)) with
/// z the standardized generalized Box-Cox transform at `kappa`.
pub fn concomitant_data(
    n: usize,
    kappa: f64,
    alpha0: f64,
    alpha1: f64,
    seed: u64,
) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    use rand_distr::LogNormal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xd = LogNormal::new(0.0, 1.0).unwrap();
    let sd = LogNormal::new(5f64.ln(), 0.4).unwrap();
    let x: Vec<f64> = (0..n).map(|_| xd.sample(&mut rng)).collect();
    let s: Vec<f64> = (0..n).map(|_| sd.sample(&mut rng)).collect();
    let g: Vec<f64> = x
        .iter()
        .zip(&s)
        .map(|(&xi, &si)| {
            let y = (1.0 + xi).ln() / (1.0 + si).ln();
            if kappa == 0.0 {
                y.ln()
            } else {
                (y.powf(kappa) - 1.0) / kappa
            }
        })
        .collect();
    let m = g.iter().sum::<f64>() / n as f64;
    let v = g.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let y = g
        .iter()
        .map(|gi| {
            let eta = alpha0 + alpha1 * (gi - m) / v.sqrt();
            rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())
        })
        .collect();
    (x, s, y)
}

/// Write `m` imputation CSVs of one synthetic cohort to `dir`.
///
/// Covariates are LogNormal(0, 1); the hazard uses the standardized
/// log(1 + x) of covariate 0 with coefficient `beta`, a baseline rising
/// from −2.5 and a normal frailty with sd 0.5. Each imputation redraws
/// 15% of the entries of covariate 1, which plays the partly missing column.
pub fn write_imputations(
    dir: &std::path::Path,
    n: usize,
    p: usize,
    beta: f64,
    m: usize,
    seed: u64,
) {
    use rand_distr::LogNormal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ln = LogNormal::new(0.0, 1.0).unwrap();
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..p).map(|_| ln.sample(&mut rng)).collect())
        .collect();
    let l0: Vec<f64> = x.iter().map(|r| r[0].ln_1p()).collect();
    let mean = l0.iter().sum::<f64>() / n as f64;
    let sd = (l0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    let t_max = 12u32;
    let mut rows = Vec::with_capacity(n);
    for (i, xi) in x.iter().enumerate() {
        let b: f64 = 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        let eta = beta * (l0[i] - mean) / sd + b;
        let left = if rng.random::<f64>() < 0.3 {
            rng.random_range(2..=3)
        } else {
            1
        };
        let cens = rng.random_range(4..=t_max);
        let mut time = t_max;
        let mut event = false;
        for t in 1..=cens {
            let h = 1.0 / (1.0 + (-(-2.5 + 0.05 * t as f64 + eta)).exp());
            if rng.random::<f64>() < h {
                time = t;
                event = true;
                break;
            }
            time = t;
        }
        if time < left {
            continue;
        }
        rows.push((format!("id{i}"), time, left, event, xi.clone()));
    }
    for k in 0..m {
        let mut imp = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 + k as u64));
        let mut w = String::from("id,time,left,status");
        for j in 0..p {
            w.push_str(&format!(",x{j}"));
        }
        w.push('\n');
        for (id, time, left, event, xi) in &rows {
            w.push_str(&format!("{id},{time},{left},{}", u8::from(*event)));
            for (j, v) in xi.iter().enumerate() {
                let v = if j == 1 && imp.random::<f64>() < 0.15 {
                    ln.sample(&mut imp)
                } else {
                    *v
                };
                w.push_str(&format!(",{v}"));
            }
            w.push('\n');
        }
        std::fs::write(dir.join(format!("imp{k:02}.csv")), w).unwrap();
    }
}

/// Random-intercept logistic data: n clusters of `per` rows with one
/// standard normal covariate, η = −0.5 + 0.8x + b, b ~ N(0, σ²). Returns
/// the design and the per-cluster (y, x).
pub fn clustered_logistic(
    n: usize,
    per: usize,
    sigma: f64,
    seed: u64,
) -> (AugmentedDesign, Vec<(Vec<f64>, Vec<f64>)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut subject = Vec::new();
    let mut groups = Vec::new();
    for i in 0..n {
        let b: f64 = sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        let mut gy = Vec::new();
        let mut gx = Vec::new();
        for _ in 0..per {
            let xi: f64 = StandardNormal.sample(&mut rng);
            let e = -0.5 + 0.8 * xi + b;
            let yi = if rng.random::<f64>() < 1.0 / (1.0 + (-e).exp()) {
                1.0
            } else {
                0.0
            };
            y.push(yi);
            x.push(xi);
            subject.push(i);
            gy.push(yi);
            gx.push(xi);
        }
        groups.push((gy, gx));
    }
    let rows = y.len();
    let d = AugmentedDesign::from_parts(
        y,
        DMatrix::from_column_slice(rows, 1, &x),
        vec![1; rows],
        subject,
        DMatrix::from_element(rows, 1, 1.0),
        1,
    )
    .unwrap();
    (d, groups)
}

/// Marginal log-likelihood of a random-intercept logistic model by
/// adaptive Gauss–Hermite quadrature.
pub fn marginal_loglik(
    groups: &[(Vec<f64>, Vec<f64>)],
    c: f64,
    beta: f64,
    sigma: f64,
    nodes: &(Vec<f64>, Vec<f64>),
) -> f64 {
    let mut total = 0.0;
    for (y, x) in groups {
        let cond = |b: f64| -> (f64, f64, f64) {
            let mut v = -0.5 * b * b / (sigma * sigma);
            let mut g = -b / (sigma * sigma);
            let mut hh = -1.0 / (sigma * sigma);
            for (yi, xi) in y.iter().zip(x) {
                let e = c + beta * xi + b;
                let m = 1.0 / (1.0 + (-e).exp());
                v += yi * e
                    - if e > 0.0 {
                        e + (-e).exp().ln_1p()
                    } else {
                        e.exp().ln_1p()
                    };
                g += yi - m;
                hh -= m * (1.0 - m);
            }
            (v, g, hh)
        };
        let mut mode = 0.0;
        for _ in 0..50 {
            let (_, g, hh) = cond(mode);
            let step = g / hh;
            mode -= step;
            if step.abs() < 1e-12 {
                break;
            }
        }
        let (_, _, hh) = cond(mode);
        let scale = (-1.0 / hh).sqrt();
        let (xs, ws) = nodes;
        let mut acc = 0.0;
        for (z, w) in xs.iter().zip(ws) {
            let b = mode + std::f64::consts::SQRT_2 * scale * z;
            acc += w * (z * z).exp() * cond(b).0.exp();
        }
        total += (acc * std::f64::consts::SQRT_2 * scale).ln()
            - 0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    }
    total
}

/// Maximum marginal likelihood σ² by 20-node adaptive quadrature.
pub fn quadrature_variance(groups: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let nodes = gauss_hermite(20);
    let opt = nelder_mead(
        |v| -marginal_loglik(groups, v[0], v[1], v[2].exp(), &nodes),
        &[0.0, 0.0, 0.0],
        0.3,
        1e-10,
        2000,
    );
    (2.0 * opt[2]).exp()
}

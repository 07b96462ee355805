//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.
//!
//! `cargo test --release -p plnfit --test acceptance` runs all of them;
//! append `-- 5 6` to run a subset by number.

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{
    block_mut, block_of, finite_difference, normal_matrix, relative_error, rng, uniform_usize, value, Instance,
    BLOCKS,
};
use nalgebra::{DMatrix, SymmetricEigen};
use plnfit::elbo::{impute, Objective};
use plnfit::selection::{pseudo_r2_from_logliks, Criterion};
use plnfit::simulate::{marginal_loglik_oracle, sample, ORACLE_NODES};
use plnfit::{
    fit_rank, fit_rank_scan, CountTable, Design, FactorMap, Family, Method, ModelParams, OptimConfig,
    SimSpec, VariationalState,
};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Check {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria = [
        Check { id: 1, name: "gradient correctness", budget: secs(30), run: gradients },
        Check { id: 2, name: "lower-bound certification", budget: secs(60), run: lower_bound },
        Check { id: 3, name: "biconcavity", budget: secs(10), run: biconcavity },
        Check { id: 4, name: "monotone ascent", budget: secs(60), run: monotone },
        Check { id: 5, name: "parameter recovery", budget: secs(300), run: recovery },
        Check { id: 6, name: "rank selection", budget: secs(600), run: rank_selection },
        Check { id: 7, name: "gaussian cross-check", budget: secs(120), run: gaussian },
        Check { id: 8, name: "missing-data equivalence", budget: secs(10), run: missing_data },
        Check { id: 9, name: "structural invariants", budget: secs(30), run: invariants },
        Check { id: 10, name: "determinism", budget: secs(120), run: determinism },
        Check { id: 11, name: "scaling shape", budget: secs(900), run: scaling },
    ];
    let mut failed = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.budget;
        let pass = outcome.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {:>2} {:<26} {} [{:.1} s / {} s budget{}]",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            outcome.detail,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            if in_time { "" } else { ", over budget" },
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn gradients() -> Outcome {
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    let mut where_ = String::new();
    let missing = [0.0, 0.1, 0.5];
    for k in 0..50 {
        let d = uniform_usize(&mut r, 1, 3);
        let n = uniform_usize(&mut r, d + 1, 8);
        let p = uniform_usize(&mut r, 1, 6);
        let q = uniform_usize(&mut r, 1, 3).min(p);
        let family = if k % 2 == 0 { Family::Poisson } else { Family::poisson_quadrature(40) };
        let inst = Instance::random(&mut r, n, p, q, d, missing[k % 3], 1000 + k as u64);
        let mut objective = Objective::new(&family, &inst.counts, &inst.design, q).unwrap();
        let (_, g) = objective.value_and_gradients(&inst.params, &inst.vstate).unwrap();
        for b in BLOCKS {
            let fd = finite_difference(&family, &inst, b);
            let e = relative_error(block_of(&g, b), &fd);
            if e > worst {
                worst = e;
                where_ = format!("instance {k} ({}) block {b:?}", family.name());
            }
        }
    }
    Outcome::new(worst < 1e-6, format!("50 instances, worst relative error {worst:.2e} at {where_}"))
}

fn lower_bound() -> Outcome {
    let mut r = rng(2);
    let mut worst = f64::NEG_INFINITY;
    let mut checked = 0;
    for k in 0..20u64 {
        let tiny = k < 10;
        let (n, p, q, d) = if tiny {
            (12, 1 + (k as usize % 2), 1 + (k as usize / 2 % 2), 1 + (k as usize / 4 % 2))
        } else {
            (12, 3 + (k as usize % 2), 3 + (k as usize % 2), 2)
        };
        let q = q.min(p);
        let spec = SimSpec::standard(n, p, q, d, 2000 + k);
        let (counts, design, _) = sample(&spec).unwrap();
        let mut points = Vec::with_capacity(201);
        for _ in 0..200 {
            let inst = Instance::at_random_point(&mut r, counts.clone(), design.clone(), q);
            let mut params = inst.params;
            if !tiny {
                // diagonal B (q = p) keeps Σ = BBᵀ diagonal
                params.loadings = DMatrix::from_diagonal(&params.loadings.diagonal());
            }
            points.push((params, inst.vstate));
        }
        if tiny {
            let fit = fit_rank(&counts, &design, &Family::Poisson, q, &OptimConfig::default()).unwrap();
            points.push((fit.params, fit.vstate));
        }
        for (params, vstate) in &points {
            let j = value(&Family::Poisson, &counts, &design, params, vstate);
            let oracle =
                marginal_loglik_oracle(&counts, &design, &params.theta, &params.sigma(), ORACLE_NODES).unwrap();
            worst = worst.max(j - oracle);
            checked += 1;
        }
    }
    Outcome::new(
        worst <= 1e-8,
        format!("{checked} points on 20 instances, max J − log p(Y) = {worst:.3e}"),
    )
}

fn biconcavity() -> Outcome {
    let mut r = rng(3);
    let mut worst = f64::INFINITY;
    let groups: [&[usize]; 6] = [&[0], &[1], &[2], &[3], &[0, 1], &[2, 3]];
    for blocks in groups {
        for k in 0..200u64 {
            let (n, p, q, d) = (6, 4, 2, 2);
            let family = if k % 2 == 0 { Family::Poisson } else { Family::GaussianUnitVariance };
            let a = if k % 2 == 0 {
                Instance::random(&mut r, n, p, q, d, 0.1, 3000 + k)
            } else {
                let counts = CountTable::new(normal_matrix(&mut r, n, p, 1.0));
                let design = Design::new(
                    DMatrix::from_fn(n, d, |i, c| if c == 0 { 1.0 } else { i as f64 / n as f64 }),
                    DMatrix::zeros(n, p),
                )
                .unwrap();
                Instance::at_random_point(&mut r, counts, design, q)
            };
            let other = Instance::at_random_point(&mut r, a.counts.clone(), a.design.clone(), q);
            let mut b_params = a.params.clone();
            let mut b_vstate = a.vstate.clone();
            let (mut o_params, mut o_vstate) = (other.params, other.vstate);
            for &blk in blocks.iter() {
                let src = block_mut(&mut o_params, &mut o_vstate, BLOCKS[blk]).clone();
                *block_mut(&mut b_params, &mut b_vstate, BLOCKS[blk]) = src;
            }
            let mut mid_params = a.params.clone();
            let mut mid_vstate = a.vstate.clone();
            mid_params.theta = (&a.params.theta + &b_params.theta) * 0.5;
            mid_params.loadings = (&a.params.loadings + &b_params.loadings) * 0.5;
            mid_vstate.means = (&a.vstate.means + &b_vstate.means) * 0.5;
            mid_vstate.sds = (&a.vstate.sds + &b_vstate.sds) * 0.5;
            let ja = value(&family, &a.counts, &a.design, &a.params, &a.vstate);
            let jb = value(&family, &a.counts, &a.design, &b_params, &b_vstate);
            let jm = value(&family, &a.counts, &a.design, &mid_params, &mid_vstate);
            let slack = jm - 0.5 * (ja + jb);
            worst = worst.min(slack);
        }
    }
    Outcome::new(
        worst >= -1e-10,
        format!("200 checks for each of Θ, B, M, S, (Θ,B), (M,S); min slack {worst:.3e}"),
    )
}

fn monotone() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut total_steps = 0;
    for seed in 0..10u64 {
        let spec = SimSpec {
            missing_fraction: if seed % 3 == 0 { 0.2 } else { 0.0 },
            ..SimSpec::standard(120, 8, 2, 2, 4000 + seed)
        };
        let (counts, design, _) = sample(&spec).unwrap();
        let config = OptimConfig {
            method: if seed < 7 { Method::Mma } else { Method::ProjectedGradient },
            max_iterations: 2000,
            ..OptimConfig::default()
        };
        let fit = fit_rank(&counts, &design, &Family::Poisson, 2, &config).unwrap();
        for w in fit.trace.windows(2) {
            worst = worst.max((w[0] - w[1]) / w[1].abs());
        }
        total_steps += fit.trace.len();
    }
    Outcome::new(
        worst <= 1e-8,
        format!("10 fits (7 MMA, 3 projected gradient), {total_steps} accepted iterates, largest relative decrease {worst:.2e}"),
    )
}

const ACCEPTANCE_SEEDS: std::ops::Range<u64> = 100..120;

fn recovery() -> Outcome {
    let mut good = 0;
    let (mut worst_sigma, mut worst_theta): (f64, f64) = (0.0, 0.0);
    for seed in ACCEPTANCE_SEEDS {
        let (counts, design, truth) = sample(&SimSpec::recovery(seed)).unwrap();
        let fit = fit_rank(&counts, &design, &Family::Poisson, 2, &OptimConfig::default()).unwrap();
        let sigma_err = (&fit.sigma_hat - &truth.sigma).norm() / truth.sigma.norm();
        let theta_err = (&fit.params.theta - &truth.theta).amax();
        worst_sigma = worst_sigma.max(sigma_err);
        worst_theta = worst_theta.max(theta_err);
        if sigma_err < 0.25 && theta_err < 0.15 {
            good += 1;
        }
    }
    Outcome::new(
        good >= 18,
        format!("{good}/20 seeds within bounds (worst Σ̂ error {worst_sigma:.3}, worst Θ̂ error {worst_theta:.3})"),
    )
}

fn rank_selection() -> Outcome {
    let mut hits = 0;
    let mut picks = Vec::new();
    for seed in ACCEPTANCE_SEEDS {
        let (counts, design, _) = sample(&SimSpec::recovery(seed)).unwrap();
        let scan = fit_rank_scan(&counts, &design, &Family::Poisson, &[1, 2, 3, 4, 5], &OptimConfig::default())
            .unwrap();
        let pick = scan.best(Criterion::Icl);
        if pick == Some(2) {
            hits += 1;
        }
        picks.push(pick.map_or("-".to_string(), |q| q.to_string()));
    }
    Outcome::new(hits >= 18, format!("ICL chose q = 2 in {hits}/20 seeds (picks {})", picks.join(",")))
}

/// Fixed unit-noise probabilistic PCA: OLS for Θ, then `B = U (Λ − 1)₊^{1/2}`.
fn ppca_covariance(y: &DMatrix<f64>, x: &DMatrix<f64>, q: usize) -> DMatrix<f64> {
    let n = y.nrows() as f64;
    let xtx = x.transpose() * x;
    let coef = xtx.cholesky().unwrap().solve(&(x.transpose() * y));
    let resid = y - x * coef;
    let cov = resid.transpose() * &resid / n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let p = y.ncols();
    let mut sigma = DMatrix::zeros(p, p);
    for &k in order.iter().take(q) {
        let u = eig.eigenvectors.column(k);
        sigma += (eig.eigenvalues[k] - 1.0).max(0.0) * &u * u.transpose();
    }
    sigma
}

fn gaussian() -> Outcome {
    let mut r = rng(7);
    let (n, p, q, d) = (2000, 6, 2, 2);
    let x = DMatrix::from_fn(n, d, |_, c| if c == 0 { 1.0 } else { 0.0 }) + {
        let mut z = normal_matrix(&mut r, n, d, 1.0);
        z.column_mut(0).fill(0.0);
        z
    };
    let theta = normal_matrix(&mut r, p, d, 1.0);
    let b = normal_matrix(&mut r, p, q, 1.0);
    let w = normal_matrix(&mut r, n, q, 1.0);
    let noise = normal_matrix(&mut r, n, p, 1.0);
    let y = &x * theta.transpose() + &w * b.transpose() + noise;
    let design = Design::new(x.clone(), DMatrix::zeros(n, p)).unwrap();
    let counts = CountTable::new(y.clone());
    let config = OptimConfig {
        objective_tol: 1e-10,
        max_iterations: 20_000,
        ..OptimConfig::default()
    };
    let fit = fit_rank(&counts, &design, &Family::GaussianUnitVariance, q, &config).unwrap();
    let closed = ppca_covariance(&y, &x, q);
    let err = (&fit.sigma_hat - &closed).norm();
    Outcome::new(
        err <= 0.1,
        format!(
            "‖Σ̂ − Σ_pPCA‖_F = {err:.2e} (‖Σ_pPCA‖_F = {:.2}, {} iterations)",
            closed.norm(),
            fit.iterations
        ),
    )
}

fn missing_data() -> Outcome {
    let mut r = rng(8);
    let mut worst: f64 = 0.0;
    for k in 0..20u64 {
        let inst = Instance::random(&mut r, 10, 5, 2, 2, 0.3, 5000 + k);
        let family = Family::Poisson;
        let mut objective = Objective::new(&family, &inst.counts, &inst.design, 2).unwrap();
        let (_, masked) = objective.value_and_gradients(&inst.params, &inst.vstate).unwrap();
        let ws = objective.workspace().clone();
        let y_full = impute(&inst.counts, &ws);

        // Route 1: the library's imputed-data gradient.
        let imputed = objective.gradients_with_imputed(&inst.params, &inst.vstate, &y_full);

        // Route 2: full-data gradient written out here; it differs from the
        // masked one only through the curvature of unobserved cells.
        let (params, vstate) = (&inst.params, &inst.vstate);
        let resid = &y_full - &ws.a_prime;
        let missing = inst.counts.mask().map(|m| 1.0 - m);
        let curv_all = ws.a_second.clone();
        let curv_missing = ws.a_second.component_mul(&missing);
        let s2 = vstate.sds.component_mul(&vstate.sds);
        let b2 = params.loadings.component_mul(&params.loadings);
        let full_theta = resid.transpose() * inst.design.covariates();
        let full_means = &resid * &params.loadings - &vstate.means;
        let full_loadings = resid.transpose() * &vstate.means
            - (curv_all.transpose() * &s2).component_mul(&params.loadings);
        let full_sds = vstate.sds.map(|s| 1.0 / s)
            - vstate.sds.clone()
            - (&curv_all * &b2).component_mul(&vstate.sds);
        let fix_loadings = (curv_missing.transpose() * &s2).component_mul(&params.loadings);
        let fix_sds = (&curv_missing * &b2).component_mul(&vstate.sds);

        let pairs = [
            (&masked.theta, imputed.theta.clone()),
            (&masked.loadings, imputed.loadings.clone()),
            (&masked.means, imputed.means.clone()),
            (&masked.sds, imputed.sds.clone()),
            (&masked.theta, full_theta),
            (&masked.means, full_means),
            (&masked.loadings, full_loadings + fix_loadings),
            (&masked.sds, full_sds + fix_sds),
        ];
        for (a, b) in pairs {
            worst = worst.max((a - &b).amax() / a.amax().max(1.0));
        }
    }
    Outcome::new(
        worst <= 1e-12,
        format!("20 points, 30% masked; masked vs imputed gradients differ by at most {worst:.2e} (relative)"),
    )
}

fn invariants() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: String| {
        if !ok {
            failures.push(what);
        }
    };
    for seed in 0..6u64 {
        let q = 1 + seed as usize % 3;
        let spec = SimSpec {
            missing_fraction: if seed % 2 == 0 { 0.0 } else { 0.1 },
            ..SimSpec::standard(80, 8, 2, 2, 6000 + seed)
        };
        let (counts, design, _) = sample(&spec).unwrap();
        let fit = fit_rank(&counts, &design, &Family::Poisson, q, &OptimConfig::default()).unwrap();

        let eig = SymmetricEigen::new(fit.sigma_hat.clone()).eigenvalues;
        let mut ev: Vec<f64> = eig.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        let scale = ev[0].abs().max(1e-300);
        check(ev.iter().all(|&l| l >= -1e-10 * scale), format!("seed {seed}: Σ̂ not PSD"));
        check(ev[q..].iter().all(|&l| l.abs() <= 1e-10 * scale), format!("seed {seed}: rank Σ̂ > q"));

        let map = FactorMap::orthogonalize(&fit.latent.p_tilde).unwrap();
        let dense = fit.latent.p_tilde.dense();
        let dscale = dense.amax().max(1.0);
        let recon = (map.reconstruct() - &dense).amax();
        check(recon <= 1e-10 * dscale, format!("seed {seed}: reconstruction error {recon:e}"));
        let ltl = map.loadings.transpose() * &map.loadings;
        let eye = DMatrix::identity(ltl.nrows(), ltl.ncols());
        check((ltl - eye).amax() <= 1e-12, format!("seed {seed}: loadings not orthonormal"));
        let sts = map.scores.transpose() * &map.scores;
        let off = sts.clone() - DMatrix::from_diagonal(&sts.diagonal());
        check(off.amax() <= 1e-10 * sts.amax().max(1.0), format!("seed {seed}: scores not orthogonal"));
        check(
            map.axis_variance.windows(2).all(|w| w[0] >= w[1]),
            format!("seed {seed}: axis variances not ordered"),
        );
        check(
            (map.fractions.iter().sum::<f64>() - 1.0).abs() <= 1e-12,
            format!("seed {seed}: axis fractions do not sum to one"),
        );

        let r2 = fit.criteria.r2;
        check(r2.is_some_and(|v| (0.0..=1.0).contains(&v)), format!("seed {seed}: R² = {r2:?}"));

        let c = &fit.criteria;
        check(c.icl == c.bic - c.entropy, format!("seed {seed}: ICL is not BIC − entropy"));
        let gap = ((c.bic - c.icl) - c.entropy).abs();
        check(
            gap <= 4.0 * f64::EPSILON * c.bic.abs().max(c.icl.abs()),
            format!("seed {seed}: BIC − ICL misses the entropy by {gap:e}"),
        );
    }
    check(pseudo_r2_from_logliks(-50.0, -80.0, -50.0) == Some(1.0), "R² at saturation is not 1".into());
    check(pseudo_r2_from_logliks(-80.0, -80.0, -50.0) == Some(0.0), "R² at the null is not 0".into());
    check(pseudo_r2_from_logliks(-80.0, -80.0, -80.0).is_none(), "R² with no headroom is defined".into());

    // rank-one degenerate data: a single fitted axis carries all variance
    let params = ModelParams::new(DMatrix::zeros(3, 1), DMatrix::from_element(3, 1, 1.0)).unwrap();
    let vstate = VariationalState::new(DMatrix::from_fn(4, 1, |i, _| i as f64), DMatrix::from_element(4, 1, 0.5)).unwrap();
    let sigma = plnfit::model::sigma_hat(&params, &vstate).unwrap();
    let ev = SymmetricEigen::new(sigma).eigenvalues;
    check(ev.iter().filter(|l| l.abs() > 1e-12).count() == 1, "rank-one Σ̂ has extra eigenvalues".into());

    let n = failures.len();
    Outcome::new(
        n == 0,
        if n == 0 {
            "Σ̂ PSD/rank, factor maps, R² range and edge cases, BIC − ICL on 6 fits".to_string()
        } else {
            failures.join("; ")
        },
    )
}

fn run_cli(args: &[String]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_plnfit"))
        .args(args)
        .env_remove("PLNFIT_THREADS")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().is_some_and(|f| f != "timings.json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn strings(args: &[&str]) -> Vec<String> {
    args.iter().map(|s| s.to_string()).collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    let (data_s, out_s) = (data.to_str().unwrap(), out.to_str().unwrap());
    let counts = format!("{data_s}/counts.csv");
    let covariates = format!("{data_s}/covariates.csv");
    let steps = [
        strings(&["simulate", "--n", "80", "--p", "8", "--q", "2", "--missing", "0.05", "--seed", "11", "--out", data_s]),
        strings(&[
            "scan", "--counts", &counts, "--covariates", &covariates, "--offset-mode", "log-row-totals",
            "--ranks", "1..3", "--seed", "11", "--threads", "1", "--out", out_s,
        ]),
    ];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let _ = fs::remove_dir_all(&data);
        let _ = fs::remove_dir_all(&out);
        for step in &steps {
            if let Err(e) = run_cli(step) {
                return Outcome::new(false, format!("CLI failed: {e}"));
            }
        }
        runs.push((snapshot(&data), snapshot(&out)));
    }
    let same = runs[0] == runs[1];
    let files = runs[0].0.len() + runs[0].1.len();
    Outcome::new(
        same && files > 10,
        format!("simulate + scan twice: {files} artifacts {}", if same { "byte-identical" } else { "differ" }),
    )
}

fn scaling() -> Outcome {
    let ps = [100usize, 200, 400];
    let mut times = Vec::new();
    for &p in &ps {
        let mut reps = Vec::new();
        for seed in 0..3u64 {
            let (counts, design, _) = sample(&SimSpec::standard(100, p, 5, 2, 7000 + seed)).unwrap();
            let start = Instant::now();
            fit_rank(&counts, &design, &Family::Poisson, 5, &OptimConfig::default()).unwrap();
            reps.push(start.elapsed().as_secs_f64());
        }
        reps.sort_by(f64::total_cmp);
        times.push(reps[1]);
    }
    let xs: Vec<f64> = ps.iter().map(|&p| (p as f64).ln()).collect();
    let ys: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    Outcome::new(
        slope <= 1.2,
        format!(
            "median fit times {:.2}/{:.2}/{:.2} s at p = 100/200/400, log-log slope {slope:.2}",
            times[0], times[1], times[2]
        ),
    )
}

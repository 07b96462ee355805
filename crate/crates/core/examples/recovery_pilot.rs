//! Replicated recovery and rank-selection study on simulated counts
//! (n = 500, p = 10, q* = 2, intercept + one covariate).
//!
//! Usage: cargo run --release --example recovery_pilot -- [replicates] [method] [scan]

use std::time::Instant;

use plnfit::optim::{fit_rank, fit_rank_scan, Method, OptimConfig};
use plnfit::selection::Criterion;
use plnfit::simulate::{sample, SimSpec};
use plnfit::Family;

fn main() -> plnfit::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let reps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let method = match args.get(2).map(String::as_str) {
        Some("pgd") => Method::ProjectedGradient,
        _ => Method::Mma,
    };
    let scan = args.get(3).is_some_and(|s| s == "scan");
    let objective_tol = std::env::var("PILOT_TOL")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(OptimConfig::default().objective_tol);
    let config = OptimConfig {
        method,
        objective_tol,
        max_iterations: 100_000,
        ..OptimConfig::default()
    };
    println!("seed,sigma_rel_err,theta_max_err,elbo,iterations,status,seconds,icl_rank,bic_rank");
    for seed in 0..reps {
        let spec = SimSpec::recovery(seed);
        let (counts, design, truth) = sample(&spec)?;
        let start = Instant::now();
        let fit = fit_rank(&counts, &design, &Family::Poisson, 2, &config)?;
        let secs = start.elapsed().as_secs_f64();
        let sigma_err = (&fit.sigma_hat - &truth.sigma).norm() / truth.sigma.norm();
        let theta_err = (&fit.params.theta - &truth.theta).amax();
        if std::env::var("PILOT_VERBOSE").is_ok() {
            eprintln!("theta diff:{}", &fit.params.theta - &truth.theta);
        }
        let (icl, bic) = if scan {
            let s = fit_rank_scan(&counts, &design, &Family::Poisson, &[1, 2, 3, 4, 5], &config)?;
            (s.best(Criterion::Icl), s.best(Criterion::Bic))
        } else {
            (None, None)
        };
        println!(
            "{seed},{sigma_err:.4},{theta_err:.4},{:.3},{},{},{secs:.2},{},{}",
            fit.elbo,
            fit.iterations,
            fit.status.as_str(),
            icl.map_or("NA".into(), |q| q.to_string()),
            bic.map_or("NA".into(), |q| q.to_string()),
        );
    }
    Ok(())
}

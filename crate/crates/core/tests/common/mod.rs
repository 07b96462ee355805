//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use nalgebra::DMatrix;
use plnfit::elbo::{Gradients, Objective};
use plnfit::simulate::sample;
use plnfit::{CountTable, Design, Family, ModelParams, SimSpec, VariationalState};
use rand_distr::{Distribution, Normal, Uniform};
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type TestRng = Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> TestRng {
    TestRng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut TestRng, r: usize, c: usize, sd: f64) -> DMatrix<f64> {
    let dist = Normal::new(0.0, sd).unwrap();
    DMatrix::from_fn(r, c, |_, _| dist.sample(rng))
}

pub fn uniform_matrix(rng: &mut TestRng, r: usize, c: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let dist = Uniform::new(lo, hi).unwrap();
    DMatrix::from_fn(r, c, |_, _| dist.sample(rng))
}

pub fn uniform_usize(rng: &mut TestRng, lo: usize, hi: usize) -> usize {
    Uniform::new_inclusive(lo, hi).unwrap().sample(rng)
}

/// Simulated data plus an arbitrary feasible point of matching shape.
pub struct Instance {
    pub counts: CountTable,
    pub design: Design,
    pub params: ModelParams,
    pub vstate: VariationalState,
}

impl Instance {
    pub fn random(rng: &mut TestRng, n: usize, p: usize, q: usize, d: usize, missing: f64, seed: u64) -> Self {
        let spec = SimSpec {
            missing_fraction: missing,
            ..SimSpec::standard(n, p, q, d, seed)
        };
        let (counts, design, _) = sample(&spec).expect("simulation");
        Self::at_random_point(rng, counts, design, q)
    }

    pub fn at_random_point(rng: &mut TestRng, counts: CountTable, design: Design, q: usize) -> Self {
        let (n, p, d) = (counts.nrows(), counts.ncols(), design.ncovariates());
        let params = ModelParams::new(normal_matrix(rng, p, d, 0.5), normal_matrix(rng, p, q, 0.5)).unwrap();
        let vstate = VariationalState::new(normal_matrix(rng, n, q, 0.5), uniform_matrix(rng, n, q, 0.2, 1.0)).unwrap();
        Self {
            counts,
            design,
            params,
            vstate,
        }
    }
}

pub fn value(family: &Family, counts: &CountTable, design: &Design, params: &ModelParams, vstate: &VariationalState) -> f64 {
    Objective::new(family, counts, design, vstate.rank())
        .unwrap()
        .value(params, vstate)
        .unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Theta,
    Loadings,
    Means,
    Sds,
}

pub const BLOCKS: [Block; 4] = [Block::Theta, Block::Loadings, Block::Means, Block::Sds];

pub fn block_mut<'a>(params: &'a mut ModelParams, vstate: &'a mut VariationalState, b: Block) -> &'a mut DMatrix<f64> {
    match b {
        Block::Theta => &mut params.theta,
        Block::Loadings => &mut params.loadings,
        Block::Means => &mut vstate.means,
        Block::Sds => &mut vstate.sds,
    }
}

pub fn block_of(g: &Gradients, b: Block) -> &DMatrix<f64> {
    match b {
        Block::Theta => &g.theta,
        Block::Loadings => &g.loadings,
        Block::Means => &g.means,
        Block::Sds => &g.sds,
    }
}

/// Central differences of `J` with one Richardson step, block by block.
pub fn finite_difference(family: &Family, inst: &Instance, b: Block) -> DMatrix<f64> {
    let mut params = inst.params.clone();
    let mut vstate = inst.vstate.clone();
    let shape = block_mut(&mut params, &mut vstate, b).shape();
    let mut out = DMatrix::zeros(shape.0, shape.1);
    let mut objective = Objective::new(family, &inst.counts, &inst.design, inst.vstate.rank()).unwrap();
    for idx in 0..shape.0 * shape.1 {
        let x0 = block_mut(&mut params, &mut vstate, b)[idx];
        let h = if b == Block::Sds { 1e-2 * x0 } else { 1e-3 * x0.abs().max(1.0) };
        let mut central = |h: f64| {
            block_mut(&mut params, &mut vstate, b)[idx] = x0 + h;
            let up = objective.value(&params, &vstate).unwrap();
            block_mut(&mut params, &mut vstate, b)[idx] = x0 - h;
            let down = objective.value(&params, &vstate).unwrap();
            block_mut(&mut params, &mut vstate, b)[idx] = x0;
            (up - down) / (2.0 * h)
        };
        let coarse = central(h);
        let fine = central(0.5 * h);
        let richer = central(0.25 * h);
        let r1 = (4.0 * fine - coarse) / 3.0;
        let r2 = (4.0 * richer - fine) / 3.0;
        out[idx] = (16.0 * r2 - r1) / 15.0;
    }
    out
}

/// `‖a − b‖∞ / max(‖b‖∞, 1)`.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    (a - b).amax() / b.amax().max(1.0)
}

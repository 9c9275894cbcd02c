//! Monte Carlo violation-probability estimates, used only to cross-check the
//! moment bounds and verdicts.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Beta, Distribution as _, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contour::SafetyConstraint;
use crate::polyalg::{PolyError, PolyTrajectory, Polynomial, VarId};
use crate::uncertainty::Distribution;
use crate::verifier::{Scenario, VerifyError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum McError {
    #[error("distribution of `{0}` is given only by moments and is not samplable")]
    NotSamplable(VarId),
    #[error("distribution of `{var}` is invalid for sampling: {msg}")]
    BadParameters { var: VarId, msg: String },
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

#[derive(Debug, Clone, Copy)]
enum Sampler {
    Uniform(Uniform<f64>),
    Normal(Normal<f64>),
    Beta(Beta<f64>),
}

impl Sampler {
    fn new(var: VarId, d: &Distribution) -> Result<Self, McError> {
        let bad = |msg: String| McError::BadParameters { var, msg };
        Ok(match *d {
            Distribution::Uniform { lower, upper } => {
                if !(lower < upper) {
                    return Err(bad("needs lower < upper".into()));
                }
                Sampler::Uniform(Uniform::new_inclusive(lower, upper))
            }
            Distribution::Gaussian { mean, variance } => {
                Sampler::Normal(Normal::new(mean, variance.sqrt()).map_err(|e| bad(e.to_string()))?)
            }
            Distribution::Beta { alpha, beta } => Sampler::Beta(Beta::new(alpha, beta).map_err(|e| bad(e.to_string()))?),
            Distribution::MomentList { .. } => return Err(McError::NotSamplable(var)),
        })
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Sampler::Uniform(d) => d.sample(rng),
            Sampler::Normal(d) => d.sample(rng),
            Sampler::Beta(d) => d.sample(rng),
        }
    }
}

/// One draw from `d`.
pub fn sample<R: Rng + ?Sized>(d: &Distribution, rng: &mut R) -> Result<f64, McError> {
    Ok(Sampler::new(VarId::Uncertain(0), d)?.draw(rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub constraint: String,
    pub time: f64,
    /// Fraction of draws with `g < 0`.
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
    pub seed: u64,
    pub stream: u64,
}

fn estimate(c: &SafetyConstraint, x: &[f64], t: f64, n: usize, seed: u64, stream: u64) -> Result<RiskEstimate, McError> {
    if n == 0 {
        return Err(McError::NoSamples);
    }
    // fix state and time first so each draw only evaluates a polynomial in w
    let mut bindings = std::collections::BTreeMap::new();
    bindings.insert(VarId::Time, Polynomial::constant(t));
    for (i, xi) in x.iter().enumerate() {
        bindings.insert(VarId::State(i), Polynomial::constant(*xi));
    }
    let g = c.g.substitute(&bindings);
    let vars: Vec<VarId> = c.model.iter().map(|(v, _)| v).collect();
    let samplers = c
        .model
        .iter()
        .map(|(v, d)| Sampler::new(v, d))
        .collect::<Result<Vec<_>, _>>()?;
    let eval = g.evaluator(&vars)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut w = vec![0.0; vars.len()];
    let mut violations = 0usize;
    for _ in 0..n {
        for (wi, s) in w.iter_mut().zip(&samplers) {
            *wi = s.draw(&mut rng);
        }
        if eval.eval(&w) < 0.0 {
            violations += 1;
        }
    }
    let mean = violations as f64 / n as f64;
    Ok(RiskEstimate {
        constraint: c.name.clone(),
        time: t,
        mean,
        stderr: (mean * (1.0 - mean) / n as f64).sqrt(),
        samples: n,
        seed,
        stream,
    })
}

/// `Prob(g(x, w, t) < 0)` from `n` draws.
pub fn estimate_risk(c: &SafetyConstraint, x: &[f64], t: f64, n: usize, seed: u64) -> Result<RiskEstimate, McError> {
    estimate(c, x, t, n, seed, 0)
}

/// Estimates at `P(t)` for every constraint and time, constraint-major. The
/// stream of constraint `i` at time index `k` is `(i << 32) | k`.
pub fn estimate_trajectory_risk(
    s: &Scenario,
    traj: &PolyTrajectory,
    times: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<RiskEstimate>, McError> {
    estimate_tube_point_risk(s, traj, None, times, n, seed)
}

/// As [`estimate_trajectory_risk`], at `P(t) + z`.
pub fn estimate_tube_point_risk(
    s: &Scenario,
    traj: &PolyTrajectory,
    offset: Option<&[f64]>,
    times: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<RiskEstimate>, McError> {
    if n == 0 {
        return Err(McError::NoSamples);
    }
    // reuse the verifier's time/dimension checks
    crate::verifier::pointwise_with_offset(s, traj, offset, times)?;
    let jobs: Vec<(usize, usize)> = (0..s.constraints.len())
        .flat_map(|i| (0..times.len()).map(move |k| (i, k)))
        .collect();
    jobs.par_iter()
        .map(|&(i, k)| {
            let t = times[k];
            let mut x = traj.state_at(t);
            if let Some(z) = offset {
                x.iter_mut().zip(z).for_each(|(a, b)| *a += b);
            }
            estimate(&s.constraints[i], &x, t, n, seed, ((i as u64) << 32) | k as u64)
        })
        .collect()
}

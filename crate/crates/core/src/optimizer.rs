//! Cut-off threshold optimization by differential evolution.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;
use thiserror::Error;

use crate::evaluator::{eval_protocol, EvalError};
use crate::keyrate::{secret_key_rate, KeyRateError};
use crate::par;
use crate::protocol::{
    build_nested_chain, CutoffSpec, CutoffStrategy, EvalConfig, HardwareParams, ProtocolError,
};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("empty or inverted bounds [{lo}, {hi}] in dimension {dim}")]
    Bounds { dim: usize, lo: f64, hi: f64 },
    #[error("problem has no dimensions")]
    NoDimensions,
}

/// One search coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Dimension {
    pub lo: f64,
    pub hi: f64,
    /// Rounded to the nearest integer before evaluation.
    pub integer: bool,
}

impl Dimension {
    fn snap(&self, x: f64) -> f64 {
        if self.integer {
            x.round().clamp(self.lo.ceil(), self.hi.floor())
        } else {
            x.clamp(self.lo, self.hi)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeParams {
    /// Population size is `population_factor * dim`.
    pub population_factor: usize,
    /// Mutation factor drawn uniformly from this range once per generation.
    pub mutation: (f64, f64),
    pub crossover: f64,
    pub max_generations: usize,
    /// Relative tolerance on the spread of population values.
    pub tol: f64,
    pub atol: f64,
    pub seed: u64,
}

impl Default for DeParams {
    fn default() -> Self {
        Self {
            population_factor: 15,
            mutation: (0.5, 1.0),
            crossover: 0.7,
            max_generations: 200,
            tol: 1e-8,
            atol: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeResult {
    /// Best candidate, with integer coordinates rounded.
    pub best: Vec<f64>,
    pub value: f64,
    /// Best value after initialization and after each generation.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub generations: usize,
    pub evaluations: usize,
}

fn cache_key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

/// Minimizes `objective` with DE/rand/1/bin and Latin-hypercube
/// initialization. Deterministic for a fixed seed; trial vectors of one
/// generation are evaluated concurrently.
pub fn differential_evolution<F>(
    objective: F,
    dims: &[Dimension],
    params: &DeParams,
) -> Result<DeResult, OptimizeError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if dims.is_empty() {
        return Err(OptimizeError::NoDimensions);
    }
    for (dim, d) in dims.iter().enumerate() {
        let empty = if d.integer {
            d.lo.ceil() > d.hi.floor()
        } else {
            d.lo > d.hi
        };
        if empty || !d.lo.is_finite() || !d.hi.is_finite() {
            return Err(OptimizeError::Bounds {
                dim,
                lo: d.lo,
                hi: d.hi,
            });
        }
    }
    let n_dim = dims.len();
    let pop = (params.population_factor * n_dim).max(5);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(params.seed);

    let cache: Mutex<HashMap<Vec<u64>, f64>> = Mutex::new(HashMap::new());
    let evaluations = Mutex::new(0usize);
    let evaluate = |x: &Vec<f64>| -> f64 {
        let snapped: Vec<f64> = x.iter().zip(dims).map(|(v, d)| d.snap(*v)).collect();
        let key = cache_key(&snapped);
        if let Some(v) = cache.lock().expect("cache lock").get(&key) {
            return *v;
        }
        let v = objective(&snapped);
        let v = if v.is_nan() { f64::INFINITY } else { v };
        cache.lock().expect("cache lock").insert(key, v);
        *evaluations.lock().expect("counter lock") += 1;
        v
    };

    // Latin hypercube: one sample per stratum in every coordinate.
    let mut population = vec![vec![0.0; n_dim]; pop];
    for (j, d) in dims.iter().enumerate() {
        let mut strata: Vec<usize> = (0..pop).collect();
        for i in (1..pop).rev() {
            strata.swap(i, rng.random_range(0..=i));
        }
        for (i, s) in strata.into_iter().enumerate() {
            let u = (s as f64 + rng.random::<f64>()) / pop as f64;
            population[i][j] = d.lo + u * (d.hi - d.lo);
        }
    }
    let mut energies = par::map_slice(&population, evaluate);

    let best_index = |e: &[f64]| {
        e.iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("non-empty population")
    };
    let mut trace = vec![energies[best_index(&energies)]];
    let mut converged = false;
    let mut generations = 0;

    for _ in 0..params.max_generations {
        if spread_converged(&energies, params) {
            converged = true;
            break;
        }
        generations += 1;
        let f = rng.random_range(params.mutation.0..=params.mutation.1);
        let trials: Vec<Vec<f64>> = (0..pop)
            .map(|i| {
                let mut pick = || loop {
                    let r = rng.random_range(0..pop);
                    if r != i {
                        break r;
                    }
                };
                let r1 = pick();
                let r2 = loop {
                    let r = pick();
                    if r != r1 {
                        break r;
                    }
                };
                let r3 = loop {
                    let r = pick();
                    if r != r1 && r != r2 {
                        break r;
                    }
                };
                let forced = rng.random_range(0..n_dim);
                (0..n_dim)
                    .map(|j| {
                        if j == forced || rng.random::<f64>() < params.crossover {
                            let d = &dims[j];
                            let v = population[r1][j] + f * (population[r2][j] - population[r3][j]);
                            if v < d.lo || v > d.hi {
                                d.lo + rng.random::<f64>() * (d.hi - d.lo)
                            } else {
                                v
                            }
                        } else {
                            population[i][j]
                        }
                    })
                    .collect()
            })
            .collect();
        let trial_energies = par::map_slice(&trials, evaluate);
        for (i, (x, e)) in trials.into_iter().zip(trial_energies).enumerate() {
            if e <= energies[i] {
                population[i] = x;
                energies[i] = e;
            }
        }
        trace.push(energies[best_index(&energies)]);
    }
    if !converged {
        converged = spread_converged(&energies, params);
    }
    let b = best_index(&energies);
    let best = population[b]
        .iter()
        .zip(dims)
        .map(|(v, d)| d.snap(*v))
        .collect();
    let evaluations = *evaluations.lock().expect("counter lock");
    Ok(DeResult {
        best,
        value: energies[b],
        trace,
        converged,
        generations,
        evaluations,
    })
}

fn spread_converged(e: &[f64], params: &DeParams) -> bool {
    if e.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let n = e.len() as f64;
    let mean = e.iter().sum::<f64>() / n;
    let sd = (e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    sd <= params.atol + params.tol * mean.abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One threshold shared by every nesting level.
    Uniform,
    /// One threshold per nesting level.
    Nonuniform,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizationProblem {
    /// Nesting levels of the balanced swap chain (`2^levels + 1` nodes).
    pub levels: usize,
    pub strategy: CutoffStrategy,
    pub mode: Mode,
    pub de: DeParams,
    /// Number of points in the uniform rate-vs-threshold curve.
    pub curve_points: usize,
    /// Overrides the default search range of each threshold.
    pub range: Option<(f64, f64)>,
}

impl OptimizationProblem {
    pub fn new(levels: usize, strategy: CutoffStrategy, mode: Mode, seed: u64) -> Self {
        Self {
            levels,
            strategy,
            mode,
            de: DeParams {
                seed,
                ..DeParams::default()
            },
            curve_points: 16,
            range: None,
        }
    }

    pub fn dimension(&self) -> usize {
        match self.mode {
            Mode::Uniform => 1,
            Mode::Nonuniform => self.levels,
        }
    }

    /// Search range of a single threshold: `[0, ttr]` for time thresholds
    /// (`[1, ttr]` for `MaxTime`) and `[0, 1]` for `w_cut`, unless
    /// [`range`](Self::range) is set.
    pub fn bounds(&self, ttr: usize) -> Dimension {
        if let Some((lo, hi)) = self.range {
            let lo = if self.strategy == CutoffStrategy::MaxTime {
                lo.max(1.0)
            } else {
                lo
            };
            return Dimension {
                lo,
                hi,
                integer: self.strategy != CutoffStrategy::Fidelity,
            };
        }
        match self.strategy {
            CutoffStrategy::DifTime => Dimension {
                lo: 0.0,
                hi: ttr as f64,
                integer: true,
            },
            CutoffStrategy::MaxTime => Dimension {
                lo: 1.0,
                hi: ttr as f64,
                integer: true,
            },
            CutoffStrategy::Fidelity => Dimension {
                lo: 0.0,
                hi: 1.0,
                integer: false,
            },
        }
    }
}

/// Secret-key rate of the chain with the given thresholds; a single value
/// applies to every level. Chains that produce no key, or whose Fourier
/// compounding is singular, rate 0.
pub fn rate_for_thresholds(
    problem: &OptimizationProblem,
    cfg: &EvalConfig,
    thresholds: &[f64],
) -> Result<f64, OptimizeError> {
    let cutoffs: Vec<CutoffSpec> = thresholds
        .iter()
        .map(|&v| problem.strategy.with_threshold(v))
        .collect();
    chain_rate(problem.levels, &cutoffs, cfg)
}

fn chain_rate(
    levels: usize,
    cutoffs: &[CutoffSpec],
    cfg: &EvalConfig,
) -> Result<f64, OptimizeError> {
    let tree = build_nested_chain(levels, cutoffs)?;
    match eval_protocol(&tree, cfg) {
        Ok(ls) => match secret_key_rate(&ls) {
            Ok(rep) => Ok(rep.rate),
            Err(KeyRateError::NoKey) => Ok(0.0),
            Err(KeyRateError::Eval(e)) => Err(e.into()),
            Err(KeyRateError::Range { .. }) => Ok(0.0),
        },
        Err(EvalError::Singular { .. }) => Ok(0.0),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizationReport {
    pub strategy: CutoffStrategy,
    pub mode: Mode,
    pub seed: u64,
    /// Optimal threshold per level (one entry in uniform mode).
    pub thresholds: Vec<f64>,
    pub rate: f64,
    /// Rate of the same chain without cut-offs.
    pub baseline_rate: f64,
    /// Uniform thresholds sampled across the search range.
    pub curve: Vec<CurvePoint>,
    pub trace: Vec<f64>,
    pub converged: bool,
    pub generations: usize,
    pub evaluations: usize,
    /// Set when no threshold produces a positive rate.
    pub no_key: bool,
}

/// Maximizes the secret-key rate over cut-off thresholds.
pub fn optimize_cutoffs(
    problem: &OptimizationProblem,
    cfg: &EvalConfig,
) -> Result<OptimizationReport, OptimizeError> {
    let bound = problem.bounds(cfg.ttr);
    let dims = vec![bound; problem.dimension()];
    // Surface configuration errors before spending a search on them.
    let baseline_rate = chain_rate(problem.levels, &[], cfg)?;

    let failure: Mutex<Option<OptimizeError>> = Mutex::new(None);
    let de = differential_evolution(
        |x| match rate_for_thresholds(problem, cfg, x) {
            Ok(r) => -r,
            Err(e) => {
                failure.lock().expect("error slot").get_or_insert(e);
                f64::INFINITY
            }
        },
        &dims,
        &problem.de,
    )?;
    if let Some(e) = failure.into_inner().expect("error slot") {
        return Err(e);
    }

    let points = problem.curve_points;
    let samples: Vec<f64> = (0..points)
        .map(|k| {
            let u = if points > 1 {
                k as f64 / (points - 1) as f64
            } else {
                0.5
            };
            bound.snap(bound.lo + u * (bound.hi - bound.lo))
        })
        .collect();
    let curve = par::map_slice(&samples, |&v| {
        rate_for_thresholds(problem, cfg, &[v]).map(|rate| CurvePoint { threshold: v, rate })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let rate = (-de.value).max(0.0);
    Ok(OptimizationReport {
        strategy: problem.strategy,
        mode: problem.mode,
        seed: problem.de.seed,
        thresholds: de.best,
        rate,
        baseline_rate,
        curve,
        trace: de.trace.iter().map(|v| -v).collect(),
        converged: de.converged,
        generations: de.generations,
        evaluations: de.evaluations,
        no_key: rate <= 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HardwareAxis {
    PGen,
    PSwap,
    W0,
    TCoh,
}

impl HardwareAxis {
    pub fn apply(self, mut hw: HardwareParams, value: f64) -> HardwareParams {
        match self {
            Self::PGen => hw.p_gen = value,
            Self::PSwap => hw.p_swap = value,
            Self::W0 => hw.w0 = value,
            Self::TCoh => hw.t_coh = value,
        }
        hw
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub thresholds_target: Vec<f64>,
    pub rate_target: f64,
    pub rate_baseline: f64,
    /// `(R(target) - R(baseline)) / R(target)`; `None` when `R(target)` is 0.
    pub ratio: Option<f64>,
}

/// Re-optimizes the thresholds for each hardware variation and compares
/// with the thresholds optimized for the baseline hardware.
pub fn sensitivity_sweep(
    problem: &OptimizationProblem,
    cfg: &EvalConfig,
    axis: HardwareAxis,
    values: &[f64],
) -> Result<Vec<SweepRow>, OptimizeError> {
    let baseline = optimize_cutoffs(problem, cfg)?;
    values
        .iter()
        .map(|&value| {
            let mut c = *cfg;
            c.hardware = axis.apply(cfg.hardware, value);
            let target = if c.hardware == cfg.hardware {
                baseline.clone()
            } else {
                optimize_cutoffs(problem, &c)?
            };
            let rate_baseline = rate_for_thresholds(problem, &c, &baseline.thresholds)?;
            let ratio = (target.rate > 0.0).then(|| (target.rate - rate_baseline) / target.rate);
            Ok(SweepRow {
                value,
                thresholds_target: target.thresholds,
                rate_target: target.rate,
                rate_baseline,
                ratio,
            })
        })
        .collect()
}

/// Least-squares line `y = slope * x + intercept` and its R².
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    (slope, intercept, r2)
}

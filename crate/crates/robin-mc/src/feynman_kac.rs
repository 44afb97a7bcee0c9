//! Feynman–Kac estimators: Robin and Dirichlet solutions, resolvent, boundary
//! potential, and the fixed-point self-consistency residual.
//!
//! Path functionals use an exact-exponential step quadrature: over a step with
//! `S = λt + nA` going from `S_k` to `S_{k+1} = S_k + ΔS`,
//!
//! * the f-term contributes `f(X_k)·Δt·(e^{-S_k} - e^{-S_{k+1}})/ΔS`,
//! * the g-term contributes `g(X̄_k)·(n·ΔA/ΔS)·(e^{-S_k} - e^{-S_{k+1}})`,
//!
//! where `X̄_k` is the boundary contact point of the step. This makes the
//! constant-solution identities exact to machine precision instead of first
//! order in dt. Paths stop once the weight drops below the floor ε; the
//! omitted tail is bounded by `ε·(g_bound + f_bound/λ)` and reported.
//!
//! Estimates are bitwise independent of the worker count: every path draws
//! from its own indexed random stream and the reduction over path
//! contributions is a fixed-shape pairwise tree keyed by path index.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::CoefficientField;
use crate::error::Error;
use crate::geometry::{Domain, Region};
use crate::sde::{self, SimParams};
use crate::Result;

/// Scalar function on the domain or its boundary.
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// One boundary-value problem instance: `-Lu + λu = f` with boundary data `g`.
#[derive(Clone)]
pub struct ProblemSpec {
    pub domain: Domain,
    pub field: CoefficientField,
    pub lambda: f64,
    pub f: ScalarFn,
    pub g: ScalarFn,
    /// Known sup-norm bound of `f`, used for truncation tail budgets.
    pub f_bound: f64,
    /// Known sup-norm bound of `g` on the boundary.
    pub g_bound: f64,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("domain", &self.domain)
            .field("lambda", &self.lambda)
            .field("f_bound", &self.f_bound)
            .field("g_bound", &self.g_bound)
            .finish()
    }
}

impl ProblemSpec {
    pub fn new(
        domain: Domain,
        field: CoefficientField,
        lambda: f64,
        f: ScalarFn,
        g: ScalarFn,
        f_bound: f64,
        g_bound: f64,
    ) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
        }
        if domain.dim() != field.dim() {
            return Err(Error::DimensionMismatch { expected: domain.dim(), got: field.dim() });
        }
        if !(f_bound >= 0.0) || !(g_bound >= 0.0) {
            return Err(Error::InvalidParameter("sup-norm bounds must be nonnegative".into()));
        }
        Ok(ProblemSpec { domain, field, lambda, f, g, f_bound, g_bound })
    }
}

/// Monte Carlo estimate with CLT error bar and truncation diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct Estimate {
    pub mean: f64,
    /// Sample standard deviation divided by sqrt(paths).
    pub stderr: f64,
    /// Contributing paths (excludes aborted ones).
    pub paths: u64,
    pub dt: f64,
    /// Paths that stopped before their natural end (weight floor not reached
    /// for killed paths, or `max_steps` hit).
    pub truncation_flagged: u64,
    /// Paths discarded after exhausting the corner retry budget.
    pub aborted: u64,
    pub seed: u64,
    /// Deterministic bound on the omitted truncation tail per path.
    pub tail_bound: f64,
}

/// Robin estimate with the two components of the path functional recorded
/// separately: the f-part (interior integral) and the n·g-part (boundary
/// integral), whose separate limits are the killed resolvent and the
/// λ-harmonic extension.
#[derive(Debug, Clone, Serialize)]
pub struct SplitEstimate {
    pub total: Estimate,
    pub f_part: Estimate,
    pub g_part: Estimate,
}

/// Self-consistency check of the fixed-point identity: the Robin solution on
/// a grid against a fresh-path estimate of `R_λ(f·m + n(g - v_n)·σ)`.
#[derive(Debug, Clone, Serialize)]
pub struct FixedPointReport {
    pub residual_max: f64,
    pub residual_per_point: Vec<f64>,
    pub lhs: Vec<Estimate>,
    pub rhs: Vec<Estimate>,
    /// Per-point combined error bar `stderr(lhs) + stderr(rhs)`.
    pub combined_stderr: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Deterministic reductions
// ---------------------------------------------------------------------------

/// Kahan-compensated accumulator for per-path functionals.
#[derive(Default, Clone, Copy)]
struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    #[inline]
    fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    #[inline]
    fn value(&self) -> f64 {
        self.sum
    }
}

/// Fixed-shape pairwise tree sum; independent of thread scheduling.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 16 {
        let mut acc = Kahan::default();
        for v in values {
            acc.add(*v);
        }
        return acc.value();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

// ---------------------------------------------------------------------------
// Per-path samples
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum PathOutcome {
    Sample { f_part: f64, g_part: f64, truncated: bool },
    Aborted,
}

/// Map path indices to outcomes in parallel, preserving index order.
fn run_paths<F>(paths: u64, per_path: F) -> Result<Vec<PathOutcome>>
where
    F: Fn(u64) -> Result<PathOutcome> + Sync + Send,
{
    if paths == 0 {
        return Err(Error::ZeroPaths);
    }
    (0..paths).into_par_iter().map(per_path).collect()
}

struct Collected {
    f_values: Vec<f64>,
    g_values: Vec<f64>,
    totals: Vec<f64>,
    truncated: u64,
    aborted: u64,
}

fn collect(outcomes: Vec<PathOutcome>) -> Result<Collected> {
    let mut c = Collected {
        f_values: Vec::with_capacity(outcomes.len()),
        g_values: Vec::with_capacity(outcomes.len()),
        totals: Vec::with_capacity(outcomes.len()),
        truncated: 0,
        aborted: 0,
    };
    for o in outcomes {
        match o {
            PathOutcome::Sample { f_part, g_part, truncated } => {
                c.f_values.push(f_part);
                c.g_values.push(g_part);
                c.totals.push(f_part + g_part);
                if truncated {
                    c.truncated += 1;
                }
            }
            PathOutcome::Aborted => c.aborted += 1,
        }
    }
    if c.totals.is_empty() {
        return Err(Error::DegenerateGeometry("every path aborted".into()));
    }
    Ok(c)
}

fn assemble(c: &Collected, params: &SimParams, seed: u64, tail_bound: f64) -> SplitEstimate {
    let make = |values: &[f64]| {
        let (mean, stderr) = mean_and_stderr(values);
        Estimate {
            mean,
            stderr,
            paths: values.len() as u64,
            dt: params.dt,
            truncation_flagged: c.truncated,
            aborted: c.aborted,
            seed,
            tail_bound,
        }
    };
    SplitEstimate { total: make(&c.totals), f_part: make(&c.f_values), g_part: make(&c.g_values) }
}

#[inline]
fn eval_checked(func: &ScalarFn, name: &'static str, x: &[f64]) -> Result<f64> {
    let v = func(x);
    if v.is_nan() {
        return Err(Error::PropagatedNan { source_name: name, at: x.to_vec() });
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// Estimators
// ---------------------------------------------------------------------------

/// Robin-problem estimate split into its f- and g-components.
///
/// The penalty enters both the discount weight `e^{-λt - nA}` and the g-term
/// integrand `n·g·dA`.
pub fn estimate_robin_split(
    problem: &ProblemSpec,
    x: &[f64],
    penalty: f64,
    params: &SimParams,
    paths: u64,
    seed: u64,
) -> Result<SplitEstimate> {
    if !(penalty > 0.0) || !penalty.is_finite() {
        return Err(Error::InvalidParameter(format!("penalty must be positive, got {penalty}")));
    }
    reflected_functional(problem, x, penalty, penalty, params, paths, seed)
}

/// Probabilistic Robin solution `v_n(x)`.
pub fn estimate_robin(
    problem: &ProblemSpec,
    x: &[f64],
    penalty: f64,
    params: &SimParams,
    paths: u64,
    seed: u64,
) -> Result<Estimate> {
    Ok(estimate_robin_split(problem, x, penalty, params, paths, seed)?.total)
}

/// Resolvent `R_λ f(x)` of the reflected diffusion (the Robin functional with
/// the penalty set to zero, so the g-term vanishes).
pub fn estimate_resolvent(
    problem: &ProblemSpec,
    x: &[f64],
    params: &SimParams,
    paths: u64,
    seed: u64,
) -> Result<Estimate> {
    Ok(reflected_functional(problem, x, 0.0, 0.0, params, paths, seed)?.total)
}

/// Shared reflected-path functional. `weight_penalty` multiplies the local
/// time in the discount exponent, `integrand_penalty` scales the g·dA term.
fn reflected_functional(
    problem: &ProblemSpec,
    x: &[f64],
    weight_penalty: f64,
    integrand_penalty: f64,
    params: &SimParams,
    paths: u64,
    seed: u64,
) -> Result<SplitEstimate> {
    params.validate()?;
    if problem.domain.classify(x)? == Region::Exterior {
        return Err(Error::InvalidParameter(format!("evaluation point {x:?} is outside the domain")));
    }
    let dt = params.dt;
    let outcomes = run_paths(paths, |path_index| {
        let mut rng = sde::path_rng(seed, path_index);
        let mut acc_f = Kahan::default();
        let mut acc_g = Kahan::default();
        let summary = sde::drive_reflected(
            &problem.domain,
            &problem.field,
            params,
            problem.lambda,
            weight_penalty,
            x,
            &mut rng,
            |info| {
                let decrement = info.w_before - info.w_after;
                let q = decrement / info.delta_s;
                acc_f.add(eval_checked(&problem.f, "f", info.x_start)? * dt * q);
                if integrand_penalty != 0.0 {
                    if let Some((contact, d_a)) = info.contact {
                        if d_a > 0.0 {
                            // g is a boundary function; never evaluate it inside.
                            assert_ne!(
                                problem.domain.classify_unchecked(contact),
                                Region::Interior,
                                "boundary integrand evaluated at an interior point"
                            );
                            let gv = eval_checked(&problem.g, "g", contact)?;
                            acc_g.add(gv * (integrand_penalty * d_a) * q);
                        }
                    }
                }
                Ok(())
            },
        )?;
        if summary.aborted {
            return Ok(PathOutcome::Aborted);
        }
        Ok(PathOutcome::Sample {
            f_part: acc_f.value(),
            g_part: acc_g.value(),
            truncated: summary.truncation_incomplete,
        })
    })?;
    let collected = collect(outcomes)?;
    let tail = params.weight_floor * (problem.g_bound + problem.f_bound / problem.lambda);
    Ok(assemble(&collected, params, seed, tail))
}

/// Dirichlet estimate split into the interior f-part and the exit g-part.
pub fn estimate_dirichlet_split(
    problem: &ProblemSpec,
    x: &[f64],
    params: &SimParams,
    paths: u64,
    seed: u64,
) -> Result<SplitEstimate> {
    params.validate()?;
    if problem.domain.classify(x)? == Region::Exterior {
        return Err(Error::InvalidParameter(format!("evaluation point {x:?} is outside the domain")));
    }
    let outcomes = run_paths(paths, |path_index| {
        let mut rng = sde::path_rng(seed, path_index);
        let mut acc_f = Kahan::default();
        let mut g_part = 0.0;
        let lambda = problem.lambda;
        let summary = sde::drive_killed(
            &problem.domain,
            &problem.field,
            params,
            lambda,
            x,
            &mut rng,
            |info| {
                acc_f.add(eval_checked(&problem.f, "f", info.x_start)? * (info.w_before - info.w_after) / lambda);
                if let Some((exit_point, _exit_time)) = info.exit {
                    g_part = info.w_after * eval_checked(&problem.g, "g", exit_point)?;
                }
                Ok(())
            },
        )?;
        Ok(PathOutcome::Sample {
            f_part: acc_f.value(),
            g_part,
            truncated: !summary.exited,
        })
    })?;
    let collected = collect(outcomes)?;
    let tail = params.weight_floor * (problem.g_bound + problem.f_bound / problem.lambda);
    Ok(assemble(&collected, params, seed, tail))
}

/// Probabilistic Dirichlet solution `v(x)`.
pub fn estimate_dirichlet(
    problem: &ProblemSpec,
    x: &[f64],
    params: &SimParams,
    paths: u64,
    seed: u64,
) -> Result<Estimate> {
    Ok(estimate_dirichlet_split(problem, x, params, paths, seed)?.total)
}

/// Boundary potential `R_λ(g·σ)(x) = E_x ∫ e^{-λt} g(X_s) dA_s`, estimated
/// over reflected paths run to the `e^{-λt}` weight floor.
pub fn estimate_boundary_potential(
    problem: &ProblemSpec,
    x: &[f64],
    params: &SimParams,
    paths: u64,
    seed: u64,
) -> Result<Estimate> {
    params.validate()?;
    if problem.domain.classify(x)? == Region::Exterior {
        return Err(Error::InvalidParameter(format!("evaluation point {x:?} is outside the domain")));
    }
    let outcomes = run_paths(paths, |path_index| {
        let mut rng = sde::path_rng(seed, path_index);
        let mut acc = Kahan::default();
        let summary = sde::drive_reflected(
            &problem.domain,
            &problem.field,
            params,
            problem.lambda,
            0.0,
            x,
            &mut rng,
            |info| {
                if let Some((contact, d_a)) = info.contact {
                    if d_a > 0.0 {
                        assert_ne!(
                            problem.domain.classify_unchecked(contact),
                            Region::Interior,
                            "boundary integrand evaluated at an interior point"
                        );
                        acc.add(eval_checked(&problem.g, "g", contact)? * info.w_before * d_a);
                    }
                }
                Ok(())
            },
        )?;
        if summary.aborted {
            return Ok(PathOutcome::Aborted);
        }
        Ok(PathOutcome::Sample {
            f_part: 0.0,
            g_part: acc.value(),
            truncated: summary.truncation_incomplete,
        })
    })?;
    let collected = collect(outcomes)?;
    let tail = params.weight_floor * problem.g_bound;
    Ok(assemble(&collected, params, seed, tail).total)
}

/// Residual of the fixed-point identity on a grid.
///
/// First estimates `v_n` at every grid point; then, with fresh paths,
/// re-estimates the right-hand side `R_λ(f·m + n(g - v_n)·σ)` at each point,
/// evaluating `g - v_n` at boundary contacts by nearest-boundary-grid-point
/// interpolation. Boundary grid points must cover the contacts within 10% of
/// the domain diameter.
pub fn fixed_point_residual(
    problem: &ProblemSpec,
    penalty: f64,
    grid: &[Vec<f64>],
    params: &SimParams,
    paths: u64,
    seed: u64,
) -> Result<FixedPointReport> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("fixed-point grid must be non-empty".into()));
    }
    params.validate()?;

    // Pass 1: v_n on the whole grid.
    let lhs: Vec<Estimate> = grid
        .iter()
        .enumerate()
        .map(|(i, x)| {
            estimate_robin(problem, x, penalty, params, paths, sde::derive_seed(seed, i as u64))
        })
        .collect::<Result<_>>()?;

    // Boundary subset used to interpolate v_n at contact points.
    let mut boundary_table: Vec<(&[f64], f64)> = Vec::new();
    for (x, est) in grid.iter().zip(&lhs) {
        if problem.domain.classify(x)? == Region::Boundary {
            boundary_table.push((x.as_slice(), est.mean));
        }
    }
    let max_contact_dist = 0.1 * problem.domain.diameter();

    // Pass 2: fresh paths for the right-hand side.
    let dt = params.dt;
    let mut rhs = Vec::with_capacity(grid.len());
    for (i, x) in grid.iter().enumerate() {
        let rhs_seed = sde::derive_seed(seed, 0x5EED_0000_0000 + i as u64);
        let outcomes = run_paths(paths, |path_index| {
            let mut rng = sde::path_rng(rhs_seed, path_index);
            let mut acc_f = Kahan::default();
            let mut acc_g = Kahan::default();
            let summary = sde::drive_reflected(
                &problem.domain,
                &problem.field,
                params,
                problem.lambda,
                0.0,
                x,
                &mut rng,
                |info| {
                    let q = (info.w_before - info.w_after) / info.delta_s;
                    acc_f.add(eval_checked(&problem.f, "f", info.x_start)? * dt * q);
                    if let Some((contact, d_a)) = info.contact {
                        if d_a > 0.0 {
                            let mut best = f64::INFINITY;
                            let mut v_interp = 0.0;
                            for (bp, bv) in &boundary_table {
                                let d2: f64 = bp
                                    .iter()
                                    .zip(contact)
                                    .map(|(a, b)| (a - b) * (a - b))
                                    .sum();
                                if d2 < best {
                                    best = d2;
                                    v_interp = *bv;
                                }
                            }
                            if best.sqrt() > max_contact_dist {
                                return Err(Error::InsufficientBoundaryGrid {
                                    contact: contact.to_vec(),
                                    max_distance: max_contact_dist,
                                });
                            }
                            let gv = eval_checked(&problem.g, "g", contact)?;
                            acc_g.add((gv - v_interp) * (penalty * d_a) * info.w_before);
                        }
                    }
                    Ok(())
                },
            )?;
            if summary.aborted {
                return Ok(PathOutcome::Aborted);
            }
            Ok(PathOutcome::Sample {
                f_part: acc_f.value(),
                g_part: acc_g.value(),
                truncated: summary.truncation_incomplete,
            })
        })?;
        let collected = collect(outcomes)?;
        let tail = params.weight_floor * (problem.g_bound + problem.f_bound / problem.lambda);
        rhs.push(assemble(&collected, params, rhs_seed, tail).total);
    }

    let mut residual_per_point = Vec::with_capacity(grid.len());
    let mut combined_stderr = Vec::with_capacity(grid.len());
    let mut residual_max = 0.0f64;
    for (l, r) in lhs.iter().zip(&rhs) {
        let res = (l.mean - r.mean).abs();
        residual_per_point.push(res);
        combined_stderr.push(l.stderr + r.stderr);
        residual_max = residual_max.max(res);
    }

    Ok(FixedPointReport { residual_max, residual_per_point, lhs, rhs, combined_stderr })
}

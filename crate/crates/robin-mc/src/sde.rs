//! Projection Euler scheme for the reflected diffusion with boundary local
//! time, and the killed diffusion stopped at first exit.
//!
//! One Euler step proposes `y = x + b(x)·dt + σ(x)·√dt·z` with `σσᵀ = 2a` and
//! `b` the divergence drift. Proposals leaving the closed domain are projected
//! to the nearest boundary point `p` and pushed back into the domain along the
//! unit conormal `ν̂(p) = a(p)n(p)/|a(p)n(p)|` by the overshoot distance. Each
//! boundary contact accrues local time `dA = κ·overshoot/|a(p)n(p)|`, the
//! discrete counterpart of the conormal boundary term of the Skorohod
//! representation. The scale κ is calibrated against the finite-difference
//! Neumann solve (see [`crate::experiments::calibrate_local_time`]) and then
//! frozen.
//!
//! Paths draw from per-path random streams (ChaCha8, one stream per path
//! index under a common seed), so simulations are bitwise reproducible no
//! matter how work is scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientField, FieldKind, PreparedSqrt};
use crate::error::Error;
use crate::feynman_kac::ProblemSpec;
use crate::geometry::{Domain, Region};
use crate::Result;

/// Calibrated default for the local-time scale κ.
///
/// Produced by `calibrate_local_time` on the unit box with `a = I/2`, `λ = 1`,
/// `dt = 1e-4` against the finite-difference Neumann-flux solve, and
/// cross-checked on the unit ball. The half-space overshoot analysis predicts
/// κ → 2 as dt → 0.
pub const DEFAULT_LOCAL_TIME_SCALE: f64 = 2.0;

/// Conormal push re-projections before falling back to the projected point.
const MAX_PUSH_CORRECTIONS: usize = 8;

/// Fresh-noise retries when a box projection lands on an edge or corner.
const MAX_CORNER_RETRIES: usize = 100;

/// Discretization and truncation parameters of the path simulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimParams {
    /// Euler time step.
    pub dt: f64,
    /// Truncation floor ε: paths stop once the discount weight drops below it.
    pub weight_floor: f64,
    /// Safety cap on steps per path.
    pub max_steps: u64,
    /// Local-time scale κ.
    pub local_time_scale: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            dt: 1e-4,
            weight_floor: 1e-6,
            max_steps: 100_000_000,
            local_time_scale: DEFAULT_LOCAL_TIME_SCALE,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.weight_floor > 0.0 && self.weight_floor < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "weight_floor must lie in (0, 1), got {}",
                self.weight_floor
            )));
        }
        if !(self.local_time_scale > 0.0) || !self.local_time_scale.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "local_time_scale must be positive, got {}",
                self.local_time_scale
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidParameter("max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// One simulated trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    /// Times `t_k`, starting at 0.
    pub times: Vec<f64>,
    /// Positions `X_k`, all in the closed domain.
    pub positions: Vec<Vec<f64>>,
    /// Cumulative boundary local time `A_k`, nondecreasing with `A_0 = 0`.
    pub local_time: Vec<f64>,
    /// Whether the path left the domain (killed simulation only).
    pub exited: bool,
    pub exit_time: Option<f64>,
    pub exit_point: Option<Vec<f64>>,
    /// Set when `max_steps` was reached before the weight floor.
    pub truncation_incomplete: bool,
}

/// Per-path random stream: one ChaCha8 stream per path index under a common
/// seed, so path `i` draws the same noise regardless of worker scheduling.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// Deterministic sub-seed derivation (splitmix64 over `master ^ mixed tag`).
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Result of one reflected Euler step.
#[derive(Debug, Clone)]
pub struct ReflectedStep {
    pub x_next: Vec<f64>,
    /// Local-time increment; positive only when the proposal left the domain.
    pub d_local_time: f64,
    /// Boundary contact point of the step, if any.
    pub contact: Option<Vec<f64>>,
    /// The push correction budget was exhausted and the step fell back to the
    /// projected boundary point.
    pub degenerate_fallback: bool,
}

/// One reflected step with caller-supplied standard Gaussian noise.
///
/// `dt` and κ are taken from `params`. Fails with `NormalUndefined` when a box
/// projection lands within tolerance of an edge or corner; callers retry the
/// step with a fresh noise draw.
pub fn step_reflected(
    domain: &Domain,
    field: &CoefficientField,
    params: &SimParams,
    x: &[f64],
    noise: &[f64],
) -> Result<ReflectedStep> {
    params.validate()?;
    if x.len() != domain.dim() || noise.len() != domain.dim() {
        return Err(Error::DimensionMismatch {
            expected: domain.dim(),
            got: if x.len() != domain.dim() { x.len() } else { noise.len() },
        });
    }
    if domain.classify(x)? == Region::Exterior {
        return Err(Error::InvalidParameter(format!(
            "step_reflected: start {x:?} is outside the domain"
        )));
    }
    let mut stepper = Stepper::new(domain, field, params)?;
    let out = stepper.attempt_reflected(x, noise)?;
    Ok(ReflectedStep {
        x_next: stepper.next.clone(),
        d_local_time: out.d_local_time,
        contact: out.contact.then(|| stepper.contact.clone()),
        degenerate_fallback: out.degenerate_fallback,
    })
}

/// Scratch-buffer stepper shared by the reflected and killed drivers.
pub(crate) struct Stepper<'a> {
    domain: &'a Domain,
    field: &'a CoefficientField,
    sqrt: PreparedSqrt,
    dim: usize,
    dt: f64,
    sqrt_dt: f64,
    kappa: f64,
    drift_free: bool,
    // Scratch buffers, reused across steps.
    pub(crate) next: Vec<f64>,
    pub(crate) contact: Vec<f64>,
    drift: Vec<f64>,
    diffusion: Vec<f64>,
    normal: Vec<f64>,
    conormal: Vec<f64>,
    reproject: Vec<f64>,
}

pub(crate) struct StepOutcome {
    pub d_local_time: f64,
    pub contact: bool,
    pub degenerate_fallback: bool,
}

impl<'a> Stepper<'a> {
    pub fn new(domain: &'a Domain, field: &'a CoefficientField, params: &SimParams) -> Result<Self> {
        if domain.dim() != field.dim() {
            return Err(Error::DimensionMismatch { expected: domain.dim(), got: field.dim() });
        }
        let dim = domain.dim();
        Ok(Stepper {
            domain,
            field,
            sqrt: PreparedSqrt::new(field)?,
            dim,
            dt: params.dt,
            sqrt_dt: params.dt.sqrt(),
            kappa: params.local_time_scale,
            drift_free: matches!(field.kind(), FieldKind::Constant(_)),
            next: vec![0.0; dim],
            contact: vec![0.0; dim],
            drift: vec![0.0; dim],
            diffusion: vec![0.0; dim],
            normal: vec![0.0; dim],
            conormal: vec![0.0; dim],
            reproject: vec![0.0; dim],
        })
    }

    /// Propose and resolve one reflected step. Afterwards `self.next` holds
    /// the new position and, on contact, `self.contact` the boundary point.
    #[inline]
    pub fn attempt_reflected(&mut self, x: &[f64], noise: &[f64]) -> Result<StepOutcome> {
        self.propose(x, noise)?;
        if self.domain.classify_unchecked(&self.next) != Region::Exterior {
            return Ok(StepOutcome { d_local_time: 0.0, contact: false, degenerate_fallback: false });
        }

        let overshoot = self.domain.project_to_boundary_into(&self.next, &mut self.contact)?;
        self.domain.inward_normal_into(&self.contact, &mut self.normal)?;
        self.field.conormal_into(&self.contact, &self.normal, &mut self.conormal);
        let cn_norm = norm(&self.conormal);
        if !(cn_norm > 0.0) || !cn_norm.is_finite() {
            return Err(Error::DegenerateGeometry(format!(
                "conormal has invalid norm {cn_norm} at {:?}",
                self.contact
            )));
        }
        let d_local_time = self.kappa * overshoot / cn_norm;

        // Push back into the domain along the unit conormal, re-projecting if
        // the push itself exits.
        let inv = 1.0 / cn_norm;
        for i in 0..self.dim {
            self.next[i] = self.contact[i] + overshoot * self.conormal[i] * inv;
        }
        let mut degenerate_fallback = false;
        let mut corrections = 0;
        while self.domain.classify_unchecked(&self.next) == Region::Exterior {
            corrections += 1;
            if corrections > MAX_PUSH_CORRECTIONS {
                self.next.copy_from_slice(&self.contact);
                degenerate_fallback = true;
                break;
            }
            let o2 = self.domain.project_to_boundary_into(&self.next, &mut self.reproject)?;
            self.domain.inward_normal_into(&self.reproject, &mut self.normal)?;
            self.field.conormal_into(&self.reproject, &self.normal, &mut self.conormal);
            let cn2 = norm(&self.conormal);
            if !(cn2 > 0.0) || !cn2.is_finite() {
                return Err(Error::DegenerateGeometry(format!(
                    "conormal degenerate at {:?}",
                    self.reproject
                )));
            }
            let inv2 = 1.0 / cn2;
            for i in 0..self.dim {
                self.next[i] = self.reproject[i] + o2 * self.conormal[i] * inv2;
            }
        }

        Ok(StepOutcome { d_local_time, contact: true, degenerate_fallback })
    }

    /// Raw Euler proposal into `self.next`, without boundary handling.
    #[inline]
    pub fn propose(&mut self, x: &[f64], noise: &[f64]) -> Result<()> {
        self.sqrt.matvec_into(self.field, x, noise, &mut self.diffusion)?;
        if self.drift_free {
            for i in 0..self.dim {
                self.next[i] = x[i] + self.sqrt_dt * self.diffusion[i];
            }
        } else {
            self.field.divergence_drift_into(x, &mut self.drift);
            for i in 0..self.dim {
                self.next[i] = x[i] + self.drift[i] * self.dt + self.sqrt_dt * self.diffusion[i];
            }
        }
        let sd = self.domain.signed_distance(&self.next);
        if !sd.is_finite() {
            return Err(Error::DegenerateGeometry(format!(
                "non-finite proposal from {x:?} (signed distance {sd})"
            )));
        }
        Ok(())
    }
}

#[inline]
fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-step view handed to reflected-path visitors.
pub(crate) struct ReflectedStepInfo<'a> {
    /// Position at the start of the step (`X_k`).
    pub x_start: &'a [f64],
    /// Position after the step (`X_{k+1}`).
    pub x_next: &'a [f64],
    /// Boundary contact point and local-time increment, when the proposal
    /// left the domain.
    pub contact: Option<(&'a [f64], f64)>,
    /// Discount weight `e^{-S_k}` before the step.
    pub w_before: f64,
    /// Discount weight `e^{-S_{k+1}}` after the step.
    pub w_after: f64,
    /// `ΔS = λ·dt + n·dA` of the step.
    pub delta_s: f64,
    /// Time at the start of the step.
    pub t_start: f64,
}

/// Outcome summary of one driven reflected path.
#[derive(Debug, Clone, Default)]
pub(crate) struct ReflectedRunSummary {
    pub steps: u64,
    pub final_time: f64,
    pub final_local_time: f64,
    /// Corner retry budget exhausted; the path is unusable.
    pub aborted: bool,
    /// `max_steps` hit before the weight floor.
    pub truncation_incomplete: bool,
    /// Conormal pushes that fell back to the projected boundary point.
    pub degenerate_pushes: u64,
}

/// Drive a reflected path until the weight `e^{-λt - nA}` drops below the
/// floor, calling `visit` once per step.
pub(crate) fn drive_reflected<F>(
    domain: &Domain,
    field: &CoefficientField,
    params: &SimParams,
    lambda: f64,
    penalty: f64,
    x0: &[f64],
    rng: &mut ChaCha8Rng,
    mut visit: F,
) -> Result<ReflectedRunSummary>
where
    F: FnMut(&ReflectedStepInfo<'_>) -> Result<()>,
{
    let mut stepper = Stepper::new(domain, field, params)?;
    if domain.classify(x0)? == Region::Exterior {
        return Err(Error::InvalidParameter(format!(
            "reflected path start {x0:?} is outside the domain"
        )));
    }

    let dim = domain.dim();
    let mut x = x0.to_vec();
    let mut noise = vec![0.0; dim];
    let mut summary = ReflectedRunSummary::default();
    let mut w = 1.0f64;
    let mut local_time = 0.0f64;
    let interior_decay = (-lambda * params.dt).exp();
    let interior_delta_s = lambda * params.dt;

    loop {
        // Corner projections retry the whole step with fresh noise.
        let mut retries = 0;
        let outcome = loop {
            for n in noise.iter_mut() {
                *n = rng.sample(StandardNormal);
            }
            match stepper.attempt_reflected(&x, &noise) {
                Ok(out) => break out,
                Err(Error::NormalUndefined(_)) => {
                    retries += 1;
                    if retries > MAX_CORNER_RETRIES {
                        summary.aborted = true;
                        summary.final_time = summary.steps as f64 * params.dt;
                        summary.final_local_time = local_time;
                        return Ok(summary);
                    }
                }
                Err(e) => return Err(e),
            }
        };
        if outcome.degenerate_fallback {
            summary.degenerate_pushes += 1;
        }

        let (delta_s, w_after) = if outcome.contact && penalty != 0.0 {
            let ds = lambda * params.dt + penalty * outcome.d_local_time;
            (ds, w * (-ds).exp())
        } else {
            (interior_delta_s, w * interior_decay)
        };

        visit(&ReflectedStepInfo {
            x_start: &x,
            x_next: &stepper.next,
            contact: outcome.contact.then(|| (stepper.contact.as_slice(), outcome.d_local_time)),
            w_before: w,
            w_after,
            delta_s,
            t_start: summary.steps as f64 * params.dt,
        })?;

        local_time += outcome.d_local_time;
        w = w_after;
        summary.steps += 1;
        x.copy_from_slice(&stepper.next);

        if w < params.weight_floor {
            break;
        }
        if summary.steps >= params.max_steps {
            summary.truncation_incomplete = true;
            break;
        }
    }

    summary.final_time = summary.steps as f64 * params.dt;
    summary.final_local_time = local_time;
    Ok(summary)
}

/// Per-step view handed to killed-path visitors.
pub(crate) struct KilledStepInfo<'a> {
    pub x_start: &'a [f64],
    /// Position after the step; the exit point for exit steps.
    pub x_next: &'a [f64],
    /// Exit point and exit time when the proposal left the open domain.
    pub exit: Option<(&'a [f64], f64)>,
    pub w_before: f64,
    pub w_after: f64,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct KilledRunSummary {
    pub steps: u64,
    pub exited: bool,
    pub exit_time: f64,
    pub truncation_incomplete: bool,
}

/// Drive a killed path: Euler steps without reflection, stopping at the first
/// proposal that leaves the open domain, at the weight floor, or at
/// `max_steps`. Paths started on the boundary exit immediately.
pub(crate) fn drive_killed<F>(
    domain: &Domain,
    field: &CoefficientField,
    params: &SimParams,
    lambda: f64,
    x0: &[f64],
    rng: &mut ChaCha8Rng,
    mut visit: F,
) -> Result<KilledRunSummary>
where
    F: FnMut(&KilledStepInfo<'_>) -> Result<()>,
{
    let mut stepper = Stepper::new(domain, field, params)?;
    let mut summary = KilledRunSummary::default();

    match domain.classify(x0)? {
        Region::Exterior => {
            return Err(Error::InvalidParameter(format!(
                "killed path start {x0:?} is outside the domain"
            )));
        }
        Region::Boundary => {
            // Boundary points are regular: the exit is immediate.
            summary.exited = true;
            summary.exit_time = 0.0;
            visit(&KilledStepInfo {
                x_start: x0,
                x_next: x0,
                exit: Some((x0, 0.0)),
                w_before: 1.0,
                w_after: 1.0,
            })?;
            return Ok(summary);
        }
        Region::Interior => {}
    }

    let dim = domain.dim();
    let mut x = x0.to_vec();
    let mut noise = vec![0.0; dim];
    let mut w = 1.0f64;
    let interior_decay = (-lambda * params.dt).exp();

    loop {
        for n in noise.iter_mut() {
            *n = rng.sample(StandardNormal);
        }
        stepper.propose(&x, &noise)?;
        let w_after = w * interior_decay;
        let t_next = (summary.steps + 1) as f64 * params.dt;

        if domain.classify_unchecked(&stepper.next) != Region::Interior {
            stepper.contact.copy_from_slice(&stepper.next);
            let exit_sd = domain.signed_distance(&stepper.next);
            if exit_sd > 0.0 {
                domain.project_to_boundary_into(&stepper.next, &mut stepper.contact)?;
            }
            summary.exited = true;
            summary.exit_time = t_next;
            summary.steps += 1;
            visit(&KilledStepInfo {
                x_start: &x,
                x_next: &stepper.contact,
                exit: Some((stepper.contact.as_slice(), t_next)),
                w_before: w,
                w_after,
            })?;
            return Ok(summary);
        }

        visit(&KilledStepInfo {
            x_start: &x,
            x_next: &stepper.next,
            exit: None,
            w_before: w,
            w_after,
        })?;
        w = w_after;
        summary.steps += 1;
        x.copy_from_slice(&stepper.next);

        if w < params.weight_floor {
            break;
        }
        if summary.steps >= params.max_steps {
            summary.truncation_incomplete = true;
            break;
        }
    }

    summary.exit_time = summary.steps as f64 * params.dt;
    Ok(summary)
}

/// Simulate one reflected path and record its trajectory.
///
/// The weight `e^{-λt - nA}` uses `λ` from `problem` and the given penalty;
/// the path stops at the weight floor and never exits the closed domain.
pub fn simulate_reflected(
    x0: &[f64],
    problem: &ProblemSpec,
    penalty: f64,
    params: &SimParams,
    seed: u64,
) -> Result<PathRecord> {
    params.validate()?;
    if penalty < 0.0 {
        return Err(Error::InvalidParameter(format!("penalty must be nonnegative, got {penalty}")));
    }
    let dt = params.dt;
    let mut record = PathRecord {
        times: vec![0.0],
        positions: vec![x0.to_vec()],
        local_time: vec![0.0],
        exited: false,
        exit_time: None,
        exit_point: None,
        truncation_incomplete: false,
    };
    let mut rng = path_rng(seed, 0);
    let mut cumulative = 0.0;
    let summary = drive_reflected(
        &problem.domain,
        &problem.field,
        params,
        problem.lambda,
        penalty,
        x0,
        &mut rng,
        |info| {
            record.times.push(info.t_start + dt);
            record.positions.push(info.x_next.to_vec());
            cumulative += info.contact.map(|(_, da)| da).unwrap_or(0.0);
            record.local_time.push(cumulative);
            Ok(())
        },
    )?;
    if summary.aborted {
        return Err(Error::DegenerateGeometry(
            "corner retry budget exhausted; path aborted".into(),
        ));
    }
    record.truncation_incomplete = summary.truncation_incomplete;
    Ok(record)
}

/// Simulate one killed path: Euler steps without reflection, stopping at the
/// first exit, the weight floor, or `max_steps`.
pub fn simulate_killed(
    x0: &[f64],
    problem: &ProblemSpec,
    params: &SimParams,
    seed: u64,
) -> Result<PathRecord> {
    params.validate()?;
    let dt = params.dt;
    let mut record = PathRecord {
        times: vec![0.0],
        positions: vec![x0.to_vec()],
        local_time: vec![0.0],
        exited: false,
        exit_time: None,
        exit_point: None,
        truncation_incomplete: false,
    };
    let mut rng = path_rng(seed, 0);
    let mut exit_point: Option<Vec<f64>> = None;
    let mut t = 0.0;
    let summary = drive_killed(
        &problem.domain,
        &problem.field,
        params,
        problem.lambda,
        x0,
        &mut rng,
        |info| {
            if let Some((p, t_exit)) = info.exit {
                exit_point = Some(p.to_vec());
                if t_exit > 0.0 {
                    record.times.push(t_exit);
                    record.positions.push(p.to_vec());
                    record.local_time.push(0.0);
                }
            } else {
                t += dt;
                record.times.push(t);
                record.positions.push(info.x_next.to_vec());
                record.local_time.push(0.0);
            }
            Ok(())
        },
    )?;
    record.exited = summary.exited;
    record.truncation_incomplete = summary.truncation_incomplete;
    if summary.exited {
        record.exit_time = Some(summary.exit_time);
        record.exit_point = exit_point;
    }
    Ok(record)
}

//! Factor graph over the receiver state chain and its weighted nonlinear
//! least-squares solver.
//!
//! Each epoch contributes four unknowns (position and clock bias). Pseudorange
//! factors touch a single epoch, Doppler velocity factors link consecutive
//! epochs, so the normal equations are block tridiagonal with 4x4 blocks and
//! are factored with a block Cholesky sweep.

use crate::baselines::{observation_sigmas, wls_position};
use crate::obs_model::{
    doppler_velocity_residual, doppler_wls_velocity, pseudorange_residual, EpochObservations, EpochState, ObsError,
    SatelliteObservation, SigmaModelConfig,
};
use log::debug;
use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use std::ops::{AddAssign, SubAssign};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("no epochs")]
    Empty,
    #[error("epoch {epoch} (t = {t}) has no observations")]
    EmptyEpoch { epoch: usize, t: f64 },
    #[error("epoch times must strictly increase (epoch {epoch})")]
    NonIncreasingTime { epoch: usize },
    #[error("no epoch admits a snapshot position fix")]
    NoInitialFix,
    #[error("epochs {first}..={last} are not anchored by any epoch with 4 or more pseudoranges")]
    Unobservable { first: usize, last: usize },
    #[error("observation model: {0}")]
    Observation(#[from] ObsError),
    #[error("sigma model failed at epoch {epoch}: {reason}")]
    Sigma { epoch: usize, reason: String },
    #[error("expected {expected} {what}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("weight {value} at factor {index} is outside [0, 1]")]
    InvalidWeight { index: usize, value: f64 },
    #[error("cost became non-finite")]
    NonFiniteCost,
    #[error("normal equations are singular")]
    Singular,
}

/// Doppler velocity factor noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DvConfig {
    /// Per-axis standard deviation (m/s).
    pub sigma: Vector3<f64>,
}

impl Default for DvConfig {
    fn default() -> Self {
        Self { sigma: Vector3::repeat(0.1) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudorangeFactor {
    pub epoch: usize,
    pub obs: SatelliteObservation,
    pub sigma: f64,
}

/// Links epoch `epoch` to `epoch + 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityFactor {
    pub epoch: usize,
    pub v_meas: Vector3<f64>,
    pub sigma: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorGraph {
    pub times: Vec<f64>,
    pub pr_factors: Vec<PseudorangeFactor>,
    pub dv_factors: Vec<VelocityFactor>,
    /// Snapshot initialization (WLS position, Doppler velocity) per epoch.
    pub initial: Vec<EpochState>,
}

impl FactorGraph {
    pub fn num_epochs(&self) -> usize {
        self.times.len()
    }
}

/// Per-pseudorange-factor weights, aligned with `FactorGraph::pr_factors`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    keys: Vec<(usize, u32)>,
    values: Vec<f64>,
}

impl WeightSet {
    pub fn ones(graph: &FactorGraph) -> Self {
        Self::uniform(graph, 1.0)
    }

    fn uniform(graph: &FactorGraph, value: f64) -> Self {
        Self {
            keys: graph.pr_factors.iter().map(|f| (f.epoch, f.obs.sat_id)).collect(),
            values: vec![value; graph.pr_factors.len()],
        }
    }

    pub fn from_values(graph: &FactorGraph, values: Vec<f64>) -> Result<Self, GraphError> {
        if values.len() != graph.pr_factors.len() {
            return Err(GraphError::Dimension { what: "weights", expected: graph.pr_factors.len(), got: values.len() });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, w)| !(0.0..=1.0).contains(*w)) {
            return Err(GraphError::InvalidWeight { index, value });
        }
        Ok(Self { keys: graph.pr_factors.iter().map(|f| (f.epoch, f.obs.sat_id)).collect(), values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `(epoch index, sat_id)` of each weight.
    pub fn keys(&self) -> &[(usize, u32)] {
        &self.keys
    }

    pub fn get(&self, epoch: usize, sat_id: u32) -> Option<f64> {
        self.keys.iter().position(|k| *k == (epoch, sat_id)).map(|i| self.values[i])
    }
}

/// Builds the pseudorange/Doppler factor graph.
///
/// Every observation becomes a pseudorange factor carrying the sigma its
/// epoch's snapshot WLS fix was weighted with. Epochs without a fix borrow
/// the nearest earlier fix (or the first later one at the start of the
/// sequence). A velocity factor joins epochs `k` and `k+1` whenever the
/// Doppler velocity at epoch `k` can be solved.
pub fn build_graph(
    epochs: &[EpochObservations],
    sigma_cfg: &SigmaModelConfig,
    dv_cfg: &DvConfig,
) -> Result<FactorGraph, GraphError> {
    if epochs.is_empty() {
        return Err(GraphError::Empty);
    }
    for (k, e) in epochs.iter().enumerate() {
        if e.observations.is_empty() {
            return Err(GraphError::EmptyEpoch { epoch: k, t: e.t });
        }
        if k > 0 && !(e.t > epochs[k - 1].t) {
            return Err(GraphError::NonIncreasingTime { epoch: k });
        }
    }

    let mut fixes: Vec<Option<(Vector3<f64>, f64)>> = Vec::with_capacity(epochs.len());
    let mut fix_sigmas: Vec<Option<Vec<f64>>> = Vec::with_capacity(epochs.len());
    let mut prev = None;
    for e in epochs {
        match wls_position(&e.observations, sigma_cfg, prev) {
            Ok(fix) => {
                prev = Some(fix.pos);
                fixes.push(Some((fix.pos, fix.clk_bias)));
                fix_sigmas.push(Some(fix.sigmas));
            }
            Err(err) => {
                debug!("no snapshot fix at t = {}: {err}", e.t);
                fixes.push(None);
                fix_sigmas.push(None);
            }
        }
    }
    let first_fix = fixes.iter().flatten().next().copied().ok_or(GraphError::NoInitialFix)?;
    let mut filled = Vec::with_capacity(epochs.len());
    let mut last = first_fix;
    for f in &fixes {
        if let Some(f) = f {
            last = *f;
        }
        filled.push(last);
    }

    let mut pr_factors = Vec::new();
    let mut initial = Vec::with_capacity(epochs.len());
    let mut velocities = Vec::with_capacity(epochs.len());
    for (k, e) in epochs.iter().enumerate() {
        let (pos, clk) = filled[k];
        let sigmas = match fix_sigmas[k].take() {
            Some(sigmas) => sigmas,
            None => observation_sigmas(&e.observations, &pos, sigma_cfg)
                .map_err(|err| GraphError::Sigma { epoch: k, reason: err.to_string() })?,
        };
        for (o, sigma) in e.observations.iter().zip(sigmas) {
            pr_factors.push(PseudorangeFactor { epoch: k, obs: o.clone(), sigma });
        }
        let vel = doppler_wls_velocity(&e.observations, &pos).ok();
        let (v, drift) = vel.map(|v| (v.vel, v.clk_drift)).unwrap_or((Vector3::zeros(), 0.0));
        initial.push(EpochState { t: e.t, pos, vel: v, clk_bias: clk, clk_drift: drift });
        velocities.push(vel);
    }

    let dv_factors: Vec<VelocityFactor> = (0..epochs.len().saturating_sub(1))
        .filter_map(|k| velocities[k].map(|v| VelocityFactor { epoch: k, v_meas: v.vel, sigma: dv_cfg.sigma }))
        .collect();

    check_observability(epochs, &dv_factors)?;

    Ok(FactorGraph { times: epochs.iter().map(|e| e.t).collect(), pr_factors, dv_factors, initial })
}

/// Every run of epochs chained by velocity factors needs one epoch with at
/// least four pseudoranges to pin its absolute position.
fn check_observability(epochs: &[EpochObservations], dv: &[VelocityFactor]) -> Result<(), GraphError> {
    let mut linked = vec![false; epochs.len()];
    for f in dv {
        linked[f.epoch] = true;
    }
    let mut start = 0;
    for k in 0..epochs.len() {
        let run_ends = k + 1 == epochs.len() || !linked[k];
        if run_ends {
            if !epochs[start..=k].iter().any(|e| e.observations.len() >= 4) {
                return Err(GraphError::Unobservable { first: start, last: k });
            }
            start = k + 1;
        }
    }
    Ok(())
}

/// Damped Gauss-Newton controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub max_iterations: usize,
    /// Relative cost decrease below which the solve stops.
    pub cost_tolerance: f64,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Damping above which a failing step ends the solve.
    pub max_damping: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            cost_tolerance: 1e-8,
            initial_damping: 1e-4,
            damping_up: 10.0,
            damping_down: 0.1,
            max_damping: 1e12,
        }
    }
}

/// Residual of one pseudorange factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorResidual {
    pub epoch: usize,
    pub t: f64,
    pub sat_id: u32,
    /// Whitened residual `(ρ - h) / σ`.
    pub residual: f64,
    /// Residual in meters.
    pub residual_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub residuals: Vec<FactorResidual>,
}

/// Cost decomposition of a weighted graph at given states.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub total: f64,
    pub pr_cost: f64,
    pub dv_cost: f64,
    pub residuals: Vec<FactorResidual>,
}

fn check_dims(graph: &FactorGraph, weights: &WeightSet, states: &[EpochState]) -> Result<(), GraphError> {
    if states.len() != graph.num_epochs() {
        return Err(GraphError::Dimension { what: "states", expected: graph.num_epochs(), got: states.len() });
    }
    if weights.len() != graph.pr_factors.len() {
        return Err(GraphError::Dimension { what: "weights", expected: graph.pr_factors.len(), got: weights.len() });
    }
    if let Some((index, &value)) = weights.values().iter().enumerate().find(|(_, w)| !(0.0..=1.0).contains(*w)) {
        return Err(GraphError::InvalidWeight { index, value });
    }
    Ok(())
}

/// Whitened and metric residual of every pseudorange factor.
pub fn pseudorange_residuals(graph: &FactorGraph, states: &[EpochState]) -> Result<Vec<FactorResidual>, GraphError> {
    graph
        .pr_factors
        .iter()
        .map(|f| {
            let r = pseudorange_residual(&f.obs, &states[f.epoch], f.sigma)?;
            Ok(FactorResidual {
                epoch: f.epoch,
                t: graph.times[f.epoch],
                sat_id: f.obs.sat_id,
                residual: r.residual,
                residual_m: r.residual * f.sigma,
            })
        })
        .collect()
}

fn velocity_cost(graph: &FactorGraph, states: &[EpochState]) -> Result<f64, GraphError> {
    let mut cost = 0.0;
    for f in &graph.dv_factors {
        let r = doppler_velocity_residual(&f.v_meas, &f.sigma, &states[f.epoch], &states[f.epoch + 1])?;
        cost += r.residual.norm_squared();
    }
    Ok(cost)
}

/// `Σ‖e_DV‖² + Σ ω‖e_s‖²` and its parts.
pub fn evaluate_objective(
    graph: &FactorGraph,
    weights: &WeightSet,
    states: &[EpochState],
) -> Result<Objective, GraphError> {
    check_dims(graph, weights, states)?;
    let residuals = pseudorange_residuals(graph, states)?;
    let pr_cost: f64 = residuals.iter().zip(weights.values()).map(|(r, w)| w * r.residual * r.residual).sum();
    let dv_cost = velocity_cost(graph, states)?;
    Ok(Objective { total: pr_cost + dv_cost, pr_cost, dv_cost, residuals })
}

fn total_cost(graph: &FactorGraph, weights: &WeightSet, states: &[EpochState]) -> Result<f64, GraphError> {
    let mut pr = 0.0;
    for (f, w) in graph.pr_factors.iter().zip(weights.values()) {
        let r = pseudorange_residual(&f.obs, &states[f.epoch], f.sigma)?.residual;
        pr += w * r * r;
    }
    Ok(pr + velocity_cost(graph, states)?)
}

/// Change of the total cost when `step` is applied to `states`.
///
/// Pseudoranges are ~2e7 m, so differencing two full cost evaluations loses
/// about 1e-8 of relative precision; working with residual differences keeps
/// the change accurate down to sub-micron steps.
fn cost_change(
    graph: &FactorGraph,
    weights: &WeightSet,
    states: &[EpochState],
    step: &[Vector4<f64>],
) -> Result<f64, GraphError> {
    let mut change = 0.0;
    for (f, w) in graph.pr_factors.iter().zip(weights.values()) {
        let r0 = pseudorange_residual(&f.obs, &states[f.epoch], f.sigma)?.residual;
        let d = f.obs.sat_pos - states[f.epoch].pos;
        let dp = step[f.epoch].fixed_rows::<3>(0).into_owned();
        let d1 = d - dp;
        // ‖d1‖ - ‖d‖ without cancellation
        let range_change = (dp.dot(&dp) - 2.0 * d.dot(&dp)) / (d1.norm() + d.norm());
        let dr = -(range_change + step[f.epoch][3]) / f.sigma;
        change += w * dr * (2.0 * r0 + dr);
    }
    for f in &graph.dv_factors {
        let (a, b) = (&states[f.epoch], &states[f.epoch + 1]);
        let r0 = doppler_velocity_residual(&f.v_meas, &f.sigma, a, b)?.residual;
        let dt = b.t - a.t;
        let dp = (step[f.epoch + 1].fixed_rows::<3>(0) - step[f.epoch].fixed_rows::<3>(0)) / dt;
        let dr = -dp.component_div(&f.sigma);
        change += dr.dot(&(2.0 * r0 + dr));
    }
    Ok(change)
}

/// Normal equations `A δ = b` in block-tridiagonal form.
struct NormalEquations {
    diag: Vec<Matrix4<f64>>,
    /// `upper[k]` couples epoch `k` with `k + 1`.
    upper: Vec<Matrix4<f64>>,
    rhs: Vec<Vector4<f64>>,
}

fn linearize(graph: &FactorGraph, weights: &WeightSet, states: &[EpochState]) -> Result<NormalEquations, GraphError> {
    let n = graph.num_epochs();
    let mut eq = NormalEquations {
        diag: vec![Matrix4::zeros(); n],
        upper: vec![Matrix4::zeros(); n.saturating_sub(1)],
        rhs: vec![Vector4::zeros(); n],
    };
    for (f, &w) in graph.pr_factors.iter().zip(weights.values()) {
        let r = pseudorange_residual(&f.obs, &states[f.epoch], f.sigma)?;
        let j = Vector4::new(r.d_pos.x, r.d_pos.y, r.d_pos.z, r.d_clk);
        eq.diag[f.epoch] += w * j * j.transpose();
        eq.rhs[f.epoch] -= w * r.residual * j;
    }
    for f in &graph.dv_factors {
        let (a, b) = (f.epoch, f.epoch + 1);
        let r = doppler_velocity_residual(&f.v_meas, &f.sigma, &states[a], &states[b])?;
        let j0t: Matrix3<f64> = r.d_pos0.transpose();
        let j1t: Matrix3<f64> = r.d_pos1.transpose();
        eq.diag[a].fixed_view_mut::<3, 3>(0, 0).add_assign(j0t * r.d_pos0);
        eq.diag[b].fixed_view_mut::<3, 3>(0, 0).add_assign(j1t * r.d_pos1);
        eq.upper[a].fixed_view_mut::<3, 3>(0, 0).add_assign(j0t * r.d_pos1);
        eq.rhs[a].fixed_rows_mut::<3>(0).sub_assign(j0t * r.residual);
        eq.rhs[b].fixed_rows_mut::<3>(0).sub_assign(j1t * r.residual);
    }
    Ok(eq)
}

/// Solves a symmetric positive-definite block-tridiagonal system.
///
/// Factors `A = RᵀR` with `R` upper block-bidiagonal: `R_kk = L_kᵀ` where
/// `L_k L_kᵀ = D_k - B_{k-1}ᵀ B_{k-1}` and `B_k = L_k⁻¹ U_k`.
/// Returns `None` when a pivot block is not positive definite.
pub fn solve_block_tridiagonal(
    diag: &[Matrix4<f64>],
    upper: &[Matrix4<f64>],
    rhs: &[Vector4<f64>],
) -> Option<Vec<Vector4<f64>>> {
    let n = diag.len();
    assert_eq!(rhs.len(), n);
    assert_eq!(upper.len(), n.saturating_sub(1));
    let mut lower: Vec<Matrix4<f64>> = Vec::with_capacity(n);
    let mut coupling: Vec<Matrix4<f64>> = Vec::with_capacity(n.saturating_sub(1));
    let mut z: Vec<Vector4<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut s = diag[k];
        let mut g = rhs[k];
        if k > 0 {
            let b = &coupling[k - 1];
            s -= b.transpose() * b;
            g -= b.transpose() * z[k - 1];
        }
        let chol = s.cholesky()?;
        let l = chol.l();
        let zk = l.solve_lower_triangular(&g)?;
        if k + 1 < n {
            coupling.push(l.solve_lower_triangular(&upper[k])?);
        }
        lower.push(l);
        z.push(zk);
    }
    let mut x = vec![Vector4::zeros(); n];
    for k in (0..n).rev() {
        let mut v = z[k];
        if k + 1 < n {
            v -= coupling[k] * x[k + 1];
        }
        x[k] = lower[k].transpose().solve_upper_triangular(&v)?;
    }
    if x.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
        return None;
    }
    Some(x)
}

fn apply_step(states: &[EpochState], step: &[Vector4<f64>]) -> Vec<EpochState> {
    states
        .iter()
        .zip(step)
        .map(|(s, d)| EpochState { pos: s.pos + d.fixed_rows::<3>(0), clk_bias: s.clk_bias + d[3], ..*s })
        .collect()
}

/// Minimizes `Σ‖e_DV‖² + Σ ω‖e_s‖²` over positions and clock biases.
///
/// Levenberg-Marquardt with diagonal scaling. A step is kept when it lowers
/// the total cost and the re-evaluated cost does not exceed the initial one.
/// Successive history entries can therefore differ from monotone by the
/// rounding of a full cost evaluation, while the final cost never exceeds
/// the initial one.
/// Velocity and drift fields of `init` are carried through untouched.
pub fn solve(
    graph: &FactorGraph,
    weights: &WeightSet,
    init: &[EpochState],
    opts: &SolveOptions,
) -> Result<(Vec<EpochState>, SolveReport), GraphError> {
    check_dims(graph, weights, init)?;
    let mut states = init.to_vec();
    let mut cost = total_cost(graph, weights, &states)?;
    if !cost.is_finite() {
        return Err(GraphError::NonFiniteCost);
    }
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = opts.initial_damping;
    let mut converged = false;
    let mut iterations = 0;

    'outer: while iterations < opts.max_iterations {
        if cost == 0.0 {
            converged = true;
            break;
        }
        iterations += 1;
        let eq = linearize(graph, weights, &states)?;
        let mut factored_once = false;
        loop {
            if lambda > opts.max_damping {
                if !factored_once {
                    return Err(GraphError::Singular);
                }
                // no damped step lowers the cost any further
                converged = true;
                break 'outer;
            }
            let damped: Vec<Matrix4<f64>> = eq
                .diag
                .iter()
                .map(|d| d + Matrix4::from_diagonal(&d.diagonal()) * lambda)
                .collect();
            let Some(step) = solve_block_tridiagonal(&damped, &eq.upper, &eq.rhs) else {
                lambda *= opts.damping_up;
                continue;
            };
            factored_once = true;
            let change = cost_change(graph, weights, &states, &step)?;
            let candidate = apply_step(&states, &step);
            let new_cost = total_cost(graph, weights, &candidate)?;
            if !change.is_finite() || !new_cost.is_finite() {
                return Err(GraphError::NonFiniteCost);
            }
            if change < 0.0 && new_cost <= initial_cost {
                let relative = -change / cost;
                states = candidate;
                cost = new_cost;
                history.push(cost);
                lambda = (lambda * opts.damping_down).max(1e-15);
                if relative < opts.cost_tolerance {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            lambda *= opts.damping_up;
        }
    }

    let residuals = pseudorange_residuals(graph, &states)?;
    debug!("solve: cost {initial_cost:.6e} -> {cost:.6e} in {iterations} iterations (converged: {converged})");
    Ok((
        states,
        SolveReport { initial_cost, final_cost: cost, iterations, converged, cost_history: history, residuals },
    ))
}

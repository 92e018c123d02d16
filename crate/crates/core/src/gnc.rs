//! Robust kernels and graduated non-convexity over the factor graph.
//!
//! The robust problem `min Σ‖e_DV‖² + Σ ρ(ẽ)` is handled through its
//! outlier-process form `min Σ‖e_DV‖² + Σ ω ẽ² + Φ(ω)`: states are solved
//! with fixed weights, then every weight is set to the closed-form minimizer
//! of `ω ẽ² + Φ(ω)`. The Geman-McClure kernel is reached through the
//! surrogate family `ρ_θ(r) = θc²r² / (θc² + r²)`, starting with a large θ
//! (nearly quadratic) and shrinking it toward 1.
//!
//! All residuals here are sigma-whitened pseudorange residuals.

use crate::graph::{self, FactorGraph, GraphError, SolveOptions};
use crate::obs_model::EpochState;
use log::{debug, info};
use thiserror::Error;

pub use crate::graph::WeightSet;

/// Smallest weight handed back by the weight update.
pub const WEIGHT_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GncError {
    #[error("weight {0} is outside (0, 1]")]
    WeightOutOfRange(f64),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("solver failed at theta = {theta}: {source}")]
    Solver { theta: f64, source: GraphError },
    #[error("diverged in round {round}: {reason}")]
    Diverged { round: usize, reason: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Geman-McClure loss `c²r² / (c² + r²)`.
pub fn gm_loss(r: f64, c: f64) -> f64 {
    let (c2, r2) = (c * c, r * r);
    c2 * r2 / (c2 + r2)
}

/// IRLS weight of the Geman-McClure kernel, `(c² / (c² + r²))²`.
pub fn gm_weight(r: f64, c: f64) -> f64 {
    let c2 = c * c;
    let w = c2 / (c2 + r * r);
    w * w
}

/// Cauchy loss `(c²/2) ln(1 + r²/c²)`.
pub fn cauchy_loss(r: f64, c: f64) -> f64 {
    0.5 * c * c * (r * r / (c * c)).ln_1p()
}

/// IRLS weight of the Cauchy kernel, `1 / (1 + r²/c²)`.
pub fn cauchy_weight(r: f64, c: f64) -> f64 {
    1.0 / (1.0 + r * r / (c * c))
}

/// Surrogate `ρ_θ(r) = θc²r² / (θc² + r²)`; equals [`gm_loss`] at θ = 1.
pub fn surrogate_loss(r: f64, c: f64, theta: f64) -> f64 {
    let (k, r2) = (theta * c * c, r * r);
    if r2 == 0.0 {
        return 0.0;
    }
    k * r2 / (k + r2)
}

/// Outlier-process penalty `Φ_θ(ω) = θc²(√ω - 1)²`.
pub fn penalty(omega: f64, c: f64, theta: f64) -> Result<f64, GncError> {
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(GncError::WeightOutOfRange(omega));
    }
    let d = omega.sqrt() - 1.0;
    Ok(theta * c * c * d * d)
}

/// Derivative of `ω r² + Φ_θ(ω)` w.r.t. ω: `r² + θc²(1 - 1/√ω)`.
pub fn weight_objective_derivative(omega: f64, r: f64, c: f64, theta: f64) -> f64 {
    r * r + theta * c * c * (1.0 - 1.0 / omega.sqrt())
}

/// Closed form used by the weight update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightRule {
    /// `(θc² / (θc² + r²))²`, the stationary point of `ω r² + Φ_θ(ω)`.
    #[default]
    Squared,
    /// `θc² / (θc² + r²)`, kept for comparison runs.
    Unsquared,
}

/// Optimal weight for one whitened residual, clamped to `[WEIGHT_FLOOR, 1]`.
pub fn update_weight(r: f64, c: f64, theta: f64, rule: WeightRule) -> f64 {
    let k = theta * c * c;
    let w = k / (k + r * r);
    let w = match rule {
        WeightRule::Squared => w * w,
        WeightRule::Unsquared => w,
    };
    w.clamp(WEIGHT_FLOOR, 1.0)
}

pub fn update_weights(residuals: &[f64], c: f64, theta: f64, rule: WeightRule) -> Vec<f64> {
    residuals.iter().map(|&r| update_weight(r, c, theta, rule)).collect()
}

/// Starting control parameter `max(3 e_max² / c², 1)`.
pub fn initial_theta(e_max: f64, c: f64) -> f64 {
    initial_theta_with(e_max, c, 3.0)
}

pub fn initial_theta_with(e_max: f64, c: f64, multiplier: f64) -> f64 {
    (multiplier * e_max * e_max / (c * c)).max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GncSchedule {
    /// Kernel width in whitened units.
    pub c_gm: f64,
    /// θ is divided by this each round.
    pub decay: f64,
    /// Once θ would drop below this, one last round runs at θ = 1.
    pub theta_floor: f64,
    /// Coefficient of the initial-θ rule.
    pub init_multiplier: f64,
    pub weight_rule: WeightRule,
    /// Overrides the residual-based initial θ.
    pub theta0: Option<f64>,
}

impl Default for GncSchedule {
    fn default() -> Self {
        Self { c_gm: 2.0, decay: 1.4, theta_floor: 1.0, init_multiplier: 3.0, weight_rule: WeightRule::Squared, theta0: None }
    }
}

impl GncSchedule {
    fn validate(&self) -> Result<(), GncError> {
        if !(self.c_gm > 0.0) {
            return Err(GncError::InvalidSchedule(format!("kernel width must be positive, got {}", self.c_gm)));
        }
        if !(self.decay > 1.0) {
            return Err(GncError::InvalidSchedule(format!("decay must exceed 1, got {}", self.decay)));
        }
        if !(self.theta_floor >= 1.0) {
            return Err(GncError::InvalidSchedule(format!("theta floor must be >= 1, got {}", self.theta_floor)));
        }
        if !(self.init_multiplier > 0.0) {
            return Err(GncError::InvalidSchedule("initial-theta multiplier must be positive".into()));
        }
        if let Some(t) = self.theta0 {
            if !(t >= 1.0 && t.is_finite()) {
                return Err(GncError::InvalidSchedule(format!("initial theta must be >= 1, got {t}")));
            }
        }
        Ok(())
    }

    /// The θ of every round starting from `theta0`, ending with exactly 1.
    pub fn thetas(&self, theta0: f64) -> Vec<f64> {
        let mut out = Vec::new();
        let mut theta = theta0.max(1.0);
        loop {
            out.push(theta);
            if theta <= 1.0 {
                break;
            }
            let next = theta / self.decay;
            theta = if next < self.theta_floor { 1.0 } else { next };
        }
        out
    }
}

/// One alternation round at fixed θ.
#[derive(Debug, Clone, PartialEq)]
pub struct GncRound {
    pub theta: f64,
    /// Surrogate objective before the state solve.
    pub objective_start: f64,
    /// After the state solve, weights unchanged.
    pub objective_solved: f64,
    /// After the weight update.
    pub objective_updated: f64,
    pub solver_iterations: usize,
    /// Whitened residuals at the solved states.
    pub residuals: Vec<f64>,
    /// Weights after the update.
    pub weights: Vec<f64>,
    pub states: Vec<EpochState>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GncTrace {
    pub rounds: Vec<GncRound>,
}

impl GncTrace {
    pub fn thetas(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.theta).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GncOutcome {
    pub states: Vec<EpochState>,
    pub weights: WeightSet,
    pub trace: GncTrace,
    pub theta0: f64,
}

/// `Σ‖e_DV‖² + Σ ω r² + Σ Φ_θ(ω)` at given states and weights.
pub fn outlier_process_objective(
    graph: &FactorGraph,
    states: &[EpochState],
    weights: &WeightSet,
    c: f64,
    theta: f64,
) -> Result<f64, GncError> {
    let obj = graph::evaluate_objective(graph, weights, states)?;
    let mut penalty_sum = 0.0;
    for &w in weights.values() {
        penalty_sum += penalty(w, c, theta)?;
    }
    Ok(obj.total + penalty_sum)
}

/// `Σ‖e_DV‖² + Σ ρ_θ(r)`: the robust cost the alternation minimizes.
pub fn robust_objective(graph: &FactorGraph, states: &[EpochState], c: f64, theta: f64) -> Result<f64, GncError> {
    let ones = WeightSet::ones(graph);
    let obj = graph::evaluate_objective(graph, &ones, states)?;
    Ok(obj.dv_cost + obj.residuals.iter().map(|r| surrogate_loss(r.residual, c, theta)).sum::<f64>())
}

fn whitened(graph: &FactorGraph, states: &[EpochState]) -> Result<Vec<f64>, GraphError> {
    Ok(graph::pseudorange_residuals(graph, states)?.into_iter().map(|r| r.residual).collect())
}

/// Graduated non-convexity from the graph's snapshot initialization.
pub fn run_gnc(graph: &FactorGraph, opts: &SolveOptions, schedule: &GncSchedule) -> Result<GncOutcome, GncError> {
    run_gnc_from(graph, &graph.initial, opts, schedule)
}

/// Graduated non-convexity from explicit initial states.
///
/// Weights start at 1 and θ at `schedule.theta0` or the residual rule applied
/// to `init`. Each round solves the states with the current weights, then
/// replaces every weight by its optimum at the round's θ. θ shrinks by
/// `decay` per round; when it would fall below the floor a final round runs
/// at θ = 1.
pub fn run_gnc_from(
    graph: &FactorGraph,
    init: &[EpochState],
    opts: &SolveOptions,
    schedule: &GncSchedule,
) -> Result<GncOutcome, GncError> {
    schedule.validate()?;
    let c = schedule.c_gm;
    let e_max = whitened(graph, init)?.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let theta0 = schedule.theta0.unwrap_or_else(|| initial_theta_with(e_max, c, schedule.init_multiplier));
    let thetas = schedule.thetas(theta0);
    info!("gnc: e_max = {e_max:.3}, theta0 = {theta0:.3}, {} rounds", thetas.len());

    let mut states = init.to_vec();
    let mut weights = WeightSet::ones(graph);
    let mut trace = GncTrace::default();
    for &theta in &thetas {
        let objective_start = outlier_process_objective(graph, &states, &weights, c, theta)?;
        let (solved, report) =
            graph::solve(graph, &weights, &states, opts).map_err(|source| GncError::Solver { theta, source })?;
        states = solved;
        let objective_solved = outlier_process_objective(graph, &states, &weights, c, theta)?;
        let residuals: Vec<f64> = report.residuals.iter().map(|r| r.residual).collect();
        let updated = update_weights(&residuals, c, theta, schedule.weight_rule);
        weights = WeightSet::from_values(graph, updated)?;
        let objective_updated = outlier_process_objective(graph, &states, &weights, c, theta)?;
        debug!(
            "gnc round theta = {theta:.4}: {objective_start:.4} -> {objective_solved:.4} -> {objective_updated:.4}"
        );
        trace.rounds.push(GncRound {
            theta,
            objective_start,
            objective_solved,
            objective_updated,
            solver_iterations: report.iterations,
            residuals,
            weights: weights.values().to_vec(),
            states: states.clone(),
        });
    }
    Ok(GncOutcome { states, weights, trace, theta0 })
}

/// Fixed robust kernel for plain iteratively-reweighted least squares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    GemanMcClure,
    Cauchy,
}

impl Kernel {
    pub fn weight(self, r: f64, c: f64) -> f64 {
        match self {
            Kernel::GemanMcClure => gm_weight(r, c),
            Kernel::Cauchy => cauchy_weight(r, c),
        }
    }

    pub fn loss(self, r: f64, c: f64) -> f64 {
        match self {
            Kernel::GemanMcClure => gm_loss(r, c),
            Kernel::Cauchy => cauchy_loss(r, c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrlsOutcome {
    pub states: Vec<EpochState>,
    pub weights: WeightSet,
    pub rounds: usize,
    /// `Σ‖e_DV‖² + Σ kernel(r)` at the final states.
    pub robust_cost: f64,
    pub converged: bool,
}

pub const IRLS_MAX_ROUNDS: usize = 30;
pub const IRLS_TOLERANCE: f64 = 1e-8;

/// Robust cost of a fixed kernel at given states.
pub fn kernel_objective(graph: &FactorGraph, states: &[EpochState], kernel: Kernel, c: f64) -> Result<f64, GncError> {
    let ones = WeightSet::ones(graph);
    let obj = graph::evaluate_objective(graph, &ones, states)?;
    Ok(obj.dv_cost + obj.residuals.iter().map(|r| kernel.loss(r.residual, c)).sum::<f64>())
}

/// Iteratively reweighted least squares with a fixed kernel.
///
/// Weights come from the residuals at the current states, the states are then
/// re-solved, until the robust cost changes by less than 1e-8 relative or 30
/// rounds pass. Solver failures and non-finite states are reported as
/// divergence.
pub fn irls_solve(
    graph: &FactorGraph,
    init: &[EpochState],
    opts: &SolveOptions,
    kernel: Kernel,
    c: f64,
) -> Result<IrlsOutcome, GncError> {
    if !(c > 0.0) {
        return Err(GncError::InvalidSchedule(format!("kernel width must be positive, got {c}")));
    }
    let mut states = init.to_vec();
    let mut cost = kernel_objective(graph, &states, kernel, c)?;
    let mut weights = WeightSet::ones(graph);
    let mut converged = false;
    let mut rounds = 0;
    while rounds < IRLS_MAX_ROUNDS {
        rounds += 1;
        let residuals = whitened(graph, &states).map_err(|e| GncError::Diverged { round: rounds, reason: e.to_string() })?;
        if residuals.iter().any(|r| !r.is_finite()) {
            return Err(GncError::Diverged { round: rounds, reason: "non-finite residual".into() });
        }
        let values = residuals.iter().map(|&r| kernel.weight(r, c).clamp(WEIGHT_FLOOR, 1.0)).collect();
        weights = WeightSet::from_values(graph, values)?;
        let (solved, _) = graph::solve(graph, &weights, &states, opts)
            .map_err(|e| GncError::Diverged { round: rounds, reason: e.to_string() })?;
        if solved.iter().any(|s| !(s.pos.iter().all(|v| v.is_finite()) && s.clk_bias.is_finite())) {
            return Err(GncError::Diverged { round: rounds, reason: "non-finite state".into() });
        }
        states = solved;
        let new_cost = kernel_objective(graph, &states, kernel, c)?;
        if !new_cost.is_finite() {
            return Err(GncError::Diverged { round: rounds, reason: "non-finite robust cost".into() });
        }
        let change = (cost - new_cost).abs() / cost.abs().max(f64::MIN_POSITIVE);
        cost = new_cost;
        if change < IRLS_TOLERANCE {
            converged = true;
            break;
        }
    }
    Ok(IrlsOutcome { states, weights, rounds, robust_cost: cost, converged })
}

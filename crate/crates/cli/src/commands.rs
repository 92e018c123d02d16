//! The four pipeline commands. Each computes all of its outputs in memory and
//! writes files only once everything has succeeded.

use crate::config::{parse_run_config, parse_scenario, RunConfig};
use crate::formats::{self, ResidualRow, TraceRow, WeightRow};
use crate::CliError;
use log::info;
use robust_gnss::baselines::{ekf_run, wls_run, BaselineError};
use robust_gnss::diagnostics::{self, enu_error_stats, ErrorReport};
use robust_gnss::gnc::{irls_solve, run_gnc, GncError, Kernel};
use robust_gnss::graph::{self, build_graph, FactorGraph, GraphError, WeightSet};
use robust_gnss::obs_model::{EpochObservations, EpochState};
use robust_gnss::sim::{simulate as simulate_scenario, SimError};
use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Wls,
    Ekf,
    Fgo,
    FgoCauchy,
    FgoGm,
    FgoGnc,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Wls, Method::Ekf, Method::Fgo, Method::FgoCauchy, Method::FgoGm, Method::FgoGnc];

    pub fn name(self) -> &'static str {
        match self {
            Method::Wls => "wls",
            Method::Ekf => "ekf",
            Method::Fgo => "fgo",
            Method::FgoCauchy => "fgo-cauchy",
            Method::FgoGm => "fgo-gm",
            Method::FgoGnc => "fgo-gnc",
        }
    }

    pub fn has_weights(self) -> bool {
        matches!(self, Method::FgoCauchy | Method::FgoGm | Method::FgoGnc)
    }

    pub fn uses_graph(self) -> bool {
        !matches!(self, Method::Wls | Method::Ekf)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?}; expected one of wls, ekf, fgo, fgo-cauchy, fgo-gm, fgo-gnc"))
    }
}

fn write_all(files: Vec<(PathBuf, Vec<u8>)>) -> Result<(), CliError> {
    for (path, bytes) in files {
        std::fs::write(&path, bytes).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))
}

fn sim_error(e: SimError) -> CliError {
    match e {
        SimError::Invalid(_) => CliError::input(e.to_string()),
        other => CliError::solver(other.to_string()),
    }
}

/// Generates a scenario and writes observations and truth. Returns a summary.
pub fn simulate(config: &Path, obs_out: &Path, truth_out: &Path, seed: Option<u64>) -> Result<String, CliError> {
    let mut spec = parse_scenario(&config.display().to_string(), &read_text(config)?)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let (geometry, synthesized) = simulate_scenario(&spec).map_err(sim_error)?;
    let cells: usize = synthesized.epochs.iter().map(|e| e.observations.len()).sum();
    let outliers = synthesized.epochs.iter().flat_map(|e| &e.observations).filter(|o| o.label.is_outlier()).count();
    write_all(vec![
        (obs_out.to_path_buf(), formats::observations_csv(&synthesized.epochs)),
        (truth_out.to_path_buf(), formats::truth_csv(&geometry.truth)),
    ])?;
    Ok(format!(
        "epochs={} satellites={} observations={} outliers={} seed={}",
        geometry.truth.len(),
        spec.num_sats,
        cells,
        outliers,
        spec.seed
    ))
}

/// Everything one `solve` run produces.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub method: Method,
    pub states: Vec<EpochState>,
    pub weights: Option<Vec<WeightRow>>,
    pub trace: Option<Vec<TraceRow>>,
    pub residuals: Option<Vec<ResidualRow>>,
}

fn graph_error(e: GraphError) -> CliError {
    match e {
        GraphError::Empty | GraphError::EmptyEpoch { .. } | GraphError::NonIncreasingTime { .. } => {
            CliError::input(e.to_string())
        }
        other => CliError::solver(other.to_string()),
    }
}

fn baseline_error(e: BaselineError) -> CliError {
    match e {
        BaselineError::Empty => CliError::input(e.to_string()),
        other => CliError::solver(other.to_string()),
    }
}

fn gnc_error(e: GncError) -> CliError {
    match e {
        GncError::InvalidSchedule(_) => CliError::input(e.to_string()),
        other => CliError::solver(other.to_string()),
    }
}

fn check_finite(states: &[EpochState]) -> Result<(), CliError> {
    match states.iter().position(|s| !(s.pos.iter().all(|v| v.is_finite()) && s.clk_bias.is_finite())) {
        None => Ok(()),
        Some(k) => Err(CliError::solver(format!("non-finite state at epoch {k}"))),
    }
}

fn residual_rows(graph: &FactorGraph, states: &[EpochState]) -> Result<Vec<ResidualRow>, CliError> {
    Ok(graph::pseudorange_residuals(graph, states)
        .map_err(graph_error)?
        .into_iter()
        .map(|r| ResidualRow { t: r.t, sat_id: r.sat_id, residual_m: r.residual_m, residual: r.residual })
        .collect())
}

fn weight_rows(graph: &FactorGraph, weights: &[f64], residuals: &[f64], round: usize) -> Vec<WeightRow> {
    graph
        .pr_factors
        .iter()
        .zip(weights)
        .zip(residuals)
        .map(|((f, &weight), &r)| WeightRow {
            t: graph.times[f.epoch],
            sat_id: f.obs.sat_id,
            weight,
            residual_m: r * f.sigma,
            round,
        })
        .collect()
}

/// Runs one positioning method over grouped observations.
pub fn run_method(
    method: Method,
    epochs: &[EpochObservations],
    cfg: &RunConfig,
    all_rounds: bool,
) -> Result<SolveResult, CliError> {
    if epochs.is_empty() {
        return Err(CliError::input("no observations"));
    }
    let mut result = SolveResult { method, states: Vec::new(), weights: None, trace: None, residuals: None };
    match method {
        Method::Wls => result.states = wls_run(epochs, &cfg.sigma).map_err(baseline_error)?,
        Method::Ekf => result.states = ekf_run(epochs, &cfg.ekf, &cfg.sigma).map_err(baseline_error)?.states,
        _ => {
            let graph = build_graph(epochs, &cfg.sigma, &cfg.dv).map_err(graph_error)?;
            let (fgo, _) =
                graph::solve(&graph, &WeightSet::ones(&graph), &graph.initial, &cfg.solver).map_err(graph_error)?;
            match method {
                Method::Fgo => result.states = fgo,
                Method::FgoGm | Method::FgoCauchy => {
                    let kernel = if method == Method::FgoGm { Kernel::GemanMcClure } else { Kernel::Cauchy };
                    let out = irls_solve(&graph, &fgo, &cfg.solver, kernel, cfg.kernel_width).map_err(gnc_error)?;
                    let residuals: Vec<f64> = graph::pseudorange_residuals(&graph, &out.states)
                        .map_err(graph_error)?
                        .iter()
                        .map(|r| r.residual)
                        .collect();
                    result.weights = Some(weight_rows(&graph, out.weights.values(), &residuals, out.rounds));
                    result.states = out.states;
                }
                _ => {
                    let out = run_gnc(&graph, &cfg.solver, &cfg.schedule).map_err(gnc_error)?;
                    let n = out.trace.rounds.len();
                    let mut rows = Vec::new();
                    for (i, round) in out.trace.rounds.iter().enumerate() {
                        if all_rounds || i + 1 == n {
                            rows.extend(weight_rows(&graph, &round.weights, &round.residuals, i + 1));
                        }
                    }
                    result.weights = Some(rows);
                    result.trace = Some(
                        out.trace
                            .rounds
                            .iter()
                            .enumerate()
                            .map(|(i, r)| TraceRow {
                                round: i + 1,
                                theta: r.theta,
                                objective_start: r.objective_start,
                                objective_solved: r.objective_solved,
                                objective_updated: r.objective_updated,
                                solver_iterations: r.solver_iterations,
                            })
                            .collect(),
                    );
                    result.states = out.states;
                }
            }
            result.residuals = Some(residual_rows(&graph, &result.states)?);
        }
    }
    check_finite(&result.states)?;
    Ok(result)
}

pub struct SolvePaths<'a> {
    pub obs: &'a Path,
    pub out: &'a Path,
    pub weights: Option<&'a Path>,
    pub trace: Option<&'a Path>,
    pub residuals: Option<&'a Path>,
    pub config: Option<&'a Path>,
}

/// Solves an observations file and writes the requested outputs.
pub fn solve(method: Method, paths: &SolvePaths, all_rounds: bool) -> Result<String, CliError> {
    let cfg = match paths.config {
        Some(p) => parse_run_config(&p.display().to_string(), &read_text(p)?)?,
        None => RunConfig::default(),
    };
    if paths.weights.is_some() && !method.has_weights() {
        return Err(CliError::input(format!("method {method} produces no weights")));
    }
    if paths.trace.is_some() && method != Method::FgoGnc {
        return Err(CliError::input("a round trace is only produced by fgo-gnc"));
    }
    if paths.residuals.is_some() && !method.uses_graph() {
        return Err(CliError::input(format!("method {method} produces no factor residuals")));
    }
    let epochs = formats::read_observations(paths.obs)?;
    info!("solving {} epochs with {method}", epochs.len());
    let result = run_method(method, &epochs, &cfg, all_rounds)?;

    let mut files = vec![(paths.out.to_path_buf(), formats::solution_csv(&result.states, method.name()))];
    if let Some(p) = paths.weights {
        files.push((p.to_path_buf(), formats::weights_csv(result.weights.as_deref().unwrap_or_default())));
    }
    if let Some(p) = paths.trace {
        files.push((p.to_path_buf(), formats::trace_csv(result.trace.as_deref().unwrap_or_default())));
    }
    if let Some(p) = paths.residuals {
        files.push((p.to_path_buf(), formats::residuals_csv(result.residuals.as_deref().unwrap_or_default())));
    }
    write_all(files)?;
    Ok(format!("method={method} epochs={}", result.states.len()))
}

fn diag_error(e: diagnostics::DiagError) -> CliError {
    CliError::input(e.to_string())
}

/// Report entries for one solution against truth, optionally against a baseline.
pub fn report_entries(
    method: &str,
    report: &ErrorReport,
    baseline: Option<(&str, &ErrorReport)>,
) -> Result<Vec<(String, String)>, CliError> {
    let mut e = vec![
        ("method".to_string(), method.to_string()),
        ("epochs".to_string(), report.epochs.len().to_string()),
        ("mean_2d_m".to_string(), report.horizontal.mean.to_string()),
        ("std_2d_m".to_string(), report.horizontal.std.to_string()),
        ("max_2d_m".to_string(), report.horizontal.max.to_string()),
        ("mean_3d_m".to_string(), report.spatial.mean.to_string()),
        ("std_3d_m".to_string(), report.spatial.std.to_string()),
        ("max_3d_m".to_string(), report.spatial.max.to_string()),
    ];
    if let Some((name, base)) = baseline {
        let (i2, i3) = report.improvement_over(base).map_err(diag_error)?;
        e.push(("baseline".into(), name.to_string()));
        e.push(("baseline_mean_2d_m".into(), base.horizontal.mean.to_string()));
        e.push(("baseline_mean_3d_m".into(), base.spatial.mean.to_string()));
        e.push(("improvement_2d_pct".into(), i2.to_string()));
        e.push(("improvement_3d_pct".into(), i3.to_string()));
    }
    Ok(e)
}

fn aligned_report(solution: &[EpochState], truth: &[EpochState], what: &str) -> Result<ErrorReport, CliError> {
    let report = enu_error_stats(solution, truth).map_err(|e| CliError::input(format!("{what}: {e}")))?;
    if report.unmatched > 0 {
        return Err(CliError::input(format!("{what}: {} epochs have no matching truth epoch", report.unmatched)));
    }
    Ok(report)
}

/// Evaluates a solution file against truth; writes a `key=value` report and,
/// optionally, the per-epoch error table.
pub fn eval(
    solution: &Path,
    truth: &Path,
    baseline: Option<&Path>,
    report_out: &Path,
    table_out: Option<&Path>,
) -> Result<String, CliError> {
    let (method, states) = formats::read_solution(solution)?;
    let truth = formats::read_truth(truth)?;
    let report = aligned_report(&states, &truth, "solution")?;
    let base = match baseline {
        Some(p) => {
            let (name, b) = formats::read_solution(p)?;
            Some((name, aligned_report(&b, &truth, "baseline")?))
        }
        None => None,
    };
    let entries = report_entries(&method, &report, base.as_ref().map(|(n, r)| (n.as_str(), r)))?;
    let mut files = vec![(report_out.to_path_buf(), formats::report_text(&entries))];
    if let Some(p) = table_out {
        let rows = report.epochs.iter().map(|e| {
            vec![
                e.t.to_string(),
                e.enu.east.to_string(),
                e.enu.north.to_string(),
                e.enu.up.to_string(),
                e.err_2d.to_string(),
                e.err_3d.to_string(),
            ]
        });
        files.push((p.to_path_buf(), formats::to_csv(&["t", "east", "north", "up", "err_2d", "err_3d"], rows)));
    }
    write_all(files)?;
    Ok(format!("method={method} mean_2d_m={} mean_3d_m={}", report.horizontal.mean, report.spatial.mean))
}

pub struct DiagnosePaths<'a> {
    pub weights: Option<&'a Path>,
    pub residuals: Option<&'a Path>,
    pub trace: Option<&'a Path>,
    pub out_dir: &'a Path,
}

fn histogram_rows(h: &diagnostics::Histogram, prefix: &[String]) -> Vec<Vec<String>> {
    h.counts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut row = prefix.to_vec();
            row.extend([h.edges[i].to_string(), h.edges[i + 1].to_string(), c.to_string()]);
            row
        })
        .collect()
}

/// Histogram, mixture-fit and trace tables for the analysis plots.
pub fn diagnose(paths: &DiagnosePaths, components: usize, bins: usize, seed: u64) -> Result<String, CliError> {
    if paths.weights.is_none() && paths.residuals.is_none() && paths.trace.is_none() {
        return Err(CliError::input("nothing to diagnose: pass weights, residuals or a trace"));
    }
    let mut files = Vec::new();
    let mut summary = Vec::new();
    if let Some(p) = paths.weights {
        let rows = formats::read_weights(p)?;
        let rounds: BTreeSet<usize> = rows.iter().map(|r| r.round).collect();
        let mut table = Vec::new();
        for round in &rounds {
            let w: Vec<f64> = rows.iter().filter(|r| r.round == *round).map(|r| r.weight).collect();
            let h = diagnostics::weight_histogram(&w, bins).map_err(diag_error)?;
            table.extend(histogram_rows(&h, &[round.to_string()]));
        }
        files.push((
            paths.out_dir.join("weight_histogram.csv"),
            formats::to_csv(&["round", "bin_lo", "bin_hi", "count"], table),
        ));
        summary.push(format!("weight_rounds={}", rounds.len()));
    }
    if let Some(p) = paths.residuals {
        let rows = formats::read_residuals(p)?;
        let r: Vec<f64> = rows.iter().map(|r| r.residual_m).collect();
        let h = diagnostics::residual_histogram(&r, bins).map_err(diag_error)?;
        files.push((
            paths.out_dir.join("residual_histogram.csv"),
            formats::to_csv(&["bin_lo", "bin_hi", "count"], histogram_rows(&h, &[])),
        ));
        let fit = diagnostics::gmm_fit(&r, components, seed).map_err(diag_error)?;
        let table = fit.components.iter().enumerate().map(|(i, c)| {
            vec![(i + 1).to_string(), c.weight.to_string(), c.mean.to_string(), c.variance.to_string()]
        });
        files.push((paths.out_dir.join("gmm.csv"), formats::to_csv(&["component", "weight", "mean", "variance"], table)));
        let ll = fit.log_likelihood_history.iter().enumerate().map(|(i, v)| vec![i.to_string(), v.to_string()]);
        files.push((paths.out_dir.join("gmm_loglik.csv"), formats::to_csv(&["iteration", "log_likelihood"], ll)));
        summary.push(format!("gmm_iterations={} gmm_converged={}", fit.iterations, fit.converged));
    }
    if let Some(p) = paths.trace {
        let rows = formats::read_trace(p)?;
        for w in rows.windows(2) {
            if !(w[1].theta < w[0].theta) {
                return Err(CliError::input(format!("trace thetas not decreasing at round {}", w[1].round)));
            }
        }
        files.push((paths.out_dir.join("theta_trace.csv"), formats::trace_csv(&rows)));
        summary.push(format!("rounds={}", rows.len()));
    }
    std::fs::create_dir_all(paths.out_dir)
        .map_err(|e| CliError::input(format!("cannot create {}: {e}", paths.out_dir.display())))?;
    write_all(files)?;
    Ok(summary.join(" "))
}

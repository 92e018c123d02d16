use nalgebra::Vector3;
use robust_gnss::baselines::{wls_position, wls_position_with_sigmas};
use robust_gnss::graph::{build_graph, evaluate_objective, solve, DvConfig, FactorGraph, SolveOptions, WeightSet};
use robust_gnss::obs_model::{EpochObservations, EpochState, SigmaModelConfig};
use robust_gnss::sim::{simulate, Reference, Scenario};

fn scenario(which: Reference, epochs: usize, sats: usize) -> (Vec<EpochState>, Vec<EpochObservations>) {
    let spec = Scenario { duration: epochs as f64, num_sats: sats, ..Scenario::reference(which) };
    let (g, syn) = simulate(&spec).unwrap();
    (g.truth, syn.epochs)
}

fn graph(epochs: &[EpochObservations]) -> FactorGraph {
    build_graph(epochs, &SigmaModelConfig::default(), &DvConfig::default()).unwrap()
}

#[test]
fn factor_counts() {
    let (_, epochs) = scenario(Reference::B, 5, 8);
    let g = graph(&epochs);
    assert_eq!(g.pr_factors.len(), 40);
    assert_eq!(g.dv_factors.len(), 4);
    assert!(g.dv_factors.iter().all(|f| f.epoch + 1 < g.num_epochs()));

    let g1 = graph(&epochs[..1]);
    assert_eq!(g1.dv_factors.len(), 0);
    assert_eq!(g1.pr_factors.len(), 8);
}

#[test]
fn short_epoch_drops_its_velocity_factor() {
    let (_, mut epochs) = scenario(Reference::B, 5, 8);
    epochs[2].observations.truncate(3);
    let g = graph(&epochs);
    assert_eq!(g.pr_factors.len(), 35);
    assert_eq!(g.pr_factors.iter().filter(|f| f.epoch == 2).count(), 3);
    let linked: Vec<usize> = g.dv_factors.iter().map(|f| f.epoch).collect();
    assert_eq!(linked, vec![0, 1, 3]);
}

#[test]
fn unanchored_epoch_is_rejected() {
    let (_, mut epochs) = scenario(Reference::B, 3, 8);
    epochs[1].observations.truncate(3);
    epochs[2].observations.truncate(3);
    // epoch 1 cannot solve Doppler, so epoch 2 is cut off and has only 3 sats
    assert!(build_graph(&epochs, &SigmaModelConfig::default(), &DvConfig::default()).is_err());
    assert!(build_graph(&[], &SigmaModelConfig::default(), &DvConfig::default()).is_err());
    let mut empty = epochs.clone();
    empty[0].observations.clear();
    assert!(build_graph(&empty, &SigmaModelConfig::default(), &DvConfig::default()).is_err());
}

#[test]
fn zero_noise_recovery() {
    for which in [Reference::A, Reference::B] {
        let (truth, epochs) = scenario(which, 100, 10);
        let g = graph(&epochs);
        let (states, report) = solve(&g, &WeightSet::ones(&g), &g.initial, &SolveOptions::default()).unwrap();
        assert!(report.final_cost <= report.initial_cost);
        for (s, t) in states.iter().zip(&truth) {
            assert!((s.pos - t.pos).norm() < 1e-6, "{:?}: {}", which, (s.pos - t.pos).norm());
        }
    }
}

#[test]
fn single_epoch_matches_wls() {
    let spec = Scenario { duration: 1.0, pr_noise: 1.0, ..Scenario::reference(Reference::A) };
    let (_, syn) = simulate(&spec).unwrap();
    let g = graph(&syn.epochs);
    let start: Vec<EpochState> = g.initial.iter().map(|s| EpochState { pos: s.pos + Vector3::new(30.0, -20.0, 10.0), ..*s }).collect();
    let (states, _) = solve(&g, &WeightSet::ones(&g), &start, &SolveOptions::default()).unwrap();
    // same per-observation sigmas as the graph factors; a Gauss-Newton pass from the graph optimum must not move it
    let sigmas: Vec<f64> = g.pr_factors.iter().map(|f| f.sigma).collect();
    let fix = wls_position_with_sigmas(&syn.epochs[0].observations, &sigmas, states[0].pos, states[0].clk_bias).unwrap();
    assert!((states[0].pos - fix.pos).norm() < 1e-6);
    assert!((states[0].clk_bias - fix.clk_bias).abs() < 1e-6);
    let plain = wls_position(&syn.epochs[0].observations, &SigmaModelConfig::default(), None).unwrap();
    assert!((states[0].pos - plain.pos).norm() < 1e-6);
}

#[test]
fn zero_weight_equals_removed_satellite() {
    let spec = Scenario { duration: 30.0, pr_noise: 0.5, doppler_noise_hz: 0.2, ..Scenario::reference(Reference::B) };
    let (_, syn) = simulate(&spec).unwrap();
    let g = graph(&syn.epochs);
    let dropped = g.pr_factors[0].obs.sat_id;
    let weights: Vec<f64> = g.pr_factors.iter().map(|f| if f.obs.sat_id == dropped { 0.0 } else { 1.0 }).collect();
    let weights = WeightSet::from_values(&g, weights).unwrap();

    let mut pruned = g.clone();
    pruned.pr_factors.retain(|f| f.obs.sat_id != dropped);
    let opts = SolveOptions::default();
    let (a, _) = solve(&g, &weights, &g.initial, &opts).unwrap();
    let (b, _) = solve(&pruned, &WeightSet::ones(&pruned), &g.initial, &opts).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x.pos - y.pos).norm() < 1e-9);
        assert!((x.clk_bias - y.clk_bias).abs() < 1e-9);
    }
}

#[test]
fn objective_properties() {
    let (truth, epochs) = scenario(Reference::B, 20, 10);
    let g = graph(&epochs);
    let ones = WeightSet::ones(&g);
    let at_truth = evaluate_objective(&g, &ones, &truth).unwrap();
    assert!(at_truth.total < 1e-12);

    let spec = Scenario { duration: 20.0, pr_noise: 0.5, doppler_noise_hz: 0.2, ..Scenario::reference(Reference::B) };
    let (_, syn) = simulate(&spec).unwrap();
    let g = graph(&syn.epochs);
    let base = evaluate_objective(&g, &WeightSet::ones(&g), &g.initial).unwrap();
    assert!((base.total - base.pr_cost - base.dv_cost).abs() <= 1e-12 * base.total);

    // linear in each weight at fixed states
    let r5 = base.residuals[5].residual;
    for w in [0.0, 0.25, 0.5, 1.0] {
        let mut v = vec![1.0; g.pr_factors.len()];
        v[5] = w;
        let obj = evaluate_objective(&g, &WeightSet::from_values(&g, v).unwrap(), &g.initial).unwrap();
        let expected = base.total - (1.0 - w) * r5 * r5;
        assert!((obj.total - expected).abs() <= 1e-12 * base.total.max(1.0));
    }

    let (states, report) = solve(&g, &WeightSet::ones(&g), &g.initial, &SolveOptions::default()).unwrap();
    let final_obj = evaluate_objective(&g, &WeightSet::ones(&g), &states).unwrap();
    assert!((final_obj.total - report.final_cost).abs() <= 1e-12 * report.final_cost.max(1.0));
    assert_eq!(report.residuals.len(), g.pr_factors.len());
    for w in report.cost_history.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-9));
    }
}

#[test]
fn invalid_inputs() {
    let (_, epochs) = scenario(Reference::B, 5, 8);
    let g = graph(&epochs);
    assert!(WeightSet::from_values(&g, vec![1.0; 3]).is_err());
    assert!(WeightSet::from_values(&g, vec![1.5; 40]).is_err());
    assert!(solve(&g, &WeightSet::ones(&g), &g.initial[..2], &SolveOptions::default()).is_err());
}

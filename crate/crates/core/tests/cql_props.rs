use std::collections::{BTreeMap, BTreeSet};

use edtrec::envsim::{default_policies, generate_offline_dataset, ItemGraph};
use edtrec::qlearn::{cql_fit, transitions, CqlConfig, PenaltyDistribution, QTable};
use edtrec::trajectory::Trajectory;

fn stitch_data(n: usize) -> (ItemGraph, Vec<Trajectory>) {
    let g = ItemGraph::stitch_world();
    let d = generate_offline_dataset(&g, &default_policies(&g), n, 0).unwrap();
    (g, d)
}

fn logged_actions(data: &[Trajectory]) -> BTreeMap<usize, BTreeSet<usize>> {
    let mut m: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for t in transitions(data).unwrap() {
        m.entry(t.state).or_default().insert(t.action);
    }
    m
}

/// Backward induction on the deterministic graph, maximizing over logged
/// actions only: the fixed point plain fitted-Q converges to.
fn logged_value_iteration(
    g: &ItemGraph,
    logged: &BTreeMap<usize, BTreeSet<usize>>,
    gamma: f64,
) -> BTreeMap<(usize, usize), f64> {
    fn v(g: &ItemGraph, logged: &BTreeMap<usize, BTreeSet<usize>>, gamma: f64, s: usize) -> f64 {
        if g.is_terminal(s) {
            return 0.0;
        }
        logged
            .get(&s)
            .map(|acts| {
                acts.iter()
                    .map(|&a| q(g, logged, gamma, a))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .unwrap_or(0.0)
    }
    fn q(g: &ItemGraph, logged: &BTreeMap<usize, BTreeSet<usize>>, gamma: f64, a: usize) -> f64 {
        g.terminal_reward(a).unwrap_or(0.0) + gamma * v(g, logged, gamma, a)
    }
    let mut out = BTreeMap::new();
    for (&s, acts) in logged {
        for &a in acts {
            out.insert((s, a), q(g, logged, gamma, a));
        }
    }
    out
}

/// Exact value of following `policy` (a map state → action) from `s`.
fn policy_value(g: &ItemGraph, policy: &BTreeMap<usize, usize>, s: usize) -> f64 {
    if g.is_terminal(s) {
        return 0.0;
    }
    let a = policy[&s];
    g.terminal_reward(a).unwrap_or(0.0) + policy_value(g, policy, a)
}

fn cfg(alpha: f64, gamma: f64) -> CqlConfig {
    CqlConfig {
        alpha,
        gamma,
        ..CqlConfig::default()
    }
}

#[test]
fn plain_fit_matches_value_iteration() {
    let (g, d) = stitch_data(300);
    let logged = logged_actions(&d);
    for gamma in [1.0, 0.9] {
        let q = cql_fit(&d, &cfg(0.0, gamma)).unwrap();
        let oracle = logged_value_iteration(&g, &logged, gamma);
        assert_eq!(q.len(), oracle.len());
        for ((s, a), want) in &oracle {
            let got = q.get(*s, *a).unwrap();
            assert!((got - want).abs() < 1e-2, "γ={gamma} Q({s},{a}) = {got}, oracle {want}");
        }
    }
}

#[test]
fn plain_fit_branch_values() {
    let (g, d) = stitch_data(300);
    let q = cql_fit(&d, &cfg(0.0, 1.0)).unwrap();
    let id = |n: &str| g.id(n).unwrap();
    assert!((q.get(id("i2"), id("i6")).unwrap() - 1.0).abs() <= 0.05);
    assert!(q.get(id("i2"), id("i3")).unwrap().abs() <= 0.05);
}

#[test]
fn conservative_values_stay_below_the_greedy_policy_value() {
    let (g, d) = stitch_data(3);
    let q = cql_fit(&d, &cfg(1.0, 1.0)).unwrap();
    let logged = logged_actions(&d);
    let policy: BTreeMap<usize, usize> = logged.keys().map(|&s| (s, q.greedy_action(s).unwrap())).collect();
    for &s in logged.keys() {
        let vp = policy_value(&g, &policy, s);
        assert!(q.v(s) <= vp + 0.05, "{}: V̂ {} vs V^π {vp}", g.name(s), q.v(s));
    }
}

#[test]
fn conservatism_lowers_state_values() {
    let (_, d) = stitch_data(300);
    let q0 = cql_fit(&d, &cfg(0.0, 1.0)).unwrap();
    for alpha in [0.5, 1.0, 2.0] {
        let qa = cql_fit(&d, &cfg(alpha, 1.0)).unwrap();
        for s in logged_actions(&d).keys() {
            assert!(qa.v(*s) <= q0.v(*s) + 0.05, "α={alpha} state {s}");
        }
    }
}

/// The per-pair form of the monotonicity claim. With μ different from the
/// logged action frequencies the penalty's fixed point is
/// `Q = Q₀ + α(1 − μ/π_β)`, which raises pairs that are logged more often
/// than μ weights them — (i2, i3) ends at 0.25 against 0 for α = 0.
#[test]
#[ignore = "contradicts the penalty fixed point for actions logged more often than mu weights them; the state-value form above holds"]
fn conservatism_lowers_every_logged_pair() {
    let (_, d) = stitch_data(300);
    let q0 = cql_fit(&d, &cfg(0.0, 1.0)).unwrap();
    let q1 = cql_fit(&d, &cfg(1.0, 1.0)).unwrap();
    for (s, a, v) in q1.iter() {
        assert!(v <= q0.get(s, a).unwrap() + 0.05, "Q({s},{a})");
    }
}

#[test]
fn penalty_fixed_point_closed_form() {
    // Q = ȳ + α(1 − μ/π_β) per logged pair, with ȳ the plain Bellman target.
    let (g, d) = stitch_data(3);
    let q = cql_fit(&d, &cfg(1.0, 1.0)).unwrap();
    let id = |n: &str| g.id(n).unwrap();
    let (i2, i3, i6) = (id("i2"), id("i3"), id("i6"));
    // At i2 the data picks i3 twice and i6 once; μ weights them 1/2 each.
    let v_i3 = q.v(i3);
    let want_i3 = v_i3 + (1.0 - 0.5 / (2.0 / 3.0));
    let want_i6 = q.v(i6) + (1.0 - 0.5 / (1.0 / 3.0));
    assert!((q.get(i2, i3).unwrap() - want_i3).abs() < 1e-3);
    assert!((q.get(i2, i6).unwrap() - want_i6).abs() < 1e-3);
}

#[test]
fn whole_action_space_penalty_is_available() {
    let (g, d) = stitch_data(3);
    let q = cql_fit(
        &d,
        &CqlConfig {
            mu: PenaltyDistribution::UniformAll,
            ..CqlConfig::default()
        },
    )
    .unwrap();
    assert!(q.v(g.id("i2").unwrap()).is_finite());
    let text = q.to_text();
    assert_eq!(QTable::parse(&text).unwrap(), q);
}

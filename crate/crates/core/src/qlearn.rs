//! Tabular conservative Q-learning.
//!
//! The objective per state-action table entry is
//!
//! ```text
//! α (E_{s~D, a~μ}[Q(s,a)] − E_{(s,a)~D}[Q(s,a)]) + ½ E_D[(Q(s,a) − y)²]
//! y = r + γ (1 − done) V̂(s'),   V̂(s') = max over actions logged at s'
//! ```
//!
//! minimized by deterministic full sweeps over the logged transitions. Each
//! sweep takes one gradient step per entry, normalized by the number of
//! transitions leaving its state, against a target frozen at the start of
//! the sweep. With `α = 0` this is plain fitted value iteration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

/// Distribution used for the "push down" half of the penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyDistribution {
    /// Uniform over the actions logged at the state.
    UniformLogged,
    /// Uniform over the whole action space; unlogged entries are not stored.
    UniformAll,
}

impl FromStr for PenaltyDistribution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform_logged" => Ok(Self::UniformLogged),
            "uniform_all" => Ok(Self::UniformAll),
            _ => Err(Error::Config(format!("unknown penalty distribution `{s}`"))),
        }
    }
}

impl std::fmt::Display for PenaltyDistribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::UniformLogged => "uniform_logged",
            Self::UniformAll => "uniform_all",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CqlConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lr: f64,
    pub sweeps: usize,
    pub mu: PenaltyDistribution,
}

impl Default for CqlConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 1.0,
            lr: 0.1,
            sweeps: 5000,
            mu: PenaltyDistribution::UniformLogged,
        }
    }
}

impl CqlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.sweeps == 0 {
            return Err(Error::invalid("sweeps must be at least 1"));
        }
        Ok(())
    }
}

/// One logged transition with discrete ids.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    /// `None` when the episode ended.
    pub next: Option<usize>,
}

pub fn transitions(data: &[Trajectory]) -> Result<Vec<Transition>> {
    let mut out = Vec::new();
    for (index, t) in data.iter().enumerate() {
        let id = |tok: &crate::trajectory::Token| {
            tok.state_id().ok_or_else(|| Error::Trajectory {
                index,
                detail: "tabular learning needs discrete states and actions".into(),
            })
        };
        for i in 0..t.len() {
            out.push(Transition {
                state: id(&t.states[i])?,
                action: id(&t.actions[i])?,
                reward: t.rewards[i],
                next: if i + 1 < t.len() {
                    Some(id(&t.states[i + 1])?)
                } else {
                    None
                },
            });
        }
    }
    Ok(out)
}

/// Tabular Q over logged (state, action) pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QTable {
    values: BTreeMap<(usize, usize), f64>,
}

/// How V̂(s) is read off the table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalPolicy {
    /// Greedy over the actions logged at `s`.
    GreedyLogged,
    UniformLogged,
}

/// `V̂(s)` plus whether `s` was present in the table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateValue {
    pub value: f64,
    pub known: bool,
}

/// Expectation of `row` under `probs`.
pub fn state_value(row: &[f64], probs: &[f64]) -> Result<f64> {
    if row.len() != probs.len() {
        return Err(Error::invalid(format!(
            "policy row has {} entries for {} actions",
            probs.len(),
            row.len()
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 || probs.iter().any(|p| *p < 0.0) {
        return Err(Error::NotNormalized { state: 0, total });
    }
    Ok(row.iter().zip(probs).map(|(q, p)| q * p).sum())
}

impl QTable {
    pub fn get(&self, s: usize, a: usize) -> Option<f64> {
        self.values.get(&(s, a)).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.values.iter().map(|(&(s, a), &q)| (s, a, q))
    }

    /// Logged actions at `s` with their values, in action order.
    pub fn row(&self, s: usize) -> Vec<(usize, f64)> {
        self.values
            .range((s, 0)..=(s, usize::MAX))
            .map(|(&(_, a), &q)| (a, q))
            .collect()
    }

    pub fn value(&self, s: usize, policy: EvalPolicy) -> StateValue {
        let row = self.row(s);
        if row.is_empty() {
            return StateValue {
                value: 0.0,
                known: false,
            };
        }
        let value = match policy {
            EvalPolicy::GreedyLogged => row.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max),
            EvalPolicy::UniformLogged => row.iter().map(|x| x.1).sum::<f64>() / row.len() as f64,
        };
        StateValue { value, known: true }
    }

    /// Greedy-over-logged value; 0 for unseen and terminal states.
    pub fn v(&self, s: usize) -> f64 {
        self.value(s, EvalPolicy::GreedyLogged).value
    }

    /// Best logged action at `s` (lowest id on ties).
    pub fn greedy_action(&self, s: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (a, q) in self.row(s) {
            if best.is_none_or(|(_, b)| q > b) {
                best = Some((a, q));
            }
        }
        best.map(|b| b.0)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# qtable v1: state action value\n");
        for (st, a, q) in self.iter() {
            let _ = writeln!(s, "{st} {a} {q}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.starts_with("# qtable v1") => {}
            Some(h) if h.starts_with("# qtable v") => {
                let found = h["# qtable v".len()..]
                    .split(|c: char| !c.is_ascii_digit())
                    .next()
                    .and_then(|d| d.parse().ok())
                    .unwrap_or(0);
                return Err(Error::Version {
                    what: "qtable",
                    found,
                    expected: 1,
                });
            }
            _ => return Err(Error::Config("missing qtable header".into())),
        }
        let mut values = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Config(format!("qtable line {}: expected `state action value`", i + 2));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(bad());
            }
            let s: usize = f[0].parse().map_err(|_| bad())?;
            let a: usize = f[1].parse().map_err(|_| bad())?;
            let q: f64 = f[2].parse().map_err(|_| bad())?;
            if !q.is_finite() {
                return Err(Error::NonFinite("qtable"));
            }
            values.insert((s, a), q);
        }
        Ok(Self { values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?).map_err(|e| Error::format(path, e))
    }
}

struct Entry {
    state: usize,
    action: usize,
    count: f64,
    /// Distinct outcomes `(reward, next, multiplicity)`.
    outcomes: Vec<(f64, Option<usize>, f64)>,
}

pub fn cql_fit(data: &[Trajectory], cfg: &CqlConfig) -> Result<QTable> {
    cfg.validate()?;
    cql_fit_transitions(&transitions(data)?, cfg)
}

pub fn cql_fit_transitions(trans: &[Transition], cfg: &CqlConfig) -> Result<QTable> {
    cfg.validate()?;
    if trans.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut grouped: BTreeMap<(usize, usize), BTreeMap<(u64, Option<usize>), f64>> = BTreeMap::new();
    let mut n_state: BTreeMap<usize, f64> = BTreeMap::new();
    let mut n_actions = 0;
    for t in trans {
        if !t.reward.is_finite() {
            return Err(Error::NonFinite("reward"));
        }
        *grouped
            .entry((t.state, t.action))
            .or_default()
            .entry((t.reward.to_bits(), t.next))
            .or_default() += 1.0;
        *n_state.entry(t.state).or_default() += 1.0;
        n_actions = n_actions.max(t.action);
    }
    let entries: Vec<Entry> = grouped
        .into_iter()
        .map(|((state, action), outs)| Entry {
            state,
            action,
            count: outs.values().sum(),
            outcomes: outs
                .into_iter()
                .map(|((r, next), m)| (f64::from_bits(r), next, m))
                .collect(),
        })
        .collect();
    let mut logged: BTreeMap<usize, f64> = BTreeMap::new();
    for e in &entries {
        *logged.entry(e.state).or_default() += 1.0;
    }
    let mu = |s: usize| match cfg.mu {
        PenaltyDistribution::UniformLogged => 1.0 / logged[&s],
        PenaltyDistribution::UniformAll => 1.0 / n_actions as f64,
    };

    let mut table = QTable {
        values: entries.iter().map(|e| ((e.state, e.action), 0.0)).collect(),
    };
    let mut q: Vec<f64> = vec![0.0; entries.len()];
    for _ in 0..cfg.sweeps {
        let target: BTreeMap<usize, f64> = logged.keys().map(|&s| (s, table.v(s))).collect();
        for (i, e) in entries.iter().enumerate() {
            let ns = n_state[&e.state];
            let mut bellman = 0.0;
            for &(r, next, m) in &e.outcomes {
                let v = next.map_or(0.0, |s| target.get(&s).copied().unwrap_or(0.0));
                bellman += m * (q[i] - (r + cfg.gamma * v));
            }
            let grad = bellman / ns + cfg.alpha * (mu(e.state) - e.count / ns);
            q[i] -= cfg.lr * grad;
            if !q[i].is_finite() {
                return Err(Error::NonFinite("q-value"));
            }
        }
        for (i, e) in entries.iter().enumerate() {
            table.values.insert((e.state, e.action), q[i]);
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Token;

    #[test]
    fn state_value_examples() {
        assert_eq!(state_value(&[0.0, 2.0], &[0.5, 0.5]).unwrap(), 1.0);
        assert_eq!(state_value(&[0.0, 2.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert_eq!(state_value(&[3.0], &[1.0]).unwrap(), 3.0);
        assert!(matches!(
            state_value(&[0.0, 2.0], &[0.5, 0.6]),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn terminal_transition_converges_to_reward() {
        for gamma in [0.0, 0.5, 1.0] {
            let t = Trajectory::new(vec![Token::Id(1)], vec![Token::Id(2)], vec![1.0]).unwrap();
            let cfg = CqlConfig {
                alpha: 0.0,
                gamma,
                ..CqlConfig::default()
            };
            let q = cql_fit(&[t], &cfg).unwrap();
            assert!((q.get(1, 2).unwrap() - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn unseen_states_default_to_zero() {
        let t = Trajectory::new(vec![Token::Id(1)], vec![Token::Id(2)], vec![1.0]).unwrap();
        let q = cql_fit(&[t], &CqlConfig::default()).unwrap();
        assert_eq!(
            q.value(42, EvalPolicy::GreedyLogged),
            StateValue {
                value: 0.0,
                known: false
            }
        );
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(cql_fit(&[], &CqlConfig::default()), Err(Error::Empty(_))));
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut values = BTreeMap::new();
        values.insert((1, 2), 0.1 + 0.2);
        values.insert((3, 4), -1.0 / 3.0);
        let q = QTable { values };
        assert_eq!(QTable::parse(&q.to_text()).unwrap(), q);
        assert!(matches!(
            QTable::parse("# qtable v2: x\n"),
            Err(Error::Version { found: 2, .. })
        ));
    }
}

//! Item-graph recommendation MDP ("stitch world").
//!
//! Items are nodes of a DAG. Recommending item `b` from current item `a` is
//! legal iff `a → b` is an edge; reaching a terminal item ends the episode
//! with that terminal's reward, every other step pays 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::play_episode;
use crate::error::{Error, Result};
use crate::trajectory::{ActionSpace, StateSpace, Token, Trajectory};

pub const DEFAULT_STEP_CAP: usize = 50;

const DEFAULT_GRAPH: &str = "\
nodes i1 i2 i3 i4 i5 i6 i7 i8
start i1
edge i1 i2
edge i2 i3 i6
edge i3 i4 i5
edge i4 i7 i8
edge i6 i7
terminal i5 0
terminal i7 1
terminal i8 0
path i1 i2 i3 i4 i8
path i1 i2 i6 i7
path i1 i2 i3 i5
";

/// Directed acyclic item graph. Item ids are 1-based positions in the
/// `nodes` declaration.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemGraph {
    names: Vec<String>,
    succ: Vec<Vec<usize>>,
    start: usize,
    terminals: BTreeMap<usize, f64>,
    /// Scripted logging paths declared alongside the graph.
    paths: Vec<Vec<usize>>,
}

impl ItemGraph {
    /// The eight-item scenario: two logged dead ends through i3/i4, one
    /// rewarded path through i6, and an unlogged i4 → i7 shortcut.
    pub fn stitch_world() -> Self {
        Self::parse(DEFAULT_GRAPH).expect("built-in graph is valid")
    }

    pub fn default_text() -> &'static str {
        DEFAULT_GRAPH
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::format(path, e))
    }

    /// Parses the line-based format:
    ///
    /// ```text
    /// nodes a b c        # declares items, in id order
    /// start a
    /// edge a b c         # a → b, a → c
    /// terminal c 1.0     # terminal item and its reward
    /// path a b c         # optional scripted logging path
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut start = None;
        let mut raw_edges: Vec<(String, Vec<String>)> = Vec::new();
        let mut raw_terms: Vec<(String, f64)> = Vec::new();
        let mut raw_paths: Vec<Vec<String>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Graph(format!("line {}: {msg}", lineno + 1));
            let mut words = line.split_whitespace();
            let key = words.next().unwrap_or_default();
            let rest: Vec<String> = words.map(str::to_string).collect();
            match key {
                "nodes" => names.extend(rest),
                "start" => {
                    if rest.len() != 1 {
                        return Err(bad("`start` takes one item"));
                    }
                    start = Some(rest[0].clone());
                }
                "edge" => {
                    if rest.len() < 2 {
                        return Err(bad("`edge` needs a source and at least one successor"));
                    }
                    raw_edges.push((rest[0].clone(), rest[1..].to_vec()));
                }
                "terminal" => {
                    if rest.len() != 2 {
                        return Err(bad("`terminal` takes an item and a reward"));
                    }
                    let r: f64 = rest[1].parse().map_err(|_| bad("reward is not a number"))?;
                    if !r.is_finite() {
                        return Err(bad("reward must be finite"));
                    }
                    raw_terms.push((rest[0].clone(), r));
                }
                "path" => {
                    if rest.is_empty() {
                        return Err(bad("`path` needs at least one item"));
                    }
                    raw_paths.push(rest);
                }
                other => return Err(bad(&format!("unknown directive `{other}`"))),
            }
        }
        let mut index = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i + 1).is_some() {
                return Err(Error::Graph(format!("duplicate item `{n}`")));
            }
        }
        let lookup = |n: &str| {
            index
                .get(n)
                .copied()
                .ok_or_else(|| Error::Graph(format!("unknown item `{n}`")))
        };
        let start = lookup(&start.ok_or_else(|| Error::Graph("missing `start`".into()))?)?;
        let mut succ = vec![Vec::new(); names.len()];
        for (from, tos) in &raw_edges {
            let f = lookup(from)?;
            for to in tos {
                let t = lookup(to)?;
                if !succ[f - 1].contains(&t) {
                    succ[f - 1].push(t);
                }
            }
        }
        let mut terminals = BTreeMap::new();
        for (n, r) in &raw_terms {
            if terminals.insert(lookup(n)?, *r).is_some() {
                return Err(Error::Graph(format!("terminal `{n}` declared twice")));
            }
        }
        let paths = raw_paths
            .iter()
            .map(|p| p.iter().map(|n| lookup(n)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let g = Self {
            names,
            succ,
            start,
            terminals,
            paths,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        if self.names.is_empty() {
            return Err(Error::Graph("no items".into()));
        }
        for id in 1..=self.n_items() {
            let name = self.name(id);
            match (self.is_terminal(id), self.succ[id - 1].is_empty()) {
                (true, false) => return Err(Error::Graph(format!("terminal `{name}` has successors"))),
                (false, true) => return Err(Error::Graph(format!("non-terminal `{name}` has no successors"))),
                _ => {}
            }
        }
        // Kahn's algorithm: anything left over sits on a cycle.
        let mut indeg = vec![0usize; self.n_items()];
        for s in &self.succ {
            for &t in s {
                indeg[t - 1] += 1;
            }
        }
        let mut queue: Vec<usize> = (1..=self.n_items()).filter(|&i| indeg[i - 1] == 0).collect();
        let mut seen = 0;
        while let Some(i) = queue.pop() {
            seen += 1;
            for &t in &self.succ[i - 1] {
                indeg[t - 1] -= 1;
                if indeg[t - 1] == 0 {
                    queue.push(t);
                }
            }
        }
        if seen != self.n_items() {
            return Err(Error::Graph("graph contains a cycle".into()));
        }
        let reachable = self.reachable_from(self.start);
        if !reachable
            .iter()
            .any(|i| self.terminal_reward(*i).is_some_and(|r| r > 0.0))
        {
            return Err(Error::Graph(
                "no positive-reward terminal is reachable from the start item".into(),
            ));
        }
        for p in &self.paths {
            if p[0] != self.start {
                return Err(Error::Graph("scripted path does not begin at the start item".into()));
            }
            for w in p.windows(2) {
                if !self.succ[w[0] - 1].contains(&w[1]) {
                    return Err(Error::Graph(format!(
                        "scripted path uses missing edge {} → {}",
                        self.name(w[0]),
                        self.name(w[1])
                    )));
                }
            }
            if !self.is_terminal(*p.last().unwrap()) {
                return Err(Error::Graph("scripted path does not end at a terminal".into()));
            }
        }
        Ok(())
    }

    fn reachable_from(&self, from: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![from];
        while let Some(i) = stack.pop() {
            if seen.insert(i) {
                stack.extend(&self.succ[i - 1]);
            }
        }
        seen
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "nodes {}", self.names.join(" "));
        let _ = writeln!(s, "start {}", self.name(self.start));
        for id in 1..=self.n_items() {
            if !self.succ[id - 1].is_empty() {
                let tos: Vec<&str> = self.succ[id - 1].iter().map(|&t| self.name(t)).collect();
                let _ = writeln!(s, "edge {} {}", self.name(id), tos.join(" "));
            }
        }
        for (id, r) in &self.terminals {
            let _ = writeln!(s, "terminal {} {r}", self.name(*id));
        }
        for p in &self.paths {
            let names: Vec<&str> = p.iter().map(|&i| self.name(i)).collect();
            let _ = writeln!(s, "path {}", names.join(" "));
        }
        s
    }

    pub fn n_items(&self) -> usize {
        self.names.len()
    }

    /// Spaces of the trajectories this graph produces: (current, previous)
    /// id windows and item-id actions.
    pub fn spaces(&self) -> (StateSpace, ActionSpace) {
        (
            StateSpace::IdWindow {
                slots: 2,
                n_items: self.n_items(),
            },
            ActionSpace::Discrete(self.n_items()),
        )
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name).map(|i| i + 1)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id - 1]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn successors(&self, id: usize) -> &[usize] {
        &self.succ[id - 1]
    }

    pub fn is_terminal(&self, id: usize) -> bool {
        self.terminals.contains_key(&id)
    }

    pub fn terminal_reward(&self, id: usize) -> Option<f64> {
        self.terminals.get(&id).copied()
    }

    pub fn scripted_paths(&self) -> &[Vec<usize>] {
        &self.paths
    }

    pub fn path_names(&self, path: &[usize]) -> Vec<String> {
        path.iter().map(|&i| self.name(i).to_string()).collect()
    }

    /// Every start-to-terminal path with its return.
    pub fn enumerate_paths(&self) -> Vec<(Vec<usize>, f64)> {
        let mut out = Vec::new();
        let mut stack = vec![vec![self.start]];
        while let Some(p) = stack.pop() {
            let last = *p.last().unwrap();
            if let Some(r) = self.terminal_reward(last) {
                out.push((p, r));
                continue;
            }
            for &n in self.successors(last).iter().rev() {
                let mut q = p.clone();
                q.push(n);
                stack.push(q);
            }
        }
        out
    }

    pub fn reset(&self) -> EnvState {
        EnvState {
            current: self.start,
            steps: 0,
            history: vec![self.start],
        }
    }

    /// Moves to `action`. Illegal actions leave `state` untouched.
    pub fn step(&self, state: &EnvState, action: usize) -> Result<(EnvState, f64, bool)> {
        if self.is_terminal(state.current) {
            return Err(Error::NoLegalActions(self.name(state.current).to_string()));
        }
        if action == 0 || action > self.n_items() || !self.successors(state.current).contains(&action) {
            return Err(Error::InvalidAction {
                current: self.name(state.current).to_string(),
                action: if (1..=self.n_items()).contains(&action) {
                    self.name(action).to_string()
                } else {
                    format!("#{action}")
                },
            });
        }
        let mut history = state.history.clone();
        history.push(action);
        let next = EnvState {
            current: action,
            steps: state.steps + 1,
            history,
        };
        let reward = self.terminal_reward(action).unwrap_or(0.0);
        Ok((next, reward, self.is_terminal(action)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvState {
    pub current: usize,
    pub steps: usize,
    pub history: Vec<usize>,
}

impl EnvState {
    pub fn previous(&self) -> Option<usize> {
        self.history.len().checked_sub(2).map(|i| self.history[i])
    }

    /// Policy-facing state: `[current, previous]` (0 = none).
    pub fn token(&self) -> Token {
        Token::Ids(vec![self.current, self.previous().unwrap_or(0)])
    }
}

/// A fixed data-collection behavior.
#[derive(Clone, Debug, PartialEq)]
pub enum LoggingPolicy {
    /// Follows an item path; the path must start at the start item.
    Scripted(Vec<usize>),
    /// Uniform over legal successors.
    Uniform,
    /// Follows the path, but with probability `epsilon` picks a uniform
    /// successor; falls back to uniform once off the path.
    EpsilonScripted { path: Vec<usize>, epsilon: f64 },
}

impl LoggingPolicy {
    pub fn act<R: Rng + ?Sized>(&self, graph: &ItemGraph, state: &EnvState, rng: &mut R) -> Result<usize> {
        let legal = graph.successors(state.current);
        if legal.is_empty() {
            return Err(Error::NoLegalActions(graph.name(state.current).to_string()));
        }
        let on_path =
            |path: &[usize]| path.len() > state.history.len() && path[..state.history.len()] == state.history[..];
        match self {
            LoggingPolicy::Scripted(path) => {
                if !on_path(path) {
                    return Err(Error::invalid(format!(
                        "scripted path has no step after {:?}",
                        graph.path_names(&state.history)
                    )));
                }
                Ok(path[state.history.len()])
            }
            LoggingPolicy::Uniform => Ok(legal[rng.random_range(0..legal.len())]),
            LoggingPolicy::EpsilonScripted { path, epsilon } => {
                let explore = rng.random::<f64>() < *epsilon;
                if explore || !on_path(path) {
                    Ok(legal[rng.random_range(0..legal.len())])
                } else {
                    Ok(path[state.history.len()])
                }
            }
        }
    }
}

/// Scripted policies for the paths declared with the graph, or a uniform
/// policy if there are none.
pub fn default_policies(graph: &ItemGraph) -> Vec<LoggingPolicy> {
    if graph.scripted_paths().is_empty() {
        vec![LoggingPolicy::Uniform]
    } else {
        graph
            .scripted_paths()
            .iter()
            .cloned()
            .map(LoggingPolicy::Scripted)
            .collect()
    }
}

/// One finished (or truncated) episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub trajectory: Trajectory,
    /// Visited items including the start.
    pub path: Vec<usize>,
    pub truncated: bool,
}

impl Episode {
    pub fn total_return(&self) -> f64 {
        self.trajectory.total_return()
    }
}

/// `n` episodes, cycling through `policies`; reproducible from `seed`.
pub fn generate_offline_dataset(
    graph: &ItemGraph,
    policies: &[LoggingPolicy],
    n: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    if policies.is_empty() {
        return Err(Error::invalid("no logging policies"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut policy = policies[i % policies.len()].clone();
            play_episode(graph, &mut policy, DEFAULT_STEP_CAP, &mut rng).map(|e| e.trajectory)
        })
        .collect()
}

/// Item path of a stitch-world trajectory: the start plus every action.
pub fn item_path(traj: &Trajectory) -> Option<Vec<usize>> {
    let mut p = vec![traj.states.first()?.state_id()?];
    for a in &traj.actions {
        p.push(a.state_id()?);
    }
    Some(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(g: &ItemGraph, names: &[&str]) -> Vec<usize> {
        names.iter().map(|n| g.id(n).unwrap()).collect()
    }

    fn walk(g: &ItemGraph, names: &[&str]) -> (Vec<f64>, bool) {
        let mut s = g.reset();
        let mut rewards = vec![];
        let mut done = false;
        for &a in &ids(g, names)[1..] {
            let (n, r, d) = g.step(&s, a).unwrap();
            s = n;
            rewards.push(r);
            done = d;
        }
        (rewards, done)
    }

    #[test]
    fn reset_starts_at_i1() {
        let g = ItemGraph::stitch_world();
        let s = g.reset();
        assert_eq!(g.name(s.current), "i1");
        assert_eq!(s, g.reset());
        let (mid, _, _) = g.step(&s, g.id("i2").unwrap()).unwrap();
        assert_eq!(mid.history.len(), 2);
        assert_eq!(g.reset().history.len(), 1);
    }

    #[test]
    fn rewarded_and_dead_end_paths() {
        let g = ItemGraph::stitch_world();
        assert_eq!(walk(&g, &["i1", "i2", "i6", "i7"]), (vec![0.0, 0.0, 1.0], true));
        let (r, done) = walk(&g, &["i1", "i2", "i3", "i4", "i8"]);
        assert_eq!(r.iter().sum::<f64>(), 0.0);
        assert!(done);
    }

    #[test]
    fn illegal_action_leaves_state() {
        let g = ItemGraph::stitch_world();
        let s = g.reset();
        assert!(matches!(g.step(&s, 9), Err(Error::InvalidAction { .. })));
        assert!(matches!(
            g.step(&s, g.id("i6").unwrap()),
            Err(Error::InvalidAction { .. })
        ));
        assert_eq!(s, g.reset());
    }

    #[test]
    fn text_round_trip() {
        let g = ItemGraph::stitch_world();
        assert_eq!(ItemGraph::parse(&g.to_text()).unwrap(), g);
    }

    #[test]
    fn cycles_and_dead_ends_are_rejected() {
        let cyc = "nodes a b c\nstart a\nedge a b\nedge b a c\nterminal c 1\n";
        assert!(matches!(ItemGraph::parse(cyc), Err(Error::Graph(_))));
        let dead = "nodes a b c\nstart a\nedge a b c\nterminal c 1\n";
        assert!(ItemGraph::parse(dead).is_err());
        let hopeless = "nodes a b\nstart a\nedge a b\nterminal b 0\n";
        assert!(ItemGraph::parse(hopeless).is_err());
    }

    #[test]
    fn zero_episodes_is_an_error() {
        let g = ItemGraph::stitch_world();
        assert!(generate_offline_dataset(&g, &default_policies(&g), 0, 1).is_err());
    }

    #[test]
    fn scripted_policy_rejects_off_path_states() {
        let g = ItemGraph::stitch_world();
        let p = LoggingPolicy::Scripted(ids(&g, &["i1", "i2", "i6", "i7"]));
        let s = g.reset();
        let (s, _, _) = g.step(&s, 2).unwrap();
        let (s, _, _) = g.step(&s, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(p.act(&g, &s, &mut rng).is_err());
    }
}

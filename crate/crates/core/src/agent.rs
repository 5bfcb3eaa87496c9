//! Acting policies for the item-graph environment and the episode loop.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::envsim::{EnvState, Episode, ItemGraph, LoggingPolicy};
use crate::error::{Error, Result};
use crate::features::Encoder;
use crate::policy::{decode_action, sample_action, PolicyNet, SampleMode};
use crate::trajectory::{ContextWindow, Token, Trajectory};

pub trait Agent {
    /// Called before the first step of every episode.
    fn begin(&mut self) {}
    fn act(&mut self, graph: &ItemGraph, state: &EnvState, rng: &mut ChaCha8Rng) -> Result<usize>;
    /// Reward received for the last action.
    fn observe(&mut self, _reward: f64) {}
}

/// Follows a fixed item path.
pub struct ScriptedAgent(pub Vec<usize>);

impl Agent for ScriptedAgent {
    fn act(&mut self, graph: &ItemGraph, state: &EnvState, rng: &mut ChaCha8Rng) -> Result<usize> {
        LoggingPolicy::Scripted(self.0.clone()).act(graph, state, rng)
    }
}

impl Agent for LoggingPolicy {
    fn act(&mut self, graph: &ItemGraph, state: &EnvState, rng: &mut ChaCha8Rng) -> Result<usize> {
        LoggingPolicy::act(self, graph, state, rng)
    }
}

/// Uniform over legal successors.
pub struct RandomAgent;

impl Agent for RandomAgent {
    fn act(&mut self, graph: &ItemGraph, state: &EnvState, rng: &mut ChaCha8Rng) -> Result<usize> {
        let legal = graph.successors(state.current);
        if legal.is_empty() {
            return Err(Error::NoLegalActions(graph.name(state.current).to_string()));
        }
        Ok(legal[rng.random_range(0..legal.len())])
    }
}

/// Return-conditioned transformer policy. The conditioning RTG starts at
/// `g0` and after each step becomes `max(0, g − r)`.
pub struct DtAgent<'a> {
    pub net: &'a PolicyNet,
    pub encoder: &'a Encoder,
    pub g0: f64,
    pub mode: SampleMode,
    states: Vec<Token>,
    actions: Vec<Token>,
    rtg: Vec<f64>,
    g: f64,
}

impl<'a> DtAgent<'a> {
    pub fn new(net: &'a PolicyNet, encoder: &'a Encoder, g0: f64, mode: SampleMode) -> Self {
        Self {
            net,
            encoder,
            g0,
            mode,
            states: vec![],
            actions: vec![],
            rtg: vec![],
            g: g0,
        }
    }

    /// Window over the last `k` steps; the current action is unknown.
    fn window(&self) -> ContextWindow {
        let k = self.net.cfg.k;
        let t = self.states.len() as i64 - 1;
        let mut w = ContextWindow {
            rtg: vec![],
            states: vec![],
            actions: vec![],
            rewards: vec![],
            timesteps: vec![],
            mask: vec![],
        };
        for pos in (t - k as i64 + 1)..=t {
            if pos < 0 {
                w.rtg.push(0.0);
                w.states.push(None);
                w.actions.push(None);
                w.timesteps.push(-1);
                w.mask.push(false);
            } else {
                let p = pos as usize;
                w.rtg.push(self.rtg[p]);
                w.states.push(Some(self.states[p].clone()));
                w.actions.push(self.actions.get(p).cloned());
                w.timesteps.push(pos);
                w.mask.push(true);
            }
            w.rewards.push(0.0);
        }
        w
    }
}

impl Agent for DtAgent<'_> {
    fn begin(&mut self) {
        self.states.clear();
        self.actions.clear();
        self.rtg.clear();
        self.g = self.g0;
    }

    fn act(&mut self, graph: &ItemGraph, state: &EnvState, rng: &mut ChaCha8Rng) -> Result<usize> {
        let legal = graph.successors(state.current);
        if legal.is_empty() {
            return Err(Error::NoLegalActions(graph.name(state.current).to_string()));
        }
        self.states.push(state.token());
        self.rtg.push(self.g);
        let (mean, log_var) = self.net.predict(&self.window(), self.encoder)?;
        let a = sample_action(&mean, &log_var, self.mode, rng);
        let candidates = legal
            .iter()
            .map(|&id| Ok((id, self.encoder.item(id)?)))
            .collect::<Result<Vec<_>>>()?;
        let id = decode_action(&a, &candidates)?;
        self.actions.push(Token::Id(id));
        Ok(id)
    }

    fn observe(&mut self, reward: f64) {
        self.g = (self.g - reward).max(0.0);
    }
}

/// Plays one episode. States are recorded as [`EnvState::token`], actions as
/// item ids; episodes longer than `step_cap` are truncated with a warning.
pub fn play_episode<A: Agent + ?Sized>(
    graph: &ItemGraph,
    agent: &mut A,
    step_cap: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    agent.begin();
    let mut state = graph.reset();
    let (mut states, mut actions, mut rewards) = (vec![], vec![], vec![]);
    let mut truncated = false;
    loop {
        if states.len() >= step_cap {
            truncated = true;
            log::warn!("episode truncated after {step_cap} steps");
            break;
        }
        let a = agent.act(graph, &state, rng)?;
        let (next, r, done) = graph.step(&state, a)?;
        agent.observe(r);
        states.push(state.token());
        actions.push(Token::Id(a));
        rewards.push(r);
        state = next;
        if done {
            break;
        }
    }
    if states.is_empty() {
        return Err(Error::invalid("episode produced no steps"));
    }
    Ok(Episode {
        trajectory: Trajectory::new(states, actions, rewards)?,
        path: state.history,
        truncated,
    })
}

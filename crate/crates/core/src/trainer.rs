//! Offline pretraining, online finetuning and the replay buffer.

use std::collections::VecDeque;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{play_episode, DtAgent};
use crate::envsim::{ItemGraph, DEFAULT_STEP_CAP};
use crate::error::{Error, Result};
use crate::features::Encoder;
use crate::policy::{Batch, Learner, SampleMode, StepStats};
use crate::qlearn::{cql_fit, CqlConfig, QTable};
use crate::relabel::{clear_relabels, relabel_dataset, table_value};
use crate::trajectory::{sample_subsequence, trajectory_sampling_probs, ContextWindow, Trajectory};

/// When the value table used for relabeling is (re)fitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelabelMode {
    /// Refit on the replay buffer at the start of every round.
    PerRound,
    /// Keep the table fitted on the offline data.
    Frozen,
    /// Train on the plain RTG.
    Off,
}

impl FromStr for RelabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_round" | "per-round" => Ok(Self::PerRound),
            "frozen" => Ok(Self::Frozen),
            "off" => Ok(Self::Off),
            _ => Err(Error::invalid(format!(
                "unknown relabel mode {s:?} (expected per_round, frozen or off)"
            ))),
        }
    }
}

impl std::fmt::Display for RelabelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerRound => "per_round",
            Self::Frozen => "frozen",
            Self::Off => "off",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub g_online: f64,
    pub rounds: usize,
    pub iters_per_round: usize,
    pub batch: usize,
    pub capacity: usize,
    pub top_n: usize,
    pub step_cap: usize,
    pub pretrain_iters: usize,
    pub rollouts_per_round: usize,
    pub seed: u64,
    pub relabel: RelabelMode,
    /// Never evict the top-N seed trajectories.
    pub protect_seeds: bool,
    pub cql: CqlConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 2,
            g_online: 2.0,
            rounds: 50,
            iters_per_round: 100,
            batch: 16,
            capacity: 64,
            top_n: 8,
            step_cap: DEFAULT_STEP_CAP,
            pretrain_iters: 1000,
            rollouts_per_round: 1,
            seed: 0,
            relabel: RelabelMode::PerRound,
            protect_seeds: false,
            cql: CqlConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("k", self.k),
            ("batch", self.batch),
            ("capacity", self.capacity),
            ("top_n", self.top_n),
            ("step_cap", self.step_cap),
            ("rollouts_per_round", self.rollouts_per_round),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if !self.g_online.is_finite() {
            return Err(Error::NonFinite("g_online"));
        }
        self.cql.validate()
    }
}

/// Bounded trajectory store, evicted oldest-first.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    protect_seeds: bool,
    entries: VecDeque<(Trajectory, bool)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, protect_seeds: bool) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("buffer capacity must be at least 1"));
        }
        Ok(Self {
            capacity,
            protect_seeds,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds a trajectory, evicting if full. Returns the evicted one.
    ///
    /// With seed protection, the oldest non-seed entry goes; when every
    /// entry is a seed, the new trajectory is dropped instead.
    pub fn insert(&mut self, traj: Trajectory, seed: bool) -> Option<Trajectory> {
        if self.entries.len() < self.capacity {
            self.entries.push_back((traj, seed));
            return None;
        }
        if !self.protect_seeds {
            let old = self.entries.pop_front().map(|e| e.0);
            self.entries.push_back((traj, seed));
            return old;
        }
        match self.entries.iter().position(|e| !e.1) {
            Some(i) => {
                let old = self.entries.remove(i).map(|e| e.0);
                self.entries.push_back((traj, seed));
                old
            }
            None => Some(traj),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> + '_ {
        self.entries.iter().map(|e| &e.0)
    }

    pub fn trajectories(&self) -> Vec<Trajectory> {
        self.iter().cloned().collect()
    }

    /// Replaces the stored trajectories in place (same order, same count).
    pub fn set_trajectories(&mut self, trajs: Vec<Trajectory>) -> Result<()> {
        if trajs.len() != self.entries.len() {
            return Err(Error::invalid("replacement has a different length"));
        }
        for (e, t) in self.entries.iter_mut().zip(trajs) {
            e.0 = t;
        }
        Ok(())
    }

    /// Length-proportional selection probabilities.
    pub fn probs(&self) -> Result<Vec<f64>> {
        trajectory_sampling_probs(&self.trajectories())
    }
}

/// Seeds a buffer with the `n` highest-return trajectories (ties go to the
/// earlier one), kept in dataset order.
pub fn init_buffer(dataset: &[Trajectory], n: usize, capacity: usize, protect_seeds: bool) -> Result<ReplayBuffer> {
    if n == 0 {
        return Err(Error::invalid("top-N must be at least 1"));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if n > capacity {
        return Err(Error::invalid(format!("top-N {n} exceeds buffer capacity {capacity}")));
    }
    if n > dataset.len() {
        log::warn!("top-N {n} exceeds dataset size {}; using all", dataset.len());
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| dataset[b].total_return().total_cmp(&dataset[a].total_return()));
    let mut chosen: Vec<usize> = order.into_iter().take(n).collect();
    chosen.sort_unstable();
    let mut buf = ReplayBuffer::new(capacity, protect_seeds)?;
    for i in chosen {
        buf.insert(dataset[i].clone(), true);
    }
    Ok(buf)
}

/// Draws `b` trajectories with probabilities `probs` and one uniform
/// length-`k` window from each.
pub fn sample_windows(
    trajs: &[Trajectory],
    probs: &[f64],
    b: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ContextWindow>> {
    if trajs.is_empty() {
        return Err(Error::Empty("trajectories"));
    }
    let dist = WeightedIndex::new(probs).map_err(|e| Error::invalid(format!("sampling weights: {e}")))?;
    (0..b)
        .map(|_| sample_subsequence(&trajs[dist.sample(rng)], k, rng))
        .collect()
}

fn relabel_with(trajs: &mut [Trajectory], q: &QTable) -> Result<()> {
    relabel_dataset(trajs, table_value(q)).map(|_| ())
}

fn train_iters(
    learner: &mut Learner,
    encoder: &Encoder,
    trajs: &[Trajectory],
    cfg: &TrainConfig,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StepStats>> {
    if cfg.k != learner.net.cfg.k {
        return Err(Error::invalid(format!(
            "context length {} does not match the policy's {}",
            cfg.k, learner.net.cfg.k
        )));
    }
    let probs = trajectory_sampling_probs(trajs)?;
    let mut stats = Vec::with_capacity(iters);
    for _ in 0..iters {
        let windows = sample_windows(trajs, &probs, cfg.batch, cfg.k, rng)?;
        let batch = Batch::encode(&windows, encoder, &learner.net.cfg)?;
        stats.push(learner.lagrangian_step(&batch)?);
    }
    Ok(stats)
}

/// Trains on the static dataset for `cfg.pretrain_iters` steps. Unless
/// relabeling is off, the dataset is relabeled first with `q` (fitted on
/// the dataset when not given).
pub fn pretrain_offline(
    learner: &mut Learner,
    encoder: &Encoder,
    dataset: &[Trajectory],
    cfg: &TrainConfig,
    q: Option<&QTable>,
) -> Result<Vec<StepStats>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut data = dataset.to_vec();
    match (cfg.relabel, q) {
        (RelabelMode::Off, _) => clear_relabels(&mut data),
        (_, Some(q)) => relabel_with(&mut data, q)?,
        (_, None) => {
            let q = cql_fit(&data, &cfg.cql)?;
            relabel_with(&mut data, &q)?
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    train_iters(learner, encoder, &data, cfg, cfg.pretrain_iters, &mut rng)
}

/// One line of the finetuning log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Mean return of this round's rollouts.
    pub mean_return: f64,
    pub entropy: f64,
    pub lambda: f64,
    pub nll: f64,
    pub buffer: usize,
}

/// Rollout → insert → relabel → update, for `cfg.rounds` rounds.
///
/// `offline_q` is the table used in frozen mode; it is fitted on the
/// dataset when absent.
pub fn finetune_online(
    graph: &ItemGraph,
    learner: &mut Learner,
    encoder: &Encoder,
    dataset: &[Trajectory],
    cfg: &TrainConfig,
    offline_q: Option<&QTable>,
) -> Result<Vec<RoundMetrics>> {
    cfg.validate()?;
    if cfg.rounds == 0 {
        return Ok(vec![]);
    }
    if encoder.state_dim() != learner.net.cfg.state_dim || encoder.action_dim() != learner.net.cfg.action_dim {
        return Err(Error::invalid("encoder and policy dimensions differ"));
    }
    if encoder.n_items() < graph.n_items() {
        return Err(Error::invalid(format!(
            "encoder knows {} items but the graph has {}",
            encoder.n_items(),
            graph.n_items()
        )));
    }
    let mut buffer = init_buffer(dataset, cfg.top_n, cfg.capacity, cfg.protect_seeds)?;
    let frozen = match (cfg.relabel, offline_q) {
        (RelabelMode::Frozen, Some(q)) => Some(q.clone()),
        (RelabelMode::Frozen, None) => Some(cql_fit(dataset, &cfg.cql)?),
        _ => None,
    };
    // Separate streams so the update sampling does not depend on how many
    // random draws the rollouts consumed.
    let mut act_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut train_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let mut log = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let mut returns = 0.0;
        for _ in 0..cfg.rollouts_per_round {
            let mut agent = DtAgent::new(&learner.net, encoder, cfg.g_online, SampleMode::Stochastic);
            let ep = play_episode(graph, &mut agent, cfg.step_cap, &mut act_rng)?;
            returns += ep.total_return();
            buffer.insert(ep.trajectory, false);
        }
        let mut trajs = buffer.trajectories();
        match cfg.relabel {
            RelabelMode::PerRound => {
                let q = cql_fit(&trajs, &cfg.cql)?;
                relabel_with(&mut trajs, &q)?;
            }
            RelabelMode::Frozen => relabel_with(&mut trajs, frozen.as_ref().expect("fitted above"))?,
            RelabelMode::Off => clear_relabels(&mut trajs),
        }
        buffer.set_trajectories(trajs.clone())?;
        let stats = train_iters(learner, encoder, &trajs, cfg, cfg.iters_per_round, &mut train_rng)?;
        let n = stats.len().max(1) as f64;
        let m = RoundMetrics {
            round,
            mean_return: returns / cfg.rollouts_per_round as f64,
            entropy: stats.iter().map(|s| s.entropy).sum::<f64>() / n,
            lambda: learner.lambda(),
            nll: stats.iter().map(|s| s.nll).sum::<f64>() / n,
            buffer: buffer.len(),
        };
        log::info!(
            "round {round}: return {:.3} entropy {:.3} lambda {:.4} nll {:.3}",
            m.mean_return,
            m.entropy,
            m.lambda,
            m.nll
        );
        log.push(m);
    }
    Ok(log)
}

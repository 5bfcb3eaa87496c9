//! Plain `key = value` experiment configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::policy::{EntropyMode, LearnerConfig, PolicyConfig};
use crate::qlearn::CqlConfig;
use crate::trainer::TrainConfig;

/// Everything `run` needs. Paths are resolved against the config file's
/// directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub graph: Option<PathBuf>,
    pub seed: u64,
    /// Offline episodes, cycling through the graph's logging paths.
    pub n_trajectories: usize,
    pub d_a: usize,
    pub train: TrainConfig,
    pub policy: PolicyConfig,
    pub lr: f64,
    pub grad_clip: f64,
    /// `None` means the default target for the action width.
    pub beta: Option<f64>,
    pub entropy: EntropyMode,
    pub dual_init: f64,
    pub dual_lr: f64,
    pub eval_episodes: usize,
    pub eval_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let policy = PolicyConfig::default();
        let learner = LearnerConfig::for_policy(&policy);
        Self {
            graph: None,
            seed: 0,
            n_trajectories: 3,
            d_a: policy.action_dim,
            train: TrainConfig::default(),
            policy,
            lr: learner.lr,
            grad_clip: learner.grad_clip,
            beta: None,
            entropy: learner.entropy,
            dual_init: learner.dual_init,
            dual_lr: learner.dual_lr,
            eval_episodes: 200,
            eval_seed: 1000,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for `{key}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "bad value {v:?} for `{key}` (expected true/false)"
        ))),
    }
}

impl ExperimentConfig {
    /// Parses `text`; relative paths are taken from `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let cfg = Self::parse_partial(text, base)?;
        if cfg.graph.is_none() {
            return Err(Error::MissingKey("graph".into()));
        }
        Ok(cfg)
    }

    /// Like [`parse`](Self::parse) but without requiring `graph`, for
    /// callers that may supply it later.
    pub fn parse_partial(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim(), base)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_file_partial(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse_partial(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<()> {
        let t = &mut self.train;
        let p = &mut self.policy;
        match key {
            "graph" => self.graph = Some(base.join(v)),
            "seed" => self.seed = num(key, v)?,
            "n_trajectories" => self.n_trajectories = num(key, v)?,
            "d_a" => self.d_a = num(key, v)?,
            "K" | "k" => {
                t.k = num(key, v)?;
                p.k = t.k;
            }
            "g_online" => t.g_online = num(key, v)?,
            "rounds" => t.rounds = num(key, v)?,
            "iters_per_round" => t.iters_per_round = num(key, v)?,
            "batch" => t.batch = num(key, v)?,
            "capacity" => t.capacity = num(key, v)?,
            "top_n" => t.top_n = num(key, v)?,
            "step_cap" => t.step_cap = num(key, v)?,
            "pretrain_iters" => t.pretrain_iters = num(key, v)?,
            "rollouts_per_round" => t.rollouts_per_round = num(key, v)?,
            "relabel" => t.relabel = v.parse()?,
            "protect_seeds" => t.protect_seeds = flag(key, v)?,
            "cql_alpha" => t.cql.alpha = num(key, v)?,
            "cql_gamma" => t.cql.gamma = num(key, v)?,
            "cql_lr" => t.cql.lr = num(key, v)?,
            "cql_sweeps" => t.cql.sweeps = num(key, v)?,
            "cql_mu" => t.cql.mu = v.parse()?,
            "layers" => p.layers = num(key, v)?,
            "heads" => p.heads = num(key, v)?,
            "width" => p.width = num(key, v)?,
            "ff_mult" => p.ff_mult = num(key, v)?,
            "max_timestep" => p.max_timestep = num(key, v)?,
            "sigma_min" => p.sigma_min = num(key, v)?,
            "sigma_max" => p.sigma_max = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "grad_clip" => self.grad_clip = num(key, v)?,
            "beta" => self.beta = if v == "auto" { None } else { Some(num(key, v)?) },
            "entropy" => {
                self.entropy = match v {
                    "dual" => EntropyMode::Dual,
                    "off" => EntropyMode::Fixed(0.0),
                    _ => EntropyMode::Fixed(num(key, v)?),
                }
            }
            "dual_init" => self.dual_init = num(key, v)?,
            "dual_lr" => self.dual_lr = num(key, v)?,
            "eval_episodes" => self.eval_episodes = num(key, v)?,
            "eval_seed" => self.eval_seed = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Policy shape for the given feature widths.
    pub fn policy_for(&self, state_dim: usize, action_dim: usize) -> PolicyConfig {
        PolicyConfig {
            state_dim,
            action_dim,
            k: self.train.k,
            ..self.policy.clone()
        }
    }

    pub fn learner_for(&self, policy: &PolicyConfig) -> LearnerConfig {
        LearnerConfig {
            lr: self.lr,
            grad_clip: self.grad_clip,
            beta: self.beta.unwrap_or_else(|| policy.default_beta()),
            entropy: self.entropy,
            dual_init: self.dual_init,
            dual_lr: self.dual_lr,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn cql(&self) -> &CqlConfig {
        &self.train.cql
    }

    /// Fully resolved snapshot; parsing it back gives the same config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let p = &self.policy;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(g) = &self.graph {
            kv("graph", g.display().to_string());
        }
        kv("seed", self.seed.to_string());
        kv("n_trajectories", self.n_trajectories.to_string());
        kv("d_a", self.d_a.to_string());
        kv("K", t.k.to_string());
        kv("g_online", t.g_online.to_string());
        kv("rounds", t.rounds.to_string());
        kv("iters_per_round", t.iters_per_round.to_string());
        kv("batch", t.batch.to_string());
        kv("capacity", t.capacity.to_string());
        kv("top_n", t.top_n.to_string());
        kv("step_cap", t.step_cap.to_string());
        kv("pretrain_iters", t.pretrain_iters.to_string());
        kv("rollouts_per_round", t.rollouts_per_round.to_string());
        kv("relabel", t.relabel.to_string());
        kv("protect_seeds", t.protect_seeds.to_string());
        kv("cql_alpha", t.cql.alpha.to_string());
        kv("cql_gamma", t.cql.gamma.to_string());
        kv("cql_lr", t.cql.lr.to_string());
        kv("cql_sweeps", t.cql.sweeps.to_string());
        kv("cql_mu", t.cql.mu.to_string());
        kv("layers", p.layers.to_string());
        kv("heads", p.heads.to_string());
        kv("width", p.width.to_string());
        kv("ff_mult", p.ff_mult.to_string());
        kv("max_timestep", p.max_timestep.to_string());
        kv("sigma_min", p.sigma_min.to_string());
        kv("sigma_max", p.sigma_max.to_string());
        kv("lr", self.lr.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("beta", self.beta.map_or("auto".into(), |b| b.to_string()));
        kv(
            "entropy",
            match self.entropy {
                EntropyMode::Dual => "dual".into(),
                EntropyMode::Fixed(l) => l.to_string(),
            },
        );
        kv("dual_init", self.dual_init.to_string());
        kv("dual_lr", self.dual_lr.to_string());
        kv("eval_episodes", self.eval_episodes.to_string());
        kv("eval_seed", self.eval_seed.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_graph_is_named() {
        let err = ExperimentConfig::parse("seed = 3\n", Path::new(".")).unwrap_err();
        assert!(matches!(&err, Error::MissingKey(k) if k == "graph"), "{err}");
        assert!(err.to_string().contains("graph"));
    }

    #[test]
    fn round_trip() {
        let mut c =
            ExperimentConfig::parse("graph = g.txt\nK = 3 # context\nentropy = off\n", Path::new("/x")).unwrap();
        assert_eq!(c.graph.as_deref(), Some(Path::new("/x/g.txt")));
        assert_eq!((c.train.k, c.policy.k), (3, 3));
        assert_eq!(c.entropy, EntropyMode::Fixed(0.0));
        c.beta = Some(1.5);
        let back = ExperimentConfig::parse(&c.to_text(), Path::new("/elsewhere")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(ExperimentConfig::parse("graph = g\ncolour = red\n", Path::new(".")).is_err());
    }

    #[test]
    fn defaults() {
        let c = ExperimentConfig::default();
        assert_eq!(c.train.k, 2);
        assert_eq!(c.train.g_online, 2.0);
    }
}

//! Trajectories, return-to-go, context windows, and the dataset file format.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relabel::regenerate_window_rtg;

const DATASET_FORMAT: &str = "edt-trajectories";
const DATASET_VERSION: u32 = 1;
const MANIFEST_FORMAT: &str = "edt-manifest";

/// One state or action entry.
///
/// Item ids are 1-based; `0` means "no item" wherever ids appear inside a
/// window (`Ids`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Token {
    Id(usize),
    /// Fixed-length window of item ids, most recent first.
    Ids(Vec<usize>),
    Vector(Vec<f64>),
}

impl Token {
    /// Discrete key used by the tabular learner: the id itself, or the most
    /// recent item of a window.
    pub fn state_id(&self) -> Option<usize> {
        match self {
            Token::Id(i) => Some(*i),
            Token::Ids(v) => v.first().copied(),
            Token::Vector(_) => None,
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Token::Vector(v) => v.iter().all(|x| x.is_finite()),
            _ => true,
        }
    }
}

/// Suffix sums: `out[t] = Σ_{t' ≥ t} rewards[t']`.
pub fn reward_to_go(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc += rewards[t];
        out[t] = acc;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Token>,
    pub actions: Vec<Token>,
    pub rewards: Vec<f64>,
    pub rtg: Vec<f64>,
    /// Value-guided RTG; the original `rtg` is never overwritten.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtg_relabel: Option<Vec<f64>>,
}

impl Trajectory {
    /// Builds a fresh trajectory with `rtg` computed from `rewards`.
    pub fn new(states: Vec<Token>, actions: Vec<Token>, rewards: Vec<f64>) -> Result<Self> {
        let rtg = reward_to_go(&rewards);
        let t = Self {
            states,
            actions,
            rewards,
            rtg,
            rtg_relabel: None,
        };
        t.validate(0)?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// RTG used to condition training windows: relabeled if present.
    pub fn anchor_rtg(&self) -> &[f64] {
        self.rtg_relabel.as_deref().unwrap_or(&self.rtg)
    }

    /// Checks the length and finiteness invariants; `index` is only used in
    /// the error message.
    pub fn validate(&self, index: usize) -> Result<()> {
        let err = |detail: String| Error::Trajectory { index, detail };
        let n = self.rewards.len();
        if n == 0 {
            return Err(err("empty trajectory".into()));
        }
        if self.states.len() != n || self.actions.len() != n || self.rtg.len() != n {
            return Err(err(format!(
                "sequence lengths differ: states {}, actions {}, rewards {}, rtg {}",
                self.states.len(),
                self.actions.len(),
                n,
                self.rtg.len()
            )));
        }
        if let Some(r) = &self.rtg_relabel {
            if r.len() != n {
                return Err(err(format!("rtg_relabel has length {} (expected {n})", r.len())));
            }
        }
        let floats = self
            .rewards
            .iter()
            .chain(&self.rtg)
            .chain(self.rtg_relabel.iter().flatten());
        if floats.clone().any(|v| !v.is_finite()) || !self.states.iter().chain(&self.actions).all(Token::is_finite) {
            return Err(err("non-finite value".into()));
        }
        Ok(())
    }
}

/// A length-`k` slice of (RTG, state, action) triples ending at `end`.
/// Padded entries have timestep −1, no state/action, RTG 0 and
/// `mask == false`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextWindow {
    pub rtg: Vec<f64>,
    pub states: Vec<Option<Token>>,
    pub actions: Vec<Option<Token>>,
    pub rewards: Vec<f64>,
    pub timesteps: Vec<i64>,
    pub mask: Vec<bool>,
}

impl ContextWindow {
    pub fn k(&self) -> usize {
        self.rtg.len()
    }

    /// Window of `traj` ending at `end` whose RTG entries are regenerated
    /// from the anchor `traj.anchor_rtg()[end]` with the window's own
    /// rewards, so consecutive entries differ by exactly the reward.
    pub fn ending_at(traj: &Trajectory, end: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("context length must be at least 1"));
        }
        if end >= traj.len() {
            return Err(Error::invalid(format!(
                "window end {end} outside trajectory of length {}",
                traj.len()
            )));
        }
        let first = end as i64 - k as i64 + 1;
        let mut w = ContextWindow {
            rtg: Vec::with_capacity(k),
            states: Vec::with_capacity(k),
            actions: Vec::with_capacity(k),
            rewards: Vec::with_capacity(k),
            timesteps: Vec::with_capacity(k),
            mask: Vec::with_capacity(k),
        };
        let lo = first.max(0) as usize;
        let regenerated = regenerate_window_rtg(&traj.rewards[lo..end], traj.anchor_rtg()[end]);
        for pos in first..=end as i64 {
            if pos < 0 {
                w.rtg.push(0.0);
                w.states.push(None);
                w.actions.push(None);
                w.rewards.push(0.0);
                w.timesteps.push(-1);
                w.mask.push(false);
            } else {
                let p = pos as usize;
                w.rtg.push(regenerated[p - lo]);
                w.states.push(Some(traj.states[p].clone()));
                w.actions.push(Some(traj.actions[p].clone()));
                w.rewards.push(traj.rewards[p]);
                w.timesteps.push(pos);
                w.mask.push(true);
            }
        }
        Ok(w)
    }
}

/// Draws the window end uniformly from `[0, T−1]` and returns the window.
pub fn sample_subsequence<R: Rng + ?Sized>(traj: &Trajectory, k: usize, rng: &mut R) -> Result<ContextWindow> {
    if k == 0 {
        return Err(Error::invalid("context length must be at least 1"));
    }
    if traj.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let end = rng.random_range(0..traj.len());
    ContextWindow::ending_at(traj, end, k)
}

/// `p(τ_i) = |τ_i| / Σ_j |τ_j|`.
pub fn trajectory_sampling_probs(buffer: &[Trajectory]) -> Result<Vec<f64>> {
    if buffer.is_empty() {
        return Err(Error::Empty("buffer"));
    }
    let lens: Vec<usize> = buffer.iter().map(Trajectory::len).collect();
    if lens.contains(&0) {
        return Err(Error::invalid("trajectory of length 0 in buffer"));
    }
    let total: usize = lens.iter().sum();
    Ok(lens.iter().map(|&l| l as f64 / total as f64).collect())
}

/// One row of a rating log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: i64,
}

/// Result of converting a rating log into trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct IngestedLog {
    /// One trajectory per user, users in sorted order.
    pub trajectories: Vec<Trajectory>,
    pub users: Vec<String>,
    /// Raw item ids; dense id `i` (1-based) is `items[i - 1]`.
    pub items: Vec<String>,
    pub window: usize,
}

impl IngestedLog {
    pub fn item_id(&self, raw: &str) -> Option<usize> {
        self.items.iter().position(|x| x == raw).map(|i| i + 1)
    }
}

/// Reward for one rating: 1 if strictly above 75% of the maximum.
pub fn click_reward(rating: f64, max_rating: f64) -> Result<f64> {
    if !(max_rating > 0.0) || !max_rating.is_finite() {
        return Err(Error::invalid(format!("max rating must be positive, got {max_rating}")));
    }
    if !(0.0..=max_rating).contains(&rating) {
        return Err(Error::RatingOutOfRange {
            rating,
            max: max_rating,
        });
    }
    Ok(if rating > 0.75 * max_rating { 1.0 } else { 0.0 })
}

/// Groups a rating log into per-user trajectories ordered by timestamp.
///
/// The state at step `t` is the window of the user's last `window` clicked
/// items before `t` (most recent first, 0-padded); the action is the item
/// rated at `t`. Items are mapped to dense ids in sorted raw-id order,
/// optionally against a fixed vocabulary (`items`), in which case unknown
/// items are an error.
pub fn ingest_ratings(log: &[Rating], max_rating: f64, window: usize, items: Option<&[String]>) -> Result<IngestedLog> {
    if window == 0 {
        return Err(Error::invalid("state window must be at least 1"));
    }
    let items: Vec<String> = match items {
        Some(v) => v.to_vec(),
        None => log
            .iter()
            .map(|r| r.item.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let dense: BTreeMap<&str, usize> = items.iter().enumerate().map(|(i, s)| (s.as_str(), i + 1)).collect();
    let mut by_user: BTreeMap<&str, Vec<&Rating>> = BTreeMap::new();
    for r in log {
        click_reward(r.rating, max_rating)?;
        by_user.entry(r.user.as_str()).or_default().push(r);
    }
    let mut trajectories = Vec::with_capacity(by_user.len());
    let mut users = Vec::with_capacity(by_user.len());
    for (user, mut rows) in by_user {
        rows.sort_by_key(|r| r.timestamp);
        let mut clicked: Vec<usize> = Vec::new();
        let (mut states, mut actions, mut rewards) = (vec![], vec![], vec![]);
        for r in rows {
            let id = *dense
                .get(r.item.as_str())
                .ok_or_else(|| Error::invalid(format!("unknown item `{}`", r.item)))?;
            let ids: Vec<usize> = (0..window)
                .map(|j| clicked.len().checked_sub(j + 1).map_or(0, |p| clicked[p]))
                .collect();
            let reward = click_reward(r.rating, max_rating)?;
            states.push(Token::Ids(ids));
            actions.push(Token::Id(id));
            rewards.push(reward);
            if reward > 0.0 {
                clicked.push(id);
            }
        }
        trajectories.push(Trajectory::new(states, actions, rewards)?);
        users.push(user.to_string());
    }
    Ok(IngestedLog {
        trajectories,
        users,
        items,
        window,
    })
}

/// Reads a `user,item,rating,timestamp` CSV file with a header row.
pub fn read_ratings_csv(path: &Path) -> Result<Vec<Rating>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e))?;
    reader
        .deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSpace {
    /// `slots` item ids per state drawn from `1..=n_items` (0 = empty).
    IdWindow {
        slots: usize,
        n_items: usize,
    },
    Vector(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub count: usize,
    pub action_space: ActionSpace,
    pub state_space: StateSpace,
    pub reward_range: (f64, f64),
    pub provenance: String,
}

impl DatasetManifest {
    pub fn new(
        trajs: &[Trajectory],
        action_space: ActionSpace,
        state_space: StateSpace,
        provenance: impl Into<String>,
    ) -> Self {
        let (lo, hi) = trajs
            .iter()
            .flat_map(|t| &t.rewards)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                (lo.min(r), hi.max(r))
            });
        let reward_range = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
        Self {
            format: MANIFEST_FORMAT.into(),
            version: DATASET_VERSION,
            count: trajs.len(),
            action_space,
            state_space,
            reward_range,
            provenance: provenance.into(),
        }
    }

    /// Infers the spaces from the tokens themselves.
    pub fn infer(trajs: &[Trajectory], provenance: impl Into<String>) -> Result<Self> {
        let mut max_id = 0;
        let mut slots = None;
        let mut state_dim = None;
        let mut action_dim = None;
        for t in trajs {
            for s in &t.states {
                match s {
                    Token::Id(i) => {
                        max_id = max_id.max(*i);
                        slots = Some(1);
                    }
                    Token::Ids(v) => {
                        max_id = max_id.max(v.iter().copied().max().unwrap_or(0));
                        slots = Some(v.len());
                    }
                    Token::Vector(v) => state_dim = Some(v.len()),
                }
            }
            for a in &t.actions {
                match a {
                    Token::Id(i) => max_id = max_id.max(*i),
                    Token::Ids(_) => return Err(Error::invalid("actions must be single ids or vectors")),
                    Token::Vector(v) => action_dim = Some(v.len()),
                }
            }
        }
        let action_space = match action_dim {
            Some(d) => ActionSpace::Continuous(d),
            None => ActionSpace::Discrete(max_id),
        };
        let state_space = match (state_dim, slots) {
            (Some(d), _) => StateSpace::Vector(d),
            (None, Some(s)) => StateSpace::IdWindow {
                slots: s,
                n_items: max_id,
            },
            (None, None) => StateSpace::Vector(0),
        };
        Ok(Self::new(trajs, action_space, state_space, provenance))
    }
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    count: usize,
}

/// Writes one JSON header line followed by one trajectory per line, plus a
/// manifest next to the file.
pub fn save_dataset(path: &Path, trajs: &[Trajectory], manifest: &DatasetManifest) -> Result<()> {
    for (i, t) in trajs.iter().enumerate() {
        t.validate(i)?;
    }
    if manifest.count != trajs.len() {
        return Err(Error::invalid(format!(
            "manifest count {} does not match {} trajectories",
            manifest.count,
            trajs.len()
        )));
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        count: trajs.len(),
    };
    let enc = |e: serde_json::Error| Error::format(path, e);
    writeln!(out, "{}", serde_json::to_string(&header).map_err(enc)?)?;
    for t in trajs {
        writeln!(out, "{}", serde_json::to_string(t).map_err(enc)?)?;
    }
    out.flush()?;
    fs::write(
        manifest_path(path),
        serde_json::to_string_pretty(manifest).map_err(enc)? + "\n",
    )?;
    Ok(())
}

#[derive(Deserialize)]
struct StoredTrajectory {
    states: Vec<Token>,
    actions: Vec<Token>,
    rewards: Vec<f64>,
    #[serde(default)]
    rtg: Option<Vec<f64>>,
    #[serde(default)]
    rtg_relabel: Option<Vec<f64>>,
}

pub fn load_dataset(path: &Path) -> Result<Vec<Trajectory>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format(path, "missing header line"))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| Error::format(path, format!("header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(Error::format(path, format!("unexpected format `{}`", header.format)));
    }
    if header.version != DATASET_VERSION {
        return Err(Error::Version {
            what: "dataset",
            found: header.version,
            expected: DATASET_VERSION,
        });
    }
    let mut trajs = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let index = trajs.len();
        let stored: StoredTrajectory = serde_json::from_str(&line).map_err(|e| Error::Trajectory {
            index,
            detail: e.to_string(),
        })?;
        let rtg = stored.rtg.unwrap_or_else(|| reward_to_go(&stored.rewards));
        let t = Trajectory {
            states: stored.states,
            actions: stored.actions,
            rewards: stored.rewards,
            rtg,
            rtg_relabel: stored.rtg_relabel,
        };
        t.validate(index)?;
        trajs.push(t);
    }
    if trajs.len() != header.count {
        return Err(Error::format(
            path,
            format!("header count {} but {} trajectories", header.count, trajs.len()),
        ));
    }
    Ok(trajs)
}

pub fn load_manifest(dataset: &Path) -> Result<DatasetManifest> {
    let p = manifest_path(dataset);
    let text = fs::read_to_string(&p)?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(&p, e))?;
    if m.version != DATASET_VERSION {
        return Err(Error::Version {
            what: "manifest",
            found: m.version,
            expected: DATASET_VERSION,
        });
    }
    Ok(m)
}

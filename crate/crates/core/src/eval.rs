//! Episodic evaluation, stitch rate and top-k ranking metrics.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{play_episode, Agent};
use crate::envsim::{item_path, ItemGraph};
use crate::error::{Error, Result};
use crate::features::Encoder;
use crate::policy::{gaussian_nll, PolicyNet};
use crate::relabel::regenerate_window_rtg;
use crate::trajectory::{ContextWindow, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub path: Vec<String>,
    #[serde(rename = "return")]
    pub ret: f64,
    /// Ended at a positive-reward terminal via a path absent from the data.
    pub stitched: bool,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub stitch_rate: f64,
    pub traces: Vec<EpisodeTrace>,
}

impl EvalReport {
    /// Fraction of episodes with return at least `threshold`.
    pub fn success_rate(&self, threshold: f64) -> f64 {
        let hits = self.traces.iter().filter(|t| t.ret >= threshold).count();
        hits as f64 / self.episodes as f64
    }
}

/// Item paths present in a stitch-world dataset.
pub fn known_paths(data: &[Trajectory]) -> BTreeSet<Vec<usize>> {
    data.iter().filter_map(item_path).collect()
}

/// Runs `episodes` episodes of `agent`.
pub fn evaluate_policy<A: Agent + ?Sized>(
    graph: &ItemGraph,
    agent: &mut A,
    episodes: usize,
    known: &BTreeSet<Vec<usize>>,
    seed: u64,
    step_cap: usize,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::invalid("episodes must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut traces = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let ep = play_episode(graph, agent, step_cap, &mut rng)?;
        let end = *ep.path.last().expect("path holds the start item");
        let positive = graph.terminal_reward(end).is_some_and(|r| r > 0.0);
        traces.push(EpisodeTrace {
            path: graph.path_names(&ep.path),
            ret: ep.total_return(),
            stitched: positive && !ep.truncated && !known.contains(&ep.path),
            truncated: ep.truncated,
        });
    }
    let n = episodes as f64;
    let mean = traces.iter().map(|t| t.ret).sum::<f64>() / n;
    let var = traces.iter().map(|t| (t.ret - mean).powi(2)).sum::<f64>() / n;
    let stitched = traces.iter().filter(|t| t.stitched).count();
    Ok(EvalReport {
        episodes,
        mean_return: mean,
        std_return: var.sqrt(),
        stitch_rate: stitched as f64 / n,
        traces,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub recall: f64,
    pub precision: f64,
    pub ndcg: f64,
}

/// Binary-relevance recall, precision and nDCG of the first `k` entries of
/// `ranked`.
pub fn topk_metrics(ranked: &[usize], relevant: &BTreeSet<usize>, k: usize) -> Result<TopK> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if relevant.is_empty() {
        return Err(Error::Empty("relevant set"));
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (i, item) in ranked.iter().take(k).enumerate() {
        if relevant.contains(item) {
            hits += 1;
            dcg += 1.0 / (i as f64 + 2.0).log2();
        }
    }
    let ideal: f64 = (0..relevant.len().min(k)).map(|i| 1.0 / (i as f64 + 2.0).log2()).sum();
    Ok(TopK {
        recall: hits as f64 / relevant.len() as f64,
        precision: hits as f64 / k as f64,
        ndcg: dcg / ideal,
    })
}

/// Candidates ordered by the predicted log-density of their embedding,
/// highest first; ties go to the smaller id.
pub fn rank_items(mean: &[f64], log_var: &[f64], enc: &Encoder) -> Result<Vec<usize>> {
    let mut scored = Vec::with_capacity(enc.n_items());
    for id in 1..=enc.n_items() {
        scored.push((id, -gaussian_nll(mean, log_var, enc.item(id)?)));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|s| s.0).collect())
}

/// Averages [`topk_metrics`] over every step of `heldout` that still has a
/// rewarded item ahead of it; those items are the relevant set. With `g`,
/// the window's last RTG is replaced by `g`.
pub fn rank_metrics(net: &PolicyNet, enc: &Encoder, heldout: &[Trajectory], k: usize, g: Option<f64>) -> Result<TopK> {
    let mut total = TopK::default();
    let mut states = 0usize;
    for traj in heldout {
        for t in 0..traj.len() {
            let relevant: BTreeSet<usize> = (t..traj.len())
                .filter(|&i| traj.rewards[i] > 0.0)
                .filter_map(|i| traj.actions[i].state_id())
                .collect();
            if relevant.is_empty() {
                continue;
            }
            let mut w = ContextWindow::ending_at(traj, t, net.cfg.k)?;
            if let Some(g) = g {
                reanchor(&mut w, g);
            }
            let (mean, log_var) = net.predict(&w, enc)?;
            let m = topk_metrics(&rank_items(&mean, &log_var, enc)?, &relevant, k)?;
            total.recall += m.recall;
            total.precision += m.precision;
            total.ndcg += m.ndcg;
            states += 1;
        }
    }
    if states == 0 {
        return Err(Error::Empty("held-out interactions"));
    }
    let n = states as f64;
    Ok(TopK {
        recall: total.recall / n,
        precision: total.precision / n,
        ndcg: total.ndcg / n,
    })
}

fn reanchor(w: &mut ContextWindow, g: f64) {
    let first = w.mask.iter().position(|&m| m).unwrap_or(w.k() - 1);
    let last = w.k() - 1;
    let rtg = regenerate_window_rtg(&w.rewards[first..last], g);
    w.rtg[first..].copy_from_slice(&rtg);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn perfect_first_place() {
        let m = topk_metrics(&[3, 1, 2], &set(&[3]), 1).unwrap();
        assert_eq!(
            m,
            TopK {
                recall: 1.0,
                precision: 1.0,
                ndcg: 1.0
            }
        );
    }

    #[test]
    fn second_place_ndcg() {
        let m = topk_metrics(&[1, 3, 2], &set(&[3]), 2).unwrap();
        assert!((m.ndcg - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert_eq!(m.precision, 0.5);
    }

    #[test]
    fn miss_is_zero() {
        let m = topk_metrics(&[1, 2, 3], &set(&[3]), 2).unwrap();
        assert_eq!(m, TopK::default());
    }

    #[test]
    fn empty_relevant_is_an_error() {
        assert!(topk_metrics(&[1], &set(&[]), 1).is_err());
    }
}

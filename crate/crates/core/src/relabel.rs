//! Value-guided RTG relabeling.
//!
//! Whole-trajectory pass: `R_t = r_t + max(R_{t+1}, V̂(s_{t+1}))` backward,
//! with `R_T = 0` and `V̂(s_T) = 0` past the end. Per-window pass: the last
//! RTG of a sampled window is kept and earlier entries are rebuilt from the
//! window's rewards so that `R̂_{t'} = r_{t'} + R̂_{t'+1}` holds exactly.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qlearn::QTable;
use crate::trajectory::{Token, Trajectory};

/// Relabeled RTG for one trajectory. `value` is queried for `s_1..s_{T-1}`
/// (0-based); the original `rtg` is not touched.
pub fn relabel_rtg<F>(traj: &Trajectory, mut value: F) -> Result<Vec<f64>>
where
    F: FnMut(&Token) -> f64,
{
    let n = traj.len();
    let mut out = vec![0.0; n];
    let mut next_r: f64 = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n {
            let v = value(&traj.states[t + 1]);
            if !v.is_finite() {
                return Err(Error::NonFinite("state value"));
            }
            v
        } else {
            0.0
        };
        out[t] = traj.rewards[t] + next_r.max(next_v);
        next_r = out[t];
    }
    Ok(out)
}

/// RTG for a window: `rewards` are `r_{t-K+1} .. r_{t-1}` and `anchor` is
/// `R_t`. Returns `K` entries ending with `anchor`.
pub fn regenerate_window_rtg(rewards: &[f64], anchor: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len() + 1];
    out[rewards.len()] = anchor;
    for i in (0..rewards.len()).rev() {
        out[i] = rewards[i] + out[i + 1];
    }
    out
}

/// Audit record for one relabeled trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelabelRecord {
    pub index: usize,
    /// Positions where the successor's value beat the propagated RTG.
    pub raised: usize,
    pub max_uplift: f64,
    pub original: Vec<f64>,
    pub relabeled: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelabelReport {
    pub records: Vec<RelabelRecord>,
}

impl RelabelReport {
    pub fn trajectories_raised(&self) -> usize {
        self.records.iter().filter(|r| r.raised > 0).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::format(path, e))?;
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// V̂ read from a Q-table: greedy over logged actions, 0 for unseen or
/// non-discrete states.
pub fn table_value(q: &QTable) -> impl Fn(&Token) -> f64 + '_ {
    move |s| s.state_id().map_or(0.0, |id| q.v(id))
}

/// Sets `rtg_relabel` on every trajectory.
pub fn relabel_dataset<F>(data: &mut [Trajectory], value: F) -> Result<RelabelReport>
where
    F: Fn(&Token) -> f64,
{
    let mut report = RelabelReport::default();
    for (index, t) in data.iter_mut().enumerate() {
        let relabeled = relabel_rtg(t, &value)?;
        let mut raised = 0;
        let n = t.len();
        for i in 0..n {
            let carried = if i + 1 < n { relabeled[i + 1] } else { 0.0 };
            if i + 1 < n && value(&t.states[i + 1]) > carried {
                raised += 1;
            }
        }
        let max_uplift = relabeled.iter().zip(&t.rtg).map(|(a, b)| a - b).fold(0.0, f64::max);
        report.records.push(RelabelRecord {
            index,
            raised,
            max_uplift,
            original: t.rtg.clone(),
            relabeled: relabeled.clone(),
        });
        t.rtg_relabel = Some(relabeled);
    }
    Ok(report)
}

/// Drops every relabel.
pub fn clear_relabels(data: &mut [Trajectory]) {
    for t in data {
        t.rtg_relabel = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(rewards: Vec<f64>) -> Trajectory {
        let n = rewards.len();
        Trajectory::new(
            (0..n).map(|i| Token::Id(i + 1)).collect(),
            (0..n).map(|i| Token::Id(i + 2)).collect(),
            rewards,
        )
        .unwrap()
    }

    #[test]
    fn zero_value_is_plain_rtg() {
        let t = traj(vec![0.0, 0.0, 1.0]);
        assert_eq!(relabel_rtg(&t, |_| 0.0).unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn value_at_second_state_lifts_first() {
        // states are ids 1, 2, 3; V̂(2) = 5
        let t = traj(vec![0.0, 0.0, 0.0]);
        let r = relabel_rtg(&t, |s| if *s == Token::Id(2) { 5.0 } else { 0.0 }).unwrap();
        assert_eq!(r, vec![5.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let t = traj(vec![0.0, 0.0]);
        assert!(relabel_rtg(&t, |_| f64::NAN).is_err());
    }

    #[test]
    fn window_regeneration() {
        assert_eq!(regenerate_window_rtg(&[1.0, 2.0], 5.0), vec![8.0, 7.0, 5.0]);
        assert_eq!(regenerate_window_rtg(&[], 4.0), vec![4.0]);
        assert_eq!(regenerate_window_rtg(&[0.0, 0.0], 0.0), vec![0.0; 3]);
    }

    #[test]
    fn dataset_relabel_is_idempotent() {
        let mut d = vec![traj(vec![0.0, 1.0]), traj(vec![0.0, 0.0, 0.0])];
        let v = |s: &Token| if *s == Token::Id(2) { 3.0 } else { 0.0 };
        relabel_dataset(&mut d, v).unwrap();
        let first: Vec<_> = d.iter().map(|t| t.rtg_relabel.clone()).collect();
        let report = relabel_dataset(&mut d, v).unwrap();
        let second: Vec<_> = d.iter().map(|t| t.rtg_relabel.clone()).collect();
        assert_eq!(first, second);
        assert_eq!(report.records[1].raised, 1);
        assert_eq!(report.records[1].max_uplift, 3.0);
        assert_eq!(report.records[0].max_uplift, 2.0);
    }
}

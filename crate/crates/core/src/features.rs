//! Fixed featurization of tokens into the vectors the policy consumes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{ActionSpace, DatasetManifest, StateSpace, Token};

/// Id windows over at most this many items are one-hot encoded per slot;
/// larger vocabularies reuse the item embeddings.
const ONE_HOT_LIMIT: usize = 64;

/// Maps states and actions to vectors. Discrete items get a fixed embedding
/// of width `d_a`: one-hot when the catalogue fits, otherwise a seeded
/// random unit vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub state_space: StateSpace,
    pub action_space: ActionSpace,
    /// Row `i - 1` embeds item `i`; empty for continuous actions.
    pub items: Vec<Vec<f64>>,
    action_dim: usize,
}

impl Encoder {
    pub fn new(state_space: StateSpace, action_space: ActionSpace, d_a: usize, seed: u64) -> Result<Self> {
        let (items, action_dim) = match action_space {
            ActionSpace::Discrete(n) => {
                if d_a == 0 {
                    return Err(Error::invalid("action embedding width must be at least 1"));
                }
                (item_table(n, d_a, seed), d_a)
            }
            ActionSpace::Continuous(d) => (Vec::new(), d),
        };
        if let (StateSpace::IdWindow { n_items, .. }, ActionSpace::Continuous(_)) = (&state_space, &action_space) {
            if *n_items > ONE_HOT_LIMIT {
                return Err(Error::invalid("large id-window states need discrete item embeddings"));
            }
        }
        Ok(Self {
            state_space,
            action_space,
            items,
            action_dim,
        })
    }

    pub fn for_manifest(m: &DatasetManifest, d_a: usize, seed: u64) -> Result<Self> {
        let mut state = m.state_space.clone();
        // Item ids seen as actions must be representable as states too.
        if let (StateSpace::IdWindow { n_items, .. }, ActionSpace::Discrete(n)) = (&mut state, &m.action_space) {
            *n_items = (*n_items).max(*n);
        }
        Self::new(state, m.action_space.clone(), d_a, seed)
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state_dim(&self) -> usize {
        match self.state_space {
            StateSpace::IdWindow { slots, n_items } => {
                if n_items <= ONE_HOT_LIMIT {
                    slots * n_items
                } else {
                    slots * self.action_dim
                }
            }
            StateSpace::Vector(d) => d,
        }
    }

    pub fn item(&self, id: usize) -> Result<&[f64]> {
        if id == 0 || id > self.items.len() {
            return Err(Error::invalid(format!("item id {id} outside 1..={}", self.items.len())));
        }
        Ok(&self.items[id - 1])
    }

    /// `None` (padding) encodes as zeros.
    pub fn encode_state(&self, s: Option<&Token>, out: &mut Vec<f64>) -> Result<()> {
        let start = out.len();
        out.resize(start + self.state_dim(), 0.0);
        let Some(s) = s else { return Ok(()) };
        let dst = &mut out[start..];
        match (&self.state_space, s) {
            (StateSpace::IdWindow { slots, n_items }, tok) => {
                let ids: &[usize] = match tok {
                    Token::Id(i) => std::slice::from_ref(i),
                    Token::Ids(v) => v,
                    Token::Vector(_) => return Err(Error::invalid("expected an id state, got a vector")),
                };
                if ids.len() > *slots {
                    return Err(Error::invalid(format!("state has {} ids, expected {slots}", ids.len())));
                }
                for (slot, &id) in ids.iter().enumerate() {
                    if id == 0 {
                        continue;
                    }
                    if id > *n_items {
                        return Err(Error::invalid(format!("state item {id} outside 1..={n_items}")));
                    }
                    if *n_items <= ONE_HOT_LIMIT {
                        dst[slot * n_items + id - 1] = 1.0;
                    } else {
                        let d = self.action_dim;
                        dst[slot * d..(slot + 1) * d].copy_from_slice(self.item(id)?);
                    }
                }
            }
            (StateSpace::Vector(d), Token::Vector(v)) if v.len() == *d => dst.copy_from_slice(v),
            (StateSpace::Vector(d), _) => {
                return Err(Error::invalid(format!("expected a state vector of length {d}")));
            }
        }
        Ok(())
    }

    pub fn encode_action(&self, a: Option<&Token>, out: &mut Vec<f64>) -> Result<()> {
        match a {
            None => out.resize(out.len() + self.action_dim, 0.0),
            Some(Token::Id(id)) if !self.items.is_empty() => out.extend_from_slice(self.item(*id)?),
            Some(Token::Vector(v)) if v.len() == self.action_dim => out.extend_from_slice(v),
            Some(other) => return Err(Error::invalid(format!("cannot encode action {other:?}"))),
        }
        Ok(())
    }
}

fn item_table(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    if n <= d {
        return (0..n)
            .map(|i| {
                let mut v = vec![0.0; d];
                v[i] = 1.0;
                v
            })
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

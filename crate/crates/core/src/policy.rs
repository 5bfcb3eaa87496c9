//! Causal transformer over (RTG, state, action) tokens with a
//! diagonal-Gaussian action head, and its entropy-constrained training step.
//!
//! Each timestep contributes three tokens in the order `g_t, s_t, a_t`. The
//! action distribution for step `t` is read from the output at `s_t`, so it
//! sees `g_1, s_1, a_1, …, g_t, s_t` but never `a_t` itself. Windows of a
//! batch are laid out back to back (`[B·3K, width]`) and attention is
//! block-diagonal over windows.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use numcore::{Adam, AdamConfig, ParamId, ParamStore, ScalarAdam, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Encoder;
use crate::trajectory::ContextWindow;

const CHECKPOINT_FORMAT: &str = "edtrec-policy";
const CHECKPOINT_VERSION: u32 = 1;

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub k: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ff_mult: usize,
    /// Timesteps beyond this share the last timestep embedding.
    pub max_timestep: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            k: 2,
            state_dim: 16,
            action_dim: 8,
            layers: 2,
            heads: 2,
            width: 32,
            ff_mult: 4,
            max_timestep: 64,
            sigma_min: 1e-2,
            sigma_max: 5.0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("k", self.k),
            ("action_dim", self.action_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("width", self.width),
            ("ff_mult", self.ff_mult),
            ("max_timestep", self.max_timestep),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }

    pub fn log_var_bounds(&self) -> (f64, f64) {
        (2.0 * self.sigma_min.ln(), 2.0 * self.sigma_max.ln())
    }

    /// Half the entropy of a unit-variance Gaussian in `action_dim`
    /// dimensions.
    pub fn default_beta(&self) -> f64 {
        0.5 * self.action_dim as f64 * 0.5 * (1.0 + LN_2PI)
    }
}

/// Encoded windows, flattened window-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub k: usize,
    pub rtg: Vec<f64>,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    /// Row of the timestep table: 0 for padding, `t + 1` otherwise.
    pub time: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn encode(windows: &[ContextWindow], enc: &Encoder, cfg: &PolicyConfig) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let k = cfg.k;
        let n = windows.len() * k;
        let mut b = Batch {
            size: windows.len(),
            k,
            rtg: Vec::with_capacity(n),
            states: Vec::with_capacity(n * cfg.state_dim),
            actions: Vec::with_capacity(n * cfg.action_dim),
            time: Vec::with_capacity(n),
            mask: Vec::with_capacity(n),
        };
        for w in windows {
            if w.k() != k {
                return Err(Error::invalid(format!(
                    "window has {} steps, policy expects {k}",
                    w.k()
                )));
            }
            for i in 0..k {
                b.rtg.push(w.rtg[i]);
                enc.encode_state(w.states[i].as_ref(), &mut b.states)?;
                enc.encode_action(w.actions[i].as_ref(), &mut b.actions)?;
                b.time.push(if w.timesteps[i] < 0 {
                    0
                } else {
                    (w.timesteps[i] as usize + 1).min(cfg.max_timestep)
                });
                b.mask.push(w.mask[i]);
            }
        }
        if b.states.len() != n * cfg.state_dim || b.actions.len() != n * cfg.action_dim {
            return Err(Error::invalid(format!(
                "encoder produces {}/{} features, policy expects {}/{}",
                enc.state_dim(),
                enc.action_dim(),
                cfg.state_dim,
                cfg.action_dim
            )));
        }
        Ok(b)
    }

    pub fn positions(&self) -> usize {
        self.size * self.k
    }

    pub fn actions_tensor(&self, d_a: usize) -> Result<Tensor> {
        Ok(Tensor::matrix(self.positions(), d_a, self.actions.clone())?)
    }
}

/// Per-position Gaussian parameters on a tape, `[positions, d_a]` each.
#[derive(Clone, Copy, Debug)]
pub struct ActionDists {
    pub mean: Var,
    pub log_var: Var,
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Ids {
    rtg: (ParamId, ParamId),
    state: (ParamId, ParamId),
    action: (ParamId, ParamId),
    time: ParamId,
    ln_in: (ParamId, ParamId),
    blocks: Vec<BlockIds>,
    ln_out: (ParamId, ParamId),
    mean: (ParamId, ParamId),
    log_var: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct PolicyNet {
    pub cfg: PolicyConfig,
    pub params: ParamStore,
    ids: Ids,
}

/// Every parameter name with its shape, in registration order.
fn layout(cfg: &PolicyConfig) -> Vec<(String, Vec<usize>)> {
    let w = cfg.width;
    let ff = w * cfg.ff_mult;
    let mut v: Vec<(String, Vec<usize>)> = vec![
        ("embed.rtg.w".into(), vec![1, w]),
        ("embed.rtg.b".into(), vec![w]),
        ("embed.state.w".into(), vec![cfg.state_dim, w]),
        ("embed.state.b".into(), vec![w]),
        ("embed.action.w".into(), vec![cfg.action_dim, w]),
        ("embed.action.b".into(), vec![w]),
        ("embed.time".into(), vec![cfg.max_timestep + 1, w]),
        ("embed.ln.g".into(), vec![w]),
        ("embed.ln.b".into(), vec![w]),
    ];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("block{l}.{s}");
        v.extend([
            (p("ln1.g"), vec![w]),
            (p("ln1.b"), vec![w]),
            (p("attn.q.w"), vec![w, w]),
            (p("attn.q.b"), vec![w]),
            (p("attn.k.w"), vec![w, w]),
            (p("attn.k.b"), vec![w]),
            (p("attn.v.w"), vec![w, w]),
            (p("attn.v.b"), vec![w]),
            (p("attn.o.w"), vec![w, w]),
            (p("attn.o.b"), vec![w]),
            (p("ln2.g"), vec![w]),
            (p("ln2.b"), vec![w]),
            (p("ff.w1"), vec![w, ff]),
            (p("ff.b1"), vec![ff]),
            (p("ff.w2"), vec![ff, w]),
            (p("ff.b2"), vec![w]),
        ]);
    }
    v.extend([
        ("out.ln.g".into(), vec![w]),
        ("out.ln.b".into(), vec![w]),
        ("head.mean.w".into(), vec![w, cfg.action_dim]),
        ("head.mean.b".into(), vec![cfg.action_dim]),
        ("head.log_var.w".into(), vec![w, cfg.action_dim]),
        ("head.log_var.b".into(), vec![cfg.action_dim]),
    ]);
    v
}

impl PolicyNet {
    pub fn new(cfg: PolicyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = cfg.log_var_bounds();
        // Raw head bias that maps to unit variance through the soft clamp.
        let unit_bias = (2.0 * (0.0 - lo) / (hi - lo) - 1.0).clamp(-0.999, 0.999).atanh();
        let residual = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let mut store = ParamStore::new();
        for (name, shape) in layout(&cfg) {
            let t = if name.ends_with(".g") {
                Tensor::full(&shape, 1.0)
            } else if name == "head.log_var.b" {
                Tensor::full(&shape, unit_bias)
            } else if name == "head.log_var.w" {
                Tensor::uniform(&shape, 1e-3, &mut rng)
            } else if name == "embed.time" {
                Tensor::uniform(&shape, 0.1, &mut rng)
            } else if shape.len() == 2 {
                let mut scale = 1.0 / (shape[0] as f64).sqrt();
                if name.ends_with("attn.o.w") || name.ends_with("ff.w2") {
                    scale *= residual;
                }
                Tensor::uniform(&shape, scale, &mut rng)
            } else {
                Tensor::zeros(&shape)
            };
            store.add(name, t);
        }
        Self::from_params(cfg, store)
    }

    /// Wraps an existing parameter set, checking names and shapes.
    pub fn from_params(cfg: PolicyConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let expected = layout(&cfg);
        if params.len() != expected.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} parameters, architecture needs {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            let got = params.get(params.id(name)?).shape();
            if got != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter `{name}` has shape {got:?}, expected {shape:?}"
                )));
            }
        }
        let id = |n: &str| params.id(n);
        let pair = |n: &str| -> Result<(ParamId, ParamId)> {
            let (w, b) = if n.ends_with("ln") || n.contains(".ln") {
                (format!("{n}.g"), format!("{n}.b"))
            } else {
                (format!("{n}.w"), format!("{n}.b"))
            };
            Ok((params.id(&w)?, params.id(&b)?))
        };
        let blocks = (0..cfg.layers)
            .map(|l| -> Result<BlockIds> {
                let p = |s: &str| format!("block{l}.{s}");
                Ok(BlockIds {
                    ln1: (id(&p("ln1.g"))?, id(&p("ln1.b"))?),
                    q: pair(&p("attn.q"))?,
                    k: pair(&p("attn.k"))?,
                    v: pair(&p("attn.v"))?,
                    o: pair(&p("attn.o"))?,
                    ln2: (id(&p("ln2.g"))?, id(&p("ln2.b"))?),
                    ff1: (id(&p("ff.w1"))?, id(&p("ff.b1"))?),
                    ff2: (id(&p("ff.w2"))?, id(&p("ff.b2"))?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ids = Ids {
            rtg: pair("embed.rtg")?,
            state: pair("embed.state")?,
            action: pair("embed.action")?,
            time: id("embed.time")?,
            ln_in: pair("embed.ln")?,
            blocks,
            ln_out: pair("out.ln")?,
            mean: pair("head.mean")?,
            log_var: pair("head.log_var")?,
        };
        Ok(Self { cfg, params, ids })
    }

    /// Forward pass with the network's own parameters.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<ActionDists> {
        self.forward_with(&self.params, tape, batch)
    }

    /// Forward pass reading parameters from `store` (same layout as
    /// `self.params`); used for finite-difference checks.
    pub fn forward_with(&self, store: &ParamStore, tape: &mut Tape, batch: &Batch) -> Result<ActionDists> {
        let cfg = &self.cfg;
        let ids = &self.ids;
        let (b, k) = (batch.size, batch.k);
        if k != cfg.k {
            return Err(Error::invalid(format!("batch context {k} != policy context {}", cfg.k)));
        }
        let n = b * k;
        let w = cfg.width;

        let linear = |tape: &mut Tape, x: Var, (wi, bi): (ParamId, ParamId)| -> Result<Var> {
            let wv = tape.param(store, wi)?;
            let bv = tape.param(store, bi)?;
            let y = tape.matmul(x, wv)?;
            Ok(tape.add_bias(y, bv)?)
        };
        let norm = |tape: &mut Tape, x: Var, (gi, bi): (ParamId, ParamId)| -> Result<Var> {
            let g = tape.param(store, gi)?;
            let bb = tape.param(store, bi)?;
            Ok(tape.layer_norm(x, g, bb)?)
        };

        let rtg = tape.constant(Tensor::matrix(n, 1, batch.rtg.clone())?)?;
        let states = tape.constant(Tensor::matrix(n, cfg.state_dim, batch.states.clone())?)?;
        let actions = tape.constant(Tensor::matrix(n, cfg.action_dim, batch.actions.clone())?)?;
        let time_table = tape.param(store, ids.time)?;
        let time = tape.gather_rows(time_table, &batch.time)?;

        let g_tok = linear(tape, rtg, ids.rtg)?;
        let g_tok = tape.add(g_tok, time)?;
        let s_tok = linear(tape, states, ids.state)?;
        let s_tok = tape.add(s_tok, time)?;
        let a_tok = linear(tape, actions, ids.action)?;
        let a_tok = tape.add(a_tok, time)?;
        // Interleave the three blocks into per-window g, s, a order.
        let stacked = tape.concat_rows(&[g_tok, s_tok, a_tok])?;
        let order: Vec<usize> = (0..b)
            .flat_map(|i| (0..k).flat_map(move |t| (0..3).map(move |j| j * n + i * k + t)))
            .collect();
        let x = tape.gather_rows(stacked, &order)?;
        let mut x = norm(tape, x, ids.ln_in)?;

        let mask = attention_mask(&batch.mask, b, k);
        let dh = w / cfg.heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for blk in &ids.blocks {
            let h = norm(tape, x, blk.ln1)?;
            let q = linear(tape, h, blk.q)?;
            let kk = linear(tape, h, blk.k)?;
            let v = linear(tape, h, blk.v)?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(kk, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let scores = tape.group_matmul(qh, kh, b, true)?;
                let scores = tape.scale(scores, inv_sqrt)?;
                let att = tape.masked_softmax(scores, &mask)?;
                heads.push(tape.group_matmul(att, vh, b, false)?);
            }
            let cat = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)?
            };
            let o = linear(tape, cat, blk.o)?;
            x = tape.add(x, o)?;

            let h = norm(tape, x, blk.ln2)?;
            let f = linear(tape, h, blk.ff1)?;
            let f = gelu(tape, f)?;
            let f = linear(tape, f, blk.ff2)?;
            x = tape.add(x, f)?;
        }
        let x = norm(tape, x, ids.ln_out)?;
        let state_rows: Vec<usize> = (0..n).map(|p| 3 * p + 1).collect();
        let hs = tape.gather_rows(x, &state_rows)?;
        let mean = linear(tape, hs, ids.mean)?;
        let raw = linear(tape, hs, ids.log_var)?;
        // Soft clamp into [lo, hi].
        let (lo, hi) = cfg.log_var_bounds();
        let squashed = tape.tanh(raw)?;
        let scaled = tape.scale(squashed, 0.5 * (hi - lo))?;
        let log_var = tape.add_scalar(scaled, 0.5 * (hi + lo))?;
        Ok(ActionDists { mean, log_var })
    }

    /// Mean and log-variance predicted at the last position of `window`.
    pub fn predict(&self, window: &ContextWindow, enc: &Encoder) -> Result<(Vec<f64>, Vec<f64>)> {
        let batch = Batch::encode(std::slice::from_ref(window), enc, &self.cfg)?;
        let mut tape = Tape::new();
        let d = self.forward(&mut tape, &batch)?;
        let last = batch.k - 1;
        Ok((
            tape.value(d.mean).row(last).to_vec(),
            tape.value(d.log_var).row(last).to_vec(),
        ))
    }
}

/// Tanh approximation of GELU, built from tape primitives.
fn gelu(tape: &mut Tape, x: Var) -> Result<Var> {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
    let x2 = tape.mul(x, x)?;
    let x3 = tape.mul(x2, x)?;
    let cubic = tape.scale(x3, 0.044_715)?;
    let inner = tape.add(x, cubic)?;
    let inner = tape.scale(inner, C)?;
    let t = tape.tanh(inner)?;
    let t = tape.add_scalar(t, 1.0)?;
    let y = tape.mul(x, t)?;
    Ok(tape.scale(y, 0.5)?)
}

/// `[B·3K, 3K]` attention mask. Token `i` may attend to token `j` of the same
/// window iff `j ≤ i` and `j` is a real (unpadded) token, or `j == i`.
pub fn attention_mask(step_mask: &[bool], b: usize, k: usize) -> Vec<bool> {
    let t = 3 * k;
    let mut m = vec![false; b * t * t];
    for w in 0..b {
        for i in 0..t {
            for j in 0..=i {
                m[(w * t + i) * t + j] = j == i || step_mask[w * k + j / 3];
            }
        }
    }
    m
}

/// Per-position weight `1/n_real` (0 for padding) broadcast over `d_a`.
fn position_weights(mask: &[bool], d_a: usize, scale: f64) -> Result<Tensor> {
    let real = mask.iter().filter(|m| **m).count();
    if real == 0 {
        return Err(Error::invalid("batch has no unpadded positions"));
    }
    let data = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { scale / real as f64 } else { 0.0 }, d_a))
        .collect();
    Ok(Tensor::matrix(mask.len(), d_a, data)?)
}

/// Mean over unpadded positions of the diagonal-Gaussian negative log
/// density of `actions`.
pub fn nll_loss(tape: &mut Tape, d: ActionDists, actions: &Tensor, mask: &[bool]) -> Result<Var> {
    let d_a = tape.value(d.mean).cols();
    let a = tape.constant(actions.clone())?;
    let diff = tape.sub(a, d.mean)?;
    let sq = tape.mul(diff, diff)?;
    let neg = tape.scale(d.log_var, -1.0)?;
    let prec = tape.exp(neg)?;
    let maha = tape.mul(sq, prec)?;
    let per = tape.add(maha, d.log_var)?;
    let per = tape.add_scalar(per, LN_2PI)?;
    let w = tape.constant(position_weights(mask, d_a, 0.5)?)?;
    let weighted = tape.mul(per, w)?;
    Ok(tape.sum(weighted)?)
}

/// Mean over unpadded positions of `½ Σ_d (1 + ln 2π + log σ²_d)`.
pub fn policy_entropy(tape: &mut Tape, d: ActionDists, mask: &[bool]) -> Result<Var> {
    let d_a = tape.value(d.log_var).cols();
    let per = tape.add_scalar(d.log_var, 1.0 + LN_2PI)?;
    let w = tape.constant(position_weights(mask, d_a, 0.5)?)?;
    let weighted = tape.mul(per, w)?;
    Ok(tape.sum(weighted)?)
}

/// Direct evaluation of `−log N(a; μ, diag σ²)`.
pub fn gaussian_nll(mean: &[f64], log_var: &[f64], a: &[f64]) -> f64 {
    mean.iter()
        .zip(log_var)
        .zip(a)
        .map(|((m, lv), x)| 0.5 * ((x - m).powi(2) / lv.exp() + lv + LN_2PI))
        .sum()
}

pub fn gaussian_entropy(log_var: &[f64]) -> f64 {
    log_var.iter().map(|lv| 0.5 * (1.0 + (2.0 * PI).ln() + lv)).sum()
}

/// Lagrangian `J(θ) − λ H(θ)` and its parts, on `tape`.
pub struct Objective {
    pub loss: Var,
    pub nll: Var,
    pub entropy: Var,
}

pub fn objective(
    net: &PolicyNet,
    store: &ParamStore,
    tape: &mut Tape,
    batch: &Batch,
    lambda: f64,
) -> Result<Objective> {
    let d = net.forward_with(store, tape, batch)?;
    let actions = batch.actions_tensor(net.cfg.action_dim)?;
    let nll = nll_loss(tape, d, &actions, &batch.mask)?;
    let entropy = policy_entropy(tape, d, &batch.mask)?;
    let scaled = tape.scale(entropy, lambda)?;
    let loss = tape.sub(nll, scaled)?;
    Ok(Objective { loss, nll, entropy })
}

/// λ = exp(ω) with ω trained by Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualVariable {
    pub omega: f64,
    pub opt: ScalarAdam,
}

impl DualVariable {
    pub fn new(lambda: f64, lr: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("initial lambda must be > 0, got {lambda}")));
        }
        Ok(Self {
            omega: lambda.ln(),
            opt: ScalarAdam::new(AdamConfig::with_lr(lr)),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.omega.exp()
    }

    /// d/dω of `exp(ω)·(H − β)`.
    pub fn grad(&self, entropy: f64, beta: f64) -> f64 {
        self.lambda() * (entropy - beta)
    }

    /// One Adam step on `exp(ω)·(H − β)`.
    pub fn step(&mut self, entropy: f64, beta: f64) -> Result<()> {
        let grad = self.grad(entropy, beta);
        if !grad.is_finite() {
            return Err(Error::NonFinite("dual gradient"));
        }
        self.omega = self.opt.step(self.omega, grad)?;
        if !self.lambda().is_finite() {
            return Err(Error::NonFinite("lambda"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// λ adapted by the dual step.
    Dual,
    /// λ held at a constant; `Fixed(0.0)` disables the entropy term.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub lr: f64,
    pub grad_clip: f64,
    pub beta: f64,
    pub entropy: EntropyMode,
    pub dual_init: f64,
    pub dual_lr: f64,
}

impl LearnerConfig {
    pub fn for_policy(cfg: &PolicyConfig) -> Self {
        Self {
            lr: 1e-3,
            grad_clip: 1.0,
            beta: cfg.default_beta(),
            entropy: EntropyMode::Dual,
            dual_init: 0.1,
            dual_lr: 1e-2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub nll: f64,
    pub entropy: f64,
    /// λ used for the θ step.
    pub lambda: f64,
}

/// Policy plus optimizer and dual state.
#[derive(Clone, Debug)]
pub struct Learner {
    pub net: PolicyNet,
    pub adam: Adam,
    pub dual: DualVariable,
    pub cfg: LearnerConfig,
}

impl Learner {
    pub fn new(net: PolicyNet, cfg: LearnerConfig) -> Result<Self> {
        let adam = Adam::new(AdamConfig::with_lr(cfg.lr), &net.params);
        let dual = DualVariable::new(cfg.dual_init, cfg.dual_lr)?;
        Ok(Self { net, adam, dual, cfg })
    }

    pub fn lambda(&self) -> f64 {
        match self.cfg.entropy {
            EntropyMode::Dual => self.dual.lambda(),
            EntropyMode::Fixed(l) => l,
        }
    }

    /// One θ step on `J − λH` (λ constant), then one ω step on
    /// `λ(H − β)` using the entropy measured before the θ step.
    pub fn lagrangian_step(&mut self, batch: &Batch) -> Result<StepStats> {
        if !self.cfg.beta.is_finite() {
            return Err(Error::NonFinite("beta"));
        }
        let lambda = self.lambda();
        let mut tape = Tape::new();
        let obj = objective(&self.net, &self.net.params, &mut tape, batch, lambda)?;
        let (loss, mut grads) = tape.forward_backward(obj.loss, &self.net.params)?;
        let stats = StepStats {
            loss,
            nll: tape.scalar(obj.nll)?,
            entropy: tape.scalar(obj.entropy)?,
            lambda,
        };
        if self.cfg.grad_clip > 0.0 {
            grads.clip_global_norm(self.cfg.grad_clip);
        }
        self.adam.step(&mut self.net.params, &grads)?;
        if self.cfg.entropy == EntropyMode::Dual {
            self.dual.step(stats.entropy, self.cfg.beta)?;
        }
        Ok(stats)
    }

    /// NLL of `batch` under the current parameters, without updating.
    pub fn eval_nll(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let obj = objective(&self.net, &self.net.params, &mut tape, batch, 0.0)?;
        Ok(tape.scalar(obj.nll)?)
    }
}

/// Random batch for `cfg`; the first window starts with one padded step
/// when `k > 1`.
pub fn random_batch<R: Rng + ?Sized>(cfg: &PolicyConfig, size: usize, rng: &mut R) -> Batch {
    let n = size * cfg.k;
    let mut normal = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut *rng)).collect() };
    let rtg = normal(n);
    let states = normal(n * cfg.state_dim);
    let actions = normal(n * cfg.action_dim);
    let mut mask = vec![true; n];
    if cfg.k > 1 {
        mask[0] = false;
    }
    let time = (0..n)
        .map(|i| {
            if mask[i] {
                (i % cfg.k + 1).min(cfg.max_timestep)
            } else {
                0
            }
        })
        .collect();
    Batch {
        size,
        k: cfg.k,
        rtg,
        states,
        actions,
        time,
        mask,
    }
}

/// Finite-difference check of the whole objective `J − λH` for a freshly
/// initialized `cfg` network. With `per_param`, only that many random
/// entries of each parameter tensor are perturbed.
pub fn objective_gradcheck(
    cfg: &PolicyConfig,
    seed: u64,
    lambda: f64,
    per_param: Option<usize>,
) -> Result<numcore::gradcheck::GradCheckReport> {
    let net = PolicyNet::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let batch = random_batch(cfg, 2, &mut rng);
    let loss = |store: &ParamStore, tape: &mut Tape| {
        objective(&net, store, tape, &batch, lambda)
            .map(|o| o.loss)
            .map_err(|e| match e {
                Error::Num(n) => n,
                other => numcore::NumError::Domain {
                    op: "policy objective",
                    detail: other.to_string(),
                },
            })
    };
    Ok(match per_param {
        Some(n) => numcore::gradcheck::check_sampled(&net.params, n, seed, loss)?,
        None => numcore::gradcheck::check(&net.params, loss)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Stochastic,
    Mean,
}

pub fn sample_action<R: Rng + ?Sized>(mean: &[f64], log_var: &[f64], mode: SampleMode, rng: &mut R) -> Vec<f64> {
    match mode {
        SampleMode::Mean => mean.to_vec(),
        SampleMode::Stochastic => mean
            .iter()
            .zip(log_var)
            .map(|(m, lv)| {
                let z: f64 = StandardNormal.sample(rng);
                m + (0.5 * lv).exp() * z
            })
            .collect(),
    }
}

/// Nearest candidate (Euclidean) to `action`; ties go to the first.
pub fn decode_action(action: &[f64], candidates: &[(usize, &[f64])]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (id, e) in candidates {
        if e.len() != action.len() {
            return Err(Error::invalid("embedding width does not match action"));
        }
        let d: f64 = e.iter().zip(action).map(|(x, y)| (x - y).powi(2)).sum();
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((*id, d));
        }
    }
    best.map(|b| b.0).ok_or(Error::NoLegalActions("(no candidates)".into()))
}

/// Everything needed to resume acting or training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub policy: PolicyConfig,
    pub encoder: Encoder,
    pub learner: LearnerConfig,
    pub dual: DualVariable,
    pub params: serde_json::Value,
}

impl Checkpoint {
    pub fn from_learner(learner: &Learner, encoder: &Encoder) -> Result<Self> {
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            policy: learner.net.cfg.clone(),
            encoder: encoder.clone(),
            learner: learner.cfg.clone(),
            dual: learner.dual.clone(),
            params: learner.net.params.to_value()?,
        })
    }

    /// Rebuilds the learner with a fresh parameter optimizer.
    pub fn into_parts(self) -> Result<(Learner, Encoder)> {
        let params = ParamStore::from_value(self.params)?;
        let net = PolicyNet::from_params(self.policy, params)?;
        let mut learner = Learner::new(net, self.learner)?;
        learner.dual = self.dual;
        Ok((learner, self.encoder))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::format(path, e))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let c: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::format(path, format!("unexpected format `{}`", c.format)));
        }
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: c.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(tape: &mut Tape, mean: Vec<f64>, log_var: Vec<f64>, rows: usize) -> ActionDists {
        let cols = mean.len() / rows;
        ActionDists {
            mean: tape.constant(Tensor::matrix(rows, cols, mean).unwrap()).unwrap(),
            log_var: tape.constant(Tensor::matrix(rows, cols, log_var).unwrap()).unwrap(),
        }
    }

    #[test]
    fn unit_gaussian_nll_and_entropy() {
        let mut t = Tape::new();
        let d = unit(&mut t, vec![0.0], vec![0.0], 1);
        let a = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let nll = nll_loss(&mut t, d, &a, &[true]).unwrap();
        let h = policy_entropy(&mut t, d, &[true]).unwrap();
        assert!((t.scalar(nll).unwrap() - 0.918_938_533_204_672_7).abs() < 1e-10);
        assert!((t.scalar(h).unwrap() - 1.418_938_533_204_672_7).abs() < 1e-10);
    }

    #[test]
    fn doubling_sigma_adds_ln2_per_dim() {
        let mut t = Tape::new();
        let lv = 0.3f64;
        let d1 = unit(&mut t, vec![0.5, -1.0], vec![lv, lv], 1);
        let d2 = unit(&mut t, vec![0.5, -1.0], vec![lv + 4f64.ln(); 2], 1);
        let a = Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap();
        let n1 = nll_loss(&mut t, d1, &a, &[true]).unwrap();
        let n2 = nll_loss(&mut t, d2, &a, &[true]).unwrap();
        let h1 = policy_entropy(&mut t, d1, &[true]).unwrap();
        let h2 = policy_entropy(&mut t, d2, &[true]).unwrap();
        let ln2 = 2f64.ln();
        assert!((t.scalar(n2).unwrap() - t.scalar(n1).unwrap() - 2.0 * ln2).abs() < 1e-12);
        assert!((t.scalar(h2).unwrap() - t.scalar(h1).unwrap() - 2.0 * ln2).abs() < 1e-12);
    }

    #[test]
    fn entropy_averages_positions_and_skips_padding() {
        let mut t = Tape::new();
        let d = unit(&mut t, vec![0.0; 3], vec![0.0, 1.0, 7.0], 3);
        let h = policy_entropy(&mut t, d, &[true, true, false]).unwrap();
        let h1 = gaussian_entropy(&[0.0]);
        let h2 = gaussian_entropy(&[1.0]);
        assert!((t.scalar(h).unwrap() - (h1 + h2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn mean_mode_and_decode() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_action(&[0.25, -3.0], &[1.0, 1.0], SampleMode::Mean, &mut rng),
            vec![0.25, -3.0]
        );
        let i3 = [1.0, 0.0];
        let i6 = [0.0, 1.0];
        assert_eq!(decode_action(&[0.9, 0.2], &[(3, &i3), (6, &i6)]).unwrap(), 3);
        assert!(decode_action(&[0.0, 0.0], &[]).is_err());
    }

    #[test]
    fn narrow_sampling_stays_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lv = 2.0 * 1e-2f64.ln();
        for _ in 0..1000 {
            let a = sample_action(&[0.3], &[lv], SampleMode::Stochastic, &mut rng);
            assert!((a[0] - 0.3).abs() < 1.0);
        }
    }

    #[test]
    fn mask_blocks_future_and_padding() {
        // one window, K = 2, first step padded
        let m = attention_mask(&[false, true], 1, 2);
        let allowed = |i: usize, j: usize| m[i * 6 + j];
        assert!(allowed(0, 0));
        assert!(!allowed(3, 0) && !allowed(3, 2));
        assert!(allowed(4, 3) && allowed(4, 4) && !allowed(4, 5));
    }

    #[test]
    fn initial_variance_is_about_one() {
        let cfg = PolicyConfig {
            state_dim: 2,
            action_dim: 2,
            ..PolicyConfig::default()
        };
        let net = PolicyNet::new(cfg.clone(), 0).unwrap();
        let b = Batch {
            size: 1,
            k: 2,
            rtg: vec![1.0, 1.0],
            states: vec![1.0, 0.0, 0.0, 1.0],
            actions: vec![0.0; 4],
            time: vec![1, 2],
            mask: vec![true, true],
        };
        let mut t = Tape::new();
        let d = net.forward(&mut t, &b).unwrap();
        for lv in t.value(d.log_var).data() {
            assert!(lv.abs() < 0.2, "{lv}");
        }
    }

    #[test]
    fn dual_sign() {
        let mut d = DualVariable::new(1.0, 0.05).unwrap();
        d.step(3.0, 1.0).unwrap();
        assert!(d.lambda() < 1.0);
        let mut d = DualVariable::new(1.0, 0.05).unwrap();
        d.step(0.5, 1.0).unwrap();
        assert!(d.lambda() > 1.0);
    }
}

//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of every adjoint implemented in the tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tape::{causal_mask, Tape, Var};
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Gradient scale below which errors are measured against this value
/// instead of the gradient itself.
pub const SCALE_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter name, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a − n| / max(|a|, |n|, SCALE_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

/// Compares the tape gradients of `loss_fn` against central differences for
/// every scalar of every parameter in `store`.
pub fn check<F>(store: &ParamStore, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    let analytic = tape.backward(loss, store)?;
    check_against(store, &analytic, |s| {
        let mut t = Tape::new();
        let l = loss_fn(s, &mut t)?;
        t.scalar(l)
    })
}

/// Same as [`check`] with precomputed analytic gradients and a plain
/// forward evaluator.
pub fn check_against<F>(store: &ParamStore, analytic: &Gradients, eval: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let coords: Vec<_> = store
        .ids()
        .flat_map(|id| (0..store.get(id).numel()).map(move |j| (id, j)))
        .collect();
    check_coords(store, analytic, eval, &coords)
}

/// Like [`check`], but for at most `per_param` randomly chosen entries of
/// each parameter tensor. Every tensor is still visited.
pub fn check_sampled<F>(store: &ParamStore, per_param: usize, seed: u64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for id in store.ids() {
        let n = store.get(id).numel();
        if n <= per_param {
            coords.extend((0..n).map(|j| (id, j)));
        } else {
            coords.extend(
                rand::seq::index::sample(&mut rng, n, per_param)
                    .into_iter()
                    .map(|j| (id, j)),
            );
        }
    }
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    let analytic = tape.backward(loss, store)?;
    check_coords(
        store,
        &analytic,
        |s| {
            let mut t = Tape::new();
            let l = loss_fn(s, &mut t)?;
            t.scalar(l)
        },
        &coords,
    )
}

fn check_coords<F>(
    store: &ParamStore,
    analytic: &Gradients,
    eval: F,
    coords: &[(ParamId, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for &(id, j) in coords {
        let orig = store.get(id).data()[j];
        work.get_mut(id).data_mut()[j] = orig + FD_STEP;
        let plus = eval(&work)?;
        work.get_mut(id).data_mut()[j] = orig - FD_STEP;
        let minus = eval(&work)?;
        work.get_mut(id).data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = rel_err(analytic.get(id).data()[j], numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = err;
            report.worst = Some((store.name(id).to_string(), j));
        }
    }
    Ok(report)
}

/// Names of the primitives covered by [`check_primitive`].
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "group_matmul",
    "group_matmul_nt",
    "transpose",
    "add",
    "sub",
    "mul",
    "add_bias",
    "scale",
    "add_scalar",
    "sum",
    "mean",
    "exp",
    "log",
    "tanh",
    "relu",
    "causal_softmax",
    "masked_softmax",
    "gather_rows",
    "layer_norm",
    "slice_cols",
    "concat_cols",
    "concat_rows",
];

/// Gradient check of one primitive on random 4×4 inputs. Each primitive is
/// followed by a fixed random linear read-out so every output entry carries
/// a distinct weight.
pub fn check_primitive(name: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::uniform(&[4, 4], 1.0, &mut rng));
    let b = store.add("b", Tensor::uniform(&[4, 4], 1.0, &mut rng));
    let bias = store.add("bias", Tensor::uniform(&[4], 1.0, &mut rng));
    let gamma = store.add("gamma", Tensor::uniform(&[4], 1.0, &mut rng));
    // Keeps `log` inputs strictly positive.
    let pos = store.add(
        "pos",
        Tensor::new(
            vec![4, 4],
            (0..16).map(|_| 0.5 + rand::Rng::random::<f64>(&mut rng)).collect(),
        )?,
    );
    // Relu inputs bounded away from the kink.
    let kinkless = store.add(
        "kinkless",
        Tensor::new(
            vec![4, 4],
            (0..16)
                .map(|i| {
                    let m = 0.1 + 0.9 * rand::Rng::random::<f64>(&mut rng);
                    if i % 2 == 0 {
                        m
                    } else {
                        -m
                    }
                })
                .collect(),
        )?,
    );
    let readout_big = Tensor::uniform(&[8, 4], 1.0, &mut rng);
    let readout = Tensor::uniform(&[4, 4], 1.0, &mut rng);
    let readout_wide = Tensor::uniform(&[4, 8], 1.0, &mut rng);
    let readout_2 = Tensor::uniform(&[4, 2], 1.0, &mut rng);
    let rows = [3usize, 0, 3, 1, 2];
    let readout_rows = Tensor::uniform(&[5, 4], 1.0, &mut rng);
    let mut mask = causal_mask(4);
    // keep every row non-empty, drop one extra key
    mask[3 * 4 + 1] = false;

    let name = name.to_string();
    check(&store, move |s, t| {
        let va = t.param(s, a)?;
        let vb = t.param(s, b)?;
        let (out, ro) = match name.as_str() {
            "matmul" => (t.matmul(va, vb)?, readout.clone()),
            "group_matmul" => {
                let narrow = t.slice_cols(va, 0, 2)?;
                (t.group_matmul(narrow, vb, 2, false)?, readout.clone())
            }
            "group_matmul_nt" => (t.group_matmul(va, vb, 2, true)?, readout_2.clone()),
            "transpose" => (t.transpose(va)?, readout.clone()),
            "add" => (t.add(va, vb)?, readout.clone()),
            "sub" => (t.sub(va, vb)?, readout.clone()),
            "mul" => (t.mul(va, vb)?, readout.clone()),
            "add_bias" => {
                let vbias = t.param(s, bias)?;
                (t.add_bias(va, vbias)?, readout.clone())
            }
            "scale" => (t.scale(va, -1.7)?, readout.clone()),
            "add_scalar" => {
                let x = t.add_scalar(va, 0.3)?;
                (t.mul(x, x)?, readout.clone())
            }
            "sum" => {
                let x = t.mul(va, vb)?;
                return t.sum(x);
            }
            "mean" => {
                let x = t.mul(va, va)?;
                return t.mean(x);
            }
            "exp" => (t.exp(va)?, readout.clone()),
            "log" => {
                let p = t.param(s, pos)?;
                (t.log(p)?, readout.clone())
            }
            "tanh" => (t.tanh(va)?, readout.clone()),
            "relu" => {
                let k = t.param(s, kinkless)?;
                (t.relu(k)?, readout.clone())
            }
            "causal_softmax" => (t.causal_softmax(va)?, readout.clone()),
            "masked_softmax" => (t.masked_softmax(va, &mask)?, readout.clone()),
            "gather_rows" => (t.gather_rows(va, &rows)?, readout_rows.clone()),
            "layer_norm" => {
                let vbias = t.param(s, bias)?;
                let g = t.param(s, gamma)?;
                (t.layer_norm(va, g, vbias)?, readout.clone())
            }
            "slice_cols" => {
                let x = t.slice_cols(va, 1, 2)?;
                (x, readout_2.clone())
            }
            "concat_cols" => (t.concat_cols(&[va, vb])?, readout_wide.clone()),
            "concat_rows" => (t.concat_rows(&[va, vb])?, readout_big.clone()),
            other => {
                return Err(crate::NumError::Domain {
                    op: "check_primitive",
                    detail: format!("unknown primitive `{other}`"),
                })
            }
        };
        let w = t.constant(ro)?;
        let prod = t.mul(out, w)?;
        t.sum(prod)
    })
}

/// Random 2-layer perceptron `8 → 4 → 1` with tanh hidden units and a
/// squared-error loss.
pub fn check_mlp(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let w1 = store.add("w1", Tensor::uniform(&[8, 4], 0.5, &mut rng));
    let b1 = store.add("b1", Tensor::uniform(&[4], 0.5, &mut rng));
    let w2 = store.add("w2", Tensor::uniform(&[4, 1], 0.5, &mut rng));
    let b2 = store.add("b2", Tensor::uniform(&[1], 0.5, &mut rng));
    let x = Tensor::uniform(&[5, 8], 1.0, &mut rng);
    let y = Tensor::uniform(&[5, 1], 1.0, &mut rng);
    check(&store, move |s, t| {
        let xv = t.constant(x.clone())?;
        let yv = t.constant(y.clone())?;
        let (w1, b1, w2, b2) = (t.param(s, w1)?, t.param(s, b1)?, t.param(s, w2)?, t.param(s, b2)?);
        let h = t.matmul(xv, w1)?;
        let h = t.add_bias(h, b1)?;
        let h = t.tanh(h)?;
        let o = t.matmul(h, w2)?;
        let o = t.add_bias(o, b2)?;
        let d = t.sub(o, yv)?;
        let sq = t.mul(d, d)?;
        t.mean(sq)
    })
}

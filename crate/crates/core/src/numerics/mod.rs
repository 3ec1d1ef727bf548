//! Dense tensors, differentiable operations and gradient verification.
//!
//! The [`Graph`] tape is the only implementation of each operation; the free
//! functions in this module are one-shot forward evaluations built on it.

pub mod conv;
mod graph;
pub mod lstm;
mod params;
mod tensor;

use rand::Rng;

pub use conv::ConvGeom;
pub use graph::{
    BatchStats, Gradients, Graph, NormMode, RunningStats, Var, BCE_CLAMP, BN_EPS, BN_MOMENTUM, L2_EPS,
};
pub use params::{Param, ParamSet};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Uniform values in `[-bound, bound]`.
pub fn uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
}

pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (x, w, b) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.linear(x, w, Some(b))?;
    Ok(g.value(y).clone())
}

pub fn conv<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, geom: ConvGeom) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let wv = g.input(w.clone());
    let bv = b.map(|b| g.input(b.clone()));
    let y = g.conv(xv, wv, bv, geom)?;
    Ok(g.value(y).clone())
}

/// Weights and bias of one convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams<'a, T> {
    pub weight: &'a Tensor<T>,
    pub bias: Option<&'a Tensor<T>>,
}

/// `tanh(conv(x; feature)) * sigmoid(conv(x; gate))` on the graph.
pub fn gated_conv_on<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    feature: (Var, Option<Var>),
    gate: (Var, Option<Var>),
    geom: ConvGeom,
) -> Result<Var> {
    if g.shape(feature.0) != g.shape(gate.0) {
        return Err(Error::Shape(format!(
            "gated conv feature kernel {:?} vs gate kernel {:?}",
            g.shape(feature.0),
            g.shape(gate.0)
        )));
    }
    let f = g.conv(x, feature.0, feature.1, geom)?;
    let f = g.tanh(f);
    let s = g.conv(x, gate.0, gate.1, geom)?;
    let s = g.sigmoid(s);
    g.mul(f, s)
}

pub fn gated_conv2d<T: Scalar>(
    x: &Tensor<T>,
    feature: ConvParams<'_, T>,
    gate: ConvParams<'_, T>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let fw = g.input(feature.weight.clone());
    let fb = feature.bias.map(|b| g.input(b.clone()));
    let gw = g.input(gate.weight.clone());
    let gb = gate.bias.map(|b| g.input(b.clone()));
    let y = gated_conv_on(&mut g, xv, (fw, fb), (gw, gb), geom)?;
    Ok(g.value(y).clone())
}

/// Batch norm over channel axis 1. In training mode `running` is updated
/// with momentum [`BN_MOMENTUM`].
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats<T>,
    mode: NormMode,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.input(x.clone()), g.input(gamma.clone()), g.input(beta.clone()));
    let y = g.batch_norm(xv, gv, bv, running, mode, "bn")?;
    if let Some(stats) = g.batch_stats().first() {
        update_running(running, stats);
    }
    Ok(g.value(y).clone())
}

/// Folds batch statistics into running statistics. The first update
/// replaces the initial values outright.
pub fn update_running<T: Scalar>(running: &mut RunningStats<T>, stats: &BatchStats<T>) {
    if !running.initialized {
        running.mean = stats.mean.clone();
        running.var = stats.var.clone();
        running.initialized = true;
        return;
    }
    let m = T::from_f64_lossy(BN_MOMENTUM);
    for (r, &s) in running.mean.iter_mut().zip(&stats.mean) {
        *r = (T::one() - m) * *r + m * s;
    }
    for (r, &s) in running.var.iter_mut().zip(&stats.var) {
        *r = (T::one() - m) * *r + m * s;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Tanh,
    Sigmoid,
    Hadamard,
    L2Norm,
}

/// Pointwise operations. `L2Norm` normalizes along axis 1 (the channel
/// axis) for rank >= 2 inputs and along the only axis for vectors.
pub fn elementwise<T: Scalar>(kind: Elementwise, x: &Tensor<T>, y: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = match kind {
        Elementwise::Tanh => g.tanh(xv),
        Elementwise::Sigmoid => g.sigmoid(xv),
        Elementwise::Hadamard => {
            let y = y.ok_or_else(|| Error::InvalidArgument("hadamard needs two operands".into()))?;
            let yv = g.input(y.clone());
            g.mul(xv, yv)?
        }
        Elementwise::L2Norm => {
            if x.ndim() == 1 {
                let r = g.reshape(xv, &[1, x.len()])?;
                let n = g.l2norm(r)?;
                g.reshape(n, &[x.len()])?
            } else {
                g.l2norm(xv)?
            }
        }
    };
    Ok(g.value(out).clone())
}

/// Parameter names of a stacked bidirectional LSTM.
pub fn bilstm_param_name(prefix: &str, layer: usize, backward: bool, part: &str) -> String {
    let dir = if backward { "bwd" } else { "fwd" };
    format!("{prefix}.l{layer}.{dir}.{part}")
}

/// Registers stacked bidirectional LSTM parameters. Weights are uniform in
/// `±1/sqrt(H)`; the forget-gate bias starts at 1.
pub fn init_bilstm<T: Scalar, R: Rng + ?Sized>(
    params: &mut ParamSet<T>,
    prefix: &str,
    d_in: usize,
    hidden: usize,
    layers: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = 1.0 / (hidden as f64).sqrt();
    for l in 0..layers {
        let din = if l == 0 { d_in } else { 2 * hidden };
        for back in [false, true] {
            params.insert(
                bilstm_param_name(prefix, l, back, "w_ih"),
                uniform(&[4 * hidden, din], bound, rng),
                true,
            )?;
            params.insert(
                bilstm_param_name(prefix, l, back, "w_hh"),
                uniform(&[4 * hidden, hidden], bound, rng),
                true,
            )?;
            let mut b: Tensor<T> = uniform(&[4 * hidden], bound, rng);
            for j in hidden..2 * hidden {
                b.data_mut()[j] = T::one();
            }
            params.insert(bilstm_param_name(prefix, l, back, "bias"), b, true)?;
        }
    }
    Ok(())
}

/// Stacked bidirectional LSTM over `x` (`[steps, d_in]`); returns the time
/// average of the last layer's concatenated outputs, `[2H]`.
pub fn bilstm_on<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    prefix: &str,
    layers: usize,
    x: Var,
) -> Result<Var> {
    let steps = g.shape(x)[0];
    if steps == 0 {
        return Err(Error::Empty("LSTM input sequence".into()));
    }
    let mut h = x;
    for l in 0..layers {
        let p = |g: &mut Graph<T>, back: bool, part: &str| g.param(params, &bilstm_param_name(prefix, l, back, part));
        let (fi, fh, fb) = (p(g, false, "w_ih")?, p(g, false, "w_hh")?, p(g, false, "bias")?);
        let (bi, bh, bb) = (p(g, true, "w_ih")?, p(g, true, "w_hh")?, p(g, true, "bias")?);
        let fwd = g.lstm(h, fi, fh, fb)?;
        let rev = g.reverse_rows(h)?;
        let bwd = g.lstm(rev, bi, bh, bb)?;
        let bwd = g.reverse_rows(bwd)?;
        h = g.concat_cols(fwd, bwd)?;
    }
    g.mean_rows(h)
}

pub fn bilstm_encode<T: Scalar>(
    word_vectors: &Tensor<T>,
    params: &ParamSet<T>,
    prefix: &str,
    layers: usize,
) -> Result<Tensor<T>> {
    if word_vectors.ndim() != 2 {
        return Err(Error::Shape(format!("word vectors {:?}", word_vectors.shape())));
    }
    let mut g = Graph::new();
    let x = g.input(word_vectors.clone());
    let y = bilstm_on(&mut g, params, prefix, layers, x)?;
    Ok(g.value(y).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat element index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares analytic parameter gradients of the scalar `f` against central
/// differences `(f(p + eps) - f(p - eps)) / 2 eps`.
///
/// Relative error is `|a - n| / max(1e-8, |a| + |n|)`. At most
/// `max_per_param` elements of each parameter are probed, evenly spaced.
pub fn grad_check<F>(
    params: &ParamSet<f64>,
    f: F,
    eps: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    check(params, f, Stencil::Central(eps), max_per_param)
}

/// [`grad_check`] with each numeric derivative taken by [`ridders`]
/// extrapolation from initial step `h0` instead of a single central
/// difference.
pub fn grad_check_ridders<F>(
    params: &ParamSet<f64>,
    f: F,
    h0: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    check(params, f, Stencil::Ridders(h0), max_per_param)
}

/// Ridders' extrapolation of central differences of `f` at 0, starting at
/// step `h0` and halving it. Returns the derivative and its error estimate.
pub fn ridders<F>(mut f: F, h0: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    const LEVELS: usize = 8;
    const SHRINK: f64 = 2.0;
    const SAFE: f64 = 2.0;
    if !(h0 > 0.0) {
        return Err(Error::InvalidArgument(format!("ridders step {h0}")));
    }
    let mut central = |h: f64| -> Result<f64> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
    let mut h = h0;
    let mut prev = vec![central(h)?];
    let mut best = (prev[0], f64::INFINITY);
    for _ in 1..LEVELS {
        h /= SHRINK;
        let mut row = vec![central(h)?];
        let mut fac = SHRINK * SHRINK;
        for j in 1..=prev.len() {
            let v = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let err = (v - row[j - 1]).abs().max((v - prev[j - 1]).abs());
            if err <= best.1 {
                best = (v, err);
            }
            row.push(v);
        }
        let k = prev.len();
        if (row[k] - prev[k - 1]).abs() >= SAFE * best.1 {
            break;
        }
        prev = row;
    }
    Ok(best)
}

#[derive(Clone, Copy)]
enum Stencil {
    Central(f64),
    Ridders(f64),
}

fn check<F>(
    params: &ParamSet<f64>,
    f: F,
    stencil: Stencil,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    let value = g.value(out).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = g.backward(out)?;
    let analytic: std::collections::HashMap<String, Tensor<f64>> =
        grads.params().map(|(n, t)| (n.to_string(), t.clone())).collect();

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, p)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    for name in names {
        let len = params.value(&name)?.len();
        let picks: Vec<usize> = match max_per_param {
            Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
            _ => (0..len).collect(),
        };
        for i in picks {
            let orig = params.value(&name)?.data()[i];
            let mut at = |d: f64| -> Result<f64> {
                probe.get_mut(&name).expect("exists").value.data_mut()[i] = orig + d;
                let v = eval(&probe);
                probe.get_mut(&name).expect("exists").value.data_mut()[i] = orig;
                v
            };
            let a = analytic.get(&name).map(|t| t.data()[i]).unwrap_or(0.0);
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient of {name}")));
            }
            let numeric = match stencil {
                Stencil::Central(eps) => (at(eps)? - at(-eps)?) / (2.0 * eps),
                Stencil::Ridders(h0) => ridders(&mut at, h0)?.0,
            };
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

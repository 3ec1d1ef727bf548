//! Reverse-mode differentiation over whole-tensor operations.
//!
//! A [`Graph`] records every operation applied to its nodes; calling
//! [`Graph::backward`] walks the record in reverse and returns gradients for
//! every leaf that asked for one.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::numerics::conv::{self, ConvDims, ConvGeom};
use crate::numerics::lstm::{self, LstmCache};
use crate::numerics::{ParamSet, Tensor};
use crate::scalar::Scalar;

pub const L2_EPS: f64 = 1e-8;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

/// Batch statistics produced by a training-mode batch norm, to be folded
/// into the running statistics by the parameter owner.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub tag: String,
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Reshape(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv { x: Var, w: Var, b: Option<Var>, dims: ConvDims },
    Tanh(Var),
    Sigmoid(Var),
    Mul(Var, Var),
    Add(Var, Var),
    ScaleChannels { x: Var, v: Var },
    L2Norm { x: Var, denom: Vec<T>, eps: T },
    Mask { x: Var, mask: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Embedding { table: Var, ids: Vec<usize> },
    Lstm { x: Var, w_ih: Var, w_hh: Var, b: Var, hidden: usize, cache: LstmCache<T> },
    ReverseRows(Var),
    ConcatCols(Var, Var),
    MeanRows(Var),
    Stack(Vec<Var>),
    TransposeLast2(Var),
    SpanMax { x: Var, argmax: Vec<usize> },
    Assemble { inputs: Vec<Var>, plan: Vec<Option<(usize, usize)>>, keep: Vec<bool> },
    Bce { preds: Vec<Var>, labels: Vec<Vec<T>>, masks: Vec<Vec<bool>>, count: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    /// Gradients for every bound parameter that influenced the output.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(n, v)| self.leaves.get(&v.0).map(|g| (n.as_str(), g)))
    }

    /// Adds parameter gradients into the gradient buffers of `params`.
    pub fn accumulate_into(&self, params: &mut ParamSet<T>) -> Result<()> {
        for (name, g) in self.params() {
            params.accumulate_grad(name, g)?;
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    batch_stats: Vec<BatchStats<T>>,
    macs: usize,
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// `[outer, channels, inner]` factorization with the channel axis at 1.
fn channel_split(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!(
            "channel-axis operation needs rank >= 2, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            batch_stats: Vec::new(),
            macs: 0,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter, once per graph.
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let p = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Values held by every node: the working set of the recorded forward.
    pub fn total_values(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    /// Multiply-accumulates spent in linear, convolution and LSTM nodes.
    pub fn macs(&self) -> usize {
        self.macs
    }

    pub fn batch_stats(&self) -> &[BatchStats<T>] {
        &self.batch_stats
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// `y = x W^T + b` along the trailing axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let d_in = *xs.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        if ws.len() != 2 || ws[1] != d_in {
            return Err(Error::Shape(format!("linear: input {xs:?} vs weight {ws:?}")));
        }
        let d_out = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::Shape(format!(
                    "linear bias {:?} vs {d_out} outputs",
                    self.shape(b)
                )));
            }
        }
        let rows = self.value(x).len() / d_in.max(1);
        let mut y = vec![T::zero(); rows * d_out];
        T::gemm(
            rows,
            d_in,
            d_out,
            T::one(),
            (self.value(x).data(), d_in as isize, 1),
            (self.value(w).data(), 1, d_in as isize),
            T::zero(),
            (&mut y, d_out as isize, 1),
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_mut(d_out) {
                for (v, &bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        self.macs += rows * d_in * d_out;
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = d_out;
        let ng = self.needs(&[x, w]) || b.is_some_and(|b| self.needs(&[b]));
        Ok(self.push(Tensor::new(shape, y)?, Op::Linear { x, w, b }, ng))
    }

    /// Cross-correlation over `[B, C, L]` (with a `[Co, Ci, k]` weight) or
    /// `[B, C, H, W]` (with a `[Co, Ci, kh, kw]` weight).
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (x4, w4) = match (xs.len(), ws.len()) {
            (3, 3) => ([xs[0], xs[1], 1, xs[2]], [ws[0], ws[1], 1, ws[2]]),
            (4, 4) => ([xs[0], xs[1], xs[2], xs[3]], [ws[0], ws[1], ws[2], ws[3]]),
            _ => {
                return Err(Error::Shape(format!(
                    "conv: input {xs:?} and weight {ws:?} must both be rank 3 or rank 4"
                )))
            }
        };
        let dims = ConvDims::resolve(x4, w4, geom)?;
        if let Some(b) = b {
            if self.shape(b) != [dims.c_out] {
                return Err(Error::Shape(format!("conv bias {:?}", self.shape(b))));
            }
        }
        let y = conv::forward(
            &dims,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        self.macs += dims.macs();
        let shape = if xs.len() == 3 {
            vec![dims.batch, dims.c_out, dims.wo]
        } else {
            vec![dims.batch, dims.c_out, dims.ho, dims.wo]
        };
        let ng = self.needs(&[x, w]) || b.is_some_and(|b| self.needs(&[b]));
        Ok(self.push(Tensor::new(shape, y)?, Op::Conv { x, w, b, dims }, ng))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(T::tanh);
        let ng = self.needs(&[x]);
        self.push(y, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        let ng = self.needs(&[x]);
        self.push(y, Op::Sigmoid(x), ng)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(y, Op::Mul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), ng))
    }

    /// `y[b, c, ..] = x[b, c, ..] * v[b, c]`.
    pub fn scale_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        let (outer, ch, inner) = channel_split(self.shape(x))?;
        if self.shape(v) != [outer, ch] {
            return Err(Error::Shape(format!(
                "scale_channels: {:?} vs {:?}",
                self.shape(x),
                self.shape(v)
            )));
        }
        let mut y = self.value(x).clone();
        let vv = self.value(v).data();
        for (i, chunk) in y.data_mut().chunks_mut(inner.max(1)).enumerate().take(outer * ch) {
            let s = vv[i];
            chunk.iter_mut().for_each(|e| *e *= s);
        }
        let ng = self.needs(&[x, v]);
        Ok(self.push(y, Op::ScaleChannels { x, v }, ng))
    }

    /// Unit-norm along the channel axis; positions with norm below `eps`
    /// are divided by `eps` instead.
    pub fn l2norm(&mut self, x: Var) -> Result<Var> {
        let (outer, ch, inner) = channel_split(self.shape(x))?;
        let eps = T::from_f64_lossy(L2_EPS);
        let xv = self.value(x);
        let mut y = xv.clone();
        let mut denom = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for s in 0..inner {
                let base = o * ch * inner + s;
                let mut ss = T::zero();
                for c in 0..ch {
                    let v = xv.data()[base + c * inner];
                    ss += v * v;
                }
                let d = ss.sqrt().max(eps);
                denom[o * inner + s] = d;
                for c in 0..ch {
                    y.data_mut()[base + c * inner] /= d;
                }
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(y, Op::L2Norm { x, denom, eps }, ng))
    }

    /// Multiplies `x` (`[B, C, ...]`) by a constant `[B, ...]` mask.
    pub fn mask(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (outer, ch, inner) = channel_split(self.shape(x))?;
        if mask.len() != outer * inner {
            return Err(Error::Shape(format!(
                "mask of {} entries for {:?}",
                mask.len(),
                self.shape(x)
            )));
        }
        let mut y = self.value(x).clone();
        let mut full = Vec::with_capacity(y.len());
        for o in 0..outer {
            for _ in 0..ch {
                full.extend(mask[o * inner..(o + 1) * inner].iter().map(|&m| if m { T::one() } else { T::zero() }));
            }
        }
        for (v, &m) in y.data_mut().iter_mut().zip(&full) {
            *v *= m;
        }
        let ng = self.needs(&[x]);
        Ok(self.push(y, Op::Mask { x, mask: full }, ng))
    }

    /// Batch normalization over channel axis 1. In training mode the batch
    /// statistics are also recorded under `tag` (see [`Graph::batch_stats`]).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<T>,
        mode: NormMode,
        tag: &str,
    ) -> Result<Var> {
        let (outer, ch, inner) = channel_split(self.shape(x))?;
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(Error::Shape(format!("batch_norm affine parameters for {ch} channels")));
        }
        let eps = T::from_f64_lossy(BN_EPS);
        let m = outer * inner;
        let (mean, inv_std) = match mode {
            NormMode::Train => {
                if m == 0 {
                    return Err(Error::Empty("batch_norm over an empty batch".into()));
                }
                let xv = self.value(x).data();
                let mut mean = vec![T::zero(); ch];
                let mut var = vec![T::zero(); ch];
                let mf = T::from_usize(m).expect("count");
                for c in 0..ch {
                    let mut s = T::zero();
                    for o in 0..outer {
                        s += xv[(o * ch + c) * inner..(o * ch + c + 1) * inner].iter().copied().sum::<T>();
                    }
                    let mu = s / mf;
                    let mut q = T::zero();
                    for o in 0..outer {
                        for &v in &xv[(o * ch + c) * inner..(o * ch + c + 1) * inner] {
                            q += (v - mu) * (v - mu);
                        }
                    }
                    mean[c] = mu;
                    var[c] = q / mf;
                }
                let unbias = if m > 1 {
                    mf / (mf - T::one())
                } else {
                    T::one()
                };
                self.batch_stats.push(BatchStats {
                    tag: tag.to_string(),
                    mean: mean.clone(),
                    var: var.iter().map(|&v| v * unbias).collect(),
                });
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv)
            }
            NormMode::Eval => {
                if !running.initialized {
                    return Err(Error::InvalidArgument(format!(
                        "batch norm {tag} has no running statistics for evaluation"
                    )));
                }
                if running.mean.len() != ch || running.var.len() != ch {
                    return Err(Error::Shape(format!("running statistics for {tag}")));
                }
                (
                    running.mean.clone(),
                    running.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
                )
            }
        };
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for c in 0..ch {
                for i in (o * ch + c) * inner..(o * ch + c + 1) * inner {
                    let h = (xv[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    y[i] = g[c] * h + bt[c];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == NormMode::Train,
            },
            ng,
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::Shape(format!("embedding table {ts:?}")));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= ts[0]) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                ts[0]
            )));
        }
        let d = ts[1];
        let tv = self.value(table).data();
        let mut y = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            y.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.needs(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], y)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// One LSTM direction over `x` (`[steps, d_in]`), producing `[steps, H]`.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let wi = self.shape(w_ih).to_vec();
        if xs.len() != 2 || wi.len() != 2 || wi[1] != xs[1] || wi[0] % 4 != 0 {
            return Err(Error::Shape(format!("lstm: input {xs:?} vs W_ih {wi:?}")));
        }
        let hidden = wi[0] / 4;
        if self.shape(w_hh) != [4 * hidden, hidden] || self.shape(b) != [4 * hidden] {
            return Err(Error::Shape("lstm: recurrent weight or bias shape".into()));
        }
        let (steps, d_in) = (xs[0], xs[1]);
        let (h, cache) = lstm::forward(
            self.value(x).data(),
            steps,
            d_in,
            hidden,
            self.value(w_ih).data(),
            self.value(w_hh).data(),
            self.value(b).data(),
        );
        self.macs += steps * 4 * hidden * (d_in + hidden);
        let ng = self.needs(&[x, w_ih, w_hh, b]);
        Ok(self.push(
            Tensor::new(vec![steps, hidden], h)?,
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                hidden,
                cache,
            },
            ng,
        ))
    }

    pub fn reverse_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("reverse_rows on {s:?}")));
        }
        let w = s[1];
        let xv = self.value(x).data();
        let y: Vec<T> = (0..s[0]).rev().flat_map(|r| xv[r * w..(r + 1) * w].iter().copied()).collect();
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(s, y)?, Op::ReverseRows(x), ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Shape(format!("concat_cols {sa:?} and {sb:?}")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut y = Vec::with_capacity(av.len() + bv.len());
        for r in 0..sa[0] {
            y.extend_from_slice(&av[r * sa[1]..(r + 1) * sa[1]]);
            y.extend_from_slice(&bv[r * sb[1]..(r + 1) * sb[1]]);
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![sa[0], sa[1] + sb[1]], y)?, Op::ConcatCols(a, b), ng))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::Shape(format!("mean_rows on {s:?}")));
        }
        let n = T::from_usize(s[0]).expect("count");
        let xv = self.value(x).data();
        let y: Vec<T> = (0..s[1])
            .map(|c| (0..s[0]).map(|r| xv[r * s[1] + c]).sum::<T>() / n)
            .collect();
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![s[1]], y)?, Op::MeanRows(x), ng))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Empty("stack of zero tensors".into()))?;
        let s = self.shape(*first).to_vec();
        let mut y = Vec::new();
        for &v in xs {
            if self.shape(v) != s.as_slice() {
                return Err(Error::Shape("stack of unequal shapes".into()));
            }
            y.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(&s);
        let ng = self.needs(xs);
        Ok(self.push(Tensor::new(shape, y)?, Op::Stack(xs.to_vec()), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("transpose on {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let xv = self.value(x).data();
        let mut y = vec![T::zero(); xv.len()];
        for (src, dst) in xv.chunks(r * c).zip(y.chunks_mut(r * c)) {
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, y)?, Op::TransposeLast2(x), ng))
    }

    /// Max over clip spans. `x` is `[B, C, L]`; `spans[p]` is the inclusive
    /// clip range of output position `p` and `keep[b * P + p]` says whether
    /// sample `b` holds a real moment there. Output is `[B, C] ++ out_spatial`.
    pub fn span_max(
        &mut self,
        x: Var,
        spans: &[(usize, usize)],
        keep: &[bool],
        out_spatial: &[usize],
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape(format!("span_max input {s:?}")));
        }
        let (batch, ch, len) = (s[0], s[1], s[2]);
        let p = spans.len();
        if keep.len() != batch * p || out_spatial.iter().product::<usize>() != p {
            return Err(Error::Shape("span_max plan does not match input".into()));
        }
        if let Some(&(a, e)) = spans.iter().find(|&&(a, e)| a > e || e >= len) {
            return Err(Error::InvalidArgument(format!(
                "span [{a}, {e}] outside {len} clips"
            )));
        }
        let xv = self.value(x).data();
        let mut y = vec![T::zero(); batch * ch * p];
        let mut argmax = vec![usize::MAX; batch * ch * p];
        // Group positions by start so each start is scanned once.
        let mut by_start: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for (pi, &(a, e)) in spans.iter().enumerate() {
            by_start.entry(a).or_default().push((e, pi));
        }
        for list in by_start.values_mut() {
            list.sort_unstable();
        }
        for b in 0..batch {
            for c in 0..ch {
                let base = (b * ch + c) * len;
                let row = &xv[base..base + len];
                for (&a, list) in &by_start {
                    let mut best = a;
                    let mut cur = a;
                    for &(e, pi) in list {
                        while cur < e {
                            cur += 1;
                            if row[cur] > row[best] {
                                best = cur;
                            }
                        }
                        if keep[b * p + pi] {
                            let o = (b * ch + c) * p + pi;
                            y[o] = row[best];
                            argmax[o] = base + best;
                        }
                    }
                }
            }
        }
        let mut shape = vec![batch, ch];
        shape.extend_from_slice(out_spatial);
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, y)?, Op::SpanMax { x, argmax }, ng))
    }

    /// Gathers positions from several `[B, C, L_t]` inputs into one map.
    /// `plan[p] = Some((t, i))` copies position `i` of input `t` to output
    /// position `p`; `keep[b * P + p]` zeroes individual cells.
    pub fn assemble(
        &mut self,
        inputs: &[Var],
        plan: &[Option<(usize, usize)>],
        keep: &[bool],
        out_spatial: &[usize],
    ) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Empty("assemble without inputs".into()))?;
        let (batch, ch) = (self.shape(*first)[0], self.shape(*first)[1]);
        let p = plan.len();
        if keep.len() != batch * p || out_spatial.iter().product::<usize>() != p {
            return Err(Error::Shape("assemble plan does not match".into()));
        }
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != 3 || s[0] != batch || s[1] != ch {
                return Err(Error::Shape(format!("assemble input {s:?}")));
            }
        }
        for (t, i) in plan.iter().flatten() {
            if *t >= inputs.len() || *i >= self.shape(inputs[*t])[2] {
                return Err(Error::InvalidArgument(format!(
                    "assemble source ({t}, {i}) out of range"
                )));
            }
        }
        let mut y = vec![T::zero(); batch * ch * p];
        for b in 0..batch {
            for (pi, src) in plan.iter().enumerate() {
                let Some((t, i)) = *src else { continue };
                if !keep[b * p + pi] {
                    continue;
                }
                let l = self.shape(inputs[t])[2];
                let xv = self.value(inputs[t]).data();
                for c in 0..ch {
                    y[(b * ch + c) * p + pi] = xv[(b * ch + c) * l + i];
                }
            }
        }
        let mut shape = vec![batch, ch];
        shape.extend_from_slice(out_spatial);
        let ng = self.needs(inputs);
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::Assemble {
                inputs: inputs.to_vec(),
                plan: plan.to_vec(),
                keep: keep.to_vec(),
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy over masked positions of several score maps.
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]` before the logs.
    pub fn bce(&mut self, preds: &[Var], labels: &[Vec<T>], masks: &[Vec<bool>]) -> Result<Var> {
        if preds.len() != labels.len() || preds.len() != masks.len() {
            return Err(Error::Shape("bce: predictions, labels and masks differ in count".into()));
        }
        let lo = T::from_f64_lossy(BCE_CLAMP);
        let hi = T::one() - lo;
        let mut total = T::zero();
        let mut count = 0usize;
        for ((&p, y), m) in preds.iter().zip(labels).zip(masks) {
            let pv = self.value(p).data();
            if pv.len() != y.len() || pv.len() != m.len() {
                return Err(Error::Shape(format!(
                    "bce: {} scores, {} labels, {} mask entries",
                    pv.len(),
                    y.len(),
                    m.len()
                )));
            }
            for ((&pp, &yy), &keep) in pv.iter().zip(y).zip(m) {
                if keep {
                    let q = if pp.is_nan() { pp } else { pp.max(lo).min(hi) };
                    total -= yy * q.ln() + (T::one() - yy) * (T::one() - q).ln();
                    count += 1;
                }
            }
        }
        let loss = if count > 0 {
            total / T::from_usize(count).expect("count")
        } else {
            T::zero()
        };
        let ng = self.needs(preds);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                preds: preds.to_vec(),
                labels: labels.to_vec(),
                masks: masks.to_vec(),
                count,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(out)
            )));
        }
        self.backward_with(out, Tensor::ones(self.shape(out)))
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        self.value(out).expect_same_shape(&seed, "backward seed")?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed);
        let mut leaves = HashMap::new();
        for i in (0..=out.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(i, dy);
                continue;
            }
            self.propagate(node, &dy, &mut grads)?;
        }
        Ok(Gradients {
            leaves,
            params: self.params.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) -> Result<()> {
        let t = Tensor::new(self.shape(v).to_vec(), g)?;
        self.acc(grads, v, t);
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let one = T::one();
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => {
                self.acc(grads, *x, dy.clone().reshape(self.shape(*x))?);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let d_out = wv.dim(0);
                let d_in = wv.dim(1);
                let rows = xv.len() / d_in.max(1);
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    T::gemm(
                        rows,
                        d_out,
                        d_in,
                        one,
                        (dy.data(), d_out as isize, 1),
                        (wv.data(), d_in as isize, 1),
                        T::zero(),
                        (&mut dx, d_in as isize, 1),
                    );
                    self.acc_data(grads, *x, dx)?;
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); wv.len()];
                    T::gemm(
                        d_out,
                        rows,
                        d_in,
                        one,
                        (dy.data(), 1, d_out as isize),
                        (xv.data(), d_in as isize, 1),
                        T::zero(),
                        (&mut dw, d_in as isize, 1),
                    );
                    self.acc_data(grads, *w, dw)?;
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); d_out];
                        for row in dy.data().chunks(d_out) {
                            for (a, &v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        self.acc_data(grads, *b, db)?;
                    }
                }
            }
            Op::Conv { x, w, b, dims } => {
                let g = conv::backward(
                    dims,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy.data(),
                    self.wants(*x),
                );
                if let Some(dx) = g.dx {
                    self.acc_data(grads, *x, dx)?;
                }
                if self.wants(*w) {
                    self.acc_data(grads, *w, g.dweight)?;
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        self.acc_data(grads, *b, g.dbias)?;
                    }
                }
            }
            Op::Tanh(x) => {
                let dx = dy.zip_map(y, |d, t| d * (one - t * t))?;
                self.acc(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = dy.zip_map(y, |d, s| d * s * (one - s))?;
                self.acc(grads, *x, dx);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, dy.zip_map(self.value(*b), |d, q| d * q)?);
                }
                if self.wants(*b) {
                    self.acc(grads, *b, dy.zip_map(self.value(*a), |d, p| d * p)?);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.clone());
            }
            Op::ScaleChannels { x, v } => {
                let (outer, ch, inner) = channel_split(y.shape())?;
                let vv = self.value(*v).data();
                let xv = self.value(*x).data();
                if self.wants(*x) {
                    let mut dx = dy.data().to_vec();
                    for (i, chunk) in dx.chunks_mut(inner.max(1)).enumerate().take(outer * ch) {
                        let s = vv[i];
                        chunk.iter_mut().for_each(|e| *e *= s);
                    }
                    self.acc_data(grads, *x, dx)?;
                }
                if self.wants(*v) {
                    let dv: Vec<T> = (0..outer * ch)
                        .map(|i| {
                            dy.data()[i * inner..(i + 1) * inner]
                                .iter()
                                .zip(&xv[i * inner..(i + 1) * inner])
                                .map(|(&a, &b)| a * b)
                                .sum()
                        })
                        .collect();
                    self.acc_data(grads, *v, dv)?;
                }
            }
            Op::L2Norm { x, denom, eps } => {
                let (outer, ch, inner) = channel_split(y.shape())?;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for s in 0..inner {
                        let base = o * ch * inner + s;
                        let d = denom[o * inner + s];
                        if d > *eps {
                            let mut dot = T::zero();
                            for c in 0..ch {
                                dot += y.data()[base + c * inner] * dy.data()[base + c * inner];
                            }
                            for c in 0..ch {
                                let i = base + c * inner;
                                dx[i] = (dy.data()[i] - y.data()[i] * dot) / d;
                            }
                        } else {
                            for c in 0..ch {
                                let i = base + c * inner;
                                dx[i] = dy.data()[i] / d;
                            }
                        }
                    }
                }
                self.acc_data(grads, *x, dx)?;
            }
            Op::Mask { x, mask } => {
                let dx: Vec<T> = dy.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
                self.acc_data(grads, *x, dx)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (outer, ch, inner) = channel_split(y.shape())?;
                let g = self.value(*gamma).data();
                let dyv = dy.data();
                let mut dgamma = vec![T::zero(); ch];
                let mut dbeta = vec![T::zero(); ch];
                for o in 0..outer {
                    for c in 0..ch {
                        for i in (o * ch + c) * inner..(o * ch + c + 1) * inner {
                            dgamma[c] += dyv[i] * xhat[i];
                            dbeta[c] += dyv[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); dyv.len()];
                    let m = T::from_usize(outer * inner).expect("count");
                    for c in 0..ch {
                        let scale = g[c] * inv_std[c];
                        for o in 0..outer {
                            for i in (o * ch + c) * inner..(o * ch + c + 1) * inner {
                                dx[i] = if *train {
                                    scale / m * (m * dyv[i] - dbeta[c] - xhat[i] * dgamma[c])
                                } else {
                                    scale * dyv[i]
                                };
                            }
                        }
                    }
                    self.acc_data(grads, *x, dx)?;
                }
                if self.wants(*gamma) {
                    self.acc_data(grads, *gamma, dgamma)?;
                }
                if self.wants(*beta) {
                    self.acc_data(grads, *beta, dbeta)?;
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![T::zero(); self.value(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for k in 0..d {
                        dt[id * d + k] += dy.data()[r * d + k];
                    }
                }
                self.acc_data(grads, *table, dt)?;
            }
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                hidden,
                cache,
            } => {
                let xs = self.shape(*x);
                let g = lstm::backward(
                    self.value(*x).data(),
                    xs[0],
                    xs[1],
                    *hidden,
                    self.value(*w_ih).data(),
                    self.value(*w_hh).data(),
                    y.data(),
                    cache,
                    dy.data(),
                );
                self.acc_data(grads, *x, g.dx)?;
                self.acc_data(grads, *w_ih, g.dw_ih)?;
                self.acc_data(grads, *w_hh, g.dw_hh)?;
                self.acc_data(grads, *b, g.dbias)?;
            }
            Op::ReverseRows(x) => {
                let s = y.shape();
                let w = s[1];
                let dv = dy.data();
                let dx: Vec<T> = (0..s[0]).rev().flat_map(|r| dv[r * w..(r + 1) * w].iter().copied()).collect();
                self.acc_data(grads, *x, dx)?;
            }
            Op::ConcatCols(a, b) => {
                let wa = self.shape(*a)[1];
                let wb = self.shape(*b)[1];
                let rows = y.dim(0);
                let mut da = Vec::with_capacity(rows * wa);
                let mut db = Vec::with_capacity(rows * wb);
                for row in dy.data().chunks(wa + wb) {
                    da.extend_from_slice(&row[..wa]);
                    db.extend_from_slice(&row[wa..]);
                }
                self.acc_data(grads, *a, da)?;
                self.acc_data(grads, *b, db)?;
            }
            Op::MeanRows(x) => {
                let s = self.shape(*x);
                let n = T::from_usize(s[0]).expect("count");
                let dx: Vec<T> = (0..s[0]).flat_map(|_| dy.data().iter().map(move |&d| d / n)).collect();
                self.acc_data(grads, *x, dx)?;
            }
            Op::Stack(xs) => {
                let w = dy.len() / xs.len();
                for (i, &v) in xs.iter().enumerate() {
                    self.acc_data(grads, v, dy.data()[i * w..(i + 1) * w].to_vec())?;
                }
            }
            Op::TransposeLast2(x) => {
                let s = y.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let mut dx = vec![T::zero(); dy.len()];
                for (src, dst) in dy.data().chunks(r * c).zip(dx.chunks_mut(r * c)) {
                    for i in 0..r {
                        for j in 0..c {
                            dst[j * r + i] = src[i * c + j];
                        }
                    }
                }
                self.acc_data(grads, *x, dx)?;
            }
            Op::SpanMax { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&src, &d) in argmax.iter().zip(dy.data()) {
                    if src != usize::MAX {
                        dx[src] += d;
                    }
                }
                self.acc_data(grads, *x, dx)?;
            }
            Op::Assemble { inputs, plan, keep } => {
                let (batch, ch) = (y.dim(0), y.dim(1));
                let p = plan.len();
                let mut dxs: Vec<Vec<T>> = inputs.iter().map(|&v| vec![T::zero(); self.value(v).len()]).collect();
                for b in 0..batch {
                    for (pi, src) in plan.iter().enumerate() {
                        let Some((t, i)) = *src else { continue };
                        if !keep[b * p + pi] {
                            continue;
                        }
                        let l = self.shape(inputs[t])[2];
                        for c in 0..ch {
                            dxs[t][(b * ch + c) * l + i] += dy.data()[(b * ch + c) * p + pi];
                        }
                    }
                }
                for (&v, dx) in inputs.iter().zip(dxs) {
                    self.acc_data(grads, v, dx)?;
                }
            }
            Op::Bce {
                preds,
                labels,
                masks,
                count,
            } => {
                if *count == 0 {
                    return Ok(());
                }
                let lo = T::from_f64_lossy(BCE_CLAMP);
                let hi = one - lo;
                let scale = dy.item() / T::from_usize(*count).expect("count");
                for ((&p, yl), m) in preds.iter().zip(labels).zip(masks) {
                    let pv = self.value(p).data();
                    let dp: Vec<T> = pv
                        .iter()
                        .zip(yl)
                        .zip(m)
                        .map(|((&pp, &yy), &keep)| {
                            if !keep || pp < lo || pp > hi {
                                T::zero()
                            } else {
                                -scale * (yy / pp - (one - yy) / (one - pp))
                            }
                        })
                        .collect();
                    self.acc_data(grads, p, dp)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, uniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-6;

    /// Reduces `y` to a scalar through a fixed random projection so every
    /// output element receives a distinct upstream gradient.
    fn probe(g: &mut Graph<f64>, y: Var) -> Result<Var> {
        let n = g.value(y).len();
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64 + 99);
        let w = g.input(uniform(&[1, n], 1.0, &mut rng));
        let flat = g.reshape(y, &[1, n])?;
        g.linear(flat, w, None)
    }

    fn params(spec: &[(&str, &[usize])], seed: u64) -> ParamSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        for (name, shape) in spec {
            p.insert(*name, uniform(shape, 1.0, &mut rng), true).unwrap();
        }
        p
    }

    fn check<F>(p: &ParamSet<f64>, f: F)
    where
        F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
    {
        let r = grad_check(p, |g, p| {
            let y = f(g, p)?;
            probe(g, y)
        }, 1e-5, None)
        .unwrap();
        assert!(r.max_rel_error < TOL, "{r:?}");
        assert!(r.checked > 0);
    }

    #[test]
    fn grad_linear() {
        let p = params(&[("x", &[3, 4]), ("w", &[2, 4]), ("b", &[2])], 1);
        check(&p, |g, p| {
            let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
            g.linear(x, w, Some(b))
        });
    }

    #[test]
    fn grad_conv1d_strided() {
        let p = params(&[("x", &[2, 3, 9]), ("w", &[2, 3, 3]), ("b", &[2])], 2);
        check(&p, |g, p| {
            let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
            g.conv(x, w, Some(b), ConvGeom::conv1d(2, 1, 0))
        });
    }

    #[test]
    fn grad_conv2d_same() {
        let p = params(&[("x", &[2, 2, 4, 5]), ("w", &[3, 2, 3, 3]), ("b", &[3])], 3);
        check(&p, |g, p| {
            let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
            g.conv(x, w, Some(b), ConvGeom::same(3, 3))
        });
    }

    #[test]
    fn grad_pointwise() {
        let p = params(&[("a", &[2, 3, 2]), ("b", &[2, 3, 2])], 4);
        check(&p, |g, p| {
            let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
            let t = g.tanh(a);
            let s = g.sigmoid(b);
            let m = g.mul(t, s)?;
            g.add(m, a)
        });
    }

    #[test]
    fn grad_scale_channels_and_l2norm() {
        let p = params(&[("x", &[2, 3, 2, 2]), ("v", &[2, 3])], 5);
        check(&p, |g, p| {
            let (x, v) = (g.param(p, "x")?, g.param(p, "v")?);
            let s = g.scale_channels(x, v)?;
            g.l2norm(s)
        });
    }

    #[test]
    fn grad_mask() {
        let p = params(&[("x", &[2, 2, 3])], 6);
        let keep = [true, false, true, false, true, true];
        check(&p, |g, p| {
            let x = g.param(p, "x")?;
            g.mask(x, &keep)
        });
    }

    #[test]
    fn grad_batch_norm_train() {
        let p = params(&[("x", &[3, 2, 4]), ("gamma", &[2]), ("beta", &[2])], 7);
        let rs = RunningStats {
            mean: vec![0.0; 2],
            var: vec![1.0; 2],
            initialized: false,
        };
        check(&p, |g, p| {
            let (x, ga, be) = (g.param(p, "x")?, g.param(p, "gamma")?, g.param(p, "beta")?);
            g.batch_norm(x, ga, be, &rs, NormMode::Train, "bn")
        });
    }

    #[test]
    fn grad_batch_norm_eval() {
        let p = params(&[("x", &[2, 2, 3]), ("gamma", &[2]), ("beta", &[2])], 8);
        let rs = RunningStats {
            mean: vec![0.3, -0.1],
            var: vec![0.5, 2.0],
            initialized: true,
        };
        check(&p, |g, p| {
            let (x, ga, be) = (g.param(p, "x")?, g.param(p, "gamma")?, g.param(p, "beta")?);
            g.batch_norm(x, ga, be, &rs, NormMode::Eval, "bn")
        });
    }

    #[test]
    fn grad_embedding_with_repeats() {
        let p = params(&[("table", &[5, 3])], 9);
        check(&p, |g, p| {
            let t = g.param(p, "table")?;
            g.embedding(t, &[1, 4, 1, 0])
        });
    }

    #[test]
    fn grad_lstm() {
        let p = params(&[("x", &[4, 3]), ("wi", &[8, 3]), ("wh", &[8, 2]), ("b", &[8])], 10);
        check(&p, |g, p| {
            let (x, wi, wh, b) = (g.param(p, "x")?, g.param(p, "wi")?, g.param(p, "wh")?, g.param(p, "b")?);
            g.lstm(x, wi, wh, b)
        });
    }

    #[test]
    fn grad_sequence_shape_ops() {
        let p = params(&[("a", &[3, 2]), ("b", &[3, 4])], 11);
        check(&p, |g, p| {
            let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
            let r = g.reverse_rows(a)?;
            let c = g.concat_cols(r, b)?;
            let t = g.transpose_last2(c)?;
            let t = g.tanh(t);
            let t = g.transpose_last2(t)?;
            let m = g.mean_rows(t)?;
            let s = g.stack(&[m, m])?;
            Ok(g.sigmoid(s))
        });
    }

    #[test]
    fn grad_span_max_and_assemble() {
        let p = params(&[("x", &[2, 2, 5]), ("y", &[2, 2, 3])], 12);
        let spans = [(0, 0), (0, 2), (1, 4), (3, 4)];
        let keep = [true, true, true, false, true, false, true, true];
        let plan = [Some((0, 1)), None, Some((1, 2)), Some((0, 3)), Some((1, 0)), Some((0, 0))];
        let akeep = [true; 12];
        check(&p, |g, p| {
            let (x, y) = (g.param(p, "x")?, g.param(p, "y")?);
            let s = g.span_max(x, &spans, &keep, &[2, 2])?;
            let s = g.reshape(s, &[2, 2, 4])?;
            g.assemble(&[s, y], &plan, &akeep, &[2, 3])
        });
    }

    #[test]
    fn grad_bce() {
        let mut p = ParamSet::new();
        p.insert("s", Tensor::from_f64(&[1, 1, 2, 2], &[0.2, 0.7, 0.5, 0.9]).unwrap(), true)
            .unwrap();
        p.insert("t", Tensor::from_f64(&[1, 1, 3], &[0.1, 0.4, 0.6]).unwrap(), true)
            .unwrap();
        let labels = vec![vec![0.0, 1.0, 0.3, 0.0], vec![0.5, 0.0, 1.0]];
        let masks = vec![vec![true, true, false, true], vec![true, true, true]];
        let r = grad_check(
            &p,
            |g, p| {
                let (s, t) = (g.param(p, "s")?, g.param(p, "t")?);
                g.bce(&[s, t], &labels, &masks)
            },
            1e-6,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "{r:?}");
    }

    #[test]
    fn bce_value_and_clamp() {
        let mut g = Graph::<f64>::new();
        let half = g.variable(Tensor::full(&[2], 0.5));
        let l = g.bce(&[half], &[vec![1.0, 0.0]], &[vec![true, true]]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let sure = g.variable(Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap());
        let l = g.bce(&[sure], &[vec![1.0, 0.0]], &[vec![true, true]]).unwrap();
        assert!(g.value(l).item() < 1e-6);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(sure).unwrap().data().iter().all(|&v| v == 0.0));

        let wrong = g.variable(Tensor::from_f64(&[1], &[0.0]).unwrap());
        let l = g.bce(&[wrong], &[vec![1.0]], &[vec![true]]).unwrap();
        assert!((g.value(l).item() + 1e-7f64.ln()).abs() < 1e-9);
        assert!(g.value(l).is_finite());
    }

    #[test]
    fn batch_stats_recorded_in_training_only() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[2, 1], &[1.0, 3.0]).unwrap());
        let ga = g.input(Tensor::ones(&[1]));
        let be = g.input(Tensor::zeros(&[1]));
        let rs = RunningStats {
            mean: vec![0.0],
            var: vec![1.0],
            initialized: true,
        };
        g.batch_norm(x, ga, be, &rs, NormMode::Eval, "a").unwrap();
        assert!(g.batch_stats().is_empty());
        g.batch_norm(x, ga, be, &rs, NormMode::Train, "b").unwrap();
        assert_eq!(g.batch_stats().len(), 1);
        assert_eq!(g.batch_stats()[0].tag, "b");
        assert_eq!(g.batch_stats()[0].mean, vec![2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }
}

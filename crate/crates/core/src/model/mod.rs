//! The localization network: query and clip encoders, moment feature
//! extraction, fusion, per-scale gated convolutions and score recovery.
//!
//! Maps are channel-first `[B, C, rows, cols]` tensors, one per
//! [`MapLayout`] of the lattice geometry.

mod config;
mod schedule;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{Extractor, ModelConfig};
pub use schedule::{
    closed_form_duration_index, layer_count, layer_kernel, ConvLayerPlan, ConvSchedule, ScalePlan,
};

use crate::error::{Error, Result};
use crate::lattice::{LatticeGeometry, MapLayout, MomentCoord};
use crate::numerics::{
    bilstm_on, gated_conv_on, init_bilstm, uniform, BatchStats, ConvGeom, Graph, NormMode, ParamSet,
    RunningStats, Tensor, Var, BN_MOMENTUM,
};
use crate::scalar::Scalar;

const QUERY_LSTM: &str = "query.lstm";

/// One mini-batch of windows.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a, T> {
    /// `[B, N, d_raw]` clip features, zero beyond each window's content.
    pub clips: &'a Tensor<T>,
    /// Token ids of each query.
    pub queries: &'a [Vec<usize>],
    /// Number of real (unpadded) clips in each window.
    pub valid_clips: &'a [usize],
}

impl<T: Scalar> Batch<'_, T> {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// Per scale `[B, 1, rows, cols]` scores.
    pub scores: Vec<Var>,
    /// Per scale validity of every `(sample, cell)`, sample-major.
    pub masks: Vec<Vec<bool>>,
    /// Per scale outputs of every gated convolution layer.
    pub tan_layers: Vec<Vec<Var>>,
}

fn conv_name(j: usize) -> String {
    format!("extract.conv{j}")
}

fn bn_name(j: usize) -> String {
    format!("extract.bn{j}")
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Uniform(f64),
    Const(f64),
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    init: Init,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    geometry: LatticeGeometry,
    layouts: Vec<MapLayout>,
    schedule: Option<ConvSchedule>,
    params: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized model, seeded from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        for spec in Self::param_specs(&config)? {
            let t = match spec.init {
                Init::FanIn(f) => uniform(&spec.shape, 1.0 / (f as f64).sqrt(), rng),
                Init::Uniform(b) => uniform(&spec.shape, b, rng),
                Init::Const(c) => Tensor::full(&spec.shape, T::from_f64_lossy(c)),
            };
            params.insert(spec.name, t, spec.trainable)?;
        }
        init_bilstm(&mut params, QUERY_LSTM, config.d_s, config.hidden, config.lstm_layers, rng)?;
        Self::from_params(config, params)
    }

    /// Every trainable value zero; running statistics at mean 0, variance 1.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config)?;
        for (name, p) in m.params.iter_mut() {
            let v = if name.ends_with(".running_var") { T::one() } else { T::zero() };
            p.value.fill(v);
        }
        Ok(m)
    }

    /// Wraps existing parameters, checking names and shapes against the
    /// configuration.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let mut expected: BTreeMap<String, (Vec<usize>, bool)> = Self::param_specs(&config)?
            .into_iter()
            .map(|s| (s.name, (s.shape, s.trainable)))
            .collect();
        for l in 0..config.lstm_layers {
            let din = if l == 0 { config.d_s } else { 2 * config.hidden };
            let h = config.hidden;
            for back in [false, true] {
                let name = |part| crate::numerics::bilstm_param_name(QUERY_LSTM, l, back, part);
                expected.insert(name("w_ih"), (vec![4 * h, din], true));
                expected.insert(name("w_hh"), (vec![4 * h, h], true));
                expected.insert(name("bias"), (vec![4 * h], true));
            }
        }
        let mut problems = Vec::new();
        for (name, (shape, trainable)) in &expected {
            match params.get(name) {
                None => problems.push(format!("{name} (missing)")),
                Some(p) if p.value.shape() != shape.as_slice() => problems.push(format!(
                    "{name} (expected {shape:?}, found {:?})",
                    p.value.shape()
                )),
                Some(p) if p.trainable != *trainable => problems.push(format!("{name} (trainable flag)")),
                _ => {}
            }
        }
        for name in params.names() {
            if !expected.contains_key(name) {
                problems.push(format!("{name} (unexpected)"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::CheckpointMismatch(problems));
        }
        let geometry = config.geometry()?;
        let layouts = geometry.layouts();
        let schedule = match config.extractor {
            Extractor::Conv => Some(ConvSchedule::new(config.n, config.anchors, config.scales)?),
            Extractor::Pool => None,
        };
        Ok(Self {
            config,
            geometry,
            layouts,
            schedule,
            params,
        })
    }

    fn param_specs(c: &ModelConfig) -> Result<Vec<ParamSpec>> {
        c.validate()?;
        let mut out = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, trainable: bool, init: Init| {
            out.push(ParamSpec {
                name,
                shape,
                trainable,
                init,
            })
        };
        add("query.embed".into(), vec![c.vocab, c.d_s], true, Init::Uniform(1.0));
        add("clip.weight".into(), vec![c.d_v, c.d_raw], true, Init::FanIn(c.d_raw));
        add("clip.bias".into(), vec![c.d_v], true, Init::FanIn(c.d_raw));
        if c.extractor == Extractor::Conv {
            for j in 0..layer_count(c.anchors, c.scales) {
                let (k, _) = layer_kernel(j, c.anchors, c.scales);
                let fan = c.d_v * k;
                add(format!("{}.weight", conv_name(j)), vec![c.d_v, c.d_v, k], true, Init::FanIn(fan));
                add(format!("{}.bias", conv_name(j)), vec![c.d_v], true, Init::FanIn(fan));
                if c.batch_norm {
                    add(format!("{}.gamma", bn_name(j)), vec![c.d_v], true, Init::Const(1.0));
                    add(format!("{}.beta", bn_name(j)), vec![c.d_v], true, Init::Const(0.0));
                    add(format!("{}.running_mean", bn_name(j)), vec![c.d_v], false, Init::Const(0.0));
                    add(format!("{}.running_var", bn_name(j)), vec![c.d_v], false, Init::Const(1.0));
                }
            }
        }
        let sent = 2 * c.hidden;
        add("fuse.sent.weight".into(), vec![c.d_f, sent], true, Init::FanIn(sent));
        add("fuse.map.weight".into(), vec![c.d_f, c.d_v, 1, 1], true, Init::FanIn(c.d_v));
        if c.fusion_bias {
            add("fuse.sent.bias".into(), vec![c.d_f], true, Init::FanIn(sent));
            add("fuse.map.bias".into(), vec![c.d_f], true, Init::FanIn(c.d_v));
        }
        let stacks = if c.share_scales { 1 } else { c.scales_in_use() };
        let fan = c.d_f * c.kappa * c.kappa;
        for s in 0..stacks {
            for l in 0..c.layers {
                for part in ["feat", "gate"] {
                    let base = tan_name(c, s, l, part);
                    add(
                        format!("{base}.weight"),
                        vec![c.d_f, c.d_f, c.kappa, c.kappa],
                        true,
                        Init::FanIn(fan),
                    );
                    add(format!("{base}.bias"), vec![c.d_f], true, Init::FanIn(fan));
                }
            }
        }
        for s in 0..c.scales_in_use() {
            for h in 0..c.head_layers {
                let out_ch = if h + 1 == c.head_layers { 1 } else { c.d_f };
                let base = format!("head.s{s}.l{h}");
                add(format!("{base}.weight"), vec![out_ch, c.d_f, 1, 1], true, Init::FanIn(c.d_f));
                add(format!("{base}.bias"), vec![out_ch], true, Init::FanIn(c.d_f));
            }
        }
        Ok(out)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn geometry(&self) -> &LatticeGeometry {
        &self.geometry
    }

    pub fn layouts(&self) -> &[MapLayout] {
        &self.layouts
    }

    pub fn schedule(&self) -> Option<&ConvSchedule> {
        self.schedule.as_ref()
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    /// Validity of every `(sample, cell)` of layout `layout`.
    pub fn masks(&self, valid_clips: &[usize]) -> Vec<Vec<bool>> {
        self.layouts
            .iter()
            .map(|l| {
                valid_clips
                    .iter()
                    .flat_map(|&v| l.valid_mask_within(v))
                    .collect()
            })
            .collect()
    }

    /// Sentence feature `[2H]`: embedding lookup, then the averaged output of
    /// a stacked bidirectional LSTM.
    pub fn encode_query(&self, g: &mut Graph<T>, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Empty("query has no tokens".into()));
        }
        let table = g.param(&self.params, "query.embed")?;
        let words = g.embedding(table, tokens)?;
        bilstm_on(g, &self.params, QUERY_LSTM, self.config.lstm_layers, words)
    }

    /// Projects `[B, N, d_raw]` clip features to `[B, d_v, N]`.
    pub fn encode_clips(&self, g: &mut Graph<T>, raw: Var) -> Result<Var> {
        let s = g.shape(raw).to_vec();
        if s.len() != 3 || s[1] != self.config.n || s[2] != self.config.d_raw {
            return Err(Error::Shape(format!(
                "clip features {s:?}, expected [B, {}, {}]",
                self.config.n, self.config.d_raw
            )));
        }
        let w = g.param(&self.params, "clip.weight")?;
        let b = g.param(&self.params, "clip.bias")?;
        let y = g.linear(raw, w, Some(b))?;
        g.transpose_last2(y)
    }

    /// Max-pooled moment features, one `[B, d_v, rows, cols]` map per layout.
    pub fn extract_moments_pool(&self, g: &mut Graph<T>, clips: Var, masks: &[Vec<bool>]) -> Result<Vec<Var>> {
        let n = self.config.n;
        self.layouts
            .iter()
            .zip(masks)
            .map(|(layout, keep)| {
                let spans: Vec<(usize, usize)> = (0..layout.rows)
                    .flat_map(|r| (0..layout.cols).map(move |c| (r, c)))
                    .map(|(r, c)| {
                        let m = layout.coord(r, c);
                        if m.is_valid(n) {
                            (m.start, m.end_clip())
                        } else {
                            let a = m.start.min(n - 1);
                            (a, a)
                        }
                    })
                    .collect();
                g.span_max(clips, &spans, keep, &[layout.rows, layout.cols])
            })
            .collect()
    }

    /// Moment features from the stacked convolution schedule. In training
    /// mode batch statistics are recorded on the graph under the layer's
    /// batch-norm name.
    pub fn extract_moments_conv(
        &self,
        g: &mut Graph<T>,
        clips: Var,
        masks: &[Vec<bool>],
        mode: NormMode,
    ) -> Result<Vec<Var>> {
        let schedule = self
            .schedule
            .as_ref()
            .ok_or_else(|| Error::Config("model was built with the pooling extractor".into()))?;
        let mut outputs = Vec::new();
        let mut h = clips;
        for (j, layer) in schedule.layers().iter().enumerate() {
            if layer.outputs == 0 {
                break;
            }
            let w = g.param(&self.params, &format!("{}.weight", conv_name(j)))?;
            let b = g.param(&self.params, &format!("{}.bias", conv_name(j)))?;
            let mut y = g.conv(h, w, Some(b), ConvGeom::conv1d(layer.stride, 1, 0))?;
            if !self.config.linear_extractor {
                if self.config.batch_norm {
                    let name = bn_name(j);
                    let gamma = g.param(&self.params, &format!("{name}.gamma"))?;
                    let beta = g.param(&self.params, &format!("{name}.beta"))?;
                    let running = RunningStats {
                        mean: self.params.value(&format!("{name}.running_mean"))?.data().to_vec(),
                        var: self.params.value(&format!("{name}.running_var"))?.data().to_vec(),
                        initialized: true,
                    };
                    y = g.batch_norm(y, gamma, beta, &running, mode, &name)?;
                }
                y = g.tanh(y);
            }
            outputs.push(y);
            h = y;
        }
        self.layouts
            .iter()
            .zip(schedule.scale_plans())
            .zip(masks)
            .map(|((layout, plan), keep)| g.assemble(&outputs, plan, keep, &[layout.rows, layout.cols]))
            .collect()
    }

    /// `l2norm((w^S f^S) * (W^M F^M))` per position, zero at invalid cells.
    /// `sentences` is `[B, 2H]`.
    pub fn fuse(&self, g: &mut Graph<T>, maps: &[Var], sentences: Var, masks: &[Vec<bool>]) -> Result<Vec<Var>> {
        let ws = g.param(&self.params, "fuse.sent.weight")?;
        let wm = g.param(&self.params, "fuse.map.weight")?;
        let (bs, bm) = if self.config.fusion_bias {
            (
                Some(g.param(&self.params, "fuse.sent.bias")?),
                Some(g.param(&self.params, "fuse.map.bias")?),
            )
        } else {
            (None, None)
        };
        let sent = g.linear(sentences, ws, bs)?;
        maps.iter()
            .zip(masks)
            .map(|(&m, keep)| {
                let proj = g.conv(m, wm, bm, ConvGeom::unit())?;
                let prod = g.scale_channels(proj, sent)?;
                let norm = g.l2norm(prod)?;
                g.mask(norm, keep)
            })
            .collect()
    }

    /// Gated convolution stacks and score heads. Returns the per-scale
    /// scores and every intermediate layer output.
    pub fn tan_forward(&self, g: &mut Graph<T>, fused: &[Var], masks: &[Vec<bool>]) -> Result<(Vec<Var>, Vec<Vec<Var>>)> {
        let c = &self.config;
        let geom = ConvGeom::same(c.kappa, c.kappa);
        let mut scores = Vec::new();
        let mut layers_out = Vec::new();
        for (s, (&x, keep)) in fused.iter().zip(masks).enumerate() {
            let stack = if c.share_scales { 0 } else { s };
            let mut h = x;
            let mut outs = Vec::new();
            for l in 0..c.layers {
                let p = |g: &mut Graph<T>, part: &str, what: &str| {
                    g.param(&self.params, &format!("{}.{what}", tan_name(c, stack, l, part)))
                };
                let feat = (p(g, "feat", "weight")?, Some(p(g, "feat", "bias")?));
                let gate = (p(g, "gate", "weight")?, Some(p(g, "gate", "bias")?));
                let y = gated_conv_on(g, h, feat, gate, geom)?;
                h = g.mask(y, keep)?;
                outs.push(h);
            }
            for hl in 0..c.head_layers {
                let w = g.param(&self.params, &format!("head.s{s}.l{hl}.weight"))?;
                let b = g.param(&self.params, &format!("head.s{s}.l{hl}.bias"))?;
                let y = g.conv(h, w, Some(b), ConvGeom::unit())?;
                let y = if hl + 1 == c.head_layers { g.sigmoid(y) } else { g.tanh(y) };
                h = g.mask(y, keep)?;
            }
            scores.push(h);
            layers_out.push(outs);
        }
        Ok((scores, layers_out))
    }

    /// Full forward pass over a batch.
    pub fn forward(&self, g: &mut Graph<T>, batch: &Batch<'_, T>, mode: NormMode) -> Result<Forward> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::Empty("empty batch".into()));
        }
        if batch.valid_clips.len() != b || batch.clips.shape().first() != Some(&b) {
            return Err(Error::Shape(format!(
                "batch of {b} queries, {} valid-clip counts and clips {:?}",
                batch.valid_clips.len(),
                batch.clips.shape()
            )));
        }
        if let Some(&v) = batch.valid_clips.iter().find(|&&v| v == 0 || v > self.config.n) {
            return Err(Error::InvalidArgument(format!(
                "window with {v} real clips, expected 1..={}",
                self.config.n
            )));
        }
        let sentences = batch
            .queries
            .iter()
            .map(|q| self.encode_query(g, q))
            .collect::<Result<Vec<_>>>()?;
        let sentences = g.stack(&sentences)?;
        let raw = g.input(batch.clips.clone());
        let clips = self.encode_clips(g, raw)?;
        let masks = self.masks(batch.valid_clips);
        let maps = match self.config.extractor {
            Extractor::Pool => self.extract_moments_pool(g, clips, &masks)?,
            Extractor::Conv => self.extract_moments_conv(g, clips, &masks, mode)?,
        };
        let fused = self.fuse(g, &maps, sentences, &masks)?;
        let (scores, tan_layers) = self.tan_forward(g, &fused, &masks)?;
        Ok(Forward {
            scores,
            masks,
            tan_layers,
        })
    }

    /// Folds batch statistics recorded during a training forward pass into
    /// the running-statistic buffers.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        for s in stats {
            for (suffix, values) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let name = format!("{}.{suffix}", s.tag);
                let p = self
                    .params
                    .get_mut(&name)
                    .ok_or_else(|| Error::InvalidArgument(format!("no buffer {name}")))?;
                for (r, &v) in p.value.data_mut().iter_mut().zip(values.iter()) {
                    *r = (T::one() - m) * *r + m * v;
                }
            }
        }
        Ok(())
    }

    /// Sets the convolutional extractor to an exact linear construction in
    /// which channel `c < signal` of every moment feature is the mean of
    /// input channel `c` over the moment's clips.
    ///
    /// Channels are grouped in slots of width `signal`: slot 0 holds the
    /// window mean and slot `1 + i` the sum of the window's last `2^i` clips
    /// (or of the whole window when it is shorter). Requires
    /// `linear_extractor` and `d_v >= signal * (K + 1)`.
    pub fn set_linear_extractor(&mut self, signal: usize) -> Result<()> {
        let c = self.config.clone();
        if !c.linear_extractor {
            return Err(Error::Config("linear_extractor is off".into()));
        }
        let schedule = self
            .schedule
            .clone()
            .ok_or_else(|| Error::Config("model was built with the pooling extractor".into()))?;
        let slots = c.scales + 1;
        if signal == 0 || c.d_v < signal * slots {
            return Err(Error::Config(format!(
                "linear extractor with {signal} signal channels needs d_v >= {}",
                signal * slots
            )));
        }
        let d = c.d_v;
        let ch = |slot: usize, k: usize| slot * signal + k;
        let tail_len = |slot: usize| 1usize << (slot - 1);
        let mut prev_duration = 0usize;
        for (j, layer) in schedule.layers().iter().enumerate() {
            let k = layer.kernel;
            let mut w = vec![0.0f64; d * d * k];
            let mut set = |o: usize, i: usize, t: usize, v: f64| w[(o * d + i) * k + t] += v;
            if j == 0 {
                for sig in 0..signal {
                    for slot in 0..slots {
                        set(ch(slot, sig), sig, 0, 1.0);
                    }
                }
            } else {
                let din = prev_duration as f64;
                let dout = layer.duration as f64;
                // extension length appended to the first input window
                let ext = layer.duration - prev_duration;
                let last = k - 1;
                let ext_slot = 1 + ext.trailing_zeros() as usize;
                if !ext.is_power_of_two() || ext_slot >= slots || ext > prev_duration {
                    return Err(Error::InvalidArgument(format!(
                        "layer {j} extension of {ext} clips has no tail channel"
                    )));
                }
                for sig in 0..signal {
                    // new total = din * mean(W0) + tail_ext(W_last)
                    set(ch(0, sig), ch(0, sig), 0, din / dout);
                    set(ch(0, sig), ch(ext_slot, sig), last, 1.0 / dout);
                    for slot in 1..slots {
                        let m = tail_len(slot);
                        if m <= prev_duration {
                            set(ch(slot, sig), ch(slot, sig), last, 1.0);
                        } else if m >= layer.duration {
                            set(ch(slot, sig), ch(0, sig), 0, din);
                            set(ch(slot, sig), ch(ext_slot, sig), last, 1.0);
                        } else {
                            return Err(Error::InvalidArgument(format!(
                                "layer {j}: tail of {m} clips straddles the extension"
                            )));
                        }
                    }
                }
            }
            let wt = Tensor::from_f64(&[d, d, k], &w)?;
            self.params.set_value(&format!("{}.weight", conv_name(j)), wt)?;
            self.params.set_value(&format!("{}.bias", conv_name(j)), Tensor::zeros(&[d]))?;
            prev_duration = layer.duration;
        }
        Ok(())
    }
}

fn tan_name(c: &ModelConfig, stack: usize, layer: usize, part: &str) -> String {
    if c.share_scales {
        format!("tan.shared.l{layer}.{part}")
    } else {
        format!("tan.s{stack}.l{layer}.{part}")
    }
}

impl ModelConfig {
    /// Number of maps the geometry produces.
    pub fn scales_in_use(&self) -> usize {
        match self.map {
            crate::lattice::MapKind::SparseMulti => self.scales,
            _ => 1,
        }
    }
}

/// A candidate's best score across the maps that hold it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveredScore<T> {
    pub coord: MomentCoord,
    /// Lowest scale among those attaining the maximum.
    pub scale: usize,
    pub score: T,
}

/// Flattens per-layout score maps of one sample into a list of distinct
/// candidates, keeping the maximum where several maps hold the same moment.
/// Cells invalid for a window of `valid_clips` real clips are skipped.
/// Output is sorted by coordinate.
pub fn recover_scores<T: Scalar>(
    maps: &[&[T]],
    layouts: &[MapLayout],
    valid_clips: usize,
) -> Result<Vec<RecoveredScore<T>>> {
    if maps.len() != layouts.len() {
        return Err(Error::Shape(format!(
            "{} score maps for {} layouts",
            maps.len(),
            layouts.len()
        )));
    }
    let mut best: BTreeMap<MomentCoord, RecoveredScore<T>> = BTreeMap::new();
    for (map, layout) in maps.iter().zip(layouts) {
        if map.len() != layout.cells() {
            return Err(Error::Shape(format!(
                "score map of {} cells for a {}x{} layout",
                map.len(),
                layout.rows,
                layout.cols
            )));
        }
        for r in 0..layout.rows {
            for c in 0..layout.cols {
                if !layout.is_valid_within(r, c, valid_clips) {
                    continue;
                }
                let coord = layout.coord(r, c);
                let score = map[r * layout.cols + c];
                let cand = RecoveredScore {
                    coord,
                    scale: layout.scale,
                    score,
                };
                best.entry(coord)
                    .and_modify(|e| {
                        if score > e.score {
                            *e = cand;
                        }
                    })
                    .or_insert(cand);
            }
        }
    }
    Ok(best.into_values().collect())
}

/// Per-sample slices of a `[B, 1, rows, cols]` score tensor.
pub fn sample_scores<T: Scalar>(scores: &Tensor<T>, sample: usize) -> &[T] {
    let per = scores.len() / scores.shape()[0];
    &scores.data()[sample * per..(sample + 1) * per]
}

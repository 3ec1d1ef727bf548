//! Supervision, loss, Adam and the training loop.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricSpec};
use crate::io::{AnnotationRecord, FeatureMatrix, SynthDataset, Vocabulary};
use crate::lattice::{coord_to_interval, temporal_iou, ClipGrid, MapLayout, TimeInterval};
use crate::model::{Batch, Model};
use crate::numerics::{Graph, NormMode, ParamSet, Tensor, Var};
use crate::scalar::Scalar;

/// Label threshold: candidates at or below this IoU are negatives.
pub const LABEL_THRESHOLD: f64 = 0.5;
/// Minimum IoU between a window-clipped target and the original.
pub const MIN_CLIPPED_IOU: f64 = 0.5;
/// Offset mixed into the model seed for the data-order stream.
const DATA_SEED_SALT: u64 = 0x5eed_da7a;

/// `0` for `o <= 0.5`, else `2o - 1`.
pub fn scaled_iou_label(o: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&o) {
        return Err(Error::InvalidArgument(format!("IoU {o} outside [0, 1]")));
    }
    Ok(if o <= LABEL_THRESHOLD { 0.0 } else { 2.0 * o - 1.0 })
}

/// Raw IoU and scaled label of every cell, one vector per layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub iou: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
}

/// Labels for a window of `grid.num_clips()` clips of which the first
/// `valid_clips` are real. `target` is window-relative.
pub fn build_labels(layouts: &[MapLayout], grid: &ClipGrid, target: &TimeInterval, valid_clips: usize) -> Result<LabelMap> {
    let limit = valid_clips as f64 * grid.clip_seconds();
    if target.clip_to(0.0, limit).is_none() {
        return Err(Error::InvalidArgument(format!(
            "target [{}, {}) lies outside the window [0, {limit})",
            target.start(),
            target.end()
        )));
    }
    let mut iou = Vec::with_capacity(layouts.len());
    let mut labels = Vec::with_capacity(layouts.len());
    for layout in layouts {
        let mut o = vec![0.0; layout.cells()];
        let mut y = vec![0.0; layout.cells()];
        for r in 0..layout.rows {
            for c in 0..layout.cols {
                if !layout.is_valid_within(r, c, valid_clips) {
                    continue;
                }
                let i = r * layout.cols + c;
                o[i] = temporal_iou(&coord_to_interval(layout.coord(r, c), grid)?, target);
                y[i] = scaled_iou_label(o[i])?;
            }
        }
        iou.push(o);
        labels.push(y);
    }
    Ok(LabelMap { iou, labels })
}

/// Mean binary cross-entropy between per-scale `[B, 1, rows, cols]` scores
/// and one label map per sample, over cells set in `masks`.
pub fn bce_loss<T: Scalar>(g: &mut Graph<T>, scores: &[Var], labels: &[LabelMap], masks: &[Vec<bool>]) -> Result<Var> {
    let per_scale: Vec<Vec<T>> = (0..scores.len())
        .map(|k| {
            labels
                .iter()
                .flat_map(|l| l.labels.get(k).map(|v| v.as_slice()).unwrap_or(&[]))
                .map(|&y| T::from_f64_lossy(y))
                .collect()
        })
        .collect();
    g.bce(scores, &per_scale, masks)
}

/// Clips `[start, start + valid_clips)` of a video, zero padded to `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainWindow {
    pub start: usize,
    pub valid_clips: usize,
    pub padded: usize,
}

/// Uniform window start in `0..=max(0, total - n)`. Videos shorter than the
/// window are taken whole and padded.
pub fn sample_window<R: Rng + ?Sized>(total_clips: usize, n: usize, rng: &mut R) -> TrainWindow {
    if total_clips <= n {
        return TrainWindow {
            start: 0,
            valid_clips: total_clips,
            padded: n - total_clips,
        };
    }
    TrainWindow {
        start: rng.random_range(0..=total_clips - n),
        valid_clips: n,
        padded: 0,
    }
}

impl TrainWindow {
    /// The target clipped to the window and made window-relative, or `None`
    /// when too little of it falls inside.
    pub fn target(&self, target: &TimeInterval, clip_seconds: f64) -> Option<TimeInterval> {
        let lo = self.start as f64 * clip_seconds;
        let hi = (self.start + self.valid_clips) as f64 * clip_seconds;
        let clipped = target.clip_to(lo, hi)?;
        if temporal_iou(&clipped, target) < MIN_CLIPPED_IOU {
            return None;
        }
        clipped.shifted(lo).ok()
    }
}

/// Stacks windows `(features, start, valid)` into a `[B, n, dim]` tensor.
pub fn window_tensor<T: Scalar>(windows: &[(&FeatureMatrix, usize, usize)], n: usize, dim: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); windows.len() * n * dim];
    for (b, (f, start, valid)) in windows.iter().enumerate() {
        if f.dim() != dim {
            return Err(Error::Shape(format!("features of width {}, model expects {dim}", f.dim())));
        }
        if *valid > n || start + valid > f.num_clips() {
            return Err(Error::Shape(format!(
                "window [{start}, {}) of a {}-clip video into {n} slots",
                start + valid,
                f.num_clips()
            )));
        }
        let src = &f.values()[start * dim..(start + valid) * dim];
        let dst = &mut data[b * n * dim..b * n * dim + valid * dim];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = T::from_f64_lossy(f64::from(s));
        }
    }
    Tensor::new(vec![windows.len(), n, dim], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Index into [`Dataset::videos`].
    pub video: usize,
    pub query: Vec<usize>,
    /// Seconds from the start of the video.
    pub target: TimeInterval,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub videos: Vec<FeatureMatrix>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn from_synth(d: &SynthDataset) -> Result<Self> {
        let samples = d
            .records
            .iter()
            .zip(&d.queries)
            .enumerate()
            .map(|(v, (r, q))| {
                Ok(Sample {
                    video: v,
                    query: q.clone(),
                    target: r.target()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            videos: d.features.clone(),
            samples,
        })
    }

    /// Joins annotation records with their features. Targets reaching past
    /// the last clip are cut at the end of the features.
    pub fn from_records(
        records: &[AnnotationRecord],
        vocab: &Vocabulary,
        mut load: impl FnMut(&str) -> Result<FeatureMatrix>,
    ) -> Result<Self> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut data = Dataset::default();
        for r in records {
            let video = match index.get(r.video_id.as_str()) {
                Some(&v) => v,
                None => {
                    data.videos.push(load(&r.video_id)?);
                    index.insert(&r.video_id, data.videos.len() - 1);
                    data.videos.len() - 1
                }
            };
            let end = data.videos[video].grid().duration_s();
            let target = r.target()?.clip_to(0.0, end).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "target of {:?} starts after the last feature clip of {}",
                    r.query, r.video_id
                ))
            })?;
            data.samples.push(Sample {
                video,
                query: vocab.encode(&r.query)?,
                target,
            });
        }
        Ok(data)
    }

    /// First `len - holdout` samples and the rest.
    pub fn split(&self, holdout: usize) -> (Dataset, Dataset) {
        let cut = self.samples.len().saturating_sub(holdout);
        let part = |s: &[Sample]| Dataset {
            videos: self.videos.clone(),
            samples: s.to_vec(),
        };
        (part(&self.samples[..cut]), part(&self.samples[cut..]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter from its
/// gradient buffer. Nothing changes if any gradient is non-finite.
pub fn adam_step<T: Scalar>(params: &mut ParamSet<T>, state: &mut OptimState<T>) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| p.trainable && !p.grad.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(c.beta1);
    let b2 = T::from_f64_lossy(c.beta2);
    let corr1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
    let corr2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
    let lr = T::from_f64_lossy(c.lr);
    let eps = T::from_f64_lossy(c.eps);
    for (name, p) in params.iter_mut().filter(|(_, p)| p.trainable) {
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.value.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.value.shape()));
        let values = p.value.data_mut();
        for (((x, &g), mi), vi) in values.iter_mut().zip(p.grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let mh = *mi / corr1;
            let vh = *vi / corr2;
            *x -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// `("rank1@0.7", percent)` for each validation metric.
    pub ranks: Vec<(String, f64)>,
    pub wallclock_s: f64,
}

impl EpochLog {
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert("epoch".into(), self.epoch.into());
        map.insert("loss".into(), self.loss.into());
        for (k, v) in &self.ranks {
            map.insert(k.clone(), (*v).into());
        }
        map.insert("wallclock_s".into(), self.wallclock_s.into());
        serde_json::Value::Object(map)
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Evaluated after every epoch when present.
    pub validation: Option<&'a Dataset>,
    pub metrics: MetricSpec,
    /// Receives one JSON object per epoch.
    pub log: Option<&'a mut dyn Write>,
    /// Overrides the Adam settings derived from the model config.
    pub adam: Option<AdamConfig>,
}

/// Runs `config.epochs` epochs of shuffled mini-batches over `data`,
/// updating `model` in place.
pub fn train<T: Scalar>(model: &mut Model<T>, data: &Dataset, mut options: TrainOptions<'_>) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(Error::Empty("training set has no samples".into()));
    }
    let c = model.config().clone();
    let window_grid = |f: &FeatureMatrix| ClipGrid::new(c.n, f.grid().clip_seconds());
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ DATA_SEED_SALT);
    let mut optim = OptimState::new(options.adam.unwrap_or(AdamConfig::with_lr(c.lr)));
    let started = Instant::now();
    let mut logs = Vec::with_capacity(c.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=c.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut counted) = (0.0f64, 0usize);
        for chunk in order.chunks(c.batch) {
            let mut windows = Vec::new();
            let mut queries = Vec::new();
            let mut labels = Vec::new();
            for &i in chunk {
                let s = &data.samples[i];
                let f = &data.videos[s.video];
                let w = sample_window(f.num_clips(), c.n, &mut rng);
                let Some(target) = w.target(&s.target, f.grid().clip_seconds()) else {
                    continue;
                };
                labels.push(build_labels(model.layouts(), &window_grid(f)?, &target, w.valid_clips)?);
                windows.push((f, w.start, w.valid_clips));
                queries.push(s.query.clone());
            }
            if windows.is_empty() {
                continue;
            }
            let clips: Tensor<T> = window_tensor(&windows, c.n, c.d_raw)?;
            let valid: Vec<usize> = windows.iter().map(|w| w.2).collect();
            let mut g = Graph::new();
            let fwd = model.forward(
                &mut g,
                &Batch {
                    clips: &clips,
                    queries: &queries,
                    valid_clips: &valid,
                },
                NormMode::Train,
            )?;
            let loss = bce_loss(&mut g, &fwd.scores, &labels, &fwd.masks)?;
            let value = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            let grads = g.backward(loss)?;
            let params = model.params_mut();
            params.zero_grad();
            grads.accumulate_into(params)?;
            adam_step(params, &mut optim).map_err(|_| Error::Diverged { epoch, loss: value })?;
            model.apply_batch_stats(g.batch_stats())?;
            total += value * windows.len() as f64;
            counted += windows.len();
        }
        if counted == 0 {
            return Err(Error::Empty(format!("epoch {epoch} drew no usable windows")));
        }
        let ranks = match options.validation {
            Some(v) => evaluate(model, v, &options.metrics)?
                .rows
                .iter()
                .map(|r| (format!("rank{}@{}", r.n, r.m), r.percent))
                .collect(),
            None => Vec::new(),
        };
        let entry = EpochLog {
            epoch,
            loss: total / counted as f64,
            ranks,
            wallclock_s: started.elapsed().as_secs_f64(),
        };
        if let Some(w) = options.log.as_mut() {
            writeln!(w, "{}", entry.to_json())?;
        }
        logs.push(entry);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests;

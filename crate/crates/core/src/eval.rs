//! Non-maximum suppression, Rank n@m metrics and single-query localization.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::FeatureMatrix;
use crate::lattice::{coord_to_interval, temporal_iou, ClipGrid, MomentCoord, TimeInterval};
use crate::model::{recover_scores, sample_scores, Batch, Model};
use crate::numerics::{Graph, NormMode, Tensor};
use crate::scalar::Scalar;
use crate::training::{window_tensor, Dataset};

/// Samples per forward pass when scoring a dataset.
const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoredMoment {
    pub interval: TimeInterval,
    pub score: f64,
    pub coord: MomentCoord,
    pub scale: usize,
}

/// Top-n cutoffs and IoU thresholds of a Rank n@m table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSpec {
    pub n: Vec<usize>,
    pub m: Vec<f64>,
}

impl MetricSpec {
    pub fn new(n: Vec<usize>, m: Vec<f64>) -> Result<Self> {
        if n.is_empty() || m.is_empty() {
            return Err(Error::InvalidArgument("metric spec needs at least one n and one m".into()));
        }
        if n.contains(&0) {
            return Err(Error::InvalidArgument("rank cutoffs must be at least 1".into()));
        }
        if let Some(bad) = m.iter().find(|&&m| !(m > 0.0 && m < 1.0)) {
            return Err(Error::InvalidArgument(format!("IoU threshold {bad} outside (0, 1)")));
        }
        Ok(Self { n, m })
    }
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self {
            n: vec![1, 5],
            m: vec![0.3, 0.5, 0.7],
        }
    }
}

fn rank_order(a: &(usize, &ScoredMoment), b: &(usize, &ScoredMoment)) -> Ordering {
    b.1.score
        .total_cmp(&a.1.score)
        .then(a.1.interval.start().total_cmp(&b.1.interval.start()))
        .then(a.1.interval.length().total_cmp(&b.1.interval.length()))
        .then(a.0.cmp(&b.0))
}

/// Sorts by score, highest first; ties go to the earlier start, then the
/// shorter moment, then the earlier input position.
pub fn rank_moments(moments: &[ScoredMoment]) -> Vec<ScoredMoment> {
    let mut order: Vec<(usize, &ScoredMoment)> = moments.iter().enumerate().collect();
    order.sort_by(rank_order);
    order.into_iter().map(|(_, m)| *m).collect()
}

/// Greedy suppression: walking in [`rank_moments`] order, a moment is kept
/// when its IoU with every moment kept so far is at most `threshold`.
pub fn nms(moments: &[ScoredMoment], threshold: f64) -> Result<Vec<ScoredMoment>> {
    if let Some(m) = moments.iter().find(|m| !m.score.is_finite()) {
        return Err(Error::NonFinite(format!("score of moment {:?}", m.coord)));
    }
    let mut kept: Vec<ScoredMoment> = Vec::new();
    for m in rank_moments(moments) {
        if kept.iter().all(|k| temporal_iou(&k.interval, &m.interval) <= threshold) {
            kept.push(m);
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankRow {
    pub n: usize,
    pub m: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankTable {
    pub queries: usize,
    pub rows: Vec<RankRow>,
}

impl RankTable {
    pub fn get(&self, n: usize, m: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.n == n && r.m == m).map(|r| r.percent)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,m,percentage\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.2}", r.n, r.m, r.percent);
        }
        s
    }

    /// `{"queries": .., "rank1@0.5": .., ...}`
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert("queries".into(), self.queries.into());
        for r in &self.rows {
            map.insert(format!("rank{}@{}", r.n, r.m), r.percent.into());
        }
        serde_json::Value::Object(map)
    }
}

/// Percentage of queries with a prediction of IoU strictly above `m` among
/// their first `n` predictions. An empty prediction list is a miss.
pub fn rank_at(predictions: &[Vec<ScoredMoment>], targets: &[TimeInterval], spec: &MetricSpec) -> Result<RankTable> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} prediction lists for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Empty("no queries to evaluate".into()));
    }
    let mut rows = Vec::new();
    for &n in &spec.n {
        for &m in &spec.m {
            let hits = predictions
                .iter()
                .zip(targets)
                .filter(|(p, t)| p.iter().take(n).any(|x| temporal_iou(&x.interval, t) > m))
                .count();
            rows.push(RankRow {
                n,
                m,
                percent: 100.0 * hits as f64 / targets.len() as f64,
            });
        }
    }
    Ok(RankTable {
        queries: targets.len(),
        rows,
    })
}

/// Every candidate of each query with its recovered score, in coordinate
/// order. Videos must fit in one window.
pub fn score_candidates<T: Scalar>(
    model: &Model<T>,
    items: &[(&FeatureMatrix, &[usize])],
) -> Result<Vec<Vec<ScoredMoment>>> {
    let c = model.config();
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(EVAL_BATCH) {
        for (f, _) in chunk {
            if f.num_clips() > c.n {
                return Err(Error::InvalidArgument(format!(
                    "video of {} clips exceeds the {}-clip window",
                    f.num_clips(),
                    c.n
                )));
            }
        }
        let windows: Vec<(&FeatureMatrix, usize, usize)> = chunk.iter().map(|(f, _)| (*f, 0, f.num_clips())).collect();
        let clips: Tensor<T> = window_tensor(&windows, c.n, c.d_raw)?;
        let queries: Vec<Vec<usize>> = chunk.iter().map(|(_, q)| q.to_vec()).collect();
        let valid: Vec<usize> = chunk.iter().map(|(f, _)| f.num_clips()).collect();
        let mut g = Graph::new();
        let fwd = model.forward(
            &mut g,
            &Batch {
                clips: &clips,
                queries: &queries,
                valid_clips: &valid,
            },
            NormMode::Eval,
        )?;
        for (s, (f, _)) in chunk.iter().enumerate() {
            let maps: Vec<&[T]> = fwd.scores.iter().map(|&v| sample_scores(g.value(v), s)).collect();
            let window = ClipGrid::new(c.n, f.grid().clip_seconds())?;
            let mut moments = Vec::new();
            for r in recover_scores(&maps, model.layouts(), valid[s])? {
                let score = r.score.to_f64().unwrap_or(f64::NAN);
                if !score.is_finite() {
                    return Err(Error::NonFinite("predicted score".into()));
                }
                moments.push(ScoredMoment {
                    interval: coord_to_interval(r.coord, &window)?,
                    score,
                    coord: r.coord,
                    scale: r.scale,
                });
            }
            out.push(moments);
        }
    }
    Ok(out)
}

/// NMS at the model's threshold, cut to `top_n`.
pub fn localize<T: Scalar>(
    model: &Model<T>,
    features: &FeatureMatrix,
    query: &[usize],
    top_n: usize,
) -> Result<Vec<ScoredMoment>> {
    let all = score_candidates(model, &[(features, query)])?.pop().unwrap_or_default();
    let mut kept = nms(&all, model.config().nms_iou)?;
    kept.truncate(top_n);
    Ok(kept)
}

/// Scores every sample of `data` and returns the kept list of each query.
pub fn predict_dataset<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<Vec<Vec<ScoredMoment>>> {
    let items: Vec<(&FeatureMatrix, &[usize])> = data
        .samples
        .iter()
        .map(|s| (&data.videos[s.video], s.query.as_slice()))
        .collect();
    score_candidates(model, &items)?
        .iter()
        .map(|m| nms(m, model.config().nms_iou))
        .collect()
}

pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, spec: &MetricSpec) -> Result<RankTable> {
    let preds = predict_dataset(model, data)?;
    let targets: Vec<TimeInterval> = data.samples.iter().map(|s| s.target).collect();
    rank_at(&preds, &targets, spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sm(start: f64, end: f64, score: f64) -> ScoredMoment {
        ScoredMoment {
            interval: TimeInterval::new(start, end).unwrap(),
            score,
            coord: MomentCoord::new(start as usize, (end - start) as usize - 1),
            scale: 0,
        }
    }

    #[test]
    fn nms_examples() {
        assert_eq!(nms(&[sm(0.0, 2.0, 0.3)], 0.49).unwrap().len(), 1);
        let kept = nms(&[sm(0.0, 4.0, 0.8), sm(0.0, 4.0, 0.9)], 0.49).unwrap();
        assert_eq!(kept, vec![sm(0.0, 4.0, 0.9)]);
        let kept = nms(&[sm(0.0, 2.0, 0.4), sm(5.0, 6.0, 0.7)], 0.49).unwrap();
        assert_eq!(kept, vec![sm(5.0, 6.0, 0.7), sm(0.0, 2.0, 0.4)]);
        assert!(nms(&[sm(0.0, 1.0, f64::NAN)], 0.49).is_err());
    }

    #[test]
    fn nms_boundary_iou_is_kept() {
        // IoU equal to the threshold survives
        let kept = nms(&[sm(0.0, 2.0, 0.9), sm(1.0, 3.0, 0.8)], 1.0 / 3.0).unwrap();
        assert_eq!(kept.len(), 2);
        let kept = nms(&[sm(0.0, 2.0, 0.9), sm(1.0, 3.0, 0.8)], 0.3).unwrap();
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn ties_break_by_start_then_length() {
        let input = [sm(4.0, 6.0, 0.5), sm(1.0, 5.0, 0.5), sm(1.0, 3.0, 0.5)];
        let ranked = rank_moments(&input);
        assert_eq!(ranked, vec![sm(1.0, 3.0, 0.5), sm(1.0, 5.0, 0.5), sm(4.0, 6.0, 0.5)]);
    }

    #[test]
    fn rank_examples() {
        let t = TimeInterval::new(10.0, 20.0).unwrap();
        let spec = MetricSpec::new(vec![1, 5], vec![0.5, 0.7]).unwrap();
        let perfect = rank_at(&[vec![sm(10.0, 20.0, 0.9)]], &[t], &spec).unwrap();
        assert!(perfect.rows.iter().all(|r| r.percent == 100.0));

        let q1 = vec![sm(10.0, 20.0, 0.9)];
        let q2 = vec![sm(0.0, 2.0, 0.9), sm(30.0, 32.0, 0.8), sm(10.0, 20.0, 0.7)];
        let table = rank_at(&[q1, q2], &[t, t], &spec).unwrap();
        assert_eq!(table.get(1, 0.7), Some(50.0));
        assert_eq!(table.get(5, 0.7), Some(100.0));
        assert!(table.to_csv().starts_with("n,m,percentage\n1,0.5,50.00\n"));
        assert_eq!(table.to_json()["rank5@0.7"], 100.0);
    }

    #[test]
    fn rank_threshold_is_strict_and_empty_is_miss() {
        let t = TimeInterval::new(0.0, 4.0).unwrap();
        // IoU exactly 0.5
        let half = vec![sm(0.0, 2.0, 0.9)];
        let spec = MetricSpec::new(vec![1], vec![0.5]).unwrap();
        assert_eq!(rank_at(&[half], &[t], &spec).unwrap().rows[0].percent, 0.0);
        assert_eq!(rank_at(&[vec![]], &[t], &spec).unwrap().rows[0].percent, 0.0);
        assert!(rank_at(&[], &[], &spec).is_err());
        assert!(MetricSpec::new(vec![0], vec![0.5]).is_err());
        assert!(MetricSpec::new(vec![1], vec![1.0]).is_err());
    }
}

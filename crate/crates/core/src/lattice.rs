//! Moment coordinates, candidate lattices and their geometry.
//!
//! A moment is addressed by `(start, dur)` where `start` is the index of its
//! first clip and `dur + 1` is its length in clips. Three lattices are
//! supported:
//!
//! * dense single-scale: every moment that fits in the video;
//! * sparse single-scale: moments whose endpoints are aligned to a stride
//!   that doubles as moments grow beyond `A` clips;
//! * sparse multi-scale: `K` maps, the `k`-th holding moments whose start is
//!   a multiple of `2^k` and whose length is `2^k * j` for `1 <= j <= A`.
//!
//! Every lattice is also described as a set of rectangular [`MapLayout`]s,
//! which is how the model stores features and scores.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipGrid {
    num_clips: usize,
    clip_seconds: f64,
    frames_per_clip: u32,
}

impl ClipGrid {
    pub fn new(num_clips: usize, clip_seconds: f64) -> Result<Self> {
        Self::with_frames(num_clips, clip_seconds, 0)
    }

    /// `frames_per_clip` is carried as metadata only.
    pub fn with_frames(num_clips: usize, clip_seconds: f64, frames_per_clip: u32) -> Result<Self> {
        if num_clips == 0 {
            return Err(Error::InvalidArgument("a clip grid needs at least one clip".into()));
        }
        if !(clip_seconds.is_finite() && clip_seconds > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "clip duration must be positive, got {clip_seconds}"
            )));
        }
        Ok(Self {
            num_clips,
            clip_seconds,
            frames_per_clip,
        })
    }

    pub fn num_clips(&self) -> usize {
        self.num_clips
    }

    pub fn clip_seconds(&self) -> f64 {
        self.clip_seconds
    }

    pub fn frames_per_clip(&self) -> u32 {
        self.frames_per_clip
    }

    pub fn duration_s(&self) -> f64 {
        self.num_clips as f64 * self.clip_seconds
    }
}

/// A candidate moment: first clip `start`, length `dur + 1` clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub struct MomentCoord {
    pub start: usize,
    pub dur: usize,
}

impl MomentCoord {
    pub const fn new(start: usize, dur: usize) -> Self {
        Self { start, dur }
    }

    /// Index of the last clip covered.
    pub fn end_clip(&self) -> usize {
        self.start + self.dur
    }

    pub fn len_clips(&self) -> usize {
        self.dur + 1
    }

    /// The validity triangle: the moment fits inside `n` clips.
    pub fn is_valid(&self, n: usize) -> bool {
        self.start + self.dur < n
    }
}

/// Half-open interval `[start, end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TimeInterval {
    start: f64,
    end: f64,
}

impl TimeInterval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || start >= end {
            return Err(Error::InvalidArgument(format!(
                "interval [{start}, {end}) must satisfy 0 <= start < end"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    /// Intersection with `[lo, hi)`, or `None` when they do not overlap.
    pub fn clip_to(&self, lo: f64, hi: f64) -> Option<TimeInterval> {
        let s = self.start.max(lo);
        let e = self.end.min(hi);
        (s < e).then_some(TimeInterval { start: s, end: e })
    }

    /// Shifts the interval left by `offset` seconds.
    pub fn shifted(&self, offset: f64) -> Result<TimeInterval> {
        TimeInterval::new(self.start - offset, self.end - offset)
    }
}

pub fn coord_to_interval(coord: MomentCoord, grid: &ClipGrid) -> Result<TimeInterval> {
    if !coord.is_valid(grid.num_clips) {
        return Err(Error::InvalidCoord {
            start: coord.start,
            dur: coord.dur,
            n: grid.num_clips,
        });
    }
    let tau = grid.clip_seconds;
    Ok(TimeInterval {
        start: coord.start as f64 * tau,
        end: (coord.start + coord.dur + 1) as f64 * tau,
    })
}

/// Temporal intersection over union.
pub fn temporal_iou(x: &TimeInterval, y: &TimeInterval) -> f64 {
    let inter = (x.end.min(y.end) - x.start.max(y.start)).max(0.0);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = x.end.max(y.end) - x.start.min(y.start);
    // Overlapping intervals: the hull equals the union.
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum MapKind {
    #[serde(rename = "dense")]
    DenseSingle,
    #[serde(rename = "sparse")]
    SparseSingle,
    #[serde(rename = "multi")]
    SparseMulti,
}

impl MapKind {
    pub fn name(self) -> &'static str {
        match self {
            MapKind::DenseSingle => "dense",
            MapKind::SparseSingle => "sparse",
            MapKind::SparseMulti => "multi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dense" => Some(MapKind::DenseSingle),
            "sparse" => Some(MapKind::SparseSingle),
            "multi" => Some(MapKind::SparseMulti),
            _ => None,
        }
    }
}

/// Sampling scheme over a window of `n` clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatticeGeometry {
    pub kind: MapKind,
    pub n: usize,
    pub anchors: usize,
    pub scales: usize,
}

impl LatticeGeometry {
    pub fn dense(n: usize) -> Result<Self> {
        Self::new(MapKind::DenseSingle, n, 1, 1)
    }

    pub fn sparse_single(n: usize, anchors: usize) -> Result<Self> {
        Self::new(MapKind::SparseSingle, n, anchors, 1)
    }

    pub fn multiscale(n: usize, anchors: usize, scales: usize) -> Result<Self> {
        Self::new(MapKind::SparseMulti, n, anchors, scales)
    }

    pub fn new(kind: MapKind, n: usize, anchors: usize, scales: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("lattice needs at least one clip".into()));
        }
        if anchors == 0 || scales == 0 {
            return Err(Error::InvalidArgument(format!(
                "anchors and scales must be >= 1 (got A={anchors}, K={scales})"
            )));
        }
        if scales > 30 {
            return Err(Error::InvalidArgument(format!("too many scales: {scales}")));
        }
        Ok(Self {
            kind,
            n,
            anchors,
            scales,
        })
    }

    /// Same scheme over a different number of clips.
    pub fn with_n(&self, n: usize) -> Result<Self> {
        Self::new(self.kind, n, self.anchors, self.scales)
    }

    pub fn layouts(&self) -> Vec<MapLayout> {
        match self.kind {
            MapKind::DenseSingle => vec![MapLayout::square(self.n, None)],
            MapKind::SparseSingle => vec![MapLayout::square(self.n, Some(self.anchors))],
            MapKind::SparseMulti => (0..self.scales)
                .map(|k| MapLayout::scale(self.n, self.anchors, k))
                .collect(),
        }
    }

    pub fn candidates(&self) -> CandidateSet {
        CandidateSet::from_layouts(&self.layouts())
    }
}

/// Rectangular storage for one map.
///
/// Cell `(row, col)` holds the moment starting at clip `row * start_step`
/// that spans `(col + 1) * dur_step` clips. A cell is valid when that moment
/// fits in the window (and, for the sparse single-scale map, passes the
/// sampling predicate).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapLayout {
    pub scale: usize,
    pub rows: usize,
    pub cols: usize,
    pub start_step: usize,
    pub dur_step: usize,
    pub n: usize,
    sparse_anchors: Option<usize>,
}

impl MapLayout {
    fn square(n: usize, sparse_anchors: Option<usize>) -> Self {
        Self {
            scale: 0,
            rows: n,
            cols: n,
            start_step: 1,
            dur_step: 1,
            n,
            sparse_anchors,
        }
    }

    fn scale(n: usize, anchors: usize, k: usize) -> Self {
        let step = 1usize << k;
        Self {
            scale: k,
            rows: n.div_ceil(step),
            cols: anchors,
            start_step: step,
            dur_step: step,
            n,
            sparse_anchors: None,
        }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn coord(&self, row: usize, col: usize) -> MomentCoord {
        MomentCoord::new(row * self.start_step, (col + 1) * self.dur_step - 1)
    }

    /// Inverse of [`MapLayout::coord`] for coordinates on this map's grid.
    pub fn position(&self, coord: MomentCoord) -> Option<(usize, usize)> {
        if coord.start % self.start_step != 0 || (coord.dur + 1) % self.dur_step != 0 {
            return None;
        }
        let row = coord.start / self.start_step;
        let col = (coord.dur + 1) / self.dur_step - 1;
        (row < self.rows && col < self.cols).then_some((row, col))
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.is_valid_within(row, col, self.n)
    }

    /// Validity when only the first `limit` clips hold real content.
    pub fn is_valid_within(&self, row: usize, col: usize, limit: usize) -> bool {
        let c = self.coord(row, col);
        if !c.is_valid(limit.min(self.n)) {
            return false;
        }
        match self.sparse_anchors {
            Some(a) => sparse_stride(c.len_clips(), a)
                .map(|s| c.start % s == 0 && c.end_clip() % s == 0)
                .unwrap_or(false),
            None => true,
        }
    }

    /// Row-major validity flags.
    pub fn valid_mask(&self) -> Vec<bool> {
        self.valid_mask_within(self.n)
    }

    pub fn valid_mask_within(&self, limit: usize) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.cells());
        for r in 0..self.rows {
            for c in 0..self.cols {
                mask.push(self.is_valid_within(r, c, limit));
            }
        }
        mask
    }

    /// Valid coordinates in row-major order.
    pub fn valid_coords(&self) -> Vec<MomentCoord> {
        let mut out = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.is_valid(r, c) {
                    out.push(self.coord(r, c));
                }
            }
        }
        out
    }
}

/// Candidate moments grouped by scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    scales: Vec<Vec<MomentCoord>>,
    deduplicated: bool,
}

impl CandidateSet {
    fn from_layouts(layouts: &[MapLayout]) -> Self {
        Self {
            scales: layouts.iter().map(MapLayout::valid_coords).collect(),
            deduplicated: false,
        }
    }

    pub fn per_scale(&self) -> &[Vec<MomentCoord>] {
        &self.scales
    }

    pub fn is_deduplicated(&self) -> bool {
        self.deduplicated
    }

    /// Total entries summed over scales.
    pub fn len(&self) -> usize {
        self.scales.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, MomentCoord)> + '_ {
        self.scales
            .iter()
            .enumerate()
            .flat_map(|(k, v)| v.iter().map(move |c| (k, *c)))
    }

    /// Keeps each coordinate only at the lowest scale that holds it.
    pub fn deduplicate(&self) -> CandidateSet {
        let mut seen = BTreeSet::new();
        let scales = self
            .scales
            .iter()
            .map(|v| v.iter().copied().filter(|c| seen.insert(*c)).collect())
            .collect();
        CandidateSet {
            scales,
            deduplicated: true,
        }
    }

    /// Distinct coordinates across all scales.
    pub fn coord_set(&self) -> BTreeSet<MomentCoord> {
        self.scales.iter().flatten().copied().collect()
    }
}

pub fn enumerate_dense(n: usize) -> Result<CandidateSet> {
    Ok(LatticeGeometry::dense(n)?.candidates())
}

/// Stride `2^(k-1)` with `k = ceil(log2(len / A) + 1)` clamped to `k >= 1`:
/// the smallest power of two `s` with `s * A >= len`.
fn sparse_stride(len: usize, anchors: usize) -> Result<usize> {
    if anchors == 0 {
        return Err(Error::InvalidArgument("anchor count must be >= 1".into()));
    }
    let mut s = 1usize;
    while s.saturating_mul(anchors) < len {
        s *= 2;
    }
    Ok(s)
}

/// Sampling rule of the sparse single-scale map for the moment spanning
/// clips `start..=end`.
pub fn sparse_predicate(start: usize, end: usize, anchors: usize) -> Result<bool> {
    if end < start {
        return Err(Error::InvalidArgument(format!(
            "moment end {end} precedes start {start}"
        )));
    }
    let s = sparse_stride(end - start + 1, anchors)?;
    Ok(start % s == 0 && end % s == 0)
}

pub fn enumerate_sparse_single(n: usize, anchors: usize) -> Result<CandidateSet> {
    Ok(LatticeGeometry::sparse_single(n, anchors)?.candidates())
}

pub fn enumerate_multiscale(n: usize, anchors: usize, scales: usize) -> Result<CandidateSet> {
    Ok(LatticeGeometry::multiscale(n, anchors, scales)?.candidates())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateCount {
    /// Closed-form count, ignoring the validity triangle.
    pub full_grid: usize,
    /// Enumerated count of valid candidates (summed over scales).
    pub valid: usize,
}

/// Full-grid and valid candidate counts.
///
/// The sparse single-scale predicate is defined only on moments inside the
/// window, so its full-grid count is its valid count.
pub fn candidate_count(geometry: &LatticeGeometry) -> CandidateCount {
    let n = geometry.n;
    let valid = geometry.candidates().len();
    let full_grid = match geometry.kind {
        MapKind::DenseSingle => n * (n + 1) / 2,
        MapKind::SparseSingle => valid,
        MapKind::SparseMulti => (0..geometry.scales)
            .map(|k| geometry.anchors * n.div_ceil(1 << k))
            .sum(),
    };
    CandidateCount { full_grid, valid }
}

/// Per-threshold share of targets an ideal scorer could localize.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageTable {
    pub thresholds: Vec<f64>,
    /// Percentage of targets with best IoU strictly above each threshold.
    pub percent: Vec<f64>,
    /// Best achievable IoU per target, in input order.
    pub best_iou: Vec<f64>,
}

/// Best IoU any candidate of `layout` reaches against `target`.
///
/// For a fixed candidate length the overlap is a trapezoid in the start
/// position, so only the grid starts bracketing its plateau need checking.
fn best_iou_on_layout(layout: &MapLayout, grid: &ClipGrid, target: &TimeInterval) -> f64 {
    let tau = grid.clip_seconds();
    let mut best = 0.0f64;
    if layout.sparse_anchors.is_some() {
        for r in 0..layout.rows {
            for c in 0..layout.cols {
                if layout.is_valid(r, c) {
                    let iv = coord_to_interval(layout.coord(r, c), grid).expect("valid cell");
                    best = best.max(temporal_iou(&iv, target));
                }
            }
        }
        return best;
    }
    for col in 0..layout.cols {
        let len_clips = (col + 1) * layout.dur_step;
        if len_clips > layout.n {
            break;
        }
        let max_start = layout.n - len_clips;
        let max_row = (max_start / layout.start_step).min(layout.rows - 1);
        let len_s = len_clips as f64 * tau;
        let a = target.start();
        let b = target.end() - len_s;
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let step_s = layout.start_step as f64 * tau;
        let lo_row = (lo / step_s).floor();
        let hi_row = (hi / step_s).ceil();
        let mut rows = [lo_row, lo_row + 1.0, hi_row - 1.0, hi_row];
        for r in rows.iter_mut() {
            *r = r.clamp(0.0, max_row as f64);
        }
        for r in rows {
            let coord = layout.coord(r as usize, col);
            let iv = coord_to_interval(coord, grid).expect("row clamped to valid range");
            best = best.max(temporal_iou(&iv, target));
        }
    }
    best
}

pub fn coverage_upper_bound(
    geometry: &LatticeGeometry,
    grid: &ClipGrid,
    targets: &[TimeInterval],
    thresholds: &[f64],
) -> Result<CoverageTable> {
    if targets.is_empty() {
        return Err(Error::Empty("coverage needs at least one target".into()));
    }
    if let Some(m) = thresholds.iter().find(|m| !(**m > 0.0 && **m < 1.0)) {
        return Err(Error::InvalidArgument(format!("threshold {m} outside (0, 1)")));
    }
    if grid.num_clips() != geometry.n {
        return Err(Error::Shape(format!(
            "grid has {} clips but the lattice expects {}",
            grid.num_clips(),
            geometry.n
        )));
    }
    let layouts = geometry.layouts();
    let best_iou: Vec<f64> = targets
        .iter()
        .map(|t| {
            layouts
                .iter()
                .map(|l| best_iou_on_layout(l, grid, t))
                .fold(0.0, f64::max)
        })
        .collect();
    let percent = thresholds
        .iter()
        .map(|&m| 100.0 * best_iou.iter().filter(|&&o| o > m).count() as f64 / targets.len() as f64)
        .collect();
    Ok(CoverageTable {
        thresholds: thresholds.to_vec(),
        percent,
        best_iou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(s: f64, e: f64) -> TimeInterval {
        TimeInterval::new(s, e).unwrap()
    }

    #[test]
    fn coord_to_interval_examples() {
        let g = ClipGrid::new(10, 1.0).unwrap();
        assert_eq!(coord_to_interval(MomentCoord::new(0, 0), &g).unwrap(), iv(0.0, 1.0));
        assert_eq!(coord_to_interval(MomentCoord::new(2, 3), &g).unwrap(), iv(2.0, 6.0));
        assert!(matches!(
            coord_to_interval(MomentCoord::new(5, 5), &g),
            Err(Error::InvalidCoord { .. })
        ));
    }

    #[test]
    fn iou_examples() {
        assert_eq!(temporal_iou(&iv(0.0, 4.0), &iv(0.0, 4.0)), 1.0);
        assert_eq!(temporal_iou(&iv(0.0, 2.0), &iv(3.0, 5.0)), 0.0);
        assert!((temporal_iou(&iv(0.0, 4.0), &iv(2.0, 6.0)) - 2.0 / 6.0).abs() < 1e-12);
        // touching intervals share no time
        assert_eq!(temporal_iou(&iv(0.0, 2.0), &iv(2.0, 5.0)), 0.0);
    }

    #[test]
    fn interval_rejects_degenerate() {
        assert!(TimeInterval::new(1.0, 1.0).is_err());
        assert!(TimeInterval::new(-0.5, 1.0).is_err());
        assert!(TimeInterval::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn dense_examples() {
        let one = enumerate_dense(1).unwrap();
        assert_eq!(one.per_scale()[0], vec![MomentCoord::new(0, 0)]);
        let three: BTreeSet<_> = enumerate_dense(3).unwrap().coord_set();
        let expect: BTreeSet<_> = [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (2, 0)]
            .into_iter()
            .map(|(a, b)| MomentCoord::new(a, b))
            .collect();
        assert_eq!(three, expect);
        assert_eq!(enumerate_dense(64).unwrap().len(), 2080);
    }

    #[test]
    fn sparse_predicate_examples() {
        assert!(sparse_predicate(0, 7, 16).unwrap());
        assert!(!sparse_predicate(3, 34, 16).unwrap());
        assert!(sparse_predicate(4, 36, 16).unwrap());
        assert!(sparse_predicate(0, 0, 0).is_err());
        assert!(sparse_predicate(3, 2, 4).is_err());
    }

    #[test]
    fn sparse_single_examples() {
        assert_eq!(
            enumerate_sparse_single(8, 16).unwrap().coord_set(),
            enumerate_dense(8).unwrap().coord_set()
        );
        let dense = enumerate_dense(64).unwrap();
        let brute: BTreeSet<_> = dense
            .iter()
            .map(|(_, c)| c)
            .filter(|c| sparse_predicate(c.start, c.end_clip(), 16).unwrap())
            .collect();
        let sparse = enumerate_sparse_single(64, 16).unwrap();
        assert_eq!(sparse.coord_set(), brute);
        assert!(sparse.len() < 2080);
    }

    #[test]
    fn multiscale_examples() {
        let single = enumerate_multiscale(20, 4, 1).unwrap();
        let expect: Vec<_> = (0..20)
            .flat_map(|a| (0..4).map(move |b| MomentCoord::new(a, b)))
            .filter(|c| c.is_valid(20))
            .collect();
        assert_eq!(single.per_scale()[0], expect);

        let g = LatticeGeometry::multiscale(64, 16, 3).unwrap();
        let per_scale: Vec<usize> = g.layouts().iter().map(MapLayout::cells).collect();
        assert_eq!(per_scale, vec![1024, 512, 256]);
        assert_eq!(per_scale.iter().sum::<usize>(), 1792);
        for (_, c) in g.candidates().iter() {
            assert!(c.is_valid(64));
        }
        // durations per scale span [2^k, 2^k A]
        for (k, coords) in g.candidates().per_scale().iter().enumerate() {
            let min = coords.iter().map(|c| c.len_clips()).min().unwrap();
            let max = coords.iter().map(|c| c.len_clips()).max().unwrap();
            assert_eq!((min, max), (1 << k, (1 << k) * 16));
        }
    }

    #[test]
    fn candidate_count_examples() {
        let dense = candidate_count(&LatticeGeometry::dense(64).unwrap());
        assert_eq!(dense, CandidateCount { full_grid: 2080, valid: 2080 });
        let g = LatticeGeometry::multiscale(64, 16, 3).unwrap();
        let c = candidate_count(&g);
        assert_eq!(c.full_grid, 1792);
        assert_eq!(c.valid, enumerate_multiscale(64, 16, 3).unwrap().len());
        assert!(c.full_grid >= c.valid);
    }

    #[test]
    fn layout_position_inverts_coord() {
        let g = LatticeGeometry::multiscale(50, 6, 4).unwrap();
        for l in g.layouts() {
            for r in 0..l.rows {
                for c in 0..l.cols {
                    assert_eq!(l.position(l.coord(r, c)), Some((r, c)));
                }
            }
            assert_eq!(l.position(MomentCoord::new(1, 0)).is_some(), l.scale == 0);
        }
    }

    #[test]
    fn coverage_aligned_targets_are_perfect() {
        let g = LatticeGeometry::multiscale(32, 4, 3).unwrap();
        let grid = ClipGrid::new(32, 0.5).unwrap();
        let targets: Vec<_> = g
            .candidates()
            .iter()
            .map(|(_, c)| coord_to_interval(c, &grid).unwrap())
            .collect();
        let table = coverage_upper_bound(&g, &grid, &targets, &[0.1, 0.5, 0.9]).unwrap();
        assert_eq!(table.percent, vec![100.0; 3]);
        assert!(coverage_upper_bound(&g, &grid, &[], &[0.5]).is_err());
        assert!(coverage_upper_bound(&g, &grid, &targets, &[1.0]).is_err());
    }
}

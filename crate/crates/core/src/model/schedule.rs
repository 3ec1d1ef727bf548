//! Layer schedule of the convolutional moment extractor.
//!
//! Layer 0 has kernel 1. Layers `(i + 1) * A / 2` for `1 <= i < K` have
//! kernel 3 and stride 2; every other layer has kernel 2 and stride 1. Output
//! `i` of a layer is the moment starting at clip `i * spacing` and covering
//! `duration` clips, where spacing and duration follow from the receptive
//! field of the stack.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::lattice::{enumerate_multiscale, LatticeGeometry, MomentCoord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerPlan {
    pub kernel: usize,
    pub stride: usize,
    /// Clip distance between neighbouring outputs.
    pub spacing: usize,
    /// Moment length in clips.
    pub duration: usize,
    /// Number of outputs for a window of `n` clips; 0 once the input has
    /// become shorter than the kernel.
    pub outputs: usize,
}

impl ConvLayerPlan {
    pub fn coord(&self, i: usize) -> MomentCoord {
        MomentCoord::new(i * self.spacing, self.duration - 1)
    }
}

/// Source of each cell of each scale map: `(layer, output index)`.
pub type ScalePlan = Vec<Option<(usize, usize)>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSchedule {
    layers: Vec<ConvLayerPlan>,
    scale_plans: Vec<ScalePlan>,
}

/// Number of layers in the stack: `(K + 1) * A / 2`.
pub fn layer_count(anchors: usize, scales: usize) -> usize {
    (scales + 1) * anchors / 2
}

/// Kernel and stride of layer `j`.
pub fn layer_kernel(j: usize, anchors: usize, scales: usize) -> (usize, usize) {
    if j == 0 {
        (1, 1)
    } else if (1..scales).any(|i| j == (i + 1) * anchors / 2) {
        (3, 2)
    } else {
        (2, 1)
    }
}

/// Closed-form duration index of layer `j`. It matches the
/// tracked receptive field for `j < 3A/2` only.
pub fn closed_form_duration_index(j: usize, anchors: usize) -> usize {
    if j < anchors {
        return j;
    }
    let t = j - anchors + 1;
    let exp = (2 * t).div_ceil(anchors);
    anchors + (1usize << exp) * t - 1
}

impl ConvSchedule {
    pub fn new(n: usize, anchors: usize, scales: usize) -> Result<Self> {
        if anchors < 2 || anchors % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "convolutional extractor needs an even A >= 2, got {anchors}"
            )));
        }
        if n < anchors {
            return Err(Error::InvalidArgument(format!(
                "convolutional extractor needs N >= A, got N = {n}, A = {anchors}"
            )));
        }
        let geometry = LatticeGeometry::multiscale(n, anchors, scales)?;
        let grid = enumerate_multiscale(n, anchors, scales)?.coord_set();

        let mut layers = Vec::new();
        let (mut spacing, mut duration, mut len) = (1usize, 0usize, n);
        for j in 0..layer_count(anchors, scales) {
            let (kernel, stride) = layer_kernel(j, anchors, scales);
            if j == 0 {
                duration = 1;
            } else {
                duration += (kernel - 1) * spacing;
                spacing *= stride;
            }
            len = if len >= kernel { (len - kernel) / stride + 1 } else { 0 };
            let plan = ConvLayerPlan {
                kernel,
                stride,
                spacing,
                duration,
                outputs: len,
            };
            for i in 0..len {
                let c = plan.coord(i);
                if !grid.contains(&c) {
                    return Err(Error::InvalidArgument(format!(
                        "extractor layer {j} emits moment ({}, {}) which is not a multi-scale candidate",
                        c.start, c.dur
                    )));
                }
            }
            layers.push(plan);
        }

        let mut scale_plans = Vec::new();
        for layout in geometry.layouts() {
            let mut plan = Vec::with_capacity(layout.cells());
            for r in 0..layout.rows {
                for c in 0..layout.cols {
                    if !layout.is_valid(r, c) {
                        plan.push(None);
                        continue;
                    }
                    let coord = layout.coord(r, c);
                    let src = layers.iter().enumerate().find_map(|(j, l)| {
                        (l.duration == coord.len_clips()
                            && coord.start % l.spacing == 0
                            && coord.start / l.spacing < l.outputs)
                            .then_some((j, coord.start / l.spacing))
                    });
                    match src {
                        Some(s) => plan.push(Some(s)),
                        None => {
                            return Err(Error::InvalidArgument(format!(
                                "no extractor layer produces candidate ({}, {}) at scale {}",
                                coord.start, coord.dur, layout.scale
                            )))
                        }
                    }
                }
            }
            scale_plans.push(plan);
        }
        Ok(Self { layers, scale_plans })
    }

    pub fn layers(&self) -> &[ConvLayerPlan] {
        &self.layers
    }

    pub fn scale_plans(&self) -> &[ScalePlan] {
        &self.scale_plans
    }

    /// Every moment produced by some layer.
    pub fn coordinates(&self) -> BTreeSet<MomentCoord> {
        self.layers
            .iter()
            .flat_map(|l| (0..l.outputs).map(|i| l.coord(i)))
            .collect()
    }
}

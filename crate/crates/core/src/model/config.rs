use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{LatticeGeometry, MapKind};

/// Moment feature extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extractor {
    /// Max over the clips of each candidate.
    Pool,
    /// Stacked 1-D convolutions whose outputs are moment features.
    Conv,
}

impl Extractor {
    pub fn name(self) -> &'static str {
        match self {
            Extractor::Pool => "pool",
            Extractor::Conv => "conv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pool" => Some(Extractor::Pool),
            "conv" => Some(Extractor::Conv),
            _ => None,
        }
    }
}

/// Every hyperparameter of the model and its training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// LSTM hidden units per direction.
    pub hidden: usize,
    /// Clips per window.
    pub n: usize,
    pub scales: usize,
    pub anchors: usize,
    pub kappa: usize,
    /// Gated convolution layers per scale.
    pub layers: usize,
    pub d_v: usize,
    pub d_f: usize,
    /// Word embedding width.
    pub d_s: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub nms_iou: f64,
    pub extractor: Extractor,
    pub seed: u64,

    /// Width of the raw clip features fed to the clip encoder.
    pub d_raw: usize,
    /// Embedding rows, including hashed out-of-vocabulary buckets.
    pub vocab: usize,
    pub lstm_layers: usize,
    /// Number of 1x1 layers in the score head.
    pub head_layers: usize,
    pub fusion_bias: bool,
    /// One gated-convolution stack shared by all scales.
    pub share_scales: bool,
    /// Batch norm after each extractor convolution.
    pub batch_norm: bool,
    /// Disables batch norm and tanh in the convolutional extractor.
    pub linear_extractor: bool,
    pub map: MapKind,
}

impl Default for ModelConfig {
    /// Small configuration suited to CPU runs.
    fn default() -> Self {
        Self {
            hidden: 64,
            n: 64,
            scales: 3,
            anchors: 8,
            kappa: 5,
            layers: 2,
            d_v: 64,
            d_f: 64,
            d_s: 300,
            lr: 1e-4,
            batch: 32,
            epochs: 30,
            nms_iou: 0.49,
            extractor: Extractor::Conv,
            seed: 0,
            d_raw: 64,
            vocab: 1024,
            lstm_layers: 3,
            head_layers: 1,
            fusion_bias: true,
            share_scales: false,
            batch_norm: true,
            linear_extractor: false,
            map: MapKind::SparseMulti,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration: H = 512, A = 16, kappa = 17, d_v = d_f = 512.
    pub fn full_size() -> Self {
        Self {
            hidden: 512,
            anchors: 16,
            kappa: 17,
            d_v: 512,
            d_f: 512,
            ..Self::default()
        }
    }

    pub fn geometry(&self) -> Result<LatticeGeometry> {
        LatticeGeometry::new(self.map, self.n, self.anchors, self.scales)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("H", self.hidden),
            ("N", self.n),
            ("K", self.scales),
            ("A", self.anchors),
            ("kappa", self.kappa),
            ("d_v", self.d_v),
            ("d_f", self.d_f),
            ("d_s", self.d_s),
            ("batch", self.batch),
            ("d_raw", self.d_raw),
            ("vocab", self.vocab),
            ("lstm_layers", self.lstm_layers),
            ("head_layers", self.head_layers),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be at least 1")));
        }
        if self.kappa % 2 == 0 {
            return Err(Error::Config(format!(
                "kappa = {} must be odd so that zero padding keeps the map shape",
                self.kappa
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr = {} must be positive", self.lr)));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Config(format!("nms_iou = {} must lie in (0, 1)", self.nms_iou)));
        }
        if self.extractor == Extractor::Conv {
            if self.map != MapKind::SparseMulti {
                return Err(Error::Config(
                    "the convolutional extractor produces multi-scale maps only".into(),
                ));
            }
            if self.anchors % 2 != 0 {
                return Err(Error::Config(format!(
                    "the convolutional extractor needs an even A, got {}",
                    self.anchors
                )));
            }
            if self.n < self.anchors {
                return Err(Error::Config(format!(
                    "the convolutional extractor needs N >= A, got N = {} and A = {}",
                    self.n, self.anchors
                )));
            }
        }
        self.geometry()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::full_size().validate().unwrap();
        let p = ModelConfig::full_size();
        assert_eq!((p.hidden, p.n, p.scales, p.anchors, p.kappa, p.layers), (512, 64, 3, 16, 17, 2));
    }

    #[test]
    fn rejects_bad_values() {
        let even = ModelConfig {
            kappa: 4,
            ..Default::default()
        };
        assert!(matches!(even.validate(), Err(Error::Config(_))));
        let odd_a = ModelConfig {
            anchors: 5,
            ..Default::default()
        };
        assert!(odd_a.validate().is_err());
        let pool_odd_a = ModelConfig {
            anchors: 5,
            extractor: Extractor::Pool,
            ..Default::default()
        };
        pool_odd_a.validate().unwrap();
        let dense_conv = ModelConfig {
            map: MapKind::DenseSingle,
            ..Default::default()
        };
        assert!(dense_conv.validate().is_err());
        let zero = ModelConfig {
            d_f: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
    }
}

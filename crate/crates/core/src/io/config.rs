//! Flat `key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Missing keys keep
//! their default values; unknown keys are an error.

use std::path::Path;

use crate::error::{malformed, Position, Result};
use crate::lattice::MapKind;
use crate::model::{Extractor, ModelConfig};

const WHAT: &str = "config";

pub fn parse_config(text: &str) -> Result<ModelConfig> {
    parse_config_over(text, ModelConfig::default())
}

/// Applies the assignments in `text` on top of `base`.
pub fn parse_config_over(text: &str, base: ModelConfig) -> Result<ModelConfig> {
    let mut c = base;
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let at = Position::Line(i + 1);
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| malformed(WHAT, at.clone(), format!("expected key = value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(malformed(WHAT, at, format!("duplicate key {key}")));
        }
        set_key(&mut c, key, value).map_err(|m| malformed(WHAT, at, m))?;
    }
    c.validate()?;
    Ok(c)
}

/// Sets one key; the error is a message without position.
pub fn set_key(c: &mut ModelConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
        v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
    }
    fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
        match v {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(format!("bad boolean {v:?} for {key}")),
        }
    }
    match key {
        "H" => c.hidden = num(key, value)?,
        "N" => c.n = num(key, value)?,
        "K" => c.scales = num(key, value)?,
        "A" => c.anchors = num(key, value)?,
        "kappa" => c.kappa = num(key, value)?,
        "L" => c.layers = num(key, value)?,
        "d_v" => c.d_v = num(key, value)?,
        "d_f" => c.d_f = num(key, value)?,
        "d_s" => c.d_s = num(key, value)?,
        "lr" => c.lr = num(key, value)?,
        "batch" => c.batch = num(key, value)?,
        "epochs" => c.epochs = num(key, value)?,
        "nms_iou" => c.nms_iou = num(key, value)?,
        "pool_or_conv" => {
            c.extractor = Extractor::parse(value).ok_or_else(|| format!("pool_or_conv must be pool or conv, got {value:?}"))?
        }
        "seed" => c.seed = num(key, value)?,
        "d_raw" => c.d_raw = num(key, value)?,
        "vocab" => c.vocab = num(key, value)?,
        "lstm_layers" => c.lstm_layers = num(key, value)?,
        "head_layers" => c.head_layers = num(key, value)?,
        "fusion_bias" => c.fusion_bias = flag(key, value)?,
        "share_scales" => c.share_scales = flag(key, value)?,
        "batch_norm" => c.batch_norm = flag(key, value)?,
        "linear_extractor" => c.linear_extractor = flag(key, value)?,
        "map" => c.map = MapKind::parse(value).ok_or_else(|| format!("map must be dense, sparse or multi, got {value:?}"))?,
        _ => return Err(format!("unknown key {key}")),
    }
    Ok(())
}

/// Every key, one per line, in a fixed order.
pub fn config_text(c: &ModelConfig) -> String {
    let rows: [(&str, String); 24] = [
        ("H", c.hidden.to_string()),
        ("N", c.n.to_string()),
        ("K", c.scales.to_string()),
        ("A", c.anchors.to_string()),
        ("kappa", c.kappa.to_string()),
        ("L", c.layers.to_string()),
        ("d_v", c.d_v.to_string()),
        ("d_f", c.d_f.to_string()),
        ("d_s", c.d_s.to_string()),
        ("lr", c.lr.to_string()),
        ("batch", c.batch.to_string()),
        ("epochs", c.epochs.to_string()),
        ("nms_iou", c.nms_iou.to_string()),
        ("pool_or_conv", c.extractor.name().to_string()),
        ("seed", c.seed.to_string()),
        ("d_raw", c.d_raw.to_string()),
        ("vocab", c.vocab.to_string()),
        ("lstm_layers", c.lstm_layers.to_string()),
        ("head_layers", c.head_layers.to_string()),
        ("fusion_bias", c.fusion_bias.to_string()),
        ("share_scales", c.share_scales.to_string()),
        ("batch_norm", c.batch_norm.to_string()),
        ("linear_extractor", c.linear_extractor.to_string()),
        ("map", c.map.name().to_string()),
    ];
    rows.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn load_config(path: &Path) -> Result<ModelConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

pub fn save_config(path: &Path, c: &ModelConfig) -> Result<()> {
    std::fs::write(path, config_text(c))?;
    Ok(())
}

//! Moment-sentence annotations.
//!
//! The canonical format is JSON lines with the fields `video_id`,
//! `duration_s`, `start_s`, `end_s` and `query`. The Charades-STA release
//! format (`VID start end##sentence`) is read with durations taken from a
//! sidecar file of `VID duration` lines.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{malformed, Error, Position, Result};
use crate::lattice::TimeInterval;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub duration_s: f64,
    pub start_s: f64,
    pub end_s: f64,
    pub query: String,
}

impl AnnotationRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let finite = [self.duration_s, self.start_s, self.end_s].iter().all(|v| v.is_finite());
        if !finite {
            return Err("non-finite time".into());
        }
        if !(0.0 <= self.start_s && self.start_s < self.end_s && self.end_s <= self.duration_s) {
            return Err(format!(
                "times must satisfy 0 <= start_s < end_s <= duration_s, got start_s={}, end_s={}, duration_s={}",
                self.start_s, self.end_s, self.duration_s
            ));
        }
        if self.video_id.is_empty() {
            return Err("empty video_id".into());
        }
        Ok(())
    }

    pub fn target(&self) -> Result<TimeInterval> {
        TimeInterval::new(self.start_s, self.end_s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnnotationFormat {
    Canonical,
    /// Charades-STA text lines plus a `VID duration` sidecar file.
    CharadesTxt { durations: std::path::PathBuf },
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let at = Position::Line(i + 1);
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| malformed("annotation", at.clone(), e.to_string()))?;
        rec.validate().map_err(|m| malformed("annotation", at, m))?;
        out.push(rec);
    }
    Ok(out)
}

/// One JSON object per line with fields in canonical order.
pub fn write_jsonl<W: Write>(mut writer: W, records: &[AnnotationRecord]) -> Result<()> {
    for r in records {
        r.validate().map_err(Error::InvalidArgument)?;
        let line = serde_json::to_string(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

/// Parses `VID duration` lines.
pub fn read_durations<R: BufRead>(reader: R) -> Result<HashMap<String, f64>> {
    let mut out = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let at = Position::Line(i + 1);
        let mut parts = line.split_whitespace();
        let (Some(id), Some(d)) = (parts.next(), parts.next()) else {
            if line.trim().is_empty() {
                continue;
            }
            return Err(malformed("durations", at, "expected `VIDEO_ID DURATION`"));
        };
        if parts.next().is_some() {
            return Err(malformed("durations", at, "trailing fields"));
        }
        let d: f64 = d
            .parse()
            .map_err(|_| malformed("durations", at.clone(), format!("bad duration {d:?}")))?;
        if !(d.is_finite() && d > 0.0) {
            return Err(malformed("durations", at, format!("duration {d} must be positive")));
        }
        out.insert(id.to_string(), d);
    }
    Ok(out)
}

pub fn read_charades<R: BufRead>(reader: R, durations: &HashMap<String, f64>) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let at = Position::Line(i + 1);
        if line.trim().is_empty() {
            continue;
        }
        let (head, query) = line
            .split_once("##")
            .ok_or_else(|| malformed("charades annotation", at.clone(), "missing `##` separator"))?;
        let fields: Vec<&str> = head.split_whitespace().collect();
        let [vid, s, e] = fields[..] else {
            return Err(malformed("charades annotation", at, "expected `VID START END##QUERY`"));
        };
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| malformed("charades annotation", at.clone(), format!("bad time {v:?}")))
        };
        let duration_s = *durations
            .get(vid)
            .ok_or_else(|| malformed("charades annotation", at.clone(), format!("no duration for {vid}")))?;
        let rec = AnnotationRecord {
            video_id: vid.to_string(),
            duration_s,
            start_s: num(s)?,
            end_s: num(e)?,
            query: query.trim().to_string(),
        };
        rec.validate().map_err(|m| malformed("charades annotation", at, m))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_annotations(path: &Path, format: &AnnotationFormat) -> Result<Vec<AnnotationRecord>> {
    let open = |p: &Path| std::fs::File::open(p).map(std::io::BufReader::new);
    match format {
        AnnotationFormat::Canonical => read_jsonl(open(path)?),
        AnnotationFormat::CharadesTxt { durations } => {
            let d = read_durations(open(durations)?)?;
            read_charades(open(path)?, &d)
        }
    }
}

pub fn save_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, records)?;
    std::fs::write(path, buf)?;
    Ok(())
}

//! Synthetic planted-moment datasets.
//!
//! Each query is a short token sequence; its signature is the normalized
//! sum of per-token random directions. Clips inside the planted target carry
//! `snr * signature` plus unit Gaussian noise, all other clips noise only.
//! Targets are aligned to clips and drawn so that the configured multi-scale
//! lattice holds a candidate with IoU above `min_best_iou`.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::io::annotations::{save_annotations, AnnotationRecord};
use crate::io::features::{FeatureMatrix, FeatureStore};
use crate::io::text::Vocabulary;
use crate::lattice::{coverage_upper_bound, ClipGrid, LatticeGeometry, TimeInterval};

const MAX_DRAWS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    /// Distinct words.
    pub vocab_size: usize,
    pub videos: usize,
    pub clips_per_video: usize,
    pub dim: usize,
    /// Per-dimension signal amplitude relative to unit noise.
    pub snr: f64,
    pub seed: u64,
    /// Distinct queries.
    pub concepts: usize,
    pub words_per_query: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub clip_seconds: f64,
    /// Lattice the targets must be coverable by.
    pub anchors: usize,
    pub scales: usize,
    pub min_best_iou: f64,
    /// Segments per video carrying another query's signature.
    pub distractors: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            videos: 500,
            clips_per_video: 64,
            dim: 64,
            snr: 1.0,
            seed: 0,
            concepts: 16,
            words_per_query: 3,
            min_len: 4,
            max_len: 32,
            clip_seconds: 1.0,
            anchors: 8,
            scales: 3,
            min_best_iou: 0.7,
            distractors: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("videos", self.videos),
            ("clips_per_video", self.clips_per_video),
            ("dim", self.dim),
            ("concepts", self.concepts),
            ("words_per_query", self.words_per_query),
            ("min_len", self.min_len),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{k} must be at least 1")));
        }
        if !(self.snr.is_finite() && self.snr > 0.0) {
            return Err(Error::InvalidArgument(format!("snr = {} must be positive", self.snr)));
        }
        if self.max_len < self.min_len || self.max_len > self.clips_per_video {
            return Err(Error::InvalidArgument(format!(
                "target lengths {}..={} do not fit {} clips",
                self.min_len, self.max_len, self.clips_per_video
            )));
        }
        if !(self.min_best_iou >= 0.0 && self.min_best_iou < 1.0) {
            return Err(Error::InvalidArgument("min_best_iou must lie in [0, 1)".into()));
        }
        if self.distractors > 0 && self.concepts < 2 {
            return Err(Error::InvalidArgument("distractors need at least two concepts".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<LatticeGeometry> {
        LatticeGeometry::multiscale(self.clips_per_video, self.anchors, self.scales)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub vocab: Vocabulary,
    pub records: Vec<AnnotationRecord>,
    pub features: Vec<FeatureMatrix>,
    pub queries: Vec<Vec<usize>>,
    /// Signature of each concept, `dim` values with unit mean square.
    pub signatures: Vec<Vec<f32>>,
    pub concept_of: Vec<usize>,
    /// Planted target in clips, `(start, len)`.
    pub targets: Vec<(usize, usize)>,
}

fn unit_rms(v: &mut [f64]) {
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x /= rms);
    }
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let words: Vec<String> = (0..spec.vocab_size).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::new(words.clone(), 1)?;
    let word_dirs: Vec<Vec<f64>> = (0..spec.vocab_size)
        .map(|_| (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();

    let mut concept_words = Vec::with_capacity(spec.concepts);
    let mut signatures = Vec::with_capacity(spec.concepts);
    for _ in 0..spec.concepts {
        let ids: Vec<usize> = (0..spec.words_per_query).map(|_| rng.random_range(0..spec.vocab_size)).collect();
        let mut sig = vec![0.0f64; spec.dim];
        for &w in &ids {
            for (s, d) in sig.iter_mut().zip(&word_dirs[w]) {
                *s += d;
            }
        }
        unit_rms(&mut sig);
        signatures.push(sig.iter().map(|&v| v as f32).collect::<Vec<f32>>());
        concept_words.push(ids);
    }

    let geometry = spec.geometry()?;
    let grid = ClipGrid::new(spec.clips_per_video, spec.clip_seconds)?;
    let coverable = |start: usize, len: usize| -> Result<bool> {
        let t = TimeInterval::new(start as f64 * spec.clip_seconds, (start + len) as f64 * spec.clip_seconds)?;
        let table = coverage_upper_bound(&geometry, &grid, &[t], &[0.5])?;
        Ok(table.best_iou[0] > spec.min_best_iou)
    };
    let draw_target = |rng: &mut ChaCha8Rng| -> Result<(usize, usize)> {
        for _ in 0..MAX_DRAWS {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let start = rng.random_range(0..=spec.clips_per_video - len);
            if coverable(start, len)? {
                return Ok((start, len));
            }
        }
        Err(Error::InvalidArgument(format!(
            "no lattice-coverable target found in {MAX_DRAWS} draws"
        )))
    };

    let mut records = Vec::with_capacity(spec.videos);
    let mut features = Vec::with_capacity(spec.videos);
    let mut queries = Vec::with_capacity(spec.videos);
    let mut concept_of = Vec::with_capacity(spec.videos);
    let mut targets = Vec::with_capacity(spec.videos);
    let concept_ids: Vec<usize> = (0..spec.concepts).collect();
    for v in 0..spec.videos {
        let concept = rng.random_range(0..spec.concepts);
        let (start, len) = draw_target(&mut rng)?;
        let mut values: Vec<f32> = (0..spec.clips_per_video * spec.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let plant = |values: &mut [f32], c: usize, s: usize, l: usize| {
            for clip in s..s + l {
                for (x, &sig) in values[clip * spec.dim..(clip + 1) * spec.dim].iter_mut().zip(&signatures[c]) {
                    *x += (spec.snr as f32) * sig;
                }
            }
        };
        for _ in 0..spec.distractors {
            // a different query's signature on clips disjoint from the target
            let others: Vec<usize> = concept_ids.iter().copied().filter(|&c| c != concept).collect();
            let other = *others.choose(&mut rng).expect("at least two concepts");
            let l = rng.random_range(spec.min_len..=spec.max_len);
            let free: Vec<usize> = (0..=spec.clips_per_video.saturating_sub(l))
                .filter(|&s| s + l <= start || s >= start + len)
                .collect();
            if let Some(&s) = free.choose(&mut rng) {
                plant(&mut values, other, s, l);
            }
        }
        plant(&mut values, concept, start, len);
        let id = format!("synth{v:05}");
        let query: Vec<&str> = concept_words[concept].iter().map(|&w| words[w].as_str()).collect();
        let query = query.join(" ");
        records.push(AnnotationRecord {
            video_id: id,
            duration_s: grid.duration_s(),
            start_s: start as f64 * spec.clip_seconds,
            end_s: (start + len) as f64 * spec.clip_seconds,
            query: query.clone(),
        });
        features.push(FeatureMatrix::new(grid, spec.dim, values)?);
        queries.push(vocab.encode(&query)?);
        concept_of.push(concept);
        targets.push((start, len));
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        vocab,
        records,
        features,
        queries,
        signatures,
        concept_of,
        targets,
    })
}

impl SynthDataset {
    /// Writes `annotations.jsonl`, `spec.json` and `features/<video>.mstf`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_annotations(&dir.join("annotations.jsonl"), &self.records)?;
        let spec = serde_json::to_string_pretty(&self.spec).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        std::fs::write(dir.join("spec.json"), spec + "\n")?;
        let store = FeatureStore::new(dir.join("features"));
        for (r, f) in self.records.iter().zip(&self.features) {
            store.save(&r.video_id, f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            videos: 12,
            dim: 16,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn targets_are_coverable_and_aligned() {
        let d = synth_generate(&small(1)).unwrap();
        let geom = d.spec.geometry().unwrap();
        let grid = ClipGrid::new(64, 1.0).unwrap();
        let targets: Vec<TimeInterval> = d.records.iter().map(|r| r.target().unwrap()).collect();
        let table = coverage_upper_bound(&geom, &grid, &targets, &[0.7]).unwrap();
        assert_eq!(table.percent, vec![100.0]);
        for (r, &(s, l)) in d.records.iter().zip(&d.targets) {
            assert_eq!(r.start_s, s as f64);
            assert_eq!(r.end_s, (s + l) as f64);
        }
    }

    #[test]
    fn deterministic_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_generate(&small(3)).unwrap().save(a.path()).unwrap();
        synth_generate(&small(3)).unwrap().save(b.path()).unwrap();
        for name in ["annotations.jsonl", "spec.json", "features/synth00007.mstf"] {
            assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        }
        assert_ne!(synth_generate(&small(4)).unwrap(), synth_generate(&small(3)).unwrap());
    }

    #[test]
    fn high_snr_decoding_recovers_targets() {
        let spec = SynthSpec {
            snr: 100.0,
            distractors: 1,
            ..small(5)
        };
        let d = synth_generate(&spec).unwrap();
        for (v, f) in d.features.iter().enumerate() {
            let sig = &d.signatures[d.concept_of[v]];
            let (s, l) = d.targets[v];
            for clip in 0..f.num_clips() {
                // nearest of {background, each concept}
                let x = f.row(clip);
                let dist = |c: Option<usize>| -> f64 {
                    x.iter()
                        .enumerate()
                        .map(|(i, &xi)| {
                            let m = c.map_or(0.0, |c| spec.snr as f32 * d.signatures[c][i]);
                            f64::from(xi - m).powi(2)
                        })
                        .sum()
                };
                let best = std::iter::once(None)
                    .chain((0..spec.concepts).map(Some))
                    .min_by(|a, b| dist(*a).total_cmp(&dist(*b)))
                    .unwrap();
                let is_target = best.is_some_and(|c| d.signatures[c] == *sig);
                assert_eq!(is_target, (s..s + l).contains(&clip), "video {v} clip {clip}");
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(synth_generate(&SynthSpec { snr: 0.0, ..small(1) }).is_err());
        assert!(synth_generate(&SynthSpec { videos: 0, ..small(1) }).is_err());
        assert!(synth_generate(&SynthSpec { max_len: 65, ..small(1) }).is_err());
        // lengths whose best IoU can never exceed the bar
        let impossible = SynthSpec {
            min_len: 33,
            max_len: 33,
            min_best_iou: 0.98,
            ..small(1)
        };
        assert!(synth_generate(&impossible).is_err());
    }
}

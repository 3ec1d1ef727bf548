use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mstan::bench::{bench_scaling, BenchConfig};
use mstan::eval::{evaluate, localize, rank_at, rank_moments, MetricSpec, ScoredMoment};
use mstan::io::{
    config_text, load_annotations, parse_config, synth_generate, AnnotationFormat, AnnotationRecord, Checkpoint,
    FeatureMatrix, FeatureStore, SynthSpec, Vocabulary,
};
use mstan::lattice::{
    candidate_count, coord_to_interval, coverage_upper_bound, ClipGrid, LatticeGeometry, MapKind, TimeInterval,
};
use mstan::model::{Extractor, Model, ModelConfig};
use mstan::training::{train, Dataset, TrainOptions};

const CHECKPOINT_FILE: &str = "checkpoint.mstk";

#[derive(Parser)]
#[command(name = "mstan", version, about = "Multi-scale temporal moment localization")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; results go to stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Clips per window.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Number of scales.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Anchors per scale.
    #[arg(long, global = true)]
    a: Option<usize>,
    #[arg(long, global = true)]
    kappa: Option<usize>,
    /// Gated convolution layers per scale.
    #[arg(long, global = true)]
    layers: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Geometry {
    Dense,
    Sparse,
    Multi,
}

impl From<Geometry> for MapKind {
    fn from(g: Geometry) -> Self {
        match g {
            Geometry::Dense => MapKind::DenseSingle,
            Geometry::Sparse => MapKind::SparseSingle,
            Geometry::Multi => MapKind::SparseMulti,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// List the candidate moments of a geometry.
    Enumerate {
        #[arg(long, value_enum, default_value_t = Geometry::Dense)]
        geometry: Geometry,
        /// Print only the full-grid and valid counts.
        #[arg(long)]
        counts: bool,
    },
    /// Share of annotated moments an ideal scorer could retrieve.
    UpperBound {
        #[arg(long)]
        annotations: PathBuf,
        /// Read Charades-STA text annotations with this durations file.
        #[arg(long)]
        charades_durations: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Geometry::Multi)]
        geometry: Geometry,
        /// Fixed clip length; each video then gets floor(duration / s)
        /// clips. Without it every video is split into N clips.
        #[arg(long)]
        clip_seconds: Option<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7")]
        thresholds: Vec<f64>,
    },
    /// Generate a planted-moment dataset.
    Synth {
        #[arg(long, default_value_t = 500)]
        videos: usize,
        #[arg(long, default_value_t = 64)]
        clips: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        snr: f64,
        #[arg(long, default_value_t = 32)]
        vocab_size: usize,
        #[arg(long, default_value_t = 16)]
        concepts: usize,
        #[arg(long, default_value_t = 0)]
        distractors: usize,
    },
    /// Train on a dataset directory and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Trailing samples held out for per-epoch validation.
        #[arg(long, default_value_t = 0)]
        holdout: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, value_enum)]
        extractor: Option<ExtractorArg>,
        #[arg(long, value_enum, default_value_t = DTypeArg::F32)]
        dtype: DTypeArg,
    },
    /// Rank n@m table of a checkpoint or of stored predictions.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// JSON lines of `{"moments": [{"start_s", "end_s", "score"}]}`,
        /// one per annotation.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        /// Evaluate only the last this-many samples.
        #[arg(long)]
        holdout: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,5")]
        top: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7")]
        iou: Vec<f64>,
    },
    /// Top moments for one query over one feature file.
    Localize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Candidate counts and TAN cost as N grows.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024")]
        ns: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 4)]
        width: usize,
        #[arg(long)]
        counts_only: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExtractorArg {
    Pool,
    Conv,
}

impl Global {
    fn model_config(&self) -> Result<ModelConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                parse_config(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => ModelConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.n {
            c.n = v;
        }
        if let Some(v) = self.k {
            c.scales = v;
        }
        if let Some(v) = self.a {
            c.anchors = v;
        }
        if let Some(v) = self.kappa {
            c.kappa = v;
        }
        if let Some(v) = self.layers {
            c.layers = v;
        }
        Ok(c)
    }

    /// Writes `text` to `out/name`, or to stdout without `--out`.
    fn emit(&self, name: &str, text: &str) -> Result<()> {
        match &self.out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join(name);
                fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            }
            None => std::io::stdout().write_all(text.as_bytes())?,
        }
        Ok(())
    }

    fn require_out(&self) -> Result<&Path> {
        self.out.as_deref().context("--out DIR is required for this command")
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Enumerate { geometry, counts } => enumerate(g, geometry, counts),
        Command::UpperBound {
            annotations,
            charades_durations,
            geometry,
            clip_seconds,
            thresholds,
        } => upper_bound(g, &annotations, charades_durations, geometry, clip_seconds, &thresholds),
        Command::Synth {
            videos,
            clips,
            dim,
            snr,
            vocab_size,
            concepts,
            distractors,
        } => {
            let c = g.model_config()?;
            let spec = SynthSpec {
                vocab_size,
                videos,
                clips_per_video: clips,
                dim,
                snr,
                seed: c.seed,
                concepts,
                distractors,
                anchors: c.anchors,
                scales: c.scales,
                max_len: SynthSpec::default().max_len.min(clips),
                min_len: SynthSpec::default().min_len.min(clips),
                ..SynthSpec::default()
            };
            let out = g.require_out()?;
            synth_generate(&spec)?.save(out)?;
            eprintln!("wrote {videos} videos to {}", out.display());
            Ok(())
        }
        Command::Train {
            data,
            holdout,
            epochs,
            batch,
            lr,
            extractor,
            dtype,
        } => {
            let mut c = g.model_config()?;
            if let Some(v) = epochs {
                c.epochs = v;
            }
            if let Some(v) = batch {
                c.batch = v;
            }
            if let Some(v) = lr {
                c.lr = v;
            }
            if let Some(e) = extractor {
                c.extractor = match e {
                    ExtractorArg::Pool => Extractor::Pool,
                    ExtractorArg::Conv => Extractor::Conv,
                };
            }
            match dtype {
                DTypeArg::F32 => train_cmd::<f32>(g, c, &data, holdout),
                DTypeArg::F64 => train_cmd::<f64>(g, c, &data, holdout),
            }
        }
        Command::Eval {
            data,
            checkpoint,
            predictions,
            holdout,
            top,
            iou,
        } => eval_cmd(g, &data, checkpoint, predictions, holdout, MetricSpec::new(top, iou)?),
        Command::Localize {
            checkpoint,
            features,
            query,
            top,
        } => {
            let ck = Checkpoint::<f32>::load(&checkpoint)?;
            let vocab = ck.vocab.clone();
            let model = ck.into_model()?;
            let bytes = fs::read(&features).with_context(|| format!("reading {}", features.display()))?;
            let f = FeatureMatrix::from_bytes(&bytes)?;
            let tokens = vocab.encode(&query)?;
            let moments = localize(&model, &f, &tokens, top)?;
            let json = serde_json::json!({ "query": query, "moments": moments });
            g.emit("localize.json", &format!("{}\n", serde_json::to_string_pretty(&json)?))
        }
        Command::Bench {
            ns,
            repeats,
            width,
            counts_only,
        } => {
            let c = g.model_config()?;
            let cfg = BenchConfig {
                ns,
                repeats,
                width,
                counts_only,
                anchors: c.anchors,
                scales: c.scales,
                kappa: g.kappa.unwrap_or(BenchConfig::default().kappa),
                layers: c.layers,
                seed: c.seed,
                ..BenchConfig::default()
            };
            let report = bench_scaling(&cfg)?;
            g.emit("bench.csv", &report.to_csv())?;
            match &g.out {
                Some(_) => g.emit("slopes.csv", &report.slopes_csv()),
                None => {
                    eprint!("{}", report.slopes_csv());
                    Ok(())
                }
            }
        }
    }
}

fn geometry_of(g: &Global, kind: Geometry) -> Result<LatticeGeometry> {
    let c = g.model_config()?;
    Ok(LatticeGeometry::new(kind.into(), c.n, c.anchors, c.scales)?)
}

fn enumerate(g: &Global, kind: Geometry, counts_only: bool) -> Result<()> {
    let geom = geometry_of(g, kind)?;
    let counts = candidate_count(&geom);
    let coords = geom.candidates().deduplicate();
    let grid = ClipGrid::new(geom.n, 1.0)?;
    let text = match (g.format, counts_only) {
        (Format::Csv, true) => format!("full_grid,valid\n{},{}\n", counts.full_grid, counts.valid),
        (Format::Csv, false) => {
            let mut s = String::from("scale,start,dur,start_s,end_s\n");
            for (scale, c) in coords.iter() {
                let iv = coord_to_interval(c, &grid)?;
                writeln!(s, "{scale},{},{},{},{}", c.start, c.dur, iv.start(), iv.end())?;
            }
            s
        }
        (Format::Json, _) => {
            let mut v = serde_json::json!({
                "geometry": geom.kind.name(),
                "N": geom.n,
                "full_grid": counts.full_grid,
                "valid": counts.valid,
            });
            if !counts_only {
                let list: Vec<_> = coords
                    .iter()
                    .map(|(scale, c)| serde_json::json!({"scale": scale, "start": c.start, "dur": c.dur}))
                    .collect();
                v["candidates"] = list.into();
            }
            format!("{v}\n")
        }
    };
    g.emit("candidates.csv", &text)
}

fn read_annotations(path: &Path, charades_durations: Option<PathBuf>) -> Result<Vec<AnnotationRecord>> {
    let format = match charades_durations {
        Some(durations) => AnnotationFormat::CharadesTxt { durations },
        None => AnnotationFormat::Canonical,
    };
    load_annotations(path, &format).with_context(|| format!("loading {}", path.display()))
}

fn upper_bound(
    g: &Global,
    annotations: &Path,
    charades_durations: Option<PathBuf>,
    kind: Geometry,
    clip_seconds: Option<f64>,
    thresholds: &[f64],
) -> Result<()> {
    let records = read_annotations(annotations, charades_durations)?;
    if records.is_empty() {
        bail!("{} has no annotations", annotations.display());
    }
    let base = geometry_of(g, kind)?;
    let mut hits = vec![0usize; thresholds.len()];
    let mut skipped = 0usize;
    for r in &records {
        let (geom, grid) = match clip_seconds {
            Some(tau) => {
                let clips = (r.duration_s / tau).floor() as usize;
                if clips == 0 {
                    skipped += 1;
                    continue;
                }
                (base.with_n(clips)?, ClipGrid::new(clips, tau)?)
            }
            None => (base, ClipGrid::new(base.n, r.duration_s / base.n as f64)?),
        };
        // floor to whole clips: the part of a target past the last clip is dropped
        let Some(target) = r.target()?.clip_to(0.0, grid.duration_s()) else {
            skipped += 1;
            continue;
        };
        let table = coverage_upper_bound(&geom, &grid, &[target], thresholds)?;
        for (h, p) in hits.iter_mut().zip(&table.percent) {
            if *p > 0.0 {
                *h += 1;
            }
        }
    }
    // targets lost to clip flooring count as misses
    let total = records.len() as f64;
    let pct: Vec<f64> = hits.iter().map(|&h| 100.0 * h as f64 / total).collect();
    if skipped > 0 {
        eprintln!("{skipped} targets lie beyond the last whole clip and count as misses");
    }
    let text = match g.format {
        Format::Csv => {
            let mut s = String::from("threshold,percent\n");
            for (t, p) in thresholds.iter().zip(&pct) {
                writeln!(s, "{t},{p:.2}")?;
            }
            s
        }
        Format::Json => {
            let rows: Vec<_> = thresholds
                .iter()
                .zip(&pct)
                .map(|(t, p)| serde_json::json!({"threshold": t, "percent": p}))
                .collect();
            format!("{}\n", serde_json::json!({"geometry": base.kind.name(), "targets": records.len(), "rows": rows}))
        }
    };
    g.emit("upper_bound.csv", &text)
}

/// Annotations and features of a dataset directory.
fn load_data_dir(dir: &Path) -> Result<(Vec<AnnotationRecord>, FeatureStore)> {
    let records = read_annotations(&dir.join("annotations.jsonl"), None)?;
    Ok((records, FeatureStore::new(dir.join("features"))))
}

fn dataset_with(records: &[AnnotationRecord], store: &FeatureStore, vocab: &Vocabulary) -> Result<Dataset> {
    Ok(Dataset::from_records(records, vocab, |id| store.load(id))?)
}

fn train_cmd<T: mstan::Scalar>(g: &Global, config: ModelConfig, data: &Path, holdout: usize) -> Result<()> {
    let out = g.require_out()?.to_path_buf();
    let (records, store) = load_data_dir(data)?;
    let words = Vocabulary::from_texts(records.iter().map(|r| r.query.as_str()), 1)?.words().to_vec();
    if words.len() >= config.vocab {
        bail!(
            "{} distinct query words do not fit an embedding of {} rows",
            words.len(),
            config.vocab
        );
    }
    let vocab = Vocabulary::new(words.clone(), config.vocab - words.len())?;
    let all = dataset_with(&records, &store, &vocab)?;
    let (train_set, val) = all.split(holdout);
    let mut model = Model::<T>::new(config)?;
    fs::create_dir_all(&out)?;
    let mut log = fs::File::create(out.join("metrics.jsonl"))?;
    let logs = train(
        &mut model,
        &train_set,
        TrainOptions {
            validation: (holdout > 0).then_some(&val),
            log: Some(&mut log),
            ..TrainOptions::default()
        },
    )?;
    Checkpoint::from_model(&model, &vocab).save(&out.join(CHECKPOINT_FILE))?;
    fs::write(out.join("config.txt"), config_text(model.config()))?;
    if let Some(last) = logs.last() {
        eprintln!("{}", last.to_json());
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct PredictionLine {
    moments: Vec<PredictedMoment>,
}

#[derive(serde::Deserialize)]
struct PredictedMoment {
    start_s: f64,
    end_s: f64,
    score: f64,
}

fn read_predictions(path: &Path) -> Result<Vec<Vec<ScoredMoment>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: PredictionLine =
            serde_json::from_str(line).with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        let moments = p
            .moments
            .iter()
            .map(|m| {
                Ok(ScoredMoment {
                    interval: TimeInterval::new(m.start_s, m.end_s)?,
                    score: m.score,
                    coord: mstan::lattice::MomentCoord::new(0, 0),
                    scale: 0,
                })
            })
            .collect::<mstan::Result<Vec<_>>>()
            .with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        out.push(rank_moments(&moments));
    }
    Ok(out)
}

fn eval_cmd(
    g: &Global,
    data: &Path,
    checkpoint: Option<PathBuf>,
    predictions: Option<PathBuf>,
    holdout: Option<usize>,
    spec: MetricSpec,
) -> Result<()> {
    let (records, store) = load_data_dir(data)?;
    let skip = holdout.map_or(0, |h| records.len().saturating_sub(h));
    let table = match (checkpoint, predictions) {
        (Some(path), _) => {
            let ck = Checkpoint::<f32>::load(&path).with_context(|| format!("loading {}", path.display()))?;
            let vocab = ck.vocab.clone();
            let model = ck.into_model()?;
            let data = dataset_with(&records[skip..], &store, &vocab)?;
            evaluate(&model, &data, &spec)?
        }
        (None, Some(path)) => {
            let preds = read_predictions(&path)?;
            if preds.len() != records.len() {
                bail!("{} prediction lines for {} annotations", preds.len(), records.len());
            }
            let targets = records[skip..].iter().map(|r| r.target()).collect::<mstan::Result<Vec<_>>>()?;
            rank_at(&preds[skip..], &targets, &spec)?
        }
        (None, None) => bail!("either --checkpoint or --predictions is required"),
    };
    match (&g.out, g.format) {
        (Some(_), _) => {
            g.emit("report.csv", &table.to_csv())?;
            g.emit("report.json", &format!("{}\n", table.to_json()))
        }
        (None, Format::Csv) => g.emit("report.csv", &table.to_csv()),
        (None, Format::Json) => g.emit("report.json", &format!("{}\n", table.to_json())),
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::*;
use crate::io::{synth_generate, SynthSpec};
use crate::lattice::{LatticeGeometry, MomentCoord};
use crate::model::{Extractor, ModelConfig};
use crate::numerics::grad_check;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden: 4,
        n: 16,
        scales: 2,
        anchors: 4,
        kappa: 3,
        layers: 1,
        d_v: 6,
        d_f: 5,
        d_s: 4,
        batch: 4,
        epochs: 2,
        d_raw: 8,
        vocab: 16,
        lstm_layers: 1,
        lr: 1e-3,
        ..ModelConfig::default()
    }
}

fn tiny_data(seed: u64) -> Dataset {
    let spec = SynthSpec {
        vocab_size: 12,
        videos: 10,
        clips_per_video: 16,
        dim: 8,
        snr: 2.0,
        seed,
        concepts: 4,
        min_len: 2,
        max_len: 8,
        anchors: 4,
        scales: 2,
        ..SynthSpec::default()
    };
    Dataset::from_synth(&synth_generate(&spec).unwrap()).unwrap()
}

#[test]
fn label_examples() {
    assert_eq!(scaled_iou_label(0.5).unwrap(), 0.0);
    assert_eq!(scaled_iou_label(1.0).unwrap(), 1.0);
    assert_eq!(scaled_iou_label(0.75).unwrap(), 0.5);
    assert_eq!(scaled_iou_label(0.0).unwrap(), 0.0);
    assert!(scaled_iou_label(1.5).is_err());
    assert!(scaled_iou_label(-0.1).is_err());
}

#[test]
fn labels_match_brute_force() {
    let geom = LatticeGeometry::multiscale(16, 4, 2).unwrap();
    let layouts = geom.layouts();
    let grid = ClipGrid::new(16, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let s: f64 = rng.random_range(0.0..15.0);
        let e: f64 = rng.random_range(s + 0.1..=16.0);
        let t = TimeInterval::new(s, e).unwrap();
        let valid = rng.random_range(((s.floor() as usize) + 1).min(16)..=16);
        let labels = build_labels(&layouts, &grid, &t, valid).unwrap();
        for (k, layout) in layouts.iter().enumerate() {
            for r in 0..layout.rows {
                for c in 0..layout.cols {
                    let i = r * layout.cols + c;
                    let coord = layout.coord(r, c);
                    let expect = if layout.is_valid_within(r, c, valid) {
                        let o = temporal_iou(&coord_to_interval(coord, &grid).unwrap(), &t);
                        if o > 0.5 {
                            2.0 * o - 1.0
                        } else {
                            0.0
                        }
                    } else {
                        0.0
                    };
                    assert_eq!(labels.labels[k][i], expect);
                }
            }
        }
    }
}

#[test]
fn exact_candidate_gets_label_one() {
    let geom = LatticeGeometry::multiscale(16, 4, 2).unwrap();
    let grid = ClipGrid::new(16, 1.0).unwrap();
    let t = coord_to_interval(MomentCoord::new(4, 3), &grid).unwrap();
    let labels = build_labels(&geom.layouts(), &grid, &t, 16).unwrap();
    let pos = geom.layouts()[0].position(MomentCoord::new(4, 3)).unwrap();
    assert_eq!(labels.labels[0][pos.0 * geom.layouts()[0].cols + pos.1], 1.0);
    let far = geom.layouts()[0].position(MomentCoord::new(12, 1)).unwrap();
    assert_eq!(labels.labels[0][far.0 * geom.layouts()[0].cols + far.1], 0.0);
    let outside = TimeInterval::new(12.0, 14.0).unwrap();
    assert!(build_labels(&geom.layouts(), &grid, &outside, 10).is_err());
}

#[test]
fn bce_examples() {
    let mut g = Graph::<f64>::new();
    let p = g.input(Tensor::new(vec![1, 1, 1, 1], vec![0.5]).unwrap());
    let labels = LabelMap {
        iou: vec![vec![1.0]],
        labels: vec![vec![1.0]],
    };
    let loss = bce_loss(&mut g, &[p], &[labels], &[vec![true]]).unwrap();
    assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);

    let mut g = Graph::<f64>::new();
    let p = g.input(Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap());
    let labels = LabelMap {
        iou: vec![vec![0.0, 1.0]],
        labels: vec![vec![0.0, 1.0]],
    };
    let loss = bce_loss(&mut g, &[p], &[labels], &[vec![true, true]]).unwrap();
    let v = g.value(loss).item();
    assert!((0.0..1e-6).contains(&v));
}

#[test]
fn bce_gradient_matches_differences() {
    let mut params = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    params
        .insert("logits", crate::numerics::uniform(&[1, 1, 2, 3], 2.0, &mut rng), true)
        .unwrap();
    let labels = LabelMap {
        iou: vec![vec![0.0; 6]],
        labels: vec![vec![0.0, 0.3, 1.0, 0.7, 0.0, 0.5]],
    };
    let mask = vec![true, true, true, false, true, true];
    let report = grad_check(
        &params,
        |g, p| {
            let x = g.param(p, "logits")?;
            let s = g.sigmoid(x);
            bce_loss(g, &[s], std::slice::from_ref(&labels), std::slice::from_ref(&mask))
        },
        1e-6,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn window_starts_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = [0usize; 37];
    for _ in 0..10_000 {
        let w = sample_window(100, 64, &mut rng);
        assert_eq!((w.valid_clips, w.padded), (64, 0));
        counts[w.start] += 1;
    }
    let expect = 10_000.0 / 37.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    let p = 1.0 - ChiSquared::new(36.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 = {chi2}, p = {p}");
}

#[test]
fn short_and_exact_videos() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        assert_eq!(sample_window(64, 64, &mut rng).start, 0);
    }
    let w = sample_window(10, 64, &mut rng);
    assert_eq!((w.start, w.valid_clips, w.padded), (0, 10, 54));
    let geom = LatticeGeometry::multiscale(64, 8, 3).unwrap();
    let grid = ClipGrid::new(64, 1.0).unwrap();
    let t = TimeInterval::new(2.0, 6.0).unwrap();
    let labels = build_labels(&geom.layouts(), &grid, &t, 10).unwrap();
    for (k, layout) in geom.layouts().iter().enumerate() {
        for r in 0..layout.rows {
            for c in 0..layout.cols {
                if layout.coord(r, c).end_clip() >= 10 {
                    assert_eq!(labels.iou[k][r * layout.cols + c], 0.0);
                    assert!(!layout.is_valid_within(r, c, 10));
                }
            }
        }
    }
}

#[test]
fn window_target_clipping() {
    let w = TrainWindow {
        start: 10,
        valid_clips: 20,
        padded: 0,
    };
    let inside = TimeInterval::new(12.0, 18.0).unwrap();
    assert_eq!(w.target(&inside, 1.0), Some(TimeInterval::new(2.0, 8.0).unwrap()));
    // 6 of 8 seconds inside: kept and clipped
    let mostly = TimeInterval::new(24.0, 32.0).unwrap();
    assert_eq!(w.target(&mostly, 1.0), Some(TimeInterval::new(14.0, 20.0).unwrap()));
    // 2 of 8 seconds inside: skipped
    let barely = TimeInterval::new(28.0, 36.0).unwrap();
    assert_eq!(w.target(&barely, 1.0), None);
    assert_eq!(w.target(&TimeInterval::new(40.0, 41.0).unwrap(), 1.0), None);
}

#[test]
fn adam_examples() {
    let mut params = ParamSet::<f64>::new();
    params.insert("w", Tensor::scalar(0.0), true).unwrap();
    params.insert("buf", Tensor::scalar(3.0), false).unwrap();
    params.get_mut("w").unwrap().grad = Tensor::scalar(1.0);
    params.get_mut("buf").unwrap().grad = Tensor::scalar(1.0);
    let mut state = OptimState::new(AdamConfig::default());
    adam_step(&mut params, &mut state).unwrap();
    let w = params.value("w").unwrap().item();
    assert!((w + 1e-4).abs() < 1e-10, "{w}");
    assert_eq!(params.value("buf").unwrap().item(), 3.0);

    let mut params = ParamSet::<f64>::new();
    params.insert("w", Tensor::scalar(0.25), true).unwrap();
    let mut state = OptimState::new(AdamConfig::default());
    adam_step(&mut params, &mut state).unwrap();
    assert_eq!(params.value("w").unwrap().item(), 0.25);

    params.get_mut("w").unwrap().grad = Tensor::scalar(f64::NAN);
    assert!(adam_step(&mut params, &mut state).is_err());
    assert_eq!(params.value("w").unwrap().item(), 0.25);
    assert_eq!(state.step, 1);
}

#[test]
fn zero_epochs_keep_initialization() {
    let config = ModelConfig {
        epochs: 0,
        ..tiny_config()
    };
    let init = Model::<f64>::new(config.clone()).unwrap();
    let mut model = init.clone();
    let logs = train(&mut model, &tiny_data(1), TrainOptions::default()).unwrap();
    assert!(logs.is_empty());
    assert_eq!(model.params(), init.params());
}

#[test]
fn training_is_reproducible() {
    let data = tiny_data(2);
    let (train_set, val) = data.split(3);
    let run = || {
        let mut model = Model::<f64>::new(tiny_config()).unwrap();
        let mut log = Vec::new();
        let logs = train(
            &mut model,
            &train_set,
            TrainOptions {
                validation: Some(&val),
                log: Some(&mut log),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        (model.into_params(), logs, log)
    };
    let (pa, la, raw) = run();
    let (pb, lb, _) = run();
    assert_eq!(pa, pb);
    let strip = |l: &[EpochLog]| l.iter().map(|e| (e.epoch, e.loss, e.ranks.clone())).collect::<Vec<_>>();
    assert_eq!(strip(&la), strip(&lb));
    let text = String::from_utf8(raw).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], 1);
    assert!(first["rank1@0.7"].is_number() && first["wallclock_s"].is_number());
}

#[test]
fn pool_model_trains() {
    let config = ModelConfig {
        extractor: Extractor::Pool,
        epochs: 1,
        ..tiny_config()
    };
    let mut model = Model::<f32>::new(config).unwrap();
    let logs = train(&mut model, &tiny_data(3), TrainOptions::default()).unwrap();
    assert!(logs[0].loss.is_finite() && logs[0].ranks.is_empty());
}

#[test]
fn rejects_empty_and_mismatched_data() {
    let mut model = Model::<f32>::new(tiny_config()).unwrap();
    assert!(matches!(
        train(&mut model, &Dataset::default(), TrainOptions::default()),
        Err(Error::Empty(_))
    ));
    let mut wide = Model::<f32>::new(ModelConfig {
        d_raw: 9,
        ..tiny_config()
    })
    .unwrap();
    assert!(train(&mut wide, &tiny_data(1), TrainOptions::default()).is_err());
}

#[test]
fn diverged_loss_is_reported() {
    let mut model = Model::<f32>::new(tiny_config()).unwrap();
    for (name, p) in model.params_mut().iter_mut() {
        if name.starts_with("head") {
            p.value.fill(f32::NAN);
        }
    }
    assert!(matches!(
        train(&mut model, &tiny_data(1), TrainOptions::default()),
        Err(Error::Diverged { epoch: 1, .. })
    ));
}

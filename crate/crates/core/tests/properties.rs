use std::collections::BTreeSet;

use proptest::prelude::*;

use mstan::eval::{nms, rank_at, MetricSpec, ScoredMoment};
use mstan::io::annotations::{read_jsonl, write_jsonl};
use mstan::io::{AnnotationRecord, FeatureMatrix};
use mstan::lattice::{
    candidate_count, coord_to_interval, coverage_upper_bound, enumerate_dense, enumerate_multiscale, temporal_iou,
    ClipGrid, LatticeGeometry, MapKind, MomentCoord, TimeInterval,
};
use mstan::model::{recover_scores, Batch, Model, ModelConfig};
use mstan::numerics::{uniform, Graph, NormMode, Tensor};
use mstan::training::{build_labels, scaled_iou_label, LabelMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn interval() -> impl Strategy<Value = TimeInterval> {
    (0.0f64..60.0, 0.01f64..30.0).prop_map(|(s, l)| TimeInterval::new(s, s + l).unwrap())
}

fn kind() -> impl Strategy<Value = MapKind> {
    prop_oneof![Just(MapKind::DenseSingle), Just(MapKind::SparseSingle), Just(MapKind::SparseMulti)]
}

fn moment() -> impl Strategy<Value = ScoredMoment> {
    (0usize..40, 0usize..20, 0u32..10).prop_map(|(s, d, q)| ScoredMoment {
        interval: TimeInterval::new(s as f64, (s + d + 1) as f64).unwrap(),
        score: f64::from(q) / 10.0,
        coord: MomentCoord::new(s, d),
        scale: 0,
    })
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in interval(), b in interval()) {
        let x = temporal_iou(&a, &b);
        prop_assert_eq!(x, temporal_iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(temporal_iou(&a, &a), 1.0);
    }

    #[test]
    fn candidates_are_valid_and_counted(kind in kind(), n in 1usize..80, a in 1usize..12, k in 1usize..5) {
        let g = LatticeGeometry::new(kind, n, a, k).unwrap();
        let c = g.candidates();
        prop_assert!(c.iter().all(|(_, m)| m.is_valid(n)));
        prop_assert_eq!(candidate_count(&g).valid, c.len());
        let dense = enumerate_dense(n).unwrap().coord_set();
        prop_assert!(c.coord_set().is_subset(&dense));
        let grid = ClipGrid::new(n, 1.0).unwrap();
        for (_, m) in c.iter() {
            let iv = coord_to_interval(m, &grid).unwrap();
            prop_assert_eq!((iv.start(), iv.end()), (m.start as f64, (m.end_clip() + 1) as f64));
        }
    }

    #[test]
    fn multiscale_full_grid_is_linear(n in 1usize..40, a in 1usize..10, k in 1usize..5) {
        let n = n << (k - 1);
        let g = LatticeGeometry::multiscale(n, a, k).unwrap();
        let formula = (2.0 - 2f64.powi(1 - k as i32)) * (a * n) as f64;
        prop_assert_eq!(candidate_count(&g).full_grid as f64, formula);
    }

    #[test]
    fn coverage_matches_exhaustive_scan(kind in kind(), t in interval()) {
        let g = LatticeGeometry::new(kind, 96, 8, 3).unwrap();
        let grid = ClipGrid::new(96, 1.0).unwrap();
        let table = coverage_upper_bound(&g, &grid, &[t], &[0.5]).unwrap();
        let brute = g.candidates().iter()
            .map(|(_, c)| temporal_iou(&coord_to_interval(c, &grid).unwrap(), &t))
            .fold(0.0, f64::max);
        prop_assert_eq!(table.best_iou[0], brute);
    }

    #[test]
    fn label_is_monotone_and_bounded(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (yl, yh) = (scaled_iou_label(lo).unwrap(), scaled_iou_label(hi).unwrap());
        prop_assert!(yl <= yh);
        prop_assert!((0.0..=1.0).contains(&yl) && (0.0..=1.0).contains(&yh));
        prop_assert_eq!(yl, (2.0 * lo - 1.0).max(0.0));
    }

    #[test]
    fn labels_follow_layout_order(t in interval(), valid in 1usize..=64) {
        let layouts = LatticeGeometry::multiscale(64, 8, 3).unwrap().layouts();
        let grid = ClipGrid::new(64, 1.0).unwrap();
        prop_assume!(t.start() < valid as f64);
        let fwd = build_labels(&layouts, &grid, &t, valid).unwrap();
        let rev: Vec<_> = layouts.iter().rev().copied().collect();
        let back = build_labels(&rev, &grid, &t, valid).unwrap();
        let mut flipped = back.labels.clone();
        flipped.reverse();
        prop_assert_eq!(&fwd.labels, &flipped);
        for (o, y) in fwd.iou.iter().flatten().zip(fwd.labels.iter().flatten()) {
            prop_assert!((0.0..=1.0).contains(o));
            if *o <= 0.5 {
                prop_assert_eq!(*y, 0.0);
            }
        }
    }

    #[test]
    fn bce_is_nonnegative(ps in prop::collection::vec(0.0f64..=1.0, 1..30), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ys: Vec<f64> = ps.iter().map(|_| rand::Rng::random_range(&mut rng, 0.0..=1.0)).collect();
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::new(vec![1, 1, 1, ps.len()], ps.clone()).unwrap());
        let labels = LabelMap { iou: vec![ys.clone()], labels: vec![ys.clone()] };
        let loss = mstan::training::bce_loss(&mut g, &[p], &[labels], &[vec![true; ps.len()]]).unwrap();
        prop_assert!(g.value(loss).item() >= 0.0);

        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::new(vec![1, 1, 1, ps.len()], ps.iter().map(|v| v.round()).collect()).unwrap());
        let exact: Vec<f64> = ps.iter().map(|v| v.round()).collect();
        let labels = LabelMap { iou: vec![exact.clone()], labels: vec![exact] };
        let loss = mstan::training::bce_loss(&mut g, &[p], &[labels], &[vec![true; ps.len()]]).unwrap();
        prop_assert!(g.value(loss).item() < 1e-6);
    }

    #[test]
    fn nms_keeps_top1_and_respects_threshold(ms in prop::collection::vec(moment(), 1..60), thr in 0.1f64..0.9) {
        let kept = nms(&ms, thr).unwrap();
        let best = ms.iter().map(|m| m.score).fold(f64::MIN, f64::max);
        prop_assert_eq!(kept[0].score, best);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[..i] {
                prop_assert!(temporal_iou(&a.interval, &b.interval) <= thr);
            }
        }
        prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn rank_is_monotone(lists in prop::collection::vec(prop::collection::vec(moment(), 0..8), 1..10), t in interval()) {
        let targets = vec![t; lists.len()];
        let spec = MetricSpec::new(vec![1, 2, 5], vec![0.1, 0.3, 0.5, 0.7]).unwrap();
        let table = rank_at(&lists, &targets, &spec).unwrap();
        for &n in &spec.n {
            for w in spec.m.windows(2) {
                prop_assert!(table.get(n, w[0]).unwrap() >= table.get(n, w[1]).unwrap());
            }
        }
        for &m in &spec.m {
            for w in spec.n.windows(2) {
                prop_assert!(table.get(w[0], m).unwrap() <= table.get(w[1], m).unwrap());
            }
        }
    }

    #[test]
    fn recovered_scores_cover_each_candidate_once(valid in 1usize..=32, seed in any::<u64>()) {
        let g = LatticeGeometry::multiscale(32, 4, 3).unwrap();
        let layouts = g.layouts();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps: Vec<Vec<f64>> = layouts.iter()
            .map(|l| (0..l.cells()).map(|_| rand::Rng::random(&mut rng)).collect())
            .collect();
        let refs: Vec<&[f64]> = maps.iter().map(Vec::as_slice).collect();
        let out = recover_scores(&refs, &layouts, valid).unwrap();
        let expect: BTreeSet<MomentCoord> = g.candidates().iter()
            .map(|(_, c)| c)
            .filter(|c| c.end_clip() < valid)
            .collect();
        let got: Vec<MomentCoord> = out.iter().map(|r| r.coord).collect();
        prop_assert_eq!(got.len(), expect.len());
        prop_assert_eq!(got.into_iter().collect::<BTreeSet<_>>(), expect);
    }

    #[test]
    fn feature_files_round_trip(clips in 1usize..20, dim in 1usize..8, secs in 0.1f64..4.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f32> = (0..clips * dim).map(|_| rand::Rng::random_range(&mut rng, -1e3f32..1e3)).collect();
        let f = FeatureMatrix::new(ClipGrid::new(clips, secs).unwrap(), dim, values).unwrap();
        let mut bytes = Vec::new();
        f.write_to(&mut bytes).unwrap();
        let back = FeatureMatrix::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            f.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        for cut in [0, bytes.len() / 2, bytes.len() - 1] {
            prop_assert!(FeatureMatrix::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn annotations_round_trip(start in 0.0f64..50.0, len in 0.01f64..20.0, extra in 0.0f64..10.0, q in "[a-z ]{1,30}") {
        let r = AnnotationRecord {
            video_id: "v1".into(),
            duration_s: start + len + extra,
            start_s: start,
            end_s: start + len,
            query: q,
        };
        let mut bytes = Vec::new();
        write_jsonl(&mut bytes, std::slice::from_ref(&r)).unwrap();
        let back = read_jsonl(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &vec![r]);
        let mut again = Vec::new();
        write_jsonl(&mut again, &back).unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn pool_and_conv_share_coordinates(n in 1usize..40, half_a in 1usize..6, k in 1usize..4) {
        let a = 2 * half_a;
        let n = n.max(a);
        let c = ModelConfig { n, anchors: a, scales: k, hidden: 2, d_v: 2, d_f: 2, d_s: 2, d_raw: 2, vocab: 4, lstm_layers: 1, ..ModelConfig::default() };
        let conv = Model::<f32>::new(c).unwrap();
        let grid = enumerate_multiscale(n, a, k).unwrap().coord_set();
        prop_assert_eq!(conv.schedule().unwrap().coordinates(), grid.clone());
        let pool: BTreeSet<MomentCoord> = conv.layouts().iter().flat_map(|l| l.valid_coords()).collect();
        prop_assert_eq!(pool, grid);
    }
}

#[test]
fn forward_is_deterministic_and_finite() {
    let config = ModelConfig::default();
    for seed in 0..100u64 {
        let model = Model::<f32>::new(ModelConfig { seed, ..config.clone() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clips: Tensor<f32> = uniform(&[1, config.n, config.d_raw], 3.0, &mut rng);
        let run = || {
            let mut g = Graph::new();
            let batch = Batch {
                clips: &clips,
                queries: &[vec![(seed as usize) % config.vocab, 7]],
                valid_clips: &[config.n],
            };
            let f = model.forward(&mut g, &batch, NormMode::Eval).unwrap();
            f.scores.iter().flat_map(|&v| g.value(v).data().to_vec()).collect::<Vec<f32>>()
        };
        let a = run();
        assert!(a.iter().all(|v| v.is_finite()), "seed {seed}");
        assert_eq!(a, run(), "seed {seed}");
    }
}

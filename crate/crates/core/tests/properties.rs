use dashfp::evalx::{average_precision, recall_at_full_precision, RankedDetection};
use dashfp::flowio::{bucketize, select_video_flow, standardize, Binning, Capture, Direction, FlowRecord};
use dashfp::gallery::Gallery;
use dashfp::metriclearn::{mine, pairwise_distances, triplet_loss, MiningStrategy};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn record() -> impl Strategy<Value = FlowRecord> {
    (-5.0f64..70.0, any::<bool>(), 0u64..100_000).prop_map(|(ts_rel, out, bytes)| FlowRecord {
        ts_rel,
        direction: if out { Direction::Outgoing } else { Direction::Incoming },
        bytes,
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bucketize_conserves_in_window_bytes(records in prop::collection::vec(record(), 0..200)) {
        let mut c = Capture::new("c");
        c.records = records;
        let b = bucketize(&c, &Binning::default()).unwrap();
        for dir in [Direction::Incoming, Direction::Outgoing] {
            let want: u64 = c.records.iter()
                .filter(|r| r.direction == dir && r.ts_rel >= 0.0 && r.ts_rel < 60.0)
                .map(|r| r.bytes)
                .sum();
            prop_assert_eq!(b.row(dir.row()).sum(), want);
        }
    }

    #[test]
    fn standardize_is_idempotent(m in matrix(2, 240)) {
        let once = standardize(&m);
        let twice = standardize(&once);
        for (a, b) in once.iter().zip(twice.iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn flow_selection_ignores_order(sizes in prop::collection::vec(0u64..1000, 1..8), seed in any::<u64>()) {
        let caps: Vec<Capture> = sizes.iter().enumerate().map(|(i, &s)| {
            let mut c = Capture::new(format!("cap{i}"));
            c.records.push(FlowRecord { ts_rel: 0.0, direction: Direction::Incoming, bytes: s });
            c
        }).collect();
        let mut shuffled = caps.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = select_video_flow(&caps, None).unwrap().capture.capture_id.clone();
        let b = select_video_flow(&shuffled, None).unwrap().capture.capture_id.clone();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn gallery_scores_are_a_distribution(c in matrix(5, 4), q in prop::collection::vec(-20.0f64..20.0, 4)) {
        let ids: Vec<String> = (0..5).map(|i| format!("v{i}")).collect();
        let g = Gallery::new(c.clone(), ids, vec![1; 5]).unwrap();
        let x = Array1::from(q);
        let s = g.score(x.view()).unwrap();
        prop_assert!((s.sum() - 1.0).abs() < 1e-6);
        let d = g.distances(x.view()).unwrap();
        let nearest = (0..5).fold(0, |b, k| if d[k] < d[b] { k } else { b });
        prop_assert_eq!(g.predict(x.view()).unwrap(), nearest);
    }

    #[test]
    fn raising_a_positive_never_hurts(
        scores in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..40),
        pick in any::<prop::sample::Index>(),
        bump in 0.0f64..0.5,
    ) {
        let mut d: Vec<RankedDetection> = scores.iter().map(|&(s, p)| RankedDetection::new(s, p)).collect();
        prop_assume!(d.iter().any(|x| x.is_positive));
        let positives: Vec<usize> = (0..d.len()).filter(|&i| d[i].is_positive).collect();
        let i = positives[pick.index(positives.len())];
        let (ap0, r0) = (average_precision(&d).unwrap(), recall_at_full_precision(&d).unwrap());
        d[i].score += bump;
        prop_assert!(average_precision(&d).unwrap() >= ap0 - 1e-12);
        prop_assert!(recall_at_full_precision(&d).unwrap() >= r0);
    }

    #[test]
    fn mined_triplet_loss_is_non_negative(e in matrix(12, 3), seed in any::<u64>(), hardest in any::<bool>()) {
        let labels = [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3];
        let strategy = if hardest { MiningStrategy::Hardest } else { MiningStrategy::SemiHard };
        let d = pairwise_distances(e.view());
        let t = mine(&d, &labels, 0.2, strategy, &mut ChaCha8Rng::seed_from_u64(seed));
        let l = triplet_loss(e.view(), &t, 0.2);
        prop_assert!(l.value >= 0.0);
        for x in &t {
            let h = 0.2 + d[[x.anchor, x.positive]] - d[[x.anchor, x.negative]];
            prop_assert!(h > 0.0);
            if !hardest {
                prop_assert!(h < 0.2);
            }
        }
    }
}

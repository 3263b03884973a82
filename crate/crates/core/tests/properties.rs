mod common;

use std::path::Path;

use common::{confusion_oracle, median_oracle, random_frames};
use mcrcnn::data::{median_background, split_train_val, Augmentation, LabelMap};
use mcrcnn::eval::{accumulate_confusion, aggregate_report, binarize, compute_metrics, ConfusionCounts, VideoCounts};
use mcrcnn::model::{decode_checkpoint, encode_checkpoint, TrainingMeta};
use mcrcnn::ops::{concat_channels, minmax_normalize, split_channels};
use mcrcnn::{Mcrcnn, ModelConfig, Rng, Tensor};
use proptest::prelude::*;

const CODES: [u8; 5] = [0, 50, 85, 170, 255];

fn labels(codes: Vec<u8>, w: u32, h: u32) -> LabelMap {
    LabelMap::new(w, h, codes, Path::new("prop")).unwrap()
}

fn mask(bits: &[u8], w: usize, h: usize) -> Tensor {
    Tensor::new([1, 1, h, w], bits.iter().map(|&b| b as f32).collect()).unwrap()
}

fn sized_frame(w: usize, h: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>, usize, usize)> {
    (
        prop::collection::vec(0u8..2, w * h),
        prop::collection::vec(prop::sample::select(CODES.to_vec()), w * h),
        Just(w),
        Just(h),
    )
}

fn frame_pair() -> impl Strategy<Value = (Vec<u8>, Vec<u8>, usize, usize)> {
    (1usize..12, 1usize..12).prop_flat_map(|(w, h)| sized_frame(w, h))
}

fn counts() -> impl Strategy<Value = ConfusionCounts> {
    (0u64..500, 0u64..500, 0u64..500, 0u64..500).prop_map(|(tp, tn, fp, fn_)| ConfusionCounts { tp, tn, fp, fn_ })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn median_equals_sort_oracle(seed in any::<u64>(), count in 1usize..9, w in 1u32..9, h in 1u32..9) {
        let frames = random_frames(count, w, h, &mut Rng::new(seed));
        prop_assert!(median_background(&frames).unwrap().bitwise_eq(&median_oracle(&frames)));
    }

    #[test]
    fn median_ignores_frame_order(seed in any::<u64>(), count in 2usize..9) {
        let mut rng = Rng::new(seed);
        let mut frames = random_frames(count, 5, 4, &mut rng);
        let before = median_background(&frames).unwrap();
        rng.shuffle(&mut frames);
        prop_assert!(median_background(&frames).unwrap().bitwise_eq(&before));
    }

    #[test]
    fn augmentations_invert_and_preserve_values(seed in any::<u64>(), size in 1usize..9) {
        let mut rng = Rng::new(seed);
        let t = Tensor::from_fn([2, 3, size, size], |_| rng.uniform() as f32);
        let mut sorted = t.data().to_vec();
        sorted.sort_by(f32::total_cmp);
        for a in Augmentation::ALL {
            let y = a.apply(&t).unwrap();
            prop_assert!(a.inverse().apply(&y).unwrap().bitwise_eq(&t));
            let mut ys = y.data().to_vec();
            ys.sort_by(f32::total_cmp);
            prop_assert_eq!(&ys, &sorted);
        }
        let mut r = t.clone();
        for _ in 0..4 {
            r = Augmentation::Rot90.apply(&r).unwrap();
        }
        prop_assert!(r.bitwise_eq(&t));
    }

    #[test]
    fn confusion_matches_scalar_oracle((bits, codes, w, h) in frame_pair()) {
        let c = accumulate_confusion(&mask(&bits, w, h), &labels(codes.clone(), w as u32, h as u32)).unwrap();
        prop_assert_eq!([c.tp, c.tn, c.fp, c.fn_], confusion_oracle(&bits, &codes));
        let included = codes.iter().filter(|&&g| g == 0 || g == 50 || g == 255).count() as u64;
        prop_assert_eq!(c.total(), included);
    }

    #[test]
    fn metrics_are_bounded(c in counts()) {
        let m = compute_metrics(&c);
        for v in [m.precision, m.recall, m.fmeasure] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((0.0..=100.0).contains(&m.pwc));
        if c.tp > 0 {
            prop_assert!(m.precision.min(m.recall) - 1e-12 <= m.fmeasure);
            prop_assert!(m.fmeasure <= m.precision.max(m.recall) + 1e-12);
        }
        if c.total() > 0 {
            prop_assert_eq!(m.pwc == 0.0, c.fp == 0 && c.fn_ == 0);
        }
    }

    #[test]
    fn foreground_shrinks_as_threshold_rises(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let p = Tensor::from_fn([1, 1, 9, 7], |_| rng.uniform() as f32);
        let mut last = usize::MAX;
        for t in (0..=10).map(|i| i as f64 / 10.0) {
            let fg = binarize(&p, t).unwrap().data().iter().filter(|&&v| v == 1.0).count();
            prop_assert!(fg <= last);
            last = fg;
        }
        prop_assert_eq!(binarize(&p, 0.0).unwrap().data().iter().filter(|&&v| v == 1.0).count(), p.len());
    }

    #[test]
    fn video_metrics_ignore_frame_order(frames in prop::collection::vec(sized_frame(4, 4), 1..6), seed in any::<u64>()) {
        let per: Vec<ConfusionCounts> = frames
            .iter()
            .map(|(b, c, w, h)| accumulate_confusion(&mask(b, *w, *h), &labels(c.clone(), 4, 4)).unwrap())
            .collect();
        let mut shuffled = per.clone();
        Rng::new(seed).shuffle(&mut shuffled);
        let sum = |v: &[ConfusionCounts]| v.iter().fold(ConfusionCounts::default(), |a, &b| a + b);
        let entry = |c| VideoCounts { category: "c".into(), video: "v".into(), frames: per.len(), counts: c, threshold: 0.7 };
        let a = aggregate_report(&[entry(sum(&per))]).unwrap();
        let b = aggregate_report(&[entry(sum(&shuffled))]).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn report_ignores_video_order(cs in prop::collection::vec(counts(), 1..6), seed in any::<u64>()) {
        let mut entries: Vec<VideoCounts> = cs
            .iter()
            .enumerate()
            .map(|(i, &c)| VideoCounts { category: format!("cat{}", i % 2), video: format!("v{i}"), frames: 1, counts: c, threshold: 0.7 })
            .collect();
        let a = aggregate_report(&entries).unwrap();
        Rng::new(seed).shuffle(&mut entries);
        prop_assert_eq!(a, aggregate_report(&entries).unwrap());
    }

    #[test]
    fn split_partitions_items(n in 2usize..200, fraction in 0.05f64..0.95, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let (train, val) = split_train_val(&items, fraction, &mut Rng::new(seed)).unwrap();
        prop_assert!(!train.is_empty() && !val.is_empty());
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, items);
        let k = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
        prop_assert_eq!(train.len(), k);
    }

    #[test]
    fn concat_then_split_roundtrips(seed in any::<u64>(), ca in 1usize..4, cb in 1usize..4) {
        let mut rng = Rng::new(seed);
        let a = Tensor::from_fn([2, ca, 3, 4], |_| rng.normal() as f32);
        let b = Tensor::from_fn([2, cb, 3, 4], |_| rng.normal() as f32);
        let (x, y) = split_channels(&concat_channels(&a, &b).unwrap(), ca).unwrap();
        prop_assert!(x.bitwise_eq(&a) && y.bitwise_eq(&b));
    }

    #[test]
    fn minmax_output_spans_unit_interval(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let t = Tensor::from_fn([1, 1, 6, 5], |_| (rng.normal() * 10.0) as f32);
        let (lo, hi) = minmax_normalize(&t).min_max();
        prop_assert!(lo.abs() < 1e-6 && (hi - 1.0).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_bytes_roundtrip(seed in any::<u64>(), width in 1usize..6, deep in 1usize..5, rpm in 1usize..4) {
        let model = Mcrcnn::build(ModelConfig::reduced(width, deep, rpm), &mut Rng::new(seed)).unwrap();
        let bytes = encode_checkpoint(&model, &TrainingMeta::untrained(seed), None).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(encode_checkpoint(&back.model, &back.meta, None).unwrap(), bytes);
    }
}

mod common;

use attnvtg::eval::{delta_report, iou, DEFAULT_THRESHOLDS};
use attnvtg::gate::{decide, GateThresholds};
use attnvtg::headlab::{compute_gcs, select_top_k, sorted_drop_curve};
use attnvtg::interval::{frames_to_time, time_to_frames};
use attnvtg::reinference::{build_knockout_mask, build_soft_mask, plan_hard_crop, remap_local_prediction};
use attnvtg::relevance::{debias_head, fuse_heads, gaussian_smooth, normalized_entropy, smooth_normalize, CurveStage};
use attnvtg::*;
use proptest::prelude::*;

fn frame_counts() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(1u32..4, 1..24)
}

fn curve_values(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.0..1.0f64], 1..max_len)
}

prop_compose! {
    fn any_dump()(
        tokens in frame_counts(),
        m in 1usize..5,
        n_heads in 1usize..4,
        seed in any::<u64>(),
        kind in prop_oneof![Just(DumpKind::Positive), Just(DumpKind::ZeroVideo)],
        with_decode in any::<bool>(),
    ) -> AttentionDump {
        let n_v: usize = tokens.iter().map(|&n| n as usize).sum();
        let mut rng = attnvtg::rng::SplitMix64::new(seed);
        let heads = (0..n_heads)
            .map(|k| {
                let data = (0..m * n_v).map(|_| (rng.next_f64() / n_v as f64) as f32).collect();
                HeadAttention::new(HeadId::new(k as u32, 2 * k as u32), m, n_v, data).unwrap()
            })
            .collect();
        let mut d = common::dump(m, tokens, heads, kind);
        let duration = d.timeline.duration_s();
        if kind == DumpKind::Positive && with_decode {
            d.decode = Some(DecodeTrace { numeric_token_probs: vec![0.5, 1.0, rng.uniform(0.01, 1.0)] });
            d.stage1_prediction = Some(TimeInterval::new(0.0, duration / 2.0));
            d.ground_truth = Some(TimeInterval::new(duration / 4.0, duration));
        }
        d
    }
}

proptest! {
    #[test]
    fn dump_round_trip(d in any_dump()) {
        let bytes = dump_to_bytes(&d).unwrap();
        let back = dump_from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(dump_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn any_truncation_is_rejected(d in any_dump(), cut in 0.0..1.0f64) {
        let bytes = dump_to_bytes(&d).unwrap();
        let keep = ((bytes.len() - 1) as f64 * cut) as usize;
        prop_assert!(dump_from_bytes(&bytes[..keep]).is_err());
    }

    #[test]
    fn frame_of_token_is_monotone_and_onto(tokens in frame_counts()) {
        let n_v: usize = tokens.iter().map(|&n| n as usize).sum();
        let map = FrameTokenMap { tokens_per_frame: tokens.clone(), video_span_start: 0, video_span_end: n_v };
        let frames: Vec<usize> = (0..n_v).map(|i| map.frame_of_token(i).unwrap()).collect();
        prop_assert!(frames.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(frames[0], 1);
        prop_assert_eq!(*frames.last().unwrap(), tokens.len());
        prop_assert!(frames.windows(2).all(|w| w[1] - w[0] <= 1));
    }

    #[test]
    fn entropy_is_bounded(v in curve_values(40)) {
        let h = normalized_entropy(&v);
        prop_assert!(h >= -1e-12 && h <= (v.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn smoothing_keeps_mass(v in curve_values(40), sigma in 0.0..5.0f64) {
        let s = gaussian_smooth(&v, sigma);
        let (a, b): (f64, f64) = (v.iter().sum(), s.iter().sum());
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
        prop_assert!(s.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn smoothed_curves_are_distributions(v in curve_values(40), sigma in 0.0..5.0f64) {
        prop_assume!(v.iter().any(|&x| x > 0.0));
        let c = smooth_normalize(&RelevanceCurve::new(v, CurveStage::Aggregated, None), sigma).unwrap();
        prop_assert!((c.sum() - 1.0).abs() < 1e-9);
        prop_assert!(c.values().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn debiasing_is_nonnegative_and_vanishes_on_identical(v in curve_values(30), w in curve_values(30)) {
        let n = v.len().min(w.len());
        let a = RelevanceCurve::new(v[..n].to_vec(), CurveStage::SmoothedNormalized, None);
        let b = RelevanceCurve::new(w[..n].to_vec(), CurveStage::SmoothedNormalized, None);
        let s = debias_head(&a, &b, 1e-8).unwrap();
        prop_assert!(s.values().iter().all(|&x| x >= 0.0));
        let same = debias_head(&a, &a, 1e-8).unwrap();
        prop_assert!(same.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fusion_is_the_mean(curves in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 6), 1..6)) {
        let cs: Vec<RelevanceCurve> =
            curves.iter().map(|c| RelevanceCurve::new(c.clone(), CurveStage::DebiasedPerHead, None)).collect();
        let fused = fuse_heads(&cs).unwrap();
        for j in 0..6 {
            let mean = curves.iter().map(|c| c[j]).sum::<f64>() / curves.len() as f64;
            prop_assert!((fused.values()[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn detected_interval_is_in_range(v in curve_values(48), rho in 0.05..1.0f64, delta in 0.0..8.0f64, r in 0.0..0.6f64) {
        let t = v.len();
        let timeline = Timeline::new(t as f64, t).unwrap();
        let params = IntervalParams { threshold_ratio: rho, dilation_s: delta, expansion_ratio: r };
        let curve = RelevanceCurve::new(v.clone(), CurveStage::Fused, None);
        match detect_interval(&curve, &timeline, &params) {
            Ok(f) => {
                prop_assert!(1 <= f.first && f.first <= f.last && f.last <= t);
                let max = v.iter().copied().fold(0.0, f64::max);
                prop_assert!(v[f.index_range()].iter().any(|&x| x >= rho * max));
            }
            Err(Error::DetectionFailed) => prop_assert!(v.iter().all(|&x| x == 0.0)),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn frame_time_round_trip(t in 1usize..200, dt in prop_oneof![Just(0.5), Just(1.0), Just(2.0), Just(0.1), 0.05..3.0f64], a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let timeline = Timeline::new(t as f64 * dt, t).unwrap();
        let first = 1 + ((t - 1) as f64 * a.min(b)) as usize;
        let last = (1 + ((t - 1) as f64 * a.max(b)) as usize).max(first);
        let f = FrameInterval::new(first, last, t).unwrap();
        prop_assert_eq!(time_to_frames(frames_to_time(f, &timeline), &timeline), f);
    }

    #[test]
    fn remap_stays_on_the_timeline(t in 2usize..100, a in 0.0..1.0f64, b in 0.0..1.0f64, s in -5.0..50.0f64, e in -5.0..50.0f64) {
        let timeline = Timeline::new(t as f64 * 0.5, t).unwrap();
        let first = 1 + ((t - 1) as f64 * a.min(b)) as usize;
        let last = (1 + ((t - 1) as f64 * a.max(b)) as usize).max(first);
        let plan = plan_hard_crop(FrameInterval { first, last }, &timeline);
        let out = remap_local_prediction(TimeInterval::new(s, e), &plan, &timeline);
        prop_assert!(0.0 <= out.start_s && out.start_s <= out.end_s && out.end_s <= timeline.duration_s());
    }

    #[test]
    fn soft_mask_blocks_exactly_the_outside(tokens in frame_counts(), a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let t = tokens.len();
        let n_v: usize = tokens.iter().map(|&n| n as usize).sum();
        let map = FrameTokenMap { tokens_per_frame: tokens, video_span_start: 5, video_span_end: 5 + n_v };
        let first = 1 + ((t - 1) as f64 * a.min(b)) as usize;
        let last = (1 + ((t - 1) as f64 * a.max(b)) as usize).max(first);
        let mask = build_soft_mask(FrameInterval { first, last }, &map);
        mask.validate(5 + n_v).unwrap();
        for pos in 5..5 + n_v {
            let blocked = mask.blocked.iter().any(|&(s, e)| s <= pos && pos < e);
            let frame = map.frame_of_token(pos - 5).unwrap();
            prop_assert_eq!(blocked, frame < first || frame > last);
        }
        prop_assert_eq!(MaskSpec::from_json(&mask.to_json()).unwrap(), mask);
    }

    #[test]
    fn knockout_mask_round_trips(tokens in frame_counts(), m in 1usize..8, layer in 0u32..40, head in 0u32..40) {
        let n_v: usize = tokens.iter().map(|&n| n as usize).sum();
        let map = FrameTokenMap { tokens_per_frame: tokens, video_span_start: 3, video_span_end: 3 + n_v };
        let query = QueryTokens { texts: vec!["x".into(); m], span_start: 3 + n_v + 2, span_end: 3 + n_v + 2 + m };
        let mask = build_knockout_mask(HeadId::new(layer, head), &query, &map);
        mask.validate(query.span_end).unwrap();
        prop_assert_eq!(mask.blocked_count(), n_v);
        prop_assert_eq!(MaskSpec::from_json(&mask.to_json()).unwrap(), mask);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in 0.0..10.0f64, b in 0.0..10.0f64, c in 0.0..10.0f64, d in 0.0..10.0f64) {
        let x = TimeInterval::new(a.min(b), a.max(b));
        let y = TimeInterval::new(c.min(d), c.max(d));
        let v = iou(x, y);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(y, x));
        prop_assert_eq!(iou(x, x), 1.0);
    }

    #[test]
    fn deltas_are_antisymmetric(xs in prop::collection::vec(0.0..1.0f64, 1..20), ys in prop::collection::vec(0.0..1.0f64, 1..20)) {
        let a = eval::aggregate_ious(&xs, &DEFAULT_THRESHOLDS).unwrap();
        let b = eval::aggregate_ious(&ys, &DEFAULT_THRESHOLDS).unwrap();
        let ab = delta_report(&a, &b).unwrap();
        let ba = delta_report(&b, &a).unwrap();
        prop_assert_eq!(ab.miou, -ba.miou);
        for (k, v) in &ab.r1_at {
            prop_assert_eq!(*v, -ba.r1_at[k]);
        }
    }

    #[test]
    fn gate_accepts_iff_a_threshold_is_met(c_dec in prop::option::of(0.0..1.0f64), c_attn in 0.0..1.0f64, td in 0.0..1.0f64, ta in 0.0..1.0f64) {
        let d = decide(c_dec, c_attn, &GateThresholds { theta_dec: td, theta_attn: ta });
        let accept = c_dec.is_some_and(|c| c >= td) || c_attn >= ta;
        prop_assert_eq!(d.verdict == Verdict::AcceptStage1, accept);
    }

    #[test]
    fn top_k_dominates_the_rest(drops in prop::collection::vec(-2.0..10.0f64, 1..60), k_frac in 0.0..1.0f64) {
        let results: Vec<KnockoutResult> = drops
            .iter()
            .enumerate()
            .map(|(i, d)| KnockoutResult { layer: (i / 8) as u32, head: (i % 8) as u32, miou: 50.0 - d })
            .collect();
        let table = compute_gcs(50.0, &results).unwrap();
        let k = 1 + ((drops.len() - 1) as f64 * k_frac) as usize;
        let top = select_top_k(&table, k).unwrap();
        prop_assert_eq!(top.len(), k);
        let gcs = |h: HeadId| table.entries.iter().find(|e| e.head == h).unwrap().gcs;
        let floor = top.iter().map(|&h| gcs(h)).fold(f64::INFINITY, f64::min);
        prop_assert!(table.entries.iter().filter(|e| !top.contains(&e.head)).all(|e| e.gcs <= floor));
        let curve = sorted_drop_curve(&table);
        prop_assert!(curve.windows(2).all(|w| w[0].1 >= w[1].1));
    }
}

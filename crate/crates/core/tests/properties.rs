use proptest::prelude::*;

use scdm_core::eval_infer::{nms, rank_order, recall_at, ScoredSegment};
use scdm_core::head::{decode, encode_targets, generate_anchors, Anchor};
use scdm_core::init;
use scdm_core::objective::{match_anchors, tiou, Label, Segment};
use scdm_core::scdm::modulate_values;
use scdm_core::tensor::{conv_out_len, Tape, Tensor};

fn segment() -> impl Strategy<Value = Segment> {
    (0.0..0.98f64, 0.001..1.0f64).prop_map(|(s, w)| Segment::new(s, (s + w).min(1.0).max(s + 1e-3)).unwrap())
}

fn scored() -> impl Strategy<Value = ScoredSegment> {
    // Few distinct scores so ties are common.
    (segment(), 0..8u8).prop_map(|(segment, s)| ScoredSegment { segment, score: f64::from(s) / 8.0 })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0..5.0f64, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn conv_length_law(t in 1usize..300, k in 1usize..8, stride in 1usize..4, padding in 0usize..3) {
        prop_assume!(k <= t + 2 * padding);
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::filled(vec![t, 2], 1.0));
        let w = tape.constant(&Tensor::filled(vec![k, 2, 3], 0.5));
        let y = tape.conv1d(x, w, stride, padding).unwrap();
        let want = (t + 2 * padding - k) / stride + 1;
        prop_assert_eq!(conv_out_len(t, k, stride, padding), Some(want));
        prop_assert_eq!(tape.shape(y), &[want, 3]);
    }

    #[test]
    fn backbone_layer_halves_even_lengths(m in 1usize..2048) {
        prop_assert_eq!(conv_out_len(2 * m, 3, 2, 1), Some(m));
    }

    #[test]
    fn tiou_is_symmetric_and_bounded(a in segment(), b in segment()) {
        let ab = tiou(&a, &b).unwrap();
        prop_assert_eq!(ab, tiou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((tiou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        if a.end <= b.start || b.end <= a.start {
            prop_assert_eq!(ab, 0.0);
        }
    }

    #[test]
    fn nms_output_is_ranked_sparse_and_bounded(
        segs in prop::collection::vec(scored(), 0..60),
        thr in 0.05..=1.0f64,
        keep in 1usize..15,
    ) {
        let out = nms(&segs, thr, keep).unwrap();
        prop_assert!(out.len() <= keep.min(segs.len()));
        prop_assert!(out.iter().all(|s| segs.contains(s)));
        prop_assert!(out.windows(2).all(|w| rank_order(&w[0], &w[1]).is_le()));
        for (i, a) in out.iter().enumerate() {
            for b in &out[i + 1..] {
                prop_assert!(tiou(&a.segment, &b.segment).unwrap() <= thr);
            }
        }
        if !segs.is_empty() {
            let best = segs.iter().min_by(|a, b| rank_order(a, b)).unwrap();
            prop_assert_eq!(&out[0], best);
        }
    }

    #[test]
    fn recall_is_monotone(
        lists in prop::collection::vec(prop::collection::vec(scored(), 0..8), 1..12),
        gt in segment(),
        m1 in 0.0..0.9f64,
        dm in 0.0..0.1f64,
    ) {
        let gts = vec![gt; lists.len()];
        let r = |n, m| recall_at(&lists, &gts, n, m).unwrap();
        prop_assert!(r(1, m1) <= r(5, m1));
        prop_assert!(r(5, m1 + dm) <= r(5, m1));
        prop_assert!((0.0..=1.0).contains(&r(1, m1)));
    }

    #[test]
    fn encode_then_decode_is_identity(
        t_k in 1usize..64, unit_frac in 0.0..1.0f64, ratio in 0.1..=1.0f64,
        gc in -0.2..1.2f64, gw in 1e-3..1.5f64,
    ) {
        let unit = ((unit_frac * t_k as f64) as usize).min(t_k - 1);
        let a = Anchor::new(0, unit, t_k, ratio);
        let (dc, dw) = encode_targets(&a, gc, gw, 0.1, 0.1).unwrap();
        let (c, w) = decode(&a, dc, dw, 0.1, 0.1);
        prop_assert!((c - gc).abs() < 1e-9 && (w - gw).abs() < 1e-9);
    }

    #[test]
    fn matched_positives_exceed_threshold(gt in segment(), thr in 0.1..0.9f64) {
        let anchors = generate_anchors(&[16, 8, 4, 2], &[0.25, 0.5, 0.75, 1.0]).unwrap();
        let m = match_anchors(&anchors, &gt, thr, 0.1, 0.1).unwrap();
        prop_assert_eq!(m.n_pos + m.n_neg, anchors.len());
        for (j, a) in anchors.anchors.iter().enumerate() {
            let g = tiou(&Segment::new(a.start(), a.end()).unwrap(), &gt).unwrap();
            prop_assert!((m.g_over[j] - g).abs() < 1e-12);
            prop_assert_eq!(m.labels[j] == Label::Positive, g > thr);
            prop_assert_eq!(m.targets[j].is_some(), g > thr);
        }
    }

    #[test]
    fn identity_modulation_standardizes(a in matrix(6, 4)) {
        let out = modulate_values(&a, &Tensor::filled(vec![6, 4], 1.0), &Tensor::zeros(vec![6, 4]), 1e-5).unwrap();
        for c in 0..4 {
            let col: Vec<f64> = (0..6).map(|r| a.row(r)[c]).collect();
            let m = col.iter().sum::<f64>() / 6.0;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 6.0).sqrt();
            prop_assume!(sd > 1e-3);
            let o: Vec<f64> = (0..6).map(|r| out.row(r)[c]).collect();
            let om = o.iter().sum::<f64>() / 6.0;
            let osd = (o.iter().map(|v| (v - om).powi(2)).sum::<f64>() / 6.0).sqrt();
            prop_assert!(om.abs() < 1e-9 && (osd - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn modulation_is_affine_in_gamma_and_beta(a in matrix(5, 3), g in matrix(5, 3), b in matrix(5, 3)) {
        let ones = Tensor::filled(vec![5, 3], 1.0);
        let zeros = Tensor::zeros(vec![5, 3]);
        let normed = modulate_values(&a, &ones, &zeros, 1e-5).unwrap();
        let out = modulate_values(&a, &g, &b, 1e-5).unwrap();
        for i in 0..15 {
            let want = g.data()[i] * normed.data()[i] + b.data()[i];
            prop_assert!((out.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn seeded_streams_are_reproducible(seed in any::<u64>(), stream in 0u64..100) {
        let s = init::derive_seed(seed, stream);
        prop_assert_eq!(s, init::derive_seed(seed, stream));
        let a = init::uniform(&mut init::rng(s), vec![4], 1.0);
        prop_assert_eq!(a, init::uniform(&mut init::rng(s), vec![4], 1.0));
    }

    #[test]
    fn clamped_segments_stay_in_unit_interval(s in -1.0..1.5f64, w in 1e-3..2.0f64) {
        let seg = Segment::new(s, s + w).unwrap();
        match seg.clamp_unit() {
            Some(c) => prop_assert!(0.0 <= c.start && c.start < c.end && c.end <= 1.0),
            None => prop_assert!(s + w <= 0.0 || s >= 1.0),
        }
    }
}

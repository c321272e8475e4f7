//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any criterion fails.
//!
//! Runs without the libtest harness so the lines are always visible:
//! `cargo test --test acceptance`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;

use scdm_core::backbone::{build_pyramid, BackboneConfig, BackboneParams};
use scdm_core::config::{ConditioningMode, LossConfig, ModelConfig, TrainConfig};
use scdm_core::eval_infer::{nms, rank_order, ScoredSegment};
use scdm_core::harness::gradcheck::{check_full_model, GradCheckSetup};
use scdm_core::harness::{evaluate, gen_synthetic, train, Checkpoint, Dataset, SynthConfig};
use scdm_core::head::{decode, encode_targets, generate_anchors, Anchor, DEFAULT_RATIOS};
use scdm_core::model::{Model, Query};
use scdm_core::objective::{loss_all, match_anchors, smooth_l1, soft_cross_entropy, tiou, Label, Segment};
use scdm_core::scdm::{apply_conditioning, modulate_values, Conditioner};
use scdm_core::tensor::{ParamStore, Tape, Tensor};
use scdm_core::text_encoder::SentenceEncoding;
use scdm_core::{init, Error, InferConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let report = check_full_model(&GradCheckSetup::default()).map_err(fail)?;
    let elapsed = t0.elapsed();
    let worst = report
        .entries
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .ok_or("no parameter groups")?;
    check(
        report.passes(1e-3) && elapsed < Duration::from_secs(60),
        format!(
            "{} groups, worst {} at {:.3e} (< 1e-3), {:.2?} (< 60 s)",
            report.entries.len(),
            worst.name,
            worst.max_rel_error,
            elapsed
        ),
    )
}

fn pyramid_law() -> Outcome {
    let mut rng = init::rng(3);
    let lengths = |t: usize, k: usize, rng: &mut init::SeededRng| -> Result<Vec<usize>, String> {
        let cfg = BackboneConfig::new(k, t, 3, 4).map_err(fail)?;
        let mut store = ParamStore::new();
        let params = BackboneParams::register(&mut store, rng, cfg);
        let fused = init::uniform(rng, vec![t, 3], 1.0);
        Ok(build_pyramid(&params, &store, &fused).map_err(fail)?.lengths())
    };
    let charades = lengths(64, 6, &mut rng)?;
    if charades != [32, 16, 8, 4, 2, 1] {
        return Err(format!("T=64, K=6 gave {charades:?}"));
    }
    let mut cases = 0;
    for t in (16..=1024).step_by(16) {
        for k in 1..=6 {
            if t % (1 << k) != 0 {
                continue;
            }
            let got = lengths(t, k, &mut rng)?;
            let want: Vec<usize> = (1..=k).map(|j| t / (1 << j)).collect();
            if got != want {
                return Err(format!("T={t}, K={k}: {got:?} != {want:?}"));
            }
            cases += 1;
        }
    }
    Ok(format!("T=64,K=6 -> {charades:?}; {cases} (T, K) cases over T in 16..=1024"))
}

fn offset_round_trip() -> Outcome {
    let t0 = Instant::now();
    let worked = Anchor::new(0, 0, 1, 0.25);
    let (c, w) = decode(&worked, 1.0, 1.0, 0.1, 0.1);
    let worked_err = (c - 0.525).abs().max((w - 0.25 * 0.1f64.exp()).abs());
    let anchors = generate_anchors(&[32, 16, 8, 4, 2], &DEFAULT_RATIOS).map_err(fail)?;
    let mut rng = init::rng(5);
    let mut max_err: f64 = 0.0;
    for _ in 0..10_000 {
        let a = &anchors.anchors[rng.random_range(0..anchors.len())];
        let gc = rng.random_range(0.0..1.0);
        let gw = rng.random_range(0.01..1.0);
        let (dc, dw) = encode_targets(a, gc, gw, 0.1, 0.1).map_err(fail)?;
        let (c, w) = decode(a, dc, dw, 0.1, 0.1);
        max_err = max_err.max((c - gc).abs()).max((w - gw).abs());
    }
    let elapsed = t0.elapsed();
    check(
        worked_err < 1e-9 && max_err < 1e-9 && elapsed < Duration::from_secs(1),
        format!("worked value err {worked_err:.1e}, round trip max err {max_err:.1e} over 1e4 pairs, {elapsed:.2?}"),
    )
}

/// Counts grid midpoints inside each interval.
fn brute_tiou(a: &Segment, b: &Segment, cells: usize) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..cells {
        let x = (i as f64 + 0.5) / cells as f64;
        let (ia, ib) = (a.start <= x && x < a.end, b.start <= x && x < b.end);
        inter += (ia && ib) as usize;
        union += (ia || ib) as usize;
    }
    inter as f64 / union as f64
}

/// Selection-by-scan reference: pick the best survivor, suppress, repeat.
fn reference_nms(segs: &[ScoredSegment], thr: f64, max_keep: usize) -> Vec<ScoredSegment> {
    let mut alive = vec![true; segs.len()];
    let mut kept = Vec::new();
    while kept.len() < max_keep {
        let mut best: Option<usize> = None;
        for i in 0..segs.len() {
            if alive[i] && best.is_none_or(|b| rank_order(&segs[i], &segs[b]).is_lt()) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(segs[b]);
        for i in 0..segs.len() {
            if alive[i] && tiou(&segs[b].segment, &segs[i].segment).unwrap() > thr {
                alive[i] = false;
            }
        }
        alive[b] = false;
    }
    kept
}

fn oracle_equivalence() -> Outcome {
    let t0 = Instant::now();
    let mut rng = init::rng(7);
    let span = |rng: &mut init::SeededRng| {
        let w = rng.random_range(0.02..1.0);
        let s = rng.random_range(0.0..1.0 - w);
        Segment::new(s, s + w).unwrap()
    };

    let mut tiou_err: f64 = 0.0;
    for _ in 0..1000 {
        let (a, b) = (span(&mut rng), span(&mut rng));
        tiou_err = tiou_err.max((tiou(&a, &b).map_err(fail)? - brute_tiou(&a, &b, 1_000_000)).abs());
    }

    let mut nms_sets = 0;
    for _ in 0..1000 {
        let n = rng.random_range(0..=200);
        // Quantized scores force ties through the secondary keys.
        let segs: Vec<ScoredSegment> = (0..n)
            .map(|_| ScoredSegment { segment: span(&mut rng), score: rng.random_range(0..20) as f64 / 20.0 })
            .collect();
        let thr = rng.random_range(0.05..=1.0);
        let keep = rng.random_range(1..=12);
        if nms(&segs, thr, keep).map_err(fail)? != reference_nms(&segs, thr, keep) {
            return Err(format!("nms mismatch on a set of {n} at threshold {thr}"));
        }
        nms_sets += 1;
    }

    let lengths = [32, 16, 8, 4, 2];
    let anchors = generate_anchors(&lengths, &DEFAULT_RATIOS).map_err(fail)?;
    let mut match_err: f64 = 0.0;
    for _ in 0..200 {
        let gt = span(&mut rng);
        let m = match_anchors(&anchors, &gt, 0.5, 0.1, 0.1).map_err(fail)?;
        let mut j = 0;
        for (k, &t_k) in lengths.iter().enumerate() {
            for i in 0..t_k {
                for &r in &DEFAULT_RATIOS {
                    let (c, w) = ((i as f64 + 0.5) / t_k as f64, r / t_k as f64);
                    let (s, e) = (c - w / 2.0, c + w / 2.0);
                    // Overlapping intervals: the union is their hull.
                    let inter = e.min(gt.end) - s.max(gt.start);
                    let g = if inter > 0.0 { inter / (e.max(gt.end) - s.min(gt.start)) } else { 0.0 };
                    let positive = g > 0.5;
                    let a = &anchors.anchors[j];
                    if a.layer != k || a.unit != i || (m.labels[j] == Label::Positive) != positive {
                        return Err(format!("anchor {j} (layer {k}, unit {i}, ratio {r}) disagrees"));
                    }
                    match_err = match_err.max((m.g_over[j] - g).abs());
                    if let Some((dc, dw)) = m.targets[j] {
                        let want = ((gt.center() - c) / (0.1 * w), (gt.width() / w).ln() / 0.1);
                        match_err = match_err.max((dc - want.0).abs()).max((dw - want.1).abs());
                    }
                    j += 1;
                }
            }
        }
    }
    let elapsed = t0.elapsed();
    check(
        tiou_err < 2e-4 && match_err < 1e-12 && elapsed < Duration::from_secs(30),
        format!(
            "tIoU max err {tiou_err:.1e} (< 2e-4) over 1e3 pairs; nms identical on {nms_sets} sets; \
             matching labels identical, values within {match_err:.0e}; {elapsed:.2?}"
        ),
    )
}

fn loss_unit_values() -> Outcome {
    let ce = soft_cross_entropy(0.5, 0.5);
    let (s1, s2) = (smooth_l1(0.5), smooth_l1(2.0));
    let mut ok = (ce - 2f64.ln()).abs() < 1e-9 && s1 == 0.125 && s2 == 1.5;

    // Linearity of the total on a real batch loss.
    let data = gen_synthetic(&SynthConfig { train_size: 2, val_size: 0, test_size: 0, ..SynthConfig::default() })
        .map_err(fail)?
        .train;
    let cfg = ModelConfig { vocab_size: data.vocabulary.size(), ..ModelConfig::default() };
    let model = Model::new(cfg, 0).map_err(fail)?;
    let queries: Vec<Query> = data.examples.iter().map(|e| e.query()).collect();
    let gts: Vec<Segment> = data.examples.iter().map(|e| e.gt).collect();
    let mut worst: f64 = 0.0;
    for (lambda, eta) in [(100.0, 10.0), (1.0, 0.0), (0.0, 1.0), (3.5, 0.25)] {
        let loss = LossConfig { lambda, eta, ..LossConfig::default() };
        let mut tape = Tape::new();
        let b = model.batch_loss(&mut tape, &queries, &gts, &loss).map_err(fail)?;
        let total = tape.scalar(b.total);
        let parts = lambda * tape.scalar(b.l_over) + eta * tape.scalar(b.l_loc);
        let formula = loss_all(tape.scalar(b.l_over), tape.scalar(b.l_loc), lambda, eta).l_all;
        worst = worst.max((total - parts).abs() / parts.abs().max(1.0)).max((formula - parts).abs());
    }
    ok &= worst < 1e-12;
    check(ok, format!("CE(0.5,0.5)-ln2 = {:.1e}, SL1(0.5) = {s1}, SL1(2) = {s2}, linearity err {worst:.1e}", ce - 2f64.ln()))
}

fn train_on(data: &Dataset, mode: ConditioningMode, seed: u64) -> Result<Model, String> {
    let mut cfg = TrainConfig { seed, eval_every: 0, ..TrainConfig::default() };
    cfg.model.vocab_size = data.vocabulary.size();
    cfg.model.mode = mode;
    Ok(train(&cfg, data, None, &mut |_| {}).map_err(fail)?.0)
}

fn r1_at_05(model: &Model, test: &Dataset) -> Result<f64, String> {
    let report = evaluate(model, test, &InferConfig::default(), 0).map_err(fail)?;
    report.recall(1, 0.5).ok_or_else(|| "missing R@1,IoU@0.5".to_string())
}

fn learnability() -> Outcome {
    let t0 = Instant::now();
    let splits = gen_synthetic(&SynthConfig::default()).map_err(fail)?;
    let model = train_on(&splits.train, ConditioningMode::Scdm, 0)?;
    let r = r1_at_05(&model, &splits.test)?;
    let elapsed = t0.elapsed();
    check(
        r >= 0.90 && elapsed < Duration::from_secs(15 * 60),
        format!("SCDM R@1,IoU@0.5 = {r:.4} (>= 0.90) on {} test queries, {elapsed:.1?} (< 15 min)", splits.test.len()),
    )
}

fn ablation_trend() -> Outcome {
    let modes = [ConditioningMode::Scdm, ConditioningMode::Scm, ConditioningMode::None];
    let mut sums = [0.0; 3];
    let mut per_seed = Vec::new();
    for seed in 0..3 {
        let splits = gen_synthetic(&SynthConfig { seed, ..SynthConfig::compositional() }).map_err(fail)?;
        let mut row = Vec::new();
        for (i, &mode) in modes.iter().enumerate() {
            let r = r1_at_05(&train_on(&splits.train, mode, seed)?, &splits.test)?;
            sums[i] += r;
            row.push(format!("{r:.3}"));
        }
        per_seed.push(format!("seed {seed}: {}", row.join("/")));
    }
    let [scdm, scm, none] = sums.map(|s| s / 3.0);
    check(
        scdm >= scm && scm >= none && scdm - none >= 0.03,
        format!(
            "mean SCDM {scdm:.4} >= SCM {scm:.4} >= NONE {none:.4}, SCDM-NONE = {:.4} (>= 0.03); {}",
            scdm - none,
            per_seed.join(", ")
        ),
    )
}

fn modulation_invariants() -> Outcome {
    let splits = gen_synthetic(&SynthConfig { train_size: 100, val_size: 0, test_size: 0, ..SynthConfig::default() })
        .map_err(fail)?;
    let cfg = ModelConfig { vocab_size: splits.train.vocabulary.size(), ..ModelConfig::default() };
    let model = Model::new(cfg.clone(), 1).map_err(fail)?;
    let mut row_err: f64 = 0.0;
    let mut layers = 0;
    for ex in &splits.train.examples {
        for rec in model.attention(ex.query()).map_err(fail)? {
            layers += 1;
            for r in 0..rec.weights.rows() {
                row_err = row_err.max((rec.weights.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }

    let mut rng = init::rng(13);
    let mut std_err: f64 = 0.0;
    let mut channels = 0;
    for t in [2, 3, 8, 32] {
        let mut a = init::uniform(&mut rng, vec![t, 6], 3.0);
        // One constant channel: degenerate, excluded from the check.
        for r in 0..t {
            a.data_mut()[r * 6 + 5] = 0.7;
        }
        let out = modulate_values(&a, &Tensor::filled(vec![t, 6], 1.0), &Tensor::zeros(vec![t, 6]), 1e-5)
            .map_err(fail)?;
        for c in 0..5 {
            let col: Vec<f64> = (0..t).map(|r| out.row(r)[c]).collect();
            let mean = col.iter().sum::<f64>() / t as f64;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64).sqrt();
            std_err = std_err.max(mean.abs()).max((std - 1.0).abs());
            channels += 1;
        }
    }

    let none_cfg = ModelConfig { mode: ConditioningMode::None, ..cfg };
    let none = Model::new(none_cfg, 2).map_err(fail)?;
    let Conditioner::None(_) = &none.conditioners()[0] else {
        return Err("NONE model has no batch-norm conditioner".into());
    };
    let map = init::uniform(&mut rng, vec![16, 32], 1.0);
    let sentence = |rng: &mut init::SeededRng, n: usize| SentenceEncoding {
        word_states: init::uniform(rng, vec![n, 32], 1.0),
        global: init::uniform(rng, vec![32], 1.0),
    };
    let reference = apply_conditioning(&none.conditioners()[0], &none.params, &sentence(&mut rng, 3), &map, 1e-5)
        .map_err(fail)?;
    let mut independent = true;
    for n in 1..=20 {
        for c in none.conditioners() {
            let out = apply_conditioning(c, &none.params, &sentence(&mut rng, n), &map, 1e-5).map_err(fail)?;
            let base = apply_conditioning(c, &none.params, &sentence(&mut rng, 1), &map, 1e-5).map_err(fail)?;
            independent &= out.data().iter().zip(base.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        }
    }
    let first = apply_conditioning(&none.conditioners()[0], &none.params, &sentence(&mut rng, 7), &map, 1e-5)
        .map_err(fail)?;
    independent &= first == reference;

    check(
        row_err < 1e-6 && std_err < 1e-6 && independent,
        format!(
            "attention row err {row_err:.1e} over {layers} layer maps; standardization err {std_err:.1e} on \
             {channels} channels; NONE conditioning bitwise sentence-independent: {independent}"
        ),
    )
}

fn determinism_and_persistence() -> Outcome {
    let synth = SynthConfig { train_size: 64, val_size: 16, test_size: 0, ..SynthConfig::default() };
    let a = gen_synthetic(&synth).map_err(fail)?;
    let b = gen_synthetic(&synth).map_err(fail)?;
    let same_data = a == b;

    let mut cfg = TrainConfig { steps: 40, eval_every: 10, ..TrainConfig::default() };
    cfg.model.vocab_size = a.train.vocabulary.size();
    let run = || train(&cfg, &a.train, Some(&a.val), &mut |_| {});
    let (m1, opt, r1) = run().map_err(fail)?;
    let (_, _, r2) = run().map_err(fail)?;
    let same_history = r1 == r2 && r1.evals.len() == 4;

    let ckpt = Checkpoint::capture(&m1, &cfg, 40, Some(&opt));
    let bytes = ckpt.to_bytes().map_err(fail)?;
    let back = Checkpoint::from_bytes(&bytes).map_err(fail)?;
    let bitwise = back.to_bytes().map_err(fail)? == bytes
        && back.arrays.iter().zip(&ckpt.arrays).all(|(x, y)| {
            x.0 == y.0 && x.1 == y.1 && x.2.iter().zip(&y.2).all(|(p, q)| p.to_bits() == q.to_bits())
        });

    let mut corrupt = bytes.clone();
    let last = corrupt.len() - 1;
    corrupt[last] ^= 0x40;
    let rejects_corrupt = matches!(Checkpoint::from_bytes(&corrupt), Err(Error::Load(_)));
    let rejects_truncated = matches!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]), Err(Error::Load(_)));

    check(
        same_data && same_history && bitwise && rejects_corrupt && rejects_truncated,
        format!(
            "datasets equal: {same_data}; histories equal ({} steps, {} evals): {same_history}; \
             checkpoint round trip bitwise: {bitwise}; corrupt rejected: {rejects_corrupt}; \
             truncated rejected: {rejects_truncated}",
            r1.steps.len(),
            r1.evals.len()
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("pyramid law", pyramid_law),
        ("offset decode/encode exactness", offset_round_trip),
        ("oracle equivalence", oracle_equivalence),
        ("loss unit values", loss_unit_values),
        ("learnability", learnability),
        ("ablation trend", ablation_trend),
        ("modulation invariants", modulation_invariants),
        ("determinism and persistence", determinism_and_persistence),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match run() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

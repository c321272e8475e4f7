//! Synthetic grounding tasks.
//!
//! Every query word names a prototype clip vector. A video is Gaussian
//! background noise in which the queried prototype occupies a contiguous
//! span; other prototypes appear elsewhere as distractors, so the sentence is
//! needed to pick the right span. In compositional mode a query names two
//! prototypes that occur back-to-back, while each of them also occurs alone
//! (and the reversed pair may occur) elsewhere in the video.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::VideoFeatureSequence;
use crate::harness::dataset::{Dataset, GroundingExample};
use crate::init::{self, SeededRng};
use crate::objective::Segment;
use crate::text_encoder::Vocabulary;

const FILLERS: [&str; 4] = ["the", "person", "then", "video"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_prototypes: usize,
    pub d_v: usize,
    /// Model input length; raw videos never exceed it.
    pub input_length: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Target width bounds as fractions of the input length.
    pub min_width: f64,
    pub max_width: f64,
    /// Shortest raw video as a fraction of the input length.
    pub min_length: f64,
    pub distractors: usize,
    /// Prepend up to this many filler words to each query.
    pub max_fillers: usize,
    pub compositional: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_prototypes: 8,
            d_v: 16,
            input_length: 64,
            noise_sigma: 0.3,
            seed: 0,
            train_size: 2000,
            val_size: 200,
            test_size: 500,
            min_width: 0.1,
            max_width: 0.4,
            min_length: 0.75,
            distractors: 2,
            max_fillers: 2,
            compositional: false,
        }
    }
}

impl SynthConfig {
    /// The two-prototype benchmark used for conditioning ablations.
    pub fn compositional() -> Self {
        SynthConfig { compositional: true, min_width: 0.16, max_width: 0.4, ..SynthConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_prototypes < 2 {
            return bad("need at least two prototypes".into());
        }
        if self.d_v == 0 || self.input_length == 0 {
            return bad("d_v and input length must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be non-negative".into());
        }
        if !(self.min_length > 0.0 && self.min_length <= 1.0) {
            return bad(format!("min_length {} outside (0, 1]", self.min_length));
        }
        if !(self.min_width > 0.0 && self.min_width <= self.max_width && self.max_width <= self.min_length) {
            return bad(format!(
                "width bounds [{}, {}] must satisfy 0 < min <= max <= min_length ({})",
                self.min_width, self.max_width, self.min_length
            ));
        }
        let parts = if self.compositional { 2 } else { 1 };
        let (lo, hi) = self.width_range();
        if lo < parts || lo > hi {
            return bad(format!(
                "no whole-clip width in [{}, {}] of {} clips fits {parts} part(s)",
                self.min_width, self.max_width, self.input_length
            ));
        }
        Ok(())
    }

    /// Whole-clip target widths allowed by the fractional bounds.
    fn width_range(&self) -> (usize, usize) {
        let t = self.input_length as f64;
        ((self.min_width * t).ceil() as usize, (self.max_width * t + 1e-9).floor() as usize)
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let words: Vec<String> = (0..self.num_prototypes)
            .map(|p| format!("act{p}"))
            .chain(FILLERS.iter().map(|s| s.to_string()))
            .collect();
        Vocabulary::new(words).expect("generated words are distinct")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSplits {
    pub prototypes: Vec<Vec<f64>>,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn prototypes(cfg: &SynthConfig) -> Result<Vec<Vec<f64>>> {
    let mut rng = init::rng(init::derive_seed(cfg.seed, 0));
    let min_dist = 4.0 * cfg.noise_sigma;
    for _ in 0..100 {
        let protos: Vec<Vec<f64>> = (0..cfg.num_prototypes)
            .map(|_| (0..cfg.d_v).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        let separated = protos.iter().enumerate().all(|(i, a)| {
            protos[i + 1..]
                .iter()
                .all(|b| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() > min_dist)
        });
        if separated {
            return Ok(protos);
        }
    }
    Err(Error::Config(format!(
        "could not draw {} prototypes of width {} separated by 4 sigma = {min_dist}",
        cfg.num_prototypes, cfg.d_v
    )))
}

/// Finds a free start for a span of `len` clips inside `[0, limit)`.
fn place(rng: &mut SeededRng, taken: &[(usize, usize)], len: usize, limit: usize) -> Option<usize> {
    if len > limit {
        return None;
    }
    for _ in 0..64 {
        let s = rng.random_range(0..=limit - len);
        if taken.iter().all(|&(a, b)| s + len <= a || s >= b) {
            return Some(s);
        }
    }
    None
}

fn example(cfg: &SynthConfig, protos: &[Vec<f64>], vocab: &Vocabulary, id: String, seed: u64) -> Result<GroundingExample> {
    let mut rng = init::rng(seed);
    let t = cfg.input_length;
    let (lo, hi) = cfg.width_range();
    let min_len = ((cfg.min_length * t as f64).ceil() as usize).clamp(hi, t);
    let raw_len = rng.random_range(min_len..=t);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut clips: Vec<Vec<f64>> = (0..raw_len).map(|_| (0..cfg.d_v).map(|_| noise.sample(&mut rng)).collect()).collect();
    let paint = |clips: &mut Vec<Vec<f64>>, proto: usize, start: usize, len: usize| {
        for row in &mut clips[start..start + len] {
            for (v, p) in row.iter_mut().zip(&protos[proto]) {
                *v += p;
            }
        }
    };

    let p = cfg.num_prototypes;
    let first = rng.random_range(0..p);
    let second = (first + rng.random_range(1..p)) % p;
    let width = rng.random_range(lo..=hi.min(raw_len));
    let start = rng.random_range(0..=raw_len - width);
    let mut taken = vec![(start, start + width)];
    let mut words = Vec::new();

    if cfg.compositional {
        let half = width / 2;
        paint(&mut clips, first, start, half);
        paint(&mut clips, second, start + half, width - half);
        words.extend([first, second]);
        // Each component alone, and the pair in reverse order.
        let mut lures = vec![vec![first], vec![second], vec![second, first]];
        lures.truncate(cfg.distractors.max(2));
        for lure in lures {
            let part = (width / 2).max(1);
            let len = part * lure.len();
            if let Some(s) = place(&mut rng, &taken, len, raw_len) {
                for (j, &proto) in lure.iter().enumerate() {
                    paint(&mut clips, proto, s + j * part, part);
                }
                taken.push((s, s + len));
            }
        }
    } else {
        paint(&mut clips, first, start, width);
        words.push(first);
        let mut others: Vec<usize> = (0..p).filter(|&q| q != first).collect();
        others.shuffle(&mut rng);
        for &proto in others.iter().take(cfg.distractors) {
            let len = rng.random_range(lo..=hi);
            if let Some(s) = place(&mut rng, &taken, len, raw_len) {
                paint(&mut clips, proto, s, len);
                taken.push((s, s + len));
            }
        }
    }

    let n_fill = if cfg.max_fillers > 0 { rng.random_range(0..=cfg.max_fillers) } else { 0 };
    let mut tokens: Vec<usize> = (0..n_fill)
        .map(|_| vocab.index_of(FILLERS[rng.random_range(0..FILLERS.len())]).expect("filler in vocabulary"))
        .collect();
    tokens.extend(words.iter().map(|&w| vocab.index_of(&format!("act{w}")).expect("prototype word")));

    let video = VideoFeatureSequence::ingest(&clips, t, cfg.d_v)?;
    let gt = Segment::new(start as f64 / t as f64, (start + width) as f64 / t as f64)?;
    Ok(GroundingExample { id, video, tokens, gt })
}

/// Generates train/val/test splits fully determined by the seed.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SynthSplits> {
    cfg.validate()?;
    let protos = prototypes(cfg)?;
    let vocab = cfg.vocabulary();
    let split = |name: &str, tag: u64, n: usize| -> Result<Dataset> {
        let examples = (0..n)
            .map(|i| {
                let seed = init::derive_seed(init::derive_seed(cfg.seed, tag), i as u64);
                example(cfg, &protos, &vocab, format!("{name}-{i}"), seed)
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { d_v: cfg.d_v, input_length: cfg.input_length, vocabulary: vocab.clone(), examples })
    };
    Ok(SynthSplits {
        train: split("train", 1, cfg.train_size)?,
        val: split("val", 2, cfg.val_size)?,
        test: split("test", 3, cfg.test_size)?,
        prototypes: protos,
    })
}

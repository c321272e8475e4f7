//! Mini-batch training, evaluation and prediction dumps.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{InferConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::eval_infer::{EvalReport, ScoredSegment};
use crate::harness::dataset::Dataset;
use crate::init;
use crate::model::{Model, Query};
use crate::objective::Segment;
use crate::tensor::{OptimizerState, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_over: f64,
    pub l_loc: f64,
    pub l_all: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
}

/// Progress notifications emitted while training.
#[derive(Clone, Debug)]
pub enum TrainEvent<'a> {
    Step(&'a StepLog),
    Eval(&'a EvalLog),
}

/// Ranked, suppressed predictions for every example.
pub fn rank_all(model: &Model, data: &Dataset, infer: &InferConfig, limit: usize) -> Result<Vec<Vec<ScoredSegment>>> {
    let n = if limit == 0 { data.len() } else { limit.min(data.len()) };
    data.examples[..n].iter().map(|ex| model.rank(ex.query(), infer)).collect()
}

pub fn evaluate(model: &Model, data: &Dataset, infer: &InferConfig, limit: usize) -> Result<EvalReport> {
    let ranked = rank_all(model, data, infer, limit)?;
    let gts: Vec<Segment> = data.examples[..ranked.len()].iter().map(|ex| ex.gt).collect();
    EvalReport::evaluate(&ranked, &gts)
}

/// Writes one `{"id", "segments": [[start, end, score], ...]}` line per query.
pub fn write_predictions(model: &Model, data: &Dataset, infer: &InferConfig, mut out: impl Write) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        id: &'a str,
        segments: Vec<[f64; 3]>,
    }
    for ex in &data.examples {
        let ranked = model.rank(ex.query(), infer)?;
        let segments = ranked.iter().map(|s| [s.segment.start, s.segment.end, s.score]).collect();
        serde_json::to_writer(&mut out, &Line { id: &ex.id, segments })?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

fn check_compatible(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    let m = &cfg.model;
    if data.d_v != m.d_v || data.input_length != m.input_length || data.vocabulary.size() > m.vocab_size {
        return Err(Error::Config(format!(
            "dataset (d_v {}, length {}, vocabulary {}) does not fit the model (d_v {}, length {}, vocabulary {})",
            data.d_v,
            data.input_length,
            data.vocabulary.size(),
            m.d_v,
            m.input_length,
            m.vocab_size
        )));
    }
    Ok(())
}

/// Trains a fresh model. `on_event` sees every step log and evaluation.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    val: Option<&Dataset>,
    on_event: &mut dyn FnMut(TrainEvent),
) -> Result<(Model, OptimizerState, TrainReport)> {
    cfg.validate()?;
    let model = Model::new(cfg.model.clone(), init::derive_seed(cfg.seed, 10))?;
    let opt = OptimizerState::new(cfg.optimizer, cfg.lr, &model.params);
    resume(cfg, model, opt, 0, data, val, on_event)
}

/// Continues training from `start_step` up to `cfg.steps`.
pub fn resume(
    cfg: &TrainConfig,
    mut model: Model,
    mut opt: OptimizerState,
    start_step: usize,
    data: &Dataset,
    val: Option<&Dataset>,
    on_event: &mut dyn FnMut(TrainEvent),
) -> Result<(Model, OptimizerState, TrainReport)> {
    cfg.validate()?;
    check_compatible(cfg, data)?;
    if let Some(v) = val {
        check_compatible(cfg, v)?;
    }
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let mut rng = init::rng(init::derive_seed(cfg.seed, 11));
    let mut order: Vec<usize> = Vec::new();
    let mut report = TrainReport::default();
    let mut cursor = 0;
    // Replays the shuffles of the skipped steps so resumed runs see the same
    // batches as uninterrupted ones.
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        if step < start_step {
            continue;
        }
        let queries: Vec<Query> = batch.iter().map(|&i| data.examples[i].query()).collect();
        let gts: Vec<Segment> = batch.iter().map(|&i| data.examples[i].gt).collect();

        let mut tape = Tape::new();
        let loss = model.batch_loss(&mut tape, &queries, &gts, &cfg.loss)?;
        let b = loss.breakdown;
        for (term, v) in [("L_over", b.l_over), ("L_loc", b.l_loc), ("L_all", b.l_all)] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("{term} became {v} at step {}", step + 1)));
            }
        }
        model.params.zero_grads();
        tape.backward(loss.total, &mut model.params)?;
        opt.step(&mut model.params)?;
        model.update_running_stats(&loss.batch_stats);

        let log = StepLog { step: step + 1, l_over: b.l_over, l_loc: b.l_loc, l_all: b.l_all };
        on_event(TrainEvent::Step(&log));
        report.steps.push(log);

        let last = step + 1 == cfg.steps;
        let due = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        if let (Some(v), true) = (val, last || due) {
            let e = EvalLog { step: step + 1, report: evaluate(&model, v, &cfg.infer, cfg.eval_limit)? };
            on_event(TrainEvent::Eval(&e));
            report.evals.push(e);
        }
    }
    model.params.zero_grads();
    Ok((model, opt, report))
}

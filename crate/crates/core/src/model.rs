//! The full grounding network: sentence encoder, clip fusion, conditioned
//! temporal pyramid and anchored prediction head.

use crate::backbone::{BackboneConfig, BackboneParams, Conditioning};
use crate::config::{ConditioningMode, InferConfig, LossConfig, ModelConfig, NormScope};
use crate::error::{dim_err, Error, Result};
use crate::eval_infer::{nms, PredictionSet, ScoredSegment};
use crate::head::{decode_all, generate_anchors, raw_predictions, AnchorSet, HeadOutputs, HeadParams};
use crate::init;
use crate::objective::{loss_all, match_anchors, record_losses, LossBreakdown, Segment};
use crate::scdm::{AttentionRecord, AttentionVars, BatchStats, Conditioner};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::text_encoder::{EncodedSentence, TextEncoderParams};

/// One query: a `[T x d_v]` clip matrix (already truncated/padded) and its
/// token ids.
#[derive(Clone, Copy, Debug)]
pub struct Query<'a> {
    pub video: &'a Tensor,
    pub tokens: &'a [usize],
}

/// Everything a forward pass leaves on the tape.
#[derive(Debug)]
pub struct Forward {
    pub outputs: Vec<HeadOutputs>,
    /// Per example, per conditioned layer (SCDM only).
    pub attention: Vec<Vec<AttentionVars>>,
    /// Batch statistics per conditioned layer (batch-norm variant, training).
    pub batch_stats: Vec<(usize, BatchStats)>,
}

/// A recorded batch loss, averaged over examples.
#[derive(Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub l_over: Var,
    pub l_loc: Var,
    pub breakdown: LossBreakdown,
    pub batch_stats: Vec<(usize, BatchStats)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    text: TextEncoderParams,
    fusion: crate::fusion::FusionParams,
    backbone: BackboneParams,
    /// One per conditioned layer, or a single shared entry.
    conditioners: Vec<Conditioner>,
    head: HeadParams,
    anchors: AnchorSet,
}

struct BatchConditioning<'a> {
    conditioners: &'a [Conditioner],
    store: &'a ParamStore,
    sentences: &'a [EncodedSentence],
    eps: f64,
    training: bool,
    attention: Vec<Vec<AttentionVars>>,
    stats: Vec<(usize, BatchStats)>,
}

impl Conditioning for BatchConditioning<'_> {
    fn condition(&mut self, tape: &mut Tape, layer: usize, maps: &[Var]) -> Result<Vec<Var>> {
        let c = &self.conditioners[(layer - 1).min(self.conditioners.len() - 1)];
        let out = c.apply_batch(tape, self.store, self.sentences, maps, self.eps, self.training)?;
        for (per_example, att) in self.attention.iter_mut().zip(out.attention) {
            per_example.extend(att);
        }
        if let Some(s) = out.batch_stats {
            self.stats.push((layer, s));
        }
        Ok(out.maps)
    }
}

fn mean_of(tape: &mut Tape, terms: &[Var], inv: f64) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale_shift(acc, inv, 0.0))
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let rng = |stream| init::rng(init::derive_seed(seed, stream));
        let text = TextEncoderParams::register(&mut params, &mut rng(1), config.vocab_size, config.d_embed, config.d_s)?;
        let fusion =
            crate::fusion::FusionParams::register(&mut params, &mut rng(2), config.d_v, config.d_s, config.d_f);
        let backbone = BackboneParams::register(&mut params, &mut rng(3), BackboneConfig::from_model(&config)?);
        let mut cond_rng = rng(4);
        let shared = config.share_scdm_params && config.mode != ConditioningMode::None;
        let conditioners = if shared {
            // Learnable parts are shared; running statistics stay per layer.
            let local = ModelConfig { norm_scope: NormScope::Instance, ..config.clone() };
            let common = Conditioner::register(&mut params, &mut cond_rng, "cond.shared", &local)?;
            (1..config.num_layers)
                .map(|k| common.with_layer_norm(&mut params, &format!("cond.{k}"), &config))
                .collect()
        } else {
            (1..config.num_layers)
                .map(|k| Conditioner::register(&mut params, &mut cond_rng, &format!("cond.{k}"), &config))
                .collect::<Result<_>>()?
        };
        let head = HeadParams::register(
            &mut params,
            &mut rng(5),
            config.num_layers - 1,
            config.d_h,
            config.ratios.len(),
        );
        let anchors = generate_anchors(&config.prediction_lengths(), &config.ratios)?;
        Ok(Model { config, params, text, fusion, backbone, conditioners, head, anchors })
    }

    pub fn mode(&self) -> ConditioningMode {
        self.config.mode
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn conditioners(&self) -> &[Conditioner] {
        &self.conditioners
    }

    fn check_query(&self, q: &Query) -> Result<()> {
        if q.video.shape() != [self.config.input_length, self.config.d_v] {
            return Err(dim_err(format!(
                "video {:?} does not match [{} x {}]",
                q.video.shape(),
                self.config.input_length,
                self.config.d_v
            )));
        }
        Ok(())
    }

    /// Records the network for a batch. `training` selects batch statistics
    /// in the batch-norm variant; other variants treat examples independently.
    pub fn forward(&self, tape: &mut Tape, queries: &[Query], training: bool) -> Result<Forward> {
        self.forward_with(&self.params, tape, queries, training)
    }

    /// As [`Model::forward`], reading parameter values from `store`, which
    /// must share this model's layout.
    pub fn forward_with(&self, store: &ParamStore, tape: &mut Tape, queries: &[Query], training: bool) -> Result<Forward> {
        if queries.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut sentences = Vec::with_capacity(queries.len());
        let mut fused = Vec::with_capacity(queries.len());
        for q in queries {
            self.check_query(q)?;
            let s = self.text.encode(tape, store, q.tokens)?;
            let v = tape.constant(q.video);
            fused.push(self.fusion.fuse(tape, store, v, s.global)?);
            sentences.push(s);
        }
        let mut cond = BatchConditioning {
            conditioners: &self.conditioners,
            store,
            sentences: &sentences,
            eps: self.config.norm_eps,
            training,
            attention: vec![Vec::new(); queries.len()],
            stats: Vec::new(),
        };
        let pyramids = self.backbone.build_pyramid(tape, store, &fused, self.config.modulate_position, &mut cond)?;
        let (attention, batch_stats) = (cond.attention, cond.stats);
        let outputs = pyramids
            .iter()
            .map(|maps| self.head.predict(tape, store, &maps[1..]))
            .collect::<Result<_>>()?;
        Ok(Forward { outputs, attention, batch_stats })
    }

    /// Records the mean training loss of a batch.
    pub fn batch_loss(&self, tape: &mut Tape, queries: &[Query], gts: &[Segment], cfg: &LossConfig) -> Result<BatchLoss> {
        self.batch_loss_with(&self.params, tape, queries, gts, cfg)
    }

    pub fn batch_loss_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        queries: &[Query],
        gts: &[Segment],
        cfg: &LossConfig,
    ) -> Result<BatchLoss> {
        if queries.len() != gts.len() {
            return Err(Error::Input(format!("{} queries for {} ground truths", queries.len(), gts.len())));
        }
        let fwd = self.forward_with(store, tape, queries, true)?;
        let (ac, aw) = (self.config.alpha_c, self.config.alpha_w);
        let mut overs = Vec::with_capacity(gts.len());
        let mut locs = Vec::with_capacity(gts.len());
        for (out, gt) in fwd.outputs.iter().zip(gts) {
            let m = match_anchors(&self.anchors, gt, cfg.positive_iou, ac, aw)?;
            let lv = record_losses(tape, out, &m, &self.anchors, cfg, ac, aw)?;
            overs.push(lv.l_over);
            locs.push(lv.l_loc);
        }
        let inv = 1.0 / gts.len() as f64;
        let l_over = mean_of(tape, &overs, inv)?;
        let l_loc = mean_of(tape, &locs, inv)?;
        let a = tape.scale_shift(l_over, cfg.lambda, 0.0);
        let b = tape.scale_shift(l_loc, cfg.eta, 0.0);
        let total = tape.add(a, b)?;
        let breakdown = loss_all(tape.scalar(l_over), tape.scalar(l_loc), cfg.lambda, cfg.eta);
        Ok(BatchLoss { total, l_over, l_loc, breakdown, batch_stats: fwd.batch_stats })
    }

    /// Folds batch statistics into the running normalization buffers.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (layer, s) in stats {
            let idx = (layer - 1).min(self.conditioners.len() - 1);
            if let Some(norm) = self.conditioners[idx].running_norm() {
                norm.update_running(&mut self.params, s, self.config.bn_momentum);
            }
        }
    }

    /// Every decoded anchor for one query, in anchor order, unclamped.
    pub fn predict(&self, query: Query) -> Result<PredictionSet> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, &[query], false)?;
        let raw = raw_predictions(&tape, &fwd.outputs[0]);
        Ok(PredictionSet { segments: decode_all(&self.anchors, &raw, self.config.alpha_c, self.config.alpha_w) })
    }

    /// Clamped, suppressed and ranked segments for one query.
    pub fn rank(&self, query: Query, infer: &InferConfig) -> Result<Vec<ScoredSegment>> {
        let set = self.predict(query)?;
        nms(&set.clamped(), infer.nms_threshold, infer.max_keep)
    }

    /// Word attention on every conditioned layer, in layer order.
    pub fn attention(&self, query: Query) -> Result<Vec<AttentionRecord>> {
        if self.config.mode != ConditioningMode::Scdm {
            return Err(Error::UnsupportedMode(format!(
                "attention exists only in scdm mode, model is {}",
                self.config.mode
            )));
        }
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, &[query], false)?;
        Ok(fwd.attention[0]
            .iter()
            .map(|a| AttentionRecord { weights: tape.tensor(a.weights), attended: tape.tensor(a.attended) })
            .collect())
    }
}

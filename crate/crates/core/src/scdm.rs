//! Sentence-conditioned dynamic modulation of temporal feature maps.
//!
//! For every feature unit `a_i` of a map `A [T_k x d_h]`:
//!
//! ```text
//! rho_i^n = softmax_n(w^T tanh(W_s s_n + W_a a_i + b))
//! c_i     = sum_n rho_i^n s_n
//! gamma_i = tanh(W_gamma c_i + b_gamma),  beta_i = tanh(W_beta c_i + b_beta)
//! a_hat_i = gamma_i * (a_i - mu(A)) / sigma(A) + beta_i
//! ```
//!
//! `mu` and `sigma` are per-channel statistics over the temporal axis of the
//! single map; `sigma` is the population deviation floored at `norm_eps`.
//! The ablation variants (static modulation, multiplication, a fully
//! connected fuse, plain batch normalization) share the same call surface.

use crate::config::{ConditioningMode, ModelConfig, NormScope};
use crate::error::{dim_err, Error, Result};
use crate::init::{self, SeededRng};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::text_encoder::{EncodedSentence, SentenceEncoding};

/// Attention weights `[T_k x N]` and attended sentence vectors `[T_k x d_s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub weights: Tensor,
    pub attended: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub weights: Var,
    pub attended: Var,
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w: ParamId,
    pub w_s: ParamId,
    pub w_a: ParamId,
    pub b: ParamId,
}

impl AttentionParams {
    fn register(store: &mut ParamStore, rng: &mut SeededRng, prefix: &str, d_s: usize, d_h: usize, d_a: usize) -> Self {
        AttentionParams {
            w: init::glorot(store, rng, format!("{prefix}.att_w"), vec![d_a], d_a, 1),
            w_s: init::glorot(store, rng, format!("{prefix}.att_ws"), vec![d_a, d_s], d_s, d_a),
            w_a: init::glorot(store, rng, format!("{prefix}.att_wa"), vec![d_a, d_h], d_h, d_a),
            b: init::zeros(store, format!("{prefix}.att_b"), vec![d_a]),
        }
    }
}

/// The two tanh heads producing `gamma` and `beta`.
#[derive(Clone, Debug)]
pub struct ModulatorHeads {
    pub w_gamma: ParamId,
    pub b_gamma: ParamId,
    pub w_beta: ParamId,
    pub b_beta: ParamId,
}

impl ModulatorHeads {
    fn register(store: &mut ParamStore, rng: &mut SeededRng, prefix: &str, d_s: usize, d_h: usize) -> Self {
        ModulatorHeads {
            w_gamma: init::glorot(store, rng, format!("{prefix}.w_gamma"), vec![d_h, d_s], d_s, d_h),
            // Start close to identity scaling: tanh(atanh(0.9)) = 0.9.
            b_gamma: store.add(
                format!("{prefix}.b_gamma"),
                Tensor::filled(vec![d_h], 0.9f64.atanh()).with_requires_grad(true),
            ),
            w_beta: init::glorot(store, rng, format!("{prefix}.w_beta"), vec![d_h, d_s], d_s, d_h),
            b_beta: init::zeros(store, format!("{prefix}.b_beta"), vec![d_h]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScdmParams {
    pub attention: AttentionParams,
    pub heads: ModulatorHeads,
    /// Present when statistics are pooled over the batch.
    pub norm: Option<RunningNorm>,
}

#[derive(Clone, Debug)]
pub struct ScmParams {
    pub heads: ModulatorHeads,
    pub norm: Option<RunningNorm>,
}

#[derive(Clone, Debug)]
pub struct FcParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Running per-channel statistics (non-trainable buffers) for
/// normalization pooled over batch and time.
#[derive(Clone, Debug)]
pub struct RunningNorm {
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Learnable affine plus running statistics.
#[derive(Clone, Debug)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub norm: RunningNorm,
}

/// Per-layer conditioning parameters for one mode.
#[derive(Clone, Debug)]
pub enum Conditioner {
    Scdm(ScdmParams),
    Scm(ScmParams),
    Mul,
    Fc(FcParams),
    None(BatchNormParams),
}

/// Per-channel batch statistics observed while training with pooled
/// normalization: `(mean, variance)`.
pub type BatchStats = (Vec<f64>, Vec<f64>);

/// Result of conditioning one layer across a batch.
#[derive(Debug)]
pub struct Conditioned {
    pub maps: Vec<Var>,
    pub attention: Vec<Option<AttentionVars>>,
    pub batch_stats: Option<BatchStats>,
}

impl Conditioner {
    /// Registers the parameters of `mode` for one layer under `prefix`.
    pub fn register(store: &mut ParamStore, rng: &mut SeededRng, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let (d_s, d_h, d_a) = (cfg.d_s, cfg.d_h, cfg.d_a);
        let pooled = |store: &mut ParamStore| match cfg.norm_scope {
            NormScope::Batch => Some(RunningNorm::register(store, &format!("{prefix}.norm"), d_h)),
            NormScope::Instance => None,
        };
        Ok(match cfg.mode {
            ConditioningMode::Scdm => Conditioner::Scdm(ScdmParams {
                attention: AttentionParams::register(store, rng, prefix, d_s, d_h, d_a),
                heads: ModulatorHeads::register(store, rng, prefix, d_s, d_h),
                norm: pooled(store),
            }),
            ConditioningMode::Scm => Conditioner::Scm(ScmParams {
                heads: ModulatorHeads::register(store, rng, prefix, d_s, d_h),
                norm: pooled(store),
            }),
            ConditioningMode::Mul => {
                if d_s != d_h {
                    return Err(Error::Config(format!("mul mode needs d_s == d_h, got {d_s} and {d_h}")));
                }
                Conditioner::Mul
            }
            ConditioningMode::Fc => Conditioner::Fc(FcParams {
                weight: init::glorot(store, rng, format!("{prefix}.fc_weight"), vec![d_h, d_h + d_s], d_h + d_s, d_h),
                bias: init::zeros(store, format!("{prefix}.fc_bias"), vec![d_h]),
            }),
            ConditioningMode::None => Conditioner::None(BatchNormParams {
                gamma: store.add(format!("{prefix}.bn_gamma"), Tensor::filled(vec![d_h], 1.0).with_requires_grad(true)),
                beta: init::zeros(store, format!("{prefix}.bn_beta"), vec![d_h]),
                norm: RunningNorm::register(store, &format!("{prefix}.bn"), d_h),
            }),
        })
    }

    pub fn mode(&self) -> ConditioningMode {
        match self {
            Conditioner::Scdm(_) => ConditioningMode::Scdm,
            Conditioner::Scm(_) => ConditioningMode::Scm,
            Conditioner::Mul => ConditioningMode::Mul,
            Conditioner::Fc(_) => ConditioningMode::Fc,
            Conditioner::None(_) => ConditioningMode::None,
        }
    }

    /// Conditions the maps of a whole batch. Examples are coupled only
    /// through pooled statistics, and only when `training`.
    pub fn apply_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sentences: &[EncodedSentence],
        maps: &[Var],
        eps: f64,
        training: bool,
    ) -> Result<Conditioned> {
        if sentences.len() != maps.len() {
            return Err(dim_err(format!("{} sentences for {} maps", sentences.len(), maps.len())));
        }
        let pooled = match self {
            Conditioner::None(bn) => return bn.apply(tape, store, maps, eps, training),
            Conditioner::Scdm(ScdmParams { norm: Some(n), .. }) | Conditioner::Scm(ScmParams { norm: Some(n), .. }) => {
                Some(n.normalize(tape, store, maps, eps, training)?)
            }
            _ => None,
        };
        let mut out = Vec::with_capacity(maps.len());
        let mut attention = Vec::with_capacity(maps.len());
        for (i, (sentence, &map)) in sentences.iter().zip(maps).enumerate() {
            let normed = pooled.as_ref().map(|(n, _)| n[i]);
            let (m, att) = self.apply_one(tape, store, sentence, map, normed, eps)?;
            out.push(m);
            attention.push(att);
        }
        Ok(Conditioned { maps: out, attention, batch_stats: pooled.and_then(|(_, s)| s) })
    }

    /// A copy sharing the learnable parameters but owning fresh running
    /// statistics under `prefix` when `cfg` pools them over the batch.
    pub fn with_layer_norm(&self, store: &mut ParamStore, prefix: &str, cfg: &ModelConfig) -> Self {
        let norm = match cfg.norm_scope {
            NormScope::Batch => Some(RunningNorm::register(store, &format!("{prefix}.norm"), cfg.d_h)),
            NormScope::Instance => None,
        };
        match self {
            Conditioner::Scdm(p) => Conditioner::Scdm(ScdmParams { norm, ..p.clone() }),
            Conditioner::Scm(p) => Conditioner::Scm(ScmParams { norm, ..p.clone() }),
            other => other.clone(),
        }
    }

    /// Running statistics owned by this conditioner, if any.
    pub fn running_norm(&self) -> Option<&RunningNorm> {
        match self {
            Conditioner::Scdm(p) => p.norm.as_ref(),
            Conditioner::Scm(p) => p.norm.as_ref(),
            Conditioner::None(bn) => Some(&bn.norm),
            Conditioner::Mul | Conditioner::Fc(_) => None,
        }
    }

    fn apply_one(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sentence: &EncodedSentence,
        map: Var,
        normed: Option<Var>,
        eps: f64,
    ) -> Result<(Var, Option<AttentionVars>)> {
        let t_k = match *tape.shape(map) {
            [t, _] => t,
            ref s => return Err(dim_err(format!("feature map must be [T_k x d_h], got {s:?}"))),
        };
        match self {
            Conditioner::Scdm(p) => {
                let att = attend(tape, store, &p.attention, sentence.word_states, map)?;
                let (gamma, beta) = make_modulators(tape, store, &p.heads, att.attended)?;
                Ok((modulate_with(tape, map, normed, gamma, beta, eps)?, Some(att)))
            }
            Conditioner::Scm(ScmParams { heads, .. }) => {
                let d_s = tape.shape(sentence.global)[0];
                let global = tape.reshape(sentence.global, vec![1, d_s])?;
                let (gamma, beta) = make_modulators(tape, store, heads, global)?;
                let d_h = tape.shape(gamma)[1];
                let gamma = tape.reshape(gamma, vec![d_h])?;
                let gamma = tape.broadcast_rows(gamma, t_k)?;
                let beta = tape.reshape(beta, vec![d_h])?;
                let beta = tape.broadcast_rows(beta, t_k)?;
                Ok((modulate_with(tape, map, normed, gamma, beta, eps)?, None))
            }
            Conditioner::Mul => {
                let s = tape.broadcast_rows(sentence.global, t_k)?;
                Ok((tape.mul(map, s)?, None))
            }
            Conditioner::Fc(p) => {
                let (w, b) = (tape.param(store, p.weight), tape.param(store, p.bias));
                let s = tape.broadcast_rows(sentence.global, t_k)?;
                let joint = tape.concat_cols(&[map, s])?;
                let pre = tape.matmul_nt(joint, w)?;
                let pre = tape.add_row_bias(pre, b)?;
                Ok((tape.relu(pre), None))
            }
            Conditioner::None(_) => unreachable!("batch norm is applied batch-wide"),
        }
    }
}

impl RunningNorm {
    fn register(store: &mut ParamStore, prefix: &str, d_h: usize) -> Self {
        RunningNorm {
            running_mean: store.add(format!("{prefix}_running_mean"), Tensor::zeros(vec![d_h])),
            running_var: store.add(format!("{prefix}_running_var"), Tensor::filled(vec![d_h], 1.0)),
        }
    }

    /// Standardizes every channel with statistics pooled over all maps and
    /// time steps when `training`, otherwise with the running buffers.
    pub fn normalize(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        maps: &[Var],
        eps: f64,
        training: bool,
    ) -> Result<(Vec<Var>, Option<BatchStats>)> {
        let mut out = Vec::with_capacity(maps.len());
        if training {
            let joint = tape.concat_rows(maps)?;
            let (rows, d) = (tape.shape(joint)[0], tape.shape(joint)[1]);
            let (mean, std) = crate::tensor::column_stats(tape.value(joint), rows, d);
            let stats = (mean, std.iter().map(|s| s * s).collect());
            let normed = tape.standardize_cols(joint, eps)?;
            let mut start = 0;
            for &m in maps {
                let len = tape.shape(m)[0];
                out.push(tape.slice_rows(normed, start, len)?);
                start += len;
            }
            return Ok((out, Some(stats)));
        }
        let mean = store.get(self.running_mean).data();
        let inv: Vec<f64> = store.get(self.running_var).data().iter().map(|v| 1.0 / v.sqrt().max(eps)).collect();
        let d = inv.len();
        for &m in maps {
            let t_k = tape.shape(m)[0];
            let scale = inv.repeat(t_k);
            let shift: Vec<f64> = (0..t_k * d).map(|j| -mean[j % d] * inv[j % d]).collect();
            out.push(tape.affine(m, scale, shift)?);
        }
        Ok((out, None))
    }

    /// Exponential moving average update of the running statistics.
    pub fn update_running(&self, store: &mut ParamStore, stats: &BatchStats, momentum: f64) {
        for (id, values) in [(self.running_mean, &stats.0), (self.running_var, &stats.1)] {
            store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .zip(values)
                .for_each(|(r, v)| *r = (1.0 - momentum) * *r + momentum * v);
        }
    }
}

impl BatchNormParams {
    fn apply(&self, tape: &mut Tape, store: &ParamStore, maps: &[Var], eps: f64, training: bool) -> Result<Conditioned> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let (mut out, batch_stats) = self.norm.normalize(tape, store, maps, eps, training)?;
        for m in &mut out {
            let t_k = tape.shape(*m)[0];
            let g = tape.broadcast_rows(gamma, t_k)?;
            let b = tape.broadcast_rows(beta, t_k)?;
            let scaled = tape.mul(*m, g)?;
            *m = tape.add(scaled, b)?;
        }
        let attention = vec![None; maps.len()];
        Ok(Conditioned { maps: out, attention, batch_stats })
    }
}

/// Word attention for every unit of `feature_map [T_k x d_h]` over
/// `word_states [N x d_s]`.
pub fn attend(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    word_states: Var,
    feature_map: Var,
) -> Result<AttentionVars> {
    let (n, t_k) = match (tape.shape(word_states), tape.shape(feature_map)) {
        ([n, _], [t, _]) => (*n, *t),
        (a, b) => return Err(dim_err(format!("attend expects matrices, got {a:?} and {b:?}"))),
    };
    let w = tape.param(store, params.w);
    let w_s = tape.param(store, params.w_s);
    let w_a = tape.param(store, params.w_a);
    let b = tape.param(store, params.b);
    let d_a = tape.shape(w)[0];

    let proj_words = tape.matmul_nt(word_states, w_s)?; // [N x d_a]
    let proj_units = tape.matmul_nt(feature_map, w_a)?; // [T_k x d_a]
    let proj_units = tape.add_row_bias(proj_units, b)?;

    // Row i * N + n pairs unit i with word n.
    let unit_index: Vec<usize> = (0..t_k).flat_map(|i| std::iter::repeat_n(i, n)).collect();
    let word_index: Vec<usize> = (0..t_k).flat_map(|_| 0..n).collect();
    let units = tape.gather_rows(proj_units, &unit_index)?;
    let words = tape.gather_rows(proj_words, &word_index)?;
    let joint = tape.add(units, words)?;
    let joint = tape.tanh(joint);
    let w_col = tape.reshape(w, vec![d_a, 1])?;
    let scores = tape.matmul(joint, w_col)?;
    let scores = tape.reshape(scores, vec![t_k, n])?;
    let weights = tape.softmax_rows(scores)?;
    let attended = tape.matmul(weights, word_states)?;
    Ok(AttentionVars { weights, attended })
}

/// `gamma = tanh(W_gamma c + b_gamma)`, `beta = tanh(W_beta c + b_beta)`
/// for every row of `attended [T_k x d_s]`.
pub fn make_modulators(tape: &mut Tape, store: &ParamStore, heads: &ModulatorHeads, attended: Var) -> Result<(Var, Var)> {
    let head = |tape: &mut Tape, w: ParamId, b: ParamId| -> Result<Var> {
        let (w, b) = (tape.param(store, w), tape.param(store, b));
        let pre = tape.matmul_nt(attended, w)?;
        let pre = tape.add_row_bias(pre, b)?;
        Ok(tape.tanh(pre))
    };
    let gamma = head(tape, heads.w_gamma, heads.b_gamma)?;
    let beta = head(tape, heads.w_beta, heads.b_beta)?;
    Ok((gamma, beta))
}

/// `gamma * standardize(A) + beta` with per-map, per-channel statistics.
pub fn modulate(tape: &mut Tape, feature_map: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    modulate_with(tape, feature_map, None, gamma, beta, eps)
}

/// Modulation with an optional precomputed normalization of the map.
fn modulate_with(tape: &mut Tape, feature_map: Var, normed: Option<Var>, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let normed = match normed {
        Some(n) => n,
        None => tape.standardize_cols(feature_map, eps)?,
    };
    let scaled = tape.mul(gamma, normed)?;
    tape.add(scaled, beta)
}

/// Value-level attention, for inspection and export.
pub fn attend_values(
    store: &ParamStore,
    params: &AttentionParams,
    sentence: &SentenceEncoding,
    feature_map: &Tensor,
) -> Result<AttentionRecord> {
    let mut tape = Tape::new();
    let s = tape.constant(&sentence.word_states);
    let a = tape.constant(feature_map);
    let att = attend(&mut tape, store, params, s, a)?;
    Ok(AttentionRecord { weights: tape.tensor(att.weights), attended: tape.tensor(att.attended) })
}

/// Value-level modulation with injected `gamma`/`beta`.
pub fn modulate_values(feature_map: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = tape.constant(feature_map);
    let g = tape.constant(gamma);
    let b = tape.constant(beta);
    let out = modulate(&mut tape, a, g, b, eps)?;
    Ok(tape.tensor(out))
}

/// Value-level conditioning of one map (batch-norm variant uses running
/// statistics).
pub fn apply_conditioning(
    conditioner: &Conditioner,
    store: &ParamStore,
    sentence: &SentenceEncoding,
    feature_map: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let enc = EncodedSentence {
        word_states: tape.constant(&sentence.word_states),
        global: tape.constant(&sentence.global),
    };
    let a = tape.constant(feature_map);
    let out = conditioner.apply_batch(&mut tape, store, &[enc], &[a], eps, false)?;
    Ok(tape.tensor(out.maps[0]))
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn cfg(mode: ConditioningMode) -> ModelConfig {
        ModelConfig { mode, d_s: 4, d_h: 4, d_a: 3, ..ModelConfig::default() }
    }

    fn sentence_from(rows: &[Vec<f64>]) -> SentenceEncoding {
        let word_states = Tensor::from_rows(rows).unwrap();
        let d = word_states.cols();
        let n = rows.len() as f64;
        let global = (0..d).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect();
        SentenceEncoding { word_states, global: Tensor::vector(global).unwrap() }
    }

    // Loop-based re-evaluation of the attention equations.
    fn attention_oracle(store: &ParamStore, p: &AttentionParams, s: &Tensor, a: &Tensor) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let w = store.get(p.w).data();
        let ws = store.get(p.w_s);
        let wa = store.get(p.w_a);
        let b = store.get(p.b).data();
        let d_a = w.len();
        let mut rho = Vec::new();
        let mut c = Vec::new();
        for i in 0..a.rows() {
            let mut scores = Vec::new();
            for n in 0..s.rows() {
                let mut score = 0.0;
                for j in 0..d_a {
                    let mut z = b[j];
                    for k in 0..s.cols() {
                        z += ws.row(j)[k] * s.row(n)[k];
                    }
                    for k in 0..a.cols() {
                        z += wa.row(j)[k] * a.row(i)[k];
                    }
                    score += w[j] * z.tanh();
                }
                scores.push(score);
            }
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let r: Vec<f64> = e.iter().map(|v| v / z).collect();
            let ci = (0..s.cols()).map(|k| (0..s.rows()).map(|n| r[n] * s.row(n)[k]).sum()).collect();
            rho.push(r);
            c.push(ci);
        }
        (rho, c)
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut store = ParamStore::new();
        let mut rng = init::rng(11);
        let p = AttentionParams::register(&mut store, &mut rng, "t", 4, 4, 3);
        store.get_mut(p.b).data_mut().copy_from_slice(&[0.1, -0.3, 0.2]);
        let s = init::uniform(&mut rng, vec![3, 4], 1.0);
        let a = init::uniform(&mut rng, vec![2, 4], 1.0);
        let sentence = SentenceEncoding { word_states: s.clone(), global: Tensor::zeros(vec![4]) };
        let rec = attend_values(&store, &p, &sentence, &a).unwrap();
        let (rho, c) = attention_oracle(&store, &p, &s, &a);
        for i in 0..2 {
            for n in 0..3 {
                assert!((rec.weights.row(i)[n] - rho[i][n]).abs() < 1e-9);
            }
            for k in 0..4 {
                assert!((rec.attended.row(i)[k] - c[i][k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_word_attention_is_trivial() {
        let mut store = ParamStore::new();
        let mut rng = init::rng(2);
        let p = AttentionParams::register(&mut store, &mut rng, "t", 4, 4, 3);
        let sentence = sentence_from(&[vec![0.5, -1.0, 2.0, 0.0]]);
        let a = init::uniform(&mut rng, vec![5, 4], 2.0);
        let rec = attend_values(&store, &p, &sentence, &a).unwrap();
        assert!(rec.weights.data().iter().all(|&w| w == 1.0));
        for i in 0..5 {
            assert_eq!(rec.attended.row(i), sentence.word_states.row(0));
        }
    }

    #[test]
    fn identical_words_attend_uniformly() {
        let mut store = ParamStore::new();
        let mut rng = init::rng(5);
        let p = AttentionParams::register(&mut store, &mut rng, "t", 4, 4, 3);
        let word = vec![0.3, 0.1, -0.4, 0.9];
        let sentence = sentence_from(&[word.clone(), word.clone(), word.clone(), word.clone()]);
        let a = init::uniform(&mut rng, vec![3, 4], 2.0);
        let rec = attend_values(&store, &p, &sentence, &a).unwrap();
        assert!(rec.weights.data().iter().all(|w| (w - 0.25).abs() < 1e-12));
        for i in 0..3 {
            for k in 0..4 {
                assert!((rec.attended.row(i)[k] - word[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn modulator_hand_value_and_zero_heads() {
        let mut store = ParamStore::new();
        let heads = ModulatorHeads {
            w_gamma: store.add("wg", Tensor::matrix(1, 1, vec![1.0]).unwrap()),
            b_gamma: store.add("bg", Tensor::vector(vec![0.0]).unwrap()),
            w_beta: store.add("wb", Tensor::matrix(1, 1, vec![0.0]).unwrap()),
            b_beta: store.add("bb", Tensor::vector(vec![0.0]).unwrap()),
        };
        let mut tape = Tape::new();
        let c = tape.constant(&Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let (g, b) = make_modulators(&mut tape, &store, &heads, c).unwrap();
        assert!((tape.value(g)[0] - 0.76159).abs() < 1e-5);
        assert!((tape.value(g)[0] - 1f64.tanh()).abs() < 1e-15);
        assert_eq!(tape.value(b)[0], 0.0);
    }

    #[test]
    fn modulate_standardizes_and_handles_constant_channels() {
        let a = Tensor::from_rows(&[vec![1.0, 5.0], vec![2.0, 5.0], vec![6.0, 5.0]]).unwrap();
        let ones = Tensor::filled(vec![3, 2], 1.0);
        let beta = Tensor::from_rows(&[vec![0.0, 0.7], vec![0.0, -0.2], vec![0.0, 0.4]]).unwrap();
        let out = modulate_values(&a, &ones, &beta, 1e-5).unwrap();
        let col0: Vec<f64> = (0..3).map(|r| out.row(r)[0]).collect();
        let mean = col0.iter().sum::<f64>() / 3.0;
        let std = (col0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!(mean.abs() < 1e-12 && (std - 1.0).abs() < 1e-12);
        // Constant channel: normalized value 0, output equals beta.
        for r in 0..3 {
            assert_eq!(out.row(r)[1], beta.row(r)[1]);
        }
        // gamma = 0 gives beta exactly.
        let out = modulate_values(&a, &Tensor::zeros(vec![3, 2]), &beta, 1e-5).unwrap();
        assert_eq!(out, beta);
    }

    #[test]
    fn scdm_collapses_to_scm_for_identical_words() {
        let mut rng = init::rng(9);
        let mut store = ParamStore::new();
        let scdm = Conditioner::register(&mut store, &mut rng, "l", &cfg(ConditioningMode::Scdm)).unwrap();
        let Conditioner::Scdm(p) = &scdm else { unreachable!() };
        let scm = Conditioner::Scm(ScmParams { heads: p.heads.clone(), norm: p.norm.clone() });
        let word = vec![0.2, -0.5, 0.8, 0.1];
        let sentence = sentence_from(&[word.clone(), word.clone(), word]);
        let a = init::uniform(&mut rng, vec![4, 4], 1.0);
        let x = apply_conditioning(&scdm, &store, &sentence, &a, 1e-5).unwrap();
        let y = apply_conditioning(&scm, &store, &sentence, &a, 1e-5).unwrap();
        for (u, v) in x.data().iter().zip(y.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn mul_with_ones_is_identity_and_none_ignores_sentence() {
        let mut rng = init::rng(4);
        let mut store = ParamStore::new();
        let mul = Conditioner::register(&mut store, &mut rng, "m", &cfg(ConditioningMode::Mul)).unwrap();
        let a = init::uniform(&mut rng, vec![4, 4], 1.0);
        let ones = sentence_from(&[vec![1.0; 4]]);
        assert_eq!(apply_conditioning(&mul, &store, &ones, &a, 1e-5).unwrap(), a);

        let none = Conditioner::register(&mut store, &mut rng, "n", &cfg(ConditioningMode::None)).unwrap();
        let s1 = sentence_from(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let s2 = sentence_from(&[vec![-4.0, 0.0, 9.0, 1.0], vec![0.5; 4]]);
        let x = apply_conditioning(&none, &store, &s1, &a, 1e-5).unwrap();
        let y = apply_conditioning(&none, &store, &s2, &a, 1e-5).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn mul_requires_matching_widths() {
        let mut rng = init::rng(4);
        let mut store = ParamStore::new();
        let c = ModelConfig { d_h: 6, ..cfg(ConditioningMode::Mul) };
        assert!(matches!(Conditioner::register(&mut store, &mut rng, "m", &c), Err(Error::Config(_))));
    }

    #[test]
    fn every_mode_preserves_shape_and_differentiates() {
        for mode in ConditioningMode::ALL {
            let mut rng = init::rng(21);
            let mut store = ParamStore::new();
            let cond = Conditioner::register(&mut store, &mut rng, "l", &cfg(mode)).unwrap();
            let s = init::uniform(&mut rng, vec![3, 4], 1.0);
            let a = init::uniform(&mut rng, vec![4, 4], 1.0);
            let sentence = sentence_from(&(0..3).map(|r| s.row(r).to_vec()).collect::<Vec<_>>());
            assert_eq!(apply_conditioning(&cond, &store, &sentence, &a, 1e-5).unwrap().shape(), &[4, 4]);
            if let Conditioner::Fc(p) = &cond {
                store.get_mut(p.bias).data_mut().copy_from_slice(&[0.4, 0.3, -0.2, 0.5]);
            }
            let weights: Vec<f64> = (0..16).map(|i| ((i * 5 % 7) as f64 - 3.0) / 3.0 + 0.05 * i as f64).collect();
            let report = grad_check(&mut store, 1e-5, |tape, st| {
                let enc = EncodedSentence {
                    word_states: tape.constant(&sentence.word_states),
                    global: tape.constant(&sentence.global),
                };
                let map = tape.constant(&a);
                let out = cond.apply_batch(tape, st, &[enc], &[map], 1e-5, true)?;
                tape.weighted_sum(out.maps[0], weights.clone())
            })
            .unwrap();
            assert!(report.passes(1e-6), "{mode}: {report:?}");
        }
    }
}

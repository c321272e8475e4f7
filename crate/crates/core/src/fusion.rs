//! Clip-wise fusion: every clip meets the whole sentence,
//! `f_t = ReLU(W_f (v_t || s_bar) + b_f)`.

use crate::error::{dim_err, Result};
use crate::init::{self, SeededRng};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::text_encoder::SentenceEncoding;

/// Clip features `[T x d_v]`; rows at or past `valid_length` are zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatureSequence {
    pub clips: Tensor,
    pub valid_length: usize,
}

impl VideoFeatureSequence {
    /// Truncates or zero-pads raw clip rows to exactly `length` rows.
    pub fn ingest(raw: &[Vec<f64>], length: usize, d_v: usize) -> Result<Self> {
        if raw.is_empty() {
            return Err(crate::Error::Input("video has no clips".into()));
        }
        if let Some(bad) = raw.iter().find(|r| r.len() != d_v) {
            return Err(dim_err(format!("clip of width {} where d_v = {d_v}", bad.len())));
        }
        let valid_length = raw.len().min(length);
        let mut data = Vec::with_capacity(length * d_v);
        for row in &raw[..valid_length] {
            data.extend_from_slice(row);
        }
        data.resize(length * d_v, 0.0);
        Ok(VideoFeatureSequence { clips: Tensor::matrix(length, d_v, data)?, valid_length })
    }

    pub fn len(&self) -> usize {
        self.clips.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_length == 0
    }
}

/// Fused features `[T x d_f]`, all entries non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedSequence {
    pub features: Tensor,
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub weight: ParamId,
    pub bias: ParamId,
    d_v: usize,
    d_s: usize,
}

impl FusionParams {
    pub fn register(store: &mut ParamStore, rng: &mut SeededRng, d_v: usize, d_s: usize, d_f: usize) -> Self {
        let weight = init::glorot(store, rng, "fusion.weight", vec![d_f, d_v + d_s], d_v + d_s, d_f);
        let bias = init::zeros(store, "fusion.bias", vec![d_f]);
        FusionParams { weight, bias, d_v, d_s }
    }

    /// Records the fusion of `video [T x d_v]` with `global [d_s]`.
    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, video: Var, global: Var) -> Result<Var> {
        let (w, b) = (tape.param(store, self.weight), tape.param(store, self.bias));
        fuse_vars(tape, video, global, w, b)
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }
}

fn fuse_vars(tape: &mut Tape, video: Var, global: Var, w: Var, b: Var) -> Result<Var> {
    let t = match *tape.shape(video) {
        [t, _] => t,
        ref s => return Err(dim_err(format!("video must be [T x d_v], got {s:?}"))),
    };
    let sentence = tape.broadcast_rows(global, t)?;
    let joint = tape.concat_cols(&[video, sentence])?;
    let pre = tape.matmul_nt(joint, w)?;
    let pre = tape.add_row_bias(pre, b)?;
    Ok(tape.relu(pre))
}

/// Plain-value fusion with explicit `W_f [d_f x (d_v + d_s)]` and `b_f [d_f]`.
pub fn fuse(
    video: &VideoFeatureSequence,
    sentence: &SentenceEncoding,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<FusedSequence> {
    let d_in = video.clips.cols() + sentence.global.numel();
    if weight.shape().len() != 2 || weight.cols() != d_in || bias.shape() != [weight.rows()] {
        return Err(dim_err(format!(
            "fusion weight {:?} / bias {:?} do not fit inputs of width {d_in}",
            weight.shape(),
            bias.shape()
        )));
    }
    let mut tape = Tape::new();
    let v = tape.constant(&video.clips);
    let s = tape.constant(&sentence.global);
    let w = tape.constant(weight);
    let b = tape.constant(bias);
    let out = fuse_vars(&mut tape, v, s, w, b)?;
    Ok(FusedSequence { features: tape.tensor(out) })
}

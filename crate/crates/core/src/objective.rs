//! Anchor matching by temporal IoU and the training objective
//! `L_all = lambda * L_over + eta * L_loc`.

use serde::{Deserialize, Serialize};

use crate::config::{LocLossSpace, LossConfig};
use crate::error::{dim_err, Error, Result};
use crate::head::{encode_targets, AnchorSet, HeadOutputs, RawPrediction};
use crate::tensor::{Tape, Var, PROB_FLOOR};

pub use crate::tensor::smooth_l1;

/// A span of normalized video time with `end > start`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite() && end > start) {
            return Err(Error::Input(format!("degenerate segment [{start}, {end}]")));
        }
        Ok(Segment { start, end })
    }

    pub fn from_center_width(center: f64, width: f64) -> Result<Self> {
        Segment::new(center - width / 2.0, center + width / 2.0)
    }

    pub fn center(&self) -> f64 {
        (self.start + self.end) / 2.0
    }

    pub fn width(&self) -> f64 {
        self.end - self.start
    }

    /// Clips to `[0, 1]`; `None` if nothing is left.
    pub fn clamp_unit(&self) -> Option<Segment> {
        let (s, e) = (self.start.clamp(0.0, 1.0), self.end.clamp(0.0, 1.0));
        (e > s).then_some(Segment { start: s, end: e })
    }
}

pub fn tiou(a: &Segment, b: &Segment) -> Result<f64> {
    for s in [a, b] {
        if !(s.end > s.start) {
            return Err(Error::Input(format!("degenerate segment [{}, {}]", s.start, s.end)));
        }
    }
    Ok(tiou_unchecked(a, b))
}

pub(crate) fn tiou_unchecked(a: &Segment, b: &Segment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.width() + b.width() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub labels: Vec<Label>,
    pub g_over: Vec<f64>,
    /// Offset targets; `None` for negatives.
    pub targets: Vec<Option<(f64, f64)>>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub gt: Segment,
}

impl MatchResult {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, l)| **l == Label::Positive).map(|(i, _)| i)
    }
}

pub fn match_anchors(
    anchors: &AnchorSet,
    gt: &Segment,
    positive_iou: f64,
    alpha_c: f64,
    alpha_w: f64,
) -> Result<MatchResult> {
    if anchors.is_empty() {
        return Err(dim_err("no anchors to match"));
    }
    let gt = Segment::new(gt.start, gt.end)?;
    let m = anchors.len();
    let mut result = MatchResult {
        labels: Vec::with_capacity(m),
        g_over: Vec::with_capacity(m),
        targets: Vec::with_capacity(m),
        n_pos: 0,
        n_neg: 0,
        gt,
    };
    for a in &anchors.anchors {
        let g = tiou_unchecked(&Segment { start: a.start(), end: a.end() }, &gt);
        result.g_over.push(g);
        if g > positive_iou {
            result.labels.push(Label::Positive);
            result.targets.push(Some(encode_targets(a, gt.center(), gt.width(), alpha_c, alpha_w)?));
            result.n_pos += 1;
        } else {
            result.labels.push(Label::Negative);
            result.targets.push(None);
            result.n_neg += 1;
        }
    }
    Ok(result)
}

/// `-(g ln p + (1 - g) ln(1 - p))` with `p` floored away from 0 and 1.
pub fn soft_cross_entropy(g: f64, p: f64) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
}

/// Per-anchor weights implementing the separate `1 / N_z` normalization of
/// the positive and negative groups.
fn group_weights(m: &MatchResult) -> Vec<f64> {
    m.labels
        .iter()
        .map(|l| match l {
            Label::Positive => 1.0 / m.n_pos as f64,
            Label::Negative => 1.0 / m.n_neg as f64,
        })
        .collect()
}

fn check_len(m: &MatchResult, n: usize) -> Result<()> {
    if m.labels.len() != n {
        return Err(dim_err(format!("{n} predictions for {} matched anchors", m.labels.len())));
    }
    Ok(())
}

pub fn loss_over(m: &MatchResult, raw: &[RawPrediction]) -> Result<f64> {
    check_len(m, raw.len())?;
    let w = group_weights(m);
    Ok(raw.iter().zip(&m.g_over).zip(&w).map(|((p, &g), &w)| w * soft_cross_entropy(g, p.p_over)).sum())
}

pub fn loss_loc(m: &MatchResult, raw: &[RawPrediction]) -> Result<f64> {
    check_len(m, raw.len())?;
    if m.n_pos == 0 {
        return Ok(0.0);
    }
    let total: f64 = m
        .positives()
        .map(|i| {
            let (dc, dw) = m.targets[i].expect("positives carry targets");
            smooth_l1(dc - raw[i].dc) + smooth_l1(dw - raw[i].dw)
        })
        .sum();
    Ok(total / m.n_pos as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_over: f64,
    pub l_loc: f64,
    pub l_all: f64,
    pub lambda: f64,
    pub eta: f64,
}

pub fn loss_all(l_over: f64, l_loc: f64, lambda: f64, eta: f64) -> LossBreakdown {
    LossBreakdown { l_over, l_loc, l_all: lambda * l_over + eta * l_loc, lambda, eta }
}

/// Tape handles of one example's loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_over: Var,
    pub l_loc: Var,
}

/// Records `L_over` and `L_loc` for one example.
pub fn record_losses(
    tape: &mut Tape,
    out: &HeadOutputs,
    m: &MatchResult,
    anchors: &AnchorSet,
    cfg: &LossConfig,
    alpha_c: f64,
    alpha_w: f64,
) -> Result<LossVars> {
    let n = tape.value(out.logits).len();
    check_len(m, n)?;
    let bce = tape.soft_bce(out.logits, &m.g_over)?;
    let l_over = tape.weighted_sum(bce, group_weights(m))?;

    let pos_w: Vec<f64> = m
        .labels
        .iter()
        .map(|l| if *l == Label::Positive { 1.0 / m.n_pos as f64 } else { 0.0 })
        .collect();
    let (rc, rw) = match cfg.loc_loss_space {
        LocLossSpace::Offset => {
            let tc: Vec<f64> = m.targets.iter().map(|t| -t.map_or(0.0, |t| t.0)).collect();
            let tw: Vec<f64> = m.targets.iter().map(|t| -t.map_or(0.0, |t| t.1)).collect();
            (tape.affine(out.dc, vec![1.0; n], tc)?, tape.affine(out.dw, vec![1.0; n], tw)?)
        }
        LocLossSpace::Absolute => {
            let (gc, gw) = (m.gt.center(), m.gt.width());
            let widths: Vec<f64> = anchors.anchors.iter().map(|a| a.width).collect();
            let sc: Vec<f64> = widths.iter().map(|w| alpha_c * w).collect();
            let shc: Vec<f64> = anchors.anchors.iter().map(|a| a.center - gc).collect();
            let rc = tape.affine(out.dc, sc, shc)?;
            let e = tape.scale_shift(out.dw, alpha_w, 0.0);
            let e = tape.exp(e);
            let rw = tape.affine(e, widths, vec![-gw; n])?;
            (rc, rw)
        }
    };
    let (sc, sw) = (tape.smooth_l1(rc), tape.smooth_l1(rw));
    let both = tape.add(sc, sw)?;
    let l_loc = tape.weighted_sum(both, pos_w)?;
    Ok(LossVars { l_over, l_loc })
}

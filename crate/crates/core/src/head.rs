//! Anchors over the prediction-serving maps, the prediction convolution, and
//! the offset parameterization
//! `phi_c = mu_c + alpha_c * mu_w * dc`, `phi_w = mu_w * exp(alpha_w * dw)`.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::init::{self, SeededRng};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

pub const DEFAULT_RATIOS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
pub const DEFAULT_ALPHA: f64 = 0.1;

/// A candidate span: unit `i` of a map with `T_k` units, scaled by `ratio`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub center: f64,
    pub width: f64,
    pub layer: usize,
    pub unit: usize,
    pub ratio: f64,
}

impl Anchor {
    pub fn new(layer: usize, unit: usize, t_k: usize, ratio: f64) -> Self {
        Anchor {
            center: (unit as f64 + 0.5) / t_k as f64,
            width: ratio / t_k as f64,
            layer,
            unit,
            ratio,
        }
    }

    pub fn start(&self) -> f64 {
        self.center - self.width / 2.0
    }

    pub fn end(&self) -> f64 {
        self.center + self.width / 2.0
    }
}

/// Anchors ordered layer-major, then unit, then ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
    pub ratios: Vec<f64>,
    pub layer_lengths: Vec<usize>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Anchors belonging to prediction layer `k`.
    pub fn layer(&self, k: usize) -> &[Anchor] {
        let start: usize = self.layer_lengths[..k].iter().sum::<usize>() * self.ratios.len();
        let len = self.layer_lengths[k] * self.ratios.len();
        &self.anchors[start..start + len]
    }
}

pub fn generate_anchors(layer_lengths: &[usize], ratios: &[f64]) -> Result<AnchorSet> {
    if ratios.is_empty() {
        return Err(Error::Config("empty ratio set".into()));
    }
    if let Some(r) = ratios.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::Config(format!("ratio {r} outside (0, 1]")));
    }
    if layer_lengths.contains(&0) {
        return Err(Error::Config("feature map with zero units".into()));
    }
    let mut anchors = Vec::with_capacity(layer_lengths.iter().sum::<usize>() * ratios.len());
    for (k, &t_k) in layer_lengths.iter().enumerate() {
        for i in 0..t_k {
            for &r in ratios {
                anchors.push(Anchor::new(k, i, t_k, r));
            }
        }
    }
    Ok(AnchorSet { anchors, ratios: ratios.to_vec(), layer_lengths: layer_lengths.to_vec() })
}

/// One anchor's raw outputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawPrediction {
    pub p_over: f64,
    pub dc: f64,
    pub dw: f64,
    pub anchor: usize,
}

/// A decoded span with its overlap score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedSegment {
    pub center: f64,
    pub width: f64,
    pub score: f64,
}

impl DecodedSegment {
    pub fn start(&self) -> f64 {
        self.center - self.width / 2.0
    }

    pub fn end(&self) -> f64 {
        self.center + self.width / 2.0
    }
}

/// Applies predicted offsets to an anchor. Never clamps.
pub fn decode(anchor: &Anchor, dc: f64, dw: f64, alpha_c: f64, alpha_w: f64) -> (f64, f64) {
    let center = anchor.center + alpha_c * anchor.width * dc;
    let width = anchor.width * (alpha_w * dw).exp();
    (center, width)
}

/// Offsets that decode back to the given span.
pub fn encode_targets(anchor: &Anchor, gt_center: f64, gt_width: f64, alpha_c: f64, alpha_w: f64) -> Result<(f64, f64)> {
    if !(gt_width > 0.0) {
        return Err(Error::Input(format!("ground-truth width {gt_width} must be positive")));
    }
    let dc = (gt_center - anchor.center) / (alpha_c * anchor.width);
    let dw = (gt_width / anchor.width).ln() / alpha_w;
    Ok((dc, dw))
}

/// Tape handles for head outputs concatenated over all prediction layers,
/// in anchor order: logits, center offsets and width offsets, each `[M]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub logits: Var,
    pub dc: Var,
    pub dw: Var,
}

/// One convolution per prediction layer emitting `3 |R|` channels per unit,
/// laid out as `(overlap, center, width)` triples in ratio order.
#[derive(Clone, Debug)]
pub struct HeadParams {
    layers: Vec<(ParamId, ParamId)>,
    num_ratios: usize,
}

impl HeadParams {
    pub fn register(store: &mut ParamStore, rng: &mut SeededRng, num_layers: usize, d_h: usize, num_ratios: usize) -> Self {
        let cout = 3 * num_ratios;
        let layers = (0..num_layers)
            .map(|k| {
                let w = store.add(
                    format!("head.{k}.weight"),
                    init::uniform(rng, vec![3, d_h, cout], 0.5 / (3.0 * d_h as f64).sqrt()).with_requires_grad(true),
                );
                let b = init::zeros(store, format!("head.{k}.bias"), vec![cout]);
                (w, b)
            })
            .collect();
        HeadParams { layers, num_ratios }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_params(&self, k: usize) -> (ParamId, ParamId) {
        self.layers[k]
    }

    /// Records the prediction convolutions over `maps` (one per prediction
    /// layer, in order).
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, maps: &[Var]) -> Result<HeadOutputs> {
        if maps.len() != self.layers.len() {
            return Err(dim_err(format!("{} maps for {} head layers", maps.len(), self.layers.len())));
        }
        let r = self.num_ratios;
        let mut per_layer = Vec::with_capacity(maps.len());
        for (&m, &(w, b)) in maps.iter().zip(&self.layers) {
            let t_k = tape.shape(m)[0];
            let (w, b) = (tape.param(store, w), tape.param(store, b));
            let out = tape.conv1d(m, w, 1, 1)?;
            let out = tape.add_row_bias(out, b)?;
            // [T_k x 3R] -> [T_k R x 3] -> [3 x T_k R]
            let out = tape.reshape(out, vec![t_k * r, 3])?;
            per_layer.push(tape.transpose(out)?);
        }
        let all = tape.concat_cols(&per_layer)?;
        let m = tape.shape(all)[1];
        let mut rows = [None; 3];
        for (j, slot) in rows.iter_mut().enumerate() {
            let row = tape.slice_rows(all, j, 1)?;
            *slot = Some(tape.reshape(row, vec![m])?);
        }
        let [Some(logits), Some(dc), Some(dw)] = rows else { unreachable!() };
        Ok(HeadOutputs { logits, dc, dw })
    }
}

/// Reads raw predictions off a tape.
pub fn raw_predictions(tape: &Tape, out: &HeadOutputs) -> Vec<RawPrediction> {
    let (l, c, w) = (tape.value(out.logits), tape.value(out.dc), tape.value(out.dw));
    (0..l.len())
        .map(|i| RawPrediction { p_over: crate::tensor::sigmoid(l[i]), dc: c[i], dw: w[i], anchor: i })
        .collect()
}

/// Decodes every raw prediction against its anchor.
pub fn decode_all(anchors: &AnchorSet, raw: &[RawPrediction], alpha_c: f64, alpha_w: f64) -> Vec<DecodedSegment> {
    raw.iter()
        .map(|p| {
            let (center, width) = decode(&anchors.anchors[p.anchor], p.dc, p.dw, alpha_c, alpha_w);
            DecodedSegment { center, width, score: p.p_over }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};

    #[test]
    fn anchor_examples() {
        let set = generate_anchors(&[4], &[1.0]).unwrap();
        assert_eq!(set.anchors[0].center, 0.125);
        assert_eq!(set.anchors[0].width, 0.25);

        let set = generate_anchors(&[4], &DEFAULT_RATIOS).unwrap();
        assert_eq!(set.len(), 16);

        let set = generate_anchors(&[1], &[1.0]).unwrap();
        assert_eq!((set.anchors[0].center, set.anchors[0].width), (0.5, 1.0));
        assert_eq!((set.anchors[0].start(), set.anchors[0].end()), (0.0, 1.0));

        assert!(matches!(generate_anchors(&[4], &[]), Err(Error::Config(_))));
        assert!(generate_anchors(&[4], &[1.5]).is_err());
    }

    #[test]
    fn anchor_ordering_is_layer_unit_ratio() {
        let set = generate_anchors(&[4, 2, 1], &DEFAULT_RATIOS).unwrap();
        assert_eq!(set.len(), (4 + 2 + 1) * 4);
        assert_eq!(set.layer(1).len(), 8);
        let a = set.layer(1)[5];
        assert_eq!((a.layer, a.unit, a.ratio), (1, 1, 0.5));
        for w in set.anchors.windows(2) {
            let key = |a: &Anchor| (a.layer, a.unit);
            assert!(key(&w[0]) <= key(&w[1]));
        }
    }

    #[test]
    fn decode_examples() {
        let anchor = Anchor { center: 0.5, width: 0.25, layer: 0, unit: 0, ratio: 1.0 };
        assert_eq!(decode(&anchor, 0.0, 0.0, 0.1, 0.1), (0.5, 0.25));
        let (c, w) = decode(&anchor, 1.0, 1.0, 0.1, 0.1);
        assert!((c - 0.525).abs() < 1e-12);
        assert!((w - 0.25 * 0.1f64.exp()).abs() < 1e-12);
        assert!((w - 0.276288).abs() < 1e-5);

        let (dc, dw) = encode_targets(&anchor, 0.525, 0.25 * 0.1f64.exp(), 0.1, 0.1).unwrap();
        assert!((dc - 1.0).abs() < 1e-9 && (dw - 1.0).abs() < 1e-9);
        assert_eq!(encode_targets(&anchor, 0.5, 0.25, 0.1, 0.1).unwrap(), (0.0, 0.0));
        assert!(matches!(encode_targets(&anchor, 0.5, 0.0, 0.1, 0.1), Err(Error::Input(_))));
    }

    #[test]
    fn zero_head_predicts_half_and_no_offsets() {
        let mut store = ParamStore::new();
        let mut rng = init::rng(0);
        let head = HeadParams::register(&mut store, &mut rng, 2, 3, 4);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let m0 = tape.constant(&init::uniform(&mut rng, vec![4, 3], 1.0));
        let m1 = tape.constant(&init::uniform(&mut rng, vec![2, 3], 1.0));
        let out = head.predict(&mut tape, &store, &[m0, m1]).unwrap();
        let raw = raw_predictions(&tape, &out);
        assert_eq!(raw.len(), (4 + 2) * 4);
        assert!(raw.iter().all(|p| p.p_over == 0.5 && p.dc == 0.0 && p.dw == 0.0));
    }

    #[test]
    fn channel_layout_follows_anchor_order() {
        // Bias-only head: channel 3r + j of every unit carries a known value.
        let mut store = ParamStore::new();
        let mut rng = init::rng(0);
        let head = HeadParams::register(&mut store, &mut rng, 1, 2, 2);
        let (w, b) = head.layer_params(0);
        store.get_mut(w).data_mut().fill(0.0);
        store.get_mut(b).data_mut().copy_from_slice(&[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
        let mut tape = Tape::new();
        let m = tape.constant(&Tensor::zeros(vec![3, 2]));
        let out = head.predict(&mut tape, &store, &[m]).unwrap();
        assert_eq!(tape.value(out.dc), &[1.0, 11.0, 1.0, 11.0, 1.0, 11.0]);
        assert_eq!(tape.value(out.dw), &[2.0, 12.0, 2.0, 12.0, 2.0, 12.0]);
    }

    #[test]
    fn head_gradients() {
        let mut store = ParamStore::new();
        let mut rng = init::rng(8);
        let head = HeadParams::register(&mut store, &mut rng, 2, 3, 2);
        let m0 = init::uniform(&mut rng, vec![4, 3], 1.0);
        let m1 = init::uniform(&mut rng, vec![2, 3], 1.0);
        let weights: Vec<f64> = (0..12).map(|i| (i as f64 - 5.5) / 4.0).collect();
        let report = grad_check(&mut store, 1e-5, |tape, s| {
            let a = tape.constant(&m0);
            let b = tape.constant(&m1);
            let out = head.predict(tape, s, &[a, b])?;
            let p = tape.sigmoid(out.logits);
            let e = tape.exp(out.dw);
            let x = tape.weighted_sum(p, weights.clone())?;
            let y = tape.weighted_sum(out.dc, weights.clone())?;
            let z = tape.weighted_sum(e, weights.clone())?;
            let xy = tape.add(x, y)?;
            tape.add(xy, z)
        })
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }
}

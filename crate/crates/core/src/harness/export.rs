//! Word-attention dumps: one JSON line per query with the attention matrix
//! `[T_k x N]` of every conditioned layer.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::dataset::{Dataset, GroundingExample};
use crate::model::Model;
use crate::scdm::AttentionRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAttention {
    /// Backbone layer index (0 is the unconditioned first layer).
    pub layer: usize,
    pub weights: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub id: String,
    pub words: Vec<String>,
    pub layers: Vec<LayerAttention>,
}

fn rows(record: &AttentionRecord) -> Vec<Vec<f64>> {
    (0..record.weights.rows()).map(|r| record.weights.row(r).to_vec()).collect()
}

pub fn export_attention(model: &Model, data: &Dataset, example: &GroundingExample) -> Result<AttentionDump> {
    let records = model.attention(example.query())?;
    let words = example
        .tokens
        .iter()
        .map(|&t| data.vocabulary.token(t).unwrap_or("?").to_string())
        .collect();
    let layers = records.iter().enumerate().map(|(i, r)| LayerAttention { layer: i + 1, weights: rows(r) }).collect();
    Ok(AttentionDump { id: example.id.clone(), words, layers })
}

pub fn write_attention(model: &Model, data: &Dataset, mut out: impl Write) -> Result<()> {
    for ex in &data.examples {
        serde_json::to_writer(&mut out, &export_attention(model, data, ex)?)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ConditioningMode, ModelConfig};
    use crate::harness::synth::{gen_synthetic, SynthConfig};
    use crate::Error;

    fn data() -> Dataset {
        let cfg = SynthConfig { input_length: 16, d_v: 4, num_prototypes: 3, train_size: 3, val_size: 0, test_size: 0, min_width: 0.125, max_width: 0.5, ..SynthConfig::default() };
        gen_synthetic(&cfg).unwrap().train
    }

    fn model(mode: ConditioningMode, vocab: usize) -> Model {
        let cfg = ModelConfig {
            vocab_size: vocab,
            input_length: 16,
            num_layers: 3,
            d_v: 4,
            d_embed: 4,
            d_s: 4,
            d_f: 4,
            d_h: 4,
            d_a: 4,
            mode,
            ..ModelConfig::default()
        };
        Model::new(cfg, 1).unwrap()
    }

    #[test]
    fn dump_matches_in_memory_records() {
        let d = data();
        let m = model(ConditioningMode::Scdm, d.vocabulary.size());
        let mut buf = Vec::new();
        write_attention(&m, &d, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        for (line, ex) in text.lines().zip(&d.examples) {
            let dump: AttentionDump = serde_json::from_str(line).unwrap();
            let records = m.attention(ex.query()).unwrap();
            assert_eq!(dump.layers.len(), 2);
            for (l, r) in dump.layers.iter().zip(&records) {
                assert_eq!(l.weights, rows(r));
                assert!(l.weights.iter().all(|row| (row.iter().sum::<f64>() - 1.0).abs() < 1e-6));
                assert!(l.weights.iter().all(|row| row.len() == ex.tokens.len()));
            }
        }
    }

    #[test]
    fn other_modes_are_unsupported() {
        let d = data();
        let m = model(ConditioningMode::Fc, d.vocabulary.size());
        assert!(matches!(export_attention(&m, &d, &d.examples[0]), Err(Error::UnsupportedMode(_))));
    }
}

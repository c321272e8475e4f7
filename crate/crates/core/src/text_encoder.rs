//! Sentence encoder: learned word embeddings followed by a bidirectional
//! gated recurrent unit. Word states are the concatenated forward/backward
//! hidden states; the global sentence vector is their mean.

use std::collections::HashMap;


use crate::error::{Error, Result};
use crate::init::{self, SeededRng};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const PAD_TOKEN: &str = "<pad>";

/// Dense token-to-index map with PAD at index 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from words; PAD is inserted at index 0.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = vec![PAD_TOKEN.to_string()];
        tokens.extend(words.into_iter().map(Into::into));
        Self::from_tokens(tokens)
    }

    /// Builds a vocabulary from the full token list, PAD included.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN) {
            return Err(Error::Input(format!("vocabulary must start with {PAD_TOKEN}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn encode_words(&self, words: &[&str]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| self.index_of(w).ok_or_else(|| Error::Input(format!("unknown word {w:?}"))))
            .collect()
    }
}

/// Word-level states `[N x d_s]` and their mean `[d_s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEncoding {
    pub word_states: Tensor,
    pub global: Tensor,
}

/// Tape handles for an encoded sentence.
#[derive(Clone, Copy, Debug)]
pub struct EncodedSentence {
    pub word_states: Var,
    pub global: Var,
}

#[derive(Clone, Debug)]
struct GruParams {
    w_ir: ParamId,
    w_iz: ParamId,
    w_in: ParamId,
    w_hr: ParamId,
    w_hz: ParamId,
    w_hn: ParamId,
    b_r: ParamId,
    b_z: ParamId,
    b_in: ParamId,
    b_hn: ParamId,
    hidden: usize,
}

impl GruParams {
    fn register(store: &mut ParamStore, rng: &mut SeededRng, prefix: &str, d_in: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut p = |name: &str, shape: Vec<usize>| {
            store.add(format!("{prefix}.{name}"), init::uniform(rng, shape, bound).with_requires_grad(true))
        };
        GruParams {
            w_ir: p("w_ir", vec![hidden, d_in]),
            w_iz: p("w_iz", vec![hidden, d_in]),
            w_in: p("w_in", vec![hidden, d_in]),
            w_hr: p("w_hr", vec![hidden, hidden]),
            w_hz: p("w_hz", vec![hidden, hidden]),
            w_hn: p("w_hn", vec![hidden, hidden]),
            b_r: p("b_r", vec![hidden]),
            b_z: p("b_z", vec![hidden]),
            b_in: p("b_in", vec![hidden]),
            b_hn: p("b_hn", vec![hidden]),
            hidden,
        }
    }

    /// Runs the cell over `inputs [N x d_in]` in the given order and returns
    /// the hidden state after each position, in that order.
    fn run(&self, tape: &mut Tape, store: &ParamStore, inputs: Var, order: &[usize]) -> Result<Vec<Var>> {
        let w_ir = tape.param(store, self.w_ir);
        let w_iz = tape.param(store, self.w_iz);
        let w_in = tape.param(store, self.w_in);
        let w_hr = tape.param(store, self.w_hr);
        let w_hz = tape.param(store, self.w_hz);
        let w_hn = tape.param(store, self.w_hn);
        let b_r = tape.param(store, self.b_r);
        let b_z = tape.param(store, self.b_z);
        let b_in = tape.param(store, self.b_in);
        let b_hn = tape.param(store, self.b_hn);

        // Input projections for every position at once.
        let xr = tape.matmul_nt(inputs, w_ir)?;
        let xr = tape.add_row_bias(xr, b_r)?;
        let xz = tape.matmul_nt(inputs, w_iz)?;
        let xz = tape.add_row_bias(xz, b_z)?;
        let xn = tape.matmul_nt(inputs, w_in)?;
        let xn = tape.add_row_bias(xn, b_in)?;

        let mut h = tape.constant(&Tensor::zeros(vec![1, self.hidden]));
        let mut states = Vec::with_capacity(order.len());
        for &pos in order {
            let xr_t = tape.slice_rows(xr, pos, 1)?;
            let xz_t = tape.slice_rows(xz, pos, 1)?;
            let xn_t = tape.slice_rows(xn, pos, 1)?;

            let hr = tape.matmul_nt(h, w_hr)?;
            let r = tape.add(xr_t, hr)?;
            let r = tape.sigmoid(r);

            let hz = tape.matmul_nt(h, w_hz)?;
            let z = tape.add(xz_t, hz)?;
            let z = tape.sigmoid(z);

            let hn = tape.matmul_nt(h, w_hn)?;
            let hn = tape.add_row_bias(hn, b_hn)?;
            let gated = tape.mul(r, hn)?;
            let n = tape.add(xn_t, gated)?;
            let n = tape.tanh(n);

            // h' = (1 - z) * n + z * h = n + z * (h - n)
            let diff = tape.sub(h, n)?;
            let zd = tape.mul(z, diff)?;
            h = tape.add(n, zd)?;
            states.push(h);
        }
        Ok(states)
    }
}

/// Parameter handles for the embedding table and both recurrent directions.
#[derive(Clone, Debug)]
pub struct TextEncoderParams {
    embedding: ParamId,
    forward: GruParams,
    backward: GruParams,
    vocab_size: usize,
    d_s: usize,
}

impl TextEncoderParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        vocab_size: usize,
        d_embed: usize,
        d_s: usize,
    ) -> Result<Self> {
        if !d_s.is_multiple_of(2) {
            return Err(Error::Config(format!("d_s = {d_s} must be even")));
        }
        let embedding = store.add(
            "text.embedding",
            init::uniform(rng, vec![vocab_size, d_embed], 1.0).with_requires_grad(true),
        );
        let forward = GruParams::register(store, rng, "text.gru_fwd", d_embed, d_s / 2);
        let backward = GruParams::register(store, rng, "text.gru_bwd", d_embed, d_s / 2);
        Ok(TextEncoderParams { embedding, forward, backward, vocab_size, d_s })
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t == PAD || t >= self.vocab_size) {
            return Err(Error::Input(format!(
                "token index {bad} is not a word of the {}-entry vocabulary",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Records the encoder on `tape`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, tokens: &[usize]) -> Result<EncodedSentence> {
        self.check_tokens(tokens)?;
        let table = tape.param(store, self.embedding);
        let embedded = tape.gather_rows(table, tokens)?;
        let n = tokens.len();
        let fwd_order: Vec<usize> = (0..n).collect();
        let bwd_order: Vec<usize> = (0..n).rev().collect();
        let fwd = self.forward.run(tape, store, embedded, &fwd_order)?;
        let mut bwd = self.backward.run(tape, store, embedded, &bwd_order)?;
        bwd.reverse();
        let fwd = tape.concat_rows(&fwd)?;
        let bwd = tape.concat_rows(&bwd)?;
        let word_states = tape.concat_cols(&[fwd, bwd])?;
        let global = tape.mean_rows(word_states)?;
        Ok(EncodedSentence { word_states, global })
    }
}

/// Encodes one sentence outside of any training tape.
pub fn encode_sentence(params: &TextEncoderParams, store: &ParamStore, tokens: &[usize]) -> Result<SentenceEncoding> {
    let mut tape = Tape::new();
    let enc = params.encode(&mut tape, store, tokens)?;
    Ok(SentenceEncoding { word_states: tape.tensor(enc.word_states), global: tape.tensor(enc.global) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn setup(vocab: usize, d_s: usize) -> (ParamStore, TextEncoderParams) {
        let mut store = ParamStore::new();
        let mut rng = init::rng(3);
        let p = TextEncoderParams::register(&mut store, &mut rng, vocab, 6, d_s).unwrap();
        (store, p)
    }

    #[test]
    fn vocabulary_is_dense_with_pad_first() {
        let v = Vocabulary::new(["a", "b", "c"]).unwrap();
        assert_eq!(v.size(), 4);
        assert_eq!(v.index_of(PAD_TOKEN), Some(0));
        assert_eq!(v.encode_words(&["c", "a"]).unwrap(), vec![3, 1]);
        assert!(v.encode_words(&["zzz"]).is_err());
        assert!(Vocabulary::new(["a", "a"]).is_err());
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
    }

    #[test]
    fn single_word_global_equals_state() {
        let (store, p) = setup(5, 8);
        let enc = encode_sentence(&p, &store, &[2]).unwrap();
        assert_eq!(enc.word_states.shape(), &[1, 8]);
        assert_eq!(enc.global.data(), enc.word_states.data());
    }

    #[test]
    fn global_is_row_mean() {
        let (store, p) = setup(7, 8);
        for n in 1..=6 {
            let tokens: Vec<usize> = (0..n).map(|i| 1 + (i * 5) % 6).collect();
            let enc = encode_sentence(&p, &store, &tokens).unwrap();
            assert_eq!(enc.word_states.shape(), &[n, 8]);
            for c in 0..8 {
                let mean: f64 = (0..n).map(|r| enc.word_states.row(r)[c]).sum::<f64>() / n as f64;
                assert!((mean - enc.global.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn order_sensitive() {
        let (store, p) = setup(6, 8);
        let a = encode_sentence(&p, &store, &[1, 2, 3]).unwrap();
        let b = encode_sentence(&p, &store, &[3, 2, 1]).unwrap();
        assert_ne!(a.word_states, b.word_states);
        // Determinism.
        assert_eq!(a, encode_sentence(&p, &store, &[1, 2, 3]).unwrap());
    }

    #[test]
    fn rejects_bad_tokens() {
        let (store, p) = setup(4, 4);
        assert!(matches!(encode_sentence(&p, &store, &[]), Err(Error::Input(_))));
        assert!(matches!(encode_sentence(&p, &store, &[4]), Err(Error::Input(_))));
        assert!(matches!(encode_sentence(&p, &store, &[0, 1]), Err(Error::Input(_))));
    }

    #[test]
    fn recurrent_gradients_match_finite_differences() {
        let (mut store, p) = setup(5, 4);
        let weights: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let report = grad_check(&mut store, 1e-5, |tape, s| {
            let enc = p.encode(tape, s, &[1, 3, 4])?;
            tape.weighted_sum(enc.word_states, weights.clone())
        })
        .unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }
}

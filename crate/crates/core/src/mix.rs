//! Word representations from encoder layers: a trainable scalar mix over
//! all `L + 1` activations, followed by first-subpiece pooling.

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, ParamId, ParamStore, Var};
use crate::encoder::{encode, EncoderConfig, EncoderParams};
use crate::rng::Rng;
use crate::wordpiece::{tokenize_sentence, Span, Vocabulary};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepresentationMode {
    /// Encoder activations are constants; a BiLSTM sits on top.
    Frozen,
    /// Gradients flow into the encoder; no BiLSTM.
    Ft,
}

impl std::str::FromStr for RepresentationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "frozen" => Ok(RepresentationMode::Frozen),
            "ft" => Ok(RepresentationMode::Ft),
            other => Err(Error::invalid(format!("unknown representation mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarMix {
    /// `1 × (L+1)` layer scalars.
    pub scalars: ParamId,
    /// `1 × 1` scale.
    pub gamma: ParamId,
    pub layer_dropout: f64,
}

impl ScalarMix {
    /// Register mix parameters (equal scalars, unit scale) in `store`.
    pub fn add_to(store: &mut ParamStore, n_layers: usize, layer_dropout: f64) -> Self {
        ScalarMix {
            scalars: store.add("mix.scalars", Mat::zeros((1, n_layers + 1))),
            gamma: store.add("mix.gamma", Mat::ones((1, 1))),
            layer_dropout,
        }
    }
}

/// Draw which layers survive layer dropout. Each layer drops independently
/// with probability `p`; a draw that drops every layer is repeated.
pub fn draw_retained(n: usize, p: f64, rng: &mut Rng) -> Vec<bool> {
    loop {
        let keep: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= p).collect();
        if keep.iter().any(|&k| k) {
            return keep;
        }
    }
}

/// `γ · Σ_j w_j · layers[j]` where `w` is the softmax of the layer scalars
/// over retained layers. A dropout rng enables layer dropout.
pub fn scalar_mix(g: &mut Graph, mix: &ScalarMix, layers: &[Var], dropout: Option<&mut Rng>) -> Result<Var> {
    let s = g.param(mix.scalars);
    let k = g.shape(s).1;
    if layers.len() != k {
        return Err(Error::Shape(format!("{} layers for {k} mix scalars", layers.len())));
    }
    let shape = g.shape(layers[0]);
    if layers.iter().any(|&l| g.shape(l) != shape) {
        return Err(Error::Shape("layer activations differ in shape".into()));
    }
    let s = match dropout {
        Some(r) if mix.layer_dropout > 0.0 => {
            let keep = draw_retained(k, mix.layer_dropout, r);
            let mask = Array2::from_shape_fn((1, k), |(_, j)| if keep[j] { 0.0 } else { f64::NEG_INFINITY });
            g.add_const(s, mask)
        }
        _ => s,
    };
    let w = g.softmax(s);
    let mixed = g.weighted_sum(layers, w);
    let gamma = g.param(mix.gamma);
    Ok(g.mul_scalar(mixed, gamma))
}

/// One vector per word: the row of its first piece. `offset` is the
/// position of the first content piece (1 after `[CLS]`).
pub fn pool_to_words(g: &mut Graph, pieces: Var, spans: &[Span], offset: usize) -> Result<Var> {
    if let Some(i) = spans.iter().position(|&(_, len)| len == 0) {
        return Err(Error::invalid(format!("word {i} has no pieces")));
    }
    let idx: Vec<usize> = spans.iter().map(|&(start, _)| start + offset).collect();
    g.gather_rows(pieces, &idx)
}

/// `[CLS] pieces [SEP]` ids with the per-word spans, or an error when the
/// sentence does not fit the encoder.
pub fn frame_sentence<S: AsRef<str>>(
    tokens: &[S],
    vocab: &Vocabulary,
    max_positions: usize,
) -> Result<(Vec<usize>, Vec<Span>)> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty sentence"));
    }
    let (pieces, spans) = tokenize_sentence(tokens, vocab)?;
    if pieces.len() + 2 > max_positions {
        return Err(Error::invalid(format!(
            "sentence of {} pieces does not fit {max_positions} positions",
            pieces.len()
        )));
    }
    let sp = vocab.special();
    let mut ids = Vec::with_capacity(pieces.len() + 2);
    ids.push(sp.cls);
    ids.extend(pieces);
    ids.push(sp.sep);
    Ok((ids, spans))
}

/// Encoder activations for a framed sentence, as plain matrices. Used to
/// cache inputs for frozen-mode parsing.
pub fn frozen_activations(
    store: &ParamStore,
    config: &EncoderConfig,
    params: &EncoderParams,
    ids: &[usize],
) -> Result<Vec<Mat>> {
    let mut g = Graph::new(store);
    let acts = encode(&mut g, config, params, ids, None, None)?;
    Ok(acts.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Where the encoder activations come from.
pub enum EncoderInput<'a> {
    /// Precomputed activations, entered as constants.
    Cached(&'a [Mat]),
    /// Run the encoder inside the graph; its parameters (looked up in the
    /// graph's store) receive gradients unless the graph freezes them.
    Live {
        config: &'a EncoderConfig,
        params: &'a EncoderParams,
        ids: &'a [usize],
    },
}

/// Word vectors for one sentence: encoder activations, scalar mix, then
/// first-subpiece pooling. With a dropout rng, layer dropout (and encoder
/// dropout in live mode) is applied.
pub fn embed_sentence(
    g: &mut Graph,
    input: EncoderInput,
    spans: &[Span],
    mix: &ScalarMix,
    mut dropout: Option<&mut Rng>,
) -> Result<Var> {
    let layers: Vec<Var> = match input {
        EncoderInput::Cached(acts) => acts.iter().map(|a| g.constant(a.clone())).collect(),
        EncoderInput::Live { config, params, ids } => {
            encode(g, config, params, ids, None, dropout.as_deref_mut())?
        }
    };
    let mixed = scalar_mix(g, mix, &layers, dropout)?;
    pool_to_words(g, mixed, spans, 1)
}

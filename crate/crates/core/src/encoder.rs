//! A compact post-LN transformer encoder with a tied masked-LM head.
//!
//! Parameters live in a [`ParamStore`] and are addressed through
//! [`EncoderParams`], a table of ids. Because the table can be remapped,
//! the same forward code runs against the encoder's own store or against a
//! larger store that also holds parser weights (finetuning).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, ParamId, ParamStore, Var};
use crate::rng::{self, Rng};
use crate::{Error, Result};

pub const INIT_STD: f64 = 0.02;
const CHECKPOINT_MAGIC: &[u8; 8] = b"LAPTENC\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 4,
            hidden: 128,
            n_heads: 4,
            ff_dim: 512,
            vocab_size: 5000,
            max_positions: 128,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.hidden.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.vocab_size == 0 || self.max_positions < 2 {
            return Err(Error::invalid("encoder needs layers, a vocabulary and room for [CLS] and [SEP]"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

impl LayerParams {
    fn ids(&self) -> Vec<ParamId> {
        vec![
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo, self.ln1_g,
            self.ln1_b, self.w1, self.b1, self.w2, self.b2, self.ln2_g, self.ln2_b,
        ]
    }

    fn remap(&self, map: &[ParamId]) -> Self {
        let m = |id: ParamId| map[id.0];
        LayerParams {
            wq: m(self.wq),
            bq: m(self.bq),
            wk: m(self.wk),
            bk: m(self.bk),
            wv: m(self.wv),
            bv: m(self.bv),
            wo: m(self.wo),
            bo: m(self.bo),
            ln1_g: m(self.ln1_g),
            ln1_b: m(self.ln1_b),
            w1: m(self.w1),
            b1: m(self.b1),
            w2: m(self.w2),
            b2: m(self.b2),
            ln2_g: m(self.ln2_g),
            ln2_b: m(self.ln2_b),
        }
    }
}

/// Ids of every encoder tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub piece: ParamId,
    pub position: ParamId,
    pub emb_ln_g: ParamId,
    pub emb_ln_b: ParamId,
    pub layers: Vec<LayerParams>,
    /// Output bias of the MLM head; the weights are tied to `piece`.
    pub head_bias: ParamId,
}

impl EncoderParams {
    /// Tensors of block `layer`: 0 is the embedding block, `1..=L` the
    /// transformer layers. The MLM head bias belongs to no block.
    pub fn block(&self, layer: usize) -> Vec<ParamId> {
        if layer == 0 {
            vec![self.piece, self.position, self.emb_ln_g, self.emb_ln_b]
        } else {
            self.layers[layer - 1].ids()
        }
    }

    pub fn all(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = (0..=self.layers.len()).flat_map(|l| self.block(l)).collect();
        ids.push(self.head_bias);
        ids
    }

    /// Translate ids after the encoder store was copied into another
    /// store; `map[old.0]` is the new id.
    pub fn remap(&self, map: &[ParamId]) -> Self {
        EncoderParams {
            piece: map[self.piece.0],
            position: map[self.position.0],
            emb_ln_g: map[self.emb_ln_g.0],
            emb_ln_b: map[self.emb_ln_b.0],
            layers: self.layers.iter().map(|l| l.remap(map)).collect(),
            head_bias: map[self.head_bias.0],
        }
    }
}

/// Zero-mean Gaussian with standard deviation `std`, redrawn outside ±2σ.
pub fn truncated_normal(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            break x;
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub store: ParamStore,
    pub params: EncoderParams,
    /// Embedding rows repurposed by vocabulary augmentation.
    pub new_slot_ids: Vec<usize>,
    pub vocab_hash: String,
}

impl Encoder {
    pub fn new(config: EncoderConfig, vocab_hash: impl Into<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(seed);
        let (d, f) = (config.hidden, config.ff_dim);
        let mut store = ParamStore::new();
        let w = |store: &mut ParamStore, name: String, rows, cols, r: &mut Rng| {
            store.add(name, truncated_normal(r, rows, cols, INIT_STD))
        };
        let piece = w(&mut store, "emb.piece".into(), config.vocab_size, d, &mut r);
        let position = w(&mut store, "emb.position".into(), config.max_positions, d, &mut r);
        let emb_ln_g = store.add("emb.ln.g", Mat::ones((1, d)));
        let emb_ln_b = store.add("emb.ln.b", Mat::zeros((1, d)));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 1..=config.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerParams {
                wq: w(&mut store, p("wq"), d, d, &mut r),
                bq: store.add(p("bq"), Mat::zeros((1, d))),
                wk: w(&mut store, p("wk"), d, d, &mut r),
                bk: store.add(p("bk"), Mat::zeros((1, d))),
                wv: w(&mut store, p("wv"), d, d, &mut r),
                bv: store.add(p("bv"), Mat::zeros((1, d))),
                wo: w(&mut store, p("wo"), d, d, &mut r),
                bo: store.add(p("bo"), Mat::zeros((1, d))),
                ln1_g: store.add(p("ln1.g"), Mat::ones((1, d))),
                ln1_b: store.add(p("ln1.b"), Mat::zeros((1, d))),
                w1: w(&mut store, p("w1"), d, f, &mut r),
                b1: store.add(p("b1"), Mat::zeros((1, f))),
                w2: w(&mut store, p("w2"), f, d, &mut r),
                b2: store.add(p("b2"), Mat::zeros((1, d))),
                ln2_g: store.add(p("ln2.g"), Mat::ones((1, d))),
                ln2_b: store.add(p("ln2.b"), Mat::zeros((1, d))),
            });
        }
        let head_bias = store.add("head.bias", Mat::zeros((1, config.vocab_size)));
        Ok(Encoder {
            config,
            store,
            params: EncoderParams {
                piece,
                position,
                emb_ln_g,
                emb_ln_b,
                layers,
                head_bias,
            },
            new_slot_ids: Vec::new(),
            vocab_hash: vocab_hash.into(),
        })
    }

    /// Redraw the embedding rows `ids` from the initial distribution and
    /// record them as new slots. Other rows are untouched.
    pub fn initialize_new_embeddings(&mut self, ids: &[usize], seed: u64) -> Result<()> {
        let v = self.config.vocab_size;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("slot id {bad} outside vocabulary of {v}")));
        }
        let mut r = rng::rng(seed);
        let d = self.config.hidden;
        let emb = self.store.get_mut(self.params.piece);
        for &id in ids {
            let row = truncated_normal(&mut r, 1, d, INIT_STD);
            emb.row_mut(id).assign(&row.row(0));
        }
        for &id in ids {
            if !self.new_slot_ids.contains(&id) {
                self.new_slot_ids.push(id);
            }
        }
        self.new_slot_ids.sort_unstable();
        Ok(())
    }

    /// Run the encoder on its own store without recording gradients that
    /// anyone will read. Returns per-layer activations as plain matrices.
    pub fn activations(&self, input_ids: &[usize]) -> Result<Vec<Mat>> {
        let mut g = Graph::new(&self.store);
        let acts = encode(&mut g, &self.config, &self.params, input_ids, None, None)?;
        Ok(acts.into_iter().map(|v| g.value(v).clone()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            new_slot_ids: self.new_slot_ids.clone(),
            params: self.params.clone(),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        write_store(&mut out, CHECKPOINT_MAGIC, &header, &self.store).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let (header, store): (CheckpointHeader, _) = read_store(&mut BufReader::new(file), CHECKPOINT_MAGIC, path)?;
        header.config.validate()?;
        Ok(Encoder {
            config: header.config,
            store,
            params: header.params,
            new_slot_ids: header.new_slot_ids,
            vocab_hash: header.vocab_hash,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: EncoderConfig,
    vocab_hash: String,
    new_slot_ids: Vec<usize>,
    params: EncoderParams,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

/// Binary layout: magic, u32 version, u64 header length, JSON header
/// (caller metadata plus tensor names and shapes), then every tensor as
/// little-endian f64 in row-major order.
pub(crate) fn write_store<W: Write, H: Serialize>(
    out: &mut W,
    magic: &[u8; 8],
    header: &H,
    store: &ParamStore,
) -> std::io::Result<()> {
    let tensors: Vec<TensorMeta> = store
        .ids()
        .map(|id| {
            let (rows, cols) = store.get(id).dim();
            TensorMeta {
                name: store.name(id).to_string(),
                rows,
                cols,
            }
        })
        .collect();
    let json = serde_json::to_vec(&(header, tensors))?;
    out.write_all(magic)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for id in store.ids() {
        for v in store.get(id).iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

pub(crate) fn read_store<R: Read, H: for<'de> Deserialize<'de>>(
    input: &mut R,
    magic: &[u8; 8],
    path: &Path,
) -> Result<(H, ParamStore)> {
    let io = |e| Error::io(path, e);
    let mut found_magic = [0u8; 8];
    input.read_exact(&mut found_magic).map_err(io)?;
    if &found_magic != magic {
        return Err(Error::Format {
            path: path.display().to_string(),
            line: 0,
            message: "not a checkpoint file".into(),
        });
    }
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b4).map_err(io)?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut b8 = [0u8; 8];
    input.read_exact(&mut b8).map_err(io)?;
    let mut json = vec![0u8; u64::from_le_bytes(b8) as usize];
    input.read_exact(&mut json).map_err(io)?;
    let (header, tensors): (H, Vec<TensorMeta>) = serde_json::from_slice(&json)?;
    let mut store = ParamStore::new();
    for t in tensors {
        let mut data = vec![0u8; t.rows * t.cols * 8];
        input.read_exact(&mut data).map_err(io)?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Mat::from_shape_vec((t.rows, t.cols), values).map_err(|e| Error::Shape(e.to_string()))?;
        store.add(t.name, m);
    }
    Ok((header, store))
}

/// Inverted dropout; a no-op without an rng.
pub(crate) fn dropout(g: &mut Graph, x: Var, p: f64, rng: &mut Option<&mut Rng>) -> Var {
    match rng {
        Some(r) if p > 0.0 => {
            let keep = 1.0 - p;
            let (n, m) = g.shape(x);
            let mask = Array2::from_shape_simple_fn((n, m), || {
                if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 }
            });
            g.mul_const(x, mask)
        }
        _ => x,
    }
}

/// Encoder forward pass over one framed sequence.
///
/// Returns `L + 1` activations of shape `n × d`: the layer-normed sum of
/// piece and position embeddings, then the output of each layer. Positions
/// whose `attention_mask` entry is 0 are not attended to. Passing a dropout
/// rng turns on training-time dropout.
pub fn encode(
    g: &mut Graph,
    config: &EncoderConfig,
    p: &EncoderParams,
    input_ids: &[usize],
    attention_mask: Option<&[u8]>,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<Vec<Var>> {
    let n = input_ids.len();
    if n == 0 {
        return Err(Error::invalid("empty input sequence"));
    }
    if n > config.max_positions {
        return Err(Error::invalid(format!(
            "sequence of {n} exceeds {} positions",
            config.max_positions
        )));
    }
    if let Some(mask) = attention_mask {
        if mask.len() != n {
            return Err(Error::Shape("attention mask length differs from input".into()));
        }
    }
    let d = config.hidden;
    let dh = d / config.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let bias = attention_mask.map(|mask| {
        Array2::from_shape_fn((n, n), |(_, j)| if mask[j] == 0 { f64::NEG_INFINITY } else { 0.0 })
    });

    let emb = g.param(p.piece);
    let pieces = g.gather_rows(emb, input_ids)?;
    let pos_table = g.param(p.position);
    let positions: Vec<usize> = (0..n).collect();
    let pos = g.gather_rows(pos_table, &positions)?;
    let x = g.add(pieces, pos);
    let (lg, lb) = (g.param(p.emb_ln_g), g.param(p.emb_ln_b));
    let x = g.layer_norm(x, lg, lb);
    let mut h = dropout(g, x, config.dropout, &mut dropout_rng);
    let mut acts = vec![h];

    for lp in &p.layers {
        let lin = |g: &mut Graph, x: Var, w: ParamId, b: ParamId| {
            let (w, b) = (g.param(w), g.param(b));
            let y = g.matmul(x, w);
            g.add_row(y, b)
        };
        let q = lin(g, h, lp.wq, lp.bq);
        let k = lin(g, h, lp.wk, lp.bk);
        let v = lin(g, h, lp.wv, lp.bv);
        let mut heads = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let (s, e) = (head * dh, (head + 1) * dh);
            let qh = g.slice_cols(q, s, e);
            let kh = g.slice_cols(k, s, e);
            let vh = g.slice_cols(v, s, e);
            let scores = g.matmul_t(qh, kh);
            let mut scores = g.scale(scores, scale);
            if let Some(b) = &bias {
                scores = g.add_const(scores, b.clone());
            }
            let probs = g.softmax(scores);
            heads.push(g.matmul(probs, vh));
        }
        let ctx = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let attn = lin(g, ctx, lp.wo, lp.bo);
        let attn = dropout(g, attn, config.dropout, &mut dropout_rng);
        let res = g.add(h, attn);
        let (g1, b1) = (g.param(lp.ln1_g), g.param(lp.ln1_b));
        let h1 = g.layer_norm(res, g1, b1);
        let ff = lin(g, h1, lp.w1, lp.b1);
        let ff = g.gelu(ff);
        let ff = lin(g, ff, lp.w2, lp.b2);
        let ff = dropout(g, ff, config.dropout, &mut dropout_rng);
        let res = g.add(h1, ff);
        let (g2, b2) = (g.param(lp.ln2_g), g.param(lp.ln2_b));
        h = g.layer_norm(res, g2, b2);
        acts.push(h);
    }
    Ok(acts)
}

/// MLM logits at `positions` of the top activation: `H Eᵀ + b` with the
/// output projection tied to the piece embeddings.
pub fn mlm_logits(g: &mut Graph, p: &EncoderParams, top: Var, positions: &[usize]) -> Result<Var> {
    let h = g.gather_rows(top, positions)?;
    let emb = g.param(p.piece);
    let logits = g.matmul_t(h, emb);
    let b = g.param(p.head_bias);
    Ok(g.add_row(logits, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::softmax_rows;
    use ndarray::array;

    fn tiny(seed: u64) -> Encoder {
        let cfg = EncoderConfig {
            n_layers: 1,
            hidden: 4,
            n_heads: 2,
            ff_dim: 6,
            vocab_size: 12,
            max_positions: 8,
            dropout: 0.0,
        };
        Encoder::new(cfg, "h", seed).unwrap()
    }

    fn ln_rows(x: &Mat) -> Mat {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let m = row.sum() / row.len() as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / row.len() as f64;
            row.mapv_inplace(|v| (v - m) / (var + 1e-12).sqrt());
        }
        out
    }

    #[test]
    fn one_layer_matches_hand_arithmetic() {
        // d = 2, one head, unit layer-norm gains, zero biases.
        let cfg = EncoderConfig {
            n_layers: 1,
            hidden: 2,
            n_heads: 1,
            ff_dim: 2,
            vocab_size: 3,
            max_positions: 2,
            dropout: 0.0,
        };
        let mut enc = Encoder::new(cfg, "h", 0).unwrap();
        let p = enc.params.clone();
        let l = &p.layers[0];
        enc.store.get_mut(p.piece).assign(&array![[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]]);
        enc.store.get_mut(p.position).assign(&array![[0.5, 0.0], [0.0, 0.0]]);
        let ident = array![[1.0, 0.0], [0.0, 1.0]];
        for id in [l.wq, l.wk, l.wv, l.wo, l.w1, l.w2] {
            enc.store.get_mut(id).assign(&ident);
        }
        let acts = enc.activations(&[1, 2]).unwrap();

        // Oracle: every step spelled out with plain matrices.
        let x0 = ln_rows(&array![[1.5, 0.0], [0.0, 2.0]]);
        assert!((&acts[0] - &x0).iter().all(|v| v.abs() < 1e-12));
        let scores = x0.dot(&x0.t()) / 2f64.sqrt();
        let ctx = softmax_rows(scores.view()).dot(&x0);
        let h1 = ln_rows(&(&x0 + &ctx));
        let c = (2.0 / std::f64::consts::PI).sqrt();
        let ff = h1.mapv(|x| 0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh()));
        let h2 = ln_rows(&(&h1 + &ff));
        assert!((&acts[1] - &h2).iter().all(|v| v.abs() < 1e-12), "{:?} vs {h2:?}", acts[1]);
    }

    #[test]
    fn zero_weights_give_uniform_predictions() {
        let mut enc = tiny(1);
        for id in enc.params.all() {
            enc.store.get_mut(id).fill(0.0);
        }
        let mut g = Graph::new(&enc.store);
        let acts = encode(&mut g, &enc.config, &enc.params, &[1, 5, 2], None, None).unwrap();
        let logits = mlm_logits(&mut g, &enc.params, *acts.last().unwrap(), &[1]).unwrap();
        assert!(g.value(logits).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlm_gradients_match_finite_differences() {
        let enc = tiny(3);
        let p = enc.params.clone();
        let cfg = enc.config.clone();
        let loss = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let acts = encode(&mut g, &cfg, &p, &[1, 7, 3, 9, 2], None, None).unwrap();
            let logits = mlm_logits(&mut g, &p, acts[1], &[1, 3]).unwrap();
            let l = g.cross_entropy(logits, &[4, 11]).unwrap();
            (g.scalar(l), g.backward(l))
        };
        let err = crate::autograd::testing::max_rel_error(&enc.store, loss, 1e-5);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn padding_is_not_attended() {
        let enc = tiny(4);
        let mut g = Graph::new(&enc.store);
        let a = encode(&mut g, &enc.config, &enc.params, &[1, 5, 2], None, None).unwrap();
        let a = g.value(a[1]).clone();
        let mut g = Graph::new(&enc.store);
        let b = encode(&mut g, &enc.config, &enc.params, &[1, 5, 2, 0, 0], Some(&[1, 1, 1, 0, 0]), None)
            .unwrap();
        let b = g.value(b[1]).slice(ndarray::s![0..3, ..]).to_owned();
        assert!((&a - &b).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn bad_ids_are_rejected() {
        let enc = tiny(0);
        assert!(enc.activations(&[1, 12]).is_err());
        assert!(enc.activations(&[1; 9]).is_err());
    }

    #[test]
    fn new_embeddings_touch_only_their_rows() {
        let mut enc = tiny(5);
        let before = enc.store.get(enc.params.piece).clone();
        enc.initialize_new_embeddings(&[3, 7], 11).unwrap();
        let after = enc.store.get(enc.params.piece).clone();
        for r in 0..12 {
            let same = before.row(r) == after.row(r);
            assert_eq!(same, r != 3 && r != 7, "row {r}");
        }
        assert!(after.iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        let mut again = tiny(5);
        again.initialize_new_embeddings(&[3, 7], 11).unwrap();
        assert!(again.store.bit_eq(&enc.store));
        assert_eq!(enc.new_slot_ids, vec![3, 7]);
        assert!(enc.initialize_new_embeddings(&[12], 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut enc = tiny(6);
        enc.new_slot_ids = vec![2];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        enc.save(&path).unwrap();
        let back = Encoder::load(&path).unwrap();
        assert_eq!(back, enc);
        std::fs::write(&path, b"garbage!").unwrap();
        assert!(Encoder::load(&path).is_err());
    }
}

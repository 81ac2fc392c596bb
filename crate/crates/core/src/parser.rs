//! Biaffine dependency parser over mixed encoder layers.
//!
//! Frozen mode: encoder activations are cached constants, mixed, passed
//! through a BiLSTM, then projected. Finetuning mode: the encoder runs
//! inside the graph and the mix feeds the projections directly. Encoder
//! tensors always live in the parser's store so a checkpoint is
//! self-contained.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Mat, ParamId, ParamStore, Var};
use crate::decode::decode_tree;
use crate::encoder::{dropout, read_store, truncated_normal, write_store, Encoder, EncoderConfig, EncoderParams};
use crate::mix::{embed_sentence, frame_sentence, frozen_activations, EncoderInput, RepresentationMode, ScalarMix};
use crate::optim::{Adam, AdamConfig, ParamGroup};
use crate::par::{self, Parallelism};
use crate::rng::{self, Rng};
use crate::schedule::{inverse_sqrt, unfreezing_plan};
use crate::treebank::{score, ScoreReport, TreebankSentence};
use crate::wordpiece::{Span, Vocabulary};
use crate::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 8] = b"LAPTPRS\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParserConfig {
    pub arc_dim: usize,
    pub label_dim: usize,
    pub bilstm_layers: usize,
    /// Hidden size of each direction.
    pub bilstm_hidden: usize,
    pub input_dropout: f64,
    pub parser_dropout: f64,
    pub layer_dropout: f64,
    pub parser_lr: f64,
    pub encoder_lr: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub mode: RepresentationMode,
    /// Per-layer decay of the encoder learning rate, top layer first.
    pub unfreeze_decay: f64,
}

impl Default for ParserConfig {
    fn default() -> Self {
        ParserConfig {
            arc_dim: 100,
            label_dim: 100,
            bilstm_layers: 3,
            bilstm_hidden: 400,
            input_dropout: 0.3,
            parser_dropout: 0.3,
            layer_dropout: 0.1,
            parser_lr: 1e-3,
            encoder_lr: 5e-5,
            warmup_epochs: 1,
            max_epochs: 200,
            patience: 20,
            batch_size: 8,
            mode: RepresentationMode::Frozen,
            unfreeze_decay: 0.9,
        }
    }
}

impl ParserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arc_dim == 0 || self.label_dim == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("parser dimensions, batch size and epochs must be positive"));
        }
        if self.mode == RepresentationMode::Frozen && (self.bilstm_layers == 0 || self.bilstm_hidden == 0) {
            return Err(Error::invalid("frozen mode needs a BiLSTM"));
        }
        for p in [self.input_dropout, self.parser_dropout, self.layer_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid("dropout probabilities must be in [0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    /// `in × 4h`, gate order input, forget, cell, output.
    pub w: ParamId,
    /// `h × 4h`.
    pub u: ParamId,
    /// `1 × 4h`.
    pub b: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParserParams {
    pub mix: ScalarMix,
    /// Forward and backward direction per layer; empty in finetuning mode.
    pub lstm: Vec<(LstmParams, LstmParams)>,
    pub root: ParamId,
    pub arc_head: Mlp,
    pub arc_dep: Mlp,
    pub lab_head: Mlp,
    pub lab_dep: Mlp,
    /// `a × a` bilinear arc weights.
    pub arc_u: ParamId,
    /// `1 × a` head-only arc term.
    pub arc_bias: ParamId,
    /// `l × (R·l)`: the R bilinear label matrices side by side.
    pub lab_u: ParamId,
    /// `2l × R` linear label weights on `[dep; head]`.
    pub lab_v: ParamId,
    /// `1 × R`.
    pub lab_b: ParamId,
}

fn glorot(r: &mut Rng, rows: usize, cols: usize) -> Mat {
    truncated_normal(r, rows, cols, (2.0 / (rows + cols) as f64).sqrt())
}

impl ParserParams {
    /// Register parser tensors for inputs of width `input_dim` (the
    /// encoder hidden size) and `n_labels` relations.
    pub fn add_to(
        store: &mut ParamStore,
        config: &ParserConfig,
        n_encoder_layers: usize,
        input_dim: usize,
        n_labels: usize,
        seed: u64,
    ) -> Self {
        let mut r = rng::rng(seed);
        let mix = ScalarMix::add_to(store, n_encoder_layers, config.layer_dropout);
        let mut lstm = Vec::new();
        let mut width = input_dim;
        if config.mode == RepresentationMode::Frozen {
            let h = config.bilstm_hidden;
            for l in 0..config.bilstm_layers {
                let mut dir = |name: &str, r: &mut Rng| {
                    let mut b = Mat::zeros((1, 4 * h));
                    b.slice_mut(ndarray::s![.., h..2 * h]).fill(1.0);
                    LstmParams {
                        w: store.add(format!("lstm{l}.{name}.w"), glorot(r, width, 4 * h)),
                        u: store.add(format!("lstm{l}.{name}.u"), glorot(r, h, 4 * h)),
                        b: store.add(format!("lstm{l}.{name}.b"), b),
                    }
                };
                let f = dir("fwd", &mut r);
                let bw = dir("bwd", &mut r);
                lstm.push((f, bw));
                width = 2 * h;
            }
        }
        let root = store.add("root", truncated_normal(&mut r, 1, width, 1.0 / (width as f64).sqrt()));
        let mut mlp = |name: &str, out: usize, r: &mut Rng| Mlp {
            w: store.add(format!("{name}.w"), glorot(r, width, out)),
            b: store.add(format!("{name}.b"), Mat::zeros((1, out))),
        };
        let (a, l) = (config.arc_dim, config.label_dim);
        let arc_head = mlp("arc_head", a, &mut r);
        let arc_dep = mlp("arc_dep", a, &mut r);
        let lab_head = mlp("lab_head", l, &mut r);
        let lab_dep = mlp("lab_dep", l, &mut r);
        ParserParams {
            mix,
            lstm,
            root,
            arc_head,
            arc_dep,
            lab_head,
            lab_dep,
            arc_u: store.add("arc.u", Mat::zeros((a, a))),
            arc_bias: store.add("arc.bias", Mat::zeros((1, a))),
            lab_u: store.add("lab.u", Mat::zeros((l, n_labels * l))),
            lab_v: store.add("lab.v", Mat::zeros((2 * l, n_labels))),
            lab_b: store.add("lab.b", Mat::zeros((1, n_labels))),
        }
    }
}

fn lstm_direction(g: &mut Graph, x: Var, p: &LstmParams, reverse: bool) -> Var {
    let n = g.shape(x).0;
    let w = g.param(p.w);
    let u = g.param(p.u);
    let b = g.param(p.b);
    let h = g.shape(u).0;
    let xw = g.matmul(x, w);
    let xw = g.add_row(xw, b);
    let mut hp = g.constant(Mat::zeros((1, h)));
    let mut cp = g.constant(Mat::zeros((1, h)));
    let mut outs = vec![hp; n];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let xt = g.slice_rows(xw, t, t + 1);
        let rec = g.matmul(hp, u);
        let z = g.add(xt, rec);
        let zi = g.slice_cols(z, 0, h);
        let zf = g.slice_cols(z, h, 2 * h);
        let zg = g.slice_cols(z, 2 * h, 3 * h);
        let zo = g.slice_cols(z, 3 * h, 4 * h);
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let c_in = g.tanh(zg);
        let o = g.sigmoid(zo);
        let keep = g.mul(f, cp);
        let write = g.mul(i, c_in);
        cp = g.add(keep, write);
        let tc = g.tanh(cp);
        hp = g.mul(o, tc);
        outs[t] = hp;
    }
    g.concat_rows(&outs)
}

/// Stacked bidirectional LSTM; the directions are concatenated per layer.
/// Input dropout applies to `x` when a dropout rng is given.
pub fn bilstm_encode(
    g: &mut Graph,
    layers: &[(LstmParams, LstmParams)],
    x: Var,
    input_dropout: f64,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<Var> {
    if g.shape(x).0 == 0 {
        return Err(Error::invalid("empty sentence"));
    }
    let mut h = dropout(g, x, input_dropout, &mut dropout_rng);
    for (f, b) in layers {
        let hf = lstm_direction(g, h, f, false);
        let hb = lstm_direction(g, h, b, true);
        h = g.concat_cols(&[hf, hb]);
    }
    Ok(h)
}

fn mlp(g: &mut Graph, x: Var, p: &Mlp) -> Var {
    let w = g.param(p.w);
    let b = g.param(p.b);
    let y = g.matmul(x, w);
    let y = g.add_row(y, b);
    g.tanh(y)
}

/// The four projections of `[root; words]`: arc and label views in head
/// role (`(n+1)` rows) and dependent role (`n` rows).
pub struct Projections {
    pub arc_head: Var,
    pub arc_dep: Var,
    pub lab_head: Var,
    pub lab_dep: Var,
}

pub fn project_heads_deps(
    g: &mut Graph,
    p: &ParserParams,
    words: Var,
    parser_dropout: f64,
    mut dropout_rng: Option<&mut Rng>,
) -> Projections {
    let n = g.shape(words).0;
    let root = g.param(p.root);
    let with_root = g.concat_rows(&[root, words]);
    let mut go = |g: &mut Graph, m: &Mlp| {
        let y = mlp(g, with_root, m);
        dropout(g, y, parser_dropout, &mut dropout_rng)
    };
    let arc_head = go(g, &p.arc_head);
    let arc_all = go(g, &p.arc_dep);
    let lab_head = go(g, &p.lab_head);
    let lab_all = go(g, &p.lab_dep);
    Projections {
        arc_head,
        arc_dep: g.slice_rows(arc_all, 1, n + 1),
        lab_head,
        lab_dep: g.slice_rows(lab_all, 1, n + 1),
    }
}

/// `S = D U Hᵀ + 1 (H u)ᵀ`, shape `n × (n+1)`.
pub fn biaffine_arc_scores(g: &mut Graph, p: &ParserParams, dep: Var, head: Var) -> Var {
    let u = g.param(p.arc_u);
    let du = g.matmul(dep, u);
    let s = g.matmul_t(du, head);
    let ub = g.param(p.arc_bias);
    let bias = g.matmul_t(ub, head);
    g.add_row(s, bias)
}

/// Label logits for each dependent at the given heads, shape `n × R`:
/// `dᵀ U_r h + v_rᵀ [d; h] + b_r`.
pub fn biaffine_label_scores(g: &mut Graph, p: &ParserParams, dep: Var, head: Var, heads: &[usize]) -> Result<Var> {
    let r = g.store().get(p.lab_b).ncols();
    let hsel = g.gather_rows(head, heads)?;
    let u = g.param(p.lab_u);
    let du = g.matmul(dep, u);
    let bil = g.grouped_row_dot(du, hsel, r);
    let both = g.concat_cols(&[dep, hsel]);
    let v = g.param(p.lab_v);
    let lin = g.matmul(both, v);
    let s = g.add(bil, lin);
    let b = g.param(p.lab_b);
    Ok(g.add_row(s, b))
}

/// Mean head cross-entropy plus mean label cross-entropy at gold arcs.
pub fn parser_loss(g: &mut Graph, arc_scores: Var, label_scores: Var, heads: &[usize], labels: &[usize]) -> Result<Var> {
    let a = g.cross_entropy(arc_scores, heads)?;
    let l = g.cross_entropy(label_scores, labels)?;
    Ok(g.add(a, l))
}

/// A sentence ready for the network.
#[derive(Debug, Clone)]
pub struct PreparedSentence {
    pub ids: Vec<usize>,
    pub spans: Vec<Span>,
    /// Gold heads and label ids; empty when unknown.
    pub heads: Vec<usize>,
    pub labels: Vec<usize>,
    /// Encoder activations, for frozen mode.
    pub cache: Option<Vec<Mat>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EncoderSlot {
    config: EncoderConfig,
    params: EncoderParams,
    new_slot_ids: Vec<usize>,
    vocab_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parser {
    pub config: ParserConfig,
    pub store: ParamStore,
    pub params: ParserParams,
    pub labels: Vec<String>,
    pub vocab: Vocabulary,
    encoder: EncoderSlot,
}

#[derive(Serialize, Deserialize)]
struct ParserHeader {
    config: ParserConfig,
    params: ParserParams,
    labels: Vec<String>,
    vocab_pieces: Vec<String>,
    encoder: EncoderSlot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub adam: AdamConfig,
    pub clip_norm: f64,
    /// Shuffling of training sentences.
    pub data_seed: u64,
    /// Dropout masks.
    pub dropout_seed: u64,
    /// Parser weight initialisation.
    pub init_seed: u64,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            data_seed: 0,
            dropout_seed: 0,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid: ScoreReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParserTrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl ParserTrainLog {
    pub fn best(&self) -> Option<&EpochLog> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

impl Parser {
    /// Fresh parser on top of `encoder`, with relation labels taken from
    /// the training treebank (sorted).
    pub fn new(
        encoder: &Encoder,
        vocab: &Vocabulary,
        labels: Vec<String>,
        config: ParserConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if labels.is_empty() {
            return Err(Error::invalid("no relation labels"));
        }
        if vocab.len() != encoder.config.vocab_size {
            return Err(Error::invalid(format!(
                "vocabulary of {} pieces for an encoder of {}",
                vocab.len(),
                encoder.config.vocab_size
            )));
        }
        let mut store = ParamStore::new();
        let params = ParserParams::add_to(
            &mut store,
            &config,
            encoder.config.n_layers,
            encoder.config.hidden,
            labels.len(),
            seed,
        );
        let map = store.extend_prefixed("enc.", &encoder.store);
        let enc_params = encoder.params.remap(&map);
        Ok(Parser {
            config,
            store,
            params,
            labels,
            vocab: vocab.clone(),
            encoder: EncoderSlot {
                config: encoder.config.clone(),
                params: enc_params,
                new_slot_ids: encoder.new_slot_ids.clone(),
                vocab_hash: encoder.vocab_hash.clone(),
            },
        })
    }

    pub fn encoder_params(&self) -> &EncoderParams {
        &self.encoder.params
    }

    /// Copy the (possibly finetuned) encoder back out.
    pub fn encoder(&self) -> Encoder {
        let ids = self.encoder.params.all();
        let mut store = ParamStore::new();
        let mut map = BTreeMap::new();
        for id in &ids {
            let name = self.store.name(*id).trim_start_matches("enc.").to_string();
            map.insert(*id, store.add(name, self.store.get(*id).clone()));
        }
        let table: Vec<ParamId> = (0..self.store.len())
            .map(|i| map.get(&ParamId(i)).copied().unwrap_or(ParamId(usize::MAX)))
            .collect();
        Encoder {
            config: self.encoder.config.clone(),
            store,
            params: self.encoder.params.remap(&table),
            new_slot_ids: self.encoder.new_slot_ids.clone(),
            vocab_hash: self.encoder.vocab_hash.clone(),
        }
    }

    fn encoder_ids(&self) -> HashSet<ParamId> {
        self.encoder.params.all().into_iter().collect()
    }

    pub fn parser_ids(&self) -> Vec<ParamId> {
        let enc = self.encoder_ids();
        self.store.ids().filter(|id| !enc.contains(id)).collect()
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    /// Tokenize and (frozen mode) cache encoder activations.
    pub fn prepare(&self, sentences: &[TreebankSentence], with_gold: bool, mode: Parallelism) -> Result<Vec<PreparedSentence>> {
        par::try_map(mode, sentences, |i, s| {
            let tokens = s.tokens();
            let (ids, spans) = frame_sentence(&tokens, &self.vocab, self.encoder.config.max_positions)
                .map_err(|e| Error::invalid(format!("sentence {i}: {e}")))?;
            let (heads, labels) = if with_gold {
                let labels = s
                    .labels()
                    .iter()
                    .map(|l| {
                        self.label_id(l)
                            .ok_or_else(|| Error::invalid(format!("sentence {i}: unknown relation {l:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                (s.heads(), labels)
            } else {
                (Vec::new(), Vec::new())
            };
            let cache = match self.config.mode {
                RepresentationMode::Frozen => Some(frozen_activations(
                    &self.store,
                    &self.encoder.config,
                    &self.encoder.params,
                    &ids,
                )?),
                RepresentationMode::Ft => None,
            };
            Ok(PreparedSentence {
                ids,
                spans,
                heads,
                labels,
                cache,
            })
        })
    }

    /// Word vectors through mix (and BiLSTM in frozen mode), then the four
    /// projections.
    fn project(&self, g: &mut Graph, sent: &PreparedSentence, mut dropout_rng: Option<&mut Rng>) -> Result<Projections> {
        let input = match &sent.cache {
            Some(acts) => EncoderInput::Cached(acts),
            None => EncoderInput::Live {
                config: &self.encoder.config,
                params: &self.encoder.params,
                ids: &sent.ids,
            },
        };
        let words = embed_sentence(g, input, &sent.spans, &self.params.mix, dropout_rng.as_deref_mut())?;
        let words = match self.config.mode {
            RepresentationMode::Frozen => bilstm_encode(
                g,
                &self.params.lstm,
                words,
                self.config.input_dropout,
                dropout_rng.as_deref_mut(),
            )?,
            RepresentationMode::Ft => {
                let mut r = dropout_rng.as_deref_mut();
                dropout(g, words, self.config.input_dropout, &mut r)
            }
        };
        Ok(project_heads_deps(g, &self.params, words, self.config.parser_dropout, dropout_rng))
    }

    /// Loss and gradients for one sentence with gold annotation.
    pub fn sentence_gradients(
        &self,
        sent: &PreparedSentence,
        frozen: &(dyn Fn(ParamId) -> bool + Sync),
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Gradients)> {
        let mut g = Graph::with_frozen(&self.store, frozen);
        let mut r = dropout_seed.map(rng::rng);
        let p = self.project(&mut g, sent, r.as_mut())?;
        let arcs = biaffine_arc_scores(&mut g, &self.params, p.arc_dep, p.arc_head);
        let labs = biaffine_label_scores(&mut g, &self.params, p.lab_dep, p.lab_head, &sent.heads)?;
        let loss = parser_loss(&mut g, arcs, labs, &sent.heads, &sent.labels)?;
        Ok((g.scalar(loss), g.backward(loss)))
    }

    /// Decoded heads and label ids for one prepared sentence.
    pub fn parse_prepared(&self, sent: &PreparedSentence) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut g = Graph::new(&self.store);
        let p = self.project(&mut g, sent, None)?;
        let arcs = biaffine_arc_scores(&mut g, &self.params, p.arc_dep, p.arc_head);
        let scores = g.value(arcs).clone();
        let tree = decode_tree(scores.view(), |heads| {
            let l = biaffine_label_scores(&mut g, &self.params, p.lab_dep, p.lab_head, heads)?;
            Ok(g.value(l).clone())
        })?;
        Ok((tree.heads, tree.labels))
    }

    fn predict_prepared(
        &self,
        originals: &[TreebankSentence],
        prepared: &[PreparedSentence],
        mode: Parallelism,
    ) -> Result<Vec<TreebankSentence>> {
        par::try_map(mode, prepared, |i, s| {
            let (heads, labels) = self.parse_prepared(s)?;
            let names: Vec<&str> = labels.iter().map(|&l| self.labels[l].as_str()).collect();
            originals[i].with_prediction(&heads, &names)
        })
    }

    /// Parse sentences, returning copies with predicted HEAD and DEPREL.
    pub fn predict(&self, sentences: &[TreebankSentence], mode: Parallelism) -> Result<Vec<TreebankSentence>> {
        let prepared = self.prepare(sentences, false, mode)?;
        self.predict_prepared(sentences, &prepared, mode)
    }

    pub fn evaluate(&self, gold: &[TreebankSentence], mode: Parallelism) -> Result<ScoreReport> {
        let pred = self.predict(gold, mode)?;
        score(&pred, gold, mode)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ParserHeader {
            config: self.config.clone(),
            params: self.params.clone(),
            labels: self.labels.clone(),
            vocab_pieces: self.vocab.pieces().to_vec(),
            encoder: self.encoder.clone(),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        write_store(&mut BufWriter::new(file), CHECKPOINT_MAGIC, &header, &self.store).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let (h, store): (ParserHeader, _) = read_store(&mut BufReader::new(file), CHECKPOINT_MAGIC, path)?;
        let vocab = Vocabulary::from_pieces(h.vocab_pieces)?;
        if vocab.content_hash() != h.encoder.vocab_hash {
            return Err(Error::invalid("checkpoint vocabulary does not match its encoder"));
        }
        Ok(Parser {
            config: h.config,
            store,
            params: h.params,
            labels: h.labels,
            vocab,
            encoder: h.encoder,
        })
    }
}

/// Sorted distinct relation labels of a treebank.
pub fn label_inventory(sentences: &[TreebankSentence]) -> Vec<String> {
    let mut set: Vec<String> = sentences
        .iter()
        .flat_map(|s| s.labels().into_iter().map(String::from))
        .collect();
    set.sort();
    set.dedup();
    set
}

/// Train on `train`, select by validation LAS with early stopping, and
/// return the parser from the best epoch.
pub fn train_parser(
    encoder: &Encoder,
    vocab: &Vocabulary,
    train: &[TreebankSentence],
    valid: &[TreebankSentence],
    config: &ParserConfig,
    run: &TrainRun,
    mode: Parallelism,
) -> Result<(Parser, ParserTrainLog)> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::invalid("parser training needs non-empty train and validation sets"));
    }
    let labels = label_inventory(train);
    let mut parser = Parser::new(encoder, vocab, labels, config.clone(), run.init_seed)?;
    let train_prep = parser.prepare(train, true, mode)?;
    let valid_prep = parser.prepare(valid, false, mode)?;
    let n_layers = encoder.config.n_layers;
    let enc_ids = parser.encoder_ids();
    let parser_ids = parser.parser_ids();
    let finetune = config.mode == RepresentationMode::Ft;

    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let warmup = (config.warmup_epochs * steps_per_epoch).max(1);
    let mut adam = Adam::new(run.adam);
    let mut t = 0usize;
    let mut log = ParserTrainLog::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        let plan = unfreezing_plan(epoch, n_layers, finetune, config.unfreeze_decay);
        let mut groups = vec![ParamGroup::new("parser", config.parser_lr).with_all(parser_ids.iter().copied())];
        let mut trainable: HashSet<ParamId> = parser_ids.iter().copied().collect();
        for (&layer, &mult) in &plan.multipliers {
            let ids = parser.encoder.params.block(layer);
            trainable.extend(ids.iter().copied());
            groups.push(ParamGroup::new(format!("encoder{layer}"), config.encoder_lr * mult).with_all(ids));
        }
        let frozen = |id: ParamId| enc_ids.contains(&id) && !trainable.contains(&id);

        order.shuffle(&mut rng::rng(rng::derive(run.data_seed, epoch as u64)));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            t += 1;
            let step_seed = rng::derive(run.dropout_seed, t as u64);
            let parts = par::try_map(mode, chunk, |k, &i| {
                parser.sentence_gradients(&train_prep[i], &frozen, Some(rng::derive(step_seed, k as u64)))
            })?;
            let mut grads = Gradients::zeros_like(&parser.store);
            let mut loss = 0.0;
            for (l, g) in parts {
                loss += l;
                grads.add_assign(&g);
            }
            let inv = 1.0 / chunk.len() as f64;
            grads.scale(inv);
            loss *= inv;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    step: t,
                    detail: format!("parser loss {loss} in epoch {epoch}"),
                });
            }
            grads.clip_global_norm(run.clip_norm);
            let factor = inverse_sqrt(t, warmup, 1.0)?;
            adam.step(&mut parser.store, &grads, &groups, factor);
            epoch_loss += loss * chunk.len() as f64;
        }
        // Cached frozen activations stay valid: the encoder does not move.
        let pred = parser.predict_prepared(valid, &valid_prep, mode)?;
        let report = score(&pred, valid, mode)?;
        log::debug!("epoch {epoch} loss {:.4} valid LAS {:.2}", epoch_loss / train.len() as f64, report.las);
        log.epochs.push(EpochLog {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            valid: report,
        });
        if best.as_ref().is_none_or(|(las, _)| report.las > *las) {
            best = Some((report.las, parser.store.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    if let Some((_, store)) = best {
        parser.store = store;
    }
    Ok((parser, log))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testing::max_rel_error;
    use crate::corpus::SentenceRecord;
    use crate::wordpiece::train_vocabulary;
    use ndarray::array;

    fn tiny_config(mode: RepresentationMode) -> ParserConfig {
        ParserConfig {
            arc_dim: 3,
            label_dim: 3,
            bilstm_layers: 2,
            bilstm_hidden: 3,
            input_dropout: 0.0,
            parser_dropout: 0.0,
            layer_dropout: 0.0,
            mode,
            ..Default::default()
        }
    }

    fn toy_world() -> (Vocabulary, Encoder) {
        let corpus = vec![SentenceRecord::new(
            vec!["ab".into(), "ba".into(), "c".into()],
            "d",
            0,
        )];
        let vocab = train_vocabulary(&corpus, 110).unwrap();
        let cfg = EncoderConfig {
            n_layers: 1,
            hidden: 4,
            n_heads: 2,
            ff_dim: 4,
            vocab_size: vocab.len(),
            max_positions: 16,
            dropout: 0.0,
        };
        let enc = Encoder::new(cfg, vocab.content_hash(), 5).unwrap();
        (vocab, enc)
    }

    fn bare_params(arc: usize, lab: usize, n_labels: usize) -> (ParamStore, ParserParams) {
        let mut store = ParamStore::new();
        let cfg = ParserConfig {
            arc_dim: arc,
            label_dim: lab,
            mode: RepresentationMode::Ft,
            ..Default::default()
        };
        let p = ParserParams::add_to(&mut store, &cfg, 1, 2, n_labels, 0);
        (store, p)
    }

    #[test]
    fn scalar_arc_score() {
        let (mut store, p) = bare_params(1, 1, 1);
        store.get_mut(p.arc_u)[[0, 0]] = 2.0;
        store.get_mut(p.arc_bias)[[0, 0]] = 3.0;
        let mut g = Graph::new(&store);
        let dep = g.constant(array![[1.0]]);
        let head = g.constant(array![[2.0]]);
        let s = biaffine_arc_scores(&mut g, &p, dep, head);
        assert_eq!(g.value(s)[[0, 0]], 10.0);
    }

    #[test]
    fn label_scores_by_hand() {
        let (mut store, p) = bare_params(1, 1, 2);
        *store.get_mut(p.lab_u) = array![[1.5, -1.0]];
        *store.get_mut(p.lab_v) = array![[0.5, 2.0], [1.0, 0.0]];
        *store.get_mut(p.lab_b) = array![[0.25, -0.5]];
        let mut g = Graph::new(&store);
        let dep = g.constant(array![[2.0]]);
        let head = g.constant(array![[7.0], [3.0]]);
        let s = biaffine_label_scores(&mut g, &p, dep, head, &[1]).unwrap();
        // r=0: 2·1.5·3 + 0.5·2 + 1·3 + 0.25; r=1: 2·(−1)·3 + 2·2 + 0 − 0.5
        assert_eq!(g.value(s).row(0).to_vec(), vec![13.25, -2.5]);
    }

    #[test]
    fn uniform_scores_give_log_loss() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let n = 4;
        let arcs = g.constant(Mat::zeros((n, n + 1)));
        let labs = g.constant(Mat::zeros((n, 3)));
        let l = parser_loss(&mut g, arcs, labs, &[2, 0, 2, 3], &[0, 1, 2, 0]).unwrap();
        assert!((g.scalar(l) - (5f64.ln() + 3f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn zero_projection_weights_give_constant_rows() {
        let (mut store, p) = bare_params(3, 3, 2);
        for m in [&p.arc_head, &p.arc_dep, &p.lab_head, &p.lab_dep] {
            store.get_mut(m.w).fill(0.0);
            store.get_mut(m.b).fill(0.4);
        }
        let mut g = Graph::new(&store);
        let words = g.constant(array![[1.0, -2.0], [0.5, 3.0]]);
        let pr = project_heads_deps(&mut g, &p, words, 0.0, None);
        assert_eq!(g.shape(pr.arc_head), (3, 3));
        assert_eq!(g.shape(pr.arc_dep), (2, 3));
        assert!(g.value(pr.lab_dep).iter().all(|&v| (v - 0.4f64.tanh()).abs() < 1e-15));
    }

    #[test]
    fn bilstm_directions_mirror() {
        let mut store = ParamStore::new();
        let cfg = ParserConfig {
            bilstm_layers: 1,
            bilstm_hidden: 3,
            ..tiny_config(RepresentationMode::Frozen)
        };
        let p = ParserParams::add_to(&mut store, &cfg, 1, 2, 2, 9);
        let (f, b) = p.lstm[0].clone();
        for (src, dst) in [(f.w, b.w), (f.u, b.u), (f.b, b.b)] {
            let v = store.get(src).clone();
            *store.get_mut(dst) = v;
        }
        let x = array![[0.3, -1.0], [1.2, 0.4], [-0.7, 0.9], [0.0, 0.5]];
        let rev = x.slice(ndarray::s![..;-1, ..]).to_owned();
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let rv = g.constant(rev);
        let out = bilstm_encode(&mut g, &p.lstm, xv, 0.0, None).unwrap();
        let out_r = bilstm_encode(&mut g, &p.lstm, rv, 0.0, None).unwrap();
        let (a, b) = (g.value(out), g.value(out_r));
        assert_eq!(a.ncols(), 6);
        for t in 0..4 {
            for k in 0..3 {
                assert!((a[[t, k]] - b[[3 - t, 3 + k]]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_lstm_gives_zero_output() {
        let mut store = ParamStore::new();
        let p = ParserParams::add_to(&mut store, &tiny_config(RepresentationMode::Frozen), 1, 2, 2, 1);
        for (f, b) in &p.lstm {
            for id in [f.w, f.u, f.b, b.w, b.u, b.b] {
                store.get_mut(id).fill(0.0);
            }
        }
        let mut g = Graph::new(&store);
        let x = g.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let out = bilstm_encode(&mut g, &p.lstm, x, 0.0, None).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    fn toy_sentence(n: usize) -> TreebankSentence {
        let toks: Vec<String> = ["ab", "ba", "c", "abc"][..n].iter().map(|s| s.to_string()).collect();
        let heads = [2, 0, 2, 3][..n].to_vec();
        let heads: Vec<usize> = if n == 1 { vec![0] } else { heads.iter().map(|&h| h.min(n)).collect() };
        let labels: Vec<String> = ["x", "root", "y", "x"][..n].iter().map(|s| s.to_string()).collect();
        TreebankSentence::new(&toks, &heads, &labels).unwrap()
    }

    #[test]
    fn parser_loss_gradients_match_finite_differences() {
        let (vocab, enc) = toy_world();
        for n in [2, 3, 4] {
            let sent = toy_sentence(n);
            let parser = Parser::new(
                &enc,
                &vocab,
                label_inventory(&[toy_sentence(4)]),
                tiny_config(RepresentationMode::Frozen),
                n as u64,
            )
            .unwrap();
            let mut parser = parser;
            // Nonzero biaffine weights so every path carries gradient.
            for id in [parser.params.arc_u, parser.params.arc_bias, parser.params.lab_u, parser.params.lab_v] {
                let shape = parser.store.get(id).dim();
                *parser.store.get_mut(id) = truncated_normal(&mut rng::rng(id.0 as u64), shape.0, shape.1, 0.5);
            }
            let prep = parser.prepare(&[sent], true, Parallelism::Sequential).unwrap().remove(0);
            let enc_ids = parser.encoder_ids();
            let mut small = ParamStore::new();
            let parser_ids = parser.parser_ids();
            for &id in &parser_ids {
                small.add(parser.store.name(id), parser.store.get(id).clone());
            }
            let base = parser.clone();
            let loss = |s: &ParamStore| {
                let mut p = base.clone();
                for (k, &id) in parser_ids.iter().enumerate() {
                    *p.store.get_mut(id) = s.get(ParamId(k)).clone();
                }
                let frozen = |id: ParamId| enc_ids.contains(&id);
                let (l, g) = p.sentence_gradients(&prep, &frozen, None).unwrap();
                let mut out = Gradients::zeros_like(s);
                for (k, &id) in parser_ids.iter().enumerate() {
                    if let Some(gr) = g.get(id) {
                        out.set(ParamId(k), gr.clone());
                    }
                }
                (l, out)
            };
            let err = max_rel_error(&small, loss, 1e-5);
            assert!(err < 1e-4, "n={n}: relative error {err}");
        }
    }

    #[test]
    fn finetuning_gradients_reach_the_encoder() {
        let (vocab, enc) = toy_world();
        let parser = Parser::new(
            &enc,
            &vocab,
            label_inventory(&[toy_sentence(4)]),
            tiny_config(RepresentationMode::Ft),
            3,
        )
        .unwrap();
        let mut parser = parser;
        let u = parser.params.arc_u;
        parser.store.get_mut(u).fill(0.3);
        let prep = parser.prepare(&[toy_sentence(3)], true, Parallelism::Sequential).unwrap().remove(0);
        assert!(prep.cache.is_none());
        let (_, g) = parser.sentence_gradients(&prep, &|_| false, None).unwrap();
        let top = parser.encoder_params().block(1);
        assert!(top.iter().any(|&id| g.get(id).is_some_and(|m| m.iter().any(|&v| v != 0.0))));
    }

    fn chain_treebank(n: usize, seed: u64) -> Vec<TreebankSentence> {
        use rand::Rng as _;
        let mut r = rng::rng(seed);
        (0..n)
            .map(|_| {
                let len = r.random_range(2..5);
                let toks: Vec<String> = (0..len).map(|i| ["ab", "ba", "c"][i % 3].to_string()).collect();
                let heads: Vec<usize> = (0..len).map(|i| if i + 1 == len { 0 } else { len }).collect();
                let labels: Vec<String> =
                    (0..len).map(|i| if i + 1 == len { "root".into() } else { "dep".into() }).collect();
                TreebankSentence::new(&toks, &heads, &labels).unwrap()
            })
            .collect()
    }

    #[test]
    fn frozen_training_leaves_encoder_untouched_and_learns() {
        let (vocab, enc) = toy_world();
        let cfg = ParserConfig {
            max_epochs: 15,
            patience: 5,
            parser_lr: 1e-2,
            ..tiny_config(RepresentationMode::Frozen)
        };
        let train = chain_treebank(24, 1);
        let valid = chain_treebank(6, 2);
        let (parser, log) = train_parser(&enc, &vocab, &train, &valid, &cfg, &TrainRun::default(), Parallelism::Rayon)
            .unwrap();
        assert!(parser.encoder().store.bit_eq(&enc.store));
        let best = log.best().unwrap();
        assert!(log.epochs.iter().all(|e| e.valid.las <= best.valid.las));
        assert!(best.valid.las > 90.0, "{log:?}");
        // Early stopping: training ends within `patience` epochs of the best.
        let last = log.epochs.last().unwrap().epoch;
        assert!(last == cfg.max_epochs || last - log.best_epoch == cfg.patience);
        let again = parser.evaluate(&valid, Parallelism::Sequential).unwrap();
        assert_eq!(again, best.valid);
    }

    #[test]
    fn finetuning_moves_the_encoder() {
        let (vocab, enc) = toy_world();
        let cfg = ParserConfig {
            max_epochs: 1,
            batch_size: 2,
            ..tiny_config(RepresentationMode::Ft)
        };
        let train = chain_treebank(8, 3);
        let (parser, log) = train_parser(&enc, &vocab, &train, &train, &cfg, &TrainRun::default(), Parallelism::Rayon)
            .unwrap();
        assert_eq!(log.best_epoch, 1);
        let after = parser.encoder();
        assert!(!after.store.bit_eq(&enc.store));
        // Only the top layer is open in the first epoch.
        for id in enc.params.block(0) {
            assert_eq!(after.store.get(id), enc.store.get(id));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (vocab, enc) = toy_world();
        let parser = Parser::new(&enc, &vocab, vec!["a".into(), "b".into()], tiny_config(RepresentationMode::Frozen), 1)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        parser.save(&path).unwrap();
        let back = Parser::load(&path).unwrap();
        assert_eq!(back, parser);
        assert!(Encoder::load(&path).is_err());
    }
}

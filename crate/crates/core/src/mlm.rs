//! Masked-LM instance creation and (continued) pretraining.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph};
use crate::corpus::SentenceRecord;
use crate::encoder::{encode, mlm_logits, Encoder};
use crate::optim::{check_partition, Adam, AdamConfig, ParamGroup, Rows};
use crate::par::{self, Parallelism};
use crate::rng;
use crate::schedule::warmup_linear_decay;
use crate::wordpiece::{tokenize_sentence, Vocabulary};
use crate::{Error, Result};

pub const SHARD_FORMAT: &str = "lapt-mlm-shard";
pub const SHARD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainingInstance {
    pub input_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub masked_positions: Vec<usize>,
    pub masked_labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainMode {
    /// Training a model from scratch.
    Base,
    /// Continued pretraining with the original vocabulary.
    Lapt,
    /// Continued pretraining with an augmented vocabulary.
    Va,
    /// As `Va`, with a larger learning rate on the new embedding rows.
    Tva,
}

impl std::str::FromStr for PretrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(PretrainMode::Base),
            "lapt" => Ok(PretrainMode::Lapt),
            "va" => Ok(PretrainMode::Va),
            "tva" => Ok(PretrainMode::Tva),
            other => Err(Error::invalid(format!("unknown pretraining mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub tiered_lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs_grid: Vec<usize>,
    pub mask_prob: f64,
    pub max_pred: usize,
    pub dup_factor: usize,
    pub max_seq: usize,
    pub clip_norm: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 2e-5,
            tiered_lr: 1e-4,
            warmup_steps: 1000,
            batch_size: 12,
            epochs_grid: vec![1, 5, 10, 15, 20],
            mask_prob: 0.15,
            max_pred: 20,
            dup_factor: 5,
            max_seq: 128,
            clip_norm: 1.0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tiered_lr < self.lr {
            return Err(Error::invalid("tiered learning rate must be at least the base rate"));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::invalid("mask probability must be in [0, 1]"));
        }
        if self.batch_size == 0 || self.dup_factor == 0 || self.max_pred == 0 || self.max_seq < 3 {
            return Err(Error::invalid("batch size, dup factor, max predictions and max_seq must be positive"));
        }
        if self.epochs_grid.is_empty() || self.epochs_grid.contains(&0) {
            return Err(Error::invalid("epoch grid must hold positive epoch counts"));
        }
        Ok(())
    }

    pub fn max_epochs(&self) -> usize {
        self.epochs_grid.iter().copied().max().unwrap_or(0)
    }
}

/// Number of positions to mask in a sequence with `content_len` pieces.
pub fn mask_count(content_len: usize, mask_prob: f64, max_pred: usize) -> usize {
    let rounded = (mask_prob * content_len as f64 + 0.5).floor() as usize;
    rounded.max(1).min(max_pred).min(content_len)
}

/// Mask one framed sequence. `ids` holds `[CLS] content [SEP]`.
fn mask_sequence(
    ids: &[usize],
    vocab_size: usize,
    mask_id: usize,
    config: &PretrainConfig,
    r: &mut rng::Rng,
) -> PretrainingInstance {
    let content: Vec<usize> = (1..ids.len() - 1).collect();
    let k = mask_count(content.len(), config.mask_prob, config.max_pred);
    let mut positions: Vec<usize> = content.choose_multiple(r, k).copied().collect();
    positions.sort_unstable();
    let mut input_ids = ids.to_vec();
    let mut labels = Vec::with_capacity(k);
    for &p in &positions {
        labels.push(ids[p]);
        let u: f64 = r.random();
        if u < 0.8 {
            input_ids[p] = mask_id;
        } else if u < 0.9 {
            input_ids[p] = r.random_range(0..vocab_size);
        }
    }
    PretrainingInstance {
        attention_mask: vec![1; input_ids.len()],
        input_ids,
        masked_positions: positions,
        masked_labels: labels,
    }
}

/// Frame each sentence as `[CLS] pieces [SEP]` (truncated to `max_seq`) and
/// emit `dup_factor` independently masked copies. Sentences without content
/// pieces are skipped. Returns the instances and the number skipped.
pub fn build_instances(
    sentences: &[SentenceRecord],
    vocab: &Vocabulary,
    config: &PretrainConfig,
    seed: u64,
    mode: Parallelism,
) -> Result<(Vec<PretrainingInstance>, usize)> {
    config.validate()?;
    let sp = vocab.special();
    let per_sentence = par::try_map(mode, sentences, |i, s| -> Result<Vec<PretrainingInstance>> {
        let (mut pieces, _) = tokenize_sentence(&s.tokens, vocab)?;
        pieces.truncate(config.max_seq - 2);
        if pieces.is_empty() {
            return Ok(Vec::new());
        }
        let mut ids = Vec::with_capacity(pieces.len() + 2);
        ids.push(sp.cls);
        ids.extend(pieces);
        ids.push(sp.sep);
        let mut r = rng::rng(rng::derive(seed, i as u64));
        Ok((0..config.dup_factor)
            .map(|_| mask_sequence(&ids, vocab.len(), sp.mask, config, &mut r))
            .collect())
    })?;
    let mut skipped = 0;
    let mut out = Vec::new();
    for (s, inst) in sentences.iter().zip(per_sentence) {
        if inst.is_empty() {
            log::warn!("skipping sentence {}#{} with no pieces", s.source_doc, s.index_in_doc);
            skipped += 1;
        }
        out.extend(inst);
    }
    Ok((out, skipped))
}

/// Mean cross-entropy of MLM logits against the original pieces.
pub fn mlm_loss(g: &mut Graph, logits: crate::autograd::Var, labels: &[usize]) -> Result<crate::autograd::Var> {
    if labels.is_empty() {
        return Err(Error::invalid("no masked positions"));
    }
    g.cross_entropy(logits, labels)
}

/// Optimizer groups for a pretraining mode. With `Tva` the embedding rows
/// of the new slots get `tiered_lr`; everything else gets `lr`.
pub fn make_param_groups(encoder: &Encoder, mode: PretrainMode, config: &PretrainConfig) -> Result<Vec<ParamGroup>> {
    let all = encoder.params.all();
    let groups = match mode {
        PretrainMode::Base | PretrainMode::Lapt | PretrainMode::Va => {
            vec![ParamGroup::new("all", config.lr).with_all(all)]
        }
        PretrainMode::Tva => {
            if encoder.new_slot_ids.is_empty() {
                return Err(Error::invalid("tiered training needs new embedding rows"));
            }
            let piece = encoder.params.piece;
            let new = encoder.new_slot_ids.clone();
            vec![
                ParamGroup::new("base", config.lr)
                    .with(piece, Rows::Except(new.clone()))
                    .with_all(all.into_iter().filter(|&id| id != piece)),
                ParamGroup::new("new-embeddings", config.tiered_lr).with(piece, Rows::Only(new)),
            ]
        }
    };
    check_partition(&encoder.store, &groups)?;
    Ok(groups)
}

/// Summed loss, masked-position count and summed gradients over a batch.
/// Each instance gets its own dropout stream, so the result does not
/// depend on how the work is scheduled.
pub fn batch_gradients(
    encoder: &Encoder,
    batch: &[&PretrainingInstance],
    dropout_seed: Option<u64>,
    mode: Parallelism,
) -> Result<(f64, usize, Gradients)> {
    let parts = par::try_map(mode, batch, |i, inst| -> Result<(f64, usize, Gradients)> {
        let mut g = Graph::new(&encoder.store);
        let mut r = dropout_seed.map(|s| rng::rng(rng::derive(s, i as u64)));
        let acts = encode(
            &mut g,
            &encoder.config,
            &encoder.params,
            &inst.input_ids,
            Some(&inst.attention_mask),
            r.as_mut(),
        )?;
        let top = *acts.last().expect("at least one layer");
        let logits = mlm_logits(&mut g, &encoder.params, top, &inst.masked_positions)?;
        let loss = mlm_loss(&mut g, logits, &inst.masked_labels)?;
        let n = inst.masked_labels.len();
        let summed = g.scale(loss, n as f64);
        Ok((g.scalar(summed), n, g.backward(summed)))
    })?;
    let mut total = 0.0;
    let mut count = 0;
    let mut grads = Gradients::zeros_like(&encoder.store);
    for (l, n, g) in parts {
        total += l;
        count += n;
        grads.add_assign(&g);
    }
    Ok((total, count, grads))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean masked-LM loss of every update.
    pub step_losses: Vec<f64>,
    /// Mean loss over each epoch, weighted by masked positions.
    pub epoch_losses: Vec<f64>,
}

/// Adam on the masked-LM loss with linear warmup and decay over the
/// longest epoch count in the grid. `on_checkpoint` is called with the
/// encoder after every grid epoch.
pub fn train_mlm<F>(
    encoder: &mut Encoder,
    instances: &[PretrainingInstance],
    mode: PretrainMode,
    config: &PretrainConfig,
    parallelism: Parallelism,
    mut on_checkpoint: F,
) -> Result<TrainLog>
where
    F: FnMut(usize, &Encoder) -> Result<()>,
{
    config.validate()?;
    if instances.is_empty() {
        return Err(Error::invalid("no pretraining instances"));
    }
    let groups = make_param_groups(encoder, mode, config)?;
    let mut adam = Adam::new(config.adam);
    let epochs = config.max_epochs();
    let per_epoch = instances.len().div_ceil(config.batch_size);
    let total_steps = epochs * per_epoch;
    let mut log = TrainLog::default();
    let mut step = 0;
    let mut order: Vec<usize> = (0..instances.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut rng::rng(rng::derive(config.seed, epoch as u64)));
        let (mut epoch_loss, mut epoch_count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PretrainingInstance> = chunk.iter().map(|&i| &instances[i]).collect();
            let dropout_seed = rng::derive(rng::derive_str(config.seed, "dropout"), step as u64);
            let (loss, n, mut grads) = batch_gradients(encoder, &batch, Some(dropout_seed), parallelism)?;
            let mean = loss / n as f64;
            if !mean.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("masked-LM loss {mean} in epoch {epoch}"),
                });
            }
            grads.scale(1.0 / n as f64);
            if config.clip_norm > 0.0 {
                grads.clip_global_norm(config.clip_norm);
            }
            let factor = warmup_linear_decay(step, config.warmup_steps, total_steps, 1.0);
            adam.step(&mut encoder.store, &grads, &groups, factor);
            log::debug!("step {step} loss {mean:.5}");
            log.step_losses.push(mean);
            epoch_loss += loss;
            epoch_count += n;
            step += 1;
        }
        log.epoch_losses.push(epoch_loss / epoch_count as f64);
        if config.epochs_grid.contains(&epoch) {
            on_checkpoint(epoch, encoder)?;
        }
    }
    Ok(log)
}

#[derive(Debug, Serialize, Deserialize)]
struct ShardHeader {
    format: String,
    version: u32,
    fields: Vec<String>,
    count: usize,
}

/// JSON-lines shard: one header line (format, version, field order,
/// record count), then one instance per line with fields in the order
/// `input_ids, attention_mask, masked_positions, masked_labels`.
pub fn write_shard(path: &Path, instances: &[PretrainingInstance]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = ShardHeader {
        format: SHARD_FORMAT.into(),
        version: SHARD_VERSION,
        fields: ["input_ids", "attention_mask", "masked_positions", "masked_labels"]
            .map(String::from)
            .to_vec(),
        count: instances.len(),
    };
    let io = |e| Error::io(path, e);
    writeln!(out, "{}", serde_json::to_string(&header)?).map_err(io)?;
    for inst in instances {
        writeln!(out, "{}", serde_json::to_string(inst)?).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_shard(path: &Path) -> Result<Vec<PretrainingInstance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let fmt_err = |line: usize, message: String| Error::Format {
        path: path.display().to_string(),
        line,
        message,
    };
    let first = lines
        .next()
        .ok_or_else(|| fmt_err(1, "empty shard".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: ShardHeader =
        serde_json::from_str(&first).map_err(|e| fmt_err(1, format!("bad header: {e}")))?;
    if header.format != SHARD_FORMAT {
        return Err(fmt_err(1, format!("unexpected format {:?}", header.format)));
    }
    if header.version != SHARD_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: SHARD_VERSION,
        });
    }
    let mut out = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: PretrainingInstance =
            serde_json::from_str(&line).map_err(|e| fmt_err(i + 2, e.to_string()))?;
        out.push(inst);
    }
    if out.len() != header.count {
        return Err(fmt_err(0, format!("header promises {} records, found {}", header.count, out.len())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::wordpiece::train_vocabulary;
    use proptest::prelude::*;

    fn sentences(n: usize, seed: u64) -> Vec<SentenceRecord> {
        let mut r = rng::rng(seed);
        let words = ["ka", "lo", "mina", "tor", "sel", "ba", "kalo", "nisi", "ro", "te"];
        (0..n)
            .map(|i| {
                let len = r.random_range(4..9);
                let toks = (0..len).map(|_| words.choose(&mut r).unwrap().to_string()).collect();
                SentenceRecord::new(toks, "d", i)
            })
            .collect()
    }

    fn small_encoder(vocab: &Vocabulary, seed: u64) -> Encoder {
        let cfg = EncoderConfig {
            n_layers: 1,
            hidden: 16,
            n_heads: 2,
            ff_dim: 32,
            vocab_size: vocab.len(),
            max_positions: 32,
            dropout: 0.0,
        };
        Encoder::new(cfg, vocab.content_hash(), seed).unwrap()
    }

    #[test]
    fn mask_counts() {
        assert_eq!(mask_count(10, 0.15, 20), 2);
        assert_eq!(mask_count(200, 0.15, 20), 20);
        assert_eq!(mask_count(3, 0.15, 20), 1);
        assert_eq!(mask_count(30, 0.15, 20), 5);
    }

    #[test]
    fn toy_logits_loss() {
        let store = crate::autograd::ParamStore::new();
        let mut g = Graph::new(&store);
        let logits = g.constant(ndarray::array![[2.0, 0.0]]);
        let l = mlm_loss(&mut g, logits, &[0]).unwrap();
        assert!((g.scalar(l) - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);
        let uniform = g.constant(ndarray::Array2::zeros((3, 7)));
        let l = mlm_loss(&mut g, uniform, &[0, 3, 6]).unwrap();
        assert!((g.scalar(l) - 7f64.ln()).abs() < 1e-12);
        assert!(mlm_loss(&mut g, uniform, &[]).is_err());
    }

    #[test]
    fn instances_are_framed_and_duplicated() {
        let corpus = sentences(30, 1);
        let vocab = train_vocabulary(&corpus, 140).unwrap();
        let cfg = PretrainConfig::default();
        let (inst, skipped) = build_instances(&corpus, &vocab, &cfg, 9, Parallelism::Rayon).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(inst.len(), 30 * 5);
        let sp = vocab.special();
        for i in &inst {
            assert_eq!(i.input_ids[0], sp.cls);
            assert_eq!(*i.input_ids.last().unwrap(), sp.sep);
            assert!(i.masked_positions.windows(2).all(|w| w[0] < w[1]));
            assert!(!i.masked_positions.contains(&0));
            assert!(!i.masked_positions.contains(&(i.input_ids.len() - 1)));
            assert_eq!(i.masked_positions.len(), mask_count(i.input_ids.len() - 2, 0.15, 20));
        }
        let (seq, _) = build_instances(&corpus, &vocab, &cfg, 9, Parallelism::Sequential).unwrap();
        assert_eq!(seq, inst);
    }

    #[test]
    fn mask_replacement_rates() {
        let ids: Vec<usize> = std::iter::once(101).chain(200..260).chain(std::iter::once(102)).collect();
        let cfg = PretrainConfig::default();
        let mut r = rng::rng(4);
        let (mut masked, mut kept, mut total) = (0usize, 0usize, 0usize);
        for _ in 0..10_000 {
            let inst = mask_sequence(&ids, 1000, 103, &cfg, &mut r);
            for (&p, &l) in inst.masked_positions.iter().zip(&inst.masked_labels) {
                total += 1;
                if inst.input_ids[p] == 103 {
                    masked += 1;
                } else if inst.input_ids[p] == l {
                    kept += 1;
                }
            }
        }
        let f = |c: usize| c as f64 / total as f64;
        assert!((f(masked) - 0.8).abs() < 0.02);
        // A random draw can land on the original piece (1 in 1000).
        assert!((f(kept) - 0.1).abs() < 0.02);
        assert!((f(total - masked - kept) - 0.1).abs() < 0.02);
    }

    #[test]
    fn tva_groups() {
        let corpus = sentences(10, 2);
        let vocab = train_vocabulary(&corpus, 130).unwrap();
        let mut enc = small_encoder(&vocab, 0);
        let cfg = PretrainConfig::default();
        assert_eq!(make_param_groups(&enc, PretrainMode::Lapt, &cfg).unwrap().len(), 1);
        assert!(make_param_groups(&enc, PretrainMode::Tva, &cfg).is_err());
        enc.new_slot_ids = vec![1, 2, 3];
        let groups = make_param_groups(&enc, PretrainMode::Tva, &cfg).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[1].lr, 1e-4);
    }

    #[test]
    fn training_reduces_loss_and_checkpoints_on_grid() {
        let corpus = sentences(50, 3);
        let vocab = train_vocabulary(&corpus, 130).unwrap();
        let mut cfg = PretrainConfig {
            lr: 2e-3,
            tiered_lr: 2e-3,
            warmup_steps: 10,
            dup_factor: 1,
            ..Default::default()
        };
        cfg.epochs_grid = vec![1, 5, 10, 15, 20];
        let (inst, _) = build_instances(&corpus, &vocab, &cfg, 1, Parallelism::Rayon).unwrap();
        let mut enc = small_encoder(&vocab, 1);
        let mut seen = Vec::new();
        let log = train_mlm(&mut enc, &inst, PretrainMode::Lapt, &cfg, Parallelism::Rayon, |e, _| {
            seen.push(e);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![1, 5, 10, 15, 20]);
        assert_eq!(log.epoch_losses.len(), 20);
        assert!(log.epoch_losses[19] < log.epoch_losses[0], "{:?}", log.epoch_losses);
    }

    #[test]
    fn tva_with_equal_rates_matches_va() {
        let corpus = sentences(20, 5);
        let vocab = train_vocabulary(&corpus, 130).unwrap();
        let cfg = PretrainConfig {
            lr: 1e-3,
            tiered_lr: 1e-3,
            warmup_steps: 3,
            dup_factor: 1,
            epochs_grid: vec![2],
            ..Default::default()
        };
        let (inst, _) = build_instances(&corpus, &vocab, &cfg, 1, Parallelism::Rayon).unwrap();
        let mut a = small_encoder(&vocab, 2);
        a.new_slot_ids = vec![1, 2];
        let mut b = a.clone();
        train_mlm(&mut a, &inst, PretrainMode::Va, &cfg, Parallelism::Rayon, |_, _| Ok(())).unwrap();
        train_mlm(&mut b, &inst, PretrainMode::Tva, &cfg, Parallelism::Sequential, |_, _| Ok(())).unwrap();
        assert!(a.store.bit_eq(&b.store));
    }

    #[test]
    fn shard_round_trip() {
        let corpus = sentences(5, 6);
        let vocab = train_vocabulary(&corpus, 130).unwrap();
        let (inst, _) =
            build_instances(&corpus, &vocab, &PretrainConfig::default(), 2, Parallelism::Rayon).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        write_shard(&path, &inst).unwrap();
        assert_eq!(read_shard(&path).unwrap(), inst);
        let text = std::fs::read_to_string(&path).unwrap().replace("\"version\":1", "\"version\":9");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_shard(&path), Err(Error::Version { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn specials_never_masked(len in 1usize..150, seed in any::<u64>()) {
            let ids: Vec<usize> = std::iter::once(101)
                .chain((0..len).map(|i| 104 + i % 50))
                .chain(std::iter::once(102))
                .collect();
            let inst = mask_sequence(&ids, 200, 103, &PretrainConfig::default(), &mut rng::rng(seed));
            prop_assert!(inst.masked_positions.iter().all(|&p| p >= 1 && p <= len));
            prop_assert_eq!(inst.masked_positions.len(), inst.masked_labels.len());
            prop_assert!(!inst.masked_positions.is_empty());
            prop_assert!(inst.masked_positions.len() <= 20);
        }
    }
}

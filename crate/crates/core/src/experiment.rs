//! Multi-seed experiment orchestration.
//!
//! A manifest names the corpora, the treebank splits, the methods and the
//! pretraining epoch grid. Every (method, mode, epoch, run) cell trains one
//! parser under a sampled optimizer configuration; the pretraining epoch is
//! chosen by mean validation LAS and test LAS is reported as mean and
//! sample standard deviation over the runs. Intermediate artifacts live in
//! a cache directory keyed by a hash of their inputs, so reruns and grid
//! extensions only compute what is missing.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment_vocabulary, AugmentationReport, CountWeighting};
use crate::corpus::{read_sentences, SentenceRecord};
use crate::encoder::{Encoder, EncoderConfig};
use crate::mix::RepresentationMode;
use crate::mlm::{build_instances, train_mlm, PretrainConfig, PretrainMode, TrainLog};
use crate::optim::AdamConfig;
use crate::par::{self, Parallelism};
use crate::parser::{train_parser, ParserConfig, ParserTrainLog, TrainRun};
use crate::rng;
use crate::treebank::{read_conllu, score, ScoreReport, TreebankSentence};
use crate::wordpiece::{train_vocabulary, Vocabulary};
use crate::{Error, Result};

/// Runs per reported cell.
pub const RUNS: usize = 5;
/// Resamples allowed after a run diverges.
pub const MAX_RETRIES: usize = 3;

/// Ranges for the sampled per-run settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bounds {
    pub beta1: (f64, f64),
    pub beta2: (f64, f64),
    pub clip: (f64, f64),
    pub seed: (u64, u64),
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            beta1: (0.9, 0.9999),
            beta2: (0.9, 0.9999),
            clip: (1.0, 10.0),
            seed: (0, 100_000),
        }
    }
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 <= lo && lo <= hi && hi < 1.0) {
                return Err(Error::invalid(format!("{name} range must lie in [0, 1)")));
            }
        }
        let (lo, hi) = self.clip;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid("clip range must be positive and finite"));
        }
        if self.seed.0 > self.seed.1 {
            return Err(Error::invalid("empty seed range"));
        }
        Ok(())
    }

    pub fn contains(&self, c: &RunConfig) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| lo <= v && v <= hi;
        let seed_ok = |s: u64| self.seed.0 <= s && s <= self.seed.1;
        within(c.adam_beta1, self.beta1)
            && within(c.adam_beta2, self.beta2)
            && within(c.grad_norm_clip, self.clip)
            && seed_ok(c.seeds.environment)
            && seed_ok(c.seeds.numeric)
            && seed_ok(c.seeds.model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// The base model as is.
    Baseline,
    Lapt,
    Va,
    Tva,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::Lapt, Method::Va, Method::Tva];

    pub fn pretrain_mode(self) -> Option<PretrainMode> {
        match self {
            Method::Baseline => None,
            Method::Lapt => Some(PretrainMode::Lapt),
            Method::Va => Some(PretrainMode::Va),
            Method::Tva => Some(PretrainMode::Tva),
        }
    }

    pub fn augmented(self) -> bool {
        matches!(self, Method::Va | Method::Tva)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Baseline => "baseline",
            Method::Lapt => "lapt",
            Method::Va => "va",
            Method::Tva => "tva",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Method::Baseline),
            "lapt" => Ok(Method::Lapt),
            "va" => Ok(Method::Va),
            "tva" => Ok(Method::Tva),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }
}

fn mode_name(m: RepresentationMode) -> &'static str {
    match m {
        RepresentationMode::Frozen => "frozen",
        RepresentationMode::Ft => "ft",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    /// Data order.
    pub environment: u64,
    /// Dropout.
    pub numeric: u64,
    /// Weight initialisation.
    pub model: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub grad_norm_clip: f64,
    pub seeds: Seeds,
    pub method: Method,
    pub mode: RepresentationMode,
    /// Pretraining epochs of the encoder; `None` for the baseline.
    pub pretrain_epochs: Option<usize>,
}

impl RunConfig {
    pub fn train_run(&self) -> TrainRun {
        TrainRun {
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                ..AdamConfig::default()
            },
            clip_norm: self.grad_norm_clip,
            data_seed: self.seeds.environment,
            dropout_seed: self.seeds.numeric,
            init_seed: self.seeds.model,
        }
    }

    pub fn for_cell(mut self, method: Method, mode: RepresentationMode, pretrain_epochs: Option<usize>) -> Self {
        self.method = method;
        self.mode = mode;
        self.pretrain_epochs = pretrain_epochs;
        self
    }
}

fn sample_one(bounds: &Bounds, seed: u64) -> RunConfig {
    let mut r = rng::rng(seed);
    let mut seed = || r.random_range(bounds.seed.0..=bounds.seed.1);
    let seeds = Seeds {
        environment: seed(),
        numeric: seed(),
        model: seed(),
    };
    RunConfig {
        adam_beta1: r.random_range(bounds.beta1.0..=bounds.beta1.1),
        adam_beta2: r.random_range(bounds.beta2.0..=bounds.beta2.1),
        grad_norm_clip: r.random_range(bounds.clip.0..=bounds.clip.1),
        seeds,
        method: Method::Baseline,
        mode: RepresentationMode::Frozen,
        pretrain_epochs: None,
    }
}

/// Configuration of run `index` after `attempt` resamples.
pub fn resample_run_config(bounds: &Bounds, master_seed: u64, index: usize, attempt: usize) -> RunConfig {
    sample_one(bounds, rng::derive(rng::derive(master_seed, index as u64), attempt as u64))
}

/// `n` independent uniform draws within `bounds`. Method, mode and
/// pretraining epochs are left at their defaults; see [`RunConfig::for_cell`].
pub fn sample_run_configs(bounds: &Bounds, n: usize, master_seed: u64) -> Vec<RunConfig> {
    (0..n).map(|i| resample_run_config(bounds, master_seed, i, 0)).collect()
}

/// Grid epoch with the highest mean validation LAS. `runs[r][k]` is the
/// score of run `r` at `grid[k]`. Ties go to the smallest epoch.
pub fn select_pretrain_epoch(grid: &[usize], runs: &[Vec<f64>]) -> Result<usize> {
    if grid.is_empty() || runs.is_empty() {
        return Err(Error::invalid("empty epoch grid or no runs"));
    }
    if let Some(r) = runs.iter().position(|row| row.len() != grid.len()) {
        return Err(Error::invalid(format!(
            "run {r} has {} scores for a grid of {}",
            runs[r].len(),
            grid.len()
        )));
    }
    if runs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("validation scores must be finite"));
    }
    let mut best: Option<(f64, usize)> = None;
    for (k, &epoch) in grid.iter().enumerate() {
        let mean = runs.iter().map(|row| row[k]).sum::<f64>() / runs.len() as f64;
        let better = match best {
            None => true,
            Some((m, e)) => mean > m || (mean == m && epoch < e),
        };
        if better {
            best = Some((mean, epoch));
        }
    }
    Ok(best.expect("non-empty grid").1)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_and_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("no values to aggregate"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Mean and sample standard deviation of exactly [`RUNS`] test scores.
pub fn aggregate_results(test_las: &[f64]) -> Result<(f64, f64)> {
    if test_las.len() != RUNS {
        return Err(Error::invalid(format!("expected {RUNS} scores, got {}", test_las.len())));
    }
    mean_and_std(test_las)
}

/// Share of the baseline's remaining error removed by the new score, in
/// percent.
pub fn relative_error_reduction(base_las: f64, new_las: f64) -> Result<f64> {
    if !(0.0..100.0).contains(&base_las) {
        return Err(Error::invalid(format!("baseline LAS {base_las} leaves no error to reduce")));
    }
    Ok(100.0 * (new_las - base_las) / (100.0 - base_las))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreebankPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
}

/// Where the base model comes from: either trained here from a corpus or
/// loaded from an encoder checkpoint and its vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseModel {
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    pub encoder: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}

fn default_vocab_size() -> usize {
    5000
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn default_modes() -> Vec<RepresentationMode> {
    vec![RepresentationMode::Frozen, RepresentationMode::Ft]
}
fn default_grid() -> Vec<usize> {
    vec![1, 5, 10, 15, 20]
}
fn default_runs() -> usize {
    RUNS
}

/// Experiment description, read from TOML. Relative paths are taken
/// relative to the manifest file.
///
/// ```toml
/// name = "demo"
/// target_corpus = "target.txt"
/// methods = ["baseline", "lapt", "va"]
/// modes = ["frozen", "ft"]
/// epoch_grid = [1, 5]
///
/// [base]
/// corpus = "base.txt"
/// vocab_size = 400
///
/// [treebank]
/// train = "train.conllu"
/// valid = "valid.conllu"
/// test = "test.conllu"
///
/// [encoder]
/// n_layers = 2
/// hidden = 32
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub base: BaseModel,
    pub target_corpus: PathBuf,
    pub treebank: TreebankPaths,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_modes")]
    pub modes: Vec<RepresentationMode>,
    #[serde(default = "default_grid")]
    pub epoch_grid: Vec<usize>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub bounds: Bounds,
    /// Shape of the base encoder; the vocabulary size is set from the
    /// base vocabulary.
    #[serde(default)]
    pub encoder: EncoderConfig,
    /// Continued pretraining; the epoch grid comes from `epoch_grid`.
    #[serde(default)]
    pub pretrain: PretrainConfig,
    /// Parser settings; the mode comes from `modes`.
    #[serde(default)]
    pub parser: ParserConfig,
    #[serde(default = "default_vocab_size")]
    pub target_vocab_size: usize,
    #[serde(default)]
    pub weighting: CountWeighting,
    #[serde(default)]
    pub parallelism: Parallelism,
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::from_toml(&text)?;
        m.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(m)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Manifest(e.to_string()))
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.target_corpus);
        fix(&mut self.treebank.train);
        fix(&mut self.treebank.valid);
        fix(&mut self.treebank.test);
        for p in [&mut self.base.corpus, &mut self.base.encoder, &mut self.base.vocab].into_iter().flatten() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Manifest(m.to_string()));
        if self.methods.is_empty() || self.modes.is_empty() {
            return bad("at least one method and one mode are required");
        }
        if self.runs == 0 {
            return bad("runs must be positive");
        }
        if self.epoch_grid.is_empty() || self.epoch_grid.contains(&0) {
            return bad("epoch grid must hold positive epoch counts");
        }
        let mut sorted = self.epoch_grid.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.epoch_grid.len() {
            return bad("epoch grid has duplicates");
        }
        match (&self.base.corpus, &self.base.encoder, &self.base.vocab) {
            (Some(_), None, None) | (None, Some(_), Some(_)) => {}
            _ => return bad("base needs either `corpus`, or both `encoder` and `vocab`"),
        }
        self.bounds.validate().map_err(|e| Error::Manifest(e.to_string()))?;
        self.pretrain.validate().map_err(|e| Error::Manifest(e.to_string()))?;
        self.parser.validate().map_err(|e| Error::Manifest(e.to_string()))?;
        Ok(())
    }
}

/// One trained parser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub mode: RepresentationMode,
    pub pretrain_epochs: Option<usize>,
    pub run_index: usize,
    /// Configuration actually used, after any resampling.
    pub config: RunConfig,
    pub retries: usize,
    pub log: ParserTrainLog,
    pub valid: ScoreReport,
    pub test: ScoreReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub method: Method,
    pub mode: RepresentationMode,
    /// Pretraining epochs tried; empty for the baseline.
    pub grid: Vec<usize>,
    /// `valid_las[r][k]`: best validation LAS of run `r` at `grid[k]`.
    pub valid_las: Vec<Vec<f64>>,
    pub selected_epoch: Option<usize>,
    pub test_las: Vec<f64>,
    pub test_uas: Vec<f64>,
    pub las_mean: f64,
    pub las_std: f64,
    pub uas_mean: f64,
    pub uas_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub method: Method,
    pub mode: RepresentationMode,
    pub baseline_las: f64,
    pub las: f64,
    /// `None` when the baseline is already perfect.
    pub percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub results: Vec<ExperimentResult>,
    pub reductions: Vec<Reduction>,
}

impl ExperimentReport {
    pub fn get(&self, method: Method, mode: RepresentationMode) -> Option<&ExperimentResult> {
        self.results.iter().find(|r| r.method == method && r.mode == mode)
    }
}

/// One stage execution, for inspecting cache behaviour.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEvent {
    pub stage: String,
    pub key: String,
    pub cached: bool,
}

fn hash_parts(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())[..24].to_string()
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn in_stage<T>(stage: &str, inputs: impl FnOnce() -> String, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: stage.into(),
        inputs: inputs(),
        source: Box::new(e),
    })
}

/// Retry `f` with fresh attempt numbers while it diverges.
fn with_retries<T>(mut f: impl FnMut(usize) -> Result<T>) -> Result<(T, usize)> {
    let mut attempt = 0;
    loop {
        match f(attempt) {
            Err(Error::NonFiniteLoss { step, detail }) if attempt < MAX_RETRIES => {
                log::warn!("attempt {attempt} diverged at step {step} ({detail}); resampling");
                attempt += 1;
            }
            other => return other.map(|v| (v, attempt)),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct AugmentArtifact {
    slots: Vec<usize>,
    report: AugmentationReport,
}

struct Inputs {
    target: Vec<SentenceRecord>,
    target_hash: String,
    train: Vec<TreebankSentence>,
    valid: Vec<TreebankSentence>,
    test: Vec<TreebankSentence>,
    treebank_hash: String,
}

/// Encoder checkpoint plus its vocabulary, identified by file hashes.
#[derive(Clone)]
struct ModelRef {
    encoder: PathBuf,
    encoder_hash: String,
    vocab: Vocabulary,
}

struct Runner<'a> {
    m: &'a Manifest,
    cache: PathBuf,
    events: Vec<StageEvent>,
}

impl Runner<'_> {
    fn note(&mut self, stage: &str, key: &str, cached: bool) {
        log::info!("{stage} {key}: {}", if cached { "cached" } else { "computed" });
        self.events.push(StageEvent {
            stage: stage.into(),
            key: key.into(),
            cached,
        });
    }

    fn load_inputs(&self) -> Result<Inputs> {
        let m = self.m;
        let tb = &m.treebank;
        let target = in_stage("load", || m.target_corpus.display().to_string(), read_sentences(&m.target_corpus))?;
        let read = |p: &Path| in_stage("load", || p.display().to_string(), read_conllu(p));
        let hashes = [
            file_hash(&m.target_corpus)?,
            file_hash(&tb.train)?,
            file_hash(&tb.valid)?,
            file_hash(&tb.test)?,
        ];
        Ok(Inputs {
            target,
            target_hash: hashes[0].clone(),
            train: read(&tb.train)?,
            valid: read(&tb.valid)?,
            test: read(&tb.test)?,
            treebank_hash: hash_parts(&[&hashes[1], &hashes[2], &hashes[3]]),
        })
    }

    fn base_model(&mut self) -> Result<ModelRef> {
        let m = self.m;
        if let (Some(enc), Some(voc)) = (&m.base.encoder, &m.base.vocab) {
            let vocab = in_stage("base", || voc.display().to_string(), Vocabulary::load(voc))?;
            let encoder = in_stage("base", || enc.display().to_string(), Encoder::load(enc))?;
            if encoder.vocab_hash != vocab.content_hash() {
                return Err(Error::Manifest("base encoder was trained with a different vocabulary".into()));
            }
            return Ok(ModelRef {
                encoder: enc.clone(),
                encoder_hash: file_hash(enc)?,
                vocab,
            });
        }
        let corpus_path = m.base.corpus.as_ref().expect("validated");
        let corpus_hash = file_hash(corpus_path)?;
        let inputs = || corpus_path.display().to_string();

        let key = hash_parts(&["base-vocab", &corpus_hash, &m.base.vocab_size.to_string()]);
        let vocab_path = self.cache.join(format!("base-vocab-{key}.txt"));
        let mut corpus: Option<Vec<SentenceRecord>> = None;
        let vocab = if vocab_path.exists() {
            self.note("base-vocab", &key, true);
            Vocabulary::load(&vocab_path)?
        } else {
            let c = in_stage("base-vocab", inputs, read_sentences(corpus_path))?;
            let v = in_stage("base-vocab", inputs, train_vocabulary(&c, m.base.vocab_size))?;
            v.save(&vocab_path)?;
            corpus = Some(c);
            self.note("base-vocab", &key, false);
            v
        };

        let mut cfg = m.encoder.clone();
        cfg.vocab_size = vocab.len();
        let pcfg = &m.base.pretrain;
        let key = hash_parts(&["base-encoder", &corpus_hash, &vocab.content_hash(), &json(&cfg), &json(pcfg)]);
        let enc_path = self.cache.join(format!("base-encoder-{key}.enc"));
        if enc_path.exists() {
            self.note("base-encoder", &key, true);
        } else {
            let corpus = match corpus {
                Some(c) => c,
                None => in_stage("base-encoder", inputs, read_sentences(corpus_path))?,
            };
            let (encoder, log) = in_stage(
                "base-encoder",
                inputs,
                with_retries(|attempt| {
                    let mut p = pcfg.clone();
                    p.seed = rng::derive(pcfg.seed, attempt as u64);
                    let (inst, _) = build_instances(&corpus, &vocab, &p, p.seed, m.parallelism)?;
                    let mut enc = Encoder::new(cfg.clone(), vocab.content_hash(), rng::derive_str(p.seed, "init"))?;
                    let log = train_mlm(&mut enc, &inst, PretrainMode::Base, &p, m.parallelism, |_, _| Ok(()))?;
                    Ok((enc, log))
                }),
            )?
            .0;
            encoder.save(&enc_path)?;
            write_json(&self.cache.join(format!("base-encoder-{key}.log.json")), &log)?;
            self.note("base-encoder", &key, false);
        }
        Ok(ModelRef {
            encoder_hash: file_hash(&enc_path)?,
            encoder: enc_path,
            vocab,
        })
    }

    /// Augmented vocabulary and the slots it filled.
    fn augment(&mut self, base: &ModelRef, inp: &Inputs) -> Result<(Vocabulary, Vec<usize>)> {
        let m = self.m;
        let inputs = || format!("{} with base vocabulary {}", m.target_corpus.display(), base.vocab.content_hash());
        let key = hash_parts(&["target-vocab", &inp.target_hash, &m.target_vocab_size.to_string()]);
        let tv_path = self.cache.join(format!("target-vocab-{key}.txt"));
        let target_vocab = if tv_path.exists() {
            self.note("target-vocab", &key, true);
            Vocabulary::load(&tv_path)?
        } else {
            let v = in_stage("target-vocab", inputs, train_vocabulary(&inp.target, m.target_vocab_size))?;
            v.save(&tv_path)?;
            self.note("target-vocab", &key, false);
            v
        };
        let key = hash_parts(&[
            "augment",
            &inp.target_hash,
            &base.vocab.content_hash(),
            &target_vocab.content_hash(),
            &json(&m.weighting),
        ]);
        let vocab_path = self.cache.join(format!("augment-{key}.txt"));
        let meta_path = self.cache.join(format!("augment-{key}.json"));
        if vocab_path.exists() && meta_path.exists() {
            self.note("augment", &key, true);
            let meta: AugmentArtifact = read_json(&meta_path)?;
            return Ok((Vocabulary::load(&vocab_path)?, meta.slots));
        }
        let (aug, slots, report) = in_stage(
            "augment",
            inputs,
            augment_vocabulary(&inp.target, &base.vocab, &target_vocab, m.weighting),
        )?;
        log::info!("augmentation: unknown pieces {} -> {}", report.unk_before, report.unk_after);
        aug.save(&vocab_path)?;
        write_json(&meta_path, &AugmentArtifact { slots: slots.clone(), report })?;
        self.note("augment", &key, false);
        Ok((aug, slots))
    }

    /// Checkpoint per grid epoch of continued pretraining.
    fn pretrain(
        &mut self,
        method: Method,
        base: &ModelRef,
        vocab: &Vocabulary,
        slots: &[usize],
        inp: &Inputs,
    ) -> Result<BTreeMap<usize, ModelRef>> {
        let m = self.m;
        let mode = method.pretrain_mode().expect("pretraining method");
        let mut cfg = m.pretrain.clone();
        cfg.epochs_grid = m.epoch_grid.clone();
        let key = hash_parts(&[
            "pretrain",
            &method.to_string(),
            &base.encoder_hash,
            &vocab.content_hash(),
            &inp.target_hash,
            &json(&cfg),
        ]);
        let cache = self.cache.clone();
        let path_for = |e: usize| cache.join(format!("pretrain-{key}-e{e}.enc"));
        let cached = m.epoch_grid.iter().all(|&e| path_for(e).exists());
        if cached {
            self.note("pretrain", &key, true);
        } else {
            let inputs = || format!("method {method}, base encoder {}", base.encoder_hash);
            let base_enc = in_stage("pretrain", inputs, Encoder::load(&base.encoder))?;
            let (log, _) = in_stage(
                "pretrain",
                inputs,
                with_retries(|attempt| -> Result<TrainLog> {
                    let mut p = cfg.clone();
                    p.seed = rng::derive(cfg.seed, attempt as u64);
                    let mut enc = base_enc.clone();
                    if method.augmented() {
                        enc.initialize_new_embeddings(slots, rng::derive_str(p.seed, "new-embeddings"))?;
                        enc.vocab_hash = vocab.content_hash();
                    }
                    let (inst, _) = build_instances(&inp.target, vocab, &p, p.seed, m.parallelism)?;
                    train_mlm(&mut enc, &inst, mode, &p, m.parallelism, |epoch, e| e.save(&path_for(epoch)))
                }),
            )?;
            write_json(&self.cache.join(format!("pretrain-{key}.log.json")), &log)?;
            self.note("pretrain", &key, false);
        }
        m.epoch_grid
            .iter()
            .map(|&e| {
                let p = path_for(e);
                Ok((
                    e,
                    ModelRef {
                        encoder_hash: file_hash(&p)?,
                        encoder: p,
                        vocab: vocab.clone(),
                    },
                ))
            })
            .collect()
    }
}

struct Job {
    model: ModelRef,
    config: RunConfig,
    index: usize,
    key: String,
}

fn run_job(m: &Manifest, cache: &Path, inp: &Inputs, job: &Job) -> Result<(RunRecord, bool)> {
    let path = cache.join(format!("parse-{}.json", job.key));
    if path.exists() {
        return Ok((read_json(&path)?, true));
    }
    let c = &job.config;
    let inputs = || {
        format!(
            "method {}, mode {}, epochs {:?}, encoder {}",
            c.method,
            mode_name(c.mode),
            c.pretrain_epochs,
            job.model.encoder_hash
        )
    };
    let encoder = in_stage("parse", inputs, Encoder::load(&job.model.encoder))?;
    let mut pcfg = m.parser.clone();
    pcfg.mode = c.mode;
    let ((parser, log, used), retries) = in_stage(
        "parse",
        inputs,
        with_retries(|attempt| {
            let used = if attempt == 0 {
                c.clone()
            } else {
                resample_run_config(&m.bounds, m.master_seed, job.index, attempt)
                    .for_cell(c.method, c.mode, c.pretrain_epochs)
            };
            let (p, log) = train_parser(
                &encoder,
                &job.model.vocab,
                &inp.train,
                &inp.valid,
                &pcfg,
                &used.train_run(),
                m.parallelism,
            )?;
            Ok((p, log, used))
        }),
    )?;
    let pred = in_stage("parse", inputs, parser.predict(&inp.test, m.parallelism))?;
    let test = score(&pred, &inp.test, m.parallelism)?;
    let valid = log.best().map(|e| e.valid).ok_or_else(|| Error::invalid("parser trained for no epochs"))?;
    let record = RunRecord {
        method: c.method,
        mode: c.mode,
        pretrain_epochs: c.pretrain_epochs,
        run_index: job.index,
        config: used,
        retries,
        log,
        valid,
        test,
    };
    write_json(&path, &record)?;
    Ok((record, false))
}

fn run_file_name(r: &RunRecord) -> String {
    format!(
        "{}-{}-e{}-r{}.json",
        r.method,
        mode_name(r.mode),
        r.pretrain_epochs.unwrap_or(0),
        r.run_index
    )
}

/// Execute every stage of the manifest, writing artifacts under
/// `out_dir/cache`, per-run logs under `out_dir/runs` and the report as
/// `results.json` and `results.txt`. Returns the report and the stage
/// events of this execution.
pub fn run_pipeline(m: &Manifest, out_dir: &Path) -> Result<(ExperimentReport, Vec<StageEvent>)> {
    m.validate()?;
    let cache = out_dir.join("cache");
    let runs_dir = out_dir.join("runs");
    for d in [&cache, &runs_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut runner = Runner {
        m,
        cache: cache.clone(),
        events: Vec::new(),
    };
    let inp = runner.load_inputs()?;
    let base = runner.base_model()?;
    let aug = if m.methods.iter().any(|x| x.augmented()) {
        Some(runner.augment(&base, &inp)?)
    } else {
        None
    };

    // Encoders for every (method, grid epoch).
    let mut models: BTreeMap<(Method, Option<usize>), ModelRef> = BTreeMap::new();
    for &method in &m.methods {
        if method == Method::Baseline {
            models.insert((method, None), base.clone());
            continue;
        }
        let (vocab, slots) = match (&aug, method.augmented()) {
            (Some((v, s)), true) => (v.clone(), s.clone()),
            _ => (base.vocab.clone(), Vec::new()),
        };
        for (e, r) in runner.pretrain(method, &base, &vocab, &slots, &inp)? {
            models.insert((method, Some(e)), r);
        }
    }

    let variations = sample_run_configs(&m.bounds, m.runs, m.master_seed);
    let mut jobs = Vec::new();
    for (&(method, epochs), model) in &models {
        for &mode in &m.modes {
            for (k, v) in variations.iter().enumerate() {
                let config = v.clone().for_cell(method, mode, epochs);
                let mut pcfg = m.parser.clone();
                pcfg.mode = mode;
                let key = hash_parts(&[
                    "parse",
                    &model.encoder_hash,
                    &model.vocab.content_hash(),
                    &inp.treebank_hash,
                    &json(&pcfg),
                    &json(&config),
                    &json(&m.bounds),
                    &m.master_seed.to_string(),
                ]);
                jobs.push(Job {
                    model: model.clone(),
                    config,
                    index: k,
                    key: format!("{key}-r{k}"),
                });
            }
        }
    }
    let done = par::try_map(m.parallelism, &jobs, |_, job| run_job(m, &cache, &inp, job))?;
    let mut records = Vec::with_capacity(done.len());
    for (job, (record, cached)) in jobs.iter().zip(done) {
        runner.note("parse", &job.key, cached);
        write_json(&runs_dir.join(run_file_name(&record)), &record)?;
        records.push(record);
    }
    let report = build_report(&m.name, &records, &m.methods, &m.modes, m.runs)?;
    write_json(&out_dir.join("results.json"), &report)?;
    let table = format_report(&report);
    fs::write(out_dir.join("results.txt"), &table).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join("stages.json"), &runner.events)?;
    Ok((report, runner.events))
}

/// Aggregate per-run records into the result table.
pub fn build_report(
    name: &str,
    records: &[RunRecord],
    methods: &[Method],
    modes: &[RepresentationMode],
    runs: usize,
) -> Result<ExperimentReport> {
    let mut results = Vec::new();
    for &method in methods {
        for &mode in modes {
            let cell: Vec<&RunRecord> = records.iter().filter(|r| r.method == method && r.mode == mode).collect();
            if cell.is_empty() {
                continue;
            }
            let mut grid: Vec<usize> = cell.iter().filter_map(|r| r.pretrain_epochs).collect();
            grid.sort_unstable();
            grid.dedup();
            let find = |k: usize, e: Option<usize>| {
                cell.iter()
                    .find(|r| r.run_index == k && r.pretrain_epochs == e)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("{method} {} misses run {k} at epoch {e:?}", mode_name(mode))))
            };
            let epochs: Vec<Option<usize>> = if grid.is_empty() {
                vec![None]
            } else {
                grid.iter().map(|&e| Some(e)).collect()
            };
            let valid_las = (0..runs)
                .map(|k| epochs.iter().map(|&e| Ok(find(k, e)?.valid.las)).collect::<Result<Vec<f64>>>())
                .collect::<Result<Vec<_>>>()?;
            let selected_epoch = if grid.is_empty() {
                None
            } else {
                Some(select_pretrain_epoch(&grid, &valid_las)?)
            };
            let chosen = (0..runs).map(|k| find(k, selected_epoch)).collect::<Result<Vec<_>>>()?;
            let test_las: Vec<f64> = chosen.iter().map(|r| r.test.las).collect();
            let test_uas: Vec<f64> = chosen.iter().map(|r| r.test.uas).collect();
            let agg = |v: &[f64]| if v.len() == RUNS { aggregate_results(v) } else { mean_and_std(v) };
            let (las_mean, las_std) = agg(&test_las)?;
            let (uas_mean, uas_std) = agg(&test_uas)?;
            results.push(ExperimentResult {
                method,
                mode,
                grid,
                valid_las,
                selected_epoch,
                test_las,
                test_uas,
                las_mean,
                las_std,
                uas_mean,
                uas_std,
            });
        }
    }
    let mut reductions = Vec::new();
    for r in &results {
        if r.method == Method::Baseline {
            continue;
        }
        if let Some(b) = results.iter().find(|b| b.method == Method::Baseline && b.mode == r.mode) {
            reductions.push(Reduction {
                method: r.method,
                mode: r.mode,
                baseline_las: b.las_mean,
                las: r.las_mean,
                percent: relative_error_reduction(b.las_mean, r.las_mean).ok(),
            });
        }
    }
    Ok(ExperimentReport {
        name: name.into(),
        results,
        reductions,
    })
}

/// Rebuild the report from the per-run logs in `dir/runs`.
pub fn report_from_dir(dir: &Path) -> Result<ExperimentReport> {
    let runs_dir = dir.join("runs");
    let mut paths: Vec<PathBuf> = fs::read_dir(&runs_dir)
        .map_err(|e| Error::io(&runs_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let records = paths.iter().map(|p| read_json::<RunRecord>(p)).collect::<Result<Vec<_>>>()?;
    if records.is_empty() {
        return Err(Error::invalid(format!("no run logs in {}", runs_dir.display())));
    }
    let mut methods: Vec<Method> = records.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    let modes: Vec<RepresentationMode> = [RepresentationMode::Frozen, RepresentationMode::Ft]
        .into_iter()
        .filter(|m| records.iter().any(|r| r.mode == *m))
        .collect();
    let runs = records.iter().map(|r| r.run_index).max().expect("non-empty") + 1;
    let name = fs::read_to_string(dir.join("results.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<ExperimentReport>(&t).ok())
        .map(|r| r.name)
        .unwrap_or_else(|| dir.display().to_string());
    build_report(&name, &records, &methods, &modes, runs)
}

/// Aligned text table: methods by representation mode, test LAS mean and
/// standard deviation, followed by error reductions over the baseline.
pub fn format_report(r: &ExperimentReport) -> String {
    let mut methods: Vec<Method> = r.results.iter().map(|x| x.method).collect();
    methods.dedup();
    let modes: Vec<RepresentationMode> = [RepresentationMode::Frozen, RepresentationMode::Ft]
        .into_iter()
        .filter(|m| r.results.iter().any(|x| x.mode == *m))
        .collect();
    let mut out = String::new();
    let _ = writeln!(out, "experiment: {}", r.name);
    let _ = writeln!(out, "test LAS (mean ± sample std over runs), selected pretraining epoch in brackets");
    let _ = write!(out, "{:<10}", "method");
    for m in &modes {
        let _ = write!(out, "  {:<22}", mode_name(*m));
    }
    out.push('\n');
    for method in methods {
        let _ = write!(out, "{:<10}", method.to_string());
        for &mode in &modes {
            let cell = match r.get(method, mode) {
                Some(x) => {
                    let e = x.selected_epoch.map(|e| format!("[{e}]")).unwrap_or_else(|| "[-]".into());
                    format!("{:6.2} ± {:5.2} {e}", x.las_mean, x.las_std)
                }
                None => "n/a".into(),
            };
            let _ = write!(out, "  {cell:<22}");
        }
        out.push('\n');
    }
    if !r.reductions.is_empty() {
        let _ = writeln!(out, "\nrelative error reduction over baseline (LAS)");
        for x in &r.reductions {
            let pct = x.percent.map(|p| format!("{p:6.1}%")).unwrap_or_else(|| "   n/a".into());
            let _ = writeln!(
                out,
                "{:<10}  {:<6}  {:6.2} -> {:6.2}  {pct}",
                x.method.to_string(),
                mode_name(x.mode),
                x.baseline_las,
                x.las
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn samples_lie_within_bounds_and_repeat() {
        let b = Bounds::default();
        let a = sample_run_configs(&b, 5, 11);
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|c| b.contains(c)));
        assert_eq!(a, sample_run_configs(&b, 5, 11));
        assert_ne!(a, sample_run_configs(&b, 5, 12));
        let c = &a[0];
        let run = c.train_run();
        assert_eq!((run.adam.beta1, run.adam.beta2, run.clip_norm), (c.adam_beta1, c.adam_beta2, c.grad_norm_clip));
        assert_eq!(run.init_seed, c.seeds.model);
    }

    #[test]
    fn epoch_selection() {
        let grid = [1, 5, 10, 15, 20];
        let means = [70.0, 72.0, 71.0, 69.0, 68.0];
        let runs: Vec<Vec<f64>> = (0..5).map(|_| means.to_vec()).collect();
        assert_eq!(select_pretrain_epoch(&grid, &runs).unwrap(), 5);
        let flat: Vec<Vec<f64>> = (0..5).map(|_| vec![50.0; 5]).collect();
        assert_eq!(select_pretrain_epoch(&grid, &flat).unwrap(), 1);
        assert!(select_pretrain_epoch(&grid, &[vec![1.0; 4]]).is_err());
        assert!(select_pretrain_epoch(&grid, &[]).is_err());
    }

    #[test]
    fn aggregation() {
        assert_eq!(aggregate_results(&[70.0; 5]).unwrap(), (70.0, 0.0));
        let (m, s) = aggregate_results(&[68.0, 69.0, 70.0, 71.0, 72.0]).unwrap();
        assert!((m - 70.0).abs() < 1e-12);
        assert!((s - 2.5f64.sqrt()).abs() < 1e-12);
        assert!(aggregate_results(&[1.0; 4]).is_err());
    }

    #[test]
    fn error_reduction() {
        assert!((relative_error_reduction(67.06, 79.88).unwrap() - 38.92).abs() < 0.01);
        assert!((relative_error_reduction(68.19, 73.03).unwrap() - 15.22).abs() < 0.01);
        assert_eq!(relative_error_reduction(50.0, 50.0).unwrap(), 0.0);
        assert!(relative_error_reduction(100.0, 100.0).is_err());
    }

    #[test]
    fn manifest_defaults_and_validation() {
        let text = r#"
            name = "t"
            target_corpus = "t.txt"
            [base]
            corpus = "b.txt"
            [treebank]
            train = "a"
            valid = "b"
            test = "c"
        "#;
        let m = Manifest::from_toml(text).unwrap();
        assert_eq!(m.epoch_grid, vec![1, 5, 10, 15, 20]);
        assert_eq!(m.runs, 5);
        assert_eq!(m.methods.len(), 4);
        assert_eq!(Manifest::from_toml(&m.to_toml().unwrap()).unwrap(), m);
        assert!(Manifest::from_toml(&text.replace("corpus = \"b.txt\"", "")).is_err());
        assert!(Manifest::from_toml(&format!("bogus = 1\n{text}")).is_err());
    }

    fn record(k: usize, e: Option<usize>, valid: f64, test: f64) -> RunRecord {
        let config = sample_run_configs(&Bounds::default(), 1, 0)[0].clone().for_cell(Method::Lapt, RepresentationMode::Frozen, e);
        RunRecord {
            method: Method::Lapt,
            mode: RepresentationMode::Frozen,
            pretrain_epochs: e,
            run_index: k,
            config,
            retries: 0,
            log: ParserTrainLog::default(),
            valid: ScoreReport { uas: valid, las: valid, n_tokens: 10 },
            test: ScoreReport { uas: test + 1.0, las: test, n_tokens: 10 },
        }
    }

    #[test]
    fn report_selects_by_validation_and_reports_test() {
        let mut recs = Vec::new();
        for k in 0..5 {
            recs.push(record(k, Some(1), 60.0, 10.0 + k as f64));
            recs.push(record(k, Some(5), 61.0, 50.0 + k as f64));
        }
        let r = build_report("x", &recs, &[Method::Lapt], &[RepresentationMode::Frozen], 5).unwrap();
        let cell = r.get(Method::Lapt, RepresentationMode::Frozen).unwrap();
        assert_eq!(cell.selected_epoch, Some(5));
        assert_eq!(cell.test_las, vec![50.0, 51.0, 52.0, 53.0, 54.0]);
        assert!((cell.las_mean - 52.0).abs() < 1e-12);
        assert!(format_report(&r).contains("52.00"));
        recs.pop();
        assert!(build_report("x", &recs, &[Method::Lapt], &[RepresentationMode::Frozen], 5).is_err());
    }

    proptest! {
        #[test]
        fn any_sample_is_in_bounds(seed in any::<u64>(), lo in 0.0f64..0.5, w in 0.0f64..0.4) {
            let b = Bounds { beta1: (lo, lo + w), ..Bounds::default() };
            for c in sample_run_configs(&b, 3, seed) {
                prop_assert!(b.contains(&c));
            }
        }

        #[test]
        fn aggregation_ignores_order(mut v in proptest::collection::vec(0.0f64..100.0, 5)) {
            let (m, s) = aggregate_results(&v).unwrap();
            v.reverse();
            let (m2, s2) = aggregate_results(&v).unwrap();
            prop_assert!((m - m2).abs() < 1e-9 && (s - s2).abs() < 1e-9 && s >= 0.0);
        }

        #[test]
        fn selection_matches_reaveraging(vals in proptest::collection::vec(proptest::collection::vec(0.0f64..100.0, 3), 5)) {
            let grid = [1, 5, 10];
            let e = select_pretrain_epoch(&grid, &vals).unwrap();
            let means: Vec<f64> = (0..3).map(|k| vals.iter().map(|r| r[k]).sum::<f64>() / 5.0).collect();
            let k = grid.iter().position(|&g| g == e).unwrap();
            prop_assert!(means.iter().all(|&m| m <= means[k]));
        }
    }
}

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use lapt::augment::{augment_vocabulary, CountWeighting};
use lapt::corpus::{
    compute_corpus_stats, prepare_corpus, read_documents, read_sentences, subsample_articles, write_sentences,
    CorpusFormat, LengthFilter,
};
use lapt::encoder::{Encoder, EncoderConfig};
use lapt::experiment::{format_report, report_from_dir, run_pipeline, Manifest};
use lapt::mix::RepresentationMode;
use lapt::mlm::{build_instances, read_shard, train_mlm, write_shard, PretrainConfig, PretrainMode};
use lapt::par::Parallelism;
use lapt::parser::{train_parser, Parser as DepParser, ParserConfig, TrainRun};
use lapt::synthetic::{build_world, write_world, WorldConfig};
use lapt::treebank::{read_conllu, score, split_treebank, write_conllu};
use lapt::wordpiece::{train_vocabulary, Vocabulary};

#[derive(Parser)]
#[command(name = "lapt", version, about = "Language-adaptive pretraining and dependency parsing toolkit")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Unlabeled text preparation.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Wordpiece vocabularies.
    #[command(subcommand)]
    Vocab(VocabCmd),
    /// Masked-LM data and training.
    #[command(subcommand)]
    Pretrain(PretrainCmd),
    /// Dependency parser training and prediction.
    #[command(subcommand)]
    Parse(ParseCmd),
    /// Attachment scores.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Treebank utilities.
    #[command(subcommand)]
    Treebank(TreebankCmd),
    /// Multi-run experiments.
    #[command(subcommand)]
    Experiment(ExperimentCmd),
    /// Write a generated toy world (corpora, treebanks, manifest).
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Wiki,
    Forum,
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Clean a dump into one tokenized sentence per line.
    Clean {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Wiki)]
        format: Format,
        /// Keep this fraction of documents.
        #[arg(long)]
        sample: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CoNLL-U files whose sentences must not appear in the output.
        #[arg(long)]
        exclude: Vec<PathBuf>,
        #[arg(long, default_value_t = 5)]
        min_len: usize,
        #[arg(long, default_value_t = 50)]
        max_len: usize,
    },
}

#[derive(Subcommand)]
enum VocabCmd {
    /// Learn a vocabulary from a sentence file.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Sentence, token, piece and unknown counts of a corpus.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Fill the reserved slots of a vocabulary with target-language pieces.
    Augment {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        base_vocab: PathBuf,
        /// Vocabulary trained on the target corpus.
        #[arg(long)]
        new_vocab: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value = "token")]
        weighting: CountWeighting,
    },
}

#[derive(Args)]
struct PretrainOpts {
    /// TOML file with pretraining settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum PretrainCmd {
    /// Tokenize, frame and mask a corpus into a shard file.
    MakeShards {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        dup_factor: Option<usize>,
        #[command(flatten)]
        opts: PretrainOpts,
    },
    /// Train an encoder on shards, saving a checkpoint at every grid epoch.
    Run {
        #[arg(long, required = true)]
        shards: Vec<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        /// Starting checkpoint; omit to train from scratch.
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// TOML encoder shape for training from scratch.
        #[arg(long)]
        encoder_config: Option<PathBuf>,
        /// Vocabulary the starting checkpoint was trained with, when
        /// `vocab` is its augmented version.
        #[arg(long)]
        base_vocab: Option<PathBuf>,
        #[arg(long, default_value = "lapt")]
        mode: PretrainMode,
        /// Comma-separated epochs at which to save checkpoints.
        #[arg(long, value_delimiter = ',')]
        epochs: Option<Vec<usize>>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        opts: PretrainOpts,
    },
}

#[derive(Subcommand)]
enum ParseCmd {
    /// Train a parser with early stopping on the validation set.
    Train {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long, default_value = "frozen")]
        mode: RepresentationMode,
        /// TOML file with parser settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
        /// Write per-epoch metrics here as JSON.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fill HEAD and DEPREL of a CoNLL-U file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// UAS and LAS of predictions against gold trees.
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
}

#[derive(Subcommand)]
enum TreebankCmd {
    /// Shuffle and cut into train, valid and test files.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1")]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Run every stage of a manifest.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory; defaults to `out` next to the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild the result table from per-run logs.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn load_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn pretrain_config(opts: &PretrainOpts) -> Result<PretrainConfig> {
    let mut cfg: PretrainConfig = load_toml(opts.config.as_deref())?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let par = if cli.sequential { Parallelism::Sequential } else { Parallelism::Rayon };
    match cli.command {
        Command::Corpus(CorpusCmd::Clean {
            input,
            output,
            format,
            sample,
            seed,
            exclude,
            min_len,
            max_len,
        }) => {
            let format = match format {
                Format::Wiki => CorpusFormat::Wiki,
                Format::Forum => CorpusFormat::Forum,
            };
            let mut docs = read_documents(&input, format)?;
            if let Some(f) = sample {
                docs = subsample_articles(&docs, f, seed)?;
            }
            let mut held_out = HashSet::new();
            for p in &exclude {
                for s in read_conllu(p)? {
                    held_out.insert(s.tokens().into_iter().map(String::from).collect::<Vec<_>>());
                }
            }
            let sentences = prepare_corpus(&docs, format, &held_out, LengthFilter { min_len, max_len });
            write_sentences(&output, &sentences)?;
            eprintln!("{} documents -> {} sentences", docs.len(), sentences.len());
        }
        Command::Vocab(VocabCmd::Train { corpus, size, output }) => {
            let c = read_sentences(&corpus)?;
            let v = train_vocabulary(&c, size)?;
            v.save(&output)?;
            eprintln!("{} pieces written to {}", v.len(), output.display());
        }
        Command::Vocab(VocabCmd::Stats { corpus, vocab }) => {
            let stats = compute_corpus_stats(&read_sentences(&corpus)?, &Vocabulary::load(&vocab)?)?;
            print_json(&stats)?;
        }
        Command::Vocab(VocabCmd::Augment {
            corpus,
            base_vocab,
            new_vocab,
            output,
            report,
            weighting,
        }) => {
            let c = read_sentences(&corpus)?;
            let (aug, _, rep) = augment_vocabulary(&c, &Vocabulary::load(&base_vocab)?, &Vocabulary::load(&new_vocab)?, weighting)?;
            aug.save(&output)?;
            if let Some(p) = report {
                rep.save(&p)?;
            }
            eprintln!(
                "{} pieces added; unknown pieces {} -> {}",
                rep.pieces_added.len(),
                rep.unk_before,
                rep.unk_after
            );
        }
        Command::Pretrain(PretrainCmd::MakeShards {
            corpus,
            vocab,
            output,
            dup_factor,
            opts,
        }) => {
            let mut cfg = pretrain_config(&opts)?;
            if let Some(d) = dup_factor {
                cfg.dup_factor = d;
            }
            let (inst, skipped) = build_instances(&read_sentences(&corpus)?, &Vocabulary::load(&vocab)?, &cfg, cfg.seed, par)?;
            write_shard(&output, &inst)?;
            eprintln!("{} instances ({} sentences skipped)", inst.len(), skipped);
        }
        Command::Pretrain(PretrainCmd::Run {
            shards,
            vocab,
            encoder,
            encoder_config,
            base_vocab,
            mode,
            epochs,
            out_dir,
            opts,
        }) => {
            let mut cfg = pretrain_config(&opts)?;
            if let Some(e) = epochs {
                cfg.epochs_grid = e;
            }
            let vocab = Vocabulary::load(&vocab)?;
            let mut enc = match (&encoder, mode) {
                (Some(p), _) => Encoder::load(p)?,
                (None, PretrainMode::Base) => {
                    let mut ec: EncoderConfig = load_toml(encoder_config.as_deref())?;
                    ec.vocab_size = vocab.len();
                    Encoder::new(ec, vocab.content_hash(), cfg.seed)?
                }
                (None, _) => bail!("continued pretraining needs --encoder"),
            };
            if enc.vocab_hash != vocab.content_hash() {
                let Some(bv) = base_vocab else {
                    bail!("encoder was trained with another vocabulary; pass --base-vocab")
                };
                let bv = Vocabulary::load(&bv)?;
                if bv.content_hash() != enc.vocab_hash || bv.len() != vocab.len() {
                    bail!("--base-vocab does not match the encoder");
                }
                let slots: Vec<usize> = (0..vocab.len()).filter(|&i| bv.piece(i) != vocab.piece(i)).collect();
                enc.initialize_new_embeddings(&slots, cfg.seed)?;
                enc.vocab_hash = vocab.content_hash();
                eprintln!("{} embedding rows reinitialised", slots.len());
            }
            let mut inst = Vec::new();
            for s in &shards {
                inst.extend(read_shard(s)?);
            }
            fs::create_dir_all(&out_dir)?;
            let log = train_mlm(&mut enc, &inst, mode, &cfg, par, |epoch, e| {
                let p = out_dir.join(format!("encoder-e{epoch}.enc"));
                eprintln!("epoch {epoch}: checkpoint {}", p.display());
                e.save(&p)
            })?;
            fs::write(out_dir.join("pretrain-log.json"), serde_json::to_string_pretty(&log)?)?;
        }
        Command::Parse(ParseCmd::Train {
            encoder,
            vocab,
            train,
            valid,
            mode,
            config,
            seed,
            output,
            log,
        }) => {
            let mut cfg: ParserConfig = load_toml(config.as_deref())?;
            cfg.mode = mode;
            let run = TrainRun {
                data_seed: seed,
                dropout_seed: seed.wrapping_add(1),
                init_seed: seed.wrapping_add(2),
                ..TrainRun::default()
            };
            let (parser, tlog) = train_parser(
                &Encoder::load(&encoder)?,
                &Vocabulary::load(&vocab)?,
                &read_conllu(&train)?,
                &read_conllu(&valid)?,
                &cfg,
                &run,
                par,
            )?;
            parser.save(&output)?;
            if let Some(best) = tlog.best() {
                eprintln!("best epoch {}: valid UAS {:.2} LAS {:.2}", best.epoch, best.valid.uas, best.valid.las);
            }
            if let Some(p) = log {
                fs::write(p, serde_json::to_string_pretty(&tlog)?)?;
            }
        }
        Command::Parse(ParseCmd::Predict { model, input, output }) => {
            let parser = DepParser::load(&model)?;
            let pred = parser.predict(&read_conllu(&input)?, par)?;
            write_conllu(&output, &pred)?;
        }
        Command::Eval(EvalCmd::Score { pred, gold }) => {
            print_json(&score(&read_conllu(&pred)?, &read_conllu(&gold)?, par)?)?;
        }
        Command::Treebank(TreebankCmd::Split {
            input,
            out_dir,
            ratios,
            seed,
        }) => {
            let [a, b, c] = ratios[..] else { bail!("--ratios takes three values") };
            let (train, valid, test) = split_treebank(&read_conllu(&input)?, (a, b, c), seed)?;
            fs::create_dir_all(&out_dir)?;
            for (name, part) in [("train", &train), ("valid", &valid), ("test", &test)] {
                write_conllu(&out_dir.join(format!("{name}.conllu")), part)?;
            }
            eprintln!("{} / {} / {} sentences", train.len(), valid.len(), test.len());
        }
        Command::Experiment(ExperimentCmd::Run { manifest, out }) => {
            let m = Manifest::load(&manifest)?;
            let out = out.unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join("out"));
            let (report, _) = run_pipeline(&m, &out)?;
            print!("{}", format_report(&report));
        }
        Command::Experiment(ExperimentCmd::Report { dir, json }) => {
            let report = report_from_dir(&dir)?;
            if json {
                print_json(&report)?;
            } else {
                print!("{}", format_report(&report));
            }
        }
        Command::Synth { out_dir, seed } => {
            let cfg = WorldConfig { seed, ..WorldConfig::default() };
            let files = write_world(&build_world(&cfg)?, &out_dir, cfg.split, seed)?;
            let manifest = out_dir.join("manifest.toml");
            fs::write(&manifest, DEMO_MANIFEST)?;
            eprintln!("wrote {} and corpora under {}", manifest.display(), out_dir.display());
            print_json(&files)?;
        }
    }
    Ok(())
}

/// Small settings that finish in minutes on one core.
const DEMO_MANIFEST: &str = r#"name = "synthetic"
target_corpus = "target.txt"
methods = ["baseline", "lapt", "va", "tva"]
modes = ["frozen", "ft"]
epoch_grid = [2, 6]
runs = 5
target_vocab_size = 400

[base]
corpus = "base.txt"
vocab_size = 400

[base.pretrain]
lr = 1e-3
tiered_lr = 1e-3
warmup_steps = 200
batch_size = 16
epochs_grid = [8]
dup_factor = 2

[treebank]
train = "train.conllu"
valid = "valid.conllu"
test = "test.conllu"

[encoder]
n_layers = 2
hidden = 32
n_heads = 2
ff_dim = 64
max_positions = 48

[pretrain]
lr = 5e-4
tiered_lr = 2.5e-3
warmup_steps = 100
batch_size = 16
dup_factor = 2

[parser]
arc_dim = 64
label_dim = 32
bilstm_layers = 1
bilstm_hidden = 64
encoder_lr = 5e-4
max_epochs = 40
patience = 8
"#;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

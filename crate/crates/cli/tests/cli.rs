use std::fs;
use std::path::Path;
use std::process::Command;

fn lapt(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_lapt")).args(args).output().expect("spawn lapt");
    assert!(
        out.status.success(),
        "lapt {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

const TINY_ENCODER: &str = "n_layers = 1\nhidden = 8\nn_heads = 2\nff_dim = 8\nmax_positions = 48\n";
const TINY_PRETRAIN: &str = "batch_size = 64\nwarmup_steps = 2\nlr = 1e-3\ntiered_lr = 5e-3\ndup_factor = 1\n";
const TINY_PARSER: &str =
    "arc_dim = 8\nlabel_dim = 8\nbilstm_layers = 1\nbilstm_hidden = 8\nmax_epochs = 2\npatience = 2\n";

#[test]
fn corpus_clean_filters_and_excludes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("dump.txt"),
        "<doc id=\"1\" title=\"A\">\nA\n\nthe cat sat on the mat today. short one.\n</doc>\n\
         <doc id=\"2\" title=\"B\">\nB\n\nwe saw the dog by the river bank.\n</doc>\n",
    )
    .unwrap();
    let rows: Vec<String> = ["we", "saw", "the", "dog", "by", "the", "river", "bank"]
        .iter()
        .enumerate()
        .map(|(i, w)| format!("{}\t{w}\t_\t_\t_\t_\t{}\tdep\t_\t_", i + 1, if i == 1 { 0 } else { 2 }))
        .collect();
    fs::write(d.join("held.conllu"), rows.join("\n") + "\n\n").unwrap();
    lapt(&["corpus", "clean", "--input", &p(d, "dump.txt"), "--output", &p(d, "out.txt"), "--exclude", &p(d, "held.conllu")]);
    let text = fs::read_to_string(d.join("out.txt")).unwrap();
    assert_eq!(text.lines().collect::<Vec<_>>(), vec!["the cat sat on the mat today", "short one"]);

    fs::write(d.join("forum.txt"), "too short !\nthis forum post is long enough , right ?\n").unwrap();
    lapt(&["corpus", "clean", "--input", &p(d, "forum.txt"), "--output", &p(d, "f.txt"), "--format", "forum"]);
    let text = fs::read_to_string(d.join("f.txt")).unwrap();
    assert_eq!(text.lines().collect::<Vec<_>>(), vec!["this forum post is long enough , right ?"]);
}

#[test]
fn full_toolchain_on_a_generated_world() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let files: serde_json::Value = serde_json::from_str(&lapt(&["synth", "--out-dir", &p(d, "w")])).unwrap();
    let base = files["base_corpus"].as_str().unwrap().to_string();
    let target = files["target_corpus"].as_str().unwrap().to_string();
    let train = files["train"].as_str().unwrap().to_string();
    let valid = files["valid"].as_str().unwrap().to_string();
    let test = files["test"].as_str().unwrap().to_string();
    fs::write(d.join("enc.toml"), TINY_ENCODER).unwrap();
    fs::write(d.join("pre.toml"), TINY_PRETRAIN).unwrap();
    fs::write(d.join("parser.toml"), TINY_PARSER).unwrap();

    lapt(&["vocab", "train", "--corpus", &base, "--size", "300", "--output", &p(d, "base.vocab")]);
    lapt(&["vocab", "train", "--corpus", &target, "--size", "300", "--output", &p(d, "target.vocab")]);
    let stats: serde_json::Value =
        serde_json::from_str(&lapt(&["vocab", "stats", "--corpus", &target, "--vocab", &p(d, "base.vocab")])).unwrap();
    let unk_before = stats["unk_tokens"].as_u64().unwrap();
    assert!(unk_before > 0, "held-out characters should be unknown: {stats}");

    lapt(&[
        "vocab", "augment", "--corpus", &target, "--base-vocab", &p(d, "base.vocab"), "--new-vocab",
        &p(d, "target.vocab"), "--output", &p(d, "aug.vocab"), "--report", &p(d, "aug.json"),
    ]);
    let stats: serde_json::Value =
        serde_json::from_str(&lapt(&["vocab", "stats", "--corpus", &target, "--vocab", &p(d, "aug.vocab")])).unwrap();
    assert!(stats["unk_tokens"].as_u64().unwrap() < unk_before);

    lapt(&[
        "pretrain", "make-shards", "--corpus", &base, "--vocab", &p(d, "base.vocab"), "--output",
        &p(d, "base.shard"), "--config", &p(d, "pre.toml"),
    ]);
    lapt(&[
        "pretrain", "run", "--shards", &p(d, "base.shard"), "--vocab", &p(d, "base.vocab"), "--mode", "base",
        "--encoder-config", &p(d, "enc.toml"), "--epochs", "1", "--out-dir", &p(d, "base"), "--config",
        &p(d, "pre.toml"),
    ]);
    assert!(d.join("base/encoder-e1.enc").exists());
    lapt(&[
        "pretrain", "make-shards", "--corpus", &target, "--vocab", &p(d, "aug.vocab"), "--output",
        &p(d, "target.shard"), "--config", &p(d, "pre.toml"),
    ]);
    lapt(&[
        "--sequential", "pretrain", "run", "--shards", &p(d, "target.shard"), "--vocab", &p(d, "aug.vocab"),
        "--encoder", &p(d, "base/encoder-e1.enc"), "--base-vocab", &p(d, "base.vocab"), "--mode", "tva",
        "--epochs", "1,2", "--out-dir", &p(d, "tva"), "--config", &p(d, "pre.toml"),
    ]);
    assert!(d.join("tva/encoder-e1.enc").exists() && d.join("tva/encoder-e2.enc").exists());

    lapt(&[
        "parse", "train", "--encoder", &p(d, "tva/encoder-e2.enc"), "--vocab", &p(d, "aug.vocab"), "--train",
        &train, "--valid", &valid, "--mode", "ft", "--config", &p(d, "parser.toml"), "--output",
        &p(d, "parser.bin"), "--log", &p(d, "parser-log.json"),
    ]);
    lapt(&["parse", "predict", "--model", &p(d, "parser.bin"), "--input", &test, "--output", &p(d, "pred.conllu")]);
    let scores: serde_json::Value =
        serde_json::from_str(&lapt(&["eval", "score", "--pred", &p(d, "pred.conllu"), "--gold", &test])).unwrap();
    let (uas, las) = (scores["uas"].as_f64().unwrap(), scores["las"].as_f64().unwrap());
    assert!((0.0..=100.0).contains(&las) && las <= uas, "{scores}");

    // Gold against itself is perfect.
    let gold: serde_json::Value =
        serde_json::from_str(&lapt(&["eval", "score", "--pred", &test, "--gold", &test])).unwrap();
    assert_eq!(gold["las"].as_f64().unwrap(), 100.0);
}

#[test]
fn treebank_split_partitions_sentences() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let files: serde_json::Value = serde_json::from_str(&lapt(&["synth", "--out-dir", &p(d, "w")])).unwrap();
    let train = files["train"].as_str().unwrap();
    lapt(&["treebank", "split", "--input", train, "--out-dir", &p(d, "s"), "--ratios", "0.6,0.2,0.2", "--seed", "3"]);
    let count = |f: &str| fs::read_to_string(d.join("s").join(f)).unwrap().split("\n\n").filter(|b| !b.trim().is_empty()).count();
    let total = fs::read_to_string(train).unwrap().split("\n\n").filter(|b| !b.trim().is_empty()).count();
    let parts = [count("train.conllu"), count("valid.conllu"), count("test.conllu")];
    assert_eq!(parts.iter().sum::<usize>(), total);
    assert!(parts[0] > parts[1] && parts[1] > 0 && parts[2] > 0, "{parts:?}");
}

#[test]
fn experiment_run_and_report_agree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    lapt(&["synth", "--out-dir", &p(d, "w")]);
    let manifest = format!(
        "name = \"tiny\"\ntarget_corpus = \"target.txt\"\nmethods = [\"baseline\", \"va\"]\nmodes = [\"frozen\"]\n\
         epoch_grid = [1]\ntarget_vocab_size = 300\n\n[base]\ncorpus = \"base.txt\"\nvocab_size = 300\n\
         [base.pretrain]\n{TINY_PRETRAIN}epochs_grid = [1]\n\n[treebank]\ntrain = \"train.conllu\"\n\
         valid = \"valid.conllu\"\ntest = \"test.conllu\"\n\n[encoder]\n{TINY_ENCODER}\n[pretrain]\n{TINY_PRETRAIN}\n\
         [parser]\n{TINY_PARSER}"
    );
    fs::write(d.join("w/tiny.toml"), manifest).unwrap();
    let table = lapt(&["experiment", "run", "--manifest", &p(d, "w/tiny.toml")]);
    assert!(table.contains("baseline") && table.contains("va"), "{table}");
    assert_eq!(lapt(&["experiment", "report", "--dir", &p(d, "w/out")]), table);
    let json: serde_json::Value =
        serde_json::from_str(&lapt(&["experiment", "report", "--dir", &p(d, "w/out"), "--json"])).unwrap();
    assert_eq!(json["results"].as_array().unwrap().len(), 2);
    assert_eq!(fs::read_dir(d.join("w/out/runs")).unwrap().count(), 10);
}

#[test]
fn bad_input_is_reported() {
    let out = Command::new(env!("CARGO_BIN_EXE_lapt"))
        .args(["eval", "score", "--pred", "/nonexistent.conllu", "--gold", "/nonexistent.conllu"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

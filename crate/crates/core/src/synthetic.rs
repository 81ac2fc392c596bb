//! Generated languages for end-to-end experiments.
//!
//! A language is a lexicon of random word forms per class plus a small
//! clause grammar. Base languages use a shared alphabet and head-initial
//! order. The target language is head-final and marks word class with
//! suffixes drawn from characters that never occur in base text, so a
//! vocabulary trained on base text sees those suffixes as unknown pieces.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_sentences, SentenceRecord};
use crate::rng::{self, Rng};
use crate::treebank::{split_treebank, write_conllu, TreebankSentence};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WordClass {
    Det,
    Adj,
    Noun,
    Verb,
    Adv,
    Case,
}

pub const CLASSES: [WordClass; 6] = [
    WordClass::Det,
    WordClass::Adj,
    WordClass::Noun,
    WordClass::Verb,
    WordClass::Adv,
    WordClass::Case,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub name: String,
    pub stem_alphabet: Vec<char>,
    /// Class-marking suffixes; one is picked per word.
    pub suffixes: BTreeMap<WordClass, Vec<String>>,
    pub lexicon_sizes: BTreeMap<WordClass, usize>,
    pub stem_len: (usize, usize),
    pub head_final: bool,
    /// Zipf exponent for word choice within a class.
    pub zipf: f64,
}

impl LanguageSpec {
    fn base_sizes(open: usize, closed: usize) -> BTreeMap<WordClass, usize> {
        BTreeMap::from([
            (WordClass::Det, closed),
            (WordClass::Adj, open),
            (WordClass::Noun, open * 2),
            (WordClass::Verb, open),
            (WordClass::Adv, open / 2),
            (WordClass::Case, closed),
        ])
    }

    /// Head-initial language over `alphabet` with no class marking.
    pub fn base(name: &str, alphabet: &str, open: usize) -> Self {
        LanguageSpec {
            name: name.into(),
            stem_alphabet: alphabet.chars().collect(),
            suffixes: BTreeMap::new(),
            lexicon_sizes: Self::base_sizes(open, 4),
            stem_len: (2, 5),
            head_final: false,
            zipf: 1.0,
        }
    }

    /// Head-final language over `alphabet` whose open-class words end in
    /// class suffixes built from `marks` (one character per class).
    pub fn target(name: &str, alphabet: &str, marks: [char; 4], open: usize) -> Self {
        let [n, v, a, r] = marks;
        LanguageSpec {
            name: name.into(),
            stem_alphabet: alphabet.chars().collect(),
            suffixes: BTreeMap::from([
                (WordClass::Noun, vec![n.to_string(), format!("{n}{n}")]),
                (WordClass::Verb, vec![v.to_string(), format!("{v}{n}")]),
                (WordClass::Adj, vec![a.to_string(), format!("{a}{v}")]),
                (WordClass::Adv, vec![r.to_string()]),
            ]),
            lexicon_sizes: Self::base_sizes(open, 4),
            stem_len: (2, 4),
            head_final: true,
            zipf: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub words: BTreeMap<WordClass, Vec<String>>,
}

impl Lexicon {
    pub fn class_of(&self) -> BTreeMap<&str, WordClass> {
        self.words
            .iter()
            .flat_map(|(&c, ws)| ws.iter().map(move |w| (w.as_str(), c)))
            .collect()
    }
}

/// Distinct random forms for every class. Forms never repeat across
/// classes.
pub fn make_lexicon(spec: &LanguageSpec, seed: u64) -> Result<Lexicon> {
    if spec.stem_alphabet.is_empty() || spec.stem_len.0 == 0 || spec.stem_len.0 > spec.stem_len.1 {
        return Err(Error::invalid("language needs an alphabet and a valid stem length range"));
    }
    let mut r = rng::rng(seed);
    let mut seen = BTreeSet::new();
    let mut words = BTreeMap::new();
    for class in CLASSES {
        let n = spec.lexicon_sizes.get(&class).copied().unwrap_or(0);
        let suffixes = spec.suffixes.get(&class);
        let mut list = Vec::with_capacity(n);
        let mut attempts = 0;
        while list.len() < n {
            attempts += 1;
            if attempts > 1000 * (n + 1) {
                return Err(Error::invalid(format!("cannot draw {n} distinct {class:?} forms")));
            }
            let len = r.random_range(spec.stem_len.0..=spec.stem_len.1);
            let mut w: String = (0..len).map(|_| *spec.stem_alphabet.choose(&mut r).expect("alphabet")).collect();
            if let Some(sfx) = suffixes {
                w.push_str(sfx.choose(&mut r).expect("suffix list"));
            }
            if seen.insert(w.clone()) {
                list.push(w);
            }
        }
        words.insert(class, list);
    }
    Ok(Lexicon { words })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedSentence {
    pub tokens: Vec<String>,
    /// 1-based heads, 0 for the root.
    pub heads: Vec<usize>,
    pub labels: Vec<String>,
    pub classes: Vec<WordClass>,
}

struct Sampler<'a> {
    lex: &'a Lexicon,
    dists: BTreeMap<WordClass, WeightedIndex<f64>>,
}

impl<'a> Sampler<'a> {
    fn new(lex: &'a Lexicon, zipf: f64) -> Result<Self> {
        let mut dists = BTreeMap::new();
        for (&c, ws) in &lex.words {
            if ws.is_empty() {
                continue;
            }
            let w: Vec<f64> = (0..ws.len()).map(|k| 1.0 / ((k + 1) as f64).powf(zipf)).collect();
            dists.insert(c, WeightedIndex::new(w).map_err(|e| Error::invalid(e.to_string()))?);
        }
        Ok(Sampler { lex, dists })
    }

    fn draw(&self, c: WordClass, r: &mut Rng) -> Result<String> {
        let d = self
            .dists
            .get(&c)
            .ok_or_else(|| Error::invalid(format!("lexicon has no {c:?} words")))?;
        Ok(self.lex.words[&c][d.sample(r)].clone())
    }
}

/// Noun phrase as (class, label, attaches-to-noun) items in surface order,
/// with the index of the noun.
fn noun_phrase(head_final: bool, with_case: bool, r: &mut Rng) -> (Vec<(WordClass, &'static str)>, usize) {
    let det = r.random_bool(0.5);
    let n_adj = match r.random::<f64>() {
        x if x < 0.5 => 0,
        x if x < 0.85 => 1,
        _ => 2,
    };
    let mut items = Vec::new();
    let noun;
    if head_final {
        if det {
            items.push((WordClass::Det, "det"));
        }
        for _ in 0..n_adj {
            items.push((WordClass::Adj, "amod"));
        }
        noun = items.len();
        items.push((WordClass::Noun, ""));
        if with_case {
            items.push((WordClass::Case, "case"));
        }
    } else {
        if with_case {
            items.push((WordClass::Case, "case"));
        }
        if det {
            items.push((WordClass::Det, "det"));
        }
        noun = items.len();
        items.push((WordClass::Noun, ""));
        for _ in 0..n_adj {
            items.push((WordClass::Adj, "amod"));
        }
    }
    (items, noun)
}

/// Draw `n` sentences from a language.
pub fn generate(spec: &LanguageSpec, lex: &Lexicon, n: usize, seed: u64) -> Result<Vec<GeneratedSentence>> {
    let sampler = Sampler::new(lex, spec.zipf)?;
    let mut r = rng::rng(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let transitive = r.random_bool(0.6);
        let adverb = r.random_bool(0.3);
        let (subj, subj_n) = noun_phrase(spec.head_final, false, &mut r);
        let obj = transitive.then(|| noun_phrase(spec.head_final, true, &mut r));

        // Lay out constituents; remember where each noun and the verb go.
        let mut slots: Vec<(WordClass, &str, Option<usize>)> = Vec::new();
        let push_np = |slots: &mut Vec<(WordClass, &str, Option<usize>)>,
                       items: &[(WordClass, &'static str)],
                       noun: usize,
                       role: &'static str| {
            let base = slots.len();
            for (k, &(c, l)) in items.iter().enumerate() {
                if k == noun {
                    slots.push((c, role, None));
                } else {
                    slots.push((c, l, Some(base + noun)));
                }
            }
        };
        let verb_at;
        if spec.head_final {
            push_np(&mut slots, &subj, subj_n, "nsubj");
            if let Some((items, noun)) = &obj {
                push_np(&mut slots, items, *noun, "obj");
            }
            if adverb {
                slots.push((WordClass::Adv, "advmod", None));
            }
            verb_at = slots.len();
            slots.push((WordClass::Verb, "root", None));
        } else {
            push_np(&mut slots, &subj, subj_n, "nsubj");
            verb_at = slots.len();
            slots.push((WordClass::Verb, "root", None));
            if let Some((items, noun)) = &obj {
                push_np(&mut slots, items, *noun, "obj");
            }
            if adverb {
                slots.push((WordClass::Adv, "advmod", None));
            }
        }
        let mut sent = GeneratedSentence {
            tokens: Vec::with_capacity(slots.len()),
            heads: Vec::with_capacity(slots.len()),
            labels: Vec::with_capacity(slots.len()),
            classes: Vec::with_capacity(slots.len()),
        };
        for (i, (c, label, head)) in slots.into_iter().enumerate() {
            sent.tokens.push(sampler.draw(c, &mut r)?);
            let h = if i == verb_at {
                0
            } else {
                head.unwrap_or(verb_at) + 1
            };
            sent.heads.push(h);
            sent.labels.push(label.to_string());
            sent.classes.push(c);
        }
        out.push(sent);
    }
    Ok(out)
}

pub fn to_records(sentences: &[GeneratedSentence], doc: &str) -> Vec<SentenceRecord> {
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| SentenceRecord::new(s.tokens.clone(), doc, i))
        .collect()
}

pub fn to_treebank(sentences: &[GeneratedSentence]) -> Result<Vec<TreebankSentence>> {
    sentences
        .iter()
        .map(|s| TreebankSentence::new(&s.tokens, &s.heads, &s.labels))
        .collect()
}

/// Sizes of a generated experiment world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub base_alphabet: String,
    /// Characters used only by the target language.
    pub held_out: [char; 4],
    pub n_base_languages: usize,
    pub base_sentences: usize,
    pub base_open_class: usize,
    pub target_sentences: usize,
    pub target_open_class: usize,
    pub treebank_sentences: usize,
    pub control_sentences: usize,
    pub control_open_class: usize,
    /// Train, validation and test fractions of the target treebank.
    pub split: (f64, f64, f64),
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            base_alphabet: "abdefghiklmnoprstu".into(),
            held_out: ['z', 'x', 'w', 'q'],
            n_base_languages: 2,
            base_sentences: 1500,
            base_open_class: 60,
            target_sentences: 1500,
            target_open_class: 120,
            treebank_sentences: 300,
            control_sentences: 300,
            control_open_class: 8,
            split: (0.8, 0.1, 0.1),
            seed: 7,
        }
    }
}

pub struct World {
    pub base_corpus: Vec<SentenceRecord>,
    pub target_corpus: Vec<SentenceRecord>,
    pub target_treebank: Vec<TreebankSentence>,
    /// Small-lexicon version of the target grammar whose words all occur
    /// in its own training split.
    pub control_treebank: Vec<TreebankSentence>,
    pub target_spec: LanguageSpec,
    pub target_lexicon: Lexicon,
}

pub fn build_world(cfg: &WorldConfig) -> Result<World> {
    let mut base_corpus = Vec::new();
    for k in 0..cfg.n_base_languages {
        let spec = LanguageSpec::base(&format!("base{k}"), &cfg.base_alphabet, cfg.base_open_class);
        let lex = make_lexicon(&spec, rng::derive(cfg.seed, 100 + k as u64))?;
        let sents = generate(&spec, &lex, cfg.base_sentences, rng::derive(cfg.seed, 200 + k as u64))?;
        base_corpus.extend(to_records(&sents, &spec.name));
    }
    let target_spec = LanguageSpec::target("target", &cfg.base_alphabet, cfg.held_out, cfg.target_open_class);
    let target_lexicon = make_lexicon(&target_spec, rng::derive(cfg.seed, 300))?;
    let unlabeled = generate(&target_spec, &target_lexicon, cfg.target_sentences, rng::derive(cfg.seed, 301))?;
    let labeled = generate(&target_spec, &target_lexicon, cfg.treebank_sentences, rng::derive(cfg.seed, 302))?;
    let control_spec = LanguageSpec::target("control", &cfg.base_alphabet, cfg.held_out, cfg.control_open_class);
    let control_lex = make_lexicon(&control_spec, rng::derive(cfg.seed, 400))?;
    let control = generate(&control_spec, &control_lex, cfg.control_sentences, rng::derive(cfg.seed, 401))?;
    Ok(World {
        base_corpus,
        target_corpus: to_records(&unlabeled, "target"),
        target_treebank: to_treebank(&labeled)?,
        control_treebank: to_treebank(&control)?,
        target_spec,
        target_lexicon,
    })
}

/// Paths of a world written to disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldFiles {
    pub base_corpus: PathBuf,
    pub target_corpus: PathBuf,
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub control_train: PathBuf,
    pub control_valid: PathBuf,
}

/// Write corpora as one sentence per line and the treebanks as CoNLL-U.
/// The control treebank is split 80/20 with no test part.
pub fn write_world(world: &World, dir: &Path, split: (f64, f64, f64), split_seed: u64) -> Result<WorldFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = WorldFiles {
        base_corpus: dir.join("base.txt"),
        target_corpus: dir.join("target.txt"),
        train: dir.join("train.conllu"),
        valid: dir.join("valid.conllu"),
        test: dir.join("test.conllu"),
        control_train: dir.join("control-train.conllu"),
        control_valid: dir.join("control-valid.conllu"),
    };
    write_sentences(&files.base_corpus, &world.base_corpus)?;
    write_sentences(&files.target_corpus, &world.target_corpus)?;
    let (train, valid, test) = split_treebank(&world.target_treebank, split, split_seed)?;
    write_conllu(&files.train, &train)?;
    write_conllu(&files.valid, &valid)?;
    write_conllu(&files.test, &test)?;
    let (ctrain, cvalid, _) = split_treebank(&world.control_treebank, (0.8, 0.2, 0.0), split_seed)?;
    write_conllu(&files.control_train, &ctrain)?;
    write_conllu(&files.control_valid, &cvalid)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::check_heads;

    #[test]
    fn generated_trees_are_valid_and_head_final() {
        let spec = LanguageSpec::target("t", "abcde", ['z', 'x', 'w', 'q'], 20);
        let lex = make_lexicon(&spec, 1).unwrap();
        let sents = generate(&spec, &lex, 200, 2).unwrap();
        for s in &sents {
            check_heads(&s.heads, true).unwrap();
            assert_eq!(*s.heads.last().unwrap(), 0);
            for (i, (&h, l)) in s.heads.iter().zip(&s.labels).enumerate() {
                if l != "case" && h != 0 {
                    assert!(h > i + 1, "dependent {} before head {h} in {:?}", i + 1, s);
                }
            }
        }
    }

    #[test]
    fn base_languages_avoid_held_out_characters() {
        let w = build_world(&WorldConfig {
            base_sentences: 100,
            target_sentences: 100,
            treebank_sentences: 50,
            control_sentences: 50,
            ..Default::default()
        })
        .unwrap();
        let held: Vec<char> = vec!['z', 'x', 'w', 'q'];
        assert!(w.base_corpus.iter().flat_map(|s| &s.tokens).all(|t| !t.chars().any(|c| held.contains(&c))));
        assert!(w.target_corpus.iter().flat_map(|s| &s.tokens).any(|t| t.chars().any(|c| held.contains(&c))));
        assert_eq!(w.target_treebank.len(), 50);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = LanguageSpec::base("b", "abc", 10);
        let lex = make_lexicon(&spec, 3).unwrap();
        assert_eq!(generate(&spec, &lex, 20, 4).unwrap(), generate(&spec, &lex, 20, 4).unwrap());
        assert_eq!(lex.class_of().len(), lex.words.values().map(Vec::len).sum::<usize>());
    }
}

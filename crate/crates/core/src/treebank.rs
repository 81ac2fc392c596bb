//! CoNLL-U input and output, train/valid/test splitting and attachment
//! scores.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::decode::check_heads;
use crate::par::{self, Parallelism};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreebankSentence {
    /// `#` lines, verbatim.
    pub comments: Vec<String>,
    /// The ten columns of each word line.
    pub rows: Vec<[String; 10]>,
    /// Multiword-token and empty-node lines with the number of word lines
    /// that precede them; kept so output mirrors input.
    pub extra: Vec<(usize, String)>,
}

const ID: usize = 0;
const FORM: usize = 1;
const HEAD: usize = 6;
const DEPREL: usize = 7;

impl TreebankSentence {
    /// A sentence with only forms, heads and relations filled in.
    pub fn new<S: AsRef<str>>(tokens: &[S], heads: &[usize], labels: &[S]) -> Result<Self> {
        if tokens.len() != heads.len() || tokens.len() != labels.len() {
            return Err(Error::Shape("tokens, heads and labels differ in length".into()));
        }
        let rows = (0..tokens.len())
            .map(|i| {
                let mut row: [String; 10] = std::array::from_fn(|_| "_".to_string());
                row[ID] = (i + 1).to_string();
                row[FORM] = tokens[i].as_ref().to_string();
                row[HEAD] = heads[i].to_string();
                row[DEPREL] = labels[i].as_ref().to_string();
                row
            })
            .collect();
        Ok(TreebankSentence {
            comments: Vec::new(),
            rows,
            extra: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn tokens(&self) -> Vec<&str> {
        self.rows.iter().map(|r| r[FORM].as_str()).collect()
    }

    /// Heads as numbers; rows are validated on read, so this cannot fail
    /// for parsed input.
    pub fn heads(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r[HEAD].parse().unwrap_or(0)).collect()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.rows.iter().map(|r| r[DEPREL].as_str()).collect()
    }

    /// Copy with HEAD and DEPREL replaced.
    pub fn with_prediction<S: AsRef<str>>(&self, heads: &[usize], labels: &[S]) -> Result<Self> {
        if heads.len() != self.len() || labels.len() != self.len() {
            return Err(Error::Shape(format!(
                "prediction for {} tokens given for a sentence of {}",
                heads.len(),
                self.len()
            )));
        }
        let mut out = self.clone();
        for (i, row) in out.rows.iter_mut().enumerate() {
            row[HEAD] = heads[i].to_string();
            row[DEPREL] = labels[i].as_ref().to_string();
        }
        Ok(out)
    }
}

pub fn parse_conllu(text: &str, origin: &str) -> Result<Vec<TreebankSentence>> {
    let err = |line: usize, message: String| Error::Format {
        path: origin.to_string(),
        line,
        message,
    };
    let mut out = Vec::new();
    let mut cur = TreebankSentence {
        comments: Vec::new(),
        rows: Vec::new(),
        extra: Vec::new(),
    };
    let mut start_line = 1;
    let mut finish = |cur: &mut TreebankSentence, start: usize| -> Result<()> {
        if cur.rows.is_empty() && cur.comments.is_empty() && cur.extra.is_empty() {
            return Ok(());
        }
        let heads = cur.heads();
        check_heads(&heads, false).map_err(|e| err(start, format!("bad tree: {e}")))?;
        out.push(std::mem::replace(
            cur,
            TreebankSentence {
                comments: Vec::new(),
                rows: Vec::new(),
                extra: Vec::new(),
            },
        ));
        Ok(())
    };
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            finish(&mut cur, start_line)?;
            start_line = lineno + 1;
            continue;
        }
        if line.starts_with('#') {
            cur.comments.push(line.to_string());
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(err(lineno, format!("expected 10 columns, found {}", cols.len())));
        }
        if cols[ID].contains('-') || cols[ID].contains('.') {
            cur.extra.push((cur.rows.len(), line.to_string()));
            continue;
        }
        let id: usize = cols[ID].parse().map_err(|_| err(lineno, format!("bad ID {:?}", cols[ID])))?;
        if id != cur.rows.len() + 1 {
            return Err(err(lineno, format!("ID {id} out of sequence")));
        }
        cols[HEAD]
            .parse::<usize>()
            .map_err(|_| err(lineno, format!("bad HEAD {:?}", cols[HEAD])))?;
        cur.rows.push(std::array::from_fn(|k| cols[k].to_string()));
    }
    finish(&mut cur, start_line)?;
    Ok(out)
}

pub fn read_conllu(path: &Path) -> Result<Vec<TreebankSentence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conllu(&text, &path.display().to_string())
}

pub fn format_conllu(sentences: &[TreebankSentence]) -> String {
    let mut s = String::new();
    for sent in sentences {
        for c in &sent.comments {
            s.push_str(c);
            s.push('\n');
        }
        let mut extra = sent.extra.iter().peekable();
        for (i, row) in sent.rows.iter().enumerate() {
            while let Some((_, line)) = extra.next_if(|(at, _)| *at == i) {
                s.push_str(line);
                s.push('\n');
            }
            let _ = writeln!(s, "{}", row.join("\t"));
        }
        for (_, line) in extra {
            s.push_str(line);
            s.push('\n');
        }
        s.push('\n');
    }
    s
}

pub fn write_conllu(path: &Path, sentences: &[TreebankSentence]) -> Result<()> {
    fs::write(path, format_conllu(sentences)).map_err(|e| Error::io(path, e))
}

/// Shuffle and cut into train/valid/test. Valid and test sizes are
/// `floor(ratio · N)`; train takes the remainder.
pub fn split_treebank(
    sentences: &[TreebankSentence],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<TreebankSentence>, Vec<TreebankSentence>, Vec<TreebankSentence>)> {
    if sentences.is_empty() {
        return Err(Error::invalid("cannot split an empty treebank"));
    }
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {a}, {b}, {c} must be in [0,1] and sum to 1")));
    }
    let n = sentences.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(seed));
    let n_valid = (b * n as f64 + 1e-9).floor() as usize;
    let n_test = (c * n as f64 + 1e-9).floor() as usize;
    let n_train = n - n_valid - n_test;
    let pick = |idx: &[usize]| idx.iter().map(|&i| sentences[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_valid]),
        pick(&order[n_train + n_valid..]),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub uas: f64,
    pub las: f64,
    pub n_tokens: usize,
}

/// Corpus-level attachment scores over all tokens.
pub fn score(predicted: &[TreebankSentence], gold: &[TreebankSentence], mode: Parallelism) -> Result<ScoreReport> {
    if predicted.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predicted sentences for {} gold",
            predicted.len(),
            gold.len()
        )));
    }
    let counts = par::try_map(mode, gold, |i, g| -> Result<(usize, usize, usize)> {
        let p = &predicted[i];
        if p.len() != g.len() {
            return Err(Error::Shape(format!("sentence {i}: {} vs {} tokens", p.len(), g.len())));
        }
        let (mut u, mut l) = (0, 0);
        for (pr, gr) in p.rows.iter().zip(&g.rows) {
            if pr[HEAD] == gr[HEAD] {
                u += 1;
                if pr[DEPREL] == gr[DEPREL] {
                    l += 1;
                }
            }
        }
        Ok((u, l, g.len()))
    })?;
    let (u, l, n) = counts
        .into_iter()
        .fold((0, 0, 0), |(a, b, c), (x, y, z)| (a + x, b + y, c + z));
    if n == 0 {
        return Err(Error::invalid("no tokens to score"));
    }
    Ok(ScoreReport {
        uas: 100.0 * u as f64 / n as f64,
        las: 100.0 * l as f64 / n as f64,
        n_tokens: n,
    })
}

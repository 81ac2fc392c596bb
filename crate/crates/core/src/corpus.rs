//! Unlabeled corpus preparation: document cleaning, article subsampling,
//! evaluation-overlap and length filtering, rule-based tokenization, and
//! wordpiece statistics.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::par::{self, Parallelism};
use crate::rng;
use crate::wordpiece::{tokenize_word, Vocabulary};
use crate::{Error, Result};

/// A source document: a Wikipedia article or a forum dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub doc_id: String,
    pub lines: Vec<String>,
    /// Whether consecutive sentences form running text.
    pub contiguous: bool,
}

impl RawDocument {
    pub fn new(doc_id: impl Into<String>, lines: Vec<String>, contiguous: bool) -> Self {
        RawDocument {
            doc_id: doc_id.into(),
            lines,
            contiguous,
        }
    }
}

/// One tokenized sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub tokens: Vec<String>,
    pub source_doc: String,
    pub index_in_doc: usize,
}

impl SentenceRecord {
    pub fn new(tokens: Vec<String>, source_doc: impl Into<String>, index_in_doc: usize) -> Self {
        SentenceRecord {
            tokens,
            source_doc: source_doc.into(),
            index_in_doc,
        }
    }

    /// A record with no provenance, for in-memory corpora.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        SentenceRecord::new(
            tokens.iter().map(|t| t.as_ref().to_owned()).collect(),
            "",
            0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_sentences: usize,
    pub n_tokens: usize,
    pub wp_per_token: f64,
    pub unk_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// Extracted encyclopedia dump; documents are contiguous articles.
    Wiki,
    /// One sentence per line, no surrounding context.
    Forum,
}

fn tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<[^<>]*>").unwrap())
}

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(=+[^=].*=+|#+\s.*)\s*$").unwrap())
}

fn category_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(\[\[)?\s*Category\s*:").unwrap())
}

fn punct_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\p{P}").unwrap())
}

fn is_doc_delimiter(line: &str) -> bool {
    let t = line.trim();
    t.starts_with("<doc") || t == "</doc>"
}

fn is_header(line: &str) -> bool {
    header_re().is_match(line)
}

fn is_category(line: &str) -> bool {
    category_re().is_match(line)
}

fn strip_tags(line: &str) -> String {
    let mut cur = line.to_owned();
    loop {
        let next = tag_re().replace_all(&cur, " ").into_owned();
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Remove markup remnants from an extracted article and split it into
/// sentences at periods.
///
/// Dropped: `<doc ...>`/`</doc>` delimiter lines, the title line directly
/// following a `<doc>` opener, `== headers ==` and `# headers`, category
/// lines, and every angle-bracket tag. The split periods themselves are
/// not kept.
pub fn clean_wiki_document(doc: &RawDocument) -> Vec<String> {
    let mut out = Vec::new();
    let mut expect_title = false;
    for line in &doc.lines {
        if is_doc_delimiter(line) {
            expect_title = line.trim().starts_with("<doc");
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if expect_title {
            expect_title = false;
            continue;
        }
        if is_header(line) || is_category(line) {
            continue;
        }
        let text = strip_tags(line);
        for piece in text.split('.') {
            let sentence = collapse_ws(piece);
            if sentence.is_empty()
                || is_doc_delimiter(&sentence)
                || is_header(&sentence)
                || is_category(&sentence)
            {
                continue;
            }
            out.push(sentence);
        }
    }
    out
}

/// Select `round(fraction · N)` whole documents uniformly without
/// replacement. The selection keeps the input order.
pub fn subsample_articles(
    docs: &[RawDocument],
    fraction: f64,
    seed: u64,
) -> Result<Vec<RawDocument>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!(
            "sample fraction {fraction} outside [0, 1]"
        )));
    }
    let k = (fraction * docs.len() as f64).round() as usize;
    let mut idx: Vec<usize> = (0..docs.len()).collect();
    idx.shuffle(&mut rng::rng(seed));
    let mut chosen = idx[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| docs[i].clone()).collect())
}

/// Sentence-level filtering options.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LengthFilter {
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for LengthFilter {
    fn default() -> Self {
        LengthFilter {
            min_len: 5,
            max_len: 50,
        }
    }
}

/// Drop sentences that occur verbatim (token-for-token, case-sensitive) in
/// an evaluation set, and optionally sentences outside `[min_len, max_len]`
/// tokens. Survivors keep their order.
pub fn filter_sentences(
    sentences: Vec<SentenceRecord>,
    eval_sentences: &HashSet<Vec<String>>,
    length: Option<LengthFilter>,
) -> Vec<SentenceRecord> {
    sentences
        .into_iter()
        .filter(|s| {
            if let Some(f) = length {
                if s.tokens.len() < f.min_len || s.tokens.len() > f.max_len {
                    return false;
                }
            }
            !eval_sentences.contains(&s.tokens)
        })
        .collect()
}

/// Split on whitespace, then split every punctuation character (Unicode
/// category P*) into its own token.
pub fn basic_tokenize(text: &str) -> Vec<String> {
    let re = punct_re();
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        for ch in chunk.chars() {
            let mut buf = [0u8; 4];
            if re.is_match(ch.encode_utf8(&mut buf)) {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(ch.to_string());
            } else {
                current.push(ch);
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

/// Wordpieces-per-token and unknown-token statistics under `vocab`.
pub fn compute_corpus_stats(corpus: &[SentenceRecord], vocab: &Vocabulary) -> Result<CorpusStats> {
    let per_sentence = par::try_map(Parallelism::default(), corpus, |_, s| {
        let mut pieces = 0usize;
        let mut unk = 0usize;
        for tok in &s.tokens {
            let tw = tokenize_word(tok, vocab)?;
            pieces += tw.piece_ids.len();
            unk += usize::from(tw.unk_count > 0);
        }
        Ok::<_, Error>((s.tokens.len(), pieces, unk))
    })?;
    let (n_tokens, n_pieces, unk_tokens) = per_sentence
        .into_iter()
        .fold((0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    if n_tokens == 0 {
        return Err(Error::invalid("corpus statistics over an empty corpus"));
    }
    Ok(CorpusStats {
        n_sentences: corpus.len(),
        n_tokens,
        wp_per_token: n_pieces as f64 / n_tokens as f64,
        unk_tokens,
    })
}

/// Clean, tokenize and filter a set of documents. Documents are processed
/// in parallel; output follows document order.
pub fn prepare_corpus(
    docs: &[RawDocument],
    format: CorpusFormat,
    eval_sentences: &HashSet<Vec<String>>,
    length: LengthFilter,
) -> Vec<SentenceRecord> {
    let per_doc = par::map(Parallelism::default(), docs, |_, doc| {
        let sentences = match format {
            CorpusFormat::Wiki => clean_wiki_document(doc),
            CorpusFormat::Forum => doc
                .lines
                .iter()
                .map(|l| collapse_ws(l))
                .filter(|l| !l.is_empty())
                .collect(),
        };
        sentences
            .iter()
            .enumerate()
            .map(|(i, s)| SentenceRecord::new(basic_tokenize(s), doc.doc_id.clone(), i))
            .filter(|r| !r.tokens.is_empty())
            .collect::<Vec<_>>()
    });
    let all: Vec<SentenceRecord> = per_doc.into_iter().flatten().collect();
    let length = match format {
        CorpusFormat::Forum => Some(length),
        CorpusFormat::Wiki => None,
    };
    filter_sentences(all, eval_sentences, length)
}

#[derive(Deserialize)]
struct JsonDoc {
    doc_id: String,
    text: String,
}

/// Read a dump file.
///
/// Accepted layouts: JSON lines with `doc_id` and `text` fields; extracted
/// text with `<doc ...>` ... `</doc>` blocks; plain text with documents
/// separated by blank lines. For [`CorpusFormat::Forum`] every non-empty
/// line becomes a one-sentence document.
pub fn read_documents(path: &Path, format: CorpusFormat) -> Result<Vec<RawDocument>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_documents(&text, format, &path.display().to_string())
}

pub fn parse_documents(text: &str, format: CorpusFormat, origin: &str) -> Result<Vec<RawDocument>> {
    let contiguous = format == CorpusFormat::Wiki;
    if format == CorpusFormat::Forum {
        return Ok(text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| RawDocument::new(format!("line{i}"), vec![l.to_owned()], false))
            .collect());
    }
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if first.trim_start().starts_with('{') {
        let mut docs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let d: JsonDoc = serde_json::from_str(line).map_err(|e| Error::Format {
                path: origin.to_owned(),
                line: n + 1,
                message: e.to_string(),
            })?;
            docs.push(RawDocument::new(
                d.doc_id,
                d.text.lines().map(str::to_owned).collect(),
                contiguous,
            ));
        }
        return Ok(docs);
    }
    let mut docs = Vec::new();
    if text.lines().any(|l| l.trim_start().starts_with("<doc")) {
        let mut current: Option<Vec<String>> = None;
        for line in text.lines() {
            let t = line.trim();
            if t.starts_with("<doc") {
                current = Some(vec![line.to_owned()]);
            } else if t == "</doc>" {
                if let Some(mut lines) = current.take() {
                    lines.push(line.to_owned());
                    docs.push(RawDocument::new(format!("doc{}", docs.len()), lines, contiguous));
                }
            } else if let Some(lines) = current.as_mut() {
                lines.push(line.to_owned());
            }
        }
        return Ok(docs);
    }
    let mut lines = Vec::new();
    for line in text.lines().chain(std::iter::once("")) {
        if line.trim().is_empty() {
            if !lines.is_empty() {
                docs.push(RawDocument::new(
                    format!("doc{}", docs.len()),
                    std::mem::take(&mut lines),
                    contiguous,
                ));
            }
        } else {
            lines.push(line.to_owned());
        }
    }
    Ok(docs)
}

/// Read a file with one space-separated tokenized sentence per line.
pub fn read_sentences(path: &Path) -> Result<Vec<SentenceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            SentenceRecord::new(
                l.split_whitespace().map(str::to_owned).collect(),
                origin.clone(),
                i,
            )
        })
        .collect())
}

pub fn write_sentences(path: &Path, sentences: &[SentenceRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in sentences {
        writeln!(w, "{}", s.tokens.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(lines: &[&str]) -> RawDocument {
        RawDocument::new("d", lines.iter().map(|s| s.to_string()).collect(), true)
    }

    #[test]
    fn cleaning_removes_markup_and_splits() {
        let d = doc(&["<br>", "== History ==", "A b. C d."]);
        assert_eq!(clean_wiki_document(&d), vec!["A b", "C d"]);
    }

    #[test]
    fn cleaning_handles_extractor_layout() {
        let d = doc(&[
            "<doc id=\"1\" title=\"T\">",
            "T",
            "",
            "First one. Second <b>bold</b> one.",
            "Category:Things",
            "</doc>",
        ]);
        assert_eq!(
            clean_wiki_document(&d),
            vec!["First one", "Second bold one"]
        );
    }

    #[test]
    fn cleaning_edge_cases() {
        assert!(clean_wiki_document(&doc(&[])).is_empty());
        assert_eq!(
            clean_wiki_document(&doc(&["One sentence without period"])),
            vec!["One sentence without period"]
        );
        assert_eq!(clean_wiki_document(&doc(&["<<a>b>x"])), vec!["x"]);
    }

    #[test]
    fn subsample_sizes_and_determinism() {
        let docs: Vec<_> = (0..100)
            .map(|i| RawDocument::new(format!("d{i}"), vec![format!("s{i}")], true))
            .collect();
        assert_eq!(subsample_articles(&docs, 1.0, 3).unwrap(), docs);
        let a = subsample_articles(&docs, 0.05, 3).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, subsample_articles(&docs, 0.05, 3).unwrap());
        assert!(subsample_articles(&docs, 1.5, 3).is_err());
        assert!(subsample_articles(&docs, -0.1, 3).is_err());
    }

    #[test]
    fn length_and_overlap_filtering() {
        let s4 = SentenceRecord::from_tokens(&["a", "b", "c", "d"]);
        let s5 = SentenceRecord::from_tokens(&["a", "b", "c", "d", "e"]);
        let s51 = SentenceRecord::from_tokens(&vec!["x"; 51]);
        let s50 = SentenceRecord::from_tokens(&vec!["x"; 50]);
        let dup = SentenceRecord::from_tokens(&["v", "a", "l", "i", "d"]);
        let eval: HashSet<Vec<String>> = [dup.tokens.clone()].into_iter().collect();
        let kept = filter_sentences(
            vec![s4.clone(), s5.clone(), dup.clone(), s51, s50.clone()],
            &eval,
            Some(LengthFilter::default()),
        );
        assert_eq!(kept, vec![s5.clone(), s50]);
        let kept = filter_sentences(vec![s4.clone(), dup, s5.clone()], &eval, None);
        assert_eq!(kept, vec![s4, s5]);
    }

    #[test]
    fn overlap_is_case_sensitive() {
        let eval: HashSet<Vec<String>> = [vec!["Hello".to_string()]].into_iter().collect();
        let kept = filter_sentences(vec![SentenceRecord::from_tokens(&["hello"])], &eval, None);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(basic_tokenize("Hello, world!"), vec!["Hello", ",", "world", "!"]);
        assert!(basic_tokenize("").is_empty());
        assert_eq!(basic_tokenize("a   b"), vec!["a", "b"]);
        assert_eq!(basic_tokenize("«ok»—x"), vec!["«", "ok", "»", "—", "x"]);
    }

    #[test]
    fn parses_blank_line_and_json_dumps() {
        let docs = parse_documents("a. b.\nc.\n\n\nd.\n", CorpusFormat::Wiki, "t").unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].lines, vec!["a. b.", "c."]);
        let docs = parse_documents(
            "{\"doc_id\":\"x\",\"text\":\"l1\\nl2\"}\n{\"doc_id\":\"y\",\"text\":\"z\"}\n",
            CorpusFormat::Wiki,
            "t",
        )
        .unwrap();
        assert_eq!(docs[0].doc_id, "x");
        assert_eq!(docs[0].lines.len(), 2);
        let docs = parse_documents("one\n\ntwo\n", CorpusFormat::Forum, "t").unwrap();
        assert_eq!(docs.len(), 2);
        assert!(!docs[0].contiguous);
    }

    proptest! {
        #[test]
        fn cleaning_is_idempotent(lines in proptest::collection::vec("[a-c <>=./#]{0,20}", 0..6)) {
            let d = RawDocument::new("d", lines, true);
            let once = clean_wiki_document(&d);
            let twice = clean_wiki_document(&RawDocument::new("d", once.clone(), true));
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn filtering_preserves_order(lens in proptest::collection::vec(1usize..60, 0..30)) {
            let sents: Vec<_> = lens
                .iter()
                .enumerate()
                .map(|(i, &n)| SentenceRecord::new(vec!["w".to_string(); n], "d", i))
                .collect();
            let kept = filter_sentences(sents, &HashSet::new(), Some(LengthFilter::default()));
            prop_assert!(kept.windows(2).all(|w| w[0].index_in_doc < w[1].index_in_doc));
            prop_assert!(kept.iter().all(|s| (5..=50).contains(&s.tokens.len())));
        }

        #[test]
        fn subsample_size_is_rounded(n in 0usize..200, f in 0.0f64..=1.0, seed in any::<u64>()) {
            let docs: Vec<_> = (0..n).map(|i| RawDocument::new(format!("{i}"), vec![], true)).collect();
            let s = subsample_articles(&docs, f, seed).unwrap();
            prop_assert_eq!(s.len(), (f * n as f64).round() as usize);
        }

        #[test]
        fn tokens_have_no_whitespace(text in "\\PC{0,40}") {
            let toks = basic_tokenize(&text);
            prop_assert!(toks.iter().all(|t| !t.is_empty() && !t.chars().any(char::is_whitespace)));
        }
    }
}

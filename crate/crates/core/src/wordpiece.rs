//! Wordpiece vocabularies: training by frequent-pair merging, greedy
//! longest-match tokenization, and the one-piece-per-line file format.
//!
//! Layout of a freshly built vocabulary:
//!
//! | ids        | pieces                           |
//! |------------|----------------------------------|
//! | 0          | `[PAD]`                          |
//! | 1..=99     | `[unused0]` .. `[unused98]`      |
//! | 100..=103  | `[UNK]` `[CLS]` `[SEP]` `[MASK]` |
//! | 104..      | characters, then merged pieces   |

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::SentenceRecord;
use crate::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const CONTINUATION: &str = "##";
pub const N_UNUSED: usize = 99;
pub const N_SPECIAL: usize = 5;
/// Longest piece considered during matching and training, in characters.
pub const MAX_PIECE_CHARS: usize = 100;

pub fn unused_name(i: usize) -> String {
    format!("[unused{i}]")
}

/// How characters that no piece covers are reported.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnkPolicy {
    /// One `[UNK]` per uncovered character; the rest of the word is still
    /// segmented.
    #[default]
    PerCharacter,
    /// Any uncovered character turns the whole word into a single `[UNK]`.
    WholeWord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: usize,
    pub unk: usize,
    pub cls: usize,
    pub sep: usize,
    pub mask: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    id_of: HashMap<String, usize>,
    special: SpecialIds,
    unused_slot_ids: Vec<usize>,
    unk_policy: UnkPolicy,
}

/// A word and its wordpiece segmentation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedWord {
    pub word: String,
    pub piece_ids: Vec<usize>,
    pub unk_count: usize,
}

impl Vocabulary {
    /// Build a vocabulary from an ordered piece list. All five special
    /// tokens must be present; unused slots are recognized by name.
    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        let mut id_of = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::invalid(format!("empty piece at id {i}")));
            }
            if id_of.insert(p.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate piece {p:?}")));
            }
        }
        let find = |s: &str| {
            id_of
                .get(s)
                .copied()
                .ok_or_else(|| Error::invalid(format!("vocabulary lacks {s}")))
        };
        let special = SpecialIds {
            pad: find(PAD)?,
            unk: find(UNK)?,
            cls: find(CLS)?,
            sep: find(SEP)?,
            mask: find(MASK)?,
        };
        let unused_slot_ids = (0..N_UNUSED)
            .filter_map(|i| id_of.get(&unused_name(i)).copied())
            .collect();
        Ok(Vocabulary {
            pieces,
            id_of,
            special,
            unused_slot_ids,
            unk_policy: UnkPolicy::default(),
        })
    }

    /// The reserved inventory (specials and unused slots) followed by
    /// `extra` pieces.
    pub fn with_reserved<I, S>(extra: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut pieces = vec![PAD.to_owned()];
        pieces.extend((0..N_UNUSED).map(unused_name));
        pieces.extend([UNK, CLS, SEP, MASK].map(str::to_owned));
        pieces.extend(extra.into_iter().map(Into::into));
        Vocabulary::from_pieces(pieces)
    }

    pub fn with_unk_policy(mut self, policy: UnkPolicy) -> Self {
        self.unk_policy = policy;
        self
    }

    pub fn unk_policy(&self) -> UnkPolicy {
        self.unk_policy
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn piece(&self, id: usize) -> &str {
        &self.pieces[id]
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.id_of.get(piece).copied()
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.id_of.contains_key(piece)
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn is_special(&self, id: usize) -> bool {
        let s = self.special;
        id == s.pad || id == s.unk || id == s.cls || id == s.sep || id == s.mask
    }

    /// Ids of the reserved slots, in slot order, whether or not they have
    /// been repurposed.
    pub fn unused_slot_ids(&self) -> &[usize] {
        &self.unused_slot_ids
    }

    /// Slot ids still holding their `[unusedN]` placeholder.
    pub fn remaining_unused(&self) -> Vec<usize> {
        self.unused_slot_ids
            .iter()
            .copied()
            .filter(|&id| self.is_unreplaced_slot(id))
            .collect()
    }

    fn is_unreplaced_slot(&self, id: usize) -> bool {
        let p = &self.pieces[id];
        p.starts_with("[unused") && p.ends_with(']')
    }

    /// Whether `piece` may be produced by tokenization.
    fn matchable(&self, piece: &str) -> Option<usize> {
        let id = self.id(piece)?;
        if self.is_special(id) || self.is_unreplaced_slot(id) {
            None
        } else {
            Some(id)
        }
    }

    /// Replace the pieces held by slot `slot_ids[i]` with `pieces[i]`.
    pub(crate) fn replace_slots(&self, slot_ids: &[usize], pieces: &[String]) -> Result<Self> {
        let mut new = self.pieces.clone();
        for (&id, p) in slot_ids.iter().zip(pieces) {
            new[id] = p.clone();
        }
        let mut v = Vocabulary::from_pieces(new)?;
        v.unused_slot_ids = self.unused_slot_ids.clone();
        v.unk_policy = self.unk_policy;
        Ok(v)
    }

    /// SHA-256 over the piece list, used to tie checkpoints to vocabularies.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.pieces {
            h.update(p.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// One piece per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.pieces.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_pieces(text.lines().map(str::to_owned).collect())
    }
}

fn strip_continuation(p: &str) -> &str {
    p.strip_prefix(CONTINUATION).unwrap_or(p)
}

/// Greedy longest-match-first segmentation of one word.
pub fn tokenize_word(word: &str, vocab: &Vocabulary) -> Result<TokenizedWord> {
    if word.is_empty() {
        return Err(Error::invalid("cannot tokenize an empty word"));
    }
    if word.chars().any(char::is_whitespace) {
        return Err(Error::invalid(format!("word {word:?} contains whitespace")));
    }
    let chars: Vec<char> = word.chars().collect();
    let unk = vocab.special.unk;
    let mut ids = Vec::new();
    let mut unk_count = 0;
    let mut start = 0;
    let mut candidate = String::new();
    while start < chars.len() {
        let max_end = chars.len().min(start + MAX_PIECE_CHARS);
        let mut found = None;
        for end in (start + 1..=max_end).rev() {
            candidate.clear();
            if start > 0 {
                candidate.push_str(CONTINUATION);
            }
            candidate.extend(&chars[start..end]);
            if let Some(id) = vocab.matchable(&candidate) {
                found = Some((id, end));
                break;
            }
        }
        match found {
            Some((id, end)) => {
                ids.push(id);
                start = end;
            }
            None => {
                ids.push(unk);
                unk_count += 1;
                start += 1;
            }
        }
    }
    if unk_count > 0 && vocab.unk_policy == UnkPolicy::WholeWord {
        ids = vec![unk];
        unk_count = 1;
    }
    Ok(TokenizedWord {
        word: word.to_owned(),
        piece_ids: ids,
        unk_count,
    })
}

/// A `(start, len)` span of pieces belonging to one input token.
pub type Span = (usize, usize);

/// Concatenated segmentation of a token sequence, with the span of pieces
/// produced by each token.
pub fn tokenize_sentence<S: AsRef<str>>(
    tokens: &[S],
    vocab: &Vocabulary,
) -> Result<(Vec<usize>, Vec<Span>)> {
    let mut ids = Vec::new();
    let mut spans = Vec::with_capacity(tokens.len());
    for t in tokens {
        let tw = tokenize_word(t.as_ref(), vocab)?;
        spans.push((ids.len(), tw.piece_ids.len()));
        ids.extend(tw.piece_ids);
    }
    Ok((ids, spans))
}

/// Number of corpus tokens whose segmentation contains an unknown piece.
pub fn count_unknowns(corpus: &[SentenceRecord], vocab: &Vocabulary) -> Result<usize> {
    let mut cache: HashMap<&str, bool> = HashMap::new();
    let mut n = 0;
    for s in corpus {
        for t in &s.tokens {
            let has_unk = match cache.get(t.as_str()) {
                Some(&b) => b,
                None => {
                    let b = tokenize_word(t, vocab)?.unk_count > 0;
                    cache.insert(t, b);
                    b
                }
            };
            n += usize::from(has_unk);
        }
    }
    Ok(n)
}

/// Distinct words with their corpus frequencies, in sorted order.
pub fn word_counts(corpus: &[SentenceRecord]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in corpus {
        for t in &s.tokens {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
    }
    counts
}

fn merged_piece(left: &str, right: &str) -> String {
    let mut s = String::with_capacity(left.len() + right.len());
    s.push_str(left);
    s.push_str(strip_continuation(right));
    s
}

fn piece_chars(p: &str) -> usize {
    strip_continuation(p).chars().count()
}

/// Train a wordpiece vocabulary of exactly `target_size` pieces, or fewer
/// learned pieces if merging stalls.
///
/// Every observed character is added in both word-initial and `##` form.
/// Learned pieces come from repeatedly merging the adjacent symbol pair with
/// the highest frequency (weighted by word count). Ties go to the pair whose
/// left symbol is more frequent, then to the lexicographically smaller
/// merged piece. Merging stops at `target_size` or when no pair occurs at
/// least twice; a stalled vocabulary is padded to `target_size` with
/// never-matched `[unusedN]` placeholders numbered from 99 upward.
pub fn train_vocabulary(corpus: &[SentenceRecord], target_size: usize) -> Result<Vocabulary> {
    let counts = word_counts(corpus);
    if counts.is_empty() {
        return Err(Error::invalid("cannot train a vocabulary on an empty corpus"));
    }
    let mut alphabet = BTreeSet::new();
    for w in counts.keys() {
        for ch in w.chars() {
            alphabet.insert(ch);
        }
    }
    let mut pieces: Vec<String> = Vec::new();
    for &ch in &alphabet {
        pieces.push(ch.to_string());
    }
    for &ch in &alphabet {
        pieces.push(format!("{CONTINUATION}{ch}"));
    }
    let forced = N_SPECIAL + N_UNUSED + pieces.len();
    if target_size < forced {
        return Err(Error::invalid(format!(
            "target size {target_size} below forced inventory of {forced} pieces"
        )));
    }
    let mut known: BTreeSet<String> = pieces.iter().cloned().collect();

    // Each distinct word as a symbol sequence.
    let mut words: Vec<(Vec<String>, usize)> = counts
        .iter()
        .map(|(w, &c)| {
            let syms = w
                .chars()
                .enumerate()
                .map(|(i, ch)| {
                    if i == 0 {
                        ch.to_string()
                    } else {
                        format!("{CONTINUATION}{ch}")
                    }
                })
                .collect();
            (syms, c)
        })
        .collect();

    while N_SPECIAL + N_UNUSED + pieces.len() < target_size {
        let mut pair_counts: HashMap<(&str, &str), usize> = HashMap::new();
        let mut sym_counts: HashMap<&str, usize> = HashMap::new();
        for (syms, c) in &words {
            for s in syms {
                *sym_counts.entry(s.as_str()).or_insert(0) += c;
            }
            for w in syms.windows(2) {
                *pair_counts.entry((w[0].as_str(), w[1].as_str())).or_insert(0) += c;
            }
        }
        let best = pair_counts
            .iter()
            .filter(|((l, r), &c)| c >= 2 && piece_chars(l) + piece_chars(r) <= MAX_PIECE_CHARS)
            .map(|(&(l, r), &c)| (c, sym_counts[l], merged_piece(l, r), l, r))
            .max_by(|a, b| {
                a.0.cmp(&b.0)
                    .then(a.1.cmp(&b.1))
                    .then_with(|| b.2.cmp(&a.2))
            });
        let Some((_, _, merged, l, r)) = best else { break };
        let (l, r) = (l.to_owned(), r.to_owned());
        if known.insert(merged.clone()) {
            pieces.push(merged.clone());
        }
        for (syms, _) in &mut words {
            if syms.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = out;
        }
    }
    let mut filler = N_UNUSED;
    while N_SPECIAL + N_UNUSED + pieces.len() < target_size {
        pieces.push(unused_name(filler));
        filler += 1;
    }
    Vocabulary::with_reserved(pieces)
}

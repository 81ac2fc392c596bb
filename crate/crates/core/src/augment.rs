//! Vocabulary augmentation: find target-language wordpieces that remove
//! unknowns and write them into the reserved slots of an existing
//! vocabulary without changing its size.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::SentenceRecord;
use crate::wordpiece::{count_unknowns, tokenize_word, word_counts, Vocabulary};
use crate::{Error, Result};

/// A distinct corpus word whose segmentation under the new vocabulary has
/// strictly fewer unknown pieces than under the original one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImprovedWord {
    pub word: String,
    pub frequency: usize,
    pub new_piece_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationCandidate {
    pub piece: String,
    pub weighted_count: usize,
}

/// How occurrences inside improved words are counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountWeighting {
    /// Each occurrence counts with the word's corpus frequency.
    #[default]
    Token,
    /// Each distinct word counts once.
    Type,
}

impl std::str::FromStr for CountWeighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "token" => Ok(CountWeighting::Token),
            "type" => Ok(CountWeighting::Type),
            other => Err(Error::invalid(format!("unknown count weighting {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    /// Exactly `k` pieces, ranked.
    pub pieces: Vec<String>,
    /// How many trailing entries of `pieces` came from the fallback fill.
    pub fallback_used: usize,
    pub candidates: Vec<AugmentationCandidate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationReport {
    pub unk_before: usize,
    pub unk_after: usize,
    pub pieces_added: Vec<String>,
    pub fallback_used: usize,
}

impl AugmentationReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn improved_words(
    corpus: &[SentenceRecord],
    orig_vocab: &Vocabulary,
    new_vocab: &Vocabulary,
) -> Result<Vec<ImprovedWord>> {
    let mut out = Vec::new();
    for (word, freq) in word_counts(corpus) {
        let before = tokenize_word(&word, orig_vocab)?;
        let after = tokenize_word(&word, new_vocab)?;
        if after.unk_count < before.unk_count {
            out.push(ImprovedWord {
                word,
                frequency: freq,
                new_piece_ids: after.piece_ids,
            });
        }
    }
    Ok(out)
}

fn selectable(piece: &str, id: usize, new_vocab: &Vocabulary, orig_vocab: &Vocabulary) -> bool {
    !new_vocab.is_special(id)
        && !new_vocab.remaining_unused().contains(&id)
        && !(piece.starts_with("[unused") && piece.ends_with(']'))
        && !orig_vocab.contains(piece)
}

fn rank(counts: HashMap<usize, usize>, vocab: &Vocabulary) -> Vec<(String, usize)> {
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .map(|(id, c)| (vocab.piece(id).to_owned(), c))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// Choose `k` pieces for the reserved slots.
///
/// Pieces of the new vocabulary are ranked by how often they occur in the
/// improved segmentations (see [`CountWeighting`]), ties broken
/// lexicographically, skipping pieces the original vocabulary already has.
/// If fewer than `k` such pieces exist, the remainder is filled with the
/// most frequent new-vocabulary pieces over the whole corpus.
pub fn select_pieces(
    improved: &[ImprovedWord],
    corpus: &[SentenceRecord],
    orig_vocab: &Vocabulary,
    new_vocab: &Vocabulary,
    k: usize,
    weighting: CountWeighting,
) -> Result<Selection> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for w in improved {
        let weight = match weighting {
            CountWeighting::Token => w.frequency,
            CountWeighting::Type => 1,
        };
        for &id in &w.new_piece_ids {
            if selectable(new_vocab.piece(id), id, new_vocab, orig_vocab) {
                *counts.entry(id).or_insert(0) += weight;
            }
        }
    }
    let candidates: Vec<AugmentationCandidate> = rank(counts, new_vocab)
        .into_iter()
        .map(|(piece, weighted_count)| AugmentationCandidate {
            piece,
            weighted_count,
        })
        .collect();
    let mut pieces: Vec<String> = candidates.iter().take(k).map(|c| c.piece.clone()).collect();
    let mut fallback_used = 0;
    if pieces.len() < k {
        let chosen: HashSet<String> = pieces.iter().cloned().collect();
        let mut usage: HashMap<usize, usize> = HashMap::new();
        for (word, freq) in word_counts(corpus) {
            for id in tokenize_word(&word, new_vocab)?.piece_ids {
                *usage.entry(id).or_insert(0) += freq;
            }
        }
        // Pieces that greedy segmentation never emits still qualify, last.
        for id in 0..new_vocab.len() {
            usage.entry(id).or_insert(0);
        }
        let fill: Vec<String> = rank(usage, new_vocab)
            .into_iter()
            .filter(|(p, _)| {
                let id = new_vocab.id(p).expect("ranked piece from vocabulary");
                selectable(p, id, new_vocab, orig_vocab) && !chosen.contains(p)
            })
            .map(|(p, _)| p)
            .take(k - pieces.len())
            .collect();
        fallback_used = fill.len();
        pieces.extend(fill);
        if pieces.len() < k {
            return Err(Error::Shortfall {
                requested: k,
                available: pieces.len(),
            });
        }
    }
    Ok(Selection {
        pieces,
        fallback_used,
        candidates,
    })
}

/// Write `pieces` into the reserved slots, in slot order. Size and every
/// other id are unchanged. Returns the augmented vocabulary and the ids that
/// now hold new pieces.
pub fn apply_augmentation(vocab: &Vocabulary, pieces: &[String]) -> Result<(Vocabulary, Vec<usize>)> {
    let slots = vocab.unused_slot_ids();
    if pieces.len() != slots.len() {
        return Err(Error::invalid(format!(
            "expected {} pieces for the reserved slots, got {}",
            slots.len(),
            pieces.len()
        )));
    }
    let remaining = vocab.remaining_unused();
    if remaining.len() != slots.len() {
        return Err(Error::invalid(format!(
            "{} reserved slots already repurposed",
            slots.len() - remaining.len()
        )));
    }
    let mut seen = HashSet::new();
    for p in pieces {
        if vocab.contains(p) {
            return Err(Error::invalid(format!("piece {p:?} already in vocabulary")));
        }
        if !seen.insert(p) {
            return Err(Error::invalid(format!("duplicate piece {p:?}")));
        }
    }
    let v = vocab.replace_slots(slots, pieces)?;
    Ok((v, slots.to_vec()))
}

/// Unknown-token counts before and after augmentation.
pub fn augmentation_report(
    corpus: &[SentenceRecord],
    orig_vocab: &Vocabulary,
    aug_vocab: &Vocabulary,
    fallback_used: usize,
) -> Result<AugmentationReport> {
    let pieces_added = aug_vocab
        .unused_slot_ids()
        .iter()
        .filter(|&&id| orig_vocab.piece(id) != aug_vocab.piece(id))
        .map(|&id| aug_vocab.piece(id).to_owned())
        .collect();
    Ok(AugmentationReport {
        unk_before: count_unknowns(corpus, orig_vocab)?,
        unk_after: count_unknowns(corpus, aug_vocab)?,
        pieces_added,
        fallback_used,
    })
}

/// Full procedure: improved words, selection, slot filling, report.
pub fn augment_vocabulary(
    corpus: &[SentenceRecord],
    orig_vocab: &Vocabulary,
    new_vocab: &Vocabulary,
    weighting: CountWeighting,
) -> Result<(Vocabulary, Vec<usize>, AugmentationReport)> {
    let improved = improved_words(corpus, orig_vocab, new_vocab)?;
    let k = orig_vocab.unused_slot_ids().len();
    let sel = select_pieces(&improved, corpus, orig_vocab, new_vocab, k, weighting)?;
    let (aug, slots) = apply_augmentation(orig_vocab, &sel.pieces)?;
    let report = augmentation_report(corpus, orig_vocab, &aug, sel.fallback_used)?;
    Ok((aug, slots, report))
}

/// Candidate counts as a sorted map, for inspection and tests.
pub fn candidate_counts(sel: &Selection) -> BTreeMap<String, usize> {
    sel.candidates
        .iter()
        .map(|c| (c.piece.clone(), c.weighted_count))
        .collect()
}

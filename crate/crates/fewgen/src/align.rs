//! Matches target text against table values to decide where the generator
//! should be copying, and derives the per-step attribute/position features
//! fed to the decoder.
//!
//! Matching is greedy longest-leftmost over words: candidate spans are
//! ranked by length (longest first), then start position, then table pair
//! order, then in-value position, and accepted spans consume their words so
//! spans never overlap. Single-word matches are suppressed for stopwords and
//! punctuation — a bare "," occurs inside values like "sentani , jayapura ,
//! indonesia" purely incidentally and would otherwise pick up copy
//! supervision.

use std::collections::HashSet;

use thiserror::Error;

use crate::data::Table;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("subword map covers {entries} words but the alignment has {words}")]
    MapLength { words: usize, entries: usize },
    #[error("subword map gives word {word} zero subwords")]
    EmptyWord { word: usize },
}

/// A verbatim correspondence: `target_len` words starting at `target_start`
/// equal the value words of pair `attr_index` starting at `value_start`
/// (0-based within the value).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchSpan {
    pub target_start: usize,
    pub target_len: usize,
    pub attr_index: usize,
    pub value_start: usize,
}

/// Where one matched target word comes from. `fwd_pos` is the 1-based word
/// position within the source value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceWord {
    pub attr_index: usize,
    pub fwd_pos: usize,
}

/// Word-level copy supervision for one target: the accepted spans plus a
/// per-position source (None where the generator is on its own).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CopyAlignment {
    spans: Vec<MatchSpan>,
    sources: Vec<Option<SourceWord>>,
}

impl CopyAlignment {
    pub fn spans(&self) -> &[MatchSpan] {
        &self.spans
    }

    pub fn sources(&self) -> &[Option<SourceWord>] {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn is_matched(&self, j: usize) -> bool {
        self.sources[j].is_some()
    }

    /// The span owning position `j`, if any.
    pub fn span_at(&self, j: usize) -> Option<&MatchSpan> {
        self.spans
            .iter()
            .find(|s| (s.target_start..s.target_start + s.target_len).contains(&j))
    }

    pub fn matched_count(&self) -> usize {
        self.sources.iter().filter(|s| s.is_some()).count()
    }
}

/// Which pair wins when the same phrase occurs in several values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairTieBreak {
    /// First pair in table order (the default).
    #[default]
    TableOrder,
    /// Last pair in table order; exists so the tie rule is testable, not
    /// because it is ever preferred.
    ReverseTableOrder,
}

#[derive(Debug, Clone)]
pub struct MatchPolicy {
    /// Suppress single-word matches of stopwords/punctuation.
    pub ban_single_stopwords: bool,
    pub pair_tie_break: PairTieBreak,
    stopwords: HashSet<String>,
}

impl Default for MatchPolicy {
    fn default() -> Self {
        MatchPolicy {
            ban_single_stopwords: true,
            pair_tie_break: PairTieBreak::TableOrder,
            stopwords: include_str!("assets/stopwords.txt")
                .lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect(),
        }
    }
}

impl MatchPolicy {
    pub fn with_stopwords<I: IntoIterator<Item = String>>(words: I) -> Self {
        MatchPolicy {
            stopwords: words.into_iter().collect(),
            ..MatchPolicy::default()
        }
    }

    pub fn is_stopword(&self, word: &str) -> bool {
        self.stopwords.contains(word)
    }

    fn admits(&self, phrase: &[String]) -> bool {
        !(self.ban_single_stopwords && phrase.len() == 1 && self.is_stopword(&phrase[0]))
    }
}

fn find_occurrence(table: &Table, phrase: &[String], tie: PairTieBreak) -> Option<(usize, usize)> {
    let scan = |(i, pair): (usize, &crate::data::TablePair)| {
        let v = &pair.value;
        (phrase.len() <= v.len())
            .then(|| {
                (0..=v.len() - phrase.len()).find(|&vs| v[vs..vs + phrase.len()] == *phrase)
            })
            .flatten()
            .map(|vs| (i, vs))
    };
    match tie {
        PairTieBreak::TableOrder => table.pairs().iter().enumerate().find_map(scan),
        PairTieBreak::ReverseTableOrder => table.pairs().iter().enumerate().rev().find_map(scan),
    }
}

/// Greedy longest-leftmost matching of the target against the table values.
///
/// Candidates are visited longest first, earlier start first; each is
/// accepted if it fits entirely in unconsumed target words and some single
/// value contains it verbatim (ties across values by [`PairTieBreak`], then
/// smaller in-value position).
pub fn match_phrases(table: &Table, target: &[String], policy: &MatchPolicy) -> CopyAlignment {
    let n = target.len();
    let mut consumed = vec![false; n];
    let mut spans = Vec::new();
    for len in (1..=n).rev() {
        for start in 0..=n - len {
            let phrase = &target[start..start + len];
            if consumed[start..start + len].iter().any(|&c| c) || !policy.admits(phrase) {
                continue;
            }
            if let Some((attr_index, value_start)) =
                find_occurrence(table, phrase, policy.pair_tie_break)
            {
                consumed[start..start + len].fill(true);
                spans.push(MatchSpan {
                    target_start: start,
                    target_len: len,
                    attr_index,
                    value_start,
                });
            }
        }
    }
    spans.sort_by_key(|s| s.target_start);

    let mut sources = vec![None; n];
    for s in &spans {
        for off in 0..s.target_len {
            sources[s.target_start + off] = Some(SourceWord {
                attr_index: s.attr_index,
                fwd_pos: s.value_start + off + 1,
            });
        }
    }
    CopyAlignment { spans, sources }
}

/// Copy source of one subword. `sub_offset` is 1-based within the word, so
/// the three pieces of a matched word carry offsets 1, 2, 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubwordSource {
    pub attr_index: usize,
    pub fwd_pos: usize,
    pub sub_offset: usize,
}

/// [`CopyAlignment`] pushed down to subword granularity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordAlignment {
    sources: Vec<Option<SubwordSource>>,
    words: Vec<usize>,
}

impl SubwordAlignment {
    pub fn sources(&self) -> &[Option<SubwordSource>] {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn is_matched(&self, k: usize) -> bool {
        self.sources[k].is_some()
    }

    pub fn matched_count(&self) -> usize {
        self.sources.iter().filter(|s| s.is_some()).count()
    }
}

/// Spreads a word-level alignment over subwords: every piece of a matched
/// word inherits the word's source, gaining its offset within the word.
/// `subword_counts[i]` is how many subwords word `i` encoded to.
pub fn project_to_subwords(
    a: &CopyAlignment,
    subword_counts: &[usize],
) -> Result<SubwordAlignment, AlignError> {
    if subword_counts.len() != a.sources.len() {
        return Err(AlignError::MapLength {
            words: a.sources.len(),
            entries: subword_counts.len(),
        });
    }
    if let Some(word) = subword_counts.iter().position(|&c| c == 0) {
        return Err(AlignError::EmptyWord { word });
    }
    let mut sources = Vec::with_capacity(subword_counts.iter().sum());
    for (src, &count) in a.sources.iter().zip(subword_counts) {
        for off in 0..count {
            sources.push(src.map(|s| SubwordSource {
                attr_index: s.attr_index,
                fwd_pos: s.fwd_pos,
                sub_offset: off + 1,
            }));
        }
    }
    Ok(SubwordAlignment {
        sources,
        words: subword_counts.to_vec(),
    })
}

/// Inverse of [`project_to_subwords`]: recovers the per-word sources.
pub fn collapse_to_words(a: &SubwordAlignment) -> Vec<Option<SourceWord>> {
    let mut out = Vec::with_capacity(a.words.len());
    let mut k = 0;
    for &count in &a.words {
        let head = a.sources[k].map(|s| SourceWord {
            attr_index: s.attr_index,
            fwd_pos: s.fwd_pos,
        });
        for off in 0..count {
            let piece = a.sources[k + off].map(|s| SourceWord {
                attr_index: s.attr_index,
                fwd_pos: s.fwd_pos,
            });
            assert_eq!(piece, head, "subwords of one word disagree on their source");
        }
        out.push(head);
        k += count;
    }
    out
}

/// The feature pair for decoder step `j`: the source attribute's name words
/// and the 1-based in-value position of the copied word. `None` is the
/// designated no-copy feature (embedded as the reserved none-attribute at
/// position 0).
pub fn decoder_features<'t>(
    a: &CopyAlignment,
    j: usize,
    table: &'t Table,
) -> Option<(&'t [String], usize)> {
    a.sources[j]
        .map(|s| (table.pairs()[s.attr_index].attribute.as_slice(), s.fwd_pos))
}

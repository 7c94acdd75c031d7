//! Generation: greedy and beam search over the copy/vocabulary mixture.
//!
//! Training-time copy features come from matching the full target against
//! the table, which inference does not have. Here the decoder-input
//! features are derived causally: a tracker follows the longest prefix of
//! any table value that the most recent emissions spell out, and the chosen
//! token's (attribute, position) features come from that prefix — the
//! none-features when nothing matches.

use thiserror::Error;

use ndiff::Scalar;

use crate::align::MatchPolicy;
use crate::bpe::{self, MergeTable, SubwordVocab};
use crate::data::Table;
use crate::model::{forward, ModelError, ModelState, PreparedExample, SubTableToken};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Subwords(#[from] bpe::BpeError),
}

pub type Result<T> = std::result::Result<T, DecodeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Greedy,
    Beam,
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub mode: Mode,
    /// Hypotheses kept per step in beam mode; values below 1 act as 1.
    pub beam_width: usize,
    pub max_length: usize,
    /// Exponent α for length-normalized selection, score = logp / lenᵅ;
    /// 0 selects by accumulated log probability alone.
    pub length_norm: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: Mode::Greedy,
            beam_width: 4,
            max_length: 64,
            length_norm: 0.0,
        }
    }
}

/// One table value as the tracker sees it: its subwords in order, each
/// annotated with the 1-based position of its word within the value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValueTrack {
    pub subwords: Vec<u32>,
    pub word_pos: Vec<usize>,
    /// Whether the value's first word alone is too generic to count as a
    /// copy (mirrors the training matcher's single-stopword rule).
    pub first_word_is_stop: bool,
}

/// A table resolved to subword ids: the embedding-side token list plus the
/// per-value tracks the copy tracker follows during generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedTable {
    pub tokens: Vec<SubTableToken>,
    pub attr_subwords: Vec<Vec<u32>>,
    pub values: Vec<ValueTrack>,
}

pub fn prepare_table(
    table: &Table,
    merges: &MergeTable,
    vocab: &SubwordVocab,
    policy: &MatchPolicy,
) -> PreparedTable {
    let mut tokens = Vec::new();
    let mut attr_subwords = Vec::new();
    let mut values = Vec::new();
    for (attr_index, pair) in table.pairs().iter().enumerate() {
        attr_subwords.push(bpe::encode(&pair.attribute, merges, vocab));
        let len = pair.value.len();
        let mut track = ValueTrack {
            subwords: Vec::new(),
            word_pos: Vec::new(),
            first_word_is_stop: policy.is_stopword(&pair.value[0]),
        };
        for (k, word) in pair.value.iter().enumerate() {
            for (off, id) in bpe::encode_word(word, merges, vocab).into_iter().enumerate() {
                tokens.push(SubTableToken {
                    sub_id: id,
                    attr_index,
                    fwd_pos: k + 1,
                    bwd_pos: len - k,
                    sub_offset: off + 1,
                });
                track.subwords.push(id);
                track.word_pos.push(k + 1);
            }
        }
        values.push(track);
    }
    PreparedTable {
        tokens,
        attr_subwords,
        values,
    }
}

/// Follows, across emitted subwords, every table value whose prefix the
/// recent output spells out. `advance` consumes the next emitted subword
/// and returns the (attribute, position) features its decoder-input copy
/// embedding should carry — `(0, 0)` when nothing matches, and also while
/// a match still covers only a single stopword word.
#[derive(Debug, Clone)]
pub struct CopyTracker<'a> {
    values: &'a [ValueTrack],
    /// Active (pair, matched subword count) prefix states.
    states: Vec<(usize, usize)>,
}

impl<'a> CopyTracker<'a> {
    pub fn new(values: &'a [ValueTrack]) -> Self {
        CopyTracker {
            values,
            states: Vec::new(),
        }
    }

    pub fn advance(&mut self, id: u32) -> (usize, usize) {
        let mut next: Vec<(usize, usize)> = self
            .states
            .iter()
            .filter(|&&(p, l)| self.values[p].subwords.get(l) == Some(&id))
            .map(|&(p, l)| (p, l + 1))
            .collect();
        for (p, v) in self.values.iter().enumerate() {
            if v.subwords.first() == Some(&id) && !next.contains(&(p, 1)) {
                next.push((p, 1));
            }
        }
        self.states = next;
        let best = self
            .states
            .iter()
            .copied()
            .max_by(|&(pa, la), &(pb, lb)| la.cmp(&lb).then(pb.cmp(&pa)));
        match best {
            Some((p, l)) => {
                let pos = self.values[p].word_pos[l - 1];
                if pos == 1 && self.values[p].first_word_is_stop {
                    (0, 0)
                } else {
                    (p + 1, pos)
                }
            }
            None => (0, 0),
        }
    }
}

#[derive(Debug, Clone)]
struct Hypothesis {
    emitted: Vec<u32>,
    feat_attr: Vec<usize>,
    feat_pos: Vec<usize>,
    states: Vec<(usize, usize)>,
    log_prob: f64,
    /// Number of accumulated log-probability terms (emissions plus the
    /// end-of-sequence choice when one was made).
    terms: usize,
    finished: bool,
}

impl Hypothesis {
    fn root() -> Self {
        Hypothesis {
            emitted: Vec::new(),
            feat_attr: vec![0],
            feat_pos: vec![0],
            states: Vec::new(),
            log_prob: 0.0,
            terms: 0,
            finished: false,
        }
    }

    fn score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            self.log_prob
        } else {
            self.log_prob / (self.terms.max(1) as f64).powf(alpha)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// Emitted subword ids, end-of-sequence excluded.
    pub ids: Vec<u32>,
    /// Accumulated log probability of the emissions (and the stop choice).
    pub log_prob: f64,
}

fn step_distribution<T: Scalar>(
    state: &ModelState<T>,
    table: &PreparedTable,
    hyp: &Hypothesis,
) -> Result<Vec<f64>> {
    let mut input_ids = vec![bpe::BOS];
    input_ids.extend(&hyp.emitted);
    let ex = PreparedExample {
        table_tokens: table.tokens.clone(),
        attr_subwords: table.attr_subwords.clone(),
        input_ids,
        gold_ids: vec![],
        feat_attr: hyp.feat_attr.clone(),
        feat_pos: hyp.feat_pos.clone(),
        matched: vec![false; hyp.emitted.len() + 1],
    };
    let pass = forward(state, std::slice::from_ref(&ex), None)?;
    let mixture = pass.tape.value(pass.examples[0].mixture);
    let v = state.config.vocab_size;
    let last = &mixture.data()[(ex.input_ids.len() - 1) * v..];
    Ok(last.iter().map(|&p| p.to_f64()).collect())
}

fn beam_search<T: Scalar>(
    state: &ModelState<T>,
    table: &PreparedTable,
    width: usize,
    max_len: usize,
    alpha: f64,
) -> Result<Vec<Hypothesis>> {
    let width = width.max(1);
    let mut live = vec![Hypothesis::root()];
    let mut finished = Vec::new();
    while !live.is_empty() {
        let mut candidates: Vec<(f64, u32, usize)> = Vec::new();
        let mut dists = Vec::with_capacity(live.len());
        for (h, hyp) in live.iter().enumerate() {
            let dist = step_distribution(state, table, hyp)?;
            for (id, &p) in dist.iter().enumerate() {
                let id = id as u32;
                let control = id == bpe::BOS || id == bpe::SEP || id == bpe::PAD;
                if control || p <= 0.0 {
                    continue;
                }
                candidates.push((hyp.log_prob + p.ln(), id, h));
            }
            dists.push(dist);
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(width);
        for (log_prob, id, h) in candidates.into_iter().take(width) {
            let parent = &live[h];
            let mut hyp = Hypothesis {
                log_prob,
                terms: parent.terms + 1,
                ..parent.clone()
            };
            if id == bpe::EOS {
                hyp.finished = true;
                finished.push(hyp);
                continue;
            }
            hyp.emitted.push(id);
            let mut tracker = CopyTracker {
                values: &table.values,
                states: std::mem::take(&mut hyp.states),
            };
            let (fa, fp) = tracker.advance(id);
            hyp.states = tracker.states;
            hyp.feat_attr.push(fa);
            hyp.feat_pos.push(fp);
            if hyp.emitted.len() >= max_len {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
    }
    finished.sort_by(|a, b| {
        b.score(alpha)
            .partial_cmp(&a.score(alpha))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.emitted.len().cmp(&b.emitted.len()))
            .then(a.emitted.cmp(&b.emitted))
    });
    Ok(finished)
}

/// Decodes one table. Beam mode also runs the greedy path and returns
/// whichever scores better, so widening the beam never loses to greedy.
pub fn generate<T: Scalar>(
    state: &ModelState<T>,
    table: &PreparedTable,
    cfg: &DecodeConfig,
) -> Result<Generated> {
    let prefix = table.tokens.len() + 1;
    let budget = state.config.max_seq_len.saturating_sub(prefix + 1);
    if budget == 0 {
        return Err(DecodeError::Model(ModelError::OverlongInput {
            len: prefix + 2,
            max: state.config.max_seq_len,
        }));
    }
    let max_len = cfg.max_length.min(budget).max(1);
    let alpha = cfg.length_norm;
    let width = match cfg.mode {
        Mode::Greedy => 1,
        Mode::Beam => cfg.beam_width.max(1),
    };
    let mut best = beam_search(state, table, width, max_len, alpha)?
        .into_iter()
        .next()
        .expect("search always finishes at least one hypothesis");
    if width > 1 {
        let greedy = beam_search(state, table, 1, max_len, alpha)?
            .into_iter()
            .next()
            .expect("greedy path finishes");
        if greedy.score(alpha) > best.score(alpha) {
            best = greedy;
        }
    }
    Ok(Generated {
        ids: best.emitted,
        log_prob: best.log_prob,
    })
}

/// End-to-end convenience: prepares the table, decodes, and detokenizes.
pub fn generate_text<T: Scalar>(
    state: &ModelState<T>,
    table: &Table,
    merges: &MergeTable,
    vocab: &SubwordVocab,
    policy: &MatchPolicy,
    cfg: &DecodeConfig,
) -> Result<Vec<String>> {
    let prepared = prepare_table(table, merges, vocab, policy);
    let out = generate(state, &prepared, cfg)?;
    Ok(bpe::decode(&out.ids, vocab)?)
}

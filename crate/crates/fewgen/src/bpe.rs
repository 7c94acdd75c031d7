//! Byte-pair-encoding subword tokenizer.
//!
//! Words are split into character symbols with the end-of-word marker `</w>`
//! attached to the final character ("low" -> `l o w</w>`), and merges join
//! adjacent symbol pairs greedily by corpus frequency. The base alphabet
//! always contains the 256 byte symbols `<0xNN>` plus a standalone `</w>`, so
//! any input encodes: characters never seen in training fall back to their
//! UTF-8 bytes followed by the standalone marker.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("id {0} is a reserved control symbol")]
    ReservedId(u32),
    #[error("merge file line {line}: expected two space-separated symbols")]
    BadMergeLine { line: usize },
    #[error("vocab file line {line}: expected symbol<TAB>id")]
    BadVocabLine { line: usize },
}

pub type Result<T> = std::result::Result<T, BpeError>;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const SEP: u32 = 2;
pub const PAD: u32 = 3;
pub const RESERVED: [(&str, u32); 4] = [("<bos>", BOS), ("<eos>", EOS), ("<sep>", SEP), ("<pad>", PAD)];

const END: &str = "</w>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
}

impl MergeTable {
    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocab {
    id_to_symbol: Vec<String>,
    symbol_to_id: HashMap<String, u32>,
}

impl SubwordVocab {
    fn from_symbols(symbols: Vec<String>) -> Self {
        let mut symbol_to_id = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            let prev = symbol_to_id.insert(s.clone(), i as u32);
            assert!(prev.is_none(), "duplicate vocabulary symbol {s:?}");
        }
        SubwordVocab {
            id_to_symbol: symbols,
            symbol_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_symbol.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_symbol.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.symbol_to_id.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.id_to_symbol.get(id as usize).map(|s| s.as_str())
    }

    pub fn is_reserved(id: u32) -> bool {
        id < RESERVED.len() as u32
    }
}

fn byte_symbol(b: u8) -> String {
    format!("<0x{b:02x}>")
}

fn parse_byte_symbol(sym: &str) -> Option<u8> {
    let hex = sym.strip_prefix("<0x")?.strip_suffix('>')?;
    u8::from_str_radix(hex, 16).ok()
}

/// A word as merge symbols: each character one symbol, the marker attached to
/// the last ("low" -> ["l", "o", "w</w>"]).
fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == n {
                format!("{c}{END}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn apply_merges(symbols: &mut Vec<String>, merges: &[(String, String)]) {
    for (a, b) in merges {
        let mut i = 0;
        while i + 1 < symbols.len() {
            if symbols[i] == *a && symbols[i + 1] == *b {
                symbols[i] = format!("{a}{b}");
                symbols.remove(i + 1);
            } else {
                i += 1;
            }
        }
    }
}

/// Trains a merge table by greedy highest-frequency pair merging, stopping
/// early when no pair occurs at least twice. Ties break to the
/// lexicographically smallest pair, so training is deterministic and
/// independent of hash iteration order.
pub fn train_bpe(corpus: &[Vec<String>], num_merges: usize) -> Result<(MergeTable, SubwordVocab)> {
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(BpeError::EmptyCorpus);
    }

    // Word-frequency view of the corpus; merging is word-internal so this is
    // the whole training state.
    let mut word_freq: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    for sentence in corpus {
        for word in sentence {
            *word_freq.entry(word_symbols(word)).or_default() += 1;
        }
    }

    let reserved: Vec<&str> = RESERVED.iter().map(|(s, _)| *s).collect();
    let mut merges: Vec<(String, String)> = Vec::new();
    for _ in 0..num_merges {
        let mut counts: HashMap<(String, String), usize> = HashMap::new();
        for (symbols, freq) in &word_freq {
            for w in symbols.windows(2) {
                *counts.entry((w[0].clone(), w[1].clone())).or_default() += freq;
            }
        }
        let best = counts
            .into_iter()
            .filter(|((a, b), _)| !reserved.contains(&format!("{a}{b}").as_str()))
            .filter(|(_, c)| *c >= 2)
            .max_by(|(p1, c1), (p2, c2)| c1.cmp(c2).then_with(|| p2.cmp(p1)));
        let Some((pair, _)) = best else { break };

        let mut next: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for (mut symbols, freq) in word_freq {
            apply_merges(&mut symbols, std::slice::from_ref(&pair));
            *next.entry(symbols).or_default() += freq;
        }
        word_freq = next;
        merges.push(pair);
    }

    let table = MergeTable { merges };
    let vocab = build_vocab(corpus, &table);
    Ok((table, vocab))
}

/// Vocabulary layout: the four reserved symbols, the 256 byte-fallback
/// symbols, the standalone marker, the observed character alphabet (sorted),
/// then merge outputs in merge order.
fn build_vocab(corpus: &[Vec<String>], table: &MergeTable) -> SubwordVocab {
    let mut symbols: Vec<String> = RESERVED.iter().map(|(s, _)| s.to_string()).collect();
    symbols.extend((0..=255u8).map(byte_symbol));
    symbols.push(END.to_string());

    let mut alphabet: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    for sentence in corpus {
        for word in sentence {
            alphabet.extend(word_symbols(word));
        }
    }
    let known: std::collections::HashSet<&String> = symbols.iter().collect();
    let fresh: Vec<String> = alphabet
        .iter()
        .filter(|s| !known.contains(s))
        .cloned()
        .collect();
    symbols.extend(fresh);

    for (a, b) in &table.merges {
        let merged = format!("{a}{b}");
        if !symbols.contains(&merged) {
            symbols.push(merged);
        }
    }
    SubwordVocab::from_symbols(symbols)
}

/// Encodes one word. Characters outside the vocabulary fall back to their
/// UTF-8 byte symbols; a fallback at word end is followed by the standalone
/// end-of-word marker, so decoding still sees the word boundary.
pub fn encode_word(word: &str, table: &MergeTable, vocab: &SubwordVocab) -> Vec<u32> {
    let mut symbols = word_symbols(word);
    apply_merges(&mut symbols, &table.merges);
    let mut ids = Vec::with_capacity(symbols.len());
    for sym in &symbols {
        if let Some(id) = vocab.id(sym) {
            ids.push(id);
        } else {
            // Unknown symbol: emit each character's bytes; keep the marker.
            let (body, terminal) = match sym.strip_suffix(END) {
                Some(body) => (body, true),
                None => (sym.as_str(), false),
            };
            for b in body.bytes() {
                ids.push(vocab.id(&byte_symbol(b)).expect("byte symbols always present"));
            }
            if terminal {
                ids.push(vocab.id(END).expect("marker always present"));
            }
        }
    }
    ids
}

pub fn encode(words: &[String], table: &MergeTable, vocab: &SubwordVocab) -> Vec<u32> {
    words
        .iter()
        .flat_map(|w| encode_word(w, table, vocab))
        .collect()
}

/// Inverse of [`encode`]: concatenates symbols and splits words at
/// end-of-word markers. Reserved control ids are rejected; callers strip
/// them first.
pub fn decode(ids: &[u32], vocab: &SubwordVocab) -> Result<Vec<String>> {
    let mut words = Vec::new();
    let mut current: Vec<u8> = Vec::new();
    for &id in ids {
        if SubwordVocab::is_reserved(id) {
            return Err(BpeError::ReservedId(id));
        }
        let sym = vocab.symbol(id).ok_or(BpeError::UnknownId(id))?;
        if let Some(b) = parse_byte_symbol(sym) {
            current.push(b);
            continue;
        }
        if sym == END {
            words.push(String::from_utf8_lossy(&current).into_owned());
            current.clear();
            continue;
        }
        match sym.strip_suffix(END) {
            Some(body) => {
                current.extend_from_slice(body.as_bytes());
                words.push(String::from_utf8_lossy(&current).into_owned());
                current.clear();
            }
            None => current.extend_from_slice(sym.as_bytes()),
        }
    }
    if !current.is_empty() {
        words.push(String::from_utf8_lossy(&current).into_owned());
    }
    Ok(words)
}

/// Merge table file: line k holds the k-th merge as two space-separated
/// symbols.
pub fn merges_to_string(table: &MergeTable) -> String {
    let mut out = String::new();
    for (a, b) in &table.merges {
        out.push_str(a);
        out.push(' ');
        out.push_str(b);
        out.push('\n');
    }
    out
}

pub fn merges_from_string(input: &str) -> Result<MergeTable> {
    let mut merges = Vec::new();
    for (i, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                merges.push((a.to_string(), b.to_string()));
            }
            _ => return Err(BpeError::BadMergeLine { line: i + 1 }),
        }
    }
    Ok(MergeTable { merges })
}

/// Vocabulary file: `symbol<TAB>id` lines, ids dense from 0.
pub fn vocab_to_string(vocab: &SubwordVocab) -> String {
    let mut out = String::new();
    for (i, sym) in vocab.id_to_symbol.iter().enumerate() {
        out.push_str(sym);
        out.push('\t');
        out.push_str(&i.to_string());
        out.push('\n');
    }
    out
}

pub fn vocab_from_string(input: &str) -> Result<SubwordVocab> {
    let mut rows: Vec<(String, u32)> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (sym, id) = line
            .split_once('\t')
            .and_then(|(s, id)| id.parse::<u32>().ok().map(|id| (s.to_string(), id)))
            .ok_or(BpeError::BadVocabLine { line: i + 1 })?;
        rows.push((sym, id));
    }
    rows.sort_by_key(|(_, id)| *id);
    for (expect, (_, id)) in rows.iter().enumerate() {
        if *id != expect as u32 {
            return Err(BpeError::BadVocabLine {
                line: expect + 1,
            });
        }
    }
    Ok(SubwordVocab::from_symbols(
        rows.into_iter().map(|(s, _)| s).collect(),
    ))
}

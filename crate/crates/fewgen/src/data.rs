//! Dataset representation and ingestion: tables of attribute-value pairs,
//! paired examples, deterministic splitting, the grounding filter, and table
//! linearization.
//!
//! The on-disk format is one JSON object per line:
//! `{"table": [["name", "walter extra"], ["nationality", "german"]], "text": "..."}`
//! where every string holds space-separated lowercase tokens.  Text-only
//! records (for pre-training corpora) carry an empty `table` array.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("split needs {required} examples (train {train} + val {val} + at least 1 test), only {available} available")]
    Split {
        required: usize,
        train: usize,
        val: usize,
        available: usize,
    },
    #[error("template rules: {0}")]
    Template(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Splits on whitespace and lowercases. All text entering the pipeline goes
/// through here, so tokens never contain whitespace or uppercase letters.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(|w| w.to_lowercase()).collect()
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TablePair {
    pub attribute: Vec<String>,
    pub value: Vec<String>,
}

/// An ordered list of attribute-value pairs. Order is meaningful: it drives
/// linearization and match tie-breaking. Duplicate attributes are allowed and
/// kept in order. An empty table marks a text-only example.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Table {
    pairs: Vec<TablePair>,
}

impl Table {
    /// Every pair must have a non-empty attribute and value.
    pub fn new(pairs: Vec<TablePair>) -> std::result::Result<Self, String> {
        for (i, p) in pairs.iter().enumerate() {
            if p.attribute.is_empty() {
                return Err(format!("pair {i} has an empty attribute"));
            }
            if p.value.is_empty() {
                return Err(format!("pair {i} has an empty value"));
            }
        }
        Ok(Table { pairs })
    }

    pub fn empty() -> Self {
        Table { pairs: Vec::new() }
    }

    pub fn pairs(&self) -> &[TablePair] {
        &self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// First pair whose attribute equals `attr`, in table order.
    pub fn value_of(&self, attr: &[String]) -> Option<&[String]> {
        self.pairs
            .iter()
            .find(|p| p.attribute == attr)
            .map(|p| p.value.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub table: Table,
    pub text: Vec<String>,
}

/// One table value word with its owning attribute and 1-based position from
/// both ends of the value (`fwd_pos + bwd_pos = value length + 1`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableToken {
    pub word: String,
    pub attr_index: usize,
    pub fwd_pos: usize,
    pub bwd_pos: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

#[derive(Deserialize)]
struct RawRecord {
    table: Vec<(String, String)>,
    text: String,
}

/// Parses the line-delimited dataset format. Blank lines are ignored; any
/// malformed line fails with its 1-based line number.
pub fn parse_examples(input: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let mut pairs = Vec::with_capacity(raw.table.len());
        for (attr, value) in &raw.table {
            pairs.push(TablePair {
                attribute: tokenize(attr),
                value: tokenize(value),
            });
        }
        let table = Table::new(pairs).map_err(|msg| DataError::Parse { line: lineno, msg })?;
        out.push(Example {
            table,
            text: tokenize(&raw.text),
        });
    }
    Ok(out)
}

/// Inverse of [`parse_examples`] for well-formed data: one JSON object per
/// line, tokens joined by single spaces.
pub fn serialize_examples(examples: &[Example]) -> String {
    let mut out = String::new();
    for ex in examples {
        let table: Vec<(String, String)> = ex
            .table
            .pairs()
            .iter()
            .map(|p| (detokenize(&p.attribute), detokenize(&p.value)))
            .collect();
        let rec = serde_json::json!({ "table": table, "text": detokenize(&ex.text) });
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    out
}

/// Deterministic shuffle by seed, then prefix partition into
/// (train, val, test). The three parts cover the input exactly.
pub fn split(
    data: &[Example],
    spec: SplitSpec,
) -> Result<(Vec<Example>, Vec<Example>, Vec<Example>)> {
    let required = spec.train_size + spec.val_size + 1;
    if data.len() < required {
        return Err(DataError::Split {
            required,
            train: spec.train_size,
            val: spec.val_size,
            available: data.len(),
        });
    }
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    indices.shuffle(&mut rng);
    let take = |range: std::ops::Range<usize>| -> Vec<Example> {
        indices[range].iter().map(|&i| data[i].clone()).collect()
    };
    let t = spec.train_size;
    let v = spec.val_size;
    Ok((take(0..t), take(t..t + v), take(t + v..data.len())))
}

pub const DEFAULT_RARE_THRESHOLD: usize = 5;

/// Keeps examples whose target has at most `max_oov` tokens that appear
/// neither in the example's own table values nor in the corpus-wide
/// frequent-word list (corpus frequency >= `freq_threshold`, counted over
/// target texts).
pub fn filter_ungrounded(
    data: &[Example],
    max_oov: usize,
    freq_threshold: usize,
) -> Vec<Example> {
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for ex in data {
        for w in &ex.text {
            *freq.entry(w.as_str()).or_default() += 1;
        }
    }
    data.iter()
        .filter(|ex| {
            let table_words: HashSet<&str> = ex
                .table
                .pairs()
                .iter()
                .flat_map(|p| p.value.iter().map(|w| w.as_str()))
                .collect();
            let oov = ex
                .text
                .iter()
                .filter(|w| {
                    !table_words.contains(w.as_str())
                        && freq.get(w.as_str()).copied().unwrap_or(0) < freq_threshold
                })
                .count();
            oov <= max_oov
        })
        .cloned()
        .collect()
}

/// Concatenates the value token sequences in pair order, annotating each word
/// with its attribute index and its 1-based position from both value ends.
pub fn linearize(table: &Table) -> Vec<TableToken> {
    let mut out = Vec::new();
    for (attr_index, pair) in table.pairs().iter().enumerate() {
        let len = pair.value.len();
        for (k, word) in pair.value.iter().enumerate() {
            out.push(TableToken {
                word: word.clone(),
                attr_index,
                fwd_pos: k + 1,
                bwd_pos: len - k,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn parse_reads_pairs_and_text_in_order() {
        let line = r#"{"table": [["name", "walter extra"], ["nationality", "german"]], "text": "walter extra is a german aircraft designer"}"#;
        let exs = parse_examples(line).unwrap();
        assert_eq!(exs.len(), 1);
        let ex = &exs[0];
        assert_eq!(ex.table.pairs().len(), 2);
        assert_eq!(ex.table.pairs()[0].attribute, toks("name"));
        assert_eq!(ex.table.pairs()[0].value, toks("walter extra"));
        assert_eq!(ex.table.pairs()[1].attribute, toks("nationality"));
        assert_eq!(ex.text.len(), 7);
    }

    #[test]
    fn parse_empty_stream_gives_empty_sequence() {
        assert!(parse_examples("").unwrap().is_empty());
        assert!(parse_examples("\n  \n").unwrap().is_empty());
    }

    #[test]
    fn parse_reports_line_number_for_missing_text() {
        let input = "{\"table\": [[\"a\", \"b\"]], \"text\": \"x\"}\n{\"table\": [[\"a\", \"b\"]]}\n";
        let err = parse_examples(input).unwrap_err();
        match err {
            DataError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn parse_rejects_empty_attribute_or_value() {
        let bad_attr = r#"{"table": [["", "b"]], "text": "x"}"#;
        assert!(parse_examples(bad_attr).is_err());
        let bad_value = r#"{"table": [["a", "  "]], "text": "x"}"#;
        assert!(parse_examples(bad_value).is_err());
    }

    #[test]
    fn parse_keeps_duplicate_attributes_in_order() {
        let line = r#"{"table": [["name", "x"], ["name", "y"]], "text": "x y"}"#;
        let exs = parse_examples(line).unwrap();
        assert_eq!(exs[0].table.pairs()[0].value, toks("x"));
        assert_eq!(exs[0].table.pairs()[1].value, toks("y"));
    }

    #[test]
    fn parse_lowercases_input_tokens() {
        let line = r#"{"table": [["Name", "Walter Extra"]], "text": "Walter EXTRA"}"#;
        let exs = parse_examples(line).unwrap();
        assert_eq!(exs[0].table.pairs()[0].value, toks("walter extra"));
        assert_eq!(exs[0].text, toks("walter extra"));
    }

    #[test]
    fn serialize_then_parse_round_trips() {
        let input = concat!(
            r#"{"table":[["name","walter extra"],["nationality","german"]],"text":"walter extra is german"}"#,
            "\n",
            r#"{"table":[],"text":"a text only sentence"}"#,
            "\n"
        );
        let exs = parse_examples(input).unwrap();
        let back = parse_examples(&serialize_examples(&exs)).unwrap();
        assert_eq!(exs, back);
    }

    fn numbered_examples(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                table: Table::new(vec![TablePair {
                    attribute: toks("id"),
                    value: vec![format!("v{i}")],
                }])
                .unwrap(),
                text: vec![format!("t{i}")],
            })
            .collect()
    }

    #[test]
    fn split_sizes_and_partition() {
        let data = numbered_examples(1500);
        let spec = SplitSpec {
            train_size: 200,
            val_size: 1000,
            seed: 7,
        };
        let (train, val, test) = split(&data, spec).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (200, 1000, 300));
        let mut all: Vec<&Example> = train.iter().chain(&val).chain(&test).collect();
        all.sort_by_key(|e| e.text[0].clone());
        let mut orig: Vec<&Example> = data.iter().collect();
        orig.sort_by_key(|e| e.text[0].clone());
        assert_eq!(all, orig);
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let data = numbered_examples(60);
        let spec = SplitSpec {
            train_size: 20,
            val_size: 20,
            seed: 3,
        };
        assert_eq!(split(&data, spec).unwrap(), split(&data, spec).unwrap());
        let other = SplitSpec { seed: 4, ..spec };
        assert_ne!(
            split(&data, spec).unwrap().0,
            split(&data, other).unwrap().0
        );
    }

    #[test]
    fn split_rejects_insufficient_data() {
        let data = numbered_examples(400);
        let spec = SplitSpec {
            train_size: 500,
            val_size: 0,
            seed: 0,
        };
        match split(&data, spec).unwrap_err() {
            DataError::Split {
                required,
                available,
                ..
            } => {
                assert_eq!(required, 501);
                assert_eq!(available, 400);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn linearize_orders_tokens_and_annotates_positions() {
        let table = Table::new(vec![
            TablePair {
                attribute: toks("name"),
                value: toks("andri ibo"),
            },
            TablePair {
                attribute: toks("position"),
                value: toks("defender"),
            },
        ])
        .unwrap();
        let lin = linearize(&table);
        let got: Vec<(&str, usize, usize, usize)> = lin
            .iter()
            .map(|t| (t.word.as_str(), t.attr_index, t.fwd_pos, t.bwd_pos))
            .collect();
        assert_eq!(
            got,
            vec![
                ("andri", 0, 1, 2),
                ("ibo", 0, 2, 1),
                ("defender", 1, 1, 1)
            ]
        );
    }

    #[test]
    fn linearize_position_invariant_holds() {
        let table = Table::new(vec![TablePair {
            attribute: toks("birth place"),
            value: toks("sentani , jayapura , indonesia"),
        }])
        .unwrap();
        let lin = linearize(&table);
        assert_eq!(lin.len(), 5);
        assert_eq!(
            lin.iter().map(|t| t.fwd_pos).collect::<Vec<_>>(),
            vec![1, 2, 3, 4, 5]
        );
        assert_eq!(
            lin.iter().map(|t| t.bwd_pos).collect::<Vec<_>>(),
            vec![5, 4, 3, 2, 1]
        );
        for t in &lin {
            assert_eq!(t.fwd_pos + t.bwd_pos, 6);
        }
    }

    #[test]
    fn filter_keeps_grounded_drops_rare_out_of_table() {
        // 100 well-grounded examples plus 10 whose targets carry unique junk
        // tokens; with threshold 5 the junk never reaches "frequent".
        let mut data = Vec::new();
        for i in 0..100 {
            let val = format!("v{}", i % 7);
            data.push(Example {
                table: Table::new(vec![TablePair {
                    attribute: toks("k"),
                    value: vec![val.clone()],
                }])
                .unwrap(),
                text: vec!["the".into(), val, "thing".into()],
            });
        }
        for i in 0..10 {
            data.push(Example {
                table: Table::new(vec![TablePair {
                    attribute: toks("k"),
                    value: toks("v0"),
                }])
                .unwrap(),
                text: vec!["the".into(), format!("zzqx{i}"), "thing".into()],
            });
        }
        let kept = filter_ungrounded(&data, 0, DEFAULT_RARE_THRESHOLD);
        assert_eq!(kept.len(), 100);
        assert!(kept.iter().all(|e| !e.text[1].starts_with("zzqx")));
    }

    #[test]
    fn filter_matches_brute_force_oracle_on_random_data() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let vocab: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let data: Vec<Example> = (0..200)
            .map(|_| {
                let val: Vec<String> = (0..rng.gen_range(1..4))
                    .map(|_| vocab[rng.gen_range(0..vocab.len())].clone())
                    .collect();
                let text: Vec<String> = (0..rng.gen_range(3..9))
                    .map(|_| vocab[rng.gen_range(0..vocab.len())].clone())
                    .collect();
                Example {
                    table: Table::new(vec![TablePair {
                        attribute: toks("k"),
                        value: val,
                    }])
                    .unwrap(),
                    text,
                }
            })
            .collect();

        let threshold = 4;
        let max_oov = 1;
        // Independent recount: per-token membership check written long-hand.
        let mut counts: HashMap<String, usize> = HashMap::new();
        for ex in &data {
            for w in &ex.text {
                *counts.entry(w.clone()).or_default() += 1;
            }
        }
        let expected: Vec<Example> = data
            .iter()
            .filter(|ex| {
                let mut oov = 0;
                for w in &ex.text {
                    let in_table = ex
                        .table
                        .pairs()
                        .iter()
                        .any(|p| p.value.iter().any(|v| v == w));
                    let frequent = counts[w] >= threshold;
                    if !in_table && !frequent {
                        oov += 1;
                    }
                }
                oov <= max_oov
            })
            .cloned()
            .collect();

        assert_eq!(filter_ungrounded(&data, max_oov, threshold), expected);
    }
}

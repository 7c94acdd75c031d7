//! The template baseline: hand-written per-domain rules rendered by direct
//! slot substitution.
//!
//! Rule file format: the first non-blank line names the domain, each later
//! non-blank line is one rule. A rule interleaves literal tokens with
//! `<attribute name>` slots. Clause grouping controls what disappears when an
//! attribute is missing from a table:
//!
//! - `[ ... ]` marks an optional clause; the brackets themselves are not
//!   emitted.
//! - A parenthesized run `( ... )` forms an implicit clause, emitted with its
//!   parentheses.
//! - Any other slot stands alone as its own clause; literal runs between
//!   clauses are always emitted.
//!
//! A clause is skipped entirely when any slot inside it names an attribute
//! the table lacks, so rendering never emits an unresolved slot.

use crate::data::{tokenize, DataError, Result, Table};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Literal(String),
    Slot(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clause {
    pub pieces: Vec<Piece>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateRule {
    pub domain: String,
    pub clauses: Vec<Clause>,
}

/// Splits a rule line into literal tokens and whole `<...>` slots (slot names
/// may contain spaces).
fn scan_tokens(line: &str) -> Result<Vec<Piece>> {
    let mut out = Vec::new();
    let mut rest = line.trim();
    while !rest.is_empty() {
        if let Some(stripped) = rest.strip_prefix('<') {
            let end = stripped.find('>').ok_or_else(|| {
                DataError::Template(format!("unclosed slot in rule: {line:?}"))
            })?;
            let name = tokenize(&stripped[..end]);
            if name.is_empty() {
                return Err(DataError::Template(format!("empty slot in rule: {line:?}")));
            }
            out.push(Piece::Slot(name));
            rest = stripped[end + 1..].trim_start();
        } else {
            let end = rest.find(['<', ' ']).unwrap_or(rest.len());
            let word = &rest[..end];
            if !word.is_empty() {
                out.push(Piece::Literal(word.to_lowercase()));
            }
            rest = rest[end..].trim_start();
        }
    }
    Ok(out)
}

/// Parses a single rule line under the given domain name.
pub fn parse_rule(domain: &str, line: &str) -> Result<TemplateRule> {
    let pieces = scan_tokens(line)?;
    let mut clauses = Vec::new();
    let mut literal_run: Vec<Piece> = Vec::new();
    let mut i = 0;

    let flush =
        |run: &mut Vec<Piece>, clauses: &mut Vec<Clause>| {
            if !run.is_empty() {
                clauses.push(Clause {
                    pieces: std::mem::take(run),
                });
            }
        };

    while i < pieces.len() {
        match &pieces[i] {
            Piece::Literal(tok) if tok == "[" => {
                flush(&mut literal_run, &mut clauses);
                let close = pieces[i + 1..]
                    .iter()
                    .position(|p| matches!(p, Piece::Literal(t) if t == "]"))
                    .ok_or_else(|| {
                        DataError::Template(format!("unclosed [ group in rule: {line:?}"))
                    })?;
                let group: Vec<Piece> = pieces[i + 1..i + 1 + close].to_vec();
                if group
                    .iter()
                    .any(|p| matches!(p, Piece::Literal(t) if t == "[" ))
                {
                    return Err(DataError::Template(format!(
                        "nested [ groups are not supported: {line:?}"
                    )));
                }
                clauses.push(Clause { pieces: group });
                i += close + 2;
            }
            Piece::Literal(tok) if tok == "]" => {
                return Err(DataError::Template(format!(
                    "unmatched ] in rule: {line:?}"
                )));
            }
            Piece::Literal(tok) if tok == "(" => {
                flush(&mut literal_run, &mut clauses);
                let close = pieces[i..]
                    .iter()
                    .position(|p| matches!(p, Piece::Literal(t) if t == ")"))
                    .ok_or_else(|| {
                        DataError::Template(format!("unclosed ( group in rule: {line:?}"))
                    })?;
                clauses.push(Clause {
                    pieces: pieces[i..i + close + 1].to_vec(),
                });
                i += close + 1;
            }
            Piece::Slot(_) => {
                flush(&mut literal_run, &mut clauses);
                clauses.push(Clause {
                    pieces: vec![pieces[i].clone()],
                });
                i += 1;
            }
            Piece::Literal(_) => {
                literal_run.push(pieces[i].clone());
                i += 1;
            }
        }
    }
    flush(&mut literal_run, &mut clauses);
    Ok(TemplateRule {
        domain: domain.to_string(),
        clauses,
    })
}

/// Parses a rules file: first non-blank line is the domain name, every later
/// non-blank line one rule.
pub fn parse_rules(input: &str) -> Result<Vec<TemplateRule>> {
    let mut lines = input.lines().filter(|l| !l.trim().is_empty());
    let domain = lines
        .next()
        .ok_or_else(|| DataError::Template("empty rules file".into()))?
        .trim()
        .to_lowercase();
    lines.map(|l| parse_rule(&domain, l)).collect()
}

/// Renders a rule over a table: clauses in order, a clause skipped when any
/// of its slots names an attribute the table lacks. Deterministic.
pub fn render_template(table: &Table, rule: &TemplateRule) -> Vec<String> {
    let mut out = Vec::new();
    'clauses: for clause in &rule.clauses {
        let mut rendered = Vec::new();
        for piece in &clause.pieces {
            match piece {
                Piece::Literal(tok) => rendered.push(tok.clone()),
                Piece::Slot(attr) => match table.value_of(attr) {
                    Some(value) => rendered.extend(value.iter().cloned()),
                    None => continue 'clauses,
                },
            }
        }
        out.extend(rendered);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TablePair;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn table(pairs: &[(&str, &str)]) -> Table {
        Table::new(
            pairs
                .iter()
                .map(|(a, v)| TablePair {
                    attribute: toks(a),
                    value: toks(v),
                })
                .collect(),
        )
        .unwrap()
    }

    const RULE: &str = "<name> ( born <birth date> ) is a <nationality> <occupation> .";

    #[test]
    fn renders_by_direct_substitution() {
        let rule = parse_rule("people", RULE).unwrap();
        let t = table(&[
            ("name", "walter extra"),
            ("birth date", "june 5 , 1954"),
            ("nationality", "german"),
            ("occupation", "aircraft designer and manufacturer"),
        ]);
        assert_eq!(
            render_template(&t, &rule),
            toks("walter extra ( born june 5 , 1954 ) is a german aircraft designer and manufacturer .")
        );
    }

    #[test]
    fn missing_attribute_omits_the_parenthetical_clause() {
        let rule = parse_rule("people", RULE).unwrap();
        let t = table(&[
            ("name", "walter extra"),
            ("nationality", "german"),
            ("occupation", "aircraft designer and manufacturer"),
        ]);
        assert_eq!(
            render_template(&t, &rule),
            toks("walter extra is a german aircraft designer and manufacturer .")
        );
    }

    #[test]
    fn bracket_groups_are_optional_and_unemitted() {
        let rule =
            parse_rule("people", "<name> is a <occupation> [ married to <spouse> ] .")
                .unwrap();
        let with = table(&[
            ("name", "maria silva"),
            ("occupation", "pilot"),
            ("spouse", "tomas silva"),
        ]);
        let without = table(&[("name", "maria silva"), ("occupation", "pilot")]);
        assert_eq!(
            render_template(&with, &rule),
            toks("maria silva is a pilot married to tomas silva .")
        );
        assert_eq!(
            render_template(&without, &rule),
            toks("maria silva is a pilot .")
        );
    }

    #[test]
    fn empty_rule_renders_empty() {
        let rule = parse_rule("people", "").unwrap();
        let t = table(&[("name", "x")]);
        assert!(render_template(&t, &rule).is_empty());
    }

    #[test]
    fn bare_slot_with_missing_attribute_skips_just_that_slot() {
        let rule = parse_rule("people", "a <nationality> <occupation> .").unwrap();
        let t = table(&[("occupation", "pilot")]);
        assert_eq!(render_template(&t, &rule), toks("a pilot ."));
    }

    #[test]
    fn duplicate_attributes_resolve_to_the_first_pair() {
        let rule = parse_rule("people", "<name>").unwrap();
        let t = table(&[("name", "first value"), ("name", "second value")]);
        assert_eq!(render_template(&t, &rule), toks("first value"));
    }

    #[test]
    fn parse_rules_reads_domain_then_one_rule_per_line() {
        let rules = parse_rules("people\n<name> .\n\n<name> is here .\n").unwrap();
        assert_eq!(rules.len(), 2);
        assert!(rules.iter().all(|r| r.domain == "people"));
        assert_eq!(rules[0].clauses.len(), 2);
    }

    #[test]
    fn malformed_rules_are_rejected() {
        assert!(parse_rule("d", "<name").is_err());
        assert!(parse_rule("d", "<>").is_err());
        assert!(parse_rule("d", "[ <name>").is_err());
        assert!(parse_rule("d", "x ] y").is_err());
        assert!(parse_rule("d", "( <name>").is_err());
        assert!(parse_rules("").is_err());
    }
}

//! Corpus scoring: BLEU-4, ROUGE-4 F-measure, and a fact-copy diagnostic
//! that checks which table words the generator actually reproduced.
//!
//! Scores live in [0,1] here; reports multiply by 100 for display.

use std::collections::HashMap;

use thiserror::Error;

use crate::align::{match_phrases, MatchPolicy};
use crate::data::Table;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot score an empty corpus")]
    EmptyCorpus,
    #[error("corpus sizes differ: {hyps} hypotheses vs {refs} references")]
    MismatchedCounts { hyps: usize, refs: usize },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Smoothing {
    /// Plain clipped precisions; any zero numerator zeroes the score.
    #[default]
    None,
    /// Add-one on every precision, for tiny validation sets.
    AddOne,
}

#[derive(Debug, Clone)]
pub struct BleuReport {
    pub bleu: f64,
    /// Modified n-gram precisions for n = 1..=4.
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

#[derive(Debug, Clone)]
pub struct RougeReport {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

#[derive(Debug, Clone)]
pub struct FactCopyReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ngram_counts(words: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for gram in words.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped overlap and hypothesis total for one n.
fn clipped_overlap(hyp: &[String], rf: &[String], n: usize) -> (usize, usize) {
    let hyp_counts = ngram_counts(hyp, n);
    let ref_counts = ngram_counts(rf, n);
    let overlap = hyp_counts
        .iter()
        .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    let total = hyp.len().saturating_sub(n - 1);
    (overlap, total)
}

fn check_corpus(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<()> {
    if hypotheses.len() != references.len() {
        return Err(MetricsError::MismatchedCounts {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    Ok(())
}

/// Corpus BLEU-4 with one reference per hypothesis: clipped modified n-gram
/// precisions pooled over the corpus, geometric mean over n = 1..4, brevity
/// penalty exp(1 - r/c) when the hypothesis side is shorter.
pub fn bleu4(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<BleuReport> {
    bleu4_with(hypotheses, references, Smoothing::None)
}

pub fn bleu4_with(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    smoothing: Smoothing,
) -> Result<BleuReport> {
    check_corpus(hypotheses, references)?;
    let mut overlaps = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, rf) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += rf.len();
        for n in 1..=4 {
            let (o, t) = clipped_overlap(hyp, rf, n);
            overlaps[n - 1] += o;
            totals[n - 1] += t;
        }
    }

    let precisions: [f64; 4] = std::array::from_fn(|i| {
        let (o, t) = (overlaps[i] as f64, totals[i] as f64);
        match smoothing {
            Smoothing::None if totals[i] == 0 => 0.0,
            Smoothing::None => o / t,
            Smoothing::AddOne => (o + 1.0) / (t + 1.0),
        }
    });
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Corpus ROUGE-4: pooled clipped 4-gram overlap, precision against
/// hypothesis 4-grams, recall against reference 4-grams. Sides shorter than
/// four tokens contribute no 4-grams, so an all-short hypothesis corpus has
/// precision 0.
pub fn rouge4_f(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<RougeReport> {
    check_corpus(hypotheses, references)?;
    let (mut overlap, mut hyp_total, mut ref_total) = (0usize, 0usize, 0usize);
    for (hyp, rf) in hypotheses.iter().zip(references) {
        let (o, t) = clipped_overlap(hyp, rf, 4);
        overlap += o;
        hyp_total += t;
        ref_total += rf.len().saturating_sub(3);
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(overlap, hyp_total);
    let recall = ratio(overlap, ref_total);
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(RougeReport {
        precision,
        recall,
        f,
    })
}

fn copied_words(table: &Table, text: &[String], policy: &MatchPolicy) -> HashMap<String, usize> {
    let alignment = match_phrases(table, text, policy);
    let mut counts = HashMap::new();
    for (j, src) in alignment.sources().iter().enumerate() {
        if src.is_some() {
            *counts.entry(text[j].clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// How faithfully the hypothesis copies from the table, scored against what
/// the reference copies: both texts are matched against the values, and the
/// two multisets of matched words are compared. Both sides empty counts as
/// perfect agreement, so hypothesis = reference always scores 1.
pub fn fact_copy_f1(hypothesis: &[String], table: &Table, reference: &[String]) -> FactCopyReport {
    let policy = MatchPolicy::default();
    let pred = copied_words(table, hypothesis, &policy);
    let gold = copied_words(table, reference, &policy);
    score_multisets(&pred, &gold)
}

/// Corpus fact-copy: multiset counts pooled over examples before scoring, so
/// the order of examples cannot matter.
pub fn fact_copy_f1_corpus(
    hypotheses: &[Vec<String>],
    tables: &[Table],
    references: &[Vec<String>],
) -> Result<FactCopyReport> {
    check_corpus(hypotheses, references)?;
    if tables.len() != hypotheses.len() {
        return Err(MetricsError::MismatchedCounts {
            hyps: hypotheses.len(),
            refs: tables.len(),
        });
    }
    let policy = MatchPolicy::default();
    let (mut pred, mut gold) = (HashMap::new(), HashMap::new());
    for ((hyp, table), rf) in hypotheses.iter().zip(tables).zip(references) {
        for (w, c) in copied_words(table, hyp, &policy) {
            *pred.entry(w).or_insert(0) += c;
        }
        for (w, c) in copied_words(table, rf, &policy) {
            *gold.entry(w).or_insert(0) += c;
        }
    }
    Ok(score_multisets(&pred, &gold))
}

fn score_multisets(pred: &HashMap<String, usize>, gold: &HashMap<String, usize>) -> FactCopyReport {
    let pred_total: usize = pred.values().sum();
    let gold_total: usize = gold.values().sum();
    if pred_total == 0 && gold_total == 0 {
        return FactCopyReport {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let inter: usize = pred
        .iter()
        .map(|(w, &c)| c.min(gold.get(w).copied().unwrap_or(0)))
        .sum();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(inter, pred_total);
    let recall = ratio(inter, gold_total);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    FactCopyReport {
        precision,
        recall,
        f1,
    }
}

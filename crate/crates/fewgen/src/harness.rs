//! The full experiment grid: synthetic data, one shared pre-training run
//! per domain and seed, every requested arm at every training-set size,
//! and report rendering (a human-readable table plus tab-separated machine
//! lines and a CSV for the learning curve).

use std::collections::HashMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::MatchPolicy;
use crate::bpe::{self, MergeTable, SubwordVocab};
use crate::data::{self, Example, Table};
use crate::decode::{self, DecodeConfig};
use crate::metrics;
use crate::model::ModelConfig;
use crate::synthetic::{generate_synthetic, SyntheticDomainSpec};
use crate::template::render_template;
use crate::trainer::{
    self, corpus_fingerprint, finetune, pretrain_lm, Checkpoint, Result, TrainConfig,
    TrainerError, Variant,
};

/// Where a domain's examples come from: generated in process, or loaded
/// from record files on disk.
#[derive(Debug, Clone)]
pub enum DomainSource {
    Synthetic(SyntheticDomainSpec),
    /// `pairs` is a table+text record file (one JSON object per line).
    /// `sentences`, when given, is a plain-text pre-training corpus, one
    /// sentence per line; without it, pre-training draws on the texts of
    /// pairs left over after the train/validation/test split.
    Files {
        name: String,
        pairs: PathBuf,
        sentences: Option<PathBuf>,
    },
}

impl DomainSource {
    pub fn name(&self) -> &str {
        match self {
            DomainSource::Synthetic(spec) => &spec.name,
            DomainSource::Files { name, .. } => name,
        }
    }

    /// File-backed domain named after its record file's stem.
    pub fn from_pairs_file(pairs: PathBuf) -> Self {
        let name = pairs
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        DomainSource::Files { name, pairs, sentences: None }
    }
}

impl From<SyntheticDomainSpec> for DomainSource {
    fn from(spec: SyntheticDomainSpec) -> Self {
        DomainSource::Synthetic(spec)
    }
}

/// One column of the ablation: a trainable variant, the `full` variant
/// with its copy loss zeroed out, or the rule-based template baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Neural(Variant),
    FullNoCopyLoss,
    Template,
}

impl Arm {
    pub fn tag(self) -> &'static str {
        match self {
            Arm::Neural(v) => v.tag(),
            Arm::FullNoCopyLoss => "full-copyloss",
            Arm::Template => "template",
        }
    }

    pub fn all() -> Vec<Arm> {
        vec![
            Arm::Neural(Variant::Base),
            Arm::Neural(Variant::BaseSwitch),
            Arm::Neural(Variant::LmScratch),
            Arm::Neural(Variant::Full),
            Arm::FullNoCopyLoss,
            Arm::Template,
        ]
    }
}

impl std::str::FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "template" => Ok(Arm::Template),
            "full-copyloss" => Ok(Arm::FullNoCopyLoss),
            other => other.parse::<Variant>().map(Arm::Neural),
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Architecture knobs without the vocabulary size, which is only known
/// after subword training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPreset {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub pos_vocab: usize,
    pub dropout: f64,
}

impl Default for ModelPreset {
    fn default() -> Self {
        ModelPreset {
            d_model: 48,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 96,
            pos_vocab: 16,
            dropout: 0.1,
        }
    }
}

impl ModelPreset {
    pub fn to_config(&self, vocab_size: usize) -> ModelConfig {
        let mut c = ModelConfig::new(
            vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.max_seq_len,
        );
        c.pos_vocab = self.pos_vocab;
        c.dropout = self.dropout;
        c
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub domains: Vec<DomainSource>,
    pub train_sizes: Vec<usize>,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    /// Held-out pairs used for fine-tuning selection.
    pub val_pairs: usize,
    /// Held-out pairs the report is scored on.
    pub test_pairs: usize,
    pub pretrain_sentences: usize,
    pub num_merges: usize,
    pub preset: ModelPreset,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    /// When set, per-domain report/machine/curve files land here, and
    /// pre-training checkpoints are cached under `cache/`.
    pub out_dir: Option<PathBuf>,
}

impl ExperimentPlan {
    pub fn new<D: Into<DomainSource>>(domains: Vec<D>) -> Self {
        let pretrain = TrainConfig {
            lr: 1e-3,
            batch_size: 20,
            max_epochs: 8,
            patience: 3,
            variant: Variant::LmScratch,
            ..Default::default()
        };
        // Fine-tuning budget is counted in optimizer steps, not epochs:
        // with a fixed budget, cells that differ only in training-set size
        // get the same number of updates and the same evaluation cadence,
        // so scores across sizes measure data, not schedule.
        let train = TrainConfig {
            lr: 1e-3,
            batch_size: 20,
            max_epochs: 30,
            max_steps: Some(120),
            eval_every: Some(12),
            patience: 5,
            ..Default::default()
        };
        ExperimentPlan {
            domains: domains.into_iter().map(Into::into).collect(),
            train_sizes: vec![50, 100, 200, 500],
            arms: Arm::all(),
            seeds: vec![0, 1, 2],
            val_pairs: 100,
            test_pairs: 100,
            pretrain_sentences: 3000,
            num_merges: 300,
            preset: ModelPreset::default(),
            pretrain,
            train,
            decode: DecodeConfig::default(),
            out_dir: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(TrainerError::Data(msg));
        if self.domains.is_empty() {
            return fail("no domains to run".into());
        }
        if self.train_sizes.is_empty() || self.arms.is_empty() || self.seeds.is_empty() {
            return fail("need at least one train size, arm, and seed".into());
        }
        if self.val_pairs == 0 || self.test_pairs == 0 {
            return fail("need validation and test pairs".into());
        }
        for d in &self.domains {
            match d {
                DomainSource::Synthetic(spec) => {
                    if let Err(e) = spec.validate() {
                        return fail(format!("domain {}: {e}", spec.name));
                    }
                }
                DomainSource::Files { name, pairs, .. } => {
                    if !pairs.is_file() {
                        return fail(format!(
                            "domain {name}: dataset file {} not found",
                            pairs.display()
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One measured grid cell. Template rows carry no train size.
#[derive(Debug, Clone)]
pub struct MeasuredCell {
    pub arm: &'static str,
    pub train_size: Option<usize>,
    pub seed: u64,
    pub metrics: Vec<(&'static str, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub domain: String,
    pub cells: Vec<MeasuredCell>,
    pub failures: Vec<String>,
}

impl RunReport {
    /// Seed-averaged values, sorted by metric, then arm, then size.
    pub fn aggregate(&self) -> Vec<(&'static str, &'static str, Option<usize>, f64)> {
        let mut sums: HashMap<(&str, &str, Option<usize>), (f64, usize)> = HashMap::new();
        for cell in &self.cells {
            for &(metric, value) in &cell.metrics {
                let slot = sums.entry((metric, cell.arm, cell.train_size)).or_default();
                slot.0 += value;
                slot.1 += 1;
            }
        }
        let mut rows: Vec<_> = sums
            .into_iter()
            .map(|((m, a, s), (sum, n))| (m, a, s, sum / n as f64))
            .collect();
        rows.sort_by(|x, y| {
            (x.0, x.1, x.2.map_or(usize::MAX, |s| s))
                .cmp(&(y.0, y.1, y.2.map_or(usize::MAX, |s| s)))
        });
        rows
    }

    /// One `metric\tarm\tsize\tvalue` line per aggregated cell, scores
    /// scaled by 100. Stable across reruns of the same plan.
    pub fn machine_lines(&self) -> String {
        let mut out = String::new();
        for (metric, arm, size, value) in self.aggregate() {
            let size = size.map_or("-".into(), |s| s.to_string());
            out.push_str(&format!("{metric}\t{arm}\t{size}\t{:.4}\n", value * 100.0));
        }
        out
    }

    /// Human-readable score table, one row per arm, one column per train
    /// size; the best score in each column is starred. The template row
    /// repeats its single score under every column.
    pub fn table(&self, metric: &str) -> String {
        let rows = self.aggregate();
        let mut sizes: Vec<usize> = rows.iter().filter_map(|r| r.2).collect();
        sizes.sort_unstable();
        sizes.dedup();
        let mut arms: Vec<&str> = rows.iter().map(|r| r.1).collect();
        arms.sort_unstable();
        arms.dedup();
        let value = |arm: &str, size: Option<usize>| {
            rows.iter()
                .find(|r| r.0 == metric && r.1 == arm && r.2 == size)
                .map(|r| r.3 * 100.0)
        };
        let cell = |arm: &str, size: usize| value(arm, Some(size)).or_else(|| value(arm, None));

        let mut best: HashMap<usize, f64> = HashMap::new();
        for &size in &sizes {
            for arm in &arms {
                if let Some(v) = cell(arm, size) {
                    let slot = best.entry(size).or_insert(f64::NEG_INFINITY);
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }

        let mut out = format!("{} on {}\n\n", metric, self.domain);
        out.push_str(&format!("{:<14}", "arm"));
        for &size in &sizes {
            out.push_str(&format!("{size:>9}"));
        }
        out.push('\n');
        for arm in &arms {
            out.push_str(&format!("{arm:<14}"));
            for &size in &sizes {
                let text = match cell(arm, size) {
                    Some(v) if (v - best[&size]).abs() < 5e-3 => format!("*{v:.1}"),
                    Some(v) => format!("{v:.1}"),
                    None => "-".into(),
                };
                out.push_str(&format!("{text:>9}"));
            }
            out.push('\n');
        }
        if !self.failures.is_empty() {
            out.push_str("\nfailed cells:\n");
            for f in &self.failures {
                out.push_str(&format!("  {f}\n"));
            }
        }
        out
    }

    /// `arm,train_size,score` rows of the primary metric, for plotting the
    /// learning curve.
    pub fn curve_csv(&self, metric: &str) -> String {
        let mut out = String::from("arm,train_size,score\n");
        for (m, arm, size, value) in self.aggregate() {
            if m == metric {
                let size = size.map_or("-".into(), |s| s.to_string());
                out.push_str(&format!("{arm},{size},{:.4}\n", value * 100.0));
            }
        }
        out
    }
}

fn score_cell(
    hyps: &[Vec<String>],
    tables: &[Table],
    refs: &[Vec<String>],
) -> Result<Vec<(&'static str, f64)>> {
    Ok(vec![
        ("bleu", metrics::bleu4(hyps, refs)?.bleu),
        ("rouge4", metrics::rouge4_f(hyps, refs)?.f),
        ("fact_copy", metrics::fact_copy_f1_corpus(hyps, tables, refs)?.f1),
    ])
}

struct DomainRun<'a> {
    plan: &'a ExperimentPlan,
    source: &'a DomainSource,
    merges: MergeTable,
    vocab: SubwordVocab,
    policy: MatchPolicy,
    model: ModelConfig,
    sentences: Vec<Vec<String>>,
    train_pool: Vec<Example>,
    val: Vec<Example>,
    test: Vec<Example>,
    pretrained: HashMap<u64, Checkpoint>,
}

impl<'a> DomainRun<'a> {
    /// Fixed shuffle seed for file-backed data, so the subsample and the
    /// train/validation/test split never move between runs.
    const SPLIT_SEED: u64 = 17;

    fn set_up(plan: &'a ExperimentPlan, source: &'a DomainSource) -> Result<Self> {
        let max_size = *plan.train_sizes.iter().max().unwrap();
        let n_pairs = max_size + plan.val_pairs + plan.test_pairs;
        let (pairs, sentences) = match source {
            DomainSource::Synthetic(spec) => {
                let (pairs, textonly) =
                    generate_synthetic(spec, n_pairs, plan.pretrain_sentences);
                (pairs, textonly.into_iter().map(|e| e.text).collect())
            }
            DomainSource::Files { name, pairs, sentences } => {
                let text = std::fs::read_to_string(pairs)?;
                let mut examples = data::parse_examples(&text)
                    .map_err(|e| TrainerError::Data(format!("{}: {e}", pairs.display())))?;
                if examples.len() < n_pairs {
                    return Err(TrainerError::Data(format!(
                        "domain {name}: need {n_pairs} records, file has {}",
                        examples.len()
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(Self::SPLIT_SEED);
                examples.shuffle(&mut rng);
                let rest = examples.split_off(n_pairs);
                let mut sents: Vec<Vec<String>> = match sentences {
                    Some(p) => std::fs::read_to_string(p)?
                        .lines()
                        .filter(|l| !l.trim().is_empty())
                        .map(data::tokenize)
                        .collect(),
                    None => rest.into_iter().map(|e| e.text).collect(),
                };
                sents.truncate(plan.pretrain_sentences);
                (examples, sents)
            }
        };
        // Subwords come from the pre-training corpus; with none (a purely
        // from-scratch plan), fall back to the paired texts.
        let fallback: Vec<Vec<String>>;
        let bpe_corpus: &[Vec<String>] = if sentences.is_empty() {
            fallback = pairs.iter().map(|e| e.text.clone()).collect();
            &fallback
        } else {
            &sentences
        };
        let (merges, vocab) = bpe::train_bpe(bpe_corpus, plan.num_merges)
            .map_err(|e| TrainerError::Data(format!("subword training: {e}")))?;
        let model = plan.preset.to_config(vocab.len());
        model.validate()?;
        let mut pairs = pairs;
        let test = pairs.split_off(max_size + plan.val_pairs);
        let val = pairs.split_off(max_size);
        Ok(DomainRun {
            plan,
            source,
            merges,
            vocab,
            policy: MatchPolicy::default(),
            model,
            sentences,
            train_pool: pairs,
            val,
            test,
            pretrained: HashMap::new(),
        })
    }

    /// Cache entries are keyed by architecture and pre-training settings,
    /// so changing either retrains instead of reusing a stale checkpoint.
    fn cache_path(&self, seed: u64) -> Option<PathBuf> {
        self.plan.out_dir.as_ref().map(|d| {
            let key = serde_json::json!({
                "model": &self.model,
                "train": &self.plan.pretrain,
            });
            let cfg = trainer::fingerprint(key.to_string().as_bytes());
            d.join("cache")
                .join(format!("pretrain-{}-{}-{}.ckpt", self.source.name(), seed, cfg))
        })
    }

    fn pretrained(&mut self, seed: u64) -> Result<&Checkpoint> {
        if !self.pretrained.contains_key(&seed) {
            let path = self.cache_path(seed);
            let cached = path.as_ref().filter(|p| p.exists()).and_then(|p| {
                let ckpt = trainer::load_checkpoint(p).ok()?;
                let fits = ckpt.meta.seed == seed
                    && ckpt.meta.corpus_fingerprint == corpus_fingerprint(&self.sentences)
                    && ckpt.config().vocab_size == self.model.vocab_size
                    && ckpt.config().d_model == self.model.d_model
                    && ckpt.config().n_layers == self.model.n_layers
                    && ckpt.config().max_seq_len == self.model.max_seq_len;
                fits.then_some(ckpt)
            });
            let ckpt = match cached {
                Some(c) => c,
                None => {
                    log::info!("pre-training {} seed {seed}", self.source.name());
                    let cfg = TrainConfig {
                        seed,
                        variant: Variant::LmScratch,
                        ..self.plan.pretrain.clone()
                    };
                    let out = pretrain_lm(
                        &self.sentences,
                        &self.merges,
                        &self.vocab,
                        &self.model,
                        &cfg,
                    )?;
                    if let Some(p) = &path {
                        std::fs::create_dir_all(p.parent().unwrap())?;
                        trainer::save_checkpoint(&out.checkpoint, p)?;
                    }
                    out.checkpoint
                }
            };
            self.pretrained.insert(seed, ckpt);
        }
        Ok(&self.pretrained[&seed])
    }

    fn domain_dir(&self) -> Option<PathBuf> {
        self.plan.out_dir.as_ref().map(|d| d.join(self.source.name()))
    }

    /// Keeps every cell's raw output on disk so its scores can be
    /// recomputed independently.
    fn persist_hyps(&self, file: &str, hyps: &[Vec<String>]) -> Result<()> {
        if let Some(dir) = self.domain_dir() {
            std::fs::create_dir_all(&dir)?;
            let text: String = hyps
                .iter()
                .map(|h| crate::data::detokenize(h) + "\n")
                .collect();
            std::fs::write(dir.join(file), text)?;
        }
        Ok(())
    }

    fn persist_test_set(&self) -> Result<()> {
        if let Some(dir) = self.domain_dir() {
            std::fs::create_dir_all(&dir)?;
            std::fs::write(
                dir.join("test.jsonl"),
                crate::data::serialize_examples(&self.test),
            )?;
            let refs: String = self
                .test
                .iter()
                .map(|ex| crate::data::detokenize(&ex.text) + "\n")
                .collect();
            std::fs::write(dir.join("refs.txt"), refs)?;
        }
        Ok(())
    }

    fn run_template(&self) -> Result<MeasuredCell> {
        let DomainSource::Synthetic(spec) = self.source else {
            return Err(TrainerError::Data(
                "no template rules for a file-backed domain".into(),
            ));
        };
        let rule = &spec.templates[0];
        let hyps: Vec<Vec<String>> = self
            .test
            .iter()
            .map(|ex| render_template(&ex.table, rule))
            .collect();
        self.persist_hyps("hyp-template.txt", &hyps)?;
        let tables: Vec<Table> = self.test.iter().map(|ex| ex.table.clone()).collect();
        let refs: Vec<Vec<String>> = self.test.iter().map(|ex| ex.text.clone()).collect();
        Ok(MeasuredCell {
            arm: Arm::Template.tag(),
            train_size: None,
            seed: 0,
            metrics: score_cell(&hyps, &tables, &refs)?,
        })
    }

    fn run_neural(
        &mut self,
        arm: Arm,
        variant: Variant,
        lambda: f64,
        size: usize,
        seed: u64,
    ) -> Result<MeasuredCell> {
        if size > self.train_pool.len() {
            return Err(TrainerError::Data(format!(
                "train size {size} exceeds the generated pool of {}",
                self.train_pool.len()
            )));
        }
        let init = if variant.needs_pretrained() {
            Some(self.pretrained(seed)?.clone())
        } else {
            None
        };
        let cfg = TrainConfig {
            variant,
            seed,
            lambda,
            ..self.plan.train.clone()
        };
        let train = self.train_pool[..size].to_vec();
        let outcome = finetune(
            init.as_ref(),
            &train,
            &self.val,
            &self.merges,
            &self.vocab,
            &self.policy,
            &self.model,
            &cfg,
        )?;
        let state = &outcome.checkpoint.state;
        let mut hyps = Vec::with_capacity(self.test.len());
        for ex in &self.test {
            hyps.push(decode::generate_text(
                state,
                &ex.table,
                &self.merges,
                &self.vocab,
                &self.policy,
                &self.plan.decode,
            )?);
        }
        self.persist_hyps(&format!("hyp-{}-{size}-{seed}.txt", arm.tag()), &hyps)?;
        let tables: Vec<Table> = self.test.iter().map(|ex| ex.table.clone()).collect();
        let refs: Vec<Vec<String>> = self.test.iter().map(|ex| ex.text.clone()).collect();
        Ok(MeasuredCell {
            arm: arm.tag(),
            train_size: Some(size),
            seed,
            metrics: score_cell(&hyps, &tables, &refs)?,
        })
    }
}

/// Runs every domain in the plan, recording failed cells instead of
/// aborting the grid, and writes per-domain files when an output
/// directory is set.
pub fn run_plan(plan: &ExperimentPlan) -> Result<Vec<RunReport>> {
    plan.validate()?;
    let mut reports = Vec::new();
    for source in &plan.domains {
        let mut report = RunReport {
            domain: source.name().to_string(),
            ..Default::default()
        };
        let mut run = DomainRun::set_up(plan, source)?;
        run.persist_test_set()?;
        if plan.arms.contains(&Arm::Template) {
            match run.run_template() {
                Ok(cell) => report.cells.push(cell),
                Err(e) => report.failures.push(format!("template: {e}")),
            }
        }
        for &seed in &plan.seeds {
            for &size in &plan.train_sizes {
                for &arm in &plan.arms {
                    let (variant, lambda) = match arm {
                        Arm::Template => continue,
                        Arm::Neural(v) => (v, plan.train.lambda),
                        Arm::FullNoCopyLoss => (Variant::Full, 0.0),
                    };
                    match run.run_neural(arm, variant, lambda, size, seed) {
                        Ok(cell) => report.cells.push(cell),
                        Err(e) => report
                            .failures
                            .push(format!("{arm} size {size} seed {seed}: {e}")),
                    }
                }
            }
        }
        if let Some(dir) = &plan.out_dir {
            std::fs::create_dir_all(dir)?;
            let base = dir.join(&report.domain);
            std::fs::write(base.with_extension("report.txt"), report.table("bleu"))?;
            std::fs::write(base.with_extension("machine.tsv"), report.machine_lines())?;
            std::fs::write(base.with_extension("curve.csv"), report.curve_csv("bleu"))?;
        }
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::people_domain;

    fn fixture_report() -> RunReport {
        let cell = |arm: &'static str, size: Option<usize>, bleu: f64| MeasuredCell {
            arm,
            train_size: size,
            seed: 0,
            metrics: vec![("bleu", bleu)],
        };
        RunReport {
            domain: "people".into(),
            cells: vec![
                cell("base", Some(200), 0.061),
                cell("base+switch", Some(200), 0.213),
                cell("lm-scratch", Some(200), 0.153),
                cell("full", Some(200), 0.361),
                cell("template", None, 0.163),
            ],
            failures: vec![],
        }
    }

    #[test]
    fn machine_lines_are_sorted_and_scaled() {
        let lines = fixture_report().machine_lines();
        assert_eq!(
            lines,
            "bleu\tbase\t200\t6.1000\n\
             bleu\tbase+switch\t200\t21.3000\n\
             bleu\tfull\t200\t36.1000\n\
             bleu\tlm-scratch\t200\t15.3000\n\
             bleu\ttemplate\t-\t16.3000\n"
        );
    }

    #[test]
    fn score_table_stars_the_best_arm_per_column() {
        let table = fixture_report().table("bleu");
        assert!(table.contains("*"), "{table}");
        let full_line = table.lines().find(|l| l.starts_with("full")).unwrap();
        assert!(full_line.contains("*36.1"), "{full_line}");
        let base_line = table.lines().find(|l| l.starts_with("base ")).unwrap();
        assert!(!base_line.contains('*'), "{base_line}");
        // The template row shows its score under the 200 column.
        let tpl_line = table.lines().find(|l| l.starts_with("template")).unwrap();
        assert!(tpl_line.contains("16.3"), "{tpl_line}");
    }

    #[test]
    fn aggregation_averages_over_seeds() {
        let mut report = fixture_report();
        report.cells.push(MeasuredCell {
            arm: "full",
            train_size: Some(200),
            seed: 1,
            metrics: vec![("bleu", 0.341)],
        });
        let rows = report.aggregate();
        let full = rows
            .iter()
            .find(|r| r.1 == "full" && r.2 == Some(200))
            .unwrap();
        assert!((full.3 - 0.351).abs() < 1e-12);
    }

    #[test]
    fn curve_csv_lists_the_requested_metric_only() {
        let mut report = fixture_report();
        report.cells[0].metrics.push(("rouge4", 0.5));
        let csv = report.curve_csv("bleu");
        assert!(csv.starts_with("arm,train_size,score\n"));
        assert!(csv.contains("full,200,36.1000\n"));
        assert!(!csv.contains("rouge4"));
    }

    #[test]
    fn arms_parse_from_their_tags() {
        for arm in Arm::all() {
            assert_eq!(arm.tag().parse::<Arm>().unwrap(), arm);
        }
        assert!("nonsense".parse::<Arm>().is_err());
    }

    /// End-to-end on a deliberately tiny grid: one scratch arm plus the
    /// template baseline, and a rerun produces identical machine lines.
    #[test]
    fn tiny_grid_runs_and_repeats_exactly() {
        let mut plan = ExperimentPlan::new(vec![people_domain(11)]);
        plan.train_sizes = vec![6];
        plan.arms = vec![Arm::Neural(Variant::LmScratch), Arm::Template];
        plan.seeds = vec![0];
        plan.val_pairs = 4;
        plan.test_pairs = 4;
        plan.pretrain_sentences = 0;
        plan.num_merges = 150;
        plan.preset = ModelPreset {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 160,
            pos_vocab: 8,
            dropout: 0.1,
        };
        plan.train.max_epochs = 2;
        plan.train.max_steps = None;
        plan.train.eval_every = None;
        plan.train.batch_size = 6;
        let dir = tempfile::tempdir().unwrap();
        plan.out_dir = Some(dir.path().to_path_buf());
        let reports = run_plan(&plan).unwrap();
        assert_eq!(reports.len(), 1);
        let report = &reports[0];
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        assert_eq!(report.cells.len(), 2);
        let lines = report.machine_lines();
        assert!(lines.contains("bleu\tlm-scratch\t6\t"));
        assert!(lines.contains("bleu\ttemplate\t-\t"));
        assert!(lines.contains("fact_copy\t"));
        // Raw outputs and the test set are persisted for re-scoring.
        for file in [
            "people/test.jsonl",
            "people/refs.txt",
            "people/hyp-template.txt",
            "people/hyp-lm-scratch-6-0.txt",
            "people.machine.tsv",
            "people.report.txt",
            "people.curve.csv",
        ] {
            assert!(dir.path().join(file).exists(), "missing {file}");
        }
        let again = run_plan(&plan).unwrap();
        assert_eq!(lines, again[0].machine_lines());
    }

    /// A record file on disk stands in for a generated domain; the
    /// template arm has no rules there and lands among the recorded
    /// failures instead of aborting the grid.
    #[test]
    fn file_backed_domains_run_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (pairs, _) = generate_synthetic(&people_domain(3), 30, 0);
        let path = dir.path().join("bios.jsonl");
        std::fs::write(&path, crate::data::serialize_examples(&pairs)).unwrap();

        let mut plan = ExperimentPlan::new(vec![DomainSource::Files {
            name: "bios".into(),
            pairs: path,
            sentences: None,
        }]);
        plan.train_sizes = vec![6];
        plan.arms = vec![Arm::Neural(Variant::LmScratch), Arm::Template];
        plan.seeds = vec![0];
        plan.val_pairs = 4;
        plan.test_pairs = 4;
        plan.pretrain_sentences = 16;
        plan.num_merges = 150;
        plan.preset = ModelPreset {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 160,
            pos_vocab: 8,
            dropout: 0.1,
        };
        plan.train.max_epochs = 2;
        plan.train.max_steps = None;
        plan.train.eval_every = None;
        plan.train.batch_size = 6;
        let report = run_plan(&plan).unwrap().pop().unwrap();
        assert_eq!(report.domain, "bios");
        assert!(report.cells.iter().any(|c| c.arm == "lm-scratch"));
        assert_eq!(report.failures.len(), 1, "{:?}", report.failures);
        assert!(report.failures[0].contains("template"), "{:?}", report.failures);
    }
}

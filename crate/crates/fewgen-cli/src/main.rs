//! Command-line surface: subword training, pre-training, fine-tuning,
//! generation, scoring, and the one-command ablation grid.
//!
//! Settings resolve as flags > config file > defaults. The config file is
//! flat `key = value` text with `#` comments; keys are the long flag names
//! without the leading dashes.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use fewgen::align::MatchPolicy;
use fewgen::bpe;
use fewgen::data::{self, Table};
use fewgen::decode::{self, DecodeConfig, Mode};
use fewgen::harness::{run_plan, DomainSource, ExperimentPlan, ModelPreset};
use fewgen::metrics::{self, Smoothing};
use fewgen::synthetic::{builtin_domain, builtin_domains};
use fewgen::trainer::{
    finetune, load_checkpoint, pretrain_lm, save_checkpoint, TrainConfig, TrainerError, Variant,
};

const OUT_DIR_ENV: &str = "FEWGEN_OUT_DIR";

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Training(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Training(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Training(m) => m,
        }
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::Diverged { .. } => CliError::Training(e.to_string()),
            TrainerError::VariantInit { .. } => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "fewgen", version, about = "Few-shot table-to-text generation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Flat key = value settings file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed for training runs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Execution is single-threaded; higher values are
    /// accepted for compatibility and logged as ignored.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Pin fully reproducible execution (implies one thread).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory (default: $FEWGEN_OUT_DIR, else ./fewgen-runs).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

impl GlobalArgs {
    fn out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("fewgen-runs"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Learn subword merges from a text corpus (one sentence per line).
    BpeTrain(BpeTrainArgs),
    /// Pre-train the language model on a text corpus.
    Pretrain(PretrainArgs),
    /// Fine-tune a variant on table/text pairs.
    Finetune(FinetuneArgs),
    /// Generate text for tables from a trained checkpoint.
    Generate(GenerateArgs),
    /// Score a hypothesis file against references.
    Evaluate(EvaluateArgs),
    /// Run the ablation and train-size grid and render the report.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct BpeTrainArgs {
    /// Text corpus, one sentence per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Number of merge rules to learn.
    #[arg(long)]
    merges: Option<usize>,
    /// Output prefix; writes PREFIX.merges and PREFIX.vocab.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    max_seq: Option<usize>,
    #[arg(long)]
    pos_vocab: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Optimizer-step budget; overrides the epoch cap when set.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Steps between validation checks (default: once per epoch).
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Text corpus, one sentence per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Subword file prefix from `bpe-train`.
    #[arg(long)]
    subwords: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    opt: TrainArgs,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Training pairs (JSON lines with "table" and "text").
    #[arg(long)]
    train: PathBuf,
    /// Validation pairs for model selection.
    #[arg(long)]
    val: PathBuf,
    /// Subword file prefix from `bpe-train`.
    #[arg(long)]
    subwords: PathBuf,
    /// base, base+switch, lm-scratch, or full.
    #[arg(long)]
    variant: String,
    /// Pre-training checkpoint (required for all variants but lm-scratch;
    /// it fixes the architecture).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    /// Copy-loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Select the best epoch by validation BLEU instead of loss.
    #[arg(long)]
    select_by_bleu: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    opt: TrainArgs,
}

#[derive(Args)]
struct GenerateArgs {
    /// Fine-tuned checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Subword file prefix from `bpe-train`.
    #[arg(long)]
    subwords: PathBuf,
    /// Inline table, e.g. "name: ann lee | birth place: oslo".
    #[arg(long, conflicts_with = "tables")]
    table: Option<String>,
    /// JSON-lines file of tables (text fields are ignored).
    #[arg(long)]
    tables: Option<PathBuf>,
    /// Beam width; omit for greedy decoding.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_length: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Hypothesis file, one sentence per line.
    #[arg(long)]
    hyp: PathBuf,
    /// Reference file, one sentence per line.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Tables for the fact-copy score (JSON lines).
    #[arg(long)]
    tables: Option<PathBuf>,
    /// Add-one smoothing for BLEU on tiny sets.
    #[arg(long)]
    smooth: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Built-in domain names, comma-separated, or "all".
    #[arg(long, default_value = "all")]
    domains: String,
    /// Training-set sizes, comma-separated.
    #[arg(long)]
    sizes: Option<String>,
    /// Arms to run, comma-separated (default: every variant, full without
    /// the copy loss, and the template baseline).
    #[arg(long)]
    arms: Option<String>,
    /// Fine-tuning seeds, comma-separated.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    val_pairs: Option<usize>,
    #[arg(long)]
    test_pairs: Option<usize>,
    #[arg(long)]
    pretrain_sentences: Option<usize>,
    /// Epochs for the shared pre-training run (--epochs only affects
    /// fine-tuning).
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    merges: Option<usize>,
    /// Data-generation seed for the synthetic domains.
    #[arg(long)]
    data_seed: Option<u64>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    opt: TrainArgs,
}

/// Flat `key = value` settings file.
struct Conf(HashMap<String, String>);

impl Conf {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            for (idx, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(CliError::Usage(format!(
                        "config {} line {}: expected key = value",
                        path.display(),
                        idx + 1
                    )));
                };
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(Conf(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                CliError::Usage(format!("config key {key}: cannot parse {raw:?}"))
            }),
        }
    }
}

fn pick<T: FromStr>(flag: Option<T>, conf: &Conf, key: &str, default: T) -> Result<T> {
    Ok(match flag {
        Some(v) => v,
        None => conf.get(key)?.unwrap_or(default),
    })
}

fn parse_list<T: FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| CliError::Usage(format!("bad {what} entry {s:?}")))
        })
        .collect()
}

fn resolve_preset(args: &ModelArgs, conf: &Conf) -> Result<ModelPreset> {
    let d = ModelPreset::default();
    Ok(ModelPreset {
        d_model: pick(args.d_model, conf, "d-model", d.d_model)?,
        n_layers: pick(args.n_layers, conf, "n-layers", d.n_layers)?,
        n_heads: pick(args.n_heads, conf, "n-heads", d.n_heads)?,
        max_seq_len: pick(args.max_seq, conf, "max-seq", d.max_seq_len)?,
        pos_vocab: pick(args.pos_vocab, conf, "pos-vocab", d.pos_vocab)?,
        dropout: pick(args.dropout, conf, "dropout", d.dropout)?,
    })
}

fn resolve_train(
    args: &TrainArgs,
    conf: &Conf,
    seed: Option<u64>,
    base: TrainConfig,
) -> Result<TrainConfig> {
    // An explicit epoch count turns the step budget off: the two caps are
    // alternatives, and the one the user names wins.
    let epoch_mode = args.epochs.is_some() || conf.get::<usize>("epochs")?.is_some();
    let max_steps = match pick_set(args.max_steps, conf, "max-steps")? {
        Some(v) => Some(v),
        None if epoch_mode => None,
        None => base.max_steps,
    };
    let eval_every = match pick_set(args.eval_every, conf, "eval-every")? {
        Some(v) => Some(v),
        None if epoch_mode => None,
        None => base.eval_every,
    };
    Ok(TrainConfig {
        lr: pick(args.lr, conf, "lr", base.lr)?,
        batch_size: pick(args.batch_size, conf, "batch-size", base.batch_size)?,
        max_epochs: pick(args.epochs, conf, "epochs", base.max_epochs)?,
        max_steps,
        eval_every,
        patience: pick(args.patience, conf, "patience", base.patience)?,
        seed: pick(seed, conf, "seed", base.seed)?,
        ..base
    })
}

/// Like `pick` for settings that may simply stay unset.
fn pick_set<T: FromStr>(flag: Option<T>, conf: &Conf, key: &str) -> Result<Option<T>> {
    Ok(match flag {
        Some(v) => Some(v),
        None => conf.get(key)?,
    })
}

fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(data::tokenize)
        .collect())
}

fn read_pairs(path: &Path) -> Result<Vec<data::Example>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    data::parse_examples(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn subword_path(prefix: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}.{suffix}", prefix.display()))
}

fn load_subwords(prefix: &Path) -> Result<(bpe::MergeTable, bpe::SubwordVocab)> {
    let merges_path = subword_path(prefix, "merges");
    let vocab_path = subword_path(prefix, "vocab");
    let merges_text = std::fs::read_to_string(&merges_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", merges_path.display())))?;
    let vocab_text = std::fs::read_to_string(&vocab_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", vocab_path.display())))?;
    let merges =
        bpe::merges_from_string(&merges_text).map_err(|e| CliError::Data(e.to_string()))?;
    let vocab =
        bpe::vocab_from_string(&vocab_text).map_err(|e| CliError::Data(e.to_string()))?;
    Ok((merges, vocab))
}

fn parse_table_spec(raw: &str) -> Result<Table> {
    let mut pairs = Vec::new();
    for segment in raw.split('|') {
        let Some((attr, value)) = segment.split_once(':') else {
            return Err(CliError::Usage(format!(
                "table segment {segment:?}: expected attribute: value"
            )));
        };
        pairs.push(data::TablePair {
            attribute: data::tokenize(attr),
            value: data::tokenize(value),
        });
    }
    Table::new(pairs).map_err(CliError::Usage)
}

fn cmd_bpe_train(args: &BpeTrainArgs, conf: &Conf) -> Result<()> {
    let corpus = read_sentences(&args.corpus)?;
    let merges = pick(args.merges, conf, "merges", 300)?;
    let (table, vocab) =
        bpe::train_bpe(&corpus, merges).map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(subword_path(&args.out, "merges"), bpe::merges_to_string(&table))?;
    std::fs::write(subword_path(&args.out, "vocab"), bpe::vocab_to_string(&vocab))?;
    println!(
        "learned {} merges, {} subwords",
        table.merges().len(),
        vocab.len()
    );
    Ok(())
}

fn cmd_pretrain(args: &PretrainArgs, conf: &Conf, global: &GlobalArgs) -> Result<()> {
    let corpus = read_sentences(&args.corpus)?;
    let (merges, vocab) = load_subwords(&args.subwords)?;
    let preset = resolve_preset(&args.model, conf)?;
    let model = preset.to_config(vocab.len());
    let cfg = TrainConfig {
        variant: Variant::LmScratch,
        ..resolve_train(&args.opt, conf, global.seed, TrainConfig::default())?
    };
    let outcome = pretrain_lm(&corpus, &merges, &vocab, &model, &cfg)?;
    save_checkpoint(&outcome.checkpoint, &args.out)?;
    println!(
        "pre-trained for {} steps; best validation loss {:.4}; wrote {}",
        outcome.steps,
        outcome
            .val_history
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min),
        args.out.display()
    );
    Ok(())
}

fn cmd_finetune(args: &FinetuneArgs, conf: &Conf, global: &GlobalArgs) -> Result<()> {
    let variant: Variant = args.variant.parse().map_err(CliError::Usage)?;
    if variant.needs_pretrained() && args.init.is_none() {
        return Err(CliError::Usage(format!(
            "variant {variant} starts from a pre-trained checkpoint: \
             run `fewgen pretrain` first and pass --init"
        )));
    }
    let train_pairs = read_pairs(&args.train)?;
    let val_pairs = read_pairs(&args.val)?;
    let (merges, vocab) = load_subwords(&args.subwords)?;
    let init = args.init.as_deref().map(load_checkpoint).transpose()?;

    let model = match &init {
        Some(ckpt) => {
            let mut m = ckpt.config().clone();
            if let Some(dropout) = args.model.dropout {
                m.dropout = dropout;
            }
            m
        }
        None => resolve_preset(&args.model, conf)?.to_config(vocab.len()),
    };
    let mut cfg = resolve_train(&args.opt, conf, global.seed, TrainConfig::default())?;
    cfg.variant = variant;
    cfg.lambda = pick(args.lambda, conf, "lambda", cfg.lambda)?;
    cfg.select_by_bleu = args.select_by_bleu;

    let policy = MatchPolicy::default();
    let outcome = finetune(
        init.as_ref(),
        &train_pairs,
        &val_pairs,
        &merges,
        &vocab,
        &policy,
        &model,
        &cfg,
    )?;
    save_checkpoint(&outcome.checkpoint, &args.out)?;
    println!(
        "fine-tuned {variant} for {} steps; best validation score {:.4}; wrote {}",
        outcome.steps,
        outcome
            .val_history
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min),
        args.out.display()
    );
    Ok(())
}

fn cmd_generate(args: &GenerateArgs, conf: &Conf) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (merges, vocab) = load_subwords(&args.subwords)?;
    let tables: Vec<Table> = match (&args.table, &args.tables) {
        (Some(spec), None) => vec![parse_table_spec(spec)?],
        (None, Some(path)) => read_pairs(path)?.into_iter().map(|ex| ex.table).collect(),
        _ => {
            return Err(CliError::Usage(
                "pass exactly one of --table or --tables".into(),
            ))
        }
    };
    let beam = match args.beam {
        Some(w) => Some(w),
        None => conf.get("beam")?,
    };
    let cfg = DecodeConfig {
        mode: if beam.is_some() { Mode::Beam } else { Mode::Greedy },
        beam_width: beam.unwrap_or(4),
        max_length: pick(args.max_length, conf, "max-length", 64)?,
        ..Default::default()
    };
    let policy = MatchPolicy::default();
    for table in &tables {
        let words = decode::generate_text(&ckpt.state, table, &merges, &vocab, &policy, &cfg)
            .map_err(|e| CliError::Data(e.to_string()))?;
        println!("{}", data::detokenize(&words));
    }
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let hyps = read_sentences(&args.hyp)?;
    let refs = read_sentences(&args.reference)?;
    let smoothing = if args.smooth { Smoothing::AddOne } else { Smoothing::None };
    let bleu = metrics::bleu4_with(&hyps, &refs, smoothing)
        .map_err(|e| CliError::Data(e.to_string()))?;
    if !args.smooth && bleu.precisions.iter().any(|&p| p == 0.0) {
        eprintln!(
            "warning: a clipped n-gram precision is zero, so BLEU collapses to 0; \
             consider --smooth on tiny sets"
        );
    }
    println!("BLEU-4: {:.4}", bleu.bleu * 100.0);
    let rouge = metrics::rouge4_f(&hyps, &refs).map_err(|e| CliError::Data(e.to_string()))?;
    println!("ROUGE-4: {:.4}", rouge.f * 100.0);
    if let Some(tables_path) = &args.tables {
        let tables: Vec<Table> = read_pairs(tables_path)?
            .into_iter()
            .map(|ex| ex.table)
            .collect();
        let fc = metrics::fact_copy_f1_corpus(&hyps, &tables, &refs)
            .map_err(|e| CliError::Data(e.to_string()))?;
        println!("fact-copy-F1: {:.4}", fc.f1 * 100.0);
    }
    Ok(())
}

fn cmd_ablate(args: &AblateArgs, conf: &Conf, global: &GlobalArgs) -> Result<()> {
    let data_seed = pick(args.data_seed, conf, "data-seed", 11)?;
    let domains: Vec<DomainSource> = if args.domains == "all" {
        builtin_domains(data_seed).into_iter().map(Into::into).collect()
    } else {
        parse_list::<String>(&args.domains, "domain")?
            .iter()
            .map(|name| {
                // A domain is either a built-in generator or a record file
                // on disk.
                if let Some(spec) = builtin_domain(name, data_seed) {
                    Ok(spec.into())
                } else if Path::new(name).is_file() {
                    Ok(DomainSource::from_pairs_file(name.into()))
                } else {
                    Err(CliError::Usage(format!(
                        "unknown domain {name:?} (not a built-in name or a dataset file)"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?
    };

    let mut plan = ExperimentPlan::new(domains);
    if let Some(raw) = args.sizes.as_deref().or(conf.0.get("sizes").map(|s| s.as_str())) {
        plan.train_sizes = parse_list(raw, "size")?;
    }
    if let Some(raw) = args.arms.as_deref().or(conf.0.get("arms").map(|s| s.as_str())) {
        plan.arms = parse_list(raw, "arm")?;
    }
    if let Some(raw) = args.seeds.as_deref().or(conf.0.get("seeds").map(|s| s.as_str())) {
        plan.seeds = parse_list(raw, "seed")?;
    }
    plan.val_pairs = pick(args.val_pairs, conf, "val-pairs", plan.val_pairs)?;
    plan.test_pairs = pick(args.test_pairs, conf, "test-pairs", plan.test_pairs)?;
    plan.pretrain_sentences = pick(
        args.pretrain_sentences,
        conf,
        "pretrain-sentences",
        plan.pretrain_sentences,
    )?;
    plan.num_merges = pick(args.merges, conf, "merges", plan.num_merges)?;
    plan.preset = resolve_preset(&args.model, conf)?;
    let pretrain_epochs = pick(
        args.pretrain_epochs,
        conf,
        "pretrain-epochs",
        plan.pretrain.max_epochs,
    )?;
    // Pre-training keeps its own epoch-based schedule; the step budget and
    // epoch flags steer fine-tuning only.
    plan.pretrain = TrainConfig {
        max_epochs: pretrain_epochs,
        max_steps: None,
        eval_every: None,
        patience: plan.pretrain.patience,
        ..resolve_train(&args.opt, conf, None, plan.pretrain.clone())?
    };
    plan.train = resolve_train(&args.opt, conf, None, plan.train.clone())?;
    plan.out_dir = Some(global.out_dir());

    let reports = run_plan(&plan)?;
    for report in &reports {
        println!("{}", report.table("bleu"));
        print!("{}", report.machine_lines());
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let conf = Conf::load(cli.global.config.as_deref())?;
    if let Some(threads) = cli.global.threads {
        if threads > 1 && !cli.global.deterministic {
            log::warn!("running single-threaded; --threads {threads} has no effect");
        }
    }
    match &cli.cmd {
        Command::BpeTrain(args) => cmd_bpe_train(args, &conf),
        Command::Pretrain(args) => cmd_pretrain(args, &conf, &cli.global),
        Command::Finetune(args) => cmd_finetune(args, &conf, &cli.global),
        Command::Generate(args) => cmd_generate(args, &conf),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ablate(args) => cmd_ablate(args, &conf, &cli.global),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

//! Training: language-model pre-training on text alone, few-shot
//! fine-tuning with the copy loss, checkpoint files, and model selection.
//!
//! The four ablation arms differ only in where their parameters start and
//! whether the copy switch is wired in: `base` takes pre-trained word
//! embeddings (frozen) under a scratch transformer without the switch,
//! `base+switch` adds the switch, `lm-scratch` trains everything from
//! random with the switch, and `full` starts from the whole pre-trained
//! stack. A fifth condition — `full` without the copy loss — is just
//! λ = 0.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndiff::{clip_global_norm, AdamConfig, AdamState, ParamRef, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{match_phrases, project_to_subwords, AlignError, MatchPolicy};
use crate::bpe::{self, BpeError, MergeTable, SubwordVocab};
use crate::data::Example;
use crate::decode::{self, DecodeConfig, DecodeError, Mode, PreparedTable};
use crate::metrics::{self, MetricsError};
use crate::model::{
    apply_freeze, forward, init_state, ModelConfig, ModelError, ModelState, PreparedExample,
};

const CHECKPOINT_MAGIC: &[u8] = b"FSNLG1\n";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("bad data: {0}")]
    Data(String),
    #[error("variant {variant}: {msg}")]
    VariantInit { variant: Variant, msg: String },
    #[error("training diverged at step {step}")]
    Diverged { step: u64 },
    #[error("checkpoint ends before tensor {tensor}")]
    Truncated { tensor: String },
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] ndiff::Error),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Subwords(#[from] BpeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, TrainerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "base+switch")]
    BaseSwitch,
    #[serde(rename = "lm-scratch")]
    LmScratch,
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::BaseSwitch => "base+switch",
            Variant::LmScratch => "lm-scratch",
            Variant::Full => "full",
        }
    }

    pub fn uses_switch(self) -> bool {
        self != Variant::Base
    }

    /// Whether fine-tuning must start from a pre-training checkpoint.
    pub fn needs_pretrained(self) -> bool {
        self != Variant::LmScratch
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "base" => Ok(Variant::Base),
            "base+switch" => Ok(Variant::BaseSwitch),
            "lm-scratch" => Ok(Variant::LmScratch),
            "full" => Ok(Variant::Full),
            other => Err(format!(
                "unknown variant {other:?} (expected base, base+switch, lm-scratch, or full)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Auto-clamped to the training-set size.
    pub batch_size: usize,
    /// Copy-loss weight, applied to switch-bearing variants.
    pub lambda: f64,
    pub max_epochs: usize,
    /// Optimizer-step budget. When set it replaces the epoch cap, so runs
    /// on differently sized training sets get identical optimization
    /// budgets instead of identical data passes.
    pub max_steps: Option<u64>,
    /// Steps between evaluations; unset evaluates once per epoch.
    pub eval_every: Option<u64>,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Select the checkpoint by validation BLEU instead of validation loss.
    pub select_by_bleu: bool,
    /// Targets longer than this many subwords are cut at a word boundary
    /// (with a logged warning).
    pub max_target_subwords: usize,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            batch_size: 40,
            lambda: 0.7,
            max_epochs: 30,
            max_steps: None,
            eval_every: None,
            patience: 10,
            seed: 0,
            variant: Variant::Full,
            select_by_bleu: false,
            max_target_subwords: 64,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(TrainerError::Data(msg.into()));
        if self.batch_size == 0 {
            return fail("batch size must be at least 1");
        }
        if self.patience == 0 {
            return fail("patience must be at least 1");
        }
        if self.max_epochs == 0 {
            return fail("need at least one epoch");
        }
        if self.max_steps == Some(0) {
            return fail("step budget must be at least 1");
        }
        if self.eval_every == Some(0) {
            return fail("evaluation interval must be at least 1 step");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail("learning rate must be positive and finite");
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return fail("lambda must be finite and >= 0");
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return fail("clip norm must be positive and finite");
        }
        if self.max_target_subwords == 0 {
            return fail("target budget must be at least 1 subword");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub step: u64,
    pub seed: u64,
    pub corpus_fingerprint: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: ModelState<f32>,
    pub meta: TrainMeta,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.state.config
    }
}

/// A finished training run: the selected checkpoint plus the evaluation
/// trace that selected it (validation loss, or negated validation BLEU
/// under BLEU selection — lower is better either way).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub val_history: Vec<f64>,
    pub steps: u64,
}

/// FNV-1a, fixed here so fingerprints stay stable across toolchains.
pub fn fingerprint(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Stable fingerprint of a sentence corpus, as recorded in checkpoints.
pub fn corpus_fingerprint(sentences: &[Vec<String>]) -> String {
    let joined: Vec<u8> = sentences
        .iter()
        .flat_map(|s| {
            let mut line = s.join(" ").into_bytes();
            line.push(b'\n');
            line
        })
        .collect();
    fingerprint(&joined)
}

// ---------------------------------------------------------------------------
// Example preparation

/// Turns raw table/text pairs into model-ready examples: subword-encodes
/// both sides, matches the target against the table, projects the match
/// down to subwords, and derives the per-step copy features. Targets are
/// cut at a word boundary to the subword budget (and to the model window).
pub fn prepare_examples(
    examples: &[Example],
    merges: &MergeTable,
    vocab: &SubwordVocab,
    policy: &MatchPolicy,
    model: &ModelConfig,
    max_target_subwords: usize,
) -> Result<Vec<PreparedExample>> {
    let mut out = Vec::with_capacity(examples.len());
    let mut cut = 0usize;
    for ex in examples {
        let table = decode::prepare_table(&ex.table, merges, vocab, policy);
        let prefix = table.tokens.len() + 1;
        if prefix + 2 > model.max_seq_len {
            return Err(TrainerError::Data(format!(
                "table occupies {} of {} sequence rows, leaving no room for text",
                prefix, model.max_seq_len
            )));
        }
        let budget = max_target_subwords.min(model.max_seq_len - prefix - 1).max(1);

        let counts: Vec<usize> = ex
            .text
            .iter()
            .map(|w| bpe::encode_word(w, merges, vocab).len())
            .collect();
        let mut keep = 0usize;
        let mut used = 0usize;
        while keep < ex.text.len() && used + counts[keep] <= budget {
            used += counts[keep];
            keep += 1;
        }
        if keep < ex.text.len() {
            cut += 1;
        }
        let words = &ex.text[..keep];

        let word_align = match_phrases(&ex.table, words, policy);
        let sub_align = project_to_subwords(&word_align, &counts[..keep])?;
        let ids: Vec<u32> = words
            .iter()
            .flat_map(|w| bpe::encode_word(w, merges, vocab))
            .collect();
        let m = ids.len();
        debug_assert_eq!(m, used);

        let mut input_ids = Vec::with_capacity(m + 1);
        input_ids.push(bpe::BOS);
        input_ids.extend(&ids);
        let mut gold_ids = ids;
        gold_ids.push(bpe::EOS);

        let mut feat_attr = vec![0usize; m + 1];
        let mut feat_pos = vec![0usize; m + 1];
        let mut matched = vec![false; m + 1];
        for (k, source) in sub_align.sources().iter().enumerate() {
            if let Some(s) = source {
                // The token's own features ride with it as decoder input
                // (position k + 1); its match supervises the step that
                // predicts it (position k).
                feat_attr[k + 1] = s.attr_index + 1;
                feat_pos[k + 1] = s.fwd_pos;
                matched[k] = true;
            }
        }

        out.push(PreparedExample {
            table_tokens: table.tokens,
            attr_subwords: table.attr_subwords,
            input_ids,
            gold_ids,
            feat_attr,
            feat_pos,
            matched,
        });
    }
    if cut > 0 {
        log::warn!("cut {cut} of {} targets to the subword budget", examples.len());
    }
    Ok(out)
}

fn text_only_examples(sentences: &[Vec<String>]) -> Vec<Example> {
    sentences
        .iter()
        .map(|s| Example {
            table: crate::data::Table::empty(),
            text: s.clone(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// The loop

struct BleuSelection<'a> {
    tables: Vec<PreparedTable>,
    references: Vec<Vec<String>>,
    vocab: &'a SubwordVocab,
}

fn batched_val_loss(
    state: &ModelState<f32>,
    val: &[PreparedExample],
    batch: usize,
) -> Result<f64> {
    let mut nll_weighted = 0.0;
    let mut tokens = 0usize;
    let mut copy_weighted = 0.0;
    let mut examples = 0usize;
    let mut lambda = 0.0;
    for chunk in val.chunks(batch) {
        let pass = forward(state, chunk, None)?;
        let steps: usize = chunk.iter().map(|e| e.steps()).sum();
        nll_weighted += pass.breakdown.nll * steps as f64;
        tokens += steps;
        copy_weighted += pass.breakdown.copy_term * chunk.len() as f64;
        examples += chunk.len();
        lambda = pass.breakdown.lambda;
    }
    Ok(nll_weighted / tokens as f64 + lambda * copy_weighted / examples as f64)
}

fn validation_score(
    state: &ModelState<f32>,
    val: &[PreparedExample],
    batch: usize,
    bleu: Option<&BleuSelection<'_>>,
) -> Result<f64> {
    match bleu {
        None => batched_val_loss(state, val, batch),
        Some(sel) => {
            let cfg = DecodeConfig { mode: Mode::Greedy, ..Default::default() };
            let mut hyps = Vec::with_capacity(sel.tables.len());
            for table in &sel.tables {
                let out = decode::generate(state, table, &cfg)?;
                hyps.push(bpe::decode(&out.ids, sel.vocab)?);
            }
            // Negated so that lower stays better for the selection loop.
            Ok(-metrics::bleu4(&hyps, &sel.references)?.bleu)
        }
    }
}

/// Records one validation score against the best seen so far; true means
/// patience ran out.
fn note_score(
    score: f64,
    step: u64,
    state: &ModelState<f32>,
    best: &mut Option<(f64, ModelState<f32>, u64)>,
    history: &mut Vec<f64>,
    stale: &mut usize,
    patience: usize,
) -> bool {
    history.push(score);
    if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
        *best = Some((score, state.clone(), step));
        *stale = 0;
        false
    } else {
        *stale += 1;
        *stale >= patience
    }
}

fn run_training(
    state: &mut ModelState<f32>,
    train: &[PreparedExample],
    val: &[PreparedExample],
    cfg: &TrainConfig,
    bleu: Option<&BleuSelection<'_>>,
) -> Result<(ModelState<f32>, Vec<f64>, u64)> {
    let batch = cfg.batch_size.min(train.len()).max(1);
    let adam_cfg = AdamConfig { lr: cfg.lr as f32, ..Default::default() };
    let mut adam = AdamState::new(state.params().len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, ModelState<f32>, u64)> = None;
    let mut history = Vec::new();
    let mut stale = 0usize;
    let mut step = 0u64;
    let mut epoch = 0usize;

    // With a step budget the epoch cap is moot: the budget (or patience)
    // ends the run, and every training set gets the same number of updates
    // no matter how many passes over the data that takes.
    'training: while cfg.max_steps.is_some() || epoch < cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            if cfg.max_steps.is_some_and(|cap| step >= cap) {
                break 'training;
            }
            let examples: Vec<PreparedExample> =
                chunk.iter().map(|&i| train[i].clone()).collect();
            let pass = forward(state, &examples, Some(&mut rng))?;
            if !pass.breakdown.total.is_finite() {
                return Err(TrainerError::Diverged { step });
            }
            let mut grads = pass.tape.backward(pass.loss)?;
            let grad_vec: Vec<Option<Tensor<f32>>> =
                pass.param_vars.iter().map(|&v| grads.take(v)).collect();
            let scale = clip_global_norm(&grad_vec, cfg.clip_norm as f32);
            let mut refs: Vec<ParamRef<'_, f32>> = state
                .params_mut()
                .iter_mut()
                .map(|p| ParamRef {
                    name: &p.name,
                    value: &mut p.value,
                    frozen: p.frozen,
                })
                .collect();
            adam.step(&adam_cfg, &mut refs, &grad_vec, scale)
                .map_err(|_| TrainerError::Diverged { step })?;
            step += 1;

            if cfg.eval_every.is_some_and(|every| step % every == 0) {
                let score = validation_score(state, val, batch, bleu)?;
                if !score.is_finite() {
                    return Err(TrainerError::Diverged { step });
                }
                log::debug!("step {step}: validation score {score:.6}");
                if note_score(score, step, state, &mut best, &mut history, &mut stale, cfg.patience)
                {
                    break 'training;
                }
            }
        }

        if cfg.eval_every.is_none() {
            let score = validation_score(state, val, batch, bleu)?;
            if !score.is_finite() {
                return Err(TrainerError::Diverged { step });
            }
            log::debug!("epoch {epoch}: validation score {score:.6}");
            if note_score(score, step, state, &mut best, &mut history, &mut stale, cfg.patience) {
                break;
            }
        }
        epoch += 1;
    }

    // A budget smaller than the evaluation interval can end the run without
    // a single look at the validation set; take one now.
    if history.is_empty() {
        let score = validation_score(state, val, batch, bleu)?;
        if !score.is_finite() {
            return Err(TrainerError::Diverged { step });
        }
        history.push(score);
        best = Some((score, state.clone(), step));
    }
    let (_, best_state, best_step) = best.expect("at least one evaluation ran");
    Ok((best_state, history, best_step))
}

// ---------------------------------------------------------------------------
// Entry points

/// Next-token pre-training on bare sentences: no tables, no switch. One in
/// ten sentences is held out for selection (all of them when the corpus is
/// too small to spare any). Returns the best-validation checkpoint.
pub fn pretrain_lm(
    sentences: &[Vec<String>],
    merges: &MergeTable,
    vocab: &SubwordVocab,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if sentences.is_empty() {
        return Err(TrainerError::Data("empty pre-training corpus".into()));
    }
    let mut config = model.clone();
    config.switch_enabled = false;
    config.pretrained_init = false;
    config.freeze_word_embeddings = false;
    config.validate()?;

    let policy = MatchPolicy::default();
    let all = prepare_examples(
        &text_only_examples(sentences),
        merges,
        vocab,
        &policy,
        &config,
        cfg.max_target_subwords,
    )?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, ex) in all.into_iter().enumerate() {
        if i % 10 == 9 {
            val.push(ex);
        } else {
            train.push(ex);
        }
    }
    if val.is_empty() {
        val = train.clone();
    }
    if train.is_empty() {
        train = val.clone();
    }

    let mut state = init_state::<f32>(&config, cfg.seed)?;
    let (best, history, steps) = run_training(&mut state, &train, &val, cfg, None)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            state: best,
            meta: TrainMeta {
                step: steps,
                seed: cfg.seed,
                corpus_fingerprint: corpus_fingerprint(sentences),
            },
        },
        val_history: history,
        steps,
    })
}

fn shape_fields(c: &ModelConfig) -> (usize, usize, usize, usize, usize, usize, usize) {
    (
        c.vocab_size,
        c.d_model,
        c.n_layers,
        c.n_heads,
        c.max_seq_len,
        c.pos_embed_dim,
        c.pos_vocab,
    )
}

/// Fine-tunes one ablation arm on table/text pairs. Pre-trained variants
/// must pass the pre-training checkpoint (`lm-scratch` must not); its word
/// embeddings come in frozen, and `full` additionally inherits the whole
/// transformer stack. Early-stops on validation score and returns the best
/// checkpoint seen.
pub fn finetune(
    init: Option<&Checkpoint>,
    train: &[Example],
    val: &[Example],
    merges: &MergeTable,
    vocab: &SubwordVocab,
    policy: &MatchPolicy,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainerError::Data(
            "fine-tuning needs non-empty train and validation sets".into(),
        ));
    }
    match (cfg.variant.needs_pretrained(), init) {
        (true, None) => {
            return Err(TrainerError::VariantInit {
                variant: cfg.variant,
                msg: "requires a pre-training checkpoint".into(),
            })
        }
        (false, Some(_)) => {
            return Err(TrainerError::VariantInit {
                variant: cfg.variant,
                msg: "trains from scratch and takes no checkpoint".into(),
            })
        }
        _ => {}
    }
    if let Some(ckpt) = init {
        if shape_fields(ckpt.config()) != shape_fields(model) {
            return Err(TrainerError::VariantInit {
                variant: cfg.variant,
                msg: format!(
                    "checkpoint shape {:?} does not fit requested model {:?}",
                    shape_fields(ckpt.config()),
                    shape_fields(model)
                ),
            });
        }
    }

    let mut config = model.clone();
    config.lambda = cfg.lambda;
    config.switch_enabled = cfg.variant.uses_switch();
    config.pretrained_init = init.is_some();
    config.freeze_word_embeddings = init.is_some();
    config.validate()?;

    let mut state = init_state::<f32>(&config, cfg.seed)?;
    if let Some(ckpt) = init {
        let inherit_stack = cfg.variant == Variant::Full;
        for p in ckpt.state.params() {
            let inherited = p.name == "wte"
                || inherit_stack
                    && (p.name == "wpe"
                        || p.name.starts_with("block")
                        || p.name.starts_with("lnf."));
            if inherited {
                *state.tensor_mut(&p.name) = p.value.clone();
            }
        }
    }
    apply_freeze(&mut state);

    let prepared_train =
        prepare_examples(train, merges, vocab, policy, &config, cfg.max_target_subwords)?;
    let prepared_val =
        prepare_examples(val, merges, vocab, policy, &config, cfg.max_target_subwords)?;

    let selection = cfg.select_by_bleu.then(|| BleuSelection {
        tables: val
            .iter()
            .map(|ex| decode::prepare_table(&ex.table, merges, vocab, policy))
            .collect(),
        references: val.iter().map(|ex| ex.text.clone()).collect(),
        vocab,
    });

    let (best, history, steps) =
        run_training(&mut state, &prepared_train, &prepared_val, cfg, selection.as_ref())?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            state: best,
            meta: TrainMeta {
                step: steps,
                seed: cfg.seed,
                corpus_fingerprint: fingerprint(
                    crate::data::serialize_examples(train).as_bytes(),
                ),
            },
        },
        val_history: history,
        steps,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint files

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    meta: TrainMeta,
    tensors: Vec<TensorEntry>,
}

/// Serializes a checkpoint: magic line, one-line manifest, then raw
/// little-endian f32 payloads at the offsets the manifest states.
pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for p in ckpt.state.params() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.dims().to_vec(),
            dtype: "f32".into(),
            offset,
            frozen: p.frozen,
        });
        offset += (p.value.len() * 4) as u64;
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: ckpt.state.config.clone(),
        meta: ckpt.meta.clone(),
        tensors,
    };
    let mut out = Vec::with_capacity(offset as usize + 1024);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(serde_json::to_string(&manifest)?.as_bytes());
    out.push(b'\n');
    for p in ckpt.state.params() {
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let rest = bytes
        .strip_prefix(CHECKPOINT_MAGIC)
        .ok_or_else(|| TrainerError::Format("missing magic header".into()))?;
    let line_end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| TrainerError::Format("missing manifest line".into()))?;
    let manifest: Manifest = serde_json::from_slice(&rest[..line_end])?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(TrainerError::Format(format!(
            "unsupported version {}",
            manifest.version
        )));
    }
    let payload = &rest[line_end + 1..];
    let mut tensors = HashMap::new();
    let mut frozen = HashSet::new();
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(TrainerError::Format(format!(
                "tensor {} has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let len: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + len * 4;
        if end > payload.len() {
            return Err(TrainerError::Truncated {
                tensor: entry.name.clone(),
            });
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data));
        if entry.frozen {
            frozen.insert(entry.name.clone());
        }
    }
    let state = ModelState::from_named(manifest.config, tensors, &frozen)?;
    Ok(Checkpoint {
        state,
        meta: manifest.meta,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, checkpoint_bytes(ckpt)?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{tokenize, Table, TablePair};

    fn mini_sentences() -> Vec<Vec<String>> {
        [
            "ann lee was born in oslo .",
            "bo rex was born in cairo .",
            "cy dee was born in quito .",
            "ann rex lives in oslo .",
            "bo lee lives in quito .",
            "cy lee was born in cairo .",
            "ann dee lives in cairo .",
            "bo dee was born in oslo .",
            "cy rex lives in quito .",
            "ann lee lives in quito .",
        ]
        .iter()
        .map(|s| tokenize(s))
        .collect()
    }

    fn mini_subwords() -> (MergeTable, SubwordVocab) {
        bpe::train_bpe(&mini_sentences(), 30).unwrap()
    }

    fn mini_model(vocab: &SubwordVocab, max_seq: usize) -> ModelConfig {
        let mut c = ModelConfig::new(vocab.len(), 16, 1, 2, max_seq);
        c.pos_vocab = 8;
        c.dropout = 0.1;
        c
    }

    fn pair(attr: &str, value: &str) -> TablePair {
        TablePair {
            attribute: tokenize(attr),
            value: tokenize(value),
        }
    }

    fn mini_pairs() -> Vec<Example> {
        [
            ("ann lee", "oslo", "ann lee was born in oslo ."),
            ("bo rex", "cairo", "bo rex was born in cairo ."),
            ("cy dee", "quito", "cy dee was born in quito ."),
            ("ann rex", "oslo", "ann rex lives in oslo ."),
            ("bo lee", "quito", "bo lee lives in quito ."),
            ("cy rex", "cairo", "cy rex was born in cairo ."),
        ]
        .iter()
        .map(|(name, city, text)| Example {
            table: Table::new(vec![pair("name", name), pair("birth place", city)]).unwrap(),
            text: tokenize(text),
        })
        .collect()
    }

    fn quick_train_cfg(variant: Variant) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            lr: 3e-3,
            max_epochs: 4,
            patience: 2,
            variant,
            ..Default::default()
        }
    }

    fn pretrain_mini(seed: u64) -> TrainOutcome {
        let (merges, vocab) = mini_subwords();
        let model = mini_model(&vocab, 48);
        let cfg = TrainConfig {
            seed,
            variant: Variant::LmScratch,
            ..quick_train_cfg(Variant::LmScratch)
        };
        pretrain_lm(&mini_sentences(), &merges, &vocab, &model, &cfg).unwrap()
    }

    #[test]
    fn pretraining_descends_from_initialization() {
        let (merges, vocab) = mini_subwords();
        let model = mini_model(&vocab, 48);
        let outcome = pretrain_mini(0);
        // Recompute the held-out loss of a fresh initialization and of the
        // returned checkpoint on the same split the trainer used.
        let mut cfg = model.clone();
        cfg.switch_enabled = false;
        let policy = MatchPolicy::default();
        let all = prepare_examples(
            &text_only_examples(&mini_sentences()),
            &merges,
            &vocab,
            &policy,
            &cfg,
            64,
        )
        .unwrap();
        let val: Vec<PreparedExample> = all
            .into_iter()
            .enumerate()
            .filter_map(|(i, e)| (i % 10 == 9).then_some(e))
            .collect();
        let fresh = init_state::<f32>(&cfg, 0).unwrap();
        let before = batched_val_loss(&fresh, &val, 4).unwrap();
        let after = batched_val_loss(&outcome.checkpoint.state, &val, 4).unwrap();
        assert!(after < before, "{after} !< {before}");
        assert_eq!(outcome.val_history.len() as u64 % 1, 0);
    }

    #[test]
    fn pretraining_is_byte_deterministic() {
        let a = checkpoint_bytes(&pretrain_mini(7).checkpoint).unwrap();
        let b = checkpoint_bytes(&pretrain_mini(7).checkpoint).unwrap();
        assert_eq!(a, b);
        let c = checkpoint_bytes(&pretrain_mini(8).checkpoint).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn trained_model_beats_a_unigram_oracle() {
        use crate::synthetic::{generate_synthetic, people_domain};
        let (_, textonly) = generate_synthetic(&people_domain(1), 0, 1500);
        let sentences: Vec<Vec<String>> = textonly.into_iter().map(|e| e.text).collect();
        let (merges, vocab) = bpe::train_bpe(&sentences, 120).unwrap();
        let mut model = ModelConfig::new(vocab.len(), 32, 2, 2, 64);
        model.pos_vocab = 8;
        let cfg = TrainConfig {
            batch_size: 40,
            lr: 3e-3,
            max_epochs: 2,
            patience: 2,
            seed: 3,
            variant: Variant::LmScratch,
            ..Default::default()
        };
        let outcome = pretrain_lm(&sentences, &merges, &vocab, &model, &cfg).unwrap();

        // Unigram oracle with add-one smoothing, fit on the same training
        // split, scored on the same held-out sentences — end-of-sequence
        // counted as a token on both sides, exactly as the model sees it.
        let mut train_tokens = 0usize;
        let mut counts: HashMap<u32, usize> = HashMap::new();
        let mut heldout: Vec<Vec<u32>> = Vec::new();
        for (i, s) in sentences.iter().enumerate() {
            let mut ids = bpe::encode(s, &merges, &vocab);
            ids.truncate(62);
            ids.push(bpe::EOS);
            if i % 10 == 9 {
                heldout.push(ids);
            } else {
                train_tokens += ids.len();
                for id in ids {
                    *counts.entry(id).or_default() += 1;
                }
            }
        }
        let v = vocab.len() as f64;
        let mut unigram_nll = 0.0;
        let mut heldout_tokens = 0usize;
        for ids in &heldout {
            for id in ids {
                let c = *counts.get(id).unwrap_or(&0) as f64;
                unigram_nll += -((c + 1.0) / (train_tokens as f64 + v)).ln();
                heldout_tokens += 1;
            }
        }
        let unigram_ppl = (unigram_nll / heldout_tokens as f64).exp();

        let policy = MatchPolicy::default();
        let mut eval_cfg = model.clone();
        eval_cfg.switch_enabled = false;
        let prepared = prepare_examples(
            &text_only_examples(&sentences),
            &merges,
            &vocab,
            &policy,
            &eval_cfg,
            64,
        )
        .unwrap();
        let val: Vec<PreparedExample> = prepared
            .into_iter()
            .enumerate()
            .filter_map(|(i, e)| (i % 10 == 9).then_some(e))
            .collect();
        let model_ppl = batched_val_loss(&outcome.checkpoint.state, &val, 40)
            .unwrap()
            .exp();
        assert!(
            model_ppl < unigram_ppl,
            "model {model_ppl:.2} !< unigram {unigram_ppl:.2}"
        );
    }

    #[test]
    fn base_variant_runs_without_the_switch() {
        let (merges, vocab) = mini_subwords();
        let model = mini_model(&vocab, 48);
        let pretrained = pretrain_mini(0).checkpoint;
        let pairs = mini_pairs();
        let policy = MatchPolicy::default();
        let outcome = finetune(
            Some(&pretrained),
            &pairs[..4],
            &pairs[4..],
            &merges,
            &vocab,
            &policy,
            &model,
            &quick_train_cfg(Variant::Base),
        )
        .unwrap();
        let state = &outcome.checkpoint.state;
        assert!(!state.config.switch_enabled);
        let prepared = prepare_examples(&pairs[4..], &merges, &vocab, &policy, &state.config, 64)
            .unwrap();
        let pass = forward(state, &prepared, None).unwrap();
        assert_eq!(pass.breakdown.copy_term, 0.0);
        assert!(pass.examples.iter().all(|e| e.p_copy.is_none()));
    }

    #[test]
    fn finetuning_reduces_training_loss() {
        let (merges, vocab) = mini_subwords();
        let model = mini_model(&vocab, 48);
        let pretrained = pretrain_mini(0).checkpoint;
        let pairs = mini_pairs();
        let policy = MatchPolicy::default();
        let cfg = TrainConfig { max_epochs: 8, ..quick_train_cfg(Variant::Full) };
        let outcome = finetune(
            Some(&pretrained),
            &pairs[..4],
            &pairs[4..],
            &merges,
            &vocab,
            &policy,
            &model,
            &cfg,
        )
        .unwrap();
        let mut target = model.clone();
        target.lambda = cfg.lambda;
        target.pretrained_init = true;
        target.freeze_word_embeddings = true;
        let prepared =
            prepare_examples(&pairs[..4], &merges, &vocab, &policy, &target, 64).unwrap();
        let mut start = init_state::<f32>(&target, cfg.seed).unwrap();
        *start.tensor_mut("wte") = pretrained.state.tensor("wte").clone();
        let before = batched_val_loss(&start, &prepared, 4).unwrap();
        let after = batched_val_loss(&outcome.checkpoint.state, &prepared, 4).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn step_budgets_ignore_training_set_size() {
        let (merges, vocab) = mini_subwords();
        let model = mini_model(&vocab, 48);
        let pairs = mini_pairs();
        let policy = MatchPolicy::default();
        let cfg = TrainConfig {
            max_steps: Some(6),
            eval_every: Some(2),
            patience: 100,
            batch_size: 2,
            max_epochs: 1, // moot under a step budget
            ..quick_train_cfg(Variant::LmScratch)
        };
        // Two train sets of different size get the same number of updates
        // and the same evaluation cadence.
        for train in [&pairs[..2], &pairs[..4]] {
            let outcome =
                finetune(None, train, &pairs[4..], &merges, &vocab, &policy, &model, &cfg)
                    .unwrap();
            assert_eq!(outcome.val_history.len(), 3);
            assert!(outcome.steps <= 6);
        }
        // A budget shorter than the evaluation interval still produces one
        // validation score.
        let tiny = TrainConfig { max_steps: Some(1), eval_every: Some(50), ..cfg };
        let outcome =
            finetune(None, &pairs[..2], &pairs[4..], &merges, &vocab, &policy, &model, &tiny)
                .unwrap();
        assert_eq!(outcome.val_history.len(), 1);
    }

    #[test]
    fn full_and_scratch_arms_end_up_different() {
        let (merges, vocab) = mini_subwords();
        let model = mini_model(&vocab, 48);
        let pretrained = pretrain_mini(0).checkpoint;
        let pairs = mini_pairs();
        let policy = MatchPolicy::default();
        let full = finetune(
            Some(&pretrained),
            &pairs[..4],
            &pairs[4..],
            &merges,
            &vocab,
            &policy,
            &model,
            &quick_train_cfg(Variant::Full),
        )
        .unwrap();
        let scratch = finetune(
            None,
            &pairs[..4],
            &pairs[4..],
            &merges,
            &vocab,
            &policy,
            &model,
            &quick_train_cfg(Variant::LmScratch),
        )
        .unwrap();
        assert_ne!(
            full.checkpoint.state.tensor("wte").data(),
            scratch.checkpoint.state.tensor("wte").data()
        );
        assert_ne!(
            full.checkpoint.state.tensor("block0.wq").data(),
            scratch.checkpoint.state.tensor("block0.wq").data()
        );
    }

    #[test]
    fn variant_and_checkpoint_must_agree() {
        let (merges, vocab) = mini_subwords();
        let model = mini_model(&vocab, 48);
        let pretrained = pretrain_mini(0).checkpoint;
        let pairs = mini_pairs();
        let policy = MatchPolicy::default();
        let no_ckpt = finetune(
            None,
            &pairs[..4],
            &pairs[4..],
            &merges,
            &vocab,
            &policy,
            &model,
            &quick_train_cfg(Variant::Full),
        );
        assert!(matches!(no_ckpt, Err(TrainerError::VariantInit { .. })));
        let with_ckpt = finetune(
            Some(&pretrained),
            &pairs[..4],
            &pairs[4..],
            &merges,
            &vocab,
            &policy,
            &model,
            &quick_train_cfg(Variant::LmScratch),
        );
        assert!(matches!(with_ckpt, Err(TrainerError::VariantInit { .. })));
    }

    #[test]
    fn frozen_embeddings_survive_finetuning_bit_for_bit() {
        let (merges, vocab) = mini_subwords();
        let model = mini_model(&vocab, 48);
        let pretrained = pretrain_mini(0).checkpoint;
        let pairs = mini_pairs();
        let policy = MatchPolicy::default();
        let outcome = finetune(
            Some(&pretrained),
            &pairs[..4],
            &pairs[4..],
            &merges,
            &vocab,
            &policy,
            &model,
            &quick_train_cfg(Variant::Full),
        )
        .unwrap();
        let before = pretrained.state.tensor("wte").data();
        let after = outcome.checkpoint.state.tensor("wte").data();
        assert_eq!(before, after);
        // And something else did move.
        assert_ne!(
            pretrained.state.tensor("block0.wq").data(),
            outcome.checkpoint.state.tensor("block0.wq").data()
        );
    }

    #[test]
    fn selection_returns_the_best_validation_score_seen() {
        let outcome = pretrain_mini(4);
        let best = outcome
            .val_history
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let (merges, vocab) = mini_subwords();
        let model = mini_model(&vocab, 48);
        let mut cfg = model.clone();
        cfg.switch_enabled = false;
        let policy = MatchPolicy::default();
        let all = prepare_examples(
            &text_only_examples(&mini_sentences()),
            &merges,
            &vocab,
            &policy,
            &cfg,
            64,
        )
        .unwrap();
        let val: Vec<PreparedExample> = all
            .into_iter()
            .enumerate()
            .filter_map(|(i, e)| (i % 10 == 9).then_some(e))
            .collect();
        let returned = batched_val_loss(&outcome.checkpoint.state, &val, 4).unwrap();
        assert!((returned - best).abs() < 1e-5, "{returned} vs best {best}");
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly() {
        let outcome = pretrain_mini(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&outcome.checkpoint, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta, outcome.checkpoint.meta);
        assert_eq!(loaded.state.config, outcome.checkpoint.state.config);
        for (a, b) in loaded
            .state
            .params()
            .iter()
            .zip(outcome.checkpoint.state.params())
        {
            assert_eq!(a.name, b.name);
            assert_eq!(a.frozen, b.frozen);
            assert_eq!(a.value.data(), b.value.data());
        }
        // And the serialized form itself is stable.
        assert_eq!(
            checkpoint_bytes(&loaded).unwrap(),
            checkpoint_bytes(&outcome.checkpoint).unwrap()
        );
    }

    #[test]
    fn damaged_checkpoints_are_rejected_with_names() {
        let ckpt = pretrain_mini(6).checkpoint;
        let bytes = checkpoint_bytes(&ckpt).unwrap();

        let bad_magic = parse_checkpoint(&bytes[1..]);
        assert!(matches!(bad_magic, Err(TrainerError::Format(_))));

        let truncated = parse_checkpoint(&bytes[..bytes.len() - 2]);
        match truncated {
            Err(TrainerError::Truncated { tensor }) => {
                let last = ckpt.state.params().last().unwrap();
                assert_eq!(tensor, last.name);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }

        // A manifest whose shapes disagree with the architecture.
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let doctored = text.replacen("\"shape\":[", "\"shape\":[9,", 1);
        let err = parse_checkpoint(doctored.as_bytes());
        assert!(err.is_err());
    }

    #[test]
    fn targets_are_cut_at_word_boundaries() {
        let (merges, vocab) = mini_subwords();
        let mut model = mini_model(&vocab, 32);
        model.dropout = 0.0;
        let long_text: Vec<String> = std::iter::repeat(tokenize("ann lee was born in oslo ."))
            .take(10)
            .flatten()
            .collect();
        let ex = Example {
            table: Table::new(vec![pair("name", "ann lee")]).unwrap(),
            text: long_text,
        };
        let policy = MatchPolicy::default();
        let prepared =
            prepare_examples(&[ex], &merges, &vocab, &policy, &model, 64).unwrap();
        let p = &prepared[0];
        // Window: 3 table subwords + separator + <bos> leave limited room.
        assert!(p.input_ids.len() <= model.max_seq_len - p.table_tokens.len() - 1);
        assert_eq!(p.gold_ids.last(), Some(&bpe::EOS));
        // The cut fell on a word boundary: decoding the kept ids yields
        // whole words from the original text.
        let words = bpe::decode(&p.gold_ids[..p.gold_ids.len() - 1], &vocab).unwrap();
        assert!(words.len() < 70);
        for w in &words {
            assert!(["ann", "lee", "was", "born", "in", "oslo", "."].contains(&w.as_str()));
        }
    }
}

//! Downstream use of a checkpoint: finetuning a target column as a masked
//! cell, prediction, imputation and row embeddings.

pub mod metrics;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::model::{GenConstraint, ModelError, UniTabE};
use crate::numeric::{rng, AdamState, GradBuffer, Tape};
use crate::persist::Checkpoint;
use crate::table::{parse_decimal, Cell, Column, DataType, Table};
use crate::tokenizer::{CellTokens, TokenSeq, Vocabulary, MASK, MAX_CELL_TOKENS};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TaskError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("target column {0:?} not in table")]
    UnknownTarget(String),
    #[error("value {0:?} of the target column is not a declared label")]
    LabelMismatch(String),
    #[error("classification needs at least two labels")]
    TooFewLabels,
    #[error("table has no training rows with a target value")]
    NoTrainingRows,
    #[error("non-finite finetuning loss at step {0}")]
    NonFinite(u64),
}

impl From<crate::numeric::NumericError> for TaskError {
    fn from(e: crate::numeric::NumericError) -> Self {
        TaskError::Model(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classify,
    Regress,
    Generate,
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "classify" => Ok(TaskKind::Classify),
            "regress" => Ok(TaskKind::Regress),
            "generate" => Ok(TaskKind::Generate),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

impl TaskKind {
    /// Type given to the target cell when the table does not carry it.
    pub fn dtype(self) -> DataType {
        match self {
            TaskKind::Classify => DataType::Categorical,
            TaskKind::Regress => DataType::Numerical,
            TaskKind::Generate => DataType::Textual,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub target: String,
    /// Label set for classification.
    pub labels: Vec<String>,
    /// Replaces the fill-in prompt when given.
    pub prompt: Option<String>,
    pub lr: f64,
    pub batch: usize,
    pub steps: u64,
    /// Dev-loss evaluation interval in steps; 0 evaluates only at the end.
    pub eval_every: u64,
    pub dev_fraction: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, target: impl Into<String>) -> Self {
        Self {
            kind,
            target: target.into(),
            labels: Vec::new(),
            prompt: None,
            lr: 1e-6,
            batch: 8,
            steps: 100,
            eval_every: 0,
            dev_fraction: 0.1,
            max_len: 16,
            seed: 0,
        }
    }

    pub fn with_labels<S: AsRef<str>>(mut self, labels: &[S]) -> Self {
        self.labels = labels.iter().map(|s| s.as_ref().to_string()).collect();
        self
    }

    fn prompt_tokens(&self, vocab: &Vocabulary) -> TokenSeq {
        match &self.prompt {
            Some(p) => vocab.task_prompt(p),
            None => vocab.fill_prompt(&self.target),
        }
    }

    fn label_tokens(&self, vocab: &Vocabulary) -> Vec<TokenSeq> {
        self.labels
            .iter()
            .map(|l| vocab.tokenize_text(l).truncated(MAX_CELL_TOKENS))
            .collect()
    }
}

/// Per-row output of [`predict`].
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub row_id: usize,
    pub text: String,
    /// Label probabilities in `TaskSpec::labels` order (classification).
    pub probs: Option<Vec<f64>>,
    /// Parsed value (regression); `None` with `unparseable` set when the
    /// generated text is not a number.
    pub value: Option<f64>,
    pub unparseable: bool,
}

/// The table's cells with the target masked (appended when absent).
fn masked_cells(
    table: &Table,
    row: usize,
    target: Option<usize>,
    extra: &Column,
    vocab: &Vocabulary,
) -> Vec<CellTokens> {
    let cols: Vec<usize> = (0..table.num_cols()).collect();
    let mut cells = vocab.tokenize_row(table.schema(), table.row(row), &cols);
    match target {
        Some(j) => cells[j].value = TokenSeq(vec![MASK]),
        None => cells.push(CellTokens {
            dtype: extra.dtype,
            name: vocab.tokenize_name(&extra.name),
            value: TokenSeq(vec![MASK]),
        }),
    }
    cells
}

/// Training target text of a cell: canonical decimal for numbers, the raw
/// value otherwise.
fn target_tokens(cell: &Cell, dtype: DataType, vocab: &Vocabulary) -> TokenSeq {
    vocab.tokenize_cell(cell, dtype).with_eos()
}

struct Example {
    cells: Vec<CellTokens>,
    target: TokenSeq,
}

fn examples(table: &Table, spec: &TaskSpec, vocab: &Vocabulary) -> Result<Vec<Example>, TaskError> {
    let j = table
        .column_index(&spec.target)
        .ok_or_else(|| TaskError::UnknownTarget(spec.target.clone()))?;
    let dtype = match spec.kind {
        TaskKind::Regress => DataType::Numerical,
        _ => table.schema()[j].dtype,
    };
    if spec.kind == TaskKind::Classify {
        if spec.labels.len() < 2 {
            return Err(TaskError::TooFewLabels);
        }
        for cell in table.column_values(j) {
            if let Cell::Value(v) = cell {
                if !spec.labels.iter().any(|l| l == v) {
                    return Err(TaskError::LabelMismatch(v.clone()));
                }
            }
        }
    }
    let col = &table.schema()[j];
    let out: Vec<Example> = (0..table.num_rows())
        .filter(|&r| !table.row(r)[j].is_missing())
        .map(|r| Example {
            cells: masked_cells(table, r, Some(j), col, vocab),
            target: target_tokens(&table.row(r)[j], dtype, vocab),
        })
        .collect();
    if out.is_empty() {
        return Err(TaskError::NoTrainingRows);
    }
    Ok(out)
}

fn batch_loss(
    model: &UniTabE<f32>,
    tape: &mut Tape<'_, f32>,
    batch: &[&Example],
    prompt: &TokenSeq,
    dropout: Option<&mut rng::Rng>,
) -> Result<crate::numeric::Var, TaskError> {
    let mut dropout = dropout;
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let units = model.tab_unit(tape, &ex.cells)?;
        let enc = model.encode(tape, units, dropout.as_deref_mut())?;
        let state = model.decoder_init(tape, &enc, prompt)?;
        losses.push(model.decode_train(tape, state, &ex.target)?);
    }
    let joined = tape.concat_cols(&losses)?;
    Ok(tape.mean(joined))
}

fn mean_loss(model: &UniTabE<f32>, set: &[&Example], prompt: &TokenSeq) -> Result<f64, TaskError> {
    let mut total = 0.0;
    for ex in set {
        let mut tape = Tape::inference(model.params());
        let l = batch_loss(model, &mut tape, &[ex], prompt, None)?;
        total += tape.scalar(l) as f64;
    }
    Ok(total / set.len() as f64)
}

/// Outcome of [`finetune`].
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub train_rows: usize,
    pub dev_rows: usize,
    /// `(step, dev loss)` at every evaluation.
    pub dev_losses: Vec<(u64, f64)>,
    pub best_step: u64,
}

/// Finetunes on `train` with the target as a masked cell. A seeded 90/10
/// split holds out dev rows; the parameters with the lowest dev loss among
/// the evaluations are returned. The input checkpoint is not modified.
pub fn finetune(
    ckpt: &Checkpoint,
    train: &Table,
    spec: &TaskSpec,
) -> Result<(Checkpoint, FinetuneReport), TaskError> {
    let vocab = &ckpt.vocab;
    let all = examples(train, spec, vocab)?;
    let prompt = spec.prompt_tokens(vocab);
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut rng::stream(spec.seed, &[0x4654, 0]));
    let n_dev = if all.len() >= 10 {
        ((all.len() as f64) * spec.dev_fraction).round() as usize
    } else {
        0
    };
    let (dev_idx, train_idx) = order.split_at(n_dev);
    let dev: Vec<&Example> = dev_idx.iter().map(|&i| &all[i]).collect();
    let train_set: Vec<&Example> = train_idx.iter().map(|&i| &all[i]).collect();

    let mut model = UniTabE::from_params(ckpt.config.clone(), ckpt.params.clone())?;
    let mut report = FinetuneReport {
        train_rows: train_set.len(),
        dev_rows: dev.len(),
        dev_losses: Vec::new(),
        best_step: 0,
    };
    if spec.steps == 0 {
        return Ok((ckpt.clone(), report));
    }
    let mut adam = AdamState::new(model.params());
    let mut grads = GradBuffer::zeros_like(model.params());
    let mut best: Option<(f64, crate::numeric::ParamSet<f32>)> = None;
    if !dev.is_empty() {
        let l = mean_loss(&model, &dev, &prompt)?;
        report.dev_losses.push((0, l));
        best = Some((l, model.params().clone()));
    }
    let mut epoch_rng = rng::stream(spec.seed, &[0x4654, 1]);
    let mut queue: Vec<usize> = Vec::new();
    let batch_size = spec.batch.max(1);
    for step in 1..=spec.steps {
        let mut picked = Vec::with_capacity(batch_size);
        while picked.len() < batch_size {
            if queue.is_empty() {
                queue = (0..train_set.len()).collect();
                queue.shuffle(&mut epoch_rng);
                queue.reverse();
            }
            picked.push(train_set[queue.pop().expect("refilled")]);
        }
        let mut drop_rng = rng::stream(spec.seed, &[0x4654, 2, step]);
        let dropout = (model.config().dropout > 0.0).then_some(&mut drop_rng);
        let (loss, g) = {
            let mut tape = Tape::new(model.params());
            let l = batch_loss(&model, &mut tape, &picked, &prompt, dropout)?;
            (tape.scalar(l), tape.backward(l)?)
        };
        if !loss.is_finite() {
            return Err(TaskError::NonFinite(step));
        }
        grads.zero();
        grads.accumulate(&g, 1.0);
        adam.step(model.params_mut(), &grads, spec.lr)?;
        let eval_now = step == spec.steps || (spec.eval_every > 0 && step % spec.eval_every == 0);
        if eval_now && !dev.is_empty() {
            let l = mean_loss(&model, &dev, &prompt)?;
            report.dev_losses.push((step, l));
            if best.as_ref().is_none_or(|(b, _)| l < *b) {
                best = Some((l, model.params().clone()));
                report.best_step = step;
            }
        }
    }
    let params = match best {
        Some((_, p)) => p,
        None => {
            report.best_step = spec.steps;
            model.params().clone()
        }
    };
    let out = Checkpoint {
        config: ckpt.config.clone(),
        vocab: ckpt.vocab.clone(),
        params,
        adam: None,
        step: ckpt.step + spec.steps,
        seed: spec.seed,
    };
    Ok((out, report))
}

fn load_model(ckpt: &Checkpoint) -> Result<UniTabE<f32>, TaskError> {
    Ok(UniTabE::from_params(
        ckpt.config.clone(),
        ckpt.params.clone(),
    )?)
}

/// Predicts the target of every row. Rows lacking the target column get
/// it appended as a missing cell; any value already present is ignored.
pub fn predict(
    ckpt: &Checkpoint,
    test: &Table,
    spec: &TaskSpec,
) -> Result<Vec<PredictionRecord>, TaskError> {
    let model = load_model(ckpt)?;
    predict_with(&model, &ckpt.vocab, test, spec)
}

/// [`predict`] on an already constructed model.
pub fn predict_with(
    model: &UniTabE<f32>,
    vocab: &Vocabulary,
    test: &Table,
    spec: &TaskSpec,
) -> Result<Vec<PredictionRecord>, TaskError> {
    if spec.kind == TaskKind::Classify && spec.labels.len() < 2 {
        return Err(TaskError::TooFewLabels);
    }
    let j = test.column_index(&spec.target);
    let extra = Column::new(spec.target.clone(), spec.kind.dtype());
    let prompt = spec.prompt_tokens(vocab);
    let labels = spec.label_tokens(vocab);
    (0..test.num_rows())
        .map(|r| {
            let cells = masked_cells(test, r, j, &extra, vocab);
            let mut tape = Tape::inference(model.params());
            let enc = model.encode_cells(&mut tape, &cells)?;
            let state = model.decoder_init(&mut tape, &enc, &prompt)?;
            Ok(match spec.kind {
                TaskKind::Classify => {
                    let probs = model.label_score(&mut tape, state, &labels)?;
                    let best = argmax(&probs);
                    PredictionRecord {
                        row_id: r,
                        text: spec.labels[best].clone(),
                        probs: Some(probs),
                        value: None,
                        unparseable: false,
                    }
                }
                TaskKind::Regress => {
                    let out =
                        model.generate(&mut tape, state, &GenConstraint::Numeric, spec.max_len)?;
                    let text = vocab.detokenize(out.ids()).unwrap_or_default();
                    let value = parse_decimal(&text);
                    PredictionRecord {
                        row_id: r,
                        unparseable: value.is_none(),
                        text,
                        probs: None,
                        value,
                    }
                }
                TaskKind::Generate => {
                    let out =
                        model.generate(&mut tape, state, &GenConstraint::NonEmpty, spec.max_len)?;
                    let text = vocab.detokenize(out.ids()).unwrap_or_default();
                    PredictionRecord {
                        row_id: r,
                        text,
                        probs: None,
                        value: None,
                        unparseable: false,
                    }
                }
            })
        })
        .collect()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Fills every missing cell using the fill-in prompt of its column.
/// Numerical columns decode under the numeric grammar, categorical columns
/// choose among the column's observed values, textual columns decode
/// freely but never empty. Returns the filled table and the number of
/// cells filled; a table without missing cells comes back unchanged with a
/// count of zero.
pub fn impute(ckpt: &Checkpoint, t: &Table, max_len: usize) -> Result<(Table, usize), TaskError> {
    let model = load_model(ckpt)?;
    let vocab = &ckpt.vocab;
    let schema = t.schema();
    let constraints: Vec<GenConstraint> = schema
        .iter()
        .enumerate()
        .map(|(j, c)| match c.dtype {
            DataType::Numerical => GenConstraint::Numeric,
            DataType::Textual => GenConstraint::NonEmpty,
            DataType::Categorical => {
                let observed: BTreeSet<&str> =
                    t.column_values(j).filter_map(Cell::as_str).collect();
                if observed.is_empty() {
                    GenConstraint::NonEmpty
                } else {
                    GenConstraint::Allowed(
                        observed
                            .into_iter()
                            .map(|v| vocab.tokenize_text(v))
                            .collect(),
                    )
                }
            }
        })
        .collect();
    let observed_text: Vec<Vec<&str>> = (0..schema.len())
        .map(|j| {
            t.column_values(j)
                .filter_map(Cell::as_str)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        })
        .collect();
    let mut out = t.clone();
    let mut filled = 0;
    let cols: Vec<usize> = (0..schema.len()).collect();
    for r in 0..t.num_rows() {
        let missing: Vec<usize> = cols
            .iter()
            .copied()
            .filter(|&j| t.row(r)[j].is_missing())
            .collect();
        if missing.is_empty() {
            continue;
        }
        let cells = vocab.tokenize_row(schema, t.row(r), &cols);
        let mut tape = Tape::inference(model.params());
        let enc = model.encode_cells(&mut tape, &cells)?;
        for j in missing {
            let prompt = vocab.fill_prompt(&schema[j].name);
            let state = model.decoder_init(&mut tape, &enc, &prompt)?;
            let gen = model.generate(&mut tape, state, &constraints[j], max_len)?;
            let text = match &constraints[j] {
                // write back the observed spelling, not the detokenized form
                GenConstraint::Allowed(options) => {
                    let k = options.iter().position(|o| *o == gen).unwrap_or(0);
                    observed_text[j][k].to_string()
                }
                _ => vocab.detokenize(gen.ids()).unwrap_or_default(),
            };
            out.set_cell(r, j, Cell::Value(text));
            filled += 1;
        }
    }
    Ok((out, filled))
}

/// `h_cls` of every row, in row order.
pub fn embed(ckpt: &Checkpoint, t: &Table) -> Result<Vec<Vec<f32>>, TaskError> {
    let model = load_model(ckpt)?;
    let cols: Vec<usize> = (0..t.num_cols()).collect();
    (0..t.num_rows())
        .map(|r| {
            let cells = ckpt.vocab.tokenize_row(t.schema(), t.row(r), &cols);
            let mut tape = Tape::inference(model.params());
            let enc = model.encode_cells(&mut tape, &cells)?;
            Ok(tape.value(enc.cls).to_vec())
        })
        .collect()
}

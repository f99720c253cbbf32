//! Self-supervised pretraining: multi-cell masking and row-block
//! contrastive learning, alternated over micro-batches.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ModelError, UniTabE};
use crate::numeric::{rng, AdamState, GradBuffer, NumericError, Real, Tape, Var};
use crate::table::{Cell, Table};
use crate::tokenizer::{CellTokens, TokenSeq, Vocabulary, MASK};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PretrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("row has no cell with a value to mask")]
    AllMissingRow,
    #[error("contrastive blocks need at least two columns, row has {0}")]
    TooFewColumns(usize),
    #[error("contrastive batch needs at least two rows, got {0}")]
    TooFewRows(usize),
    #[error("no non-degenerate anchor/positive pair in batch")]
    NoValidPairs,
    #[error("corpus has no usable rows")]
    EmptyCorpus,
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("non-finite {objective} loss at step {step} (micro-batch {micro})")]
    NonFinite {
        step: u64,
        micro: u64,
        objective: Objective,
    },
    #[error("{0}")]
    Hook(String),
}

impl From<NumericError> for PretrainError {
    fn from(e: NumericError) -> Self {
        PretrainError::Model(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mcm,
    Cl,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Mcm => "mcm",
            Objective::Cl => "cl",
        })
    }
}

/// Pretraining hyperparameters. One step is one optimizer update over
/// `accum` micro-batches of `batch` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub mask_rate: f64,
    pub overlap: f64,
    pub lr: f64,
    pub batch: usize,
    pub accum: usize,
    pub temperature: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// MCM micro-batches per contrastive micro-batch; 0 disables CL.
    pub mcm_per_cl: usize,
    pub shuffle_columns: bool,
    /// Checkpoint interval in steps; 0 keeps only the initial and final ones.
    pub checkpoint_every: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            mask_rate: 0.15,
            overlap: 0.5,
            lr: 1e-5,
            batch: 64,
            accum: 10,
            temperature: 0.1,
            max_steps: 1000,
            seed: 0,
            mcm_per_cl: 1,
            shuffle_columns: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), PretrainError> {
        let bad = |m: &str| Err(PretrainError::InvalidPlan(m.to_string()));
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return bad("mask_rate must lie in [0, 1]");
        }
        if !(self.overlap > 0.0 && self.overlap < 1.0) {
            return bad("overlap must lie in (0, 1)");
        }
        if self.accum == 0 || self.batch == 0 {
            return bad("batch and accum must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.temperature > 0.0) {
            return bad("lr and temperature must be positive");
        }
        Ok(())
    }

    /// Objective of micro-batch `micro` under the alternation schedule.
    pub fn objective(&self, micro: u64) -> Objective {
        if self.mcm_per_cl == 0 {
            return Objective::Mcm;
        }
        let cycle = self.mcm_per_cl as u64 + 1;
        if micro % cycle < self.mcm_per_cl as u64 {
            Objective::Mcm
        } else {
            Objective::Cl
        }
    }
}

/// Draws `q ~ U(0,1)` for every cell holding a value and masks it when
/// `q <= p`. If nothing is drawn, one such cell is masked uniformly.
/// Returns sorted column indices.
pub fn sample_mask(row: &[Cell], p: f64, rng: &mut impl Rng) -> Result<Vec<usize>, PretrainError> {
    let candidates: Vec<usize> = (0..row.len()).filter(|&j| !row[j].is_missing()).collect();
    if candidates.is_empty() {
        return Err(PretrainError::AllMissingRow);
    }
    let mut masked: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() <= p)
        .collect();
    if masked.is_empty() {
        masked.push(candidates[rng.random_range(0..candidates.len())]);
    }
    Ok(masked)
}

/// Masked-cell training example for one row.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// Row index inside its table.
    pub row: usize,
    /// Masked column indices (table order).
    pub masked: Vec<usize>,
    /// Original value tokens plus `[EOS]`, one per masked column.
    pub targets: Vec<TokenSeq>,
}

impl MaskPlan {
    pub fn new(table: &Table, row: usize, masked: Vec<usize>, vocab: &Vocabulary) -> Self {
        let schema = table.schema();
        let cells = table.row(row);
        let targets = masked
            .iter()
            .map(|&j| vocab.tokenize_cell(&cells[j], schema[j].dtype).with_eos())
            .collect();
        Self {
            row,
            masked,
            targets,
        }
    }
}

/// A row ready for the network: featurized cells in presentation order,
/// with one decoding prompt and target per masked cell.
#[derive(Clone, Debug, PartialEq)]
pub struct McmExample {
    pub cells: Vec<CellTokens>,
    pub prompts: Vec<TokenSeq>,
    pub targets: Vec<TokenSeq>,
}

impl McmExample {
    /// Cells are presented in `order` (a permutation of the columns);
    /// masked cells carry `[MASK]` as their value.
    pub fn new(table: &Table, plan: &MaskPlan, order: &[usize], vocab: &Vocabulary) -> Self {
        let schema = table.schema();
        let mut cells = vocab.tokenize_row(schema, table.row(plan.row), order);
        for (pos, &j) in order.iter().enumerate() {
            if plan.masked.contains(&j) {
                cells[pos].value = TokenSeq(vec![MASK]);
            }
        }
        let prompts = plan
            .masked
            .iter()
            .map(|&j| vocab.fill_prompt(&schema[j].name))
            .collect();
        Self {
            cells,
            prompts,
            targets: plan.targets.clone(),
        }
    }
}

/// Mean over rows of the mean decoding loss over each row's masked cells.
/// Each row is encoded once and shared by its masked cells.
pub fn mcm_loss<T: Real, R: Rng>(
    model: &UniTabE<T>,
    tape: &mut Tape<'_, T>,
    batch: &[McmExample],
    mut rng: Option<&mut R>,
) -> Result<Var, PretrainError> {
    if batch.is_empty() {
        return Err(PretrainError::EmptyCorpus);
    }
    let mut row_losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let units = model.tab_unit(tape, &ex.cells)?;
        let enc = model.encode(tape, units, rng.as_deref_mut())?;
        let mut cell_losses = Vec::with_capacity(ex.targets.len());
        for (prompt, target) in ex.prompts.iter().zip(&ex.targets) {
            let state = model.decoder_init(tape, &enc, prompt)?;
            cell_losses.push(model.decode_train(tape, state, target)?);
        }
        let joined = tape.concat_cols(&cell_losses)?;
        row_losses.push(tape.mean(joined));
    }
    let joined = tape.concat_cols(&row_losses)?;
    Ok(tape.mean(joined))
}

/// Anchor and positive column spans of one row; spans index the row's
/// presentation order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPair {
    pub row: usize,
    pub anchor: std::ops::Range<usize>,
    pub positive: std::ops::Range<usize>,
}

impl BlockPair {
    /// The positive span coincides with the anchor, so the pair carries no
    /// signal and is skipped.
    pub fn is_degenerate(&self) -> bool {
        self.anchor == self.positive
    }

    pub fn shared(&self) -> usize {
        let lo = self.anchor.start.max(self.positive.start);
        let hi = self.anchor.end.min(self.positive.end);
        hi.saturating_sub(lo)
    }
}

/// One pair per row: anchor of `w = ⌈n/2⌉` contiguous columns, positive of
/// the same width shifted so that `round(overlap · w)` columns are shared.
/// The (anchor, positive) placement is uniform over the placements that
/// fit; when none does, the positive equals the anchor (degenerate).
pub fn sample_blocks(
    num_cols: &[usize],
    overlap: f64,
    rng: &mut impl Rng,
) -> Result<Vec<BlockPair>, PretrainError> {
    if num_cols.len() < 2 {
        return Err(PretrainError::TooFewRows(num_cols.len()));
    }
    num_cols
        .iter()
        .enumerate()
        .map(|(row, &n)| {
            if n < 2 {
                return Err(PretrainError::TooFewColumns(n));
            }
            let w = n.div_ceil(2);
            let shared = ((overlap * w as f64).round() as usize).min(w);
            let shift = w - shared;
            let last = n - w;
            if shift == 0 || shift > last {
                let start = rng.random_range(0..=last);
                return Ok(BlockPair {
                    row,
                    anchor: start..start + w,
                    positive: start..start + w,
                });
            }
            // ordered (anchor, positive) offsets `shift` apart, drawn uniformly
            let k = rng.random_range(0..2 * (last + 1 - shift));
            let (start, p) = if k < last + 1 - shift {
                (k, k + shift)
            } else {
                let a = k - (last + 1 - shift) + shift;
                (a, a - shift)
            };
            Ok(BlockPair {
                row,
                anchor: start..start + w,
                positive: p..p + w,
            })
        })
        .collect()
}

/// InfoNCE with cosine similarity:
/// `−log(e^{c(a,p)/τ} / (e^{c(a,p)/τ} + Σ_k e^{c(a,n_k)/τ}))`.
pub fn info_nce<T: Real>(
    tape: &mut Tape<'_, T>,
    anchor: Var,
    positive: Var,
    negatives: &[Var],
    temperature: f64,
) -> Result<Var, PretrainError> {
    let mut sims = Vec::with_capacity(1 + negatives.len());
    sims.push(tape.cosine_similarity(anchor, positive)?);
    for &n in negatives {
        sims.push(tape.cosine_similarity(anchor, n)?);
    }
    let logits = tape.concat_cols(&sims)?;
    let logits = tape.scale(logits, 1.0 / temperature);
    Ok(tape.cross_entropy(logits, &[0])?)
}

/// Block vectors `h_cls` of encoding each span of `cells` alone.
fn encode_block<T: Real, R: Rng>(
    model: &UniTabE<T>,
    tape: &mut Tape<'_, T>,
    cells: &[CellTokens],
    span: std::ops::Range<usize>,
    rng: Option<&mut R>,
) -> Result<Var, PretrainError> {
    let units = model.tab_unit(tape, &cells[span])?;
    Ok(model.encode(tape, units, rng)?.cls)
}

/// Contrastive loss over a batch of rows, averaged over non-degenerate
/// anchors. Negatives of an anchor are the anchor blocks of every other row.
pub fn cl_loss<T: Real, R: Rng>(
    model: &UniTabE<T>,
    tape: &mut Tape<'_, T>,
    rows: &[Vec<CellTokens>],
    pairs: &[BlockPair],
    temperature: f64,
    mut rng: Option<&mut R>,
) -> Result<Var, PretrainError> {
    if rows.len() < 2 {
        return Err(PretrainError::TooFewRows(rows.len()));
    }
    if pairs.iter().all(BlockPair::is_degenerate) {
        return Err(PretrainError::NoValidPairs);
    }
    let mut anchors = Vec::with_capacity(pairs.len());
    for p in pairs {
        anchors.push(encode_block(
            model,
            tape,
            &rows[p.row],
            p.anchor.clone(),
            rng.as_deref_mut(),
        )?);
    }
    let mut losses = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        if p.is_degenerate() {
            continue;
        }
        let pos = encode_block(
            model,
            tape,
            &rows[p.row],
            p.positive.clone(),
            rng.as_deref_mut(),
        )?;
        let negs: Vec<Var> = anchors
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &a)| a)
            .collect();
        losses.push(info_nce(tape, anchors[i], pos, &negs, temperature)?);
    }
    let joined = tape.concat_cols(&losses)?;
    Ok(tape.mean(joined))
}

/// Model, optimizer and step counter owned by the trainer.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: UniTabE<T>,
    pub adam: AdamState<T>,
    pub step: u64,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: UniTabE<T>) -> Self {
        let adam = AdamState::new(model.params());
        Self {
            model,
            adam,
            step: 0,
        }
    }
}

/// One progress record per micro-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub micro: u64,
    pub objective: Objective,
    pub loss: f64,
}

pub enum Event<'a, T> {
    Log(&'a LogRecord),
    Checkpoint(&'a TrainState<T>),
}

const TAG_ROWS: u64 = 0x524f;
const TAG_ORDER: u64 = 0x4f52;
const TAG_MASK: u64 = 0x4d41;
const TAG_BLOCK: u64 = 0x424c;
const TAG_DROP: u64 = 0x4452;

/// Rows that can serve as MCM examples (at least one value) and as CL rows
/// (additionally at least two columns).
struct RowIndex {
    mcm: Vec<(usize, usize)>,
    cl: Vec<(usize, usize)>,
}

impl RowIndex {
    fn new(corpus: &[Table]) -> Self {
        let mut mcm = Vec::new();
        let mut cl = Vec::new();
        for (t, table) in corpus.iter().enumerate() {
            for (r, row) in table.rows().iter().enumerate() {
                if row.iter().any(|c| !c.is_missing()) {
                    mcm.push((t, r));
                    if table.num_cols() >= 2 {
                        cl.push((t, r));
                    }
                }
            }
        }
        Self { mcm, cl }
    }
}

fn presentation_order(n: usize, shuffle: bool, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order
}

/// Loss of micro-batch `micro` on a fresh tape, with its gradients.
/// `None` when a contrastive batch holds only degenerate pairs.
fn micro_batch<T: Real>(
    model: &UniTabE<T>,
    corpus: &[Table],
    index: &RowIndex,
    vocab: &Vocabulary,
    plan: &TrainPlan,
    micro: u64,
    objective: Objective,
) -> Result<Option<(f64, crate::numeric::Gradients<T>)>, PretrainError> {
    let seed = plan.seed;
    let mut row_rng = rng::stream(seed, &[TAG_ROWS, micro]);
    let mut order_rng = rng::stream(seed, &[TAG_ORDER, micro]);
    let mut drop_rng = rng::stream(seed, &[TAG_DROP, micro]);
    let dropout = (model.config().dropout > 0.0).then_some(&mut drop_rng);
    let mut tape = Tape::new(model.params());
    let loss = match objective {
        Objective::Mcm => {
            let mut mask_rng = rng::stream(seed, &[TAG_MASK, micro]);
            let examples = (0..plan.batch)
                .map(|_| {
                    let (t, r) = index.mcm[row_rng.random_range(0..index.mcm.len())];
                    let table = &corpus[t];
                    let masked = sample_mask(table.row(r), plan.mask_rate, &mut mask_rng)?;
                    let mp = MaskPlan::new(table, r, masked, vocab);
                    let order =
                        presentation_order(table.num_cols(), plan.shuffle_columns, &mut order_rng);
                    Ok(McmExample::new(table, &mp, &order, vocab))
                })
                .collect::<Result<Vec<_>, PretrainError>>()?;
            mcm_loss(model, &mut tape, &examples, dropout)?
        }
        Objective::Cl => {
            let mut block_rng = rng::stream(seed, &[TAG_BLOCK, micro]);
            let b = plan.batch.max(2);
            let rows: Vec<Vec<CellTokens>> = (0..b)
                .map(|_| {
                    let (t, r) = index.cl[row_rng.random_range(0..index.cl.len())];
                    let table = &corpus[t];
                    let order =
                        presentation_order(table.num_cols(), plan.shuffle_columns, &mut order_rng);
                    vocab.tokenize_row(table.schema(), table.row(r), &order)
                })
                .collect();
            let ncols: Vec<usize> = rows.iter().map(Vec::len).collect();
            let pairs = sample_blocks(&ncols, plan.overlap, &mut block_rng)?;
            if pairs.iter().all(BlockPair::is_degenerate) {
                return Ok(None);
            }
            cl_loss(model, &mut tape, &rows, &pairs, plan.temperature, dropout)?
        }
    };
    let value = tape.scalar(loss).as_f64();
    let grads = tape.backward(loss)?;
    Ok(Some((value, grads)))
}

/// Runs `plan.max_steps` optimizer steps. Emits the initial checkpoint,
/// one every `checkpoint_every` steps, and the final one; logs every
/// micro-batch. Aborts on the first non-finite loss.
pub fn pretrain_loop<T: Real>(
    state: &mut TrainState<T>,
    corpus: &[Table],
    vocab: &Vocabulary,
    plan: &TrainPlan,
    mut on_event: impl FnMut(Event<'_, T>) -> Result<(), PretrainError>,
) -> Result<(), PretrainError> {
    plan.validate()?;
    let index = RowIndex::new(corpus);
    if index.mcm.is_empty() {
        return Err(PretrainError::EmptyCorpus);
    }
    let cl_possible = index.cl.len() >= 2;
    on_event(Event::Checkpoint(state))?;
    let mut grads = GradBuffer::zeros_like(state.model.params());
    let scale = T::of(1.0 / plan.accum as f64);
    let first = state.step;
    while state.step < plan.max_steps {
        grads.zero();
        for k in 0..plan.accum as u64 {
            let micro = state.step * plan.accum as u64 + k;
            let mut objective = plan.objective(micro);
            if objective == Objective::Cl && !cl_possible {
                objective = Objective::Mcm;
            }
            let Some((loss, g)) =
                micro_batch(&state.model, corpus, &index, vocab, plan, micro, objective)?
            else {
                continue;
            };
            if !loss.is_finite() {
                return Err(PretrainError::NonFinite {
                    step: state.step,
                    micro,
                    objective,
                });
            }
            grads.accumulate(&g, scale);
            on_event(Event::Log(&LogRecord {
                step: state.step,
                micro,
                objective,
                loss,
            }))?;
        }
        if !grads.is_finite() {
            return Err(PretrainError::NonFinite {
                step: state.step,
                micro: 0,
                objective: Objective::Mcm,
            });
        }
        let model = &mut state.model;
        state.adam.step(model.params_mut(), &grads, plan.lr)?;
        state.step += 1;
        let done = state.step == plan.max_steps;
        if plan.checkpoint_every > 0 && state.step % plan.checkpoint_every == 0 && !done {
            on_event(Event::Checkpoint(state))?;
        }
    }
    if state.step > first {
        on_event(Event::Checkpoint(state))?;
    }
    Ok(())
}

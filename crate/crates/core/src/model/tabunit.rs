//! Per-cell featurization. Each cell becomes `1 + q` vectors: the column
//! name vector fused with its data-type embedding, followed by the value
//! token embeddings with the name vector linked in.
//!
//! Positions restart at zero for every name and every value, so a cell's
//! vectors never depend on where the cell sits in the row.

use super::{as_usize, ModelError, UniTabE};
use crate::numeric::{Real, Tape, Var};
use crate::table::DataType;
use crate::tokenizer::{CellTokens, TokenSeq};

/// TabUnit output for one row.
#[derive(Clone, Debug)]
pub struct RowUnits {
    /// `[N, d]` concatenation of every cell's `{v_cn, v_cv^0..q-1}`.
    pub x_tu: Var,
    /// Start row of each cell inside `x_tu`.
    pub offsets: Vec<usize>,
    /// `1 + q_i` per cell.
    pub lengths: Vec<usize>,
    /// `[n, 1]` data-type fuse gates.
    pub g_dt: Var,
    /// `[n, 1]` linking gates.
    pub alpha: Var,
    /// `[n, d]` fused column-name vectors.
    pub v_cn: Var,
}

impl RowUnits {
    pub fn total_len(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn num_cells(&self) -> usize {
        self.lengths.len()
    }
}

impl<T: Real> UniTabE<T> {
    /// Word plus local positional embeddings for several sequences stacked.
    fn embed_sequences(
        &self,
        tape: &mut Tape<'_, T>,
        seqs: &[&TokenSeq],
    ) -> Result<Var, ModelError> {
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        for s in seqs {
            self.check_tokens(s.ids())?;
            ids.extend(as_usize(s.ids()));
            pos.extend(self.positions(s.len()));
        }
        let word = tape.param(self.ids.word);
        let pos_table = tape.param(self.ids.pos);
        let w = tape.embedding_lookup(word, &ids)?;
        let p = tape.embedding_lookup(pos_table, &pos)?;
        Ok(tape.add(w, p)?)
    }

    /// `Emb(tokens)` for a single sequence: `[len, d]`.
    pub fn embed_tokens(
        &self,
        tape: &mut Tape<'_, T>,
        tokens: &TokenSeq,
    ) -> Result<Var, ModelError> {
        self.embed_sequences(tape, &[tokens])
    }

    /// Mean-pooled name embeddings, one row per name.
    pub fn embed_names(
        &self,
        tape: &mut Tape<'_, T>,
        names: &[&TokenSeq],
    ) -> Result<Var, ModelError> {
        let e = self.embed_sequences(tape, names)?;
        let lens: Vec<usize> = names.iter().map(|s| s.len()).collect();
        Ok(tape.segment_mean(e, &lens)?)
    }

    /// `x_cn = Avg(Emb(name))`, `[1, d]`.
    pub fn embed_name(&self, tape: &mut Tape<'_, T>, name: &TokenSeq) -> Result<Var, ModelError> {
        self.embed_names(tape, &[name])
    }

    /// `sigmoid(v · relu(wᵀ x + b))` per row of `x`, giving `[n, 1]`.
    fn gate(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        w: usize,
        b: usize,
        v: usize,
    ) -> Result<Var, ModelError> {
        let (w, b, v) = (tape.param(w), tape.param(b), tape.param(v));
        let h = tape.matmul(x, w)?;
        let h = tape.add_row(h, b)?;
        let h = tape.relu(h);
        let s = tape.matmul(h, v)?;
        Ok(tape.sigmoid(s))
    }

    /// Fuse layer for `n` cells: `x_cn [n,d]` with their types.
    /// Returns `(v_cn [n,d], g_dt [n,1])`; the gate reads only `x_dt`.
    pub fn fuse_dtypes(
        &self,
        tape: &mut Tape<'_, T>,
        x_cn: Var,
        dtypes: &[DataType],
    ) -> Result<(Var, Var), ModelError> {
        let table = tape.param(self.ids.dtype);
        let codes: Vec<usize> = dtypes.iter().map(|d| d.code()).collect();
        let x_dt = tape.embedding_lookup(table, &codes)?;
        let g = self.gate(
            tape,
            x_dt,
            self.ids.fuse_w,
            self.ids.fuse_b,
            self.ids.fuse_v,
        )?;
        let keep = tape.one_minus(g);
        let a = tape.mul_col(x_cn, keep)?;
        let b = tape.mul_col(x_dt, g)?;
        Ok((tape.add(a, b)?, g))
    }

    pub fn fuse_dtype(
        &self,
        tape: &mut Tape<'_, T>,
        x_cn: Var,
        dtype: DataType,
    ) -> Result<(Var, Var), ModelError> {
        self.fuse_dtypes(tape, x_cn, &[dtype])
    }

    /// Linking gates `α [n,1]` computed from fused name vectors `v_cn [n,d]`.
    pub fn link_gates(&self, tape: &mut Tape<'_, T>, v_cn: Var) -> Result<Var, ModelError> {
        self.gate(
            tape,
            v_cn,
            self.ids.link_w,
            self.ids.link_b,
            self.ids.link_v,
        )
    }

    /// Linking layer for one cell: `v_cv^i = x_cv^i + α · v_cn` for value
    /// embeddings `[q, d]`. Returns `(v_cv [q,d], α [1,1])`.
    pub fn link_values(
        &self,
        tape: &mut Tape<'_, T>,
        v_cn: Var,
        value_embeds: Var,
    ) -> Result<(Var, Var), ModelError> {
        let alpha = self.link_gates(tape, v_cn)?;
        let q = tape.dims(value_embeds).0;
        let scaled = tape.mul_col(v_cn, alpha)?;
        let rep = tape.select_rows(scaled, &vec![0; q])?;
        Ok((tape.add(value_embeds, rep)?, alpha))
    }

    /// TabUnit over all cells of a row in one batched pass.
    pub fn tab_unit(
        &self,
        tape: &mut Tape<'_, T>,
        cells: &[CellTokens],
    ) -> Result<RowUnits, ModelError> {
        if cells.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let n = cells.len();
        let names: Vec<&TokenSeq> = cells.iter().map(|c| &c.name).collect();
        let values: Vec<&TokenSeq> = cells.iter().map(|c| &c.value).collect();
        let dtypes: Vec<DataType> = cells.iter().map(|c| c.dtype).collect();

        let x_cn = self.embed_names(tape, &names)?;
        let (v_cn, g_dt) = self.fuse_dtypes(tape, x_cn, &dtypes)?;
        let alpha = self.link_gates(tape, v_cn)?;

        let x_cv = self.embed_sequences(tape, &values)?;
        let scaled = tape.mul_col(v_cn, alpha)?;
        let owner: Vec<usize> = values
            .iter()
            .enumerate()
            .flat_map(|(i, v)| std::iter::repeat_n(i, v.len()))
            .collect();
        let rep = tape.select_rows(scaled, &owner)?;
        let v_cv = tape.add(x_cv, rep)?;

        // interleave: cell i -> [v_cn_i, v_cv_i^0..q_i-1]
        let stacked = tape.concat_rows(&[v_cn, v_cv])?;
        let mut order = Vec::with_capacity(n + owner.len());
        let mut offsets = Vec::with_capacity(n);
        let mut lengths = Vec::with_capacity(n);
        let mut value_row = n;
        for (i, v) in values.iter().enumerate() {
            offsets.push(order.len());
            lengths.push(1 + v.len());
            order.push(i);
            order.extend(value_row..value_row + v.len());
            value_row += v.len();
        }
        let x_tu = tape.select_rows(stacked, &order)?;
        Ok(RowUnits {
            x_tu,
            offsets,
            lengths,
            g_dt,
            alpha,
            v_cn,
        })
    }
}

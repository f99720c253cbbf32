use rand::Rng;

use super::{LayerIds, ModelError, RowUnits, UniTabE};
use crate::numeric::{Real, Tape, Var};

/// Encoder output for one row: `[CLS]` state first, then one state per
/// TabUnit vector.
#[derive(Clone, Debug)]
pub struct EncodedRow {
    /// `[N+1, d]`
    pub hidden: Var,
    /// `[1, d]`, row 0 of `hidden`.
    pub cls: Var,
    pub units: RowUnits,
}

impl EncodedRow {
    /// Encoder states excluding `[CLS]`, `[N, d]`.
    pub fn states(&self, tape: &mut Tape<'_, impl Real>) -> Result<Var, ModelError> {
        let n = self.units.total_len();
        Ok(tape.slice_rows(self.hidden, 1, n)?)
    }
}

impl<T: Real> UniTabE<T> {
    fn affine_norm(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        g: usize,
        b: usize,
    ) -> Result<Var, ModelError> {
        let (g, b) = (tape.param(g), tape.param(b));
        let y = tape.layer_norm(x);
        let y = tape.mul_row(y, g)?;
        Ok(tape.add_row(y, b)?)
    }

    fn linear(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        w: usize,
        b: usize,
    ) -> Result<Var, ModelError> {
        let (w, b) = (tape.param(w), tape.param(b));
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }

    /// Post-LN block: `x = LN(x + Attn(x))`, `x = LN(x + FFN(x))`.
    fn encoder_layer<R: Rng>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        ids: &LayerIds,
        rng: &mut Option<&mut R>,
    ) -> Result<Var, ModelError> {
        let p = self.config.dropout;
        let q = self.linear(tape, x, ids.wq, ids.bq)?;
        let k = self.linear(tape, x, ids.wk, ids.bk)?;
        let v = self.linear(tape, x, ids.wv, ids.bv)?;
        let a = tape.attention(q, k, v, self.config.encoder.heads)?;
        let mut o = self.linear(tape, a, ids.wo, ids.bo)?;
        if let Some(r) = rng.as_deref_mut() {
            o = tape.dropout(o, p, r);
        }
        let x = tape.add(x, o)?;
        let x = self.affine_norm(tape, x, ids.ln1_g, ids.ln1_b)?;
        let h = self.linear(tape, x, ids.w1, ids.b1)?;
        let h = tape.gelu(h);
        let mut f = self.linear(tape, h, ids.w2, ids.b2)?;
        if let Some(r) = rng.as_deref_mut() {
            f = tape.dropout(f, p, r);
        }
        let x = tape.add(x, f)?;
        self.affine_norm(tape, x, ids.ln2_g, ids.ln2_b)
    }

    /// Prepends the learned `[CLS]` vector and runs the encoder stack.
    /// Dropout is active only when `rng` is given.
    pub fn encode<R: Rng>(
        &self,
        tape: &mut Tape<'_, T>,
        units: RowUnits,
        mut rng: Option<&mut R>,
    ) -> Result<EncodedRow, ModelError> {
        if units.num_cells() == 0 {
            return Err(ModelError::EmptyInput);
        }
        let cls = tape.param(self.ids.cls);
        let mut x = tape.concat_rows(&[cls, units.x_tu])?;
        for ids in &self.ids.layers {
            x = self.encoder_layer(tape, x, ids, &mut rng)?;
        }
        let cls = tape.slice_rows(x, 0, 1)?;
        Ok(EncodedRow {
            hidden: x,
            cls,
            units,
        })
    }

    /// TabUnit followed by the encoder, without dropout.
    pub fn encode_cells(
        &self,
        tape: &mut Tape<'_, T>,
        cells: &[crate::tokenizer::CellTokens],
    ) -> Result<EncodedRow, ModelError> {
        let units = self.tab_unit(tape, cells)?;
        self.encode(tape, units, None::<&mut crate::numeric::rng::Rng>)
    }
}

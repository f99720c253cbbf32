//! Prompt attention, decoder initial state and the single-layer LSTM
//! decoder whose output projection is the transposed word embedding.

use super::{as_usize, EncodedRow, ModelError, PromptAttnSource, UniTabE};
use crate::numeric::{log_softmax_at, Real, Tape, Var};
use crate::tokenizer::{TokenId, TokenSeq, Vocabulary, BOS, EOS};

/// Restriction applied during [`UniTabE::generate`].
#[derive(Clone, Debug, PartialEq)]
pub enum GenConstraint {
    /// Plain greedy decoding.
    Unconstrained,
    /// Greedy decoding that may not stop before emitting one token.
    NonEmpty,
    /// Greedy decoding restricted to the numeric grammar
    /// `-? digits (. digits)? (e -? digit digit?)?`. The exponent is capped
    /// at two digits so every accepted string is a finite `f64`.
    Numeric,
    /// Pick the best of these sequences by summed token log-probability.
    Allowed(Vec<TokenSeq>),
}

/// Numeric-grammar automaton used for constrained numeric decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NumericGrammar {
    Start,
    Sign,
    Int,
    Dot,
    Frac,
    Exp,
    ExpSign,
    ExpDigits,
    ExpFull,
}

impl NumericGrammar {
    pub fn accepting(self) -> bool {
        matches!(
            self,
            NumericGrammar::Int
                | NumericGrammar::Frac
                | NumericGrammar::ExpDigits
                | NumericGrammar::ExpFull
        )
    }

    /// Next state after `symbol` (one of the thirteen numeric symbols).
    pub fn next(self, symbol: char) -> Option<NumericGrammar> {
        use NumericGrammar::*;
        let digit = symbol.is_ascii_digit();
        match (self, symbol) {
            (Start, '-') => Some(Sign),
            (Start | Sign | Int, _) if digit => Some(Int),
            (Int, '.') => Some(Dot),
            (Int | Frac, 'e') => Some(Exp),
            (Dot | Frac, _) if digit => Some(Frac),
            (Exp, '-') => Some(ExpSign),
            (Exp | ExpSign, _) if digit => Some(ExpDigits),
            (ExpDigits, _) if digit => Some(ExpFull),
            _ => None,
        }
    }
}

impl<T: Real> UniTabE<T> {
    /// Decoder initial state from the encoded row and a prompt:
    /// prompt-to-cell attention, score-weighted pooling of the attended
    /// prompt states, then a linear map of `[v_p ; h_cls]`. Returns `[1, d]`.
    pub fn decoder_init(
        &self,
        tape: &mut Tape<'_, T>,
        enc: &EncodedRow,
        prompt: &TokenSeq,
    ) -> Result<Var, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        let d = self.config.d();
        let p = self.embed_tokens(tape, prompt)?;
        let w1 = tape.param(self.ids.prompt_w1);
        let w2 = tape.param(self.ids.prompt_w2);
        let v1 = tape.param(self.ids.prompt_v1);
        let queries = tape.matmul(p, w1)?;
        let source = match self.config.prompt_attn_source {
            PromptAttnSource::Tabunit => enc.units.x_tu,
            PromptAttnSource::Encoder => enc.states(tape)?,
        };
        let kv = tape.matmul(source, w2)?;
        let y = tape.attention(queries, kv, kv, 1)?;
        let scores = tape.matmul(y, v1)?;
        let q = tape.dims(scores).0;
        let scores = tape.reshape(scores, 1, q)?;
        let weights = tape.softmax(scores);
        let v_p = tape.matmul(weights, y)?;
        let joined = tape.concat_cols(&[v_p, enc.cls])?;
        let ws = tape.param(self.ids.state_w);
        let bs = tape.param(self.ids.state_b);
        let s = tape.matmul(joined, ws)?;
        let s = tape.add_row(s, bs)?;
        debug_assert_eq!(tape.dims(s), (1, d));
        Ok(s)
    }

    /// One LSTM step given the precomputed input projection `x W_ih`.
    fn lstm_step(
        &self,
        tape: &mut Tape<'_, T>,
        xproj: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var), ModelError> {
        let d = self.config.d();
        let whh = tape.param(self.ids.lstm_whh);
        let b = tape.param(self.ids.lstm_b);
        let hh = tape.matmul(h, whh)?;
        let gates = tape.add(xproj, hh)?;
        let gates = tape.add_row(gates, b)?;
        let i = tape.slice_cols(gates, 0, d)?;
        let f = tape.slice_cols(gates, d, d)?;
        let g = tape.slice_cols(gates, 2 * d, d)?;
        let o = tape.slice_cols(gates, 3 * d, d)?;
        let (i, f, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.sigmoid(o));
        let g = tape.tanh(g);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }

    fn input_projection(&self, tape: &mut Tape<'_, T>, ids: &[TokenId]) -> Result<Var, ModelError> {
        let word = tape.param(self.ids.word);
        let wih = tape.param(self.ids.lstm_wih);
        let x = tape.embedding_lookup(word, &as_usize(ids))?;
        Ok(tape.matmul(x, wih)?)
    }

    fn project_vocab(&self, tape: &mut Tape<'_, T>, h: Var) -> Result<Var, ModelError> {
        let word = tape.param(self.ids.word);
        Ok(tape.matmul_t(h, word)?)
    }

    /// Teacher-forced logits `[T, V]` for `target`, fed `[BOS] + target[..T-1]`.
    pub fn teacher_forced_logits(
        &self,
        tape: &mut Tape<'_, T>,
        state: Var,
        target: &TokenSeq,
    ) -> Result<Var, ModelError> {
        if target.is_empty() {
            return Err(ModelError::EmptyTarget);
        }
        self.check_tokens(target.ids())?;
        let d = self.config.d();
        let mut inputs = Vec::with_capacity(target.len());
        inputs.push(BOS);
        inputs.extend_from_slice(&target.ids()[..target.len() - 1]);
        let xproj = self.input_projection(tape, &inputs)?;
        let mut h = state;
        let mut c = tape.constant(1, d, vec![T::zero(); d])?;
        let mut hs = Vec::with_capacity(target.len());
        for t in 0..target.len() {
            let xt = tape.slice_rows(xproj, t, 1)?;
            (h, c) = self.lstm_step(tape, xt, h, c)?;
            hs.push(h);
        }
        let hs = tape.concat_rows(&hs)?;
        self.project_vocab(tape, hs)
    }

    /// Mean token cross-entropy of `target` (which must end in `[EOS]`).
    pub fn decode_train(
        &self,
        tape: &mut Tape<'_, T>,
        state: Var,
        target: &TokenSeq,
    ) -> Result<Var, ModelError> {
        if target.is_empty() {
            return Err(ModelError::EmptyTarget);
        }
        if target.ids().last() != Some(&EOS) {
            return Err(ModelError::UnterminatedTarget);
        }
        let logits = self.teacher_forced_logits(tape, state, target)?;
        Ok(tape.cross_entropy(logits, &as_usize(target.ids()))?)
    }

    /// Summed token log-probability of `seq` followed by `[EOS]`.
    pub fn sequence_log_prob(
        &self,
        tape: &mut Tape<'_, T>,
        state: Var,
        seq: &TokenSeq,
    ) -> Result<f64, ModelError> {
        let target = if seq.ids().last() == Some(&EOS) {
            seq.clone()
        } else {
            seq.with_eos()
        };
        let logits = self.teacher_forced_logits(tape, state, &target)?;
        let v = self.config.vocab_size;
        let vals = tape.value(logits);
        Ok(target
            .ids()
            .iter()
            .enumerate()
            .map(|(t, &y)| log_softmax_at(&vals[t * v..(t + 1) * v], y as usize).as_f64())
            .sum())
    }

    /// Normalized label probabilities `exp(LL_k) / Σ_j exp(LL_j)`.
    pub fn label_score(
        &self,
        tape: &mut Tape<'_, T>,
        state: Var,
        labels: &[TokenSeq],
    ) -> Result<Vec<f64>, ModelError> {
        let ll = labels
            .iter()
            .map(|l| self.sequence_log_prob(tape, state, l))
            .collect::<Result<Vec<_>, _>>()?;
        let max = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = ll.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / z).collect())
    }

    /// Greedy decoding from `state`, returning the tokens before `[EOS]`.
    pub fn generate(
        &self,
        tape: &mut Tape<'_, T>,
        state: Var,
        constraint: &GenConstraint,
        max_len: usize,
    ) -> Result<TokenSeq, ModelError> {
        let max_len = max_len.max(1);
        if let GenConstraint::Allowed(options) = constraint {
            let mut best: Option<(usize, f64)> = None;
            for (k, seq) in options.iter().enumerate() {
                let ll = self.sequence_log_prob(tape, state, seq)?;
                if best.is_none_or(|(_, b)| ll > b) {
                    best = Some((k, ll));
                }
            }
            let (k, _) = best.ok_or(ModelError::EmptyTarget)?;
            let mut out = options[k].clone();
            if out.ids().last() == Some(&EOS) {
                out.0.pop();
            }
            return Ok(out);
        }

        let d = self.config.d();
        let v = self.config.vocab_size;
        let mut h = state;
        let mut c = tape.constant(1, d, vec![T::zero(); d])?;
        let mut prev = BOS;
        let mut out = Vec::new();
        let mut grammar = NumericGrammar::Start;
        for step in 0..max_len {
            let xt = self.input_projection(tape, &[prev])?;
            (h, c) = self.lstm_step(tape, xt, h, c)?;
            let logits = self.project_vocab(tape, h)?;
            let vals = tape.value(logits);
            let last = step + 1 == max_len;
            let allowed = |id: usize| -> bool {
                match constraint {
                    GenConstraint::Unconstrained => true,
                    GenConstraint::NonEmpty => !(step == 0 && id == EOS as usize),
                    GenConstraint::Numeric => {
                        if id == EOS as usize {
                            return grammar.accepting();
                        }
                        if !Vocabulary::is_numeric_symbol(id as TokenId) {
                            return false;
                        }
                        let sym = numeric_char(id as TokenId);
                        match grammar.next(sym) {
                            Some(next) => !last || next.accepting(),
                            None => false,
                        }
                    }
                    GenConstraint::Allowed(_) => unreachable!(),
                }
            };
            let mut best: Option<(usize, T)> = None;
            for (id, &x) in vals.iter().enumerate().take(v) {
                if allowed(id) && best.is_none_or(|(_, b)| x > b) {
                    best = Some((id, x));
                }
            }
            let Some((id, _)) = best else { break };
            let id = id as TokenId;
            if id == EOS {
                break;
            }
            if matches!(constraint, GenConstraint::Numeric) {
                grammar = grammar.next(numeric_char(id)).expect("allowed transition");
            }
            out.push(id);
            prev = id;
        }
        Ok(TokenSeq(out))
    }
}

fn numeric_char(id: TokenId) -> char {
    let k = id as usize - crate::tokenizer::SPECIAL_TOKENS.len();
    crate::tokenizer::NUMERIC_SYMBOLS[k]
        .chars()
        .next()
        .expect("non-empty symbol")
}

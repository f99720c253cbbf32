//! The UniTabE network: TabUnit cell featurizer, Transformer encoder and
//! prompt-conditioned LSTM decoder, over a shared [`ParamSet`].

mod decoder;
mod encoder;
mod tabunit;

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::numeric::{rng, NumericError, ParamSet, Real, Tensor};
use crate::tokenizer::MAX_PROMPT_TOKENS;

pub use decoder::{GenConstraint, NumericGrammar};
pub use encoder::EncodedRow;
pub use tabunit::RowUnits;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("row has no cells")]
    EmptyInput,
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("decode target is empty")]
    EmptyTarget,
    #[error("decode target must end with [EOS]")]
    UnterminatedTarget,
    #[error("token sequence is empty")]
    EmptySeq,
    #[error("token id {0} outside vocabulary of {1}")]
    TokenOutOfRange(u32, usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Base,
    Large,
    Xlarge,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "base" => Ok(Preset::Base),
            "large" => Ok(Preset::Large),
            "xlarge" => Ok(Preset::Xlarge),
            other => Err(format!("unknown preset {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl EncoderConfig {
    pub fn preset(p: Preset) -> Self {
        let (d_model, layers, heads) = match p {
            Preset::Tiny => (64, 2, 4),
            Preset::Base => (768, 12, 12),
            Preset::Large => (1024, 24, 16),
            Preset::Xlarge => (1024, 48, 16),
        };
        Self {
            d_model,
            layers,
            heads,
            ffn: 4 * d_model,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0
            || self.heads == 0
            || self.d_model == 0
            || self.d_model % self.heads != 0
        {
            return Err(ModelError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Which sequence the decoder's prompt attention reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptAttnSource {
    /// Pre-encoder TabUnit vectors.
    #[default]
    Tabunit,
    /// Encoder outputs (excluding `[CLS]`).
    Encoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub prompt_attn_source: PromptAttnSource,
}

impl ModelConfig {
    pub fn new(preset: Preset, vocab_size: usize) -> Self {
        Self {
            preset,
            encoder: EncoderConfig::preset(preset),
            vocab_size,
            max_positions: MAX_PROMPT_TOKENS,
            dropout: 0.1,
            prompt_attn_source: PromptAttnSource::Tabunit,
        }
    }

    pub fn d(&self) -> usize {
        self.encoder.d_model
    }

    /// Scalar parameter count implied by this configuration.
    pub fn num_params(&self) -> usize {
        layout(self)
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerIds {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ParamIds {
    pub word: usize,
    pub pos: usize,
    pub dtype: usize,
    pub fuse_w: usize,
    pub fuse_b: usize,
    pub fuse_v: usize,
    pub link_w: usize,
    pub link_b: usize,
    pub link_v: usize,
    pub cls: usize,
    pub layers: Vec<LayerIds>,
    pub prompt_w1: usize,
    pub prompt_w2: usize,
    pub prompt_v1: usize,
    pub state_w: usize,
    pub state_b: usize,
    pub lstm_wih: usize,
    pub lstm_whh: usize,
    pub lstm_b: usize,
}

/// Standard deviation of the token, position, dtype and `[CLS]` embeddings.
pub const EMBED_STD: f64 = 1.0;

enum Init {
    Normal(f64),
    Uniform(usize),
    Zeros,
    Ones,
}

/// Parameter names and shapes in registration order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d();
    let f = cfg.encoder.ffn;
    let mut out = vec![
        (
            "emb.word".to_string(),
            vec![cfg.vocab_size, d],
            Init::Normal(EMBED_STD),
        ),
        (
            "emb.pos".into(),
            vec![cfg.max_positions, d],
            Init::Normal(EMBED_STD),
        ),
        ("emb.dtype".into(), vec![3, d], Init::Normal(EMBED_STD)),
        ("fuse.w".into(), vec![d, d], Init::Uniform(d)),
        ("fuse.b".into(), vec![d], Init::Zeros),
        ("fuse.v".into(), vec![d, 1], Init::Uniform(d)),
        ("link.w".into(), vec![d, d], Init::Uniform(d)),
        ("link.b".into(), vec![d], Init::Zeros),
        ("link.v".into(), vec![d, 1], Init::Uniform(d)),
        ("enc.cls".into(), vec![d], Init::Normal(EMBED_STD)),
    ];
    for l in 0..cfg.encoder.layers {
        let p = |s: &str| format!("enc.{l}.{s}");
        out.extend([
            (p("attn.wq"), vec![d, d], Init::Uniform(d)),
            (p("attn.bq"), vec![d], Init::Uniform(d)),
            (p("attn.wk"), vec![d, d], Init::Uniform(d)),
            (p("attn.bk"), vec![d], Init::Uniform(d)),
            (p("attn.wv"), vec![d, d], Init::Uniform(d)),
            (p("attn.bv"), vec![d], Init::Uniform(d)),
            (p("attn.wo"), vec![d, d], Init::Uniform(d)),
            (p("attn.bo"), vec![d], Init::Uniform(d)),
            (p("ln1.g"), vec![d], Init::Ones),
            (p("ln1.b"), vec![d], Init::Zeros),
            (p("ffn.w1"), vec![d, f], Init::Uniform(d)),
            (p("ffn.b1"), vec![f], Init::Uniform(d)),
            (p("ffn.w2"), vec![f, d], Init::Uniform(f)),
            (p("ffn.b2"), vec![d], Init::Uniform(f)),
            (p("ln2.g"), vec![d], Init::Ones),
            (p("ln2.b"), vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        ("dec.prompt.w1".to_string(), vec![d, d], Init::Uniform(d)),
        ("dec.prompt.w2".into(), vec![d, d], Init::Uniform(d)),
        ("dec.prompt.v1".into(), vec![d, 1], Init::Uniform(d)),
        ("dec.state.w".into(), vec![2 * d, d], Init::Uniform(2 * d)),
        ("dec.state.b".into(), vec![d], Init::Uniform(2 * d)),
        ("dec.lstm.w_ih".into(), vec![d, 4 * d], Init::Uniform(d)),
        ("dec.lstm.w_hh".into(), vec![d, 4 * d], Init::Uniform(d)),
        ("dec.lstm.b".into(), vec![4 * d], Init::Uniform(d)),
    ]);
    out
}

fn resolve_ids<T: Real>(cfg: &ModelConfig, params: &ParamSet<T>) -> Result<ParamIds, ModelError> {
    let expected = layout(cfg);
    if params.len() != expected.len() {
        return Err(ModelError::InvalidConfig(format!(
            "{} parameters, expected {}",
            params.len(),
            expected.len()
        )));
    }
    for (name, shape, _) in &expected {
        let t = params
            .by_name(name)
            .ok_or_else(|| ModelError::InvalidConfig(format!("missing {name}")))?;
        if t.shape() != shape.as_slice() {
            return Err(ModelError::InvalidConfig(format!(
                "{name}: shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
    }
    let id = |n: &str| params.id(n).expect("checked above");
    let layers = (0..cfg.encoder.layers)
        .map(|l| {
            let p = |s: &str| id(&format!("enc.{l}.{s}"));
            LayerIds {
                wq: p("attn.wq"),
                bq: p("attn.bq"),
                wk: p("attn.wk"),
                bk: p("attn.bk"),
                wv: p("attn.wv"),
                bv: p("attn.bv"),
                wo: p("attn.wo"),
                bo: p("attn.bo"),
                ln1_g: p("ln1.g"),
                ln1_b: p("ln1.b"),
                w1: p("ffn.w1"),
                b1: p("ffn.b1"),
                w2: p("ffn.w2"),
                b2: p("ffn.b2"),
                ln2_g: p("ln2.g"),
                ln2_b: p("ln2.b"),
            }
        })
        .collect();
    Ok(ParamIds {
        word: id("emb.word"),
        pos: id("emb.pos"),
        dtype: id("emb.dtype"),
        fuse_w: id("fuse.w"),
        fuse_b: id("fuse.b"),
        fuse_v: id("fuse.v"),
        link_w: id("link.w"),
        link_b: id("link.b"),
        link_v: id("link.v"),
        cls: id("enc.cls"),
        layers,
        prompt_w1: id("dec.prompt.w1"),
        prompt_w2: id("dec.prompt.w2"),
        prompt_v1: id("dec.prompt.v1"),
        state_w: id("dec.state.w"),
        state_b: id("dec.state.b"),
        lstm_wih: id("dec.lstm.w_ih"),
        lstm_whh: id("dec.lstm.w_hh"),
        lstm_b: id("dec.lstm.b"),
    })
}

/// Model configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct UniTabE<T> {
    config: ModelConfig,
    params: ParamSet<T>,
    ids: ParamIds,
}

impl<T: Real> UniTabE<T> {
    /// Fresh parameters: embeddings `N(0, 1)`, linear weights and biases
    /// `U(±1/√fan_in)`, gate biases zero, layer-norm gains one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.encoder.validate()?;
        if config.vocab_size < 6 || config.max_positions == 0 {
            return Err(ModelError::InvalidConfig(format!("{config:?}")));
        }
        let mut params = ParamSet::new();
        for (i, (name, shape, init)) in layout(&config).into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let mut r = rng::stream(seed, &[0x1417, i as u64]);
            let data: Vec<T> = match init {
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| T::of(dist.sample(&mut r))).collect()
                }
                Init::Uniform(fan_in) => {
                    let b = 1.0 / (fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-b, b).expect("valid bounds");
                    (0..n).map(|_| T::of(dist.sample(&mut r))).collect()
                }
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            params.register(name, Tensor::new(shape, data)?)?;
        }
        let ids = resolve_ids(&config, &params)?;
        Ok(Self {
            config,
            params,
            ids,
        })
    }

    /// Wraps existing parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self, ModelError> {
        config.encoder.validate()?;
        let ids = resolve_ids(&config, &params)?;
        Ok(Self {
            config,
            params,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn set_dropout(&mut self, p: f64) {
        self.config.dropout = p;
    }

    pub fn set_prompt_attn_source(&mut self, s: PromptAttnSource) {
        self.config.prompt_attn_source = s;
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<U: Real>(&self) -> UniTabE<U> {
        UniTabE {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    pub(crate) fn check_tokens(&self, ids: &[u32]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptySeq);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange(bad, self.config.vocab_size));
        }
        Ok(())
    }

    /// Positions `0..len`, clamped to the positional table.
    pub(crate) fn positions(&self, len: usize) -> Vec<usize> {
        (0..len)
            .map(|p| p.min(self.config.max_positions - 1))
            .collect()
    }
}

pub(crate) fn as_usize(ids: &[u32]) -> Vec<usize> {
    ids.iter().map(|&i| i as usize).collect()
}

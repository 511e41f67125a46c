//! The inflection encoder-decoder and its comparison variants.
//!
//! A model owns one character embedding table, an optional bidirectional
//! encoder, and one or more *heads*. A head is everything that is specific to
//! an inflection tag: the affine transform of the encoding, the decoder LSTM,
//! the output softmax and, for the attention variant, the attention weights.
//! Factored training produces one single-head model per tag; joint training
//! produces one model whose heads share the embedding table and encoder.

mod checkpoint;
mod forward;
pub mod vocab;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::lstm::{uniform, LstmParams};
use crate::nn::{ParamId, ParamStore, Tensor};

pub use checkpoint::FORMAT_VERSION;
pub use forward::{attention_context, Encoded};
pub use vocab::CharVocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelVariant {
    /// Encoding, previous output and current input character at every step.
    Full,
    /// Classic encoder-decoder: the encoding only initialises the decoder.
    PlainEncDec,
    /// Additive attention over encoder states, no input characters.
    Attention,
    /// The full wiring with the encoder removed.
    NoEncoder,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [
        ModelVariant::Full,
        ModelVariant::PlainEncDec,
        ModelVariant::Attention,
        ModelVariant::NoEncoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Full => "full",
            ModelVariant::PlainEncDec => "plain-encdec",
            ModelVariant::Attention => "attention",
            ModelVariant::NoEncoder => "no-encoder",
        }
    }

    pub fn has_encoder(self) -> bool {
        self != ModelVariant::NoEncoder
    }

    /// Whether the decoder reads the lemma character at each step.
    pub fn feeds_input(self) -> bool {
        matches!(self, ModelVariant::Full | ModelVariant::NoEncoder)
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub w_enc: ParamId,
    pub w_dec: ParamId,
    pub v: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadParams {
    pub trans: Option<(ParamId, ParamId)>,
    pub decoder: LstmParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub attention: Option<AttentionParams>,
    /// Unconstrained interpolation weight; the LM exponent is `softplus` of it.
    pub lambda_hat: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InflectionModel {
    vocab: CharVocab,
    config: ModelConfig,
    variant: ModelVariant,
    store: ParamStore,
    embed: ParamId,
    encoder: Option<EncoderParams>,
    heads: BTreeMap<String, HeadParams>,
}

/// Options for building freshly initialised heads.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadInit {
    /// Initial `lambda_hat` when the head carries an LM interpolation weight.
    pub lambda_hat: Option<f64>,
}

pub(crate) fn head_prefix(tag: &str) -> String {
    format!("head.{tag}")
}

impl InflectionModel {
    /// Builds a randomly initialised model with one head per tag. Parameters
    /// are drawn in a fixed order, so equal seeds give equal models.
    pub fn new(
        vocab: CharVocab,
        config: ModelConfig,
        variant: ModelVariant,
        tags: &[String],
        init: HeadInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.hidden == 0 || config.embed_dim == 0 {
            return Err(Error::invalid("hidden and embedding sizes must be >= 1"));
        }
        if tags.is_empty() {
            return Err(Error::invalid("a model needs at least one tag"));
        }
        let (n, d, v) = (config.hidden, config.embed_dim, vocab.len());
        let mut store = ParamStore::new();
        let embed = store.add("embed", Tensor::matrix(v, d, uniform(rng, v * d))?)?;
        let encoder = if variant.has_encoder() {
            Some(EncoderParams {
                fwd: LstmParams::init(&mut store, "enc.fwd", d, n, rng)?,
                bwd: LstmParams::init(&mut store, "enc.bwd", d, n, rng)?,
            })
        } else {
            None
        };
        let mut sorted: Vec<&String> = tags.iter().collect();
        sorted.sort();
        sorted.dedup();
        let mut heads = BTreeMap::new();
        for tag in sorted {
            let head = Self::init_head(&mut store, variant, config, v, tag, init, rng)?;
            heads.insert(tag.clone(), head);
        }
        Ok(InflectionModel {
            vocab,
            config,
            variant,
            store,
            embed,
            encoder,
            heads,
        })
    }

    fn init_head(
        store: &mut ParamStore,
        variant: ModelVariant,
        config: ModelConfig,
        vocab_len: usize,
        tag: &str,
        init: HeadInit,
        rng: &mut impl Rng,
    ) -> Result<HeadParams> {
        let (n, d) = (config.hidden, config.embed_dim);
        let p = head_prefix(tag);
        let trans = if variant.has_encoder() {
            let w = store.add(
                format!("{p}.trans.w"),
                Tensor::matrix(n, 2 * n, uniform(rng, 2 * n * n))?,
            )?;
            let b = store.add(format!("{p}.trans.b"), Tensor::vector(uniform(rng, n)))?;
            Some((w, b))
        } else {
            None
        };
        let input = match variant {
            ModelVariant::Full => n + 2 * d,
            ModelVariant::PlainEncDec => d,
            ModelVariant::Attention => 2 * n + d,
            ModelVariant::NoEncoder => 2 * d,
        };
        let decoder = LstmParams::init(store, &format!("{p}.dec"), input, n, rng)?;
        let out_w = store.add(
            format!("{p}.out.w"),
            Tensor::matrix(vocab_len, n, uniform(rng, vocab_len * n))?,
        )?;
        let out_b = store.add(
            format!("{p}.out.b"),
            Tensor::vector(uniform(rng, vocab_len)),
        )?;
        let attention = if variant == ModelVariant::Attention {
            Some(AttentionParams {
                w_enc: store.add(
                    format!("{p}.attn.w_enc"),
                    Tensor::matrix(n, 2 * n, uniform(rng, 2 * n * n))?,
                )?,
                w_dec: store.add(
                    format!("{p}.attn.w_dec"),
                    Tensor::matrix(n, n, uniform(rng, n * n))?,
                )?,
                v: store.add(format!("{p}.attn.v"), Tensor::vector(uniform(rng, n)))?,
            })
        } else {
            None
        };
        let lambda_hat = match init.lambda_hat {
            Some(x) => Some(store.add(format!("{p}.lambda_hat"), Tensor::vector(vec![x]))?),
            None => None,
        };
        Ok(HeadParams {
            trans,
            decoder,
            out_w,
            out_b,
            attention,
            lambda_hat,
        })
    }

    /// Rebuilds the layout from a parameter store and validates every shape.
    pub(crate) fn from_parts(
        vocab: CharVocab,
        config: ModelConfig,
        variant: ModelVariant,
        tags: &[String],
        store: ParamStore,
    ) -> Result<Self> {
        let (n, d, v) = (config.hidden, config.embed_dim, vocab.len());
        let find = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let expect = |id: ParamId, shape: &[usize]| {
            if store.get(id).shape() == shape {
                Ok(id)
            } else {
                Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    store.name(id),
                    store.get(id).shape(),
                    shape
                )))
            }
        };
        let lstm = |prefix: &str, input: usize| -> Result<LstmParams> {
            let p = LstmParams::from_store(&store, prefix)?;
            if p.input != input || p.hidden != n {
                return Err(Error::Checkpoint(format!(
                    "LSTM `{prefix}` is {}x{}, expected {input}x{n}",
                    p.input, p.hidden
                )));
            }
            Ok(p)
        };

        let embed = expect(find("embed")?, &[v, d])?;
        let encoder = if variant.has_encoder() {
            Some(EncoderParams {
                fwd: lstm("enc.fwd", d)?,
                bwd: lstm("enc.bwd", d)?,
            })
        } else {
            None
        };
        let mut heads = BTreeMap::new();
        for tag in tags {
            let p = head_prefix(tag);
            let trans = if variant.has_encoder() {
                Some((
                    expect(find(&format!("{p}.trans.w"))?, &[n, 2 * n])?,
                    expect(find(&format!("{p}.trans.b"))?, &[n])?,
                ))
            } else {
                None
            };
            let input = match variant {
                ModelVariant::Full => n + 2 * d,
                ModelVariant::PlainEncDec => d,
                ModelVariant::Attention => 2 * n + d,
                ModelVariant::NoEncoder => 2 * d,
            };
            let attention = if variant == ModelVariant::Attention {
                Some(AttentionParams {
                    w_enc: expect(find(&format!("{p}.attn.w_enc"))?, &[n, 2 * n])?,
                    w_dec: expect(find(&format!("{p}.attn.w_dec"))?, &[n, n])?,
                    v: expect(find(&format!("{p}.attn.v"))?, &[n])?,
                })
            } else {
                None
            };
            let lambda_hat = match store.id(&format!("{p}.lambda_hat")) {
                Some(id) => Some(expect(id, &[1])?),
                None => None,
            };
            heads.insert(
                tag.clone(),
                HeadParams {
                    trans,
                    decoder: lstm(&format!("{p}.dec"), input)?,
                    out_w: expect(find(&format!("{p}.out.w"))?, &[v, n])?,
                    out_b: expect(find(&format!("{p}.out.b"))?, &[v])?,
                    attention,
                    lambda_hat,
                },
            );
        }
        Ok(InflectionModel {
            vocab,
            config,
            variant,
            store,
            embed,
            encoder,
            heads,
        })
    }

    pub fn vocab(&self) -> &CharVocab {
        &self.vocab
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn variant(&self) -> ModelVariant {
        self.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn embed_id(&self) -> ParamId {
        self.embed
    }

    pub fn encoder(&self) -> Option<&EncoderParams> {
        self.encoder.as_ref()
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.heads.keys().map(String::as_str)
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.heads.contains_key(tag)
    }

    pub fn head(&self, tag: &str) -> Result<&HeadParams> {
        self.heads
            .get(tag)
            .ok_or_else(|| Error::MissingModel(tag.to_string()))
    }

    /// Embedding row for a character id.
    pub fn embedding(&self, id: usize) -> Result<&[f64]> {
        let t = self.store.get(self.embed);
        if id >= t.rows() {
            return Err(Error::invalid(format!(
                "character id {id} outside vocabulary of size {}",
                t.rows()
            )));
        }
        Ok(t.row(id))
    }

    /// Learned LM interpolation exponent for a head, if it has one.
    pub fn lambda(&self, tag: &str) -> Result<Option<f64>> {
        let head = self.head(tag)?;
        Ok(head
            .lambda_hat
            .map(|id| crate::nn::softplus(self.store.get(id).data()[0])))
    }

    /// Tensors every head reads: the embedding table and the encoder.
    pub fn shared_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed];
        if let Some(enc) = &self.encoder {
            for p in [enc.fwd, enc.bwd] {
                ids.extend([p.w_x, p.w_h, p.b]);
            }
        }
        ids
    }
}

//! Feature-vector image encoder and bag-of-tokens text encoder.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, Bound, ParamId, ParamStore};

pub const OOV_TOKEN: &str = "<unk>";

/// Lowercases and splits on every run of non-alphanumeric characters.
pub fn tokenize_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Frozen token vocabulary: the OOV token at index 0, then sorted words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let words: BTreeSet<String> = texts
            .into_iter()
            .flat_map(|t| tokenize_words(t.as_ref()))
            .collect();
        let tokens = std::iter::once(OOV_TOKEN.to_string()).chain(words).collect();
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(OOV_TOKEN) {
            return Err(Error::Validation(format!("vocabulary must start with {OOV_TOKEN:?}")));
        }
        if tokens[1..].windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation("vocabulary tokens must be sorted and unique".into()));
        }
        let lookup = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocabulary { tokens, lookup })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn oov_id(&self) -> usize {
        0
    }

    pub fn id(&self, word: &str) -> usize {
        self.lookup.get(word).copied().unwrap_or(0)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        tokenize_words(text).iter().map(|w| self.id(w)).collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Two-layer tanh perceptron `d_in -> hidden -> dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    pub d_in: usize,
    pub hidden: usize,
    pub dim: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl ImageEncoder {
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng, d_in: usize, hidden: usize, dim: usize) -> Result<Self> {
        if d_in == 0 || hidden == 0 || dim == 0 {
            return Err(Error::InvalidArgument("image encoder dimensions must be positive".into()));
        }
        Ok(ImageEncoder {
            d_in,
            hidden,
            dim,
            w1: store.add("image.w1", glorot_uniform(rng, d_in, hidden))?,
            b1: store.add("image.b1", Tensor::zeros(1, hidden))?,
            w2: store.add("image.w2", glorot_uniform(rng, hidden, dim))?,
            b2: store.add("image.b2", Tensor::zeros(1, dim))?,
        })
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Stacks feature vectors into a constant `n x d_in` input.
    pub fn input(&self, tape: &mut Tape, features: &[&[f64]]) -> Result<Var> {
        let mut data = Vec::with_capacity(features.len() * self.d_in);
        for (i, f) in features.iter().enumerate() {
            if f.len() != self.d_in {
                return Err(Error::dim(
                    "encode_image",
                    format!("sample {i} has {} features, encoder expects {}", f.len(), self.d_in),
                ));
            }
            data.extend_from_slice(f);
        }
        tape.constant(Tensor::new(features.len(), self.d_in, data)?)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p[self.w1])?;
        let h = tape.add_row(h, p[self.b1])?;
        let h = tape.tanh(h)?;
        let y = tape.matmul(h, p[self.w2])?;
        tape.add_row(y, p[self.b2])
    }

    pub fn encode(&self, tape: &mut Tape, p: &Bound, features: &[&[f64]]) -> Result<Var> {
        let x = self.input(tape, features)?;
        self.forward(tape, p, x)
    }
}

/// Mean of token embeddings followed by an affine projection to `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub vocab_size: usize,
    pub d_embed: usize,
    pub dim: usize,
    embed: ParamId,
    proj: ParamId,
    bias: ParamId,
}

impl TextEncoder {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        vocab_size: usize,
        d_embed: usize,
        dim: usize,
    ) -> Result<Self> {
        if vocab_size == 0 || d_embed == 0 || dim == 0 {
            return Err(Error::InvalidArgument("text encoder dimensions must be positive".into()));
        }
        Ok(TextEncoder {
            vocab_size,
            d_embed,
            dim,
            embed: store.add("text.embed", glorot_uniform(rng, vocab_size, d_embed))?,
            proj: store.add("text.proj", glorot_uniform(rng, d_embed, dim))?,
            bias: store.add("text.bias", Tensor::zeros(1, dim))?,
        })
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.embed, self.proj, self.bias]
    }

    /// One row per token bag; an empty bag encodes to the bias.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, bags: &[Vec<usize>]) -> Result<Var> {
        if let Some(bad) = bags.iter().flatten().find(|&&t| t >= self.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside a {}-token vocabulary",
                self.vocab_size
            )));
        }
        let pooled = tape.bag_mean(p[self.embed], bags)?;
        let y = tape.matmul(pooled, p[self.proj])?;
        tape.add_row(y, p[self.bias])
    }
}

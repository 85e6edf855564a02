//! Sentence handling: vocabulary, tokenization and the convolutional sentence
//! encoder whose max-pooled output serves as the semantic anchor.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::numerics::{Graph, LayerSpec, ParamId, ParamStore, Sequential, Tensor, Var};
use crate::{Error, Result};

/// Token sequences are padded or truncated to this length.
pub const MAX_TOKENS: usize = 16;
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const NUM_SPECIALS: usize = 2;

/// Bijective token table. Ids 0 and 1 are reserved for padding and unknown words.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from the distinct words of `sentences`, sorted.
    pub fn from_sentences<'a>(sentences: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = sentences.into_iter().flat_map(words).collect();
        Self::from_tokens(words)
    }

    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut vocab = Self::default();
        for t in tokens {
            if !vocab.ids.contains_key(&t) {
                vocab.ids.insert(t.clone(), vocab.tokens.len() + NUM_SPECIALS);
                vocab.tokens.push(t);
            }
        }
        vocab
    }

    /// Total id count including the special tokens.
    pub fn len(&self) -> usize {
        self.tokens.len() + NUM_SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        match id {
            PAD_ID => Some("<pad>"),
            UNK_ID => Some("<unk>"),
            _ => self.tokens.get(id - NUM_SPECIALS).map(String::as_str),
        }
    }

    /// One token per line; line `i` (0-based) holds id `i + 2`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(Self::from_tokens(
            text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::file(path, e))
    }
}

/// Lowercased words split on anything that is not alphanumeric.
pub fn words(sentence: &str) -> impl Iterator<Item = String> + '_ {
    sentence
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Exactly [`MAX_TOKENS`] ids, right-padded with [`PAD_ID`].
pub fn tokenize(sentence: &str, vocab: &Vocabulary) -> Vec<usize> {
    let mut ids: Vec<usize> = words(sentence).take(MAX_TOKENS).map(|w| vocab.id(&w)).collect();
    ids.resize(MAX_TOKENS, PAD_ID);
    ids
}

/// Space-joined tokens with padding dropped.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&id| id != PAD_ID)
        .map(|&id| vocab.token(id).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Per-column maximum of a `[tokens, D]` feature matrix.
pub fn anchor_vector(features: &Tensor) -> Result<Tensor> {
    if features.ndim() != 2 || features.dim(0) == 0 {
        return Err(Error::shape("anchor vector", format!("{:?}", features.shape())));
    }
    let d = features.dim(1);
    let mut out = vec![f64::NEG_INFINITY; d];
    for i in 0..features.dim(0) {
        for (o, &v) in out.iter_mut().zip(features.row(i)) {
            *o = o.max(v);
        }
    }
    Ok(Tensor::vector(out))
}

/// Encoded sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceSpec {
    pub tokens: Vec<usize>,
    /// `[MAX_TOKENS, D]`.
    pub features: Tensor,
    /// `[D]`.
    pub anchor: Tensor,
}

/// Learned word embedding followed by three same-padded 1-D convolutions.
#[derive(Clone, Debug)]
pub struct SentenceEncoder {
    embedding: ParamId,
    convs: Sequential,
    dim: usize,
}

impl SentenceEncoder {
    pub fn build<R: Rng + ?Sized>(
        name: &str,
        vocab_size: usize,
        dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if vocab_size < NUM_SPECIALS || dim == 0 {
            return Err(Error::InvalidArgument(format!("vocabulary {vocab_size}, width {dim}")));
        }
        let embedding = store.add(
            format!("{name}.embedding"),
            Tensor::random_normal(&[vocab_size, dim], 1.0, rng),
        )?;
        let conv = LayerSpec::Conv1d { in_ch: dim, out_ch: dim, kernel: 3, pad: 1 };
        let convs = Sequential::build(
            &format!("{name}.conv"),
            &[conv.clone(), LayerSpec::Relu, conv.clone(), LayerSpec::Relu, conv],
            store,
            rng,
        )?;
        Ok(Self { embedding, convs, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    pub fn convs(&self) -> &Sequential {
        &self.convs
    }

    /// Encodes an already-embedded `[MAX_TOKENS, D]` matrix, returning `[1, D, MAX_TOKENS]`.
    pub fn encode_embedded(&self, g: &mut Graph, store: &ParamStore, embedded: Var) -> Result<Var> {
        let shape = g.shape(embedded).to_vec();
        if shape != [MAX_TOKENS, self.dim] {
            return Err(Error::shape(
                "sentence encoder",
                format!("expected [{MAX_TOKENS}, {}], got {shape:?}", self.dim),
            ));
        }
        let channels_first = g.transpose(embedded)?;
        let x = g.reshape(channels_first, &[1, self.dim, MAX_TOKENS])?;
        self.convs.forward(g, store, x)
    }

    /// Token ids to the `[1, D, MAX_TOKENS]` sentence feature.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<Var> {
        if tokens.len() != MAX_TOKENS {
            return Err(Error::InvalidArgument(format!("expected {MAX_TOKENS} tokens, got {}", tokens.len())));
        }
        let table = g.param(store, self.embedding);
        let embedded = g.embedding(table, tokens)?;
        self.encode_embedded(g, store, embedded)
    }

    /// Max over the token axis: `[1, D, MAX_TOKENS]` to `[1, D]`.
    pub fn anchor(&self, g: &mut Graph, encoded: Var) -> Result<Var> {
        g.max_over_axis(encoded, 2)
    }

    /// Inference-mode encoding of a raw sentence.
    pub fn sentence_spec(&self, store: &ParamStore, sentence: &str, vocab: &Vocabulary) -> Result<SentenceSpec> {
        let tokens = tokenize(sentence, vocab);
        let mut g = Graph::new();
        let enc = self.encode(&mut g, store, &tokens)?;
        let flat = g.reshape(enc, &[self.dim, MAX_TOKENS])?;
        let t = g.transpose(flat)?;
        let features = g.value(t).clone();
        let anchor = anchor_vector(&features)?;
        if !anchor.is_finite() {
            return Err(Error::NonFinite("sentence anchor".into()));
        }
        Ok(SentenceSpec { tokens, features, anchor })
    }
}

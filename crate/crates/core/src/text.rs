//! Word-level vocabulary and the small trainable text encoder that turns a
//! prompt into per-token conditioning vectors.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Bound};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Prompt length after padding.
pub const MAX_LEN: usize = 8;
/// Width of one token embedding.
pub const TEXT_DIM: usize = 32;

pub const PAD: &str = "<pad>";
/// Physics-concept identifier token.
pub const PHYSICS_TOKEN: &str = "[V]";
/// Object-concept identifier token.
pub const OBJECT_TOKEN: &str = "[O]";
pub const PAD_ID: usize = 0;

const BASE_WORDS: [&str; 5] = ["a", "photo", "of", "object", "an"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials, the template words and the given object names.
    pub fn with_objects<S: AsRef<str>>(objects: &[S]) -> Self {
        let mut tokens: Vec<String> = [PAD, PHYSICS_TOKEN, OBJECT_TOKEN]
            .iter()
            .chain(BASE_WORDS.iter())
            .map(|s| s.to_string())
            .collect();
        for o in objects {
            let o = o.as_ref().to_lowercase();
            if !tokens.contains(&o) {
                tokens.push(o);
            }
        }
        Self::from_tokens(tokens).expect("builtin vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD) {
            return Err(Error::Config(format!("vocabulary must start with {PAD}")));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        for special in [PHYSICS_TOKEN, OBJECT_TOKEN] {
            if !ids.contains_key(special) {
                return Err(Error::Config(format!("vocabulary lacks {special}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Lowercases and splits on whitespace; the identifier tokens keep
    /// their bracketed spelling.
    pub fn tokenize(&self, prompt: &str) -> Result<PromptTokens> {
        let words: Vec<String> = prompt
            .split_whitespace()
            .map(|w| match w {
                PHYSICS_TOKEN | OBJECT_TOKEN => w.to_string(),
                _ => w.to_lowercase(),
            })
            .collect();
        if words.len() > MAX_LEN {
            return Err(Error::PromptTooLong {
                words: words.len(),
                limit: MAX_LEN,
            });
        }
        let mut ids = [PAD_ID; MAX_LEN];
        for (slot, w) in ids.iter_mut().zip(&words) {
            *slot = self.id(w).ok_or_else(|| Error::UnknownWord(w.clone()))?;
        }
        Ok(PromptTokens { ids })
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

/// Token ids right-padded with [`PAD_ID`] to [`MAX_LEN`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PromptTokens {
    ids: [usize; MAX_LEN],
}

impl PromptTokens {
    pub fn new(ids: [usize; MAX_LEN], vocab: &Vocabulary) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab.len()) {
            return Err(Error::InvalidToken(bad));
        }
        Ok(PromptTokens { ids })
    }

    /// The unconditional prompt.
    pub fn empty() -> Self {
        PromptTokens {
            ids: [PAD_ID; MAX_LEN],
        }
    }

    pub fn ids(&self) -> &[usize; MAX_LEN] {
        &self.ids
    }

    pub fn is_empty(&self) -> bool {
        self.ids.iter().all(|&i| i == PAD_ID)
    }

    pub fn pad_mask(&self) -> [bool; MAX_LEN] {
        self.ids.map(|i| i == PAD_ID)
    }

    /// Position of the first occurrence of `id`.
    pub fn position(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&i| i == id)
    }
}

/// `MAX_LEN × dim` conditioning vectors for one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding<T> {
    values: Tensor<T>,
}

impl<T: Scalar> TextEmbedding<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.shape().len() != 2 || values.shape()[0] != MAX_LEN {
            return Err(Error::shape(
                "text_embedding",
                format!("expected [{MAX_LEN}, d], got {:?}", values.shape()),
            ));
        }
        Ok(TextEmbedding { values })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Euclidean distance over the flattened token × feature values.
pub fn embedding_distance<T: Scalar>(a: &TextEmbedding<T>, b: &TextEmbedding<T>) -> Result<f64> {
    if a.values.shape() != b.values.shape() {
        return Err(Error::shape(
            "embedding_distance",
            format!("{:?} vs {:?}", a.values.shape(), b.values.shape()),
        ));
    }
    let ss: f64 = a
        .values
        .data()
        .iter()
        .zip(b.values.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(ss.sqrt())
}

/// Recorded version of [`embedding_distance`].
pub fn embedding_distance_var<T: Scalar>(g: &Graph<T>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(
            "embedding_distance",
            format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
        ));
    }
    let d = g.sub(a, b)?;
    let sq = g.square(d)?;
    let ss = g.sum(sq)?;
    g.sqrt(ss)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub mlp_hidden: usize,
}

impl TextEncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        TextEncoderConfig {
            vocab_size,
            dim: TEXT_DIM,
            mlp_hidden: 2 * TEXT_DIM,
        }
    }
}

/// Token embedding + positional embedding, one single-head self-attention
/// block with residual, then a residual two-layer tanh MLP.
#[derive(Clone, Copy, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
}

impl TextEncoder {
    pub fn new(config: TextEncoderConfig) -> Self {
        TextEncoder { config }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<T> {
        let TextEncoderConfig {
            vocab_size,
            dim,
            mlp_hidden,
        } = self.config;
        let mut p = ParamStore::new();
        p.insert("tok_emb", nn::normal(rng, &[vocab_size, dim], 1.0));
        p.insert("pos_emb", nn::normal(rng, &[MAX_LEN, dim], 0.1));
        for proj in ["q", "k", "v", "o"] {
            p.insert(format!("attn.{proj}.w"), nn::dense(rng, dim, dim));
        }
        p.insert("mlp.fc1.w", nn::dense(rng, dim, mlp_hidden));
        p.insert("mlp.fc1.b", Tensor::zeros(&[mlp_hidden]));
        p.insert("mlp.fc2.w", nn::dense(rng, mlp_hidden, dim));
        p.insert("mlp.fc2.b", Tensor::zeros(&[dim]));
        p
    }

    /// Encodes one prompt on `g`; the result is `[MAX_LEN, dim]`.
    pub fn encode_var<T: Scalar>(
        &self,
        g: &Graph<T>,
        tokens: &PromptTokens,
        params: &Bound,
    ) -> Result<Var> {
        if let Some(&bad) = tokens.ids().iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::InvalidToken(bad));
        }
        let tok = g.embedding(params.get("tok_emb")?, tokens.ids())?;
        let x = g.add(tok, params.get("pos_emb")?)?;

        let q = g.matmul(x, params.get("attn.q.w")?)?;
        let k = g.matmul(x, params.get("attn.k.w")?)?;
        let v = g.matmul(x, params.get("attn.v.w")?)?;
        let mask = g.constant(&nn::key_mask(MAX_LEN, &tokens.pad_mask()));
        let (att, _) = nn::attention(g, q, k, v, Some(mask))?;
        let att = g.matmul(att, params.get("attn.o.w")?)?;
        let x = g.add(x, att)?;

        let h = g.affine(x, params.get("mlp.fc1.w")?, params.get("mlp.fc1.b")?)?;
        let h = g.tanh(h)?;
        let h = g.affine(h, params.get("mlp.fc2.w")?, params.get("mlp.fc2.b")?)?;
        g.add(x, h)
    }

    /// Encodes one prompt outside any caller graph.
    pub fn encode<T: Scalar>(
        &self,
        tokens: &PromptTokens,
        params: &ParamStore<T>,
    ) -> Result<TextEmbedding<T>> {
        let g = Graph::new();
        let bound = Bound::bind(&g, params, false);
        let out = self.encode_var(&g, tokens, &bound)?;
        TextEmbedding::new(g.tensor(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::with_objects(&["wood", "circle", "square"])
    }

    #[test]
    fn tokenize_pads_right() {
        let v = vocab();
        let t = v.tokenize("a photo of [V] wood").unwrap();
        let id = |w| v.id(w).unwrap();
        assert_eq!(
            t.ids(),
            &[
                id("a"),
                id("photo"),
                id("of"),
                id("[V]"),
                id("wood"),
                0,
                0,
                0
            ]
        );
        assert_eq!(v.tokenize("").unwrap(), PromptTokens::empty());
        let anchor = v.tokenize("a photo of [V] object").unwrap();
        assert_eq!(anchor.ids()[4], id("object"));
        assert_eq!(v.tokenize("A Photo OF [V] Object").unwrap(), anchor);
    }

    #[test]
    fn tokenize_errors() {
        let v = vocab();
        assert!(matches!(
            v.tokenize("a photo of melting"),
            Err(Error::UnknownWord(w)) if w == "melting"
        ));
        assert!(matches!(
            v.tokenize("a a a a a a a a a"),
            Err(Error::PromptTooLong { words: 9, .. })
        ));
    }

    #[test]
    fn vocabulary_invariants() {
        let v = vocab();
        assert_eq!(v.id(PAD), Some(0));
        assert_eq!(v.token(0), Some(PAD));
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocabulary>(r#"["a","<pad>"]"#).is_err());
        assert!(Vocabulary::from_tokens(vec![PAD.into(), "[V]".into(), "[V]".into()]).is_err());
    }

    fn encoder(v: &Vocabulary) -> (TextEncoder, ParamStore<f64>) {
        let enc = TextEncoder::new(TextEncoderConfig::new(v.len()));
        let params = enc.init(&mut ChaCha8Rng::seed_from_u64(7));
        (enc, params)
    }

    #[test]
    fn encoding_is_deterministic_and_injective() {
        let v = vocab();
        let (enc, p) = encoder(&v);
        let a = enc
            .encode(&v.tokenize("a photo of [V] wood").unwrap(), &p)
            .unwrap();
        let b = enc
            .encode(&v.tokenize("a photo of [V] wood").unwrap(), &p)
            .unwrap();
        let c = enc
            .encode(&v.tokenize("a photo of [V] circle").unwrap(), &p)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values().shape(), &[MAX_LEN, TEXT_DIM]);
        assert!(embedding_distance(&a, &c).unwrap() > 0.0);
    }

    #[test]
    fn zero_token_table_ignores_ids() {
        let v = vocab();
        let (enc, mut p) = encoder(&v);
        p.insert("tok_emb", Tensor::zeros(&[v.len(), TEXT_DIM]));
        let a = enc
            .encode(&v.tokenize("a photo of wood").unwrap(), &p)
            .unwrap();
        let b = enc
            .encode(&v.tokenize("of circle a square").unwrap(), &p)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encoding_is_differentiable() {
        let v = vocab();
        let (enc, p) = encoder(&v);
        let g = Graph::new();
        let bound = Bound::bind(&g, &p, true);
        let e = enc
            .encode_var(&g, &v.tokenize("a photo of [V] object").unwrap(), &bound)
            .unwrap();
        assert!(g.requires_grad(e));
        let s = g.sum(e).unwrap();
        let grads = bound.grad_map(&g, s).unwrap();
        let tok = grads["tok_emb"].data();
        assert!(tok.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn distance_closed_form() {
        let zeros = TextEmbedding::new(Tensor::<f64>::zeros(&[8, 32])).unwrap();
        let ones = TextEmbedding::new(Tensor::full(&[8, 32], 1.0)).unwrap();
        assert_eq!(embedding_distance(&zeros, &zeros).unwrap(), 0.0);
        assert_eq!(embedding_distance(&zeros, &ones).unwrap(), 16.0);
        assert_eq!(embedding_distance(&ones, &zeros).unwrap(), 16.0);
        let other = TextEmbedding::new(Tensor::<f64>::zeros(&[8, 16])).unwrap();
        assert!(embedding_distance(&zeros, &other).is_err());
    }

    proptest::proptest! {
        #[test]
        fn distance_triangle_inequality(
            a in proptest::collection::vec(-1.0f64..1.0, 16),
            b in proptest::collection::vec(-1.0f64..1.0, 16),
            c in proptest::collection::vec(-1.0f64..1.0, 16),
        ) {
            let e = |v: Vec<f64>| TextEmbedding::new(Tensor::new(vec![8, 2], v).unwrap()).unwrap();
            let (a, b, c) = (e(a), e(b), e(c));
            let ab = embedding_distance(&a, &b).unwrap();
            let bc = embedding_distance(&b, &c).unwrap();
            let ac = embedding_distance(&a, &c).unwrap();
            proptest::prop_assert!(ac <= ab + bc + 1e-5);
            proptest::prop_assert_eq!(ab, embedding_distance(&b, &a).unwrap());
        }
    }
}

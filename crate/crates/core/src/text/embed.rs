//! Deterministic bag-of-words text encoder (signed feature hashing).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub source_text: String,
}

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// Arithmetic mean of unit embeddings, renormalized.
    pub fn average(items: &[TextEmbedding]) -> Result<TextEmbedding> {
        let first = items
            .first()
            .ok_or_else(|| Error::Invalid("cannot average zero embeddings".into()))?;
        let mut acc = vec![0.0; first.dim()];
        for e in items {
            if e.dim() != acc.len() {
                return Err(Error::Shape("embedding dimensions differ".into()));
            }
            for (a, v) in acc.iter_mut().zip(&e.vector) {
                *a += v;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Numeric("embeddings cancel out".into()));
        }
        Ok(TextEmbedding {
            vector: acc.into_iter().map(|v| v / norm).collect(),
            source_text: format!("<mean of {} texts>", items.len()),
        })
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// 64-bit FNV-1a; stable across platforms and processes.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashingEncoder {
    pub dim: usize,
}

impl Default for HashingEncoder {
    fn default() -> Self {
        HashingEncoder { dim: DEFAULT_EMBED_DIM }
    }
}

impl HashingEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("embedding dimension must be positive".into()));
        }
        Ok(HashingEncoder { dim })
    }

    pub fn embed(&self, text: &str) -> Result<TextEmbedding> {
        let mut v = vec![0.0f64; self.dim];
        let mut any = false;
        for tok in tokenize(text) {
            let h = fnv1a(tok.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 40) & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
            any = true;
        }
        if !any {
            return Err(Error::Invalid(format!("no tokens in text {text:?}")));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // every token cancelled against a colliding opposite-sign token
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(TextEmbedding {
            vector: v,
            source_text: text.to_owned(),
        })
    }
}

/// Embeds with the default 128-dimensional hashing encoder.
pub fn embed_text(text: &str) -> Result<TextEmbedding> {
    HashingEncoder::default().embed(text)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::{IndexedRandom, SliceRandom};
    use rand::SeedableRng;

    #[test]
    fn deterministic() {
        assert_eq!(embed_text("hypodense lesion").unwrap(), embed_text("hypodense lesion").unwrap());
    }

    #[test]
    fn shared_tokens_rank_higher() {
        let base = embed_text("hypodense lesion").unwrap();
        let near = embed_text("hypodense lesion present").unwrap();
        let far = embed_text("hyperenhancing mass").unwrap();
        assert!(cosine(&base.vector, &near.vector) > cosine(&base.vector, &far.vector));
    }

    #[test]
    fn empty_text_is_error() {
        assert!(embed_text("").is_err());
        assert!(embed_text(" ,;- ").is_err());
    }

    #[test]
    fn fifty_random_strings_are_unit_norm() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let words = ["liver", "mass", "cyst", "ill-defined", "x", "9", "ÄÖ", "hypodense", "the", "a"];
        for _ in 0..50 {
            let n = rand::Rng::random_range(&mut rng, 1..12);
            let s: Vec<&str> = (0..n).map(|_| *words.choose(&mut rng).unwrap()).collect();
            let e = embed_text(&s.join(" ")).unwrap();
            let norm = e.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            assert!(e.vector.iter().all(|v| v.is_finite()));
        }
    }

    proptest! {
        #[test]
        fn token_order_does_not_matter(words in proptest::collection::vec("[a-z]{1,8}", 1..10), seed in any::<u64>()) {
            let mut shuffled = words.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = embed_text(&words.join(" ")).unwrap();
            let b = embed_text(&shuffled.join(" ")).unwrap();
            prop_assert_eq!(a.vector, b.vector);
        }
    }
}

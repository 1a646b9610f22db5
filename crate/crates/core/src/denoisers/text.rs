//! Deterministic hash-based text embeddings.
//!
//! A prompt is split on commas; each clause becomes one token whose vector
//! is a unit-norm Gaussian draw seeded by a hash of the normalized clause.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub source_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextEmbedder {
    width: usize,
}

impl Default for TextEmbedder {
    fn default() -> Self {
        Self { width: 16 }
    }
}

impl TextEmbedder {
    pub fn new(width: usize) -> Self {
        assert!(width > 0, "embedding width must be positive");
        Self { width }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Lowercases and collapses whitespace.
    pub fn normalize(clause: &str) -> String {
        clause
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase()
    }

    pub fn embed_clause(&self, clause: &str) -> TextEmbedding {
        let text = Self::normalize(clause);
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(text.as_bytes()));
        let mut v: Vec<f64> = (0..self.width)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        TextEmbedding {
            vector: v,
            source_text: text,
        }
    }

    /// One token per non-empty comma-separated clause, in order.
    pub fn embed_prompt(&self, prompt: &str) -> Vec<TextEmbedding> {
        prompt
            .split(',')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(|c| self.embed_clause(c))
            .collect()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_is_deterministic_and_normalized() {
        let e = TextEmbedder::default();
        let a = e.embed_clause("Red ");
        let b = e.embed_clause("red");
        assert_eq!(a, b);
        assert_eq!(a.vector.len(), 16);
        let norm: f64 = a.vector.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_ne!(a.vector, e.embed_clause("blue").vector);
    }

    #[test]
    fn prompt_splits_on_commas() {
        let toks = TextEmbedder::default().embed_prompt("red, blue ,, on a beach");
        let texts: Vec<_> = toks.iter().map(|t| t.source_text.as_str()).collect();
        assert_eq!(texts, ["red", "blue", "on a beach"]);
    }
}

//! Text-encoder interface and a hash-seeded stand-in encoder.

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Token used when an utterance transcript is empty.
pub const PAD_TOKEN: &str = "<pad>";

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoding {
    pub vector: Array1<f32>,
    /// Set when the transcript was empty and the padding token was encoded instead.
    pub padded: bool,
}

/// Produces one fixed-size vector per utterance transcript.
pub trait TextEncoder {
    fn dim(&self) -> usize;

    /// Per-token final-layer representations, `n_tokens x dim`.
    fn token_states(&self, tokens: &[&str]) -> Result<Vec<Array1<f32>>>;

    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        text.split_whitespace().collect()
    }
}

/// Mean over token representations; an empty transcript encodes the padding token.
pub fn encode_text(encoder: &dyn TextEncoder, text: &str) -> Result<TextEncoding> {
    let mut tokens = encoder.tokenize(text);
    let padded = tokens.is_empty();
    if padded {
        tokens.push(PAD_TOKEN);
    }
    let states = encoder.token_states(&tokens)?;
    if states.is_empty() {
        return Err(Error::Numerical("text encoder returned no token states".into()));
    }
    let dim = encoder.dim();
    let mut acc = vec![0.0f64; dim];
    for s in &states {
        if s.len() != dim {
            return Err(Error::Alignment(format!(
                "token state has dim {}, encoder declares {dim}",
                s.len()
            )));
        }
        for (a, v) in acc.iter_mut().zip(s.iter()) {
            *a += f64::from(*v);
        }
    }
    let n = states.len() as f64;
    Ok(TextEncoding {
        vector: acc.into_iter().map(|a| (a / n) as f32).collect(),
        padded,
    })
}

/// FNV-1a, used so token seeds are stable across platforms and toolchains.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic test double: each lower-cased token maps to a Gaussian vector
/// seeded by `hash(seed, token)`.
#[derive(Clone, Debug)]
pub struct HashTextEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl HashTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashTextEncoder { dim, seed }
    }

    fn token_vector(&self, token: &str) -> Array1<f32> {
        let lower = token.to_lowercase();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a64(lower.as_bytes()));
        (0..self.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            })
            .collect()
    }
}

impl TextEncoder for HashTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn token_states(&self, tokens: &[&str]) -> Result<Vec<Array1<f32>>> {
        Ok(tokens.iter().map(|t| self.token_vector(t)).collect())
    }
}

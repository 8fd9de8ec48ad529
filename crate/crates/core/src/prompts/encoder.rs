use super::{PromptError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Maps a sentence to a fixed-size embedding. Implementations are frozen:
/// the same sentence always yields the same vector.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, sentence: &str) -> Result<Vec<f32>>;
}

/// Deterministic stand-in for a real text encoder.
///
/// Each token (lower-cased alphanumeric word, plus each adjacent word pair)
/// gets a Gaussian vector seeded by a hash of the token and `seed`; the
/// sentence vector is the normalized sum. Sentences sharing words are
/// therefore partially similar, and word order matters through the pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoTextEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl PseudoTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(PromptError::Config("encoder dim must be positive".into()));
        }
        Ok(Self { dim, seed })
    }

    fn token_vector(&self, token: &str, acc: &mut [f64]) {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        for a in acc.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *a += g;
        }
    }
}

pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl TextEncoder for PseudoTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, sentence: &str) -> Result<Vec<f32>> {
        let words = tokenize(sentence);
        if words.is_empty() {
            return Err(PromptError::Encoder {
                sentence: sentence.to_string(),
                detail: "no tokens".into(),
            });
        }
        let mut acc = vec![0.0f64; self.dim];
        for w in &words {
            self.token_vector(w, &mut acc);
        }
        for pair in words.windows(2) {
            self.token_vector(&format!("{} {}", pair[0], pair[1]), &mut acc);
        }
        normalize(&acc).ok_or_else(|| PromptError::Encoder {
            sentence: sentence.to_string(),
            detail: "zero vector".into(),
        })
    }
}

fn normalize(v: &[f64]) -> Option<Vec<f32>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| (x / n) as f32).collect())
}

/// Normalize each sentence embedding, average, renormalize.
pub fn pool_class_embedding(sentences: &[String], encoder: &dyn TextEncoder) -> Result<Vec<f32>> {
    if sentences.is_empty() {
        return Err(PromptError::Config("no sentences to pool".into()));
    }
    let mut acc = vec![0.0f64; encoder.dim()];
    for s in sentences {
        let v = encoder.encode(s)?;
        if v.len() != acc.len() {
            return Err(PromptError::Encoder {
                sentence: s.clone(),
                detail: format!("dim {} != {}", v.len(), acc.len()),
            });
        }
        let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(PromptError::Encoder {
                sentence: s.clone(),
                detail: "zero or non-finite embedding".into(),
            });
        }
        for (a, &x) in acc.iter_mut().zip(&v) {
            *a += x as f64 / n;
        }
    }
    normalize(&acc).ok_or_else(|| PromptError::Encoder {
        sentence: sentences[0].clone(),
        detail: "sentence embeddings cancel out".into(),
    })
}

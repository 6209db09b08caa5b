use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::MiningError;
use crate::provider::ProviderClient;

pub const EMBED_DIM: usize = 256;

/// Maps texts to unit vectors of length [`EMBED_DIM`].
pub trait Embedder: Send + Sync {
    fn name(&self) -> String;

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, MiningError>;
}

/// Truncate or zero-pad to [`EMBED_DIM`] and scale to unit L2 norm. A zero
/// vector becomes the first basis vector.
pub fn unit_normalize(mut v: Vec<f64>) -> Vec<f64> {
    v.resize(EMBED_DIM, 0.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        log::warn!("zero or non-finite embedding replaced by a basis vector");
        let mut e = vec![0.0; EMBED_DIM];
        e[0] = 1.0;
        return e;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Offline embedder: signed feature hashing of lowercase word tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashingEmbedder;

impl HashingEmbedder {
    pub fn embed_one(text: &str) -> Vec<f64> {
        let mut v = vec![0.0; EMBED_DIM];
        for token in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let digest = Sha256::digest(token.to_lowercase().as_bytes());
            let bucket = u16::from_le_bytes([digest[0], digest[1]]) as usize % EMBED_DIM;
            let sign = if digest[2] & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        unit_normalize(v)
    }
}

impl Embedder for HashingEmbedder {
    fn name(&self) -> String {
        "hashing-256".into()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, MiningError> {
        Ok(texts.iter().map(|t| HashingEmbedder::embed_one(t)).collect())
    }
}

/// Remote embeddings through the provider client, in parallel batches.
/// Concurrency is bounded by the client's in-flight cap.
#[derive(Clone)]
pub struct ProviderEmbedder {
    client: ProviderClient,
    batch_size: usize,
}

impl ProviderEmbedder {
    pub fn new(client: ProviderClient, batch_size: usize) -> Self {
        ProviderEmbedder {
            client,
            batch_size: batch_size.max(1),
        }
    }
}

impl Embedder for ProviderEmbedder {
    fn name(&self) -> String {
        format!("provider:{}", self.client.config().embedding_model.as_deref().unwrap_or("default"))
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, MiningError> {
        let batches: Vec<Vec<Vec<f64>>> = texts
            .par_chunks(self.batch_size)
            .map(|chunk| {
                let out = self.client.embed(chunk)?;
                if out.len() != chunk.len() {
                    return Err(MiningError::InvalidInput(format!(
                        "embedder returned {} vectors for {} texts",
                        out.len(),
                        chunk.len()
                    )));
                }
                Ok(out.into_iter().map(unit_normalize).collect())
            })
            .collect::<Result<_, MiningError>>()?;
        Ok(batches.into_iter().flatten().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn unit_norm_and_determinism() {
        let a = HashingEmbedder::embed_one("final ranking synthesis");
        let b = HashingEmbedder::embed_one("final ranking synthesis");
        assert_eq!(a, b);
        assert!((cos(&a, &a) - 1.0).abs() < 1e-9);
        let z = HashingEmbedder::embed_one("!!!");
        assert_eq!(z[0], 1.0);
        assert_eq!(unit_normalize(vec![3.0; 300]).len(), EMBED_DIM);
    }
}

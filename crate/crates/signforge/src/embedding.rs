//! Text and image embedding backends for the similarity loss.
//!
//! The built-in backend hashes tokens into seeded Gaussian vectors and
//! projects a downsampled image through a fixed random matrix. It is not
//! a learned encoder; it gives the similarity loss a deterministic,
//! differentiable target so prompt wording measurably steers the image.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry;
use crate::image::{Grid, ImageTensor};

/// Joint text and image embedder. Image embedding must be differentiable
/// through `embed_image_backward`.
pub trait SimilarityBackend: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_text(&self, text: &str) -> Result<Array1<f64>>;

    fn embed_image(&self, img: &ImageTensor) -> Result<Array1<f64>>;

    /// Gradient of `grad_embedding . embed_image(img)` with respect to
    /// the image pixels.
    fn embed_image_backward(&self, img: &ImageTensor, grad_embedding: &Array1<f64>)
        -> Result<Grid>;
}

const THUMB: usize = 16;

/// Deterministic embedder: token-hash Gaussian vectors for text, a fixed
/// random projection of a bilinear thumbnail for images.
pub struct HashedProjectionEmbedder {
    dim: usize,
    seed: u64,
    /// `dim x (THUMB * THUMB * 3)` projection.
    projection: Array2<f64>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl HashedProjectionEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let cols = THUMB * THUMB * 3;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let scale = 1.0 / (cols as f64).sqrt();
        let projection = Array2::from_shape_fn((dim, cols), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Self { dim, seed, projection }
    }

    fn tokenize(text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|t| {
                t.chars()
                    .filter(|c| c.is_alphanumeric())
                    .collect::<String>()
                    .to_lowercase()
            })
            .filter(|t| !t.is_empty())
            .collect()
    }

    fn token_vector(&self, token: &str) -> Array1<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed ^ fnv1a(token.as_bytes()));
        Array1::from_shape_fn(self.dim, |_| StandardNormal.sample(&mut rng))
    }

    fn thumbnail(&self, img: &ImageTensor) -> Grid {
        geometry::resize_bilinear(img.data(), THUMB, THUMB)
    }
}

impl Default for HashedProjectionEmbedder {
    fn default() -> Self {
        Self::new(16, 0x5f3759df)
    }
}

impl SimilarityBackend for HashedProjectionEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Array1<f64>> {
        let tokens = Self::tokenize(text);
        if tokens.is_empty() {
            return Err(Error::InvalidPrompt(format!(
                "no embeddable tokens in {text:?}"
            )));
        }
        let mut sum = Array1::<f64>::zeros(self.dim);
        for token in &tokens {
            sum = sum + self.token_vector(token);
        }
        let norm = sum.dot(&sum).sqrt();
        if norm < 1e-12 {
            return Err(Error::ZeroNormEmbedding);
        }
        Ok(sum / norm)
    }

    fn embed_image(&self, img: &ImageTensor) -> Result<Array1<f64>> {
        let thumb = self.thumbnail(img);
        let flat = Array1::from_iter(thumb.iter().cloned());
        Ok(self.projection.dot(&flat))
    }

    fn embed_image_backward(
        &self,
        img: &ImageTensor,
        grad_embedding: &Array1<f64>,
    ) -> Result<Grid> {
        if grad_embedding.len() != self.dim {
            return Err(Error::BackendFailure(format!(
                "embedding gradient has dim {}, expected {}",
                grad_embedding.len(),
                self.dim
            )));
        }
        let grad_flat = self.projection.t().dot(grad_embedding);
        let grad_thumb =
            Grid::from_shape_vec((THUMB, THUMB, 3), grad_flat.to_vec()).expect("shape fixed");
        Ok(geometry::resize_bilinear_backward(
            &grad_thumb,
            img.height(),
            img.width(),
        ))
    }
}

//! Condition bundle `c = [d, a]`: a text embedding plus frame-aligned audio
//! features, with Bernoulli text masking for classifier-free training.
//!
//! An absent modality is the all-zero tensor of the correct shape; the
//! presence flags record which side is real.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};

/// Text and audio conditions for one sequence.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    /// Text embedding `d`, zero when absent.
    pub text: Array1<f64>,
    /// `T_M x A` audio features, zero when absent.
    pub audio: Array2<f64>,
    pub has_text: bool,
    pub has_audio: bool,
}

impl ConditionBundle {
    pub fn new(
        text: Option<Array1<f64>>,
        audio: Option<Array2<f64>>,
        text_dim: usize,
        frames: usize,
        audio_dim: usize,
    ) -> Result<Self> {
        let (text, has_text) = match text {
            Some(t) => {
                if t.len() != text_dim {
                    return Err(Error::shape(format!(
                        "text embedding has {} entries, expected {text_dim}",
                        t.len()
                    )));
                }
                // An explicit zero vector still counts as absent.
                let nonzero = t.iter().any(|&v| v != 0.0);
                (t, nonzero)
            }
            None => (Array1::zeros(text_dim), false),
        };
        let (audio, has_audio) = match audio {
            Some(a) => {
                if a.nrows() != frames || a.ncols() != audio_dim {
                    return Err(Error::shape(format!(
                        "audio features are {}x{}, expected {frames}x{audio_dim}",
                        a.nrows(),
                        a.ncols()
                    )));
                }
                (a, true)
            }
            None => (Array2::zeros((frames, audio_dim)), false),
        };
        let bundle = ConditionBundle {
            text,
            audio,
            has_text,
            has_audio,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// All-absent bundle of the given shape.
    pub fn empty(text_dim: usize, frames: usize, audio_dim: usize) -> Self {
        ConditionBundle {
            text: Array1::zeros(text_dim),
            audio: Array2::zeros((frames, audio_dim)),
            has_text: false,
            has_audio: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.text.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("text embedding has non-finite entries"));
        }
        if !self.audio.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("audio features have non-finite entries"));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.audio.nrows()
    }

    /// The `[∅, a]` counterpart used for classifier-free guidance.
    pub fn with_text_masked(&self) -> ConditionBundle {
        ConditionBundle {
            text: Array1::zeros(self.text.len()),
            audio: self.audio.clone(),
            has_text: false,
            has_audio: self.has_audio,
        }
    }
}

/// Pluggable sentence encoder. The shipped default is a deterministic
/// hash-basis stub so the pipeline runs without pretrained weights.
pub trait TextEncoder: Sync {
    fn dim(&self) -> usize;
    /// Embeds whitespace tokens; implementations must be deterministic.
    fn embed_tokens(&self, tokens: &[&str]) -> Array1<f64>;
}

/// Deterministic stand-in encoder: each token hashes to a fixed
/// pseudo-random basis vector; the token sum is L2-normalized.
#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    dim: usize,
    seed: u64,
}

impl HashTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashTextEncoder { dim, seed }
    }

    fn basis_vector(&self, token: &str) -> Array1<f64> {
        use rand::SeedableRng;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in token.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(h ^ self.seed);
        Array1::from_shape_fn(self.dim, |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        })
    }
}

impl TextEncoder for HashTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_tokens(&self, tokens: &[&str]) -> Array1<f64> {
        if tokens.is_empty() {
            return Array1::zeros(self.dim);
        }
        let mut sum = Array1::<f64>::zeros(self.dim);
        for tok in tokens {
            sum += &self.basis_vector(&tok.to_lowercase());
        }
        let norm = sum.dot(&sum).sqrt();
        if norm < 1e-12 {
            // Degenerate cancellation; fall back to the joined string.
            let joined = tokens.join(" ");
            sum = self.basis_vector(&joined);
            let n = sum.dot(&sum).sqrt();
            return sum / n;
        }
        sum / norm
    }
}

/// Number of tokens dropped if `text` were embedded with this limit.
pub fn text_token_overflow(text: &str, max_tokens: usize) -> usize {
    text.split_whitespace().count().saturating_sub(max_tokens)
}

/// Embeds `text`, truncating to the first `max_tokens` whitespace tokens.
/// Empty text maps to the zero vector (the absent condition).
pub fn embed_text(text: &str, encoder: &dyn TextEncoder, max_tokens: usize) -> Array1<f64> {
    let tokens: Vec<&str> = text.split_whitespace().take(max_tokens).collect();
    if tokens.is_empty() {
        return Array1::zeros(encoder.dim());
    }
    encoder.embed_tokens(&tokens)
}

/// Classifier-free training mask: with probability `p` the text embedding
/// is replaced by the zero vector. Audio is never masked.
pub fn mask_conditions<R: Rng>(bundle: &ConditionBundle, rng: &mut R, p: f64) -> ConditionBundle {
    debug_assert!((0.0..=1.0).contains(&p));
    if rng.random::<f64>() < p {
        bundle.with_text_masked()
    } else {
        bundle.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_text_embeds_to_zero() {
        let enc = HashTextEncoder::new(512, 1);
        let v = embed_text("", &enc, 20);
        assert_eq!(v.len(), 512);
        assert!(v.iter().all(|&x| x == 0.0));
        assert!(embed_text("   ", &enc, 20).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn embedding_is_deterministic() {
        let enc = HashTextEncoder::new(512, 1);
        let a = embed_text("a person waves happily", &enc, 20);
        let b = embed_text("a person waves happily", &enc, 20);
        assert_eq!(a, b);
    }

    #[test]
    fn nonempty_embeddings_have_unit_norm() {
        let enc = HashTextEncoder::new(512, 1);
        for text in ["wave", "walk forward", "a person bows deeply", "x y z w"] {
            let v = embed_text(text, &enc, 20);
            assert_relative_eq!(v.dot(&v).sqrt(), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn truncation_limits_tokens() {
        let enc = HashTextEncoder::new(64, 1);
        let long = "t ".repeat(30);
        let short = "t ".repeat(20);
        assert_eq!(embed_text(&long, &enc, 20), embed_text(&short, &enc, 20));
        assert_eq!(text_token_overflow(&long, 20), 10);
        assert_eq!(text_token_overflow(&short, 20), 0);
    }

    #[test]
    fn masking_edge_probabilities() {
        let enc = HashTextEncoder::new(32, 1);
        let bundle = ConditionBundle::new(
            Some(embed_text("wave", &enc, 20)),
            None,
            32,
            4,
            8,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kept = mask_conditions(&bundle, &mut rng, 0.0);
        assert_eq!(kept.text, bundle.text);
        assert!(kept.has_text);
        let masked = mask_conditions(&bundle, &mut rng, 1.0);
        assert!(masked.text.iter().all(|&v| v == 0.0));
        assert!(!masked.has_text);
        // Audio bytes identical in both cases.
        assert_eq!(kept.audio, bundle.audio);
        assert_eq!(masked.audio, bundle.audio);
    }

    #[test]
    fn masking_rate_matches_probability() {
        let enc = HashTextEncoder::new(16, 1);
        let bundle =
            ConditionBundle::new(Some(embed_text("wave", &enc, 20)), None, 16, 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut masked = 0usize;
        for _ in 0..n {
            if !mask_conditions(&bundle, &mut rng, 0.1).has_text {
                masked += 1;
            }
        }
        let rate = masked as f64 / n as f64;
        assert!(
            (rate - 0.1).abs() < 0.005,
            "masked fraction {rate} outside 0.1 +/- 0.005"
        );
    }

    #[test]
    fn bundle_shape_checks() {
        assert!(ConditionBundle::new(Some(Array1::zeros(8)), None, 16, 4, 8).is_err());
        assert!(
            ConditionBundle::new(None, Some(Array2::zeros((3, 8))), 16, 4, 8).is_err()
        );
        let b = ConditionBundle::new(None, Some(Array2::zeros((4, 8))), 16, 4, 8).unwrap();
        assert!(!b.has_text && b.has_audio);
        assert!(b.text.iter().all(|&v| v == 0.0));
    }
}

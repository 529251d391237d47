use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const EMBED_TOKENS: usize = 8;
pub const EMBED_DIM: usize = 32;

const TOKEN_SCALE: f64 = 0.1;

const START: &str = "<|start|>";
const END: &str = "<|end|>";

/// Maps prompts to fixed `(EMBED_TOKENS, EMBED_DIM)` tensors: a start token,
/// one row per lowercase word (truncated), an end token, then end-token
/// padding.
///
/// Row `k` is a shared positional component plus `TOKEN_SCALE` times a
/// component drawn from a generator seeded by the token, so embeddings of
/// different prompts are strongly correlated, as those of real text
/// encoders are.
#[derive(Debug, Clone, Default)]
pub struct ToyTextEmbedder;

impl ToyTextEmbedder {
    pub fn words(prompt: &str) -> Vec<String> {
        prompt
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .take(EMBED_TOKENS - 2)
            .collect()
    }

    pub fn embed(&self, prompt: &str) -> Array2<f64> {
        let words = Self::words(prompt);
        let mut out = Array2::zeros((EMBED_TOKENS, EMBED_DIM));
        let rows = std::iter::once(START)
            .chain(words.iter().map(String::as_str))
            .chain(std::iter::repeat(END));
        for (k, (mut row, token)) in out.rows_mut().into_iter().zip(rows).enumerate() {
            let mut base = ChaCha8Rng::seed_from_u64(0x706f_7300 + k as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()));
            row.iter_mut().for_each(|v| {
                let p: f64 = StandardNormal.sample(&mut base);
                let t: f64 = StandardNormal.sample(&mut rng);
                *v = p + TOKEN_SCALE * t;
            });
        }
        out
    }

    /// Embedding row indices of `subject` words inside `prompt`.
    pub fn token_indices(&self, prompt: &str, subject: &[String]) -> Result<Vec<usize>> {
        let words = Self::words(prompt);
        let mut out = Vec::new();
        for s in subject {
            let needle = s.to_lowercase();
            let pos = words
                .iter()
                .position(|w| *w == needle)
                .ok_or_else(|| Error::param("subject_tokens", format!("`{s}` is not a word of the prompt")))?;
            out.push(pos + 1);
        }
        Ok(out)
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
    fn deterministic_and_word_sensitive() {
        let e = ToyTextEmbedder;
        assert_eq!(e.embed("a knight"), e.embed("A  knight!"));
        assert_ne!(e.embed("a knight"), e.embed("a dragon"));
        let (a, b) = (e.embed("a knight"), e.embed("the knight"));
        assert_eq!(a.row(2), b.row(2));
        assert_ne!(a.row(1), b.row(1));
    }

    #[test]
    fn subject_indices() {
        let e = ToyTextEmbedder;
        assert_eq!(e.token_indices("a man in a park", &["man".into()]).unwrap(), vec![2]);
        assert!(e.token_indices("a man", &["dog".into()]).is_err());
    }
}

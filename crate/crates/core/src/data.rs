//! Byte-level tokenization, the binary token file format and batch sampling.
//!
//! Token files are little-endian:
//!
//! ```text
//! "SLAT" | version u32 | vocab_size u32 | count u64 | count x u16 tokens
//! ```

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const TOKEN_MAGIC: &[u8; 4] = b"SLAT";
pub const TOKEN_VERSION: u32 = 1;
pub const BYTE_VOCAB: usize = 256;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

/// Identity byte to token mapping.
pub fn tokenize_bytes(text: &[u8]) -> Vec<u16> {
    text.iter().map(|&b| u16::from(b)).collect()
}

pub fn detokenize(tokens: &[u16]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| Error::Index {
                what: "byte token",
                index: t as usize,
                limit: BYTE_VOCAB,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenFile {
    pub vocab_size: u32,
    pub tokens: Vec<u16>,
}

impl TokenFile {
    pub fn new(tokens: Vec<u16>, vocab_size: usize) -> Result<Self> {
        if vocab_size == 0 || vocab_size > 65536 {
            return Err(Error::Validation(format!("vocab size {vocab_size} outside 1..=65536")));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| usize::from(t) >= vocab_size) {
            return Err(Error::Validation(format!(
                "token {bad} is not below vocab size {vocab_size}"
            )));
        }
        Ok(TokenFile {
            vocab_size: vocab_size as u32,
            tokens,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 2 * self.tokens.len());
        out.extend_from_slice(TOKEN_MAGIC);
        out.extend_from_slice(&TOKEN_VERSION.to_le_bytes());
        out.extend_from_slice(&self.vocab_size.to_le_bytes());
        out.extend_from_slice(&(self.tokens.len() as u64).to_le_bytes());
        for t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Integrity(format!(
                "token file truncated: {} bytes, header needs {HEADER_LEN}",
                bytes.len()
            )));
        }
        if &bytes[..4] != TOKEN_MAGIC {
            return Err(Error::Integrity(format!("bad token file magic {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != TOKEN_VERSION {
            return Err(Error::Integrity(format!("unsupported token file version {version}")));
        }
        let vocab = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let payload = &bytes[HEADER_LEN..];
        if payload.len() as u64 != count.saturating_mul(2) {
            return Err(Error::Integrity(format!(
                "token file declares {count} tokens but carries {} payload bytes",
                payload.len()
            )));
        }
        let tokens = payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        TokenFile::new(tokens, vocab as usize)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn write_token_file(path: &Path, tokens: &[u16], vocab_size: usize) -> Result<()> {
    TokenFile::new(tokens.to_vec(), vocab_size)?.write(path)
}

pub fn read_token_file(path: &Path) -> Result<TokenFile> {
    TokenFile::read(path)
}

/// Offset-based split: the last `round(N * val_frac)` tokens are validation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
}

impl SplitSpec {
    pub fn from_val_frac(val_frac: f64) -> Result<Self> {
        let s = SplitSpec {
            train_frac: 1.0 - val_frac,
            val_frac,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_frac > 0.0 && self.val_frac > 0.0) {
            return Err(Error::Config(format!(
                "split fractions must be positive (train {}, val {})",
                self.train_frac, self.val_frac
            )));
        }
        if (self.train_frac + self.val_frac - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must sum to 1".into()));
        }
        Ok(())
    }

    /// Returns `(train, val)`; both must end up non-empty.
    pub fn split<'a, T>(&self, tokens: &'a [T]) -> Result<(&'a [T], &'a [T])> {
        self.validate()?;
        let n = tokens.len();
        let n_val = (n as f64 * self.val_frac).round() as usize;
        if n_val == 0 || n_val >= n {
            return Err(Error::Data(format!(
                "corpus of {n} tokens cannot be split with val fraction {}",
                self.val_frac
            )));
        }
        Ok(tokens.split_at(n - n_val))
    }
}

/// `batch` windows at uniform offsets in `[0, N - T - 1]`; targets are the
/// inputs shifted by one. Both are returned row-major as `[B, T]`.
pub fn sample_batch(
    tokens: &[u16],
    batch: usize,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = tokens.len();
    if n <= t + 1 {
        return Err(Error::Contract(format!(
            "corpus of {n} tokens is too short for windows of {t} (needs more than {})",
            t + 1
        )));
    }
    let mut x = Vec::with_capacity(batch * t);
    let mut y = Vec::with_capacity(batch * t);
    for _ in 0..batch {
        let off = rng.random_range(0..=n - t - 1);
        x.extend(tokens[off..off + t].iter().map(|&v| usize::from(v)));
        y.extend(tokens[off + 1..off + t + 1].iter().map(|&v| usize::from(v)));
    }
    Ok((x, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize_bytes(b"AB"), vec![65, 66]);
        assert!(tokenize_bytes(b"").is_empty());
        assert!(detokenize(&[300]).is_err());
    }

    proptest! {
        #[test]
        fn byte_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
            prop_assert_eq!(detokenize(&tokenize_bytes(&bytes)).unwrap(), bytes);
        }

        #[test]
        fn token_file_round_trip(tokens in proptest::collection::vec(0u16..1000, 0..512)) {
            let f = TokenFile::new(tokens, 1000).unwrap();
            prop_assert_eq!(TokenFile::from_bytes(&f.to_bytes()).unwrap(), f);
        }
    }

    #[test]
    fn token_file_small_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        write_token_file(&p, &[0, 1, 2], 256).unwrap();
        assert_eq!(read_token_file(&p).unwrap().tokens, vec![0, 1, 2]);
    }

    #[test]
    fn token_file_rejections() {
        let good = TokenFile::new(vec![1, 2, 3], 256).unwrap().to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(TokenFile::from_bytes(&bad), Err(Error::Integrity(_))));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(TokenFile::from_bytes(&bad), Err(Error::Integrity(_))));

        assert!(matches!(TokenFile::from_bytes(&good[..good.len() - 1]), Err(Error::Integrity(_))));
        assert!(matches!(TokenFile::from_bytes(&good[..10]), Err(Error::Integrity(_))));

        let mut long = good.clone();
        long.extend_from_slice(&[0, 0]);
        assert!(matches!(TokenFile::from_bytes(&long), Err(Error::Integrity(_))));

        // token 300 declared under vocab 256
        let mut bad = good.clone();
        bad[HEADER_LEN..HEADER_LEN + 2].copy_from_slice(&300u16.to_le_bytes());
        assert!(matches!(TokenFile::from_bytes(&bad), Err(Error::Validation(_))));
        assert!(matches!(TokenFile::new(vec![256], 256), Err(Error::Validation(_))));
    }

    #[test]
    fn split_examples() {
        let toks: Vec<u16> = (0..1000).map(|i| (i % 256) as u16).collect();
        let (tr, va) = SplitSpec::from_val_frac(0.1).unwrap().split(&toks).unwrap();
        assert_eq!((tr.len(), va.len()), (900, 100));
        assert_eq!(va[0], toks[900]);
        assert!(SplitSpec::from_val_frac(0.0).is_err());
        assert!(SplitSpec::from_val_frac(1.0).is_err());
        assert!(SplitSpec { train_frac: 0.5, val_frac: 0.4 }.validate().is_err());
    }

    #[test]
    fn batch_targets_are_shifted_inputs() {
        let toks: Vec<u16> = (0..100).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, y) = sample_batch(&toks, 4, 8, &mut rng).unwrap();
        assert_eq!(x.len(), 32);
        for b in 0..4 {
            let off = x[b * 8];
            for t in 0..8 {
                assert_eq!(x[b * 8 + t], off + t);
                assert_eq!(y[b * 8 + t], off + t + 1);
            }
        }
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(sample_batch(&toks, 3, 5, &mut a).unwrap(), sample_batch(&toks, 3, 5, &mut b).unwrap());
        assert!(matches!(sample_batch(&toks[..9], 1, 8, &mut a), Err(Error::Contract(_))));
    }
}

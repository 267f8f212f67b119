//! Binary checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! "SLCK" | version u32
//! config_len u32 | config TOML bytes | sha256(config) [32]
//! step u64 | best_val f64 | val_at_save f64          (NaN when absent)
//! n_params u32
//!   per param: name_len u32 | name | ndim u32 | dims u64 x ndim | f32 payload
//! adam_t u64
//!   per param: m f32 payload | v f32 payload
//! n_rngs u32
//!   per rng: seed [32] | stream u64 | word_pos u128
//! crc32 of everything above, u32
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Gpt, ModelConfig};
use crate::optim::AdamW;
use crate::tensor::{Scalar, Tensor};

pub const CKPT_MAGIC: &[u8; 4] = b"SLCK";
pub const CKPT_VERSION: u32 = 1;

/// Serialized ChaCha8 generator position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_toml: String,
    pub step: u64,
    pub best_val: Option<f64>,
    /// Validation loss measured on the saved weights, if any.
    pub val_at_save: Option<f64>,
    pub params: Vec<ParamRecord>,
    pub adam_t: u64,
    pub moments: Vec<(Vec<f32>, Vec<f32>)>,
    pub rngs: Vec<RngState>,
}

pub fn config_hash(config_toml: &str) -> [u8; 32] {
    Sha256::digest(config_toml.as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn to_f32<S: Scalar>(t: &Tensor<S>) -> Vec<f32> {
    t.data().iter().map(|x| x.to_f32()).collect()
}

fn from_f32<S: Scalar>(shape: &[usize], data: &[f32]) -> Result<Tensor<S>> {
    Tensor::new(shape, data.iter().map(|&x| S::from_f32(x)).collect())
}

impl Checkpoint {
    /// Snapshot of a model and its optimizer. Values are stored as f32.
    pub fn capture<S: Scalar>(
        config_toml: String,
        step: u64,
        model: &Gpt<S>,
        opt: &AdamW<S>,
        rngs: &[&ChaCha8Rng],
    ) -> Self {
        let params = model
            .layout()
            .into_iter()
            .zip(model.params())
            .map(|(spec, p)| ParamRecord {
                name: spec.name,
                shape: p.shape().to_vec(),
                data: to_f32(p),
            })
            .collect();
        Checkpoint {
            config_toml,
            step,
            best_val: None,
            val_at_save: None,
            params,
            adam_t: opt.t,
            moments: opt.m.iter().zip(&opt.v).map(|(m, v)| (to_f32(m), to_f32(v))).collect(),
            rngs: rngs.iter().map(|r| RngState::capture(r)).collect(),
        }
    }

    pub fn hash(&self) -> [u8; 32] {
        config_hash(&self.config_toml)
    }

    /// Rebuilds the model under `cfg`, checking names and shapes.
    pub fn model<S: Scalar>(&self, cfg: &ModelConfig) -> Result<Gpt<S>> {
        let layout = crate::model::param_layout(cfg);
        if layout.len() != self.params.len() {
            return Err(Error::Integrity(format!(
                "checkpoint has {} parameter tensors, config needs {}",
                self.params.len(),
                layout.len()
            )));
        }
        let mut params = Vec::with_capacity(layout.len());
        for (spec, rec) in layout.iter().zip(&self.params) {
            if spec.name != rec.name || spec.shape != rec.shape {
                return Err(Error::Integrity(format!(
                    "checkpoint parameter {} {:?} does not match {} {:?}",
                    rec.name, rec.shape, spec.name, spec.shape
                )));
            }
            params.push(from_f32(&rec.shape, &rec.data)?);
        }
        Gpt::from_params(cfg.clone(), params)
    }

    pub fn optimizer<S: Scalar>(&self) -> Result<AdamW<S>> {
        if self.moments.len() != self.params.len() {
            return Err(Error::Integrity("moment count does not match parameters".into()));
        }
        let mut m = Vec::with_capacity(self.params.len());
        let mut v = Vec::with_capacity(self.params.len());
        for (rec, (mm, vv)) in self.params.iter().zip(&self.moments) {
            m.push(from_f32(&rec.shape, mm)?);
            v.push(from_f32(&rec.shape, vv)?);
        }
        Ok(AdamW { m, v, t: self.adam_t })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(CKPT_MAGIC);
        w.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        w.extend_from_slice(&(self.config_toml.len() as u32).to_le_bytes());
        w.extend_from_slice(self.config_toml.as_bytes());
        w.extend_from_slice(&self.hash());
        w.extend_from_slice(&self.step.to_le_bytes());
        w.extend_from_slice(&self.best_val.unwrap_or(f64::NAN).to_le_bytes());
        w.extend_from_slice(&self.val_at_save.unwrap_or(f64::NAN).to_le_bytes());
        w.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let put_f32s = |w: &mut Vec<u8>, xs: &[f32]| {
            for x in xs {
                w.extend_from_slice(&x.to_le_bytes());
            }
        };
        for p in &self.params {
            w.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            w.extend_from_slice(p.name.as_bytes());
            w.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f32s(&mut w, &p.data);
        }
        w.extend_from_slice(&self.adam_t.to_le_bytes());
        for (m, v) in &self.moments {
            put_f32s(&mut w, m);
            put_f32s(&mut w, v);
        }
        w.extend_from_slice(&(self.rngs.len() as u32).to_le_bytes());
        for r in &self.rngs {
            w.extend_from_slice(&r.seed);
            w.extend_from_slice(&r.stream.to_le_bytes());
            w.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        let crc = crc32fast::hash(&w);
        w.extend_from_slice(&crc.to_le_bytes());
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Integrity(format!("checkpoint truncated at {} bytes", bytes.len())));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Integrity(format!(
                "checkpoint checksum mismatch (stored {stored:08x}, computed {actual:08x})"
            )));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::Integrity("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let config_toml = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Integrity("checkpoint config is not UTF-8".into()))?;
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        if hash != config_hash(&config_toml) {
            return Err(Error::Integrity("checkpoint config hash mismatch".into()));
        }
        let step = r.u64()?;
        let opt_f64 = |x: f64| if x.is_nan() { None } else { Some(x) };
        let best_val = opt_f64(r.f64()?);
        let val_at_save = opt_f64(r.f64()?);
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Integrity("parameter name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let data = r.f32s(numel.ok_or_else(|| Error::Integrity("shape overflows".into()))?)?;
            params.push(ParamRecord { name, shape, data });
        }
        let adam_t = r.u64()?;
        let mut moments = Vec::with_capacity(n);
        for p in &params {
            let m = r.f32s(p.data.len())?;
            let v = r.f32s(p.data.len())?;
            moments.push((m, v));
        }
        let n_rng = r.u32()? as usize;
        let mut rngs = Vec::with_capacity(n_rng.min(16));
        for _ in 0..n_rng {
            let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
            rngs.push(RngState { seed, stream, word_pos });
        }
        if r.pos != body.len() {
            return Err(Error::Integrity(format!(
                "{} unexpected bytes after checkpoint payload",
                body.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config_toml,
            step,
            best_val,
            val_at_save,
            params,
            adam_t,
            moments,
            rngs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write beside the target and rename so a crash never leaves a torn file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Integrity("length overflows".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn sample() -> (Checkpoint, ModelConfig) {
        let cfg = ModelConfig {
            n_layer: 2,
            n_head: 2,
            n_embd: 8,
            block_size: 8,
            vocab_size: 16,
            dropout: 0.0,
            n_skip_layer: 1,
            n_skip_head: 1,
            bias: true,
        };
        let model = Gpt::<f32>::new(cfg.clone(), 7).unwrap();
        let mut opt = AdamW::new(model.params());
        opt.t = 3;
        opt.m[0].data_mut()[0] = 0.25;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u64();
        let mut ck = Checkpoint::capture("[model]\n".into(), 12, &model, &opt, &[&rng]);
        ck.best_val = Some(1.5);
        (ck, cfg)
    }

    #[test]
    fn round_trip_is_exact() {
        let (ck, cfg) = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.val_at_save, None);
        let m: Gpt<f32> = back.model(&cfg).unwrap();
        assert_eq!(m, Gpt::new(cfg, 7).unwrap());
        assert_eq!(back.optimizer::<f32>().unwrap().m[0].data()[0], 0.25);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        a.next_u32();
        let mut b = RngState::capture(&a).restore();
        for _ in 0..10 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn every_single_bit_flip_is_detected() {
        let (ck, _) = sample();
        let bytes = ck.to_bytes();
        for i in 0..bytes.len() {
            for bit in 0..8 {
                let mut bad = bytes.clone();
                bad[i] ^= 1 << bit;
                assert!(Checkpoint::from_bytes(&bad).is_err(), "byte {i} bit {bit}");
            }
        }
    }

    #[test]
    fn truncation_and_shape_mismatch_rejected() {
        let (ck, cfg) = sample();
        let bytes = ck.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]), Err(Error::Integrity(_))));
        let other = ModelConfig { n_layer: 1, n_skip_layer: 0, ..cfg };
        assert!(matches!(ck.model::<f32>(&other), Err(Error::Integrity(_))));
    }
}

//! Versioned binary checkpoints.
//!
//! Little-endian layout: magic `MSCK`, u32 version, u8 dtype width (4 or
//! 8), u32-length-prefixed config text, the vocabulary (u32 word count,
//! length-prefixed words, u32 bucket count), then u32 parameter count and
//! per parameter, in name order: length-prefixed name, u8 trainable flag,
//! u32 rank, u32 dims, values.

use std::path::Path;

use crate::error::{malformed, Error, Position, Result};
use crate::io::config::{config_text, parse_config};
use crate::io::text::Vocabulary;
use crate::model::{Model, ModelConfig};
use crate::numerics::{ParamSet, Tensor};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"MSCK";
pub const VERSION: u32 = 1;
const WHAT: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &Model<T>, vocab: &Vocabulary) -> Self {
        Self {
            config: model.config().clone(),
            vocab: vocab.clone(),
            params: model.params().clone(),
        }
    }

    pub fn into_model(self) -> Result<Model<T>> {
        Model::from_params(self.config, self.params)
    }

    /// Loads the parameters into a model built for `config`, listing every
    /// parameter whose name or shape does not fit.
    pub fn into_model_for(self, config: &ModelConfig) -> Result<Model<T>> {
        Model::from_params(config.clone(), self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE.code());
        put_str(&mut out, &config_text(&self.config))?;
        put_u32(&mut out, self.vocab.words().len())?;
        for w in self.vocab.words() {
            put_str(&mut out, w)?;
        }
        put_u32(&mut out, self.vocab.oov_buckets())?;
        put_u32(&mut out, self.params.len())?;
        for (name, p) in self.params.iter() {
            put_str(&mut out, name)?;
            out.push(u8::from(p.trainable));
            put_u32(&mut out, p.value.ndim())?;
            for &d in p.value.shape() {
                put_u32(&mut out, d)?;
            }
            for &v in p.value.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint, converting stored values to `T` if the file was
    /// written at the other precision.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(malformed(WHAT, Position::Byte(0), "bad magic"));
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return Err(malformed(WHAT, Position::Byte(at as u64), format!("unsupported version {version}")));
        }
        let at = r.pos;
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code)
            .ok_or_else(|| malformed(WHAT, Position::Byte(at as u64), format!("unknown dtype width {code}")))?;
        let at = r.pos;
        let config = parse_config(&r.string()?)
            .map_err(|e| malformed(WHAT, Position::Byte(at as u64), format!("embedded config: {e}")))?;
        let words = r.u32()? as usize;
        let mut vocab_words = Vec::with_capacity(words.min(1 << 20));
        for _ in 0..words {
            vocab_words.push(r.string()?);
        }
        let at = r.pos;
        let buckets = r.u32()? as usize;
        let vocab = Vocabulary::new(vocab_words, buckets)
            .map_err(|e| malformed(WHAT, Position::Byte(at as u64), e.to_string()))?;
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let at = r.pos;
            let name = r.string()?;
            if last.as_ref().is_some_and(|l| *l >= name) {
                return Err(malformed(WHAT, Position::Byte(at as u64), format!("parameter {name} out of order")));
            }
            let flag_at = r.pos;
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                f => return Err(malformed(WHAT, Position::Byte(flag_at as u64), format!("bad trainable flag {f}"))),
            };
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(malformed(WHAT, Position::Byte((r.pos - 4) as u64), format!("rank {rank} too large")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| malformed(WHAT, Position::Byte(at as u64), "parameter size overflows"))?;
            let width = dtype.code() as usize;
            let vals_at = r.pos;
            let raw = r.take(len.checked_mul(width).ok_or_else(|| malformed(WHAT, Position::Byte(at as u64), "parameter size overflows"))?)?;
            let mut data = Vec::with_capacity(len);
            for (i, chunk) in raw.chunks_exact(width).enumerate() {
                let v = match dtype {
                    DType::F32 => T::from_f64_lossy(f64::from(f32::read_le(chunk))),
                    DType::F64 => T::from_f64_lossy(f64::read_le(chunk)),
                };
                if !v.is_finite() {
                    return Err(malformed(
                        WHAT,
                        Position::Byte((vals_at + i * width) as u64),
                        format!("non-finite value in {name}"),
                    ));
                }
                data.push(v);
            }
            params.insert(name.clone(), Tensor::new(shape, data)?, trainable)?;
            last = Some(name);
        }
        if r.pos != bytes.len() {
            return Err(malformed(WHAT, Position::Byte(r.pos as u64), "trailing bytes"));
        }
        Ok(Self { config, vocab, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            malformed(
                WHAT,
                Position::Byte(self.bytes.len() as u64),
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| malformed(WHAT, Position::Byte(at as u64), "invalid UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden: 2,
            n: 8,
            scales: 2,
            anchors: 4,
            kappa: 3,
            d_v: 3,
            d_f: 3,
            d_s: 4,
            d_raw: 3,
            vocab: 7,
            lstm_layers: 1,
            ..ModelConfig::default()
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new(vec!["open".into(), "door".into()], 5).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = Model::<f64>::new(tiny()).unwrap();
        let ck = Checkpoint::from_model(&m, &vocab());
        let b = ck.to_bytes().unwrap();
        let back = Checkpoint::<f64>::from_bytes(&b).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), b);

        let m32 = Model::<f32>::new(tiny()).unwrap();
        let b32 = Checkpoint::from_model(&m32, &vocab()).to_bytes().unwrap();
        assert_eq!(Checkpoint::<f32>::from_bytes(&b32).unwrap().to_bytes().unwrap(), b32);
        // widening keeps values exactly
        let wide = Checkpoint::<f64>::from_bytes(&b32).unwrap();
        assert_eq!(wide.params.value("clip.weight").unwrap().cast::<f32>(), *m32.params().value("clip.weight").unwrap());
    }

    #[test]
    fn zeroed_model_reloads_as_zero() {
        let m = Model::<f64>::zeroed(tiny()).unwrap();
        let b = Checkpoint::from_model(&m, &vocab()).to_bytes().unwrap();
        let back = Checkpoint::<f64>::from_bytes(&b).unwrap().into_model().unwrap();
        for (name, p) in back.params().iter() {
            let expect = if name.ends_with("running_var") { 1.0 } else { 0.0 };
            assert!(p.value.data().iter().all(|&v| v == expect), "{name}");
        }
    }

    #[test]
    fn mismatched_config_lists_names() {
        let m = Model::<f64>::new(tiny()).unwrap();
        let ck = Checkpoint::from_model(&m, &vocab());
        let other = ModelConfig { kappa: 5, ..tiny() };
        match ck.into_model_for(&other) {
            Err(Error::CheckpointMismatch(names)) => {
                assert!(names.iter().any(|n| n.starts_with("tan.s1.l1.gate.weight")), "{names:?}");
                assert!(!names.iter().any(|n| n.starts_with("clip.")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupt_inputs_rejected_with_positions() {
        let m = Model::<f64>::new(tiny()).unwrap();
        let b = Checkpoint::from_model(&m, &vocab()).to_bytes().unwrap();
        for cut in [0, 3, 10, b.len() / 2, b.len() - 1] {
            let err = Checkpoint::<f64>::from_bytes(&b[..cut]).unwrap_err();
            assert!(err.to_string().contains("byte"), "{err}");
        }
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(Checkpoint::<f64>::from_bytes(&bad).unwrap_err().to_string().contains("byte 4"));
        let mut bad = b.clone();
        bad[8] = 3;
        assert!(Checkpoint::<f64>::from_bytes(&bad).unwrap_err().to_string().contains("byte 8"));
        let mut long = b;
        long.push(0);
        assert!(Checkpoint::<f64>::from_bytes(&long).is_err());
    }
}

//! Binary checkpoint: `TSNASCK\0`, u32 version, u64 header length, JSON header,
//! then every tensor's elements little-endian in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tsnas_tensor::DType;
use tsnas_tensor::rng::RngState;
use tsnas_tensor::{Element, Tensor};

use crate::error::{CoreError, Result};

const MAGIC: &[u8; 8] = b"TSNASCK\0";
pub const VERSION: u32 = 1;

pub type Named<T> = Vec<(String, Tensor<T>)>;

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Element> {
    pub epoch: usize,
    /// Free-form configuration echo.
    pub meta: serde_json::Value,
    pub rng: RngState,
    pub adam_steps: u64,
    /// Named tensor groups, e.g. "params", "sgd", "adam".
    pub sections: BTreeMap<String, Named<T>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    epoch: usize,
    meta: serde_json::Value,
    rng_seed: String,
    rng_stream: u64,
    /// u128 does not survive JSON numbers
    rng_word_pos: String,
    adam_steps: u64,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    section: String,
    name: String,
    shape: Vec<usize>,
}

fn bad(msg: impl Into<String>) -> CoreError {
    CoreError::Checkpoint(msg.into())
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    if s.len() != 64 {
        return Err(bad("rng seed must be 64 hex digits"));
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad("rng seed is not hex"))?;
    }
    Ok(out)
}

impl<T: Element> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        for (section, tensors) in &self.sections {
            for (name, t) in tensors {
                entries.push(Entry { section: section.clone(), name: name.clone(), shape: t.shape().to_vec() });
                for v in t.data() {
                    match T::DTYPE {
                        DType::F32 => payload.extend((v.to_f32().expect("f32")).to_le_bytes()),
                        DType::F64 => payload.extend((v.to_f64().expect("f64")).to_le_bytes()),
                    }
                }
            }
        }
        let header = Header {
            dtype: T::DTYPE.name().into(),
            epoch: self.epoch,
            meta: self.meta.clone(),
            rng_seed: hex(&self.rng.seed),
            rng_stream: self.rng.stream,
            rng_word_pos: self.rng.word_pos.to_string(),
            adam_steps: self.adam_steps,
            tensors: entries,
        };
        let h = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + h.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((h.len() as u64).to_le_bytes());
        out.extend(h);
        out.extend(payload);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < 20 || &b[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(b[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hl = u64::from_le_bytes(b[12..20].try_into().expect("8 bytes")) as usize;
        let body = b.get(20..20 + hl).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        if header.dtype != T::DTYPE.name() {
            return Err(bad(format!("checkpoint holds {}, expected {}", header.dtype, T::DTYPE.name())));
        }
        let width = T::DTYPE.size_of();
        let mut pos = 20 + hl;
        let mut sections: BTreeMap<String, Named<T>> = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = b.get(pos..pos + n * width).ok_or_else(|| bad(format!("truncated tensor {}", e.name)))?;
            pos += n * width;
            let data: Vec<T> = raw
                .chunks_exact(width)
                .map(|c| match T::DTYPE {
                    DType::F32 => T::from_f32(f32::from_le_bytes(c.try_into().expect("4"))).expect("f32"),
                    DType::F64 => T::from_f64(f64::from_le_bytes(c.try_into().expect("8"))).expect("f64"),
                })
                .collect();
            sections.entry(e.section).or_default().push((e.name, Tensor::new(&e.shape, data)?));
        }
        if pos != b.len() {
            return Err(bad(format!("{} trailing bytes", b.len() - pos)));
        }
        Ok(Checkpoint {
            epoch: header.epoch,
            meta: header.meta,
            rng: RngState {
                seed: unhex(&header.rng_seed)?,
                stream: header.rng_stream,
                word_pos: header.rng_word_pos.parse().map_err(|_| bad("rng position"))?,
            },
            adam_steps: header.adam_steps,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so a crash never leaves a torn checkpoint behind
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn section(&self, name: &str) -> &[(String, Tensor<T>)] {
        self.sections.get(name).map_or(&[], Vec::as_slice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tsnas_tensor::rng::{capture, seeded};

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = seeded(5);
        let t = tsnas_tensor::init::uniform::<f64>(&[3, 2], 1.0, &mut rng);
        let mut sections = BTreeMap::new();
        sections.insert("params".to_string(), vec![("a.w".to_string(), t.clone()), ("s".into(), Tensor::scalar(f64::MIN_POSITIVE))]);
        let ck = Checkpoint { epoch: 3, meta: serde_json::json!({"k": 1}), rng: capture(&rng), adam_steps: 9, sections };
        let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!((back.epoch, back.adam_steps, &back.rng), (3, 9, &ck.rng));
        assert!(back.section("params")[0].1.bit_eq(&t));
        assert!(Checkpoint::<f32>::from_bytes(&ck.to_bytes()).is_err());
        let mut cut = ck.to_bytes();
        cut.pop();
        assert!(Checkpoint::<f64>::from_bytes(&cut).is_err());
    }
}

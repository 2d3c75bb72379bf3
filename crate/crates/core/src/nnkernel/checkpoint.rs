//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "HGCKPT\0\0"
//! version    u32
//! meta       u32 length + UTF-8 JSON
//! entries    u32 count, then per entry:
//!              kind u8 (0 param, 1 buffer, 2 adam first moment, 3 adam second moment)
//!              name u32 length + UTF-8
//!              rank u32, dims u64 * rank
//!              values f64 * product(dims)
//! optimizer  u8 flag; if 1: step u64, beta1, beta2, epsilon, learning_rate f64
//! crc32      u32 over every preceding byte
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{AdamState, ParamStore, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"HGCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form JSON metadata (model config, epoch, class list, ...).
    pub meta: String,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_bytes(&mut out, self.meta.as_bytes());

        let mut entries: Vec<(u8, &str, &[usize], &[f64])> = Vec::new();
        for (name, t) in self.params.params() {
            entries.push((0, name, t.shape(), t.data()));
        }
        for (name, t) in self.params.buffers() {
            entries.push((1, name, t.shape(), t.data()));
        }
        if let Some(opt) = &self.optimizer {
            for (name, (m, v)) in &opt.moments {
                entries.push((2, name, std::slice::from_ref(&0), m));
                entries.push((3, name, std::slice::from_ref(&0), v));
            }
        }
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (kind, name, shape, data) in entries {
            out.push(kind);
            put_bytes(&mut out, name.as_bytes());
            // moment vectors are stored flat
            let dims: Vec<usize> = if kind >= 2 { vec![data.len()] } else { shape.to_vec() };
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                for v in [opt.beta1, opt.beta2, opt.epsilon, opt.learning_rate] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let meta = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| corrupt("meta is not UTF-8"))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut moments: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>)> = Default::default();
        for _ in 0..count {
            let kind = r.u8()?;
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| corrupt("name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= r.remaining() / 8)
                .ok_or_else(|| corrupt(&format!("entry {name} is truncated")))?;
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            match kind {
                0 | 1 => {
                    let t = Tensor::new(dims, data).map_err(|_| corrupt(&format!("entry {name} has a bad shape")))?;
                    let dup = if kind == 0 {
                        params.get(&name).is_some()
                    } else {
                        params.buffer(&name).is_some()
                    };
                    if dup {
                        return Err(corrupt(&format!("duplicate entry {name}")));
                    }
                    if kind == 0 {
                        params.insert(name, t);
                    } else {
                        params.insert_buffer(name, t);
                    }
                }
                2 => moments.entry(name).or_default().0 = data,
                3 => moments.entry(name).or_default().1 = data,
                k => return Err(corrupt(&format!("unknown entry kind {k}"))),
            }
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let (beta1, beta2, epsilon, learning_rate) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                Some(AdamState {
                    beta1,
                    beta2,
                    epsilon,
                    learning_rate,
                    step,
                    moments,
                })
            }
            f => return Err(corrupt(&format!("bad optimizer flag {f}"))),
        };
        if r.remaining() != 0 {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            meta,
            params,
            optimizer,
        })
    }
}

fn corrupt(msg: &str) -> Error {
    Error::CorruptCheckpoint(msg.to_string())
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(corrupt("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.w", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.25));
        params.insert("b", Tensor::scalar(-0.0));
        params.insert_buffer("a.running_mean", Tensor::filled(&[2], 1.5));
        let mut opt = AdamState::new(0.01);
        opt.step = 7;
        opt.moments.insert("a.w".into(), (vec![0.5; 6], vec![1e-300; 6]));
        Checkpoint {
            meta: r#"{"epoch":3}"#.into(),
            params,
            optimizer: Some(opt),
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert!(back.params.get("b").unwrap().item().is_sign_negative());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::CorruptCheckpoint(_))));
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
        let good = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&good[..good.len() - 10]).is_err());
    }
}

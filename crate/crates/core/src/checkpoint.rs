//! Binary checkpoint container.
//!
//! Layout, little-endian:
//!
//! ```text
//! "CMCK" | u32 version | 32-byte config digest | u32 tensor count
//! per tensor: u32 name length | name (UTF-8) | u8 dtype | u32 rank | rank × u32 dim | payload
//! u64 rng seed | u64 rng position | u64 step
//! ```
//!
//! Random streams are derived from `(seed, step, ...)`, so the RNG state is
//! the base seed plus the position reached.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Guard against absurd lengths in corrupted files.
const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub digest: [u8; 32],
    pub tensors: Vec<(String, Tensor<T>)>,
    pub rng_seed: u64,
    pub rng_position: u64,
    pub step: u64,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.digest)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[T::DTYPE.tag()])?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * T::DTYPE.size());
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            w.write_all(&buf)?;
        }
        w.write_all(&self.rng_seed.to_le_bytes())?;
        w.write_all(&self.rng_position.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        Ok(())
    }

    /// Parse a checkpoint. Payloads stored in another float width are
    /// converted.
    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        fill(&mut r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = read_u32(&mut r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut digest = [0u8; 32];
        fill(&mut r, &mut digest, "config digest")?;
        let count = read_u32(&mut r, "tensor count")? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = read_u32(&mut r, "name length")? as usize;
            if len > MAX_NAME_LEN {
                return Err(Error::Checkpoint(format!("tensor name length {len} is implausible")));
            }
            let mut name = vec![0u8; len];
            fill(&mut r, &mut name, "tensor name")?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let mut tag = [0u8; 1];
            fill(&mut r, &mut tag, "dtype")?;
            let dtype = DType::from_tag(tag[0]).ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {}", tag[0])))?;
            let rank = read_u32(&mut r, "rank")? as usize;
            if rank > MAX_RANK {
                return Err(Error::Checkpoint(format!("tensor `{name}` has implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r, "dims")? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut payload = vec![0u8; numel * dtype.size()];
            fill(&mut r, &mut payload, &format!("payload of `{name}`"))?;
            let data: Vec<T> = match dtype {
                DType::F32 => payload
                    .chunks_exact(4)
                    .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                    .collect(),
                DType::F64 => payload
                    .chunks_exact(8)
                    .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            };
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        let rng_seed = read_u64(&mut r, "rng seed")?;
        let rng_position = read_u64(&mut r, "rng position")?;
        let step = read_u64(&mut r, "step")?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            digest,
            tensors,
            rng_seed,
            rng_position,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Error unless the stored digest equals `expected`.
    pub fn check_digest(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.digest != expected {
            return Err(Error::Checkpoint(
                "checkpoint was written for a different model configuration".into(),
            ));
        }
        Ok(())
    }

    /// Copy stored tensors into `dst` by name; every destination must be
    /// present with a matching shape.
    pub fn restore_into<'a>(&self, dst: impl IntoIterator<Item = (String, &'a mut Tensor<T>)>) -> Result<()>
    where
        T: 'a,
    {
        for (name, t) in dst {
            let src = self
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?} in the checkpoint but {:?} in the model",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

fn fill(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint(format!("truncated checkpoint while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    fill(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    fill(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Hex SHA-256 over names, shapes and little-endian values.
pub fn params_checksum<T: Scalar>(tensors: &[(String, Tensor<T>)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        let mut buf = Vec::with_capacity(t.numel() * T::DTYPE.size());
        t.data().iter().for_each(|v| v.write_le(&mut buf));
        h.update(&buf);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        Checkpoint {
            digest: [7; 32],
            tensors: vec![
                ("a.weight".into(), Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.2)),
                ("a.bias".into(), Tensor::from_vec(&[2], vec![f32::MIN_POSITIVE, -0.0]).unwrap()),
                ("s".into(), Tensor::scalar(3.5)),
            ],
            rng_seed: 7,
            rng_position: 12,
            step: 12,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        let back = Checkpoint::<f32>::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.digest, c.digest);
        assert_eq!((back.rng_seed, back.rng_position, back.step), (7, 12, 12));
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2));
        }
    }

    #[test]
    fn every_truncation_is_an_error() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        for cut in 0..bytes.len() {
            assert!(matches!(Checkpoint::<f32>::read_from(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
    }

    #[test]
    fn header_corruption() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[1] ^= 0xff;
        assert!(matches!(Checkpoint::<f32>::read_from(bad.as_slice()), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        let err = Checkpoint::<f32>::read_from(bad.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version"));
        let mut bad = bytes;
        bad.push(0);
        assert!(Checkpoint::<f32>::read_from(bad.as_slice()).is_err());
    }

    #[test]
    fn restore_checks_shapes() {
        let c = sample();
        let mut w = Tensor::<f32>::zeros(&[2, 3]);
        c.restore_into([("a.weight".to_string(), &mut w)]).unwrap();
        assert!(w.bit_eq(c.get("a.weight").unwrap()));
        let mut wrong = Tensor::<f32>::zeros(&[3, 2]);
        assert!(matches!(c.restore_into([("a.weight".to_string(), &mut wrong)]), Err(Error::Checkpoint(_))));
        let mut missing = Tensor::<f32>::zeros(&[1]);
        assert!(c.restore_into([("nope".to_string(), &mut missing)]).is_err());
        assert!(c.check_digest(&[0; 32]).is_err());
    }

    #[test]
    fn f32_payload_loads_as_f64() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        let back = Checkpoint::<f64>::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.get("s").unwrap().item(), 3.5);
    }
}

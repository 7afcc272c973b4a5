//! Binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic            8 bytes  "STCLCKPT"
//! version          u32      currently 1
//! epochs_done      u32
//! n_params         u32
//! per parameter:
//!   name_len       u32
//!   name           utf-8 bytes
//!   rank           u32
//!   dims           u64 × rank
//!   values         f64 × numel
//! has_optimizer    u8
//! if 1:
//!   step           u64
//!   per parameter: m (f64 × numel), v (f64 × numel)
//! ```
//!
//! Values are stored as `f64` regardless of the in-memory scalar type.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"STCLCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub epochs_done: u32,
    pub params: Vec<(String, Tensor<F>)>,
    pub optimizer: Option<AdamState<F>>,
}

fn w_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn r_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

impl<F: Real> Checkpoint<F> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w_u32(w, VERSION)?;
        w_u32(w, self.epochs_done)?;
        w_u32(w, self.params.len() as u32)?;
        for (name, t) in &self.params {
            let bytes = name.as_bytes();
            w_u32(w, bytes.len() as u32)?;
            w.write_all(bytes)?;
            w_u32(w, t.shape().len() as u32)?;
            for &d in t.shape() {
                w_u64(w, d as u64)?;
            }
            for &v in t.data() {
                w_f64(w, v.as_f64())?;
            }
        }
        match &self.optimizer {
            None => w.write_all(&[0u8])?,
            Some(st) => {
                w.write_all(&[1u8])?;
                w_u64(w, st.step)?;
                for (m, v) in st.m.iter().zip(&st.v) {
                    for &x in m {
                        w_f64(w, x.as_f64())?;
                    }
                    for &x in v {
                        w_f64(w, x.as_f64())?;
                    }
                }
            }
        }
        w.flush()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = BufReader::new(file);
        Self::read(&mut r, &path.display().to_string())
    }

    fn read(r: &mut impl Read, path: &str) -> Result<Self> {
        let io = |e: std::io::Error| Error::io(path.to_string(), e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::format(path, "bad magic bytes: not a checkpoint"));
        }
        let version = r_u32(r).map_err(io)?;
        if version != VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {} (expected {})", version, VERSION),
            ));
        }
        let epochs_done = r_u32(r).map_err(io)?;
        let n_params = r_u32(r).map_err(io)? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = r_u32(r).map_err(io)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::format(path, "parameter name is not utf-8"))?;
            let rank = r_u32(r).map_err(io)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r_u64(r).map_err(io)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(F::of(r_f64(r).map_err(io)?));
            }
            params.push((name, Tensor::new(shape, data)?));
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(io)?;
        let optimizer = if flag[0] == 1 {
            let step = r_u64(r).map_err(io)?;
            let mut m = Vec::with_capacity(n_params);
            let mut v = Vec::with_capacity(n_params);
            for (_, t) in &params {
                let numel = t.numel();
                let mut mi = Vec::with_capacity(numel);
                for _ in 0..numel {
                    mi.push(F::of(r_f64(r).map_err(io)?));
                }
                let mut vi = Vec::with_capacity(numel);
                for _ in 0..numel {
                    vi.push(F::of(r_f64(r).map_err(io)?));
                }
                m.push(mi);
                v.push(vi);
            }
            Some(AdamState { step, m, v })
        } else {
            None
        };
        Ok(Checkpoint {
            epochs_done,
            params,
            optimizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_checkpoint(seed: u64) -> Checkpoint<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<(String, Tensor<f64>)> = vec![
            (
                "conv1.weight".into(),
                Tensor::from_fn(vec![2, 1, 3], |_| rng.random_range(-1.0..1.0)),
            ),
            (
                "conv1.bias".into(),
                Tensor::from_fn(vec![2], |_| rng.random_range(-1.0..1.0)),
            ),
        ];
        let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
        let mut st = AdamState::new(&tensors);
        st.step = 17;
        for m in st.m.iter_mut().chain(st.v.iter_mut()) {
            for x in m.iter_mut() {
                *x = rng.random_range(-1.0..1.0);
            }
        }
        Checkpoint {
            epochs_done: 5,
            params,
            optimizer: Some(st),
        }
    }

    #[test]
    fn roundtrip_is_lossless() {
        let dir = std::env::temp_dir().join("stcl-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.bin");
        let ck = random_checkpoint(9);
        ck.save(&path).unwrap();
        let back = Checkpoint::<f64>::load(&path).unwrap();
        assert_eq!(ck, back);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = std::env::temp_dir().join("stcl-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corrupt.bin");
        let ck = random_checkpoint(10);
        ck.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&path, bytes).unwrap();
        match Checkpoint::<f64>::load(&path) {
            Err(Error::Format { message, .. }) => assert!(message.contains("magic")),
            other => panic!("expected format error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = std::env::temp_dir().join("stcl-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("version.bin");
        let ck = random_checkpoint(11);
        ck.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99; // version field
        std::fs::write(&path, bytes).unwrap();
        match Checkpoint::<f64>::load(&path) {
            Err(Error::Format { message, .. }) => assert!(message.contains("version")),
            other => panic!("expected format error, got {:?}", other.map(|_| ())),
        }
    }
}

//! Checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "LUMC" | u16 version=1 | u32 tensor_count
//! per tensor: u16 name_len | name utf-8 | u8 rank | u32 dims... | f32 data
//! u32 config_len | config echo utf-8
//! ```
//!
//! Optimizer moments, the step counter and the RNG counter ride along as
//! tensors under reserved names (`opt/m/...`, `opt/v/...`, `meta/...`).

use std::io::{Read, Write};
use std::path::Path;

use crate::array::Array;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"LUMC";
const VERSION: u16 = 1;

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    /// Named tensors in a stable order.
    pub tensors: Vec<(String, Array)>,
    /// The resolved `key = value` configuration the run used.
    pub config_echo: String,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Array> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn push_scalar(&mut self, name: &str, value: f64) {
        self.tensors
            .push((name.to_string(), Array::scalar(value as f32)));
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.get(name).map(|a| a.data()[0] as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, arr) in &self.tensors {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[arr.rank() as u8])?;
            for &d in arr.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in arr.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        let cfg = self.config_echo.as_bytes();
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {magic:?} in {}",
                path.display()
            )));
        }
        let mut v16 = [0u8; 2];
        r.read_exact(&mut v16)?;
        let version = u16::from_le_bytes(v16);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut v32 = [0u8; 4];
        r.read_exact(&mut v32)?;
        let count = u32::from_le_bytes(v32) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut v16)?;
            let name_len = u16::from_le_bytes(v16) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::Format(format!("invalid tensor name: {e}")))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                r.read_exact(&mut v32)?;
                shape.push(u32::from_le_bytes(v32) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut buf = vec![0u8; numel * 4];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("truncated tensor {name}")))?;
            let data: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Array::from_vec(shape, data)?));
        }
        r.read_exact(&mut v32)
            .map_err(|_| Error::Format("truncated config echo".to_string()))?;
        let cfg_len = u32::from_le_bytes(v32) as usize;
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg)
            .map_err(|_| Error::Format("truncated config echo".to_string()))?;
        let config_echo = String::from_utf8(cfg)
            .map_err(|e| Error::Format(format!("invalid config echo: {e}")))?;
        Ok(Checkpoint {
            tensors,
            config_echo,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint {
            tensors: vec![
                ("a/w".into(), Array::from_vec(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 9.25, -7.0]).unwrap()),
                ("a/b".into(), Array::from_vec(vec![3], vec![0.5, 0.25, -0.125]).unwrap()),
            ],
            config_echo: "lr = 0.001\nseed = 7\n".into(),
        };
        ck.push_scalar("meta/step", 42.0);
        ck
    }

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.config_echo, ck.config_echo);
        assert_eq!(back.tensors.len(), ck.tensors.len());
        for ((n1, a1), (n2, a2)) in back.tensors.iter().zip(&ck.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(a1, a2);
        }
        assert_eq!(back.scalar("meta/step"), Some(42.0));
    }

    #[test]
    fn truncation_and_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        sample().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'?';
        std::fs::write(&path, &bad).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}

//! Multi-channel recordings, windowed batches, and the binary
//! recording container.
//!
//! Container layout (little-endian), one recording per file:
//!
//! ```text
//! magic "LUM1" | u16 version=1 | u16 C | u64 T | f32 fs
//! u8 label_present | i32 label | u16 subject_len | subject utf-8
//! per channel: u16 name_len | name utf-8 | 3 x f32 coords
//! C x T f32 samples, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::montage::Montage;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"LUM1";
const VERSION: u16 = 1;

/// A continuous multi-channel recording with sampling-rate metadata.
#[derive(Clone, Debug)]
pub struct Recording {
    pub montage: Montage,
    /// Sampling rate in Hz.
    pub fs: f32,
    /// `C x T` samples, row-major.
    pub samples: Vec<f32>,
    pub label: Option<i32>,
    pub subject: String,
}

impl Recording {
    pub fn new(
        montage: Montage,
        fs: f32,
        samples: Vec<f32>,
        label: Option<i32>,
        subject: String,
    ) -> Result<Self> {
        let c = montage.channels();
        if samples.is_empty() || samples.len() % c != 0 {
            return Err(Error::invalid(format!(
                "sample count {} not a positive multiple of C={c}",
                samples.len()
            )));
        }
        if !(fs > 0.0) {
            return Err(Error::invalid(format!("sampling rate {fs} must be > 0")));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("recording samples".into()));
        }
        Ok(Recording {
            montage,
            fs,
            samples,
            label,
            subject,
        })
    }

    pub fn channels(&self) -> usize {
        self.montage.channels()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.samples.len() / self.channels()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let t = self.len();
        &self.samples[c * t..(c + 1) * t]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.channels() as u16).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&self.fs.to_le_bytes())?;
        w.write_all(&[self.label.is_some() as u8])?;
        w.write_all(&self.label.unwrap_or(0).to_le_bytes())?;
        write_str16(&mut w, &self.subject)?;
        for (name, coord) in self.montage.names().iter().zip(self.montage.coords()) {
            write_str16(&mut w, name)?;
            for v in coord {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for v in &self.samples {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {magic:?} in {}",
                path.display()
            )));
        }
        let version = read_u16(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let c = read_u16(&mut r)? as usize;
        let t = read_u64(&mut r)? as usize;
        let fs = read_f32(&mut r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let mut lbl = [0u8; 4];
        r.read_exact(&mut lbl)?;
        let label = (flag[0] != 0).then_some(i32::from_le_bytes(lbl));
        let subject = read_str16(&mut r)?;
        let mut names = Vec::with_capacity(c);
        let mut coords = Vec::with_capacity(c);
        for _ in 0..c {
            names.push(read_str16(&mut r)?);
            let mut coord = [0f32; 3];
            for v in coord.iter_mut() {
                *v = read_f32(&mut r)?;
            }
            coords.push(coord);
        }
        let montage = Montage::new(names, coords)?;
        let mut samples = vec![0f32; c * t];
        let mut buf = vec![0u8; c * t * 4];
        r.read_exact(&mut buf).map_err(|_| {
            Error::Format(format!("truncated sample block in {}", path.display()))
        })?;
        for (v, chunk) in samples.iter_mut().zip(buf.chunks_exact(4)) {
            *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        Recording::new(montage, fs, samples, label, subject)
    }
}

/// Non-overlapping fixed-length windows cut from recordings at 256 Hz,
/// z-scored per channel per window.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    pub montage: Montage,
    /// `B x C x T_w`, row-major.
    pub windows: Vec<f32>,
    pub window_len: usize,
    pub labels: Option<Vec<i32>>,
    /// (subject, start sample in the source recording) per window.
    pub provenance: Vec<(String, usize)>,
}

impl WindowBatch {
    pub fn batch(&self) -> usize {
        if self.windows.is_empty() {
            0
        } else {
            self.windows.len() / (self.montage.channels() * self.window_len)
        }
    }

    pub fn window(&self, b: usize) -> &[f32] {
        let stride = self.montage.channels() * self.window_len;
        &self.windows[b * stride..(b + 1) * stride]
    }

    /// Copies selected windows into a new batch.
    pub fn subset(&self, idx: &[usize]) -> WindowBatch {
        let stride = self.montage.channels() * self.window_len;
        let mut windows = Vec::with_capacity(idx.len() * stride);
        let mut provenance = Vec::with_capacity(idx.len());
        let labels = self.labels.as_ref().map(|l| {
            idx.iter().map(|&i| l[i]).collect::<Vec<_>>()
        });
        for &i in idx {
            windows.extend_from_slice(self.window(i));
            provenance.push(self.provenance[i].clone());
        }
        WindowBatch {
            montage: self.montage.clone(),
            windows,
            window_len: self.window_len,
            labels,
            provenance,
        }
    }
}

fn write_str16<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::invalid("string too long for u16 length".to_string()));
    }
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_str16<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u16(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid utf-8: {e}")))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_recording() -> Recording {
        let montage = Montage::template(16).unwrap();
        let t = 100;
        let samples: Vec<f32> = (0..16 * t).map(|i| (i as f32 * 0.01).sin()).collect();
        Recording::new(montage, 256.0, samples, Some(1), "s01".into()).unwrap()
    }

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.lum");
        let rec = sample_recording();
        rec.save(&path).unwrap();
        let back = Recording::load(&path).unwrap();
        assert_eq!(back.samples, rec.samples);
        assert_eq!(back.montage, rec.montage);
        assert_eq!(back.label, Some(1));
        assert_eq!(back.subject, "s01");
        assert_eq!(back.fs, 256.0);
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.lum");
        sample_recording().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(Recording::load(&path).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.lum");
        sample_recording().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(Recording::load(&path).is_err());
    }
}

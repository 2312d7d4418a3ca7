//! Electrode montages: named channels with unit-sphere 3D positions.
//!
//! Coordinate frame: +x toward the right ear, +y toward the nasion,
//! +z toward the vertex. The shipped templates are idealized 10-20 /
//! 10-10 positions on the unit sphere (intermediate sites are normalized
//! arc midpoints of their neighbors).

use crate::{Error, Result};

/// A named electrode set with unit-norm 3D coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Montage {
    names: Vec<String>,
    coords: Vec<[f32; 3]>,
}

pub const MAX_CHANNELS: usize = 64;

impl Montage {
    pub fn new(names: Vec<String>, coords: Vec<[f32; 3]>) -> Result<Self> {
        if names.is_empty() || names.len() > MAX_CHANNELS {
            return Err(Error::invalid(format!(
                "montage must have 1..={MAX_CHANNELS} channels, got {}",
                names.len()
            )));
        }
        if names.len() != coords.len() {
            return Err(Error::invalid(format!(
                "{} names but {} coordinates",
                names.len(),
                coords.len()
            )));
        }
        for (i, a) in names.iter().enumerate() {
            if names[..i].contains(a) {
                return Err(Error::invalid(format!("duplicate channel name {a}")));
            }
        }
        for (name, c) in names.iter().zip(&coords) {
            let norm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "channel {name} coordinate norm {norm} not on unit sphere"
                )));
            }
        }
        Ok(Montage { names, coords })
    }

    /// One of the shipped templates, by channel count (16, 20 or 26).
    pub fn template(channels: usize) -> Result<Self> {
        let names: &[&str] = match channels {
            16 => &NAMES_16,
            20 => &NAMES_20,
            26 => &NAMES_26,
            _ => {
                return Err(Error::invalid(format!(
                    "no montage template with {channels} channels (have 16, 20, 26)"
                )))
            }
        };
        let mut coords = Vec::with_capacity(names.len());
        for n in names {
            let (_, c) = POSITIONS
                .iter()
                .find(|(name, _)| name == n)
                .expect("template names drawn from the position table");
            coords.push(*c);
        }
        Montage::new(names.iter().map(|s| s.to_string()).collect(), coords)
    }

    pub fn channels(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn coords(&self) -> &[[f32; 3]] {
        &self.coords
    }

    /// Flat `C x 3` coordinate buffer.
    pub fn coords_flat(&self) -> Vec<f32> {
        self.coords.iter().flat_map(|c| c.iter().copied()).collect()
    }

    /// New montage with channels reordered by `perm` (output channel i is
    /// input channel `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.channels() {
            return Err(Error::invalid("permutation length mismatch".to_string()));
        }
        let names = perm.iter().map(|&i| self.names[i].clone()).collect();
        let coords = perm.iter().map(|&i| self.coords[i]).collect();
        Montage::new(names, coords)
    }
}

const NAMES_16: [&str; 16] = [
    "Fp1", "Fp2", "F7", "F3", "F4", "F8", "T7", "C3", "C4", "T8", "P7", "P3", "P4", "P8", "O1",
    "O2",
];

const NAMES_20: [&str; 20] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T7", "C3", "Cz", "C4", "T8", "P7", "P3", "Pz",
    "P4", "P8", "O1", "Oz", "O2",
];

const NAMES_26: [&str; 26] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "FC3", "FCz", "FC4", "T7", "C3", "Cz", "C4", "T8",
    "CP3", "CPz", "CP4", "P7", "P3", "Pz", "P4", "P8", "O1", "Oz", "O2",
];

const POSITIONS: [(&str, [f32; 3]); 26] = [
    ("Fp1", [-0.309017, 0.951057, 0.000000]),
    ("Fp2", [0.309017, 0.951057, 0.000000]),
    ("F7", [-0.809017, 0.587785, 0.000000]),
    ("F3", [-0.480804, 0.769563, 0.420238]),
    ("Fz", [0.000000, 0.707107, 0.707107]),
    ("F4", [0.480804, 0.769563, 0.420238]),
    ("F8", [0.809017, 0.587785, 0.000000]),
    ("FC3", [-0.656488, 0.425292, 0.623017]),
    ("FCz", [0.000000, 0.382683, 0.923880]),
    ("FC4", [0.656488, 0.425292, 0.623017]),
    ("T7", [-1.000000, 0.000000, 0.000000]),
    ("C3", [-0.707107, 0.000000, 0.707107]),
    ("Cz", [0.000000, 0.000000, 1.000000]),
    ("C4", [0.707107, 0.000000, 0.707107]),
    ("T8", [1.000000, 0.000000, 0.000000]),
    ("CP3", [-0.656488, -0.425292, 0.623017]),
    ("CPz", [0.000000, -0.382683, 0.923880]),
    ("CP4", [0.656488, -0.425292, 0.623017]),
    ("P7", [-0.809017, -0.587785, 0.000000]),
    ("P3", [-0.480804, -0.769563, 0.420238]),
    ("Pz", [0.000000, -0.707107, 0.707107]),
    ("P4", [0.480804, -0.769563, 0.420238]),
    ("P8", [0.809017, -0.587785, 0.000000]),
    ("O1", [-0.309017, -0.951057, 0.000000]),
    ("Oz", [0.000000, -1.000000, 0.000000]),
    ("O2", [0.309017, -0.951057, 0.000000]),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_have_expected_sizes_and_unit_norms() {
        for c in [16, 20, 26] {
            let m = Montage::template(c).unwrap();
            assert_eq!(m.channels(), c);
            for coord in m.coords() {
                let norm = coord.iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!((norm - 1.0).abs() <= 1e-6);
            }
        }
        assert!(Montage::template(19).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let err = Montage::new(
            vec!["Cz".into(), "Cz".into()],
            vec![[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]],
        );
        assert!(err.is_err());
    }

    #[test]
    fn smaller_templates_nest_in_larger() {
        let m20 = Montage::template(20).unwrap();
        let m26 = Montage::template(26).unwrap();
        for name in m20.names() {
            assert!(m26.names().contains(name), "{name} missing from 26");
        }
    }
}

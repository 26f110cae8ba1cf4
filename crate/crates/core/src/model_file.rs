//! JSON persistence for trained models.
//!
//! Matrices are stored row-major with every value written as a JSON number
//! with 17 significant digits, enough to reproduce each `f64` exactly.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::de::Deserializer;
use serde::ser::{Error as _, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use crate::dataset::{LabeledDataset, StandardizationStats};
use crate::error::{Error, Result};
use crate::numerics::SymMatrix;
use crate::objective::{Hyperparams, MarginModel, ProjectionModel};
use crate::solver::{FitResult, Mode};

pub const FORMAT_VERSION: u32 = 1;

/// An `f64` that serializes in `{:.16e}` form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Num(pub f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(S::Error::custom(format!("non-finite value {}", self.0)));
        }
        let raw = RawValue::from_string(format!("{:.16e}", self.0)).map_err(S::Error::custom)?;
        raw.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        f64::deserialize(d).map(Num)
    }
}

fn nums(v: impl IntoIterator<Item = f64>) -> Vec<Num> {
    v.into_iter().map(Num).collect()
}

fn rows_of(m: ArrayView2<f64>) -> Vec<Vec<Num>> {
    m.outer_iter().map(|r| nums(r.iter().copied())).collect()
}

fn matrix_from(rows: &[Vec<Num>], nrows: usize, ncols: usize, what: &str) -> Result<Array2<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Shape(format!("{what} is not {nrows} x {ncols}")));
    }
    let flat = rows.iter().flatten().map(|v| v.0).collect();
    Array2::from_shape_vec((nrows, ncols), flat).map_err(|e| Error::Shape(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shapes {
    pub d: usize,
    pub r: usize,
    /// Number of classes.
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredStats {
    pub mean: Vec<Num>,
    pub stddev: Vec<Num>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// SHA-256 of the training data, see [`dataset_digest`].
    pub dataset_digest: String,
    /// Seconds since the Unix epoch; omitted unless requested, so that
    /// repeated runs give identical files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub mode: Mode,
    pub shapes: Shapes,
    /// `d × r`.
    pub p: Vec<Vec<Num>>,
    /// `r × 1` (binary) or `r × K`.
    pub w: Vec<Vec<Num>>,
    pub bias: Vec<Num>,
    /// `K × K`, multi-class only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<Vec<Vec<Num>>>,
    pub label_map: Vec<String>,
    pub stats: StoredStats,
    pub hyperparams: Hyperparams,
    pub provenance: Provenance,
}

/// SHA-256 over the feature bits (row-major, little endian), the class
/// indices and the label names, as lowercase hex.
pub fn dataset_digest(ds: &LabeledDataset) -> String {
    let mut h = Sha256::new();
    h.update((ds.n() as u64).to_le_bytes());
    h.update((ds.d() as u64).to_le_bytes());
    for v in ds.features().iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    for &l in ds.labels() {
        h.update((l as u64).to_le_bytes());
    }
    for name in ds.label_map() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
    }
    hex::encode(h.finalize())
}

impl ModelFile {
    pub fn new(
        fit: &FitResult,
        label_map: &[String],
        stats: &StandardizationStats,
        hp: &Hyperparams,
        provenance: Provenance,
    ) -> Result<Self> {
        let p = fit.projection.matrix();
        let k = label_map.len();
        let m = &fit.margin;
        let mode = if m.is_binary() {
            Mode::Binary
        } else {
            Mode::Multiclass
        };
        let file = Self {
            format_version: FORMAT_VERSION,
            mode,
            shapes: Shapes {
                d: p.nrows(),
                r: p.ncols(),
                k,
            },
            p: rows_of(p.view()),
            w: rows_of(m.weights.view()),
            bias: nums(m.bias.iter().copied()),
            omega: m.omega.as_ref().map(|o| rows_of(o.as_array().view())),
            label_map: label_map.to_vec(),
            stats: StoredStats {
                mean: nums(stats.mean.iter().copied()),
                stddev: nums(stats.stddev.iter().copied()),
            },
            hyperparams: *hp,
            provenance,
        };
        file.validate()?;
        Ok(file)
    }

    fn tasks(&self) -> usize {
        match self.mode {
            Mode::Binary => 1,
            Mode::Multiclass => self.shapes.k,
        }
    }

    /// Checks that every array agrees with `shapes` and `mode`.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported model format version {}",
                self.format_version
            )));
        }
        let Shapes { d, r, k } = self.shapes;
        if r == 0 || r >= d {
            return Err(Error::Config(format!("r must be < d (r = {r}, d = {d})")));
        }
        let binary = self.mode == Mode::Binary;
        if binary != (k == 2) || k < 2 {
            return Err(Error::Config(format!(
                "{k} classes in a {:?} model",
                self.mode
            )));
        }
        if self.label_map.len() != k {
            return Err(Error::Shape(format!(
                "label map has {} entries for {k} classes",
                self.label_map.len()
            )));
        }
        if self.bias.len() != self.tasks() {
            return Err(Error::Shape(format!(
                "bias has {} entries",
                self.bias.len()
            )));
        }
        if self.stats.mean.len() != d || self.stats.stddev.len() != d {
            return Err(Error::Shape(format!(
                "standardization stats are not of length {d}"
            )));
        }
        if binary == self.omega.is_some() {
            return Err(Error::Config(
                "omega must be present exactly for multi-class models".into(),
            ));
        }
        self.projection()?;
        self.margin()?;
        Ok(())
    }

    pub fn projection(&self) -> Result<ProjectionModel> {
        ProjectionModel::new(matrix_from(&self.p, self.shapes.d, self.shapes.r, "P")?)
    }

    pub fn margin(&self) -> Result<MarginModel> {
        let r = self.shapes.r;
        let weights = matrix_from(&self.w, r, self.tasks(), "W")?;
        let bias = Array1::from_iter(self.bias.iter().map(|v| v.0));
        let omega = match &self.omega {
            Some(rows) => {
                let k = self.shapes.k;
                Some(SymMatrix::new(matrix_from(rows, k, k, "Omega")?)?)
            }
            None => None,
        };
        Ok(MarginModel {
            weights,
            bias,
            omega,
        })
    }

    pub fn stats(&self) -> StandardizationStats {
        StandardizationStats {
            mean: self.stats.mean.iter().map(|v| v.0).collect(),
            stddev: self.stats.stddev.iter().map(|v| v.0).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text)?;
        file.validate()?;
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

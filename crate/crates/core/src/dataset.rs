//! Labeled datasets: parsing, serialization, standardization, splitting and
//! synthetic generation.

use std::cmp::Ordering;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Columns whose standard deviation falls below this are centered only.
pub const MIN_STDDEV: f64 = 1e-12;

/// Dense feature matrix (samples in rows) with class indices in `0..K`.
///
/// `label_map[k]` is the original label token of internal class `k`; the map
/// is sorted ascending (numerically when every token is a number). For two
/// classes, class 0 plays the role of `y = -1` and class 1 of `y = +1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    label_map: Vec<String>,
}

impl LabeledDataset {
    /// Builds a dataset from raw label tokens, deriving the sorted label map.
    pub fn from_tokens(features: Array2<f64>, tokens: &[String]) -> Result<Self> {
        let label_map = sorted_label_map(tokens);
        Self::with_label_map(features, tokens, label_map)
    }

    /// Builds a dataset whose tokens are mapped through an existing label map.
    /// Every class of the map need not occur (used for held-out data).
    pub fn with_label_map(
        features: Array2<f64>,
        tokens: &[String],
        label_map: Vec<String>,
    ) -> Result<Self> {
        let labels = tokens
            .iter()
            .map(|t| {
                let key = normalize_token(t);
                label_map
                    .iter()
                    .position(|m| *m == key)
                    .ok_or_else(|| Error::Config(format!("label {t:?} is not in the label map")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_indices(features, labels, label_map)
    }

    /// Builds a dataset from class indices. Classes of `label_map` may be
    /// absent from `labels`; use [`LabeledDataset::check_all_classes_present`]
    /// where that matters.
    pub fn from_indices(
        features: Array2<f64>,
        labels: Vec<usize>,
        label_map: Vec<String>,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= label_map.len()) {
            return Err(Error::Config(format!(
                "class index {bad} out of range for {} classes",
                label_map.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(
                "feature matrix contains non-finite values".into(),
            ));
        }
        Ok(Self {
            features,
            labels,
            label_map,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label_map(&self) -> &[String] {
        &self.label_map
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.label_map.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn check_all_classes_present(&self) -> Result<()> {
        match self.class_counts().iter().position(|&c| c == 0) {
            Some(k) => Err(Error::Config(format!(
                "class {:?} has no samples",
                self.label_map[k]
            ))),
            None => Ok(()),
        }
    }

    /// `±1` targets for a two-class dataset.
    pub fn signed_labels(&self) -> Result<Array1<f64>> {
        if self.num_classes() != 2 {
            return Err(Error::Config(format!(
                "binary labels requested for a {}-class dataset",
                self.num_classes()
            )));
        }
        Ok(self
            .labels
            .iter()
            .map(|&l| if l == 1 { 1.0 } else { -1.0 })
            .collect())
    }

    /// Rows at `indices`, in the given order, keeping the label map.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            label_map: self.label_map.clone(),
        }
    }

    /// Same labels, new feature matrix with the same row count.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        Self::from_indices(features, self.labels.clone(), self.label_map.clone())
    }
}

fn normalize_token(token: &str) -> String {
    match token.parse::<f64>() {
        Ok(v) if v.is_finite() => format!("{v}"),
        _ => token.to_string(),
    }
}

fn sorted_label_map(tokens: &[String]) -> Vec<String> {
    let mut keys: Vec<String> = tokens.iter().map(|t| normalize_token(t)).collect();
    let numeric = keys.iter().all(|k| k.parse::<f64>().is_ok());
    if numeric {
        keys.sort_by(|a, b| {
            let (x, y) = (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap());
            x.partial_cmp(&y).unwrap_or(Ordering::Equal)
        });
    } else {
        keys.sort();
    }
    keys.dedup();
    keys
}

/// Parses LIBSVM text (`<label> <idx>:<val> ...`, 1-based ascending indices).
///
/// Absent indices are zero. The dimension is the largest index seen, or
/// `expected_dim` when that is larger.
pub fn parse_libsvm(text: &str, expected_dim: Option<usize>) -> Result<LabeledDataset> {
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut tokens = Vec::new();
    let mut max_index = 0usize;

    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let label = parts.next().unwrap();
        if label.parse::<f64>().is_err() {
            return Err(Error::parse(
                line_no,
                format!("non-numeric token {label:?}"),
            ));
        }
        let mut row = Vec::new();
        let mut last = 0usize;
        for tok in parts {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| Error::parse(line_no, format!("non-numeric token {tok:?}")))?;
            if idx == "qid" {
                continue;
            }
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::parse(line_no, format!("non-numeric token {tok:?}")))?;
            let val: f64 = val
                .parse()
                .map_err(|_| Error::parse(line_no, format!("non-numeric token {tok:?}")))?;
            if idx == 0 {
                return Err(Error::parse(line_no, "index 0 (indices are 1-based)"));
            }
            if idx <= last {
                return Err(Error::parse(line_no, "non-ascending index"));
            }
            if let Some(dim) = expected_dim {
                if idx > dim {
                    return Err(Error::parse(
                        line_no,
                        format!("index {idx} exceeds expected dimension {dim}"),
                    ));
                }
            }
            if !val.is_finite() {
                return Err(Error::parse(line_no, format!("non-finite value {tok:?}")));
            }
            last = idx;
            row.push((idx, val));
        }
        max_index = max_index.max(last);
        tokens.push(label.to_string());
        rows.push(row);
    }

    if rows.is_empty() {
        return Err(Error::parse(1, "empty input"));
    }
    let d = max_index.max(expected_dim.unwrap_or(0));
    let mut features = Array2::zeros((rows.len(), d));
    for (i, row) in rows.iter().enumerate() {
        for &(idx, val) in row {
            features[[i, idx - 1]] = val;
        }
    }
    LabeledDataset::from_tokens(features, &tokens)
}

/// Writes a dataset as sparse LIBSVM lines (zeros omitted).
pub fn to_libsvm(ds: &LabeledDataset) -> String {
    let mut out = String::new();
    for (row, &label) in ds.features.outer_iter().zip(&ds.labels) {
        out.push_str(&ds.label_map[label]);
        for (j, &v) in row.iter().enumerate() {
            if v != 0.0 {
                let _ = write!(out, " {}:{:?}", j + 1, v);
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

impl std::str::FromStr for LabelColumn {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => LabelColumn::Index(i),
            Err(_) => LabelColumn::Name(s.to_string()),
        })
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(1, |p| p.line() as usize);
    Error::parse(line, e.to_string())
}

/// Parses a rectangular CSV table; every column except the label column is a
/// numeric feature, in original order.
pub fn parse_csv(
    text: &str,
    label_column: &LabelColumn,
    has_header: bool,
) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let label_idx = match label_column {
        LabelColumn::Index(i) => *i,
        LabelColumn::Name(name) => {
            if !has_header {
                return Err(Error::Config(format!(
                    "label column {name:?} given by name but the table has no header"
                )));
            }
            let headers = reader.headers().map_err(csv_error)?;
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::parse(1, format!("missing label column {name:?}")))?
        }
    };

    let mut width = None;
    let mut values = Vec::new();
    let mut tokens = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row_no = r + 1;
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(row_no, |p| p.line() as usize);
        match width {
            None => {
                if label_idx >= record.len() {
                    return Err(Error::parse(
                        line,
                        format!("missing label column {label_idx}"),
                    ));
                }
                width = Some(record.len());
            }
            Some(w) if w != record.len() => {
                return Err(Error::parse(
                    line,
                    format!("ragged row {row_no}: {} cells, expected {w}", record.len()),
                ));
            }
            _ => {}
        }
        for (c, cell) in record.iter().enumerate() {
            if c == label_idx {
                tokens.push(cell.to_string());
                continue;
            }
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| {
                    Error::parse(
                        line,
                        format!("non-numeric feature cell row {row_no} col {}", c + 1),
                    )
                })?;
            values.push(v);
        }
    }
    let Some(width) = width else {
        return Err(Error::parse(1, "empty input"));
    };
    let features = Array2::from_shape_vec((tokens.len(), width - 1), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    LabeledDataset::from_tokens(features, &tokens)
}

/// Per-column z-score statistics (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl StandardizationStats {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            stddev: vec![1.0; d],
        }
    }

    pub fn d(&self) -> usize {
        self.mean.len()
    }

    /// Applies the transform to a raw feature matrix.
    pub fn apply_matrix(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.d() {
            return Err(Error::Shape(format!(
                "standardization fitted on {} columns, data has {}",
                self.d(),
                x.ncols()
            )));
        }
        let mut out = x.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let sd = if self.stddev[j] < MIN_STDDEV {
                1.0
            } else {
                self.stddev[j]
            };
            let m = self.mean[j];
            col.mapv_inplace(|v| (v - m) / sd);
        }
        Ok(out)
    }
}

pub fn fit_standardize(ds: &LabeledDataset) -> StandardizationStats {
    let n = ds.n() as f64;
    let mut mean = Vec::with_capacity(ds.d());
    let mut stddev = Vec::with_capacity(ds.d());
    for col in ds.features.axis_iter(Axis(1)) {
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean.push(m);
        stddev.push(var.sqrt());
    }
    StandardizationStats { mean, stddev }
}

pub fn apply_standardize(
    ds: &LabeledDataset,
    stats: &StandardizationStats,
) -> Result<LabeledDataset> {
    ds.with_features(stats.apply_matrix(&ds.features)?)
}

/// A train/test partition together with the source row indices of each side.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Seeded stratified split with `train_count` training rows.
///
/// Each class receives a share of the training rows proportional to its size
/// (largest remainder rounding), and at least one row.
pub fn split(ds: &LabeledDataset, train_count: usize, seed: u64) -> Result<Split> {
    let n = ds.n();
    if train_count == 0 || train_count >= n {
        return Err(Error::Config(format!(
            "train_count {train_count} out of range (0, {n})"
        )));
    }
    let k = ds.num_classes();
    if train_count < k {
        return Err(Error::Config(format!(
            "cannot stratify {train_count} training samples over {k} classes"
        )));
    }
    let counts = ds.class_counts();
    let quota = stratified_quota(&counts, train_count);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_indices = Vec::with_capacity(train_count);
    let mut test_indices = Vec::with_capacity(n - train_count);
    for class in 0..k {
        let mut members: Vec<usize> = (0..n).filter(|&i| ds.labels[i] == class).collect();
        members.shuffle(&mut rng);
        train_indices.extend_from_slice(&members[..quota[class]]);
        test_indices.extend_from_slice(&members[quota[class]..]);
    }
    train_indices.sort_unstable();
    test_indices.sort_unstable();
    Ok(Split {
        train: ds.subset(&train_indices),
        test: ds.subset(&test_indices),
        train_indices,
        test_indices,
    })
}

/// Largest-remainder allocation of `total` over classes of the given sizes,
/// with every nonempty class receiving at least one slot.
pub(crate) fn stratified_quota(counts: &[usize], total: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let exact: Vec<f64> = counts
        .iter()
        .map(|&c| total as f64 * c as f64 / n as f64)
        .collect();
    let mut quota: Vec<usize> = exact
        .iter()
        .zip(counts)
        .map(|(&q, &c)| (q.floor() as usize).max(usize::from(c > 0)).min(c))
        .collect();
    let remainder = |k: usize, q: &[usize]| exact[k] - q[k] as f64;

    loop {
        let assigned: usize = quota.iter().sum();
        match assigned.cmp(&total) {
            Ordering::Equal => break,
            Ordering::Less => {
                let best = (0..counts.len())
                    .filter(|&k| quota[k] < counts[k])
                    .max_by(|&a, &b| {
                        remainder(a, &quota)
                            .partial_cmp(&remainder(b, &quota))
                            .unwrap_or(Ordering::Equal)
                            .then(b.cmp(&a))
                    })
                    .expect("total < n leaves room in some class");
                quota[best] += 1;
            }
            Ordering::Greater => {
                let worst = (0..counts.len())
                    .filter(|&k| quota[k] > 1)
                    .min_by(|&a, &b| {
                        remainder(a, &quota)
                            .partial_cmp(&remainder(b, &quota))
                            .unwrap_or(Ordering::Equal)
                            .then(b.cmp(&a))
                    })
                    .expect("total >= K leaves a class with more than one slot");
                quota[worst] -= 1;
            }
        }
    }
    quota
}

/// Parameters of the Gaussian-blob generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub informative_dims: usize,
    pub noise_dims: usize,
    pub redundant_dims: usize,
    pub class_separation: f64,
    pub noise_scale: f64,
    /// Weight in `[0, 1)` of a direction shared by all class centers; larger
    /// values make the centers (and hence the per-class tasks) correlated.
    #[serde(default)]
    pub center_correlation: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 2,
            samples_per_class: 50,
            informative_dims: 5,
            noise_dims: 45,
            redundant_dims: 0,
            class_separation: 4.0,
            noise_scale: 1.0,
            center_correlation: 0.0,
        }
    }
}

/// Standard deviation of the jitter added to redundant columns.
const REDUNDANT_JITTER: f64 = 0.1;

impl SynthSpec {
    pub fn dim(&self) -> usize {
        self.informative_dims + self.noise_dims + self.redundant_dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.samples_per_class == 0 || self.informative_dims == 0 {
            return Err(Error::Config(
                "synthetic spec needs >= 2 classes, >= 1 sample per class and >= 1 informative dim"
                    .into(),
            ));
        }
        if !(self.class_separation.is_finite()
            && self.noise_scale.is_finite()
            && self.noise_scale >= 0.0)
        {
            return Err(Error::Config(
                "separation and noise scale must be finite, noise scale >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.center_correlation) {
            return Err(Error::Config(
                "center correlation must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Parses `key=value` pairs separated by commas, e.g.
    /// `classes=3,per_class=100,informative=6,noise=44,redundant=10,sep=4`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SynthSpec::default();
        for pair in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
            let bad = || Error::Config(format!("bad value for {key}: {value:?}"));
            let count = || value.parse::<usize>().map_err(|_| bad());
            let real = || value.parse::<f64>().map_err(|_| bad());
            match key {
                "classes" | "k" => spec.classes = count()?,
                "per_class" | "samples_per_class" => spec.samples_per_class = count()?,
                "informative" => spec.informative_dims = count()?,
                "noise" => spec.noise_dims = count()?,
                "redundant" => spec.redundant_dims = count()?,
                "sep" | "separation" => spec.class_separation = real()?,
                "noise_scale" => spec.noise_scale = real()?,
                "corr" | "center_correlation" => spec.center_correlation = real()?,
                _ => return Err(Error::Config(format!("unknown synthetic spec key {key:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Class centers on the informative block (`classes × informative_dims`).
    /// These are the first draws of the generator stream for `seed`.
    pub fn class_centers(&self, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.draw_centers(&mut rng)
    }

    fn draw_centers(&self, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let q = self.informative_dims;
        let shared = unit_gaussian(rng, q);
        let a = self.center_correlation.sqrt();
        let b = (1.0 - self.center_correlation).sqrt();
        let mut centers = Array2::zeros((self.classes, q));
        for mut row in centers.outer_iter_mut() {
            let own = unit_gaussian(rng, q);
            let mut u = &shared * a + &own * b;
            let norm = u.dot(&u).sqrt();
            u /= norm;
            row.assign(&(u * self.class_separation));
        }
        centers
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, len: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            return v / norm;
        }
    }
}

/// Gaussian blobs: informative columns, then noise columns, then redundant
/// columns (seeded linear mixtures of the informative ones plus jitter).
/// Rows are grouped by class; class tokens are `0..K`.
pub fn synth_blobs(spec: &SynthSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = spec.draw_centers(&mut rng);
    let q = spec.informative_dims;
    let mixing: Array2<f64> = Array2::from_shape_fn((spec.redundant_dims, q), |_| {
        let g: f64 = StandardNormal.sample(&mut rng);
        g / (q as f64).sqrt()
    });

    let n = spec.classes * spec.samples_per_class;
    let d = spec.dim();
    let mut features = Array2::zeros((n, d));
    let mut tokens = Vec::with_capacity(n);
    for class in 0..spec.classes {
        for s in 0..spec.samples_per_class {
            let i = class * spec.samples_per_class + s;
            let mut row = features.row_mut(i);
            for j in 0..q {
                let g: f64 = StandardNormal.sample(&mut rng);
                row[j] = centers[[class, j]] + g;
            }
            for j in q..q + spec.noise_dims {
                let g: f64 = StandardNormal.sample(&mut rng);
                row[j] = spec.noise_scale * g;
            }
            let informative = row.slice(ndarray::s![..q]).to_owned();
            for (t, mix) in mixing.outer_iter().enumerate() {
                let g: f64 = StandardNormal.sample(&mut rng);
                row[q + spec.noise_dims + t] = mix.dot(&informative) + REDUNDANT_JITTER * g;
            }
            tokens.push(class.to_string());
        }
    }
    LabeledDataset::from_tokens(features, &tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn libsvm_fills_missing_indices() {
        let ds = parse_libsvm("1 1:0.5 3:-2\n", Some(3)).unwrap();
        assert_eq!(ds.features().row(0).to_vec(), vec![0.5, 0.0, -2.0]);
        assert_eq!(ds.num_classes(), 1);
    }

    #[test]
    fn libsvm_label_remap_is_sorted() {
        let ds = parse_libsvm("+1 1:1\n-1 1:2\n", None).unwrap();
        assert_eq!(ds.label_map(), &["-1".to_string(), "1".to_string()]);
        assert_eq!(ds.labels(), &[1, 0]);
        assert_eq!(ds.signed_labels().unwrap().to_vec(), vec![1.0, -1.0]);
    }

    #[test]
    fn libsvm_errors_carry_line_numbers() {
        let err = parse_libsvm("1 3:1 2:1\n", None).unwrap_err();
        assert_eq!(err.to_string(), "non-ascending index at line 1");
        let err = parse_libsvm("1 1:1\n\n2 1:x\n", None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_libsvm("1 4:1\n", Some(3)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_libsvm("1 1:1\n1 0:2\n", None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(matches!(
            parse_libsvm("  \n", None),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn libsvm_dimension_uses_expected_when_larger() {
        let ds = parse_libsvm("1 2:1\n", Some(5)).unwrap();
        assert_eq!(ds.d(), 5);
    }

    #[test]
    fn csv_by_name_and_index() {
        let ds = parse_csv(
            "y,a,b\n1,0.5,2\n2,1,3\n",
            &LabelColumn::Name("y".into()),
            true,
        )
        .unwrap();
        assert_eq!((ds.n(), ds.d(), ds.num_classes()), (2, 2, 2));
        assert_eq!(ds.features(), &array![[0.5, 2.0], [1.0, 3.0]]);

        let ds = parse_csv("0,1.0\n", &LabelColumn::Index(0), false).unwrap();
        assert_eq!((ds.n(), ds.d()), (1, 1));

        let ds = parse_csv("a,b,y\n1,2,x\n3,4,z\n", &"y".parse().unwrap(), true).unwrap();
        assert_eq!(ds.features(), &array![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(ds.label_map(), &toks(&["x", "z"]));
    }

    #[test]
    fn csv_errors() {
        let err = parse_csv("1,x\n", &LabelColumn::Index(0), false).unwrap_err();
        assert_eq!(
            err.to_string(),
            "non-numeric feature cell row 1 col 2 at line 1"
        );
        let err = parse_csv("y,a\n1,2\n1,x\n", &LabelColumn::Index(0), true).unwrap_err();
        assert_eq!(
            err.to_string(),
            "non-numeric feature cell row 2 col 2 at line 3"
        );
        let err = parse_csv("1,2\n1,2,3\n", &LabelColumn::Index(0), false).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("ragged row 2"));
        let err = parse_csv("", &LabelColumn::Index(0), false).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        let err = parse_csv("a,b\n1,2\n", &LabelColumn::Name("y".into()), true).unwrap_err();
        assert!(err.to_string().contains("missing label column"));
        let err = parse_csv("1,2\n", &LabelColumn::Index(5), false).unwrap_err();
        assert!(err.to_string().contains("missing label column"));
    }

    #[test]
    fn standardize_examples() {
        let ds = LabeledDataset::from_tokens(array![[1.0, 5.0], [3.0, 5.0]], &toks(&["a", "b"]))
            .unwrap();
        let stats = fit_standardize(&ds);
        assert_eq!(stats.mean, vec![2.0, 5.0]);
        assert_eq!(stats.stddev, vec![1.0, 0.0]);
        let z = apply_standardize(&ds, &stats).unwrap();
        assert_eq!(z.features(), &array![[-1.0, 0.0], [1.0, 0.0]]);

        let id = apply_standardize(&ds, &StandardizationStats::identity(2)).unwrap();
        assert_eq!(id, ds);

        assert!(matches!(
            apply_standardize(&ds, &StandardizationStats::identity(3)),
            Err(Error::Shape(_))
        ));
    }

    fn balanced(n_per: usize, k: usize) -> LabeledDataset {
        let n = n_per * k;
        let x = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        let t: Vec<String> = (0..n).map(|i| (i % k).to_string()).collect();
        LabeledDataset::from_tokens(x, &t).unwrap()
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let ds = balanced(5, 2);
        let a = split(&ds, 4, 7).unwrap();
        assert_eq!(a.train.class_counts(), vec![2, 2]);
        let b = split(&ds, 4, 7).unwrap();
        assert_eq!(a.train_indices, b.train_indices);
        assert_eq!(a.test_indices, b.test_indices);
        assert!(matches!(split(&ds, 1, 7), Err(Error::Config(_))));
        assert!(split(&ds, 10, 7).is_err());
        assert!(split(&ds, 0, 7).is_err());
    }

    #[test]
    fn quota_gives_every_class_a_slot() {
        assert_eq!(stratified_quota(&[98, 1, 1], 3), vec![1, 1, 1]);
        assert_eq!(stratified_quota(&[50, 50], 4), vec![2, 2]);
        assert_eq!(stratified_quota(&[60, 30, 10], 10), vec![6, 3, 1]);
        assert_eq!(stratified_quota(&[1, 9], 9).iter().sum::<usize>(), 9);
    }

    #[test]
    fn synth_shape_and_means() {
        let spec = SynthSpec {
            classes: 2,
            samples_per_class: 50,
            informative_dims: 5,
            noise_dims: 45,
            redundant_dims: 0,
            class_separation: 4.0,
            ..SynthSpec::default()
        };
        let ds = synth_blobs(&spec, 1).unwrap();
        assert_eq!((ds.n(), ds.d()), (100, 50));
        assert_eq!(ds.class_counts(), vec![50, 50]);

        let spec = SynthSpec {
            noise_dims: 0,
            redundant_dims: 0,
            ..spec
        };
        let centers = spec.class_centers(1);
        for j in 0..spec.dim() {
            assert!((centers[[0, j]] - centers[[1, j]]).abs() > 0.0);
        }
        for row in centers.outer_iter() {
            assert!((row.dot(&row).sqrt() - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn synth_spec_parse() {
        let s =
            SynthSpec::parse("classes=3,per_class=10,informative=6,noise=4,redundant=2,sep=3.5")
                .unwrap();
        assert_eq!(s.dim(), 12);
        assert_eq!(s.classes, 3);
        assert!(SynthSpec::parse("bogus=1").is_err());
        assert!(SynthSpec::parse("classes=1").is_err());
    }
}

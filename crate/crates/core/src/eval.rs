//! Downstream evaluation: a quadratic-hinge linear SVM on projected
//! features, the split/fit/classify protocol, cross-validation, parameter
//! sweeps and a few diagnostics.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{apply_standardize, fit_standardize, split, LabeledDataset};
use crate::error::{Error, Result};
use crate::lbfgs::LbfgsConfig;
use crate::numerics::{line_min_sq_hinge, solve_spd_vec, SymMatrix};
use crate::objective::{argmax, Hyperparams, ProjectionModel};
use crate::solver::{fit, init_params, transform, TrainConfig};

/// Environment variable capping the worker threads used by protocol runs.
pub const THREADS_ENV: &str = "MMLDF_THREADS";

const SVM_GRAD_TOL: f64 = 1e-9;
const SVM_MAX_ITERS: usize = 100;

/// One-vs-rest linear classifier. Binary problems keep a single column
/// scoring class 1 against class 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    /// Primal objective after each Newton step, per column.
    pub traces: Vec<Vec<f64>>,
    /// Final gradient infinity norm, per column.
    pub final_grad: Vec<f64>,
}

impl LinearSvm {
    pub fn scores(&self, z: ArrayView2<f64>) -> Array2<f64> {
        z.dot(&self.weights) + &self.bias
    }

    pub fn predict(&self, z: ArrayView2<f64>) -> Vec<usize> {
        let s = self.scores(z);
        if self.weights.ncols() == 1 {
            s.column(0).iter().map(|&v| usize::from(v >= 0.0)).collect()
        } else {
            s.outer_iter().map(argmax).collect()
        }
    }
}

fn svm_value(z: ArrayView2<f64>, y: &[f64], w: &Array1<f64>, b: f64, c: f64) -> f64 {
    let out = z.dot(w);
    let loss: f64 = y
        .iter()
        .zip(out.iter())
        .map(|(&yi, &o)| (1.0 - yi * (o + b)).max(0.0).powi(2))
        .sum();
    0.5 * w.dot(w) + c * loss
}

fn svm_grad(z: ArrayView2<f64>, y: &[f64], w: &Array1<f64>, b: f64, c: f64) -> (Array1<f64>, f64) {
    let out = z.dot(w);
    let mut gw = w.clone();
    let mut gb = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let slack = 1.0 - yi * (out[i] + b);
        if slack > 0.0 {
            let coef = -2.0 * c * slack * yi;
            gw.scaled_add(coef, &z.row(i));
            gb += coef;
        }
    }
    (gw, gb)
}

/// Finite-Newton solve of one binary quadratic-hinge problem, `y ∈ {±1}`.
fn train_binary(
    z: ArrayView2<f64>,
    y: &[f64],
    c: f64,
) -> Result<(Array1<f64>, f64, Vec<f64>, f64)> {
    let r = z.ncols();
    let mut w = Array1::<f64>::zeros(r);
    let mut b = 0.0;
    let mut trace = vec![svm_value(z, y, &w, b, c)];
    let grad_norm = |gw: &Array1<f64>, gb: f64| gw.iter().fold(gb.abs(), |m, v| m.max(v.abs()));
    let (mut gw, mut gb) = svm_grad(z, y, &w, b, c);
    for _ in 0..SVM_MAX_ITERS {
        if grad_norm(&gw, gb) <= SVM_GRAD_TOL {
            break;
        }
        let out = z.dot(&w);
        let active: Vec<usize> = (0..y.len())
            .filter(|&i| 1.0 - y[i] * (out[i] + b) > 0.0)
            .collect();
        let (dw, db) = if active.is_empty() {
            (-&w, 0.0)
        } else {
            // Newton system on the active set, with y² = 1 folded in
            let mut h = Array2::<f64>::zeros((r + 1, r + 1));
            let mut rhs = Array1::<f64>::zeros(r + 1);
            for a in 0..r {
                h[[a, a]] = 1.0;
            }
            for &i in &active {
                let zi = z.row(i);
                for a in 0..r {
                    for bb in 0..r {
                        h[[a, bb]] += 2.0 * c * zi[a] * zi[bb];
                    }
                    h[[a, r]] += 2.0 * c * zi[a];
                    h[[r, a]] += 2.0 * c * zi[a];
                    rhs[a] += 2.0 * c * y[i] * zi[a];
                }
                h[[r, r]] += 2.0 * c;
                rhs[r] += 2.0 * c * y[i];
            }
            let target = solve_spd_vec(&SymMatrix::new(h)?, &rhs)?;
            let tw = target.slice(ndarray::s![..r]).to_owned();
            (&tw - &w, target[r] - b)
        };
        let slack: Vec<f64> = (0..y.len()).map(|i| 1.0 - y[i] * (out[i] + b)).collect();
        let dz = z.dot(&dw);
        let rate: Vec<f64> = (0..y.len()).map(|i| y[i] * (dz[i] + db)).collect();
        let alpha = line_min_sq_hinge(dw.dot(&dw), w.dot(&dw), c, &slack, &rate);
        let next_w = &w + &(&dw * alpha);
        let next_b = b + alpha * db;
        let value = svm_value(z, y, &next_w, next_b, c);
        if value > *trace.last().expect("nonempty") {
            break;
        }
        w = next_w;
        b = next_b;
        trace.push(value);
        (gw, gb) = svm_grad(z, y, &w, b, c);
    }
    let g = grad_norm(&gw, gb);
    if !g.is_finite() {
        return Err(Error::Numerical("linear SVM diverged".into()));
    }
    Ok((w, b, trace, g))
}

/// Linear SVM with the squared hinge `C Σ max(0, 1 - y(wᵀz + b))²` and an
/// unregularized bias, one-vs-rest when there are more than two classes.
pub fn train_linear_svm(z: ArrayView2<f64>, labels: &[usize], c: f64) -> Result<LinearSvm> {
    if z.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} rows but {} labels",
            z.nrows(),
            labels.len()
        )));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("SVM C must be positive, got {c}")));
    }
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let present = (0..k).filter(|c| labels.contains(c)).count();
    if present < 2 {
        return Err(Error::Config(
            "SVM training needs at least two classes".into(),
        ));
    }
    let tasks: Vec<usize> = if k == 2 { vec![1] } else { (0..k).collect() };
    let mut svm = LinearSvm {
        weights: Array2::zeros((z.ncols(), tasks.len())),
        bias: Array1::zeros(tasks.len()),
        traces: Vec::new(),
        final_grad: Vec::new(),
    };
    for (col, &positive) in tasks.iter().enumerate() {
        let y: Vec<f64> = labels
            .iter()
            .map(|&l| if l == positive { 1.0 } else { -1.0 })
            .collect();
        let (w, b, trace, g) = train_binary(z, &y, c)?;
        svm.weights.column_mut(col).assign(&w);
        svm.bias[col] = b;
        svm.traces.push(trace);
        svm.final_grad.push(g);
    }
    Ok(svm)
}

/// Percentage of matching entries.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Shape("accuracy of an empty set".into()));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Which regularizers stay active. `Random` skips learning altogether and
/// uses the seeded initial projection, as a baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoRho,
    NoEtaNoRho,
    Mmpp,
    Random,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoRho,
        Variant::NoEtaNoRho,
        Variant::Mmpp,
        Variant::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRho => "no_rho",
            Variant::NoEtaNoRho => "no_eta_no_rho",
            Variant::Mmpp => "mmpp",
            Variant::Random => "random",
        }
    }

    /// Zeroes the hyperparameters this variant switches off.
    pub fn apply(self, hp: &Hyperparams) -> Hyperparams {
        let mut out = *hp;
        match self {
            Variant::Full | Variant::Random => {}
            Variant::NoRho => out.rho = 0.0,
            Variant::NoEtaNoRho => {
                out.eta = 0.0;
                out.rho = 0.0;
            }
            Variant::Mmpp => {
                out.eta = 0.0;
                out.rho = 0.0;
                out.lambda = 0.0;
            }
        }
        out
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Hyperparameter that a sensitivity sweep overrides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    C,
    Lambda,
    Eta,
    Rho,
}

impl SweepParam {
    pub fn set(self, hp: &mut Hyperparams, value: f64) {
        match self {
            SweepParam::C => hp.c = value,
            SweepParam::Lambda => hp.lambda = value,
            SweepParam::Eta => hp.eta = value,
            SweepParam::Rho => hp.rho = value,
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "c" => Ok(SweepParam::C),
            "lambda" => Ok(SweepParam::Lambda),
            "eta" => Ok(SweepParam::Eta),
            "rho" => Ok(SweepParam::Rho),
            _ => Err(Error::Config(format!("unknown sweep parameter {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvGrid {
    pub c: Vec<f64>,
    pub eta: Vec<f64>,
    pub rho: Vec<f64>,
}

impl Default for CvGrid {
    fn default() -> Self {
        let decades: Vec<f64> = (-5..=1).map(|e| 10f64.powi(e)).collect();
        Self {
            c: decades.clone(),
            eta: decades.clone(),
            rho: decades,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub dims: Vec<usize>,
    pub trials: usize,
    pub train_count: usize,
    pub seed: u64,
    pub svm_c: f64,
    pub cv_grid: CvGrid,
    /// Pick `(C, η, ρ)` by cross-validation on each training split.
    pub cross_validate: bool,
    /// z-score features with training-split statistics.
    pub standardize: bool,
    /// Center projected features and divide by one global scale (training
    /// statistics) before the SVM, so its fixed `C` does not depend on the
    /// overall size of `P`.
    pub rescale_projected: bool,
    pub cv_folds: usize,
    pub train: TrainConfig,
    pub lbfgs: LbfgsConfig,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            dims: (1..=10).map(|k| 10 * k).collect(),
            trials: 10,
            train_count: 100,
            seed: 0,
            svm_c: 1.0,
            cv_grid: CvGrid::default(),
            cross_validate: false,
            standardize: true,
            rescale_projected: true,
            cv_folds: 3,
            train: TrainConfig::default(),
            lbfgs: LbfgsConfig::default(),
        }
    }
}

impl ProtocolSpec {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.dims.is_empty() {
            return Err(Error::Config("no reduced dimensions given".into()));
        }
        if let Some(&bad) = self.dims.iter().find(|&&r| r == 0 || r >= d) {
            return Err(Error::Config(format!("r must be < d (r = {bad}, d = {d})")));
        }
        if !(self.svm_c > 0.0) {
            return Err(Error::Config("svm_c must be positive".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config(
                "cross-validation needs at least 2 folds".into(),
            ));
        }
        if self.cross_validate
            && (self.cv_grid.c.is_empty()
                || self.cv_grid.eta.is_empty()
                || self.cv_grid.rho.is_empty())
        {
            return Err(Error::Config("cross-validation grid is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub variant: Variant,
    pub dim: usize,
    pub param_value: Option<f64>,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub trials: usize,
    pub seed: u64,
    /// Per-trial test accuracies in trial order.
    pub per_trial: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub rows: Vec<AccuracyRow>,
    pub spec: ProtocolSpec,
    pub hyperparams: Hyperparams,
    pub sweep_param: Option<SweepParam>,
    /// The downstream classifier uses the squared hinge, not the standard hinge.
    pub classifier: String,
}

impl AccuracyTable {
    pub const CSV_HEADER: [&'static str; 7] = [
        "variant",
        "dim",
        "param_value",
        "mean_acc",
        "std_acc",
        "trials",
        "seed",
    ];

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Csv(e.to_string());
        w.write_record(Self::CSV_HEADER).map_err(io)?;
        for row in &self.rows {
            w.write_record([
                row.variant.name().to_string(),
                row.dim.to_string(),
                row.param_value
                    .map(|v| format!("{v:?}"))
                    .unwrap_or_default(),
                format!("{:?}", row.mean_acc),
                format!("{:?}", row.std_acc),
                row.trials.to_string(),
                row.seed.to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn row(&self, variant: Variant, dim: usize) -> Option<&AccuracyRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.dim == dim)
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mixes tags into a base seed (splitmix64 finalizer per step).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut x = base;
    for &t in tags {
        x = x
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(t.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

/// Runs `f` inside a pool capped by `MMLDF_THREADS` when that is set.
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Learns (or, for the random baseline, draws) a projection of width `r`
/// on `train`, then scores an SVM on `test` in the projected space.
fn fit_and_score(
    train: &LabeledDataset,
    test: &LabeledDataset,
    hp: &Hyperparams,
    variant: Variant,
    r: usize,
    fit_seed: u64,
    spec: &ProtocolSpec,
) -> Result<f64> {
    let hp = Hyperparams {
        dim: r,
        ..variant.apply(hp)
    };
    let proj: ProjectionModel = match variant {
        Variant::Random => init_params(train.d(), r, train.num_classes(), fit_seed)?.0,
        _ => {
            let cfg = TrainConfig {
                seed: fit_seed,
                ..spec.train
            };
            fit(train, &hp, &cfg, &spec.lbfgs)?.projection
        }
    };
    let z_train = transform(&proj, train.features().view())?;
    let z_test = transform(&proj, test.features().view())?;
    score_projected(
        z_train,
        train.labels(),
        z_test,
        test.labels(),
        spec.svm_c,
        spec.rescale_projected,
    )
}

/// Test accuracy of a linear SVM trained on already projected features,
/// optionally after [`isotropic_scale`] with training statistics.
pub fn score_projected(
    mut z_train: Array2<f64>,
    train_labels: &[usize],
    mut z_test: Array2<f64>,
    test_labels: &[usize],
    svm_c: f64,
    rescale: bool,
) -> Result<f64> {
    if rescale {
        let (center, scale) = isotropic_scale(z_train.view());
        for z in [&mut z_train, &mut z_test] {
            *z -= &center;
            *z /= scale;
        }
    }
    let svm = train_linear_svm(z_train.view(), train_labels, svm_c)?;
    accuracy(&svm.predict(z_test.view()), test_labels)
}

/// Training mean and one global scale, the RMS distance to that mean per
/// coordinate; 1 when the spread vanishes.
pub fn isotropic_scale(z: ArrayView2<f64>) -> (Array1<f64>, f64) {
    let center = z
        .mean_axis(ndarray::Axis(0))
        .unwrap_or_else(|| Array1::zeros(z.ncols()));
    let spread: f64 = z
        .outer_iter()
        .map(|row| (&row - &center).mapv(|v| v * v).sum())
        .sum();
    let rms = (spread / (z.nrows() * z.ncols()).max(1) as f64).sqrt();
    (
        center,
        if rms > 0.0 && rms.is_finite() {
            rms
        } else {
            1.0
        },
    )
}

fn check_disjoint(train: &[usize], test: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in train.iter().chain(test) {
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Config(format!(
                "sample {i} appears on both sides of a split"
            )));
        }
    }
    Ok(())
}

/// One cell of the protocol: split, standardize on train, optionally
/// cross-validate, fit, classify.
fn run_cell(
    ds: &LabeledDataset,
    hp: &Hyperparams,
    spec: &ProtocolSpec,
    variant: Variant,
    r: usize,
    trial: usize,
) -> Result<f64> {
    let parts = split(
        ds,
        spec.train_count,
        derive_seed(spec.seed, &[trial as u64]),
    )?;
    check_disjoint(&parts.train_indices, &parts.test_indices, ds.n())?;
    let (train, test) = if spec.standardize {
        let stats = fit_standardize(&parts.train);
        (
            apply_standardize(&parts.train, &stats)?,
            apply_standardize(&parts.test, &stats)?,
        )
    } else {
        (parts.train, parts.test)
    };
    let fit_seed = derive_seed(spec.seed, &[trial as u64, r as u64, 1]);
    let hp = if spec.cross_validate && variant != Variant::Random {
        let cv_spec = ProtocolSpec {
            seed: fit_seed,
            ..spec.clone()
        };
        let best = cross_validate(&train, &Hyperparams { dim: r, ..*hp }, &cv_spec, variant)?;
        Hyperparams {
            c: best.c,
            eta: best.eta,
            rho: best.rho,
            ..*hp
        }
    } else {
        *hp
    };
    fit_and_score(&train, &test, &hp, variant, r, fit_seed, spec)
}

fn protocol_rows(
    ds: &LabeledDataset,
    hp: &Hyperparams,
    spec: &ProtocolSpec,
    variant: Variant,
    param_value: Option<f64>,
) -> Result<Vec<AccuracyRow>> {
    spec.validate(ds.d())?;
    let cells: Vec<(usize, usize)> = spec
        .dims
        .iter()
        .flat_map(|&r| (0..spec.trials).map(move |t| (r, t)))
        .collect();
    let results: Vec<f64> = with_thread_cap(|| {
        cells
            .par_iter()
            .map(|&(r, t)| run_cell(ds, hp, spec, variant, r, t))
            .collect::<Result<Vec<f64>>>()
    })??;
    let mut rows = Vec::with_capacity(spec.dims.len());
    for (i, &r) in spec.dims.iter().enumerate() {
        let accs = results[i * spec.trials..(i + 1) * spec.trials].to_vec();
        let (mean_acc, std_acc) = mean_std(&accs);
        rows.push(AccuracyRow {
            variant,
            dim: r,
            param_value,
            mean_acc,
            std_acc,
            trials: spec.trials,
            seed: spec.seed,
            per_trial: accs,
        });
    }
    Ok(rows)
}

/// Accuracy per reduced dimension, averaged over seeded trials.
pub fn run_protocol(
    ds: &LabeledDataset,
    hp: &Hyperparams,
    spec: &ProtocolSpec,
    variant: Variant,
) -> Result<AccuracyTable> {
    Ok(AccuracyTable {
        rows: protocol_rows(ds, hp, spec, variant, None)?,
        spec: spec.clone(),
        hyperparams: variant.apply(hp),
        sweep_param: None,
        classifier: "linear SVM, squared hinge".into(),
    })
}

/// [`run_protocol`] once per value of `param`, all else fixed.
pub fn sensitivity_sweep(
    ds: &LabeledDataset,
    hp: &Hyperparams,
    spec: &ProtocolSpec,
    variant: Variant,
    param: SweepParam,
    values: &[f64],
) -> Result<AccuracyTable> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut rows = Vec::new();
    for &v in values {
        let mut swept = *hp;
        param.set(&mut swept, v);
        rows.extend(protocol_rows(ds, &swept, spec, variant, Some(v))?);
    }
    Ok(AccuracyTable {
        rows,
        spec: spec.clone(),
        hyperparams: variant.apply(hp),
        sweep_param: Some(param),
        classifier: "linear SVM, squared hinge".into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvChoice {
    pub c: f64,
    pub eta: f64,
    pub rho: f64,
    pub mean_acc: f64,
    pub folds_used: usize,
}

/// Seeded stratified fold assignment: each class is shuffled and dealt
/// round-robin.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let mut fold_of = vec![0; labels.len()];
    for class in 0..k {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for (pos, i) in members.into_iter().enumerate() {
            fold_of[i] = pos % folds;
        }
    }
    fold_of
}

/// Picks `(C, η, ρ)` by stratified k-fold accuracy on `train`. Grid axes
/// that `variant` zeroes are collapsed. Ties go to the lexicographically
/// smallest point; folds whose training part lacks a class are skipped.
pub fn cross_validate(
    train: &LabeledDataset,
    hp: &Hyperparams,
    spec: &ProtocolSpec,
    variant: Variant,
) -> Result<CvChoice> {
    let zeroed = variant.apply(&Hyperparams {
        eta: 1.0,
        rho: 1.0,
        ..*hp
    });
    let axis = |values: &[f64], keep: bool| -> Vec<f64> {
        let mut v: Vec<f64> = if keep { values.to_vec() } else { vec![0.0] };
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let cs = axis(&spec.cv_grid.c, true);
    let etas = axis(&spec.cv_grid.eta, zeroed.eta != 0.0);
    let rhos = axis(&spec.cv_grid.rho, zeroed.rho != 0.0);
    if cs.is_empty() || etas.is_empty() || rhos.is_empty() {
        return Err(Error::Config("cross-validation grid is empty".into()));
    }
    let mut grid = Vec::with_capacity(cs.len() * etas.len() * rhos.len());
    for &c in &cs {
        for &e in &etas {
            for &r in &rhos {
                grid.push((c, e, r));
            }
        }
    }

    let fold_of = stratified_folds(train.labels(), spec.cv_folds, spec.seed);
    let k = train.num_classes();
    let mut folds = Vec::new();
    for f in 0..spec.cv_folds {
        let tr: Vec<usize> = (0..train.n()).filter(|&i| fold_of[i] != f).collect();
        let va: Vec<usize> = (0..train.n()).filter(|&i| fold_of[i] == f).collect();
        let fold_train = train.subset(&tr);
        let classes_present = fold_train.class_counts().iter().filter(|&&c| c > 0).count();
        if va.is_empty() || classes_present < k || hp.dim >= train.d() {
            continue;
        }
        folds.push((fold_train, train.subset(&va)));
    }
    if folds.is_empty() {
        return Err(Error::Config(
            "every cross-validation fold lacks a class".into(),
        ));
    }

    let scores: Vec<Result<f64>> = grid
        .par_iter()
        .map(|&(c, eta, rho)| {
            let point = Hyperparams { c, eta, rho, ..*hp };
            let mut total = 0.0;
            for (f, (tr, va)) in folds.iter().enumerate() {
                let seed = derive_seed(spec.seed, &[f as u64]);
                total += fit_and_score(tr, va, &point, variant, hp.dim, seed, spec)?;
            }
            Ok(total / folds.len() as f64)
        })
        .collect();
    let mut best: Option<CvChoice> = None;
    for (&(c, eta, rho), score) in grid.iter().zip(scores) {
        let mean_acc = score?;
        if best.is_none_or(|b| mean_acc > b.mean_acc) {
            best = Some(CvChoice {
                c,
                eta,
                rho,
                mean_acc,
                folds_used: folds.len(),
            });
        }
    }
    Ok(best.expect("grid is nonempty"))
}

/// Row norms `‖p_i‖₂` of a projection.
pub fn row_norm_profile(p: ArrayView2<f64>) -> Array1<f64> {
    p.outer_iter().map(|row| row.dot(&row).sqrt()).collect()
}

/// Number of rows whose norm is below `threshold`.
pub fn count_small_rows(p: ArrayView2<f64>, threshold: f64) -> usize {
    row_norm_profile(p)
        .iter()
        .filter(|&&v| v < threshold)
        .count()
}

/// Correlation coefficients `Ω_jk / sqrt(Ω_jj Ω_kk)`.
pub fn correlation_matrix(omega: &SymMatrix) -> Result<Array2<f64>> {
    let m = omega.as_array();
    let diag: Vec<f64> = (0..m.nrows()).map(|i| m[[i, i]]).collect();
    if let Some(i) = diag.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Numerical(format!(
            "diagonal entry {i} of the covariance is not positive"
        )));
    }
    Ok(Array2::from_shape_fn(m.dim(), |(j, k)| {
        if j == k {
            1.0
        } else {
            (m[[j, k]] / (diag[j] * diag[k]).sqrt()).clamp(-1.0, 1.0)
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_blobs, SynthSpec};
    use ndarray::array;

    #[test]
    fn one_dimensional_points() {
        let z = array![[-1.0], [1.0]];
        let svm = train_linear_svm(z.view(), &[0, 1], 1.0).unwrap();
        assert_eq!(svm.predict(z.view()), vec![0, 1]);
        assert!(svm.final_grad[0] <= 1e-6);
    }

    #[test]
    fn svm_trace_and_gradient() {
        let spec = SynthSpec {
            classes: 3,
            samples_per_class: 30,
            informative_dims: 3,
            noise_dims: 4,
            class_separation: 10.0,
            ..SynthSpec::default()
        };
        let ds = synth_blobs(&spec, 2).unwrap();
        let svm = train_linear_svm(ds.features().view(), ds.labels(), 1.0).unwrap();
        for (trace, g) in svm.traces.iter().zip(&svm.final_grad) {
            assert!(trace.windows(2).all(|w| w[1] <= w[0]));
            assert!(*g <= 1e-6, "gradient {g}");
        }
        let acc = accuracy(&svm.predict(ds.features().view()), ds.labels()).unwrap();
        assert_eq!(acc, 100.0);
    }

    #[test]
    fn duplicated_rows_match_doubled_c() {
        let spec = SynthSpec {
            samples_per_class: 20,
            informative_dims: 2,
            noise_dims: 3,
            class_separation: 1.5,
            ..SynthSpec::default()
        };
        let ds = synth_blobs(&spec, 7).unwrap();
        let twice = ndarray::concatenate(
            ndarray::Axis(0),
            &[ds.features().view(), ds.features().view()],
        )
        .unwrap();
        let labels2: Vec<usize> = ds.labels().iter().chain(ds.labels()).copied().collect();
        let a = train_linear_svm(twice.view(), &labels2, 0.5).unwrap();
        let b = train_linear_svm(ds.features().view(), ds.labels(), 1.0).unwrap();
        assert_eq!(
            a.predict(ds.features().view()),
            b.predict(ds.features().view())
        );
        assert!((&a.weights - &b.weights).iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn svm_rejects_single_class() {
        assert!(train_linear_svm(array![[1.0], [2.0]].view(), &[1, 1], 1.0).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 100.0);
        assert_eq!(accuracy(&[0, 1], &[0, 0]).unwrap(), 50.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn correlation_examples() {
        let c = correlation_matrix(&SymMatrix::identity(3).scaled(1.0 / 3.0)).unwrap();
        assert_eq!(c, Array2::<f64>::eye(3));
        let om = SymMatrix::new(array![[2.0, 1.0], [1.0, 2.0]] / 6.0).unwrap();
        let c = correlation_matrix(&om).unwrap();
        assert!((c[[0, 1]] - 0.5).abs() < 1e-15 && c[[1, 0]] == c[[0, 1]]);
        assert!(
            correlation_matrix(&SymMatrix::new(array![[0.0, 0.0], [0.0, 1.0]]).unwrap()).is_err()
        );
    }

    #[test]
    fn row_norms() {
        assert_eq!(
            row_norm_profile(Array2::<f64>::eye(2).view()),
            array![1.0, 1.0]
        );
        assert_eq!(
            row_norm_profile(array![[3.0, 4.0], [0.0, 0.0]].view()),
            array![5.0, 0.0]
        );
    }

    #[test]
    fn variants_zero_the_right_terms() {
        let hp = Hyperparams {
            c: 1.0,
            eta: 2.0,
            lambda: 3.0,
            rho: 4.0,
            ..Hyperparams::default()
        };
        let m = Variant::Mmpp.apply(&hp);
        assert_eq!((m.eta, m.lambda, m.rho), (0.0, 0.0, 0.0));
        let i = Variant::NoEtaNoRho.apply(&hp);
        assert_eq!((i.eta, i.lambda, i.rho), (0.0, 3.0, 0.0));
        let ii = Variant::NoRho.apply(&hp);
        assert_eq!((ii.eta, ii.lambda, ii.rho), (2.0, 3.0, 0.0));
        assert_eq!(Variant::Full.apply(&hp), hp);
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn mean_std_single_trial() {
        assert_eq!(mean_std(&[70.0]), (70.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn folds_are_stratified() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let f = stratified_folds(&labels, 3, 9);
        for fold in 0..3 {
            for class in 0..3 {
                assert_eq!(
                    (0..30)
                        .filter(|&i| f[i] == fold && labels[i] == class)
                        .count(),
                    10 / 3 + usize::from(fold < 10 % 3)
                );
            }
        }
    }
}

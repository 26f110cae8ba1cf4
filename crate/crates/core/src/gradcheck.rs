//! Finite-difference check of the analytic `∂J/∂P`.

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::graph::build_partition;
use crate::objective::{binary_value_and_grad, multi_value_and_grad, Hyperparams};
use crate::solver::update_omega;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckSpec {
    pub n: usize,
    pub d: usize,
    pub r: usize,
    /// Class count of the multi-class instance; the binary one always has 2.
    pub classes: usize,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    pub eps_smooth: f64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        Self {
            n: 20,
            d: 12,
            r: 4,
            classes: 4,
            seed: 0,
            step: 1e-5,
            eps_smooth: 1e-10,
        }
    }
}

impl GradcheckSpec {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.r >= self.d {
            return Err(Error::Config(format!(
                "r must be < d (r = {}, d = {})",
                self.r, self.d
            )));
        }
        if self.classes < 3 {
            return Err(Error::Config(format!(
                "multi-class check needs at least 3 classes, got {}",
                self.classes
            )));
        }
        if self.n < self.classes {
            return Err(Error::Config(format!(
                "n = {} cannot cover {} classes",
                self.n, self.classes
            )));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config("step must be > 0".into()));
        }
        if !(self.eps_smooth > 0.0 && self.eps_smooth.is_finite()) {
            return Err(Error::Config("eps_smooth must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub binary: f64,
    pub multiclass: f64,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.binary.max(self.multiclass)
    }
}

/// `max_i |a_i - f_i| / max(1, ‖a‖∞)`: absolute error for small gradients,
/// relative to the largest component otherwise.
pub fn relative_error(analytic: ArrayView2<f64>, numeric: ArrayView2<f64>) -> f64 {
    let scale = analytic.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, f)| (a - f).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Central differences of `f` over every entry of `p`.
pub fn numeric_gradient<F>(p: &Array2<f64>, step: f64, mut f: F) -> Result<Array2<f64>>
where
    F: FnMut(ArrayView2<f64>) -> Result<f64>,
{
    let mut probe = p.clone();
    let mut out = Array2::zeros(p.raw_dim());
    for idx in ndarray::indices(p.raw_dim()) {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let up = f(probe.view())?;
        probe[idx] = orig - step;
        let down = f(probe.view())?;
        probe[idx] = orig;
        out[idx] = (up - down) / (2.0 * step);
    }
    Ok(out)
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    })
}

/// Random dataset with every class present: labels cycle through the classes.
fn random_dataset(rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize) -> Result<LabeledDataset> {
    let x = normal_matrix(rng, n, d, 1.0);
    let labels = (0..n).map(|i| i % k).collect();
    LabeledDataset::from_indices(x, labels, (0..k).map(|c| c.to_string()).collect())
}

fn check_hp(spec: &GradcheckSpec) -> Hyperparams {
    Hyperparams {
        c: 1.0,
        eta: 0.1,
        lambda: 0.1,
        rho: 0.1,
        dim: spec.r,
        eps_smooth: spec.eps_smooth,
        omega_ridge: 1e-8,
    }
}

pub fn check_binary(spec: &GradcheckSpec) -> Result<f64> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ds = random_dataset(&mut rng, spec.n, spec.d, 2)?;
    let part = build_partition(ds.labels());
    let hp = check_hp(spec);
    let p = normal_matrix(&mut rng, spec.d, spec.r, 1.0 / (spec.d as f64).sqrt());
    let w: Array1<f64> = normal_matrix(&mut rng, spec.r, 1, 1.0).column(0).to_owned();
    let b = 0.1;
    let (_, grad) = binary_value_and_grad(&ds, p.view(), w.view(), b, &hp, &part, true)?;
    let grad = grad.expect("gradient requested");
    let fd = numeric_gradient(&p, spec.step, |q| {
        Ok(binary_value_and_grad(&ds, q, w.view(), b, &hp, &part, false)?.0)
    })?;
    Ok(relative_error(grad.view(), fd.view()))
}

pub fn check_multiclass(spec: &GradcheckSpec) -> Result<f64> {
    spec.validate()?;
    let k = spec.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let ds = random_dataset(&mut rng, spec.n, spec.d, k)?;
    let part = build_partition(ds.labels());
    let hp = check_hp(spec);
    let p = normal_matrix(&mut rng, spec.d, spec.r, 1.0 / (spec.d as f64).sqrt());
    let weights = normal_matrix(&mut rng, spec.r, k, 1.0);
    let bias = normal_matrix(&mut rng, k, 1, 0.1).column(0).to_owned();
    let omega = update_omega(weights.view(), hp.omega_ridge)?;
    let value_grad = |q: ArrayView2<f64>, want: bool| {
        multi_value_and_grad(
            &ds,
            q,
            weights.view(),
            bias.view(),
            Some(&omega),
            &hp,
            &part,
            want,
        )
    };
    let grad = value_grad(p.view(), true)?.1.expect("gradient requested");
    let fd = numeric_gradient(&p, spec.step, |q| Ok(value_grad(q, false)?.0))?;
    Ok(relative_error(grad.view(), fd.view()))
}

pub fn run(spec: &GradcheckSpec) -> Result<GradcheckReport> {
    Ok(GradcheckReport {
        binary: check_binary(spec)?,
        multiclass: check_multiclass(spec)?,
    })
}

//! Objectives and gradients of the joint projection / max-margin problem.
//!
//! Binary (`K = 2`, targets `y_i = ±1`):
//!
//! ```text
//! J = ½‖w‖² + C Σ_i [min(0, y_i(wᵀPᵀx_i + b) - 1)]² + η tr(PᵀXLXᵀP) + λ Σ_k sqrt(‖p_k‖² + ε)
//! ```
//!
//! Multi-class (`K ≥ 3`), with `s_m(i) = w_mᵀPᵀx_i + b_m`:
//!
//! ```text
//! J = ½ Σ_m ‖w_m‖² + C Σ_i Σ_{m≠y_i} [min(0, s_{y_i}(i) - s_m(i) - 2)]²
//!     + η tr(PᵀXLXᵀP) + λ Σ_k sqrt(‖p_k‖² + ε) + ρ tr(W (Ω + δI)⁻¹ Wᵀ)
//! ```
//!
//! The scatter term is `tr(ZᵀLZ)`, half the ordered-pair sum of squared
//! same-class distances; with it `2η·XLXᵀP` is exactly its gradient.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::graph::{self, ClassPartition};
use crate::numerics::{psd_inv, SymMatrix};

pub const MARGIN_BINARY: f64 = 1.0;
pub const MARGIN_MULTI: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Hinge-loss trade-off.
    pub c: f64,
    /// Within-class scatter trade-off.
    pub eta: f64,
    /// Row-sparsity (`l2,1`) trade-off.
    pub lambda: f64,
    /// Task-correlation trade-off (three or more classes only).
    pub rho: f64,
    /// Target dimension `r`.
    pub dim: usize,
    /// Row-norm smoothing `ε` in `sqrt(‖p_k‖² + ε)`.
    pub eps_smooth: f64,
    /// Ridge `δ` added to the task covariance before inversion.
    pub omega_ridge: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            c: 1.0,
            eta: 1e-2,
            lambda: 1e-4,
            rho: 1e-2,
            dim: 10,
            eps_smooth: 1e-10,
            omega_ridge: 1e-8,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self, d: usize) -> Result<()> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::Config(format!("C must be > 0, got {}", self.c)));
        }
        if !(nonneg(self.eta)
            && nonneg(self.lambda)
            && nonneg(self.rho)
            && nonneg(self.omega_ridge))
        {
            return Err(Error::Config(
                "eta, lambda, rho and omega_ridge must be >= 0".into(),
            ));
        }
        if !(self.eps_smooth.is_finite() && self.eps_smooth > 0.0) {
            return Err(Error::Config("eps_smooth must be > 0".into()));
        }
        if self.dim == 0 || self.dim >= d {
            return Err(Error::Config(format!(
                "r must be < d (r = {}, d = {d})",
                self.dim
            )));
        }
        Ok(())
    }
}

/// The learned `d × r` projection; features map to `z = Pᵀx`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    p: Array2<f64>,
}

impl ProjectionModel {
    pub fn new(p: Array2<f64>) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("projection has non-finite entries".into()));
        }
        Ok(Self { p })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.p
    }

    pub fn d(&self) -> usize {
        self.p.nrows()
    }

    pub fn r(&self) -> usize {
        self.p.ncols()
    }
}

/// Classifier parameters in the projected space.
///
/// `weights` is `r × T` with one column per task: `T = 1` for a binary
/// problem, `T = K` otherwise. `omega` is the unit-trace task covariance,
/// present only for multi-class models.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginModel {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub omega: Option<SymMatrix>,
}

impl MarginModel {
    pub fn binary(w: Array1<f64>, b: f64) -> Self {
        let r = w.len();
        Self {
            weights: w.into_shape_with_order((r, 1)).expect("column"),
            bias: Array1::from_elem(1, b),
            omega: None,
        }
    }

    pub fn is_binary(&self) -> bool {
        self.omega.is_none() && self.weights.ncols() == 1
    }

    /// Binary weight vector (first column).
    pub fn w(&self) -> ArrayView1<'_, f64> {
        self.weights.column(0)
    }

    pub fn b(&self) -> f64 {
        self.bias[0]
    }

    /// Scores of projected samples: `n × T`.
    pub fn scores(&self, z: ArrayView2<f64>) -> Array2<f64> {
        z.dot(&self.weights) + &self.bias
    }

    /// Class predictions for projected samples.
    pub fn predict(&self, z: ArrayView2<f64>) -> Vec<usize> {
        let s = self.scores(z);
        if self.weights.ncols() == 1 {
            s.column(0).iter().map(|&v| usize::from(v >= 0.0)).collect()
        } else {
            s.outer_iter().map(|row| argmax(row)).collect()
        }
    }
}

pub(crate) fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Diagonal of the smoothed row-reweighting matrix:
/// `1 / (2·sqrt(‖p_k‖² + ε))`.
pub fn row_weights(p: ArrayView2<f64>, eps_smooth: f64) -> Array1<f64> {
    p.outer_iter()
        .map(|row| 0.5 / (row.dot(&row) + eps_smooth).sqrt())
        .collect()
}

/// `Σ_k sqrt(‖p_k‖² + ε)`; `ε = 0` gives the exact `l2,1` norm.
pub fn l21_smoothed(p: ArrayView2<f64>, eps_smooth: f64) -> f64 {
    p.outer_iter()
        .map(|row| (row.dot(&row) + eps_smooth).sqrt())
        .sum()
}

/// Gradient of [`l21_smoothed`]: `2·D_P·P`.
pub fn l21_gradient(p: ArrayView2<f64>, eps_smooth: f64) -> Array2<f64> {
    let d = row_weights(p, eps_smooth);
    &p * &(d * 2.0).insert_axis(Axis(1))
}

/// Quadratic hinge `[min(0, y·score - 1)]²`.
pub fn hinge_binary(score: f64, y: f64) -> f64 {
    let v = (y * score - MARGIN_BINARY).min(0.0);
    v * v
}

/// Samples with `y_i(wᵀz_i + b) - 1 ≤ 0`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActiveSetBinary(pub Vec<usize>);

/// Pairs `(i, m)`, `m ≠ y_i`, with `s_{y_i}(i) - s_m(i) - 2 < 0`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActiveSetMulti(pub Vec<(usize, usize)>);

fn check_projection(ds: &LabeledDataset, p: ArrayView2<f64>) -> Result<()> {
    if p.nrows() != ds.d() {
        return Err(Error::Shape(format!(
            "projection has {} rows, data has {} features",
            p.nrows(),
            ds.d()
        )));
    }
    Ok(())
}

fn check_weights(p: ArrayView2<f64>, w_len: usize) -> Result<()> {
    if w_len != p.ncols() {
        return Err(Error::Shape(format!(
            "weights of length {w_len} for a projection with {} columns",
            p.ncols()
        )));
    }
    Ok(())
}

fn require_multi(ds: &LabeledDataset) -> Result<()> {
    if ds.num_classes() < 3 {
        return Err(Error::Config(format!(
            "multi-class objective needs K >= 3, got {}",
            ds.num_classes()
        )));
    }
    Ok(())
}

pub fn active_set_binary(
    ds: &LabeledDataset,
    p: ArrayView2<f64>,
    w: ArrayView1<f64>,
    b: f64,
) -> Result<ActiveSetBinary> {
    check_projection(ds, p)?;
    check_weights(p, w.len())?;
    let y = ds.signed_labels()?;
    let scores = ds.features().dot(&p).dot(&w);
    Ok(ActiveSetBinary(
        (0..ds.n())
            .filter(|&i| y[i] * (scores[i] + b) - MARGIN_BINARY <= 0.0)
            .collect(),
    ))
}

/// Value and `P`-gradient of the binary objective in one pass.
pub fn binary_value_and_grad(
    ds: &LabeledDataset,
    p: ArrayView2<f64>,
    w: ArrayView1<f64>,
    b: f64,
    hp: &Hyperparams,
    part: &ClassPartition,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    check_projection(ds, p)?;
    check_weights(p, w.len())?;
    let y = ds.signed_labels()?;
    let x = ds.features();
    let z = x.dot(&p);
    let scores = z.dot(&w) + b;

    let mut hinge = 0.0;
    // d(loss)/d(score_i) for active samples: 2C·(score_i - y_i), using y² = 1
    let mut coef = Array1::<f64>::zeros(ds.n());
    for i in 0..ds.n() {
        let slack = y[i] * scores[i] - MARGIN_BINARY;
        if slack <= 0.0 {
            hinge += slack * slack;
            coef[i] = 2.0 * hp.c * (scores[i] - y[i]);
        }
    }
    let scatter = if hp.eta != 0.0 {
        graph::scatter_value(z.view(), part)?
    } else {
        0.0
    };
    let value = 0.5 * w.dot(&w)
        + hp.c * hinge
        + hp.eta * scatter
        + hp.lambda * l21_smoothed(p, hp.eps_smooth);

    if !want_grad {
        return Ok((value, None));
    }
    let xc = x.t().dot(&coef);
    let mut grad = outer(xc.view(), w);
    add_regularizer_grads(&mut grad, x, z.view(), p, hp, part)?;
    Ok((value, Some(grad)))
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

fn add_regularizer_grads(
    grad: &mut Array2<f64>,
    x: &Array2<f64>,
    z: ArrayView2<f64>,
    p: ArrayView2<f64>,
    hp: &Hyperparams,
    part: &ClassPartition,
) -> Result<()> {
    if hp.eta != 0.0 {
        let lz = graph::laplacian_apply(z, part)?;
        grad.scaled_add(2.0 * hp.eta, &x.t().dot(&lz));
    }
    if hp.lambda != 0.0 {
        grad.scaled_add(hp.lambda, &l21_gradient(p, hp.eps_smooth));
    }
    Ok(())
}

pub fn objective_binary(
    ds: &LabeledDataset,
    p: ArrayView2<f64>,
    w: ArrayView1<f64>,
    b: f64,
    hp: &Hyperparams,
    part: &ClassPartition,
) -> Result<f64> {
    Ok(binary_value_and_grad(ds, p, w, b, hp, part, false)?.0)
}

/// `∂J/∂P` of the binary objective with `(w, b)` held fixed.
pub fn grad_p_binary(
    ds: &LabeledDataset,
    p: ArrayView2<f64>,
    w: ArrayView1<f64>,
    b: f64,
    hp: &Hyperparams,
    part: &ClassPartition,
) -> Result<Array2<f64>> {
    Ok(binary_value_and_grad(ds, p, w, b, hp, part, true)?
        .1
        .expect("gradient requested"))
}

fn check_multi_shapes(
    ds: &LabeledDataset,
    p: ArrayView2<f64>,
    weights: ArrayView2<f64>,
    bias: ArrayView1<f64>,
) -> Result<()> {
    require_multi(ds)?;
    check_projection(ds, p)?;
    if weights.nrows() != p.ncols()
        || weights.ncols() != ds.num_classes()
        || bias.len() != ds.num_classes()
    {
        return Err(Error::Shape(format!(
            "weights {}x{} / bias {} do not match r = {}, K = {}",
            weights.nrows(),
            weights.ncols(),
            bias.len(),
            p.ncols(),
            ds.num_classes()
        )));
    }
    Ok(())
}

pub fn active_set_multi(
    ds: &LabeledDataset,
    p: ArrayView2<f64>,
    weights: ArrayView2<f64>,
    bias: ArrayView1<f64>,
) -> Result<ActiveSetMulti> {
    check_multi_shapes(ds, p, weights, bias)?;
    let scores = ds.features().dot(&p).dot(&weights) + bias;
    let mut pairs = Vec::new();
    for (i, &yi) in ds.labels().iter().enumerate() {
        for m in (0..ds.num_classes()).filter(|&m| m != yi) {
            if scores[[i, yi]] - scores[[i, m]] - MARGIN_MULTI < 0.0 {
                pairs.push((i, m));
            }
        }
    }
    Ok(ActiveSetMulti(pairs))
}

/// `ρ·tr(W (Ω + δI)⁻¹ Wᵀ)` for `W` of shape `r × K`.
pub fn correlation_penalty(
    weights: ArrayView2<f64>,
    omega: &SymMatrix,
    rho: f64,
    omega_ridge: f64,
) -> Result<f64> {
    if rho == 0.0 {
        return Ok(0.0);
    }
    let inv = correlation_inverse(weights, omega, omega_ridge)?;
    Ok(rho * penalty_with_inverse(weights, &inv))
}

/// `2ρ·W (Ω + δI)⁻¹`, the gradient of [`correlation_penalty`] in `W`.
pub fn correlation_penalty_grad(
    weights: ArrayView2<f64>,
    omega: &SymMatrix,
    rho: f64,
    omega_ridge: f64,
) -> Result<Array2<f64>> {
    let inv = correlation_inverse(weights, omega, omega_ridge)?;
    Ok(weights.dot(inv.as_array()) * (2.0 * rho))
}

fn correlation_inverse(
    weights: ArrayView2<f64>,
    omega: &SymMatrix,
    omega_ridge: f64,
) -> Result<SymMatrix> {
    if omega.order() != weights.ncols() {
        return Err(Error::Shape(format!(
            "task covariance of order {} for {} weight columns",
            omega.order(),
            weights.ncols()
        )));
    }
    psd_inv(omega, omega_ridge)
}

pub(crate) fn penalty_with_inverse(weights: ArrayView2<f64>, inv: &SymMatrix) -> f64 {
    graph::frobenius_inner(weights.dot(inv.as_array()).view(), weights)
}

/// Value and `P`-gradient of the multi-class objective in one pass. The
/// correlation term is included in the value only when `omega` is given.
#[allow(clippy::too_many_arguments)]
pub fn multi_value_and_grad(
    ds: &LabeledDataset,
    p: ArrayView2<f64>,
    weights: ArrayView2<f64>,
    bias: ArrayView1<f64>,
    omega: Option<&SymMatrix>,
    hp: &Hyperparams,
    part: &ClassPartition,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    check_multi_shapes(ds, p, weights, bias)?;
    let x = ds.features();
    let z = x.dot(&p);
    let scores = z.dot(&weights) + bias;
    let k = ds.num_classes();

    let mut hinge = 0.0;
    // d(loss)/d(score) per sample and class
    let mut coef = Array2::<f64>::zeros((ds.n(), k));
    for (i, &yi) in ds.labels().iter().enumerate() {
        for m in (0..k).filter(|&m| m != yi) {
            let gap = scores[[i, yi]] - scores[[i, m]] - MARGIN_MULTI;
            if gap < 0.0 {
                hinge += gap * gap;
                let g = 2.0 * hp.c * gap;
                coef[[i, yi]] += g;
                coef[[i, m]] -= g;
            }
        }
    }
    let scatter = if hp.eta != 0.0 {
        graph::scatter_value(z.view(), part)?
    } else {
        0.0
    };
    let penalty = match omega {
        Some(om) => correlation_penalty(weights, om, hp.rho, hp.omega_ridge)?,
        None => 0.0,
    };
    let value = 0.5 * graph::frobenius_inner(weights, weights)
        + hp.c * hinge
        + hp.eta * scatter
        + hp.lambda * l21_smoothed(p, hp.eps_smooth)
        + penalty;

    if !want_grad {
        return Ok((value, None));
    }
    let mut grad = x.t().dot(&coef).dot(&weights.t());
    add_regularizer_grads(&mut grad, x, z.view(), p, hp, part)?;
    Ok((value, Some(grad)))
}

#[allow(clippy::too_many_arguments)]
pub fn objective_multi(
    ds: &LabeledDataset,
    p: ArrayView2<f64>,
    weights: ArrayView2<f64>,
    bias: ArrayView1<f64>,
    omega: &SymMatrix,
    hp: &Hyperparams,
    part: &ClassPartition,
) -> Result<f64> {
    Ok(multi_value_and_grad(ds, p, weights, bias, Some(omega), hp, part, false)?.0)
}

/// `∂J/∂P` of the multi-class objective; the correlation term does not
/// depend on `P`.
pub fn grad_p_multi(
    ds: &LabeledDataset,
    p: ArrayView2<f64>,
    weights: ArrayView2<f64>,
    bias: ArrayView1<f64>,
    hp: &Hyperparams,
    part: &ClassPartition,
) -> Result<Array2<f64>> {
    Ok(
        multi_value_and_grad(ds, p, weights, bias, None, hp, part, true)?
            .1
            .expect("gradient requested"),
    )
}

/// Full objective of a model, dispatching on binary vs multi-class.
pub fn objective(
    ds: &LabeledDataset,
    proj: &ProjectionModel,
    margin: &MarginModel,
    hp: &Hyperparams,
    part: &ClassPartition,
) -> Result<f64> {
    match &margin.omega {
        None => objective_binary(ds, proj.matrix().view(), margin.w(), margin.b(), hp, part),
        Some(om) => objective_multi(
            ds,
            proj.matrix().view(),
            margin.weights.view(),
            margin.bias.view(),
            om,
            hp,
            part,
        ),
    }
}

/// Gradient of the full objective in every continuous block at once.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGrad {
    pub p: Array2<f64>,
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Value and gradients in `(P, W, b)` with `Ω` held fixed. Binary models
/// (`omega = None`, one weight column) use the binary loss.
pub fn joint_value_and_grad(
    ds: &LabeledDataset,
    p: ArrayView2<f64>,
    margin: &MarginModel,
    hp: &Hyperparams,
    part: &ClassPartition,
) -> Result<(f64, JointGrad)> {
    let x = ds.features();
    let weights = margin.weights.view();
    let (value, coef) = match &margin.omega {
        None => {
            check_projection(ds, p)?;
            check_weights(p, weights.nrows())?;
            let y = ds.signed_labels()?;
            let scores = x.dot(&p).dot(&margin.w()) + margin.b();
            let mut hinge = 0.0;
            let mut coef = Array2::<f64>::zeros((ds.n(), 1));
            for i in 0..ds.n() {
                let slack = y[i] * scores[i] - MARGIN_BINARY;
                if slack <= 0.0 {
                    hinge += slack * slack;
                    coef[[i, 0]] = 2.0 * hp.c * (scores[i] - y[i]);
                }
            }
            (hp.c * hinge, coef)
        }
        Some(om) => {
            check_multi_shapes(ds, p, weights, margin.bias.view())?;
            let scores = x.dot(&p).dot(&weights) + &margin.bias;
            let k = ds.num_classes();
            let mut hinge = 0.0;
            let mut coef = Array2::<f64>::zeros((ds.n(), k));
            for (i, &yi) in ds.labels().iter().enumerate() {
                for m in (0..k).filter(|&m| m != yi) {
                    let gap = scores[[i, yi]] - scores[[i, m]] - MARGIN_MULTI;
                    if gap < 0.0 {
                        hinge += gap * gap;
                        coef[[i, yi]] += 2.0 * hp.c * gap;
                        coef[[i, m]] -= 2.0 * hp.c * gap;
                    }
                }
            }
            let penalty = correlation_penalty(weights, om, hp.rho, hp.omega_ridge)?;
            (hp.c * hinge + penalty, coef)
        }
    };
    let z = x.dot(&p);
    let scatter = if hp.eta != 0.0 {
        graph::scatter_value(z.view(), part)?
    } else {
        0.0
    };
    let value = value
        + 0.5 * graph::frobenius_inner(weights, weights)
        + hp.eta * scatter
        + hp.lambda * l21_smoothed(p, hp.eps_smooth);

    let mut gp = x.t().dot(&coef).dot(&weights.t());
    add_regularizer_grads(&mut gp, x, z.view(), p, hp, part)?;
    let mut gw = z.t().dot(&coef) + weights;
    if let Some(om) = &margin.omega {
        if hp.rho != 0.0 {
            gw += &correlation_penalty_grad(weights, om, hp.rho, hp.omega_ridge)?;
        }
    }
    let gb = coef.sum_axis(Axis(0));
    Ok((
        value,
        JointGrad {
            p: gp,
            weights: gw,
            bias: gb,
        },
    ))
}

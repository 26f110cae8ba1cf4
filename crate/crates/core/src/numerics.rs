//! Dense symmetric kernels: SPD solves, eigendecomposition, PSD square root
//! and ridge-regularized inverse.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Numerical tolerances shared by the symmetric kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Max asymmetry `|M_ij - M_ji|` relative to `max(1, ‖M‖_max)`.
    pub symmetry: f64,
    /// Eigenvalues above `-psd_clamp · ‖M‖_max` are treated as rounding and
    /// clamped to zero; anything more negative is rejected.
    pub psd_clamp: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            symmetry: 1e-12,
            psd_clamp: 1e-10,
        }
    }
}

/// A finite, symmetric square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(Array2<f64>);

impl SymMatrix {
    /// Validates symmetry with the default tolerance and stores the exactly
    /// symmetrized matrix `(M + Mᵀ)/2`.
    pub fn new(m: Array2<f64>) -> Result<Self> {
        Self::with_tolerance(m, Tolerances::default().symmetry)
    }

    pub fn with_tolerance(m: Array2<f64>, symmetry_tol: f64) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Shape(format!(
                "{}x{} matrix is not square",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("matrix has non-finite entries".into()));
        }
        let scale = max_abs(m.view()).max(1.0);
        let n = m.nrows();
        for i in 0..n {
            for j in 0..i {
                if (m[[i, j]] - m[[j, i]]).abs() > symmetry_tol * scale {
                    return Err(Error::Numerical(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let sym = (&m + &m.t()) * 0.5;
        Ok(Self(sym))
    }

    pub fn identity(order: usize) -> Self {
        Self(Array2::eye(order))
    }

    /// `AᵀA`, symmetric by construction.
    pub fn gram(a: ArrayView2<f64>) -> Self {
        let g = a.t().dot(&a);
        Self((&g + &g.t()) * 0.5)
    }

    pub fn order(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.diag().sum()
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(self.0.view())
    }

    /// `self + shift · I`
    pub fn shifted(&self, shift: f64) -> Self {
        let mut m = self.0.clone();
        m.diag_mut().mapv_inplace(|v| v + shift);
        Self(m)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(&self.0 * factor)
    }
}

pub(crate) fn max_abs(m: ArrayView2<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Lower Cholesky factor; fails with the index of the first non-positive pivot.
pub fn cholesky(m: &SymMatrix) -> Result<Array2<f64>> {
    let a = m.as_array();
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `M X = rhs` for symmetric positive definite `M`.
pub fn solve_spd(m: &SymMatrix, rhs: &Array2<f64>) -> Result<Array2<f64>> {
    let n = m.order();
    if rhs.nrows() != n {
        return Err(Error::Shape(format!(
            "system of order {n} with {} rhs rows",
            rhs.nrows()
        )));
    }
    let l = cholesky(m)?;
    let mut x = rhs.clone();
    for mut col in x.columns_mut() {
        for i in 0..n {
            let mut s = col[i];
            for k in 0..i {
                s -= l[[i, k]] * col[k];
            }
            col[i] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in i + 1..n {
                s -= l[[k, i]] * col[k];
            }
            col[i] = s / l[[i, i]];
        }
    }
    Ok(x)
}

pub fn solve_spd_vec(m: &SymMatrix, rhs: &Array1<f64>) -> Result<Array1<f64>> {
    let col = rhs.clone().insert_axis(ndarray::Axis(1));
    Ok(solve_spd(m, &col)?.remove_axis(ndarray::Axis(1)))
}

/// Eigenvalues in descending order with orthonormal eigenvectors as columns.
pub fn sym_eig(m: &SymMatrix) -> (Array1<f64>, Array2<f64>) {
    let n = m.order();
    if n == 0 {
        return (Array1::zeros(0), Array2::zeros((0, 0)));
    }
    let a = m.as_array();
    let dm = DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
    let eig = nalgebra::SymmetricEigen::new(dm);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(i, c)| eig.eigenvectors[(i, order[c])]);
    (values, vectors)
}

/// `V · diag(f(λ)) · Vᵀ`
fn spectral_map(
    values: &Array1<f64>,
    vectors: &Array2<f64>,
    f: impl Fn(f64) -> f64,
) -> Array2<f64> {
    let scaled = vectors * &values.mapv(f);
    let out = scaled.dot(&vectors.t());
    (&out + &out.t()) * 0.5
}

fn clamped_eig(m: &SymMatrix, tol: &Tolerances) -> Result<(Array1<f64>, Array2<f64>)> {
    let (values, vectors) = sym_eig(m);
    let floor = -tol.psd_clamp * m.max_abs();
    if let Some(&bad) = values.iter().find(|&&v| v < floor) {
        return Err(Error::Numerical(format!(
            "matrix is indefinite (eigenvalue {bad:e})"
        )));
    }
    Ok((values.mapv(|v| v.max(0.0)), vectors))
}

/// Principal square root of a positive semidefinite matrix.
pub fn psd_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    psd_sqrt_with(m, &Tolerances::default())
}

pub fn psd_sqrt_with(m: &SymMatrix, tol: &Tolerances) -> Result<SymMatrix> {
    let (values, vectors) = clamped_eig(m, tol)?;
    Ok(SymMatrix(spectral_map(&values, &vectors, f64::sqrt)))
}

/// `(M + ridge·I)⁻¹` for positive semidefinite `M`.
pub fn psd_inv(m: &SymMatrix, ridge: f64) -> Result<SymMatrix> {
    psd_inv_with(m, ridge, &Tolerances::default())
}

pub fn psd_inv_with(m: &SymMatrix, ridge: f64, tol: &Tolerances) -> Result<SymMatrix> {
    if !(ridge >= 0.0) {
        return Err(Error::Config(format!("ridge must be >= 0, got {ridge}")));
    }
    let (values, vectors) = clamped_eig(m, tol)?;
    let shifted = values.mapv(|v| v + ridge);
    let top = shifted.iter().fold(0.0_f64, |a, &v| a.max(v));
    let smallest = shifted.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    if !(top > 0.0) || smallest <= f64::EPSILON * top {
        return Err(Error::Numerical(
            "matrix is singular and ridge does not regularize it".into(),
        ));
    }
    Ok(SymMatrix(spectral_map(&shifted, &vectors, |v| 1.0 / v)))
}

/// Exact minimizer over `α ≥ 0` of the convex piecewise quadratic
/// `½qα² + lα + c·Σ_j max(0, s_j - α·t_j)²` (`q ≥ 0`, `c ≥ 0`).
///
/// Sweeps the breakpoints `s_j / t_j` in order, tracking the affine slope on
/// each segment. Returns 0 when the slope at 0 is non-negative.
pub fn line_min_sq_hinge(q: f64, l: f64, c: f64, s: &[f64], t: &[f64]) -> f64 {
    debug_assert_eq!(s.len(), t.len());
    // slope(α) = a·α + b on the current segment
    let mut a = q;
    let mut b = l;
    let mut events: Vec<(f64, usize)> = Vec::new();
    for (j, (&sj, &tj)) in s.iter().zip(t).enumerate() {
        let active = sj > 0.0 || (sj == 0.0 && tj < 0.0);
        if active {
            a += 2.0 * c * tj * tj;
            b -= 2.0 * c * sj * tj;
        }
        if tj != 0.0 {
            let at = sj / tj;
            // active terms with t > 0 leave, inactive ones with t < 0 enter
            if at > 0.0 && at.is_finite() && ((active && tj > 0.0) || (!active && tj < 0.0)) {
                events.push((at, j));
            }
        }
    }
    events.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut lo = 0.0;
    let mut idx = 0;
    loop {
        if a * lo + b >= 0.0 {
            return lo;
        }
        let hi = events.get(idx).map_or(f64::INFINITY, |e| e.0);
        if a > 0.0 {
            let root = -b / a;
            if root <= hi {
                return root.max(lo);
            }
        }
        if !hi.is_finite() {
            // unbounded below only if q = 0 and nothing bends the slope
            return lo;
        }
        while idx < events.len() && events[idx].0 == hi {
            let j = events[idx].1;
            let sign = if t[j] > 0.0 { -1.0 } else { 1.0 };
            a += sign * 2.0 * c * t[j] * t[j];
            b -= sign * 2.0 * c * s[j] * t[j];
            idx += 1;
        }
        lo = hi;
    }
}

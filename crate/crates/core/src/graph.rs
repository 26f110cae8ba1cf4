//! Within-class graph with unit weights on same-class pairs, represented by
//! the class partition alone.
//!
//! With `A_ij = 1` iff samples `i` and `j` share a class, the degree of `i`
//! is the size of its class and the Laplacian `L = D - A` is block diagonal
//! with blocks `|c|·I - 11ᵀ`. Everything here works blockwise in `O(n·r)`.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPartition {
    groups: Vec<Vec<usize>>,
    n: usize,
}

impl ClassPartition {
    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn check_rows(&self, z: &ArrayView2<f64>) -> Result<()> {
        if z.nrows() != self.n {
            return Err(Error::Shape(format!(
                "partition covers {} samples, matrix has {} rows",
                self.n,
                z.nrows()
            )));
        }
        Ok(())
    }

    fn class_mean(z: &ArrayView2<f64>, group: &[usize]) -> Array1<f64> {
        let mut mean = Array1::zeros(z.ncols());
        for &i in group {
            mean += &z.row(i);
        }
        mean / group.len() as f64
    }
}

/// Groups sample indices by class; groups are indexed by class and sorted.
pub fn build_partition(labels: &[usize]) -> ClassPartition {
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let mut groups = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    ClassPartition {
        groups,
        n: labels.len(),
    }
}

/// `tr(ZᵀLZ) = Σ_c |c| Σ_{i∈c} ‖z_i - z̄_c‖²`, i.e. half the ordered-pair sum
/// `Σ_ij A_ij ‖z_i - z_j‖²`.
pub fn scatter_value(z: ArrayView2<f64>, part: &ClassPartition) -> Result<f64> {
    part.check_rows(&z)?;
    let mut total = 0.0;
    for group in part.groups.iter().filter(|g| !g.is_empty()) {
        let mean = ClassPartition::class_mean(&z, group);
        let mut spread = 0.0;
        for &i in group {
            let diff = &z.row(i) - &mean;
            spread += diff.dot(&diff);
        }
        total += group.len() as f64 * spread;
    }
    Ok(total)
}

/// `L·Z`: row `i` becomes `|c(i)|·z_i - Σ_{j∈c(i)} z_j`.
pub fn laplacian_apply(z: ArrayView2<f64>, part: &ClassPartition) -> Result<Array2<f64>> {
    part.check_rows(&z)?;
    let mut out = Array2::zeros(z.raw_dim());
    for group in part.groups.iter().filter(|g| !g.is_empty()) {
        let size = group.len() as f64;
        let mut sum = Array1::zeros(z.ncols());
        for &i in group {
            sum += &z.row(i);
        }
        for &i in group {
            let mut row = out.row_mut(i);
            row.assign(&(&z.row(i) * size - &sum));
        }
    }
    Ok(out)
}

/// Entrywise inner product `Σ_ij a_ij b_ij`.
pub fn frobenius_inner(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

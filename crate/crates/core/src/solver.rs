//! Alternating minimization over the classifier blocks, the task covariance
//! and the projection.
//!
//! Binary outer iteration: `w` (closed form on the active set), `b` (mean
//! active residual), then `P` (L-BFGS). Multi-class: each `(w_m, b_m)` in
//! class order, then `Ω`, then `P`. With the safeguard on, a block update
//! that raises the full objective is discarded.

use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::graph::{build_partition, ClassPartition};
use crate::lbfgs::{self, LbfgsConfig, LbfgsReport, Termination};
use crate::numerics::{line_min_sq_hinge, psd_inv, psd_sqrt, solve_spd_vec, SymMatrix};
use crate::objective::{
    self, active_set_binary, active_set_multi, ActiveSetBinary, ActiveSetMulti, Hyperparams,
    MarginModel, ProjectionModel, MARGIN_MULTI,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Stop when `|J_t - J_{t+1}| / max(1, |J_t|)` falls to this value.
    pub outer_tol: f64,
    pub max_outer_iters: usize,
    pub seed: u64,
    /// Extra active-set refreshes allowed inside one `w` update.
    pub active_set_refreshes: usize,
    pub safeguard: bool,
    /// Upper bound on classifier passes per outer iteration; passes stop
    /// early once one improves the objective by a relative `outer_tol / 10`
    /// or less.
    #[serde(default = "default_sweeps")]
    pub classifier_sweeps: usize,
    /// Run the projection step as L-BFGS over `(P, W, b)` jointly instead
    /// of over `P` alone.
    #[serde(default = "yes")]
    pub joint_step: bool,
    /// After the class blocks, apply [`center_weights`].
    #[serde(default = "yes")]
    pub center_weights: bool,
}

fn default_sweeps() -> usize {
    20
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            outer_tol: 1e-5,
            max_outer_iters: 50,
            seed: 0,
            active_set_refreshes: 3,
            safeguard: true,
            classifier_sweeps: default_sweeps(),
            joint_step: true,
            center_weights: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Binary,
    Multiclass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedUpdate {
    pub iteration: usize,
    pub block: String,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseSeconds {
    pub classifier: f64,
    pub omega: f64,
    pub projection: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: Mode,
    /// Full objective at initialization and after each outer iteration.
    pub objective_trace: Vec<f64>,
    /// `|Θ|` (binary) or the number of violating pairs (multi-class) after
    /// each outer iteration.
    pub active_set_sizes: Vec<usize>,
    pub outer_iters: usize,
    pub lbfgs_iters: usize,
    pub gradient_evals: usize,
    pub objective_evals: usize,
    pub converged: bool,
    pub line_search_failures: usize,
    pub rejected_updates: Vec<RejectedUpdate>,
    pub seconds: PhaseSeconds,
    /// The scatter term is `tr(PᵀXLXᵀP)`, half the ordered-pair sum.
    pub scatter_convention: String,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub projection: ProjectionModel,
    pub margin: MarginModel,
    pub report: TrainReport,
}

/// `z_i = Pᵀx_i` for every row of `x`.
pub fn transform(proj: &ProjectionModel, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != proj.d() {
        return Err(Error::Shape(format!(
            "data has {} columns, projection expects {}",
            x.ncols(),
            proj.d()
        )));
    }
    Ok(x.dot(proj.matrix()))
}

/// Random `P` (standard normal scaled by `1/sqrt(d)`), zero weights and
/// biases, and `Ω = I/K` for `K ≥ 3`.
pub fn init_params(
    d: usize,
    r: usize,
    k: usize,
    seed: u64,
) -> Result<(ProjectionModel, MarginModel)> {
    if r == 0 || r >= d {
        return Err(Error::Config(format!("r must be < d (r = {r}, d = {d})")));
    }
    if k < 2 {
        return Err(Error::Config(format!("need at least two classes, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d as f64).sqrt();
    let p = Array2::from_shape_fn((d, r), |_| {
        let g: f64 = StandardNormal.sample(&mut rng);
        g * scale
    });
    let margin = if k == 2 {
        MarginModel::binary(Array1::zeros(r), 0.0)
    } else {
        MarginModel {
            weights: Array2::zeros((r, k)),
            bias: Array1::zeros(k),
            omega: Some(SymMatrix::identity(k).scaled(1.0 / k as f64)),
        }
    };
    Ok((ProjectionModel::new(p)?, margin))
}

/// Result of a closed-form `w` update together with the active set it was
/// solved on.
#[derive(Debug, Clone, PartialEq)]
pub struct WUpdate {
    pub w: Array1<f64>,
    pub active: ActiveSetBinary,
    pub solves: usize,
}

fn solve_w_on(
    z: &Array2<f64>,
    y: &Array1<f64>,
    active: &[usize],
    b: f64,
    c: f64,
) -> Result<Array1<f64>> {
    let r = z.ncols();
    let mut m = Array2::<f64>::eye(r);
    let mut rhs = Array1::<f64>::zeros(r);
    for &i in active {
        let zi = z.row(i);
        for a in 0..r {
            for bcol in 0..r {
                m[[a, bcol]] += 2.0 * c * zi[a] * zi[bcol];
            }
        }
        rhs.scaled_add(2.0 * c * (y[i] - b), &zi);
    }
    solve_spd_vec(&SymMatrix::new(m)?, &rhs)
}

/// Minimizes `½‖w‖² + C Σ_{i∈Θ} (y_i(wᵀz_i + b) - 1)²` with `Θ` taken at
/// the incoming `w`, then re-solves while `Θ` keeps changing, at most
/// `refreshes` more times. An empty `Θ` at entry yields `w = 0`.
pub fn update_w_binary(
    ds: &LabeledDataset,
    p: ArrayView2<f64>,
    w_in: ArrayView1<f64>,
    b: f64,
    c: f64,
    refreshes: usize,
) -> Result<WUpdate> {
    let mut active = active_set_binary(ds, p, w_in, b)?;
    if active.0.is_empty() {
        return Ok(WUpdate {
            w: Array1::zeros(p.ncols()),
            active,
            solves: 0,
        });
    }
    let z = ds.features().dot(&p);
    let y = ds.signed_labels()?;
    let mut w = solve_w_on(&z, &y, &active.0, b, c)?;
    let mut solves = 1;
    for _ in 0..refreshes {
        let next = active_set_binary(ds, p, w.view(), b)?;
        if next == active || next.0.is_empty() {
            break;
        }
        w = solve_w_on(&z, &y, &next.0, b, c)?;
        active = next;
        solves += 1;
    }
    Ok(WUpdate { w, active, solves })
}

/// Mean active residual `Σ_Θ (y_i - wᵀz_i) / |Θ|`, or `b_in` when `Θ` is
/// empty. `Θ` is taken at `(P, w, b_in)`.
pub fn update_b_binary(
    ds: &LabeledDataset,
    p: ArrayView2<f64>,
    w: ArrayView1<f64>,
    b_in: f64,
) -> Result<(f64, ActiveSetBinary)> {
    let active = active_set_binary(ds, p, w, b_in)?;
    if active.0.is_empty() {
        return Ok((b_in, active));
    }
    let y = ds.signed_labels()?;
    let scores = ds.features().dot(&p).dot(&w);
    let sum: f64 = active.0.iter().map(|&i| y[i] - scores[i]).sum();
    Ok((sum / active.0.len() as f64, active))
}

/// Frozen-pair data for one class block: rows `z_i` and targets `c` such
/// that each violating pair contributes `(w_mᵀz_i + b_m - c)²`.
pub(crate) fn block_terms(
    labels: &[usize],
    scores: &Array2<f64>,
    pairs: &ActiveSetMulti,
    m: usize,
) -> (Vec<usize>, Vec<f64>) {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for &(i, k) in &pairs.0 {
        let yi = labels[i];
        if yi == m {
            rows.push(i);
            targets.push(scores[[i, k]] + MARGIN_MULTI);
        } else if k == m {
            rows.push(i);
            targets.push(scores[[i, yi]] - MARGIN_MULTI);
        }
    }
    (rows, targets)
}

/// Closed-form update of `(w_m, b_m)` with the violating pairs frozen.
///
/// `gamma` is `(Ω + δI)⁻¹`. Returns the new block and the number of pairs it
/// was fitted on.
#[allow(clippy::too_many_arguments)]
pub(crate) fn solve_block(
    labels: &[usize],
    z: &Array2<f64>,
    weights: &Array2<f64>,
    bias: &Array1<f64>,
    gamma: &SymMatrix,
    hp: &Hyperparams,
    pairs: &ActiveSetMulti,
    m: usize,
) -> Result<(Array1<f64>, f64, usize)> {
    let r = z.ncols();
    let k = weights.ncols();
    let scores = z.dot(weights) + bias;
    let (rows, targets) = block_terms(labels, &scores, pairs, m);
    let g = gamma.as_array();

    let mut coupling = Array1::<f64>::zeros(r);
    for j in (0..k).filter(|&j| j != m) {
        coupling.scaled_add(g[[m, j]], &weights.column(j));
    }
    let ridge = 1.0 + 2.0 * hp.rho * g[[m, m]];
    let two_c = 2.0 * hp.c;

    let mut h = Array2::<f64>::zeros((r + 1, r + 1));
    let mut rhs = Array1::<f64>::zeros(r + 1);
    for a in 0..r {
        h[[a, a]] = ridge;
        rhs[a] = -2.0 * hp.rho * coupling[a];
    }
    for (&i, &c) in rows.iter().zip(&targets) {
        let zi = z.row(i);
        for a in 0..r {
            for b in 0..r {
                h[[a, b]] += two_c * zi[a] * zi[b];
            }
            h[[a, r]] += two_c * zi[a];
            h[[r, a]] += two_c * zi[a];
            rhs[a] += two_c * c * zi[a];
        }
        h[[r, r]] += two_c;
        rhs[r] += two_c * c;
    }

    if !rows.is_empty() {
        match solve_spd_vec(&SymMatrix::new(h.clone())?, &rhs) {
            Ok(u) => return Ok((u.slice(s![..r]).to_owned(), u[r], rows.len())),
            Err(Error::NotPositiveDefinite { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    // bias held fixed: move its column to the right-hand side
    let b_m = bias[m];
    let hw = h.slice(s![..r, ..r]).to_owned();
    let mut rw = rhs.slice(s![..r]).to_owned();
    rw.scaled_add(-b_m, &h.slice(s![..r, r]));
    let w = solve_spd_vec(&SymMatrix::new(hw)?, &rw)?;
    Ok((w, b_m, rows.len()))
}

/// Block update of `(w_m, b_m)` for class `m`; see [`solve_block`].
#[allow(clippy::too_many_arguments)]
pub fn update_block_multi(
    ds: &LabeledDataset,
    p: ArrayView2<f64>,
    weights: &Array2<f64>,
    bias: &Array1<f64>,
    omega: &SymMatrix,
    hp: &Hyperparams,
    m: usize,
) -> Result<(Array1<f64>, f64)> {
    let pairs = active_set_multi(ds, p, weights.view(), bias.view())?;
    if m >= ds.num_classes() {
        return Err(Error::Config(format!("class {m} out of range")));
    }
    let z = ds.features().dot(&p);
    let gamma = psd_inv(omega, hp.omega_ridge)?;
    let (w, b, _) = solve_block(ds.labels(), &z, weights, bias, &gamma, hp, &pairs, m)?;
    Ok((w, b))
}

/// `Ω = S / tr(S)` with `S = (WᵀW + δI)^{1/2}`; the unit-trace matrix
/// minimizing `tr(W Ω⁻¹ Wᵀ)`.
pub fn update_omega(weights: ArrayView2<f64>, omega_ridge: f64) -> Result<SymMatrix> {
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("weights have non-finite entries".into()));
    }
    let gram = SymMatrix::gram(weights).shifted(omega_ridge);
    let root = psd_sqrt(&gram)?;
    let tr = root.trace();
    if !(tr > 0.0) {
        return Err(Error::Numerical(
            "task covariance has zero trace (W = 0 and no ridge)".into(),
        ));
    }
    Ok(root.scaled(1.0 / tr))
}

fn flatten(m: &Array2<f64>) -> Array1<f64> {
    Array1::from_iter(m.iter().copied())
}

fn unflatten(v: &Array1<f64>, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), v.to_vec()).expect("length matches shape")
}

/// Minimizes the objective over `P` with the classifier fixed.
pub fn update_p(
    ds: &LabeledDataset,
    p_in: &ProjectionModel,
    margin: &MarginModel,
    hp: &Hyperparams,
    part: &ClassPartition,
    cfg: &LbfgsConfig,
) -> Result<(ProjectionModel, LbfgsReport)> {
    let (d, r) = (p_in.d(), p_in.r());
    let oracle = |x: &Array1<f64>| -> Result<(f64, Array1<f64>)> {
        let p = unflatten(x, d, r);
        let (value, grad) = match &margin.omega {
            None => objective::binary_value_and_grad(
                ds,
                p.view(),
                margin.w(),
                margin.b(),
                hp,
                part,
                true,
            )?,
            Some(om) => objective::multi_value_and_grad(
                ds,
                p.view(),
                margin.weights.view(),
                margin.bias.view(),
                Some(om),
                hp,
                part,
                true,
            )?,
        };
        let grad = grad.expect("gradient requested");
        Ok((value, flatten(&grad)))
    };
    let (x, report) = lbfgs::minimize(oracle, flatten(p_in.matrix()), cfg)?;
    Ok((ProjectionModel::new(unflatten(&x, d, r))?, report))
}

/// Adds the same vector `u` to every column of `W`, which shifts all class
/// scores equally and leaves every pairwise gap unchanged. `u` minimizes
/// `½‖W + u1ᵀ‖² + ρ·tr((W + u1ᵀ) Γ (W + u1ᵀ)ᵀ)` with `Γ = (Ω + δI)⁻¹`:
/// `u = -(W1 + 2ρWΓ1) / (K + 2ρ·1ᵀΓ1)`.
pub fn center_weights(weights: &Array2<f64>, gamma: &SymMatrix, rho: f64) -> Array2<f64> {
    let k = weights.ncols();
    let ones = Array1::<f64>::ones(k);
    let g1 = gamma.as_array().dot(&ones);
    let num = weights.dot(&ones) + weights.dot(&g1) * (2.0 * rho);
    let den = k as f64 + 2.0 * rho * ones.dot(&g1);
    let u = num / -den;
    let mut out = weights.clone();
    for mut col in out.columns_mut() {
        col += &u;
    }
    out
}

/// Exact line search from `w` toward a closed-form target, `b` fixed.
///
/// The closed forms minimize a model with the active set frozen; that model
/// shares value and gradient with the true objective at the current point, so
/// the direction descends and the step below never increases the objective.
/// A unit step reproduces the target whenever the active set holds.
fn step_binary_w(
    z: &Array2<f64>,
    y: &Array1<f64>,
    w: ArrayView1<f64>,
    b: f64,
    target: &Array1<f64>,
    c: f64,
) -> Array1<f64> {
    let dir = target - &w;
    let out = z.dot(&w);
    let dout = z.dot(&dir);
    let slack: Vec<f64> = (0..y.len()).map(|i| 1.0 - y[i] * (out[i] + b)).collect();
    let rate: Vec<f64> = (0..y.len()).map(|i| y[i] * dout[i]).collect();
    let alpha = line_min_sq_hinge(dir.dot(&dir), w.dot(&dir), c, &slack, &rate);
    &w + &(dir * alpha)
}

fn step_binary_b(
    z: &Array2<f64>,
    y: &Array1<f64>,
    w: ArrayView1<f64>,
    b: f64,
    target: f64,
    c: f64,
) -> f64 {
    let delta = target - b;
    if delta == 0.0 {
        return b;
    }
    let out = z.dot(&w);
    let slack: Vec<f64> = (0..y.len()).map(|i| 1.0 - y[i] * (out[i] + b)).collect();
    let rate: Vec<f64> = y.iter().map(|&yi| yi * delta).collect();
    b + delta * line_min_sq_hinge(0.0, 0.0, c, &slack, &rate)
}

/// Exact line search for class block `m` toward `(w_target, b_target)` on
/// the block's true objective, all pairs involving `m` included.
#[allow(clippy::too_many_arguments)]
fn step_block(
    labels: &[usize],
    z: &Array2<f64>,
    weights: &Array2<f64>,
    bias: &Array1<f64>,
    gamma: &SymMatrix,
    hp: &Hyperparams,
    m: usize,
    w_target: &Array1<f64>,
    b_target: f64,
) -> (Array1<f64>, f64) {
    let k = weights.ncols();
    let w_m = weights.column(m);
    let dw = w_target - &w_m;
    let db = b_target - bias[m];
    let g = gamma.as_array();
    let mut coupling = Array1::<f64>::zeros(w_m.len());
    for j in (0..k).filter(|&j| j != m) {
        coupling.scaled_add(g[[m, j]], &weights.column(j));
    }
    let ridge = 1.0 + 2.0 * hp.rho * g[[m, m]];
    let scores = z.dot(weights) + bias;
    let moved = z.dot(&dw) + db;
    let mut slack = Vec::new();
    let mut rate = Vec::new();
    for (i, &yi) in labels.iter().enumerate() {
        if yi == m {
            for j in (0..k).filter(|&j| j != m) {
                slack.push(scores[[i, j]] - scores[[i, m]] + MARGIN_MULTI);
                rate.push(moved[i]);
            }
        } else {
            slack.push(scores[[i, m]] - scores[[i, yi]] + MARGIN_MULTI);
            rate.push(-moved[i]);
        }
    }
    let q = ridge * dw.dot(&dw);
    let l = ridge * w_m.dot(&dw) + 2.0 * hp.rho * coupling.dot(&dw);
    let alpha = line_min_sq_hinge(q, l, hp.c, &slack, &rate);
    (&w_m + &(dw * alpha), bias[m] + alpha * db)
}

/// L-BFGS over `(P, W, b)` jointly with `Ω` fixed. Escapes the slow
/// zig-zag of pure alternation along score-preserving reparameterizations
/// `P → PA, W → A⁻¹W`.
pub fn update_joint(
    ds: &LabeledDataset,
    proj: &ProjectionModel,
    margin: &MarginModel,
    hp: &Hyperparams,
    part: &ClassPartition,
    cfg: &LbfgsConfig,
) -> Result<(ProjectionModel, MarginModel, LbfgsReport)> {
    let (d, r) = (proj.d(), proj.r());
    let t = margin.weights.ncols();
    let np = d * r;
    let nw = r * t;
    let unpack = |x: &Array1<f64>| -> (Array2<f64>, MarginModel) {
        let p = unflatten(&x.slice(s![..np]).to_owned(), d, r);
        let weights = unflatten(&x.slice(s![np..np + nw]).to_owned(), r, t);
        let bias = x.slice(s![np + nw..]).to_owned();
        (
            p,
            MarginModel {
                weights,
                bias,
                omega: margin.omega.clone(),
            },
        )
    };
    let oracle = |x: &Array1<f64>| -> Result<(f64, Array1<f64>)> {
        let (p, m) = unpack(x);
        let (value, g) = objective::joint_value_and_grad(ds, p.view(), &m, hp, part)?;
        let flat =
            g.p.iter()
                .chain(g.weights.iter())
                .chain(g.bias.iter())
                .copied()
                .collect();
        Ok((value, flat))
    };
    let x0: Array1<f64> = proj
        .matrix()
        .iter()
        .chain(margin.weights.iter())
        .chain(margin.bias.iter())
        .copied()
        .collect();
    let (x, report) = lbfgs::minimize(oracle, x0, cfg)?;
    let (p, m) = unpack(&x);
    Ok((ProjectionModel::new(p)?, m, report))
}

struct Loop<'a> {
    ds: &'a LabeledDataset,
    hp: &'a Hyperparams,
    part: ClassPartition,
    cfg: &'a TrainConfig,
    report: TrainReport,
    current: f64,
}

impl Loop<'_> {
    fn eval(&mut self, proj: &ProjectionModel, margin: &MarginModel) -> Result<f64> {
        self.report.objective_evals += 1;
        let v = objective::objective(self.ds, proj, margin, self.hp, &self.part)?;
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "objective became non-finite ({v})"
            )));
        }
        Ok(v)
    }

    /// Evaluates a candidate and keeps it unless the safeguard rejects it.
    fn consider(
        &mut self,
        iteration: usize,
        block: &str,
        proj: &mut ProjectionModel,
        margin: &mut MarginModel,
        cand_proj: Option<ProjectionModel>,
        cand_margin: Option<MarginModel>,
    ) -> Result<()> {
        let next_proj = cand_proj.as_ref().unwrap_or(proj);
        let next_margin = cand_margin.as_ref().unwrap_or(margin);
        let value = self.eval(next_proj, next_margin)?;
        if self.cfg.safeguard && value > self.current {
            self.report.rejected_updates.push(RejectedUpdate {
                iteration,
                block: block.to_string(),
                before: self.current,
                after: value,
            });
            return Ok(());
        }
        self.current = value;
        if let Some(p) = cand_proj {
            *proj = p;
        }
        if let Some(m) = cand_margin {
            *margin = m;
        }
        Ok(())
    }

    fn record_lbfgs(&mut self, rep: &LbfgsReport) {
        self.report.lbfgs_iters += rep.iterations;
        self.report.gradient_evals += rep.grad_evals;
        self.report.objective_evals += rep.value_evals;
        if rep.termination == Termination::LineSearchFailed {
            self.report.line_search_failures += 1;
        }
    }
}

/// Learns `P` and the classifier from a training set. Two classes use the
/// binary objective, three or more the multi-class one.
pub fn fit(
    ds: &LabeledDataset,
    hp: &Hyperparams,
    cfg: &TrainConfig,
    lbfgs_cfg: &LbfgsConfig,
) -> Result<FitResult> {
    hp.validate(ds.d())?;
    lbfgs_cfg.validate()?;
    if !(cfg.outer_tol >= 0.0) || cfg.max_outer_iters == 0 {
        return Err(Error::Config(
            "outer tolerance must be >= 0 and max_outer_iters > 0".into(),
        ));
    }
    let k = ds.num_classes();
    if k < 2 {
        return Err(Error::Config(
            "training data needs at least two classes".into(),
        ));
    }
    ds.check_all_classes_present()?;

    let started = Instant::now();
    let (mut proj, mut margin) = init_params(ds.d(), hp.dim, k, cfg.seed)?;
    let mode = if k == 2 {
        Mode::Binary
    } else {
        Mode::Multiclass
    };
    let mut lp = Loop {
        ds,
        hp,
        part: build_partition(ds.labels()),
        cfg,
        report: TrainReport {
            mode,
            objective_trace: Vec::new(),
            active_set_sizes: Vec::new(),
            outer_iters: 0,
            lbfgs_iters: 0,
            gradient_evals: 0,
            objective_evals: 0,
            converged: false,
            line_search_failures: 0,
            rejected_updates: Vec::new(),
            seconds: PhaseSeconds::default(),
            scatter_convention:
                "tr(P'XLX'P), half the ordered-pair sum of same-class squared distances".into(),
        },
        current: 0.0,
    };
    lp.current = lp.eval(&proj, &margin)?;
    lp.report.objective_trace.push(lp.current);

    for t in 0..cfg.max_outer_iters {
        let before = lp.current;
        for _ in 0..cfg.classifier_sweeps.max(1) {
            let sweep_start = lp.current;
            let clock = Instant::now();
            match mode {
                Mode::Binary => {
                    let p = proj.matrix().clone();
                    let z = ds.features().dot(&p);
                    let y = ds.signed_labels()?;
                    let upd = update_w_binary(
                        ds,
                        p.view(),
                        margin.w(),
                        margin.b(),
                        hp.c,
                        cfg.active_set_refreshes,
                    )?;
                    let w = step_binary_w(&z, &y, margin.w(), margin.b(), &upd.w, hp.c);
                    let cand = MarginModel::binary(w, margin.b());
                    lp.consider(t, "w", &mut proj, &mut margin, None, Some(cand))?;

                    let (target, _) = update_b_binary(ds, p.view(), margin.w(), margin.b())?;
                    let b = step_binary_b(&z, &y, margin.w(), margin.b(), target, hp.c);
                    let cand = MarginModel::binary(margin.w().to_owned(), b);
                    lp.consider(t, "b", &mut proj, &mut margin, None, Some(cand))?;
                    lp.report.seconds.classifier += clock.elapsed().as_secs_f64();
                }
                Mode::Multiclass => {
                    let z = ds.features().dot(proj.matrix());
                    for m in 0..k {
                        let omega = margin.omega.clone().expect("multi-class model has Ω");
                        let gamma = psd_inv(&omega, hp.omega_ridge)?;
                        let pairs = active_set_multi(
                            ds,
                            proj.matrix().view(),
                            margin.weights.view(),
                            margin.bias.view(),
                        )?;
                        let (w_cf, b_cf, _) = solve_block(
                            ds.labels(),
                            &z,
                            &margin.weights,
                            &margin.bias,
                            &gamma,
                            hp,
                            &pairs,
                            m,
                        )?;
                        let (w, b) = step_block(
                            ds.labels(),
                            &z,
                            &margin.weights,
                            &margin.bias,
                            &gamma,
                            hp,
                            m,
                            &w_cf,
                            b_cf,
                        );
                        let mut cand = margin.clone();
                        cand.weights.column_mut(m).assign(&w);
                        cand.bias[m] = b;
                        lp.consider(
                            t,
                            &format!("w_{m}"),
                            &mut proj,
                            &mut margin,
                            None,
                            Some(cand),
                        )?;
                    }
                    if cfg.center_weights {
                        let omega = margin.omega.clone().expect("multi-class model has Ω");
                        let gamma = psd_inv(&omega, hp.omega_ridge)?;
                        let cand = MarginModel {
                            weights: center_weights(&margin.weights, &gamma, hp.rho),
                            ..margin.clone()
                        };
                        lp.consider(t, "center", &mut proj, &mut margin, None, Some(cand))?;
                    }
                    lp.report.seconds.classifier += clock.elapsed().as_secs_f64();

                    let clock = Instant::now();
                    let omega = update_omega(margin.weights.view(), hp.omega_ridge)?;
                    let cand = MarginModel {
                        omega: Some(omega),
                        ..margin.clone()
                    };
                    lp.consider(t, "omega", &mut proj, &mut margin, None, Some(cand))?;
                    lp.report.seconds.omega += clock.elapsed().as_secs_f64();
                }
            }
            if (sweep_start - lp.current).abs() <= 0.1 * cfg.outer_tol * sweep_start.abs().max(1.0)
            {
                break;
            }
        }

        let clock = Instant::now();
        if cfg.joint_step {
            let (cand_p, cand_m, rep) = update_joint(ds, &proj, &margin, hp, &lp.part, lbfgs_cfg)?;
            lp.record_lbfgs(&rep);
            lp.consider(
                t,
                "P,W,b",
                &mut proj,
                &mut margin,
                Some(cand_p),
                Some(cand_m),
            )?;
        } else {
            let (cand, rep) = update_p(ds, &proj, &margin, hp, &lp.part, lbfgs_cfg)?;
            lp.record_lbfgs(&rep);
            lp.consider(t, "P", &mut proj, &mut margin, Some(cand), None)?;
        }
        lp.report.seconds.projection += clock.elapsed().as_secs_f64();

        let size = match mode {
            Mode::Binary => active_set_binary(ds, proj.matrix().view(), margin.w(), margin.b())?
                .0
                .len(),
            Mode::Multiclass => active_set_multi(
                ds,
                proj.matrix().view(),
                margin.weights.view(),
                margin.bias.view(),
            )?
            .0
            .len(),
        };
        lp.report.active_set_sizes.push(size);
        lp.report.objective_trace.push(lp.current);
        lp.report.outer_iters = t + 1;

        if (before - lp.current).abs() / before.abs().max(1.0) <= cfg.outer_tol {
            lp.report.converged = true;
            break;
        }
    }
    lp.report.seconds.total = started.elapsed().as_secs_f64();
    Ok(FitResult {
        projection: proj,
        margin,
        report: lp.report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SynthSpec;
    use ndarray::array;

    fn binary_ds(x: Array2<f64>, y: &[i32]) -> LabeledDataset {
        let labels = y.iter().map(|&v| usize::from(v > 0)).collect();
        LabeledDataset::from_indices(x, labels, vec!["-1".into(), "1".into()]).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let (a, _) = init_params(10, 3, 2, 4).unwrap();
        let (b, _) = init_params(10, 3, 2, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.matrix().dim(), (10, 3));
        let (_, m) = init_params(10, 3, 4, 4).unwrap();
        let om = m.omega.unwrap();
        assert_eq!(om.trace(), 1.0);
        assert_eq!(om.as_array(), &(Array2::<f64>::eye(4) * 0.25));
        assert!(init_params(3, 3, 2, 0).is_err());
    }

    #[test]
    fn one_sample_w_update() {
        let ds = binary_ds(array![[1.0, 0.0]], &[1]);
        let p = Array2::<f64>::eye(2);
        let upd = update_w_binary(&ds, p.view(), array![0.0, 0.0].view(), 0.0, 0.5, 0).unwrap();
        assert!((upd.w[0] - 0.5).abs() < 1e-15 && upd.w[1] == 0.0);
    }

    #[test]
    fn empty_active_set_branches() {
        let ds = binary_ds(array![[1.0, 0.0], [-1.0, 0.0]], &[1, -1]);
        let p = Array2::<f64>::eye(2);
        let w = array![5.0, 0.0];
        let upd = update_w_binary(&ds, p.view(), w.view(), 0.0, 1.0, 3).unwrap();
        assert_eq!(upd.w, array![0.0, 0.0]);
        let (b, set) = update_b_binary(&ds, p.view(), w.view(), 0.25).unwrap();
        assert!(set.0.is_empty());
        assert_eq!(b, 0.25);
    }

    #[test]
    fn b_update_examples() {
        // one active sample with wᵀz = 0.3
        let ds = binary_ds(array![[0.3, 0.0], [-9.0, 0.0]], &[1, -1]);
        let p = Array2::<f64>::eye(2);
        let (b, _) = update_b_binary(&ds, p.view(), array![1.0, 0.0].view(), 0.0).unwrap();
        assert!((b - 0.7).abs() < 1e-15);
        // residuals 0.2 and 0.6
        let ds = binary_ds(array![[0.8, 0.0], [0.4, 0.0]], &[1, 1]);
        let (b, _) = update_b_binary(&ds, p.view(), array![1.0, 0.0].view(), 0.0).unwrap();
        assert!((b - 0.4).abs() < 1e-15);
    }

    #[test]
    fn omega_examples() {
        let om = update_omega(Array2::<f64>::eye(2).view(), 0.0).unwrap();
        assert!((om.as_array() - &(Array2::<f64>::eye(2) * 0.5))
            .iter()
            .all(|v| v.abs() < 1e-15));
        let w = array![[3.0, 0.0], [0.0, 4.0]];
        let om = update_omega(w.view(), 0.0).unwrap();
        assert!(
            (om.as_array() - &array![[3.0 / 7.0, 0.0], [0.0, 4.0 / 7.0]])
                .iter()
                .all(|v| v.abs() < 1e-15)
        );
        let om = update_omega(Array2::<f64>::zeros((2, 3)).view(), 1e-8).unwrap();
        assert!((om.trace() - 1.0).abs() < 1e-12);
        assert!(update_omega(Array2::<f64>::zeros((2, 3)).view(), 0.0).is_err());
    }

    #[test]
    fn block_without_pairs() {
        // three well separated points on the axes; W already satisfies all margins
        let x = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let ds = LabeledDataset::from_indices(
            x,
            vec![0, 1, 2],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let p = array![[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]];
        let w = array![[5.0, -5.0, 0.0], [-5.0, 5.0, 0.0]];
        let bias = array![0.0, 0.0, 2.5];
        let om = SymMatrix::identity(3).scaled(1.0 / 3.0);
        assert!(active_set_multi(&ds, p.view(), w.view(), bias.view())
            .unwrap()
            .0
            .is_empty());
        let hp = Hyperparams {
            rho: 0.0,
            dim: 2,
            ..Hyperparams::default()
        };
        let (wm, bm) = update_block_multi(&ds, p.view(), &w, &bias, &om, &hp, 2).unwrap();
        assert_eq!(wm, array![0.0, 0.0]);
        assert_eq!(bm, 2.5);
        // with coupling the block moves against its neighbours
        let hp = Hyperparams { rho: 1.0, ..hp };
        let om = update_omega(w.view(), 1e-8).unwrap();
        let (wm, _) = update_block_multi(&ds, p.view(), &w, &bias, &om, &hp, 2).unwrap();
        assert!(wm.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn transform_examples() {
        let p = ProjectionModel::new(array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        let x = array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        assert_eq!(
            transform(&p, x.view()).unwrap(),
            array![[1.0, 2.0], [0.0, 0.0]]
        );
        assert!(transform(&p, Array2::<f64>::zeros((1, 2)).view()).is_err());
    }

    #[test]
    fn fit_rejects_missing_class() {
        let ds = LabeledDataset::from_indices(
            Array2::zeros((3, 4)),
            vec![0, 0, 2],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let hp = Hyperparams {
            dim: 2,
            ..Hyperparams::default()
        };
        assert!(fit(&ds, &hp, &TrainConfig::default(), &LbfgsConfig::default()).is_err());
    }

    #[test]
    fn centering_keeps_gaps_and_lowers_penalty() {
        let weights = array![[1.0, -0.5, 2.0], [0.3, 0.7, -1.1]];
        let omega = update_omega(weights.view(), 1e-8).unwrap();
        let gamma = psd_inv(&omega, 1e-8).unwrap();
        let rho = 0.5;
        let cost = |w: &Array2<f64>| {
            0.5 * w.iter().map(|v| v * v).sum::<f64>()
                + rho * crate::objective::penalty_with_inverse(w.view(), &gamma)
        };
        let out = center_weights(&weights, &gamma, rho);
        let shift = &out - &weights;
        for j in 1..3 {
            let diff = &shift.column(j) - &shift.column(0);
            assert!(diff.iter().all(|v| v.abs() < 1e-15));
        }
        let best = cost(&out);
        assert!(best <= cost(&weights));
        // any other common shift costs at least as much
        for u in [array![0.1, 0.0], array![0.0, -0.1], array![0.05, 0.05]] {
            let mut other = out.clone();
            for mut col in other.columns_mut() {
                col += &u;
            }
            assert!(cost(&other) >= best);
        }
    }

    #[test]
    fn separable_blobs_are_fit_exactly() {
        let spec = SynthSpec {
            class_separation: 6.0,
            noise_dims: 5,
            ..SynthSpec::default()
        };
        let ds = crate::dataset::synth_blobs(&spec, 3).unwrap();
        let hp = Hyperparams {
            dim: 3,
            ..Hyperparams::default()
        };
        let res = fit(&ds, &hp, &TrainConfig::default(), &LbfgsConfig::default()).unwrap();
        let z = transform(&res.projection, ds.features().view()).unwrap();
        let pred = res.margin.predict(z.view());
        assert_eq!(pred, ds.labels());
    }
}

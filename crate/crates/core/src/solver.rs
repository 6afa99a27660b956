//! Penalized logistic regression.
//!
//! The L1 problem is
//!
//! ```text
//! min_{w,c}  ||w||_1 + lambda * sum_i log(1 + exp(-y_i (x_i^T w + c)))
//! ```
//!
//! with the weight on the loss, not on the penalty, and an unpenalized
//! intercept. The L2 problem is
//!
//! ```text
//! min_{w,c}  sum_i log(1 + exp(-y_i (x_i^T w + c))) + lambda_ridge / 2 * ||w||_2^2
//! ```
//!
//! Both solvers standardize columns to zero mean and unit (population)
//! variance first and report `w` in that basis. Columns with zero variance are
//! dropped and get an exact zero weight.
//!
//! The L1 solver is an accelerated proximal gradient method with backtracking
//! and a monotone restart, run on a growing working set of columns: the KKT
//! conditions are checked on every column after each inner solve and the worst
//! violators are added. For the `p >> n` fits of the baselines this keeps each
//! inner problem small.

use ndarray::ArrayView2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("label {value} at index {index} is not +1 or -1")]
    InvalidLabel { index: usize, value: f64 },
    #[error("non-finite input at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("labels contain a single class; the intercept has no finite minimizer")]
    SingleClass,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Weight on the logistic loss.
    pub lambda: f64,
    pub max_iters: usize,
    /// Relative objective change below which the run counts as stalled.
    pub tol_objective: f64,
    pub tol_kkt: f64,
    pub support_epsilon: f64,
}

impl SolverConfig {
    pub const DEFAULT_MAX_ITERS: usize = 10_000;
    pub const DEFAULT_TOL_OBJECTIVE: f64 = 1e-15;
    pub const DEFAULT_TOL_KKT: f64 = 1e-6;
    pub const DEFAULT_SUPPORT_EPSILON: f64 = 1e-8;

    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            max_iters: Self::DEFAULT_MAX_ITERS,
            tol_objective: Self::DEFAULT_TOL_OBJECTIVE,
            tol_kkt: Self::DEFAULT_TOL_KKT,
            support_epsilon: Self::DEFAULT_SUPPORT_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |what: &str, v: f64| {
            Err(SolverError::InvalidConfig(format!(
                "{what} must be positive and finite, got {v}"
            )))
        };
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda", self.lambda);
        }
        if !(self.tol_objective > 0.0 && self.tol_objective.is_finite()) {
            return bad("tol_objective", self.tol_objective);
        }
        if !(self.tol_kkt > 0.0 && self.tol_kkt.is_finite()) {
            return bad("tol_kkt", self.tol_kkt);
        }
        if !(self.support_epsilon > 0.0 && self.support_epsilon.is_finite()) {
            return bad("support_epsilon", self.support_epsilon);
        }
        if self.max_iters == 0 {
            return Err(SolverError::InvalidConfig("max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Result of a penalized logistic fit.
///
/// `w` lives in the standardized basis. `column_mean` and `column_scale` map a
/// raw column to that basis: `z_j = (x_j - mean_j) / scale_j`; a zero scale
/// marks a dropped constant column.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverSolution {
    pub w: Vec<f64>,
    pub c: f64,
    pub objective: f64,
    pub kkt_residual: f64,
    pub converged: bool,
    pub iterations: usize,
    pub column_mean: Vec<f64>,
    pub column_scale: Vec<f64>,
}

impl SolverSolution {
    /// Indices with `|w_j| > eps`.
    pub fn support(&self, eps: f64) -> Vec<usize> {
        self.w
            .iter()
            .enumerate()
            .filter(|(_, w)| w.abs() > eps)
            .map(|(j, _)| j)
            .collect()
    }

    /// Linear score `c + sum_j w_j z_j` of a raw (unstandardized) row.
    pub fn decision_value(&self, row: &[f64]) -> f64 {
        let mut s = self.c;
        for (j, &x) in row.iter().enumerate() {
            let scale = self.column_scale[j];
            if scale > 0.0 && self.w[j] != 0.0 {
                s += self.w[j] * (x - self.column_mean[j]) / scale;
            }
        }
        s
    }
}

/// `log(1 + exp(t))` without overflow.
#[inline]
fn log1p_exp(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// `1 / (1 + exp(-t))` without overflow.
#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Unweighted logistic loss `sum_i log(1+exp(-y_i (x_i^T w + c)))` and its
/// gradient in `w` and `c`, on the raw inputs.
pub fn logistic_loss_and_grad(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    w: &[f64],
    c: f64,
) -> Result<(f64, Vec<f64>, f64), SolverError> {
    let (n, m) = x.dim();
    if y.len() != n || w.len() != m {
        return Err(SolverError::DimensionMismatch(format!(
            "X is {n}x{m}, y has {}, w has {}",
            y.len(),
            w.len()
        )));
    }
    let mut loss = 0.0;
    let mut gw = vec![0.0; m];
    let mut gc = 0.0;
    for (i, row) in x.rows().into_iter().enumerate() {
        let margin = c + row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        let t = -y[i] * margin;
        loss += log1p_exp(t);
        let r = -y[i] * sigmoid(t);
        gc += r;
        for (g, &v) in gw.iter_mut().zip(row.iter()) {
            *g += r * v;
        }
    }
    Ok((loss, gw, gc))
}

fn validate_inputs(x: ArrayView2<'_, f64>, y: &[f64]) -> Result<(usize, usize), SolverError> {
    let (n, m) = x.dim();
    if y.len() != n {
        return Err(SolverError::DimensionMismatch(format!(
            "X has {n} rows but y has {} entries",
            y.len()
        )));
    }
    if n == 0 {
        return Err(SolverError::DimensionMismatch("no samples".into()));
    }
    for (index, &value) in y.iter().enumerate() {
        if value != 1.0 && value != -1.0 {
            return Err(SolverError::InvalidLabel { index, value });
        }
    }
    for ((row, col), v) in x.indexed_iter() {
        if !v.is_finite() {
            return Err(SolverError::NonFinite { row, col });
        }
    }
    let pos = y.iter().filter(|&&v| v > 0.0).count();
    if pos == 0 || pos == n {
        return Err(SolverError::SingleClass);
    }
    Ok((n, m))
}

/// Standardized, column-major copy of the non-constant columns.
struct Design {
    n: usize,
    kept: Vec<usize>,
    cols: Vec<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Design {
    fn new(x: ArrayView2<'_, f64>, extra_scale: Option<&[f64]>) -> Self {
        let (n, m) = x.dim();
        let mut kept = Vec::new();
        let mut cols = Vec::new();
        let mut mean = vec![0.0; m];
        let mut scale = vec![0.0; m];
        let nf = n as f64;
        for j in 0..m {
            let col = x.column(j);
            let mu = col.sum() / nf;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / nf;
            let sd = var.sqrt();
            let max_abs = col.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            mean[j] = mu;
            if sd > 0.0 && sd > 1e-12 * max_abs {
                let u = extra_scale.map_or(1.0, |s| s[j]);
                // z = u * (x - mu) / sd  ==  (x - mu) / (sd / u)
                scale[j] = sd / u;
                kept.push(j);
                cols.extend(col.iter().map(|v| (v - mu) / scale[j]));
            }
        }
        Self {
            n,
            kept,
            cols,
            mean,
            scale,
        }
    }

    #[inline]
    fn col(&self, k: usize) -> &[f64] {
        &self.cols[k * self.n..(k + 1) * self.n]
    }

    fn width(&self) -> usize {
        self.kept.len()
    }
}

/// Smooth part `lambda * loss` restricted to a set of design columns.
struct Smooth<'a> {
    design: &'a Design,
    y: &'a [f64],
    lambda: f64,
    margins: Vec<f64>,
    resid: Vec<f64>,
}

impl<'a> Smooth<'a> {
    fn new(design: &'a Design, y: &'a [f64], lambda: f64) -> Self {
        Self {
            design,
            y,
            lambda,
            margins: vec![0.0; design.n],
            resid: vec![0.0; design.n],
        }
    }

    /// Value at `(w, c)` over columns `set`; fills margins and residuals
    /// `d loss / d margin`.
    fn value(&mut self, set: &[usize], w: &[f64], c: f64) -> f64 {
        self.margins.fill(c);
        for (&k, &wk) in set.iter().zip(w) {
            if wk != 0.0 {
                for (m, &v) in self.margins.iter_mut().zip(self.design.col(k)) {
                    *m += wk * v;
                }
            }
        }
        let mut loss = 0.0;
        for i in 0..self.design.n {
            let t = -self.y[i] * self.margins[i];
            loss += log1p_exp(t);
            self.resid[i] = -self.y[i] * sigmoid(t);
        }
        self.lambda * loss
    }

    /// Gradient of the last evaluated point, for columns `set`.
    fn gradient(&self, set: &[usize], gw: &mut [f64]) -> f64 {
        for (g, &k) in gw.iter_mut().zip(set) {
            *g = self.lambda * dot(self.design.col(k), &self.resid);
        }
        self.lambda * self.resid.iter().sum::<f64>()
    }

    fn column_gradient(&self, k: usize) -> f64 {
        self.lambda * dot(self.design.col(k), &self.resid)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Subgradient optimality violation of one L1 coordinate.
#[inline]
fn l1_violation(w: f64, g: f64, eps: f64) -> f64 {
    if w.abs() <= eps {
        (g.abs() - 1.0).max(0.0)
    } else {
        (g + w.signum()).abs()
    }
}

#[inline]
fn intercept_violation(gc: f64, lambda: f64) -> f64 {
    // gc is lambda * dloss/dc; bound both the scaled and the raw derivative
    gc.abs().max(gc.abs() / lambda)
}

struct InnerOutcome {
    iterations: usize,
    converged: bool,
}

/// Accelerated proximal gradient on the working set `set`, warm-started from
/// `(w, c)`. Accepted iterates never increase the objective.
fn solve_working_set(
    smooth: &mut Smooth<'_>,
    set: &[usize],
    w: &mut [f64],
    c: &mut f64,
    cfg: &SolverConfig,
    tol: f64,
    budget: usize,
    lipschitz: &mut f64,
) -> InnerOutcome {
    let k = set.len();
    let eps = cfg.support_epsilon;
    let mut prev_w = w.to_vec();
    let mut prev_c = *c;
    let mut t = 1.0f64;
    let mut big_f = smooth.value(set, w, *c) + l1_norm(w);

    let mut yw = vec![0.0; k];
    let mut gw = vec![0.0; k];
    let mut zw = vec![0.0; k];
    let mut stalled = 0usize;

    for it in 0..budget {
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mut beta = (t - 1.0) / t_next;
        let mut plain = beta == 0.0;
        let mut reset = false;
        loop {
            for j in 0..k {
                yw[j] = w[j] + beta * (w[j] - prev_w[j]);
            }
            let yc = *c + beta * (*c - prev_c);
            let fy = smooth.value(set, &yw, yc);
            let gc = smooth.gradient(set, &mut gw);

            if beta == 0.0 {
                // gradient at the current iterate is available: check optimality
                let viol = set_violation(w, &gw, gc, smooth.lambda, eps);
                if viol <= tol {
                    return InnerOutcome {
                        iterations: it,
                        converged: true,
                    };
                }
            }

            *lipschitz *= 0.9;
            let (zc, fz) = loop {
                let step = 1.0 / *lipschitz;
                for j in 0..k {
                    zw[j] = soft_threshold(yw[j] - step * gw[j], step);
                }
                let zc = yc - step * gc;
                let fz = smooth.value(set, &zw, zc);
                let mut lin = gc * (zc - yc);
                let mut quad = (zc - yc) * (zc - yc);
                for j in 0..k {
                    let d = zw[j] - yw[j];
                    lin += gw[j] * d;
                    quad += d * d;
                }
                let slack = 1e-13 * fy.abs().max(1.0);
                if fz <= fy + lin + 0.5 * *lipschitz * quad + slack || *lipschitz > 1e30 {
                    break (zc, fz);
                }
                *lipschitz *= 2.0;
            };
            let big_fz = fz + l1_norm(&zw);
            // a plain step passed the sufficient-decrease test; only rounding
            // can make it look like an increase
            if big_fz <= big_f || plain {
                prev_w.copy_from_slice(w);
                prev_c = *c;
                w.copy_from_slice(&zw);
                *c = zc;
                let rel = (big_f - big_fz).abs() / big_f.abs().max(1.0);
                if rel < cfg.tol_objective {
                    stalled += 1;
                } else {
                    stalled = 0;
                }
                big_f = big_fz.min(big_f);
                t = if reset { 1.0 } else { t_next };
                break;
            }
            plain = true;
            reset = true;
            beta = 0.0;
        }
        if stalled >= 200 {
            smooth.value(set, w, *c);
            let gc = smooth.gradient(set, &mut gw);
            let viol = set_violation(w, &gw, gc, smooth.lambda, eps);
            return InnerOutcome {
                iterations: it + 1,
                converged: viol <= tol,
            };
        }
        // periodic exact check at the iterate
        if it % 10 == 9 {
            smooth.value(set, w, *c);
            let gc = smooth.gradient(set, &mut gw);
            if set_violation(w, &gw, gc, smooth.lambda, eps) <= tol {
                return InnerOutcome {
                    iterations: it + 1,
                    converged: true,
                };
            }
        }
    }
    smooth.value(set, w, *c);
    let gc = smooth.gradient(set, &mut gw);
    InnerOutcome {
        iterations: budget,
        converged: set_violation(w, &gw, gc, smooth.lambda, eps) <= tol,
    }
}

fn set_violation(w: &[f64], gw: &[f64], gc: f64, lambda: f64, eps: f64) -> f64 {
    w.iter()
        .zip(gw)
        .map(|(&wj, &g)| l1_violation(wj, g, eps))
        .fold(intercept_violation(gc, lambda), f64::max)
}

fn l1_norm(w: &[f64]) -> f64 {
    w.iter().map(|v| v.abs()).sum()
}

/// L1-penalized logistic regression (loss weighted by `cfg.lambda`).
pub fn fit_l1_logistic(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    cfg: &SolverConfig,
) -> Result<SolverSolution, SolverError> {
    fit_l1_logistic_scaled(x, y, cfg, None)
}

/// As [`fit_l1_logistic`], but each standardized column `j` is multiplied by
/// `column_weights[j]` before fitting. This is the per-feature reweighting of
/// randomized L1 stability selection; it has to act after standardization or
/// the standardization would undo it.
pub fn fit_l1_logistic_scaled(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    cfg: &SolverConfig,
    column_weights: Option<&[f64]>,
) -> Result<SolverSolution, SolverError> {
    cfg.validate()?;
    let (n, m) = validate_inputs(x, y)?;
    if let Some(cw) = column_weights {
        if cw.len() != m {
            return Err(SolverError::DimensionMismatch(format!(
                "{} column weights for {m} columns",
                cw.len()
            )));
        }
        if cw.iter().any(|&u| !(u > 0.0 && u.is_finite())) {
            return Err(SolverError::InvalidConfig(
                "column weights must be positive and finite".into(),
            ));
        }
    }
    let design = Design::new(x, column_weights);
    let width = design.width();
    let eps = cfg.support_epsilon;
    let inner_tol = 0.5 * cfg.tol_kkt;

    let pos = y.iter().filter(|&&v| v > 0.0).count() as f64;
    let mut c = (pos / (n as f64 - pos)).ln();
    let mut w_full = vec![0.0; width];
    let mut in_set = vec![false; width];
    let mut set: Vec<usize> = Vec::new();
    let mut smooth = Smooth::new(&design, y, cfg.lambda);
    let mut lipschitz = cfg.lambda * n as f64 / 16.0;
    let mut iterations = 0usize;
    let mut inner_ok = true;

    loop {
        // full-gradient KKT scan at the current point
        let w_set: Vec<f64> = set.iter().map(|&k| w_full[k]).collect();
        smooth.value(&set, &w_set, c);
        let mut candidates: Vec<(usize, f64)> = (0..width)
            .filter(|&k| !in_set[k])
            .filter_map(|k| {
                let v = smooth.column_gradient(k).abs() - 1.0;
                (v > inner_tol).then_some((k, v))
            })
            .collect();
        if candidates.is_empty() && inner_ok {
            break;
        }
        if iterations >= cfg.max_iters {
            break;
        }
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let grow = set.len().max(8);
        for &(k, _) in candidates.iter().take(grow) {
            in_set[k] = true;
            set.push(k);
        }
        set.sort_unstable();

        let mut w_set: Vec<f64> = set.iter().map(|&k| w_full[k]).collect();
        let out = solve_working_set(
            &mut smooth,
            &set,
            &mut w_set,
            &mut c,
            cfg,
            inner_tol,
            cfg.max_iters - iterations,
            &mut lipschitz,
        );
        iterations += out.iterations.max(1);
        inner_ok = out.converged;
        for (&k, &v) in set.iter().zip(&w_set) {
            w_full[k] = v;
        }
    }

    // final certificate over every column
    let all: Vec<usize> = (0..width).collect();
    let smooth_val = smooth.value(&all, &w_full, c);
    let mut g = vec![0.0; width];
    let gc = smooth.gradient(&all, &mut g);
    let kkt = set_violation(&w_full, &g, gc, cfg.lambda, eps);
    let objective = smooth_val + l1_norm(&w_full);

    let mut w = vec![0.0; m];
    for (&j, &v) in design.kept.iter().zip(&w_full) {
        w[j] = v;
    }
    Ok(SolverSolution {
        w,
        c,
        objective,
        kkt_residual: kkt,
        converged: kkt <= cfg.tol_kkt,
        iterations,
        column_mean: design.mean,
        column_scale: design.scale,
    })
}

/// Options for the L2 solver beyond the ridge weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RidgeOptions {
    pub max_iters: usize,
    /// Target Euclidean norm of the objective gradient (weights and intercept).
    pub tol_grad: f64,
}

impl Default for RidgeOptions {
    fn default() -> Self {
        Self {
            max_iters: 100_000,
            tol_grad: SolverConfig::DEFAULT_TOL_KKT,
        }
    }
}

/// L2-penalized logistic regression with default tolerances.
pub fn fit_l2_logistic(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    lambda_ridge: f64,
) -> Result<SolverSolution, SolverError> {
    fit_l2_logistic_with(x, y, lambda_ridge, &RidgeOptions::default())
}

/// L2-penalized logistic regression by accelerated gradient descent with
/// backtracking and function-value restart.
pub fn fit_l2_logistic_with(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    lambda_ridge: f64,
    opts: &RidgeOptions,
) -> Result<SolverSolution, SolverError> {
    if !(lambda_ridge > 0.0 && lambda_ridge.is_finite()) {
        return Err(SolverError::InvalidConfig(format!(
            "lambda_ridge must be positive and finite, got {lambda_ridge}"
        )));
    }
    if opts.max_iters == 0 || !(opts.tol_grad > 0.0) {
        return Err(SolverError::InvalidConfig("bad ridge options".into()));
    }
    let (n, m) = validate_inputs(x, y)?;
    let design = Design::new(x, None);
    let width = design.width();
    let all: Vec<usize> = (0..width).collect();
    let mut smooth = Smooth::new(&design, y, 1.0);

    let objective = |smooth: &mut Smooth<'_>, w: &[f64], c: f64| {
        smooth.value(&all, w, c) + 0.5 * lambda_ridge * w.iter().map(|v| v * v).sum::<f64>()
    };
    let grad = |smooth: &Smooth<'_>, w: &[f64], gw: &mut [f64]| {
        let gc = smooth.gradient(&all, gw);
        for (g, &v) in gw.iter_mut().zip(w) {
            *g += lambda_ridge * v;
        }
        gc
    };

    let pos = y.iter().filter(|&&v| v > 0.0).count() as f64;
    let mut c = (pos / (n as f64 - pos)).ln();
    let mut w = vec![0.0; width];
    let mut prev_w = w.clone();
    let mut prev_c = c;
    let mut t = 1.0f64;
    let mut lipschitz = (n as f64 / 16.0 + lambda_ridge).max(1e-12);
    let mut fx = objective(&mut smooth, &w, c);
    let mut yw = vec![0.0; width];
    let mut gw = vec![0.0; width];
    let mut zw = vec![0.0; width];
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;

    while iterations < opts.max_iters {
        iterations += 1;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mut beta = (t - 1.0) / t_next;
        let mut plain = beta == 0.0;
        let mut reset = false;
        loop {
            for j in 0..width {
                yw[j] = w[j] + beta * (w[j] - prev_w[j]);
            }
            let yc = c + beta * (c - prev_c);
            let fy = objective(&mut smooth, &yw, yc);
            let gc = grad(&smooth, &yw, &mut gw);
            let gsq = gc * gc + gw.iter().map(|g| g * g).sum::<f64>();
            if beta == 0.0 {
                grad_norm = gsq.sqrt();
                if grad_norm <= opts.tol_grad {
                    break;
                }
            }
            lipschitz *= 0.9;
            let (zc, fz) = loop {
                let step = 1.0 / lipschitz;
                for j in 0..width {
                    zw[j] = yw[j] - step * gw[j];
                }
                let zc = yc - step * gc;
                let fz = objective(&mut smooth, &zw, zc);
                let slack = 1e-13 * fy.abs().max(1.0);
                if fz <= fy - 0.5 * step * gsq + slack || lipschitz > 1e30 {
                    break (zc, fz);
                }
                lipschitz *= 2.0;
            };
            if fz <= fx || plain {
                prev_w.copy_from_slice(&w);
                prev_c = c;
                w.copy_from_slice(&zw);
                c = zc;
                fx = fz.min(fx);
                t = if reset { 1.0 } else { t_next };
                break;
            }
            plain = true;
            reset = true;
            beta = 0.0;
        }
        if grad_norm <= opts.tol_grad {
            break;
        }
        if iterations % 10 == 0 {
            smooth.value(&all, &w, c);
            let gc = grad(&smooth, &w, &mut gw);
            grad_norm = (gc * gc + gw.iter().map(|g| g * g).sum::<f64>()).sqrt();
            if grad_norm <= opts.tol_grad {
                break;
            }
        }
    }
    let fx = objective(&mut smooth, &w, c);
    let gc = grad(&smooth, &w, &mut gw);
    grad_norm = (gc * gc + gw.iter().map(|g| g * g).sum::<f64>()).sqrt();

    let mut w_out = vec![0.0; m];
    for (&j, &v) in design.kept.iter().zip(&w) {
        w_out[j] = v;
    }
    Ok(SolverSolution {
        w: w_out,
        c,
        objective: fx,
        kkt_residual: grad_norm,
        converged: grad_norm <= opts.tol_grad,
        iterations,
        column_mean: design.mean,
        column_scale: design.scale,
    })
}

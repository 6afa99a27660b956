//! Independent reference computations for the tests. Nothing in here calls the
//! code path it is used to check.

#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};

/// Column standardization to zero mean and unit population variance.
/// Constant columns become all-zero.
pub fn standardize(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, m) = x.dim();
    let mut z = Array2::zeros((n, m));
    for j in 0..m {
        let mean = (0..n).map(|i| x[[i, j]]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x[[i, j]] - mean).powi(2)).sum::<f64>() / n as f64;
        if var > 0.0 {
            for i in 0..n {
                z[[i, j]] = (x[[i, j]] - mean) / var.sqrt();
            }
        }
    }
    z
}

fn softplus(t: f64) -> f64 {
    // log(1 + e^t), written independently of the crate's helper
    if t > 30.0 {
        t + (-t).exp()
    } else {
        (1.0 + t.exp()).ln()
    }
}

/// `||w||_1 + lambda * sum_i log(1 + exp(-y_i (z_i w + c)))`.
pub fn l1_objective(z: ArrayView2<'_, f64>, y: &[f64], lambda: f64, w: &[f64], c: f64) -> f64 {
    let mut loss = 0.0;
    for i in 0..z.nrows() {
        let mut m = c;
        for j in 0..z.ncols() {
            m += z[[i, j]] * w[j];
        }
        loss += softplus(-y[i] * m);
    }
    w.iter().map(|v| v.abs()).sum::<f64>() + lambda * loss
}

/// Coarse-to-fine grid search for the minimizer of a convex function on
/// `R^dim`. Each level evaluates a `points^dim` grid; the window recenters if
/// the best point sits on its boundary and otherwise shrinks to three cells
/// around it. Stops once the cell width is at most `resolution`.
pub fn grid_minimize(
    f: impl Fn(&[f64]) -> f64,
    dim: usize,
    half_width: f64,
    resolution: f64,
) -> Vec<f64> {
    let points = 21usize;
    let mut center = vec![0.0; dim];
    let mut hw = half_width;
    let mut guard = 0;
    loop {
        guard += 1;
        assert!(guard < 500, "grid search did not settle");
        let cell = 2.0 * hw / (points - 1) as f64;
        let total = points.pow(dim as u32);
        let mut best = (f64::INFINITY, vec![0usize; dim]);
        let mut idx = vec![0usize; dim];
        let mut pt = vec![0.0; dim];
        for flat in 0..total {
            let mut r = flat;
            for d in 0..dim {
                idx[d] = r % points;
                r /= points;
                pt[d] = center[d] - hw + cell * idx[d] as f64;
            }
            let v = f(&pt);
            if v < best.0 {
                best = (v, idx.clone());
            }
        }
        let on_edge = best.1.iter().any(|&i| i == 0 || i == points - 1);
        for d in 0..dim {
            center[d] = center[d] - hw + cell * best.1[d] as f64;
        }
        if on_edge {
            continue;
        }
        if cell <= resolution {
            return center;
        }
        hw = 3.0 * cell;
    }
}

/// Logistic loss (unweighted) and its analytic gradient, written out directly.
pub fn loss_and_grad(x: ArrayView2<'_, f64>, y: &[f64], w: &[f64], c: f64) -> (f64, Vec<f64>, f64) {
    let (n, m) = x.dim();
    let mut loss = 0.0;
    let mut gw = vec![0.0; m];
    let mut gc = 0.0;
    for i in 0..n {
        let mut margin = c;
        for j in 0..m {
            margin += x[[i, j]] * w[j];
        }
        loss += softplus(-y[i] * margin);
        // d/dm log(1+exp(-y m)) = -y / (1 + exp(y m))
        let r = -y[i] / (1.0 + (y[i] * margin).exp());
        gc += r;
        for j in 0..m {
            gw[j] += r * x[[i, j]];
        }
    }
    (loss, gw, gc)
}

/// Central finite differences of `f` at `at` with step `h`.
pub fn central_differences(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(at.len());
    let mut p = at.to_vec();
    for k in 0..at.len() {
        p[k] = at[k] + h;
        let up = f(&p);
        p[k] = at[k] - h;
        let down = f(&p);
        p[k] = at[k];
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Plain gradient descent on the standardized ridge-logistic objective with a
/// fixed small step. Returns `(w, c)`.
pub fn ridge_gradient_descent(
    z: ArrayView2<'_, f64>,
    y: &[f64],
    lambda_ridge: f64,
    step: f64,
    iters: usize,
) -> (Vec<f64>, f64) {
    let m = z.ncols();
    let mut w = vec![0.0; m];
    let mut c = 0.0;
    for _ in 0..iters {
        let (_, gw, gc) = loss_and_grad(z, y, &w, c);
        for j in 0..m {
            w[j] -= step * (gw[j] + lambda_ridge * w[j]);
        }
        c -= step * gc;
    }
    (w, c)
}

/// Precision/recall for every threshold in `scores ∪ {+inf}`, computed by
/// direct counting, ordered by descending threshold.
pub fn brute_force_pr(scores: &[f64], truth: &[usize]) -> Vec<(f64, f64, f64)> {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    thresholds
        .into_iter()
        .map(|t| {
            let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
            let tp = selected.iter().filter(|i| truth.contains(i)).count();
            let precision = if selected.is_empty() { 1.0 } else { tp as f64 / selected.len() as f64 };
            (t, precision, tp as f64 / truth.len() as f64)
        })
        .collect()
}

/// Trapezoid over recall for points already ordered by descending threshold.
pub fn trapezoid_auc(points: &[(f64, f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].2 - w[0].2) * 0.5 * (w[1].1 + w[0].1))
        .sum()
}

/// The `t` best features by brute-force ranking: feature `i` is in the set iff
/// fewer than `t` features beat it (higher score, or equal score and lower index).
pub fn brute_force_top_t(scores: &[f64], t: usize) -> Vec<usize> {
    (0..scores.len())
        .filter(|&i| {
            let better = (0..scores.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count();
            better < t
        })
        .collect()
}

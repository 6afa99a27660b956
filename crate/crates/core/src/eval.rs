//! Scoring selectors against ground truth and choosing thresholds.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{randomized_l1, BaselineError, RandL1Config};
use crate::data::{check_feature_set, DataError, Dataset, Parcellation, StabilityScores};
use crate::rng::derive_stream;
use crate::solver::{fit_l2_logistic, SolverError};
use crate::stability::{run_stability_selection, threshold_scores, StabilityConfig, StabilityError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground truth is empty")]
    EmptyTruth,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("every threshold in the grid selects zero features")]
    AllThresholdsEmpty,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall of `{i : score_i >= threshold}` for every distinct
/// score, in ascending threshold order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    /// Trapezoid area under precision over recall, integrated from the empty
    /// selection (recall 0, precision 1) through every point.
    pub auc: f64,
}

fn check_scores(scores: &[f64]) -> Result<(), EvalError> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::InvalidArgument(format!("score {i} is not finite")));
    }
    Ok(())
}

pub fn precision_recall_curve(scores: &[f64], truth: &[usize]) -> Result<PrCurve, EvalError> {
    if truth.is_empty() {
        return Err(EvalError::EmptyTruth);
    }
    check_scores(scores)?;
    check_feature_set(truth, scores.len())?;
    let mut is_true = vec![false; scores.len()];
    for &t in truth {
        is_true[t] = true;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // sweep from the highest threshold down
    let total_true = truth.len() as f64;
    let mut desc = Vec::new();
    let (mut selected, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            selected += 1;
            tp += usize::from(is_true[order[i]]);
            i += 1;
        }
        desc.push(PrPoint {
            threshold: t,
            precision: tp as f64 / selected as f64,
            recall: tp as f64 / total_true,
        });
    }

    let mut auc = 0.0;
    let (mut prev_r, mut prev_p) = (0.0, 1.0);
    for pt in &desc {
        auc += (pt.recall - prev_r) * 0.5 * (pt.precision + prev_p);
        prev_r = pt.recall;
        prev_p = pt.precision;
    }
    desc.reverse();
    Ok(PrCurve { points: desc, auc })
}

/// The `t` highest-scoring features, ties broken towards the lower index,
/// returned in index order. `t` larger than the feature count selects all.
pub fn top_t_selection(scores: &[f64], t: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(t);
    order.sort_unstable();
    order
}

/// Fraction of `selected` that lies in `truth`.
pub fn selection_precision(selected: &[usize], truth: &[usize]) -> f64 {
    if selected.is_empty() {
        return 1.0;
    }
    let hits = selected.iter().filter(|s| truth.contains(s)).count();
    hits as f64 / selected.len() as f64
}

/// Number of `selected` features found in `truth`.
pub fn true_positives(selected: &[usize], truth: &[usize]) -> usize {
    let mut t = truth.to_vec();
    t.sort_unstable();
    selected.iter().filter(|s| t.binary_search(s).is_ok()).count()
}

/// Stratified cross-validation folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub k: usize,
    /// Shuffle each class before dealing samples round-robin into folds.
    pub shuffle_seed: Option<u64>,
}

impl Default for FoldSpec {
    fn default() -> Self {
        Self { k: 5, shuffle_seed: None }
    }
}

impl FoldSpec {
    /// Held-out row sets; the `i`-th sample of each class goes to fold `i % k`.
    pub fn folds(&self, d: &Dataset) -> Result<Vec<Vec<usize>>, EvalError> {
        let (mut pos, mut neg) = d.class_indices();
        if self.k < 2 || self.k > pos.len().min(neg.len()) {
            return Err(EvalError::InvalidArgument(format!(
                "{} folds need at least that many samples per class ({} and {})",
                self.k,
                pos.len(),
                neg.len()
            )));
        }
        if let Some(seed) = self.shuffle_seed {
            let mut rng = derive_stream(seed, 0).rng();
            pos.shuffle(&mut rng);
            neg.shuffle(&mut rng);
        }
        let mut folds = vec![Vec::new(); self.k];
        for class in [&pos, &neg] {
            for (i, &row) in class.iter().enumerate() {
                folds[i % self.k].push(row);
            }
        }
        for f in &mut folds {
            f.sort_unstable();
        }
        Ok(folds)
    }
}

/// Accuracy on `test` of a ridge-logistic fit on `train`, both restricted to
/// `features`. A sample is predicted a case when its linear score is >= 0.
pub fn prediction_accuracy(
    train: &Dataset,
    test: &Dataset,
    features: &[usize],
    lambda_ridge: f64,
) -> Result<f64, EvalError> {
    if features.is_empty() {
        return Err(EvalError::InvalidArgument("feature set is empty".into()));
    }
    if train.p() != test.p() {
        return Err(EvalError::InvalidArgument(format!(
            "train has {} features, test has {}",
            train.p(),
            test.p()
        )));
    }
    check_feature_set(features, train.p())?;
    let xt = train.x().select(Axis(1), features);
    let sol = fit_l2_logistic(xt.view(), train.y(), lambda_ridge)?;
    let xs = test.x().select(Axis(1), features);
    let correct = xs
        .rows()
        .into_iter()
        .zip(test.y())
        .filter(|(row, &y)| {
            let f = sol.decision_value(&row.to_vec());
            (f >= 0.0) == (y > 0.0)
        })
        .count();
    Ok(correct as f64 / test.n() as f64)
}

/// Mean held-out accuracy of ridge-logistic models restricted to
/// `{i : scores_i >= tau}`, for each `tau` in `grid`.
pub fn cv_accuracies(
    d: &Dataset,
    scores: &[f64],
    grid: &[f64],
    folds: &FoldSpec,
    lambda_ridge: f64,
) -> Result<Vec<Option<f64>>, EvalError> {
    if scores.len() != d.p() {
        return Err(EvalError::InvalidArgument(format!("{} scores for {} features", scores.len(), d.p())));
    }
    check_scores(scores)?;
    let held_out = folds.folds(d)?;
    let splits: Vec<(Dataset, Dataset)> = held_out
        .iter()
        .map(|test| {
            let train: Vec<usize> = (0..d.n()).filter(|i| test.binary_search(i).is_err()).collect();
            (d.select_rows(&train), d.select_rows(test))
        })
        .collect();
    grid.iter()
        .map(|&tau| {
            let features: Vec<usize> = (0..d.p()).filter(|&i| scores[i] >= tau).collect();
            if features.is_empty() {
                return Ok(None);
            }
            let mut total = 0.0;
            for (train, test) in &splits {
                total += prediction_accuracy(train, test, &features, lambda_ridge)?;
            }
            Ok(Some(total / splits.len() as f64))
        })
        .collect()
}

/// The threshold in `grid` with the best cross-validated accuracy; ties go to
/// the larger threshold. Thresholds selecting nothing are skipped.
pub fn cv_threshold(
    d: &Dataset,
    scores: &[f64],
    grid: &[f64],
    folds: &FoldSpec,
    lambda_ridge: f64,
) -> Result<f64, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::InvalidArgument("threshold grid is empty".into()));
    }
    let acc = cv_accuracies(d, scores, grid, folds, lambda_ridge)?;
    let mut best: Option<(f64, f64)> = None;
    for (&tau, a) in grid.iter().zip(acc) {
        let Some(a) = a else { continue };
        best = match best {
            Some((bt, ba)) if ba > a || (ba == a && bt > tau) => Some((bt, ba)),
            _ => Some((tau, a)),
        };
    }
    best.map(|b| b.0).ok_or(EvalError::AllThresholdsEmpty)
}

/// The stability-style selectors a permutation estimate can rerun.
#[derive(Debug, Clone)]
pub enum Selector {
    Rss { parcellation: Parcellation, config: StabilityConfig },
    RandL1(RandL1Config),
}

impl Selector {
    pub fn run(&self, d: &Dataset) -> Result<StabilityScores, EvalError> {
        Ok(match self {
            Selector::Rss { parcellation, config } => run_stability_selection(d, parcellation, config)?,
            Selector::RandL1(cfg) => randomized_l1(d, cfg)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationReport {
    pub tau: f64,
    #[serde(rename = "B")]
    pub b: usize,
    /// Mean selection count over the permuted runs.
    pub estimate: f64,
    /// Selection count on the original labels.
    pub observed_count: usize,
    pub per_permutation: Vec<usize>,
}

/// Permutation `b` of the labels of `d`.
pub fn permuted_labels(d: &Dataset, seed: u64, b: u64) -> Vec<f64> {
    let mut y = d.y().to_vec();
    y.shuffle(&mut derive_stream(seed, b).rng());
    y
}

/// False-positive estimate by label permutation: rerun `selector` on `b`
/// independently permuted label vectors and average how many features reach
/// a normalized score of `tau`.
pub fn permutation_fp_estimate(
    d: &Dataset,
    selector: &Selector,
    tau: f64,
    b: usize,
    seed: u64,
) -> Result<PermutationReport, EvalError> {
    if b == 0 {
        return Err(EvalError::InvalidArgument("B must be at least 1".into()));
    }
    if tau.is_nan() {
        return Err(EvalError::InvalidArgument("tau is NaN".into()));
    }
    let observed_count = threshold_scores(&selector.run(d)?, tau).len();
    let per_permutation = (0..b as u64)
        .into_par_iter()
        .map(|perm| {
            let dp = d.with_labels(permuted_labels(d, seed, perm))?;
            Ok(threshold_scores(&selector.run(&dp)?, tau).len())
        })
        .collect::<Result<Vec<usize>, EvalError>>()?;
    let estimate = per_permutation.iter().sum::<usize>() as f64 / b as f64;
    Ok(PermutationReport {
        tau,
        b,
        estimate,
        observed_count,
        per_permutation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrSummary {
    pub auc: f64,
    #[serde(rename = "T")]
    pub t: usize,
    pub top_t_precision: f64,
}

fn file_err(path: &Path) -> impl Fn(std::io::Error) -> EvalError + '_ {
    move |e| EvalError::File {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// CSV with header `threshold,precision,recall`, ascending threshold.
pub fn write_pr_csv(path: &Path, curve: &PrCurve) -> Result<(), EvalError> {
    let io = file_err(path);
    let mut w = BufWriter::new(fs::File::create(path).map_err(&io)?);
    writeln!(w, "threshold,precision,recall").map_err(&io)?;
    for p in &curve.points {
        writeln!(w, "{},{},{}", p.threshold, p.precision, p.recall).map_err(&io)?;
    }
    w.flush().map_err(&io)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EvalError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| EvalError::File {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(file_err(path))
}

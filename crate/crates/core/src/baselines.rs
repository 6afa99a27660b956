//! Reference selectors: Welch t-test, L1 and L2 logistic weights, and
//! classical randomized-L1 stability selection.

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, StabilityScores};
use crate::rng::derive_stream;
use crate::solver::{fit_l1_logistic, fit_l1_logistic_scaled, fit_l2_logistic, SolverConfig, SolverError};
use crate::stability::{accumulate, draw_row_subsample, StabilityError};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid baseline configuration: {0}")]
    InvalidConfig(String),
    #[error("class {label} has {count} samples; at least 2 are needed")]
    TooFewSamples { label: i8, count: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
}

/// `|t|` of Welch's unequal-variance t statistic per column, cases against
/// controls. Columns whose denominator vanishes score 0.
pub fn ttest_scores(d: &Dataset) -> Result<Vec<f64>, BaselineError> {
    let (pos, neg) = d.class_indices();
    for (label, idx) in [(1, &pos), (-1, &neg)] {
        if idx.len() < 2 {
            return Err(BaselineError::TooFewSamples { label, count: idx.len() });
        }
    }
    let x = d.x();
    let moments = |idx: &[usize], j: usize| {
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| x[[i, j]]).sum::<f64>() / n;
        let var = idx.iter().map(|&i| (x[[i, j]] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var / n)
    };
    Ok((0..d.p())
        .map(|j| {
            let (m1, v1) = moments(&pos, j);
            let (m2, v2) = moments(&neg, j);
            let se = (v1 + v2).sqrt();
            if se > 0.0 {
                ((m1 - m2) / se).abs()
            } else {
                0.0
            }
        })
        .collect())
}

/// Loss weight for [`l1_weight_scores`] when none is given.
pub const DEFAULT_L1_LAMBDA: f64 = 100.0;

/// `|w_j|` of one full-data L1-logistic fit with loss weight `lambda`.
pub fn l1_weight_scores(d: &Dataset, lambda: f64) -> Result<Vec<f64>, BaselineError> {
    let sol = fit_l1_logistic(d.x(), d.y(), &SolverConfig::new(lambda))?;
    Ok(sol.w.iter().map(|w| w.abs()).collect())
}

/// `|w_j|` of one full-data ridge-logistic fit.
pub fn l2_weight_scores(d: &Dataset, lambda_ridge: f64) -> Result<Vec<f64>, BaselineError> {
    let sol = fit_l2_logistic(d.x(), d.y(), lambda_ridge)?;
    Ok(sol.w.iter().map(|w| w.abs()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandL1Config {
    pub k: usize,
    pub row_fraction: f64,
    /// Lower end `a` of the per-feature rescaling interval `[a, 1]`.
    pub weakness: f64,
    pub lambda: f64,
    pub master_seed: u64,
}

impl RandL1Config {
    pub const DEFAULT_K: usize = 500;
    pub const DEFAULT_ROW_FRACTION: f64 = 0.5;
    pub const DEFAULT_WEAKNESS: f64 = 0.5;
    /// Large enough that subsample fits sit near their separable limit.
    pub const DEFAULT_LAMBDA: f64 = 10_000.0;

    pub fn new(master_seed: u64) -> Self {
        Self {
            k: Self::DEFAULT_K,
            row_fraction: Self::DEFAULT_ROW_FRACTION,
            weakness: Self::DEFAULT_WEAKNESS,
            lambda: Self::DEFAULT_LAMBDA,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        let bad = |m: String| Err(BaselineError::InvalidConfig(m));
        if self.k == 0 {
            return bad("K must be at least 1".into());
        }
        if !(self.row_fraction > 0.0 && self.row_fraction <= 1.0) {
            return bad(format!("row_fraction must lie in (0, 1], got {}", self.row_fraction));
        }
        if !(self.weakness > 0.0 && self.weakness <= 1.0) {
            return bad(format!("weakness must lie in (0, 1], got {}", self.weakness));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive and finite, got {}", self.lambda));
        }
        Ok(())
    }
}

/// Row subset and column weights used by iteration `iteration` of
/// [`randomized_l1`]. The weights are `None` when `weakness == 1`.
pub fn randomized_l1_draw(
    n: usize,
    p: usize,
    cfg: &RandL1Config,
    iteration: u64,
) -> Result<(Vec<usize>, Option<Vec<f64>>), BaselineError> {
    let mut rng = derive_stream(cfg.master_seed, iteration).rng();
    let rows = draw_row_subsample(n, cfg.row_fraction, &mut rng)?;
    let weights = (cfg.weakness < 1.0).then(|| {
        (0..p)
            .map(|_| rng.random_range(cfg.weakness..=1.0))
            .collect()
    });
    Ok((rows, weights))
}

/// Randomized-L1 stability selection: per iteration, subsample rows, rescale
/// every column by an independent draw from `[weakness, 1]`, fit, and count
/// the support.
pub fn randomized_l1(d: &Dataset, cfg: &RandL1Config) -> Result<StabilityScores, BaselineError> {
    cfg.validate()?;
    let solver = SolverConfig::new(cfg.lambda);
    let x = d.x();
    let y = d.y();
    let scores = accumulate(d.p(), cfg.k, |it| {
        let (rows, weights) = randomized_l1_draw(d.n(), d.p(), cfg, it as u64)
            .map_err(|e| match e {
                BaselineError::Stability(s) => s,
                other => StabilityError::InvalidConfig(other.to_string()),
            })?;
        let xs = x.select(Axis(0), &rows);
        let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        match fit_l1_logistic_scaled(xs.view(), &ys, &solver, weights.as_deref()) {
            Ok(sol) => Ok((sol.support(solver.support_epsilon), Ok(sol.converged))),
            Err(SolverError::SingleClass) => Ok((Vec::new(), Err("row subsample has a single class".into()))),
            Err(e) => Err(e.into()),
        }
    })?;
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn dataset(x: Array2<f64>, y: Vec<f64>) -> Dataset {
        Dataset::new(x, y, None).unwrap()
    }

    fn planted(n: usize, p: usize, shift: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let x = Array2::from_shape_fn((n, p), |(i, j)| {
            let e: f64 = rng.sample(StandardNormal);
            if j == 0 {
                e + shift * y[i]
            } else {
                e
            }
        });
        dataset(x, y)
    }

    #[test]
    fn welch_by_hand() {
        let d = dataset(array![[2.0], [4.0], [1.0], [3.0]], vec![1.0, 1.0, -1.0, -1.0]);
        let t = ttest_scores(&d).unwrap();
        assert!((t[0] - 1.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn welch_identical_classes_and_constant_columns() {
        let d = dataset(
            array![[1.0, 5.0], [2.0, 5.0], [1.0, 5.0], [2.0, 5.0]],
            vec![1.0, 1.0, -1.0, -1.0],
        );
        assert_eq!(ttest_scores(&d).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn welch_needs_two_per_class() {
        let d = dataset(array![[1.0], [2.0], [3.0]], vec![1.0, -1.0, -1.0]);
        assert!(matches!(ttest_scores(&d), Err(BaselineError::TooFewSamples { label: 1, .. })));
    }

    #[test]
    fn welch_ranks_planted_column_first() {
        let t = ttest_scores(&planted(60, 30, 1.5, 1)).unwrap();
        assert!(t[1..].iter().all(|&v| v < t[0]));
        assert!(t.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn weight_scores_limits() {
        let d = planted(40, 10, 1.0, 2);
        let l1 = l1_weight_scores(&d, 1e-12).unwrap();
        assert!(l1.iter().all(|&v| (0.0..=1e-6).contains(&v)));
        let l1 = l1_weight_scores(&d, 1.0).unwrap();
        assert!(l1.iter().all(|&v| v >= 0.0) && l1[0] > 0.0);
        let l2 = l2_weight_scores(&d, 1e9).unwrap();
        assert!(l2.iter().all(|&v| (0.0..1e-6).contains(&v)));
        let l2 = l2_weight_scores(&d, 1.0).unwrap();
        assert!(l2.iter().all(|&v| v >= 0.0) && l2.len() == 10);
    }

    #[test]
    fn weakness_one_means_no_rescaling() {
        let cfg = RandL1Config { weakness: 1.0, ..RandL1Config::new(3) };
        let (rows, w) = randomized_l1_draw(20, 5, &cfg, 0).unwrap();
        assert_eq!(rows.len(), 10);
        assert!(w.is_none());
        let cfg = RandL1Config::new(3);
        let (_, w) = randomized_l1_draw(20, 5, &cfg, 0).unwrap();
        assert!(w.unwrap().iter().all(|u| (0.5..=1.0).contains(u)));
    }

    #[test]
    fn randomized_l1_finds_separating_feature() {
        let d = planted(60, 51, 2.0, 4);
        let cfg = RandL1Config { k: 100, lambda: 0.3, ..RandL1Config::new(4) };
        let s = randomized_l1(&d, &cfg).unwrap();
        assert!(s.counts().iter().all(|&c| c <= 100));
        let norm = s.normalized();
        assert!(norm[1..].iter().all(|&v| v <= norm[0]));
        assert!(norm[0] > 0.5);
    }

    #[test]
    fn randomized_l1_is_schedule_independent() {
        let d = planted(30, 40, 1.0, 5);
        let cfg = RandL1Config { k: 24, lambda: 0.5, ..RandL1Config::new(6) };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| randomized_l1(&d, &cfg).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn bad_rand_l1_configs() {
        let d = planted(10, 3, 1.0, 0);
        for cfg in [
            RandL1Config { k: 0, ..RandL1Config::new(0) },
            RandL1Config { weakness: 0.0, ..RandL1Config::new(0) },
            RandL1Config { row_fraction: 1.5, ..RandL1Config::new(0) },
        ] {
            assert!(matches!(randomized_l1(&d, &cfg), Err(BaselineError::InvalidConfig(_))));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn welch_is_scale_invariant(
            vals in proptest::collection::vec(-10.0f64..10.0, 8),
            scale in 0.01f64..100.0,
        ) {
            let y = vec![1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0];
            let x = Array2::from_shape_vec((8, 1), vals.clone()).unwrap();
            let xs = x.mapv(|v| v * scale);
            let a = ttest_scores(&dataset(x, y.clone())).unwrap()[0];
            let b = ttest_scores(&dataset(xs, y)).unwrap()[0];
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
            prop_assert!(!a.is_nan());
        }
    }
}

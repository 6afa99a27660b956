//! One-time k-means parcellation of the features.
//!
//! Each feature is represented by its standardized column (optionally with
//! scaled grid coordinates appended) and clustered by Lloyd's algorithm with
//! k-means++ seeding. Lloyd iterations use Hamerly's bounds to skip distance
//! scans; the result is the same fixed point plain Lloyd reaches from the same
//! seeds.
//!
//! All floating-point reductions that feed a decision (seeding weights, the
//! restart objective) are summed sequentially in point order, so the output does
//! not depend on the rayon pool size.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, Parcellation};
use crate::rng::derive_stream;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("need at least q = {q} points, got {p}")]
    TooFewPoints { p: usize, q: usize },
    #[error("invalid cluster configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite feature value at row {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("parcellation file {path}: {msg}")]
    File { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub q: usize,
    pub restarts: usize,
    pub max_lloyd_iters: usize,
    pub spatial_weight: f64,
    pub seed: u64,
}

impl ClusterConfig {
    pub const DEFAULT_RESTARTS: usize = 10;
    pub const DEFAULT_MAX_LLOYD_ITERS: usize = 300;

    pub fn new(q: usize, seed: u64) -> Self {
        Self {
            q,
            restarts: Self::DEFAULT_RESTARTS,
            max_lloyd_iters: Self::DEFAULT_MAX_LLOYD_ITERS,
            spatial_weight: 0.0,
            seed,
        }
    }

    fn validate(&self) -> Result<(), ClusterError> {
        if self.q == 0 {
            return Err(ClusterError::InvalidConfig("q must be at least 1".into()));
        }
        if self.restarts == 0 || self.max_lloyd_iters == 0 {
            return Err(ClusterError::InvalidConfig(
                "restarts and max_lloyd_iters must be positive".into(),
            ));
        }
        if !(self.spatial_weight >= 0.0 && self.spatial_weight.is_finite()) {
            return Err(ClusterError::InvalidConfig(format!(
                "spatial_weight must be a non-negative number, got {}",
                self.spatial_weight
            )));
        }
        Ok(())
    }
}

/// One row per feature: its standardized column, followed by
/// `spatial_weight * coordinate / (dim - 1)` when the dataset has geometry and
/// the weight is positive.
pub fn build_feature_vectors(d: &Dataset, spatial_weight: f64) -> Array2<f64> {
    let n = d.n();
    let p = d.p();
    let spatial = d.geometry().filter(|_| spatial_weight > 0.0);
    let f = n + if spatial.is_some() { 3 } else { 0 };
    let mut out = Array2::zeros((p, f));
    let x = d.x();
    for j in 0..p {
        let col = x.column(j);
        let mu = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        let mut row = out.row_mut(j);
        if sd > 0.0 {
            for (i, v) in col.iter().enumerate() {
                row[i] = (v - mu) / sd;
            }
        }
        if let Some(g) = spatial {
            let dims = g.dims();
            let c = g.mask()[j];
            for a in 0..3 {
                let span = (dims[a].max(2) - 1) as f64;
                row[n + a] = spatial_weight * c[a] as f64 / span;
            }
        }
    }
    out
}

/// Outcome of the best restart.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub parcellation: Parcellation,
    /// Within-cluster sum of squared distances.
    pub wcss: f64,
    pub restart: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// k-means partition of the rows of `features` into `cfg.q` clusters.
pub fn kmeans(features: ArrayView2<'_, f64>, cfg: &ClusterConfig) -> Result<Parcellation, ClusterError> {
    Ok(kmeans_fit(features, cfg)?.parcellation)
}

/// As [`kmeans`], also reporting the objective and the winning restart.
pub fn kmeans_fit(features: ArrayView2<'_, f64>, cfg: &ClusterConfig) -> Result<KMeansFit, ClusterError> {
    cfg.validate()?;
    let (p, f) = features.dim();
    if p < cfg.q {
        return Err(ClusterError::TooFewPoints { p, q: cfg.q });
    }
    let points = features.as_standard_layout();
    let points = points.as_slice().expect("standard layout");
    if let Some(i) = points.iter().position(|v| !v.is_finite()) {
        return Err(ClusterError::NonFinite(i / f.max(1)));
    }

    let mut best: Option<(f64, usize, Run)> = None;
    for restart in 0..cfg.restarts {
        let mut rng = derive_stream(cfg.seed, restart as u64).rng();
        let mut centers = kmeans_pp(points, f, cfg.q, &mut rng);
        let run = lloyd(points, f, &mut centers, cfg.max_lloyd_iters, None);
        let cost = wcss(points, f, &centers, &run.assignment);
        if best.as_ref().is_none_or(|(b, _, _)| cost < *b) {
            best = Some((cost, restart, run));
        }
    }
    let (wcss, restart, run) = best.expect("at least one restart");
    Ok(KMeansFit {
        parcellation: Parcellation::new(canonical_labels(&run.assignment, cfg.q), cfg.q)?,
        wcss,
        restart,
        iterations: run.iterations,
        converged: run.converged,
    })
}

/// Relabel clusters in order of first appearance.
fn canonical_labels(assignment: &[usize], q: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; q];
    let mut next = 0;
    assignment
        .iter()
        .map(|&a| {
            if map[a] == usize::MAX {
                map[a] = next;
                next += 1;
            }
            map[a]
        })
        .collect()
}

/// Squared distance with eight independent accumulators, so the loop
/// vectorizes; the summation order is fixed and does not depend on threads.
#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            let d = x[k] - y[k];
            acc[k] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += (x - y) * (x - y);
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn row(points: &[f64], f: usize, i: usize) -> &[f64] {
    &points[i * f..(i + 1) * f]
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance from the nearest chosen center.
fn kmeans_pp(points: &[f64], f: usize, q: usize, rng: &mut impl Rng) -> Vec<f64> {
    let p = points.len() / f.max(1);
    let mut centers = Vec::with_capacity(q * f);
    let first = rng.random_range(0..p);
    centers.extend_from_slice(row(points, f, first));
    let mut d2: Vec<f64> = (0..p)
        .into_par_iter()
        .map(|i| sq_dist(row(points, f, i), row(points, f, first)))
        .collect();
    for _ in 1..q {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &v) in d2.iter().enumerate() {
                if v <= 0.0 {
                    continue;
                }
                acc += v;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            rng.random_range(0..p)
        };
        let c = row(points, f, pick).to_vec();
        d2.par_iter_mut().enumerate().for_each(|(i, v)| {
            let d = sq_dist(row(points, f, i), &c);
            if d < *v {
                *v = d;
            }
        });
        centers.extend_from_slice(&c);
    }
    centers
}

struct Run {
    assignment: Vec<usize>,
    iterations: usize,
    converged: bool,
}

/// Nearest and second-nearest center; ties go to the lowest id.
fn scan(x: &[f64], centers: &[f64], f: usize) -> (usize, f64, f64) {
    let q = centers.len() / f.max(1);
    let mut best = (0usize, f64::INFINITY);
    let mut second = f64::INFINITY;
    for c in 0..q {
        let d = sq_dist(x, row(centers, f, c));
        if d < best.1 {
            second = best.1;
            best = (c, d);
        } else if d < second {
            second = d;
        }
    }
    (best.0, best.1.sqrt(), second.sqrt())
}

fn wcss(points: &[f64], f: usize, centers: &[f64], assignment: &[usize]) -> f64 {
    let per_point: Vec<f64> = assignment
        .par_iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(row(points, f, i), row(centers, f, a)))
        .collect();
    per_point.iter().sum()
}

/// Lloyd iterations from the given centers. When `history` is supplied the
/// objective is recorded after every assignment step and every update step.
fn lloyd(
    points: &[f64],
    f: usize,
    centers: &mut [f64],
    max_iters: usize,
    mut history: Option<&mut Vec<f64>>,
) -> Run {
    let p = points.len() / f.max(1);
    let q = centers.len() / f.max(1);
    let mut assignment = vec![0usize; p];
    let mut upper = vec![0.0f64; p];
    let mut lower = vec![0.0f64; p];
    let mut half_gap = vec![0.0f64; q];
    let mut force_scan = true;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iters {
        iterations += 1;
        // assignment step
        let changed: usize = assignment
            .par_iter_mut()
            .zip(upper.par_iter_mut())
            .zip(lower.par_iter_mut())
            .enumerate()
            .map(|(i, ((a, u), l))| {
                let x = row(points, f, i);
                if !force_scan {
                    let bound = half_gap[*a].max(*l);
                    if *u <= bound {
                        return 0;
                    }
                    *u = sq_dist(x, row(centers, f, *a)).sqrt();
                    if *u <= bound {
                        return 0;
                    }
                }
                let (best, d1, d2) = scan(x, centers, f);
                *u = d1;
                *l = d2;
                let moved = usize::from(best != *a || force_scan);
                *a = best;
                moved
            })
            .sum();
        let was_forced = force_scan;
        force_scan = false;

        let repaired = repair_empty(points, f, centers, &mut assignment, &mut upper);
        if repaired {
            force_scan = true;
        }
        if let Some(h) = history.as_deref_mut() {
            h.push(wcss(points, f, centers, &assignment));
        }
        if changed == 0 && !repaired && !was_forced {
            converged = true;
            break;
        }

        // update step
        let mut sums = vec![0.0f64; q * f];
        let mut counts = vec![0usize; q];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * f..(a + 1) * f].iter_mut().zip(row(points, f, i)) {
                *s += v;
            }
        }
        let mut shift = vec![0.0f64; q];
        for c in 0..q {
            let inv = 1.0 / counts[c] as f64;
            let new: Vec<f64> = sums[c * f..(c + 1) * f].iter().map(|s| s * inv).collect();
            shift[c] = sq_dist(&new, row(centers, f, c)).sqrt();
            centers[c * f..(c + 1) * f].copy_from_slice(&new);
        }
        if let Some(h) = history.as_deref_mut() {
            h.push(wcss(points, f, centers, &assignment));
        }

        // bound maintenance
        let (top, top_shift, second_shift) = top_two(&shift);
        upper
            .par_iter_mut()
            .zip(lower.par_iter_mut())
            .zip(assignment.par_iter())
            .for_each(|((u, l), &a)| {
                *u += shift[a];
                *l -= if a == top { second_shift } else { top_shift };
            });
        let _ = top;
        half_gap.par_iter_mut().enumerate().for_each(|(c, g)| {
            let mut m = f64::INFINITY;
            for o in 0..q {
                if o != c {
                    m = m.min(sq_dist(row(centers, f, c), row(centers, f, o)));
                }
            }
            *g = 0.5 * m.sqrt();
        });
    }
    Run {
        assignment,
        iterations,
        converged,
    }
}

fn top_two(v: &[f64]) -> (usize, f64, f64) {
    let mut top = (0usize, f64::NEG_INFINITY);
    let mut second = f64::NEG_INFINITY;
    for (i, &x) in v.iter().enumerate() {
        if x > top.1 {
            second = top.1;
            top = (i, x);
        } else if x > second {
            second = x;
        }
    }
    (top.0, top.1.max(0.0), second.max(0.0))
}

/// Moves the point farthest from its own centroid into each empty cluster
/// (taken only from clusters with more than one member). Returns whether
/// anything moved.
fn repair_empty(
    points: &[f64],
    f: usize,
    centers: &mut [f64],
    assignment: &mut [usize],
    upper: &mut [f64],
) -> bool {
    let q = centers.len() / f.max(1);
    let mut counts = vec![0usize; q];
    for &a in assignment.iter() {
        counts[a] += 1;
    }
    if counts.iter().all(|&c| c > 0) {
        return false;
    }
    let mut dist: Vec<f64> = assignment
        .par_iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(row(points, f, i), row(centers, f, a)))
        .collect();
    for e in 0..q {
        if counts[e] > 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, &d) in dist.iter().enumerate() {
            if counts[assignment[i]] > 1 && far.is_none_or(|(_, fd)| d > fd) {
                far = Some((i, d));
            }
        }
        let (i, _) = far.expect("p >= q guarantees a donor cluster");
        counts[assignment[i]] -= 1;
        counts[e] = 1;
        assignment[i] = e;
        dist[i] = 0.0;
        upper[i] = 0.0;
        let x = row(points, f, i).to_vec();
        centers[e * f..(e + 1) * f].copy_from_slice(&x);
    }
    true
}

/// Sidecar metadata written next to a parcellation CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParcellationMeta {
    pub q: usize,
    pub seed: u64,
    pub spatial_weight: f64,
}

/// CSV with header `feature,cluster`.
pub fn write_parcellation_csv(path: &Path, parc: &Parcellation) -> Result<(), ClusterError> {
    let file_err = |e: std::io::Error| ClusterError::File {
        path: path.display().to_string(),
        msg: e.to_string(),
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(file_err)?);
    writeln!(w, "feature,cluster").map_err(file_err)?;
    for (feature, c) in parc.assignment().iter().enumerate() {
        writeln!(w, "{feature},{c}").map_err(file_err)?;
    }
    w.flush().map_err(file_err)
}

pub fn read_parcellation_csv(path: &Path) -> Result<Parcellation, ClusterError> {
    let err = |msg: String| ClusterError::File {
        path: path.display().to_string(),
        msg,
    };
    let file = fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == "feature,cluster" => {}
        _ => return Err(err("expected header feature,cluster".into())),
    }
    let mut assignment = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.trim().split(',');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err(format!("bad row {}", lineno + 2)));
        };
        let feature: usize = a.parse().map_err(|_| err(format!("bad feature on row {}", lineno + 2)))?;
        let cluster: usize = b.parse().map_err(|_| err(format!("bad cluster on row {}", lineno + 2)))?;
        if feature != assignment.len() {
            return Err(err(format!("features must be listed in order; row {} has {feature}", lineno + 2)));
        }
        assignment.push(cluster);
    }
    let q = assignment.iter().max().map_or(0, |m| m + 1);
    Ok(Parcellation::new(assignment, q)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn blobs() -> Array2<f64> {
        // two blobs of six points in the plane, jittered deterministically
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut pts = Array2::zeros((12, 2));
        for i in 0..12 {
            let (cx, cy) = if i % 2 == 0 { (0.0, 0.0) } else { (10.0, 4.0) };
            pts[[i, 0]] = cx + rng.random::<f64>() - 0.5;
            pts[[i, 1]] = cy + rng.random::<f64>() - 0.5;
        }
        pts
    }

    fn brute_force_two_partition(pts: &Array2<f64>) -> (Vec<usize>, f64) {
        let p = pts.nrows();
        let mut best = (Vec::new(), f64::INFINITY);
        // fix point 0 in cluster 0 to drop label symmetry; both sides non-empty
        for mask in 0u32..(1 << (p - 1)) {
            let labels: Vec<usize> = (0..p)
                .map(|i| if i == 0 { 0 } else { ((mask >> (i - 1)) & 1) as usize })
                .collect();
            if !labels.contains(&1) {
                continue;
            }
            let mut cost = 0.0;
            for c in 0..2 {
                let members: Vec<usize> = (0..p).filter(|&i| labels[i] == c).collect();
                for d in 0..2 {
                    let mean = members.iter().map(|&i| pts[[i, d]]).sum::<f64>() / members.len() as f64;
                    cost += members.iter().map(|&i| (pts[[i, d]] - mean).powi(2)).sum::<f64>();
                }
            }
            if cost < best.1 {
                best = (labels, cost);
            }
        }
        best
    }

    #[test]
    fn two_blobs_match_exhaustive_partition_search() {
        let pts = blobs();
        let (oracle, oracle_cost) = brute_force_two_partition(&pts);
        let fit = kmeans_fit(pts.view(), &ClusterConfig::new(2, 11)).unwrap();
        // canonical labels put point 0 in cluster 0, like the oracle
        assert_eq!(fit.parcellation.assignment(), &oracle[..]);
        assert!((fit.wcss - oracle_cost).abs() < 1e-9);
    }

    #[test]
    fn single_cluster() {
        let pts = blobs();
        let parc = kmeans(pts.view(), &ClusterConfig::new(1, 0)).unwrap();
        assert!(parc.assignment().iter().all(|&c| c == 0));
    }

    #[test]
    fn one_cluster_per_distinct_point() {
        let pts = blobs();
        let parc = kmeans(pts.view(), &ClusterConfig::new(12, 5)).unwrap();
        let mut seen = parc.assignment().to_vec();
        seen.sort_unstable();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let pts = array![[0.0], [0.0], [0.0], [0.0], [1.0]];
        let parc = kmeans(pts.view(), &ClusterConfig::new(4, 2)).unwrap();
        assert_eq!(parc.q(), 4);
        assert!(parc.members().iter().all(|m| !m.is_empty()));
    }

    #[test]
    fn too_few_points() {
        let pts = array![[0.0], [1.0]];
        assert!(matches!(
            kmeans(pts.view(), &ClusterConfig::new(3, 0)),
            Err(ClusterError::TooFewPoints { p: 2, q: 3 })
        ));
    }

    #[test]
    fn lloyd_objective_never_increases() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<f64> = (0..400 * 5).map(|_| rng.random::<f64>()).collect();
        for seed in 0..4 {
            let mut r = derive_stream(seed, 0).rng();
            let mut centers = kmeans_pp(&pts, 5, 17, &mut r);
            let mut history = Vec::new();
            lloyd(&pts, 5, &mut centers, 300, Some(&mut history));
            assert!(history.len() > 2);
            for w in history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn hamerly_matches_brute_force_fixed_point() {
        // at convergence every point must sit at its nearest center
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let pts: Vec<f64> = (0..300 * 4).map(|_| rng.random::<f64>()).collect();
        let mut r = derive_stream(1, 0).rng();
        let mut centers = kmeans_pp(&pts, 4, 9, &mut r);
        let run = lloyd(&pts, 4, &mut centers, 300, None);
        assert!(run.converged);
        for (i, &a) in run.assignment.iter().enumerate() {
            let (best, _, _) = scan(row(&pts, 4, i), &centers, 4);
            assert_eq!(a, best);
        }
    }

    #[test]
    fn result_does_not_depend_on_thread_count() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let pts = Array2::from_shape_fn((500, 6), |_| rng.random::<f64>());
        let cfg = ClusterConfig::new(20, 8);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| kmeans_fit(pts.view(), &cfg).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn feature_vectors() {
        use crate::data::GridGeometry;
        let x = array![[1.0, 1.0, 5.0], [2.0, 2.0, 5.0], [4.0, 4.0, 5.0]];
        let g = GridGeometry::new([3, 1, 1], vec![[0, 0, 0], [1, 0, 0], [2, 0, 0]]).unwrap();
        let d = Dataset::new(x, vec![1.0, -1.0, 1.0], Some(g)).unwrap();
        let fv = build_feature_vectors(&d, 0.0);
        assert_eq!(fv.dim(), (3, 3));
        assert_eq!(fv.row(0), fv.row(1));
        assert!(fv.row(2).iter().all(|&v| v == 0.0));
        let mean: f64 = fv.row(0).sum() / 3.0;
        let var: f64 = fv.row(0).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        let fv = build_feature_vectors(&d, 2.0);
        assert_eq!(fv.dim(), (3, 6));
        assert_eq!(fv[[2, 3]], 2.0);
        assert_eq!(fv[[1, 3]], 1.0);
    }

    #[test]
    fn csv_round_trip() {
        let parc = Parcellation::new(vec![0, 2, 1, 2], 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("parc.csv");
        write_parcellation_csv(&path, &parc).unwrap();
        assert_eq!(read_parcellation_csv(&path).unwrap(), parc);
    }
}

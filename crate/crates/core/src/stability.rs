//! Randomized structural sparsity: stability selection over a parcellation.
//!
//! Each iteration draws a row subsample and a stratified, spatially blocked
//! subsample of voxels, averages the picked voxels of every cluster into one
//! supervoxel, fits a sparse logistic model on the supervoxels and credits
//! every picked voxel whose cluster received a nonzero weight.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, GridGeometry, Parcellation, StabilityScores};
use crate::rng::derive_stream;
use crate::solver::{fit_l1_logistic, SolverConfig, SolverError};

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("invalid stability configuration: {0}")]
    InvalidConfig(String),
    #[error("row subsample of round({alpha} * {n}) rows is empty")]
    EmptyRowSubsample { n: usize, alpha: f64 },
    #[error("geometry has an empty mask")]
    EmptyMask,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("cluster {0} has no picked voxels")]
    EmptyPick(usize),
    #[error("{failed} of {k} iterations failed (limit 20%); first failure at iteration {first_iteration}: {first_reason}")]
    TooManyFailures {
        failed: usize,
        k: usize,
        first_iteration: usize,
        first_reason: String,
    },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("scores file {path}: {msg}")]
    File { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub k: usize,
    /// Row-subsampling fraction.
    pub alpha: f64,
    /// Per-cluster voxel-subsampling fraction.
    pub beta: f64,
    pub block_shape: [usize; 3],
    /// Loss weight handed to the sparse logistic fit.
    pub lambda: f64,
    pub master_seed: u64,
}

impl StabilityConfig {
    pub const DEFAULT_K: usize = 50;
    pub const DEFAULT_ALPHA: f64 = 0.5;
    pub const DEFAULT_BETA: f64 = 0.1;
    pub const DEFAULT_BLOCK: [usize; 3] = [3, 3, 3];
    pub const DEFAULT_LAMBDA: f64 = 0.5;

    pub fn new(master_seed: u64) -> Self {
        Self {
            k: Self::DEFAULT_K,
            alpha: Self::DEFAULT_ALPHA,
            beta: Self::DEFAULT_BETA,
            block_shape: Self::DEFAULT_BLOCK,
            lambda: Self::DEFAULT_LAMBDA,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<(), StabilityError> {
        let bad = |m: String| Err(StabilityError::InvalidConfig(m));
        if self.k == 0 {
            return bad("K must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("beta must lie in (0, 1], got {}", self.beta));
        }
        if self.block_shape.contains(&0) {
            return bad(format!("block dimensions must be positive, got {:?}", self.block_shape));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive and finite, got {}", self.lambda));
        }
        Ok(())
    }

    fn solver_config(&self) -> SolverConfig {
        SolverConfig::new(self.lambda)
    }
}

/// One iteration's random draw: the row subset and, per cluster, the picked voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsampleDraw {
    pub rows: Vec<usize>,
    pub picked: Vec<Vec<usize>>,
}

/// `max(1, round(beta * size))`.
pub fn cluster_quota(size: usize, beta: f64) -> usize {
    ((beta * size as f64).round() as usize).clamp(1, size.max(1))
}

/// `m` distinct indices from `0..n`, uniformly at random, returned sorted.
fn choose_sorted<R: Rng + ?Sized>(pool: &mut [usize], m: usize, rng: &mut R) -> Vec<usize> {
    let n = pool.len();
    for i in 0..m {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    let mut out = pool[..m].to_vec();
    out.sort_unstable();
    out
}

/// Uniform row subsample of size `round(alpha * n)`, sorted.
pub fn draw_row_subsample<R: Rng + ?Sized>(
    n: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<usize>, StabilityError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(StabilityError::InvalidConfig(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let m = (alpha * n as f64).round() as usize;
    if m == 0 {
        return Err(StabilityError::EmptyRowSubsample { n, alpha });
    }
    let mut pool: Vec<usize> = (0..n).collect();
    Ok(choose_sorted(&mut pool, m.min(n), rng))
}

/// Blocked voxel sampling over a grid.
///
/// A draw lays a tiling of `block_shape` blocks over the grid at a random
/// offset, visits the tiles in random order and lists each cluster's voxels
/// tile by tile, in random order inside a tile. A cluster's pick is then
/// `quota` consecutive entries of its list, read cyclically from a uniformly
/// random start. The pick is a run of whole blocks with partial blocks at the
/// two ends, and every voxel of a cluster is picked with probability exactly
/// `quota / |g|`.
#[derive(Debug, Clone)]
pub struct BlockSampler<'g> {
    geometry: &'g GridGeometry,
    block: [usize; 3],
}

impl<'g> BlockSampler<'g> {
    pub fn new(geometry: &'g GridGeometry, block_shape: [usize; 3]) -> Result<Self, StabilityError> {
        if geometry.is_empty() {
            return Err(StabilityError::EmptyMask);
        }
        if block_shape.contains(&0) {
            return Err(StabilityError::InvalidConfig(format!(
                "block dimensions must be positive, got {block_shape:?}"
            )));
        }
        Ok(Self {
            geometry,
            block: block_shape,
        })
    }

    /// Tiles per axis for a tiling shifted by `offset`.
    pub fn tile_counts(&self, offset: [usize; 3]) -> [usize; 3] {
        let dims = self.geometry.dims();
        [0, 1, 2].map(|d| (dims[d] + offset[d]).div_ceil(self.block[d]))
    }

    /// Raster index of the tile holding `voxel` when the tiling is shifted by
    /// `offset` (tile edges at `k * block - offset`).
    pub fn tile_of(&self, offset: [usize; 3], voxel: [u32; 3]) -> usize {
        let counts = self.tile_counts(offset);
        let t = [0, 1, 2].map(|d| (voxel[d] as usize + offset[d]) / self.block[d]);
        t[0] + counts[0] * (t[1] + counts[1] * t[2])
    }

    /// Per-cluster voxel lists in tile-visit order for one random tiling.
    fn sequences<R: Rng + ?Sized>(&self, parc: &Parcellation, rng: &mut R) -> Vec<Vec<usize>> {
        let offset = self.block.map(|b| rng.random_range(0..b));
        let counts = self.tile_counts(offset);
        let mut rank: Vec<u32> = (0..(counts[0] * counts[1] * counts[2]) as u32).collect();
        rank.shuffle(rng);
        let mut keyed: Vec<(u64, usize)> = self
            .geometry
            .mask()
            .iter()
            .enumerate()
            .map(|(f, &v)| {
                let tile = u64::from(rank[self.tile_of(offset, v)]);
                ((tile << 32) | u64::from(rng.random::<u32>()), f)
            })
            .collect();
        keyed.sort_unstable();
        let mut seqs = vec![Vec::new(); parc.q()];
        for (_, f) in keyed {
            seqs[parc.cluster_of(f)].push(f);
        }
        seqs
    }

    /// Constrained block subsample with exactly `quotas[g]` voxels from
    /// cluster `g`, each list sorted.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        parc: &Parcellation,
        quotas: &[usize],
        rng: &mut R,
    ) -> Vec<Vec<usize>> {
        self.sequences(parc, rng)
            .into_iter()
            .zip(quotas)
            .map(|(seq, &quota)| {
                let start = rng.random_range(0..seq.len());
                let mut pick: Vec<usize> = (0..quota).map(|i| seq[(start + i) % seq.len()]).collect();
                pick.sort_unstable();
                pick
            })
            .collect()
    }
}

/// Per-cluster quotas for `parc` at fraction `beta`.
pub fn quotas(parc: &Parcellation, beta: f64) -> Vec<usize> {
    parc.members().iter().map(|g| cluster_quota(g.len(), beta)).collect()
}

/// One constrained block subsample of the voxels of `parc`.
pub fn constrained_block_subsample<R: Rng + ?Sized>(
    geometry: &GridGeometry,
    parc: &Parcellation,
    beta: f64,
    block_shape: [usize; 3],
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, StabilityError> {
    check_parcellation(geometry.len(), parc)?;
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(StabilityError::InvalidConfig(format!("beta must lie in (0, 1], got {beta}")));
    }
    let sampler = BlockSampler::new(geometry, block_shape)?;
    Ok(sampler.draw(parc, &quotas(parc, beta), rng))
}

/// Stratified uniform subsample, used when there is no geometry.
pub fn stratified_subsample<R: Rng + ?Sized>(
    members: &[Vec<usize>],
    quotas: &[usize],
    rng: &mut R,
) -> Vec<Vec<usize>> {
    members
        .iter()
        .zip(quotas)
        .map(|(g, &quota)| choose_sorted(&mut g.clone(), quota, rng))
        .collect()
}

fn check_parcellation(p: usize, parc: &Parcellation) -> Result<(), StabilityError> {
    if parc.p() != p {
        return Err(StabilityError::Dimension(format!(
            "parcellation covers {} features, data has {p}",
            parc.p()
        )));
    }
    Ok(())
}

/// Column `g` of the result is the row-wise mean of `xsub` over `picked[g]`.
pub fn average_supervoxels(
    xsub: ArrayView2<'_, f64>,
    picked: &[Vec<usize>],
) -> Result<Array2<f64>, StabilityError> {
    let rows: Vec<usize> = (0..xsub.nrows()).collect();
    supervoxels(xsub, &rows, picked)
}

fn supervoxels(
    x: ArrayView2<'_, f64>,
    rows: &[usize],
    picked: &[Vec<usize>],
) -> Result<Array2<f64>, StabilityError> {
    let mut out = Array2::zeros((rows.len(), picked.len()));
    for (g, voxels) in picked.iter().enumerate() {
        if voxels.is_empty() {
            return Err(StabilityError::EmptyPick(g));
        }
        if let Some(&bad) = voxels.iter().find(|&&v| v >= x.ncols()) {
            return Err(StabilityError::Dimension(format!(
                "picked voxel {bad} outside {} columns",
                x.ncols()
            )));
        }
        let inv = 1.0 / voxels.len() as f64;
        for (r, &i) in rows.iter().enumerate() {
            let row = x.row(i);
            let s: f64 = voxels.iter().map(|&v| row[v]).sum();
            out[[r, g]] = s * inv;
        }
    }
    Ok(out)
}

enum Outcome {
    /// Voxels credited this iteration; `converged` false means the solver hit
    /// its iteration cap and the best iterate was used.
    Credited { voxels: Vec<usize>, converged: bool },
    Skipped(String),
}

/// Shared reduction for stability-style selectors: runs `iteration(k)` for
/// every `k`, in parallel, and adds up the credited features in index order.
pub(crate) fn accumulate<F>(p: usize, k: usize, iteration: F) -> Result<StabilityScores, StabilityError>
where
    F: Fn(usize) -> Result<(Vec<usize>, Result<bool, String>), StabilityError> + Sync,
{
    let outcomes: Vec<Outcome> = (0..k)
        .into_par_iter()
        .map(|it| {
            iteration(it).map(|(voxels, status)| match status {
                Ok(converged) => Outcome::Credited { voxels, converged },
                Err(reason) => Outcome::Skipped(reason),
            })
        })
        .collect::<Result<_, _>>()?;

    let mut counts = vec![0u32; p];
    let mut failed = 0;
    let mut first: Option<(usize, String)> = None;
    for (it, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Outcome::Credited { voxels, converged } => {
                if !converged {
                    failed += 1;
                    first.get_or_insert((it, "solver did not converge".into()));
                }
                for v in voxels {
                    counts[v] += 1;
                }
            }
            Outcome::Skipped(reason) => {
                failed += 1;
                first.get_or_insert((it, reason));
            }
        }
    }
    if failed > 0 {
        let (first_iteration, first_reason) = first.expect("failure recorded");
        if failed * 5 > k {
            return Err(StabilityError::TooManyFailures {
                failed,
                k,
                first_iteration,
                first_reason,
            });
        }
        warn!("{failed} of {k} iterations failed; first at iteration {first_iteration}: {first_reason}");
    }
    Ok(StabilityScores::new(counts, k as u32)?)
}

/// Randomized structural sparsity scores.
///
/// Iteration `k` draws from `derive_stream(master_seed, k)` only, so the
/// counts do not depend on thread count or scheduling.
pub fn run_stability_selection(
    d: &Dataset,
    parc: &Parcellation,
    cfg: &StabilityConfig,
) -> Result<StabilityScores, StabilityError> {
    cfg.validate()?;
    check_parcellation(d.p(), parc)?;
    let members = parc.members();
    let quotas: Vec<usize> = members.iter().map(|g| cluster_quota(g.len(), cfg.beta)).collect();
    let sampler = match d.geometry() {
        Some(geom) => Some(BlockSampler::new(geom, cfg.block_shape)?),
        None => {
            warn!("no geometry; falling back to stratified uniform voxel subsampling");
            None
        }
    };
    let solver = cfg.solver_config();
    let x = d.x();
    let y = d.y();

    accumulate(d.p(), cfg.k, |it| {
        let draw = draw_iteration(d.n(), parc, &members, &quotas, sampler.as_ref(), cfg, it as u64)?;
        let ys: Vec<f64> = draw.rows.iter().map(|&i| y[i]).collect();
        let z = supervoxels(x, &draw.rows, &draw.picked)?;
        match fit_l1_logistic(z.view(), &ys, &solver) {
            Ok(sol) => {
                let voxels = sol
                    .support(solver.support_epsilon)
                    .into_iter()
                    .flat_map(|g| draw.picked[g].iter().copied())
                    .collect();
                Ok((voxels, Ok(sol.converged)))
            }
            Err(SolverError::SingleClass) => Ok((Vec::new(), Err("row subsample has a single class".into()))),
            Err(e) => Err(e.into()),
        }
    })
}

/// The random draw of iteration `iteration` of `run_stability_selection`.
pub fn iteration_draw(
    d: &Dataset,
    parc: &Parcellation,
    cfg: &StabilityConfig,
    iteration: u64,
) -> Result<SubsampleDraw, StabilityError> {
    cfg.validate()?;
    check_parcellation(d.p(), parc)?;
    let members = parc.members();
    let quotas: Vec<usize> = members.iter().map(|g| cluster_quota(g.len(), cfg.beta)).collect();
    let sampler = d
        .geometry()
        .map(|g| BlockSampler::new(g, cfg.block_shape))
        .transpose()?;
    draw_iteration(d.n(), parc, &members, &quotas, sampler.as_ref(), cfg, iteration)
}

fn draw_iteration(
    n: usize,
    parc: &Parcellation,
    members: &[Vec<usize>],
    quotas: &[usize],
    sampler: Option<&BlockSampler<'_>>,
    cfg: &StabilityConfig,
    iteration: u64,
) -> Result<SubsampleDraw, StabilityError> {
    let mut rng = derive_stream(cfg.master_seed, iteration).rng();
    let rows = draw_row_subsample(n, cfg.alpha, &mut rng)?;
    let picked = match sampler {
        Some(s) => s.draw(parc, quotas, &mut rng),
        None => stratified_subsample(members, quotas, &mut rng),
    };
    Ok(SubsampleDraw { rows, picked })
}

/// Features whose normalized score is at least `tau`.
pub fn threshold_scores(s: &StabilityScores, tau: f64) -> Vec<usize> {
    let k = f64::from(s.k());
    s.counts()
        .iter()
        .enumerate()
        .filter(|(_, &c)| f64::from(c) / k >= tau)
        .map(|(i, _)| i)
        .collect()
}

/// Per-feature scores as read back from a scores CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub scores: Vec<f64>,
    /// Present when every row carries a selection count.
    pub counts: Option<Vec<u32>>,
}

/// Write `feature,x,y,z,count,score`. Coordinates are -1 without geometry;
/// the count column is left empty for selectors that do not count.
pub fn write_scores_csv(
    path: &Path,
    scores: &[f64],
    counts: Option<&[u32]>,
    geometry: Option<&GridGeometry>,
) -> Result<(), StabilityError> {
    let err = |msg: String| StabilityError::File {
        path: path.display().to_string(),
        msg,
    };
    if let Some(c) = counts {
        if c.len() != scores.len() {
            return Err(err(format!("{} counts for {} scores", c.len(), scores.len())));
        }
    }
    if let Some(g) = geometry {
        if g.len() != scores.len() {
            return Err(err(format!("geometry has {} voxels for {} scores", g.len(), scores.len())));
        }
    }
    let io = |e: std::io::Error| err(e.to_string());
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    writeln!(w, "feature,x,y,z,count,score").map_err(io)?;
    for (i, s) in scores.iter().enumerate() {
        let [x, y, z] = geometry.map_or([-1, -1, -1], |g| g.mask()[i].map(i64::from));
        write!(w, "{i},{x},{y},{z},").map_err(io)?;
        if let Some(c) = counts {
            write!(w, "{}", c[i]).map_err(io)?;
        }
        writeln!(w, ",{s}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_stability_scores(
    path: &Path,
    s: &StabilityScores,
    geometry: Option<&GridGeometry>,
) -> Result<(), StabilityError> {
    write_scores_csv(path, &s.normalized(), Some(s.counts()), geometry)
}

pub fn read_scores_csv(path: &Path) -> Result<ScoreTable, StabilityError> {
    let err = |msg: String| StabilityError::File {
        path: path.display().to_string(),
        msg,
    };
    let file = fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == "feature,x,y,z,count,score" => {}
        _ => return Err(err("expected header feature,x,y,z,count,score".into())),
    }
    let mut scores = Vec::new();
    let mut counts = Some(Vec::new());
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = lineno + 2;
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 6 {
            return Err(err(format!("row {row}: expected 6 fields")));
        }
        let feature: usize = fields[0].parse().map_err(|_| err(format!("row {row}: bad feature")))?;
        if feature != scores.len() {
            return Err(err(format!("row {row}: features must be listed in order")));
        }
        let score: f64 = fields[5].parse().map_err(|_| err(format!("row {row}: bad score")))?;
        if !score.is_finite() {
            return Err(err(format!("row {row}: non-finite score")));
        }
        scores.push(score);
        counts = match (counts, fields[4]) {
            (Some(mut c), f) if !f.is_empty() => {
                c.push(f.parse().map_err(|_| err(format!("row {row}: bad count")))?);
                Some(c)
            }
            _ => None,
        };
    }
    Ok(ScoreTable { scores, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn flat_grid(w: usize, h: usize) -> GridGeometry {
        let mut mask = Vec::new();
        for y in 0..h {
            for x in 0..w {
                mask.push([x as u32, y as u32, 0]);
            }
        }
        GridGeometry::new([w, h, 1], mask).unwrap()
    }

    /// Four 4x4 quadrants of an 8x8 grid.
    fn quadrants() -> (GridGeometry, Parcellation) {
        let g = flat_grid(8, 8);
        let assignment = g
            .mask()
            .iter()
            .map(|v| (v[0] / 4 + 2 * (v[1] / 4)) as usize)
            .collect();
        (g, Parcellation::new(assignment, 4).unwrap())
    }

    #[test]
    fn row_subsample_edges() {
        let mut rng = derive_stream(0, 0).rng();
        assert_eq!(draw_row_subsample(7, 1.0, &mut rng).unwrap(), (0..7).collect::<Vec<_>>());
        let r = draw_row_subsample(100, 0.5, &mut rng).unwrap();
        assert_eq!(r.len(), 50);
        assert!(r.windows(2).all(|w| w[0] < w[1]) && r[49] < 100);
        assert!(matches!(
            draw_row_subsample(3, 0.1, &mut rng),
            Err(StabilityError::EmptyRowSubsample { .. })
        ));
    }

    #[test]
    fn row_subsample_is_uniform() {
        let mut freq = [0usize; 10];
        for s in 0..10_000 {
            let mut rng = derive_stream(11, s).rng();
            for i in draw_row_subsample(10, 0.5, &mut rng).unwrap() {
                freq[i] += 1;
            }
        }
        for f in freq {
            assert!((f as f64 / 10_000.0 - 0.5).abs() <= 0.02, "{f}");
        }
    }

    #[test]
    fn quota_rule() {
        assert_eq!(cluster_quota(10, 0.1), 1);
        assert_eq!(cluster_quota(3, 0.1), 1);
        assert_eq!(cluster_quota(25, 0.1), 3);
        assert_eq!(cluster_quota(15, 0.1), 2);
        assert_eq!(cluster_quota(40, 1.0), 40);
    }

    #[test]
    fn tiles_are_blocks() {
        let (g, _) = quadrants();
        let s = BlockSampler::new(&g, [3, 3, 1]).unwrap();
        for offset in [[0, 0, 0], [1, 2, 0], [2, 1, 0]] {
            let mut boxes: std::collections::BTreeMap<usize, Vec<[u32; 3]>> = Default::default();
            for &v in g.mask() {
                boxes.entry(s.tile_of(offset, v)).or_default().push(v);
            }
            let counts = s.tile_counts(offset);
            assert!(boxes.keys().all(|&t| t < counts.iter().product()));
            for vs in boxes.values() {
                assert!(vs.len() <= 9);
                for d in 0..2 {
                    let lo = vs.iter().map(|v| v[d]).min().unwrap();
                    let hi = vs.iter().map(|v| v[d]).max().unwrap();
                    assert!(hi - lo < 3);
                    assert_eq!((lo as usize + offset[d]) / 3, (hi as usize + offset[d]) / 3);
                }
            }
        }
    }

    #[test]
    fn beta_one_picks_everything() {
        let (g, parc) = quadrants();
        let mut rng = derive_stream(1, 0).rng();
        let picked = constrained_block_subsample(&g, &parc, 1.0, [3, 3, 1], &mut rng).unwrap();
        assert_eq!(picked, parc.members());
    }

    #[test]
    fn small_cluster_gets_one_voxel() {
        let g = flat_grid(10, 1);
        let parc = Parcellation::new(vec![0; 10], 1).unwrap();
        let mut rng = derive_stream(1, 0).rng();
        let picked = constrained_block_subsample(&g, &parc, 0.1, [3, 3, 1], &mut rng).unwrap();
        assert_eq!(picked[0].len(), 1);
    }

    #[test]
    fn block_frequencies_and_adjacency() {
        let (g, parc) = quadrants();
        let draws = 5000;
        let mut freq = vec![0usize; 64];
        let mut pair = vec![vec![0usize; 64]; 64];
        let sampler = BlockSampler::new(&g, [3, 3, 1]).unwrap();
        let qs = quotas(&parc, 0.25);
        for s in 0..draws {
            let mut rng = derive_stream(5, s).rng();
            let picked: Vec<usize> = sampler.draw(&parc, &qs, &mut rng).concat();
            for &a in &picked {
                freq[a] += 1;
                for &b in &picked {
                    pair[a][b] += 1;
                }
            }
        }
        for f in &freq {
            assert!((*f as f64 / draws as f64 - 0.25).abs() <= 0.03, "{f}");
        }
        // same-cluster pairs: grid neighbours versus pairs at distance >= 3
        let (mut near, mut n_near, mut far, mut n_far) = (0.0, 0, 0.0, 0);
        for a in 0..64 {
            for b in 0..64 {
                if a == b || parc.cluster_of(a) != parc.cluster_of(b) {
                    continue;
                }
                let (va, vb) = (g.mask()[a], g.mask()[b]);
                let dist = va[0].abs_diff(vb[0]) + va[1].abs_diff(vb[1]);
                let co = pair[a][b] as f64 / draws as f64;
                if dist == 1 {
                    near += co;
                    n_near += 1;
                } else if dist >= 3 {
                    far += co;
                    n_far += 1;
                }
            }
        }
        assert!(near / n_near as f64 > far / n_far as f64, "{near} {far}");
    }

    #[test]
    fn inclusion_is_exactly_proportional() {
        // uneven clusters on a 3-D grid: interior and edge voxels alike must be
        // picked at rate quota / |g|
        let mask: Vec<[u32; 3]> = (0..8u32)
            .flat_map(|x| (0..8u32).flat_map(move |y| (0..3u32).map(move |z| [x, y, z])))
            .collect();
        let g = GridGeometry::new([8, 8, 3], mask).unwrap();
        let raw: Vec<usize> = g
            .mask()
            .iter()
            .map(|v| match (v[0], v[1]) {
                (0..=4, 0..=4) => 0,
                (5.., 0..=2) => 1,
                (5.., _) => 2,
                _ => 3,
            })
            .collect();
        let parc = Parcellation::new(raw, 4).unwrap();
        let qs = quotas(&parc, 0.1);
        let sizes: Vec<usize> = parc.members().iter().map(Vec::len).collect();
        let sampler = BlockSampler::new(&g, [3, 3, 3]).unwrap();
        let draws = 20_000;
        let mut hits = vec![0usize; g.len()];
        for s in 0..draws {
            for f in sampler.draw(&parc, &qs, &mut derive_stream(9, s).rng()).concat() {
                hits[f] += 1;
            }
        }
        for (f, &h) in hits.iter().enumerate() {
            let c = parc.cluster_of(f);
            let p = qs[c] as f64 / sizes[c] as f64;
            let sd = (p * (1.0 - p) / draws as f64).sqrt();
            let freq = h as f64 / draws as f64;
            assert!((freq - p).abs() <= 5.0 * sd, "voxel {f}: {freq} vs {p}");
        }
    }

    #[test]
    fn supervoxel_means() {
        let x = array![[1.0, 3.0, 3.0, 7.0], [1.0, 3.0, 3.0, -1.0]];
        let z = average_supervoxels(x.view(), &[vec![0, 1], vec![2], vec![3]]).unwrap();
        assert_eq!(z, array![[2.0, 3.0, 7.0], [2.0, 3.0, -1.0]]);
        assert!(matches!(
            average_supervoxels(x.view(), &[vec![]]),
            Err(StabilityError::EmptyPick(0))
        ));
    }

    #[test]
    fn thresholds() {
        let s = StabilityScores::new(vec![50, 25, 0], 50).unwrap();
        assert_eq!(threshold_scores(&s, 0.5), vec![0, 1]);
        assert_eq!(threshold_scores(&s, 0.0), vec![0, 1, 2]);
        assert!(threshold_scores(&s, 1.01).is_empty());
    }

    fn noise_dataset(n: usize, w: usize, h: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = flat_grid(w, h);
        let x = Array2::from_shape_fn((n, g.len()), |_| rng.sample::<f64, _>(StandardNormal));
        let mut y: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { -1.0 }).collect();
        for i in (1..n).rev() {
            y.swap(i, rng.random_range(0..=i));
        }
        Dataset::new(x, y, Some(g)).unwrap()
    }

    fn stripes(g: &GridGeometry, width: u32) -> Parcellation {
        let raw: Vec<usize> = g.mask().iter().map(|v| (v[0] / width) as usize).collect();
        let q = raw.iter().max().unwrap() + 1;
        Parcellation::new(raw, q).unwrap()
    }

    #[test]
    fn pure_noise_scores_stay_low() {
        let d = noise_dataset(60, 20, 10, 0);
        let parc = stripes(d.geometry().unwrap(), 2);
        let mut cfg = StabilityConfig::new(0);
        cfg.block_shape = [3, 3, 1];
        let s = run_stability_selection(&d, &parc, &cfg).unwrap();
        let max = s.normalized().into_iter().fold(0.0, f64::max);
        assert!(max <= 0.6, "{max}");
    }

    #[test]
    fn planted_cluster_scores_highest() {
        let mut d = noise_dataset(60, 20, 10, 1);
        let parc = stripes(d.geometry().unwrap(), 2);
        let signal = parc.members()[3].clone();
        let mut x = d.x().to_owned();
        for i in 0..d.n() {
            for &v in &signal {
                x[[i, v]] += 2.0 * d.y()[i];
            }
        }
        d = Dataset::new(x, d.y().to_vec(), d.geometry().cloned()).unwrap();
        let mut cfg = StabilityConfig::new(3);
        cfg.block_shape = [3, 3, 1];
        cfg.beta = 0.3;
        let s = run_stability_selection(&d, &parc, &cfg).unwrap();
        let c = s.counts();
        let min_signal = signal.iter().map(|&v| c[v]).min().unwrap();
        let max_other = (0..d.p()).filter(|v| !signal.contains(v)).map(|v| c[v]).max().unwrap();
        assert!(min_signal > max_other, "{min_signal} vs {max_other}");
    }

    #[test]
    fn single_iteration_counts_are_binary() {
        let d = noise_dataset(30, 8, 8, 2);
        let parc = stripes(d.geometry().unwrap(), 2);
        let mut cfg = StabilityConfig::new(9);
        cfg.k = 1;
        cfg.block_shape = [3, 3, 1];
        let s = run_stability_selection(&d, &parc, &cfg).unwrap();
        assert!(s.counts().iter().all(|&c| c <= 1));
    }

    #[test]
    fn accumulation_is_monotone_and_supported() {
        let d = noise_dataset(30, 8, 8, 3);
        let parc = stripes(d.geometry().unwrap(), 2);
        let mut cfg = StabilityConfig::new(4);
        cfg.k = 12;
        cfg.lambda = 5.0;
        cfg.block_shape = [3, 3, 1];
        let a = run_stability_selection(&d, &parc, &cfg).unwrap();
        cfg.k = 13;
        let b = run_stability_selection(&d, &parc, &cfg).unwrap();
        assert!(a.counts().iter().zip(b.counts()).all(|(x, y)| x <= y));

        let mut ever = vec![false; d.p()];
        for it in 0..12 {
            cfg.k = 12;
            for v in iteration_draw(&d, &parc, &cfg, it).unwrap().picked.concat() {
                ever[v] = true;
            }
        }
        for (v, &c) in a.counts().iter().enumerate() {
            assert!(ever[v] || c == 0);
        }
    }

    #[test]
    fn thread_count_does_not_change_scores() {
        let d = noise_dataset(40, 12, 12, 4);
        let parc = stripes(d.geometry().unwrap(), 3);
        let mut cfg = StabilityConfig::new(8);
        cfg.k = 16;
        cfg.lambda = 3.0;
        cfg.block_shape = [3, 3, 1];
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_stability_selection(&d, &parc, &cfg).unwrap())
        };
        assert_eq!(run(1), run(5));
    }

    #[test]
    fn no_geometry_still_stratifies() {
        let d = noise_dataset(20, 6, 5, 5);
        let g = d.geometry().unwrap().clone();
        let parc = stripes(&g, 2);
        let plain = Dataset::new(d.x().to_owned(), d.y().to_vec(), None).unwrap();
        let cfg = StabilityConfig { beta: 0.4, ..StabilityConfig::new(1) };
        let draw = iteration_draw(&plain, &parc, &cfg, 0).unwrap();
        for (g, p) in parc.members().iter().zip(&draw.picked) {
            assert_eq!(p.len(), cluster_quota(g.len(), 0.4));
            assert!(p.iter().all(|v| g.contains(v)));
        }
        run_stability_selection(&plain, &parc, &cfg).unwrap();
    }

    #[test]
    fn mismatched_parcellation_is_rejected() {
        let d = noise_dataset(20, 4, 4, 6);
        let parc = Parcellation::new(vec![0; 15], 1).unwrap();
        assert!(matches!(
            run_stability_selection(&d, &parc, &StabilityConfig::new(0)),
            Err(StabilityError::Dimension(_))
        ));
    }

    #[test]
    fn scores_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let g = flat_grid(3, 1);
        let s = StabilityScores::new(vec![3, 0, 7], 7).unwrap();
        write_stability_scores(&path, &s, Some(&g)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("feature,x,y,z,count,score\n0,0,0,0,3,"));
        let t = read_scores_csv(&path).unwrap();
        assert_eq!(t.counts.as_deref(), Some(&[3, 0, 7][..]));
        assert_eq!(t.scores, s.normalized());

        write_scores_csv(&path, &[0.5, 1.25], None, None).unwrap();
        let t = read_scores_csv(&path).unwrap();
        assert_eq!(t.counts, None);
        assert_eq!(t.scores, vec![0.5, 1.25]);
        assert!(fs::read_to_string(&path).unwrap().contains("1,-1,-1,-1,,1.25"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn quotas_are_exact_and_disjoint(
            raw in proptest::collection::vec(0usize..6, 30..60),
            beta in 0.05f64..1.0,
            seed in any::<u64>(),
        ) {
            let w = 6usize;
            let h = raw.len().div_ceil(w);
            let mut mask = Vec::new();
            for i in 0..raw.len() {
                mask.push([(i % w) as u32, (i / w) as u32, 0]);
            }
            let g = GridGeometry::new([w, h, 1], mask).unwrap();
            // relabel to drop empty clusters
            let mut map = std::collections::BTreeMap::new();
            for &c in &raw {
                let next = map.len();
                map.entry(c).or_insert(next);
            }
            let parc = Parcellation::new(raw.iter().map(|c| map[c]).collect(), map.len()).unwrap();
            let mut rng = derive_stream(seed, 0).rng();
            let picked = constrained_block_subsample(&g, &parc, beta, [2, 3, 1], &mut rng).unwrap();
            let mut all: Vec<usize> = picked.concat();
            for (gi, (members, p)) in parc.members().iter().zip(&picked).enumerate() {
                prop_assert_eq!(p.len(), cluster_quota(members.len(), beta));
                prop_assert!(p.iter().all(|&v| parc.cluster_of(v) == gi));
            }
            let total = all.len();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), total);
        }
    }
}

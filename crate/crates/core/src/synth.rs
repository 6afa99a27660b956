//! Synthetic case/control images with planted discriminative clusters.
//!
//! Clusters 1 and 2 carry a mean shift of 1 and 2 in the cases. Clusters 3, 4
//! and 5 are jointly discriminative only: voxel `t` of each forms a triple
//! whose sum lies above the threshold for cases and below it for controls.
//! Everything else in the mask is Gaussian noise.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, GridGeometry};
use crate::rng::derive_stream;

const MAX_TRIPLE_ATTEMPTS: usize = 1_000_000;

/// Relative grid positions of the five cluster centres.
const CLUSTER_CENTRES: [[f64; 3]; 5] = [
    [0.33, 0.33, 0.5],
    [0.67, 0.33, 0.5],
    [0.33, 0.67, 0.5],
    [0.67, 0.67, 0.5],
    [0.5, 0.5, 0.3],
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot place cluster {cluster} of size {size} inside the mask")]
    CannotFit { cluster: usize, size: usize },
    #[error("triple for sample {sample}, index {index} not accepted after {MAX_TRIPLE_ATTEMPTS} draws")]
    RejectionLimit { sample: usize, index: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("ground truth file {path}: {msg}")]
    File { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dims: [usize; 3],
    pub mask_size: usize,
    pub n_per_group: usize,
    pub cluster_sizes: [usize; 5],
    pub noise_sd: f64,
    pub constraint_threshold: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dims: [46, 55, 46],
            mask_size: 27884,
            n_per_group: 50,
            cluster_sizes: [76, 76, 77, 77, 77],
            noise_sd: 1.0,
            constraint_threshold: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.dims.contains(&0) {
            return bad(format!("grid dimensions must be positive, got {:?}", self.dims));
        }
        let cells: usize = self.dims.iter().product();
        if self.mask_size == 0 || self.mask_size > cells {
            return bad(format!("mask_size must lie in [1, {cells}], got {}", self.mask_size));
        }
        if self.n_per_group == 0 {
            return bad("n_per_group must be positive".into());
        }
        if self.cluster_sizes.contains(&0) {
            return bad(format!("cluster sizes must be positive, got {:?}", self.cluster_sizes));
        }
        let [_, _, a, b, c] = self.cluster_sizes;
        if a != b || b != c {
            return bad(format!("clusters 3-5 must have equal sizes, got {a}, {b}, {c}"));
        }
        let total: usize = self.cluster_sizes.iter().sum();
        if total > self.mask_size {
            return bad(format!("clusters need {total} voxels, mask has {}", self.mask_size));
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise_sd must be positive and finite, got {}", self.noise_sd));
        }
        if !self.constraint_threshold.is_finite() {
            return bad("constraint_threshold must be finite".into());
        }
        Ok(())
    }
}

/// Which features carry signal, and in which planted cluster (1 to 5).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub discriminative: Vec<usize>,
    pub cluster_of: BTreeMap<usize, u8>,
}

impl GroundTruth {
    fn from_map(cluster_of: BTreeMap<usize, u8>) -> Self {
        Self {
            discriminative: cluster_of.keys().copied().collect(),
            cluster_of,
        }
    }

    /// Features of planted cluster `k`, in index order.
    pub fn cluster(&self, k: u8) -> Vec<usize> {
        self.cluster_of
            .iter()
            .filter(|(_, &c)| c == k)
            .map(|(&f, _)| f)
            .collect()
    }
}

/// The first `mask_size` grid cells ordered by normalized distance from the
/// centre of the inscribed ellipsoid, ties broken by raster index. Returned in
/// raster order (x fastest).
pub fn make_mask(dims: [usize; 3], mask_size: usize) -> Result<GridGeometry, SynthError> {
    let cells: usize = dims.iter().product();
    if dims.contains(&0) || mask_size == 0 || mask_size > cells {
        return Err(SynthError::InvalidConfig(format!(
            "cannot take {mask_size} cells from a {dims:?} grid"
        )));
    }
    let centre = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let radius = dims.map(|d| d as f64 / 2.0);
    let mut ranked: Vec<(f64, usize)> = (0..cells)
        .map(|flat| {
            let v = unflatten(flat, dims);
            let rho: f64 = (0..3)
                .map(|d| ((v[d] as f64 - centre[d]) / radius[d]).powi(2))
                .sum();
            (rho, flat)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut chosen: Vec<usize> = ranked[..mask_size].iter().map(|r| r.1).collect();
    chosen.sort_unstable();
    let mask = chosen.into_iter().map(|f| unflatten(f, dims).map(|c| c as u32)).collect();
    Ok(GridGeometry::new(dims, mask)?)
}

fn unflatten(flat: usize, dims: [usize; 3]) -> [usize; 3] {
    [flat % dims[0], (flat / dims[0]) % dims[1], flat / (dims[0] * dims[1])]
}

/// Five disjoint, compact clusters inside `geometry`'s mask: each is a cube of
/// side `ceil(cbrt(size))` filled in raster order and truncated to `size`,
/// centred on a fixed relative position jittered by up to one voxel per axis.
/// If the jittered cube collides, the centre and then every other one-voxel
/// shift are tried in turn.
/// Returns, per cluster, the feature indices in fill order.
pub fn default_cluster_placement(
    geometry: &GridGeometry,
    cluster_sizes: &[usize; 5],
    seed: u64,
) -> Result<[Vec<usize>; 5], SynthError> {
    let dims = geometry.dims();
    let mut rng = derive_stream(seed, 0).rng();
    let jitter: Vec<[i64; 3]> = (0..5)
        .map(|_| [0; 3].map(|_: i64| rng.random_range(-1..=1)))
        .collect();
    let mut taken = vec![false; geometry.len()];
    let mut out: [Vec<usize>; 5] = Default::default();
    for (c, &size) in cluster_sizes.iter().enumerate() {
        let place = |shift: [i64; 3], taken: &[bool]| -> Option<Vec<usize>> {
            let side = (1..).find(|s: &usize| s.pow(3) >= size).unwrap();
            let origin: [i64; 3] = [0, 1, 2].map(|d| {
                (CLUSTER_CENTRES[c][d] * (dims[d] as f64 - 1.0) - (side as f64 - 1.0) / 2.0).round() as i64
                    + shift[d]
            });
            let mut feats = Vec::with_capacity(size);
            'fill: for z in 0..side as i64 {
                for y in 0..side as i64 {
                    for x in 0..side as i64 {
                        if feats.len() == size {
                            break 'fill;
                        }
                        let f = geometry.feature_at(origin[0] + x, origin[1] + y, origin[2] + z)?;
                        if taken[f] {
                            return None;
                        }
                        feats.push(f);
                    }
                }
            }
            Some(feats)
        };
        let mut shifts = vec![jitter[c], [0; 3]];
        for z in -1..=1 {
            for y in -1..=1 {
                for x in -1..=1 {
                    shifts.push([x, y, z]);
                }
            }
        }
        let feats = shifts
            .into_iter()
            .find_map(|s| place(s, &taken))
            .ok_or(SynthError::CannotFit { cluster: c + 1, size })?;
        for &f in &feats {
            taken[f] = true;
        }
        out[c] = feats;
    }
    Ok(out)
}

/// Draw a dataset and its ground truth. Samples `0..n_per_group` are cases.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Dataset, GroundTruth), SynthError> {
    cfg.validate()?;
    let geometry = make_mask(cfg.dims, cfg.mask_size)?;
    let clusters = default_cluster_placement(&geometry, &cfg.cluster_sizes, cfg.seed)?;
    let n = 2 * cfg.n_per_group;
    let p = geometry.len();
    let noise = Normal::new(0.0, cfg.noise_sd).expect("validated sd");
    let is_case = |i: usize| i < cfg.n_per_group;

    let mut rng = derive_stream(cfg.seed, 1).rng();
    let mut x = Array2::from_shape_simple_fn((n, p), || noise.sample(&mut rng));

    let mut rng = derive_stream(cfg.seed, 2).rng();
    for (k, voxels) in clusters[..2].iter().enumerate() {
        let shift = (k + 1) as f64;
        for i in 0..n {
            for &v in voxels {
                x[[i, v]] = noise.sample(&mut rng) + if is_case(i) { shift } else { 0.0 };
            }
        }
    }

    let mut rng = derive_stream(cfg.seed, 3).rng();
    let thr = cfg.constraint_threshold;
    for t in 0..cfg.cluster_sizes[2] {
        for i in 0..n {
            let mut attempts = 0;
            let triple = loop {
                attempts += 1;
                if attempts > MAX_TRIPLE_ATTEMPTS {
                    return Err(SynthError::RejectionLimit { sample: i, index: t });
                }
                let tr = [0; 3].map(|_: i32| noise.sample(&mut rng));
                let s: f64 = tr.iter().sum();
                if (is_case(i) && s > thr) || (!is_case(i) && s < thr) {
                    break tr;
                }
            };
            for (c, value) in triple.into_iter().enumerate() {
                x[[i, clusters[2 + c][t]]] = value;
            }
        }
    }

    let y = (0..n).map(|i| if is_case(i) { 1.0 } else { -1.0 }).collect();
    let mut cluster_of = BTreeMap::new();
    for (k, voxels) in clusters.iter().enumerate() {
        for &v in voxels {
            cluster_of.insert(v, (k + 1) as u8);
        }
    }
    Ok((Dataset::new(x, y, Some(geometry))?, GroundTruth::from_map(cluster_of)))
}

/// CSV with header `feature,planted_cluster`, one row per discriminative feature.
pub fn write_ground_truth_csv(path: &Path, gt: &GroundTruth) -> Result<(), SynthError> {
    let io = |e: std::io::Error| SynthError::File {
        path: path.display().to_string(),
        msg: e.to_string(),
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    writeln!(w, "feature,planted_cluster").map_err(io)?;
    for (f, c) in &gt.cluster_of {
        writeln!(w, "{f},{c}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_ground_truth_csv(path: &Path) -> Result<GroundTruth, SynthError> {
    let err = |msg: String| SynthError::File {
        path: path.display().to_string(),
        msg,
    };
    let file = fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == "feature,planted_cluster" => {}
        _ => return Err(err("expected header feature,planted_cluster".into())),
    }
    let mut cluster_of = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || err(format!("bad row {}", lineno + 2));
        let (f, c) = line.trim().split_once(',').ok_or_else(bad)?;
        let f: usize = f.parse().map_err(|_| bad())?;
        let c: u8 = c.parse().map_err(|_| bad())?;
        if cluster_of.insert(f, c).is_some() {
            return Err(err(format!("feature {f} listed twice")));
        }
    }
    Ok(GroundTruth::from_map(cluster_of))
}

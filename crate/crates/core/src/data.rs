//! Domain types shared by every module and the on-disk dataset container.
//!
//! A container is a directory with three files:
//!
//! * `manifest.json`: `{format:"RSSD", version:1, n, p, dtype:"f64le",
//!   layout:"row-major", labels:[±1...], grid_dims:[dx,dy,dz] | null}`
//! * `X.bin`: the magic `RSS1` followed by `n*p` little-endian `f64`, row-major
//! * `mask.bin` (only with geometry): `p` triples of little-endian `u32`

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const CONTAINER_FORMAT: &str = "RSSD";
pub const CONTAINER_VERSION: u32 = 1;
pub const MATRIX_MAGIC: &[u8; 4] = b"RSS1";

const MANIFEST_FILE: &str = "manifest.json";
const MATRIX_FILE: &str = "X.bin";
const MASK_FILE: &str = "mask.bin";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("magic mismatch in {0}")]
    Magic(PathBuf),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("label domain: label at index {index} is {value}, expected +1 or -1")]
    LabelDomain { index: usize, value: f64 },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid parcellation: {0}")]
    Parcellation(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

/// Voxel-grid geometry: one grid coordinate per feature column.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGeometry {
    dims: [usize; 3],
    mask: Vec<[u32; 3]>,
    // grid cell (x-fastest linear index) -> feature index, u32::MAX outside the mask
    lookup: Vec<u32>,
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], mask: Vec<[u32; 3]>) -> Result<Self, DataError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(DataError::Geometry(format!("zero grid dimension {dims:?}")));
        }
        let cells = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| DataError::Geometry("grid too large".into()))?;
        if mask.len() >= u32::MAX as usize {
            return Err(DataError::Geometry("mask too large".into()));
        }
        let mut lookup = vec![u32::MAX; cells];
        for (feature, c) in mask.iter().enumerate() {
            if (0..3).any(|a| c[a] as usize >= dims[a]) {
                return Err(DataError::Geometry(format!(
                    "coordinate {c:?} outside grid {dims:?}"
                )));
            }
            let idx = c[0] as usize + dims[0] * (c[1] as usize + dims[1] * c[2] as usize);
            if lookup[idx] != u32::MAX {
                return Err(DataError::Geometry(format!("duplicate coordinate {c:?}")));
            }
            lookup[idx] = feature as u32;
        }
        Ok(Self { dims, mask, lookup })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn mask(&self) -> &[[u32; 3]] {
        &self.mask
    }

    /// Number of in-mask voxels (= feature count).
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Feature index of the voxel at `(x, y, z)`, if it lies inside the mask.
    pub fn feature_at(&self, x: i64, y: i64, z: i64) -> Option<usize> {
        let [dx, dy, dz] = self.dims;
        if x < 0 || y < 0 || z < 0 || x as usize >= dx || y as usize >= dy || z as usize >= dz {
            return None;
        }
        let f = self.lookup[x as usize + dx * (y as usize + dy * z as usize)];
        (f != u32::MAX).then_some(f as usize)
    }
}

/// `n × p` samples with ±1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Array2<f64>,
    y: Vec<f64>,
    geometry: Option<GridGeometry>,
}

impl Dataset {
    pub fn new(
        x: Array2<f64>,
        y: Vec<f64>,
        geometry: Option<GridGeometry>,
    ) -> Result<Self, DataError> {
        let (n, p) = x.dim();
        if y.len() != n {
            return Err(DataError::Dimension(format!(
                "{} labels for {n} rows",
                y.len()
            )));
        }
        check_labels(&y)?;
        for ((row, col), v) in x.indexed_iter() {
            if !v.is_finite() {
                return Err(DataError::NonFinite { row, col });
            }
        }
        if let Some(g) = &geometry {
            if g.len() != p {
                return Err(DataError::Dimension(format!(
                    "mask has {} voxels but matrix has {p} columns",
                    g.len()
                )));
            }
        }
        // row-major is what the container and the row-subsampling hot path expect
        let x = if x.is_standard_layout() {
            x
        } else {
            x.as_standard_layout().to_owned()
        };
        Ok(Self { x, y, geometry })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn geometry(&self) -> Option<&GridGeometry> {
        self.geometry.as_ref()
    }

    /// Same samples and geometry, different labels.
    pub fn with_labels(&self, y: Vec<f64>) -> Result<Self, DataError> {
        if y.len() != self.n() {
            return Err(DataError::Dimension(format!(
                "{} labels for {} rows",
                y.len(),
                self.n()
            )));
        }
        check_labels(&y)?;
        Ok(Self {
            x: self.x.clone(),
            y,
            geometry: self.geometry.clone(),
        })
    }

    /// Restrict to the given rows (in the given order).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            geometry: self.geometry.clone(),
        }
    }

    /// Indices of the +1 and −1 samples.
    pub fn class_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (i, &v) in self.y.iter().enumerate() {
            if v > 0.0 {
                pos.push(i);
            } else {
                neg.push(i);
            }
        }
        (pos, neg)
    }
}

fn check_labels(y: &[f64]) -> Result<(), DataError> {
    for (index, &value) in y.iter().enumerate() {
        if value != 1.0 && value != -1.0 {
            return Err(DataError::LabelDomain { index, value });
        }
    }
    Ok(())
}

/// Exact partition of `p` features into `q` non-empty clusters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Parcellation {
    assignment: Vec<usize>,
    q: usize,
}

impl Parcellation {
    pub fn new(assignment: Vec<usize>, q: usize) -> Result<Self, DataError> {
        if q == 0 {
            return Err(DataError::Parcellation("q must be at least 1".into()));
        }
        let mut used = vec![false; q];
        for (feature, &c) in assignment.iter().enumerate() {
            if c >= q {
                return Err(DataError::Parcellation(format!(
                    "feature {feature} has cluster id {c} >= q = {q}"
                )));
            }
            used[c] = true;
        }
        if let Some(empty) = used.iter().position(|u| !u) {
            return Err(DataError::Parcellation(format!("cluster {empty} is empty")));
        }
        Ok(Self { assignment, q })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Number of features covered.
    pub fn p(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster_of(&self, feature: usize) -> usize {
        self.assignment[feature]
    }

    /// Members of each cluster, ascending feature order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.q];
        for (f, &c) in self.assignment.iter().enumerate() {
            m[c].push(f);
        }
        m
    }

    /// SHA-256 over `q` and the assignment as little-endian u64s.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.q as u64).to_le_bytes());
        for &c in &self.assignment {
            h.update((c as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Per-feature selection counts over `k` resamplings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StabilityScores {
    counts: Vec<u32>,
    k: u32,
}

impl StabilityScores {
    pub fn new(counts: Vec<u32>, k: u32) -> Result<Self, DataError> {
        if k == 0 {
            return Err(DataError::Dimension("resampling count must be positive".into()));
        }
        if let Some(i) = counts.iter().position(|&c| c > k) {
            return Err(DataError::Dimension(format!(
                "count {} at feature {i} exceeds K = {k}",
                counts[i]
            )));
        }
        Ok(Self { counts, k })
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn normalized(&self) -> Vec<f64> {
        let k = self.k as f64;
        self.counts.iter().map(|&c| c as f64 / k).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    n: usize,
    p: usize,
    dtype: String,
    layout: String,
    labels: Vec<f64>,
    grid_dims: Option<[usize; 3]>,
}

/// Write `d` as a container directory (created if missing).
pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = Manifest {
        format: CONTAINER_FORMAT.into(),
        version: CONTAINER_VERSION,
        n: d.n(),
        p: d.p(),
        dtype: "f64le".into(),
        layout: "row-major".into(),
        labels: d.y.clone(),
        grid_dims: d.geometry.as_ref().map(|g| g.dims()),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DataError::Manifest(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(io_err(&path))?;

    let path = dir.join(MATRIX_FILE);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    w.write_all(MATRIX_MAGIC).map_err(io_err(&path))?;
    for v in d.x.iter() {
        w.write_all(&v.to_le_bytes()).map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join(MASK_FILE);
    match &d.geometry {
        Some(g) => {
            let mut bytes = Vec::with_capacity(g.len() * 12);
            for c in g.mask() {
                for v in c {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            fs::write(&path, bytes).map_err(io_err(&path))?;
        }
        None => {
            if path.exists() {
                fs::remove_file(&path).map_err(io_err(&path))?;
            }
        }
    }
    Ok(())
}

/// Read a container directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    if m.format != CONTAINER_FORMAT || m.version != CONTAINER_VERSION {
        return Err(DataError::Manifest(format!(
            "unsupported format {} v{}",
            m.format, m.version
        )));
    }
    if m.dtype != "f64le" || m.layout != "row-major" {
        return Err(DataError::Manifest(format!(
            "unsupported dtype/layout {}/{}",
            m.dtype, m.layout
        )));
    }
    if m.labels.len() != m.n {
        return Err(DataError::Dimension(format!(
            "manifest says n = {} but has {} labels",
            m.n,
            m.labels.len()
        )));
    }
    check_labels(&m.labels)?;

    let path = dir.join(MATRIX_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if bytes.len() < 4 || &bytes[..4] != MATRIX_MAGIC {
        return Err(DataError::Magic(path));
    }
    let body = &bytes[4..];
    let expected = m
        .n
        .checked_mul(m.p)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| DataError::Dimension("n*p overflows".into()))?;
    if body.len() != expected {
        return Err(DataError::Dimension(format!(
            "manifest says {}x{} ({expected} bytes) but {} holds {} bytes",
            m.n,
            m.p,
            path.display(),
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let x = Array2::from_shape_vec((m.n, m.p), values)
        .map_err(|e| DataError::Dimension(e.to_string()))?;

    let geometry = match m.grid_dims {
        Some(dims) => {
            let path = dir.join(MASK_FILE);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            if bytes.len() != m.p * 12 {
                return Err(DataError::Dimension(format!(
                    "mask.bin holds {} bytes, expected {} for p = {}",
                    bytes.len(),
                    m.p * 12,
                    m.p
                )));
            }
            let mask = bytes
                .chunks_exact(12)
                .map(|c| {
                    let v = |i: usize| u32::from_le_bytes(c[i..i + 4].try_into().expect("4 bytes"));
                    [v(0), v(4), v(8)]
                })
                .collect();
            Some(GridGeometry::new(dims, mask)?)
        }
        None => None,
    };
    Dataset::new(x, m.labels, geometry)
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// SHA-256 over the files of a container, in a fixed order.
pub fn container_checksum(dir: &Path) -> Result<String, DataError> {
    let mut h = Sha256::new();
    for name in [MANIFEST_FILE, MATRIX_FILE, MASK_FILE] {
        let path = dir.join(name);
        if name == MASK_FILE && !path.exists() {
            continue;
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Checks that a set of feature indices has no duplicates and stays below `p`.
pub(crate) fn check_feature_set(features: &[usize], p: usize) -> Result<(), DataError> {
    let mut seen = HashSet::with_capacity(features.len());
    for &f in features {
        if f >= p {
            return Err(DataError::Dimension(format!("feature {f} >= p = {p}")));
        }
        if !seen.insert(f) {
            return Err(DataError::Dimension(format!("duplicate feature {f}")));
        }
    }
    Ok(())
}

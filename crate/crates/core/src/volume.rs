//! In-memory volumes, masks, gradient tables, shells and patch extraction.
//!
//! Spatial indexing is x-fastest (`x + nx*(y + ny*z)`), matching the NIfTI
//! on-disk order. A [`Volume4D`] stores one such 3D slab per diffusion
//! direction, slab after slab.

use crate::error::{Error, Result};

pub type Affine = [[f64; 4]; 4];

pub fn identity_affine() -> Affine {
    let mut a = [[0.0; 4]; 4];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    a
}

pub(crate) fn spacing_affine(spacing: [f64; 3]) -> Affine {
    let mut a = identity_affine();
    for i in 0..3 {
        a[i][i] = spacing[i];
    }
    a
}

#[inline]
pub fn linear_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "volume dimensions must be positive, got {dims:?}"
        )));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::DimensionOverflow(dims.iter().map(|&d| d as i64).collect()))
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "voxel spacing must be positive, got {spacing:?}"
        )))
    }
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFiniteInput(format!(
            "value {} at linear index {i}",
            data[i]
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    data: Vec<f64>,
    spacing: [f64; 3],
    affine: Affine,
}

impl Volume3D {
    pub fn new(
        dims: [usize; 3],
        data: Vec<f64>,
        spacing: [f64; 3],
        affine: Affine,
    ) -> Result<Self> {
        let n = check_dims(&dims)?;
        if data.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} values for dims {dims:?}",
                data.len()
            )));
        }
        check_spacing(spacing)?;
        check_finite(&data)?;
        Ok(Self {
            dims,
            data,
            spacing,
            affine,
        })
    }

    /// Unit spacing and identity affine.
    pub fn from_data(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        Self::new(dims, data, [1.0; 3], identity_affine())
    }

    pub fn filled(dims: [usize; 3], value: f64) -> Result<Self> {
        let n = check_dims(&dims)?;
        Self::from_data(dims, vec![value; n])
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let n = check_dims(&dims)?;
        let mut data = Vec::with_capacity(n);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::from_data(dims, data)
    }

    /// Same geometry as `self`, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, data, self.spacing, self.affine)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[linear_index(self.dims, x, y, z)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    dims: [usize; 4],
    data: Vec<f64>,
    spacing: [f64; 3],
    affine: Affine,
}

impl Volume4D {
    pub fn new(
        dims: [usize; 4],
        data: Vec<f64>,
        spacing: [f64; 3],
        affine: Affine,
    ) -> Result<Self> {
        let n = check_dims(&dims)?;
        if data.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} values for dims {dims:?}",
                data.len()
            )));
        }
        check_spacing(spacing)?;
        check_finite(&data)?;
        Ok(Self {
            dims,
            data,
            spacing,
            affine,
        })
    }

    pub fn from_data(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        Self::new(dims, data, [1.0; 3], identity_affine())
    }

    /// Stacks 3D volumes along the direction axis; geometry is taken from the first.
    pub fn from_volumes(volumes: &[Volume3D]) -> Result<Self> {
        let first = volumes
            .first()
            .ok_or_else(|| Error::EmptyInput("no volumes to stack".into()))?;
        let d = first.dims();
        let mut data = Vec::with_capacity(first.len() * volumes.len());
        for v in volumes {
            if v.dims() != d {
                return Err(Error::DimensionMismatch(format!(
                    "cannot stack {:?} with {:?}",
                    v.dims(),
                    d
                )));
            }
            data.extend_from_slice(v.data());
        }
        Self::new(
            [d[0], d[1], d[2], volumes.len()],
            data,
            first.spacing,
            first.affine,
        )
    }

    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, data, self.spacing, self.affine)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn n_directions(&self) -> usize {
        self.dims[3]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The 3D slab for direction `d`.
    pub fn direction(&self, d: usize) -> &[f64] {
        let n = self.n_voxels();
        &self.data[d * n..(d + 1) * n]
    }

    pub fn direction_volume(&self, d: usize) -> Volume3D {
        Volume3D {
            dims: self.spatial_dims(),
            data: self.direction(d).to_vec(),
            spacing: self.spacing,
            affine: self.affine,
        }
    }

    pub fn get(&self, x: usize, y: usize, z: usize, d: usize) -> f64 {
        self.data[d * self.n_voxels() + linear_index(self.spatial_dims(), x, y, z)]
    }

    /// Geometry-preserving 3D volume with the same spatial layout.
    pub fn spatial_like(&self, data: Vec<f64>) -> Result<Volume3D> {
        Volume3D::new(self.spatial_dims(), data, self.spacing, self.affine)
    }

    /// Voxel-major copy of the selected directions: `out[v * indices.len() + j]`.
    pub(crate) fn gather_voxel_major(&self, indices: &[usize]) -> Vec<f64> {
        let nv = self.n_voxels();
        let nd = indices.len();
        let mut out = vec![0.0; nv * nd];
        for (j, &d) in indices.iter().enumerate() {
            for (v, &val) in self.direction(d).iter().enumerate() {
                out[v * nd + j] = val;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask3D {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl Mask3D {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        let n = check_dims(&dims)?;
        if data.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} mask values for dims {dims:?}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: bool) -> Result<Self> {
        let n = check_dims(&dims)?;
        Self::new(dims, vec![value; n])
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> bool) -> Result<Self> {
        let n = check_dims(&dims)?;
        let mut data = Vec::with_capacity(n);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, data)
    }

    /// Nonzero voxels of `vol` become `true`.
    pub fn from_volume(vol: &Volume3D) -> Self {
        Self {
            dims: vol.dims(),
            data: vol.data().iter().map(|&v| v != 0.0).collect(),
        }
    }

    pub fn to_volume(&self, spacing: [f64; 3], affine: Affine) -> Volume3D {
        Volume3D {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
            spacing,
            affine,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[linear_index(self.dims, x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn ensure_matches(&self, dims: [usize; 3]) -> Result<()> {
        if self.dims == dims {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "mask {:?} vs volume {:?}",
                self.dims, dims
            )))
        }
    }
}

/// Per-volume b-values (s/mm²) and unit b-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTable {
    bvals: Vec<f64>,
    bvecs: Vec<[f64; 3]>,
}

impl GradientTable {
    /// Nonzero b-vectors are normalized to unit length.
    pub fn new(bvals: Vec<f64>, bvecs: Vec<[f64; 3]>) -> Result<Self> {
        if bvals.len() != bvecs.len() {
            return Err(Error::LengthMismatch(format!(
                "{} b-values but {} b-vectors",
                bvals.len(),
                bvecs.len()
            )));
        }
        if bvals.is_empty() {
            return Err(Error::EmptyInput("gradient table has no entries".into()));
        }
        if let Some(b) = bvals.iter().find(|b| !b.is_finite() || **b < 0.0) {
            return Err(Error::InvalidArgument(format!("invalid b-value {b}")));
        }
        let bvecs = bvecs
            .into_iter()
            .map(|v| {
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if !n.is_finite() {
                    Err(Error::NonFiniteInput(format!("b-vector {v:?}")))
                } else if n > 0.0 {
                    Ok([v[0] / n, v[1] / n, v[2] / n])
                } else {
                    Ok(v)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { bvals, bvecs })
    }

    pub fn bvals(&self) -> &[f64] {
        &self.bvals
    }

    pub fn bvecs(&self) -> &[[f64; 3]] {
        &self.bvecs
    }

    pub fn len(&self) -> usize {
        self.bvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvals.is_empty()
    }

    pub fn ensure_matches(&self, vol: &Volume4D) -> Result<()> {
        if self.len() == vol.n_directions() {
            Ok(())
        } else {
            Err(Error::LengthMismatch(format!(
                "gradient table has {} entries, volume has {} directions",
                self.len(),
                vol.n_directions()
            )))
        }
    }
}

/// Volumes acquired at approximately one b-value.
#[derive(Debug, Clone, PartialEq)]
pub struct Shell {
    pub b_target: f64,
    pub tolerance: f64,
    pub indices: Vec<usize>,
}

impl Shell {
    /// A shell covering every volume, for callers that have no gradient table.
    pub fn all(n_directions: usize) -> Self {
        Self {
            b_target: 0.0,
            tolerance: f64::INFINITY,
            indices: (0..n_directions).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn ensure_valid_for(&self, vol: &Volume4D) -> Result<()> {
        if self.indices.is_empty() {
            return Err(Error::DimensionMismatch("shell has no volumes".into()));
        }
        match self.indices.iter().find(|&&i| i >= vol.n_directions()) {
            Some(i) => Err(Error::DimensionMismatch(format!(
                "shell index {i} out of range for {} directions",
                vol.n_directions()
            ))),
            None => Ok(()),
        }
    }
}

pub const DEFAULT_B_MIN: f64 = 100.0;

pub fn default_shell_tolerance(b: f64) -> f64 {
    (0.01 * b).max(50.0)
}

/// The shell at the smallest b-value that is at least `b_min`.
///
/// Values within `tolerance` of the smallest eligible b-value form the seed
/// group; its mean becomes `b_target` and the shell gathers every eligible
/// volume within `tolerance` of that mean. `None` uses
/// [`default_shell_tolerance`] of the smallest eligible b-value.
pub fn select_lowest_shell(
    gtab: &GradientTable,
    b_min: f64,
    tolerance: Option<f64>,
) -> Result<Shell> {
    let lowest = gtab
        .bvals()
        .iter()
        .copied()
        .filter(|&b| b >= b_min)
        .fold(f64::INFINITY, f64::min);
    if !lowest.is_finite() {
        return Err(Error::NoEligibleShell { b_min });
    }
    let tol = tolerance.unwrap_or_else(|| default_shell_tolerance(lowest));
    let seed: Vec<f64> = gtab
        .bvals()
        .iter()
        .copied()
        .filter(|&b| b >= b_min && b - lowest <= tol)
        .collect();
    let b_target = seed.iter().sum::<f64>() / seed.len() as f64;
    let indices = gtab
        .bvals()
        .iter()
        .enumerate()
        .filter(|(_, &b)| b >= b_min && (b - b_target).abs() <= tol)
        .map(|(i, _)| i)
        .collect();
    Ok(Shell {
        b_target,
        tolerance: tol,
        indices,
    })
}

/// Volumes within `tolerance` of `b`; `b_target` is reported as their mean.
pub fn select_shell(gtab: &GradientTable, b: f64, tolerance: Option<f64>) -> Result<Shell> {
    let tol = tolerance.unwrap_or_else(|| default_shell_tolerance(b));
    let indices: Vec<usize> = gtab
        .bvals()
        .iter()
        .enumerate()
        .filter(|(_, &v)| (v - b).abs() <= tol)
        .map(|(i, _)| i)
        .collect();
    if indices.is_empty() {
        return Err(Error::NoEligibleShell { b_min: b });
    }
    let b_target = indices.iter().map(|&i| gtab.bvals()[i]).sum::<f64>() / indices.len() as f64;
    Ok(Shell {
        b_target,
        tolerance: tol,
        indices,
    })
}

/// Voxel-wise arithmetic mean over the shell's direction volumes.
pub fn trace_image(vol: &Volume4D, shell: &Shell) -> Result<Volume3D> {
    shell.ensure_valid_for(vol)?;
    let mut acc = vec![0.0; vol.n_voxels()];
    for &d in &shell.indices {
        for (a, &v) in acc.iter_mut().zip(vol.direction(d)) {
            *a += v;
        }
    }
    let n = shell.indices.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    vol.spatial_like(acc)
}

/// Start of a `k`-wide window nominally centered at `c`, shifted to fit in `[0, n)`.
#[inline]
pub(crate) fn window_start(c: usize, k: usize, n: usize) -> usize {
    let half = k / 2;
    c.saturating_sub(half).min(n - k)
}

pub(crate) fn check_kernel(k: usize, dims: [usize; 3]) -> Result<()> {
    if k % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel size {k} is not odd"
        )));
    }
    if dims.iter().any(|&d| k > d) {
        return Err(Error::KernelTooLarge { k, dims });
    }
    Ok(())
}

/// Casorati matrix of one cubic patch: rows are patch voxels in z-major
/// raster order (x varies fastest), columns are shell directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    pub center: [usize; 3],
    pub origin: [usize; 3],
    pub k: usize,
    pub center_row: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl PatchMatrix {
    /// Builds a patch from a raw row-major matrix (no geometry).
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self {
            center: [0; 3],
            origin: [0; 3],
            k: 0,
            center_row: 0,
            rows,
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major `rows x cols` values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Voxel coordinates of row `r`.
    pub fn row_voxel(&self, r: usize) -> [usize; 3] {
        let k = self.k;
        [
            self.origin[0] + r % k,
            self.origin[1] + (r / k) % k,
            self.origin[2] + r / (k * k),
        ]
    }
}

pub fn extract_patch(
    vol: &Volume4D,
    shell: &Shell,
    center: [usize; 3],
    k: usize,
) -> Result<PatchMatrix> {
    shell.ensure_valid_for(vol)?;
    let dims = vol.spatial_dims();
    check_kernel(k, dims)?;
    if (0..3).any(|a| center[a] >= dims[a]) {
        return Err(Error::InvalidArgument(format!(
            "center {center:?} outside volume {dims:?}"
        )));
    }
    let origin = [
        window_start(center[0], k, dims[0]),
        window_start(center[1], k, dims[1]),
        window_start(center[2], k, dims[2]),
    ];
    let cols = shell.indices.len();
    let rows = k * k * k;
    let mut data = Vec::with_capacity(rows * cols);
    for z in origin[2]..origin[2] + k {
        for y in origin[1]..origin[1] + k {
            for x in origin[0]..origin[0] + k {
                data.extend(shell.indices.iter().map(|&d| vol.get(x, y, z, d)));
            }
        }
    }
    let rel = [
        center[0] - origin[0],
        center[1] - origin[1],
        center[2] - origin[2],
    ];
    Ok(PatchMatrix {
        center,
        origin,
        k,
        center_row: rel[0] + k * (rel[1] + k * rel[2]),
        rows,
        cols,
        data,
    })
}

//! Voxel-wise kernel sizes from clustered gradient magnitudes.
//!
//! In-mask gradient values are grouped with 1D k-means into as many clusters
//! as there are odd sizes in `[k_l, k_u]`. Clusters are ranked by centroid,
//! highest first, and paired with sizes in ascending order, so steep
//! gradients get small kernels. Voxels outside the mask get the fixed size `H`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::structure::GradientMap;
use crate::volume::{Mask3D, Volume3D};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_K_LOWER: usize = 5;
pub const DEFAULT_K_UPPER: usize = 9;

const MAX_ITERATIONS: usize = 300;
const RELATIVE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelBounds {
    pub k_lower: usize,
    pub k_upper: usize,
    /// Size used outside the mask.
    pub outside: usize,
}

impl KernelBounds {
    /// Outside-mask size defaults to `k_upper`.
    pub fn new(k_lower: usize, k_upper: usize) -> Result<Self> {
        Self::with_outside(k_lower, k_upper, k_upper)
    }

    pub fn with_outside(k_lower: usize, k_upper: usize, outside: usize) -> Result<Self> {
        let b = Self {
            k_lower,
            k_upper,
            outside,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, k) in [
            ("lower", self.k_lower),
            ("upper", self.k_upper),
            ("outside", self.outside),
        ] {
            if k % 2 == 0 {
                return Err(Error::InvalidBounds(format!(
                    "{name} kernel size {k} must be odd"
                )));
            }
        }
        if self.k_lower > self.k_upper {
            return Err(Error::InvalidBounds(format!(
                "lower bound {} exceeds upper bound {}",
                self.k_lower, self.k_upper
            )));
        }
        Ok(())
    }

    pub fn max_size(&self) -> usize {
        self.k_upper.max(self.outside)
    }
}

impl Default for KernelBounds {
    fn default() -> Self {
        Self::new(DEFAULT_K_LOWER, DEFAULT_K_UPPER).expect("default bounds are valid")
    }
}

/// Odd sizes in `[k_lower, k_upper]`, ascending.
pub fn allowed_kernel_sizes(bounds: &KernelBounds) -> Result<Vec<usize>> {
    bounds.validate()?;
    Ok((bounds.k_lower..=bounds.k_upper).step_by(2).collect())
}

/// Per-voxel odd patch sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelMap {
    dims: [usize; 3],
    sizes: Vec<usize>,
}

impl KernelMap {
    pub fn new(dims: [usize; 3], sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() != dims.iter().product::<usize>() {
            return Err(Error::DimensionMismatch(format!(
                "{} kernel sizes for dims {dims:?}",
                sizes.len()
            )));
        }
        if let Some(k) = sizes.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::InvalidArgument(format!(
                "kernel size {k} is not odd"
            )));
        }
        Ok(Self { dims, sizes })
    }

    pub fn constant(dims: [usize; 3], k: usize) -> Result<Self> {
        Self::new(dims, vec![k; dims.iter().product()])
    }

    /// Values must be odd positive integers.
    pub fn from_volume(vol: &Volume3D) -> Result<Self> {
        let sizes = vol
            .data()
            .iter()
            .map(|&v| {
                if v >= 1.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::InvalidArgument(format!(
                        "kernel map value {v} is not a positive integer"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(vol.dims(), sizes)
    }

    pub fn to_volume(&self, spacing: [f64; 3], affine: crate::volume::Affine) -> Volume3D {
        Volume3D::new(
            self.dims,
            self.sizes.iter().map(|&k| k as f64).collect(),
            spacing,
            affine,
        )
        .expect("kernel map geometry is valid")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn max(&self) -> usize {
        self.sizes.iter().copied().max().unwrap_or(1)
    }

    /// Voxel count per kernel size, ascending by size.
    pub fn histogram(&self) -> Vec<(usize, usize)> {
        let mut h = std::collections::BTreeMap::new();
        for &k in &self.sizes {
            *h.entry(k).or_insert(0usize) += 1;
        }
        h.into_iter().collect()
    }
}

/// Result of 1D k-means.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// Cluster means in the units of the input values.
    pub centroids: Vec<f64>,
    /// Cluster indices ordered by descending centroid.
    pub order: Vec<usize>,
    /// Cluster index for every input value.
    pub assignments: Vec<usize>,
}

impl ClusterModel {
    pub fn n_clusters(&self) -> usize {
        self.centroids.len()
    }
}

#[inline]
fn nearest(v: f64, centers: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = (v - centers[0]).abs();
    for (i, &c) in centers.iter().enumerate().skip(1) {
        let d = (v - c).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

fn kmeans_plus_plus(values: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centers = vec![values[rng.random_range(0..values.len())]];
    let mut d2: Vec<f64> = values.iter().map(|v| (v - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = values.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).expect("positive total");
            }
            values[pick]
        } else {
            break;
        };
        centers.push(next);
        for (d, v) in d2.iter_mut().zip(values) {
            *d = d.min((v - next).powi(2));
        }
    }
    centers
}

/// Seeded k-means++ / Lloyd clustering of scalar values.
///
/// Values are min-max normalized before seeding. Iteration stops once the
/// relative inertia change drops below 1e-6 or after 300 rounds. When fewer
/// than `k` distinct values exist, one cluster per distinct value is returned.
pub fn kmeans_1d(values: &[f64], k: usize, seed: u64) -> Result<ClusterModel> {
    if values.is_empty() {
        return Err(Error::EmptyInput("k-means needs at least one value".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k-means needs k >= 1".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(format!("k-means value {v}")));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = hi - lo;
    let norm: Vec<f64> = if span > 0.0 {
        values.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; values.len()]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_plus_plus(&norm, k, &mut rng);
    let kk = centers.len();
    let mut assign = vec![0usize; norm.len()];
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        for (a, &v) in assign.iter_mut().zip(&norm) {
            let n = nearest(v, &centers);
            changed |= *a != n;
            *a = n;
        }
        let mut sums = vec![0.0; kk];
        let mut counts = vec![0usize; kk];
        for (&a, &v) in assign.iter().zip(&norm) {
            sums[a] += v;
            counts[a] += 1;
        }
        for c in 0..kk {
            if counts[c] > 0 {
                centers[c] = sums[c] / counts[c] as f64;
            } else {
                // re-seed an empty cluster at the worst-fit value
                let (far, _) = norm
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (i, (v - centers[assign[i]]).abs()))
                    .fold((0, -1.0), |b, x| if x.1 > b.1 { x } else { b });
                centers[c] = norm[far];
                assign[far] = c;
                changed = true;
            }
        }
        let inertia: f64 = assign
            .iter()
            .zip(&norm)
            .map(|(&a, &v)| (v - centers[a]).powi(2))
            .sum();
        let converged = !changed
            || (prev_inertia.is_finite()
                && (prev_inertia - inertia).abs()
                    <= RELATIVE_TOLERANCE * prev_inertia.max(f64::MIN_POSITIVE));
        prev_inertia = inertia;
        if converged {
            break;
        }
    }
    for (a, &v) in assign.iter_mut().zip(&norm) {
        *a = nearest(v, &centers);
    }

    // drop clusters left empty by the final assignment and report means in input units
    let mut sums = vec![0.0; kk];
    let mut counts = vec![0usize; kk];
    for (&a, &v) in assign.iter().zip(values) {
        sums[a] += v;
        counts[a] += 1;
    }
    let mut remap = vec![usize::MAX; kk];
    let mut centroids = Vec::new();
    for c in 0..kk {
        if counts[c] > 0 {
            remap[c] = centroids.len();
            centroids.push(sums[c] / counts[c] as f64);
        }
    }
    let assignments = assign.iter().map(|&a| remap[a]).collect();
    let mut order: Vec<usize> = (0..centroids.len()).collect();
    order.sort_by(|&a, &b| centroids[b].total_cmp(&centroids[a]).then(a.cmp(&b)));
    Ok(ClusterModel {
        centroids,
        order,
        assignments,
    })
}

/// Kernel size per cluster index. Highest centroid gets the smallest size;
/// with fewer clusters than sizes the extremes stay pinned to the first and
/// last size and the rest are spread at evenly spaced indices.
pub fn map_clusters_to_kernels(model: &ClusterModel, sizes: &[usize]) -> Result<Vec<usize>> {
    let kp = model.n_clusters();
    let k = sizes.len();
    if k == 0 {
        return Err(Error::EmptyInput("no kernel sizes".into()));
    }
    if kp > k {
        return Err(Error::InvalidArgument(format!(
            "{kp} clusters for {k} kernel sizes"
        )));
    }
    let mut table = vec![0; kp];
    for (rank, &cluster) in model.order.iter().enumerate() {
        let idx = if kp == k {
            rank
        } else if kp == 1 {
            0
        } else {
            ((rank * (k - 1)) as f64 / (kp - 1) as f64).round() as usize
        };
        table[cluster] = sizes[idx];
    }
    Ok(table)
}

pub fn build_kernel_map(
    g: &GradientMap,
    mask: &Mask3D,
    bounds: &KernelBounds,
    seed: u64,
) -> Result<KernelMap> {
    mask.ensure_matches(g.dims())?;
    let sizes = allowed_kernel_sizes(bounds)?;
    let values = g.volume().data();
    let inside: Vec<usize> = mask
        .data()
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    let mut out = vec![bounds.outside; values.len()];
    if inside.is_empty() {
        return KernelMap::new(g.dims(), out);
    }
    let samples: Vec<f64> = inside.iter().map(|&i| values[i]).collect();
    let model = kmeans_1d(&samples, sizes.len(), seed)?;
    let table = map_clusters_to_kernels(&model, &sizes)?;
    let assigned: Vec<(usize, usize)> = inside
        .par_iter()
        .zip(model.assignments.par_iter())
        .map(|(&voxel, &cluster)| (voxel, table[cluster]))
        .collect();
    for (voxel, k) in assigned {
        out[voxel] = k;
    }
    KernelMap::new(g.dims(), out)
}

//! Marchenko-Pastur PCA denoising of patch matrices and whole volumes.
//!
//! A patch is an `M x N` Casorati matrix (patch voxels by directions). With
//! `m = min(M, N)` and `n = max(M, N)`, the eigenvalues `λ_1 >= .. >= λ_m`
//! of the smaller Gram matrix divided by `n` are classified as follows: for
//! `p = 0, 1, ..` the trailing `m - p` values are tested as a pure-noise
//! MP bulk, whose width `λ_{p+1} - λ_m` is `4 σ² sqrt((m - p) / n)`. The
//! first `p` for which the width-implied variance falls below the mean of
//! the trailing values is the signal rank, and that mean is `σ²`.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel_map::{build_kernel_map, KernelBounds, KernelMap};
use crate::mask::{median_otsu_mask_with, MedianOtsuParams};
use crate::structure::{gradient_map, GradientMap, SmoothingSpec};
use crate::volume::{
    check_kernel, select_lowest_shell, trace_image, window_start, GradientTable, Mask3D,
    PatchMatrix, Shell, Volume3D, Volume4D, DEFAULT_B_MIN,
};

/// Eigenvalues below this fraction of the largest (times the count) are treated as exact zeros.
const ZERO_EIGEN_RELATIVE: f64 = 64.0 * f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpClassification {
    pub rank: usize,
    pub sigma2: f64,
    /// No candidate rank passed the test; `rank` was set to `m - 1`.
    pub degenerate: bool,
}

/// Classifies descending, nonnegative eigenvalues of the small Gram matrix
/// (already divided by the larger dimension `n_large`).
pub fn classify_eigenvalues(eigenvalues: &[f64], n_large: usize) -> MpClassification {
    let m = eigenvalues.len();
    if m == 0 {
        return MpClassification {
            rank: 0,
            sigma2: 0.0,
            degenerate: false,
        };
    }
    let mut tail = vec![0.0; m + 1];
    for i in (0..m).rev() {
        tail[i] = tail[i + 1] + eigenvalues[i];
    }
    let last = eigenvalues[m - 1];
    for p in 0..m {
        let avg = tail[p] / (m - p) as f64;
        if avg <= 0.0 {
            return MpClassification {
                rank: p,
                sigma2: 0.0,
                degenerate: false,
            };
        }
        let gamma = (m - p) as f64 / n_large as f64;
        let range = (eigenvalues[p] - last) / (4.0 * gamma.sqrt());
        if range < avg {
            return MpClassification {
                rank: p,
                sigma2: avg,
                degenerate: false,
            };
        }
    }
    MpClassification {
        rank: m - 1,
        sigma2: last.max(0.0),
        degenerate: true,
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Eigen-decomposition of the smaller Gram matrix of a column-major `rows x cols` matrix.
struct Decomposition {
    /// `true` when the Gram matrix is `XᵀX` (cols x cols).
    column_space: bool,
    /// Descending eigenvalues, divided by the larger dimension, small values zeroed.
    eigenvalues: Vec<f64>,
    /// Eigenvectors as columns, same order as `eigenvalues`.
    vectors: DMatrix<f64>,
    class: MpClassification,
}

fn decompose(cols_major: &[f64], rows: usize, cols: usize) -> Decomposition {
    let column_space = rows >= cols;
    let (small, large) = if column_space {
        (cols, rows)
    } else {
        (rows, cols)
    };
    let mut gram = DMatrix::<f64>::zeros(small, small);
    if column_space {
        for i in 0..cols {
            let ci = &cols_major[i * rows..(i + 1) * rows];
            for j in i..cols {
                let v = dot(ci, &cols_major[j * rows..(j + 1) * rows]);
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
        }
    } else {
        for c in 0..cols {
            let col = &cols_major[c * rows..(c + 1) * rows];
            for i in 0..rows {
                let xi = col[i];
                for j in i..rows {
                    gram[(i, j)] += xi * col[j];
                }
            }
        }
        for i in 0..rows {
            for j in i + 1..rows {
                gram[(j, i)] = gram[(i, j)];
            }
        }
    }

    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..small).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues[order[0]].max(0.0);
    let floor = top * small as f64 * ZERO_EIGEN_RELATIVE;
    let eigenvalues: Vec<f64> = order
        .iter()
        .map(|&i| {
            let e = eig.eigenvalues[i];
            if e <= floor {
                0.0
            } else {
                e / large as f64
            }
        })
        .collect();
    let vectors = DMatrix::from_fn(small, small, |r, c| eig.eigenvectors[(r, order[c])]);
    let class = classify_eigenvalues(&eigenvalues, large);
    Decomposition {
        column_space,
        eigenvalues,
        vectors,
        class,
    }
}

impl Decomposition {
    /// Denoised copy of row `r` of the column-major matrix.
    fn reconstruct_row(
        &self,
        cols_major: &[f64],
        rows: usize,
        cols: usize,
        r: usize,
        out: &mut [f64],
    ) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let p = self.class.rank;
        if self.column_space {
            // x̂_r = Σ_i (x_r · v_i) v_i
            for i in 0..p {
                let v = self.vectors.column(i);
                let coef: f64 = (0..cols).map(|c| cols_major[c * rows + r] * v[c]).sum();
                for c in 0..cols {
                    out[c] += coef * v[c];
                }
            }
        } else {
            // x̂_r = Σ_i u_i[r] (Xᵀ u_i)
            for i in 0..p {
                let u = self.vectors.column(i);
                let w = u[r];
                if w == 0.0 {
                    continue;
                }
                for c in 0..cols {
                    let col = &cols_major[c * rows..(c + 1) * rows];
                    out[c] += w * dot(col, u.as_slice());
                }
            }
        }
    }
}

/// Denoised patch, noise level and retained rank.
#[derive(Debug, Clone, PartialEq)]
pub struct MpPatchResult {
    /// Row-major, same shape as the input patch.
    pub denoised: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub sigma: f64,
    pub rank: usize,
    pub degenerate: bool,
    /// Descending eigenvalues of the small Gram matrix over the larger dimension.
    pub eigenvalues: Vec<f64>,
}

impl MpPatchResult {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.denoised[r * self.cols..(r + 1) * self.cols]
    }
}

pub fn mp_denoise_patch(x: &PatchMatrix) -> Result<MpPatchResult> {
    let (rows, cols) = (x.rows(), x.cols());
    if cols < 2 {
        return Err(Error::InvalidArgument(format!(
            "MP-PCA needs at least 2 columns, got {cols}"
        )));
    }
    if let Some(v) = x.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(format!("patch value {v}")));
    }
    let mut col_major = vec![0.0; rows * cols];
    for r in 0..rows {
        for (c, &v) in x.row(r).iter().enumerate() {
            col_major[c * rows + r] = v;
        }
    }
    let d = decompose(&col_major, rows, cols);
    let mut denoised = vec![0.0; rows * cols];
    for r in 0..rows {
        d.reconstruct_row(
            &col_major,
            rows,
            cols,
            r,
            &mut denoised[r * cols..(r + 1) * cols],
        );
    }
    Ok(MpPatchResult {
        denoised,
        rows,
        cols,
        sigma: d.class.sigma2.sqrt(),
        rank: d.class.rank,
        degenerate: d.class.degenerate,
        eigenvalues: d.eigenvalues,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseOutput {
    /// Input with the target shell replaced by its denoised values.
    pub denoised: Volume4D,
    pub sigma_map: Volume3D,
    /// Retained rank per voxel (integer-valued).
    pub rank_map: Volume3D,
    pub kernel_map_used: KernelMap,
    pub degenerate_count: usize,
    pub elapsed_seconds: f64,
}

/// Fixed `k x k x k` patches around every voxel; only the center row is kept.
pub fn denoise_fixed(vol: &Volume4D, shell: &Shell, k: usize) -> Result<DenoiseOutput> {
    check_kernel(k, vol.spatial_dims())?;
    denoise_adaptive(vol, shell, &KernelMap::constant(vol.spatial_dims(), k)?)
}

/// Per-voxel patch size taken from `kmap`; otherwise identical to [`denoise_fixed`].
pub fn denoise_adaptive(vol: &Volume4D, shell: &Shell, kmap: &KernelMap) -> Result<DenoiseOutput> {
    let start = Instant::now();
    shell.ensure_valid_for(vol)?;
    let dims = vol.spatial_dims();
    if kmap.dims() != dims {
        return Err(Error::DimensionMismatch(format!(
            "kernel map {:?} vs volume {:?}",
            kmap.dims(),
            dims
        )));
    }
    for (k, _) in kmap.histogram() {
        check_kernel(k, dims)?;
    }
    let n = shell.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "shell has {n} volume(s); MP-PCA needs at least 2"
        )));
    }

    let voxel_major = vol.gather_voxel_major(&shell.indices);
    let results: Vec<(Vec<f64>, f64, usize, bool)> = (0..vol.n_voxels())
        .into_par_iter()
        .map_init(Vec::new, |buf, v| {
            let k = kmap.sizes()[v];
            let c = [
                v % dims[0],
                (v / dims[0]) % dims[1],
                v / (dims[0] * dims[1]),
            ];
            let o = [
                window_start(c[0], k, dims[0]),
                window_start(c[1], k, dims[1]),
                window_start(c[2], k, dims[2]),
            ];
            let rows = k * k * k;
            buf.resize(rows * n, 0.0);
            let mut r = 0;
            for z in o[2]..o[2] + k {
                for y in o[1]..o[1] + k {
                    let base = o[0] + dims[0] * (y + dims[1] * z);
                    for x in 0..k {
                        let src = &voxel_major[(base + x) * n..(base + x + 1) * n];
                        for (j, &s) in src.iter().enumerate() {
                            buf[j * rows + r] = s;
                        }
                        r += 1;
                    }
                }
            }
            let center_row = (c[0] - o[0]) + k * ((c[1] - o[1]) + k * (c[2] - o[2]));
            let d = decompose(buf, rows, n);
            let mut row = vec![0.0; n];
            d.reconstruct_row(buf, rows, n, center_row, &mut row);
            (row, d.class.sigma2.sqrt(), d.class.rank, d.class.degenerate)
        })
        .collect();

    let nv = vol.n_voxels();
    let mut data = vol.data().to_vec();
    let mut sigma = Vec::with_capacity(nv);
    let mut rank = Vec::with_capacity(nv);
    let mut degenerate_count = 0;
    for (v, (row, s, p, deg)) in results.into_iter().enumerate() {
        for (j, &d) in shell.indices.iter().enumerate() {
            data[d * nv + v] = row[j];
        }
        sigma.push(s);
        rank.push(p as f64);
        degenerate_count += deg as usize;
    }
    Ok(DenoiseOutput {
        denoised: vol.with_data(data)?,
        sigma_map: vol.spatial_like(sigma)?,
        rank_map: vol.spatial_like(rank)?,
        kernel_map_used: kmap.clone(),
        degenerate_count,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Knobs for kernel-map estimation that have sensible defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub b_min: f64,
    pub shell_tolerance: Option<f64>,
    pub smoothing: SmoothingSpec,
    pub mask_params: MedianOtsuParams,
    /// Use this brain mask instead of computing one.
    pub mask: Option<Mask3D>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            b_min: DEFAULT_B_MIN,
            shell_tolerance: None,
            smoothing: SmoothingSpec::default(),
            mask_params: MedianOtsuParams::default(),
            mask: None,
        }
    }
}

/// Intermediate products of kernel-map estimation.
#[derive(Debug, Clone)]
pub struct KernelEstimate {
    pub shell: Shell,
    pub trace: Volume3D,
    pub mask: Mask3D,
    pub gradient: GradientMap,
    pub kernel_map: KernelMap,
}

/// Lowest shell with b >= `b_min`, its trace image, brain mask, gradient map and kernel map.
pub fn estimate_kernel_map(
    vol: &Volume4D,
    gtab: &GradientTable,
    bounds: &KernelBounds,
    seed: u64,
    opts: &PipelineOptions,
) -> Result<KernelEstimate> {
    gtab.ensure_matches(vol)?;
    let shell = select_lowest_shell(gtab, opts.b_min, opts.shell_tolerance)?;
    let trace = trace_image(vol, &shell)?;
    let mask = match &opts.mask {
        Some(m) => {
            m.ensure_matches(vol.spatial_dims())?;
            m.clone()
        }
        None => median_otsu_mask_with(&trace, opts.mask_params)?,
    };
    let gradient = gradient_map(&trace, &opts.smoothing)?;
    let kernel_map = build_kernel_map(&gradient, &mask, bounds, seed)?;
    Ok(KernelEstimate {
        shell,
        trace,
        mask,
        gradient,
        kernel_map,
    })
}

/// Kernel-map estimation followed by adaptive denoising of `target_shell`.
pub fn run_pipeline(
    vol: &Volume4D,
    gtab: &GradientTable,
    bounds: &KernelBounds,
    seed: u64,
    target_shell: &Shell,
) -> Result<DenoiseOutput> {
    run_pipeline_with(
        vol,
        gtab,
        bounds,
        seed,
        target_shell,
        &PipelineOptions::default(),
    )
    .map(|(out, _)| out)
}

pub fn run_pipeline_with(
    vol: &Volume4D,
    gtab: &GradientTable,
    bounds: &KernelBounds,
    seed: u64,
    target_shell: &Shell,
    opts: &PipelineOptions,
) -> Result<(DenoiseOutput, KernelEstimate)> {
    let estimate = estimate_kernel_map(vol, gtab, bounds, seed, opts)?;
    let out = denoise_adaptive(vol, target_shell, &estimate.kernel_map)?;
    Ok((out, estimate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl MapSummary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Some(Self {
            mean: sorted.iter().sum::<f64>() / n as f64,
            median,
            min: sorted[0],
            max: sorted[n - 1],
        })
    }
}

/// Summary written next to denoised outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseReport {
    pub shell_b: f64,
    pub shell_volumes: usize,
    pub sigma: Option<MapSummary>,
    /// (rank, voxel count), ascending by rank.
    pub rank_histogram: Vec<(usize, usize)>,
    /// (kernel size, voxel count), ascending by size.
    pub kernel_histogram: Vec<(usize, usize)>,
    pub degenerate_patches: usize,
    pub elapsed_seconds: f64,
}

impl DenoiseReport {
    /// Sigma statistics restricted to `mask` when given.
    pub fn new(out: &DenoiseOutput, shell: &Shell, mask: Option<&Mask3D>) -> Self {
        let sig: Vec<f64> = out
            .sigma_map
            .data()
            .iter()
            .enumerate()
            .filter(|(i, _)| mask.is_none_or(|m| m.data()[*i]))
            .map(|(_, &s)| s)
            .collect();
        let mut ranks = std::collections::BTreeMap::new();
        for &r in out.rank_map.data() {
            *ranks.entry(r as usize).or_insert(0usize) += 1;
        }
        Self {
            shell_b: shell.b_target,
            shell_volumes: shell.len(),
            sigma: MapSummary::of(&sig),
            rank_histogram: ranks.into_iter().collect(),
            kernel_histogram: out.kernel_map_used.histogram(),
            degenerate_patches: out.degenerate_count,
            elapsed_seconds: out.elapsed_seconds,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn noise_patch(rows: usize, cols: usize, sigma: f64, rng: &mut ChaCha8Rng) -> PatchMatrix {
        let n = Normal::new(0.0, sigma).unwrap();
        PatchMatrix::from_rows(
            rows,
            cols,
            (0..rows * cols).map(|_| n.sample(rng)).collect(),
        )
        .unwrap()
    }

    fn unit(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    /// Rank-`p` truncation through an SVD of the patch itself.
    fn svd_truncate(x: &PatchMatrix, p: usize) -> DMatrix<f64> {
        let m = DMatrix::from_row_slice(x.rows(), x.cols(), x.data());
        let svd = m.svd(true, true);
        let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut out = DMatrix::zeros(x.rows(), x.cols());
        for &i in idx.iter().take(p) {
            out += svd.singular_values[i] * u.column(i) * vt.row(i);
        }
        out
    }

    #[test]
    fn zero_patch() {
        let x = PatchMatrix::from_rows(27, 8, vec![0.0; 216]).unwrap();
        let r = mp_denoise_patch(&x).unwrap();
        assert_eq!(r.rank, 0);
        assert_eq!(r.sigma, 0.0);
        assert!(r.denoised.iter().all(|&v| v == 0.0));
        assert!(!r.degenerate);
    }

    #[test]
    fn pure_noise_sigma_and_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut sig, mut ranks) = (vec![], vec![]);
        for _ in 0..200 {
            let r = mp_denoise_patch(&noise_patch(343, 64, 1.0, &mut rng)).unwrap();
            sig.push(r.sigma);
            ranks.push(r.rank as f64);
        }
        assert!((median(sig.clone()) - 1.0).abs() <= 0.10, "{}", median(sig));
        assert!(median(ranks) <= 2.0);
    }

    #[test]
    fn rank_one_recovery_matches_svd() {
        // the MP rule is a finite-sample test, so the rank is checked as a rate
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut hits = 0;
        for trial in 0..100 {
            let (u, v) = (unit(125, &mut rng), unit(32, &mut rng));
            let clean: Vec<f64> = (0..125)
                .flat_map(|i| {
                    let ui = u[i];
                    v.iter().map(move |vj| 50.0 * ui * vj)
                })
                .collect();
            let data: Vec<f64> = clean.iter().map(|c| c + noise.sample(&mut rng)).collect();
            let x = PatchMatrix::from_rows(125, 32, data).unwrap();
            let r = mp_denoise_patch(&x).unwrap();
            hits += usize::from(r.rank == 1);
            assert!(r.rank >= 1);
            let err: f64 = r
                .denoised
                .iter()
                .zip(&clean)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(err / 50.0 < 0.05);
            if trial < 5 {
                let oracle = svd_truncate(&x, r.rank);
                for i in 0..125 {
                    for j in 0..32 {
                        assert!((oracle[(i, j)] - r.row(i)[j]).abs() < 1e-9);
                    }
                }
            }
        }
        assert!(hits >= 80, "rank 1 in {hits} of 100");
    }

    #[test]
    fn wide_patch_uses_row_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (u, v) = (unit(27, &mut rng), unit(64, &mut rng));
        let noise = Normal::new(0.0, 0.02).unwrap();
        let data: Vec<f64> = (0..27)
            .flat_map(|i| {
                {
                    let ui = u[i];
                    v.iter().map(move |vj| 20.0 * ui * vj)
                }
                .collect::<Vec<_>>()
            })
            .map(|c| c + noise.sample(&mut rng))
            .collect();
        let x = PatchMatrix::from_rows(27, 64, data).unwrap();
        let r = mp_denoise_patch(&x).unwrap();
        assert_eq!(r.rank, 1);
        assert_eq!(r.eigenvalues.len(), 27);
        let oracle = svd_truncate(&x, 1);
        for i in 0..27 {
            for j in 0..64 {
                assert!((oracle[(i, j)] - r.row(i)[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn eigenvalues_match_singular_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = noise_patch(40, 12, 2.0, &mut rng);
        let r = mp_denoise_patch(&x).unwrap();
        let mut s: Vec<f64> = DMatrix::from_row_slice(40, 12, x.data())
            .singular_values()
            .iter()
            .map(|s| s * s / 40.0)
            .collect();
        s.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in r.eigenvalues.iter().zip(&s) {
            assert!((a - b).abs() < 1e-10 * s[0]);
        }
    }

    #[test]
    fn classification_by_hand() {
        // bulk of four equal values: width 0 < mean, so p = 0
        let c = classify_eigenvalues(&[1.0, 1.0, 1.0, 1.0], 16);
        assert_eq!((c.rank, c.sigma2, c.degenerate), (0, 1.0, false));
        // one spike: p = 0 range (10-1)/(4*sqrt(4/16)) = 4.5 >= mean 3.25; p = 1 width 0 < 1
        let c = classify_eigenvalues(&[10.0, 1.0, 1.0, 1.0], 16);
        assert_eq!((c.rank, c.sigma2), (1, 1.0));
        // noiseless rank one
        let c = classify_eigenvalues(&[5.0, 0.0, 0.0], 10);
        assert_eq!((c.rank, c.sigma2), (1, 0.0));
    }

    #[test]
    fn non_finite_and_narrow_rejected() {
        let x = PatchMatrix::from_rows(2, 2, vec![1.0, f64::NAN, 0.0, 1.0]).unwrap();
        assert!(matches!(
            mp_denoise_patch(&x),
            Err(Error::NonFiniteInput(_))
        ));
        let x = PatchMatrix::from_rows(4, 1, vec![1.0; 4]).unwrap();
        assert!(mp_denoise_patch(&x).is_err());
    }

    #[test]
    fn scale_and_rotation_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (u, v) = (unit(64, &mut rng), unit(16, &mut rng));
        let noise = Normal::new(0.0, 0.1).unwrap();
        let data: Vec<f64> = (0..64)
            .flat_map(|i| {
                {
                    let ui = u[i];
                    v.iter().map(move |vj| 8.0 * ui * vj)
                }
                .collect::<Vec<_>>()
            })
            .map(|c| c + noise.sample(&mut rng))
            .collect();
        let x = PatchMatrix::from_rows(64, 16, data.clone()).unwrap();
        let base = mp_denoise_patch(&x).unwrap();

        let c = 3.7;
        let scaled = mp_denoise_patch(
            &PatchMatrix::from_rows(64, 16, data.iter().map(|d| c * d).collect()).unwrap(),
        )
        .unwrap();
        assert_eq!(scaled.rank, base.rank);
        assert!((scaled.sigma - c * base.sigma).abs() < 1e-9 * c * base.sigma);
        for (a, b) in scaled.denoised.iter().zip(&base.denoised) {
            assert!((a - c * b).abs() < 1e-9);
        }

        // orthogonal right factor from a QR of a random matrix
        let q = DMatrix::from_fn(16, 16, |_, _| rng.sample::<f64, _>(StandardNormal))
            .qr()
            .q();
        let rotated = DMatrix::from_row_slice(64, 16, &data) * q;
        let rows: Vec<f64> = (0..64)
            .flat_map(|i| (0..16).map(move |j| (i, j)))
            .map(|(i, j)| rotated[(i, j)])
            .collect();
        let rot = mp_denoise_patch(&PatchMatrix::from_rows(64, 16, rows).unwrap()).unwrap();
        assert_eq!(rot.rank, base.rank);
        assert!((rot.sigma - base.sigma).abs() < 1e-9 * base.sigma);

        let norm = |d: &[f64]| d.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm(&base.denoised) <= norm(&data));
        let sv = DMatrix::from_row_slice(64, 16, &base.denoised).singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        assert!(sv[base.rank..].iter().all(|&s| s < 1e-9 * sv[0]));
    }

    fn rank_one_phantom(dims: [usize; 3], nd: usize) -> Volume4D {
        let w: Vec<f64> = (0..nd)
            .map(|d| 1.0 + 0.5 * ((d as f64) * 0.7).sin())
            .collect();
        let s = Volume3D::from_fn(dims, |x, y, z| {
            if x + y > 6 {
                10.0 + (x * y + z) as f64
            } else {
                0.0
            }
        })
        .unwrap();
        let mut data = Vec::new();
        for wd in &w {
            data.extend(s.data().iter().map(|v| v * wd));
        }
        Volume4D::from_data([dims[0], dims[1], dims[2], nd], data).unwrap()
    }

    #[test]
    fn noiseless_rank_one_volume_is_preserved() {
        let vol = rank_one_phantom([10, 9, 8], 12);
        let out = denoise_fixed(&vol, &Shell::all(12), 5).unwrap();
        for (a, b) in out.denoised.data().iter().zip(vol.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12));
        }
        for (v, &r) in out.rank_map.data().iter().enumerate() {
            if vol.direction(0)[v] != 0.0 {
                assert_eq!(r, 1.0);
            }
        }
        assert_eq!(out.degenerate_count, 0);
    }

    #[test]
    fn pure_noise_volume_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = Normal::new(0.0, 0.05).unwrap();
        let dims = [16, 16, 16, 16];
        let vol = Volume4D::from_data(
            dims,
            (0..16usize.pow(4)).map(|_| n.sample(&mut rng)).collect(),
        )
        .unwrap();
        let out = denoise_fixed(&vol, &Shell::all(16), 5).unwrap();
        let mut s = 0.0;
        let mut count = 0;
        for z in 2..14 {
            for y in 2..14 {
                for x in 2..14 {
                    s += out.sigma_map.get(x, y, z);
                    count += 1;
                }
            }
        }
        let mean = s / count as f64;
        assert!((mean - 0.05).abs() <= 0.15 * 0.05, "{mean}");
    }

    #[test]
    fn kernel_too_large() {
        let vol = Volume4D::from_data([4, 4, 4, 3], vec![1.0; 192]).unwrap();
        assert!(matches!(
            denoise_fixed(&vol, &Shell::all(3), 5),
            Err(Error::KernelTooLarge { k: 5, .. })
        ));
        let kmap = KernelMap::new(
            [4, 4, 4],
            (0..64).map(|i| if i == 0 { 5 } else { 3 }).collect(),
        )
        .unwrap();
        assert!(matches!(
            denoise_adaptive(&vol, &Shell::all(3), &kmap),
            Err(Error::KernelTooLarge { .. })
        ));
    }

    #[test]
    fn constant_map_equals_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = Normal::new(0.0, 1.0).unwrap();
        let base = rank_one_phantom([9, 9, 7], 10);
        let noisy = base
            .with_data(base.data().iter().map(|v| v + n.sample(&mut rng)).collect())
            .unwrap();
        let shell = Shell::all(10);
        let fixed = denoise_fixed(&noisy, &shell, 5).unwrap();
        let adaptive =
            denoise_adaptive(&noisy, &shell, &KernelMap::constant([9, 9, 7], 5).unwrap()).unwrap();
        assert_eq!(fixed.denoised, adaptive.denoised);
        assert_eq!(fixed.sigma_map, adaptive.sigma_map);
        assert_eq!(fixed.rank_map, adaptive.rank_map);
    }

    #[test]
    fn center_row_matches_full_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = Normal::new(0.0, 0.5).unwrap();
        let base = rank_one_phantom([8, 8, 8], 6);
        let noisy = base
            .with_data(base.data().iter().map(|v| v + n.sample(&mut rng)).collect())
            .unwrap();
        let shell = Shell {
            b_target: 0.0,
            tolerance: 0.0,
            indices: vec![0, 2, 3, 5],
        };
        let out = denoise_fixed(&noisy, &shell, 3).unwrap();
        for center in [[0, 0, 0], [4, 5, 3], [7, 2, 7]] {
            let p = crate::volume::extract_patch(&noisy, &shell, center, 3).unwrap();
            let r = mp_denoise_patch(&p).unwrap();
            for (j, &d) in shell.indices.iter().enumerate() {
                let got = out.denoised.get(center[0], center[1], center[2], d);
                assert!((got - r.row(p.center_row)[j]).abs() < 1e-9);
            }
            // volumes outside the shell pass through
            for d in [1, 4] {
                assert_eq!(
                    out.denoised.get(center[0], center[1], center[2], d),
                    noisy.get(center[0], center[1], center[2], d)
                );
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = Normal::new(0.0, 1.0).unwrap();
        let base = rank_one_phantom([8, 8, 6], 8);
        let noisy = base
            .with_data(base.data().iter().map(|v| v + n.sample(&mut rng)).collect())
            .unwrap();
        let run = |t: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .unwrap()
                .install(|| denoise_fixed(&noisy, &Shell::all(8), 5).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.denoised, b.denoised);
        assert_eq!(a.sigma_map, b.sigma_map);
    }

    #[test]
    fn pipeline_requires_eligible_shell() {
        let vol = rank_one_phantom([8, 8, 8], 4);
        let gtab = GradientTable::new(
            vec![0.0, 50.0, 50.0, 50.0],
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        )
        .unwrap();
        let err =
            run_pipeline(&vol, &gtab, &KernelBounds::default(), 42, &Shell::all(4)).unwrap_err();
        assert!(matches!(err, Error::NoEligibleShell { .. }));
    }

    #[test]
    fn report_summarizes_maps() {
        let vol = rank_one_phantom([6, 6, 6], 5);
        let shell = Shell::all(5);
        let out = denoise_fixed(&vol, &shell, 3).unwrap();
        let rep = DenoiseReport::new(&out, &shell, None);
        assert_eq!(rep.kernel_histogram, vec![(3, 216)]);
        assert_eq!(
            rep.rank_histogram.iter().map(|(_, c)| c).sum::<usize>(),
            216
        );
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("kernel_histogram"));
    }
}

//! Log-linear diffusion tensor fit, fractional anisotropy and
//! directionally encoded color (DEC) maps.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{Affine, GradientTable, Mask3D, Volume3D, Volume4D, DEFAULT_B_MIN};

/// Signals are floored at this fraction of the volume maximum before the log.
const SIGNAL_FLOOR: f64 = 1e-6;
const MIN_DIRECTIONS: usize = 6;

/// Tensor components in the order `xx, yy, zz, xy, xz, yz`.
pub type TensorComponents = [f64; 6];

pub fn tensor_matrix(d: &TensorComponents) -> Matrix3<f64> {
    Matrix3::new(d[0], d[3], d[4], d[3], d[1], d[5], d[4], d[5], d[2])
}

/// `gᵀ D g` for a unit direction.
pub fn apparent_diffusion(d: &TensorComponents, g: [f64; 3]) -> f64 {
    d[0] * g[0] * g[0]
        + d[1] * g[1] * g[1]
        + d[2] * g[2] * g[2]
        + 2.0 * (d[3] * g[0] * g[1] + d[4] * g[0] * g[2] + d[5] * g[1] * g[2])
}

/// Eigenvalues clamped at zero, sorted descending, with the principal unit eigenvector.
pub fn eigen(d: &TensorComponents) -> ([f64; 3], [f64; 3]) {
    let e = SymmetricEigen::new(tensor_matrix(d));
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
    let vals = idx.map(|i| e.eigenvalues[i].max(0.0));
    let v: Vector3<f64> = e.eigenvectors.column(idx[0]).into();
    (vals, [v[0], v[1], v[2]])
}

pub fn fa_from_eigenvalues(l: [f64; 3]) -> f64 {
    let norm2 = l.iter().map(|v| v * v).sum::<f64>();
    if norm2 == 0.0 {
        return 0.0;
    }
    let mean = (l[0] + l[1] + l[2]) / 3.0;
    let dev2 = l.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    ((1.5 * dev2 / norm2).sqrt()).min(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: Affine,
    pub tensors: Vec<TensorComponents>,
    pub s0: Vec<f64>,
}

impl TensorField {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Principal eigenvector per voxel (zero for zero tensors).
    pub fn principal_directions(&self) -> Vec<[f64; 3]> {
        self.tensors
            .par_iter()
            .map(|d| {
                if d.iter().all(|&c| c == 0.0) {
                    [0.0; 3]
                } else {
                    eigen(d).1
                }
            })
            .collect()
    }
}

fn design_row(b: f64, g: [f64; 3]) -> [f64; 7] {
    [
        1.0,
        -b * g[0] * g[0],
        -b * g[1] * g[1],
        -b * g[2] * g[2],
        -2.0 * b * g[0] * g[1],
        -2.0 * b * g[0] * g[2],
        -2.0 * b * g[1] * g[2],
    ]
}

fn count_distinct_directions(gtab: &GradientTable) -> usize {
    let mut dirs: Vec<[f64; 3]> = Vec::new();
    for (&b, g) in gtab.bvals().iter().zip(gtab.bvecs()) {
        if b < DEFAULT_B_MIN || g.iter().all(|&c| c == 0.0) {
            continue;
        }
        let dup = dirs
            .iter()
            .any(|d| (d[0] * g[0] + d[1] * g[1] + d[2] * g[2]).abs() > 1.0 - 1e-6);
        if !dup {
            dirs.push(*g);
        }
    }
    dirs.len()
}

/// Ordinary least squares on `ln S = ln S0 - b gᵀDg` inside `mask`.
pub fn fit_dti(vol: &Volume4D, gtab: &GradientTable, mask: &Mask3D) -> Result<TensorField> {
    gtab.ensure_matches(vol)?;
    mask.ensure_matches(vol.spatial_dims())?;
    let n = gtab.len();
    let n_low = gtab.bvals().iter().filter(|&&b| b < DEFAULT_B_MIN).count();
    let n_dirs = count_distinct_directions(gtab);
    if n < 7 || n_low == 0 || n_dirs < MIN_DIRECTIONS {
        return Err(Error::InsufficientDirections(format!(
            "{n} volumes, {n_low} with b < {DEFAULT_B_MIN}, {n_dirs} distinct directions; need 7, 1 and {MIN_DIRECTIONS}"
        )));
    }

    let design = DMatrix::from_fn(n, 7, |r, c| design_row(gtab.bvals()[r], gtab.bvecs()[r])[c]);
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin.is_nan() || smin <= 1e-10 * smax {
        return Err(Error::SingularDesign);
    }
    let pinv = svd.pseudo_inverse(0.0).map_err(|_| Error::SingularDesign)?;

    let nv = vol.n_voxels();
    let vmax = vol.data().iter().copied().fold(0.0f64, f64::max);
    let floor = if vmax > 0.0 {
        SIGNAL_FLOOR * vmax
    } else {
        SIGNAL_FLOOR
    };
    let fits: Vec<(TensorComponents, f64)> = (0..nv)
        .into_par_iter()
        .map(|v| {
            if !mask.data()[v] {
                return ([0.0; 6], 0.0);
            }
            let y = DVector::from_fn(n, |d, _| vol.direction(d)[v].max(floor).ln());
            let p = &pinv * y;
            ([p[1], p[2], p[3], p[4], p[5], p[6]], p[0].exp())
        })
        .collect();
    let (tensors, s0) = fits.into_iter().unzip();
    Ok(TensorField {
        dims: vol.spatial_dims(),
        spacing: vol.spacing(),
        affine: *vol.affine(),
        tensors,
        s0,
    })
}

pub fn fa(field: &TensorField) -> Volume3D {
    let data = field
        .tensors
        .par_iter()
        .map(|d| fa_from_eigenvalues(eigen(d).0))
        .collect();
    Volume3D::new(field.dims, data, field.spacing, field.affine).expect("field geometry is valid")
}

/// Per-voxel RGB in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecMap {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: Affine,
    pub rgb: Vec<[f64; 3]>,
}

/// `FA * |v1|` per voxel.
pub fn dec_map(field: &TensorField) -> DecMap {
    let rgb = field
        .tensors
        .par_iter()
        .map(|d| {
            if d.iter().all(|&c| c == 0.0) {
                return [0.0; 3];
            }
            let (vals, v) = eigen(d);
            let f = fa_from_eigenvalues(vals);
            v.map(|c| (f * c.abs()).clamp(0.0, 1.0))
        })
        .collect();
    DecMap {
        dims: field.dims,
        spacing: field.spacing,
        affine: field.affine,
        rgb,
    }
}

impl DecMap {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Three-volume 4D image (R, G, B).
    pub fn to_volume(&self) -> Volume4D {
        let nv = self.rgb.len();
        let mut data = vec![0.0; 3 * nv];
        for (v, c) in self.rgb.iter().enumerate() {
            for ch in 0..3 {
                data[ch * nv + v] = c[ch];
            }
        }
        let d = self.dims;
        Volume4D::new([d[0], d[1], d[2], 3], data, self.spacing, self.affine)
            .expect("DEC geometry is valid")
    }

    /// Axial slices tiled left to right, top to bottom, as an 8-bit PNG.
    pub fn write_png_montage(&self, path: impl AsRef<Path>) -> Result<()> {
        let [nx, ny, nz] = self.dims;
        let cols = (nz as f64).sqrt().ceil() as usize;
        let rows = nz.div_ceil(cols);
        let mut img = image::RgbImage::new((cols * nx) as u32, (rows * ny) as u32);
        for z in 0..nz {
            let (ox, oy) = ((z % cols) * nx, (z / cols) * ny);
            for y in 0..ny {
                for x in 0..nx {
                    let c = self.rgb[x + nx * (y + ny * z)];
                    // flip y so anterior is up in the usual radiological view
                    let px = image::Rgb(c.map(|v| (v * 255.0).round() as u8));
                    img.put_pixel((ox + x) as u32, (oy + ny - 1 - y) as u32, px);
                }
            }
        }
        img.save(path.as_ref())
            .map_err(|e| Error::Image(e.to_string()))
    }
}

/// Fibonacci-lattice unit vectors on the upper hemisphere.
pub fn hemisphere_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

//! Gradient-magnitude structure map: per axial slice, Gaussian smoothing
//! followed by the two in-plane Sobel derivatives combined in quadrature.
//!
//! All stencils use symmetric (edge-repeating) reflection at slice borders.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::Volume3D;

pub const DEFAULT_SIGMA: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingSpec {
    /// Standard deviation in voxels; `0` disables smoothing.
    pub sigma: f64,
    pub truncation_radius: usize,
}

impl SmoothingSpec {
    /// Truncation radius `ceil(3 sigma)`.
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "smoothing sigma must be >= 0, got {sigma}"
            )));
        }
        Ok(Self {
            sigma,
            truncation_radius: (3.0 * sigma).ceil() as usize,
        })
    }

    pub fn none() -> Self {
        Self {
            sigma: 0.0,
            truncation_radius: 0,
        }
    }

    /// Unit-sum 1D taps for offsets `-R..=R`.
    pub fn taps(&self) -> Vec<f64> {
        let r = self.truncation_radius as isize;
        if self.sigma == 0.0 {
            return vec![1.0];
        }
        let w: Vec<f64> = (-r..=r)
            .map(|i| (-((i * i) as f64) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }
}

impl Default for SmoothingSpec {
    fn default() -> Self {
        Self::new(DEFAULT_SIGMA).expect("default sigma is valid")
    }
}

/// Nonnegative gradient magnitudes on the grid of the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap(Volume3D);

impl GradientMap {
    /// Fails if any value is negative.
    pub fn new(vol: Volume3D) -> Result<Self> {
        if vol.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(
                "gradient magnitudes must be >= 0".into(),
            ));
        }
        Ok(Self(vol))
    }

    pub fn volume(&self) -> &Volume3D {
        &self.0
    }

    pub fn into_volume(self) -> Volume3D {
        self.0
    }

    pub fn dims(&self) -> [usize; 3] {
        self.0.dims()
    }
}

/// Maps any integer index into `[0, n)` by repeated edge-inclusive reflection.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn smooth_plane(src: &[f64], dst: &mut [f64], nx: usize, ny: usize, taps: &[f64]) {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; nx * ny];
    for y in 0..ny {
        let row = &src[y * nx..(y + 1) * nx];
        for x in 0..nx {
            tmp[y * nx + x] = taps
                .iter()
                .enumerate()
                .map(|(t, w)| w * row[reflect(x as isize + t as isize - r, nx)])
                .sum();
        }
    }
    for y in 0..ny {
        for x in 0..nx {
            dst[y * nx + x] = taps
                .iter()
                .enumerate()
                .map(|(t, w)| w * tmp[reflect(y as isize + t as isize - r, ny) * nx + x])
                .sum();
        }
    }
}

/// Separable 2D Gaussian smoothing of every axial slice.
pub fn gaussian_smooth_slice(vol: &Volume3D, spec: &SmoothingSpec) -> Result<Volume3D> {
    if spec.sigma == 0.0 {
        return Ok(vol.clone());
    }
    let [nx, ny, _] = vol.dims();
    let taps = spec.taps();
    let mut out = vec![0.0; vol.len()];
    out.par_chunks_mut(nx * ny)
        .zip(vol.data().par_chunks(nx * ny))
        .for_each(|(dst, src)| smooth_plane(src, dst, nx, ny, &taps));
    vol.with_data(out)
}

/// In-plane Sobel derivatives `(gx, gy)`, scaled by 1/8 so a unit ramp gives 1.
pub fn sobel_components(vol: &Volume3D) -> Result<(Volume3D, Volume3D)> {
    let [nx, ny, _] = vol.dims();
    if nx < 3 || ny < 3 {
        return Err(Error::SliceTooSmall { nx, ny });
    }
    let mut gx = vec![0.0; vol.len()];
    let mut gy = vec![0.0; vol.len()];
    gx.par_chunks_mut(nx * ny)
        .zip(gy.par_chunks_mut(nx * ny))
        .zip(vol.data().par_chunks(nx * ny))
        .for_each(|((gx, gy), s)| {
            let at = |x: isize, y: isize| s[reflect(y, ny) * nx + reflect(x, nx)];
            for y in 0..ny as isize {
                for x in 0..nx as isize {
                    let dx = (at(x + 1, y - 1) - at(x - 1, y - 1))
                        + 2.0 * (at(x + 1, y) - at(x - 1, y))
                        + (at(x + 1, y + 1) - at(x - 1, y + 1));
                    let dy = (at(x - 1, y + 1) - at(x - 1, y - 1))
                        + 2.0 * (at(x, y + 1) - at(x, y - 1))
                        + (at(x + 1, y + 1) - at(x + 1, y - 1));
                    let i = y as usize * nx + x as usize;
                    gx[i] = dx / 8.0;
                    gy[i] = dy / 8.0;
                }
            }
        });
    Ok((vol.with_data(gx)?, vol.with_data(gy)?))
}

pub fn sobel_magnitude_slice(vol: &Volume3D) -> Result<GradientMap> {
    let (gx, gy) = sobel_components(vol)?;
    let mag = gx
        .data()
        .iter()
        .zip(gy.data())
        .map(|(a, b)| (a * a + b * b).sqrt())
        .collect();
    GradientMap::new(vol.with_data(mag)?)
}

/// Smooth, then Sobel magnitude.
pub fn gradient_map(trace: &Volume3D, spec: &SmoothingSpec) -> Result<GradientMap> {
    sobel_magnitude_slice(&gaussian_smooth_slice(trace, spec)?)
}

//! Median-Otsu brain masking.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{linear_index, Mask3D, Volume3D};

pub const OTSU_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MedianOtsuParams {
    pub radius: usize,
    pub passes: usize,
}

impl Default for MedianOtsuParams {
    fn default() -> Self {
        Self {
            radius: 4,
            passes: 4,
        }
    }
}

fn median_in_place(buf: &mut [f64]) -> f64 {
    let n = buf.len();
    let mid = n / 2;
    let (_, &mut upper, _) = buf.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = buf[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

fn median_pass(dims: [usize; 3], src: &[f64], radius: usize) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, slab)| {
            let mut buf = Vec::with_capacity((2 * radius + 1).pow(3));
            let (z0, z1) = (z.saturating_sub(radius), (z + radius).min(nz - 1));
            for y in 0..ny {
                let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(ny - 1));
                for x in 0..nx {
                    let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(nx - 1));
                    buf.clear();
                    for zz in z0..=z1 {
                        for yy in y0..=y1 {
                            let row = linear_index(dims, 0, yy, zz);
                            buf.extend_from_slice(&src[row + x0..=row + x1]);
                        }
                    }
                    slab[x + nx * y] = median_in_place(&mut buf);
                }
            }
        });
    out
}

/// Repeated `(2r+1)^3` median filter; the neighborhood is clipped at the
/// volume boundary (even-sized neighborhoods average the two middle values).
pub fn median_filter(vol: &Volume3D, radius: usize, passes: usize) -> Result<Volume3D> {
    if radius == 0 || passes == 0 {
        return Err(Error::InvalidArgument(format!(
            "median filter needs radius >= 1 and passes >= 1, got {radius}, {passes}"
        )));
    }
    let mut data = vol.data().to_vec();
    for _ in 0..passes {
        data = median_pass(vol.dims(), &data, radius);
    }
    vol.with_data(data)
}

/// Otsu threshold over a 256-bin histogram spanning `[min, max]`.
///
/// Class "below" holds bins `0..=t`; the returned value is the upper edge
/// of bin `t`. When the maximal between-class variance is attained on a run
/// of consecutive bins (empty bins between modes), the middle of the first
/// such run is returned.
pub fn otsu_threshold(values: &[f64]) -> Result<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if values.is_empty() {
        return Err(Error::DegenerateInput("no values to threshold".into()));
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFiniteInput("otsu input".into()));
    }
    if lo == hi {
        return Err(Error::DegenerateInput(format!("all values equal {lo}")));
    }
    let width = (hi - lo) / OTSU_BINS as f64;
    let mut hist = [0f64; OTSU_BINS];
    for &v in values {
        let b = (((v - lo) / (hi - lo)) * OTSU_BINS as f64) as usize;
        hist[b.min(OTSU_BINS - 1)] += 1.0;
    }
    let center = |b: usize| lo + (b as f64 + 0.5) * width;
    let total: f64 = hist.iter().sum();
    let total_mass: f64 = hist.iter().enumerate().map(|(b, &h)| h * center(b)).sum();

    let mut between = [f64::NEG_INFINITY; OTSU_BINS - 1];
    let (mut w0, mut m0) = (0.0, 0.0);
    for t in 0..OTSU_BINS - 1 {
        w0 += hist[t];
        m0 += hist[t] * center(t);
        let w1 = total - w0;
        if w0 > 0.0 && w1 > 0.0 {
            let d = m0 / w0 - (total_mass - m0) / w1;
            between[t] = w0 * w1 * d * d;
        }
    }
    let best = between.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = best.abs() * 1e-12;
    let first = between.iter().position(|&v| v >= best - tol).unwrap_or(0);
    let last = first
        + between[first..]
            .iter()
            .take_while(|&&v| v >= best - tol)
            .count()
        - 1;
    let edge = |t: usize| lo + (t + 1) as f64 * width;
    Ok(0.5 * (edge(first) + edge(last)))
}

/// 26-connected components; returns (label per voxel, sizes). Label 0 = not in mask.
fn label_components(dims: [usize; 3], fg: &[bool], conn26: bool) -> (Vec<usize>, Vec<usize>) {
    let [nx, ny, nz] = dims;
    let mut labels = vec![0usize; fg.len()];
    let mut sizes = vec![0usize];
    let mut queue = VecDeque::new();
    let offsets: Vec<[isize; 3]> = (-1..=1)
        .flat_map(|dz| (-1..=1).flat_map(move |dy| (-1..=1).map(move |dx| [dx, dy, dz])))
        .filter(|o| {
            let m = o.iter().map(|v: &isize| v.abs()).sum::<isize>();
            m > 0 && (conn26 || m == 1)
        })
        .collect();
    for start in 0..fg.len() {
        if !fg[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len();
        sizes.push(0);
        labels[start] = label;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            sizes[label] += 1;
            let (x, y, z) = (
                (i % nx) as isize,
                ((i / nx) % ny) as isize,
                (i / (nx * ny)) as isize,
            );
            for o in &offsets {
                let (xx, yy, zz) = (x + o[0], y + o[1], z + o[2]);
                if xx < 0
                    || yy < 0
                    || zz < 0
                    || xx >= nx as isize
                    || yy >= ny as isize
                    || zz >= nz as isize
                {
                    continue;
                }
                let j = linear_index(dims, xx as usize, yy as usize, zz as usize);
                if fg[j] && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            }
        }
    }
    (labels, sizes)
}

/// Keeps the largest 26-connected component (first found wins ties).
pub fn largest_component(mask: &Mask3D) -> Mask3D {
    let (labels, sizes) = label_components(mask.dims(), mask.data(), true);
    let best = (1..sizes.len()).fold(0, |b, l| if sizes[l] > sizes[b] { l } else { b });
    let data = labels.iter().map(|&l| best != 0 && l == best).collect();
    Mask3D::new(mask.dims(), data).expect("same dims")
}

/// Fills background pockets that are not 6-connected to the volume border.
pub fn fill_holes(mask: &Mask3D) -> Mask3D {
    let dims = mask.dims();
    let bg: Vec<bool> = mask.data().iter().map(|&b| !b).collect();
    let (labels, sizes) = label_components(dims, &bg, false);
    let mut touches = vec![false; sizes.len()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let border = x == 0
                    || y == 0
                    || z == 0
                    || x + 1 == dims[0]
                    || y + 1 == dims[1]
                    || z + 1 == dims[2];
                if border {
                    touches[labels[linear_index(dims, x, y, z)]] = true;
                }
            }
        }
    }
    let data = mask
        .data()
        .iter()
        .zip(&labels)
        .map(|(&m, &l)| m || (l != 0 && !touches[l]))
        .collect();
    Mask3D::new(dims, data).expect("same dims")
}

pub fn median_otsu_mask(vol: &Volume3D) -> Result<Mask3D> {
    median_otsu_mask_with(vol, MedianOtsuParams::default())
}

/// Median filter, Otsu threshold, largest component, hole filling.
pub fn median_otsu_mask_with(vol: &Volume3D, params: MedianOtsuParams) -> Result<Mask3D> {
    let smoothed = median_filter(vol, params.radius, params.passes)?;
    let t = otsu_threshold(smoothed.data())?;
    let raw = Mask3D::new(vol.dims(), smoothed.data().iter().map(|&v| v > t).collect())?;
    Ok(fill_holes(&largest_component(&raw)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Sort-based neighborhood median, written independently of the filter.
    fn oracle_median(vol: &Volume3D, r: usize) -> Vec<f64> {
        let d = vol.dims();
        let r = r as isize;
        let mut out = Vec::new();
        for z in 0..d[2] as isize {
            for y in 0..d[1] as isize {
                for x in 0..d[0] as isize {
                    let mut vals = Vec::new();
                    for zz in z - r..=z + r {
                        for yy in y - r..=y + r {
                            for xx in x - r..=x + r {
                                if xx >= 0
                                    && yy >= 0
                                    && zz >= 0
                                    && (xx as usize) < d[0]
                                    && (yy as usize) < d[1]
                                    && (zz as usize) < d[2]
                                {
                                    vals.push(vol.get(xx as usize, yy as usize, zz as usize));
                                }
                            }
                        }
                    }
                    vals.sort_by(f64::total_cmp);
                    let n = vals.len();
                    out.push(if n % 2 == 1 {
                        vals[n / 2]
                    } else {
                        0.5 * (vals[n / 2 - 1] + vals[n / 2])
                    });
                }
            }
        }
        out
    }

    fn sphere(dims: [usize; 3], c: [f64; 3], r: f64) -> Mask3D {
        Mask3D::from_fn(dims, |x, y, z| {
            let d2 =
                (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
            d2 <= r * r
        })
        .unwrap()
    }

    fn dice(a: &Mask3D, b: &Mask3D) -> f64 {
        let inter = a
            .data()
            .iter()
            .zip(b.data())
            .filter(|(x, y)| **x && **y)
            .count();
        2.0 * inter as f64 / (a.count() + b.count()) as f64
    }

    #[test]
    fn median_of_constant_is_constant() {
        let v = Volume3D::filled([6, 5, 4], 3.5).unwrap();
        assert_eq!(median_filter(&v, 2, 2).unwrap(), v);
    }

    #[test]
    fn impulse_removed() {
        let v = Volume3D::from_fn(
            [7, 7, 7],
            |x, y, z| if (x, y, z) == (3, 3, 3) { 100.0 } else { 0.0 },
        )
        .unwrap();
        let m = median_filter(&v, 1, 1).unwrap();
        assert_eq!(m.data(), oracle_median(&v, 1).as_slice());
        assert!(m.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn half_space_boundary_preserved() {
        let v = Volume3D::from_fn([16, 16, 16], |x, _, _| if x < 8 { 1.0 } else { 0.0 }).unwrap();
        let m = median_filter(&v, 1, 1).unwrap();
        assert_eq!(m.data(), oracle_median(&v, 1).as_slice());
        for z in 0..16 {
            for y in 0..16 {
                // first x where the filtered value drops below one half
                let edge = (0..16).find(|&x| m.get(x, y, z) < 0.5).unwrap();
                assert!((edge as isize - 8).abs() <= 1, "edge at {edge}");
            }
        }
    }

    #[test]
    fn random_volume_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0, 1.0).unwrap();
        let v =
            Volume3D::from_data([7, 6, 5], (0..210).map(|_| n.sample(&mut rng)).collect()).unwrap();
        assert_eq!(
            median_filter(&v, 2, 1).unwrap().data(),
            oracle_median(&v, 2).as_slice()
        );
    }

    #[test]
    fn median_filter_rejects_zero_radius() {
        let v = Volume3D::filled([3, 3, 3], 1.0).unwrap();
        assert!(median_filter(&v, 0, 1).is_err());
        assert!(median_filter(&v, 1, 0).is_err());
    }

    #[test]
    fn otsu_bimodal() {
        let mut vals = vec![0.0; 100];
        vals.extend(vec![10.0; 100]);
        let t = otsu_threshold(&vals).unwrap();
        assert!(t > 0.0 && t < 10.0, "{t}");
    }

    #[test]
    fn otsu_degenerate() {
        assert!(matches!(
            otsu_threshold(&[2.0; 10]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn otsu_gaussian_mixture_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = Normal::new(2.0, 0.1).unwrap();
        let b = Normal::new(8.0, 0.1).unwrap();
        let mut vals: Vec<f64> = (0..1000).map(|_| a.sample(&mut rng)).collect();
        vals.extend((0..1000).map(|_| b.sample(&mut rng)));
        let t = otsu_threshold(&vals).unwrap();
        assert!(t > 3.0 && t < 7.0, "{t}");

        // exhaustive scan over the 255 candidate edges using raw samples
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let score = |thr: f64| {
            let (c0, c1): (Vec<f64>, Vec<f64>) = vals.iter().partition(|&&v| v <= thr);
            if c0.is_empty() || c1.is_empty() {
                return 0.0;
            }
            let m0 = c0.iter().sum::<f64>() / c0.len() as f64;
            let m1 = c1.iter().sum::<f64>() / c1.len() as f64;
            c0.len() as f64 * c1.len() as f64 * (m0 - m1).powi(2)
        };
        let best = (1..256)
            .map(|t| score(lo + t as f64 * (hi - lo) / 256.0))
            .fold(0.0, f64::max);
        assert!(score(t) >= best * (1.0 - 1e-9));
    }

    #[test]
    fn sphere_mask_dice() {
        let dims = [40, 40, 40];
        let truth = sphere(dims, [19.5, 19.5, 19.5], 12.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = Normal::new(0.0, 5.0).unwrap();
        let data = truth
            .data()
            .iter()
            .map(|&b| if b { 100.0 } else { 1.0 } + n.sample(&mut rng))
            .collect();
        let v = Volume3D::from_data(dims, data).unwrap();
        // the default 9^3 window run four times erodes an object this small,
        // so the window is scaled down to the sphere
        let m = median_otsu_mask_with(
            &v,
            MedianOtsuParams {
                radius: 2,
                passes: 1,
            },
        )
        .unwrap();
        assert!(dice(&m, &truth) >= 0.95, "dice {}", dice(&m, &truth));
    }

    #[test]
    fn only_larger_blob_survives() {
        let dims = [48, 32, 32];
        let big = sphere(dims, [14.0, 16.0, 16.0], 10.0);
        let small = sphere(dims, [38.0, 16.0, 16.0], 4.7);
        assert!(big.count() > 9 * small.count());
        let v = Volume3D::from_fn(dims, |x, y, z| {
            if big.get(x, y, z) || small.get(x, y, z) {
                100.0
            } else {
                0.0
            }
        })
        .unwrap();
        let m = median_otsu_mask_with(
            &v,
            MedianOtsuParams {
                radius: 1,
                passes: 1,
            },
        )
        .unwrap();
        assert!(m.get(14, 16, 16));
        assert!(!m.get(38, 16, 16));
        let (_, sizes) = label_components(dims, m.data(), true);
        assert_eq!(sizes.len(), 2);
    }

    #[test]
    fn constant_volume_is_degenerate() {
        let v = Volume3D::filled([8, 8, 8], 5.0).unwrap();
        assert!(matches!(
            median_otsu_mask(&v),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn holes_are_filled() {
        let dims = [12, 12, 12];
        let shell = Mask3D::from_fn(dims, |x, y, z| {
            let inside = |a: usize| (2..10).contains(&a);
            let core = |a: usize| (4..8).contains(&a);
            inside(x) && inside(y) && inside(z) && !(core(x) && core(y) && core(z))
        })
        .unwrap();
        let filled = fill_holes(&shell);
        assert!(filled.get(5, 5, 5));
        assert!(!filled.get(0, 0, 0));
        assert_eq!(filled.count(), 8 * 8 * 8);
    }

    #[test]
    fn mask_invariant_to_affine_rescaling() {
        let dims = [24, 24, 24];
        let truth = sphere(dims, [11.5, 11.5, 11.5], 7.0);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = Normal::new(0.0, 4.0).unwrap();
        let data: Vec<f64> = truth
            .data()
            .iter()
            .map(|&b| if b { 80.0 } else { 5.0 } + n.sample(&mut rng))
            .collect();
        let v = Volume3D::from_data(dims, data.clone()).unwrap();
        let w = Volume3D::from_data(dims, data.iter().map(|x| 3.0 * x + 7.0).collect()).unwrap();
        let params = MedianOtsuParams {
            radius: 2,
            passes: 2,
        };
        let a = median_otsu_mask_with(&v, params).unwrap();
        let b = median_otsu_mask_with(&w, params).unwrap();
        assert_eq!(a, b);
        let (_, sizes) = label_components(dims, a.data(), true);
        assert_eq!(sizes.len(), 2, "one connected component");
        assert_eq!(fill_holes(&a), a, "no internal holes");
    }
}

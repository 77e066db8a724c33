//! Synthetic piecewise-constant DWI phantoms, noise injection and
//! evaluation metrics.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dti::{apparent_diffusion, hemisphere_directions, TensorComponents};
use crate::error::{Error, Result};
use crate::volume::{identity_affine, GradientTable, Mask3D, Volume3D, Volume4D};

/// Shapes are evaluated at voxel-center coordinates `(x, y, z)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
    },
    /// Inclusive on both ends.
    Box {
        min: [f64; 3],
        max: [f64; 3],
    },
    /// Points with `normal · p >= offset`.
    HalfSpace {
        normal: [f64; 3],
        offset: f64,
    },
    Intersection(Vec<Shape>),
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Shape::Sphere { center, radius } => {
                (0..3).map(|i| (p[i] - center[i]).powi(2)).sum::<f64>() <= radius * radius
            }
            Shape::Ellipsoid { center, radii } => {
                (0..3)
                    .map(|i| ((p[i] - center[i]) / radii[i]).powi(2))
                    .sum::<f64>()
                    <= 1.0
            }
            Shape::Box { min, max } => (0..3).all(|i| p[i] >= min[i] && p[i] <= max[i]),
            Shape::HalfSpace { normal, offset } => {
                (0..3).map(|i| normal[i] * p[i]).sum::<f64>() >= *offset
            }
            Shape::Intersection(shapes) => shapes.iter().all(|s| s.contains(p)),
        }
    }
}

/// Direction-signal profile shared by every voxel of a region.
#[derive(Debug, Clone, PartialEq)]
pub enum Profile {
    /// One value per volume, or a single value broadcast to all volumes.
    Constant(Vec<f64>),
    Tensor {
        s0: f64,
        d: TensorComponents,
    },
}

impl Profile {
    fn signal(&self, gtab: &GradientTable) -> Result<Vec<f64>> {
        match self {
            Profile::Constant(v) if v.len() == 1 => Ok(vec![v[0]; gtab.len()]),
            Profile::Constant(v) if v.len() == gtab.len() => Ok(v.clone()),
            Profile::Constant(v) => Err(Error::LengthMismatch(format!(
                "constant profile has {} values for {} volumes",
                v.len(),
                gtab.len()
            ))),
            Profile::Tensor { s0, d } => Ok(gtab
                .bvals()
                .iter()
                .zip(gtab.bvecs())
                .map(|(&b, &g)| s0 * (-b * apparent_diffusion(d, g)).exp())
                .collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    /// Must be nonzero; label 0 is the background.
    pub label: u32,
    /// Union of shapes.
    pub shapes: Vec<Shape>,
    pub profile: Profile,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GradientScheme {
    Table(GradientTable),
    /// `n_b0` volumes at b = 0 followed by `(b, count)` shells with
    /// evenly spread directions under a seeded random rotation.
    Shells {
        n_b0: usize,
        shells: Vec<(f64, usize)>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverlapPolicy {
    #[default]
    LaterWins,
    Forbid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub background: Profile,
    pub regions: Vec<Region>,
    pub gradients: GradientScheme,
    pub overlap: OverlapPolicy,
    /// Drives the direction sampling.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub truth: Volume4D,
    /// Union of all labeled regions.
    pub mask: Mask3D,
    pub labels: Volume3D,
    pub gtab: GradientTable,
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // uniform unit quaternion
    let mut q = [0.0f64; 4];
    loop {
        for c in &mut q {
            *c = rng.sample(StandardNormal);
        }
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 1e-9 {
            q.iter_mut().for_each(|c| *c /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

pub fn scheme_table(n_b0: usize, shells: &[(f64, usize)], seed: u64) -> Result<GradientTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bvals = vec![0.0; n_b0];
    let mut bvecs = vec![[0.0; 3]; n_b0];
    for &(b, n) in shells {
        let r = random_rotation(&mut rng);
        for g in hemisphere_directions(n) {
            bvals.push(b);
            bvecs.push([0, 1, 2].map(|i| r[i][0] * g[0] + r[i][1] * g[1] + r[i][2] * g[2]));
        }
    }
    GradientTable::new(bvals, bvecs)
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let gtab = match &spec.gradients {
        GradientScheme::Table(t) => t.clone(),
        GradientScheme::Shells { n_b0, shells } => scheme_table(*n_b0, shells, spec.seed)?,
    };
    if gtab.is_empty() {
        return Err(Error::EmptyInput(
            "phantom needs at least one volume".into(),
        ));
    }
    if spec.regions.iter().any(|r| r.label == 0) {
        return Err(Error::InvalidArgument(
            "region label 0 is reserved for the background".into(),
        ));
    }
    let [nx, ny, nz] = spec.dims;
    let nv = nx * ny * nz;
    if nv == 0 {
        return Err(Error::EmptyInput("phantom dims must be nonzero".into()));
    }

    let mut labels = vec![0u32; nv];
    let mut owner = vec![usize::MAX; nv];
    for (ri, region) in spec.regions.iter().enumerate() {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = [x as f64, y as f64, z as f64];
                    if !region.shapes.iter().any(|s| s.contains(p)) {
                        continue;
                    }
                    let v = x + nx * (y + ny * z);
                    if spec.overlap == OverlapPolicy::Forbid
                        && owner[v] != usize::MAX
                        && spec.regions[owner[v]].label != region.label
                    {
                        return Err(Error::OverlapPolicyViolation(owner[v], ri));
                    }
                    owner[v] = ri;
                    labels[v] = region.label;
                }
            }
        }
    }

    let background = spec.background.signal(&gtab)?;
    let profiles = spec
        .regions
        .iter()
        .map(|r| r.profile.signal(&gtab))
        .collect::<Result<Vec<_>>>()?;
    let nd = gtab.len();
    let mut data = vec![0.0; nv * nd];
    for v in 0..nv {
        let prof = if owner[v] == usize::MAX {
            &background
        } else {
            &profiles[owner[v]]
        };
        for d in 0..nd {
            data[d * nv + v] = prof[d];
        }
    }
    let affine = crate::volume::spacing_affine(spec.spacing);
    let truth = Volume4D::new([nx, ny, nz, nd], data, spec.spacing, affine)?;
    let mask = Mask3D::new(spec.dims, labels.iter().map(|&l| l != 0).collect())?;
    let labels = Volume3D::new(
        spec.dims,
        labels.iter().map(|&l| l as f64).collect(),
        spec.spacing,
        affine,
    )?;
    Ok(Phantom {
        truth,
        mask,
        labels,
        gtab,
    })
}

fn center(dims: [usize; 3]) -> [f64; 3] {
    dims.map(|n| (n as f64 - 1.0) / 2.0)
}

const GRAY: TensorComponents = [0.8e-3, 0.8e-3, 0.8e-3, 0.0, 0.0, 0.0];

/// Stick-like tensor along `dir` with axial/radial diffusivities `l1`/`l2`.
pub fn axial_tensor(dir: [f64; 3], l1: f64, l2: f64) -> TensorComponents {
    let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    let u = dir.map(|c| c / n);
    let k = l1 - l2;
    [
        l2 + k * u[0] * u[0],
        l2 + k * u[1] * u[1],
        l2 + k * u[2] * u[2],
        k * u[0] * u[1],
        k * u[0] * u[2],
        k * u[1] * u[2],
    ]
}

impl PhantomSpec {
    /// Constant-valued sphere on a zero background.
    pub fn sphere(dims: [usize; 3], radius: f64, value: f64, n_directions: usize) -> Self {
        PhantomSpec {
            dims,
            spacing: [1.0; 3],
            background: Profile::Constant(vec![0.0]),
            regions: vec![Region {
                label: 1,
                shapes: vec![Shape::Sphere {
                    center: center(dims),
                    radius,
                }],
                profile: Profile::Constant(vec![value]),
            }],
            gradients: GradientScheme::Shells {
                n_b0: 0,
                shells: vec![(1000.0, n_directions)],
            },
            overlap: OverlapPolicy::LaterWins,
            seed: 0,
        }
    }

    /// Brain-like two-tissue phantom on a single b = 1000 shell.
    ///
    /// Label 1 is an isotropic ellipsoid. Label 2 is an anisotropic core
    /// plus thin two-voxel sheets crossing the ellipsoid, so the image has
    /// both bulk regions and fine structure.
    pub fn two_region(dims: [usize; 3], n_directions: usize, seed: u64) -> Self {
        let c = center(dims);
        let [fx, fy, fz] = dims.map(|n| n as f64);
        let brain = Shape::Ellipsoid {
            center: c,
            radii: [0.42 * fx, 0.42 * fy, 0.45 * fz],
        };
        let sheet = |axis: usize, at: f64| {
            let mut min = [f64::NEG_INFINITY; 3];
            let mut max = [f64::INFINITY; 3];
            min[axis] = at - 0.5;
            max[axis] = at + 0.5;
            Shape::Intersection(vec![Shape::Box { min, max }, brain.clone()])
        };
        let core = Shape::Ellipsoid {
            center: c,
            radii: [0.2 * fx, 0.12 * fy, 0.3 * fz],
        };
        let white = vec![
            core,
            sheet(1, (c[1] - 0.26 * fy).round()),
            sheet(1, (c[1] + 0.26 * fy).round()),
            sheet(0, (c[0] - 0.3 * fx).round()),
            sheet(0, (c[0] + 0.3 * fx).round()),
        ];
        PhantomSpec {
            dims,
            spacing: [1.0; 3],
            background: Profile::Constant(vec![0.0]),
            regions: vec![
                Region {
                    label: 1,
                    shapes: vec![brain],
                    profile: Profile::Tensor { s0: 100.0, d: GRAY },
                },
                Region {
                    label: 2,
                    shapes: white,
                    profile: Profile::Tensor {
                        s0: 70.0,
                        d: axial_tensor([1.0, 0.0, 0.0], 1.7e-3, 0.3e-3),
                    },
                },
            ],
            gradients: GradientScheme::Shells {
                n_b0: 0,
                shells: vec![(1000.0, n_directions)],
            },
            overlap: OverlapPolicy::LaterWins,
            seed,
        }
    }

    /// Three fiber populations and an isotropic ventricle-like core, with
    /// b = 0 volumes for tensor fitting.
    pub fn fiber_bundles(dims: [usize; 3], n_b0: usize, n_directions: usize, seed: u64) -> Self {
        let c = center(dims);
        let [fx, fy, fz] = dims.map(|n| n as f64);
        let brain = Shape::Ellipsoid {
            center: c,
            radii: [0.42 * fx, 0.42 * fy, 0.45 * fz],
        };
        let half = |sign: f64| {
            Shape::Intersection(vec![
                Shape::HalfSpace {
                    normal: [sign, 0.0, 0.0],
                    offset: sign * c[0],
                },
                brain.clone(),
            ])
        };
        let tensor = |dir| Profile::Tensor {
            s0: 100.0,
            d: axial_tensor(dir, 1.7e-3, 0.3e-3),
        };
        PhantomSpec {
            dims,
            spacing: [1.0; 3],
            background: Profile::Constant(vec![0.0]),
            regions: vec![
                Region {
                    label: 1,
                    shapes: vec![half(-1.0)],
                    profile: tensor([0.0, 1.0, 0.0]),
                },
                Region {
                    label: 2,
                    shapes: vec![half(1.0)],
                    profile: tensor([1.0, 0.0, 0.0]),
                },
                Region {
                    label: 3,
                    shapes: vec![Shape::Ellipsoid {
                        center: c,
                        radii: [0.12 * fx, 0.3 * fy, 0.3 * fz],
                    }],
                    profile: tensor([0.0, 0.0, 1.0]),
                },
                Region {
                    label: 4,
                    shapes: vec![Shape::Sphere {
                        center: [c[0], c[1] + 0.28 * fy, c[2]],
                        radius: 0.07 * fx,
                    }],
                    profile: Profile::Tensor {
                        s0: 100.0,
                        d: [2.0e-3, 2.0e-3, 2.0e-3, 0.0, 0.0, 0.0],
                    },
                },
            ],
            gradients: GradientScheme::Shells {
                n_b0,
                shells: vec![(1000.0, n_directions)],
            },
            overlap: OverlapPolicy::LaterWins,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseModel {
    Gaussian,
    Rician,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub model: NoiseModel,
    pub sigma: f64,
    pub seed: u64,
}

pub fn add_noise(vol: &Volume4D, spec: &NoiseSpec) -> Result<Volume4D> {
    if !spec.sigma.is_finite() || spec.sigma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be >= 0, got {}",
            spec.sigma
        )));
    }
    if spec.sigma == 0.0 {
        return Ok(vol.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.sigma;
    let data = vol
        .data()
        .iter()
        .map(|&v| {
            let e1: f64 = rng.sample(StandardNormal);
            match spec.model {
                NoiseModel::Gaussian => v + s * e1,
                NoiseModel::Rician => {
                    let e2: f64 = rng.sample(StandardNormal);
                    ((v + s * e1).powi(2) + (s * e2).powi(2)).sqrt()
                }
            }
        })
        .collect();
    vol.with_data(data)
}

/// Mean of the in-mask signal over every volume.
pub fn mean_in_mask(vol: &Volume4D, mask: &Mask3D) -> Result<f64> {
    mask.ensure_matches(vol.spatial_dims())?;
    let n = mask.count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mut sum = 0.0;
    for d in 0..vol.n_directions() {
        sum += vol
            .direction(d)
            .iter()
            .zip(mask.data())
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum::<f64>();
    }
    Ok(sum / (n * vol.n_directions()) as f64)
}

fn ensure_same_shape(a: &Volume4D, b: &Volume4D) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// PSNR in dB over in-mask voxels of every volume; `+inf` for an exact match.
pub fn psnr(truth: &Volume4D, test: &Volume4D, mask: &Mask3D) -> Result<f64> {
    ensure_same_shape(truth, test)?;
    mask.ensure_matches(truth.spatial_dims())?;
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let mut peak = f64::NEG_INFINITY;
    let mut se = 0.0;
    let mut n = 0usize;
    for d in 0..truth.n_directions() {
        for ((t, x), &m) in truth
            .direction(d)
            .iter()
            .zip(test.direction(d))
            .zip(mask.data())
        {
            if m {
                peak = peak.max(*t);
                se += (x - t).powi(2);
                n += 1;
            }
        }
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn label_of(v: f64) -> i64 {
    v.round() as i64
}

/// Voxels within Chebyshev distance `width` of a voxel with a different label.
pub fn boundary_band(labels: &Volume3D, width: usize) -> Mask3D {
    let [nx, ny, nz] = labels.dims();
    let l = labels.data();
    let w = width as isize;
    Mask3D::from_fn([nx, ny, nz], |x, y, z| {
        let own = label_of(l[x + nx * (y + ny * z)]);
        let r = |c: usize, n: usize| {
            let c = c as isize;
            (c - w).max(0) as usize..=((c + w).min(n as isize - 1)) as usize
        };
        for zz in r(z, nz) {
            for yy in r(y, ny) {
                for xx in r(x, nx) {
                    if label_of(l[xx + nx * (yy + ny * zz)]) != own {
                        return true;
                    }
                }
            }
        }
        false
    })
    .expect("label dims are valid")
}

/// Mean absolute error against `truth` over `band`, all volumes.
pub fn masked_mae(truth: &Volume4D, test: &Volume4D, band: &Mask3D) -> Result<f64> {
    ensure_same_shape(truth, test)?;
    band.ensure_matches(truth.spatial_dims())?;
    if band.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let mut sum = 0.0;
    for d in 0..truth.n_directions() {
        for ((t, x), &m) in truth
            .direction(d)
            .iter()
            .zip(test.direction(d))
            .zip(band.data())
        {
            if m {
                sum += (x - t).abs();
            }
        }
    }
    Ok(sum / (band.count() * truth.n_directions()) as f64)
}

pub const BOUNDARY_BAND_WIDTH: usize = 2;

/// Serializes infinities as the strings `"+inf"` / `"-inf"`.
mod db {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "+inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "+inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("unexpected value {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub voxels: usize,
    pub residual_mean: f64,
    pub residual_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaAccuracy {
    pub true_sigma: f64,
    pub mean_estimate: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub width: usize,
    pub voxels: usize,
    /// MAE per method name.
    pub mae: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(with = "db")]
    pub psnr_noisy: f64,
    #[serde(with = "db")]
    pub psnr_denoised: f64,
    /// Residual statistics of `denoised - truth`, keyed by label.
    pub regions: BTreeMap<String, RegionStats>,
    pub sigma: Option<SigmaAccuracy>,
    pub boundary_band: BandStats,
    pub timings: BTreeMap<String, f64>,
    pub degenerate_patches: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub struct EvalInputs<'a> {
    pub truth: &'a Volume4D,
    pub noisy: &'a Volume4D,
    pub denoised: &'a Volume4D,
    pub sigma_map: Option<&'a Volume3D>,
    pub labels: &'a Volume3D,
    pub true_sigma: f64,
}

/// PSNR and sigma accuracy use the nonzero labels as the mask.
pub fn evaluate_run(inp: &EvalInputs) -> Result<EvalReport> {
    ensure_same_shape(inp.truth, inp.noisy)?;
    ensure_same_shape(inp.truth, inp.denoised)?;
    let dims = inp.truth.spatial_dims();
    if inp.labels.dims() != dims {
        return Err(Error::DimensionMismatch(format!(
            "labels {:?} vs {:?}",
            inp.labels.dims(),
            dims
        )));
    }
    let mask = Mask3D::new(
        dims,
        inp.labels
            .data()
            .iter()
            .map(|&l| label_of(l) != 0)
            .collect(),
    )?;

    let psnr_noisy = psnr(inp.truth, inp.noisy, &mask)?;
    let psnr_denoised = psnr(inp.truth, inp.denoised, &mask)?;

    let mut acc: BTreeMap<i64, (usize, f64, f64)> = BTreeMap::new();
    for d in 0..inp.truth.n_directions() {
        for (v, (t, x)) in inp
            .truth
            .direction(d)
            .iter()
            .zip(inp.denoised.direction(d))
            .enumerate()
        {
            let e = acc.entry(label_of(inp.labels.data()[v])).or_default();
            let r = x - t;
            e.0 += 1;
            e.1 += r;
            e.2 += r * r;
        }
    }
    let nd = inp.truth.n_directions();
    let regions = acc
        .into_iter()
        .map(|(l, (n, s, s2))| {
            let mean = s / n as f64;
            let var = (s2 / n as f64 - mean * mean).max(0.0);
            (
                l.to_string(),
                RegionStats {
                    voxels: n / nd,
                    residual_mean: mean,
                    residual_std: var.sqrt(),
                },
            )
        })
        .collect();

    let sigma = match inp.sigma_map {
        Some(map) => {
            if map.dims() != dims {
                return Err(Error::DimensionMismatch(format!(
                    "sigma map {:?} vs {:?}",
                    map.dims(),
                    dims
                )));
            }
            let vals: Vec<f64> = map
                .data()
                .iter()
                .zip(mask.data())
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            Some(SigmaAccuracy {
                true_sigma: inp.true_sigma,
                mean_estimate: mean,
                relative_error: if inp.true_sigma > 0.0 {
                    (mean - inp.true_sigma).abs() / inp.true_sigma
                } else {
                    mean.abs()
                },
            })
        }
        None => None,
    };

    let band = boundary_band(inp.labels, BOUNDARY_BAND_WIDTH);
    let mut mae = BTreeMap::new();
    if band.count() > 0 {
        mae.insert(
            "noisy".to_string(),
            masked_mae(inp.truth, inp.noisy, &band)?,
        );
        mae.insert(
            "denoised".to_string(),
            masked_mae(inp.truth, inp.denoised, &band)?,
        );
    }
    Ok(EvalReport {
        psnr_noisy,
        psnr_denoised,
        regions,
        sigma,
        boundary_band: BandStats {
            width: BOUNDARY_BAND_WIDTH,
            voxels: band.count(),
            mae,
        },
        timings: BTreeMap::new(),
        degenerate_patches: 0,
    })
}

/// Unit-spacing label volume, handy for hand-built fixtures.
pub fn label_volume(dims: [usize; 3], labels: Vec<f64>) -> Result<Volume3D> {
    Volume3D::new(dims, labels, [1.0; 3], identity_affine())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn profiles(p: &Phantom) -> HashSet<Vec<u64>> {
        (0..p.truth.n_voxels())
            .map(|v| {
                (0..p.truth.n_directions())
                    .map(|d| p.truth.direction(d)[v].to_bits())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn sphere_has_two_profiles() {
        let p = generate_phantom(&PhantomSpec::sphere([16, 16, 16], 5.0, 100.0, 32)).unwrap();
        assert_eq!(p.truth.n_directions(), 32);
        assert_eq!(profiles(&p).len(), 2);
        assert!(p.mask.count() > 0);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = PhantomSpec::two_region([24, 24, 12], 16, 7);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
        let other = generate_phantom(&PhantomSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.gtab, other.gtab);
    }

    #[test]
    fn tensor_signal_matches_formula() {
        let d = [1.5e-3, 0.3e-3, 0.3e-3, 0.0, 0.0, 0.0];
        let mut spec = PhantomSpec::sphere([8, 8, 8], 3.0, 1.0, 20);
        spec.regions[0].profile = Profile::Tensor { s0: 90.0, d };
        let p = generate_phantom(&spec).unwrap();
        let c = linear(&p, [4, 4, 4]);
        for (i, (&b, g)) in p.gtab.bvals().iter().zip(p.gtab.bvecs()).enumerate() {
            let q = 1.5e-3 * g[0] * g[0] + 0.3e-3 * (g[1] * g[1] + g[2] * g[2]);
            let expected = 90.0 * (-b * q).exp();
            assert!((p.truth.direction(i)[c] - expected).abs() <= 1e-12 * 90.0);
        }
    }

    fn linear(p: &Phantom, [x, y, z]: [usize; 3]) -> usize {
        let d = p.truth.spatial_dims();
        x + d[0] * (y + d[1] * z)
    }

    #[test]
    fn later_regions_win_or_fail() {
        let dims = [10, 10, 10];
        let a = Region {
            label: 1,
            shapes: vec![Shape::Box {
                min: [0.0; 3],
                max: [6.0; 3],
            }],
            profile: Profile::Constant(vec![1.0]),
        };
        let b = Region {
            label: 2,
            shapes: vec![Shape::Box {
                min: [4.0; 3],
                max: [9.0; 3],
            }],
            profile: Profile::Constant(vec![2.0]),
        };
        let mut spec = PhantomSpec::sphere(dims, 1.0, 1.0, 4);
        spec.regions = vec![a, b];
        let p = generate_phantom(&spec).unwrap();
        assert_eq!(p.labels.get(5, 5, 5), 2.0);
        assert_eq!(p.labels.get(1, 1, 1), 1.0);
        spec.overlap = OverlapPolicy::Forbid;
        assert!(matches!(
            generate_phantom(&spec),
            Err(Error::OverlapPolicyViolation(0, 1))
        ));
    }

    #[test]
    fn shapes() {
        let hs = Shape::HalfSpace {
            normal: [1.0, 0.0, 0.0],
            offset: 2.0,
        };
        assert!(hs.contains([2.0, 0.0, 0.0]) && !hs.contains([1.9, 5.0, 5.0]));
        let e = Shape::Ellipsoid {
            center: [0.0; 3],
            radii: [4.0, 1.0, 1.0],
        };
        assert!(e.contains([3.9, 0.0, 0.0]) && !e.contains([0.0, 1.1, 0.0]));
        assert!(Shape::Intersection(vec![hs, e]).contains([3.0, 0.0, 0.0]));
    }

    #[test]
    fn scheme_directions_are_unit() {
        let g = scheme_table(2, &[(1000.0, 30), (2000.0, 10)], 3).unwrap();
        assert_eq!(g.len(), 42);
        for (&b, v) in g.bvals().iter().zip(g.bvecs()).skip(2) {
            assert!(b >= 1000.0);
            assert!((v.iter().map(|c| c * c).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn constant(dims: [usize; 4], v: f64) -> Volume4D {
        Volume4D::from_data(dims, vec![v; dims.iter().product()]).unwrap()
    }

    #[test]
    fn zero_sigma_is_identity() {
        let v = constant([4, 4, 4, 3], 7.0);
        let spec = NoiseSpec {
            model: NoiseModel::Gaussian,
            sigma: 0.0,
            seed: 1,
        };
        assert_eq!(add_noise(&v, &spec).unwrap(), v);
        assert!(add_noise(
            &v,
            &NoiseSpec {
                sigma: -1.0,
                ..spec
            }
        )
        .is_err());
    }

    #[test]
    fn gaussian_moments() {
        let v = constant([50, 50, 40, 1], 100.0);
        let n = add_noise(
            &v,
            &NoiseSpec {
                model: NoiseModel::Gaussian,
                sigma: 5.0,
                seed: 11,
            },
        )
        .unwrap();
        let m = n.data().iter().sum::<f64>() / n.data().len() as f64;
        let sd =
            (n.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / n.data().len() as f64).sqrt();
        assert!((sd - 5.0).abs() / 5.0 < 0.02, "{sd}");
        assert!((m - 100.0).abs() < 0.1);
    }

    #[test]
    fn rician_on_zero_is_rayleigh() {
        let v = constant([50, 50, 40, 1], 0.0);
        let n = add_noise(
            &v,
            &NoiseSpec {
                model: NoiseModel::Rician,
                sigma: 5.0,
                seed: 12,
            },
        )
        .unwrap();
        let m = n.data().iter().sum::<f64>() / n.data().len() as f64;
        let expected = 5.0 * (std::f64::consts::PI / 2.0).sqrt();
        assert!((m - expected).abs() / expected < 0.03);
        assert!(n.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn noise_is_seeded() {
        let v = constant([6, 6, 6, 2], 1.0);
        let spec = NoiseSpec {
            model: NoiseModel::Rician,
            sigma: 1.0,
            seed: 5,
        };
        assert_eq!(add_noise(&v, &spec).unwrap(), add_noise(&v, &spec).unwrap());
        assert_ne!(
            add_noise(&v, &spec).unwrap(),
            add_noise(&v, &NoiseSpec { seed: 6, ..spec }).unwrap()
        );
    }

    #[test]
    fn psnr_cases() {
        let dims = [4, 4, 4, 2];
        let mut t = vec![50.0; 128];
        t[3] = 100.0;
        let truth = Volume4D::from_data(dims, t.clone()).unwrap();
        let mask = Mask3D::filled([4, 4, 4], true).unwrap();
        assert_eq!(psnr(&truth, &truth, &mask).unwrap(), f64::INFINITY);
        let shifted = truth
            .with_data(t.iter().map(|v| v + 1.0).collect())
            .unwrap();
        assert!((psnr(&truth, &shifted, &mask).unwrap() - 40.0).abs() < 1e-12);
        let empty = Mask3D::filled([4, 4, 4], false).unwrap();
        assert!(matches!(
            psnr(&truth, &shifted, &empty),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn psnr_drops_with_noise() {
        let truth = generate_phantom(&PhantomSpec::sphere([16, 16, 16], 6.0, 100.0, 8)).unwrap();
        let mask = Mask3D::filled([16, 16, 16], true).unwrap();
        let at = |s| {
            let n = add_noise(
                &truth.truth,
                &NoiseSpec {
                    model: NoiseModel::Gaussian,
                    sigma: s,
                    seed: 3,
                },
            )
            .unwrap();
            psnr(&truth.truth, &n, &mask).unwrap()
        };
        assert!(at(2.0) > at(4.0));
    }

    fn two_label_fixture() -> (Volume4D, Volume3D) {
        let dims = [6, 4, 4];
        let labels = label_volume(
            dims,
            (0..96).map(|v| if v % 6 < 3 { 1.0 } else { 2.0 }).collect(),
        )
        .unwrap();
        (
            Volume4D::from_data([6, 4, 4, 2], vec![10.0; 192]).unwrap(),
            labels,
        )
    }

    #[test]
    fn identity_methods() {
        let (truth, labels) = two_label_fixture();
        let noisy = add_noise(
            &truth,
            &NoiseSpec {
                model: NoiseModel::Gaussian,
                sigma: 1.0,
                seed: 2,
            },
        )
        .unwrap();
        let inputs = EvalInputs {
            truth: &truth,
            noisy: &noisy,
            denoised: &truth,
            sigma_map: None,
            labels: &labels,
            true_sigma: 1.0,
        };
        let rep = evaluate_run(&inputs).unwrap();
        assert!(rep.regions.values().all(|r| r.residual_std == 0.0));
        assert_eq!(rep.psnr_denoised, f64::INFINITY);
        let rep = evaluate_run(&EvalInputs {
            denoised: &noisy,
            ..inputs
        })
        .unwrap();
        assert_eq!(rep.psnr_denoised, rep.psnr_noisy);
    }

    #[test]
    fn residual_std_closed_form() {
        let (truth, labels) = two_label_fixture();
        // +1 in the first volume and -1 in the second for label 1, +3 everywhere in label 2
        let data: Vec<f64> = truth
            .data()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if (i % 96) % 6 < 3 {
                    t + if i < 96 { 1.0 } else { -1.0 }
                } else {
                    t + 3.0
                }
            })
            .collect();
        let den = truth.with_data(data).unwrap();
        let sigma = Volume3D::filled([6, 4, 4], 1.2).unwrap();
        let rep = evaluate_run(&EvalInputs {
            truth: &truth,
            noisy: &den,
            denoised: &den,
            sigma_map: Some(&sigma),
            labels: &labels,
            true_sigma: 1.0,
        })
        .unwrap();
        let r1 = &rep.regions["1"];
        assert_eq!(r1.voxels, 48);
        assert!(r1.residual_mean.abs() < 1e-12 && (r1.residual_std - 1.0).abs() < 1e-12);
        let r2 = &rep.regions["2"];
        assert!((r2.residual_mean - 3.0).abs() < 1e-12 && r2.residual_std < 1e-7);
        assert!((rep.sigma.unwrap().relative_error - 0.2).abs() < 1e-12);
        // the two-voxel band covers the columns x = 1..=4
        assert_eq!(rep.boundary_band.voxels, 4 * 16);
    }

    #[test]
    fn relabeling_only_renames() {
        let (truth, labels) = two_label_fixture();
        let noisy = add_noise(
            &truth,
            &NoiseSpec {
                model: NoiseModel::Gaussian,
                sigma: 1.0,
                seed: 4,
            },
        )
        .unwrap();
        let swapped = labels
            .with_data(labels.data().iter().map(|&l| 3.0 - l).collect())
            .unwrap();
        let run = |l: &Volume3D| {
            evaluate_run(&EvalInputs {
                truth: &truth,
                noisy: &noisy,
                denoised: &noisy,
                sigma_map: None,
                labels: l,
                true_sigma: 1.0,
            })
            .unwrap()
        };
        let (a, b) = (run(&labels), run(&swapped));
        assert_eq!(a.regions["1"], b.regions["2"]);
        assert_eq!(a.regions["2"], b.regions["1"]);
        assert_eq!(a.boundary_band, b.boundary_band);
        assert_eq!(a.psnr_noisy, b.psnr_noisy);
    }

    #[test]
    fn report_json_uses_inf_sentinel() {
        let (truth, labels) = two_label_fixture();
        let rep = evaluate_run(&EvalInputs {
            truth: &truth,
            noisy: &truth,
            denoised: &truth,
            sigma_map: None,
            labels: &labels,
            true_sigma: 1.0,
        })
        .unwrap();
        let json = rep.to_json();
        assert!(json.contains("\"psnr_denoised\": \"+inf\""));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn uniform_labels_have_no_band() {
        let l = label_volume([5, 5, 5], vec![1.0; 125]).unwrap();
        assert_eq!(boundary_band(&l, 2).count(), 0);
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use akmppca::dti::{dec_map, fa, fit_dti};
use akmppca::kernel_map::{DEFAULT_K_LOWER, DEFAULT_K_UPPER, DEFAULT_SEED};
use akmppca::mask::median_otsu_mask_with;
use akmppca::nifti::{
    read_gradient_table, read_nifti, write_gradient_table, write_mask, write_nifti_3d,
    write_nifti_4d, OutputType,
};
use akmppca::phantom::{
    add_noise, boundary_band, evaluate_run, generate_phantom, masked_mae, mean_in_mask, EvalInputs,
    NoiseModel, NoiseSpec, PhantomSpec, BOUNDARY_BAND_WIDTH,
};
use akmppca::structure::DEFAULT_SIGMA;
use akmppca::volume::DEFAULT_B_MIN;
use akmppca::{
    denoise_adaptive, denoise_fixed, estimate_kernel_map, select_lowest_shell, select_shell,
    trace_image, DenoiseReport, Error, ErrorKind, GradientTable, KernelBounds, Mask3D,
    MedianOtsuParams, PipelineOptions, Shell, SmoothingSpec, Volume4D,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "akmppca",
    version,
    about = "Adaptive-kernel MP-PCA denoising for diffusion MRI"
)]
struct Cli {
    /// Worker threads (default: all cores)
    #[arg(long, global = true, env = "AKMPPCA_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Denoise a DWI series with per-voxel kernel sizes
    Denoise(DenoiseArgs),
    /// Estimate and write the per-voxel kernel-size map
    KernelMap(KernelMapArgs),
    /// Median-Otsu brain mask
    Mask(MaskArgs),
    /// Generate a synthetic phantom with known ground truth
    Phantom(PhantomArgs),
    /// Score a denoised phantom against its ground truth
    Eval(EvalArgs),
    /// Tensor fit, FA and directionally encoded color map
    Dec(DecArgs),
}

#[derive(Args)]
struct DwiInput {
    /// 4D DWI NIfTI (.nii or .nii.gz)
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    bvals: PathBuf,
    #[arg(long)]
    bvecs: PathBuf,
}

#[derive(Args)]
struct EstimationArgs {
    /// Smallest kernel size (odd)
    #[arg(long, default_value_t = DEFAULT_K_LOWER)]
    kmin: usize,
    /// Largest kernel size (odd)
    #[arg(long, default_value_t = DEFAULT_K_UPPER)]
    kmax: usize,
    /// Gaussian smoothing before the Sobel operator; 0 disables it
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    /// k-means seed
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Brain mask to use instead of median-Otsu
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Smallest b-value eligible for kernel estimation
    #[arg(long, default_value_t = DEFAULT_B_MIN)]
    b_min: f64,
    /// Shell grouping tolerance (default: max(50, 1% of b))
    #[arg(long)]
    shell_tol: Option<f64>,
}

#[derive(Args)]
struct DenoiseArgs {
    #[command(flatten)]
    dwi: DwiInput,
    /// Denoised output; sibling maps and the report share its stem
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    est: EstimationArgs,
    /// Use one kernel size everywhere (plain MP-PCA)
    #[arg(long, conflicts_with_all = ["kmin", "kmax"])]
    fixed_kernel: Option<usize>,
    /// Shell to denoise, by b-value (default: the lowest eligible shell)
    #[arg(long)]
    shell: Option<f64>,
    /// Denoise every volume jointly
    #[arg(long, conflicts_with = "shell")]
    all_volumes: bool,
}

#[derive(Args)]
struct KernelMapArgs {
    #[command(flatten)]
    dwi: DwiInput,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    est: EstimationArgs,
}

#[derive(Args)]
struct MaskArgs {
    /// 3D image, or 4D DWI together with --bvals/--bvecs
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, requires = "bvecs")]
    bvals: Option<PathBuf>,
    #[arg(long, requires = "bvals")]
    bvecs: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = MedianOtsuParams::default().radius)]
    radius: usize,
    #[arg(long, default_value_t = MedianOtsuParams::default().passes)]
    passes: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Isotropic ellipsoid with an anisotropic core and thin sheets
    TwoRegion,
    /// Three fiber orientations plus an isotropic core, with b=0 volumes
    FiberBundles,
    /// Constant sphere
    Sphere,
}

#[derive(Clone, Copy, ValueEnum)]
enum Noise {
    Gaussian,
    Rician,
}

#[derive(Args)]
struct PhantomArgs {
    /// Noisy DWI output; truth, labels, mask and gradients share its stem
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::TwoRegion)]
    preset: Preset,
    /// Spatial size as X,Y,Z
    #[arg(long, value_delimiter = ',', default_value = "64,64,32")]
    dims: Vec<usize>,
    /// Diffusion-weighted directions at b = 1000
    #[arg(long, default_value_t = 32)]
    directions: usize,
    /// b = 0 volumes (fiber-bundles preset only)
    #[arg(long, default_value_t = 2)]
    b0: usize,
    /// Noise sigma as a fraction of the mean in-mask signal
    #[arg(long, default_value_t = 0.05)]
    noise_fraction: f64,
    #[arg(long, value_enum, default_value_t = Noise::Gaussian)]
    noise: Noise,
    /// Seeds both the direction scheme and the noise
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    noisy: PathBuf,
    #[arg(long)]
    denoised: PathBuf,
    /// Region labels; 0 is background
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    sigma_map: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    true_sigma: f64,
    /// Extra methods for the boundary-band comparison, as NAME=PATH
    #[arg(long = "compare", value_parser = parse_named_path)]
    compare: Vec<(String, PathBuf)>,
    /// JSON report path (printed to stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecArgs {
    #[command(flatten)]
    dwi: DwiInput,
    /// RGB map as a 3-volume 4D NIfTI
    #[arg(long)]
    out: PathBuf,
    /// Mask for the fit (default: median-Otsu on the mean b=0 image)
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Also write an axial-slice montage
    #[arg(long)]
    png: Option<PathBuf>,
    /// Also write the FA map
    #[arg(long)]
    fa: Option<PathBuf>,
}

fn parse_named_path(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected NAME=PATH, got {s:?}"))?;
    if name.is_empty() {
        return Err("empty method name".into());
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

type CliResult<T> = Result<T, Error>;

/// `dir/den.nii.gz` + `_sigma` -> `dir/den_sigma.nii.gz`.
fn sibling(out: &Path, suffix: &str, ext: Option<&str>) -> CliResult<PathBuf> {
    let name = out.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let (stem, nii_ext) = if let Some(s) = name.strip_suffix(".nii.gz") {
        (s, ".nii.gz")
    } else if let Some(s) = name.strip_suffix(".nii") {
        (s, ".nii")
    } else {
        return Err(Error::InvalidArgument(format!(
            "output {} must end in .nii or .nii.gz",
            out.display()
        )));
    };
    Ok(out.with_file_name(format!("{stem}{suffix}{}", ext.unwrap_or(nii_ext))))
}

fn read_4d(path: &Path) -> CliResult<Volume4D> {
    Ok(read_nifti(path)?.into_4d())
}

fn read_dwi(dwi: &DwiInput) -> CliResult<(Volume4D, GradientTable)> {
    let vol = read_4d(&dwi.input)?;
    let gtab = read_gradient_table(&dwi.bvals, &dwi.bvecs)?;
    gtab.ensure_matches(&vol)?;
    Ok((vol, gtab))
}

fn read_mask(path: &Path, dims: [usize; 3]) -> CliResult<Mask3D> {
    let m = Mask3D::from_volume(&read_nifti(path)?.into_3d()?);
    m.ensure_matches(dims)?;
    Ok(m)
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    std::fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn pipeline_options(est: &EstimationArgs, dims: [usize; 3]) -> CliResult<PipelineOptions> {
    Ok(PipelineOptions {
        b_min: est.b_min,
        shell_tolerance: est.shell_tol,
        smoothing: SmoothingSpec::new(est.sigma)?,
        mask: est
            .mask
            .as_deref()
            .map(|p| read_mask(p, dims))
            .transpose()?,
        ..PipelineOptions::default()
    })
}

fn cmd_denoise(a: &DenoiseArgs) -> CliResult<()> {
    let start = Instant::now();
    let sigma_path = sibling(&a.out, "_sigma", None)?;
    let bounds = KernelBounds::new(a.est.kmin, a.est.kmax)?;
    let smoothing = SmoothingSpec::new(a.est.sigma)?;
    if let Some(k) = a.fixed_kernel.filter(|k| k % 2 == 0) {
        return Err(Error::InvalidArgument(format!(
            "--fixed-kernel must be odd, got {k}"
        )));
    }
    let (vol, gtab) = read_dwi(&a.dwi)?;
    let target = if a.all_volumes {
        Shell::all(gtab.len())
    } else if let Some(b) = a.shell {
        select_shell(&gtab, b, a.est.shell_tol)?
    } else {
        select_lowest_shell(&gtab, a.est.b_min, a.est.shell_tol)?
    };

    let (out, mask) = match a.fixed_kernel {
        Some(k) => {
            let mask = a
                .est
                .mask
                .as_deref()
                .map(|p| read_mask(p, vol.spatial_dims()))
                .transpose()?;
            (denoise_fixed(&vol, &target, k)?, mask)
        }
        None => {
            let opts = PipelineOptions {
                smoothing,
                ..pipeline_options(&a.est, vol.spatial_dims())?
            };
            let est = estimate_kernel_map(&vol, &gtab, &bounds, a.est.seed, &opts)?;
            (
                denoise_adaptive(&vol, &target, &est.kernel_map)?,
                Some(est.mask),
            )
        }
    };

    write_nifti_4d(&out.denoised, &a.out, OutputType::Float32)?;
    write_nifti_3d(&out.sigma_map, &sigma_path, OutputType::Float32)?;
    write_nifti_3d(
        &out.rank_map,
        sibling(&a.out, "_rank", None)?,
        OutputType::Float32,
    )?;
    let kvol = out.kernel_map_used.to_volume(vol.spacing(), *vol.affine());
    write_nifti_3d(
        &kvol,
        sibling(&a.out, "_kernel", None)?,
        OutputType::Float32,
    )?;
    let report = DenoiseReport::new(&out, &target, mask.as_ref());
    let mut value = serde_json::to_value(&report).expect("report serializes");
    value["mode"] = json!(match a.fixed_kernel {
        Some(k) => format!("fixed k={k}"),
        None => format!("adaptive k in [{}, {}]", a.est.kmin, a.est.kmax),
    });
    value["total_seconds"] = json!(start.elapsed().as_secs_f64());
    write_json(&sibling(&a.out, "_report", Some(".json"))?, &value)?;
    eprintln!(
        "denoised {} volumes at b={} in {:.1}s ({} degenerate patches)",
        target.len(),
        target.b_target,
        out.elapsed_seconds,
        out.degenerate_count
    );
    Ok(())
}

fn cmd_kernel_map(a: &KernelMapArgs) -> CliResult<()> {
    let report_path = sibling(&a.out, "_report", Some(".json"))?;
    let bounds = KernelBounds::new(a.est.kmin, a.est.kmax)?;
    let (vol, gtab) = read_dwi(&a.dwi)?;
    let opts = pipeline_options(&a.est, vol.spatial_dims())?;
    let est = estimate_kernel_map(&vol, &gtab, &bounds, a.est.seed, &opts)?;
    let kvol = est.kernel_map.to_volume(vol.spacing(), *vol.affine());
    write_nifti_3d(&kvol, &a.out, OutputType::Float32)?;
    write_json(
        &report_path,
        &json!({
            "shell_b": est.shell.b_target,
            "shell_volumes": est.shell.len(),
            "mask_voxels": est.mask.count(),
            "kernel_histogram": est.kernel_map.histogram(),
            "seed": a.est.seed,
        }),
    )
}

fn cmd_mask(a: &MaskArgs) -> CliResult<()> {
    let vol = match (&a.bvals, &a.bvecs) {
        (Some(bvals), Some(bvecs)) => {
            let dwi = read_4d(&a.input)?;
            let gtab = read_gradient_table(bvals, bvecs)?;
            gtab.ensure_matches(&dwi)?;
            trace_image(&dwi, &select_lowest_shell(&gtab, DEFAULT_B_MIN, None)?)?
        }
        _ => read_nifti(&a.input)?.into_3d()?,
    };
    let mask = median_otsu_mask_with(
        &vol,
        MedianOtsuParams {
            radius: a.radius,
            passes: a.passes,
        },
    )?;
    write_mask(&mask, vol.spacing(), *vol.affine(), &a.out)?;
    eprintln!("mask keeps {} of {} voxels", mask.count(), vol.len());
    Ok(())
}

fn cmd_phantom(a: &PhantomArgs) -> CliResult<()> {
    let dims: [usize; 3] = a.dims.as_slice().try_into().map_err(|_| {
        Error::InvalidArgument(format!("--dims needs three values, got {}", a.dims.len()))
    })?;
    let truth_path = sibling(&a.out, "_truth", None)?;
    let spec = match a.preset {
        Preset::TwoRegion => PhantomSpec::two_region(dims, a.directions, a.seed),
        Preset::FiberBundles => PhantomSpec::fiber_bundles(dims, a.b0, a.directions, a.seed),
        Preset::Sphere => PhantomSpec::sphere(
            dims,
            0.35 * dims[0].min(dims[1]).min(dims[2]) as f64,
            100.0,
            a.directions,
        ),
    };
    let ph = generate_phantom(&spec)?;
    let sigma = a.noise_fraction * mean_in_mask(&ph.truth, &ph.mask)?;
    let model = match a.noise {
        Noise::Gaussian => NoiseModel::Gaussian,
        Noise::Rician => NoiseModel::Rician,
    };
    let noisy = add_noise(
        &ph.truth,
        &NoiseSpec {
            model,
            sigma,
            seed: a.seed,
        },
    )?;
    write_nifti_4d(&noisy, &a.out, OutputType::Float32)?;
    write_nifti_4d(&ph.truth, &truth_path, OutputType::Float32)?;
    write_nifti_3d(
        &ph.labels,
        sibling(&a.out, "_labels", None)?,
        OutputType::Uint8,
    )?;
    write_mask(
        &ph.mask,
        noisy.spacing(),
        *noisy.affine(),
        sibling(&a.out, "_mask", None)?,
    )?;
    write_gradient_table(
        &ph.gtab,
        sibling(&a.out, "", Some(".bval"))?,
        sibling(&a.out, "", Some(".bvec"))?,
    )?;
    write_json(
        &sibling(&a.out, "_phantom", Some(".json"))?,
        &json!({ "sigma": sigma, "noise_fraction": a.noise_fraction, "seed": a.seed, "dims": dims, "volumes": ph.gtab.len() }),
    )?;
    eprintln!("phantom written with noise sigma {sigma:.4}");
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let truth = read_4d(&a.truth)?;
    let noisy = read_4d(&a.noisy)?;
    let denoised = read_4d(&a.denoised)?;
    let labels = read_nifti(&a.labels)?.into_3d()?;
    let sigma_map = a
        .sigma_map
        .as_deref()
        .map(|p| read_nifti(p).and_then(|v| v.into_3d()))
        .transpose()?;
    let mut report = evaluate_run(&EvalInputs {
        truth: &truth,
        noisy: &noisy,
        denoised: &denoised,
        sigma_map: sigma_map.as_ref(),
        labels: &labels,
        true_sigma: a.true_sigma,
    })?;
    let band = boundary_band(&labels, BOUNDARY_BAND_WIDTH);
    for (name, path) in &a.compare {
        let other = read_4d(path)?;
        if band.count() > 0 {
            report
                .boundary_band
                .mae
                .insert(name.clone(), masked_mae(&truth, &other, &band)?);
        }
    }
    let text = report.to_json();
    match &a.out {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_dec(a: &DecArgs) -> CliResult<()> {
    let (vol, gtab) = read_dwi(&a.dwi)?;
    let mask = match &a.mask {
        Some(p) => read_mask(p, vol.spatial_dims())?,
        None => {
            let low: Vec<usize> = (0..gtab.len())
                .filter(|&i| gtab.bvals()[i] < DEFAULT_B_MIN)
                .collect();
            if low.is_empty() {
                return Err(Error::InsufficientDirections(
                    "no volume with b < 100 for the S0 image".into(),
                ));
            }
            let b0 = trace_image(
                &vol,
                &Shell {
                    b_target: 0.0,
                    tolerance: DEFAULT_B_MIN,
                    indices: low,
                },
            )?;
            median_otsu_mask_with(&b0, MedianOtsuParams::default())?
        }
    };
    let field = fit_dti(&vol, &gtab, &mask)?;
    let dec = dec_map(&field);
    write_nifti_4d(&dec.to_volume(), &a.out, OutputType::Float32)?;
    if let Some(p) = &a.fa {
        write_nifti_3d(&fa(&field), p, OutputType::Float32)?;
    }
    if let Some(p) = &a.png {
        dec.write_png_montage(p)?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation => 2,
        ErrorKind::Io => 3,
        ErrorKind::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Denoise(a) => cmd_denoise(a),
        Command::KernelMap(a) => cmd_kernel_map(a),
        Command::Mask(a) => cmd_mask(a),
        Command::Phantom(a) => cmd_phantom(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Dec(a) => cmd_dec(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! Adaptive-kernel MP-PCA denoising for diffusion-weighted MRI.
//!
//! The pipeline selects the lowest diffusion-weighted shell, averages it
//! into a trace image, masks the brain with median-Otsu, computes a smoothed
//! in-plane gradient magnitude, clusters it into one group per allowed
//! kernel size and finally runs Marchenko-Pastur PCA with the per-voxel
//! patch size. Fixed-size MP-PCA, tensor fitting with color FA maps and
//! a synthetic phantom harness are included for comparison.

pub mod dti;
pub mod error;
pub mod kernel_map;
pub mod mask;
pub mod mppca;
pub mod nifti;
pub mod phantom;
pub mod structure;
pub mod volume;

pub use error::{Error, ErrorKind, Result};
pub use kernel_map::{
    allowed_kernel_sizes, build_kernel_map, kmeans_1d, map_clusters_to_kernels, ClusterModel,
    KernelBounds, KernelMap,
};
pub use mask::{
    median_filter, median_otsu_mask, median_otsu_mask_with, otsu_threshold, MedianOtsuParams,
};
pub use mppca::{
    denoise_adaptive, denoise_fixed, estimate_kernel_map, mp_denoise_patch, run_pipeline,
    run_pipeline_with, DenoiseOutput, DenoiseReport, KernelEstimate, MpPatchResult,
    PipelineOptions,
};
pub use structure::{
    gaussian_smooth_slice, gradient_map, sobel_magnitude_slice, GradientMap, SmoothingSpec,
};
pub use volume::{
    extract_patch, select_lowest_shell, select_shell, trace_image, GradientTable, Mask3D,
    PatchMatrix, Shell, Volume3D, Volume4D,
};

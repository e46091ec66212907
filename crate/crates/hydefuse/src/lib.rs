//! Denoiser-driven fusion of hyperspectral and multispectral images.
//!
//! A high-spectral/low-spatial-resolution image and a low-spectral/high-
//! spatial-resolution image of the same scene are merged into one image with
//! the best of both. The estimate lives in a low-dimensional spectral
//! subspace and is found by a proximal-gradient iteration whose proximal
//! step is a fixed linear kernel denoiser, so the whole update is an affine
//! contraction with a unique fixed point and a provable linear rate that
//! [`spectral`] can estimate and cross-check against dense linear algebra.
//!
//! The pieces, in pipeline order:
//!
//! * [`hsi`]: images as pixel-by-band matrices plus the inner-product space
//!   they live in;
//! * [`container`]: a minimal on-disk format for such images;
//! * [`forward`]: blur, decimation, spectral response, and SNR-calibrated
//!   noise, i.e. how the observations arise from the scene;
//! * [`subspace`]: the SVD-based spectral basis and interpolation;
//! * [`denoiser`]: the cascaded kernel denoiser built from a guide image;
//! * [`fusion`]: the loss, its gradient, and the fixed-point iteration;
//! * [`spectral`]: step-size limits, contraction factors, and dense oracles;
//! * [`metrics`]: PSNR, RMSE, SAM, ERGAS, UIQI against a reference.
//!
//! ```
//! use hydefuse::forward::{box_response, generate_scene, simulate_observations,
//!     BlurKind, ForwardModel, NoiseSpec};
//! use hydefuse::denoiser::{DenoiserParams, KernelDenoiser};
//! use hydefuse::fusion::{run, surrogate_latent, FusionOptions, FusionProblem};
//! use hydefuse::hsi::SpatialDims;
//! use hydefuse::metrics::mean_psnr;
//! use hydefuse::subspace::{estimate_subspace, upsample};
//!
//! // A tiny synthetic scene observed twice: spatially degraded with all
//! // bands, and at full resolution with mixed bands.
//! let dims = SpatialDims::new(12, 12);
//! let scene = generate_scene(dims, 6, 3, 7)?;
//! let model = ForwardModel::new(
//!     BlurKind::StarckMurtagh, 2, box_response(6, 2)?, 1.0, dims)?;
//! let noise = NoiseSpec { snr_h_db: 30.0, snr_m_db: 30.0, seed: 7 };
//! let (y_h, y_m) = simulate_observations(&scene, &model, &noise)?;
//!
//! // Estimate the spectral basis from the interpolated coarse image and
//! // build the denoiser on its latent encoding.
//! let sub = estimate_subspace(&upsample(&y_h, 2)?, 3)?;
//! let guide = surrogate_latent(&y_h, &sub, 2, dims)?;
//! let params = DenoiserParams { window: 3, sigma_w: 0.5, sigma_v: 0.5,
//!     clusters: 8, ..DenoiserParams::default() };
//! let denoiser = KernelDenoiser::build_cascade(&guide, &params)?;
//!
//! let prob = FusionProblem::new(y_h, y_m, model, sub, denoiser)?;
//! let result = run(&prob, &FusionOptions::default())?;
//! assert!(result.trace.converged);
//! assert!(mean_psnr(&scene, &result.image)? > 20.0);
//! # Ok::<(), hydefuse::Error>(())
//! ```

pub mod container;
pub mod denoiser;
pub mod error;
pub mod forward;
pub mod fusion;
pub mod hsi;
pub mod metrics;
pub mod spectral;
pub mod subspace;

pub use error::{Error, Result};
pub use hsi::{HsiImage, SpatialDims};

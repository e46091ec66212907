//! Degradation model relating the latent high-resolution image to the two
//! observations.
//!
//! The hyperspectral observation is `Y_h = A Z + noise` where `A = S B`
//! first blurs each band with a separable kernel under circular boundary
//! conditions and then keeps every `d`-th pixel along both axes. The
//! multispectral observation is `Y_m = Z R + noise` where `R` mixes the
//! spectral bands. Circular boundaries make the blur matrix symmetric and
//! doubly stochastic, so constant bands pass through `B` unchanged; that fact
//! is what the convergence analysis in [`crate::spectral`] leans on.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi::{HsiImage, SpatialDims};

/// Separable blur applied to every band before decimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlurKind {
    /// B3-spline kernel `(1, 4, 6, 4, 1) / 16` along each axis.
    StarckMurtagh,
    /// Truncated Gaussian with the given half-width and standard deviation,
    /// renormalized to unit sum. `radius = 0` degenerates to the identity.
    GaussianPsf { radius: usize, std: f64 },
}

impl BlurKind {
    /// The 1-D kernel; the 2-D blur is this kernel applied along both axes.
    /// The returned taps are nonnegative and sum to exactly 1.
    pub fn kernel(&self) -> Vec<f64> {
        match self {
            BlurKind::StarckMurtagh => {
                vec![1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0]
            }
            BlurKind::GaussianPsf { radius, std } => {
                let r = *radius as isize;
                let mut taps: Vec<f64> = (-r..=r)
                    .map(|t| (-((t * t) as f64) / (2.0 * std * std)).exp())
                    .collect();
                let sum: f64 = taps.iter().sum();
                for t in taps.iter_mut() {
                    *t /= sum;
                }
                // Absorb the rounding residue into the center tap so the sum
                // is exactly 1.0 and constants are preserved to the last bit
                // the summation order allows.
                let resum: f64 = taps.iter().sum();
                taps[*radius] += 1.0 - resum;
                taps
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let BlurKind::GaussianPsf { std, .. } = self {
            if !(*std > 0.0) || !std.is_finite() {
                return Err(Error::Parameter(format!(
                    "gaussian blur std must be a positive finite number, got {std}"
                )));
            }
        }
        Ok(())
    }
}

/// Full degradation model: blur + decimation on the spatial side, spectral
/// response on the band side, and the weight balancing the two data terms.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    pub blur: BlurKind,
    pub decimation: usize,
    /// Spectral response, `L_h x L_m`, nonnegative columns.
    pub response: DMatrix<f64>,
    /// Weight of the multispectral data term.
    pub lambda: f64,
    /// Spatial dims of the latent (and multispectral) grid.
    pub ms_dims: SpatialDims,
}

impl ForwardModel {
    pub fn new(
        blur: BlurKind,
        decimation: usize,
        response: DMatrix<f64>,
        lambda: f64,
        ms_dims: SpatialDims,
    ) -> Result<Self> {
        blur.validate()?;
        // scaled_down also rejects decimation == 0.
        ms_dims.scaled_down(decimation)?;
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Parameter(format!(
                "lambda must be a nonnegative finite number, got {lambda}"
            )));
        }
        if response.nrows() == 0 || response.ncols() == 0 {
            return Err(Error::Parameter("spectral response must be nonempty".into()));
        }
        if response.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Parameter(
                "spectral response entries must be finite and nonnegative".into(),
            ));
        }
        for (j, col) in response.column_iter().enumerate() {
            if col.iter().all(|v| *v == 0.0) {
                return Err(Error::Parameter(format!(
                    "spectral response column {j} has no positive entry"
                )));
            }
        }
        Ok(ForwardModel {
            blur,
            decimation,
            response,
            lambda,
            ms_dims,
        })
    }

    /// Dims of the decimated (hyperspectral) grid.
    pub fn hs_dims(&self) -> SpatialDims {
        // Divisibility was checked at construction.
        self.ms_dims.scaled_down(self.decimation).unwrap()
    }

    /// Number of hyperspectral bands the model expects.
    pub fn hs_bands(&self) -> usize {
        self.response.nrows()
    }

    /// Number of multispectral bands the model produces.
    pub fn ms_bands(&self) -> usize {
        self.response.ncols()
    }

    /// Applies `A = S B` columnwise: blur every band, then keep pixels whose
    /// row and column indices are multiples of the decimation factor.
    pub fn apply_a(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_pixel_rows("apply_a", x)?;
        let kernel = self.blur.kernel();
        let hs = self.hs_dims();
        let columns = par_map_bands(x, |band| {
            let blurred = conv2_circular(band, self.ms_dims, &kernel);
            decimate(&blurred, self.ms_dims, self.decimation)
        });
        Ok(assemble(hs.pixels(), &columns))
    }

    /// Applies `A^T = B S^T`: zero-insertion upsampling followed by the same
    /// symmetric blur.
    pub fn apply_a_adjoint(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let hs = self.hs_dims();
        if y.nrows() != hs.pixels() {
            return Err(Error::dimension(
                "apply_a_adjoint",
                format!("{} pixel rows for dims {}", hs.pixels(), hs),
                format!("{} rows", y.nrows()),
            ));
        }
        let kernel = self.blur.kernel();
        let columns = par_map_bands(y, |band| {
            let upsampled = zero_insert(band, hs, self.decimation);
            conv2_circular(&upsampled, self.ms_dims, &kernel)
        });
        Ok(assemble(self.ms_dims.pixels(), &columns))
    }

    /// Blur without decimation, exposed for building surrogate scenes and for
    /// tests that need `B` alone.
    pub fn apply_blur(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_pixel_rows("apply_blur", x)?;
        let kernel = self.blur.kernel();
        let columns = par_map_bands(x, |band| conv2_circular(band, self.ms_dims, &kernel));
        Ok(assemble(self.ms_dims.pixels(), &columns))
    }

    fn check_pixel_rows(&self, context: &'static str, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.ms_dims.pixels() {
            return Err(Error::dimension(
                context,
                format!("{} pixel rows for dims {}", self.ms_dims.pixels(), self.ms_dims),
                format!("{} rows", x.nrows()),
            ));
        }
        Ok(())
    }
}

/// Applies a spectral response on the band side: `X R`.
pub fn apply_r(x: &DMatrix<f64>, response: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != response.nrows() {
        return Err(Error::dimension(
            "apply_r",
            format!("{} bands", response.nrows()),
            format!("{} bands", x.ncols()),
        ));
    }
    Ok(x * response)
}

/// Box-average spectral response: `groups` contiguous, equally sized groups
/// of input bands, each averaged into one output band.
pub fn box_response(hs_bands: usize, groups: usize) -> Result<DMatrix<f64>> {
    if groups == 0 || hs_bands == 0 {
        return Err(Error::Parameter("band counts must be positive".into()));
    }
    if hs_bands % groups != 0 {
        return Err(Error::Parameter(format!(
            "box response needs {groups} to divide {hs_bands} bands evenly"
        )));
    }
    let size = hs_bands / groups;
    let mut r = DMatrix::zeros(hs_bands, groups);
    for g in 0..groups {
        for i in 0..size {
            r[(g * size + i, g)] = 1.0 / size as f64;
        }
    }
    Ok(r)
}

// --- serialization -------------------------------------------------------

/// JSON-facing description of a [`ForwardModel`]. Spatial dims and the
/// hyperspectral band count come from the data the model is applied to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `"starck"` or `"gauss"`.
    pub blur: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    pub decimation: usize,
    pub lambda: f64,
    pub response: ResponseSpec,
}

/// Spectral response in a config file: an explicit matrix (rows = input
/// bands), or one of the named forms `"box:K"` / `"identity"`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ResponseSpec {
    Named(String),
    Matrix(Vec<Vec<f64>>),
}

impl ResponseSpec {
    /// Expands into a dense matrix, given the input band count.
    pub fn resolve(&self, hs_bands: usize) -> Result<DMatrix<f64>> {
        match self {
            ResponseSpec::Matrix(rows) => {
                if rows.is_empty() || rows[0].is_empty() {
                    return Err(Error::Parameter("response matrix must be nonempty".into()));
                }
                let ncols = rows[0].len();
                if rows.iter().any(|r| r.len() != ncols) {
                    return Err(Error::Parameter(
                        "response matrix rows have unequal lengths".into(),
                    ));
                }
                if rows.len() != hs_bands {
                    return Err(Error::dimension(
                        "ResponseSpec::resolve",
                        format!("{hs_bands} response rows"),
                        format!("{} rows", rows.len()),
                    ));
                }
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                Ok(DMatrix::from_row_slice(hs_bands, ncols, &flat))
            }
            ResponseSpec::Named(name) => {
                if name == "identity" {
                    return Ok(DMatrix::identity(hs_bands, hs_bands));
                }
                if let Some(arg) = name.strip_prefix("box:") {
                    let groups: usize = arg.parse().map_err(|_| {
                        Error::Parameter(format!("bad box response spec {name:?}"))
                    })?;
                    return box_response(hs_bands, groups);
                }
                Err(Error::Parameter(format!(
                    "unknown response spec {name:?}; expected \"identity\", \"box:K\", or a matrix"
                )))
            }
        }
    }
}

impl ModelConfig {
    /// Builds the model for a grid of `ms_dims` pixels and `hs_bands` input
    /// bands.
    pub fn build(&self, ms_dims: SpatialDims, hs_bands: usize) -> Result<ForwardModel> {
        let blur = match self.blur.as_str() {
            "starck" => BlurKind::StarckMurtagh,
            "gauss" => BlurKind::GaussianPsf {
                radius: self.radius.unwrap_or(7),
                std: self.std.unwrap_or(2.0),
            },
            other => {
                return Err(Error::Parameter(format!(
                    "unknown blur kind {other:?}; expected \"starck\" or \"gauss\""
                )))
            }
        };
        let response = self.response.resolve(hs_bands)?;
        ForwardModel::new(blur, self.decimation, response, self.lambda, ms_dims)
    }
}

// --- spatial kernels -----------------------------------------------------

/// Separable 2-D convolution with a symmetric kernel and circular boundary.
/// `field` is a row-major `dims` grid.
pub(crate) fn conv2_circular(field: &[f64], dims: SpatialDims, kernel: &[f64]) -> Vec<f64> {
    debug_assert_eq!(field.len(), dims.pixels());
    debug_assert_eq!(kernel.len() % 2, 1);
    let r = (kernel.len() / 2) as isize;
    let rows = dims.rows as isize;
    let cols = dims.cols as isize;

    // Pass along image columns (the x axis).
    let mut tmp = vec![0.0; field.len()];
    for row in 0..rows {
        for col in 0..cols {
            let mut acc = 0.0;
            for (ti, w) in kernel.iter().enumerate() {
                let cc = (col + ti as isize - r).rem_euclid(cols);
                acc += w * field[(row * cols + cc) as usize];
            }
            tmp[(row * cols + col) as usize] = acc;
        }
    }
    // Pass along image rows (the y axis).
    let mut out = vec![0.0; field.len()];
    for row in 0..rows {
        for col in 0..cols {
            let mut acc = 0.0;
            for (ti, w) in kernel.iter().enumerate() {
                let rr = (row + ti as isize - r).rem_euclid(rows);
                acc += w * tmp[(rr * cols + col) as usize];
            }
            out[(row * cols + col) as usize] = acc;
        }
    }
    out
}

/// Keeps pixels whose row and column indices are multiples of `factor`.
fn decimate(field: &[f64], dims: SpatialDims, factor: usize) -> Vec<f64> {
    let out_rows = dims.rows / factor;
    let out_cols = dims.cols / factor;
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for r in 0..out_rows {
        for c in 0..out_cols {
            out.push(field[dims.index(r * factor, c * factor)]);
        }
    }
    out
}

/// Adjoint of [`decimate`]: scatter values onto the fine grid, zeros elsewhere.
fn zero_insert(field: &[f64], hs_dims: SpatialDims, factor: usize) -> Vec<f64> {
    let full = SpatialDims::new(hs_dims.rows * factor, hs_dims.cols * factor);
    let mut out = vec![0.0; full.pixels()];
    for r in 0..hs_dims.rows {
        for c in 0..hs_dims.cols {
            out[full.index(r * factor, c * factor)] = field[hs_dims.index(r, c)];
        }
    }
    out
}

/// Maps `f` over the bands of `x` in parallel, preserving band order.
fn par_map_bands<F>(x: &DMatrix<f64>, f: F) -> Vec<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    (0..x.ncols())
        .into_par_iter()
        .map(|b| f(x.column(b).as_slice()))
        .collect()
}

fn assemble(pixel_count: usize, columns: &[Vec<f64>]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(pixel_count, columns.len());
    for (b, col) in columns.iter().enumerate() {
        out.column_mut(b).copy_from_slice(col);
    }
    out
}

// --- noise ---------------------------------------------------------------

/// Noise levels for simulated observations. `f64::INFINITY` means no noise.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub snr_h_db: f64,
    pub snr_m_db: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn noiseless(seed: u64) -> Self {
        NoiseSpec {
            snr_h_db: f64::INFINITY,
            snr_m_db: f64::INFINITY,
            seed,
        }
    }
}

// Distinct ChaCha streams keep the two observation noises and direct calls
// independent while staying jointly reproducible from one seed.
const STREAM_DIRECT: u64 = 0;
const STREAM_HS: u64 = 1;
const STREAM_MS: u64 = 2;
const STREAM_SCENE: u64 = 3;

fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn add_noise_stream(
    x: &DMatrix<f64>,
    snr_db: f64,
    seed: u64,
    stream: u64,
) -> Result<DMatrix<f64>> {
    if snr_db == f64::INFINITY {
        return Ok(x.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::Parameter(format!(
            "SNR must be finite or +inf, got {snr_db}"
        )));
    }
    let energy: f64 = x.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::UndefinedSnr);
    }
    let n = (x.nrows() * x.ncols()) as f64;
    let sigma = (energy / (n * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut rng = seeded_rng(seed, stream);
    let mut out = x.clone();
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += sigma * z;
    }
    Ok(out)
}

/// Adds white Gaussian noise scaled so the result has the requested SNR in dB
/// (in expectation). Deterministic per seed; `+inf` returns the input as is.
pub fn add_noise(x: &DMatrix<f64>, snr_db: f64, seed: u64) -> Result<DMatrix<f64>> {
    add_noise_stream(x, snr_db, seed, STREAM_DIRECT)
}

/// Pushes a ground-truth scene through the model, producing the decimated
/// hyperspectral observation and the band-mixed multispectral observation,
/// each with its own noise stream.
pub fn simulate_observations(
    z: &HsiImage,
    model: &ForwardModel,
    noise: &NoiseSpec,
) -> Result<(HsiImage, HsiImage)> {
    if z.dims() != model.ms_dims {
        return Err(Error::dimension(
            "simulate_observations",
            model.ms_dims.to_string(),
            z.dims().to_string(),
        ));
    }
    if z.bands() != model.hs_bands() {
        return Err(Error::dimension(
            "simulate_observations",
            format!("{} bands", model.hs_bands()),
            format!("{} bands", z.bands()),
        ));
    }
    let y_h_clean = model.apply_a(z.data())?;
    let y_m_clean = apply_r(z.data(), &model.response)?;
    let y_h = add_noise_stream(&y_h_clean, noise.snr_h_db, noise.seed, STREAM_HS)?;
    let y_m = add_noise_stream(&y_m_clean, noise.snr_m_db, noise.seed, STREAM_MS)?;
    Ok((
        HsiImage::new(model.hs_dims(), y_h)?,
        HsiImage::new(model.ms_dims, y_m)?,
    ))
}

/// Generates a smooth strictly positive scene of the given spectral rank:
/// a sum of `rank` outer products of low-pass-filtered random spatial fields
/// with random nonnegative spectral signatures, rescaled into `(0, 1]`.
pub fn generate_scene(
    dims: SpatialDims,
    bands: usize,
    rank: usize,
    seed: u64,
) -> Result<HsiImage> {
    if rank == 0 || rank > bands.min(dims.pixels()) {
        return Err(Error::Parameter(format!(
            "scene rank must be in 1..={}, got {rank}",
            bands.min(dims.pixels())
        )));
    }
    let mut rng = seeded_rng(seed, STREAM_SCENE);
    let smooth_std = (dims.rows.min(dims.cols) as f64 / 8.0).max(1.0);
    let smooth = BlurKind::GaussianPsf {
        radius: (3.0 * smooth_std).ceil() as usize,
        std: smooth_std,
    };
    let kernel = smooth.kernel();

    let mut data = DMatrix::zeros(dims.pixels(), bands);
    for _ in 0..rank {
        let white: Vec<f64> = (0..dims.pixels())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let smooth_field = conv2_circular(&white, dims, &kernel);
        let lo = smooth_field.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = smooth_field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi - lo > 1e-300 { hi - lo } else { 1.0 };
        // Keep fields bounded away from zero so the scene stays strictly
        // positive for any rank.
        let field: Vec<f64> = smooth_field
            .iter()
            .map(|v| 0.05 + 0.95 * (v - lo) / span)
            .collect();
        let signature: Vec<f64> = (0..bands).map(|_| 0.2 + 0.8 * rng.random::<f64>()).collect();
        for b in 0..bands {
            for (i, f) in field.iter().enumerate() {
                data[(i, b)] += f * signature[b];
            }
        }
    }
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    data /= max;
    HsiImage::new(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsi::h_norm;
    use approx::assert_relative_eq;

    fn unit_model(dims: SpatialDims, bands: usize) -> ForwardModel {
        ForwardModel::new(
            BlurKind::GaussianPsf { radius: 0, std: 1.0 },
            1,
            DMatrix::identity(bands, bands),
            1.0,
            dims,
        )
        .unwrap()
    }

    fn starck_model(dims: SpatialDims, d: usize, bands: usize) -> ForwardModel {
        ForwardModel::new(
            BlurKind::StarckMurtagh,
            d,
            DMatrix::identity(bands, bands),
            1.0,
            dims,
        )
        .unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = seeded_rng(seed, 99);
        DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Dense `A = S B` built directly from the kernel definition, as an
    /// independent reference for the operator implementation.
    fn dense_a(model: &ForwardModel) -> DMatrix<f64> {
        let kernel = model.blur.kernel();
        let r = (kernel.len() / 2) as isize;
        let circulant = |n: usize| {
            let mut m = DMatrix::zeros(n, n);
            for i in 0..n as isize {
                for (ti, w) in kernel.iter().enumerate() {
                    let j = (i + ti as isize - r).rem_euclid(n as isize);
                    m[(i as usize, j as usize)] += w;
                }
            }
            m
        };
        let br = circulant(model.ms_dims.rows);
        let bc = circulant(model.ms_dims.cols);
        let b2d = br.kronecker(&bc);
        let hs = model.hs_dims();
        let d = model.decimation;
        let mut a = DMatrix::zeros(hs.pixels(), model.ms_dims.pixels());
        for rr in 0..hs.rows {
            for cc in 0..hs.cols {
                let out_idx = hs.index(rr, cc);
                let in_idx = model.ms_dims.index(rr * d, cc * d);
                a.row_mut(out_idx).copy_from(&b2d.row(in_idx));
            }
        }
        a
    }

    #[test]
    fn starck_kernel_taps() {
        let k = BlurKind::StarckMurtagh.kernel();
        assert_eq!(k, vec![0.0625, 0.25, 0.375, 0.25, 0.0625]);
    }

    #[test]
    fn gaussian_kernel_is_symmetric_and_normalized() {
        let k = BlurKind::GaussianPsf { radius: 7, std: 2.0 }.kernel();
        assert_eq!(k.len(), 15);
        for t in 0..7 {
            assert_eq!(k[t], k[14 - t]);
        }
        assert_eq!(k.iter().sum::<f64>(), 1.0);
        assert!(k.iter().all(|v| *v > 0.0));
        // Monotone decay away from the center.
        for t in 7..14 {
            assert!(k[t] > k[t + 1]);
        }
    }

    #[test]
    fn blur_of_interior_impulse_stamps_the_kernel() {
        let dims = SpatialDims::new(8, 8);
        let model = starck_model(dims, 1, 1);
        let mut x = DMatrix::zeros(64, 1);
        x[(dims.index(3, 4), 0)] = 1.0;
        let y = model.apply_a(&x).unwrap();
        let k = BlurKind::StarckMurtagh.kernel();
        for dr in -2i64..=2 {
            for dc in -2i64..=2 {
                let idx = dims.index((3 + dr) as usize, (4 + dc) as usize);
                let expected = k[(dr + 2) as usize] * k[(dc + 2) as usize];
                assert_relative_eq!(y[(idx, 0)], expected, epsilon = 1e-15);
            }
        }
        assert_relative_eq!(y.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn blur_of_corner_impulse_wraps_circularly() {
        let dims = SpatialDims::new(6, 6);
        let model = starck_model(dims, 1, 1);
        let mut x = DMatrix::zeros(36, 1);
        x[(dims.index(0, 0), 0)] = 1.0;
        let y = model.apply_a(&x).unwrap();
        let k = BlurKind::StarckMurtagh.kernel();
        for dr in -2i64..=2 {
            for dc in -2i64..=2 {
                let rr = dr.rem_euclid(6) as usize;
                let cc = dc.rem_euclid(6) as usize;
                let expected = k[(dr + 2) as usize] * k[(dc + 2) as usize];
                assert_relative_eq!(y[(dims.index(rr, cc), 0)], expected, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let dims = SpatialDims::new(7, 5);
        for model in [
            starck_model(dims, 1, 2),
            ForwardModel::new(
                BlurKind::GaussianPsf { radius: 3, std: 1.3 },
                1,
                DMatrix::identity(2, 2),
                1.0,
                dims,
            )
            .unwrap(),
        ] {
            let x = DMatrix::from_element(35, 2, 0.7);
            let y = model.apply_blur(&x).unwrap();
            for v in y.iter() {
                assert_relative_eq!(*v, 0.7, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn operator_matches_dense_construction() {
        let dims = SpatialDims::new(8, 8);
        for model in [
            starck_model(dims, 4, 2),
            ForwardModel::new(
                BlurKind::GaussianPsf { radius: 2, std: 1.0 },
                2,
                DMatrix::identity(2, 2),
                1.0,
                dims,
            )
            .unwrap(),
        ] {
            let a = dense_a(&model);
            let x = random_matrix(64, 2, 7);
            let fast = model.apply_a(&x).unwrap();
            let slow = &a * &x;
            assert_relative_eq!(
                h_norm(&(fast - slow)),
                0.0,
                epsilon = 1e-12
            );
            // Adjoint against the dense transpose as well.
            let y = random_matrix(a.nrows(), 2, 8);
            let fast_t = model.apply_a_adjoint(&y).unwrap();
            let slow_t = a.transpose() * &y;
            assert_relative_eq!(h_norm(&(fast_t - slow_t)), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn adjoint_identity_holds() {
        let dims = SpatialDims::new(12, 8);
        let model = starck_model(dims, 4, 3);
        for seed in 0..10u64 {
            let x = random_matrix(dims.pixels(), 3, seed);
            let y = random_matrix(model.hs_dims().pixels(), 3, seed + 100);
            let ax = model.apply_a(&x).unwrap();
            let aty = model.apply_a_adjoint(&y).unwrap();
            let lhs = crate::hsi::inner_product(&ax, &y).unwrap();
            let rhs = crate::hsi::inner_product(&x, &aty).unwrap();
            assert_relative_eq!(lhs, rhs, epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn zero_in_zero_out() {
        let dims = SpatialDims::new(8, 8);
        let model = starck_model(dims, 2, 2);
        let y = model.apply_a(&DMatrix::zeros(64, 2)).unwrap();
        assert_eq!(y, DMatrix::zeros(16, 2));
    }

    #[test]
    fn positive_images_stay_positive() {
        let dims = SpatialDims::new(8, 8);
        let model = starck_model(dims, 4, 2);
        let mut rng = seeded_rng(5, 98);
        let x = DMatrix::from_fn(64, 2, |_, _| 0.01 + rng.random::<f64>());
        let y = model.apply_a(&x).unwrap();
        assert!(y.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn spectral_response_application() {
        let r = box_response(6, 2).unwrap();
        assert_eq!(r.nrows(), 6);
        assert_eq!(r.ncols(), 2);
        for col in r.column_iter() {
            assert_relative_eq!(col.sum(), 1.0);
        }
        let x = DMatrix::from_row_slice(2, 6, &[
            1.0, 2.0, 3.0, 4.0, 5.0, 6.0,
            0.0, 0.0, 3.0, 3.0, 3.0, 3.0,
        ]);
        let y = apply_r(&x, &r).unwrap();
        assert_relative_eq!(y[(0, 0)], 2.0);
        assert_relative_eq!(y[(0, 1)], 5.0);
        assert_relative_eq!(y[(1, 0)], 1.0);
        assert_relative_eq!(y[(1, 1)], 3.0);
    }

    #[test]
    fn box_response_rejects_uneven_groups() {
        assert!(box_response(7, 2).is_err());
        assert!(box_response(6, 0).is_err());
    }

    #[test]
    fn model_rejects_bad_configs() {
        let dims = SpatialDims::new(8, 8);
        let eye = DMatrix::identity(3, 3);
        // Non-dividing decimation.
        assert!(ForwardModel::new(BlurKind::StarckMurtagh, 3, eye.clone(), 1.0, dims).is_err());
        // Negative lambda.
        assert!(ForwardModel::new(BlurKind::StarckMurtagh, 2, eye.clone(), -0.5, dims).is_err());
        // Response with an all-zero column.
        let mut bad = eye.clone();
        bad.column_mut(1).fill(0.0);
        assert!(ForwardModel::new(BlurKind::StarckMurtagh, 2, bad, 1.0, dims).is_err());
        // Negative response entry.
        let mut neg = eye;
        neg[(0, 0)] = -1.0;
        assert!(ForwardModel::new(BlurKind::StarckMurtagh, 2, neg, 1.0, dims).is_err());
        // Bad gaussian std.
        assert!(ForwardModel::new(
            BlurKind::GaussianPsf { radius: 2, std: 0.0 },
            2,
            DMatrix::identity(3, 3),
            1.0,
            dims
        )
        .is_err());
    }

    #[test]
    fn blur_operator_norm_is_at_most_one() {
        // sigma_max(A) <= 1 because S selects rows of the doubly stochastic B.
        let dims = SpatialDims::new(8, 8);
        for model in [
            starck_model(dims, 2, 1),
            ForwardModel::new(
                BlurKind::GaussianPsf { radius: 3, std: 1.5 },
                4,
                DMatrix::identity(1, 1),
                1.0,
                dims,
            )
            .unwrap(),
        ] {
            let a = dense_a(&model);
            let sigma = a.svd(false, false).singular_values[0];
            assert!(sigma <= 1.0 + 1e-9, "sigma_max(A) = {sigma}");
        }
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let x = random_matrix(50, 3, 11);
        let a = add_noise(&x, 20.0, 42).unwrap();
        let b = add_noise(&x, 20.0, 42).unwrap();
        let c = add_noise(&x, 20.0, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn infinite_snr_is_a_no_op() {
        let x = random_matrix(10, 2, 3);
        let y = add_noise(&x, f64::INFINITY, 7).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn noise_on_zero_signal_is_rejected() {
        let x = DMatrix::zeros(10, 2);
        assert!(matches!(add_noise(&x, 20.0, 0), Err(Error::UndefinedSnr)));
    }

    #[test]
    fn empirical_snr_is_close_to_requested() {
        let x = DMatrix::from_element(100, 100, 0.5);
        let noisy = add_noise(&x, 20.0, 123).unwrap();
        let noise = &noisy - &x;
        let snr = 10.0 * (h_norm(&x).powi(2) / h_norm(&noise).powi(2)).log10();
        assert!((snr - 20.0).abs() < 0.5, "empirical SNR {snr}");
    }

    #[test]
    fn observation_shapes_follow_the_model() {
        let dims = SpatialDims::new(16, 16);
        let z = generate_scene(dims, 8, 3, 1).unwrap();
        let model = ForwardModel::new(
            BlurKind::StarckMurtagh,
            4,
            box_response(8, 4).unwrap(),
            1.0,
            dims,
        )
        .unwrap();
        let (y_h, y_m) = simulate_observations(&z, &model, &NoiseSpec {
            snr_h_db: 20.0,
            snr_m_db: 20.0,
            seed: 0,
        })
        .unwrap();
        assert_eq!(y_h.dims(), SpatialDims::new(4, 4));
        assert_eq!(y_h.bands(), 8);
        assert_eq!(y_m.dims(), dims);
        assert_eq!(y_m.bands(), 4);
    }

    #[test]
    fn noiseless_identity_model_reproduces_the_scene() {
        let dims = SpatialDims::new(6, 6);
        let z = generate_scene(dims, 4, 2, 9).unwrap();
        let model = unit_model(dims, 4);
        let (y_h, y_m) = simulate_observations(&z, &model, &NoiseSpec::noiseless(0)).unwrap();
        assert_eq!(y_h.data(), z.data());
        assert_eq!(y_m.data(), z.data());
    }

    #[test]
    fn observation_noise_streams_differ() {
        let dims = SpatialDims::new(8, 8);
        let z = generate_scene(dims, 4, 2, 17).unwrap();
        let model = unit_model(dims, 4);
        let noise = NoiseSpec { snr_h_db: 20.0, snr_m_db: 20.0, seed: 5 };
        let (y_h, y_m) = simulate_observations(&z, &model, &noise).unwrap();
        // Same shapes here by construction, so the streams must decorrelate
        // the two observations.
        assert_ne!(y_h.data(), y_m.data());
        // And a rerun is byte-identical.
        let (y_h2, y_m2) = simulate_observations(&z, &model, &noise).unwrap();
        assert_eq!(y_h.data(), y_h2.data());
        assert_eq!(y_m.data(), y_m2.data());
    }

    #[test]
    fn scene_is_deterministic_and_in_range() {
        let dims = SpatialDims::new(12, 10);
        let a = generate_scene(dims, 6, 3, 42).unwrap();
        let b = generate_scene(dims, 6, 3, 42).unwrap();
        let c = generate_scene(dims, 6, 3, 43).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
        assert!(a.data().iter().all(|v| *v > 0.0 && *v <= 1.0));
        assert_relative_eq!(a.data().max(), 1.0);
    }

    #[test]
    fn scene_rank_is_exact() {
        let dims = SpatialDims::new(10, 10);
        for rank in [1usize, 3, 5] {
            let z = generate_scene(dims, 8, rank, 7).unwrap();
            let svals = z.data().clone().svd(false, false).singular_values;
            assert!(
                svals[rank] < 1e-10 * svals[0],
                "rank {rank}: sigma_{} = {}",
                rank + 1,
                svals[rank]
            );
            assert!(svals[rank - 1] > 1e-6 * svals[0]);
        }
    }

    #[test]
    fn config_round_trip_and_named_responses() {
        let cfg: ModelConfig = serde_json::from_str(
            r#"{"blur":"gauss","radius":2,"std":1.5,"decimation":2,"lambda":0.5,
                "response":"box:2"}"#,
        )
        .unwrap();
        let model = cfg.build(SpatialDims::new(8, 8), 6).unwrap();
        assert_eq!(model.ms_bands(), 2);
        assert_eq!(model.blur, BlurKind::GaussianPsf { radius: 2, std: 1.5 });
        assert_eq!(model.lambda, 0.5);

        let cfg2: ModelConfig = serde_json::from_str(
            r#"{"blur":"starck","decimation":1,"lambda":1.0,
                "response":[[1.0,0.0],[0.0,1.0],[0.5,0.5]]}"#,
        )
        .unwrap();
        let model2 = cfg2.build(SpatialDims::new(4, 4), 3).unwrap();
        assert_eq!(model2.response[(2, 1)], 0.5);

        let identity: ModelConfig = serde_json::from_str(
            r#"{"blur":"starck","decimation":1,"lambda":1.0,"response":"identity"}"#,
        )
        .unwrap();
        let m3 = identity.build(SpatialDims::new(4, 4), 3).unwrap();
        assert_eq!(m3.response, DMatrix::identity(3, 3));

        // Serialization keeps the named form.
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"box:2\""));

        // Unknown names and bad matrices are config errors.
        let bad: ModelConfig = serde_json::from_str(
            r#"{"blur":"starck","decimation":1,"lambda":1.0,"response":"boxcar"}"#,
        )
        .unwrap();
        assert!(bad.build(SpatialDims::new(4, 4), 3).is_err());
    }
}

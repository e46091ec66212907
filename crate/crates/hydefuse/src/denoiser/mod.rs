//! Kernel denoisers built from a fixed guide image.
//!
//! Two symmetrized kernel filters are provided, both derived from patches of
//! the guide rather than of the iterate, which keeps them linear operators:
//!
//! * the clustered high-dimensional filter `W`: patch vectors spanning all
//!   guide bands are summarized by k-means centroids, each pixel gets a
//!   feature vector of RBF responses to the centroids, and the kernel weight
//!   between two pixels is the dot product of their features masked by a
//!   spatial tent window. One `N x N` matrix acts on every band.
//! * the bandwise filter `V`: classic nonlocal weights from single-band
//!   patch differences under the same tent window, one matrix per band.
//!
//! Raw kernels are turned into doubly-substochastic-plus-diagonal smoothers
//! by the same normalization: with `D = diag(K 1)`, `e_hat = D^-1/2 K D^-1/2 1`
//! and `nu = max(e_hat)`, the filter is
//! `(1/nu) D^-1/2 K D^-1/2 + diag(1 - e_hat/nu)`.
//! That construction is symmetric, positive semidefinite, row-stochastic and
//! irreducible for window >= 2, which is exactly what the contraction
//! analysis in [`crate::spectral`] requires. The cascade applies `W` first
//! and `V` second.

mod kmeans;

pub use kmeans::cluster_patches;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hsi::{reflect_index, HsiImage, SpatialDims};

/// Dense materialization is quadratic in pixels; refuse beyond this.
pub const DENSE_PIXEL_CAP: usize = 4096;

/// Floor on RBF feature values. Keeps every kernel row sum strictly positive
/// even when a patch sits far from all centroids and the exponentials
/// underflow; applied to the feature entries themselves so the kernel stays
/// a Gram matrix (hence positive semidefinite).
const FEATURE_FLOOR: f64 = 1e-15;

/// Parameters shared by both filters.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    /// Patch side length (odd).
    pub patch_size: usize,
    /// Half-width of the spatial tent window; weights vanish at offset
    /// `window` and beyond, so `window = 1` makes the filters identities.
    pub window: usize,
    /// RBF bandwidth for the high-dimensional filter's cluster features.
    pub sigma_w: f64,
    /// RBF bandwidth for the bandwise filter's patch differences.
    pub sigma_v: f64,
    /// Number of k-means clusters for the high-dimensional filter (capped at
    /// the pixel count).
    pub clusters: usize,
    /// Seed for the clustering.
    pub seed: u64,
}

impl Default for DenoiserParams {
    fn default() -> Self {
        DenoiserParams {
            patch_size: 3,
            window: 5,
            sigma_w: 0.039,
            sigma_v: 0.039,
            clusters: 32,
            seed: 0,
        }
    }
}

impl DenoiserParams {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return Err(Error::Parameter(format!(
                "patch size must be odd and positive, got {}",
                self.patch_size
            )));
        }
        if self.window == 0 {
            return Err(Error::Parameter("window half-width must be >= 1".into()));
        }
        for (name, sigma) in [("sigma_w", self.sigma_w), ("sigma_v", self.sigma_v)] {
            if !(sigma > 0.0) || !sigma.is_finite() {
                return Err(Error::Parameter(format!(
                    "{name} must be a positive finite number, got {sigma}"
                )));
            }
        }
        if self.clusters == 0 {
            return Err(Error::Parameter("cluster count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which filter(s) a [`KernelDenoiser`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiserKind {
    /// Bandwise filter `V` only.
    Bandwise,
    /// High-dimensional clustered filter `W` only.
    HighDim,
    /// `V` after `W`.
    Cascade,
}

/// Normalization vectors turning a raw kernel into the smoothing filter.
struct Normalization {
    d_inv_sqrt: Vec<f64>,
    diag_corr: Vec<f64>,
    inv_nu: f64,
}

struct HighDimState {
    /// `N x C` RBF responses to the cluster centroids.
    features: DMatrix<f64>,
    norm: Normalization,
}

/// Per-band state of the bandwise filter.
struct BandFilter {
    /// Row-major `N x patch_len` patch table for this band.
    table: Vec<f64>,
    patch_len: usize,
    norm: Normalization,
}

/// Linear denoiser fixed at construction time from a guide image.
pub struct KernelDenoiser {
    kind: DenoiserKind,
    dims: SpatialDims,
    bands: usize,
    params: DenoiserParams,
    high: Option<HighDimState>,
    bandwise: Option<Vec<BandFilter>>,
}

impl KernelDenoiser {
    /// Builds the high-dimensional clustered filter.
    pub fn build_w(guide: &HsiImage, params: &DenoiserParams) -> Result<Self> {
        params.validate()?;
        Ok(KernelDenoiser {
            kind: DenoiserKind::HighDim,
            dims: guide.dims(),
            bands: guide.bands(),
            high: Some(build_high_state(guide, params)?),
            bandwise: None,
            params: params.clone(),
        })
    }

    /// Builds the bandwise filter.
    pub fn build_v(guide: &HsiImage, params: &DenoiserParams) -> Result<Self> {
        params.validate()?;
        Ok(KernelDenoiser {
            kind: DenoiserKind::Bandwise,
            dims: guide.dims(),
            bands: guide.bands(),
            high: None,
            bandwise: Some(build_bandwise_state(guide, params)),
            params: params.clone(),
        })
    }

    /// Builds the cascade (high-dimensional filter followed by the bandwise
    /// one) from a single guide.
    pub fn build_cascade(guide: &HsiImage, params: &DenoiserParams) -> Result<Self> {
        params.validate()?;
        Ok(KernelDenoiser {
            kind: DenoiserKind::Cascade,
            dims: guide.dims(),
            bands: guide.bands(),
            high: Some(build_high_state(guide, params)?),
            bandwise: Some(build_bandwise_state(guide, params)),
            params: params.clone(),
        })
    }

    pub fn kind(&self) -> DenoiserKind {
        self.kind
    }

    pub fn dims(&self) -> SpatialDims {
        self.dims
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn params(&self) -> &DenoiserParams {
        &self.params
    }

    fn check_shape(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.dims.pixels() || x.ncols() != self.bands {
            return Err(Error::dimension(
                "KernelDenoiser::apply",
                format!("{}x{}", self.dims.pixels(), self.bands),
                format!("{}x{}", x.nrows(), x.ncols()),
            ));
        }
        Ok(())
    }

    /// Applies the denoiser. Linear in `x`; for the cascade this is the
    /// high-dimensional filter followed by the bandwise one.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_shape(x)?;
        match self.kind {
            DenoiserKind::HighDim => Ok(self.apply_high(x)),
            DenoiserKind::Bandwise => Ok(self.apply_bandwise(x)),
            DenoiserKind::Cascade => Ok(self.apply_bandwise(&self.apply_high(x))),
        }
    }

    /// Adjoint of [`KernelDenoiser::apply`]. The single filters are
    /// self-adjoint; the cascade's adjoint swaps the order.
    pub fn apply_adjoint(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_shape(x)?;
        match self.kind {
            DenoiserKind::HighDim => Ok(self.apply_high(x)),
            DenoiserKind::Bandwise => Ok(self.apply_bandwise(x)),
            DenoiserKind::Cascade => Ok(self.apply_high(&self.apply_bandwise(x))),
        }
    }

    fn apply_high(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let st = self.high.as_ref().expect("high-dim state present");
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        // Bands share one matrix; clusters parallelize inside high_k_apply.
        for b in 0..x.ncols() {
            let col = apply_normalized(&st.norm, x.column(b).as_slice(), |v| {
                high_k_apply(&st.features, self.dims, self.params.window, v)
            });
            out.column_mut(b).copy_from_slice(&col);
        }
        out
    }

    fn apply_bandwise(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let filters = self.bandwise.as_ref().expect("bandwise state present");
        let columns: Vec<Vec<f64>> = (0..x.ncols())
            .into_par_iter()
            .map(|b| {
                let bf = &filters[b];
                apply_normalized(&bf.norm, x.column(b).as_slice(), |v| {
                    band_k_apply(bf, self.dims, self.params.window, self.params.sigma_v, v)
                })
            })
            .collect();
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for (b, col) in columns.iter().enumerate() {
            out.column_mut(b).copy_from_slice(col);
        }
        out
    }

    /// Materializes the filter as explicit matrices, built entry by entry
    /// from the kernel formula rather than through the fast apply path, so
    /// tests can cross-check the two routes. For the cascade the result is
    /// the per-band products `V_b W`.
    pub fn dense_materialize(&self) -> Result<DenseDenoiser> {
        let n = self.dims.pixels();
        if n > DENSE_PIXEL_CAP {
            return Err(Error::Capacity(format!(
                "dense materialization needs {n} x {n}; cap is {DENSE_PIXEL_CAP} pixels"
            )));
        }
        match self.kind {
            DenoiserKind::HighDim => Ok(DenseDenoiser::Single(self.dense_high())),
            DenoiserKind::Bandwise => Ok(DenseDenoiser::PerBand(self.dense_bands())),
            DenoiserKind::Cascade => {
                let w = self.dense_high();
                let per_band = self
                    .dense_bands()
                    .into_iter()
                    .map(|v_b| v_b * &w)
                    .collect();
                Ok(DenseDenoiser::PerBand(per_band))
            }
        }
    }

    fn dense_high(&self) -> DMatrix<f64> {
        let st = self.high.as_ref().expect("high-dim state present");
        let n = self.dims.pixels();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let h = tent_weight(self.dims, i, j, self.params.window);
                if h == 0.0 {
                    continue;
                }
                let dot: f64 = st
                    .features
                    .row(i)
                    .iter()
                    .zip(st.features.row(j).iter())
                    .map(|(a, b)| a * b)
                    .sum();
                k[(i, j)] = h * dot;
            }
        }
        normalize_dense(k)
    }

    fn dense_bands(&self) -> Vec<DMatrix<f64>> {
        let filters = self.bandwise.as_ref().expect("bandwise state present");
        let n = self.dims.pixels();
        let inv_two_sigma2 = 1.0 / (2.0 * self.params.sigma_v * self.params.sigma_v);
        filters
            .iter()
            .map(|bf| {
                let mut k = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        let h = tent_weight(self.dims, i, j, self.params.window);
                        if h == 0.0 {
                            continue;
                        }
                        let pi = &bf.table[i * bf.patch_len..(i + 1) * bf.patch_len];
                        let pj = &bf.table[j * bf.patch_len..(j + 1) * bf.patch_len];
                        let d2: f64 = pi
                            .iter()
                            .zip(pj)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        k[(i, j)] = h * (-d2 * inv_two_sigma2).exp();
                    }
                }
                normalize_dense(k)
            })
            .collect()
    }
}

/// Dense form of a denoiser: one matrix, or one per band.
pub enum DenseDenoiser {
    Single(DMatrix<f64>),
    PerBand(Vec<DMatrix<f64>>),
}

impl DenseDenoiser {
    /// Applies the dense matrices to a pixel-by-band matrix.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            DenseDenoiser::Single(w) => w * x,
            DenseDenoiser::PerBand(mats) => {
                let mut out = DMatrix::zeros(x.nrows(), x.ncols());
                for (b, m) in mats.iter().enumerate() {
                    let col = m * x.column(b);
                    out.column_mut(b).copy_from(&col);
                }
                out
            }
        }
    }
}

// --- construction helpers --------------------------------------------------

/// Extracts the patch table: row `i` is the vectorized `k x k` neighborhood
/// of pixel `i` across all bands (band-major, then row, then column), with
/// reflected boundaries.
pub fn extract_patches(guide: &HsiImage, patch_size: usize) -> Result<DMatrix<f64>> {
    if patch_size == 0 || patch_size % 2 == 0 {
        return Err(Error::Parameter(format!(
            "patch size must be odd and positive, got {patch_size}"
        )));
    }
    let n = guide.pixel_count();
    let k2 = patch_size * patch_size;
    let mut out = DMatrix::zeros(n, guide.bands() * k2);
    for b in 0..guide.bands() {
        let table = band_patch_table(guide, b, patch_size);
        for i in 0..n {
            for p in 0..k2 {
                out[(i, b * k2 + p)] = table[i * k2 + p];
            }
        }
    }
    Ok(out)
}

/// Row-major `N x k^2` patch table for one band, reflected boundaries.
fn band_patch_table(guide: &HsiImage, band: usize, patch_size: usize) -> Vec<f64> {
    let dims = guide.dims();
    let h = (patch_size / 2) as isize;
    let k2 = patch_size * patch_size;
    let mut table = vec![0.0; dims.pixels() * k2];
    for r in 0..dims.rows {
        for c in 0..dims.cols {
            let base = dims.index(r, c) * k2;
            let mut p = 0;
            for dr in -h..=h {
                let rr = reflect_index(r as isize + dr, dims.rows);
                for dc in -h..=h {
                    let cc = reflect_index(c as isize + dc, dims.cols);
                    table[base + p] = guide.at(rr, cc, band);
                    p += 1;
                }
            }
        }
    }
    table
}

fn build_high_state(guide: &HsiImage, params: &DenoiserParams) -> Result<HighDimState> {
    let n = guide.pixel_count();
    let patches = extract_patches(guide, params.patch_size)?;
    let clusters = params.clusters.min(n);
    let centroids = cluster_patches(&patches, clusters, params.seed)?;
    let inv_two_sigma2 = 1.0 / (2.0 * params.sigma_w * params.sigma_w);
    let features = DMatrix::from_fn(n, clusters, |i, c| {
        let d2: f64 = patches
            .row(i)
            .iter()
            .zip(centroids.row(c).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (-d2 * inv_two_sigma2).exp().max(FEATURE_FLOOR)
    });
    let dims = guide.dims();
    let window = params.window;
    let norm = build_normalization(n, |v| high_k_apply(&features, dims, window, v))?;
    Ok(HighDimState { features, norm })
}

fn build_bandwise_state(guide: &HsiImage, params: &DenoiserParams) -> Vec<BandFilter> {
    let dims = guide.dims();
    let k2 = params.patch_size * params.patch_size;
    (0..guide.bands())
        .into_par_iter()
        .map(|b| {
            let table = band_patch_table(guide, b, params.patch_size);
            let bf = BandFilter {
                table,
                patch_len: k2,
                norm: Normalization {
                    d_inv_sqrt: Vec::new(),
                    diag_corr: Vec::new(),
                    inv_nu: 1.0,
                },
            };
            let norm = build_normalization(dims.pixels(), |v| {
                band_k_apply(&bf, dims, params.window, params.sigma_v, v)
            })
            .expect("bandwise kernel row sums are >= 1");
            BandFilter { norm, ..bf }
        })
        .collect()
}

/// Computes the normalization vectors for a raw kernel given only its apply
/// closure. `apply_k` must be the same routine later used by
/// [`apply_normalized`] so the stochasticity identity holds to rounding.
fn build_normalization<F>(n: usize, apply_k: F) -> Result<Normalization>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let d = apply_k(&vec![1.0; n]);
    if d.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Parameter(
            "kernel row sum vanished; guide or parameters degenerate".into(),
        ));
    }
    let d_inv_sqrt: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
    let k_dis = apply_k(&d_inv_sqrt);
    let e_hat: Vec<f64> = d_inv_sqrt.iter().zip(&k_dis).map(|(a, b)| a * b).collect();
    let nu = e_hat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let inv_nu = 1.0 / nu;
    let diag_corr: Vec<f64> = e_hat.iter().map(|v| 1.0 - v * inv_nu).collect();
    Ok(Normalization {
        d_inv_sqrt,
        diag_corr,
        inv_nu,
    })
}

/// Applies the normalized filter `(1/nu) D^-1/2 K D^-1/2 + diag-correction`
/// to one band vector.
fn apply_normalized<F>(norm: &Normalization, x: &[f64], apply_k: F) -> Vec<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let xs: Vec<f64> = norm.d_inv_sqrt.iter().zip(x).map(|(d, v)| d * v).collect();
    let k = apply_k(&xs);
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        out.push((norm.d_inv_sqrt[i] * k[i]) * norm.inv_nu + norm.diag_corr[i] * x[i]);
    }
    out
}

// --- kernel applications ----------------------------------------------------

/// Raw clustered kernel times a vector via the separable decomposition
/// `K x = sum_c f_c .* tent_conv(f_c .* x)`. Clusters run in parallel and are
/// reduced in index order, so results are bit-reproducible.
fn high_k_apply(
    features: &DMatrix<f64>,
    dims: SpatialDims,
    window: usize,
    x: &[f64],
) -> Vec<f64> {
    let n = dims.pixels();
    let partials: Vec<Vec<f64>> = (0..features.ncols())
        .into_par_iter()
        .map(|c| {
            let f = features.column(c);
            let masked: Vec<f64> = (0..n).map(|i| f[i] * x[i]).collect();
            let conv = tent_conv2(&masked, dims, window);
            (0..n).map(|i| f[i] * conv[i]).collect()
        })
        .collect();
    let mut out = vec![0.0; n];
    for partial in &partials {
        for (o, v) in out.iter_mut().zip(partial) {
            *o += *v;
        }
    }
    out
}

/// Raw bandwise kernel times a vector: direct windowed sums of tent-masked
/// RBF patch affinities.
fn band_k_apply(
    bf: &BandFilter,
    dims: SpatialDims,
    window: usize,
    sigma: f64,
    x: &[f64],
) -> Vec<f64> {
    let s = window as isize;
    let inv_s = 1.0 / window as f64;
    let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    let rows = dims.rows as isize;
    let cols = dims.cols as isize;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            let i = (r * cols + c) as usize;
            let pi = &bf.table[i * bf.patch_len..(i + 1) * bf.patch_len];
            let mut acc = 0.0;
            for dr in (1 - s)..s {
                let rr = r + dr;
                if rr < 0 || rr >= rows {
                    continue;
                }
                let wr = 1.0 - dr.abs() as f64 * inv_s;
                for dc in (1 - s)..s {
                    let cc = c + dc;
                    if cc < 0 || cc >= cols {
                        continue;
                    }
                    let wc = 1.0 - dc.abs() as f64 * inv_s;
                    let j = (rr * cols + cc) as usize;
                    let pj = &bf.table[j * bf.patch_len..(j + 1) * bf.patch_len];
                    let d2: f64 = pi
                        .iter()
                        .zip(pj)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    acc += (wr * wc) * (-d2 * inv_two_sigma2).exp() * x[j];
                }
            }
            out[i] = acc;
        }
    }
    out
}

/// Separable tent convolution with clipped (zero-padded) borders. The 1-D
/// taps are `1 - |o| / window` for `|o| < window`.
fn tent_conv2(field: &[f64], dims: SpatialDims, window: usize) -> Vec<f64> {
    let s = window as isize;
    let inv_s = 1.0 / window as f64;
    let rows = dims.rows as isize;
    let cols = dims.cols as isize;
    let mut tmp = vec![0.0; field.len()];
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for o in (1 - s)..s {
                let cc = c + o;
                if cc < 0 || cc >= cols {
                    continue;
                }
                acc += (1.0 - o.abs() as f64 * inv_s) * field[(r * cols + cc) as usize];
            }
            tmp[(r * cols + c) as usize] = acc;
        }
    }
    let mut out = vec![0.0; field.len()];
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for o in (1 - s)..s {
                let rr = r + o;
                if rr < 0 || rr >= rows {
                    continue;
                }
                acc += (1.0 - o.abs() as f64 * inv_s) * tmp[(rr * cols + c) as usize];
            }
            out[(r * cols + c) as usize] = acc;
        }
    }
    out
}

/// Tent weight between two pixels from their true grid positions; no
/// wraparound.
fn tent_weight(dims: SpatialDims, i: usize, j: usize, window: usize) -> f64 {
    let (ri, ci) = (i / dims.cols, i % dims.cols);
    let (rj, cj) = (j / dims.cols, j % dims.cols);
    let s = window as f64;
    let dr = (ri as f64 - rj as f64).abs();
    let dc = (ci as f64 - cj as f64).abs();
    (1.0 - dr / s).max(0.0) * (1.0 - dc / s).max(0.0)
}

/// Dense version of the symmetrizing normalization.
fn normalize_dense(k: DMatrix<f64>) -> DMatrix<f64> {
    let n = k.nrows();
    let d: Vec<f64> = (0..n).map(|i| k.row(i).sum()).collect();
    let dis: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            s[(i, j)] = dis[i] * k[(i, j)] * dis[j];
        }
    }
    let e_hat: Vec<f64> = (0..n).map(|i| s.row(i).sum()).collect();
    let nu = e_hat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w = s / nu;
    for i in 0..n {
        w[(i, i)] += 1.0 - e_hat[i] / nu;
    }
    w
}

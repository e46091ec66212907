//! Spectral subspace estimation and the latent/full-band change of basis.
//!
//! Hyperspectral scenes are strongly rank-deficient along the band axis, so
//! the solver works on latent coefficients `X` with `Z = X E` for a basis `E`
//! whose rows are orthonormal (`E E^T = I`). The basis is estimated from the
//! only spectrally complete observation available, the hyperspectral input,
//! after bicubic upsampling to the target grid. No mean is subtracted before
//! the decomposition: the basis must absorb constant bands too, because the
//! fixed-point analysis needs the latent representation of constants.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::hsi::{reflect_index, HsiImage, SpatialDims};

/// Orthonormal spectral basis: `dim` rows spanning a subspace of band space.
#[derive(Debug, Clone)]
pub struct Subspace {
    basis: DMatrix<f64>,
    singular_values: Vec<f64>,
}

/// Relative threshold under which a retained singular value counts as null.
const RANK_EPS: f64 = 1e-12;

impl Subspace {
    /// Wraps a basis matrix, checking row orthonormality.
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        if basis.nrows() == 0 || basis.nrows() > basis.ncols() {
            return Err(Error::Parameter(format!(
                "subspace needs 1..=L_h rows, got {}x{}",
                basis.nrows(),
                basis.ncols()
            )));
        }
        let gram = &basis * basis.transpose();
        let eye = DMatrix::identity(basis.nrows(), basis.nrows());
        let defect = (gram - eye).abs().max();
        if !(defect <= 1e-10) {
            return Err(Error::Parameter(format!(
                "subspace rows are not orthonormal (defect {defect:.3e})"
            )));
        }
        Ok(Subspace {
            basis,
            singular_values: Vec::new(),
        })
    }

    /// Latent dimension `L_s`.
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    /// Number of full bands `L_h`.
    pub fn full_bands(&self) -> usize {
        self.basis.ncols()
    }

    /// The `L_s x L_h` basis matrix `E`.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Singular values of the image the basis was estimated from (all of
    /// them, not only the retained ones). Empty for bases built directly
    /// from a matrix.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// True when fewer than `dim` directions carried energy, i.e. some
    /// retained rows span the estimation image's null space.
    pub fn is_rank_deficient(&self) -> bool {
        if self.singular_values.is_empty() {
            return false;
        }
        let top = self.singular_values[0];
        if top == 0.0 {
            return true;
        }
        self.singular_values
            .iter()
            .take(self.dim())
            .filter(|s| **s > RANK_EPS * top)
            .count()
            < self.dim()
    }

    /// Expands latent coefficients to full bands: `Z = X E`.
    pub fn to_full(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::dimension(
                "Subspace::to_full",
                format!("{} latent bands", self.dim()),
                format!("{} bands", x.ncols()),
            ));
        }
        Ok(x * &self.basis)
    }

    /// Projects full bands to latent coefficients: `X = Z E^T`.
    pub fn to_latent(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.ncols() != self.full_bands() {
            return Err(Error::dimension(
                "Subspace::to_latent",
                format!("{} full bands", self.full_bands()),
                format!("{} bands", z.ncols()),
            ));
        }
        Ok(z * self.basis.transpose())
    }

    /// Stores the basis as a single-band image (rows = `L_s`, cols = `L_h`)
    /// so it can travel in the same container as everything else.
    pub fn to_image(&self) -> HsiImage {
        let dims = SpatialDims::new(self.dim(), self.full_bands());
        let mut data = DMatrix::zeros(dims.pixels(), 1);
        for r in 0..self.dim() {
            for c in 0..self.full_bands() {
                data[(dims.index(r, c), 0)] = self.basis[(r, c)];
            }
        }
        HsiImage::new(dims, data).expect("basis entries are finite")
    }

    /// Inverse of [`Subspace::to_image`].
    pub fn from_image(img: &HsiImage) -> Result<Self> {
        if img.bands() != 1 {
            return Err(Error::Format(format!(
                "subspace container must have 1 band, found {}",
                img.bands()
            )));
        }
        let basis = DMatrix::from_fn(img.rows(), img.cols(), |r, c| img.at(r, c, 0));
        Subspace::new(basis)
    }
}

/// Estimates the spectral basis as the top right singular vectors of the
/// image matrix. Rows are sign-canonicalized (largest-magnitude entry made
/// positive) so the result is deterministic. When `l_s` exceeds the matrix
/// rank the trailing rows span the null space; [`Subspace::is_rank_deficient`]
/// reports that so callers can surface a warning.
pub fn estimate_subspace(y: &HsiImage, l_s: usize) -> Result<Subspace> {
    let n = y.pixel_count();
    let l_h = y.bands();
    if l_s == 0 || l_s > l_h.min(n) {
        return Err(Error::Parameter(format!(
            "subspace dim must be in 1..={}, got {l_s}",
            l_h.min(n)
        )));
    }
    let svd = y.data().clone().svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let mut basis = DMatrix::zeros(l_s, l_h);
    for r in 0..l_s {
        basis.row_mut(r).copy_from(&v_t.row(r));
    }
    canonicalize_row_signs(&mut basis);
    let mut sub = Subspace::new(basis)?;
    sub.singular_values = svd.singular_values.iter().cloned().collect();
    Ok(sub)
}

/// Flips each row so its largest-magnitude entry is positive; ties broken by
/// the first occurrence in scan order.
fn canonicalize_row_signs(basis: &mut DMatrix<f64>) {
    for mut row in basis.row_iter_mut() {
        let mut best = 0usize;
        let mut best_abs = f64::NEG_INFINITY;
        for (j, v) in row.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = j;
            }
        }
        if row[best] < 0.0 {
            row.neg_mut();
        }
    }
}

/// Bicubic upsampling by an integer factor with reflect boundary handling.
/// Pixel centers are aligned, so `factor = 1` is the identity.
pub fn upsample(y: &HsiImage, factor: usize) -> Result<HsiImage> {
    if factor == 0 {
        return Err(Error::Parameter("upsampling factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(y.clone());
    }
    let src = y.dims();
    let dst = src.scaled_up(factor);
    let mut data = DMatrix::zeros(dst.pixels(), y.bands());
    let f = factor as f64;
    // Precompute per-output-coordinate taps; they repeat with period `factor`
    // but grids are small enough that clarity wins over caching.
    let taps_for = |out: usize, n: usize| -> ([usize; 4], [f64; 4]) {
        let x = (out as f64 + 0.5) / f - 0.5;
        let i0 = x.floor();
        let t = x - i0;
        let i0 = i0 as isize;
        let idx = [
            reflect_index(i0 - 1, n),
            reflect_index(i0, n),
            reflect_index(i0 + 1, n),
            reflect_index(i0 + 2, n),
        ];
        (idx, cubic_weights(t))
    };
    for b in 0..y.bands() {
        for r_out in 0..dst.rows {
            let (ri, rw) = taps_for(r_out, src.rows);
            for c_out in 0..dst.cols {
                let (ci, cw) = taps_for(c_out, src.cols);
                let mut acc = 0.0;
                for (wr, row) in rw.iter().zip(ri.iter()) {
                    let mut line = 0.0;
                    for (wc, col) in cw.iter().zip(ci.iter()) {
                        line += wc * y.at(*row, *col, b);
                    }
                    acc += wr * line;
                }
                data[(dst.index(r_out, c_out), b)] = acc;
            }
        }
    }
    HsiImage::new(dst, data)
}

/// Catmull-Rom weights for the four samples around fractional offset `t`.
/// They sum to 1 and reproduce linear ramps exactly.
fn cubic_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

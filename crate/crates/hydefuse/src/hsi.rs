//! Core image container and the matrix inner product everything else is
//! phrased in.
//!
//! A hyperspectral image with `rows x cols` pixels and `L` bands is stored as
//! an `N x L` matrix, one column per band, with the spatial grid vectorized
//! row-major (pixel `(r, c)` sits at row `r * cols + c`). All linear operators
//! in this crate act on such matrices, and distances between them are measured
//! with the trace inner product `<X1, X2> = tr(X1^T X2)`, whose induced norm
//! is the Frobenius norm.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Spatial extent of an image grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialDims {
    pub rows: usize,
    pub cols: usize,
}

impl SpatialDims {
    pub fn new(rows: usize, cols: usize) -> Self {
        SpatialDims { rows, cols }
    }

    /// Number of pixels in the grid.
    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    /// Row-major index of pixel `(r, c)`.
    pub fn index(&self, r: usize, c: usize) -> usize {
        debug_assert!(r < self.rows && c < self.cols);
        r * self.cols + c
    }

    /// Dims after decimation by `factor`; both extents must divide evenly.
    pub fn scaled_down(&self, factor: usize) -> Result<SpatialDims> {
        if factor == 0 {
            return Err(Error::Parameter("decimation factor must be >= 1".into()));
        }
        if self.rows % factor != 0 || self.cols % factor != 0 {
            return Err(Error::Parameter(format!(
                "spatial dims {}x{} are not divisible by factor {}",
                self.rows, self.cols, factor
            )));
        }
        Ok(SpatialDims::new(self.rows / factor, self.cols / factor))
    }

    /// Dims after upsampling by `factor`.
    pub fn scaled_up(&self, factor: usize) -> SpatialDims {
        SpatialDims::new(self.rows * factor, self.cols * factor)
    }
}

impl std::fmt::Display for SpatialDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Hyperspectral image: an `N x L` band-column matrix plus its spatial dims.
///
/// Every entry is finite by construction; values are nominally reflectances in
/// `[0, 1]` but intermediate products (latent coefficients, residuals) use the
/// same container with unrestricted finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiImage {
    dims: SpatialDims,
    data: DMatrix<f64>,
}

impl HsiImage {
    /// Wraps a pixel-by-band matrix, checking shape and finiteness.
    pub fn new(dims: SpatialDims, data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() != dims.pixels() {
            return Err(Error::dimension(
                "HsiImage::new",
                format!("{} pixel rows for dims {}", dims.pixels(), dims),
                format!("{} rows", data.nrows()),
            ));
        }
        if data.ncols() == 0 || dims.pixels() == 0 {
            return Err(Error::Parameter(
                "image must have at least one pixel and one band".into(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter(
                "image entries must all be finite".into(),
            ));
        }
        Ok(HsiImage { dims, data })
    }

    /// Builds an image by evaluating `f(r, c, band)` over the grid.
    pub fn from_fn<F>(dims: SpatialDims, bands: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize, usize) -> f64,
    {
        let mut data = DMatrix::zeros(dims.pixels(), bands);
        for b in 0..bands {
            for r in 0..dims.rows {
                for c in 0..dims.cols {
                    data[(dims.index(r, c), b)] = f(r, c, b);
                }
            }
        }
        HsiImage::new(dims, data)
    }

    /// Constant image with the same value in every entry.
    pub fn constant(dims: SpatialDims, bands: usize, value: f64) -> Result<Self> {
        HsiImage::new(dims, DMatrix::from_element(dims.pixels(), bands, value))
    }

    pub fn dims(&self) -> SpatialDims {
        self.dims
    }

    pub fn rows(&self) -> usize {
        self.dims.rows
    }

    pub fn cols(&self) -> usize {
        self.dims.cols
    }

    pub fn bands(&self) -> usize {
        self.data.ncols()
    }

    pub fn pixel_count(&self) -> usize {
        self.dims.pixels()
    }

    /// The underlying pixel-by-band matrix.
    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    /// Value of band `b` at pixel `(r, c)`.
    pub fn at(&self, r: usize, c: usize, b: usize) -> f64 {
        self.data[(self.dims.index(r, c), b)]
    }

    /// View of band `b` as a pixel vector.
    pub fn band(&self, b: usize) -> nalgebra::DVectorView<'_, f64> {
        self.data.column(b)
    }
}

/// Trace inner product `tr(X1^T X2)`, the sum of entrywise products.
pub fn inner_product(x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<f64> {
    if x1.shape() != x2.shape() {
        return Err(Error::dimension(
            "inner_product",
            format!("{}x{}", x1.nrows(), x1.ncols()),
            format!("{}x{}", x2.nrows(), x2.ncols()),
        ));
    }
    Ok(x1.iter().zip(x2.iter()).map(|(a, b)| a * b).sum())
}

/// Norm induced by [`inner_product`]; coincides with the Frobenius norm.
pub fn h_norm(x: &DMatrix<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Reflects an out-of-range index back into `[0, n)` with edge duplication,
/// so `-1 -> 0`, `-2 -> 1`, `n -> n-1`. Used for boundary handling in patch
/// extraction and interpolation.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    let n = n as isize;
    let mut i = i;
    // Fold until in range; terminates quickly for the small overshoots we see.
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn matrix_from_rows(rows: usize, cols: usize, vals: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, vals)
    }

    #[test]
    fn inner_product_of_zeros_is_zero() {
        let a = DMatrix::zeros(4, 3);
        let b = DMatrix::zeros(4, 3);
        assert_eq!(inner_product(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn inner_product_of_all_ones_counts_entries() {
        let a = DMatrix::from_element(4, 2, 1.0);
        let b = DMatrix::from_element(4, 2, 1.0);
        assert_eq!(inner_product(&a, &b).unwrap(), 8.0);
    }

    #[test]
    fn inner_product_matches_flattened_dot_product() {
        // Fixed pseudo-random entries; the oracle is the plain dot product of
        // the flattened matrices.
        let mut seed = 0x2545F4914F6CDD1Du64;
        let mut next = || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let a_vals: Vec<f64> = (0..18).map(|_| next()).collect();
        let b_vals: Vec<f64> = (0..18).map(|_| next()).collect();
        let a = matrix_from_rows(6, 3, &a_vals);
        let b = matrix_from_rows(6, 3, &b_vals);
        let oracle: f64 = a_vals.iter().zip(&b_vals).map(|(x, y)| x * y).sum();
        assert_relative_eq!(inner_product(&a, &b).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn inner_product_rejects_shape_mismatch() {
        let a = DMatrix::zeros(4, 3);
        let b = DMatrix::zeros(3, 4);
        assert!(inner_product(&a, &b).is_err());
    }

    #[test]
    fn h_norm_basics() {
        assert_eq!(h_norm(&DMatrix::zeros(5, 2)), 0.0);
        let mut single = DMatrix::zeros(3, 3);
        single[(1, 2)] = 3.0;
        assert_eq!(h_norm(&single), 3.0);
        // 3-4-5 triangle spread over two entries.
        let two = matrix_from_rows(1, 2, &[3.0, 4.0]);
        assert_relative_eq!(h_norm(&two), 5.0);
    }

    #[test]
    fn h_norm_matches_frobenius() {
        let vals: Vec<f64> = (0..12).map(|i| (i as f64) * 0.7 - 3.0).collect();
        let m = matrix_from_rows(4, 3, &vals);
        let frob: f64 = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_relative_eq!(h_norm(&m), frob, epsilon = 1e-12);
    }

    #[test]
    fn image_shape_and_accessors() {
        let dims = SpatialDims::new(2, 3);
        let img = HsiImage::from_fn(dims, 2, |r, c, b| (r * 3 + c) as f64 + 10.0 * b as f64)
            .unwrap();
        assert_eq!(img.pixel_count(), 6);
        assert_eq!(img.bands(), 2);
        assert_eq!(img.at(1, 2, 0), 5.0);
        assert_eq!(img.at(0, 1, 1), 11.0);
        // Row-major vectorization: pixel (1, 0) is row 3.
        assert_eq!(img.data()[(3, 0)], 3.0);
    }

    #[test]
    fn image_rejects_non_finite_entries() {
        let dims = SpatialDims::new(2, 2);
        let mut data = DMatrix::zeros(4, 1);
        data[(2, 0)] = f64::NAN;
        assert!(HsiImage::new(dims, data).is_err());
    }

    #[test]
    fn image_rejects_wrong_row_count() {
        let dims = SpatialDims::new(2, 2);
        assert!(HsiImage::new(dims, DMatrix::zeros(5, 1)).is_err());
    }

    #[test]
    fn reflect_index_small_cases() {
        assert_eq!(reflect_index(-1, 4), 0);
        assert_eq!(reflect_index(-2, 4), 1);
        assert_eq!(reflect_index(0, 4), 0);
        assert_eq!(reflect_index(3, 4), 3);
        assert_eq!(reflect_index(4, 4), 3);
        assert_eq!(reflect_index(5, 4), 2);
        assert_eq!(reflect_index(-1, 1), 0);
        assert_eq!(reflect_index(2, 1), 0);
    }

    prop_compose! {
        fn small_matrix()(rows in 1usize..6, cols in 1usize..5)
            (vals in prop::collection::vec(-100.0f64..100.0, rows * cols),
             rows in Just(rows), cols in Just(cols))
            -> DMatrix<f64>
        {
            DMatrix::from_row_slice(rows, cols, &vals)
        }
    }

    prop_compose! {
        fn matrix_pair()(rows in 1usize..6, cols in 1usize..5)
            (a in prop::collection::vec(-100.0f64..100.0, rows * cols),
             b in prop::collection::vec(-100.0f64..100.0, rows * cols),
             rows in Just(rows), cols in Just(cols))
            -> (DMatrix<f64>, DMatrix<f64>)
        {
            (
                DMatrix::from_row_slice(rows, cols, &a),
                DMatrix::from_row_slice(rows, cols, &b),
            )
        }
    }

    proptest! {
        #[test]
        fn inner_product_is_symmetric((a, b) in matrix_pair()) {
            let ab = inner_product(&a, &b).unwrap();
            let ba = inner_product(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab.abs()));
        }

        #[test]
        fn cauchy_schwarz_holds((a, b) in matrix_pair()) {
            let ab = inner_product(&a, &b).unwrap().abs();
            let bound = h_norm(&a) * h_norm(&b);
            prop_assert!(ab <= bound * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn norm_is_absolutely_homogeneous(m in small_matrix(), s in -50.0f64..50.0) {
            let scaled = &m * s;
            let lhs = h_norm(&scaled);
            let rhs = s.abs() * h_norm(&m);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs));
        }

        #[test]
        fn norm_is_positive_definite(m in small_matrix()) {
            let n = h_norm(&m);
            prop_assert!(n >= 0.0);
            if m.iter().any(|v| *v != 0.0) {
                prop_assert!(n > 0.0);
            }
        }
    }
}

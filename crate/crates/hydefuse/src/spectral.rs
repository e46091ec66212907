//! Spectral verification of the fusion iteration.
//!
//! The iteration `X_{k+1} = D(X_k - gamma grad l(X_k))` is affine with
//! linear part `P = D o G`. Its convergence is governed by two numbers:
//!
//! * `beta`, the largest eigenvalue of the quadratic operator `K`, which
//!   bounds the usable step sizes by `gamma < 2 / beta`;
//! * `mu`, the spectral norm of `P`, which is the linear convergence rate
//!   and must be below one for the iteration to contract.
//!
//! Both are estimated by power iteration on matching self-adjoint maps
//! (`K` directly, `P* o P` for `mu`, using `P* = G o W o V` because the
//! individual factors are self-adjoint). For tiny instances every operator
//! can also be materialized as an explicit matrix by applying it to each
//! standard basis matrix, giving an independent route for cross-checking
//! the power-method numbers against dense eigendecompositions.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::denoiser::{DenoiserParams, KernelDenoiser};
use crate::error::{Error, Result};
use crate::fusion::FusionProblem;
use crate::hsi::h_norm;

/// Ceiling on `rows * cols` for dense materialization; beyond this the
/// eigendecompositions stop being interactive.
pub const DENSE_OPERATOR_CAP: usize = 8192;

/// ChaCha stream for power-method start vectors.
const STREAM_POWER: u64 = 24;

/// A linear map on pixel-by-band matrices together with its adjoint.
pub trait LinearOperator: Sync {
    /// Shape `(pixel rows, band columns)` of the matrices the map acts on.
    fn domain(&self) -> (usize, usize);
    fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>>;
    fn apply_adjoint(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

/// The quadratic-term operator `K`. Self-adjoint.
pub struct QuadraticOperator<'a> {
    prob: &'a FusionProblem,
}

impl<'a> QuadraticOperator<'a> {
    pub fn new(prob: &'a FusionProblem) -> Self {
        QuadraticOperator { prob }
    }
}

impl LinearOperator for QuadraticOperator<'_> {
    fn domain(&self) -> (usize, usize) {
        (self.prob.latent_rows(), self.prob.latent_dim())
    }

    fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.prob.quadratic_apply(x)
    }

    fn apply_adjoint(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.prob.quadratic_apply(x)
    }
}

/// The descent map `G = I - gamma K`. Self-adjoint.
pub struct DescentOperator<'a> {
    prob: &'a FusionProblem,
    gamma: f64,
}

impl<'a> DescentOperator<'a> {
    pub fn new(prob: &'a FusionProblem, gamma: f64) -> Self {
        DescentOperator { prob, gamma }
    }
}

impl LinearOperator for DescentOperator<'_> {
    fn domain(&self) -> (usize, usize) {
        (self.prob.latent_rows(), self.prob.latent_dim())
    }

    fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.prob.descent_apply(x, self.gamma)
    }

    fn apply_adjoint(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.prob.descent_apply(x, self.gamma)
    }
}

/// A denoiser viewed as a linear map; self-adjoint for the single filters,
/// adjoint order swapped for the cascade.
pub struct DenoiserOperator<'a> {
    den: &'a KernelDenoiser,
}

impl<'a> DenoiserOperator<'a> {
    pub fn new(den: &'a KernelDenoiser) -> Self {
        DenoiserOperator { den }
    }
}

impl LinearOperator for DenoiserOperator<'_> {
    fn domain(&self) -> (usize, usize) {
        (self.den.dims().pixels(), self.den.bands())
    }

    fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.den.apply(x)
    }

    fn apply_adjoint(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.den.apply_adjoint(x)
    }
}

/// The linear part of the full iteration map, `P = D o G`, with
/// `P* = G o D*` by self-adjointness of `G`.
pub struct PnpOperator<'a> {
    prob: &'a FusionProblem,
    den: &'a KernelDenoiser,
    gamma: f64,
}

impl<'a> PnpOperator<'a> {
    /// Pairs a problem with a denoiser that may differ from the problem's
    /// own (the contraction suite sweeps denoiser parameters).
    pub fn new(
        prob: &'a FusionProblem,
        den: &'a KernelDenoiser,
        gamma: f64,
    ) -> Result<Self> {
        if den.dims() != prob.model().ms_dims || den.bands() != prob.latent_dim() {
            return Err(Error::dimension(
                "PnpOperator",
                format!("{} x {} latent bands", prob.model().ms_dims, prob.latent_dim()),
                format!("{} x {} bands", den.dims(), den.bands()),
            ));
        }
        Ok(PnpOperator { prob, den, gamma })
    }

    /// The operator for the problem's own denoiser.
    pub fn of_problem(prob: &'a FusionProblem, gamma: f64) -> Self {
        PnpOperator {
            prob,
            den: prob.denoiser(),
            gamma,
        }
    }
}

impl LinearOperator for PnpOperator<'_> {
    fn domain(&self) -> (usize, usize) {
        (self.prob.latent_rows(), self.prob.latent_dim())
    }

    fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.den.apply(&self.prob.descent_apply(x, self.gamma)?)
    }

    fn apply_adjoint(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.prob
            .descent_apply(&self.den.apply_adjoint(x)?, self.gamma)
    }
}

/// Identity map, mostly for calibrating the estimators in tests.
pub struct IdentityOperator {
    pub rows: usize,
    pub cols: usize,
    /// Uniform scale factor; 1.0 for the plain identity.
    pub scale: f64,
}

impl LinearOperator for IdentityOperator {
    fn domain(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.scale * x)
    }

    fn apply_adjoint(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.scale * x)
    }
}

/// Power-iteration settings.
#[derive(Debug, Clone, Copy)]
pub struct PowerOptions {
    pub max_iters: usize,
    /// Relative change of successive estimates below which the iteration
    /// stops.
    pub tol: f64,
    pub seed: u64,
}

impl Default for PowerOptions {
    fn default() -> Self {
        PowerOptions {
            max_iters: 500,
            tol: 1e-9,
            seed: 0,
        }
    }
}

/// Outcome of a power iteration. When `converged` is false, `value` is the
/// best estimate after the full iteration budget.
#[derive(Debug, Clone)]
pub struct PowerEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Estimate after every iteration, for monotonicity diagnostics.
    pub history: Vec<f64>,
}

fn seeded_unit_start(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_POWER);
    let mut x = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let n = h_norm(&x);
    if n > 0.0 {
        x /= n;
    }
    x
}

/// Power iteration on a self-adjoint PSD map given as a closure. Returns
/// Rayleigh-quotient estimates of the top eigenvalue.
fn rayleigh_power<F>(
    apply: F,
    rows: usize,
    cols: usize,
    opts: &PowerOptions,
) -> Result<PowerEstimate>
where
    F: Fn(&DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let mut x = seeded_unit_start(rows, cols, opts.seed);
    let mut history = Vec::new();
    let mut prev: Option<f64> = None;
    for k in 1..=opts.max_iters {
        let mx = apply(&x)?;
        // x is unit, so the Rayleigh quotient is a plain inner product.
        let lambda = crate::hsi::inner_product(&x, &mx)?;
        history.push(lambda);
        let norm = h_norm(&mx);
        if norm == 0.0 {
            // The iterate landed in the kernel; for a PSD map reachable only
            // when the operator is zero on the start's invariant subspace.
            return Ok(PowerEstimate {
                value: 0.0,
                iterations: k,
                converged: true,
                history,
            });
        }
        x = mx / norm;
        if let Some(p) = prev {
            if (lambda - p).abs() <= opts.tol * lambda.abs().max(1e-300) {
                return Ok(PowerEstimate {
                    value: lambda,
                    iterations: k,
                    converged: true,
                    history,
                });
            }
        }
        prev = Some(lambda);
    }
    Ok(PowerEstimate {
        value: prev.unwrap_or(0.0),
        iterations: opts.max_iters,
        converged: false,
        history,
    })
}

/// Estimates the step-size limit `beta`, the top eigenvalue of `K`.
pub fn power_method_beta(prob: &FusionProblem, opts: &PowerOptions) -> PowerEstimate {
    let op = QuadraticOperator::new(prob);
    let (rows, cols) = op.domain();
    rayleigh_power(|x| op.apply(x), rows, cols, opts)
        .expect("quadratic operator accepts matrices of its own domain shape")
}

/// Estimates the contraction factor `mu`, the spectral norm of the given
/// operator, by power iteration on the self-adjoint composition
/// `op* o op`. The history holds per-iteration `mu` estimates.
pub fn power_method_mu(op: &dyn LinearOperator, opts: &PowerOptions) -> Result<PowerEstimate> {
    let (rows, cols) = op.domain();
    let estimate = rayleigh_power(|x| op.apply_adjoint(&op.apply(x)?), rows, cols, opts)?;
    Ok(PowerEstimate {
        value: estimate.value.max(0.0).sqrt(),
        iterations: estimate.iterations,
        converged: estimate.converged,
        history: estimate
            .history
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .collect(),
    })
}

/// Materializes an operator as an explicit matrix by applying it to every
/// standard basis matrix (column-major vectorization).
pub fn dense_operator_matrix(op: &dyn LinearOperator) -> Result<DMatrix<f64>> {
    let (rows, cols) = op.domain();
    let dim = rows * cols;
    if dim > DENSE_OPERATOR_CAP {
        return Err(Error::Capacity(format!(
            "dense operator needs {dim} x {dim}; cap is {DENSE_OPERATOR_CAP} unknowns"
        )));
    }
    let columns: Vec<Vec<f64>> = (0..dim)
        .into_par_iter()
        .map(|j| {
            let mut e = DMatrix::zeros(rows, cols);
            e[(j % rows, j / rows)] = 1.0;
            op.apply(&e).map(|m| m.as_slice().to_vec())
        })
        .collect::<Result<_>>()?;
    let mut dense = DMatrix::zeros(dim, dim);
    for (j, col) in columns.iter().enumerate() {
        dense.column_mut(j).copy_from_slice(col);
    }
    Ok(dense)
}

/// One grid point of the contraction sweep.
#[derive(Debug, Clone, Copy)]
pub struct ContractionRow {
    /// Step size as a multiple of `1/beta`.
    pub gamma_frac: f64,
    /// Feature bandwidth of the clustered filter at this point.
    pub sigma1: f64,
    /// Patch bandwidth of the bandwise filter at this point.
    pub sigma2: f64,
    pub mu: f64,
}

/// Contraction factors over a step-size and bandwidth grid.
#[derive(Debug, Clone)]
pub struct ContractionReport {
    pub beta: f64,
    pub rows: Vec<ContractionRow>,
    /// Whether every grid point inside the guaranteed step range
    /// (`gamma_frac < 2`) came out strictly contractive.
    pub all_contractive: bool,
}

impl ContractionReport {
    pub fn to_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "gamma_frac,sigma1,sigma2,mu")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.gamma_frac, r.sigma1, r.sigma2, r.mu)?;
        }
        Ok(())
    }
}

/// Sweeps contraction factors over step-size fractions and denoiser
/// bandwidth pairs `(sigma1, sigma2)`. Denoisers are rebuilt per bandwidth
/// pair from the problem's surrogate guide with its other parameters kept.
pub fn verify_contraction_suite(
    prob: &FusionProblem,
    gamma_fracs: &[f64],
    sigmas: &[(f64, f64)],
) -> Result<ContractionReport> {
    let unknowns = prob.latent_rows() * prob.latent_dim();
    if unknowns > DENSE_OPERATOR_CAP {
        return Err(Error::Capacity(format!(
            "contraction sweep is meant for tiny instances; {unknowns} unknowns exceed {DENSE_OPERATOR_CAP}"
        )));
    }
    for frac in gamma_fracs {
        if !(*frac > 0.0) || !frac.is_finite() {
            return Err(Error::Parameter(format!(
                "step fractions must be positive finite, got {frac}"
            )));
        }
    }
    let opts = PowerOptions::default();
    let beta = power_method_beta(prob, &opts).value;
    let guide = prob.surrogate_latent()?;
    let mut rows = Vec::with_capacity(gamma_fracs.len() * sigmas.len());
    for &(sigma1, sigma2) in sigmas {
        let params = DenoiserParams {
            sigma_w: sigma1,
            sigma_v: sigma2,
            ..prob.denoiser().params().clone()
        };
        let den = KernelDenoiser::build_cascade(&guide, &params)?;
        let mus: Vec<f64> = gamma_fracs
            .par_iter()
            .map(|frac| {
                let op = PnpOperator::new(prob, &den, frac / beta)?;
                Ok(power_method_mu(&op, &opts)?.value)
            })
            .collect::<Result<_>>()?;
        for (frac, mu) in gamma_fracs.iter().zip(mus) {
            rows.push(ContractionRow {
                gamma_frac: *frac,
                sigma1,
                sigma2,
                mu,
            });
        }
    }
    let all_contractive = rows
        .iter()
        .filter(|r| r.gamma_frac < 2.0)
        .all(|r| r.mu < 1.0);
    Ok(ContractionReport {
        beta,
        rows,
        all_contractive,
    })
}

/// Outcome of the norm-preservation probe.
#[derive(Debug, Clone)]
pub struct NormPreservationReport {
    /// Whether the operator met the preconditions (self-adjoint with dense
    /// spectrum inside `(-1, 1]`). When false the other fields are vacuous.
    pub applicable: bool,
    /// Every probe whose norm survived application was (numerically) a
    /// fixed point.
    pub near_preservers_are_fixed: bool,
    /// Probes orthogonal to the fixed subspace strictly lost norm.
    pub strict_contraction_off_fixed: bool,
}

impl NormPreservationReport {
    pub fn passed(&self) -> bool {
        self.applicable && self.near_preservers_are_fixed && self.strict_contraction_off_fixed
    }
}

/// Checks that an operator with spectrum in `(-1, 1]` only preserves the
/// norm of vectors it fixes, and strictly shrinks everything orthogonal to
/// its fixed subspace. Dense-materializes the operator to verify the
/// spectral precondition and to project out the fixed subspace.
pub fn norm_preservation_check(op: &dyn LinearOperator) -> Result<NormPreservationReport> {
    let dense = dense_operator_matrix(op)?;
    let dim = dense.nrows();
    let asym = h_norm(&(&dense - dense.transpose())) / h_norm(&dense).max(1e-300);
    let eig = SymmetricEigen::new(0.5 * (&dense + dense.transpose()));
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_eig = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let applicable = asym <= 1e-10 && min_eig > -1.0 + 1e-12 && max_eig <= 1.0 + 1e-10;
    if !applicable {
        return Ok(NormPreservationReport {
            applicable,
            near_preservers_are_fixed: false,
            strict_contraction_off_fixed: false,
        });
    }

    // Projector onto the fixed subspace (eigenvalues within 1e-10 of 1).
    let mut fixed_projector = DMatrix::zeros(dim, dim);
    for (i, lambda) in eig.eigenvalues.iter().enumerate() {
        if *lambda >= 1.0 - 1e-10 {
            let v = eig.eigenvectors.column(i);
            fixed_projector += v * v.transpose();
        }
    }

    let (rows, cols) = op.domain();
    let mut near_preservers_are_fixed = true;
    let mut strict_contraction_off_fixed = true;
    for probe in 0..20u64 {
        let x = seeded_unit_start(rows, cols, 1000 + probe);
        let ox = op.apply(&x)?;
        if h_norm(&ox) >= h_norm(&x) * (1.0 - 1e-10) {
            near_preservers_are_fixed &= h_norm(&(&ox - &x)) <= 1e-8 * h_norm(&x);
        }
        let x_vec = DMatrix::from_column_slice(dim, 1, x.as_slice());
        let perp_vec = &x_vec - &fixed_projector * &x_vec;
        let perp = DMatrix::from_column_slice(rows, cols, perp_vec.as_slice());
        let perp_norm = h_norm(&perp);
        if perp_norm > 1e-12 {
            strict_contraction_off_fixed &= h_norm(&op.apply(&perp)?) < perp_norm;
        }
    }
    Ok(NormPreservationReport {
        applicable,
        near_preservers_are_fixed,
        strict_contraction_off_fixed,
    })
}

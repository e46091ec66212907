//! The fusion loop: a proximal-gradient iteration whose proximal step is a
//! fixed linear denoiser.
//!
//! The data term couples two observations of one latent scene: a blurred and
//! decimated hyperspectral image and a spectrally mixed multispectral image.
//! Working in the latent coordinates of a [`Subspace`], the loss is
//! `l(X) = 1/2 ||A X E - Y_h||^2 + lambda/2 ||X E R - Y_m||^2` and the update
//! is `X_{k+1} = D(X_k - gamma * grad l(X_k))` with `D` the denoiser.
//!
//! Because `D` is linear and fixed, the whole update is an affine map
//! `T(X) = P(X) + Q` with linear part `P = D o G`, `G(X) = X - gamma K(X)`,
//! and `K(X) = A^T A X + X P2` the (self-adjoint, PSD) quadratic-term
//! operator. The iteration therefore converges linearly to a unique fixed
//! point whenever the spectral norm of `P` is below one, which
//! [`crate::spectral`] can estimate and verify.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::denoiser::KernelDenoiser;
use crate::error::{Error, FusionDiagnostics, Result};
use crate::forward::ForwardModel;
use crate::hsi::h_norm;
use crate::hsi::HsiImage;
use crate::metrics::mean_psnr;
use crate::spectral::{power_method_beta, PowerOptions};
use crate::subspace::{upsample, Subspace};

/// Successive differences growing past this multiple of their running
/// minimum abort the run. Plumbing, not theory: a convergent affine
/// iteration decays geometrically, so a 10x rebound only happens when the
/// step size is past the stability limit.
const DIVERGENCE_FACTOR: f64 = 10.0;

/// Floor for the relative-difference denominator, so a run that walks the
/// iterate toward zero cannot divide by zero.
const NORM_FLOOR: f64 = 1e-12;

/// ChaCha stream for the random-init draw, disjoint from the observation
/// noise streams.
const STREAM_INIT: u64 = 16;

/// Immutable description of one fusion instance: the two observations, the
/// forward model, the spectral subspace, and the (already built) denoiser.
pub struct FusionProblem {
    y_h: HsiImage,
    y_m: HsiImage,
    model: ForwardModel,
    sub: Subspace,
    denoiser: KernelDenoiser,
    /// `E R`: latent-to-multispectral response, `L_s x L_m`.
    er: DMatrix<f64>,
    /// `lambda (E R)(E R)^T`, the band-side quadratic term.
    p2: DMatrix<f64>,
    /// `A^T Y_h E^T + lambda Y_m (E R)^T`, the constant part of the gradient.
    grad_const: DMatrix<f64>,
}

impl FusionProblem {
    pub fn new(
        y_h: HsiImage,
        y_m: HsiImage,
        model: ForwardModel,
        sub: Subspace,
        denoiser: KernelDenoiser,
    ) -> Result<Self> {
        if y_h.dims() != model.hs_dims() || y_h.bands() != model.hs_bands() {
            return Err(Error::dimension(
                "FusionProblem hyperspectral input",
                format!("{} x {} bands", model.hs_dims(), model.hs_bands()),
                format!("{} x {} bands", y_h.dims(), y_h.bands()),
            ));
        }
        if y_m.dims() != model.ms_dims || y_m.bands() != model.ms_bands() {
            return Err(Error::dimension(
                "FusionProblem multispectral input",
                format!("{} x {} bands", model.ms_dims, model.ms_bands()),
                format!("{} x {} bands", y_m.dims(), y_m.bands()),
            ));
        }
        if sub.full_bands() != model.hs_bands() {
            return Err(Error::dimension(
                "FusionProblem subspace",
                format!("{} bands", model.hs_bands()),
                format!("{} bands", sub.full_bands()),
            ));
        }
        if denoiser.dims() != model.ms_dims || denoiser.bands() != sub.dim() {
            return Err(Error::dimension(
                "FusionProblem denoiser",
                format!("{} x {} latent bands", model.ms_dims, sub.dim()),
                format!("{} x {} bands", denoiser.dims(), denoiser.bands()),
            ));
        }
        let er = sub.basis() * &model.response;
        let p2 = model.lambda * (&er * er.transpose());
        let grad_const = model.apply_a_adjoint(y_h.data())? * sub.basis().transpose()
            + model.lambda * y_m.data() * er.transpose();
        Ok(FusionProblem {
            y_h,
            y_m,
            model,
            sub,
            denoiser,
            er,
            p2,
            grad_const,
        })
    }

    pub fn y_h(&self) -> &HsiImage {
        &self.y_h
    }

    pub fn y_m(&self) -> &HsiImage {
        &self.y_m
    }

    pub fn model(&self) -> &ForwardModel {
        &self.model
    }

    pub fn subspace(&self) -> &Subspace {
        &self.sub
    }

    pub fn denoiser(&self) -> &KernelDenoiser {
        &self.denoiser
    }

    /// Pixel rows of a latent iterate.
    pub fn latent_rows(&self) -> usize {
        self.model.ms_dims.pixels()
    }

    /// Columns of a latent iterate.
    pub fn latent_dim(&self) -> usize {
        self.sub.dim()
    }

    /// The constant part of the gradient, `A^T Y_h E^T + lambda Y_m (E R)^T`.
    pub fn constant_term(&self) -> &DMatrix<f64> {
        &self.grad_const
    }

    fn check_latent(&self, context: &'static str, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.latent_rows() || x.ncols() != self.latent_dim() {
            return Err(Error::dimension(
                context,
                format!("{}x{}", self.latent_rows(), self.latent_dim()),
                format!("{}x{}", x.nrows(), x.ncols()),
            ));
        }
        Ok(())
    }

    /// Data-fit loss at a latent iterate.
    pub fn loss(&self, x: &DMatrix<f64>) -> Result<f64> {
        self.check_latent("loss", x)?;
        let res_h = self.model.apply_a(x)? * self.sub.basis() - self.y_h.data();
        let res_m = x * &self.er - self.y_m.data();
        Ok(0.5 * res_h.norm_squared() + 0.5 * self.model.lambda * res_m.norm_squared())
    }

    /// Gradient of [`FusionProblem::loss`]. Affine in `x`: the quadratic
    /// operator applied to `x` minus the cached constant term.
    pub fn gradient(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.quadratic_apply(x)? - &self.grad_const)
    }

    /// The quadratic-term operator `K(X) = A^T A X + X P2`. Self-adjoint and
    /// positive semidefinite; its largest eigenvalue is the step-size limit.
    pub fn quadratic_apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_latent("quadratic_apply", x)?;
        let ata = self.model.apply_a_adjoint(&self.model.apply_a(x)?)?;
        Ok(ata + x * &self.p2)
    }

    /// The descent map `G(X) = X - gamma K(X)`, the linear part of a
    /// gradient step.
    pub fn descent_apply(&self, x: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
        Ok(x - gamma * self.quadratic_apply(x)?)
    }

    /// One gradient step `X - gamma grad l(X) = G(X) + gamma * constant`.
    pub fn gradient_step(&self, x: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
        Ok(x - gamma * self.gradient(x)?)
    }

    /// Closed-form upper bound on the largest eigenvalue of `K`: the blur is
    /// an averaging filter and decimation only drops rows, so the spatial
    /// operator has norm at most one, leaving `1 + lambda * smax(E R)^2`.
    pub fn analytic_beta_bound(&self) -> f64 {
        let smax = self
            .er
            .clone()
            .svd(false, false)
            .singular_values
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        1.0 + self.model.lambda * smax * smax
    }

    /// Latent encoding of the interpolated hyperspectral observation. Serves
    /// both as the default initialization and as the denoiser guide.
    pub fn surrogate_latent(&self) -> Result<HsiImage> {
        surrogate_latent(&self.y_h, &self.sub, self.model.decimation, self.model.ms_dims)
    }

    /// Decodes a latent iterate into a full-band image.
    pub fn full_image(&self, x: &DMatrix<f64>) -> Result<HsiImage> {
        self.check_latent("full_image", x)?;
        HsiImage::new(self.model.ms_dims, self.sub.to_full(x)?)
    }
}

/// Builds the latent surrogate without a full problem, for callers that need
/// the denoiser guide before the problem exists.
pub fn surrogate_latent(
    y_h: &HsiImage,
    sub: &Subspace,
    decimation: usize,
    ms_dims: crate::hsi::SpatialDims,
) -> Result<HsiImage> {
    let up = upsample(y_h, decimation)?;
    if up.dims() != ms_dims {
        return Err(Error::dimension(
            "surrogate_latent",
            ms_dims.to_string(),
            up.dims().to_string(),
        ));
    }
    HsiImage::new(ms_dims, sub.to_latent(up.data())?)
}

/// Step-size policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    /// `gamma = frac / beta` with `beta` measured by power iteration
    /// (falling back to the analytic bound if the iteration stalls).
    /// Fractions below 2 are inside the guaranteed-convergence range;
    /// larger values are allowed so the divergent regime can be exercised.
    Fraction(f64),
    /// Explicit step size.
    Fixed(f64),
}

/// Initialization of the latent iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Zeros,
    Ones,
    /// Standard-normal entries from a dedicated seeded stream.
    Noise(u64),
    /// Latent encoding of the interpolated hyperspectral input.
    Surrogate,
}

#[derive(Debug, Clone)]
pub struct FusionOptions {
    pub step: StepSize,
    pub max_iters: usize,
    /// Relative successive-difference threshold.
    pub tol: f64,
    pub init: Init,
    pub record_trace: bool,
    /// Reference image for per-iteration PSNR in the trace; has no effect on
    /// the iteration itself.
    pub ground_truth: Option<HsiImage>,
}

impl Default for FusionOptions {
    fn default() -> Self {
        FusionOptions {
            step: StepSize::Fraction(1.8),
            max_iters: 1000,
            tol: 1e-8,
            init: Init::Surrogate,
            record_trace: true,
            ground_truth: None,
        }
    }
}

/// One row of the convergence trace.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub iter: usize,
    /// `||X_k - X_{k-1}||` in the Frobenius norm.
    pub diff: f64,
    pub loss: f64,
    pub psnr: Option<f64>,
}

/// Convergence diagnostics of a run.
#[derive(Debug, Clone, Default)]
pub struct FusionTrace {
    pub records: Vec<TraceRecord>,
    pub iterations_run: usize,
    pub converged: bool,
    /// Geometric-mean ratio of successive differences after burn-in; the
    /// observed linear rate.
    pub empirical_rate: Option<f64>,
}

impl FusionTrace {
    /// Writes the trace as CSV. The `psnr` field is empty when no ground
    /// truth was supplied.
    pub fn to_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "iter,diff,loss,psnr")?;
        for r in &self.records {
            match r.psnr {
                Some(p) => writeln!(out, "{},{},{},{}", r.iter, r.diff, r.loss, p)?,
                None => writeln!(out, "{},{},{},", r.iter, r.diff, r.loss)?,
            }
        }
        Ok(())
    }
}

/// Result of a completed (non-aborted) run.
#[derive(Debug)]
pub struct FusionResult {
    /// Final latent iterate.
    pub latent: DMatrix<f64>,
    /// Final iterate decoded to full bands.
    pub image: HsiImage,
    pub trace: FusionTrace,
    /// Step size actually used.
    pub gamma: f64,
    /// Measured step-size limit, when the policy required estimating it.
    pub beta: Option<f64>,
}

/// Resolved step size plus the quantities that justify it.
#[derive(Debug, Clone, Copy)]
pub struct StepSelection {
    pub gamma: f64,
    /// The estimate actually used for `gamma`.
    pub beta: f64,
    /// Closed-form bound, kept for logging and sanity checks.
    pub beta_bound: f64,
    /// Whether the power iteration converged (otherwise `beta` is the bound).
    pub beta_converged: bool,
}

/// Picks `gamma = frac / beta` for a fraction in the guaranteed range
/// `(0, 2)`, measuring `beta` by power iteration.
pub fn default_step_size(prob: &FusionProblem, frac: f64) -> Result<StepSelection> {
    if !(frac > 0.0 && frac < 2.0) {
        return Err(Error::Parameter(format!(
            "step fraction must lie in (0, 2), got {frac}"
        )));
    }
    Ok(resolve_fraction(prob, frac))
}

fn resolve_fraction(prob: &FusionProblem, frac: f64) -> StepSelection {
    let bound = prob.analytic_beta_bound();
    let est = power_method_beta(prob, &PowerOptions::default());
    let (beta, beta_converged) = if est.converged && est.value > 0.0 {
        (est.value, true)
    } else {
        (bound, false)
    };
    StepSelection {
        gamma: frac / beta,
        beta,
        beta_bound: bound,
        beta_converged,
    }
}

fn initial_latent(prob: &FusionProblem, init: &Init) -> Result<DMatrix<f64>> {
    let (n, l) = (prob.latent_rows(), prob.latent_dim());
    Ok(match init {
        Init::Zeros => DMatrix::zeros(n, l),
        Init::Ones => DMatrix::from_element(n, l, 1.0),
        Init::Noise(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            rng.set_stream(STREAM_INIT);
            DMatrix::from_fn(n, l, |_, _| rng.sample::<f64, _>(StandardNormal))
        }
        Init::Surrogate => prob.surrogate_latent()?.into_data(),
    })
}

fn estimate_rate(records: &[TraceRecord]) -> Option<f64> {
    let usable: Vec<&TraceRecord> = records.iter().filter(|r| r.diff > 0.0).collect();
    if usable.len() < 3 {
        return None;
    }
    let burn = 10.min(usable.len() / 2);
    let first = usable[burn];
    let last = usable[usable.len() - 1];
    if last.iter <= first.iter {
        return None;
    }
    let rate = (last.diff / first.diff).powf(1.0 / (last.iter - first.iter) as f64);
    rate.is_finite().then_some(rate)
}

/// Runs the fixed-point iteration to convergence, iteration budget, or
/// abort. Aborts attach the trace and the last finite iterate to the error
/// so callers can still inspect and export them.
pub fn run(prob: &FusionProblem, opts: &FusionOptions) -> Result<FusionResult> {
    if !(opts.tol > 0.0) {
        return Err(Error::Parameter(format!(
            "tolerance must be positive, got {}",
            opts.tol
        )));
    }
    if opts.max_iters == 0 {
        return Err(Error::Parameter("max_iters must be >= 1".into()));
    }
    if let Some(gt) = &opts.ground_truth {
        if gt.dims() != prob.model.ms_dims || gt.bands() != prob.model.hs_bands() {
            return Err(Error::dimension(
                "run ground truth",
                format!("{} x {} bands", prob.model.ms_dims, prob.model.hs_bands()),
                format!("{} x {} bands", gt.dims(), gt.bands()),
            ));
        }
    }
    let (gamma, beta) = match opts.step {
        StepSize::Fixed(g) => {
            if !(g > 0.0) || !g.is_finite() {
                return Err(Error::Parameter(format!(
                    "step size must be a positive finite number, got {g}"
                )));
            }
            (g, None)
        }
        StepSize::Fraction(f) => {
            if !(f > 0.0) || !f.is_finite() {
                return Err(Error::Parameter(format!(
                    "step fraction must be a positive finite number, got {f}"
                )));
            }
            let sel = resolve_fraction(prob, f);
            (sel.gamma, Some(sel.beta))
        }
    };

    let mut x = initial_latent(prob, &opts.init)?;
    let mut trace = FusionTrace::default();
    let mut min_diff = f64::INFINITY;
    let mut converged = false;

    for k in 1..=opts.max_iters {
        let next = prob.denoiser.apply(&prob.gradient_step(&x, gamma)?)?;
        let diff = h_norm(&(&next - &x));
        if !diff.is_finite() {
            trace.iterations_run = k;
            trace.empirical_rate = estimate_rate(&trace.records);
            return Err(Error::NonFinite {
                diagnostics: Box::new(FusionDiagnostics {
                    iterations: k,
                    trace,
                    last_latent: x,
                }),
            });
        }
        if opts.record_trace {
            let loss = prob.loss(&next)?;
            let psnr = match &opts.ground_truth {
                Some(gt) => Some(mean_psnr(gt, &prob.full_image(&next)?)?),
                None => None,
            };
            trace.records.push(TraceRecord {
                iter: k,
                diff,
                loss,
                psnr,
            });
        }
        if diff > DIVERGENCE_FACTOR * min_diff {
            trace.iterations_run = k;
            trace.empirical_rate = estimate_rate(&trace.records);
            return Err(Error::Divergence {
                growth: diff / min_diff,
                diagnostics: Box::new(FusionDiagnostics {
                    iterations: k,
                    trace,
                    last_latent: next,
                }),
            });
        }
        min_diff = min_diff.min(diff);
        let rel = diff / h_norm(&next).max(NORM_FLOOR);
        trace.iterations_run = k;
        x = next;
        if rel < opts.tol {
            converged = true;
            break;
        }
    }

    trace.converged = converged;
    trace.empirical_rate = estimate_rate(&trace.records);
    let image = prob.full_image(&x)?;
    Ok(FusionResult {
        latent: x,
        image,
        trace,
        gamma,
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserParams;
    use crate::forward::{box_response, generate_scene, simulate_observations, BlurKind, NoiseSpec};
    use crate::hsi::{inner_product, SpatialDims};
    use crate::subspace::estimate_subspace;
    use approx::assert_relative_eq;

    struct Instance {
        prob: FusionProblem,
        scene: HsiImage,
    }

    /// 12x12 scene, 6 bands of rank 3, 2x decimation, noiseless by default.
    fn tiny_instance(seed: u64, snr_db: f64) -> Instance {
        let dims = SpatialDims::new(12, 12);
        let scene = generate_scene(dims, 6, 3, seed).unwrap();
        let model = ForwardModel::new(
            BlurKind::StarckMurtagh,
            2,
            box_response(6, 2).unwrap(),
            1.0,
            dims,
        )
        .unwrap();
        let noise = NoiseSpec {
            snr_h_db: snr_db,
            snr_m_db: snr_db,
            seed,
        };
        let (y_h, y_m) = simulate_observations(&scene, &model, &noise).unwrap();
        let up = upsample(&y_h, 2).unwrap();
        let sub = estimate_subspace(&up, 3).unwrap();
        let guide = HsiImage::new(dims, sub.to_latent(up.data()).unwrap()).unwrap();
        let params = DenoiserParams {
            window: 3,
            sigma_w: 0.5,
            sigma_v: 0.5,
            clusters: 4,
            ..DenoiserParams::default()
        };
        let denoiser = KernelDenoiser::build_cascade(&guide, &params).unwrap();
        let prob = FusionProblem::new(y_h, y_m, model, sub, denoiser).unwrap();
        Instance { prob, scene }
    }

    fn random_latent(prob: &FusionProblem, seed: u64) -> DMatrix<f64> {
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        };
        DMatrix::from_fn(prob.latent_rows(), prob.latent_dim(), |_, _| next())
    }

    #[test]
    fn loss_at_zero_is_half_the_observation_energy() {
        let inst = tiny_instance(1, 25.0);
        let zero = DMatrix::zeros(inst.prob.latent_rows(), inst.prob.latent_dim());
        let expected = 0.5 * inst.prob.y_h().data().norm_squared()
            + 0.5 * inst.prob.y_m().data().norm_squared();
        assert_relative_eq!(inst.prob.loss(&zero).unwrap(), expected, max_relative = 1e-12);
    }

    #[test]
    fn loss_and_gradient_vanish_on_consistent_data() {
        // Noiseless observations of an exact-rank scene: the estimated
        // subspace captures the scene exactly, so its latent encoding is a
        // global minimizer with zero loss.
        let inst = tiny_instance(2, f64::INFINITY);
        let x_true = inst.prob.subspace().to_latent(inst.scene.data()).unwrap();
        assert!(inst.prob.loss(&x_true).unwrap() < 1e-18);
        assert!(h_norm(&inst.prob.gradient(&x_true).unwrap()) < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let inst = tiny_instance(3, 20.0);
        let h = 1e-6;
        for seed in 0..3 {
            let x = random_latent(&inst.prob, 100 + seed);
            let mut dir = random_latent(&inst.prob, 200 + seed);
            dir /= h_norm(&dir);
            let plus = inst.prob.loss(&(&x + h * &dir)).unwrap();
            let minus = inst.prob.loss(&(&x - h * &dir)).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            let analytic = inner_product(&inst.prob.gradient(&x).unwrap(), &dir).unwrap();
            assert_relative_eq!(fd, analytic, max_relative = 1e-5);
        }
    }

    #[test]
    fn gradient_differences_are_the_quadratic_operator() {
        let inst = tiny_instance(4, 20.0);
        let x1 = random_latent(&inst.prob, 1);
        let x2 = random_latent(&inst.prob, 2);
        let lhs = inst.prob.gradient(&x1).unwrap() - inst.prob.gradient(&x2).unwrap();
        let rhs = inst.prob.quadratic_apply(&(&x1 - &x2)).unwrap();
        assert_relative_eq!(h_norm(&(lhs - rhs)), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn quadratic_operator_is_self_adjoint_and_psd() {
        let inst = tiny_instance(5, 20.0);
        for seed in 0..5 {
            let x = random_latent(&inst.prob, 300 + seed);
            let y = random_latent(&inst.prob, 400 + seed);
            let kx = inst.prob.quadratic_apply(&x).unwrap();
            let ky = inst.prob.quadratic_apply(&y).unwrap();
            let lhs = inner_product(&kx, &y).unwrap();
            let rhs = inner_product(&x, &ky).unwrap();
            assert_relative_eq!(lhs, rhs, max_relative = 1e-10, epsilon = 1e-10);
            assert!(inner_product(&kx, &x).unwrap() >= -1e-10);
        }
    }

    #[test]
    fn gradient_step_decomposes_into_descent_map_plus_offset() {
        let inst = tiny_instance(6, 20.0);
        let x = random_latent(&inst.prob, 7);
        let gamma = 0.37;
        let step = inst.prob.gradient_step(&x, gamma).unwrap();
        let decomposed = inst.prob.descent_apply(&x, gamma).unwrap()
            + gamma * inst.prob.constant_term();
        assert_relative_eq!(h_norm(&(step - decomposed)), 0.0, epsilon = 1e-12);
        // Zero step size is the identity.
        assert_eq!(inst.prob.gradient_step(&x, 0.0).unwrap(), x);
    }

    #[test]
    fn iteration_map_is_affine() {
        let inst = tiny_instance(7, 20.0);
        let gamma = 0.5;
        let t = |x: &DMatrix<f64>| {
            inst.prob
                .denoiser()
                .apply(&inst.prob.gradient_step(x, gamma).unwrap())
                .unwrap()
        };
        let zero = DMatrix::zeros(inst.prob.latent_rows(), inst.prob.latent_dim());
        let q = t(&zero);
        let x = random_latent(&inst.prob, 8);
        let y = random_latent(&inst.prob, 9);
        // T(x) - T(0) must be linear in x.
        let px = t(&x) - &q;
        let py = t(&y) - &q;
        let pxy = t(&(0.5 * &x + 2.0 * &y)) - &q;
        let combo = 0.5 * px + 2.0 * py;
        let scale = 1.0 + h_norm(&combo);
        assert!(h_norm(&(pxy - combo)) <= 1e-12 * scale);
    }

    #[test]
    fn run_converges_to_a_fixed_point() {
        let inst = tiny_instance(8, 25.0);
        let opts = FusionOptions {
            step: StepSize::Fraction(1.8),
            tol: 1e-10,
            ..FusionOptions::default()
        };
        let result = run(&inst.prob, &opts).unwrap();
        assert!(result.trace.converged);
        assert!(result.trace.iterations_run < 1000);
        assert!(result.beta.is_some());
        // Verify the fixed-point property directly.
        let t_x = inst
            .prob
            .denoiser()
            .apply(&inst.prob.gradient_step(&result.latent, result.gamma).unwrap())
            .unwrap();
        let rel = h_norm(&(t_x - &result.latent)) / h_norm(&result.latent);
        assert!(rel < 1e-9, "fixed-point residual {rel}");
        // Trace sanity: iterations strictly increasing, diffs nonnegative.
        for pair in result.trace.records.windows(2) {
            assert!(pair[1].iter > pair[0].iter);
        }
        assert!(result.trace.records.iter().all(|r| r.diff >= 0.0));
        assert!(result.trace.records.iter().all(|r| r.loss.is_finite()));
        let rate = result.trace.empirical_rate.unwrap();
        assert!(rate > 0.0 && rate < 1.0, "empirical rate {rate}");
    }

    #[test]
    fn initializations_reach_the_same_fixed_point() {
        let inst = tiny_instance(9, 25.0);
        let mut finals = Vec::new();
        for init in [Init::Zeros, Init::Ones, Init::Noise(5)] {
            let opts = FusionOptions {
                step: StepSize::Fraction(1.5),
                tol: 1e-10,
                init,
                record_trace: false,
                ..FusionOptions::default()
            };
            let result = run(&inst.prob, &opts).unwrap();
            assert!(result.trace.converged);
            assert!(result.trace.records.is_empty());
            finals.push(result.latent);
        }
        let norm = h_norm(&finals[0]);
        for other in &finals[1..] {
            assert!(h_norm(&(&finals[0] - other)) / norm < 1e-6);
        }
    }

    #[test]
    fn oversized_step_trips_the_divergence_guard() {
        let inst = tiny_instance(10, 25.0);
        let opts = FusionOptions {
            step: StepSize::Fixed(1e4),
            ..FusionOptions::default()
        };
        match run(&inst.prob, &opts) {
            Err(Error::Divergence {
                growth,
                diagnostics,
            }) => {
                assert!(growth > DIVERGENCE_FACTOR);
                assert!(diagnostics.iterations >= 2);
                assert!(!diagnostics.trace.records.is_empty());
                assert!(diagnostics.last_latent.iter().all(|v| v.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn ground_truth_enables_psnr_tracing() {
        let inst = tiny_instance(11, 25.0);
        let opts = FusionOptions {
            step: StepSize::Fraction(1.8),
            ground_truth: Some(inst.scene.clone()),
            max_iters: 20,
            tol: 1e-14,
            ..FusionOptions::default()
        };
        let result = run(&inst.prob, &opts).unwrap();
        assert!(result.trace.records.iter().all(|r| r.psnr.is_some()));
        let last = result.trace.records.last().unwrap().psnr.unwrap();
        assert!(last > 15.0, "fused PSNR unexpectedly low: {last}");
    }

    #[test]
    fn trace_csv_has_the_pinned_header_and_shape() {
        let trace = FusionTrace {
            records: vec![
                TraceRecord {
                    iter: 1,
                    diff: 0.5,
                    loss: 2.0,
                    psnr: None,
                },
                TraceRecord {
                    iter: 2,
                    diff: 0.25,
                    loss: 1.0,
                    psnr: Some(30.0),
                },
            ],
            iterations_run: 2,
            converged: false,
            empirical_rate: None,
        };
        let mut buf = Vec::new();
        trace.to_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iter,diff,loss,psnr");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "1,0.5,2,");
        assert_eq!(lines[2], "2,0.25,1,30");
    }

    #[test]
    fn default_step_size_is_consistent_with_the_bound() {
        let inst = tiny_instance(12, 25.0);
        let sel = default_step_size(&inst.prob, 1.8).unwrap();
        assert!(sel.beta > 0.0);
        assert!(sel.beta <= sel.beta_bound + 1e-9);
        assert_relative_eq!(sel.gamma, 1.8 / sel.beta, max_relative = 1e-12);
        assert!(default_step_size(&inst.prob, 2.0).is_err());
        assert!(default_step_size(&inst.prob, 0.0).is_err());
    }

    #[test]
    fn surrogate_latent_has_the_right_shape() {
        let inst = tiny_instance(13, 25.0);
        let surrogate = inst.prob.surrogate_latent().unwrap();
        assert_eq!(surrogate.dims(), SpatialDims::new(12, 12));
        assert_eq!(surrogate.bands(), 3);
    }

    #[test]
    fn rejects_inconsistent_components() {
        let inst = tiny_instance(14, 25.0);
        // Denoiser built over the wrong number of latent bands.
        let dims = SpatialDims::new(12, 12);
        let wrong_guide = HsiImage::constant(dims, 2, 0.5).unwrap();
        let params = DenoiserParams {
            window: 3,
            clusters: 2,
            ..DenoiserParams::default()
        };
        let wrong_denoiser = KernelDenoiser::build_v(&wrong_guide, &params).unwrap();
        let model = ForwardModel::new(
            BlurKind::StarckMurtagh,
            2,
            box_response(6, 2).unwrap(),
            1.0,
            dims,
        )
        .unwrap();
        let err = FusionProblem::new(
            inst.prob.y_h().clone(),
            inst.prob.y_m().clone(),
            model,
            Subspace::new(inst.prob.subspace().basis().clone()).unwrap(),
            wrong_denoiser,
        );
        assert!(err.is_err());

        let x_bad = DMatrix::zeros(10, 3);
        assert!(inst.prob.loss(&x_bad).is_err());
        assert!(inst.prob.gradient(&x_bad).is_err());
    }

    #[test]
    fn invalid_options_are_rejected() {
        let inst = tiny_instance(15, 25.0);
        let bad_tol = FusionOptions {
            tol: 0.0,
            ..FusionOptions::default()
        };
        assert!(run(&inst.prob, &bad_tol).is_err());
        let bad_step = FusionOptions {
            step: StepSize::Fixed(-1.0),
            ..FusionOptions::default()
        };
        assert!(run(&inst.prob, &bad_step).is_err());
        let bad_frac = FusionOptions {
            step: StepSize::Fraction(f64::NAN),
            ..FusionOptions::default()
        };
        assert!(run(&inst.prob, &bad_frac).is_err());
    }

    #[test]
    fn noise_init_is_deterministic() {
        let inst = tiny_instance(16, 25.0);
        let a = initial_latent(&inst.prob, &Init::Noise(7)).unwrap();
        let b = initial_latent(&inst.prob, &Init::Noise(7)).unwrap();
        assert_eq!(a, b);
        let c = initial_latent(&inst.prob, &Init::Noise(8)).unwrap();
        assert_ne!(a, c);
    }
}

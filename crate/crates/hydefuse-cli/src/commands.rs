//! Subcommand implementations: resolve the layered configuration, run the
//! library, write artifacts, and echo what was done.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Serialize;

use hydefuse::container::{read_hsb, write_hsb};
use hydefuse::denoiser::{DenoiserParams, KernelDenoiser};
use hydefuse::forward::{generate_scene, simulate_observations, ModelConfig, NoiseSpec, ResponseSpec};
use hydefuse::fusion::{
    surrogate_latent, FusionOptions, FusionProblem, FusionTrace, Init, StepSize,
};
use hydefuse::metrics::{compute_metrics, MetricsReport};
use hydefuse::spectral::{
    power_method_beta, power_method_mu, verify_contraction_suite, PnpOperator, PowerOptions,
    DENSE_OPERATOR_CAP,
};
use hydefuse::subspace::{estimate_subspace, upsample, Subspace};
use hydefuse::{Error, HsiImage, Result, SpatialDims};

use crate::config::{default_groups, pick, DenoiserEcho, FileConfig, FusionEcho};
use crate::{
    BlurChoice, ContractionArgs, DenoiseArgs, DenoiserArgs, FuseArgs, InitChoice, KindChoice,
    MetricsArgs, ModelArgs, SimulateArgs,
};

// --- shared plumbing ------------------------------------------------------

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_report<T: Serialize>(dir: &Path, report: &T) -> Result<PathBuf> {
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(report)
        .map_err(|err| Error::Format(format!("report serialization: {err}")))?;
    std::fs::write(&path, text)?;
    Ok(path)
}

fn write_trace(path: &Path, trace: &FusionTrace) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    trace.to_csv(&mut file)
}

fn shown(path: &Path) -> String {
    path.display().to_string()
}

/// Resolves a named choice from flag, then config file, then default. The
/// file spelling reuses the command-line parser so both accept the same
/// names.
fn resolve_choice<T: ValueEnum>(
    flag: Option<T>,
    file: Option<&String>,
    default: T,
    what: &str,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match file {
        Some(name) => T::from_str(name, true)
            .map_err(|_| Error::Parameter(format!("config file {what}: unknown value {name:?}"))),
        None => Ok(default),
    }
}

fn choice_name<T: ValueEnum>(choice: T) -> String {
    choice
        .to_possible_value()
        .expect("no skipped variants")
        .get_name()
        .to_string()
}

fn resolve_model(
    args: &ModelArgs,
    file: &FileConfig,
    bands: usize,
    decimation_default: usize,
) -> Result<ModelConfig> {
    let blur = resolve_choice(args.blur, file.blur.as_ref(), BlurChoice::Starck, "blur")?;
    let gauss = blur == BlurChoice::Gauss;
    let groups = pick(args.groups, file.groups, default_groups(bands));
    Ok(ModelConfig {
        blur: choice_name(blur),
        radius: gauss.then(|| pick(args.radius, file.radius, 7)),
        std: gauss.then(|| pick(args.std, file.std, 2.0)),
        decimation: pick(args.decimation, file.decimation, decimation_default),
        lambda: pick(args.lambda, file.lambda, 1.0),
        response: ResponseSpec::Named(format!("box:{groups}")),
    })
}

fn resolve_denoiser(
    args: &DenoiserArgs,
    file: &FileConfig,
    seed: u64,
) -> Result<(KindChoice, DenoiserEcho)> {
    let kind = resolve_choice(args.kind, file.kind.as_ref(), KindChoice::Caskd, "kind")?;
    let defaults = DenoiserParams::default();
    let echo = DenoiserEcho {
        kind: choice_name(kind),
        patch: pick(args.patch, file.patch, defaults.patch_size),
        window: pick(args.window, file.window, defaults.window),
        sigma1: pick(args.sigma1, file.sigma1, defaults.sigma_w),
        sigma2: pick(args.sigma2, file.sigma2, defaults.sigma_v),
        clusters: pick(args.clusters, file.clusters, defaults.clusters),
        seed,
    };
    Ok((kind, echo))
}

fn build_denoiser(
    kind: KindChoice,
    guide: &HsiImage,
    params: &DenoiserParams,
) -> Result<KernelDenoiser> {
    match kind {
        KindChoice::Caskd => KernelDenoiser::build_cascade(guide, params),
        KindChoice::W => KernelDenoiser::build_w(guide, params),
        KindChoice::V => KernelDenoiser::build_v(guide, params),
    }
}

/// Ratio of the two grids, used as the decimation default when none is
/// given. An explicit flag wins even when inconsistent; the problem
/// constructor reports the mismatch.
fn infer_decimation(y_h: &HsiImage, y_m: &HsiImage) -> Result<usize> {
    let (hr, hc) = (y_h.rows(), y_h.cols());
    let (mr, mc) = (y_m.rows(), y_m.cols());
    if mr % hr == 0 && mc % hc == 0 && mr / hr == mc / hc && mr / hr >= 1 {
        Ok(mr / hr)
    } else {
        Err(Error::Parameter(format!(
            "grids {mr}x{mc} and {hr}x{hc} have no common decimation factor; pass --decimation"
        )))
    }
}

/// Subspace and denoiser guide shared by `fuse` and `contraction`: the basis
/// comes from the interpolated coarse observation, the guide is its latent
/// encoding on the full grid.
fn subspace_and_guide(
    y_h: &HsiImage,
    decimation: usize,
    ms_dims: SpatialDims,
    dim: usize,
) -> Result<(Subspace, HsiImage)> {
    let sub = estimate_subspace(&upsample(y_h, decimation)?, dim)?;
    let guide = surrogate_latent(y_h, &sub, decimation, ms_dims)?;
    Ok((sub, guide))
}

/// Default contraction factor estimate for the report; skipped on problems
/// too large to sweep comfortably.
fn maybe_mu(prob: &FusionProblem, gamma: f64) -> Result<Option<f64>> {
    if prob.latent_rows() * prob.latent_dim() > DENSE_OPERATOR_CAP {
        return Ok(None);
    }
    let op = PnpOperator::of_problem(prob, gamma);
    Ok(Some(power_method_mu(&op, &PowerOptions::default())?.value))
}

// --- simulate -------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
struct SyntheticEcho {
    rows: usize,
    cols: usize,
    bands: usize,
    rank: usize,
    seed: u64,
}

#[derive(Serialize)]
struct SimulateReport {
    command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic: Option<SyntheticEcho>,
    model: ModelConfig,
    snr_h: String,
    snr_m: String,
    seed: u64,
    outputs: Vec<String>,
}

pub fn simulate(args: SimulateArgs, file: &FileConfig) -> Result<()> {
    let seed = pick(args.seed, file.seed, 0);
    let snr_h = pick(args.snr_h, file.snr_h, f64::INFINITY);
    let snr_m = pick(args.snr_m, file.snr_m, f64::INFINITY);

    let synthetic = match &args.synthetic {
        Some(values) => {
            let dims: Vec<usize> = values[..4]
                .iter()
                .map(|v| usize::try_from(*v))
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Parameter("synthetic sizes exceed the platform".into()))?;
            Some(SyntheticEcho {
                rows: dims[0],
                cols: dims[1],
                bands: dims[2],
                rank: dims[3],
                seed: values[4],
            })
        }
        None => None,
    };
    let scene = match (&args.input, &synthetic) {
        (Some(path), None) => read_hsb(path)?,
        (None, Some(s)) => {
            generate_scene(SpatialDims::new(s.rows, s.cols), s.bands, s.rank, s.seed)?
        }
        // The argument parser enforces exactly one source.
        _ => unreachable!("argument parser allows exactly one scene source"),
    };

    let model_cfg = resolve_model(&args.model, file, scene.bands(), 4)?;
    let model = model_cfg.build(scene.dims(), scene.bands())?;
    let noise = NoiseSpec {
        snr_h_db: snr_h,
        snr_m_db: snr_m,
        seed,
    };
    let (y_h, y_m) = simulate_observations(&scene, &model, &noise)?;

    ensure_dir(&args.out)?;
    let mut outputs = Vec::new();
    for (name, img) in [("Y_h.hsb", &y_h), ("Y_m.hsb", &y_m)] {
        let path = args.out.join(name);
        write_hsb(&path, img)?;
        say!("wrote {} ({}, {} bands)", shown(&path), img.dims(), img.bands());
        outputs.push(shown(&path));
    }
    if synthetic.is_some() {
        let path = args.out.join("ground_truth.hsb");
        write_hsb(&path, &scene)?;
        say!(
            "wrote {} ({}, {} bands)",
            shown(&path),
            scene.dims(),
            scene.bands()
        );
        outputs.push(shown(&path));
    }

    let report = SimulateReport {
        command: "simulate",
        input: args.input.as_deref().map(shown),
        synthetic,
        model: model_cfg,
        snr_h: format!("{snr_h}"),
        snr_m: format!("{snr_m}"),
        seed,
        outputs,
    };
    let path = write_report(&args.out, &report)?;
    say!("wrote {}", shown(&path));
    Ok(())
}

// --- fuse -------------------------------------------------------------

#[derive(Serialize)]
struct FuseEcho {
    hs: String,
    ms: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    gt: Option<String>,
    model: ModelConfig,
    denoiser: DenoiserEcho,
    fusion: FusionEcho,
}

#[derive(Serialize)]
struct FuseReport {
    command: &'static str,
    config: FuseEcho,
    beta: f64,
    gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mu: Option<f64>,
    iterations: usize,
    converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    empirical_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    outputs: Vec<String>,
}

pub fn fuse(args: FuseArgs, file: &FileConfig) -> Result<()> {
    let y_h = read_hsb(&args.hs)?;
    let y_m = read_hsb(&args.ms)?;
    let gt = args.gt.as_ref().map(read_hsb).transpose()?;

    let seed = pick(args.seed, file.seed, 0);
    let decimation_default = infer_decimation(&y_h, &y_m)?;
    let model_cfg = resolve_model(&args.model, file, y_h.bands(), decimation_default)?;
    let subspace_dim = pick(args.subspace_dim, file.subspace_dim, y_h.bands().min(4));
    let (kind, den_echo) = resolve_denoiser(&args.denoiser, file, seed)?;
    let gamma_frac = pick(args.gamma_frac, file.gamma_frac, 1.8);
    let max_iters = pick(args.max_iters, file.max_iters, 1000);
    let tol = pick(args.tol, file.tol, 1e-8);
    let init_choice = resolve_choice(
        args.init,
        file.init.as_ref(),
        InitChoice::Surrogate,
        "init",
    )?;

    let model = model_cfg.build(y_m.dims(), y_h.bands())?;
    let decimation = model.decimation;
    let (sub, guide) = subspace_and_guide(&y_h, decimation, y_m.dims(), subspace_dim)?;
    let den = build_denoiser(kind, &guide, &den_echo.params())?;
    let prob = FusionProblem::new(y_h, y_m, model, sub, den)?;

    let init = match init_choice {
        InitChoice::Zeros => Init::Zeros,
        InitChoice::Ones => Init::Ones,
        InitChoice::Noise => Init::Noise(seed),
        InitChoice::Surrogate => Init::Surrogate,
    };
    let opts = FusionOptions {
        step: StepSize::Fraction(gamma_frac),
        max_iters,
        tol,
        init,
        record_trace: true,
        ground_truth: gt.clone(),
    };

    ensure_dir(&args.out)?;
    let trace_path = args
        .trace
        .clone()
        .unwrap_or_else(|| args.out.join("trace.csv"));
    let config = FuseEcho {
        hs: shown(&args.hs),
        ms: shown(&args.ms),
        gt: args.gt.as_deref().map(shown),
        model: model_cfg,
        denoiser: den_echo,
        fusion: FusionEcho {
            subspace_dim,
            gamma_frac,
            max_iters,
            tol,
            init: choice_name(init_choice),
            seed,
        },
    };

    match hydefuse::fusion::run(&prob, &opts) {
        Ok(result) => {
            write_trace(&trace_path, &result.trace)?;
            let image_path = args.out.join("Z_hat.hsb");
            write_hsb(&image_path, &result.image)?;
            let metrics = match &gt {
                Some(reference) => Some(compute_metrics(reference, &result.image, decimation)?),
                None => None,
            };
            let report = FuseReport {
                command: "fuse",
                config,
                // The fraction policy always measures beta before stepping.
                beta: result.beta.expect("fraction policy reports beta"),
                gamma: result.gamma,
                mu: maybe_mu(&prob, result.gamma)?,
                iterations: result.trace.iterations_run,
                converged: result.trace.converged,
                empirical_rate: result.trace.empirical_rate,
                metrics,
                error: None,
                outputs: vec![shown(&image_path), shown(&trace_path)],
            };
            let report_path = write_report(&args.out, &report)?;
            if report.converged {
                say!("converged after {} iterations", report.iterations);
            } else {
                say!(
                    "stopped at the {}-iteration budget without meeting tol {tol:e}",
                    report.iterations
                );
            }
            if let Some(m) = &report.metrics {
                say!("{}", m.table());
            }
            for path in &report.outputs {
                say!("wrote {path}");
            }
            say!("wrote {}", shown(&report_path));
            Ok(())
        }
        Err(err) => {
            // Divergence still exports the partial trace and the report so
            // the run can be inspected; the exit code tells it apart.
            let diagnostics = match &err {
                Error::Divergence { diagnostics, .. } => diagnostics,
                Error::NonFinite { diagnostics } => diagnostics,
                _ => return Err(err),
            };
            write_trace(&trace_path, &diagnostics.trace)?;
            let est = power_method_beta(&prob, &PowerOptions::default());
            let beta = if est.converged && est.value > 0.0 {
                est.value
            } else {
                prob.analytic_beta_bound()
            };
            let report = FuseReport {
                command: "fuse",
                config,
                beta,
                gamma: gamma_frac / beta,
                mu: None,
                iterations: diagnostics.iterations,
                converged: false,
                empirical_rate: diagnostics.trace.empirical_rate,
                metrics: None,
                error: Some(err.to_string()),
                outputs: vec![shown(&trace_path)],
            };
            let report_path = write_report(&args.out, &report)?;
            say!("wrote {}", shown(&trace_path));
            say!("wrote {}", shown(&report_path));
            Err(err)
        }
    }
}

// --- denoise ----------------------------------------------------------

#[derive(Serialize)]
struct DenoiseReport {
    command: &'static str,
    input: String,
    denoiser: DenoiserEcho,
    outputs: Vec<String>,
}

pub fn denoise(args: DenoiseArgs, file: &FileConfig) -> Result<()> {
    let input = read_hsb(&args.input)?;
    let seed = pick(args.seed, file.seed, 0);
    let (kind, den_echo) = resolve_denoiser(&args.denoiser, file, seed)?;
    let den = build_denoiser(kind, &input, &den_echo.params())?;
    let filtered = HsiImage::new(input.dims(), den.apply(input.data())?)?;

    ensure_dir(&args.out)?;
    let out_path = args.out.join("denoised.hsb");
    write_hsb(&out_path, &filtered)?;
    let report = DenoiseReport {
        command: "denoise",
        input: shown(&args.input),
        denoiser: den_echo,
        outputs: vec![shown(&out_path)],
    };
    let report_path = write_report(&args.out, &report)?;
    say!(
        "wrote {} ({}, {} bands)",
        shown(&out_path),
        filtered.dims(),
        filtered.bands()
    );
    say!("wrote {}", shown(&report_path));
    Ok(())
}

// --- contraction --------------------------------------------------------

#[derive(Serialize)]
struct ContractionEcho {
    hs: String,
    ms: String,
    model: ModelConfig,
    subspace_dim: usize,
    patch: usize,
    window: usize,
    clusters: usize,
    seed: u64,
    gamma_frac: Vec<f64>,
    sigma1: Vec<f64>,
    sigma2: Vec<f64>,
}

#[derive(Serialize)]
struct ContractionCmdReport {
    command: &'static str,
    config: ContractionEcho,
    beta: f64,
    all_contractive: bool,
    outputs: Vec<String>,
}

pub fn contraction(args: ContractionArgs, file: &FileConfig) -> Result<()> {
    let y_h = read_hsb(&args.hs)?;
    let y_m = read_hsb(&args.ms)?;

    let seed = pick(args.seed, file.seed, 0);
    let decimation_default = infer_decimation(&y_h, &y_m)?;
    let model_cfg = resolve_model(&args.model, file, y_h.bands(), decimation_default)?;
    let subspace_dim = pick(args.subspace_dim, file.subspace_dim, y_h.bands().min(4));
    let defaults = DenoiserParams::default();
    let fracs = args
        .gamma_frac
        .or(file.gamma_frac.map(|v| vec![v]))
        .unwrap_or_else(|| vec![0.5, 1.0, 1.5, 1.9]);
    let sigma1 = args
        .sigma1
        .or(file.sigma1.map(|v| vec![v]))
        .unwrap_or_else(|| vec![defaults.sigma_w]);
    let sigma2 = args
        .sigma2
        .or(file.sigma2.map(|v| vec![v]))
        .unwrap_or_else(|| vec![defaults.sigma_v]);
    if sigma1.len() != sigma2.len() {
        return Err(Error::Parameter(format!(
            "bandwidth grids must pair up; got {} and {} values",
            sigma1.len(),
            sigma2.len()
        )));
    }
    let sigmas: Vec<(f64, f64)> = sigma1.iter().copied().zip(sigma2.iter().copied()).collect();
    let params = DenoiserParams {
        patch_size: pick(args.patch, file.patch, defaults.patch_size),
        window: pick(args.window, file.window, defaults.window),
        sigma_w: sigma1[0],
        sigma_v: sigma2[0],
        clusters: pick(args.clusters, file.clusters, defaults.clusters),
        seed,
    };

    let model = model_cfg.build(y_m.dims(), y_h.bands())?;
    let (sub, guide) = subspace_and_guide(&y_h, model.decimation, y_m.dims(), subspace_dim)?;
    let den = KernelDenoiser::build_cascade(&guide, &params)?;
    let prob = FusionProblem::new(y_h, y_m, model, sub, den)?;

    let sweep = verify_contraction_suite(&prob, &fracs, &sigmas)?;

    ensure_dir(&args.out)?;
    let table_path = args.out.join("mu_table.csv");
    let mut table = std::fs::File::create(&table_path)?;
    sweep.to_csv(&mut table)?;
    let report = ContractionCmdReport {
        command: "contraction",
        config: ContractionEcho {
            hs: shown(&args.hs),
            ms: shown(&args.ms),
            model: model_cfg,
            subspace_dim,
            patch: params.patch_size,
            window: params.window,
            clusters: params.clusters,
            seed,
            gamma_frac: fracs,
            sigma1,
            sigma2,
        },
        beta: sweep.beta,
        all_contractive: sweep.all_contractive,
        outputs: vec![shown(&table_path)],
    };
    let report_path = write_report(&args.out, &report)?;
    say!(
        "swept {} grid points at beta {:.6}; contraction below the step limit: {}",
        sweep.rows.len(),
        sweep.beta,
        sweep.all_contractive
    );
    say!("wrote {}", shown(&table_path));
    say!("wrote {}", shown(&report_path));
    Ok(())
}

// --- metrics ----------------------------------------------------------

#[derive(Serialize)]
struct MetricsCmdReport {
    command: &'static str,
    gt: String,
    input: String,
    scale: usize,
    metrics: MetricsReport,
}

pub fn metrics(args: MetricsArgs, file: &FileConfig) -> Result<()> {
    let reference = read_hsb(&args.gt)?;
    let estimate = read_hsb(&args.input)?;
    let scale = pick(args.decimation, file.decimation, 1);
    let scores = compute_metrics(&reference, &estimate, scale)?;
    say!("{}", scores.table());
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        let report = MetricsCmdReport {
            command: "metrics",
            gt: shown(&args.gt),
            input: shown(&args.input),
            scale,
            metrics: scores,
        };
        let report_path = write_report(out, &report)?;
        say!("wrote {}", shown(&report_path));
    }
    Ok(())
}

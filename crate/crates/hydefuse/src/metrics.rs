//! Reference-based quality metrics for fused and denoised images.
//!
//! All metrics assume the common convention for reflectance-like data: the
//! nominal peak is 1.0, so PSNR is `10 log10(1 / MSE)`. PSNR is reported as
//! the mean of per-band values (the usual convention in fusion tables), with
//! a global-MSE variant available separately; both are capped at 100 dB so
//! exact matches stay finite.

use nalgebra::DVectorView;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hsi::HsiImage;

/// PSNR ceiling in dB; hit only by (numerically) exact reconstructions.
pub const PSNR_CAP: f64 = 100.0;

/// Side length of the sliding window for the universal image quality index.
const UIQI_WINDOW: usize = 8;

/// Relative variance below which a window counts as flat. Mean subtraction
/// of a numerically constant window leaves variance at the level of squared
/// rounding error, so flatness is judged against the window's own scale.
const UIQI_VAR_FLOOR: f64 = 1e-28;

/// The five standard fusion-quality numbers.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricsReport {
    /// Mean over bands of per-band PSNR, dB, capped at 100.
    pub psnr: f64,
    /// Global root-mean-square error.
    pub rmse: f64,
    /// Mean spectral angle per pixel, degrees.
    pub sam: f64,
    /// Relative global dimensionless error, scaled by the resolution ratio.
    pub ergas: f64,
    /// Mean universal image quality index over bands and sliding windows.
    pub uiqi: f64,
}

impl MetricsReport {
    /// The report as a JSON object with exactly these five keys.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain float struct serializes")
    }

    /// The report as an aligned two-column table.
    pub fn table(&self) -> String {
        format!(
            "psnr  {:>12.6}\nrmse  {:>12.6}\nsam   {:>12.6}\nergas {:>12.6}\nuiqi  {:>12.6}",
            self.psnr, self.rmse, self.sam, self.ergas, self.uiqi
        )
    }
}

fn check_same_shape(reference: &HsiImage, estimate: &HsiImage) -> Result<()> {
    if reference.dims() != estimate.dims() || reference.bands() != estimate.bands() {
        return Err(Error::dimension(
            "metrics",
            format!("{} x {} bands", reference.dims(), reference.bands()),
            format!("{} x {} bands", estimate.dims(), estimate.bands()),
        ));
    }
    Ok(())
}

fn band_mse(reference: &HsiImage, estimate: &HsiImage, b: usize) -> f64 {
    let r = reference.band(b);
    let e = estimate.band(b);
    r.iter()
        .zip(e.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / r.len() as f64
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Mean over bands of per-band PSNR against a peak of 1.0.
pub fn mean_psnr(reference: &HsiImage, estimate: &HsiImage) -> Result<f64> {
    check_same_shape(reference, estimate)?;
    let bands = reference.bands();
    let total: f64 = (0..bands)
        .map(|b| psnr_from_mse(band_mse(reference, estimate, b)))
        .sum();
    Ok(total / bands as f64)
}

/// PSNR from the mean-square error pooled over all bands at once. Differs
/// from [`mean_psnr`] by at most a fraction of a dB on typical data.
pub fn global_psnr(reference: &HsiImage, estimate: &HsiImage) -> Result<f64> {
    check_same_shape(reference, estimate)?;
    let n = (reference.pixel_count() * reference.bands()) as f64;
    let sse: f64 = reference
        .data()
        .iter()
        .zip(estimate.data().iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(psnr_from_mse(sse / n))
}

fn sam_degrees(reference: &HsiImage, estimate: &HsiImage) -> f64 {
    let n = reference.pixel_count();
    let bands = reference.bands();
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut u = vec![0.0; bands];
    let mut v = vec![0.0; bands];
    for i in 0..n {
        let mut nr = 0.0;
        let mut ne = 0.0;
        for b in 0..bands {
            let r = reference.data()[(i, b)];
            let e = estimate.data()[(i, b)];
            nr += r * r;
            ne += e * e;
            u[b] = r;
            v[b] = e;
        }
        if nr == 0.0 || ne == 0.0 {
            continue;
        }
        // Angle between the unit spectra via the half-angle identity. Unlike
        // arccos of the normalized dot product, this stays accurate near zero
        // and returns an exact zero for identical spectra.
        let (nr, ne) = (nr.sqrt(), ne.sqrt());
        let mut diff = 0.0;
        let mut sum = 0.0;
        for b in 0..bands {
            let a = u[b] / nr;
            let c = v[b] / ne;
            diff += (a - c) * (a - c);
            sum += (a + c) * (a + c);
        }
        total += 2.0 * diff.sqrt().atan2(sum.sqrt()).to_degrees();
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

fn ergas(reference: &HsiImage, estimate: &HsiImage, scale: usize) -> f64 {
    let bands = reference.bands();
    let mut acc = 0.0;
    for b in 0..bands {
        let rmse_b = band_mse(reference, estimate, b).sqrt();
        let mean_b = reference.band(b).mean();
        acc += (rmse_b / mean_b) * (rmse_b / mean_b);
    }
    100.0 / scale as f64 * (acc / bands as f64).sqrt()
}

/// Wang-Bovik index of one window pair, with the degenerate cases pinned:
/// two flat windows count as a perfect match, a flat window against a
/// varying one as a total miss.
fn uiqi_window(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cov = 0.0;
    for (a, b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cov += (a - mx) * (b - my);
    }
    vx /= n - 1.0;
    vy /= n - 1.0;
    cov /= n - 1.0;
    match (vx <= UIQI_VAR_FLOOR * mx * mx, vy <= UIQI_VAR_FLOOR * my * my) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => {
            let q = 4.0 * cov * mx * my / ((vx + vy) * (mx * mx + my * my));
            if q.is_finite() {
                q
            } else {
                0.0
            }
        }
    }
}

fn uiqi_band(r: DVectorView<'_, f64>, e: DVectorView<'_, f64>, rows: usize, cols: usize) -> f64 {
    // Clamp so tiny images still produce a defined index.
    let win = UIQI_WINDOW.min(rows).min(cols);
    let mut total = 0.0;
    let mut count = 0usize;
    let mut x = vec![0.0; win * win];
    let mut y = vec![0.0; win * win];
    for r0 in 0..=(rows - win) {
        for c0 in 0..=(cols - win) {
            let mut p = 0;
            for dr in 0..win {
                for dc in 0..win {
                    let idx = (r0 + dr) * cols + (c0 + dc);
                    x[p] = r[idx];
                    y[p] = e[idx];
                    p += 1;
                }
            }
            total += uiqi_window(&x, &y);
            count += 1;
        }
    }
    total / count as f64
}

fn uiqi(reference: &HsiImage, estimate: &HsiImage) -> f64 {
    let rows = reference.rows();
    let cols = reference.cols();
    let per_band: Vec<f64> = (0..reference.bands())
        .into_par_iter()
        .map(|b| uiqi_band(reference.band(b), estimate.band(b), rows, cols))
        .collect();
    per_band.iter().sum::<f64>() / per_band.len() as f64
}

/// Computes all five metrics of `estimate` against `reference`. `scale` is
/// the spatial resolution ratio between the fused grid and the coarse
/// observation, entering only the relative-error normalization.
pub fn compute_metrics(
    reference: &HsiImage,
    estimate: &HsiImage,
    scale: usize,
) -> Result<MetricsReport> {
    check_same_shape(reference, estimate)?;
    if scale == 0 {
        return Err(Error::Parameter("metric scale ratio must be >= 1".into()));
    }
    let n = (reference.pixel_count() * reference.bands()) as f64;
    let sse: f64 = reference
        .data()
        .iter()
        .zip(estimate.data().iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(MetricsReport {
        psnr: mean_psnr(reference, estimate)?,
        rmse: (sse / n).sqrt(),
        sam: sam_degrees(reference, estimate),
        ergas: ergas(reference, estimate, scale),
        uiqi: uiqi(reference, estimate),
    })
}

//! Uncertainty-quality diagnostics: standardised residuals, histogram fits,
//! trajectory error, graph recovery and the two degenerate training outcomes.

use std::f64::consts::PI;

use serde::Serialize;
use statrs::distribution::{Cauchy, ContinuousCDF, Normal};

use crate::autodiff::pairwise_sum;
use crate::model::{ordered_pairs, EdgePosterior};
use crate::sim::InteractionGraph;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CalibrationError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("uncertainty must be positive, found {0}")]
    NonPositiveSigma(f64),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("need at least {need} samples, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("posterior has {rows} rows, graphs need {expected}")]
    Posterior { rows: usize, expected: usize },
}

/// Standardised residuals pooled over everything, plus per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct ZScoreSet {
    pub values: Vec<f64>,
    pub per_coord: [Vec<f64>; 4],
}

impl ZScoreSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        pairwise_sum(&self.values) / self.values.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        let sq: Vec<f64> = self.values.iter().map(|v| (v - m) * (v - m)).collect();
        (pairwise_sum(&sq) / (self.values.len() as f64 - 1.0)).sqrt()
    }

    pub fn median_abs(&self) -> f64 {
        let mut a: Vec<f64> = self.values.iter().map(|v| v.abs()).collect();
        a.sort_by(f64::total_cmp);
        quantile_sorted(&a, 0.5)
    }
}

/// `z = (pred - target) / sigma` over flat arrays whose innermost axis is
/// the four phase coordinates.
pub fn z_scores(
    pred: &[f64],
    target: &[f64],
    sigma: &[f64],
) -> Result<ZScoreSet, CalibrationError> {
    if pred.len() != target.len() {
        return Err(CalibrationError::Length(pred.len(), target.len()));
    }
    if pred.len() != sigma.len() {
        return Err(CalibrationError::Length(pred.len(), sigma.len()));
    }
    let mut values = Vec::with_capacity(pred.len());
    let mut per_coord: [Vec<f64>; 4] = Default::default();
    for i in 0..pred.len() {
        if !(sigma[i] > 0.0) {
            return Err(CalibrationError::NonPositiveSigma(sigma[i]));
        }
        let z = (pred[i] - target[i]) / sigma[i];
        if !z.is_finite() {
            return Err(CalibrationError::NonFinite(i));
        }
        values.push(z);
        per_coord[i % 4].push(z);
    }
    Ok(ZScoreSet { values, per_coord })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Counts divided by (in-range total x bin width).
    pub density: Vec<f64>,
    pub n_in_range: usize,
    pub n_total: usize,
}

impl Histogram {
    /// `n_bins` equal bins over the central 99% quantile range.
    pub fn central(values: &[f64], n_bins: usize) -> Histogram {
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let lo = quantile_sorted(&s, 0.005);
        let mut hi = quantile_sorted(&s, 0.995);
        if hi <= lo {
            hi = lo + 1e-12_f64.max(lo.abs() * 1e-12);
        }
        let w = (hi - lo) / n_bins as f64;
        let edges: Vec<f64> = (0..=n_bins).map(|i| lo + w * i as f64).collect();
        let mut counts = vec![0usize; n_bins];
        for &v in &s {
            if v < lo || v > hi {
                continue;
            }
            let b = (((v - lo) / w) as usize).min(n_bins - 1);
            counts[b] += 1;
        }
        let n_in: usize = counts.iter().sum();
        let density = counts
            .iter()
            .map(|&c| c as f64 / (n_in as f64 * w))
            .collect();
        Histogram {
            edges,
            counts,
            density,
            n_in_range: n_in,
            n_total: values.len(),
        }
    }

    pub fn area(&self) -> f64 {
        self.density
            .iter()
            .zip(self.edges.windows(2))
            .map(|(d, e)| d * (e[1] - e[0]))
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count,density\n");
        for i in 0..self.counts.len() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                self.edges[i],
                self.edges[i + 1],
                self.counts[i],
                self.density[i]
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Lorentzian,
}

/// Fitted location and width (Gaussian sigma or Lorentzian FWHM) with the
/// reduced chi-square quality of fit, or a failure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitResult {
    pub family: Family,
    pub location: f64,
    pub width: f64,
    pub qof: f64,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub histogram: Histogram,
    pub gaussian: FitResult,
    pub lorentzian: FitResult,
    pub best: Option<Family>,
}

pub const MIN_FIT_SAMPLES: usize = 1000;

fn cdf(family: Family, loc: f64, width: f64, x: f64) -> f64 {
    match family {
        Family::Gaussian => Normal::new(loc, width).map_or(f64::NAN, |d| d.cdf(x)),
        Family::Lorentzian => Cauchy::new(loc, width / 2.0).map_or(f64::NAN, |d| d.cdf(x)),
    }
}

/// Mean density per bin of the family truncated to the histogram range.
fn model_heights(family: Family, params: [f64; 2], edges: &[f64]) -> Vec<f64> {
    let (loc, width) = (params[0], params[1].exp());
    let c: Vec<f64> = edges.iter().map(|&x| cdf(family, loc, width, x)).collect();
    let mass = c[c.len() - 1] - c[0];
    c.windows(2)
        .zip(edges.windows(2))
        .map(|(p, e)| (p[1] - p[0]) / mass / (e[1] - e[0]))
        .collect()
}

fn chi2(family: Family, params: [f64; 2], h: &Histogram, err: &[f64]) -> f64 {
    let m = model_heights(family, params, &h.edges);
    let terms: Vec<f64> = m
        .iter()
        .zip(&h.density)
        .zip(err)
        .map(|((m, d), e)| ((d - m) / e).powi(2))
        .collect();
    let s = pairwise_sum(&terms);
    if s.is_finite() {
        s
    } else {
        f64::INFINITY
    }
}

/// Levenberg-Marquardt on `(location, ln width)` with central-difference
/// Jacobians of the weighted residuals.
fn levenberg_marquardt(
    family: Family,
    start: [f64; 2],
    h: &Histogram,
    err: &[f64],
) -> Option<([f64; 2], f64)> {
    let resid = |p: [f64; 2]| -> Vec<f64> {
        model_heights(family, p, &h.edges)
            .iter()
            .zip(&h.density)
            .zip(err)
            .map(|((m, d), e)| (m - d) / e)
            .collect()
    };
    let mut p = start;
    let mut cost = chi2(family, p, h, err);
    if !cost.is_finite() {
        return None;
    }
    let mut lambda = 1e-3;
    for _ in 0..200 {
        let r = resid(p);
        let mut jac = [vec![0.0; r.len()], vec![0.0; r.len()]];
        for k in 0..2 {
            let step = 1e-6 * p[k].abs().max(1e-3);
            let (mut a, mut b) = (p, p);
            a[k] += step;
            b[k] -= step;
            let (ra, rb) = (resid(a), resid(b));
            for i in 0..r.len() {
                jac[k][i] = (ra[i] - rb[i]) / (2.0 * step);
            }
        }
        let dot = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(a, b)| a * b).sum() };
        let jtj = [
            [dot(&jac[0], &jac[0]), dot(&jac[0], &jac[1])],
            [dot(&jac[1], &jac[0]), dot(&jac[1], &jac[1])],
        ];
        let jtr = [dot(&jac[0], &r), dot(&jac[1], &r)];
        let mut improved = false;
        for _ in 0..30 {
            let a = [
                [jtj[0][0] * (1.0 + lambda), jtj[0][1]],
                [jtj[1][0], jtj[1][1] * (1.0 + lambda)],
            ];
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            if det == 0.0 || !det.is_finite() {
                lambda *= 10.0;
                continue;
            }
            let dx = [
                -(a[1][1] * jtr[0] - a[0][1] * jtr[1]) / det,
                -(a[0][0] * jtr[1] - a[1][0] * jtr[0]) / det,
            ];
            let cand = [p[0] + dx[0], p[1] + dx[1]];
            let c = chi2(family, cand, h, err);
            if c < cost {
                let rel = (cost - c) / cost.max(1e-300);
                p = cand;
                cost = c;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if rel < 1e-12 {
                    return Some((p, cost));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Some((p, cost))
}

fn fit_family(family: Family, h: &Histogram, sorted: &[f64]) -> FitResult {
    let median = quantile_sorted(sorted, 0.5);
    let iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
    // Gaussian IQR = 1.349 sigma; Cauchy IQR = 2 * scale = FWHM
    let width0 = match family {
        Family::Gaussian => iqr / 1.349,
        Family::Lorentzian => iqr,
    }
    .max(1e-12);
    let err: Vec<f64> = h
        .counts
        .iter()
        .zip(h.edges.windows(2))
        .map(|(&c, e)| (c.max(1) as f64).sqrt() / (h.n_in_range as f64 * (e[1] - e[0])))
        .collect();
    let mut best: Option<([f64; 2], f64)> = None;
    for scale in [1.0, 0.5, 2.0] {
        for shift in [0.0, -0.25, 0.25] {
            let start = [median + shift * width0, (width0 * scale).ln()];
            if let Some((p, c)) = levenberg_marquardt(family, start, h, &err) {
                if best.is_none_or(|(_, bc)| c < bc) {
                    best = Some((p, c));
                }
            }
        }
    }
    let dof = h.counts.len().saturating_sub(2).max(1) as f64;
    match best {
        Some((p, c)) if c.is_finite() && p[1].exp().is_finite() => FitResult {
            family,
            location: p[0],
            width: p[1].exp(),
            qof: c / dof,
            failed: false,
        },
        _ => FitResult {
            family,
            location: f64::NAN,
            width: f64::NAN,
            qof: f64::NAN,
            failed: true,
        },
    }
}

/// Histogram of the z-scores with Gaussian and Lorentzian fits.
pub fn fit_distributions(values: &[f64], n_bins: usize) -> Result<FitReport, CalibrationError> {
    if values.len() < MIN_FIT_SAMPLES {
        return Err(CalibrationError::TooFew {
            need: MIN_FIT_SAMPLES,
            got: values.len(),
        });
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(CalibrationError::NonFinite(i));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let histogram = Histogram::central(&sorted, n_bins.max(3));
    let gaussian = fit_family(Family::Gaussian, &histogram, &sorted);
    let lorentzian = fit_family(Family::Lorentzian, &histogram, &sorted);
    let best = match (gaussian.failed, lorentzian.failed) {
        (true, true) => None,
        (false, true) => Some(Family::Gaussian),
        (true, false) => Some(Family::Lorentzian),
        (false, false) if gaussian.qof <= lorentzian.qof => Some(Family::Gaussian),
        _ => Some(Family::Lorentzian),
    };
    Ok(FitReport {
        histogram,
        gaussian,
        lorentzian,
        best,
    })
}

/// Mean squared error over aligned flat arrays.
pub fn mse_metric(pred: &[f64], target: &[f64]) -> Result<f64, CalibrationError> {
    if pred.len() != target.len() {
        return Err(CalibrationError::Length(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(CalibrationError::TooFew { need: 1, got: 0 });
    }
    let sq: Vec<f64> = pred
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    Ok(pairwise_sum(&sq) / sq.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdgeAccuracy {
    /// Percent, best assignment.
    pub overall: f64,
    /// Percent per ground-truth layer (springs, charges) under that assignment.
    pub per_layer: Vec<f64>,
}

/// Hard-decoded edge agreement with the ground truth. Each encoder factor is
/// read as "interaction present" when its argmax type is not the first; the
/// best factor-to-layer assignment and per-factor label orientation are used.
pub fn edge_accuracy(
    posterior: &EdgePosterior,
    graphs: &[InteractionGraph],
) -> Result<EdgeAccuracy, CalibrationError> {
    let n = graphs.first().map_or(0, |g| g.n_particles());
    let pairs = ordered_pairs(n);
    let expected = graphs.len() * pairs.len();
    if posterior.logits.rows() != expected || posterior.factors < 2 || expected == 0 {
        return Err(CalibrationError::Posterior {
            rows: posterior.logits.rows(),
            expected,
        });
    }
    let choice = posterior.argmax();
    // agree[f][layer] = rows where factor f's on/off equals the layer truth
    let mut agree = vec![[0usize; 2]; posterior.factors];
    for (b, g) in graphs.iter().enumerate() {
        for (e, &(r, s)) in pairs.iter().enumerate() {
            let row = &choice[b * pairs.len() + e];
            let truth = [g.spring(r, s), g.charge_edge(r, s)];
            for (f, &c) in row.iter().enumerate() {
                for layer in 0..2 {
                    if (c != 0) == truth[layer] {
                        agree[f][layer] += 1;
                    }
                }
            }
        }
    }
    let total = expected as f64;
    let score = |f: usize, layer: usize| -> f64 {
        let a = agree[f][layer] as f64 / total;
        a.max(1.0 - a)
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for f0 in 0..posterior.factors {
        for f1 in 0..posterior.factors {
            if f0 == f1 {
                continue;
            }
            let per = vec![score(f0, 0) * 100.0, score(f1, 1) * 100.0];
            let mean = (per[0] + per[1]) / 2.0;
            if best.as_ref().is_none_or(|(m, _)| mean > *m) {
                best = Some((mean, per));
            }
        }
    }
    let (overall, per_layer) = best.expect("at least two factors");
    Ok(EdgeAccuracy { overall, per_layer })
}

/// Summary of predicted uncertainties for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct SigmaStats {
    pub min: f64,
    pub median: f64,
    pub iqr: f64,
    pub max: f64,
}

impl SigmaStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Some(SigmaStats {
            min: s[0],
            median: quantile_sorted(&s, 0.5),
            iqr: quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25),
            max: s[s.len() - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Pathologies {
    pub constant_sigma: bool,
    pub overestimated_sigma: bool,
}

impl Pathologies {
    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.constant_sigma {
            v.push("CONSTANT_SIGMA");
        }
        if self.overestimated_sigma {
            v.push("OVERESTIMATED_SIGMA");
        }
        v
    }
}

pub const MIN_LOG_EPOCHS: usize = 10;

/// `CONSTANT_SIGMA`: every epoch in the final half has sigma IQR below 1% of
/// `sigma0`. `OVERESTIMATED_SIGMA`: median |z| below 0.2 while the mean MSE
/// over the last 10% of rollout steps exceeds ten times that of the first 10%.
pub fn detect_pathologies(
    sigma_log: &[SigmaStats],
    sigma0: f64,
    median_abs_z: f64,
    mse_by_step: &[f64],
) -> Result<Pathologies, CalibrationError> {
    if sigma_log.len() < MIN_LOG_EPOCHS {
        return Err(CalibrationError::TooFew {
            need: MIN_LOG_EPOCHS,
            got: sigma_log.len(),
        });
    }
    let half = sigma_log.len().div_ceil(2);
    let constant_sigma = sigma_log[sigma_log.len() - half..]
        .iter()
        .all(|s| s.iqr < 0.01 * sigma0);
    let overestimated_sigma = if mse_by_step.is_empty() {
        false
    } else {
        let k = mse_by_step.len().div_ceil(10);
        let early = pairwise_sum(&mse_by_step[..k]) / k as f64;
        let late = pairwise_sum(&mse_by_step[mse_by_step.len() - k..]) / k as f64;
        median_abs_z < 0.2 && late > 10.0 * early
    };
    Ok(Pathologies {
        constant_sigma,
        overestimated_sigma,
    })
}

/// Gaussian density, for plotting fitted curves next to histograms.
pub fn gaussian_pdf(x: f64, loc: f64, sigma: f64) -> f64 {
    (-0.5 * ((x - loc) / sigma).powi(2)).exp() / (sigma * (2.0 * PI).sqrt())
}

/// Lorentzian density with full width at half maximum `gamma`.
pub fn lorentzian_pdf(x: f64, loc: f64, gamma: f64) -> f64 {
    let hw = gamma / 2.0;
    hw / (PI * ((x - loc).powi(2) + hw * hw))
}

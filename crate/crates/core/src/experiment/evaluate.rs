use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{ExperimentConfig, ExperimentError};
use crate::autodiff::{Checkpoint, Graph, Tensor};
use crate::calibration::{
    detect_pathologies, edge_accuracy, fit_distributions, mse_metric, z_scores, CalibrationError,
    EdgeAccuracy, FitReport, FitResult, Pathologies, SigmaStats, ZScoreSet, MIN_FIT_SAMPLES,
};
use crate::model::{Batch, Fnri, Mode, SigmaMode};
use crate::sim::Dataset;

const HIST_BINS: usize = 60;
const COORDS: [&str; 4] = ["x", "y", "vx", "vy"];

/// Restores the model and the configuration it was trained with.
pub fn load_checkpoint(path: &Path) -> Result<(ExperimentConfig, Fnri), ExperimentError> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = ExperimentConfig::from_toml(&ckpt.metadata)?;
    let model = Fnri::from_checkpoint(cfg.model.clone(), &ckpt)?;
    Ok((cfg, model))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub trajectories: usize,
    pub edge_accuracy: EdgeAccuracy,
    /// Free rollout, normalised units.
    pub mse: f64,
    pub mse_by_step: Vec<f64>,
    pub z_mean: Option<f64>,
    pub z_std: Option<f64>,
    pub z_median_abs: Option<f64>,
    /// `None` when the run log is missing or too short.
    pub pathologies: Option<Pathologies>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    /// Absent for fixed-variance models.
    pub zscores: Option<ZScoreSet>,
    pub fit: Option<FitReport>,
    pub coord_fits: Vec<FitReport>,
}

/// Free rollout over the decoder window from the last encoder state, with
/// hard edge assignments. Deterministic for a given model and dataset.
pub fn evaluate(
    model: &Fnri,
    cfg: &ExperimentConfig,
    data: &Dataset,
    sigma_log: Option<&[SigmaStats]>,
) -> Result<Evaluation, ExperimentError> {
    let mc = &model.config;
    let steps = mc.decoder_window;
    let mut pred = Vec::new();
    let mut target = Vec::new();
    let mut sigma = Vec::new();
    let mut step_sq = vec![(0.0, 0usize); steps];
    let mut logits = Vec::new();
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(cfg.training.batch_size) {
        let batch = Batch::from_dataset(data, chunk, mc)?;
        let g = Graph::new();
        let p = model.bind(&g, false);
        let x = g.constant(batch.encoder_input.clone());
        let (l, _) = model.encode(&p, x, &batch.layout, Mode::Eval)?;
        let posterior = model.posterior(&l.value());
        let z = g.constant(posterior.hard_sample());
        let roll = model.rollout(&p, batch.initial_state(), z, &batch.layout, steps, None)?;
        for k in 0..steps {
            let m = roll.means[k].value();
            let t = batch.targets[k].data();
            for (a, b) in m.data().iter().zip(t) {
                step_sq[k].0 += (a - b) * (a - b);
                step_sq[k].1 += 1;
            }
            pred.extend_from_slice(m.data());
            target.extend_from_slice(t);
            sigma.extend_from_slice(roll.sigmas[k].value().data());
        }
        logits.push(posterior.logits);
    }
    let cols = mc.logit_dim();
    let mut all = Vec::new();
    for t in &logits {
        all.extend_from_slice(t.data());
    }
    let posterior = model.posterior(&Tensor::from_rows(all.len() / cols, cols, all));
    let graphs: Vec<_> = data.trajectories.iter().map(|t| t.graph.clone()).collect();
    let accuracy = edge_accuracy(&posterior, &graphs)?;
    let mse = mse_metric(&pred, &target)?;
    let mse_by_step: Vec<f64> = step_sq.iter().map(|(s, n)| s / *n as f64).collect();

    let zscores = if mc.sigma_mode == SigmaMode::Fixed {
        None
    } else {
        Some(z_scores(&pred, &target, &sigma)?)
    };
    let (fit, coord_fits) = match &zscores {
        Some(z) if z.len() >= MIN_FIT_SAMPLES => {
            let fit = fit_distributions(&z.values, HIST_BINS)?;
            let coords = if z.per_coord.iter().all(|v| v.len() >= MIN_FIT_SAMPLES) {
                z.per_coord
                    .iter()
                    .map(|v| fit_distributions(v, HIST_BINS))
                    .collect::<Result<Vec<_>, _>>()?
            } else {
                Vec::new()
            };
            (Some(fit), coords)
        }
        _ => (None, Vec::new()),
    };
    let median_abs = zscores.as_ref().map(|z| z.median_abs());
    let pathologies = match sigma_log {
        Some(log) => match detect_pathologies(
            log,
            mc.sigma0,
            median_abs.unwrap_or(f64::INFINITY),
            &mse_by_step,
        ) {
            Ok(p) => Some(p),
            Err(CalibrationError::TooFew { .. }) => None,
            Err(e) => return Err(e.into()),
        },
        None => None,
    };
    Ok(Evaluation {
        metrics: MetricsReport {
            trajectories: data.len(),
            edge_accuracy: accuracy,
            mse,
            mse_by_step,
            z_mean: zscores.as_ref().map(|z| z.mean()),
            z_std: zscores.as_ref().map(|z| z.std()),
            z_median_abs: median_abs,
            pathologies,
        },
        zscores,
        fit,
        coord_fits,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6e}"))
}

fn write_fit(s: &mut String, prefix: &str, f: &FitResult) {
    let name = match f.family {
        crate::calibration::Family::Gaussian => "gaussian",
        crate::calibration::Family::Lorentzian => "lorentzian",
    };
    if f.failed {
        let _ = writeln!(s, "{prefix}{name}_fit: failed");
    } else {
        let _ = writeln!(s, "{prefix}{name}_location: {:.6e}", f.location);
        let _ = writeln!(s, "{prefix}{name}_width: {:.6e}", f.width);
        let _ = writeln!(s, "{prefix}{name}_qof: {:.6e}", f.qof);
    }
}

impl Evaluation {
    /// `key: value` lines.
    pub fn report_text(&self) -> String {
        let m = &self.metrics;
        let mut s = String::new();
        let _ = writeln!(s, "trajectories: {}", m.trajectories);
        let _ = writeln!(s, "edge_accuracy_percent: {:.4}", m.edge_accuracy.overall);
        let _ = writeln!(
            s,
            "edge_accuracy_springs_percent: {:.4}",
            m.edge_accuracy.per_layer[0]
        );
        let _ = writeln!(
            s,
            "edge_accuracy_charges_percent: {:.4}",
            m.edge_accuracy.per_layer[1]
        );
        let _ = writeln!(s, "mse: {:.6e}", m.mse);
        let _ = writeln!(s, "mse_first_step: {:.6e}", m.mse_by_step[0]);
        let _ = writeln!(
            s,
            "mse_last_step: {:.6e}",
            m.mse_by_step[m.mse_by_step.len() - 1]
        );
        let _ = writeln!(s, "z_mean: {}", opt(m.z_mean));
        let _ = writeln!(s, "z_std: {}", opt(m.z_std));
        let _ = writeln!(s, "z_median_abs: {}", opt(m.z_median_abs));
        match &self.fit {
            Some(fit) => {
                let best = match fit.best {
                    Some(crate::calibration::Family::Gaussian) => "gaussian",
                    Some(crate::calibration::Family::Lorentzian) => "lorentzian",
                    None => "none",
                };
                let _ = writeln!(s, "best_fit: {best}");
                write_fit(&mut s, "", &fit.gaussian);
                write_fit(&mut s, "", &fit.lorentzian);
                for (c, f) in COORDS.iter().zip(&self.coord_fits) {
                    write_fit(&mut s, &format!("{c}_"), &f.gaussian);
                    write_fit(&mut s, &format!("{c}_"), &f.lorentzian);
                }
            }
            None if self.zscores.is_some() => {
                let _ = writeln!(s, "best_fit: too_few_samples");
            }
            None => {
                let _ = writeln!(s, "best_fit: -");
            }
        }
        let path = match &m.pathologies {
            None => "unknown".to_string(),
            Some(p) if p.names().is_empty() => "none".to_string(),
            Some(p) => p.names().join(","),
        };
        let _ = writeln!(s, "pathologies: {path}");
        s
    }

    /// `report.txt`, `mse_by_step.csv`, `metrics.json` and, for learned
    /// variances, z-score histograms pooled and per coordinate.
    pub fn write(&self, dir: &Path) -> Result<(), ExperimentError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), self.report_text())?;
        fs::write(
            dir.join("metrics.json"),
            serde_json::to_string_pretty(&self.metrics)?,
        )?;
        let mut csv = String::from("step,mse\n");
        for (k, v) in self.metrics.mse_by_step.iter().enumerate() {
            let _ = writeln!(csv, "{},{v}", k + 1);
        }
        fs::write(dir.join("mse_by_step.csv"), csv)?;
        if let Some(fit) = &self.fit {
            fs::write(dir.join("zscore_hist.csv"), fit.histogram.to_csv())?;
            for (c, f) in COORDS.iter().zip(&self.coord_fits) {
                fs::write(
                    dir.join(format!("zscore_hist_{c}.csv")),
                    f.histogram.to_csv(),
                )?;
            }
        }
        Ok(())
    }
}

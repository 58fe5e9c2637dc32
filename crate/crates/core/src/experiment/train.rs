use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, ExperimentError, PRIOR_FILE};
use crate::autodiff::{pairwise_sum, Adam, AdamConfig, Graph, StepHalving, Tensor};
use crate::calibration::{edge_accuracy, SigmaStats};
use crate::error_profile::PriorSchedule;
use crate::loss::{total_loss, LossContext, LossError, LossKind, LossValue};
use crate::model::{gumbel_softmax, sample_gumbel, Batch, Fnri, Mode};
use crate::sim::{Dataset, DatasetSplits};

pub const CHECKPOINT_FILE: &str = "checkpoint.fnrc";
pub const RUNLOG_FILE: &str = "runlog.jsonl";

/// Loss components averaged per trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTotals {
    pub l_y: f64,
    pub l_kd: f64,
    pub convex: f64,
    pub prior_kl: f64,
    pub niw: f64,
    pub total: f64,
}

impl LossTotals {
    fn accumulate(&mut self, v: &LossValue) {
        let get = |n: &str| v.get(n).unwrap_or(0.0);
        self.l_y += get("l_y");
        self.l_kd += get("l_kd");
        self.convex += get("convex");
        self.prior_kl += get("prior_kl");
        self.niw += get("niw");
    }

    /// Divides by `n` and recomputes `total` as the sum of the parts.
    fn finish(mut self, n: usize) -> Self {
        let n = n.max(1) as f64;
        for v in [
            &mut self.l_y,
            &mut self.l_kd,
            &mut self.convex,
            &mut self.prior_kl,
            &mut self.niw,
        ] {
            *v /= n;
        }
        self.total = self.l_y + self.l_kd + self.convex + self.prior_kl + self.niw;
        self
    }
}

/// One line of `runlog.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Counted from 1.
    pub epoch: usize,
    pub lr: f64,
    pub train: LossTotals,
    pub val: LossTotals,
    /// Teacher-forced, hard edges, normalised units.
    pub val_mse: f64,
    pub val_edge_accuracy: f64,
    pub sigma: SigmaStats,
    pub checkpointed: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Fnri,
    pub log: Vec<EpochRecord>,
    /// Epoch of the saved checkpoint.
    pub best_epoch: Option<usize>,
    /// Epoch whose loss or gradients went non-finite; training stopped there.
    pub aborted_at: Option<usize>,
}

pub fn read_runlog(path: &Path) -> Result<Vec<EpochRecord>, ExperimentError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn resolve_prior(
    cfg: &ExperimentConfig,
    run_dir: &Path,
) -> Result<Option<PriorSchedule>, ExperimentError> {
    if cfg.loss.kind != LossKind::AnisoGaussKl {
        return Ok(None);
    }
    let path = match &cfg.loss.prior_schedule {
        Some(p) if Path::new(p).is_absolute() => PathBuf::from(p),
        Some(p) => run_dir.join(p),
        None => run_dir.join(PRIOR_FILE),
    };
    if !path.exists() {
        return Err(ExperimentError::Config(format!(
            "prior schedule {} not found; run error-profile first",
            path.display()
        )));
    }
    Ok(Some(PriorSchedule::read_csv(&path)?))
}

/// A collapsed or non-finite sigma counts as numerical breakdown, not as a
/// configuration error.
fn unless_breakdown<T>(r: Result<T, LossError>) -> Result<Option<T>, ExperimentError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(LossError::NonPositiveSigma(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

struct Pass {
    totals: LossTotals,
    sq_err: Vec<f64>,
    sigmas: Vec<f64>,
    logits: Vec<Tensor>,
}

/// Scores a split in evaluation mode with hard edges and teacher forcing.
/// `None` on numerical breakdown.
fn validate(
    model: &Fnri,
    cfg: &ExperimentConfig,
    data: &Dataset,
    prior: Option<&PriorSchedule>,
    epoch: usize,
) -> Result<Option<Pass>, ExperimentError> {
    let mc = &model.config;
    let mut pass = Pass {
        totals: LossTotals::default(),
        sq_err: Vec::new(),
        sigmas: Vec::new(),
        logits: Vec::new(),
    };
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(cfg.training.batch_size) {
        let batch = Batch::from_dataset(data, chunk, mc)?;
        let g = Graph::new();
        let p = model.bind(&g, false);
        let x = g.constant(batch.encoder_input.clone());
        let (logits, _) = model.encode(&p, x, &batch.layout, Mode::Eval)?;
        let posterior = model.posterior(&logits.value());
        let z = g.constant(posterior.hard_sample());
        let roll = model.rollout(
            &p,
            batch.initial_state(),
            z,
            &batch.layout,
            mc.decoder_window,
            Some(&batch.teacher),
        )?;
        let ctx = LossContext {
            config: &cfg.loss,
            epoch,
            sigma0: mc.sigma0,
            factors: mc.n_edge_factors,
            types: mc.edge_types_per_factor,
            prior: prior.map(|s| (s, data.normalization)),
            teacher_every: Some(mc.teacher_force_every),
        };
        let Some((_, value)) = unless_breakdown(total_loss(
            &ctx,
            &roll.means,
            &roll.sigmas,
            &batch.targets,
            logits,
        ))?
        else {
            return Ok(None);
        };
        pass.totals.accumulate(&value);
        for (k, m) in roll.means.iter().enumerate() {
            for (a, b) in m.value().data().iter().zip(batch.targets[k].data()) {
                pass.sq_err.push((a - b) * (a - b));
            }
            pass.sigmas.extend_from_slice(roll.sigmas[k].value().data());
        }
        pass.logits.push(posterior.logits);
    }
    Ok(Some(pass))
}

fn stack_rows(parts: &[Tensor]) -> Tensor {
    let cols = parts.first().map_or(0, |t| t.cols());
    let mut data = Vec::new();
    for t in parts {
        data.extend_from_slice(t.data());
    }
    Tensor::from_rows(data.len() / cols.max(1), cols, data)
}

/// Trains from scratch, writing the run log and the best checkpoint (by
/// validation loss) into `run_dir`. `on_epoch` sees each record as it is
/// written. A non-finite loss or gradient stops training; the checkpoint
/// from the last good epoch stays on disk.
pub fn train(
    cfg: &ExperimentConfig,
    data: &DatasetSplits,
    run_dir: &Path,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, ExperimentError> {
    cfg.validate()?;
    fs::create_dir_all(run_dir)?;
    let prior = resolve_prior(cfg, run_dir)?;
    let mc = &cfg.model;
    let metadata = cfg.to_toml()?;
    let mut model = Fnri::new(mc.clone())?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.training.lr0,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let schedule = StepHalving {
        lr0: cfg.training.lr0,
        halving_epochs: cfg.training.lr_halving,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.train);
    let mut log_file = BufWriter::new(File::create(run_dir.join(RUNLOG_FILE))?);
    let train_set = &data.train;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut outcome = TrainOutcome {
        model: model.clone(),
        log: Vec::new(),
        best_epoch: None,
        aborted_at: None,
    };
    let mut best = f64::INFINITY;

    'epochs: for epoch in 0..cfg.training.epochs {
        let started = Instant::now();
        let lr = schedule.rate(epoch);
        adam.set_lr(lr);
        order.shuffle(&mut rng);
        let mut totals = LossTotals::default();
        for chunk in order.chunks(cfg.training.batch_size) {
            let batch = Batch::from_dataset(train_set, chunk, mc)?;
            let g = Graph::new();
            let p = model.bind(&g, true);
            let x = g.constant(batch.encoder_input.clone());
            let (logits, stats) = model.encode(&p, x, &batch.layout, Mode::Train)?;
            let noise = sample_gumbel(batch.layout.edge_rows(), mc.logit_dim(), &mut rng);
            let z = gumbel_softmax(
                logits,
                mc.n_edge_factors,
                mc.edge_types_per_factor,
                mc.tau,
                Some(&noise),
            )?;
            let roll = model.rollout(
                &p,
                batch.initial_state(),
                z,
                &batch.layout,
                mc.decoder_window,
                Some(&batch.teacher),
            )?;
            let ctx = LossContext {
                config: &cfg.loss,
                epoch,
                sigma0: mc.sigma0,
                factors: mc.n_edge_factors,
                types: mc.edge_types_per_factor,
                prior: prior.as_ref().map(|s| (s, train_set.normalization)),
                teacher_every: Some(mc.teacher_force_every),
            };
            let scored = unless_breakdown(total_loss(
                &ctx,
                &roll.means,
                &roll.sigmas,
                &batch.targets,
                logits,
            ))?;
            let Some((loss, value)) = scored.filter(|(_, v)| v.total.is_finite()) else {
                outcome.aborted_at = Some(epoch + 1);
                break 'epochs;
            };
            let grads = g.backward(loss)?;
            let grads: Vec<Tensor> = p.iter().map(|v| grads.wrt(*v)).collect();
            if grads
                .iter()
                .any(|t| t.data().iter().any(|v| !v.is_finite()))
            {
                outcome.aborted_at = Some(epoch + 1);
                break 'epochs;
            }
            adam.step(&mut model.params, &grads)?;
            model.update_running(&stats);
            totals.accumulate(&value);
        }
        if model
            .params
            .iter()
            .any(|t| t.data().iter().any(|v| !v.is_finite()))
        {
            outcome.aborted_at = Some(epoch + 1);
            break;
        }

        let Some(val) = validate(&model, cfg, &data.validation, prior.as_ref(), epoch)? else {
            outcome.aborted_at = Some(epoch + 1);
            break;
        };
        let val_totals = val.totals.finish(data.validation.len());
        if !val_totals.total.is_finite() {
            outcome.aborted_at = Some(epoch + 1);
            break;
        }
        let posterior = model.posterior(&stack_rows(&val.logits));
        let accuracy = edge_accuracy(
            &posterior,
            &data
                .validation
                .trajectories
                .iter()
                .map(|t| t.graph.clone())
                .collect::<Vec<_>>(),
        )?;
        let checkpointed = val_totals.total < best;
        if checkpointed {
            best = val_totals.total;
            model
                .to_checkpoint(metadata.clone())
                .save(&run_dir.join(CHECKPOINT_FILE))?;
            outcome.best_epoch = Some(epoch + 1);
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train: totals.finish(train_set.len()),
            val: val_totals,
            val_mse: pairwise_sum(&val.sq_err) / val.sq_err.len() as f64,
            val_edge_accuracy: accuracy.overall,
            sigma: SigmaStats::from_values(&val.sigmas).expect("validation split is non-empty"),
            checkpointed,
            seconds: started.elapsed().as_secs_f64(),
        };
        serde_json::to_writer(&mut log_file, &record)?;
        log_file.write_all(b"\n")?;
        log_file.flush()?;
        on_epoch(&record);
        outcome.log.push(record);
    }
    outcome.model = model;
    Ok(outcome)
}

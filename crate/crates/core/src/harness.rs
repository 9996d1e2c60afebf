//! The online continual learning game loop: each batch is first predicted
//! (scored on its first album), then revealed, offered to the replay buffer,
//! and trained on under a step budget; checkpoints are serialized at
//! configured fractions of the stream and evaluated for backward/forward
//! transfer against the held-out validation set.

use std::collections::HashSet;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{derive_seed, seed_role, ExperimentConfig, ReplayConfig, ScheduleKind};
use crate::error::{OclError, Result};
use crate::learner::{BlindState, Learner, StepStats};
use crate::metrics::{
    backward_transfer, default_windows, forward_transfer, transfer_reports_to_csv, MetricsLedger,
    TransferReport,
};
use crate::replay::{AdRep, ReplayBuffer};
use crate::schedule::{schedule_rows_to_csv, Polrs, Schedule, ScheduleRow};
use crate::stream::{
    first_album, holdout_split, materialize, Example, StreamCursor, ValidationSet,
};

/// A checkpoint taken at `fraction` of the stream, i.e. stream time `step`.
#[derive(Debug, Clone)]
pub struct CheckpointRecord {
    pub fraction: f64,
    pub step: u64,
    pub path: Option<PathBuf>,
}

/// Flat summary of a finished run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_acc_online: f64,
    pub steps: u64,
    pub examples: usize,
    pub batch: usize,
    pub gd_steps: u32,
    pub members: u32,
    pub sgd_steps: u64,
    pub sgd_steps_per_member: u64,
    pub schedule: String,
    pub replay: String,
    pub lr0: f64,
    pub stream_seed: u64,
    pub master_seed: u64,
    pub horizon: u64,
    pub dim: usize,
    pub classes: usize,
    pub final_buffer_capacity: usize,
    /// Backward accuracy of the last checkpoint over the full history window.
    pub acc_backward_full: Option<f64>,
    pub checkpoints: Vec<(String, u64)>,
}

impl RunSummary {
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("final_acc_O = {}\n", self.final_acc_online));
        out.push_str(&format!("steps = {}\n", self.steps));
        out.push_str(&format!("examples = {}\n", self.examples));
        out.push_str(&format!("batch = {}\n", self.batch));
        out.push_str(&format!("gd_steps = {}\n", self.gd_steps));
        out.push_str(&format!("members = {}\n", self.members));
        out.push_str(&format!("sgd_steps = {}\n", self.sgd_steps));
        out.push_str(&format!(
            "sgd_steps_per_member = {}\n",
            self.sgd_steps_per_member
        ));
        out.push_str(&format!("schedule = {}\n", self.schedule));
        out.push_str(&format!("replay = {}\n", self.replay));
        out.push_str(&format!("lr0 = {}\n", self.lr0));
        out.push_str(&format!("stream_seed = {}\n", self.stream_seed));
        out.push_str(&format!("master_seed = {}\n", self.master_seed));
        out.push_str(&format!("H = {}\n", self.horizon));
        out.push_str(&format!("dim = {}\n", self.dim));
        out.push_str(&format!("classes = {}\n", self.classes));
        out.push_str(&format!("final_R = {}\n", self.final_buffer_capacity));
        out.push_str(&format!(
            "acc_B_at_last_full = {}\n",
            self.acc_backward_full
                .map(|a| a.to_string())
                .unwrap_or_else(|| "nan".to_string())
        ));
        for (frac, step) in &self.checkpoints {
            out.push_str(&format!("checkpoint.{frac}.T = {step}\n"));
        }
        out
    }
}

/// Full output of a run; files are additionally written under
/// `config.out_dir` when set.
#[derive(Debug)]
pub struct RunResult {
    pub ledger: MetricsLedger,
    pub schedule_log: Vec<ScheduleRow>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub transfers: Vec<TransferReport>,
    pub summary: RunSummary,
}

enum ModelState {
    Single { learner: Learner, schedule: Schedule },
    Population(Polrs),
}

impl ModelState {
    fn reported_learner(&self) -> &Learner {
        match self {
            ModelState::Single { learner, .. } => learner,
            ModelState::Population(polrs) => polrs.member(polrs.best()),
        }
    }

    fn members(&self) -> u32 {
        match self {
            ModelState::Single { .. } => 1,
            ModelState::Population(_) => 3,
        }
    }
}

fn format_fraction(frac: f64) -> String {
    format!("{frac:.2}")
}

fn checkpoint_plan(fractions: &[f64], horizon: u64) -> Result<Vec<(f64, u64, String)>> {
    let mut plan = Vec::with_capacity(fractions.len());
    let mut names = HashSet::new();
    for &frac in fractions {
        let step = ((frac * horizon as f64).round() as u64).clamp(1, horizon);
        let name = format_fraction(frac);
        if !names.insert(name.clone()) {
            return Err(OclError::config(format!(
                "checkpoint fractions collide at label {name}"
            )));
        }
        plan.push((frac, step, name));
    }
    Ok(plan)
}

fn count_correct(predictions: &[usize], truth: &[usize]) -> u64 {
    predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| p == t)
        .count() as u64
}

fn split_training_stats(
    stats: &StepStats,
    labels: &[usize],
    stream_len: usize,
) -> (f64, Option<f64>) {
    let stream_correct = count_correct(&stats.predictions[..stream_len], &labels[..stream_len]);
    let stream_frac = stream_correct as f64 / stream_len as f64;
    let replay_len = labels.len() - stream_len;
    let replay_frac = (replay_len > 0).then(|| {
        let c = count_correct(&stats.predictions[stream_len..], &labels[stream_len..]);
        c as f64 / replay_len as f64
    });
    (stream_frac, replay_frac)
}

fn stamp_step(err: OclError, step: u64) -> OclError {
    match err {
        OclError::Numerical(detail) => OclError::Numerical(format!("step {step}: {detail}")),
        other => other,
    }
}

/// Runs the full test-then-train protocol and returns the collected metrics,
/// checkpoints and transfer reports. Identical configs produce bit-identical
/// results, including under `polrs_parallel`.
pub fn run(config: &ExperimentConfig) -> Result<RunResult> {
    config.validate()?;
    if let (ReplayConfig::On { adrep: Some(_), .. }, true) =
        (&config.replay, config.replay_ratio == 0.0)
    {
        return Err(OclError::config("adrep requires a positive replay_ratio"));
    }

    let full = materialize(&config.spec)?;
    let (train, validation) = holdout_split(
        &full,
        config.holdout_fraction,
        derive_seed(config.master_seed, seed_role::HOLDOUT),
    )?;
    let total_steps = (train.examples.len() + config.batch_size - 1) / config.batch_size;
    let horizon = config.spec.steps;
    let plan = checkpoint_plan(&config.checkpoint_fractions, horizon)?;

    let template = Learner::new(
        config.arch,
        config.spec.dim,
        config.spec.num_classes,
        config.weight_decay,
        derive_seed(config.master_seed, seed_role::INIT),
    )?;
    let mut model = match config.schedule {
        ScheduleKind::Constant => ModelState::Single {
            learner: template,
            schedule: Schedule::Constant { base: config.lr0 },
        },
        ScheduleKind::Cosine => ModelState::Single {
            learner: template,
            schedule: Schedule::Cosine {
                base: config.lr0,
                horizon: config.schedule_horizon.unwrap_or(total_steps as u64),
            },
        },
        ScheduleKind::Polrs => {
            let interval = config
                .polrs_interval
                .unwrap_or_else(|| (total_steps as u64 / 20).max(1));
            ModelState::Population(Polrs::new(template, config.lr0, interval)?)
        }
    };

    let mut buffer = match &config.replay {
        ReplayConfig::Off => None,
        ReplayConfig::On {
            policy, capacity, ..
        } => Some(ReplayBuffer::new(
            *policy,
            *capacity,
            derive_seed(config.master_seed, seed_role::BUFFER),
        )?),
    };
    let mut adrep = match &config.replay {
        ReplayConfig::On {
            adrep: Some(ad), ..
        } => Some(AdRep::new(*ad)?),
        _ => None,
    };
    let mut sampler_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.master_seed, seed_role::SAMPLER));

    let mut ledger = MetricsLedger::new();
    let mut schedule_log: Vec<ScheduleRow> = Vec::new();
    let mut checkpoints: Vec<CheckpointRecord> = Vec::new();
    let mut transfers: Vec<TransferReport> = Vec::new();
    let mut tested_ids: HashSet<u64> = HashSet::new();
    let mut sgd_steps: u64 = 0;
    let mut steps: u64 = 0;

    let loop_result = (|| -> Result<()> {
        let mut cursor = StreamCursor::new();
        let mut checkpoint_idx = 0;
        let n_replay = (config.batch_size as f64 * config.replay_ratio).round() as usize;

        while let Some(batch) = cursor.next_batch(&train, config.batch_size) {
            let step = steps;
            // Online test: score the first album (or the whole batch) with
            // the reported model before anything trains on it.
            let eval_set = if config.eval_all_albums {
                batch
            } else {
                first_album(batch)
            };
            let eval_rows: Vec<&[f64]> = eval_set.iter().map(|e| e.features.as_slice()).collect();
            let eval_labels: Vec<usize> = eval_set.iter().map(|e| e.label).collect();
            match &mut model {
                ModelState::Single { learner, .. } => {
                    let (_, preds) = learner.predict_batch(&eval_rows)?;
                    ledger.update_online(count_correct(&preds, &eval_labels), eval_set.len() as u64);
                }
                ModelState::Population(polrs) => {
                    let reported = polrs.best();
                    let mut fracs = [0.0f64; 3];
                    let mut reported_correct = 0;
                    for (j, member) in polrs.members().iter().enumerate() {
                        let (_, preds) = member.predict_batch(&eval_rows)?;
                        let correct = count_correct(&preds, &eval_labels);
                        fracs[j] = correct as f64 / eval_set.len() as f64;
                        if j == reported {
                            reported_correct = correct;
                        }
                    }
                    ledger.update_online(reported_correct, eval_set.len() as u64);
                    polrs.observe(fracs);
                }
            }
            if config.audit {
                tested_ids.extend(batch.iter().map(|e| e.id));
            }

            // Reveal labels; every batch example is offered to the buffer.
            if let Some(buf) = buffer.as_mut() {
                for ex in batch {
                    buf.offer(ex);
                }
            }

            // Train: G composed-batch steps, resampling replay each time.
            let scale = batch.len() as f64 / config.lr_batch_ref as f64;
            let stream_rows: Vec<&[f64]> = batch.iter().map(|e| e.features.as_slice()).collect();
            let stream_labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
            let mut loss_sum = 0.0;
            let mut logged_lr = 0.0;
            for _g in 0..config.gd_steps {
                let replay_examples = match buffer.as_ref() {
                    Some(buf) => buf.sample(n_replay, &mut sampler_rng),
                    None => Vec::new(),
                };
                let mut rows = stream_rows.clone();
                rows.extend(replay_examples.iter().map(|e| e.features.as_slice()));
                let mut labels = stream_labels.clone();
                labels.extend(replay_examples.iter().map(|e| e.label));
                if config.audit {
                    for ex in batch.iter().chain(replay_examples.iter()) {
                        if !tested_ids.contains(&ex.id) {
                            return Err(OclError::integrity(format!(
                                "prequential violation: example {} trained before being tested at step {step}",
                                ex.id
                            )));
                        }
                    }
                }

                let (stream_frac, replay_frac, loss) = match &mut model {
                    ModelState::Single { learner, schedule } => {
                        let lr = schedule.lr_at(step)? * scale;
                        logged_lr = lr;
                        let stats = learner
                            .sgd_step(&rows, &labels, lr)
                            .map_err(|e| stamp_step(e, step))?;
                        sgd_steps += 1;
                        let (s, r) = split_training_stats(&stats, &labels, batch.len());
                        (s, r, stats.loss)
                    }
                    ModelState::Population(polrs) => {
                        let lrs = polrs.lrs();
                        let reported = polrs.best();
                        logged_lr = lrs[reported] * scale;
                        let stats: Vec<StepStats> = if config.polrs_parallel {
                            polrs
                                .members_mut()
                                .par_iter_mut()
                                .enumerate()
                                .map(|(j, member)| member.sgd_step(&rows, &labels, lrs[j] * scale))
                                .collect::<Result<Vec<_>>>()
                                .map_err(|e| stamp_step(e, step))?
                        } else {
                            let mut out = Vec::with_capacity(3);
                            for (j, member) in polrs.members_mut().iter_mut().enumerate() {
                                out.push(
                                    member
                                        .sgd_step(&rows, &labels, lrs[j] * scale)
                                        .map_err(|e| stamp_step(e, step))?,
                                );
                            }
                            out
                        };
                        sgd_steps += 3;
                        let (s, r) = split_training_stats(&stats[reported], &labels, batch.len());
                        (s, r, stats[reported].loss)
                    }
                };
                loss_sum += loss;
                ledger.update_training_accs(stream_frac, replay_frac);
                if let (Some(ad), Some(buf)) = (adrep.as_mut(), buffer.as_mut()) {
                    if let Some(r) = replay_frac {
                        ad.observe(stream_frac, r);
                        if ad.ready() {
                            let new_capacity = ad.decide(buf.capacity());
                            buf.resize(new_capacity)?;
                        }
                    }
                }
            }

            let capacity = buffer.as_ref().map_or(0, |b| b.capacity());
            ledger.push_row(step, logged_lr, capacity, loss_sum / config.gd_steps as f64);
            match &model {
                ModelState::Single { schedule, .. } => schedule_log.push(ScheduleRow {
                    step,
                    lr: schedule.lr_at(step)?,
                    member_id: 0,
                    best: 0,
                }),
                ModelState::Population(polrs) => schedule_log.extend(polrs.log_rows(step)),
            }

            steps += 1;

            // Checkpoints fire once every example before their stream time
            // has been consumed.
            while checkpoint_idx < plan.len() {
                let (frac, t, ref name) = plan[checkpoint_idx];
                let due = cursor
                    .peek_timestamp(&train)
                    .map_or(true, |next_ts| next_ts >= t);
                if !due {
                    break;
                }
                let learner = model.reported_learner();
                let path = write_learner_checkpoint(config.out_dir.as_deref(), name, learner)?;
                let reports =
                    checkpoint_transfers(config, learner, &validation, t, horizon)?;
                if let Some(dir) = config.out_dir.as_deref() {
                    let refs: Vec<&TransferReport> = reports.iter().collect();
                    fs::write(
                        dir.join(format!("transfer_T{name}.csv")),
                        transfer_reports_to_csv(&refs),
                    )?;
                }
                transfers.extend(reports);
                checkpoints.push(CheckpointRecord {
                    fraction: frac,
                    step: t,
                    path,
                });
                checkpoint_idx += 1;
            }

            // PoLRS restructure barrier at the end of the step.
            if let ModelState::Population(polrs) = &mut model {
                if polrs.restructure_due() {
                    polrs.restructure()?;
                }
            }
        }
        Ok(())
    })();

    // Flush partial logs even when the loop aborted mid-run.
    if let Some(dir) = config.out_dir.as_deref() {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), ledger.to_csv())?;
        fs::write(dir.join("schedule.csv"), schedule_rows_to_csv(&schedule_log))?;
    }
    loop_result?;

    let expected = config.gd_steps as u64 * steps * model.members() as u64;
    assert_eq!(
        sgd_steps, expected,
        "budget accounting: {sgd_steps} sgd steps, expected {expected}"
    );

    let acc_backward_full = match checkpoints.last() {
        Some(record) => {
            let report = backward_transfer(
                model.reported_learner(),
                &validation,
                record.step,
                &[record.step],
            )?;
            report.curve[0].accuracy
        }
        None => None,
    };

    let summary = RunSummary {
        final_acc_online: ledger.acc_online(),
        steps,
        examples: train.examples.len(),
        batch: config.batch_size,
        gd_steps: config.gd_steps,
        members: model.members(),
        sgd_steps,
        sgd_steps_per_member: sgd_steps / model.members() as u64,
        schedule: config.schedule.name().to_string(),
        replay: match &config.replay {
            ReplayConfig::Off => "off".to_string(),
            ReplayConfig::On { policy, adrep, .. } => {
                if adrep.is_some() {
                    format!("{}+adrep", policy.name())
                } else {
                    policy.name().to_string()
                }
            }
        },
        lr0: config.lr0,
        stream_seed: config.spec.seed,
        master_seed: config.master_seed,
        horizon,
        dim: config.spec.dim,
        classes: config.spec.num_classes,
        final_buffer_capacity: buffer.as_ref().map_or(0, |b| b.capacity()),
        acc_backward_full,
        checkpoints: plan
            .iter()
            .map(|(_, t, name)| (name.clone(), *t))
            .collect(),
    };
    if let Some(dir) = config.out_dir.as_deref() {
        fs::write(dir.join("summary.txt"), summary.to_kv_text())?;
    }

    Ok(RunResult {
        ledger,
        schedule_log,
        checkpoints,
        transfers,
        summary,
    })
}

fn checkpoint_transfers(
    config: &ExperimentConfig,
    learner: &Learner,
    validation: &ValidationSet,
    t: u64,
    horizon: u64,
) -> Result<Vec<TransferReport>> {
    let backward_windows = match &config.transfer_windows {
        Some(ws) => ws.clone(),
        None => default_windows(t),
    };
    let mut reports = vec![backward_transfer(learner, validation, t, &backward_windows)?];
    if t < horizon {
        let forward_windows = match &config.transfer_windows {
            Some(ws) => ws.clone(),
            None => default_windows(horizon - t),
        };
        reports.push(forward_transfer(learner, validation, t, &forward_windows)?);
    }
    Ok(reports)
}

fn write_learner_checkpoint(
    out_dir: Option<&Path>,
    name: &str,
    learner: &Learner,
) -> Result<Option<PathBuf>> {
    let Some(dir) = out_dir else {
        return Ok(None);
    };
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("checkpoint_T{name}.txt"));
    let mut buf = Vec::new();
    learner.write_checkpoint(&mut buf)?;
    fs::write(&path, buf)?;
    Ok(Some(path))
}

/// Runs the blind temporal-coherence baseline through the same loop: no
/// training, no replay, predictions from the modal label of the last
/// `blind_k` observed labels.
pub fn run_blind_baseline(config: &ExperimentConfig) -> Result<RunResult> {
    config.validate()?;
    let full = materialize(&config.spec)?;
    let (train, _validation) = holdout_split(
        &full,
        config.holdout_fraction,
        derive_seed(config.master_seed, seed_role::HOLDOUT),
    )?;
    let horizon = config.spec.steps;
    let plan = checkpoint_plan(&config.checkpoint_fractions, horizon)?;

    let mut blind = BlindState::new(config.blind_k)?;
    let mut ledger = MetricsLedger::new();
    let mut checkpoints = Vec::new();
    let mut cursor = StreamCursor::new();
    let mut checkpoint_idx = 0;
    let mut steps = 0u64;

    while let Some(batch) = cursor.next_batch(&train, config.batch_size) {
        let eval_set = if config.eval_all_albums {
            batch
        } else {
            first_album(batch)
        };
        // All first-album predictions happen before any of its labels are
        // revealed, so they share one window state.
        let predicted = blind.predict();
        let correct = eval_set.iter().filter(|e| e.label == predicted).count() as u64;
        ledger.update_online(correct, eval_set.len() as u64);
        for ex in batch {
            blind.update(ex.label);
        }
        ledger.push_row(steps, 0.0, 0, f64::NAN);
        steps += 1;

        while checkpoint_idx < plan.len() {
            let (frac, t, ref name) = plan[checkpoint_idx];
            let due = cursor
                .peek_timestamp(&train)
                .map_or(true, |next_ts| next_ts >= t);
            if !due {
                break;
            }
            let path = match config.out_dir.as_deref() {
                Some(dir) => {
                    fs::create_dir_all(dir)?;
                    let path = dir.join(format!("checkpoint_T{name}.txt"));
                    let mut buf = Vec::new();
                    blind.write_checkpoint(&mut buf)?;
                    fs::write(&path, buf)?;
                    Some(path)
                }
                None => None,
            };
            checkpoints.push(CheckpointRecord {
                fraction: frac,
                step: t,
                path,
            });
            checkpoint_idx += 1;
        }
    }

    let summary = RunSummary {
        final_acc_online: ledger.acc_online(),
        steps,
        examples: train.examples.len(),
        batch: config.batch_size,
        gd_steps: 0,
        members: 1,
        sgd_steps: 0,
        sgd_steps_per_member: 0,
        schedule: "blind".to_string(),
        replay: "off".to_string(),
        lr0: 0.0,
        stream_seed: config.spec.seed,
        master_seed: config.master_seed,
        horizon,
        dim: config.spec.dim,
        classes: config.spec.num_classes,
        final_buffer_capacity: 0,
        acc_backward_full: None,
        checkpoints: plan
            .iter()
            .map(|(_, t, name)| (name.clone(), *t))
            .collect(),
    };
    if let Some(dir) = config.out_dir.as_deref() {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), ledger.to_csv())?;
        fs::write(dir.join("summary.txt"), summary.to_kv_text())?;
    }

    Ok(RunResult {
        ledger,
        schedule_log: Vec::new(),
        checkpoints,
        transfers: Vec::new(),
        summary,
    })
}

/// Loads a learner checkpoint and evaluates backward (and, below the
/// horizon, forward) transfer at stream time `t`.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    validation: &ValidationSet,
    t: u64,
    horizon: u64,
    windows: Option<&[u64]>,
) -> Result<(TransferReport, Option<TransferReport>)> {
    let file = fs::File::open(checkpoint).map_err(|e| {
        OclError::integrity(format!("cannot open checkpoint {}: {e}", checkpoint.display()))
    })?;
    let learner = Learner::read_checkpoint(BufReader::new(file))?;
    let backward_windows = match windows {
        Some(ws) => ws.to_vec(),
        None => default_windows(t),
    };
    let backward = backward_transfer(&learner, validation, t, &backward_windows)?;
    let forward = if t < horizon {
        let forward_windows = match windows {
            Some(ws) => ws.to_vec(),
            None => default_windows(horizon - t),
        };
        Some(forward_transfer(&learner, validation, t, &forward_windows)?)
    } else {
        None
    };
    Ok((backward, forward))
}

/// Offline training helper: shuffled mini-batch epochs at a fixed learning
/// rate, used to validate distribution shift the way a conventionally
/// trained model would see it.
pub fn fit_offline(
    learner: &mut Learner,
    examples: &[&Example],
    epochs: u32,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<()> {
    if examples.is_empty() {
        return Err(OclError::config("fit_offline requires examples"));
    }
    if batch_size == 0 {
        return Err(OclError::config("fit_offline batch_size must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let rows: Vec<&[f64]> = chunk
                .iter()
                .map(|&i| examples[i].features.as_slice())
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| examples[i].label).collect();
            learner.sgd_step(&rows, &labels, lr)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::learner::Architecture;
    use crate::replay::BufferPolicy;
    use crate::stream::builders::{drifting_spec, stationary_spec};
    use crate::stream::AlbumSizeDist;

    fn small_config() -> ExperimentConfig {
        let spec = drifting_spec(6, 4, 600, 3, 1.0, 0.4, 5);
        let mut config = ExperimentConfig::new(spec);
        config.batch_size = 16;
        config.holdout_fraction = 0.05;
        config.lr0 = 0.05;
        config.replay = ReplayConfig::On {
            policy: BufferPolicy::Fifo,
            capacity: 64,
            adrep: None,
        };
        config
    }

    #[test]
    fn online_accuracy_is_scored_before_training() {
        // On a one-batch stream, acc_O must equal the accuracy of the
        // untrained initial model on that batch's first album.
        let spec = stationary_spec(4, 3, 20, 0.3, 9);
        let mut config = ExperimentConfig::new(spec.clone());
        config.batch_size = 32;
        config.holdout_fraction = 0.05;
        config.audit = true;
        let result = run(&config).unwrap();
        assert_eq!(result.summary.steps, 1);

        let full = materialize(&spec).unwrap();
        let (train, _) = holdout_split(
            &full,
            config.holdout_fraction,
            derive_seed(config.master_seed, seed_role::HOLDOUT),
        )
        .unwrap();
        let untrained = Learner::new(
            config.arch,
            spec.dim,
            spec.num_classes,
            config.weight_decay,
            derive_seed(config.master_seed, seed_role::INIT),
        )
        .unwrap();
        let album = first_album(&train.examples);
        let rows: Vec<&[f64]> = album.iter().map(|e| e.features.as_slice()).collect();
        let (_, preds) = untrained.predict_batch(&rows).unwrap();
        let labels: Vec<usize> = album.iter().map(|e| e.label).collect();
        let expect = count_correct(&preds, &labels) as f64 / album.len() as f64;
        assert_eq!(result.summary.final_acc_online, expect);
    }

    #[test]
    fn learning_rate_scales_with_batch_size() {
        let mut config = small_config();
        config.schedule = ScheduleKind::Constant;
        config.batch_size = 64;
        config.lr_batch_ref = 256;
        config.lr0 = 0.05;
        let result = run(&config).unwrap();
        // Full batches log lr = 0.05 * 64/256 = 0.0125.
        assert_eq!(result.ledger.rows[0].lr, 0.0125);
    }

    #[test]
    fn partial_final_batch_scales_by_actual_size() {
        let spec = stationary_spec(4, 2, 100, 0.3, 2); // 100 examples
        let mut config = ExperimentConfig::new(spec);
        config.schedule = ScheduleKind::Constant;
        config.batch_size = 64;
        config.holdout_fraction = 0.01; // 99 training examples: batches 64, 35
        config.replay = ReplayConfig::Off;
        let result = run(&config).unwrap();
        assert_eq!(result.summary.steps, 2);
        assert_eq!(result.ledger.rows[1].lr, 0.05 * 35.0 / 256.0);
    }

    #[test]
    fn budget_counts_gd_steps_and_members() {
        for (schedule, members) in [(ScheduleKind::Cosine, 1u64), (ScheduleKind::Polrs, 3u64)] {
            for gd_steps in [1u32, 5] {
                let mut config = small_config();
                config.schedule = schedule;
                config.gd_steps = gd_steps;
                let result = run(&config).unwrap();
                assert_eq!(
                    result.summary.sgd_steps,
                    gd_steps as u64 * result.summary.steps * members
                );
            }
        }
    }

    #[test]
    fn checkpoints_cover_every_fraction_and_final_has_backward_only() {
        let config = small_config();
        let result = run(&config).unwrap();
        assert_eq!(result.checkpoints.len(), 3);
        assert_eq!(result.checkpoints[2].step, 600);
        let backward: Vec<_> = result
            .transfers
            .iter()
            .filter(|r| r.direction == crate::metrics::TransferDirection::Backward)
            .collect();
        let forward: Vec<_> = result
            .transfers
            .iter()
            .filter(|r| r.direction == crate::metrics::TransferDirection::Forward)
            .collect();
        assert_eq!(backward.len(), 3);
        // No forward report at T = H.
        assert_eq!(forward.len(), 2);
        assert!(forward.iter().all(|r| r.checkpoint_step < 600));
    }

    #[test]
    fn audit_mode_passes_on_a_clean_run() {
        let mut config = small_config();
        config.audit = true;
        config.gd_steps = 2;
        assert!(run(&config).is_ok());
    }

    #[test]
    fn identical_configs_are_bit_identical() {
        let config = small_config();
        let a = run(&config).unwrap();
        let b = run(&config).unwrap();
        assert_eq!(a.ledger.to_csv(), b.ledger.to_csv());
        assert_eq!(
            schedule_rows_to_csv(&a.schedule_log),
            schedule_rows_to_csv(&b.schedule_log)
        );
        assert_eq!(a.summary.to_kv_text(), b.summary.to_kv_text());
    }

    #[test]
    fn polrs_parallel_matches_sequential_bit_for_bit() {
        let mut config = small_config();
        config.schedule = ScheduleKind::Polrs;
        config.polrs_interval = Some(7);
        let sequential = run(&config).unwrap();
        config.polrs_parallel = true;
        let parallel = run(&config).unwrap();
        assert_eq!(sequential.ledger.to_csv(), parallel.ledger.to_csv());
        assert_eq!(
            schedule_rows_to_csv(&sequential.schedule_log),
            schedule_rows_to_csv(&parallel.schedule_log)
        );
    }

    #[test]
    fn seed_override_changes_results() {
        let mut config = small_config();
        let a = run(&config).unwrap();
        config.master_seed = 999;
        let b = run(&config).unwrap();
        assert_ne!(a.ledger.to_csv(), b.ledger.to_csv());
    }

    #[test]
    fn blind_baseline_on_iid_labels_sits_at_chance() {
        let mut spec = stationary_spec(4, 712, 50_000, 0.5, 77);
        spec.album_sizes = AlbumSizeDist::fixed(1);
        spec.segments[0].class_priors = vec![1.0 / 712.0; 712];
        let mut config = ExperimentConfig::new(spec);
        config.batch_size = 1;
        config.holdout_fraction = 0.01;
        config.replay = ReplayConfig::Off;
        let result = run_blind_baseline(&config).unwrap();
        let n = result.summary.examples as f64;
        let p = 1.0 / 712.0;
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!(
            (result.summary.final_acc_online - p).abs() < 4.0 * sigma,
            "blind accuracy {} not within 4 sigma of chance {p}",
            result.summary.final_acc_online
        );
    }

    #[test]
    fn blind_baseline_exploits_album_coherence() {
        // Constant-label albums of 4 with k = 2 recover 3 of every 4.
        let mut spec = stationary_spec(4, 50, 2_000, 0.5, 31);
        spec.album_sizes = AlbumSizeDist::fixed(4);
        spec.p_album = 1.0;
        let mut config = ExperimentConfig::new(spec);
        config.batch_size = 1;
        config.blind_k = 2;
        config.holdout_fraction = 1e-9_f64.max(1.0 / 16_000.0); // keep ~every example
        config.replay = ReplayConfig::Off;
        let result = run_blind_baseline(&config).unwrap();
        assert!(
            result.summary.final_acc_online > 0.70,
            "album-coherent blind acc_O = {}",
            result.summary.final_acc_online
        );
    }

    #[test]
    fn evaluate_checkpoint_round_trips_and_matches_direct_prediction() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = small_config();
        config.out_dir = Some(dir.path().to_path_buf());
        let result = run(&config).unwrap();

        let full = materialize(&config.spec).unwrap();
        let (_, validation) = holdout_split(
            &full,
            config.holdout_fraction,
            derive_seed(config.master_seed, seed_role::HOLDOUT),
        )
        .unwrap();
        let record = &result.checkpoints[0];
        let path = record.path.clone().unwrap();
        let (bwd_a, fwd_a) =
            evaluate_checkpoint(&path, &validation, record.step, 600, Some(&[50, 200])).unwrap();
        let (bwd_b, _) =
            evaluate_checkpoint(&path, &validation, record.step, 600, Some(&[50, 200])).unwrap();
        for (a, b) in bwd_a.curve.iter().zip(&bwd_b.curve) {
            assert_eq!(a.accuracy, b.accuracy);
        }
        assert!(fwd_a.is_some());

        // Direct oracle: load the checkpoint and predict the window subset.
        let file = fs::File::open(&path).unwrap();
        let learner = Learner::read_checkpoint(BufReader::new(file)).unwrap();
        let t = record.step;
        let subset: Vec<&Example> = validation
            .examples
            .iter()
            .filter(|e| e.timestamp + 200 >= t && e.timestamp <= t)
            .collect();
        let rows: Vec<&[f64]> = subset.iter().map(|e| e.features.as_slice()).collect();
        let (_, preds) = learner.predict_batch(&rows).unwrap();
        let labels: Vec<usize> = subset.iter().map(|e| e.label).collect();
        let direct = crate::metrics::top1(&preds, &labels).unwrap();
        assert_eq!(bwd_a.curve[1].accuracy, Some(direct));
    }

    #[test]
    fn artifacts_are_written_and_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut config = small_config();
        config.schedule = ScheduleKind::Polrs;
        for dir in [&dir_a, &dir_b] {
            config.out_dir = Some(dir.path().to_path_buf());
            run(&config).unwrap();
        }
        for name in ["metrics.csv", "schedule.csv", "summary.txt", "transfer_T0.33.csv"] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
            assert!(!a.is_empty());
        }
        assert!(dir_a.path().join("checkpoint_T1.00.txt").exists());
    }

    #[test]
    fn fit_offline_learns_a_separable_problem() {
        let spec = stationary_spec(6, 3, 3_000, 0.5, 13);
        let stream = materialize(&spec).unwrap();
        let refs: Vec<&Example> = stream.examples.iter().collect();
        let mut learner = Learner::new(Architecture::SoftmaxLinear, 6, 3, 1e-4, 3).unwrap();
        fit_offline(&mut learner, &refs, 3, 32, 0.05, 11).unwrap();
        let rows: Vec<&[f64]> = refs.iter().map(|e| e.features.as_slice()).collect();
        let (_, preds) = learner.predict_batch(&rows).unwrap();
        let labels: Vec<usize> = refs.iter().map(|e| e.label).collect();
        let acc = crate::metrics::top1(&preds, &labels).unwrap();
        assert!(acc > 0.9, "offline training reached only {acc}");
    }
}

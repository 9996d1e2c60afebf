//! Evaluation quantities: running average online accuracy, training
//! accuracies on stream and replay data, top-1 accuracy, and checkpoint-based
//! backward/forward transfer over a timestamped validation set.

use std::fmt::Write as _;

use crate::error::{OclError, Result};
use crate::learner::Learner;
use crate::stream::{Example, ValidationSet};

/// Incremental mean in the `acc <- ((k-1) acc + v) / k` form.
#[derive(Debug, Clone, Default)]
pub struct RunningMean {
    mean: f64,
    count: u64,
}

impl RunningMean {
    pub fn update(&mut self, value: f64) -> f64 {
        let k = (self.count + 1) as f64;
        self.mean = ((k - 1.0) * self.mean + value) / k;
        self.count += 1;
        self.mean
    }

    pub fn value(&self) -> Option<f64> {
        (self.count > 0).then_some(self.mean)
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn reset(&mut self) {
        self.mean = 0.0;
        self.count = 0;
    }
}

/// Fraction of exact matches between predictions and labels.
pub fn top1(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(OclError::shape(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(OclError::shape("top1 requires a non-empty batch"));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// One metrics.csv row; running values captured at the end of a harness step.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub step: u64,
    pub acc_online: f64,
    pub acc_stream: Option<f64>,
    pub acc_replay: Option<f64>,
    pub lr: f64,
    pub buffer_capacity: usize,
    pub batch_loss: f64,
}

/// Raw per-harness-step online observation (correct, total), kept so running
/// values can be recomputed from scratch.
pub type OnlineObs = (u64, u64);

/// Raw per-training-step observation of stream/replay training accuracy.
#[derive(Debug, Clone, Copy)]
pub struct TrainingObs {
    pub stream_frac: f64,
    pub replay_frac: Option<f64>,
}

/// Running averages plus the raw observation logs they are derived from.
#[derive(Debug, Clone, Default)]
pub struct MetricsLedger {
    online_correct: u64,
    online_total: u64,
    stream_acc: RunningMean,
    replay_acc: RunningMean,
    pub rows: Vec<MetricRow>,
    pub online_log: Vec<OnlineObs>,
    pub training_log: Vec<TrainingObs>,
}

impl MetricsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one online-test observation and returns the running average
    /// online accuracy (correct and total accumulate over all steps).
    pub fn update_online(&mut self, correct: u64, total: u64) -> f64 {
        assert!(correct <= total, "correct {correct} exceeds total {total}");
        self.online_correct += correct;
        self.online_total += total;
        self.online_log.push((correct, total));
        self.acc_online()
    }

    pub fn acc_online(&self) -> f64 {
        if self.online_total == 0 {
            0.0
        } else {
            self.online_correct as f64 / self.online_total as f64
        }
    }

    /// Adds one training-step observation of the per-batch training
    /// accuracies and returns the running means. Replay is `None` on steps
    /// that trained without replay data, leaving its average untouched.
    pub fn update_training_accs(
        &mut self,
        stream_frac: f64,
        replay_frac: Option<f64>,
    ) -> (f64, Option<f64>) {
        debug_assert!((0.0..=1.0).contains(&stream_frac));
        let s = self.stream_acc.update(stream_frac);
        let r = match replay_frac {
            Some(frac) => {
                debug_assert!((0.0..=1.0).contains(&frac));
                Some(self.replay_acc.update(frac))
            }
            None => self.replay_acc.value(),
        };
        self.training_log.push(TrainingObs {
            stream_frac,
            replay_frac,
        });
        (s, r)
    }

    pub fn acc_stream(&self) -> Option<f64> {
        self.stream_acc.value()
    }

    pub fn acc_replay(&self) -> Option<f64> {
        self.replay_acc.value()
    }

    /// Captures a metrics.csv row with the current running values.
    pub fn push_row(&mut self, step: u64, lr: f64, buffer_capacity: usize, batch_loss: f64) {
        self.rows.push(MetricRow {
            step,
            acc_online: self.acc_online(),
            acc_stream: self.acc_stream(),
            acc_replay: self.acc_replay(),
            lr,
            buffer_capacity,
            batch_loss,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,acc_O,acc_Stream,acc_Rep,lr,R,batch_loss\n");
        for row in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                row.step,
                row.acc_online,
                opt(row.acc_stream),
                opt(row.acc_replay),
                row.lr,
                row.buffer_capacity,
                row.batch_loss
            )
            .expect("write to string");
        }
        out
    }
}

fn opt(v: Option<f64>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => "nan".to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferDirection {
    Backward,
    Forward,
}

impl TransferDirection {
    pub fn name(&self) -> &'static str {
        match self {
            TransferDirection::Backward => "backward",
            TransferDirection::Forward => "forward",
        }
    }
}

/// Accuracy of a frozen checkpoint over one validation window. Empty windows
/// report an undefined accuracy rather than zero.
#[derive(Debug, Clone)]
pub struct TransferPoint {
    pub window: u64,
    pub accuracy: Option<f64>,
    pub n_examples: usize,
}

/// Transfer curve of a frozen checkpoint at time `checkpoint_step`.
#[derive(Debug, Clone)]
pub struct TransferReport {
    pub checkpoint_step: u64,
    pub direction: TransferDirection,
    pub curve: Vec<TransferPoint>,
}

/// Backward transfer: for each window `t_B`, the frozen model's accuracy on
/// validation examples with timestamp in `[T - t_B, T]`.
pub fn backward_transfer(
    model: &Learner,
    validation: &ValidationSet,
    checkpoint_step: u64,
    windows: &[u64],
) -> Result<TransferReport> {
    transfer(
        model,
        validation,
        checkpoint_step,
        windows,
        TransferDirection::Backward,
    )
}

/// Forward transfer: windows cover `(T, T + t_F]`; the boundary timestamp T
/// belongs to the backward side only.
pub fn forward_transfer(
    model: &Learner,
    validation: &ValidationSet,
    checkpoint_step: u64,
    windows: &[u64],
) -> Result<TransferReport> {
    transfer(
        model,
        validation,
        checkpoint_step,
        windows,
        TransferDirection::Forward,
    )
}

fn transfer(
    model: &Learner,
    validation: &ValidationSet,
    checkpoint_step: u64,
    windows: &[u64],
    direction: TransferDirection,
) -> Result<TransferReport> {
    if validation.examples.is_empty() {
        return Err(OclError::config("transfer evaluation requires validation data"));
    }
    if windows.iter().any(|&w| w == 0) {
        return Err(OclError::config("transfer windows must be positive"));
    }
    let mut curve = Vec::with_capacity(windows.len());
    for &window in windows {
        let in_window = |ts: u64| match direction {
            TransferDirection::Backward => {
                ts >= checkpoint_step.saturating_sub(window) && ts <= checkpoint_step
            }
            TransferDirection::Forward => {
                ts > checkpoint_step && ts <= checkpoint_step.saturating_add(window)
            }
        };
        let subset: Vec<&Example> = validation
            .examples
            .iter()
            .filter(|e| in_window(e.timestamp))
            .collect();
        if subset.is_empty() {
            curve.push(TransferPoint {
                window,
                accuracy: None,
                n_examples: 0,
            });
            continue;
        }
        let rows: Vec<&[f64]> = subset.iter().map(|e| e.features.as_slice()).collect();
        let (_, predicted) = model.predict_batch(&rows)?;
        let labels: Vec<usize> = subset.iter().map(|e| e.label).collect();
        curve.push(TransferPoint {
            window,
            accuracy: Some(top1(&predicted, &labels)?),
            n_examples: subset.len(),
        });
    }
    Ok(TransferReport {
        checkpoint_step,
        direction,
        curve,
    })
}

/// Ten log-spaced window sizes in `[1, limit]`, deduplicated and ascending.
pub fn default_windows(limit: u64) -> Vec<u64> {
    if limit == 0 {
        return Vec::new();
    }
    let mut windows: Vec<u64> = (0..10)
        .map(|i| {
            let frac = i as f64 / 9.0;
            ((limit as f64).powf(frac)).round() as u64
        })
        .collect();
    windows.sort_unstable();
    windows.dedup();
    windows
}

/// CSV of one or more transfer reports: `T,direction,window,accuracy,n_examples`.
pub fn transfer_reports_to_csv(reports: &[&TransferReport]) -> String {
    let mut out = String::from("T,direction,window,accuracy,n_examples\n");
    for report in reports {
        for point in &report.curve {
            writeln!(
                out,
                "{},{},{},{},{}",
                report.checkpoint_step,
                report.direction.name(),
                point.window,
                opt(point.accuracy),
                point.n_examples
            )
            .expect("write to string");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::Architecture;
    use crate::stream::builders::stationary_spec;
    use crate::stream::{holdout_split, materialize};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn validation_with_labels(labels: &[usize], dim: usize) -> ValidationSet {
        let examples = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| Example {
                id: i as u64,
                timestamp: i as u64,
                features: {
                    let mut f = vec![0.0; dim];
                    f[label % dim] = 5.0;
                    f
                },
                label,
                album_id: i as u64,
                geo: None,
            })
            .collect();
        ValidationSet {
            examples,
            fraction: 0.01,
        }
    }

    /// Learner that classifies axis-aligned one-hot-ish features perfectly.
    fn perfect_learner(dim: usize, classes: usize) -> Learner {
        let mut learner = Learner::new(Architecture::SoftmaxLinear, dim, classes, 0.0, 1).unwrap();
        learner.params_mut().fill(0.0);
        for c in 0..classes {
            learner.params_mut()[c * dim + c % dim] = 1.0;
        }
        learner
    }

    #[test]
    fn online_accuracy_accumulates_counts() {
        let mut ledger = MetricsLedger::new();
        assert_eq!(ledger.update_online(1, 1), 1.0);
        assert_eq!(ledger.update_online(0, 1), 0.5);
        assert_eq!(ledger.update_online(1, 1), 2.0 / 3.0);
    }

    #[test]
    fn all_correct_stream_stays_at_one() {
        let mut ledger = MetricsLedger::new();
        for _ in 0..50 {
            assert_eq!(ledger.update_online(3, 3), 1.0);
        }
    }

    #[test]
    fn running_online_accuracy_matches_recomputation_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ledger = MetricsLedger::new();
        for _ in 0..10_000 {
            let total = rng.random_range(1..5u64);
            let correct = rng.random_range(0..=total);
            ledger.update_online(correct, total);
        }
        // Recompute from the raw log at random prefixes.
        for _ in 0..100 {
            let upto = rng.random_range(1..=ledger.online_log.len());
            let c: u64 = ledger.online_log[..upto].iter().map(|o| o.0).sum();
            let t: u64 = ledger.online_log[..upto].iter().map(|o| o.1).sum();
            let mut replay = MetricsLedger::new();
            for &(oc, ot) in &ledger.online_log[..upto] {
                replay.update_online(oc, ot);
            }
            assert_eq!(replay.acc_online().to_bits(), (c as f64 / t as f64).to_bits());
        }
    }

    #[test]
    fn batch_regrouping_leaves_online_accuracy_invariant() {
        // Per-example updates and per-batch weighted updates agree because
        // the ledger accumulates integer counts.
        let observations = [(3u64, 4u64), (1, 2), (0, 3), (2, 2)];
        let mut per_batch = MetricsLedger::new();
        for &(c, t) in &observations {
            per_batch.update_online(c, t);
        }
        let mut per_example = MetricsLedger::new();
        for &(c, t) in &observations {
            for i in 0..t {
                per_example.update_online(u64::from(i < c), 1);
            }
        }
        assert_eq!(per_batch.acc_online().to_bits(), per_example.acc_online().to_bits());
    }

    #[test]
    fn training_accs_run_and_report_absent_replay() {
        let mut ledger = MetricsLedger::new();
        let (s, r) = ledger.update_training_accs(0.4, None);
        assert_eq!(s, 0.4);
        assert_eq!(r, None);
        assert_eq!(ledger.acc_replay(), None);
        for _ in 0..9 {
            ledger.update_training_accs(0.4, None);
        }
        // Incremental-mean roundoff keeps this near-exact, not bit-exact.
        assert!((ledger.acc_stream().unwrap() - 0.4).abs() < 1e-12);
        let (_, r) = ledger.update_training_accs(0.4, Some(0.8));
        assert_eq!(r, Some(0.8));
    }

    #[test]
    fn training_accs_match_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ledger = MetricsLedger::new();
        for _ in 0..10_000 {
            let replay = if rng.random::<f64>() < 0.3 {
                None
            } else {
                Some(rng.random::<f64>())
            };
            ledger.update_training_accs(rng.random::<f64>(), replay);
        }
        // Replaying the log through a fresh ledger reproduces the running
        // values bit-exactly; a batch mean agrees to rounding.
        let mut fresh = MetricsLedger::new();
        for obs in &ledger.training_log {
            fresh.update_training_accs(obs.stream_frac, obs.replay_frac);
        }
        assert_eq!(
            fresh.acc_stream().unwrap().to_bits(),
            ledger.acc_stream().unwrap().to_bits()
        );
        assert_eq!(
            fresh.acc_replay().unwrap().to_bits(),
            ledger.acc_replay().unwrap().to_bits()
        );
        let stream_mean = ledger.training_log.iter().map(|o| o.stream_frac).sum::<f64>()
            / ledger.training_log.len() as f64;
        assert!((ledger.acc_stream().unwrap() - stream_mean).abs() < 1e-12);
        let replays: Vec<f64> = ledger
            .training_log
            .iter()
            .filter_map(|o| o.replay_frac)
            .collect();
        let replay_mean = replays.iter().sum::<f64>() / replays.len() as f64;
        assert!((ledger.acc_replay().unwrap() - replay_mean).abs() < 1e-12);
    }

    #[test]
    fn top1_basic_cases() {
        assert_eq!(top1(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(top1(&[1, 2, 3], &[4, 5, 6]).unwrap(), 0.0);
        assert_eq!(top1(&[1, 2, 3], &[1, 0, 3]).unwrap(), 2.0 / 3.0);
        assert!(matches!(top1(&[1], &[1, 2]), Err(OclError::Shape(_))));
        assert!(matches!(top1(&[], &[]), Err(OclError::Shape(_))));
    }

    #[test]
    fn perfect_model_transfers_perfectly() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let validation = validation_with_labels(&labels, 8);
        let model = perfect_learner(8, 4);
        let report = backward_transfer(&model, &validation, 80, &[5, 20, 80]).unwrap();
        for point in &report.curve {
            assert_eq!(point.accuracy, Some(1.0));
        }
        let report = forward_transfer(&model, &validation, 50, &[10, 40]).unwrap();
        for point in &report.curve {
            assert_eq!(point.accuracy, Some(1.0));
        }
    }

    #[test]
    fn full_history_window_collapses_to_plain_accuracy() {
        let labels: Vec<usize> = (0..60).map(|i| (i * 7) % 4).collect();
        let validation = validation_with_labels(&labels, 8);
        // A deliberately imperfect model: correct only on class 0 features.
        let mut model = perfect_learner(8, 4);
        for c in 1..4 {
            model.params_mut()[c * 8 + c] = 0.0;
        }
        let t = 59;
        let report = backward_transfer(&model, &validation, t, &[t]).unwrap();
        let all: Vec<&Example> = validation
            .examples
            .iter()
            .filter(|e| e.timestamp <= t)
            .collect();
        let rows: Vec<&[f64]> = all.iter().map(|e| e.features.as_slice()).collect();
        let (_, preds) = model.predict_batch(&rows).unwrap();
        let truth: Vec<usize> = all.iter().map(|e| e.label).collect();
        let direct = top1(&preds, &truth).unwrap();
        assert_eq!(report.curve[0].accuracy, Some(direct));
        assert_eq!(report.curve[0].n_examples, all.len());
    }

    #[test]
    fn window_filtering_matches_brute_force() {
        let labels: Vec<usize> = (0..500).map(|i| (i * 13) % 5).collect();
        let validation = validation_with_labels(&labels, 8);
        let model = perfect_learner(8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1_000 {
            let t = rng.random_range(0..500u64);
            let w = rng.random_range(1..500u64);
            let direction = if rng.random::<bool>() {
                TransferDirection::Backward
            } else {
                TransferDirection::Forward
            };
            let report = match direction {
                TransferDirection::Backward => {
                    backward_transfer(&model, &validation, t, &[w]).unwrap()
                }
                TransferDirection::Forward => {
                    forward_transfer(&model, &validation, t, &[w]).unwrap()
                }
            };
            let expected = validation
                .examples
                .iter()
                .filter(|e| match direction {
                    TransferDirection::Backward => {
                        e.timestamp >= t.saturating_sub(w) && e.timestamp <= t
                    }
                    TransferDirection::Forward => e.timestamp > t && e.timestamp <= t + w,
                })
                .count();
            assert_eq!(report.curve[0].n_examples, expected);
        }
    }

    #[test]
    fn boundary_timestamp_belongs_to_backward_only() {
        let labels = vec![0usize; 10];
        let validation = validation_with_labels(&labels, 4);
        let model = perfect_learner(4, 2);
        let t = 5;
        let bwd = backward_transfer(&model, &validation, t, &[1]).unwrap();
        let fwd = forward_transfer(&model, &validation, t, &[1]).unwrap();
        // Backward [4, 5] holds two examples; forward (5, 6] holds one.
        assert_eq!(bwd.curve[0].n_examples, 2);
        assert_eq!(fwd.curve[0].n_examples, 1);
    }

    #[test]
    fn empty_window_reports_undefined_not_zero() {
        let labels = vec![0usize; 5];
        let validation = validation_with_labels(&labels, 4);
        let model = perfect_learner(4, 2);
        let report = forward_transfer(&model, &validation, 100, &[10]).unwrap();
        assert_eq!(report.curve[0].accuracy, None);
        assert_eq!(report.curve[0].n_examples, 0);
        let csv = transfer_reports_to_csv(&[&report]);
        assert!(csv.contains("100,forward,10,nan,0"));
    }

    #[test]
    fn no_validation_data_is_a_configuration_error() {
        let validation = ValidationSet {
            examples: vec![],
            fraction: 0.01,
        };
        let model = perfect_learner(4, 2);
        assert!(matches!(
            backward_transfer(&model, &validation, 10, &[5]),
            Err(OclError::Config(_))
        ));
    }

    #[test]
    fn transfer_evaluation_is_pure() {
        let spec = stationary_spec(6, 3, 2_000, 0.8, 12);
        let stream = materialize(&spec).unwrap();
        let (_, validation) = holdout_split(&stream, 0.05, 7).unwrap();
        let model = Learner::new(Architecture::Mlp1 { hidden: 8 }, 6, 3, 0.0, 3).unwrap();
        let a = backward_transfer(&model, &validation, 1_500, &[10, 100, 1_500]).unwrap();
        let b = backward_transfer(&model, &validation, 1_500, &[10, 100, 1_500]).unwrap();
        for (pa, pb) in a.curve.iter().zip(&b.curve) {
            match (pa.accuracy, pb.accuracy) {
                (Some(x), Some(y)) => assert_eq!(x.to_bits(), y.to_bits()),
                (None, None) => {}
                _ => panic!("purity violated"),
            }
        }
    }

    #[test]
    fn symmetric_stationary_stream_has_matching_transfer() {
        // A stationary stream is time-symmetric around any T, so forward and
        // backward accuracies agree up to sampling noise.
        let spec = stationary_spec(6, 3, 20_000, 1.2, 19);
        let stream = materialize(&spec).unwrap();
        let (_, validation) = holdout_split(&stream, 0.10, 9).unwrap();
        let model = perfect_learner(6, 3);
        let t = 10_000;
        let w = 9_000;
        let bwd = backward_transfer(&model, &validation, t, &[w]).unwrap();
        let fwd = forward_transfer(&model, &validation, t, &[w]).unwrap();
        let (ab, af) = (
            bwd.curve[0].accuracy.unwrap(),
            fwd.curve[0].accuracy.unwrap(),
        );
        // Both windows hold ~900 samples; 4 sigma of a Bernoulli mean gap.
        let n = bwd.curve[0].n_examples.min(fwd.curve[0].n_examples) as f64;
        let tol = 4.0 * (0.25 / n).sqrt() * 2.0;
        assert!(
            (ab - af).abs() < tol,
            "backward {ab} and forward {af} differ beyond noise ({tol})"
        );
    }

    #[test]
    fn default_windows_are_log_spaced_and_deduplicated() {
        let w = default_windows(10_000);
        assert_eq!(w.first(), Some(&1));
        assert_eq!(w.last(), Some(&10_000));
        assert!(w.windows(2).all(|p| p[0] < p[1]));
        assert!(w.len() <= 10);
        assert!(default_windows(0).is_empty());
        assert_eq!(default_windows(1), vec![1]);
    }

    #[test]
    fn metrics_csv_has_expected_columns() {
        let mut ledger = MetricsLedger::new();
        ledger.update_online(1, 2);
        ledger.update_training_accs(0.5, None);
        ledger.push_row(0, 0.05, 64, 1.25);
        let csv = ledger.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,acc_O,acc_Stream,acc_Rep,lr,R,batch_loss"
        );
        assert_eq!(lines.next().unwrap(), "0,0.5,0.5,nan,0.05,64,1.25");
    }
}

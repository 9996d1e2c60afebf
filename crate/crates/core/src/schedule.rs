//! Learning-rate schedules: constant, one-cycle cosine, and the PoLRS
//! population controller (three learners with geometrically spaced rates;
//! every interval the best member's weights are copied to all and the rates
//! recenter on its rate).

use std::fmt::Write as _;

use crate::error::{OclError, Result};
use crate::learner::Learner;
use crate::metrics::RunningMean;

/// A closed-form learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant { base: f64 },
    /// One cycle from `base` down to exactly 0 at `t = horizon`.
    Cosine { base: f64, horizon: u64 },
}

impl Schedule {
    pub fn lr_at(&self, t: u64) -> Result<f64> {
        match *self {
            Schedule::Constant { base } => Ok(base),
            Schedule::Cosine { base, horizon } => {
                if t > horizon {
                    return Err(OclError::config(format!(
                        "cosine schedule queried at t={t} beyond horizon {horizon}"
                    )));
                }
                let angle = std::f64::consts::PI * (t as f64 / horizon as f64);
                Ok(base / 2.0 * (1.0 + angle.cos()))
            }
        }
    }
}

/// LR multipliers around the population center, in member order.
const POLRS_FACTORS: [f64; 3] = [2.0, 1.0, 0.5];

/// One schedule.csv row.
#[derive(Debug, Clone)]
pub struct ScheduleRow {
    pub step: u64,
    pub lr: f64,
    pub member_id: usize,
    pub best: usize,
}

/// Population learning-rate search state: three members initialized with
/// identical weights and rates `{2 l0, l0, 0.5 l0}`.
#[derive(Debug)]
pub struct Polrs {
    members: Vec<Learner>,
    lrs: [f64; 3],
    metrics: [RunningMean; 3],
    best: usize,
    interval: u64,
    steps_since_restructure: u64,
}

impl Polrs {
    /// Builds the population by cloning `template` three times, so all
    /// members share the same initial weights.
    pub fn new(template: Learner, l0: f64, interval: u64) -> Result<Self> {
        if !(l0 > 0.0) {
            return Err(OclError::config("polrs initial learning rate must be > 0"));
        }
        if interval == 0 {
            return Err(OclError::config("polrs interval must be >= 1"));
        }
        let members = vec![template.clone(), template.clone(), template];
        Ok(Polrs {
            members,
            lrs: [2.0 * l0, l0, 0.5 * l0],
            metrics: Default::default(),
            best: 0,
            interval,
            steps_since_restructure: 0,
        })
    }

    pub fn members(&self) -> &[Learner] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Learner] {
        &mut self.members
    }

    pub fn member(&self, idx: usize) -> &Learner {
        &self.members[idx]
    }

    pub fn lr(&self, member: usize) -> f64 {
        self.lrs[member]
    }

    pub fn lrs(&self) -> [f64; 3] {
        self.lrs
    }

    /// Index of the current best member; online predictions route through it.
    pub fn best(&self) -> usize {
        self.best
    }

    pub fn interval(&self) -> u64 {
        self.interval
    }

    /// Interval metric of one member, if any observation arrived yet.
    pub fn metric(&self, member: usize) -> Option<f64> {
        self.metrics[member].value()
    }

    /// Records one per-member step metric (online accuracy fractions) and
    /// re-selects the best member (ties go to the lowest index).
    pub fn observe(&mut self, per_member: [f64; 3]) {
        for (m, &v) in self.metrics.iter_mut().zip(per_member.iter()) {
            m.update(v);
        }
        self.best = self.argmax_metric();
        self.steps_since_restructure += 1;
    }

    fn argmax_metric(&self) -> usize {
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (i, m) in self.metrics.iter().enumerate() {
            let v = m.value().unwrap_or(0.0);
            if v > best_val {
                best_val = v;
                best = i;
            }
        }
        best
    }

    /// True when a full interval of observations has accumulated.
    pub fn restructure_due(&self) -> bool {
        self.steps_since_restructure >= self.interval
    }

    /// Copies the best member's weights into all members, recenters the rates
    /// on the best member's rate, and resets the interval metrics.
    pub fn restructure(&mut self) -> Result<()> {
        let best = self.best;
        let center = self.lrs[best];
        let source = self.members[best].clone();
        for member in &mut self.members {
            member.copy_weights_from(&source)?;
        }
        for (lr, factor) in self.lrs.iter_mut().zip(POLRS_FACTORS.iter()) {
            *lr = factor * center;
        }
        for m in &mut self.metrics {
            m.reset();
        }
        self.steps_since_restructure = 0;
        Ok(())
    }

    /// schedule.csv rows for the current step: one row per member.
    pub fn log_rows(&self, step: u64) -> Vec<ScheduleRow> {
        (0..3)
            .map(|member_id| ScheduleRow {
                step,
                lr: self.lrs[member_id],
                member_id,
                best: self.best,
            })
            .collect()
    }
}

/// CSV for schedule logs: `t,lr,member_id,j_star`.
pub fn schedule_rows_to_csv(rows: &[ScheduleRow]) -> String {
    let mut out = String::from("t,lr,member_id,j_star\n");
    for row in rows {
        writeln!(out, "{},{},{},{}", row.step, row.lr, row.member_id, row.best)
            .expect("write to string");
    }
    out
}

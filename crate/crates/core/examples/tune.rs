// Scratch calibration runs for the acceptance experiments. Not part of the
// deliverable test surface; run with:
//   cargo run --release -p oclbench-core --example tune -- <which>

use oclbench_core::config::{ExperimentConfig, ReplayConfig, ScheduleKind};
use oclbench_core::harness::run;
use oclbench_core::replay::{AdRepConfig, BufferPolicy};
use oclbench_core::stream::builders::drifting_spec;

fn base_config(spec: oclbench_core::stream::StreamSpec, seed: u64) -> ExperimentConfig {
    let mut config = ExperimentConfig::new(spec);
    config.master_seed = seed;
    config.batch_size = 32;
    config.holdout_fraction = 0.01;
    config.checkpoint_fractions = vec![1.0];
    config.transfer_windows = Some(vec![1]); // keep checkpoint eval cheap here
    config
}

fn adrep_sweep(total_angle: f64, small: usize, large: usize, r_init: usize, eps: f64) {
    // Criterion 5 shape: adrep vs fixed {too-small, too-large}.
    println!("== angle {total_angle} arms {small}/{large} init {r_init}");
    for seed in 1..=5u64 {
        let spec = drifting_spec(16, 10, 100_000, 1000, total_angle, 0.5, 1000 + seed);
        let mut results = Vec::new();
        for (name, capacity, adrep) in [
            ("small", small, None),
            ("large", large, None),
            (
                "adrep",
                r_init,
                Some(AdRepConfig {
                    interval: 200,
                    epsilon: eps,
                    r_min: 16,
                    r_max: large,
                }),
            ),
        ] {
            let mut config = base_config(spec.clone(), seed);
            config.schedule = ScheduleKind::Constant;
            config.lr0 = 3.2;
            config.replay = ReplayConfig::On {
                policy: BufferPolicy::Fifo,
                capacity,
                adrep,
            };
            let r = run(&config).unwrap();
            results.push((name, r.summary.final_acc_online, r.summary.final_buffer_capacity));
        }
        println!("seed {seed}: {results:?}");
    }
}

fn lr_tradeoff_sweep(total_angle: f64, lr0: f64, capacity: usize) {
    println!("== angle {total_angle} lr0 {lr0} R {capacity}");
    let mut cosb = 0;
    let mut polo = 0;
    for seed in 1..=5u64 {
        let spec = drifting_spec(16, 10, 40_000, 400, total_angle, 0.5, 2000 + seed);
        let mut acc = Vec::new();
        let mut bwd = Vec::new();
        for kind in [ScheduleKind::Constant, ScheduleKind::Cosine, ScheduleKind::Polrs] {
            let mut config = base_config(spec.clone(), seed);
            config.schedule = kind;
            config.lr0 = lr0;
            config.replay = ReplayConfig::On {
                policy: BufferPolicy::Fifo,
                capacity,
                adrep: None,
            };
            let r = run(&config).unwrap();
            acc.push(r.summary.final_acc_online);
            bwd.push(r.summary.acc_backward_full.unwrap());
        }
        let cos_beats_const_bwd = bwd[1] > bwd[0];
        let polrs_beats_cos_acc = acc[2] > acc[1];
        cosb += cos_beats_const_bwd as u32;
        polo += polrs_beats_cos_acc as u32;
        println!(
            "seed {seed}: accO const={:.4} cos={:.4} polrs={:.4} | bwd const={:.4} cos={:.4} polrs={:.4} | cos>const(bwd)={} polrs>cos(acc)={}",
            acc[0], acc[1], acc[2], bwd[0], bwd[1], bwd[2], cos_beats_const_bwd, polrs_beats_cos_acc
        );
    }
    println!("cos>const backward: {cosb}/5 ; polrs>cos acc_O: {polo}/5");
}

fn batch_sweep(total_angle: f64, replay_on: bool, lr0: f64) {
    println!("== angle {total_angle} replay {replay_on} lr0 {lr0}");
    let mut wins = 0;
    for seed in 1..=5u64 {
        let spec = drifting_spec(16, 10, 100_000, 1000, total_angle, 0.5, 3000 + seed);
        let mut acc = Vec::new();
        for batch in [8usize, 64] {
            let mut config = base_config(spec.clone(), seed);
            config.schedule = ScheduleKind::Constant;
            config.lr0 = lr0;
            config.batch_size = batch;
            config.replay = if replay_on {
                ReplayConfig::On {
                    policy: BufferPolicy::Fifo,
                    capacity: 256,
                    adrep: None,
                }
            } else {
                ReplayConfig::Off
            };
            let r = run(&config).unwrap();
            acc.push(r.summary.final_acc_online);
        }
        let win = acc[0] > acc[1];
        wins += win as u32;
        println!("seed {seed}: B8={:.4} B64={:.4} win={win}", acc[0], acc[1]);
    }
    println!("B8 wins: {wins}/5");
}

fn polrs_domination(total_angle: f64, lr0: f64, interval: u64) {
    println!("== angle {total_angle} lr0 {lr0} interval {interval}");
    for seed in 1..=3u64 {
        let spec = drifting_spec(16, 10, 20_000, 200, total_angle, 0.5, 4000 + seed);
        let mut config = base_config(spec.clone(), seed);
        config.schedule = ScheduleKind::Polrs;
        config.lr0 = lr0;
        config.polrs_interval = Some(interval);
        config.replay = ReplayConfig::On {
            policy: BufferPolicy::Fifo,
            capacity: 256,
            adrep: None,
        };
        let r = run(&config).unwrap();
        let steps = r.summary.steps;
        let mut decisions = 0;
        let mut arm0 = 0;
        for row in &r.schedule_log {
            if row.member_id == 0 && (row.step + 1) % interval == 0 && row.step + 1 < steps {
                decisions += 1;
                arm0 += (row.best == 0) as u32;
            }
        }
        println!(
            "seed {seed}: acc={:.4} decisions={decisions} arm0={arm0} frac={:.2}",
            r.summary.final_acc_online,
            arm0 as f64 / decisions.max(1) as f64
        );
    }
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".to_string());
    match which.as_str() {
        "adrep" => {
            adrep_sweep(8.0, 64, 131_072, 32_768, 0.06);
        }
        "lr" => {
            lr_tradeoff_sweep(3.2, 3.2, 2_000);
        }
        "lr2" => {
            lr_tradeoff_sweep(6.4, 3.2, 2_000);
            lr_tradeoff_sweep(3.2, 1.6, 2_000);
        }
        "batch" => {
            batch_sweep(40.0, false, 12.8);
            batch_sweep(60.0, true, 12.8);
            batch_sweep(60.0, false, 12.8);
            batch_sweep(80.0, true, 12.8);
            batch_sweep(80.0, false, 12.8);
        }
        "polrs" => {
            polrs_domination(40.0, 0.02, 50);
        }
        other => {
            eprintln!("unknown sweep '{other}'");
        }
    }
}

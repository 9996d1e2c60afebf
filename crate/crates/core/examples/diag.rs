// diagnostic: watch adrep signal on a drifting stream
use oclbench_core::config::{ExperimentConfig, ReplayConfig, ScheduleKind};
use oclbench_core::harness::run;
use oclbench_core::replay::{AdRepConfig, BufferPolicy};
use oclbench_core::stream::builders::drifting_spec;

fn main() {
    let spec = drifting_spec(16, 10, 100_000, 1000, 8.0, 0.5, 1001);
    let mut config = ExperimentConfig::new(spec);
    config.master_seed = 1;
    config.batch_size = 32;
    config.holdout_fraction = 0.01;
    config.checkpoint_fractions = vec![1.0];
    config.transfer_windows = Some(vec![1]);
    config.schedule = ScheduleKind::Constant;
    config.lr0 = 3.2;
    config.replay = ReplayConfig::On {
        policy: BufferPolicy::Fifo,
        capacity: 1024,
        adrep: Some(AdRepConfig { interval: 200, epsilon: 0.005, r_min: 16, r_max: 131_072 }),
    };
    let r = run(&config).unwrap();
    // print acc_stream/acc_rep (running) and R every 200 steps
    for row in r.ledger.rows.iter().step_by(200) {
        println!(
            "step {:5} R {:7} acc_O {:.3} accS {:.3} accR {:.3}",
            row.step, row.buffer_capacity, row.acc_online,
            row.acc_stream.unwrap_or(f64::NAN), row.acc_replay.unwrap_or(f64::NAN)
        );
    }
    // windowed (last-200) training accs from the raw log
    let log = &r.ledger.training_log;
    println!("-- windowed means (200-step):");
    for (i, chunk) in log.chunks(200).enumerate().step_by(3) {
        let s: f64 = chunk.iter().map(|o| o.stream_frac).sum::<f64>() / chunk.len() as f64;
        let rep: f64 = chunk.iter().filter_map(|o| o.replay_frac).sum::<f64>()
            / chunk.iter().filter(|o| o.replay_frac.is_some()).count().max(1) as f64;
        println!("win {:3}: accS {s:.3} accR {rep:.3} diff {:+.3}", i, s - rep);
    }
}

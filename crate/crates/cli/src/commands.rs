//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use oclbench_core::config::{
    derive_seed, parse_kv, seed_role, stream_spec_from_kv, ExperimentConfig, ReplayConfig,
    ScheduleKind,
};
use oclbench_core::geocells::{build_cells as build_cell_tree, cdf_to_csv, GeoPoint};
use oclbench_core::harness;
use oclbench_core::metrics::transfer_reports_to_csv;
use oclbench_core::stream::{holdout_split, materialize, ValidationSet};
use oclbench_core::{OclError, Result};

use crate::{AblationArgs, BuildCellsArgs, CompareArgs, EvalTransferArgs, GenStreamArgs, RunArgs};

fn read_config_file(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| OclError::config(format!("cannot read config file {}: {e}", path.display())))
}

/// Loads an experiment config, resolving its `stream_spec` path relative to
/// the config file's directory.
fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    let text = read_config_file(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    ExperimentConfig::from_kv(&text, |spec_ref| {
        let spec_path = base.join(spec_ref);
        fs::read_to_string(&spec_path).map_err(|e| {
            OclError::config(format!(
                "cannot read stream spec {}: {e}",
                spec_path.display()
            ))
        })
    })
}

pub fn gen_stream(args: GenStreamArgs) -> Result<()> {
    let text = read_config_file(&args.spec)?;
    let mut spec = stream_spec_from_kv(&text)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let stream = materialize(&spec)?;
    let (train, validation) = holdout_split(
        &stream,
        args.holdout,
        derive_seed(spec.seed, seed_role::HOLDOUT),
    )?;
    fs::create_dir_all(&args.out)?;
    let mut buf = Vec::new();
    train.write_to(&mut buf)?;
    fs::write(args.out.join("stream.txt"), buf)?;
    let mut buf = Vec::new();
    validation.write_to(&mut buf, spec.dim, spec.num_classes, spec.steps)?;
    fs::write(args.out.join("validation.txt"), buf)?;
    println!(
        "stream: {} examples over {} steps ({} classes, dim {}); validation: {} examples",
        train.examples.len(),
        spec.steps,
        spec.num_classes,
        spec.dim,
        validation.examples.len()
    );
    Ok(())
}

fn parse_region(raw: &str) -> Result<(f64, f64, f64, f64)> {
    let parts: Vec<&str> = raw.split(':').collect();
    if parts.len() != 4 {
        return Err(OclError::config(
            "region must be min_lat:max_lat:min_lon:max_lon",
        ));
    }
    let mut vals = [0.0; 4];
    for (v, s) in vals.iter_mut().zip(&parts) {
        *v = s
            .trim()
            .parse()
            .map_err(|_| OclError::config(format!("bad region component '{s}'")))?;
    }
    if vals[0] >= vals[1] || vals[2] >= vals[3] {
        return Err(OclError::config("region bounds must be increasing"));
    }
    Ok((vals[0], vals[1], vals[2], vals[3]))
}

fn load_points_csv(path: &Path) -> Result<Vec<GeoPoint>> {
    let text = fs::read_to_string(path)
        .map_err(|e| OclError::config(format!("cannot read points file {}: {e}", path.display())))?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("lat") {
            continue;
        }
        let (lat, lon) = line.split_once(',').ok_or_else(|| {
            OclError::config(format!("points line {}: expected lat,lon", lineno + 1))
        })?;
        points.push(GeoPoint::new(
            lat.trim()
                .parse()
                .map_err(|_| OclError::config(format!("bad latitude '{lat}'")))?,
            lon.trim()
                .parse()
                .map_err(|_| OclError::config(format!("bad longitude '{lon}'")))?,
        )?);
    }
    Ok(points)
}

pub fn build_cells(args: BuildCellsArgs) -> Result<()> {
    let points = match (&args.points, args.random) {
        (Some(path), None) => load_points_csv(path)?,
        (None, Some(n)) => {
            let (min_lat, max_lat, min_lon, max_lon) = parse_region(&args.region)?;
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            (0..n)
                .map(|_| GeoPoint {
                    lat: rng.random_range(min_lat..max_lat),
                    lon: rng.random_range(min_lon..max_lon),
                })
                .collect()
        }
        _ => {
            return Err(OclError::config(
                "build-cells needs exactly one of --points or --random",
            ))
        }
    };
    let tree = build_cell_tree(&points, args.min_count, args.max_count, args.max_depth)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("cells.txt"), tree.export_cells())?;
    let cdf = tree.distance_cdf(&points)?;
    fs::write(args.out.join("distance_cdf.csv"), cdf_to_csv(&cdf))?;
    let median = cdf
        .iter()
        .find(|(_, frac)| *frac >= 0.5)
        .map(|(d, _)| *d)
        .unwrap_or(0.0);
    println!(
        "{} points -> {} cells; median distance to class center {median:.3} km",
        points.len(),
        tree.num_classes()
    );
    Ok(())
}

pub fn run(args: RunArgs) -> Result<()> {
    let mut config = load_experiment(&args.config)?;
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    config.out_dir = Some(args.out.clone());
    let result = if args.blind {
        harness::run_blind_baseline(&config)?
    } else {
        harness::run(&config)?
    };
    println!(
        "final acc_O = {:.6} over {} steps ({} examples)",
        result.summary.final_acc_online, result.summary.steps, result.summary.examples
    );
    for record in &result.checkpoints {
        println!(
            "checkpoint at T = {} (fraction {:.2})",
            record.step, record.fraction
        );
    }
    Ok(())
}

pub fn eval_transfer(args: EvalTransferArgs) -> Result<()> {
    let file = fs::File::open(&args.validation).map_err(|e| {
        OclError::config(format!(
            "cannot read validation file {}: {e}",
            args.validation.display()
        ))
    })?;
    let (validation, _, _, steps) = ValidationSet::read_from(BufReader::new(file))?;
    let horizon = args.horizon.unwrap_or(steps);
    let windows: Option<Vec<u64>> = match &args.windows {
        None => None,
        Some(raw) => Some(
            raw.split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| OclError::config(format!("bad window '{s}'")))
                })
                .collect::<Result<_>>()?,
        ),
    };
    let (backward, forward) = harness::evaluate_checkpoint(
        &args.checkpoint,
        &validation,
        args.at,
        horizon,
        windows.as_deref(),
    )?;
    let mut reports = vec![&backward];
    if let Some(f) = &forward {
        reports.push(f);
    }
    fs::create_dir_all(&args.out)?;
    let path = args.out.join(format!("transfer_eval_T{}.csv", args.at));
    fs::write(&path, transfer_reports_to_csv(&reports))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Fingerprint keys that must agree for runs to be comparable.
const FINGERPRINT_KEYS: [&str; 7] = [
    "stream_seed",
    "H",
    "dim",
    "classes",
    "examples",
    "steps",
    "batch",
];

struct LoadedRun {
    name: String,
    fingerprint: BTreeMap<String, String>,
    /// (step, acc_O) pairs from metrics.csv.
    acc: Vec<(String, String)>,
    /// transfer file name -> rows of (T, direction, window, accuracy).
    transfers: BTreeMap<String, Vec<(String, String)>>,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| dir.display().to_string());
    let summary_text = fs::read_to_string(dir.join("summary.txt")).map_err(|e| {
        OclError::comparison(format!("{}: missing summary.txt ({e})", dir.display()))
    })?;
    let kv = parse_kv(&summary_text)?;
    let mut fingerprint = BTreeMap::new();
    for key in FINGERPRINT_KEYS {
        let value = kv
            .get(key)
            .ok_or_else(|| OclError::comparison(format!("{name}: summary lacks '{key}'")))?;
        fingerprint.insert(key.to_string(), value.to_string());
    }
    let metrics_text = fs::read_to_string(dir.join("metrics.csv")).map_err(|e| {
        OclError::comparison(format!("{}: missing metrics.csv ({e})", dir.display()))
    })?;
    let mut acc = Vec::new();
    for line in metrics_text.lines().skip(1) {
        let mut fields = line.split(',');
        let step = fields.next().unwrap_or_default().to_string();
        let acc_o = fields.next().unwrap_or_default().to_string();
        acc.push((step, acc_o));
    }
    let mut transfers = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let file_name = entry.file_name().to_string_lossy().to_string();
        if !file_name.starts_with("transfer_T") || !file_name.ends_with(".csv") {
            continue;
        }
        let text = fs::read_to_string(entry.path())?;
        let mut rows = Vec::new();
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                continue;
            }
            rows.push((
                format!("{},{},{}", fields[0], fields[1], fields[2]),
                fields[3].to_string(),
            ));
        }
        transfers.insert(file_name, rows);
    }
    Ok(LoadedRun {
        name,
        fingerprint,
        acc,
        transfers,
    })
}

pub fn compare(args: CompareArgs) -> Result<()> {
    let runs: Vec<LoadedRun> = args
        .runs
        .iter()
        .map(|dir| load_run(dir))
        .collect::<Result<_>>()?;
    let first = &runs[0];
    for run in &runs[1..] {
        if run.fingerprint != first.fingerprint {
            return Err(OclError::comparison(format!(
                "runs '{}' and '{}' were produced from different streams or grids",
                first.name, run.name
            )));
        }
        if run.acc.len() != first.acc.len()
            || run
                .acc
                .iter()
                .zip(&first.acc)
                .any(|((s_a, _), (s_b, _))| s_a != s_b)
        {
            return Err(OclError::comparison(format!(
                "runs '{}' and '{}' have mismatched step grids",
                first.name, run.name
            )));
        }
    }

    fs::create_dir_all(&args.out)?;
    let mut merged = String::from("step");
    for run in &runs {
        merged.push_str(&format!(",acc_O_{}", run.name));
    }
    merged.push('\n');
    for (row, (step, first_acc)) in first.acc.iter().enumerate() {
        merged.push_str(step);
        merged.push(',');
        merged.push_str(first_acc);
        for run in &runs[1..] {
            merged.push(',');
            merged.push_str(&run.acc[row].1);
        }
        merged.push('\n');
    }
    fs::write(args.out.join("compare_acc.csv"), merged)?;

    // Per-checkpoint transfer comparison across the files all runs share.
    let mut transfer_out = String::from("T,direction,window");
    for run in &runs {
        transfer_out.push_str(&format!(",acc_{}", run.name));
    }
    transfer_out.push('\n');
    for (file_name, base_rows) in &first.transfers {
        if !runs[1..].iter().all(|r| r.transfers.contains_key(file_name)) {
            continue;
        }
        for (key, base_acc) in base_rows {
            transfer_out.push_str(key);
            transfer_out.push(',');
            transfer_out.push_str(base_acc);
            for run in &runs[1..] {
                let acc = run.transfers[file_name]
                    .iter()
                    .find(|(k, _)| k == key)
                    .map(|(_, a)| a.as_str())
                    .unwrap_or("nan");
                transfer_out.push(',');
                transfer_out.push_str(acc);
            }
            transfer_out.push('\n');
        }
    }
    fs::write(args.out.join("compare_transfer.csv"), transfer_out)?;
    println!(
        "compared {} runs over {} steps -> {}",
        runs.len(),
        first.acc.len(),
        args.out.display()
    );
    Ok(())
}

/// Parses `--axis NAME=V1,V2,...` into the axis name and its values.
fn parse_axis(raw: &str) -> Result<(String, Vec<String>)> {
    let (name, values) = raw
        .split_once('=')
        .ok_or_else(|| OclError::config("axis must look like NAME=V1,V2,..."))?;
    let values: Vec<String> = values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.len() < 2 {
        return Err(OclError::config("axis needs at least two values"));
    }
    Ok((name.trim().to_string(), values))
}

fn apply_axis(config: &mut ExperimentConfig, axis: &str, value: &str) -> Result<()> {
    match axis {
        "schedule" => {
            config.schedule = match value {
                "constant" => ScheduleKind::Constant,
                "cosine" => ScheduleKind::Cosine,
                "polrs" => ScheduleKind::Polrs,
                other => return Err(OclError::config(format!("unknown schedule '{other}'"))),
            };
            if config.schedule != ScheduleKind::Polrs {
                config.polrs_parallel = false;
            }
        }
        "R" => {
            let capacity: usize = value
                .parse()
                .map_err(|_| OclError::config(format!("bad replay capacity '{value}'")))?;
            match &mut config.replay {
                ReplayConfig::On {
                    capacity: slot,
                    adrep,
                    ..
                } => {
                    *slot = capacity;
                    if let Some(ad) = adrep {
                        if capacity < ad.r_min || capacity > ad.r_max {
                            return Err(OclError::config(
                                "axis capacity falls outside the adrep bounds",
                            ));
                        }
                    }
                }
                ReplayConfig::Off => {
                    return Err(OclError::config("R axis requires replay to be on"))
                }
            }
        }
        "B" => {
            config.batch_size = value
                .parse()
                .map_err(|_| OclError::config(format!("bad batch size '{value}'")))?;
        }
        other => {
            return Err(OclError::config(format!(
                "unknown axis '{other}' (expected schedule, R or B)"
            )))
        }
    }
    Ok(())
}

pub fn ablation(args: AblationArgs) -> Result<()> {
    let (axis, values) = parse_axis(&args.axis)?;
    let base = load_experiment(&args.config)?;
    let mut arm_dirs = Vec::new();
    let mut grids = Vec::new();
    let mut summary_rows = String::from("arm,final_acc_O,acc_B_at_last_full,steps,examples,sgd_steps\n");
    for value in &values {
        let mut config = base.clone();
        if let Some(seed) = args.seed {
            config.master_seed = seed;
        }
        apply_axis(&mut config, &axis, value)?;
        config.validate()?;
        let arm_dir = args.out.join(format!("{axis}_{value}"));
        config.out_dir = Some(arm_dir.clone());
        let result = harness::run(&config)?;
        println!(
            "arm {axis}={value}: final acc_O = {:.6}",
            result.summary.final_acc_online
        );
        summary_rows.push_str(&format!(
            "{axis}_{value},{},{},{},{},{}\n",
            result.summary.final_acc_online,
            result
                .summary
                .acc_backward_full
                .map(|a| a.to_string())
                .unwrap_or_else(|| "nan".to_string()),
            result.summary.steps,
            result.summary.examples,
            result.summary.sgd_steps
        ));
        grids.push((result.summary.batch, result.summary.steps));
        arm_dirs.push(arm_dir);
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("arms_summary.csv"), summary_rows)?;
    // Step-wise merged curves only make sense when the arms share a grid
    // (a batch-size axis deliberately changes it).
    if grids.iter().all(|g| *g == grids[0]) {
        compare(CompareArgs {
            out: args.out.clone(),
            runs: arm_dirs,
        })
    } else {
        println!("arms use different step grids; wrote arms_summary.csv only");
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing() {
        let (name, values) = parse_axis("B=8,64").unwrap();
        assert_eq!(name, "B");
        assert_eq!(values, vec!["8", "64"]);
        assert!(parse_axis("B=8").is_err());
        assert!(parse_axis("nonsense").is_err());
    }

    #[test]
    fn region_parsing() {
        assert_eq!(parse_region("0:1:2:3").unwrap(), (0.0, 1.0, 2.0, 3.0));
        assert!(parse_region("1:0:2:3").is_err());
        assert!(parse_region("0:1:2").is_err());
    }
}

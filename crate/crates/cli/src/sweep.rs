//! Grid sweeps: rewrite dot-path keys in the base config, run every
//! (grid point × seed) combination in a worker pool, and aggregate one
//! summary CSV. Runs are independent and individually deterministic, so
//! parallelism never changes results.

use gradnet_core::{train, Error, ExperimentConfig, Result, RunHistory};
use serde_json::Value;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

struct Axis {
    key: String,
    values: Vec<Value>,
}

fn parse_axis(spec: &str) -> Result<Axis> {
    let (key, vals) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--vary {spec}: expected KEY=V1,V2,...")))?;
    if vals.is_empty() {
        return Err(Error::Config(format!("--vary {spec}: no values")));
    }
    let values = vals
        .split(',')
        .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
        .collect();
    Ok(Axis { key: key.to_string(), values })
}

/// Set `path` ("model.depth", "model.3.p") inside a JSON tree. Intermediate
/// segments must exist; the final segment may be new (the typed config parse
/// still rejects unknown fields afterwards).
fn set_path(root: &mut Value, path: &str, val: Value) -> Result<()> {
    let segs: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, seg) in segs.iter().enumerate() {
        let last = i + 1 == segs.len();
        if let Ok(idx) = seg.parse::<usize>() {
            let arr = cur
                .as_array_mut()
                .ok_or_else(|| Error::Config(format!("--vary {path}: {seg} indexes a non-array")))?;
            let slot = arr.get_mut(idx).ok_or_else(|| {
                Error::Config(format!("--vary {path}: index {idx} out of bounds"))
            })?;
            if last {
                *slot = val;
                return Ok(());
            }
            cur = slot;
        } else {
            let obj = cur
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("--vary {path}: {seg} is not an object key")))?;
            if last {
                obj.insert((*seg).to_string(), val);
                return Ok(());
            }
            cur = obj.get_mut(*seg).ok_or_else(|| {
                Error::Config(format!("--vary {path}: config has no key {seg}"))
            })?;
        }
    }
    unreachable!("split never yields an empty iterator")
}

fn value_slug(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

struct Job {
    index: usize,
    config: ExperimentConfig,
    /// Axis values in axis order, as printed in the summary.
    point: Vec<String>,
    seed: u64,
}

struct Outcome {
    point: Vec<String>,
    seed: u64,
    result: std::result::Result<RunHistory, String>,
}

pub fn run(
    config_path: &Path,
    vary: &[String],
    seeds: u64,
    out: Option<PathBuf>,
    jobs: Option<usize>,
) -> Result<()> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    let base = ExperimentConfig::from_file(config_path)?;
    let base_json: Value = serde_json::from_str(&std::fs::read_to_string(config_path)?)?;
    let out_dir = out
        .or_else(|| base.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("sweep"));
    let axes: Vec<Axis> = vary.iter().map(|s| parse_axis(s)).collect::<Result<_>>()?;

    // cartesian product, first axis slowest
    let mut combos: Vec<Vec<usize>> = vec![vec![]];
    for ax in &axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                (0..ax.values.len()).map(move |i| {
                    let mut c2 = c.clone();
                    c2.push(i);
                    c2
                })
            })
            .collect();
    }

    let mut todo: Vec<Job> = Vec::new();
    for combo in &combos {
        for s in 0..seeds {
            let seed = base.seed + s;
            let mut json = base_json.clone();
            let mut point = Vec::new();
            let mut slug = String::new();
            for (ax, &vi) in axes.iter().zip(combo) {
                let v = &ax.values[vi];
                set_path(&mut json, &ax.key, v.clone())?;
                point.push(value_slug(v));
                let _ = write!(slug, "{}={}_", ax.key, value_slug(v));
            }
            let _ = write!(slug, "seed={seed}");
            let mut cfg = ExperimentConfig::from_json(&serde_json::to_string(&json)?)
                .map_err(|e| Error::Config(format!("grid point {slug}: {e}")))?;
            cfg.seed = seed;
            cfg.out_dir = Some(out_dir.join(slug));
            todo.push(Job { index: todo.len(), config: cfg, point, seed });
        }
    }

    let total = todo.len();
    let workers = jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
        .clamp(1, total);
    println!("{total} runs across {workers} workers -> {}", out_dir.display());

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Outcome>>> = Mutex::new((0..total).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= total {
                    break;
                }
                let job = &todo[i];
                let result = train(&job.config).map_err(|e| e.to_string());
                match &result {
                    Ok(h) => println!(
                        "[{:>3}/{total}] {} seed={} status={:?} best_val_acc={:.4}",
                        i + 1,
                        job.point.join(","),
                        job.seed,
                        h.status,
                        h.best_val_acc
                    ),
                    Err(e) => println!(
                        "[{:>3}/{total}] {} seed={} error: {e}",
                        i + 1,
                        job.point.join(","),
                        job.seed
                    ),
                }
                results.lock().expect("no poisoned runs")[job.index] =
                    Some(Outcome { point: job.point.clone(), seed: job.seed, result });
            });
        }
    });

    let mut csv = String::new();
    let keys: Vec<&str> = axes.iter().map(|a| a.key.as_str()).collect();
    let _ = writeln!(
        csv,
        "{},seed,status,best_epoch,best_val_acc,final_g,param_count",
        keys.join(",")
    );
    for slot in results.into_inner().expect("all workers joined") {
        let o = slot.expect("every index ran");
        match o.result {
            Ok(h) => {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    o.point.join(","),
                    o.seed,
                    match h.status {
                        gradnet_core::RunStatus::Completed => "completed",
                        gradnet_core::RunStatus::EarlyStopped => "early_stopped",
                        gradnet_core::RunStatus::Diverged => "diverged",
                    },
                    h.best_epoch.map_or(String::new(), |e| e.to_string()),
                    h.best_val_acc,
                    h.final_g,
                    h.param_count
                );
            }
            Err(e) => {
                let _ = writeln!(csv, "{},{},error: {},,,,", o.point.join(","), o.seed, e);
            }
        }
    }
    std::fs::create_dir_all(&out_dir)?;
    let summary = out_dir.join("summary.csv");
    std::fs::write(&summary, csv)?;
    println!("summary written to {}", summary.display());
    Ok(())
}

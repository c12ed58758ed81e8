//! Aggregate finished runs: walk a directory of run output folders and
//! print one combined per-epoch CSV on stdout, prefixed with the run name.

use gradnet_core::{Error, Result, RunStatus, CSV_HEADER, METRICS_FILE, RUN_FILE};
use serde::Deserialize;
use std::path::Path;

#[derive(Deserialize)]
struct RunStatusOnly {
    status: RunStatus,
}

pub fn run(runs_dir: &Path) -> Result<()> {
    let mut dirs: Vec<_> = std::fs::read_dir(runs_dir)
        .map_err(|e| Error::Config(format!("{}: {e}", runs_dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join(METRICS_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Config(format!(
            "{}: no run directories with {METRICS_FILE} found",
            runs_dir.display()
        )));
    }

    println!("run,status,{CSV_HEADER}");
    for dir in &dirs {
        let name = dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let status = match std::fs::read_to_string(dir.join(RUN_FILE)) {
            Ok(s) => serde_json::from_str::<RunStatusOnly>(&s)
                .map(|h| match h.status {
                    RunStatus::Completed => "completed",
                    RunStatus::EarlyStopped => "early_stopped",
                    RunStatus::Diverged => "diverged",
                })
                .unwrap_or("unknown"),
            Err(_) => "unknown",
        };
        let metrics = std::fs::read_to_string(dir.join(METRICS_FILE))?;
        for line in metrics.lines().skip(1) {
            if !line.is_empty() {
                println!("{name},{status},{line}");
            }
        }
    }
    Ok(())
}

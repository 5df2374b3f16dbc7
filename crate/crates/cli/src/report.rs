//! `report`: collect every `metrics_stage*.json` under a directory into one
//! CSV and one JSON summary.

use clap::Args;
use std::path::{Path, PathBuf};

use surfelsplat_geom::MetricsReport;

use crate::config::{write_json, CliError};

#[derive(Args)]
pub struct ReportArgs {
    /// Directory to scan recursively (one training run or a parent of many).
    runs: PathBuf,
}

fn collect_metrics_files(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir)
            .map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry.map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                if name.starts_with("metrics_stage") && name.ends_with(".json") {
                    found.push(path);
                }
            }
        }
    }
    found.sort();
    Ok(found)
}

fn csv_number(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v}")
    }
}

pub fn run(args: ReportArgs) -> Result<(), CliError> {
    let files = collect_metrics_files(&args.runs)?;
    if files.is_empty() {
        return Err(CliError::Usage(format!(
            "no metrics_stage*.json files under {}",
            args.runs.display()
        )));
    }
    let mut rows = Vec::with_capacity(files.len());
    for path in &files {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let report: MetricsReport = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let run = path
            .parent()
            .and_then(|p| p.strip_prefix(&args.runs).ok())
            .map(|p| p.to_string_lossy().into_owned())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| ".".into());
        rows.push((run, report));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.stage_id.cmp(&b.1.stage_id)));

    let mut csv = String::from(
        "run,stage,psnr,ssim,chamfer,fscore,tau,voxel_size,n_surfels,mean_Ka,mean_alpha\n",
    );
    for (run, r) in &rows {
        csv.push_str(&format!(
            "{run},{},{},{},{},{},{},{},{},{},{}\n",
            r.stage_id,
            csv_number(r.psnr),
            csv_number(r.ssim),
            csv_number(r.chamfer),
            csv_number(r.fscore),
            csv_number(r.tau),
            csv_number(r.voxel_size),
            r.n_surfels,
            csv_number(r.mean_ka),
            csv_number(r.mean_alpha),
        ));
    }
    print!("{csv}");
    let csv_path = args.runs.join("report.csv");
    std::fs::write(&csv_path, &csv)
        .map_err(|e| CliError::Usage(format!("{}: {e}", csv_path.display())))?;
    let summary: Vec<serde_json::Value> = rows
        .iter()
        .map(|(run, r)| serde_json::json!({ "run": run, "metrics": r }))
        .collect();
    write_json(&args.runs.join("report.json"), &serde_json::json!({ "rows": summary }))?;
    eprintln!("{} stage row(s) -> {} and report.json", rows.len(), csv_path.display());
    Ok(())
}

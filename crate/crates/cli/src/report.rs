use std::fs;
use std::path::{Path, PathBuf};

use realign_core::diagnostics::{DiagnosticsReport, DIAGNOSTICS_FILE};
use realign_core::evalsuite::{MetricsReport, METRICS_JSON};
use realign_core::Error;

use crate::commands::CHECKPOINT_FILE;
use crate::CliError;

pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";

struct RunRow {
    name: String,
    metrics: MetricsReport,
    diagnostics: Option<DiagnosticsReport>,
}

fn collect_runs(runs_dir: &Path) -> Result<Vec<RunRow>, CliError> {
    let entries = fs::read_dir(runs_dir)
        .map_err(|e| CliError::Data(format!("cannot read runs directory {}: {e}", runs_dir.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut rows = Vec::new();
    for dir in dirs {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let has_metrics = dir.join(METRICS_JSON).is_file();
        if !has_metrics {
            if dir.join(CHECKPOINT_FILE).is_file() {
                return Err(CliError::Data(format!("run {name} has no {METRICS_JSON} (run eval first)")));
            }
            continue;
        }
        let metrics = MetricsReport::read(&dir)?;
        let diag_path = dir.join(DIAGNOSTICS_FILE);
        let diagnostics = if diag_path.is_file() {
            let text = fs::read_to_string(&diag_path).map_err(|e| Error::io(&diag_path, e))?;
            Some(serde_json::from_str(&text).map_err(Error::from)?)
        } else {
            None
        };
        rows.push(RunRow {
            name,
            metrics,
            diagnostics,
        });
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("no evaluated runs under {}", runs_dir.display())));
    }
    Ok(rows)
}

fn delta(value: f64, base: f64) -> String {
    if base == 0.0 {
        format!("{:+.4}", value - base)
    } else {
        format!("{:+.4} ({:+.1}%)", value - base, 100.0 * (value - base) / base)
    }
}

/// Writes `report.md` and `report.csv` into `out`. Deltas are against the
/// `infonce` run when present, otherwise against the first run by name.
pub fn write_report(runs_dir: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let rows = collect_runs(runs_dir)?;
    let base = rows.iter().position(|r| r.name == "infonce").unwrap_or(0);
    let cutoffs = rows[0].metrics.cutoffs.clone();
    if let Some(r) = rows.iter().find(|r| r.metrics.cutoffs != cutoffs) {
        return Err(CliError::Data(format!(
            "run {} was evaluated at cutoffs {:?}, expected {:?}",
            r.name, r.metrics.cutoffs, cutoffs
        )));
    }
    let with_diag = rows.iter().all(|r| r.diagnostics.is_some());

    let mut md = format!("# Run comparison\n\nBaseline: `{}`\n\n| run |", rows[base].name);
    let mut csv = String::from("run");
    for k in &cutoffs {
        md += &format!(" NDCG@{k} | Δ NDCG@{k} |");
        csv += &format!(",ndcg@{k},delta_ndcg@{k}");
    }
    md += " Recall@";
    md += &cutoffs.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("/Recall@");
    md += " |";
    for k in &cutoffs {
        csv += &format!(",recall@{k}");
    }
    if with_diag {
        md += " q→d+ distance | doc distance | coverage | IoU |";
        csv += ",query_positive_distance,pairwise_doc_distance,coverage,iou";
    }
    md += "\n|---|";
    md += &"---|---|".repeat(cutoffs.len());
    md += "---|";
    if with_diag {
        md += "---|---|---|---|";
    }
    md.push('\n');
    csv.push('\n');

    let base_ndcg = rows[base].metrics.mean_ndcg.clone();
    for r in &rows {
        md += &format!("| {} |", r.name);
        csv += &r.name;
        for (i, v) in r.metrics.mean_ndcg.iter().enumerate() {
            md += &format!(" {v:.4} | {} |", delta(*v, base_ndcg[i]));
            csv += &format!(",{v},{}", v - base_ndcg[i]);
        }
        let recalls: Vec<String> = r.metrics.mean_recall.iter().map(|v| format!("{v:.4}")).collect();
        md += &format!(" {} |", recalls.join(" / "));
        for v in &r.metrics.mean_recall {
            csv += &format!(",{v}");
        }
        if let (true, Some(d)) = (with_diag, &r.diagnostics) {
            md += &format!(
                " {:.4} | {:.4} | {:.4} | {:.4} |",
                d.space.mean_query_positive_distance,
                d.space.mean_pairwise_doc_distance,
                d.attention.mean_coverage,
                d.attention.mean_iou
            );
            csv += &format!(
                ",{},{},{},{}",
                d.space.mean_query_positive_distance,
                d.space.mean_pairwise_doc_distance,
                d.attention.mean_coverage,
                d.attention.mean_iou
            );
        }
        md.push('\n');
        csv.push('\n');
    }

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let md_path = out.join(REPORT_MD);
    fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))?;
    let csv_path = out.join(REPORT_CSV);
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok(md_path)
}

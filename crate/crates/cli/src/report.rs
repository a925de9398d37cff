//! Comparison table over the metric reports of several runs.

use std::path::{Path, PathBuf};

use conpres::metrics::MetricReport;
use conpres::{Error, Result, TrainConfig};

/// Metric report file looked up inside each run directory.
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub run: String,
    pub preset: String,
    pub report: MetricReport,
}

fn read_row(run_dir: &Path) -> Result<Option<Row>> {
    let metrics = run_dir.join(METRICS_FILE);
    if !metrics.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&metrics).map_err(|e| Error::io(&metrics, e))?;
    let report: MetricReport = serde_json::from_str(&text)?;
    let snap = run_dir.join("config.snapshot");
    let preset = if snap.exists() {
        let text = std::fs::read_to_string(&snap).map_err(|e| Error::io(&snap, e))?;
        TrainConfig::parse(&text, &[])?.preset.as_str().to_string()
    } else {
        "-".to_string()
    };
    let run = run_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| ".".into());
    Ok(Some(Row { run, preset, report }))
}

/// Rows for `root` itself and each immediate subdirectory holding a metric report, sorted by run name.
pub fn collect(root: &Path) -> Result<Vec<Row>> {
    let mut dirs: Vec<PathBuf> = vec![root.to_path_buf()];
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for e in entries {
        let p = e.map_err(|e| Error::io(root, e))?.path();
        if p.is_dir() {
            dirs.push(p);
        }
    }
    let mut rows = Vec::new();
    for d in dirs {
        if let Some(r) = read_row(&d)? {
            rows.push(r);
        }
    }
    rows.sort_by(|a, b| a.run.cmp(&b.run));
    if rows.is_empty() {
        return Err(Error::Dataset(format!("no {METRICS_FILE} found under {}", root.display())));
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

pub fn to_csv(rows: &[Row]) -> String {
    let mut s = String::from("run,preset,ssim,ssim_std,fid,kid,kid_std_err,kid_scale,n_a,n_b,extractor\n");
    for r in rows {
        let m = &r.report;
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{},{},{},{},{}\n",
            r.run,
            r.preset,
            fmt_opt(m.ssim_mean),
            fmt_opt(m.ssim_std),
            m.fid,
            m.kid,
            fmt_opt(m.kid_std_err),
            m.kid_scale,
            m.n_a,
            m.n_b,
            m.extractor
        ));
    }
    s
}

fn best_index(vals: &[Option<f64>], higher_is_better: bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in vals.iter().enumerate() {
        let Some(v) = *v else { continue };
        let better = match best {
            None => true,
            Some((_, b)) => (higher_is_better && v > b) || (!higher_is_better && v < b),
        };
        if better {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Markdown table; with two or more rows the best value per column is bold.
pub fn to_markdown(rows: &[Row]) -> String {
    let ssim: Vec<Option<f64>> = rows.iter().map(|r| r.report.ssim_mean).collect();
    let fid: Vec<Option<f64>> = rows.iter().map(|r| Some(r.report.fid)).collect();
    let kid: Vec<Option<f64>> = rows.iter().map(|r| Some(r.report.kid)).collect();
    let rank = rows.len() > 1;
    let best = |vals: &[Option<f64>], hi: bool| if rank { best_index(vals, hi) } else { None };
    let (bs, bf, bk) = (best(&ssim, true), best(&fid, false), best(&kid, false));
    let cell = |v: Option<f64>, bold: bool, digits: usize| match v {
        Some(x) if bold => format!("**{x:.digits$}**"),
        Some(x) => format!("{x:.digits$}"),
        None => "-".to_string(),
    };
    let mut s = String::from("| run | preset | SSIM | FID | KID |\n|---|---|---|---|---|\n");
    for (i, r) in rows.iter().enumerate() {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            r.run,
            r.preset,
            cell(ssim[i], bs == Some(i), 2),
            cell(fid[i], bf == Some(i), 4),
            cell(kid[i], bk == Some(i), 5)
        ));
    }
    s
}

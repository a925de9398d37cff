//! `conpres`: phantom data, training, translation, evaluation and reporting.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod manifest;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conpres::dataset::{build_dataset, DatasetIndex, PhantomConfig};
use conpres::metrics::{evaluate_dirs, FeatureSource, SsimInputs};
use conpres::trainer::{self, TrainOptions, TrainState};
use conpres::types::DomainLabel;
use conpres::{io, Error, Result, TrainConfig};

use manifest::{claim_dir, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "conpres", version, about = "Content-preserving multi-domain image translation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Procedural phantom datasets.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Train a translation model into a run directory.
    Train(TrainArgs),
    /// Translate every PNG in a directory to one target domain.
    Translate(TranslateArgs),
    /// Masked SSIM, FID and KID between two image directories.
    Eval(EvalArgs),
    /// Tabulate the metric reports of several runs.
    Report(ReportArgs),
}

#[derive(Subcommand, Debug)]
enum PhantomCommand {
    /// Render paired sim/seg scenes and unpaired real scenes with a train/val/test split.
    Generate(PhantomArgs),
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes per domain (at least 10).
    #[arg(long, default_value_t = 300)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image size as HEIGHTxWIDTH.
    #[arg(long, default_value = "64x88", value_parser = parse_size)]
    size: (usize, usize),
    /// Tissue classes besides background.
    #[arg(long, default_value_t = conpres::phantom::DEFAULT_TISSUE_CLASSES)]
    tissue_classes: u8,
    /// Replace an existing dataset in --out.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML configuration; defaults apply to unset keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `phantom generate`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Loss preset: cut, cut_s, cut_sc or conpres.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Configuration override KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint, keeping its configuration except the step budget and intervals.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Validation images translated per preview.
    #[arg(long, default_value_t = 4)]
    previews: usize,
    /// Replace an existing run in --out.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of input PNGs: grayscale images or indexed semantic maps.
    #[arg(long)]
    input: PathBuf,
    /// Target domain: sim, real or seg.
    #[arg(long, value_parser = parse_domain)]
    target: DomainLabel,
    #[arg(long)]
    out: PathBuf,
    /// Replace existing outputs in --out.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Evaluated images (e.g. translations).
    #[arg(long)]
    a: PathBuf,
    /// Reference distribution (e.g. real images).
    #[arg(long)]
    b: PathBuf,
    /// Semantic maps named like the files in --a; enables masked SSIM.
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Images compared with --a for SSIM; defaults to the `sim` sibling of a `seg/SPLIT` mask directory.
    #[arg(long, requires = "masks")]
    source: Option<PathBuf>,
    /// Require masked SSIM.
    #[arg(long, requires = "masks")]
    ssim: bool,
    /// Feature extractor: random, random:SEED or import:DIR.
    #[arg(long, default_value = "random")]
    features: String,
    /// Report path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory of run directories, each holding a metrics.json.
    runs: PathBuf,
    /// Output directory for summary.csv and summary.md; defaults to RUNS.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad size component {v:?}"));
    Ok((p(h)?, p(w)?))
}

fn parse_domain(s: &str) -> std::result::Result<DomainLabel, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// One JSON object per line on stderr.
fn emit(event: &str, fields: serde_json::Value) {
    let mut obj = serde_json::json!({ "event": event });
    if let (Some(o), serde_json::Value::Object(f)) = (obj.as_object_mut(), fields) {
        o.extend(f);
    }
    eprintln!("{obj}");
}

fn cmd_phantom(a: &PhantomArgs) -> Result<()> {
    let manifest = claim_dir(&a.out, a.overwrite)?;
    RunManifest::new(None, None, Some(a.seed)).write_new(&manifest)?;
    let cfg = PhantomConfig { num_tissue_classes: a.tissue_classes, ..PhantomConfig::default() };
    let index = build_dataset(&a.out, a.count, a.seed, a.size, &cfg)?;
    emit(
        "dataset",
        serde_json::json!({
            "out": a.out,
            "train": index.train.sim.len(),
            "val": index.val.sim.len(),
            "test": index.test.sim.len(),
            "hash": index.content_hash()?,
        }),
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut overrides = Vec::new();
    if let Some(p) = &a.preset {
        overrides.push(format!("preset={p}"));
    }
    if let Some(s) = a.steps {
        overrides.push(format!("steps={s}"));
    }
    if let Some(s) = a.seed {
        overrides.push(format!("seed={s}"));
    }
    overrides.extend(a.overrides.iter().cloned());
    let text = match &a.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    TrainConfig::parse(&text, &overrides)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a)?;
    let index = DatasetIndex::load(&a.data)?;
    let manifest = match &a.resume {
        Some(ckpt) => {
            let step = TrainState::load(ckpt)?.step;
            a.out.join(format!("manifest.resume_{step:06}.json"))
        }
        None => claim_dir(&a.out, a.overwrite)?,
    };
    RunManifest::new(Some(cfg.to_toml()), Some(index.content_hash()?), Some(cfg.seed)).write_new(&manifest)?;
    let opts = TrainOptions { resume: a.resume.clone(), preview_count: a.previews };
    let state = trainer::train(&a.out, &a.data, &cfg, &opts)?;
    emit(
        "trained",
        serde_json::json!({
            "out": a.out,
            "steps": state.step,
            "checkpoint": trainer::checkpoint_path(&a.out, state.step),
            "last": state.history.last(),
        }),
    );
    Ok(())
}

fn cmd_translate(a: &TranslateArgs) -> Result<()> {
    let state = TrainState::load(&a.checkpoint)?;
    let inputs = io::list_pngs(&a.input)?;
    if inputs.is_empty() {
        return Err(Error::Dataset(format!("no PNG files in {}", a.input.display())));
    }
    let manifest = claim_dir(&a.out, a.overwrite)?;
    RunManifest::new(Some(state.config.to_toml()), None, Some(state.config.seed)).write_new(&manifest)?;
    let images = inputs.iter().map(|p| io::read_network_input(p)).collect::<Result<Vec<_>>>()?;
    let outputs = trainer::translate_images(&state.gen, &images, a.target)?;
    for (p, img) in inputs.iter().zip(&outputs) {
        io::write_image(&a.out.join(p.file_name().expect("listed files have names")), img)?;
    }
    emit("translated", serde_json::json!({ "count": outputs.len(), "target": a.target.as_str(), "out": a.out }));
    Ok(())
}

/// `DIR/seg/SPLIT` → `DIR/sim/SPLIT`.
fn sibling_sim(masks: &Path) -> Option<PathBuf> {
    let split = masks.file_name()?;
    let seg = masks.parent()?;
    (seg.file_name()? == "seg").then(|| seg.parent().unwrap_or(Path::new("")).join("sim").join(split))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let features: FeatureSource = a.features.parse()?;
    let ssim = match &a.masks {
        Some(masks) => {
            let reference = a.source.clone().or_else(|| sibling_sim(masks)).ok_or_else(|| {
                Error::InvalidArgument("--masks needs --source unless it is a DATA/seg/SPLIT directory".into())
            })?;
            Some(SsimInputs { reference, masks: masks.clone() })
        }
        None => None,
    };
    let report = evaluate_dirs(&a.a, &a.b, ssim.as_ref(), &features)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&a.out, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&a.out, e))?;
    emit("evaluated", serde_json::to_value(&report)?);
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let rows = report::collect(&a.runs)?;
    let out = a.out.clone().unwrap_or_else(|| a.runs.clone());
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let csv = out.join("summary.csv");
    std::fs::write(&csv, report::to_csv(&rows)).map_err(|e| Error::io(&csv, e))?;
    let md = out.join("summary.md");
    std::fs::write(&md, report::to_markdown(&rows)).map_err(|e| Error::io(&md, e))?;
    emit("report", serde_json::json!({ "rows": rows.len(), "csv": csv, "markdown": md }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Phantom(PhantomCommand::Generate(a)) => cmd_phantom(a),
        Command::Train(a) => cmd_train(a),
        Command::Translate(a) => cmd_translate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut fields = serde_json::json!({ "message": e.to_string() });
            if let Error::NonFiniteLoss { dump: Some(p), .. } = &e {
                fields["dump"] = serde_json::json!(p);
            }
            emit("error", fields);
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn size_and_sibling_parsing() {
        assert_eq!(parse_size("64x88").unwrap(), (64, 88));
        assert!(parse_size("64").is_err());
        assert_eq!(sibling_sim(Path::new("d/seg/test")).unwrap(), PathBuf::from("d/sim/test"));
        assert!(sibling_sim(Path::new("d/masks")).is_none());
    }
}

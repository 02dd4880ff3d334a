use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use facelrp::geometry::{au_bounding_box, AuBoxConfig, LandmarkSet};
use facelrp::heatmap::{render, save_png, RenderOptions};
use facelrp::lrp::{explain, write_relevance_map, RulePreset};
use facelrp::metrics::{f1_to_csv, measure, MuOutcome, MuVariant};
use facelrp::model::{classify, forward, load_model};
use facelrp::pipeline::{emit_report, load_image_tensor, run_verification, RunConfig};
use facelrp::ActionUnit;

#[derive(Parser)]
#[command(
    name = "facelrp",
    version,
    about = "Verify what facial Action Unit classifiers look at"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify, explain and score every entry of a manifest.
    Verify(VerifyArgs),
    /// Explain one image and print its localization scores.
    Explain(ExplainArgs),
    /// Validate a model file and print its topology.
    InspectModel {
        #[arg(long)]
        model: PathBuf,
    },
    /// Classification metrics only.
    F1(F1Args),
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSON Lines manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// AU box configuration; the built-in boxes are used when omitted.
    #[arg(long)]
    boxes: Option<PathBuf>,
    /// basic, epsilon, alphabeta, alpha1beta0, flat or composite.
    #[arg(long, default_value = "composite")]
    preset: String,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    /// standard or topNN (e.g. top25); repeat for several.
    #[arg(long = "variant", default_value = "standard")]
    variants: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Also write one heatmap PNG per explained AU.
    #[arg(long)]
    heatmaps: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// JSON file with 68 [x, y] points (bare array or {"points": [...]}).
    /// Defaults to the built-in mean face.
    #[arg(long)]
    landmarks: Option<PathBuf>,
    #[arg(long)]
    au: ActionUnit,
    #[arg(long)]
    boxes: Option<PathBuf>,
    #[arg(long, default_value = "composite")]
    preset: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct F1Args {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    /// Writes f1.csv and f1.json here as well as printing the table.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify(args) => verify(args),
        Command::Explain(args) => explain_one(args).map(|_| ExitCode::SUCCESS),
        Command::InspectModel { model } => inspect(&model).map(|_| ExitCode::SUCCESS),
        Command::F1(args) => f1(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn parse_variants(names: &[String]) -> Result<Vec<MuVariant>> {
    let mut out = vec![];
    for name in names.iter().flat_map(|n| n.split(',')) {
        let v: MuVariant = name.trim().parse()?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    Ok(out)
}

/// 2 when any entry was skipped or failed.
fn exit_code(skipped: usize, failed: usize) -> ExitCode {
    if skipped + failed > 0 {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}

fn verify(args: VerifyArgs) -> Result<ExitCode> {
    let mut config = RunConfig::new(&args.model, &args.manifest, &args.out);
    config.boxes_path = args.boxes;
    config.preset = RulePreset::by_name(&args.preset)?;
    config.variants = parse_variants(&args.variants)?;
    config.threshold = args.threshold;
    config.heatmaps = args.heatmaps;
    config.jobs = args.jobs;
    let report = run_verification(&config)?;
    emit_report(&report, Some(&config), &args.out)
        .with_context(|| format!("writing reports to {}", args.out.display()))?;
    for notice in &report.notices {
        info!("{notice}");
    }
    let c = report.counts;
    println!(
        "{} entries: {} processed, {} skipped, {} failed; {} mu records; reports in {}",
        c.lines,
        c.processed,
        c.skipped,
        c.failed,
        report.records.len(),
        args.out.display()
    );
    Ok(exit_code(c.skipped, c.failed))
}

fn read_landmarks(path: &Path) -> Result<LandmarkSet> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let points = match value.get("points") {
        Some(p) => p.clone(),
        None => value,
    };
    let points: Vec<[f32; 2]> = serde_json::from_value(points)
        .with_context(|| format!("{} must hold an array of [x, y] points", path.display()))?;
    Ok(LandmarkSet::new(points)?)
}

fn explain_one(args: ExplainArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let preset = RulePreset::by_name(&args.preset)?;
    let boxes = match &args.boxes {
        Some(p) => AuBoxConfig::load(p)?,
        None => AuBoxConfig::default(),
    };
    let [_, h, w] = model.input_shape();
    let landmarks = match &args.landmarks {
        Some(p) => read_landmarks(p)?,
        None => LandmarkSet::mean_face(),
    };
    let input = load_image_tensor(&args.image, model.input_shape())?;
    let trace = forward(&model, &input)?;
    let idx = model
        .label_index(args.au)
        .with_context(|| format!("model has no output for {}", args.au))?;
    let map = explain(&model, &trace, args.au, &preset)?;
    let bbox = au_bounding_box(&landmarks, args.au, &boxes, (h, w))?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let stem = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let stem = format!("{stem}_{}_{}", args.au, preset.name);
    let heatmap_path = args.out.join(format!("{stem}.png"));
    save_png(
        &render(
            &map,
            &RenderOptions {
                bbox: Some(bbox),
                ..Default::default()
            },
        )?,
        &heatmap_path,
    )?;
    write_relevance_map(
        &map,
        &preset,
        Some(&args.image.to_string_lossy()),
        &args.out,
        &stem,
    )?;

    let detected = classify(&trace, 0.5).contains(&args.au);
    println!(
        "{}: probability {:.4} ({}), logit {:.4}",
        args.au,
        trace.probabilities[idx],
        if detected { "detected" } else { "not detected" },
        trace.logits[idx]
    );
    println!(
        "box x {}..={} y {}..={}",
        bbox.x_min, bbox.x_max, bbox.y_min, bbox.y_max
    );
    for variant in [MuVariant::Standard, MuVariant::TOP25] {
        match measure("", "", &map, &bbox, variant)? {
            MuOutcome::Defined(r) => println!("{variant}: mu {:.4} mu_w {:.4}", r.mu, r.mu_w),
            MuOutcome::Undefined(_) => println!("{variant}: mu undefined (no positive relevance)"),
        }
    }
    println!("heatmap {}", heatmap_path.display());
    Ok(())
}

fn inspect(model: &Path) -> Result<()> {
    let model = load_model(model)?;
    println!("{model}");
    if model.golden().is_some() {
        println!("golden self-check passed");
    }
    Ok(())
}

fn f1(args: F1Args) -> Result<ExitCode> {
    let out = match &args.out {
        Some(o) => o.clone(),
        None => std::env::temp_dir(),
    };
    let mut config = RunConfig::new(&args.model, &args.manifest, out);
    config.threshold = args.threshold;
    config.jobs = args.jobs;
    config.classify_only = true;
    let report = run_verification(&config)?;
    if report.f1.is_empty() {
        bail!("no F1 rows produced");
    }
    let table = f1_to_csv(&report.f1);
    print!("{table}");
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("f1.csv"), &table)?;
        std::fs::write(
            dir.join("f1.json"),
            serde_json::to_string_pretty(&report.f1)? + "\n",
        )?;
    }
    Ok(exit_code(report.counts.skipped, report.counts.failed))
}

//! End-to-end verification over a manifest of face images.
//!
//! Each entry is classified, every correctly detected Action Unit is
//! explained, and the explanation is scored against the AU's box. Entries are
//! processed in fixed-size chunks on a worker pool; results are reduced in
//! manifest order so the output does not depend on the number of workers.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{DynamicImage, RgbImage};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::au::ActionUnit;
use crate::error::{Error, Result};
use crate::geometry::{au_bounding_box, validate_landmarks, AuBoxConfig, LandmarkSet};
use crate::heatmap::{render, save_png, RenderOptions};
use crate::lrp::{explain, RulePreset};
use crate::metrics::{
    f1_to_csv, filter_correct, measure, records_to_csv, rows_to_csv, AggregateRow, Aggregator,
    Confusion, F1Row, MuOutcome, MuRecord, MuVariant, UndefinedMu,
};
use crate::model::{classify, forward, load_model, ModelSpec};
use crate::tensor::Tensor;

const CHUNK: usize = 256;

#[derive(Debug, Deserialize)]
struct RawEntry {
    image_id: String,
    path: String,
    landmarks: Vec<[f32; 2]>,
    aus: Vec<String>,
    dataset: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// 1-based line number in the manifest.
    pub line: usize,
    pub image_id: String,
    /// Resolved against the manifest's directory when relative.
    pub path: PathBuf,
    pub landmarks: LandmarkSet,
    pub ground_truth: BTreeSet<ActionUnit>,
    pub dataset: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ManifestItem {
    Entry(ManifestEntry),
    Skipped { line: usize, reason: String },
}

/// Streams a JSON Lines manifest. Blank lines are ignored.
pub struct ManifestReader {
    lines: Lines<BufReader<File>>,
    base: PathBuf,
    line: usize,
}

pub fn ingest_manifest(path: impl AsRef<Path>) -> Result<ManifestReader> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(ManifestReader {
        lines: BufReader::new(file).lines(),
        base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        line: 0,
    })
}

/// Parses one manifest line; `base` resolves relative image paths.
pub fn parse_manifest_line(text: &str, line: usize, base: &Path) -> ManifestItem {
    let skip = |reason: String| ManifestItem::Skipped { line, reason };
    let raw: RawEntry = match serde_json::from_str(text) {
        Ok(r) => r,
        Err(e) => return skip(format!("malformed entry: {e}")),
    };
    let landmarks = match LandmarkSet::new(raw.landmarks) {
        Ok(l) => l,
        Err(e) => return skip(e.to_string()),
    };
    let mut ground_truth = BTreeSet::new();
    for au in &raw.aus {
        match au.parse() {
            Ok(au) => {
                ground_truth.insert(au);
            }
            Err(e) => return skip(format!("{e}")),
        }
    }
    ManifestItem::Entry(ManifestEntry {
        line,
        image_id: raw.image_id,
        path: base.join(raw.path),
        landmarks,
        ground_truth,
        dataset: raw.dataset,
    })
}

impl Iterator for ManifestReader {
    type Item = Result<ManifestItem>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => return Some(Err(Error::io(&self.base, e))),
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            return Some(Ok(parse_manifest_line(&text, self.line, &self.base)));
        }
    }
}

/// Converts a decoded image to a `C x H x W` tensor in `[0, 1]`.
///
/// Color images feeding a one-channel model are reduced by luminance
/// (0.299, 0.587, 0.114); gray images feeding a three-channel model are
/// replicated.
pub fn image_to_tensor(img: &DynamicImage, channels: usize) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let data: Vec<f32> = match channels {
        1 if img.color().has_color() => img
            .to_rgb8()
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0.map(f64::from);
                ((0.299 * r + 0.587 * g + 0.114 * b) / 255.0) as f32
            })
            .collect(),
        1 => img
            .to_luma8()
            .pixels()
            .map(|p| p.0[0] as f32 / 255.0)
            .collect(),
        3 => {
            let rgb = img.to_rgb8();
            let mut data = vec![0.0f32; 3 * plane];
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * plane + i] = p.0[c] as f32 / 255.0;
                }
            }
            data
        }
        c => {
            return Err(Error::Config(format!(
                "images can feed 1- or 3-channel models, not {c}"
            )))
        }
    };
    Tensor::new(vec![channels, h, w], data)
}

/// Opens an image and converts it for a model with input shape `[C, H, W]`.
pub fn load_image_tensor(path: impl AsRef<Path>, [c, h, w]: [usize; 3]) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if (img.height() as usize, img.width() as usize) != (h, w) {
        return Err(Error::Image {
            path: path.to_path_buf(),
            reason: format!(
                "image is {}x{}, model expects {h}x{w}",
                img.height(),
                img.width()
            ),
        });
    }
    image_to_tensor(&img, c)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model_path: PathBuf,
    pub manifest_path: PathBuf,
    /// `None` uses the built-in boxes.
    pub boxes_path: Option<PathBuf>,
    pub preset: RulePreset,
    pub variants: Vec<MuVariant>,
    pub out_dir: PathBuf,
    pub heatmaps: bool,
    pub threshold: f32,
    pub jobs: usize,
    /// Stop after classification: F1 only, no explanations.
    pub classify_only: bool,
}

impl RunConfig {
    pub fn new(
        model_path: impl Into<PathBuf>,
        manifest_path: impl Into<PathBuf>,
        out_dir: impl Into<PathBuf>,
    ) -> Self {
        RunConfig {
            model_path: model_path.into(),
            manifest_path: manifest_path.into(),
            boxes_path: None,
            preset: RulePreset::composite(),
            variants: vec![MuVariant::Standard],
            out_dir: out_dir.into(),
            heatmaps: false,
            threshold: 0.5,
            jobs: 1,
            classify_only: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("at least one mu variant is required".into()));
        }
        for v in &self.variants {
            if let MuVariant::TopK { fraction } = v {
                if !(*fraction > 0.0 && *fraction <= 1.0) {
                    return Err(Error::Config(format!(
                        "top-k fraction {fraction} outside (0, 1]"
                    )));
                }
            }
        }
        for p in [&self.model_path, &self.manifest_path]
            .into_iter()
            .chain(self.boxes_path.as_ref())
        {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    /// The entry was invalid and never reached the model.
    Skipped,
    /// The entry was valid but could not be processed.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryIssue {
    pub line: usize,
    pub image_id: Option<String>,
    pub kind: IssueKind,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunCounts {
    /// Non-blank manifest lines.
    pub lines: usize,
    pub processed: usize,
    pub skipped: usize,
    pub failed: usize,
    pub true_positives: usize,
    pub heatmaps: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub rows: Vec<AggregateRow>,
    pub records: Vec<MuRecord>,
    pub undefined: Vec<UndefinedMu>,
    pub f1: Vec<F1Row>,
    pub notices: Vec<String>,
    pub counts: RunCounts,
    pub issues: Vec<EntryIssue>,
    pub wall_time_secs: f64,
}

struct Processed {
    dataset: String,
    predicted: BTreeSet<ActionUnit>,
    truth: BTreeSet<ActionUnit>,
    outcomes: Vec<MuOutcome>,
    heatmaps: Vec<(String, RgbImage)>,
}

/// Everything that is fixed for a run and shared read-only by the workers.
struct Context<'a> {
    model: &'a ModelSpec,
    boxes: &'a AuBoxConfig,
    config: &'a RunConfig,
}

fn file_stem_safe(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

enum EntryResult {
    Done(Processed),
    Issue(EntryIssue),
}

fn process_entry(ctx: &Context, entry: &ManifestEntry) -> EntryResult {
    let issue = |kind, reason: String| {
        EntryResult::Issue(EntryIssue {
            line: entry.line,
            image_id: Some(entry.image_id.clone()),
            kind,
            reason,
        })
    };
    let img = match image::open(&entry.path) {
        Ok(img) => img,
        Err(e) => return issue(IssueKind::Failed, format!("{}: {e}", entry.path.display())),
    };
    let [c, h, w] = ctx.model.input_shape();
    if (img.height() as usize, img.width() as usize) != (h, w) {
        return issue(
            IssueKind::Skipped,
            format!(
                "image is {}x{}, model expects {h}x{w}",
                img.height(),
                img.width()
            ),
        );
    }
    let landmarks = match validate_landmarks(entry.landmarks.points().to_vec(), (h, w)) {
        Ok(v) => {
            if !v.out_of_bounds.is_empty() {
                warn!(
                    "{}: {} landmarks outside the image",
                    entry.image_id,
                    v.out_of_bounds.len()
                );
            }
            v.landmarks
        }
        Err(e) => return issue(IssueKind::Skipped, e.to_string()),
    };
    match analyse(ctx, entry, &img, c, &landmarks) {
        Ok(p) => EntryResult::Done(p),
        Err(e) => issue(IssueKind::Failed, e.to_string()),
    }
}

fn analyse(
    ctx: &Context,
    entry: &ManifestEntry,
    img: &DynamicImage,
    channels: usize,
    landmarks: &LandmarkSet,
) -> Result<Processed> {
    let input = image_to_tensor(img, channels)?;
    let trace = forward(ctx.model, &input)?;
    let predicted = classify(&trace, ctx.config.threshold);
    let dims = (img.height() as usize, img.width() as usize);
    let mut outcomes = vec![];
    let mut heatmaps = vec![];
    let targets = match ctx.config.classify_only {
        true => BTreeSet::new(),
        false => filter_correct(&predicted, &entry.ground_truth),
    };
    for au in targets {
        let map = explain(ctx.model, &trace, au, &ctx.config.preset)?;
        let bbox = au_bounding_box(landmarks, au, ctx.boxes, dims)?;
        for &variant in &ctx.config.variants {
            outcomes.push(measure(
                &entry.image_id,
                &entry.dataset,
                &map,
                &bbox,
                variant,
            )?);
        }
        if ctx.config.heatmaps {
            let opts = RenderOptions {
                bbox: Some(bbox),
                ..Default::default()
            };
            let name = format!(
                "{}_{au}_{}.png",
                file_stem_safe(&entry.image_id),
                file_stem_safe(&ctx.config.preset.name)
            );
            heatmaps.push((name, render(&map, &opts)?));
        }
    }
    Ok(Processed {
        dataset: entry.dataset.clone(),
        predicted,
        truth: entry.ground_truth.clone(),
        outcomes,
        heatmaps,
    })
}

/// Runs the whole verification and writes heatmaps if enabled.
/// Reports are written separately by [`emit_report`].
pub fn run_verification(config: &RunConfig) -> Result<Report> {
    let started = Instant::now();
    config.validate()?;
    let model = load_model(&config.model_path)?;
    let boxes = match &config.boxes_path {
        Some(p) => AuBoxConfig::load(p)?,
        None => AuBoxConfig::default(),
    };
    if let Some(au) = model
        .output_labels()
        .iter()
        .find(|au| !boxes.regions.contains_key(au))
    {
        return Err(Error::Config(format!(
            "box config has no region for model label {au}"
        )));
    }
    let heatmap_dir = config.out_dir.join("heatmaps");
    if config.heatmaps {
        std::fs::create_dir_all(&heatmap_dir).map_err(|e| Error::io(&heatmap_dir, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let ctx = Context {
        model: &model,
        boxes: &boxes,
        config,
    };

    let mut report = Report::default();
    let mut aggregator = Aggregator::new();
    let mut confusion: BTreeMap<(String, ActionUnit), Confusion> = BTreeMap::new();
    let mut reader = ingest_manifest(&config.manifest_path)?;
    loop {
        let chunk: Vec<ManifestItem> = reader.by_ref().take(CHUNK).collect::<Result<_>>()?;
        if chunk.is_empty() {
            break;
        }
        let results: Vec<EntryResult> = pool.install(|| {
            chunk
                .par_iter()
                .map(|item| match item {
                    ManifestItem::Entry(e) => process_entry(&ctx, e),
                    ManifestItem::Skipped { line, reason } => EntryResult::Issue(EntryIssue {
                        line: *line,
                        image_id: None,
                        kind: IssueKind::Skipped,
                        reason: reason.clone(),
                    }),
                })
                .collect()
        });
        for result in results {
            report.counts.lines += 1;
            let p = match result {
                EntryResult::Done(p) => p,
                EntryResult::Issue(issue) => {
                    warn!("manifest line {}: {}", issue.line, issue.reason);
                    match issue.kind {
                        IssueKind::Skipped => report.counts.skipped += 1,
                        IssueKind::Failed => report.counts.failed += 1,
                    }
                    report.issues.push(issue);
                    continue;
                }
            };
            report.counts.processed += 1;
            for &au in model.output_labels() {
                confusion
                    .entry((p.dataset.clone(), au))
                    .or_default()
                    .add(p.predicted.contains(&au), p.truth.contains(&au));
                if !config.classify_only {
                    for &v in &config.variants {
                        aggregator.expect(&p.dataset, au, v);
                    }
                }
            }
            report.counts.true_positives += filter_correct(&p.predicted, &p.truth).len();
            for outcome in p.outcomes {
                aggregator.add(&outcome);
                match outcome {
                    MuOutcome::Defined(r) => report.records.push(r),
                    MuOutcome::Undefined(u) => report.undefined.push(u),
                }
            }
            for (name, img) in p.heatmaps {
                save_png(&img, heatmap_dir.join(name))?;
                report.counts.heatmaps += 1;
            }
        }
    }
    if report.counts.processed == 0 {
        return Err(Error::Config(format!(
            "no usable manifest entries ({} skipped, {} failed)",
            report.counts.skipped, report.counts.failed
        )));
    }
    let aggregation = aggregator.finish();
    report.rows = aggregation.rows;
    report.notices = aggregation.notices;
    report.f1 = confusion
        .into_iter()
        .map(|((dataset, au), c)| F1Row {
            dataset,
            au,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            f1: c.f1(),
        })
        .collect();
    report.wall_time_secs = started.elapsed().as_secs_f64();
    info!(
        "{} processed, {} skipped, {} failed, {} mu records",
        report.counts.processed,
        report.counts.skipped,
        report.counts.failed,
        report.records.len()
    );
    Ok(report)
}

#[derive(Serialize)]
struct RunSummary<'a> {
    config: Option<&'a RunConfig>,
    counts: RunCounts,
    undefined_mu: usize,
    notices: &'a [String],
    issues: &'a [EntryIssue],
    wall_time_secs: f64,
}

pub const REPORT_FILES: [&str; 5] = [
    "report.csv",
    "report.json",
    "records.csv",
    "f1.csv",
    "f1.json",
];

/// Writes the report tables plus `run_summary.json` into `out_dir`.
/// Only the summary carries timing, so the tables are reproducible byte for byte.
pub fn emit_report(
    report: &Report,
    config: Option<&RunConfig>,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let summary = RunSummary {
        config,
        counts: report.counts,
        undefined_mu: report.undefined.len(),
        notices: &report.notices,
        issues: &report.issues,
        wall_time_secs: report.wall_time_secs,
    };
    let files = [
        ("report.csv", rows_to_csv(&report.rows)),
        (
            "report.json",
            serde_json::to_string_pretty(&report.rows)? + "\n",
        ),
        ("records.csv", records_to_csv(&report.records)),
        ("f1.csv", f1_to_csv(&report.f1)),
        ("f1.json", serde_json::to_string_pretty(&report.f1)? + "\n"),
        (
            "run_summary.json",
            serde_json::to_string_pretty(&summary)? + "\n",
        ),
    ];
    let mut written = vec![];
    for (name, text) in files {
        let path = out_dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb};

    #[test]
    fn manifest_lines() {
        let base = Path::new("/data");
        let pts: Vec<[f32; 2]> = vec![[1.0, 2.0]; 68];
        let good = serde_json::json!({
            "image_id": "a", "path": "img/a.png", "landmarks": pts,
            "aus": ["AU04", "25"], "dataset": "d"
        });
        match parse_manifest_line(&good.to_string(), 3, base) {
            ManifestItem::Entry(e) => {
                assert_eq!(e.line, 3);
                assert_eq!(e.path, Path::new("/data/img/a.png"));
                assert_eq!(e.ground_truth, [ActionUnit(4), ActionUnit(25)].into());
            }
            other => panic!("{other:?}"),
        }
        let mut short = good.clone();
        short["landmarks"] = serde_json::json!(vec![[1.0, 2.0]; 67]);
        assert!(matches!(
            parse_manifest_line(&short.to_string(), 1, base),
            ManifestItem::Skipped { line: 1, .. }
        ));
        assert!(matches!(
            parse_manifest_line("{not json", 2, base),
            ManifestItem::Skipped { line: 2, .. }
        ));
        let mut bad_au = good;
        bad_au["aus"] = serde_json::json!(["smile"]);
        assert!(matches!(
            parse_manifest_line(&bad_au.to_string(), 1, base),
            ManifestItem::Skipped { .. }
        ));
    }

    #[test]
    fn pixel_scaling_and_channel_conversion() {
        let gray = DynamicImage::ImageLuma8(GrayImage::from_fn(2, 1, |x, _| {
            Luma([if x == 0 { 255 } else { 0 }])
        }));
        let t = image_to_tensor(&gray, 1).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0]);
        let t3 = image_to_tensor(&gray, 3).unwrap();
        assert_eq!(t3.shape(), &[3, 1, 2]);
        assert_eq!(t3.data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);

        let rgb = DynamicImage::ImageRgb8(RgbImage::from_fn(1, 1, |_, _| Rgb([255, 0, 0])));
        let t = image_to_tensor(&rgb, 1).unwrap();
        assert!((t.data()[0] - 0.299).abs() < 1e-6);
        let white = DynamicImage::ImageRgb8(RgbImage::from_pixel(1, 1, Rgb([255; 3])));
        assert_eq!(image_to_tensor(&white, 1).unwrap().data(), &[1.0]);
        assert!(image_to_tensor(&white, 2).is_err());
    }

    #[test]
    fn config_validation() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("m.json");
        std::fs::write(&f, "{}").unwrap();
        let mut c = RunConfig::new(&f, &f, dir.path());
        assert!(c.validate().is_ok());
        c.threshold = 1.0;
        assert!(c.validate().is_err());
        c.threshold = 0.5;
        c.jobs = 0;
        assert!(c.validate().is_err());
        c.jobs = 2;
        c.manifest_path = dir.path().join("missing.jsonl");
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&Report::default(), None, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1);
        let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        assert_eq!(json.trim(), "[]");
    }
}

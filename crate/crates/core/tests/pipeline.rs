use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use facelrp::geometry::{au_bounding_box, box_mask, AuBoxConfig, LandmarkSet};
use facelrp::lrp::{explain, RulePreset};
use facelrp::metrics::{parse_rows_csv, AggregateRow, F1Row, MuVariant};
use facelrp::model::{classify, forward, load_model};
use facelrp::pipeline::{
    emit_report, image_to_tensor, ingest_manifest, run_verification, ManifestItem, RunConfig,
};
use facelrp::ActionUnit;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn manifest_lines() -> Vec<serde_json::Value> {
    std::fs::read_to_string(fixture("manifest.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Writes entries to a manifest with absolute image paths.
fn write_manifest(dir: &Path, entries: &[serde_json::Value]) -> PathBuf {
    let text: String = entries
        .iter()
        .map(|e| {
            let mut e = e.clone();
            if let Some(p) = e["path"].as_str() {
                if !Path::new(p).is_absolute() {
                    e["path"] = fixture(p).to_string_lossy().into_owned().into();
                }
            }
            e.to_string() + "\n"
        })
        .collect();
    let path = dir.join("manifest.jsonl");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn two_image_run_matches_step_by_step_composition() {
    let out = tempfile::tempdir().unwrap();
    let mut config = RunConfig::new(
        fixture("toy_cnn.json"),
        fixture("manifest_2.jsonl"),
        out.path(),
    );
    config.variants = vec![MuVariant::Standard, MuVariant::TOP25];
    let report = run_verification(&config).unwrap();
    assert_eq!(report.counts.processed, 2);

    let model = load_model(fixture("toy_cnn.json")).unwrap();
    let boxes = AuBoxConfig::default();
    let preset = RulePreset::composite();
    let mut expected = vec![];
    for entry in &manifest_lines()[..2] {
        let img = image::open(fixture(entry["path"].as_str().unwrap())).unwrap();
        let trace = forward(&model, &image_to_tensor(&img, 1).unwrap()).unwrap();
        let truth: BTreeSet<ActionUnit> = entry["aus"]
            .as_array()
            .unwrap()
            .iter()
            .map(|a| a.as_str().unwrap().parse().unwrap())
            .collect();
        let points: Vec<[f32; 2]> = serde_json::from_value(entry["landmarks"].clone()).unwrap();
        let landmarks = LandmarkSet::new(points).unwrap();
        for au in classify(&trace, 0.5).intersection(&truth) {
            let map = explain(&model, &trace, *au, &preset).unwrap();
            let bbox = au_bounding_box(&landmarks, *au, &boxes, (112, 112)).unwrap();
            let mask = box_mask(&bbox, (112, 112)).unwrap();
            // plain double loop over the mask
            let (mut inside, mut total) = (0.0f64, 0.0f64);
            for y in 0..112 {
                for x in 0..112 {
                    let v = map.pixel_values.data()[y * 112 + x] as f64;
                    if v > 0.0 {
                        total += v;
                        if mask.data()[y * 112 + x] == 1.0 {
                            inside += v;
                        }
                    }
                }
            }
            let frac = ((bbox.x_max - bbox.x_min + 1) * (bbox.y_max - bbox.y_min + 1)) as f64
                / (112.0 * 112.0);
            expected.push((
                entry["image_id"].as_str().unwrap().to_string(),
                *au,
                inside / total,
                inside / total / frac,
            ));
        }
    }
    assert!(
        !expected.is_empty(),
        "fixture should contain true positives"
    );
    let standard: Vec<_> = report
        .records
        .iter()
        .filter(|r| r.variant == MuVariant::Standard)
        .collect();
    assert_eq!(standard.len(), expected.len());
    for (r, (id, au, mu, mu_w)) in standard.iter().zip(&expected) {
        assert_eq!((&r.image_id, r.au), (id, *au));
        assert!((r.mu - mu).abs() < 1e-9, "{} vs {mu}", r.mu);
        assert!((r.mu_w - mu_w).abs() < 1e-9);
    }
    for r in &report.records {
        assert!(manifest_lines()[..2]
            .iter()
            .any(|e| e["image_id"] == r.image_id.as_str()));
    }
}

#[test]
fn no_true_positives_still_reports_f1() {
    let dir = tempfile::tempdir().unwrap();
    let entries: Vec<_> = manifest_lines()
        .into_iter()
        .map(|mut e| {
            e["aus"] = serde_json::json!([]);
            e
        })
        .collect();
    let manifest = write_manifest(dir.path(), &entries);
    let report = run_verification(&RunConfig::new(
        fixture("toy_cnn.json"),
        manifest,
        dir.path(),
    ))
    .unwrap();
    assert!(report.records.is_empty());
    assert!(report.rows.is_empty());
    // two datasets x two model labels
    assert_eq!(report.f1.len(), 4);
    assert!(report
        .f1
        .iter()
        .all(|r| r.tp == 0 && r.fn_ == 0 && r.f1 == 0.0));
    assert_eq!(report.notices.len(), 4);
}

#[test]
fn bad_entries_are_counted_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let small = dir.path().join("small.png");
    image::GrayImage::new(50, 50).save(&small).unwrap();
    let good = manifest_lines();
    let mut short = good[1].clone();
    short["landmarks"] = serde_json::json!(vec![[10.0, 10.0]; 67]);
    let mut wrong_size = good[2].clone();
    wrong_size["path"] = small.to_string_lossy().into_owned().into();
    let mut missing = good[3].clone();
    missing["path"] = dir
        .path()
        .join("nope.png")
        .to_string_lossy()
        .into_owned()
        .into();
    let manifest = write_manifest(dir.path(), &[good[0].clone(), short, wrong_size, missing]);
    let mut text = std::fs::read_to_string(&manifest).unwrap();
    text.push_str("\n{\"image_id\": 3\n");
    std::fs::write(&manifest, text).unwrap();

    let items: Vec<ManifestItem> = ingest_manifest(&manifest)
        .unwrap()
        .map(Result::unwrap)
        .collect();
    assert_eq!(items.len(), 5);

    let report = run_verification(&RunConfig::new(
        fixture("toy_cnn.json"),
        &manifest,
        dir.path(),
    ))
    .unwrap();
    let c = report.counts;
    assert_eq!((c.lines, c.processed, c.skipped, c.failed), (5, 1, 3, 1));
    assert_eq!(c.processed + c.skipped + c.failed, c.lines);
    assert_eq!(
        report.issues.iter().map(|i| i.line).collect::<Vec<_>>(),
        vec![2, 3, 4, 6]
    );
}

#[test]
fn nothing_processed_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.jsonl");
    std::fs::write(&manifest, "not json\n").unwrap();
    assert!(run_verification(&RunConfig::new(
        fixture("toy_cnn.json"),
        manifest,
        dir.path()
    ))
    .is_err());
}

#[test]
fn csv_and_json_agree_and_heatmaps_are_written() {
    let out = tempfile::tempdir().unwrap();
    let mut config = RunConfig::new(
        fixture("toy_cnn.json"),
        fixture("manifest.jsonl"),
        out.path(),
    );
    config.variants = vec![MuVariant::Standard, MuVariant::TOP25];
    config.heatmaps = true;
    let report = run_verification(&config).unwrap();
    emit_report(&report, Some(&config), out.path()).unwrap();

    let csv_rows =
        parse_rows_csv(&std::fs::read_to_string(out.path().join("report.csv")).unwrap()).unwrap();
    let json_rows: Vec<AggregateRow> =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(csv_rows, json_rows);
    assert_eq!(csv_rows, report.rows);
    let f1: Vec<F1Row> =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("f1.json")).unwrap())
            .unwrap();
    assert_eq!(f1, report.f1);

    let heatmaps: Vec<_> = std::fs::read_dir(out.path().join("heatmaps"))
        .unwrap()
        .collect();
    assert_eq!(heatmaps.len(), report.counts.true_positives);
    assert_eq!(report.counts.heatmaps, report.counts.true_positives);
    let first = out.path().join("heatmaps").join(format!(
        "{}_{}_composite.png",
        report.records[0].image_id, report.records[0].au
    ));
    let img = image::open(first).unwrap();
    assert_eq!((img.width(), img.height()), (112, 112));
}

#[test]
fn fixture_report_matches_golden_files() {
    let out = tempfile::tempdir().unwrap();
    let mut config = RunConfig::new(
        fixture("toy_cnn.json"),
        fixture("manifest.jsonl"),
        out.path(),
    );
    config.variants = vec![MuVariant::Standard, MuVariant::TOP25];
    let report = run_verification(&config).unwrap();
    emit_report(&report, Some(&config), out.path()).unwrap();
    let golden = fixture("golden_report");
    for name in ["report.csv", "records.csv", "f1.csv"] {
        let got = std::fs::read_to_string(out.path().join(name)).unwrap();
        if std::env::var_os("UPDATE_GOLDEN").is_some() {
            std::fs::create_dir_all(&golden).unwrap();
            std::fs::write(golden.join(name), &got).unwrap();
        }
        let want = std::fs::read_to_string(golden.join(name)).unwrap();
        assert_eq!(got, want, "{name} differs from golden");
    }
}

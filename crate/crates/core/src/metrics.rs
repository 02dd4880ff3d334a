//! Localization and classification metrics.
//!
//! `mu` is the share of an explanation's positive relevance that falls inside
//! the Action Unit's box. `mu_w` divides it by the box's share of the image,
//! so `mu_w = 1` means the box holds exactly its area's worth of relevance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::au::ActionUnit;
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, ImageDims};
use crate::lrp::RelevanceMap;
use crate::tensor::Tensor;

/// Positive relevance inside the box and in the whole image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Localization {
    pub inside: f64,
    pub total: f64,
}

impl Localization {
    /// `None` when the map has no positive relevance.
    pub fn mu(&self) -> Option<f64> {
        (self.total > 0.0).then(|| (self.inside / self.total).clamp(0.0, 1.0))
    }
}

/// Sums positive pixel relevance inside `mask` and overall; negative relevance is ignored.
pub fn mu(relevance: &RelevanceMap, mask: &Tensor) -> Result<Localization> {
    let grid = &relevance.pixel_values;
    if grid.shape() != mask.shape() {
        return Err(Error::Dimension {
            op: "mu mask",
            left: grid.shape().to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    let (mut inside, mut total) = (0.0f64, 0.0f64);
    for (&v, &m) in grid.data().iter().zip(mask.data()) {
        if v > 0.0 {
            total += v as f64;
            if m > 0.5 {
                inside += v as f64;
            }
        }
    }
    Ok(Localization { inside, total })
}

/// Same as [`mu`] but reads the box directly instead of a mask tensor.
pub fn mu_in_box(relevance: &RelevanceMap, bbox: &BoundingBox) -> Localization {
    let grid = &relevance.pixel_values;
    let w = grid.shape()[1];
    let (mut inside, mut total) = (0.0f64, 0.0f64);
    for (i, &v) in grid.data().iter().enumerate() {
        if v > 0.0 {
            total += v as f64;
            if bbox.contains(i % w, i / w) {
                inside += v as f64;
            }
        }
    }
    Localization { inside, total }
}

pub fn mu_weighted(mu_value: f64, box_area_fraction: f64) -> Result<f64> {
    if !(box_area_fraction > 0.0 && box_area_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "box area fraction must be in (0, 1], got {box_area_fraction}"
        )));
    }
    Ok(mu_value / box_area_fraction)
}

/// Keeps the top `ceil(fraction * #positive)` positive pixels and zeroes
/// everything else. Ties at the cutoff go to the lowest flat index.
pub fn top_k_filter(relevance: &RelevanceMap, fraction: f64) -> Result<RelevanceMap> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "top-k fraction must be in (0, 1], got {fraction}"
        )));
    }
    let grid = relevance.pixel_values.data();
    let mut positive: Vec<usize> = (0..grid.len()).filter(|&i| grid[i] > 0.0).collect();
    // tolerance keeps e.g. 0.07 * 100 from rounding up to 8
    let keep = ((fraction * positive.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    positive.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]).then(a.cmp(&b)));
    let survivors: BTreeSet<usize> = positive.into_iter().take(keep).collect();

    let plane = grid.len();
    let pixels: Vec<f32> = (0..plane)
        .map(|i| if survivors.contains(&i) { grid[i] } else { 0.0 })
        .collect();
    let values: Vec<f32> = relevance
        .values
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if survivors.contains(&(i % plane)) {
                v
            } else {
                0.0
            }
        })
        .collect();
    Ok(RelevanceMap {
        target_au: relevance.target_au,
        values: Tensor::new(relevance.values.shape().to_vec(), values)?,
        pixel_values: Tensor::new(relevance.pixel_values.shape().to_vec(), pixels)?,
        output_relevance: relevance.output_relevance,
        source: relevance.source,
    })
}

/// How the map is restricted before measuring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MuVariant {
    Standard,
    /// Only the top `fraction` of positive pixels.
    TopK {
        fraction: f64,
    },
}

impl MuVariant {
    pub const TOP25: MuVariant = MuVariant::TopK { fraction: 0.25 };

    fn sort_key(&self) -> u64 {
        match self {
            MuVariant::Standard => 0,
            MuVariant::TopK { fraction } => 1 + fraction.to_bits(),
        }
    }
}

impl Eq for MuVariant {}

impl PartialOrd for MuVariant {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for MuVariant {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl fmt::Display for MuVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MuVariant::Standard => f.write_str("standard"),
            MuVariant::TopK { fraction } => write!(f, "top{}", fraction * 100.0),
        }
    }
}

impl FromStr for MuVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "standard" {
            return Ok(MuVariant::Standard);
        }
        let pct: f64 = s
            .strip_prefix("top")
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| Error::InvalidParameter(format!("unknown mu variant {s:?}")))?;
        let fraction = pct / 100.0;
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "top-k percentage must be in (0, 100], got {pct}"
            )));
        }
        Ok(MuVariant::TopK { fraction })
    }
}

impl Serialize for MuVariant {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MuVariant {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuRecord {
    pub image_id: String,
    pub dataset: String,
    pub au: ActionUnit,
    pub variant: MuVariant,
    pub mu: f64,
    pub mu_w: f64,
    pub inside: f64,
    pub total: f64,
    pub box_area_fraction: f64,
}

/// A measurement whose map had no positive relevance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UndefinedMu {
    pub image_id: String,
    pub dataset: String,
    pub au: ActionUnit,
    pub variant: MuVariant,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MuOutcome {
    Defined(MuRecord),
    Undefined(UndefinedMu),
}

/// Measures one explanation against its box under `variant`.
pub fn measure(
    image_id: &str,
    dataset: &str,
    map: &RelevanceMap,
    bbox: &BoundingBox,
    variant: MuVariant,
) -> Result<MuOutcome> {
    let dims: ImageDims = (map.height(), map.width());
    let loc = match variant {
        MuVariant::Standard => mu_in_box(map, bbox),
        MuVariant::TopK { fraction } => mu_in_box(&top_k_filter(map, fraction)?, bbox),
    };
    let fraction = bbox.area_fraction(dims);
    Ok(match loc.mu() {
        Some(mu) => MuOutcome::Defined(MuRecord {
            image_id: image_id.to_string(),
            dataset: dataset.to_string(),
            au: map.target_au,
            variant,
            mu,
            mu_w: mu_weighted(mu, fraction)?,
            inside: loc.inside,
            total: loc.total,
            box_area_fraction: fraction,
        }),
        None => MuOutcome::Undefined(UndefinedMu {
            image_id: image_id.to_string(),
            dataset: dataset.to_string(),
            au: map.target_au,
            variant,
        }),
    })
}

/// AUs that are both present and detected.
pub fn filter_correct(
    predicted: &BTreeSet<ActionUnit>,
    truth: &BTreeSet<ActionUnit>,
) -> BTreeSet<ActionUnit> {
    predicted.intersection(truth).copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub au: ActionUnit,
    pub variant: MuVariant,
    pub mean_mu: f64,
    pub mean_mu_w: f64,
    pub n: usize,
    pub n_undefined: usize,
}

/// Arithmetic mean that is exact for constant inputs and independent of input order.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let mut mean = 0.0;
    for (i, v) in values.iter().enumerate() {
        mean += (v - mean) / (i + 1) as f64;
    }
    mean
}

type GroupKey = (String, ActionUnit, MuVariant);

#[derive(Debug, Default)]
struct Group {
    mu: Vec<f64>,
    mu_w: Vec<f64>,
    undefined: usize,
}

/// Single-writer reduction of measurements into per-(dataset, AU, variant) rows.
#[derive(Debug, Default)]
pub struct Aggregator {
    groups: BTreeMap<GroupKey, Group>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Aggregation {
    pub rows: Vec<AggregateRow>,
    /// Groups that were expected or measured but produced no defined record.
    pub notices: Vec<String>,
}

impl Aggregator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a group so it is reported even if it ends up empty.
    pub fn expect(&mut self, dataset: &str, au: ActionUnit, variant: MuVariant) {
        self.groups
            .entry((dataset.to_string(), au, variant))
            .or_default();
    }

    pub fn add_record(&mut self, record: &MuRecord) {
        let g = self
            .groups
            .entry((record.dataset.clone(), record.au, record.variant))
            .or_default();
        g.mu.push(record.mu);
        g.mu_w.push(record.mu_w);
    }

    pub fn add_undefined(&mut self, undefined: &UndefinedMu) {
        self.groups
            .entry((undefined.dataset.clone(), undefined.au, undefined.variant))
            .or_default()
            .undefined += 1;
    }

    pub fn add(&mut self, outcome: &MuOutcome) {
        match outcome {
            MuOutcome::Defined(r) => self.add_record(r),
            MuOutcome::Undefined(u) => self.add_undefined(u),
        }
    }

    pub fn finish(self) -> Aggregation {
        let mut out = Aggregation::default();
        for ((dataset, au, variant), mut g) in self.groups {
            if g.mu.is_empty() {
                out.notices.push(format!(
                    "{dataset} {au} {variant}: no defined mu ({} undefined); row omitted",
                    g.undefined
                ));
                continue;
            }
            out.rows.push(AggregateRow {
                n: g.mu.len(),
                mean_mu: stable_mean(&mut g.mu),
                mean_mu_w: stable_mean(&mut g.mu_w),
                n_undefined: g.undefined,
                dataset,
                au,
                variant,
            });
        }
        out
    }
}

/// Rows for one dataset from a flat list of records.
pub fn aggregate(records: &[MuRecord], dataset: &str) -> Vec<AggregateRow> {
    let mut agg = Aggregator::new();
    records
        .iter()
        .filter(|r| r.dataset == dataset)
        .for_each(|r| agg.add_record(r));
    agg.finish().rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => {}
        }
    }

    /// `2 TP / (2 TP + FP + FN)`, 0 when nothing was predicted or present.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

pub fn confusion(
    predictions: &[BTreeSet<ActionUnit>],
    truth: &[BTreeSet<ActionUnit>],
    au: ActionUnit,
) -> Result<Confusion> {
    if predictions.len() != truth.len() {
        return Err(Error::Dimension {
            op: "f1_score",
            left: vec![predictions.len()],
            right: vec![truth.len()],
        });
    }
    let mut c = Confusion::default();
    for (p, t) in predictions.iter().zip(truth) {
        c.add(p.contains(&au), t.contains(&au));
    }
    Ok(c)
}

pub fn f1_score(
    predictions: &[BTreeSet<ActionUnit>],
    truth: &[BTreeSet<ActionUnit>],
    au: ActionUnit,
) -> Result<f64> {
    Ok(confusion(predictions, truth, au)?.f1())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Row {
    pub dataset: String,
    pub au: ActionUnit,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
}

pub const REPORT_CSV_HEADER: &str = "dataset,au,variant,mean_mu,mean_mu_w,n,n_undefined";
pub const RECORDS_CSV_HEADER: &str = "image_id,au,mu,mu_w,inside,total,box_area_fraction";
pub const F1_CSV_HEADER: &str = "dataset,au,tp,fp,fn,f1";

/// Shortest round-trip decimal, identical to the JSON mirror's rendering.
pub fn fmt_f64(v: f64) -> String {
    serde_json::to_string(&v).unwrap_or_else(|_| "null".into())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn rows_to_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            csv_field(&r.dataset),
            r.au,
            r.variant,
            fmt_f64(r.mean_mu),
            fmt_f64(r.mean_mu_w),
            r.n,
            r.n_undefined
        ));
    }
    out
}

pub fn records_to_csv(records: &[MuRecord]) -> String {
    let mut out = String::from(RECORDS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            csv_field(&r.image_id),
            r.au,
            fmt_f64(r.mu),
            fmt_f64(r.mu_w),
            fmt_f64(r.inside),
            fmt_f64(r.total),
            fmt_f64(r.box_area_fraction)
        ));
    }
    out
}

pub fn f1_to_csv(rows: &[F1Row]) -> String {
    let mut out = String::from(F1_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            csv_field(&r.dataset),
            r.au,
            r.tp,
            r.fp,
            r.fn_,
            fmt_f64(r.f1)
        ));
    }
    out
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = vec![];
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

/// Reads a report CSV written by [`rows_to_csv`].
pub fn parse_rows_csv(text: &str) -> Result<Vec<AggregateRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(REPORT_CSV_HEADER) => {}
        other => return Err(Error::Parse(format!("unexpected report header {other:?}"))),
    }
    let bad = |line: &str, what: &str| Error::Parse(format!("bad {what} in report line {line:?}"));
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f = split_csv_line(line);
            if f.len() != 7 {
                return Err(bad(line, "field count"));
            }
            Ok(AggregateRow {
                dataset: f[0].clone(),
                au: f[1].parse().map_err(|_| bad(line, "au"))?,
                variant: f[2].parse().map_err(|_| bad(line, "variant"))?,
                mean_mu: f[3].parse().map_err(|_| bad(line, "mean_mu"))?,
                mean_mu_w: f[4].parse().map_err(|_| bad(line, "mean_mu_w"))?,
                n: f[5].parse().map_err(|_| bad(line, "n"))?,
                n_undefined: f[6].parse().map_err(|_| bad(line, "n_undefined"))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, px: Vec<f32>) -> RelevanceMap {
        RelevanceMap::from_values(ActionUnit(4), Tensor::new(vec![1, h, w], px).unwrap(), 1.0)
            .unwrap()
    }

    fn mask_for(b: BoundingBox, h: usize, w: usize) -> Tensor {
        crate::geometry::box_mask(&b, (h, w)).unwrap()
    }

    #[test]
    fn mu_examples() {
        let b = BoundingBox {
            x_min: 0,
            y_min: 0,
            x_max: 0,
            y_max: 1,
        };
        let inside_only = map(2, 2, vec![1.0, -1.0, 2.0, 0.0]);
        assert_eq!(
            mu(&inside_only, &mask_for(b, 2, 2)).unwrap().mu(),
            Some(1.0)
        );
        let outside_only = map(2, 2, vec![0.0, 3.0, -2.0, 1.0]);
        assert_eq!(
            mu(&outside_only, &mask_for(b, 2, 2)).unwrap().mu(),
            Some(0.0)
        );
        // inside 1 + 2 = 3 of 3 + 4 + 5 = 12
        let quarter = map(2, 2, vec![1.0, 4.0, 2.0, 5.0]);
        let loc = mu(&quarter, &mask_for(b, 2, 2)).unwrap();
        assert_eq!((loc.inside, loc.total, loc.mu()), (3.0, 12.0, Some(0.25)));
        let with_neg = map(2, 2, vec![1.0, 4.0, -20.0, 5.0]);
        let loc = mu(&with_neg, &mask_for(b, 2, 2)).unwrap();
        assert_eq!((loc.inside, loc.total), (1.0, 10.0));
        let none = map(2, 2, vec![0.0, -1.0, 0.0, 0.0]);
        assert_eq!(mu(&none, &mask_for(b, 2, 2)).unwrap().mu(), None);
        assert!(mu(&none, &Tensor::zeros(&[3, 3]).unwrap()).is_err());
    }

    #[test]
    fn mu_weighted_examples() {
        assert_eq!(mu_weighted(0.5, 0.5).unwrap(), 1.0);
        assert_eq!(mu_weighted(1.0, 1.0).unwrap(), 1.0);
        assert!((mu_weighted(0.504, 0.52).unwrap() - 0.969).abs() < 1e-3);
        assert!(mu_weighted(0.5, 0.0).is_err());
        assert!(mu_weighted(0.5, 1.5).is_err());
    }

    #[test]
    fn top_k_examples() {
        let m = map(1, 4, vec![3.0, -1.0, 0.0, 2.0]);
        let all = top_k_filter(&m, 1.0).unwrap();
        assert_eq!(all.pixel_values.data(), &[3.0, 0.0, 0.0, 2.0]);

        let uniform = map(4, 4, vec![1.0; 16]);
        let kept = top_k_filter(&uniform, 0.25).unwrap();
        assert_eq!(
            kept.pixel_values
                .data()
                .iter()
                .filter(|&&v| v > 0.0)
                .count(),
            4
        );
        assert_eq!(&kept.pixel_values.data()[..4], &[1.0; 4]);

        let m = map(1, 4, vec![4.0, 3.0, 2.0, 1.0]);
        assert_eq!(
            top_k_filter(&m, 0.5).unwrap().pixel_values.data(),
            &[4.0, 3.0, 0.0, 0.0]
        );

        let m = map(1, 100, vec![1.0; 100]);
        let kept = top_k_filter(&m, 0.07).unwrap();
        assert_eq!(
            kept.pixel_values
                .data()
                .iter()
                .filter(|&&v| v > 0.0)
                .count(),
            7
        );
        assert!(top_k_filter(&m, 0.0).is_err());
    }

    #[test]
    fn top_k_zeroes_all_channels_of_dropped_pixels() {
        let values = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 1.5, -3.0]).unwrap();
        let m = RelevanceMap::from_values(ActionUnit(4), values, 1.0).unwrap();
        // pixel sums: 2.5, -1.0
        let k = top_k_filter(&m, 1.0).unwrap();
        assert_eq!(k.values.data(), &[1.0, 0.0, 1.5, 0.0]);
    }

    #[test]
    fn filter_correct_examples() {
        let s = |v: &[u16]| v.iter().map(|&a| ActionUnit(a)).collect::<BTreeSet<_>>();
        assert_eq!(filter_correct(&s(&[4]), &s(&[4])), s(&[4]));
        assert!(filter_correct(&s(&[4]), &s(&[])).is_empty());
        assert!(filter_correct(&s(&[]), &s(&[4])).is_empty());
    }

    fn rec(au: u16, mu: f64) -> MuRecord {
        MuRecord {
            image_id: "i".into(),
            dataset: "d".into(),
            au: ActionUnit(au),
            variant: MuVariant::Standard,
            mu,
            mu_w: mu * 2.0,
            inside: mu,
            total: 1.0,
            box_area_fraction: 0.5,
        }
    }

    #[test]
    fn aggregate_examples() {
        let rows = aggregate(&[rec(4, 0.7)], "d");
        assert_eq!((rows[0].mean_mu, rows[0].n), (0.7, 1));
        let rows = aggregate(&[rec(4, 0.2), rec(4, 0.4)], "d");
        assert!((rows[0].mean_mu - 0.3).abs() < 1e-12);
        assert_eq!(rows[0].n, 2);
        assert!(aggregate(&[rec(4, 0.2)], "other").is_empty());
    }

    #[test]
    fn aggregator_reports_empty_groups() {
        let mut agg = Aggregator::new();
        agg.expect("unbc", ActionUnit(27), MuVariant::Standard);
        agg.add_record(&rec(4, 0.5));
        agg.add_undefined(&UndefinedMu {
            image_id: "x".into(),
            dataset: "d".into(),
            au: ActionUnit(4),
            variant: MuVariant::Standard,
        });
        let out = agg.finish();
        assert_eq!(out.rows.len(), 1);
        assert_eq!(out.rows[0].n_undefined, 1);
        assert_eq!(out.notices.len(), 1);
        assert!(out.notices[0].contains("AU27"));
    }

    #[test]
    fn constant_mean_is_exact() {
        let records: Vec<MuRecord> = (0..3363).map(|_| rec(9, 0.36)).collect();
        assert_eq!(aggregate(&records, "d")[0].mean_mu, 0.36);
    }

    #[test]
    fn f1_examples() {
        let s = |v: &[u16]| v.iter().map(|&a| ActionUnit(a)).collect::<BTreeSet<_>>();
        let truth = vec![s(&[4]), s(&[4, 6]), s(&[])];
        assert_eq!(f1_score(&truth, &truth, ActionUnit(4)).unwrap(), 1.0);
        let none = vec![s(&[]); 3];
        assert_eq!(f1_score(&none, &truth, ActionUnit(4)).unwrap(), 0.0);
        assert_eq!(f1_score(&none, &none, ActionUnit(4)).unwrap(), 0.0);
        // TP=2, FP=1, FN=1
        let pred = vec![s(&[4]), s(&[4]), s(&[4]), s(&[])];
        let truth = vec![s(&[4]), s(&[4]), s(&[]), s(&[4])];
        let c = confusion(&pred, &truth, ActionUnit(4)).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (2, 1, 1));
        assert!((c.f1() - 4.0 / 6.0).abs() < 1e-12);
        assert!(f1_score(&pred, &truth[..3], ActionUnit(4)).is_err());
    }

    #[test]
    fn variant_names() {
        assert_eq!(MuVariant::TOP25.to_string(), "top25");
        assert_eq!("top25".parse::<MuVariant>().unwrap(), MuVariant::TOP25);
        assert_eq!(
            "standard".parse::<MuVariant>().unwrap(),
            MuVariant::Standard
        );
        assert!("top0".parse::<MuVariant>().is_err());
        assert!("bottom".parse::<MuVariant>().is_err());
    }

    #[test]
    fn csv_round_trip_and_header_only() {
        assert_eq!(rows_to_csv(&[]), format!("{REPORT_CSV_HEADER}\n"));
        let rows = vec![AggregateRow {
            dataset: "actor, study".into(),
            au: ActionUnit(4),
            variant: MuVariant::TOP25,
            mean_mu: 0.1 + 0.2,
            mean_mu_w: 1.0,
            n: 3,
            n_undefined: 1,
        }];
        assert_eq!(parse_rows_csv(&rows_to_csv(&rows)).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn mu_properties(
            px in prop::collection::vec(-1.0f32..1.0, 64),
            (x0, x1, y0, y1) in (0usize..8, 0usize..8, 0usize..8, 0usize..8),
            grow in 0usize..3,
            c in 0.01f32..100.0,
        ) {
            let m = map(8, 8, px.clone());
            let b = BoundingBox { x_min: x0.min(x1), x_max: x0.max(x1), y_min: y0.min(y1), y_max: y0.max(y1) };
            let loc = mu(&m, &mask_for(b, 8, 8)).unwrap();
            prop_assert_eq!(loc, mu_in_box(&m, &b));
            if let Some(v) = loc.mu() {
                prop_assert!((0.0..=1.0).contains(&v));
                let scaled = map(8, 8, px.iter().map(|p| p * c).collect());
                let sv = mu_in_box(&scaled, &b).mu().unwrap();
                prop_assert!((sv - v).abs() <= 1e-6);
                let bigger = BoundingBox {
                    x_min: b.x_min.saturating_sub(grow), y_min: b.y_min.saturating_sub(grow),
                    x_max: (b.x_max + grow).min(7), y_max: (b.y_max + grow).min(7),
                };
                prop_assert!(mu_in_box(&m, &bigger).mu().unwrap() >= v);
                prop_assert_eq!(mu_in_box(&m, &BoundingBox::full((8, 8))).mu(), Some(1.0));
            }
        }

        #[test]
        fn aggregation_is_permutation_invariant(values in prop::collection::vec(0.0f64..1.0, 1..40), seed in any::<u64>()) {
            let records: Vec<MuRecord> = values.iter().map(|&v| rec(4, v)).collect();
            let mut shuffled = records.clone();
            let mut s = seed;
            for i in (1..shuffled.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(aggregate(&records, "d"), aggregate(&shuffled, "d"));
        }
    }
}

//! Per-Action-Unit bounding boxes from 68-point facial landmarks.
//!
//! Landmarks follow the Multi-PIE 68-point indexing: jaw 0-16, brows 17-26,
//! nose 27-35, eyes 36-47, mouth 48-67. Index 8 is the chin. A box is the
//! axis-aligned hull of the configured landmark subset, optionally stretched
//! down towards the chin, padded by a margin and clipped to the image. Box
//! coordinates are inclusive pixel indices; a landmark at `(x, y)` lies in
//! pixel `(floor(x), floor(y))`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::au::{ActionUnit, PAIN_AUS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LANDMARK_COUNT: usize = 68;
pub const CHIN: usize = 8;

/// Default AU region file shipped with the crate.
pub const DEFAULT_BOXES_JSON: &str = include_str!("../data/default_boxes.json");
const MEAN_FACE_JSON: &str = include_str!("../data/mean_face_112.json");

/// Image size as `(height, width)`.
pub type ImageDims = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<[f32; 2]>,
}

impl LandmarkSet {
    /// Checks the count and that every coordinate is finite.
    pub fn new(points: Vec<[f32; 2]>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::LandmarkCount(points.len()));
        }
        if let Some(index) = points
            .iter()
            .position(|p| !(p[0].is_finite() && p[1].is_finite()))
        {
            return Err(Error::NonFiniteLandmark { index });
        }
        Ok(LandmarkSet { points })
    }

    pub fn points(&self) -> &[[f32; 2]] {
        &self.points
    }

    pub fn translated(&self, dx: f32, dy: f32) -> LandmarkSet {
        LandmarkSet {
            points: self.points.iter().map(|&[x, y]| [x + dx, y + dy]).collect(),
        }
    }

    /// A frontal, centred template face for a 112 x 112 crop.
    pub fn mean_face() -> LandmarkSet {
        #[derive(Deserialize)]
        struct Template {
            points: Vec<[f32; 2]>,
        }
        let t: Template = serde_json::from_str(MEAN_FACE_JSON).expect("bundled template parses");
        LandmarkSet { points: t.points }
    }
}

/// Landmarks that passed validation, with the indices lying outside the image.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedLandmarks {
    pub landmarks: LandmarkSet,
    pub out_of_bounds: Vec<usize>,
}

fn inside(p: [f32; 2], (h, w): ImageDims) -> bool {
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] < w as f32 && p[1] < h as f32
}

pub fn validate_landmarks(points: Vec<[f32; 2]>, dims: ImageDims) -> Result<ValidatedLandmarks> {
    let landmarks = LandmarkSet::new(points)?;
    let points = landmarks.points();
    let out_of_bounds: Vec<usize> = (0..LANDMARK_COUNT)
        .filter(|&i| !inside(points[i], dims))
        .collect();
    if out_of_bounds.len() == LANDMARK_COUNT {
        return Err(Error::LandmarksOutOfImage {
            height: dims.0,
            width: dims.1,
        });
    }
    Ok(ValidatedLandmarks {
        landmarks,
        out_of_bounds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuRegion {
    pub landmarks: Vec<usize>,
    pub margin: f32,
    /// Moves the bottom edge this fraction of the way down to the chin.
    #[serde(default)]
    pub extend_down_frac: f32,
}

/// AU to landmark-region mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AuBoxConfig {
    pub regions: BTreeMap<ActionUnit, AuRegion>,
}

impl AuBoxConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: AuBoxConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        for au in PAIN_AUS {
            if !self.regions.contains_key(&au) {
                return Err(Error::Config(format!("box config has no entry for {au}")));
            }
        }
        for (au, region) in &self.regions {
            if region.landmarks.is_empty() {
                return Err(Error::Config(format!("{au} lists no landmarks")));
            }
            if let Some(&bad) = region.landmarks.iter().find(|&&i| i >= LANDMARK_COUNT) {
                return Err(Error::Config(format!(
                    "{au} references landmark {bad}, valid range is 0-67"
                )));
            }
            if !(region.margin.is_finite() && region.margin >= 0.0) {
                return Err(Error::Config(format!("{au} margin must be >= 0")));
            }
            if !(region.extend_down_frac.is_finite() && region.extend_down_frac >= 0.0) {
                return Err(Error::Config(format!("{au} extend_down_frac must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn with_margin(&self, margin: f32) -> Self {
        let mut cfg = self.clone();
        cfg.regions.values_mut().for_each(|r| r.margin = margin);
        cfg
    }
}

impl Default for AuBoxConfig {
    fn default() -> Self {
        Self::from_json(DEFAULT_BOXES_JSON).expect("bundled box config is valid")
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn area_fraction(&self, (h, w): ImageDims) -> f64 {
        self.area() as f64 / (h * w) as f64
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    pub fn full(dims: ImageDims) -> Self {
        BoundingBox {
            x_min: 0,
            y_min: 0,
            x_max: dims.1 - 1,
            y_max: dims.0 - 1,
        }
    }

    fn fits(&self, (h, w): ImageDims) -> bool {
        self.x_min <= self.x_max && self.y_min <= self.y_max && self.x_max < w && self.y_max < h
    }
}

pub fn au_bounding_box(
    landmarks: &LandmarkSet,
    au: ActionUnit,
    config: &AuBoxConfig,
    dims: ImageDims,
) -> Result<BoundingBox> {
    let region = config
        .regions
        .get(&au)
        .ok_or_else(|| Error::UnknownAu(au.to_string()))?;
    let pts: Vec<[f32; 2]> = region
        .landmarks
        .iter()
        .map(|&i| landmarks.points[i])
        .collect();
    let (mut x0, mut y0, mut x1, mut y1) = pts.iter().fold(
        (
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ),
        |(a, b, c, d), p| {
            let (x, y) = (p[0] as f64, p[1] as f64);
            (a.min(x), b.min(y), c.max(x), d.max(y))
        },
    );
    if region.extend_down_frac > 0.0 {
        let chin = landmarks.points[CHIN][1] as f64;
        y1 += region.extend_down_frac as f64 * (chin - y1).max(0.0);
    }
    let m = region.margin as f64;
    x0 -= m;
    y0 -= m;
    x1 += m;
    y1 += m;

    let (h, w) = dims;
    let clip = |v: f64, hi: usize| -> i64 { (v.floor() as i64).clamp(0, hi as i64 - 1) };
    let degenerate = x1.floor() < 0.0
        || y1.floor() < 0.0
        || x0.floor() > (w as f64 - 1.0)
        || y0.floor() > (h as f64 - 1.0);
    if degenerate {
        return Err(Error::DegenerateBox { au, landmarks: pts });
    }
    Ok(BoundingBox {
        x_min: clip(x0, w) as usize,
        y_min: clip(y0, h) as usize,
        x_max: clip(x1, w) as usize,
        y_max: clip(y1, h) as usize,
    })
}

/// `H x W` mask with ones inside the inclusive box.
pub fn box_mask(bbox: &BoundingBox, dims: ImageDims) -> Result<Tensor> {
    if !bbox.fits(dims) {
        return Err(Error::Config(format!(
            "box {bbox:?} does not fit a {}x{} image",
            dims.0, dims.1
        )));
    }
    let (h, w) = dims;
    let mut data = vec![0.0f32; h * w];
    for y in bbox.y_min..=bbox.y_max {
        data[y * w + bbox.x_min..=y * w + bbox.x_max].fill(1.0);
    }
    Tensor::new(vec![h, w], data)
}

//! Rendering relevance maps as PNG heatmaps.
//!
//! Positive relevance is red, negative blue, zero white. Values are scaled
//! symmetrically by the largest magnitude so the sign of every pixel survives.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::lrp::RelevanceMap;
use crate::tensor::Tensor;

/// Blue-white-red lookup table; entries 127 and 128 are both white.
#[rustfmt::skip]
pub const DIVERGING: [[u8; 3]; 256] = [
    [0, 0, 255], [2, 2, 255], [4, 4, 255], [6, 6, 255],
    [8, 8, 255], [10, 10, 255], [12, 12, 255], [14, 14, 255],
    [16, 16, 255], [18, 18, 255], [20, 20, 255], [22, 22, 255],
    [24, 24, 255], [26, 26, 255], [28, 28, 255], [30, 30, 255],
    [32, 32, 255], [34, 34, 255], [36, 36, 255], [38, 38, 255],
    [40, 40, 255], [42, 42, 255], [44, 44, 255], [46, 46, 255],
    [48, 48, 255], [50, 50, 255], [52, 52, 255], [54, 54, 255],
    [56, 56, 255], [58, 58, 255], [60, 60, 255], [62, 62, 255],
    [64, 64, 255], [66, 66, 255], [68, 68, 255], [70, 70, 255],
    [72, 72, 255], [74, 74, 255], [76, 76, 255], [78, 78, 255],
    [80, 80, 255], [82, 82, 255], [84, 84, 255], [86, 86, 255],
    [88, 88, 255], [90, 90, 255], [92, 92, 255], [94, 94, 255],
    [96, 96, 255], [98, 98, 255], [100, 100, 255], [102, 102, 255],
    [104, 104, 255], [106, 106, 255], [108, 108, 255], [110, 110, 255],
    [112, 112, 255], [114, 114, 255], [116, 116, 255], [118, 118, 255],
    [120, 120, 255], [122, 122, 255], [124, 124, 255], [126, 126, 255],
    [129, 129, 255], [131, 131, 255], [133, 133, 255], [135, 135, 255],
    [137, 137, 255], [139, 139, 255], [141, 141, 255], [143, 143, 255],
    [145, 145, 255], [147, 147, 255], [149, 149, 255], [151, 151, 255],
    [153, 153, 255], [155, 155, 255], [157, 157, 255], [159, 159, 255],
    [161, 161, 255], [163, 163, 255], [165, 165, 255], [167, 167, 255],
    [169, 169, 255], [171, 171, 255], [173, 173, 255], [175, 175, 255],
    [177, 177, 255], [179, 179, 255], [181, 181, 255], [183, 183, 255],
    [185, 185, 255], [187, 187, 255], [189, 189, 255], [191, 191, 255],
    [193, 193, 255], [195, 195, 255], [197, 197, 255], [199, 199, 255],
    [201, 201, 255], [203, 203, 255], [205, 205, 255], [207, 207, 255],
    [209, 209, 255], [211, 211, 255], [213, 213, 255], [215, 215, 255],
    [217, 217, 255], [219, 219, 255], [221, 221, 255], [223, 223, 255],
    [225, 225, 255], [227, 227, 255], [229, 229, 255], [231, 231, 255],
    [233, 233, 255], [235, 235, 255], [237, 237, 255], [239, 239, 255],
    [241, 241, 255], [243, 243, 255], [245, 245, 255], [247, 247, 255],
    [249, 249, 255], [251, 251, 255], [253, 253, 255], [255, 255, 255],
    [255, 255, 255], [255, 253, 253], [255, 251, 251], [255, 249, 249],
    [255, 247, 247], [255, 245, 245], [255, 243, 243], [255, 241, 241],
    [255, 239, 239], [255, 237, 237], [255, 235, 235], [255, 233, 233],
    [255, 231, 231], [255, 229, 229], [255, 227, 227], [255, 225, 225],
    [255, 223, 223], [255, 221, 221], [255, 219, 219], [255, 217, 217],
    [255, 215, 215], [255, 213, 213], [255, 211, 211], [255, 209, 209],
    [255, 207, 207], [255, 205, 205], [255, 203, 203], [255, 201, 201],
    [255, 199, 199], [255, 197, 197], [255, 195, 195], [255, 193, 193],
    [255, 191, 191], [255, 189, 189], [255, 187, 187], [255, 185, 185],
    [255, 183, 183], [255, 181, 181], [255, 179, 179], [255, 177, 177],
    [255, 175, 175], [255, 173, 173], [255, 171, 171], [255, 169, 169],
    [255, 167, 167], [255, 165, 165], [255, 163, 163], [255, 161, 161],
    [255, 159, 159], [255, 157, 157], [255, 155, 155], [255, 153, 153],
    [255, 151, 151], [255, 149, 149], [255, 147, 147], [255, 145, 145],
    [255, 143, 143], [255, 141, 141], [255, 139, 139], [255, 137, 137],
    [255, 135, 135], [255, 133, 133], [255, 131, 131], [255, 129, 129],
    [255, 126, 126], [255, 124, 124], [255, 122, 122], [255, 120, 120],
    [255, 118, 118], [255, 116, 116], [255, 114, 114], [255, 112, 112],
    [255, 110, 110], [255, 108, 108], [255, 106, 106], [255, 104, 104],
    [255, 102, 102], [255, 100, 100], [255, 98, 98], [255, 96, 96],
    [255, 94, 94], [255, 92, 92], [255, 90, 90], [255, 88, 88],
    [255, 86, 86], [255, 84, 84], [255, 82, 82], [255, 80, 80],
    [255, 78, 78], [255, 76, 76], [255, 74, 74], [255, 72, 72],
    [255, 70, 70], [255, 68, 68], [255, 66, 66], [255, 64, 64],
    [255, 62, 62], [255, 60, 60], [255, 58, 58], [255, 56, 56],
    [255, 54, 54], [255, 52, 52], [255, 50, 50], [255, 48, 48],
    [255, 46, 46], [255, 44, 44], [255, 42, 42], [255, 40, 40],
    [255, 38, 38], [255, 36, 36], [255, 34, 34], [255, 32, 32],
    [255, 30, 30], [255, 28, 28], [255, 26, 26], [255, 24, 24],
    [255, 22, 22], [255, 20, 20], [255, 18, 18], [255, 16, 16],
    [255, 14, 14], [255, 12, 12], [255, 10, 10], [255, 8, 8],
    [255, 6, 6], [255, 4, 4], [255, 2, 2], [255, 0, 0],
];

pub const BOX_COLOR: [u8; 3] = [0, 200, 0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Colormap {
    #[default]
    Diverging,
    /// Magnitude-free grayscale: -1 black, +1 white.
    Gray,
}

impl Colormap {
    /// Color for a normalized value in `[-1, 1]`.
    pub fn color(&self, v: f32) -> [u8; 3] {
        let idx = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as usize;
        let idx = idx.min(255);
        match self {
            Colormap::Diverging => DIVERGING[idx],
            Colormap::Gray => [idx as u8; 3],
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RenderOptions {
    pub colormap: Colormap,
    /// Scale by this percentile of `|v|` instead of the maximum, clipping above it.
    pub clip_percentile: Option<f64>,
    pub bbox: Option<BoundingBox>,
}

/// Divides by the largest magnitude (or the given percentile of magnitudes)
/// and clamps to `[-1, 1]`. An all-zero grid stays zero.
pub fn normalize_symmetric(grid: &Tensor, clip_percentile: Option<f64>) -> Result<Tensor> {
    let scale = match clip_percentile {
        None => grid.max_abs(),
        Some(p) => {
            if !(p > 0.0 && p <= 100.0) {
                return Err(Error::InvalidParameter(format!(
                    "clip percentile must be in (0, 100], got {p}"
                )));
            }
            let mut mags: Vec<f32> = grid.data().iter().map(|v| v.abs()).collect();
            mags.sort_by(f32::total_cmp);
            let rank = ((p / 100.0 * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
            mags[rank - 1]
        }
    };
    if scale == 0.0 || !scale.is_finite() {
        return Ok(grid.map(|_| 0.0));
    }
    Ok(grid.map(|v| (v / scale).clamp(-1.0, 1.0)))
}

/// Renders an `H x W` grid of relevance.
pub fn render_grid(grid: &Tensor, options: &RenderOptions) -> Result<RgbImage> {
    if grid.rank() != 2 {
        return Err(Error::InvalidTensor(format!(
            "heatmap needs an H x W grid, got shape {:?}",
            grid.shape()
        )));
    }
    let (h, w) = (grid.shape()[0], grid.shape()[1]);
    let norm = normalize_symmetric(grid, options.clip_percentile)?;
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(options
            .colormap
            .color(norm.data()[y as usize * w + x as usize]))
    });
    if let Some(b) = &options.bbox {
        draw_box(&mut img, b, BOX_COLOR);
    }
    Ok(img)
}

pub fn render(map: &RelevanceMap, options: &RenderOptions) -> Result<RgbImage> {
    render_grid(&map.pixel_values, options)
}

/// Blends a heatmap over an `H x W` grayscale background in `[0, 1]`.
pub fn overlay(heat: &RgbImage, background: &Tensor, alpha: f32) -> Result<RgbImage> {
    let (w, h) = heat.dimensions();
    if background.shape() != [h as usize, w as usize] {
        return Err(Error::Dimension {
            op: "overlay",
            left: vec![h as usize, w as usize],
            right: background.shape().to_vec(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let g = background.data()[(y * w + x) as usize].clamp(0.0, 1.0) * 255.0;
        let px = heat.get_pixel(x, y).0;
        Rgb(px.map(|c| (alpha * c as f32 + (1.0 - alpha) * g).round() as u8))
    }))
}

/// One-pixel outline, clipped to the image.
pub fn draw_box(img: &mut RgbImage, b: &BoundingBox, color: [u8; 3]) {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    if w == 0 || h == 0 || b.x_min >= w || b.y_min >= h {
        return;
    }
    let (x1, y1) = (b.x_max.min(w - 1), b.y_max.min(h - 1));
    for x in b.x_min..=x1 {
        for y in [b.y_min, y1] {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
    for y in b.y_min..=y1 {
        for x in [b.x_min, x1] {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

pub fn save_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

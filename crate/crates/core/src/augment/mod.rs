//! The six single-transform augmentations, grid backgrounds, a procedural
//! line generator and the dataset manifest format.

mod manifest;
mod synth;

pub use manifest::{Manifest, ManifestEntry};
pub use synth::{Synthesizer, MARGIN};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{resize_bilinear, LineImage};

/// An image with its transcription.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: LineImage,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Transform {
    Contrast,
    SignFlip,
    LongScale,
    ShortScale,
    WidthDilation,
    HeightDilation,
}

impl Transform {
    pub const ALL: [Transform; 6] = [
        Transform::Contrast,
        Transform::SignFlip,
        Transform::LongScale,
        Transform::ShortScale,
        Transform::WidthDilation,
        Transform::HeightDilation,
    ];

    /// 1-based index, matching the order of [`Transform::ALL`].
    pub fn from_id(id: usize) -> Result<Self> {
        id.checked_sub(1)
            .and_then(|i| Self::ALL.get(i).copied())
            .ok_or_else(|| Error::InvalidArgument(format!("transform id {id} is not in 1..=6")))
    }

    pub fn id(self) -> usize {
        Self::ALL.iter().position(|t| *t == self).expect("listed") + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Transform::Contrast => "contrast",
            Transform::SignFlip => "sign-flip",
            Transform::LongScale => "long-scale",
            Transform::ShortScale => "short-scale",
            Transform::WidthDilation => "width-dilation",
            Transform::HeightDilation => "height-dilation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Exponent applied to every pixel; within `[0.5, 2]`.
    pub contrast_gamma: f64,
    /// Horizontal stretch factor above 1.
    pub scale_long: f64,
    /// Horizontal squeeze factor below 1.
    pub scale_short: f64,
    /// Structuring-element length for the dilations, rounded to pixels.
    pub dilation_width: f64,
    pub dilation_height: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            contrast_gamma: 2.0,
            scale_long: 1.25,
            scale_short: 0.8,
            dilation_width: 3.0,
            dilation_height: 3.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=2.0).contains(&self.contrast_gamma) {
            return Err(Error::Config(format!(
                "contrast_gamma {} outside [0.5, 2]",
                self.contrast_gamma
            )));
        }
        for (name, v) in [
            ("scale_long", self.scale_long),
            ("scale_short", self.scale_short),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("dilation_width", self.dilation_width),
            ("dilation_height", self.dilation_height),
        ] {
            if !(v.is_finite() && v >= 1.0) {
                return Err(Error::Config(format!("{name} must be at least 1, got {v}")));
            }
        }
        Ok(())
    }
}

/// Darkest value over a `1×k` (horizontal) or `k×1` window centred on each
/// pixel, spreading ink along one axis.
fn dilate(img: &LineImage, k: usize, horizontal: bool) -> LineImage {
    let before = (k - 1) / 2;
    let after = k / 2;
    let (h, w) = (img.height(), img.width());
    LineImage::from_fn(h, w, |y, x| {
        let (pos, len) = if horizontal { (x, w) } else { (y, h) };
        let lo = pos.saturating_sub(before);
        let hi = (pos + after).min(len - 1);
        (lo..=hi)
            .map(|p| {
                if horizontal {
                    img.get(y, p)
                } else {
                    img.get(p, x)
                }
            })
            .fold(f64::INFINITY, f64::min)
    })
}

fn rescale_width(img: &LineImage, factor: f64) -> Result<LineImage> {
    let width = (img.width() as f64 * factor).round();
    if width < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "scaling width {} by {factor} leaves no columns",
            img.width()
        )));
    }
    resize_bilinear(img, img.height(), width as usize)
}

/// Applies exactly one transform; the label is carried over unchanged.
pub fn augment_sample(
    sample: &LabeledSample,
    which: Transform,
    cfg: &AugmentConfig,
) -> Result<LabeledSample> {
    cfg.validate()?;
    let img = &sample.image;
    let image = match which {
        Transform::Contrast => img.map(|p| p.powf(cfg.contrast_gamma)),
        Transform::SignFlip => img.map(|p| 1.0 - p),
        Transform::LongScale => rescale_width(img, cfg.scale_long)?,
        Transform::ShortScale => rescale_width(img, cfg.scale_short)?,
        Transform::WidthDilation => dilate(img, cfg.dilation_width.round() as usize, true),
        Transform::HeightDilation => dilate(img, cfg.dilation_height.round() as usize, false),
    };
    Ok(LabeledSample {
        image,
        text: sample.text.clone(),
    })
}

/// The originals followed by one copy of each sample per transform, in
/// transform order: exactly seven times the input.
pub fn expand_training_set(
    samples: &[LabeledSample],
    cfg: &AugmentConfig,
) -> Result<Vec<LabeledSample>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot augment an empty training set".into(),
        ));
    }
    let mut out = Vec::with_capacity(7 * samples.len());
    out.extend_from_slice(samples);
    for t in Transform::ALL {
        for s in samples {
            out.push(augment_sample(s, t, cfg)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridOrientation {
    Horizontal,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub line_spacing_px: usize,
    pub line_intensity: f64,
    pub orientation: GridOrientation,
    pub phase: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            line_spacing_px: 16,
            line_intensity: 0.6,
            orientation: GridOrientation::Horizontal,
            phase: 0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.line_spacing_px < 4 {
            return Err(Error::Config(format!(
                "grid spacing {} is below 4 px",
                self.line_spacing_px
            )));
        }
        if !(0.0..=1.0).contains(&self.line_intensity) {
            return Err(Error::Config(format!(
                "grid intensity {} outside [0, 1]",
                self.line_intensity
            )));
        }
        Ok(())
    }

    fn on_line(&self, pos: usize) -> bool {
        pos % self.line_spacing_px == self.phase % self.line_spacing_px
    }
}

/// Composites ruled lines under the ink, keeping the darker value per pixel.
pub fn add_grid_background(img: &LineImage, grid: &GridConfig) -> Result<LineImage> {
    grid.validate()?;
    let both = grid.orientation == GridOrientation::Both;
    Ok(LineImage::from_fn(img.height(), img.width(), |y, x| {
        let p = img.get(y, x);
        if grid.on_line(y) || (both && grid.on_line(x)) {
            p.min(grid.line_intensity)
        } else {
            p
        }
    }))
}

/// Mixes a base seed with an index into an independent per-item seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

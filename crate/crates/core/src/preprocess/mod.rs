//! Line-image normalization and sliding-window frame extraction.

mod pgm;

pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Target line height and window extent.
pub const LINE_HEIGHT: usize = 32;
/// Horizontal step between consecutive windows.
pub const WINDOW_STRIDE: usize = 4;
pub const BACKGROUND: f64 = 1.0;
/// Pixels are stored as multiples of `2^-40`, so `1 - p` is exact and
/// photometric inversion is a bit-exact involution.
const PIXEL_GRID: f64 = (1u64 << 40) as f64;

fn quantize(p: f64) -> f64 {
    (p * PIXEL_GRID).round() / PIXEL_GRID
}

/// Grayscale line image, row-major, `0` ink and `1` background.
#[derive(Clone, Debug, PartialEq)]
pub struct LineImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl LineImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "degenerate {height}x{width} image"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width} image given {} pixels",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!("pixel {p} outside [0, 1]")));
        }
        let pixels = pixels.into_iter().map(quantize).collect();
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn blank(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![BACKGROUND; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Applies `f` to every pixel, clamping the result into `[0, 1]`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self
                .pixels
                .iter()
                .map(|&p| quantize(f(p).clamp(0.0, 1.0)))
                .collect(),
        }
    }

    pub(crate) fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(quantize(f(y, x).clamp(0.0, 1.0)));
            }
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn is_normalized(&self) -> bool {
        self.height == LINE_HEIGHT && self.width.is_multiple_of(LINE_HEIGHT)
    }
}

/// Bilinear resampling with half-pixel centres. Same-size requests return an
/// exact copy.
pub fn resize_bilinear(img: &LineImage, height: usize, width: usize) -> Result<LineImage> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot resize to {height}x{width}"
        )));
    }
    if (height, width) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let taps = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / out as f64;
        (0..out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let rows = taps(height, img.height);
    let cols = taps(width, img.width);
    Ok(LineImage::from_fn(height, width, |y, x| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
        let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// Right-pads with background to `width`; never crops.
pub fn pad_right(img: &LineImage, width: usize) -> LineImage {
    if width <= img.width {
        return img.clone();
    }
    LineImage::from_fn(img.height, width, |y, x| {
        if x < img.width {
            img.get(y, x)
        } else {
            BACKGROUND
        }
    })
}

/// Scales to height 32 keeping the aspect ratio, then right-pads to the next
/// multiple of 32 (at least 32).
pub fn normalize_height(img: &LineImage) -> Result<LineImage> {
    let scaled_width =
        ((img.width as f64 * LINE_HEIGHT as f64 / img.height as f64).round() as usize).max(1);
    let scaled = resize_bilinear(img, LINE_HEIGHT, scaled_width)?;
    let padded_width = scaled_width.div_ceil(LINE_HEIGHT).max(1) * LINE_HEIGHT;
    Ok(pad_right(&scaled, padded_width))
}

/// Window count for a normalized width.
pub fn frame_count(width: usize) -> usize {
    (width - LINE_HEIGHT) / WINDOW_STRIDE + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    /// `(T, 1, 32, 32)`
    pub frames: Tensor,
    pub source_width: usize,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Cuts a normalized image into 32×32 windows at stride 4; frame `t` covers
/// columns `[4t, 4t + 32)`.
pub fn sliding_windows(img: &LineImage) -> Result<FrameSequence> {
    if !img.is_normalized() {
        return Err(Error::InvalidArgument(format!(
            "sliding windows need a normalized image, got {}x{}",
            img.height, img.width
        )));
    }
    let t = frame_count(img.width);
    let side = LINE_HEIGHT;
    let mut data = Vec::with_capacity(t * side * side);
    for f in 0..t {
        let x0 = f * WINDOW_STRIDE;
        for y in 0..side {
            let row = y * img.width + x0;
            data.extend_from_slice(&img.pixels[row..row + side]);
        }
    }
    Ok(FrameSequence {
        frames: Tensor::new(vec![t, 1, side, side], data)?,
        source_width: img.width,
    })
}

/// Normalizes then windows.
pub fn to_frames(img: &LineImage) -> Result<FrameSequence> {
    sliding_windows(&normalize_height(img)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> LineImage {
        LineImage::from_fn(h, w, |y, x| ((y * 31 + x * 17) % 101) as f64 / 100.0)
    }

    #[test]
    fn normalize_examples() {
        let a = normalize_height(&ramp(64, 128)).unwrap();
        assert_eq!((a.height(), a.width()), (32, 64));

        let b = normalize_height(&ramp(32, 33)).unwrap();
        assert_eq!((b.height(), b.width()), (32, 64));
        assert!((33..64).all(|x| b.get(5, x) == 1.0));

        let c = ramp(32, 32);
        assert_eq!(normalize_height(&c).unwrap(), c);
    }

    #[test]
    fn tiny_images_pad_to_one_window() {
        let img = normalize_height(&ramp(200, 3)).unwrap();
        assert_eq!((img.height(), img.width()), (32, 32));
    }

    #[test]
    fn window_examples() {
        let img = ramp(32, 32);
        let f = sliding_windows(&img).unwrap();
        assert_eq!(f.frames.shape(), &[1, 1, 32, 32]);
        assert_eq!(f.frames.data(), img.pixels());
        assert_eq!(sliding_windows(&ramp(32, 64)).unwrap().len(), 9);
        assert!(sliding_windows(&ramp(31, 64)).is_err());
        assert!(sliding_windows(&ramp(32, 40)).is_err());
    }

    #[test]
    fn neighbouring_frames_overlap_exactly() {
        let f = sliding_windows(&ramp(32, 96)).unwrap();
        let d = f.frames.data();
        let frame = |t: usize, y: usize, x: usize| d[(t * 32 + y) * 32 + x];
        for t in 0..f.len() - 1 {
            for y in 0..32 {
                for x in 4..32 {
                    assert_eq!(frame(t, y, x).to_bits(), frame(t + 1, y, x - 4).to_bits());
                }
            }
        }
    }

    #[test]
    fn averaged_frames_reconstruct_the_image() {
        let img = ramp(32, 128);
        let f = sliding_windows(&img).unwrap();
        let mut sum = vec![0.0; 32 * 128];
        let mut count = vec![0usize; 32 * 128];
        for t in 0..f.len() {
            for y in 0..32 {
                for x in 0..32 {
                    let i = y * 128 + 4 * t + x;
                    sum[i] += f.frames.data()[(t * 32 + y) * 32 + x];
                    count[i] += 1;
                }
            }
        }
        for (i, (s, c)) in sum.iter().zip(&count).enumerate() {
            assert!(*c > 0);
            assert!((s / *c as f64 - img.pixels()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn constructor_validates() {
        assert!(LineImage::new(0, 3, vec![]).is_err());
        assert!(LineImage::new(1, 2, vec![0.5]).is_err());
        assert!(LineImage::new(1, 1, vec![1.5]).is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_and_in_range(h in 1usize..80, w in 1usize..300, seed in 0u64..1000) {
            let img = LineImage::from_fn(h, w, |y, x| ((y as u64 * 7 + x as u64 * 13 + seed) % 97) as f64 / 96.0);
            let once = normalize_height(&img).unwrap();
            prop_assert!(once.is_normalized());
            prop_assert!(once.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
            let twice = normalize_height(&once).unwrap();
            prop_assert_eq!(twice, once);
        }

        #[test]
        fn frame_count_formula(blocks in 1usize..128) {
            let w = blocks * 32;
            let f = sliding_windows(&LineImage::blank(32, w).unwrap()).unwrap();
            prop_assert_eq!(f.len(), (w - 32) / 4 + 1);
        }
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabeledSample;
use crate::ctc::Vocabulary;
use crate::error::{Error, Result};
use crate::preprocess::{LineImage, LINE_HEIGHT};

/// Background columns on each side of a rendered line.
pub const MARGIN: usize = 8;
const INK: f64 = 0.05;
const NOMINAL_THICKNESS: f64 = 1.8;
/// Minimum L1 distance between two glyph prototypes.
const MIN_GLYPH_DISTANCE: f64 = 10.0;

#[derive(Clone, Debug)]
struct Glyph {
    advance: usize,
    /// Polyline vertices in pixels relative to the glyph cell origin.
    points: Vec<(f64, f64)>,
}

impl Glyph {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let advance = rng.gen_range(9..=13);
        let n = rng.gen_range(3..=5);
        let points = (0..n)
            .map(|_| {
                (
                    rng.gen_range(1.0..advance as f64 - 1.0),
                    rng.gen_range(8.0..24.0),
                )
            })
            .collect();
        Self { advance, points }
    }

    fn blank(advance: usize) -> Self {
        Self {
            advance,
            points: Vec::new(),
        }
    }

    /// Darkens `canvas` (row-major, `width` columns) with this glyph's strokes.
    fn draw(&self, canvas: &mut [f64], width: usize, dx: f64, dy: f64, thickness: f64) {
        let radius = thickness / 2.0;
        for seg in self.points.windows(2) {
            let (a, b) = (
                (seg[0].0 + dx, seg[0].1 + dy),
                (seg[1].0 + dx, seg[1].1 + dy),
            );
            let x_lo = (a.0.min(b.0) - radius - 1.0).floor().max(0.0) as usize;
            let x_hi = ((a.0.max(b.0) + radius + 1.0).ceil() as usize).min(width - 1);
            let y_lo = (a.1.min(b.1) - radius - 1.0).floor().max(0.0) as usize;
            let y_hi = ((a.1.max(b.1) + radius + 1.0).ceil() as usize).min(LINE_HEIGHT - 1);
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let d = segment_distance((x as f64 + 0.5, y as f64 + 0.5), a, b);
                    let cover = (radius + 0.5 - d).clamp(0.0, 1.0);
                    let px = &mut canvas[y * width + x];
                    *px = px.min(1.0 - (1.0 - INK) * cover);
                }
            }
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * vx - p.0, a.1 + t * vy - p.1);
    (cx * cx + cy * cy).sqrt()
}

/// Renders 32-pixel-high lines from procedural per-symbol stroke glyphs.
/// Whitespace symbols render as empty cells.
#[derive(Clone, Debug)]
pub struct Synthesizer {
    vocab: Vocabulary,
    glyphs: Vec<Glyph>,
}

impl Synthesizer {
    /// Draws one glyph per symbol from `glyph_seed`, redrawing any glyph too
    /// close to an earlier one.
    pub fn new(vocab: Vocabulary, glyph_seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(glyph_seed);
        let mut glyphs: Vec<Glyph> = Vec::with_capacity(vocab.len());
        let mut prototypes: Vec<LineImage> = Vec::with_capacity(vocab.len());
        for &c in vocab.symbols() {
            let mut attempts = 0;
            let glyph = loop {
                let g = if c.is_whitespace() {
                    Glyph::blank(8)
                } else {
                    Glyph::random(&mut rng)
                };
                let proto = render_prototype(&g);
                let distinct = prototypes
                    .iter()
                    .all(|p| l1_distance(p, &proto) >= MIN_GLYPH_DISTANCE);
                if distinct {
                    prototypes.push(proto);
                    break g;
                }
                attempts += 1;
                if attempts > 200 {
                    return Err(Error::InvalidArgument(format!(
                        "could not draw a distinct glyph for {c:?}"
                    )));
                }
            };
            glyphs.push(glyph);
        }
        Ok(Self { vocab, glyphs })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// The undistorted glyph for `c` on a 32×16 cell.
    pub fn prototype(&self, c: char) -> Result<LineImage> {
        let i = self.vocab.encode(&c.to_string())?[0];
        Ok(render_prototype(&self.glyphs[i]))
    }

    /// Deterministic in `(text, seed)`: per-character offsets and the stroke
    /// thickness are drawn from `seed`.
    pub fn synth_line(&self, text: &str, seed: u64) -> Result<LabeledSample> {
        let classes = self.vocab.encode(text)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let thickness = rng.gen_range(1.4..2.3);
        let width = 2 * MARGIN
            + classes
                .iter()
                .map(|&i| self.glyphs[i].advance)
                .sum::<usize>();
        let mut canvas = vec![1.0; LINE_HEIGHT * width];
        let mut x = MARGIN as f64;
        for &i in &classes {
            let g = &self.glyphs[i];
            let dx = x + rng.gen_range(-1.0..1.0);
            let dy = rng.gen_range(-1.5..1.5);
            g.draw(&mut canvas, width, dx, dy, thickness);
            x += g.advance as f64;
        }
        Ok(LabeledSample {
            image: LineImage::new(LINE_HEIGHT, width, canvas)?,
            text: text.to_string(),
        })
    }
}

fn render_prototype(g: &Glyph) -> LineImage {
    let width = 16;
    let mut canvas = vec![1.0; LINE_HEIGHT * width];
    g.draw(&mut canvas, width, 0.0, 0.0, NOMINAL_THICKNESS);
    LineImage::new(LINE_HEIGHT, width, canvas).expect("valid canvas")
}

fn l1_distance(a: &LineImage, b: &LineImage) -> f64 {
    a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y).abs())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth() -> Synthesizer {
        Synthesizer::new(Vocabulary::new("abcdefghij".chars()).unwrap(), 7).unwrap()
    }

    #[test]
    fn deterministic_per_text_and_seed() {
        let s = synth();
        let a = s.synth_line("badge", 3).unwrap();
        let b = s.synth_line("badge", 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.image, s.synth_line("badge", 4).unwrap().image);
        assert_eq!(a.text, "badge");
        assert_eq!(a.image.height(), 32);
        assert!(a.image.pixels().iter().any(|&p| p < 0.5));
    }

    #[test]
    fn empty_text_is_blank_margin() {
        let img = synth().synth_line("", 1).unwrap().image;
        assert_eq!(img.width(), 2 * MARGIN);
        assert!(img.pixels().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn glyph_prototypes_are_distinct() {
        let s = synth();
        let protos: Vec<_> = "abcdefghij"
            .chars()
            .map(|c| s.prototype(c).unwrap())
            .collect();
        for i in 0..protos.len() {
            for j in i + 1..protos.len() {
                assert!(l1_distance(&protos[i], &protos[j]) > 0.0);
            }
        }
    }

    #[test]
    fn unknown_symbol() {
        assert!(matches!(
            synth().synth_line("abz", 0),
            Err(Error::UnknownSymbol('z'))
        ));
    }

    #[test]
    fn space_renders_without_ink() {
        let s = Synthesizer::new(Vocabulary::new(" ab".chars()).unwrap(), 1).unwrap();
        assert!(s.prototype(' ').unwrap().pixels().iter().all(|&p| p == 1.0));
    }
}

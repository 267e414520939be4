//! Procedurally drawn face emojis used when the real image set is absent.
//!
//! Class `c` fixes the face colour, eye style and mouth style; each sample
//! adds a small seeded jitter (feature offsets of at most one pixel and a
//! slight brightness shift of the face).

use super::ppm::RgbImage;
use super::ImageSample;
use crate::embeddings::EMOJI_WORDS;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const MAX_SYNTHETIC_CLASSES: usize = 16;

const BACKGROUND: [u8; 3] = [245, 245, 245];
const INK: [u8; 3] = [50, 30, 20];
const WHITE: [u8; 3] = [255, 255, 255];
const PALETTE: [[u8; 3]; 8] = [
    [255, 204, 77],
    [255, 150, 50],
    [230, 70, 60],
    [120, 200, 90],
    [90, 150, 230],
    [170, 110, 210],
    [250, 150, 190],
    [70, 190, 180],
];

/// Per-sample perturbation of a class template.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Jitter {
    pub eye_dy: i32,
    pub mouth_dy: i32,
    pub brightness: i32,
}

impl Jitter {
    pub fn sample(rng: &mut Rng) -> Self {
        Self {
            eye_dy: rng.below(3) as i32 - 1,
            mouth_dy: rng.below(3) as i32 - 1,
            brightness: rng.below(17) as i32 - 8,
        }
    }
}

/// `(colour, eye style, mouth style)` for a class; distinct for all 16 classes.
pub fn class_style(class: usize) -> (usize, usize, usize) {
    (class % 8, (class + class / 8) % 4, (class / 2 + class / 8) % 4)
}

struct Canvas {
    img: RgbImage,
    size: f32,
}

impl Canvas {
    fn fill(&mut self, color: [u8; 3], inside: impl Fn(f32, f32) -> bool) {
        let n = self.img.width;
        for y in 0..n {
            for x in 0..n {
                // pixel centres in units of the image side
                let (u, v) = ((x as f32 + 0.5) / self.size, (y as f32 + 0.5) / self.size);
                if inside(u, v) {
                    self.img.put(x, y, color);
                }
            }
        }
    }

    fn disc(&mut self, cx: f32, cy: f32, r: f32, color: [u8; 3]) {
        self.fill(color, |u, v| (u - cx).powi(2) + (v - cy).powi(2) <= r * r);
    }

    fn ellipse(&mut self, cx: f32, cy: f32, rx: f32, ry: f32, color: [u8; 3]) {
        self.fill(color, |u, v| ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2) <= 1.0);
    }

    fn rect(&mut self, cx: f32, cy: f32, w: f32, h: f32, color: [u8; 3]) {
        let px = 1.0 / self.size;
        let (hw, hh) = (w.max(px) / 2.0, h.max(px) / 2.0);
        self.fill(color, |u, v| (u - cx).abs() <= hw && (v - cy).abs() <= hh);
    }

    /// Ring between radii `r - t/2` and `r + t/2`, restricted to the lower
    /// (`lower = true`) or upper half plane around `cy`.
    fn arc(&mut self, cx: f32, cy: f32, r: f32, t: f32, lower: bool, color: [u8; 3]) {
        self.fill(color, |u, v| {
            let d = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
            (d - r).abs() <= t / 2.0 && if lower { v > cy } else { v < cy }
        });
    }
}

/// Render one face of `class` at `size × size` pixels.
pub fn draw_face(class: usize, size: usize, jitter: Jitter) -> RgbImage {
    let (colour, eyes, mouth) = class_style(class);
    let s = size as f32;
    let px = 1.0 / s;
    let mut c = Canvas {
        img: RgbImage::new(size, size, BACKGROUND),
        size: s,
    };
    let face = PALETTE[colour].map(|v| (v as i32 + jitter.brightness).clamp(0, 255) as u8);
    c.disc(0.5, 0.5, 0.42, face);

    let ey = 0.40 + jitter.eye_dy as f32 * px;
    for ex in [0.35, 0.65] {
        match eyes {
            0 => c.disc(ex, ey, 0.065, INK),
            1 => {
                c.disc(ex, ey, 0.095, WHITE);
                c.disc(ex, ey, 0.045, INK);
            }
            2 => c.rect(ex, ey, 0.16, 0.04, INK),
            _ => c.ellipse(ex, ey, 0.04, 0.09, INK),
        }
    }

    let my = jitter.mouth_dy as f32 * px;
    match mouth {
        0 => c.arc(0.5, 0.58 + my, 0.18, 0.05, true, INK),
        1 => c.arc(0.5, 0.82 + my, 0.16, 0.05, false, INK),
        2 => c.disc(0.5, 0.70 + my, 0.085, INK),
        _ => c.rect(0.5, 0.71 + my, 0.32, 0.05, INK),
    }
    c.img
}

/// `per_class` jittered faces for each of `num_classes` classes, labelled
/// `0..num_classes` and tagged with the matching emoji word.
pub fn make_synthetic_corpus(
    num_classes: usize,
    per_class: usize,
    size: usize,
    rng: &mut Rng,
) -> Result<Vec<ImageSample>> {
    if num_classes == 0 || num_classes > MAX_SYNTHETIC_CLASSES {
        return Err(Error::invalid(format!(
            "synthetic corpus supports 1..={MAX_SYNTHETIC_CLASSES} classes, got {num_classes}"
        )));
    }
    if per_class == 0 || size < 8 {
        return Err(Error::invalid("need at least one image per class and size >= 8"));
    }
    let mut out = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        for _ in 0..per_class {
            let img = draw_face(class, size, Jitter::sample(rng));
            out.push(ImageSample {
                pixels: img.to_tensor(),
                label: class,
                word: EMOJI_WORDS[class].to_owned(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_a_seed() {
        let a = make_synthetic_corpus(8, 3, 32, &mut Rng::new(1)).unwrap();
        let b = make_synthetic_corpus(8, 3, 32, &mut Rng::new(1)).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.pixels == y.pixels && x.label == y.label));
    }

    #[test]
    fn counts_and_labels() {
        let c = make_synthetic_corpus(8, 5, 32, &mut Rng::new(2)).unwrap();
        assert_eq!(c.len(), 40);
        for class in 0..8 {
            assert_eq!(c.iter().filter(|s| s.label == class).count(), 5);
        }
        assert!(make_synthetic_corpus(17, 1, 32, &mut Rng::new(2)).is_err());
    }

    #[test]
    fn styles_are_distinct() {
        let styles: std::collections::HashSet<_> = (0..16).map(class_style).collect();
        assert_eq!(styles.len(), 16);
        let faces: std::collections::HashSet<_> =
            (0..16).map(|c| draw_face(c, 32, Jitter::default()).pixels).collect();
        assert_eq!(faces.len(), 16);
    }

    #[test]
    fn classes_differ_more_than_samples() {
        let c = make_synthetic_corpus(16, 5, 32, &mut Rng::new(3)).unwrap();
        let (mut inter, mut intra) = ((0.0, 0), (0.0, 0));
        for (i, a) in c.iter().enumerate() {
            for b in &c[i + 1..] {
                let d = a.pixels.mean_abs_diff(&b.pixels).unwrap();
                let slot = if a.label == b.label { &mut intra } else { &mut inter };
                slot.0 += d;
                slot.1 += 1;
            }
        }
        let (inter, intra) = (inter.0 / inter.1 as f64, intra.0 / intra.1 as f64);
        assert!(inter > intra, "inter {inter} intra {intra}");
    }
}

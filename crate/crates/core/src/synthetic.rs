//! Synthetic screen-content images: flat panels, borders and lines of
//! bitmap "text" on a small palette.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<[u8; 3]>,
}

impl Canvas {
    fn fill(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, c: [u8; 3]) {
        for y in y0.min(self.h)..y1.min(self.h) {
            for x in x0.min(self.w)..x1.min(self.w) {
                self.px[y * self.w + x] = c;
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng, light: bool) -> [u8; 3] {
    let (lo, hi) = if light { (170, 256) } else { (0, 100) };
    [rng.random_range(lo..hi) as u8, rng.random_range(lo..hi) as u8, rng.random_range(lo..hi) as u8]
}

/// A `[1, 3, height, width]` image in `[0, 1]`, fully determined by `seed`.
pub fn text_image<T: Scalar>(width: usize, height: usize, seed: u64) -> Tensor<T> {
    screen_image(width, height, seed, 1.0)
}

/// Like [`text_image`]; each text line is drawn with probability
/// `text_density`.
pub fn screen_image<T: Scalar>(width: usize, height: usize, seed: u64, text_density: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = random_color(&mut rng, true);
    let mut cv = Canvas { w: width, h: height, px: vec![bg; width * height] };

    // a per-image "font": 20 random 5x7 bitmaps
    let font: Vec<[bool; GLYPH_W * GLYPH_H]> = (0..20)
        .map(|_| {
            let mut g = [false; GLYPH_W * GLYPH_H];
            for b in g.iter_mut() {
                *b = rng.random_bool(0.45);
            }
            g
        })
        .collect();

    let panels = rng.random_range(1..4);
    for _ in 0..panels {
        let pw = rng.random_range(width / 4..=width.max(4) - 1);
        let ph = rng.random_range(height / 4..=height.max(4) - 1);
        let x0 = rng.random_range(0..width - pw.min(width - 1));
        let y0 = rng.random_range(0..height - ph.min(height - 1));
        let fill = random_color(&mut rng, true);
        let border = random_color(&mut rng, false);
        cv.fill(x0, y0, x0 + pw, y0 + ph, border);
        cv.fill(x0 + 1, y0 + 1, x0 + pw - 1, y0 + ph - 1, fill);

        let ink = random_color(&mut rng, false);
        let scale = rng.random_range(1..=2);
        let (gw, gh) = ((GLYPH_W + 1) * scale, (GLYPH_H + 3) * scale);
        let mut y = y0 + 3;
        while y + gh < y0 + ph - 2 {
            if !rng.random_bool(text_density) {
                y += gh;
                continue;
            }
            let mut x = x0 + 3;
            let line_end = x0 + 3 + rng.random_range(pw / 3..pw.max(2));
            while x + gw < (x0 + pw - 2).min(line_end) {
                if rng.random_bool(0.18) {
                    x += gw;
                    continue;
                }
                let g = &font[rng.random_range(0..font.len())];
                for gy in 0..GLYPH_H {
                    for gx in 0..GLYPH_W {
                        if g[gy * GLYPH_W + gx] {
                            let (px, py) = (x + gx * scale, y + gy * scale);
                            cv.fill(px, py, px + scale, py + scale, ink);
                        }
                    }
                }
                x += gw;
            }
            y += gh;
        }
    }

    let (w, h) = (width, height);
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let c = i / (h * w);
        T::c(f64::from(cv.px[i % (h * w)][c]) / 255.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_screen_like() {
        let a = text_image::<f32>(96, 64, 4);
        assert_eq!(a, text_image::<f32>(96, 64, 4));
        assert_ne!(a, text_image::<f32>(96, 64, 5));
        assert_eq!(a.shape(), &[1, 3, 64, 96]);
        // few distinct colours, unlike natural images
        let mut colours = std::collections::HashSet::new();
        let hw = 64 * 96;
        for p in 0..hw {
            let d = a.data();
            colours.insert([d[p].to_bits(), d[hw + p].to_bits(), d[2 * hw + p].to_bits()]);
        }
        assert!(colours.len() <= 16, "{}", colours.len());
        assert!(colours.len() >= 3);
    }
}

//! Deterministic synthetic digit dataset.
//!
//! Renders seven-segment style digits 0-9 onto 28x28 grayscale canvases.
//! Each record draws one of two balanced "handwriting" styles (position,
//! glyph size, and ink level all shift together), plus seeded translation
//! jitter and background noise, so every class has genuine within-class
//! structure. Used as a desk-scale stand-in when real MNIST IDX files are
//! not on disk; the poisoning and defense pipelines only require a learnable
//! 10-class image dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{ImageTensor, LabeledDataset};

const SIDE: usize = 28;

/// Segment masks per digit, bits ordered a,b,c,d,e,f,g.
const SEGMENTS: [u8; 10] = [
    0b1111110, // 0: abcdef
    0b0110000, // 1: bc
    0b1101101, // 2: abdeg
    0b1111001, // 3: abcdg
    0b0110011, // 4: bcfg
    0b1011011, // 5: acdfg
    0b1011111, // 6: acdefg
    0b1110000, // 7: abc
    0b1111111, // 8
    0b1111011, // 9: abcdfg
];

fn fill(canvas: &mut [u8; SIDE * SIDE], r0: i32, r1: i32, c0: i32, c1: i32, value: u8) {
    for r in r0.max(0)..r1.min(SIDE as i32) {
        for c in c0.max(0)..c1.min(SIDE as i32) {
            canvas[r as usize * SIDE + c as usize] = value;
        }
    }
}

fn render_digit(
    digit: usize,
    dr: i32,
    dc: i32,
    thickness: i32,
    glyph_h: i32,
    glyph_w: i32,
    inks: [u8; 7],
) -> [u8; SIDE * SIDE] {
    let mut canvas = [0u8; SIDE * SIDE];
    let top = (SIDE as i32 - glyph_h) / 2 + dr;
    let left = (SIDE as i32 - glyph_w) / 2 + dc;
    let (h, w, t) = (glyph_h, glyph_w, thickness);
    let mask = SEGMENTS[digit];
    let on = |bit: u8| mask & (1 << (6 - bit)) != 0;
    if on(0) {
        fill(&mut canvas, top, top + t, left, left + w, inks[0]); // a
    }
    if on(1) {
        fill(&mut canvas, top, top + h / 2, left + w - t, left + w, inks[1]); // b
    }
    if on(2) {
        fill(&mut canvas, top + h / 2, top + h, left + w - t, left + w, inks[2]); // c
    }
    if on(3) {
        fill(&mut canvas, top + h - t, top + h, left, left + w, inks[3]); // d
    }
    if on(4) {
        fill(&mut canvas, top + h / 2, top + h, left, left + t, inks[4]); // e
    }
    if on(5) {
        fill(&mut canvas, top, top + h / 2, left, left + t, inks[5]); // f
    }
    if on(6) {
        fill(&mut canvas, top + h / 2 - t / 2, top + h / 2 - t / 2 + t, left, left + w, inks[6]); // g
    }
    canvas
}

/// Generates `n` labeled 28x28x1 digit images, classes cycling 0..10,
/// deterministic for a given seed.
pub fn synthetic_digits(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        let dr = rng.gen_range(-2..=2);
        let dc = rng.gen_range(-2..=2);
        // two balanced handwriting styles, as distinct as the digits
        // themselves: small/thin/faint glyphs sit left of center, large/bold/
        // dark glyphs sit right of center
        let bold = rng.gen::<bool>();
        let (thickness, glyph_h, glyph_w, ink, dc) = if bold {
            (2, rng.gen_range(21..=22), rng.gen_range(13..=14), rng.gen_range(160..=200), dc + 4)
        } else {
            (2, rng.gen_range(18..=19), rng.gen_range(10..=11), rng.gen_range(120..=160), dc - 4)
        };
        let mut canvas = render_digit(digit, dr, dc, thickness, glyph_h, glyph_w, [ink; 7]);
        for px in canvas.iter_mut() {
            // background floor of ~12 mimics sensor black level; keeps weak
            // negative perturbations from clamping at zero
            let noise: u8 = rng.gen_range(12..=37);
            *px = px.saturating_add(noise);
        }
        images.push(ImageTensor {
            height: SIDE,
            width: SIDE,
            channels: 1,
            pixels: canvas.to_vec(),
        });
        labels.push(digit);
    }
    LabeledDataset::new(images, labels, 10).expect("synthetic dataset is well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(synthetic_digits(50, 7), synthetic_digits(50, 7));
    }

    #[test]
    fn different_seeds_differ() {
        assert_ne!(synthetic_digits(50, 7), synthetic_digits(50, 8));
    }

    #[test]
    fn shapes_and_labels() {
        let ds = synthetic_digits(25, 1);
        assert_eq!(ds.len(), 25);
        assert_eq!(ds.num_classes, 10);
        assert!(ds.images.iter().all(|i| i.height == 28 && i.width == 28 && i.channels == 1));
        assert_eq!(ds.labels[13], 3);
    }

    #[test]
    fn digits_are_distinguishable() {
        // same jitter, different digits must differ
        let a = render_digit(0, 0, 0, 2, 20, 12, [200; 7]);
        let b = render_digit(8, 0, 0, 2, 20, 12, [200; 7]);
        assert_ne!(a.to_vec(), b.to_vec());
    }
}

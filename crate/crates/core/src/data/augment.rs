use rand::Rng;

use crate::tensor::Tensor;

use super::{stream_rng, Stream};

/// Zero padding added on every side before the random crop.
pub const CROP_PAD: usize = 4;

/// The random choices made for one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flip: bool,
    /// Crop origin inside the padded image, each in `0..=2 * CROP_PAD`.
    pub dy: usize,
    pub dx: usize,
}

/// Mirrors a `[c, h, w]` image left to right.
pub fn hflip_image(img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for p in 0..c * h {
        for x in 0..w {
            out[p * w + x] = img[p * w + (w - 1 - x)];
        }
    }
    out
}

/// Pads a `[c, h, w]` image by [`CROP_PAD`] zeros and crops an `h×w`
/// window at `(dy, dx)`; `(CROP_PAD, CROP_PAD)` is the identity.
pub fn pad_crop_image(img: &[f64], c: usize, h: usize, w: usize, dy: usize, dx: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - CROP_PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - CROP_PAD as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Random horizontal flip (p = 0.5) and padded random crop, drawn
/// independently per image from `seed`.
pub fn augment(batch: &Tensor, seed: u64) -> Tensor {
    let s = batch.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let per = c * h * w;
    let mut rng = stream_rng(seed, Stream::Augment, 0);
    let mut data = Vec::with_capacity(batch.numel());
    for i in 0..n {
        let draw = AugmentDraw {
            flip: rng.gen_bool(0.5),
            dy: rng.gen_range(0..=2 * CROP_PAD),
            dx: rng.gen_range(0..=2 * CROP_PAD),
        };
        let img = &batch.data()[i * per..(i + 1) * per];
        let flipped;
        let src = if draw.flip {
            flipped = hflip_image(img, c, h, w);
            &flipped[..]
        } else {
            img
        };
        data.extend(pad_crop_image(src, c, h, w, draw.dy, draw.dx));
    }
    Tensor::new(s.to_vec(), data).expect("augmentation preserves shape")
}

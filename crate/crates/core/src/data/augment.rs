use rand::Rng;

use crate::{Error, Result, Scalar, Tensor};

/// Zero padding applied on every side before cropping.
pub const PAD: usize = 4;

/// Crops the `PAD`-padded image at offset `(dy, dx)` and optionally mirrors
/// it horizontally. `(PAD, PAD)` without flip is the identity. Accepts
/// `C×H×W` or `1×C×H×W`.
pub fn augment_with<T: Scalar>(image: &Tensor<T>, dy: usize, dx: usize, flip: bool) -> Result<Tensor<T>> {
    let s = image.shape();
    let (c, h, w) = match s.len() {
        3 => (s[0], s[1], s[2]),
        4 if s[0] == 1 => (s[1], s[2], s[3]),
        _ => return Err(Error::dim(format!("augment expects one image, got {s:?}"))),
    };
    if dy > 2 * PAD || dx > 2 * PAD {
        return Err(Error::config(format!(
            "crop offset ({dy}, {dx}) outside 0..={}",
            2 * PAD
        )));
    }
    let src = image.data();
    let mut out = vec![T::zero(); src.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = (xx + dx) as isize - PAD as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Random pad-4 crop plus a horizontal flip with probability ½.
pub fn augment<T: Scalar, R: Rng + ?Sized>(image: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
    let dy = rng.random_range(0..=2 * PAD);
    let dx = rng.random_range(0..=2 * PAD);
    let flip = rng.random_bool(0.5);
    augment_with(image, dy, dx, flip)
}

//! im2col lowering for stride-1 "same" convolutions with odd square kernels.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Border handling for convolutions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Zero,
    /// Wrap around the image edges (torus topology).
    Circular,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: Padding,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.height * self.width
    }

    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }
}

/// Lower one `C×H×W` image into a `(C·k·k) × (H·W)` column matrix.
pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, image: &[T], col: &mut [T]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let pad = g.pad();
    let plane = h * w;
    debug_assert_eq!(col.len(), g.rows() * plane);
    for c in 0..g.channels {
        let src = &image[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    let sy = match g.padding {
                        Padding::Zero if sy < 0 || sy >= h as isize => {
                            out.fill(T::zero());
                            continue;
                        }
                        Padding::Zero => sy as usize,
                        Padding::Circular => sy.rem_euclid(h as isize) as usize,
                    };
                    let line = &src[sy * w..(sy + 1) * w];
                    shift_line(line, out, dx, g.padding);
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: scatter-add a column matrix back onto the image.
pub(crate) fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], image: &mut [T]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let pad = g.pad();
    let plane = h * w;
    for c in 0..g.channels {
        let dst = &mut image[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let sy = match g.padding {
                        Padding::Zero if sy < 0 || sy >= h as isize => continue,
                        Padding::Zero => sy as usize,
                        Padding::Circular => sy.rem_euclid(h as isize) as usize,
                    };
                    let line = &mut dst[sy * w..(sy + 1) * w];
                    unshift_line_add(&src[y * w..(y + 1) * w], line, dx, g.padding);
                }
            }
        }
    }
}

/// `out[x] = line[x + dx]`, with the configured border rule.
fn shift_line<T: Scalar>(line: &[T], out: &mut [T], dx: isize, padding: Padding) {
    let w = line.len() as isize;
    match padding {
        Padding::Zero => {
            let lo = (-dx).clamp(0, w) as usize;
            let hi = (w - dx).clamp(0, w) as usize;
            out[..lo].fill(T::zero());
            if hi > lo {
                let s = (lo as isize + dx) as usize;
                out[lo..hi].copy_from_slice(&line[s..s + (hi - lo)]);
            }
            out[hi.max(lo)..].fill(T::zero());
        }
        Padding::Circular => {
            let s = dx.rem_euclid(w) as usize;
            let n = line.len() - s;
            out[..n].copy_from_slice(&line[s..]);
            out[n..].copy_from_slice(&line[..s]);
        }
    }
}

/// `line[x + dx] += src[x]`, adjoint of [`shift_line`].
fn unshift_line_add<T: Scalar>(src: &[T], line: &mut [T], dx: isize, padding: Padding) {
    let w = line.len() as isize;
    match padding {
        Padding::Zero => {
            let lo = (-dx).clamp(0, w) as usize;
            let hi = (w - dx).clamp(0, w) as usize;
            for x in lo..hi {
                line[(x as isize + dx) as usize] += src[x];
            }
        }
        Padding::Circular => {
            for (x, v) in src.iter().enumerate() {
                line[(x as isize + dx).rem_euclid(w) as usize] += *v;
            }
        }
    }
}

//! Plane-level image operations on `[.., h, w]` tensors.
//!
//! Geometric operations are expressed as [`ResampleMap`]s so the same map
//! serves both plain evaluation and differentiable graph nodes.

use crate::autograd::ResampleMap;
use crate::tensor::{Real, Tensor};

/// Bilinear resampling map where output pixel `(y, x)` reads the input at
/// `src(y, x)` (pixel-centre coordinates). Out-of-range reads replicate the
/// border.
pub fn warp_map<T: Real>(
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    src: impl Fn(f64, f64) -> (f64, f64),
) -> ResampleMap<T> {
    let mut taps = Vec::with_capacity(h_out * w_out);
    for y in 0..h_out {
        for x in 0..w_out {
            let (sy, sx) = src(y as f64, x as f64);
            let sy = sy.clamp(0.0, (h_in - 1) as f64);
            let sx = sx.clamp(0.0, (w_in - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h_in - 1), (x0 + 1).min(w_in - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let idx = |yy: usize, xx: usize| (yy * w_in + xx) as u32;
            taps.push([
                (idx(y0, x0), T::lit((1.0 - fy) * (1.0 - fx))),
                (idx(y0, x1), T::lit((1.0 - fy) * fx)),
                (idx(y1, x0), T::lit(fy * (1.0 - fx))),
                (idx(y1, x1), T::lit(fy * fx)),
            ]);
        }
    }
    ResampleMap {
        h_in,
        w_in,
        h_out,
        w_out,
        taps,
    }
}

/// Rotation by `degrees` about the image centre followed by a translation
/// of `(ty, tx)` pixels.
pub fn affine_map<T: Real>(h: usize, w: usize, degrees: f64, ty: f64, tx: f64) -> ResampleMap<T> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    warp_map(h, w, h, w, move |y, x| {
        // inverse mapping: undo translation, then rotate back
        let (dy, dx) = (y - ty - cy, x - tx - cx);
        (cy + c * dy - s * dx, cx + s * dy + c * dx)
    })
}

pub fn hflip_map<T: Real>(h: usize, w: usize) -> ResampleMap<T> {
    warp_map(h, w, h, w, move |y, x| (y, (w - 1) as f64 - x))
}

/// Bilinear resize with half-pixel alignment.
pub fn resize_map<T: Real>(h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> ResampleMap<T> {
    let (ry, rx) = (h_in as f64 / h_out as f64, w_in as f64 / w_out as f64);
    warp_map(h_in, w_in, h_out, w_out, move |y, x| {
        ((y + 0.5) * ry - 0.5, (x + 0.5) * rx - 0.5)
    })
}

/// Low-pass filter: average-pool by `factor`, then bilinear upsample back.
pub fn low_pass<T: Real>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let pooled = crate::autograd::avg_pool(x, factor);
    resize_map::<T>(h / factor, w / factor, h, w).apply(&pooled)
}

/// Separable convolution of each plane with a symmetric 1-D kernel, with
/// replicated borders. `kernel` has odd length.
pub fn separable_blur<T: Real>(x: &Tensor<T>, ky: &[f64], kx: &[f64]) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = x.len() / (h * w);
    let mut out = x.clone();
    let (ry, rx) = ((ky.len() / 2) as isize, (kx.len() / 2) as isize);
    let mut tmp = vec![0.0f64; h * w];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (k, &wt) in kx.iter().enumerate() {
                    let sx = (xx as isize + k as isize - rx).clamp(0, w as isize - 1) as usize;
                    acc += wt * src[y * w + sx].as_f64();
                }
                tmp[y * w + xx] = acc;
            }
        }
        let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (k, &wt) in ky.iter().enumerate() {
                    let sy = (y as isize + k as isize - ry).clamp(0, h as isize - 1) as usize;
                    acc += wt * tmp[sy * w + xx];
                }
                dst[y * w + xx] = T::lit(acc);
            }
        }
    }
    out
}

/// Normalized box kernel of (possibly fractional) half-width `r`: the two
/// outermost taps carry the fractional weight.
pub fn box_kernel(r: f64) -> Vec<f64> {
    let full = r.floor() as usize;
    let frac = r - full as f64;
    let len = 2 * full + 1 + if frac > 0.0 { 2 } else { 0 };
    let mut k = vec![1.0; len];
    if frac > 0.0 {
        k[0] = frac;
        k[len - 1] = frac;
    }
    let s: f64 = k.iter().sum();
    k.iter().map(|v| v / s).collect()
}

/// Row `i` holds the overlap of output cell `i` (width `n / m`) with each
/// input pixel, normalized to sum to 1.
fn area_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let cell = n as f64 / m as f64;
    (0..m)
        .map(|i| {
            let (lo, hi) = (i as f64 * cell, (i + 1) as f64 * cell);
            (lo.floor() as usize..(hi.ceil() as usize).min(n))
                .map(|j| (j, ((j + 1) as f64).min(hi) - (j as f64).max(lo)))
                .filter(|&(_, wt)| wt > 0.0)
                .map(|(j, wt)| (j, wt / cell))
                .collect()
        })
        .collect()
}

/// Area-averages each plane down to `round(h / factor) x round(w / factor)`
/// cells, then upsamples back by nearest neighbour. Factors at or below 1
/// are the identity; integer factors dividing the size give block means.
pub fn pixelate<T: Real>(x: &Tensor<T>, factor: f64) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = x.clone();
    if factor <= 1.0 {
        return out;
    }
    let (mh, mw) = (
        ((h as f64 / factor).round() as usize).max(1),
        ((w as f64 / factor).round() as usize).max(1),
    );
    let (wy, wx) = (area_weights(h, mh), area_weights(w, mw));
    let planes = x.len() / (h * w);
    let mut small = vec![0.0f64; mh * mw];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for (i, ry) in wy.iter().enumerate() {
            for (j, rx) in wx.iter().enumerate() {
                let mut acc = 0.0;
                for &(y, a) in ry {
                    for &(xx, b) in rx {
                        acc += a * b * src[y * w + xx].as_f64();
                    }
                }
                small[i * mw + j] = acc;
            }
        }
        let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let i = (y * mh) / h;
            for xx in 0..w {
                dst[y * w + xx] = T::lit(small[i * mw + (xx * mw) / w]);
            }
        }
    }
    out
}

/// Sobel gradient magnitude of each plane, replicated borders.
pub fn sobel_magnitude<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = x.len() / (h * w);
    let mut out = x.clone();
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let at = |y: isize, xx: isize| {
            let y = y.clamp(0, h as isize - 1) as usize;
            let xx = xx.clamp(0, w as isize - 1) as usize;
            src[y * w + xx].as_f64()
        };
        let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let gx = at(y - 1, xx + 1) + 2.0 * at(y, xx + 1) + at(y + 1, xx + 1)
                    - at(y - 1, xx - 1)
                    - 2.0 * at(y, xx - 1)
                    - at(y + 1, xx - 1);
                let gy = at(y + 1, xx - 1) + 2.0 * at(y + 1, xx) + at(y + 1, xx + 1)
                    - at(y - 1, xx - 1)
                    - 2.0 * at(y - 1, xx)
                    - at(y - 1, xx + 1);
                dst[y as usize * w + xx as usize] = T::lit((gx * gx + gy * gy).sqrt());
            }
        }
    }
    out
}

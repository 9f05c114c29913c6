//! Loop-based kernels for SAME-padded dilated convolution and 2x2 max-pooling.
//!
//! Every kernel walks whole output rows so that the innermost loop is a
//! contiguous multiply-accumulate the compiler can vectorise.

use std::ops::Range;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub dilation: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        ((self.k - 1) * self.dilation / 2) as isize
    }

    /// Tap offset for kernel index `t`.
    fn offset(&self, t: usize) -> isize {
        (t * self.dilation) as isize - self.pad()
    }

    fn kidx(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.c_in + ci) * self.k + ky) * self.k + kx
    }
}

/// Output positions `p` in `0..len` for which `p + off` stays inside `0..len`.
fn valid(len: usize, off: isize) -> Range<usize> {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    lo.min(hi)..hi
}

pub(crate) fn conv2d_forward(input: &[f64], kernel: &[f64], g: ConvGeom) -> Vec<f64> {
    let plane = g.h * g.w;
    let mut out = vec![0.0; g.c_out * plane];
    for co in 0..g.c_out {
        let out_plane = &mut out[co * plane..(co + 1) * plane];
        for ci in 0..g.c_in {
            let in_plane = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..g.k {
                let dy = g.offset(ky);
                let ys = valid(g.h, dy);
                for kx in 0..g.k {
                    let dx = g.offset(kx);
                    let xs = valid(g.w, dx);
                    if xs.is_empty() {
                        continue;
                    }
                    let wv = kernel[g.kidx(co, ci, ky, kx)];
                    for y in ys.clone() {
                        let iy = (y as isize + dy) as usize;
                        let ix0 = (xs.start as isize + dx) as usize;
                        let orow = &mut out_plane[y * g.w + xs.start..y * g.w + xs.end];
                        let irow = &in_plane[iy * g.w + ix0..iy * g.w + ix0 + xs.len()];
                        for (o, &i) in orow.iter_mut().zip(irow) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_grad_input(grad_out: &[f64], kernel: &[f64], g: ConvGeom) -> Vec<f64> {
    let plane = g.h * g.w;
    let mut gin = vec![0.0; g.c_in * plane];
    for co in 0..g.c_out {
        let go_plane = &grad_out[co * plane..(co + 1) * plane];
        for ci in 0..g.c_in {
            let gi_plane = &mut gin[ci * plane..(ci + 1) * plane];
            for ky in 0..g.k {
                let dy = g.offset(ky);
                let ys = valid(g.h, dy);
                for kx in 0..g.k {
                    let dx = g.offset(kx);
                    let xs = valid(g.w, dx);
                    if xs.is_empty() {
                        continue;
                    }
                    let wv = kernel[g.kidx(co, ci, ky, kx)];
                    for y in ys.clone() {
                        let iy = (y as isize + dy) as usize;
                        let ix0 = (xs.start as isize + dx) as usize;
                        let grow = &go_plane[y * g.w + xs.start..y * g.w + xs.end];
                        let irow = &mut gi_plane[iy * g.w + ix0..iy * g.w + ix0 + xs.len()];
                        for (i, &o) in irow.iter_mut().zip(grow) {
                            *i += wv * o;
                        }
                    }
                }
            }
        }
    }
    gin
}

pub(crate) fn conv2d_grad_kernel(grad_out: &[f64], input: &[f64], g: ConvGeom) -> Vec<f64> {
    let plane = g.h * g.w;
    let mut gk = vec![0.0; g.c_out * g.c_in * g.k * g.k];
    for co in 0..g.c_out {
        let go_plane = &grad_out[co * plane..(co + 1) * plane];
        for ci in 0..g.c_in {
            let in_plane = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..g.k {
                let dy = g.offset(ky);
                let ys = valid(g.h, dy);
                for kx in 0..g.k {
                    let dx = g.offset(kx);
                    let xs = valid(g.w, dx);
                    let mut acc = 0.0;
                    if !xs.is_empty() {
                        for y in ys.clone() {
                            let iy = (y as isize + dy) as usize;
                            let ix0 = (xs.start as isize + dx) as usize;
                            let grow = &go_plane[y * g.w + xs.start..y * g.w + xs.end];
                            let irow = &in_plane[iy * g.w + ix0..iy * g.w + ix0 + xs.len()];
                            acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    gk[g.kidx(co, ci, ky, kx)] = acc;
                }
            }
        }
    }
    gk
}

/// 2x2 stride-2 max-pool. Returns pooled values and, per output cell, the
/// flat input index of the maximum (first occurrence in row-major order).
pub(crate) fn maxpool2_forward(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + (2 * oy) * w + 2 * ox;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_ranges() {
        assert_eq!(valid(5, 0), 0..5);
        assert_eq!(valid(5, 2), 0..3);
        assert_eq!(valid(5, -2), 2..5);
        assert!(valid(3, 4).is_empty());
        assert!(valid(3, -4).is_empty());
    }

    /// Naive reference with explicit zero padding.
    fn reference(input: &[f64], kernel: &[f64], g: ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.c_out * g.h * g.w];
        let pad = ((g.k - 1) * g.dilation / 2) as isize;
        for co in 0..g.c_out {
            for y in 0..g.h {
                for x in 0..g.w {
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = y as isize + (ky * g.dilation) as isize - pad;
                                let ix = x as isize + (kx * g.dilation) as isize - pad;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += kernel[((co * g.c_in + ci) * g.k + ky) * g.k + kx]
                                    * input[(ci * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                    out[(co * g.h + y) * g.w + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_reference() {
        let g = ConvGeom {
            c_in: 2,
            c_out: 3,
            h: 7,
            w: 5,
            k: 3,
            dilation: 2,
        };
        let input: Vec<f64> = (0..g.c_in * g.h * g.w)
            .map(|i| ((i * 37 % 11) as f64) - 5.0)
            .collect();
        let kernel: Vec<f64> = (0..g.c_out * g.c_in * 9)
            .map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0)
            .collect();
        let fast = conv2d_forward(&input, &kernel, g);
        let slow = reference(&input, &kernel, g);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_ties_take_first() {
        let (v, a) = maxpool2_forward(&[5.0, 5.0, 5.0, 5.0], 1, 2, 2);
        assert_eq!(v, vec![5.0]);
        assert_eq!(a, vec![0]);
    }
}

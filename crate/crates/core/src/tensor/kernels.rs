//! Raw forward/backward loops over row-major NCHW buffers.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Valid output rows for kernel row `ki`: `oh` such that `oh*stride + ki - pad` is in `[0, h)`.
    fn out_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= extent-1
        let hi_num = extent as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.max(0) as usize;
        let hi = (hi + 1).min(out as isize).max(0) as usize;
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T], bias: &[T], out: &mut [T]) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let k_plane = g.kh * g.kw;
    for n in 0..g.n {
        for f in 0..g.f {
            let o = &mut out[(n * g.f + f) * out_plane..(n * g.f + f + 1) * out_plane];
            o.iter_mut().for_each(|v| *v = bias[f]);
            for c in 0..g.c {
                let x = &input[(n * g.c + c) * in_plane..(n * g.c + c + 1) * in_plane];
                let k = &kernel[(f * g.c + c) * k_plane..(f * g.c + c + 1) * k_plane];
                for ki in 0..g.kh {
                    let (oy0, oy1) = g.out_range(ki, g.h, g.oh);
                    for kj in 0..g.kw {
                        let wv = k[ki * g.kw + kj];
                        let (ox0, ox1) = g.out_range(kj, g.w, g.ow);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ki - g.pad;
                            let orow = &mut o[oy * g.ow..(oy + 1) * g.ow];
                            let irow = &x[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let ix0 = ox0 + kj - g.pad;
                                for (ov, &iv) in orow[ox0..ox1].iter_mut().zip(&irow[ix0..ix0 + (ox1 - ox0)]) {
                                    *ov = *ov + wv * iv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ox * g.stride + kj - g.pad;
                                    orow[ox] = orow[ox] + wv * irow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input/kernel/bias gradients. Any of the outputs may be skipped.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    gout: &[T],
    mut ginput: Option<&mut [T]>,
    mut gkernel: Option<&mut [T]>,
    gbias: Option<&mut [T]>,
) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let k_plane = g.kh * g.kw;
    if let Some(gb) = gbias {
        for n in 0..g.n {
            for f in 0..g.f {
                let go = &gout[(n * g.f + f) * out_plane..(n * g.f + f + 1) * out_plane];
                gb[f] = gb[f] + go.iter().copied().sum::<T>();
            }
        }
    }
    if ginput.is_none() && gkernel.is_none() {
        return;
    }
    for n in 0..g.n {
        for f in 0..g.f {
            let go = &gout[(n * g.f + f) * out_plane..(n * g.f + f + 1) * out_plane];
            for c in 0..g.c {
                let x_off = (n * g.c + c) * in_plane;
                let k_off = (f * g.c + c) * k_plane;
                for ki in 0..g.kh {
                    let (oy0, oy1) = g.out_range(ki, g.h, g.oh);
                    for kj in 0..g.kw {
                        let (ox0, ox1) = g.out_range(kj, g.w, g.ow);
                        let wv = kernel[k_off + ki * g.kw + kj];
                        let mut kacc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ki - g.pad;
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kj - g.pad;
                                let gv = go[oy * g.ow + ox];
                                let xi = x_off + iy * g.w + ix;
                                kacc = kacc + gv * input[xi];
                                if let Some(gi) = ginput.as_deref_mut() {
                                    gi[xi] = gi[xi] + gv * wv;
                                }
                            }
                        }
                        if let Some(gk) = gkernel.as_deref_mut() {
                            let idx = k_off + ki * g.kw + kj;
                            gk[idx] = gk[idx] + kacc;
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 stride-2 max pool. Ties go to the first element in row-major window order.
pub(crate) fn maxpool2_forward<T: Scalar>(
    planes: usize,
    h: usize,
    w: usize,
    input: &[T],
    out: &mut [T],
    argmax: &mut [u32],
) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
}

pub(crate) fn upsample2_forward<T: Scalar>(planes: usize, h: usize, w: usize, input: &[T], out: &mut [T]) {
    let ow = 2 * w;
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                let v = input[p * h * w + y * w + x];
                let o = p * 4 * h * w + 2 * y * ow + 2 * x;
                out[o] = v;
                out[o + 1] = v;
                out[o + ow] = v;
                out[o + ow + 1] = v;
            }
        }
    }
}

pub(crate) fn upsample2_backward<T: Scalar>(planes: usize, h: usize, w: usize, gout: &[T], ginput: &mut [T]) {
    let ow = 2 * w;
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                let o = p * 4 * h * w + 2 * y * ow + 2 * x;
                let s = gout[o] + gout[o + 1] + gout[o + ow] + gout[o + ow + 1];
                let i = p * h * w + y * w + x;
                ginput[i] = ginput[i] + s;
            }
        }
    }
}

//! Spatial kernels on channel-last (`[N, H, W, C]`) feature maps and
//! token-sequence (`[S, L, C]`) convolution.

use super::{for_each_chunk, map_ranges, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Mirror about the edge pixel without repeating it; pads wider than the
    /// image keep mirroring periodically.
    Reflect,
}

pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Fills `buf` (`[w, 9 * ci]`) with the zero-padded 3x3 neighbourhoods of
/// image row `y` of batch item `n`.
fn im2col_row<T: Element>(x: &[T], dims: (usize, usize, usize), n: usize, y: usize, buf: &mut [T]) {
    let (h, w, ci) = dims;
    let patch = 9 * ci;
    buf.fill(T::zero());
    for ky in 0..3 {
        let sy = y as isize + ky as isize - 1;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        let src_row = &x[(n * h + sy as usize) * w * ci..][..w * ci];
        for kx in 0..3 {
            let tap = (ky * 3 + kx) * ci;
            for ox in 0..w {
                let sx = ox as isize + kx as isize - 1;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                buf[ox * patch + tap..][..ci].copy_from_slice(&src_row[sx as usize * ci..][..ci]);
            }
        }
    }
}

/// "Same" 3x3 convolution, `weight` laid out `[3, 3, c_in, c_out]`.
fn conv3x3_forward<T: Element>(x: &[T], dims: (usize, usize, usize, usize), weight: &[T], co: usize) -> Vec<T> {
    let (nb, h, w, ci) = dims;
    let patch = 9 * ci;
    let mut out = vec![T::zero(); nb * h * w * co];
    let row_len = w * co;
    for_each_chunk(&mut out, row_len, |row, chunk| {
        let (n, y) = (row / h, row % h);
        let mut cols = vec![T::zero(); w * patch];
        im2col_row(x, (h, w, ci), n, y, &mut cols);
        T::gemm(w, patch, co, &cols, (patch as isize, 1), weight, (co as isize, 1), T::zero(), chunk);
    });
    out
}

impl<T: Element> Tensor<T> {
    /// 3x3 stride-1 convolution with zero "same" padding on `[N, H, W, C_in]`.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (&[nb, h, w, ci], &[3, 3, wci, co]) = (self.shape(), weight.shape()) else {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        };
        if ci != wci {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(Error::shape("conv2d", weight.shape(), b.shape()));
            }
        }
        let dims = (nb, h, w, ci);
        let mut out = conv3x3_forward(self.data(), dims, weight.data(), co);
        if let Some(b) = bias {
            let bd = b.data();
            out.chunks_mut(co).for_each(|px| px.iter_mut().zip(bd).for_each(|(o, &bv)| *o = *o + bv));
        }

        let (x_t, w_t) = (self.clone(), weight.clone());
        let has_bias = bias.is_some();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            "conv2d",
            vec![nb, h, w, co],
            out,
            parents,
            Box::new(move |g, _| {
                let patch = 9 * ci;
                let gx = x_t.requires_grad().then(|| {
                    // Correlate the upstream gradient with the spatially flipped,
                    // channel-transposed kernel.
                    let wd = w_t.data();
                    let mut flipped = vec![T::zero(); 9 * co * ci];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            for c_in in 0..ci {
                                for c_out in 0..co {
                                    flipped[((ky * 3 + kx) * co + c_out) * ci + c_in] =
                                        wd[(((2 - ky) * 3 + (2 - kx)) * ci + c_in) * co + c_out];
                                }
                            }
                        }
                    }
                    conv3x3_forward(g, (nb, h, w, co), &flipped, ci)
                });
                let gw = w_t.requires_grad().then(|| {
                    let x = x_t.data();
                    let partials = map_ranges(nb * h, 8, |rows| {
                        let mut acc = vec![T::zero(); patch * co];
                        let mut cols = vec![T::zero(); w * patch];
                        for row in rows {
                            let (n, y) = (row / h, row % h);
                            im2col_row(x, (h, w, ci), n, y, &mut cols);
                            let g_row = &g[row * w * co..][..w * co];
                            T::gemm(patch, w, co, &cols, (1, patch as isize), g_row, (co as isize, 1), T::one(), &mut acc);
                        }
                        acc
                    });
                    sum_partials(partials, patch * co)
                });
                let mut grads = vec![gx, gw];
                if has_bias {
                    let mut gb = vec![T::zero(); co];
                    for px in g.chunks(co) {
                        gb.iter_mut().zip(px).for_each(|(a, &v)| *a = *a + v);
                    }
                    grads.push(Some(gb));
                }
                grads
            }),
        ))
    }

    /// Depth-wise causal 1-d convolution along the token axis of `[S, L, C]`.
    /// `weight` is `[C, K]`; output position `t` sees inputs `t-K+1 ..= t`
    /// (left zero padding).
    pub fn depthwise_conv1d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (&[s, l, c], &[wc, k]) = (self.shape(), weight.shape()) else {
            return Err(Error::shape("depthwise_conv1d", self.shape(), weight.shape()));
        };
        if wc != c || k == 0 {
            return Err(Error::shape("depthwise_conv1d", self.shape(), weight.shape()));
        }
        if let Some(b) = bias {
            if b.shape() != [c] {
                return Err(Error::shape("depthwise_conv1d", weight.shape(), b.shape()));
            }
        }
        let x = self.data();
        let wd = weight.data();
        let bd: Vec<T> = bias.map(|b| b.to_vec()).unwrap_or_else(|| vec![T::zero(); c]);
        let mut out = vec![T::zero(); s * l * c];
        for_each_chunk(&mut out, l * c, |seq, chunk| {
            let xs = &x[seq * l * c..][..l * c];
            for t in 0..l {
                for ch in 0..c {
                    let mut acc = bd[ch];
                    for kk in 0..k {
                        let src = t as isize + kk as isize - (k as isize - 1);
                        if src >= 0 {
                            acc = acc + wd[ch * k + kk] * xs[src as usize * c + ch];
                        }
                    }
                    chunk[t * c + ch] = acc;
                }
            }
        });

        let (x_t, w_t) = (self.clone(), weight.clone());
        let has_bias = bias.is_some();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            "depthwise_conv1d",
            vec![s, l, c],
            out,
            parents,
            Box::new(move |g, _| {
                let x = x_t.data();
                let wd = w_t.data();
                let gx = x_t.requires_grad().then(|| {
                    let mut gx = vec![T::zero(); s * l * c];
                    for_each_chunk(&mut gx, l * c, |seq, chunk| {
                        let gs = &g[seq * l * c..][..l * c];
                        for t in 0..l {
                            for ch in 0..c {
                                let mut acc = T::zero();
                                for kk in 0..k {
                                    let dst = t + (k - 1) - kk;
                                    if dst < l {
                                        acc = acc + wd[ch * k + kk] * gs[dst * c + ch];
                                    }
                                }
                                chunk[t * c + ch] = acc;
                            }
                        }
                    });
                    gx
                });
                let gw = w_t.requires_grad().then(|| {
                    let mut gw = vec![T::zero(); c * k];
                    for seq in 0..s {
                        for t in 0..l {
                            for kk in 0..k {
                                let src = t as isize + kk as isize - (k as isize - 1);
                                if src < 0 {
                                    continue;
                                }
                                let (g_row, x_row) = (&g[(seq * l + t) * c..][..c], &x[(seq * l + src as usize) * c..][..c]);
                                for ch in 0..c {
                                    gw[ch * k + kk] = gw[ch * k + kk] + g_row[ch] * x_row[ch];
                                }
                            }
                        }
                    }
                    gw
                });
                let mut grads = vec![gx, gw];
                if has_bias {
                    let mut gb = vec![T::zero(); c];
                    for px in g.chunks(c) {
                        gb.iter_mut().zip(px).for_each(|(a, &v)| *a = *a + v);
                    }
                    grads.push(Some(gb));
                }
                grads
            }),
        ))
    }

    /// Pads the two spatial axes of `[N, H, W, C]`.
    pub fn pad2d(&self, top: usize, bottom: usize, left: usize, right: usize, mode: PadMode) -> Result<Tensor<T>> {
        let &[nb, h, w, c] = self.shape() else {
            return Err(Error::invalid("pad2d", format!("expected [N, H, W, C], got {:?}", self.shape())));
        };
        if (h == 0 || w == 0) && top + bottom + left + right > 0 {
            return Err(Error::invalid("pad2d", "cannot pad an empty image"));
        }
        let (oh, ow) = (h + top + bottom, w + left + right);
        // Source pixel for each output pixel, `usize::MAX` for zero fill.
        let mut src = Vec::with_capacity(nb * oh * ow);
        for n in 0..nb {
            for y in 0..oh {
                for x in 0..ow {
                    let (sy, sx) = (y as isize - top as isize, x as isize - left as isize);
                    let inside = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
                    src.push(match (inside, mode) {
                        (true, _) => (n * h + sy as usize) * w + sx as usize,
                        (false, PadMode::Zero) => usize::MAX,
                        (false, PadMode::Reflect) => (n * h + reflect_index(sy, h)) * w + reflect_index(sx, w),
                    });
                }
            }
        }
        let x = self.data();
        let mut out = vec![T::zero(); nb * oh * ow * c];
        for (px, &s) in out.chunks_mut(c).zip(&src) {
            if s != usize::MAX {
                px.copy_from_slice(&x[s * c..][..c]);
            }
        }
        let n_in = self.numel();
        Ok(Tensor::from_op(
            "pad2d",
            vec![nb, oh, ow, c],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); n_in];
                for (gp, &s) in g.chunks(c).zip(&src) {
                    if s != usize::MAX {
                        gx[s * c..][..c].iter_mut().zip(gp).for_each(|(a, &v)| *a = *a + v);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Spatial crop of `[N, H, W, C]` to rows `y0..y0+h`, columns `x0..x0+w`.
    pub fn crop2d(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<T>> {
        if self.ndim() != 4 {
            return Err(Error::invalid("crop2d", format!("expected [N, H, W, C], got {:?}", self.shape())));
        }
        if self.shape()[1] == h && self.shape()[2] == w {
            return Ok(self.clone());
        }
        self.slice(1, y0, y0 + h)?.slice(2, x0, x0 + w)
    }
}

pub(crate) fn sum_partials<T: Element>(partials: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut total = vec![T::zero(); len];
    for p in partials {
        total.iter_mut().zip(&p).for_each(|(a, &b)| *a = *a + b);
    }
    total
}

use super::{for_each_chunk, Element, Tensor};
use crate::error::{Error, Result};

impl<T: Element> Tensor<T> {
    fn check_norm_gain(&self, op: &'static str, gain: &Tensor<T>) -> Result<usize> {
        let c = *self.shape().last().ok_or_else(|| Error::invalid(op, "scalar input"))?;
        if gain.shape() != [c] {
            return Err(Error::shape(op, self.shape(), gain.shape()));
        }
        Ok(c)
    }

    /// Layer normalization over the last axis with affine gain and bias.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let c = self.check_norm_gain("layer_norm", gain)?;
        if bias.shape() != [c] {
            return Err(Error::shape("layer_norm", self.shape(), bias.shape()));
        }
        let rows = self.numel() / c.max(1);
        let eps = T::from_f64(eps);
        let inv_c = T::one() / T::from_f64(c as f64);
        let x = self.data();
        let (gd, bd) = (gain.data(), bias.data());

        let mut xhat = vec![T::zero(); rows * c];
        let mut inv_std = vec![T::zero(); rows];
        for (r, inv) in inv_std.iter_mut().enumerate() {
            let row = &x[r * c..][..c];
            let mu = row.iter().fold(T::zero(), |a, &v| a + v) * inv_c;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) * inv_c;
            *inv = T::one() / (var + eps).sqrt();
            for (xh, &v) in xhat[r * c..][..c].iter_mut().zip(row) {
                *xh = (v - mu) * *inv;
            }
        }
        let mut out = vec![T::zero(); rows * c];
        for_each_chunk(&mut out, c, |r, o| {
            for j in 0..c {
                o[j] = xhat[r * c + j] * gd[j] + bd[j];
            }
        });

        let gain_t = gain.clone();
        Ok(Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, _| {
                let gd = gain_t.data();
                let mut gx = vec![T::zero(); rows * c];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for r in 0..rows {
                    let (gr, xh) = (&g[r * c..][..c], &xhat[r * c..][..c]);
                    let mut mean_gxh = T::zero();
                    let mut mean_gxh_xh = T::zero();
                    for j in 0..c {
                        let gxh = gr[j] * gd[j];
                        mean_gxh = mean_gxh + gxh;
                        mean_gxh_xh = mean_gxh_xh + gxh * xh[j];
                        gg[j] = gg[j] + gr[j] * xh[j];
                        gb[j] = gb[j] + gr[j];
                    }
                    mean_gxh = mean_gxh * inv_c;
                    mean_gxh_xh = mean_gxh_xh * inv_c;
                    for j in 0..c {
                        gx[r * c + j] = inv_std[r] * (gr[j] * gd[j] - mean_gxh - xh[j] * mean_gxh_xh);
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            }),
        ))
    }

    /// Root-mean-square normalization over the last axis with a gain only.
    pub fn rms_norm(&self, gain: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let c = self.check_norm_gain("rms_norm", gain)?;
        let rows = self.numel() / c.max(1);
        let eps = T::from_f64(eps);
        let inv_c = T::one() / T::from_f64(c as f64);
        let x = self.data();
        let gd = gain.data();

        let mut inv_rms = vec![T::zero(); rows];
        for (r, inv) in inv_rms.iter_mut().enumerate() {
            let ms = x[r * c..][..c].iter().fold(T::zero(), |a, &v| a + v * v) * inv_c;
            *inv = T::one() / (ms + eps).sqrt();
        }
        let mut out = vec![T::zero(); rows * c];
        for_each_chunk(&mut out, c, |r, o| {
            for j in 0..c {
                o[j] = x[r * c + j] * inv_rms[r] * gd[j];
            }
        });

        let (x_t, gain_t) = (self.clone(), gain.clone());
        Ok(Tensor::from_op(
            "rms_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone()],
            Box::new(move |g, _| {
                let (x, gd) = (x_t.data(), gain_t.data());
                let mut gx = vec![T::zero(); rows * c];
                let mut gg = vec![T::zero(); c];
                for r in 0..rows {
                    let inv = inv_rms[r];
                    let (gr, xr) = (&g[r * c..][..c], &x[r * c..][..c]);
                    let mut dot = T::zero();
                    for j in 0..c {
                        let xh = xr[j] * inv;
                        dot = dot + gr[j] * gd[j] * xh;
                        gg[j] = gg[j] + gr[j] * xh;
                    }
                    let mean_dot = dot * inv_c;
                    for j in 0..c {
                        gx[r * c + j] = inv * (gr[j] * gd[j] - xr[j] * inv * mean_dot);
                    }
                }
                vec![Some(gx), Some(gg)]
            }),
        ))
    }
}

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Tensor<T> {
    /// Layer normalization across the channel axis (axis 1) of `[N, C, ...]`,
    /// independently at every position, followed by a per-channel affine map.
    pub fn layer_norm_channels(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        if self.ndim() < 2 {
            return Err(TensorError::dim("layer_norm", format!("input must be [N, C, ...], got {:?}", self.shape())));
        }
        let (n, c) = (self.shape()[0], self.shape()[1]);
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TensorError::dim(
                "layer_norm",
                format!("gamma {:?} / beta {:?} must be [{c}] (input axis 1)", gamma.shape(), beta.shape()),
            ));
        }
        let p: usize = self.shape()[2..].iter().product();
        let xd = self.shared_data();
        let (gd, bd) = (gamma.shared_data(), beta.shared_data());
        let eps = T::of(eps);
        let inv_c = T::of(1.0 / c as f64);
        // normalized activations and per-position inverse std, kept for backward
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); n * p];
        let mut out = vec![T::zero(); xd.len()];
        let mut mean = vec![T::zero(); p];
        let mut var = vec![T::zero(); p];
        for i in 0..n {
            let base = i * c * p;
            mean.iter_mut().for_each(|v| *v = T::zero());
            var.iter_mut().for_each(|v| *v = T::zero());
            for ch in 0..c {
                let row = &xd[base + ch * p..][..p];
                mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m *= inv_c);
            for ch in 0..c {
                let row = &xd[base + ch * p..][..p];
                for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(row) {
                    let d = v - m;
                    *s += d * d;
                }
            }
            let r = &mut rstd[i * p..][..p];
            for (rv, &s) in r.iter_mut().zip(&var) {
                *rv = T::one() / (s * inv_c + eps).sqrt();
            }
            for ch in 0..c {
                let off = base + ch * p;
                for j in 0..p {
                    let xh = (xd[off + j] - mean[j]) * r[j];
                    xhat[off + j] = xh;
                    out[off + j] = xh * gd[ch] + bd[ch];
                }
            }
        }
        let shape = self.shape().to_vec();
        Ok(Tensor::from_op(
            "layer_norm",
            out,
            shape,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, wants| {
                let gg = wants[1].then(|| {
                    let mut gg = vec![T::zero(); c];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * p;
                            gg[ch] += g[off..off + p].iter().zip(&xhat[off..off + p]).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                    gg
                });
                let gb = wants[2].then(|| {
                    let mut gb = vec![T::zero(); c];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * p;
                            gb[ch] += g[off..off + p].iter().copied().sum::<T>();
                        }
                    }
                    gb
                });
                let gx = wants[0].then(|| {
                    // dx = rstd * (dxh - mean(dxh) - xhat * mean(dxh * xhat)), dxh = g * gamma
                    let mut gx = vec![T::zero(); n * c * p];
                    let mut m1 = vec![T::zero(); p];
                    let mut m2 = vec![T::zero(); p];
                    for i in 0..n {
                        m1.iter_mut().for_each(|v| *v = T::zero());
                        m2.iter_mut().for_each(|v| *v = T::zero());
                        for ch in 0..c {
                            let off = (i * c + ch) * p;
                            for j in 0..p {
                                let d = g[off + j] * gd[ch];
                                m1[j] += d;
                                m2[j] += d * xhat[off + j];
                            }
                        }
                        let r = &rstd[i * p..][..p];
                        for ch in 0..c {
                            let off = (i * c + ch) * p;
                            for j in 0..p {
                                let d = g[off + j] * gd[ch];
                                gx[off + j] = r[j] * (d - m1[j] * inv_c - xhat[off + j] * m2[j] * inv_c);
                            }
                        }
                    }
                    gx
                });
                vec![gx, gg, gb]
            },
        ))
    }
}

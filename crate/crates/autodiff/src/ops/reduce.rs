use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Splits `shape` around `axis` into (outer, extent, inner) counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tensor<T> {
    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![s], vec![1], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Sums out `axis`, removing it (a 1-d input yields shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(TensorError::dim(
                "sum_axis",
                format!("axis {axis} out of range for shape {:?}", self.shape()),
            ));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(&x[base..base + inner]) {
                    *d += v;
                }
            }
        }
        let mut shape: Vec<usize> = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op("sum_axis", out, shape, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let len = *self.shape().get(axis).ok_or_else(|| {
            TensorError::dim("mean_axis", format!("axis {axis} out of range for {:?}", self.shape()))
        })?;
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    /// Global average over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn reduce_mean_pool(&self) -> Result<Tensor<T>> {
        let &[n, c, h, w] = self.shape() else {
            return Err(TensorError::dim(
                "reduce_mean_pool",
                format!("expected [N, C, H, W], got {:?}", self.shape()),
            ));
        };
        let hw = h * w;
        let inv = T::of(1.0 / hw as f64);
        let out: Vec<T> = self
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(Tensor::from_op("reduce_mean_pool", out, vec![n, c], vec![self.clone()], move |g, _| {
            let mut gx = Vec::with_capacity(n * c * hw);
            for &gi in g {
                gx.extend(std::iter::repeat_n(gi * inv, hw));
            }
            vec![Some(gx)]
        }))
    }
}

use crate::error::{Result, TensorError};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::Tensor;

impl<T: Real> Tensor<T> {
    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (&[m, k], &[k2, n]) = (self.shape(), other.shape()) else {
            return Err(TensorError::dim(
                "matmul",
                format!("expected 2-d operands, got {:?} and {:?}", self.shape(), other.shape()),
            ));
        };
        if k != k2 {
            return Err(TensorError::dim(
                "matmul",
                format!("lhs axis 1 ({k}) != rhs axis 0 ({k2})"),
            ));
        }
        let (a, b) = (self.shared_data(), other.shared_data());
        let mut out = vec![T::zero(); m * n];
        gemm(MatRef::new(&a, m, k, false), MatRef::new(&b, k, n, false), T::zero(), &mut out);
        Ok(Tensor::from_op("matmul", out, vec![m, n], vec![self.clone(), other.clone()], move |g, wants| {
            let ga = wants[0].then(|| {
                let mut ga = vec![T::zero(); m * k];
                gemm(MatRef::new(g, m, n, false), MatRef::new(&b, k, n, true), T::zero(), &mut ga);
                ga
            });
            let gb = wants[1].then(|| {
                let mut gb = vec![T::zero(); k * n];
                gemm(MatRef::new(&a, m, k, true), MatRef::new(g, m, n, false), T::zero(), &mut gb);
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Affine map over the last axis: `x [B, in] . w^T [in, out] + bias [out]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (&[batch, fin], &[fout, fin2]) = (self.shape(), weight.shape()) else {
            return Err(TensorError::dim(
                "linear",
                format!("expected x [B, in] and w [out, in], got {:?} and {:?}", self.shape(), weight.shape()),
            ));
        };
        if fin != fin2 {
            return Err(TensorError::dim(
                "linear",
                format!("input features {fin} != weight axis 1 ({fin2})"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [fout] {
                return Err(TensorError::dim(
                    "linear",
                    format!("bias shape {:?} != [{fout}]", b.shape()),
                ));
            }
        }
        let (x, w) = (self.shared_data(), weight.shared_data());
        let mut out = vec![T::zero(); batch * fout];
        if let Some(b) = bias {
            for row in out.chunks_exact_mut(fout) {
                row.copy_from_slice(b.data());
            }
        }
        gemm(MatRef::new(&x, batch, fin, false), MatRef::new(&w, fout, fin, true), T::one(), &mut out);
        let mut inputs = vec![self.clone(), weight.clone()];
        inputs.extend(bias.cloned());
        let has_bias = bias.is_some();
        Ok(Tensor::from_op("linear", out, vec![batch, fout], inputs, move |g, wants| {
            let gx = wants[0].then(|| {
                let mut gx = vec![T::zero(); batch * fin];
                gemm(MatRef::new(g, batch, fout, false), MatRef::new(&w, fout, fin, false), T::zero(), &mut gx);
                gx
            });
            let gw = wants[1].then(|| {
                let mut gw = vec![T::zero(); fout * fin];
                gemm(MatRef::new(g, batch, fout, true), MatRef::new(&x, batch, fin, false), T::zero(), &mut gw);
                gw
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(wants[2].then(|| {
                    let mut gb = vec![T::zero(); fout];
                    for row in g.chunks_exact(fout) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    gb
                }));
            }
            grads
        }))
    }
}

use std::sync::Arc;

use crate::real::Real;
use crate::tensor::Tensor;

fn last_axis<T: Real>(t: &Tensor<T>) -> usize {
    *t.shape().last().expect("tensor has at least one axis")
}

impl<T: Real> Tensor<T> {
    /// Softmax over the last axis.
    pub fn softmax(&self) -> Tensor<T> {
        let k = last_axis(self);
        let mut out = self.to_vec();
        for row in out.chunks_exact_mut(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Arc::new(out);
        let y = Arc::clone(&out);
        Tensor::from_op("softmax", out, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for ((gr, yr), dst) in g.chunks_exact(k).zip(y.chunks_exact(k)).zip(gx.chunks_exact_mut(k)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yi * (gi - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Tensor<T> {
        let k = last_axis(self);
        let mut out = self.to_vec();
        for row in out.chunks_exact_mut(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Arc::new(out);
        let y = Arc::clone(&out);
        Tensor::from_op("log_softmax", out, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for ((gr, yr), dst) in g.chunks_exact(k).zip(y.chunks_exact(k)).zip(gx.chunks_exact_mut(k)) {
                let s: T = gr.iter().copied().sum();
                for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = gi - yi.exp() * s;
                }
            }
            vec![Some(gx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_one() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, -1.0, 0.0, 1000.0], &[2, 3]).unwrap();
        let y = x.softmax();
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let l = x.log_softmax();
        for (a, b) in l.data().iter().zip(y.data()) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
    }
}

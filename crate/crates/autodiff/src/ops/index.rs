//! Shape changes and pure re-indexing (no arithmetic).

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::ops::reduce::split_axis;
use crate::real::Real;
use crate::tensor::{numel_of, Tensor};

impl<T: Real> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() || shape.contains(&0) {
            return Err(TensorError::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op("reshape", self.shared_data(), shape.to_vec(), vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        }))
    }

    /// `out[i] = self[indices[i]]`; the backward pass scatter-adds.
    ///
    /// A bijective index list makes this a pure permutation.
    pub fn gather(&self, indices: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(out_shape) != indices.len() {
            return Err(TensorError::dim(
                "gather",
                format!("{} indices for output shape {out_shape:?}", indices.len()),
            ));
        }
        let n = self.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::dim("gather", format!("index {bad} out of range for {n} elements")));
        }
        let x = self.data();
        let out: Vec<T> = indices.iter().map(|&i| x[i]).collect();
        Ok(Tensor::from_op("gather", out, out_shape.to_vec(), vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); n];
            for (&i, &gi) in indices.iter().zip(g) {
                gx[i] += gi;
            }
            vec![Some(gx)]
        }))
    }

    /// Reorders axes: output axis `k` is input axis `axes[k]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::dim(
                "permute",
                format!("{axes:?} is not a permutation of the {nd} axes of {:?}", self.shape()),
            ));
        }
        let shape = self.shape();
        let mut in_strides = vec![1usize; nd];
        for i in (0..nd.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.numel();
        let mut idx = Vec::with_capacity(n);
        let mut counter = vec![0usize; nd];
        let mut off = 0usize;
        for _ in 0..n {
            idx.push(off);
            for ax in (0..nd).rev() {
                counter[ax] += 1;
                off += strides[ax];
                if counter[ax] < out_shape[ax] {
                    break;
                }
                off -= strides[ax] * counter[ax];
                counter[ax] = 0;
            }
        }
        self.gather(Arc::new(idx), &out_shape)
    }

    /// Transpose of a 2-d tensor.
    pub fn t(&self) -> Result<Tensor<T>> {
        if self.ndim() != 2 {
            return Err(TensorError::dim("t", format!("expected 2-d, got {:?}", self.shape())));
        }
        self.permute(&[1, 0])
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::contract("concat", "no tensors to join"))?;
        let nd = first.ndim();
        if axis >= nd {
            return Err(TensorError::dim("concat", format!("axis {axis} out of range for {:?}", first.shape())));
        }
        for (i, p) in parts.iter().enumerate() {
            let ok = p.ndim() == nd
                && p.shape().iter().zip(first.shape()).enumerate().all(|(ax, (a, b))| ax == axis || a == b);
            if !ok {
                return Err(TensorError::dim(
                    "concat",
                    format!("part {i} has shape {:?}, incompatible with {:?} outside axis {axis}", p.shape(), first.shape()),
                ));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op("concat", out, shape, parts.to_vec(), move |g, wants| {
            let mut grads: Vec<Option<Vec<T>>> = wants
                .iter()
                .zip(&lens)
                .map(|(&w, &len)| w.then(|| Vec::with_capacity(outer * len * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gr, &len) in grads.iter_mut().zip(&lens) {
                    if let Some(gr) = gr {
                        gr.extend_from_slice(&g[off..off + len * inner]);
                    }
                    off += len * inner;
                }
            }
            grads
        }))
    }

    /// The slice `start..start + len` of `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() || len == 0 || start + len > self.shape()[axis] {
            return Err(TensorError::dim(
                "narrow",
                format!("range {start}..{} invalid for axis {axis} of {:?}", start + len, self.shape()),
            ));
        }
        let (outer, full, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op("narrow", out, shape, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); n];
            for o in 0..outer {
                gx[(o * full + start) * inner..(o * full + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Interleaves channel groups of `[N, C, ...]`: view C as
    /// `(groups, C/groups)`, swap the two, flatten. `channel_shuffle(C/groups)`
    /// undoes `channel_shuffle(groups)`.
    pub fn channel_shuffle(&self, groups: usize) -> Result<Tensor<T>> {
        if self.ndim() < 2 {
            return Err(TensorError::dim("channel_shuffle", format!("input must be [N, C, ...], got {:?}", self.shape())));
        }
        let (n, c) = (self.shape()[0], self.shape()[1]);
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::dim(
                "channel_shuffle",
                format!("channels (axis 1) {c} not divisible by groups {groups}"),
            ));
        }
        let per = c / groups;
        let p: usize = self.shape()[2..].iter().product();
        let mut idx = Vec::with_capacity(self.numel());
        for i in 0..n {
            for out_c in 0..c {
                // out channel j*groups + g  <-  in channel g*per + j
                let (j, g) = (out_c / groups, out_c % groups);
                let src = (i * c + g * per + j) * p;
                idx.extend(src..src + p);
            }
        }
        self.gather(Arc::new(idx), self.shape())
    }

    /// Picks one entry per row of a `[B, K]` tensor: `out[b] = self[b, picks[b]]`.
    pub fn select_rows(&self, picks: &[usize]) -> Result<Tensor<T>> {
        let &[b, k] = self.shape() else {
            return Err(TensorError::dim("select_rows", format!("expected [B, K], got {:?}", self.shape())));
        };
        if picks.len() != b || picks.iter().any(|&p| p >= k) {
            return Err(TensorError::dim("select_rows", format!("{} picks for {b} rows of width {k}", picks.len())));
        }
        let idx: Vec<usize> = picks.iter().enumerate().map(|(row, &p)| row * k + p).collect();
        self.gather(Arc::new(idx), &[b])
    }
}

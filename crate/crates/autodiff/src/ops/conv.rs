//! 2-d cross-correlation and per-position channel mixing.

use crate::error::{Result, TensorError};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::Tensor;

/// Stride, zero padding and channel grouping of a [`Tensor::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    /// Output extent along one axis.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    groups: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.groups == self.cout
    }

    fn is_plain_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    /// Range of output columns whose input column `ow*sw + kj - pw` is in bounds.
    #[inline]
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let lo = if self.pw > kj { (self.pw - kj).div_ceil(self.sw) } else { 0 };
        // largest ow with ow*sw + kj - pw <= w - 1
        let top = self.w + self.pw;
        let hi = if top > kj { ((top - kj - 1) / self.sw + 1).min(self.wo) } else { 0 };
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oh: usize, ki: usize) -> Option<usize> {
        let r = oh * self.sh + ki;
        (r >= self.ph && r - self.ph < self.h).then(|| r - self.ph)
    }
}

fn im2col<T: Real>(geo: &Geometry, x: &[T], n: usize, g: usize, cols: &mut [T]) {
    let p = geo.ho * geo.wo;
    cols.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..geo.cin_g() {
        let plane = &x[((n * geo.cin) + g * geo.cin_g() + c) * geo.h * geo.w..][..geo.h * geo.w];
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let row = &mut cols[((c * geo.kh + ki) * geo.kw + kj) * p..][..p];
                let (lo, hi) = geo.col_range(kj);
                for oh in 0..geo.ho {
                    let Some(ih) = geo.in_row(oh, ki) else { continue };
                    for ow in lo..hi {
                        row[oh * geo.wo + ow] = plane[ih * geo.w + ow * geo.sw + kj - geo.pw];
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(geo: &Geometry, cols: &[T], n: usize, g: usize, gx: &mut [T]) {
    let p = geo.ho * geo.wo;
    for c in 0..geo.cin_g() {
        let plane = &mut gx[((n * geo.cin) + g * geo.cin_g() + c) * geo.h * geo.w..][..geo.h * geo.w];
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let row = &cols[((c * geo.kh + ki) * geo.kw + kj) * p..][..p];
                let (lo, hi) = geo.col_range(kj);
                for oh in 0..geo.ho {
                    let Some(ih) = geo.in_row(oh, ki) else { continue };
                    for ow in lo..hi {
                        plane[ih * geo.w + ow * geo.sw + kj - geo.pw] += row[oh * geo.wo + ow];
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Real>(geo: &Geometry, x: &[T], k: &[T], out: &mut [T]) {
    let (hw, ohw, kk) = (geo.h * geo.w, geo.ho * geo.wo, geo.kh * geo.kw);
    for n in 0..geo.n {
        for c in 0..geo.cin {
            let plane = &x[(n * geo.cin + c) * hw..][..hw];
            let dst = &mut out[(n * geo.cout + c) * ohw..][..ohw];
            let kern = &k[c * kk..][..kk];
            for oh in 0..geo.ho {
                let drow = &mut dst[oh * geo.wo..][..geo.wo];
                for ki in 0..geo.kh {
                    let Some(ih) = geo.in_row(oh, ki) else { continue };
                    let srow = &plane[ih * geo.w..][..geo.w];
                    for kj in 0..geo.kw {
                        let wv = kern[ki * geo.kw + kj];
                        let (lo, hi) = geo.col_range(kj);
                        if geo.sw == 1 {
                            let off = kj as isize - geo.pw as isize;
                            let src = &srow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                            for (d, &s) in drow[lo..hi].iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        } else {
                            for ow in lo..hi {
                                drow[ow] += wv * srow[ow * geo.sw + kj - geo.pw];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Real>(
    geo: &Geometry,
    x: &[T],
    k: &[T],
    g: &[T],
    gx: Option<&mut Vec<T>>,
    gk: Option<&mut Vec<T>>,
) {
    let (hw, ohw, kk) = (geo.h * geo.w, geo.ho * geo.wo, geo.kh * geo.kw);
    let mut gx = gx;
    let mut gk = gk;
    for n in 0..geo.n {
        for c in 0..geo.cin {
            let plane = &x[(n * geo.cin + c) * hw..][..hw];
            let gplane = &g[(n * geo.cout + c) * ohw..][..ohw];
            for oh in 0..geo.ho {
                let grow = &gplane[oh * geo.wo..][..geo.wo];
                for ki in 0..geo.kh {
                    let Some(ih) = geo.in_row(oh, ki) else { continue };
                    for kj in 0..geo.kw {
                        let (lo, hi) = geo.col_range(kj);
                        let kidx = c * kk + ki * geo.kw + kj;
                        if let Some(gx) = gx.as_deref_mut() {
                            let wv = k[kidx];
                            let gxrow = &mut gx[(n * geo.cin + c) * hw + ih * geo.w..][..geo.w];
                            for ow in lo..hi {
                                gxrow[ow * geo.sw + kj - geo.pw] += wv * grow[ow];
                            }
                        }
                        if let Some(gk) = gk.as_deref_mut() {
                            let srow = &plane[ih * geo.w..][..geo.w];
                            let mut acc = T::zero();
                            for ow in lo..hi {
                                acc += srow[ow * geo.sw + kj - geo.pw] * grow[ow];
                            }
                            gk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
}

fn grouped_forward<T: Real>(geo: &Geometry, x: &[T], k: &[T], out: &mut [T]) {
    let p = geo.ho * geo.wo;
    let ck = geo.cin_g() * geo.kh * geo.kw;
    let mut cols = if geo.is_plain_pointwise() { Vec::new() } else { vec![T::zero(); ck * p] };
    for n in 0..geo.n {
        for g in 0..geo.groups {
            let kg = &k[g * geo.cout_g() * ck..][..geo.cout_g() * ck];
            let src: &[T] = if geo.is_plain_pointwise() {
                &x[(n * geo.cin + g * geo.cin_g()) * p..][..ck * p]
            } else {
                im2col(geo, x, n, g, &mut cols);
                &cols
            };
            let dst = &mut out[(n * geo.cout + g * geo.cout_g()) * p..][..geo.cout_g() * p];
            gemm(MatRef::new(kg, geo.cout_g(), ck, false), MatRef::new(src, ck, p, false), T::one(), dst);
        }
    }
}

fn grouped_backward<T: Real>(
    geo: &Geometry,
    x: &[T],
    k: &[T],
    g: &[T],
    mut gx: Option<&mut Vec<T>>,
    mut gk: Option<&mut Vec<T>>,
) {
    let p = geo.ho * geo.wo;
    let ck = geo.cin_g() * geo.kh * geo.kw;
    let plain = geo.is_plain_pointwise();
    let mut cols = vec![T::zero(); if plain { 0 } else { ck * p }];
    let mut gcols = vec![T::zero(); if plain { 0 } else { ck * p }];
    for n in 0..geo.n {
        for grp in 0..geo.groups {
            let gout = &g[(n * geo.cout + grp * geo.cout_g()) * p..][..geo.cout_g() * p];
            if let Some(gk) = gk.as_deref_mut() {
                let src: &[T] = if plain {
                    &x[(n * geo.cin + grp * geo.cin_g()) * p..][..ck * p]
                } else {
                    im2col(geo, x, n, grp, &mut cols);
                    &cols
                };
                let dst = &mut gk[grp * geo.cout_g() * ck..][..geo.cout_g() * ck];
                gemm(MatRef::new(gout, geo.cout_g(), p, false), MatRef::new(src, ck, p, true), T::one(), dst);
            }
            if let Some(gx) = gx.as_deref_mut() {
                let kg = &k[grp * geo.cout_g() * ck..][..geo.cout_g() * ck];
                if plain {
                    let dst = &mut gx[(n * geo.cin + grp * geo.cin_g()) * p..][..ck * p];
                    gemm(MatRef::new(kg, geo.cout_g(), ck, true), MatRef::new(gout, geo.cout_g(), p, false), T::one(), dst);
                } else {
                    gemm(MatRef::new(kg, geo.cout_g(), ck, true), MatRef::new(gout, geo.cout_g(), p, false), T::zero(), &mut gcols);
                    col2im(geo, &gcols, n, grp, gx);
                }
            }
        }
    }
}

impl<T: Real> Tensor<T> {
    /// Cross-correlation of `[N, C_in, H, W]` with `[C_out, C_in/groups, kh, kw]`.
    ///
    /// `groups == C_in == C_out` is a depthwise convolution; a 1x1 kernel with
    /// one group is a pointwise convolution.
    pub fn conv2d(&self, kernel: &Tensor<T>, bias: Option<&Tensor<T>>, spec: Conv2dSpec) -> Result<Tensor<T>> {
        let &[n, cin, h, w] = self.shape() else {
            return Err(TensorError::dim("conv2d", format!("input must be [N, C, H, W], got {:?}", self.shape())));
        };
        let &[cout, cin_g, kh, kw] = kernel.shape() else {
            return Err(TensorError::dim("conv2d", format!("kernel must be [C_out, C_in/groups, kh, kw], got {:?}", kernel.shape())));
        };
        let groups = spec.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(TensorError::dim(
                "conv2d",
                format!("input channels (axis 1) {cin} and output channels (kernel axis 0) {cout} must be divisible by groups {groups}"),
            ));
        }
        if cin / groups != cin_g {
            return Err(TensorError::dim(
                "conv2d",
                format!("kernel axis 1 is {cin_g}, expected C_in/groups = {}", cin / groups),
            ));
        }
        let (sh, sw) = spec.stride;
        let (ph, pw) = spec.padding;
        let ho = Conv2dSpec::out_extent(h, kh, sh, ph);
        let wo = Conv2dSpec::out_extent(w, kw, sw, pw);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(TensorError::dim(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (axes 2, 3)"),
            ));
        };
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(TensorError::dim("conv2d", format!("bias shape {:?} != [{cout}]", b.shape())));
            }
        }
        let geo = Geometry { n, cin, h, w, cout, kh, kw, ho, wo, sh, sw, ph, pw, groups };
        let (xd, kd) = (self.shared_data(), kernel.shared_data());
        let ohw = ho * wo;
        let mut out = vec![T::zero(); n * cout * ohw];
        if let Some(b) = bias {
            for (i, plane) in out.chunks_exact_mut(ohw).enumerate() {
                plane.iter_mut().for_each(|v| *v = b.data()[i % cout]);
            }
        }
        if geo.is_depthwise() && !geo.is_plain_pointwise() {
            depthwise_forward(&geo, &xd, &kd, &mut out);
        } else {
            grouped_forward(&geo, &xd, &kd, &mut out);
        }
        let mut inputs = vec![self.clone(), kernel.clone()];
        inputs.extend(bias.cloned());
        let has_bias = bias.is_some();
        let (nx, nk) = (self.numel(), kernel.numel());
        Ok(Tensor::from_op("conv2d", out, vec![n, cout, ho, wo], inputs, move |g, wants| {
            let mut gx = wants[0].then(|| vec![T::zero(); nx]);
            let mut gk = wants[1].then(|| vec![T::zero(); nk]);
            if geo.is_depthwise() && !geo.is_plain_pointwise() {
                depthwise_backward(&geo, &xd, &kd, g, gx.as_mut(), gk.as_mut());
            } else {
                grouped_backward(&geo, &xd, &kd, g, gx.as_mut(), gk.as_mut());
            }
            let mut grads = vec![gx, gk];
            if has_bias {
                grads.push(wants[2].then(|| {
                    let mut gb = vec![T::zero(); cout];
                    for (i, plane) in g.chunks_exact(ohw).enumerate() {
                        gb[i % cout] += plane.iter().copied().sum::<T>();
                    }
                    gb
                }));
            }
            grads
        }))
    }

    /// Channel mixing at every position: `[N, C, ...] -> [N, O, ...]` with
    /// weight `[O, C]`. Works for sequences `[N, C, L]` and maps alike.
    pub fn pointwise(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if self.ndim() < 2 {
            return Err(TensorError::dim("pointwise", format!("input must be [N, C, ...], got {:?}", self.shape())));
        }
        let (n, c) = (self.shape()[0], self.shape()[1]);
        let &[o, c2] = weight.shape() else {
            return Err(TensorError::dim("pointwise", format!("weight must be [O, C], got {:?}", weight.shape())));
        };
        if c != c2 {
            return Err(TensorError::dim("pointwise", format!("input channels (axis 1) {c} != weight axis 1 ({c2})")));
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(TensorError::dim("pointwise", format!("bias shape {:?} != [{o}]", b.shape())));
            }
        }
        let p: usize = self.shape()[2..].iter().product();
        let (xd, wd) = (self.shared_data(), weight.shared_data());
        let mut out = vec![T::zero(); n * o * p];
        if let Some(b) = bias {
            for (i, plane) in out.chunks_exact_mut(p).enumerate() {
                plane.iter_mut().for_each(|v| *v = b.data()[i % o]);
            }
        }
        for i in 0..n {
            gemm(
                MatRef::new(&wd, o, c, false),
                MatRef::new(&xd[i * c * p..][..c * p], c, p, false),
                T::one(),
                &mut out[i * o * p..][..o * p],
            );
        }
        let mut shape = self.shape().to_vec();
        shape[1] = o;
        let mut inputs = vec![self.clone(), weight.clone()];
        inputs.extend(bias.cloned());
        let has_bias = bias.is_some();
        Ok(Tensor::from_op("pointwise", out, shape, inputs, move |g, wants| {
            let gx = wants[0].then(|| {
                let mut gx = vec![T::zero(); n * c * p];
                for i in 0..n {
                    gemm(
                        MatRef::new(&wd, o, c, true),
                        MatRef::new(&g[i * o * p..][..o * p], o, p, false),
                        T::zero(),
                        &mut gx[i * c * p..][..c * p],
                    );
                }
                gx
            });
            let gw = wants[1].then(|| {
                let mut gw = vec![T::zero(); o * c];
                for i in 0..n {
                    gemm(
                        MatRef::new(&g[i * o * p..][..o * p], o, p, false),
                        MatRef::new(&xd[i * c * p..][..c * p], c, p, true),
                        T::one(),
                        &mut gw,
                    );
                }
                gw
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(wants[2].then(|| {
                    let mut gb = vec![T::zero(); o];
                    for (i, plane) in g.chunks_exact(p).enumerate() {
                        gb[i % o] += plane.iter().copied().sum::<T>();
                    }
                    gb
                }));
            }
            grads
        }))
    }
}

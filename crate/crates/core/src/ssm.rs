//! Selective state-space scan and the four-direction 2-d block built on it.
//!
//! The recurrence, per channel `d` and state index `s`:
//!
//! ```text
//! h_t = exp(Δ_t · A) ⊙ h_{t-1} + (Δ_t · B_t) u_t        h_0 = 0
//! y_t = C_t · h_t + D ⊙ u_t
//! ```
//!
//! `A = -exp(A_log)` is per channel and state; `Δ`, `B`, `C` depend on the
//! input through positionwise projections. The input matrix uses the
//! first-order discretization `B̄ = Δ·B` instead of the exact zero-order-hold
//! integral `A⁻¹(exp(ΔA) − 1)B`.

use std::sync::Arc;

use edgenav_autodiff::init::{kaiming_uniform, uniform};
use edgenav_autodiff::{Binding, ParamStore, Real, Tensor, TensorError};
use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Census, Conv, Norm, Pointwise};

/// Zero-order-hold state matrix and first-order input matrix:
/// `A_bar = exp(Δ·A)`, `B_bar = Δ·B`. Operands broadcast.
pub fn discretize<T: Real>(a: &Tensor<T>, b: &Tensor<T>, delta: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let a_bar = delta.mul(a)?.exp();
    let b_bar = delta.mul(b)?;
    Ok((a_bar, b_bar))
}

fn nsl_to_nls<T: Copy>(x: &[T], n: usize, s: usize, l: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for ni in 0..n {
        let base = ni * s * l;
        for t in 0..l {
            out.extend((0..s).map(|k| x[base + k * l + t]));
        }
    }
    out
}

fn nls_to_nsl<T: Copy>(x: &[T], n: usize, s: usize, l: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for ni in 0..n {
        let base = ni * s * l;
        for k in 0..s {
            out.extend((0..l).map(|t| x[base + t * s + k]));
        }
    }
    out
}

/// The sequential scan as one differentiable op.
///
/// Shapes: `u`, `delta` `[N, D, L]`; `a` `[D, S]` (already negative);
/// `b`, `c` `[N, S, L]`; `d_skip` `[D]`. Backward recomputes the hidden
/// states one `(n, d)` row at a time instead of storing them.
pub fn scan_recurrence<T: Real>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<Tensor<T>> {
    let &[_, _, l] = u.shape() else {
        return Err(TensorError::dim("selective_scan", format!("u must be [N, D, L], got {:?}", u.shape())).into());
    };
    scan_kernel("selective_scan", u, delta, a, b, c, d_skip, vec![(0..l).collect()])
}

/// Four-direction scan over maps with the merge folded in.
///
/// Same operands as [`scan_recurrence`] with `L` replaced by `H, W`.
/// Equal to [`scan_expand`] of every operand, a [`scan_recurrence`] per
/// direction and [`scan_merge`]; because the decay `exp(Δ·A)` and the input
/// term `Δ·B·u` only depend on the position, they are computed once for all
/// four directions.
pub fn scan_four_way<T: Real>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<Tensor<T>> {
    let &[_, _, h, w] = u.shape() else {
        return Err(TensorError::dim("scan_four_way", format!("u must be [N, D, H, W], got {:?}", u.shape())).into());
    };
    let orders = Direction::ALL.iter().map(|d| d.order(h, w)).collect();
    scan_kernel("scan_four_way", u, delta, a, b, c, d_skip, orders)
}

/// Runs one recurrence per entry of `orders` (each a visiting order of the
/// `L` trailing positions) and sums their outputs in place.
#[allow(clippy::too_many_arguments)]
fn scan_kernel<T: Real>(
    op: &'static str,
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
    orders: Vec<Vec<usize>>,
) -> Result<Tensor<T>> {
    let dim = |detail: String| Error::from(TensorError::dim(op, detail));
    let shape = u.shape().to_vec();
    let (n, di) = (shape[0], shape[1]);
    let l: usize = shape[2..].iter().product();
    if delta.shape() != u.shape() {
        return Err(dim(format!("delta {:?} != u {:?}", delta.shape(), u.shape())));
    }
    let &[da, s] = a.shape() else {
        return Err(dim(format!("A must be [D, S], got {:?}", a.shape())));
    };
    if da != di {
        return Err(dim(format!("A axis 0 is {da}, u axis 1 is {di}")));
    }
    let mut bshape = shape.clone();
    bshape[1] = s;
    for (name, m) in [("B", b), ("C", c)] {
        if m.shape() != bshape.as_slice() {
            return Err(dim(format!("{name} must be {bshape:?}, got {:?}", m.shape())));
        }
    }
    if d_skip.shape() != [di] {
        return Err(dim(format!("D must be [{di}], got {:?}", d_skip.shape())));
    }
    if let Some(i) = delta.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::contract(op, format!("non-finite step size at flat index {i}")));
    }

    let (ud, dd, ad, dsk) = (u.shared_data(), delta.shared_data(), a.shared_data(), d_skip.shared_data());
    let bt = Arc::new(nsl_to_nls(b.data(), n, s, l));
    let ct = Arc::new(nsl_to_nls(c.data(), n, s, l));
    let ndir = T::of(orders.len() as f64);

    // Decay and input terms of one (n, d) row, laid out [L, S].
    let fill = move |ni: usize, ch: usize, abar: &mut [T], bu: &mut [T], ud: &[T], dd: &[T], ad: &[T], bt: &[T]| {
        let row = (ni * di + ch) * l;
        let arow = &ad[ch * s..(ch + 1) * s];
        for p in 0..l {
            let dt = dd[row + p];
            let dtu = dt * ud[row + p];
            let bo = (ni * l + p) * s;
            for k in 0..s {
                abar[p * s + k] = (dt * arow[k]).exp();
                bu[p * s + k] = bt[bo + k] * dtu;
            }
        }
    };

    let mut y = vec![T::zero(); n * di * l];
    let mut abar = vec![T::zero(); l * s];
    let mut bu = vec![T::zero(); l * s];
    let mut h = vec![T::zero(); s];
    for ni in 0..n {
        for ch in 0..di {
            fill(ni, ch, &mut abar, &mut bu, &ud, &dd, &ad, &bt);
            let row = (ni * di + ch) * l;
            let yrow = &mut y[row..row + l];
            for (p, v) in yrow.iter_mut().enumerate() {
                *v = ndir * dsk[ch] * ud[row + p];
            }
            for order in &orders {
                h.fill(T::zero());
                for &p in order {
                    let (ab, bp, cp) = (&abar[p * s..][..s], &bu[p * s..][..s], &ct[(ni * l + p) * s..][..s]);
                    let mut acc = T::zero();
                    for k in 0..s {
                        h[k] = ab[k] * h[k] + bp[k];
                        acc += cp[k] * h[k];
                    }
                    yrow[p] += acc;
                }
            }
        }
    }

    let inputs = vec![u.clone(), delta.clone(), a.clone(), b.clone(), c.clone(), d_skip.clone()];
    Ok(Tensor::from_op(op, y, shape, inputs, move |g, wants| {
        let mut gu = vec![T::zero(); n * di * l];
        let mut gdelta = vec![T::zero(); n * di * l];
        let mut ga = vec![T::zero(); di * s];
        let mut gbt = vec![T::zero(); n * l * s];
        let mut gct = vec![T::zero(); n * l * s];
        let mut gd = vec![T::zero(); di];
        let mut abar = vec![T::zero(); l * s];
        let mut bu = vec![T::zero(); l * s];
        let mut hs = vec![T::zero(); l * s];
        let mut carry = vec![T::zero(); s];
        for ni in 0..n {
            for ch in 0..di {
                fill(ni, ch, &mut abar, &mut bu, &ud, &dd, &ad, &bt);
                let row = (ni * di + ch) * l;
                let arow = &ad[ch * s..(ch + 1) * s];
                for p in 0..l {
                    gu[row + p] += ndir * dsk[ch] * g[row + p];
                    gd[ch] += ndir * g[row + p] * ud[row + p];
                }
                for order in &orders {
                    for (t, &p) in order.iter().enumerate() {
                        for k in 0..s {
                            let prev = if t > 0 { hs[(t - 1) * s + k] } else { T::zero() };
                            hs[t * s + k] = abar[p * s + k] * prev + bu[p * s + k];
                        }
                    }
                    carry.fill(T::zero());
                    for (t, &p) in order.iter().enumerate().rev() {
                        let dy = g[row + p];
                        let (dt, ut) = (dd[row + p], ud[row + p]);
                        let bo = (ni * l + p) * s;
                        let mut du = T::zero();
                        let mut gdt = T::zero();
                        for k in 0..s {
                            let dh = dy * ct[bo + k] + carry[k];
                            gct[bo + k] += dy * hs[t * s + k];
                            let prev = if t > 0 { hs[(t - 1) * s + k] } else { T::zero() };
                            let ab = abar[p * s + k];
                            // d(ab * prev) / d(dt * a)
                            let dexp = dh * prev * ab;
                            gdt += dexp * arow[k] + dh * bt[bo + k] * ut;
                            ga[ch * s + k] += dexp * dt;
                            gbt[bo + k] += dh * dt * ut;
                            du += dh * dt * bt[bo + k];
                            carry[k] = ab * dh;
                        }
                        gu[row + p] += du;
                        gdelta[row + p] += gdt;
                    }
                }
            }
        }
        vec![
            wants[0].then_some(gu),
            wants[1].then_some(gdelta),
            wants[2].then_some(ga),
            wants[3].then(|| nls_to_nsl(&gbt, n, s, l)),
            wants[4].then(|| nls_to_nsl(&gct, n, s, l)),
            wants[5].then_some(gd),
        ]
    }))
}

/// The input-dependent parts of one SSM core, bound for a forward pass.
///
/// All four scan directions of a block use the same instance.
#[derive(Clone)]
pub struct SsmParams<T: Real> {
    pub a_log: Tensor<T>,
    pub d_skip: Tensor<T>,
    /// `[R, D]` low-rank input to the step size.
    pub delta_down: Tensor<T>,
    /// `[D, R]`.
    pub delta_up: Tensor<T>,
    pub delta_bias: Tensor<T>,
    /// `[S, D]`.
    pub b_proj: Tensor<T>,
    /// `[S, D]`.
    pub c_proj: Tensor<T>,
}

impl<T: Real> SsmParams<T> {
    pub fn from_binding(p: &Binding<T>, prefix: &str) -> Result<Self> {
        let get = |k: &str| -> Result<Tensor<T>> { Ok(p.get(&format!("{prefix}.{k}"))?.clone()) };
        Ok(SsmParams {
            a_log: get("a_log")?,
            d_skip: get("d_skip")?,
            delta_down: get("delta_down")?,
            delta_up: get("delta_up")?,
            delta_bias: get("delta_bias")?,
            b_proj: get("b_proj")?,
            c_proj: get("c_proj")?,
        })
    }

    pub fn d_inner(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn d_state(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// `A = -exp(A_log)`.
    pub fn a(&self) -> Tensor<T> {
        self.a_log.exp().neg()
    }

    /// Step size, input and output matrices for `u: [N, D, ...]`.
    /// Every projection is positionwise, so the result can be computed on a
    /// 2-d map once and re-indexed per direction.
    pub fn project(&self, u: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let delta = u
            .pointwise(&self.delta_down, None)?
            .pointwise(&self.delta_up, Some(&self.delta_bias))?
            .softplus();
        let b = u.pointwise(&self.b_proj, None)?;
        let c = u.pointwise(&self.c_proj, None)?;
        Ok((delta, b, c))
    }
}

/// Projects `u: [N, D, L]` to `Δ`, `B`, `C` and runs the recurrence.
pub fn selective_scan<T: Real>(u: &Tensor<T>, params: &SsmParams<T>) -> Result<Tensor<T>> {
    let (delta, b, c) = params.project(u)?;
    scan_recurrence(u, &delta, &params.a(), &b, &c, &params.d_skip)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    RowForward,
    RowReverse,
    ColForward,
    ColReverse,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::RowForward,
        Direction::RowReverse,
        Direction::ColForward,
        Direction::ColReverse,
    ];

    /// Row-major position visited at each step of the sequence.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let col: Vec<usize> = (0..w).flat_map(|j| (0..h).map(move |i| i * w + j)).collect();
        match self {
            Direction::RowForward => (0..h * w).collect(),
            Direction::RowReverse => (0..h * w).rev().collect(),
            Direction::ColForward => col,
            Direction::ColReverse => col.into_iter().rev().collect(),
        }
    }
}

/// A feature map flattened four ways, each `[N, D, H·W]`.
#[derive(Clone)]
pub struct DirectionalSequences<T: Real> {
    pub row_forward: Tensor<T>,
    pub row_reverse: Tensor<T>,
    pub col_forward: Tensor<T>,
    pub col_reverse: Tensor<T>,
    pub height: usize,
    pub width: usize,
}

impl<T: Real> DirectionalSequences<T> {
    /// Assembles sequences in [`Direction::ALL`] order.
    pub fn from_parts(seqs: [Tensor<T>; 4], height: usize, width: usize) -> Self {
        let [row_forward, row_reverse, col_forward, col_reverse] = seqs;
        DirectionalSequences {
            row_forward,
            row_reverse,
            col_forward,
            col_reverse,
            height,
            width,
        }
    }

    pub fn get(&self, dir: Direction) -> &Tensor<T> {
        match dir {
            Direction::RowForward => &self.row_forward,
            Direction::RowReverse => &self.row_reverse,
            Direction::ColForward => &self.col_forward,
            Direction::ColReverse => &self.col_reverse,
        }
    }
}

/// Flat gather indices applying a per-plane permutation to `planes` planes.
fn plane_indices(perm: &[usize], planes: usize) -> Arc<Vec<usize>> {
    let l = perm.len();
    Arc::new((0..planes).flat_map(|p| perm.iter().map(move |&i| p * l + i)).collect())
}

/// Flattens `x: [N, D, H, W]` along the four scan directions.
pub fn scan_expand<T: Real>(x: &Tensor<T>) -> Result<DirectionalSequences<T>> {
    let &[n, d, h, w] = x.shape() else {
        return Err(TensorError::dim("scan_expand", format!("expected [N, D, H, W], got {:?}", x.shape())).into());
    };
    let seqs = Direction::ALL.map(|dir| x.gather(plane_indices(&dir.order(h, w), n * d), &[n, d, h * w]));
    let [a, b, c, e] = seqs;
    Ok(DirectionalSequences::from_parts([a?, b?, c?, e?], h, w))
}

/// Un-permutes each directional output to row-major order and sums them.
pub fn scan_merge<T: Real>(ys: &DirectionalSequences<T>) -> Result<Tensor<T>> {
    let shape = ys.row_forward.shape().to_vec();
    let &[n, d, l] = shape.as_slice() else {
        return Err(TensorError::dim("scan_merge", format!("expected [N, D, L], got {shape:?}")).into());
    };
    let (h, w) = (ys.height, ys.width);
    if l != h * w {
        return Err(TensorError::dim("scan_merge", format!("sequence length {l} != {h}x{w}")).into());
    }
    let mut total: Option<Tensor<T>> = None;
    for dir in Direction::ALL {
        let y = ys.get(dir);
        if y.shape() != shape.as_slice() {
            return Err(TensorError::dim("scan_merge", format!("{dir:?} has shape {:?}, expected {shape:?}", y.shape())).into());
        }
        let order = dir.order(h, w);
        let mut inverse = vec![0; l];
        for (t, &pos) in order.iter().enumerate() {
            inverse[pos] = t;
        }
        let aligned = y.gather(plane_indices(&inverse, n * d), &[n, d, h, w])?;
        total = Some(match total {
            None => aligned,
            Some(acc) => acc.add(&aligned)?,
        });
    }
    Ok(total.expect("four directions"))
}

/// Parameters of one SSM core: step-size, input and output projections plus
/// `A_log` and the skip weight.
#[derive(Debug, Clone)]
pub struct SsmCore {
    pub prefix: String,
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
}

impl SsmCore {
    pub fn new(prefix: impl Into<String>, d_inner: usize, d_state: usize) -> Self {
        SsmCore {
            prefix: prefix.into(),
            d_inner,
            d_state,
            dt_rank: d_inner.div_ceil(16),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let (d, s, r) = (self.d_inner, self.d_state, self.dt_rank);
        let name = |k: &str| format!("{}.{k}", self.prefix);
        store.insert(name("delta_down"), &[r, d], kaiming_uniform(rng, d, r * d))?;
        store.insert(name("delta_up"), &[d, r], uniform(rng, (r as f64).powf(-0.5), d * r))?;
        // softplus(bias) spans [1e-3, 1e-1] log-uniformly.
        let bias = (0..d)
            .map(|_| {
                let dt: f64 = rng.gen_range(1e-3f64.ln()..1e-1f64.ln()).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        store.insert(name("delta_bias"), &[d], bias)?;
        store.insert(name("b_proj"), &[s, d], kaiming_uniform(rng, d, s * d))?;
        store.insert(name("c_proj"), &[s, d], kaiming_uniform(rng, d, s * d))?;
        let a_log = (0..d).flat_map(|_| (1..=s).map(|k| (k as f64).ln())).collect();
        store.insert(name("a_log"), &[d, s], a_log)?;
        store.insert(name("d_skip"), &[d], vec![1.0; d])?;
        Ok(())
    }

    /// Multiply-accumulates count 3 per `(t, d, s)` per direction (decay,
    /// input, readout) plus 1 per `(t, d)` for the skip.
    pub fn census(&self, positions: usize, directions: usize) -> Census {
        let (d, s, r) = (self.d_inner, self.d_state, self.dt_rank);
        let params = r * d + d * r + d + 2 * s * d + d * s + d;
        let proj = positions * (r * d + d * r + 2 * s * d);
        let scan = directions * positions * d * (3 * s + 1);
        Census::new(params, (proj + scan) as u64)
    }
}

/// 2-d selective-scan block: expand, row and column depthwise convolutions,
/// four-direction scan through one shared core, merge, normalize, project
/// back, residual.
#[derive(Debug, Clone)]
pub struct LiteSs2d {
    pub channels: usize,
    pub proj_in: Pointwise,
    pub conv_row: Conv,
    pub conv_col: Conv,
    pub core: SsmCore,
    pub norm: Norm,
    pub proj_out: Pointwise,
}

impl LiteSs2d {
    pub fn new(prefix: &str, channels: usize, d_inner: usize, d_state: usize) -> Self {
        LiteSs2d {
            channels,
            proj_in: Pointwise::new(format!("{prefix}.proj_in"), channels, d_inner, true),
            conv_row: Conv::depthwise(format!("{prefix}.conv_row"), d_inner, (1, 3)),
            conv_col: Conv::depthwise(format!("{prefix}.conv_col"), d_inner, (3, 1)),
            core: SsmCore::new(format!("{prefix}.ssm"), d_inner, d_state),
            norm: Norm::new(format!("{prefix}.norm"), d_inner),
            proj_out: Pointwise::new(format!("{prefix}.proj_out"), d_inner, channels, true),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.proj_in.init(store, rng)?;
        self.conv_row.init(store, rng)?;
        self.conv_col.init(store, rng)?;
        self.core.init(store, rng)?;
        self.norm.init(store)?;
        self.proj_out.init(store, rng)
    }

    pub fn forward<T: Real>(&self, p: &Binding<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.proj_in.forward(p, x)?;
        let z = self.conv_row.forward(p, &z)?;
        let z = self.conv_col.forward(p, &z)?.silu();
        let shared = SsmParams::from_binding(p, &self.core.prefix)?;
        let (delta, b, c) = shared.project(&z)?;
        let merged = scan_four_way(&z, &delta, &shared.a(), &b, &c, &shared.d_skip)?;
        let y = self.norm.forward(p, &merged)?;
        Ok(self.proj_out.forward(p, &y)?.add(x)?)
    }

    pub fn census(&self, h: usize, w: usize) -> Census {
        let l = h * w;
        self.proj_in.census(l)
            + self.conv_row.census(h, w)
            + self.conv_col.census(h, w)
            + self.core.census(l, 4)
            + self.norm.census()
            + self.proj_out.census(l)
    }
}

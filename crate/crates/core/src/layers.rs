//! Parameter-owning layer descriptors.
//!
//! A layer is a plain description (names and extents). `init` registers its
//! tensors in a [`ParamStore`]; `forward` reads them back from a [`Binding`].
//! `census` reports parameters and multiply-accumulates for a given spatial
//! extent, which is what the model-level FLOP count is summed from.

use std::ops::{Add, AddAssign};

use edgenav_autodiff::init::{kaiming_uniform, uniform};
use edgenav_autodiff::{Binding, Conv2dSpec, ParamStore, Real, Tensor};
use rand::Rng;

use crate::error::Result;

pub const NORM_EPS: f64 = 1e-5;

/// Parameter and multiply-accumulate totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Census {
    pub params: usize,
    pub macs: u64,
}

impl Census {
    pub fn new(params: usize, macs: u64) -> Self {
        Census { params, macs }
    }

    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

impl Add for Census {
    type Output = Census;

    fn add(self, o: Census) -> Census {
        Census::new(self.params + o.params, self.macs + o.macs)
    }
}

impl AddAssign for Census {
    fn add_assign(&mut self, o: Census) {
        *self = *self + o;
    }
}

/// 2-d convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: (usize, usize),
    pub groups: usize,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: (usize, usize)) -> Self {
        Conv {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride: 1,
            padding: (0, 0),
            groups: 1,
            bias: true,
        }
    }

    /// Same-size depthwise convolution (one filter per channel).
    pub fn depthwise(name: impl Into<String>, c: usize, kernel: (usize, usize)) -> Self {
        Conv {
            padding: (kernel.0 / 2, kernel.1 / 2),
            groups: c,
            ..Conv::new(name, c, c, kernel)
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    fn fan_in(&self) -> usize {
        self.cin / self.groups * self.kernel.0 * self.kernel.1
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let shape = [self.cout, self.cin / self.groups, self.kernel.0, self.kernel.1];
        let n = shape.iter().product();
        store.insert(format!("{}.weight", self.name), &shape, kaiming_uniform(rng, self.fan_in(), n))?;
        if self.bias {
            store.insert(format!("{}.bias", self.name), &[self.cout], vec![0.0; self.cout])?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, p: &Binding<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = p.get(&format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(p.get(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        let spec = Conv2dSpec::default()
            .stride(self.stride)
            .padding(self.padding.0, self.padding.1)
            .groups(self.groups);
        Ok(x.conv2d(w, b, spec)?)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let o = |i, k, p| (i + 2 * p - k) / self.stride + 1;
        (o(h, self.kernel.0, self.padding.0), o(w, self.kernel.1, self.padding.1))
    }

    pub fn census(&self, h: usize, w: usize) -> Census {
        let (oh, ow) = self.out_hw(h, w);
        let params = self.cout * self.fan_in() + if self.bias { self.cout } else { 0 };
        Census::new(params, (self.cout * self.fan_in() * oh * ow) as u64)
    }
}

/// Per-position channel mixing, `[N, cin, ...] -> [N, cout, ...]`.
#[derive(Debug, Clone)]
pub struct Pointwise {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub bias: bool,
}

impl Pointwise {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, bias: bool) -> Self {
        Pointwise {
            name: name.into(),
            cin,
            cout,
            bias,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let w = kaiming_uniform(rng, self.cin, self.cin * self.cout);
        store.insert(format!("{}.weight", self.name), &[self.cout, self.cin], w)?;
        if self.bias {
            store.insert(format!("{}.bias", self.name), &[self.cout], vec![0.0; self.cout])?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, p: &Binding<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = p.get(&format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(p.get(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        Ok(x.pointwise(w, b)?)
    }

    /// `positions` is the number of spatial (or sequence) sites per sample.
    pub fn census(&self, positions: usize) -> Census {
        let params = self.cin * self.cout + if self.bias { self.cout } else { 0 };
        Census::new(params, (self.cin * self.cout * positions) as u64)
    }
}

/// Channel layer normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct Norm {
    pub name: String,
    pub c: usize,
}

impl Norm {
    pub fn new(name: impl Into<String>, c: usize) -> Self {
        Norm { name: name.into(), c }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(format!("{}.gamma", self.name), &[self.c], vec![1.0; self.c])?;
        store.insert(format!("{}.beta", self.name), &[self.c], vec![0.0; self.c])?;
        Ok(())
    }

    pub fn forward<T: Real>(&self, p: &Binding<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = p.get(&format!("{}.gamma", self.name))?;
        let b = p.get(&format!("{}.beta", self.name))?;
        Ok(x.layer_norm_channels(g, b, NORM_EPS)?)
    }

    pub fn census(&self) -> Census {
        Census::new(2 * self.c, 0)
    }
}

/// Dense layer on `[B, fin]` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, fin: usize, fout: usize) -> Self {
        Linear {
            name: name.into(),
            fin,
            fout,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.init_scaled(store, rng, 1.0)
    }

    /// Weights drawn at `gain` times the fan-in bound; bias zero.
    pub fn init_scaled<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R, gain: f64) -> Result<()> {
        let bound = gain / (self.fin as f64).sqrt();
        let w = uniform(rng, bound, self.fin * self.fout);
        store.insert(format!("{}.weight", self.name), &[self.fout, self.fin], w)?;
        store.insert(format!("{}.bias", self.name), &[self.fout], vec![0.0; self.fout])?;
        Ok(())
    }

    pub fn forward<T: Real>(&self, p: &Binding<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = p.get(&format!("{}.weight", self.name))?;
        let b = p.get(&format!("{}.bias", self.name))?;
        Ok(x.linear(w, Some(b))?)
    }

    pub fn census(&self) -> Census {
        Census::new(self.fin * self.fout + self.fout, (self.fin * self.fout) as u64)
    }
}

//! The hierarchical detector: patch embedding, four stages of dual-branch
//! conv/SSM blocks joined by patch merging, and a one-box-per-class head.

use std::sync::Arc;

use edgenav_autodiff::{Binding, ParamStore, Real, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Census, Conv, Linear, Norm, Pointwise};
use crate::ssm::LiteSs2d;

/// Values per class in the head output: confidence logit and four corners.
pub const HEAD_FIELDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depths: [usize; 4],
    pub channels: [usize; 4],
    pub num_classes: usize,
    pub patch_size: usize,
    pub input_size: usize,
    /// Hidden width of the head's pointwise layer.
    pub head_width: usize,
    pub d_state: usize,
}

impl ModelConfig {
    pub fn student() -> Self {
        ModelConfig {
            depths: [2, 2, 4, 2],
            channels: [32, 64, 128, 256],
            num_classes: 3,
            patch_size: 4,
            input_size: 224,
            head_width: 512,
            d_state: 8,
        }
    }

    pub fn teacher() -> Self {
        ModelConfig {
            channels: [64, 128, 256, 512],
            head_width: 768,
            ..ModelConfig::student()
        }
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config(format!("channels must be strictly increasing, got {:?}", self.channels)));
        }
        if self.channels.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::config(format!("each stage must double the width, got {:?}", self.channels)));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % 2 != 0) {
            return Err(Error::config(format!("block width {c} must be even and positive")));
        }
        if self.depths.contains(&0) {
            return Err(Error::config(format!("every stage needs a block, got depths {:?}", self.depths)));
        }
        if self.num_classes == 0 || self.head_width == 0 || self.d_state == 0 || self.patch_size == 0 {
            return Err(Error::config("num_classes, head_width, d_state and patch_size must be positive"));
        }
        let unit = self.patch_size * 8;
        if self.input_size == 0 || !self.input_size.is_multiple_of(unit) {
            return Err(Error::config(format!(
                "input_size {} must be a positive multiple of patch_size*8 = {unit}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Spatial extent at the input of stage `i`.
    pub fn stage_extent(&self, i: usize) -> usize {
        (self.input_size / self.patch_size) >> i
    }
}

/// One decoded prediction in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub confidence: f64,
    /// `(x1, y1, x2, y2)` with `x1 <= x2`, `y1 <= y2`.
    pub bbox: [f64; 4],
}

/// Per-channel image normalization, estimated on the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub conv: Conv,
    pub norm: Norm,
    pub input_size: usize,
}

impl PatchEmbed {
    pub fn forward<T: Real>(&self, p: &Binding<T>, img: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.input_size;
        match img.shape() {
            &[_, 3, h, w] if h == s && w == s => {}
            other => {
                return Err(TensorError::dim("patch_embed", format!("expected [N, 3, {s}, {s}], got {other:?}")).into());
            }
        }
        let x = self.conv.forward(p, img)?;
        self.norm.forward(p, &x)
    }

    pub fn census(&self) -> Census {
        self.conv.census(self.input_size, self.input_size) + self.norm.census()
    }
}

/// Dual-branch block: half the channels through depthwise + pointwise
/// convolutions, half through [`LiteSs2d`], then concatenation and a
/// two-group channel shuffle.
#[derive(Debug, Clone)]
pub struct LiteConvSsmBlock {
    pub channels: usize,
    pub dw: Conv,
    pub pw: Pointwise,
    pub ssm: LiteSs2d,
}

impl LiteConvSsmBlock {
    pub fn new(prefix: &str, channels: usize, d_state: usize) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return Err(Error::config(format!("{prefix}: block width {channels} is odd")));
        }
        let half = channels / 2;
        Ok(LiteConvSsmBlock {
            channels,
            dw: Conv::depthwise(format!("{prefix}.conv.dw"), half, (3, 3)),
            pw: Pointwise::new(format!("{prefix}.conv.pw"), half, half, true),
            ssm: LiteSs2d::new(&format!("{prefix}.ssm"), half, 2 * half, d_state),
        })
    }

    pub fn init<R: rand::Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.dw.init(store, rng)?;
        self.pw.init(store, rng)?;
        self.ssm.init(store, rng)
    }

    /// The conv branch is residual: `x1 + silu(pw(dw(x1)))`.
    pub fn forward<T: Real>(&self, p: &Binding<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let half = self.channels / 2;
        let x1 = x.narrow(1, 0, half)?;
        let x2 = x.narrow(1, half, half)?;
        let local = self.pw.forward(p, &self.dw.forward(p, &x1)?)?.silu().add(&x1)?;
        let global = self.ssm.forward(p, &x2)?;
        Ok(Tensor::concat(&[local, global], 1)?.channel_shuffle(2)?)
    }

    pub fn census(&self, h: usize, w: usize) -> Census {
        self.dw.census(h, w) + self.pw.census(h * w) + self.ssm.census(h, w)
    }
}

/// 2x2 space-to-depth, norm, and a pointwise projection `4C -> 2C`.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub channels: usize,
    pub norm: Norm,
    pub proj: Pointwise,
}

impl PatchMerge {
    pub fn new(prefix: &str, c: usize) -> Self {
        PatchMerge {
            channels: c,
            norm: Norm::new(format!("{prefix}.norm"), 4 * c),
            proj: Pointwise::new(format!("{prefix}.proj"), 4 * c, 2 * c, false),
        }
    }

    pub fn forward<T: Real>(&self, p: &Binding<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x = space_to_depth(x)?;
        let x = self.norm.forward(p, &x)?;
        self.proj.forward(p, &x)
    }

    pub fn census(&self, h: usize, w: usize) -> Census {
        self.norm.census() + self.proj.census(h / 2 * (w / 2))
    }
}

/// `[N, C, H, W] -> [N, 4C, H/2, W/2]`; channel block `q` holds offsets
/// `(0,0), (1,0), (0,1), (1,1)` in that order.
pub fn space_to_depth<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c, h, w] = x.shape() else {
        return Err(TensorError::dim("patch_merge", format!("expected [N, C, H, W], got {:?}", x.shape())).into());
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::dim("patch_merge", format!("spatial dims must be even, got {h}x{w}")).into());
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(x.numel());
    for ni in 0..n {
        for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            for ci in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        idx.push(((ni * c + ci) * h + 2 * i + di) * w + 2 * j + dj);
                    }
                }
            }
        }
    }
    Ok(x.gather(Arc::new(idx), &[n, 4 * c, oh, ow])?)
}

#[derive(Debug, Clone)]
pub struct DetectHead {
    pub num_classes: usize,
    pub dw: Conv,
    pub pw: Pointwise,
    pub fc: Linear,
}

impl DetectHead {
    pub fn new(c: usize, width: usize, num_classes: usize) -> Self {
        DetectHead {
            num_classes,
            dw: Conv::depthwise("head.dw", c, (3, 3)),
            pw: Pointwise::new("head.pw", c, width, true),
            fc: Linear::new("head.fc", width, num_classes * HEAD_FIELDS),
        }
    }

    /// Raw logits `[N, n, 5]`: confidence then `x1, y1, x2, y2`.
    pub fn forward<T: Real>(&self, p: &Binding<T>, feat: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.dw.forward(p, feat)?;
        let x = self.pw.forward(p, &x)?.silu().reduce_mean_pool()?;
        let y = self.fc.forward(p, &x)?;
        Ok(y.reshape(&[feat.shape()[0], self.num_classes, HEAD_FIELDS])?)
    }

    pub fn census(&self, h: usize, w: usize) -> Census {
        self.dw.census(h, w) + self.pw.census(h * w) + self.fc.census()
    }
}

/// Forward results: raw head logits and the end-of-stage-3 feature map.
pub struct ModelOutput<T: Real> {
    pub head: Tensor<T>,
    pub feat: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub norm_stats: NormStats,
    pub embed: PatchEmbed,
    pub stages: Vec<Vec<LiteConvSsmBlock>>,
    pub merges: Vec<PatchMerge>,
    pub head: DetectHead,
}

/// Builds the layer graph and initializes parameters from `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<DetectorModel> {
    let mut model = DetectorModel::skeleton(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = &mut model.store;
    model.embed.conv.init(store, &mut rng)?;
    model.embed.norm.init(store)?;
    for (i, stage) in model.stages.iter().enumerate() {
        for blk in stage {
            blk.init(store, &mut rng)?;
        }
        if let Some(m) = model.merges.get(i) {
            m.norm.init(store)?;
            m.proj.init(store, &mut rng)?;
        }
    }
    model.head.dw.init(store, &mut rng)?;
    model.head.pw.init(store, &mut rng)?;
    model.head.fc.init(store, &mut rng)?;
    Ok(model)
}

impl DetectorModel {
    /// Layer descriptors with an empty parameter store.
    pub fn skeleton(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let embed = PatchEmbed {
            conv: Conv::new("embed.conv", 3, c[0], (cfg.patch_size, cfg.patch_size)).stride(cfg.patch_size),
            norm: Norm::new("embed.norm", c[0]),
            input_size: cfg.input_size,
        };
        let stages = (0..4)
            .map(|i| {
                (0..cfg.depths[i])
                    .map(|j| LiteConvSsmBlock::new(&format!("s{i}.b{j}"), c[i], cfg.d_state))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let merges = (0..3).map(|i| PatchMerge::new(&format!("merge{i}"), c[i])).collect();
        Ok(DetectorModel {
            cfg: cfg.clone(),
            store: ParamStore::new(),
            norm_stats: NormStats::default(),
            embed,
            stages,
            merges,
            head: DetectHead::new(c[3], cfg.head_width, cfg.num_classes),
        })
    }

    pub fn forward<T: Real>(&self, p: &Binding<T>, img: &Tensor<T>) -> Result<ModelOutput<T>> {
        let mut x = self.embed.forward(p, img)?;
        let mut feat = None;
        for (i, stage) in self.stages.iter().enumerate() {
            for blk in stage {
                x = blk.forward(p, &x)?;
            }
            if i == 2 {
                feat = Some(x.clone());
            }
            if let Some(m) = self.merges.get(i) {
                x = m.forward(p, &x)?;
            }
        }
        Ok(ModelOutput {
            head: self.head.forward(p, &x)?,
            feat: feat.expect("three stages precede the head"),
        })
    }

    /// Forward without a graph at precision `T`.
    pub fn infer<T: Real>(&self, img: &Tensor<T>) -> Result<ModelOutput<T>> {
        self.forward(&self.store.bind(false), img)
    }

    /// Channels of the feature tap.
    pub fn feat_channels(&self) -> usize {
        self.cfg.channels[2]
    }

    /// Layer-by-layer totals at the configured input size.
    pub fn census(&self) -> Census {
        let mut total = self.embed.census();
        for (i, stage) in self.stages.iter().enumerate() {
            let e = self.cfg.stage_extent(i);
            for blk in stage {
                total += blk.census(e, e);
            }
            if let Some(m) = self.merges.get(i) {
                total += m.census(e, e);
            }
        }
        let e = self.cfg.stage_extent(3);
        total + self.head.census(e, e)
    }
}

/// Exact parameter count and `2 * MACs` of one forward at the configured
/// input size. MACs cover convolutions, pointwise and linear layers, the
/// step/input/output projections and the scan recurrence; normalization,
/// activations and pooling are not counted.
pub fn count_params_flops(model: &DetectorModel) -> (usize, u64) {
    let c = model.census();
    (c.params, c.flops())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            depths: [1, 1, 1, 1],
            channels: [4, 8, 16, 32],
            num_classes: 3,
            patch_size: 2,
            input_size: 16,
            head_width: 8,
            d_state: 2,
        }
    }

    #[test]
    fn config_invariants() {
        assert!(ModelConfig::student().validate().is_ok());
        assert!(ModelConfig::teacher().validate().is_ok());
        assert!(ModelConfig::student().with_input_size(112).validate().is_err());
        assert!(ModelConfig::student().with_input_size(128).validate().is_ok());
        let mut c = ModelConfig::student();
        c.channels = [32, 64, 64, 128];
        assert!(c.validate().is_err());
        c.channels = [6, 12, 24, 48];
        assert!(c.validate().is_ok());
        c.channels = [5, 10, 20, 40];
        assert!(c.validate().is_err());
    }

    #[test]
    fn forward_shapes() {
        let m = build_model(&small_cfg(), 0).unwrap();
        let img = Tensor::<f64>::zeros(&[2, 3, 16, 16]);
        let out = m.infer(&img).unwrap();
        assert_eq!(out.head.shape(), &[2, 3, 5]);
        assert_eq!(out.feat.shape(), &[2, 16, 2, 2]);
        let bad = Tensor::<f64>::zeros(&[1, 3, 8, 8]);
        let err = m.infer(&bad).err().unwrap();
        assert!(err.to_string().contains("16, 16"), "{err}");
    }

    #[test]
    fn census_matches_store() {
        let m = build_model(&small_cfg(), 0).unwrap();
        assert_eq!(m.census().params, m.store.num_params());
    }

    #[test]
    fn zero_image_embeds_to_zero() {
        let m = build_model(&small_cfg(), 0).unwrap();
        let img = Tensor::<f64>::zeros(&[1, 3, 16, 16]);
        let x = m.embed.forward(&m.store.bind(false), &img).unwrap();
        assert_eq!(x.shape(), &[1, 4, 8, 8]);
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn space_to_depth_layout() {
        let x = Tensor::<f64>::new((0..16).map(f64::from).collect(), &[1, 1, 4, 4]).unwrap();
        let y = space_to_depth(&x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 2, 2]);
        assert_eq!(&y.data()[0..4], &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(&y.data()[4..8], &[4.0, 6.0, 12.0, 14.0]);
        assert_eq!(&y.data()[8..12], &[1.0, 3.0, 9.0, 11.0]);
        assert!(space_to_depth(&Tensor::<f64>::zeros(&[1, 1, 3, 4])).is_err());
    }
}

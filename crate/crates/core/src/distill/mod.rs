//! Detection and distillation losses, decoding, mAP, and the
//! teacher/student training loops.

mod map;
mod train;

use edgenav_autodiff::{Binding, Real, Tensor};
use serde::{Deserialize, Serialize};

pub use map::{average_precision, compute_map};
pub use train::{
    evaluate_map, predict,
    distill_student, strip_adapter, train_teacher, EpochRecord, Plateau, TrainConfig, TrainOutcome, ADAPTER_PREFIX,
};

use crate::detector::{Detection, HEAD_FIELDS};
use crate::error::{Error, Result};
use crate::layers::Pointwise;
use crate::scenegen::Label;

/// Weight of the `1 - IoU` term in the detection loss.
pub const IOU_WEIGHT: f64 = 2.0;
/// Weight of the corner L1 term in the detection loss.
pub const L1_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdConfig {
    pub temperature: f64,
    pub lambda_kd: f64,
    pub lambda_feat: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Thresholds used for the periodic detection dumps.
    pub conf_thresholds: (f64, f64),
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            temperature: 2.0,
            lambda_kd: 1.0,
            lambda_feat: 0.25,
            lr: 1e-4,
            batch_size: 32,
            conf_thresholds: (0.25, 0.45),
        }
    }
}

impl KdConfig {
    /// Same settings with both distillation terms switched off.
    pub fn without_kd(self) -> Self {
        KdConfig {
            lambda_kd: 0.0,
            lambda_feat: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.lambda_kd >= 0.0 && self.lambda_feat >= 0.0) {
            return Err(Error::config("distillation weights must be non-negative"));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::config("lr and batch_size must be positive"));
        }
        Ok(())
    }
}

/// Per-class presence and box of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub present: Vec<bool>,
    pub boxes: Vec<[f64; 4]>,
}

impl GroundTruth {
    pub fn from_labels(labels: &[Label], num_classes: usize) -> Self {
        let mut gt = GroundTruth {
            present: vec![false; num_classes],
            boxes: vec![[0.0; 4]; num_classes],
        };
        for l in labels {
            gt.present[l.class_id] = true;
            gt.boxes[l.class_id] = l.bbox;
        }
        gt
    }
}

fn check_pred<T: Real>(op: &'static str, pred: &Tensor<T>, images: usize) -> Result<usize> {
    let s = pred.shape();
    if s.len() != 3 || s[2] != HEAD_FIELDS || s[0] != images {
        return Err(Error::contract(
            op,
            format!("predictions {s:?} do not match [{images}, n, {HEAD_FIELDS}]"),
        ));
    }
    Ok(s[1])
}

/// Confidence logits `[N, n]`.
pub fn conf_logits<T: Real>(pred: &Tensor<T>) -> Result<Tensor<T>> {
    let s = pred.shape().to_vec();
    check_pred("conf_logits", pred, s[0])?;
    Ok(pred.narrow(2, 0, 1)?.reshape(&[s[0], s[1]])?)
}

/// Ordered predicted corners, each `[N, n, 1]`.
fn corners<T: Real>(pred: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
    let p = pred.narrow(2, 1, 4)?.sigmoid();
    let c = |k| p.narrow(2, k, 1);
    let (a, b, c2, d) = (c(0)?, c(1)?, c(2)?, c(3)?);
    Ok([a.minimum(&c2)?, b.minimum(&d)?, a.maximum(&c2)?, b.maximum(&d)?])
}

/// Classification BCE on every class plus, for present classes,
/// `IOU_WEIGHT * (1 - IoU) + L1_WEIGHT * sum |corner error|`; summed over
/// classes and averaged over the batch.
pub fn det_loss<T: Real>(pred: &Tensor<T>, gts: &[GroundTruth]) -> Result<Tensor<T>> {
    let n = check_pred("det_loss", pred, gts.len())?;
    let batch = gts.len();
    if gts.iter().any(|g| g.present.len() != n || g.boxes.len() != n) {
        return Err(Error::contract("det_loss", format!("ground truth does not cover {n} classes")));
    }
    let presence: Vec<T> = gts.iter().flat_map(|g| g.present.iter().map(|&p| T::of(p as u8 as f64))).collect();
    let presence = Tensor::new(presence, &[batch, n])?;
    let mask = presence.reshape(&[batch, n, 1])?;
    let conf = conf_logits(pred)?;
    let bce = conf.softplus().sub(&conf.mul(&presence)?)?.sum();

    let gt_coord = |k: usize| -> Result<Tensor<T>> {
        let v = gts.iter().flat_map(|g| g.boxes.iter().map(move |b| T::of(b[k]))).collect();
        Ok(Tensor::new(v, &[batch, n, 1])?)
    };
    let g = [gt_coord(0)?, gt_coord(1)?, gt_coord(2)?, gt_coord(3)?];
    let p = corners(pred)?;
    let iw = p[2].minimum(&g[2])?.sub(&p[0].maximum(&g[0])?)?.relu();
    let ih = p[3].minimum(&g[3])?.sub(&p[1].maximum(&g[1])?)?.relu();
    let inter = iw.mul(&ih)?;
    let area_p = p[2].sub(&p[0])?.mul(&p[3].sub(&p[1])?)?;
    let area_g = g[2].sub(&g[0])?.mul(&g[3].sub(&g[1])?)?;
    let union = area_p.add(&area_g)?.sub(&inter)?;
    // Absent classes carry a zero box; keep their union away from zero.
    let union = union.add(&mask.neg().add_scalar(1.0))?;
    let iou = inter.div(&union)?;
    let mut l1 = p[0].sub(&g[0])?.abs();
    for k in 1..4 {
        l1 = l1.add(&p[k].sub(&g[k])?.abs())?;
    }
    let box_term = iou.neg().add_scalar(1.0).scale(IOU_WEIGHT).add(&l1.scale(L1_WEIGHT))?;
    let box_term = box_term.mul(&mask)?.sum();
    Ok(bce.add(&box_term)?.scale(1.0 / batch as f64))
}

/// `T^2 * KL(softmax(teacher / T) || softmax(student / T))`, averaged over
/// rows. The teacher side carries no gradient.
pub fn kd_kl_loss<T: Real>(student: &Tensor<T>, teacher: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    if student.shape() != teacher.shape() || student.ndim() != 2 {
        return Err(Error::contract(
            "kd_kl_loss",
            format!("student {:?} and teacher {:?} must be equal [N, n]", student.shape(), teacher.shape()),
        ));
    }
    let rows = student.shape()[0];
    let t = teacher.detach().scale(1.0 / temperature);
    let log_pt = t.log_softmax();
    let pt = t.softmax();
    let log_ps = student.scale(1.0 / temperature).log_softmax();
    let kl = pt.mul(&log_pt.sub(&log_ps)?)?.sum();
    Ok(kl.scale(temperature * temperature / rows as f64))
}

/// Mean squared error between `adapter(student)` and the teacher map.
pub fn feat_mse_loss<T: Real>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    adapter: &Pointwise,
    p: &Binding<T>,
) -> Result<Tensor<T>> {
    let (s, t) = (student.shape(), teacher.shape());
    if s.len() != 4 || t.len() != 4 || s[0] != t[0] || s[2..] != t[2..] {
        return Err(Error::contract(
            "feat_mse_loss",
            format!("student {s:?} and teacher {t:?} differ in batch or spatial dims"),
        ));
    }
    if adapter.cin != s[1] || adapter.cout != t[1] {
        return Err(Error::contract(
            "feat_mse_loss",
            format!("adapter maps {} -> {}, features have {} -> {}", adapter.cin, adapter.cout, s[1], t[1]),
        ));
    }
    let projected = adapter.forward(p, student)?;
    Ok(projected.sub(&teacher.detach())?.sqr().mean())
}

/// Components of one distillation objective.
pub struct LossParts<T: Real> {
    pub total: Tensor<T>,
    pub det: Tensor<T>,
    pub kd: Tensor<T>,
    pub feat: Tensor<T>,
}

/// `det + lambda_kd * kd + lambda_feat * feat`.
pub fn total_loss<T: Real>(det: Tensor<T>, kd: Tensor<T>, feat: Tensor<T>, cfg: &KdConfig) -> Result<LossParts<T>> {
    let total = det.add(&kd.scale(cfg.lambda_kd))?.add(&feat.scale(cfg.lambda_feat))?;
    Ok(LossParts { total, det, kd, feat })
}

/// Detections with `sigmoid(conf) >= threshold`, one list per image.
pub fn decode<T: Real>(pred: &Tensor<T>, threshold: f64) -> Result<Vec<Vec<Detection>>> {
    let s = pred.shape().to_vec();
    check_pred("decode", pred, s[0])?;
    let sig = |v: T| 1.0 / (1.0 + (-v.to_f64()).exp());
    Ok(pred
        .data()
        .chunks_exact(s[1] * HEAD_FIELDS)
        .map(|img| {
            img.chunks_exact(HEAD_FIELDS)
                .enumerate()
                .filter_map(|(class_id, f)| {
                    let confidence = sig(f[0]);
                    if confidence < threshold {
                        return None;
                    }
                    let [a, b, c, d] = [sig(f[1]), sig(f[2]), sig(f[3]), sig(f[4])];
                    Some(Detection {
                        class_id,
                        confidence,
                        bbox: [a.min(c), b.min(d), a.max(c), b.max(d)],
                    })
                })
                .collect()
        })
        .collect())
}

//! Teacher training and student distillation loops.

use std::path::PathBuf;

use edgenav_autodiff::optim::clip_grad_norm;
use edgenav_autodiff::{Adam, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{compute_map, conf_logits, decode, det_loss, feat_mse_loss, kd_kl_loss, total_loss, GroundTruth, KdConfig};
use crate::detector::{Detection, DetectorModel};
use crate::error::{Error, Result};
use crate::layers::Pointwise;
use crate::scenegen::{batch_tensor, Dataset, LabeledImage};

/// Name prefix of the student-to-teacher feature adapter. It only exists
/// during distillation and is removed from the returned model.
pub const ADAPTER_PREFIX: &str = "kd.adapter";

/// Reduce-on-plateau schedule keyed to a metric that should increase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    #[serde(skip)]
    best: Option<f64>,
    #[serde(skip)]
    bad_epochs: usize,
}

impl Default for Plateau {
    fn default() -> Self {
        Plateau::new(5, 0.5, 1e-6)
    }
}

impl Plateau {
    pub fn new(patience: usize, factor: f64, min_lr: f64) -> Self {
        Plateau {
            patience,
            factor,
            min_lr,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Learning rate to use after an epoch that scored `metric`.
    pub fn step(&mut self, metric: f64, lr: f64) -> f64 {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Random horizontal flips.
    pub flip: bool,
    /// Half-width of the random brightness factor around 1.
    pub jitter: f64,
    /// Global gradient-norm cap.
    pub grad_clip: Option<f64>,
    pub plateau: Plateau,
    /// Per-epoch CSV log, rewritten from the start.
    pub log_csv: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let kd = KdConfig::default();
        TrainConfig {
            epochs: 30,
            lr: kd.lr,
            batch_size: kd.batch_size,
            seed: 0,
            flip: true,
            jitter: 0.1,
            grad_clip: Some(10.0),
            plateau: Plateau::default(),
            log_csv: None,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::config("epochs, batch_size and lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::config(format!("jitter {} outside [0, 1)", self.jitter)));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(rename = "L_det")]
    pub l_det: f64,
    #[serde(rename = "L_KD")]
    pub l_kd: f64,
    #[serde(rename = "L_feat")]
    pub l_feat: f64,
    #[serde(rename = "val_mAP")]
    pub val_map: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation mAP.
    pub model: DetectorModel,
    pub best_map: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Trains `model` on the detection loss alone.
pub fn train_teacher(model: DetectorModel, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(model, None, ds, &KdConfig::default().without_kd(), cfg)
}

/// Trains `student` against the frozen `teacher` with the weights of `kd`.
/// Learning rate and batch size come from `cfg`.
pub fn distill_student(
    student: DetectorModel,
    teacher: &DetectorModel,
    ds: &Dataset,
    kd: &KdConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if teacher.cfg.num_classes != student.cfg.num_classes || teacher.cfg.input_size != student.cfg.input_size {
        return Err(Error::config("teacher and student disagree on classes or input size"));
    }
    run(student, Some(teacher), ds, kd, cfg)
}

/// The model's parameters without the distillation adapter.
pub fn strip_adapter(store: &ParamStore) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for p in store.iter().filter(|p| !p.name.starts_with(ADAPTER_PREFIX)) {
        out.insert(p.name.clone(), &p.shape, p.data().to_vec())?;
    }
    Ok(out)
}

fn augment(img: &LabeledImage, flip: bool, brightness: f64) -> LabeledImage {
    let mut out = if flip { img.flipped() } else { img.clone() };
    if brightness != 1.0 {
        for v in &mut out.pixels {
            *v = (*v as f64 * brightness).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Raw head outputs for `images` in batches, at `f64`.
pub fn predict(model: &DetectorModel, images: &[LabeledImage], threshold: f64) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let x = batch_tensor::<f64>(&refs, &model.norm_stats)?;
        out.extend(decode(&model.infer(&x)?.head, threshold)?);
    }
    Ok(out)
}

/// mAP@0.5 of `model` on `images`, ranking every head output.
pub fn evaluate_map(model: &DetectorModel, images: &[LabeledImage]) -> Result<f64> {
    let preds = predict(model, images, 0.0)?;
    let gts: Vec<_> = images.iter().map(|i| i.labels.clone()).collect();
    Ok(compute_map(&preds, &gts, model.cfg.num_classes, 0.5))
}

fn run(
    mut model: DetectorModel,
    teacher: Option<&DetectorModel>,
    ds: &Dataset,
    kd: &KdConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    kd.validate()?;
    if ds.train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let size = model.cfg.input_size;
    if let Some(img) = ds.train.iter().chain(&ds.val).find(|i| i.size != size) {
        return Err(Error::config(format!("dataset images are {0}x{0}, model expects {size}x{size}", img.size)));
    }
    let teacher = teacher.filter(|_| kd.lambda_kd > 0.0 || kd.lambda_feat > 0.0);
    let n = model.cfg.num_classes;
    let stats = ds.norm_stats();
    model.norm_stats = stats;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut store = std::mem::take(&mut model.store);
    let adapter = match teacher {
        Some(t) if kd.lambda_feat > 0.0 => {
            let a = Pointwise::new(ADAPTER_PREFIX, model.feat_channels(), t.feat_channels(), true);
            a.init(&mut store, &mut rng)?;
            Some(a)
        }
        _ => None,
    };

    let mut log = match &cfg.log_csv {
        Some(path) => Some(csv::Writer::from_path(path).map_err(|e| Error::data(path, e.to_string()))?),
        None => None,
    };
    let mut adam = Adam::new(cfg.lr);
    let mut plateau = cfg.plateau;
    let mut lr = cfg.lr;
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..ds.train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let imgs: Vec<LabeledImage> = chunk
                .iter()
                .map(|&i| {
                    let flip = cfg.flip && rng.gen_bool(0.5);
                    let b = if cfg.jitter > 0.0 { rng.gen_range(1.0 - cfg.jitter..1.0 + cfg.jitter) } else { 1.0 };
                    augment(&ds.train[i], flip, b)
                })
                .collect();
            let refs: Vec<&LabeledImage> = imgs.iter().collect();
            let x = batch_tensor::<f64>(&refs, &stats)?;
            let gts: Vec<GroundTruth> = imgs.iter().map(|i| GroundTruth::from_labels(&i.labels, n)).collect();

            let p = store.bind::<f64>(true);
            let out = model.forward(&p, &x)?;
            let det = det_loss(&out.head, &gts)?;
            let (kd_term, feat_term, frozen) = match teacher {
                Some(t) => {
                    let tb = t.store.bind::<f64>(false);
                    let tx = if t.norm_stats == stats { x.clone() } else { batch_tensor::<f64>(&refs, &t.norm_stats)? };
                    let tout = t.forward(&tb, &tx)?;
                    let kd_term = kd_kl_loss(&conf_logits(&out.head)?, &conf_logits(&tout.head)?, kd.temperature)?;
                    let feat_term = match &adapter {
                        Some(a) => feat_mse_loss(&out.feat, &tout.feat, a, &p)?,
                        None => Tensor::scalar(0.0),
                    };
                    (kd_term, feat_term, Some(tb))
                }
                None => (Tensor::scalar(0.0), Tensor::scalar(0.0), None),
            };
            let parts = total_loss(det, kd_term, feat_term, kd)?;
            let vals = [parts.total.item(), parts.det.item(), parts.kd.item(), parts.feat.item()];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    batch: bi,
                    detail: format!("total {} det {} kd {} feat {}", vals[0], vals[1], vals[2], vals[3]),
                });
            }
            parts.total.backward()?;
            if let Some(tb) = frozen {
                if tb.tensors().iter().any(|t| t.requires_grad() || t.grad().is_some()) {
                    return Err(Error::contract("distill_student", "gradient reached a teacher parameter"));
                }
            }
            let mut grads = p.grads();
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&mut grads, max);
            }
            adam.step(&mut store, &grads)?;
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v * chunk.len() as f64;
            }
        }

        model.store = store;
        let val_map = if ds.val.is_empty() { 0.0 } else { evaluate_map(&model, &ds.val)? };
        store = std::mem::take(&mut model.store);
        let m = ds.train.len() as f64;
        let rec = EpochRecord {
            epoch,
            train_loss: sums[0] / m,
            l_det: sums[1] / m,
            l_kd: sums[2] / m,
            l_feat: sums[3] / m,
            val_map,
            lr,
        };
        if cfg.verbose {
            eprintln!(
                "epoch {epoch:3}  loss {:.4}  det {:.4}  kd {:.4}  feat {:.4}  val mAP {:.4}  lr {:.2e}",
                rec.train_loss, rec.l_det, rec.l_kd, rec.l_feat, rec.val_map, rec.lr
            );
        }
        if let (Some(w), Some(path)) = (log.as_mut(), cfg.log_csv.as_ref()) {
            w.serialize(rec).and_then(|_| Ok(w.flush()?)).map_err(|e| Error::data(path, e.to_string()))?;
        }
        history.push(rec);
        if best.as_ref().is_none_or(|b| val_map > b.0) {
            best = Some((val_map, epoch, store.clone()));
        }
        lr = plateau.step(val_map, lr);
        adam.lr = lr;
    }

    let (best_map, best_epoch, best_store) = best.expect("at least one epoch ran");
    model.store = strip_adapter(&best_store)?;
    Ok(TrainOutcome {
        model,
        best_map,
        best_epoch,
        history,
    })
}

//! Synthetic labeled images of red, blue and black boxes in a room.

mod dataset;
pub mod render;

use std::f64::consts::TAU;

use edgenav_autodiff::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{load_dataset, write_dataset, Dataset, Manifest};
pub use render::{project_box, render_view, Camera, Room, Style, View, WorldBox, CLASS_COLORS, CLASS_NAMES};

use crate::detector::NormStats;
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 3;
/// Largest allowed image-space IoU between two placed boxes.
pub const MAX_PLACEMENT_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub class_id: usize,
    /// Normalized `(x1, y1, x2, y2)`.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub size: usize,
    /// Row-major `[H, W, 3]` bytes.
    pub pixels: Vec<u8>,
    pub labels: Vec<Label>,
}

impl LabeledImage {
    /// Mirror image with labels mirrored to match.
    pub fn flipped(&self) -> LabeledImage {
        let s = self.size;
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks_exact(s * 3) {
            for px in row.chunks_exact(3).rev() {
                pixels.extend_from_slice(px);
            }
        }
        let labels = self
            .labels
            .iter()
            .map(|l| Label {
                class_id: l.class_id,
                bbox: [1.0 - l.bbox[2], l.bbox[1], 1.0 - l.bbox[0], l.bbox[3]],
            })
            .collect();
        LabeledImage {
            size: s,
            pixels,
            labels,
        }
    }

    pub fn label_for(&self, class_id: usize) -> Option<&Label> {
        self.labels.iter().find(|l| l.class_id == class_id)
    }
}

/// Everything needed to render one image deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room: Room,
    pub camera: Camera,
    pub style: Style,
    pub boxes: Vec<WorldBox>,
    pub image_size: usize,
    /// Seed of the pixel noise.
    pub seed: u64,
}

/// Renders `spec`; a label is emitted for every box with at least one
/// visible pixel and equals the box's full projected extent.
pub fn render_scene(spec: &SceneSpec) -> Result<LabeledImage> {
    if spec.boxes.len() > NUM_CLASSES {
        return Err(Error::contract(
            "render_scene",
            format!("{} boxes for {NUM_CLASSES} classes", spec.boxes.len()),
        ));
    }
    let mut seen = [false; NUM_CLASSES];
    for b in &spec.boxes {
        if b.class_id >= NUM_CLASSES || std::mem::replace(&mut seen[b.class_id], true) {
            return Err(Error::contract(
                "render_scene",
                format!("class {} is invalid or repeated", b.class_id),
            ));
        }
    }
    let view = render_view(&spec.room, &spec.camera, &spec.boxes, &spec.style, spec.image_size, spec.seed);
    let mut labels: Vec<Label> = spec
        .boxes
        .iter()
        .filter(|b| view.ids.contains(&Some(b.class_id as u8)))
        .filter_map(|b| {
            project_box(&spec.camera, b).map(|bbox| Label {
                class_id: b.class_id,
                bbox,
            })
        })
        .collect();
    labels.sort_by_key(|l| l.class_id);
    Ok(LabeledImage {
        size: spec.image_size,
        pixels: view.rgb,
        labels,
    })
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Random camera and up to one box per class in front of it.
///
/// Each class is present with probability `presence`; a box that cannot
/// be placed without overlapping (world or image space) is left out.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R, image_size: usize, presence: f64) -> SceneSpec {
    let room = Room::default();
    let camera = Camera::new(rng.gen_range(1.0..9.0), rng.gen_range(1.0..9.0), rng.gen_range(0.0..TAU));
    let style = Style::random(rng);
    let mut classes: Vec<usize> = (0..NUM_CLASSES).filter(|_| rng.gen_bool(presence)).collect();
    classes.shuffle(rng);
    let mut boxes: Vec<WorldBox> = Vec::new();
    let mut rects: Vec<[f64; 4]> = Vec::new();
    for class_id in classes {
        for _ in 0..40 {
            let dist = rng.gen_range(1.2..7.0);
            let bearing = rng.gen_range(-0.42..0.42) * camera.fov;
            let size = rng.gen_range(0.6..1.0);
            let a = camera.heading + bearing;
            let cand = WorldBox {
                class_id,
                x: camera.x + dist * a.cos(),
                y: camera.y + dist * a.sin(),
                size,
            };
            let m = size / 2.0 + 0.05;
            if cand.x < m || cand.x > room.width - m || cand.y < m || cand.y > room.depth - m {
                continue;
            }
            if boxes.iter().any(|o| (o.x - cand.x).hypot(o.y - cand.y) < 1.2 * (o.size + cand.size) / 2.0) {
                continue;
            }
            let Some(rect) = project_box(&camera, &cand) else { continue };
            if rects.iter().any(|r| iou(r, &rect) > MAX_PLACEMENT_IOU) {
                continue;
            }
            boxes.push(cand);
            rects.push(rect);
            break;
        }
    }
    SceneSpec {
        room,
        camera,
        style,
        boxes,
        image_size,
        seed: rng.gen(),
    }
}

/// Scene `index` of the dataset generated from `seed`.
pub fn scene_for(seed: u64, index: usize, image_size: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64);
    sample_scene(&mut rng, image_size, 0.75)
}

/// `count` scenes split into the first `floor(0.9 count)` for training and
/// the rest for validation.
pub fn gen_dataset(count: usize, seed: u64, image_size: usize) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let mut all = (0..count)
        .map(|i| render_scene(&scene_for(seed, i, image_size)))
        .collect::<Result<Vec<_>>>()?;
    let val = all.split_off(train_count(count));
    Ok((all, val))
}

pub fn train_count(count: usize) -> usize {
    count * 9 / 10
}

/// Per-channel mean and standard deviation of pixel values scaled to `[0, 1]`.
pub fn norm_stats(images: &[LabeledImage]) -> NormStats {
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut n = 0usize;
    for img in images {
        for px in img.pixels.chunks_exact(3) {
            for c in 0..3 {
                let v = px[c] as f64 / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        n += img.size * img.size;
    }
    if n == 0 {
        return NormStats::default();
    }
    let mean = sum.map(|s| s / n as f64);
    let std = [0, 1, 2].map(|c| (sq[c] / n as f64 - mean[c] * mean[c]).max(1e-12).sqrt());
    NormStats { mean, std }
}

/// Normalized `[N, 3, H, W]` batch.
pub fn batch_tensor<T: Real>(images: &[&LabeledImage], stats: &NormStats) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(Error::contract("batch_tensor", "empty batch"));
    };
    let s = first.size;
    let plane = s * s;
    let mut out = vec![T::zero(); images.len() * 3 * plane];
    for (i, img) in images.iter().enumerate() {
        if img.size != s {
            return Err(Error::contract("batch_tensor", format!("mixed image sizes {s} and {}", img.size)));
        }
        let base = i * 3 * plane;
        for (p, px) in img.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[base + c * plane + p] = T::of((px[c] as f64 / 255.0 - stats.mean[c]) / stats.std[c]);
            }
        }
    }
    Ok(Tensor::new(out, &[images.len(), 3, s, s])?)
}

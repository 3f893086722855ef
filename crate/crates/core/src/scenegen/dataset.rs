//! On-disk dataset layout:
//!
//! ```text
//! manifest.json          seed, counts, image size, normalization stats
//! train.txt, val.txt     one image id per line
//! images/NNNNNN.png
//! labels/NNNNNN.txt      "class x1 y1 x2 y2" per line, normalized
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{norm_stats, Label, LabeledImage, CLASS_NAMES, NUM_CLASSES};
use crate::detector::NormStats;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub train: usize,
    pub val: usize,
    pub image_size: usize,
    pub classes: Vec<String>,
    pub norm_stats: NormStats,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub manifest: Option<Manifest>,
}

impl Dataset {
    pub fn new(train: Vec<LabeledImage>, val: Vec<LabeledImage>, seed: u64) -> Self {
        let manifest = Manifest {
            seed,
            count: train.len() + val.len(),
            train: train.len(),
            val: val.len(),
            image_size: train.first().or(val.first()).map_or(0, |i| i.size),
            classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            norm_stats: norm_stats(&train),
        };
        Dataset {
            train,
            val,
            manifest: Some(manifest),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.val.is_empty()
    }

    pub fn norm_stats(&self) -> NormStats {
        self.manifest.as_ref().map_or_else(|| norm_stats(&self.train), |m| m.norm_stats)
    }
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn label_text(labels: &[Label]) -> String {
    labels
        .iter()
        .map(|l| format!("{} {} {} {} {}\n", l.class_id, l.bbox[0], l.bbox[1], l.bbox[2], l.bbox[3]))
        .collect()
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut index = 0usize;
    for (split, images) in [("train", &ds.train), ("val", &ds.val)] {
        let mut ids = String::new();
        for img in images {
            let id = format!("{index:06}");
            let png = dir.join("images").join(format!("{id}.png"));
            image::save_buffer(&png, &img.pixels, img.size as u32, img.size as u32, image::ColorType::Rgb8)
                .map_err(|e| Error::data(&png, e.to_string()))?;
            write(&dir.join("labels").join(format!("{id}.txt")), label_text(&img.labels).as_bytes())?;
            ids.push_str(&id);
            ids.push('\n');
            index += 1;
        }
        write(&dir.join(format!("{split}.txt")), ids.as_bytes())?;
    }
    if let Some(m) = &ds.manifest {
        let json = serde_json::to_string_pretty(m).expect("manifest serializes");
        write(&dir.join("manifest.json"), json.as_bytes())?;
    }
    Ok(())
}

fn parse_labels(path: &Path, text: &str) -> Result<Vec<Label>> {
    let mut labels: Vec<Label> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::data(path, format!("line {}: {msg}", i + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0].parse().map_err(|_| bad(format!("bad class `{}`", fields[0])))?;
        if class_id >= NUM_CLASSES {
            return Err(bad(format!("class {class_id} out of range")));
        }
        let mut bbox = [0.0; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            bbox[k] = f.parse().map_err(|_| bad(format!("bad coordinate `{f}`")))?;
        }
        if bbox.iter().any(|v| !(0.0..=1.0).contains(v)) || bbox[0] >= bbox[2] || bbox[1] >= bbox[3] {
            return Err(bad(format!("box {bbox:?} is not an ordered rectangle inside [0, 1]")));
        }
        if labels.iter().any(|l| l.class_id == class_id) {
            return Err(bad(format!("class {class_id} repeated")));
        }
        labels.push(Label { class_id, bbox });
    }
    Ok(labels)
}

fn read_split(dir: &Path, name: &str) -> Result<Vec<LabeledImage>> {
    let list = dir.join(name);
    if !list.exists() {
        return Ok(Vec::new());
    }
    let ids = fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
    ids.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| {
            let png = dir.join("images").join(format!("{id}.png"));
            let img = image::open(&png).map_err(|e| Error::data(&png, e.to_string()))?.to_rgb8();
            if img.width() != img.height() {
                return Err(Error::data(&png, format!("image is {}x{}, expected square", img.width(), img.height())));
            }
            let txt: PathBuf = dir.join("labels").join(format!("{id}.txt"));
            let text = fs::read_to_string(&txt).map_err(|e| Error::io(&txt, e))?;
            Ok(LabeledImage {
                size: img.width() as usize,
                labels: parse_labels(&txt, &text)?,
                pixels: img.into_raw(),
            })
        })
        .collect()
}

/// Reads a dataset written by [`write_dataset`]. A directory without split
/// lists is an empty dataset.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::data(dir, "dataset directory not found"));
    }
    let manifest_path = dir.join("manifest.json");
    let manifest = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| Error::data(&manifest_path, e.to_string()))?)
    } else {
        None
    };
    Ok(Dataset {
        train: read_split(dir, "train.txt")?,
        val: read_split(dir, "val.txt")?,
        manifest,
    })
}

//! Dataset ingestion and synthesis: IDX files, class-templated synthetic
//! images, 255-level discretization and seeded train/test splits.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct DatasetMeta {
    pub name: String,
    pub source: String,
    /// (rows, cols) of one image.
    pub image_shape: (usize, usize),
}

/// Images scaled to [0, 1], one row per item, with optional integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn label_count(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max().copied())
            .map_or(0, |m| m + 1)
    }

    pub fn item(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// Subset by item indices, preserving order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let dim = self.dim();
        let mut data = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            data.extend_from_slice(self.item(i));
        }
        Dataset {
            images: Tensor::new(vec![idx.len(), dim], data).unwrap(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            meta: self.meta.clone(),
        }
    }
}

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    let end = at + 4;
    if end > bytes.len() {
        return Err(Error::Format {
            context: format!("idx: truncated before {what}"),
        });
    }
    Ok(u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]))
}

/// Parses IDX image (and optional label) files; pixel bytes are scaled by
/// 1/255 so every value lands in [0, 1].
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let bytes = fs::read(images_path)?;
    let magic = read_be_u32(&bytes, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            context: format!("idx: bad image magic {magic:#010x}, want {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_be_u32(&bytes, 4, "image count")? as usize;
    let rows = read_be_u32(&bytes, 8, "row count")? as usize;
    let cols = read_be_u32(&bytes, 12, "column count")? as usize;
    let dim = rows * cols;
    let pixel_bytes = &bytes[16..];
    if pixel_bytes.len() != count * dim {
        return Err(Error::Format {
            context: format!(
                "idx: {count} images of {dim} pixels need {} bytes, file holds {}",
                count * dim,
                pixel_bytes.len()
            ),
        });
    }
    let data: Vec<f64> = pixel_bytes.iter().map(|&b| b as f64 / 255.0).collect();
    let labels = match labels_path {
        None => None,
        Some(path) => {
            let lbytes = fs::read(path)?;
            let lmagic = read_be_u32(&lbytes, 0, "label magic")?;
            if lmagic != IDX_LABELS_MAGIC {
                return Err(Error::Format {
                    context: format!(
                        "idx: bad label magic {lmagic:#010x}, want {IDX_LABELS_MAGIC:#010x}"
                    ),
                });
            }
            let lcount = read_be_u32(&lbytes, 4, "label count")? as usize;
            if lcount != count {
                return Err(Error::Format {
                    context: format!("idx: {count} images but {lcount} labels"),
                });
            }
            if lbytes.len() != 8 + lcount {
                return Err(Error::Format {
                    context: "idx: truncated label payload".into(),
                });
            }
            Some(lbytes[8..].iter().map(|&b| b as usize).collect())
        }
    };
    Ok(Dataset {
        images: Tensor::new(vec![count, dim], data)?,
        labels,
        meta: DatasetMeta {
            name: images_path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "idx".into()),
            source: images_path.display().to_string(),
            image_shape: (rows, cols),
        },
    })
}

/// Serializes a dataset back to IDX image/label byte blobs (test fixtures
/// and round-trip checks). Pixel values are quantized with the same
/// floor-to-255 rule as [`discretize_255`].
pub fn to_idx_bytes(d: &Dataset) -> (Vec<u8>, Option<Vec<u8>>) {
    let (rows, cols) = d.meta.image_shape;
    let mut img = Vec::with_capacity(16 + d.len() * d.dim());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(d.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in d.images.data() {
        img.push(quantize_255(v));
    }
    let labels = d.labels.as_ref().map(|ls| {
        let mut lb = Vec::with_capacity(8 + ls.len());
        lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lb.extend_from_slice(&(ls.len() as u32).to_be_bytes());
        lb.extend(ls.iter().map(|&l| l as u8));
        lb
    });
    (img, labels)
}

/// Spec of a synthetic dataset: class-templated blobs plus noise. When
/// `informative` is set, only those feature indices depend on the label and
/// the rest are i.i.d. uniform noise (a classification benchmark with known
/// ground truth).
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n: usize,
    pub side: usize,
    pub classes: usize,
    pub noise: f64,
    pub informative: Option<Vec<usize>>,
}

impl SynthSpec {
    pub fn images(n: usize, side: usize, classes: usize, noise: f64) -> Self {
        Self { n, side, classes, noise, informative: None }
    }
}

/// Deterministic class template: a pair of Gaussian bumps whose centers and
/// widths are derived from the class index.
fn class_template(class: usize, side: usize) -> Vec<f64> {
    let mut img = vec![0.0; side * side];
    let s = side as f64;
    for bump in 0..2 {
        let phase = class as f64 * 2.399_963 + bump as f64 * 2.1;
        let cx = s * (0.5 + 0.3 * phase.cos());
        let cy = s * (0.5 + 0.3 * phase.sin());
        let width = s * (0.12 + 0.04 * ((class + bump) % 3) as f64);
        for r in 0..side {
            for c in 0..side {
                let dx = (c as f64 - cx) / width;
                let dy = (r as f64 - cy) / width;
                img[r * side + c] += 0.9 * (-0.5 * (dx * dx + dy * dy)).exp();
            }
        }
    }
    for v in &mut img {
        *v = v.min(1.0);
    }
    img
}

/// Generates a synthetic dataset per `spec`. Values are clipped to [0, 1].
pub fn synth_gen(spec: &SynthSpec, rng: &Rng) -> Dataset {
    let dim = spec.side * spec.side;
    let mut data = Vec::with_capacity(spec.n * dim);
    let mut labels = Vec::with_capacity(spec.n);
    let templates: Vec<Vec<f64>> =
        (0..spec.classes).map(|c| class_template(c, spec.side)).collect();
    for item in 0..spec.n {
        let mut item_rng = rng.split(item as u64);
        let label = item % spec.classes;
        labels.push(label);
        match &spec.informative {
            None => {
                let template = &templates[label];
                for &t in template {
                    let v = t + spec.noise * item_rng.next_normal();
                    data.push(v.clamp(0.0, 1.0));
                }
            }
            Some(informative) => {
                // informative features carry a class-dependent level, the
                // rest are label-independent uniform noise
                let mut in_set = vec![false; dim];
                for &i in informative {
                    in_set[i] = true;
                }
                for f in 0..dim {
                    let v = if in_set[f] {
                        let phase = (label * 31 + f * 7) % 4;
                        let center = 0.15 + 0.25 * phase as f64;
                        center + spec.noise * item_rng.next_normal()
                    } else {
                        item_rng.next_f64()
                    };
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    Dataset {
        images: Tensor::new(vec![spec.n, dim], data).unwrap(),
        labels: Some(labels),
        meta: DatasetMeta {
            name: format!("synth-{}x{}-c{}", spec.side, spec.side, spec.classes),
            source: "synthetic".into(),
            image_shape: (spec.side, spec.side),
        },
    }
}

/// Integer-valued dataset with features in [0, 255].
#[derive(Debug, Clone)]
pub struct DiscreteDataset {
    pub features: Vec<u8>,
    pub n: usize,
    pub dim: usize,
    pub labels: Option<Vec<usize>>,
}

impl DiscreteDataset {
    pub fn item(&self, i: usize) -> &[u8] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Floor of `v * 255` clamped into [0, 255]; 1.0 maps to 255.
pub fn quantize_255(v: f64) -> u8 {
    (v * 255.0).floor().clamp(0.0, 255.0) as u8
}

/// Multiplies every value by 255 and rounds down. Inputs must lie in [0, 1].
pub fn discretize_255(d: &Dataset) -> Result<DiscreteDataset> {
    if d.images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidArgument {
            context: "discretize_255: values outside [0, 1]".into(),
        });
    }
    Ok(DiscreteDataset {
        features: d.images.data().iter().map(|&v| quantize_255(v)).collect(),
        n: d.len(),
        dim: d.dim(),
        labels: d.labels.clone(),
    })
}

/// Disjoint, exhaustive random split with `ratio = (train_parts, test_parts)`.
pub fn split(d: &Dataset, ratio: (usize, usize), rng: &Rng) -> Result<(Dataset, Dataset)> {
    let (a, b) = ratio;
    if a == 0 || b == 0 {
        return Err(Error::InvalidArgument {
            context: format!("split: ratio {a}:{b}"),
        });
    }
    let mut idx: Vec<usize> = (0..d.len()).collect();
    rng.split(0xD5).shuffle(&mut idx);
    let n_train = d.len() * a / (a + b);
    let (train_idx, test_idx) = idx.split_at(n_train);
    Ok((d.subset(train_idx), d.subset(test_idx)))
}

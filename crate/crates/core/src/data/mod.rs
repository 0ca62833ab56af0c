//! Dataset containers and loaders.
//!
//! A dataset directory `<root>/<name>/` holds `{split}-images-idx3-ubyte` and
//! `{split}-labels-idx1-ubyte`, or `{split}-images.npy` and `{split}-labels.npy`.

mod idx;
mod npy;

use std::path::Path;

pub use idx::{encode_idx, load_idx, parse_idx, write_idx};
pub use npy::{encode_npy, load_npy, parse_npy, write_npy, NpyArray};

use crate::error::{Error, Result};
use crate::rng::RandomStream;
use crate::tensor::Tensor;

/// Row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T> Array<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "array",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }
}

/// Images `[n, h, w, c]` as u8 with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<u8>,
    pub labels: Vec<u16>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Array<u8>,
        labels: Vec<u16>,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let (n, height, width, channels) = match images.shape[..] {
            [n, h, w] => (n, h, w, 1),
            [n, h, w, c] => (n, h, w, c),
            _ => {
                return Err(Error::shape(
                    "dataset",
                    format!(
                        "images must be [n,h,w] or [n,h,w,c], got {:?}",
                        images.shape
                    ),
                ))
            }
        };
        if labels.len() != n {
            return Err(Error::shape(
                "dataset",
                format!("{n} images but {} labels", labels.len()),
            ));
        }
        let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let class_names =
            class_names.unwrap_or_else(|| (0..classes).map(|c| c.to_string()).collect());
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_names.len()) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                classes: class_names.len(),
            });
        }
        Ok(Self {
            name: name.into(),
            images: images.data,
            labels,
            height,
            width,
            channels,
            class_names,
        })
    }

    /// Loads `<dir>/{split}-images*` and `<dir>/{split}-labels*`.
    pub fn load(dir: &Path, split: &str) -> Result<Self> {
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let idx_images = dir.join(format!("{split}-images-idx3-ubyte"));
        let (images, labels) = if idx_images.exists() {
            (
                load_idx(&idx_images)?,
                load_idx(&dir.join(format!("{split}-labels-idx1-ubyte")))?,
            )
        } else {
            (
                load_npy(&dir.join(format!("{split}-images.npy")))?.into_u8()?,
                load_npy(&dir.join(format!("{split}-labels.npy")))?.into_u8()?,
            )
        };
        if labels.shape.len() != 1 {
            return Err(Error::shape(
                "dataset",
                format!("labels must be 1-d, got {:?}", labels.shape),
            ));
        }
        Dataset::new(
            name,
            images,
            labels.data.into_iter().map(u16::from).collect(),
            None,
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let l = self.image_len();
        &self.images[i * l..(i + 1) * l]
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            name: self.name.clone(),
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            ..*self
        }
    }

    /// Samples `[start, end)`, clamped to the dataset.
    pub fn range(&self, start: usize, end: usize) -> Dataset {
        let end = end.min(self.len());
        let idx: Vec<usize> = (start.min(end)..end).collect();
        self.select(&idx)
    }

    /// Normalized `[b, c, h, w]` tensor of the samples at `indices`.
    pub fn tensor(&self, indices: &[usize], mean: f64, std: f64) -> Result<Tensor> {
        if !(std > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "std must be positive, got {std}"
            )));
        }
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0.0; indices.len() * self.image_len()];
        for (b, &i) in indices.iter().enumerate() {
            let img = self.image(i);
            let out = &mut data[b * c * h * w..(b + 1) * c * h * w];
            for p in 0..h * w {
                for ch in 0..c {
                    out[ch * h * w + p] = (img[p * c + ch] as f64 / 255.0 - mean) / std;
                }
            }
        }
        Tensor::new(vec![indices.len().max(1), c, h, w], data)
    }
}

/// Keeps samples whose label is in `keep`; with `reindex`, labels become
/// their position in `keep`.
pub fn filter_classes(d: &Dataset, keep: &[u16], reindex: bool) -> Result<Dataset> {
    if keep.is_empty() {
        return Err(Error::InvalidArgument("keep set is empty".into()));
    }
    let idx: Vec<usize> = (0..d.len())
        .filter(|&i| keep.contains(&d.labels[i]))
        .collect();
    let mut out = d.select(&idx);
    if reindex {
        for l in &mut out.labels {
            *l = keep.iter().position(|k| k == l).expect("kept label") as u16;
        }
        out.class_names = keep
            .iter()
            .map(|&k| {
                d.class_names
                    .get(k as usize)
                    .cloned()
                    .unwrap_or_else(|| k.to_string())
            })
            .collect();
    }
    Ok(out)
}

/// Splits off every sample of class `label`; the in-domain part is
/// re-indexed densely over the remaining classes.
pub fn holdout_class(d: &Dataset, label: u16) -> Result<(Dataset, Dataset)> {
    let keep: Vec<u16> = (0..d.classes() as u16).filter(|&c| c != label).collect();
    let in_domain = filter_classes(d, &keep, true)?;
    let held_out = filter_classes(d, &[label], false)?;
    Ok((in_domain, held_out))
}

pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Shuffled mini-batches of normalized images `(x/255 − mean)/std`; the last
/// partial batch is kept.
pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    mean: f64,
    std: f64,
}

pub fn normalize_batches<'a>(
    d: &'a Dataset,
    mean: f64,
    std: f64,
    batch_size: usize,
    rng: &mut RandomStream,
) -> Result<Batches<'a>> {
    if !(std > 0.0) || batch_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "need std > 0 and batch_size > 0, got {std} and {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    rng.shuffle(&mut order);
    Ok(Batches {
        data: d,
        order,
        pos: 0,
        batch_size,
        mean,
        std,
    })
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let x = self
            .data
            .tensor(&indices, self.mean, self.std)
            .expect("validated normalization");
        Some(Batch {
            x,
            labels: indices
                .iter()
                .map(|&i| self.data.labels[i] as usize)
                .collect(),
            indices,
        })
    }
}

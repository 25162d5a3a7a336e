use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Per-channel affine normalization `(x - mean) / std` relative to the raw
/// values (pixels scaled to `[0, 1]` for IDX files).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Normalization equivalent to applying `self` and then `next`.
    fn then(&self, next: &Normalization) -> Normalization {
        let mean = self.mean.iter().zip(&self.std).zip(&next.mean).map(|((m1, s1), m2)| m1 + s1 * m2).collect();
        let std = self.std.iter().zip(&next.std).map(|(s1, s2)| s1 * s2).collect();
        Normalization { mean, std }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Val,
}

/// Labelled images `[N, C, H, W]` with recorded normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    /// `[C, H, W]` of one sample.
    pub sample_shape: [usize; 3],
    pub labels: Vec<usize>,
    pub classes: usize,
    pub normalization: Normalization,
    pub split: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    fn subset(&self, indices: &[usize], split: SplitTag) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            images.extend_from_slice(self.sample(i));
        }
        Dataset {
            images,
            sample_shape: self.sample_shape,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            normalization: self.normalization.clone(),
            split,
        }
    }

    /// Per-channel mean and standard deviation of the stored values.
    pub fn channel_stats(&self) -> Normalization {
        let [c, h, w] = self.sample_shape;
        let plane = h * w;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for i in 0..self.len() {
            let s = self.sample(i);
            for ch in 0..c {
                for &v in &s[ch * plane..(ch + 1) * plane] {
                    mean[ch] += v as f64;
                    sq[ch] += v as f64 * v as f64;
                }
            }
        }
        let count = (self.len() * plane).max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                let var = (s / count - *m * *m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Normalization { mean, std }
    }

    /// Applies `(x - mean) / std` to the stored values and records it.
    pub fn apply_normalization(&mut self, norm: &Normalization) {
        let [c, h, w] = self.sample_shape;
        let plane = h * w;
        let n = self.sample_len();
        for sample in self.images.chunks_mut(n) {
            for ch in 0..c {
                let (m, s) = (norm.mean[ch], norm.std[ch]);
                for v in &mut sample[ch * plane..(ch + 1) * plane] {
                    *v = ((*v as f64 - m) / s) as f32;
                }
            }
        }
        self.normalization = self.normalization.then(norm);
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse { offset: offset as u64, detail: format!("truncated header reading {what}") })
}

fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "rows")? as usize;
    let cols = be_u32(bytes, 12, "cols")? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != need {
        return Err(Error::Parse {
            offset: 16 + payload.len().min(need) as u64,
            detail: format!("image payload holds {} bytes, header announces {need}", payload.len()),
        });
    }
    Ok((n, rows, cols, payload))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Parse {
            offset: 8 + payload.len().min(n) as u64,
            detail: format!("label payload holds {} bytes, header announces {n}", payload.len()),
        });
    }
    Ok(payload)
}

/// Reads an IDX image/label pair. Pixels are scaled to `[0, 1]`, then
/// normalized with `stats` or, when absent, with the file's own statistics.
pub fn load_idx(images_path: &Path, labels_path: &Path, stats: Option<&Normalization>) -> Result<Dataset> {
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;
    idx_from_bytes(&image_bytes, &label_bytes, stats)
}

pub fn idx_from_bytes(image_bytes: &[u8], label_bytes: &[u8], stats: Option<&Normalization>) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(Error::Parse {
            offset: 4,
            detail: format!("label file lists {} entries, image file {n}", labels.len()),
        });
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    let mut ds = Dataset {
        images: pixels.iter().map(|&b| b as f32 / 255.0).collect(),
        sample_shape: [1, rows, cols],
        labels,
        classes,
        normalization: Normalization::identity(1),
        split: SplitTag::Full,
    };
    let norm = match stats {
        Some(s) => s.clone(),
        None => ds.channel_stats(),
    };
    ds.apply_normalization(&norm);
    Ok(ds)
}

/// Encodes images (values in `[0, 1]`) and labels as an IDX byte pair.
pub fn idx_to_bytes(images: &[u8], n: usize, rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(images);
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

/// Class centres spread over a jittered grid so that every class gets a
/// distinct location.
fn blob_centres(classes: usize, image_size: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let g = (classes as f64).sqrt().ceil() as usize;
    let cell = image_size as f64 / g as f64;
    let mut cells: Vec<(usize, usize)> = (0..g).flat_map(|r| (0..g).map(move |c| (r, c))).collect();
    cells.shuffle(rng);
    cells
        .into_iter()
        .take(classes)
        .map(|(r, c)| {
            let jitter = cell * 0.15;
            let y = (r as f64 + 0.5) * cell + rng.random_range(-jitter..=jitter);
            let x = (c as f64 + 0.5) * cell + rng.random_range(-jitter..=jitter);
            (y, x)
        })
        .collect()
}

/// Single-channel images with a Gaussian bump at a class-specific location
/// plus i.i.d. pixel noise. Deterministic in `seed`.
pub fn synth_blobs(
    classes: usize,
    samples_per_class: usize,
    image_size: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config("synthetic blobs need at least two classes".into()));
    }
    if image_size < 2 || samples_per_class == 0 {
        return Err(Error::Config("image_size must be at least 2 and samples_per_class positive".into()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Config("noise_sigma must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres = blob_centres(classes, image_size, &mut rng);
    let g = (classes as f64).sqrt().ceil();
    let width = image_size as f64 / g / 2.5;
    let templates: Vec<Vec<f32>> = centres
        .iter()
        .map(|&(cy, cx)| {
            (0..image_size * image_size)
                .map(|p| {
                    let (y, x) = ((p / image_size) as f64, (p % image_size) as f64);
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    (-d2 / (2.0 * width * width)).exp() as f32
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut images = Vec::with_capacity(classes * samples_per_class * image_size * image_size);
    let mut labels = Vec::with_capacity(classes * samples_per_class);
    for (class, template) in templates.iter().enumerate() {
        for _ in 0..samples_per_class {
            if noise_sigma == 0.0 {
                images.extend_from_slice(template);
            } else {
                images.extend(template.iter().map(|&v| v + noise.sample(&mut rng) as f32));
            }
            labels.push(class);
        }
    }
    Ok(Dataset {
        images,
        sample_shape: [1, image_size, image_size],
        labels,
        classes,
        normalization: Normalization::identity(1),
        split: SplitTag::Full,
    })
}

/// One mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Positions of the samples within their split.
    pub indices: Vec<usize>,
}

/// Disjoint train/validation splits with seeded batching.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub batch_size: usize,
    pub seed: u64,
}

/// Shuffles with `seed`, holds out `val_fraction` for validation and
/// standardizes both splits with statistics of the train split.
pub fn split_and_batch(ds: &Dataset, val_fraction: f64, batch_size: usize, seed: u64) -> Result<DataSplits> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction {val_fraction} must lie in (0, 1)")));
    }
    if ds.len() < 2 {
        return Err(Error::Config("need at least two samples to split".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((ds.len() as f64 * val_fraction).round() as usize).clamp(1, ds.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train = ds.subset(train_idx, SplitTag::Train);
    let mut val = ds.subset(val_idx, SplitTag::Val);
    if batch_size == 0 || batch_size > train.len() || batch_size > val.len() {
        return Err(Error::Config(format!(
            "batch size {batch_size} does not fit splits of {} train / {} val samples",
            train.len(),
            val.len()
        )));
    }
    let stats = train.channel_stats();
    train.apply_normalization(&stats);
    val.apply_normalization(&stats);
    Ok(DataSplits { train, val, batch_size, seed })
}

fn batches_of(ds: &Dataset, order: &[usize], batch_size: usize) -> Vec<Batch> {
    let mut groups: Vec<&[usize]> = order.chunks(batch_size).collect();
    // batchnorm needs two samples; fold a trailing singleton into its neighbour
    let merged;
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() == 1) {
        groups.pop();
        let last = groups.pop().expect("at least one group");
        merged = [last, &order[order.len() - 1..]].concat();
        groups.push(&merged);
    }
    let [c, h, w] = ds.sample_shape;
    groups
        .into_iter()
        .map(|idx| {
            let mut data = Vec::with_capacity(idx.len() * ds.sample_len());
            for &i in idx {
                data.extend_from_slice(ds.sample(i));
            }
            Batch {
                images: Tensor::new(vec![idx.len(), c, h, w], data).expect("sizes agree"),
                labels: idx.iter().map(|&i| ds.labels[i]).collect(),
                indices: idx.to_vec(),
            }
        })
        .collect()
}

impl DataSplits {
    /// Train batches for `epoch`, reshuffled deterministically per epoch.
    pub fn train_batches(&self, epoch: usize) -> Vec<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        batches_of(&self.train, &order, self.batch_size)
    }

    /// Train samples in storage order, for statistics passes.
    pub fn train_batches_ordered(&self) -> Vec<Batch> {
        let order: Vec<usize> = (0..self.train.len()).collect();
        batches_of(&self.train, &order, self.batch_size)
    }

    /// Validation batches in fixed order.
    pub fn val_batches(&self) -> Vec<Batch> {
        let order: Vec<usize> = (0..self.val.len()).collect();
        batches_of(&self.val, &order, self.batch_size)
    }
}

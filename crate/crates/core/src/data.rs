//! Datasets: the 2-D conditional-Gaussian toy problem, IDX image files, and
//! seeded mini-batching.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Per-feature affine map `x' = (x − offset) · scale` applied after sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl AffineMap {
    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(x, (o, s))| (x - o) * s)
            .collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(x, (o, s))| x / s + o)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    /// Per-sample shape, e.g. `[2]` or `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    /// Rescaling applied to generated data, if any.
    pub transform: Option<AffineMap>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, split: Split, input_shape: Vec<usize>) -> Result<Self> {
        let ds = Self {
            inputs,
            labels,
            num_classes,
            split,
            input_shape,
            transform: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        let width: usize = self.input_shape.iter().product();
        if self.inputs.shape() != [n, width] {
            return Err(Error::Dimension {
                op: "dataset",
                left: self.inputs.shape().to_vec(),
                right: vec![n, width],
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Index {
                op: "dataset",
                index: bad,
                bound: self.num_classes,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Samples at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            inputs: self.inputs.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            input_shape: self.input_shape.clone(),
            transform: self.transform.clone(),
        })
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Keeps only the listed classes and relabels them `0..classes.len()` in
    /// the given order.
    pub fn select_classes(&self, classes: &[usize]) -> Result<Self> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        let mut out = self.subset(&idx)?;
        for l in &mut out.labels {
            *l = classes.iter().position(|c| c == l).expect("filtered above");
        }
        out.num_classes = classes.len();
        Ok(out)
    }

    /// `x0,x1,...,label` rows with a header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.input_len();
        let header: Vec<String> = (0..d).map(|i| format!("x{i}")).chain(["label".to_string()]).collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut fields: Vec<String> = self.inputs.row(i).iter().map(|v| format!("{v}")).collect();
            fields.push(self.labels[i].to_string());
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSpec {
    /// One 2-D mean per class.
    pub means: Vec<[f64; 2]>,
    pub sigma: f64,
    pub samples_per_class: usize,
    #[serde(default)]
    pub test_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for GaussianSpec {
    /// Two classes at `(±1.5, 0)`, `σ = 0.6`, 500 per class.
    fn default() -> Self {
        Self {
            means: vec![[-1.5, 0.0], [1.5, 0.0]],
            sigma: 0.6,
            samples_per_class: 500,
            test_per_class: 500,
            seed: 0,
        }
    }
}

impl GaussianSpec {
    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.means.len() < 2 {
            v.push("gaussian dataset needs at least 2 class means".into());
        }
        for (i, a) in self.means.iter().enumerate() {
            if self.means[..i].contains(a) {
                v.push(format!("duplicate class mean {a:?}"));
            }
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            v.push(format!("sigma {} must be positive", self.sigma));
        }
        if self.samples_per_class == 0 {
            v.push("samples_per_class must be >= 1".into());
        }
        v
    }
}

/// Draws the train split (and a test split when `test_per_class > 0`) and
/// min-max rescales both to `[0, 1]` with one map fitted on their union.
pub fn gen_gaussian_splits(spec: &GaussianSpec) -> Result<(Dataset, Dataset)> {
    if let Some(v) = spec.violations().first() {
        return Err(Error::Spec(v.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = |per_class: usize| -> (Vec<[f64; 2]>, Vec<usize>) {
        let mut pts = Vec::with_capacity(per_class * spec.means.len());
        let mut labels = Vec::with_capacity(pts.capacity());
        for (c, m) in spec.means.iter().enumerate() {
            for _ in 0..per_class {
                let dx: f64 = StandardNormal.sample(&mut rng);
                let dy: f64 = StandardNormal.sample(&mut rng);
                pts.push([m[0] + spec.sigma * dx, m[1] + spec.sigma * dy]);
                labels.push(c);
            }
        }
        (pts, labels)
    };
    let (train_pts, train_labels) = draw(spec.samples_per_class);
    let (test_pts, test_labels) = draw(spec.test_per_class);

    let mut offset = vec![f64::INFINITY; 2];
    let mut upper = [f64::NEG_INFINITY; 2];
    for p in train_pts.iter().chain(&test_pts) {
        for d in 0..2 {
            offset[d] = offset[d].min(p[d]);
            upper[d] = upper[d].max(p[d]);
        }
    }
    let scale = (0..2)
        .map(|d| {
            let span = upper[d] - offset[d];
            if span > 0.0 {
                1.0 / span
            } else {
                1.0
            }
        })
        .collect();
    let map = AffineMap { offset, scale };

    let build = |pts: &[[f64; 2]], labels: Vec<usize>, split: Split| -> Result<Dataset> {
        let data = pts
            .iter()
            .flat_map(|p| map.apply(p).into_iter().map(|v| v.clamp(0.0, 1.0)))
            .collect();
        let mut ds = Dataset::new(Tensor::new(vec![pts.len(), 2], data)?, labels, spec.num_classes(), split, vec![2])?;
        ds.transform = Some(map.clone());
        Ok(ds)
    };
    Ok((
        build(&train_pts, train_labels, Split::Train)?,
        build(&test_pts, test_labels, Split::Test)?,
    ))
}

/// Train split of [`gen_gaussian_splits`].
pub fn gen_gaussian(spec: &GaussianSpec) -> Result<Dataset> {
    Ok(gen_gaussian_splits(spec)?.0)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    let b = bytes.get(at..at + 4).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        needed: at + 4,
        actual: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Parses an IDX image/label pair from memory. Pixels are scaled by `1/255`.
pub fn parse_idx(images: &[u8], labels: &[u8], images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    check_magic(images, IDX_IMAGES_MAGIC, images_path)?;
    check_magic(labels, IDX_LABELS_MAGIC, labels_path)?;
    let count = be_u32(images, 4, images_path)? as usize;
    let rows = be_u32(images, 8, images_path)? as usize;
    let cols = be_u32(images, 12, images_path)? as usize;
    let label_count = be_u32(labels, 4, labels_path)? as usize;
    if count != label_count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let pixels = count * rows * cols;
    let body = images.get(16..16 + pixels).ok_or_else(|| Error::Truncated {
        path: images_path.to_path_buf(),
        needed: 16 + pixels,
        actual: images.len(),
    })?;
    let label_body = labels.get(8..8 + count).ok_or_else(|| Error::Truncated {
        path: labels_path.to_path_buf(),
        needed: 8 + count,
        actual: labels.len(),
    })?;
    let data = body.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = label_body.iter().map(|&l| usize::from(l)).collect();
    let num_classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(
        Tensor::new(vec![count, rows * cols], data)?,
        labels,
        num_classes,
        Split::Train,
        vec![1, rows, cols],
    )
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels, images_path, labels_path)
}

/// Serializes a single-channel image dataset back to IDX bytes
/// `(images, labels)`. Inverse of [`parse_idx`] for data it produced.
pub fn encode_idx(data: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let &[1, rows, cols] = &data.input_shape[..] else {
        return Err(Error::Contract(format!(
            "IDX export needs a [1, rows, cols] input shape, got {:?}",
            data.input_shape
        )));
    };
    let n = data.len();
    let mut images = Vec::with_capacity(16 + n * rows * cols);
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(data.inputs.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &data.labels {
        labels.push(u8::try_from(l).map_err(|_| Error::Contract(format!("label {l} does not fit in u8")))?);
    }
    Ok((images, labels))
}

pub fn write_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (images, labels) = encode_idx(data)?;
    std::fs::write(images_path, images)?;
    std::fs::write(labels_path, labels)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Positions of these samples in the source dataset.
    pub indices: Vec<usize>,
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Shuffled mini-batches for `(seed, epoch)`; the final short batch is kept.
pub fn batches(data: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Spec("batch size must be >= 1".into()));
    }
    let order = epoch_permutation(data.len(), seed, epoch);
    order
        .chunks(batch_size)
        .map(|idx| {
            Ok(Batch {
                inputs: data.inputs.select_rows(idx)?,
                labels: idx.iter().map(|&i| data.labels[i]).collect(),
                indices: idx.to_vec(),
            })
        })
        .collect()
}

//! Image datasets: IDX files, the synthetic shapes corpus, reductions and splits.

mod idx;
mod shapes;

pub use idx::{encode_idx, parse_idx, read_idx, write_idx, IdxArray};
pub use shapes::{synth_shapes, ShapesConfig, DISK, RING};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::scalar::Scalar;

/// Grayscale images in `[0, 1]`, stored row-major, with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub height: usize,
    pub width: usize,
    /// `len * height * width` values.
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
    /// Where the images came from, e.g. `shapes/train`.
    pub provenance: String,
}

impl ImageDataset {
    pub fn new(
        count: usize,
        height: usize,
        width: usize,
        pixels: Vec<f64>,
        labels: Vec<usize>,
        provenance: &str,
    ) -> Result<Self> {
        if pixels.len() != count * height * width || labels.len() != count {
            return Err(Error::Usage(format!(
                "{count} images of {height}x{width} need {} pixels and {count} labels, got {} and {}",
                count * height * width,
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Usage(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
            labels,
            provenance: provenance.to_string(),
        })
    }

    /// Rows of `x` (clamped into `[0, 1]`) as `height x width` images.
    pub fn from_features<T: Scalar>(
        x: &Tensor<T>,
        height: usize,
        width: usize,
        labels: Vec<usize>,
        provenance: &str,
    ) -> Result<Self> {
        if x.rank() != 2 || x.cols() != height * width {
            return Err(Error::shape("features", x.shape(), &[labels.len(), height * width]));
        }
        let pixels = x.data().iter().map(|v| v.to_f64_lossy().clamp(0.0, 1.0)).collect();
        Self::new(x.rows(), height, width, pixels, labels, provenance)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Pixels per image.
    pub fn dim(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.pixels[i * self.dim()..(i + 1) * self.dim()]
    }

    /// `[len, height * width]`
    pub fn features<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(&[self.len(), self.dim()], self.pixels.iter().map(|&p| T::lit(p)).collect())
            .expect("dataset shape is consistent")
    }

    /// `max label + 1`
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(idx.len() * self.dim());
        for &i in idx {
            pixels.extend_from_slice(self.image(i));
        }
        Self {
            height: self.height,
            width: self.width,
            pixels,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn with_provenance(mut self, provenance: &str) -> Self {
        self.provenance = provenance.to_string();
        self
    }

    /// Stacks datasets with equal image sizes; provenance tags are joined with `+`.
    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of zero datasets".into()))?;
        let mut out = Self {
            height: first.height,
            width: first.width,
            pixels: Vec::new(),
            labels: Vec::new(),
            provenance: String::new(),
        };
        let mut tags: Vec<&str> = Vec::new();
        for p in parts {
            if (p.height, p.width) != (first.height, first.width) {
                return Err(Error::shape("dataset concat", &[first.height, first.width], &[p.height, p.width]));
            }
            out.pixels.extend_from_slice(&p.pixels);
            out.labels.extend_from_slice(&p.labels);
            if !tags.contains(&p.provenance.as_str()) {
                tags.push(&p.provenance);
            }
        }
        out.provenance = tags.join("+");
        Ok(out)
    }

    /// Images as `[count, height, width]` bytes (`round(255 p)`) and labels as `[count]`.
    pub fn to_idx(&self) -> Result<(IdxArray, IdxArray)> {
        let bytes = self.pixels.iter().map(|&p| (p * 255.0).round() as u8).collect();
        let labels = self
            .labels
            .iter()
            .map(|&l| u8::try_from(l).map_err(|_| Error::Usage(format!("label {l} does not fit a byte"))))
            .collect::<Result<Vec<u8>>>()?;
        Ok((
            IdxArray::new(vec![self.len(), self.height, self.width], bytes)?,
            IdxArray::new(vec![self.len()], labels)?,
        ))
    }

    pub fn from_idx(images: &IdxArray, labels: &IdxArray, provenance: &str) -> Result<Self> {
        let bad = |m: String| Error::Parse { offset: 3, msg: m };
        let [n, h, w] = images.dims[..] else {
            return Err(bad(format!("image file must be 3-D, got dims {:?}", images.dims)));
        };
        if labels.dims != [n] {
            return Err(bad(format!("label dims {:?} do not match {n} images", labels.dims)));
        }
        let pixels = images.data.iter().map(|&b| b as f64 / 255.0).collect();
        Self::new(n, h, w, pixels, labels.data.iter().map(|&l| l as usize).collect(), provenance)
    }

    pub fn load_idx(images: &Path, labels: &Path) -> Result<Self> {
        let tag = images.file_name().map_or("idx".into(), |n| n.to_string_lossy().into_owned());
        Self::from_idx(&read_idx(images)?, &read_idx(labels)?, &tag)
    }

    pub fn save_idx(&self, images: &Path, labels: &Path) -> Result<()> {
        let (i, l) = self.to_idx()?;
        write_idx(images, &i)?;
        write_idx(labels, &l)
    }

    /// `index,label` CSV.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "index,label")?;
        for (i, l) in self.labels.iter().enumerate() {
            writeln!(f, "{i},{l}")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Draws exactly `counts[c]` images of each class `c` (zero counts skip the class).
/// Output is grouped by class in ascending original order.
pub fn make_reduced(ds: &ImageDataset, counts: &[usize], seed: u64) -> Result<ImageDataset> {
    let have = ds.class_counts();
    let short: Vec<String> = counts
        .iter()
        .enumerate()
        .filter(|&(c, &want)| want > have.get(c).copied().unwrap_or(0))
        .map(|(c, &want)| format!("class {c}: want {want}, have {}", have.get(c).copied().unwrap_or(0)))
        .collect();
    if !short.is_empty() {
        return Err(Error::Insufficient(short.join("; ")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::new();
    for (c, &want) in counts.iter().enumerate() {
        let mut idx = ds.class_indices(c);
        idx.shuffle(&mut rng);
        idx.truncate(want);
        idx.sort_unstable();
        picked.extend(idx);
    }
    Ok(ds.subset(&picked))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    /// The remainder goes to validation.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Stratified `(train, validation)` split; `round(fraction * n_c)` of each class
/// goes to training.
pub fn split(ds: &ImageDataset, spec: &SplitSpec) -> Result<(ImageDataset, ImageDataset)> {
    if !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(Error::Config(format!("train fraction {} outside [0, 1]", spec.train_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for c in 0..ds.num_classes() {
        let mut idx = ds.class_indices(c);
        idx.shuffle(&mut rng);
        let k = (spec.train_fraction * idx.len() as f64).round() as usize;
        tr.extend_from_slice(&idx[..k]);
        va.extend_from_slice(&idx[k..]);
    }
    tr.sort_unstable();
    va.sort_unstable();
    let base = ds.provenance.split('/').next().unwrap_or("").to_string();
    Ok((
        ds.subset(&tr).with_provenance(&format!("{base}/train")),
        ds.subset(&va).with_provenance(&format!("{base}/val")),
    ))
}

/// Hex SHA-256 of `bytes`.
pub fn content_key(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Stores `bytes` as `dir/<content key>/<name>` unless already present.
pub fn cache_put(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let sub = dir.join(content_key(bytes));
    let path = sub.join(name);
    if !path.exists() {
        std::fs::create_dir_all(&sub)?;
        let tmp = sub.join(format!(".{name}.partial"));
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, &path)?;
    }
    Ok(path)
}

/// Per-class counts as a sorted map, for reports.
pub fn class_histogram(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for &l in labels {
        *m.entry(l).or_insert(0) += 1;
    }
    m
}

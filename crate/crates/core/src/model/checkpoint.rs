//! Checkpoint container:
//!
//! ```text
//! b"RHVAECK1" | u64 LE header length | JSON header | f64 LE blocks
//! ```
//!
//! Blocks follow the header's parameter list, then the metric field's
//! centroids and factors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, RhvaeModel};
use crate::error::{Error, Result};
use crate::metric::MetricField;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"RHVAECK1";
const MAX_HEADER: u64 = 1 << 26;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    points: usize,
    dim: usize,
    temperature: f64,
    lambda: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<ParamEntry>,
    field: FieldHeader,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_block<T: Scalar, W: Write>(w: &mut W, data: &[T]) -> Result<()> {
    for v in data {
        w.write_all(&v.to_f64_lossy().to_le_bytes())?;
    }
    Ok(())
}

fn read_block<T: Scalar, R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<T>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|_| corrupt(format!("truncated data in block `{what}`")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect())
}

pub fn write_checkpoint<T: Scalar, W: Write>(model: &RhvaeModel<T>, mut w: W) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        params: model
            .param_names()
            .into_iter()
            .zip(model.params())
            .map(|(name, p)| ParamEntry {
                name,
                shape: p.shape().to_vec(),
            })
            .collect(),
        field: FieldHeader {
            points: model.field.len(),
            dim: model.field.dim(),
            temperature: model.field.temperature().to_f64_lossy(),
            lambda: model.field.lambda().to_f64_lossy(),
        },
    };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in model.params() {
        write_block(&mut w, p.data())?;
    }
    write_block(&mut w, model.field.centroids())?;
    write_block(&mut w, model.field.factors())?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<RhvaeModel<T>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("file too short"))?;
    if &magic != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| corrupt("truncated header length"))?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(corrupt(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(|_| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| corrupt(format!("bad header: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| corrupt(format!("bad config in header: {e}")))?;

    // the seed is irrelevant: every parameter is overwritten below
    let mut model = RhvaeModel::<T>::new(header.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let names = model.param_names();
    if names.len() != header.params.len() {
        return Err(corrupt(format!(
            "header lists {} parameters, the architecture has {}",
            header.params.len(),
            names.len()
        )));
    }
    for ((p, name), entry) in model.params_mut().into_iter().zip(&names).zip(&header.params) {
        if &entry.name != name || entry.shape != p.shape() {
            return Err(corrupt(format!(
                "parameter `{}` {:?} does not match `{name}` {:?}",
                entry.name,
                entry.shape,
                p.shape()
            )));
        }
        let data = read_block::<T, _>(&mut r, p.len(), name)?;
        p.data_mut().copy_from_slice(&data);
    }
    let f = &header.field;
    if f.dim != model.latent_dim() {
        return Err(corrupt(format!("field dim {} != latent dim {}", f.dim, model.latent_dim())));
    }
    let c = read_block::<T, _>(&mut r, f.points * f.dim, "centroids")?;
    let l = read_block::<T, _>(&mut r, f.points * f.dim * f.dim, "factors")?;
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(corrupt("trailing bytes after the last block"));
    }
    model.field = if f.points == 0 {
        MetricField::empty(f.dim, T::lit(f.temperature), T::lit(f.lambda))
    } else {
        MetricField::new(f.dim, c, l, T::lit(f.temperature), T::lit(f.lambda))
    }
    .map_err(|e| corrupt(format!("bad metric field: {e}")))?;
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &RhvaeModel<T>, path: &Path) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<RhvaeModel<T>> {
    let f = File::open(path).map_err(|e| corrupt(format!("cannot open {}: {e}", path.display())))?;
    read_checkpoint(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;
    use crate::numcore::Tensor;

    fn model(mode: Mode) -> RhvaeModel<f64> {
        let mut c = ModelConfig::shapes_preset(6).with_mode(mode);
        c.hidden = 5;
        let mut m = RhvaeModel::new(c, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x = Tensor::new(&[3, 6], (0..18).map(|i| (i % 2) as f64).collect()).unwrap();
        m.refresh_field(&x).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        for mode in [Mode::Vae, Mode::Hvae, Mode::Rhvae] {
            let m = model(mode);
            let mut buf = Vec::new();
            write_checkpoint(&m, &mut buf).unwrap();
            let back: RhvaeModel<f64> = read_checkpoint(&buf[..]).unwrap();
            for (a, b) in m.params().iter().zip(back.params()) {
                let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                assert!(same);
            }
            assert_eq!(m.field, back.field);
            assert_eq!(m.config, back.config);
        }
    }

    #[test]
    fn corruption_is_reported() {
        let m = model(Mode::Rhvae);
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let cut = read_checkpoint::<f64, _>(&buf[..buf.len() - 3]);
        assert!(matches!(cut, Err(Error::Checkpoint(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint::<f64, _>(&bad[..]), Err(Error::Checkpoint(_))));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(read_checkpoint::<f64, _>(&extra[..]), Err(Error::Checkpoint(_))));
    }
}

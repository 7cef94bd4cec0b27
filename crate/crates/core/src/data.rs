//! Pose samples and datasets, the `GSHP` binary format, CSV fixtures,
//! coordinate normalization and shuffled batching.
//!
//! # `GSHP` layout (little-endian)
//!
//! | field        | type                        |
//! |--------------|-----------------------------|
//! | magic        | `b"GSHP"`                   |
//! | version      | `u16` (currently 1)         |
//! | sample count | `u32`                       |
//! | joint count  | `u32`, must be 16           |
//! | has_actions  | `u8` (0 or 1)               |
//! | records      | per sample: 32 `f32` inputs, 48 `f32` targets, then a `u16` action id if flagged |
//!
//! # CSV columns
//!
//! `action, x0, y0, ..., x15, y15, X0, Y0, Z0, ..., X15, Y15, Z15` with a
//! header row. `action` may be empty.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{put_u16, put_u32, read_header, Reader};
use crate::error::{Error, Result};
use crate::skeleton::FINE_JOINTS;
use crate::tensor::Tensor;

pub const JOINTS: usize = FINE_JOINTS;
pub const DATASET_MAGIC: [u8; 4] = *b"GSHP";
pub const DATASET_VERSION: u16 = 1;
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSample {
    /// Pixel coordinates.
    pub input2d: [[f64; 2]; JOINTS],
    /// Millimeters, root-relative.
    pub target3d: [[f64; 3]; JOINTS],
    pub action: Option<u16>,
}

impl PoseSample {
    pub fn is_finite(&self) -> bool {
        self.input2d.iter().flatten().all(|v| v.is_finite())
            && self.target3d.iter().flatten().all(|v| v.is_finite())
    }

    /// Target with joint 0 moved to the origin.
    pub fn root_aligned_target(&self) -> [[f64; 3]; JOINTS] {
        root_align(&self.target3d)
    }
}

pub fn root_align(pose: &[[f64; 3]; JOINTS]) -> [[f64; 3]; JOINTS] {
    let root = pose[0];
    pose.map(|j| [j[0] - root[0], j[1] - root[1], j[2] - root[2]])
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseDataset {
    pub samples: Vec<PoseSample>,
    pub normalizer: Option<Normalizer>,
}

impl PoseDataset {
    pub fn new(samples: Vec<PoseSample>) -> Self {
        Self {
            samples,
            normalizer: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_actions(&self) -> bool {
        self.samples.iter().any(|s| s.action.is_some())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            normalizer: self.normalizer.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let flagged = self.has_actions();
        if flagged && self.samples.iter().any(|s| s.action.is_none()) {
            return Err(Error::Format(
                "either every sample has an action id or none does".into(),
            ));
        }
        let mut out = Vec::with_capacity(15 + self.len() * (80 * 4 + 2));
        out.extend_from_slice(&DATASET_MAGIC);
        put_u16(&mut out, DATASET_VERSION);
        put_u32(&mut out, self.len() as u32);
        put_u32(&mut out, JOINTS as u32);
        out.push(flagged as u8);
        for (i, s) in self.samples.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("sample {i}")));
            }
            for v in s
                .input2d
                .iter()
                .flatten()
                .chain(s.target3d.iter().flatten())
            {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            if let Some(a) = s.action.filter(|_| flagged) {
                put_u16(&mut out, a);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        read_header(&mut r, DATASET_MAGIC, DATASET_VERSION)?;
        let n = r.u32("sample count")? as usize;
        let k = r.u32("joint count")? as usize;
        if k != JOINTS {
            return Err(Error::Format(format!(
                "dataset has {k} joints, expected {JOINTS}"
            )));
        }
        let flagged = match r.u8("has_actions")? {
            0 => false,
            1 => true,
            v => return Err(Error::Corrupted(format!("has_actions flag is {v}"))),
        };
        let mut samples = Vec::with_capacity(n.min(1 << 20));
        for i in 0..n {
            let mut s = PoseSample {
                input2d: [[0.0; 2]; JOINTS],
                target3d: [[0.0; 3]; JOINTS],
                action: None,
            };
            for v in s.input2d.iter_mut().flatten() {
                *v = r.f32("input")? as f64;
            }
            for v in s.target3d.iter_mut().flatten() {
                *v = r.f32("target")? as f64;
            }
            if flagged {
                s.action = Some(r.u16("action id")?);
            }
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("sample {i}")));
            }
            samples.push(s);
        }
        r.finish()?;
        Ok(Self::new(samples))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Like [`load`](Self::load), but reads CSV when the extension is `.csv`.
    pub fn load_any(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if is_csv(path) {
            Self::read_csv(std::fs::File::open(path)?)
        } else {
            Self::load(path)
        }
    }

    /// Like [`save`](Self::save), but writes CSV when the extension is `.csv`.
    pub fn save_any(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if is_csv(path) {
            self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
        } else {
            self.save(path)
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(csv_header()).map_err(csv_err)?;
        for s in &self.samples {
            let mut row = vec![s.action.map(|a| a.to_string()).unwrap_or_default()];
            row.extend(s.input2d.iter().flatten().map(|v| v.to_string()));
            row.extend(s.target3d.iter().flatten().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(csv_err)?.clone();
        let expected = csv_header();
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::Format(format!(
                "CSV header must be `{}`",
                expected.join(",")
            )));
        }
        let mut samples = Vec::new();
        for (line, record) in r.records().enumerate() {
            let record = record.map_err(csv_err)?;
            let field = |i: usize| -> Result<f64> {
                record[i].trim().parse().map_err(|_| {
                    Error::Format(format!(
                        "row {}: column {} is not a number",
                        line + 1,
                        expected[i]
                    ))
                })
            };
            let action = match record[0].trim() {
                "" => None,
                a => Some(a.parse().map_err(|_| {
                    Error::Format(format!("row {}: action `{a}` is not a u16", line + 1))
                })?),
            };
            let mut s = PoseSample {
                input2d: [[0.0; 2]; JOINTS],
                target3d: [[0.0; 3]; JOINTS],
                action,
            };
            for (j, v) in s.input2d.iter_mut().flatten().enumerate() {
                *v = field(1 + j)?;
            }
            for (j, v) in s.target3d.iter_mut().flatten().enumerate() {
                *v = field(1 + 2 * JOINTS + j)?;
            }
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("CSV row {}", line + 1)));
            }
            samples.push(s);
        }
        Ok(Self::new(samples))
    }
}

fn csv_header() -> Vec<String> {
    let mut h = vec!["action".to_string()];
    for j in 0..JOINTS {
        h.push(format!("x{j}"));
        h.push(format!("y{j}"));
    }
    for j in 0..JOINTS {
        h.push(format!("X{j}"));
        h.push(format!("Y{j}"));
        h.push(format!("Z{j}"));
    }
    h
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("CSV: {e}"))
}

/// Per-coordinate standardization fit on training data. Targets are root
/// aligned before their statistics are taken.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(train: &PoseDataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Validation(
                "cannot fit a normalizer on an empty dataset".into(),
            ));
        }
        let inputs: Vec<Vec<f64>> = train
            .samples
            .iter()
            .map(|s| s.input2d.iter().flatten().copied().collect())
            .collect();
        let targets: Vec<Vec<f64>> = train
            .samples
            .iter()
            .map(|s| s.root_aligned_target().iter().flatten().copied().collect())
            .collect();
        let (input_mean, input_std) = moments(&inputs);
        let (target_mean, target_std) = moments(&targets);
        Ok(Self {
            input_mean,
            input_std,
            target_mean,
            target_std,
        })
    }

    /// `[B, 16, 2]` standardized inputs.
    pub fn inputs(&self, samples: &[&PoseSample]) -> Tensor {
        let mut t = Tensor::zeros(&[samples.len(), JOINTS, 2]);
        for (row, s) in t.data_mut().chunks_mut(2 * JOINTS).zip(samples) {
            for (i, (o, v)) in row.iter_mut().zip(s.input2d.iter().flatten()).enumerate() {
                *o = (v - self.input_mean[i]) / self.input_std[i];
            }
        }
        t
    }

    /// `[B, 16, 3]` standardized, root-aligned targets.
    pub fn targets(&self, samples: &[&PoseSample]) -> Tensor {
        let mut t = Tensor::zeros(&[samples.len(), JOINTS, 3]);
        for (row, s) in t.data_mut().chunks_mut(3 * JOINTS).zip(samples) {
            let aligned = s.root_aligned_target();
            for (i, (o, v)) in row.iter_mut().zip(aligned.iter().flatten()).enumerate() {
                *o = (v - self.target_mean[i]) / self.target_std[i];
            }
        }
        t
    }

    /// Standardized `[B, 16, 3]` values back to millimeters.
    pub fn denormalize_targets(&self, t: &Tensor) -> Result<Tensor> {
        let n = 3 * JOINTS;
        if !t.len().is_multiple_of(n) || t.shape().last() != Some(&3) {
            return Err(Error::shape(
                "denormalize_targets",
                format!("got {:?}", t.shape()),
            ));
        }
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (i, v) in row.iter_mut().enumerate() {
                *v = *v * self.target_std[i] + self.target_mean[i];
            }
        }
        Ok(out)
    }

    pub fn denormalize_inputs(&self, t: &Tensor) -> Result<Tensor> {
        let n = 2 * JOINTS;
        if !t.len().is_multiple_of(n) || t.shape().last() != Some(&2) {
            return Err(Error::shape(
                "denormalize_inputs",
                format!("got {:?}", t.shape()),
            ));
        }
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (i, v) in row.iter_mut().enumerate() {
                *v = *v * self.input_std[i] + self.input_mean[i];
            }
        }
        Ok(out)
    }
}

fn moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| (s / n).sqrt().max(STD_FLOOR))
        .collect();
    (mean, std)
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Sample order for one epoch: a uniform shuffle seeded by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Index batches over `epochs` shuffled passes; each epoch ends with a short
/// batch when `n` is not a multiple of `batch_size`.
pub fn batch_iter(
    n: usize,
    batch_size: usize,
    seed: u64,
    epochs: u64,
) -> Result<impl Iterator<Item = Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    Ok((0..epochs).flat_map(move |e| {
        epoch_order(n, seed, e)
            .chunks(batch_size)
            .map(<[usize]>::to_vec)
            .collect::<Vec<_>>()
    }))
}

//! Model and checkpoint files.
//!
//! # `GSHM` layout (little-endian)
//!
//! 1. magic `b"GSHM"`, `u16` version (currently 1)
//! 2. `u32`-length-prefixed JSON: `{"network": NetworkConfig, "skeleton": SkeletonConfig}`
//! 3. `u32`-length-prefixed 32-byte skeleton topology hash (SHA-256)
//! 4. `u32` tensor count, then per tensor in declaration order: `u32` rank,
//!    `u32` dims, `f64` values
//! 5. `u32` batch-norm buffer count, then per buffer: `u32` channels, running
//!    means and running variances as `f64`
//! 6. `u8` normalizer flag; when 1, four `u32`-length-prefixed `f64` vectors
//!    (input mean, input std, target mean, target std)
//!
//! A checkpoint is a model file followed by `b"ADAM"`, the `u64` step count,
//! the `u64` training iteration, the best validation MPJPE as `f64`, then the
//! first and second moment values for every tensor.

use serde::{Deserialize, Serialize};

use crate::autograd::RunningStats;
use crate::binio::{
    put_f64, put_section, put_u16, put_u32, put_u64, read_header, read_section, Reader,
};
use crate::data::{Normalizer, JOINTS};
use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig};
use crate::params::Initializer;
use crate::skeleton::{SkeletonConfig, SkeletonSpec};
use crate::tensor::Tensor;
use crate::training::AdamState;

pub const MODEL_MAGIC: [u8; 4] = *b"GSHM";
pub const MODEL_VERSION: u16 = 1;
const ADAM_MAGIC: [u8; 4] = *b"ADAM";

#[derive(Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    skeleton: SkeletonConfig,
}

/// A model with the normalizer it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedModel {
    pub model: Model,
    pub normalizer: Option<Normalizer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub saved: SavedModel,
    pub adam: AdamState,
    pub iteration: u64,
    pub best_val_mpjpe: f64,
}

pub fn serialize_model(model: &Model, normalizer: Option<&Normalizer>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    put_u16(&mut out, MODEL_VERSION);
    let header = Header {
        network: model.config.clone(),
        skeleton: model.skeleton.to_config(),
    };
    put_section(
        &mut out,
        &serde_json::to_vec(&header).expect("config serializes"),
    );
    put_section(&mut out, &model.skeleton.topology_hash());

    let values = model.params.values();
    put_u32(&mut out, values.len() as u32);
    for t in values {
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        put_f64s(&mut out, t.data());
    }
    let running = model.params.running_all();
    put_u32(&mut out, running.len() as u32);
    for r in running {
        put_u32(&mut out, r.mean.len() as u32);
        put_f64s(&mut out, &r.mean);
        put_f64s(&mut out, &r.var);
    }
    match normalizer {
        None => out.push(0),
        Some(n) => {
            out.push(1);
            for v in [&n.input_mean, &n.input_std, &n.target_mean, &n.target_std] {
                put_u32(&mut out, v.len() as u32);
                put_f64s(&mut out, v);
            }
        }
    }
    out
}

/// Parses a model file. When `expected` is given, the file must have been
/// saved against a skeleton with the same topology.
pub fn deserialize_model(bytes: &[u8], expected: Option<&SkeletonSpec>) -> Result<SavedModel> {
    let mut r = Reader::new(bytes);
    let saved = read_model(&mut r, expected)?;
    r.finish()?;
    Ok(saved)
}

fn read_model(r: &mut Reader<'_>, expected: Option<&SkeletonSpec>) -> Result<SavedModel> {
    read_header(r, MODEL_MAGIC, MODEL_VERSION)?;
    let header: Header = serde_json::from_slice(read_section(r, "config")?)
        .map_err(|e| Error::Corrupted(format!("config section: {e}")))?;
    let hash = read_section(r, "skeleton hash")?;
    if hash.len() != 32 {
        return Err(Error::Corrupted(format!(
            "skeleton hash has {} bytes",
            hash.len()
        )));
    }
    if let Some(spec) = expected {
        if spec.topology_hash() != hash {
            return Err(Error::SkeletonMismatch);
        }
    }
    let skeleton = header
        .skeleton
        .build()
        .map_err(|e| Error::Corrupted(format!("embedded skeleton: {e}")))?;
    if skeleton.topology_hash() != hash {
        return Err(Error::Corrupted(
            "embedded skeleton does not match its hash".into(),
        ));
    }
    let mut model = Model::with_initializer(header.network, skeleton, &mut Initializer::zeros())
        .map_err(|e| Error::Corrupted(format!("embedded config: {e}")))?;

    let count = r.u32("tensor count")? as usize;
    if count != model.params.len() {
        return Err(Error::Corrupted(format!(
            "{count} tensors stored, the configuration declares {}",
            model.params.len()
        )));
    }
    for (i, slot) in model.params.values_mut().iter_mut().enumerate() {
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("tensor dims")? as usize);
        }
        if shape != slot.shape() {
            return Err(Error::Corrupted(format!(
                "tensor {i} has shape {shape:?}, expected {:?}",
                slot.shape()
            )));
        }
        read_f64s(r, slot.data_mut(), "tensor values")?;
    }
    let buffers = r.u32("buffer count")? as usize;
    if buffers != model.params.running_all().len() {
        return Err(Error::Corrupted(format!(
            "{buffers} batch-norm buffers stored"
        )));
    }
    for stats in model.params.running_all_mut() {
        let c = r.u32("buffer channels")? as usize;
        if c != stats.mean.len() {
            return Err(Error::Corrupted(format!(
                "batch-norm buffer of {c} channels"
            )));
        }
        let mut fresh = RunningStats::identity(c);
        read_f64s(r, &mut fresh.mean, "running mean")?;
        read_f64s(r, &mut fresh.var, "running variance")?;
        *stats = fresh;
    }
    let normalizer = match r.u8("normalizer flag")? {
        0 => None,
        1 => {
            let mut v = Vec::with_capacity(4);
            for want in [2 * JOINTS, 2 * JOINTS, 3 * JOINTS, 3 * JOINTS] {
                let n = r.u32("normalizer length")? as usize;
                if n != want {
                    return Err(Error::Corrupted(format!(
                        "normalizer vector of length {n}, expected {want}"
                    )));
                }
                let mut buf = vec![0.0; n];
                read_f64s(r, &mut buf, "normalizer")?;
                v.push(buf);
            }
            let target_std = v.pop().unwrap();
            let target_mean = v.pop().unwrap();
            let input_std = v.pop().unwrap();
            let input_mean = v.pop().unwrap();
            Some(Normalizer {
                input_mean,
                input_std,
                target_mean,
                target_std,
            })
        }
        f => return Err(Error::Corrupted(format!("normalizer flag is {f}"))),
    };
    Ok(SavedModel { model, normalizer })
}

pub fn serialize_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut out = serialize_model(&c.saved.model, c.saved.normalizer.as_ref());
    out.extend_from_slice(&ADAM_MAGIC);
    put_u64(&mut out, c.adam.step);
    put_u64(&mut out, c.iteration);
    put_f64(&mut out, c.best_val_mpjpe);
    for t in c.adam.m.iter().chain(&c.adam.v) {
        put_f64s(&mut out, t.data());
    }
    out
}

pub fn deserialize_checkpoint(bytes: &[u8], expected: Option<&SkeletonSpec>) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    let saved = read_model(&mut r, expected)?;
    let magic = r.array::<4>("optimizer magic")?;
    if magic != ADAM_MAGIC {
        return Err(Error::BadMagic {
            expected: ADAM_MAGIC,
            found: magic,
        });
    }
    let step = r.u64("adam step")?;
    let iteration = r.u64("iteration")?;
    let best_val_mpjpe = r.f64("best validation MPJPE")?;
    let zeros = || -> Vec<Tensor> {
        saved
            .model
            .params
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect()
    };
    let (mut m, mut v) = (zeros(), zeros());
    for t in m.iter_mut().chain(v.iter_mut()) {
        read_f64s(&mut r, t.data_mut(), "adam moments")?;
    }
    r.finish()?;
    Ok(Checkpoint {
        saved,
        adam: AdamState { step, m, v },
        iteration,
        best_val_mpjpe,
    })
}

pub fn save_model(
    path: impl AsRef<std::path::Path>,
    model: &Model,
    normalizer: Option<&Normalizer>,
) -> Result<()> {
    std::fs::write(path, serialize_model(model, normalizer))?;
    Ok(())
}

pub fn load_model(
    path: impl AsRef<std::path::Path>,
    expected: Option<&SkeletonSpec>,
) -> Result<SavedModel> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes);
    let saved = read_model(&mut r, expected)?;
    if r.is_empty() {
        Ok(saved)
    } else {
        // a checkpoint: model file plus optimizer section
        Ok(deserialize_checkpoint(&bytes, expected)?.saved)
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for &v in values {
        put_f64(out, v);
    }
}

fn read_f64s(r: &mut Reader<'_>, dst: &mut [f64], what: &str) -> Result<()> {
    let bytes = r.take(dst.len() * 8, what)?;
    for (d, chunk) in dst.iter_mut().zip(bytes.chunks_exact(8)) {
        *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ConvKind;
    use crate::skeleton::build_default_skeleton;

    fn small() -> Model {
        let cfg = NetworkConfig {
            stacks: 2,
            channels: 16,
            conv_kind: ConvKind::Semantic,
            ..NetworkConfig::default()
        };
        let mut m = Model::new(cfg, build_default_skeleton(), 3).unwrap();
        for (i, r) in m.params.running_all_mut().iter_mut().enumerate() {
            r.mean.iter_mut().for_each(|v| *v = i as f64 * 0.5);
        }
        m
    }

    fn normalizer() -> Normalizer {
        Normalizer {
            input_mean: vec![1.0; 32],
            input_std: vec![2.0; 32],
            target_mean: vec![-0.5; 48],
            target_std: vec![1e-8; 48],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        for norm in [None, Some(normalizer())] {
            let bytes = serialize_model(&m, norm.as_ref());
            let back = deserialize_model(&bytes, Some(&m.skeleton)).unwrap();
            assert_eq!(back.model, m);
            assert_eq!(back.normalizer, norm);
            assert_eq!(
                serialize_model(&back.model, back.normalizer.as_ref()),
                bytes
            );
        }
    }

    #[test]
    fn truncation_is_reported_not_panicking() {
        let bytes = serialize_model(&small(), Some(&normalizer()));
        for cut in [0, 3, 5, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = deserialize_model(&bytes[..cut], None).unwrap_err();
            assert!(
                matches!(err, Error::Corrupted(_) | Error::BadMagic { .. }),
                "cut {cut}: {err}"
            );
        }
    }

    #[test]
    fn header_errors_are_distinct() {
        let mut bytes = serialize_model(&small(), None);
        bytes[4] = 9;
        assert!(matches!(
            deserialize_model(&bytes, None),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            deserialize_model(&bytes, None),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn refuses_a_different_skeleton() {
        let m = small();
        let bytes = serialize_model(&m, None);
        let mut other = SkeletonConfig::default();
        other.pool_16_to_8.swap(2, 3);
        let other = other.build().unwrap();
        assert!(matches!(
            deserialize_model(&bytes, Some(&other)),
            Err(Error::SkeletonMismatch)
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = small();
        let shapes: Vec<Tensor> = m
            .params
            .values()
            .iter()
            .map(|t| Tensor::full(t.shape(), 0.125))
            .collect();
        let c = Checkpoint {
            saved: SavedModel {
                model: m,
                normalizer: Some(normalizer()),
            },
            adam: AdamState {
                step: 17,
                m: shapes.clone(),
                v: shapes,
            },
            iteration: 17,
            best_val_mpjpe: 42.5,
        };
        let bytes = serialize_checkpoint(&c);
        let back = deserialize_checkpoint(&bytes, None).unwrap();
        assert_eq!(back, c);
        assert_eq!(serialize_checkpoint(&back), bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.gshm");
        std::fs::write(&path, &bytes).unwrap();
        assert_eq!(load_model(&path, None).unwrap(), c.saved);
    }
}

//! "ACM1" model container.
//!
//! Layout (little endian): magic `ACM1`, u32 version, the plan (u32 input
//! side, u32 conv count, u32 per conv width, u32 dense layers, u32 dense
//! width, f64 dropout), u64 seed, u32 epochs run, u32 log length and per
//! entry u32 epoch plus three f64, u32 layer count, then per layer a u32
//! weight count, f32 weights, a u32 bias count and f32 biases.

use std::path::Path;

use super::{CnnModel, EpochLog, LayerParams, LayerPlan, TrainMeta};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MODEL_MAGIC: &[u8; 4] = b"ACM1";
pub const MODEL_VERSION: u32 = 1;

pub fn encode_model<T: Scalar>(model: &CnnModel<T>) -> Vec<u8> {
    let mut b = Vec::with_capacity(64 + model.param_count() * 4);
    b.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut b, MODEL_VERSION);
    let p = &model.plan;
    put_u32(&mut b, p.input_side as u32);
    put_u32(&mut b, p.conv_maps.len() as u32);
    for &m in &p.conv_maps {
        put_u32(&mut b, m as u32);
    }
    put_u32(&mut b, p.dense_layers as u32);
    put_u32(&mut b, p.dense_units as u32);
    b.extend_from_slice(&p.dropout.to_le_bytes());
    b.extend_from_slice(&model.seed.to_le_bytes());
    put_u32(&mut b, model.meta.epochs_run);
    put_u32(&mut b, model.meta.log.len() as u32);
    for e in &model.meta.log {
        put_u32(&mut b, e.epoch);
        for v in [e.train_loss, e.val_loss, e.val_acc] {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_u32(&mut b, model.layers.len() as u32);
    for l in &model.layers {
        for part in [&l.weights, &l.bias] {
            put_u32(&mut b, part.len() as u32);
            for &v in part.iter() {
                b.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
            }
        }
    }
    b
}

pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<CnnModel<T>> {
    let mut r = Reader { b: bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MODEL_MAGIC {
        return Err(Error::ModelFormat(format!(
            "bad magic {:?}, expected \"ACM1\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported version {version}, expected {MODEL_VERSION}"
        )));
    }
    let input_side = r.u32()? as usize;
    let n_conv = r.u32()? as usize;
    if n_conv > 64 {
        return Err(Error::ModelFormat(format!("implausible conv count {n_conv}")));
    }
    let conv_maps = (0..n_conv).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let dense_layers = r.u32()? as usize;
    let dense_units = r.u32()? as usize;
    let dropout = r.f64()?;
    let plan = LayerPlan {
        input_side,
        conv_maps,
        dense_layers,
        dense_units,
        dropout,
    };
    plan.validate()
        .map_err(|e| Error::ModelFormat(format!("invalid plan: {e}")))?;
    let seed = r.u64()?;
    let epochs_run = r.u32()?;
    let n_log = r.u32()? as usize;
    let mut log = Vec::new();
    for _ in 0..n_log {
        log.push(EpochLog {
            epoch: r.u32()?,
            train_loss: r.f64()?,
            val_loss: r.f64()?,
            val_acc: r.f64()?,
        });
    }
    let shapes = plan.layer_shapes();
    let n_layers = r.u32()? as usize;
    if n_layers != shapes.len() {
        return Err(Error::ModelFormat(format!(
            "file has {n_layers} layers, plan implies {}",
            shapes.len()
        )));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (i, &(nw, nb)) in shapes.iter().enumerate() {
        let weights = r.tensor(nw, i, "weights")?;
        let bias = r.tensor(nb, i, "bias")?;
        layers.push(LayerParams { weights, bias });
    }
    if r.pos != bytes.len() {
        return Err(Error::ModelFormat(format!(
            "{} trailing bytes after last layer",
            bytes.len() - r.pos
        )));
    }
    Ok(CnnModel {
        plan,
        layers,
        seed,
        meta: TrainMeta { epochs_run, log },
    })
}

pub fn save_model<T: Scalar>(model: &CnnModel<T>, path: impl AsRef<Path>) -> Result<()> {
    crate::imaging::write_bytes(path.as_ref(), &encode_model(model))
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<CnnModel<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes).map_err(|e| match e {
        Error::ModelFormat(m) => Error::ModelFormat(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| {
            Error::ModelFormat(format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor<T: Scalar>(&mut self, expect: usize, layer: usize, what: &str) -> Result<Vec<T>> {
        let n = self.u32()? as usize;
        if n != expect {
            return Err(Error::ModelFormat(format!(
                "layer {layer} {what}: {n} values, plan implies {expect}"
            )));
        }
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> CnnModel<f32> {
        let mut m = CnnModel::new(LayerPlan::reduced(), 42).unwrap();
        m.meta = TrainMeta {
            epochs_run: 1,
            log: vec![EpochLog {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                val_acc: 0.75,
            }],
        };
        m
    }

    #[test]
    fn round_trip_bit_exact() {
        let m = model();
        let bytes = encode_model(&m);
        let back: CnnModel<f32> = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.acm");
        let m = model();
        save_model(&m, &path).unwrap();
        assert_eq!(load_model::<f32>(&path).unwrap(), m);
    }

    #[test]
    fn truncated() {
        let bytes = encode_model(&model());
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            let e = decode_model::<f32>(&bytes[..cut]).unwrap_err();
            assert!(matches!(e, Error::ModelFormat(_)), "{e}");
        }
    }

    #[test]
    fn wrong_magic_names_expected() {
        let mut bytes = encode_model(&model());
        bytes[3] = b'2';
        let e = decode_model::<f32>(&bytes).unwrap_err();
        assert!(matches!(&e, Error::ModelFormat(m) if m.contains("\"ACM1\"")), "{e}");
    }

    #[test]
    fn shape_mismatch() {
        let m = model();
        let mut bytes = encode_model(&m);
        // first conv width lives after magic, version, side and count
        bytes[16..20].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(decode_model::<f32>(&bytes), Err(Error::ModelFormat(_))));
    }
}

//! Binary tensor record files, used for checkpoints and dataset samples.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GLAMCKPT"  u32 version  u32 record_count
//! per record: u32 name_len, name (utf-8), u8 dtype, u32 rank,
//!             u64 extent × rank, raw values
//! ```

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{bail, GlamError, Result};
use crate::model::SegModel;
use crate::nn::Module;
use crate::tensor::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"GLAMCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl RecordData {
    pub fn dtype(&self) -> DType {
        match self {
            RecordData::F32(_) => DType::F32,
            RecordData::F64(_) => DType::F64,
            RecordData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RecordData::F32(v) => v.len(),
            RecordData::F64(v) => v.len(),
            RecordData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Floating-point values widened to `f64`; `None` for `u8` data.
    pub fn to_f64(&self) -> Option<Vec<f64>> {
        match self {
            RecordData::F32(v) => Some(v.iter().map(|&x| x as f64).collect()),
            RecordData::F64(v) => Some(v.clone()),
            RecordData::U8(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: RecordData,
}

impl Record {
    pub fn new(name: impl Into<String>, shape: &[usize], data: RecordData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            bail!(Dimension, "record shape {shape:?} needs {n} values, got {}", data.len());
        }
        Ok(Self { name: name.into(), shape: shape.to_vec(), data })
    }

    pub fn from_scalars<T: Scalar>(name: impl Into<String>, shape: &[usize], values: &[T]) -> Result<Self> {
        let mut raw = Vec::with_capacity(values.len() * T::DTYPE.size());
        values.iter().for_each(|v| v.write_le(&mut raw));
        let data = match T::DTYPE {
            DType::F32 => RecordData::F32(raw.chunks(4).map(f32::read_le).collect()),
            DType::F64 => RecordData::F64(raw.chunks(8).map(f64::read_le).collect()),
            DType::U8 => unreachable!("no u8 scalar type"),
        };
        Self::new(name, shape, data)
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.data.dtype() as u8);
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &e in &r.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match &r.data {
            RecordData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RecordData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RecordData::U8(v) => out.extend_from_slice(v),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            bail!(Checkpoint, "truncated file: need {n} bytes at offset {}", self.pos);
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(8)? != MAGIC {
        bail!(Checkpoint, "bad magic bytes");
    }
    let version = rd.u32()?;
    if version != VERSION {
        bail!(Checkpoint, "unsupported version {version}");
    }
    let count = rd.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = rd.u32()? as usize;
        let name = std::str::from_utf8(rd.take(len)?)
            .map_err(|_| GlamError::Checkpoint("record name is not utf-8".into()))?
            .to_string();
        let tag = rd.take(1)?[0];
        let Some(dtype) = DType::from_tag(tag) else {
            bail!(Checkpoint, "record {name}: unknown dtype tag {tag}");
        };
        let rank = rd.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(rd.u64()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let Some(n) = n else {
            bail!(Checkpoint, "record {name}: shape {shape:?} overflows");
        };
        let raw = rd.take(n.checked_mul(dtype.size()).unwrap_or(usize::MAX))?;
        let data = match dtype {
            DType::F32 => RecordData::F32(raw.chunks(4).map(f32::read_le).collect()),
            DType::F64 => RecordData::F64(raw.chunks(8).map(f64::read_le).collect()),
            DType::U8 => RecordData::U8(raw.to_vec()),
        };
        out.push(Record { name, shape, data });
    }
    if rd.pos != bytes.len() {
        bail!(Checkpoint, "{} trailing bytes", bytes.len() - rd.pos);
    }
    Ok(out)
}

pub fn write_file(path: &Path, records: &[Record]) -> Result<()> {
    std::fs::write(path, encode(records))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<Record>> {
    decode(&std::fs::read(path)?)
}

// ── Model checkpoints ─────────────────────────────────────────────────────

pub fn model_records<T: Scalar, M: Module<T>>(model: &M) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    let mut err = None;
    model.visit("", &mut |name, t| match Record::from_scalars(name, t.shape(), &t.data()) {
        Ok(r) => out.push(r),
        Err(e) => err = Some(e),
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

pub fn save_model<T: Scalar>(model: &SegModel<T>, path: &Path) -> Result<()> {
    write_file(path, &model_records(model)?)
}

/// Copies `records` into `model`, requiring the same names in the same order
/// with matching shapes.
pub fn load_into<T: Scalar, M: Module<T>>(model: &M, records: &[Record]) -> Result<()> {
    let params = model.parameters();
    if params.len() != records.len() {
        bail!(Checkpoint, "checkpoint has {} tensors, model expects {}", records.len(), params.len());
    }
    for ((name, t), r) in params.iter().zip(records) {
        if *name != r.name {
            bail!(Checkpoint, "expected tensor {name}, found {}", r.name);
        }
        if t.shape() != r.shape.as_slice() {
            bail!(Checkpoint, "tensor {name}: model shape {:?}, checkpoint shape {:?}", t.shape(), r.shape);
        }
        let Some(values) = r.data.to_f64() else {
            bail!(Checkpoint, "tensor {name} is not floating point");
        };
        t.data_mut().iter_mut().zip(values).for_each(|(d, v)| *d = T::from_f64(v));
    }
    Ok(())
}

/// Builds a model for `config` and fills it from the checkpoint at `path`.
pub fn load_model<T: Scalar>(config: &ModelConfig, path: &Path) -> Result<SegModel<T>> {
    let model = SegModel::new(config, 0)?;
    load_into(&model, &read_file(path)?)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::StageSpec;

    fn small() -> ModelConfig {
        ModelConfig {
            image_height: 16,
            image_width: 16,
            patch: 2,
            channels: 4,
            window: 2,
            stages: vec![StageSpec { blocks: 1, glam: true }; 2],
            n_globals: 2,
            classes: 3,
            heads: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn header_layout() {
        let r = Record::new("ab", &[2], RecordData::U8(vec![7, 9])).unwrap();
        let bytes = encode(&[r]);
        assert_eq!(&bytes[..8], b"GLAMCKPT");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..22], b"ab");
        assert_eq!(bytes[22], 2);
        assert_eq!(&bytes[23..27], &1u32.to_le_bytes());
        assert_eq!(&bytes[27..35], &2u64.to_le_bytes());
        assert_eq!(&bytes[35..], &[7, 9]);
    }

    #[test]
    fn records_round_trip() {
        let recs = vec![
            Record::new("a", &[2, 2], RecordData::F32(vec![1.0, -2.5, 3.25, 0.0])).unwrap(),
            Record::new("b.c", &[], RecordData::F64(vec![std::f64::consts::PI])).unwrap(),
            Record::new("lbl", &[3], RecordData::U8(vec![0, 4, 255])).unwrap(),
        ];
        assert_eq!(decode(&encode(&recs)).unwrap(), recs);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let recs = vec![Record::new("a", &[2], RecordData::F32(vec![1.0, 2.0])).unwrap()];
        let bytes = encode(&recs);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn model_round_trip_is_exact() {
        let cfg = small();
        let m = SegModel::<f32>::new(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&m, &path).unwrap();
        let back = load_model::<f32>(&cfg, &path).unwrap();
        let (a, b) = (m.parameters(), back.parameters());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let cfg = small();
        let m = SegModel::<f32>::new(&cfg, 3).unwrap();
        let recs = model_records(&m).unwrap();
        let mut other = cfg.clone();
        other.n_globals = 3;
        let m2 = SegModel::<f32>::new(&other, 3).unwrap();
        let err = load_into(&m2, &recs).unwrap_err();
        assert!(matches!(err, GlamError::Checkpoint(_)), "{err}");
    }
}

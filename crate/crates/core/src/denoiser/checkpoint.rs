//! Versioned binary container for model parameters and training state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DWCKPT\0\0" | version u32 | header_len u32 | header (JSON)
//! record_count u32 | records...
//! record: name_len u16 | name | dtype u8 | ndim u8 | dims u32 × ndim | data
//! ```
//!
//! Model parameters are stored under their own names. Optimizer moments use
//! `optim.m.<name>` / `optim.v.<name>` and averaged weights use `ema.<name>`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DenoiserModel, UNetConfig};
use crate::error::{Error, Result};
use crate::numcore::{AdamState, DType, Scalar};
use crate::schedule::ScheduleParams;

const MAGIC: &[u8; 8] = b"DWCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

/// Optimizer hyperparameters and step counter; the moment buffers live in
/// tensor records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: DType,
    pub config: UNetConfig,
    pub schedule: ScheduleParams,
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
    pub optimizer: Option<AdamMeta>,
    pub ema_decay: Option<f64>,
}

/// Everything a training run or a predictor needs to continue.
pub struct Checkpoint<T: Scalar> {
    pub header: CheckpointHeader,
    pub model: DenoiserModel<T>,
    pub optimizer: Option<AdamState<T>>,
    /// Averaged weights, parallel to `model.params()`.
    pub ema: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Copies the averaged weights into the model when present.
    pub fn apply_ema(&self) -> bool {
        let Some(ema) = &self.ema else { return false };
        for ((_, p), v) in self.model.params().iter().zip(ema) {
            p.data_mut().copy_from_slice(v);
        }
        true
    }
}

/// Training-state fields that are not part of the model itself.
#[derive(Clone, Debug, Default)]
pub struct SaveState<'a, T: Scalar> {
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
    pub optimizer: Option<&'a AdamState<T>>,
    pub ema: Option<(&'a [Vec<T>], f64)>,
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

fn push_record<T: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        v.write_le(out);
    }
    Ok(())
}

/// Writes model parameters plus optional training state. The file is
/// written to a sibling temporary path and renamed into place.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &DenoiserModel<T>,
    schedule: ScheduleParams,
    state: &SaveState<'_, T>,
) -> Result<()> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE,
        config: model.config().clone(),
        schedule,
        step: state.step,
        epoch: state.epoch,
        seed: state.seed,
        optimizer: state.optimizer.map(|o| AdamMeta {
            step: o.step,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps_hat: o.eps_hat,
        }),
        ema_decay: state.ema.map(|(_, d)| d),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| ckpt_err(path, e))?;

    let mut records = Vec::new();
    let mut count = 0u32;
    for (name, p) in model.params().iter() {
        push_record(&mut records, name, p.shape(), &p.data())?;
        count += 1;
    }
    if let Some(opt) = state.optimizer {
        for (i, (name, p)) in model.params().iter().enumerate() {
            push_record(&mut records, &format!("optim.m.{name}"), p.shape(), &opt.m[i])?;
            push_record(&mut records, &format!("optim.v.{name}"), p.shape(), &opt.v[i])?;
            count += 2;
        }
    }
    if let Some((ema, _)) = state.ema {
        for ((name, p), v) in model.params().iter().zip(ema) {
            push_record(&mut records, &format!("ema.{name}"), p.shape(), v)?;
            count += 1;
        }
    }

    let mut bytes = Vec::with_capacity(24 + header_json.len() + records.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&count.to_le_bytes());
    bytes.extend_from_slice(&records);

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ckpt_err(self.path, "truncated file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

struct Record {
    shape: Vec<usize>,
    values: Vec<f64>,
    dtype: DType,
    raw: Vec<u8>,
}

impl Record {
    /// Values as `T`, bit-exact when the stored dtype matches.
    fn to_vec<T: Scalar>(&self) -> Vec<T> {
        if self.dtype == T::DTYPE {
            self.raw.chunks_exact(T::DTYPE.size_of()).map(T::read_le).collect()
        } else {
            self.values.iter().map(|&v| T::from_f64_lossy(v)).collect()
        }
    }
}

fn read_records(r: &mut Reader<'_>) -> Result<HashMap<String, Record>> {
    let count = r.u32()?;
    let mut out = HashMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name =
            std::str::from_utf8(r.take(len)?).map_err(|_| ckpt_err(r.path, "record name is not UTF-8"))?.to_string();
        let dtype = DType::from_tag(r.u8()?).ok_or_else(|| ckpt_err(r.path, format!("{name}: unknown dtype")))?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype.size_of())?.to_vec();
        let values = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|b| f32::read_le(b) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
        };
        if out.insert(name.clone(), Record { shape, values, dtype, raw }).is_some() {
            return Err(ckpt_err(r.path, format!("duplicate record {name}")));
        }
    }
    if r.pos != r.bytes.len() {
        return Err(ckpt_err(r.path, "trailing bytes after records"));
    }
    Ok(out)
}

/// Reads only the structured header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    parse_header(&mut r)
}

fn parse_header(r: &mut Reader<'_>) -> Result<CheckpointHeader> {
    if r.take(8)? != MAGIC {
        return Err(ckpt_err(r.path, "not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(ckpt_err(r.path, format!("unsupported format version {version}")));
    }
    let len = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len)?).map_err(|e| ckpt_err(r.path, e))?;
    header.config.validate()?;
    header.schedule.build()?;
    Ok(header)
}

/// Loads a checkpoint, validating that every expected parameter is present
/// with the expected shape. Values stored in another precision are
/// converted.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    let header = parse_header(&mut r)?;
    let mut records = read_records(&mut r)?;
    let model = DenoiserModel::<T>::new(header.config.clone(), header.seed)?;

    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
        let rec = records.remove(name).ok_or_else(|| ckpt_err(path, format!("missing record {name}")))?;
        if rec.shape != shape {
            return Err(ckpt_err(path, format!("record {name} has shape {:?}, expected {:?}", rec.shape, shape)));
        }
        Ok(rec.to_vec())
    };

    for (name, p) in model.params().iter() {
        let v = take(name, p.shape())?;
        p.data_mut().copy_from_slice(&v);
    }
    let optimizer = match &header.optimizer {
        None => None,
        Some(meta) => {
            let tensors = model.params().tensors();
            let mut st = AdamState::new(&tensors, meta.lr);
            st.step = meta.step;
            st.beta1 = meta.beta1;
            st.beta2 = meta.beta2;
            st.eps_hat = meta.eps_hat;
            for (i, (name, p)) in model.params().iter().enumerate() {
                st.m[i] = take(&format!("optim.m.{name}"), p.shape())?;
                st.v[i] = take(&format!("optim.v.{name}"), p.shape())?;
            }
            Some(st)
        }
    };
    let ema = match header.ema_decay {
        None => None,
        Some(_) => Some(
            model
                .params()
                .iter()
                .map(|(name, p)| take(&format!("ema.{name}"), p.shape()))
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    if let Some(extra) = records.keys().min() {
        return Err(ckpt_err(path, format!("unexpected record {extra}")));
    }
    Ok(Checkpoint { header, model, optimizer, ema })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::tests::tiny;
    use crate::numcore::init::standard_normal;
    use crate::numcore::{mean, mul};
    use crate::seed::rng_from;

    fn schedule() -> ScheduleParams {
        ScheduleParams::default()
    }

    #[test]
    fn roundtrip_is_bitwise_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = DenoiserModel::<f32>::new(tiny(), 3).unwrap();
        // Perturb so zero-initialized tensors carry information too.
        let mut rng = rng_from(9);
        for (_, p) in model.params().iter() {
            let noise = standard_normal::<f32, _>(p.shape(), &mut rng);
            p.data_mut().iter_mut().zip(noise.data().iter()).for_each(|(a, b)| *a += 0.1 * b);
        }
        save_checkpoint(&path, &model, schedule(), &SaveState { step: 12, epoch: 2, seed: 3, ..Default::default() })
            .unwrap();
        let ck = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(ck.header.step, 12);
        assert_eq!(ck.header.epoch, 2);
        assert_eq!(&ck.header.config, model.config());
        for ((na, a), (nb, b)) in model.params().iter().zip(ck.model.params().iter()) {
            assert_eq!(na, nb);
            let same = a.data().iter().zip(b.data().iter()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{na}");
        }
        let mut rng = rng_from(1);
        let x = standard_normal::<f32, _>(&[2, 2, 8, 8], &mut rng);
        let c = standard_normal::<f32, _>(&[2, 2, 8, 8], &mut rng);
        let ya = model.forward(&x, &c, &[5, 60]).unwrap().to_vec();
        let yb = ck.model.forward(&x, &c, &[5, 60]).unwrap().to_vec();
        assert!(ya.iter().zip(&yb).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn optimizer_and_ema_survive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/o.ckpt");
        let model = DenoiserModel::<f64>::new(tiny(), 1).unwrap();
        let params = model.params().tensors();
        let mut opt = AdamState::new(&params, 1e-3);
        let mut rng = rng_from(2);
        let x = standard_normal::<f64, _>(&[1, 2, 8, 8], &mut rng);
        let y = model.forward(&x, &x, &[10]).unwrap();
        mean(&mul(&y, &y).unwrap()).backward().unwrap();
        opt.step(&params).unwrap();
        let ema: Vec<Vec<f64>> = params.iter().map(|p| p.data().iter().map(|v| v * 0.5).collect()).collect();
        let state = SaveState { step: 1, epoch: 0, seed: 1, optimizer: Some(&opt), ema: Some((&ema, 0.999)) };
        save_checkpoint(&path, &model, schedule(), &state).unwrap();
        let ck = load_checkpoint::<f64>(&path).unwrap();
        let o = ck.optimizer.as_ref().unwrap();
        assert_eq!(o.step, 1);
        assert_eq!(o.m, opt.m);
        assert_eq!(o.v, opt.v);
        assert_eq!(ck.ema.as_ref().unwrap(), &ema);
        assert!(ck.apply_ema());
        assert_eq!(ck.model.params().tensors()[3].to_vec(), ema[3]);
    }

    #[test]
    fn loads_across_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let model = DenoiserModel::<f32>::new(tiny(), 4).unwrap();
        save_checkpoint(&path, &model, schedule(), &SaveState::default()).unwrap();
        let ck = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(ck.header.dtype, DType::F32);
        let a = model.params().tensors()[2].to_vec();
        let b = ck.model.params().tensors()[2].to_vec();
        assert!(a.iter().zip(&b).all(|(x, y)| *x as f64 == *y));
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let model = DenoiserModel::<f32>::new(tiny(), 4).unwrap();
        save_checkpoint(&path, &model, schedule(), &SaveState::default()).unwrap();
        let bytes = fs::read(&path).unwrap();

        let bad = dir.path().join("bad.ckpt");
        fs::write(&bad, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&bad), Err(Error::Checkpoint(_))));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        fs::write(&bad, &magic).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&bad), Err(Error::Checkpoint(_))));

        // Same parameter names but a different width: shapes disagree.
        let mut header = read_header(&path).unwrap();
        header.config.base_width = 16;
        header.config.groups = 8;
        let json = serde_json::to_vec(&header).unwrap();
        let old_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let mut swapped = bytes[..12].to_vec();
        swapped.extend_from_slice(&(json.len() as u32).to_le_bytes());
        swapped.extend_from_slice(&json);
        swapped.extend_from_slice(&bytes[16 + old_len..]);
        fs::write(&bad, &swapped).unwrap();
        let err = load_checkpoint::<f32>(&bad).err().unwrap().to_string();
        assert!(err.contains("shape"), "{err}");

        assert!(matches!(load_checkpoint::<f32>(&dir.path().join("none")), Err(Error::Io { .. })));
    }
}

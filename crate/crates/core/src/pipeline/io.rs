//! Binary `.ctp4` volumes, model checkpoints and the JSON sidecars of a data directory.
//!
//! Volume layout (little-endian): magic `CTP4VOL\0`, u32 version, u32 dtype,
//! 5 × u32 extents (X Y Z T C), f64 pixel spacing, f64 slice thickness,
//! u32 schedule length and f64 instants, f64 slope, f64 intercept, then the
//! payload with the last axis fastest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CtpStudy, Group};
use crate::error::{Error, Result};
use crate::mask::MaskVolume;
use crate::networks::NetworkConfig;
use crate::params::{ParamKind, ParamStore};
use crate::scalar::{DType, Scalar};
use crate::tensor::{AxisRole, Tensor, VolumeMeta};

pub const VOLUME_MAGIC: &[u8; 8] = b"CTP4VOL\0";
pub const MODEL_MAGIC: &[u8; 8] = b"CTP4MDL\0";
pub const FORMAT_VERSION: u32 = 1;

const ROLES: [AxisRole; 6] = [
    AxisRole::Width,
    AxisRole::Height,
    AxisRole::Depth,
    AxisRole::Time,
    AxisRole::Channel,
    AxisRole::Filter,
];

/// Little-endian reader that reports the byte offset of every failure.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => self.err(format!(
                "truncated: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let start = self.pos;
        if self.take(8)? != expected {
            self.pos = start;
            return self.err(format!("bad magic, expected {:?}", String::from_utf8_lossy(expected)));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let at = self.pos;
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            self.pos = at;
            return self.err(format!("unsupported version {v}"));
        }
        Ok(())
    }

    fn dtype(&mut self) -> Result<DType> {
        let at = self.pos;
        let code = self.u32()?;
        DType::from_code(code).map_or_else(
            || {
                self.pos = at;
                self.err(format!("unknown dtype code {code}"))
            },
            Ok,
        )
    }

    /// Reads `count` elements of `dtype` as f64, refusing sizes that overflow.
    fn payload(&mut self, dtype: DType, count: usize) -> Result<Vec<f64>> {
        let Some(n) = count.checked_mul(dtype.size()) else {
            return self.err("payload size overflows");
        };
        let raw = self.take(n)?;
        Ok(match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
            DType::U8 => raw.iter().map(|&b| f64::from(b)).collect(),
        })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return self.err(format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::config(format!("{v} does not fit the u32 header field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_values(out: &mut Vec<u8>, dtype: DType, data: &[f64]) {
    for &v in data {
        match dtype {
            DType::F32 => (v as f32).write_le(out),
            DType::F64 => v.write_le(out),
            DType::U8 => out.push(v as u8),
        }
    }
}

/// A decoded `.ctp4` container.
#[derive(Clone, Debug, PartialEq)]
pub struct RawVolume {
    /// (X, Y, Z, T, C).
    pub dims: [usize; 5],
    pub dtype: DType,
    pub meta: VolumeMeta,
    pub data: Vec<f64>,
}

pub fn encode_volume(v: &RawVolume) -> Result<Vec<u8>> {
    let n = v
        .dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::shape("volume extents overflow"))?;
    if n != v.data.len() {
        return Err(Error::shape(format!(
            "extents {:?} need {n} values, got {}",
            v.dims,
            v.data.len()
        )));
    }
    let mut out = Vec::with_capacity(64 + n * v.dtype.size());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&v.dtype.code().to_le_bytes());
    for &d in &v.dims {
        put_u32(&mut out, d)?;
    }
    out.extend_from_slice(&v.meta.pixel_spacing_mm.to_le_bytes());
    out.extend_from_slice(&v.meta.slice_thickness_mm.to_le_bytes());
    put_u32(&mut out, v.meta.time_schedule.len())?;
    for t in &v.meta.time_schedule {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out.extend_from_slice(&v.meta.rescale_slope.to_le_bytes());
    out.extend_from_slice(&v.meta.rescale_intercept.to_le_bytes());
    put_values(&mut out, v.dtype, &v.data);
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<RawVolume> {
    let mut c = Cursor::new(bytes);
    c.magic(VOLUME_MAGIC)?;
    c.version()?;
    let dtype = c.dtype()?;
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = c.u32()? as usize;
    }
    let pixel_spacing_mm = c.f64()?;
    let slice_thickness_mm = c.f64()?;
    let nt = c.u32()? as usize;
    let time_schedule = (0..nt).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
    let rescale_slope = c.f64()?;
    let rescale_intercept = c.f64()?;
    let Some(count) = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)) else {
        return c.err(format!("extents {dims:?} overflow"));
    };
    if count == 0 {
        return c.err(format!("extents {dims:?} contain a zero"));
    }
    let remaining = bytes.len() - c.pos;
    if count.checked_mul(dtype.size()) != Some(remaining) {
        return c.err(format!(
            "extents {dims:?} need {count} {dtype:?} values, payload has {remaining} bytes"
        ));
    }
    let data = c.payload(dtype, count)?;
    c.finish()?;
    Ok(RawVolume {
        dims,
        dtype,
        meta: VolumeMeta {
            pixel_spacing_mm,
            slice_thickness_mm,
            time_schedule,
            rescale_slope,
            rescale_intercept,
        },
        data,
    })
}

pub fn read_volume(path: &Path) -> Result<RawVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

pub fn write_volume(path: &Path, v: &RawVolume) -> Result<()> {
    fs::write(path, encode_volume(v)?).map_err(|e| Error::io(path, e))
}

fn study_tensor(v: RawVolume) -> Result<Tensor<f64>> {
    let [x, y, z, t, c] = v.dims;
    if c != 1 {
        return Err(Error::shape(format!("studies have one channel, file has {c}")));
    }
    Tensor::new(
        vec![x, y, z, t],
        vec![AxisRole::Width, AxisRole::Height, AxisRole::Depth, AxisRole::Time],
        v.data,
    )
}

/// Writes a study in its storage precision.
pub fn write_study(path: &Path, study: &CtpStudy) -> Result<()> {
    study.validate()?;
    let d = study.raw.dims();
    write_volume(
        path,
        &RawVolume {
            dims: [d[0], d[1], d[2], d[3], 1],
            dtype: study.storage,
            meta: study.meta.clone(),
            data: study.raw.data().to_vec(),
        },
    )
}

/// Reads a study; identity and cohort come from the directory index.
pub fn read_study(path: &Path, patient_id: &str, group: Group) -> Result<CtpStudy> {
    let v = read_volume(path)?;
    if v.dtype == DType::U8 {
        return Err(Error::Format {
            offset: 12,
            message: "study payload must be f32 or f64".into(),
        });
    }
    let (meta, storage) = (v.meta.clone(), v.dtype);
    let study = CtpStudy {
        raw: study_tensor(v)?,
        meta,
        patient_id: patient_id.to_string(),
        group,
        storage,
    };
    study.validate()?;
    Ok(study)
}

pub fn write_mask(path: &Path, mask: &MaskVolume, meta: &VolumeMeta) -> Result<()> {
    let [x, y, z] = mask.dims();
    write_volume(
        path,
        &RawVolume {
            dims: [x, y, z, 1, 1],
            dtype: DType::U8,
            meta: VolumeMeta {
                time_schedule: Vec::new(),
                ..meta.clone()
            },
            data: mask.labels().iter().map(|&l| f64::from(l)).collect(),
        },
    )
}

pub fn read_mask(path: &Path) -> Result<(MaskVolume, VolumeMeta)> {
    let v = read_volume(path)?;
    if v.dtype != DType::U8 {
        return Err(Error::Format {
            offset: 12,
            message: format!("mask payload must be u8, found {:?}", v.dtype),
        });
    }
    let [x, y, z, t, c] = v.dims;
    if t != 1 || c != 1 {
        return Err(Error::Format {
            offset: 16,
            message: format!("mask extents must be (X, Y, Z, 1, 1), found {:?}", v.dims),
        });
    }
    let labels = v.data.iter().map(|&l| l as u8).collect();
    Ok((MaskVolume::new([x, y, z], labels)?, v.meta))
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    network: NetworkConfig,
}

/// Model file: magic `CTP4MDL\0`, u32 version, u32 dtype, u32 length and a
/// JSON header with the network configuration, u32 parameter count, then per
/// parameter: u32 name length, name, u8 kind, u32 rank, rank × u32 extents,
/// rank × u8 axis roles, payload.
pub fn encode_model<T: Scalar>(cfg: &NetworkConfig, params: &ParamStore<T>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(&CheckpointHeader { network: cfg.clone() })?;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&T::DTYPE.code().to_le_bytes());
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_u32(&mut out, params.len())?;
    for p in params.params() {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        out.push(match p.kind {
            ParamKind::Kernel => 0,
            ParamKind::Bias => 1,
        });
        put_u32(&mut out, p.value.rank())?;
        for &d in p.value.dims() {
            put_u32(&mut out, d)?;
        }
        for r in p.value.roles() {
            out.push(ROLES.iter().position(|x| x == r).expect("known role") as u8);
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

/// Element type a checkpoint was saved in.
pub fn model_dtype(bytes: &[u8]) -> Result<DType> {
    let mut c = Cursor::new(bytes);
    c.magic(MODEL_MAGIC)?;
    c.version()?;
    c.dtype()
}

/// Decodes a checkpoint into precision `T`, converting if it was stored in the other one.
pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<(NetworkConfig, ParamStore<T>)> {
    let mut c = Cursor::new(bytes);
    c.magic(MODEL_MAGIC)?;
    c.version()?;
    let dtype = c.dtype()?;
    if dtype == DType::U8 {
        return c.err("model payload must be f32 or f64");
    }
    let len = c.u32()? as usize;
    let at = c.pos;
    let header: CheckpointHeader = serde_json::from_slice(c.take(len)?).map_err(|e| Error::Format {
        offset: at as u64,
        message: format!("bad header: {e}"),
    })?;
    let count = c.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = c.u32()? as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| Error::Format {
                offset: at as u64,
                message: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let kind = match c.u8()? {
            0 => ParamKind::Kernel,
            1 => ParamKind::Bias,
            k => {
                c.pos -= 1;
                return c.err(format!("unknown parameter kind {k}"));
            }
        };
        let rank = c.u32()? as usize;
        if rank == 0 || rank > ROLES.len() {
            c.pos -= 4;
            return c.err(format!("parameter rank {rank} out of range"));
        }
        let dims = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut roles = Vec::with_capacity(rank);
        for _ in 0..rank {
            let r = c.u8()?;
            match ROLES.get(r as usize) {
                Some(&role) => roles.push(role),
                None => {
                    c.pos -= 1;
                    return c.err(format!("unknown axis role {r}"));
                }
            }
        }
        let Some(len) = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)) else {
            return c.err("parameter extents overflow");
        };
        let data: Vec<T> = c.payload(dtype, len)?.into_iter().map(T::from_f64).collect();
        let at = c.pos;
        let value = Tensor::new(dims, roles, data).map_err(|e| Error::Format {
            offset: at as u64,
            message: format!("parameter {name}: {e}"),
        })?;
        store.insert(name, kind, value)?;
    }
    c.finish()?;
    Ok((header.network, store))
}

pub fn write_model<T: Scalar>(path: &Path, cfg: &NetworkConfig, params: &ParamStore<T>) -> Result<()> {
    fs::write(path, encode_model(cfg, params)?).map_err(|e| Error::io(path, e))
}

pub fn read_model<T: Scalar>(path: &Path) -> Result<(NetworkConfig, ParamStore<T>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

/// Entry of `index.json`; file names are relative to the directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub group: Group,
    pub study: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataIndex {
    pub patients: Vec<IndexEntry>,
}

pub const INDEX_FILE: &str = "index.json";
pub const SPLIT_FILE: &str = "split.json";

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl DataIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(INDEX_FILE))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(INDEX_FILE), self)
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry> {
        self.patients.iter().find(|p| p.id == id)
    }

    /// Adds or replaces by id, keeping entries sorted.
    pub fn upsert(&mut self, entry: IndexEntry) {
        match self.patients.iter_mut().find(|p| p.id == entry.id) {
            Some(p) => *p = entry,
            None => self.patients.push(entry),
        }
        self.patients.sort_by(|a, b| a.id.cmp(&b.id));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::build_network;
    use proptest::prelude::*;

    fn meta() -> VolumeMeta {
        VolumeMeta {
            time_schedule: vec![0.0, 1.5, 4.0],
            ..VolumeMeta::default()
        }
    }

    fn sample(dtype: DType) -> RawVolume {
        let dims = [2, 3, 2, 3, 1];
        let n: usize = dims.iter().product();
        RawVolume {
            dims,
            dtype,
            meta: meta(),
            data: (0..n)
                .map(|i| {
                    if dtype == DType::U8 {
                        (i % 3) as f64
                    } else {
                        i as f64 * 0.37 - 4.0
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn f64_round_trip_is_bit_identical() {
        let v = sample(DType::F64);
        let bytes = encode_volume(&v).unwrap();
        let back = decode_volume(&bytes).unwrap();
        assert_eq!(back, v);
        assert_eq!(encode_volume(&back).unwrap(), bytes);
    }

    #[test]
    fn f32_round_trip_keeps_f32_values() {
        let mut v = sample(DType::F32);
        v.data.iter_mut().for_each(|x| *x = f64::from(*x as f32));
        let back = decode_volume(&encode_volume(&v).unwrap()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode_volume(&sample(DType::F64)).unwrap();
        bytes[0] = b'X';
        match decode_volume(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_length_mismatch_with_offset() {
        let bytes = encode_volume(&sample(DType::F64)).unwrap();
        let header = bytes.len() - 36 * 8;
        let short = &bytes[..bytes.len() - 8];
        match decode_volume(short) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset as usize, header);
                assert!(message.contains("payload"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_volume(&long), Err(Error::Format { .. })));
    }

    #[test]
    fn rejects_overflowing_dims() {
        let mut bytes = encode_volume(&sample(DType::F64)).unwrap();
        for k in 0..5 {
            bytes[16 + 4 * k..20 + 4 * k].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode_volume(&bytes), Err(Error::Format { .. })));
        assert!(matches!(
            decode_volume(&bytes[..10]),
            Err(Error::Format { offset: 8, .. })
        ));
    }

    #[test]
    fn study_and_mask_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = super::super::phantom::PhantomSpec {
            extents: [8, 8, 2],
            storage: DType::F64,
            ..Default::default()
        };
        let spec = super::super::phantom::PhantomSpec { lesion: None, ..spec };
        let (study, mask) = super::super::phantom::make_phantom(&spec).unwrap();
        let p = dir.path().join("s.ctp4");
        write_study(&p, &study).unwrap();
        assert_eq!(read_study(&p, &study.patient_id, study.group).unwrap(), study);
        let m = dir.path().join("m.ctp4");
        write_mask(&m, &mask, &study.meta).unwrap();
        let (back, meta) = read_mask(&m).unwrap();
        assert_eq!(back, mask);
        assert!(meta.time_schedule.is_empty());
        assert!(read_mask(&p).is_err());
        assert!(read_study(&m, "x", Group::Wis).is_err());
    }

    #[test]
    fn model_round_trip() {
        let cfg = NetworkConfig {
            input_extents: [8, 8, 3, 4],
            time_pool_schedule: vec![2, 2],
            temporal_widths: vec![2, 2],
            spatial_widths: vec![2, 4],
            ..NetworkConfig::default()
        };
        let net = build_network(cfg.clone()).unwrap();
        let params = net.init_params::<f64>(3);
        let bytes = encode_model(&cfg, &params).unwrap();
        let (cfg2, back) = decode_model::<f64>(&bytes).unwrap();
        assert_eq!(cfg2, cfg);
        net.check_params(&back).unwrap();
        for (a, b) in params.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(model_dtype(&bytes).unwrap(), DType::F64);
        let (_, as32) = decode_model::<f32>(&bytes).unwrap();
        assert_eq!(as32.count(), params.count());
        let mut bad = bytes.clone();
        bad.truncate(bytes.len() - 1);
        assert!(matches!(decode_model::<f64>(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn index_upsert_sorts() {
        let mut idx = DataIndex::default();
        for id in ["b", "a", "b"] {
            idx.upsert(IndexEntry {
                id: id.into(),
                group: Group::Lvo,
                study: format!("{id}.ctp4"),
                mask: None,
            });
        }
        assert_eq!(idx.patients.len(), 2);
        assert_eq!(idx.patients[0].id, "a");
    }

    proptest! {
        #[test]
        fn any_f64_volume_round_trips(
            dims in proptest::array::uniform5(1usize..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            // Arbitrary bit patterns, NaN payloads included.
            let data: Vec<f64> = (0..n as u64).map(|i| f64::from_bits(seed.wrapping_add(i).wrapping_mul(0x9e37_79b9_7f4a_7c15))).collect();
            let v = RawVolume { dims, dtype: DType::F64, meta: meta(), data };
            let back = decode_volume(&encode_volume(&v).unwrap()).unwrap();
            prop_assert!(back.data.iter().zip(&v.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

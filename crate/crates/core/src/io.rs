//! On-disk formats: tensor files, PNG images, dataset manifests and
//! checkpoints. Every integer and float is little-endian.
//!
//! Tensor file layout:
//!
//! ```text
//! "GNRF" | dtype: u32 (1 = f32, 2 = f64) | rank: u32 | dims: u32 × rank | payload
//! ```
//!
//! Checkpoint layout:
//!
//! ```text
//! "GNCK" | version: u32 | hash_len: u32 | hash | count: u32
//!        | count × (name_len: u32 | name | byte_len: u64 | tensor file)
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, Intrinsics, PoseDistribution};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::IntermediateLatent;
use crate::oracle::{OracleConfig, Triplet, TripletPoses};
use crate::render::RenderConfig;
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"GNRF";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GNCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_VERSION: &str = "gnerf-dataset/1";
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u32 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    pub fn to_scalar<T: Scalar>(&self) -> Tensor<T> {
        match self {
            TensorData::F32(t) => t.cast(),
            TensorData::F64(t) => t.cast(),
        }
    }
}

pub fn encode_tensor(t: &TensorData) -> Vec<u8> {
    let (dtype, shape, n) = match t {
        TensorData::F32(t) => (Dtype::F32, t.shape(), t.len()),
        TensorData::F64(t) => (Dtype::F64, t.shape(), t.len()),
    };
    let mut out = Vec::with_capacity(12 + 4 * shape.len() + n * dtype.size());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&dtype.code().to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match t {
        TensorData::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        TensorData::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::corrupt(
                self.path,
                format!("truncated {what}: need {n} bytes at offset {}, have {}", self.pos, self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::corrupt(self.path, format!("{what} is not UTF-8")))
    }

    fn tensor(&mut self) -> Result<TensorData> {
        let magic = self.take(4, "magic")?;
        if magic != TENSOR_MAGIC {
            return Err(Error::corrupt(self.path, format!("bad tensor magic {magic:?}")));
        }
        let dtype = match self.u32("dtype")? {
            1 => Dtype::F32,
            2 => Dtype::F64,
            c => return Err(Error::corrupt(self.path, format!("unknown dtype code {c}"))),
        };
        let rank = self.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::corrupt(self.path, format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::corrupt(self.path, "dims overflow"))?;
        let payload = self.take(
            n.checked_mul(dtype.size()).ok_or_else(|| Error::corrupt(self.path, "dims overflow"))?,
            "payload",
        )?;
        let t = match dtype {
            Dtype::F32 => TensorData::F32(Tensor::new(
                shape,
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            )?),
            Dtype::F64 => TensorData::F64(Tensor::new(
                shape,
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            )?),
        };
        Ok(t)
    }
}

/// Decodes one tensor; trailing bytes are an error.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<TensorData> {
    let mut r = Reader { bytes, pos: 0, path };
    let t = r.tensor()?;
    if r.pos != bytes.len() {
        return Err(Error::corrupt(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(t)
}

pub fn write_tensor(path: &Path, t: &TensorData) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<TensorData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        let f = w.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn quantize<T: Scalar>(v: T) -> u8 {
    let x: f64 = cast(v);
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit PNG encoding of a 1- or 3-channel image with values in `[0, 1]`.
pub fn encode_png<T: Scalar>(img: &Image<T>) -> Result<Vec<u8>> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::InvalidArgument(format!("PNG needs 1 or 3 channels, got {c}"))),
    };
    let n = img.pixels();
    let mut raw = Vec::with_capacity(n * img.channels);
    for p in 0..n {
        for c in 0..img.channels {
            raw.push(quantize(img.data[c * n + p]));
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::InvalidArgument(format!("png header: {e}")))?;
        w.write_image_data(&raw)
            .map_err(|e| Error::InvalidArgument(format!("png data: {e}")))?;
    }
    Ok(out)
}

pub fn write_png<T: Scalar>(path: &Path, img: &Image<T>) -> Result<()> {
    fs::write(path, encode_png(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_png<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(f)
        .read_info()
        .map_err(|e| Error::corrupt(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::corrupt(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::corrupt(path, "only 8-bit PNG is supported"));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::corrupt(path, format!("unsupported color type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let n = w * h;
    let mut data = vec![T::zero(); n * channels];
    let scale = T::lit(255.0);
    for p in 0..n {
        for c in 0..channels {
            data[c * n + p] = T::lit(buf[p * channels + c] as f64) / scale;
        }
    }
    Image::new(w, h, channels, data)
}

/// Hex of the 16 little-endian f64 values of a camera-to-world matrix.
pub fn pose_to_hex<T: Scalar>(pose: &CameraPose<T>) -> String {
    let mut bytes = Vec::with_capacity(128);
    for v in pose.cast::<f64>().to_matrix() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    hex::encode(bytes)
}

pub fn pose_from_hex<T: Scalar>(s: &str) -> Result<CameraPose<T>> {
    let bytes = hex::decode(s).map_err(|e| Error::InvalidArgument(format!("pose hex: {e}")))?;
    if bytes.len() != 128 {
        return Err(Error::InvalidArgument(format!("pose needs 128 bytes, got {}", bytes.len())));
    }
    let mut m = [0.0f64; 16];
    for (v, c) in m.iter_mut().zip(bytes.chunks_exact(8)) {
        *v = f64::from_le_bytes(c.try_into().unwrap());
    }
    Ok(CameraPose::from_matrix(&m).cast())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub index: usize,
    pub image_f: String,
    pub image_s: String,
    pub depth: String,
    pub mask: String,
    /// Camera-to-world matrices, hex-encoded little-endian f64.
    pub pose_f: String,
    pub pose_s: String,
    pub pose_d: String,
    pub latent: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub count: usize,
    pub psi: f64,
    pub seed: u64,
    /// Frontal reference pose and noise-free geometry (single-view pools).
    pub clean_geometry: bool,
    pub frontal_reference: bool,
    pub pose_distribution: PoseDistribution<f64>,
    pub render: RenderConfig<f64>,
    pub intrinsics: Intrinsics<f64>,
    pub oracle: OracleConfig,
    pub center: Vec<f64>,
    pub center_samples: usize,
    pub records: Vec<TripletRecord>,
}

impl DatasetManifest {
    pub fn validate(&self, dir: &Path) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::corrupt(dir.join(MANIFEST_NAME), format!("unknown version {}", self.version)));
        }
        if self.count != self.records.len() {
            return Err(Error::corrupt(
                dir.join(MANIFEST_NAME),
                format!("count {} but {} records", self.count, self.records.len()),
            ));
        }
        for r in &self.records {
            for name in [&r.image_f, &r.image_s, &r.depth, &r.mask] {
                if Path::new(name).is_absolute() || name.contains("..") {
                    return Err(Error::corrupt(dir.join(MANIFEST_NAME), format!("non-relative file name {name}")));
                }
                if !dir.join(name).is_file() {
                    return Err(Error::corrupt(dir.join(name), "referenced file is missing"));
                }
            }
        }
        Ok(())
    }
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let text = serde_json::to_vec_pretty(manifest)?;
    write_atomic(&dir.join(MANIFEST_NAME), &text)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_NAME);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(&path, e.to_string()))?;
    m.validate(dir)?;
    Ok(m)
}

pub fn save_triplet<T: Scalar>(dir: &Path, index: usize, t: &Triplet<T>) -> Result<TripletRecord> {
    let wrap = |e: Error| Error::Triplet {
        index,
        source: Box::new(e),
    };
    let record = TripletRecord {
        index,
        image_f: format!("img_f_{index:06}.png"),
        image_s: format!("img_s_{index:06}.png"),
        depth: format!("depth_{index:06}.gnrf"),
        mask: format!("mask_{index:06}.gnrf"),
        pose_f: pose_to_hex(&t.poses.reference),
        pose_s: pose_to_hex(&t.poses.target),
        pose_d: pose_to_hex(&t.poses.depth),
        latent: t.latent.0.iter().map(|&v| cast(v)).collect(),
    };
    write_png(&dir.join(&record.image_f), &t.image_f).map_err(wrap)?;
    write_png(&dir.join(&record.image_s), &t.image_s).map_err(wrap)?;
    let (h, w) = (t.depth.height, t.depth.width);
    let depth = Tensor::new(vec![h, w], t.depth.data.iter().map(|&v| cast::<T, f32>(v)).collect()).map_err(wrap)?;
    write_tensor(&dir.join(&record.depth), &TensorData::F32(depth)).map_err(wrap)?;
    let mask = Tensor::new(
        vec![h, w],
        t.mask.iter().map(|&m| if m { 1.0f32 } else { 0.0 }).collect(),
    )
    .map_err(wrap)?;
    write_tensor(&dir.join(&record.mask), &TensorData::F32(mask)).map_err(wrap)?;
    Ok(record)
}

fn read_map<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let t = read_tensor(path)?.to_scalar::<T>();
    match *t.shape() {
        [h, w] => Image::new(w, h, 1, t.into_data()),
        ref s => Err(Error::corrupt(path, format!("expected a 2-d map, got shape {s:?}"))),
    }
}

pub fn load_triplet<T: Scalar>(dir: &Path, record: &TripletRecord) -> Result<Triplet<T>> {
    let wrap = |e: Error| Error::Triplet {
        index: record.index,
        source: Box::new(e),
    };
    let inner = || -> Result<Triplet<T>> {
        let image_f = read_png(&dir.join(&record.image_f))?;
        let image_s = read_png(&dir.join(&record.image_s))?;
        let depth = read_map(&dir.join(&record.depth))?;
        let mask_map: Image<T> = read_map(&dir.join(&record.mask))?;
        if depth.same_shape(&mask_map).is_err() {
            return Err(Error::corrupt(dir.join(&record.mask), "mask and depth shapes differ"));
        }
        Ok(Triplet {
            image_f,
            image_s,
            mask: mask_map.data.iter().map(|&v| v > T::lit(0.5)).collect(),
            depth,
            poses: TripletPoses {
                reference: pose_from_hex(&record.pose_f)?,
                target: pose_from_hex(&record.pose_s)?,
                depth: pose_from_hex(&record.pose_d)?,
            },
            latent: IntermediateLatent(record.latent.iter().map(|&v| T::lit(v)).collect()),
        })
    };
    inner().map_err(wrap)
}

/// A dataset held in memory together with its manifest.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub manifest: DatasetManifest,
    pub triplets: Vec<Triplet<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let triplets = manifest
            .records
            .iter()
            .map(|r| load_triplet(dir, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, triplets })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Fails with every name in `names` that the checkpoint lacks.
    pub fn require(&self, names: &[String]) -> Result<()> {
        let missing: Vec<String> = names.iter().filter(|n| self.get(n).is_none()).cloned().collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingTensors(missing))
        }
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ck.config_hash.len() as u32).to_le_bytes());
    out.extend_from_slice(ck.config_hash.as_bytes());
    out.extend_from_slice(&(ck.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ck.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let body = encode_tensor(&TensorData::F32(t.clone()));
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::corrupt(path, "bad checkpoint magic"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::corrupt(path, format!("unsupported checkpoint version {version}")));
    }
    let config_hash = r.string("config hash")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let len = r.u64("tensor length")? as usize;
        let body = r.take(len, "tensor body")?;
        match decode_tensor(body, path)? {
            TensorData::F32(t) => tensors.push((name, t)),
            TensorData::F64(_) => return Err(Error::corrupt(path, format!("tensor {name} is not f32"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::corrupt(path, "trailing bytes after last tensor"));
    }
    Ok(Checkpoint { config_hash, tensors })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_header_layout() {
        let t = TensorData::F32(Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap());
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"GNRF");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..20], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 28);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = TensorData::F64(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let b = encode_tensor(&t);
        let err = decode_tensor(&b[..b.len() - 1], Path::new("x.gnrf")).unwrap_err();
        assert!(matches!(err, Error::Corrupt { ref path, .. } if path == Path::new("x.gnrf")));
    }

    #[test]
    fn pose_hex_is_bit_exact() {
        let dist = PoseDistribution::<f64>::default();
        let p = dist.pose_from_angles(0.3137, -0.21).unwrap();
        let back: CameraPose<f64> = pose_from_hex(&pose_to_hex(&p)).unwrap();
        assert_eq!(back, p);
    }
}

//! Minimal tensor container, PGM previews and JSON config loading.
//!
//! Tensor layout: `b"MMT1"`, dtype code (u8), ndim (u8), ndim × u32 LE
//! dims, then the row-major little-endian payload. Stacks are 3D with the
//! frame index as the third (fastest varying) dimension: `[height, width, frames]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};
use crate::geometry::{Grid, ImageShape, LabelMap};

pub const MAGIC: &[u8; 4] = b"MMT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    U16 = 1,
    F32 = 2,
    U8 = 3,
}

impl Dtype {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::U16),
            2 => Ok(Dtype::F32),
            3 => Ok(Dtype::U8),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::U16 => 2,
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    U16(Vec<u16>),
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::U16(_) => Dtype::U16,
            TensorData::F32(_) => Dtype::F32,
            TensorData::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::U16(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) {
            return Err(Error::DimensionMismatch(format!("ndim {} not in {{2, 3}}", dims.len())));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::DimensionMismatch("dimension exceeds u32".into()));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn encode(&self) -> Vec<u8> {
        let dtype = self.dtype();
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + self.data.len() * dtype.size());
        out.extend_from_slice(MAGIC);
        out.push(dtype as u8);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::NotATensorFile);
        }
        if bytes.len() < 6 {
            return Err(Error::CorruptFile("truncated header".into()));
        }
        let dtype = Dtype::from_code(bytes[4])?;
        let ndim = bytes[5] as usize;
        if !(2..=3).contains(&ndim) {
            return Err(Error::CorruptFile(format!("ndim {ndim} not in {{2, 3}}")));
        }
        let header = 6 + 4 * ndim;
        if bytes.len() < header {
            return Err(Error::CorruptFile("truncated header".into()));
        }
        let dims: Vec<usize> = bytes[6..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::CorruptFile("dims overflow".into()))?;
        let payload = &bytes[header..];
        let expected = n
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::CorruptFile("dims overflow".into()))?;
        if payload.len() != expected {
            return Err(Error::CorruptFile(format!(
                "payload has {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let data = match dtype {
            Dtype::U16 => TensorData::U16(
                payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect(),
            ),
            Dtype::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            Dtype::U8 => TensorData::U8(payload.to_vec()),
        };
        Ok(Self { dims, data })
    }
}

/// Write via a temporary sibling file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidConfig(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    write_atomic(path.as_ref(), &tensor.encode())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    Tensor::decode(&fs::read(path)?)
}

fn stack_dims(shape: ImageShape, frames: usize) -> Vec<usize> {
    vec![shape.height, shape.width, frames]
}

/// Interleave frames into `[h, w, frames]` order.
fn interleave<T: Copy, U>(shape: ImageShape, frames: &[Grid<T>], f: impl Fn(T) -> U) -> Result<Vec<U>> {
    for g in frames {
        shape.ensure_same(&g.shape())?;
    }
    let n = frames.len();
    let mut out = Vec::with_capacity(shape.len() * n);
    for i in 0..shape.len() {
        for g in frames {
            out.push(f(g.data()[i]));
        }
    }
    debug_assert_eq!(out.len(), shape.len() * n);
    Ok(out)
}

fn deinterleave<T: Copy, U>(dims: &[usize], data: &[T], f: impl Fn(T) -> U) -> (ImageShape, Vec<Grid<U>>) {
    let shape = ImageShape::new(dims[0], dims[1]);
    let n = if dims.len() == 3 { dims[2] } else { 1 };
    let frames = (0..n)
        .map(|k| {
            let v = (0..shape.len()).map(|i| f(data[i * n + k])).collect();
            Grid::from_vec(shape, v).expect("length checked by tensor invariants")
        })
        .collect();
    (shape, frames)
}

pub fn label_stack_to_tensor(shape: ImageShape, frames: &[LabelMap]) -> Result<Tensor> {
    if let Some(&l) = frames.iter().flat_map(|g| g.data()).find(|&&l| l > u16::MAX as u32) {
        return Err(Error::DimensionMismatch(format!("label {l} does not fit in u16")));
    }
    let data = interleave(shape, frames, |l| l as u16)?;
    Tensor::new(stack_dims(shape, frames.len()), TensorData::U16(data))
}

pub fn tensor_to_label_stack(t: &Tensor) -> Result<(ImageShape, Vec<LabelMap>)> {
    match &t.data {
        TensorData::U16(v) => Ok(deinterleave(&t.dims, v, u32::from)),
        TensorData::U8(v) => Ok(deinterleave(&t.dims, v, u32::from)),
        TensorData::F32(_) => Err(Error::DimensionMismatch("label stack must be integer".into())),
    }
}

pub fn real_stack_to_tensor(shape: ImageShape, frames: &[Grid<f64>]) -> Result<Tensor> {
    let data = interleave(shape, frames, |v| v as f32)?;
    Tensor::new(stack_dims(shape, frames.len()), TensorData::F32(data))
}

pub fn image_stack_to_tensor(shape: ImageShape, frames: &[Grid<f32>]) -> Result<Tensor> {
    let data = interleave(shape, frames, |v| v)?;
    Tensor::new(stack_dims(shape, frames.len()), TensorData::F32(data))
}

pub fn tensor_to_real_stack(t: &Tensor) -> Result<(ImageShape, Vec<Grid<f64>>)> {
    match &t.data {
        TensorData::F32(v) => Ok(deinterleave(&t.dims, v, f64::from)),
        TensorData::U16(v) => Ok(deinterleave(&t.dims, v, f64::from)),
        TensorData::U8(v) => Ok(deinterleave(&t.dims, v, f64::from)),
    }
}

pub fn tensor_to_image_stack(t: &Tensor) -> Result<(ImageShape, Vec<Grid<f32>>)> {
    match &t.data {
        TensorData::F32(v) => Ok(deinterleave(&t.dims, v, |x| x)),
        _ => Err(Error::DimensionMismatch("intensity stack must be f32".into())),
    }
}

pub fn byte_stack_to_tensor(shape: ImageShape, frames: &[Grid<u8>]) -> Result<Tensor> {
    let data = interleave(shape, frames, |v| v)?;
    Tensor::new(stack_dims(shape, frames.len()), TensorData::U8(data))
}

pub fn tensor_to_byte_stack(t: &Tensor) -> Result<(ImageShape, Vec<Grid<u8>>)> {
    match &t.data {
        TensorData::U8(v) => Ok(deinterleave(&t.dims, v, |x| x)),
        _ => Err(Error::DimensionMismatch("category stack must be u8".into())),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PgmImage {
    Gray8(Grid<u8>),
    Gray16(Grid<u16>),
}

/// Binary P5 encoding; 16-bit samples are big-endian.
pub fn encode_pgm(image: &PgmImage) -> Result<Vec<u8>> {
    let (shape, maxval) = match image {
        PgmImage::Gray8(g) => (g.shape(), 255),
        PgmImage::Gray16(g) => (g.shape(), 65535),
    };
    if shape.is_empty() {
        return Err(Error::EmptyImage);
    }
    let mut out = format!("P5\n{} {}\n{}\n", shape.width, shape.height, maxval).into_bytes();
    match image {
        PgmImage::Gray8(g) => out.extend_from_slice(g.data()),
        PgmImage::Gray16(g) => g.data().iter().for_each(|v| out.extend_from_slice(&v.to_be_bytes())),
    }
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, image: &PgmImage) -> Result<()> {
    write_atomic(path.as_ref(), &encode_pgm(image)?)
}

/// Gray level of a label: background stays black, cells cycle through
/// 224 distinct levels in `[32, 255]`.
pub fn label_gray(label: u32) -> u8 {
    if label == 0 {
        0
    } else {
        (32 + (label as u64 * 97) % 224) as u8
    }
}

pub fn render_labels(labels: &LabelMap) -> Grid<u8> {
    labels.map(|&l| label_gray(l))
}

/// Linear min..max stretch of a real-valued map to 8 bits.
pub fn render_real(map: &Grid<f64>) -> Grid<u8> {
    let (lo, hi) = map
        .data()
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    map.map(|&v| {
        if !v.is_finite() || !(span > 0.0) {
            0
        } else {
            (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
        }
    })
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

//! Image tensors and their on-disk form.
//!
//! [`ImageTensor`] is a dense channels-height-width grid of reals stored in
//! row-major order. Arithmetic always runs in `f64`; the [`Precision`] tag
//! records the storage width used when the tensor is serialized (and, in
//! 32-bit training mode, marks values that have been rounded through `f32`).
//!
//! The serialized form ("UDT1") is fixed and platform-independent:
//!
//! ```text
//! magic "UDT1" | u8 precision tag (4 or 8) | u8 ndim | ndim x u32 LE dims | payload
//! ```
//!
//! with the payload holding little-endian IEEE-754 reals in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, CoreResult};
use crate::rng::RngStream;

/// Storage width for serialized reals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    #[default]
    F64,
}

impl Precision {
    /// One-byte tag used in the UDT1 header: the element size in bytes.
    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    fn from_tag(tag: u8) -> CoreResult<Self> {
        match tag {
            4 => Ok(Precision::F32),
            8 => Ok(Precision::F64),
            other => Err(CoreError::Format(format!(
                "unknown precision tag {other} (expected 4 or 8)"
            ))),
        }
    }
}

/// Dense (channels, height, width) grid of reals.
///
/// `level` is optional metadata: the diffusion level in `[0, 1]` the tensor
/// was produced at. File round-trips and arithmetic never consult it.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    /// Diffusion level this tensor belongs to, when known.
    pub level: Option<f64>,
    /// Storage width to use when serializing.
    pub precision: Precision,
}

impl ImageTensor {
    /// All-zeros tensor. Zero-sized shapes are rejected.
    pub fn zeros(channels: usize, height: usize, width: usize) -> CoreResult<Self> {
        check_shape(channels, height, width)?;
        Ok(ImageTensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
            level: None,
            precision: Precision::default(),
        })
    }

    /// Build from an existing row-major buffer; the length must match.
    pub fn from_vec(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> CoreResult<Self> {
        check_shape(channels, height, width)?;
        if data.len() != channels * height * width {
            return Err(CoreError::ShapeMismatch(format!(
                "buffer of {} values cannot fill a {}x{}x{} tensor",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(ImageTensor {
            channels,
            height,
            width,
            data,
            level: None,
            precision: Precision::default(),
        })
    }

    /// Standard-normal tensor: every entry an independent N(0, 1) draw.
    pub fn randn(
        rng: &mut RngStream,
        channels: usize,
        height: usize,
        width: usize,
    ) -> CoreResult<Self> {
        let mut out = ImageTensor::zeros(channels, height, width)?;
        for v in out.data.iter_mut() {
            *v = rng.next_normal();
        }
        Ok(out)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// (channels, height, width)
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// One channel as a contiguous height*width slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.height * self.width;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Error unless `other` has the same shape; `what` names the operands.
    pub fn check_same_shape(&self, other: &ImageTensor, what: &str) -> CoreResult<()> {
        if self.shape() != other.shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// self + scale * other, elementwise.
    pub fn add_scaled(&self, other: &ImageTensor, scale: f64) -> CoreResult<ImageTensor> {
        self.check_same_shape(other, "add_scaled")?;
        let mut out = self.clone();
        for (o, v) in out.data.iter_mut().zip(other.data.iter()) {
            *o += scale * v;
        }
        Ok(out)
    }

    /// self - other, elementwise.
    pub fn sub(&self, other: &ImageTensor) -> CoreResult<ImageTensor> {
        self.check_same_shape(other, "sub")?;
        let mut out = self.clone();
        for (o, v) in out.data.iter_mut().zip(other.data.iter()) {
            *o -= v;
        }
        Ok(out)
    }

    /// scale * self, elementwise.
    pub fn scaled(&self, scale: f64) -> ImageTensor {
        let mut out = self.clone();
        for o in out.data.iter_mut() {
            *o *= scale;
        }
        out
    }

    /// Euclidean inner product over all entries.
    pub fn dot(&self, other: &ImageTensor) -> CoreResult<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum())
    }

    /// Sum of squared entries.
    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Largest absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &ImageTensor) -> CoreResult<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// True when every entry is a finite number.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Round every entry to its nearest `f32` value and tag the tensor F32.
    /// Used by 32-bit training mode; arithmetic stays in `f64` containers.
    pub fn quantize_f32(&mut self) {
        for v in self.data.iter_mut() {
            *v = *v as f32 as f64;
        }
        self.precision = Precision::F32;
    }

    /// Serialize to UDT1 bytes with this tensor's precision tag and
    /// dims `[channels, height, width]`.
    pub fn to_udt1_bytes(&self) -> CoreResult<Vec<u8>> {
        let mut out = Vec::new();
        let dims = [self.channels as u32, self.height as u32, self.width as u32];
        write_udt1(&mut out, &dims, &self.data, self.precision)
            .map_err(|e| CoreError::Format(format!("udt1 encode: {e}")))?;
        Ok(out)
    }

    /// Parse one UDT1 record (which must be 3-dimensional) from a reader.
    pub fn read_udt1(reader: &mut impl Read) -> CoreResult<Self> {
        let (dims, data, precision) = read_udt1(reader)?;
        if dims.len() != 3 {
            return Err(CoreError::Format(format!(
                "expected a 3-d image tensor, found {} dims",
                dims.len()
            )));
        }
        let mut t =
            ImageTensor::from_vec(dims[0] as usize, dims[1] as usize, dims[2] as usize, data)?;
        t.precision = precision;
        Ok(t)
    }

    pub fn from_udt1_bytes(bytes: &[u8]) -> CoreResult<Self> {
        let mut cursor = bytes;
        Self::read_udt1(&mut cursor)
    }

    pub fn save_udt1(&self, path: &Path) -> CoreResult<()> {
        std::fs::write(path, self.to_udt1_bytes()?).map_err(|e| CoreError::io(path, e))
    }

    pub fn load_udt1(path: &Path) -> CoreResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_udt1_bytes(&bytes)
    }
}

fn check_shape(channels: usize, height: usize, width: usize) -> CoreResult<()> {
    if channels == 0 || height == 0 || width == 0 {
        return Err(CoreError::InvalidArgument(format!(
            "zero-sized tensor shape {channels}x{height}x{width}"
        )));
    }
    Ok(())
}

const UDT1_MAGIC: &[u8; 4] = b"UDT1";

/// Write one UDT1 record: header plus row-major little-endian payload.
/// F32 storage rounds each value to its nearest `f32`.
pub fn write_udt1(
    writer: &mut impl Write,
    dims: &[u32],
    data: &[f64],
    precision: Precision,
) -> std::io::Result<()> {
    assert!(
        !dims.is_empty() && dims.len() <= u8::MAX as usize,
        "dim count must fit in a u8"
    );
    let numel: usize = dims.iter().map(|d| *d as usize).product();
    assert_eq!(numel, data.len(), "dims must describe the payload exactly");
    writer.write_all(UDT1_MAGIC)?;
    writer.write_all(&[precision.tag(), dims.len() as u8])?;
    for d in dims {
        writer.write_all(&d.to_le_bytes())?;
    }
    match precision {
        Precision::F32 => {
            for v in data {
                writer.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Precision::F64 => {
            for v in data {
                writer.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Read one UDT1 record. F32 payloads widen losslessly to `f64`.
pub fn read_udt1(reader: &mut impl Read) -> CoreResult<(Vec<u32>, Vec<f64>, Precision)> {
    let mut magic = [0u8; 4];
    read_exact(reader, &mut magic)?;
    if &magic != UDT1_MAGIC {
        return Err(CoreError::Format(format!(
            "bad tensor magic {magic:?} (expected {UDT1_MAGIC:?})"
        )));
    }
    let mut head = [0u8; 2];
    read_exact(reader, &mut head)?;
    let precision = Precision::from_tag(head[0])?;
    let ndim = head[1] as usize;
    if ndim == 0 {
        return Err(CoreError::Format("tensor with zero dims".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut raw = [0u8; 4];
        read_exact(reader, &mut raw)?;
        dims.push(u32::from_le_bytes(raw));
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d as usize))
        .ok_or_else(|| CoreError::Format("tensor dims overflow".into()))?;
    if numel == 0 {
        return Err(CoreError::Format("tensor with a zero dim".into()));
    }
    let mut data = Vec::with_capacity(numel);
    match precision {
        Precision::F32 => {
            let mut raw = [0u8; 4];
            for _ in 0..numel {
                read_exact(reader, &mut raw)?;
                data.push(f32::from_le_bytes(raw) as f64);
            }
        }
        Precision::F64 => {
            let mut raw = [0u8; 8];
            for _ in 0..numel {
                read_exact(reader, &mut raw)?;
                data.push(f64::from_le_bytes(raw));
            }
        }
    }
    Ok((dims, data, precision))
}

fn read_exact(reader: &mut impl Read, buf: &mut [u8]) -> CoreResult<()> {
    reader
        .read_exact(buf)
        .map_err(|e| CoreError::Format(format!("truncated tensor record: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sized_shapes_rejected() {
        assert!(ImageTensor::zeros(0, 4, 4).is_err());
        assert!(ImageTensor::zeros(1, 0, 4).is_err());
        let mut rng = RngStream::new(1, 0);
        assert!(ImageTensor::randn(&mut rng, 1, 4, 0).is_err());
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(ImageTensor::from_vec(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(ImageTensor::from_vec(1, 2, 2, vec![0.0; 4]).is_ok());
    }

    #[test]
    fn udt1_roundtrip_f64_is_bit_exact() {
        let mut rng = RngStream::new(7, 3);
        let t = ImageTensor::randn(&mut rng, 2, 3, 5).unwrap();
        let bytes = t.to_udt1_bytes().unwrap();
        let back = ImageTensor::from_udt1_bytes(&bytes).unwrap();
        assert_eq!(t.shape(), back.shape());
        for (a, b) in t.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(
                a.to_bits(),
                b.to_bits(),
                "f64 payload must round-trip bit-exactly"
            );
        }
        assert_eq!(back.precision, Precision::F64);
    }

    #[test]
    fn udt1_roundtrip_f32_quantizes_once() {
        let mut rng = RngStream::new(7, 4);
        let mut t = ImageTensor::randn(&mut rng, 1, 4, 4).unwrap();
        t.precision = Precision::F32;
        let bytes = t.to_udt1_bytes().unwrap();
        let back = ImageTensor::from_udt1_bytes(&bytes).unwrap();
        assert_eq!(back.precision, Precision::F32);
        // Writing the widened values again must not lose anything further.
        let bytes2 = back.to_udt1_bytes().unwrap();
        assert_eq!(bytes, bytes2, "second f32 round-trip must be lossless");
        for (a, b) in t.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn udt1_header_layout_is_fixed() {
        let t = ImageTensor::from_vec(1, 1, 2, vec![1.0, -1.0]).unwrap();
        let bytes = t.to_udt1_bytes().unwrap();
        assert_eq!(&bytes[0..4], b"UDT1");
        assert_eq!(bytes[4], 8, "f64 tag");
        assert_eq!(bytes[5], 3, "ndim");
        assert_eq!(&bytes[6..10], &1u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &1u32.to_le_bytes());
        assert_eq!(&bytes[14..18], &2u32.to_le_bytes());
        assert_eq!(&bytes[18..26], &1.0f64.to_le_bytes());
    }

    #[test]
    fn udt1_rejects_bad_magic_and_truncation() {
        let t = ImageTensor::from_vec(1, 2, 2, vec![0.5; 4]).unwrap();
        let mut bytes = t.to_udt1_bytes().unwrap();
        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        assert!(ImageTensor::from_udt1_bytes(&corrupted).is_err());
        bytes.truncate(bytes.len() - 1);
        assert!(ImageTensor::from_udt1_bytes(&bytes).is_err());
    }

    #[test]
    fn quantize_f32_rounds_through_f32() {
        let mut t = ImageTensor::from_vec(1, 1, 1, vec![std::f64::consts::PI]).unwrap();
        t.quantize_f32();
        assert_eq!(t.as_slice()[0], std::f64::consts::PI as f32 as f64);
        assert_eq!(t.precision, Precision::F32);
    }
}

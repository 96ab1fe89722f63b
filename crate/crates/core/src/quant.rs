//! Re-encoding features at reduced width for storage: affine uint8 with
//! min/max calibration, 1-bit sign, and a 16-bit float storage dtype.

use std::fmt;
use std::str::FromStr;

use half::f16;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wire::{Reader, Writer};

/// Smallest scale produced by calibration (degenerate ranges).
pub const MIN_SCALE: f64 = 1e-12;
/// Vectors used to calibrate uint8 parameters when not specified.
pub const DEFAULT_CALIBRATION_VECTORS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: u8,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum QuantScheme {
    F32,
    /// Half precision, storage only.
    F16,
    U8(QuantParams),
    Bit1,
}

impl QuantScheme {
    pub fn bits_per_element(&self) -> usize {
        match self {
            QuantScheme::F32 => 32,
            QuantScheme::F16 => 16,
            QuantScheme::U8(_) => 8,
            QuantScheme::Bit1 => 1,
        }
    }

    pub fn mode(&self) -> QuantMode {
        match self {
            QuantScheme::F32 => QuantMode::F32,
            QuantScheme::F16 => QuantMode::F16,
            QuantScheme::U8(_) => QuantMode::U8,
            QuantScheme::Bit1 => QuantMode::Bit1,
        }
    }

    pub(crate) fn tag(&self) -> u8 {
        self.mode().tag()
    }
}

/// A scheme without calibrated parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QuantMode {
    F32,
    F16,
    U8,
    Bit1,
}

impl QuantMode {
    pub fn bits_per_element(&self) -> usize {
        match self {
            QuantMode::F32 => 32,
            QuantMode::F16 => 16,
            QuantMode::U8 => 8,
            QuantMode::Bit1 => 1,
        }
    }

    /// Resolves to a scheme, calibrating on `sample` when parameters are
    /// needed.
    pub fn calibrate(&self, sample: &[f32]) -> Result<QuantScheme> {
        Ok(match self {
            QuantMode::F32 => QuantScheme::F32,
            QuantMode::F16 => QuantScheme::F16,
            QuantMode::U8 => QuantScheme::U8(calibrate_affine(sample)?),
            QuantMode::Bit1 => QuantScheme::Bit1,
        })
    }

    pub(crate) fn tag(&self) -> u8 {
        match self {
            QuantMode::F32 => 0,
            QuantMode::U8 => 1,
            QuantMode::Bit1 => 2,
            QuantMode::F16 => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => QuantMode::F32,
            1 => QuantMode::U8,
            2 => QuantMode::Bit1,
            3 => QuantMode::F16,
            _ => return None,
        })
    }
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantMode::F32 => "f32",
            QuantMode::F16 => "f16",
            QuantMode::U8 => "u8",
            QuantMode::Bit1 => "bit1",
        })
    }
}

impl FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(QuantMode::F32),
            "f16" => Ok(QuantMode::F16),
            "u8" => Ok(QuantMode::U8),
            "bit1" => Ok(QuantMode::Bit1),
            _ => Err(Error::Param(format!(
                "unknown quantization {s:?} (expected f32, f16, u8 or bit1)"
            ))),
        }
    }
}

/// Where quantization sits relative to layer pooling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QuantOrder {
    /// Quantize every layer, then pool the dequantized layers.
    BeforeLayerPooling,
    /// Pool layers, then quantize the position features.
    #[default]
    AfterLayerPooling,
}

impl fmt::Display for QuantOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantOrder::BeforeLayerPooling => "before",
            QuantOrder::AfterLayerPooling => "after",
        })
    }
}

impl FromStr for QuantOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "before" => Ok(QuantOrder::BeforeLayerPooling),
            "after" => Ok(QuantOrder::AfterLayerPooling),
            _ => Err(Error::Param(format!(
                "unknown quantization order {s:?} (expected before or after)"
            ))),
        }
    }
}

/// Features re-encoded under a scheme. Bit1 payloads pack each row (last
/// axis) MSB-first and pad rows to a byte boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedFeatures {
    scheme: QuantScheme,
    shape: Vec<usize>,
    payload: Vec<u8>,
}

impl QuantizedFeatures {
    pub fn from_parts(scheme: QuantScheme, shape: Vec<usize>, payload: Vec<u8>) -> Result<Self> {
        let expected = payload_len(&shape, &scheme);
        if payload.len() != expected {
            return Err(Error::format(
                0,
                format!(
                    "payload of {} bytes, expected {expected} for shape {shape:?} at {} bits",
                    payload.len(),
                    scheme.bits_per_element()
                ),
            ));
        }
        Ok(Self {
            scheme,
            shape,
            payload,
        })
    }

    pub fn scheme(&self) -> &QuantScheme {
        &self.scheme
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.last() {
        None => (1, 1),
        Some(&0) => (0, 0),
        Some(&c) => (shape.iter().product::<usize>() / c, c),
    }
}

/// Payload bytes for a tensor of `shape` under `scheme`, including Bit1 row
/// padding.
pub fn payload_len(shape: &[usize], scheme: &QuantScheme) -> usize {
    let n: usize = shape.iter().product();
    match scheme {
        QuantScheme::F32 => n * 4,
        QuantScheme::F16 => n * 2,
        QuantScheme::U8(_) => n,
        QuantScheme::Bit1 => {
            let (rows, cols) = rows_cols(shape);
            rows * cols.div_ceil(8)
        }
    }
}

/// Min/max affine calibration onto 0..=255, over the sample range widened
/// to include 0.
pub fn calibrate_affine(sample: &[f32]) -> Result<QuantParams> {
    if sample.is_empty() {
        return Err(Error::Input("calibration sample is empty".into()));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("calibration sample has non-finite values".into()));
    }
    // The range always covers 0 so that 0 has an exact code and every
    // in-sample value stays within half a step; without this a sample such
    // as all-3.0 would clamp to the zero point.
    let (min, max) = sample
        .iter()
        .fold((0.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    let range = max - min;
    let (scale, zero) = if range / 255.0 < MIN_SCALE {
        (MIN_SCALE, (-min / MIN_SCALE).round())
    } else {
        // -min / ((max - min) / 255), kept in one division so exact cases
        // such as [-1, 1] land on .5 and round away from zero.
        (range / 255.0, (-min * 255.0 / range).round())
    };
    Ok(QuantParams {
        scale: scale as f32,
        zero_point: zero.clamp(0.0, 255.0) as u8,
    })
}

pub fn quantize(x: &Tensor, scheme: &QuantScheme) -> Result<QuantizedFeatures> {
    if !x.all_finite() {
        return Err(Error::Input("cannot quantize non-finite values".into()));
    }
    let data = x.data();
    let payload = match scheme {
        QuantScheme::F32 => data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        QuantScheme::F16 => data
            .iter()
            .flat_map(|&v| f16::from_f32(v).to_le_bytes())
            .collect(),
        QuantScheme::U8(p) => {
            if !(p.scale > 0.0) {
                return Err(Error::Param(format!("scale {} is not positive", p.scale)));
            }
            let scale = p.scale as f64;
            let zp = p.zero_point as f64;
            data.iter()
                .map(|&v| ((v as f64 / scale).round() + zp).clamp(0.0, 255.0) as u8)
                .collect()
        }
        QuantScheme::Bit1 => {
            let (_, cols) = rows_cols(x.shape());
            if cols == 0 {
                Vec::new()
            } else {
                data.chunks(cols).flat_map(pack_signs).collect()
            }
        }
    };
    QuantizedFeatures::from_parts(*scheme, x.shape().to_vec(), payload)
}

fn pack_signs(row: &[f32]) -> Vec<u8> {
    let mut out = vec![0u8; row.len().div_ceil(8)];
    for (i, &v) in row.iter().enumerate() {
        if v >= 0.0 {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

pub fn dequantize(q: &QuantizedFeatures) -> Result<Tensor> {
    let expected = payload_len(&q.shape, &q.scheme);
    if q.payload.len() != expected {
        return Err(Error::format(
            0,
            format!(
                "payload of {} bytes, expected {expected}",
                q.payload.len()
            ),
        ));
    }
    let p = &q.payload;
    let data: Vec<f32> = match &q.scheme {
        QuantScheme::F32 => p
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        QuantScheme::F16 => p
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        QuantScheme::U8(params) => {
            let zp = params.zero_point as f32;
            p.iter().map(|&b| (b as f32 - zp) * params.scale).collect()
        }
        QuantScheme::Bit1 => {
            let (rows, cols) = rows_cols(&q.shape);
            let stride = cols.div_ceil(8);
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let row = &p[r * stride..(r + 1) * stride];
                out.extend((0..cols).map(|i| {
                    if row[i / 8] & (0x80 >> (i % 8)) != 0 {
                        1.0
                    } else {
                        -1.0
                    }
                }));
            }
            out
        }
    };
    Tensor::new(q.shape.clone(), data)
}

/// `dequantize(quantize(x))`.
pub fn round_trip(x: &Tensor, scheme: &QuantScheme) -> Result<Tensor> {
    dequantize(&quantize(x, scheme)?)
}

pub(crate) fn write_scheme<W: std::io::Write>(w: &mut Writer<W>, scheme: &QuantScheme) -> Result<()> {
    w.u8(scheme.tag())?;
    if let QuantScheme::U8(p) = scheme {
        w.f32(p.scale)?;
        w.u8(p.zero_point)?;
    }
    Ok(())
}

pub(crate) fn read_scheme<R: std::io::Read>(r: &mut Reader<R>) -> Result<QuantScheme> {
    let at = r.offset();
    let tag = r.u8("scheme")?;
    Ok(match QuantMode::from_tag(tag) {
        Some(QuantMode::F32) => QuantScheme::F32,
        Some(QuantMode::F16) => QuantScheme::F16,
        Some(QuantMode::Bit1) => QuantScheme::Bit1,
        Some(QuantMode::U8) => {
            let scale_at = r.offset();
            let scale = r.f32("scale")?;
            if !(scale > 0.0) || !scale.is_finite() {
                return Err(Error::format(scale_at, format!("invalid scale {scale}")));
            }
            QuantScheme::U8(QuantParams {
                scale,
                zero_point: r.u8("zero point")?,
            })
        }
        None => return Err(Error::format(at, format!("unknown scheme {tag}"))),
    })
}

//! Min-max k-bit quantization with straight-through gradients, and the
//! fully quantized scene that the codec serializes.

use half::f16;
use thiserror::Error;

use crate::scene::{sigmoid, ActivatedScene};

/// Default EMA momentum for running min/max.
pub const DEFAULT_MOMENTUM: f64 = 0.99;
pub const DEFAULT_BITS: u8 = 8;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("bit width {0} outside [2, 16]")]
    Bits(u8),
    #[error("{field} index {index} out of range for codebook of {len}")]
    IndexOutOfRange { field: &'static str, index: u32, len: usize },
    #[error("{field} has {got} values, expected {expected}")]
    Length { field: &'static str, got: usize, expected: usize },
    #[error("{field} code {code} exceeds {bits}-bit range")]
    Code { field: &'static str, code: u16, bits: u8 },
    #[error("position {value} not representable in half precision")]
    Position { value: f64 },
}

fn check_bits(bits: u8) -> Result<(), QuantError> {
    if (2..=16).contains(&bits) {
        Ok(())
    } else {
        Err(QuantError::Bits(bits))
    }
}

fn levels(bits: u8) -> f64 {
    ((1u32 << bits) - 1) as f64
}

fn code_of(p: f64, min: f64, max: f64, bits: u8) -> u16 {
    if !(max > min) {
        return 0;
    }
    let t = ((p - min) / (max - min)).clamp(0.0, 1.0);
    (t * levels(bits)).round() as u16
}

fn value_of(q: u16, min: f64, max: f64, bits: u8) -> f64 {
    if !(max > min) {
        return min;
    }
    let t = q as f64 / levels(bits);
    // interpolation form keeps both endpoints exact
    min * (1.0 - t) + max * t
}

/// Frozen quantizer as stored in a container: bit width plus `f32` bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantRange {
    pub bits: u8,
    pub min: f32,
    pub max: f32,
}

impl QuantRange {
    pub fn new(bits: u8, min: f32, max: f32) -> Result<Self, QuantError> {
        check_bits(bits)?;
        Ok(QuantRange { bits, min, max })
    }

    pub fn levels(&self) -> u16 {
        levels(self.bits) as u16
    }

    pub fn code(&self, p: f64) -> u16 {
        code_of(p, self.min as f64, self.max as f64, self.bits)
    }

    pub fn value(&self, q: u16) -> f64 {
        value_of(q, self.min as f64, self.max as f64, self.bits)
    }

    /// Grid spacing `(max − min) / (2^b − 1)`.
    pub fn step(&self) -> f64 {
        (self.max as f64 - self.min as f64) / levels(self.bits)
    }
}

/// Running quantizer used during quantization-aware fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantState {
    pub bits: u8,
    pub min: f64,
    pub max: f64,
    pub momentum: f64,
    pub initialized: bool,
    pub frozen: bool,
}

impl QuantState {
    pub fn new(bits: u8) -> Result<Self, QuantError> {
        check_bits(bits)?;
        Ok(QuantState { bits, min: 0.0, max: 0.0, momentum: DEFAULT_MOMENTUM, initialized: false, frozen: false })
    }

    /// State with known bounds, e.g. restored from a container.
    pub fn from_range(range: &QuantRange) -> Self {
        QuantState {
            bits: range.bits,
            min: range.min as f64,
            max: range.max as f64,
            momentum: DEFAULT_MOMENTUM,
            initialized: true,
            frozen: false,
        }
    }

    /// Folds one batch into the running bounds. The first batch sets them
    /// directly; later ones are blended with the momentum.
    pub fn observe(&mut self, values: &[f64]) {
        if self.frozen || values.is_empty() {
            return;
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if self.initialized {
            let m = self.momentum;
            self.min = m * self.min + (1.0 - m) * lo;
            self.max = m * self.max + (1.0 - m) * hi;
        } else {
            self.min = lo;
            self.max = hi;
            self.initialized = true;
        }
    }

    /// Stops tracking and snaps the bounds to their stored `f32` values.
    pub fn freeze(&mut self) {
        self.min = self.min as f32 as f64;
        self.max = self.max as f32 as f64;
        self.frozen = true;
    }

    pub fn range(&self) -> QuantRange {
        QuantRange { bits: self.bits, min: self.min as f32, max: self.max as f32 }
    }

    pub fn code(&self, p: f64) -> u16 {
        code_of(p, self.min, self.max, self.bits)
    }

    pub fn value(&self, q: u16) -> f64 {
        value_of(q, self.min, self.max, self.bits)
    }

    /// Quantize-dequantize of one scalar.
    pub fn fake_quantize(&self, p: f64) -> f64 {
        self.value(self.code(p))
    }
}

/// Simulated quantization of a tensor.
pub fn fake_quantize(values: &[f64], state: &QuantState) -> Vec<f64> {
    values.iter().map(|&p| state.fake_quantize(p)).collect()
}

/// Backward of [`fake_quantize`]: the straight-through estimator passes the
/// upstream gradient unchanged, clamped inputs included.
pub fn fake_quantize_backward(upstream: &[f64]) -> Vec<f64> {
    upstream.to_vec()
}

/// Half-precision round trip used for positions.
pub fn f16_round(v: f64) -> f64 {
    f16::from_f64(v).to_f64()
}

/// Bounds of every quantized field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantRanges {
    /// Post-sigmoid opacity.
    pub opacity: QuantRange,
    /// Pre-exponential scale magnitude `ln η`.
    pub eta: QuantRange,
    /// One range for all color codebook scalars.
    pub color: QuantRange,
    /// Shape codebook quaternion components.
    pub rotation: QuantRange,
    /// Shape codebook unit-scale components.
    pub scale: QuantRange,
}

/// Fully quantized scene.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedScene {
    pub sh_basis: usize,
    /// IEEE half-precision bit patterns.
    pub positions: Vec<[u16; 3]>,
    pub opacity: Vec<u16>,
    pub eta: Vec<u16>,
    pub color_index: Vec<u32>,
    pub shape_index: Vec<u32>,
    /// `K_total_color × sh_dim` codes.
    pub color_codebook: Vec<u16>,
    pub color_clustered: usize,
    /// `K_total_shape × 4` codes.
    pub shape_rotation: Vec<u16>,
    /// `K_total_shape × 3` codes.
    pub shape_scale: Vec<u16>,
    pub shape_clustered: usize,
    pub ranges: QuantRanges,
}

impl CompressedScene {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn sh_dim(&self) -> usize {
        self.sh_basis * 3
    }

    pub fn color_count(&self) -> usize {
        self.color_codebook.len().checked_div(self.sh_dim()).unwrap_or(0)
    }

    pub fn shape_count(&self) -> usize {
        self.shape_scale.len() / 3
    }

    /// Positions decoded from half precision.
    pub fn decoded_positions(&self) -> Vec<[f64; 3]> {
        self.positions.iter().map(|p| p.map(|b| f16::from_bits(b).to_f64())).collect()
    }

    /// Checks lengths, index bounds and code ranges.
    pub fn validate(&self) -> Result<(), QuantError> {
        let n = self.len();
        let len = |field, got, expected| if got == expected { Ok(()) } else { Err(QuantError::Length { field, got, expected }) };
        len("opacity", self.opacity.len(), n)?;
        len("eta", self.eta.len(), n)?;
        len("color_index", self.color_index.len(), n)?;
        len("shape_index", self.shape_index.len(), n)?;
        len("color_codebook", self.color_codebook.len(), self.color_count() * self.sh_dim())?;
        len("shape_rotation", self.shape_rotation.len(), self.shape_count() * 4)?;
        len("shape_scale", self.shape_scale.len(), self.shape_count() * 3)?;
        let check_idx = |field, idx: &[u32], k: usize| match idx.iter().find(|&&i| i as usize >= k) {
            Some(&index) => Err(QuantError::IndexOutOfRange { field, index, len: k }),
            None => Ok(()),
        };
        check_idx("color_index", &self.color_index, self.color_count())?;
        check_idx("shape_index", &self.shape_index, self.shape_count())?;
        let r = &self.ranges;
        for (field, codes, range) in [
            ("opacity", &self.opacity, r.opacity),
            ("eta", &self.eta, r.eta),
            ("color_codebook", &self.color_codebook, r.color),
            ("shape_rotation", &self.shape_rotation, r.rotation),
            ("shape_scale", &self.shape_scale, r.scale),
        ] {
            check_bits(range.bits)?;
            if let Some(&code) = codes.iter().find(|&&c| c > range.levels()) {
                return Err(QuantError::Code { field, code, bits: range.bits });
            }
        }
        Ok(())
    }

    /// Per-Gaussian arrays reordered so that entry `k` is old entry
    /// `order[k]`. Codebooks are untouched.
    pub fn permuted(&self, order: &[usize]) -> CompressedScene {
        CompressedScene {
            positions: order.iter().map(|&i| self.positions[i]).collect(),
            opacity: order.iter().map(|&i| self.opacity[i]).collect(),
            eta: order.iter().map(|&i| self.eta[i]).collect(),
            color_index: order.iter().map(|&i| self.color_index[i]).collect(),
            shape_index: order.iter().map(|&i| self.shape_index[i]).collect(),
            ..self.clone()
        }
    }
}

/// Decoded shape codebook entry: unit quaternion and unit-norm scale.
pub fn decode_shape_entry(c: &CompressedScene, k: usize) -> ([f64; 4], [f64; 3]) {
    let r = &c.ranges;
    let q: [f64; 4] = std::array::from_fn(|j| r.rotation.value(c.shape_rotation[k * 4 + j]));
    let s: [f64; 3] = std::array::from_fn(|j| r.scale.value(c.shape_scale[k * 3 + j]));
    (normalize_or(q, [1.0, 0.0, 0.0, 0.0]), normalize_or(s, [1.0 / 3f64.sqrt(); 3]))
}

pub(crate) fn normalize_or<const N: usize>(v: [f64; N], fallback: [f64; N]) -> [f64; N] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.map(|x| x / n)
    } else {
        fallback
    }
}

/// Render inputs of a compressed scene: `α` straight from its code,
/// `s = exp(deq(ln η))·ŝ` with the shape entry renormalized, SH from the
/// color entry and positions widened from half precision.
pub fn dequantize_scene(c: &CompressedScene) -> Result<ActivatedScene, QuantError> {
    c.validate()?;
    let r = &c.ranges;
    let d = c.sh_dim();
    let shapes: Vec<([f64; 4], [f64; 3])> = (0..c.shape_count()).map(|k| decode_shape_entry(c, k)).collect();
    let colors: Vec<f64> = c.color_codebook.iter().map(|&q| r.color.value(q)).collect();
    let mut out = ActivatedScene {
        positions: c.decoded_positions(),
        rotations: Vec::with_capacity(c.len()),
        scales: Vec::with_capacity(c.len()),
        opacities: Vec::with_capacity(c.len()),
        sh: Vec::with_capacity(c.len() * d),
        sh_basis: c.sh_basis,
    };
    for i in 0..c.len() {
        let (q, unit) = shapes[c.shape_index[i] as usize];
        let eta = r.eta.value(c.eta[i]).exp();
        out.rotations.push(q);
        out.scales.push(unit.map(|v| v * eta));
        out.opacities.push(r.opacity.value(c.opacity[i]).clamp(0.0, 1.0));
        let k = c.color_index[i] as usize;
        out.sh.extend_from_slice(&colors[k * d..(k + 1) * d]);
    }
    Ok(out)
}

/// Half-precision bits of a position, rejecting values outside the f16 range.
pub fn encode_position(p: [f64; 3]) -> Result<[u16; 3], QuantError> {
    let mut out = [0u16; 3];
    for (o, &v) in out.iter_mut().zip(&p) {
        let h = f16::from_f64(v);
        if !h.is_finite() {
            return Err(QuantError::Position { value: v });
        }
        *o = h.to_bits();
    }
    Ok(out)
}

/// Opacity code for a logit, quantized after the sigmoid.
pub fn opacity_code(logit: f64, range: &QuantRange) -> u16 {
    range.code(sigmoid(logit))
}

//! Uniform fake quantization.
//!
//! Asymmetric quantize-dequantize maps a real `x` onto `k + 1` levels
//! `s * (j + n)` for `j = 0..=k`, where `n = round(z)` is the integer
//! anchor of the range. Symmetric quantization uses the levels
//! `s * j` for `j` in `-(k-1)/2..=(k-1)/2`.
//!
//! All rounding is half-to-even.

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};

/// Lower bound applied to every derived step size.
pub const S_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    Asymmetric,
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Rounding {
    #[default]
    HalfToEven,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub scheme: Scheme,
    pub granularity: Granularity,
    pub rounding: Rounding,
}

impl QuantSpec {
    pub fn new(bits: u32, scheme: Scheme) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(QuantError::InvalidBits { bits });
        }
        Ok(Self {
            bits,
            scheme,
            granularity: Granularity::PerTensor,
            rounding: Rounding::HalfToEven,
        })
    }

    pub fn asymmetric(bits: u32) -> Result<Self> {
        Self::new(bits, Scheme::Asymmetric)
    }

    pub fn symmetric(bits: u32) -> Result<Self> {
        Self::new(bits, Scheme::Symmetric)
    }

    pub fn per_channel(mut self, axis: usize) -> Self {
        self.granularity = Granularity::PerChannel { axis };
        self
    }

    /// Number of integer steps, `2^bits - 1`.
    pub fn k(&self) -> i64 {
        levels(self.bits)
    }
}

/// `2^bits - 1`.
pub fn levels(bits: u32) -> i64 {
    (1i64 << bits) - 1
}

/// Nearest integer, ties to even.
pub fn round_half_even(x: f64) -> i64 {
    x.round_ties_even() as i64
}

#[inline]
fn rne(x: f64) -> f64 {
    x.round_ties_even()
}

/// Derived asymmetric quantizer state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Encoding {
    pub theta_min: f64,
    pub theta_max: f64,
    pub s: f64,
    pub z: f64,
    pub k: i64,
    /// Lower clip anchor, `round(z)`.
    pub n: i64,
    /// Upper clip anchor, `k + n`.
    pub p: i64,
}

impl Encoding {
    /// Builds an encoding from a range, clamping the step size to [`S_FLOOR`].
    /// The flag reports whether the clamp fired.
    pub fn from_range_clamped(theta_min: f64, theta_max: f64, k: i64) -> (Self, bool) {
        let width = theta_max - theta_min;
        let raw_s = width / k as f64;
        // Equal to theta_min / s but exact for ranges whose width divides evenly.
        if raw_s >= S_FLOOR {
            let z = theta_min * k as f64 / width;
            (Self::assemble(theta_min, theta_max, raw_s, z, k), false)
        } else {
            let s = S_FLOOR;
            let z = theta_min / s;
            (Self::assemble(theta_min, theta_max, s, z, k), true)
        }
    }

    /// Builds an encoding directly from step size and offset.
    pub fn from_scale_offset_clamped(s: f64, z: f64, k: i64) -> (Self, bool) {
        let clamped = !(s >= S_FLOOR);
        let s = if clamped { S_FLOOR } else { s };
        let theta_min = s * z;
        let theta_max = s * (z + k as f64);
        (Self::assemble(theta_min, theta_max, s, z, k), clamped)
    }

    fn assemble(theta_min: f64, theta_max: f64, s: f64, z: f64, k: i64) -> Self {
        let n = round_half_even(z);
        Self {
            theta_min,
            theta_max,
            s,
            z,
            k,
            n,
            p: k.saturating_add(n),
        }
    }

    /// Integer level index before clipping, `round(x / s) - n`.
    #[inline]
    pub fn level_index(&self, x: f64) -> f64 {
        rne(x / self.s) - self.n as f64
    }
}

/// Encoding for the asymmetric scheme from a learned range.
pub fn derive_encoding(theta_min: f64, theta_max: f64, spec: &QuantSpec) -> Result<Encoding> {
    if spec.scheme != Scheme::Asymmetric {
        return Err(QuantError::SchemeMismatch("derive_encoding requires the asymmetric scheme"));
    }
    encoding_for_k(theta_min, theta_max, spec.k())
}

pub(crate) fn encoding_for_k(theta_min: f64, theta_max: f64, k: i64) -> Result<Encoding> {
    let width = theta_max - theta_min;
    let floor = S_FLOOR * k as f64;
    if !(width >= floor) {
        return Err(QuantError::DegenerateRange { width, floor });
    }
    Ok(Encoding::from_range_clamped(theta_min, theta_max, k).0)
}

/// Asymmetric quantize-dequantize.
#[inline]
pub fn fake_quant_asym(x: f64, enc: &Encoding) -> f64 {
    let q = enc.level_index(x).clamp(0.0, enc.k as f64);
    enc.s * (q + enc.n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionLabel {
    Below,
    Inside,
    Above,
}

/// Which branch of the clip in [`fake_quant_asym`] is taken for `x`.
#[inline]
pub fn classify_region(x: f64, enc: &Encoding) -> RegionLabel {
    let q = enc.level_index(x);
    if q < 0.0 {
        RegionLabel::Below
    } else if q > enc.k as f64 {
        RegionLabel::Above
    } else {
        RegionLabel::Inside
    }
}

/// Rounding-free relaxation `s * (clip(x/s - z, 0, k) + z)`.
pub fn ste_surrogate(x: f64, s: f64, z: f64, k: i64) -> f64 {
    s * ((x / s - z).clamp(0.0, k as f64) + z)
}

/// Derived symmetric quantizer state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymEncoding {
    pub theta_max: f64,
    pub s: f64,
    pub k: i64,
    /// `-(k - 1) / 2`
    pub n: i64,
    /// `(k - 1) / 2`
    pub p: i64,
}

impl SymEncoding {
    pub fn new(theta_max: f64, k: i64) -> Result<Self> {
        if !(theta_max > 0.0) {
            return Err(QuantError::NonPositiveRange(theta_max));
        }
        Ok(Self::from_theta_max_clamped(theta_max, k).0)
    }

    pub fn from_theta_max_clamped(theta_max: f64, k: i64) -> (Self, bool) {
        let raw_s = 2.0 * theta_max / k as f64;
        let clamped = !(raw_s >= S_FLOOR);
        let s = if clamped { S_FLOOR } else { raw_s };
        (Self::assemble(theta_max, s, k), clamped)
    }

    pub fn from_scale_clamped(s: f64, k: i64) -> (Self, bool) {
        let clamped = !(s >= S_FLOOR);
        let s = if clamped { S_FLOOR } else { s };
        (Self::assemble(s * k as f64 / 2.0, s, k), clamped)
    }

    fn assemble(theta_max: f64, s: f64, k: i64) -> Self {
        let half = (k - 1) / 2;
        Self {
            theta_max,
            s,
            k,
            n: -half,
            p: half,
        }
    }

    #[inline]
    pub fn quantize(&self, x: f64) -> f64 {
        self.s * rne(x / self.s).clamp(self.n as f64, self.p as f64)
    }

    #[inline]
    pub fn region(&self, x: f64) -> RegionLabel {
        let q = rne(x / self.s);
        if q < self.n as f64 {
            RegionLabel::Below
        } else if q > self.p as f64 {
            RegionLabel::Above
        } else {
            RegionLabel::Inside
        }
    }
}

/// Symmetric quantize-dequantize with `s = 2 * theta_max / k`.
pub fn fake_quant_sym(x: f64, theta_max: f64, spec: &QuantSpec) -> Result<f64> {
    if spec.scheme != Scheme::Symmetric {
        return Err(QuantError::SchemeMismatch("fake_quant_sym requires the symmetric scheme"));
    }
    Ok(SymEncoding::new(theta_max, spec.k())?.quantize(x))
}

/// Channel that flat (row-major) index `idx` belongs to when channels run
/// along `axis` of `shape`.
pub fn channel_of(idx: usize, shape: &[usize], axis: usize) -> usize {
    let inner: usize = shape[axis + 1..].iter().product();
    (idx / inner) % shape[axis]
}

/// Number of encodings a tensor of `shape` needs under `granularity`.
pub fn channel_count(shape: &[usize], granularity: Granularity) -> usize {
    match granularity {
        Granularity::PerTensor => 1,
        Granularity::PerChannel { axis } => shape[axis],
    }
}

/// Elementwise asymmetric fake quantization with one encoding per channel.
pub fn fake_quant_asym_tensor(
    data: &[f64],
    shape: &[usize],
    granularity: Granularity,
    encodings: &[Encoding],
) -> Result<Vec<f64>> {
    check_layout(data, shape, granularity, encodings.len())?;
    Ok(data
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = match granularity {
                Granularity::PerTensor => 0,
                Granularity::PerChannel { axis } => channel_of(i, shape, axis),
            };
            fake_quant_asym(x, &encodings[c])
        })
        .collect())
}

pub(crate) fn check_layout(
    data: &[f64],
    shape: &[usize],
    granularity: Granularity,
    channels: usize,
) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(QuantError::LengthMismatch {
            left: numel,
            right: data.len(),
        });
    }
    if let Granularity::PerChannel { axis } = granularity {
        if axis >= shape.len() {
            return Err(QuantError::InvalidParams(format!(
                "channel axis {axis} out of bounds for rank {}",
                shape.len()
            )));
        }
    }
    let expected = channel_count(shape, granularity);
    if expected != channels {
        return Err(QuantError::LengthMismatch {
            left: expected,
            right: channels,
        });
    }
    Ok(())
}

//! Gradients of the dequantized output with respect to each range
//! parameterization, the mapping from raw learnables to encodings, and a
//! finite-difference oracle.
//!
//! Two gradient conventions are available. [`GradMode::PaperTable`]
//! returns the closed-form per-region table entries.
//! [`GradMode::SurrogateConsistent`] differentiates the straight-through
//! relaxation of the quantizer, in which every `round(u)` is replaced by
//! `u` plus a detached rounding residual. The two agree inside the clip
//! range and differ in the clipped regions: the offset derivative there is
//! `s` rather than `1`.

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::quant::{
    channel_of, check_layout, levels, Encoding, Granularity, QuantSpec,
    RegionLabel, Scheme, SymEncoding, S_FLOOR,
};

/// `logit(0.999)`: initial raw value for sigmoid-wrapped scalings, so that the
/// initial effective range sits within 0.1% of the calibration range.
pub const SIGMOID_INIT: f64 = 6.906_754_778_648_553;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// Which learnable of a symmetric quantizer is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SymParam {
    Scale,
    ThetaMax,
    Gamma { use_sigmoid: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parameterization {
    ScaleOffset,
    KScaleKOffset,
    MinMax,
    BetaGamma { use_sigmoid: bool },
    Symmetric(SymParam),
}

impl Parameterization {
    pub fn scheme(&self) -> Scheme {
        match self {
            Parameterization::Symmetric(_) => Scheme::Symmetric,
            _ => Scheme::Asymmetric,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Parameterization::ScaleOffset => "scale-offset",
            Parameterization::KScaleKOffset => "kscale-koffset",
            Parameterization::MinMax => "min-max",
            Parameterization::BetaGamma { use_sigmoid: false } => "beta-gamma",
            Parameterization::BetaGamma { use_sigmoid: true } => "beta-gamma-sigmoid",
            Parameterization::Symmetric(SymParam::Scale) => "sym-scale",
            Parameterization::Symmetric(SymParam::ThetaMax) => "sym-theta-max",
            Parameterization::Symmetric(SymParam::Gamma { use_sigmoid: false }) => "sym-gamma",
            Parameterization::Symmetric(SymParam::Gamma { use_sigmoid: true }) => {
                "sym-gamma-sigmoid"
            }
        }
    }

    /// Number of trained learnables per channel.
    pub fn learnable_count(&self) -> usize {
        match self {
            Parameterization::Symmetric(_) => 1,
            _ => 2,
        }
    }
}

impl std::fmt::Display for Parameterization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GradMode {
    PaperTable,
    #[default]
    SurrogateConsistent,
}

/// Raw learnables of one quantizer plus the frozen calibration statistics.
///
/// `enc_a`/`enc_b` hold, per channel:
/// - `MinMax`: `(theta_min, theta_max)`
/// - `ScaleOffset`: `(s, z)`
/// - `KScaleKOffset`: `(theta_max - theta_min, theta_min / (theta_max - theta_min))`
/// - `BetaGamma`: `(beta, gamma)`
/// - `Symmetric`: `(s | theta_max | gamma, unused)`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeParams {
    pub kind: Parameterization,
    pub enc_a: Vec<f64>,
    pub enc_b: Vec<f64>,
    pub theta_min0: Vec<f64>,
    pub theta_max0: Vec<f64>,
    pub bits: u32,
}

impl RangeParams {
    /// Learnables that reproduce the calibration range `(theta_min0, theta_max0)`
    /// exactly (up to `SIGMOID_INIT` for sigmoid-wrapped scalings).
    ///
    /// For symmetric kinds only `theta_max0` is used; `theta_min0` is set to its negation.
    pub fn from_calibration(
        kind: Parameterization,
        theta_min0: Vec<f64>,
        theta_max0: Vec<f64>,
        bits: u32,
    ) -> Result<Self> {
        let k = levels(bits) as f64;
        let theta_min0 = match kind {
            Parameterization::Symmetric(_) => theta_max0.iter().map(|t| -t).collect(),
            _ => theta_min0,
        };
        let mut enc_a = Vec::with_capacity(theta_max0.len());
        let mut enc_b = Vec::with_capacity(theta_max0.len());
        for (&lo, &hi) in theta_min0.iter().zip(&theta_max0) {
            let width = hi - lo;
            let (a, b) = match kind {
                Parameterization::MinMax => (lo, hi),
                Parameterization::ScaleOffset => (width / k, lo * k / width),
                Parameterization::KScaleKOffset => (width, lo / width),
                Parameterization::BetaGamma { use_sigmoid: false } => (1.0, 1.0),
                Parameterization::BetaGamma { use_sigmoid: true } => (SIGMOID_INIT, SIGMOID_INIT),
                Parameterization::Symmetric(SymParam::Scale) => (2.0 * hi / k, 0.0),
                Parameterization::Symmetric(SymParam::ThetaMax) => (hi, 0.0),
                Parameterization::Symmetric(SymParam::Gamma { use_sigmoid: false }) => (1.0, 0.0),
                Parameterization::Symmetric(SymParam::Gamma { use_sigmoid: true }) => {
                    (SIGMOID_INIT, 0.0)
                }
            };
            enc_a.push(a);
            enc_b.push(b);
        }
        let params = Self {
            kind,
            enc_a,
            enc_b,
            theta_min0,
            theta_max0,
            bits,
        };
        params.validate()?;
        Ok(params)
    }

    /// Per-tensor min/max parameters.
    pub fn min_max(theta_min: f64, theta_max: f64, bits: u32) -> Result<Self> {
        Self::from_calibration(Parameterization::MinMax, vec![theta_min], vec![theta_max], bits)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.enc_a.len();
        if c == 0
            || self.enc_b.len() != c
            || self.theta_min0.len() != c
            || self.theta_max0.len() != c
        {
            return Err(QuantError::InvalidParams(format!(
                "learnable/statistic lengths disagree: {} {} {} {}",
                c,
                self.enc_b.len(),
                self.theta_min0.len(),
                self.theta_max0.len()
            )));
        }
        QuantSpec::new(self.bits, self.kind.scheme())?;
        for (lo, hi) in self.theta_min0.iter().zip(&self.theta_max0) {
            if !(hi > lo) {
                return Err(QuantError::InvalidParams(format!(
                    "calibration range must satisfy theta_max0 > theta_min0, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.enc_a.len()
    }

    pub fn k(&self) -> i64 {
        levels(self.bits)
    }

    /// Quantizer state of channel `c`, with the step floor applied.
    pub fn resolve(&self, c: usize) -> (ChannelEncoding, bool) {
        let k = self.k();
        let kf = k as f64;
        let (a, b) = (self.enc_a[c], self.enc_b[c]);
        let (lo0, hi0) = (self.theta_min0[c], self.theta_max0[c]);
        match self.kind {
            Parameterization::MinMax => {
                let (e, cl) = Encoding::from_range_clamped(a, b, k);
                (ChannelEncoding::Asym(e), cl)
            }
            Parameterization::ScaleOffset => {
                let (e, cl) = Encoding::from_scale_offset_clamped(a, b, k);
                (ChannelEncoding::Asym(e), cl)
            }
            Parameterization::KScaleKOffset => {
                let (e, cl) = Encoding::from_scale_offset_clamped(a / kf, kf * b, k);
                (ChannelEncoding::Asym(e), cl)
            }
            Parameterization::BetaGamma { use_sigmoid } => {
                let (beta, gamma) = if use_sigmoid {
                    (sigmoid(a), sigmoid(b))
                } else {
                    (a, b)
                };
                let (e, cl) = Encoding::from_range_clamped(beta * lo0, gamma * hi0, k);
                (ChannelEncoding::Asym(e), cl)
            }
            Parameterization::Symmetric(param) => {
                let (e, cl) = match param {
                    SymParam::Scale => SymEncoding::from_scale_clamped(a, k),
                    SymParam::ThetaMax => SymEncoding::from_theta_max_clamped(a, k),
                    SymParam::Gamma { use_sigmoid } => {
                        let g = if use_sigmoid { sigmoid(a) } else { a };
                        SymEncoding::from_theta_max_clamped(g * hi0, k)
                    }
                };
                (ChannelEncoding::Sym(e), cl)
            }
        }
    }

    /// Effective `(theta_min, theta_max)` of channel `c`.
    pub fn effective_range(&self, c: usize) -> (f64, f64) {
        match self.resolve(c).0 {
            ChannelEncoding::Asym(e) => (e.theta_min, e.theta_max),
            ChannelEncoding::Sym(e) => (-e.theta_max, e.theta_max),
        }
    }
}

/// Resolved quantizer for one channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChannelEncoding {
    Asym(Encoding),
    Sym(SymEncoding),
}

impl ChannelEncoding {
    #[inline]
    pub fn quantize(&self, x: f64) -> f64 {
        match self {
            ChannelEncoding::Asym(e) => crate::quant::fake_quant_asym(x, e),
            ChannelEncoding::Sym(e) => e.quantize(x),
        }
    }

    #[inline]
    pub fn region(&self, x: f64) -> RegionLabel {
        match self {
            ChannelEncoding::Asym(e) => crate::quant::classify_region(x, e),
            ChannelEncoding::Sym(e) => e.region(x),
        }
    }

    pub fn s(&self) -> f64 {
        match self {
            ChannelEncoding::Asym(e) => e.s,
            ChannelEncoding::Sym(e) => e.s,
        }
    }
}

/// Asymmetric encodings of every channel. Fails when any channel's step
/// size falls below the floor.
pub fn params_to_encoding(params: &RangeParams) -> Result<Vec<Encoding>> {
    params.validate()?;
    if params.kind.scheme() != Scheme::Asymmetric {
        return Err(QuantError::SchemeMismatch(
            "params_to_encoding requires an asymmetric parameterization",
        ));
    }
    (0..params.channels())
        .map(|c| match params.resolve(c) {
            (ChannelEncoding::Asym(e), false) => Ok(e),
            (ChannelEncoding::Asym(e), true) => {
                let width = e.theta_max - e.theta_min;
                Err(QuantError::DegenerateRange {
                    width,
                    floor: S_FLOOR * e.k as f64,
                })
            }
            (ChannelEncoding::Sym(_), _) => unreachable!("scheme checked above"),
        })
        .collect()
}

/// Gradients with respect to the raw learnables, one entry per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradPair {
    pub d_enc_a: Vec<f64>,
    pub d_enc_b: Vec<f64>,
}

impl GradPair {
    pub fn zeros(channels: usize) -> Self {
        Self {
            d_enc_a: vec![0.0; channels],
            d_enc_b: vec![0.0; channels],
        }
    }

    pub fn single(a: f64, b: f64) -> Self {
        Self {
            d_enc_a: vec![a],
            d_enc_b: vec![b],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_enc_a.iter().chain(&self.d_enc_b).all(|g| g.is_finite())
    }
}

/// `(dx̂/ds, dx̂/dz)` for the asymmetric quantizer.
#[inline]
pub fn grad_scale_offset(x: f64, enc: &Encoding, mode: GradMode) -> (f64, f64) {
    let u = x / enc.s;
    let q = u.round_ties_even() - enc.n as f64;
    let dz_clipped = match mode {
        GradMode::PaperTable => 1.0,
        GradMode::SurrogateConsistent => enc.s,
    };
    if q < 0.0 {
        (enc.n as f64, dz_clipped)
    } else if q > enc.k as f64 {
        (enc.p as f64, dz_clipped)
    } else {
        (u.round_ties_even() - u, 0.0)
    }
}

/// `(dx̂/dθmin, dx̂/dθmax)` for the asymmetric quantizer.
#[inline]
pub fn grad_min_max(x: f64, enc: &Encoding, mode: GradMode) -> (f64, f64) {
    let kf = enc.k as f64;
    match mode {
        GradMode::PaperTable => {
            let u = x / enc.s;
            let r = u.round_ties_even();
            let q = r - enc.n as f64;
            let nf = enc.n as f64;
            let zres = nf - enc.z;
            if q < 0.0 {
                (-nf / kf + zres / kf + 1.0, nf / kf - zres / kf)
            } else if q > kf {
                (zres / kf, -zres / kf + 1.0)
            } else {
                let g = r - u;
                (-g / kf, g / kf)
            }
        }
        GradMode::SurrogateConsistent => {
            let (ds, dz) = grad_scale_offset(x, enc, mode);
            if dz == 0.0 {
                return (-ds / kf, ds / kf);
            }
            // z = k * theta_min / (theta_max - theta_min)
            let width = kf * enc.s;
            let dz_dmin = kf * enc.theta_max / (width * width);
            let dz_dmax = -kf * enc.theta_min / (width * width);
            (-ds / kf + dz * dz_dmin, ds / kf + dz * dz_dmax)
        }
    }
}

/// Gradients with respect to `(beta, gamma)` for per-tensor `BetaGamma` params.
pub fn grad_beta_gamma(x: f64, params: &RangeParams, mode: GradMode) -> Result<GradPair> {
    let Parameterization::BetaGamma { .. } = params.kind else {
        return Err(QuantError::InvalidParams(format!(
            "grad_beta_gamma requires beta/gamma params, got {}",
            params.kind
        )));
    };
    single_channel(params)?;
    let (enc, _) = params.resolve(0);
    let (_, da, db) = element_grad(x, &enc, params, 0, mode);
    Ok(GradPair::single(da, db))
}

/// Gradients with respect to `(s', z')`, where `s = s'/k` and `z = k z'`.
pub fn grad_kscale_koffset(x: f64, enc: &Encoding, mode: GradMode) -> GradPair {
    let kf = enc.k as f64;
    let (ds, dz) = grad_scale_offset(x, enc, mode);
    GradPair::single(ds / kf, kf * dz)
}

/// Target of a symmetric gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SymGradTarget {
    S,
    ThetaMax,
    /// `theta_max = gamma * theta_max0`.
    Gamma { theta_max0: f64 },
}

#[inline]
fn sym_base_grad(x: f64, enc: &SymEncoding) -> f64 {
    let u = x / enc.s;
    let r = u.round_ties_even();
    if r < enc.n as f64 {
        enc.n as f64
    } else if r > enc.p as f64 {
        enc.p as f64
    } else {
        r - u
    }
}

/// Gradient of the symmetric quantizer output with respect to `target`.
/// `theta_max` is the current effective range.
pub fn grad_sym(x: f64, theta_max: f64, spec: &QuantSpec, target: SymGradTarget) -> Result<f64> {
    if spec.scheme != Scheme::Symmetric {
        return Err(QuantError::SchemeMismatch("grad_sym requires the symmetric scheme"));
    }
    let enc = SymEncoding::new(theta_max, spec.k())?;
    let g = sym_base_grad(x, &enc);
    let kf = enc.k as f64;
    Ok(match target {
        SymGradTarget::S => g,
        SymGradTarget::ThetaMax => (2.0 / kf) * g,
        SymGradTarget::Gamma { theta_max0 } => theta_max0 * ((2.0 / kf) * g),
    })
}

/// Dequantized value and gradients with respect to channel `c`'s raw
/// learnables.
#[inline]
pub(crate) fn element_grad(
    x: f64,
    enc: &ChannelEncoding,
    params: &RangeParams,
    c: usize,
    mode: GradMode,
) -> (f64, f64, f64) {
    match enc {
        ChannelEncoding::Asym(e) => {
            let xhat = crate::quant::fake_quant_asym(x, e);
            let kf = e.k as f64;
            let (da, db) = match params.kind {
                Parameterization::ScaleOffset => grad_scale_offset(x, e, mode),
                Parameterization::KScaleKOffset => {
                    let (ds, dz) = grad_scale_offset(x, e, mode);
                    (ds / kf, kf * dz)
                }
                Parameterization::MinMax => grad_min_max(x, e, mode),
                Parameterization::BetaGamma { use_sigmoid } => {
                    let (dmin, dmax) = grad_min_max(x, e, mode);
                    let mut da = params.theta_min0[c] * dmin;
                    let mut db = params.theta_max0[c] * dmax;
                    if use_sigmoid {
                        da *= sigmoid_prime(params.enc_a[c]);
                        db *= sigmoid_prime(params.enc_b[c]);
                    }
                    (da, db)
                }
                Parameterization::Symmetric(_) => unreachable!("symmetric params resolve to Sym"),
            };
            (xhat, da, db)
        }
        ChannelEncoding::Sym(e) => {
            let xhat = e.quantize(x);
            let g = sym_base_grad(x, e);
            let kf = e.k as f64;
            let da = match params.kind {
                Parameterization::Symmetric(SymParam::Scale) => g,
                Parameterization::Symmetric(SymParam::ThetaMax) => (2.0 / kf) * g,
                Parameterization::Symmetric(SymParam::Gamma { use_sigmoid }) => {
                    let d = params.theta_max0[c] * ((2.0 / kf) * g);
                    if use_sigmoid {
                        d * sigmoid_prime(params.enc_a[c])
                    } else {
                        d
                    }
                }
                _ => unreachable!("asymmetric params resolve to Asym"),
            };
            (xhat, da, 0.0)
        }
    }
}

fn single_channel(params: &RangeParams) -> Result<()> {
    params.validate()?;
    if params.channels() != 1 {
        return Err(QuantError::InvalidParams(format!(
            "expected per-tensor params, got {} channels",
            params.channels()
        )));
    }
    Ok(())
}

fn channel_index(i: usize, shape: &[usize], granularity: Granularity) -> usize {
    match granularity {
        Granularity::PerTensor => 0,
        Granularity::PerChannel { axis } => channel_of(i, shape, axis),
    }
}

/// Mean-squared reconstruction loss of a per-tensor quantizer and its
/// gradient with respect to the raw learnables.
pub fn accumulate_loss_grads(
    tensor: &[f64],
    params: &RangeParams,
    mode: GradMode,
) -> Result<(f64, GradPair)> {
    accumulate_loss_grads_shaped(tensor, &[tensor.len()], Granularity::PerTensor, params, mode)
}

/// As [`accumulate_loss_grads`] for a shaped tensor; per-channel gradients
/// only collect contributions from their own channel slice. Normalization is
/// always by the total element count.
pub fn accumulate_loss_grads_shaped(
    tensor: &[f64],
    shape: &[usize],
    granularity: Granularity,
    params: &RangeParams,
    mode: GradMode,
) -> Result<(f64, GradPair)> {
    params.validate()?;
    if tensor.is_empty() {
        return Err(QuantError::InvalidParams("empty tensor".into()));
    }
    check_layout(tensor, shape, granularity, params.channels())?;
    let encs: Vec<ChannelEncoding> = (0..params.channels()).map(|c| params.resolve(c).0).collect();
    let mut grads = GradPair::zeros(params.channels());
    let mut sq = 0.0;
    for (i, &x) in tensor.iter().enumerate() {
        let c = channel_index(i, shape, granularity);
        let (xhat, da, db) = element_grad(x, &encs[c], params, c, mode);
        let r = xhat - x;
        sq += r * r;
        grads.d_enc_a[c] += 2.0 * r * da;
        grads.d_enc_b[c] += 2.0 * r * db;
    }
    let inv_n = 1.0 / tensor.len() as f64;
    for g in grads.d_enc_a.iter_mut().chain(grads.d_enc_b.iter_mut()) {
        *g *= inv_n;
    }
    let loss = sq * inv_n;
    check_finite(&grads)?;
    Ok((loss, grads))
}

pub(crate) fn check_finite(grads: &GradPair) -> Result<()> {
    for (c, g) in grads.d_enc_a.iter().enumerate() {
        if !g.is_finite() {
            return Err(QuantError::NonFiniteGradient { which: "enc_a", channel: c });
        }
    }
    for (c, g) in grads.d_enc_b.iter().enumerate() {
        if !g.is_finite() {
            return Err(QuantError::NonFiniteGradient { which: "enc_b", channel: c });
        }
    }
    Ok(())
}

/// Mean-squared reconstruction loss of a per-tensor quantizer, no gradients.
pub fn reconstruction_loss(tensor: &[f64], params: &RangeParams) -> f64 {
    let (enc, _) = params.resolve(0);
    let sq: f64 = tensor
        .iter()
        .map(|&x| {
            let r = enc.quantize(x) - x;
            r * r
        })
        .sum();
    sq / tensor.len() as f64
}

/// Straight-through linearization of one element, frozen at a base encoding:
/// the rounding residuals and the clip branch are held fixed, so the
/// element's dequantized value becomes a smooth function of the step size
/// and offset that equals the true quantizer output at the base point.
#[derive(Debug, Clone, Copy)]
struct FrozenElement {
    x: f64,
    channel: usize,
    region: RegionLabel,
    /// `round(x/s) - x/s` at the base point.
    x_residual: f64,
    /// `round(z) - z` at the base point (asymmetric only).
    z_residual: f64,
}

impl FrozenElement {
    fn freeze(x: f64, channel: usize, enc: &ChannelEncoding) -> Self {
        let u = x / enc.s();
        let z_residual = match enc {
            ChannelEncoding::Asym(e) => e.n as f64 - e.z,
            ChannelEncoding::Sym(_) => 0.0,
        };
        Self {
            x,
            channel,
            region: enc.region(x),
            x_residual: u.round_ties_even() - u,
            z_residual,
        }
    }

    fn eval(&self, enc: &ChannelEncoding) -> f64 {
        match (self.region, enc) {
            (RegionLabel::Inside, e) => self.x + e.s() * self.x_residual,
            (RegionLabel::Below, ChannelEncoding::Asym(e)) => e.s * (e.z + self.z_residual),
            (RegionLabel::Above, ChannelEncoding::Asym(e)) => {
                e.s * (e.k as f64 + e.z + self.z_residual)
            }
            (RegionLabel::Below, ChannelEncoding::Sym(e)) => e.s * e.n as f64,
            (RegionLabel::Above, ChannelEncoding::Sym(e)) => e.s * e.p as f64,
        }
    }
}

fn frozen_loss(elements: &[FrozenElement], params: &RangeParams) -> f64 {
    let encs: Vec<ChannelEncoding> = (0..params.channels()).map(|c| params.resolve(c).0).collect();
    let sq: f64 = elements
        .iter()
        .map(|el| {
            let r = el.eval(&encs[el.channel]) - el.x;
            r * r
        })
        .sum();
    sq / elements.len() as f64
}

/// Central finite differences of the reconstruction loss under the
/// straight-through linearization frozen at `params`, for a per-tensor
/// quantizer.
pub fn finite_diff(params: &RangeParams, tensor: &[f64], h: f64) -> Result<GradPair> {
    finite_diff_shaped(params, tensor, &[tensor.len()], Granularity::PerTensor, h)
}

pub fn finite_diff_shaped(
    params: &RangeParams,
    tensor: &[f64],
    shape: &[usize],
    granularity: Granularity,
    h: f64,
) -> Result<GradPair> {
    params.validate()?;
    if !(h > 0.0) {
        return Err(QuantError::InvalidParams(format!("step h must be positive, got {h}")));
    }
    if tensor.is_empty() {
        return Err(QuantError::InvalidParams("empty tensor".into()));
    }
    check_layout(tensor, shape, granularity, params.channels())?;
    let base: Vec<ChannelEncoding> = (0..params.channels()).map(|c| params.resolve(c).0).collect();
    let elements: Vec<FrozenElement> = tensor
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = channel_index(i, shape, granularity);
            FrozenElement::freeze(x, c, &base[c])
        })
        .collect();

    let mut grads = GradPair::zeros(params.channels());
    let learnables = params.kind.learnable_count();
    for c in 0..params.channels() {
        for which in 0..learnables {
            let probe = |delta: f64| {
                let mut p = params.clone();
                let slot = if which == 0 { &mut p.enc_a[c] } else { &mut p.enc_b[c] };
                *slot += delta;
                frozen_loss(&elements, &p)
            };
            let d = (probe(h) - probe(-h)) / (2.0 * h);
            if which == 0 {
                grads.d_enc_a[c] = d;
            } else {
                grads.d_enc_b[c] = d;
            }
        }
    }
    Ok(grads)
}

/// True when `x` sits within `tol * s` of a rounding tie or of a clip
/// boundary of `enc`; gradient comparisons skip such points.
pub fn near_tie_or_boundary(x: f64, enc: &ChannelEncoding, tol: f64) -> bool {
    let u = x / enc.s();
    let frac = u - u.floor();
    if (frac - 0.5).abs() < tol {
        return true;
    }
    let (lo, hi) = match enc {
        ChannelEncoding::Asym(e) => (e.n as f64 - 0.5, e.p as f64 + 0.5),
        ChannelEncoding::Sym(e) => (e.n as f64 - 0.5, e.p as f64 + 0.5),
    };
    (u - lo).abs() < tol || (u - hi).abs() < tol
}

/// Every parameterization, asymmetric kinds first.
pub const ALL_PARAMETERIZATIONS: [Parameterization; 9] = [
    Parameterization::ScaleOffset,
    Parameterization::MinMax,
    Parameterization::BetaGamma { use_sigmoid: false },
    Parameterization::BetaGamma { use_sigmoid: true },
    Parameterization::KScaleKOffset,
    Parameterization::Symmetric(SymParam::Scale),
    Parameterization::Symmetric(SymParam::ThetaMax),
    Parameterization::Symmetric(SymParam::Gamma { use_sigmoid: false }),
    Parameterization::Symmetric(SymParam::Gamma { use_sigmoid: true }),
];

impl std::str::FromStr for Parameterization {
    type Err = QuantError;

    fn from_str(s: &str) -> Result<Self> {
        ALL_PARAMETERIZATIONS
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| QuantError::InvalidParams(format!("unknown parameterization {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub trials: usize,
    /// Learnable gradients compared.
    pub compared: usize,
    /// Trials with no element outside the tie/boundary zones.
    pub skipped: usize,
    pub failures: usize,
    /// `|analytic - fd| / max(|analytic|, |fd|, abs_floor / rel_tol)`.
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.compared > 0
    }
}

/// Compares analytic loss gradients with [`finite_diff`] on `trials` seeded
/// samples of `kind`. Each sample draws a bit width in `2..=10`, a range and
/// learnables near it, and eight elements spread over 1.3 times the range;
/// elements within `1e-3` steps of a rounding tie or clip boundary are
/// dropped.
pub fn gradient_check(
    kind: Parameterization,
    trials: usize,
    seed: u64,
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<GradCheckReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { trials, compared: 0, skipped: 0, failures: 0, max_rel_err: 0.0 };
    let denom_floor = abs_floor / rel_tol;
    for _ in 0..trials {
        let bits = rng.gen_range(2..=10u32);
        let lo0 = -rng.gen_range(0.1..5.0);
        let hi0 = rng.gen_range(0.1..5.0);
        let mut params = RangeParams::from_calibration(kind, vec![lo0], vec![hi0], bits)?;
        match kind {
            Parameterization::BetaGamma { use_sigmoid: false } => {
                params.enc_a[0] = rng.gen_range(0.5..1.5);
                params.enc_b[0] = rng.gen_range(0.5..1.5);
            }
            Parameterization::BetaGamma { use_sigmoid: true } => {
                params.enc_a[0] = rng.gen_range(-1.0..4.0);
                params.enc_b[0] = rng.gen_range(-1.0..4.0);
            }
            Parameterization::Symmetric(SymParam::Gamma { use_sigmoid }) => {
                params.enc_a[0] = if use_sigmoid { rng.gen_range(-1.0..4.0) } else { rng.gen_range(0.5..1.5) };
            }
            _ => {}
        }
        let (enc, _) = params.resolve(0);
        let (lo, hi) = params.effective_range(0);
        let tensor: Vec<f64> = (0..8)
            .map(|_| rng.gen_range(1.3 * lo..1.3 * hi))
            .filter(|&x| !near_tie_or_boundary(x, &enc, 1e-3))
            .collect();
        if tensor.is_empty() {
            report.skipped += 1;
            continue;
        }
        let (_, analytic) = accumulate_loss_grads(&tensor, &params, GradMode::SurrogateConsistent)?;
        let fd = finite_diff(&params, &tensor, h)?;
        let pairs = [(analytic.d_enc_a[0], fd.d_enc_a[0]), (analytic.d_enc_b[0], fd.d_enc_b[0])];
        for &(a, f) in &pairs[..kind.learnable_count()] {
            let err = (a - f).abs();
            report.compared += 1;
            report.max_rel_err = report.max_rel_err.max(err / a.abs().max(f.abs()).max(denom_floor));
            if err > (rel_tol * a.abs().max(f.abs())).max(abs_floor) {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}

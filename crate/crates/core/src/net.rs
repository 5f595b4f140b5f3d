//! Range learning inside a tiny frozen network.
//!
//! The network is `y = W2q · Qh(gq ⊙ relu(W1q · Qin(x)))` where
//! `W1q`, `W2q` are the weights fake-quantized per output row with a
//! symmetric quantizer, `Qin` and `Qh` are asymmetric per-tensor activation
//! quantizers, and `gq` is a per-unit gain (the stand-in for a normalization
//! layer's affine weight) quantized with the activation scheme. Weights and
//! gain never change; only quantizer ranges are trained, against targets
//! produced by the unquantized network plus Gaussian noise.

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::grad::{element_grad, ChannelEncoding, GradMode, GradPair, Parameterization, RangeParams, SymParam};
use crate::lab::sample_distribution;
use crate::optim::{apply_lr_policy, LrPolicy, OptimizerKind, PolicyKind, RangeOptimizer};
use crate::quant::RegionLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyMlpSpec {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    /// Symmetric, per output row.
    pub weight_bits: u32,
    /// Asymmetric, per tensor.
    pub act_bits: u32,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// Asymmetric kind used by the activation and gain quantizers; weight
    /// quantizers use its symmetric counterpart (see [`weight_parameterization`]).
    pub parameterization: Parameterization,
    /// Applied to the asymmetric quantizers; weight quantizers always use
    /// the uniform rate.
    pub policy: PolicyKind,
    pub grad_mode: GradMode,
    pub seed: u64,
    pub noise_std: f64,
    pub calib_size: usize,
    pub eval_size: usize,
    /// Replace every quantizer by the identity.
    pub bypass: bool,
}

impl TinyMlpSpec {
    pub fn new(parameterization: Parameterization, lr: f64, seed: u64) -> Self {
        Self {
            in_dim: 8,
            hidden_dim: 32,
            out_dim: 4,
            weight_bits: 4,
            act_bits: 12,
            batch_size: 8,
            steps: 2000,
            lr,
            parameterization,
            policy: PolicyKind::Uniform,
            grad_mode: GradMode::SurrogateConsistent,
            seed,
            noise_std: 0.05,
            calib_size: 64,
            eval_size: 256,
            bypass: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden_dim == 0 || self.out_dim == 0 {
            return Err(QuantError::InvalidParams("network dimensions must be at least 1".into()));
        }
        if self.batch_size == 0 || self.calib_size == 0 || self.eval_size == 0 {
            return Err(QuantError::InvalidParams("batch sizes must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.noise_std >= 0.0) {
            return Err(QuantError::InvalidParams("lr must be positive and noise_std non-negative".into()));
        }
        weight_parameterization(self.parameterization)?;
        LrPolicy::new(self.policy, self.lr).check_compatible(self.parameterization)
    }
}

/// Symmetric counterpart of an asymmetric parameterization: step-size
/// kinds learn `s`, min/max learns `θmax`, beta/gamma learns `γ`.
pub fn weight_parameterization(p: Parameterization) -> Result<Parameterization> {
    Ok(Parameterization::Symmetric(match p {
        Parameterization::ScaleOffset | Parameterization::KScaleKOffset => SymParam::Scale,
        Parameterization::MinMax => SymParam::ThetaMax,
        Parameterization::BetaGamma { use_sigmoid } => SymParam::Gamma { use_sigmoid },
        Parameterization::Symmetric(_) => {
            return Err(QuantError::SchemeMismatch(
                "the network needs an asymmetric parameterization for its activations",
            ))
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantizerKind {
    Weight,
    Activation,
    Gain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    pub name: &'static str,
    pub kind: QuantizerKind,
    pub params: RangeParams,
}

impl Quantizer {
    fn encodings(&self) -> Vec<ChannelEncoding> {
        (0..self.params.channels()).map(|c| self.params.resolve(c).0).collect()
    }
}

/// Activation quantizer sites, for [`TinyMlp::forward_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Input,
    Hidden,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyMlp {
    pub spec: TinyMlpSpec,
    /// `hidden_dim × in_dim`, row-major.
    pub w1: Vec<f64>,
    /// `out_dim × hidden_dim`, row-major.
    pub w2: Vec<f64>,
    pub gain: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub q_in: Quantizer,
    pub q_w1: Quantizer,
    pub q_gain: Quantizer,
    pub q_hidden: Quantizer,
    pub q_w2: Quantizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QatRun {
    /// Eval-batch loss before each step.
    pub loss_trace: Vec<f64>,
    /// Eval-batch loss of the unquantized network.
    pub fp_loss: f64,
    /// Eval-batch loss after the last step.
    pub final_loss: f64,
    pub diverged: bool,
}

fn mix(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over (seed, stream)
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_WEIGHTS: u64 = 1;
const STREAM_FEATURES: u64 = 2;
const STREAM_CALIB: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_TRAIN: u64 = 1 << 32;

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn row_abs_max(w: &[f64], cols: usize) -> Vec<f64> {
    w.chunks(cols)
        .map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect()
}

/// Per-tensor asymmetric params from a calibration range, widened slightly
/// when the range is degenerate.
fn act_params(kind: Parameterization, lo: f64, hi: f64, bits: u32) -> Result<RangeParams> {
    let hi = if hi > lo { hi } else { lo + 1e-6_f64.max(lo.abs() * 1e-6) };
    RangeParams::from_calibration(kind, vec![lo], vec![hi], bits)
}

/// Seeded frozen weights, gain and input statistics; quantizer ranges
/// initialized from the min/max of a calibration batch.
pub fn build_tiny_mlp(spec: &TinyMlpSpec) -> Result<TinyMlp> {
    spec.validate()?;
    let (d_in, d_h, d_out) = (spec.in_dim, spec.hidden_dim, spec.out_dim);
    let n_w = d_h * d_in + d_out * d_h;
    let raw = sample_distribution(mix(spec.seed, STREAM_WEIGHTS), 2 * n_w + d_h, 1.0, false);
    let (normals, rest) = raw.split_at(n_w);
    let (picks, gains) = rest.split_at(n_w);
    // Roughly one weight in twenty is an outlier four times larger than the rest.
    let heavy = |i: usize, scale: f64| {
        let w = normals[i] * scale;
        if picks[i] > 1.645 {
            4.0 * w
        } else {
            w
        }
    };
    let w1: Vec<f64> = (0..d_h * d_in).map(|i| heavy(i, 1.0 / (d_in as f64).sqrt())).collect();
    let w2: Vec<f64> = (0..d_out * d_h)
        .map(|i| heavy(d_h * d_in + i, 1.0 / (d_h as f64).sqrt()))
        .collect();
    let gain: Vec<f64> = gains.iter().map(|g| (0.2 * g).exp()).collect();

    let feats = sample_distribution(mix(spec.seed, STREAM_FEATURES), 2 * d_in, 1.0, false);
    let feature_mean: Vec<f64> = feats[..d_in].iter().map(|m| 0.5 * m).collect();
    let feature_std: Vec<f64> = feats[d_in..].iter().map(|s| (0.5 * s).exp()).collect();

    let weight_kind = weight_parameterization(spec.parameterization)?;
    let act_kind = spec.parameterization;
    let placeholder = RangeParams::min_max(-1.0, 1.0, spec.act_bits)?;
    let mut model = TinyMlp {
        spec: spec.clone(),
        q_w1: Quantizer {
            name: "w1",
            kind: QuantizerKind::Weight,
            params: RangeParams::from_calibration(
                weight_kind,
                vec![0.0; d_h],
                row_abs_max(&w1, d_in),
                spec.weight_bits,
            )?,
        },
        q_w2: Quantizer {
            name: "w2",
            kind: QuantizerKind::Weight,
            params: RangeParams::from_calibration(
                weight_kind,
                vec![0.0; d_out],
                row_abs_max(&w2, d_h),
                spec.weight_bits,
            )?,
        },
        q_gain: {
            let (lo, hi) = min_max(&gain);
            Quantizer {
                name: "gain",
                kind: QuantizerKind::Gain,
                params: act_params(act_kind, lo, hi, spec.act_bits)?,
            }
        },
        q_in: Quantizer { name: "input", kind: QuantizerKind::Activation, params: placeholder.clone() },
        q_hidden: Quantizer { name: "hidden", kind: QuantizerKind::Activation, params: placeholder },
        w1,
        w2,
        gain,
        feature_mean,
        feature_std,
    };

    let calib = model.inputs(mix(spec.seed, STREAM_CALIB), spec.calib_size);
    let (h, _) = model.hidden_fp(&calib);
    let (lo, hi) = min_max(&calib);
    model.q_in.params = act_params(act_kind, lo, hi, spec.act_bits)?;
    let (lo, hi) = min_max(&h);
    model.q_hidden.params = act_params(act_kind, lo, hi, spec.act_bits)?;
    Ok(model)
}

struct Cache {
    u: Vec<f64>,
    w1q: Vec<f64>,
    h: Vec<f64>,
    gq: Vec<f64>,
    b: Vec<f64>,
    v: Vec<f64>,
    w2q: Vec<f64>,
    y: Vec<f64>,
}

impl TinyMlp {
    pub fn quantizers(&self) -> [&Quantizer; 5] {
        [&self.q_in, &self.q_w1, &self.q_gain, &self.q_hidden, &self.q_w2]
    }

    fn quantizers_mut(&mut self) -> [&mut Quantizer; 5] {
        [&mut self.q_in, &mut self.q_w1, &mut self.q_gain, &mut self.q_hidden, &mut self.q_w2]
    }

    pub fn count(&self, kind: QuantizerKind) -> usize {
        self.quantizers().iter().filter(|q| q.kind == kind).count()
    }

    /// `n` input rows from stream `seed`.
    pub fn inputs(&self, seed: u64, n: usize) -> Vec<f64> {
        let d = self.spec.in_dim;
        let mut x = sample_distribution(seed, n * d, 1.0, false);
        for (i, v) in x.iter_mut().enumerate() {
            let j = i % d;
            *v = self.feature_mean[j] + self.feature_std[j] * *v;
        }
        x
    }

    /// Hidden activations (after gain) and outputs of the unquantized network.
    fn hidden_fp(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (d_in, d_h, d_out) = (self.spec.in_dim, self.spec.hidden_dim, self.spec.out_dim);
        let n = x.len() / d_in;
        let mut hidden = vec![0.0; n * d_h];
        let mut y = vec![0.0; n * d_out];
        for r in 0..n {
            let xr = &x[r * d_in..(r + 1) * d_in];
            let hr = &mut hidden[r * d_h..(r + 1) * d_h];
            for j in 0..d_h {
                let pre: f64 = self.w1[j * d_in..(j + 1) * d_in].iter().zip(xr).map(|(w, x)| w * x).sum();
                hr[j] = self.gain[j] * pre.max(0.0);
            }
            for o in 0..d_out {
                y[r * d_out + o] = self.w2[o * d_h..(o + 1) * d_h].iter().zip(hr.iter()).map(|(w, h)| w * h).sum();
            }
        }
        (hidden, y)
    }

    /// Teacher targets: unquantized outputs plus noise from stream `seed`.
    pub fn targets(&self, x: &[f64], seed: u64) -> Vec<f64> {
        let (_, mut y) = self.hidden_fp(x);
        if self.spec.noise_std > 0.0 {
            let noise = sample_distribution(seed, y.len(), self.spec.noise_std, false);
            for (t, e) in y.iter_mut().zip(noise) {
                *t += e;
            }
        }
        y
    }

    fn quantize_tensor(&self, q: &Quantizer, w: &[f64], cols: usize) -> Vec<f64> {
        if self.spec.bypass {
            return w.to_vec();
        }
        let encs = q.encodings();
        w.iter()
            .enumerate()
            .map(|(i, &v)| encs[if encs.len() == 1 { 0 } else { i / cols }].quantize(v))
            .collect()
    }

    /// Dequantized first-layer weights.
    pub fn w1_quantized(&self) -> Vec<f64> {
        self.quantize_tensor(&self.q_w1, &self.w1, self.spec.in_dim)
    }

    pub fn w2_quantized(&self) -> Vec<f64> {
        self.quantize_tensor(&self.q_w2, &self.w2, self.spec.hidden_dim)
    }

    /// Forward pass with caller-supplied activation quantizers; `act` receives
    /// the site, the flat element index within the batch, and the value.
    pub fn forward_with<F>(&self, x: &[f64], mut act: F) -> Vec<f64>
    where
        F: FnMut(Site, usize, f64) -> f64,
    {
        self.forward_cached(x, &mut act).y
    }

    fn forward_cached(&self, x: &[f64], act: &mut dyn FnMut(Site, usize, f64) -> f64) -> Cache {
        let (d_in, d_h, d_out) = (self.spec.in_dim, self.spec.hidden_dim, self.spec.out_dim);
        let n = x.len() / d_in;
        let w1q = self.w1_quantized();
        let w2q = self.w2_quantized();
        let gq = self.quantize_tensor(&self.q_gain, &self.gain, d_h);
        let u: Vec<f64> = x.iter().enumerate().map(|(i, &v)| act(Site::Input, i, v)).collect();
        let mut h = vec![0.0; n * d_h];
        let mut b = vec![0.0; n * d_h];
        for r in 0..n {
            let ur = &u[r * d_in..(r + 1) * d_in];
            for j in 0..d_h {
                let pre: f64 = w1q[j * d_in..(j + 1) * d_in].iter().zip(ur).map(|(w, x)| w * x).sum();
                h[r * d_h + j] = pre;
                b[r * d_h + j] = gq[j] * pre.max(0.0);
            }
        }
        let v: Vec<f64> = b.iter().enumerate().map(|(i, &x)| act(Site::Hidden, i, x)).collect();
        let mut y = vec![0.0; n * d_out];
        for r in 0..n {
            let vr = &v[r * d_h..(r + 1) * d_h];
            for o in 0..d_out {
                y[r * d_out + o] = w2q[o * d_h..(o + 1) * d_h].iter().zip(vr).map(|(w, h)| w * h).sum();
            }
        }
        Cache { u, w1q, h, gq, b, v, w2q, y }
    }

    fn forward(&self, x: &[f64]) -> Cache {
        if self.spec.bypass {
            return self.forward_cached(x, &mut |_, _, v| v);
        }
        let e_in = self.q_in.params.resolve(0).0;
        let e_h = self.q_hidden.params.resolve(0).0;
        self.forward_cached(x, &mut |site, _, v| match site {
            Site::Input => e_in.quantize(v),
            Site::Hidden => e_h.quantize(v),
        })
    }

    pub fn loss(&self, x: &[f64], t: &[f64]) -> f64 {
        mse(&self.forward(x).y, t)
    }

    /// Task loss, range gradients of every quantizer (same order as
    /// [`TinyMlp::quantizers`]) and the straight-through input gradient.
    pub fn loss_and_grads(&self, x: &[f64], t: &[f64]) -> (f64, Vec<GradPair>, Vec<f64>) {
        let (d_in, d_h, d_out) = (self.spec.in_dim, self.spec.hidden_dim, self.spec.out_dim);
        let n = x.len() / d_in;
        let mode = self.spec.grad_mode;
        let c = self.forward(x);
        let loss = mse(&c.y, t);
        let scale = 2.0 / c.y.len() as f64;
        let dy: Vec<f64> = c.y.iter().zip(t).map(|(y, t)| scale * (y - t)).collect();

        let mut dv = vec![0.0; n * d_h];
        let mut dw2q = vec![0.0; d_out * d_h];
        for r in 0..n {
            for o in 0..d_out {
                let g = dy[r * d_out + o];
                for j in 0..d_h {
                    dv[r * d_h + j] += g * c.w2q[o * d_h + j];
                    dw2q[o * d_h + j] += g * c.v[r * d_h + j];
                }
            }
        }

        let mut grads: Vec<GradPair> = self.quantizers().iter().map(|q| GradPair::zeros(q.params.channels())).collect();
        let bypass = self.spec.bypass;
        // Range gradients of a quantizer applied to `xs` with upstream `up`;
        // returns the straight-through gradient passed to `xs`.
        let mut through = |qi: usize, q: &Quantizer, xs: &[f64], up: &[f64], cols: usize| -> Vec<f64> {
            if bypass {
                return up.to_vec();
            }
            let encs = q.encodings();
            let mut down = vec![0.0; xs.len()];
            for (i, (&v, &g)) in xs.iter().zip(up).enumerate() {
                let ch = if encs.len() == 1 { 0 } else { i / cols };
                let (_, da, db) = element_grad(v, &encs[ch], &q.params, ch, mode);
                grads[qi].d_enc_a[ch] += g * da;
                grads[qi].d_enc_b[ch] += g * db;
                if encs[ch].region(v) == RegionLabel::Inside {
                    down[i] = g;
                }
            }
            down
        };

        through(4, &self.q_w2, &self.w2, &dw2q, d_h);
        let db = through(3, &self.q_hidden, &c.b, &dv, usize::MAX);
        let mut dgq = vec![0.0; d_h];
        let mut dh = vec![0.0; n * d_h];
        for r in 0..n {
            for j in 0..d_h {
                let i = r * d_h + j;
                if c.h[i] > 0.0 {
                    dgq[j] += db[i] * c.h[i];
                    dh[i] = db[i] * c.gq[j];
                }
            }
        }
        through(2, &self.q_gain, &self.gain, &dgq, usize::MAX);
        let mut du = vec![0.0; n * d_in];
        let mut dw1q = vec![0.0; d_h * d_in];
        for r in 0..n {
            for j in 0..d_h {
                let g = dh[r * d_h + j];
                if g == 0.0 {
                    continue;
                }
                for m in 0..d_in {
                    du[r * d_in + m] += g * c.w1q[j * d_in + m];
                    dw1q[j * d_in + m] += g * c.u[r * d_in + m];
                }
            }
        }
        through(1, &self.q_w1, &self.w1, &dw1q, d_in);
        let dx = through(0, &self.q_in, x, &du, usize::MAX);
        (loss, grads, dx)
    }
}

fn mse(y: &[f64], t: &[f64]) -> f64 {
    y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
}

/// Learns every quantizer range with Adam on fresh seeded batches; weights
/// and gain stay frozen. Divergence is flagged as in the range-learning lab.
pub fn train_ranges(model: &mut TinyMlp) -> Result<QatRun> {
    let spec = model.spec.clone();
    spec.validate()?;
    let eval_x = model.inputs(mix(spec.seed, STREAM_EVAL), spec.eval_size);
    let eval_t = model.targets(&eval_x, mix(spec.seed, STREAM_EVAL + 100));
    let fp_loss = {
        let (_, y) = model.hidden_fp(&eval_x);
        mse(&y, &eval_t)
    };
    let mut opts: Vec<RangeOptimizer> = model
        .quantizers()
        .iter()
        .map(|q| RangeOptimizer::new(OptimizerKind::Adam, q.params.channels()))
        .collect();
    let policies: Vec<LrPolicy> = model
        .quantizers()
        .iter()
        .map(|q| match q.kind {
            QuantizerKind::Weight => LrPolicy::new(PolicyKind::Uniform, spec.lr),
            _ => LrPolicy::new(spec.policy, spec.lr),
        })
        .collect();

    let mut loss_trace = Vec::with_capacity(spec.steps);
    let mut diverged = false;
    for step in 0..spec.steps {
        let loss = model.loss(&eval_x, &eval_t);
        loss_trace.push(loss);
        if !loss.is_finite() || loss > 1e6 * loss_trace[0].max(f64::MIN_POSITIVE) {
            diverged = true;
            break;
        }
        if spec.bypass {
            continue;
        }
        let stream = mix(spec.seed, STREAM_TRAIN + step as u64);
        let x = model.inputs(stream, spec.batch_size);
        let t = model.targets(&x, stream ^ 0x5555_5555);
        let (_, grads, _) = model.loss_and_grads(&x, &t);
        if grads.iter().any(|g| !g.is_finite()) {
            diverged = true;
            break;
        }
        for (i, q) in model.quantizers_mut().into_iter().enumerate() {
            let update = apply_lr_policy(&policies[i], &q.params, &grads[i], OptimizerKind::Adam, None)?;
            opts[i].step(&mut q.params, &update);
        }
    }
    let final_loss = if diverged {
        *loss_trace.last().unwrap_or(&f64::NAN)
    } else {
        model.loss(&eval_x, &eval_t)
    };
    let diverged = diverged || !final_loss.is_finite();
    Ok(QatRun {
        loss_trace,
        fp_loss,
        final_loss: if final_loss.is_finite() { final_loss } else { f64::INFINITY },
        diverged,
    })
}

/// Builds the model for `spec` and trains its ranges.
pub fn run_net(spec: &TinyMlpSpec) -> Result<QatRun> {
    let mut model = build_tiny_mlp(spec)?;
    train_ranges(&mut model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(p: Parameterization) -> TinyMlpSpec {
        TinyMlpSpec {
            in_dim: 2,
            hidden_dim: 3,
            out_dim: 1,
            steps: 50,
            ..TinyMlpSpec::new(p, 1e-2, 11)
        }
    }

    #[test]
    fn structure_and_calibration() {
        let spec = TinyMlpSpec::new(Parameterization::MinMax, 1e-3, 3);
        let m = build_tiny_mlp(&spec).unwrap();
        assert_eq!(m.count(QuantizerKind::Weight), 2);
        assert_eq!(m.count(QuantizerKind::Activation), 2);
        assert_eq!(m.q_w1.params.channels(), 32);
        assert_eq!(m.q_w2.params.channels(), 4);
        assert_eq!(m.q_in.params.channels(), 1);
        assert_eq!(m.q_hidden.params.channels(), 1);
        assert_eq!(m.q_hidden.params.theta_min0[0], 0.0);

        let calib = m.inputs(mix(spec.seed, STREAM_CALIB), spec.calib_size);
        let (lo, hi) = min_max(&calib);
        assert_eq!((m.q_in.params.enc_a[0], m.q_in.params.enc_b[0]), (lo, hi));
        let (h, _) = m.hidden_fp(&calib);
        assert_eq!(m.q_hidden.params.theta_max0[0], min_max(&h).1);
        for (row, t) in m.w1.chunks(spec.in_dim).zip(&m.q_w1.params.theta_max0) {
            assert_eq!(*t, row.iter().fold(0.0f64, |a, v| a.max(v.abs())));
        }
    }

    #[test]
    fn symmetric_parameterization_is_rejected() {
        let spec = TinyMlpSpec::new(Parameterization::Symmetric(SymParam::Scale), 1e-3, 1);
        assert!(matches!(build_tiny_mlp(&spec), Err(QuantError::SchemeMismatch(_))));
    }

    #[test]
    fn weights_stay_frozen() {
        let spec = TinyMlpSpec { steps: 200, ..TinyMlpSpec::new(Parameterization::BetaGamma { use_sigmoid: false }, 1e-2, 5) };
        let mut m = build_tiny_mlp(&spec).unwrap();
        let before = (m.w1.clone(), m.w2.clone(), m.gain.clone());
        let ranges_before = m.q_in.params.clone();
        train_ranges(&mut m).unwrap();
        assert_eq!(before, (m.w1.clone(), m.w2.clone(), m.gain.clone()));
        assert_ne!(ranges_before, m.q_in.params);
    }

    #[test]
    fn bypass_gives_constant_trace() {
        let spec = TinyMlpSpec { bypass: true, ..small(Parameterization::MinMax) };
        let run = run_net(&spec).unwrap();
        assert_eq!(run.loss_trace.len(), spec.steps);
        assert!(run.loss_trace.iter().all(|&l| l == run.loss_trace[0]));
        assert_eq!(run.final_loss, run.loss_trace[0]);
        assert!((run.final_loss - run.fp_loss).abs() < 1e-15);
    }

    #[test]
    fn per_channel_weight_isolation() {
        let mut m = build_tiny_mlp(&TinyMlpSpec::new(Parameterization::MinMax, 1e-3, 9)).unwrap();
        let d_in = m.spec.in_dim;
        let before = m.w1_quantized();
        m.q_w1.params.enc_a[5] *= 0.7;
        let after = m.w1_quantized();
        for (i, (a, b)) in before.iter().zip(&after).enumerate() {
            if i / d_in != 5 {
                assert_eq!(a, b, "element {i} changed");
            }
        }
        assert_ne!(&before[5 * d_in..6 * d_in], &after[5 * d_in..6 * d_in]);
    }

    /// Straight-through input gradient against central differences of the
    /// network with each activation quantizer frozen at the base point:
    /// in-range elements keep their rounding residual, clipped elements
    /// keep their clipped value.
    #[test]
    fn ste_input_gradient_matches_frozen_finite_differences() {
        let mut m = build_tiny_mlp(&small(Parameterization::MinMax)).unwrap();
        // Narrow the activation ranges so both clip branches occur.
        m.q_in.params.enc_a[0] *= 0.5;
        m.q_in.params.enc_b[0] *= 0.5;
        m.q_hidden.params.enc_b[0] *= 0.6;
        let x = m.inputs(77, 6);
        let t = m.targets(&x, 78);
        let (_, _, dx) = m.loss_and_grads(&x, &t);

        let e_in = m.q_in.params.resolve(0).0;
        let e_h = m.q_hidden.params.resolve(0).0;
        let mut base_hidden = Vec::new();
        m.forward_with(&x, |site, _, v| match site {
            Site::Input => e_in.quantize(v),
            Site::Hidden => {
                base_hidden.push(v);
                e_h.quantize(v)
            }
        });
        let frozen = |v: f64, base: f64, e: &ChannelEncoding| match e.region(base) {
            RegionLabel::Inside => v + (e.quantize(base) - base),
            _ => e.quantize(base),
        };
        let frozen_loss = |xp: &[f64]| {
            let y = m.forward_with(xp, |site, i, v| match site {
                Site::Input => frozen(v, x[i], &e_in),
                Site::Hidden => frozen(v, base_hidden[i], &e_h),
            });
            mse(&y, &t)
        };

        let mut regions = [0usize; 3];
        let h = 1e-6;
        for i in 0..x.len() {
            match e_in.region(x[i]) {
                RegionLabel::Below => regions[0] += 1,
                RegionLabel::Inside => regions[1] += 1,
                RegionLabel::Above => regions[2] += 1,
            }
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (frozen_loss(&xp) - frozen_loss(&xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() <= 1e-6 + 1e-5 * fd.abs(), "element {i}: fd {fd} vs {}", dx[i]);
            if e_in.region(x[i]) != RegionLabel::Inside {
                assert_eq!(dx[i], 0.0);
            }
        }
        assert!(regions[1] > 0 && regions[0] + regions[2] > 0, "{regions:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let spec = small(Parameterization::ScaleOffset);
        assert_eq!(run_net(&spec).unwrap(), run_net(&spec).unwrap());
    }
}

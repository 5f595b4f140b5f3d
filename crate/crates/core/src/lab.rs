//! Range-learning experiments on synthetic tensors.
//!
//! A run quantizes a fixed tensor and learns only the two range learnables
//! of a single per-tensor quantizer by full-batch gradient descent on the
//! mean-squared reconstruction error.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::grad::{
    accumulate_loss_grads, reconstruction_loss, ChannelEncoding, GradMode, GradPair,
    Parameterization, RangeParams, SymParam,
};
use crate::optim::{apply_lr_policy, LrPolicy, OptimizerKind, PolicyKind, RangeOptimizer};
use crate::quant::{encoding_for_k, fake_quant_asym, levels, Encoding};

/// Draws `n` samples from `Normal(0, std^2)`, optionally passed through ReLU.
///
/// Uniforms come from ChaCha8 (a counter-based stream cipher) seeded with
/// `seed`; each 64-bit word is mapped to `(0, 1]` from its top 53 bits, and
/// consecutive pairs feed the Box–Muller transform (both outputs are used).
pub fn sample_distribution(seed: u64, n: usize, std: f64, relu: bool) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = move || ((rng.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let u1 = uniform();
        let u2 = uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(std * r * theta.cos());
        out.push(std * r * theta.sin());
    }
    out.truncate(n);
    if relu {
        for v in &mut out {
            *v = v.max(0.0);
        }
    }
    out
}

pub fn mse_loss(x: &[f64], xhat: &[f64]) -> Result<f64> {
    if x.len() != xhat.len() {
        return Err(QuantError::LengthMismatch {
            left: x.len(),
            right: xhat.len(),
        });
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    let sq: f64 = x.iter().zip(xhat).map(|(a, b)| (b - a) * (b - a)).sum();
    Ok(sq / x.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    Fig3SzVsMm,
    Fig5MmVsBg,
    Fig6SymEquiv,
    Fig7Relu,
    Fig8EasyInit,
    AppendixLrPolicies,
    Custom,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Fig3SzVsMm => "fig3",
            Preset::Fig5MmVsBg => "fig5",
            Preset::Fig6SymEquiv => "fig6",
            Preset::Fig7Relu => "fig7",
            Preset::Fig8EasyInit => "fig8",
            Preset::AppendixLrPolicies => "lr-policies",
            Preset::Custom => "custom",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            Preset::Fig3SzVsMm,
            Preset::Fig5MmVsBg,
            Preset::Fig6SymEquiv,
            Preset::Fig7Relu,
            Preset::Fig8EasyInit,
            Preset::AppendixLrPolicies,
            Preset::Custom,
        ]
        .into_iter()
        .find(|p| p.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitPolicy {
    /// `(min(x), 3 max(x))`; symmetric quantizers use `3 max|x|`.
    MinMax3xMax,
    /// `(min(x), max(x))`; symmetric quantizers use `max|x|`.
    MinMaxExact,
}

/// One experiment cell: a tensor recipe, one parameterization and its
/// optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub preset: Preset,
    pub seed: u64,
    pub n_samples: usize,
    pub dist_std: f64,
    pub relu: bool,
    pub bits: u32,
    pub lr: f64,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub parameterization: Parameterization,
    pub policy: PolicyKind,
    pub init_policy: InitPolicy,
    pub grad_mode: GradMode,
    /// Whether to run the grid-search oracle for this cell.
    pub oracle: bool,
}

impl ExperimentSpec {
    /// Defaults of the toy setup: 10,000 standard-normal samples, 5000 Adam
    /// steps, range initialized to `(min, 3 max)`.
    pub fn toy(seed: u64, bits: u32, lr: f64, parameterization: Parameterization) -> Self {
        Self {
            preset: Preset::Custom,
            seed,
            n_samples: 10_000,
            dist_std: 1.0,
            relu: false,
            bits,
            lr,
            steps: 5000,
            optimizer: OptimizerKind::Adam,
            parameterization,
            policy: PolicyKind::Uniform,
            init_policy: InitPolicy::MinMax3xMax,
            grad_mode: GradMode::SurrogateConsistent,
            oracle: true,
        }
    }

    /// Legend label, e.g. `min-max lr=0.001 b=3`.
    pub fn label(&self) -> String {
        let policy = match self.policy {
            PolicyKind::Uniform => String::new(),
            p => format!("+{}", p.name()),
        };
        format!(
            "{}{} lr={} b={}",
            self.parameterization.name(),
            policy,
            self.lr,
            self.bits
        )
    }

    /// File-name friendly identifier.
    pub fn slug(&self) -> String {
        format!(
            "{}_{}{}_b{}_lr{}_{}_seed{}",
            self.preset.name(),
            self.parameterization.name(),
            match self.policy {
                PolicyKind::Uniform => String::new(),
                p => format!("-{}", p.name()),
            },
            self.bits,
            self.lr,
            match self.optimizer {
                OptimizerKind::Sgd => "sgd",
                OptimizerKind::Adam => "adam",
            },
            self.seed
        )
    }

    pub fn tensor(&self) -> Vec<f64> {
        sample_distribution(self.seed, self.n_samples, self.dist_std, self.relu)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.steps == 0 {
            return Err(QuantError::InvalidParams(
                "n_samples and steps must be positive".into(),
            ));
        }
        if !(self.dist_std > 0.0) || !(self.lr > 0.0) {
            return Err(QuantError::InvalidParams("dist_std and lr must be positive".into()));
        }
        LrPolicy::new(self.policy, self.lr).check_compatible(self.parameterization)
    }

    /// Initial learnables for `tensor` under this cell's init policy.
    pub fn initial_params(&self, tensor: &[f64]) -> Result<RangeParams> {
        let min = tensor.iter().copied().fold(f64::INFINITY, f64::min);
        let max = tensor.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mult = match self.init_policy {
            InitPolicy::MinMax3xMax => 3.0,
            InitPolicy::MinMaxExact => 1.0,
        };
        let (lo, hi) = match self.parameterization {
            Parameterization::Symmetric(_) => {
                let amax = tensor.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                (-mult * amax, mult * amax)
            }
            _ => (min, mult * max),
        };
        RangeParams::from_calibration(self.parameterization, vec![lo], vec![hi], self.bits)
    }
}

/// Per-step snapshot, taken before the step's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub s: f64,
    pub z: f64,
    pub enc_a: f64,
    pub enc_b: f64,
    pub clamp_event: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleRange {
    pub theta_min: f64,
    pub theta_max: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub spec: ExperimentSpec,
    pub trace: Vec<TraceRecord>,
    pub final_mse: f64,
    pub oracle: Option<OracleRange>,
    pub diverged: bool,
}

impl RunResult {
    pub fn final_record(&self) -> &TraceRecord {
        self.trace.last().expect("runs record at least one step")
    }

    /// Euclidean distance of the final range to the oracle range.
    pub fn range_distance_to_oracle(&self) -> Option<f64> {
        let o = self.oracle?;
        let r = self.final_record();
        let d = ((r.theta_min - o.theta_min).powi(2) + (r.theta_max - o.theta_max).powi(2)).sqrt();
        Some(if self.diverged || !d.is_finite() { f64::INFINITY } else { d })
    }
}

fn snapshot(step: usize, loss: f64, params: &RangeParams) -> TraceRecord {
    let (enc, clamp_event) = params.resolve(0);
    let (theta_min, theta_max, s, z) = match enc {
        ChannelEncoding::Asym(e) => (e.theta_min, e.theta_max, e.s, e.z),
        ChannelEncoding::Sym(e) => (-e.theta_max, e.theta_max, e.s, 0.0),
    };
    TraceRecord {
        step,
        loss,
        theta_min,
        theta_max,
        s,
        z,
        enc_a: params.enc_a[0],
        enc_b: params.enc_b[0],
        clamp_event,
    }
}

/// Min/max gradients at the range implied by the current learnables.
fn minmax_equivalent_grads(tensor: &[f64], params: &RangeParams, mode: GradMode) -> Result<GradPair> {
    let (lo, hi) = params.effective_range(0);
    let mm = RangeParams {
        kind: Parameterization::MinMax,
        enc_a: vec![lo],
        enc_b: vec![hi],
        theta_min0: params.theta_min0.clone(),
        theta_max0: params.theta_max0.clone(),
        bits: params.bits,
    };
    Ok(accumulate_loss_grads(tensor, &mm, mode)?.1)
}

/// Learns the range of a per-tensor quantizer for `spec.steps` full-batch
/// steps. A run that produces a non-finite value, or a loss above 1e6 times
/// its initial value, stops early with `diverged` set and keeps its trace.
pub fn run_range_learning(
    spec: &ExperimentSpec,
    tensor: &[f64],
    params0: RangeParams,
) -> Result<RunResult> {
    spec.validate()?;
    params0.validate()?;
    if params0.kind != spec.parameterization || params0.channels() != 1 {
        return Err(QuantError::InvalidParams(
            "initial params must be per-tensor and match the spec's parameterization".into(),
        ));
    }
    let policy = LrPolicy::new(spec.policy, spec.lr);
    let mut params = params0;
    let mut opt = RangeOptimizer::new(spec.optimizer, 1);
    let mut trace = Vec::with_capacity(spec.steps);
    let mut diverged = false;
    let mut initial_loss = None;

    for step in 0..spec.steps {
        let (loss, grads) = match accumulate_loss_grads(tensor, &params, spec.grad_mode) {
            Ok(v) => v,
            Err(QuantError::NonFiniteGradient { .. }) => {
                trace.push(snapshot(step, reconstruction_loss(tensor, &params), &params));
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let record = snapshot(step, loss, &params);
        trace.push(record);
        let init = *initial_loss.get_or_insert(loss);
        let finite = [loss, record.theta_min, record.theta_max, record.s, record.z]
            .iter()
            .all(|v| v.is_finite());
        if !finite || loss > 1e6 * init.max(f64::MIN_POSITIVE) {
            diverged = true;
            break;
        }
        let mm = match spec.policy {
            PolicyKind::Sophisticated => Some(minmax_equivalent_grads(tensor, &params, spec.grad_mode)?),
            _ => None,
        };
        let update = apply_lr_policy(&policy, &params, &grads, spec.optimizer, mm.as_ref())?;
        opt.step(&mut params, &update);
    }

    let final_mse = trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
    Ok(RunResult {
        spec: spec.clone(),
        trace,
        final_mse,
        oracle: None,
        diverged,
    })
}

/// Sorted copy of a tensor with prefix sums, for fast exact loss evaluation
/// when the level count is small relative to the tensor size.
struct SortedTensor {
    xs: Vec<f64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl SortedTensor {
    fn new(tensor: &[f64]) -> Self {
        let mut xs = tensor.to_vec();
        xs.sort_by(f64::total_cmp);
        let mut sum = Vec::with_capacity(xs.len() + 1);
        let mut sum_sq = Vec::with_capacity(xs.len() + 1);
        let (mut a, mut b) = (0.0, 0.0);
        sum.push(0.0);
        sum_sq.push(0.0);
        for &x in &xs {
            a += x;
            b += x * x;
            sum.push(a);
            sum_sq.push(b);
        }
        Self { xs, sum, sum_sq }
    }

    /// Sum of squared errors, grouping elements by their (monotone) clipped
    /// level index.
    fn sse_by_levels(&self, enc: &Encoding) -> f64 {
        let level = |x: f64| enc.level_index(x).clamp(0.0, enc.k as f64);
        let mut total = 0.0;
        let mut start = 0;
        while start < self.xs.len() {
            let j = level(self.xs[start]);
            let end = start + self.xs[start..].partition_point(|&x| level(x) <= j);
            let v = enc.s * (j + enc.n as f64);
            let cnt = (end - start) as f64;
            let sx = self.sum[end] - self.sum[start];
            let sxx = self.sum_sq[end] - self.sum_sq[start];
            total += sxx - 2.0 * v * sx + cnt * v * v;
            start = end;
        }
        total.max(0.0)
    }

    fn sse_direct(&self, enc: &Encoding) -> f64 {
        self.xs
            .iter()
            .map(|&x| {
                let r = fake_quant_asym(x, enc) - x;
                r * r
            })
            .sum()
    }

    fn mse(&self, enc: &Encoding) -> f64 {
        let n = self.xs.len();
        let levels = (enc.k + 1) as f64;
        let sse = if levels * (n as f64).log2() < n as f64 {
            self.sse_by_levels(enc)
        } else {
            self.sse_direct(enc)
        };
        sse / n as f64
    }
}

fn grid(lo: f64, hi: f64, points: usize) -> impl Iterator<Item = f64> + Clone {
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(move |i| if i + 1 == points { hi } else { lo + step * i as f64 })
}

const ORACLE_GRID: usize = 200;

/// Brute-force MSE-optimal range for an asymmetric quantizer.
///
/// Searches a 200×200 grid over `θmin ∈ [2 min(x) - ε, 0]`,
/// `θmax ∈ [0, 2 max(x) + ε]`, then a 200×200 grid spanning 1/100 of each
/// axis around the best coarse cell. The naive `(min(x), max(x))` range is
/// also evaluated so the result never loses to it. The reported MSE is
/// recomputed element by element.
pub fn oracle_best_range(tensor: &[f64], bits: u32) -> Result<OracleRange> {
    if tensor.is_empty() {
        return Err(QuantError::InvalidParams("empty tensor".into()));
    }
    if !(1..=16).contains(&bits) {
        return Err(QuantError::InvalidBits { bits });
    }
    let k = levels(bits);
    let sorted = SortedTensor::new(tensor);
    let min = sorted.xs[0];
    let max = *sorted.xs.last().unwrap();
    let eps = 1e-3 * (max - min).abs().max(1e-9);
    let lo_span = (min.min(0.0) * 2.0 - eps, 0.0);
    let hi_span = (0.0, max.max(0.0) * 2.0 + eps);

    let eval = |lo: f64, hi: f64| -> Option<(f64, f64, f64)> {
        let enc = encoding_for_k(lo, hi, k).ok()?;
        Some((lo, hi, sorted.mse(&enc)))
    };
    let best_of = |a: Option<(f64, f64, f64)>, b: Option<(f64, f64, f64)>| match (a, b) {
        (Some(x), Some(y)) => Some(if y.2 < x.2 { y } else { x }),
        (x, None) => x,
        (None, y) => y,
    };
    let search = |lo_range: (f64, f64), hi_range: (f64, f64)| {
        let his: Vec<f64> = grid(hi_range.0, hi_range.1, ORACLE_GRID).collect();
        grid(lo_range.0, lo_range.1, ORACLE_GRID)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|lo| his.iter().map(|&hi| eval(lo, hi)).fold(None, best_of))
            .reduce(|| None, best_of)
    };

    let coarse = search(lo_span, hi_span)
        .ok_or_else(|| QuantError::InvalidParams("no valid range on the oracle grid".into()))?;
    let half_lo = (lo_span.1 - lo_span.0) / 200.0;
    let half_hi = (hi_span.1 - hi_span.0) / 200.0;
    let fine = search(
        (coarse.0 - half_lo, coarse.0 + half_lo),
        (coarse.1 - half_hi, coarse.1 + half_hi),
    );
    let best = best_of(best_of(Some(coarse), fine), eval(min, max)).expect("coarse exists");
    let enc = encoding_for_k(best.0, best.1, k)?;
    Ok(OracleRange {
        theta_min: best.0,
        theta_max: best.1,
        mse: sorted.sse_direct(&enc) / tensor.len() as f64,
    })
}

/// Runs one cell from scratch, including its oracle when requested.
pub fn run_cell(spec: &ExperimentSpec) -> Result<RunResult> {
    let tensor = spec.tensor();
    let params0 = spec.initial_params(&tensor)?;
    let mut result = run_range_learning(spec, &tensor, params0)?;
    if spec.oracle && spec.parameterization.scheme() == crate::quant::Scheme::Asymmetric {
        result.oracle = Some(oracle_best_range(&tensor, spec.bits)?);
    }
    Ok(result)
}

fn cells(base: &ExperimentSpec, bits: &[u32], lrs: &[f64], methods: &[(Parameterization, PolicyKind)]) -> Vec<ExperimentSpec> {
    let mut out = Vec::new();
    for &b in bits {
        for &lr in lrs {
            for &(p, pol) in methods {
                let mut s = base.clone();
                s.bits = b;
                s.lr = lr;
                s.parameterization = p;
                s.policy = pol;
                out.push(s);
            }
        }
    }
    out
}

/// Configuration matrix of a named preset.
pub fn expand_preset(preset: Preset, seed: u64) -> Result<Vec<ExperimentSpec>> {
    use Parameterization as P;
    use PolicyKind as K;
    let mut base = ExperimentSpec::toy(seed, 3, 1e-2, P::MinMax);
    base.preset = preset;
    let so_mm = [(P::ScaleOffset, K::Uniform), (P::MinMax, K::Uniform)];
    let specs = match preset {
        Preset::Fig3SzVsMm => cells(&base, &[3, 10], &[1e-2, 1e-3], &so_mm),
        Preset::Fig5MmVsBg => {
            base.dist_std = 50.0;
            cells(
                &base,
                &[3, 10],
                &[1e-3],
                &[
                    (P::MinMax, K::Uniform),
                    (P::MinMax, K::MinMaxPlus),
                    (P::BetaGamma { use_sigmoid: false }, K::Uniform),
                    (P::BetaGamma { use_sigmoid: true }, K::Uniform),
                ],
            )
        }
        Preset::Fig6SymEquiv => {
            base.oracle = false;
            let params = [
                P::Symmetric(SymParam::Scale),
                P::Symmetric(SymParam::ThetaMax),
                P::Symmetric(SymParam::Gamma { use_sigmoid: false }),
            ];
            let methods: Vec<_> = [K::Uniform, K::SymmetricMatched]
                .into_iter()
                .flat_map(|pol| params.iter().map(move |&p| (p, pol)))
                .collect();
            cells(&base, &[3], &[5e-3], &methods)
        }
        Preset::Fig7Relu => {
            base.dist_std = 50.0;
            base.relu = true;
            cells(&base, &[3, 8], &[1e-3], &so_mm)
        }
        Preset::Fig8EasyInit => {
            base.init_policy = InitPolicy::MinMaxExact;
            cells(&base, &[4, 8], &[1e-2, 1e-3], &so_mm)
        }
        Preset::AppendixLrPolicies => cells(
            &base,
            &[3, 10],
            &[1e-2, 1e-3],
            &[
                (P::ScaleOffset, K::Uniform),
                (P::ScaleOffset, K::Naive),
                (P::ScaleOffset, K::Sophisticated),
                (P::KScaleKOffset, K::Uniform),
            ],
        ),
        Preset::Custom => {
            return Err(QuantError::InvalidParams(
                "the custom preset has no fixed configuration".into(),
            ))
        }
    };
    Ok(specs)
}

/// Runs every cell of a preset. Cells share one tensor per seed and one
/// oracle per bit width.
pub fn run_preset(preset: Preset, seed: u64) -> Result<Vec<RunResult>> {
    run_specs(&expand_preset(preset, seed)?)
}

/// Runs independent cells in parallel, sharing tensors and oracles between
/// cells with identical tensor recipes.
pub fn run_specs(specs: &[ExperimentSpec]) -> Result<Vec<RunResult>> {
    let mut results: Vec<RunResult> = specs
        .par_iter()
        .map(|spec| {
            let tensor = spec.tensor();
            let params0 = spec.initial_params(&tensor)?;
            run_range_learning(spec, &tensor, params0)
        })
        .collect::<Result<_>>()?;

    let mut oracles: Vec<((u64, usize, u64, bool, u32), OracleRange)> = Vec::new();
    for r in &mut results {
        let s = &r.spec;
        if !s.oracle || s.parameterization.scheme() != crate::quant::Scheme::Asymmetric {
            continue;
        }
        let key = (s.seed, s.n_samples, s.dist_std.to_bits(), s.relu, s.bits);
        let oracle = match oracles.iter().find(|(k, _)| *k == key) {
            Some((_, o)) => *o,
            None => {
                let o = oracle_best_range(&s.tensor(), s.bits)?;
                oracles.push((key, o));
                o
            }
        };
        r.oracle = Some(oracle);
    }
    Ok(results)
}

/// First step at which `theta_max` is within `rel` of `target` and stays
/// there for the rest of the trace.
pub fn steps_to_reach(trace: &[TraceRecord], target: f64, rel: f64) -> Option<usize> {
    let within = |r: &TraceRecord| (r.theta_max - target).abs() <= rel * target.abs();
    let last_out = trace.iter().rposition(|r| !within(r));
    match last_out {
        None => trace.first().map(|r| r.step),
        Some(i) if i + 1 < trace.len() => Some(trace[i + 1].step),
        Some(_) => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_std(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, var.sqrt())
    }

    #[test]
    fn normal_sample_statistics() {
        let (m, s) = mean_std(&sample_distribution(42, 10_000, 1.0, false));
        assert!(m.abs() <= 0.05, "mean {m}");
        assert!((0.97..=1.03).contains(&s), "std {s}");
        let (_, s) = mean_std(&sample_distribution(42, 10_000, 50.0, false));
        assert!((48.5..=51.5).contains(&s), "std {s}");
    }

    #[test]
    fn relu_samples() {
        let v = sample_distribution(42, 10_000, 1.0, true);
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(min, 0.0);
        let zeros = v.iter().filter(|&&x| x == 0.0).count();
        assert!((4700..=5300).contains(&zeros), "{zeros}");
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(sample_distribution(7, 333, 2.0, false), sample_distribution(7, 333, 2.0, false));
        assert_ne!(sample_distribution(7, 10, 2.0, false), sample_distribution(8, 10, 2.0, false));
        assert_eq!(sample_distribution(7, 5, 1.0, false).len(), 5);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
        let r = 2.0 / 7.0 - 0.4;
        assert!((mse_loss(&[0.4], &[2.0 / 7.0]).unwrap() - r * r).abs() < 1e-15);
        assert!(matches!(
            mse_loss(&[1.0], &[1.0, 2.0]),
            Err(QuantError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn oracle_exact_cases() {
        let o = oracle_best_range(&[0.0, 1.0, 2.0, 3.0], 2).unwrap();
        assert!(o.mse < 1e-12, "{o:?}");
        // refinement cell on the theta_max axis: (6 + eps) / 100 / 199
        let cell = 6.003 / 100.0 / 199.0;
        assert!(o.theta_min.abs() <= cell && (o.theta_max - 3.0).abs() <= cell, "{o:?}");
        let o = oracle_best_range(&[0.0, 3.0], 1).unwrap();
        assert!(o.mse < 1e-12, "{o:?}");
    }

    #[test]
    fn oracle_beats_naive_range_on_normal_three_bit() {
        let x = sample_distribution(42, 10_000, 1.0, false);
        let o = oracle_best_range(&x, 3).unwrap();
        let min = x.iter().copied().fold(f64::INFINITY, f64::min);
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let naive = reconstruction_loss(&x, &RangeParams::min_max(min, max, 3).unwrap());
        assert!(o.mse < naive, "{} vs {}", o.mse, naive);
    }

    #[test]
    fn level_grouping_matches_direct_evaluation() {
        let x = sample_distribution(3, 2000, 1.5, false);
        let sorted = SortedTensor::new(&x);
        for (lo, hi, bits) in [(-1.0, 2.0, 3), (-4.0, 0.5, 2), (-0.3, 7.0, 4)] {
            let enc = encoding_for_k(lo, hi, levels(bits)).unwrap();
            let a = sorted.sse_by_levels(&enc);
            let b = sorted.sse_direct(&enc);
            assert!((a - b).abs() <= 1e-9 * b.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn stationary_on_grid() {
        let p = RangeParams::min_max(-1.0, 1.0, 3).unwrap();
        let enc = crate::grad::params_to_encoding(&p).unwrap()[0];
        let tensor: Vec<f64> = (0..=enc.k).map(|j| enc.s * (enc.n + j) as f64).collect();
        let mut spec = ExperimentSpec::toy(0, 3, 1e-2, Parameterization::MinMax);
        spec.steps = 50;
        let r = run_range_learning(&spec, &tensor, p.clone()).unwrap();
        assert!(r.trace.iter().all(|t| t.loss < 1e-30));
        assert!(r.trace.iter().all(|t| t.enc_a == -1.0 && t.enc_b == 1.0));
    }

    #[test]
    fn preset_cardinalities() {
        let count = |p| expand_preset(p, 1).unwrap().len();
        assert_eq!(count(Preset::Fig3SzVsMm), 8);
        assert_eq!(count(Preset::Fig5MmVsBg), 8);
        assert_eq!(count(Preset::Fig6SymEquiv), 6);
        assert_eq!(count(Preset::Fig7Relu), 4);
        assert_eq!(count(Preset::Fig8EasyInit), 8);
        assert_eq!(count(Preset::AppendixLrPolicies), 16);
        assert!(expand_preset(Preset::Custom, 1).is_err());
    }

    #[test]
    fn incompatible_policy_is_rejected() {
        let mut spec = ExperimentSpec::toy(0, 3, 1e-2, Parameterization::MinMax);
        spec.policy = PolicyKind::Naive;
        assert!(matches!(run_cell(&spec), Err(QuantError::PolicyMismatch { .. })));
    }

    #[test]
    fn steps_to_reach_requires_staying_inside() {
        let rec = |step, theta_max| TraceRecord {
            step,
            loss: 0.0,
            theta_min: 0.0,
            theta_max,
            s: 1.0,
            z: 0.0,
            enc_a: 0.0,
            enc_b: 0.0,
            clamp_event: false,
        };
        let t = vec![rec(0, 10.0), rec(1, 5.1), rec(2, 7.0), rec(3, 5.0), rec(4, 5.2)];
        assert_eq!(steps_to_reach(&t, 5.0, 0.05), Some(3));
        assert_eq!(steps_to_reach(&t[..3], 5.0, 0.05), None);
    }
}

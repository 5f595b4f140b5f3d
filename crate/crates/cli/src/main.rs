use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use qrange_core::grad::{gradient_check, GradMode, Parameterization};
use qrange_core::io::{fmt_sig9, render_svg_plot, write_trace_csv, IoError};
use qrange_core::lab::{
    oracle_best_range, run_cell, run_preset, sample_distribution, ExperimentSpec, InitPolicy, Preset,
    RunResult,
};
use qrange_core::net::{run_net, TinyMlpSpec};
use qrange_core::optim::{OptimizerKind, PolicyKind};
use qrange_core::quant::{derive_encoding, fake_quant_asym, QuantSpec};
use qrange_core::QuantError;

/// Learned quantization range experiments.
#[derive(Debug, Parser)]
#[command(name = "qrange", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every cell of a preset and write one trace per cell.
    RunPreset {
        /// fig3, fig5, fig6, fig7, fig8 or lr-policies.
        #[arg(long)]
        preset: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a single range-learning cell.
    RunCustom(CustomArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        param: String,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
    },
    /// Grid-search the best range for a seeded normal tensor.
    Oracle {
        #[arg(long)]
        bits: u32,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        n_samples: usize,
        #[arg(long, default_value_t = 1.0)]
        std: f64,
        #[arg(long)]
        relu: bool,
    },
    /// Learn the quantizer ranges of the tiny frozen network.
    Net {
        #[arg(long)]
        param: String,
        #[arg(long)]
        lr: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        /// Optional CSV of the per-step loss.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot trace fields against step as SVG.
    Render {
        /// Trace CSV; repeat for several traces.
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated trace columns.
        #[arg(long, default_value = "theta_min,theta_max")]
        fields: String,
    },
}

#[derive(Debug, Args)]
struct CustomArgs {
    #[arg(long)]
    bits: u32,
    #[arg(long)]
    lr: f64,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long)]
    param: String,
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long, value_enum, default_value_t = OptArg::Adam)]
    opt: OptArg,
    #[arg(long, value_enum, default_value_t = GradModeArg::Surrogate)]
    grad_mode: GradModeArg,
    #[arg(long, default_value_t = 1.0)]
    std: f64,
    #[arg(long)]
    relu: bool,
    #[arg(long, value_enum, default_value_t = InitArg::ThreeXMax)]
    init: InitArg,
    #[arg(long, default_value_t = 10_000)]
    n_samples: usize,
    /// Skip the grid-search oracle.
    #[arg(long)]
    no_oracle: bool,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    Uniform,
    Naive,
    Sophisticated,
    MinmaxPlus,
    SymmetricMatched,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptArg {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GradModeArg {
    PaperTable,
    Surrogate,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InitArg {
    #[value(name = "3xmax")]
    ThreeXMax,
    Exact,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Usage(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other.into()),
        }
    }
}

/// Configuration problems are usage errors; everything else is a runtime failure.
fn classify(e: QuantError) -> Failure {
    match e {
        QuantError::InvalidBits { .. }
        | QuantError::InvalidParams(_)
        | QuantError::PolicyMismatch { .. }
        | QuantError::SchemeMismatch(_) => Failure::Usage(e.to_string()),
        other => Failure::Runtime(other.into()),
    }
}

/// Parameterization name, with `min-max-plus` standing for min/max under
/// the matching learning-rate policy.
fn parse_param(name: &str) -> Result<(Parameterization, Option<PolicyKind>), Failure> {
    if name == "min-max-plus" {
        return Ok((Parameterization::MinMax, Some(PolicyKind::MinMaxPlus)));
    }
    name.parse::<Parameterization>()
        .map(|p| (p, None))
        .map_err(|_| Failure::Usage(format!("unknown --param {name:?}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::RunPreset { preset, seed, out } => {
            let preset = Preset::from_name(&preset)
                .filter(|p| *p != Preset::Custom)
                .ok_or_else(|| Failure::Usage(format!("unknown --preset {preset:?}")))?;
            let results = run_preset(preset, seed).map_err(classify)?;
            write_results(&results, &out)?;
            Ok(())
        }
        Command::RunCustom(args) => run_custom(args),
        Command::Gradcheck { param, trials, seed, h } => {
            let (p, _) = parse_param(&param)?;
            let report = gradient_check(p, trials, seed, h, 1e-4, 1e-8).map_err(classify)?;
            println!(
                "{}: max rel err {:.3e} over {} gradients ({} trials skipped, {} failures)",
                p.name(),
                report.max_rel_err,
                report.compared,
                report.skipped,
                report.failures
            );
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Runtime(anyhow::anyhow!("gradient check failed")))
            }
        }
        Command::Oracle { bits, seed, n_samples, std, relu } => {
            if n_samples == 0 || !(std > 0.0) {
                return Err(Failure::Usage("--n-samples and --std must be positive".into()));
            }
            let x = sample_distribution(seed, n_samples, std, relu);
            let o = oracle_best_range(&x, bits).map_err(classify)?;
            println!("theta_min {} theta_max {} mse {}", fmt_sig9(o.theta_min), fmt_sig9(o.theta_max), fmt_sig9(o.mse));
            let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if let Ok(spec) = QuantSpec::asymmetric(bits) {
                if let Ok(enc) = derive_encoding(lo, hi, &spec) {
                    let mse = x.iter().map(|&v| (fake_quant_asym(v, &enc) - v).powi(2)).sum::<f64>() / x.len() as f64;
                    println!("min/max range ({}, {}) mse {}", fmt_sig9(lo), fmt_sig9(hi), fmt_sig9(mse));
                }
            }
            Ok(())
        }
        Command::Net { param, lr, seed, steps, out } => {
            let (p, policy) = parse_param(&param)?;
            let mut spec = TinyMlpSpec::new(p, lr, seed);
            spec.steps = steps;
            spec.policy = policy.unwrap_or(PolicyKind::Uniform);
            let run = run_net(&spec).map_err(classify)?;
            println!(
                "{} lr={}: fp loss {} initial {} final {} diverged {}",
                param,
                lr,
                fmt_sig9(run.fp_loss),
                fmt_sig9(run.loss_trace.first().copied().unwrap_or(f64::NAN)),
                fmt_sig9(run.final_loss),
                run.diverged
            );
            if let Some(path) = out {
                let mut csv = String::from("step,loss\n");
                for (i, l) in run.loss_trace.iter().enumerate() {
                    let _ = writeln!(csv, "{i},{}", fmt_sig9(*l));
                }
                fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
        Command::Render { inputs, out, fields } => {
            let fields: Vec<String> = fields
                .split(',')
                .map(str::trim)
                .filter(|f| !f.is_empty())
                .map(String::from)
                .collect();
            render_svg_plot(&inputs, &fields, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn run_custom(a: CustomArgs) -> Result<(), Failure> {
    let (param, implied) = parse_param(&a.param)?;
    let policy = match (implied, a.policy) {
        (Some(p), None) => p,
        (Some(p), Some(PolicyArg::MinmaxPlus)) => p,
        (Some(_), Some(other)) => {
            return Err(Failure::Usage(format!(
                "--param min-max-plus already fixes the policy; got --policy {other:?}"
            )))
        }
        (None, arg) => match arg.unwrap_or(PolicyArg::Uniform) {
            PolicyArg::Uniform => PolicyKind::Uniform,
            PolicyArg::Naive => PolicyKind::Naive,
            PolicyArg::Sophisticated => PolicyKind::Sophisticated,
            PolicyArg::MinmaxPlus => PolicyKind::MinMaxPlus,
            PolicyArg::SymmetricMatched => PolicyKind::SymmetricMatched,
        },
    };
    let mut spec = ExperimentSpec::toy(a.seed, a.bits, a.lr, param);
    spec.steps = a.steps;
    spec.policy = policy;
    spec.optimizer = match a.opt {
        OptArg::Sgd => OptimizerKind::Sgd,
        OptArg::Adam => OptimizerKind::Adam,
    };
    spec.grad_mode = match a.grad_mode {
        GradModeArg::PaperTable => GradMode::PaperTable,
        GradModeArg::Surrogate => GradMode::SurrogateConsistent,
    };
    spec.dist_std = a.std;
    spec.relu = a.relu;
    spec.init_policy = match a.init {
        InitArg::ThreeXMax => InitPolicy::MinMax3xMax,
        InitArg::Exact => InitPolicy::MinMaxExact,
    };
    spec.n_samples = a.n_samples;
    spec.oracle = !a.no_oracle;
    QuantSpec::new(spec.bits, param.scheme()).map_err(classify)?;
    spec.validate().map_err(classify)?;
    let result = run_cell(&spec).map_err(classify)?;
    write_results(std::slice::from_ref(&result), &a.out)
}

fn write_results(results: &[RunResult], dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut summary = String::from(
        "slug,label,final_mse,oracle_mse,oracle_theta_min,oracle_theta_max,final_theta_min,final_theta_max,distance,diverged\n",
    );
    for r in results {
        let slug = r.spec.slug();
        write_trace_csv(r, &dir.join(format!("{slug}.csv")))?;
        let f = r.final_record();
        let (om, olo, ohi) = r
            .oracle
            .map(|o| (fmt_sig9(o.mse), fmt_sig9(o.theta_min), fmt_sig9(o.theta_max)))
            .unwrap_or_default();
        let dist = r.range_distance_to_oracle().map(fmt_sig9).unwrap_or_default();
        let _ = writeln!(
            summary,
            "{slug},{},{},{om},{olo},{ohi},{},{},{dist},{}",
            r.spec.label(),
            fmt_sig9(r.final_mse),
            fmt_sig9(f.theta_min),
            fmt_sig9(f.theta_max),
            u8::from(r.diverged)
        );
        println!(
            "{:45} final mse {}  range ({}, {}){}{}",
            r.spec.label(),
            fmt_sig9(r.final_mse),
            fmt_sig9(f.theta_min),
            fmt_sig9(f.theta_max),
            r.oracle.map(|o| format!("  oracle mse {}", fmt_sig9(o.mse))).unwrap_or_default(),
            if r.diverged { "  DIVERGED" } else { "" }
        );
    }
    let path = dir.join("summary.csv");
    fs::write(&path, summary).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

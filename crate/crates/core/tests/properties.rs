use std::collections::BTreeSet;

use proptest::prelude::*;

use qrange_core::grad::{
    accumulate_loss_grads, grad_beta_gamma, grad_kscale_koffset, grad_min_max, grad_scale_offset,
    grad_sym, GradMode, Parameterization, RangeParams, SymGradTarget,
};
use qrange_core::io::{parse_trace_csv, trace_to_csv};
use qrange_core::lab::{run_cell, ExperimentSpec, TraceRecord};
use qrange_core::optim::{adam_step, sgd_step, AdamState};
use qrange_core::quant::{
    classify_region, derive_encoding, fake_quant_asym, fake_quant_asym_tensor, fake_quant_sym,
    ste_surrogate, Granularity, QuantSpec, RegionLabel,
};

fn ulp_eq(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= f64::EPSILON * a.abs().max(b.abs())
}

prop_compose! {
    fn asym_setup()(bits in 2u32..=16, lo in -100.0f64..-1e-3, hi in 1e-3f64..100.0) -> (u32, f64, f64) {
        (bits, lo, hi)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn fake_quant_is_idempotent((bits, lo, hi) in asym_setup(), x in -300.0f64..300.0) {
        let enc = derive_encoding(lo, hi, &QuantSpec::asymmetric(bits).unwrap()).unwrap();
        let once = fake_quant_asym(x, &enc);
        prop_assert!(ulp_eq(fake_quant_asym(once, &enc), once));
    }

    #[test]
    fn image_has_at_most_k_plus_1_levels(
        (bits, lo, hi) in asym_setup(),
        xs in prop::collection::vec(-300.0f64..300.0, 1..400),
    ) {
        let spec = QuantSpec::asymmetric(bits).unwrap();
        let enc = derive_encoding(lo, hi, &spec).unwrap();
        let levels: BTreeSet<u64> = xs.iter().map(|&x| fake_quant_asym(x, &enc).to_bits()).collect();
        prop_assert!(levels.len() as i64 <= spec.k() + 1);
    }

    #[test]
    fn output_stays_in_range((bits, lo, hi) in asym_setup(), x in -1e4f64..1e4) {
        let enc = derive_encoding(lo, hi, &QuantSpec::asymmetric(bits).unwrap()).unwrap();
        let y = fake_quant_asym(x, &enc);
        prop_assert!(enc.s * enc.n as f64 <= y && y <= enc.s * enc.p as f64);
    }

    #[test]
    fn surrogate_consistency((bits, lo, hi) in asym_setup(), x in -300.0f64..300.0) {
        let enc = derive_encoding(lo, hi, &QuantSpec::asymmetric(bits).unwrap()).unwrap();
        let d = (fake_quant_asym(x, &enc) - ste_surrogate(x, enc.s, enc.z, enc.k)).abs();
        prop_assert!(d <= 1.5 * enc.s, "{d} vs s={}", enc.s);
    }

    #[test]
    fn symmetric_zero_is_exact(bits in 2u32..=16, theta in 1e-9f64..1e6) {
        prop_assert_eq!(fake_quant_sym(0.0, theta, &QuantSpec::symmetric(bits).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn per_channel_matches_per_slice(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in any::<u64>(),
    ) {
        let data = qrange_core::lab::sample_distribution(seed, rows * cols, 2.0, false);
        let spec = QuantSpec::asymmetric(4).unwrap();
        let encs: Vec<_> = (0..rows)
            .map(|r| derive_encoding(-1.0 - r as f64, 1.0 + 0.5 * r as f64, &spec).unwrap())
            .collect();
        let out = fake_quant_asym_tensor(&data, &[rows, cols], Granularity::PerChannel { axis: 0 }, &encs).unwrap();
        for r in 0..rows {
            let slice = &data[r * cols..(r + 1) * cols];
            let per_tensor = fake_quant_asym_tensor(slice, &[cols], Granularity::PerTensor, &encs[r..r + 1]).unwrap();
            prop_assert_eq!(&out[r * cols..(r + 1) * cols], per_tensor.as_slice());
        }
    }

    #[test]
    fn scaling_identities_are_exact(
        (bits, lo, hi) in asym_setup(),
        beta in 0.2f64..2.0,
        gamma in 0.2f64..2.0,
        x in -300.0f64..300.0,
        table in any::<bool>(),
    ) {
        let mode = if table { GradMode::PaperTable } else { GradMode::SurrogateConsistent };
        let spec = QuantSpec::asymmetric(bits).unwrap();
        let k = spec.k() as f64;

        let mut bg = RangeParams::from_calibration(
            Parameterization::BetaGamma { use_sigmoid: false }, vec![lo], vec![hi], bits).unwrap();
        bg.enc_a[0] = beta;
        bg.enc_b[0] = gamma;
        let (elo, ehi) = bg.effective_range(0);
        let enc = derive_encoding(elo, ehi, &spec).unwrap();
        let (dmin, dmax) = grad_min_max(x, &enc, mode);
        let g = grad_beta_gamma(x, &bg, mode).unwrap();
        prop_assert_eq!(g.d_enc_a[0], lo * dmin);
        prop_assert_eq!(g.d_enc_b[0], hi * dmax);

        let (ds, dz) = grad_scale_offset(x, &enc, mode);
        let kk = grad_kscale_koffset(x, &enc, mode);
        prop_assert_eq!(kk.d_enc_a[0], ds / k);
        prop_assert_eq!(kk.d_enc_b[0], k * dz);

        let sym = QuantSpec::symmetric(bits).unwrap();
        let t = hi;
        let gs = grad_sym(x, t, &sym, SymGradTarget::S).unwrap();
        let gt = grad_sym(x, t, &sym, SymGradTarget::ThetaMax).unwrap();
        let gg = grad_sym(x, t, &sym, SymGradTarget::Gamma { theta_max0: gamma }).unwrap();
        prop_assert_eq!(gt, (2.0 / k) * gs);
        prop_assert_eq!(gg, gamma * gt);
    }

    #[test]
    fn inside_min_max_gradients_cancel((bits, lo, hi) in asym_setup(), t in 0.0f64..1.0) {
        let enc = derive_encoding(lo, hi, &QuantSpec::asymmetric(bits).unwrap()).unwrap();
        let x = lo + t * (hi - lo);
        prop_assume!(classify_region(x, &enc) == RegionLabel::Inside);
        for mode in [GradMode::PaperTable, GradMode::SurrogateConsistent] {
            let (dmin, dmax) = grad_min_max(x, &enc, mode);
            prop_assert!((dmin + dmax).abs() <= 1e-12 * dmin.abs().max(dmax.abs()).max(1.0));
        }
    }

    #[test]
    fn sgd_is_linear_in_gradient_scale(
        p in prop::collection::vec(-10.0f64..10.0, 1..6),
        g in prop::collection::vec(-10.0f64..10.0, 6),
        lr in 1e-5f64..1.0,
        e in -8i32..8,
    ) {
        // Powers of two keep both products exact.
        let c = 2f64.powi(e);
        let g = &g[..p.len()];
        let scaled: Vec<f64> = g.iter().map(|v| c * v).collect();
        prop_assert_eq!(sgd_step(&p, &scaled, lr), sgd_step(&p, g, c * lr));
    }

    #[test]
    fn adam_first_step_is_sign_covariant(
        // |g| and |c g| stay at least 5e6 times Adam's eps.
        g in prop::collection::vec(prop_oneof![-10.0f64..-0.1, 0.1f64..10.0], 1..6),
        c in 0.5f64..1e2,
        lr in 1e-4f64..1e-1,
    ) {
        let p = vec![0.5; g.len()];
        let st = AdamState::new(g.len());
        let (base, _) = adam_step(&p, &g, &st, lr);
        let scaled: Vec<f64> = g.iter().map(|v| c * v).collect();
        let (up, _) = adam_step(&p, &scaled, &st, lr);
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let (down, _) = adam_step(&p, &neg, &st, lr);
        for i in 0..g.len() {
            let d0 = base[i] - p[i];
            prop_assert!(((up[i] - p[i]) - d0).abs() <= 1e-6 * d0.abs());
            prop_assert!(((down[i] - p[i]) + d0).abs() <= 1e-15);
        }
    }

    #[test]
    fn csv_round_trip_keeps_nine_digits(
        rows in prop::collection::vec(
            (prop::array::uniform7(prop_oneof![-1e12f64..1e12, -1e-6f64..1e-6]), any::<bool>()),
            1..40,
        ),
    ) {
        let trace: Vec<TraceRecord> = rows
            .iter()
            .enumerate()
            .map(|(step, (v, clamp_event))| TraceRecord {
                step,
                loss: v[0],
                theta_min: v[1],
                theta_max: v[2],
                s: v[3],
                z: v[4],
                enc_a: v[5],
                enc_b: v[6],
                clamp_event: *clamp_event,
            })
            .collect();
        let back = parse_trace_csv(&trace_to_csv(&trace), "mem").unwrap();
        prop_assert_eq!(back.len(), trace.len());
        for (a, b) in trace.iter().zip(&back) {
            prop_assert_eq!(a.step, b.step);
            prop_assert_eq!(a.clamp_event, b.clamp_event);
            for (x, y) in [
                (a.loss, b.loss), (a.theta_min, b.theta_min), (a.theta_max, b.theta_max),
                (a.s, b.s), (a.z, b.z), (a.enc_a, b.enc_a), (a.enc_b, b.enc_b),
            ] {
                prop_assert!((x - y).abs() <= 5e-9 * x.abs(), "{x} -> {y}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn runs_are_deterministic(seed in any::<u64>(), which in 0usize..5, bits in 2u32..=10) {
        let kinds = [
            Parameterization::ScaleOffset,
            Parameterization::MinMax,
            Parameterization::BetaGamma { use_sigmoid: true },
            Parameterization::KScaleKOffset,
            Parameterization::Symmetric(qrange_core::grad::SymParam::Gamma { use_sigmoid: false }),
        ];
        let mut spec = ExperimentSpec::toy(seed, bits, 1e-2, kinds[which]);
        spec.n_samples = 500;
        spec.steps = 200;
        spec.oracle = false;
        let a = run_cell(&spec).unwrap();
        let b = run_cell(&spec).unwrap();
        prop_assert_eq!(a.trace.len(), b.trace.len());
        for (x, y) in a.trace.iter().zip(&b.trace) {
            prop_assert_eq!(x.loss.to_bits(), y.loss.to_bits());
            prop_assert_eq!(x.enc_a.to_bits(), y.enc_a.to_bits());
            prop_assert_eq!(x.enc_b.to_bits(), y.enc_b.to_bits());
        }
    }

    #[test]
    fn grid_tensor_is_a_stationary_point(bits in 2u32..=8, lo_steps in 1i64..20, seed in any::<u64>()) {
        // Every element already sits on a level of the initial encoding.
        let spec = QuantSpec::asymmetric(bits).unwrap();
        let k = spec.k();
        let s = 0.25;
        let lo = -(lo_steps.min(k - 1) as f64) * s;
        let hi = lo + k as f64 * s;
        let enc = derive_encoding(lo, hi, &spec).unwrap();
        let levels = qrange_core::lab::sample_distribution(seed, 64, 1.0, false);
        let tensor: Vec<f64> = levels
            .iter()
            .map(|u| enc.s * ((u.abs() * 1e3) as i64 % (k + 1) + enc.n) as f64)
            .collect();
        for kind in [Parameterization::ScaleOffset, Parameterization::MinMax, Parameterization::BetaGamma { use_sigmoid: false }] {
            let p = RangeParams::from_calibration(kind, vec![lo], vec![hi], bits).unwrap();
            let (loss, g) = accumulate_loss_grads(&tensor, &p, GradMode::SurrogateConsistent).unwrap();
            prop_assert_eq!(loss, 0.0);
            prop_assert!(g.d_enc_a[0] == 0.0 && g.d_enc_b[0] == 0.0);
        }
    }
}

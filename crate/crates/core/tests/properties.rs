use proptest::prelude::*;

use perturbed_sde::brownian::sample_lattice;
use perturbed_sde::errorlab::{ErrorRow, ErrorTable};
use perturbed_sde::mlmc::{allocate_samples, AllocationRule, LevelSpec, SampleStats};
use perturbed_sde::models::{gbm_exact_path, Cev, FnModel, PerturbedGbm, SabrParams};
use perturbed_sde::normal;
use perturbed_sde::payoffs::{digital, localize, registered_smooth_payoffs, second_order_bound_check, smoothed_digital};
use perturbed_sde::schemes::{accelerated_em, accelerated_milstein, euler_maruyama, milstein, sabr_hybrid_tilde};

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn accelerated_collapses_to_base_at_zero(
        seed in any::<u64>(),
        j in 0u64..1_000_000,
        vol in 0.05f64..1.0,
        x0 in 0.1f64..10.0,
        log_n in 0u32..7,
    ) {
        let model = PerturbedGbm::new(vol, x0);
        let lattice = sample_lattice(seed, j, 64, 1, 1.0).unwrap();
        let base = gbm_exact_path(&lattice, vol, x0).unwrap();
        let n = 1usize << log_n;
        let coarse = lattice.coarsen(64 / n).unwrap();
        let expect = bits(base.restrict(n).unwrap().values());
        let em = accelerated_em(&model, 0.0, &coarse, &[x0], &base).unwrap();
        let mil = accelerated_milstein(&model, 0.0, &coarse, &[x0], &base).unwrap();
        prop_assert_eq!(bits(em.values()), expect.clone());
        prop_assert_eq!(bits(mil.values()), expect);
    }

    #[test]
    fn sabr_hybrid_collapses_to_cev_milstein(
        seed in any::<u64>(),
        beta in 0.5f64..=1.0,
        rho in -0.99f64..0.99,
        log_n in 0u32..7,
    ) {
        let params = SabrParams::with_scaled_alpha(100.0, beta, 0.16, 0.0, rho, 1.0).unwrap();
        let lattice = sample_lattice(seed, 0, 64, 2, 1.0).unwrap();
        let n = 1usize << log_n;
        let tilde = sabr_hybrid_tilde(&params, &lattice, n).unwrap();
        let coarse = lattice.coarsen(64 / n).unwrap();
        let cev = milstein(&Cev::sabr_base(&params), 0.0, &coarse.factor(0).unwrap(), &[100.0]).unwrap();
        prop_assert_eq!(bits(tilde.values()), bits(cev.values()));
    }

    #[test]
    fn milstein_is_euler_for_additive_noise(
        seed in any::<u64>(),
        a in -2.0f64..2.0,
        s in 0.0f64..3.0,
        x0 in -5.0f64..5.0,
    ) {
        let model = FnModel::new("ou", vec![x0], 1, move |x, _, b| b[0] = a * x[0], move |_, _, o| o[0] = s)
            .with_milstein_correction(|_, _, c| c[0] = 0.0);
        let lattice = sample_lattice(seed, 3, 50, 1, 2.0).unwrap();
        let e = euler_maruyama(&model, 0.0, &lattice, &[x0]).unwrap();
        let m = milstein(&model, 0.0, &lattice, &[x0]).unwrap();
        prop_assert_eq!(bits(e.values()), bits(m.values()));
    }

    #[test]
    fn power_of_two_coarsenings_compose(
        seed in any::<u64>(),
        factors in 1usize..4,
        a in 0u32..4,
        b in 0u32..4,
    ) {
        let lattice = sample_lattice(seed, 1, 256, factors, 1.0).unwrap();
        let (k1, k2) = (1usize << a, 1usize << b);
        let twice = lattice.coarsen(k1).unwrap().coarsen(k2).unwrap();
        prop_assert_eq!(twice, lattice.coarsen(k1 * k2).unwrap());
    }

    #[test]
    fn coarsening_preserves_brownian_endpoint(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 2, 3, 5, 6, 10, 15, 30])) {
        let lattice = sample_lattice(seed, 2, 30, 2, 1.0).unwrap();
        let coarse = lattice.coarsen(k).unwrap();
        for f in 0..2 {
            let fine: f64 = lattice.column(f).iter().sum();
            let c: f64 = coarse.column(f).iter().sum();
            prop_assert!((fine - c).abs() < 1e-12);
        }
    }

    #[test]
    fn restrict_samples_the_fine_grid(seed in any::<u64>(), log_n in 0u32..6) {
        let lattice = sample_lattice(seed, 0, 32, 1, 1.5).unwrap();
        let path = gbm_exact_path(&lattice, 0.3, 2.0).unwrap();
        let n = 1usize << log_n;
        let r = path.restrict(n).unwrap();
        let stride = 32 / n;
        for i in 0..=n {
            prop_assert_eq!(r.value(i), path.value(i * stride));
            prop_assert_eq!(r.grid_times()[i].to_bits(), (i as f64 * 1.5 / n as f64).to_bits());
        }
    }

    #[test]
    fn allocation_respects_the_variance_budget(
        variances in prop::collection::vec(0.0f64..50.0, 1..6),
        gamma in 0.01f64..1.0,
        balanced in any::<bool>(),
    ) {
        let spec = LevelSpec::new(4, variances.len() - 1, 1.0).unwrap();
        let rule = if balanced { AllocationRule::Balanced } else { AllocationRule::CostOptimal };
        let n = allocate_samples(&variances, &spec, gamma, rule).unwrap();
        prop_assert!(n.iter().all(|&k| k >= 2));
        let budget: f64 = variances.iter().zip(&n).map(|(v, k)| v / *k as f64).sum();
        prop_assert!(budget <= gamma * gamma / 2.0 * (1.0 + 1e-12));
    }

    #[test]
    fn stats_merge_in_any_split(xs in prop::collection::vec(-1e3f64..1e3, 2..300), cut in 0usize..300) {
        let cut = cut.min(xs.len());
        let mut whole = SampleStats::default();
        xs.iter().for_each(|&x| whole.push(x));
        let (mut a, mut b) = (SampleStats::default(), SampleStats::default());
        xs[..cut].iter().for_each(|&x| a.push(x));
        xs[cut..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        prop_assert_eq!(a.count(), whole.count());
        prop_assert!((a.mean() - whole.mean()).abs() <= 1e-9 * (1.0 + whole.mean().abs()));
        prop_assert!((a.variance() - whole.variance()).abs() <= 1e-8 * (1.0 + whole.variance()));
    }

    #[test]
    fn error_table_stays_sorted(entries in prop::collection::vec((0usize..3, 1usize..500, 0.0f64..10.0), 1..40)) {
        let labels = ["accelerated", "check", "standard"];
        let mut table = ErrorTable::new();
        for (l, n, e) in entries {
            table.push(ErrorRow {
                n,
                estimator_label: labels[l].into(),
                error: e,
                std_error: e / 10.0,
                samples: 1,
                wall_time_ms: 0,
            }).unwrap();
        }
        let keys: Vec<(String, usize)> = table.rows().iter().map(|r| (r.estimator_label.clone(), r.n)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        prop_assert_eq!(keys, sorted);
    }

    #[test]
    fn second_order_bound_holds(
        x1 in -200.0f64..200.0,
        d in prop::collection::vec(-5.0f64..5.0, 3),
        scale in prop::sample::select(vec![1e-6, 1e-2, 1.0, 10.0]),
    ) {
        for f in registered_smooth_payoffs() {
            let (y1, y2, x2) = (x1 + scale * d[0], x1 + scale * d[1], x1 + scale * d[2]);
            prop_assert!(second_order_bound_check(&f, x1, y1, y2, x2).unwrap(), "{}", f.label());
        }
    }

    #[test]
    fn localization_sums_back(x in 80.0f64..120.0, h in 0.01f64..5.0) {
        let loc = localize(digital(100.0), smoothed_digital(100.0, h).unwrap());
        let sum = loc.smooth_part.evaluate(x) + loc.irregular_part.evaluate(x);
        prop_assert!((sum - loc.original.evaluate(x)).abs() <= 1e-15);
    }

    #[test]
    fn quantile_is_monotone_and_inverts(p in 1e-12f64..1.0, q in 1e-12f64..1.0) {
        let (lo, hi) = if p < q { (p, q) } else { (q, p) };
        prop_assert!(normal::inverse_cdf(lo) <= normal::inverse_cdf(hi));
        prop_assert!((normal::cdf(normal::inverse_cdf(p)) - p).abs() <= 1e-14 + 1e-12 * p);
    }
}

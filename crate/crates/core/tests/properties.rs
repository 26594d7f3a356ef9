use hbridge::hfunc::ClassifierExpert;
use hbridge::verify::{canonical_model, canonical_schedule};
use hbridge::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn linear(steps: usize, lambda: f64) -> Schedule64 {
    build_schedule(steps, &ScheduleRecipe::LinearBeta { beta_min: 1e-4, beta_max: 2e-2 }, lambda).unwrap()
}

fn mixture(seed: u64) -> MixtureModel64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    hbridge::verify::random_mixture(&mut rng, 2, 4, 2).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_step_invariants(steps in 2usize..400, lambda in 0.0f64..=1.0) {
        let s = linear(steps, lambda);
        for t in 1..=steps {
            let p = s.step_params(t).unwrap();
            prop_assert!((p.a_t * p.a_t + p.sigma_t * p.sigma_t - 1.0).abs() <= 1e-14);
            prop_assert!(p.omega >= 0.0 && p.omega <= p.sigma_prev);
            prop_assert!(p.eta > 0.0);
            prop_assert!(p.coef < 0.0);
            if t >= 2 {
                prop_assert!(p.gamma > 0.0);
                let r = (p.eta / p.gamma) / (p.sigma_t / p.sigma_prev);
                prop_assert!((r - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn omega_nondecreasing_in_lambda(l1 in 0.0f64..=1.0, l2 in 0.0f64..=1.0, t in 1usize..=100) {
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let a = linear(100, lo).step_params(t).unwrap().omega;
        let b = linear(100, hi).step_params(t).unwrap().omega;
        prop_assert!(a <= b);
    }

    #[test]
    fn guidance_is_affine_in_weight(
        seed in 0u64..1000, x in prop::array::uniform2(-4.0f64..4.0),
        t in 1usize..=100, w1 in -5.0f64..10.0, w2 in -5.0f64..10.0,
    ) {
        let (m, s) = (mixture(seed), linear(100, 1.0));
        let c = Condition::label(1);
        let e = |w: f64| m.cfg_noise_pred(&s, &x, t, &c, w).unwrap();
        let lhs = vector::add(&e(w1), &e(w2));
        let rhs = vector::add(&e(w1 + w2), &e(0.0));
        prop_assert!(vector::max_abs_diff(&lhs, &rhs) <= 1e-12 * (1.0 + vector::norm(&lhs)));
    }

    #[test]
    fn posterior_is_a_distribution(seed in 0u64..1000, x in prop::array::uniform2(-6.0f64..6.0), t in 0usize..=100) {
        let (m, s) = (mixture(seed), linear(100, 1.0));
        let p = m.class_posterior(&s, &x, t).unwrap();
        prop_assert!(p.probs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn noise_is_scaled_score(seed in 0u64..1000, x in prop::array::uniform2(-4.0f64..4.0), t in 0usize..=100) {
        let (m, s) = (mixture(seed), linear(100, 1.0));
        let c = Condition::Unconditional;
        let eps = m.noise_pred(&s, &x, t, &c).unwrap();
        let sc = m.score(&s, &x, t, &c).unwrap();
        let want = vector::scale(&sc, -s.sigma(t).unwrap());
        prop_assert!(vector::max_abs_diff(&eps, &want) <= 1e-15 * (1.0 + vector::norm(&want)));
    }

    #[test]
    fn edit_direction_affine_in_weights(
        seed in 0u64..1000, x in prop::array::uniform2(-4.0f64..4.0), t in 1usize..=100,
        we in 0.0f64..10.0, wh in 0.0f64..10.0, d in -3.0f64..3.0,
    ) {
        let (m, s) = (mixture(seed), linear(100, 1.0));
        let ctx = Ctx::new(&m, &s);
        let f = |we: f64, wh: f64| {
            let e = ConditionalExpert { cond_edit: Condition::label(1), cond_orig: Condition::label(0), w_edit: we, w_hat_orig: wh };
            edit_direction_f(&ctx, &x, t, &e).unwrap()
        };
        for (a, b, c) in [(f(we, wh), f(we + d, wh), f(we + 2.0 * d, wh)), (f(we, wh), f(we, wh + d), f(we, wh + 2.0 * d))] {
            let mid = vector::scale(&vector::add(&a, &c), 0.5);
            prop_assert!(vector::max_abs_diff(&mid, &b) <= 1e-10 * (1.0 + vector::norm(&b)));
        }
    }

    #[test]
    fn product_score_order_invariant(seed in 0u64..1000, x in prop::array::uniform2(-4.0f64..4.0), t in 0usize..=100, lam in 0.0f64..3.0) {
        let (m, s) = (mixture(seed), linear(100, 1.0));
        let ctx = Ctx::new(&m, &s);
        let r1 = ReconExpert { lambda: lam, anchor: vec![0.5, -0.5] };
        let r2 = ReconExpert { lambda: 2.0 * lam, anchor: vec![-1.0, 1.0] };
        let c = ClassifierExpert { label: 0 };
        let a = product_score(&[&r1, &c, &r2], &ctx, &x, t).unwrap();
        let b = product_score(&[&r2, &r1, &c], &ctx, &x, t).unwrap();
        let d = product_score(&[&c, &r2, &r1], &ctx, &x, t).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(&a, &d);
    }

    #[test]
    fn telescoping_any_seed(seed in 0u64..10_000, lambda in 0.0f64..=1.0) {
        let m = canonical_model();
        let s = canonical_schedule(30, lambda).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = m.sample_data(&mut rng, &Condition::Unconditional).unwrap();
        let rec = ef_invert(&m, &s, &x0, &Condition::label(0), 1.0, &mut rng).unwrap();
        prop_assert!(rec.telescoping_error(&m, &s).unwrap() < 1e-12);
    }
}

#[test]
fn single_precision_pipeline_runs() {
    let m: MixtureModel32 = MixtureModel::new(vec![
        Component { weight: 0.5, mean: vec![-2.0f32, 0.0], std: 0.5, label: 0 },
        Component { weight: 0.5, mean: vec![2.0f32, 0.0], std: 0.5, label: 1 },
    ])
    .unwrap();
    let s: Schedule32 = build_schedule(1000, &ScheduleRecipe::LinearBeta { beta_min: 1e-4, beta_max: 2e-2 }, 1.0)
        .unwrap()
        .respaced(50)
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rec = ef_invert(&m, &s, &[-2.0f32, 0.1], &Condition::label(0), 1.0, &mut rng).unwrap();
    let cfg = EditConfig::defaults(InversionMode::Random, Condition::label(0), Condition::label(1));
    let tr = run_edit(&m, &s, &rec, &cfg).unwrap();
    assert!(m.class_posterior(&s, &tr.x0_edit, 0).unwrap().prob(1) > 0.99);

    let mut noop = cfg.clone();
    noop.cond_edit = noop.cond_orig.clone();
    noop.w_hat_orig = noop.w_edit;
    let tr = run_edit(&m, &s, &rec, &noop).unwrap();
    assert!(vector::max_abs_diff(&tr.x0_edit, &[-2.0f32, 0.1]) < 1e-4);
}

#[test]
fn explicit_implicit_gap_shrinks_with_refinement() {
    let m = canonical_model();
    let gap = |steps: usize| {
        let s = canonical_schedule(steps, 0.0).unwrap();
        let rec = ddim_invert(&m, &s, &[-2.1, 0.3], &Condition::label(0), 1.0).unwrap();
        let mut c = EditConfig::defaults(InversionMode::Deterministic, Condition::label(0), Condition::label(1));
        c.mode = EngineMode::Explicit;
        let a = run_edit(&m, &s, &rec, &c).unwrap();
        c.mode = EngineMode::Implicit;
        let b = run_edit(&m, &s, &rec, &c).unwrap();
        a.steps.iter().zip(&b.steps).map(|(p, q)| vector::dist(&p.x_edit, &q.x_edit)).fold(0.0, f64::max)
    };
    let g: Vec<f64> = [25, 50, 100, 200].iter().map(|&t| gap(t)).collect();
    for w in g.windows(2) {
        assert!(w[1] <= 0.6 * w[0], "{g:?}");
    }
}

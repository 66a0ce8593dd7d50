use advland_core::attack::{bruteforce_adv_loss, fgsm, pgd, AdvBudget, Norm, PgdConfig};
use advland_core::connect::bernstein;
use advland_core::data::Domain;
use advland_core::model::{cross_entropy, Activation, Arch, Model};
use advland_core::objective::LossOracle;
use advland_core::probe::hvp;
use advland_core::schedule::{EpsScheduler, PeriodWindow};
use advland_core::theory::{g_lower_bound, t_set_member, version_space_member, GAMMA_GRID};
use advland_core::{ParamVector, RngStream};
use proptest::prelude::*;

fn linear(m: usize, k: usize, w: Vec<f64>) -> Model {
    let arch = Arch::LinearMulticlass {
        inputs: m,
        classes: k,
    };
    Model::new(
        arch.clone(),
        ParamVector::from_values(&arch.layout(), w).unwrap(),
    )
    .unwrap()
}

/// A linear instance with `m` inputs and `k` classes.
fn linear_instance(max_m: usize) -> impl Strategy<Value = (Model, Vec<f64>, usize)> {
    (1..=max_m, 2..=4usize).prop_flat_map(|(m, k)| {
        (
            prop::collection::vec(-2.0..2.0f64, m * k),
            prop::collection::vec(0.0..1.0f64, m),
            0..k,
        )
            .prop_map(move |(w, x, y)| (linear(m, k, w), x, y))
    })
}

fn small_mlp() -> impl Strategy<Value = (Model, Vec<f64>, usize)> {
    (
        any::<u64>(),
        prop::collection::vec(0.0..1.0f64, 4),
        0..3usize,
    )
        .prop_map(|(seed, x, y)| {
            let arch = Arch::mlp(&[4, 6, 3], Activation::Tanh);
            let model = Model::init(arch, &mut RngStream::new(seed).rng()).unwrap();
            (model, x, y)
        })
}

fn budget(norm_inf: bool, eps: f64, clip: bool) -> AdvBudget {
    let b = if norm_inf {
        AdvBudget::linf(eps)
    } else {
        AdvBudget::l2(eps)
    };
    b.with_domain(clip.then_some(Domain::UNIT))
}

fn dist(norm: Norm, a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(p, q)| p - q).collect();
    norm.of(&d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attacks_stay_feasible(
        (model, x, y) in small_mlp(),
        eps in 0.0..0.6f64,
        norm_inf in any::<bool>(),
        clip in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let b = budget(norm_inf, eps, clip);
        let cfg = PgdConfig::new(7, eps / 3.0 + 1e-3, true, 2).unwrap();
        let mut outs = vec![pgd(&model, &x, y, &b, &cfg, &RngStream::new(seed)).unwrap()];
        if norm_inf {
            outs.push(fgsm(&model, &x, y, &b).unwrap());
        }
        for adv in outs {
            prop_assert!(dist(b.norm, &adv, &x) <= eps + 1e-12);
            if clip {
                prop_assert!(adv.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn pgd_is_deterministic((model, x, y) in small_mlp(), seed in any::<u64>()) {
        let b = AdvBudget::linf(0.2);
        let cfg = PgdConfig::cifar(0.2);
        let s = RngStream::new(seed);
        prop_assert_eq!(pgd(&model, &x, y, &b, &cfg, &s).unwrap(), pgd(&model, &x, y, &b, &cfg, &s).unwrap());
    }

    #[test]
    fn pgd_sandwich((model, x, y) in linear_instance(6), eps in 0.0..0.5f64, seed in any::<u64>()) {
        let b = AdvBudget::linf(eps);
        let clean = model.loss(&x, y).unwrap();
        let adv = pgd(&model, &x, y, &b, &PgdConfig::new(20, eps / 8.0 + 1e-4, true, 1).unwrap(), &RngStream::new(seed)).unwrap();
        let attacked = model.loss(&adv, y).unwrap();
        let (exact, _) = bruteforce_adv_loss(&model, &x, y, &b).unwrap();
        prop_assert!(clean <= attacked + 1e-9);
        prop_assert!(attacked <= exact + 1e-9);
    }

    #[test]
    fn exact_adversarial_loss_grows_with_eps((model, x, y) in linear_instance(6), clip in any::<bool>()) {
        let mut prev = f64::NEG_INFINITY;
        for eps in [0.0, 0.05, 0.1, 0.2, 0.4, 0.8] {
            let b = AdvBudget::linf(eps).with_domain(clip.then_some(Domain::UNIT));
            let (g, _) = bruteforce_adv_loss(&model, &x, y, &b).unwrap();
            prop_assert!(g >= prev - 1e-12);
            prev = g;
        }
    }

    #[test]
    fn lower_bound_sandwich((model, x, y) in linear_instance(6), eps in 0.0..1.0f64) {
        let clean = model.loss(&x, y).unwrap();
        let lower = g_lower_bound(&model, &x, y, eps, Norm::Inf).unwrap();
        let (exact, _) = bruteforce_adv_loss(&model, &x, y, &AdvBudget::linf(eps)).unwrap();
        prop_assert!(clean <= lower + 1e-9);
        prop_assert!(lower <= exact + 1e-9);
    }

    #[test]
    fn version_space_is_nested((model, x, y) in linear_instance(8), a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        if version_space_member(&model, &x, y, hi).unwrap() {
            prop_assert!(version_space_member(&model, &x, y, lo).unwrap());
        }
    }

    #[test]
    fn t_set_grows_with_eps((model, x, y) in linear_instance(6), a in 0.0..2.0f64, b in 0.0..2.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        if t_set_member(&model, &x, y, lo, &GAMMA_GRID, 1e-9).unwrap() {
            prop_assert!(t_set_member(&model, &x, y, hi, &GAMMA_GRID, 1e-9).unwrap());
        }
    }

    #[test]
    fn cross_entropy_ignores_logit_shift(logits in prop::collection::vec(-20.0..20.0f64, 2..8), c in -50.0..50.0f64, pick in any::<prop::sample::Index>()) {
        let y = pick.index(logits.len());
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        prop_assert!((cross_entropy(&logits, y) - cross_entropy(&shifted, y)).abs() < 1e-12);
    }

    #[test]
    fn schedules_are_clipped_and_monotone(
        cosine in any::<bool>(),
        eps_min in 0.0..0.3f64,
        extra in 0.01..1.0f64,
        warmup in 1.0..30.0f64,
        target in 0.0..1.0f64,
    ) {
        let s = if cosine {
            EpsScheduler::cosine(eps_min, eps_min + extra, warmup, target)
        } else {
            EpsScheduler::linear(eps_min, eps_min + extra, warmup, target)
        };
        let mut prev = f64::NEG_INFINITY;
        for d in 0..60 {
            let e = s.eps_at(d, PeriodWindow::single(60)).unwrap();
            prop_assert!((0.0..=target).contains(&e));
            prop_assert!(e >= prev);
            prev = e;
        }
        if eps_min + extra >= target {
            for d in (warmup.ceil() as usize)..60 {
                prop_assert_eq!(s.eps_at(d, PeriodWindow::single(60)).unwrap(), target);
            }
        }
    }

    #[test]
    fn short_period_is_the_long_one_rescaled(cosine in any::<bool>(), half in 2usize..40, d in 0usize..40, warmup in 1.0..20.0f64) {
        let d = d % half;
        let s = if cosine { EpsScheduler::cosine(0.0, 0.6, warmup, 0.4) } else { EpsScheduler::linear(0.0, 0.8, warmup, 0.4) };
        let long = PeriodWindow { start: 0, length: 2 * half, reference: 2 * half };
        let short = PeriodWindow { start: 2 * half, length: half, reference: 2 * half };
        let a = s.eps_at(2 * half + d, short).unwrap();
        let b = s.eps_at(2 * d, long).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn bernstein_partition_of_unity(n in 1usize..8, t in 0.0..=1.0f64) {
        let s: f64 = (0..=n).map(|k| bernstein(n, k, t)).sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }
}

struct Smooth<'a> {
    model: &'a Model,
    xs: &'a [Vec<f64>],
    ys: &'a [usize],
}

impl LossOracle for Smooth<'_> {
    fn loss(&self, theta: &ParamVector, _: &RngStream) -> advland_core::Result<f64> {
        let m = self.model.with_params(theta.clone())?;
        let mut s = 0.0;
        for (x, y) in self.xs.iter().zip(self.ys) {
            s += m.loss(x, *y)?;
        }
        Ok(s / self.xs.len() as f64)
    }

    fn loss_grad(
        &self,
        theta: &ParamVector,
        _: &RngStream,
    ) -> advland_core::Result<(f64, ParamVector)> {
        let m = self.model.with_params(theta.clone())?;
        let mut g = theta.zeros_like();
        let mut s = 0.0;
        for (x, y) in self.xs.iter().zip(self.ys) {
            let (l, gi) = m.loss_grad_theta(x, *y)?;
            s += l;
            g.axpy(1.0 / self.xs.len() as f64, &gi)?;
        }
        Ok((s / self.xs.len() as f64, g))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hvp_is_symmetric_on_smooth_models(seed in any::<u64>(), act in prop::sample::select(vec![Activation::Tanh, Activation::Sigmoid, Activation::Elu])) {
        let arch = Arch::mlp(&[3, 5, 3], act);
        let s = RngStream::new(seed);
        let model = Model::init(arch.clone(), &mut s.child("init").rng()).unwrap();
        let xs: Vec<Vec<f64>> = (0..6).map(|i| {
            let mut r = s.child(format!("x{i}")).rng();
            (0..3).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect()
        }).collect();
        let ys: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let oracle = Smooth { model: &model, xs: &xs, ys: &ys };
        let u = ParamVector::random_unit(&arch.layout(), &mut s.child("u").rng());
        let v = ParamVector::random_unit(&arch.layout(), &mut s.child("v").rng());
        let hu = hvp(&oracle, model.params(), &u, 1e-3, &s).unwrap();
        let hv = hvp(&oracle, model.params(), &v, 1e-3, &s).unwrap();
        prop_assert!((v.dot(&hu) - u.dot(&hv)).abs() < 1e-5);
    }
}

use l96calib::dynamics::{ParamName, Params};
use l96calib::priors::{PriorSet, PriorSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, LogNormal, Normal};

/// Composite Simpson's rule on `[a, b]` with `n` (even) intervals.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(a) + f(b) + inner) * h / 3.0
}

fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = cdf(x);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn default_marginals_integrate_to_one() {
    for (name, spec) in PriorSet::standard().entries() {
        let total = match *spec {
            PriorSpec::Normal { mean, variance } => {
                let w = 12.0 * variance.sqrt();
                simpson(|x| spec.log_pdf(x).exp(), mean - w, mean + w, 20_000)
            }
            PriorSpec::LogNormal { log_mean, log_variance } => {
                let w = 12.0 * log_variance.sqrt();
                simpson(|x| spec.log_pdf(x).exp(), 1e-300, (log_mean + w).exp(), 200_000)
            }
        };
        assert!((total - 1.0).abs() < 1e-6, "{name:?} integrates to {total}");
    }
}

#[test]
fn samples_pass_a_kolmogorov_smirnov_test() {
    let n = 10_000;
    // 1% critical value of the one-sample statistic
    let critical = 1.628 / (n as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (name, spec) in PriorSet::standard().entries() {
        let xs: Vec<f64> = (0..n).map(|_| spec.sample(&mut rng)).collect();
        let d = match *spec {
            PriorSpec::Normal { mean, variance } => {
                let dist = Normal::new(mean, variance.sqrt()).unwrap();
                ks_statistic(xs, |x| dist.cdf(x))
            }
            PriorSpec::LogNormal { log_mean, log_variance } => {
                let dist = LogNormal::new(log_mean, log_variance.sqrt()).unwrap();
                ks_statistic(xs, |x| dist.cdf(x))
            }
        };
        assert!(d < critical, "{name:?}: D = {d} >= {critical}");
    }
}

#[test]
fn unconstrained_density_of_the_log_prior_is_normalized() {
    let set = PriorSet::new(vec![(ParamName::DampingRatio, PriorSpec::LogNormal { log_mean: 2.0, log_variance: 0.1 })]);
    let base = Params::reference();
    let total = simpson(|u| set.log_density_unconstrained(&[u], &base).exp(), 2.0 - 5.0, 2.0 + 5.0, 20_000);
    assert!((total - 1.0).abs() < 1e-6, "{total}");
}

proptest! {
    #[test]
    fn normal_marginals_integrate_to_one(mean in -20.0f64..20.0, variance in 0.01f64..50.0) {
        let spec = PriorSpec::Normal { mean, variance };
        let w = 12.0 * variance.sqrt();
        let total = simpson(|x| spec.log_pdf(x).exp(), mean - w, mean + w, 20_000);
        prop_assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn transforms_round_trip(f in -50.0f64..50.0, h in -5.0f64..5.0, c in 1e-3f64..1e3, b in -50.0f64..50.0) {
        let set = PriorSet::standard();
        let p = Params::new(f, h, c, b);
        let u = set.to_unconstrained(&p).unwrap();
        let back = set.from_unconstrained(&u, &Params::reference());
        for (x, y) in p.to_array().iter().zip(back.to_array()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
        prop_assert!((set.log_jacobian(&u) - c.ln()).abs() < 1e-12 * c.ln().abs().max(1.0));
    }

    #[test]
    fn nonpositive_values_leave_the_log_support(c in -10.0f64..=0.0) {
        let set = PriorSet::standard();
        let p = Params::reference().with(ParamName::DampingRatio, c);
        prop_assert!(set.to_unconstrained(&p).is_err());
        prop_assert_eq!(set.log_density(&p), f64::NEG_INFINITY);
    }
}

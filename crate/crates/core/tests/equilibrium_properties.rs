use ipn_core::equilibrium::{Equilibrium, ModelParams, ScanOptions, SolverOptions, Spike};
use ipn_core::measure::AtomicMeasure;
use ipn_core::spikes::{classify, tau_value, tau_via_outlier};
use num_complex::Complex64;
use proptest::prelude::*;

fn two_atom(sigma: f64, c: f64) -> ModelParams {
    ModelParams::new(sigma, c, AtomicMeasure::new([(1.0, 0.5), (3.0, 0.5)]).unwrap(), vec![]).unwrap()
}

fn mp_density(x: f64, c: f64) -> f64 {
    // Marchenko–Pastur law of ratio c with unit variance, density part.
    let (a, b) = ((1.0 - c.sqrt()).powi(2), (1.0 + c.sqrt()).powi(2));
    if x <= a || x >= b {
        return 0.0;
    }
    ((b - x) * (x - a)).sqrt() / (2.0 * std::f64::consts::PI * c * x)
}

#[test]
fn density_matches_marchenko_pastur() {
    for c in [0.5, 1.0] {
        let p = ModelParams::new(1.0, c, AtomicMeasure::dirac(0.0).unwrap(), vec![]).unwrap();
        let eq = Equilibrium::new(p, &ScanOptions::default()).unwrap();
        let xs = [0.5, 1.0, 2.0, 2.5];
        let ds = eq.density_grid(&xs, 1e-6).unwrap();
        for (x, d) in xs.iter().zip(ds) {
            let d = d.unwrap();
            assert!((d - mp_density(*x, c)).abs() < 1e-4, "c {c} x {x}: {d} vs {}", mp_density(*x, c));
        }
    }
    let p = ModelParams::new(1.0, 1.0, AtomicMeasure::dirac(0.0).unwrap(), vec![]).unwrap();
    let eq = Equilibrium::new(p, &ScanOptions::default()).unwrap();
    let d = eq.density_grid(&[2.0], 1e-6).unwrap()[0].unwrap();
    assert!((d - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-5);
}

#[test]
fn density_normalizes_to_one() {
    let eq = Equilibrium::new(two_atom(0.8, 0.5), &ScanOptions::default()).unwrap();
    let lo = eq.profile().left_edge() - 0.1;
    let hi = eq.profile().right_edge() + 0.1;
    let k = 10_000;
    let dx = (hi - lo) / k as f64;
    let xs: Vec<f64> = (0..k).map(|i| lo + (i as f64 + 0.5) * dx).collect();
    let mass: f64 = eq.density_grid(&xs, 1e-6).unwrap().into_iter().map(|d| d.unwrap() * dx).sum();
    assert!((mass - 1.0).abs() < 0.01, "mass {mass}");
}

#[test]
fn density_vanishes_in_gaps() {
    let eq = Equilibrium::new(two_atom(0.3, 0.5), &ScanOptions::default()).unwrap();
    let inner = eq.profile().gap_map.iter().find(|p| p.gap.is_bounded()).expect("an inner gap");
    let mid = inner.gap.midpoint();
    for eta in [1e-3, 1e-6] {
        let d = eq.density_grid(&[mid], eta).unwrap()[0].unwrap();
        assert!(d >= -1e-12 && d < 10.0 * eta, "eta {eta}: {d}");
    }
}

#[test]
fn small_noise_recovers_nu() {
    let p =
        ModelParams::new(1e-8, 0.5, AtomicMeasure::new([(1.0, 0.5), (3.0, 0.5)]).unwrap(), vec![]).unwrap();
    let eq = Equilibrium::new(p.clone(), &ScanOptions::default()).unwrap();
    let z = Complex64::new(1.0, 1.0);
    let g = eq.g_mu(z).unwrap();
    assert!((g - p.nu().stieltjes(z).unwrap()).norm() < 1e-6);
}

#[test]
fn large_spike_overlap_tends_to_one() {
    let p = two_atom(1.0, 0.5);
    let tau = tau_value(&p, 1e6).unwrap();
    assert!((tau - 1.0).abs() < 1e-5);
}

#[test]
fn rho_increases_with_theta() {
    let p = two_atom(1.0, 0.5);
    let thetas = [5.0, 6.0, 8.0, 12.0, 20.0];
    let rhos: Vec<f64> = thetas.iter().map(|&t| p.phi(t).unwrap()).collect();
    assert!(rhos.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn omega_derivative_matches_finite_difference() {
    let eq = Equilibrium::new(two_atom(1.0, 0.5), &ScanOptions::default()).unwrap();
    let x = eq.profile().right_edge() + 1.0;
    let h = 1e-5;
    let fd = (eq.omega_on_gap(x + h).unwrap() - eq.omega_on_gap(x - h).unwrap()) / (2.0 * h);
    let exact = eq.omega_prime_on_gap(x).unwrap();
    assert!((fd - exact).abs() < 1e-6 * exact.abs().max(1.0));
}

#[test]
fn classification_of_spikes_around_the_threshold() {
    let spikes = vec![Spike::new(0.6, 1), Spike::new(0.8, 1), Spike::new(3.0, 2)];
    let p = ModelParams::new(1.0, 0.5, AtomicMeasure::dirac(0.0).unwrap(), spikes).unwrap();
    let eq = Equilibrium::new(p, &ScanOptions::default()).unwrap();
    let preds = classify(&eq, None).unwrap();
    let flags: Vec<bool> = preds.iter().map(|p| p.in_outlier_set).collect();
    assert_eq!(flags, vec![true, true, false]);
    assert_eq!(preds[0].aggregate_tau.unwrap(), 2.0 * preds[0].tau.unwrap());
    assert_eq!(preds[1].rank_range, (3, 3));
}

fn config() -> impl Strategy<Value = (f64, f64, f64, f64)> {
    (0.2f64..2.0, 0.1f64..1.0, 0.1f64..3.0, 1.0f64..5.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn resolvent_factor_bound((sigma, c, re, im) in config()) {
        let eq = Equilibrium::new(two_atom(sigma, c), &ScanOptions::default()).unwrap();
        let z = Complex64::new(re, im * 0.3);
        let g = eq.g_mu(z).unwrap();
        let lhs = 1.0 / (1.0 - sigma * sigma * c * g).norm();
        prop_assert!(lhs <= z.norm() / z.im + 1e-12);
        prop_assert!(g.im < 0.0);
        prop_assert!(g.norm() <= 1.0 / z.im + 1e-12);
        let gc = eq.g_mu(z.conj()).unwrap();
        prop_assert!((gc - g.conj()).norm() < 1e-14);
    }

    #[test]
    fn fixed_point_residual_is_small((sigma, c, re, im) in config()) {
        let p = two_atom(sigma, c);
        let eq = Equilibrium::new(p.clone(), &ScanOptions::default()).unwrap();
        let z = Complex64::new(re, im * 0.1);
        let g = eq.g_mu(z).unwrap();
        let r = (g - p.fixed_point_map(z, g)).norm();
        prop_assert!(r < 1e-10 * g.norm().max(1.0));
    }

    #[test]
    fn phi_is_increasing_on_components(sigma in 0.2f64..1.5, c in 0.1f64..1.0) {
        let p = two_atom(sigma, c);
        let eq = Equilibrium::new(p.clone(), &ScanOptions::default()).unwrap();
        for comp in &eq.profile().admissible {
            let lo = if comp.lo.is_finite() { comp.lo } else { comp.hi - 20.0 };
            let hi = if comp.hi.is_finite() { comp.hi } else { comp.lo + 20.0 };
            let xs: Vec<f64> = (1..100).map(|k| lo + (hi - lo) * k as f64 / 100.0).collect();
            let ys: Vec<f64> = xs.iter().map(|&x| p.phi(x).unwrap()).collect();
            prop_assert!(ys.windows(2).all(|w| w[0] < w[1]), "component {comp:?}");
        }
    }

    #[test]
    fn gap_routes_agree(sigma in 0.2f64..1.5, c in 0.1f64..1.0, offset in 0.05f64..10.0) {
        let eq = Equilibrium::new(two_atom(sigma, c), &ScanOptions::default()).unwrap();
        let x = eq.profile().right_edge() + offset;
        let a = eq.omega_on_gap(x).unwrap();
        let b = eq.omega_direct(x).unwrap();
        prop_assert!((a - b).abs() < 1e-8 * (1.0 + a.abs()));
        let g_gap = eq.g_mu_on_gap(x).unwrap();
        let g_near = eq.g_mu(Complex64::new(x, 1e-9)).unwrap();
        prop_assert!((g_gap - g_near.re).abs() < 1e-6);
    }

    #[test]
    fn omega_is_increasing_on_the_right_gap(sigma in 0.2f64..1.5, c in 0.1f64..1.0) {
        let eq = Equilibrium::new(two_atom(sigma, c), &ScanOptions::default()).unwrap();
        let e = eq.profile().right_edge();
        let ws: Vec<f64> = (1..50).map(|k| eq.omega_on_gap(e + 0.1 * k as f64).unwrap()).collect();
        prop_assert!(ws.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn overlap_routes_agree(sigma in 0.2f64..1.5, c in 0.1f64..1.0, extra in 0.5f64..20.0) {
        let p = two_atom(sigma, c);
        let eq = Equilibrium::new(p.clone(), &ScanOptions::default()).unwrap();
        let theta = 3.0 + extra;
        prop_assume!(p.is_admissible(theta).unwrap());
        let a = tau_value(&p, theta).unwrap();
        let b = tau_via_outlier(&eq, theta).unwrap();
        prop_assert!((a - b).abs() < 1e-8);
        prop_assert!(a > 0.0 && a < 1.0);
    }
}

#[test]
fn tight_solver_settings_are_respected() {
    let eq = Equilibrium::new(two_atom(1.0, 0.5), &ScanOptions::default())
        .unwrap()
        .with_solver(SolverOptions { tol: 1e-14, max_iter: 200_000, damping: 0.5 });
    let z = Complex64::new(2.0, 0.01);
    let g = eq.g_mu(z).unwrap();
    let r = (g - eq.params().fixed_point_map(z, g)).norm();
    assert!(r < 1e-13);
}

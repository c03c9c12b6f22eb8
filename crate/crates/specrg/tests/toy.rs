mod common;

use common::{params, Setup};
use specrg::fockspace::GridSpec;
use specrg::hamiltonians::{build_hlin, PhysParams};
use specrg::linalg::lowest_eigenpair;
use specrg::scalarflows::{omega_bound_envelope, FlowParams};
use specrg::toyoracle::{discrete_bogoliubov, divergence_fit, elin_quadrature, omega_lognorm_quadrature, QuadSpec};
use specrg::SpecRgError;

fn toy_setup(g: f64, p: f64) -> (Setup, PhysParams) {
    let prm = PhysParams { g, p_abs: p, p_c: 0.5, sigma0: 0.1, ..Default::default() };
    let spec = GridSpec { k0: 0.5, ..GridSpec::axis_pairs(1, 1, 2, 10) };
    (Setup::new(&spec, &prm), prm)
}

fn factorial(n: u8) -> f64 {
    (1..=n as u32).map(f64::from).product()
}

#[test]
fn truncated_ground_state_is_the_coherent_state() {
    let (s, prm) = toy_setup(0.5, 0.4);
    let bog = discrete_bogoliubov(&s.grid, &prm).unwrap();
    let (_, psi) = lowest_eigenpair(&build_hlin(&s.grid, &s.basis, &prm, prm.sigma0).unwrap());
    // the ground state displaces mode j by -c~_j / omega_j
    let alpha: Vec<f64> = bog.displacements.iter().map(|d| -d).collect();
    let norm = (-0.5 * alpha.iter().map(|a| a * a).sum::<f64>()).exp();
    let mut overlap = 0.0;
    for i in 0..s.basis.dim() {
        let occ = s.basis.state(i);
        let amp: f64 = occ.iter().zip(&alpha).map(|(&n, a)| a.powi(n as i32) / factorial(n).sqrt()).product();
        overlap += psi[i] * amp * norm;
    }
    assert!(overlap.abs() >= 1.0 - 1e-8, "{overlap}");
    // vacuum weight of the normalized state is exp(-sum alpha^2)
    let log_norm = -2.0 * psi[s.basis.vacuum()].abs().ln();
    assert!((log_norm - bog.log_norm_sq).abs() <= 1e-8 * bog.log_norm_sq, "{log_norm} {}", bog.log_norm_sq);
    assert!(bog.log_norm_sq > 1e-3);
}

#[test]
fn linear_energy_scales_exactly_with_g_squared() {
    let q = QuadSpec::default();
    let h = 1e-3;
    let derivs = |g: f64| {
        let e = |p: f64| elin_quadrature(&PhysParams { g, p_abs: p, p_c: 0.5, ..Default::default() }, &q).unwrap();
        let p = 0.1;
        [e(p), (e(p + h) - e(p - h)) / (2.0 * h), (e(p + h) - 2.0 * e(p) + e(p - h)) / (h * h)]
    };
    let (a, b) = (derivs(0.01), derivs(0.02));
    for k in 0..3 {
        let (ca, cb) = (a[k] / 1e-4, b[k] / 4e-4);
        assert!((ca - cb).abs() <= 1e-4 * ca.abs(), "order {k}: {ca} {cb}");
    }
    assert!(a[0] < 0.0 && a[1] < 0.0);
}

/// `int_{-1}^{1} (1 - c^2) / (1 - p c)^2 dc` by a fine midpoint sum.
fn angular(p: f64) -> f64 {
    let n = 200_000;
    let h = 2.0 / n as f64;
    (0..n)
        .map(|i| {
            let c = -1.0 + (i as f64 + 0.5) * h;
            (1.0 - c * c) / (1.0 - p * c).powi(2)
        })
        .sum::<f64>()
        * h
}

#[test]
fn divergence_slope_is_the_angular_integral() {
    // below the infrared edge kbar^2 / r integrates to 1/2, so only the
    // range [sigma0, 1] grows and the slope is 2 pi g^2 p^2 times the
    // angular factor
    let sigmas: Vec<f64> = (6..=14).map(|k| 2f64.powi(-k)).collect();
    for (g, p) in [(1e-3, 0.05), (0.2, 0.04)] {
        let d = divergence_fit(&params(g, p), &sigmas, &QuadSpec::default()).unwrap();
        let want = 2.0 * std::f64::consts::PI * (g * p).powi(2) * angular(p);
        assert!((d.fit.slope / want - 1.0).abs() <= 1e-5, "{} vs {want}", d.fit.slope);
        assert!(d.fit.r2 >= 0.999_999);
    }
}

#[test]
fn norm_stays_inside_calibrated_envelopes() {
    let (g, p) = (0.2, 0.05);
    let q = QuadSpec::default();
    let sigma_ref = 2f64.powi(-4);
    let norm = |s: f64| omega_lognorm_quadrature(&PhysParams { g, p_abs: p, sigma0: s, ..Default::default() }, &q).unwrap().exp();
    let env = omega_bound_envelope(&FlowParams::new(g, p, sigma_ref, 0.5).unwrap()).calibrated(sigma_ref, norm(sigma_ref));
    for k in 5..=20 {
        let s = 2f64.powi(-k);
        let n = norm(s);
        assert!(env.lower(s) <= n && n <= env.upper(s), "sigma0 2^-{k}: {} {n} {}", env.lower(s), env.upper(s));
    }
}

#[test]
fn sigma_list_must_be_geometric() {
    let q = QuadSpec::default();
    let r = divergence_fit(&params(1e-3, 0.05), &[0.1, 0.05, 0.02, 0.01, 0.005], &q);
    assert!(matches!(r, Err(SpecRgError::InvalidGrid(_))));
    let r = divergence_fit(&params(1e-3, 0.05), &[0.1, 0.05, 0.025], &q);
    assert!(matches!(r, Err(SpecRgError::InvalidGrid(_))));
    assert!(QuadSpec { radial_panels: 2, ..QuadSpec::default() }.validate().is_err());
}

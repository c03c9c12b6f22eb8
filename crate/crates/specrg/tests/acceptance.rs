//! The eleven acceptance criteria, one line each on stderr.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{dense_ground, desk, elin_riemann, lognorm_riemann, params, rel, Setup};
use specrg::feshbach::{
    concatenation_check, derivation_formula, feshbach_suite, random_instance, second_derivation_formula, smooth_feshbach,
    CutoffPair, DerivationData, RampProfile, Scalar, TauSpec,
};
use specrg::fockspace::{GridSpec, Vec3};
use specrg::hamiltonians::{build_hlin, PhysParams};
use specrg::rgflow::{direct_scale_flow, ground_state_energy, ground_state_vector, iterated_flow, momentum_derivatives, FlowOptions};
use specrg::scalarflows::{eps_table, FlowParams, EPS_CONTRACTION};
use specrg::toyoracle::{continuum_report, discrete_bogoliubov, divergence_fit, QuadSpec};
use specrg::ward::{wt_propagation_check, wt_residual, LadderVariant, WTDerivation};

type Outcome = (bool, String);

fn verdict(ok: bool, detail: String) -> Outcome {
    (ok, detail)
}

// ---------------------------------------------------------------- 1

fn c1_identity_suite() -> Outcome {
    let r = feshbach_suite(200, 7).unwrap();
    let get = |k: &str| r.get(k).unwrap().max_residual;
    let detail = format!(
        "reconstruction {:.1e}, inverse {:.1e}, factored {:.1e}, checks {}/{}",
        get("reconstruction").max(get("degenerate_reconstruction")),
        get("inverse_formula"),
        get("factored_forms"),
        r.checks.iter().filter(|c| c.pass).count(),
        r.checks.len()
    );
    verdict(r.passed(), detail)
}

// ---------------------------------------------------------------- 2

fn c2_concatenation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut control = f64::INFINITY;
    for _ in 0..45 {
        let dim = rng.gen_range(8..=40);
        let inst = random_instance(&mut rng, dim);
        let z = Complex64::new(rng.gen_range(-0.3..0.3), rng.gen_range(0.1..0.5));
        let mut h = inst.h.clone();
        for i in 0..dim {
            h[(i, i)] -= z;
        }
        let tau = TauSpec::new(1.0, z);
        let cut1 = inst.cutoff();
        let cut2 = CutoffPair::new(&inst.hf, inst.profile.scaled(0.5));
        worst = worst.max(concatenation_check(&h, &inst.hf, &cut1, &tau, &cut2, &tau, true).unwrap().max());
        control = control.min(concatenation_check(&h, &inst.hf, &cut1, &tau, &cut2, &tau, false).unwrap().f);
    }
    let physical = [
        (GridSpec::axis_pairs(3, 1, 2, 2), 1e-3, 0.05),
        (GridSpec::axis_pairs(3, 1, 2, 2), 0.05, 0.0),
        (GridSpec::axis_pairs(3, 1, 2, 3), 0.1, 0.03),
        (common::desk_spec(), 1e-3, 0.05),
        (common::desk_spec(), 0.05, 0.05),
    ];
    for (spec, g, p) in physical {
        let s = Setup::new(&spec, &params(g, p));
        let z = s.phys.e_bare - 0.02;
        let mut h = s.phys.h.clone();
        for i in 0..h.nrows() {
            h[(i, i)] -= z;
        }
        let hf = s.phys.hf();
        let tau = TauSpec::new(1.0, z - s.phys.e_bare);
        let cut1 = CutoffPair::new(hf, RampProfile::unit());
        let cut2 = CutoffPair::new(hf, RampProfile::unit().scaled(0.5));
        worst = worst.max(concatenation_check(&h, hf, &cut1, &tau, &cut2, &tau, true).unwrap().max());
        control = control.min(concatenation_check(&h, hf, &cut1, &tau, &cut2, &tau, false).unwrap().f);
    }
    verdict(worst <= 1e-10 && control >= 1e-3, format!("matched {worst:.1e} over 50 instances, mismatched control {control:.1e}"))
}

// ---------------------------------------------------------------- 3

struct Inputs<T: Scalar> {
    h: DMatrix<T>,
    hf: Vec<f64>,
    tau: TauSpec<T>,
    cut: CutoffPair,
}

fn feshbach_f<T: Scalar>(i: &Inputs<T>) -> DMatrix<T> {
    smooth_feshbach(&i.h, &i.tau, &i.cut, &i.hf).unwrap().f
}

fn fd_first<T: Scalar>(at: impl Fn(f64) -> Inputs<T>, d: impl Fn(&Inputs<T>) -> DerivationData<T>) -> f64 {
    let step = 1e-4;
    let base = at(0.0);
    let trip = smooth_feshbach(&base.h, &base.tau, &base.cut, &base.hf).unwrap();
    let formula = derivation_formula(&trip, &base.cut, &d(&base)).unwrap();
    let fd = (feshbach_f(&at(step)) - feshbach_f(&at(-step))) * T::from_real(0.5 / step);
    (&formula - fd).norm() / formula.norm()
}

fn fd_second<T: Scalar>(at: impl Fn(f64, f64) -> Inputs<T>, d1: &DMatrix<T>, d2: &DMatrix<T>, d12: &DMatrix<T>) -> f64 {
    let step = 1e-3;
    let base = at(0.0, 0.0);
    let trip = smooth_feshbach(&base.h, &base.tau, &base.cut, &base.hf).unwrap();
    let formula = second_derivation_formula(&trip, &base.cut, d1, d2, d12);
    let f = |a: f64, b: f64| feshbach_f(&at(a, b));
    let fd = (f(step, step) - f(step, -step) - f(-step, step) + f(-step, -step)) * T::from_real(0.25 / (step * step));
    (&formula - fd).norm() / formula.norm()
}

fn shift_diag<T: Scalar>(h: &DMatrix<T>, t: T) -> DMatrix<T> {
    let mut h = h.clone();
    for i in 0..h.nrows() {
        h[(i, i)] += t;
    }
    h
}

fn random_hermitian(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<Complex64> {
    let a = DMatrix::from_fn(n, n, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    let h = &a + a.adjoint();
    let s = h.norm();
    h / Complex64::new(s, 0.0)
}

fn zero_data<T: Scalar>(n: usize) -> DerivationData<T> {
    DerivationData { dh: DMatrix::zeros(n, n), dtau: vec![T::zero(); n], dchi: vec![0.0; n], dchi_bar: vec![0.0; n] }
}

/// Six families on one random instance: an interaction direction, a shift
/// of the ramp, the two `tau` parameters, a joint `H_f` shift and a mixed
/// second derivative.
fn random_families(seed: u64, dim: usize, which: &[usize]) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = random_instance(&mut rng, dim);
    let z = Complex64::new(0.1, 0.3);
    let h0 = shift_diag(&inst.h, -z);
    let (v, v2, v12) = (random_hermitian(&mut rng, dim), random_hermitian(&mut rng, dim), random_hermitian(&mut rng, dim));
    let prof = inst.profile;
    let hf = inst.hf.clone();
    let plain = |h: DMatrix<Complex64>, tau: TauSpec<Complex64>, cut: CutoffPair, hf: Vec<f64>| Inputs { h, hf, tau, cut };
    let tau0 = TauSpec::new(1.0, z);
    let mut out = Vec::new();
    for &k in which {
        let (name, e) = match k {
            0 => (
                "interaction",
                fd_first(
                    |t| plain(&h0 + &v * Complex64::new(t, 0.0), tau0, CutoffPair::new(&hf, prof), hf.clone()),
                    |_| DerivationData { dh: v.clone(), ..zero_data(dim) },
                ),
            ),
            1 => (
                "ramp shift",
                fd_first(
                    |t| plain(h0.clone(), tau0, CutoffPair::new(&hf, RampProfile { lo: prof.lo + t, hi: prof.hi + t }), hf.clone()),
                    |b| DerivationData {
                        dchi: b.cut.dchi.iter().map(|x| -x).collect(),
                        dchi_bar: b.cut.dchi_bar.iter().map(|x| -x).collect(),
                        ..zero_data(dim)
                    },
                ),
            ),
            2 => (
                "tau coefficient",
                fd_first(
                    |t| plain(h0.clone(), TauSpec::new(1.0 + t, z), CutoffPair::new(&hf, prof), hf.clone()),
                    |_| DerivationData { dtau: hf.iter().map(|&x| Complex64::new(x, 0.0)).collect(), ..zero_data(dim) },
                ),
            ),
            3 => (
                "tau offset",
                fd_first(
                    |t| plain(h0.clone(), TauSpec::new(1.0, z + t), CutoffPair::new(&hf, prof), hf.clone()),
                    |_| DerivationData { dtau: vec![Complex64::new(-1.0, 0.0); dim], ..zero_data(dim) },
                ),
            ),
            4 => (
                "H_f shift",
                fd_first(
                    |t| {
                        let hft: Vec<f64> = hf.iter().map(|x| x + t).collect();
                        plain(shift_diag(&h0, Complex64::new(t, 0.0)), tau0, CutoffPair::new(&hft, prof), hft)
                    },
                    |b| DerivationData {
                        dh: DMatrix::identity(dim, dim),
                        dtau: vec![Complex64::new(1.0, 0.0); dim],
                        dchi: b.cut.dchi.clone(),
                        dchi_bar: b.cut.dchi_bar.clone(),
                    },
                ),
            ),
            _ => (
                "second derivative",
                fd_second(
                    |a, b| {
                        let h = &h0 + &v * Complex64::new(a, 0.0) + &v2 * Complex64::new(b, 0.0) + &v12 * Complex64::new(a * b, 0.0);
                        plain(h, tau0, CutoffPair::new(&hf, prof), hf.clone())
                    },
                    &v,
                    &v2,
                    &v12,
                ),
            ),
        };
        out.push((format!("random {seed}/{dim} {name}"), e));
    }
    out
}

/// Field-momentum shifts and the joint `H_f` shift of the physical
/// Hamiltonian, with a ramp that avoids the shell energies.
fn physical_families(spec: &GridSpec, g: f64, p: f64, which: &[usize]) -> Vec<(String, f64)> {
    let s = Setup::new(spec, &params(g, p));
    let n = s.phys.dim();
    let z = s.phys.e_bare - 0.02;
    let hf = s.phys.hf().to_vec();
    let prof = RampProfile::new(0.6, 0.9).unwrap();
    let tau = TauSpec::new(1.0, z - s.phys.e_bare);
    let at_shift = |shift: Vec3| Inputs {
        h: shift_diag(&s.phys.with_field_shift(&shift, 1.0), -z),
        hf: hf.clone(),
        tau,
        cut: CutoffPair::new(&hf, prof),
    };
    let ez = Vec3::new(0.0, 0.0, 1.0);
    let ed = Vec3::new(1.0, 1.0, 1.0).normalize();
    let ex = Vec3::new(1.0, 0.0, 1.0).normalize();
    let mut out = Vec::new();
    for &k in which {
        let (name, e) = match k {
            0 => ("P_f along e_z", fd_first(|t| at_shift(ez * t), |_| DerivationData { dh: s.phys.d_p_field(&ez), ..zero_data(n) })),
            1 => ("P_f diagonal", fd_first(|t| at_shift(ed * t), |_| DerivationData { dh: s.phys.d_p_field(&ed), ..zero_data(n) })),
            2 => (
                "H_f shift",
                fd_first(
                    |t| {
                        let hft: Vec<f64> = hf.iter().map(|x| x + t).collect();
                        Inputs { h: shift_diag(&s.phys.h, t - z), tau, cut: CutoffPair::new(&hft, prof), hf: hft }
                    },
                    |b| DerivationData { dh: DMatrix::identity(n, n), dtau: vec![1.0; n], dchi: b.cut.dchi.clone(), dchi_bar: b.cut.dchi_bar.clone() },
                ),
            ),
            _ => (
                "P_f second derivative",
                fd_second(
                    |a, b| at_shift(ez * a + ex * b),
                    &s.phys.d_p_field(&ez),
                    &s.phys.d_p_field(&ex),
                    &(DMatrix::identity(n, n) * ez.dot(&ex)),
                ),
            ),
        };
        out.push((format!("physical dim {n} g {g} p {p} {name}"), e));
    }
    out
}

fn c3_derivations() -> Outcome {
    let mut all = Vec::new();
    all.extend(random_families(1, 24, &[0, 1, 2, 3, 4, 5]));
    all.extend(random_families(2, 36, &[0, 1, 2, 3, 4, 5]));
    all.extend(random_families(3, 40, &[0, 4]));
    all.extend(physical_families(&GridSpec::axis_pairs(3, 1, 2, 2), 0.05, 0.05, &[0, 1, 2, 3]));
    all.extend(physical_families(&common::desk_spec(), 1e-3, 0.05, &[0, 2]));
    let worst = all.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    verdict(all.len() == 20 && worst.1 <= 1e-5, format!("{} families, worst {:.1e} ({})", all.len(), worst.1, worst.0))
}

// ---------------------------------------------------------------- 4, 9

fn c4_ground_energy() -> Outcome {
    let s = desk(&PhysParams::default());
    let opts = FlowOptions::default();
    let gs = ground_state_energy(&s.sys(), None, &opts).unwrap();
    let dense = dense_ground(&s.phys.h);
    let v = ground_state_vector(&s.sys(), gs.e0, gs.n_final, &opts).unwrap();
    let e = rel(gs.e0, dense);
    verdict(
        e <= 1e-8 && v.residual <= 1e-7,
        format!("dim {}, E0 {:.12e}, relative error {e:.1e}, eigen-residual {:.1e}", s.phys.dim(), gs.e0, v.residual),
    )
}

fn c9_marginal() -> Outcome {
    let opts = FlowOptions::default();
    let a_trace = |g: f64, p: f64| {
        let s = desk(&params(g, p));
        let e0 = ground_state_energy(&s.sys(), None, &opts).unwrap().e0;
        direct_scale_flow(&s.sys(), e0, s.grid.shells(), &opts).unwrap().states.iter().map(|st| st.a_n).collect::<Vec<_>>()
    };
    let (g, p) = (1e-3, 0.05);
    let band = (2.0 * g as f64).cbrt();
    let dev = a_trace(g, p).iter().map(|a| (a + p).abs()).fold(0.0, f64::max);
    let free = a_trace(0.0, p);
    let free_exact = free.iter().all(|&a| a == -p);
    let still = a_trace(g, 0.0).iter().map(|a| a.abs()).fold(0.0, f64::max);
    verdict(
        dev <= band && free_exact && still <= 1e-12,
        format!("max |a_n + |p|| {dev:.1e} <= {band:.3}, g = 0 exact: {free_exact}, p = 0 max |a_n| {still:.1e}"),
    )
}

// ---------------------------------------------------------------- 5

fn c5_direct_vs_iterated() -> Outcome {
    let opts = FlowOptions::default();
    let mut worst: f64 = 0.0;
    for (g, p) in [(1e-3, 0.05), (1e-2, 0.03)] {
        let s = desk(&params(g, p));
        let e0 = ground_state_energy(&s.sys(), None, &opts).unwrap().e0;
        for z in [e0, e0 - 1e-3] {
            let d = direct_scale_flow(&s.sys(), z, 3, &opts).unwrap();
            let it = iterated_flow(&s.sys(), z, 3, &opts).unwrap();
            for (a, b) in d.states.iter().zip(&it.states) {
                worst = worst.max((a.z_n - b.z_n).abs()).max((a.a_n - b.a_n).abs()).max((a.d_hf - b.d_hf).abs());
            }
        }
    }
    verdict(worst <= 1e-8, format!("max difference in z_n, a_n, dHf for n <= 3: {worst:.1e}"))
}

// ---------------------------------------------------------------- 6

fn c6_toy() -> Outcome {
    let mut disc: f64 = 0.0;
    for (k0, g, p) in [(1.0, 1e-3, 0.05), (0.5, 0.05, 0.05), (0.25, 0.2, 0.3)] {
        let spec = GridSpec { k0, ..GridSpec::axis_pairs(1, 1, 1, 8) };
        let prm = PhysParams { g, p_abs: p, p_c: 0.5, sigma0: 0.1, ..Default::default() };
        let s = Setup::new(&spec, &prm);
        assert_eq!(s.grid.len(), 2);
        let bog = discrete_bogoliubov(&s.grid, &prm).unwrap();
        assert!(bog.e_lin < 0.0);
        let dense = dense_ground(&build_hlin(&s.grid, &s.basis, &prm, prm.sigma0).unwrap());
        disc = disc.max(rel(bog.e_lin, dense));
    }
    let mut cont: f64 = 0.0;
    for prm in [params(1e-3, 0.05), PhysParams { sigma0: 2f64.powi(-6), ..params(0.1, 0.03) }] {
        let q = continuum_report(&prm, &QuadSpec::default()).unwrap();
        cont = cont.max(rel(q.e_lin, elin_riemann(&prm, 1000))).max(rel(q.log_norm_sq, lognorm_riemann(&prm, 1000)));
    }
    verdict(disc <= 1e-6 && cont <= 1e-4, format!("2-mode Bogoliubov vs dense {disc:.1e}, quadrature vs 10^6-point sum {cont:.1e}"))
}

// ---------------------------------------------------------------- 7

fn c7_divergence() -> Outcome {
    let sigmas: Vec<f64> = (6..=14).map(|k| 2f64.powi(-k)).collect();
    let q = QuadSpec::default();
    let fit = |g: f64, p: f64| divergence_fit(&params(g, p), &sigmas, &q).unwrap().fit;
    let base = fit(1e-3, 0.025);
    let dg = fit(2e-3, 0.025);
    let dp = fit(1e-3, 0.05);
    let zero = fit(1e-3, 0.0);
    let rg = dg.slope / base.slope;
    let rp = dp.slope / base.slope;
    let r2 = base.r2.min(dg.r2).min(dp.r2);
    let ok = r2 >= 0.999 && base.slope > 0.0 && !(zero.slope > 0.0) && (rg / 4.0 - 1.0).abs() <= 0.2 && (rp / 4.0 - 1.0).abs() <= 0.2;
    verdict(ok, format!("R^2 {r2:.6}, slope {:.3e}, p = 0 slope {:.1e}, ratios g {rg:.3} p {rp:.3}", base.slope, zero.slope))
}

// ---------------------------------------------------------------- 8

fn c8_mass_bound() -> Outcome {
    let opts = FlowOptions::default();
    let p_grid: Vec<f64> = (0..6).map(|i| 0.01 * i as f64).collect();
    let mut rows = Vec::new();
    for g in [4e-3, 2e-3, 1e-3] {
        let s = desk(&params(g, 0.0));
        rows.push(momentum_derivatives(&s.grid, &s.basis, &s.phys, &p_grid, None, &opts).unwrap());
    }
    let d2_max = rows.iter().flatten().map(|r| r.d2_reduced_fd).fold(f64::NEG_INFINITY, f64::max);
    let routes = rows.iter().flatten().map(|r| (r.de0_formula - r.de0_fd).abs()).fold(0.0, f64::max);
    let beta = |r: &specrg::rgflow::MomentumRow| [r.e0_reduced.abs(), (r.de0_fd - r.p).abs(), r.d2_reduced_fd.abs()];
    let mut monotone = true;
    let mut small = true;
    for w in rows.windows(2) {
        for (a, b) in w[0].iter().zip(&w[1]) {
            let (ba, bb) = (beta(a), beta(b));
            for k in 0..3 {
                monotone &= if a.p == 0.0 && k == 1 { bb[k] <= ba[k] } else { bb[k] < ba[k] };
            }
        }
    }
    for (r, g) in rows.iter().zip([4e-3, 2e-3, 1e-3]) {
        for row in r {
            small &= beta(row).iter().all(|&x| x <= g);
        }
    }
    let ok = d2_max <= 1e-8 && monotone && small && routes <= 1e-5;
    verdict(ok, format!("max d2(E0 - p^2/2) {d2_max:.2e}, monotone under g-halving {monotone}, small {small}, routes {routes:.1e}"))
}

// ---------------------------------------------------------------- 10

fn wt_setup(shells: usize, g: f64) -> Setup {
    let prm = PhysParams { g, sigma0: 0.5, ..params(g, 0.05) };
    Setup::new(&GridSpec::axis_pairs(shells, 1, 2, 3), &prm)
}

fn c10_ward() -> Outcome {
    let g = 0.1;
    let mut coef: f64 = 0.0;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for shells in [3, 4, 5] {
        let s = wt_setup(shells, g);
        for v in [LadderVariant::Annihilation, LadderVariant::Creation] {
            let wt = WTDerivation::softest(&s.grid, v, 0.5, g).unwrap();
            let r = wt_residual(&s.grid, &s.basis, &s.phys, &wt).unwrap();
            coef = coef.max(r.coefficient_residual);
            if v == LadderVariant::Annihilation {
                xs.push(r.k_abs.ln());
                ys.push(r.residual_norm.ln());
            }
        }
    }
    let slope = specrg::fit::fit_line(&xs, &ys).unwrap().slope;
    let mut excess = f64::NEG_INFINITY;
    for shells in [3, 4] {
        let s = wt_setup(shells, g);
        let z = s.phys.e_bare - 0.01;
        let cut = CutoffPair::new(s.phys.hf(), RampProfile::unit().scaled(0.5));
        let tau = TauSpec::new(1.0, 0.01);
        for v in [LadderVariant::Annihilation, LadderVariant::Creation] {
            let wt = WTDerivation::softest(&s.grid, v, 0.5, g).unwrap();
            excess = excess.max(wt_propagation_check(&s.basis, &s.phys, z, &tau, &cut, &wt).unwrap().bound_excess);
        }
    }
    let ok = coef <= 1e-14 && (0.4..=1.1).contains(&slope) && excess <= 1e-8;
    verdict(ok, format!("coefficient cancellation {coef:.1e}, residual slope {slope:.3}, ||D[F]|| - ||D[H]|| ||Q#|| ||Q|| = {excess:.2e}"))
}

// ---------------------------------------------------------------- 11

/// Smallest `N` with `rho^N <= sigma0`, by repeated multiplication.
fn n_sigma_oracle(sigma0: f64, rho: f64) -> usize {
    let mut n = 0;
    let mut r = 1.0;
    while r > sigma0 {
        r *= rho;
        n += 1;
    }
    n.max(1)
}

fn c11_scalar() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for (p, k) in [(0.05, 10), (0.0, 10), (0.05, 60), (0.02, 40)] {
        let fp = FlowParams::new(1e-3, p, 2f64.powi(-k), 0.5).unwrap();
        let nn = fp.n_sigma0();
        ok &= nn == k as usize;
        let table = eps_table(&fp, nn + 10);
        // e_{n+1} = max(17/18 e_n, floor) below N_sigma0, plain contraction above
        let mut e = fp.eps0();
        let mut crossings = 0;
        for w in table.windows(2) {
            let n = w[0].n;
            ok &= rel(w[0].eps_n, e) <= 1e-14;
            e = if n < nn { (EPS_CONTRACTION * e).max(fp.eps_floor()) } else { EPS_CONTRACTION * e };
            let ratio = w[1].eps_n / w[0].eps_n;
            if n < nn {
                let contraction = (ratio - EPS_CONTRACTION).abs() <= 1e-14;
                let frozen = ratio == 1.0;
                if !(contraction || frozen) {
                    crossings += 1;
                    ok &= ratio > EPS_CONTRACTION && ratio < 1.0;
                }
            } else {
                ok &= (ratio - EPS_CONTRACTION).abs() <= 1e-14;
            }
        }
        ok &= crossings <= 1;
        for r in &table {
            ok &= r.lambda_n == 0.5f64.powi(r.n as i32) * 0.5;
        }
        detail.push(format!("N={nn}"));
    }
    for k in 1..=40 {
        for scale in [1.0, 0.7, 0.51] {
            let s = scale * 2f64.powi(-k);
            ok &= FlowParams::new(1e-3, 0.0, s, 0.5).unwrap().n_sigma0() == n_sigma_oracle(s, 0.5);
        }
    }
    verdict(ok, format!("recursion, ratio set, N_sigma0 and lambda_n checked ({})", detail.join(", ")))
}

// ----------------------------------------------------------------

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, u64, fn() -> Outcome); 11] = [
        ("feshbach identity suite", 30, c1_identity_suite),
        ("concatenation", 30, c2_concatenation),
        ("derivation formulas vs finite differences", 60, c3_derivations),
        ("ground energy vs dense diagonalization", 120, c4_ground_energy),
        ("direct vs iterated flow", 120, c5_direct_vs_iterated),
        ("toy model oracle", 60, c6_toy),
        ("infrared divergence fit", 60, c7_divergence),
        ("mass bound and smoothness", 300, c8_mass_bound),
        ("marginal coefficient", 120, c9_marginal),
        ("ward-takahashi", 60, c10_ward),
        ("scalar flow recursion", 1, c11_scalar),
    ];
    let mut failed = Vec::new();
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panicked: {}", msg.unwrap_or_default()))
            }
        };
        let dt = t.elapsed();
        let in_time = dt <= Duration::from_secs(*budget);
        let pass = ok && in_time;
        let line = format!(
            "criterion {:>2} {:<44} {}  {:>7.2} s / {} s  {}",
            i + 1,
            name,
            if pass { "PASS" } else { "FAIL" },
            dt.as_secs_f64(),
            budget,
            detail
        );
        // bypass the test harness capture so every line lands in the log
        writeln!(std::io::stderr(), "{line}").unwrap();
        if !pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

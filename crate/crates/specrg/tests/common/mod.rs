#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::DMatrix;
use specrg::fockspace::{build_basis, FockBasis, GridSpec, ModeGrid};
use specrg::hamiltonians::{build_hps, kappa_bar, kappa_lambda, PhysHamiltonian, PhysParams};
use specrg::rgflow::FlowSystem;

pub struct Setup {
    pub grid: ModeGrid,
    pub basis: FockBasis,
    pub phys: PhysHamiltonian,
}

impl Setup {
    pub fn new(spec: &GridSpec, params: &PhysParams) -> Self {
        Self::with_sigma(spec, params, params.sigma0)
    }

    pub fn with_sigma(spec: &GridSpec, params: &PhysParams, sigma: f64) -> Self {
        let grid = ModeGrid::new(spec).unwrap();
        let basis = build_basis(&grid, spec.n_max).unwrap();
        let phys = build_hps(&grid, &basis, params, sigma).unwrap();
        Setup { grid, basis, phys }
    }

    pub fn sys(&self) -> FlowSystem<'_> {
        FlowSystem { grid: &self.grid, basis: &self.basis, phys: &self.phys }
    }
}

/// Three shells, `±x, ±z`, two polarizations, at most two photons: 24 modes
/// and `1 + 24 + 300 = 325` states.
pub fn desk_spec() -> GridSpec {
    GridSpec::axis_pairs(3, 2, 2, 2)
}

pub fn desk(params: &PhysParams) -> Setup {
    Setup::new(&desk_spec(), params)
}

pub fn params(g: f64, p: f64) -> PhysParams {
    PhysParams { g, p_abs: p, ..Default::default() }
}

/// Lowest eigenvalue from a full symmetric eigendecomposition.
pub fn dense_ground(h: &DMatrix<f64>) -> f64 {
    h.clone().symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn rel(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

/// Product midpoint sum over `[r_min, r_max] x [-1, 1]` in the variables
/// `(log r, cos theta)`.
pub fn riemann(f: impl Fn(f64, f64) -> f64, r_min: f64, r_max: f64, nr: usize, nc: usize) -> f64 {
    let (u0, u1) = (r_min.ln(), r_max.ln());
    let hu = (u1 - u0) / nr as f64;
    let hc = 2.0 / nc as f64;
    let mut total = 0.0;
    for i in 0..nr {
        let r = (u0 + (i as f64 + 0.5) * hu).exp();
        let mut row = 0.0;
        for j in 0..nc {
            let c = -1.0 + (j as f64 + 0.5) * hc;
            row += f(r, c);
        }
        total += row * r;
    }
    total * hu * hc
}

fn cut2(r: f64, p: &PhysParams) -> f64 {
    let k = kappa_bar(r, p.sigma0) * kappa_lambda(r, p.lambda);
    k * k
}

/// `-g^2 p^2 sum_pol int d^3k kbar^2 kL^2 eps_z^2 / (|k| (|k| - p k_z))` with
/// `sum_pol eps_z^2 = 1 - cos^2`.
pub fn elin_riemann(p: &PhysParams, n: usize) -> f64 {
    let pp = p.p_abs;
    let f = |r: f64, c: f64| r * r * cut2(r, p) * (1.0 - c * c) / (r * r * (1.0 - pp * c));
    -(p.g * pp).powi(2) * 2.0 * PI * riemann(f, p.sigma0 * 1e-6, p.lambda, n, n)
}

/// `g^2 p^2 sum_pol int d^3k kbar^2 kL^2 eps_z^2 / (|k| (|k| - p k_z)^2)`.
pub fn lognorm_riemann(p: &PhysParams, n: usize) -> f64 {
    let pp = p.p_abs;
    let f = |r: f64, c: f64| r * r * cut2(r, p) * (1.0 - c * c) / (r * (r * (1.0 - pp * c)).powi(2));
    (p.g * pp).powi(2) * 2.0 * PI * riemann(f, p.sigma0 * 1e-6, p.lambda, n, n)
}

//! Fibre Hamiltonian of the electron at total momentum `p = |p| e_z`.
//!
//! `H = H_f + (p - P_f - g A)^2 / 2` is assembled as
//! `E_bare + T + W1 + W2` with
//!
//! * `E_bare = |p|^2/2 + (g^2/2) sum_j c_j^2`,
//! * `T = H_f - |p| P_f,par + |P_f|^2/2` (diagonal),
//! * `W1 = -g (p - P_f) . A` (Coulomb gauge makes the ordering irrelevant),
//! * `W2 = (g^2/2) :A^2:`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpecRgError};
use crate::fockspace::{field_observables, normal_order, Factor, FieldObservables, FockBasis, ModeGrid, Monomial, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysParams {
    pub g: f64,
    pub p_abs: f64,
    pub p_c: f64,
    pub sigma0: f64,
    #[serde(rename = "Lambda")]
    pub lambda: f64,
    pub rho: f64,
}

impl Default for PhysParams {
    fn default() -> Self {
        PhysParams { g: 1e-3, p_abs: 0.05, p_c: 0.05, sigma0: 2f64.powi(-10), lambda: 2.5, rho: 0.5 }
    }
}

impl PhysParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SpecRgError::InvalidParameters(m));
        if !(self.g >= 0.0) || !self.g.is_finite() {
            return bad(format!("g must be non-negative, got {}", self.g));
        }
        if !(self.p_c > 0.0 && self.p_c < 1.0) {
            return bad(format!("p_c must lie in (0,1), got {}", self.p_c));
        }
        // a negative value is the momentum -|p| e_z, used for parity checks
        if !(self.p_abs.abs() <= self.p_c) {
            return bad(format!("|p| = {} exceeds p_c = {}", self.p_abs.abs(), self.p_c));
        }
        if !(self.sigma0 > 0.0 && self.sigma0 < 1.0) {
            return bad(format!("sigma0 must lie in (0,1), got {}", self.sigma0));
        }
        if !(self.lambda > 2.0 && self.lambda < 3.0) {
            return bad(format!("Lambda must lie in (2,3), got {}", self.lambda));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in (0,1), got {}", self.rho));
        }
        Ok(())
    }
}

/// `3t^2 - 2t^3` clamped to `[0, 1]`.
pub fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Infrared cutoff: 1 above `sigma`, linear `x/sigma` below.
pub fn kappa_bar(x: f64, sigma: f64) -> f64 {
    if x > sigma {
        1.0
    } else {
        x.max(0.0) / sigma
    }
}

/// Ultraviolet cutoff: 1 up to 1, smoothstep ramp down to 0 at `lambda`.
pub fn kappa_lambda(x: f64, lambda: f64) -> f64 {
    1.0 - smoothstep((x - 1.0) / (lambda - 1.0))
}

/// `c_j = kappa_bar(|k_j|) kappa_Lambda(|k_j|) sqrt(w_j / |k_j|)`.
pub fn couplings(grid: &ModeGrid, sigma: f64, lambda: f64) -> Vec<f64> {
    grid.modes
        .iter()
        .map(|m| kappa_bar(m.k_abs, sigma) * kappa_lambda(m.k_abs, lambda) * (m.weight / m.k_abs).sqrt())
        .collect()
}

/// `A_mu = sum_j c_j eps_{j,mu} (a_j^dagger + a_j)` for `mu = x, y, z`.
pub fn a_field(basis: &FockBasis, grid: &ModeGrid, c: &[f64]) -> [DMatrix<f64>; 3] {
    let d = basis.dim();
    let mut out = [DMatrix::zeros(d, d), DMatrix::zeros(d, d), DMatrix::zeros(d, d)];
    for col in 0..d {
        for (j, m) in grid.modes.iter().enumerate() {
            if c[j] == 0.0 {
                continue;
            }
            let mut push = |row: usize, amp: f64| {
                for mu in 0..3 {
                    let e = m.eps[mu];
                    if e != 0.0 {
                        out[mu][(row, col)] += c[j] * e * amp;
                    }
                }
            };
            if let Some((r, a)) = basis.lower(col, j) {
                push(r, a);
            }
            if let Some((r, a)) = basis.raise(col, j) {
                push(r, a);
            }
        }
    }
    out
}

/// `sum_mu :A_mu A_mu:` through Wick ordering of the mode-pair products.
fn normal_ordered_a_squared(basis: &FockBasis, grid: &ModeGrid, c: &[f64]) -> Result<DMatrix<f64>> {
    let mut monos = Vec::new();
    for (i, mi) in grid.modes.iter().enumerate() {
        for (j, mj) in grid.modes.iter().enumerate() {
            let k = c[i] * c[j] * mi.eps.dot(&mj.eps);
            if k == 0.0 {
                continue;
            }
            for fi in [Factor::Create(i), Factor::Annihilate(i)] {
                for fj in [Factor::Create(j), Factor::Annihilate(j)] {
                    monos.push(Monomial { coeff: k, factors: vec![fi.clone(), fj] });
                }
            }
        }
    }
    let mut w = normal_order(&monos, grid, 2)?;
    w.terms.retain(|t| t.bidegree() != (0, 0));
    Ok(w.to_matrix(basis, grid))
}

#[derive(Clone, Debug)]
pub struct PhysHamiltonian {
    pub params: PhysParams,
    pub sigma: f64,
    pub couplings: Vec<f64>,
    pub obs: FieldObservables,
    pub e_bare: f64,
    /// Diagonal of `T`.
    pub t_diag: Vec<f64>,
    pub a: [DMatrix<f64>; 3],
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

fn kinetic(obs: &FieldObservables, p_abs: f64, shift: &Vec3) -> Vec<f64> {
    (0..obs.hf.len())
        .map(|i| {
            let p = Vec3::new(obs.p[0][i], obs.p[1][i], obs.p[2][i]) + shift;
            obs.hf[i] - p_abs * p.z + 0.5 * p.norm_squared()
        })
        .collect()
}

fn linear_coupling(a: &[DMatrix<f64>; 3], obs: &FieldObservables, g: f64, p_abs: f64, shift: &Vec3) -> DMatrix<f64> {
    let d = obs.hf.len();
    let mut w1 = DMatrix::zeros(d, d);
    for mu in 0..3 {
        let pmu = if mu == 2 { p_abs } else { 0.0 };
        let rows: Vec<f64> = (0..d).map(|i| -g * (pmu - obs.p[mu][i] - shift[mu])).collect();
        for c in 0..d {
            for r in 0..d {
                let v = a[mu][(r, c)];
                if v != 0.0 {
                    w1[(r, c)] += rows[r] * v;
                }
            }
        }
    }
    w1
}

impl PhysHamiltonian {
    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn hf(&self) -> &[f64] {
        &self.obs.hf
    }

    /// `d H / d P_f,par = -|p| + P_f,par + g A_par`.
    pub fn d_p_par(&self) -> DMatrix<f64> {
        self.d_p_field(&Vec3::new(0.0, 0.0, 1.0))
    }

    /// `e . d H / d P_f = -e . (p - P_f - g A)`, the derivative along the
    /// shift `P_f -> P_f + theta e`.
    pub fn d_p_field(&self, e: &Vec3) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        for mu in 0..3 {
            if e[mu] == 0.0 {
                continue;
            }
            let pmu = if mu == 2 { self.params.p_abs } else { 0.0 };
            out += &self.a[mu] * (self.params.g * e[mu]);
            for i in 0..d {
                out[(i, i)] += e[mu] * (self.obs.p[mu][i] - pmu);
            }
        }
        out
    }

    /// `d H / d|p| = -d H / d P_f,par`.
    pub fn d_p_abs(&self) -> DMatrix<f64> {
        -self.d_p_par()
    }

    /// Same field and couplings at another momentum along `e_z`. Negative
    /// values stand for momenta along `-e_z`.
    pub fn with_momentum(&self, p_abs: f64) -> Result<PhysHamiltonian> {
        let params = PhysParams { p_abs, ..self.params.clone() };
        if p_abs.abs() > params.p_c {
            return Err(SpecRgError::InvalidParameters(format!("|p| = {} exceeds p_c = {}", p_abs.abs(), params.p_c)));
        }
        let g = params.g;
        let e_bare = 0.5 * p_abs * p_abs + 0.5 * g * g * self.couplings.iter().map(|x| x * x).sum::<f64>();
        let t_diag = kinetic(&self.obs, p_abs, &Vec3::zeros());
        let w1 = linear_coupling(&self.a, &self.obs, g, p_abs, &Vec3::zeros());
        let mut h = &w1 + &self.w2;
        for i in 0..self.dim() {
            h[(i, i)] += e_bare + t_diag[i];
        }
        Ok(PhysHamiltonian { params, e_bare, t_diag, w1, h, ..self.clone() })
    }

    /// Hamiltonian with `P_f -> P_f + theta e` in `T` and `W1`.
    pub fn with_field_shift(&self, e: &Vec3, theta: f64) -> DMatrix<f64> {
        let shift = e * theta;
        let t = kinetic(&self.obs, self.params.p_abs, &shift);
        let w1 = linear_coupling(&self.a, &self.obs, self.params.g, self.params.p_abs, &shift);
        let mut h = w1 + &self.w2;
        for i in 0..self.dim() {
            h[(i, i)] += self.e_bare + t[i];
        }
        h
    }
}

/// Assemble the fibre Hamiltonian with infrared cutoff `sigma`.
pub fn build_hps(grid: &ModeGrid, basis: &FockBasis, params: &PhysParams, sigma: f64) -> Result<PhysHamiltonian> {
    params.validate()?;
    if !(sigma > 0.0) {
        return Err(SpecRgError::InvalidParameters(format!("sigma must be positive, got {sigma}")));
    }
    let obs = field_observables(basis, grid)?;
    let c = couplings(grid, sigma, params.lambda);
    let g = params.g;
    let e_bare = 0.5 * params.p_abs * params.p_abs + 0.5 * g * g * c.iter().map(|x| x * x).sum::<f64>();
    let a = a_field(basis, grid, &c);
    let t_diag = kinetic(&obs, params.p_abs, &Vec3::zeros());
    let w1 = linear_coupling(&a, &obs, g, params.p_abs, &Vec3::zeros());
    let w2 = normal_ordered_a_squared(basis, grid, &c)? * (0.5 * g * g);
    let mut h = &w1 + &w2;
    for i in 0..basis.dim() {
        h[(i, i)] += e_bare + t_diag[i];
    }
    Ok(PhysHamiltonian { params: params.clone(), sigma, couplings: c, obs, e_bare, t_diag, a, w1, w2, h })
}

/// Linearized Hamiltonian `H_f - |p| P_f,par + g |p| A_par`.
pub fn build_hlin(grid: &ModeGrid, basis: &FockBasis, params: &PhysParams, sigma: f64) -> Result<DMatrix<f64>> {
    params.validate()?;
    let obs = field_observables(basis, grid)?;
    let c = couplings(grid, sigma, params.lambda);
    let a = a_field(basis, grid, &c);
    let diag: Vec<f64> = (0..basis.dim()).map(|i| obs.hf[i] - params.p_abs * obs.p[2][i]).collect();
    Ok(DMatrix::from_diagonal(&DVector::from_vec(diag)) + &a[2] * (params.g * params.p_abs))
}

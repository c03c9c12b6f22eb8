//! Exactly solvable linearized model `H_lin = H_f - |p| P_f,par + g |p| A_par`.
//!
//! Each mode is a shifted oscillator with frequency `|k| - |p| k_par` and
//! force `g |p| c eps_par`, so the ground state is a coherent state. In the
//! continuum the azimuthal integral gives `2 pi` and the remaining
//! `(r, cos theta)` integrals are done by adaptive Simpson quadrature. The
//! polarization sum `sum_lambda |eps_par|^2` is `sin^2 theta`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpecRgError};
use crate::fit::{fit_line, LineFit};
use crate::fockspace::ModeGrid;
use crate::hamiltonians::{couplings, kappa_bar, kappa_lambda, PhysParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadSpec {
    /// Initial panels on `[1, Lambda]` and on `[0, sigma0]`; `[sigma0, 1]`
    /// gets one panel per octave on top of that.
    pub radial_panels: usize,
    pub angular_panels: usize,
    /// Subdivision per axis when a panel is refined.
    pub refinement: usize,
    pub tol: f64,
    pub max_depth: usize,
}

impl Default for QuadSpec {
    fn default() -> Self {
        QuadSpec { radial_panels: 8, angular_panels: 8, refinement: 2, tol: 1e-6, max_depth: 24 }
    }
}

impl QuadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.radial_panels < 8 || self.angular_panels < 8 {
            return Err(SpecRgError::InvalidParameters("quadrature needs at least 8 panels per axis".into()));
        }
        if !(self.tol > 0.0) || self.refinement < 2 {
            return Err(SpecRgError::InvalidParameters("quadrature tolerance must be positive, refinement >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyReport {
    pub e_lin: f64,
    pub log_norm_sq: f64,
    /// `c~_j / (|k_j| - |p| k_par,j)`, discrete model only.
    pub displacements: Vec<f64>,
    pub error_estimate: f64,
}

type Integrand<'a> = &'a dyn Fn(f64, f64) -> f64;

fn simpson_rect(f: Integrand, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    let xm = 0.5 * (x0 + x1);
    let ym = 0.5 * (y0 + y1);
    let w = [1.0, 4.0, 1.0];
    let xs = [x0, xm, x1];
    let ys = [y0, ym, y1];
    let mut s = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        for (j, &y) in ys.iter().enumerate() {
            s += w[i] * w[j] * f(x, y);
        }
    }
    s * (x1 - x0) * (y1 - y0) / 36.0
}

struct Adaptive<'a> {
    f: Integrand<'a>,
    split: usize,
    max_depth: usize,
}

impl Adaptive<'_> {
    /// Returns `(value, error estimate)`.
    fn run(&self, x0: f64, x1: f64, y0: f64, y1: f64, whole: f64, tol: f64, depth: usize) -> Result<(f64, f64)> {
        let k = self.split;
        let hx = (x1 - x0) / k as f64;
        let hy = (y1 - y0) / k as f64;
        let mut parts = Vec::with_capacity(k * k);
        for a in 0..k {
            for b in 0..k {
                let (ax, bx) = (x0 + a as f64 * hx, if a + 1 == k { x1 } else { x0 + (a + 1) as f64 * hx });
                let (ay, by) = (y0 + b as f64 * hy, if b + 1 == k { y1 } else { y0 + (b + 1) as f64 * hy });
                parts.push((ax, bx, ay, by, simpson_rect(self.f, ax, bx, ay, by)));
            }
        }
        let fine: f64 = parts.iter().map(|p| p.4).sum();
        let err = (fine - whole).abs() / 15.0;
        if err <= tol {
            return Ok((fine + (fine - whole) / 15.0, err));
        }
        if depth >= self.max_depth {
            return Err(SpecRgError::NonConvergence { what: format!("adaptive Simpson at depth {depth}, error {err:e}") });
        }
        let child_tol = tol / (k as f64).sqrt();
        let mut total = 0.0;
        let mut total_err = 0.0;
        for (ax, bx, ay, by, s) in parts {
            let (v, e) = self.run(ax, bx, ay, by, s, child_tol, depth + 1)?;
            total += v;
            total_err += e;
        }
        Ok((total, total_err))
    }
}

fn radial_breaks(sigma0: f64, lambda: f64, panels: usize) -> Vec<f64> {
    let mut b: Vec<f64> = (0..panels).map(|i| sigma0 * i as f64 / panels as f64).collect();
    let mut r = sigma0;
    while r < 1.0 {
        b.push(r);
        r *= 2.0;
    }
    for i in 0..panels {
        b.push(1.0 + (lambda - 1.0) * i as f64 / panels as f64);
    }
    b.push(lambda);
    b
}

/// Integral of `f(r, c)` over `[0, Lambda] x [-1, 1]`, to relative tolerance
/// `quad.tol` of a first coarse estimate.
fn integrate(f: Integrand, sigma0: f64, lambda: f64, quad: &QuadSpec) -> Result<(f64, f64)> {
    quad.validate()?;
    let rb = radial_breaks(sigma0.min(1.0), lambda, quad.radial_panels);
    let na = quad.angular_panels;
    let cb: Vec<f64> = (0..=na).map(|i| -1.0 + 2.0 * i as f64 / na as f64).collect();
    let mut rects = Vec::new();
    for w in rb.windows(2) {
        for v in cb.windows(2) {
            rects.push((w[0], w[1], v[0], v[1], simpson_rect(f, w[0], w[1], v[0], v[1])));
        }
    }
    let coarse: f64 = rects.iter().map(|r| r.4).sum();
    if coarse == 0.0 {
        return Ok((0.0, 0.0));
    }
    let tol = quad.tol * coarse.abs() / rects.len() as f64;
    let ad = Adaptive { f, split: quad.refinement, max_depth: quad.max_depth };
    let mut total = 0.0;
    let mut err = 0.0;
    for (x0, x1, y0, y1, s) in rects {
        let (v, e) = ad.run(x0, x1, y0, y1, s, tol, 0)?;
        total += v;
        err += e;
    }
    Ok((total, err))
}

fn check_toy(params: &PhysParams) -> Result<()> {
    if !(params.p_abs.abs() < 1.0) {
        return Err(SpecRgError::InvalidParameters(format!("|p| must be below 1, got {}", params.p_abs)));
    }
    if !(params.sigma0 > 0.0) || !(params.lambda > 1.0) {
        return Err(SpecRgError::InvalidParameters("need sigma0 > 0 and Lambda > 1".into()));
    }
    Ok(())
}

fn cutoff_sq(r: f64, params: &PhysParams) -> f64 {
    let k = kappa_bar(r, params.sigma0) * kappa_lambda(r, params.lambda);
    k * k
}

/// `E_lin = -g^2 p^2 int 2 pi r^2 kbar^2 kL^2 sin^2 / (r (r - p r cos))`
/// with the error estimate of the quadrature.
pub fn elin_quadrature_with_error(params: &PhysParams, quad: &QuadSpec) -> Result<(f64, f64)> {
    check_toy(params)?;
    let gp2 = (params.g * params.p_abs).powi(2);
    if gp2 == 0.0 {
        return Ok((0.0, 0.0));
    }
    let p = params.p_abs;
    let f = |r: f64, c: f64| 2.0 * std::f64::consts::PI * cutoff_sq(r, params) * (1.0 - c * c) / (1.0 - p * c);
    let (v, e) = integrate(&f, params.sigma0, params.lambda, quad)?;
    Ok((-gp2 * v, gp2 * e))
}

pub fn elin_quadrature(params: &PhysParams, quad: &QuadSpec) -> Result<f64> {
    Ok(elin_quadrature_with_error(params, quad)?.0)
}

/// `log || Omega ||^2 = g^2 p^2 int 2 pi r^2 kbar^2 kL^2 sin^2 / (r (r - p r cos)^2)`.
pub fn omega_lognorm_with_error(params: &PhysParams, quad: &QuadSpec) -> Result<(f64, f64)> {
    check_toy(params)?;
    let gp2 = (params.g * params.p_abs).powi(2);
    if gp2 == 0.0 {
        return Ok((0.0, 0.0));
    }
    let p = params.p_abs;
    let f = |r: f64, c: f64| {
        if r == 0.0 {
            return 0.0;
        }
        let d = 1.0 - p * c;
        2.0 * std::f64::consts::PI * cutoff_sq(r, params) * (1.0 - c * c) / (r * d * d)
    };
    let (v, e) = integrate(&f, params.sigma0, params.lambda, quad)?;
    Ok((gp2 * v, gp2 * e))
}

pub fn omega_lognorm_quadrature(params: &PhysParams, quad: &QuadSpec) -> Result<f64> {
    Ok(omega_lognorm_with_error(params, quad)?.0)
}

pub fn continuum_report(params: &PhysParams, quad: &QuadSpec) -> Result<ToyReport> {
    let (e_lin, e1) = elin_quadrature_with_error(params, quad)?;
    let (log_norm_sq, e2) = omega_lognorm_with_error(params, quad)?;
    Ok(ToyReport { e_lin, log_norm_sq, displacements: Vec::new(), error_estimate: e1.max(e2) })
}

/// Coherent-state solution of the discrete model with couplings at the
/// infrared cutoff `params.sigma0`.
pub fn discrete_bogoliubov(grid: &ModeGrid, params: &PhysParams) -> Result<ToyReport> {
    check_toy(params)?;
    let c = couplings(grid, params.sigma0, params.lambda);
    let p = params.p_abs;
    let mut e_lin = 0.0;
    let mut log_norm_sq = 0.0;
    let mut displacements = Vec::with_capacity(grid.len());
    for (j, m) in grid.modes.iter().enumerate() {
        let omega = m.k_abs - p * m.k.z;
        if omega <= 1e-12 {
            return Err(SpecRgError::ResonantMode { mode: j, omega });
        }
        let ct = params.g * p * c[j] * m.eps.z;
        let d = ct / omega;
        e_lin -= ct * d;
        log_norm_sq += d * d;
        displacements.push(d);
    }
    Ok(ToyReport { e_lin, log_norm_sq, displacements, error_estimate: 0.0 })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DivergenceFit {
    pub fit: LineFit,
    pub sigma0: Vec<f64>,
    pub log_norm_sq: Vec<f64>,
}

/// Fit `log || Omega ||^2` against `|log sigma0|` over a geometric list.
pub fn divergence_fit(params: &PhysParams, sigmas: &[f64], quad: &QuadSpec) -> Result<DivergenceFit> {
    if sigmas.len() < 5 {
        return Err(SpecRgError::InvalidGrid(format!("need at least 5 sigma0 values, got {}", sigmas.len())));
    }
    let q = sigmas[1] / sigmas[0];
    let geometric = sigmas.windows(2).all(|w| ((w[1] / w[0]) / q - 1.0).abs() < 1e-9) && q > 0.0 && q != 1.0;
    if !geometric {
        return Err(SpecRgError::InvalidGrid("sigma0 values must be geometric".into()));
    }
    let mut vals = Vec::with_capacity(sigmas.len());
    for &s in sigmas {
        vals.push(omega_lognorm_quadrature(&PhysParams { sigma0: s, ..params.clone() }, quad)?);
    }
    let x: Vec<f64> = sigmas.iter().map(|s| s.ln().abs()).collect();
    let fit = fit_line(&x, &vals).ok_or_else(|| SpecRgError::InvalidGrid("degenerate sigma0 list".into()))?;
    Ok(DivergenceFit { fit, sigma0: sigmas.to_vec(), log_norm_sq: vals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fockspace::{build_basis, GridSpec};
    use crate::hamiltonians::build_hlin;
    use crate::linalg::lowest_eigenpair;

    fn toy(g: f64, p: f64, sigma0: f64) -> PhysParams {
        PhysParams { g, p_abs: p, sigma0, ..Default::default() }
    }

    #[test]
    fn vanishing_cases() {
        let q = QuadSpec::default();
        assert_eq!(elin_quadrature(&toy(0.1, 0.0, 1e-3), &q).unwrap(), 0.0);
        assert_eq!(elin_quadrature(&toy(0.0, 0.05, 1e-3), &q).unwrap(), 0.0);
        assert_eq!(omega_lognorm_quadrature(&toy(0.1, 0.0, 1e-3), &q).unwrap(), 0.0);
    }

    #[test]
    fn small_momentum_closed_form() {
        // at p -> 0 the angular factor is 4/3 and the radial integrals are
        // elementary: int kbar^2 = sigma0/3 + (1 - sigma0), int kbar^2/r = 1/2 + log(1/sigma0)
        let (g, p, s) = (0.1, 1e-4, 1e-3);
        let q = QuadSpec { tol: 1e-9, ..Default::default() };
        let mut uv = 0.0;
        let mut uv_log = 0.0;
        let n = 200_000;
        for i in 0..n {
            let r = 1.0 + 1.5 * (i as f64 + 0.5) / n as f64;
            let k = kappa_lambda(r, 2.5).powi(2) * 1.5 / n as f64;
            uv += k;
            uv_log += k / r;
        }
        let rad = s / 3.0 + (1.0 - s) + uv;
        let rad_log = 0.5 + (1.0 / s).ln() + uv_log;
        let e = elin_quadrature(&toy(g, p, s), &q).unwrap();
        let want = -(g * p).powi(2) * 2.0 * std::f64::consts::PI * 4.0 / 3.0 * rad;
        assert!(((e - want) / want).abs() < 1e-4);
        let l = omega_lognorm_quadrature(&toy(g, p, s), &q).unwrap();
        let want = (g * p).powi(2) * 2.0 * std::f64::consts::PI * 4.0 / 3.0 * rad_log;
        assert!(((l - want) / want).abs() < 1e-4);
    }

    #[test]
    fn single_mode_by_hand() {
        let spec = GridSpec::axis_pairs(1, 1, 1, 1);
        let grid = ModeGrid::new(&spec).unwrap();
        let p = toy(0.2, 0.04, 0.3);
        let r = discrete_bogoliubov(&grid, &p).unwrap();
        let c = couplings(&grid, p.sigma0, p.lambda);
        let m = &grid.modes[0];
        let ct = p.g * p.p_abs * c[0] * m.eps.z;
        let w = m.k_abs - p.p_abs * m.k.z;
        assert!((r.displacements[0] - ct / w).abs() < 1e-16);
        let e0: f64 = grid.modes.iter().zip(&c).map(|(m, c)| {
            let ct = p.g * p.p_abs * c * m.eps.z;
            -ct * ct / (m.k_abs - p.p_abs * m.k.z)
        }).sum();
        assert!((r.e_lin - e0).abs() < 1e-18);
    }

    #[test]
    fn discrete_energy_matches_dense() {
        let spec = GridSpec::axis_pairs(1, 1, 1, 8);
        let grid = ModeGrid::new(&spec).unwrap();
        let basis = build_basis(&grid, 8).unwrap();
        let p = toy(0.5, 0.05, 0.3);
        let r = discrete_bogoliubov(&grid, &p).unwrap();
        assert!(r.e_lin < 0.0);
        let (e, _) = lowest_eigenpair(&build_hlin(&grid, &basis, &p, p.sigma0).unwrap());
        assert!(((e - r.e_lin) / r.e_lin).abs() < 1e-6);
    }

    #[test]
    fn divergence_is_logarithmic() {
        let q = QuadSpec::default();
        let sig: Vec<f64> = (6..=14).map(|k| 2f64.powi(-k)).collect();
        let f = divergence_fit(&toy(0.1, 0.05, 1e-3), &sig, &q).unwrap();
        assert!(f.fit.r2 > 0.999 && f.fit.slope > 0.0);
        assert!(f.log_norm_sq.windows(2).all(|w| w[1] > w[0]));
        assert!(divergence_fit(&toy(0.1, 0.05, 1e-3), &sig[..4], &q).is_err());
    }
}

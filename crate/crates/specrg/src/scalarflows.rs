//! Closed-form scalar recursions of the flow: running coupling `eps_n`,
//! nonlinear cutoff scale `lambda_n`, the number of scales `N_sigma0` and
//! the norm envelopes of the dressed ground state.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpecRgError};

/// Contraction of the running coupling per scale.
pub const EPS_CONTRACTION: f64 = 17.0 / 18.0;

/// Slack in `N_sigma0 = ceil(log sigma0 / log rho)` so that exact powers of
/// `rho` are not pushed up by rounding.
const CEIL_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub g: f64,
    pub p_abs: f64,
    pub sigma0: f64,
    pub rho: f64,
}

impl FlowParams {
    pub fn new(g: f64, p_abs: f64, sigma0: f64, rho: f64) -> Result<Self> {
        if !(g >= 0.0 && g.is_finite()) {
            return Err(SpecRgError::InvalidParameters(format!("g must be non-negative, got {g}")));
        }
        if !(sigma0 > 0.0 && sigma0 < 1.0) {
            return Err(SpecRgError::InvalidParameters(format!("sigma0 must lie in (0,1), got {sigma0}")));
        }
        if !(rho > 0.0 && rho < 1.0) {
            return Err(SpecRgError::InvalidParameters(format!("rho must lie in (0,1), got {rho}")));
        }
        if !p_abs.is_finite() {
            return Err(SpecRgError::InvalidParameters("|p| must be finite".into()));
        }
        Ok(FlowParams { g, p_abs, sigma0, rho })
    }

    /// `(2g)^{1/3}`.
    pub fn xi(&self) -> f64 {
        (2.0 * self.g).cbrt()
    }

    /// `(2g)^{2/3}`.
    pub fn eps0(&self) -> f64 {
        let x = self.xi();
        x * x
    }

    /// Number of scales down to the infrared cutoff, at least 1.
    pub fn n_sigma0(&self) -> usize {
        let r = self.sigma0.ln() / self.rho.ln();
        ((r - CEIL_SLACK).ceil() as usize).max(1)
    }

    /// `2 (1 + sqrt(eps0)) |p| eps0`.
    pub fn eps_floor(&self) -> f64 {
        let e = self.eps0();
        2.0 * (1.0 + e.sqrt()) * self.p_abs.abs() * e
    }

    /// `lambda_n = rho^n / 2`.
    pub fn lambda(&self, n: usize) -> f64 {
        0.5 * self.rho.powi(n as i32)
    }
}

/// `eps_n = max((17/18)^n eps0, floor)` up to `N_sigma0`, then plain
/// contraction from `eps_{N_sigma0}`.
pub fn eps_flow(fp: &FlowParams, n: usize) -> f64 {
    let e0 = fp.eps0();
    let nn = fp.n_sigma0();
    let below = |m: usize| (EPS_CONTRACTION.powi(m as i32) * e0).max(fp.eps_floor());
    if n <= nn {
        below(n)
    } else {
        EPS_CONTRACTION.powi((n - nn) as i32) * below(nn)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsRow {
    pub n: usize,
    pub eps_n: f64,
    pub lambda_n: f64,
    /// Whether the `|p|` floor sets `eps_n`.
    pub floor_active: bool,
}

pub fn eps_table(fp: &FlowParams, n_max: usize) -> Vec<EpsRow> {
    let e0 = fp.eps0();
    let nn = fp.n_sigma0();
    (0..=n_max)
        .map(|n| EpsRow {
            n,
            eps_n: eps_flow(fp, n),
            lambda_n: fp.lambda(n),
            floor_active: n <= nn && fp.eps_floor() > EPS_CONTRACTION.powi(n as i32) * e0,
        })
        .collect()
}

/// Bounds `c exp(c' g^2 p^2 |log sigma0|)` on `|| Omega ||^2`, with the
/// structural constants as free parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaEnvelope {
    pub g: f64,
    pub p_abs: f64,
    pub c_lower: f64,
    pub c_upper: f64,
    pub cprime_lower: f64,
    pub cprime_upper: f64,
}

impl OmegaEnvelope {
    /// Lower rate `exp(g^2 p^2 N_sigma0 / 22)` with `N_sigma0 = |log2 sigma0|`,
    /// upper rate `8 pi`.
    pub fn new(g: f64, p_abs: f64) -> Self {
        OmegaEnvelope {
            g,
            p_abs,
            c_lower: 1.0,
            c_upper: 1.0,
            cprime_lower: 1.0 / (22.0 * std::f64::consts::LN_2),
            cprime_upper: 8.0 * std::f64::consts::PI,
        }
    }

    fn rate(&self, cprime: f64, sigma0: f64) -> f64 {
        cprime * self.g * self.g * self.p_abs * self.p_abs * sigma0.ln().abs()
    }

    pub fn lower(&self, sigma0: f64) -> f64 {
        self.c_lower * self.rate(self.cprime_lower, sigma0).exp()
    }

    pub fn upper(&self, sigma0: f64) -> f64 {
        self.c_upper * self.rate(self.cprime_upper, sigma0).exp()
    }

    /// Fix both prefactors so that the envelopes pass through `norm_sq` at
    /// `sigma_ref`.
    pub fn calibrated(mut self, sigma_ref: f64, norm_sq: f64) -> Self {
        self.c_lower = norm_sq / self.rate(self.cprime_lower, sigma_ref).exp();
        self.c_upper = norm_sq / self.rate(self.cprime_upper, sigma_ref).exp();
        self
    }
}

pub fn omega_bound_envelope(fp: &FlowParams) -> OmegaEnvelope {
    OmegaEnvelope::new(fp.g, fp.p_abs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fp(g: f64, p: f64) -> FlowParams {
        FlowParams::new(g, p, 2f64.powi(-10), 0.5).unwrap()
    }

    #[test]
    fn derived_constants() {
        let f = fp(1e-3, 0.05);
        assert!((f.eps0() * f.xi() - 2e-3).abs() < 1e-14);
        assert_eq!(f.n_sigma0(), 10);
        assert_eq!(FlowParams::new(1e-3, 0.0, 2f64.powi(-11), 0.5).unwrap().n_sigma0(), 11);
        assert_eq!(FlowParams::new(1e-3, 0.0, 0.9, 0.5).unwrap().n_sigma0(), 1);
        assert_eq!(f.lambda(3), 0.0625);
    }

    #[test]
    fn zero_momentum_is_pure_contraction() {
        let f = fp(1e-3, 0.0);
        for r in eps_table(&f, 20) {
            let want = EPS_CONTRACTION.powi(r.n as i32) * f.eps0();
            assert!((r.eps_n - want).abs() <= 1e-15 * want);
            assert!(!r.floor_active);
        }
    }

    #[test]
    fn floor_takes_over_at_crossover() {
        // large sigma0 range so the floor is reached before N_sigma0
        let f = FlowParams::new(1e-3, 0.05, 2f64.powi(-60), 0.5).unwrap();
        let floor = f.eps_floor();
        let mut n_star = 0;
        while EPS_CONTRACTION.powi(n_star) * f.eps0() > floor {
            n_star += 1;
        }
        let t = eps_table(&f, 70);
        assert!(!t[n_star as usize - 1].floor_active);
        assert!(t[n_star as usize].floor_active);
        assert_eq!(t[n_star as usize + 1].eps_n, floor);
        assert!(t[61].eps_n < floor);
    }

    #[test]
    fn envelope_calibration() {
        let e = OmegaEnvelope::new(0.1, 0.05).calibrated(1e-3, 1.2);
        assert!((e.lower(1e-3) - 1.2).abs() < 1e-15);
        assert!((e.upper(1e-3) - 1.2).abs() < 1e-15);
        assert!(e.lower(1e-4) < e.upper(1e-4));
        let flat = OmegaEnvelope::new(0.1, 0.0);
        assert_eq!(flat.lower(1e-9), flat.lower(1e-2));
    }
}

//! Discrete Ward-Takahashi derivations
//!
//! ```text
//! D[X] = s g sqrt(w_j) eps_j . dX/dP_f + nu_j [X, a#_j],   nu_j = sqrt|k_j| / kbar(|k_j|)
//! ```
//! with `a#_j = a_j, s = +1` or `a#_j = a_j^dagger, s = -1`. Because
//! `nu_j c_j = sqrt(w_j)` for an infrared mode, the commutator of `a#_j`
//! with the interaction reproduces `g eps_j . (p - P_f - g A)` term by term
//! and only the kinematic commutators with `H_f` and `P_f` survive. Those are
//! of order `nu_j |k_j| = sigma sqrt|k_j|`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpecRgError};
use crate::feshbach::{smooth_feshbach_with_floor, CutoffPair, TauSpec};
use crate::fockspace::{FockBasis, ModeGrid, Vec3};
use crate::hamiltonians::{kappa_bar, kappa_lambda, PhysHamiltonian};
use crate::linalg::{max_abs, restrict, spectral_norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LadderVariant {
    Annihilation,
    Creation,
}

impl LadderVariant {
    pub fn sign(self) -> f64 {
        match self {
            LadderVariant::Annihilation => 1.0,
            LadderVariant::Creation => -1.0,
        }
    }

    /// Photon-number headroom needed for `[H, a#]` with `H` changing the
    /// photon number by at most two.
    pub fn margin(self) -> usize {
        match self {
            LadderVariant::Annihilation => 2,
            LadderVariant::Creation => 3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WTDerivation {
    pub mode: usize,
    pub variant: LadderVariant,
    pub eps: [f64; 3],
    pub k_abs: f64,
    pub sqrt_w: f64,
    /// `kbar(|k_j|)^{-1} sqrt|k_j|`.
    pub nu: f64,
    pub g: f64,
}

impl WTDerivation {
    pub fn new(grid: &ModeGrid, mode: usize, variant: LadderVariant, sigma: f64, g: f64) -> Result<Self> {
        let m = grid.modes.get(mode).ok_or_else(|| SpecRgError::InvalidParameters(format!("no mode {mode}")))?;
        if m.k_abs > sigma {
            return Err(SpecRgError::ModeNotIR { mode, k_abs: m.k_abs, sigma });
        }
        let nu = m.k_abs.sqrt() / kappa_bar(m.k_abs, sigma);
        if !(nu.is_finite() && nu > 0.0) {
            return Err(SpecRgError::InvalidParameters(format!("normalization {nu} for mode {mode}")));
        }
        Ok(WTDerivation { mode, variant, eps: [m.eps.x, m.eps.y, m.eps.z], k_abs: m.k_abs, sqrt_w: m.weight.sqrt(), nu, g })
    }

    /// Mode of the deepest shell with the largest `|eps_par|`.
    pub fn softest(grid: &ModeGrid, variant: LadderVariant, sigma: f64, g: f64) -> Result<Self> {
        let deep = grid.shells() - 1;
        let mode = (0..grid.len())
            .filter(|&j| grid.modes[j].shell == deep)
            .max_by(|&a, &b| grid.modes[a].eps.z.abs().total_cmp(&grid.modes[b].eps.z.abs()).then(b.cmp(&a)))
            .ok_or_else(|| SpecRgError::InvalidGrid("empty grid".into()))?;
        Self::new(grid, mode, variant, sigma, g)
    }

    pub fn eps_vec(&self) -> Vec3 {
        Vec3::new(self.eps[0], self.eps[1], self.eps[2])
    }

    pub fn ladder(&self, basis: &FockBasis) -> Result<LadderOp> {
        if self.mode >= basis.n_modes() {
            return Err(SpecRgError::DimensionMismatch(format!("mode {} out of range {}", self.mode, basis.n_modes())));
        }
        let entries = (0..basis.dim())
            .map(|i| match self.variant {
                LadderVariant::Annihilation => basis.lower(i, self.mode),
                LadderVariant::Creation => basis.raise(i, self.mode),
            })
            .collect();
        Ok(LadderOp { entries })
    }

    /// `D[X]` given `X`, `eps . dX/dP_f` and the ladder operator.
    pub fn apply(&self, x: &DMatrix<f64>, eps_dp: &DMatrix<f64>, ladder: &LadderOp) -> DMatrix<f64> {
        eps_dp * (self.variant.sign() * self.g * self.sqrt_w) + ladder.commutator(x) * self.nu
    }
}

/// A single ladder operator, stored as one `(row, amplitude)` per column.
#[derive(Clone, Debug)]
pub struct LadderOp {
    entries: Vec<Option<(usize, f64)>>,
}

impl LadderOp {
    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for (c, e) in self.entries.iter().enumerate() {
            if let Some((r, amp)) = *e {
                m[(r, c)] = amp;
            }
        }
        m
    }

    /// `[X, L] = X L - L X`.
    pub fn commutator(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for (c, e) in self.entries.iter().enumerate() {
            if let Some((r, amp)) = *e {
                out.column_mut(c).axpy(amp, &x.column(r), 1.0);
                for k in 0..n {
                    out[(r, k)] -= amp * x[(c, k)];
                }
            }
        }
        out
    }

    /// `[diag(d), L]`, which has the sparsity of `L`.
    pub fn diag_commutator(&self, d: &[f64]) -> LadderOp {
        let entries = self.entries.iter().enumerate().map(|(c, e)| e.map(|(r, amp)| (r, (d[r] - d[c]) * amp))).collect();
        LadderOp { entries }
    }

    /// `L X`.
    pub fn left_mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, x.ncols());
        for (c, e) in self.entries.iter().enumerate() {
            if let Some((r, amp)) = *e {
                for k in 0..x.ncols() {
                    out[(r, k)] += amp * x[(c, k)];
                }
            }
        }
        out
    }

    /// Largest amplitude, which is the operator norm since rows and columns
    /// each carry at most one entry.
    pub fn norm(&self) -> f64 {
        self.entries.iter().filter_map(|e| e.map(|(_, a)| a.abs())).fold(0.0, f64::max)
    }
}

fn safe_columns(basis: &FockBasis, variant: LadderVariant) -> Vec<usize> {
    basis.safe_sector(variant.margin())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WTResidual {
    pub mode: usize,
    pub k_abs: f64,
    /// Spectral norm of `D[H]` on the safe columns.
    pub residual_norm: f64,
    /// Largest entry of the interaction part, which cancels identically.
    pub coefficient_residual: f64,
    /// Spectral norm of the kinematic part on the safe columns.
    pub kinematic_norm: f64,
    /// `|nu c_j - sqrt(w_j)|`.
    pub normalization_defect: f64,
    /// Largest deviation of `[A_mu, a#_j]` from `-/+ c_j eps_mu` on the safe columns.
    pub commutator_defect: f64,
}

/// `D[H]` for the physical Hamiltonian, restricted to the columns where the
/// truncation does not touch the commutator.
pub fn wt_apply(basis: &FockBasis, phys: &PhysHamiltonian, wt: &WTDerivation) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let lad = wt.ladder(basis)?;
    let d = wt.apply(&phys.h, &phys.d_p_field(&wt.eps_vec()), &lad);
    let cols = safe_columns(basis, wt.variant);
    let rows: Vec<usize> = (0..basis.dim()).collect();
    Ok((restrict(&d, &rows, &cols), cols))
}

/// Split `D[H]` into the interaction part, which must vanish, and the
/// kinematic remainder.
pub fn wt_residual(grid: &ModeGrid, basis: &FockBasis, phys: &PhysHamiltonian, wt: &WTDerivation) -> Result<WTResidual> {
    let n = basis.dim();
    let lad = wt.ladder(basis)?;
    let cols = safe_columns(basis, wt.variant);
    let rows: Vec<usize> = (0..n).collect();
    let on_safe = |m: &DMatrix<f64>| restrict(m, &rows, &cols);
    let comm = |x: &DMatrix<f64>| lad.commutator(x);
    let g = phys.params.g;
    let s = wt.variant.sign();
    let eps = wt.eps_vec();
    let cj = phys.couplings[wt.mode];

    // (p - P_f)_mu as diagonals
    let pm: Vec<Vec<f64>> = (0..3)
        .map(|mu| {
            let pmu = if mu == 2 { phys.params.p_abs } else { 0.0 };
            phys.obs.p[mu].iter().map(|x| pmu - x).collect()
        })
        .collect();
    let mut coef = comm(&phys.w2) * wt.nu;
    let mut kin = DMatrix::zeros(n, n);
    let mut comm_defect: f64 = 0.0;
    for mu in 0..3 {
        let ca = comm(&phys.a[mu]);
        let want = -s * cj * eps[mu];
        let mut dev = on_safe(&ca);
        for (c, &col) in cols.iter().enumerate() {
            dev[(col, c)] -= want;
        }
        comm_defect = comm_defect.max(max_abs(&dev));
        // -g diag(p-P) [A, a#]
        let mut t = ca;
        for r in 0..n {
            let f = -g * pm[mu][r];
            t.row_mut(r).scale_mut(f);
        }
        coef += t * wt.nu;
        // -g [diag(p-P), a#] A
        let dg: Vec<f64> = pm[mu].iter().map(|x| -g * x).collect();
        kin += lad.diag_commutator(&dg).left_mul(&phys.a[mu]) * wt.nu;
    }
    let dpe = phys.d_p_field(&eps);
    coef += &dpe * (s * g * wt.sqrt_w);
    kin += lad.diag_commutator(&phys.t_diag).dense() * wt.nu;

    let m = &grid.modes[wt.mode];
    let norm_defect = (wt.nu * kappa_bar(m.k_abs, phys.sigma) * kappa_lambda(m.k_abs, phys.params.lambda) * (m.weight / m.k_abs).sqrt() - wt.sqrt_w).abs();
    let coef_safe = on_safe(&coef);
    let kin_safe = on_safe(&kin);
    let total = &coef_safe + &kin_safe;
    Ok(WTResidual {
        mode: wt.mode,
        k_abs: wt.k_abs,
        residual_norm: spectral_norm(&total),
        coefficient_residual: max_abs(&coef_safe),
        kinematic_norm: spectral_norm(&kin_safe),
        normalization_defect: norm_defect,
        commutator_defect: comm_defect,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PropagationReport {
    /// `|| D[F] - Q# D[omega] Q ||`.
    pub gap: f64,
    /// Scale of the kinematic commutators, `nu |k_j|`.
    pub kinematic_scale: f64,
    /// `2 nu |k_j| || a# || max(1, c)`, the size allowed for the
    /// `D[tau]` and cutoff commutators that make up the gap.
    pub gap_bound: f64,
    pub d_f_norm: f64,
    pub d_h_norm: f64,
    pub q_sharp_norm: f64,
    pub q_norm: f64,
    /// `|| D[F] || - || D[H] || || Q# || || Q ||`.
    pub bound_excess: f64,
    /// `nu <1_j|F|Omega> / (sqrt(w_j) c)` against `g a eps_par`, for the
    /// annihilation variant.
    pub kernel_extracted: Option<f64>,
    pub kernel_predicted: Option<f64>,
    /// `nu |k_j| |g a eps_par|`.
    pub kernel_band: Option<f64>,
}

impl PropagationReport {
    pub fn gap_ok(&self) -> bool {
        self.gap <= self.gap_bound
    }

    pub fn kernel_ok(&self) -> bool {
        match (self.kernel_extracted, self.kernel_predicted, self.kernel_band) {
            (Some(x), Some(y), Some(b)) => (x - y).abs() <= b,
            _ => true,
        }
    }
}

/// Propagate the WT derivation through one Feshbach map `F = F[H - z]`. The
/// derivative of `F` in `P_f` is `Q# dH/dP_f Q` since neither `chi` nor `tau`
/// depends on `P_f`.
pub fn wt_propagation_check(
    basis: &FockBasis,
    phys: &PhysHamiltonian,
    z: f64,
    tau: &TauSpec<f64>,
    cut: &CutoffPair,
    wt: &WTDerivation,
) -> Result<PropagationReport> {
    let n = basis.dim();
    let hf = phys.hf();
    let mut k = phys.h.clone();
    for i in 0..n {
        k[(i, i)] -= z;
    }
    let trip = smooth_feshbach_with_floor(&k, tau, cut, hf, 1e-10)?;
    let lad = wt.ladder(basis)?;
    let eps = wt.eps_vec();
    let dpe = phys.d_p_field(&eps);
    let d_h = wt.apply(&k, &dpe, &lad);
    let d_tau = lad.diag_commutator(&trip.tau).dense() * wt.nu;
    let d_omega = &d_h - d_tau;
    let dpf = &trip.q_sharp * &dpe * &trip.q;
    let d_f = wt.apply(&trip.f, &dpf, &lad);
    let sandwich = &trip.q_sharp * &d_omega * &trip.q;
    let qs = spectral_norm(&trip.q_sharp);
    let q = spectral_norm(&trip.q);
    let d_f_norm = spectral_norm(&d_f);
    let d_h_norm = spectral_norm(&d_h);

    let par = phys.d_p_par();
    let dpf_par = &trip.q_sharp * &par * &trip.q;
    let one = basis.one_photon(wt.mode);
    let (kernel_extracted, kernel_predicted, kernel_band) = match wt.variant {
        LadderVariant::Annihilation => {
            let c = tau.c_hf;
            let a = dpf_par[(0, 0)] / c;
            let pred = wt.g * a * wt.eps[2];
            (Some(wt.nu * trip.f[(one, 0)] / (wt.sqrt_w * c)), Some(pred), Some(wt.nu * wt.k_abs * pred.abs()))
        }
        LadderVariant::Creation => (None, None, None),
    };
    Ok(PropagationReport {
        gap: spectral_norm(&(&d_f - sandwich)),
        kinematic_scale: wt.nu * wt.k_abs,
        gap_bound: 2.0 * wt.nu * wt.k_abs * lad.norm() * tau.c_hf.abs().max(1.0),
        d_f_norm,
        d_h_norm,
        q_sharp_norm: qs,
        q_norm: q,
        bound_excess: d_f_norm - d_h_norm * qs * q,
        kernel_extracted,
        kernel_predicted,
        kernel_band,
    })
}

//! Smooth Feshbach map and its exact algebraic identities.
//!
//! For an operator `H` (already shifted by the spectral parameter), a
//! diagonal partition of unity `chi^2 + chi_bar^2 = 1` and a diagonal
//! `tau = c H_f - z'`, with `omega = H - tau`:
//!
//! ```text
//! R_bar  = (tau + chi_bar omega chi_bar)^{-1}      on Ran chi_bar
//! Q      = chi - chi_bar R_bar chi_bar omega chi
//! Q#     = chi - chi omega chi_bar R_bar chi_bar
//! F      = tau + chi omega chi - chi omega chi_bar R_bar chi_bar omega chi
//! ```
//!
//! All routines are generic over real and complex scalars.

use nalgebra::{ComplexField, DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpecRgError};
use crate::linalg::{diag_matrix, restrict, scale_cols, scale_rows, sigma_min, spectral_norm};
use crate::report::{CheckResult, Tally};

pub trait Scalar: ComplexField<RealField = f64> + Copy {}
impl<T: ComplexField<RealField = f64> + Copy> Scalar for T {}

/// Relative floor on the smallest singular value of `tau + chi_bar omega chi_bar`.
pub const DEFAULT_SINGULAR_FLOOR: f64 = 1e-10;
/// Up to this dimension the smallest singular value comes from a full SVD.
pub const EXACT_SVD_DIM: usize = 200;

fn cubic_step(t: f64) -> (f64, f64) {
    (t * t * (3.0 - 2.0 * t), 6.0 * t * (1.0 - t))
}

/// Ramp of a cutoff function of `H_f`: `chi = 1` up to `lo`, `chi = 0` from
/// `hi` on, `chi = cos(pi s / 2)` and `chi_bar = sin(pi s / 2)` in between,
/// with `s` the cubic smoothstep of `(x - lo) / (hi - lo)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RampProfile {
    pub lo: f64,
    pub hi: f64,
}

impl RampProfile {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo >= 0.0 && hi > lo && hi.is_finite()) {
            return Err(SpecRgError::InvalidParameters(format!("ramp needs 0 <= lo < hi, got ({lo}, {hi})")));
        }
        Ok(RampProfile { lo, hi })
    }

    /// Profile of `chi_1`: ramp on `[2/3, 1]`.
    pub fn unit() -> Self {
        RampProfile { lo: 2.0 / 3.0, hi: 1.0 }
    }

    /// `chi(x / factor)`, i.e. both edges multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        RampProfile { lo: self.lo * factor, hi: self.hi * factor }
    }

    fn phase(&self, x: f64) -> Option<(f64, f64)> {
        if x <= self.lo || x >= self.hi {
            return None;
        }
        let w = self.hi - self.lo;
        let (s, ds) = cubic_step((x - self.lo) / w);
        Some((0.5 * std::f64::consts::PI * s, 0.5 * std::f64::consts::PI * ds / w))
    }

    pub fn chi(&self, x: f64) -> f64 {
        match self.phase(x) {
            Some((ph, _)) => ph.cos(),
            None if x <= self.lo => 1.0,
            None => 0.0,
        }
    }

    pub fn chi_bar(&self, x: f64) -> f64 {
        match self.phase(x) {
            Some((ph, _)) => ph.sin(),
            None if x <= self.lo => 0.0,
            None => 1.0,
        }
    }

    pub fn dchi(&self, x: f64) -> f64 {
        self.phase(x).map_or(0.0, |(ph, dph)| -ph.sin() * dph)
    }

    pub fn dchi_bar(&self, x: f64) -> f64 {
        self.phase(x).map_or(0.0, |(ph, dph)| ph.cos() * dph)
    }

    /// Upper bound for `|chi'|` and `|chi_bar'|`.
    pub fn max_slope(&self) -> f64 {
        0.5 * std::f64::consts::PI * 1.5 / (self.hi - self.lo)
    }
}

/// Diagonal cutoff pair evaluated on the `H_f` spectrum of a basis.
#[derive(Clone, Debug)]
pub struct CutoffPair {
    pub profile: Option<RampProfile>,
    pub chi: Vec<f64>,
    pub chi_bar: Vec<f64>,
    pub dchi: Vec<f64>,
    pub dchi_bar: Vec<f64>,
}

impl CutoffPair {
    pub fn new(hf: &[f64], profile: RampProfile) -> Self {
        CutoffPair {
            profile: Some(profile),
            chi: hf.iter().map(|&x| profile.chi(x)).collect(),
            chi_bar: hf.iter().map(|&x| profile.chi_bar(x)).collect(),
            dchi: hf.iter().map(|&x| profile.dchi(x)).collect(),
            dchi_bar: hf.iter().map(|&x| profile.dchi_bar(x)).collect(),
        }
    }

    /// Cutoff given by its values; `chi_bar = sqrt(1 - chi^2)`, no derivative.
    pub fn from_values(chi: Vec<f64>) -> Result<Self> {
        if chi.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(SpecRgError::InvalidParameters("cutoff values must lie in [0,1]".into()));
        }
        let chi_bar = chi.iter().map(|c| (1.0 - c * c).max(0.0).sqrt()).collect();
        let n = chi.len();
        Ok(CutoffPair { profile: None, chi, chi_bar, dchi: vec![0.0; n], dchi_bar: vec![0.0; n] })
    }

    pub fn dim(&self) -> usize {
        self.chi.len()
    }

    /// `{chi > 0}`, the support of `Ran chi`.
    pub fn p_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.chi[i] > 0.0).collect()
    }

    /// `{chi_bar > 0}`.
    pub fn pbar_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.chi_bar[i] > 0.0).collect()
    }

    /// States where both `chi` and `chi_bar` are nonzero.
    pub fn ramp_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.chi[i] > 0.0 && self.chi_bar[i] > 0.0).collect()
    }

    /// Largest deviation from `chi^2 + chi_bar^2 = 1`.
    pub fn unity_defect(&self) -> f64 {
        self.chi.iter().zip(&self.chi_bar).map(|(a, b)| (a * a + b * b - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Fails unless `outer.chi * inner.chi = inner.chi` entrywise.
pub fn check_nesting(outer: &CutoffPair, inner: &CutoffPair) -> Result<()> {
    if outer.dim() != inner.dim() {
        return Err(SpecRgError::DimensionMismatch("cutoffs on different spaces".into()));
    }
    for i in 0..outer.dim() {
        if (outer.chi[i] * inner.chi[i] - inner.chi[i]).abs() > 1e-14 {
            return Err(SpecRgError::NestingViolation(format!(
                "state {i}: chi1 = {}, chi2 = {}",
                outer.chi[i], inner.chi[i]
            )));
        }
    }
    Ok(())
}

/// `tau = c_hf H_f - z_prime`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TauSpec<T> {
    pub c_hf: f64,
    pub z_prime: T,
}

impl<T: Scalar> TauSpec<T> {
    pub fn new(c_hf: f64, z_prime: T) -> Self {
        TauSpec { c_hf, z_prime }
    }

    pub fn values(&self, hf: &[f64]) -> Vec<T> {
        hf.iter().map(|&x| T::from_real(self.c_hf * x) - self.z_prime).collect()
    }
}

#[derive(Clone, Debug)]
pub struct FeshbachTriple<T: Scalar> {
    pub f: DMatrix<T>,
    pub q: DMatrix<T>,
    pub q_sharp: DMatrix<T>,
    /// `R_bar` on the index set `pbar`.
    pub r_bar: DMatrix<T>,
    pub pbar: Vec<usize>,
    pub tau: Vec<T>,
    pub omega: DMatrix<T>,
    /// Smallest singular value of `tau + chi_bar omega chi_bar` on `Ran chi_bar`.
    pub sigma_min: f64,
    pub restricted_norm: f64,
    /// Largest relative deviation between `tau + chi omega Q`,
    /// `tau + Q# omega chi` and the defining expression.
    pub factored_residual: f64,
}

impl<T: Scalar> FeshbachTriple<T> {
    /// `F` restricted to `{chi > 0}`.
    pub fn f_on_range(&self, cut: &CutoffPair) -> DMatrix<T> {
        let p = cut.p_indices();
        restrict(&self.f, &p, &p)
    }

    /// `chi omega chi_bar R_bar` as an `n x |pbar|` block, shared by the
    /// derivative formulas.
    fn left_block(&self, cut: &CutoffPair) -> DMatrix<T> {
        let n = self.f.nrows();
        let xb: Vec<f64> = self.pbar.iter().map(|&i| cut.chi_bar[i]).collect();
        let c = scale_cols(&scale_rows(&restrict(&self.omega, &(0..n).collect::<Vec<_>>(), &self.pbar), &cut.chi), &xb);
        c * &self.r_bar
    }

    /// `R_bar chi_bar omega chi` as a `|pbar| x n` block.
    fn right_block(&self, cut: &CutoffPair) -> DMatrix<T> {
        let n = self.f.nrows();
        let xb: Vec<f64> = self.pbar.iter().map(|&i| cut.chi_bar[i]).collect();
        let b = scale_cols(&scale_rows(&restrict(&self.omega, &self.pbar, &(0..n).collect::<Vec<_>>()), &xb), &cut.chi);
        &self.r_bar * b
    }
}

fn rel_diff<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

fn check_square<T: Scalar>(h: &DMatrix<T>, cut: &CutoffPair) -> Result<usize> {
    let n = h.nrows();
    if h.ncols() != n || cut.dim() != n {
        return Err(SpecRgError::DimensionMismatch(format!(
            "operator {}x{}, cutoff on {} states",
            h.nrows(),
            h.ncols(),
            cut.dim()
        )));
    }
    Ok(n)
}

pub fn smooth_feshbach<T: Scalar>(h: &DMatrix<T>, tau: &TauSpec<T>, cut: &CutoffPair, hf: &[f64]) -> Result<FeshbachTriple<T>> {
    smooth_feshbach_with_floor(h, tau, cut, hf, DEFAULT_SINGULAR_FLOOR)
}

/// Feshbach triple of `h` with `tau` evaluated on the `H_f` values `hf`.
pub fn smooth_feshbach_with_floor<T: Scalar>(
    h: &DMatrix<T>,
    tau: &TauSpec<T>,
    cut: &CutoffPair,
    hf: &[f64],
    floor: f64,
) -> Result<FeshbachTriple<T>> {
    let n = check_square(h, cut)?;
    if hf.len() != n {
        return Err(SpecRgError::DimensionMismatch("H_f spectrum has the wrong length".into()));
    }
    let t = tau.values(hf);
    let mut omega = h.clone();
    for i in 0..n {
        omega[(i, i)] -= t[i];
    }
    let pbar = cut.pbar_indices();
    let xb: Vec<f64> = pbar.iter().map(|&i| cut.chi_bar[i]).collect();
    let all: Vec<usize> = (0..n).collect();

    let mut m = scale_cols(&scale_rows(&restrict(&omega, &pbar, &pbar), &xb), &xb);
    for (a, &i) in pbar.iter().enumerate() {
        m[(a, a)] += t[i];
    }
    let (r_bar, smin, mnorm) = if pbar.is_empty() {
        (DMatrix::zeros(0, 0), f64::INFINITY, 0.0)
    } else {
        let mnorm = spectral_norm(&m);
        let smin = sigma_min(&m, EXACT_SVD_DIM);
        if !(smin >= floor * mnorm) {
            return Err(SpecRgError::SingularRestriction { sigma_min: smin, floor: floor * mnorm });
        }
        let inv = m.lu().try_inverse().ok_or(SpecRgError::SingularRestriction { sigma_min: 0.0, floor: floor * mnorm })?;
        (inv, smin, mnorm)
    };

    // B = chi_bar omega chi (pbar rows), C = chi omega chi_bar (pbar columns)
    let b = scale_cols(&scale_rows(&restrict(&omega, &pbar, &all), &xb), &cut.chi);
    let c = scale_cols(&scale_rows(&restrict(&omega, &all, &pbar), &cut.chi), &xb);
    let y = &r_bar * &b;
    let z = &c * &r_bar;

    let chi_m: DMatrix<T> = diag_matrix(&cut.chi);
    let mut q = chi_m.clone();
    for (a, &i) in pbar.iter().enumerate() {
        for j in 0..n {
            q[(i, j)] -= y[(a, j)].scale(xb[a]);
        }
    }
    let mut q_sharp = chi_m;
    for (a, &j) in pbar.iter().enumerate() {
        for i in 0..n {
            q_sharp[(i, j)] -= z[(i, a)].scale(xb[a]);
        }
    }
    let mut f = scale_cols(&scale_rows(&omega, &cut.chi), &cut.chi) - &c * &y;
    for i in 0..n {
        f[(i, i)] += t[i];
    }

    let mut fa = scale_rows(&(&omega * &q), &cut.chi);
    let mut fb = scale_cols(&(&q_sharp * &omega), &cut.chi);
    for i in 0..n {
        fa[(i, i)] += t[i];
        fb[(i, i)] += t[i];
    }
    let factored_residual = rel_diff(&fa, &f).max(rel_diff(&fb, &f));

    Ok(FeshbachTriple { f, q, q_sharp, r_bar, pbar, tau: t, omega, sigma_min: smin, restricted_norm: mnorm, factored_residual })
}

/// Relative residuals of `H Q = chi F` and `Q# H = F chi`.
pub fn intertwining_residuals<T: Scalar>(h: &DMatrix<T>, triple: &FeshbachTriple<T>, cut: &CutoffPair) -> (f64, f64) {
    let hq = h * &triple.q;
    let chi_f = scale_rows(&triple.f, &cut.chi);
    let qh = &triple.q_sharp * h;
    let f_chi = scale_cols(&triple.f, &cut.chi);
    (rel_diff(&hq, &chi_f), rel_diff(&qh, &f_chi))
}

/// `|| F^{-1} - (chi (H - z)^{-1} chi + chi_bar tau^{-1} chi_bar) ||`, relative.
/// `h` is the unshifted operator, `tau = c_hf H_f - z`.
pub fn inverse_formula_residual<T: Scalar>(h: &DMatrix<T>, hf: &[f64], c_hf: f64, cut: &CutoffPair, z: T) -> Result<f64> {
    let n = check_square(h, cut)?;
    let mut hz = h.clone();
    for i in 0..n {
        hz[(i, i)] -= z;
    }
    let tau = TauSpec::new(c_hf, z);
    let triple = smooth_feshbach(&hz, &tau, cut, hf)?;
    let f_inv = triple.f.clone().lu().try_inverse().ok_or(SpecRgError::SingularRestriction { sigma_min: 0.0, floor: 0.0 })?;
    let hz_inv = hz.lu().try_inverse().ok_or(SpecRgError::SingularRestriction { sigma_min: 0.0, floor: 0.0 })?;
    let mut want = scale_cols(&scale_rows(&hz_inv, &cut.chi), &cut.chi);
    for i in 0..n {
        let xb = cut.chi_bar[i];
        if xb > 0.0 {
            want[(i, i)] += T::from_real(xb * xb) / triple.tau[i];
        }
    }
    Ok(rel_diff(&f_inv, &want))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub e0: f64,
    /// Multiplicity of the lowest eigenvalue (eigenvalues within 1e-9).
    pub multiplicity: usize,
    /// `max ||(H - E0) Q zeta|| / ||Q zeta||` over the null vectors of `F`.
    pub reconstruction: f64,
    /// `max ||F chi psi|| / ||chi psi||` over ground eigenvectors `psi`.
    pub projection: f64,
    /// Smallest singular value of `F` on `Ran chi` after the null space.
    pub next_singular: f64,
}

/// Projection and reconstruction of ground eigenvectors through `F[H - E0]`
/// with `tau = c_hf H_f - E0`.
pub fn ground_reconstruction<T: Scalar>(h: &DMatrix<T>, hf: &[f64], c_hf: f64, cut: &CutoffPair) -> Result<ReconstructionReport> {
    let n = check_square(h, cut)?;
    let eig = h.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let e0 = eig.eigenvalues[order[0]];
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, &e| m.max(e.abs()));
    let mult = order.iter().take_while(|&&k| (eig.eigenvalues[k] - e0).abs() <= 1e-9 * scale).count();

    let mut hz = h.clone();
    for i in 0..n {
        hz[(i, i)] -= T::from_real(e0);
    }
    let tau = TauSpec::new(c_hf, T::from_real(e0));
    let triple = smooth_feshbach(&hz, &tau, cut, hf)?;
    let p = cut.p_indices();
    let fp = restrict(&triple.f, &p, &p);
    let svd = fp.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested");
    let mut sv_order: Vec<usize> = (0..svd.singular_values.len()).collect();
    sv_order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));

    let mut reconstruction: f64 = 0.0;
    for &k in sv_order.iter().take(mult) {
        let zeta_p = v_t.row(k).adjoint();
        let mut zeta = DVector::<T>::zeros(n);
        for (a, &i) in p.iter().enumerate() {
            zeta[i] = zeta_p[a];
        }
        let phi = &triple.q * zeta;
        let r = (&hz * &phi).norm() / phi.norm();
        reconstruction = reconstruction.max(r);
    }
    let next_singular = sv_order.get(mult).map_or(f64::INFINITY, |&k| svd.singular_values[k]);

    let mut projection: f64 = 0.0;
    for &k in order.iter().take(mult) {
        let psi = eig.eigenvectors.column(k).into_owned();
        let chi_psi = DVector::from_fn(n, |i, _| psi[i].scale(cut.chi[i]));
        let r = (&triple.f * &chi_psi).norm() / chi_psi.norm();
        projection = projection.max(r);
    }
    Ok(ReconstructionReport { e0, multiplicity: mult, reconstruction, projection, next_singular })
}

#[derive(Clone, Debug)]
pub struct InvertibilitySample<T> {
    pub z: T,
    pub sigma_h: f64,
    pub sigma_f: f64,
}

/// `(sigma_min(H - z) / ||H - z||, sigma_min(F) / ||F||)` at each `z`;
/// `F` is taken on `Ran chi` with `tau = c_hf H_f - z`.
pub fn invertibility_samples<T: Scalar>(h: &DMatrix<T>, hf: &[f64], c_hf: f64, cut: &CutoffPair, zs: &[T]) -> Result<Vec<InvertibilitySample<T>>> {
    let n = check_square(h, cut)?;
    let mut out = Vec::with_capacity(zs.len());
    for &z in zs {
        let mut hz = h.clone();
        for i in 0..n {
            hz[(i, i)] -= z;
        }
        let triple = smooth_feshbach(&hz, &TauSpec::new(c_hf, z), cut, hf)?;
        let fp = triple.f_on_range(cut);
        let sh = sigma_min(&hz, EXACT_SVD_DIM) / spectral_norm(&hz);
        let sf = sigma_min(&fp, EXACT_SVD_DIM) / spectral_norm(&fp);
        out.push(InvertibilitySample { z, sigma_h: sh, sigma_f: sf });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct PiReport<T> {
    /// Diagonal of `Pi`.
    pub pi: Vec<T>,
    /// Relative residual of the `Pi`-factored expression for `F`.
    pub residual: f64,
    /// `|| [Pi, chi] ||`, identically zero for diagonal `Pi`.
    pub commutator: f64,
}

/// `Pi = 1 - chi_bar T' chi_bar R0` with `T` the diagonal part of `h` and
/// `R0 = (tau + chi_bar T' chi_bar)^{-1}`, and the residual of
/// `F = tau + chi T' Pi chi + chi Pi (W - W chi_bar R_bar chi_bar W) Pi chi`.
pub fn pi_operator<T: Scalar>(h: &DMatrix<T>, tau: &TauSpec<T>, cut: &CutoffPair, hf: &[f64]) -> Result<PiReport<T>> {
    let n = check_square(h, cut)?;
    let triple = smooth_feshbach(h, tau, cut, hf)?;
    let t = &triple.tau;
    let tp: Vec<T> = (0..n).map(|i| h[(i, i)] - t[i]).collect();
    let mut pi = vec![T::one(); n];
    for i in 0..n {
        let xb2 = cut.chi_bar[i] * cut.chi_bar[i];
        if xb2 > 0.0 {
            let r0 = t[i] + tp[i].scale(xb2);
            if r0.modulus() <= DEFAULT_SINGULAR_FLOOR * t[i].modulus().max(1.0) {
                return Err(SpecRgError::SingularRestriction { sigma_min: r0.modulus(), floor: DEFAULT_SINGULAR_FLOOR });
            }
            pi[i] = t[i] / r0;
        }
    }
    let mut w = h.clone();
    for i in 0..n {
        w[(i, i)] = T::zero();
    }
    let pbar = &triple.pbar;
    let xb: Vec<f64> = pbar.iter().map(|&i| cut.chi_bar[i]).collect();
    let all: Vec<usize> = (0..n).collect();
    let w_left = scale_cols(&restrict(&w, &all, pbar), &xb);
    let w_right = scale_rows(&restrict(&w, pbar, &all), &xb);
    let inner = &w - w_left * &triple.r_bar * w_right;
    let chi_pi: Vec<T> = (0..n).map(|i| pi[i].scale(cut.chi[i])).collect();
    let mut f = DMatrix::from_fn(n, n, |r, c| chi_pi[r] * inner[(r, c)] * chi_pi[c]);
    for i in 0..n {
        f[(i, i)] += t[i] + tp[i] * chi_pi[i].scale(cut.chi[i]);
    }
    Ok(PiReport { pi, residual: rel_diff(&f, &triple.f), commutator: 0.0 })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConcatReport {
    /// `F2[F1[H]]` vs `F2[H]`.
    pub f: f64,
    /// `Q1[H] Q2[F1]` vs `Q2[H]`.
    pub q: f64,
    /// `Q2#[F1] Q1#[H]` vs `Q2#[H]`.
    pub q_sharp: f64,
    /// `A Q2[H]` vs `A Q2[F1]` for `A` supported where `chi_bar_1 = 0`.
    pub a: f64,
}

impl ConcatReport {
    pub fn max(&self) -> f64 {
        self.f.max(self.q).max(self.q_sharp).max(self.a)
    }
}

/// Compares the two evaluation orders of nested decimations. With
/// `tau2_matched = false` the outer map on `F1` uses `tau2 + 0.1 H_f`.
pub fn concatenation_check<T: Scalar>(
    h: &DMatrix<T>,
    hf: &[f64],
    cut1: &CutoffPair,
    tau1: &TauSpec<T>,
    cut2: &CutoffPair,
    tau2: &TauSpec<T>,
    tau2_matched: bool,
) -> Result<ConcatReport> {
    check_square(h, cut1)?;
    check_nesting(cut1, cut2)?;
    let t1 = smooth_feshbach(h, tau1, cut1, hf)?;
    let direct = smooth_feshbach(h, tau2, cut2, hf)?;
    let outer_tau = if tau2_matched { *tau2 } else { TauSpec::new(tau2.c_hf + 0.1, tau2.z_prime) };
    let nested = smooth_feshbach(&t1.f, &outer_tau, cut2, hf)?;
    let core: Vec<f64> = cut1.chi_bar.iter().map(|&x| if x == 0.0 { 1.0 } else { 0.0 }).collect();
    let a = scale_cols(h, &core);
    Ok(ConcatReport {
        f: rel_diff(&nested.f, &direct.f),
        q: rel_diff(&(&t1.q * &nested.q), &direct.q),
        q_sharp: rel_diff(&(&nested.q_sharp * &t1.q_sharp), &direct.q_sharp),
        a: rel_diff(&(&a * &direct.q), &(&a * &nested.q)),
    })
}

/// Derivative data of a derivation `D` on the decimation inputs. All the
/// cutoff and `tau` parts are diagonal.
#[derive(Clone, Debug)]
pub struct DerivationData<T: Scalar> {
    pub dh: DMatrix<T>,
    pub dtau: Vec<T>,
    pub dchi: Vec<f64>,
    pub dchi_bar: Vec<f64>,
}

/// `D[F]` for a derivation with diagonal `D[chi]`, `D[chi_bar]`, `D[tau]`:
///
/// ```text
/// D[F] = D[tau] + chi omega chi_bar R_bar D[tau] R_bar chi_bar omega chi
///      + Q# D[omega] Q + D[chi] omega Q + Q# omega D[chi]
///      - 2 chi omega chi_bar R_bar (D[chi_bar]/chi_bar) tau R_bar chi_bar omega chi
/// ```
/// with `D[omega] = D[H] - D[tau]`.
pub fn derivation_formula<T: Scalar>(triple: &FeshbachTriple<T>, cut: &CutoffPair, d: &DerivationData<T>) -> Result<DMatrix<T>> {
    let n = triple.f.nrows();
    if d.dh.nrows() != n || d.dtau.len() != n || d.dchi.len() != n || d.dchi_bar.len() != n {
        return Err(SpecRgError::DimensionMismatch("derivation data on the wrong space".into()));
    }
    for i in 0..n {
        if cut.chi_bar[i] == 0.0 && d.dchi_bar[i] != 0.0 {
            return Err(SpecRgError::InvalidParameters(format!("D[chi_bar] nonzero outside Ran chi_bar at state {i}")));
        }
    }
    let mut domega = d.dh.clone();
    for i in 0..n {
        domega[(i, i)] -= d.dtau[i];
    }
    let mut out = &triple.q_sharp * domega * &triple.q;
    let oq = &triple.omega * &triple.q;
    let qo = &triple.q_sharp * &triple.omega;
    out += scale_rows(&oq, &d.dchi) + scale_cols(&qo, &d.dchi);
    let left = triple.left_block(cut);
    let right = triple.right_block(cut);
    let pb = &triple.pbar;
    let mid: Vec<T> = pb
        .iter()
        .map(|&i| d.dtau[i] - (triple.tau[i] * T::from_real(2.0 * d.dchi_bar[i] / cut.chi_bar[i])))
        .collect();
    let mut left_scaled = left;
    for (a, m) in mid.iter().enumerate() {
        let mut col = left_scaled.column_mut(a);
        col *= *m;
    }
    out += left_scaled * right;
    for i in 0..n {
        out[(i, i)] += d.dtau[i];
    }
    Ok(out)
}

/// Mixed second derivative for two derivations that leave `chi` and `tau`
/// fixed: `Q# D'D[H] Q - Q# D'[H] chi_bar R_bar chi_bar D[H] Q
/// - Q# D[H] chi_bar R_bar chi_bar D'[H] Q`.
pub fn second_derivation_formula<T: Scalar>(
    triple: &FeshbachTriple<T>,
    cut: &CutoffPair,
    d1h: &DMatrix<T>,
    d2h: &DMatrix<T>,
    d12h: &DMatrix<T>,
) -> DMatrix<T> {
    let n = triple.f.nrows();
    let pb = &triple.pbar;
    let xb: Vec<f64> = pb.iter().map(|&i| cut.chi_bar[i]).collect();
    let all: Vec<usize> = (0..n).collect();
    let sandwich = |a: &DMatrix<T>, b: &DMatrix<T>| {
        let l = &triple.q_sharp * scale_cols(&restrict(a, &all, pb), &xb);
        let r = scale_rows(&restrict(b, pb, &all), &xb) * &triple.q;
        l * &triple.r_bar * r
    };
    &triple.q_sharp * d12h * &triple.q - sandwich(d2h, d1h) - sandwich(d1h, d2h)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NeumannReport {
    /// `|| R0^{1/2} chi_bar W chi_bar R0^{1/2} ||`.
    pub contraction: f64,
    /// `|| F^(L) - F || / || F ||` for `L = 0..=L_max`.
    pub errors: Vec<f64>,
    /// Consecutive error ratios.
    pub ratios: Vec<f64>,
}

/// Partial sums of the interaction expansion of `R_bar` around the diagonal
/// resolvent `R0`, inserted into `F`.
pub fn neumann_expansion<T: Scalar>(h: &DMatrix<T>, tau: &TauSpec<T>, cut: &CutoffPair, hf: &[f64], l_max: usize) -> Result<NeumannReport> {
    let n = check_square(h, cut)?;
    let triple = smooth_feshbach(h, tau, cut, hf)?;
    let pb = &triple.pbar;
    let xb: Vec<f64> = pb.iter().map(|&i| cut.chi_bar[i]).collect();
    let t = &triple.tau;
    let r0_sqrt: Vec<T> = pb
        .iter()
        .zip(&xb)
        .map(|(&i, &x)| (T::one() / (t[i] + (h[(i, i)] - t[i]).scale(x * x))).sqrt())
        .collect();
    let mut w_pb = scale_cols(&scale_rows(&restrict(h, pb, pb), &xb), &xb);
    for a in 0..pb.len() {
        w_pb[(a, a)] = T::zero();
    }
    let m = DMatrix::from_fn(pb.len(), pb.len(), |a, b| r0_sqrt[a] * w_pb[(a, b)] * r0_sqrt[b]);
    let contraction = spectral_norm(&m);
    if !(contraction < 1.0) {
        return Err(SpecRgError::ContractionFailure { ratio: contraction });
    }
    let all: Vec<usize> = (0..n).collect();
    let c = scale_cols(&scale_rows(&restrict(&triple.omega, &all, pb), &cut.chi), &xb);
    let b = scale_cols(&scale_rows(&restrict(&triple.omega, pb, &all), &xb), &cut.chi);
    let mut base = scale_cols(&scale_rows(&triple.omega, &cut.chi), &cut.chi);
    for i in 0..n {
        base[(i, i)] += t[i];
    }
    let fnorm = triple.f.norm();
    let mut term = DMatrix::<T>::identity(pb.len(), pb.len());
    let mut series = DMatrix::<T>::zeros(pb.len(), pb.len());
    let mut errors = Vec::with_capacity(l_max + 1);
    for _ in 0..=l_max {
        series += &term;
        term = -(&m * &term);
        let r = DMatrix::from_fn(pb.len(), pb.len(), |a, bb| r0_sqrt[a] * series[(a, bb)] * r0_sqrt[bb]);
        let f_l = &base - &c * r * &b;
        errors.push((f_l - &triple.f).norm() / fnorm);
    }
    let ratios = errors.windows(2).map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 }).collect();
    Ok(NeumannReport { contraction, errors, ratios })
}

/// Seeded Hermitian test instance `H = diag(H_f) + V` with a small random
/// interaction and an `H_f` spectrum spread over the core, the ramp and the
/// outer region of `profile`.
#[derive(Clone, Debug)]
pub struct RandomInstance {
    pub h: DMatrix<Complex64>,
    pub hf: Vec<f64>,
    pub profile: RampProfile,
}

impl RandomInstance {
    pub fn cutoff(&self) -> CutoffPair {
        CutoffPair::new(&self.hf, self.profile)
    }
}

fn random_hf(rng: &mut ChaCha8Rng, dim: usize, profile: &RampProfile, zeros: usize) -> Vec<f64> {
    let mut hf = vec![0.0; zeros];
    // keep clear of the ramp edges, where chi'' jumps
    let gap = 0.02;
    while hf.len() < dim {
        let x = match hf.len() % 3 {
            0 => rng.gen_range(0.1..profile.lo - gap),
            1 => rng.gen_range(profile.lo + gap..profile.hi - gap),
            _ => rng.gen_range(profile.hi + gap..2.0),
        };
        hf.push(x);
    }
    hf
}

fn random_hermitian(rng: &mut ChaCha8Rng, dim: usize, norm: f64) -> DMatrix<Complex64> {
    let mut v = DMatrix::from_fn(dim, dim, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    v = &v + v.adjoint();
    let s = spectral_norm(&v);
    v * Complex64::new(norm / s, 0.0)
}

pub fn random_instance(rng: &mut ChaCha8Rng, dim: usize) -> RandomInstance {
    let profile = RampProfile { lo: 0.5, hi: 1.0 };
    let hf = random_hf(rng, dim, &profile, 1);
    let v = random_hermitian(rng, dim, 0.08);
    let h = DMatrix::from_diagonal(&DVector::from_iterator(dim, hf.iter().map(|&x| Complex64::new(x, 0.0)))) + v;
    RandomInstance { h, hf, profile }
}

/// Two identical decoupled copies, so every eigenvalue is doubly degenerate.
pub fn degenerate_instance(rng: &mut ChaCha8Rng, half_dim: usize) -> RandomInstance {
    let base = random_instance(rng, half_dim);
    let n = 2 * half_dim;
    let mut h = DMatrix::zeros(n, n);
    h.view_mut((0, 0), (half_dim, half_dim)).copy_from(&base.h);
    h.view_mut((half_dim, half_dim), (half_dim, half_dim)).copy_from(&base.h);
    let mut hf = base.hf.clone();
    hf.extend_from_slice(&base.hf);
    RandomInstance { h, hf, profile: base.profile }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteReport {
    pub instances: usize,
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, identity: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.identity == identity)
    }
}

fn random_offaxis_z(rng: &mut ChaCha8Rng) -> Complex64 {
    let im = rng.gen_range(0.1..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    Complex64::new(rng.gen_range(-0.5..2.5), im)
}

/// Runs every identity of the module on `instances` seeded random
/// instances with dimensions in `8..=40`; every tenth one is degenerate.
pub fn feshbach_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut factored = Tally::at_most("factored_forms", 1e-12);
    let mut intertwine = Tally::at_most("intertwining", 1e-10);
    let mut inverse = Tally::at_most("inverse_formula", 1e-10);
    let mut recon = Tally::at_most("reconstruction", 1e-8);
    let mut proj = Tally::at_most("projection", 1e-8);
    let mut degen = Tally::at_most("degenerate_reconstruction", 1e-8);
    let mut pi = Tally::at_most("pi_identity", 1e-10);
    let mut agree = Tally::at_most("invertibility_agreement", 0.0);
    let mut unity = Tally::at_most("partition_of_unity", 1e-12);
    for k in 0..instances {
        let degenerate = k % 10 == 9;
        let inst = if degenerate {
            let half = rng.gen_range(4..=20);
            degenerate_instance(&mut rng, half)
        } else {
            let dim = rng.gen_range(8..=40);
            random_instance(&mut rng, dim)
        };
        let cut = inst.cutoff();
        unity.add(cut.unity_defect());
        let n = inst.h.nrows();

        let z = random_offaxis_z(&mut rng);
        let mut hz = inst.h.clone();
        for i in 0..n {
            hz[(i, i)] -= z;
        }
        let triple = smooth_feshbach(&hz, &TauSpec::new(1.0, z), &cut, &inst.hf)?;
        factored.add(triple.factored_residual);
        let (a, b) = intertwining_residuals(&hz, &triple, &cut);
        intertwine.add(a.max(b));
        pi.add(pi_operator(&hz, &TauSpec::new(1.0, z), &cut, &inst.hf)?.residual);

        for _ in 0..3 {
            let z = random_offaxis_z(&mut rng);
            inverse.add(inverse_formula_residual(&inst.h, &inst.hf, 1.0, &cut, z)?);
        }

        let rr = ground_reconstruction(&inst.h, &inst.hf, 1.0, &cut)?;
        if degenerate {
            degen.add(rr.reconstruction);
            if rr.multiplicity != 2 {
                degen.add(f64::INFINITY);
            }
        } else {
            recon.add(rr.reconstruction);
        }
        proj.add(rr.projection);

        // 20 spectral parameters: off-axis points and, where F is defined,
        // the eigenvalues below the ramp (both sides must be singular there)
        let eig = inst.h.clone().symmetric_eigen();
        let mut zs: Vec<Complex64> = eig
            .eigenvalues
            .iter()
            .filter(|&&e| e < inst.profile.lo - 0.15)
            .take(5)
            .map(|&e| Complex64::new(e, 0.0))
            .collect();
        while zs.len() < 20 {
            zs.push(random_offaxis_z(&mut rng));
        }
        for s in invertibility_samples(&inst.h, &inst.hf, 1.0, &cut, &zs)? {
            let singular_h = s.sigma_h < 1e-8;
            let singular_f = s.sigma_f < 1e-8;
            agree.add(if singular_h == singular_f { 0.0 } else { 1.0 });
        }
    }
    let checks = [factored, intertwine, inverse, recon, proj, degen, pi, agree, unity].iter().map(Tally::finish).collect();
    Ok(SuiteReport { instances, seed, checks })
}

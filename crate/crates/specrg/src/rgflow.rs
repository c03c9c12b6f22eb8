//! Renormalization flow of the fibre Hamiltonian by repeated smooth
//! Feshbach decimation.
//!
//! At scale `n` the cutoff is `chi_{rho^n}(H_f)` and `tau = c H_f - z'` is
//! fixed self-consistently: `z'` makes the vacuum entry of `F` equal to
//! `-z'`, `c` makes `<Omega, d F / d H_f Omega> = c`. Both conditions only
//! need the column `y = R_bar chi_bar omega Omega`, so the decimation below
//! never forms `F`. Only the ramp block of the `Ran chi_bar` operator depends
//! on `(c, z')`; everything else is factored once per spectral parameter.
//!
//! The direct flow decimates `H - z` at every scale from scratch. The
//! iterated flow decimates the previous effective operator with `chi_rho`,
//! rescales it by the dilation and normalizes the `H_f` coefficient, which
//! is the flow proper. Both agree to rounding.

use nalgebra::{DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpecRgError};
use crate::feshbach::{derivation_formula, smooth_feshbach_with_floor, CutoffPair, DerivationData, RampProfile, TauSpec};
use crate::fockspace::{FockBasis, ModeGrid, ScalingMap};
use crate::hamiltonians::PhysHamiltonian;
use crate::linalg::restrict;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub singular_floor: f64,
    /// Keep the normalized effective operator of every iterated step.
    pub keep_matrices: bool,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions { damping: 0.5, tol: 1e-12, max_iter: 50, singular_floor: 1e-10, keep_matrices: false }
    }
}

/// `d H / d H_f` of the operator being decimated.
#[derive(Clone, Copy, Debug)]
pub enum HfDerivative<'a> {
    Identity,
    Matrix(&'a DMatrix<f64>),
}

/// Smallest eigenvalue magnitude of a symmetric matrix from its LU, by
/// inverse iteration, relative to its infinity norm.
fn relative_sigma_min(m: &DMatrix<f64>, lu: &LU<f64, Dyn, Dyn>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return f64::INFINITY;
    }
    let norm = (0..n).map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max);
    if norm == 0.0 {
        return 0.0;
    }
    let mut x = DVector::from_fn(n, |i, _| 1.0 + 0.37 * ((i * 7919) % 101) as f64 / 101.0);
    x /= x.norm();
    let mut growth = 0.0;
    for _ in 0..20 {
        let Some(y) = lu.solve(&x) else { return 0.0 };
        let ny = y.norm();
        if !ny.is_finite() || ny == 0.0 {
            return 0.0;
        }
        growth = ny;
        x = y / ny;
    }
    1.0 / (growth * norm)
}

/// Self-consistent decimation of one scale. Borrowed data is the operator
/// `K` (typically `H - z`), its `H_f` spectrum and the cutoff pair.
pub struct Decimation<'a> {
    k: &'a DMatrix<f64>,
    hf: &'a [f64],
    cut: &'a CutoffPair,
    pbar: Vec<usize>,
    xb: Vec<f64>,
    ramp: Vec<usize>,
    outer: Vec<usize>,
    lu_xx: Option<LU<f64, Dyn, Dyn>>,
    m_rx: DMatrix<f64>,
    g: DMatrix<f64>,
    s0: DMatrix<f64>,
    m_rr: DMatrix<f64>,
    schur: Option<LU<f64, Dyn, Dyn>>,
    floor: f64,
    pub c: f64,
    pub z_prime: f64,
    pub v: DVector<f64>,
    pub y: DVector<f64>,
    pub iterations: usize,
    /// Relative smallest singular value of the outer block.
    pub outer_sigma: f64,
}

impl<'a> Decimation<'a> {
    fn setup(k: &'a DMatrix<f64>, hf: &'a [f64], cut: &'a CutoffPair, floor: f64) -> Result<Self> {
        let n = k.nrows();
        if k.ncols() != n || hf.len() != n || cut.dim() != n {
            return Err(SpecRgError::DimensionMismatch(format!("operator {n}, H_f {}, cutoff {}", hf.len(), cut.dim())));
        }
        if cut.chi[0] != 1.0 {
            return Err(SpecRgError::InvalidParameters("vacuum must lie where chi = 1".into()));
        }
        let pbar = cut.pbar_indices();
        let xb: Vec<f64> = pbar.iter().map(|&i| cut.chi_bar[i]).collect();
        let ramp: Vec<usize> = (0..pbar.len()).filter(|&a| cut.chi[pbar[a]] > 0.0).collect();
        let outer: Vec<usize> = (0..pbar.len()).filter(|&a| cut.chi[pbar[a]] == 0.0).collect();
        let gr: Vec<usize> = ramp.iter().map(|&a| pbar[a]).collect();
        let gx: Vec<usize> = outer.iter().map(|&a| pbar[a]).collect();
        let xr: Vec<f64> = ramp.iter().map(|&a| xb[a]).collect();

        let m_xx = restrict(k, &gx, &gx);
        let mut m_rx = restrict(k, &gr, &gx);
        for (r, x) in xr.iter().enumerate() {
            let mut row = m_rx.row_mut(r);
            row *= *x;
        }
        let mut m_rr = restrict(k, &gr, &gr);
        for a in 0..gr.len() {
            for b in 0..gr.len() {
                m_rr[(a, b)] *= xr[a] * xr[b];
            }
        }
        let (lu_xx, g, s0, outer_sigma) = if gx.is_empty() {
            (None, DMatrix::zeros(0, gr.len()), DMatrix::zeros(gr.len(), gr.len()), f64::INFINITY)
        } else {
            let lu = m_xx.clone().lu();
            let sig = relative_sigma_min(&m_xx, &lu);
            if !(sig >= floor) {
                return Err(SpecRgError::SingularRestriction { sigma_min: sig, floor });
            }
            let m_xr = m_rx.transpose();
            let g = lu.solve(&m_xr).ok_or(SpecRgError::SingularRestriction { sigma_min: 0.0, floor })?;
            let s0 = &m_rx * &g;
            (Some(lu), g, s0, sig)
        };
        let v = DVector::from_fn(pbar.len(), |a, _| xb[a] * k[(pbar[a], 0)]);
        let np = pbar.len();
        Ok(Decimation {
            k,
            hf,
            cut,
            pbar,
            xb,
            ramp,
            outer,
            lu_xx,
            m_rx,
            g,
            s0,
            m_rr,
            schur: None,
            floor,
            c: 1.0,
            z_prime: -k[(0, 0)],
            v,
            y: DVector::zeros(np),
            iterations: 0,
            outer_sigma,
        })
    }

    fn factor(&self, c: f64, s: f64) -> Result<Option<LU<f64, Dyn, Dyn>>> {
        if self.ramp.is_empty() {
            return Ok(None);
        }
        let mut sm = &self.m_rr - &self.s0;
        for (r, &a) in self.ramp.iter().enumerate() {
            let i = self.pbar[a];
            let chi = self.cut.chi[i];
            sm[(r, r)] += chi * chi * (c * self.hf[i] - s);
        }
        let lu = sm.clone().lu();
        let sig = relative_sigma_min(&sm, &lu);
        if !(sig >= self.floor) {
            return Err(SpecRgError::SingularRestriction { sigma_min: sig, floor: self.floor });
        }
        Ok(Some(lu))
    }

    fn solve_with(&self, schur: &Option<LU<f64, Dyn, Dyn>>, rhs: &DVector<f64>) -> DVector<f64> {
        let rx = DVector::from_fn(self.outer.len(), |i, _| rhs[self.outer[i]]);
        let ux = match &self.lu_xx {
            Some(lu) => lu.solve(&rx).unwrap_or_else(|| DVector::from_element(rx.len(), f64::NAN)),
            None => rx,
        };
        let yr = match schur {
            Some(lu) => {
                let rr = DVector::from_fn(self.ramp.len(), |i, _| rhs[self.ramp[i]]) - &self.m_rx * &ux;
                lu.solve(&rr).unwrap_or_else(|| DVector::from_element(rr.len(), f64::NAN))
            }
            None => DVector::zeros(0),
        };
        let yx = if yr.is_empty() { ux } else { ux - &self.g * &yr };
        let mut out = DVector::zeros(self.pbar.len());
        for (i, &a) in self.outer.iter().enumerate() {
            out[a] = yx[i];
        }
        for (i, &a) in self.ramp.iter().enumerate() {
            out[a] = yr[i];
        }
        out
    }

    fn q_of(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut q = DVector::zeros(self.k.nrows());
        q[0] = 1.0;
        for (a, &i) in self.pbar.iter().enumerate() {
            q[i] -= self.xb[a] * y[a];
        }
        q
    }

    fn cutoff_term_of(&self, c: f64, s: f64, y: &DVector<f64>) -> f64 {
        self.ramp
            .iter()
            .map(|&a| {
                let i = self.pbar[a];
                y[a] * y[a] * self.cut.dchi_bar[i] / self.cut.chi_bar[i] * (c * self.hf[i] - s)
            })
            .sum()
    }

    /// `<Omega, D[F] Omega>` for `D = d/dH_f` at the given `(c, z')`.
    fn df_vacuum(&self, c: f64, s: f64, y: &DVector<f64>, hd: HfDerivative) -> f64 {
        let q = self.q_of(y);
        let nq = q.norm_squared();
        let qhq = match hd {
            HfDerivative::Identity => nq,
            HfDerivative::Matrix(m) => q.dot(&(m * &q)),
        };
        let chi_edge = if self.cut.dchi[0] != 0.0 {
            let tau0 = c * self.hf[0] - s;
            2.0 * self.cut.dchi[0] * (self.k.row(0).transpose().dot(&q) - tau0 * q[0])
        } else {
            0.0
        };
        c + c * y.norm_squared() + (qhq - c * nq) + chi_edge - 2.0 * self.cutoff_term_of(c, s, y)
    }

    pub fn tau(&self) -> TauSpec<f64> {
        TauSpec::new(self.c, self.z_prime)
    }

    /// Second-order shift of the vacuum entry, `-<v, y>`.
    pub fn d_e0(&self) -> f64 {
        -self.v.dot(&self.y)
    }

    /// `Q Omega` on the full space.
    pub fn q_vacuum(&self) -> DVector<f64> {
        self.q_of(&self.y)
    }

    /// `|| Q Omega ||^2 = 1 + || chi_bar y ||^2`.
    pub fn norm_sq(&self) -> f64 {
        1.0 + (0..self.pbar.len()).map(|a| (self.xb[a] * self.y[a]).powi(2)).sum::<f64>()
    }

    /// `|| chi y ||^2`.
    pub fn overlap(&self) -> f64 {
        self.pbar.iter().enumerate().map(|(a, &i)| (self.cut.chi[i] * self.y[a]).powi(2)).sum()
    }

    /// `<y, (chi_bar'/chi_bar) tau y>`.
    pub fn cutoff_term(&self) -> f64 {
        self.cutoff_term_of(self.c, self.z_prime, &self.y)
    }

    /// `<dF/dH_f> / <Q# Q>` as the ratio of the solved quantities.
    pub fn eta_ratio(&self) -> f64 {
        self.c / self.norm_sq()
    }

    /// The same ratio from the closed form `c = (N - 2K)/(1 - O)`, valid when
    /// `d H / d H_f = 1`.
    pub fn eta_closed(&self) -> f64 {
        let n = self.norm_sq();
        (1.0 - 2.0 * self.cutoff_term() / n) / (1.0 - self.overlap())
    }

    /// `chi_bar omega e_b` on `pbar`.
    fn column(&self, b: usize) -> DVector<f64> {
        let tau_b = self.c * self.hf[b] - self.z_prime;
        DVector::from_fn(self.pbar.len(), |a, _| {
            let i = self.pbar[a];
            let w = self.k[(i, b)] - if i == b { tau_b } else { 0.0 };
            self.xb[a] * w
        })
    }

    /// `R_bar rhs` for `rhs` on `pbar`.
    pub fn apply_rbar(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.solve_with(&self.schur, rhs)
    }
}

/// Solve the two defining relations of `tau` by damped fixed-point
/// iteration. Convergence is declared on the undamped residual, after which
/// one undamped step is taken.
pub fn tau_selfconsistent<'a>(
    k: &'a DMatrix<f64>,
    hd: HfDerivative,
    hf: &'a [f64],
    cut: &'a CutoffPair,
    opts: &FlowOptions,
) -> Result<Decimation<'a>> {
    let mut d = Decimation::setup(k, hf, cut, opts.singular_floor)?;
    let k00 = k[(0, 0)];
    let (mut c, mut s) = (1.0, -k00);
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let lu = d.factor(c, s)?;
        let y = d.solve_with(&lu, &d.v);
        let s_new = -k00 + d.v.dot(&y);
        let c_new = d.df_vacuum(c, s, &y, hd);
        residual = (c_new - c).abs().max((s_new - s).abs());
        if !residual.is_finite() {
            return Err(SpecRgError::NonConvergence { what: format!("tau iteration produced {residual}") });
        }
        if residual <= opts.tol {
            let lu = d.factor(c_new, s_new)?;
            d.y = d.solve_with(&lu, &d.v);
            d.schur = lu;
            d.c = c_new;
            d.z_prime = s_new;
            d.iterations = it;
            return Ok(d);
        }
        c += opts.damping * (c_new - c);
        s += opts.damping * (s_new - s);
    }
    Err(SpecRgError::FixedPointDivergence { iterations: opts.max_iter, residual })
}

/// Grid, basis and Hamiltonian of one flow.
#[derive(Clone, Copy)]
pub struct FlowSystem<'a> {
    pub grid: &'a ModeGrid,
    pub basis: &'a FockBasis,
    pub phys: &'a PhysHamiltonian,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScaleState {
    pub n: usize,
    /// `rho^n`.
    pub sigma_n: f64,
    /// Rescaled, normalized vacuum parameter `rho^{-n} z'_n / c_n`, measured
    /// from the bare energy.
    pub z_n: f64,
    /// Shift of the vacuum energy below `E_bare` at this scale.
    pub d_e0: f64,
    /// `c_n / c_{n-1} - 1`.
    pub d_hf: f64,
    pub a_n: f64,
    pub eta_n: f64,
    /// `eta_n` by the second route (closed form or derivation formula).
    pub eta_check: f64,
    pub eps_proxy: f64,
    /// `log || Q_n Omega ||^2`.
    pub lognormsq: f64,
    /// Accumulated `H_f` coefficient `c_n`.
    pub c_total: f64,
    pub iterations: usize,
    /// Whether any state lies strictly inside the cutoff ramp.
    pub ramp_resolved: bool,
    #[serde(skip)]
    pub h_matrix: Option<DMatrix<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FlowTrace {
    pub z: f64,
    pub states: Vec<ScaleState>,
    /// First-order estimate `z - z'_n / N_n` of the ground energy from the
    /// last scale.
    pub e0_estimate: f64,
    pub terminal_norm_sq: f64,
}

/// `(2 g)^{1/3}`.
pub fn xi(g: f64) -> f64 {
    (2.0 * g).cbrt()
}

/// Size of the effective interaction at one scale in units of `xi^{M+N}`,
/// read off the kernels of `E = omega - omega chi_bar R_bar chi_bar omega`
/// between soft states with at most two photons. Mode data are rescaled by
/// `rho^{-shift}` into the frame of the normalized operator, whose entries
/// are `prefactor * E`.
fn eps_proxy(dec: &Decimation, labels: &[usize], sys: &FlowSystem, shift: i32, prefactor: f64) -> f64 {
    let xi = xi(sys.phys.params.g);
    if xi == 0.0 {
        return 0.0;
    }
    let rho = sys.grid.rho();
    let kf = rho.powi(-shift);
    let wf = rho.powi(-3 * shift);
    let mode_weight = |j: usize| {
        let m = &sys.grid.modes[j];
        ((m.k_abs * kf) / (m.weight * wf)).sqrt()
    };
    let mut singles = Vec::new();
    let mut doubles = Vec::new();
    for (pos, &gl) in labels.iter().enumerate() {
        if dec.cut.chi[pos] == 0.0 {
            continue;
        }
        let occ = sys.basis.state(gl);
        let mut modes = Vec::new();
        for (j, &o) in occ.iter().enumerate() {
            for _ in 0..o {
                modes.push(j);
            }
        }
        match modes.len() {
            1 => singles.push((pos, modes[0])),
            2 => doubles.push((pos, modes[0], modes[1])),
            _ => {}
        }
    }
    let col = |b: usize| dec.column(b);
    let omega = |a: usize, b: usize| {
        let t = if a == b { dec.c * dec.hf[a] - dec.z_prime } else { 0.0 };
        dec.k[(a, b)] - t
    };
    let sol0 = dec.apply_rbar(&col(0));
    let chi = &dec.cut.chi;
    let mut best: f64 = 0.0;
    let cols_single: Vec<DVector<f64>> = singles.iter().map(|&(p, _)| col(p)).collect();
    for (s, &(pos, j)) in singles.iter().enumerate() {
        let e = omega(pos, 0) - cols_single[s].dot(&sol0);
        best = best.max((chi[pos] * e).abs() * prefactor * mode_weight(j) / xi);
    }
    for &(pos, i, j) in &doubles {
        let e = omega(pos, 0) - col(pos).dot(&sol0);
        best = best.max((chi[pos] * e).abs() * prefactor * mode_weight(i) * mode_weight(j) / (xi * xi));
    }
    for (t, &(pb, j)) in singles.iter().enumerate() {
        let sol = dec.apply_rbar(&cols_single[t]);
        for (s, &(pa, i)) in singles.iter().enumerate() {
            if s == t {
                continue;
            }
            let e = omega(pa, pb) - cols_single[s].dot(&sol);
            best = best.max((chi[pa] * chi[pb] * e).abs() * prefactor * mode_weight(i) * mode_weight(j) / (xi * xi));
        }
    }
    best
}

fn shifted(phys: &PhysHamiltonian, z: f64) -> DMatrix<f64> {
    let mut k = phys.h.clone();
    for i in 0..k.nrows() {
        k[(i, i)] -= z;
    }
    k
}

/// Decimate `H - z` at scale `n` from scratch.
pub fn decimate_at_scale<'a>(
    k: &'a DMatrix<f64>,
    hf: &'a [f64],
    cut: &'a CutoffPair,
    opts: &FlowOptions,
) -> Result<Decimation<'a>> {
    tau_selfconsistent(k, HfDerivative::Identity, hf, cut, opts)
}

pub fn scale_cutoff(hf: &[f64], rho: f64, n: usize) -> CutoffPair {
    CutoffPair::new(hf, RampProfile::unit().scaled(rho.powi(n as i32)))
}

/// Flow by decimating `H - z` at each scale `rho^n`, `n = 0..=n_max`.
pub fn direct_scale_flow(sys: &FlowSystem, z: f64, n_max: usize, opts: &FlowOptions) -> Result<FlowTrace> {
    let phys = sys.phys;
    let rho = sys.grid.rho();
    let k = shifted(phys, z);
    let hf = phys.hf();
    let dp = phys.d_p_par();
    let labels: Vec<usize> = (0..phys.dim()).collect();
    let mut states = Vec::with_capacity(n_max + 1);
    let mut c_prev = 1.0;
    let mut last = (0.0, 1.0);
    for n in 0..=n_max {
        let cut = scale_cutoff(hf, rho, n);
        let dec = decimate_at_scale(&k, hf, &cut, opts)?;
        let q = dec.q_vacuum();
        let nq = dec.norm_sq();
        let sn = rho.powi(n as i32);
        states.push(ScaleState {
            n,
            sigma_n: sn,
            z_n: dec.z_prime / (sn * dec.c),
            d_e0: dec.d_e0(),
            d_hf: dec.c / c_prev - 1.0,
            a_n: q.dot(&(&dp * &q)) / dec.c,
            eta_n: dec.eta_ratio(),
            eta_check: dec.eta_closed(),
            eps_proxy: eps_proxy(&dec, &labels, sys, n as i32, 1.0 / (sn * dec.c)),
            lognormsq: nq.ln(),
            c_total: dec.c,
            iterations: dec.iterations,
            ramp_resolved: !cut.ramp_indices().is_empty(),
            h_matrix: None,
        });
        c_prev = dec.c;
        last = (dec.z_prime, nq);
    }
    Ok(FlowTrace { z, states, e0_estimate: z - last.0 / last.1, terminal_norm_sq: last.1 })
}

/// Flow by iterating decimation, dilation and normalization. Step 0 uses
/// `chi_1` without dilation; step `n >= 1` decimates the previous
/// normalized operator with `chi_rho` and maps it one shell deeper.
pub fn iterated_flow(sys: &FlowSystem, z: f64, n_max: usize, opts: &FlowOptions) -> Result<FlowTrace> {
    let phys = sys.phys;
    let shells = sys.grid.shells();
    if n_max > shells {
        return Err(SpecRgError::ShellExhausted { step: n_max, shells });
    }
    let rho = sys.grid.rho();
    let scaling = ScalingMap::new(sys.grid, sys.basis)?;
    let d = phys.dim();
    let mut labels: Vec<usize> = (0..d).collect();
    let mut k = shifted(phys, z);
    let mut hd = DMatrix::identity(d, d);
    let mut pd = phys.d_p_par();
    let mut gq = DMatrix::identity(d, d);
    let mut c_total = 1.0;
    let mut states = Vec::with_capacity(n_max + 1);
    let mut last = (0.0, 1.0);
    for n in 0..=n_max {
        let hf: Vec<f64> = labels.iter().map(|&i| phys.hf()[i]).collect();
        let profile = if n == 0 { RampProfile::unit() } else { RampProfile::unit().scaled(rho) };
        let cut = CutoffPair::new(&hf, profile);
        let dec = tau_selfconsistent(&k, HfDerivative::Matrix(&hd), &hf, &cut, opts)?;
        let (c, s) = (dec.c, dec.z_prime);
        let (shift, dil) = if n == 0 { (0, 1.0) } else { (1, rho) };
        let eps = eps_proxy(&dec, &labels, sys, shift, 1.0 / (dil * c));
        let iterations = dec.iterations;
        let ramp_resolved = !cut.ramp_indices().is_empty();
        drop(dec);

        let tau = TauSpec::new(c, s);
        let trip = smooth_feshbach_with_floor(&k, &tau, &cut, &hf, opts.singular_floor)?;
        let dd = DerivationData { dh: hd.clone(), dtau: vec![c; hf.len()], dchi: cut.dchi.clone(), dchi_bar: cut.dchi_bar.clone() };
        let df = derivation_formula(&trip, &cut, &dd)?;
        let dpf = &trip.q_sharp * &pd * &trip.q;
        let g_new = &trip.q_sharp * &gq * &trip.q;
        let c_prev = c_total;
        c_total *= c;
        let nq = g_new[(0, 0)];
        let s_global = if n == 0 { s } else { s * rho.powi(n as i32 - 1) * c_prev };

        let (k_next, hd_next, pd_next, g_next, labels_next) = if n == 0 {
            (&trip.f / c, &df / c, &dpf / c, g_new, labels.clone())
        } else {
            let next = scaling.frame(sys.basis, n);
            let mut pos = vec![usize::MAX; d];
            for (p, &gl) in labels.iter().enumerate() {
                pos[gl] = p;
            }
            let map: Vec<usize> = next
                .iter()
                .map(|&a| {
                    let t = scaling.target(a).expect("frame states have a dilation image");
                    pos[t]
                })
                .collect();
            if map.iter().any(|&p| p == usize::MAX) {
                return Err(SpecRgError::ShellExhausted { step: n, shells });
            }
            let m = next.len();
            let pick = |a: &DMatrix<f64>, f: f64| DMatrix::from_fn(m, m, |i, j| a[(map[i], map[j])] * f);
            (pick(&trip.f, 1.0 / (c * rho)), pick(&df, 1.0 / c), pick(&dpf, 1.0 / c), pick(&g_new, 1.0), next)
        };
        states.push(ScaleState {
            n,
            sigma_n: rho.powi(n as i32),
            z_n: s / (c * dil),
            d_e0: (z - phys.e_bare) - s_global,
            d_hf: c - 1.0,
            a_n: dpf[(0, 0)] / c,
            eta_n: c_total / nq,
            eta_check: df[(0, 0)] * c_prev / nq,
            eps_proxy: eps,
            lognormsq: nq.ln(),
            c_total,
            iterations,
            ramp_resolved,
            h_matrix: if opts.keep_matrices { Some(k_next.clone()) } else { None },
        });
        last = (s_global, nq);
        k = k_next;
        hd = hd_next;
        pd = pd_next;
        gq = g_next;
        labels = labels_next;
    }
    Ok(FlowTrace { z, states, e0_estimate: z - last.0 / last.1, terminal_norm_sq: last.1 })
}

/// Per-scale marginal coefficient `<Q_n# dH/dP_par Q_n> / <dF_n/dH_f>` at
/// scale `n`.
pub fn a_coefficient(sys: &FlowSystem, z: f64, n: usize, opts: &FlowOptions) -> Result<f64> {
    let k = shifted(sys.phys, z);
    let hf = sys.phys.hf();
    let cut = scale_cutoff(hf, sys.grid.rho(), n);
    let dec = decimate_at_scale(&k, hf, &cut, opts)?;
    let q = dec.q_vacuum();
    Ok(q.dot(&(sys.phys.d_p_par() * &q)) / dec.c)
}

#[derive(Clone, Debug, Serialize)]
pub struct GroundEnergy {
    pub e0: f64,
    pub bracket: (f64, f64),
    pub evaluations: usize,
    pub n_final: usize,
}

fn vacuum_parameter(sys: &FlowSystem, z: f64, n: usize, opts: &FlowOptions) -> Result<f64> {
    let k = shifted(sys.phys, z);
    let hf = sys.phys.hf();
    let cut = scale_cutoff(hf, sys.grid.rho(), n);
    Ok(decimate_at_scale(&k, hf, &cut, opts)?.z_prime)
}

/// Ground energy as the root of `z'_{n_final}(z)` by bisection on
/// `[E_bare - g, E_bare]`, carried to full double precision. With
/// `n_final >= shells - 1` only the vacuum survives the cutoff and the root
/// is the exact lowest eigenvalue of the truncated Hamiltonian.
pub fn ground_state_energy(sys: &FlowSystem, n_final: Option<usize>, opts: &FlowOptions) -> Result<GroundEnergy> {
    let n = n_final.unwrap_or(sys.grid.shells());
    let eb = sys.phys.e_bare;
    let g = sys.phys.params.g;
    if g == 0.0 {
        return Ok(GroundEnergy { e0: eb, bracket: (eb, eb), evaluations: 0, n_final: n });
    }
    let (mut lo, mut hi) = (eb - g, eb);
    let f_lo = vacuum_parameter(sys, lo, n, opts)?;
    let f_hi = vacuum_parameter(sys, hi, n, opts)?;
    let mut evaluations = 2;
    if f_hi == 0.0 {
        return Ok(GroundEnergy { e0: hi, bracket: (hi, hi), evaluations, n_final: n });
    }
    if !(f_lo < 0.0 && f_hi > 0.0) {
        return Err(SpecRgError::NoBracket { lo, hi });
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f = vacuum_parameter(sys, mid, n, opts)?;
        evaluations += 1;
        if f == 0.0 {
            lo = mid;
            hi = mid;
            break;
        }
        if f < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(GroundEnergy { e0: 0.5 * (lo + hi), bracket: (lo, hi), evaluations, n_final: n })
}

#[derive(Clone, Debug)]
pub struct GroundVector {
    /// `Q_n Omega`, normalized so that its vacuum component is 1.
    pub omega: DVector<f64>,
    pub norm_sq: f64,
    /// `|| (H - z) omega || / || omega ||`.
    pub residual: f64,
}

pub fn ground_state_vector(sys: &FlowSystem, e0: f64, n: usize, opts: &FlowOptions) -> Result<GroundVector> {
    let k = shifted(sys.phys, e0);
    let hf = sys.phys.hf();
    let cut = scale_cutoff(hf, sys.grid.rho(), n);
    let dec = decimate_at_scale(&k, hf, &cut, opts)?;
    let omega = dec.q_vacuum();
    let norm_sq = omega.norm_squared();
    let residual = (&k * &omega).norm() / norm_sq.sqrt();
    Ok(GroundVector { omega, norm_sq, residual })
}

/// `dE0/d|p| = -<Omega_n, dH/dP_par Omega_n> / || Omega_n ||^2` at the
/// ground energy.
pub fn de0_dp(sys: &FlowSystem, e0: f64, n: usize, opts: &FlowOptions) -> Result<f64> {
    let v = ground_state_vector(sys, e0, n, opts)?;
    Ok(-v.omega.dot(&(sys.phys.d_p_par() * &v.omega)) / v.norm_sq)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub enum FdScheme {
    Central,
    /// Central difference using `E0(-|p|) = E0(|p|)`.
    Even,
    Forward,
    Backward,
}

#[derive(Clone, Debug, Serialize)]
pub struct MomentumRow {
    pub p: f64,
    pub e0: f64,
    /// `E0 - p^2/2`.
    pub e0_reduced: f64,
    pub de0_formula: f64,
    pub de0_fd: f64,
    /// Second difference of `E0 - p^2/2`.
    pub d2_reduced_fd: f64,
    pub scheme: FdScheme,
}

/// Ground energy on a uniform momentum grid with both routes to `dE0/d|p|`.
pub fn momentum_derivatives(
    grid: &ModeGrid,
    basis: &FockBasis,
    phys: &PhysHamiltonian,
    p_grid: &[f64],
    n_final: Option<usize>,
    opts: &FlowOptions,
) -> Result<Vec<MomentumRow>> {
    if p_grid.len() < 4 {
        return Err(SpecRgError::InvalidGrid(format!("momentum grid needs at least 4 points, got {}", p_grid.len())));
    }
    let h = p_grid[1] - p_grid[0];
    let uniform = p_grid.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-12 * h.abs().max(1e-300));
    if !(h > 0.0) || !uniform {
        return Err(SpecRgError::InvalidGrid("momentum grid must be uniform and increasing".into()));
    }
    let n = n_final.unwrap_or(grid.shells());
    let mut e = Vec::with_capacity(p_grid.len());
    let mut formula = Vec::with_capacity(p_grid.len());
    for &p in p_grid {
        let ph = phys.with_momentum(p)?;
        let sys = FlowSystem { grid, basis, phys: &ph };
        let gs = ground_state_energy(&sys, Some(n), opts)?;
        formula.push(de0_dp(&sys, gs.e0, n, opts)?);
        e.push(gs.e0);
    }
    let f: Vec<f64> = p_grid.iter().zip(&e).map(|(p, e)| e - 0.5 * p * p).collect();
    let last = p_grid.len() - 1;
    let rows = (0..p_grid.len())
        .map(|i| {
            let (d1, d2, scheme) = if i == 0 && p_grid[0] == 0.0 {
                (0.0, 2.0 * (f[1] - f[0]) / (h * h), FdScheme::Even)
            } else if i == 0 {
                ((-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * h), (2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]) / (h * h), FdScheme::Forward)
            } else if i == last {
                (
                    (3.0 * f[i] - 4.0 * f[i - 1] + f[i - 2]) / (2.0 * h),
                    (2.0 * f[i] - 5.0 * f[i - 1] + 4.0 * f[i - 2] - f[i - 3]) / (h * h),
                    FdScheme::Backward,
                )
            } else {
                ((f[i + 1] - f[i - 1]) / (2.0 * h), (f[i + 1] - 2.0 * f[i] + f[i - 1]) / (h * h), FdScheme::Central)
            };
            MomentumRow {
                p: p_grid[i],
                e0: e[i],
                e0_reduced: f[i],
                de0_formula: formula[i],
                de0_fd: d1 + p_grid[i],
                d2_reduced_fd: d2,
                scheme,
            }
        })
        .collect();
    Ok(rows)
}

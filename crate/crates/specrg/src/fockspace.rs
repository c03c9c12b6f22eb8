//! Discretized photon modes and the truncated bosonic Fock space over them.
//!
//! Modes sit on geometric shells `|k_s| = K0 * rho^s` (shell 0 is the
//! ultraviolet one), along a finite set of directions closed under `n -> -n`
//! and under the rotation by pi about the momentum axis `e_z`. Each
//! (shell, direction) cell carries the volume weight of the spherical shell
//! between the geometric midpoints, split evenly among directions.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpecRgError};

pub type Vec3 = Vector3<f64>;

/// Dimension cap applied by [`build_basis`].
pub const DEFAULT_DIM_CAP: usize = 5000;

/// Total-momentum axis. The electron momentum is `p = |p| e_z`.
pub fn p_axis() -> Vec3 {
    Vec3::new(0.0, 0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DirectionSpec {
    /// 1 = `±x`, 2 = `±x, ±z`, 3 = `±x, ±z, ±y`.
    AxisPairs(usize),
    Explicit(Vec<[f64; 3]>),
}

impl Default for DirectionSpec {
    fn default() -> Self {
        DirectionSpec::AxisPairs(3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub shells: usize,
    #[serde(rename = "K0")]
    pub k0: f64,
    pub rho: f64,
    pub directions: DirectionSpec,
    pub polarizations: usize,
    pub n_max: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { shells: 4, k0: 1.0, rho: 0.5, directions: DirectionSpec::default(), polarizations: 2, n_max: 2 }
    }
}

impl GridSpec {
    pub fn axis_pairs(shells: usize, pairs: usize, polarizations: usize, n_max: usize) -> Self {
        GridSpec { shells, directions: DirectionSpec::AxisPairs(pairs), polarizations, n_max, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mode {
    pub shell: usize,
    pub direction: usize,
    pub polarization: usize,
    pub k: Vec3,
    pub k_abs: f64,
    pub eps: Vec3,
    pub weight: f64,
}

/// Polarization pair for direction `n`: `eps_plus` is the normalized part of
/// `e_z` orthogonal to `n` (or `e_x` when `n` is parallel to `e_z`) and
/// `eps_minus = n x eps_plus`.
pub fn triad(n: &Vec3) -> (Vec3, Vec3) {
    let n = n.normalize();
    let ez = p_axis();
    let proj = ez - n * n.dot(&ez);
    let plus = if proj.norm() < 1e-9 { Vec3::new(1.0, 0.0, 0.0) } else { proj.normalize() };
    let minus = n.cross(&plus);
    (plus, minus)
}

/// Point symmetries used to organize the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridSymmetry {
    /// Rotation by pi about `e_z`. Leaves the fibre Hamiltonian invariant.
    RotationPi,
    /// `k -> -k`. Leaves the fibre Hamiltonian at `p = 0` invariant.
    Parity,
}

impl GridSymmetry {
    fn apply(&self, v: &Vec3) -> Vec3 {
        match self {
            GridSymmetry::RotationPi => Vec3::new(-v.x, -v.y, v.z),
            GridSymmetry::Parity => -v,
        }
    }
}

/// Mode map `j -> target[j]` with `O eps_j = sign[j] * eps_{target[j]}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignedPermutation {
    pub target: Vec<usize>,
    pub sign: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ModeGrid {
    pub spec: GridSpec,
    pub directions: Vec<Vec3>,
    pub modes: Vec<Mode>,
}

fn resolve_directions(spec: &DirectionSpec) -> Result<Vec<Vec3>> {
    match spec {
        DirectionSpec::AxisPairs(k) => {
            let axes = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 1.0, 0.0)];
            if *k == 0 || *k > 3 {
                return Err(SpecRgError::InvalidGrid(format!("axis pair count must be 1..=3, got {k}")));
            }
            Ok(axes[..*k].iter().flat_map(|a| [*a, -*a]).collect())
        }
        DirectionSpec::Explicit(list) => {
            if list.is_empty() {
                return Err(SpecRgError::InvalidGrid("empty direction list".into()));
            }
            list.iter()
                .map(|d| {
                    let v = Vec3::new(d[0], d[1], d[2]);
                    if !(v.norm() > 0.0) {
                        Err(SpecRgError::InvalidGrid(format!("zero direction {d:?}")))
                    } else {
                        Ok(v.normalize())
                    }
                })
                .collect()
        }
    }
}

fn find_direction(dirs: &[Vec3], v: &Vec3) -> Option<usize> {
    dirs.iter().position(|d| (d - v).norm() < 1e-9)
}

impl ModeGrid {
    pub fn new(spec: &GridSpec) -> Result<Self> {
        if spec.shells == 0 {
            return Err(SpecRgError::InvalidGrid("need at least one shell".into()));
        }
        if !(spec.k0 > 0.0) || !spec.k0.is_finite() {
            return Err(SpecRgError::InvalidGrid(format!("K0 must be positive, got {}", spec.k0)));
        }
        if !(spec.rho > 0.0 && spec.rho < 1.0) {
            return Err(SpecRgError::InvalidGrid(format!("rho must lie in (0,1), got {}", spec.rho)));
        }
        if spec.polarizations == 0 || spec.polarizations > 2 {
            return Err(SpecRgError::InvalidGrid(format!("polarizations must be 1 or 2, got {}", spec.polarizations)));
        }
        if spec.n_max > u8::MAX as usize {
            return Err(SpecRgError::InvalidGrid(format!("n_max {} too large", spec.n_max)));
        }
        let directions = resolve_directions(&spec.directions)?;
        for (i, d) in directions.iter().enumerate() {
            if find_direction(&directions[..i], d).is_some() {
                return Err(SpecRgError::InvalidGrid(format!("duplicate direction {d:?}")));
            }
        }
        let n_dir = directions.len();
        let mut modes = Vec::with_capacity(spec.shells * n_dir * spec.polarizations);
        for s in 0..spec.shells {
            let k_abs = spec.k0 * spec.rho.powi(s as i32);
            let r_hi = k_abs / spec.rho.sqrt();
            let r_lo = k_abs * spec.rho.sqrt();
            let weight = 4.0 * std::f64::consts::PI / n_dir as f64 * (r_hi.powi(3) - r_lo.powi(3)) / 3.0;
            for (d, n) in directions.iter().enumerate() {
                let (ep, em) = triad(n);
                for (lam, eps) in [ep, em].into_iter().take(spec.polarizations).enumerate() {
                    modes.push(Mode { shell: s, direction: d, polarization: lam, k: n * k_abs, k_abs, eps, weight });
                }
            }
        }
        let grid = ModeGrid { spec: spec.clone(), directions, modes };
        for sym in [GridSymmetry::RotationPi, GridSymmetry::Parity] {
            grid.symmetry(sym)?;
        }
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn shells(&self) -> usize {
        self.spec.shells
    }

    pub fn rho(&self) -> f64 {
        self.spec.rho
    }

    pub fn modes_per_shell(&self) -> usize {
        self.directions.len() * self.spec.polarizations
    }

    pub fn shell_magnitude(&self, s: usize) -> f64 {
        self.spec.k0 * self.spec.rho.powi(s as i32)
    }

    /// Volume of the spherical shell represented by shell `s`.
    pub fn shell_volume(&self, s: usize) -> f64 {
        let k = self.shell_magnitude(s);
        let r_hi = k / self.spec.rho.sqrt();
        let r_lo = k * self.spec.rho.sqrt();
        4.0 * std::f64::consts::PI * (r_hi.powi(3) - r_lo.powi(3)) / 3.0
    }

    /// Same direction and polarization, one shell deeper.
    pub fn shift_deeper(&self, j: usize) -> Option<usize> {
        let t = j + self.modes_per_shell();
        (t < self.len()).then_some(t)
    }

    /// Mode permutation induced by a point symmetry. Fails if the grid is not
    /// closed under it.
    pub fn symmetry(&self, sym: GridSymmetry) -> Result<SignedPermutation> {
        let mut target = Vec::with_capacity(self.len());
        let mut sign = Vec::with_capacity(self.len());
        let per_dir = self.spec.polarizations;
        for m in &self.modes {
            let n = m.k / m.k_abs;
            let on = sym.apply(&n);
            let d = find_direction(&self.directions, &on)
                .ok_or_else(|| SpecRgError::InvalidGrid(format!("directions not closed under {sym:?}: {n:?}")))?;
            let oe = sym.apply(&m.eps);
            let j = (m.shell * self.directions.len() + d) * per_dir + m.polarization;
            let dot = self.modes[j].eps.dot(&oe);
            if (dot.abs() - 1.0).abs() > 1e-9 {
                return Err(SpecRgError::InvalidGrid(format!("polarizations not closed under {sym:?} for direction {n:?}")));
            }
            target.push(j);
            sign.push(dot.signum());
        }
        Ok(SignedPermutation { target, sign })
    }
}

/// Occupation-number basis with total photon number at most `n_max`,
/// ordered by photon number with the vacuum at index 0.
#[derive(Clone, Debug)]
pub struct FockBasis {
    n_modes: usize,
    n_max: usize,
    states: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, usize>,
    photons: Vec<usize>,
    lower_tab: Vec<Option<(u32, f64)>>,
    raise_tab: Vec<Option<(u32, f64)>>,
}

/// `binom(n_modes + n_max, n_max)`, saturating.
pub fn basis_dimension(n_modes: usize, n_max: usize) -> u128 {
    let mut d: u128 = 1;
    for i in 1..=n_max as u128 {
        d = d.saturating_mul(n_modes as u128 + i) / i;
    }
    d
}

fn compositions(pos: usize, remaining: u8, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
    if pos + 1 == cur.len() {
        cur[pos] = remaining;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    for v in (0..=remaining).rev() {
        cur[pos] = v;
        compositions(pos + 1, remaining - v, cur, out);
    }
    cur[pos] = 0;
}

impl FockBasis {
    pub fn new(n_modes: usize, n_max: usize, dim_cap: usize) -> Result<Self> {
        if n_modes == 0 {
            return Err(SpecRgError::InvalidGrid("no modes".into()));
        }
        if n_max > u8::MAX as usize {
            return Err(SpecRgError::InvalidGrid(format!("n_max {n_max} too large")));
        }
        let dim = basis_dimension(n_modes, n_max);
        if dim > dim_cap as u128 {
            return Err(SpecRgError::DimensionOverflow { dim: dim.min(usize::MAX as u128) as usize, cap: dim_cap });
        }
        let mut states = Vec::with_capacity(dim as usize);
        let mut cur = vec![0u8; n_modes];
        for t in 0..=n_max {
            compositions(0, t as u8, &mut cur, &mut states);
        }
        let index: HashMap<Vec<u8>, usize> = states.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let photons: Vec<usize> = states.iter().map(|s| s.iter().map(|&x| x as usize).sum()).collect();
        let mut lower_tab = vec![None; states.len() * n_modes];
        let mut raise_tab = vec![None; states.len() * n_modes];
        let mut scratch = vec![0u8; n_modes];
        for (i, s) in states.iter().enumerate() {
            for j in 0..n_modes {
                let n = s[j];
                if n > 0 {
                    scratch.copy_from_slice(s);
                    scratch[j] -= 1;
                    lower_tab[i * n_modes + j] = Some((index[&scratch] as u32, (n as f64).sqrt()));
                }
                if photons[i] < n_max {
                    scratch.copy_from_slice(s);
                    scratch[j] += 1;
                    raise_tab[i * n_modes + j] = Some((index[&scratch] as u32, (n as f64 + 1.0).sqrt()));
                }
            }
        }
        Ok(FockBasis { n_modes, n_max, states, index, photons, lower_tab, raise_tab })
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn vacuum(&self) -> usize {
        0
    }

    pub fn state(&self, i: usize) -> &[u8] {
        &self.states[i]
    }

    pub fn index_of(&self, occ: &[u8]) -> Option<usize> {
        self.index.get(occ).copied()
    }

    pub fn photons(&self, i: usize) -> usize {
        self.photons[i]
    }

    /// Index of the single-photon state in mode `j`.
    pub fn one_photon(&self, j: usize) -> usize {
        let mut occ = vec![0u8; self.n_modes];
        occ[j] = 1;
        self.index[&occ]
    }

    /// `a_j |i> = amp |target>`.
    pub fn lower(&self, i: usize, j: usize) -> Option<(usize, f64)> {
        self.lower_tab[i * self.n_modes + j].map(|(t, a)| (t as usize, a))
    }

    /// `a_j^dagger |i> = amp |target>`, `None` when it leaves the truncation.
    pub fn raise(&self, i: usize, j: usize) -> Option<(usize, f64)> {
        self.raise_tab[i * self.n_modes + j].map(|(t, a)| (t as usize, a))
    }

    /// States whose photon number leaves room for `margin` more creations.
    pub fn safe_sector(&self, margin: usize) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.photons[i] + margin <= self.n_max).collect()
    }
}

pub fn build_basis(grid: &ModeGrid, n_max: usize) -> Result<FockBasis> {
    FockBasis::new(grid.len(), n_max, DEFAULT_DIM_CAP)
}

pub fn build_basis_with_cap(grid: &ModeGrid, n_max: usize, dim_cap: usize) -> Result<FockBasis> {
    FockBasis::new(grid.len(), n_max, dim_cap)
}

/// Dense `(a_j, a_j^dagger)` on the truncated space.
pub fn ladder_ops(basis: &FockBasis, j: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if j >= basis.n_modes() {
        return Err(SpecRgError::DimensionMismatch(format!("mode {j} out of range {}", basis.n_modes())));
    }
    let d = basis.dim();
    let mut a = DMatrix::zeros(d, d);
    let mut ad = DMatrix::zeros(d, d);
    for i in 0..d {
        if let Some((t, amp)) = basis.lower(i, j) {
            a[(t, i)] = amp;
        }
        if let Some((t, amp)) = basis.raise(i, j) {
            ad[(t, i)] = amp;
        }
    }
    Ok((a, ad))
}

/// Diagonal field observables, one entry per basis state.
#[derive(Clone, Debug)]
pub struct FieldObservables {
    pub hf: Vec<f64>,
    /// Cartesian components of the field momentum; `p[2]` is the component
    /// along the electron momentum.
    pub p: [Vec<f64>; 3],
    pub p_sq: Vec<f64>,
    pub number: Vec<f64>,
}

impl FieldObservables {
    pub fn p_par(&self) -> &[f64] {
        &self.p[2]
    }
}

pub fn field_observables(basis: &FockBasis, grid: &ModeGrid) -> Result<FieldObservables> {
    if basis.n_modes() != grid.len() {
        return Err(SpecRgError::DimensionMismatch(format!("basis has {} modes, grid {}", basis.n_modes(), grid.len())));
    }
    let d = basis.dim();
    let mut hf = vec![0.0; d];
    let mut p = [vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut number = vec![0.0; d];
    for i in 0..d {
        let mut tot = Vec3::zeros();
        for (j, &n) in basis.state(i).iter().enumerate() {
            if n > 0 {
                let n = n as f64;
                hf[i] += n * grid.modes[j].k_abs;
                tot += grid.modes[j].k * n;
                number[i] += n;
            }
        }
        for mu in 0..3 {
            p[mu][i] = tot[mu];
        }
    }
    let p_sq = (0..d).map(|i| p[0][i].powi(2) + p[1][i].powi(2) + p[2][i].powi(2)).collect();
    Ok(FieldObservables { hf, p, p_sq, number })
}

/// Dilation `U`, moving every photon one shell deeper (`|k| -> rho |k|`).
///
/// `U` is an isometry from the states that leave the deepest shell empty
/// onto the states that leave shell 0 empty; `Ad(A) = U^dagger A U` then
/// satisfies `Ad(H_f) = rho H_f` on that domain and `U Omega = Omega`.
#[derive(Clone, Debug)]
pub struct ScalingMap {
    target: Vec<Option<usize>>,
    per_shell: usize,
    shells: usize,
}

impl ScalingMap {
    pub fn new(grid: &ModeGrid, basis: &FockBasis) -> Result<Self> {
        if basis.n_modes() != grid.len() {
            return Err(SpecRgError::DimensionMismatch("basis and grid disagree".into()));
        }
        let per_shell = grid.modes_per_shell();
        let m = grid.len();
        let mut target = Vec::with_capacity(basis.dim());
        let mut shifted = vec![0u8; m];
        for i in 0..basis.dim() {
            let occ = basis.state(i);
            if occ[m - per_shell..].iter().any(|&x| x > 0) {
                target.push(None);
                continue;
            }
            shifted.iter_mut().for_each(|x| *x = 0);
            shifted[per_shell..].copy_from_slice(&occ[..m - per_shell]);
            target.push(basis.index_of(&shifted));
        }
        Ok(ScalingMap { target, per_shell, shells: grid.shells() })
    }

    pub fn target(&self, i: usize) -> Option<usize> {
        self.target[i]
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let d = self.target.len();
        let mut u = DMatrix::zeros(d, d);
        for (i, t) in self.target.iter().enumerate() {
            if let Some(t) = t {
                u[(*t, i)] = 1.0;
            }
        }
        u
    }

    /// `U^dagger A U`.
    pub fn ad(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.target.len();
        DMatrix::from_fn(d, d, |i, k| match (self.target[i], self.target[k]) {
            (Some(ti), Some(tk)) => a[(ti, tk)],
            _ => 0.0,
        })
    }

    /// States with no photon in the deepest `m` shells, i.e. the range of
    /// `m` applications of `U^dagger`.
    pub fn frame(&self, basis: &FockBasis, m: usize) -> Vec<usize> {
        let cut = self.per_shell * (self.shells.saturating_sub(m));
        (0..basis.dim()).filter(|&i| basis.state(i)[cut..].iter().all(|&x| x == 0)).collect()
    }
}

/// Images of the basis states under a signed mode permutation:
/// `O |i> = sign[i] |target[i]>`.
pub fn symmetry_on_basis(basis: &FockBasis, perm: &SignedPermutation) -> (Vec<usize>, Vec<f64>) {
    let m = basis.n_modes();
    let mut out = vec![0u8; m];
    let mut target = Vec::with_capacity(basis.dim());
    let mut sign = Vec::with_capacity(basis.dim());
    for i in 0..basis.dim() {
        let occ = basis.state(i);
        out.iter_mut().for_each(|x| *x = 0);
        let mut s = 1.0;
        for j in 0..m {
            if occ[j] > 0 {
                out[perm.target[j]] = occ[j];
                if perm.sign[j] < 0.0 && occ[j] % 2 == 1 {
                    s = -s;
                }
            }
        }
        target.push(basis.index_of(&out).expect("symmetry preserves photon number"));
        sign.push(s);
    }
    (target, sign)
}

/// A function `f(H_f, P_f)` of the diagonal field observables.
#[derive(Clone)]
pub struct DiagFn(pub Arc<dyn Fn(f64, &Vec3) -> f64 + Send + Sync>);

impl DiagFn {
    pub fn new(f: impl Fn(f64, &Vec3) -> f64 + Send + Sync + 'static) -> Self {
        DiagFn(Arc::new(f))
    }
}

impl fmt::Debug for DiagFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DiagFn")
    }
}

#[derive(Clone, Debug)]
pub enum Factor {
    Create(usize),
    Annihilate(usize),
    Diag(DiagFn),
}

#[derive(Clone, Debug)]
pub struct Monomial {
    pub coeff: f64,
    pub factors: Vec<Factor>,
}

/// `coeff * a^dagger(creators) * prod_k f_k(H_f + dh_k, P_f + dp_k) * a(annihilators)`.
#[derive(Clone, Debug)]
pub struct WickTerm {
    pub coeff: f64,
    pub creators: Vec<usize>,
    pub annihilators: Vec<usize>,
    pub middle: Vec<(DiagFn, f64, Vec3)>,
}

impl WickTerm {
    pub fn bidegree(&self) -> (usize, usize) {
        (self.creators.len(), self.annihilators.len())
    }
}

#[derive(Clone, Debug, Default)]
pub struct WickExpansion {
    pub terms: Vec<WickTerm>,
}

impl WickExpansion {
    /// Terms grouped by `(M, N)` = (creators, annihilators).
    pub fn by_bidegree(&self) -> BTreeMap<(usize, usize), Vec<&WickTerm>> {
        let mut out: BTreeMap<(usize, usize), Vec<&WickTerm>> = BTreeMap::new();
        for t in &self.terms {
            out.entry(t.bidegree()).or_default().push(t);
        }
        out
    }

    /// Matrix of the normal-ordered expression on the truncated space.
    pub fn to_matrix(&self, basis: &FockBasis, grid: &ModeGrid) -> DMatrix<f64> {
        let d = basis.dim();
        let obs = field_observables(basis, grid).expect("basis built on this grid");
        let mut out = DMatrix::zeros(d, d);
        for col in 0..d {
            for t in &self.terms {
                let mut idx = col;
                let mut amp = t.coeff;
                let mut alive = true;
                for &j in t.annihilators.iter().rev() {
                    match basis.lower(idx, j) {
                        Some((n, a)) => {
                            idx = n;
                            amp *= a;
                        }
                        None => {
                            alive = false;
                            break;
                        }
                    }
                }
                if !alive {
                    continue;
                }
                if !t.middle.is_empty() {
                    let pf = Vec3::new(obs.p[0][idx], obs.p[1][idx], obs.p[2][idx]);
                    for (f, dh, dp) in &t.middle {
                        amp *= (f.0)(obs.hf[idx] + dh, &(pf + dp));
                    }
                }
                for &j in t.creators.iter().rev() {
                    match basis.raise(idx, j) {
                        Some((n, a)) => {
                            idx = n;
                            amp *= a;
                        }
                        None => {
                            alive = false;
                            break;
                        }
                    }
                }
                if alive {
                    out[(idx, col)] += amp;
                }
            }
        }
        out
    }
}

#[derive(Clone)]
struct Partial {
    coeff: f64,
    creators: Vec<usize>,
    middle: Vec<(DiagFn, f64, Vec3)>,
    annihilators: Vec<usize>,
}

/// Wick-order a sum of operator products.
///
/// Uses `a_i a_j^dagger = a_j^dagger a_i + delta_ij`,
/// `f(H_f, P_f) a_j^dagger = a_j^dagger f(H_f + |k_j|, P_f + k_j)` and
/// `a_j f(H_f, P_f) = f(H_f + |k_j|, P_f + k_j) a_j`. Terms without
/// diagonal factors and equal ladder content are merged.
pub fn normal_order(monomials: &[Monomial], grid: &ModeGrid, degree_cap: usize) -> Result<WickExpansion> {
    let mut merged: BTreeMap<(Vec<usize>, Vec<usize>), f64> = BTreeMap::new();
    let mut with_middle = Vec::new();
    for mono in monomials {
        let degree = mono.factors.iter().filter(|f| !matches!(f, Factor::Diag(_))).count();
        if degree > degree_cap {
            return Err(SpecRgError::DegreeCapExceeded { degree, cap: degree_cap });
        }
        for f in &mono.factors {
            if let Factor::Create(j) | Factor::Annihilate(j) = f {
                if *j >= grid.len() {
                    return Err(SpecRgError::DimensionMismatch(format!("mode {j} out of range {}", grid.len())));
                }
            }
        }
        let mut terms =
            vec![Partial { coeff: mono.coeff, creators: vec![], middle: vec![], annihilators: vec![] }];
        for f in &mono.factors {
            let mut next = Vec::with_capacity(terms.len());
            for t in terms {
                match f {
                    Factor::Annihilate(j) => {
                        let mut t = t;
                        t.annihilators.push(*j);
                        next.push(t);
                    }
                    Factor::Diag(g) => {
                        let mut t = t;
                        let (dh, dp) = t.annihilators.iter().fold((0.0, Vec3::zeros()), |(h, p), &i| {
                            (h + grid.modes[i].k_abs, p + grid.modes[i].k)
                        });
                        t.middle.push((g.clone(), dh, dp));
                        next.push(t);
                    }
                    Factor::Create(j) => {
                        for (pos, &i) in t.annihilators.iter().enumerate() {
                            if i == *j {
                                let mut c = t.clone();
                                c.annihilators.remove(pos);
                                next.push(c);
                            }
                        }
                        let mut t = t;
                        let mode = &grid.modes[*j];
                        for m in t.middle.iter_mut() {
                            m.1 += mode.k_abs;
                            m.2 += mode.k;
                        }
                        t.creators.push(*j);
                        next.push(t);
                    }
                }
            }
            terms = next;
        }
        for mut t in terms {
            t.creators.sort_unstable();
            t.annihilators.sort_unstable();
            if t.middle.is_empty() {
                *merged.entry((t.creators, t.annihilators)).or_insert(0.0) += t.coeff;
            } else {
                with_middle.push(WickTerm {
                    coeff: t.coeff,
                    creators: t.creators,
                    annihilators: t.annihilators,
                    middle: t.middle,
                });
            }
        }
    }
    let mut terms: Vec<WickTerm> = merged
        .into_iter()
        .filter(|(_, c)| *c != 0.0)
        .map(|((creators, annihilators), coeff)| WickTerm { coeff, creators, annihilators, middle: vec![] })
        .collect();
    terms.extend(with_middle);
    Ok(WickExpansion { terms })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid(shells: usize, pairs: usize, pol: usize, n_max: usize) -> (ModeGrid, FockBasis) {
        let g = ModeGrid::new(&GridSpec::axis_pairs(shells, pairs, pol, n_max)).unwrap();
        let b = build_basis(&g, n_max).unwrap();
        (g, b)
    }

    #[test]
    fn default_grid_dimension() {
        let g = ModeGrid::new(&GridSpec::default()).unwrap();
        assert_eq!(g.len(), 48);
        assert_eq!(basis_dimension(48, 2), 1225);
        assert_eq!(basis_dimension(24, 2), 325);
    }

    #[test]
    fn dimension_matches_enumeration() {
        for (m, n) in [(1, 0), (1, 5), (3, 3), (6, 2), (4, 4)] {
            let b = FockBasis::new(m, n, DEFAULT_DIM_CAP).unwrap();
            assert_eq!(b.dim() as u128, basis_dimension(m, n));
            assert_eq!(b.photons(0), 0);
            for i in 1..b.dim() {
                assert!(b.photons(i - 1) <= b.photons(i));
                assert_eq!(b.index_of(b.state(i)), Some(i));
            }
        }
    }

    #[test]
    fn dimension_cap_is_enforced() {
        let err = FockBasis::new(48, 3, DEFAULT_DIM_CAP).unwrap_err();
        assert!(matches!(err, SpecRgError::DimensionOverflow { dim: 20825, cap: 5000 }));
    }

    #[test]
    fn triads_are_orthonormal_and_transverse() {
        let g = ModeGrid::new(&GridSpec::default()).unwrap();
        for m in &g.modes {
            assert!((m.eps.norm() - 1.0).abs() < 1e-14);
            assert!(m.eps.dot(&m.k).abs() < 1e-14);
        }
        let (p, q) = triad(&Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(p, Vec3::new(1.0, 0.0, 0.0));
        assert!((q - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
        let (p, _) = triad(&Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(p, Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn shell_weights_sum_to_shell_volume() {
        let g = ModeGrid::new(&GridSpec::default()).unwrap();
        for s in 0..g.shells() {
            let total: f64 = g.modes.iter().filter(|m| m.shell == s && m.polarization == 0).map(|m| m.weight).sum();
            assert!((total - g.shell_volume(s)).abs() < 1e-13 * total);
        }
    }

    #[test]
    fn open_direction_set_is_rejected() {
        let spec = GridSpec { directions: DirectionSpec::Explicit(vec![[1.0, 0.0, 0.0]]), ..Default::default() };
        assert!(matches!(ModeGrid::new(&spec), Err(SpecRgError::InvalidGrid(_))));
        let spec = GridSpec {
            directions: DirectionSpec::Explicit(vec![[1.0, 1.0, 0.0], [-1.0, -1.0, 0.0]]),
            ..Default::default()
        };
        assert!(ModeGrid::new(&spec).is_ok());
    }

    #[test]
    fn symmetries_are_involutions() {
        let g = ModeGrid::new(&GridSpec::default()).unwrap();
        for sym in [GridSymmetry::RotationPi, GridSymmetry::Parity] {
            let p = g.symmetry(sym).unwrap();
            for j in 0..g.len() {
                assert_eq!(p.target[p.target[j]], j);
                assert_eq!(g.modes[p.target[j]].shell, g.modes[j].shell);
            }
        }
    }

    #[test]
    fn ccr_on_safe_sector() {
        let (_, b) = small_grid(2, 1, 2, 3);
        let safe = b.safe_sector(1);
        for i in 0..b.n_modes() {
            let (ai, adi) = ladder_ops(&b, i).unwrap();
            for j in 0..b.n_modes() {
                let (aj, adj) = ladder_ops(&b, j).unwrap();
                let comm = &ai * &adj - &adj * &ai;
                let aa = &ai * &aj - &aj * &ai;
                for &c in &safe {
                    for r in 0..b.dim() {
                        let want = if i == j && r == c { 1.0 } else { 0.0 };
                        assert!((comm[(r, c)] - want).abs() < 1e-12);
                        assert!(aa[(r, c)].abs() < 1e-12);
                    }
                }
                let _ = &adi;
            }
        }
    }

    #[test]
    fn observables_of_single_photons() {
        let (g, b) = small_grid(2, 2, 2, 2);
        let obs = field_observables(&b, &g).unwrap();
        assert_eq!(obs.hf[0], 0.0);
        for j in 0..g.len() {
            let i = b.one_photon(j);
            assert!((obs.hf[i] - g.modes[j].k_abs).abs() < 1e-15);
            assert!((obs.p_par()[i] - g.modes[j].k.z).abs() < 1e-15);
            assert_eq!(obs.number[i], 1.0);
        }
    }

    #[test]
    fn dilation_properties() {
        let (g, b) = small_grid(3, 1, 2, 2);
        let u = ScalingMap::new(&g, &b).unwrap();
        let ud = u.dense();
        assert_eq!(u.target(0), Some(0));
        let utu = ud.transpose() * &ud;
        let obs = field_observables(&b, &g).unwrap();
        let hf = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(obs.hf.clone()));
        let ahf = u.ad(&hf);
        for i in 0..b.dim() {
            let on_domain = u.target(i).is_some();
            assert_eq!(utu[(i, i)], if on_domain { 1.0 } else { 0.0 });
            if on_domain {
                assert!((ahf[(i, i)] - g.rho() * obs.hf[i]).abs() < 1e-14);
            }
        }
        assert!((u.ad(&hf) - ud.transpose() * &hf * &ud).norm() < 1e-14);
        assert_eq!(u.frame(&b, 0).len(), b.dim());
        assert_eq!(u.frame(&b, 3), vec![0]);
    }

    #[test]
    fn wick_order_of_simple_products() {
        let (g, b) = small_grid(1, 1, 2, 4);
        let mono = Monomial { coeff: 1.0, factors: vec![Factor::Annihilate(0), Factor::Create(0)] };
        let w = normal_order(&[mono], &g, 4).unwrap();
        let groups = w.by_bidegree();
        assert_eq!(groups[&(0, 0)][0].coeff, 1.0);
        assert_eq!(groups[&(1, 1)][0].coeff, 1.0);
        let (a, ad) = ladder_ops(&b, 0).unwrap();
        let direct = &a * &ad;
        let rebuilt = w.to_matrix(&b, &g);
        for c in b.safe_sector(1) {
            for r in 0..b.dim() {
                assert!((direct[(r, c)] - rebuilt[(r, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wick_order_with_diagonal_factor() {
        let (g, b) = small_grid(2, 1, 1, 4);
        let f = DiagFn::new(|h, p| 1.0 / (1.0 + h + 0.3 * p.z));
        let mono = Monomial {
            coeff: 0.7,
            factors: vec![Factor::Annihilate(1), Factor::Diag(f.clone()), Factor::Create(1), Factor::Create(0)],
        };
        let w = normal_order(&[mono], &g, 4).unwrap();
        let obs = field_observables(&b, &g).unwrap();
        let fm = DMatrix::from_fn(b.dim(), b.dim(), |i, k| {
            if i == k {
                (f.0)(obs.hf[i], &Vec3::new(obs.p[0][i], obs.p[1][i], obs.p[2][i]))
            } else {
                0.0
            }
        });
        let (a1, _) = ladder_ops(&b, 1).unwrap();
        let (_, ad1) = ladder_ops(&b, 1).unwrap();
        let (_, ad0) = ladder_ops(&b, 0).unwrap();
        let direct = (&a1 * &fm * &ad1 * &ad0) * 0.7;
        let rebuilt = w.to_matrix(&b, &g);
        for c in b.safe_sector(2) {
            for r in 0..b.dim() {
                assert!((direct[(r, c)] - rebuilt[(r, c)]).abs() < 1e-12, "{r} {c}");
            }
        }
    }

    #[test]
    fn wick_degree_cap() {
        let (g, _) = small_grid(1, 1, 1, 2);
        let mono = Monomial { coeff: 1.0, factors: vec![Factor::Create(0); 5] };
        assert!(matches!(normal_order(&[mono], &g, 4), Err(SpecRgError::DegreeCapExceeded { degree: 5, cap: 4 })));
    }
}

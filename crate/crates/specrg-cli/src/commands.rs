//! One function per subcommand. Each returns its data table and the checks
//! it asserted; numbers come straight from the engine.

use serde_json::json;
use specrg::feshbach::{feshbach_suite, CutoffPair, RampProfile, TauSpec};
use specrg::fit::fit_line;
use specrg::fockspace::{build_basis, FockBasis, GridSpec, ModeGrid};
use specrg::hamiltonians::{build_hps, PhysHamiltonian, PhysParams};
use specrg::report::{CheckResult, Tally};
use specrg::rgflow::{direct_scale_flow, ground_state_energy, iterated_flow, FlowSystem, FlowTrace};
use specrg::scalarflows::{eps_table, EPS_CONTRACTION};
use specrg::toyoracle::{continuum_report, divergence_fit};
use specrg::ward::{wt_propagation_check, wt_residual, LadderVariant, WTDerivation};

use crate::config::{FlowMode, ScenarioConfig};
use crate::error::CliError;
use crate::output::{columns, Cell, Outcome, Table};

pub struct System {
    pub grid: ModeGrid,
    pub basis: FockBasis,
    pub phys: PhysHamiltonian,
}

impl System {
    pub fn build(spec: &GridSpec, params: &PhysParams, sigma: f64) -> Result<Self, CliError> {
        let grid = ModeGrid::new(spec)?;
        let basis = build_basis(&grid, spec.n_max)?;
        let phys = build_hps(&grid, &basis, params, sigma)?;
        Ok(System { grid, basis, phys })
    }

    pub fn sys(&self) -> FlowSystem<'_> {
        FlowSystem { grid: &self.grid, basis: &self.basis, phys: &self.phys }
    }
}

fn rel_diff(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

pub fn feshbach_selftest(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let r = feshbach_suite(cfg.selftest.instances, cfg.selftest.seed)?;
    let mut table = Table::new(&columns::FESHBACH);
    for c in &r.checks {
        table.push(vec![
            Cell::S(c.identity.clone()),
            Cell::F(c.max_residual),
            Cell::F(c.threshold),
            Cell::B(c.upper_bound),
            Cell::B(c.pass),
        ]);
    }
    let max_residuals: serde_json::Map<String, serde_json::Value> =
        r.checks.iter().map(|c| (c.identity.clone(), json!(c.max_residual))).collect();
    let json = json!({ "instances": r.instances, "seed": r.seed, "max_residuals": max_residuals, "checks": r.checks });
    Ok(Outcome { command: "feshbach-selftest", table, json: Some(json), checks: r.checks })
}

pub fn toy(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let p = &cfg.params;
    let sigmas = &cfg.toy.sigma0;
    let mut reports = Vec::with_capacity(sigmas.len());
    for &s in sigmas {
        reports.push(continuum_report(&PhysParams { sigma0: s, ..p.clone() }, &cfg.toy.quad)?);
    }
    let fit = if sigmas.len() >= 5 { Some(divergence_fit(p, sigmas, &cfg.toy.quad)?.fit) } else { None };
    let mut table = Table::new(&columns::TOY);
    for (s, r) in sigmas.iter().zip(&reports) {
        table.push(vec![Cell::F(*s), Cell::F(r.e_lin), Cell::F(r.log_norm_sq), Cell::opt(fit.map(|f| f.slope))]);
    }
    let mut checks = vec![CheckResult::flag("e_lin_nonpositive", reports.iter().all(|r| r.e_lin <= 0.0))];
    // the norm grows as the infrared cutoff is removed
    let mut order: Vec<usize> = (0..sigmas.len()).collect();
    order.sort_by(|&a, &b| sigmas[b].total_cmp(&sigmas[a]));
    let monotone = order.windows(2).all(|w| reports[w[1]].log_norm_sq >= reports[w[0]].log_norm_sq);
    checks.push(CheckResult::flag("log_norm_monotone_in_sigma0", monotone));
    if let Some(f) = fit {
        checks.push(CheckResult::at_least("divergence_fit_r2", f.r2, 0.999));
        checks.push(CheckResult::flag("slope_positive_iff_p_nonzero", (f.slope > 0.0) == (p.p_abs != 0.0)));
    }
    let json = json!({ "params": p, "table": table.to_json(), "fit": fit });
    Ok(Outcome { command: "toy", table, json: Some(json), checks })
}

fn flow_row(table: &mut Table, st: &specrg::rgflow::ScaleState, extra: Option<[f64; 3]>) {
    let mut row = vec![
        Cell::U(st.n),
        Cell::F(st.z_n),
        Cell::F(st.d_e0),
        Cell::F(st.d_hf),
        Cell::F(st.a_n),
        Cell::F(st.eta_n),
        Cell::F(st.eps_proxy),
        Cell::F(st.sigma_n),
        Cell::F(st.lognormsq),
    ];
    if let Some(d) = extra {
        row.extend(d.iter().map(|&x| Cell::F(x)));
    }
    table.push(row);
}

fn trace_checks(trace: &FlowTrace, label: &str, params: &PhysParams, checks: &mut Vec<CheckResult>) {
    let mut eta = Tally::at_most(&format!("{label}_eta_two_routes"), 1e-9);
    let mut band = Tally::at_most(&format!("{label}_a_n_band"), (2.0 * params.g).cbrt());
    for st in &trace.states {
        eta.add(rel_diff(st.eta_n, st.eta_check));
        band.add((st.a_n + params.p_abs.abs()).abs());
    }
    checks.push(eta.finish());
    checks.push(band.finish());
}

pub fn flow(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let s = System::build(&cfg.grid, &cfg.params, cfg.params.sigma0)?;
    let opts = &cfg.flow.options;
    let n_max = cfg.flow.n_max.unwrap_or(s.grid.shells().saturating_sub(1));
    let z = match cfg.flow.z {
        Some(z) => z,
        None => ground_state_energy(&s.sys(), None, opts)?.e0,
    };
    let mode = cfg.flow.mode;
    let direct = match mode {
        FlowMode::Direct | FlowMode::Both => Some(direct_scale_flow(&s.sys(), z, n_max, opts)?),
        FlowMode::Iterated => None,
    };
    let iterated = match mode {
        FlowMode::Iterated | FlowMode::Both => Some(iterated_flow(&s.sys(), z, n_max, opts)?),
        FlowMode::Direct => None,
    };
    let mut checks = Vec::new();
    let mut table;
    match (&direct, &iterated) {
        (Some(d), Some(it)) => {
            table = Table::new(&[&columns::FLOW[..], &columns::FLOW_AGREEMENT[..]].concat());
            let mut agree = Tally::at_most("direct_vs_iterated", cfg.flow.agreement_tol);
            for (a, b) in d.states.iter().zip(&it.states) {
                let diff = [b.z_n - a.z_n, b.a_n - a.a_n, b.d_hf - a.d_hf];
                diff.iter().for_each(|x| agree.add(x.abs()));
                flow_row(&mut table, a, Some(diff));
            }
            trace_checks(d, "direct", &cfg.params, &mut checks);
            trace_checks(it, "iterated", &cfg.params, &mut checks);
            checks.push(agree.finish());
        }
        (Some(t), None) | (None, Some(t)) => {
            table = Table::new(&columns::FLOW);
            t.states.iter().for_each(|st| flow_row(&mut table, st, None));
            let label = if direct.is_some() { "direct" } else { "iterated" };
            trace_checks(t, label, &cfg.params, &mut checks);
        }
        (None, None) => unreachable!(),
    }
    let json = json!({
        "z": z,
        "mode": mode,
        "table": table.to_json(),
        "e0_estimate": direct.as_ref().or(iterated.as_ref()).map(|t| t.e0_estimate),
    });
    Ok(Outcome { command: "flow", table, json: Some(json), checks })
}

pub fn scalarflow(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let fp = cfg.flow_params();
    let nn = fp.n_sigma0();
    let n_max = cfg.scalar.n_max.unwrap_or(nn + 5);
    let rows = eps_table(&fp, n_max);
    let mut table = Table::new(&columns::SCALARFLOW);
    for r in &rows {
        table.push(vec![Cell::U(r.n), Cell::F(r.eps_n), Cell::F(r.lambda_n), Cell::B(r.floor_active)]);
    }
    let mut ratios_ok = true;
    for w in rows.windows(2) {
        let q = w[1].eps_n / w[0].eps_n;
        ratios_ok &= if w[1].n <= nn {
            // a single crossover step may land strictly between the two
            q >= EPS_CONTRACTION * (1.0 - 1e-15) && q <= 1.0 + 1e-15
        } else {
            (q - EPS_CONTRACTION).abs() <= 1e-15
        };
    }
    let lambda_ok = rows.iter().all(|r| r.lambda_n == 0.5 * fp.rho.powi(r.n as i32));
    let checks = vec![CheckResult::flag("eps_ratios", ratios_ok), CheckResult::flag("lambda_exact", lambda_ok)];
    let json = json!({ "n_sigma0": nn, "eps0": fp.eps0(), "floor": fp.eps_floor(), "table": table.to_json() });
    Ok(Outcome { command: "scalarflow", table, json: Some(json), checks })
}

pub fn wt_check(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let w = &cfg.wt;
    let params = PhysParams { sigma0: w.sigma, ..cfg.params.clone() };
    let g = params.g;
    let mut table = Table::new(&columns::WT);
    let mut coef = Tally::at_most("coefficient_cancellation", 1e-14);
    let mut excess = Tally::at_most("propagation_bound_excess", 1e-8);
    let mut gap = Tally::at_most("propagation_gap_over_bound", 1.0);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut shells: Vec<usize> = w.shells.iter().chain(&w.propagate).copied().collect();
    shells.sort_unstable();
    shells.dedup();
    for &n in &shells {
        let spec = GridSpec::axis_pairs(n, w.pairs, w.polarizations, w.n_max);
        let s = System::build(&spec, &params, w.sigma)?;
        let wt = WTDerivation::softest(&s.grid, LadderVariant::Annihilation, w.sigma, g)?;
        let r = wt_residual(&s.grid, &s.basis, &s.phys, &wt)?;
        coef.add(r.coefficient_residual);
        if w.shells.contains(&n) {
            xs.push(r.k_abs.ln());
            ys.push(r.residual_norm.ln());
        }
        let prop = if w.propagate.contains(&n) {
            let z = s.phys.e_bare - 0.01;
            let cut = CutoffPair::new(s.phys.hf(), RampProfile::unit().scaled(w.sigma));
            let tau = TauSpec::new(1.0, 0.01);
            let mut first = None;
            for v in [LadderVariant::Annihilation, LadderVariant::Creation] {
                let wt = WTDerivation::softest(&s.grid, v, w.sigma, g)?;
                coef.add(wt_residual(&s.grid, &s.basis, &s.phys, &wt)?.coefficient_residual);
                let pr = wt_propagation_check(&s.basis, &s.phys, z, &tau, &cut, &wt)?;
                excess.add(pr.bound_excess);
                gap.add(pr.gap / pr.gap_bound);
                first.get_or_insert(pr);
            }
            first
        } else {
            None
        };
        table.push(vec![
            Cell::U(n),
            Cell::F(r.k_abs),
            Cell::F(r.residual_norm),
            Cell::F(r.kinematic_norm),
            Cell::F(r.coefficient_residual),
            Cell::opt(prop.as_ref().map(|p| p.gap)),
            Cell::opt(prop.as_ref().map(|p| p.gap_bound)),
            Cell::opt(prop.as_ref().map(|p| p.bound_excess)),
            Cell::opt(prop.as_ref().and_then(|p| p.kernel_extracted)),
            Cell::opt(prop.as_ref().and_then(|p| p.kernel_predicted)),
            Cell::opt(prop.as_ref().and_then(|p| p.kernel_band)),
        ]);
    }
    let mut checks = vec![coef.finish()];
    if !w.propagate.is_empty() {
        checks.push(excess.finish());
        checks.push(gap.finish());
    }
    let slope = if xs.len() >= 3 { fit_line(&xs, &ys).map(|f| f.slope) } else { None };
    if let Some(sl) = slope {
        checks.push(CheckResult::at_least("residual_slope_min", sl, 0.4));
        checks.push(CheckResult::at_most("residual_slope_max", sl, 1.1));
    }
    let json = json!({ "g": g, "p": params.p_abs, "sigma": w.sigma, "residual_slope": slope, "table": table.to_json() });
    Ok(Outcome { command: "wt-check", table, json: Some(json), checks })
}

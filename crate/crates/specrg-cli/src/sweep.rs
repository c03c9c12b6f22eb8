//! One-parameter sweeps over `g`, `|p|` or `sigma0`. A failing row is
//! recorded and the sweep moves on.

use serde_json::json;
use specrg::hamiltonians::PhysParams;
use specrg::report::CheckResult;
use specrg::rgflow::{de0_dp, direct_scale_flow, ground_state_energy};
use specrg::toyoracle::divergence_fit;

use crate::commands::System;
use crate::config::{ScenarioConfig, SweepAxis};
use crate::error::CliError;
use crate::output::{columns, Cell, Outcome, Table};

struct Row {
    e0: f64,
    de0_dp: f64,
    d_hf: f64,
    a_final: f64,
    slope: Option<f64>,
    a_band_ok: bool,
}

fn axis_name(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::G => "g",
        SweepAxis::P => "p",
        SweepAxis::Sigma0 => "sigma0",
    }
}

fn with_value(base: &PhysParams, axis: SweepAxis, v: f64) -> PhysParams {
    let mut p = base.clone();
    match axis {
        SweepAxis::G => p.g = v,
        SweepAxis::P => p.p_abs = v,
        SweepAxis::Sigma0 => p.sigma0 = v,
    }
    p
}

fn is_geometric(v: &[f64]) -> bool {
    v.len() >= 5 && v[0] > 0.0 && {
        let q = v[1] / v[0];
        q > 0.0 && q != 1.0 && v.windows(2).all(|w| ((w[1] / w[0]) / q - 1.0).abs() < 1e-9)
    }
}

fn one_row(cfg: &ScenarioConfig, params: &PhysParams, fit_sigmas: &[f64]) -> Result<Row, CliError> {
    params.validate()?;
    let s = System::build(&cfg.grid, params, params.sigma0)?;
    let opts = &cfg.flow.options;
    let gs = ground_state_energy(&s.sys(), None, opts)?;
    let slope_d = de0_dp(&s.sys(), gs.e0, gs.n_final, opts)?;
    let trace = direct_scale_flow(&s.sys(), gs.e0, s.grid.shells().saturating_sub(1), opts)?;
    let last = trace.states.last().expect("flow has a scale 0");
    let bound = (2.0 * params.g).cbrt();
    let a_band_ok = trace.states.iter().all(|st| (st.a_n + params.p_abs.abs()).abs() <= bound);
    let slope = if fit_sigmas.is_empty() { None } else { Some(divergence_fit(params, fit_sigmas, &cfg.toy.quad)?.fit.slope) };
    Ok(Row { e0: gs.e0, de0_dp: slope_d, d_hf: last.c_total - 1.0, a_final: last.a_n, slope, a_band_ok })
}

pub fn sweep(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let axis = cfg.sweep.axis;
    let values = &cfg.sweep.values;
    if values.len() < 3 {
        return Err(CliError::Config(format!("sweep needs at least 3 values, got {}", values.len())));
    }
    // a geometric sigma0 sweep is itself the divergence fit
    let fit_sigmas: Vec<f64> = match axis {
        SweepAxis::Sigma0 if is_geometric(values) => values.clone(),
        _ if is_geometric(&cfg.toy.sigma0) => cfg.toy.sigma0.clone(),
        _ => Vec::new(),
    };
    let name = axis_name(axis);
    let mut table = Table::new(&columns::SWEEP);
    let mut failed = 0;
    let mut band_ok = true;
    for &v in values {
        let params = with_value(&cfg.params, axis, v);
        let head = vec![Cell::S(name.into()), Cell::F(v), Cell::F(params.g), Cell::F(params.p_abs), Cell::F(params.sigma0)];
        let tail = match one_row(cfg, &params, &fit_sigmas) {
            Ok(r) => {
                band_ok &= r.a_band_ok;
                vec![
                    Cell::F(r.e0),
                    Cell::F(r.de0_dp),
                    Cell::F(r.d_hf),
                    Cell::F(r.a_final),
                    Cell::opt(r.slope),
                    Cell::B(r.a_band_ok),
                    Cell::Empty,
                ]
            }
            Err(e) => {
                failed += 1;
                let mut t = vec![Cell::Empty; 6];
                t.push(Cell::S(e.to_string()));
                t
            }
        };
        table.push([head, tail].concat());
    }
    let checks = vec![CheckResult::at_most("failed_rows", failed as f64, 0.0), CheckResult::flag("a_n_band", band_ok)];
    let json = json!({ "axis": name, "table": table.to_json() });
    Ok(Outcome { command: "sweep", table, json: Some(json), checks })
}

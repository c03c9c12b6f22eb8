//! Scenario configuration, read from JSON and validated before anything runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use specrg::fockspace::{basis_dimension, GridSpec, ModeGrid};
use specrg::hamiltonians::PhysParams;
use specrg::rgflow::FlowOptions;
use specrg::scalarflows::FlowParams;
use specrg::toyoracle::QuadSpec;

use crate::error::CliError;

/// Largest Fock dimension a scenario may request.
pub const DIM_CAP: u128 = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FlowMode {
    Direct,
    Iterated,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    FeshbachSelftest,
    Toy,
    Flow,
    Scalarflow,
    WtCheck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub mode: FlowMode,
    /// Last scale; defaults to one below the number of shells.
    pub n_max: Option<usize>,
    /// Spectral parameter; defaults to the ground energy.
    pub z: Option<f64>,
    /// Allowed difference between the two modes.
    pub agreement_tol: f64,
    pub options: FlowOptions,
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection { mode: FlowMode::Both, n_max: None, z: None, agreement_tol: 1e-8, options: FlowOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub sigma0: Vec<f64>,
    pub quad: QuadSpec,
}

impl Default for ToySection {
    fn default() -> Self {
        ToySection { sigma0: (6..=14).map(|k| 2f64.powi(-k)).collect(), quad: QuadSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelftestSection {
    pub instances: usize,
    pub seed: u64,
}

impl Default for SelftestSection {
    fn default() -> Self {
        SelftestSection { instances: 200, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WtSection {
    /// Shell counts of the residual scan.
    pub shells: Vec<usize>,
    /// Shell counts on which the Feshbach propagation is also checked.
    pub propagate: Vec<usize>,
    pub pairs: usize,
    pub polarizations: usize,
    pub n_max: usize,
    /// Infrared cutoff of the Hamiltonian; the softest shell must lie below it.
    pub sigma: f64,
}

impl Default for WtSection {
    fn default() -> Self {
        WtSection { shells: vec![3, 4, 5], propagate: vec![3, 4], pairs: 1, polarizations: 2, n_max: 3, sigma: 0.5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalarSection {
    /// Last row; defaults to `N_sigma0 + 5`.
    pub n_max: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    G,
    P,
    Sigma0,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { axis: SweepAxis::P, values: vec![0.0, 0.02, 0.05] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub grid: GridSpec,
    pub params: PhysParams,
    pub flow: FlowSection,
    pub toy: ToySection,
    pub selftest: SelftestSection,
    pub wt: WtSection,
    pub scalar: ScalarSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
    /// Checks executed by `run`, in order.
    pub enabled: Vec<Check>,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.params.validate().map_err(|e| invalid(e.to_string()))?;
        let grid = ModeGrid::new(&self.grid).map_err(|e| invalid(e.to_string()))?;
        let dim = basis_dimension(grid.len(), self.grid.n_max);
        if dim > DIM_CAP {
            return Err(invalid(format!("grid has Fock dimension {dim}, cap is {DIM_CAP}")));
        }
        self.toy.quad.validate().map_err(|e| invalid(e.to_string()))?;
        if self.toy.sigma0.is_empty() || self.toy.sigma0.iter().any(|s| !(*s > 0.0 && *s < 1.0)) {
            return Err(invalid("toy.sigma0 needs values in (0,1)"));
        }
        FlowParams::new(self.params.g, self.params.p_abs, self.params.sigma0, self.params.rho)
            .map_err(|e| invalid(e.to_string()))?;
        if !(self.flow.agreement_tol > 0.0) {
            return Err(invalid("flow.agreement_tol must be positive"));
        }
        if let Some(n) = self.flow.n_max {
            if n > grid.shells() {
                return Err(invalid(format!("flow.n_max = {n} exceeds the {} shells", grid.shells())));
            }
        }
        if self.selftest.instances == 0 {
            return Err(invalid("selftest.instances must be positive"));
        }
        if self.wt.shells.is_empty() || self.wt.shells.iter().chain(&self.wt.propagate).any(|&s| s < 2) {
            return Err(invalid("wt shells must be at least 2"));
        }
        if !(self.wt.sigma > 0.0 && self.wt.sigma < 1.0) {
            return Err(invalid("wt.sigma must lie in (0,1)"));
        }
        if self.sweep.values.len() < 3 {
            return Err(invalid(format!("sweep needs at least 3 values, got {}", self.sweep.values.len())));
        }
        Ok(())
    }

    pub fn flow_params(&self) -> FlowParams {
        FlowParams { g: self.params.g, p_abs: self.params.p_abs, sigma0: self.params.sigma0, rho: self.params.rho }
    }
}

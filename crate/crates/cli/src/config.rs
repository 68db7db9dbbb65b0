//! Strict TOML run configuration. Every table rejects unknown keys.

use std::collections::BTreeMap;

use homog_core::cell::CellOptions;
use homog_core::coefficients::{corrosion_preset, CoefficientSet, CorrosionParams};
use homog_core::mesh::CellSpec;
use homog_core::pde::TimeGrid;
use homog_core::sparse::SolverOptions;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Top-level configuration; each subcommand reads the tables it needs.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub coefficients: Option<CoefficientsConfig>,
    pub cell: Option<CellConfig>,
    pub time: Option<TimeConfig>,
    pub solver: Option<SolverConfig>,
    pub fine: Option<FineConfig>,
    #[serde(rename = "macro")]
    pub macro_run: Option<MacroConfig>,
    pub sweep: Option<SweepConfig>,
    pub constants: Option<ConstantsConfig>,
    pub oscillation: Option<OscillationConfig>,
    pub corrosion: Option<CorrosionConfig>,
}

/// Coefficient expressions keyed like `"E.11"`, or the corrosion preset.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsConfig {
    #[serde(default = "one")]
    pub n: usize,
    /// `"corrosion"` builds the preset from the `[corrosion]` table; `entries` must then be empty.
    pub preset: Option<String>,
    #[serde(default)]
    pub entries: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    /// `"disk"` or `"none"`.
    #[serde(default = "disk")]
    pub hole: String,
    #[serde(default = "quarter")]
    pub radius: f64,
    #[serde(default = "cell_resolution")]
    pub resolution: usize,
    /// Slow points per axis at which the `cell` command tabulates effective tensors.
    #[serde(default = "one")]
    pub slow_points: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub t_end: f64,
    pub steps: Option<usize>,
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub direct_max_dim: Option<usize>,
    pub check_tol: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FineConfig {
    pub epsilon: f64,
    /// Checks the a priori energy inequality at every step.
    #[serde(default = "yes")]
    pub apriori: bool,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MacroConfig {
    /// Squares per side of the macroscopic mesh.
    pub resolution: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
    #[serde(default = "unit")]
    pub cutoff_multiplier: f64,
    #[serde(default = "slow_resolution")]
    pub slow_resolution: usize,
    #[serde(default = "yes")]
    pub self_check: bool,
    #[serde(default = "sample_points")]
    pub sample_points: usize,
    #[serde(default = "eta_points")]
    pub eta_points: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsConfig {
    #[serde(default = "sample_points")]
    pub sample_points: usize,
    /// `"default"`, `"min_mu"` or `"min_lambda_plus_mu"`.
    #[serde(default = "default_objective")]
    pub optimize: String,
    #[serde(default = "eta_points")]
    pub eta_points: usize,
    /// Loss exponent of the displacement rate, in `[0, 1/2)`.
    #[serde(default = "tenth")]
    pub q: f64,
    pub p: Option<f64>,
    #[serde(default = "rate_points")]
    pub rate_points: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OscillationConfig {
    pub function: String,
    pub epsilons: Vec<f64>,
    #[serde(default = "per_period")]
    pub per_period: usize,
}

/// Overrides of the corrosion parameters; absent keys keep their defaults.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CorrosionConfig {
    pub phi: Option<[f64; 3]>,
    pub chi: Option<[f64; 2]>,
    pub mu: Option<[f64; 2]>,
    pub gamma: Option<[f64; 2]>,
    pub kappa: Option<[f64; 3]>,
    pub lambda_lame: Option<f64>,
    pub f_value: Option<f64>,
}

fn one() -> usize {
    1
}
fn disk() -> String {
    "disk".into()
}
fn quarter() -> f64 {
    0.25
}
fn cell_resolution() -> usize {
    32
}
fn yes() -> bool {
    true
}
fn unit() -> f64 {
    1.0
}
fn slow_resolution() -> usize {
    8
}
fn sample_points() -> usize {
    33
}
fn eta_points() -> usize {
    7
}
fn default_objective() -> String {
    "default".into()
}
fn tenth() -> f64 {
    0.1
}
fn rate_points() -> usize {
    100
}
fn per_period() -> usize {
    16
}

fn need<'a, T>(v: &'a Option<T>, table: &str) -> Result<&'a T, CliError> {
    v.as_ref().ok_or_else(|| CliError::Config(format!("missing [{table}] table")))
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn corrosion_params(&self) -> CorrosionParams {
        let mut p = CorrosionParams::default();
        if let Some(c) = &self.corrosion {
            p.phi = c.phi.unwrap_or(p.phi);
            p.chi = c.chi.unwrap_or(p.chi);
            p.mu = c.mu.unwrap_or(p.mu);
            p.gamma = c.gamma.unwrap_or(p.gamma);
            p.kappa = c.kappa.unwrap_or(p.kappa);
            p.lambda_lame = c.lambda_lame.unwrap_or(p.lambda_lame);
            p.f_value = c.f_value.unwrap_or(p.f_value);
        }
        p
    }

    pub fn coefficients(&self) -> Result<CoefficientSet, CliError> {
        let c = need(&self.coefficients, "coefficients")?;
        match c.preset.as_deref() {
            None => CoefficientSet::from_entries(c.n, c.entries.iter().map(|(k, v)| (k.as_str(), v.as_str())))
                .map_err(|e| CliError::Config(e.to_string())),
            Some("corrosion") if c.entries.is_empty() => corrosion_preset(&self.corrosion_params())
                .map(|(set, _)| set)
                .map_err(|e| CliError::Config(e.to_string())),
            Some("corrosion") => Err(CliError::Config("the corrosion preset takes no entries".into())),
            Some(other) => Err(CliError::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn cell_spec(&self) -> Result<CellSpec, CliError> {
        let c = need(&self.cell, "cell")?;
        if c.resolution < 2 {
            return Err(CliError::Config("cell.resolution must be at least 2".into()));
        }
        match c.hole.as_str() {
            "disk" if c.radius > 0.0 && c.radius < 0.5 => Ok(CellSpec::disk(c.radius, c.resolution)),
            "disk" => Err(CliError::Config(format!("cell.radius {} outside (0, 1/2)", c.radius))),
            "none" => Ok(CellSpec::unperforated(c.resolution)),
            other => Err(CliError::Config(format!("unknown cell.hole {other:?}"))),
        }
    }

    pub fn slow_points(&self) -> Result<Vec<[f64; 2]>, CliError> {
        let k = need(&self.cell, "cell")?.slow_points;
        if k == 0 {
            return Err(CliError::Config("cell.slow_points must be positive".into()));
        }
        let at = |i: usize| (i as f64 + 0.5) / k as f64;
        Ok((0..k).flat_map(|j| (0..k).map(move |i| [at(i), at(j)])).collect())
    }

    pub fn grid(&self) -> Result<TimeGrid, CliError> {
        let t = need(&self.time, "time")?;
        let g = match (t.steps, t.dt) {
            (Some(s), None) => TimeGrid::new(t.t_end, s),
            (None, Some(dt)) => TimeGrid::from_dt(t.t_end, dt),
            _ => return Err(CliError::Config("[time] needs exactly one of steps and dt".into())),
        };
        g.map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn solver(&self) -> SolverOptions {
        let mut o = SolverOptions::default();
        if let Some(s) = &self.solver {
            o.tol = s.tol.unwrap_or(o.tol);
            o.max_iter = s.max_iter.or(o.max_iter);
            o.direct_max_dim = s.direct_max_dim.unwrap_or(o.direct_max_dim);
            o.check_tol = s.check_tol.unwrap_or(o.check_tol);
        }
        o
    }

    pub fn cell_options(&self) -> CellOptions {
        CellOptions { solver: self.solver(), ..CellOptions::default() }
    }

    pub fn fine(&self) -> Result<&FineConfig, CliError> {
        need(&self.fine, "fine")
    }

    pub fn macro_run(&self) -> Result<&MacroConfig, CliError> {
        need(&self.macro_run, "macro")
    }

    pub fn sweep(&self) -> Result<&SweepConfig, CliError> {
        need(&self.sweep, "sweep")
    }

    pub fn constants_table(&self) -> ConstantsConfig {
        self.constants.clone().unwrap_or(ConstantsConfig {
            sample_points: sample_points(),
            optimize: default_objective(),
            eta_points: eta_points(),
            q: tenth(),
            p: None,
            rate_points: rate_points(),
        })
    }

    pub fn oscillation(&self) -> Result<&OscillationConfig, CliError> {
        need(&self.oscillation, "oscillation")
    }
}

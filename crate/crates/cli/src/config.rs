//! Run configuration: one TOML or JSON file, validated and resolved against model defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use contact_hj::ergodic::{default_probe_specs, ErgodicConfig, OptimizerConfig, ProbeSpec};
use contact_hj::semigroup::{Candidates, Coupling, Scheme, SemigroupConfig, DEFAULT_T_FINAL};
use contact_hj::{build_model, HamiltonianModel, ModelSpec, TorusGrid};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub hamiltonian: ModelSpec,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub semigroup: SemigroupSection,
    #[serde(default)]
    pub ergodic: ErgodicSection,
    #[serde(default)]
    pub ode: OdeSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub dim: Option<usize>,
    pub n_per_dim: Option<usize>,
}

/// Overrides of the model-derived operator defaults.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemigroupSection {
    pub dt: Option<f64>,
    pub v_max: Option<f64>,
    pub scheme: Option<Scheme>,
    pub u_coupling: Option<Coupling>,
    pub candidates: Option<Candidates>,
    pub subcells: Option<usize>,
    pub viscosity: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErgodicSection {
    pub c_search: Option<[f64; 2]>,
    pub tol_c: Option<f64>,
    #[serde(rename = "U_box", alias = "u_box")]
    pub u_box: Option<f64>,
    pub probes: Option<Vec<ProbeSpec>>,
    pub t_final: Option<f64>,
    pub drift_threshold: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeSection {
    pub dt_ode: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: Option<PathBuf>,
    pub snapshot_stride: Option<usize>,
    pub seed: Option<u64>,
}

/// Fully resolved configuration; echoed as `run.json` next to every artifact.
#[derive(Clone, Debug, Serialize)]
pub struct Resolved {
    pub hamiltonian: ModelSpec,
    pub grid: TorusGrid,
    pub semigroup: SemigroupConfig,
    pub ergodic: ResolvedErgodic,
    pub dt_ode: f64,
    pub directory: PathBuf,
    pub snapshot_stride: usize,
    pub seed: u64,
    #[serde(skip)]
    pub model: HamiltonianModel,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResolvedErgodic {
    pub c_search: [f64; 2],
    pub tol_c: f64,
    #[serde(rename = "U_box")]
    pub u_box: f64,
    pub probes: Vec<ProbeSpec>,
    pub t_final: f64,
    pub drift_threshold: f64,
}

impl Resolved {
    pub fn ergodic_config(&self) -> ErgodicConfig {
        ErgodicConfig {
            semigroup: self.semigroup,
            t_final: self.ergodic.t_final,
            drift_threshold: self.ergodic.drift_threshold,
        }
    }

    pub fn optimizer_config(&self, u_box: f64) -> OptimizerConfig {
        OptimizerConfig { u_box, seed: self.seed, ..OptimizerConfig::default() }
    }
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let cfg = if is_json {
        serde_json::from_str(&text).with_context(|| format!("parsing JSON config {}", path.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("parsing TOML config {}", path.display()))?
    };
    Ok(cfg)
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if !(v.is_finite() && v > 0.0) {
        bail!("{name} = {v} must be positive and finite");
    }
    Ok(v)
}

impl RunConfig {
    /// Builds the model and grid and re-checks every module precondition.
    pub fn resolve(&self) -> Result<Resolved> {
        let dim = self.grid.dim.unwrap_or(1);
        let model = build_model(&self.hamiltonian, dim).context("building the Hamiltonian")?;
        let n = self.grid.n_per_dim.unwrap_or_else(|| contact_hj::semigroup::default_n_per_dim(dim));
        let grid = TorusGrid::new(dim, n).context("building the grid")?;

        let s = &self.semigroup;
        let mut semigroup = SemigroupConfig::defaults(&model, 0.0);
        if let Some(dt) = s.dt {
            semigroup.dt = positive("semigroup.dt", dt)?;
        }
        if let Some(v) = s.v_max {
            semigroup.v_max = positive("semigroup.v_max", v)?;
        }
        if let Some(v) = s.scheme {
            semigroup.scheme = v;
        }
        if let Some(v) = s.u_coupling {
            semigroup.u_coupling = v;
        }
        if let Some(v) = s.candidates {
            semigroup.candidates = v;
        }
        if let Some(v) = s.subcells {
            semigroup.subcells = v;
        }
        if let Some(v) = s.viscosity {
            semigroup.viscosity = Some(positive("semigroup.viscosity", v)?);
        }
        semigroup.validate(&model, &grid).context("semigroup settings")?;

        let e = &self.ergodic;
        let c_search = e.c_search.unwrap_or([-1.0, 1.0]);
        if !(c_search[0] < c_search[1]) || !c_search.iter().all(|c| c.is_finite()) {
            bail!("ergodic.c_search = {c_search:?} must be an increasing pair");
        }
        let t_final = positive("ergodic.t_final", e.t_final.unwrap_or(DEFAULT_T_FINAL))?;
        let ergodic = ResolvedErgodic {
            c_search,
            tol_c: positive("ergodic.tol_c", e.tol_c.unwrap_or(0.05))?,
            u_box: positive("ergodic.U_box", e.u_box.unwrap_or(10.0))?,
            probes: e.probes.clone().unwrap_or_else(default_probe_specs),
            t_final,
            drift_threshold: positive("ergodic.drift_threshold", e.drift_threshold.unwrap_or(1e-3))?,
        };
        if ergodic.probes.is_empty() {
            bail!("ergodic.probes must not be empty");
        }
        let dt_ode = positive("ode.dt_ode", self.ode.dt_ode.unwrap_or(contact_hj::characteristics::DEFAULT_DT_ODE))?;

        Ok(Resolved {
            hamiltonian: self.hamiltonian.clone(),
            grid,
            semigroup,
            ergodic,
            dt_ode,
            directory: self.output.directory.clone().unwrap_or_else(|| PathBuf::from("out")),
            snapshot_stride: self.output.snapshot_stride.unwrap_or(0),
            seed: self.output.seed.unwrap_or(0),
            model,
        })
    }
}

//! Run configuration: TOML schema, defaults and validation.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use koopman_hj::galerkin::{BasisSpec, Domain, Frame};
use koopman_hj::procedure2::PSampling;
use koopman_hj::system::{Example1, Pendulum, PendulumParams, Polynomial, PolynomialSystem, SystemRef};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Raised before any computation starts; maps to exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub system: SystemConfig,
    /// Box the samples and evaluation grids live in; defaults per builtin system.
    #[serde(default)]
    pub domain: Option<Domain>,
    #[serde(default)]
    pub eigfun: EigfunConfig,
    #[serde(default)]
    pub solve: SolveConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub converge: ConvergeConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SystemConfig {
    Example1,
    Pendulum {
        #[serde(default = "default_gravity")]
        gravity: f64,
    },
    /// `xdot = A x + B u`, `q = 1/2 x^T Q x`.
    Linear {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
        d: Vec<Vec<f64>>,
    },
    /// Polynomial `f` (one entry per state) and `g` (row-major `n x m`).
    Polynomial {
        f: Vec<Polynomial>,
        g: Vec<Polynomial>,
        q: Vec<Vec<f64>>,
        d: Vec<Vec<f64>>,
    },
}

fn default_gravity() -> f64 {
    9.81
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EigfunConfig {
    pub deg_min: u32,
    pub deg_max: u32,
    pub frame: Frame,
    pub drop_resonant: bool,
    pub samples: usize,
}

impl Default for EigfunConfig {
    fn default() -> Self {
        Self { deg_min: 2, deg_max: 5, frame: Frame::State, drop_resonant: false, samples: 10_000 }
    }
}

impl EigfunConfig {
    pub fn basis_spec(&self) -> BasisSpec {
        BasisSpec { deg_min: self.deg_min, deg_max: self.deg_max, frame: self.frame, drop_resonant: self.drop_resonant }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenfunctionSource {
    Galerkin,
    /// Linear parts only.
    Linear,
    /// Closed form, example1 only.
    ClosedForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub procedure: u8,
    /// Procedure 1 eigenfunctions.
    pub eigenfunctions: EigenfunctionSource,
    pub d1: u32,
    pub d2: u32,
    pub p_sampling: PSampling,
    /// Degree of the fitted value term for procedure 2; 0 skips the fit.
    pub value_degree: u32,
    pub value_samples: usize,
    /// Evaluation grid points per axis over the domain.
    pub grid_per_dim: usize,
    /// Optional CSV of states (one per row, no header) to evaluate as well.
    pub states_file: Option<PathBuf>,
    /// Procedure 1: per-block factors applied to the eigenfunctions. Changes
    /// the reported `L`, not the value function.
    pub scale: Option<Vec<f64>>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            procedure: 1,
            eigenfunctions: EigenfunctionSource::Galerkin,
            d1: 5,
            d2: 4,
            p_sampling: PSampling::default(),
            value_degree: 4,
            value_samples: 400,
            grid_per_dim: 21,
            states_file: None,
            scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cloud {
    pub center: Vec<f64>,
    pub rel: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub dt: f64,
    pub t_final: f64,
    /// Built-in controllers: "lqr", "zero".
    pub controllers: Vec<String>,
    /// Solution files written by `solve`, relative to the config file.
    pub solution_files: Vec<PathBuf>,
    pub initial_conditions: Vec<Vec<f64>>,
    pub cloud: Option<Cloud>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { dt: 1e-3, t_final: 20.0, controllers: vec!["lqr".into()], solution_files: vec![], initial_conditions: vec![], cloud: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergeConfig {
    pub samples: Vec<usize>,
    pub trials: usize,
    /// Eigenvalue block whose eigenfunction is studied.
    pub block: usize,
    /// Midpoint-grid cells per axis of the quadrature reference.
    pub reference_per_dim: usize,
    pub eval_per_dim: usize,
}

impl Default for ConvergeConfig {
    fn default() -> Self {
        Self { samples: vec![100, 1000, 10_000], trials: 20, block: 0, reference_per_dim: 1500, eval_per_dim: 50 }
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, ConfigError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(bad(format!("{what} must be a non-empty rectangular array of rows")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl SystemConfig {
    pub fn build(&self) -> Result<SystemRef, ConfigError> {
        if let SystemConfig::Linear { a, b, .. } = self {
            if a.len() != b.len() || a.iter().any(|r| r.len() != a.len()) {
                return Err(bad("a must be square with as many rows as b"));
            }
        }
        let sys: SystemRef = match self {
            SystemConfig::Example1 => Arc::new(Example1::new()),
            SystemConfig::Pendulum { gravity } => {
                Arc::new(Pendulum::new(PendulumParams { gravity: *gravity, ..Default::default() }).map_err(|e| bad(e.to_string()))?)
            }
            SystemConfig::Linear { a, b, q, d } => Arc::new(
                PolynomialSystem::linear(&matrix(a, "a")?, &matrix(b, "b")?, matrix(q, "q")?, matrix(d, "d")?)
                    .map_err(|e| bad(format!("system: {e}")))?,
            ),
            SystemConfig::Polynomial { f, g, q, d } => Arc::new(
                PolynomialSystem::new(f.clone(), g.clone(), matrix(q, "q")?, matrix(d, "d")?).map_err(|e| bad(format!("system: {e}")))?,
            ),
        };
        Ok(sys)
    }

    fn default_domain(&self) -> Option<Domain> {
        match self {
            SystemConfig::Example1 => Domain::symmetric(&[1.0, 1.0]).ok(),
            SystemConfig::Pendulum { .. } => Domain::symmetric(&[3.0, 5.0, 5.0]).ok(),
            _ => None,
        }
    }
}

/// A validated configuration with defaults filled in.
pub struct Resolved {
    pub cfg: RunConfig,
    pub sys: SystemRef,
    pub domain: Domain,
    /// Directory relative paths in the config are resolved against.
    pub base_dir: PathBuf,
}

impl Resolved {
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// The configuration as TOML with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.cfg).expect("config serializes")
    }
}

pub fn load(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<Resolved, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    match out {
        Some(o) => cfg.output_dir = o,
        None if cfg.output_dir.is_relative() => cfg.output_dir = base_dir.join(&cfg.output_dir),
        None => {}
    }
    resolve(cfg, base_dir)
}

pub fn resolve(mut cfg: RunConfig, base_dir: PathBuf) -> Result<Resolved, ConfigError> {
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(bad(format!("schema_version {} unsupported (expected {SCHEMA_VERSION})", cfg.schema_version)));
    }
    let sys = cfg.system.build()?;
    let n = sys.n();
    let domain = match cfg.domain.clone().or_else(|| cfg.system.default_domain()) {
        Some(d) => Domain::new(d.lo, d.hi).map_err(|e| bad(format!("domain: {e}")))?,
        None => return Err(bad("domain is required for this system")),
    };
    if domain.dim() != n {
        return Err(bad(format!("domain has {} coordinates, system has {n}", domain.dim())));
    }
    cfg.domain = Some(domain.clone());

    let e = &cfg.eigfun;
    if e.deg_min < 2 || e.deg_max < e.deg_min {
        return Err(bad("eigfun: need 2 <= deg_min <= deg_max"));
    }
    if e.samples == 0 {
        return Err(bad("eigfun: samples must be positive"));
    }

    let s = &cfg.solve;
    if !(s.procedure == 1 || s.procedure == 2) {
        return Err(bad("solve: procedure must be 1 or 2"));
    }
    if s.eigenfunctions == EigenfunctionSource::ClosedForm && cfg.system != SystemConfig::Example1 {
        return Err(bad("solve: closed_form eigenfunctions exist for example1 only"));
    }
    if s.d1 < 2 || s.d2 < 1 {
        return Err(bad("solve: need d1 >= 2 and d2 >= 1"));
    }
    if s.value_degree == 1 {
        return Err(bad("solve: value_degree must be 0 (no fit) or >= 2"));
    }
    if let Some(f) = &s.scale {
        if f.iter().any(|v| !(v.is_finite() && *v != 0.0)) {
            return Err(bad("solve: scale factors must be finite and nonzero"));
        }
    }
    if s.grid_per_dim < 2 {
        return Err(bad("solve: grid_per_dim must be at least 2"));
    }
    match s.p_sampling {
        PSampling::Slab { width } if !(width > 0.0) => return Err(bad("solve: slab width must be positive")),
        PSampling::Box { factor } if !(factor > 0.0) => return Err(bad("solve: box factor must be positive")),
        _ => {}
    }

    let m = &cfg.simulate;
    if !(m.dt > 0.0) || !(m.t_final >= m.dt) {
        return Err(bad("simulate: need dt > 0 and t_final >= dt"));
    }
    if let Some(c) = m.controllers.iter().find(|c| !matches!(c.as_str(), "lqr" | "zero")) {
        return Err(bad(format!("simulate: unknown controller {c:?} (expected lqr or zero)")));
    }
    if m.initial_conditions.iter().any(|x| x.len() != n) {
        return Err(bad(format!("simulate: initial conditions must have {n} entries")));
    }
    if let Some(c) = &m.cloud {
        if c.center.len() != n || !(c.rel >= 0.0) || c.count == 0 {
            return Err(bad("simulate: cloud needs an n-vector center, rel >= 0 and count > 0"));
        }
    }

    let c = &cfg.converge;
    if c.samples.len() < 2 || c.samples.contains(&0) || c.trials == 0 || c.eval_per_dim == 0 || c.reference_per_dim == 0 {
        return Err(bad("converge: need at least two positive sample sizes, trials > 0 and positive grid sizes"));
    }
    if c.block >= n {
        return Err(bad(format!("converge: block {} out of range", c.block)));
    }
    Ok(Resolved { cfg, sys, domain, base_dir })
}

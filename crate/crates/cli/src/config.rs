//! Versioned experiment configuration. Unknown keys are errors and every
//! parameter is checked before any computation starts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use fbsde_lab::drivers::{Driver, TerminalCondition};
use fbsde_lab::experiments::ns2d::StreamFunction;
use fbsde_lab::ldp::Event;
use fbsde_lab::ForwardModel;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read `{path}`: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("unsupported schema version {0}, expected {SCHEMA_VERSION}")]
    Schema(u32),
    #[error("config describes a `{found}` experiment but the subcommand is `{expected}`")]
    Mismatch { found: Experiment, expected: Experiment },
    #[error("invalid `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

pub(crate) fn invalid<T>(key: &str, reason: impl fmt::Display) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid { key: key.into(), reason: reason.to_string() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Forward,
    Solve,
    Pde,
    Sweep,
    Ldp,
    Burgers,
    Ns2d,
    Proptest,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::Forward => "forward",
            Self::Solve => "solve",
            Self::Pde => "pde",
            Self::Sweep => "sweep",
            Self::Ldp => "ldp",
            Self::Burgers => "burgers",
            Self::Ns2d => "ns2d",
            Self::Proptest => "proptest",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema: u32,
    experiment: Experiment,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    output: Option<PathBuf>,
    #[serde(default)]
    params: Map<String, Value>,
}

/// A built-in component selected by kind tag with scalar parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindSpec {
    pub kind: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl KindSpec {
    fn of(kind: &str) -> Self {
        Self { kind: kind.into(), params: BTreeMap::new() }
    }

    fn with(kind: &str, params: &[(&str, f64)]) -> Self {
        Self { kind: kind.into(), params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect() }
    }

    pub fn model(&self, key: &str) -> Result<ForwardModel, ConfigError> {
        let allowed: &[&str] = match self.kind.as_str() {
            "brownian" => &["scale"],
            "mean_reverting" => &["theta", "sigma"],
            "constant" => &["drift", "sigma"],
            other => return invalid(key, format!("unknown model kind `{other}`")),
        };
        if let Some(bad) = self.params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return invalid(&format!("{key}.params.{bad}"), format!("model `{}` has no such parameter", self.kind));
        }
        let get = |name: &str, default: f64| -> Result<f64, ConfigError> {
            let v = self.params.get(name).copied().unwrap_or(default);
            if v.is_finite() {
                Ok(v)
            } else {
                invalid(&format!("{key}.params.{name}"), "must be finite")
            }
        };
        Ok(match self.kind.as_str() {
            "brownian" => ForwardModel::brownian(1, get("scale", 1.0)?),
            "mean_reverting" => {
                let theta = get("theta", 1.0)?;
                if theta < 0.0 {
                    return invalid(&format!("{key}.params.theta"), "must be nonnegative");
                }
                ForwardModel::mean_reverting(theta, get("sigma", 1.0)?)
            }
            _ => ForwardModel::constant(vec![get("drift", 0.0)?], vec![get("sigma", 1.0)?], 1),
        })
    }

    pub fn driver(&self, key: &str) -> Result<Driver, ConfigError> {
        Driver::from_kind(&self.kind, &self.params).or_else(|e| invalid(key, e))
    }

    pub fn terminal(&self, key: &str) -> Result<TerminalCondition, ConfigError> {
        TerminalCondition::from_kind(&self.kind, &self.params, 1).or_else(|e| invalid(key, e))
    }
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        invalid(key, format!("must be positive and finite, got {v}"))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<(), ConfigError> {
    if v >= min {
        Ok(())
    } else {
        invalid(key, format!("must be at least {min}, got {v}"))
    }
}

fn finite_all(key: &str, vs: &[f64]) -> Result<(), ConfigError> {
    match vs.iter().position(|v| !v.is_finite()) {
        Some(i) => invalid(&format!("{key}[{i}]"), "must be finite"),
        None => Ok(()),
    }
}

fn epsilons_ok(key: &str, eps: &[f64]) -> Result<(), ConfigError> {
    if eps.is_empty() {
        return invalid(key, "needs at least one value");
    }
    match eps.iter().position(|e| !(*e > 0.0 && *e <= 1.0)) {
        Some(i) => invalid(&format!("{key}[{i}]"), format!("must lie in (0, 1], got {}", eps[i])),
        None => Ok(()),
    }
}

fn scalar_start(key: &str, x0: &[f64]) -> Result<(), ConfigError> {
    if x0.len() != 1 {
        return invalid(key, format!("models are one-dimensional, got {} coordinates", x0.len()));
    }
    finite_all(key, x0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardParams {
    pub model: KindSpec,
    pub x0: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub antithetic: bool,
}

impl Default for ForwardParams {
    fn default() -> Self {
        Self {
            model: KindSpec::with("mean_reverting", &[("theta", 1.0), ("sigma", 1.0)]),
            x0: vec![1.0],
            epsilons: vec![1.0, 0.5, 0.25, 0.1],
            horizon: 1.0,
            steps: 100,
            paths: 10_000,
            antithetic: false,
        }
    }
}

impl ForwardParams {
    fn check(&self) -> Result<(), ConfigError> {
        self.model.model("params.model")?;
        scalar_start("params.x0", &self.x0)?;
        epsilons_ok("params.epsilons", &self.epsilons)?;
        positive("params.horizon", self.horizon)?;
        at_least("params.steps", self.steps, 1)?;
        at_least("params.paths", self.paths, 1)?;
        if self.antithetic && self.paths % 2 == 1 {
            return invalid("params.paths", "antithetic pairing needs an even path count");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSpec {
    /// `constant` (`f = c|z|²`) or `identity` (`f = y|z|²`).
    pub g_coef: String,
    pub c: f64,
    pub y_max: f64,
    pub table_size: usize,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self { g_coef: "constant".into(), c: 0.5, y_max: 4.0, table_size: 4096 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveParams {
    pub model: KindSpec,
    pub driver: KindSpec,
    pub terminal: KindSpec,
    pub x0: Vec<f64>,
    pub epsilon: f64,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub basis_degree: usize,
    pub picard: usize,
    pub transform: Option<TransformSpec>,
    pub gradient: bool,
}

impl Default for SolveParams {
    fn default() -> Self {
        Self {
            model: KindSpec::of("brownian"),
            driver: KindSpec::with("entropic", &[("gamma", 1.0)]),
            terminal: KindSpec::of("cos"),
            x0: vec![0.0],
            epsilon: 1.0,
            horizon: 1.0,
            steps: 50,
            paths: 20_000,
            basis_degree: 4,
            picard: 3,
            transform: None,
            gradient: false,
        }
    }
}

impl SolveParams {
    fn check(&self) -> Result<(), ConfigError> {
        self.model.model("params.model")?;
        self.driver.driver("params.driver")?;
        self.terminal.terminal("params.terminal")?;
        scalar_start("params.x0", &self.x0)?;
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return invalid("params.epsilon", "must be finite and nonnegative");
        }
        positive("params.horizon", self.horizon)?;
        at_least("params.steps", self.steps, 1)?;
        at_least("params.paths", self.paths, 16)?;
        at_least("params.basis_degree", self.basis_degree, 1)?;
        if let Some(t) = &self.transform {
            if t.g_coef != "constant" && t.g_coef != "identity" {
                return invalid("params.transform.g_coef", format!("expected `constant` or `identity`, got `{}`", t.g_coef));
            }
            if !t.c.is_finite() {
                return invalid("params.transform.c", "must be finite");
            }
            positive("params.transform.y_max", t.y_max)?;
            at_least("params.transform.table_size", t.table_size, 2)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdeParams {
    pub model: KindSpec,
    pub driver: KindSpec,
    pub terminal: KindSpec,
    pub epsilon: f64,
    pub horizon: f64,
    pub n_x: usize,
    pub n_t: usize,
    pub probes: Vec<f64>,
    /// Bound on `|σ|` used to pad the domain.
    pub sigma_max: f64,
}

impl Default for PdeParams {
    fn default() -> Self {
        Self {
            model: KindSpec::of("brownian"),
            driver: KindSpec::of("zero"),
            terminal: KindSpec::of("cos"),
            epsilon: 1.0,
            horizon: 1.0,
            n_x: 400,
            n_t: 400,
            probes: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            sigma_max: 1.0,
        }
    }
}

impl PdeParams {
    fn check(&self) -> Result<(), ConfigError> {
        self.model.model("params.model")?;
        self.driver.driver("params.driver")?;
        self.terminal.terminal("params.terminal")?;
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return invalid("params.epsilon", "must be finite and nonnegative");
        }
        positive("params.horizon", self.horizon)?;
        at_least("params.n_x", self.n_x, 8)?;
        at_least("params.n_t", self.n_t, 1)?;
        if self.probes.is_empty() {
            return invalid("params.probes", "needs at least one point");
        }
        finite_all("params.probes", &self.probes)?;
        positive("params.sigma_max", self.sigma_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepParams {
    pub epsilons: Vec<f64>,
    pub model: KindSpec,
    pub driver: KindSpec,
    pub terminal: KindSpec,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub p: f64,
    pub basis_degree: usize,
    pub picard: usize,
    /// Allowance for the time-discretization bias in the `Y₀` limit check.
    pub discretization_tol: f64,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            epsilons: vec![0.4, 0.2, 0.1, 0.05],
            model: KindSpec::with("mean_reverting", &[("theta", 1.0), ("sigma", 1.0)]),
            driver: KindSpec::with("lipschitz_example", &[("lambda", 0.5)]),
            terminal: KindSpec::of("cos"),
            x0: vec![0.5],
            horizon: 1.0,
            steps: 50,
            paths: 20_000,
            p: 2.0,
            basis_degree: 4,
            picard: 3,
            discretization_tol: 0.03,
        }
    }
}

impl SweepParams {
    fn check(&self) -> Result<(), ConfigError> {
        epsilons_ok("params.epsilons", &self.epsilons)?;
        self.model.model("params.model")?;
        self.driver.driver("params.driver")?;
        self.terminal.terminal("params.terminal")?;
        scalar_start("params.x0", &self.x0)?;
        positive("params.horizon", self.horizon)?;
        at_least("params.steps", self.steps, 1)?;
        at_least("params.paths", self.paths, 16)?;
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return invalid("params.p", format!("must be at least 1, got {}", self.p));
        }
        at_least("params.basis_degree", self.basis_degree, 1)?;
        positive("params.discretization_tol", self.discretization_tol)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventSpec {
    Endpoint {
        target: Vec<f64>,
        #[serde(default)]
        radius: f64,
    },
    TerminalHalfspace {
        normal: Vec<f64>,
        level: f64,
    },
    TubeExit {
        radius: f64,
        #[serde(default)]
        direction: Option<Vec<f64>>,
    },
}

impl EventSpec {
    pub fn event(&self) -> Event {
        match self.clone() {
            Self::Endpoint { target, radius } => Event::Endpoint { target, radius },
            Self::TerminalHalfspace { normal, level } => Event::TerminalHalfspace { normal, level },
            Self::TubeExit { radius, direction } => Event::TubeExit { radius, direction },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmpiricalSpec {
    pub epsilons: Vec<f64>,
    pub paths: usize,
    pub steps: usize,
}

impl Default for EmpiricalSpec {
    fn default() -> Self {
        Self { epsilons: vec![0.25, 0.15, 0.1], paths: 200_000, steps: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdpParams {
    pub model: KindSpec,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub nodes: usize,
    pub event: EventSpec,
    pub restarts: usize,
    pub empirical: Option<EmpiricalSpec>,
}

impl Default for LdpParams {
    fn default() -> Self {
        Self {
            model: KindSpec::of("brownian"),
            x0: vec![0.0],
            horizon: 1.0,
            nodes: 64,
            event: EventSpec::TubeExit { radius: 1.0, direction: Some(vec![1.0]) },
            restarts: 4,
            empirical: None,
        }
    }
}

impl LdpParams {
    fn check(&self) -> Result<(), ConfigError> {
        if !self.model.model("params.model")?.is_bounded() {
            return invalid("params.model", "the action functional needs bounded coefficients");
        }
        scalar_start("params.x0", &self.x0)?;
        positive("params.horizon", self.horizon)?;
        at_least("params.nodes", self.nodes, 2)?;
        at_least("params.restarts", self.restarts, 1)?;
        self.event.event().validate(1).or_else(|e| invalid("params.event", e))?;
        if let Some(e) = &self.empirical {
            epsilons_ok("params.empirical.epsilons", &e.epsilons)?;
            at_least("params.empirical.paths", e.paths, 1)?;
            at_least("params.empirical.steps", e.steps, 1)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoupledParams {
    pub outer_iters: usize,
    pub tol: f64,
    pub cloud: [f64; 2],
    pub lipschitz_probes: Vec<f64>,
}

impl Default for CoupledParams {
    fn default() -> Self {
        Self { outer_iters: 10, tol: 1e-3, cloud: [-3.0, 3.0], lipschitz_probes: vec![-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BurgersParams {
    pub a: f64,
    pub lambda: f64,
    pub epsilons: Vec<f64>,
    pub terminal: KindSpec,
    pub x0: f64,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub basis_degree: usize,
    pub picard: usize,
    pub probes: Vec<f64>,
    pub fd_nx: usize,
    pub fd_nt: usize,
    pub coupled: Option<CoupledParams>,
}

impl Default for BurgersParams {
    fn default() -> Self {
        Self {
            a: 1.0,
            lambda: 1.0,
            epsilons: vec![0.5],
            terminal: KindSpec::of("cos"),
            x0: 0.0,
            horizon: 1.0,
            steps: 50,
            paths: 20_000,
            basis_degree: 8,
            picard: 3,
            probes: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            fd_nx: 400,
            fd_nt: 400,
            coupled: None,
        }
    }
}

impl BurgersParams {
    fn check(&self) -> Result<(), ConfigError> {
        if !self.a.is_finite() {
            return invalid("params.a", "must be finite");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return invalid("params.lambda", format!("must be nonnegative, got {}", self.lambda));
        }
        epsilons_ok("params.epsilons", &self.epsilons)?;
        self.terminal.terminal("params.terminal")?;
        finite_all("params.x0", &[self.x0])?;
        positive("params.horizon", self.horizon)?;
        at_least("params.steps", self.steps, 1)?;
        at_least("params.paths", self.paths, 16)?;
        at_least("params.basis_degree", self.basis_degree, 1)?;
        finite_all("params.probes", &self.probes)?;
        if !self.probes.is_empty() {
            at_least("params.fd_nx", self.fd_nx, 8)?;
            at_least("params.fd_nt", self.fd_nt, 1)?;
        }
        if let Some(c) = &self.coupled {
            at_least("params.coupled.outer_iters", c.outer_iters, 1)?;
            positive("params.coupled.tol", c.tol)?;
            if !(c.cloud[0] < c.cloud[1]) {
                return invalid("params.coupled.cloud", "needs lo < hi");
            }
            finite_all("params.coupled.lipschitz_probes", &c.lipschitz_probes)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StreamSpec {
    Constant { h: [f64; 2] },
    TaylorGreen { amplitude: f64 },
    Shear { amplitude: f64 },
}

impl StreamSpec {
    pub fn stream(&self) -> StreamFunction {
        match *self {
            Self::Constant { h } => StreamFunction::Constant { h },
            Self::TaylorGreen { amplitude } => StreamFunction::TaylorGreen { amplitude },
            Self::Shear { amplitude } => StreamFunction::Shear { amplitude },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ns2dParams {
    pub nu: f64,
    pub k: [f64; 2],
    pub stream: StreamSpec,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub grid_n: usize,
    pub domain: [f64; 2],
    pub margin: f64,
    pub basis_degree: usize,
    pub picard: usize,
    pub div_tol: f64,
}

impl Default for Ns2dParams {
    fn default() -> Self {
        let p = fbsde_lab::experiments::ns2d::Ns2dProblem::default();
        Self {
            nu: p.nu,
            k: p.k,
            stream: StreamSpec::TaylorGreen { amplitude: 1.0 },
            horizon: p.horizon,
            steps: p.steps,
            paths: p.paths,
            grid_n: p.grid_n,
            domain: [p.domain.0, p.domain.1],
            margin: p.margin,
            basis_degree: p.basis_degree,
            picard: p.picard,
            div_tol: p.div_tol,
        }
    }
}

impl Ns2dParams {
    pub fn problem(&self) -> fbsde_lab::experiments::ns2d::Ns2dProblem {
        fbsde_lab::experiments::ns2d::Ns2dProblem {
            nu: self.nu,
            k: self.k,
            stream: self.stream.stream(),
            horizon: self.horizon,
            steps: self.steps,
            paths: self.paths,
            grid_n: self.grid_n,
            domain: (self.domain[0], self.domain[1]),
            margin: self.margin,
            basis_degree: self.basis_degree,
            picard: self.picard,
            div_tol: self.div_tol,
        }
    }

    fn check(&self) -> Result<(), ConfigError> {
        positive("params.nu", self.nu)?;
        finite_all("params.k", &self.k)?;
        positive("params.horizon", self.horizon)?;
        at_least("params.steps", self.steps, 1)?;
        at_least("params.paths", self.paths, 16)?;
        at_least("params.grid_n", self.grid_n, 3)?;
        if !(self.domain[0] < self.domain[1]) {
            return invalid("params.domain", "needs lo < hi");
        }
        if !(self.margin >= 0.0) {
            return invalid("params.margin", "must be nonnegative");
        }
        positive("params.div_tol", self.div_tol)?;
        self.problem().validate().or_else(|e| invalid("params", e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProptestParams {
    /// Empty runs every suite.
    pub suites: Vec<String>,
    pub pairs: usize,
    pub paths: usize,
    pub steps: usize,
    pub basis_degree: usize,
}

impl Default for ProptestParams {
    fn default() -> Self {
        let c = fbsde_lab::experiments::suites::SuiteConfig::default();
        Self { suites: Vec::new(), pairs: c.pairs, paths: c.paths, steps: c.steps, basis_degree: c.basis_degree }
    }
}

impl ProptestParams {
    pub fn suite_config(&self) -> fbsde_lab::experiments::suites::SuiteConfig {
        fbsde_lab::experiments::suites::SuiteConfig {
            pairs: self.pairs,
            paths: self.paths,
            steps: self.steps,
            basis_degree: self.basis_degree,
        }
    }

    fn check(&self) -> Result<(), ConfigError> {
        use fbsde_lab::experiments::suites::SUITES;
        if let Some(bad) = self.suites.iter().find(|s| !SUITES.contains(&s.as_str())) {
            return invalid("params.suites", format!("unknown suite `{bad}`, expected one of {SUITES:?}"));
        }
        at_least("params.pairs", self.pairs, 1)?;
        at_least("params.paths", self.paths, 16)?;
        at_least("params.steps", self.steps, 1)?;
        at_least("params.basis_degree", self.basis_degree, 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Params {
    Forward(ForwardParams),
    Solve(SolveParams),
    Pde(PdeParams),
    Sweep(SweepParams),
    Ldp(LdpParams),
    Burgers(BurgersParams),
    Ns2d(Ns2dParams),
    Proptest(ProptestParams),
}

impl Params {
    fn parse(experiment: Experiment, raw: Value) -> Result<Self, ConfigError> {
        fn typed<T: serde::de::DeserializeOwned>(raw: Value) -> Result<T, ConfigError> {
            serde_json::from_value(raw).map_err(|e| ConfigError::Parse(format!("params: {e}")))
        }
        Ok(match experiment {
            Experiment::Forward => Self::Forward(typed(raw)?),
            Experiment::Solve => Self::Solve(typed(raw)?),
            Experiment::Pde => Self::Pde(typed(raw)?),
            Experiment::Sweep => Self::Sweep(typed(raw)?),
            Experiment::Ldp => Self::Ldp(typed(raw)?),
            Experiment::Burgers => Self::Burgers(typed(raw)?),
            Experiment::Ns2d => Self::Ns2d(typed(raw)?),
            Experiment::Proptest => Self::Proptest(typed(raw)?),
        })
    }

    fn check(&self) -> Result<(), ConfigError> {
        match self {
            Self::Forward(p) => p.check(),
            Self::Solve(p) => p.check(),
            Self::Pde(p) => p.check(),
            Self::Sweep(p) => p.check(),
            Self::Ldp(p) => p.check(),
            Self::Burgers(p) => p.check(),
            Self::Ns2d(p) => p.check(),
            Self::Proptest(p) => p.check(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub experiment: Experiment,
    pub seed: u64,
    pub output: PathBuf,
    pub params: Params,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    /// `dotted.key = value` assignments inside `params`.
    pub params: Vec<(String, Value)>,
}

/// Parses `key=value`; the value is read as JSON and falls back to a string.
pub fn parse_assignment(s: &str) -> Result<(String, Value), ConfigError> {
    let (key, value) = s.split_once('=').ok_or_else(|| ConfigError::Parse(format!("expected key=value, got `{s}`")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Parse(format!("malformed key in `{s}`")));
    }
    let value = serde_json::from_str(value.trim()).unwrap_or_else(|_| Value::String(value.trim().to_string()));
    Ok((key.to_string(), value))
}

fn assign(params: &mut Map<String, Value>, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut parts = key.split('.').peekable();
    let mut node = params;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            node.insert(part.to_string(), value);
            return Ok(());
        }
        let child = node.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        node = child
            .as_object_mut()
            .ok_or_else(|| ConfigError::Invalid { key: format!("params.{key}"), reason: format!("`{part}` is not an object") })?;
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::assemble(raw, &Overrides::default())
    }

    /// Reads `file` when given, checks it describes `experiment`, applies
    /// the overrides and validates every parameter.
    pub fn resolve(experiment: Experiment, file: Option<&Path>, overrides: &Overrides) -> Result<Self, ConfigError> {
        let raw = match file {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.to_path_buf(), reason: e.to_string() })?;
                let raw: RawConfig = serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
                if raw.experiment != experiment {
                    return Err(ConfigError::Mismatch { found: raw.experiment, expected: experiment });
                }
                raw
            }
            None => RawConfig { schema: SCHEMA_VERSION, experiment, seed: None, output: None, params: Map::new() },
        };
        Self::assemble(raw, overrides)
    }

    fn assemble(mut raw: RawConfig, overrides: &Overrides) -> Result<Self, ConfigError> {
        if raw.schema != SCHEMA_VERSION {
            return Err(ConfigError::Schema(raw.schema));
        }
        for (key, value) in &overrides.params {
            assign(&mut raw.params, key, value.clone())?;
        }
        let params = Params::parse(raw.experiment, Value::Object(raw.params))?;
        params.check()?;
        let seed = overrides.seed.or(raw.seed).unwrap_or(DEFAULT_SEED);
        let output = overrides.output.clone().or(raw.output).unwrap_or_else(|| PathBuf::from("out").join(raw.experiment.name()));
        Ok(Self { schema: SCHEMA_VERSION, experiment: raw.experiment, seed, output, params })
    }

    /// The effective configuration, loadable again with [`ExperimentConfig::from_json`].
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("configuration serializes")
    }
}

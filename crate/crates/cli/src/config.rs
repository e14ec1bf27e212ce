//! JSON run configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use mfg_core::coupling::CouplingSpec;
use mfg_core::discretization::{ConstraintOperator, DiscreteField, GridSpec};
use mfg_core::hamiltonian::{CosineField, HamiltonianModel};
use mfg_core::multipop::{BestResponseParams, MultiPopSpec};
use mfg_core::solver::SolverParams;
use serde::{Deserialize, Serialize};

pub const MIN_CELLS: usize = 2;
pub const MAX_CELLS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    P1,
    P2,
    MultipopBr,
    MultipopPotential,
    MultipopPotentialConstrained,
}

impl ProblemKind {
    pub fn is_multipop(self) -> bool {
        matches!(self, Self::MultipopBr | Self::MultipopPotential | Self::MultipopPotentialConstrained)
    }

    pub fn is_capped(self) -> bool {
        matches!(self, Self::P2 | Self::MultipopPotentialConstrained)
    }
}

/// A coefficient `a0 + a1·cos(πx) + a2·cos(πy)`: a number, a triple
/// `[a0, a1, a2]`, or an object with those keys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coefficient {
    Constant(f64),
    Triple([f64; 3]),
    Fields(CosineField),
}

impl Coefficient {
    pub fn field(self) -> CosineField {
        match self {
            Self::Constant(a) => CosineField::constant(a),
            Self::Triple([a0, a1, a2]) => CosineField::new(a0, a1, a2),
            Self::Fields(f) => f,
        }
    }
}

fn one() -> Coefficient {
    Coefficient::Constant(1.0)
}

fn zero() -> Coefficient {
    Coefficient::Constant(0.0)
}

fn unit() -> f64 {
    1.0
}

/// `H(x, ξ) = (b/q′)|ξ|^{q′} + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianConfig {
    pub qprime: f64,
    #[serde(default = "one")]
    pub b: Coefficient,
    #[serde(default = "zero")]
    pub c: Coefficient,
}

/// Rectangle `[0, lx] × [0, ly]` split into `nx × ny` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "unit")]
    pub lx: f64,
    #[serde(default = "unit")]
    pub ly: f64,
    pub nx: usize,
    pub ny: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemKind,
    pub grid: GridConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hamiltonian: Option<HamiltonianConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<CouplingSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<Coefficient>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub populations: Option<Vec<HamiltonianConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interaction: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub solver: SolverParams,
    #[serde(default)]
    pub best_response: BestResponseParams,
    /// Extra randomized re-solves for the uniqueness probe (single population).
    #[serde(default)]
    pub uniqueness_trials: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub emit_heatmaps: bool,
    #[serde(default)]
    pub diagnostics: bool,
    #[serde(default)]
    pub seed: u64,
}

/// A configuration error, anchored to a line of the source when possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub source: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.source, l, self.message),
            None => write!(f, "{}: {}", self.source, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// The problem assembled from a validated configuration.
pub enum Problem {
    Single { model: HamiltonianModel, coupling: CouplingSpec, kappa: Option<DiscreteField> },
    Multi(MultiPopSpec),
}

pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError { source: name.clone(), line: None, message: format!("cannot read: {e}") })?;
    parse(&text, &name)
}

pub fn parse(text: &str, name: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError {
        source: name.to_owned(),
        line: (e.line() > 0).then_some(e.line()),
        message: e.to_string().rsplit_once(" at line ").map_or_else(|| e.to_string(), |(m, _)| m.to_owned()),
    })?;
    cfg.validate().map_err(|(key, occurrence, message)| ConfigError {
        source: name.to_owned(),
        line: locate(text, key, occurrence),
        message,
    })?;
    Ok(cfg)
}

/// 1-based line of the `occurrence`-th appearance of `"key"` as an object key.
fn locate(text: &str, key: &str, occurrence: usize) -> Option<usize> {
    let needle = format!("\"{key}\"");
    let mut seen = 0;
    for (i, line) in text.lines().enumerate() {
        let mut rest = line;
        while let Some(pos) = rest.find(&needle) {
            let after = rest[pos + needle.len()..].trim_start();
            if after.starts_with(':') {
                if seen == occurrence {
                    return Some(i + 1);
                }
                seen += 1;
            }
            rest = &rest[pos + needle.len()..];
        }
    }
    None
}

type Invalid = (&'static str, usize, String);

impl RunConfig {
    /// Checks ranges and the fields each problem kind needs. Errors name the
    /// offending key and which of its occurrences is at fault.
    fn validate(&self) -> Result<(), Invalid> {
        let g = &self.grid;
        for (key, n) in [("nx", g.nx), ("ny", g.ny)] {
            if !(MIN_CELLS..=MAX_CELLS).contains(&n) {
                return Err((key, 0, format!("{key} = {n} must lie in [{MIN_CELLS}, {MAX_CELLS}]")));
            }
        }
        self.grid_spec().map_err(|e| ("grid", 0, e.to_string()))?;
        let kind = self.problem;
        let need = |present: bool, key: &'static str| -> Result<(), Invalid> {
            if present {
                Ok(())
            } else {
                Err(("problem", 0, format!("problem {kind:?} requires \"{key}\"")))
            }
        };
        let forbid = |present: bool, key: &'static str| -> Result<(), Invalid> {
            if present {
                Err((key, 0, format!("\"{key}\" does not apply to problem {kind:?}")))
            } else {
                Ok(())
            }
        };
        if kind.is_multipop() {
            forbid(self.hamiltonian.is_some(), "hamiltonian")?;
            forbid(self.coupling.is_some(), "coupling")?;
            need(self.populations.is_some(), "populations")?;
            need(self.interaction.is_some(), "interaction")?;
            forbid(self.uniqueness_trials > 0, "uniqueness_trials")?;
        } else {
            forbid(self.populations.is_some(), "populations")?;
            forbid(self.interaction.is_some(), "interaction")?;
            forbid(self.alpha.is_some(), "alpha")?;
            need(self.hamiltonian.is_some(), "hamiltonian")?;
        }
        if kind.is_capped() {
            need(self.kappa.is_some(), "kappa")?;
        } else {
            forbid(self.kappa.is_some(), "kappa")?;
        }
        if kind == ProblemKind::MultipopPotentialConstrained {
            need(self.alpha.is_some(), "alpha")?;
        } else if kind.is_multipop() {
            forbid(self.alpha.is_some(), "alpha")?;
        }

        let hams: Vec<&HamiltonianConfig> = match (&self.hamiltonian, &self.populations) {
            (Some(h), _) => vec![h],
            (_, Some(p)) => p.iter().collect(),
            _ => vec![],
        };
        for (i, h) in hams.iter().enumerate() {
            if !(h.qprime > 1.0 && h.qprime < 2.0) {
                let q = if h.qprime > 1.0 { format!("{}", h.qprime / (h.qprime - 1.0)) } else { "undefined".into() };
                return Err((
                    "qprime",
                    i,
                    format!(
                        "qprime = {} must lie in (1, 2): the conjugate exponent q = q'/(q'-1) = {q} must exceed \
                         the dimension d = 2 (q > d)",
                        h.qprime
                    ),
                ));
            }
            self.model(h).map_err(|e| ("qprime", i, e.to_string()))?;
        }
        if let Some(c) = &self.coupling {
            c.validate().map_err(|e| ("coupling", 0, e.to_string()))?;
        }
        if let Some(k) = self.kappa {
            let f = k.field();
            let (lo, _) = f.range(g.lx, g.ly);
            if !(lo > 0.0) {
                return Err(("kappa", 0, format!("kappa must be positive on the domain (min {lo})")));
            }
        }
        if let Some(s) = &self.interaction {
            let n = hams.len();
            if n < 2 {
                return Err(("populations", 0, "at least two populations are required".into()));
            }
            if s.len() != n || s.iter().any(|r| r.len() != n) {
                return Err(("interaction", 0, format!("interaction must be a {n}x{n} matrix")));
            }
        }
        if let Some(a) = &self.alpha {
            if a.len() != hams.len() {
                return Err(("alpha", 0, format!("alpha needs one weight per population ({})", hams.len())));
            }
        }
        self.solver.validate().map_err(|e| ("solver", 0, e.to_string()))?;
        Ok(())
    }

    pub fn grid_spec(&self) -> mfg_core::Result<GridSpec> {
        GridSpec::new(self.grid.lx, self.grid.ly, self.grid.nx, self.grid.ny)
    }

    fn model(&self, h: &HamiltonianConfig) -> mfg_core::Result<HamiltonianModel> {
        HamiltonianModel::new(h.qprime, h.b.field(), h.c.field(), [self.grid.lx, self.grid.ly])
    }

    /// Builds the problem on `op`'s grid. Call only on a validated config.
    pub fn problem(&self, op: &ConstraintOperator) -> mfg_core::Result<Problem> {
        let kappa = self.kappa.map(|k| {
            let f = k.field();
            DiscreteField::from_fn(op.grid(), |x| f.eval(x))
        });
        if self.problem.is_multipop() {
            let hams = self.populations.as_deref().unwrap_or_default();
            let models = hams.iter().map(|h| self.model(h)).collect::<mfg_core::Result<Vec<_>>>()?;
            let mut spec = MultiPopSpec::new(models, self.interaction.clone().unwrap_or_default())?;
            if let (Some(k), Some(a)) = (kappa, &self.alpha) {
                spec = spec.with_constraint(k, a.clone());
            }
            Ok(Problem::Multi(spec))
        } else {
            let h = self.hamiltonian.as_ref().expect("validated");
            Ok(Problem::Single {
                model: self.model(h)?,
                coupling: self.coupling.clone().unwrap_or(CouplingSpec::Zero {}),
                kappa,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
  "problem": "p1",
  "grid": { "nx": 8, "ny": 8 },
  "hamiltonian": { "qprime": 1.5, "c": [0.0, 0.5, 0.25] },
  "coupling": { "kind": "local_primitive", "r": 1.0 }
}"#;

    #[test]
    fn accepts_every_coefficient_form() {
        let cfg = parse(BASE, "t").unwrap();
        assert_eq!(cfg.hamiltonian.unwrap().c.field(), CosineField::new(0.0, 0.5, 0.25));
        let text = BASE.replace("[0.0, 0.5, 0.25]", r#"{ "a0": 1.0, "a2": 2.0 }"#);
        assert_eq!(parse(&text, "t").unwrap().hamiltonian.unwrap().c.field(), CosineField::new(1.0, 0.0, 2.0));
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let text = BASE.replace("\"nx\": 8", "\"nx\": 8, \"nz\": 3");
        let e = parse(&text, "t").unwrap_err();
        assert_eq!(e.line, Some(3), "{e}");
        assert!(e.message.contains("nz"));
    }

    #[test]
    fn exponent_outside_range_cites_dimension() {
        let e = parse(&BASE.replace("1.5", "2.5"), "t").unwrap_err();
        assert_eq!(e.line, Some(4));
        assert!(e.message.contains("q > d"), "{e}");
    }

    #[test]
    fn grid_limits() {
        assert_eq!(parse(&BASE.replace("\"ny\": 8", "\"ny\": 1"), "t").unwrap_err().line, Some(3));
        assert!(parse(&BASE.replace("\"nx\": 8", "\"nx\": 1025"), "t").is_err());
        assert!(parse(&BASE.replace("\"nx\": 8", "\"nx\": 1024"), "t").is_ok());
    }

    #[test]
    fn kind_specific_fields() {
        let e = parse(&BASE.replace("\"p1\"", "\"p2\""), "t").unwrap_err();
        assert!(e.message.contains("kappa"));
        let text = BASE.replace("\"coupling\"", "\"kappa\": 2.0, \"coupling\"");
        assert_eq!(parse(&text, "t").unwrap_err().line, Some(5));
    }

    #[test]
    fn locate_skips_values_and_counts_occurrences() {
        let text = "{\n \"a\": \"qprime\",\n \"qprime\": 1,\n \"x\": { \"qprime\": 2 }\n}";
        assert_eq!(locate(text, "qprime", 0), Some(3));
        assert_eq!(locate(text, "qprime", 1), Some(4));
        assert_eq!(locate(text, "qprime", 2), None);
    }

    #[test]
    fn echo_round_trips() {
        let cfg = parse(BASE, "t").unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}

//! Re-certification of a results directory.

use std::fs;
use std::path::Path;

use mfg_core::discretization::{ConstraintOperator, DiscreteField, DiscreteVectorField};
use mfg_core::io::{read_scalar_file, read_vector_file};
use mfg_core::solver::SolveResult;
use mfg_core::verify::ResidualReport;
use serde_json::Value;

use crate::run::{certificate, recertify, stem, Lambdas, Metadata, RunError};

/// Stored and recomputed residuals must agree to this, relative to
/// `max(1, |stored|)`.
pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub field: String,
    pub stored: String,
    pub recomputed: String,
}

#[derive(Debug)]
pub enum VerifyError {
    /// Missing or unreadable artifacts.
    Malformed(String),
    Runtime(anyhow::Error),
}

fn malformed(msg: impl Into<String>) -> VerifyError {
    VerifyError::Malformed(msg.into())
}

/// Reloads every field, recomputes the residual reports, and lists the
/// quantities that disagree with `metadata.json`.
pub fn verify(dir: &Path) -> Result<Vec<Mismatch>, VerifyError> {
    let read = |name: &str| {
        fs::read_to_string(dir.join(name)).map_err(|e| malformed(format!("{name}: {e}")))
    };
    let meta: Metadata =
        serde_json::from_str(&read("metadata.json")?).map_err(|e| malformed(format!("metadata.json: {e}")))?;
    let lambdas: Lambdas =
        serde_json::from_str(&read("lambdas.json")?).map_err(|e| malformed(format!("lambdas.json: {e}")))?;
    let cfg = &meta.config;
    let grid = cfg.grid_spec().map_err(|e| malformed(format!("metadata.json: {e}")))?;
    let op = ConstraintOperator::build(&grid);

    let n = meta.residuals.len();
    if n == 0 || lambdas.lambda.len() != n {
        return Err(malformed(format!("lambdas.json: expected {n} values, found {}", lambdas.lambda.len())));
    }
    let scalar = |name: String| -> Result<DiscreteField, VerifyError> {
        let path = dir.join(&name);
        if !path.exists() {
            return Err(malformed(format!("{name} is missing")));
        }
        read_scalar_file(&path, &grid).map_err(|e| malformed(format!("{name}: {e}")))
    };
    let vector = |name: String| -> Result<DiscreteVectorField, VerifyError> {
        let path = dir.join(&name);
        if !path.exists() {
            return Err(malformed(format!("{name} is missing")));
        }
        read_vector_file(&path, &grid).map_err(|e| malformed(format!("{name}: {e}")))
    };
    let p = if cfg.problem.is_capped() { Some(scalar("p.csv".into())?) } else { None };
    let mut populations = Vec::with_capacity(n);
    for i in 0..n {
        populations.push(SolveResult {
            m: scalar(format!("{}.csv", stem("m", i, n)))?,
            w: vector(format!("{}.csv", stem("w", i, n)))?,
            u: scalar(format!("{}.csv", stem("u", i, n)))?,
            lambda: lambdas.lambda[i],
            p: p.clone(),
            objective: 0.0,
            residuals: ResidualReport::default(),
            iterations: meta.iterations,
            converged: meta.converged,
            step: meta.step,
            history: Vec::new(),
        });
    }
    let shared = recertify(cfg, &op, &mut populations).map_err(|e| match e {
        RunError::Config(m) => malformed(format!("metadata.json: {m}")),
        RunError::Runtime(e) => VerifyError::Runtime(e),
    })?;

    let residuals: Vec<ResidualReport> = populations.into_iter().map(|r| r.residuals).collect();
    let mut out = Vec::new();
    compare("residuals", &json(&meta.residuals), &json(&residuals), &mut out);
    compare("shared", &json(&meta.shared), &json(&shared), &mut out);
    compare("lambda", &json(&meta.lambda), &json(&lambdas.lambda), &mut out);
    let checks = certificate(cfg.problem, &residuals, shared.as_ref(), meta.uniqueness.as_ref());
    let certified = meta.converged && checks.iter().all(|c| c.pass);
    if certified != meta.certified {
        out.push(Mismatch { field: "certified".into(), stored: meta.certified.to_string(), recomputed: certified.to_string() });
    }
    Ok(out)
}

fn json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("reports serialize")
}

fn compare(path: &str, stored: &Value, fresh: &Value, out: &mut Vec<Mismatch>) {
    let differ = match (stored, fresh) {
        (Value::Number(a), Value::Number(b)) => {
            let (a, b) = (a.as_f64().unwrap_or(f64::NAN), b.as_f64().unwrap_or(f64::NAN));
            !((a - b).abs() <= TOLERANCE * a.abs().max(1.0))
        }
        (Value::Object(a), Value::Object(b)) => {
            for (k, va) in a {
                compare(&format!("{path}.{k}"), va, b.get(k).unwrap_or(&Value::Null), out);
            }
            for (k, vb) in b.iter().filter(|(k, _)| !a.contains_key(*k)) {
                compare(&format!("{path}.{k}"), &Value::Null, vb, out);
            }
            false
        }
        (Value::Array(a), Value::Array(b)) if a.len() == b.len() => {
            for (i, (va, vb)) in a.iter().zip(b).enumerate() {
                compare(&format!("{path}[{i}]"), va, vb, out);
            }
            false
        }
        (a, b) => a != b,
    };
    if differ {
        out.push(Mismatch { field: path.to_owned(), stored: stored.to_string(), recomputed: fresh.to_string() });
    }
}

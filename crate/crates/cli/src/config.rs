//! Command configuration: a JSON file overlaid by command-line flags.

use std::path::Path;

use clap::Args;
use lelab_core::bvp::{Mode, RadialMesh};
use lelab_core::green::Domain;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::run::{CmdResult, Failure};

/// Reads `path` (a JSON object) and overlays every non-null flag value.
pub fn resolve<T: Serialize + DeserializeOwned>(
    file: Option<&Path>,
    flags: &T,
) -> CmdResult<(T, Value)> {
    let mut merged = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", p.display())))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| {
                Failure::usage(format!("config {} is not valid JSON: {e}", p.display()))
            })?;
            if !v.is_object() {
                return Err(Failure::usage("config file must hold a JSON object"));
            }
            v
        }
        None => Value::Object(Default::default()),
    };
    let flags = serde_json::to_value(flags)?;
    let obj = merged.as_object_mut().expect("checked above");
    for (k, v) in flags
        .as_object()
        .expect("flag structs serialize to objects")
    {
        if !v.is_null() {
            obj.insert(k.clone(), v.clone());
        }
    }
    let resolved: T = serde_json::from_value(merged)
        .map_err(|e| Failure::usage(format!("bad configuration: {e}")))?;
    let canonical = serde_json::to_value(&resolved)?;
    Ok((resolved, canonical))
}

pub fn required<T: Copy>(value: Option<T>, name: &str) -> CmdResult<T> {
    value.ok_or_else(|| Failure::usage(format!("missing required parameter --{name}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Ball,
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Exponent,
    Perturbation,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Exponent => Mode::NearlyCriticalExponent,
            ModeArg::Perturbation => Mode::LinearPerturbation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MeshArg {
    Auto,
    Uniform,
    Graded,
}

impl From<MeshArg> for RadialMesh {
    fn from(m: MeshArg) -> Self {
        match m {
            MeshArg::Auto => RadialMesh::Auto,
            MeshArg::Uniform => RadialMesh::Uniform,
            MeshArg::Graded => RadialMesh::Graded,
        }
    }
}

/// Ball of radius `R` centred at the origin of ℝ^N, or the unit cube.
pub fn make_domain(kind: DomainKind, n: usize, radius: Option<f64>) -> CmdResult<Domain> {
    match kind {
        DomainKind::Ball => {
            let r = radius.unwrap_or(1.0);
            if !(r > 0.0 && r.is_finite()) {
                return Err(Failure::usage(format!(
                    "ball radius R = {r} must be positive"
                )));
            }
            Ok(Domain::ball(n, r))
        }
        DomainKind::Box => {
            if n != 3 {
                return Err(Failure::usage(format!(
                    "box domains are three-dimensional, got N = {n}"
                )));
            }
            Ok(Domain::unit_cube())
        }
    }
}

/// Parses `start:end:geoR`, e.g. `0.5:0.02:geo0.8`.
pub fn parse_schedule(spec: &str) -> CmdResult<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || {
        Failure::usage(format!(
            "schedule '{spec}' is not of the form start:end:geoR"
        ))
    };
    let [start, end, geo] = parts.as_slice() else {
        return Err(bad());
    };
    let start: f64 = start.trim().parse().map_err(|_| bad())?;
    let end: f64 = end.trim().parse().map_err(|_| bad())?;
    let ratio: f64 = geo
        .trim()
        .strip_prefix("geo")
        .ok_or_else(bad)?
        .parse()
        .map_err(|_| bad())?;
    if !(start > 0.0 && end > 0.0) {
        return Err(Failure::usage(format!(
            "schedule '{spec}' must be positive"
        )));
    }
    if !(end < start) {
        return Err(Failure::usage(format!(
            "schedule '{spec}' must decrease (end < start)"
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Failure::usage(format!(
            "ratio {ratio} in '{spec}' must lie in (0, 1)"
        )));
    }
    Ok(lelab_core::bvp::geometric_schedule(start, end, ratio)?)
}

/// Comma-separated coordinates.
pub fn parse_point(spec: &str) -> CmdResult<Vec<f64>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Failure::usage(format!("bad coordinate '{s}' in '{spec}'")))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
pub struct GroundArgs {
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long = "N")]
    #[serde(rename = "N")]
    pub n: Option<usize>,
    /// Relative width at which the v0 bisection stops.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Truncation radius of the shooting.
    #[arg(long)]
    pub rmax: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long = "N")]
    #[serde(rename = "N")]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub domain: Option<DomainKind>,
    #[arg(long = "R")]
    #[serde(rename = "R")]
    pub radius: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Radial nodes, or nodes per side on the box.
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long, value_enum)]
    pub mesh: Option<MeshArg>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long = "N")]
    #[serde(rename = "N")]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub domain: Option<DomainKind>,
    #[arg(long = "R")]
    #[serde(rename = "R")]
    pub radius: Option<f64>,
    /// Decreasing schedule `start:end:geoR`.
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Pass threshold of the relative Pohozaev residual.
    #[arg(long)]
    pub pohozaev_tol: Option<f64>,
    /// Allowed relative deviation of the fitted exponent.
    #[arg(long)]
    pub exponent_tol: Option<f64>,
    /// Allowed relative deviation of the extrapolated constant.
    #[arg(long)]
    pub constant_tol: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
pub struct GreenArgs {
    #[arg(long, value_enum)]
    pub domain: Option<DomainKind>,
    #[arg(long = "R")]
    #[serde(rename = "R")]
    pub radius: Option<f64>,
    #[arg(long = "N")]
    #[serde(rename = "N")]
    pub n: Option<usize>,
    /// Exponent p; adds the iterated Green's function when tail-subcritical.
    #[arg(long)]
    pub p: Option<f64>,
    /// Source point, comma separated.
    #[arg(long)]
    pub x0: Option<String>,
    /// Evaluate the boundary identities.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub identities: Option<bool>,
    /// Lattice points per axis in field.csv.
    #[arg(long)]
    pub field_points: Option<usize>,
}

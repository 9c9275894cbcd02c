//! JSON scenario files and the shipped fixtures.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contour::{ContourError, SafetyConstraint};
use crate::polyalg::{PolyError, PolyTrajectory, Polynomial, TrajectoryError, VarId};
use crate::uncertainty::{Distribution, UncertaintyError, UncertaintyModel};
use crate::verifier::{Scenario, Status, Tube, VerifyError, VerifyOptions};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("malformed scenario JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{field}: {msg}")]
    Field { field: String, msg: String },
}

fn field_err(field: impl Into<String>, msg: impl ToString) -> ScenarioError {
    ScenarioError::Field {
        field: field.into(),
        msg: msg.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// Polynomial text; `g ≥ 0` is safe.
    pub g: String,
    #[serde(default)]
    pub distributions: BTreeMap<String, Distribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeSpec {
    /// Rows of the shape matrix.
    pub q: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputControls {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub include_certificates: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree_cap: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub state_dim: usize,
    pub horizon: [f64; 2],
    pub delta: f64,
    pub constraints: Vec<ConstraintSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tube: Option<TubeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputControls>,
}

/// A validated scenario file.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScenario {
    pub description: String,
    pub scenario: Scenario,
    pub trajectory: Option<PolyTrajectory>,
    pub tube: Option<Tube>,
    pub output: OutputControls,
}

impl LoadedScenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = serde_json::from_str(text)?;
        file.load()
    }

    /// Back to the file form; polynomials are printed in canonical form.
    pub fn to_file(&self) -> ScenarioFile {
        let s = &self.scenario;
        ScenarioFile {
            description: self.description.clone(),
            state_dim: s.state_dim,
            horizon: [s.horizon.0, s.horizon.1],
            delta: s.delta,
            constraints: s
                .constraints
                .iter()
                .map(|c| ConstraintSpec {
                    name: c.name.clone(),
                    note: None,
                    g: c.g.to_string(),
                    distributions: c.model.iter().map(|(v, d)| (v.to_string(), d.clone())).collect(),
                })
                .collect(),
            trajectory: self
                .trajectory
                .as_ref()
                .map(|tr| tr.components().iter().map(ToString::to_string).collect()),
            tube: self.tube.as_ref().map(|tb| TubeSpec {
                q: tb.q().row_iter().map(|r| r.iter().copied().collect()).collect(),
            }),
            output: (self.output != OutputControls::default()).then(|| self.output.clone()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("scenario serializes")
    }

    pub fn require_trajectory(&self) -> Result<&PolyTrajectory, ScenarioError> {
        self.trajectory
            .as_ref()
            .ok_or_else(|| field_err("trajectory", "required for verification"))
    }

    pub fn require_tube(&self) -> Result<&Tube, ScenarioError> {
        self.tube.as_ref().ok_or_else(|| field_err("tube", "required for tube verification"))
    }

    /// Verification options with the file's output controls applied.
    pub fn options(&self) -> VerifyOptions {
        let mut o = VerifyOptions::default();
        if let Some(b) = self.output.include_certificates {
            o.include_certificates = b;
        }
        o.degree_cap = self.output.degree_cap;
        o
    }
}

impl ScenarioFile {
    pub fn load(&self) -> Result<LoadedScenario, ScenarioError> {
        let mut constraints = Vec::with_capacity(self.constraints.len());
        for (i, c) in self.constraints.iter().enumerate() {
            let at = |f: &str| format!("constraints[{i}].{f}");
            let g: Polynomial = c.g.parse().map_err(|e: PolyError| field_err(at("g"), e))?;
            let mut dists = BTreeMap::new();
            for (name, d) in &c.distributions {
                let v: VarId = name
                    .parse()
                    .map_err(|e: String| field_err(at(&format!("distributions.{name}")), e))?;
                dists.insert(v, d.clone());
            }
            let model = UncertaintyModel::new(dists)
                .map_err(|e: UncertaintyError| field_err(at("distributions"), e))?;
            let sc = SafetyConstraint::new(c.name.clone(), g, model)
                .map_err(|e: ContourError| field_err(format!("constraints[{i}]"), e))?;
            constraints.push(sc);
        }
        let horizon = (self.horizon[0], self.horizon[1]);
        let scenario = Scenario::new(self.state_dim, horizon, self.delta, constraints)
            .map_err(|e: VerifyError| field_err("scenario", e))?;
        let trajectory = match &self.trajectory {
            None => None,
            Some(texts) => {
                let comps = texts
                    .iter()
                    .enumerate()
                    .map(|(i, s)| s.parse().map_err(|e: PolyError| field_err(format!("trajectory[{i}]"), e)))
                    .collect::<Result<Vec<Polynomial>, _>>()?;
                if comps.len() != self.state_dim {
                    return Err(field_err(
                        "trajectory",
                        format!("{} components for state dimension {}", comps.len(), self.state_dim),
                    ));
                }
                Some(PolyTrajectory::new(comps, horizon).map_err(|e: TrajectoryError| field_err("trajectory", e))?)
            }
        };
        let tube = match &self.tube {
            None => None,
            Some(t) => {
                let n = t.q.len();
                if n != self.state_dim || t.q.iter().any(|r| r.len() != n) {
                    return Err(field_err(
                        "tube.q",
                        format!("expected a {0}x{0} matrix", self.state_dim),
                    ));
                }
                let flat: Vec<f64> = t.q.iter().flatten().copied().collect();
                Some(Tube::new(DMatrix::from_row_slice(n, n, &flat)).map_err(|e| field_err("tube.q", e))?)
            }
        };
        Ok(LoadedScenario {
            description: self.description.clone(),
            scenario,
            trajectory,
            tube,
            output: self.output.clone().unwrap_or_default(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    Contour,
    Trajectory,
    Tube,
}

/// A scenario shipped with the crate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Fixture {
    pub name: &'static str,
    pub kind: FixtureKind,
    /// Verdict the scenario reproduces, for verification fixtures.
    pub expected: Option<Status>,
    #[serde(skip)]
    pub json: &'static str,
}

impl Fixture {
    pub fn load(&self) -> LoadedScenario {
        LoadedScenario::from_json(self.json).expect("shipped fixtures are valid")
    }
}

macro_rules! fixture {
    ($name:literal, $kind:ident, $expected:expr) => {
        Fixture {
            name: $name,
            kind: FixtureKind::$kind,
            expected: $expected,
            json: include_str!(concat!("../fixtures/", $name)),
        }
    };
}

pub const FIXTURES: &[Fixture] = &[
    fixture!("case1_contour.json", Contour, None),
    fixture!("case2_contour.json", Contour, None),
    fixture!("example2.json", Trajectory, Some(Status::Safe)),
    fixture!("example3_tube.json", Tube, Some(Status::Safe)),
    fixture!("example3_tube_wide.json", Tube, Some(Status::NotVerified)),
    fixture!("vehicle_lane_change.json", Trajectory, Some(Status::Safe)),
    fixture!("vehicle_lane_change_slow.json", Trajectory, Some(Status::NotVerified)),
    fixture!("vehicle_tube.json", Tube, Some(Status::Safe)),
    fixture!("vehicle_tube_wide.json", Tube, Some(Status::NotVerified)),
    fixture!("flight_trajectory.json", Trajectory, Some(Status::Safe)),
    fixture!("flight_tube.json", Tube, Some(Status::Safe)),
];

pub fn fixture(name: &str) -> Option<&'static Fixture> {
    let name = name.strip_suffix(".json").unwrap_or(name);
    FIXTURES
        .iter()
        .find(|f| f.name.strip_suffix(".json") == Some(name))
}

//! Deterministic inner approximations of chance-constrained safe sets.
//!
//! For a constraint `g(x, w, t) ≥ 0` the contour is the pair `p1 = E[g²]`,
//! `p2 = E[g]`. Where `p2 ≥ 0`, Cantelli's inequality bounds the violation
//! probability by `(p1 − p2²) / p1`.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::polyalg::{DenseEvaluator, PolyError, Polynomial, VarId};
use crate::uncertainty::{UncertaintyError, UncertaintyModel};

/// Below this `p1` the bound is `0/0`; treated as risk 0 when `p2 ≥ 0`.
pub const EPS_P: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContourError {
    #[error("constraint `{0}` does not depend on the state")]
    StateIndependent(String),
    #[error("constraint `{name}`: {source}")]
    Moments {
        name: String,
        #[source]
        source: UncertaintyError,
    },
    #[error("constraint `{name}` mentions `{var}`, which is neither time, state nor uncertain")]
    ForeignVariable { name: String, var: VarId },
    #[error("contour grids need a two-dimensional state, contour `{name}` depends on {vars}")]
    GridDimension { name: String, vars: String },
    #[error("grid resolution must be at least 2 per axis")]
    Resolution,
    #[error("grid bounds must be finite with min < max")]
    Bounds,
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// `g ≥ 0` is the safe side.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyConstraint {
    pub name: String,
    pub g: Polynomial,
    pub model: UncertaintyModel,
}

impl SafetyConstraint {
    pub fn new(name: impl Into<String>, g: Polynomial, model: UncertaintyModel) -> Result<Self, ContourError> {
        let name = name.into();
        let vars = g.variables();
        if let Some(&var) = vars.iter().find(|v| matches!(v, VarId::Offset(_))) {
            return Err(ContourError::ForeignVariable { name, var });
        }
        if !vars.iter().any(|v| matches!(v, VarId::State(_))) {
            return Err(ContourError::StateIndependent(name));
        }
        // surface missing distributions and moment orders now rather than at contour time
        let probe = &g * &g;
        if let Err(source) = model.apply_expectation(&probe) {
            return Err(ContourError::Moments { name, source });
        }
        Ok(Self { name, g, model })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskContour {
    pub name: String,
    pub p1: Polynomial,
    pub p2: Polynomial,
}

pub fn build_contour(c: &SafetyConstraint) -> Result<RiskContour, ContourError> {
    let wrap = |source| ContourError::Moments {
        name: c.name.clone(),
        source,
    };
    let p1 = c.model.apply_expectation(&(&c.g * &c.g)).map_err(wrap)?;
    let p2 = c.model.apply_expectation(&c.g).map_err(wrap)?;
    Ok(RiskContour {
        name: c.name.clone(),
        p1,
        p2,
    })
}

/// `(p1 − p2²)/p1`, `+∞` when `p2 < 0`, `0` when `p1 ≤ EPS_P`.
pub fn bound_from_moments(p1: f64, p2: f64) -> f64 {
    if p2 < 0.0 {
        f64::INFINITY
    } else if p1 <= EPS_P {
        0.0
    } else {
        ((p1 - p2 * p2) / p1).clamp(0.0, 1.0)
    }
}

impl RiskContour {
    fn point_value(&self, p: &Polynomial, x: &[f64], t: f64) -> Result<f64, PolyError> {
        p.evaluate_with(|v| match v {
            VarId::Time => Some(t),
            VarId::State(i) => x.get(i).copied(),
            _ => None,
        })
    }

    /// Values of `(p1, p2)` at `(x, t)`.
    pub fn moments_at(&self, x: &[f64], t: f64) -> Result<(f64, f64), PolyError> {
        Ok((self.point_value(&self.p1, x, t)?, self.point_value(&self.p2, x, t)?))
    }

    pub fn risk_bound(&self, x: &[f64], t: f64) -> Result<f64, PolyError> {
        let (p1, p2) = self.moments_at(x, t)?;
        Ok(bound_from_moments(p1, p2))
    }

    pub fn member(&self, x: &[f64], t: f64, delta: f64) -> Result<bool, PolyError> {
        Ok(self.risk_bound(x, t)? <= delta)
    }

    /// Largest state index mentioned, plus one.
    pub fn state_dim(&self) -> usize {
        self.p1
            .variables()
            .into_iter()
            .chain(self.p2.variables())
            .filter_map(|v| match v {
                VarId::State(i) => Some(i + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Axis {
    pub fn value(&self, k: usize) -> f64 {
        if k + 1 == self.count {
            self.max
        } else {
            self.min + (self.max - self.min) * k as f64 / (self.count - 1) as f64
        }
    }
}

/// Rectangle `[x1min, x1max] × [x2min, x2max]` sampled at `resolution` points per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub bounds: [(f64, f64); 2],
    pub resolution: [usize; 2],
}

/// Row-major grid: row `j` holds `x2 = axes[1].value(j)`, column `i` holds `x1 = axes[0].value(i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourGrid {
    pub contour: String,
    pub t: f64,
    pub delta: f64,
    pub axes: [Axis; 2],
    pub member: Vec<bool>,
    /// `None` encodes the `+∞` marker (mean of `g` negative).
    pub risk_bound: Vec<Option<f64>>,
}

impl ContourGrid {
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.axes[0].count + i
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# contour={} t={:?} delta={:?} rows={} ({}) cols={} ({})",
            self.contour, self.t, self.delta, self.axes[1].count, self.axes[1].name, self.axes[0].count, self.axes[0].name
        );
        let _ = writeln!(s, "{},{},risk_bound,member", self.axes[0].name, self.axes[1].name);
        for j in 0..self.axes[1].count {
            for i in 0..self.axes[0].count {
                let k = self.index(i, j);
                let risk = match self.risk_bound[k] {
                    Some(r) => format!("{r:?}"),
                    None => "inf".into(),
                };
                let _ = writeln!(
                    s,
                    "{:?},{:?},{risk},{}",
                    self.axes[0].value(i),
                    self.axes[1].value(j),
                    self.member[k] as u8
                );
            }
        }
        s
    }
}

pub fn contour_grid(rc: &RiskContour, t: f64, delta: f64, spec: &GridSpec) -> Result<ContourGrid, ContourError> {
    if spec.resolution.iter().any(|&r| r < 2) {
        return Err(ContourError::Resolution);
    }
    if spec.bounds.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi)) {
        return Err(ContourError::Bounds);
    }
    let vars = [VarId::Time, VarId::State(0), VarId::State(1)];
    let evaluators = |p: &Polynomial| -> Result<DenseEvaluator, ContourError> {
        p.evaluator(&vars).map_err(|_| ContourError::GridDimension {
            name: rc.name.clone(),
            vars: p
                .variables()
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(", "),
        })
    };
    let e1 = evaluators(&rc.p1)?;
    let e2 = evaluators(&rc.p2)?;
    let axes = [0, 1].map(|k| Axis {
        name: VarId::State(k).to_string(),
        min: spec.bounds[k].0,
        max: spec.bounds[k].1,
        count: spec.resolution[k],
    });
    let rows: Vec<Vec<f64>> = (0..axes[1].count)
        .into_par_iter()
        .map(|j| {
            let y = axes[1].value(j);
            (0..axes[0].count)
                .map(|i| {
                    let pt = [t, axes[0].value(i), y];
                    bound_from_moments(e1.eval(&pt), e2.eval(&pt))
                })
                .collect()
        })
        .collect();
    let bounds: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(ContourGrid {
        contour: rc.name.clone(),
        t,
        delta,
        member: bounds.iter().map(|b| *b <= delta).collect(),
        risk_bound: bounds.iter().map(|b| b.is_finite().then_some(*b)).collect(),
        axes,
    })
}

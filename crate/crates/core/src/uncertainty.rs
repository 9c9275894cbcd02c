//! Distributions of uncertain parameters and the moment-based expectation operator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::polyalg::{Polynomial, VarId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("invalid distribution: {0}")]
    Invalid(String),
    #[error("moment of order {requested} requested but only {available} raw moments were supplied; provide higher-order moments")]
    MomentOrder { requested: u32, available: u32 },
    #[error("no distribution given for uncertain variable `{0}`")]
    Missing(VarId),
}

/// Marginal distribution of one uncertain parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Distribution {
    Uniform { lower: f64, upper: f64 },
    /// The second parameter is the variance.
    Gaussian { mean: f64, variance: f64 },
    /// Supported on `[0, 1]`.
    Beta { alpha: f64, beta: f64 },
    /// Raw moments `m0 = 1, m1, m2, ...`.
    #[serde(rename = "moments")]
    MomentList { values: Vec<f64> },
}

impl Distribution {
    pub fn validate(&self) -> Result<(), UncertaintyError> {
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        let ok = match self {
            Distribution::Uniform { lower, upper } => finite(&[*lower, *upper]) && lower < upper,
            Distribution::Gaussian { mean, variance } => finite(&[*mean, *variance]) && *variance > 0.0,
            Distribution::Beta { alpha, beta } => finite(&[*alpha, *beta]) && *alpha > 0.0 && *beta > 0.0,
            Distribution::MomentList { values } => {
                !values.is_empty() && finite(values) && values[0] == 1.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(UncertaintyError::Invalid(match self {
                Distribution::Uniform { .. } => "uniform requires finite lower < upper".into(),
                Distribution::Gaussian { .. } => "gaussian requires variance > 0".into(),
                Distribution::Beta { .. } => "beta requires alpha > 0 and beta > 0".into(),
                Distribution::MomentList { .. } => {
                    "moment list must be nonempty, finite and start with m0 = 1".into()
                }
            }))
        }
    }

    /// `E[w^k]`.
    pub fn raw_moment(&self, k: u32) -> Result<f64, UncertaintyError> {
        if k == 0 {
            return Ok(1.0);
        }
        Ok(match self {
            Distribution::Uniform { lower, upper } => {
                let n = (k + 1) as i32;
                (upper.powi(n) - lower.powi(n)) / ((upper - lower) * n as f64)
            }
            Distribution::Gaussian { mean, variance } => {
                let (mut prev, mut cur) = (1.0, *mean);
                for j in 2..=k {
                    let next = mean * cur + (j - 1) as f64 * variance * prev;
                    prev = cur;
                    cur = next;
                }
                cur
            }
            Distribution::Beta { alpha, beta } => (0..k)
                .map(|r| (alpha + r as f64) / (alpha + beta + r as f64))
                .product(),
            Distribution::MomentList { values } => {
                *values
                    .get(k as usize)
                    .ok_or(UncertaintyError::MomentOrder {
                        requested: k,
                        available: values.len() as u32 - 1,
                    })?
            }
        })
    }

    /// Highest raw moment order available (`None` for closed-form families).
    pub fn max_order(&self) -> Option<u32> {
        match self {
            Distribution::MomentList { values } => Some(values.len() as u32 - 1),
            _ => None,
        }
    }
}

/// Independent distributions of the uncertain variables of one constraint.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UncertaintyModel {
    dists: BTreeMap<VarId, Distribution>,
}

impl UncertaintyModel {
    pub fn new(dists: BTreeMap<VarId, Distribution>) -> Result<Self, UncertaintyError> {
        for (v, d) in &dists {
            if !v.is_uncertain() {
                return Err(UncertaintyError::Invalid(format!(
                    "`{v}` is not an uncertain variable"
                )));
            }
            d.validate()?;
        }
        Ok(Self { dists })
    }

    pub fn get(&self, v: VarId) -> Option<&Distribution> {
        self.dists.get(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (VarId, &Distribution)> {
        self.dists.iter().map(|(v, d)| (*v, d))
    }

    pub fn len(&self) -> usize {
        self.dists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dists.is_empty()
    }

    /// Moment order needed to form `E[g^2]`, twice the uncertain degree of `g`.
    pub fn required_order(g: &Polynomial) -> u32 {
        2 * g.degree_in(VarId::is_uncertain)
    }

    /// Replaces every product of uncertain powers by the product of raw moments.
    pub fn apply_expectation(&self, p: &Polynomial) -> Result<Polynomial, UncertaintyError> {
        let mut out = Vec::with_capacity(p.num_terms());
        for (m, c) in p.terms() {
            let (random, rest) = m.split(VarId::is_uncertain);
            let mut factor = c;
            for &(v, e) in random.powers() {
                let d = self.dists.get(&v).ok_or(UncertaintyError::Missing(v))?;
                factor *= d.raw_moment(e)?;
            }
            out.push((rest, factor));
        }
        Ok(Polynomial::from_terms(out))
    }
}

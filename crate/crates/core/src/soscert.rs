//! Putinar-style sum-of-squares certificates compiled to SDP feasibility.
//!
//! A certificate for `target ≥ 0` on `{p_j ≥ 0}` is the identity
//! `target = Σ_j (m_jᵀ G_j m_j) p_j` with `p_0 = 1` and every `G_j ⪰ 0`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::polyalg::{Monomial, PolyError, Polynomial, VarId};
use crate::sdp::{self, Entry, Equality, SdpError, SdpFeasibility, SdpOptions, SdpStatus};

pub const EPS_PSD: f64 = 1e-8;
pub const EPS_RES: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SosError {
    #[error("multiplier degrees {given:?} cannot match the target; minimum workable degrees are {minimum:?}")]
    DegreeTooSmall { given: Vec<u32>, minimum: Vec<u32> },
    #[error("expected {expected} multiplier degrees (one for sigma_0 plus one per generator), got {got}")]
    DegreeCount { expected: usize, got: usize },
    #[error("multiplier degree {0} is odd")]
    OddDegree(u32),
    #[error("variable `{0}` is not among the declared variables")]
    UndeclaredVariable(VarId),
    #[error("certificate shape does not match problem: {0}")]
    Shape(String),
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// All monomials of total degree `≤ d` in `vars`, graded order.
pub fn monomial_basis(vars: &[VarId], d: u32) -> Vec<Monomial> {
    let mut vars = vars.to_vec();
    vars.sort();
    vars.dedup();
    let mut out = vec![Monomial::one()];
    let mut frontier = vec![(Monomial::one(), 0usize)];
    for _ in 0..d {
        let mut next = Vec::new();
        for (m, first) in &frontier {
            // extend only with variables at or after the last one used, so each monomial appears once
            for (k, &v) in vars.iter().enumerate().skip(*first) {
                next.push((m.mul(&Monomial::var(v)), k));
            }
        }
        out.extend(next.iter().map(|(m, _)| m.clone()));
        frontier = next;
    }
    out.sort();
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SosProblem {
    pub target: Polynomial,
    pub generators: Vec<Polynomial>,
    /// Even degree of each multiplier: `sigma_0` first, then one per generator.
    pub multiplier_degrees: Vec<u32>,
    pub variables: Vec<VarId>,
}

impl SosProblem {
    /// Problem with the default multiplier degrees.
    pub fn new(target: Polynomial, generators: Vec<Polynomial>, variables: Vec<VarId>) -> Self {
        let multiplier_degrees = default_degrees(&target, &generators);
        Self {
            target,
            generators,
            multiplier_degrees,
            variables,
        }
    }

    /// Same problem with every multiplier degree raised by `by`.
    pub fn raised(&self, by: u32) -> Self {
        let mut p = self.clone();
        p.multiplier_degrees.iter_mut().for_each(|d| *d += by);
        p
    }

    /// Monomial basis of each multiplier, of half its degree.
    pub fn bases(&self) -> Vec<Vec<Monomial>> {
        self.multiplier_degrees
            .iter()
            .map(|d| monomial_basis(&self.variables, d / 2))
            .collect()
    }

    fn validate(&self) -> Result<(), SosError> {
        let expected = self.generators.len() + 1;
        if self.multiplier_degrees.len() != expected {
            return Err(SosError::DegreeCount {
                expected,
                got: self.multiplier_degrees.len(),
            });
        }
        if let Some(&d) = self.multiplier_degrees.iter().find(|d| *d % 2 == 1) {
            return Err(SosError::OddDegree(d));
        }
        for poly in std::iter::once(&self.target).chain(&self.generators) {
            if let Some(v) = poly.variables().into_iter().find(|v| !self.variables.contains(v)) {
                return Err(SosError::UndeclaredVariable(v));
            }
        }
        let reach = std::iter::once(0)
            .chain(self.generators.iter().map(Polynomial::degree))
            .zip(&self.multiplier_degrees)
            .map(|(g, d)| g + d)
            .max()
            .unwrap_or(0);
        if reach < self.target.degree() {
            let minimum = default_degrees(&self.target, &self.generators);
            return Err(SosError::DegreeTooSmall {
                given: self.multiplier_degrees.clone(),
                minimum,
            });
        }
        Ok(())
    }
}

/// `deg σ_0 = 2⌈deg/2⌉`, `deg σ_j = deg σ_0 − deg p_j` rounded down to even.
pub fn default_degrees(target: &Polynomial, generators: &[Polynomial]) -> Vec<u32> {
    let d0 = target.degree().div_ceil(2) * 2;
    std::iter::once(d0)
        .chain(generators.iter().map(|g| {
            let d = d0.saturating_sub(g.degree());
            d - d % 2
        }))
        .collect()
}

/// SDP together with the data needed to map its solution back.
#[derive(Debug, Clone)]
pub struct CompiledSos {
    pub sdp: SdpFeasibility,
    pub bases: Vec<Vec<Monomial>>,
    /// Monomial matched by each equality, in equality order.
    pub monomials: Vec<Monomial>,
    target_scale: f64,
    generator_scales: Vec<f64>,
}

fn scale_of(p: &Polynomial) -> f64 {
    let s = p.max_abs_coeff();
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

pub fn compile(p: &SosProblem) -> Result<CompiledSos, SosError> {
    p.validate()?;
    let target_scale = scale_of(&p.target);
    let generator_scales: Vec<f64> = p.generators.iter().map(scale_of).collect();
    let bases = p.bases();
    let one = Polynomial::constant(1.0);
    let gens: Vec<Polynomial> = std::iter::once(one)
        .chain(p.generators.iter().zip(&generator_scales).map(|(g, s)| g.scale(1.0 / s)))
        .collect();

    let mut rows: BTreeMap<Monomial, Vec<Entry>> = BTreeMap::new();
    for (block, (basis, g)) in bases.iter().zip(&gens).enumerate() {
        for a in 0..basis.len() {
            for b in a..basis.len() {
                let ab = basis[a].mul(&basis[b]);
                for (gm, gc) in g.terms() {
                    rows.entry(ab.mul(gm)).or_default().push(Entry {
                        block,
                        row: a,
                        col: b,
                        value: gc,
                    });
                }
            }
        }
    }
    let target = p.target.scale(1.0 / target_scale);
    for (m, _) in target.terms() {
        rows.entry(m.clone()).or_default();
    }
    let mut monomials = Vec::with_capacity(rows.len());
    let mut equalities = Vec::with_capacity(rows.len());
    for (m, entries) in rows {
        equalities.push(Equality {
            rhs: target.coefficient(&m),
            entries,
        });
        monomials.push(m);
    }
    Ok(CompiledSos {
        sdp: SdpFeasibility {
            blocks: bases.iter().map(Vec::len).collect(),
            equalities,
        },
        bases,
        monomials,
        target_scale,
        generator_scales,
    })
}

impl CompiledSos {
    /// Gram matrices in the original (unscaled) coordinates.
    fn unscale(&self, x: Vec<DMatrix<f64>>) -> Vec<DMatrix<f64>> {
        x.into_iter()
            .enumerate()
            .map(|(j, m)| {
                let s = if j == 0 {
                    1.0
                } else {
                    self.generator_scales[j - 1]
                };
                m * (self.target_scale / s)
            })
            .collect()
    }
}

/// Gram matrices proving `target = Σ_j (m_jᵀ G_j m_j) p_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "CertificateJson", try_from = "CertificateJson")]
pub struct SosCertificate {
    pub target: Polynomial,
    pub generators: Vec<Polynomial>,
    pub bases: Vec<Vec<Monomial>>,
    pub gram_matrices: Vec<DMatrix<f64>>,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CertificateJson {
    target: Polynomial,
    generators: Vec<Polynomial>,
    bases: Vec<Vec<String>>,
    /// Row-major.
    gram_matrices: Vec<Vec<f64>>,
    residual: f64,
}

impl From<SosCertificate> for CertificateJson {
    fn from(c: SosCertificate) -> Self {
        Self {
            target: c.target,
            generators: c.generators,
            bases: c
                .bases
                .iter()
                .map(|b| b.iter().map(ToString::to_string).collect())
                .collect(),
            gram_matrices: c
                .gram_matrices
                .iter()
                .map(|g| g.transpose().as_slice().to_vec())
                .collect(),
            residual: c.residual,
        }
    }
}

impl TryFrom<CertificateJson> for SosCertificate {
    type Error = String;
    fn try_from(c: CertificateJson) -> Result<Self, String> {
        if c.bases.len() != c.gram_matrices.len() {
            return Err("one Gram matrix per basis expected".into());
        }
        let mut bases = Vec::with_capacity(c.bases.len());
        let mut grams = Vec::with_capacity(c.bases.len());
        for (basis, g) in c.bases.iter().zip(&c.gram_matrices) {
            let monos = basis
                .iter()
                .map(|s| parse_monomial(s))
                .collect::<Result<Vec<_>, _>>()?;
            let n = monos.len();
            if g.len() != n * n {
                return Err(format!("Gram matrix has {} entries, basis needs {}", g.len(), n * n));
            }
            grams.push(DMatrix::from_row_slice(n, n, g));
            bases.push(monos);
        }
        Ok(Self {
            target: c.target,
            generators: c.generators,
            bases,
            gram_matrices: grams,
            residual: c.residual,
        })
    }
}

fn parse_monomial(s: &str) -> Result<Monomial, String> {
    let p: Polynomial = s.parse().map_err(|e: PolyError| e.to_string())?;
    let terms: Vec<_> = p.terms().collect();
    match terms.as_slice() {
        [(m, c)] if *c == 1.0 => Ok((*m).clone()),
        _ => Err(format!("`{s}` is not a monomial")),
    }
}

/// Outcome of [`check_certificate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertificateCheck {
    pub accepted: bool,
    pub residual: f64,
    pub min_eigenvalue: f64,
}

/// `Σ_j (m_jᵀ G_j m_j) p_j - target` without canonicalization.
fn identity_residual(target: &Polynomial, gens: &[&Polynomial], bases: &[Vec<Monomial>], grams: &[DMatrix<f64>]) -> f64 {
    let mut acc: BTreeMap<Monomial, f64> = BTreeMap::new();
    for (m, c) in target.terms() {
        *acc.entry(m.clone()).or_insert(0.0) -= c;
    }
    for ((basis, g), p) in bases.iter().zip(grams).zip(gens) {
        for a in 0..basis.len() {
            for b in a..basis.len() {
                let w = if a == b { g[(a, a)] } else { g[(a, b)] + g[(b, a)] };
                if w == 0.0 {
                    continue;
                }
                let ab = basis[a].mul(&basis[b]);
                for (pm, pc) in p.terms() {
                    *acc.entry(ab.mul(pm)).or_insert(0.0) += w * pc;
                }
            }
        }
    }
    acc.values().fold(0.0, |m, v| m.max(v.abs()))
}

fn clip_psd(g: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(g.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Re-validates a certificate against the problem it claims to solve.
pub fn check_certificate(p: &SosProblem, c: &SosCertificate) -> Result<CertificateCheck, SosError> {
    let bases = p.bases();
    if c.bases != bases {
        return Err(SosError::Shape(format!(
            "expected bases of sizes {:?}, got {:?}",
            bases.iter().map(Vec::len).collect::<Vec<_>>(),
            c.bases.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    if c.gram_matrices.len() != bases.len()
        || c
            .gram_matrices
            .iter()
            .zip(&bases)
            .any(|(g, b)| g.nrows() != b.len() || g.ncols() != b.len())
    {
        return Err(SosError::Shape("Gram matrix dimensions do not match bases".into()));
    }
    let one = Polynomial::constant(1.0);
    let gens: Vec<&Polynomial> = std::iter::once(&one).chain(&p.generators).collect();
    let grams: Vec<DMatrix<f64>> = c
        .gram_matrices
        .iter()
        .map(|g| (g + g.transpose()) * 0.5)
        .collect();
    let residual = identity_residual(&p.target, &gens, &bases, &grams);
    let mut min_eig = f64::INFINITY;
    for g in &grams {
        min_eig = min_eig.min(sdp::min_eigenvalue(g)?);
    }
    let mut accepted = residual <= EPS_RES && min_eig >= -EPS_PSD;
    if accepted && min_eig < 0.0 {
        // boundary case: project onto the PSD cone and make sure the identity survives
        let clipped: Vec<DMatrix<f64>> = grams.iter().map(clip_psd).collect();
        accepted = identity_residual(&p.target, &gens, &bases, &clipped) <= EPS_RES;
    }
    Ok(CertificateCheck {
        accepted,
        residual,
        min_eigenvalue: min_eig,
    })
}

#[derive(Debug, Clone)]
pub enum SosOutcome {
    Certified(SosCertificate),
    /// No certificate exists at these degrees. `ray[k]` pairs with `monomials[k]`.
    Infeasible { ray: Vec<f64>, monomials: Vec<Monomial> },
    /// The solver stalled or the returned certificate failed re-validation.
    Inconclusive { reason: String },
}

/// Compiles, solves and re-validates.
pub fn certify(p: &SosProblem, opts: &SdpOptions) -> Result<SosOutcome, SosError> {
    let compiled = compile(p)?;
    let sol = sdp::solve(&compiled.sdp, opts)?;
    match sol.status {
        SdpStatus::Feasible => {
            let grams = compiled.unscale(sol.x.expect("feasible solution carries X"));
            let mut cert = SosCertificate {
                target: p.target.clone(),
                generators: p.generators.clone(),
                bases: compiled.bases,
                gram_matrices: grams,
                residual: f64::NAN,
            };
            let check = check_certificate(p, &cert)?;
            cert.residual = check.residual;
            if check.accepted {
                Ok(SosOutcome::Certified(cert))
            } else {
                Ok(SosOutcome::Inconclusive {
                    reason: format!(
                        "certificate rejected (residual {:e}, min eigenvalue {:e})",
                        check.residual, check.min_eigenvalue
                    ),
                })
            }
        }
        SdpStatus::Infeasible => Ok(SosOutcome::Infeasible {
            ray: sol.infeasibility_certificate.unwrap_or_default(),
            monomials: compiled.monomials,
        }),
        SdpStatus::NumericalFailure => Ok(SosOutcome::Inconclusive {
            reason: format!("SDP solver stopped after {} iterations", sol.iterations),
        }),
    }
}

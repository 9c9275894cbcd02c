//! Continuous-time risk verification of trajectories and tubes.
//!
//! Each constraint's contour `(p1, p2)` is composed with the trajectory (plus a
//! tube offset `z` for tubes), giving `q1`, `q2`. The trajectory is safe for
//! that constraint when both `q2² − (1−Δ) q1 ≥ 0` and `q2 ≥ 0` hold on the
//! horizon (and the ellipsoid), each certified by a Putinar identity.
//!
//! By default the certificates are computed in normalized coordinates:
//! `t = c + h s` with `s ∈ [−1, 1]`, and `z = M u` with `|u| ≤ 1`, where
//! `Q = L Lᵀ` and `M = L⁻ᵀ`. The identities are equivalent to the ones in the
//! original coordinates up to an invertible affine change of variables.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contour::{build_contour, ContourError, RiskContour, SafetyConstraint, EPS_P};
use crate::polyalg::{Monomial, PolyError, PolyTrajectory, Polynomial, VarId};
use crate::sdp::SdpOptions;
use crate::soscert::{self, SosCertificate, SosError, SosOutcome, SosProblem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("trajectory horizon [{}, {}] differs from scenario horizon [{}, {}]", .trajectory.0, .trajectory.1, .scenario.0, .scenario.1)]
    Horizon { scenario: (f64, f64), trajectory: (f64, f64) },
    #[error("{what} has dimension {got}, scenario state dimension is {expected}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("invalid tube: {0}")]
    Tube(String),
    #[error("time {0} lies outside the horizon")]
    TimeOutsideHorizon(f64),
    #[error("constraint `{constraint}`: E[g^2] = {value:e} at t = {time} along the trajectory; the risk bound is degenerate there")]
    DegenerateSecondMoment { constraint: String, time: f64, value: f64 },
    #[error("degree cap {cap} is below the minimum multiplier degree {minimum} for constraint `{constraint}`")]
    DegreeCap { constraint: String, cap: u32, minimum: u32 },
    #[error(transparent)]
    Contour(#[from] ContourError),
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub state_dim: usize,
    pub horizon: (f64, f64),
    pub delta: f64,
    pub constraints: Vec<SafetyConstraint>,
}

impl Scenario {
    pub fn new(
        state_dim: usize,
        horizon: (f64, f64),
        delta: f64,
        constraints: Vec<SafetyConstraint>,
    ) -> Result<Self, VerifyError> {
        let (t0, tf) = horizon;
        if !(t0.is_finite() && tf.is_finite() && t0 < tf) {
            return Err(VerifyError::Scenario(format!("horizon [{t0}, {tf}] needs finite t0 < tf")));
        }
        if !(0.0..=1.0).contains(&delta) {
            return Err(VerifyError::Scenario(format!("delta {delta} outside [0, 1]")));
        }
        if state_dim == 0 {
            return Err(VerifyError::Scenario("state dimension must be positive".into()));
        }
        let mut names = BTreeSet::new();
        for c in &constraints {
            if !names.insert(c.name.as_str()) {
                return Err(VerifyError::Scenario(format!("duplicate constraint name `{}`", c.name)));
            }
            if let Some(v) = c.g.variables().into_iter().find(|v| matches!(v, VarId::State(i) if *i >= state_dim)) {
                return Err(VerifyError::Scenario(format!(
                    "constraint `{}` mentions `{v}` but the state has dimension {state_dim}",
                    c.name
                )));
            }
        }
        if constraints.is_empty() {
            return Err(VerifyError::Scenario("no constraints".into()));
        }
        Ok(Self {
            state_dim,
            horizon,
            delta,
            constraints,
        })
    }

    pub fn contours(&self) -> Result<Vec<RiskContour>, VerifyError> {
        Ok(self.constraints.iter().map(build_contour).collect::<Result<_, _>>()?)
    }

    fn check_trajectory(&self, traj: &PolyTrajectory) -> Result<(), VerifyError> {
        if traj.dim() != self.state_dim {
            return Err(VerifyError::Dimension {
                what: "trajectory",
                expected: self.state_dim,
                got: traj.dim(),
            });
        }
        if traj.horizon() != self.horizon {
            return Err(VerifyError::Horizon {
                scenario: self.horizon,
                trajectory: traj.horizon(),
            });
        }
        Ok(())
    }
}

/// Ellipsoidal tube `(x − P(t))ᵀ Q (x − P(t)) ≤ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tube {
    q: DMatrix<f64>,
}

impl Tube {
    pub fn new(q: DMatrix<f64>) -> Result<Self, VerifyError> {
        if q.nrows() != q.ncols() || q.nrows() == 0 {
            return Err(VerifyError::Tube("Q must be a nonempty square matrix".into()));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(VerifyError::Tube("Q has non-finite entries".into()));
        }
        let asym = (&q - q.transpose()).amax();
        if asym > 1e-12 {
            return Err(VerifyError::Tube(format!("Q is not symmetric (asymmetry {asym:e})")));
        }
        let lmin = crate::sdp::min_eigenvalue(&q).map_err(|e| VerifyError::Tube(e.to_string()))?;
        if lmin <= 0.0 {
            return Err(VerifyError::Tube(format!(
                "Q must be positive definite (min eigenvalue {lmin:e})"
            )));
        }
        Ok(Self { q })
    }

    /// Ball of the given radius.
    pub fn ball(dim: usize, radius: f64) -> Result<Self, VerifyError> {
        Self::new(DMatrix::identity(dim, dim) / (radius * radius))
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    /// `zᵀ Q z`.
    pub fn form(&self, z: &[f64]) -> f64 {
        let v = DVector::from_column_slice(z);
        (v.transpose() * &self.q * &v)[(0, 0)]
    }

    /// `M` with `z = M u` mapping the unit ball onto the ellipsoid.
    fn offset_map(&self) -> DMatrix<f64> {
        let l = Cholesky::new(self.q.clone()).expect("Q validated positive definite").l();
        l.transpose()
            .try_inverse()
            .expect("Cholesky factor of a positive definite matrix is invertible")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Safe,
    NotVerified,
}

/// Which identity: `q2² − (1−Δ) q1 ≥ 0` (risk) or `q2 ≥ 0` (mean).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Risk,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    /// Largest multiplier degree the retry ladder may use.
    pub degree_cap: Option<u32>,
    /// Number of `+2` degree escalations after the default degrees.
    pub escalations: u32,
    pub normalize: bool,
    /// Skip the SDP when a sampled domain point already violates an identity.
    pub sample_refutation: bool,
    pub include_certificates: bool,
    pub sdp: SdpOptions,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            degree_cap: None,
            escalations: 2,
            normalize: true,
            sample_refutation: true,
            include_certificates: true,
            sdp: SdpOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub time: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub offset: Option<Vec<f64>>,
    pub state: Vec<f64>,
    pub member: bool,
    /// `None` when the mean of `g` is negative (bound not available).
    pub risk_bound: Option<f64>,
    /// `sampled` (a domain point where the identity's left side is negative)
    /// or `dual_ray` (time/offset estimate from the SDP infeasibility ray).
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub degrees: Vec<u32>,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub certified: bool,
    pub attempts: Vec<Attempt>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub certificate: Option<SosCertificate>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diagnostic: Option<Diagnostic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub name: String,
    pub status: Status,
    pub risk: StageReport,
    pub mean: StageReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub constraint: String,
    pub stage: Stage,
    pub reason: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diagnostic: Option<Diagnostic>,
}

/// Coordinates the certificates are written in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coordinates {
    /// `t = time_center + time_half_width * t'` where `t'` is the certificate's `t`.
    pub time_center: f64,
    pub time_half_width: f64,
    /// Row-major `M` with `z = M z'` for tubes.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub offset_map: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Trajectory,
    Tube,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: Status,
    pub kind: VerdictKind,
    pub delta: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coordinates: Option<Coordinates>,
    pub constraints: Vec<ConstraintReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure: Option<Failure>,
    pub wall_time_ms: f64,
}

impl Verdict {
    pub fn is_safe(&self) -> bool {
        self.status == Status::Safe
    }

    /// JSON with the wall-time field zeroed, for reproducibility comparisons.
    pub fn to_json_without_timing(&self) -> String {
        let mut v = self.clone();
        v.wall_time_ms = 0.0;
        serde_json::to_string(&v).expect("verdict serializes")
    }
}

/// Everything that is shared between the constraints of one verification.
struct Setup<'a> {
    delta: f64,
    horizon: (f64, f64),
    normalize: bool,
    center: f64,
    half: f64,
    tube: Option<&'a Tube>,
    offset_map: Option<DMatrix<f64>>,
    traj: &'a PolyTrajectory,
    bindings: BTreeMap<VarId, Polynomial>,
    generators: Vec<Polynomial>,
    variables: Vec<VarId>,
    /// Domain points in certificate coordinates, `[t, z1, ...]`.
    samples: Vec<Vec<f64>>,
    opts: &'a VerifyOptions,
}

impl<'a> Setup<'a> {
    fn new(s: &Scenario, traj: &'a PolyTrajectory, tube: Option<&'a Tube>, opts: &'a VerifyOptions) -> Self {
        let (t0, tf) = s.horizon;
        let n = s.state_dim;
        let (center, half) = if opts.normalize {
            (0.5 * (t0 + tf), 0.5 * (tf - t0))
        } else {
            (0.0, 1.0)
        };
        let t = Polynomial::var(VarId::Time);
        let time_expr = &Polynomial::constant(center) + &t.scale(half);
        let offset_map = tube.map(|tb| if opts.normalize { tb.offset_map() } else { DMatrix::identity(n, n) });

        let mut time_binding = BTreeMap::new();
        if opts.normalize {
            time_binding.insert(VarId::Time, time_expr.clone());
        }
        let mut bindings = BTreeMap::new();
        for (i, comp) in traj.components().iter().enumerate() {
            let mut x = comp.substitute(&time_binding);
            if let Some(m) = &offset_map {
                let off = Polynomial::from_terms((0..n).map(|j| (Monomial::var(VarId::Offset(j)), m[(i, j)])));
                x = &x + &off;
            }
            bindings.insert(VarId::State(i), x);
        }
        bindings.extend(time_binding);

        let mut generators = vec![if opts.normalize {
            Polynomial::constant(1.0) - Polynomial::var(VarId::Time).pow(2)
        } else {
            (&t - &Polynomial::constant(t0)) * (&Polynomial::constant(tf) - &t)
        }];
        let mut variables = vec![VarId::Time];
        if let Some(tb) = tube {
            let zs: Vec<Polynomial> = (0..n).map(|j| Polynomial::var(VarId::Offset(j))).collect();
            let mut g = Polynomial::constant(1.0);
            for a in 0..n {
                for b in 0..n {
                    let qab = if opts.normalize {
                        if a == b {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        tb.q()[(a, b)]
                    };
                    if qab != 0.0 {
                        g = &g - &(&zs[a] * &zs[b]).scale(qab);
                    }
                }
            }
            generators.push(g);
            variables.extend((0..n).map(VarId::Offset));
        }

        let setup = Self {
            delta: s.delta,
            horizon: s.horizon,
            normalize: opts.normalize,
            center,
            half,
            tube,
            offset_map,
            traj,
            bindings,
            generators,
            variables,
            samples: Vec::new(),
            opts,
        };
        let samples = setup.domain_samples(n);
        Self { samples, ..setup }
    }

    /// Certificate time coordinate of original time `t`.
    fn to_cert_time(&self, t: f64) -> f64 {
        (t - self.center) / self.half
    }

    fn to_original(&self, pt: &[f64]) -> (f64, Option<Vec<f64>>) {
        let t = self.center + self.half * pt[0];
        let z = self.offset_map.as_ref().map(|m| {
            let u = DVector::from_column_slice(&pt[1..]);
            (m * u).iter().copied().collect()
        });
        (t, z)
    }

    /// Deterministic cover of the domain: a time grid, crossed for tubes with the
    /// ellipsoid's centre, boundary and half-radius shell.
    fn domain_samples(&self, n: usize) -> Vec<Vec<f64>> {
        let (t0, tf) = self.horizon;
        let nt = if self.tube.is_some() { 101 } else { 2001 };
        let times: Vec<f64> = (0..nt)
            .map(|k| self.to_cert_time(t0 + (tf - t0) * k as f64 / (nt - 1) as f64))
            .collect();
        let Some(tube) = self.tube else {
            return times.into_iter().map(|t| vec![t]).collect();
        };
        // unit directions in normalized offset coordinates
        let mut dirs: Vec<Vec<f64>> = Vec::new();
        if n == 2 {
            for k in 0..48 {
                let a = std::f64::consts::TAU * k as f64 / 48.0;
                dirs.push(vec![a.cos(), a.sin()]);
            }
        } else {
            for i in 0..n {
                for sgn in [-1.0, 1.0] {
                    let mut d = vec![0.0; n];
                    d[i] = sgn;
                    dirs.push(d);
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            for _ in 0..if n == 1 { 0 } else { 96 } {
                let d: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                dirs.push(d.iter().map(|v| v / norm).collect());
            }
        }
        let mut offsets = vec![vec![0.0; n]];
        for r in [0.5, 1.0] {
            offsets.extend(dirs.iter().map(|d| d.iter().map(|v| v * r).collect::<Vec<_>>()));
        }
        if !self.normalize {
            let m = tube.offset_map();
            for o in &mut offsets {
                let z = &m * DVector::from_column_slice(o);
                *o = z.iter().copied().collect();
            }
        }
        let mut out = Vec::with_capacity(times.len() * offsets.len());
        for &t in &times {
            for o in &offsets {
                let mut pt = Vec::with_capacity(n + 1);
                pt.push(t);
                pt.extend_from_slice(o);
                out.push(pt);
            }
        }
        out
    }

    /// Pulls a point in certificate coordinates back into the domain.
    fn clamp_to_domain(&self, pt: &mut [f64]) {
        let (lo, hi) = (self.to_cert_time(self.horizon.0), self.to_cert_time(self.horizon.1));
        pt[0] = pt[0].clamp(lo, hi);
        if let Some(tube) = self.tube {
            let r2 = if self.normalize {
                pt[1..].iter().map(|v| v * v).sum::<f64>()
            } else {
                tube.form(&pt[1..])
            };
            if r2 > 1.0 {
                let k = r2.sqrt().recip();
                pt[1..].iter_mut().for_each(|v| *v *= k);
            }
        }
    }

    fn diagnostic(&self, rc: &RiskContour, pt: &[f64], source: &str) -> Diagnostic {
        let (t, z) = self.to_original(pt);
        let mut state = self.traj.state_at(t);
        if let Some(z) = &z {
            for (x, dz) in state.iter_mut().zip(z) {
                *x += dz;
            }
        }
        let bound = rc.risk_bound(&state, t).unwrap_or(f64::INFINITY);
        Diagnostic {
            time: t,
            offset: z,
            state,
            member: bound <= self.delta,
            risk_bound: bound.is_finite().then_some(bound),
            source: source.to_string(),
        }
    }

    fn verify_constraint(&self, rc: &RiskContour) -> Result<ConstraintReport, VerifyError> {
        let q1 = rc.p1.substitute(&self.bindings);
        let q2 = rc.p2.substitute(&self.bindings);
        let (t0, tf) = self.horizon;
        for k in 0..10 {
            let time = t0 + (tf - t0) * k as f64 / 9.0;
            let ct = self.to_cert_time(time);
            let value = q1.evaluate_with(|v| match v {
                VarId::Time => Some(ct),
                VarId::Offset(_) => Some(0.0),
                _ => None,
            })?;
            if value < EPS_P {
                return Err(VerifyError::DegenerateSecondMoment {
                    constraint: rc.name.clone(),
                    time,
                    value,
                });
            }
        }
        let f1 = &(&q2 * &q2) - &q1.scale(1.0 - self.delta);
        let (risk, mean) = rayon::join(|| self.certify_stage(rc, f1), || self.certify_stage(rc, q2.clone()));
        let (risk, mean) = (risk?, mean?);
        let status = if risk.certified && mean.certified {
            Status::Safe
        } else {
            Status::NotVerified
        };
        Ok(ConstraintReport {
            name: rc.name.clone(),
            status,
            risk,
            mean,
        })
    }

    fn certify_stage(&self, rc: &RiskContour, target: Polynomial) -> Result<StageReport, VerifyError> {
        let base = SosProblem::new(target.clone(), self.generators.clone(), self.variables.clone());
        if let Some(cap) = self.opts.degree_cap {
            let minimum = *base.multiplier_degrees.iter().max().unwrap_or(&0);
            if minimum > cap {
                return Err(VerifyError::DegreeCap {
                    constraint: rc.name.clone(),
                    cap,
                    minimum,
                });
            }
        }

        // A negative value anywhere on the domain rules out every certificate.
        let eval = target.evaluator(&self.variables)?;
        let tol = 1e-9 * target.max_abs_coeff();
        let worst = self
            .samples
            .iter()
            .map(|pt| (eval.eval(pt), pt))
            .fold(None, |acc: Option<(f64, &Vec<f64>)>, cur| match acc {
                Some(a) if a.0 <= cur.0 => Some(a),
                _ => Some(cur),
            });
        if let Some((value, pt)) = worst.filter(|_| self.opts.sample_refutation) {
            if value < -tol {
                return Ok(StageReport {
                    certified: false,
                    attempts: vec![Attempt {
                        degrees: base.multiplier_degrees.clone(),
                        outcome: format!("refuted: identity left side is {value:e} at a domain point"),
                    }],
                    certificate: None,
                    diagnostic: Some(self.diagnostic(rc, pt, "sampled")),
                });
            }
        }

        let mut attempts = Vec::new();
        let mut last_ray: Option<(Vec<f64>, Vec<Monomial>)> = None;
        for k in 0..=self.opts.escalations {
            let problem = base.raised(2 * k);
            if let Some(cap) = self.opts.degree_cap {
                if problem.multiplier_degrees.iter().any(|d| *d > cap) {
                    break;
                }
            }
            let degrees = problem.multiplier_degrees.clone();
            match soscert::certify(&problem, &self.opts.sdp)? {
                SosOutcome::Certified(cert) => {
                    attempts.push(Attempt {
                        degrees,
                        outcome: format!("certified (residual {:e})", cert.residual),
                    });
                    return Ok(StageReport {
                        certified: true,
                        attempts,
                        certificate: self.opts.include_certificates.then_some(cert),
                        diagnostic: None,
                    });
                }
                SosOutcome::Infeasible { ray, monomials } => {
                    attempts.push(Attempt {
                        degrees,
                        outcome: "infeasible".into(),
                    });
                    last_ray = Some((ray, monomials));
                }
                SosOutcome::Inconclusive { reason } => attempts.push(Attempt {
                    degrees,
                    outcome: format!("inconclusive: {reason}"),
                }),
            }
        }
        let diagnostic = last_ray
            .and_then(|(ray, monos)| self.ray_point(&ray, &monos))
            .map(|pt| self.diagnostic(rc, &pt, "dual_ray"))
            .or_else(|| worst.map(|(_, pt)| self.diagnostic(rc, pt, "sampled")));
        Ok(StageReport {
            certified: false,
            attempts,
            certificate: None,
            diagnostic,
        })
    }

    /// First-moment estimate `(y_t / y_1, y_z / y_1)` of the ray, viewed as a pseudo-measure.
    fn ray_point(&self, ray: &[f64], monos: &[Monomial]) -> Option<Vec<f64>> {
        let moment = |m: &Monomial| monos.iter().position(|x| x == m).map_or(0.0, |k| ray[k]);
        let y1 = moment(&Monomial::one());
        if !(y1.abs() > 0.0) || !y1.is_finite() {
            return None;
        }
        let mut pt: Vec<f64> = self.variables.iter().map(|v| moment(&Monomial::var(*v)) / y1).collect();
        if pt.iter().any(|v| !v.is_finite()) {
            return None;
        }
        self.clamp_to_domain(&mut pt);
        Some(pt)
    }

    fn coordinates(&self) -> Option<Coordinates> {
        self.normalize.then(|| Coordinates {
            time_center: self.center,
            time_half_width: self.half,
            offset_map: self.offset_map.as_ref().map(|m| m.transpose().as_slice().to_vec()),
        })
    }
}

fn run(s: &Scenario, traj: &PolyTrajectory, tube: Option<&Tube>, opts: &VerifyOptions) -> Result<Verdict, VerifyError> {
    let start = Instant::now();
    s.check_trajectory(traj)?;
    if let Some(tb) = tube {
        if tb.dim() != s.state_dim {
            return Err(VerifyError::Dimension {
                what: "tube",
                expected: s.state_dim,
                got: tb.dim(),
            });
        }
    }
    let contours = s.contours()?;
    let setup = Setup::new(s, traj, tube, opts);
    let reports: Vec<ConstraintReport> = contours
        .par_iter()
        .map(|rc| setup.verify_constraint(rc))
        .collect::<Result<_, _>>()?;
    let failure = reports.iter().find_map(|r| {
        let (stage, rep) = if !r.risk.certified {
            (Stage::Risk, &r.risk)
        } else if !r.mean.certified {
            (Stage::Mean, &r.mean)
        } else {
            return None;
        };
        Some(Failure {
            constraint: r.name.clone(),
            stage,
            reason: rep
                .attempts
                .last()
                .map_or_else(|| "no attempt".to_string(), |a| a.outcome.clone()),
            diagnostic: rep.diagnostic.clone(),
        })
    });
    Ok(Verdict {
        status: if failure.is_none() {
            Status::Safe
        } else {
            Status::NotVerified
        },
        kind: if tube.is_some() {
            VerdictKind::Tube
        } else {
            VerdictKind::Trajectory
        },
        delta: s.delta,
        coordinates: setup.coordinates(),
        constraints: reports,
        failure,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

pub fn verify_trajectory(s: &Scenario, traj: &PolyTrajectory, opts: &VerifyOptions) -> Result<Verdict, VerifyError> {
    run(s, traj, None, opts)
}

pub fn verify_tube(s: &Scenario, traj: &PolyTrajectory, tube: &Tube, opts: &VerifyOptions) -> Result<Verdict, VerifyError> {
    run(s, traj, Some(tube), opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseEntry {
    pub constraint: String,
    pub time: f64,
    pub member: bool,
    pub risk_bound: Option<f64>,
}

/// Contour membership of `P(t)` at each time, constraint-major.
pub fn verify_pointwise(s: &Scenario, traj: &PolyTrajectory, times: &[f64]) -> Result<Vec<PointwiseEntry>, VerifyError> {
    pointwise_with_offset(s, traj, None, times)
}

/// As [`verify_pointwise`], at `P(t) + z`.
pub fn pointwise_with_offset(
    s: &Scenario,
    traj: &PolyTrajectory,
    offset: Option<&[f64]>,
    times: &[f64],
) -> Result<Vec<PointwiseEntry>, VerifyError> {
    s.check_trajectory(traj)?;
    if let Some(z) = offset {
        if z.len() != s.state_dim {
            return Err(VerifyError::Dimension {
                what: "offset",
                expected: s.state_dim,
                got: z.len(),
            });
        }
    }
    let (t0, tf) = s.horizon;
    let slack = 1e-12 * (tf - t0).abs().max(1.0);
    if let Some(&t) = times.iter().find(|&&t| !(t >= t0 - slack && t <= tf + slack)) {
        return Err(VerifyError::TimeOutsideHorizon(t));
    }
    let mut out = Vec::with_capacity(times.len() * s.constraints.len());
    for rc in s.contours()? {
        for &t in times {
            let mut x = traj.state_at(t);
            if let Some(z) = offset {
                x.iter_mut().zip(z).for_each(|(a, b)| *a += b);
            }
            let b = rc.risk_bound(&x, t)?;
            out.push(PointwiseEntry {
                constraint: rc.name.clone(),
                time: t,
                member: b <= s.delta,
                risk_bound: b.is_finite().then_some(b),
            });
        }
    }
    Ok(out)
}

/// Uniformly spaced times covering the horizon, endpoints included.
pub fn uniform_times(horizon: (f64, f64), n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![horizon.0],
        _ => (0..n)
            .map(|k| {
                if k + 1 == n {
                    horizon.1
                } else {
                    horizon.0 + (horizon.1 - horizon.0) * k as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::{Distribution, UncertaintyModel};

    fn p(s: &str) -> Polynomial {
        s.parse().unwrap()
    }

    /// Unit disk obstacle at a fixed uncertain position on the x1 axis.
    fn disk_scenario(horizon: (f64, f64)) -> Scenario {
        let model = UncertaintyModel::new(
            [(VarId::Uncertain(0), Distribution::Uniform { lower: -0.1, upper: 0.1 })].into(),
        )
        .unwrap();
        let c = SafetyConstraint::new("disk", p("(x1 - w1)^2 + x2^2 - 0.25"), model).unwrap();
        Scenario::new(2, horizon, 0.1, vec![c]).unwrap()
    }

    fn line(y: f64) -> PolyTrajectory {
        PolyTrajectory::new(vec![p("2*t - 1"), Polynomial::constant(y)], (0.0, 1.0)).unwrap()
    }

    #[test]
    fn passing_far_away_is_safe() {
        let s = disk_scenario((0.0, 1.0));
        let v = verify_trajectory(&s, &line(2.0), &VerifyOptions::default()).unwrap();
        assert_eq!(v.status, Status::Safe, "{v:?}");
        assert!(v.failure.is_none());
        let c = &v.constraints[0];
        assert!(c.risk.certificate.is_some() && c.mean.certificate.is_some());
    }

    #[test]
    fn passing_through_the_obstacle_is_not_verified() {
        let s = disk_scenario((0.0, 1.0));
        let v = verify_trajectory(&s, &line(0.0), &VerifyOptions::default()).unwrap();
        assert_eq!(v.status, Status::NotVerified);
        let f = v.failure.unwrap();
        assert_eq!(f.constraint, "disk");
        assert_eq!(f.stage, Stage::Risk);
        let d = f.diagnostic.unwrap();
        assert!(!d.member);
        assert!((0.0..=1.0).contains(&d.time));
    }

    #[test]
    fn tube_safe_and_too_wide() {
        let s = disk_scenario((0.0, 1.0));
        let traj = line(1.5);
        let narrow = Tube::ball(2, 0.2).unwrap();
        let v = verify_tube(&s, &traj, &narrow, &VerifyOptions::default()).unwrap();
        assert_eq!(v.status, Status::Safe, "{:?}", v.failure);
        let wide = Tube::ball(2, 1.2).unwrap();
        let v = verify_tube(&s, &traj, &wide, &VerifyOptions::default()).unwrap();
        assert_eq!(v.status, Status::NotVerified);
        assert!(v.failure.unwrap().diagnostic.unwrap().offset.is_some());
    }

    #[test]
    fn unnormalized_coordinates_agree() {
        let s = disk_scenario((0.0, 1.0));
        let opts = VerifyOptions {
            normalize: false,
            ..VerifyOptions::default()
        };
        let v = verify_trajectory(&s, &line(2.0), &opts).unwrap();
        assert_eq!(v.status, Status::Safe);
        assert!(v.coordinates.is_none());
        let v = verify_tube(&s, &line(1.5), &Tube::ball(2, 0.2).unwrap(), &opts).unwrap();
        assert_eq!(v.status, Status::Safe);
    }

    #[test]
    fn input_validation() {
        let s = disk_scenario((0.0, 1.0));
        let other = PolyTrajectory::new(vec![p("t"), p("t")], (0.0, 2.0)).unwrap();
        assert!(matches!(
            verify_trajectory(&s, &other, &VerifyOptions::default()),
            Err(VerifyError::Horizon { .. })
        ));
        let short = PolyTrajectory::new(vec![p("t")], (0.0, 1.0)).unwrap();
        assert!(matches!(
            verify_trajectory(&s, &short, &VerifyOptions::default()),
            Err(VerifyError::Dimension { .. })
        ));
        assert!(Tube::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0])).is_err());
        assert!(Tube::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).is_err());
        let cap = VerifyOptions {
            degree_cap: Some(2),
            ..VerifyOptions::default()
        };
        assert!(matches!(
            verify_trajectory(&s, &line(2.0), &cap),
            Err(VerifyError::DegreeCap { .. })
        ));
        let dup = Scenario::new(2, (0.0, 1.0), 0.1, vec![s.constraints[0].clone(), s.constraints[0].clone()]);
        assert!(dup.is_err());
        assert!(Scenario::new(2, (0.0, 1.0), 1.5, s.constraints.clone()).is_err());
    }

    #[test]
    fn degenerate_second_moment_is_an_error() {
        let c = SafetyConstraint::new("zero", p("x1"), UncertaintyModel::default()).unwrap();
        let s = Scenario::new(1, (0.0, 1.0), 0.1, vec![c]).unwrap();
        let traj = PolyTrajectory::new(vec![Polynomial::zero()], (0.0, 1.0)).unwrap();
        assert!(matches!(
            verify_trajectory(&s, &traj, &VerifyOptions::default()),
            Err(VerifyError::DegenerateSecondMoment { .. })
        ));
    }

    #[test]
    fn pointwise_report() {
        let s = disk_scenario((0.0, 1.0));
        let r = verify_pointwise(&s, &line(0.0), &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(r.len(), 3);
        assert!(r[0].member && !r[1].member && r[2].member);
        assert_eq!(r[1].risk_bound, None);
        assert!(verify_pointwise(&s, &line(0.0), &[]).unwrap().is_empty());
        assert!(matches!(
            verify_pointwise(&s, &line(0.0), &[1.5]),
            Err(VerifyError::TimeOutsideHorizon(_))
        ));
        assert_eq!(uniform_times((0.0, 2.0), 3), vec![0.0, 1.0, 2.0]);
    }
}

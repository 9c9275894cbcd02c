//! Sparse multivariate polynomials over named variables.
//!
//! Coefficients are `f64`. Every operation returns a canonical value: terms
//! whose magnitude falls below [`CANON_REL_TOL`] times the largest coefficient
//! are dropped, so equal polynomials have identical term maps.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Relative threshold below which coefficients are treated as zero.
pub const CANON_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("variable `{0}` is not bound")]
    Unbound(VarId),
    #[error("expected a univariate polynomial, found variables {0:?}")]
    NotUnivariate(Vec<String>),
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
}

/// A variable of a scenario. Ordering is `Time < State(_) < Offset(_) < Uncertain(_)`,
/// indices ascending within each kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarId {
    Time,
    State(usize),
    /// Tube offset coordinate, printed `z1`, `z2`, ...
    Offset(usize),
    Uncertain(usize),
}

impl VarId {
    pub fn is_uncertain(self) -> bool {
        matches!(self, VarId::Uncertain(_))
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VarId::Time => write!(f, "t"),
            VarId::State(i) => write!(f, "x{}", i + 1),
            VarId::Offset(i) => write!(f, "z{}", i + 1),
            VarId::Uncertain(i) => write!(f, "w{}", i + 1),
        }
    }
}

impl FromStr for VarId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "t" {
            return Ok(VarId::Time);
        }
        let (kind, digits) = s.split_at(1.min(s.len()));
        let index: usize = digits
            .parse()
            .map_err(|_| format!("unknown variable `{s}`"))?;
        if index == 0 || digits.starts_with('0') {
            return Err(format!("variable indices start at 1 (`{s}`)"));
        }
        match kind {
            "x" => Ok(VarId::State(index - 1)),
            "z" => Ok(VarId::Offset(index - 1)),
            "w" => Ok(VarId::Uncertain(index - 1)),
            _ => Err(format!("unknown variable `{s}`")),
        }
    }
}

/// Product of variable powers, stored sorted by variable with no zero exponents.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Monomial {
    powers: Vec<(VarId, u32)>,
}

impl Monomial {
    pub fn one() -> Self {
        Self::default()
    }

    pub fn var(v: VarId) -> Self {
        Self::pow_of(v, 1)
    }

    pub fn pow_of(v: VarId, e: u32) -> Self {
        if e == 0 {
            Self::one()
        } else {
            Self {
                powers: vec![(v, e)],
            }
        }
    }

    pub fn from_powers(iter: impl IntoIterator<Item = (VarId, u32)>) -> Self {
        let mut acc: BTreeMap<VarId, u32> = BTreeMap::new();
        for (v, e) in iter {
            *acc.entry(v).or_default() += e;
        }
        Self {
            powers: acc.into_iter().filter(|&(_, e)| e > 0).collect(),
        }
    }

    pub fn powers(&self) -> &[(VarId, u32)] {
        &self.powers
    }

    pub fn degree(&self) -> u32 {
        self.powers.iter().map(|&(_, e)| e).sum()
    }

    pub fn exponent(&self, v: VarId) -> u32 {
        self.powers
            .binary_search_by(|(w, _)| w.cmp(&v))
            .map(|i| self.powers[i].1)
            .unwrap_or(0)
    }

    pub fn is_one(&self) -> bool {
        self.powers.is_empty()
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        let mut out = Vec::with_capacity(self.powers.len() + other.powers.len());
        let (mut i, mut j) = (0, 0);
        while i < self.powers.len() && j < other.powers.len() {
            let (a, b) = (self.powers[i], other.powers[j]);
            match a.0.cmp(&b.0) {
                Ordering::Less => {
                    out.push(a);
                    i += 1;
                }
                Ordering::Greater => {
                    out.push(b);
                    j += 1;
                }
                Ordering::Equal => {
                    out.push((a.0, a.1 + b.1));
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&self.powers[i..]);
        out.extend_from_slice(&other.powers[j..]);
        Monomial { powers: out }
    }

    /// Splits into the part over variables satisfying `pred` and the rest.
    pub fn split(&self, pred: impl Fn(VarId) -> bool) -> (Monomial, Monomial) {
        let (yes, no): (Vec<_>, Vec<_>) = self.powers.iter().partition(|(v, _)| pred(*v));
        (Monomial { powers: yes }, Monomial { powers: no })
    }

    pub fn evaluate(&self, value: impl Fn(VarId) -> Option<f64>) -> Result<f64, PolyError> {
        let mut acc = 1.0;
        for &(v, e) in &self.powers {
            let x = value(v).ok_or(PolyError::Unbound(v))?;
            acc *= x.powi(e as i32);
        }
        Ok(acc)
    }
}

impl Ord for Monomial {
    /// Graded order: lower total degree first; within a degree, the monomial with
    /// the larger exponent on the earliest variable comes first (`t < x1 < t^2 < t*x1`).
    fn cmp(&self, other: &Self) -> Ordering {
        match self.degree().cmp(&other.degree()) {
            Ordering::Equal => {}
            ord => return ord,
        }
        let (mut i, mut j) = (0, 0);
        while i < self.powers.len() && j < other.powers.len() {
            let (a, b) = (self.powers[i], other.powers[j]);
            match a.0.cmp(&b.0) {
                Ordering::Less => return Ordering::Less,
                Ordering::Greater => return Ordering::Greater,
                Ordering::Equal => match a.1.cmp(&b.1) {
                    Ordering::Equal => {
                        i += 1;
                        j += 1;
                    }
                    ord => return ord.reverse(),
                },
            }
        }
        // same degree and one list exhausted implies both are
        Ordering::Equal
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.powers.is_empty() {
            return write!(f, "1");
        }
        for (k, (v, e)) in self.powers.iter().enumerate() {
            if k > 0 {
                write!(f, " * ")?;
            }
            if *e == 1 {
                write!(f, "{v}")?;
            } else {
                write!(f, "{v}^{e}")?;
            }
        }
        Ok(())
    }
}

/// Sparse polynomial. Immutable by convention: operations return new values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Polynomial {
    terms: BTreeMap<Monomial, f64>,
    degree: u32,
}

impl Polynomial {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self::from_terms([(Monomial::one(), c)])
    }

    pub fn var(v: VarId) -> Self {
        Self::from_terms([(Monomial::var(v), 1.0)])
    }

    pub fn monomial(m: Monomial, c: f64) -> Self {
        Self::from_terms([(m, c)])
    }

    /// Sums duplicate monomials and canonicalizes.
    pub fn from_terms(terms: impl IntoIterator<Item = (Monomial, f64)>) -> Self {
        let mut map: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (m, c) in terms {
            *map.entry(m).or_insert(0.0) += c;
        }
        Self::canonical(map)
    }

    fn canonical(mut terms: BTreeMap<Monomial, f64>) -> Self {
        let max = terms.values().fold(0.0_f64, |m, c| m.max(c.abs()));
        let floor = CANON_REL_TOL * max;
        terms.retain(|_, c| *c != 0.0 && c.abs() >= floor);
        let degree = terms.keys().map(Monomial::degree).max().unwrap_or(0);
        Self { terms, degree }
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> + '_ {
        self.terms.iter().map(|(m, c)| (m, *c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn coefficient(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    /// Largest combined exponent over the variables selected by `pred`.
    pub fn degree_in(&self, pred: impl Fn(VarId) -> bool) -> u32 {
        self.terms
            .keys()
            .map(|m| {
                m.powers()
                    .iter()
                    .filter(|(v, _)| pred(*v))
                    .map(|(_, e)| e)
                    .sum()
            })
            .max()
            .unwrap_or(0)
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.abs()))
    }

    /// Variables mentioned, ascending.
    pub fn variables(&self) -> Vec<VarId> {
        let mut vars: Vec<VarId> = self
            .terms
            .keys()
            .flat_map(|m| m.powers().iter().map(|(v, _)| *v))
            .collect();
        vars.sort();
        vars.dedup();
        vars
    }

    pub fn scale(&self, k: f64) -> Polynomial {
        Self::canonical(self.terms.iter().map(|(m, c)| (m.clone(), c * k)).collect())
    }

    pub fn pow(&self, e: u32) -> Polynomial {
        let mut acc = Polynomial::constant(1.0);
        let mut base = self.clone();
        let mut e = e;
        while e > 0 {
            if e & 1 == 1 {
                acc = &acc * &base;
            }
            e >>= 1;
            if e > 0 {
                base = &base * &base;
            }
        }
        acc
    }

    /// Simultaneous substitution of bound variables; unbound ones pass through.
    pub fn substitute(&self, bindings: &BTreeMap<VarId, Polynomial>) -> Polynomial {
        if bindings.is_empty() {
            return self.clone();
        }
        let mut powers: BTreeMap<(VarId, u32), Polynomial> = BTreeMap::new();
        let mut acc: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (m, c) in &self.terms {
            let mut factor = Polynomial::constant(*c);
            let mut rest = Vec::new();
            for &(v, e) in m.powers() {
                match bindings.get(&v) {
                    Some(b) => {
                        let p = powers.entry((v, e)).or_insert_with(|| b.pow(e));
                        factor = &factor * p;
                    }
                    None => rest.push((v, e)),
                }
            }
            let rest = Monomial { powers: rest };
            for (fm, fc) in factor.terms {
                *acc.entry(fm.mul(&rest)).or_insert(0.0) += fc;
            }
        }
        Self::canonical(acc)
    }

    pub fn evaluate(&self, point: &BTreeMap<VarId, f64>) -> Result<f64, PolyError> {
        self.evaluate_with(|v| point.get(&v).copied())
    }

    pub fn evaluate_with(&self, value: impl Fn(VarId) -> Option<f64>) -> Result<f64, PolyError> {
        let mut sum = 0.0;
        for (m, c) in &self.terms {
            sum += c * m.evaluate(&value)?;
        }
        Ok(sum)
    }

    /// Dense ascending coefficients of a polynomial in at most one variable.
    pub fn univariate_coeffs(&self) -> Result<Vec<f64>, PolyError> {
        let vars = self.variables();
        if vars.len() > 1 {
            return Err(PolyError::NotUnivariate(
                vars.iter().map(ToString::to_string).collect(),
            ));
        }
        let mut out = vec![0.0; self.degree as usize + 1];
        for (m, c) in &self.terms {
            out[m.degree() as usize] = *c;
        }
        Ok(out)
    }

    /// Precompiles for repeated evaluation with variables given positionally.
    pub fn evaluator(&self, vars: &[VarId]) -> Result<DenseEvaluator, PolyError> {
        let mut terms = Vec::with_capacity(self.terms.len());
        for (m, c) in &self.terms {
            let mut exps = Vec::with_capacity(m.powers().len());
            for &(v, e) in m.powers() {
                let idx = vars
                    .iter()
                    .position(|w| *w == v)
                    .ok_or(PolyError::Unbound(v))?;
                exps.push((idx, e as i32));
            }
            terms.push((*c, exps));
        }
        Ok(DenseEvaluator { terms })
    }
}

/// Term list with positional variable indices, see [`Polynomial::evaluator`].
#[derive(Debug, Clone)]
pub struct DenseEvaluator {
    terms: Vec<(f64, Vec<(usize, i32)>)>,
}

impl DenseEvaluator {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(c, exps)| exps.iter().fold(*c, |acc, &(i, e)| acc * x[i].powi(e)))
            .sum()
    }
}

impl Add for &Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        let mut terms = self.terms.clone();
        for (m, c) in &rhs.terms {
            *terms.entry(m.clone()).or_insert(0.0) += c;
        }
        Polynomial::canonical(terms)
    }
}

impl Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        let mut terms = self.terms.clone();
        for (m, c) in &rhs.terms {
            *terms.entry(m.clone()).or_insert(0.0) -= c;
        }
        Polynomial::canonical(terms)
    }
}

impl Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        let mut terms: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &rhs.terms {
                *terms.entry(ma.mul(mb)).or_insert(0.0) += ca * cb;
            }
        }
        Polynomial::canonical(terms)
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

macro_rules! forward_owned {
    ($tr:ident, $f:ident) => {
        impl $tr for Polynomial {
            type Output = Polynomial;
            fn $f(self, rhs: Polynomial) -> Polynomial {
                (&self).$f(&rhs)
            }
        }
        impl $tr<&Polynomial> for Polynomial {
            type Output = Polynomial;
            fn $f(self, rhs: &Polynomial) -> Polynomial {
                (&self).$f(rhs)
            }
        }
    };
}
forward_owned!(Add, add);
forward_owned!(Sub, sub);
forward_owned!(Mul, mul);

impl Neg for Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        (&self).neg()
    }
}

impl fmt::Display for Polynomial {
    /// Highest degree first; within a degree in monomial order. Coefficients use
    /// the shortest round-tripping decimal form, so parsing reproduces them exactly.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut ordered: Vec<(&Monomial, f64)> = self.terms().collect();
        ordered.sort_by(|a, b| b.0.degree().cmp(&a.0.degree()).then(a.0.cmp(b.0)));
        for (k, (m, c)) in ordered.into_iter().enumerate() {
            let (neg, mag) = (c.is_sign_negative(), c.abs());
            match (k, neg) {
                (0, true) => write!(f, "-")?,
                (0, false) => {}
                (_, true) => write!(f, " - ")?,
                (_, false) => write!(f, " + ")?,
            }
            if m.is_one() {
                write!(f, "{mag:?}")?;
            } else if mag == 1.0 {
                write!(f, "{m}")?;
            } else {
                write!(f, "{mag:?} * {m}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Polynomial {
    type Err = PolyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse::Parser::new(s).parse()
    }
}

impl Serialize for Polynomial {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Polynomial {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

mod parse {
    //! Recursive descent over
    //! `expr := term (('+'|'-') term)*`, `term := unary ('*' unary)*`,
    //! `unary := '-' unary | power`, `power := atom ('^' int)?`,
    //! `atom := number | variable | '(' expr ')'`.

    use super::{PolyError, Polynomial, VarId};

    pub(super) struct Parser<'a> {
        src: &'a str,
        pos: usize,
    }

    impl<'a> Parser<'a> {
        pub(super) fn new(src: &'a str) -> Self {
            Self { src, pos: 0 }
        }

        pub(super) fn parse(mut self) -> Result<Polynomial, PolyError> {
            let p = self.expr()?;
            self.skip_ws();
            if self.pos < self.src.len() {
                return Err(self.err("unexpected trailing input"));
            }
            Ok(p)
        }

        fn err(&self, msg: impl Into<String>) -> PolyError {
            PolyError::Parse {
                pos: self.pos,
                msg: msg.into(),
            }
        }

        fn skip_ws(&mut self) {
            while let Some(c) = self.peek_raw() {
                if c.is_whitespace() {
                    self.pos += c.len_utf8();
                } else {
                    break;
                }
            }
        }

        fn peek_raw(&self) -> Option<char> {
            self.src[self.pos..].chars().next()
        }

        fn peek(&mut self) -> Option<char> {
            self.skip_ws();
            self.peek_raw()
        }

        fn eat(&mut self, c: char) -> bool {
            if self.peek() == Some(c) {
                self.pos += c.len_utf8();
                true
            } else {
                false
            }
        }

        fn expr(&mut self) -> Result<Polynomial, PolyError> {
            let mut acc = self.term()?;
            loop {
                if self.eat('+') {
                    acc = &acc + &self.term()?;
                } else if self.eat('-') {
                    acc = &acc - &self.term()?;
                } else {
                    return Ok(acc);
                }
            }
        }

        fn term(&mut self) -> Result<Polynomial, PolyError> {
            let mut acc = self.unary()?;
            while self.eat('*') {
                acc = &acc * &self.unary()?;
            }
            Ok(acc)
        }

        fn unary(&mut self) -> Result<Polynomial, PolyError> {
            if self.eat('-') {
                Ok(-self.unary()?)
            } else if self.eat('+') {
                self.unary()
            } else {
                self.power()
            }
        }

        fn power(&mut self) -> Result<Polynomial, PolyError> {
            let base = self.atom()?;
            if self.eat('^') {
                self.skip_ws();
                let start = self.pos;
                while matches!(self.peek_raw(), Some(c) if c.is_ascii_digit()) {
                    self.pos += 1;
                }
                let e: u32 = self.src[start..self.pos]
                    .parse()
                    .map_err(|_| self.err("expected a nonnegative integer exponent"))?;
                Ok(base.pow(e))
            } else {
                Ok(base)
            }
        }

        fn atom(&mut self) -> Result<Polynomial, PolyError> {
            match self.peek() {
                Some('(') => {
                    self.pos += 1;
                    let inner = self.expr()?;
                    if !self.eat(')') {
                        return Err(self.err("expected `)`"));
                    }
                    Ok(inner)
                }
                Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
                Some(c) if c.is_ascii_alphabetic() => {
                    let start = self.pos;
                    while matches!(self.peek_raw(), Some(c) if c.is_ascii_alphanumeric()) {
                        self.pos += 1;
                    }
                    let name = &self.src[start..self.pos];
                    let v: VarId = name.parse().map_err(|m: String| PolyError::Parse {
                        pos: start,
                        msg: m,
                    })?;
                    Ok(Polynomial::var(v))
                }
                Some(c) => Err(self.err(format!("unexpected character `{c}`"))),
                None => Err(self.err("unexpected end of input")),
            }
        }

        fn number(&mut self) -> Result<Polynomial, PolyError> {
            let start = self.pos;
            let bytes = self.src.as_bytes();
            let mut i = self.pos;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            self.pos = i;
            let value: f64 = self.src[start..i].parse().map_err(|_| PolyError::Parse {
                pos: start,
                msg: format!("invalid number `{}`", &self.src[start..i]),
            })?;
            Ok(Polynomial::constant(value))
        }
    }
}

/// Polynomial trajectory `x(t)` over a finite horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyTrajectory {
    components: Vec<Polynomial>,
    horizon: (f64, f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("trajectory component {index} mentions `{var}`; only `t` is allowed")]
    NotTimeOnly { index: usize, var: VarId },
    #[error("invalid horizon [{0}, {1}]: endpoints must be finite with t0 < tf")]
    Horizon(f64, f64),
    #[error("trajectory has no components")]
    Empty,
}

impl PolyTrajectory {
    pub fn new(components: Vec<Polynomial>, horizon: (f64, f64)) -> Result<Self, TrajectoryError> {
        let (t0, tf) = horizon;
        if !(t0.is_finite() && tf.is_finite() && t0 < tf) {
            return Err(TrajectoryError::Horizon(t0, tf));
        }
        if components.is_empty() {
            return Err(TrajectoryError::Empty);
        }
        for (index, c) in components.iter().enumerate() {
            if let Some(var) = c.variables().into_iter().find(|v| *v != VarId::Time) {
                return Err(TrajectoryError::NotTimeOnly { index, var });
            }
        }
        Ok(Self {
            components,
            horizon,
        })
    }

    pub fn components(&self) -> &[Polynomial] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn horizon(&self) -> (f64, f64) {
        self.horizon
    }

    pub fn state_at(&self, t: f64) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.evaluate_with(|_| Some(t)).expect("time-only polynomial"))
            .collect()
    }

    /// Bindings `x_i <- component_i`.
    pub fn bindings(&self) -> BTreeMap<VarId, Polynomial> {
        self.components
            .iter()
            .enumerate()
            .map(|(i, c)| (VarId::State(i), c.clone()))
            .collect()
    }
}

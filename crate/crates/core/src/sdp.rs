//! Dense semidefinite feasibility solver.
//!
//! Finds a block-diagonal `X ⪰ 0` with `<A_k, X> = b_k`, or a Farkas ray `y`
//! with `-Σ y_k A_k ⪰ 0` and `bᵀy > 0`. The method is a primal-dual interior
//! point iteration on the homogeneous self-dual embedding with zero objective,
//! HKM search direction and Mehrotra predictor-corrector steps. With a zero
//! objective the central path of the primal part tends to the analytic centre
//! of the feasible set, so accepted points sit away from the PSD boundary.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdpError {
    #[error("problem has no equality constraints")]
    NoEqualities,
    #[error("problem has no blocks")]
    NoBlocks,
    #[error("equality {eq}: entry ({row}, {col}) outside block {block} of size {size}")]
    Dimension {
        eq: usize,
        block: usize,
        row: usize,
        col: usize,
        size: usize,
    },
    #[error("equality {eq}: non-finite value")]
    NonFinite { eq: usize },
    #[error("matrix is not square")]
    NotSquare,
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("malformed sparse dump at line {line}: {msg}")]
    Dump { line: usize, msg: String },
}

/// One coefficient of a symmetric constraint matrix; `(row, col)` and
/// `(col, row)` both carry `value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub block: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Equality {
    pub entries: Vec<Entry>,
    pub rhs: f64,
}

/// Find block-diagonal `X ⪰ 0` with `<A_k, X> = b_k` for every equality.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SdpFeasibility {
    pub blocks: Vec<usize>,
    pub equalities: Vec<Equality>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdpStatus {
    Feasible,
    Infeasible,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SdpStatus,
    /// Block matrices, present when feasible.
    pub x: Option<Vec<DMatrix<f64>>>,
    /// Ray `y` over the original equalities, present when infeasible.
    pub infeasibility_certificate: Option<Vec<f64>>,
    pub iterations: usize,
    /// Feasible: max `|<A_k,X> - b_k|`. Infeasible: max violation of `-Σ y_k A_k ⪰ 0`
    /// after normalizing `bᵀy = 1`.
    pub max_residual: f64,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdpOptions {
    pub max_iter: usize,
    pub gap_tol: f64,
    pub feas_tol: f64,
    pub step_fraction: f64,
    /// Accept a polished iterate once its smallest eigenvalue is at least this
    /// fraction of `max(1, largest eigenvalue)`.
    pub interior_margin: f64,
}

impl Default for SdpOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            gap_tol: 1e-9,
            feas_tol: 1e-9,
            step_fraction: 0.98,
            interior_margin: 1e-8,
        }
    }
}

impl SdpFeasibility {
    pub fn validate(&self) -> Result<(), SdpError> {
        if self.blocks.is_empty() {
            return Err(SdpError::NoBlocks);
        }
        if self.equalities.is_empty() {
            return Err(SdpError::NoEqualities);
        }
        for (eq, e) in self.equalities.iter().enumerate() {
            if !e.rhs.is_finite() {
                return Err(SdpError::NonFinite { eq });
            }
            for en in &e.entries {
                let size = *self.blocks.get(en.block).ok_or(SdpError::Dimension {
                    eq,
                    block: en.block,
                    row: en.row,
                    col: en.col,
                    size: 0,
                })?;
                if en.row >= size || en.col >= size {
                    return Err(SdpError::Dimension {
                        eq,
                        block: en.block,
                        row: en.row,
                        col: en.col,
                        size,
                    });
                }
                if !en.value.is_finite() {
                    return Err(SdpError::NonFinite { eq });
                }
            }
        }
        Ok(())
    }

    /// `<A_k, X>` for every equality.
    pub fn apply(&self, x: &[DMatrix<f64>]) -> Vec<f64> {
        self.equalities
            .iter()
            .map(|e| {
                e.entries
                    .iter()
                    .map(|en| {
                        let m = &x[en.block];
                        if en.row == en.col {
                            en.value * m[(en.row, en.col)]
                        } else {
                            en.value * (m[(en.row, en.col)] + m[(en.col, en.row)])
                        }
                    })
                    .sum()
            })
            .collect()
    }

    /// `Σ y_k A_k` as dense blocks.
    pub fn adjoint(&self, y: &[f64]) -> Vec<DMatrix<f64>> {
        let mut out: Vec<_> = self.blocks.iter().map(|&n| DMatrix::zeros(n, n)).collect();
        for (e, &yk) in self.equalities.iter().zip(y) {
            for en in &e.entries {
                let m = &mut out[en.block];
                m[(en.row, en.col)] += yk * en.value;
                if en.row != en.col {
                    m[(en.col, en.row)] += yk * en.value;
                }
            }
        }
        out
    }

    /// Max `|<A_k,X> - b_k|`.
    pub fn residual(&self, x: &[DMatrix<f64>]) -> f64 {
        self.apply(x)
            .iter()
            .zip(&self.equalities)
            .map(|(ax, e)| (ax - e.rhs).abs())
            .fold(0.0, f64::max)
    }

    /// Plain-text sparse dump: a `blocks` line with sizes, one
    /// `k: block i j value` line per entry, then an `rhs` line with `b`.
    pub fn to_sparse_text(&self) -> String {
        let mut s = String::new();
        let sizes: Vec<String> = self.blocks.iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "blocks {}", sizes.join(" "));
        let _ = writeln!(s, "equalities {}", self.equalities.len());
        for (k, e) in self.equalities.iter().enumerate() {
            for en in &e.entries {
                let _ = writeln!(s, "{k}: {} {} {} {:?}", en.block, en.row, en.col, en.value);
            }
        }
        let rhs: Vec<String> = self.equalities.iter().map(|e| format!("{:?}", e.rhs)).collect();
        let _ = writeln!(s, "rhs {}", rhs.join(" "));
        s
    }

    pub fn from_sparse_text(text: &str) -> Result<Self, SdpError> {
        let bad = |line: usize, msg: &str| SdpError::Dump {
            line: line + 1,
            msg: msg.to_string(),
        };
        let mut blocks = None;
        let mut equalities: Vec<Equality> = Vec::new();
        let mut saw_rhs = false;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("blocks") {
                let sizes: Result<Vec<usize>, _> = rest.split_whitespace().map(str::parse).collect();
                blocks = Some(sizes.map_err(|_| bad(ln, "bad block size"))?);
            } else if let Some(rest) = line.strip_prefix("equalities") {
                let n: usize = rest.trim().parse().map_err(|_| bad(ln, "bad equality count"))?;
                equalities = vec![Equality::default(); n];
            } else if let Some(rest) = line.strip_prefix("rhs") {
                let vals: Result<Vec<f64>, _> = rest.split_whitespace().map(str::parse).collect();
                let vals = vals.map_err(|_| bad(ln, "bad rhs value"))?;
                if vals.len() != equalities.len() {
                    return Err(bad(ln, "rhs length does not match equality count"));
                }
                for (e, v) in equalities.iter_mut().zip(vals) {
                    e.rhs = v;
                }
                saw_rhs = true;
            } else {
                let (k, rest) = line.split_once(':').ok_or_else(|| bad(ln, "expected `k: ...`"))?;
                let k: usize = k.trim().parse().map_err(|_| bad(ln, "bad equality index"))?;
                let f: Vec<&str> = rest.split_whitespace().collect();
                if f.len() != 4 {
                    return Err(bad(ln, "expected `block i j value`"));
                }
                let parse_u = |s: &str| s.parse::<usize>().map_err(|_| bad(ln, "bad index"));
                let entry = Entry {
                    block: parse_u(f[0])?,
                    row: parse_u(f[1])?,
                    col: parse_u(f[2])?,
                    value: f[3].parse().map_err(|_| bad(ln, "bad value"))?,
                };
                equalities
                    .get_mut(k)
                    .ok_or_else(|| bad(ln, "equality index out of range"))?
                    .entries
                    .push(entry);
            }
        }
        if !saw_rhs {
            return Err(bad(text.lines().count(), "missing rhs line"));
        }
        let p = SdpFeasibility {
            blocks: blocks.ok_or_else(|| bad(0, "missing blocks line"))?,
            equalities,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64, SdpError> {
    if m.nrows() != m.ncols() {
        return Err(SdpError::NotSquare);
    }
    let scale = m.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    let asym = (0..m.nrows())
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| (m[(i, j)] - m[(j, i)]).abs())
        .fold(0.0, f64::max);
    if asym > 1e-12 * scale {
        return Err(SdpError::NotSymmetric(asym));
    }
    Ok(eig_extremes(m).0)
}

fn eig_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 0 {
        return (f64::INFINITY, f64::NEG_INFINITY);
    }
    if m.nrows() == 1 {
        return (m[(0, 0)], m[(0, 0)]);
    }
    let e = SymmetricEigen::new(m.clone()).eigenvalues;
    (e.min(), e.max())
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

/// Largest `alpha` with `m + alpha * d ⪰ 0`, given `m ≻ 0`.
fn max_step(m: &DMatrix<f64>, d: &DMatrix<f64>) -> f64 {
    let Some(chol) = Cholesky::new(m.clone()) else {
        return 0.0;
    };
    let l = chol.l();
    let Some(y) = l.solve_lower_triangular(d) else {
        return 0.0;
    };
    let Some(mut z) = l.solve_lower_triangular(&y.transpose()) else {
        return 0.0;
    };
    symmetrize(&mut z);
    let lmin = eig_extremes(&z).0;
    if lmin >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lmin
    }
}

/// An equality restricted to one block, in two layouts used by the Schur assembly.
#[derive(Debug, Clone)]
struct BlockPart {
    eq: usize,
    /// `(row, col, value)` with `row <= col`.
    upper: Vec<(usize, usize, f64)>,
    /// Full symmetric pattern grouped by row: `(row, [(col, value)])`.
    by_row: Vec<(usize, Vec<(usize, f64)>)>,
}

#[derive(Debug)]
struct Prepared {
    blocks: Vec<usize>,
    /// Kept equalities (scaled, merged), indices into the original problem.
    kept: Vec<usize>,
    row_norm: Vec<f64>,
    b: Vec<f64>,
    parts: Vec<Vec<BlockPart>>,
    gram: Cholesky<f64, nalgebra::Dyn>,
}

enum Presolved {
    Ready(Box<Prepared>),
    Infeasible(Vec<f64>),
}

impl Prepared {
    fn apply(&self, x: &[DMatrix<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.kept.len());
        for (bk, parts) in self.parts.iter().enumerate() {
            let m = &x[bk];
            for part in parts {
                let mut s = 0.0;
                for &(r, c, v) in &part.upper {
                    s += if r == c {
                        v * m[(r, c)]
                    } else {
                        v * (m[(r, c)] + m[(c, r)])
                    };
                }
                out[part.eq] += s;
            }
        }
        out
    }

    fn adjoint(&self, y: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let mut out: Vec<_> = self.blocks.iter().map(|&n| DMatrix::zeros(n, n)).collect();
        for (bk, parts) in self.parts.iter().enumerate() {
            let m = &mut out[bk];
            for part in parts {
                let yk = y[part.eq];
                for &(r, c, v) in &part.upper {
                    m[(r, c)] += yk * v;
                    if r != c {
                        m[(c, r)] += yk * v;
                    }
                }
            }
        }
        out
    }

    /// Schur complement `M_ij = tr(A_i X A_j S^-1)`.
    fn schur(&self, x: &[DMatrix<f64>], sinv: &[DMatrix<f64>]) -> DMatrix<f64> {
        let m = self.kept.len();
        let mut schur = DMatrix::<f64>::zeros(m, m);
        for (bk, parts) in self.parts.iter().enumerate() {
            let n = self.blocks[bk];
            let xs = x[bk].as_slice();
            let ss = sinv[bk].as_slice();
            let mut f = vec![0.0; n * n];
            let mut w = vec![0.0; n];
            for (pi, part_i) in parts.iter().enumerate() {
                f.iter_mut().for_each(|v| *v = 0.0);
                // F = S^-1 A_i X, accumulated one row of A_i at a time.
                for (p, cols) in &part_i.by_row {
                    w.iter_mut().for_each(|v| *v = 0.0);
                    for &(q, a) in cols {
                        let xq = &xs[q * n..(q + 1) * n];
                        for (wr, xr) in w.iter_mut().zip(xq) {
                            *wr += a * xr;
                        }
                    }
                    let sp = &ss[p * n..(p + 1) * n];
                    for r in 0..n {
                        let wr = w[r];
                        if wr != 0.0 {
                            let col = &mut f[r * n..(r + 1) * n];
                            for (fc, sv) in col.iter_mut().zip(sp) {
                                *fc += wr * sv;
                            }
                        }
                    }
                }
                // f[s + r*n] = F[s][r]
                for part_j in &parts[pi..] {
                    let mut acc = 0.0;
                    for &(r, s, v) in &part_j.upper {
                        acc += if r == s {
                            v * f[r + r * n]
                        } else {
                            v * (f[s + r * n] + f[r + s * n])
                        };
                    }
                    schur[(part_i.eq, part_j.eq)] += acc;
                }
            }
        }
        // only the upper triangle was accumulated
        for i in 0..m {
            for j in 0..i {
                schur[(i, j)] = schur[(j, i)];
            }
        }
        schur
    }
}

fn presolve(p: &SdpFeasibility, opts: &SdpOptions) -> Presolved {
    let n_eq = p.equalities.len();
    let bmax = p.equalities.iter().fold(1.0_f64, |a, e| a.max(e.rhs.abs()));
    // merge duplicates into upper-triangular form
    let merged: Vec<BTreeMap<(usize, usize, usize), f64>> = p
        .equalities
        .iter()
        .map(|e| {
            let mut m = BTreeMap::new();
            for en in &e.entries {
                let (r, c) = if en.row <= en.col { (en.row, en.col) } else { (en.col, en.row) };
                *m.entry((en.block, r, c)).or_insert(0.0) += en.value;
            }
            m.retain(|_, v| *v != 0.0);
            m
        })
        .collect();
    let norms: Vec<f64> = merged
        .iter()
        .map(|m| {
            m.iter()
                .map(|(&(_, r, c), v)| if r == c { v * v } else { 2.0 * v * v })
                .sum::<f64>()
                .sqrt()
        })
        .collect();

    let mut candidates = Vec::new();
    for k in 0..n_eq {
        if norms[k] == 0.0 {
            if p.equalities[k].rhs.abs() > opts.feas_tol * bmax {
                let mut y = vec![0.0; n_eq];
                y[k] = p.equalities[k].rhs.signum();
                return Presolved::Infeasible(y);
            }
        } else {
            candidates.push(k);
        }
    }

    // Gram matrix of the scaled rows, <A_i, A_j>.
    let mut by_pos: BTreeMap<(usize, usize, usize), Vec<(usize, f64)>> = BTreeMap::new();
    for (ci, &k) in candidates.iter().enumerate() {
        for (&pos, &v) in &merged[k] {
            let w = if pos.1 == pos.2 { 1.0 } else { 2.0_f64.sqrt() };
            by_pos.entry(pos).or_default().push((ci, w * v / norms[k]));
        }
    }
    let nc = candidates.len();
    let mut gram = DMatrix::<f64>::zeros(nc, nc);
    for list in by_pos.values() {
        for &(i, a) in list {
            for &(j, b) in list {
                gram[(i, j)] += a * b;
            }
        }
    }

    // Pivoted Cholesky to find a maximal independent subset.
    let mut perm: Vec<usize> = (0..nc).collect();
    let mut l = DMatrix::<f64>::zeros(nc, nc);
    let mut diag: Vec<f64> = (0..nc).map(|i| gram[(i, i)]).collect();
    let mut rank = 0;
    while rank < nc {
        let (best, &dmax) = diag[rank..]
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, (i, d)| if *d > *acc.1 { (i, d) } else { acc });
        if dmax <= 1e-10 {
            break;
        }
        let piv = rank + best;
        perm.swap(rank, piv);
        diag.swap(rank, piv);
        for c in 0..rank {
            let tmp = l[(rank, c)];
            l[(rank, c)] = l[(piv, c)];
            l[(piv, c)] = tmp;
        }
        let lkk = dmax.sqrt();
        l[(rank, rank)] = lkk;
        for i in rank + 1..nc {
            let mut s = gram[(perm[i], perm[rank])];
            for c in 0..rank {
                s -= l[(i, c)] * l[(rank, c)];
            }
            l[(i, rank)] = s / lkk;
            diag[i] -= l[(i, rank)] * l[(i, rank)];
        }
        rank += 1;
    }
    let mut indep: Vec<usize> = perm[..rank].to_vec();
    indep.sort_unstable();
    let dependent: Vec<usize> = perm[rank..].to_vec();

    let sub = DMatrix::from_fn(rank, rank, |i, j| gram[(indep[i], indep[j])]);
    let Some(gchol) = Cholesky::new(sub) else {
        // numerically degenerate even after pivoting: report as failure-to-presolve via ray of zeros
        return Presolved::Infeasible(vec![0.0; n_eq]);
    };
    let bscaled = |ci: usize| p.equalities[candidates[ci]].rhs / norms[candidates[ci]];
    for &dj in &dependent {
        let rhs = DVector::from_fn(rank, |i, _| gram[(indep[i], dj)]);
        let c = gchol.solve(&rhs);
        let mismatch = bscaled(dj) - (0..rank).map(|i| c[i] * bscaled(indep[i])).sum::<f64>();
        if mismatch.abs() > 1e3 * opts.feas_tol * bmax {
            let sign = mismatch.signum();
            let mut y = vec![0.0; n_eq];
            y[candidates[dj]] = sign / norms[candidates[dj]];
            for i in 0..rank {
                y[candidates[indep[i]]] -= sign * c[i] / norms[candidates[indep[i]]];
            }
            return Presolved::Infeasible(y);
        }
    }

    let kept: Vec<usize> = indep.iter().map(|&ci| candidates[ci]).collect();
    let row_norm: Vec<f64> = kept.iter().map(|&k| norms[k]).collect();
    let b: Vec<f64> = kept.iter().zip(&row_norm).map(|(&k, n)| p.equalities[k].rhs / n).collect();
    let mut parts: Vec<Vec<BlockPart>> = vec![Vec::new(); p.blocks.len()];
    for (i, &k) in kept.iter().enumerate() {
        let mut per_block: BTreeMap<usize, Vec<(usize, usize, f64)>> = BTreeMap::new();
        for (&(blk, r, c), &v) in &merged[k] {
            per_block.entry(blk).or_default().push((r, c, v / norms[k]));
        }
        for (blk, upper) in per_block {
            let mut rows: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
            for &(r, c, v) in &upper {
                rows.entry(r).or_default().push((c, v));
                if r != c {
                    rows.entry(c).or_default().push((r, v));
                }
            }
            parts[blk].push(BlockPart {
                eq: i,
                upper,
                by_row: rows.into_iter().collect(),
            });
        }
    }
    Presolved::Ready(Box::new(Prepared {
        blocks: p.blocks.clone(),
        kept,
        row_norm,
        b,
        parts,
        gram: gchol,
    }))
}

struct Direction {
    dx: Vec<DMatrix<f64>>,
    ds: Vec<DMatrix<f64>>,
    dy: DVector<f64>,
    dtau: f64,
    dkappa: f64,
}

struct Iterate {
    x: Vec<DMatrix<f64>>,
    s: Vec<DMatrix<f64>>,
    y: DVector<f64>,
    tau: f64,
    kappa: f64,
}

/// Solve the feasibility problem.
pub fn solve(p: &SdpFeasibility, opts: &SdpOptions) -> Result<SdpSolution, SdpError> {
    p.validate()?;
    let prep = match presolve(p, opts) {
        Presolved::Ready(prep) => prep,
        Presolved::Infeasible(y) => {
            if y.iter().all(|v| *v == 0.0) {
                return Ok(failure(0));
            }
            return Ok(infeasible_solution(p, y, 0));
        }
    };
    let nu: f64 = prep.blocks.iter().sum::<usize>() as f64 + 1.0;
    let bvec = DVector::from_vec(prep.b.clone());
    let bnorm = prep.b.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    let mut it = Iterate {
        x: prep.blocks.iter().map(|&n| DMatrix::identity(n, n)).collect(),
        s: prep.blocks.iter().map(|&n| DMatrix::identity(n, n)).collect(),
        y: DVector::zeros(prep.kept.len()),
        tau: 1.0,
        kappa: 1.0,
    };
    let mut fallback: Option<(f64, Vec<DMatrix<f64>>)> = None;

    for iter in 0..opts.max_iter {
        let ax = prep.apply(&it.x);
        let aty = prep.adjoint(&it.y);
        let r_p = &ax - &bvec * it.tau;
        let r_d: Vec<DMatrix<f64>> = aty.iter().zip(&it.s).map(|(a, s)| a + s).collect();
        let bty = bvec.dot(&it.y);
        let r_g = bty - it.kappa;
        let xs_dot: f64 = it.x.iter().zip(&it.s).map(|(x, s)| frob_dot(x, s)).sum();
        let mu = (xs_dot + it.tau * it.kappa) / nu;

        // feasible candidate
        let rel_res = r_p.amax() / it.tau / bnorm;
        if rel_res < 1e-3 {
            if let Some((lmin, lmax, xp)) = polish(&prep, &it.x, it.tau) {
                let margin = opts.interior_margin * lmax.max(1.0);
                if lmin >= margin {
                    return Ok(feasible_solution(p, xp, iter));
                }
                if lmin >= -opts.feas_tol && fallback.as_ref().is_none_or(|(best, _)| lmin > *best) {
                    fallback = Some((lmin, xp));
                }
            }
        }
        // infeasibility ray
        if bty > 0.0 && it.tau < it.kappa {
            let ynorm = &it.y / bty;
            let w: Vec<DMatrix<f64>> = prep.adjoint(&ynorm).into_iter().map(|m| -m).collect();
            let lmin = w.iter().map(|m| eig_extremes(m).0).fold(f64::INFINITY, f64::min);
            if lmin >= -opts.feas_tol {
                let mut y = vec![0.0; p.equalities.len()];
                for (i, &k) in prep.kept.iter().enumerate() {
                    y[k] = ynorm[i] / prep.row_norm[i];
                }
                return Ok(infeasible_solution(p, y, iter));
            }
        }
        if mu < opts.gap_tol * 1e-6 {
            break;
        }

        let chol_s: Vec<_> = it.s.iter().map(|s| Cholesky::new(s.clone())).collect();
        if chol_s.iter().any(Option::is_none) {
            break;
        }
        let sinv: Vec<DMatrix<f64>> = chol_s.into_iter().map(|c| c.unwrap().inverse()).collect();
        let schur = prep.schur(&it.x, &sinv);
        let Some(schur_chol) = factor_regularized(schur) else {
            break;
        };
        let v2 = schur_chol.solve(&bvec);
        let xrd_sinv: Vec<DMatrix<f64>> = it
            .x
            .iter()
            .zip(&r_d)
            .zip(&sinv)
            .map(|((x, rd), si)| x * rd * si)
            .collect();
        let a_xrds = prep.apply(&xrd_sinv);

        let solve_dir = |sigma: f64, eta: f64, second: Option<&Direction>| -> Direction {
            // rc_sinv = sigma mu S^-1 - X - dXa dSa S^-1
            let mut rc_sinv: Vec<DMatrix<f64>> = it
                .x
                .iter()
                .zip(&sinv)
                .map(|(x, si)| si * (sigma * mu) - x)
                .collect();
            let mut r_tk = sigma * mu - it.tau * it.kappa;
            if let Some(a) = second {
                for ((rc, (dxa, dsa)), si) in rc_sinv.iter_mut().zip(a.dx.iter().zip(&a.ds)).zip(&sinv) {
                    *rc -= dxa * dsa * si;
                }
                r_tk -= a.dtau * a.dkappa;
            }
            let h = -(&r_p * eta) - prep.apply(&rc_sinv) - &a_xrds * eta;
            let q = -eta * r_g + r_tk / it.tau;
            let v1 = schur_chol.solve(&h);
            let dtau = (q - bvec.dot(&v1)) / (bvec.dot(&v2) + it.kappa / it.tau);
            let dy = &v1 + &v2 * dtau;
            let aty_d = prep.adjoint(&dy);
            let ds: Vec<DMatrix<f64>> = r_d.iter().zip(&aty_d).map(|(rd, a)| -(rd * eta) - a).collect();
            let dx: Vec<DMatrix<f64>> = rc_sinv
                .iter()
                .zip(it.x.iter().zip(&sinv))
                .zip(r_d.iter().zip(&aty_d))
                .map(|((rc, (x, si)), (rd, a))| {
                    let mut d = rc + x * (rd * eta + a) * si;
                    symmetrize(&mut d);
                    d
                })
                .collect();
            let dkappa = (r_tk - it.kappa * dtau) / it.tau;
            Direction {
                dx,
                ds,
                dy,
                dtau,
                dkappa,
            }
        };
        let step_to_boundary = |d: &Direction| -> f64 {
            let mut a = f64::INFINITY;
            for (x, dx) in it.x.iter().zip(&d.dx) {
                a = a.min(max_step(x, dx));
            }
            for (s, ds) in it.s.iter().zip(&d.ds) {
                a = a.min(max_step(s, ds));
            }
            if d.dtau < 0.0 {
                a = a.min(-it.tau / d.dtau);
            }
            if d.dkappa < 0.0 {
                a = a.min(-it.kappa / d.dkappa);
            }
            a
        };

        let aff = solve_dir(0.0, 1.0, None);
        let a_aff = step_to_boundary(&aff).min(1.0);
        let mu_aff = {
            let mut g = 0.0;
            for ((x, dx), (s, ds)) in it.x.iter().zip(&aff.dx).zip(it.s.iter().zip(&aff.ds)) {
                g += frob_dot(&(x + dx * a_aff), &(s + ds * a_aff));
            }
            (g + (it.tau + a_aff * aff.dtau) * (it.kappa + a_aff * aff.dkappa)) / nu
        };
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
        let dir = solve_dir(sigma, 1.0 - sigma, Some(&aff));
        let alpha = (opts.step_fraction * step_to_boundary(&dir)).min(1.0);
        if !(alpha > 1e-10) {
            break;
        }
        for (x, dx) in it.x.iter_mut().zip(&dir.dx) {
            *x += dx * alpha;
            symmetrize(x);
        }
        for (s, ds) in it.s.iter_mut().zip(&dir.ds) {
            *s += ds * alpha;
            symmetrize(s);
        }
        it.y += &dir.dy * alpha;
        it.tau += alpha * dir.dtau;
        it.kappa += alpha * dir.dkappa;
        if !(it.tau.is_finite() && it.kappa.is_finite()) {
            break;
        }
    }
    match fallback {
        Some((_, xp)) => Ok(feasible_solution(p, xp, opts.max_iter)),
        None => Ok(failure(opts.max_iter)),
    }
}

fn factor_regularized(m: DMatrix<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    let dmax = m.diagonal().amax().max(1e-300);
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some(c);
    }
    let mut delta = 1e-14 * dmax;
    for _ in 0..6 {
        let mut reg = m.clone();
        for i in 0..reg.nrows() {
            reg[(i, i)] += delta;
        }
        if let Some(c) = Cholesky::new(reg) {
            return Some(c);
        }
        delta *= 100.0;
    }
    None
}

/// Projects `X/tau` onto the affine set `A(X) = b`; returns extreme eigenvalues and the point.
fn polish(prep: &Prepared, x: &[DMatrix<f64>], tau: f64) -> Option<(f64, f64, Vec<DMatrix<f64>>)> {
    let xbar: Vec<DMatrix<f64>> = x.iter().map(|m| m / tau).collect();
    let mut r = prep.apply(&xbar);
    for (ri, bi) in r.iter_mut().zip(&prep.b) {
        *ri -= bi;
    }
    let z = prep.gram.solve(&r);
    let corr = prep.adjoint(&z);
    let mut xp: Vec<DMatrix<f64>> = xbar.iter().zip(&corr).map(|(a, c)| a - c).collect();
    xp.iter_mut().for_each(symmetrize);
    let (mut lmin, mut lmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for m in &xp {
        let (lo, hi) = eig_extremes(m);
        if !lo.is_finite() {
            return None;
        }
        lmin = lmin.min(lo);
        lmax = lmax.max(hi);
    }
    Some((lmin, lmax, xp))
}

fn feasible_solution(p: &SdpFeasibility, x: Vec<DMatrix<f64>>, iterations: usize) -> SdpSolution {
    let max_residual = p.residual(&x);
    let min_eigenvalue = x.iter().map(|m| eig_extremes(m).0).fold(f64::INFINITY, f64::min);
    SdpSolution {
        status: SdpStatus::Feasible,
        x: Some(x),
        infeasibility_certificate: None,
        iterations,
        max_residual,
        min_eigenvalue,
    }
}

fn infeasible_solution(p: &SdpFeasibility, y: Vec<f64>, iterations: usize) -> SdpSolution {
    let by: f64 = p.equalities.iter().zip(&y).map(|(e, yk)| e.rhs * yk).sum();
    let w = p.adjoint(&y);
    let lmin = w
        .iter()
        .map(|m| eig_extremes(&(-m / by)).0)
        .fold(f64::INFINITY, f64::min);
    SdpSolution {
        status: SdpStatus::Infeasible,
        x: None,
        infeasibility_certificate: Some(y),
        iterations,
        max_residual: (-lmin).max(0.0),
        min_eigenvalue: lmin,
    }
}

fn failure(iterations: usize) -> SdpSolution {
    SdpSolution {
        status: SdpStatus::NumericalFailure,
        x: None,
        infeasibility_certificate: None,
        iterations,
        max_residual: f64::NAN,
        min_eigenvalue: f64::NAN,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(block: usize, row: usize, col: usize, value: f64) -> Entry {
        Entry {
            block,
            row,
            col,
            value,
        }
    }

    #[test]
    fn scalar_feasible() {
        let p = SdpFeasibility {
            blocks: vec![1],
            equalities: vec![Equality {
                entries: vec![entry(0, 0, 0, 1.0)],
                rhs: 1.0,
            }],
        };
        let sol = solve(&p, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Feasible);
        let x = sol.x.unwrap();
        assert!((x[0][(0, 0)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn scalar_infeasible() {
        let p = SdpFeasibility {
            blocks: vec![1],
            equalities: vec![Equality {
                entries: vec![entry(0, 0, 0, 1.0)],
                rhs: -1.0,
            }],
        };
        let sol = solve(&p, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
        let y = sol.infeasibility_certificate.unwrap();
        assert!(-y[0] > 0.0);
    }

    #[test]
    fn two_by_two_trace_and_difference() {
        let p = SdpFeasibility {
            blocks: vec![2],
            equalities: vec![
                Equality {
                    entries: vec![entry(0, 0, 0, 1.0), entry(0, 1, 1, 1.0)],
                    rhs: 2.0,
                },
                Equality {
                    entries: vec![entry(0, 0, 0, 1.0), entry(0, 1, 1, -1.0)],
                    rhs: 0.0,
                },
            ],
        };
        let sol = solve(&p, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Feasible);
        let x = sol.x.unwrap();
        assert!(p.residual(&x) <= 1e-9);
        assert!(min_eigenvalue(&x[0]).unwrap() >= -1e-9);
    }

    #[test]
    fn zero_row_with_nonzero_rhs_is_infeasible() {
        let p = SdpFeasibility {
            blocks: vec![2],
            equalities: vec![
                Equality {
                    entries: vec![entry(0, 0, 0, 1.0)],
                    rhs: 1.0,
                },
                Equality {
                    entries: vec![],
                    rhs: 1.0,
                },
            ],
        };
        let sol = solve(&p, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
    }

    #[test]
    fn inconsistent_dependent_rows_are_infeasible() {
        let row = |rhs| Equality {
            entries: vec![entry(0, 0, 1, 1.0)],
            rhs,
        };
        let p = SdpFeasibility {
            blocks: vec![2],
            equalities: vec![row(1.0), row(2.0)],
        };
        let sol = solve(&p, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
        let y = sol.infeasibility_certificate.unwrap();
        let w = p.adjoint(&y);
        assert!(w[0].amax() < 1e-12);
    }

    #[test]
    fn min_eigenvalue_examples() {
        assert!((min_eigenvalue(&DMatrix::identity(3, 3)).unwrap() - 1.0).abs() < 1e-12);
        let d = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -0.5]);
        assert!((min_eigenvalue(&d).unwrap() + 0.5).abs() < 1e-12);
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert!((min_eigenvalue(&m).unwrap() - 1.0).abs() < 1e-12);
        let asym = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        assert!(matches!(min_eigenvalue(&asym), Err(SdpError::NotSymmetric(_))));
    }

    #[test]
    fn validation_errors() {
        let p = SdpFeasibility {
            blocks: vec![1],
            equalities: vec![Equality {
                entries: vec![entry(0, 1, 0, 1.0)],
                rhs: 1.0,
            }],
        };
        assert!(matches!(solve(&p, &SdpOptions::default()), Err(SdpError::Dimension { .. })));
        let p = SdpFeasibility {
            blocks: vec![1],
            equalities: vec![Equality {
                entries: vec![entry(0, 0, 0, f64::NAN)],
                rhs: 1.0,
            }],
        };
        assert!(matches!(solve(&p, &SdpOptions::default()), Err(SdpError::NonFinite { .. })));
        let p = SdpFeasibility {
            blocks: vec![1],
            equalities: vec![],
        };
        assert_eq!(solve(&p, &SdpOptions::default()).unwrap_err(), SdpError::NoEqualities);
    }

    #[test]
    fn sparse_dump_round_trip() {
        let p = SdpFeasibility {
            blocks: vec![2, 1],
            equalities: vec![
                Equality {
                    entries: vec![entry(0, 0, 1, 0.5), entry(1, 0, 0, -1.25)],
                    rhs: 0.1,
                },
                Equality {
                    entries: vec![entry(0, 1, 1, 3.0)],
                    rhs: 2.0,
                },
            ],
        };
        let text = p.to_sparse_text();
        assert_eq!(SdpFeasibility::from_sparse_text(&text).unwrap(), p);
        assert!(SdpFeasibility::from_sparse_text("blocks 1\nequalities 1\n0: 0 0 0 1\n").is_err());
    }
}

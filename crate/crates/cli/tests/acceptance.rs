//! End-to-end acceptance checks (custom harness, so the lines are always
//! shown). Each criterion prints one PASS/FAIL line and the run fails if any
//! criterion does.

use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskverify::contour::{build_contour, contour_grid, GridSpec};
use riskverify::montecarlo::estimate_risk;
use riskverify::polyalg::{Monomial, Polynomial, VarId};
use riskverify::scenario::{fixture, FixtureKind, FIXTURES};
use riskverify::sdp::{self, Entry, Equality, SdpFeasibility, SdpOptions, SdpStatus};
use riskverify::soscert::{certify, SosOutcome, SosProblem, EPS_RES};
use serde_json::Value;

const CASE1_TOL: f64 = 0.006;
const GRID_RUNTIME_S: f64 = 2.0;
const CONTOUR_RUNTIME_MS: f64 = 10.0;
const VERIFY_RUNTIME_MS: f64 = 5000.0;
const MC_SAMPLES: usize = 100_000;
const CANTELLI_POINTS: usize = 200;
const JENSEN_POINTS: usize = 1000;
const JENSEN_TOL: f64 = 1e-9;

struct Report {
    lines: Vec<(bool, String)>,
}

impl Report {
    fn record(&mut self, n: u32, ok: bool, detail: String) {
        let line = format!("{} criterion {n}: {detail}", if ok { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((ok, line));
    }
}

fn cli(args: &[&str], threads: Option<&str>) -> (i32, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_riskverify"));
    cmd.args(args);
    if let Some(n) = threads {
        cmd.env("RISKVERIFY_THREADS", n);
    }
    let out = cmd.output().expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8(out.stdout).unwrap())
}

fn case1_coefficients(r: &mut Report) {
    let f = fixture("case1_contour").unwrap().load();
    let c = &f.scenario.constraints[0];
    let start = Instant::now();
    let rc = build_contour(c).unwrap();
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let (x1, x2) = (VarId::State(0), VarId::State(1));
    let m = |p: &[(VarId, u32)]| Monomial::from_powers(p.iter().copied());
    // closed-form uniform moments on [0.3, 0.4]
    let e2 = (0.4f64.powi(3) - 0.3f64.powi(3)) / (3.0 * 0.1);
    let e4 = (0.4f64.powi(5) - 0.3f64.powi(5)) / (5.0 * 0.1);
    let p1_expected = [
        (m(&[]), e4),
        (m(&[(x1, 2)]), -2.0 * e2),
        (m(&[(x2, 2)]), -2.0 * e2),
        (m(&[(x1, 4)]), 1.0),
        (m(&[(x1, 2), (x2, 2)]), 2.0),
        (m(&[(x2, 4)]), 1.0),
    ];
    let p2_expected = [(m(&[]), -37.0 / 300.0), (m(&[(x1, 2)]), 1.0), (m(&[(x2, 2)]), 1.0)];
    let exact = rc.p1.num_terms() == 6
        && rc.p2.num_terms() == 3
        && p1_expected.iter().all(|(mm, v)| (rc.p1.coefficient(mm) - v).abs() < 1e-12)
        && p2_expected.iter().all(|(mm, v)| (rc.p2.coefficient(mm) - v).abs() < 1e-12);
    let c_val = -rc.p2.coefficient(&m(&[]));
    let printed = [
        ("c", c_val, 0.12),
        ("E[w^4]", rc.p1.coefficient(&m(&[])), 0.01),
        ("2E[w^2] (x1^2)", -rc.p1.coefficient(&m(&[(x1, 2)])), 0.24),
        ("2E[w^2] (x2^2)", -rc.p1.coefficient(&m(&[(x2, 2)])), 0.24),
    ];
    let mut misses = Vec::new();
    for (name, got, paper) in printed {
        if (got - paper).abs() > CASE1_TOL {
            misses.push(format!("{name} = {got:.6} vs printed {paper} (|diff| {:.6} > {CASE1_TOL})", (got - paper).abs()));
        }
    }
    let ok = exact && misses.is_empty() && ms < CONTOUR_RUNTIME_MS;
    r.record(
        1,
        ok,
        format!(
            "case 1 contour: closed-form coefficients {}, c = {c_val:.6}, build {ms:.3} ms (< {CONTOUR_RUNTIME_MS} ms); printed-value check: {}",
            if exact { "exact" } else { "MISMATCH" },
            if misses.is_empty() { "all within tolerance".into() } else { misses.join("; ") }
        ),
    );
}

fn figure_nesting(r: &mut Report) {
    let f = fixture("case1_contour").unwrap().load();
    let start = Instant::now();
    let rc = &f.scenario.contours().unwrap()[0];
    let spec = GridSpec {
        bounds: [(-1.0, 1.0), (-1.0, 1.0)],
        resolution: [201, 201],
    };
    let grids: Vec<_> = [0.1, 0.3, 0.5].iter().map(|d| contour_grid(rc, 0.0, *d, &spec).unwrap()).collect();
    let secs = start.elapsed().as_secs_f64();
    let counts: Vec<usize> = grids.iter().map(|g| g.member.iter().filter(|m| **m).count()).collect();
    let nested = grids
        .windows(2)
        .all(|w| w[0].member.iter().zip(&w[1].member).all(|(a, b)| !a || *b));
    let strict = counts.windows(2).all(|w| w[0] < w[1]);
    let mut disk_excluded = true;
    let mut ring_included = true;
    let g0 = &grids[0];
    for g in &grids {
        for j in 0..201 {
            for i in 0..201 {
                let (x, y) = (g0.axes[0].value(i), g0.axes[1].value(j));
                let k = g.index(i, j);
                if x.hypot(y) <= 0.3 && g.member[k] {
                    disk_excluded = false;
                }
                if x.abs().max(y.abs()) >= 0.9 && !g.member[k] {
                    ring_included = false;
                }
            }
        }
    }
    let ok = nested && strict && disk_excluded && ring_included && secs < GRID_RUNTIME_S;
    r.record(
        2,
        ok,
        format!(
            "member cells {:?} at delta 0.1/0.3/0.5, nested {nested}, strict {strict}, disk r=0.3 excluded {disk_excluded}, ring |x|inf>=0.9 included {ring_included}, {secs:.3} s (< {GRID_RUNTIME_S} s)",
            counts
        ),
    );
}

fn certificate_residuals(v: &Value) -> Vec<f64> {
    let mut out = Vec::new();
    for c in v["constraints"].as_array().unwrap() {
        for stage in ["risk", "mean"] {
            if let Some(r) = c[stage]["certificate"]["residual"].as_f64() {
                out.push(r);
            }
        }
    }
    out
}

struct VerdictRun {
    name: &'static str,
    kind: FixtureKind,
    safe: bool,
    stdout: String,
}

fn verdicts(r: &mut Report) -> (Vec<VerdictRun>, f64, usize) {
    let mut runs = Vec::new();
    let mut all_ok = true;
    let mut worst_residual = 0.0f64;
    let mut n_certs = 0;
    let mut details = Vec::new();
    for f in FIXTURES.iter().filter(|f| f.kind != FixtureKind::Contour) {
        let sub = if f.kind == FixtureKind::Tube { "verify-tube" } else { "verify" };
        let (code, stdout) = cli(&[sub, f.name], None);
        let v: Value = serde_json::from_str(&stdout).unwrap();
        let status = v["status"].as_str().unwrap().to_string();
        let ms = v["wall_time_ms"].as_f64().unwrap();
        let expected = serde_json::to_value(f.expected.unwrap()).unwrap();
        let safe = status == "SAFE";
        let ok = Value::String(status.clone()) == expected && code == if safe { 0 } else { 1 } && ms <= VERIFY_RUNTIME_MS;
        all_ok &= ok;
        for res in certificate_residuals(&v) {
            worst_residual = worst_residual.max(res);
            n_certs += 1;
        }
        details.push(format!("{} {status} exit {code} {ms:.1} ms", f.name.trim_end_matches(".json")));
        runs.push(VerdictRun {
            name: f.name,
            kind: f.kind,
            safe,
            stdout,
        });
    }
    r.record(3, all_ok, format!("{} (limit {VERIFY_RUNTIME_MS} ms each)", details.join(", ")));
    (runs, worst_residual, n_certs)
}

fn cantelli(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let case1 = fixture("case1_contour").unwrap().load();
    let case2 = fixture("case2_contour").unwrap().load();
    let lane = fixture("vehicle_lane_change").unwrap().load();
    let mut checked = 0;
    let mut violations = Vec::new();
    let mut seed = 0u64;
    let mut nontrivial = 0;
    let per = [67, 67, 66];
    for (which, quota) in per.iter().enumerate() {
        let mut done = 0;
        while done < *quota {
            // polar offsets from the obstacle centre so most points fall in the uncertain band
            let (rad, ang) = (rng.gen_range(0.2..0.7), rng.gen_range(0.0..std::f64::consts::TAU));
            let near = |c: [f64; 2]| [c[0] + rad * f64::cos(ang), c[1] + rad * f64::sin(ang)];
            let (s, ci, x, t) = match which {
                0 => (&case1, 0, near([0.0, 0.0]), 0.0),
                1 => {
                    let t: f64 = rng.gen_range(0.0..2.0);
                    // obstacle mean path: w3 ~ Beta(3, 3) has mean 0.5
                    (&case2, 0, near([1.8 * t - 1.0, 1.8 * t - 1.0 + 0.05]), t)
                }
                _ => {
                    let t: f64 = rng.gen_range(0.0..1.0);
                    let ci = rng.gen_range(0..2);
                    let c = if ci == 0 { [0.4 + 0.8 * t, 1.0] } else { [0.6 + 2.0 * t, 0.0] };
                    (&lane, ci, near(c), t)
                }
            };
            let c = &s.scenario.constraints[ci];
            let b = build_contour(c).unwrap().risk_bound(&x, t).unwrap();
            if !b.is_finite() {
                continue;
            }
            seed += 1;
            let e = estimate_risk(c, &x, t, MC_SAMPLES, seed).unwrap();
            if e.mean > b + 3.0 * e.stderr {
                violations.push(format!("{} at {x:?}, t {t}: {} > {b}", c.name, e.mean));
            }
            if e.mean > 0.0 {
                nontrivial += 1;
            }
            done += 1;
            checked += 1;
        }
    }
    r.record(
        4,
        violations.is_empty() && checked == CANTELLI_POINTS,
        format!(
            "{checked} points with finite bound ({nontrivial} with nonzero estimate), {MC_SAMPLES} samples each, {} violations{}",
            violations.len(),
            if violations.is_empty() { String::new() } else { format!(": {}", violations.join("; ")) }
        ),
    );
}

fn mc_on_safe(r: &mut Report, runs: &[VerdictRun]) {
    let samples = MC_SAMPLES.to_string();
    let mut all_ok = true;
    let mut details = Vec::new();
    for run in runs.iter().filter(|r| r.safe) {
        let (code, stdout) = cli(&["mc-check", run.name, "--times", "20", "--samples", &samples, "--seed", "1"], None);
        let v: Value = serde_json::from_str(&stdout).unwrap();
        let delta = fixture(run.name).unwrap().load().scenario.delta;
        let est = v.as_array().unwrap();
        let worst = est.iter().map(|e| e["mean"].as_f64().unwrap()).fold(0.0, f64::max);
        let ok = code == 0 && est.iter().all(|e| e["mean"].as_f64().unwrap() <= delta + 3.0 * e["stderr"].as_f64().unwrap());
        all_ok &= ok;
        details.push(format!("{} {} estimates, max {worst:.4} (delta {delta})", run.name.trim_end_matches(".json"), est.len()));
    }
    r.record(5, all_ok, format!("every estimate <= delta + 3 stderr: {}", details.join(", ")));
}

fn univariate(coeffs: &[f64]) -> Polynomial {
    Polynomial::from_terms(coeffs.iter().enumerate().map(|(k, c)| (Monomial::pow_of(VarId::Time, k as u32), *c)))
}

fn dense_min(p: &Polynomial, (a, b): (f64, f64)) -> f64 {
    let c = p.univariate_coeffs().unwrap();
    (0..=20_000)
        .map(|k| {
            let t = a + (b - a) * k as f64 / 20_000.0;
            c.iter().rev().fold(0.0, |acc, ck| acc * t + ck)
        })
        .fold(f64::INFINITY, f64::min)
}

fn completeness() -> (usize, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(2718);
    let t = Polynomial::var(VarId::Time);
    let (mut certified, mut infeasible, mut wrong) = (0, 0, 0);
    for positive in [true, false] {
        for _ in 0..100 {
            let deg = rng.gen_range(1..=6);
            let coeffs: Vec<f64> = (0..=deg).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = rng.gen_range(-1.0..0.5);
            let dom = (a, a + rng.gen_range(0.5..2.0));
            let q = univariate(&coeffs);
            let margin: f64 = rng.gen_range(0.01..0.5);
            let p = &q + &Polynomial::constant(if positive { margin } else { -margin } - dense_min(&q, dom));
            let m = dense_min(&p, dom);
            assert!(if positive { m >= 0.01 - 1e-12 } else { m <= -0.01 + 1e-12 });
            let gen = &(&t - &Polynomial::constant(dom.0)) * &(&Polynomial::constant(dom.1) - &t);
            let prob = SosProblem::new(p, vec![gen], vec![VarId::Time]);
            match (certify(&prob, &SdpOptions::default()).unwrap(), positive) {
                (SosOutcome::Certified(c), true) if c.residual <= EPS_RES => certified += 1,
                (SosOutcome::Infeasible { .. }, false) => infeasible += 1,
                _ => wrong += 1,
            }
        }
    }
    (certified, infeasible, wrong)
}

fn random_sdps() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(1618);
    let mut solved = 0;
    for k in 0..500 {
        let nblocks = rng.gen_range(1..=3);
        let blocks: Vec<usize> = (0..nblocks).map(|_| rng.gen_range(1..=6)).collect();
        let x0: Vec<DMatrix<f64>> = blocks
            .iter()
            .map(|&n| {
                let rank = if k % 4 == 0 { rng.gen_range(1..=n) } else { n };
                let b = DMatrix::from_fn(n, rank, |_, _| rng.gen_range(-1.0..1.0));
                &b * b.transpose()
            })
            .collect();
        let dof: usize = blocks.iter().map(|n| n * (n + 1) / 2).sum();
        let equalities = (0..rng.gen_range(1..=dof.min(20)))
            .map(|_| Equality {
                entries: (0..rng.gen_range(1..=5))
                    .map(|_| {
                        let block = rng.gen_range(0..nblocks);
                        Entry {
                            block,
                            row: rng.gen_range(0..blocks[block]),
                            col: rng.gen_range(0..blocks[block]),
                            value: rng.gen_range(-2.0..2.0),
                        }
                    })
                    .collect(),
                rhs: 0.0,
            })
            .collect();
        let mut p = SdpFeasibility { blocks, equalities };
        let b = p.apply(&x0);
        p.equalities.iter_mut().zip(b).for_each(|(e, bk)| e.rhs = bk);
        let sol = sdp::solve(&p, &SdpOptions::default()).unwrap();
        if sol.status != SdpStatus::Feasible {
            continue;
        }
        let x = sol.x.unwrap();
        let bmax = p.equalities.iter().fold(1.0f64, |a, e| a.max(e.rhs.abs()));
        let psd = x.iter().all(|m| sdp::min_eigenvalue(m).unwrap() >= -1e-9);
        if p.residual(&x) <= 1e-9 * bmax && psd {
            solved += 1;
        }
    }
    solved
}

fn sos_sdp_soundness(r: &mut Report, worst_residual: f64, n_certs: usize) {
    let (certified, infeasible, wrong) = completeness();
    let solved = random_sdps();
    let ok = certified == 100 && infeasible == 100 && wrong == 0 && solved == 500 && worst_residual <= EPS_RES;
    r.record(
        6,
        ok,
        format!(
            "completeness {certified}/100 certified, {infeasible}/100 infeasible, {wrong} misclassified; random SDPs {solved}/500 within tolerance; {n_certs} verdict certificates, max residual {worst_residual:.3e} (<= {EPS_RES:e})"
        ),
    );
}

fn jensen(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = f64::INFINITY;
    let mut evaluated = 0;
    for f in FIXTURES {
        let s = f.load();
        let (t0, tf) = s.scenario.horizon;
        for rc in s.scenario.contours().unwrap() {
            for _ in 0..JENSEN_POINTS {
                let x: Vec<f64> = (0..s.scenario.state_dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let (p1, p2) = rc.moments_at(&x, rng.gen_range(t0..=tf)).unwrap();
                worst = worst.min(p1 - p2 * p2);
                evaluated += 1;
            }
        }
    }
    r.record(
        7,
        worst >= -JENSEN_TOL,
        format!(
            "{evaluated} points ({JENSEN_POINTS} per contour of {} fixtures), min(P1 - P2^2) = {worst:.3e} (>= -{JENSEN_TOL:e})",
            FIXTURES.len()
        ),
    );
}

fn strip_timing(s: &str) -> String {
    s.lines().filter(|l| !l.trim_start().starts_with("\"wall_time_ms\"")).collect::<Vec<_>>().join("\n")
}

fn determinism(r: &mut Report, runs: &[VerdictRun]) {
    let mut mismatches = Vec::new();
    for run in runs {
        let sub = if run.kind == FixtureKind::Tube { "verify-tube" } else { "verify" };
        for threads in ["1", "3"] {
            let (_, again) = cli(&[sub, run.name], Some(threads));
            if strip_timing(&again) != strip_timing(&run.stdout) {
                mismatches.push(format!("{} with {threads} threads", run.name));
            }
        }
    }
    r.record(
        8,
        mismatches.is_empty(),
        format!(
            "{} fixtures x 3 runs (default, 1 and 3 threads): {}",
            runs.len(),
            if mismatches.is_empty() { "byte-identical apart from wall_time_ms".to_string() } else { mismatches.join(", ") }
        ),
    );
}

fn main() {
    let mut r = Report {
        lines: Vec::new(),
    };
    case1_coefficients(&mut r);
    figure_nesting(&mut r);
    let (runs, worst_residual, n_certs) = verdicts(&mut r);
    cantelli(&mut r);
    mc_on_safe(&mut r, &runs);
    sos_sdp_soundness(&mut r, worst_residual, n_certs);
    jensen(&mut r);
    determinism(&mut r, &runs);
    let failed: Vec<&String> = r.lines.iter().filter(|(ok, _)| !ok).map(|(_, l)| l).collect();
    let passed = r.lines.iter().filter(|(ok, _)| *ok).count();
    println!("acceptance: {passed}/{} criteria PASS", r.lines.len());
    assert!(failed.is_empty(), "{} criteria failed:\n{}", failed.len(), failed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("\n"));
}

//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line with
//! its measurements and wall time, then asserts.
//!
//! The tests hold a shared lock so wall times are not inflated by sibling
//! tests on the same cores. Criteria 4, 5 and 6 share one pipeline run per
//! seed.

use graphmark::attacks::{c_prune_from_drifts, AttackKind, AttackSpec};
use graphmark::calibration::{
    alpha_bound, beta_max, binomial_tail_half, collision_probability, fit_pl_constant, monte_carlo_null_with,
    sample_collision_rate, tau_from_eps, AuditThresholds, CalibrationError, CalibrationReport, ImperceptConstants,
};
use graphmark::graph::spectrum;
use graphmark::hardness::{brute_force_hitting_set, brute_force_wm_remove, reduce_hitting_set, HittingSetInstance};
use graphmark::io::to_canonical_json;
use graphmark::nn::tape::{SparseOp, Tape, Var};
use graphmark::pipeline::{run_pipeline, PipelineConfig, PipelineOutcome};
use graphmark::rng::rng_for;
use graphmark::watermark::{decode_bit, drift, verify};
use graphmark::{Exec, Graph};
use rand::Rng;
use std::io::Write;
use std::rc::Rc;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn conclude(n: usize, ok: bool, elapsed: Duration, limit: Duration, detail: &str) {
    let in_time = elapsed < limit;
    let pass = ok && in_time;
    // Straight to the stderr handle so the line survives output capture.
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n}: {} {detail} [{:.2}s, limit {}s{}]",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs(),
        if in_time { "" } else { ", over time" }
    );
    assert!(pass, "criterion {n} failed: {detail}");
}

// Criterion 1

/// Characteristic polynomial `det(xI - A)` of an integer matrix by
/// Faddeev-LeVerrier, exact in integers. Coefficients from `x^n` down.
fn char_poly(a: &[Vec<i64>]) -> Vec<i64> {
    let n = a.len();
    let mut coeffs = vec![1i64];
    let mut m = vec![vec![0i64; n]; n];
    for k in 1..=n {
        // M_k = A M_{k-1} + c_{k-1} I
        let mut next = vec![vec![0i64; n]; n];
        for i in 0..n {
            for j in 0..n {
                next[i][j] = (0..n).map(|l| a[i][l] * m[l][j]).sum::<i64>();
            }
            next[i][i] += coeffs[k - 1];
        }
        m = next;
        let am_trace: i64 = (0..n).map(|i| (0..n).map(|l| a[i][l] * m[l][i]).sum::<i64>()).sum();
        assert_eq!(am_trace % k as i64, 0, "Faddeev-LeVerrier division must be exact");
        coeffs.push(-am_trace / k as i64);
    }
    coeffs
}

fn poly_from_roots(roots: &[f64]) -> Vec<f64> {
    let mut c = vec![1.0];
    for &r in roots {
        let mut next = vec![0.0; c.len() + 1];
        for (i, &x) in c.iter().enumerate() {
            next[i] += x;
            next[i + 1] -= r * x;
        }
        c = next;
    }
    c
}

fn integer_laplacian(g: &Graph) -> Vec<Vec<i64>> {
    let n = g.node_count();
    let mut l = vec![vec![0i64; n]; n];
    for &(u, v) in g.edges() {
        l[u][v] -= 1;
        l[v][u] -= 1;
        l[u][u] += 1;
        l[v][v] += 1;
    }
    l
}

#[test]
fn criterion_01_spectral_correctness() {
    let _g = serial();
    let t0 = Instant::now();
    let mut failures = Vec::new();

    for n in 2..=8 {
        let l2 = spectrum(&Graph::complete(n).unwrap(), 1e-6).unwrap().lambda2;
        if (l2 - n as f64).abs() > 1e-6 {
            failures.push(format!("K_{n}: lambda2 = {l2}"));
        }
    }
    let disconnected = [
        Graph::empty(2).unwrap(),
        Graph::empty(6).unwrap(),
        Graph::complete(3).unwrap().disjoint_union(&Graph::complete(2).unwrap()),
        Graph::path(4).unwrap().disjoint_union(&Graph::cycle(5).unwrap()),
        Graph::complete(8).unwrap().disjoint_union(&Graph::empty(1).unwrap()),
    ];
    for g in &disconnected {
        let l2 = spectrum(g, 1e-6).unwrap().lambda2;
        if l2.abs() > 1e-6 {
            failures.push(format!("disconnected graph on {} nodes: lambda2 = {l2}", g.node_count()));
        }
    }

    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for n in 1..=5usize {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
        for mask in 0u32..1 << pairs.len() {
            let edges: Vec<(usize, usize)> = pairs.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &e)| e).collect();
            let g = Graph::new(n, edges).unwrap();
            let exact = char_poly(&integer_laplacian(&g));
            let eig = spectrum(&g, 1e-6).unwrap().eigenvalues;
            let approx = poly_from_roots(&eig);
            for (a, e) in approx.iter().zip(&exact) {
                let err = (a - *e as f64).abs() / (1.0 + (*e as f64).abs());
                worst = worst.max(err);
            }
            checked += 1;
        }
    }
    if worst > 1e-6 {
        failures.push(format!("char-poly mismatch, worst relative coefficient error {worst:e}"));
    }

    let detail = format!(
        "K_2..K_8 and {} disconnected graphs; {checked} labelled graphs with n <= 5, worst coefficient error {worst:.1e}{}",
        disconnected.len(),
        if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
    );
    conclude(1, failures.is_empty(), t0.elapsed(), Duration::from_secs(5), &detail);
}

// Criterion 2

#[test]
fn criterion_02_threshold_calibration() {
    let _g = serial();
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let (mut cells, mut infeasible) = (0, Vec::new());
    for m in [16usize, 64, 128, 256] {
        for alpha in [1e-3f64, 1e-6] {
            for rho in [0.0, 7.6e-4] {
                // The closed form evaluated independently of the solver.
                let c = (4.0f64 * rho).min(0.5);
                let closed = ((1.0 / alpha).ln() / (2.0 * (1.0 - c) * m as f64)).sqrt();
                match AuditThresholds::calibrate(m, alpha, rho) {
                    Ok(th) => {
                        let bound = alpha_bound(m, th.eps_err, rho);
                        let tau_ok = th.tau == tau_from_eps(m, th.eps_err) && th.tau == (m as f64 * (1.0 - th.eps_err)).ceil() as usize;
                        if bound > alpha || !tau_ok || (th.eps_err - closed).abs() > 1e-12 {
                            failures.push(format!("m={m} alpha={alpha:e} rho={rho:e}: bound {bound:e}, tau {}", th.tau));
                        }
                    }
                    // Chance-level tolerance: refused by contract, and the bound
                    // at the refused value still holds.
                    Err(CalibrationError::Infeasible(eps)) if closed >= 0.5 && alpha_bound(m, eps, rho) <= alpha => {
                        infeasible.push(format!("m={m} alpha={alpha:e} rho={rho:e} eps={eps:.4}"));
                    }
                    Err(e) => failures.push(format!("m={m} alpha={alpha:e} rho={rho:e}: {e}")),
                }
                cells += 1;
            }
        }
    }

    let report = CalibrationReport::new(128, 1e-6, 7.6e-4, true).unwrap();
    let json = to_canonical_json(&report).unwrap();
    let r = report.reference.as_ref().expect("reference comparison present");
    let both_reported = json.contains("0.2656") && json.contains("\"reference_tau\": 94") && json.contains("\"computed_tau\": 99");
    if !(r.discrepancy && r.computed_tau == 99 && (r.computed_eps_err - 0.2327).abs() < 5e-4 && both_reported) {
        failures.push(format!("reference comparison: {json}"));
    }
    let detail = format!(
        "{cells} grid cells, bound <= alpha wherever eps < 0.5, refused as infeasible: [{}]; reference eps 0.2656 / tau 94 vs computed eps {:.5} / tau {}, discrepancy flagged {}",
        infeasible.join(", "),
        r.computed_eps_err,
        r.computed_tau,
        r.discrepancy
    );
    conclude(2, failures.is_empty(), t0.elapsed(), Duration::from_secs(1), &format!("{detail}{}", failures.join("; ")));
}

// Criterion 3

/// Exact upper tail `P[Bin(m, 1/2) >= tau]` by Pascal's triangle in `f64`,
/// independent of the library's tail routine.
fn pascal_tail_half(m: usize, tau: usize) -> f64 {
    let mut row = vec![1.0f64];
    for _ in 0..m {
        let mut next = vec![0.5; row.len() + 1];
        next[0] = 0.5 * row[0];
        for i in 1..row.len() {
            next[i] = 0.5 * (row[i - 1] + row[i]);
        }
        next[row.len()] = 0.5 * row[row.len() - 1];
        row = next;
    }
    row[tau.min(m + 1)..].iter().sum()
}

#[test]
fn criterion_03_monte_carlo_null() {
    let _g = serial();
    let t0 = Instant::now();
    let m = 128;
    let trials = 1_000_000u64;
    let tau = AuditThresholds::calibrate(m, 1e-6, 0.0).unwrap().tau;
    let exact = pascal_tail_half(m, tau);
    let measured = monte_carlo_null_with(Exec::default(), m, tau, trials, 0x5eed);
    let sd = (exact * (1.0 - exact) / trials as f64).sqrt();
    let main_ok = measured <= exact + 3.0 * sd;

    // A non-vacuous companion at a threshold with a visible tail.
    let tau_mid = 70;
    let exact_mid = pascal_tail_half(m, tau_mid);
    let measured_mid = monte_carlo_null_with(Exec::default(), m, tau_mid, trials, 0x5eed + 1);
    let sd_mid = (exact_mid * (1.0 - exact_mid) / trials as f64).sqrt();
    let mid_ok = (measured_mid - exact_mid).abs() <= 3.0 * sd_mid;
    let lib_ok = (binomial_tail_half(m, tau) / exact - 1.0).abs() < 1e-9;

    let detail = format!(
        "tau={tau}: measured {measured:e} vs exact {exact:.4e} (+3sd {:.3e}); tau={tau_mid}: measured {measured_mid:.5} vs exact {exact_mid:.5} (sd {sd_mid:.1e}); library tail agrees {lib_ok}",
        exact + 3.0 * sd
    );
    conclude(3, main_ok && mid_ok && lib_ok, t0.elapsed(), Duration::from_secs(60), &detail);
}

// Criteria 4, 5 and 6 share these runs.

const SEEDS: [u64; 3] = [0, 1, 2];

struct SharedRuns {
    outcomes: Vec<PipelineOutcome>,
    elapsed: Duration,
}

fn shared_runs() -> &'static SharedRuns {
    static RUNS: OnceLock<SharedRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t0 = Instant::now();
        let outcomes = SEEDS
            .iter()
            .map(|&seed| {
                let mut cfg = PipelineConfig::new(seed);
                cfg.attacks = [AttackKind::Prune, AttackKind::Quantize, AttackKind::Kd, AttackKind::KdWm]
                    .into_iter()
                    .map(|k| AttackSpec { seed, ..AttackSpec::new(k) })
                    .collect();
                run_pipeline(&cfg, None).expect("pipeline run")
            })
            .collect();
        SharedRuns { outcomes, elapsed: t0.elapsed() }
    })
}

#[test]
fn criterion_04_end_to_end_watermarking() {
    let _g = serial();
    let runs = shared_runs();
    let mut ok = true;
    let mut parts = Vec::new();
    for o in &runs.outcomes {
        let s = &o.summary;
        let drop = s.accuracy_drop_pp.expect("control run enabled");
        let seed_ok = s.test_accuracy >= 0.9 && s.wm_acc == 1.0 && s.m == 128 && drop <= 2.0;
        ok &= seed_ok;
        parts.push(format!(
            "seed {}: test acc {:.3}, WM-ACC {:.4} ({}/{}), drop {:+.1}pp, {:?}, control {:?}",
            s.seed,
            s.test_accuracy,
            s.wm_acc,
            o.report.match_count,
            s.m,
            drop,
            s.decision,
            s.control_decision.unwrap()
        ));
    }
    conclude(4, ok, runs.elapsed, Duration::from_secs(600), &parts.join("; "));
}

#[test]
fn criterion_05_sign_preservation() {
    let _g = serial();
    let runs = shared_runs();
    let t0 = Instant::now();
    let trials = 100;
    let (mut t_is_m, mut bits_kept, mut total) = (0usize, 0usize, 0usize);
    let mut parts = Vec::new();
    for o in &runs.outcomes {
        let kappa = o.report.kappa;
        let base_bits: Vec<u8> = o.report.scores.iter().map(|&s| decode_bit(s)).collect();
        let theta = o.model.flatten();
        let mut rng = rng_for(o.summary.seed, &[0x5197]);
        let (mut seed_full, mut seed_kept) = (0, 0);
        let mut max_ratio = 0.0f64;
        for _ in 0..trials {
            let dir: Vec<f64> = (0..theta.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let target = kappa * rng.gen_range(0.05..0.95);
            let perturbed = |s: f64| {
                let mut m = o.model.clone();
                let flat: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + s * d).collect();
                m.assign_flat(&flat).unwrap();
                m
            };
            let probe = 1e-4;
            let g0 = drift(&o.model, &perturbed(probe), &o.bundle).unwrap();
            let mut scale = if g0 > 0.0 { probe * target / g0 } else { probe };
            let mut edited = perturbed(scale);
            let mut gamma = drift(&o.model, &edited, &o.bundle).unwrap();
            while gamma >= kappa {
                scale *= 0.5;
                edited = perturbed(scale);
                gamma = drift(&o.model, &edited, &o.bundle).unwrap();
            }
            max_ratio = max_ratio.max(gamma / kappa);
            let r = verify(&edited, &o.bundle, &o.thresholds).unwrap();
            seed_full += usize::from(r.match_count == r.m);
            seed_kept += usize::from(r.decoded_bits == base_bits);
        }
        t_is_m += seed_full;
        bits_kept += seed_kept;
        total += trials;
        parts.push(format!(
            "seed {}: kappa {:.2e}, max gamma/kappa {:.3}, decoded bits unchanged {seed_kept}/{trials}, T = m in {seed_full}/{trials} (unperturbed T = {})",
            o.summary.seed, kappa, max_ratio, o.report.match_count
        ));
    }
    let detail = format!("T = m in {t_is_m}/{total}, bits preserved in {bits_kept}/{total}; {}", parts.join("; "));
    conclude(5, t_is_m == total && bits_kept == total, t0.elapsed(), Duration::from_secs(120), &detail);
}

#[test]
fn criterion_06_edit_robustness_ordering() {
    let _g = serial();
    let runs = shared_runs();
    let (mut ptq_ge_prune, mut kdwm_gt_kd) = (0, 0);
    let mut parts = Vec::new();
    for o in &runs.outcomes {
        let acc = |k: AttackKind| o.attacks.iter().find(|a| a.spec.kind == k).expect("attack ran").report.wm_acc;
        let (pr, q, kd, kdwm) = (acc(AttackKind::Prune), acc(AttackKind::Quantize), acc(AttackKind::Kd), acc(AttackKind::KdWm));
        ptq_ge_prune += usize::from(q >= pr);
        kdwm_gt_kd += usize::from(kdwm > kd);
        parts.push(format!(
            "seed {}: PTQ-8 {q:.3} vs prune-50% {pr:.3}, KD+WM {kdwm:.3} vs KD {kd:.3}",
            o.summary.seed
        ));
    }
    let detail = format!(
        "PTQ >= prune in {ptq_ge_prune}/3, KD+WM > KD in {kdwm_gt_kd}/3; {}",
        parts.join("; ")
    );
    conclude(6, ptq_ge_prune >= 2 && kdwm_gt_kd == 3, runs.elapsed, Duration::from_secs(900), &detail);
}

// Criterion 7

#[test]
fn criterion_07_budget_arithmetic() {
    let _g = serial();
    let t0 = Instant::now();
    let c = c_prune_from_drifts(&[(0.2, 0.11), (0.4, 0.19), (0.5, 0.27)]);
    let detail = format!("c_prune = {c:.5} (target 0.3818 +/- 0.0005)");
    conclude(7, (c - 0.3818).abs() <= 5e-4, t0.elapsed(), Duration::from_secs(1), &detail);
}

// Criterion 8

#[test]
fn criterion_08_uniqueness() {
    let _g = serial();
    let t0 = Instant::now();
    let (p, m, pairs) = (0.3, 16usize, 100_000u64);
    let oracle = (1.0f64 - 2.0 * p * (1.0 - p)).powi(m as i32);
    let measured = sample_collision_rate(Exec::default(), p, m, pairs, 0xc011);
    let sd = (oracle * (1.0 - oracle) / pairs as f64).sqrt();
    let lib_ok = (collision_probability(p, m) - oracle).abs() < 1e-15;
    let detail = format!("measured {measured:.6} vs (1-2p(1-p))^m = {oracle:.6}, sd {sd:.1e}, library formula agrees {lib_ok}");
    conclude(8, (measured - oracle).abs() <= 3.0 * sd && lib_ok, t0.elapsed(), Duration::from_secs(30), &detail);
}

// Criterion 9

fn agrees(hs: &HittingSetInstance) -> bool {
    let hs_yes = brute_force_hitting_set(hs).unwrap().is_some_and(|k| k <= hs.budget);
    let inst = reduce_hitting_set(hs, 1.0).unwrap();
    let wm_yes = brute_force_wm_remove(&inst).unwrap().is_some();
    hs_yes == wm_yes
}

#[test]
fn criterion_09_reduction_equivalence() {
    let _g = serial();
    let t0 = Instant::now();
    let (mut exhaustive, mut random, mut disagreements, mut yes) = (0usize, 0usize, 0usize, 0usize);
    for u in 1..=3usize {
        let subsets: Vec<Vec<usize>> = (1u32..1 << u).map(|s| (0..u).filter(|e| s >> e & 1 == 1).collect()).collect();
        for q in 0..=3u32 {
            for code in 0..subsets.len().pow(q) {
                let mut c = code;
                let family: Vec<Vec<usize>> = (0..q)
                    .map(|_| {
                        let s = subsets[c % subsets.len()].clone();
                        c /= subsets.len();
                        s
                    })
                    .collect();
                for budget in 0..=q as usize {
                    let hs = HittingSetInstance::new(u, family.clone(), budget).unwrap();
                    disagreements += usize::from(!agrees(&hs));
                    yes += usize::from(brute_force_hitting_set(&hs).unwrap().is_some_and(|k| k <= budget));
                    exhaustive += 1;
                }
            }
        }
    }
    let mut rng = rng_for(9, &[]);
    for _ in 0..500 {
        let u = rng.gen_range(1..=6usize);
        let q = rng.gen_range(1..=8usize);
        let family: Vec<Vec<usize>> = (0..q)
            .map(|_| {
                let mut s: Vec<usize> = (0..u).filter(|_| rng.gen_bool(0.4)).collect();
                if s.is_empty() {
                    s.push(rng.gen_range(0..u));
                }
                s
            })
            .collect();
        let budget = rng.gen_range(0..=q);
        let hs = HittingSetInstance::new(u, family, budget).unwrap();
        disagreements += usize::from(!agrees(&hs));
        random += 1;
    }
    let detail = format!("{exhaustive} exhaustive ({yes} yes) and {random} random instances, {disagreements} disagreements");
    conclude(9, disagreements == 0, t0.elapsed(), Duration::from_secs(60), &detail);
}

// Criterion 10

struct Input {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

fn input(rng: &mut impl Rng, rows: usize, cols: usize) -> Input {
    Input { rows, cols, values: (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect() }
}

/// Largest relative error, `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖, 1e-6)`,
/// between the tape gradient and central differences with step `1e-5`.
fn fd_error(inputs: &[Input], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Vec<f64>]| -> (Tape, Vec<Var>, Var) {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().zip(vals).map(|(i, v)| t.leaf(i.rows, i.cols, v.clone()).unwrap()).collect();
        let out = build(&mut t, &vars);
        (t, vars, out)
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|i| i.values.clone()).collect();
    let (tape, vars, out) = eval(&base);
    let adj = tape.backward(out).unwrap();
    let h = 1e-5;
    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    for (k, v) in vars.iter().enumerate() {
        let analytic = adj.get_or_zeros(*v, base[k].len());
        for j in 0..base[k].len() {
            let mut plus = base.clone();
            plus[k][j] += h;
            let mut minus = base.clone();
            minus[k][j] -= h;
            let (tp, _, op) = eval(&plus);
            let (tm, _, om) = eval(&minus);
            let fd = (tp.scalar(op) - tm.scalar(om)) / (2.0 * h);
            diff += (analytic[j] - fd).powi(2);
            na += analytic[j].powi(2);
            nf += fd.powi(2);
        }
    }
    diff.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-6)
}

/// `u^T Y w` with fixed random `u` and `w`, reducing a matrix output to a scalar.
fn contract(t: &mut Tape, y: Var, u: &[f64], w: &[f64]) -> Var {
    let (r, c) = t.shape(y);
    let ul = t.leaf(1, r, u.to_vec()).unwrap();
    let wl = t.leaf(c, 1, w.to_vec()).unwrap();
    let uy = t.matmul(ul, y).unwrap();
    t.matmul(uy, wl).unwrap()
}

fn weights(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn away_from_kink(rng: &mut impl Rng, rows: usize, cols: usize) -> Input {
    let values = (0..rows * cols)
        .map(|_| loop {
            let x: f64 = rng.gen_range(-1.5..1.5);
            if x.abs() > 0.05 {
                break x;
            }
        })
        .collect();
    Input { rows, cols, values }
}

#[test]
fn criterion_10_gradient_integrity() {
    let _g = serial();
    let t0 = Instant::now();
    let cases = 60;
    let mut rng = rng_for(10, &[]);
    let mut results: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match results.iter_mut().find(|(n, _)| *n == name) {
        Some((_, e)) => *e = e.max(err),
        None => results.push((name, err)),
    };

    for _ in 0..cases {
        let (r, k, c) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=5));
        let (u, w) = (weights(&mut rng, r), weights(&mut rng, c));

        let ins = [input(&mut rng, r, k), input(&mut rng, k, c)];
        record("matmul", fd_error(&ins, &|t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            contract(t, y, &u, &w)
        }));

        let ins = [input(&mut rng, r, c), input(&mut rng, 1, c)];
        record("add_bias", fd_error(&ins, &|t, v| {
            let y = t.add_bias(v[0], v[1]).unwrap();
            contract(t, y, &u, &w)
        }));

        let ins = [input(&mut rng, r, c), input(&mut rng, r, c)];
        record("add", fd_error(&ins, &|t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            contract(t, y, &u, &w)
        }));

        let factor = rng.gen_range(-2.0..2.0);
        let ins = [input(&mut rng, r, c)];
        record("scale", fd_error(&ins, &|t, v| {
            let y = t.scale(v[0], factor).unwrap();
            contract(t, y, &u, &w)
        }));

        let ins = [away_from_kink(&mut rng, r, c)];
        record("relu", fd_error(&ins, &|t, v| {
            let y = t.relu(v[0]).unwrap();
            contract(t, y, &u, &w)
        }));

        let ins = [input(&mut rng, r, c)];
        record("sigmoid", fd_error(&ins, &|t, v| {
            let y = t.sigmoid(v[0]).unwrap();
            contract(t, y, &u, &w)
        }));

        let entries: Vec<(usize, usize, f64)> =
            (0..rng.gen_range(1..=2 * r)).map(|_| (rng.gen_range(0..r), rng.gen_range(0..r), rng.gen_range(-1.0..1.0))).collect();
        let op = Rc::new(SparseOp { n: r, entries });
        let ins = [input(&mut rng, r, c)];
        record("propagate", fd_error(&ins, &|t, v| {
            let y = t.propagate(v[0], op.clone()).unwrap();
            contract(t, y, &u, &w)
        }));

        let ins = [input(&mut rng, r, c)];
        record("mean_rows", fd_error(&ins, &|t, v| {
            let y = t.mean_rows(v[0]).unwrap();
            contract(t, y, &[1.0], &w)
        }));

        let classes = rng.gen_range(2..=5);
        let label = rng.gen_range(0..classes);
        let ins = [input(&mut rng, 1, classes)];
        record("softmax_cross_entropy", fd_error(&ins, &|t, v| t.softmax_cross_entropy(v[0], label).unwrap()));

        let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let temperature = [0.5, 1.0, 2.0, 4.0][rng.gen_range(0..4)];
        let ins = [input(&mut rng, 1, classes)];
        record("tempered_kl", fd_error(&ins, &|t, v| t.tempered_kl(v[0], &probs, temperature).unwrap()));

        let target = rng.gen_range(0.0..1.0);
        let ins = [input(&mut rng, 1, 1)];
        record("squared_error", fd_error(&ins, &|t, v| t.squared_error(v[0], target).unwrap()));

        let count = rng.gen_range(1..=5);
        let ins: Vec<Input> = (0..count).map(|_| input(&mut rng, 1, 1)).collect();
        let coef = weights(&mut rng, count);
        record("sum_scalars", fd_error(&ins, &|t, v| {
            let scaled: Vec<Var> = v.iter().zip(&coef).map(|(&x, &a)| t.scale(x, a).unwrap()).collect();
            t.sum_scalars(&scaled).unwrap()
        }));
    }

    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = format!(
        "{} ops x {cases} cases, worst relative error {worst:.1e} ({})",
        results.len(),
        results.iter().map(|(n, e)| format!("{n} {e:.0e}")).collect::<Vec<_>>().join(", ")
    );
    conclude(10, worst < 1e-4, t0.elapsed(), Duration::from_secs(120), &detail);
}

// Criterion 11

/// `(‖∇f‖², f − f*)` for `f(w) = ½ Σ h_i w_i²` at random points, with Hessian
/// eigenvalues in `[mu, 1.05 mu]`.
fn quadratic_pairs(mu: f64, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = rng_for(seed, &[]);
    let h: Vec<f64> = (0..10).map(|i| mu * (1.0 + 0.05 * i as f64 / 9.0)).collect();
    (0..400)
        .map(|_| {
            let w: Vec<f64> = (0..h.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let grad_sq: f64 = h.iter().zip(&w).map(|(hi, wi)| (hi * wi).powi(2)).sum();
            let gap: f64 = h.iter().zip(&w).map(|(hi, wi)| 0.5 * hi * wi * wi).sum();
            (grad_sq, gap)
        })
        .collect()
}

#[test]
fn criterion_11_imperceptibility_constants() {
    let _g = serial();
    let t0 = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, mu) in [0.1, 0.5, 1.0].into_iter().enumerate() {
        let fit = fit_pl_constant(&quadratic_pairs(mu, 11 + i as u64), 7).unwrap();
        let rel = (fit.mu_pl - mu).abs() / mu;
        ok &= rel <= 0.1;
        parts.push(format!("mu {mu}: fit {:.4} ({:.1}%)", fit.mu_pl, 100.0 * rel));
    }
    let bm = beta_max(0.85, 0.012, 1.12e3).unwrap();
    let oracle = (2.0f64 * 0.85 * 0.012).sqrt() / 1.12e3;
    let admits = ImperceptConstants::new(0.85, 1.12e3, 0.012).unwrap().admits(9.5e-5);
    ok &= (bm - oracle).abs() <= 1e-12 && (bm - 1.275e-4).abs() <= 5e-7 && admits;
    parts.push(format!("beta_max {bm:.4e} (oracle {oracle:.4e}), 9.5e-5 admitted {admits}"));
    conclude(11, ok, t0.elapsed(), Duration::from_secs(30), &parts.join("; "));
}

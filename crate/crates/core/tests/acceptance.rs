//! Acceptance suite. Runs sequentially so the wall-clock limits are meaningful, prints one
//! PASS/FAIL line per criterion and exits nonzero if any fails.

use std::time::{Duration, Instant};

use mkv_fbsde::catalog::Scenario;
use mkv_fbsde::checks::oracle_error;
use mkv_fbsde::control::StateCost;
use mkv_fbsde::control::{identification_check, ProblemKind};
use mkv_fbsde::fbsde::{self, InitialLaw, SolverParams};
use mkv_fbsde::grid::TimeGrid;
use mkv_fbsde::lions::{self, ItoSteps, ParticleFlow};
use mkv_fbsde::lq_oracle::{solve_riccati, LqKind, LqSpec};
use mkv_fbsde::master::master_residual;
use mkv_fbsde::measure::{w2_distance, EmpiricalMeasure};
use mkv_fbsde::rng::NoiseMode;
use mkv_fbsde::scenario::lasry_lions_pairing;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(elapsed: Duration, limit: u64) -> bool {
    elapsed <= Duration::from_secs(limit)
}

fn gaussian_atoms(n: usize, mean: f64, std: f64, seed: u64) -> EmpiricalMeasure {
    InitialLaw::gaussian(mean, std).sample(n, seed).unwrap()
}

fn brute_force_w2(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    fn go(k: usize, perm: &mut Vec<usize>, a: &[Vec<f64>], b: &[Vec<f64>], best: &mut f64) {
        if k == perm.len() {
            let cost: f64 = perm
                .iter()
                .enumerate()
                .map(|(i, &j)| {
                    a[i].iter()
                        .zip(&b[j])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                })
                .sum();
            *best = best.min(cost);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            go(k + 1, perm, a, b, best);
            perm.swap(k, i);
        }
    }
    let mut perm: Vec<usize> = (0..a.len()).collect();
    let mut best = f64::INFINITY;
    go(0, &mut perm, a, b, &mut best);
    (best / a.len() as f64).sqrt()
}

fn wasserstein_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..=6);
        let d = rng.random_range(1..=3);
        let mut draw = || -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect()
        };
        let (a, b) = (draw(), draw());
        let got = w2_distance(
            &EmpiricalMeasure::new(a.clone()).unwrap(),
            &EmpiricalMeasure::new(b.clone()).unwrap(),
        )
        .unwrap();
        worst = worst.max((got - brute_force_w2(&a, &b)).abs());
    }
    let el = start.elapsed();
    outcome(
        worst <= 1e-12 && within(el, 5),
        format!("max |W2 - brute force| = {worst:.3e} (tol 1e-12), {el:.2?} (limit 5s)"),
    )
}

fn rel_error(est: &[Vec<f64>], exact: &[f64]) -> f64 {
    let num = est
        .iter()
        .zip(exact)
        .fold(0.0_f64, |m, (e, x)| m.max((e[0] - x).abs()));
    let den = exact.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    num / den
}

fn lions_identity() -> Outcome {
    let start = Instant::now();
    let mu = gaussian_atoms(256, 0.3, 1.0, 2);
    let h = lions::default_step(&mu);
    let xs: Vec<f64> = mu.atoms().map(|a| a[0]).collect();
    let m = mu.mean()[0];
    let norm = mu.second_moment().sqrt();
    let linear = lions::lions_derivative(&lions::linear_functional(vec![1.0]), &mu, h).unwrap();
    let l2 = lions::lions_derivative(&lions::l2_norm_functional(), &mu, h).unwrap();
    let sq = lions::lions_derivative(&lions::squared_mean_functional(1), &mu, h).unwrap();
    let e1 = rel_error(&linear.values, &vec![1.0; xs.len()]);
    let e2 = rel_error(&l2.values, &xs.iter().map(|x| x / norm).collect::<Vec<_>>());
    let e3 = rel_error(&sq.values, &vec![2.0 * m; xs.len()]);
    let worst = e1.max(e2).max(e3);
    let el = start.elapsed();
    outcome(
        worst < 1e-3 && within(el, 5),
        format!("relative errors mean {e1:.2e}, l2 norm {e2:.2e}, squared mean {e3:.2e} (tol 1e-3), {el:.2?} (limit 5s)"),
    )
}

fn ou_residual(particles: usize, steps: usize) -> (f64, f64) {
    let x0 = EmpiricalMeasure::from_flat(1, vec![0.0; particles]).unwrap();
    let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
    let flow = ParticleFlow::simulate(
        x0,
        grid,
        |x: &[f64], _: &EmpiricalMeasure| vec![-x[0]],
        |_: &[f64], _: &EmpiricalMeasure| vec![1.0],
        3,
        NoiseMode::Orthogonal,
    )
    .unwrap();
    let r = lions::chain_rule_residual(&lions::second_moment_functional(), &flow, 1e-4).unwrap();
    (r.residual, flow.states[steps].second_moment())
}

fn chain_rule() -> Outcome {
    let start = Instant::now();
    let x0 = gaussian_atoms(4096, 0.0, 1.0, 3);
    let grid = TimeGrid::new(0.0, 1.0, 64).unwrap();
    let flow = ParticleFlow::simulate(
        x0,
        grid,
        |_: &[f64], _: &EmpiricalMeasure| vec![0.0],
        |_: &[f64], _: &EmpiricalMeasure| vec![1.0],
        3,
        NoiseMode::Orthogonal,
    )
    .unwrap();
    let h = lions::default_step(&flow.states[0]);
    let brownian = lions::chain_rule_residual(&lions::second_moment_functional(), &flow, h)
        .unwrap()
        .residual;
    let (coarse, m2) = ou_residual(4096, 64);
    let (fine, _) = ou_residual(16384, 128);
    let exact = 0.5 * (1.0 - (-2.0_f64).exp());
    let ratio = fine / coarse;
    let el = start.elapsed();
    let ok = brownian < 0.05
        && (m2 - exact).abs() < 0.02
        && (0.35..=0.65).contains(&ratio)
        && within(el, 60);
    outcome(
        ok,
        format!(
            "brownian residual {brownian:.2e} (tol 0.05), OU m2(1) error {:.2e} (tol 0.02), refinement ratio {ratio:.3} (0.5 +- 30%), {el:.2?} (limit 60s)",
            (m2 - exact).abs()
        ),
    )
}

fn lq_params(particles: usize) -> SolverParams {
    SolverParams {
        particles,
        basis_degree: 1,
        mean_regressor: true,
        ..SolverParams::default()
    }
    .with_seed(2024)
}

fn lq_oracle_run() -> (Outcome, Outcome) {
    let start = Instant::now();
    let spec = LqSpec::scalar(-0.5);
    let scn = Scenario::lq(spec.clone(), LqKind::Mfg).unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 64).unwrap();
    let law = InitialLaw::gaussian(0.0, 1.0);
    let (ens, field) =
        fbsde::solve_long_horizon(scn.coefficients(), &law, &grid, &lq_params(8192)).unwrap();
    let oracle = solve_riccati(&spec, LqKind::Mfg, &grid).unwrap();
    let err = oracle_error(&field, &ens, &oracle).unwrap();
    let el = start.elapsed();
    let c4 = outcome(
        err < 1e-2 && within(el, 120),
        format!("sup |U - U_oracle|/(1+|x|) = {err:.3e} (tol 1e-2), {el:.2?} (limit 120s)"),
    );

    let residual = fbsde::decoupling_residual(&ens, &field).unwrap();
    let fit = field.diagnostics().max_fit_rms();
    let small = TimeGrid::new(0.0, 1.0, 64).unwrap();
    let fc =
        fbsde::flow_consistency(scn.coefficients(), &law, &small, &lq_params(2048), 32).unwrap();
    let c6 = outcome(
        residual < 2.0 * fit && fc.total() < 2e-2,
        format!("decoupling residual {residual:.2e} vs 2 x fit {:.2e}, flow consistency {:.2e} (tol 2e-2)", 2.0 * fit, fc.total()),
    );
    (c4, c6)
}

fn master_points(n: usize, seed: u64) -> Vec<(f64, Vec<f64>, EmpiricalMeasure)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|p| {
            let t = rng.random_range(1..16) as f64 / 16.0;
            let x = vec![rng.random_range(-2.0..2.0)];
            let mu = gaussian_atoms(
                64,
                rng.random_range(-1.0..1.0),
                rng.random_range(0.5..1.5),
                seed + p as u64,
            );
            (t, x, mu)
        })
        .collect()
}

fn master_pde() -> Outcome {
    let start = Instant::now();
    let spec = LqSpec::scalar(-0.5);
    let scn = Scenario::lq(spec.clone(), LqKind::Mfg).unwrap();
    let steps = ItoSteps {
        h_t: 1e-3,
        h_x: 1e-3,
        h_mu: 1e-4,
    };
    let pts = master_points(100, 5);
    let fine = TimeGrid::new(0.0, 1.0, 256).unwrap();
    let oracle = solve_riccati(&spec, LqKind::Mfg, &fine).unwrap();
    let oracle_max = pts
        .iter()
        .map(|(t, x, mu)| {
            master_residual(&oracle, scn.coefficients(), *t, x, mu, steps)
                .unwrap()
                .max_abs()
        })
        .fold(0.0, f64::max);
    let law = InitialLaw::gaussian(0.0, 1.0);
    let mut levels = Vec::new();
    for (k, n) in [(16, 1024), (32, 2048), (64, 4096)] {
        let grid = TimeGrid::new(0.0, 1.0, k).unwrap();
        let (_, field) =
            fbsde::solve_long_horizon(scn.coefficients(), &law, &grid, &lq_params(n)).unwrap();
        let worst = pts
            .iter()
            .map(|(t, x, mu)| {
                master_residual(&field, scn.coefficients(), *t, x, mu, steps)
                    .unwrap()
                    .max_abs()
            })
            .fold(0.0, f64::max);
        levels.push(worst);
    }
    let el = start.elapsed();
    let ok = oracle_max < 1e-4
        && levels[2] < 5e-2
        && levels[1] < levels[0]
        && levels[2] < levels[1]
        && within(el, 120);
    outcome(
        ok,
        format!(
            "oracle max {oracle_max:.2e} (tol 1e-4), solver levels {:.2e} > {:.2e} > {:.2e} (tol 5e-2), {el:.2?} (limit 120s)",
            levels[0], levels[1], levels[2]
        ),
    )
}

fn identification() -> Outcome {
    let start = Instant::now();
    let grid = TimeGrid::new(0.0, 1.0, 32).unwrap();
    let law = InitialLaw::gaussian(0.0, 1.0);
    let mut worst = [0.0_f64; 2];
    for (slot, (kind, pk)) in [
        (LqKind::Mfg, ProblemKind::Mfg),
        (LqKind::Mkv, ProblemKind::Mkv),
    ]
    .into_iter()
    .enumerate()
    {
        let spec = LqSpec::scalar(-0.5);
        let scn = Scenario::lq(spec.clone(), kind).unwrap();
        let (_, field) =
            fbsde::solve_long_horizon(scn.coefficients(), &law, &grid, &lq_params(4096)).unwrap();
        let oracle = solve_riccati(&spec, kind, &grid).unwrap();
        let v = oracle.value_field();
        let mut rng = ChaCha8Rng::seed_from_u64(7 + slot as u64);
        for p in 0..50 {
            let t = grid.time(rng.random_range(0..grid.steps()));
            let mu = gaussian_atoms(
                32,
                rng.random_range(-1.0..1.0),
                rng.random_range(0.5..1.5),
                100 + p,
            );
            let x = mu.atom(rng.random_range(0..mu.len())).to_vec();
            let e = identification_check(pk, &v, &field, t, &x, &mu, 1e-3, 1e-4).unwrap();
            worst[slot] = worst[slot].max(e);
        }
    }
    let el = start.elapsed();
    outcome(
        worst[0] < 1e-2 && worst[1] < 2e-2 && within(el, 120),
        format!(
            "MFG {:.2e} (tol 1e-2), MKV {:.2e} (tol 2e-2), {el:.2?} (limit 120s)",
            worst[0], worst[1]
        ),
    )
}

fn weak_lipschitz() -> Outcome {
    let spec = LqSpec::scalar(-0.5);
    let scn = Scenario::lq(spec.clone(), LqKind::Mfg).unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 32).unwrap();
    let base = InitialLaw::gaussian(0.0, 1.0);
    let pairs: Vec<_> = [0.25, -0.5, 1.0]
        .iter()
        .map(|s| (base.clone(), InitialLaw::gaussian(*s, 1.0)))
        .collect();
    let est = fbsde::weak_lipschitz_estimate(scn.coefficients(), &grid, &lq_params(2048), &pairs)
        .unwrap();
    let oracle = solve_riccati(&spec, LqKind::Mfg, &grid).unwrap();
    let bound = (oracle.eta(0.0)[(0, 0)].abs() + oracle.chi(0.0)[(0, 0)].abs()) * 1.1;
    outcome(
        est <= bound,
        format!("estimate {est:.4} <= bound {bound:.4}"),
    )
}

fn lasry_lions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    let mut signs = Vec::new();
    for rho in [-1.0, 1.0] {
        let f0 = StateCost::quadratic_tracking(DMatrix::identity(1, 1), rho);
        let h = |x: &[f64], m: &EmpiricalMeasure| f0.value(x, m);
        let mut min = f64::INFINITY;
        for p in 0..32 {
            let mu = gaussian_atoms(16, rng.random_range(-2.0..2.0), 1.0, 200 + p);
            let nu = gaussian_atoms(16, rng.random_range(-2.0..2.0), 0.7, 300 + p);
            let got = lasry_lions_pairing(&h, &mu, &nu).unwrap();
            let dm = mu.mean()[0] - nu.mean()[0];
            worst = worst.max((got + rho * dm * dm).abs());
            min = min.min(got);
        }
        signs.push(min >= -1e-10);
    }
    outcome(
        worst <= 1e-10 && signs == [true, false],
        format!("max |pairing + rho (m - m')^2| = {worst:.2e} (tol 1e-10), passes rho=-1: {}, passes rho=+1: {}", signs[0], signs[1]),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lq.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 2024, "scenario": {"name": "lq_mfg", "params": {"rho": -0.5}},
            "horizon": {"t0": 0.0, "t_end": 1.0, "steps": 64},
            "solver": {"particles": 8192, "basis_degree": 1, "mean_regressor": true}}"#,
    )
    .unwrap();
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let code = mkv_fbsde::cli::run([
            "mkv-fbsde",
            "solve",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        if code != 0 {
            return outcome(false, format!("solve exited with {code}"));
        }
        files.push((
            std::fs::read(out.join("field.csv")).unwrap(),
            std::fs::read(out.join("field.json")).unwrap(),
        ));
    }
    outcome(
        files[0] == files[1],
        format!(
            "field.csv and field.json identical across runs: {}",
            files[0] == files[1]
        ),
    )
}

fn main() {
    let (c4, c6) = lq_oracle_run();
    let results = [
        ("1 wasserstein exactness", wasserstein_exactness()),
        ("2 lions derivative identity", lions_identity()),
        ("3 chain rule", chain_rule()),
        ("4 lq-mfg field vs riccati oracle", c4),
        ("5 master pde residual", master_pde()),
        ("6 decoupling property", c6),
        ("7 identifications", identification()),
        ("8 weak lipschitz", weak_lipschitz()),
        ("9 lasry-lions checker", lasry_lions()),
        ("10 determinism", determinism()),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!(
            "{} criterion {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.passed);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

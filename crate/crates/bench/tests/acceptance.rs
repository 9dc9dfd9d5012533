//! Acceptance suite: every release criterion as one test printing a
//! pass/fail line. The benchmark portion runs once (sequentially, for
//! meaningful timing comparisons) and is shared across criteria.
//!
//! Run with `cargo test -p qreg-bench --test acceptance -- --nocapture`
//! to see the per-criterion lines.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use qreg_bench::{median, run_suite, BenchConfig, InstanceSuccess, RowSpec, SuiteResult};
use qreg_core::datagen::IoDataset;
use qreg_core::{matlib, nonmin, qlearn};
use qreg_plant::collect::{collect, derive_seed, CollectConfig};
use qreg_plant::lti::random_system;
use qreg_plant::oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MASTER_SEED: u64 = 20260809;

fn suite() -> &'static SuiteResult {
    static SUITE: OnceLock<SuiteResult> = OnceLock::new();
    SUITE.get_or_init(|| {
        // Small warmup so one-time initialization cost cannot distort the
        // first (cheapest) row's average learning time.
        let mut warm = BenchConfig::desk_default(MASTER_SEED ^ 0x5a5a);
        warm.rows = vec![RowSpec {
            n: 3,
            p: 2,
            m: 1,
            systems: 2,
            stable_fraction: 0.5,
        }];
        warm.threads = 1;
        run_suite(&warm).expect("warmup suite");

        let mut cfg = BenchConfig::desk_default(MASTER_SEED);
        cfg.threads = 1;
        run_suite(&cfg).expect("acceptance suite")
    })
}

fn row_successes(row: usize) -> Vec<&'static InstanceSuccess> {
    let s = suite();
    let expected = s.config.rows[row].systems;
    let ok: Vec<&InstanceSuccess> = s
        .instances
        .iter()
        .filter(|o| o.row == row)
        .filter_map(|o| o.result.as_ref().ok())
        .collect();
    let failures: Vec<String> = s
        .instances
        .iter()
        .filter(|o| o.row == row)
        .filter_map(|o| o.result.as_ref().err().cloned())
        .collect();
    assert_eq!(
        ok.len(),
        expected,
        "row {row}: {} of {expected} instances succeeded; failures: {failures:?}",
        ok.len()
    );
    ok
}

fn gain_errors(row: usize) -> Vec<f64> {
    row_successes(row).iter().map(|s| s.gain_error).collect()
}

#[test]
fn criterion_1_small_system_optimality() {
    let errs = gain_errors(0);
    let med = median(&errs);
    let max = errs.iter().cloned().fold(0.0f64, f64::max);
    let secs: f64 = row_successes(0).iter().map(|s| s.report.learn_secs).sum();
    assert!(med <= 1e-8, "median gain error {med:.3e} > 1e-8");
    assert!(max <= 1e-6, "max gain error {max:.3e} > 1e-6");
    println!(
        "[acceptance] criterion 1 (optimality, 20x n=3,p=2,m=1): PASS \
         (median {med:.3e}, max {max:.3e}, total learn time {secs:.3} s)"
    );
}

#[test]
fn criterion_2_medium_system_optimality() {
    let errs5 = gain_errors(1);
    let med5 = median(&errs5);
    assert!(med5 <= 1e-7, "median gain error {med5:.3e} > 1e-7 for (5,3,2)");
    let errs10 = gain_errors(2);
    let med10 = median(&errs10);
    assert!(med10 <= 1e-5, "median gain error {med10:.3e} > 1e-5 for (10,6,5)");
    println!(
        "[acceptance] criterion 2 (optimality, medium systems): PASS \
         (median {med5:.3e} at n=5, {med10:.3e} at n=10)"
    );
}

#[test]
fn criterion_3_scalability_and_runtime_ordering() {
    let s = suite();
    for row in [3usize, 4] {
        let errs = gain_errors(row);
        let max = errs.iter().cloned().fold(0.0f64, f64::max);
        assert!(
            max <= 1e-2,
            "row {row}: max gain error {max:.3e} > 1e-2"
        );
    }
    // Learning time is monotone across rows ordered by the basis dimension
    // nu. The per-row median is used so a single scheduling hiccup on a
    // sub-millisecond row cannot flip the ordering; absolute times are
    // hardware-dependent and not asserted.
    let mut rows: Vec<(f64, f64, usize)> = s
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let times: Vec<f64> = row_successes(i)
                .iter()
                .map(|inst| inst.report.learn_secs)
                .collect();
            (r.mean_nu, median(&times), r.n)
        })
        .collect();
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for w in rows.windows(2) {
        assert!(
            w[0].1 <= w[1].1,
            "learn time not monotone in nu: {:.3e} s at nu {:.0} vs {:.3e} s at nu {:.0}",
            w[0].1,
            w[0].0,
            w[1].1,
            w[1].0
        );
    }
    let times: Vec<String> = rows
        .iter()
        .map(|(_, t, n)| format!("n={n}: {t:.2e} s"))
        .collect();
    println!(
        "[acceptance] criterion 3 (scalability smoke n=30,50; runtime ordering): PASS ({})",
        times.join(", ")
    );
}

#[test]
fn criterion_4_quadratic_convergence() {
    // e_{i+1} <= c e_i^2 for one fitted c across all iterations with
    // e_i > 1e-10, over the 20 instances of the (3,2,1) row.
    let mut c = 0.0f64;
    let mut pairs = 0usize;
    let mut contributing = 0usize;
    for inst in row_successes(0) {
        let e = &inst.gain_error_history;
        let mut here = 0usize;
        for i in 0..e.len().saturating_sub(1) {
            if e[i] > 1e-10 {
                c = c.max(e[i + 1] / (e[i] * e[i]));
                here += 1;
            }
        }
        pairs += here;
        if here > 0 {
            contributing += 1;
        }
    }
    assert!(contributing >= 10, "only {contributing} instances contributed");
    assert!(pairs >= 10, "only {pairs} iteration pairs above the floor");
    assert!(c.is_finite() && c > 0.0, "fitted constant {c}");
    println!(
        "[acceptance] criterion 4 (quadratic convergence): PASS \
         (fitted c = {c:.3e} over {pairs} pairs from {contributing} instances)"
    );
}

#[test]
fn criterion_5_every_iterate_is_stabilizing() {
    // Every gain produced by an iteration passes the simulated decay test:
    // 20 random initial states, horizon 200, terminal output below
    // 1e-6 x the initial level.
    let mut checked = 0usize;
    for inst in suite().instances.iter() {
        let s = inst.result.as_ref().expect("all instances succeed");
        let lag = s.sys.lag();
        let horizon = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(inst.seed, 0xDECA7));
        let x0s: Vec<DVector<f64>> = (0..20)
            .map(|_| DVector::from_fn(s.sys.state_dim(), |_, _| rng.random_range(-1.0..=1.0)))
            .collect();
        for it in &s.report.iterations {
            // The Bellman equation residual contract holds every iteration.
            assert!(
                it.stein_residual <= 1e-9,
                "residual {:.3e} at iterate {} of (row {}, idx {})",
                it.stein_residual,
                it.iteration,
                inst.row,
                inst.index
            );
            for x0 in &x0s {
                let (ys, _) = s
                    .sys
                    .rollout_output_feedback(&s.gamma, &it.k_z, x0, horizon)
                    .unwrap();
                let initial = (0..=lag)
                    .map(|k| ys.column(k).norm())
                    .fold(0.0f64, f64::max);
                let terminal = ys.column(horizon - 1).norm();
                assert!(
                    terminal < 1e-6 * initial,
                    "iterate {} of instance (row {}, idx {}): terminal {terminal:.3e} \
                     vs initial {initial:.3e}",
                    it.iteration,
                    inst.row,
                    inst.index
                );
                checked += 1;
            }
        }
    }
    println!(
        "[acceptance] criterion 5 (per-iteration stabilization): PASS \
         ({checked} rollouts, horizon 200, factor 1e-6)"
    );
}

#[test]
fn criterion_6_oracle_equivalence_on_small_systems() {
    // Matched initial policies: the data-side Q-matrix equals the lifted
    // model-side one and the gains stay related by T, every iteration.
    let qy_scale = suite().config.qy_scale;
    let r_scale = suite().config.r_scale;
    let mut worst_theta = 0.0f64;
    let mut worst_gain = 0.0f64;
    let mut instances = 0usize;
    for row in [0usize, 1] {
        for inst in row_successes(row).into_iter().take(10) {
            instances += 1;
            let n = inst.sys.state_dim();
            let m = inst.sys.input_dim();
            let p = inst.sys.output_dim();
            let qy = DMatrix::identity(p, p) * qy_scale;
            let r = DMatrix::identity(m, m) * r_scale;

            let (_, k_x0) = matlib::dare_solve(
                inst.sys.a(),
                inst.sys.b(),
                &DMatrix::identity(n, n),
                &DMatrix::identity(m, m),
            )
            .unwrap();
            let iters = 8;
            let model =
                oracle::oracle_policy_iteration(&inst.sys, &qy, &r, &k_x0, iters).unwrap();
            let script_t = inst.oracle.script_t(m);

            let mut k_z = &k_x0 * &inst.oracle.t;
            for i in 0..iters {
                let sigma = qlearn::build_sigma(&k_z, &inst.basis.z_succ).unwrap();
                let theta_z = qlearn::policy_eval(&inst.basis, &qy, &r, &sigma).unwrap();
                let lifted = script_t.transpose() * &model.thetas[i] * &script_t;
                let rel_theta = (theta_z.full() - &lifted).norm() / lifted.norm();
                assert!(
                    rel_theta <= 1e-6,
                    "theta mismatch {rel_theta:.3e} (row {row}, iteration {i})"
                );
                worst_theta = worst_theta.max(rel_theta);

                k_z = qlearn::policy_improve(&theta_z).unwrap().k_z;
                let matched = &model.gains[i + 1] * &inst.oracle.t;
                let rel_gain = (&k_z - &matched).norm() / matched.norm().max(1e-300);
                assert!(
                    rel_gain <= 1e-6,
                    "gain mismatch {rel_gain:.3e} (row {row}, iteration {i})"
                );
                worst_gain = worst_gain.max(rel_gain);
            }
        }
    }
    assert_eq!(instances, 20);
    println!(
        "[acceptance] criterion 6 (oracle equivalence, 20 instances n<=5): PASS \
         (worst theta mismatch {worst_theta:.3e}, worst gain mismatch {worst_gain:.3e})"
    );
}

#[test]
fn criterion_7_rank_and_separation_property_suite() {
    // Wait for the shared benchmark run so its timings stay uncontended.
    let _ = suite();
    let mut done = 0usize;
    let mut case = 0u64;
    while done < 50 {
        case += 1;
        let seed = derive_seed(0x7e57_0000 + MASTER_SEED, case);
        let mut dims = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.random_range(2..=5usize);
        let p = dims.random_range(1..=3usize);
        let m = dims.random_range(1..=2usize);
        let stable = case.is_multiple_of(2);
        let sys = match random_system(n, p, m, stable, seed) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let collected = collect(&sys, &CollectConfig::default(), derive_seed(seed, 9)).unwrap();
        let ds = &collected.dataset;
        let lag = sys.lag();

        // rank([Z0; U0]) = m(l+1) + n exactly at the default tolerance.
        let gamma = nonmin::compute_gamma(ds, lag, n).unwrap();
        let z = nonmin::build_z(ds, &gamma, lag).unwrap();
        let basis = nonmin::build_basis(ds, &z).unwrap();
        let nu = m * (lag + 1) + n;
        assert_eq!(basis.nu, nu);
        let mut zeta = DMatrix::zeros(nu, basis.z0.ncols());
        zeta.view_mut((0, 0), (basis.z_dim, basis.z0.ncols()))
            .copy_from(&basis.z0);
        zeta.view_mut((basis.z_dim, 0), (m, basis.u0.ncols()))
            .copy_from(&basis.u0);
        assert_eq!(
            matlib::numeric_rank(&zeta, None).0,
            nu,
            "case {case}: rank deficiency"
        );

        // Separation equation reconstructs the stacked Hankel exactly.
        let stack = nonmin::stacked_lag_hankel(ds).unwrap();
        let hy = stack.rows(m * lag, p * lag).into_owned();
        let pi = gamma.pi();
        let mut permuted = DMatrix::zeros(p * lag, hy.ncols());
        permuted
            .view_mut((0, 0), (n, hy.ncols()))
            .copy_from(&(gamma.gamma() * &hy));
        permuted
            .view_mut((n, 0), (p * lag - n, hy.ncols()))
            .copy_from(&(gamma.g_complement() * &hy));
        let err = (&pi * permuted - &hy).norm();
        assert!(err <= 1e-12, "case {case}: separation residual {err:.3e}");
        done += 1;
    }
    println!(
        "[acceptance] criterion 7 (rank + separation over 50 random instances): PASS"
    );
}

#[test]
fn criterion_8_solver_unit_suite() {
    let _ = suite();
    // Scalar Riccati closed form.
    let (p, _) = matlib::dare_solve(
        &DMatrix::from_element(1, 1, 0.5),
        &DMatrix::from_element(1, 1, 1.0),
        &DMatrix::from_element(1, 1, 1.0),
        &DMatrix::from_element(1, 1, 1.0),
    )
    .unwrap();
    assert!((p[(0, 0)] - 1.132782).abs() <= 1e-5, "scalar DARE {}", p[(0, 0)]);

    // Random Riccati instances: residual within 1e-10 of ||P||.
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED ^ 0x0da6e);
    for _ in 0..20 {
        let n = rng.random_range(2..=6usize);
        let m = rng.random_range(1..=3usize);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..=1.0));
        let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..=1.0));
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..=1.0));
        let q = matlib::symmetrize(&(&g * g.transpose())) + DMatrix::identity(n, n) * 0.1;
        let r = DMatrix::identity(m, m);
        let (p, k) = matlib::dare_solve(&a, &b, &q, &r).unwrap();
        let residual =
            (a.transpose() * &p * &a - &p - a.transpose() * &p * &b * &k + &q).norm();
        assert!(residual <= 1e-10 * p.norm(), "residual {residual:.3e}");
        assert!(matlib::spectral_radius(&(&a - &b * &k)).unwrap() < 1.0);
    }

    // Generalized Stein vs an independent vectorized solve, 100 cases.
    let mut worst = 0.0f64;
    for case in 0..100 {
        let nu = 1 + case % 8;
        let z = DMatrix::identity(nu, nu)
            + DMatrix::from_fn(nu, nu, |_, _| rng.random_range(-0.2..=0.2));
        let stable = {
            let raw = DMatrix::from_fn(nu, nu, |_, _| rng.random_range(-1.0..=1.0));
            let rho = matlib::spectral_radius(&raw).unwrap();
            if rho < 1e-9 {
                DMatrix::zeros(nu, nu)
            } else {
                raw * (rng.random_range(0.3..=0.9) / rho)
            }
        };
        let sigma = &stable * &z;
        let h = DMatrix::from_fn(nu, nu, |_, _| rng.random_range(-1.0..=1.0));
        let c0 = matlib::symmetrize(&(&h * h.transpose()));
        let theta = matlib::solve_generalized_stein(&z, &sigma, &c0).unwrap();

        let zt = z.transpose();
        let st = sigma.transpose();
        let big = zt.kronecker(&zt) - st.kronecker(&st);
        let rhs = DVector::from_column_slice(c0.as_slice());
        let sol = big.lu().solve(&rhs).unwrap();
        let expected = DMatrix::from_column_slice(nu, nu, sol.as_slice());
        let err = (&theta - &expected).norm() / expected.norm().max(1.0);
        assert!(err <= 1e-9, "case {case}: mismatch {err:.3e}");
        worst = worst.max(err);
    }
    println!(
        "[acceptance] criterion 8 (solver unit suite): PASS \
         (worst generalized-Stein deviation {worst:.3e})"
    );
}

#[test]
fn criterion_9_model_free_purity() {
    // The authoritative enforcement is structural: the learner crate has no
    // plant dependency and its own test binary (qreg-core, tests/model_free)
    // runs the learn path from serialized datasets alone. Here the same
    // fixture is re-run end to end and the schema is shown to reject
    // plant-matrix fields.
    let _ = suite();
    let text = include_str!("../../core/tests/data/dataset_321_unstable.json");
    let ds = IoDataset::from_json_str(text).unwrap();
    let qy = DMatrix::identity(ds.output_dim(), ds.output_dim()) * 100.0;
    let r = DMatrix::identity(ds.input_dim(), ds.input_dim());
    let report = qlearn::run(&ds, &qy, &r, &qlearn::RunOptions::default()).unwrap();
    assert!(report.converged);

    let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
    v.as_object_mut()
        .unwrap()
        .insert("a".into(), serde_json::json!([[1.0]]));
    assert!(IoDataset::from_json_str(&v.to_string()).is_err());
    println!(
        "[acceptance] criterion 9 (model-free purity): PASS \
         (learn path ran from serialized data; schema rejects plant matrices)"
    );
}

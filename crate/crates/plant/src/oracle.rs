//! Model-based reference chain, used only by tests and the benchmark's
//! error column: Riccati-optimal gains, the state-to-nonminimal-state map
//! `T`, and exact policy iteration on the plant matrices.

use nalgebra::{DMatrix, DVector};
use qreg_core::datagen::IoDataset;
use qreg_core::matlib;
use qreg_core::nonmin::ZSequence;

use crate::error::{Error, Result};
use crate::lti::LtiSystem;

/// Everything the oracle knows about one (system, dataset, weights) triple.
#[derive(Debug, Clone)]
pub struct OracleBundle {
    /// Stabilizing Riccati solution for `Q = C^T Qy C`.
    pub p: DMatrix<f64>,
    /// Optimal state-feedback gain.
    pub k_x_star: DMatrix<f64>,
    /// Full-row-rank map with `x_k = T z_k` along trajectories.
    pub t: DMatrix<f64>,
    /// Optimal output-feedback gain in the dataset's z-coordinates.
    pub k_z_star: DMatrix<f64>,
}

impl OracleBundle {
    /// Lift `script T = diag(T, I_m)` mapping `zeta = [z; u]` to `[x; u]`.
    pub fn script_t(&self, m: usize) -> DMatrix<f64> {
        let n = self.t.nrows();
        let q = self.t.ncols();
        let mut s = DMatrix::zeros(n + m, q + m);
        s.view_mut((0, 0), (n, q)).copy_from(&self.t);
        s.view_mut((n, q), (m, m))
            .copy_from(&DMatrix::identity(m, m));
        s
    }
}

/// Optimal LQ output-regulation gains: solves the Riccati equation with
/// `Q = C^T Qy C` and returns `(P, K_x*)`.
pub fn optimal_gains(
    sys: &LtiSystem,
    qy: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let p = sys.output_dim();
    if qy.nrows() != p || qy.ncols() != p {
        return Err(Error::Dimension(format!(
            "Qy must be {p}x{p}, got {}x{}",
            qy.nrows(),
            qy.ncols()
        )));
    }
    let qx = matlib::symmetrize(&(sys.c().transpose() * qy * sys.c()));
    let (pmat, k) = matlib::dare_solve(sys.a(), sys.b(), &qx, r)?;
    Ok((pmat, k))
}

/// Regress the state-reconstruction map `T` from simulated true states:
/// `T = X Z0^+`. Exact (to conditioning) for noise-free data.
///
/// `x0s` are the initial states each episode was collected from.
pub fn regress_t(
    sys: &LtiSystem,
    dataset: &IoDataset,
    x0s: &[DVector<f64>],
    z: &ZSequence,
) -> Result<DMatrix<f64>> {
    if x0s.len() != dataset.episodes().len() {
        return Err(Error::Dimension(format!(
            "{} initial states for {} episodes",
            x0s.len(),
            dataset.episodes().len()
        )));
    }
    let lag = dataset.lag();
    let n = sys.state_dim();
    let q = z.z_dim();

    let total: usize = dataset.episodes().iter().map(|e| e.len() + 1 - lag).sum();
    let mut x_cols = DMatrix::zeros(n, total);
    let mut z_cols = DMatrix::zeros(q, total);
    let mut at = 0;
    for (e, ep) in dataset.episodes().iter().enumerate() {
        let (_, xs) = sys.simulate(&x0s[e], ep.u())?;
        for k in lag..=ep.len() {
            x_cols.set_column(at, &xs.column(k).into_owned());
            z_cols.set_column(at, &z.z(e, k));
            at += 1;
        }
    }

    let (rank, tol) = matlib::numeric_rank(&z_cols, None);
    if rank < q {
        return Err(Error::Core(qreg_core::Error::Excitation(format!(
            "z data matrix has rank {rank} < {q} (tolerance {tol:.3e}); cannot regress T"
        ))));
    }
    // T Z = X row by row: Z^T T^T = X^T.
    let svd = z_cols.transpose().svd(true, true);
    let t_t = svd
        .solve(&x_cols.transpose(), matlib::default_rank_tol(total, q, svd.singular_values.max()))
        .map_err(|e| Error::Collection(format!("T regression failed: {e}")))?;
    let t = t_t.transpose();
    let residual = (&t * &z_cols - &x_cols).norm();
    if residual > 1e-8 * x_cols.norm().max(1.0) {
        return Err(Error::Collection(format!(
            "T regression residual {:.3e} too large; data inconsistent with x = T z",
            residual / x_cols.norm().max(1.0)
        )));
    }
    Ok(t)
}

/// Assemble the full oracle bundle for one instance.
pub fn oracle_bundle(
    sys: &LtiSystem,
    dataset: &IoDataset,
    x0s: &[DVector<f64>],
    z: &ZSequence,
    qy: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<OracleBundle> {
    let (p, k_x_star) = optimal_gains(sys, qy, r)?;
    let t = regress_t(sys, dataset, x0s, z)?;
    let k_z_star = &k_x_star * &t;
    Ok(OracleBundle {
        p,
        k_x_star,
        t,
        k_z_star,
    })
}

/// Closed-loop lift `Phi = [[A, B], [-K A, -K B]]` of a state policy.
pub fn phi_lift(sys: &LtiSystem, k_x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    let mut phi = DMatrix::zeros(n + m, n + m);
    phi.view_mut((0, 0), (n, n)).copy_from(sys.a());
    phi.view_mut((0, n), (n, m)).copy_from(sys.b());
    phi.view_mut((n, 0), (m, n)).copy_from(&(-(k_x * sys.a())));
    phi.view_mut((n, n), (m, m)).copy_from(&(-(k_x * sys.b())));
    phi
}

/// History of the model-based policy iteration: `gains[0]` is the initial
/// policy, `thetas[i]` is the Q-matrix of `gains[i]` and `gains[i+1]` its
/// greedy improvement.
#[derive(Debug, Clone)]
pub struct OracleIterates {
    pub thetas: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
}

/// Exact policy iteration on the plant: solve the Lyapunov equation
/// `Theta = diag(C^T Qy C, R) + Phi^T Theta Phi` and improve
/// `K = Theta_uu^{-1} Theta_ux`. Every iterate is checked positive definite
/// and stabilizing.
pub fn oracle_policy_iteration(
    sys: &LtiSystem,
    qy: &DMatrix<f64>,
    r: &DMatrix<f64>,
    k_x0: &DMatrix<f64>,
    iters: usize,
) -> Result<OracleIterates> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    if k_x0.nrows() != m || k_x0.ncols() != n {
        return Err(Error::Dimension(format!(
            "initial gain must be {m}x{n}, got {}x{}",
            k_x0.nrows(),
            k_x0.ncols()
        )));
    }
    let qx = matlib::symmetrize(&(sys.c().transpose() * qy * sys.c()));
    let mut qbar = DMatrix::zeros(n + m, n + m);
    qbar.view_mut((0, 0), (n, n)).copy_from(&qx);
    qbar.view_mut((n, n), (m, m)).copy_from(r);

    let mut gains = vec![k_x0.clone()];
    let mut thetas = Vec::with_capacity(iters);
    for i in 0..iters {
        let phi = phi_lift(sys, &gains[i]);
        let rho = matlib::spectral_radius(&phi)?;
        if rho >= 1.0 {
            return Err(Error::Core(
                qreg_core::Error::Unstable { rho }.at_iteration(i),
            ));
        }
        let theta = matlib::solve_stein(&phi, &qbar)?;
        // Positive definite even though Qbar is only PSD.
        if theta.clone().cholesky().is_none() {
            return Err(Error::Collection(format!(
                "oracle Theta_x not positive definite at iteration {i}"
            )));
        }
        let theta_uu = theta.view((n, n), (m, m)).into_owned();
        let theta_ux = theta.view((n, 0), (m, n)).into_owned();
        let k_next = theta_uu
            .cholesky()
            .expect("Theta_uu is a principal block of a PD matrix")
            .solve(&theta_ux);
        thetas.push(theta);
        gains.push(k_next);
    }
    Ok(OracleIterates { thetas, gains })
}

//! Off-policy Q-learning loop on the non-minimal state.
//!
//! Policy evaluation solves the model-free Bellman equation
//! `Z^T Theta Z = W^T Qhat W + Sigma^T Theta Sigma` for the Q-function matrix
//! `Theta`; policy improvement takes `K = Theta_uu^{-1} Theta_uz`. The loop
//! starts from a data-derived stabilizing gain and stops once successive
//! gains agree to a threshold.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::datagen::IoDataset;
use crate::error::{Error, Result};
use crate::matlib;
use crate::nonmin::{self, NonMinBasis};

/// Default stopping threshold on the Frobenius norm of the gain update.
pub const DEFAULT_EPSILON: f64 = 1e-10;
/// Default iteration cap.
pub const DEFAULT_MAX_ITERS: usize = 10;

/// Output-feedback gain on the non-minimal state, `u = -K_z z`.
#[derive(Debug, Clone)]
pub struct PolicyGain {
    pub k_z: DMatrix<f64>,
    pub iteration: usize,
    /// Spectral radius of the identified lifted closed loop; diagnostic only.
    pub closed_loop_radius: Option<f64>,
}

/// Q-function matrix on `zeta = [z; u]`, symmetric positive semi-definite
/// with a positive definite `Theta_uu` block.
#[derive(Debug, Clone)]
pub struct ThetaZ {
    full: DMatrix<f64>,
    z_dim: usize,
    input_dim: usize,
}

impl ThetaZ {
    pub fn new(full: DMatrix<f64>, z_dim: usize, input_dim: usize) -> Result<Self> {
        let nu = z_dim + input_dim;
        if full.nrows() != nu || full.ncols() != nu {
            return Err(Error::Dimension(format!(
                "Theta must be {nu}x{nu}, got {}x{}",
                full.nrows(),
                full.ncols()
            )));
        }
        Ok(ThetaZ {
            full: matlib::symmetrize(&full),
            z_dim,
            input_dim,
        })
    }

    pub fn full(&self) -> &DMatrix<f64> {
        &self.full
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    pub fn theta_zz(&self) -> DMatrix<f64> {
        self.full.view((0, 0), (self.z_dim, self.z_dim)).into_owned()
    }

    pub fn theta_uz(&self) -> DMatrix<f64> {
        self.full
            .view((self.z_dim, 0), (self.input_dim, self.z_dim))
            .into_owned()
    }

    pub fn theta_uu(&self) -> DMatrix<f64> {
        self.full
            .view((self.z_dim, self.z_dim), (self.input_dim, self.input_dim))
            .into_owned()
    }
}

/// One record per Q-learning iteration.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    /// 1-based index of the iteration that produced `k_z`.
    pub iteration: usize,
    pub k_z: DMatrix<f64>,
    /// `||K^{(i+1)} - K^{(i)}||_F`.
    pub gain_update: f64,
    /// Relative residual of the Bellman equation solved this iteration.
    pub stein_residual: f64,
    /// Spectral radius of the identified closed loop under the evaluated policy.
    pub rho_closed_loop: f64,
    pub wall_secs: f64,
}

/// Full history of one learning run.
#[derive(Debug, Clone)]
pub struct QlReport {
    pub initial_gain: DMatrix<f64>,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    pub iters_used: usize,
    /// Wall time of initialization plus all iterations (data preparation,
    /// i.e. basis construction, is excluded).
    pub learn_secs: f64,
    pub nu: usize,
    pub z_dim: usize,
    pub epsilon: f64,
    pub max_iters: usize,
}

impl QlReport {
    /// Gain after the last completed iteration.
    pub fn final_gain(&self) -> &DMatrix<f64> {
        self.iterations
            .last()
            .map(|r| &r.k_z)
            .unwrap_or(&self.initial_gain)
    }

    /// Initial gain followed by each iteration's gain.
    pub fn gain_history(&self) -> Vec<&DMatrix<f64>> {
        let mut v = vec![&self.initial_gain];
        v.extend(self.iterations.iter().map(|r| &r.k_z));
        v
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&QlReportFile::from(self)).expect("report serialization")
    }

    pub fn write_json<W: std::io::Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, &QlReportFile::from(self))
            .map_err(|e| Error::Parse(e.to_string()))
    }
}

#[derive(Serialize)]
struct IterationRecordFile {
    iteration: usize,
    k_z: Vec<Vec<f64>>,
    gain_update: f64,
    stein_residual: f64,
    rho_closed_loop: f64,
    wall_secs: f64,
}

#[derive(Serialize)]
struct QlReportFile {
    nu: usize,
    z_dim: usize,
    epsilon: f64,
    max_iters: usize,
    converged: bool,
    iters_used: usize,
    learn_secs: f64,
    initial_gain: Vec<Vec<f64>>,
    iterations: Vec<IterationRecordFile>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

impl From<&QlReport> for QlReportFile {
    fn from(r: &QlReport) -> Self {
        QlReportFile {
            nu: r.nu,
            z_dim: r.z_dim,
            epsilon: r.epsilon,
            max_iters: r.max_iters,
            converged: r.converged,
            iters_used: r.iters_used,
            learn_secs: r.learn_secs,
            initial_gain: rows_of(&r.initial_gain),
            iterations: r
                .iterations
                .iter()
                .map(|it| IterationRecordFile {
                    iteration: it.iteration,
                    k_z: rows_of(&it.k_z),
                    gain_update: it.gain_update,
                    stein_residual: it.stein_residual,
                    rho_closed_loop: it.rho_closed_loop,
                    wall_secs: it.wall_secs,
                })
                .collect(),
        }
    }
}

/// Knobs for [`run`]; `initial_gain` overrides the data-derived start.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub epsilon: f64,
    pub max_iters: usize,
    pub initial_gain: Option<DMatrix<f64>>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            epsilon: DEFAULT_EPSILON,
            max_iters: DEFAULT_MAX_ITERS,
            initial_gain: None,
        }
    }
}

/// Exact linear dynamics of the non-minimal state, identified from data.
///
/// Under the basis rank condition the system `z_{k+1} = A_z z_k + B_z u_k`
/// is consistent; the least-squares solve therefore reproduces it (near)
/// exactly, and a large residual is reported as an error.
pub fn identify_z_dynamics(basis: &NonMinBasis) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let q = basis.z_dim;
    let m = basis.input_dim;
    let n_cols = basis.z0.ncols();
    let mut zeta = DMatrix::zeros(q + m, n_cols);
    zeta.view_mut((0, 0), (q, n_cols)).copy_from(&basis.z0);
    zeta.view_mut((q, 0), (m, n_cols)).copy_from(&basis.u0);

    // M [Z0; U0] = Z1 row by row: zeta^T M^T = Z1^T.
    let svd = zeta.transpose().svd(true, true);
    let m_t = svd
        .solve(&basis.z1.transpose(), matlib::default_rank_tol(n_cols, q + m, svd.singular_values.max()))
        .map_err(|e| Error::Initialization(format!("z-dynamics least squares failed: {e}")))?;
    let m_mat = m_t.transpose();
    let residual = (&m_mat * &zeta - &basis.z1).norm();
    let scale = basis.z1.norm().max(1.0);
    if residual > 1e-6 * scale {
        return Err(Error::Initialization(format!(
            "identified z-dynamics are inconsistent with the data (residual {:.3e}); \
             the dataset does not come from a noise-free LTI system of this order",
            residual / scale
        )));
    }
    let a_z = m_mat.view((0, 0), (q, q)).into_owned();
    let b_z = m_mat.view((0, q), (q, m)).into_owned();
    Ok((a_z, b_z))
}

/// Output map of the non-minimal state, identified from data: `y_k = C_z z_k`
/// exactly along trajectories of a noise-free plant.
pub fn identify_output_map(basis: &NonMinBasis) -> Result<DMatrix<f64>> {
    let q = basis.z_dim;
    let n_cols = basis.z0.ncols();
    let svd = basis.z0.transpose().svd(true, true);
    let c_t = svd
        .solve(
            &basis.y0.transpose(),
            matlib::default_rank_tol(n_cols, q, svd.singular_values.max()),
        )
        .map_err(|e| Error::Initialization(format!("output-map least squares failed: {e}")))?;
    let c_z = c_t.transpose();
    let residual = (&c_z * &basis.z0 - &basis.y0).norm();
    let scale = basis.y0.norm().max(1.0);
    if residual > 1e-6 * scale {
        return Err(Error::Initialization(format!(
            "identified output map inconsistent with the data (residual {:.3e})",
            residual / scale
        )));
    }
    Ok(c_z)
}

/// Data-derived initial stabilizing policy.
///
/// The exact z-dynamics and output map are identified from the same offline
/// data and a stabilizing gain is obtained from a Riccati solve on the
/// identified model with unit output and input weights. Weighting the
/// outputs (rather than the raw non-minimal state) keeps the gain on the
/// physical row space, so it excites no spurious modes of the non-minimal
/// coordinates. No plant matrices are involved at any point.
pub fn initial_policy(basis: &NonMinBasis) -> Result<PolicyGain> {
    let (a_z, b_z) = identify_z_dynamics(basis)?;
    let c_z = identify_output_map(basis)?;
    let m = basis.input_dim;
    let q0 = matlib::symmetrize(&(c_z.transpose() * &c_z));
    let (_, k) = matlib::dare_solve(&a_z, &b_z, &q0, &DMatrix::identity(m, m))
        .map_err(|e| Error::Initialization(format!("stabilizing Riccati solve failed: {e}")))?;
    let rho = matlib::spectral_radius(&(&a_z - &b_z * &k))?;
    if rho >= 1.0 {
        return Err(Error::Initialization(format!(
            "identified closed loop not Schur (rho = {rho:.6})"
        )));
    }
    Ok(PolicyGain {
        k_z: k,
        iteration: 0,
        closed_loop_radius: Some(rho),
    })
}

/// Stack the successor columns under the current policy:
/// `Sigma = [Z_succ; -K_z Z_succ]`.
pub fn build_sigma(k_z: &DMatrix<f64>, z_succ: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = z_succ.nrows();
    let m = k_z.nrows();
    if k_z.ncols() != q {
        return Err(Error::Dimension(format!(
            "gain is {}x{} but successors have {} rows",
            m,
            k_z.ncols(),
            q
        )));
    }
    let nu = q + m;
    if z_succ.ncols() != nu {
        return Err(Error::Dimension(format!(
            "expected {nu} successor columns, got {}",
            z_succ.ncols()
        )));
    }
    let mut sigma = DMatrix::zeros(nu, nu);
    sigma.view_mut((0, 0), (q, nu)).copy_from(z_succ);
    sigma.view_mut((q, 0), (m, nu)).copy_from(&(-(k_z * z_succ)));
    Ok(sigma)
}

fn qhat(qy: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let p = qy.nrows();
    let m = r.nrows();
    let mut q = DMatrix::zeros(p + m, p + m);
    q.view_mut((0, 0), (p, p)).copy_from(qy);
    q.view_mut((p, p), (m, m)).copy_from(r);
    q
}

fn check_weights(qy: &DMatrix<f64>, r: &DMatrix<f64>, p: usize, m: usize) -> Result<()> {
    if qy.nrows() != p || qy.ncols() != p {
        return Err(Error::Dimension(format!(
            "Qy must be {p}x{p}, got {}x{}",
            qy.nrows(),
            qy.ncols()
        )));
    }
    if r.nrows() != m || r.ncols() != m {
        return Err(Error::Dimension(format!(
            "R must be {m}x{m}, got {}x{}",
            r.nrows(),
            r.ncols()
        )));
    }
    if matlib::symmetrize(qy).cholesky().is_none() {
        return Err(Error::Degenerate("Qy must be positive definite".into()));
    }
    if matlib::symmetrize(r).cholesky().is_none() {
        return Err(Error::Degenerate("R must be positive definite".into()));
    }
    Ok(())
}

/// Solve the model-free Bellman equation for the Q-function of the policy
/// encoded in `sigma`.
pub fn policy_eval(
    basis: &NonMinBasis,
    qy: &DMatrix<f64>,
    r: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> Result<ThetaZ> {
    check_weights(qy, r, basis.output_dim, basis.input_dim)?;
    let c0 = matlib::symmetrize(&(basis.w.transpose() * qhat(qy, r) * &basis.w));
    let theta = matlib::solve_generalized_stein(&basis.zmat, sigma, &c0)?;

    let theta = ThetaZ::new(theta, basis.z_dim, basis.input_dim)?;
    // Theta_uu = R + B^T P B must be positive definite for any valid policy.
    if theta.theta_uu().cholesky().is_none() {
        return Err(Error::Degenerate(
            "Theta_uu block not positive definite".into(),
        ));
    }
    // The full matrix is PSD up to solver tolerance.
    let evs = theta.full().symmetric_eigenvalues();
    let top = evs.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if evs.min() < -1e-6 * top.max(1.0) {
        return Err(Error::Degenerate(format!(
            "Theta_z has eigenvalue {:.3e}, not PSD at tolerance",
            evs.min()
        )));
    }
    Ok(theta)
}

/// Greedy policy with respect to a Q-function: `K = Theta_uu^{-1} Theta_uz`,
/// computed by a Cholesky solve.
pub fn policy_improve(theta: &ThetaZ) -> Result<PolicyGain> {
    let uu = theta.theta_uu();
    let chol = uu
        .cholesky()
        .ok_or_else(|| Error::Degenerate("Theta_uu singular at tolerance".into()))?;
    Ok(PolicyGain {
        k_z: chol.solve(&theta.theta_uz()),
        iteration: 0,
        closed_loop_radius: None,
    })
}

/// Run the full learning loop on a dataset.
///
/// Constructs `Gamma`, the state sequence and the basis, then iterates
/// policy evaluation and improvement until the gain update drops below
/// `opts.epsilon` or `opts.max_iters` is reached. Hitting the cap is not an
/// error: the report comes back with `converged = false`.
pub fn run(
    dataset: &IoDataset,
    qy: &DMatrix<f64>,
    r: &DMatrix<f64>,
    opts: &RunOptions,
) -> Result<QlReport> {
    let lag = dataset.lag();
    let n = dataset.state_order();
    let gamma = nonmin::compute_gamma(dataset, lag, n)?;
    let z = nonmin::build_z(dataset, &gamma, lag)?;
    let basis = nonmin::build_basis(dataset, &z)?;
    run_with_basis(&basis, qy, r, opts)
}

/// [`run`] on a pre-built basis. Timing starts here: initialization and the
/// iterations are measured, data preparation is not.
pub fn run_with_basis(
    basis: &NonMinBasis,
    qy: &DMatrix<f64>,
    r: &DMatrix<f64>,
    opts: &RunOptions,
) -> Result<QlReport> {
    check_weights(qy, r, basis.output_dim, basis.input_dim)?;
    let t_learn = Instant::now();

    let (a_z, b_z) = identify_z_dynamics(basis)?;
    let initial = match &opts.initial_gain {
        Some(k) => {
            if k.nrows() != basis.input_dim || k.ncols() != basis.z_dim {
                return Err(Error::Dimension(format!(
                    "initial gain must be {}x{}, got {}x{}",
                    basis.input_dim,
                    basis.z_dim,
                    k.nrows(),
                    k.ncols()
                )));
            }
            k.clone()
        }
        None => initial_policy(basis)?.k_z,
    };

    let c0 = matlib::symmetrize(&(basis.w.transpose() * qhat(qy, r) * &basis.w));
    let c0_norm = c0.norm().max(f64::MIN_POSITIVE);

    let mut k_current = initial.clone();
    let mut iterations = Vec::with_capacity(opts.max_iters);
    let mut converged = false;
    for i in 0..opts.max_iters {
        let t_iter = Instant::now();
        let rho = matlib::spectral_radius(&(&a_z - &b_z * &k_current))
            .map_err(|e| e.at_iteration(i + 1))?;
        let sigma = build_sigma(&k_current, &basis.z_succ).map_err(|e| e.at_iteration(i + 1))?;
        let theta = policy_eval(basis, qy, r, &sigma).map_err(|e| e.at_iteration(i + 1))?;
        let improved = policy_improve(&theta).map_err(|e| e.at_iteration(i + 1))?;
        let residual = (basis.zmat.transpose() * theta.full() * &basis.zmat
            - &c0
            - sigma.transpose() * theta.full() * &sigma)
            .norm()
            / c0_norm;

        let gain_update = (&improved.k_z - &k_current).norm();
        k_current = improved.k_z;
        iterations.push(IterationRecord {
            iteration: i + 1,
            k_z: k_current.clone(),
            gain_update,
            stein_residual: residual,
            rho_closed_loop: rho,
            wall_secs: t_iter.elapsed().as_secs_f64(),
        });
        if gain_update <= opts.epsilon {
            converged = true;
            break;
        }
    }

    Ok(QlReport {
        initial_gain: initial,
        iters_used: iterations.len(),
        iterations,
        converged,
        learn_secs: t_learn.elapsed().as_secs_f64(),
        nu: basis.nu,
        z_dim: basis.z_dim,
        epsilon: opts.epsilon,
        max_iters: opts.max_iters,
    })
}

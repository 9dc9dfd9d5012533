//! Dense matrix kernels: block-Hankel assembly, persistence-of-excitation
//! tests, rank-revealing row/column selection, Stein-type equation solvers
//! and a doubling DARE solver.
//!
//! Everything works on `nalgebra::DMatrix<f64>` with column `k` of a signal
//! matrix holding the sample at time `k`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative residual tolerance enforced by the Stein solvers.
pub const STEIN_RTOL: f64 = 1e-9;
/// Relative step threshold for the doubling DARE iteration.
pub const DARE_STEP_TOL: f64 = 1e-12;
/// Relative DARE residual enforced after refinement.
pub const DARE_RESIDUAL_RTOL: f64 = 1e-10;
/// Largest dimension solved by direct Kronecker vectorization. The direct
/// solve costs O(nu^6); past this point the squared Smith iteration is both
/// faster and equally accurate.
pub const KRONECKER_MAX_DIM: usize = 8;

/// Outcome of a rank-revealing row or column selection.
#[derive(Debug, Clone, PartialEq)]
pub struct RankDecision {
    /// Indices in pivot order; the corresponding submatrix has full rank.
    pub selected_indices: Vec<usize>,
    pub numeric_rank: usize,
    pub tolerance_used: f64,
}

/// `(M + M^T) / 2`; applied to every symmetric-by-contract output so
/// floating-point asymmetry cannot accumulate through iterations.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Largest singular value (matrix 2-norm).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Scale-invariant default rank tolerance: `max(rows, cols) * eps * sigma_max`.
pub fn default_rank_tol(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

/// Numeric rank from singular values. Returns the rank and the tolerance
/// actually applied.
pub fn numeric_rank(m: &DMatrix<f64>, tol: Option<f64>) -> (usize, f64) {
    if m.nrows() == 0 || m.ncols() == 0 {
        return (0, tol.unwrap_or(0.0));
    }
    let sv = m.singular_values();
    let tol = tol.unwrap_or_else(|| default_rank_tol(m.nrows(), m.ncols(), sv.max()));
    (sv.iter().filter(|&&s| s > tol).count(), tol)
}

/// Depth-`depth` block Hankel matrix of an `eta x len` signal.
///
/// Column `j` is the stacked window `s_j, ..., s_{j+depth-1}`, so the result
/// is `eta*depth x (len - depth + 1)`.
pub fn hankel(signal: &DMatrix<f64>, depth: usize) -> Result<DMatrix<f64>> {
    let eta = signal.nrows();
    let len = signal.ncols();
    if depth == 0 {
        return Err(Error::Dimension("hankel depth must be >= 1".into()));
    }
    if len < depth {
        return Err(Error::Dimension(format!(
            "hankel: signal length {len} shorter than depth {depth}"
        )));
    }
    let cols = len - depth + 1;
    let mut h = DMatrix::zeros(eta * depth, cols);
    for j in 0..cols {
        for i in 0..depth {
            h.view_mut((i * eta, j), (eta, 1))
                .copy_from(&signal.column(j + i));
        }
    }
    Ok(h)
}

/// Horizontal concatenation of per-episode Hankel matrices (mosaic Hankel).
/// Episodes shorter than `depth` contribute no columns.
pub fn mosaic_hankel(signals: &[DMatrix<f64>], depth: usize) -> Result<DMatrix<f64>> {
    let blocks: Vec<DMatrix<f64>> = signals
        .iter()
        .filter(|s| s.ncols() >= depth)
        .map(|s| hankel(s, depth))
        .collect::<Result<_>>()?;
    if blocks.is_empty() {
        return Err(Error::Dimension(format!(
            "mosaic hankel: no episode is at least {depth} samples long"
        )));
    }
    let eta = blocks[0].nrows();
    let total: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut h = DMatrix::zeros(eta, total);
    let mut at = 0;
    for b in &blocks {
        h.view_mut((0, at), (eta, b.ncols())).copy_from(b);
        at += b.ncols();
    }
    Ok(h)
}

/// Persistence of excitation of order `order`: the depth-`order` Hankel
/// matrix of the signal has full row rank. Degenerate shapes return `false`.
pub fn is_pe(signal: &DMatrix<f64>, order: usize, tol: Option<f64>) -> bool {
    let eta = signal.nrows();
    let len = signal.ncols();
    if order == 0 || eta == 0 || len < order || len - order + 1 < eta * order {
        return false;
    }
    let h = match hankel(signal, order) {
        Ok(h) => h,
        Err(_) => return false,
    };
    let (rank, _) = numeric_rank(&h, tol);
    rank == eta * order
}

/// Collective persistence of excitation across episodes: the mosaic Hankel
/// of all episodes long enough to contribute windows has full row rank.
pub fn is_collectively_pe(signals: &[DMatrix<f64>], order: usize, tol: Option<f64>) -> bool {
    if order == 0 || signals.is_empty() {
        return false;
    }
    let eta = signals[0].nrows();
    let h = match mosaic_hankel(signals, order) {
        Ok(h) => h,
        Err(_) => return false,
    };
    if h.ncols() < eta * order {
        return false;
    }
    let (rank, _) = numeric_rank(&h, tol);
    rank == eta * order
}

/// Greedy pivoted selection of `target` linearly independent vectors.
///
/// Classic column-pivoted Gram-Schmidt: at each step the candidate with the
/// largest residual norm is taken, exact ties going to the smallest index.
/// With `reverse` set the pivot rule changes entirely: candidates are taken
/// from the highest index downward, keeping each one that is independent of
/// the basis so far. That yields a different (still valid) selection and is
/// used to probe selection invariance. `seeds` are forced into the basis
/// first but never reported.
pub(crate) fn pivoted_select(
    candidates: &[DVector<f64>],
    seeds: &[DVector<f64>],
    target: usize,
    tol: Option<f64>,
    admissible: Option<&[usize]>,
    reverse: bool,
) -> Result<Vec<usize>> {
    let dim = candidates
        .first()
        .or(seeds.first())
        .map(|v| v.len())
        .unwrap_or(0);
    let max_norm = candidates
        .iter()
        .chain(seeds.iter())
        .map(|v| v.norm())
        .fold(0.0f64, f64::max);
    let thresh = tol.unwrap_or_else(|| {
        default_rank_tol(dim, candidates.len() + seeds.len(), max_norm).max(f64::EPSILON)
    });

    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(seeds.len() + target);
    for (i, s) in seeds.iter().enumerate() {
        let mut r = s.clone();
        // Re-orthogonalize twice for numerical safety.
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&r);
                r.axpy(-c, q, 1.0);
            }
        }
        let n = r.norm();
        if n <= thresh {
            return Err(Error::RankDeficient {
                achieved: i,
                target: seeds.len(),
                tol: thresh,
            });
        }
        basis.push(r / n);
    }

    let allowed: Vec<usize> = match admissible {
        Some(ix) => ix.to_vec(),
        None => (0..candidates.len()).collect(),
    };
    let mut residuals: Vec<(usize, DVector<f64>)> = allowed
        .iter()
        .map(|&i| {
            let mut r = candidates[i].clone();
            for _ in 0..2 {
                for q in &basis {
                    let c = q.dot(&r);
                    r.axpy(-c, q, 1.0);
                }
            }
            (i, r)
        })
        .collect();

    let mut picked = Vec::with_capacity(target);
    while picked.len() < target {
        let mut best: Option<(usize, usize, f64)> = None;
        for (slot, (idx, r)) in residuals.iter().enumerate() {
            let idx = *idx;
            let n = r.norm();
            let better = if reverse {
                // Latest independent candidate wins outright.
                n > thresh && best.is_none_or(|(_, bi, _)| idx > bi)
            } else {
                // Largest residual wins; exact ties go to the smallest index.
                match best {
                    None => true,
                    Some((_, bi, bn)) => n > bn || (n == bn && idx < bi),
                }
            };
            if better {
                best = Some((slot, idx, n));
            }
        }
        let (slot, _, norm) = best.ok_or(Error::RankDeficient {
            achieved: picked.len(),
            target,
            tol: thresh,
        })?;
        if norm <= thresh {
            return Err(Error::RankDeficient {
                achieved: picked.len(),
                target,
                tol: thresh,
            });
        }
        let (idx, r) = residuals.swap_remove(slot);
        let q = r / norm;
        for (_, rest) in residuals.iter_mut() {
            let c = q.dot(rest);
            rest.axpy(-c, &q, 1.0);
        }
        basis.push(q);
        picked.push(idx);
    }
    Ok(picked)
}

fn verify_selection(sub: &DMatrix<f64>, target: usize) -> Result<f64> {
    let sv = sub.singular_values();
    let tol = default_rank_tol(sub.nrows(), sub.ncols(), sv.max());
    let rank = sv.iter().filter(|&&s| s > tol).count();
    if rank < target {
        return Err(Error::RankDeficient {
            achieved: rank,
            target,
            tol,
        });
    }
    Ok(tol)
}

/// Select `target` linearly independent rows of `m`.
///
/// Deterministic: pivot on the largest residual norm, smallest index on ties,
/// so repeated calls on the same input return identical indices.
pub fn select_li_rows(m: &DMatrix<f64>, target: usize, tol: Option<f64>) -> Result<RankDecision> {
    if target > m.nrows() {
        return Err(Error::Dimension(format!(
            "cannot select {target} rows from a {}-row matrix",
            m.nrows()
        )));
    }
    let rows: Vec<DVector<f64>> = (0..m.nrows())
        .map(|i| m.row(i).transpose().into_owned())
        .collect();
    let picked = pivoted_select(&rows, &[], target, tol, None, false)?;
    let sub = DMatrix::from_fn(target, m.ncols(), |i, j| m[(picked[i], j)]);
    let tolerance_used = verify_selection(&sub, target)?;
    Ok(RankDecision {
        selected_indices: picked,
        numeric_rank: target,
        tolerance_used,
    })
}

/// Select `target` linearly independent columns of `m`, optionally restricted
/// to an admissible index set.
pub fn select_li_cols(
    m: &DMatrix<f64>,
    target: usize,
    tol: Option<f64>,
    admissible: Option<&[usize]>,
) -> Result<RankDecision> {
    let pool = admissible.map_or(m.ncols(), |a| a.len());
    if target > pool {
        return Err(Error::Dimension(format!(
            "cannot select {target} columns from {pool} admissible ones"
        )));
    }
    if let Some(a) = admissible {
        if let Some(&bad) = a.iter().find(|&&i| i >= m.ncols()) {
            return Err(Error::Dimension(format!(
                "admissible column index {bad} out of bounds for {} columns",
                m.ncols()
            )));
        }
    }
    let cols: Vec<DVector<f64>> = (0..m.ncols()).map(|j| m.column(j).into_owned()).collect();
    let picked = pivoted_select(&cols, &[], target, tol, admissible, false)?;
    let sub = DMatrix::from_fn(m.nrows(), target, |i, j| m[(i, picked[j])]);
    let tolerance_used = verify_selection(&sub, target)?;
    Ok(RankDecision {
        selected_indices: picked,
        numeric_rank: target,
        tolerance_used,
    })
}

/// Spectral radius `max |lambda_i|` of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "spectral radius of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.is_empty() {
        return Ok(0.0);
    }
    if !all_finite(m) {
        return Err(Error::NonFinite);
    }
    Ok(m.complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max))
}

/// Backend choice for the Stein solvers; `Auto` switches on dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SteinBackend {
    Auto,
    Kronecker,
    Smith,
}

fn stein_kronecker(g: &DMatrix<f64>, qt: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let nu = g.nrows();
    let gt = g.transpose();
    let big = DMatrix::identity(nu * nu, nu * nu) - gt.kronecker(&gt);
    let rhs = DVector::from_column_slice(qt.as_slice());
    let sol = big
        .lu()
        .solve(&rhs)
        .ok_or(Error::IllConditioned { sigma_min: 0.0 })?;
    Ok(DMatrix::from_column_slice(nu, nu, sol.as_slice()))
}

fn stein_smith(g: &DMatrix<f64>, qt: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    // Squared Smith iteration: Theta_{j+1} = Theta_j + G_j^T Theta_j G_j,
    // G_{j+1} = G_j^2. Doubles the number of accumulated series terms per step.
    let mut theta = qt.clone();
    let mut gj = g.clone();
    for _ in 0..200 {
        let update = gj.transpose() * &theta * &gj;
        let unorm = update.norm();
        theta += update;
        if !all_finite(&theta) {
            return Err(Error::NoConvergence {
                iters: 200,
                residual: f64::INFINITY,
            });
        }
        if unorm <= 0.5 * f64::EPSILON * theta.norm() {
            return Ok(theta);
        }
        gj = &gj * &gj;
    }
    Err(Error::NoConvergence {
        iters: 200,
        residual: f64::NAN,
    })
}

fn stein_core(g: &DMatrix<f64>, qt: &DMatrix<f64>, backend: SteinBackend) -> Result<DMatrix<f64>> {
    match backend {
        SteinBackend::Kronecker => stein_kronecker(g, qt),
        SteinBackend::Smith => stein_smith(g, qt),
        SteinBackend::Auto => {
            if g.nrows() <= KRONECKER_MAX_DIM {
                stein_kronecker(g, qt)
            } else {
                stein_smith(g, qt)
            }
        }
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let asym = (m - m.transpose()).norm() / m.norm().max(1.0);
    if asym > 1e-8 {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Solve the discrete-time Lyapunov (Stein) equation
/// `Theta = G^T Theta G + Qt` for symmetric `Theta`.
///
/// Requires `rho(G) < 1`. The result is symmetrized and satisfies the
/// fixed-point equation to a relative residual of [`STEIN_RTOL`].
pub fn solve_stein(g: &DMatrix<f64>, qt: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    solve_stein_with(g, qt, SteinBackend::Auto)
}

/// [`solve_stein`] with an explicit backend; the Kronecker route doubles as
/// the cross-check oracle for the Smith route in tests.
pub fn solve_stein_with(
    g: &DMatrix<f64>,
    qt: &DMatrix<f64>,
    backend: SteinBackend,
) -> Result<DMatrix<f64>> {
    let nu = g.nrows();
    if g.ncols() != nu || qt.nrows() != nu || qt.ncols() != nu {
        return Err(Error::Dimension(format!(
            "stein: G is {}x{}, Qt is {}x{}",
            g.nrows(),
            g.ncols(),
            qt.nrows(),
            qt.ncols()
        )));
    }
    if !all_finite(g) || !all_finite(qt) {
        return Err(Error::NonFinite);
    }
    check_symmetric(qt)?;
    let rho = spectral_radius(g)?;
    if rho >= 1.0 {
        return Err(Error::Unstable { rho });
    }
    let qts = symmetrize(qt);
    let mut theta = symmetrize(&stein_core(g, &qts, backend)?);

    // Iterative refinement on the defect keeps the contract at scale.
    let tol = STEIN_RTOL * qts.norm();
    for _ in 0..3 {
        let defect = &qts + g.transpose() * &theta * g - &theta;
        if defect.norm() <= tol {
            return Ok(theta);
        }
        let corr = stein_core(g, &symmetrize(&defect), backend)?;
        theta = symmetrize(&(theta + corr));
    }
    let residual = (&qts + g.transpose() * &theta * g - &theta).norm();
    if residual <= tol {
        Ok(theta)
    } else {
        Err(Error::ResidualTooLarge { residual, tol })
    }
}

/// Solve the generalized discrete-time Lyapunov equation
/// `Z^T Theta Z = C0 + Sigma^T Theta Sigma`.
///
/// Reduces to a standard Stein equation with `G = Sigma Z^{-1}` and
/// `Qt = Z^{-T} C0 Z^{-1}`; the residual of the original equation is enforced
/// to [`STEIN_RTOL`] relative to `||C0||_F`.
pub fn solve_generalized_stein(
    z: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    c0: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let nu = z.nrows();
    if z.ncols() != nu || sigma.nrows() != nu || sigma.ncols() != nu || c0.nrows() != nu || c0.ncols() != nu {
        return Err(Error::Dimension(
            "generalized stein: Z, Sigma, C0 must be square of equal size".into(),
        ));
    }
    if !all_finite(z) || !all_finite(sigma) || !all_finite(c0) {
        return Err(Error::NonFinite);
    }
    check_symmetric(c0)?;

    let sv = z.singular_values();
    let sigma_min = sv.min();
    let z_tol = default_rank_tol(nu, nu, sv.max());
    if sigma_min <= z_tol {
        return Err(Error::IllConditioned { sigma_min });
    }
    let z_inv = z.clone().lu().try_inverse().ok_or(Error::IllConditioned { sigma_min })?;

    let g = sigma * &z_inv;
    let rho = spectral_radius(&g)?;
    if rho >= 1.0 {
        return Err(Error::Unstable { rho });
    }
    let c0s = symmetrize(c0);
    let qt = symmetrize(&(z_inv.transpose() * &c0s * &z_inv));
    let backend = SteinBackend::Auto;
    let mut theta = symmetrize(&stein_core(&g, &qt, backend)?);

    // Refine against the original equation, not the reduced one.
    let tol = STEIN_RTOL * c0s.norm();
    for _ in 0..3 {
        let defect = &c0s + sigma.transpose() * &theta * sigma - z.transpose() * &theta * z;
        if defect.norm() <= tol {
            return Ok(theta);
        }
        let defect_reduced = symmetrize(&(z_inv.transpose() * symmetrize(&defect) * &z_inv));
        let corr = stein_core(&g, &defect_reduced, backend)?;
        theta = symmetrize(&(theta + corr));
    }
    let residual =
        (&c0s + sigma.transpose() * &theta * sigma - z.transpose() * &theta * z).norm();
    if residual <= tol {
        Ok(theta)
    } else {
        Err(Error::ResidualTooLarge { residual, tol })
    }
}

fn dare_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let middle = symmetrize(&(r + b.transpose() * p * b));
    let chol = middle
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Degenerate("R + B^T P B not positive definite".into()))?;
    Ok(chol.solve(&(b.transpose() * p * a)))
}

fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
) -> f64 {
    (a.transpose() * p * a - p - a.transpose() * p * b * k + q).norm()
}

/// Stabilizing solution of the discrete algebraic Riccati equation and the
/// associated feedback gain `K = (R + B^T P B)^{-1} B^T P A`.
///
/// Structure-preserving doubling iteration, followed by Newton refinement if
/// the residual contract (`<= 1e-10 ||P||_F`) is not already met.
pub fn dare_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n || r.nrows() != m || r.ncols() != m {
        return Err(Error::Dimension(format!(
            "dare: A {}x{}, B {}x{}, Q {}x{}, R {}x{}",
            a.nrows(), a.ncols(), b.nrows(), b.ncols(),
            q.nrows(), q.ncols(), r.nrows(), r.ncols(),
        )));
    }
    check_symmetric(q)?;
    check_symmetric(r)?;
    let qs = symmetrize(q);
    if qs.symmetric_eigenvalues().min() < -1e-8 * qs.norm().max(1.0) {
        return Err(Error::Degenerate("Q must be positive semi-definite".into()));
    }
    let r_chol = symmetrize(r)
        .cholesky()
        .ok_or_else(|| Error::Degenerate("R must be positive definite".into()))?;

    // Doubling iteration on (A_k, G_k, H_k); H_k converges to P.
    let mut ak = a.clone();
    let mut gk = symmetrize(&(b * r_chol.solve(&b.transpose())));
    let mut hk = qs.clone();
    let eye = DMatrix::identity(n, n);
    let mut iters = 0usize;
    let cap = 10_000usize;
    loop {
        iters += 1;
        let lu = (&eye + &gk * &hk).lu();
        let sa = lu.solve(&ak).ok_or(Error::NoConvergence {
            iters,
            residual: f64::NAN,
        })?;
        let sg = lu.solve(&gk).ok_or(Error::NoConvergence {
            iters,
            residual: f64::NAN,
        })?;
        let a_next = &ak * &sa;
        let g_next = symmetrize(&(&gk + &ak * &sg * ak.transpose()));
        let h_next = symmetrize(&(&hk + ak.transpose() * &hk * &sa));
        if !all_finite(&h_next) || !all_finite(&a_next) {
            return Err(Error::NoConvergence {
                iters,
                residual: f64::INFINITY,
            });
        }
        let step = (&h_next - &hk).norm() / h_next.norm().max(f64::MIN_POSITIVE);
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if step <= DARE_STEP_TOL {
            break;
        }
        if iters >= cap {
            let k = dare_gain(a, b, r, &hk)?;
            return Err(Error::NoConvergence {
                iters,
                residual: dare_residual(a, b, &qs, &hk, &k),
            });
        }
    }

    let mut p = symmetrize(&hk);
    let mut k = dare_gain(a, b, r, &p)?;
    let tol = DARE_RESIDUAL_RTOL * p.norm();
    if dare_residual(a, b, &qs, &p, &k) > tol {
        // Newton-Kleinman refinement: re-evaluate the current policy exactly.
        for _ in 0..5 {
            let closed = a - b * &k;
            let cost = symmetrize(&(&qs + k.transpose() * r * &k));
            p = solve_stein(&closed, &cost)?;
            k = dare_gain(a, b, r, &p)?;
            if dare_residual(a, b, &qs, &p, &k) <= tol {
                break;
            }
        }
    }
    let residual = dare_residual(a, b, &qs, &p, &k);
    if residual > tol {
        return Err(Error::NoConvergence { iters, residual });
    }
    let rho = spectral_radius(&(a - b * &k))?;
    if rho >= 1.0 {
        return Err(Error::Unstable { rho });
    }
    Ok((p, k))
}

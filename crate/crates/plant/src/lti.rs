//! Discrete-time LTI plants: validation, simulation, random generation.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use qreg_core::matlib;
use qreg_core::nonmin::GammaDecomposition;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimal state-space plant `x_{k+1} = A x_k + B u_k`, `y_k = C x_k`,
/// with the lag (observability index) cached at construction.
#[derive(Debug, Clone)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    lag: usize,
    seed: Option<u64>,
}

impl LtiSystem {
    /// Validates dimensions, finiteness and minimality (controllability and
    /// observability at numeric rank tolerance), then caches the lag.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || c.ncols() != n || n == 0 {
            return Err(Error::Dimension(format!(
                "A {}x{}, B {}x{}, C {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols()
            )));
        }
        if b.ncols() == 0 || c.nrows() == 0 {
            return Err(Error::Dimension("need at least one input and output".into()));
        }
        if !matlib::all_finite(&a) || !matlib::all_finite(&b) || !matlib::all_finite(&c) {
            return Err(Error::Core(qreg_core::Error::NonFinite));
        }

        // Controllability: rank [B, AB, ..., A^{n-1}B] = n.
        let m = b.ncols();
        let mut ctrb = DMatrix::zeros(n, n * m);
        let mut block = b.clone();
        for i in 0..n {
            ctrb.view_mut((0, i * m), (n, m)).copy_from(&block);
            block = &a * &block;
        }
        if matlib::numeric_rank(&ctrb, None).0 < n {
            return Err(Error::NotControllable);
        }

        let lag = observability_lag(&a, &c).ok_or(Error::NotObservable)?;
        let p = c.nrows();
        debug_assert!(lag <= n && n <= p * lag);

        Ok(LtiSystem {
            a,
            b,
            c,
            lag,
            seed: None,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    /// Observability index: smallest `j` with `rank [C; CA; ...; CA^{j-1}] = n`.
    pub fn lag(&self) -> usize {
        self.lag
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn spectral_radius(&self) -> f64 {
        matlib::spectral_radius(&self.a).expect("square by construction")
    }

    pub fn is_stable(&self) -> bool {
        self.spectral_radius() < 1.0
    }

    /// Exact recursion from `x0` under the input sequence `u` (`m x T`).
    /// Returns outputs and states for `k = 0..=T`, so `y` has one more
    /// column than `u`.
    pub fn simulate(&self, x0: &DVector<f64>, u: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let n = self.state_dim();
        if x0.len() != n || u.nrows() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "x0 has {} entries, u has {} rows; system is n={}, m={}",
                x0.len(),
                u.nrows(),
                n,
                self.input_dim()
            )));
        }
        let t = u.ncols();
        let mut xs = DMatrix::zeros(n, t + 1);
        let mut ys = DMatrix::zeros(self.output_dim(), t + 1);
        let mut x = x0.clone();
        for k in 0..=t {
            xs.set_column(k, &x);
            ys.set_column(k, &(&self.c * &x));
            if k < t {
                x = &self.a * &x + &self.b * u.column(k);
            }
        }
        Ok((ys, xs))
    }

    /// Closed-loop rollout under the output-feedback policy `u = -K_z z`.
    ///
    /// The first `lag` steps run open loop with zero input to fill the
    /// input/output windows, after which the policy takes over. Returns
    /// `horizon` outputs and inputs.
    pub fn rollout_output_feedback(
        &self,
        gamma: &GammaDecomposition,
        k_z: &DMatrix<f64>,
        x0: &DVector<f64>,
        horizon: usize,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let m = self.input_dim();
        let p = self.output_dim();
        let lag = gamma.lag();
        if gamma.input_dim() != m || gamma.output_dim() != p {
            return Err(Error::Dimension("Gamma does not match system channels".into()));
        }
        if k_z.nrows() != m || k_z.ncols() != gamma.z_dim() {
            return Err(Error::Dimension(format!(
                "gain must be {}x{}, got {}x{}",
                m,
                gamma.z_dim(),
                k_z.nrows(),
                k_z.ncols()
            )));
        }
        let mut x = x0.clone();
        let mut us = DMatrix::zeros(m, horizon);
        let mut ys = DMatrix::zeros(p, horizon);
        for k in 0..horizon {
            let y = &self.c * &x;
            ys.set_column(k, &y);
            let u = if k < lag {
                DVector::zeros(m)
            } else {
                let mut uw = DVector::zeros(m * lag);
                let mut yw = DVector::zeros(p * lag);
                for i in 0..lag {
                    uw.rows_mut(i * m, m).copy_from(&us.column(k - lag + i));
                    yw.rows_mut(i * p, p).copy_from(&ys.column(k - lag + i));
                }
                let mut z = DVector::zeros(gamma.z_dim());
                z.rows_mut(0, m * lag).copy_from(&uw);
                z.rows_mut(m * lag, gamma.state_order())
                    .copy_from(&gamma.compress(&yw));
                -(k_z * z)
            };
            us.set_column(k, &u);
            x = &self.a * &x + &self.b * &u;
        }
        Ok((ys, us))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&SystemFile::from(self)).expect("system serialization")
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, &SystemFile::from(self)).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: SystemFile = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        file.try_into()
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        let file: SystemFile = serde_json::from_reader(r).map_err(|e| Error::Parse(e.to_string()))?;
        file.try_into()
    }
}

fn observability_lag(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Option<usize> {
    let n = a.nrows();
    let p = c.nrows();
    let mut stack = DMatrix::zeros(p * n, n);
    let mut block = c.clone();
    for j in 0..n {
        stack.view_mut((j * p, 0), (p, n)).copy_from(&block);
        let so_far = stack.rows(0, (j + 1) * p).into_owned();
        if matlib::numeric_rank(&so_far, None).0 == n {
            return Some(j + 1);
        }
        block = &block * a;
    }
    None
}

/// Quadratic trajectory cost `sum_k y_k^T Qy y_k + u_k^T R u_k` over matched
/// output/input columns.
pub fn lq_cost(ys: &DMatrix<f64>, us: &DMatrix<f64>, qy: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    let t = ys.ncols().min(us.ncols());
    let mut cost = 0.0;
    for k in 0..t {
        let y = ys.column(k);
        let u = us.column(k);
        cost += (qy * y).dot(&y) + (r * u).dot(&u);
    }
    cost
}

/// Random minimal system with prescribed dimensions and stability class.
///
/// Entries are i.i.d. uniform on `[-1, 1]`; stable systems are rescaled to
/// spectral radius 0.9, unstable ones to a radius in `[1.1, 1.3]`. Those
/// targets keep even the hardest (weakly controllable or observable) modes
/// of the optimal closed loop clearly inside the unit circle, which the
/// decay certificates in the test suite rely on. Resamples until minimality
/// holds, deterministically in the seed.
pub fn random_system(n: usize, p: usize, m: usize, stable: bool, seed: u64) -> Result<LtiSystem> {
    if n == 0 || p == 0 || m == 0 {
        return Err(Error::Dimension("n, p, m must all be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attempts = 50;
    for _ in 0..attempts {
        let mut draw = |r: usize, c: usize| {
            let data: Vec<f64> = (0..r * c).map(|_| rng.random_range(-1.0..=1.0)).collect();
            DMatrix::from_row_slice(r, c, &data)
        };
        let mut a = draw(n, n);
        let b = draw(n, m);
        let c = draw(p, n);
        let rho = match matlib::spectral_radius(&a) {
            Ok(r) => r,
            Err(_) => continue,
        };
        if rho < 1e-9 {
            continue;
        }
        let target = if stable {
            0.9
        } else {
            rng.random_range(1.1..=1.3)
        };
        a *= target / rho;
        match LtiSystem::new(a, b, c) {
            Ok(sys) => return Ok(sys.with_seed(seed)),
            Err(Error::NotControllable) | Err(Error::NotObservable) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Generation { attempts })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemFile {
    n: usize,
    p: usize,
    m: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    seed: Option<u64>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
}

fn mat_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn rows_mat(rows: &[Vec<f64>], nr: usize, nc: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Parse(format!(
            "{what} must be {nr}x{nc} nested row-major arrays"
        )));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

impl From<&LtiSystem> for SystemFile {
    fn from(s: &LtiSystem) -> Self {
        SystemFile {
            n: s.state_dim(),
            p: s.output_dim(),
            m: s.input_dim(),
            seed: s.seed,
            a: mat_rows(&s.a),
            b: mat_rows(&s.b),
            c: mat_rows(&s.c),
        }
    }
}

impl TryFrom<SystemFile> for LtiSystem {
    type Error = Error;

    fn try_from(f: SystemFile) -> Result<Self> {
        let a = rows_mat(&f.a, f.n, f.n, "a")?;
        let b = rows_mat(&f.b, f.n, f.m, "b")?;
        let c = rows_mat(&f.c, f.p, f.n, "c")?;
        let sys = LtiSystem::new(a, b, c)?;
        Ok(match f.seed {
            Some(s) => sys.with_seed(s),
            None => sys,
        })
    }
}

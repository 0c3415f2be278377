//! Numerical cross-checks for the closed-form rules.
//!
//! Everything here deliberately avoids the backward recursion in
//! [`crate::strategy`]. The only shared assumption is the wealth separation
//! of exponential utility, which reduces the dynamic program to
//!
//! ```text
//! G_s(Y) = min_u E[ exp(-u' (X_{s+1} - r_{s+1} 1)) G_{s+1}(Y_{s+1}) | Y_s = Y ],
//! ```
//!
//! with G_T = 1 and the scaled decision u related to dollars by
//! a = u / (alpha D_s). The oracle solves this program by Gauss-Hermite
//! quadrature plus Newton minimization started at u = 0.
//!
//! A naive nested evaluation costs nodes^((k+p)(T-1)+k) and is hopeless past
//! T = 2, so continuation values are carried backward as quadratic fits of
//! log G on a tensor grid of states. The theory says log G is exactly
//! quadratic; the oracle does not take that on faith but refits each stage
//! and then verifies the fit at fresh random states drawn from a box that
//! provably contains every state the next stage will query (grid box mapped
//! through the dynamics, padded by the largest quadrature node). A residual
//! above `fit_tol` aborts the run: either the quadratic structure or the
//! quadrature resolution is broken, and silently continuing would make the
//! cross-check circular.
//!
//! The module also carries the Gaussian quadratic-form identities
//! (`mgf_*`) that the closed form rests on, and a brute-force
//! [`expected_utility`] that scores any policy by nested quadrature.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{symmetrize_checked, GaussHermite, SpdMatrix, TensorGrid};
use crate::model::{Scenario, VarModel};
use crate::strategy::ValueQuad;

/// State dimension above which the oracle refuses to run.
pub const MAX_STATE_DIM: usize = 3;
/// Horizon above which the oracle refuses to run.
pub const MAX_HORIZON: usize = 4;

/// Tuning knobs for the numerical solver.
#[derive(Clone, Debug)]
pub struct OracleConfig {
    /// Gauss-Hermite nodes per dimension.
    pub nodes: usize,
    /// Grid offsets are {-2,-1,0,1,2} times this multiple of the marginal
    /// standard deviation of the state at each stage.
    pub fit_spread: f64,
    /// Newton stops when the sup norm of the gradient falls below this.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Largest tolerated residual when the quadratic fit of log G is
    /// re-checked at random states.
    pub fit_tol: f64,
    /// Random states per stage used for that re-check.
    pub check_states: usize,
    pub check_seed: u64,
    /// Upper bound on total quadrature-node evaluations.
    pub max_evals: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            nodes: 40,
            fit_spread: 1.0,
            grad_tol: 1e-12,
            max_iter: 200,
            fit_tol: 1e-7,
            check_states: 16,
            check_seed: 0x5eed,
            max_evals: 5e7,
        }
    }
}

/// Numeric solution at one decision period.
#[derive(Clone, Debug)]
pub struct OracleStage {
    pub period: usize,
    /// States where the problem was solved; the first stage-0 grid centers
    /// on the scenario's y0.
    pub states: Vec<DVector<f64>>,
    /// Minimizing scaled allocation at each state.
    pub scaled: Vec<DVector<f64>>,
    /// log G at each state.
    pub log_g: Vec<f64>,
    /// Largest |fit - recomputed| over the random re-check states; zero for
    /// the stage that needs no fit.
    pub max_check_residual: f64,
}

/// Full backward solution of the scaled program.
#[derive(Clone, Debug)]
pub struct OracleSolution {
    /// Stages in time order, s = 0..T-1.
    pub stages: Vec<OracleStage>,
    /// log G_0 at the scenario start state.
    pub log_g0: f64,
    /// Expected utility -exp(-alpha w0 Pi_0 + log G_0(y0)).
    pub value: f64,
}

/// Sup-norm deviation between two vectors relative to their common scale.
pub fn relative_deviation(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = a.amax().max(b.amax()).max(1e-8);
    (a - b).amax() / scale
}

// ---------------------------------------------------------------------------
// Gaussian quadratic-form expectations

/// Coefficients of E[exp(-(Y'PY)/2 - h'Y)] for Gaussian Y.
#[derive(Clone, Debug)]
pub struct QuadraticFormSpec {
    pub p_mat: DMatrix<f64>,
    pub h_vec: DVector<f64>,
}

impl QuadraticFormSpec {
    fn log_integrand(&self, y: &DVector<f64>) -> f64 {
        -0.5 * (y.transpose() * &self.p_mat * y)[(0, 0)] - self.h_vec.dot(y)
    }
}

/// Closed-form value of E[exp(-(Y'PY)/2 - h'Y)], Y ~ N(mean, cov):
///
/// ```text
/// |I + P S|^(-1/2) exp( (S^-1 m - h)' (S^-1 + P)^-1 (S^-1 m - h)/2 - m' S^-1 m / 2 )
/// ```
///
/// P may be indefinite; the expectation exists iff I + L' P L is positive
/// definite for the Cholesky factor L of S, which is exactly the condition
/// checked here.
pub fn mgf_quadratic(mean: &DVector<f64>, cov: &SpdMatrix, spec: &QuadraticFormSpec) -> Result<f64> {
    let n = mean.len();
    if cov.dim() != n || spec.p_mat.nrows() != n || spec.p_mat.ncols() != n || spec.h_vec.len() != n {
        return Err(Error::dim("quadratic form dimensions disagree"));
    }
    let p = symmetrize_checked(&spec.p_mat, "quadratic form coefficient")?;
    let ls = cov.factor();
    let m_hat = DMatrix::<f64>::identity(n, n) + ls.transpose() * &p * ls;
    let chol = Cholesky::new(symmetrize_checked(&m_hat, "I + L'PL")?).ok_or_else(|| {
        Error::NotPositiveDefinite("expectation diverges: I + L'PL is not positive definite".into())
    })?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let v = cov.solve_vec(mean) - &spec.h_vec;
    // (S^-1 + P)^-1 v = L Mhat^-1 L' v
    let m_inv_v = ls * chol.solve(&(ls.transpose() * &v));
    let quad = v.dot(&m_inv_v);
    let base = mean.dot(&cov.solve_vec(mean));
    Ok((-0.5 * log_det + 0.5 * quad - 0.5 * base).exp())
}

/// Same expectation by tensor Gauss-Hermite quadrature.
pub fn mgf_quadrature(
    mean: &DVector<f64>,
    cov: &SpdMatrix,
    spec: &QuadraticFormSpec,
    nodes: usize,
) -> Result<f64> {
    let n = mean.len();
    if n > 6 {
        return Err(Error::CostCap(format!(
            "quadrature over {n} dimensions with {nodes} nodes is not tractable"
        )));
    }
    let gh = GaussHermite::new(nodes)?;
    let ls = cov.factor();
    let mut terms: Vec<f64> = Vec::with_capacity(gh.len().pow(n as u32));
    let mut y = DVector::zeros(n);
    for idx in TensorGrid::new(n, gh.len()) {
        let mut logw = 0.0;
        for i in 0..n {
            let mut yi = mean[i];
            for l in 0..=i {
                yi += ls[(i, l)] * gh.nodes[idx[l]];
            }
            y[i] = yi;
            logw += gh.weights[idx[i]].ln();
        }
        terms.push(logw + spec.log_integrand(&y));
    }
    let m = terms.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v));
    let sum: f64 = terms.iter().map(|t| (t - m).exp()).sum();
    Ok((m + sum.ln()).exp())
}

/// Same expectation by plain Monte Carlo; returns (estimate, standard error).
pub fn mgf_monte_carlo(
    mean: &DVector<f64>,
    cov: &SpdMatrix,
    spec: &QuadraticFormSpec,
    draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if draws < 2 {
        return Err(Error::invalid("need at least two draws"));
    }
    let n = mean.len();
    let ls = cov.factor();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = DVector::zeros(n);
    let mut run_mean = 0.0f64;
    let mut run_m2 = 0.0f64;
    for i in 0..draws {
        for zi in z.iter_mut() {
            *zi = rng.sample(rand_distr::StandardNormal);
        }
        let y = mean + ls * &z;
        let x = spec.log_integrand(&y).exp();
        let delta = x - run_mean;
        run_mean += delta / (i + 1) as f64;
        run_m2 += delta * (x - run_mean);
    }
    let var = run_m2 / (draws as f64 - 1.0);
    Ok((run_mean, (var / draws as f64).sqrt()))
}

// ---------------------------------------------------------------------------
// Newton minimization of u -> log sum_j exp(base_j - u' xb_j)

/// Quadrature rows of one state's inner problem: `xb` holds the k excess
/// returns per node (node-major), `base` the log weight plus continuation.
struct NodeBatch {
    k: usize,
    count: usize,
    xb: Vec<f64>,
    base: Vec<f64>,
}

impl NodeBatch {
    /// Objective value only.
    fn objective(&self, u: &[f64], e_buf: &mut [f64]) -> f64 {
        let mut max_e = f64::NEG_INFINITY;
        for j in 0..self.count {
            let mut dot = 0.0;
            for i in 0..self.k {
                dot += u[i] * self.xb[j * self.k + i];
            }
            let e = self.base[j] - dot;
            e_buf[j] = e;
            if e > max_e {
                max_e = e;
            }
        }
        let mut z = 0.0;
        for j in 0..self.count {
            z += (e_buf[j] - max_e).exp();
        }
        max_e + z.ln()
    }

    /// Objective, gradient, and Hessian of the log-sum-exp at u.
    fn stats(&self, u: &[f64], e_buf: &mut [f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let k = self.k;
        let mut max_e = f64::NEG_INFINITY;
        for j in 0..self.count {
            let mut dot = 0.0;
            for i in 0..k {
                dot += u[i] * self.xb[j * k + i];
            }
            let e = self.base[j] - dot;
            e_buf[j] = e;
            if e > max_e {
                max_e = e;
            }
        }
        let mut z = 0.0;
        let mut qx = vec![0.0; k];
        let mut qxx = vec![0.0; k * k];
        for j in 0..self.count {
            let q = (e_buf[j] - max_e).exp();
            z += q;
            let row = &self.xb[j * k..(j + 1) * k];
            for i in 0..k {
                let qxi = q * row[i];
                qx[i] += qxi;
                for l in 0..=i {
                    qxx[i * k + l] += qxi * row[l];
                }
            }
        }
        let f = max_e + z.ln();
        let xm = DVector::from_fn(k, |i, _| qx[i] / z);
        let mut hess = DMatrix::zeros(k, k);
        for i in 0..k {
            for l in 0..=i {
                let h = qxx[i * k + l] / z - xm[i] * xm[l];
                hess[(i, l)] = h;
                hess[(l, i)] = h;
            }
        }
        (f, -xm, hess)
    }

    /// Newton with backtracking from u = 0. The objective is smooth and
    /// convex (log of a positive combination of exponentials in u), so the
    /// Hessian is the quadrature covariance of the excess returns and the
    /// iteration contracts quadratically near the optimum.
    fn minimize(&self, grad_tol: f64, max_iter: usize) -> Result<(DVector<f64>, f64)> {
        let k = self.k;
        let mut u = vec![0.0f64; k];
        let mut e_buf = vec![0.0f64; self.count];
        let mut last_gnorm = f64::INFINITY;
        for _ in 0..max_iter {
            let (f, grad, hess) = self.stats(&u, &mut e_buf);
            last_gnorm = grad.amax();
            if last_gnorm <= grad_tol {
                return Ok((DVector::from_row_slice(&u), f));
            }
            let ridge = 1e-14 * hess.diagonal().amax().max(1e-300);
            let chol = Cholesky::new(hess.clone()).or_else(|| {
                Cholesky::new(hess + DMatrix::<f64>::identity(k, k) * ridge)
            });
            let step = match chol {
                Some(ch) => ch.solve(&grad),
                None => return Err(Error::numerical("singular Hessian in oracle Newton")),
            };
            let dec = grad.dot(&step);
            let mut lambda = 1.0f64;
            loop {
                let trial: Vec<f64> = (0..k).map(|i| u[i] - lambda * step[i]).collect();
                let f_new = self.objective(&trial, &mut e_buf);
                if f_new <= f - 0.25 * lambda * dec || lambda < 1e-10 {
                    u = trial;
                    break;
                }
                lambda *= 0.5;
            }
        }
        if last_gnorm <= grad_tol * 100.0 {
            let f = self.objective(&u, &mut e_buf);
            return Ok((DVector::from_row_slice(&u), f));
        }
        Err(Error::numerical(format!(
            "oracle Newton stalled with gradient norm {last_gnorm:.3e}"
        )))
    }
}

// ---------------------------------------------------------------------------
// Stage machinery

/// Precomputed tensor quadrature: node vectors (node-major) and log weights.
struct TensorNodes {
    dim: usize,
    count: usize,
    z: Vec<f64>,
    logw: Vec<f64>,
}

impl TensorNodes {
    fn new(gh: &GaussHermite, dim: usize) -> Self {
        let count = gh.len().pow(dim as u32);
        let mut z = Vec::with_capacity(count * dim);
        let mut logw = Vec::with_capacity(count);
        for idx in TensorGrid::new(dim, gh.len()) {
            let mut lw = 0.0;
            for &i in &idx {
                z.push(gh.nodes[i]);
                lw += gh.weights[i].ln();
            }
            logw.push(lw);
        }
        TensorNodes { dim, count, z, logw }
    }
}

/// One decision period's integration context.
struct Stage<'a> {
    model: &'a VarModel,
    rf_rate: f64,
    /// Full innovation factor for deep stages, asset-block factor for the
    /// final stage.
    factor: DMatrix<f64>,
    nodes: TensorNodes,
    is_last: bool,
}

impl<'a> Stage<'a> {
    fn new(
        model: &'a VarModel,
        period: usize,
        horizon: usize,
        rf_rate: f64,
        gh: &GaussHermite,
    ) -> Result<Self> {
        let is_last = period + 1 == horizon;
        let sigma = model.sigma_at(period + 1);
        let (factor, dim) = if is_last {
            let sel = model.selector();
            let cov_k = sel.select_cov(sigma.matrix());
            let spd = SpdMatrix::new(cov_k, "asset covariance")?;
            (spd.factor().clone(), model.k())
        } else {
            (sigma.factor().clone(), model.state_dim())
        };
        let nodes = TensorNodes::new(gh, dim);
        Ok(Stage { model, rf_rate, factor, nodes, is_last })
    }

    /// Builds the inner problem at state y, reading the continuation from
    /// `quad` (required unless this is the final stage).
    fn batch(&self, y: &DVector<f64>, quad: Option<&ValueQuad>) -> Result<NodeBatch> {
        let k = self.model.k();
        let n = self.model.state_dim();
        let mean = self.model.conditional_mean(y)?;
        let count = self.nodes.count;
        let dim = self.nodes.dim;
        let mut xb = vec![0.0f64; count * k];
        let mut base = vec![0.0f64; count];
        if self.is_last {
            for j in 0..count {
                let z = &self.nodes.z[j * dim..(j + 1) * dim];
                for i in 0..k {
                    let mut x = mean[i];
                    for l in 0..=i {
                        x += self.factor[(i, l)] * z[l];
                    }
                    xb[j * k + i] = x - self.rf_rate;
                }
                base[j] = self.nodes.logw[j];
            }
        } else {
            let quad = quad.ok_or_else(|| {
                Error::numerical("missing continuation fit for an interior stage")
            })?;
            let mut child = vec![0.0f64; n];
            for j in 0..count {
                let z = &self.nodes.z[j * dim..(j + 1) * dim];
                for i in 0..n {
                    let mut yi = mean[i];
                    for l in 0..=i {
                        yi += self.factor[(i, l)] * z[l];
                    }
                    child[i] = yi;
                }
                for i in 0..k {
                    xb[j * k + i] = child[i] - self.rf_rate;
                }
                base[j] = self.nodes.logw[j] + quad_log_g(quad, &child);
            }
        }
        Ok(NodeBatch { k, count, xb, base })
    }

    fn solve(
        &self,
        y: &DVector<f64>,
        quad: Option<&ValueQuad>,
        cfg: &OracleConfig,
    ) -> Result<(DVector<f64>, f64)> {
        self.batch(y, quad)?.minimize(cfg.grad_tol, cfg.max_iter)
    }
}

fn quad_log_g(q: &ValueQuad, y: &[f64]) -> f64 {
    let n = y.len();
    let mut acc = q.c;
    for i in 0..n {
        acc += 2.0 * q.g_vec[i] * y[i];
        for j in 0..n {
            acc += y[i] * q.p_mat[(i, j)] * y[j];
        }
    }
    -0.5 * acc
}

/// Least-squares quadratic fit of log G over the grid states.
fn fit_quadratic(states: &[DVector<f64>], vals: &[f64]) -> Result<ValueQuad> {
    let n = states[0].len();
    let rows = states.len();
    let cols = n + n * (n - 1) / 2 + n + 1;
    if rows < cols {
        return Err(Error::invalid("not enough states for a quadratic fit"));
    }
    let mut design = DMatrix::zeros(rows, cols);
    let mut rhs = DVector::zeros(rows);
    for (r, y) in states.iter().enumerate() {
        let mut cidx = 0;
        for i in 0..n {
            design[(r, cidx)] = y[i] * y[i];
            cidx += 1;
        }
        for i in 0..n {
            for j in (i + 1)..n {
                design[(r, cidx)] = 2.0 * y[i] * y[j];
                cidx += 1;
            }
        }
        for i in 0..n {
            design[(r, cidx)] = 2.0 * y[i];
            cidx += 1;
        }
        design[(r, cidx)] = 1.0;
        rhs[r] = -2.0 * vals[r];
    }
    let qr = design.qr();
    let qty = qr.q().transpose() * rhs;
    let beta = qr
        .r()
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::numerical("degenerate grid in quadratic fit"))?;
    let mut p = DMatrix::zeros(n, n);
    let mut cidx = 0;
    for i in 0..n {
        p[(i, i)] = beta[cidx];
        cidx += 1;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            p[(i, j)] = beta[cidx];
            p[(j, i)] = beta[cidx];
            cidx += 1;
        }
    }
    let g = DVector::from_fn(n, |i, _| beta[cidx + i]);
    let c = beta[cidx + n];
    Ok(ValueQuad { p_mat: p, g_vec: g, c })
}

/// Per-coordinate interval, used to track where continuation fits may be
/// queried.
#[derive(Clone, Debug)]
struct Region {
    lo: DVector<f64>,
    hi: DVector<f64>,
}

impl Region {
    fn of_states(states: &[DVector<f64>]) -> Region {
        let n = states[0].len();
        let mut lo = DVector::from_element(n, f64::INFINITY);
        let mut hi = DVector::from_element(n, f64::NEG_INFINITY);
        for s in states {
            for i in 0..n {
                lo[i] = lo[i].min(s[i]);
                hi[i] = hi[i].max(s[i]);
            }
        }
        Region { lo, hi }
    }

    fn union(&self, other: &Region) -> Region {
        Region {
            lo: self.lo.zip_map(&other.lo, f64::min),
            hi: self.hi.zip_map(&other.hi, f64::max),
        }
    }

    /// Image of the box under y -> nu + Phi y + C z with |z_l| <= z_max,
    /// evaluated by interval arithmetic.
    fn forward(&self, nu: &DVector<f64>, phi: &DMatrix<f64>, factor: &DMatrix<f64>, z_max: f64) -> Region {
        let n = nu.len();
        let mut lo = DVector::zeros(n);
        let mut hi = DVector::zeros(n);
        for i in 0..n {
            let mut a = nu[i];
            let mut b = nu[i];
            for j in 0..n {
                let x = phi[(i, j)] * self.lo[j];
                let y = phi[(i, j)] * self.hi[j];
                a += x.min(y);
                b += x.max(y);
            }
            let mut slack = 0.0;
            for l in 0..n {
                slack += factor[(i, l)].abs();
            }
            lo[i] = a - z_max * slack;
            hi[i] = b + z_max * slack;
        }
        Region { lo, hi }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.lo.len(), |i, _| {
            self.lo[i] + rng.gen::<f64>() * (self.hi[i] - self.lo[i])
        })
    }
}

const GRID_OFFSETS: [f64; 5] = [-2.0, -1.0, 0.0, 1.0, 2.0];

fn stage_grid(center: &DVector<f64>, sd: &DVector<f64>, spread: f64) -> Vec<DVector<f64>> {
    let n = center.len();
    let mut out = Vec::with_capacity(GRID_OFFSETS.len().pow(n as u32));
    for idx in TensorGrid::new(n, GRID_OFFSETS.len()) {
        out.push(DVector::from_fn(n, |i, _| {
            center[i] + GRID_OFFSETS[idx[i]] * spread * sd[i]
        }));
    }
    out
}

fn estimated_evals(model: &VarModel, horizon: usize, cfg: &OracleConfig) -> f64 {
    let n = model.state_dim() as f64;
    let k = model.k() as f64;
    let grid = (GRID_OFFSETS.len() as f64).powf(n);
    let mut total = 0.0;
    for s in 0..horizon {
        let dim = if s + 1 == horizon { k } else { n };
        let states = grid + if s > 0 { cfg.check_states as f64 } else { 0.0 };
        total += states * (cfg.nodes as f64).powf(dim);
    }
    total
}

/// Solves the scaled allocation program numerically, stage by stage.
///
/// Returns, per decision period, a lattice of states with the minimizing
/// scaled allocations and log G values, plus the start-state expected
/// utility. Cost grows as nodes^(k+p) per state, so the solver refuses
/// state dimensions above [`MAX_STATE_DIM`], horizons above
/// [`MAX_HORIZON`], and configurations whose estimated node count exceeds
/// `cfg.max_evals`.
pub fn numeric_optimal_weights(
    model: &VarModel,
    scenario: &Scenario,
    cfg: &OracleConfig,
) -> Result<OracleSolution> {
    scenario.check(model)?;
    let n = model.state_dim();
    let horizon = scenario.horizon;
    if n > MAX_STATE_DIM {
        return Err(Error::CostCap(format!(
            "state dimension {n} exceeds the oracle limit {MAX_STATE_DIM}; \
             cost grows as nodes^(k+p) per state"
        )));
    }
    if horizon > MAX_HORIZON {
        return Err(Error::CostCap(format!(
            "horizon {horizon} exceeds the oracle limit {MAX_HORIZON}"
        )));
    }
    let est = estimated_evals(model, horizon, cfg);
    if est > cfg.max_evals {
        return Err(Error::CostCap(format!(
            "estimated {est:.3e} node evaluations exceed the configured cap {:.3e}",
            cfg.max_evals
        )));
    }
    let gh = GaussHermite::new(cfg.nodes)?;
    let z_max = gh.max_node();

    // forward pass: grid centers follow the conditional mean, spreads the
    // forward covariance (stage 0 borrows the first innovation's scale)
    let mut centers = Vec::with_capacity(horizon);
    let mut spreads = Vec::with_capacity(horizon);
    let mut mean = scenario.y0.clone();
    let mut var = DMatrix::<f64>::zeros(n, n);
    for s in 0..horizon {
        if s == 0 {
            let sd = DVector::from_fn(n, |i, _| model.sigma_at(1).matrix()[(i, i)].sqrt());
            centers.push(mean.clone());
            spreads.push(sd);
        } else {
            mean = model.conditional_mean(&mean)?;
            var = model.phi() * &var * model.phi().transpose() + model.sigma_at(s).matrix();
            centers.push(mean.clone());
            spreads.push(DVector::from_fn(n, |i, _| var[(i, i)].sqrt()));
        }
    }
    let grids: Vec<Vec<DVector<f64>>> = (0..horizon)
        .map(|s| stage_grid(&centers[s], &spreads[s], cfg.fit_spread))
        .collect();

    // reachability boxes: query_box[s] bounds every state at which stage
    // s's continuation fit can be evaluated by stage s-1
    let mut query_boxes: Vec<Option<Region>> = vec![None; horizon];
    let mut effective = Region::of_states(&grids[0]);
    for s in 1..horizon {
        let q = effective.forward(
            model.nu(),
            model.phi(),
            model.sigma_at(s).factor(),
            z_max,
        );
        effective = Region::of_states(&grids[s]).union(&q);
        query_boxes[s] = Some(q);
    }

    // backward pass
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.check_seed);
    let mut continuation: Option<ValueQuad> = None;
    let mut stages_rev: Vec<OracleStage> = Vec::with_capacity(horizon);
    for s in (0..horizon).rev() {
        let stage = Stage::new(model, s, horizon, scenario.rf.rate(s + 1), &gh)?;
        let states = grids[s].clone();
        let mut scaled = Vec::with_capacity(states.len());
        let mut log_g = Vec::with_capacity(states.len());
        for y in &states {
            let (u, f) = stage.solve(y, continuation.as_ref(), cfg)?;
            scaled.push(u);
            log_g.push(f);
        }
        let mut max_check_residual = 0.0f64;
        if s > 0 {
            let fit = fit_quadratic(&states, &log_g)?;
            let qbox = query_boxes[s].as_ref().expect("interior stages have a query box");
            for _ in 0..cfg.check_states {
                let y = qbox.sample(&mut rng);
                let (_, truth) = stage.solve(&y, continuation.as_ref(), cfg)?;
                let resid = (quad_log_g(&fit, y.as_slice()) - truth).abs();
                max_check_residual = max_check_residual.max(resid);
            }
            if max_check_residual > cfg.fit_tol {
                return Err(Error::numerical(format!(
                    "continuation value at period {s} deviates from quadratic structure \
                     by {max_check_residual:.3e} (tolerance {:.1e})",
                    cfg.fit_tol
                )));
            }
            continuation = Some(fit);
        }
        stages_rev.push(OracleStage { period: s, states, scaled, log_g, max_check_residual });
    }
    stages_rev.reverse();

    // grid index of the all-zero offset, where the stage-0 center sits
    let center_idx = (0..n).fold(0usize, |acc, d| acc + 2 * GRID_OFFSETS.len().pow(d as u32));
    let log_g0 = stages_rev[0].log_g[center_idx];
    let growth = scenario.rf.gross(1) * scenario.rf.discount(0, horizon);
    let value = -(-scenario.alpha * scenario.w0 * growth + log_g0).exp();
    Ok(OracleSolution { stages: stages_rev, log_g0, value })
}

/// Gradient of log E[exp(-u'(X - r 1))] over the final period's asset
/// distribution at state y, by quadrature. Zero at the optimal last-period
/// scaled allocation.
pub fn last_period_gradient(
    model: &VarModel,
    period: usize,
    rf_rate: f64,
    y: &DVector<f64>,
    u: &DVector<f64>,
    nodes: usize,
) -> Result<DVector<f64>> {
    if u.len() != model.k() {
        return Err(Error::dim("allocation length must equal the asset count"));
    }
    if period == 0 {
        return Err(Error::invalid("periods are 1-based"));
    }
    let gh = GaussHermite::new(nodes)?;
    let stage = Stage::new(model, period.saturating_sub(1), period, rf_rate, &gh)?;
    let batch = stage.batch(y, None)?;
    let mut e_buf = vec![0.0; batch.count];
    let (_, grad, _) = batch.stats(u.as_slice(), &mut e_buf);
    Ok(grad)
}

/// Expected terminal utility of an arbitrary policy by fully nested
/// quadrature. The policy maps (decision period, state, wealth) to dollar
/// positions. Cost is nodes^((k+p)(T-1)+k); the cap refuses hopeless
/// configurations.
pub fn expected_utility<F>(
    model: &VarModel,
    scenario: &Scenario,
    nodes: usize,
    max_evals: f64,
    policy: &F,
) -> Result<f64>
where
    F: Fn(usize, &DVector<f64>, f64) -> Result<DVector<f64>>,
{
    scenario.check(model)?;
    let n = model.state_dim();
    let k = model.k();
    let t = scenario.horizon;
    let cost = (nodes as f64).powf((n * (t - 1) + k) as f64);
    if cost > max_evals {
        return Err(Error::CostCap(format!(
            "nested quadrature needs {cost:.3e} evaluations, above the cap {max_evals:.3e}"
        )));
    }
    let gh = GaussHermite::new(nodes)?;
    let mut stages = Vec::with_capacity(t);
    for s in 0..t {
        stages.push(Stage::new(model, s, t, scenario.rf.rate(s + 1), &gh)?);
    }

    fn recurse<F>(
        model: &VarModel,
        scenario: &Scenario,
        stages: &[Stage<'_>],
        policy: &F,
        s: usize,
        y: &DVector<f64>,
        wealth: f64,
    ) -> Result<f64>
    where
        F: Fn(usize, &DVector<f64>, f64) -> Result<DVector<f64>>,
    {
        let k = model.k();
        let n = model.state_dim();
        let stage = &stages[s];
        let a = policy(s, y, wealth)?;
        if a.len() != k {
            return Err(Error::dim("policy returned a wrong-sized allocation"));
        }
        let gross = scenario.rf.gross(s + 1);
        let r = scenario.rf.rate(s + 1);
        let mean = model.conditional_mean(y)?;
        let dim = stage.nodes.dim;
        let mut acc = 0.0f64;
        let mut child = DVector::zeros(n);
        for j in 0..stage.nodes.count {
            let z = &stage.nodes.z[j * dim..(j + 1) * dim];
            let w_node = stage.nodes.logw[j].exp();
            if stage.is_last {
                let mut gain = 0.0;
                for i in 0..k {
                    let mut x = mean[i];
                    for l in 0..=i {
                        x += stage.factor[(i, l)] * z[l];
                    }
                    gain += a[i] * (x - r);
                }
                let w_term = wealth * gross + gain;
                acc += w_node * -(-scenario.alpha * w_term).exp();
            } else {
                for i in 0..n {
                    let mut yi = mean[i];
                    for l in 0..=i {
                        yi += stage.factor[(i, l)] * z[l];
                    }
                    child[i] = yi;
                }
                let mut gain = 0.0;
                for i in 0..k {
                    gain += a[i] * (child[i] - r);
                }
                let w_next = wealth * gross + gain;
                acc += w_node * recurse(model, scenario, stages, policy, s + 1, &child, w_next)?;
            }
        }
        Ok(acc)
    }

    recurse(model, scenario, &stages, policy, 0, &scenario.y0, scenario.w0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RiskFree;
    use crate::strategy::build_rule;
    use approx::assert_relative_eq;

    fn small_model() -> VarModel {
        VarModel::new(
            1,
            1,
            DVector::from_row_slice(&[0.01, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.1, 0.4, 0.05, 0.3]),
            DMatrix::from_row_slice(2, 2, &[0.01, 0.002, 0.002, 0.008]),
        )
        .unwrap()
    }

    fn scenario(horizon: usize) -> Scenario {
        Scenario {
            horizon,
            rf: RiskFree::Constant(0.001),
            alpha: 1.2,
            w0: 1.0,
            y0: DVector::from_row_slice(&[0.02, -0.01]),
        }
    }

    #[test]
    fn mgf_linear_case_matches_scalar_identity() {
        // P = 0: E[exp(-hY)] = exp(h^2/2) for standard normal Y
        let cov = SpdMatrix::new(DMatrix::from_element(1, 1, 1.0), "test").unwrap();
        let spec = QuadraticFormSpec {
            p_mat: DMatrix::zeros(1, 1),
            h_vec: DVector::from_element(1, 0.7),
        };
        let v = mgf_quadratic(&DVector::zeros(1), &cov, &spec).unwrap();
        assert_relative_eq!(v, (0.7f64 * 0.7 / 2.0).exp(), max_relative = 1e-14);
    }

    #[test]
    fn mgf_pure_quadratic_matches_scalar_identity() {
        // P = 1, standard normal: E[exp(-Y^2/2)] = 2^(-1/2)
        let cov = SpdMatrix::new(DMatrix::from_element(1, 1, 1.0), "test").unwrap();
        let spec = QuadraticFormSpec {
            p_mat: DMatrix::from_element(1, 1, 1.0),
            h_vec: DVector::zeros(1),
        };
        let v = mgf_quadratic(&DVector::zeros(1), &cov, &spec).unwrap();
        assert_relative_eq!(v, 0.5f64.sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn mgf_routes_agree_on_an_indefinite_form() {
        let cov = SpdMatrix::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
            "test",
        )
        .unwrap();
        let spec = QuadraticFormSpec {
            p_mat: DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, -0.3]),
            h_vec: DVector::from_row_slice(&[0.4, -0.6]),
        };
        let mean = DVector::from_row_slice(&[0.2, -0.1]);
        let exact = mgf_quadratic(&mean, &cov, &spec).unwrap();
        let quad = mgf_quadrature(&mean, &cov, &spec, 60).unwrap();
        assert_relative_eq!(exact, quad, max_relative = 1e-10);
        let (mc, se) = mgf_monte_carlo(&mean, &cov, &spec, 200_000, 9).unwrap();
        assert!((mc - exact).abs() < 4.0 * se, "mc {mc} vs exact {exact} (se {se})");
    }

    #[test]
    fn mgf_divergent_form_rejected() {
        let cov = SpdMatrix::new(DMatrix::from_element(1, 1, 1.0), "test").unwrap();
        let spec = QuadraticFormSpec {
            p_mat: DMatrix::from_element(1, 1, -1.5),
            h_vec: DVector::zeros(1),
        };
        assert!(matches!(
            mgf_quadratic(&DVector::zeros(1), &cov, &spec),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn oracle_matches_closed_form_two_periods() {
        let m = small_model();
        let scen = scenario(2);
        let rule = build_rule(&m, scen.horizon, &scen.rf, scen.alpha).unwrap();
        let cfg = OracleConfig { nodes: 40, ..OracleConfig::default() };
        let sol = numeric_optimal_weights(&m, &scen, &cfg).unwrap();
        for stage in &sol.stages {
            for (y, u_num) in stage.states.iter().zip(&stage.scaled) {
                let u_cf = rule.scaled(stage.period, y).unwrap();
                let dev = relative_deviation(&u_cf, u_num);
                assert!(dev < 1e-6, "period {} dev {dev:.3e}", stage.period);
            }
        }
        let v_cf = rule.value(scen.w0, &scen.y0).unwrap();
        assert_relative_eq!(sol.value, v_cf, max_relative = 1e-7);
    }

    #[test]
    fn last_period_gradient_vanishes_at_closed_form_rule() {
        let m = small_model();
        let rule = build_rule(&m, 1, &RiskFree::Constant(0.001), 1.0).unwrap();
        let y = DVector::from_row_slice(&[0.03, 0.01]);
        let u = rule.scaled(0, &y).unwrap();
        let g = last_period_gradient(&m, 1, 0.001, &y, &u, 60).unwrap();
        assert!(g.amax() < 1e-10, "gradient {:.3e}", g.amax());
    }

    #[test]
    fn oracle_refuses_large_problems() {
        let m = small_model();
        let scen = scenario(5);
        assert!(matches!(
            numeric_optimal_weights(&m, &scen, &OracleConfig::default()),
            Err(Error::CostCap(_))
        ));
        let wide = VarModel::new(
            2,
            2,
            DVector::zeros(4),
            DMatrix::zeros(4, 4),
            DMatrix::identity(4, 4) * 0.01,
        )
        .unwrap();
        let scen4 = Scenario {
            horizon: 2,
            rf: RiskFree::Constant(0.0),
            alpha: 1.0,
            w0: 1.0,
            y0: DVector::zeros(4),
        };
        assert!(matches!(
            numeric_optimal_weights(&wide, &scen4, &OracleConfig::default()),
            Err(Error::CostCap(_))
        ));
        let tight = OracleConfig { max_evals: 10.0, ..OracleConfig::default() };
        assert!(matches!(
            numeric_optimal_weights(&m, &scenario(2), &tight),
            Err(Error::CostCap(_))
        ));
    }

    #[test]
    fn expected_utility_agrees_with_rule_value() {
        let m = small_model();
        let scen = scenario(2);
        let rule = build_rule(&m, scen.horizon, &scen.rf, scen.alpha).unwrap();
        let policy = |s: usize, y: &DVector<f64>, _w: f64| rule.dollars(s, y);
        let eu = expected_utility(&m, &scen, 40, 1e9, &policy).unwrap();
        let v = rule.value(scen.w0, &scen.y0).unwrap();
        assert_relative_eq!(eu, v, max_relative = 1e-9);
    }

    #[test]
    fn perturbed_policy_scores_worse() {
        let m = small_model();
        let scen = scenario(2);
        let rule = build_rule(&m, scen.horizon, &scen.rf, scen.alpha).unwrap();
        let opt = |s: usize, y: &DVector<f64>, _w: f64| rule.dollars(s, y);
        let bent = |s: usize, y: &DVector<f64>, _w: f64| {
            rule.dollars(s, y).map(|d| d + DVector::from_element(1, 0.3))
        };
        let eu_opt = expected_utility(&m, &scen, 30, 1e9, &opt).unwrap();
        let eu_bent = expected_utility(&m, &scen, 30, 1e9, &bent).unwrap();
        assert!(eu_opt > eu_bent, "optimal {eu_opt} vs perturbed {eu_bent}");
    }

    #[test]
    fn quadratic_fit_recovers_exact_coefficients() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g = DVector::from_row_slice(&[0.3, -0.2]);
        let truth = ValueQuad { p_mat: p, g_vec: g, c: 0.7 };
        let states: Vec<DVector<f64>> = TensorGrid::new(2, 5)
            .map(|idx| DVector::from_fn(2, |i, _| (idx[i] as f64 - 2.0) * 0.1))
            .collect();
        let vals: Vec<f64> = states.iter().map(|y| quad_log_g(&truth, y.as_slice())).collect();
        let fit = fit_quadratic(&states, &vals).unwrap();
        assert_relative_eq!((&fit.p_mat - &truth.p_mat).norm(), 0.0, epsilon = 1e-10);
        assert_relative_eq!((&fit.g_vec - &truth.g_vec).norm(), 0.0, epsilon = 1e-10);
        assert_relative_eq!(fit.c, truth.c, epsilon = 1e-10);
    }
}

//! Joint VAR(1) process for asset returns and predictors.
//!
//! The state Y_t stacks k asset returns on top of p predictor variables and
//! evolves as
//!
//! ```text
//! Y_t = nu + Phi Y_{t-1} + e_t,    e_t ~ N(0, Sigma(t))
//! ```
//!
//! with Sigma(t) symmetric positive definite, optionally varying over
//! periods on a deterministic schedule. Returns are the first k coordinates,
//! extracted by the selector L = [I_k 0]. Decisions happen at t = 0..T-1 and
//! the return of period t (realized at t) pays on money invested at t-1.
//!
//! Covariance factorizations are computed once per distinct period matrix at
//! construction and reused everywhere (simulation, rule building, oracle).
//!
//! # Model file format
//!
//! Plain text, whitespace separated, `#` starts a comment line:
//!
//! ```text
//! k p
//! nu        (one line, k+p numbers)
//! Phi       (k+p lines of k+p numbers)
//! Sigma     (k+p lines of k+p numbers)
//! ```
//!
//! Floats are written in shortest round-trip form, so save/load is lossless.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{spectral_radius, stationary_covariance, SpdMatrix};

/// Selector L = [I_k 0] mapping the state to its asset block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Selector {
    k: usize,
    p: usize,
}

impl Selector {
    pub fn new(k: usize, p: usize) -> Self {
        Selector { k, p }
    }

    pub fn state_dim(&self) -> usize {
        self.k + self.p
    }

    pub fn asset_dim(&self) -> usize {
        self.k
    }

    /// L y: the first k coordinates.
    pub fn select(&self, y: &DVector<f64>) -> DVector<f64> {
        y.rows(0, self.k).into_owned()
    }

    /// L S L': the top-left k x k block.
    pub fn select_cov(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        s.view((0, 0), (self.k, self.k)).into_owned()
    }

    /// L' v: embeds a k-vector into the state space with zero predictors.
    pub fn embed(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.k + self.p);
        out.rows_mut(0, self.k).copy_from(v);
        out
    }

    /// Dense L, for tests and audits.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.k, self.k + self.p);
        for i in 0..self.k {
            l[(i, i)] = 1.0;
        }
        l
    }
}

/// State of the joint process at one period, with the asset/predictor split.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    k: usize,
    p: usize,
    values: DVector<f64>,
}

impl StateVector {
    pub fn new(k: usize, p: usize, values: DVector<f64>) -> Result<Self> {
        if values.len() != k + p {
            return Err(Error::dim(format!(
                "state vector has {} entries, expected k+p = {}",
                values.len(),
                k + p
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("state vector contains non-finite entries"));
        }
        Ok(StateVector { k, p, values })
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn assets(&self) -> DVector<f64> {
        self.values.rows(0, self.k).into_owned()
    }

    pub fn predictors(&self) -> DVector<f64> {
        self.values.rows(self.k, self.p).into_owned()
    }
}

/// Risk-free rate path. Period t (1-based, t = 1..=T) pays gross 1 + r_t on
/// money carried from t-1 to t.
#[derive(Clone, Debug, PartialEq)]
pub enum RiskFree {
    Constant(f64),
    PerPeriod(Vec<f64>),
}

impl RiskFree {
    /// Net rate of period t (1-based).
    pub fn rate(&self, t: usize) -> f64 {
        match self {
            RiskFree::Constant(r) => *r,
            RiskFree::PerPeriod(v) => v[t - 1],
        }
    }

    /// Gross rate 1 + r_t.
    pub fn gross(&self, t: usize) -> f64 {
        1.0 + self.rate(t)
    }

    /// Compounded gross rate over periods tau+2..=horizon, the discount
    /// applied to money invested at decision time tau. Empty product is 1,
    /// so the last decision (tau = horizon-1) gets 1.
    pub fn discount(&self, tau: usize, horizon: usize) -> f64 {
        let mut d = 1.0;
        let mut t = tau + 2;
        while t <= horizon {
            d *= self.gross(t);
            t += 1;
        }
        d
    }

    /// Checks the curve covers periods 1..=horizon with finite gross > 0.
    pub fn check(&self, horizon: usize) -> Result<()> {
        match self {
            RiskFree::Constant(r) => {
                if !r.is_finite() || *r <= -1.0 {
                    return Err(Error::invalid(format!("risk-free rate {r} must be finite and > -1")));
                }
            }
            RiskFree::PerPeriod(v) => {
                if v.len() < horizon {
                    return Err(Error::invalid(format!(
                        "risk-free curve has {} periods, horizon needs {horizon}",
                        v.len()
                    )));
                }
                for (i, r) in v.iter().take(horizon).enumerate() {
                    if !r.is_finite() || *r <= -1.0 {
                        return Err(Error::invalid(format!(
                            "risk-free rate {r} at period {} must be finite and > -1",
                            i + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One investment problem instance: when to stop, what the cash leg pays,
/// how risk averse the investor is, and where the process starts.
#[derive(Clone, Debug)]
pub struct Scenario {
    /// Number of decision periods T; decisions happen at t = 0..T-1.
    pub horizon: usize,
    pub rf: RiskFree,
    /// Absolute risk aversion of -exp(-alpha W_T).
    pub alpha: f64,
    /// Wealth at time 0.
    pub w0: f64,
    /// State at time 0.
    pub y0: DVector<f64>,
}

impl Scenario {
    pub fn check(&self, model: &VarModel) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        self.rf.check(self.horizon)?;
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!(
                "risk aversion alpha {} must be positive",
                self.alpha
            )));
        }
        if !self.w0.is_finite() {
            return Err(Error::invalid("starting wealth must be finite"));
        }
        if self.y0.len() != model.state_dim() {
            return Err(Error::dim(format!(
                "start state has {} entries, model needs {}",
                self.y0.len(),
                model.state_dim()
            )));
        }
        if self.y0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("start state contains non-finite entries"));
        }
        Ok(())
    }
}

/// Conditional moments of the asset block one period ahead.
#[derive(Clone, Debug)]
pub struct AssetMoments {
    /// E[X_t | Y_{t-1}] = L (nu + Phi y).
    pub mean: DVector<f64>,
    /// Excess mean over the period's risk-free rate.
    pub excess_mean: DVector<f64>,
    /// Cov[X_t | Y_{t-1}] = L Sigma(t) L'.
    pub cov: DMatrix<f64>,
}

/// Diagnostics produced by [`VarModel::validate`].
#[derive(Clone, Debug)]
pub struct ValidationReport {
    pub spectral_radius: f64,
    pub stationary: bool,
    /// Smallest eigenvalue of each scheduled innovation covariance.
    pub sigma_min_eigenvalues: Vec<f64>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.warnings.is_empty()
    }
}

/// VAR(1) model over the stacked state, with factorized innovation
/// covariances. Construction validates dimensions, symmetry, and the
/// positive-definiteness margin; a model value that exists is usable.
#[derive(Clone, Debug)]
pub struct VarModel {
    k: usize,
    p: usize,
    nu: DVector<f64>,
    phi: DMatrix<f64>,
    sigmas: Vec<SpdMatrix>,
}

impl VarModel {
    /// Model with a single innovation covariance used for every period.
    pub fn new(k: usize, p: usize, nu: DVector<f64>, phi: DMatrix<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        Self::with_schedule(k, p, nu, phi, vec![sigma])
    }

    /// Model whose innovation covariance varies over periods. `sigmas[t-1]`
    /// applies to period t; periods beyond the schedule reuse the last entry.
    pub fn with_schedule(
        k: usize,
        p: usize,
        nu: DVector<f64>,
        phi: DMatrix<f64>,
        sigmas: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::dim("need at least one asset (k >= 1)"));
        }
        let n = k + p;
        if nu.len() != n {
            return Err(Error::dim(format!("nu has {} entries, expected {n}", nu.len())));
        }
        if phi.nrows() != n || phi.ncols() != n {
            return Err(Error::dim(format!("Phi is {}x{}, expected {n}x{n}", phi.nrows(), phi.ncols())));
        }
        if nu.iter().any(|v| !v.is_finite()) || phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("nu/Phi contain non-finite entries"));
        }
        if sigmas.is_empty() {
            return Err(Error::invalid("innovation covariance schedule is empty"));
        }
        let mut factored = Vec::with_capacity(sigmas.len());
        for (i, s) in sigmas.into_iter().enumerate() {
            if s.nrows() != n || s.ncols() != n {
                return Err(Error::dim(format!(
                    "Sigma({}) is {}x{}, expected {n}x{n}",
                    i + 1,
                    s.nrows(),
                    s.ncols()
                )));
            }
            factored.push(SpdMatrix::new(s, &format!("Sigma({})", i + 1))?);
        }
        Ok(VarModel { k, p, nu, phi, sigmas: factored })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn state_dim(&self) -> usize {
        self.k + self.p
    }

    pub fn nu(&self) -> &DVector<f64> {
        &self.nu
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn selector(&self) -> Selector {
        Selector::new(self.k, self.p)
    }

    /// Innovation covariance of period t (1-based), clamped to the schedule.
    pub fn sigma_at(&self, period: usize) -> &SpdMatrix {
        let idx = period.saturating_sub(1).min(self.sigmas.len() - 1);
        &self.sigmas[idx]
    }

    pub fn schedule_len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn state(&self, values: DVector<f64>) -> Result<StateVector> {
        StateVector::new(self.k, self.p, values)
    }

    /// E[Y_t | Y_{t-1} = y] = nu + Phi y.
    pub fn conditional_mean(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.state_dim() {
            return Err(Error::dim(format!(
                "state has {} entries, expected {}",
                y.len(),
                self.state_dim()
            )));
        }
        Ok(&self.nu + &self.phi * y)
    }

    /// One-step conditional mean and covariance of the asset block, plus the
    /// excess mean over the period's risk-free rate.
    pub fn asset_moments(&self, y: &DVector<f64>, period: usize, rf: f64) -> Result<AssetMoments> {
        let full = self.conditional_mean(y)?;
        let sel = self.selector();
        let mean = sel.select(&full);
        let cov = sel.select_cov(self.sigma_at(period).matrix());
        let excess_mean = mean.map(|m| m - rf);
        Ok(AssetMoments { mean, excess_mean, cov })
    }

    /// Simulates Y_0..Y_horizon; the returned path includes the start state.
    pub fn simulate_path<R: Rng + ?Sized>(
        &self,
        y0: &StateVector,
        horizon: usize,
        rng: &mut R,
    ) -> Result<Vec<StateVector>> {
        if y0.vector().len() != self.state_dim() {
            return Err(Error::dim("start state dimension mismatch"));
        }
        let n = self.state_dim();
        let mut path = Vec::with_capacity(horizon + 1);
        path.push(y0.clone());
        let mut y = y0.vector().clone();
        let mut z = DVector::zeros(n);
        for t in 1..=horizon {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            let shock = self.sigma_at(t).factor() * &z;
            y = &self.nu + &self.phi * &y + shock;
            path.push(StateVector::new(self.k, self.p, y.clone())?);
        }
        Ok(path)
    }

    /// Mean of the stationary distribution, (I - Phi)^-1 nu. Errors when the
    /// process is not stationary.
    pub fn stationary_mean(&self) -> Result<DVector<f64>> {
        let rho = spectral_radius(&self.phi)?;
        if rho >= 1.0 {
            return Err(Error::numerical(format!(
                "process is not stationary (spectral radius {rho:.4})"
            )));
        }
        crate::linalg::solve_i_minus(&self.phi, &self.nu)
    }

    /// Stationary covariance of the state (Lyapunov solution). Uses the
    /// first scheduled innovation covariance.
    pub fn stationary_cov(&self) -> Result<DMatrix<f64>> {
        let rho = spectral_radius(&self.phi)?;
        if rho >= 1.0 {
            return Err(Error::numerical(format!(
                "process is not stationary (spectral radius {rho:.4})"
            )));
        }
        stationary_covariance(&self.phi, self.sigmas[0].matrix())
    }

    /// Default start state: the stationary mean when it exists, otherwise
    /// zero (the caller can inspect [`VarModel::validate`] for the warning).
    pub fn default_y0(&self) -> StateVector {
        let values = self.stationary_mean().unwrap_or_else(|_| DVector::zeros(self.state_dim()));
        StateVector { k: self.k, p: self.p, values }
    }

    /// Diagnostic pass. Construction already guarantees PD covariances, so
    /// this reports margins and flags soft issues (non-stationarity,
    /// near-degenerate coordinates) without failing.
    pub fn validate(&self) -> Result<ValidationReport> {
        let rho = spectral_radius(&self.phi)?;
        let stationary = rho < 1.0;
        let mut warnings = Vec::new();
        if !stationary {
            warnings.push(format!(
                "spectral radius {rho:.6} >= 1: no stationary distribution, Y_0 defaults to zero"
            ));
        }
        let sigma_min_eigenvalues: Vec<f64> = self.sigmas.iter().map(|s| s.min_eigenvalue()).collect();
        for (i, s) in self.sigmas.iter().enumerate() {
            let m = s.matrix();
            let max_diag = m.diagonal().iter().fold(0.0f64, |a, v| a.max(*v));
            for j in 0..m.nrows() {
                if m[(j, j)] < 1e-8 * max_diag {
                    warnings.push(format!(
                        "Sigma({}) coordinate {j} has near-zero variance relative to the largest",
                        i + 1
                    ));
                }
            }
        }
        let phi_scale = self.phi.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if phi_scale == 0.0 {
            warnings.push("Phi is identically zero: returns are iid".into());
        }
        Ok(ValidationReport { spectral_radius: rho, stationary, sigma_min_eigenvalues, warnings })
    }

    /// Serializes in the model file format (constant-schedule models only
    /// write their first covariance, which is the whole schedule for models
    /// built with [`VarModel::new`]).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.k, self.p);
        out.push_str(&row_to_line(self.nu.iter()));
        for i in 0..self.state_dim() {
            out.push_str(&row_to_line(self.phi.row(i).iter()));
        }
        let sigma = self.sigmas[0].matrix();
        for i in 0..self.state_dim() {
            out.push_str(&row_to_line(sigma.row(i).iter()));
        }
        out
    }

    /// Parses the model file format. Blank lines and `#` comments are
    /// skipped, so reports written by the fitting front end load directly.
    pub fn from_text(text: &str) -> Result<Self> {
        let rows = crate::textio::numeric_rows(text)?;
        if rows.is_empty() {
            return Err(Error::Parse { line: 1, msg: "empty model file".into() });
        }
        let (hdr_line, hdr) = &rows[0];
        if hdr.len() != 2 {
            return Err(Error::Parse {
                line: *hdr_line,
                msg: "header must be two integers `k p`".into(),
            });
        }
        let k = crate::textio::as_usize(&rows[0], 0, "k")?;
        let p = crate::textio::as_usize(&rows[0], 1, "p")?;
        if k < 1 {
            return Err(Error::Parse { line: *hdr_line, msg: "k must be at least 1".into() });
        }
        let n = k + p;
        let need = 1 + 1 + n + n;
        if rows.len() != need {
            return Err(Error::Parse {
                line: rows.last().unwrap().0,
                msg: format!("expected {need} data lines for k={k} p={p}, found {}", rows.len()),
            });
        }
        let take_row = |idx: usize, what: &str| -> Result<DVector<f64>> {
            let (line, vals) = &rows[idx];
            if vals.len() != n {
                return Err(Error::Parse {
                    line: *line,
                    msg: format!("{what} needs {n} numbers, found {}", vals.len()),
                });
            }
            Ok(DVector::from_row_slice(vals))
        };
        let nu = take_row(1, "nu")?;
        let mut phi = DMatrix::zeros(n, n);
        for i in 0..n {
            phi.set_row(i, &take_row(2 + i, "Phi row")?.transpose());
        }
        let mut sigma = DMatrix::zeros(n, n);
        for i in 0..n {
            sigma.set_row(i, &take_row(2 + n + i, "Sigma row")?.transpose());
        }
        VarModel::new(k, p, nu, phi, sigma)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

fn row_to_line<'a>(vals: impl Iterator<Item = &'a f64>) -> String {
    let mut line = String::new();
    for (i, v) in vals.enumerate() {
        if i > 0 {
            line.push(' ');
        }
        let _ = write!(line, "{v}");
    }
    line.push('\n');
    line
}

/// Reference parameter sets.
pub mod presets {
    use super::*;

    const NU: [f64; 5] = [4.83e-04, 1.20e-03, 6.74e-04, 5.54e-04, 2.79e-05];

    const PHI: [[f64; 5]; 5] = [
        [0.2011, -0.1592, 0.01892, -0.196, 0.455],
        [0.3139, -0.1231, -0.00191, -0.511, 0.434],
        [0.0487, 0.0888, -0.12131, -0.224, 0.343],
        [0.1829, -0.0889, 0.00988, -0.441, 0.382],
        [0.0766, -0.0643, -0.03049, -0.114, 0.133],
    ];

    const SIGMA: [[f64; 5]; 5] = [
        [0.0013085186, 0.0010544496, 0.0004365753, 0.0009120373, 0.0006781289],
        [0.0010544496, 0.0013833540, 0.0005648237, 0.0010218539, 0.0008332314],
        [0.0004365753, 0.0005648237, 0.0007994341, 0.0004733366, 0.0003667012],
        [0.0009120373, 0.0010218539, 0.0004733366, 0.0010176793, 0.0006927251],
        [0.0006781289, 0.0008332314, 0.0003667012, 0.0006927251, 0.0007242233],
    ];

    fn build(k: usize, p: usize) -> VarModel {
        let nu = DVector::from_row_slice(&NU);
        let phi = DMatrix::from_fn(5, 5, |i, j| PHI[i][j]);
        let sigma = DMatrix::from_fn(5, 5, |i, j| SIGMA[i][j]);
        VarModel::new(k, p, nu, phi, sigma).expect("reference parameters are valid")
    }

    /// VAR(1) fitted to weekly MSCI total-return indices of Belgium,
    /// Germany, Japan, and the United Kingdom, with the United States index
    /// as the single predictor coordinate (k = 4, p = 1).
    pub fn msci_weekly() -> VarModel {
        build(4, 1)
    }

    /// Same parameters with all five indices treated as investable assets
    /// and no predictor coordinate (k = 5, p = 0).
    pub fn msci_weekly_flat() -> VarModel {
        build(5, 0)
    }
}

//! Closed-form multi-period allocation rules for exponential utility.
//!
//! An investor with utility -exp(-alpha W_T) rebalances at t = 0..T-1.
//! Wealth compounds as W_t = W_{t-1}(1 + r_t) + a_{t-1}'(X_t - r_t 1), so
//! the allocation only shifts wealth through the dollar vector a and the
//! problem separates from wealth. The value function stays in the family
//!
//! ```text
//! V_s(W, Y) = -exp(-alpha W Pi_s) G_s(Y),
//! G_s(Y) = exp(-(Y' P_s Y + 2 g_s' Y + c_s) / 2),
//! ```
//!
//! where Pi_s compounds the risk-free gross rates from period s+1 to T and
//! G_T = 1. One backward sweep yields both the affine decision rule and the
//! quadratic value coefficients; the sweep is exact, so the only error in
//! the produced weights is floating-point roundoff.
//!
//! All internal solves go through Cholesky factorizations of quantities that
//! are positive definite by construction. In particular the recursion works
//! with Mhat = I + L_S' P L_S (L_S the innovation Cholesky factor), which is
//! at least the identity because P stays positive semidefinite; this keeps
//! every step well conditioned even for near-singular covariances.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize_checked, SpdMatrix};
use crate::model::{RiskFree, VarModel};

/// Quadratic coefficients of one period's continuation value,
/// G(Y) = exp(-(Y'PY + 2g'Y + c)/2).
#[derive(Clone, Debug)]
pub struct ValueQuad {
    pub p_mat: DMatrix<f64>,
    pub g_vec: DVector<f64>,
    pub c: f64,
}

impl ValueQuad {
    /// log G(Y).
    pub fn log_g(&self, y: &DVector<f64>) -> f64 {
        -0.5 * ((y.transpose() * &self.p_mat * y)[(0, 0)] + 2.0 * self.g_vec.dot(y) + self.c)
    }
}

/// Affine decision rule with the value coefficients that produced it.
///
/// At decision period s with state y the scaled allocation is
/// u_s(y) = A_s y + d_s; dollars invested in risky assets are
/// u_s(y) / (alpha D_s) with D_s the compounded gross risk-free rate from
/// period s+2 to the horizon. Dollar positions do not depend on wealth;
/// weights are dollars over wealth.
#[derive(Clone, Debug)]
pub struct PortfolioRule {
    k: usize,
    p: usize,
    horizon: usize,
    alpha: f64,
    a_mats: Vec<DMatrix<f64>>,
    d_vecs: Vec<DVector<f64>>,
    discounts: Vec<f64>,
    /// Compounded gross risk-free rate over periods 1..=T.
    initial_growth: f64,
    /// Value coefficients for s = 0..=T; empty for rules loaded from a
    /// table, which carry the policy but not the value function.
    value_quads: Vec<ValueQuad>,
}

impl PortfolioRule {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn state_dim(&self) -> usize {
        self.k + self.p
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Compounded gross risk-free rate applied to money invested at
    /// decision s, i.e. over periods s+2..=T.
    pub fn discount(&self, s: usize) -> f64 {
        self.discounts[s]
    }

    pub fn coefficients(&self, s: usize) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.a_mats[s], &self.d_vecs[s])
    }

    fn check_state(&self, s: usize, y: &DVector<f64>) -> Result<()> {
        if s >= self.horizon {
            return Err(Error::invalid(format!(
                "decision period {s} out of range (horizon {})",
                self.horizon
            )));
        }
        if y.len() != self.state_dim() {
            return Err(Error::dim(format!(
                "state has {} entries, rule expects {}",
                y.len(),
                self.state_dim()
            )));
        }
        Ok(())
    }

    /// Scaled allocation u_s(y) = A_s y + d_s. Dollar positions are this
    /// vector divided by alpha and the remaining risk-free growth.
    pub fn scaled(&self, s: usize, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(s, y)?;
        Ok(&self.a_mats[s] * y + &self.d_vecs[s])
    }

    /// Dollar position in each risky asset.
    pub fn dollars(&self, s: usize, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.scaled(s, y)? / (self.alpha * self.discounts[s]))
    }

    /// Portfolio weights, dollars over current wealth.
    pub fn weights(&self, s: usize, y: &DVector<f64>, wealth: f64) -> Result<DVector<f64>> {
        if wealth == 0.0 || !wealth.is_finite() {
            return Err(Error::invalid(format!(
                "weights are undefined at wealth {wealth}; use dollar positions"
            )));
        }
        Ok(self.dollars(s, y)? / wealth)
    }

    pub fn has_value(&self) -> bool {
        !self.value_quads.is_empty()
    }

    /// Value coefficients of period s (s = 0..=horizon), when available.
    pub fn value_quad(&self, s: usize) -> Option<&ValueQuad> {
        self.value_quads.get(s)
    }

    /// Expected utility at time 0: -exp(-alpha W Pi_0) G_0(y).
    pub fn value(&self, wealth: f64, y: &DVector<f64>) -> Result<f64> {
        if self.value_quads.is_empty() {
            return Err(Error::invalid(
                "rule was loaded from a table and carries no value coefficients",
            ));
        }
        if y.len() != self.state_dim() {
            return Err(Error::dim("state dimension mismatch in value"));
        }
        let log_g = self.value_quads[0].log_g(y);
        Ok(-(-self.alpha * wealth * self.initial_growth + log_g).exp())
    }

    /// Serializes the decision table: header `k p T alpha`, then per period
    /// a `s D_s` line, the k rows of A_s, and d_s.
    pub fn to_text(&self) -> String {
        let n = self.state_dim();
        let mut out = String::new();
        let _ = writeln!(out, "# decision table: u = A y + d, dollars = u / (alpha * D)");
        let _ = writeln!(out, "{} {} {} {}", self.k, self.p, self.horizon, self.alpha);
        for s in 0..self.horizon {
            let _ = writeln!(out, "{} {}", s, self.discounts[s]);
            for i in 0..self.k {
                for j in 0..n {
                    if j > 0 {
                        out.push(' ');
                    }
                    let _ = write!(out, "{}", self.a_mats[s][(i, j)]);
                }
                out.push('\n');
            }
            for (i, v) in self.d_vecs[s].iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`PortfolioRule::to_text`] output. The loaded rule acts
    /// (scaled, dollars, weights) but reports no value function.
    pub fn from_text(text: &str) -> Result<Self> {
        let rows = crate::textio::numeric_rows(text)?;
        if rows.is_empty() {
            return Err(Error::Parse { line: 1, msg: "empty rule table".into() });
        }
        if rows[0].1.len() != 4 {
            return Err(Error::Parse {
                line: rows[0].0,
                msg: "header must be `k p T alpha`".into(),
            });
        }
        let k = crate::textio::as_usize(&rows[0], 0, "k")?;
        let p = crate::textio::as_usize(&rows[0], 1, "p")?;
        let horizon = crate::textio::as_usize(&rows[0], 2, "T")?;
        let alpha = rows[0].1[3];
        if k == 0 || horizon == 0 || !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Parse {
                line: rows[0].0,
                msg: "need k >= 1, T >= 1, alpha > 0".into(),
            });
        }
        let n = k + p;
        let per_block = 1 + k + 1;
        if rows.len() != 1 + horizon * per_block {
            return Err(Error::Parse {
                line: rows.last().unwrap().0,
                msg: format!(
                    "expected {} data lines for T={horizon}, k={k}, found {}",
                    1 + horizon * per_block,
                    rows.len()
                ),
            });
        }
        let mut a_mats = Vec::with_capacity(horizon);
        let mut d_vecs = Vec::with_capacity(horizon);
        let mut discounts = Vec::with_capacity(horizon);
        for s in 0..horizon {
            let base = 1 + s * per_block;
            let head = &rows[base];
            if head.1.len() != 2 || crate::textio::as_usize(head, 0, "period")? != s {
                return Err(Error::Parse {
                    line: head.0,
                    msg: format!("expected period header `{s} D`"),
                });
            }
            let d_s = head.1[1];
            if !(d_s > 0.0) || !d_s.is_finite() {
                return Err(Error::Parse { line: head.0, msg: "discount must be positive".into() });
            }
            discounts.push(d_s);
            let mut a = DMatrix::zeros(k, n);
            for i in 0..k {
                let (line, vals) = &rows[base + 1 + i];
                if vals.len() != n {
                    return Err(Error::Parse {
                        line: *line,
                        msg: format!("rule row needs {n} numbers, found {}", vals.len()),
                    });
                }
                for j in 0..n {
                    a[(i, j)] = vals[j];
                }
            }
            let (line, vals) = &rows[base + 1 + k];
            if vals.len() != k {
                return Err(Error::Parse {
                    line: *line,
                    msg: format!("intercept row needs {k} numbers, found {}", vals.len()),
                });
            }
            a_mats.push(a);
            d_vecs.push(DVector::from_row_slice(vals));
        }
        Ok(PortfolioRule {
            k,
            p,
            horizon,
            alpha,
            a_mats,
            d_vecs,
            discounts,
            initial_growth: 1.0,
            value_quads: Vec::new(),
        })
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

fn check_inputs(model: &VarModel, horizon: usize, rf: &RiskFree, alpha: f64) -> Result<()> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("risk aversion alpha {alpha} must be positive")));
    }
    rf.check(horizon)?;
    let _ = model;
    Ok(())
}

/// Builds the optimal rule by one backward sweep over decision periods.
///
/// Each step conditions on the current state, integrates the next period's
/// Gaussian innovation against the quadratic continuation value in closed
/// form, and minimizes the resulting expression exactly. The new value
/// coefficients feed the previous period.
pub fn build_rule(model: &VarModel, horizon: usize, rf: &RiskFree, alpha: f64) -> Result<PortfolioRule> {
    check_inputs(model, horizon, rf, alpha)?;
    let k = model.k();
    let n = model.state_dim();
    let phi = model.phi();
    let nu = model.nu();
    let ones = DVector::from_element(k, 1.0);
    let eye = DMatrix::<f64>::identity(n, n);

    let mut p_cur = DMatrix::<f64>::zeros(n, n);
    let mut g_cur = DVector::<f64>::zeros(n);
    let mut c_cur = 0.0f64;

    let mut quads = vec![ValueQuad { p_mat: p_cur.clone(), g_vec: g_cur.clone(), c: c_cur }];
    let mut a_rev: Vec<DMatrix<f64>> = Vec::with_capacity(horizon);
    let mut d_rev: Vec<DVector<f64>> = Vec::with_capacity(horizon);

    for s in (0..horizon).rev() {
        let sigma = model.sigma_at(s + 1);
        let ls = sigma.factor();
        let r = rf.rate(s + 1);

        // Mhat = I + L_S' P L_S is PD because P is PSD by induction
        let p_hat = ls.transpose() * &p_cur * ls;
        let m_hat = &eye + &p_hat;
        let chol_m = Cholesky::new(symmetrize_checked(&m_hat, "I + L'PL")?).ok_or_else(|| {
            Error::NotPositiveDefinite(format!(
                "continuation value lost positive definiteness at period {}",
                s + 1
            ))
        })?;
        let log_det_m: f64 = 2.0 * chol_m.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let m_hat_inv = chol_m.inverse();

        // M^-1 = L Mhat^-1 L'; M = Sigma^-1 + P
        let m_inv = ls * &m_hat_inv * ls.transpose();
        // T1 = M^-1 Sigma^-1, computed as (Sigma^-1 M^-1)'
        let t1 = sigma.solve_mat(&m_inv).transpose();

        // E = first k rows of M^-1 Sigma^-1;  K = first k rows of M^-1
        let e_mat = t1.rows(0, k).into_owned();
        let k_mat = m_inv.rows(0, k).into_owned();

        // C = Lhat Mhat^-1 Lhat', Lhat the first k rows of L_S
        let l_hat = ls.rows(0, k).into_owned();
        let c_raw = &l_hat * &m_hat_inv * l_hat.transpose();
        let c_spd = SpdMatrix::new(symmetrize_checked(&c_raw, "C")?, "decision covariance")?;

        // decision rule u = A y + d
        let a_u = c_spd.solve_mat(&(&e_mat * phi));
        let d_u = c_spd.solve_vec(&(&e_mat * nu - &k_mat * &g_cur - r * &ones));

        // value update
        let sigma_inv = sigma.solve_mat(&eye);
        let s_m_s = sigma.solve_mat(&t1);
        let ce = c_spd.solve_mat(&e_mat);
        let xi = symmetrize_checked(
            &(&sigma_inv - &s_m_s + e_mat.transpose() * &ce),
            "value curvature",
        )?;
        let ck = c_spd.solve_mat(&k_mat);
        let pi_m = symmetrize_checked(&(&m_inv - k_mat.transpose() * &ck), "projected precision")?;
        let c1 = c_spd.solve_vec(&(r * &ones));
        let beta = sigma.solve_vec(&(&pi_m * &g_cur - k_mat.transpose() * &c1));
        let h = &k_mat * &g_cur + r * &ones;
        let gamma = -g_cur.dot(&(&m_inv * &g_cur)) + h.dot(&c_spd.solve_vec(&h));

        let c_next = nu.dot(&(&xi * nu)) + 2.0 * beta.dot(nu) + gamma + c_cur + log_det_m;
        let g_next = phi.transpose() * (&xi * nu + &beta);
        let p_next = symmetrize_checked(&(phi.transpose() * &xi * phi), "value curvature")?;

        a_rev.push(a_u);
        d_rev.push(d_u);
        p_cur = p_next;
        g_cur = g_next;
        c_cur = c_next;
        quads.push(ValueQuad { p_mat: p_cur.clone(), g_vec: g_cur.clone(), c: c_cur });
    }

    a_rev.reverse();
    d_rev.reverse();
    quads.reverse();
    let discounts: Vec<f64> = (0..horizon).map(|s| rf.discount(s, horizon)).collect();
    let initial_growth = rf.gross(1) * rf.discount(0, horizon);

    Ok(PortfolioRule {
        k,
        p: model.p(),
        horizon,
        alpha,
        a_mats: a_rev,
        d_vecs: d_rev,
        discounts,
        initial_growth,
        value_quads: quads,
    })
}

/// Single-period rule for the final decision, computed by a direct solve.
/// Independent of the backward sweep; used to cross-check its last step.
pub fn myopic_scaled(model: &VarModel, period: usize, rf_rate: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let k = model.k();
    let sel = model.selector();
    let sigma_k = SpdMatrix::new(sel.select_cov(model.sigma_at(period).matrix()), "asset covariance")?;
    let phi_k = model.phi().rows(0, k).into_owned();
    let nu_k = sel.select(model.nu());
    let ones = DVector::from_element(k, 1.0);
    let a = sigma_k.solve_mat(&phi_k);
    let d = sigma_k.solve_vec(&(nu_k - rf_rate * ones));
    Ok((a, d))
}

/// Optimal rule for a model without predictor coordinates (p = 0), built
/// from the explicit two-period-lookahead solution instead of the sweep.
///
/// With no predictors the state equals the return vector and the curvature
/// of the continuation value drops out of the first-order condition, so the
/// scaled rule at decision s only involves the next two periods:
///
/// ```text
/// u_s(Y) = Sigma(s+1)^-1 (nu + Phi Y - r_{s+1} 1)
///        - Phi' Sigma(s+2)^-1 ((nu - r_{s+2} 1) + r_{s+1} Phi 1)
/// ```
///
/// and the last decision keeps only the first term.
pub fn no_predictor_rule(model: &VarModel, horizon: usize, rf: &RiskFree, alpha: f64) -> Result<PortfolioRule> {
    if model.p() != 0 {
        return Err(Error::invalid(format!(
            "explicit no-predictor rule needs p = 0, model has p = {}",
            model.p()
        )));
    }
    check_inputs(model, horizon, rf, alpha)?;
    let k = model.k();
    let phi = model.phi();
    let nu = model.nu();
    let ones = DVector::from_element(k, 1.0);

    let mut a_mats = Vec::with_capacity(horizon);
    let mut d_vecs = Vec::with_capacity(horizon);
    for s in 0..horizon {
        let near = model.sigma_at(s + 1);
        let r_near = rf.rate(s + 1);
        let a = near.solve_mat(phi);
        let mut d = near.solve_vec(&(nu - r_near * &ones));
        if s + 1 < horizon {
            let far = model.sigma_at(s + 2);
            let r_far = rf.rate(s + 2);
            let inner = far.solve_vec(&((nu - r_far * &ones) + r_near * (phi * &ones)));
            d -= phi.transpose() * inner;
        }
        a_mats.push(a);
        d_vecs.push(d);
    }
    let discounts: Vec<f64> = (0..horizon).map(|s| rf.discount(s, horizon)).collect();
    let initial_growth = rf.gross(1) * rf.discount(0, horizon);
    Ok(PortfolioRule {
        k,
        p: 0,
        horizon,
        alpha,
        a_mats,
        d_vecs,
        discounts,
        initial_growth,
        value_quads: Vec::new(),
    })
}

/// Rule for an investor who treats returns as iid Gaussian with the given
/// moments, ignoring any predictability. The allocation is state
/// independent; only the risk-free discounting varies over periods. The
/// rule still accepts states of dimension k + p so it can run on paths of a
/// richer model.
pub fn iid_rule(
    k: usize,
    p: usize,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    horizon: usize,
    rf: &RiskFree,
    alpha: f64,
) -> Result<PortfolioRule> {
    if mean.len() != k || cov.nrows() != k || cov.ncols() != k {
        return Err(Error::dim(format!(
            "iid moments must be {k}-dimensional, got mean {} and cov {}x{}",
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("risk aversion alpha {alpha} must be positive")));
    }
    rf.check(horizon)?;
    let spd = SpdMatrix::new(cov.clone(), "iid covariance")?;
    let ones = DVector::from_element(k, 1.0);
    let mut a_mats = Vec::with_capacity(horizon);
    let mut d_vecs = Vec::with_capacity(horizon);
    for s in 0..horizon {
        let r = rf.rate(s + 1);
        a_mats.push(DMatrix::zeros(k, k + p));
        d_vecs.push(spd.solve_vec(&(mean - r * &ones)));
    }
    let discounts: Vec<f64> = (0..horizon).map(|s| rf.discount(s, horizon)).collect();
    let initial_growth = rf.gross(1) * rf.discount(0, horizon);
    Ok(PortfolioRule {
        k,
        p,
        horizon,
        alpha,
        a_mats,
        d_vecs,
        discounts,
        initial_growth,
        value_quads: Vec::new(),
    })
}

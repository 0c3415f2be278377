//! VAR(1) estimation from observed series.
//!
//! Fitting is equation-by-equation least squares of Y_t on (1, Y_{t-1}).
//! The regressor matrix is shared across equations, so the whole fit is one
//! QR factorization plus one solve per coordinate. Innovation covariance
//! comes from the residual cross products; the divisor is configurable
//! between the degrees-of-freedom-adjusted and maximum-likelihood
//! conventions.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::symmetrize_checked;
use crate::model::VarModel;

/// Observed joint series, rows indexed by time.
#[derive(Clone, Debug)]
pub struct ReturnSeries {
    names: Vec<String>,
    /// len x dim, row t is the observation at time t.
    data: DMatrix<f64>,
}

impl ReturnSeries {
    pub fn new(names: Vec<String>, data: DMatrix<f64>) -> Result<Self> {
        if names.len() != data.ncols() {
            return Err(Error::dim(format!(
                "{} column names for {} columns",
                names.len(),
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("series contains non-finite values"));
        }
        Ok(ReturnSeries { names, data })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Loads a whitespace- or comma-separated table. An optional header row
    /// names the columns; a leading non-numeric column (dates, labels) is
    /// dropped. `#` lines and blank lines are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut raw_rows: Vec<(usize, Vec<String>)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<String> = if line.contains(',') {
                line.split(',').map(|t| t.trim().to_string()).collect()
            } else {
                line.split_whitespace().map(|t| t.to_string()).collect()
            };
            raw_rows.push((lineno + 1, toks));
        }
        if raw_rows.is_empty() {
            return Err(Error::Parse { line: 1, msg: "no data rows".into() });
        }

        let is_num = |s: &str| s.parse::<f64>().is_ok();

        // header row: first row whose tokens are not all numeric
        let header = !raw_rows[0].1.iter().all(|t| is_num(t));
        let mut names: Vec<String> = Vec::new();
        let start = if header {
            names = raw_rows[0].1.clone();
            1
        } else {
            0
        };
        if start >= raw_rows.len() {
            return Err(Error::Parse { line: raw_rows[0].0, msg: "header without data rows".into() });
        }

        // leading label column: first data cell not numeric in every row
        let label_col = raw_rows[start..].iter().all(|(_, r)| !r.is_empty() && !is_num(&r[0]));
        let skip = usize::from(label_col);

        let width = raw_rows[start].1.len().saturating_sub(skip);
        if width == 0 {
            return Err(Error::Parse { line: raw_rows[start].0, msg: "rows have no numeric columns".into() });
        }
        if header {
            let drop = names.len().saturating_sub(width);
            names = names.into_iter().skip(drop).collect();
            if names.len() != width {
                names = (0..width).map(|i| format!("y{i}")).collect();
            }
        } else {
            names = (0..width).map(|i| format!("y{i}")).collect();
        }

        let mut values = Vec::with_capacity((raw_rows.len() - start) * width);
        for (line, toks) in &raw_rows[start..] {
            if toks.len() != width + skip {
                return Err(Error::Parse {
                    line: *line,
                    msg: format!("expected {} columns, found {}", width + skip, toks.len()),
                });
            }
            for tok in &toks[skip..] {
                let v: f64 = tok.parse().map_err(|_| Error::Parse {
                    line: *line,
                    msg: format!("expected a number, found {tok:?}"),
                })?;
                values.push(v);
            }
        }
        let nrows = values.len() / width;
        ReturnSeries::new(names, DMatrix::from_row_slice(nrows, width, &values))
    }
}

/// Divisor convention for the innovation covariance estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DofMode {
    /// Residual cross products over n_obs - (dim + 1), unbiased under the
    /// usual regression assumptions.
    #[default]
    Adjusted,
    /// Residual cross products over n_obs.
    MaximumLikelihood,
}

/// Fit output: the estimated model plus sampling-noise diagnostics.
#[derive(Clone, Debug)]
pub struct FitReport {
    pub model: VarModel,
    pub names: Vec<String>,
    /// Effective regression sample size (series length minus one).
    pub n_obs: usize,
    /// Standard errors of the intercept estimates.
    pub nu_se: DVector<f64>,
    /// Standard errors of the slope estimates, same shape as Phi.
    pub phi_se: DMatrix<f64>,
    /// Asymptotic standard errors of the covariance entries.
    pub sigma_se: DMatrix<f64>,
    /// Per-equation coefficient of determination.
    pub r_squared: DVector<f64>,
}

impl FitReport {
    /// Model file content followed by `#` diagnostic lines, loadable by
    /// [`VarModel::from_text`].
    pub fn to_text(&self) -> String {
        let mut out = self.model.to_text();
        out.push_str(&format!("# n_obs {}\n", self.n_obs));
        out.push_str("# columns");
        for n in &self.names {
            out.push(' ');
            out.push_str(n);
        }
        out.push('\n');
        for i in 0..self.r_squared.len() {
            out.push_str(&format!("# r2 {} {}\n", i, self.r_squared[i]));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Fits a VAR(1) to the series, treating the first `k` columns as asset
/// returns and the rest as predictors.
pub fn fit_var1(series: &ReturnSeries, k: usize, mode: DofMode) -> Result<FitReport> {
    let n = series.dim();
    if k == 0 || k > n {
        return Err(Error::dim(format!("k = {k} out of range for a {n}-column series")));
    }
    let p = n - k;
    let t_len = series.len();
    if t_len < n + 3 {
        return Err(Error::invalid(format!(
            "series length {t_len} too short to fit {n} equations with {} regressors",
            n + 1
        )));
    }
    let n_obs = t_len - 1;
    let data = series.data();

    // shared design: row t = (1, Y_t'), target rows Y_{t+1}
    let mut x = DMatrix::zeros(n_obs, n + 1);
    let mut targets = DMatrix::zeros(n_obs, n);
    for t in 0..n_obs {
        x[(t, 0)] = 1.0;
        for j in 0..n {
            x[(t, 1 + j)] = data[(t, j)];
            targets[(t, j)] = data[(t + 1, j)];
        }
    }

    let qr = x.clone().qr();
    let q = qr.q();
    let r = qr.r();
    for j in 0..(n + 1) {
        if r[(j, j)].abs() < 1e-12 {
            return Err(Error::numerical(
                "design matrix is rank deficient (constant or collinear columns)",
            ));
        }
    }

    let mut nu = DVector::zeros(n);
    let mut phi = DMatrix::zeros(n, n);
    let mut residuals = DMatrix::zeros(n_obs, n);
    let mut r_squared = DVector::zeros(n);

    for eq in 0..n {
        let y = targets.column(eq).into_owned();
        let qty = q.transpose() * &y;
        let beta = r
            .clone()
            .solve_upper_triangular(&qty)
            .ok_or_else(|| Error::numerical("triangular solve failed in regression"))?;
        nu[eq] = beta[0];
        for j in 0..n {
            phi[(eq, j)] = beta[1 + j];
        }
        let fitted = &x * &beta;
        let resid = &y - &fitted;
        residuals.set_column(eq, &resid);
        let mean = y.sum() / n_obs as f64;
        let tss: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
        let rss: f64 = resid.iter().map(|v| v * v).sum();
        r_squared[eq] = if tss > 0.0 { 1.0 - rss / tss } else { 0.0 };
    }

    let divisor = match mode {
        DofMode::Adjusted => {
            let d = n_obs as f64 - (n + 1) as f64;
            if d <= 0.0 {
                return Err(Error::invalid("not enough observations for adjusted covariance"));
            }
            d
        }
        DofMode::MaximumLikelihood => n_obs as f64,
    };
    let sigma_raw = residuals.transpose() * &residuals / divisor;
    let sigma = symmetrize_checked(&sigma_raw, "residual covariance")?;

    // (X'X)^-1 through the triangular factor: R^-1 R^-T
    let rt_inv_cols = {
        let mut cols = DMatrix::zeros(n + 1, n + 1);
        for j in 0..(n + 1) {
            let e = DVector::from_fn(n + 1, |i, _| if i == j { 1.0 } else { 0.0 });
            let col = r
                .clone()
                .solve_upper_triangular(&e)
                .ok_or_else(|| Error::numerical("triangular solve failed for standard errors"))?;
            cols.set_column(j, &col);
        }
        cols
    };
    let xtx_inv = &rt_inv_cols * rt_inv_cols.transpose();

    let mut nu_se = DVector::zeros(n);
    let mut phi_se = DMatrix::zeros(n, n);
    for eq in 0..n {
        let s2 = sigma[(eq, eq)];
        nu_se[eq] = (s2 * xtx_inv[(0, 0)]).sqrt();
        for j in 0..n {
            phi_se[(eq, j)] = (s2 * xtx_inv[(1 + j, 1 + j)]).sqrt();
        }
    }

    // delta-method errors for covariance entries under Gaussian innovations
    let mut sigma_se = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = (sigma[(i, i)] * sigma[(j, j)] + sigma[(i, j)] * sigma[(i, j)]) / n_obs as f64;
            sigma_se[(i, j)] = v.sqrt();
        }
    }

    let model = VarModel::new(k, p, nu, phi, sigma)?;
    Ok(FitReport {
        model,
        names: series.names().to_vec(),
        n_obs,
        nu_se,
        phi_se,
        sigma_se,
        r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StateVector;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_series(model: &VarModel, len: usize, seed: u64) -> ReturnSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y0 = model.default_y0();
        let path = model.simulate_path(&y0, len - 1, &mut rng).unwrap();
        let n = model.state_dim();
        let mut data = DMatrix::zeros(len, n);
        for (t, s) in path.iter().enumerate() {
            for j in 0..n {
                data[(t, j)] = s.vector()[j];
            }
        }
        let names = (0..n).map(|i| format!("y{i}")).collect();
        ReturnSeries::new(names, data).unwrap()
    }

    #[test]
    fn fit_recovers_near_deterministic_recursion() {
        // A slowly decaying transient from a displaced start dominates the
        // near-zero innovations, so least squares pins the coefficients to
        // many digits instead of the usual root-n sampling error.
        let nu = DVector::from_vec(vec![0.01, 0.02]);
        let phi = DMatrix::from_row_slice(2, 2, &[0.9, 0.05, 0.0, 0.85]);
        let sigma = DMatrix::identity(2, 2) * 1e-12;
        let truth = VarModel::new(2, 0, nu.clone(), phi.clone(), sigma).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let start = StateVector::new(
            2,
            0,
            truth.stationary_mean().unwrap() + DVector::from_vec(vec![1.0, -0.8]),
        )
        .unwrap();
        let path = truth.simulate_path(&start, 199, &mut rng).unwrap();
        let mut data = DMatrix::zeros(200, 2);
        for (t, s) in path.iter().enumerate() {
            for j in 0..2 {
                data[(t, j)] = s.vector()[j];
            }
        }
        let series = ReturnSeries::new(vec!["a".into(), "b".into()], data).unwrap();

        let fit = fit_var1(&series, 2, DofMode::Adjusted).unwrap();
        for i in 0..2 {
            assert_relative_eq!(fit.model.nu()[i], nu[i], epsilon = 1e-4);
            for j in 0..2 {
                assert_abs_diff_eq!(fit.model.phi()[(i, j)], phi[(i, j)], epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn fit_errors_within_three_ses_large_sample() {
        use crate::model::presets;
        let truth = presets::msci_weekly();
        let series = sample_series(&truth, 50_000, 7);
        let fit = fit_var1(&series, 4, DofMode::Adjusted).unwrap();
        let mut outside = 0usize;
        let mut total = 0usize;
        for i in 0..5 {
            total += 1;
            if (fit.model.nu()[i] - truth.nu()[i]).abs() > 3.0 * fit.nu_se[i] {
                outside += 1;
            }
            for j in 0..5 {
                total += 1;
                if (fit.model.phi()[(i, j)] - truth.phi()[(i, j)]).abs() > 3.0 * fit.phi_se[(i, j)] {
                    outside += 1;
                }
            }
        }
        // 3-SE coverage is ~99.7%; allow one excursion in 30 comparisons
        assert!(outside <= 1, "{outside}/{total} estimates outside 3 SEs");
    }

    #[test]
    fn dof_modes_scale_covariance() {
        use crate::model::presets;
        let series = sample_series(&presets::msci_weekly(), 500, 3);
        let adj = fit_var1(&series, 4, DofMode::Adjusted).unwrap();
        let ml = fit_var1(&series, 4, DofMode::MaximumLikelihood).unwrap();
        let n_obs = adj.n_obs as f64;
        let ratio = (n_obs - 6.0) / n_obs;
        assert_relative_eq!(
            ml.model.sigma_at(1).matrix()[(0, 0)],
            adj.model.sigma_at(1).matrix()[(0, 0)] * ratio,
            max_relative = 1e-12
        );
    }

    #[test]
    fn r_squared_between_zero_and_one() {
        use crate::model::presets;
        let series = sample_series(&presets::msci_weekly(), 2000, 9);
        let fit = fit_var1(&series, 4, DofMode::Adjusted).unwrap();
        for i in 0..5 {
            assert!(fit.r_squared[i] > 0.0 && fit.r_squared[i] < 1.0);
        }
    }

    #[test]
    fn report_text_loads_as_model() {
        use crate::model::presets;
        let series = sample_series(&presets::msci_weekly(), 300, 1);
        let fit = fit_var1(&series, 4, DofMode::Adjusted).unwrap();
        let text = fit.to_text();
        let back = VarModel::from_text(&text).unwrap();
        assert_eq!(back.phi(), fit.model.phi());
    }

    #[test]
    fn parses_csv_with_header_and_dates() {
        let text = "date,a,b\n2001-01-05,0.01,0.02\n2001-01-12,0.03,-0.01\n2001-01-19,0.00,0.01\n";
        let s = ReturnSeries::from_text(text).unwrap();
        assert_eq!(s.dim(), 2);
        assert_eq!(s.len(), 3);
        assert_eq!(s.names(), &["a".to_string(), "b".to_string()]);
        assert_eq!(s.data()[(1, 1)], -0.01);
    }

    #[test]
    fn parses_bare_whitespace_table() {
        let text = "0.01 0.02\n0.03 -0.01\n";
        let s = ReturnSeries::from_text(text).unwrap();
        assert_eq!(s.dim(), 2);
        assert_eq!(s.names()[0], "y0");
    }

    #[test]
    fn ragged_row_reports_line() {
        let text = "a,b\n1,2\n3\n";
        match ReturnSeries::from_text(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn short_series_rejected() {
        let s = ReturnSeries::from_text("0.1 0.2\n0.2 0.1\n0.0 0.0\n").unwrap();
        assert!(fit_var1(&s, 1, DofMode::Adjusted).is_err());
    }
}

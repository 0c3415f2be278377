//! Monte Carlo comparison of allocation strategies on simulated paths.
//!
//! One state path is drawn per repetition and every strategy trades on that
//! same path, so cross-strategy differences are free of simulation noise up
//! to the strategies themselves. Each repetition seeds its own counter-mode
//! RNG stream derived from (master seed, repetition index); results are
//! therefore byte-identical for a given seed regardless of how many threads
//! the work is spread over.

use std::io::Write as IoWrite;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Scenario, VarModel};
use crate::strategy::PortfolioRule;

#[derive(Clone, Debug)]
pub struct SimulationConfig {
    pub reps: usize,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { reps: 10_000, seed: 2026 }
    }
}

/// Terminal wealth of one strategy across repetitions, in repetition order.
#[derive(Clone, Debug)]
pub struct StrategyOutcome {
    pub name: String,
    pub terminal: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SimulationResult {
    pub outcomes: Vec<StrategyOutcome>,
    pub horizon: usize,
    pub w0: f64,
    /// Terminal wealth of holding cash only, compounded in period order.
    pub cash_terminal: f64,
}

impl SimulationResult {
    pub fn ecdf(&self, strategy: usize) -> Result<Ecdf> {
        Ecdf::new(&self.outcomes[strategy].terminal)
    }
}

/// Runs every strategy over `cfg.reps` common state paths.
///
/// Each rule must match the model's dimensions and the scenario's horizon.
/// Wealth follows W_t = W_{t-1}(1 + r_t) + a_{t-1}'(X_t - r_t 1) with the
/// dollar vector a taken from the rule at the pre-trade state.
pub fn simulate_wealth(
    model: &VarModel,
    scenario: &Scenario,
    strategies: &[(&str, &PortfolioRule)],
    cfg: &SimulationConfig,
) -> Result<SimulationResult> {
    scenario.check(model)?;
    if strategies.is_empty() {
        return Err(Error::invalid("no strategies to simulate"));
    }
    if cfg.reps == 0 {
        return Err(Error::invalid("need at least one repetition"));
    }
    for (name, rule) in strategies {
        if rule.state_dim() != model.state_dim() || rule.k() != model.k() {
            return Err(Error::dim(format!(
                "strategy {name} expects a {}+{} state, model is {}+{}",
                rule.k(),
                rule.p(),
                model.k(),
                model.p()
            )));
        }
        if rule.horizon() != scenario.horizon {
            return Err(Error::invalid(format!(
                "strategy {name} was built for horizon {}, scenario runs {}",
                rule.horizon(),
                scenario.horizon
            )));
        }
    }
    let t_end = scenario.horizon;
    let y0 = model.state(scenario.y0.clone())?;

    let per_rep: Vec<Vec<f64>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| -> Result<Vec<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(rep as u64);
            let path = model.simulate_path(&y0, t_end, &mut rng)?;
            let mut terminals = Vec::with_capacity(strategies.len());
            for (_, rule) in strategies {
                let mut wealth = scenario.w0;
                for t in 1..=t_end {
                    let a = rule.dollars(t - 1, path[t - 1].vector())?;
                    let r = scenario.rf.rate(t);
                    let mut gain = 0.0;
                    for i in 0..model.k() {
                        gain += a[i] * (path[t].vector()[i] - r);
                    }
                    wealth = wealth * scenario.rf.gross(t) + gain;
                }
                terminals.push(wealth);
            }
            Ok(terminals)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut outcomes: Vec<StrategyOutcome> = strategies
        .iter()
        .map(|(name, _)| StrategyOutcome { name: (*name).to_string(), terminal: Vec::with_capacity(cfg.reps) })
        .collect();
    for rep in per_rep {
        for (slot, w) in outcomes.iter_mut().zip(rep) {
            slot.terminal.push(w);
        }
    }
    let mut cash = scenario.w0;
    for t in 1..=t_end {
        cash *= scenario.rf.gross(t);
    }
    Ok(SimulationResult { outcomes, horizon: t_end, w0: scenario.w0, cash_terminal: cash })
}

/// Empirical distribution of a sample, queryable in O(log n).
#[derive(Clone, Debug)]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    pub fn new(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty sample"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sample contains non-finite values"));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values compare"));
        Ok(Ecdf { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.sorted[0]
    }

    pub fn max(&self) -> f64 {
        *self.sorted.last().unwrap()
    }

    /// F(x) = fraction of the sample <= x.
    pub fn eval(&self, x: f64) -> f64 {
        let idx = self.sorted.partition_point(|v| *v <= x);
        idx as f64 / self.sorted.len() as f64
    }

    /// Fraction of the sample strictly below x.
    pub fn fraction_below(&self, x: f64) -> f64 {
        let idx = self.sorted.partition_point(|v| *v < x);
        idx as f64 / self.sorted.len() as f64
    }

    /// Order-statistic quantile: smallest sample value with F(x) >= q.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::invalid(format!("quantile level {q} outside [0, 1]")));
        }
        let n = self.sorted.len();
        let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
        Ok(self.sorted[idx])
    }

    /// Probability mass on the closed interval [lo, hi].
    pub fn band_probability(&self, lo: f64, hi: f64) -> f64 {
        (self.eval(hi) - self.fraction_below(lo)).max(0.0)
    }
}

/// Median of two pooled samples.
pub fn pooled_median(a: &Ecdf, b: &Ecdf) -> Result<f64> {
    let mut all = Vec::with_capacity(a.len() + b.len());
    all.extend_from_slice(&a.sorted);
    all.extend_from_slice(&b.sorted);
    Ecdf::new(&all)?.quantile(0.5)
}

/// Fraction of an even grid on [from, to] where F_a(x) <= F_b(x) + slack.
/// Values near 1 mean a's distribution sits to the right of b's there.
pub fn dominance_share(a: &Ecdf, b: &Ecdf, from: f64, to: f64, points: usize, slack: f64) -> Result<f64> {
    if points < 2 || !(to > from) {
        return Err(Error::invalid("dominance grid needs points >= 2 and to > from"));
    }
    let mut hits = 0usize;
    for i in 0..points {
        let x = from + (to - from) * i as f64 / (points - 1) as f64;
        if a.eval(x) <= b.eval(x) + slack {
            hits += 1;
        }
    }
    Ok(hits as f64 / points as f64)
}

/// Writes `strategy,x,cdf` rows for every curve on one shared grid spanning
/// the pooled range.
pub fn write_ecdf_csv<W: IoWrite>(out: &mut W, curves: &[(&str, &Ecdf)], points: usize) -> Result<()> {
    if curves.is_empty() || points < 2 {
        return Err(Error::invalid("need at least one curve and two grid points"));
    }
    let lo = curves.iter().map(|(_, e)| e.min()).fold(f64::INFINITY, f64::min);
    let hi = curves.iter().map(|(_, e)| e.max()).fold(f64::NEG_INFINITY, f64::max);
    writeln!(out, "strategy,x,cdf")?;
    for (name, ecdf) in curves {
        for i in 0..points {
            let x = lo + (hi - lo) * i as f64 / (points - 1) as f64;
            writeln!(out, "{name},{x},{}", ecdf.eval(x))?;
        }
    }
    Ok(())
}

/// Writes terminal wealth per repetition, one column per strategy.
pub fn write_samples_csv<W: IoWrite>(out: &mut W, result: &SimulationResult) -> Result<()> {
    write!(out, "rep")?;
    for o in &result.outcomes {
        write!(out, ",{}", o.name)?;
    }
    writeln!(out)?;
    let reps = result.outcomes[0].terminal.len();
    for rep in 0..reps {
        write!(out, "{rep}")?;
        for o in &result.outcomes {
            write!(out, ",{}", o.terminal[rep])?;
        }
        writeln!(out)?;
    }
    Ok(())
}

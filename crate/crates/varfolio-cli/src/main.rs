//! Command-line front end: fit a joint return/predictor model from CSV,
//! print allocation rules, simulate competing strategies on common random
//! numbers, and cross-check the closed form against the numerical solver.
//!
//! Exit codes are stable for scripting: 0 success, 1 argument problems,
//! 2 data problems (missing or malformed files), 3 numerical problems.

use std::fmt::Write as FmtWrite;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use varfolio::oracle::{numeric_optimal_weights, relative_deviation, OracleConfig};
use varfolio::sim::{dominance_share, write_ecdf_csv, write_samples_csv, Ecdf, SimulationConfig};
use varfolio::{
    build_rule, fit_var1, iid_rule, no_predictor_rule, simulate_wealth, DofMode, Error,
    PortfolioRule, Result, ReturnSeries, RiskFree, Scenario, VarModel,
};

#[derive(Parser)]
#[command(name = "varfolio", version, about = "Multi-period portfolio rules under return predictability")]
struct Cli {
    /// Worker threads for simulation; defaults to all cores. The results
    /// do not depend on this setting.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the joint model to a CSV or whitespace table of observations.
    Fit(FitArgs),
    /// Print the allocation rule implied by a fitted model.
    Weights(WeightsArgs),
    /// Simulate terminal wealth under competing strategies.
    Simulate(SimulateArgs),
    /// Simulate and report distribution comparisons with probe intervals.
    Compare(CompareArgs),
    /// Cross-check the closed-form rule against the numerical solver.
    Verify(VerifyArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Dof {
    /// Divide residual cross products by n - (dim + 1).
    Adjusted,
    /// Divide residual cross products by n.
    Ml,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Variant {
    /// Full rule conditioning on the joint state.
    General,
    /// Rule for models without predictors (requires p = 0).
    Nopred,
    /// Benchmark that treats returns as serially independent with the
    /// model's long-run moments.
    Iid,
}

impl Variant {
    fn name(self) -> &'static str {
        match self {
            Variant::General => "general",
            Variant::Nopred => "nopred",
            Variant::Iid => "iid",
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Observations, one row per period, assets first then predictors.
    #[arg(long)]
    input: PathBuf,
    /// Number of asset columns.
    #[arg(long)]
    k: usize,
    /// Number of predictor columns; defaults to the remaining columns.
    #[arg(long)]
    p: Option<usize>,
    /// Covariance divisor convention.
    #[arg(long, value_enum, default_value_t = Dof::Adjusted)]
    dof: Dof,
    /// Write the model file here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WeightsArgs {
    /// Model file produced by `fit`.
    #[arg(long)]
    model: PathBuf,
    /// Number of decision periods.
    #[arg(long = "T", value_name = "T")]
    horizon: usize,
    /// Absolute risk aversion.
    #[arg(long)]
    alpha: f64,
    /// Constant per-period rate, or a file with one rate per line.
    #[arg(long, default_value = "0")]
    rf: String,
    /// Starting wealth the printed positions refer to.
    #[arg(long, default_value_t = 1.0)]
    w0: f64,
    /// "stationary", "zeros", or comma-separated state values.
    #[arg(long, default_value = "stationary")]
    y0: String,
    #[arg(long, value_enum, default_value_t = Variant::General)]
    variant: Variant,
    /// Also write the machine-readable rule table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimCommon {
    /// Model file produced by `fit`.
    #[arg(long)]
    model: PathBuf,
    /// Decision horizons, comma separated.
    #[arg(long = "T", value_name = "T", value_delimiter = ',', required = true)]
    horizons: Vec<usize>,
    /// Risk aversions, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    alpha: Vec<f64>,
    /// Constant per-period rate, or a file with one rate per line.
    #[arg(long, default_value = "0")]
    rf: String,
    #[arg(long, default_value_t = 1.0)]
    w0: f64,
    /// "stationary", "zeros", or comma-separated state values.
    #[arg(long, default_value = "stationary")]
    y0: String,
    #[arg(long, default_value_t = 100_000)]
    reps: usize,
    #[arg(long, default_value_t = 2026)]
    seed: u64,
    /// Strategies to run; defaults to every one the model supports.
    #[arg(long, value_enum, value_delimiter = ',')]
    variant: Vec<Variant>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: SimCommon,
    /// Directory for ECDF CSV files; skipped when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-repetition terminal wealth CSVs.
    #[arg(long)]
    dump_samples: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: SimCommon,
    /// Wealth interval lo:hi whose probability is reported per strategy.
    #[arg(long, value_parser = parse_probe)]
    probe: Vec<(f64, f64)>,
    /// Directory for ECDF CSV files; skipped when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-repetition terminal wealth CSVs.
    #[arg(long)]
    dump_samples: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Check this model file; otherwise draw a random model from the seed.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    p: usize,
    #[arg(long = "T", value_name = "T", default_value_t = 3)]
    horizon: usize,
    /// Constant per-period rate, or a file with one rate per line.
    #[arg(long, default_value = "0.001")]
    rf: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Quadrature nodes per dimension.
    #[arg(long, default_value_t = 40)]
    nodes: usize,
}

fn parse_probe(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| format!("expected lo:hi, got {s:?}"))?;
    let lo: f64 = lo.trim().parse().map_err(|_| format!("bad lower bound {lo:?}"))?;
    let hi: f64 = hi.trim().parse().map_err(|_| format!("bad upper bound {hi:?}"))?;
    if !(hi > lo) {
        return Err(format!("probe needs lo < hi, got {lo}:{hi}"));
    }
    Ok((lo, hi))
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) | Error::Parse { .. } => 2,
        Error::NotPositiveDefinite(_) | Error::Numerical(_) | Error::CostCap(_) => 3,
        Error::Dimension(_) | Error::Invalid(_) => 1,
    }
}

/// Attaches the file name to a bare I/O error so failures name their path.
fn named(err: Error, path: &Path) -> Error {
    match err {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => other,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Weights(a) => cmd_weights(a),
        Command::Simulate(a) => run_sim(a.common, a.out, a.dump_samples, &[]),
        Command::Compare(a) => run_sim(a.common, a.out, a.dump_samples, &a.probe),
        Command::Verify(a) => cmd_verify(a),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

fn parse_rf(spec: &str, horizon: usize) -> Result<RiskFree> {
    let rf = if let Ok(rate) = spec.parse::<f64>() {
        RiskFree::Constant(rate)
    } else {
        let path = Path::new(spec);
        let text = fs::read_to_string(path).map_err(|e| named(Error::Io(e), path))?;
        let mut rates = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            for tok in line.split_whitespace() {
                rates.push(tok.parse::<f64>().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    msg: format!("expected a rate, found {tok:?}"),
                })?);
            }
        }
        RiskFree::PerPeriod(rates)
    };
    rf.check(horizon)?;
    Ok(rf)
}

fn parse_y0(spec: &str, model: &VarModel) -> Result<DVector<f64>> {
    match spec {
        "stationary" => Ok(model.default_y0().vector().clone()),
        "zeros" => Ok(DVector::zeros(model.state_dim())),
        list => {
            let vals: Vec<f64> = list
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Invalid(format!("y0 entry {t:?} is not a number")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != model.state_dim() {
                return Err(Error::Dimension(format!(
                    "y0 has {} entries, the model state needs {}",
                    vals.len(),
                    model.state_dim()
                )));
            }
            Ok(DVector::from_vec(vals))
        }
    }
}

fn load_model(path: &Path) -> Result<VarModel> {
    VarModel::load(path).map_err(|e| named(e, path))
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    if a.k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let series = ReturnSeries::load(&a.input).map_err(|e| named(e, &a.input))?;
    let width = series.dim();
    if a.k > width {
        return Err(Error::Dimension(format!(
            "k = {} exceeds the {} observed columns",
            a.k, width
        )));
    }
    if let Some(p) = a.p {
        if a.k + p != width {
            return Err(Error::Dimension(format!(
                "k + p = {} does not match the {} observed columns",
                a.k + p,
                width
            )));
        }
    }
    let mode = match a.dof {
        Dof::Adjusted => DofMode::Adjusted,
        Dof::Ml => DofMode::MaximumLikelihood,
    };
    eprintln!(
        "config: fit input={} k={} p={} dof={:?} rows={} out={}",
        a.input.display(),
        a.k,
        width - a.k,
        mode,
        series.len(),
        a.out.as_deref().map(Path::display).map_or("-".into(), |d| d.to_string()),
    );
    let report = fit_var1(&series, a.k, mode)?;
    match &a.out {
        Some(path) => report.save(path).map_err(|e| named(e, path))?,
        None => print!("{}", report.to_text()),
    }
    Ok(())
}

fn build_variant(
    variant: Variant,
    model: &VarModel,
    horizon: usize,
    rf: &RiskFree,
    alpha: f64,
) -> Result<PortfolioRule> {
    match variant {
        Variant::General => build_rule(model, horizon, rf, alpha),
        Variant::Nopred => no_predictor_rule(model, horizon, rf, alpha),
        Variant::Iid => {
            let mean = model.stationary_mean()?;
            let cov = model.stationary_cov()?;
            let k = model.k();
            iid_rule(
                k,
                model.p(),
                &DVector::from_fn(k, |i, _| mean[i]),
                &cov.view((0, 0), (k, k)).into_owned(),
                horizon,
                rf,
                alpha,
            )
        }
    }
}

fn cmd_weights(a: WeightsArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let rf = parse_rf(&a.rf, a.horizon)?;
    let y0 = parse_y0(&a.y0, &model)?;
    eprintln!(
        "config: weights model={} T={} alpha={} rf={} w0={} y0={} variant={}",
        a.model.display(),
        a.horizon,
        a.alpha,
        a.rf,
        a.w0,
        a.y0,
        a.variant.name(),
    );
    let rule = build_variant(a.variant, &model, a.horizon, &rf, a.alpha)?;
    println!(
        "# dollar positions per decision period, state held at y0, wealth {}",
        a.w0
    );
    let mut header = String::from("period discount");
    for i in 0..model.k() {
        let _ = write!(header, " a{i}");
    }
    println!("{header}");
    for s in 0..a.horizon {
        let dollars = rule.dollars(s, &y0)?;
        let mut row = format!("{s} {}", rule.discount(s));
        for v in dollars.iter() {
            let _ = write!(row, " {v}");
        }
        println!("{row}");
    }
    if let Some(path) = &a.out {
        rule.save(path).map_err(|e| named(e, path))?;
    }
    Ok(())
}

fn mean_and_sd(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

fn run_sim(
    c: SimCommon,
    out: Option<PathBuf>,
    dump_samples: bool,
    probes: &[(f64, f64)],
) -> Result<()> {
    let model = load_model(&c.model)?;
    let y0 = parse_y0(&c.y0, &model)?;
    if c.horizons.is_empty() || c.alpha.is_empty() {
        return Err(Error::Invalid("need at least one horizon and one alpha".into()));
    }
    let variants: Vec<Variant> = if c.variant.is_empty() {
        let mut v = vec![Variant::General];
        if model.p() == 0 {
            v.push(Variant::Nopred);
        }
        v.push(Variant::Iid);
        v
    } else {
        let mut v = c.variant.clone();
        v.dedup();
        v
    };
    eprintln!(
        "config: simulate model={} T={:?} alpha={:?} rf={} w0={} y0={} reps={} seed={} variants={:?} out={}",
        c.model.display(),
        c.horizons,
        c.alpha,
        c.rf,
        c.w0,
        c.y0,
        c.reps,
        c.seed,
        variants.iter().map(|v| v.name()).collect::<Vec<_>>(),
        out.as_deref().map(Path::display).map_or("-".into(), |d| d.to_string()),
    );
    if let Some(dir) = &out {
        fs::create_dir_all(dir).map_err(|e| named(Error::Io(e), dir))?;
    }

    for &horizon in &c.horizons {
        let rf = parse_rf(&c.rf, horizon)?;
        for &alpha in &c.alpha {
            let mut rules = Vec::with_capacity(variants.len());
            for v in &variants {
                rules.push(build_variant(*v, &model, horizon, &rf, alpha)?);
            }
            let named_rules: Vec<(&str, &PortfolioRule)> = variants
                .iter()
                .zip(&rules)
                .map(|(v, r)| (v.name(), r))
                .collect();
            let scenario = Scenario {
                horizon,
                rf: rf.clone(),
                alpha,
                w0: c.w0,
                y0: y0.clone(),
            };
            let cfg = SimulationConfig { reps: c.reps, seed: c.seed };
            let result = simulate_wealth(&model, &scenario, &named_rules, &cfg)?;

            let ecdfs: Vec<Ecdf> = (0..result.outcomes.len())
                .map(|i| result.ecdf(i))
                .collect::<Result<_>>()?;
            println!(
                "T={horizon} alpha={alpha} reps={} seed={} cash={} (common random numbers)",
                c.reps, c.seed, result.cash_terminal
            );
            for (outcome, ecdf) in result.outcomes.iter().zip(&ecdfs) {
                let (mean, sd) = mean_and_sd(&outcome.terminal);
                println!(
                    "  {}: mean={mean} sd={sd} loss={} bankruptcy={}",
                    outcome.name,
                    ecdf.fraction_below(result.cash_terminal),
                    ecdf.eval(0.0)
                );
            }
            for (i, ecdf) in ecdfs.iter().enumerate().skip(1) {
                let lo = ecdfs[0].min().min(ecdf.min());
                let hi = ecdfs[0].max().max(ecdf.max());
                let share = dominance_share(&ecdfs[0], ecdf, lo, hi, 512, 0.0)?;
                println!(
                    "  F_{} <= F_{} on share {share} of the merged support (512 points)",
                    result.outcomes[0].name, result.outcomes[i].name
                );
            }
            for &(lo, hi) in probes {
                let mut line = format!("  probe [{lo}, {hi}]:");
                for (outcome, ecdf) in result.outcomes.iter().zip(&ecdfs) {
                    let _ = write!(line, " {}={}", outcome.name, ecdf.band_probability(lo, hi));
                }
                println!("{line}");
            }

            if let Some(dir) = &out {
                let curves: Vec<(&str, &Ecdf)> = result
                    .outcomes
                    .iter()
                    .zip(&ecdfs)
                    .map(|(o, e)| (o.name.as_str(), e))
                    .collect();
                let path = dir.join(format!("ecdf_T{horizon}_alpha{alpha}.csv"));
                let mut buf = Vec::new();
                write_ecdf_csv(&mut buf, &curves, 512)?;
                fs::write(&path, buf).map_err(|e| named(Error::Io(e), &path))?;
                if dump_samples {
                    let path = dir.join(format!("samples_T{horizon}_alpha{alpha}.csv"));
                    let mut buf = Vec::new();
                    write_samples_csv(&mut buf, &result)?;
                    fs::write(&path, buf).map_err(|e| named(Error::Io(e), &path))?;
                }
            }
        }
    }
    Ok(())
}

/// Same damping as the library's randomized tests: stationary slopes and a
/// covariance with a solid diagonal, so any seed yields a usable model.
fn random_model(seed: u64, k: usize, p: usize) -> Result<VarModel> {
    let n = k + p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nu = DVector::from_fn(n, |_, _| rng.gen_range(-0.005..0.01));
    let phi = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.4..0.4) / n as f64);
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.05..0.05));
    let sigma = &a * a.transpose() + DMatrix::identity(n, n) * 2e-3;
    VarModel::new(k, p, nu, phi, sigma)
}

fn cmd_verify(a: VerifyArgs) -> Result<()> {
    if a.k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let model = match &a.model {
        Some(path) => load_model(path)?,
        None => random_model(a.seed, a.k, a.p)?,
    };
    let rf = parse_rf(&a.rf, a.horizon)?;
    eprintln!(
        "config: verify model={} k={} p={} T={} rf={} seed={} nodes={}",
        a.model.as_deref().map(Path::display).map_or("random".into(), |d| d.to_string()),
        model.k(),
        model.p(),
        a.horizon,
        a.rf,
        a.seed,
        a.nodes,
    );
    let scenario = Scenario {
        horizon: a.horizon,
        rf: rf.clone(),
        alpha: 1.0,
        w0: 1.0,
        y0: model.default_y0().vector().clone(),
    };
    let rule = build_rule(&model, a.horizon, &rf, scenario.alpha)?;
    let cfg = OracleConfig { nodes: a.nodes, ..OracleConfig::default() };
    let solution = numeric_optimal_weights(&model, &scenario, &cfg)?;
    let mut overall = 0.0f64;
    for stage in &solution.stages {
        let mut worst = 0.0f64;
        for (state, numeric) in stage.states.iter().zip(&stage.scaled) {
            let closed = rule.scaled(stage.period, state)?;
            worst = worst.max(relative_deviation(&closed, numeric));
        }
        overall = overall.max(worst);
        println!(
            "period {}: max relative deviation {worst:e} over {} states",
            stage.period,
            stage.states.len()
        );
    }
    println!("overall: max relative deviation {overall:e} (nodes={})", a.nodes);
    Ok(())
}

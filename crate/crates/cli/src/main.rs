use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use housefs::exploratory::{self, tranche_density, tranche_histogram, tranche_pairs};
use housefs::finalsize::outcome_label;
use housefs::inference::{FitResult, Interval};
use housefs::ingest::{
    features_summary, parse_flat_file, write_flat_file, Study, TrancheData, Tranches, SUMMARY_ROWS,
};
use housefs::sellke::{compare_with_exact, outcome_frequencies, SimConfig};
use housefs::synthetic::{generate_cohort, SimulationSpec, TruthSpec};
use housefs::{
    decode, encode, fit, solve, FeatureConfig, FeatureRow, FitConfig, Household, ModelParams,
    SCHEMA_VERSION,
};

/// Household transmission analysis: exploration, fitting and simulation.
#[derive(Parser)]
#[command(name = "housefs", version)]
struct Cli {
    /// Worker threads (defaults to available parallelism). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Histograms, density fields, pair tables and a dataset summary per tranche.
    Explore(ExploreArgs),
    /// Posterior mode and credible intervals per tranche.
    Fit(FitArgs),
    /// Synthetic flat file, ground truth and outcome-frequency tables.
    Simulate(SimulateArgs),
    /// Full outcome distribution of one household.
    Solve(SolveArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Visit-level CSV (HID,PID,visit_date,age,test_result,work_pf,pattern).
    #[arg(long)]
    input: PathBuf,
    /// Tranche definitions (TOML); the six survey periods by default.
    #[arg(long)]
    tranches: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ExploreArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = exploratory::DEFAULT_KERNEL_WIDTH)]
    kernel_width: f64,
    /// Cells per side of the density grid.
    #[arg(long, default_value_t = exploratory::DEFAULT_GRID)]
    grid: usize,
    /// Binary feature splitting members for the density plots.
    #[arg(long, default_value = exploratory::DEFAULT_SPLIT_FEATURE)]
    split_feature: String,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Feature/role configuration (TOML); the 13-parameter model by default.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Fit settings (TOML with restarts, tol, prior_sd, ci_samples, seed, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    prior_sd: Option<f64>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    ci_samples: Option<usize>,
    /// Fit only these tranches (by name); all by default.
    #[arg(long = "tranche")]
    only: Vec<String>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation file (TOML with [truth], optional [population] and [[template]]).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed in the simulation file.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the replicate count for frequency tables.
    #[arg(long)]
    replicates: Option<u64>,
}

#[derive(Args)]
struct SolveArgs {
    /// Interpretable parameters (TOML with external_prob, sitp_2, period_variance, size_exponent, [alpha], ...).
    #[arg(long, conflicts_with = "theta", required_unless_present = "theta")]
    params: Option<PathBuf>,
    /// Natural-scale parameter vector, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Option<Vec<f64>>,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Member feature rows as 0/1 digits separated by ';', e.g. "00100;10000".
    /// With no features, the household size as a number.
    #[arg(long)]
    household: String,
    /// Also write the distribution as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn load_tranches(path: Option<&Path>) -> Result<Tranches> {
    Ok(match path {
        Some(p) => Tranches::load(p)?,
        None => Tranches::default(),
    })
}

fn load_features(path: Option<&Path>) -> Result<FeatureConfig> {
    Ok(match path {
        Some(p) => FeatureConfig::load(p)?,
        None => FeatureConfig::default(),
    })
}

fn load_study(data: &DataArgs) -> Result<Study> {
    let tranches = load_tranches(data.tranches.as_deref())?;
    let parsed = parse_flat_file(&data.input)?;
    info!(
        "read {} visits from {}",
        parsed.records.len(),
        data.input.display()
    );
    let study = Study::from_records(parsed.records, tranches)?;
    fs::create_dir_all(&data.out).with_context(|| format!("creating {}", data.out.display()))?;
    Ok(study)
}

fn header_only(path: &Path, header: &[&str]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{}", header.join(","))?;
    w.flush()?;
    Ok(())
}

fn explore(args: &ExploreArgs) -> Result<bool> {
    let study = load_study(&args.data)?;
    let out = &args.data.out;
    let data: Vec<TrancheData> = (0..study.tranches().len())
        .map(|t| study.tranche_data(t))
        .collect();
    for td in &data {
        let name = &td.tranche.name;
        if td.dropped_oversize > 0 {
            warn!(
                "{name}: {} households with more than six members dropped",
                td.dropped_oversize
            );
        }
        let hist_path = out.join(format!("hist_{name}.csv"));
        let density_path = out.join(format!("density_{name}.csv"));
        let pairs_path = out.join(format!("pairs_{name}.csv"));
        let residuals_path = out.join(format!("residuals_{name}.csv"));
        if td.households.is_empty() {
            header_only(
                &hist_path,
                &["schema_version", "size", "positives", "count"],
            )?;
        } else {
            tranche_histogram(td).write_csv(create(&hist_path)?)?;
        }
        let density = tranche_density(td, &args.split_feature, args.kernel_width, args.grid)?;
        if density.points.is_empty() {
            header_only(&density_path, &["schema_version", "x", "y", "value"])?;
        } else {
            density.write_csv(create(&density_path)?)?;
        }
        if td.households.iter().any(|h| h.n_positive() > 0) {
            let pairs = tranche_pairs(td)?;
            for (a, b) in pairs.flagged() {
                warn!(
                    "{name}: {}-{} pairs observed where none are expected",
                    pairs.states[a], pairs.states[b]
                );
            }
            pairs.write_pairs_csv(create(&pairs_path)?)?;
            pairs.write_residuals_csv(create(&residuals_path)?)?;
        } else {
            header_only(
                &pairs_path,
                &[
                    "schema_version",
                    "state_a",
                    "state_b",
                    "observed",
                    "expected",
                ],
            )?;
            header_only(
                &residuals_path,
                &["schema_version", "state_a", "state_b", "residual"],
            )?;
        }
        info!("{name}: {} households", td.households.len());
    }

    let (per, overall) = features_summary(&data);
    let mut w = csv_writer(&out.join("features_summary.csv"))?;
    let mut header = vec!["schema_version".to_string(), "feature".to_string()];
    header.extend(data.iter().map(|t| t.tranche.name.clone()));
    header.push("Overall".into());
    w.write_record(&header)?;
    for (row, label) in SUMMARY_ROWS.iter().enumerate() {
        let mut rec = vec![SCHEMA_VERSION.to_string(), label.to_string()];
        rec.extend(per.iter().map(|c| c.values()[row].to_string()));
        rec.push(overall.values()[row].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(true)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

#[derive(Serialize)]
struct Diagnostics {
    restarts: usize,
    converged: usize,
    best_restart: usize,
    best_objective: f64,
    runs: Vec<RunSummary>,
}

#[derive(Serialize)]
struct RunSummary {
    index: usize,
    objective: f64,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
    message: String,
}

#[derive(Serialize)]
struct FitReport<'a> {
    schema_version: u32,
    tranche: &'a str,
    households: usize,
    dropped_oversize: usize,
    fit_config: &'a FitConfig,
    features: &'a FeatureConfig,
    parameter_names: Vec<String>,
    theta_map: &'a ModelParams,
    covariance: &'a [Vec<f64>],
    report: &'a [Interval],
    diagnostics: Diagnostics,
}

#[derive(Serialize)]
struct FitFailure<'a> {
    schema_version: u32,
    tranche: &'a str,
    households: usize,
    error: String,
}

fn parameter_names(cfg: &FeatureConfig) -> Vec<String> {
    let mut names: Vec<String> = [
        "log_external_force",
        "log_household_rate",
        "log_period_variance",
        "size_exponent_tan",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for role in housefs::model::Role::ALL {
        for f in cfg.role_features(role) {
            names.push(format!("{}_{f}", role.symbol()));
        }
    }
    names
}

fn diagnostics(res: &FitResult) -> Diagnostics {
    Diagnostics {
        restarts: res.restarts.len(),
        converged: res.n_converged(),
        best_restart: res.best_restart,
        best_objective: -res.log_posterior,
        runs: res
            .restarts
            .iter()
            .map(|r| RunSummary {
                index: r.index,
                objective: r.objective,
                grad_norm: r.grad_norm,
                iterations: r.iterations,
                converged: r.converged,
                message: r.message.clone(),
            })
            .collect(),
    }
}

fn fit_config(args: &FitArgs) -> Result<FitConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<FitConfig>(&text)
                .map_err(|e| housefs::Error::Config(format!("{}: {e}", p.display())))?
        }
        None => FitConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.prior_sd {
        cfg.prior_sd = v;
    }
    if let Some(v) = args.restarts {
        cfg.restarts = v;
    }
    if let Some(v) = args.ci_samples {
        cfg.ci_samples = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fit_cmd(args: &FitArgs) -> Result<bool> {
    let features = load_features(args.features.as_deref())?;
    let config = fit_config(args)?;
    let study = load_study(&args.data)?;
    for name in &args.only {
        if study.tranches().index_of(name).is_none() {
            return Err(housefs::Error::Config(format!("unknown tranche '{name}'")).into());
        }
    }
    let out = &args.data.out;
    let mut all_ok = true;
    let mut baseline = csv_writer(&out.join("baseline_by_tranche.csv"))?;
    let mut effects = csv_writer(&out.join("effects_by_tranche.csv"))?;
    let plot_header = [
        "schema_version",
        "tranche",
        "group",
        "quantity",
        "point",
        "median",
        "lower",
        "upper",
    ];
    baseline.write_record(plot_header)?;
    effects.write_record(plot_header)?;

    for (t, spec) in study.tranches().list().iter().enumerate() {
        if !args.only.is_empty() && !args.only.contains(&spec.name) {
            continue;
        }
        let data = study.tranche_data(t);
        let cohort = data.build_cohort(&features)?;
        let path = out.join(format!("fit_{}.json", spec.name));
        if cohort.is_empty() {
            warn!("{}: no households, skipped", spec.name);
            write_json(
                &path,
                &FitFailure {
                    schema_version: SCHEMA_VERSION,
                    tranche: &spec.name,
                    households: 0,
                    error: "no households in tranche".into(),
                },
            )?;
            continue;
        }
        info!(
            "{}: fitting {} households ({} feature patterns)",
            spec.name,
            cohort.len(),
            cohort.n_patterns()
        );
        match fit(&cohort, &config) {
            Ok(res) => {
                write_json(
                    &path,
                    &FitReport {
                        schema_version: SCHEMA_VERSION,
                        tranche: &spec.name,
                        households: cohort.len(),
                        dropped_oversize: data.dropped_oversize,
                        fit_config: &config,
                        features: &features,
                        parameter_names: parameter_names(&features),
                        theta_map: &res.theta_map,
                        covariance: &res.covariance,
                        report: &res.intervals,
                        diagnostics: diagnostics(&res),
                    },
                )?;
                for row in &res.intervals {
                    let w = if row.group == "baseline" {
                        &mut baseline
                    } else {
                        &mut effects
                    };
                    w.write_record(&[
                        SCHEMA_VERSION.to_string(),
                        spec.name.clone(),
                        row.group.clone(),
                        row.label.clone(),
                        format!("{:.6}", row.point),
                        format!("{:.6}", row.median),
                        format!("{:.6}", row.lower),
                        format!("{:.6}", row.upper),
                    ])?;
                }
            }
            Err(e) => {
                all_ok = false;
                warn!("{}: fit failed: {e}", spec.name);
                write_json(
                    &path,
                    &FitFailure {
                        schema_version: SCHEMA_VERSION,
                        tranche: &spec.name,
                        households: cohort.len(),
                        error: e.to_string(),
                    },
                )?;
            }
        }
    }
    baseline.flush()?;
    effects.flush()?;
    Ok(all_ok)
}

#[derive(Serialize)]
struct TruthFile<'a> {
    schema_version: u32,
    seed: u64,
    truth: &'a TruthSpec,
    features: &'a FeatureConfig,
    /// Natural-scale vector; absent when a rate is exactly zero.
    theta: Option<ModelParams>,
    epi: &'a housefs::EpiParams,
    population: Option<&'a housefs::synthetic::PopulationSpec>,
}

fn simulate_cmd(args: &SimulateArgs) -> Result<bool> {
    let spec = SimulationSpec::load(&args.spec)?;
    let seed = args.seed.unwrap_or(spec.seed);
    let features = spec.feature_config();
    let epi = spec.truth.to_epi(&features)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    if let Some(pop) = &spec.population {
        let syn = generate_cohort(pop, &epi, &features, seed)?;
        write_flat_file(&syn.records, &args.out.join("synthetic_visits.csv"))?;
        info!(
            "wrote {} visits for {} households",
            syn.records.len(),
            syn.households.len()
        );
    }
    write_json(
        &args.out.join("truth.json"),
        &TruthFile {
            schema_version: SCHEMA_VERSION,
            seed,
            truth: &spec.truth,
            features: &features,
            theta: encode(&epi, &features).ok(),
            epi: &epi,
            population: spec.population.as_ref(),
        },
    )?;

    if !spec.template.is_empty() {
        let sim = SimConfig {
            epi,
            feature_config: features,
            templates: spec.template.clone(),
            replicates: args.replicates.unwrap_or(spec.replicates),
            seed,
        };
        let freqs = outcome_frequencies(&sim)?;
        let exact = compare_with_exact(&sim, &freqs).ok();
        if exact.is_none() {
            warn!("exact probabilities unavailable for these parameters; exact and tv columns left empty");
        }
        let mut w = csv_writer(&args.out.join("frequencies.csv"))?;
        w.write_record([
            "schema_version",
            "template",
            "size",
            "outcome",
            "count",
            "frequency",
            "exact",
            "tv",
        ])?;
        for (i, f) in freqs.iter().enumerate() {
            let probs = f.probs();
            for (mask, &count) in f.counts.iter().enumerate() {
                let (p, tv) = match &exact {
                    Some(e) => (format!("{:.9}", e[i].0[mask]), format!("{:.6}", e[i].1)),
                    None => (String::new(), String::new()),
                };
                w.write_record(&[
                    SCHEMA_VERSION.to_string(),
                    f.template.to_string(),
                    f.size.to_string(),
                    outcome_label(mask as u32, f.size),
                    count.to_string(),
                    format!("{:.9}", probs[mask]),
                    p,
                    tv,
                ])?;
            }
        }
        w.flush()?;
    }
    Ok(true)
}

fn parse_household(text: &str, cfg: &FeatureConfig) -> Result<Vec<FeatureRow>> {
    let text = text.trim();
    if cfg.n_features() == 0 {
        if let Ok(n) = text.parse::<usize>() {
            return Ok(vec![FeatureRow::EMPTY; n]);
        }
    }
    text.split(';')
        .map(|member| {
            let bits: Vec<u8> = member
                .trim()
                .chars()
                .filter(|c| !matches!(c, ',' | ' '))
                .map(|c| match c {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    other => Err(housefs::Error::Config(format!(
                        "feature digit '{other}' is not 0 or 1"
                    ))),
                })
                .collect::<Result<_, _>>()?;
            if bits.len() != cfg.n_features() {
                return Err(housefs::Error::Config(format!(
                    "member row '{member}' has {} digits; the feature config has {} columns",
                    bits.len(),
                    cfg.n_features()
                ))
                .into());
            }
            Ok(FeatureRow::from_bits(&bits)?)
        })
        .collect()
}

#[derive(Serialize)]
struct SolveOutput {
    schema_version: u32,
    size: usize,
    outcomes: Vec<(String, f64)>,
}

fn solve_cmd(args: &SolveArgs) -> Result<bool> {
    let features = load_features(args.features.as_deref())?;
    let epi = match (&args.params, &args.theta) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let truth: TruthSpec = toml::from_str(&text)
                .map_err(|e| housefs::Error::Config(format!("{}: {e}", p.display())))?;
            truth.to_epi(&features)?
        }
        (None, Some(theta)) => decode(&ModelParams::new(theta.clone())?, &features)?,
        (None, None) => bail!("either --params or --theta is required"),
    };
    let rows = parse_household(&args.household, &features)?;
    let hh = Household::new("cli", rows, 0)?;
    let dist = solve(&hh, &epi, &features)?;
    let n = dist.size();
    let outcomes: Vec<(String, f64)> = dist
        .probs()
        .iter()
        .enumerate()
        .map(|(y, &p)| (outcome_label(y as u32, n), p))
        .collect();
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    writeln!(w, "outcome\tprobability")?;
    for (label, p) in &outcomes {
        writeln!(w, "{label}\t{p:.12e}")?;
    }
    if let Some(path) = &args.out {
        write_json(
            path,
            &SolveOutput {
                schema_version: SCHEMA_VERSION,
                size: n,
                outcomes,
            },
        )?;
    }
    Ok(true)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|cause| {
        cause
            .downcast_ref::<housefs::Error>()
            .is_some_and(housefs::Error::is_config)
    });
    if config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }

    let result = match &cli.command {
        Command::Explore(a) => explore(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Solve(a) => solve_cmd(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

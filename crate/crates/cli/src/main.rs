mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use drdtr_core::learners::{aipw_welfare_terms, learn, mean_and_se, CrossFitted, LearnedDtr, NuisanceSource};
use drdtr_core::simeval::{
    generate, run_benchmark, true_welfare_terms, BenchmarkMethod, BenchmarkOptions, DgpKind, DgpSpec,
    OracleNuisance, PotentialOutcomePanel,
};
use drdtr_core::{Dtr, LearnerConfig, Method, PanelDataset};
use serde::Serialize;

use config::{parse_list, LearnerSection, RunConfig};

#[derive(Parser)]
#[command(name = "drdtr", version, about = "Doubly robust learning of dynamic treatment regimes")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a panel from a simulation design.
    Simulate(SimulateArgs),
    /// Learn a regime from a panel CSV.
    Learn(LearnArgs),
    /// Estimate the welfare of a stored regime and compare it with uniform regimes.
    Evaluate(EvaluateArgs),
    /// Monte Carlo comparison of learners on a simulation design.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_parser = parse_dgp)]
    dgp: DgpKind,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// Panel CSV.
    #[arg(long)]
    out: PathBuf,
    /// Potential-outcome CSV for true-welfare evaluation.
    #[arg(long)]
    sidecar: Option<PathBuf>,
    /// Schema file; defaults to the output path with a `.toml` extension.
    #[arg(long)]
    schema_out: Option<PathBuf>,
}

#[derive(Args)]
struct LearnArgs {
    /// dr, ipw, q_learn, q_search or aipw_simultaneous, optionally with
    /// `+miss_q` / `+miss_ps`.
    #[arg(long)]
    method: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, alias = "schema")]
    config: PathBuf,
    /// Tree depth per stage, e.g. `1,2`.
    #[arg(long)]
    depth: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    seed: u64,
    /// Regime JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Regime JSON written by `learn`.
    #[arg(long)]
    dtr: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, alias = "schema")]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    sidecar: Option<PathBuf>,
    /// Fail unless a sidecar provides potential outcomes.
    #[arg(long)]
    true_welfare: bool,
    /// Use the true nuisances of a discrete simulation design.
    #[arg(long, value_parser = parse_dgp)]
    oracle: Option<DgpKind>,
    /// Report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Misspecify {
    Q,
    Ps,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long, value_parser = parse_dgp)]
    dgp: DgpKind,
    /// Comma-separated method labels, e.g. `dr,ipw,q_search,dr+miss_q`.
    #[arg(long)]
    methods: String,
    /// Training sample size.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    reps: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 50_000)]
    n_test: usize,
    /// Misspecify a nuisance for every method.
    #[arg(long, value_enum)]
    misspecify: Option<Misspecify>,
    /// Tree depth per stage; defaults to the design's class.
    #[arg(long)]
    depth: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    trees: Option<usize>,
    /// Record wall-clock milliseconds per fit (makes output non-reproducible).
    #[arg(long)]
    timings: bool,
    /// JSON-lines report.
    #[arg(long)]
    out: PathBuf,
    /// Also write the summary table here.
    #[arg(long)]
    table: Option<PathBuf>,
}

fn parse_dgp(raw: &str) -> std::result::Result<DgpKind, String> {
    DgpKind::parse(raw).map_err(|e| e.to_string())
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Learn(a) => learn_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Benchmark(a) => benchmark(a),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let pop = generate(&DgpSpec { kind: a.dgp, n: a.n, seed: a.seed })?;
    pop.data.write_csv(&a.out)?;
    if let Some(path) = &a.sidecar {
        let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        pop.write_sidecar(file)?;
    }
    let schema_path = a.schema_out.unwrap_or_else(|| a.out.with_extension("toml"));
    write_file(&schema_path, RunConfig::for_schema(pop.data.schema()).to_toml()?.as_bytes())?;
    println!(
        "{} units from {} written to {} (schema {})",
        a.n,
        a.dgp,
        a.out.display(),
        schema_path.display()
    );
    Ok(())
}

struct Loaded {
    config: RunConfig,
    data: PanelDataset,
}

fn load(config: &Path, data: &Path) -> Result<Loaded> {
    let config = RunConfig::load(config)?;
    let schema = config.schema.to_schema()?;
    let data = PanelDataset::load_csv(data, &schema)?;
    Ok(Loaded { config, data })
}

fn learn_cmd(a: LearnArgs) -> Result<()> {
    let Loaded { config, data } = load(&a.config, &a.data)?;
    let depths = a.depth.as_deref().map(parse_list).transpose()?;
    let classes = config.classes(data.schema(), depths.as_deref())?;
    let mut base = config.learner_config(Method::Dr, classes, a.seed);
    if let Some(k) = a.k {
        base.k = k;
    }
    if let Some(eta) = a.eta {
        base.eta = eta;
    }
    let cfg = BenchmarkMethod::parse(&a.method, &base)?.config;
    let learned = learn(&data, &cfg)?;
    let mut json = learned.to_json()?;
    json.push('\n');
    write_file(&a.out, json.as_bytes())?;
    for t in 1..=learned.dtr.num_stages() {
        let stage = learned.dtr.stage(t);
        match stage.as_tree() {
            Some(tree) => println!("stage {t}: {}", serde_json::to_string(tree)?),
            None => println!("stage {t}: pointwise argmax of fitted Q"),
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RegimeRow {
    regime: String,
    aipw: f64,
    aipw_se: f64,
    /// Learned minus this regime.
    #[serde(skip_serializing_if = "Option::is_none")]
    contrast: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    contrast_se: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    true_welfare: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    true_welfare_se: Option<f64>,
}

#[derive(Serialize)]
struct EvaluateReport {
    nuisances: &'static str,
    n: usize,
    regimes: Vec<RegimeRow>,
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    if a.true_welfare && a.sidecar.is_none() {
        bail!("--true-welfare needs potential outcomes; pass --sidecar from `simulate`");
    }
    let Loaded { config, data } = load(&a.config, &a.data)?;
    let text = std::fs::read_to_string(&a.dtr).with_context(|| format!("reading {}", a.dtr.display()))?;
    let learned: LearnedDtr =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.dtr.display()))?;
    if learned.dtr.num_stages() != data.num_stages() {
        bail!("regime has {} stages, data has {}", learned.dtr.num_stages(), data.num_stages());
    }
    let pop = a
        .sidecar
        .as_ref()
        .map(|p| PotentialOutcomePanel::load_sidecar(data.clone(), p))
        .transpose()?;

    let mut regimes: Vec<(String, Dtr)> = vec![("learned".to_string(), learned.dtr.clone())];
    let uniform = data.schema().actions_per_stage.iter().copied().min().unwrap_or(0);
    for action in 0..uniform {
        let actions = vec![action; data.num_stages()];
        regimes.push((format!("always_{action}"), Dtr::constant(&actions)));
    }

    let oracle_dgp = a.oracle.map(|k| {
        k.discrete()
            .with_context(|| format!("{k} has no closed-form nuisances"))
    });
    let oracle_dgp = oracle_dgp.transpose()?;
    let classes = config.classes(data.schema(), None)?;
    let mut cfg: LearnerConfig = config.learner_config(Method::Dr, classes, a.seed);
    if let Some(k) = a.k {
        cfg.k = k;
    }
    cfg.validate(&data)?;
    let fitted;
    let oracle;
    let source: &dyn NuisanceSource = match &oracle_dgp {
        Some(dgp) => {
            if data.schema() != &dgp.schema() {
                bail!("data schema does not match the oracle design");
            }
            oracle = OracleNuisance { dgp, data: &data };
            &oracle
        }
        None => {
            fitted = CrossFitted::fit(&data, &cfg)?;
            &fitted
        }
    };

    let mut terms = Vec::with_capacity(regimes.len());
    for (_, dtr) in &regimes {
        terms.push(aipw_welfare_terms(&data, dtr, source)?);
    }
    let mut rows = Vec::with_capacity(regimes.len());
    for (idx, (name, dtr)) in regimes.iter().enumerate() {
        let est = mean_and_se(&terms[idx]);
        let contrast = (idx > 0).then(|| {
            let diff: Vec<f64> = terms[0].iter().zip(&terms[idx]).map(|(l, c)| l - c).collect();
            mean_and_se(&diff)
        });
        let truth = pop
            .as_ref()
            .map(|p| true_welfare_terms(p, dtr).map(|t| mean_and_se(&t)))
            .transpose()?;
        rows.push(RegimeRow {
            regime: name.clone(),
            aipw: est.value,
            aipw_se: est.std_error,
            contrast: contrast.map(|c| c.value),
            contrast_se: contrast.map(|c| c.std_error),
            true_welfare: truth.map(|t| t.value),
            true_welfare_se: truth.map(|t| t.std_error),
        });
    }
    let report = EvaluateReport {
        nuisances: if oracle_dgp.is_some() { "oracle" } else { "cross_fitted" },
        n: data.len(),
        regimes: rows,
    };
    print!("{}", evaluate_table(&report));
    if let Some(out) = &a.out {
        let mut json = serde_json::to_string_pretty(&report)?;
        json.push('\n');
        write_file(out, json.as_bytes())?;
    }
    Ok(())
}

fn evaluate_table(report: &EvaluateReport) -> String {
    let cell = |v: Option<f64>, se: Option<f64>| match (v, se) {
        (Some(v), Some(se)) => format!("{v:.3} ({se:.3})"),
        _ => "-".to_string(),
    };
    let mut out = String::new();
    let _ = writeln!(out, "welfare estimates, n = {}, {} nuisances", report.n, report.nuisances);
    let _ = writeln!(out, "{:<10}  {:>16}  {:>16}  {:>16}", "regime", "aipw (se)", "learned - this", "true (se)");
    for r in &report.regimes {
        let _ = writeln!(
            out,
            "{:<10}  {:>16}  {:>16}  {:>16}",
            r.regime,
            cell(Some(r.aipw), Some(r.aipw_se)),
            cell(r.contrast, r.contrast_se),
            cell(r.true_welfare, r.true_welfare_se)
        );
    }
    out
}

fn benchmark(a: BenchmarkArgs) -> Result<()> {
    let mut classes = a.dgp.default_classes();
    if let Some(raw) = &a.depth {
        let depths = parse_list(raw)?;
        if depths.len() != classes.len() {
            bail!("--depth lists {} depths for {} stages", depths.len(), classes.len());
        }
        for (c, d) in classes.iter_mut().zip(depths) {
            c.depth = d;
        }
    }
    let mut base = LearnerConfig::new(Method::Dr, classes, a.seed);
    config::apply_learner_section(
        &mut base,
        &LearnerSection {
            k: a.k,
            trees: a.trees,
            ..Default::default()
        },
    );
    let suffix = match a.misspecify {
        None => "",
        Some(Misspecify::Q) => "+miss_q",
        Some(Misspecify::Ps) => "+miss_ps",
    };
    let methods = a
        .methods
        .split(',')
        .map(|m| BenchmarkMethod::parse(&format!("{}{suffix}", m.trim()), &base))
        .collect::<drdtr_core::Result<Vec<_>>>()?;
    let opts = BenchmarkOptions {
        n_train: a.n,
        n_test: a.n_test,
        reps: a.reps,
        master_seed: a.seed,
        timings: a.timings,
    };
    let report = run_benchmark(&methods, a.dgp, &opts)?;
    write_file(&a.out, report.to_jsonl()?.as_bytes())?;
    let table = report.table();
    print!("{table}");
    if let Some(path) = &a.table {
        write_file(path, table.as_bytes())?;
    }
    Ok(())
}

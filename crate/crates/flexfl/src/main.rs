use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use flexfl::config::{ExperimentConfig, Mode, RunManifest};
use flexfl::fedsim::{self, derive_seed};
use flexfl::pruner::{self, PruningPlan};
use flexfl::{apoz, data};

#[derive(Parser)]
#[command(
    name = "flexfl",
    version,
    about = "Deterministic heterogeneous FL simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write metrics CSV, plan dump, and manifest.
    Run(RunArgs),
    /// Generate pruning plans offline and print them as JSON.
    Plans(PlansArgs),
    /// Compare two plan files with the ratio-similarity metric.
    Similarity(SimilarityArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to a JSON config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long)]
    fraction: Option<f64>,
    /// Dirichlet concentration, or "iid".
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    mode: Option<Mode>,
    /// Output directory (env FLEXFL_OUT_DIR, default "out").
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args)]
struct PlansArgs {
    /// Comma-separated target ratios, e.g. "0.25,0.5,1.0".
    #[arg(long, default_value = "0.25,0.5,1.0")]
    targets: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the dump here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimilarityArgs {
    plan_a: PathBuf,
    plan_b: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct PlanDump {
    schema: String,
    pool: Vec<PruningPlan>,
    adaptive: Vec<PruningPlan>,
    nested: bool,
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p)
            .with_context(|| format!("failed to load config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &RunArgs) -> anyhow::Result<()> {
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.rounds {
        cfg.rounds = r;
    }
    if let Some(d) = args.devices {
        cfg.num_devices = d;
    }
    if let Some(f) = args.fraction {
        cfg.fraction = f;
    }
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if let Some(e) = args.eval_every {
        cfg.eval_every = e;
    }
    if let Some(a) = &args.alpha {
        cfg.data.alpha = if a == "iid" {
            None
        } else {
            Some(a.parse::<f64>().context("alpha must be a float or 'iid'")?)
        };
    }
    Ok(())
}

fn nesting_holds(plans: &[PruningPlan], adaptive: &[PruningPlan]) -> bool {
    let mut chain: Vec<&PruningPlan> = plans.iter().chain(adaptive).collect();
    chain.sort_by_key(|p| p.achieved_params);
    chain.windows(2).all(|pair| {
        pair[0]
            .widths
            .iter()
            .zip(&pair[1].widths)
            .all(|(a, b)| a <= b)
    })
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    apply_overrides(&mut cfg, &args)?;
    cfg.validate().context("invalid configuration")?;

    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| std::env::var_os("FLEXFL_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;

    let output = fedsim::run(&cfg)?;

    let metrics_path = out_dir.join("metrics.csv");
    let plans_path = out_dir.join("plans.json");
    let manifest_path = out_dir.join("manifest.json");
    let config_path = out_dir.join("config.resolved.json");

    let csv = fedsim::render_csv(&output.reports, output.plans.len());
    std::fs::write(&metrics_path, csv)?;

    let dump = PlanDump {
        schema: "flexfl-plans-v1".into(),
        nested: nesting_holds(&output.plans, &output.adaptive_plans),
        pool: output.plans.clone(),
        adaptive: output.adaptive_plans.clone(),
    };
    std::fs::write(&plans_path, serde_json::to_string_pretty(&dump)?)?;
    std::fs::write(&config_path, serde_json::to_string_pretty(&cfg)?)?;

    let manifest = RunManifest {
        config_hash: output.config_hash.clone(),
        master_seed: cfg.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        csv_schema: fedsim::CSV_SCHEMA_VERSION.to_string(),
        plan_dump_path: plans_path.display().to_string(),
        metrics_path: metrics_path.display().to_string(),
        config_path: config_path.display().to_string(),
        start_round: 1,
        end_round: cfg.rounds,
    };
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;

    if let Some(last) = output.reports.last() {
        println!(
            "run complete: round {} avg_acc {:.4} global_acc {:.4}",
            last.round, last.avg_accuracy, last.global_accuracy
        );
    } else {
        println!("run complete: pre-processing only ({} rounds)", cfg.rounds);
    }
    println!("metrics: {}", metrics_path.display());
    Ok(())
}

fn cmd_plans(args: PlansArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    let targets: Vec<f64> = args
        .targets
        .split(',')
        .map(|t| t.trim().parse::<f64>().context("malformed target list"))
        .collect::<anyhow::Result<_>>()?;
    cfg.pool_targets = targets;
    cfg.validate().context("invalid configuration")?;

    let arch = cfg.arch()?;
    let master = cfg.seed;
    let mut data_cfg = cfg.data.clone();
    data_cfg.seed = derive_seed(master, "data");
    let (train, _) = data::generate_corpus(&data_cfg)?;
    let (proxy_train, proxy_test) = data::proxy_split(
        &train,
        cfg.data.proxy_fraction,
        derive_seed(master, "proxy"),
    )?;
    let pretrain = apoz::PretrainConfig {
        epochs: cfg.pretrain_epochs,
        batch_size: cfg.kd.batch_size,
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
    };
    let profile = apoz::build_profile(
        &arch,
        (&proxy_train.features, &proxy_train.labels),
        (&proxy_test.features, &proxy_test.labels),
        &pretrain,
        derive_seed(master, "pretrain"),
    )?;
    let (pool, adaptive) = fedsim::build_plans(&cfg, &arch, &profile)?;

    let dump = PlanDump {
        schema: "flexfl-plans-v1".into(),
        nested: nesting_holds(&pool, &adaptive),
        pool,
        adaptive,
    };
    let json = serde_json::to_string_pretty(&dump)?;
    match args.out {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

/// Extract ratio vectors from a plan file: a full dump, a bare plan array,
/// or a single plan object.
fn ratio_vectors(path: &Path) -> anyhow::Result<Vec<Vec<f64>>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let value: Value = serde_json::from_str(&text)
        .with_context(|| format!("{} is not valid JSON", path.display()))?;
    let plans: Vec<Value> = if let Some(pool) = value.get("pool") {
        pool.as_array().context("'pool' is not an array")?.clone()
    } else if let Some(arr) = value.as_array() {
        arr.clone()
    } else {
        vec![value]
    };
    plans
        .iter()
        .map(|p| {
            let ratios = p
                .get("ratios")
                .and_then(|r| r.as_array())
                .context("plan entry has no 'ratios' array")?;
            ratios
                .iter()
                .map(|v| v.as_f64().context("ratio is not a number"))
                .collect()
        })
        .collect()
}

fn cmd_similarity(args: SimilarityArgs) -> anyhow::Result<()> {
    let a = ratio_vectors(&args.plan_a)?;
    let b = ratio_vectors(&args.plan_b)?;
    if a.len() != b.len() {
        bail!("plan files hold {} vs {} plans", a.len(), b.len());
    }
    for (ra, rb) in a.iter().zip(&b) {
        let sim = pruner::plan_similarity(ra, rb)?;
        println!("{sim:.6}");
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Plans(args) => cmd_plans(args),
        Command::Similarity(args) => cmd_similarity(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

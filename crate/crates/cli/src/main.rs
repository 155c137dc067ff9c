use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use cfbench::bench::{
    run_benchmark, validate_config, write_report, ReportOptions, RunConfig, RunOptions, RunRecord, RECORDS_FILE,
};
use cfbench::fetch::{fetch_dataset, resolve_data_dir};
use cfbench::generators::Registry;
use cfbench::metrics::{Metric, ValidityMode};
use cfbench::ranking::{grouping_tables, tables_to_csv, tables_to_markdown, RankOptions};
use cfbench::recommender::{build_rows, export_tree, fit_rows, recommend, TargetMap, DEFAULT_MAX_DEPTH};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cfbench", version, about = "Benchmark counterfactual explanation generators")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cache directory for downloaded datasets.
    #[arg(long, global = true, env = "CFBENCH_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 or unset uses all cores.
    #[arg(long, global = true, env = "CFBENCH_JOBS")]
    jobs: Option<usize>,
    /// Added to every configured seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed_offset: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download every dataset given by URL and verify its digest.
    Fetch,
    /// Check a run configuration without running it.
    Validate,
    /// Run the benchmark and write records plus a report.
    Run,
    /// Print mean-rank tables from a records file.
    Rank(RankArgs),
    /// Rebuild the report files from a records file.
    Report(RecordsArg),
    /// Score generators for a setting with the decision-tree recommender.
    Recommend(RecommendArgs),
}

#[derive(Args)]
struct RecordsArg {
    /// Records file; defaults to `records.jsonl` in the output directory.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct RankArgs {
    #[command(flatten)]
    records: RecordsArg,
    /// Validity modes to rank under (default: both).
    #[arg(long = "mode")]
    modes: Vec<String>,
    /// Metrics to rank (default: all nine).
    #[arg(long = "metric")]
    metrics: Vec<String>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Also report the Iman-Davenport F correction.
    #[arg(long)]
    iman_davenport: bool,
}

#[derive(Args)]
struct RecommendArgs {
    #[command(flatten)]
    records: RecordsArg,
    /// Metrics to score on (default: all nine).
    #[arg(long = "metric")]
    metrics: Vec<String>,
    #[arg(long, default_value = "valid-and-realistic")]
    mode: String,
    /// Recommend families (CO, HE, SS) instead of generators.
    #[arg(long)]
    family: bool,
    /// Print each fitted tree.
    #[arg(long)]
    show_tree: bool,
    #[arg(long)]
    neurons: f64,
    #[arg(long)]
    auc_test: f64,
    #[arg(long)]
    rows_train: f64,
    #[arg(long)]
    columns_numerical: f64,
    #[arg(long)]
    columns_categorical: f64,
    #[arg(long, default_value_t = 0.0)]
    misclassified: f64,
    #[arg(long)]
    factual_prediction: f64,
    #[arg(long)]
    factual_share: f64,
}

enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
    Partial(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Partial(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Validation(e) | Failure::Runtime(e) | Failure::Partial(e) => e,
        }
    }
}

type Outcome = Result<(), Failure>;

fn validation(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn load_config(cli: &Cli, registry: &Registry) -> Result<RunConfig, Failure> {
    let path = cli.config.as_ref().ok_or_else(|| validation(anyhow!("--config is required")))?;
    validate_config(path, registry).map_err(|errs| {
        let mut msg = format!("{} is invalid:", path.display());
        for e in errs {
            msg.push_str("\n  - ");
            msg.push_str(&e);
        }
        validation(anyhow!(msg))
    })
}

fn records_path(cli: &Cli, arg: &RecordsArg) -> Result<PathBuf, Failure> {
    if let Some(p) = &arg.records {
        return Ok(p.clone());
    }
    if let Some(o) = &cli.out {
        return Ok(o.join(RECORDS_FILE));
    }
    if cli.config.is_some() {
        let cfg = load_config(cli, &Registry::with_builtins())?;
        return Ok(cfg.resolve(&cfg.output_dir).join(RECORDS_FILE));
    }
    Err(validation(anyhow!("give --records, --out or --config to locate the records file")))
}

fn load_run(path: &Path) -> Result<RunRecord, Failure> {
    RunRecord::load(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(validation)
}

fn parse_list<T>(items: &[String], all: &[T]) -> Result<Vec<T>, Failure>
where
    T: std::str::FromStr<Err = cfbench::Error> + Clone,
{
    if items.is_empty() {
        return Ok(all.to_vec());
    }
    items.iter().map(|s| s.parse::<T>().map_err(validation)).collect()
}

fn cmd_fetch(cli: &Cli) -> Outcome {
    let cfg = load_config(cli, &Registry::with_builtins())?;
    let dir = resolve_data_dir(cli.data_dir.as_deref());
    let mut fetched = 0;
    for d in &cfg.datasets {
        if let (Some(url), Some(sha)) = (&d.url, &d.sha256) {
            let path = fetch_dataset(url, sha, &dir, None).map_err(runtime)?;
            println!("{}", path.display());
            fetched += 1;
        }
    }
    if fetched == 0 {
        println!("no dataset in the config is given by URL");
    }
    Ok(())
}

fn cmd_validate(cli: &Cli) -> Outcome {
    let cfg = load_config(cli, &Registry::with_builtins())?;
    println!(
        "ok: {} datasets, {} generators, {} factuals per class",
        cfg.datasets.len(),
        cfg.generators.len(),
        cfg.factuals_per_class
    );
    Ok(())
}

fn cmd_run(cli: &Cli) -> Outcome {
    let registry = Registry::with_builtins();
    let cfg = load_config(cli, &registry)?;
    let options = RunOptions {
        out_dir: cli.out.clone(),
        data_dir: cli.data_dir.clone(),
        jobs: cli.jobs.filter(|&j| j > 0),
        seed_offset: cli.seed_offset,
    };
    let outcome = run_benchmark(&cfg, &registry, &options).map_err(|f| {
        let err = anyhow!("run failed: {f}");
        if f.records_written > 0 {
            Failure::Partial(err)
        } else {
            Failure::Runtime(err)
        }
    })?;
    let run = RunRecord::load(&outcome.records_path).map_err(runtime)?;
    let report = ReportOptions {
        modes: cfg.modes.clone(),
        ..Default::default()
    };
    write_report(&run, &outcome.out_dir, &report).map_err(runtime)?;
    println!(
        "{} records written to {}",
        outcome.records_written,
        outcome.records_path.display()
    );
    Ok(())
}

fn cmd_rank(cli: &Cli, args: &RankArgs) -> Outcome {
    let run = load_run(&records_path(cli, &args.records)?)?;
    let modes = parse_list(&args.modes, &ValidityMode::ALL)?;
    let metrics = parse_list(&args.metrics, &Metric::ALL)?;
    let options = RankOptions {
        alpha: args.alpha,
        iman_davenport: args.iman_davenport,
    };
    let tables = grouping_tables(&run.scored(), &modes, &metrics, &options).map_err(runtime)?;
    print!("{}", tables_to_markdown(&tables));
    if args.iman_davenport {
        for t in &tables {
            if let Some((f, p)) = t.iman_davenport {
                println!("{} {} {}: Iman-Davenport F = {f:.4}, p = {p:.4}", t.grouping, t.mode, t.metric);
            }
        }
    }
    if let Some(out) = &cli.out {
        std::fs::create_dir_all(out).map_err(runtime)?;
        let csv = tables_to_csv(&tables).map_err(runtime)?;
        std::fs::write(out.join("ranks.csv"), csv).map_err(runtime)?;
    }
    Ok(())
}

fn cmd_report(cli: &Cli, args: &RecordsArg) -> Outcome {
    let path = records_path(cli, args)?;
    let run = load_run(&path)?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
    let files = write_report(&run, &out, &ReportOptions::default()).map_err(runtime)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn cmd_recommend(cli: &Cli, args: &RecommendArgs) -> Outcome {
    let run = load_run(&records_path(cli, &args.records)?)?;
    let mode: ValidityMode = args.mode.parse().map_err(validation)?;
    let metrics = parse_list(&args.metrics, &Metric::ALL)?;
    let targets = if args.family {
        TargetMap::Family(run.families())
    } else {
        TargetMap::Algorithm
    };
    let scored = run.scored();
    let profiles = run.profiles();
    let mut trees = Vec::new();
    for m in metrics {
        let rows = build_rows(&scored, &profiles, m, mode, &targets).map_err(runtime)?;
        if rows.is_empty() {
            println!("{m}: no eligible results to learn from");
            continue;
        }
        trees.push((m, fit_rows(&rows, DEFAULT_MAX_DEPTH).map_err(runtime)?));
    }
    let query = [
        args.neurons,
        args.auc_test,
        args.rows_train,
        args.columns_numerical,
        args.columns_categorical,
        args.misclassified,
        args.factual_prediction,
        args.factual_share,
    ];
    for (metric, scores) in recommend(&trees, &query).map_err(runtime)? {
        let cells: Vec<String> = scores.iter().map(|(c, s)| format!("{c} {s:.3}")).collect();
        println!("{metric}: {}", cells.join(", "));
    }
    if args.show_tree {
        for (m, t) in &trees {
            println!("\n# {m}\n{}", export_tree(t));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Fetch => cmd_fetch(&cli),
        Command::Validate => cmd_validate(&cli),
        Command::Run => cmd_run(&cli),
        Command::Rank(a) => cmd_rank(&cli, a),
        Command::Report(a) => cmd_report(&cli, a),
        Command::Recommend(a) => cmd_recommend(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

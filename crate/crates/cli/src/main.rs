//! `coltype`: detect, serve, evaluate and replay against a data directory.
//!
//! Exit codes: 0 on success, 2 for bad input (unreadable or malformed
//! files, bad flags), 3 for a missing or corrupt state directory.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use coltype_core::corpus::load_labeled_corpus;
use coltype_core::ensemble::{calibrate_tau, PipelineConfig};
use coltype_core::eval::{evaluate, EvalError, EvalOptions, EvalReport};
use coltype_core::state::{model_state, prediction_response, summarize, to_json_text, BuildOptions, GlobalModel, TenantModel, TenantSummary};
use coltype_core::store::{
    init_global, load_global, load_tenant, read_log, replay_events, save_global_params, DataDir, GlobalSources,
    StoreError, TableDir,
};
use coltype_core::table::{parse_table, ParseOptions};
use coltype_server::{App, ServerConfig, DEFAULT_MAX_UPLOAD_BYTES};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "coltype", version, about = "Semantic column type detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a global model from source files into a data directory.
    Init(InitArgs),
    /// Predict column types for one CSV file.
    Detect(DetectArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Measure precision and coverage on a labeled corpus.
    Eval(EvalArgs),
    /// Rebuild a tenant from a feedback log and print its state.
    Replay(ReplayArgs),
    /// Pick the smallest threshold that reaches a target precision.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct StateArgs {
    /// Data directory holding `global/` and `tenants/`.
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Tenant whose local model is used; a fresh one if never seen.
    #[arg(long)]
    tenant: Option<String>,
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// `key = value` file mirroring the pipeline config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Abstention threshold τ.
    #[arg(long)]
    tau: Option<f64>,
    /// Stage gate c.
    #[arg(long)]
    stage_gate: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    sample_cap: Option<usize>,
    #[arg(long)]
    fuzzy_floor: Option<f64>,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    ontology: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// Directory of `*.tsv` regex packs and `<type>.dict` dictionaries.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Labeled training corpus.
    #[arg(long)]
    train: PathBuf,
    /// Labeled corpus scanned for weak labels on feedback.
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Seeds training and background sampling.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct DetectArgs {
    csv: PathBuf,
    #[command(flatten)]
    state: StateArgs,
    /// Table id in the output; defaults to the file stem.
    #[arg(long)]
    table_id: Option<String>,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    #[arg(long)]
    no_header: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long, default_value_t = DEFAULT_MAX_UPLOAD_BYTES)]
    max_upload_bytes: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Args)]
struct EvalArgs {
    corpus: PathBuf,
    #[command(flatten)]
    state: StateArgs,
    /// Report the precision/coverage curve over the τ grid.
    #[arg(long)]
    sweep_tau: bool,
    /// Calibrate τ for this precision and evaluate there.
    #[arg(long)]
    target_precision: Option<f64>,
    /// Write the emitted predictions, one JSON object per line.
    #[arg(long)]
    predictions_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ReplayArgs {
    log: PathBuf,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Tenant to rebuild; defaults to the tenant of the first event.
    #[arg(long)]
    tenant: Option<String>,
    /// Write the resulting tenant snapshot here.
    #[arg(long)]
    snapshot_out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    corpus: PathBuf,
    #[command(flatten)]
    state: StateArgs,
    #[arg(long, default_value_t = 0.95)]
    target_precision: f64,
    /// Store the chosen τ with the global model.
    #[arg(long)]
    write: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn input(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: error.into() }
}

fn state(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 3, error: error.into() }
}

type Outcome = Result<(), Failure>;

impl ConfigArgs {
    fn resolve(&self, base: &PipelineConfig) -> Result<PipelineConfig, Failure> {
        let mut cfg = base.clone();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| path.display().to_string()).map_err(input)?;
            cfg = cfg.merge_text(&text).with_context(|| path.display().to_string()).map_err(input)?;
        }
        if let Some(v) = self.tau {
            cfg.abstain_threshold = v;
        }
        if let Some(v) = self.stage_gate {
            cfg.stage_gate = v;
        }
        if let Some(v) = self.top_k {
            cfg.top_k = v;
        }
        if let Some(v) = self.sample_cap {
            cfg.sample_cap = v;
        }
        if let Some(v) = self.fuzzy_floor {
            cfg.fuzzy_floor = v;
        }
        cfg.validate().map_err(input)?;
        Ok(cfg)
    }
}

fn open_global(data: &DataDir) -> Result<GlobalModel, Failure> {
    load_global(data).with_context(|| format!("loading state from {}", data.root().display())).map_err(state)
}

fn open_tenant(data: &DataDir, global: &GlobalModel, tenant: Option<&str>) -> Result<TenantModel, Failure> {
    match tenant {
        None => Ok(TenantModel::new("default")),
        Some(id) => load_tenant(data, id, global).map_err(|e| match e {
            StoreError::InvalidTenant(_) => input(e),
            e => state(e),
        }),
    }
}

fn load_corpus(dir: &Path) -> Result<Vec<coltype_core::corpus::AnnotatedTable>, Failure> {
    if !dir.is_dir() {
        return Err(input(anyhow!("{}: not a directory", dir.display())));
    }
    load_labeled_corpus(dir, &ParseOptions::default()).map_err(input)
}

/// Writes to stdout. A closed pipe (`coltype eval | head`) is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("error: writing output: {e}");
        }
    }
}

fn print_json<T: Serialize>(value: &T) {
    emit(&to_json_text(value));
}

fn cmd_init(args: InitArgs) -> Outcome {
    let data = DataDir::new(&args.data_dir);
    let mut options = BuildOptions::default();
    if let Some(seed) = args.seed {
        options.train.seed = seed;
        options.background_seed = seed;
    }
    options.config = args.config.resolve(&options.config)?;
    let sources = GlobalSources {
        ontology: args.ontology,
        embeddings: args.embeddings,
        rules: args.rules,
        training: args.train,
        source_corpus: args.source,
    };
    let global = init_global(&data, &sources, &options).map_err(input)?;
    eprintln!(
        "initialized {}: {} types, {} rules, {} training examples",
        data.global_dir().display(),
        global.ontology.len(),
        global.rules.len(),
        global.examples.len()
    );
    Ok(())
}

fn cmd_detect(args: DetectArgs) -> Outcome {
    let bytes = std::fs::read(&args.csv).with_context(|| args.csv.display().to_string()).map_err(input)?;
    if !args.delimiter.is_ascii() {
        return Err(input(anyhow!("delimiter must be ASCII")));
    }
    let options = ParseOptions {
        delimiter: args.delimiter as u8,
        has_header: !args.no_header,
        ..ParseOptions::default()
    };
    let stem = args.csv.file_stem().and_then(|s| s.to_str()).unwrap_or("table").to_string();
    let id = args.table_id.unwrap_or_else(|| stem.clone());
    let table = parse_table(&bytes, &options)
        .with_context(|| args.csv.display().to_string())
        .map_err(input)?
        .with_id(id, stem);
    let data = DataDir::new(&args.state.data_dir);
    let global = open_global(&data)?;
    let tenant = open_tenant(&data, &global, args.state.tenant.as_deref())?;
    let config = args.config.resolve(&global.config)?;
    let response = prediction_response(&global, &tenant, &table, &config).map_err(state)?;
    print_json(&response);
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> Outcome {
    let data = DataDir::new(&args.data_dir);
    let global = open_global(&data)?;
    let pipeline = args.config.resolve(&global.config)?;
    let overridden = pipeline != global.config;
    let config = ServerConfig {
        max_upload_bytes: args.max_upload_bytes,
        pipeline: overridden.then_some(pipeline),
        ..ServerConfig::new(data)
    };
    let app = App::with_global(config, global);
    let runtime = tokio::runtime::Runtime::new().map_err(state)?;
    runtime.block_on(coltype_server::serve(app, args.addr)).map_err(state)
}

fn print_report_table(r: &EvalReport) {
    use std::fmt::Write;
    let mut out = String::new();
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.4}", v));
    let _ = writeln!(out, "tables {}  columns {}  tau {}  c {}", r.tables, r.columns, r.tau, r.c);
    let _ = writeln!(out, "precision {}  coverage {:.4}  ({} correct of {} predicted)", pct(r.precision), r.coverage, r.correct, r.predicted);
    let _ = writeln!(out, "{:<16} {:>8} {:>9} {:>8} {:>9}", "type", "support", "predicted", "correct", "precision");
    for s in &r.per_type {
        let _ = writeln!(out, "{:<16} {:>8} {:>9} {:>8} {:>9}", s.type_id, s.support, s.predicted, s.correct, pct(s.precision));
    }
    if let Some(curve) = &r.curve {
        let _ = writeln!(out, "{:>5} {:>9} {:>8}", "tau", "precision", "coverage");
        for p in curve {
            let _ = writeln!(out, "{:>5.2} {:>9} {:>8.4}", p.tau, pct(p.precision), p.coverage);
        }
    }
    if let Some(c) = &r.calibration {
        let note = if c.unattainable { " (target unattainable)" } else { "" };
        let _ = writeln!(out, "calibrated tau {} for precision {}{note}", c.tau, c.target_precision);
    }
    emit(&out);
}

fn cmd_eval(args: EvalArgs) -> Outcome {
    let corpus = load_corpus(&args.corpus)?;
    let data = DataDir::new(&args.state.data_dir);
    let global = open_global(&data)?;
    let tenant = open_tenant(&data, &global, args.state.tenant.as_deref())?;
    let config = args.config.resolve(&global.config)?;
    let options = EvalOptions { sweep_tau: args.sweep_tau, target_precision: args.target_precision };
    let (report, responses) = evaluate(&corpus, &global, &tenant, &config, &options).map_err(|e| match e {
        EvalError::State(_) => state(e),
        e => input(e),
    })?;
    if let Some(path) = &args.predictions_out {
        let lines: String = responses
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializes") + "\n")
            .collect();
        std::fs::write(path, lines).with_context(|| path.display().to_string()).map_err(input)?;
    }
    match args.format {
        Format::Json => print_json(&report),
        Format::Table => print_report_table(&report),
    }
    Ok(())
}

#[derive(Serialize)]
struct ReplaySummary {
    events: usize,
    applied: usize,
    duplicates: usize,
    retrained: bool,
    state: TenantSummary,
}

fn cmd_replay(args: ReplayArgs) -> Outcome {
    if !args.log.is_file() {
        return Err(input(anyhow!("{}: no such file", args.log.display())));
    }
    let (events, torn) = read_log(&args.log).map_err(input)?;
    if torn {
        return Err(input(anyhow!("{}: last line is incomplete", args.log.display())));
    }
    let data = DataDir::new(&args.data_dir);
    let global = open_global(&data)?;
    let tenant_id = args
        .tenant
        .or_else(|| events.first().map(|e| e.tenant_id.clone()))
        .unwrap_or_else(|| "default".into());
    if let Some((i, e)) = events.iter().enumerate().find(|(_, e)| e.tenant_id != tenant_id) {
        return Err(input(anyhow!("event {} (line {}) belongs to tenant `{}`", e.event_id, i + 1, e.tenant_id)));
    }
    let tables = TableDir::new(&data.tenant_dir(&tenant_id).map_err(input)?);
    let (tenant, results) =
        replay_events(&global, TenantModel::new(&tenant_id), &events, |id| tables.load(id)).map_err(input)?;
    if let Some(path) = &args.snapshot_out {
        let bytes = coltype_core::store::snapshot_bytes(&tenant, &global);
        std::fs::write(path, bytes).with_context(|| path.display().to_string()).map_err(input)?;
    }
    let duplicates = results.iter().filter(|r| r.duplicate).count();
    print_json(&ReplaySummary {
        events: events.len(),
        applied: results.len() - duplicates,
        duplicates,
        retrained: results.iter().any(|r| !r.duplicate && r.report.retrained),
        state: summarize(&global, &tenant).map_err(state)?,
    });
    Ok(())
}

fn cmd_calibrate(args: CalibrateArgs) -> Outcome {
    let corpus = load_corpus(&args.corpus)?;
    let data = DataDir::new(&args.state.data_dir);
    let mut global = open_global(&data)?;
    let tenant = open_tenant(&data, &global, args.state.tenant.as_deref())?;
    let config = args.config.resolve(&global.config)?;
    let ontology = tenant.effective_ontology(&global).map_err(state)?;
    let st = model_state(&global, &tenant, &ontology);
    let cal = calibrate_tau(corpus.iter().map(|t| (&t.table, &t.labels)), &st, &config, args.target_precision)
        .map_err(input)?;
    if args.write {
        global.config.abstain_threshold = cal.tau;
        save_global_params(&data, &global).map_err(state)?;
    }
    print_json(&cal);
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Init(a) => cmd_init(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Calibrate(a) => cmd_calibrate(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

//! `atf` — build surrogate banks, serve or probe the scoring service, and
//! run evasion campaigns against it.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 budget
//! exhausted before the work finished, 4 oracle unreachable.

use atf_campaign::backend::{Backend, BackendError};
use atf_campaign::config::CampaignConfig;
use atf_campaign::probe::{probe_sensitivity, Distortion, ProbeError};
use atf_campaign::report::{render_csvs, AttackReport};
use atf_campaign::runner::{run_campaign_with, CampaignError, RunOptions};
use atf_core::api::OracleClient;
use atf_core::attack::AttackStatus;
use atf_core::zoo::{bank_specs, build_bank, save_bank, save_model, synth_dataset, train};
use atf_oracle::{http, OraclePolicy, OracleService};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "atf",
    version,
    about = "Query-efficient evasion campaigns against a black-box scoring service"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Surrogate model bank
    Bank {
        #[command(subcommand)]
        command: BankCommand,
    },
    /// The simulated scoring service
    Oracle {
        #[command(subcommand)]
        command: OracleCommand,
    },
    /// Measure service sensitivity to standard distortions
    Probe(ProbeArgs),
    /// Attack one sample with one family
    Attack(AttackArgs),
    /// Campaign orchestration
    Campaign {
        #[command(subcommand)]
        command: CampaignCommand,
    },
    /// Work with stored reports
    Report {
        #[command(subcommand)]
        command: ReportCommand,
    },
}

#[derive(Subcommand)]
enum BankCommand {
    /// Train all five standard members and save them
    Build(BankArgs),
    /// Train a single member architecture
    Train(BankTrainArgs),
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Run the HTTP service until killed
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum CampaignCommand {
    /// Execute the configured campaign and write the report
    Run(CommonArgs),
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Render a report's CSV tables
    Render(RenderArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Campaign config file; omitted means built-in defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the crafting seed from the config
    #[arg(long)]
    seed: Option<u64>,
    /// Base URL of a running service, e.g. http://127.0.0.1:7878
    #[arg(long, conflicts_with = "in_process")]
    oracle_url: Option<String>,
    /// Build the service inside this process
    #[arg(long)]
    in_process: bool,
    /// Output directory
    #[arg(long, default_value = "atf-out")]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// How many clean samples to probe
    #[arg(long, default_value_t = 8)]
    samples: usize,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset index of the sample to attack
    #[arg(long)]
    sample: usize,
    /// Attack family to run
    #[arg(long, default_value = "atf")]
    family: String,
}

#[derive(Args)]
struct BankArgs {
    /// Campaign config supplying the [bank] section
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override bank.train_seed
    #[arg(long)]
    seed: Option<u64>,
    /// Directory the members are written into
    #[arg(long, default_value = "atf-out")]
    out: PathBuf,
}

#[derive(Args)]
struct BankTrainArgs {
    #[command(flatten)]
    bank: BankArgs,
    /// Architecture to train (dense, conv-small, conv-deep, conv-hybrid, conv-valid)
    #[arg(long)]
    member: String,
}

#[derive(Args)]
struct ServeArgs {
    /// Service policy file; omitted means defaults
    #[arg(long, visible_alias = "policy")]
    config: Option<PathBuf>,
    /// Override the policy's bind address, e.g. 127.0.0.1:0
    #[arg(long)]
    bind: Option<String>,
}

#[derive(Args)]
struct RenderArgs {
    /// Report JSON produced by `campaign run` or `attack`
    json: PathBuf,
    /// Output directory for the CSV tables
    #[arg(long, default_value = "atf-out")]
    out: PathBuf,
}

/// Exit code plus the message printed to stderr.
type Fail = (i32, String);

fn config_fail(e: impl std::fmt::Display) -> Fail {
    (2, e.to_string())
}

fn map_campaign(e: CampaignError) -> Fail {
    (if e.is_unreachable() { 4 } else { 2 }, e.to_string())
}

fn map_backend(e: BackendError) -> Fail {
    (if e.is_unreachable() { 4 } else { 2 }, e.to_string())
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err((code, message)) => {
            eprintln!("error: {message}");
            code
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Result<i32, Fail> {
    match cli.command {
        Command::Bank {
            command: BankCommand::Build(args),
        } => bank_build(args),
        Command::Bank {
            command: BankCommand::Train(args),
        } => bank_train(args),
        Command::Oracle {
            command: OracleCommand::Serve(args),
        } => oracle_serve(args),
        Command::Probe(args) => probe(args),
        Command::Attack(args) => attack(args),
        Command::Campaign {
            command: CampaignCommand::Run(args),
        } => campaign_run(args),
        Command::Report {
            command: ReportCommand::Render(args),
        } => report_render(args),
    }
}

/// Loads the campaign config and applies the shared command-line overrides.
fn load_config(common: &CommonArgs) -> Result<CampaignConfig, Fail> {
    let mut cfg = match &common.config {
        Some(path) => CampaignConfig::load(path).map_err(config_fail)?,
        None => CampaignConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.attacks.seed = seed;
    }
    if let Some(url) = &common.oracle_url {
        cfg.oracle.mode = "http".into();
        cfg.oracle.url = url.clone();
    } else if common.in_process {
        cfg.oracle.mode = "in-process".into();
        cfg.oracle.url = String::new();
    }
    cfg.validate().map_err(config_fail)?;
    Ok(cfg)
}

fn ensure_out(dir: &Path) -> Result<(), Fail> {
    std::fs::create_dir_all(dir).map_err(|e| config_fail(format!("cannot create {}: {e}", dir.display())))
}

fn bank_config(args: &BankArgs) -> Result<CampaignConfig, Fail> {
    let mut cfg = match &args.config {
        Some(path) => CampaignConfig::load(path).map_err(config_fail)?,
        None => CampaignConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.bank.train_seed = seed;
    }
    Ok(cfg)
}

fn bank_build(args: BankArgs) -> Result<i32, Fail> {
    let cfg = bank_config(&args)?;
    ensure_out(&args.out)?;
    let data = synth_dataset(cfg.bank.data_seed, cfg.bank.per_class);
    let (bank, reports) = build_bank(&data, cfg.bank.train_seed, cfg.bank.epochs)
        .map_err(config_fail)?;
    save_bank(&bank, &args.out).map_err(config_fail)?;
    for (member, report) in bank.members.iter().zip(&reports) {
        println!(
            "{}: held-out accuracy {:.3}, final loss {:.4}",
            member.id, report.held_out_accuracy, report.final_loss
        );
    }
    println!("bank: {} members -> {}", bank.members.len(), args.out.display());
    Ok(0)
}

fn bank_train(args: BankTrainArgs) -> Result<i32, Fail> {
    let cfg = bank_config(&args.bank)?;
    let spec = bank_specs()
        .into_iter()
        .find(|s| s.kind.name() == args.member)
        .ok_or_else(|| {
            let known: Vec<&str> = bank_specs().iter().map(|s| s.kind.name()).collect();
            config_fail(format!(
                "unknown member {:?}; known architectures: {}",
                args.member,
                known.join(", ")
            ))
        })?;
    ensure_out(&args.bank.out)?;
    let data = synth_dataset(cfg.bank.data_seed, cfg.bank.per_class);
    let seed = cfg.bank.train_seed + spec.seed_offset;
    let (model, report) = train(&spec, &data, cfg.bank.epochs, seed).map_err(config_fail)?;
    let path = args.bank.out.join(format!("{}.atfm", model.id));
    save_model(&model, &path).map_err(config_fail)?;
    println!(
        "{}: held-out accuracy {:.3}, final loss {:.4} -> {}",
        model.id,
        report.held_out_accuracy,
        report.final_loss,
        path.display()
    );
    Ok(0)
}

fn oracle_serve(args: ServeArgs) -> Result<i32, Fail> {
    let mut policy = match &args.config {
        Some(path) => OraclePolicy::load(path).map_err(config_fail)?,
        None => OraclePolicy::default(),
    };
    if let Some(bind) = args.bind {
        policy.bind = bind;
    }
    policy.validate().map_err(config_fail)?;
    eprintln!("training hidden classifier...");
    let service = OracleService::build(policy).map_err(config_fail)?;
    http::serve_blocking(service).map_err(config_fail)?;
    Ok(0)
}

fn probe(args: ProbeArgs) -> Result<i32, Fail> {
    let cfg = load_config(&args.common)?;
    ensure_out(&args.common.out)?;
    let backend = Backend::from_config(&cfg.oracle).map_err(map_backend)?;
    let threshold = backend
        .threshold_percent()
        .unwrap_or(cfg.oracle.threshold_percent);
    let session = backend.open_session().map_err(map_backend)?;
    let client = OracleClient::new(session.api(), cfg.threat.query_budget);

    let dataset = synth_dataset(cfg.dataset.seed, cfg.dataset.per_class);
    let samples: Vec<_> = dataset
        .samples
        .iter()
        .take(args.samples)
        .map(|s| s.image.clone())
        .collect();
    let report = probe_sensitivity(
        &client,
        &samples,
        &Distortion::standard(),
        threshold,
        cfg.attacks.seed,
    )
    .map_err(|e| match e {
        ProbeError::BudgetTooSmall { .. } | ProbeError::Budget(_) => (3, e.to_string()),
        other => config_fail(other),
    })?;
    session.retire();

    println!(
        "probed {} samples against {}: {} queries",
        report.samples_probed,
        backend.describe(),
        report.queries_spent
    );
    println!(
        "{:<16} {:>10} {:>10} {:>9} {:>7} {:>7}",
        "distortion", "mean rmsd", "mean drop", "evasion", "errors", "alerts"
    );
    for row in &report.rows {
        println!(
            "{:<16} {:>10.2} {:>10.2} {:>8.0}% {:>7} {:>7}",
            row.distortion,
            row.mean_rmsd,
            row.mean_top_drop,
            row.evasion_rate * 100.0,
            row.errors,
            row.alerts
        );
    }
    let path = args.common.out.join("probe.json");
    let mut text = serde_json::to_string_pretty(&report).expect("probe report serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(config_fail)?;
    println!("probe report: {}", path.display());
    Ok(0)
}

fn attack(args: AttackArgs) -> Result<i32, Fail> {
    let cfg = load_config(&args.common)?;
    ensure_out(&args.common.out)?;
    let report = run_campaign_with(
        &cfg,
        RunOptions {
            sample_indices: Some(vec![args.sample]),
            only_family: Some(args.family.clone()),
        },
    )
    .map_err(map_campaign)?;
    let path = args.common.out.join("attack.json");
    report.write_json(&path).map_err(config_fail)?;
    let row = &report.samples[0];
    let status = serde_json::to_value(row.status).expect("status serializes");
    println!(
        "sample {} ({}) vs {}: {} in {} queries, rmsd {:.2}, alerts {}",
        row.sample_index,
        row.true_category,
        args.family,
        status.as_str().unwrap_or("unknown"),
        row.queries,
        row.rmsd,
        row.alerts
    );
    println!("attack report: {}", path.display());
    Ok(match row.status {
        AttackStatus::BudgetExhausted => 3,
        _ => 0,
    })
}

fn campaign_run(args: CommonArgs) -> Result<i32, Fail> {
    let cfg = load_config(&args)?;
    ensure_out(&args.out)?;
    let report = run_campaign_with(&cfg, RunOptions::default()).map_err(map_campaign)?;

    println!(
        "oracle {} | {} samples planned | budget {}/attempt",
        report.campaign.oracle, report.campaign.samples_planned, report.campaign.query_budget
    );
    for ranked in report.plan.iter().filter(|r| r.excluded) {
        println!(
            "excluded {}: {}",
            ranked.family,
            ranked.reasons.join("; ")
        );
    }
    for (family, summary) in &report.families {
        let a = &summary.aggregate;
        println!(
            "{family}: {}/{} evaded, mean {:.1} queries, mean rmsd {:.2}, alerts {}",
            a.successes, a.attempts, a.mean_queries, a.mean_rmsd, a.total_alerts
        );
    }
    if let Some(p) = &report.persistence {
        println!(
            "persistence: {}/{} evasions survive model v{} (consistency {:.2})",
            p.still_evading, p.evaders_before, p.model_version, p.clean_consistency
        );
    }

    let json_path = args.out.join("report.json");
    report.write_json(&json_path).map_err(config_fail)?;
    let csvs = render_csvs(&report, &args.out).map_err(config_fail)?;
    println!("report: {}", json_path.display());
    println!(
        "csv: {}",
        csvs.iter()
            .filter_map(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join(" ")
    );
    if report.complete {
        Ok(0)
    } else {
        eprintln!("campaign budget exhausted before all samples ran; report is partial");
        Ok(3)
    }
}

fn report_render(args: RenderArgs) -> Result<i32, Fail> {
    let text = std::fs::read_to_string(&args.json)
        .map_err(|e| config_fail(format!("cannot read {}: {e}", args.json.display())))?;
    let report = AttackReport::from_json(&text)
        .map_err(|e| config_fail(format!("{} is not a campaign report: {e}", args.json.display())))?;
    ensure_out(&args.out)?;
    let csvs = render_csvs(&report, &args.out).map_err(config_fail)?;
    for path in &csvs {
        println!("{}", path.display());
    }
    Ok(0)
}

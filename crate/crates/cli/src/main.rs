use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use civicsim_core::aggregation::parse_grid;
use civicsim_core::analytics::{self, AnalysisConfig, GroupBy, Reference};
use civicsim_core::corpus::{self, GenerationConfig};
use civicsim_core::providers::{Provider, ProviderHandle, ResponseCache};
use civicsim_core::report::{self, ReportFormat};
use civicsim_core::runner::{self, LoadedPlan, RunPlan, PLAN_FILE, RECORDS_FILE};

#[derive(Parser)]
#[command(name = "civicsim", version, about = "Delegate vs trustee vote simulation with language-model voters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect the policy corpus and profile set.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Synthesize voter profiles.
    #[command(subcommand)]
    Profiles(ProfilesCommand),
    /// Execute or resume a run.
    Run(RunArgs),
    /// Compute agreement metrics for a run.
    Analyze(AnalyzeArgs),
    /// Render tables and charts from an analysis directory.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Validate policies and profiles; the shipped data is used when a path is omitted.
    Validate {
        #[arg(long)]
        policies: Option<PathBuf>,
        #[arg(long)]
        profiles: Option<PathBuf>,
    },
    /// Print category counts of one demographic field.
    Histogram {
        #[arg(long)]
        field: String,
        #[arg(long)]
        profiles: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ProfilesCommand {
    Generate {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Provider handle as JSON.
        #[arg(long)]
        provider: PathBuf,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Extra rounds allowed for replacing dropped records.
        #[arg(long, default_value_t = 2)]
        retry_budget: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, conflicts_with = "resume", required_unless_present = "resume")]
    plan: Option<PathBuf>,
    /// Run id to continue.
    #[arg(long)]
    resume: Option<String>,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run id under --runs-dir, or a run directory.
    #[arg(long)]
    run: String,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    #[arg(long, default_value = "default")]
    reference: Reference,
    /// policy, pair or group:<field>
    #[arg(long, default_value = "policy")]
    by: GroupBy,
    #[arg(long, default_value = "0:1:0.1")]
    lambda_grid: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    analysis: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "md")]
    format: ReportFormat,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Corpus(CorpusCommand::Validate { policies, profiles }) => validate(policies, profiles),
        Command::Corpus(CorpusCommand::Histogram { field, profiles }) => {
            let profiles = load_profiles(profiles.as_deref())?;
            for (category, n) in corpus::demographic_histogram(&profiles, &field)? {
                println!("{category}\t{n}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Profiles(ProfilesCommand::Generate { count, out, provider, cache_dir, retry_budget }) => {
            let text = fs::read_to_string(&provider).with_context(|| format!("reading {}", provider.display()))?;
            let mut handle: ProviderHandle =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", provider.display()))?;
            if let (Some(script), Some(dir)) = (&mut handle.mock_script, provider.parent()) {
                if script.is_relative() {
                    *script = dir.join(&*script);
                }
            }
            let cache = cache_dir.map(ResponseCache::open).transpose()?;
            let provider = Provider::from_handle(handle, cache)?;
            let config = GenerationConfig { retry_budget, ..Default::default() };
            let generated =
                match corpus::generate_profiles(count, &provider, &corpus::default_demographics_spec(), &config) {
                    Ok(g) => g,
                    Err(e) => {
                        corpus::save_profiles(&out, &e.partial.profiles)?;
                        return Err(e).context(format!("partial results saved to {}", out.display()));
                    }
                };
            for w in &generated.warnings {
                log::warn!("{w}");
            }
            corpus::save_profiles(&out, &generated.profiles)?;
            println!("wrote {} profile(s) to {}", generated.profiles.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Run(args) => {
            let manifest = match (args.plan, args.resume) {
                (Some(path), _) => runner::execute(RunPlan::from_file(&path)?)?,
                (None, Some(id)) => runner::resume(&args.runs_dir, &id)?,
                (None, None) => bail!("either --plan or --resume is required"),
            };
            let c = manifest.counts;
            println!(
                "run {}: planned {}, completed {}, parse_failed {}, provider_failed {}{}",
                manifest.plan.run_id,
                c.planned,
                c.completed,
                c.parse_failed,
                c.provider_failed,
                if manifest.complete { "" } else { " (incomplete)" }
            );
            Ok(if manifest.complete { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Analyze(args) => analyze(args),
        Command::Report(args) => {
            for path in report::render_analysis(&args.analysis, &args.out, args.format)? {
                println!("{}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_profiles(path: Option<&Path>) -> Result<Vec<civicsim_core::VoterProfile>> {
    Ok(match path {
        Some(p) => corpus::load_profiles(p)?,
        None => corpus::shipped_profiles(),
    })
}

fn validate(policies: Option<PathBuf>, profiles: Option<PathBuf>) -> Result<ExitCode> {
    let policy_list = match &policies {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => corpus::shipped_policies(),
    };
    let report = corpus::validate_corpus(&policy_list);
    for issue in &report.errors {
        println!("error\t{}\t{}\t{}", issue.entity_id, issue.rule, issue.message);
    }
    for issue in &report.warnings {
        println!("warning\t{}\t{}\t{}", issue.entity_id, issue.rule, issue.message);
    }
    let profile_list = load_profiles(profiles.as_deref())?;
    println!(
        "{} policies, {} profiles: {} error(s), {} warning(s)",
        policy_list.len(),
        profile_list.len(),
        report.errors.len(),
        report.warnings.len()
    );
    Ok(if report.is_accepted() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn analyze(args: AnalyzeArgs) -> Result<ExitCode> {
    let given = PathBuf::from(&args.run);
    let run_dir = if given.join(RECORDS_FILE).exists() { given } else { args.runs_dir.join(&args.run) };
    let plan = RunPlan::from_file(&run_dir.join(PLAN_FILE))
        .with_context(|| format!("no run found at {}", run_dir.display()))?;
    let loaded = LoadedPlan::load(plan)?;
    let records = runner::load_records(&run_dir)?;
    let config = AnalysisConfig { reference: args.reference, by: args.by, grid: parse_grid(&args.lambda_grid)? };
    let analysis = analytics::analyze(&records, &loaded.policies, &loaded.profiles, &config)?;
    for path in report::write_analysis(&args.out, &analysis, args.by)? {
        println!("{}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

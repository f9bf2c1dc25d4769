use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vidground_core::backend::{BackendProfile, MockRuleSet, Role};
use vidground_core::frame_plan::BudgetPolicy;
use vidground_core::manifest::validate_manifest;
use vidground_core::pipeline::{run_topic, BackendSpec, BackendSpecs, RunConfig, RunSummary, Stage};
use vidground_core::{ConsolidationMode, Error};

const EXIT_VALIDATION: u8 = 2;
const EXIT_BACKEND: u8 = 3;
const EXIT_DEPENDENCY: u8 = 4;

#[derive(Parser)]
#[command(name = "vidground", version, about = "Grounded, cited claims from multi-video topics")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a manifest and list every problem found.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Build per-video timelines from detection, OCR and ASR files.
    Ingest(StageArgs),
    /// Select query-relevant timeline moments and write grounding summaries.
    Localize(StageArgs),
    /// Choose the frames each video contributes to generation.
    Plan(StageArgs),
    /// Generate cited claims per video.
    Generate(StageArgs),
    /// Merge claims across videos.
    Consolidate(StageArgs),
    /// Score consolidated claims against the gold file.
    Evaluate(StageArgs),
    /// Run every stage.
    Run(StageArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Agg {
    EmbedSim,
    Llm,
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "runs")]
    run_dir: PathBuf,
    /// Timeline records per localizer window.
    #[arg(long, default_value_t = 30)]
    window_size: usize,
    /// Detections below this confidence are left out of serialized timelines.
    #[arg(long, default_value_t = 0.30)]
    emit_threshold: f64,
    #[arg(long, default_value_t = 100)]
    n_uniform: usize,
    #[arg(long, default_value_t = 30)]
    k_max: usize,
    #[arg(long, default_value_t = 256)]
    per_frame_tokens: u64,
    #[arg(long, default_value_t = 32768)]
    context_limit: u64,
    /// Tokens kept free for the text part of the generation prompt.
    #[arg(long, default_value_t = 4096)]
    text_reserve: u64,
    /// Cosine threshold for claim clustering.
    #[arg(long, default_value_t = 0.85)]
    tau: f64,
    #[arg(long, value_enum, default_value = "embed-sim")]
    agg: Agg,
    /// `mock`, `mock:<rules.json>` or an OpenAI-compatible base URL.
    #[arg(long, env = "VIDGROUND_TEXT_CHAT_URL", default_value = "mock")]
    backend_text_chat: String,
    #[arg(long, env = "VIDGROUND_VISION_CHAT_URL", default_value = "mock")]
    backend_vision_chat: String,
    #[arg(long, env = "VIDGROUND_EMBED_URL", default_value = "mock")]
    backend_embed: String,
    #[arg(long, env = "VIDGROUND_ENTAIL_URL", default_value = "mock")]
    backend_entail: String,
    #[arg(long, default_value_t = 4)]
    jobs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2048)]
    max_output_tokens: u32,
    /// Also run upstream stages whose artifacts are missing.
    #[arg(long)]
    resume: bool,
    /// Gold claims file; overrides the manifest's gold_path.
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Print the metric table after evaluation.
    #[arg(long)]
    table: bool,
    /// Write the run summary as JSON to this path.
    #[arg(long)]
    summary_json: Option<PathBuf>,
}

fn role_env(role: Role, suffix: &str) -> Option<String> {
    std::env::var(format!("VIDGROUND_{}_{suffix}", role.as_str().to_uppercase()))
        .ok()
        .filter(|v| !v.is_empty())
}

fn backend_spec(role: Role, value: &str) -> Result<BackendSpec> {
    if value == "mock" {
        return Ok(BackendSpec::mock(role, MockRuleSet::default()));
    }
    if let Some(path) = value.strip_prefix("mock:") {
        let rules = MockRuleSet::load(Path::new(path))
            .with_context(|| format!("loading mock rules for {role} from {path}"))?;
        return Ok(BackendSpec::mock(role, rules));
    }
    let model = role_env(role, "MODEL").unwrap_or_else(|| "default".to_string());
    let mut profile = BackendProfile::new(role, value, model);
    profile.api_key = role_env(role, "API_KEY");
    Ok(BackendSpec {
        profile,
        mock_rules: None,
    })
}

impl StageArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::new(&self.manifest, &self.run_dir);
        cfg.window_size = self.window_size;
        cfg.emit_threshold = self.emit_threshold;
        cfg.policy = BudgetPolicy {
            n_uniform: self.n_uniform,
            k_max_keyframes: self.k_max,
            per_frame_tokens: self.per_frame_tokens,
            context_limit: self.context_limit,
            text_reserve_tokens: self.text_reserve,
        };
        cfg.tau = self.tau;
        cfg.agg = match self.agg {
            Agg::EmbedSim => ConsolidationMode::EmbedSim,
            Agg::Llm => ConsolidationMode::Llm,
        };
        cfg.backends = BackendSpecs {
            text_chat: backend_spec(Role::TextChat, &self.backend_text_chat)?,
            vision_chat: backend_spec(Role::VisionChat, &self.backend_vision_chat)?,
            embed: backend_spec(Role::Embed, &self.backend_embed)?,
            entail: backend_spec(Role::Entail, &self.backend_entail)?,
        };
        // The vision model's window bounds the prompt the planner budgets for.
        cfg.backends.vision_chat.profile.context_limit_tokens = self.context_limit;
        cfg.jobs = self.jobs;
        cfg.seed = self.seed;
        cfg.max_output_tokens = self.max_output_tokens;
        cfg.resume = self.resume;
        cfg.gold_path = self.gold.clone();
        Ok(cfg)
    }
}

fn run_stages(args: &StageArgs, stages: &[Stage]) -> Result<()> {
    let cfg = args.config()?;
    let summary: RunSummary = run_topic(&cfg, stages)?;
    print!("{}", summary.render());
    if args.table {
        if let Some(r) = &summary.report {
            println!();
            print!("{}", r.render_table("pipeline"));
        }
    }
    if let Some(path) = &args.summary_json {
        let json = serde_json::to_string_pretty(&summary)?;
        std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Validation(_)) => EXIT_VALIDATION,
        Some(e) if e.is_backend_exhaustion() => EXIT_BACKEND,
        Some(Error::Dependency { .. }) => EXIT_DEPENDENCY,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();

    let result = match &cli.command {
        Command::Validate { manifest } => match validate_manifest(manifest) {
            Ok(report) if report.is_valid() => {
                println!("{}: ok", manifest.display());
                Ok(())
            }
            Ok(report) => {
                for v in &report.violations {
                    println!("{v}");
                }
                return ExitCode::from(EXIT_VALIDATION);
            }
            Err(e) => Err(e.into()),
        },
        Command::Ingest(a) => run_stages(a, &[Stage::Ingest]),
        Command::Localize(a) => run_stages(a, &[Stage::Localize]),
        Command::Plan(a) => run_stages(a, &[Stage::Plan]),
        Command::Generate(a) => run_stages(a, &[Stage::Generate]),
        Command::Consolidate(a) => run_stages(a, &[Stage::Consolidate]),
        Command::Evaluate(a) => run_stages(a, &[Stage::Evaluate]),
        Command::Run(a) => run_stages(a, &Stage::ALL),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

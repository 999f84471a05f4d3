use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;

use scenecraft::analysis::{decompose_rule_based, fallback_analysis};
use scenecraft::engine::suite::{run_suite, SuiteOptions};
use scenecraft::engine::{DecomposeMode, Engine, EngineConfig, Feedback, SessionFilter, SessionOptions};
use scenecraft::eval::parse_prompt_file;
use scenecraft::layout::{plan_layout, validate, SceneLayout};
use scenecraft::policy::{Phase, PlanningMode};
use scenecraft::tools::MockTools;
use scenecraft::{Error, Result};

#[derive(Parser)]
#[command(name = "scenecraft", version, about = "Layout-guided multi-step image generation")]
struct Cli {
    /// TOML configuration file; SCENECRAFT_* variables override it.
    #[arg(long, global = true, env = "SCENECRAFT_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one prompt to completion and export its artifacts.
    Run {
        prompt: String,
        #[arg(long)]
        decompose: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Export directory for the finished session.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the session REST API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Evaluate a prompt suite and write report.json and report.csv.
    Eval {
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Planning mode: agent, customization_only, layout_only or text_only.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        inject_faults: bool,
        #[arg(long)]
        no_self_correction: bool,
    },
    #[command(subcommand)]
    Layout(LayoutCommand),
    /// Serve the mock tool suite over the tool wire protocol.
    MockTools {
        #[arg(long, default_value = "127.0.0.1:8090")]
        addr: SocketAddr,
    },
    #[command(subcommand)]
    Session(SessionCommand),
}

#[derive(Subcommand)]
enum LayoutCommand {
    /// Plan a layout for a prompt with the rule grammar and print it.
    Plan {
        prompt: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a layout file; exits 1 when it has violations.
    Validate {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Subcommand)]
enum SessionCommand {
    List {
        #[arg(long)]
        phase: Option<String>,
        #[arg(long)]
        awaiting_feedback: bool,
    },
    Show {
        id: String,
    },
    Advance {
        id: String,
        /// Run a single transition.
        #[arg(long)]
        one: bool,
    },
    /// Submit feedback read from a JSON file ("-" for stdin).
    Feedback {
        id: String,
        #[arg(long)]
        file: PathBuf,
    },
    Export {
        id: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<EngineConfig> {
    let mut cfg = match path {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    };
    cfg.apply_env(std::env::vars())?;
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Codec(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn parse_mode(s: &str) -> Result<PlanningMode> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| Error::InvalidInput(format!("unknown planning mode {s:?}")))
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(Error::from)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Run { prompt, decompose, seed, out } => {
            let decompose = decompose
                .map(|d| DecomposeMode::parse(&d).ok_or_else(|| Error::InvalidInput(format!("unknown decompose mode {d:?}"))))
                .transpose()?;
            let engine = Engine::new(cfg)?;
            let s = engine.create_session(&prompt, &SessionOptions { seed, decompose, ..Default::default() })?;
            let s = engine.advance(&s.id)?;
            if let Some(dir) = out {
                engine.export_artifacts(&s.id, &dir)?;
            }
            print_json(&s.summary())?;
            Ok(if s.phase() == Phase::Done { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Serve { addr } => {
            let engine = Arc::new(Engine::new(cfg)?);
            runtime()?.block_on(scenecraft_cli::serve(scenecraft_cli::api::router(engine), addr))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::MockTools { addr } => {
            let mock = MockTools { faults: cfg.faults()?, lexicon: cfg.load_lexicon()?, layout_config: cfg.layout };
            runtime()?.block_on(scenecraft_cli::serve(scenecraft_cli::mock_server::router(mock), addr))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { prompts, out, mode, inject_faults, no_self_correction } => {
            let text = std::fs::read_to_string(&prompts)
                .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", prompts.display())))?;
            let list = parse_prompt_file(&text)?;
            let opts = SuiteOptions {
                planning_mode: mode.as_deref().map(parse_mode).transpose()?,
                self_correction: no_self_correction.then_some(false),
                inject_color_fault: inject_faults,
            };
            let engine = Engine::new(cfg)?;
            let report = run_suite(&engine, &list, &opts, Some(&out))?;
            println!(
                "prompts={} failed={} AP={:.3} AP50={:.3} AP75={:.3} attribute={:.3} relation={:.3}",
                report.prompts,
                report.failed,
                report.ap,
                report.ap50,
                report.ap75,
                report.attribute_accuracy,
                report.relation_accuracy
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Layout(LayoutCommand::Plan { prompt, seed }) => {
            let lexicon = cfg.load_lexicon()?;
            let analysis = decompose_rule_based(&prompt, &lexicon).unwrap_or_else(|_| fallback_analysis(&prompt));
            let layout = plan_layout(&analysis, cfg.canvas, &cfg.layout, seed.unwrap_or(cfg.seed))?;
            print!("{}", layout.to_text());
            Ok(ExitCode::SUCCESS)
        }
        Command::Layout(LayoutCommand::Validate { input }) => {
            let text = std::fs::read_to_string(&input)
                .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", input.display())))?;
            let report = validate(&SceneLayout::from_text(&text)?, &cfg.layout);
            print_json(&report)?;
            Ok(if report.is_clean() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Session(cmd) => {
            let engine = Engine::new(cfg)?;
            match cmd {
                SessionCommand::List { phase, awaiting_feedback } => {
                    let phase = phase
                        .map(|p| Phase::from_name(&p).ok_or_else(|| Error::InvalidInput(format!("unknown phase {p:?}"))))
                        .transpose()?;
                    print_json(&engine.list_sessions(&SessionFilter { phase, awaiting_feedback })?)?;
                }
                SessionCommand::Show { id } => print_json(&engine.get_session(&id)?)?,
                SessionCommand::Advance { id, one } => {
                    let s = if one { engine.advance_one(&id)? } else { engine.advance(&id)? };
                    print_json(&s.summary())?;
                }
                SessionCommand::Feedback { id, file } => {
                    let text = if file.as_os_str() == "-" {
                        std::io::read_to_string(std::io::stdin())?
                    } else {
                        std::fs::read_to_string(&file)?
                    };
                    let feedback: Feedback =
                        serde_json::from_str(&text).map_err(|e| Error::InvalidFeedback(e.to_string()))?;
                    print_json(&engine.submit_feedback(&id, feedback)?.summary())?;
                }
                SessionCommand::Export { id, out } => print_json(&engine.export_artifacts(&id, &out)?)?,
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("SCENECRAFT_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    // clap exits with 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

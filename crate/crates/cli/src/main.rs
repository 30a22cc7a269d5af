mod analyze;
mod commands;
mod error;
mod synth;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};
use tokprune_core::{Criterion, PruneConfig, CONFIG_ENV};

use crate::error::{CliError, CliResult};

/// Visual token pruning for document pages.
///
/// Every command prints one JSON object on stdout. Failures print
/// {"error": {...}} on stderr and exit 1 (computation) or 2 (usage, I/O).
#[derive(Debug, Parser)]
#[command(name = "tokprune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Background pruning of one page image; writes a BTP mask.
    Btp(commands::BtpArgs),
    /// Question-aware pruning from retrieval embeddings; writes a QTP mask.
    Qtp(commands::QtpArgs),
    /// Comprehension-aware pruning decision from a decoder trace manifest.
    Ctp(commands::CtpArgs),
    /// BTP, QTP, their intersection and CTP over one or more pages, plus a FLOPs report.
    Pipeline(commands::PipelineArgs),
    /// Write synthetic fixtures (page, truth labels, traces, embeddings) from a JSON spec.
    Synth(synth::SynthArgs),
    /// Per-layer attention mass and comprehension statistics over a directory of traces.
    Analyze(analyze::AnalyzeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CriterionArg {
    L2Norm,
    Entropy,
    FeatureDelta,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::L2Norm => Criterion::L2Norm,
            CriterionArg::Entropy => Criterion::Entropy,
            CriterionArg::FeatureDelta => Criterion::FeatureDelta,
        }
    }
}

/// Config file plus per-field overrides. Precedence: flag > file > preset.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON config file (partial; unknown keys rejected).
    #[arg(long, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Page-count preset (1, 2 or 4 have tuned values).
    #[arg(long)]
    pub pages: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub tau_e: Option<f64>,
    #[arg(long)]
    pub tau_bg: Option<f64>,
    #[arg(long)]
    pub retrieval_tau_bg: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub tau_qst: Option<f64>,
    #[arg(long, value_enum)]
    pub criterion: Option<CriterionArg>,
    /// Accepts "inf".
    #[arg(long, allow_negative_numbers = true)]
    pub tau_comp: Option<f64>,
    #[arg(long)]
    pub tau_att: Option<f64>,
    #[arg(long)]
    pub block: Option<usize>,
    /// Inclusive layer window, e.g. 15,27.
    #[arg(long, value_parser = parse_window)]
    pub ctp_window: Option<[usize; 2]>,
    /// Text tokens present at every decoder layer (FLOPs model).
    #[arg(long)]
    pub text_tokens: Option<u64>,
}

fn parse_window(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s.split_once(',').ok_or("expected MIN,MAX")?;
    let a = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b = b.trim().parse().map_err(|e| format!("{e}"))?;
    Ok([a, b])
}

pub fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or("expected ROWSxCOLS")?;
    let r: usize = r.trim().parse().map_err(|e| format!("{e}"))?;
    let c: usize = c.trim().parse().map_err(|e| format!("{e}"))?;
    if r == 0 || c == 0 {
        return Err("grid sides must be positive".into());
    }
    Ok((r, c))
}

fn extended(v: f64) -> Value {
    if v.is_infinite() {
        json!(if v > 0.0 { "inf" } else { "-inf" })
    } else {
        json!(v)
    }
}

impl ConfigArgs {
    fn overrides(&self) -> Value {
        let mut m = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("pages", self.pages.map(|v| json!(v)));
        put("patch_size", self.patch_size.map(|v| json!(v)));
        put("tau_e", self.tau_e.map(extended));
        put("tau_bg", self.tau_bg.map(extended));
        put("retrieval_tau_bg", self.retrieval_tau_bg.map(extended));
        put("sigma", self.sigma.map(extended));
        put("tau_qst", self.tau_qst.map(extended));
        put("criterion", self.criterion.map(|c| json!(Criterion::from(c))));
        put("tau_comp", self.tau_comp.map(extended));
        put("tau_att", self.tau_att.map(extended));
        put("block", self.block.map(|v| json!(v)));
        put("ctp_window", self.ctp_window.map(|v| json!(v)));
        put("flops", self.text_tokens.map(|v| json!({ "text_tokens": v })));
        Value::Object(m)
    }

    pub fn resolve(&self) -> CliResult<PruneConfig> {
        self.resolve_for_pages(1)
    }

    pub fn resolve_for_pages(&self, default_pages: usize) -> CliResult<PruneConfig> {
        Ok(PruneConfig::resolve_for_pages(
            self.config.as_deref(),
            &self.overrides(),
            default_pages,
        )?)
    }
}

/// Print one JSON object on stdout.
pub fn emit(value: &impl serde::Serialize) -> CliResult<()> {
    let line = serde_json::to_string(value).map_err(|e| CliError::io(e.to_string()))?;
    println!("{line}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Btp(a) => commands::btp(a),
        Command::Qtp(a) => commands::qtp(a),
        Command::Ctp(a) => commands::ctp(a),
        Command::Pipeline(a) => commands::pipeline(a),
        Command::Synth(a) => synth::run(a),
        Command::Analyze(a) => analyze::run(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first).to_json());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}

//! Command-line front end.
//!
//! Exit codes: 0 ok, 2 validation, 3 provider (including runs where nobody
//! responded), 4 not found, 1 anything else.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use plurality_core::casemodel::ClinicalCase;
use plurality_core::gateway::LiveConfig;
use plurality_core::registry::{CostTier, ModelDescriptor, ModelFilter, Region};
use plurality_core::synthesis::{single_vs_ensemble_view, ChainEntry};

use crate::app::{App, AppError, RunSpec};
use crate::metrics::render_metrics;
use crate::store::{ProviderChoice, RunRecord, RunStatus};

#[derive(Debug, Parser)]
#[command(name = "plurality", version, about = "Multi-model diagnostic ensemble runner")]
pub struct Cli {
    /// Data directory (models, cases, runs). Seeded on first use.
    #[arg(long, env = "PLURALITY_DATA_DIR", default_value = "plurality-data", global = true)]
    pub data_dir: PathBuf,
    /// Base URL of the chat-completion aggregator for live runs.
    #[arg(long, env = "PLURALITY_BASE_URL", global = true)]
    pub base_url: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Inspect or extend the model registry.
    Models {
        #[command(subcommand)]
        action: ModelsCmd,
    },
    /// Inspect or extend the case bundle.
    Cases {
        #[command(subcommand)]
        action: CasesCmd,
    },
    /// Run one case through the ensemble.
    Run(RunArgs),
    /// Run several cases with the same settings, then print batch metrics.
    Batch(BatchArgs),
    /// Aggregate tables over stored runs.
    Metrics {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<String>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Print a stored run's report.
    Report {
        #[arg(long)]
        run: String,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Re-tier a stored run over a subset of its models.
    Restratify {
        #[arg(long)]
        run: String,
        #[arg(long = "model", num_args = 1.., required = true)]
        models: Vec<String>,
    },
    /// Recompute a stored run from its responses and compare.
    Replay {
        #[arg(long)]
        run: String,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum ModelsCmd {
    List {
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Register a descriptor document.
    Add { path: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum CasesCmd {
    List,
    /// Add a case document.
    Add { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Machine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderArg {
    Sim,
    Live,
}

#[derive(Debug, Clone, Args)]
pub struct SelectionArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "region")]
    pub regions: Vec<Region>,
    #[arg(long = "cost-tier")]
    pub cost_tiers: Vec<CostTier>,
    #[arg(long = "model")]
    pub models: Vec<String>,
    #[arg(long, value_enum, default_value_t = ProviderArg::Sim)]
    pub provider: ProviderArg,
    /// Synthesizer models tried in order before the template.
    #[arg(long = "synthesizer")]
    pub synthesizers: Vec<String>,
    #[arg(long, default_value_t = 60_000)]
    pub timeout_ms: u64,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub case: String,
    #[command(flatten)]
    pub select: SelectionArgs,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct BatchArgs {
    /// Case ids; all cases when omitted.
    #[arg(long, num_args = 1..)]
    pub cases: Vec<String>,
    #[command(flatten)]
    pub select: SelectionArgs,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

impl SelectionArgs {
    fn spec(&self, case_id: &str) -> RunSpec {
        let set = |v: &[String]| (!v.is_empty()).then(|| v.iter().cloned().collect::<BTreeSet<_>>());
        let filter = ModelFilter {
            regions: (!self.regions.is_empty()).then(|| self.regions.iter().copied().collect()),
            cost_tiers: (!self.cost_tiers.is_empty()).then(|| self.cost_tiers.iter().copied().collect()),
            ids: set(&self.models),
            ..ModelFilter::default()
        };
        let mut chain: Vec<ChainEntry> = self
            .synthesizers
            .iter()
            .map(|s| ChainEntry {
                synthesizer_ref: s.clone(),
                timeout_ms: self.timeout_ms,
            })
            .collect();
        chain.push(ChainEntry {
            synthesizer_ref: "template".into(),
            timeout_ms: self.timeout_ms,
        });
        RunSpec {
            case_id: case_id.to_string(),
            filter,
            chain: Some(chain),
            seed: self.seed,
            provider: Some(match self.provider {
                ProviderArg::Sim => ProviderChoice::Sim,
                ProviderArg::Live => ProviderChoice::Live,
            }),
            per_model_timeout_ms: Some(self.timeout_ms),
            max_parallel: None,
        }
    }
}

pub fn exit_code(e: &AppError) -> i32 {
    match e {
        AppError::Invalid(_) | AppError::Conflict(_) | AppError::NoModelsSelected => 2,
        AppError::Provider(_) | AppError::NoResponders => 3,
        AppError::CaseNotFound(_) | AppError::RunNotFound(_) => 4,
        AppError::Store(_) | AppError::Internal(_) => 1,
    }
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializes")
}

fn read(path: &PathBuf) -> Result<String, AppError> {
    std::fs::read_to_string(path).map_err(|e| AppError::Invalid(format!("{}: {e}", path.display())))
}

fn run_line(r: &RunRecord) -> String {
    let lead = r
        .differential
        .as_ref()
        .and_then(|d| d.leading().map(|(k, e)| format!("{} [{k}] {}/{}", e.diagnosis.display_label, e.top1_count, d.responding_count)))
        .unwrap_or_else(|| "no responders".into());
    format!("{}\t{}\t{}", r.run_id, r.case_id, lead)
}

fn render_run(r: &RunRecord, format: Format) -> String {
    match format {
        Format::Machine => json(r),
        Format::Text => match &r.report {
            Some(report) => format!("run {}\n\n{}", r.run_id, report.narrative),
            None => format!("run {}: no model returned a usable response\n", r.run_id),
        },
    }
}

/// Runs the command and returns its stdout text.
pub async fn execute(cli: Cli) -> Result<String, AppError> {
    let mut live = LiveConfig::default();
    if let Some(url) = cli.base_url {
        live.base_url = url;
    }
    let app = Arc::new(App::open(&cli.data_dir, live)?);
    match cli.command {
        Command::Models { action: ModelsCmd::List { format } } => {
            let models = app.models();
            Ok(match format {
                Format::Machine => json(&models),
                Format::Text => models
                    .iter()
                    .map(|m| {
                        format!(
                            "{}\t{}\t{}\t{}\n",
                            m.model_id,
                            m.origin_region,
                            m.cost_tier,
                            if m.enabled { "enabled" } else { "disabled" }
                        )
                    })
                    .collect(),
            })
        }
        Command::Models { action: ModelsCmd::Add { path } } => {
            let descriptor = ModelDescriptor::from_document(&read(&path)?).map_err(|e| AppError::Invalid(e.to_string()))?;
            Ok(format!("{}\n", app.add_model(descriptor)?))
        }
        Command::Cases { action: CasesCmd::List } => Ok(app
            .cases()?
            .iter()
            .map(|c| format!("{}\t{}\n", c.case_id, c.title))
            .collect()),
        Command::Cases { action: CasesCmd::Add { path } } => {
            let case = ClinicalCase::from_document(&read(&path)?)?;
            app.add_case(&case)?;
            Ok(format!("{}\n", case.case_id))
        }
        Command::Run(args) => {
            let record = app.run_case(&args.select.spec(&args.case)).await?;
            let out = render_run(&record, args.format);
            if record.status == RunStatus::NoResponders {
                eprint!("{out}");
                return Err(AppError::NoResponders);
            }
            Ok(out)
        }
        Command::Batch(args) => {
            let case_ids: Vec<String> = if args.cases.is_empty() {
                app.cases()?.into_iter().map(|c| c.case_id).collect()
            } else {
                args.cases.clone()
            };
            let mut ids = Vec::new();
            let mut lines = String::new();
            for case_id in &case_ids {
                let record = app.run_case(&args.select.spec(case_id)).await?;
                lines.push_str(&run_line(&record));
                lines.push('\n');
                ids.push(record.run_id);
            }
            let metrics = app.metrics(&ids)?;
            Ok(match args.format {
                Format::Machine => json(&metrics),
                Format::Text => format!("{lines}\n{}", render_metrics(&metrics)),
            })
        }
        Command::Metrics { runs, format } => {
            let metrics = app.metrics(&runs)?;
            Ok(match format {
                Format::Machine => json(&metrics),
                Format::Text => render_metrics(&metrics),
            })
        }
        Command::Report { run, format } => {
            let record = app.run(&run)?;
            let Some(report) = &record.report else {
                return Err(AppError::NoResponders);
            };
            Ok(match format {
                Format::Machine => json(&serde_json::json!({
                    "report": report,
                    "comparison": single_vs_ensemble_view(report),
                })),
                Format::Text => {
                    let view = single_vs_ensemble_view(report);
                    let single = view
                        .single
                        .map(|s| format!("{} {:.2} ({})", s.label, s.confidence, s.model_id))
                        .unwrap_or_else(|| "-".into());
                    format!(
                        "{}\nSINGLE MODEL VIEW: {single}\nENSEMBLE VIEW: {}\n",
                        report.narrative, view.ensemble.summary
                    )
                }
            })
        }
        Command::Restratify { run, models } => {
            let subset: BTreeSet<String> = models.into_iter().collect();
            let analysis = app.restratify(&run, &subset)?;
            Ok(analysis.template_narrative)
        }
        Command::Replay { run } => {
            let check = app.replay(&run)?;
            if !check.ok() {
                return Err(AppError::Internal(format!("replay mismatch: {}", json(&check))));
            }
            Ok(format!("{run}: replay matches stored record\n"))
        }
        Command::Serve { addr } => {
            let listener = tokio::net::TcpListener::bind(&addr)
                .await
                .map_err(|e| AppError::Invalid(format!("cannot bind {addr}: {e}")))?;
            eprintln!("listening on http://{addr}/v1");
            axum::serve(listener, crate::api::router(app))
                .await
                .map_err(|e| AppError::Internal(e.to_string()))?;
            Ok(String::new())
        }
    }
}

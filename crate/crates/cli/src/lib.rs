//! `epiqc` command-line entry points.
//!
//! [`run`] parses arguments, executes one subcommand and returns the process
//! exit code: 0 on success, 1 on operational failure, 2 on usage error.

mod config;
mod fetch;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration as StdDuration;

use chrono::{NaiveDate, Utc};
use clap::{Parser, Subcommand};
use epiqc_core::engine::{Applied, Disposition};
use epiqc_core::gate::{HoldDecision, HoldTicket, TicketState};
use epiqc_core::ingest::load_archives;
use epiqc_core::journal::GateAction;
use epiqc_core::reconciler::DiaryStatus;
use epiqc_core::{Engine, Metric};
use thiserror::Error;

pub use config::{CliConfig, ConfigError};
pub use fetch::EndpointFetcher;

#[derive(Debug, Parser)]
#[command(name = "epiqc", version, about = "Quality-controlled epidemic time series")]
struct Cli {
    /// Configuration file.
    #[arg(long, global = true, default_value = "epiqc.toml")]
    config: PathBuf,
    /// Store directory; overrides the configuration.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// API bearer token for `serve`; overrides configuration and environment.
    #[arg(long, global = true)]
    token: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Poll every due source once, then expire holds and reconcile.
    Ingest,
    /// Run the poll cycle continuously.
    Poll {
        #[arg(long, default_value_t = 60)]
        interval_secs: u64,
        /// Stop after this many cycles.
        #[arg(long)]
        cycles: Option<u64>,
    },
    /// Apply a SNAPSHOT source's dated archives, oldest first, once.
    Backfill {
        source: String,
        /// Directory of `YYYY-MM-DD.<ext>` archives; defaults to the source's archive_dir.
        #[arg(long)]
        archives: Option<PathBuf>,
    },
    /// Run the gate over a payload without committing anything.
    Validate { source: String, payload: PathBuf },
    /// Write the compact table for one metric as CSV.
    ExportCt {
        #[arg(long)]
        metric: Metric,
        /// Comma-separated region ids; defaults to every region with data.
        #[arg(long, value_delimiter = ',')]
        regions: Option<Vec<String>>,
        #[arg(long)]
        from: Option<NaiveDate>,
        #[arg(long)]
        to: Option<NaiveDate>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect and decide hold tickets.
    Holds {
        #[command(subcommand)]
        action: HoldsCommand,
    },
    /// Inspect the inconsistency diary.
    Diary {
        #[command(subcommand)]
        action: DiaryCommand,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Debug, Subcommand)]
enum HoldsCommand {
    List {
        #[arg(long)]
        state: Option<TicketState>,
    },
    Approve {
        id: u64,
        #[arg(long, default_value = "cli")]
        operator: String,
    },
    Reject {
        id: u64,
        #[arg(long, default_value = "cli")]
        operator: String,
    },
}

#[derive(Debug, Subcommand)]
enum DiaryCommand {
    List {
        #[arg(long)]
        status: Option<DiaryStatus>,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] epiqc_core::EngineError),
    #[error(transparent)]
    Store(#[from] epiqc_core::store::StoreError),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("{0}")]
    Failed(String),
}

fn io_err(what: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> CliError {
    let what = what.to_string();
    move |e| CliError::Io(what, e)
}

pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

struct Context {
    config: CliConfig,
    store_dir: PathBuf,
    engine: Engine,
}

impl Context {
    fn load(cli: &Cli) -> Result<Self, CliError> {
        let config = CliConfig::load(&cli.config)?;
        let store_dir = cli.store.clone().unwrap_or_else(|| config.store.clone());
        let engine = config.open_engine(&store_dir)?;
        Ok(Self {
            config,
            store_dir,
            engine,
        })
    }

    fn save(&mut self) -> Result<(), CliError> {
        Ok(self.engine.save(&self.store_dir)?)
    }

    fn fetcher(&self) -> EndpointFetcher {
        EndpointFetcher::new(self.config.base_dir.clone(), StdDuration::from_secs(self.config.fetch_timeout_secs))
    }
}

fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, CliError> {
    let mut ctx = Context::load(&cli)?;
    let w = |e: std::io::Error| CliError::Io("stdout".into(), e);
    match cli.command {
        Command::Ingest => {
            let failed = cycle(&mut ctx, out, err)?;
            Ok(if failed { 1 } else { 0 })
        }
        Command::Poll { interval_secs, cycles } => {
            let mut n = 0;
            loop {
                if let Err(e) = cycle(&mut ctx, out, err) {
                    writeln!(err, "cycle failed: {e}").map_err(w)?;
                }
                n += 1;
                if cycles.is_some_and(|c| n >= c) {
                    return Ok(0);
                }
                std::thread::sleep(StdDuration::from_secs(interval_secs));
            }
        }
        Command::Backfill { source, archives } => {
            let dir = match archives {
                Some(d) => d,
                None => {
                    let d = ctx.engine.source(&source)?.archive_dir.clone().ok_or_else(|| {
                        CliError::Failed(format!("source `{source}` has no archive_dir; pass --archives"))
                    })?;
                    ctx.config.resolve(&d)
                }
            };
            let files = load_archives(&dir).map_err(io_err(dir.display()))?;
            let reports = ctx.engine.backfill(&source, &files, Utc::now())?;
            ctx.save()?;
            for (report, (date, _)) in reports.iter().zip(&files) {
                writeln!(out, "archive {date}: {} observations", report.observations).map_err(w)?;
                for applied in &report.outcomes {
                    writeln!(out, "  {}", applied.summary()).map_err(w)?;
                }
            }
            writeln!(out, "backfilled {source} from {} archives", files.len()).map_err(w)?;
            Ok(0)
        }
        Command::Validate { source, payload } => {
            let raw = std::fs::read(&payload).map_err(io_err(payload.display()))?;
            let before = ctx.engine.state_digest();
            let mut dry = ctx.engine.clone();
            let now = Utc::now();
            let report = dry.ingest_payload(&source, &raw, now, now)?;
            for applied in &report.outcomes {
                writeln!(out, "{}", validate_row(applied)).map_err(w)?;
            }
            for region in &report.unknown_regions {
                writeln!(out, "{region}: unknown region, skipped").map_err(w)?;
            }
            debug_assert_eq!(before, ctx.engine.state_digest());
            writeln!(out, "dry run: {} rows, nothing committed", report.outcomes.len()).map_err(w)?;
            Ok(0)
        }
        Command::ExportCt {
            metric,
            regions,
            from,
            to,
            out: file,
        } => {
            let csv = ctx.engine.store().export_ct(regions.as_deref(), metric, from, to)?;
            match file {
                Some(path) => std::fs::write(&path, csv).map_err(io_err(path.display()))?,
                None => out.write_all(csv.as_bytes()).map_err(w)?,
            }
            Ok(0)
        }
        Command::Holds { action } => {
            let (id, decision, operator) = match action {
                HoldsCommand::List { state } => {
                    for t in ctx.engine.holds().tickets().filter(|t| state.is_none_or(|s| t.state == s)) {
                        writeln!(out, "{}", ticket_row(t)).map_err(w)?;
                    }
                    return Ok(0);
                }
                HoldsCommand::Approve { id, operator } => (id, HoldDecision::Approve, operator),
                HoldsCommand::Reject { id, operator } => (id, HoldDecision::Reject, operator),
            };
            let ticket = ctx.engine.resolve_hold(id, decision, &operator, Utc::now())?;
            ctx.save()?;
            writeln!(out, "{}", ticket_row(&ticket)).map_err(w)?;
            Ok(0)
        }
        Command::Diary {
            action: DiaryCommand::List { status },
        } => {
            for e in ctx.engine.diary().with_status(status) {
                let d = &e.discrepancy;
                writeln!(
                    out,
                    "#{} {:?} {} {} {} parent={} children={} delta={} first_seen={}",
                    e.entry_id, e.status, d.parent_region, d.metric, d.date, d.parent_value, d.children_sum, d.delta, e.first_seen
                )
                .map_err(w)?;
            }
            Ok(0)
        }
        Command::Serve { port } => {
            let mut api = ctx.config.api.clone();
            api.apply_env().map_err(CliError::Failed)?;
            if let Some(p) = port {
                api.port = p;
            }
            if let Some(t) = cli.token {
                api.token = Some(t);
            }
            let state = epiqc_api::AppState::new(ctx.engine, api.token.clone()).with_store_dir(ctx.store_dir);
            let runtime = tokio::runtime::Runtime::new().map_err(io_err("runtime"))?;
            runtime.block_on(epiqc_api::serve(state, &api)).map_err(io_err("serve"))?;
            Ok(0)
        }
    }
}

/// One poll cycle: fetch and ingest due sources, settle expired holds,
/// reconcile, persist. Returns whether any source failed.
fn cycle(ctx: &mut Context, out: &mut dyn Write, err: &mut dyn Write) -> Result<bool, CliError> {
    let w = |e: std::io::Error| CliError::Io("stdout".into(), e);
    let fetcher = ctx.fetcher();
    let now = Utc::now();
    let mut failed = false;
    for (source, result) in ctx.engine.poll_once(&fetcher, now) {
        match result {
            Ok(report) => {
                writeln!(out, "{source}: {} observations, digest {}", report.observations, report.payload_digest).map_err(w)?;
                for applied in &report.outcomes {
                    writeln!(out, "  {}", applied.summary()).map_err(w)?;
                }
            }
            Err(e) => {
                failed = true;
                writeln!(err, "{source}: {e}").map_err(w)?;
            }
        }
    }
    for t in ctx.engine.expire_holds(&fetcher, now) {
        writeln!(out, "expired {}", ticket_row(&t)).map_err(w)?;
    }
    let rec = ctx.engine.reconcile(now)?;
    for applied in &rec.unassigned {
        writeln!(out, "  {}", applied.summary()).map_err(w)?;
    }
    ctx.save()?;
    Ok(failed)
}

/// `<region> <metric> <date> prev=<p> new=<v> <DECISION> [rules=..] [+extra] -> <ACTION>`
pub fn validate_row(a: &Applied) -> String {
    let date = a.date.map(|d| d.to_string()).unwrap_or_else(|| "-".into());
    let prev = a.prev.map(|p| p.to_string()).unwrap_or_else(|| "-".into());
    let head = format!("{} {} {} prev={} new={}", a.region_id, a.metric, date, prev, a.proposed);
    let action = match a.disposition {
        Disposition::Unchanged => return format!("{head} UNCHANGED"),
        Disposition::AlreadyHeld => return format!("{head} ALREADY_HELD"),
        Disposition::AlreadyRejected => return format!("{head} ALREADY_REJECTED"),
        Disposition::Applied(action) => action,
    };
    let deployment: Vec<_> = a.rules.iter().copied().filter(|r| r.is_deployment_rule()).collect();
    let mut line = head;
    if deployment.is_empty() && !matches!(action, GateAction::Reject) {
        line.push_str(" ALLOW");
    } else {
        line.push_str(" BLOCK");
    }
    if !deployment.is_empty() {
        line.push_str(&format!(" rules={}", epiqc_core::gate::format_rules(&deployment)));
    }
    for extra in a.rules.iter().filter(|r| !r.is_deployment_rule()) {
        line.push_str(&format!(" +{}", extra.as_str()));
    }
    let action = match action {
        GateAction::Commit => "COMMIT",
        GateAction::Repair => "REPAIR",
        GateAction::Replace => "REPLACE",
        GateAction::Hold => "HOLD",
        GateAction::Reject => "REJECT",
    };
    format!("{line} -> {action}")
}

fn ticket_row(t: &HoldTicket) -> String {
    let date = t.proposed.headline_date().map(|d| d.to_string()).unwrap_or_else(|| "-".into());
    let prev = t.previous.map(|p| p.to_string()).unwrap_or_else(|| "-".into());
    format!(
        "#{} {:?} {} {} {} {}->{} rules={} expires={}",
        t.ticket_id,
        t.state,
        t.region_id,
        t.metric,
        date,
        prev,
        t.proposed.headline_value(),
        epiqc_core::gate::format_rules(&t.triggered_rules),
        t.expires_at.to_rfc3339()
    )
}

/// Resolves `path` against `base` unless it is absolute.
pub(crate) fn resolve_path(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

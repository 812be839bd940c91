mod commands;
mod config;
mod output;
mod services;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use minispiffe_core::policy::Scalar;
use minispiffe_core::{Clock, SystemClock};

use crate::commands::{EntryCreate, PolicyCheck};
use crate::config::{CliConfig, CONFIG_ENV};
use crate::output::{CliError, Exit, Format, Out};

/// Workload identity for CI/CD pipelines.
///
/// Exit codes: 0 success, 1 denied, 2 usage or parse error, 3 runtime error.
#[derive(Debug, Parser)]
#[command(name = "minispiffe", version)]
struct Cli {
    /// Output format.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Configuration file (JSON).
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Log level for diagnostics on stderr.
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the control-plane server.
    Server {
        #[command(subcommand)]
        action: RunOnly,
    },
    /// Run a node agent serving the Workload API.
    Agent {
        #[command(subcommand)]
        action: RunOnly,
    },
    /// Manage registration entries through the server's admin endpoint.
    Entry {
        #[command(subcommand)]
        action: EntryCommand,
    },
    /// Evaluate authorization policies.
    Policy {
        #[command(subcommand)]
        action: PolicyCommand,
    },
    /// Run the mock token service.
    Sts {
        #[command(subcommand)]
        action: RunOnly,
    },
    /// Run simulated CI/CD scenarios.
    Sim {
        #[command(subcommand)]
        action: SimCommand,
    },
    /// Inspect SPIFFE IDs.
    Id {
        #[command(subcommand)]
        action: IdCommand,
    },
    /// Check bundled fixtures against their golden files.
    Fixtures {
        #[command(subcommand)]
        action: FixturesCommand,
    },
}

#[derive(Debug, Subcommand)]
enum RunOnly {
    /// Start the service using the configuration file.
    Run,
}

#[derive(Debug, Subcommand)]
enum EntryCommand {
    /// Register an entry.
    Create(EntryCreateArgs),
    /// List registered entries.
    List {
        #[command(flatten)]
        admin: AdminArg,
    },
}

#[derive(Debug, Args)]
struct AdminArg {
    /// Admin endpoint; defaults to the configured server's.
    #[arg(long)]
    admin: Option<String>,
}

#[derive(Debug, Args)]
struct EntryCreateArgs {
    #[arg(long)]
    spiffe_id: String,
    #[arg(long)]
    parent_id: String,
    /// Selector `type:value`; repeatable.
    #[arg(long = "selector", required = true)]
    selectors: Vec<String>,
    #[arg(long, default_value_t = 3600)]
    ttl: i64,
    /// Mark as a node entry.
    #[arg(long)]
    node: bool,
    #[command(flatten)]
    admin: AdminArg,
}

#[derive(Debug, Subcommand)]
enum PolicyCommand {
    /// Decide one request. Exit 0 on allow, 1 on deny, 2 on parse error.
    Check(PolicyCheckArgs),
}

#[derive(Debug, Args)]
struct PolicyCheckArgs {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    id: String,
    #[arg(long)]
    action: String,
    #[arg(long)]
    resource: String,
    /// Context entry `key=value`; repeatable.
    #[arg(long = "ctx", value_parser = commands::parse_ctx)]
    ctx: Vec<(String, Scalar)>,
    /// Evaluation time in epoch seconds; defaults to now.
    #[arg(long)]
    now: Option<i64>,
}

#[derive(Debug, Subcommand)]
enum SimCommand {
    /// Run a scenario and print its summary.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the audit log (JSON lines) here.
        #[arg(long)]
        audit_out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum IdCommand {
    /// Parse and print the components of a SPIFFE ID.
    Parse { id: String },
}

#[derive(Debug, Subcommand)]
enum FixturesCommand {
    /// Re-run fixtures and diff against golden files.
    Verify {
        #[arg(long, default_value = "fixtures")]
        root: PathBuf,
        /// Rewrite drifted golden files.
        #[arg(long)]
        bless: bool,
    },
}

fn admin_addr(arg: &AdminArg, config: &CliConfig) -> String {
    arg.admin
        .clone()
        .or_else(|| config.server.as_ref().map(|s| s.admin_addr.clone()))
        .unwrap_or_else(|| "127.0.0.1:8082".into())
}

fn dispatch(cli: &Cli, config: &CliConfig, out: Out) -> Result<(), CliError> {
    match &cli.command {
        Command::Server {
            action: RunOnly::Run,
        } => services::server_run(out, config.server()?),
        Command::Agent {
            action: RunOnly::Run,
        } => services::agent_run(out, config.agent()?),
        Command::Sts {
            action: RunOnly::Run,
        } => services::sts_run(out, config.sts()?),
        Command::Entry {
            action: EntryCommand::Create(a),
        } => commands::entry_create(
            out,
            EntryCreate {
                admin: &admin_addr(&a.admin, config),
                spiffe_id: &a.spiffe_id,
                parent_id: &a.parent_id,
                selectors: &a.selectors,
                ttl: a.ttl,
                node: a.node,
            },
        ),
        Command::Entry {
            action: EntryCommand::List { admin },
        } => commands::entry_list(out, &admin_addr(admin, config)),
        Command::Policy {
            action: PolicyCommand::Check(a),
        } => commands::policy_check(
            out,
            PolicyCheck {
                policy: &a.policy,
                id: &a.id,
                action: &a.action,
                resource: &a.resource,
                context: a.ctx.iter().cloned().collect::<BTreeMap<_, _>>(),
                now: a.now.unwrap_or_else(|| SystemClock.now()),
            },
        ),
        Command::Sim {
            action:
                SimCommand::Run {
                    scenario,
                    seed,
                    audit_out,
                },
        } => commands::sim_run(out, scenario, *seed, audit_out.as_deref()),
        Command::Id {
            action: IdCommand::Parse { id },
        } => commands::id_parse(out, id),
        Command::Fixtures {
            action: FixturesCommand::Verify { root, bless },
        } => commands::fixtures_verify(out, root, *bless),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let early = Out {
        format: cli.format.unwrap_or_default(),
    };
    let config = match CliConfig::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            early.error(&e);
            return e.exit.into();
        }
    };
    let out = Out {
        format: cli.format.or(config.format).unwrap_or_default(),
    };
    let level = cli
        .log_level
        .clone()
        .or_else(|| config.log_level.clone())
        .unwrap_or_else(|| "info".into());
    env_logger::Builder::new().parse_filters(&level).init();

    match dispatch(&cli, &config, out) {
        Ok(()) => Exit::Success.into(),
        Err(e) => {
            out.error(&e);
            e.exit.into()
        }
    }
}

//! Service configuration file (JSON). Flags override file values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use minispiffe_core::agent::{AgentSettings, WorkloadInfo};
use minispiffe_core::crypto::{deserialize_bundle, TrustBundle};
use minispiffe_core::server::ServerSettings;
use minispiffe_core::{Selector, TrustDomain};
use serde::Deserialize;

use crate::output::{CliError, Format};

pub const CONFIG_ENV: &str = "MINISPIFFE_CONFIG";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub log_level: Option<String>,
    pub format: Option<Format>,
    pub server: Option<ServerConfig>,
    pub agent: Option<AgentConfig>,
    pub sts: Option<StsConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub trust_domain: TrustDomain,
    #[serde(default = "default_api_addr")]
    pub api_addr: String,
    #[serde(default = "default_admin_addr")]
    pub admin_addr: String,
    /// Federation endpoint; disabled when absent.
    #[serde(default)]
    pub federation_addr: Option<String>,
    #[serde(default)]
    pub settings: ServerSettings,
    /// Entry log file; entries are kept in memory only when absent.
    #[serde(default)]
    pub entries_path: Option<PathBuf>,
    /// Join token to the selectors it attests.
    #[serde(default)]
    pub join_tokens: BTreeMap<String, Vec<Selector>>,
    #[serde(default)]
    pub federation: Vec<PeerConfig>,
    /// Where to write the current bundle whenever its sequence changes.
    #[serde(default)]
    pub bundle_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerConfig {
    pub trust_domain: TrustDomain,
    pub endpoint: String,
    /// Bootstrap bundle file obtained out of band.
    pub bundle: PathBuf,
    #[serde(default = "default_refresh")]
    pub refresh_interval_seconds: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub server_addr: String,
    /// Bundle file that authenticates the server before attestation.
    pub trust_bundle: PathBuf,
    pub join_token: String,
    #[serde(default = "default_workload_addr")]
    pub workload_addr: String,
    #[serde(default)]
    pub settings: AgentSettings,
    /// Workload API handles and the metadata bound to each.
    #[serde(default)]
    pub workloads: BTreeMap<String, WorkloadInfo>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StsConfig {
    #[serde(default = "default_sts_addr")]
    pub addr: String,
    /// Trust policy files.
    pub roles: Vec<PathBuf>,
    /// Issuer bundle files, re-read periodically.
    pub issuer_bundles: Vec<PathBuf>,
    /// Fixes the session key and credential values. Random when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_api_addr() -> String {
    "127.0.0.1:8081".into()
}

fn default_admin_addr() -> String {
    "127.0.0.1:8082".into()
}

fn default_workload_addr() -> String {
    "127.0.0.1:8083".into()
}

fn default_sts_addr() -> String {
    "127.0.0.1:8084".into()
}

fn default_refresh() -> u64 {
    300
}

impl CliConfig {
    /// Reads `path`, or the file named by `MINISPIFFE_CONFIG`, or nothing.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let from_env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let Some(path) = path.map(Path::to_path_buf).or(from_env) else {
            return Ok(CliConfig::default());
        };
        let text = read_file(&path)?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::usage("BadConfig", format!("{}: {e}", path.display())))
    }

    pub fn server(&self) -> Result<&ServerConfig, CliError> {
        self.server
            .as_ref()
            .ok_or_else(|| CliError::usage("BadConfig", "config has no server section"))
    }

    pub fn agent(&self) -> Result<&AgentConfig, CliError> {
        self.agent
            .as_ref()
            .ok_or_else(|| CliError::usage("BadConfig", "config has no agent section"))
    }

    pub fn sts(&self) -> Result<&StsConfig, CliError> {
        self.sts
            .as_ref()
            .ok_or_else(|| CliError::usage("BadConfig", "config has no sts section"))
    }
}

pub fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::usage("Unreadable", format!("{}: {e}", path.display())))
}

pub fn read_bundle(path: &Path) -> Result<TrustBundle, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::usage("Unreadable", format!("{}: {e}", path.display())))?;
    deserialize_bundle(&bytes)
        .map_err(|e| CliError::usage("BadBundle", format!("{}: {e}", path.display())))
}

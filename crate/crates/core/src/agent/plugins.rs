use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attestation::{Selector, SelectorSet};

/// What the agent knows about a caller, gathered when its handle was bound.
/// Workloads never supply this themselves.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadInfo {
    pub env: BTreeMap<String, String>,
    pub launch_path: Option<String>,
    /// Simulator-issued facts.
    pub sim: BTreeMap<String, String>,
    pub k8s_service_account: Option<String>,
    /// Container labels as a container runtime would report them.
    pub docker_labels: BTreeMap<String, String>,
}

impl WorkloadInfo {
    /// Introspects the current process: its environment and executable path.
    pub fn from_current_process() -> Self {
        WorkloadInfo {
            env: std::env::vars().collect(),
            launch_path: std::env::current_exe()
                .ok()
                .map(|p| p.to_string_lossy().into_owned()),
            ..WorkloadInfo::default()
        }
    }
}

/// Resolves selectors of one kind from workload metadata.
pub trait SelectorPlugin: Send + Sync {
    fn name(&self) -> &'static str;
    fn resolve(&self, info: &WorkloadInfo) -> Vec<Selector>;
}

/// `env:KEY=VALUE` per environment variable.
#[derive(Debug, Clone, Copy, Default)]
pub struct EnvPlugin;

impl SelectorPlugin for EnvPlugin {
    fn name(&self) -> &'static str {
        "env"
    }

    fn resolve(&self, info: &WorkloadInfo) -> Vec<Selector> {
        info.env
            .iter()
            .filter_map(|(k, v)| Selector::new("env", &format!("{k}={v}")).ok())
            .collect()
    }
}

/// `unix_path:<path>` for the launch path.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnixPathPlugin;

impl SelectorPlugin for UnixPathPlugin {
    fn name(&self) -> &'static str {
        "unix_path"
    }

    fn resolve(&self, info: &WorkloadInfo) -> Vec<Selector> {
        info.launch_path
            .iter()
            .filter_map(|p| Selector::new("unix_path", p).ok())
            .collect()
    }
}

/// `sim:<key>=<value>` per simulator fact.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimPlugin;

impl SelectorPlugin for SimPlugin {
    fn name(&self) -> &'static str {
        "sim"
    }

    fn resolve(&self, info: &WorkloadInfo) -> Vec<Selector> {
        info.sim
            .iter()
            .filter_map(|(k, v)| Selector::new("sim", &format!("{k}={v}")).ok())
            .collect()
    }
}

/// `k8s_sa:<name>` for a service account. Stands in for a Kubernetes
/// workload attestor; no cluster is consulted.
#[derive(Debug, Clone, Copy, Default)]
pub struct K8sPlugin;

impl SelectorPlugin for K8sPlugin {
    fn name(&self) -> &'static str {
        "k8s"
    }

    fn resolve(&self, info: &WorkloadInfo) -> Vec<Selector> {
        info.k8s_service_account
            .iter()
            .filter_map(|sa| Selector::new("k8s_sa", sa).ok())
            .collect()
    }
}

/// `docker_label:<key>=<value>` per container label. No container runtime
/// is consulted.
#[derive(Debug, Clone, Copy, Default)]
pub struct DockerLabelPlugin;

impl SelectorPlugin for DockerLabelPlugin {
    fn name(&self) -> &'static str {
        "docker"
    }

    fn resolve(&self, info: &WorkloadInfo) -> Vec<Selector> {
        info.docker_labels
            .iter()
            .filter_map(|(k, v)| Selector::new("docker_label", &format!("{k}={v}")).ok())
            .collect()
    }
}

/// Plugin names accepted in agent configuration.
pub const PLUGIN_NAMES: [&str; 5] = ["env", "unix_path", "sim", "k8s", "docker"];

pub fn plugin_by_name(name: &str) -> Option<Box<dyn SelectorPlugin>> {
    match name {
        "env" => Some(Box::new(EnvPlugin)),
        "unix_path" => Some(Box::new(UnixPathPlugin)),
        "sim" => Some(Box::new(SimPlugin)),
        "k8s" => Some(Box::new(K8sPlugin)),
        "docker" => Some(Box::new(DockerLabelPlugin)),
        _ => None,
    }
}

/// Union of every plugin's selectors. Values no selector can carry are skipped.
pub fn resolve_selectors(plugins: &[Box<dyn SelectorPlugin>], info: &WorkloadInfo) -> SelectorSet {
    plugins.iter().flat_map(|p| p.resolve(info)).collect()
}

//! Long-running `server`, `agent` and `sts` services. Each prints one ready
//! line to stdout, logs to stderr and runs until killed.

use std::fs;
use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use minispiffe_core::agent::{serve_workload_api, Agent, TlsLink};
use minispiffe_core::crypto::serialize_bundle;
use minispiffe_core::server::{
    serve_admin, serve_api, serve_federation, EntryStore, FederationPeer, ServerState, TcpTransport,
};
use minispiffe_core::{Broker, Clock, StsTrustPolicy, SystemClock};
use serde_json::json;

use crate::config::{read_bundle, read_file, AgentConfig, ServerConfig, StsConfig};
use crate::output::{CliError, Out};

const TICK: Duration = Duration::from_secs(1);

fn bind(addr: &str) -> Result<TcpListener, CliError> {
    TcpListener::bind(addr).map_err(|e| CliError::runtime("BindFailed", format!("{addr}: {e}")))
}

fn local(l: &TcpListener) -> String {
    l.local_addr().map(|a| a.to_string()).unwrap_or_default()
}

fn write_bundle(state: &ServerState, path: &std::path::Path) {
    if let Err(e) = fs::write(path, serialize_bundle(&state.bundle())) {
        log::warn!("cannot write bundle to {}: {e}", path.display());
    }
}

pub fn server_run(out: Out, cfg: &ServerConfig) -> Result<(), CliError> {
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let store = match &cfg.entries_path {
        Some(p) => EntryStore::open(p)
            .map_err(|e| CliError::runtime("StoreFailed", format!("{}: {e}", p.display())))?,
        None => EntryStore::in_memory(),
    };
    let state = ServerState::with_store(
        cfg.trust_domain.clone(),
        cfg.settings.clone(),
        store,
        clock.now(),
    )
    .map_err(|e| CliError::usage("BadConfig", e))?;
    let state = Arc::new(state);
    for (token, selectors) in &cfg.join_tokens {
        state.add_join_token(token, selectors.iter().cloned().collect());
    }
    for p in &cfg.federation {
        let peer = FederationPeer::new(
            p.trust_domain.clone(),
            &p.endpoint,
            read_bundle(&p.bundle)?,
            p.refresh_interval_seconds,
        )
        .and_then(|peer| state.add_federation_peer(peer))
        .map_err(|e| CliError::usage(e.code(), format!("peer {}: {e}", p.trust_domain)));
        peer?;
    }

    let api = bind(&cfg.api_addr)?;
    let admin = bind(&cfg.admin_addr)?;
    if !admin.local_addr().is_ok_and(|a| a.ip().is_loopback()) {
        return Err(CliError::usage(
            "BadConfig",
            "admin_addr must be a loopback address",
        ));
    }
    let federation = cfg.federation_addr.as_deref().map(bind).transpose()?;
    let ready = json!({
        "event": "ready",
        "trust_domain": state.trust_domain().as_str(),
        "api": local(&api),
        "admin": local(&admin),
        "federation": federation.as_ref().map(local),
    });

    let (s, c) = (state.clone(), clock.clone());
    thread::spawn(move || {
        if let Err(e) = serve_api(s, api, c) {
            log::error!("api endpoint stopped: {e}");
        }
    });
    let s = state.clone();
    thread::spawn(move || serve_admin(s, admin));
    if let Some(listener) = federation {
        let (s, c) = (state.clone(), clock.clone());
        thread::spawn(move || {
            if let Err(e) = serve_federation(s, listener, c) {
                log::error!("federation endpoint stopped: {e}");
            }
        });
    }
    if let Some(path) = &cfg.bundle_out {
        write_bundle(&state, path);
    }
    out.emit(&ready, || {
        format!(
            "server {} ready: api {} admin {}",
            ready["trust_domain"].as_str().unwrap_or_default(),
            ready["api"].as_str().unwrap_or_default(),
            ready["admin"].as_str().unwrap_or_default()
        )
    });

    let mut sequence = state.bundle().sequence;
    loop {
        thread::sleep(TICK);
        let now = clock.now();
        match state.maintain(now) {
            Ok(m) if m.server_svid_renewed => log::info!("server SVID renewed"),
            Ok(_) => {}
            Err(e) => log::error!("maintenance failed: {e}"),
        }
        for peer in state.due_federation_refreshes(now) {
            match state.refresh_federated_bundle(&peer, &TcpTransport, now) {
                Ok(b) => log::info!("federated bundle {peer} sequence {}", b.sequence),
                Err(e) => log::warn!("federation refresh {peer}: {}", e.code()),
            }
        }
        let current = state.bundle().sequence;
        if current != sequence {
            sequence = current;
            if let Some(path) = &cfg.bundle_out {
                write_bundle(&state, path);
            }
        }
    }
}

fn resolve(addr: &str) -> Result<SocketAddr, CliError> {
    addr.to_socket_addrs()
        .ok()
        .and_then(|mut a| a.next())
        .ok_or_else(|| CliError::usage("BadConfig", format!("cannot resolve {addr}")))
}

pub fn agent_run(out: Out, cfg: &AgentConfig) -> Result<(), CliError> {
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let anchor = read_bundle(&cfg.trust_bundle)?;
    let link = Arc::new(TlsLink::new(resolve(&cfg.server_addr)?));
    let agent =
        Agent::new(link, cfg.settings.clone(), anchor).map_err(|e| CliError::usage(e.code(), e))?;
    let agent_id = agent
        .bootstrap(&cfg.join_token, clock.now())
        .map_err(|e| CliError::runtime(e.code(), e))?;
    for (handle, info) in &cfg.workloads {
        agent.bind_workload(handle, info.clone());
    }
    let agent = Arc::new(agent);
    let listener = bind(&cfg.workload_addr)?;
    if !listener.local_addr().is_ok_and(|a| a.ip().is_loopback()) {
        return Err(CliError::usage(
            "BadConfig",
            "workload_addr must be a loopback address",
        ));
    }
    let ready = json!({
        "event": "ready",
        "agent_id": agent_id.to_string(),
        "workload_api": local(&listener),
    });
    let (a, c) = (agent.clone(), clock.clone());
    thread::spawn(move || serve_workload_api(a, listener, c));
    out.emit(&ready, || {
        format!(
            "agent {} ready: workload api {}",
            ready["agent_id"].as_str().unwrap_or_default(),
            ready["workload_api"].as_str().unwrap_or_default()
        )
    });

    loop {
        thread::sleep(TICK);
        match agent.rotation_tick(clock.now()) {
            Ok(rotations) => {
                for r in rotations {
                    log::info!("rotated {} not_after={}", r.spiffe_id, r.not_after);
                }
            }
            Err(e) => log::warn!("rotation tick: {}", e.code()),
        }
    }
}

fn load_roles(cfg: &StsConfig) -> Result<Vec<StsTrustPolicy>, CliError> {
    cfg.roles
        .iter()
        .map(|p| {
            serde_json::from_str(&read_file(p)?)
                .map_err(|e| CliError::usage("BadPolicy", format!("{}: {e}", p.display())))
        })
        .collect()
}

pub fn sts_run(out: Out, cfg: &StsConfig) -> Result<(), CliError> {
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let mut broker = Broker::new(cfg.seed.unwrap_or_else(rand::random));
    let roles = load_roles(cfg)?;
    for role in &roles {
        broker.add_role(role.clone());
    }
    for p in &cfg.issuer_bundles {
        broker.set_issuer_bundle(read_bundle(p)?);
    }
    let broker = Arc::new(Mutex::new(broker));
    let listener = bind(&cfg.addr)?;
    let ready = json!({
        "event": "ready",
        "addr": local(&listener),
        "roles": roles.iter().map(|r| r.role_name.as_str()).collect::<Vec<_>>(),
    });
    let (b, c) = (broker.clone(), clock.clone());
    thread::spawn(move || minispiffe_core::sts::serve_broker(b, listener, c));
    out.emit(&ready, || {
        format!("sts ready: {}", ready["addr"].as_str().unwrap_or_default())
    });

    loop {
        thread::sleep(TICK * 5);
        for p in &cfg.issuer_bundles {
            match read_bundle(p) {
                Ok(bundle) => broker
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .set_issuer_bundle(bundle),
                Err(e) => log::warn!("issuer bundle: {}", e.message),
            }
        }
    }
}

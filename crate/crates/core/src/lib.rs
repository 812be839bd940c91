//! Workload identity for CI/CD: SPIFFE IDs, X.509 and JWT SVIDs, selector
//! attestation, a control-plane server and node agent, federation, an
//! authorization DSL, a mock token service and a deterministic scenario
//! simulator.

pub mod agent;
pub mod attestation;
pub mod clock;
pub mod crypto;
pub mod fixtures;
pub mod id;
pub mod policy;
pub mod server;
pub mod sim;
pub mod sts;
pub mod tls;
pub mod wire;

pub use attestation::{RegistrationEntry, Selector, SelectorSet};
pub use clock::{Clock, SimClock, SystemClock};
pub use crypto::{Authority, AuthorityConfig, JwtSvid, TrustBundle, X509Svid};
pub use id::{SpiffeId, SpiffeIdPattern, TrustDomain};
pub use policy::{evaluate, parse_policy, AccessRequest, Decision, PolicySet};
pub use sim::{run_scenario, AuditRecord, RunReport, Scenario, Summary};
pub use sts::{Broker, ScopedCredentials, StsTrustPolicy};

//! Mutual TLS keyed by X.509-SVIDs.
//!
//! Peers are authenticated by SPIFFE ID and trust bundle, never by DNS name.
//! Certificate checks run against the bundle set and time returned by a
//! [`TrustSource`] at handshake time, so simulated clocks apply.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread;

use rustls::client::danger::{HandshakeSignatureValid, ServerCertVerified, ServerCertVerifier};
use rustls::crypto::{CryptoProvider, WebPkiSupportedAlgorithms};
use rustls::pki_types::{CertificateDer, PrivateKeyDer, PrivatePkcs8KeyDer, ServerName, UnixTime};
use rustls::server::danger::{ClientCertVerified, ClientCertVerifier};
use rustls::server::{ClientHello, ResolvesServerCert};
use rustls::sign::CertifiedKey;
use rustls::{
    CertificateError, ClientConfig, ClientConnection, DigitallySignedStruct, DistinguishedName,
    OtherError, ServerConfig, ServerConnection, SignatureScheme, StreamOwned,
};
use thiserror::Error;

use crate::crypto::{peek_spiffe_id, verify_x509_svid_in, SvidError, TrustBundle, X509Svid};
use crate::id::SpiffeId;
use crate::wire::{read_frame, write_frame};

/// Placeholder SNI. Verification ignores it.
const SERVER_NAME: &str = "spiffe.invalid";

#[derive(Debug, Clone)]
pub struct TrustSnapshot {
    pub bundles: Vec<TrustBundle>,
    pub now: i64,
}

pub type TrustSource = Arc<dyn Fn() -> TrustSnapshot + Send + Sync>;

pub fn fixed_trust(bundles: Vec<TrustBundle>, now: i64) -> TrustSource {
    Arc::new(move || TrustSnapshot {
        bundles: bundles.clone(),
        now,
    })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HandshakeError {
    /// The named side rejected its peer's certificate.
    #[error("{side} rejected peer certificate: {cause}")]
    PeerRejected { side: Side, cause: SvidError },
    #[error("TLS failure: {0}")]
    Tls(String),
    #[error("I/O failure: {0}")]
    Io(String),
}

impl HandshakeError {
    pub fn svid_cause(&self) -> Option<SvidError> {
        match self {
            HandshakeError::PeerRejected { cause, .. } => Some(*cause),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Client,
    Server,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Client => "client",
            Side::Server => "server",
        })
    }
}

fn provider() -> Arc<CryptoProvider> {
    Arc::new(rustls::crypto::ring::default_provider())
}

fn check(
    trust: &TrustSource,
    end_entity: &CertificateDer<'_>,
    inters: &[CertificateDer<'_>],
) -> Result<(), rustls::Error> {
    let snap = trust();
    let inters: Vec<Vec<u8>> = inters.iter().map(|c| c.to_vec()).collect();
    verify_x509_svid_in(end_entity, &inters, &snap.bundles, snap.now)
        .map(|_| ())
        .map_err(|e| {
            rustls::Error::InvalidCertificate(CertificateError::Other(OtherError(Arc::new(e))))
        })
}

struct SpiffeVerifier {
    trust: TrustSource,
    algs: WebPkiSupportedAlgorithms,
    mandatory: bool,
}

impl std::fmt::Debug for SpiffeVerifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpiffeVerifier")
            .field("mandatory", &self.mandatory)
            .finish()
    }
}

impl SpiffeVerifier {
    fn new(trust: TrustSource, mandatory: bool) -> Arc<Self> {
        Arc::new(SpiffeVerifier {
            trust,
            algs: provider().signature_verification_algorithms,
            mandatory,
        })
    }
}

impl ServerCertVerifier for SpiffeVerifier {
    fn verify_server_cert(
        &self,
        end_entity: &CertificateDer<'_>,
        intermediates: &[CertificateDer<'_>],
        _server_name: &ServerName<'_>,
        _ocsp_response: &[u8],
        _now: UnixTime,
    ) -> Result<ServerCertVerified, rustls::Error> {
        check(&self.trust, end_entity, intermediates).map(|_| ServerCertVerified::assertion())
    }

    fn verify_tls12_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        rustls::crypto::verify_tls12_signature(message, cert, dss, &self.algs)
    }

    fn verify_tls13_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        rustls::crypto::verify_tls13_signature(message, cert, dss, &self.algs)
    }

    fn supported_verify_schemes(&self) -> Vec<SignatureScheme> {
        self.algs.supported_schemes()
    }
}

impl ClientCertVerifier for SpiffeVerifier {
    fn client_auth_mandatory(&self) -> bool {
        self.mandatory
    }

    fn root_hint_subjects(&self) -> &[DistinguishedName] {
        &[]
    }

    fn verify_client_cert(
        &self,
        end_entity: &CertificateDer<'_>,
        intermediates: &[CertificateDer<'_>],
        _now: UnixTime,
    ) -> Result<ClientCertVerified, rustls::Error> {
        check(&self.trust, end_entity, intermediates).map(|_| ClientCertVerified::assertion())
    }

    fn verify_tls12_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        rustls::crypto::verify_tls12_signature(message, cert, dss, &self.algs)
    }

    fn verify_tls13_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        rustls::crypto::verify_tls13_signature(message, cert, dss, &self.algs)
    }

    fn supported_verify_schemes(&self) -> Vec<SignatureScheme> {
        self.algs.supported_schemes()
    }
}

fn chain_and_key(svid: &X509Svid) -> (Vec<CertificateDer<'static>>, PrivateKeyDer<'static>) {
    let chain = svid
        .cert_chain()
        .into_iter()
        .map(CertificateDer::from)
        .collect();
    let key = PrivateKeyDer::Pkcs8(PrivatePkcs8KeyDer::from(svid.private_key.pkcs8().to_vec()));
    (chain, key)
}

fn tls_err(e: rustls::Error) -> HandshakeError {
    HandshakeError::Tls(e.to_string())
}

/// Server config presenting `svid`. With `require_client_cert` unset,
/// clients may connect anonymously; presented certificates are still verified.
pub fn server_config(
    svid: &X509Svid,
    trust: TrustSource,
    require_client_cert: bool,
) -> Result<Arc<ServerConfig>, HandshakeError> {
    let (chain, key) = chain_and_key(svid);
    let cfg = ServerConfig::builder_with_provider(provider())
        .with_protocol_versions(&[&rustls::version::TLS13])
        .map_err(tls_err)?
        .with_client_cert_verifier(SpiffeVerifier::new(trust, require_client_cert))
        .with_single_cert(chain, key)
        .map_err(tls_err)?;
    Ok(Arc::new(cfg))
}

/// Client config; presents `svid` when given.
pub fn client_config(
    svid: Option<&X509Svid>,
    trust: TrustSource,
) -> Result<Arc<ClientConfig>, HandshakeError> {
    let builder = ClientConfig::builder_with_provider(provider())
        .with_protocol_versions(&[&rustls::version::TLS13])
        .map_err(tls_err)?
        .dangerous()
        .with_custom_certificate_verifier(SpiffeVerifier::new(trust, true));
    let cfg = match svid {
        Some(svid) => {
            let (chain, key) = chain_and_key(svid);
            builder.with_client_auth_cert(chain, key).map_err(tls_err)?
        }
        None => builder.with_no_client_auth(),
    };
    Ok(Arc::new(cfg))
}

/// Current SVID to present; consulted on every handshake.
pub type SvidSource = Arc<dyn Fn() -> Arc<X509Svid> + Send + Sync>;

struct SvidResolver {
    source: SvidSource,
    cache: Mutex<Option<(Vec<u8>, Arc<CertifiedKey>)>>,
}

impl std::fmt::Debug for SvidResolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SvidResolver")
    }
}

impl ResolvesServerCert for SvidResolver {
    fn resolve(&self, _hello: ClientHello<'_>) -> Option<Arc<CertifiedKey>> {
        let svid = (self.source)();
        let mut cache = self.cache.lock().unwrap_or_else(|p| p.into_inner());
        if let Some((leaf, key)) = cache.as_ref() {
            if *leaf == svid.leaf {
                return Some(key.clone());
            }
        }
        let (chain, der) = chain_and_key(&svid);
        let key = provider().key_provider.load_private_key(der).ok()?;
        let certified = Arc::new(CertifiedKey::new(chain, key));
        *cache = Some((svid.leaf.clone(), certified.clone()));
        Some(certified)
    }
}

/// Like [`server_config`], presenting whatever `source` yields at handshake time.
pub fn dynamic_server_config(
    source: SvidSource,
    trust: TrustSource,
    require_client_cert: bool,
) -> Result<Arc<ServerConfig>, HandshakeError> {
    let cfg = ServerConfig::builder_with_provider(provider())
        .with_protocol_versions(&[&rustls::version::TLS13])
        .map_err(tls_err)?
        .with_client_cert_verifier(SpiffeVerifier::new(trust, require_client_cert))
        .with_cert_resolver(Arc::new(SvidResolver {
            source,
            cache: Mutex::new(None),
        }));
    Ok(Arc::new(cfg))
}

fn classify(side: Side, e: rustls::Error) -> HandshakeError {
    if let rustls::Error::InvalidCertificate(CertificateError::Other(OtherError(inner))) = &e {
        if let Some(cause) = inner.downcast_ref::<SvidError>() {
            return HandshakeError::PeerRejected {
                side,
                cause: *cause,
            };
        }
    }
    tls_err(e)
}

fn new_client(cfg: Arc<ClientConfig>) -> Result<ClientConnection, HandshakeError> {
    let name = ServerName::try_from(SERVER_NAME).expect("static server name is valid");
    ClientConnection::new(cfg, name).map_err(tls_err)
}

/// Peer SPIFFE ID and certificate chain of an established connection.
pub fn peer_identity(certs: Option<&[CertificateDer<'_>]>) -> Option<(SpiffeId, Vec<Vec<u8>>)> {
    let certs = certs?;
    let leaf = certs.first()?;
    let id = peek_spiffe_id(leaf).ok()?;
    Some((id, certs.iter().map(|c| c.to_vec()).collect()))
}

/// In-memory connected pair, driven by shuttling records between the ends.
pub struct MemoryPair {
    pub client: ClientConnection,
    pub server: ServerConnection,
}

impl MemoryPair {
    /// Runs a full handshake, reporting the first side that failed.
    pub fn connect(
        client_cfg: Arc<ClientConfig>,
        server_cfg: Arc<ServerConfig>,
    ) -> Result<Self, HandshakeError> {
        let mut pair = MemoryPair {
            client: new_client(client_cfg)?,
            server: ServerConnection::new(server_cfg).map_err(tls_err)?,
        };
        pair.pump()?;
        if pair.client.is_handshaking() || pair.server.is_handshaking() {
            return Err(HandshakeError::Tls("handshake stalled".to_owned()));
        }
        Ok(pair)
    }

    fn pump(&mut self) -> Result<(), HandshakeError> {
        loop {
            let mut moved = false;
            while self.client.wants_write() {
                let mut buf = Vec::new();
                self.client
                    .write_tls(&mut buf)
                    .map_err(|e| HandshakeError::Io(e.to_string()))?;
                let mut rd = buf.as_slice();
                while !rd.is_empty() {
                    self.server
                        .read_tls(&mut rd)
                        .map_err(|e| HandshakeError::Io(e.to_string()))?;
                    if let Err(e) = self.server.process_new_packets() {
                        // Deliver the alert so the client also fails.
                        let mut alert = Vec::new();
                        let _ = self.server.write_tls(&mut alert);
                        let _ = self.client.read_tls(&mut alert.as_slice());
                        let _ = self.client.process_new_packets();
                        return Err(classify(Side::Server, e));
                    }
                }
                moved = true;
            }
            while self.server.wants_write() {
                let mut buf = Vec::new();
                self.server
                    .write_tls(&mut buf)
                    .map_err(|e| HandshakeError::Io(e.to_string()))?;
                let mut rd = buf.as_slice();
                while !rd.is_empty() {
                    self.client
                        .read_tls(&mut rd)
                        .map_err(|e| HandshakeError::Io(e.to_string()))?;
                    if let Err(e) = self.client.process_new_packets() {
                        return Err(classify(Side::Client, e));
                    }
                }
                moved = true;
            }
            if !moved {
                return Ok(());
            }
        }
    }

    pub fn client_observed_peer(&self) -> Option<SpiffeId> {
        peer_identity(self.client.peer_certificates()).map(|(id, _)| id)
    }

    pub fn server_observed_peer(&self) -> Option<SpiffeId> {
        peer_identity(self.server.peer_certificates()).map(|(id, _)| id)
    }

    /// Sends one framed request from client to server, lets `handler`
    /// answer it, and returns the response payload.
    pub fn round_trip(
        &mut self,
        request: &[u8],
        handler: impl FnOnce(&[u8], Option<Vec<Vec<u8>>>) -> Vec<u8>,
    ) -> Result<Vec<u8>, HandshakeError> {
        let io_err = |e: io::Error| HandshakeError::Io(e.to_string());
        write_frame(&mut self.client.writer(), request).map_err(io_err)?;
        self.pump()?;
        let req = read_available(&mut self.server.reader()).map_err(io_err)?;
        let req = read_frame(&mut req.as_slice())
            .map_err(io_err)?
            .ok_or_else(|| HandshakeError::Io("empty request".to_owned()))?;
        let chain = peer_identity(self.server.peer_certificates()).map(|(_, c)| c);
        let resp = handler(&req, chain);
        write_frame(&mut self.server.writer(), &resp).map_err(io_err)?;
        self.pump()?;
        let resp = read_available(&mut self.client.reader()).map_err(io_err)?;
        read_frame(&mut resp.as_slice())
            .map_err(io_err)?
            .ok_or_else(|| HandshakeError::Io("empty response".to_owned()))
    }
}

fn read_available(r: &mut impl Read) -> io::Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut buf = [0u8; 16 * 1024];
    loop {
        match r.read(&mut buf) {
            Ok(0) => return Ok(out),
            Ok(n) => out.extend_from_slice(&buf[..n]),
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(out),
            Err(e) => return Err(e),
        }
    }
}

/// Both sides' view of a completed mutual handshake.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandshakeOutcome {
    /// Peer ID as authenticated by the initiator.
    pub initiator_saw: SpiffeId,
    /// Peer ID as authenticated by the responder.
    pub responder_saw: SpiffeId,
}

/// Full mutual-TLS handshake between two SVID holders, each verifying the
/// other against its own bundle set at `now`.
pub fn mutual_handshake(
    initiator: &X509Svid,
    initiator_bundles: Vec<TrustBundle>,
    responder: &X509Svid,
    responder_bundles: Vec<TrustBundle>,
    now: i64,
) -> Result<HandshakeOutcome, HandshakeError> {
    let client = client_config(Some(initiator), fixed_trust(initiator_bundles, now))?;
    let server = server_config(responder, fixed_trust(responder_bundles, now), true)?;
    let pair = MemoryPair::connect(client, server)?;
    let missing = || HandshakeError::Tls("peer presented no SPIFFE ID".to_owned());
    Ok(HandshakeOutcome {
        initiator_saw: pair.client_observed_peer().ok_or_else(missing)?,
        responder_saw: pair.server_observed_peer().ok_or_else(missing)?,
    })
}

/// Handler for one request frame, given the verified peer chain if any.
pub type FrameHandler = Arc<dyn Fn(&[u8], Option<Vec<Vec<u8>>>) -> Vec<u8> + Send + Sync>;

/// Accepts TLS connections on `listener`, one thread per connection, until
/// the listener fails. Each connection may carry many request frames.
pub fn serve_tls(listener: TcpListener, config: Arc<ServerConfig>, handler: FrameHandler) {
    for stream in listener.incoming() {
        let Ok(stream) = stream else { continue };
        let config = config.clone();
        let handler = handler.clone();
        thread::spawn(move || {
            let Ok(conn) = ServerConnection::new(config) else {
                return;
            };
            let mut tls = StreamOwned::new(conn, stream);
            while let Ok(Some(req)) = read_frame(&mut tls) {
                let chain = peer_identity(tls.conn.peer_certificates()).map(|(_, c)| c);
                let resp = handler(&req, chain);
                if write_frame(&mut tls, &resp).is_err() {
                    break;
                }
            }
        });
    }
}

/// Blocking TLS client connection carrying framed requests.
pub struct TlsClient {
    stream: StreamOwned<ClientConnection, TcpStream>,
}

impl TlsClient {
    pub fn connect(
        addr: impl ToSocketAddrs,
        config: Arc<ClientConfig>,
    ) -> Result<Self, HandshakeError> {
        let tcp = TcpStream::connect(addr).map_err(|e| HandshakeError::Io(e.to_string()))?;
        let mut stream = StreamOwned::new(new_client(config)?, tcp);
        while stream.conn.is_handshaking() {
            stream
                .conn
                .complete_io(&mut stream.sock)
                .map_err(|e| match e.into_inner() {
                    Some(inner) => match inner.downcast::<rustls::Error>() {
                        Ok(tls) => classify(Side::Client, *tls),
                        Err(other) => HandshakeError::Io(other.to_string()),
                    },
                    None => HandshakeError::Io("connection closed".to_owned()),
                })?;
        }
        Ok(TlsClient { stream })
    }

    pub fn peer(&self) -> Option<SpiffeId> {
        peer_identity(self.stream.conn.peer_certificates()).map(|(id, _)| id)
    }

    pub fn request(&mut self, frame: &[u8]) -> io::Result<Vec<u8>> {
        write_frame(&mut self.stream, frame)?;
        self.stream.flush()?;
        read_frame(&mut self.stream)?
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed"))
    }
}

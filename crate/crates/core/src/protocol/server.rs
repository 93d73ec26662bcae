//! The cloud side: a state machine holding only what the protocol hands it
//! — an encrypted detector, the encrypted photo store, and a request log of
//! ids and message kinds. Nothing in here can decrypt anything.

use std::net::TcpListener;
use std::sync::{Arc, Mutex, RwLock};

use crate::cascade::{eval_cascade_secure, EncryptedDetector};
use crate::codec::Writer;
use crate::error::{Error, ErrorCode, Result};
use crate::retrieval::{match_photos, PhotoStore, MATCH_TOLERANCE};

use super::transport::{FrameTransport, StreamTransport};
use super::wire::{decode, encode};
use super::{MatchedPhoto, ProtocolMessage};

/// One line of the server's request log: the id and kind of every frame it
/// handled. Deliberately free of payload data.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestLogEntry {
    pub request_id: u64,
    pub kind: &'static str,
}

struct ServerState {
    /// The single active detector. Re-registration replaces it.
    detector: Option<(String, EncryptedDetector)>,
    store: PhotoStore,
}

/// Shared server: registration and uploads take the write lock, detection
/// and matching run under the read lock, so many detect/match connections
/// proceed in parallel over a consistent view of the store.
pub struct CloudServer {
    state: RwLock<ServerState>,
    log: Mutex<Vec<RequestLogEntry>>,
}

impl Default for CloudServer {
    fn default() -> Self {
        Self::new()
    }
}

impl CloudServer {
    pub fn new() -> Self {
        Self {
            state: RwLock::new(ServerState {
                detector: None,
                store: PhotoStore::new(),
            }),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Handles one raw frame and always produces exactly one reply frame.
    /// Frames that fail to decode are answered with an `ErrorReply` carrying
    /// request id 0.
    pub fn handle_frame(&self, frame: &[u8]) -> Vec<u8> {
        let reply = match decode(frame) {
            Ok(msg) => self.handle_message(msg),
            Err(e) => {
                self.log_request(0, "invalid");
                ProtocolMessage::ErrorReply {
                    request_id: 0,
                    code: e.wire_code(),
                    message: e.to_string(),
                }
            }
        };
        encode(&reply)
    }

    pub fn handle_message(&self, msg: ProtocolMessage) -> ProtocolMessage {
        let request_id = msg.request_id();
        self.log_request(request_id, msg.kind());
        let result = match msg {
            ProtocolMessage::RegisterDetector {
                detector_id,
                detector,
                ..
            } => self.register(detector_id, detector).map(|_| ProtocolMessage::Ack { request_id }),
            ProtocolMessage::DetectRequest { windows, .. } => {
                self.detect(windows).map(|outcomes| ProtocolMessage::DetectResponse {
                    request_id,
                    outcomes,
                })
            }
            ProtocolMessage::UploadPhotos { records, .. } => self
                .upload(records)
                .map(|_| ProtocolMessage::Ack { request_id }),
            ProtocolMessage::MatchRequest { query, lambda, .. } => {
                self.matching(query, lambda).map(|photos| ProtocolMessage::MatchResponse {
                    request_id,
                    photos,
                })
            }
            other => Err(Error::Remote {
                code: ErrorCode::BadRequest,
                message: format!("{} is not a request", other.kind()),
            }),
        };
        result.unwrap_or_else(|e| ProtocolMessage::ErrorReply {
            request_id,
            code: e.wire_code(),
            message: e.to_string(),
        })
    }

    fn register(&self, detector_id: String, detector: EncryptedDetector) -> Result<()> {
        let mut state = self.state.write().unwrap();
        state.detector = Some((detector_id, detector));
        Ok(())
    }

    fn detect(
        &self,
        windows: Vec<(super::WindowGeometry, crate::aspe::EncQueryVector)>,
    ) -> Result<Vec<(super::WindowGeometry, crate::cascade::DetectionOutcome)>> {
        let state = self.state.read().unwrap();
        let (_, detector) = state.detector.as_ref().ok_or(Error::DetectorMissing)?;
        windows
            .into_iter()
            .map(|(geom, ew)| Ok((geom, eval_cascade_secure(detector, &ew)?)))
            .collect()
    }

    fn upload(&self, records: Vec<crate::retrieval::PhotoRecord>) -> Result<()> {
        let mut state = self.state.write().unwrap();
        state.store.insert_all(records)
    }

    fn matching(
        &self,
        query: crate::aspe::EncQueryVector,
        lambda: u32,
    ) -> Result<Vec<MatchedPhoto>> {
        let state = self.state.read().unwrap();
        if state.store.is_empty() {
            return Ok(Vec::new());
        }
        let ids = match_photos(&state.store, &query, lambda as usize, MATCH_TOLERANCE)?;
        Ok(ids
            .into_iter()
            .map(|id| {
                let r = state.store.record(&id).expect("matched id came from the store");
                MatchedPhoto {
                    photo_id: r.photo_id.clone(),
                    nonce: r.nonce,
                    ciphertext: r.ciphertext.clone(),
                }
            })
            .collect())
    }

    fn log_request(&self, request_id: u64, kind: &'static str) {
        self.log.lock().unwrap().push(RequestLogEntry { request_id, kind });
    }

    pub fn request_log(&self) -> Vec<RequestLogEntry> {
        self.log.lock().unwrap().clone()
    }

    /// Serializes everything the server holds — detector, store, request log
    /// — into one buffer. This is the honest-but-curious adversary's entire
    /// view at rest; leakage audits scan it for planted plaintext.
    pub fn snapshot_bytes(&self) -> Vec<u8> {
        let state = self.state.read().unwrap();
        let log = self.log.lock().unwrap();
        let mut w = Writer::new();
        match &state.detector {
            Some((id, det)) => {
                w.put_u8(1);
                w.put_str(id);
                w.put_blob(&det.to_bytes());
            }
            None => w.put_u8(0),
        }
        w.put_blob(&state.store.to_bytes());
        w.put_u32(log.len() as u32);
        for entry in log.iter() {
            w.put_u64(entry.request_id);
            w.put_str(entry.kind);
        }
        w.into_bytes()
    }

    /// Serves one connection: one reply per received frame, until the peer
    /// closes. On a transport-level framing error a best-effort error reply
    /// is sent before giving up on the connection.
    pub fn serve_connection(&self, transport: &mut dyn FrameTransport) -> Result<()> {
        loop {
            match transport.recv() {
                Ok(Some(frame)) => transport.send(&self.handle_frame(&frame))?,
                Ok(None) => return Ok(()),
                Err(e) => {
                    let reply = ProtocolMessage::ErrorReply {
                        request_id: 0,
                        code: e.wire_code(),
                        message: e.to_string(),
                    };
                    let _ = transport.send(&encode(&reply));
                    return Err(e);
                }
            }
        }
    }
}

/// Accept loop: one thread per connection, all sharing the server state.
/// Runs until the listener fails.
pub fn serve_listener(server: Arc<CloudServer>, listener: TcpListener) -> Result<()> {
    loop {
        let (stream, _) = listener.accept()?;
        let server = Arc::clone(&server);
        std::thread::spawn(move || {
            let mut transport = StreamTransport::new(stream);
            let _ = server.serve_connection(&mut transport);
        });
    }
}

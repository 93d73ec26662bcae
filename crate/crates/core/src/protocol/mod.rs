//! The three-role protocol: detector vendor, user, and cloud server.
//!
//! Message flow, in the order the off-line and on-line phases run:
//!
//! 1. the vendor registers an encrypted detector (`RegisterDetector`);
//! 2. a user submits encrypted detection windows (`DetectRequest`) and gets
//!    per-window outcomes back (`DetectResponse`);
//! 3. the user uploads encrypted photos with encrypted labels
//!    (`UploadPhotos`);
//! 4. the user queries by encrypted label vector plus plaintext `λ`
//!    (`MatchRequest`) and receives the matching encrypted photos
//!    (`MatchResponse`).
//!
//! Every request carries a `request_id` that the single reply echoes
//! exactly; failures come back as `ErrorReply` with a numeric code.
//!
//! ## What the server sees (leakage profile)
//!
//! The server is honest-but-curious: it follows the protocol and inspects
//! everything. Its view is, exhaustively:
//!
//! * detector structure (stage count and sizes) and the plaintext vote
//!   parameters `(alpha, beta, theta)` of every weak classifier;
//! * ciphertext vectors (encrypted hyperplanes, windows, labels, queries)
//!   and the inner products `t_i`/`ret_i` they evaluate to;
//! * per-window vote choices, stage scores, stage outcomes, and the final
//!   detection decision, plus window geometry;
//! * photo ciphertexts, their nonces and lengths, photo ids;
//! * query cardinality `λ` and which stored photos matched.
//!
//! It never holds key material, plaintext pixels, plaintext hyperplanes, or
//! plaintext label bits; the acceptance suite plants canaries and scans the
//! serialized server state to keep this list honest.

mod client;
mod server;
mod transport;
mod wire;

pub use client::{
    user_detect, user_query, user_upload, vendor_publish, PhotoUpload, RequestClient,
    DEFAULT_DETECT_BATCH,
};
pub use server::{serve_listener, CloudServer, RequestLogEntry};
pub use transport::{ChannelTransport, FrameTransport, StreamTransport};
pub use wire::{decode, encode, MAX_FRAME_LEN, WIRE_VERSION};

use crate::aspe::EncQueryVector;
use crate::cascade::{DetectionOutcome, EncryptedDetector};
use crate::error::ErrorCode;
use crate::retrieval::{PhotoRecord, NONCE_LEN};

/// Where a detection window sits in the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowGeometry {
    pub origin_x: u32,
    pub origin_y: u32,
    pub scale: f64,
}

/// One photo coming back from a match: everything the user needs to decrypt
/// it locally.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPhoto {
    pub photo_id: String,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
}

/// Tagged wire messages for the three-role exchange.
#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolMessage {
    RegisterDetector {
        request_id: u64,
        detector_id: String,
        detector: EncryptedDetector,
    },
    DetectRequest {
        request_id: u64,
        windows: Vec<(WindowGeometry, EncQueryVector)>,
    },
    DetectResponse {
        request_id: u64,
        outcomes: Vec<(WindowGeometry, DetectionOutcome)>,
    },
    UploadPhotos {
        request_id: u64,
        records: Vec<PhotoRecord>,
    },
    MatchRequest {
        request_id: u64,
        query: EncQueryVector,
        lambda: u32,
    },
    MatchResponse {
        request_id: u64,
        photos: Vec<MatchedPhoto>,
    },
    ErrorReply {
        request_id: u64,
        code: ErrorCode,
        message: String,
    },
    /// Positive reply for requests that return no payload.
    Ack { request_id: u64 },
}

impl ProtocolMessage {
    pub fn request_id(&self) -> u64 {
        match self {
            ProtocolMessage::RegisterDetector { request_id, .. }
            | ProtocolMessage::DetectRequest { request_id, .. }
            | ProtocolMessage::DetectResponse { request_id, .. }
            | ProtocolMessage::UploadPhotos { request_id, .. }
            | ProtocolMessage::MatchRequest { request_id, .. }
            | ProtocolMessage::MatchResponse { request_id, .. }
            | ProtocolMessage::ErrorReply { request_id, .. }
            | ProtocolMessage::Ack { request_id } => *request_id,
        }
    }

    /// Short name used in the server's request log.
    pub fn kind(&self) -> &'static str {
        match self {
            ProtocolMessage::RegisterDetector { .. } => "register-detector",
            ProtocolMessage::DetectRequest { .. } => "detect-request",
            ProtocolMessage::DetectResponse { .. } => "detect-response",
            ProtocolMessage::UploadPhotos { .. } => "upload-photos",
            ProtocolMessage::MatchRequest { .. } => "match-request",
            ProtocolMessage::MatchResponse { .. } => "match-response",
            ProtocolMessage::ErrorReply { .. } => "error-reply",
            ProtocolMessage::Ack { .. } => "ack",
        }
    }
}
